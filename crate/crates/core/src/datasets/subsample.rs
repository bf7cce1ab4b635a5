use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::LabeledImageSet;
use crate::error::{Error, Result};

/// Class-stratified random subset keeping `max(1, round(fraction · N_c))`
/// samples of each class `c`. Kept samples stay in their original order.
pub fn subsample(set: &LabeledImageSet, fraction: f64, seed: u64) -> Result<LabeledImageSet> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::invalid(format!("fraction must lie in (0, 1], got {fraction}")));
    }
    if fraction * (set.len() as f64) < set.num_classes() as f64 {
        return Err(Error::invalid(format!(
            "fraction {fraction} of {} samples cannot cover {} classes",
            set.len(),
            set.num_classes()
        )));
    }
    let mut by_class = vec![Vec::new(); set.num_classes()];
    for (i, &l) in set.labels.iter().enumerate() {
        by_class[l].push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keep = Vec::new();
    for members in &mut by_class {
        if members.is_empty() {
            continue;
        }
        let n = ((fraction * members.len() as f64).round() as usize).clamp(1, members.len());
        members.shuffle(&mut rng);
        keep.extend_from_slice(&members[..n]);
    }
    keep.sort_unstable();
    set.select(&keep)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn balanced(classes: usize, per_class: usize) -> LabeledImageSet {
        let n = classes * per_class;
        LabeledImageSet::new(
            Tensor::new([n, 1, 1, 1], (0..n).map(|i| i as f64).collect()).unwrap(),
            (0..n).map(|i| i % classes).collect(),
            (0..classes).map(|c| c.to_string()).collect(),
        )
        .unwrap()
    }

    #[test]
    fn full_fraction_is_identity() {
        let s = balanced(3, 5);
        assert_eq!(subsample(&s, 1.0, 4).unwrap(), s);
    }

    #[test]
    fn cifar_sized_fractions() {
        let s = balanced(10, 5000);
        assert_eq!(subsample(&s, 0.1, 1).unwrap().class_counts(), [500; 10]);
        let tiny = subsample(&s, 0.0004, 1).unwrap();
        assert_eq!(tiny.class_counts(), [2; 10]);
        assert_eq!(tiny.len(), 20);
    }

    #[test]
    fn deterministic_per_seed() {
        let s = balanced(4, 50);
        assert_eq!(subsample(&s, 0.3, 9).unwrap(), subsample(&s, 0.3, 9).unwrap());
        assert_ne!(subsample(&s, 0.3, 9).unwrap(), subsample(&s, 0.3, 10).unwrap());
    }

    #[test]
    fn too_small_fraction() {
        let s = balanced(10, 10);
        assert!(subsample(&s, 0.05, 0).is_err());
        assert!(subsample(&s, 0.0, 0).is_err());
        assert!(subsample(&s, 1.5, 0).is_err());
    }
}
