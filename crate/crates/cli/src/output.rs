//! Plain-text and image dumps of single kernels.

/// Binary 8-bit PGM, values min-max scaled to 0..=255. A constant kernel
/// maps to all zeros.
pub fn kernel_pgm(values: &[f64], size: usize) -> Vec<u8> {
    let (lo, hi) = values.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let mut out = format!("P5\n{size} {size}\n255\n").into_bytes();
    out.extend(values.iter().map(|&v| if hi > lo { (255.0 * (v - lo) / (hi - lo)).round() as u8 } else { 0 }));
    out
}

/// One line per kernel row, values in `%.9e` notation.
pub fn kernel_csv(values: &[f64], size: usize) -> String {
    let mut out = String::new();
    for row in values.chunks(size) {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:.9e}")).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_layout() {
        let p = kernel_pgm(&[-1.0, 0.0, 1.0, 0.5], 2);
        let header = b"P5\n2 2\n255\n";
        assert_eq!(&p[..header.len()], header);
        assert_eq!(&p[header.len()..], [0, 128, 255, 191]);
        assert_eq!(&kernel_pgm(&[3.0; 4], 2)[header.len()..], [0; 4]);
    }

    #[test]
    fn csv_layout() {
        assert_eq!(kernel_csv(&[1.0, -0.5, 0.0, 2.5e-3], 2), "1.000000000e0,-5.000000000e-1\n0.000000000e0,2.500000000e-3\n");
    }
}
