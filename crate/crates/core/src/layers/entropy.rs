//! Sparsity penalty on SRF basis coefficients.
//!
//! For each kernel the absolute coefficients are normalised into a
//! distribution `p_j = (|α_j| + ε) / Σ(|α| + ε)` whose Shannon entropy is
//! small when one basis function dominates.

use crate::error::{Error, Result};
use crate::tape::{BackwardCtx, Function, Tape, Var};
use crate::tensor::Tensor;

const EPS: f64 = 1e-8;

/// A basis function counts as used when it carries more than this share of
/// a kernel's absolute coefficient mass.
pub const EFFECTIVE_THRESHOLD: f64 = 0.05;

fn distribution(coeffs: &[f64]) -> (Vec<f64>, f64) {
    let s: f64 = coeffs.iter().map(|a| a.abs() + EPS).sum();
    (coeffs.iter().map(|a| (a.abs() + EPS) / s).collect(), s)
}

fn entropy(p: &[f64]) -> f64 {
    -p.iter().map(|&q| q * q.ln()).sum::<f64>()
}

fn basis_len(shape: &[usize]) -> Result<usize> {
    match shape.last() {
        Some(&b) if shape.len() >= 2 => Ok(b),
        _ => Err(Error::shape(format!("expected [.., basis] coefficients, got {shape:?}"))),
    }
}

/// Entropy of every kernel's coefficient distribution, in kernel order.
pub fn kernel_entropies(alpha: &Tensor) -> Result<Vec<f64>> {
    let b = basis_len(alpha.shape())?;
    Ok(alpha.data().chunks(b).map(|c| entropy(&distribution(c).0)).collect())
}

/// Number of basis functions above `threshold` share, per kernel.
pub fn effective_basis_counts(alpha: &Tensor, threshold: f64) -> Result<Vec<usize>> {
    let b = basis_len(alpha.shape())?;
    Ok(alpha
        .data()
        .chunks(b)
        .map(|c| distribution(c).0.iter().filter(|&&p| p > threshold).count())
        .collect())
}

struct MeanEntropy {
    basis: usize,
}

impl Function for MeanEntropy {
    fn name(&self) -> &'static str {
        "mean_entropy"
    }

    fn backward(&self, ctx: &BackwardCtx<'_>) -> Result<Vec<Option<Vec<f64>>>> {
        let alpha = ctx.inputs[0];
        let kernels = alpha.len() / self.basis;
        let scale = ctx.grad_output[0] / kernels as f64;
        let mut grad = Vec::with_capacity(alpha.len());
        for c in alpha.chunks(self.basis) {
            let (p, s) = distribution(c);
            let h = entropy(&p);
            // ∂H/∂|α_j| = (−ln p_j − H) / S
            grad.extend(c.iter().zip(&p).map(|(a, &q)| scale * (-q.ln() - h) / s * a.signum()));
        }
        Ok(vec![Some(grad)])
    }
}

/// Mean kernel entropy of `[.., basis]` coefficients as a scalar tape node.
pub fn entropy_regularizer(tape: &mut Tape, alpha: Var) -> Result<Var> {
    let b = basis_len(tape.shape(alpha))?;
    let values = tape.value(alpha);
    let kernels = values.len() / b;
    let mean = values.chunks(b).map(|c| entropy(&distribution(c).0)).sum::<f64>() / kernels as f64;
    Ok(tape.record(&[alpha], vec![1], vec![mean], Box::new(MeanEntropy { basis: b })))
}
