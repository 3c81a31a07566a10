//! Training objectives: class-weighted cross-entropy on expression logits,
//! mean squared error on landmarks, and their weighted sum.

use crate::autograd::{cross_entropy_forward, mse_forward, Scalar, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::expression::{Expression, NUM_CLASSES};

/// Positive per-class multipliers with mean 1.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassWeights([f64; NUM_CLASSES]);

impl ClassWeights {
    pub fn uniform() -> Self {
        ClassWeights([1.0; NUM_CLASSES])
    }

    /// Rescales `raw` to mean 1. Every entry must be positive and finite.
    pub fn new(raw: [f64; NUM_CLASSES]) -> Result<Self> {
        if let Some(c) = raw.iter().position(|w| !(w.is_finite() && *w > 0.0)) {
            return Err(Error::config(format!(
                "class weight for {} must be positive, got {}",
                Expression::ALL[c],
                raw[c]
            )));
        }
        let mean = raw.iter().sum::<f64>() / NUM_CLASSES as f64;
        Ok(ClassWeights(raw.map(|w| w / mean)))
    }

    /// Inverse-frequency weights: `w_c ∝ 1 / counts_c`, mean-normalized.
    pub fn from_frequencies(counts: &[usize; NUM_CLASSES]) -> Result<Self> {
        if let Some(c) = counts.iter().position(|&n| n == 0) {
            return Err(Error::config(format!(
                "class {} has no samples; merge or drop the class before weighting",
                Expression::ALL[c]
            )));
        }
        // w_c = C · Π_{k≠c} n_k / Σ_j Π_{k≠j} n_k, in exact integer arithmetic
        let others = |c: usize| -> u128 {
            (0..NUM_CLASSES)
                .filter(|&k| k != c)
                .map(|k| counts[k] as u128)
                .product()
        };
        let products: Vec<u128> = (0..NUM_CLASSES).map(others).collect();
        let total = products.iter().sum::<u128>() as f64;
        let mut raw = [0.0; NUM_CLASSES];
        for (w, &p) in raw.iter_mut().zip(&products) {
            *w = (NUM_CLASSES as u128 * p) as f64 / total;
        }
        Ok(ClassWeights(raw))
    }

    pub fn values(&self) -> &[f64; NUM_CLASSES] {
        &self.0
    }

    pub fn as_scalars<T: Scalar>(&self) -> Vec<T> {
        self.0.iter().map(|&w| T::of(w)).collect()
    }
}

/// `-(1/N) Σ_n Σ_c w_c t[n,c] log softmax(logits)[n,c]`, where each target
/// row is a class distribution.
pub fn weighted_cross_entropy<T: Scalar>(
    logits: &Tensor<T>,
    targets: &Tensor<T>,
    weights: &ClassWeights,
) -> Result<T> {
    cross_entropy_forward(logits, targets, &weights.as_scalars::<T>()).map(|(v, _)| v)
}

/// Mean over all entries of `(pred - target)²`.
pub fn mse_landmark_loss<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<T> {
    mse_forward(pred, target)
}

fn check_lambda(lambda: f64) -> Result<()> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::config(format!(
            "lambda must be a finite value >= 0, got {lambda}"
        )));
    }
    Ok(())
}

/// `expr_loss + lambda · land_loss`.
pub fn joint_loss<T: Scalar>(expr_loss: T, land_loss: T, lambda: f64) -> Result<T> {
    check_lambda(lambda)?;
    Ok(expr_loss + T::of(lambda) * land_loss)
}

/// Differentiable form of [`joint_loss`] on a tape.
pub fn joint_loss_on<T: Scalar>(
    tape: &mut Tape<T>,
    expr_loss: Var,
    land_loss: Var,
    lambda: f64,
) -> Result<Var> {
    check_lambda(lambda)?;
    tape.add_scaled(expr_loss, land_loss, T::of(lambda))
}

/// One-hot target rows for class ids.
pub fn one_hot<T: Scalar>(classes: &[usize]) -> Result<Tensor<T>> {
    let mut data = vec![T::zero(); classes.len() * NUM_CLASSES];
    for (r, &c) in classes.iter().enumerate() {
        if c >= NUM_CLASSES {
            return Err(Error::usage(format!("class id {c} at row {r} is outside 0..6")));
        }
        data[r * NUM_CLASSES + c] = T::one();
    }
    Tensor::new(vec![classes.len(), NUM_CLASSES], data)
}
