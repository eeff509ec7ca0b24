//! Minimal dense feed-forward engine: batched forward/backward passes,
//! Adam, seeded sampling and a handful of numerically careful scalar helpers.

mod adam;
mod dense;
mod rng;

pub use adam::{AdamConfig, AdamState};
pub use dense::{Activation, Dense, DenseNet, Trace};
pub use rng::{sample_gaussian, SeededRng, RNG_ALGORITHM};

/// Read-only view of one named parameter tensor (row-major).
#[derive(Debug)]
pub struct ParamView<'a> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a [f64],
}

/// Mutable view of one named parameter tensor (row-major).
#[derive(Debug)]
pub struct ParamViewMut<'a> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a mut [f64],
}

/// Anything that owns learnable tensors.
///
/// Both methods must list tensors in the same order with the same names;
/// gradients are represented by a value of the same type, so optimizers and
/// checkpoints can walk parameters and gradients in lock step.
pub trait Parameters {
    fn params(&self) -> Vec<ParamView<'_>>;
    fn params_mut(&mut self) -> Vec<ParamViewMut<'_>>;

    fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.data.len()).sum()
    }
}

pub(crate) fn prefix_views<'a>(prefix: &str, views: Vec<ParamView<'a>>) -> Vec<ParamView<'a>> {
    views
        .into_iter()
        .map(|mut v| {
            v.name = format!("{prefix}.{}", v.name);
            v
        })
        .collect()
}

pub(crate) fn prefix_views_mut<'a>(
    prefix: &str,
    views: Vec<ParamViewMut<'a>>,
) -> Vec<ParamViewMut<'a>> {
    views
        .into_iter()
        .map(|mut v| {
            v.name = format!("{prefix}.{}", v.name);
            v
        })
        .collect()
}

/// Numerically stable softmax (max subtraction).
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&a| (a - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// `log(softmax(logits)[index])` without forming the probabilities.
pub fn log_softmax_at(logits: &[f64], index: usize) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|&a| (a - max).exp()).sum::<f64>().ln();
    logits[index] - lse
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)`.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Index of the largest value; ties resolve to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_is_a_simplex() {
        for logits in [vec![2.0, 1.0, 0.0], vec![1000.0, -1000.0], vec![0.3; 7]] {
            let p = softmax(&logits);
            assert!(p.iter().all(|&x| x >= 0.0));
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_reference_values() {
        let p = softmax(&[2.0, 1.0, 0.0]);
        let expected = [0.665_240_955_774_821_6, 0.244_728_471_054_797_6, 0.090_030_573_170_380_46];
        for (a, b) in p.iter().zip(expected) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!((log_softmax_at(&[2.0, 1.0, 0.0], 1) - expected[1].ln()).abs() < 1e-12);
    }

    #[test]
    fn sigmoid_softplus_are_stable_at_extremes() {
        assert_eq!(sigmoid(800.0), 1.0);
        assert_eq!(sigmoid(-800.0), 0.0);
        assert!((softplus(800.0) - 800.0).abs() < 1e-12);
        assert!(softplus(-800.0) >= 0.0);
        assert!((sigmoid(logit(0.95)) - 0.95).abs() < 1e-15);
    }

    #[test]
    fn argmax_breaks_ties_low() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
        assert_eq!(argmax(&[0.0, 0.0]), 0);
    }
}
