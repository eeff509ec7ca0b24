//! Adam with bias correction. Weight decay is the coupled form: `λ·θ` is
//! added to the gradient before the moment updates.

use serde::{Deserialize, Serialize};

use super::Parameters;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AdamState {
    config: AdamConfig,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new<P: Parameters>(config: AdamConfig, params: &P) -> Self {
        let shapes: Vec<usize> = params.params().iter().map(|p| p.data.len()).collect();
        AdamState {
            config,
            step: 0,
            first: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            second: shapes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update. Gradients are validated before any parameter is touched.
    pub fn step<P: Parameters>(&mut self, params: &mut P, grads: &P) -> Result<()> {
        let grad_views = grads.params();
        if grad_views.len() != self.first.len() {
            return Err(Error::dim("adam tensors", self.first.len(), grad_views.len()));
        }
        for (g, m) in grad_views.iter().zip(&self.first) {
            if g.data.len() != m.len() {
                return Err(Error::dim(format!("adam tensor {}", g.name), m.len(), g.data.len()));
            }
            if g.data.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("gradient of {}", g.name)));
            }
        }
        let mut param_views = params.params_mut();
        if param_views.len() != grad_views.len() {
            return Err(Error::dim("parameter tensors", grad_views.len(), param_views.len()));
        }

        self.step += 1;
        let AdamConfig {
            learning_rate,
            beta1,
            beta2,
            epsilon,
            weight_decay,
        } = self.config;
        let t = self.step as i32;
        let correction1 = 1.0 - beta1.powi(t);
        let correction2 = 1.0 - beta2.powi(t);

        for (((p, g), m), v) in param_views
            .iter_mut()
            .zip(&grad_views)
            .zip(&mut self.first)
            .zip(&mut self.second)
        {
            if p.data.len() != g.data.len() {
                return Err(Error::dim(format!("parameter {}", p.name), g.data.len(), p.data.len()));
            }
            for i in 0..p.data.len() {
                let grad = g.data[i] + weight_decay * p.data[i];
                m[i] = beta1 * m[i] + (1.0 - beta1) * grad;
                v[i] = beta2 * v[i] + (1.0 - beta2) * grad * grad;
                let m_hat = m[i] / correction1;
                let v_hat = v[i] / correction2;
                p.data[i] -= learning_rate * m_hat / (v_hat.sqrt() + epsilon);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{ParamView, ParamViewMut};

    #[derive(Clone, Debug, PartialEq)]
    struct Flat(Vec<f64>);

    impl Parameters for Flat {
        fn params(&self) -> Vec<ParamView<'_>> {
            vec![ParamView {
                name: "w".into(),
                shape: vec![self.0.len()],
                data: &self.0,
            }]
        }
        fn params_mut(&mut self) -> Vec<ParamViewMut<'_>> {
            let n = self.0.len();
            vec![ParamViewMut {
                name: "w".into(),
                shape: vec![n],
                data: &mut self.0,
            }]
        }
    }

    /// Scalar Adam written straight from the update equations.
    fn scalar_adam(theta: f64, grads: &[f64], cfg: AdamConfig) -> f64 {
        let (mut m, mut v, mut th) = (0.0, 0.0, theta);
        for (t, &g0) in grads.iter().enumerate() {
            let g = g0 + cfg.weight_decay * th;
            m = cfg.beta1 * m + (1.0 - cfg.beta1) * g;
            v = cfg.beta2 * v + (1.0 - cfg.beta2) * g * g;
            let step = (t + 1) as i32;
            let mh = m / (1.0 - cfg.beta1.powi(step));
            let vh = v / (1.0 - cfg.beta2.powi(step));
            th -= cfg.learning_rate * mh / (vh.sqrt() + cfg.epsilon);
        }
        th
    }

    #[test]
    fn zero_gradient_without_decay_is_identity() {
        let mut p = Flat(vec![0.5, -2.0, 3.0]);
        let before = p.clone();
        let mut adam = AdamState::new(AdamConfig::default(), &p);
        for _ in 0..5 {
            adam.step(&mut p, &Flat(vec![0.0; 3])).unwrap();
        }
        assert_eq!(p, before);
        assert_eq!(adam.steps(), 5);
    }

    #[test]
    fn first_step_matches_scalar_oracle() {
        let cfg = AdamConfig::default();
        let mut p = Flat(vec![1.0, -1.0]);
        let mut adam = AdamState::new(cfg, &p);
        adam.step(&mut p, &Flat(vec![0.3, -2.0])).unwrap();
        assert!((p.0[0] - scalar_adam(1.0, &[0.3], cfg)).abs() < 1e-15);
        assert!((p.0[1] - scalar_adam(-1.0, &[-2.0], cfg)).abs() < 1e-15);
        // first step magnitude is ~lr and opposes the gradient
        assert!((p.0[0] - (1.0 - 1e-3)).abs() < 1e-9);
        assert!((p.0[1] - (-1.0 + 1e-3)).abs() < 1e-9);
    }

    #[test]
    fn several_steps_match_scalar_oracle_with_decay() {
        let cfg = AdamConfig {
            weight_decay: 0.1,
            ..AdamConfig::default()
        };
        let grads = [0.5, -0.1, 0.2, 0.0, 1.5];
        let mut p = Flat(vec![0.7]);
        let mut adam = AdamState::new(cfg, &p);
        for &g in &grads {
            adam.step(&mut p, &Flat(vec![g])).unwrap();
        }
        assert!((p.0[0] - scalar_adam(0.7, &grads, cfg)).abs() < 1e-14);
    }

    #[test]
    fn pure_decay_shrinks_magnitude() {
        let cfg = AdamConfig {
            weight_decay: 10.0,
            ..AdamConfig::default()
        };
        let mut p = Flat(vec![2.0, -3.0]);
        let mut adam = AdamState::new(cfg, &p);
        for _ in 0..3 {
            let before = p.0.clone();
            adam.step(&mut p, &Flat(vec![0.0, 0.0])).unwrap();
            for (a, b) in p.0.iter().zip(before) {
                assert!(a.abs() < b.abs());
            }
        }
    }

    #[test]
    fn non_finite_gradient_names_tensor() {
        let mut p = Flat(vec![1.0]);
        let mut adam = AdamState::new(AdamConfig::default(), &p);
        let err = adam.step(&mut p, &Flat(vec![f64::NAN])).unwrap_err();
        assert!(err.to_string().contains("gradient of w"), "{err}");
        assert_eq!(p.0, vec![1.0]);
        assert_eq!(adam.steps(), 0);
    }
}
