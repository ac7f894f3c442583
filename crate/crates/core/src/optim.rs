//! Adam with bias-corrected moment estimates.

use thiserror::Error;

use crate::network::{ModelGrads, ModelParams};
use crate::tensor::Tensor;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OptimError {
    #[error("learning rate must be positive, got {0}")]
    NonPositiveLearningRate(f64),
    #[error("{name} must lie in [0, 1), got {value}")]
    BadBeta { name: &'static str, value: f64 },
    #[error("epsilon must be positive, got {0}")]
    BadEpsilon(f64),
    #[error("non-finite gradient for `{0}`; step rejected")]
    NonFiniteGradient(String),
    #[error("`{name}`: gradient shape {got:?} does not match parameter {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("expected {expected} parameter tensors, got {got}")]
    TensorCount { expected: usize, got: usize },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<(), OptimError> {
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(OptimError::NonPositiveLearningRate(self.lr));
        }
        for (name, value) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&value) {
                return Err(OptimError::BadBeta { name, value });
            }
        }
        if !(self.eps > 0.0) {
            return Err(OptimError::BadEpsilon(self.eps));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    step: u64,
    names: Vec<String>,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
}

impl AdamState {
    /// Zero moments for tensors of the given names and shapes.
    pub fn new(names: Vec<String>, shapes: &[&[usize]], config: AdamConfig) -> Result<Self, OptimError> {
        config.validate()?;
        let zeros: Vec<Tensor> = shapes.iter().map(|s| Tensor::zeros(s).expect("valid parameter shape")).collect();
        Ok(Self {
            config,
            step: 0,
            names,
            first: zeros.clone(),
            second: zeros,
        })
    }

    /// State for every trainable tensor of `params`.
    pub fn for_model(params: &ModelParams, config: AdamConfig) -> Result<Self, OptimError> {
        let trainable = params.trainable();
        let names = trainable.iter().map(|(n, _)| n.clone()).collect();
        let shapes: Vec<&[usize]> = trainable.iter().map(|(_, t)| t.dims()).collect();
        Self::new(names, &shapes, config)
    }

    pub(crate) fn from_parts(
        config: AdamConfig,
        step: u64,
        names: Vec<String>,
        first: Vec<Tensor>,
        second: Vec<Tensor>,
    ) -> Result<Self, OptimError> {
        config.validate()?;
        Ok(Self {
            config,
            step,
            names,
            first,
            second,
        })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn first_moments(&self) -> &[Tensor] {
        &self.first
    }

    pub fn second_moments(&self) -> &[Tensor] {
        &self.second
    }

    /// One update of `params` in place. Every gradient is validated before
    /// anything is modified, so a rejected step leaves all state untouched.
    pub fn step_tensors(&mut self, mut params: Vec<&mut Tensor>, grads: Vec<&Tensor>) -> Result<(), OptimError> {
        if params.len() != self.names.len() || grads.len() != self.names.len() {
            return Err(OptimError::TensorCount {
                expected: self.names.len(),
                got: params.len().min(grads.len()),
            });
        }
        for ((name, p), g) in self.names.iter().zip(&params).zip(&grads) {
            if p.dims() != g.dims() {
                return Err(OptimError::ShapeMismatch {
                    name: name.clone(),
                    expected: p.dims().to_vec(),
                    got: g.dims().to_vec(),
                });
            }
            if !g.is_finite() {
                return Err(OptimError::NonFiniteGradient(name.clone()));
            }
        }
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let t = self.step as f64;
        let c1 = 1.0 - beta1.powf(t);
        let c2 = 1.0 - beta2.powf(t);
        for (((p, g), m), v) in params.iter_mut().zip(&grads).zip(&mut self.first).zip(&mut self.second) {
            for (((p, &g), m), v) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *p -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }

    /// Applies `grads` to the trainable tensors of `params`.
    pub fn step(&mut self, params: &mut ModelParams, grads: &ModelGrads) -> Result<(), OptimError> {
        let grad_tensors = grads.tensors();
        let trainable: Vec<&mut Tensor> = params.trainable_mut().into_iter().map(|(_, t)| t).collect();
        self.step_tensors(trainable, grad_tensors)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Textbook scalar Adam, written independently of the tensor version.
    struct ScalarAdam {
        m: f64,
        v: f64,
        b1t: f64,
        b2t: f64,
    }

    impl ScalarAdam {
        fn new() -> Self {
            Self { m: 0.0, v: 0.0, b1t: 1.0, b2t: 1.0 }
        }

        fn update(&mut self, x: f64, g: f64, c: &AdamConfig) -> f64 {
            self.b1t *= c.beta1;
            self.b2t *= c.beta2;
            self.m = c.beta1 * self.m + (1.0 - c.beta1) * g;
            self.v = c.beta2 * self.v + (1.0 - c.beta2) * g * g;
            x - c.lr * (self.m / (1.0 - self.b1t)) / ((self.v / (1.0 - self.b2t)).sqrt() + c.eps)
        }
    }

    fn scalar_state(config: AdamConfig) -> AdamState {
        AdamState::new(vec!["x".into()], &[&[1]], config).unwrap()
    }

    #[test]
    fn first_step_from_zero() {
        let mut state = scalar_state(AdamConfig::default());
        let mut x = Tensor::zeros(&[1]).unwrap();
        let g = Tensor::full(&[1], 1.0).unwrap();
        state.step_tensors(vec![&mut x], vec![&g]).unwrap();
        assert!((x.data()[0] + 0.001).abs() < 1e-10);
        let mut oracle = ScalarAdam::new();
        assert!((x.data()[0] - oracle.update(0.0, 1.0, &AdamConfig::default())).abs() < 1e-12);
        assert_eq!(state.step_count(), 1);
    }

    #[test]
    fn matches_scalar_oracle_over_many_steps() {
        let config = AdamConfig::default();
        let mut state = scalar_state(config);
        let mut oracle = ScalarAdam::new();
        let mut x = Tensor::full(&[1], 0.7).unwrap();
        let mut y = 0.7;
        for i in 0..100 {
            let g = (i as f64 * 0.37).sin() + 0.1 * x.data()[0];
            state.step_tensors(vec![&mut x], vec![&Tensor::full(&[1], g).unwrap()]).unwrap();
            y = oracle.update(y, g, &config);
            assert!((x.data()[0] - y).abs() < 1e-12);
        }
        assert_eq!(state.step_count(), 100);
    }

    #[test]
    fn zero_grads_leave_params() {
        let mut state = scalar_state(AdamConfig::default());
        let mut x = Tensor::full(&[1], 3.0).unwrap();
        for _ in 0..5 {
            state.step_tensors(vec![&mut x], vec![&Tensor::zeros(&[1]).unwrap()]).unwrap();
        }
        assert_eq!(x.data()[0], 3.0);
        assert!(state.first_moments()[0].data()[0] == 0.0 && state.second_moments()[0].data()[0] == 0.0);
    }

    #[test]
    fn step_is_not_proportional_to_gradient_scale() {
        let mut a = scalar_state(AdamConfig::default());
        let mut b = scalar_state(AdamConfig::default());
        let (mut x, mut y) = (Tensor::zeros(&[1]).unwrap(), Tensor::zeros(&[1]).unwrap());
        a.step_tensors(vec![&mut x], vec![&Tensor::full(&[1], 0.3).unwrap()]).unwrap();
        b.step_tensors(vec![&mut y], vec![&Tensor::full(&[1], 3.0).unwrap()]).unwrap();
        let ratio = y.data()[0] / x.data()[0];
        assert!(ratio > 0.0 && ratio < 10.0, "ratio {ratio}");
    }

    #[test]
    fn invalid_configuration() {
        for lr in [0.0, -1e-3, f64::NAN] {
            let config = AdamConfig { lr, ..AdamConfig::default() };
            assert!(matches!(AdamState::new(vec![], &[], config), Err(OptimError::NonPositiveLearningRate(_))));
        }
        let config = AdamConfig { beta2: 1.0, ..AdamConfig::default() };
        assert!(AdamState::new(vec![], &[], config).is_err());
    }

    #[test]
    fn non_finite_gradient_rejects_whole_step() {
        let mut state = AdamState::new(vec!["a".into(), "b".into()], &[&[2], &[1]], AdamConfig::default()).unwrap();
        let mut a = Tensor::full(&[2], 1.0).unwrap();
        let mut b = Tensor::full(&[1], 1.0).unwrap();
        let ga = Tensor::full(&[2], 1.0).unwrap();
        let mut gb = Tensor::zeros(&[1]).unwrap();
        gb.data_mut()[0] = f64::INFINITY;
        let err = state.step_tensors(vec![&mut a, &mut b], vec![&ga, &gb]).unwrap_err();
        assert_eq!(err, OptimError::NonFiniteGradient("b".into()));
        assert_eq!(a.data(), &[1.0, 1.0]);
        assert_eq!(state.step_count(), 0);
    }

    proptest! {
        #[test]
        fn first_step_is_bounded_by_lr(grads in proptest::collection::vec(-1e3f64..1e3, 1..32)) {
            let n = grads.len();
            let mut state = AdamState::new(vec!["p".into()], &[&[n]], AdamConfig::default()).unwrap();
            let mut p = Tensor::zeros(&[n]).unwrap();
            state.step_tensors(vec![&mut p], vec![&Tensor::from_vec(&[n], grads).unwrap()]).unwrap();
            for v in p.data() {
                prop_assert!(v.abs() <= 1e-3 * (1.0 + 1e-9));
            }
        }

        #[test]
        fn update_is_elementwise(grads in proptest::collection::vec(-5f64..5.0, 2..16), shift in 1usize..15) {
            let n = grads.len();
            let rotated: Vec<f64> = (0..n).map(|i| grads[(i + shift) % n]).collect();
            let run = |g: Vec<f64>| {
                let mut state = AdamState::new(vec!["p".into()], &[&[n]], AdamConfig::default()).unwrap();
                let mut p = Tensor::full(&[n], 0.5).unwrap();
                let g = Tensor::from_vec(&[n], g).unwrap();
                for _ in 0..3 {
                    state.step_tensors(vec![&mut p], vec![&g]).unwrap();
                }
                p.into_data()
            };
            let a = run(grads);
            let b = run(rotated);
            for i in 0..n {
                prop_assert_eq!(b[i].to_bits(), a[(i + shift) % n].to_bits());
            }
        }
    }
}
