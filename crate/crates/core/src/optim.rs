//! First-order optimisers. Steps *ascend* the objective whose gradient they
//! receive; pass a negated gradient to minimise.

use serde::{Deserialize, Serialize};

use crate::error::{Result, SnlError};

/// Optimiser choice and hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerConfig {
    Adam { beta1: f64, beta2: f64, eps: f64 },
    Sgd,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl OptimizerConfig {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "adam" => Ok(Self::default()),
            "sgd" => Ok(OptimizerConfig::Sgd),
            other => Err(SnlError::UnknownName {
                kind: "optimizer",
                name: other.to_string(),
            }),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            OptimizerConfig::Adam { .. } => "adam",
            OptimizerConfig::Sgd => "sgd",
        }
    }

    pub fn build(&self, dim: usize) -> Optimizer {
        match *self {
            OptimizerConfig::Adam { beta1, beta2, eps } => Optimizer::Adam(AdamState::new(dim, beta1, beta2, eps)),
            OptimizerConfig::Sgd => Optimizer::Sgd,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(dim: usize, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            m: vec![0.0; dim],
            v: vec![0.0; dim],
            t: 0,
            beta1,
            beta2,
            eps,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Optimizer {
    Adam(AdamState),
    Sgd,
}

impl Optimizer {
    /// `params += lr * direction(grads)`. Nothing is modified if any gradient
    /// entry is non-finite.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) -> Result<()> {
        if params.len() != grads.len() {
            return Err(SnlError::DimensionMismatch {
                expected: params.len(),
                got: grads.len(),
                context: "optimizer gradient",
            });
        }
        if let Some((i, g)) = grads.iter().enumerate().find(|(_, g)| !g.is_finite()) {
            return Err(SnlError::NonFiniteGradient { index: i, value: *g });
        }
        match self {
            Optimizer::Sgd => {
                for (p, g) in params.iter_mut().zip(grads) {
                    *p += lr * g;
                }
            }
            Optimizer::Adam(s) => {
                if s.m.len() != params.len() {
                    return Err(SnlError::DimensionMismatch {
                        expected: s.m.len(),
                        got: params.len(),
                        context: "optimizer state",
                    });
                }
                s.t += 1;
                let c1 = 1.0 - s.beta1.powi(s.t as i32);
                let c2 = 1.0 - s.beta2.powi(s.t as i32);
                for i in 0..params.len() {
                    let g = grads[i];
                    s.m[i] = s.beta1 * s.m[i] + (1.0 - s.beta1) * g;
                    s.v[i] = s.beta2 * s.v[i] + (1.0 - s.beta2) * g * g;
                    let m_hat = s.m[i] / c1;
                    let v_hat = s.v[i] / c2;
                    params[i] += lr * m_hat / (v_hat.sqrt() + s.eps);
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params() {
        for cfg in [OptimizerConfig::default(), OptimizerConfig::Sgd] {
            let mut opt = cfg.build(2);
            let mut p = [0.3, -1.0];
            opt.step(&mut p, &[0.0, 0.0], 0.1).unwrap();
            assert_eq!(p, [0.3, -1.0]);
        }
    }

    #[test]
    fn first_adam_step_is_lr_times_sign() {
        let mut opt = OptimizerConfig::default().build(3);
        let mut p = [0.0; 3];
        let g = [2.5, -0.01, 100.0];
        opt.step(&mut p, &g, 1e-3).unwrap();
        for (pi, gi) in p.iter().zip(g) {
            // m̂ = g, v̂ = g², so the step is lr·g/(|g| + ε)
            let expected = 1e-3 * gi / (gi.abs() + 1e-8);
            assert!((pi - expected).abs() < 1e-18);
        }
    }

    #[test]
    fn sgd_ascends() {
        let mut opt = OptimizerConfig::Sgd.build(1);
        let mut p = [0.0];
        opt.step(&mut p, &[1.0], 0.1).unwrap();
        assert_eq!(p, [0.1]);
    }

    #[test]
    fn non_finite_gradient_aborts_untouched() {
        let mut opt = OptimizerConfig::default().build(2);
        let mut p = [1.0, 2.0];
        match opt.step(&mut p, &[0.5, f64::NAN], 0.1) {
            Err(SnlError::NonFiniteGradient { index, .. }) => assert_eq!(index, 1),
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(p, [1.0, 2.0]);
        if let Optimizer::Adam(s) = &opt {
            assert_eq!(s.t, 0);
        }
    }

    #[test]
    fn names_parse() {
        assert_eq!(OptimizerConfig::parse("sgd").unwrap(), OptimizerConfig::Sgd);
        assert_eq!(OptimizerConfig::parse("adam").unwrap().name(), "adam");
        assert!(OptimizerConfig::parse("lbfgs").is_err());
    }
}
