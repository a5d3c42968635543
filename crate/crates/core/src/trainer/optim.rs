use std::fmt;
use std::str::FromStr;

use crate::error::{DspnError, Result};
use crate::gradkernel::ParamSet;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum OptimizerKind {
    Sgd,
    #[default]
    Adam,
}

impl OptimizerKind {
    pub fn as_str(self) -> &'static str {
        match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::Adam => "adam",
        }
    }
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for OptimizerKind {
    type Err = DspnError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(OptimizerKind::Sgd),
            "adam" => Ok(OptimizerKind::Adam),
            other => Err(DspnError::Config(format!("unknown optimizer {other:?} (expected sgd or adam)"))),
        }
    }
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Applies accumulated gradients to a `ParamSet`.
#[derive(Clone, Debug)]
pub enum Optimizer {
    Sgd { lr: f64 },
    Adam {
        lr: f64,
        t: u64,
        m: Vec<Vec<f64>>,
        v: Vec<Vec<f64>>,
    },
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, params: &ParamSet) -> Optimizer {
        match kind {
            OptimizerKind::Sgd => Optimizer::Sgd { lr },
            OptimizerKind::Adam => {
                let zeros: Vec<Vec<f64>> = params.iter().map(|(_, t)| vec![0.0; t.len()]).collect();
                Optimizer::Adam {
                    lr,
                    t: 0,
                    m: zeros.clone(),
                    v: zeros,
                }
            }
        }
    }

    pub fn step(&mut self, params: &mut ParamSet) {
        let ids: Vec<_> = params.ids().collect();
        match self {
            Optimizer::Sgd { lr } => {
                for id in ids {
                    let (value, grad) = params.pair_mut(id);
                    for (x, g) in value.as_mut_slice().iter_mut().zip(grad.as_slice()) {
                        *x -= *lr * g;
                    }
                }
            }
            Optimizer::Adam { lr, t, m, v } => {
                *t += 1;
                let c1 = 1.0 - ADAM_BETA1.powi(*t as i32);
                let c2 = 1.0 - ADAM_BETA2.powi(*t as i32);
                for id in ids {
                    let (value, grad) = params.pair_mut(id);
                    let (m, v) = (&mut m[id.0], &mut v[id.0]);
                    for (i, (x, g)) in value.as_mut_slice().iter_mut().zip(grad.as_slice()).enumerate() {
                        m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * g;
                        v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * g * g;
                        let m_hat = m[i] / c1;
                        let v_hat = v[i] / c2;
                        *x -= *lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradkernel::Tensor;

    fn one_param(x: f64, g: f64) -> ParamSet {
        let mut ps = ParamSet::new();
        let id = ps.add("x", Tensor::vector(vec![x]));
        ps.grad_mut(id).as_mut_slice()[0] = g;
        ps
    }

    #[test]
    fn sgd_moves_against_gradient() {
        let mut ps = one_param(1.0, 2.0);
        Optimizer::new(OptimizerKind::Sgd, 0.25, &ps).step(&mut ps);
        assert_eq!(ps.iter().next().unwrap().1.as_slice(), &[0.5]);
    }

    #[test]
    fn first_adam_step_has_size_lr() {
        // bias correction makes the first update lr·g/(|g|+ε)
        let mut ps = one_param(1.0, -3.0);
        Optimizer::new(OptimizerKind::Adam, 0.01, &ps).step(&mut ps);
        let x = ps.iter().next().unwrap().1.as_slice()[0];
        assert!((x - (1.0 + 0.01 * 3.0 / (3.0 + ADAM_EPS))).abs() < 1e-15);
    }

    #[test]
    fn adam_minimizes_a_quadratic() {
        let mut ps = one_param(5.0, 0.0);
        let mut opt = Optimizer::new(OptimizerKind::Adam, 0.1, &ps);
        let id = ps.ids().next().unwrap();
        for _ in 0..500 {
            let x = ps.value(id).as_slice()[0];
            ps.grad_mut(id).as_mut_slice()[0] = 2.0 * (x - 1.5);
            opt.step(&mut ps);
        }
        assert!((ps.value(id).as_slice()[0] - 1.5).abs() < 1e-2);
    }

    #[test]
    fn parse_kinds() {
        assert_eq!("sgd".parse::<OptimizerKind>().unwrap(), OptimizerKind::Sgd);
        assert_eq!("adam".parse::<OptimizerKind>().unwrap(), OptimizerKind::Adam);
        assert!("rmsprop".parse::<OptimizerKind>().is_err());
    }
}
