//! Adam with bias correction.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates for a list of parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(params: &[Tensor]) -> Self {
        AdamState {
            step: 0,
            m: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.len()]).collect(),
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum OptimError {
    #[error("parameter {index}: {what} has {actual} elements, parameter has {expected}")]
    Shape {
        index: usize,
        what: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("{params} parameters but {other} {what}")]
    Count {
        params: usize,
        other: usize,
        what: &'static str,
    },
}

/// One update. A missing gradient counts as zero, which still decays the
/// moments.
pub fn adam_step(
    params: &mut [Tensor],
    grads: &[Option<Tensor>],
    state: &mut AdamState,
    cfg: &AdamConfig,
) -> Result<(), OptimError> {
    for (other, what) in [(grads.len(), "gradient slots"), (state.m.len(), "state slots")] {
        if other != params.len() {
            return Err(OptimError::Count {
                params: params.len(),
                other,
                what,
            });
        }
    }
    for (index, p) in params.iter().enumerate() {
        let checks = [
            (grads[index].as_ref().map(Tensor::len), "gradient"),
            (Some(state.m[index].len()), "state"),
        ];
        for (len, what) in checks {
            if let Some(actual) = len.filter(|&l| l != p.len()) {
                return Err(OptimError::Shape {
                    index,
                    what,
                    expected: p.len(),
                    actual,
                });
            }
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (i, p) in params.iter_mut().enumerate() {
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        let g = grads[i].as_ref().map(Tensor::data);
        for (j, w) in p.data_mut().iter_mut().enumerate() {
            let gj = g.map_or(0.0, |g| g[j]);
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * gj;
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * gj * gj;
            *w -= cfg.lr * (m[j] / c1) / ((v[j] / c2).sqrt() + cfg.eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_each_weight_by_lr() {
        let mut p = vec![Tensor::from_vec(vec![1.0, -2.0, 0.5], &[3]).unwrap()];
        let g = vec![Some(Tensor::from_vec(vec![0.3, -4.0, 1e-3], &[3]).unwrap())];
        let mut st = AdamState::new(&p);
        adam_step(&mut p, &g, &mut st, &AdamConfig::default()).unwrap();
        let want = [1.0 - 1e-3, -2.0 + 1e-3, 0.5 - 1e-3];
        for (a, b) in p[0].data().iter().zip(want) {
            assert!((a - b).abs() < 1e-7, "{a} vs {b}");
        }
    }

    #[test]
    fn zero_gradients_leave_parameters_unchanged() {
        let p0 = Tensor::from_vec(vec![0.25, -3.0], &[2]).unwrap();
        let mut p = vec![p0.clone()];
        let mut st = AdamState::new(&p);
        for _ in 0..5 {
            adam_step(&mut p, &[Some(Tensor::zeros(&[2]))], &mut st, &AdamConfig::default()).unwrap();
            adam_step(&mut p, &[None], &mut st, &AdamConfig::default()).unwrap();
        }
        assert_eq!(p[0], p0);
    }

    #[test]
    fn unit_gradient_first_step_is_minus_lr() {
        let mut p = vec![Tensor::scalar(2.0)];
        let mut st = AdamState::new(&p);
        let cfg = AdamConfig {
            lr: 0.1,
            ..AdamConfig::default()
        };
        adam_step(&mut p, &[Some(Tensor::scalar(1.0))], &mut st, &cfg).unwrap();
        // m_hat = v_hat = 1, so the step is lr / (1 + eps).
        let want = 2.0 - 0.1 / (1.0 + 1e-8);
        assert!((p[0].item() - want).abs() < 1e-15);
    }

    #[test]
    fn identical_runs_are_bit_identical() {
        let run = || {
            let mut p = vec![Tensor::from_vec(vec![0.3, 0.7, -1.1], &[3]).unwrap()];
            let mut st = AdamState::new(&p);
            for i in 0..100 {
                let g = p[0].map(|x| (x * i as f64).sin());
                adam_step(&mut p, &[Some(g)], &mut st, &AdamConfig::default()).unwrap();
            }
            p
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn mismatched_shapes_are_rejected() {
        let mut p = vec![Tensor::zeros(&[3])];
        let mut st = AdamState::new(&p);
        assert!(matches!(
            adam_step(&mut p, &[Some(Tensor::zeros(&[2]))], &mut st, &AdamConfig::default()),
            Err(OptimError::Shape { index: 0, what: "gradient", .. })
        ));
        assert!(matches!(
            adam_step(&mut p, &[], &mut st, &AdamConfig::default()),
            Err(OptimError::Count { .. })
        ));
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut p = vec![Tensor::from_vec(vec![3.0, -1.0], &[2]).unwrap()];
        let mut st = AdamState::new(&p);
        let cfg = AdamConfig {
            lr: 0.05,
            ..AdamConfig::default()
        };
        for _ in 0..2000 {
            let g = p[0].map(|x| 2.0 * (x - 0.5));
            adam_step(&mut p, &[Some(g)], &mut st, &cfg).unwrap();
        }
        assert!(p[0].data().iter().all(|x| (x - 0.5).abs() < 1e-3));
    }
}
