use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::Tensor;

#[derive(Debug, Error, PartialEq)]
pub enum FilmError {
    #[error("FiLM has {actual} layers, decoder has {expected}")]
    LayerCount { expected: usize, actual: usize },
    #[error("FiLM layer {layer}: gamma/beta length {actual}, decoder width {expected}")]
    Width {
        layer: usize,
        expected: usize,
        actual: usize,
    },
    #[error("FiLM layer {0} contains a non-finite value")]
    NonFinite(usize),
}

/// Per-layer channel-wise affine modulation `gamma * h + beta`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FiLMParams {
    pub gamma: Vec<Vec<f64>>,
    pub beta: Vec<Vec<f64>>,
}

impl FiLMParams {
    pub fn identity(widths: &[usize]) -> Self {
        FiLMParams {
            gamma: widths.iter().map(|&c| vec![1.0; c]).collect(),
            beta: widths.iter().map(|&c| vec![0.0; c]).collect(),
        }
    }

    pub fn widths(&self) -> Vec<usize> {
        self.gamma.iter().map(Vec::len).collect()
    }

    pub fn is_identity(&self) -> bool {
        self.gamma.iter().flatten().all(|&g| g == 1.0) && self.beta.iter().flatten().all(|&b| b == 0.0)
    }

    pub fn validate(&self, widths: &[usize]) -> Result<(), FilmError> {
        for v in [&self.gamma, &self.beta] {
            if v.len() != widths.len() {
                return Err(FilmError::LayerCount {
                    expected: widths.len(),
                    actual: v.len(),
                });
            }
        }
        for (i, &c) in widths.iter().enumerate() {
            for v in [&self.gamma[i], &self.beta[i]] {
                if v.len() != c {
                    return Err(FilmError::Width {
                        layer: i,
                        expected: c,
                        actual: v.len(),
                    });
                }
                if v.iter().any(|x| !x.is_finite()) {
                    return Err(FilmError::NonFinite(i));
                }
            }
        }
        Ok(())
    }

    pub(crate) fn layer(&self, i: usize) -> (Tensor, Tensor) {
        let g = Tensor::from_vec(self.gamma[i].clone(), &[self.gamma[i].len()]).expect("1-d");
        let b = Tensor::from_vec(self.beta[i].clone(), &[self.beta[i].len()]).expect("1-d");
        (g, b)
    }
}
