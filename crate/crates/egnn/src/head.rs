//! Global pooling over all event features of a sample, plus the small MLP
//! classifier head.
//!
//! Pooling keeps a running per-feature accumulator and an event counter;
//! finalizing divides by the count (average pooling, the default) and hands a
//! real-valued vector to a two-layer MLP that always runs in floating point.
//! In quantized mode the accumulator is a wide integer over quantized
//! features and the division rounds half-up; the pooled value is dequantized
//! with the final conv layer's output format before the head.

use thiserror::Error;

use crate::quant::{dequantize, QuantParams};

/// Pooling rule. `Average` is the default; `Max` and `Sum` are ablation
/// alternatives kept behind this flag (float path only).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolMode {
    Average,
    Max,
    Sum,
}

impl PoolMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            PoolMode::Average => "average",
            PoolMode::Max => "max",
            PoolMode::Sum => "sum",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "average" => Some(PoolMode::Average),
            "max" => Some(PoolMode::Max),
            "sum" => Some(PoolMode::Sum),
            _ => None,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum HeadError {
    #[error("cannot finalize a pool over zero events")]
    EmptySample,
    #[error("pooling accumulator overflow after {count} events")]
    AccumulatorOverflow { count: u64 },
}

/// Float-mode pooling state.
#[derive(Debug, Clone, PartialEq)]
pub struct PoolState {
    pub sum_acc: Vec<f64>,
    pub count: u64,
    pub mode: PoolMode,
}

impl PoolState {
    pub fn new(dim: usize, mode: PoolMode) -> Self {
        let init = match mode {
            PoolMode::Max => f64::NEG_INFINITY,
            _ => 0.0,
        };
        Self {
            sum_acc: vec![init; dim],
            count: 0,
            mode,
        }
    }

    pub fn reset(&mut self) {
        *self = Self::new(self.sum_acc.len(), self.mode);
    }

    pub fn pool_update(&mut self, feature: &[f64]) {
        debug_assert_eq!(feature.len(), self.sum_acc.len());
        match self.mode {
            PoolMode::Average | PoolMode::Sum => {
                for (acc, x) in self.sum_acc.iter_mut().zip(feature) {
                    *acc += x;
                }
            }
            PoolMode::Max => {
                for (acc, x) in self.sum_acc.iter_mut().zip(feature) {
                    *acc = acc.max(*x);
                }
            }
        }
        self.count += 1;
    }

    pub fn pool_finalize(&self) -> Result<Vec<f64>, HeadError> {
        if self.count == 0 {
            return Err(HeadError::EmptySample);
        }
        Ok(match self.mode {
            PoolMode::Average => self
                .sum_acc
                .iter()
                .map(|&s| s / self.count as f64)
                .collect(),
            PoolMode::Max | PoolMode::Sum => self.sum_acc.clone(),
        })
    }
}

/// Quantized-mode pooling state: wide integer sums of unsigned features
/// (average pooling only — the hardware path pools by average).
#[derive(Debug, Clone, PartialEq)]
pub struct IntPoolState {
    pub sum_acc: Vec<i64>,
    pub count: u64,
}

impl IntPoolState {
    pub fn new(dim: usize) -> Self {
        Self {
            sum_acc: vec![0; dim],
            count: 0,
        }
    }

    pub fn reset(&mut self) {
        self.sum_acc.fill(0);
        self.count = 0;
    }

    pub fn pool_update(&mut self, feature: &[u16]) -> Result<(), HeadError> {
        debug_assert_eq!(feature.len(), self.sum_acc.len());
        for (acc, &x) in self.sum_acc.iter_mut().zip(feature) {
            *acc = acc
                .checked_add(x as i64)
                .ok_or(HeadError::AccumulatorOverflow { count: self.count })?;
        }
        self.count += 1;
        Ok(())
    }

    /// Round-half-up integer average, still in the final layer's quantized
    /// output format.
    pub fn pool_finalize(&self) -> Result<Vec<u16>, HeadError> {
        if self.count == 0 {
            return Err(HeadError::EmptySample);
        }
        let n = self.count as i64;
        Ok(self
            .sum_acc
            .iter()
            .map(|&s| ((s + n / 2) / n) as u16)
            .collect())
    }

    /// Finalize and dequantize with the final conv layer's output format.
    pub fn pool_finalize_real(&self, qp_out: &QuantParams) -> Result<Vec<f64>, HeadError> {
        Ok(self
            .pool_finalize()?
            .iter()
            .map(|&q| dequantize(q as u32, qp_out))
            .collect())
    }
}

/// Two-layer MLP: `logits = fc2(ReLU(fc1(x)))`.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams {
    pub in_dim: usize,
    pub hidden: usize,
    pub num_classes: usize,
    /// Row-major `hidden × in_dim`.
    pub fc1_w: Vec<f64>,
    pub fc1_b: Vec<f64>,
    /// Row-major `num_classes × hidden`.
    pub fc2_w: Vec<f64>,
    pub fc2_b: Vec<f64>,
}

impl HeadParams {
    pub fn validate(&self) -> Result<(), String> {
        if self.fc1_w.len() != self.hidden * self.in_dim
            || self.fc1_b.len() != self.hidden
            || self.fc2_w.len() != self.num_classes * self.hidden
            || self.fc2_b.len() != self.num_classes
        {
            return Err("inconsistent head shapes".into());
        }
        Ok(())
    }

    /// Hidden activations after ReLU (exposed for the trainer).
    pub fn hidden_forward(&self, pooled: &[f64]) -> Vec<f64> {
        debug_assert_eq!(pooled.len(), self.in_dim);
        (0..self.hidden)
            .map(|h| {
                let row = &self.fc1_w[h * self.in_dim..(h + 1) * self.in_dim];
                let z: f64 =
                    row.iter().zip(pooled).map(|(w, x)| w * x).sum::<f64>() + self.fc1_b[h];
                z.max(0.0)
            })
            .collect()
    }
}

/// `logits = fc2(ReLU(fc1(pooled)))`; no softmax — prediction is argmax.
pub fn mlp_forward(pooled: &[f64], head: &HeadParams) -> Vec<f64> {
    let hidden = head.hidden_forward(pooled);
    (0..head.num_classes)
        .map(|c| {
            let row = &head.fc2_w[c * head.hidden..(c + 1) * head.hidden];
            row.iter().zip(&hidden).map(|(w, x)| w * x).sum::<f64>() + head.fc2_b[c]
        })
        .collect()
}

/// Argmax with ties broken toward the lowest index.
pub fn predict(logits: &[f64]) -> usize {
    debug_assert!(!logits.is_empty());
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate().skip(1) {
        if v > logits[best] {
            best = i;
        }
    }
    best
}
