//! Dense f64 tensors and a tape-based reverse-mode autodiff engine.
//!
//! Values live in [`Tensor`]. Trainable state lives in a [`ParamStore`],
//! which survives tape clearing. A forward pass records nodes on a
//! [`Tape`] and hands out [`Var`] handles; [`Tape::backward`] and
//! [`Tape::backward_into`] propagate adjoints in reverse creation order.

mod checkpoint;
mod gradcheck;
mod optim;
mod params;
mod tape;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, Checkpoint};
pub use gradcheck::{finite_difference_check, finite_difference_check_params};
pub use optim::{train_step, warmup_lr, AdamW, AdamWConfig};
pub use params::{Param, ParamId, ParamStore};
pub use tape::{Tape, Var};

use crate::error::{Error, Result};

/// Sentinel for structurally unreachable log-space cells.
pub const NEG_INF: f64 = -1e30;

/// Value returned by [`guarded_ln`] for arguments below `1e-300`.
pub const LOG_FLOOR: f64 = -690.0;

/// Natural log that never returns `-inf`.
pub fn guarded_ln(x: f64) -> f64 {
    if x < 1e-300 {
        LOG_FLOOR
    } else {
        x.ln()
    }
}

/// `log(exp(a) + exp(b))`, treating anything at or below the sentinel as zero mass.
pub fn log_add_exp(a: f64, b: f64) -> f64 {
    if a <= NEG_INF {
        return if b <= NEG_INF { NEG_INF } else { b };
    }
    if b <= NEG_INF {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// Log-sum-exp over a slice with max subtraction.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m <= NEG_INF || !m.is_finite() {
        return if xs.is_empty() { NEG_INF } else { m.max(NEG_INF) };
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Dense row-major tensor of 64-bit floats.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::dim(
                "tensor",
                format!("shape {:?} holds {} values, got {}", shape, n, data.len()),
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    /// Builds a `[rows.len(), width]` matrix; all rows must share a width.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let width = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != width) {
            return Err(Error::dim("tensor", "ragged rows"));
        }
        let data = rows.iter().flatten().copied().collect();
        Tensor::new(vec![rows.len(), width], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Size of the last axis (1 for scalars).
    pub fn last_dim(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    /// Number of last-axis rows.
    pub fn rows(&self) -> usize {
        let last = self.last_dim();
        if last == 0 {
            0
        } else {
            self.data.len() / last
        }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let w = self.last_dim();
        &self.data[r * w..(r + 1) * w]
    }

    pub fn item(&self) -> Result<f64> {
        if self.data.len() != 1 {
            return Err(Error::Contract(format!(
                "item() on tensor with {} elements",
                self.data.len()
            )));
        }
        Ok(self.data[0])
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}
