use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};

use super::{Mode, RealMatrix};
use crate::error::{Error, Result};

pub const BN_EPS: f64 = 1e-5;
/// Weight of the previous running statistic in the moving average.
pub const BN_MOMENTUM: f64 = 0.9;

/// Per-column batch normalization with learnable scale and shift.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
    pub running_mean: Array1<f64>,
    pub running_var: Array1<f64>,
}

/// Values cached by a forward pass for the backward pass.
#[derive(Debug, Clone)]
pub(crate) struct BnCache {
    pub xhat: Array2<f64>,
    pub inv_std: Array1<f64>,
    pub mode: Mode,
}

impl BatchNorm {
    pub fn new(width: usize) -> Self {
        BatchNorm {
            gamma: Array1::ones(width),
            beta: Array1::zeros(width),
            running_mean: Array1::zeros(width),
            running_var: Array1::ones(width),
        }
    }

    pub fn width(&self) -> usize {
        self.gamma.len()
    }

    pub(crate) fn forward(
        &mut self,
        x: ArrayView2<f64>,
        mode: Mode,
    ) -> Result<(RealMatrix, BnCache)> {
        let (mean, var) = match mode {
            Mode::Train => {
                let n = x.nrows();
                if n < 2 {
                    return Err(Error::contract(format!(
                        "batch normalization in train mode needs at least 2 rows, got {n}"
                    )));
                }
                let mean = x.mean_axis(Axis(0)).expect("non-empty batch");
                let var = x.var_axis(Axis(0), 0.0);
                self.running_mean = &self.running_mean * BN_MOMENTUM + &mean * (1.0 - BN_MOMENTUM);
                self.running_var = &self.running_var * BN_MOMENTUM + &var * (1.0 - BN_MOMENTUM);
                (mean, var)
            }
            Mode::Infer => (self.running_mean.clone(), self.running_var.clone()),
        };
        let inv_std = var.mapv(|v| 1.0 / (v + BN_EPS).sqrt());
        let xhat = (&x - &mean) * &inv_std;
        let y = &xhat * &self.gamma + &self.beta;
        Ok((
            y,
            BnCache {
                xhat,
                inv_std,
                mode,
            },
        ))
    }

    pub(crate) fn infer(&self, x: ArrayView2<f64>) -> RealMatrix {
        let inv_std = self.running_var.mapv(|v| 1.0 / (v + BN_EPS).sqrt());
        (&x - &self.running_mean) * &inv_std * &self.gamma + &self.beta
    }

    /// Returns `(dx, dgamma, dbeta)`.
    pub(crate) fn backward(
        &self,
        cache: &BnCache,
        dy: ArrayView2<f64>,
    ) -> (RealMatrix, Array1<f64>, Array1<f64>) {
        let dgamma = (&dy * &cache.xhat).sum_axis(Axis(0));
        let dbeta = dy.sum_axis(Axis(0));
        let dxhat = &dy * &self.gamma;
        let dx = match cache.mode {
            Mode::Infer => dxhat * &cache.inv_std,
            Mode::Train => {
                let n = dy.nrows() as f64;
                let sum_dxhat = dxhat.sum_axis(Axis(0));
                let sum_dxhat_xhat = (&dxhat * &cache.xhat).sum_axis(Axis(0));
                let mut dx = dxhat;
                Zip::from(dx.rows_mut())
                    .and(cache.xhat.rows())
                    .for_each(|mut row, xh| {
                        for j in 0..row.len() {
                            row[j] = cache.inv_std[j] / n
                                * (n * row[j] - sum_dxhat[j] - xh[j] * sum_dxhat_xhat[j]);
                        }
                    });
                dx
            }
        };
        (dx, dgamma, dbeta)
    }
}

/// Normalizes `batch` with `state`; train mode uses batch statistics and
/// updates the running averages, infer mode uses the running averages.
pub fn batchnorm_forward(
    batch: &RealMatrix,
    state: &mut BatchNorm,
    mode: Mode,
) -> Result<RealMatrix> {
    if batch.ncols() != state.width() {
        return Err(Error::contract(format!(
            "batch has {} columns but the normalization layer has {}",
            batch.ncols(),
            state.width()
        )));
    }
    match mode {
        Mode::Train => state.forward(batch.view(), mode).map(|(y, _)| y),
        Mode::Infer => Ok(state.infer(batch.view())),
    }
}
