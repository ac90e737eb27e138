//! A small dense network engine: affine layers, ReLU/Mish, batch
//! normalization, Adam, and finite-difference gradient checking.
//!
//! All arithmetic is `f64`. Batches are row-major `Array2` with one example
//! per row.

mod batchnorm;
pub mod gradcheck;
mod init;
mod mlp;
mod optim;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

pub use batchnorm::{batchnorm_forward, BatchNorm, BN_EPS, BN_MOMENTUM};
pub use init::{he_truncated_normal, init_params, TRUNCATED_NORMAL_STD};
pub use mlp::{mlp_forward, Dense, Mlp, MlpConfig, MlpGrads, MlpTape};
pub use optim::{Adam, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};

/// Row-major real matrix, one example per row.
pub type RealMatrix = Array2<f64>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Train,
    Infer,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    #[default]
    Mish,
    /// No nonlinearity; used to compare against closed-form linear gradients.
    Identity,
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => relu(x),
            Activation::Mish => mish(x),
            Activation::Identity => x,
        }
    }

    #[inline]
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Mish => mish_derivative(x),
            Activation::Identity => 1.0,
        }
    }
}

#[inline]
pub fn relu(x: f64) -> f64 {
    x.max(0.0)
}

/// `ln(1 + e^x)` via `max(x, 0) + ln1p(e^{-|x|})`.
#[inline]
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// `x · tanh(softplus(x))`.
#[inline]
pub fn mish(x: f64) -> f64 {
    x * tanh_softplus(x)
}

/// `tanh(ln(1 + e^x)) = n / (n + 2)` with `n = e^x (e^x + 2)`: one `exp`.
#[inline]
fn tanh_softplus(x: f64) -> f64 {
    if x > 20.0 {
        return 1.0;
    }
    let e = x.exp();
    let n = e * (e + 2.0);
    n / (n + 2.0)
}

#[inline]
pub fn mish_derivative(x: f64) -> f64 {
    if x > 20.0 {
        return 1.0;
    }
    let e = x.exp();
    let n = e * (e + 2.0);
    let d = n + 2.0;
    // 1 − t² = 4(n + 1)/d², σ(x) = e/(1 + e).
    n / d + x * 4.0 * (n + 1.0) / (d * d) * (e / (1.0 + e))
}
