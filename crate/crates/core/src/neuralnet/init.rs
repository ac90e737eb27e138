use ndarray::Array2;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::mlp::{Mlp, MlpConfig};

/// Standard deviation of a standard normal truncated to [-2, 2].
pub const TRUNCATED_NORMAL_STD: f64 = 0.879_625_661_034_239_8;

/// He initialization with a normal truncated at two standard deviations.
///
/// Draws are rescaled by [`TRUNCATED_NORMAL_STD`] so the realized variance is
/// `2 / fan_in` despite the truncation.
pub fn he_truncated_normal<R: Rng + ?Sized>(
    rng: &mut R,
    fan_in: usize,
    fan_out: usize,
) -> Array2<f64> {
    let scale = (2.0 / fan_in as f64).sqrt() / TRUNCATED_NORMAL_STD;
    Array2::from_shape_simple_fn((fan_in, fan_out), || loop {
        let z: f64 = rng.sample(StandardNormal);
        if z.abs() <= 2.0 {
            return z * scale;
        }
    })
}

/// Fresh parameters for `cfg`: truncated He weights, zero biases, unit BN
/// scale, zero BN shift.
pub fn init_params(cfg: &MlpConfig, seed: u64) -> Mlp {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Mlp::with_rng(&cfg.layer_dims(), cfg.activation, cfg.batchnorm, &mut rng)
}
