//! Frozen reference outputs. Each golden is regenerated from pinned seeds
//! and compared byte for byte with the stored copy.

use std::path::Path;

use ndarray::Array2;

use crate::checkpoint::{self, f64_vector_bytes as vector_bytes};
use crate::encoders::{DenseHashEncoder, Distribution};
use crate::error::{Error, Result};
use crate::neuralnet::{Activation, Mlp, MlpConfig, Mode};
use crate::recmodels::{gmf_score, mlp_score, GmfParams, MlpBackboneParams};
use crate::schemes::{DheOptions, Scheme, SchemeConfig, SchemeKind};

/// Feature values whose encodings are frozen.
pub const ENCODED_VALUES: [u64; 4] = [0, 1, 12345, 1 << 40];

fn dense_encodings(distribution: Distribution) -> Result<Vec<u8>> {
    let enc = DenseHashEncoder::from_seed(0, 1024, 1_000_000, distribution)?;
    let values: Vec<f64> = ENCODED_VALUES
        .iter()
        .flat_map(|&x| enc.encode(x).values)
        .collect();
    Ok(vector_bytes(&values))
}

/// Deterministic 4×8 input used by the forward-pass golden.
pub fn forward_input() -> Array2<f64> {
    Array2::from_shape_fn((4, 8), |(i, j)| ((i * 8 + j) as f64 * 0.37).sin() * 2.0)
}

fn golden_mlp() -> Result<Mlp> {
    let cfg = MlpConfig {
        input_dim: 8,
        hidden_width: 16,
        hidden_layers: 3,
        output_dim: 4,
        activation: Activation::Mish,
        batchnorm: true,
    };
    Mlp::new(&cfg, 0)
}

fn mlp_forward() -> Result<Vec<u8>> {
    let mut mlp = golden_mlp()?;
    let x = forward_input();
    let (train, _) = mlp.forward(x.view(), Mode::Train)?;
    let infer = mlp.infer(x.view())?;
    let values: Vec<f64> = train.iter().chain(infer.iter()).copied().collect();
    Ok(vector_bytes(&values))
}

/// DHE with `k=1024`, `m=10^6`, `d_NN=64`, `h=5`, `d=32`, seed 0.
pub fn golden_dhe_config() -> SchemeConfig {
    SchemeConfig {
        dhe: DheOptions {
            hidden_width: 64,
            hidden_layers: 5,
            ..DheOptions::default()
        },
        ..SchemeConfig::new(SchemeKind::Dhe, 1_000_000, 32)
    }
}

fn dhe_embed() -> Result<Vec<u8>> {
    let scheme = Scheme::new(&golden_dhe_config())?;
    Ok(vector_bytes(&scheme.embed(12345)?))
}

fn backbone_inputs() -> (Vec<f64>, Vec<f64>) {
    let u = (0..32).map(|j| (j as f64 * 0.3).cos() * 0.5).collect();
    let i = (0..32)
        .map(|j| (j as f64 * 0.7 + 1.0).sin() * 0.5)
        .collect();
    (u, i)
}

fn backbone_logits() -> Result<Vec<u8>> {
    let (u, i) = backbone_inputs();
    let mlp = mlp_score(&u, &i, &MlpBackboneParams::new(32, 0))?;
    let gmf = gmf_score(&u, &i, &GmfParams::new(32))?;
    Ok(vector_bytes(&[mlp, gmf]))
}

/// A small trained-looking DHE scheme: parameters perturbed by a few
/// forward passes so BN running statistics are non-trivial.
fn scheme_checkpoint() -> Result<Vec<u8>> {
    let mut cfg = golden_dhe_config();
    cfg.num_hashes = 64;
    cfg.dhe.hidden_width = 16;
    cfg.dhe.hidden_layers = 2;
    cfg.vocab_size = 1000;
    let mut scheme = Scheme::new(&cfg)?;
    let ids: Vec<u64> = (0..64).map(|i| i * 13 % 1000).collect();
    for _ in 0..3 {
        scheme.forward(&ids, Mode::Train)?;
    }
    scheme.to_checkpoint_bytes()
}

/// `(file name, bytes)` for every golden, generated from pinned seeds.
pub fn generate() -> Result<Vec<(&'static str, Vec<u8>)>> {
    Ok(vec![
        (
            "dense_uniform_k1024_m1e6.f64",
            dense_encodings(Distribution::Uniform)?,
        ),
        (
            "dense_gaussian_k1024_m1e6.f64",
            dense_encodings(Distribution::Gaussian)?,
        ),
        ("mlp_forward_4x8.f64", mlp_forward()?),
        ("dhe_embed_12345.f64", dhe_embed()?),
        ("backbone_logits.f64", backbone_logits()?),
        ("dhe_scheme.ckpt", scheme_checkpoint()?),
    ])
}

pub fn write(dir: impl AsRef<Path>) -> Result<Vec<String>> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let mut names = Vec::new();
    for (name, bytes) in generate()? {
        std::fs::write(dir.join(name), bytes)?;
        names.push(name.to_string());
    }
    Ok(names)
}

/// Names of goldens that are missing or differ from a fresh generation,
/// plus any stored checkpoint that does not survive decode and re-encode.
pub fn verify(dir: impl AsRef<Path>) -> Result<Vec<String>> {
    let dir = dir.as_ref();
    let mut bad = Vec::new();
    for (name, bytes) in generate()? {
        match std::fs::read(dir.join(name)) {
            Ok(stored) if stored == bytes => {
                if name.ends_with(".ckpt") {
                    let scheme = Scheme::from_checkpoint_bytes(&stored)?;
                    if scheme.to_checkpoint_bytes()? != stored {
                        bad.push(format!("{name} (round trip)"));
                    }
                }
            }
            Ok(_) => bad.push(name.to_string()),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                bad.push(format!("{name} (missing)"))
            }
            Err(e) => return Err(Error::Io(e)),
        }
    }
    Ok(bad)
}

/// Reads a vector golden.
pub fn read_vector(path: impl AsRef<Path>) -> Result<Vec<f64>> {
    checkpoint::read_f64_vector(path)
}
