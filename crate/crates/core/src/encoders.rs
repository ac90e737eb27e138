//! Encoding functions `E` that turn a feature value into the vector a decoder
//! consumes: identity, binary, one-hot, hashed one-hot, multi-hash one-hot,
//! dense hash encodings and their side-feature-enhanced variant.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hashing::{HashFamily, UniversalHashParams};

/// Lower clamp for the Box-Muller radius argument.
pub const BOX_MULLER_EPS: f64 = f64::EPSILON; // 2^-52

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncodingKind {
    /// Entries in {0, 1}.
    Indicator,
    /// Non-negative integer counts (multi-hash "add" aggregation).
    Count,
    /// Real-valued.
    Dense,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Encoding {
    pub values: Vec<f64>,
    pub kind: EncodingKind,
}

impl Encoding {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Distribution {
    #[default]
    Uniform,
    Gaussian,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MultiHashMode {
    Concat,
    /// Sum of the k one-hot vectors, i.e. a single shared table.
    #[default]
    Add,
}

fn check_in_vocab(x: u64, n: u64) -> Result<()> {
    if x >= n {
        Err(Error::Domain { value: x, vocab: n })
    } else {
        Ok(())
    }
}

/// Number of bits of the binary encoding for a vocabulary of size `n`:
/// `ceil(log2 n)`, at least 1.
pub fn binary_length(n: u64) -> usize {
    if n <= 2 {
        1
    } else {
        (64 - (n - 1).leading_zeros()) as usize
    }
}

/// `[x / (n - 1)]`, the identity encoding normalized into [0, 1].
pub fn encode_identity(x: u64, n: u64) -> Result<Encoding> {
    if n < 2 {
        return Err(Error::config(
            "identity encoding needs a vocabulary of at least 2",
        ));
    }
    check_in_vocab(x, n)?;
    Ok(Encoding {
        values: vec![x as f64 / (n - 1) as f64],
        kind: EncodingKind::Dense,
    })
}

/// Most-significant-bit-first binary expansion padded to [`binary_length`].
pub fn encode_binary(x: u64, n: u64) -> Result<Encoding> {
    check_in_vocab(x, n)?;
    let bits = binary_length(n);
    let values = (0..bits).rev().map(|b| ((x >> b) & 1) as f64).collect();
    Ok(Encoding {
        values,
        kind: EncodingKind::Indicator,
    })
}

pub fn encode_onehot(x: u64, n: u64) -> Result<Encoding> {
    check_in_vocab(x, n)?;
    let mut values = vec![0.0; n as usize];
    values[x as usize] = 1.0;
    Ok(Encoding {
        values,
        kind: EncodingKind::Indicator,
    })
}

/// One-hot over `m` buckets at `hash(x)`. Never fails: out-of-vocabulary
/// values hash like any other.
pub fn encode_onehot_hash(x: u64, params: &UniversalHashParams) -> Encoding {
    let mut values = vec![0.0; params.m() as usize];
    values[params.hash(x) as usize] = 1.0;
    Encoding {
        values,
        kind: EncodingKind::Indicator,
    }
}

pub fn encode_multi_onehot(x: u64, family: &HashFamily, mode: MultiHashMode) -> Encoding {
    let m = family.m() as usize;
    match mode {
        MultiHashMode::Concat => {
            let mut values = vec![0.0; m * family.k()];
            for (i, h) in family.params().iter().enumerate() {
                values[i * m + h.hash(x) as usize] = 1.0;
            }
            Encoding {
                values,
                kind: EncodingKind::Indicator,
            }
        }
        MultiHashMode::Add => {
            let mut values = vec![0.0; m];
            for h in family.params() {
                values[h.hash(x) as usize] += 1.0;
            }
            Encoding {
                values,
                kind: EncodingKind::Count,
            }
        }
    }
}

/// Maps a 0-based bucket onto [-1, 1]: `2·h/(m-1) - 1`.
pub fn transform_uniform(h: u64, m: u64) -> Result<f64> {
    if m < 2 {
        return Err(Error::config("uniform transform needs m >= 2"));
    }
    Ok(unit(h, m) * 2.0 - 1.0)
}

#[inline]
fn unit(h: u64, m: u64) -> f64 {
    h as f64 / (m - 1) as f64
}

/// One Box-Muller step on a pair of U(0,1) samples. `u1` is clamped to
/// `[BOX_MULLER_EPS, 1]` before the logarithm.
#[inline]
pub fn box_muller(u1: f64, u2: f64) -> (f64, f64) {
    let r = (-2.0 * u1.clamp(BOX_MULLER_EPS, 1.0).ln()).sqrt();
    let theta = 2.0 * std::f64::consts::PI * u2;
    (r * theta.cos(), r * theta.sin())
}

/// Box-Muller over consecutive pairs of `u = h/(m-1)`.
///
/// With an odd count the final value is paired with the first uniform of the
/// sequence and keeps only the cosine branch.
pub fn transform_gaussian(h: &[u64], m: u64) -> Result<Vec<f64>> {
    if m < 2 {
        return Err(Error::config("gaussian transform needs m >= 2"));
    }
    let u: Vec<f64> = h.iter().map(|&b| unit(b, m)).collect();
    let mut out = vec![0.0; u.len()];
    gaussian_in_place(&u, &mut out);
    Ok(out)
}

fn gaussian_in_place(u: &[f64], out: &mut [f64]) {
    let pairs = u.len() / 2;
    for i in 0..pairs {
        let (z0, z1) = box_muller(u[2 * i], u[2 * i + 1]);
        out[2 * i] = z0;
        out[2 * i + 1] = z1;
    }
    if u.len() % 2 == 1 {
        let last = u.len() - 1;
        out[last] = box_muller(u[last], u[0]).0;
    }
}

/// Dense hash encoder: `k` universal hashes into `m` buckets, transformed to
/// approximate U(-1, 1) or N(0, 1). Needs no storage beyond the family.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseHashEncoder {
    family: HashFamily,
    distribution: Distribution,
}

impl DenseHashEncoder {
    pub fn new(family: HashFamily, distribution: Distribution) -> Self {
        DenseHashEncoder {
            family,
            distribution,
        }
    }

    pub fn from_seed(seed: u64, k: usize, m: u64, distribution: Distribution) -> Result<Self> {
        Ok(Self::new(HashFamily::new(seed, k, m)?, distribution))
    }

    pub fn family(&self) -> &HashFamily {
        &self.family
    }

    pub fn distribution(&self) -> Distribution {
        self.distribution
    }

    pub fn k(&self) -> usize {
        self.family.k()
    }

    /// Writes the `k` encoding entries of `x` into `out`.
    pub fn encode_into(&self, x: u64, out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.k());
        let m = self.family.m();
        match self.distribution {
            Distribution::Uniform => {
                for (slot, h) in out.iter_mut().zip(self.family.params()) {
                    *slot = unit(h.hash(x), m) * 2.0 - 1.0;
                }
            }
            Distribution::Gaussian => {
                let u: Vec<f64> = self
                    .family
                    .params()
                    .iter()
                    .map(|h| unit(h.hash(x), m))
                    .collect();
                gaussian_in_place(&u, out);
            }
        }
    }

    pub fn encode(&self, x: u64) -> Encoding {
        let mut values = vec![0.0; self.k()];
        self.encode_into(x, &mut values);
        Encoding {
            values,
            kind: EncodingKind::Dense,
        }
    }
}

pub fn dense_hash_encode(x: u64, encoder: &DenseHashEncoder) -> Encoding {
    encoder.encode(x)
}

/// Side features attached to a value (e.g. genre indicators of a movie).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SideFeatureVector(Vec<f64>);

impl SideFeatureVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::contract("side features must be finite"));
        }
        Ok(SideFeatureVector(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Concatenates `[encoding; side]`, hash part first.
pub fn enhance_with_side(encoding: &Encoding, side: &SideFeatureVector) -> Encoding {
    if side.is_empty() {
        return encoding.clone();
    }
    let mut values = Vec::with_capacity(encoding.len() + side.len());
    values.extend_from_slice(&encoding.values);
    values.extend_from_slice(side.values());
    Encoding {
        values,
        kind: EncodingKind::Dense,
    }
}

/// A configured encoding function, as compared by the property analyzer.
#[derive(Debug, Clone)]
pub enum Encoder {
    OneHot {
        n: u64,
    },
    OneHotHash {
        params: UniversalHashParams,
    },
    MultiOneHotHash {
        family: HashFamily,
        mode: MultiHashMode,
    },
    Binary {
        n: u64,
    },
    Identity {
        n: u64,
    },
    DenseHash(DenseHashEncoder),
}

impl Encoder {
    pub fn name(&self) -> &'static str {
        match self {
            Encoder::OneHot { .. } => "one_hot",
            Encoder::OneHotHash { .. } => "one_hot_hash",
            Encoder::MultiOneHotHash { family, .. } if family.k() == 2 => "double_one_hot_hash",
            Encoder::MultiOneHotHash { .. } => "multi_one_hot_hash",
            Encoder::Binary { .. } => "binary",
            Encoder::Identity { .. } => "identity",
            Encoder::DenseHash(_) => "dense_hash",
        }
    }

    pub fn kind(&self) -> EncodingKind {
        match self {
            Encoder::OneHot { .. } | Encoder::OneHotHash { .. } | Encoder::Binary { .. } => {
                EncodingKind::Indicator
            }
            Encoder::MultiOneHotHash { mode, .. } => match mode {
                MultiHashMode::Concat => EncodingKind::Indicator,
                MultiHashMode::Add => EncodingKind::Count,
            },
            Encoder::Identity { .. } | Encoder::DenseHash(_) => EncodingKind::Dense,
        }
    }

    /// Encoding length: n, m, k·m (concat), ⌈log₂ n⌉, 1 or k.
    pub fn len(&self) -> usize {
        match self {
            Encoder::OneHot { n } => *n as usize,
            Encoder::OneHotHash { params } => params.m() as usize,
            Encoder::MultiOneHotHash { family, mode } => match mode {
                MultiHashMode::Concat => family.m() as usize * family.k(),
                MultiHashMode::Add => family.m() as usize,
            },
            Encoder::Binary { n } => binary_length(*n),
            Encoder::Identity { .. } => 1,
            Encoder::DenseHash(enc) => enc.k(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn encode(&self, x: u64) -> Result<Encoding> {
        match self {
            Encoder::OneHot { n } => encode_onehot(x, *n),
            Encoder::OneHotHash { params } => Ok(encode_onehot_hash(x, params)),
            Encoder::MultiOneHotHash { family, mode } => Ok(encode_multi_onehot(x, family, *mode)),
            Encoder::Binary { n } => encode_binary(x, *n),
            Encoder::Identity { n } => encode_identity(x, *n),
            Encoder::DenseHash(enc) => Ok(enc.encode(x)),
        }
    }

    /// Nonzero entries as `(index, value)` in increasing index order, for the
    /// one-hot style encoders whose dense form is mostly zeros.
    pub fn sparse(&self, x: u64) -> Result<Option<Vec<(usize, f64)>>> {
        Ok(match self {
            Encoder::OneHot { n } => {
                check_in_vocab(x, *n)?;
                Some(vec![(x as usize, 1.0)])
            }
            Encoder::OneHotHash { params } => Some(vec![(params.hash(x) as usize, 1.0)]),
            Encoder::MultiOneHotHash { family, mode } => {
                let m = family.m() as usize;
                let mut entries: Vec<(usize, f64)> = Vec::with_capacity(family.k());
                for (i, h) in family.params().iter().enumerate() {
                    let b = h.hash(x) as usize;
                    match mode {
                        MultiHashMode::Concat => entries.push((i * m + b, 1.0)),
                        MultiHashMode::Add => match entries.iter_mut().find(|(j, _)| *j == b) {
                            Some(e) => e.1 += 1.0,
                            None => entries.push((b, 1.0)),
                        },
                    }
                }
                entries.sort_by_key(|e| e.0);
                Some(entries)
            }
            _ => None,
        })
    }
}
