//! Embedding schemes: a learnable map from a feature value to a `d`-dim
//! embedding.
//!
//! Every scheme exposes the same surface: [`Scheme::embed`] for inference,
//! [`Scheme::forward`] / [`Scheme::backward`] for training on a minibatch of
//! ids, and a flat list of parameter tensors for the optimizer and for
//! checkpoints.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use ndarray::{Array1, Array2, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution as _, Normal};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, NamedTensor};
use crate::encoders::{DenseHashEncoder, Distribution};
use crate::error::{Error, Result};
use crate::hashing::HashFamily;
use crate::neuralnet::{Activation, Adam, Mlp, MlpConfig, MlpTape, Mode, RealMatrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SchemeKind {
    Full,
    HashTrick,
    Bloom,
    HashEmb,
    Hybrid,
    Compositional,
    Dhe,
}

impl SchemeKind {
    pub const ALL: [SchemeKind; 7] = [
        SchemeKind::Full,
        SchemeKind::HashTrick,
        SchemeKind::Bloom,
        SchemeKind::HashEmb,
        SchemeKind::Hybrid,
        SchemeKind::Compositional,
        SchemeKind::Dhe,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            SchemeKind::Full => "full",
            SchemeKind::HashTrick => "hash_trick",
            SchemeKind::Bloom => "bloom",
            SchemeKind::HashEmb => "hash_emb",
            SchemeKind::Hybrid => "hybrid",
            SchemeKind::Compositional => "compositional",
            SchemeKind::Dhe => "dhe",
        }
    }

    /// Whether values outside `0..n` get an embedding.
    pub fn handles_oov(self) -> bool {
        !matches!(self, SchemeKind::Full | SchemeKind::Compositional)
    }
}

impl fmt::Display for SchemeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SchemeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        SchemeKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::config(format!("unknown scheme kind {s:?}")))
    }
}

/// Embedding-network settings for [`SchemeKind::Dhe`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DheOptions {
    pub hidden_width: usize,
    pub hidden_layers: usize,
    pub activation: Activation,
    pub batchnorm: bool,
    pub distribution: Distribution,
    /// Length of the per-value side-feature vector appended to the encoding.
    pub side_dim: usize,
    /// When false the network sees only side features.
    pub use_hash: bool,
}

impl Default for DheOptions {
    fn default() -> Self {
        DheOptions {
            hidden_width: 64,
            hidden_layers: 5,
            activation: Activation::Mish,
            batchnorm: true,
            distribution: Distribution::Uniform,
            side_dim: 0,
            use_hash: true,
        }
    }
}

/// Everything needed to build a scheme.
///
/// `buckets` is the hashed vocabulary `m` (the hash range for DHE), and
/// `num_hashes` is `k`. Unused fields are ignored by kinds that do not need
/// them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchemeConfig {
    pub kind: SchemeKind,
    pub vocab_size: u64,
    pub dim: usize,
    pub buckets: u64,
    pub num_hashes: usize,
    pub seed: u64,
    #[serde(default)]
    pub dhe: DheOptions,
    #[serde(default = "default_hybrid_fraction")]
    pub hybrid_fraction: f64,
    #[serde(default = "default_compositional_hidden")]
    pub compositional_hidden: usize,
    /// Multi-hash schemes share one table unless this is false.
    #[serde(default = "default_true")]
    pub shared_table: bool,
    #[serde(default = "default_init_std")]
    pub init_std: f64,
}

fn default_hybrid_fraction() -> f64 {
    0.1
}
fn default_compositional_hidden() -> usize {
    64
}
fn default_true() -> bool {
    true
}
fn default_init_std() -> f64 {
    0.01
}

pub const DHE_DEFAULT_K: usize = 1024;
pub const DHE_DEFAULT_BUCKETS: u64 = 1_000_000;
/// Most encoding entries a DHE scheme caches (128 MiB of `f64`).
pub const DHE_CACHE_LIMIT: usize = 1 << 24;

impl SchemeConfig {
    /// Defaults per kind: `k=1` for the hashing trick, `k=2` for the other
    /// hashing baselines, and `k=1024`, `m=10^6` for DHE. Table schemes start
    /// at `m=n`.
    pub fn new(kind: SchemeKind, vocab_size: u64, dim: usize) -> Self {
        let (buckets, num_hashes) = match kind {
            SchemeKind::Dhe => (DHE_DEFAULT_BUCKETS, DHE_DEFAULT_K),
            SchemeKind::HashTrick => (vocab_size, 1),
            SchemeKind::Full => (vocab_size, 1),
            _ => (vocab_size, 2),
        };
        SchemeConfig {
            kind,
            vocab_size,
            dim,
            buckets,
            num_hashes,
            seed: 0,
            dhe: DheOptions::default(),
            hybrid_fraction: default_hybrid_fraction(),
            compositional_hidden: default_compositional_hidden(),
            shared_table: true,
            init_std: default_init_std(),
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::config("embedding dimension must be positive"));
        }
        if self.vocab_size == 0 {
            return Err(Error::config("vocabulary must be non-empty"));
        }
        if !(self.init_std.is_finite() && self.init_std >= 0.0) {
            return Err(Error::config("init_std must be finite and non-negative"));
        }
        let hashed = matches!(
            self.kind,
            SchemeKind::HashTrick
                | SchemeKind::Bloom
                | SchemeKind::HashEmb
                | SchemeKind::Hybrid
                | SchemeKind::Dhe
        );
        if hashed && self.buckets < 2 {
            return Err(Error::config(format!(
                "{} needs at least 2 buckets",
                self.kind
            )));
        }
        if hashed && self.num_hashes == 0 {
            return Err(Error::config(format!(
                "{} needs at least one hash function",
                self.kind
            )));
        }
        match self.kind {
            SchemeKind::Hybrid => {
                if !(self.hybrid_fraction > 0.0 && self.hybrid_fraction <= 1.0) {
                    return Err(Error::config("hybrid fraction must lie in (0, 1]"));
                }
            }
            SchemeKind::Compositional => {
                if self.buckets == 0 || self.buckets > self.vocab_size {
                    return Err(Error::config(
                        "compositional remainder count must lie in 1..=n",
                    ));
                }
                if self.compositional_hidden == 0 {
                    return Err(Error::config("compositional hidden width must be positive"));
                }
            }
            SchemeKind::Dhe => {
                self.mlp_config()?.validate()?;
            }
            _ => {}
        }
        Ok(())
    }

    /// Number of in-vocab values with a dedicated hybrid row, `⌈q·n⌉`.
    pub fn hybrid_dedicated(&self) -> u64 {
        ((self.hybrid_fraction * self.vocab_size as f64).ceil() as u64).min(self.vocab_size)
    }

    /// Quotient-table rows of the compositional scheme, `⌈n/m⌉`.
    pub fn quotient_rows(&self) -> u64 {
        self.vocab_size.div_ceil(self.buckets.max(1))
    }

    /// DHE network input length: `k` hash values plus side features.
    pub fn dhe_input_dim(&self) -> usize {
        (if self.dhe.use_hash {
            self.num_hashes
        } else {
            0
        }) + self.dhe.side_dim
    }

    pub fn mlp_config(&self) -> Result<MlpConfig> {
        let cfg = MlpConfig {
            input_dim: self.dhe_input_dim(),
            hidden_width: self.dhe.hidden_width,
            hidden_layers: self.dhe.hidden_layers,
            output_dim: self.dim,
            activation: self.dhe.activation,
            batchnorm: self.dhe.batchnorm,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    fn compositional_mlp_params(&self) -> u64 {
        let (d, w) = (self.dim as u64, self.compositional_hidden as u64);
        d * w + w + w * d + d
    }

    /// Exact learnable-scalar count, biases and BN scale/shift included.
    pub fn param_count(&self) -> u64 {
        let d = self.dim as u64;
        let k = self.num_hashes as u64;
        match self.kind {
            SchemeKind::Full => self.vocab_size * d,
            SchemeKind::HashTrick => self.buckets * d,
            SchemeKind::Bloom => {
                if self.shared_table {
                    self.buckets * d
                } else {
                    k * self.buckets * d
                }
            }
            SchemeKind::HashEmb => self.buckets * d + self.vocab_size * k,
            SchemeKind::Hybrid => self.hybrid_dedicated() * d + self.buckets * d,
            SchemeKind::Compositional => {
                self.quotient_rows() * d + self.buckets * self.compositional_mlp_params()
            }
            SchemeKind::Dhe => self
                .mlp_config()
                .map(|c| c.param_count() as u64)
                .unwrap_or(0),
        }
    }

    /// DHE weights only: `k·d_NN + (h−1)·d_NN² + d_NN·d`.
    pub fn dhe_weight_count(&self) -> u64 {
        self.mlp_config()
            .map(|c| c.weight_count() as u64)
            .unwrap_or(0)
    }
}

/// Largest capacity for `base.kind` whose [`SchemeConfig::param_count`] fits
/// in `budget`: the row count `m` for table schemes, the width `d_NN` for
/// DHE. Full embedding only checks that `n·d` fits.
pub fn size_for_budget(base: &SchemeConfig, budget: u64) -> Result<SchemeConfig> {
    let mut cfg = base.clone();
    let d = cfg.dim as u64;
    if d == 0 {
        return Err(Error::config("embedding dimension must be positive"));
    }
    let infeasible = || Error::config(format!("budget {budget} is infeasible for {}", base.kind));
    match cfg.kind {
        SchemeKind::Full => {
            cfg.buckets = cfg.vocab_size;
            if cfg.param_count() > budget {
                return Err(infeasible());
            }
        }
        SchemeKind::HashTrick | SchemeKind::Bloom | SchemeKind::HashEmb | SchemeKind::Hybrid => {
            let fixed = match cfg.kind {
                SchemeKind::HashEmb => cfg.vocab_size * cfg.num_hashes as u64,
                SchemeKind::Hybrid => cfg.hybrid_dedicated() * d,
                _ => 0,
            };
            let per_row = if cfg.kind == SchemeKind::Bloom && !cfg.shared_table {
                d * cfg.num_hashes as u64
            } else {
                d
            };
            let m = budget.checked_sub(fixed).ok_or_else(infeasible)? / per_row;
            if m < 2 {
                return Err(infeasible());
            }
            cfg.buckets = m;
        }
        SchemeKind::Compositional => {
            // Cost is not monotone in m, so scan for the largest fit.
            let found = (1..=cfg.vocab_size).rev().find(|&m| {
                let mut probe = cfg.clone();
                probe.buckets = m;
                probe.param_count() <= budget
            });
            cfg.buckets = found.ok_or_else(infeasible)?;
        }
        SchemeKind::Dhe => {
            let count = |w: usize| {
                let mut probe = cfg.clone();
                probe.dhe.hidden_width = w;
                probe.param_count()
            };
            if cfg.dhe_input_dim() == 0 || cfg.dhe.hidden_layers == 0 || count(1) > budget {
                return Err(infeasible());
            }
            // Count grows strictly with width: bisect.
            let (mut lo, mut hi) = (1usize, 2usize);
            while count(hi) <= budget {
                lo = hi;
                hi *= 2;
            }
            while hi - lo > 1 {
                let mid = lo + (hi - lo) / 2;
                if count(mid) <= budget {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            cfg.dhe.hidden_width = lo;
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Gradient for one parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub enum ParamGrad {
    Dense(Vec<f64>),
    /// Row-sparse gradient of a `rows × width` table, rows ascending.
    Rows {
        width: usize,
        rows: Vec<(usize, Vec<f64>)>,
    },
}

impl ParamGrad {
    pub fn to_dense(&self, len: usize) -> Vec<f64> {
        match self {
            ParamGrad::Dense(v) => v.clone(),
            ParamGrad::Rows { width, rows } => {
                let mut out = vec![0.0; len];
                for (r, g) in rows {
                    out[r * width..(r + 1) * width].copy_from_slice(g);
                }
                out
            }
        }
    }

    /// Indices of rows with a gradient, for sparse tensors.
    pub fn touched_rows(&self) -> Option<Vec<usize>> {
        match self {
            ParamGrad::Dense(_) => None,
            ParamGrad::Rows { rows, .. } => Some(rows.iter().map(|(r, _)| *r).collect()),
        }
    }
}

/// Gradients aligned with [`Scheme::params`].
#[derive(Debug, Clone, PartialEq)]
pub struct SchemeGrads(pub Vec<ParamGrad>);

/// One looked-up row contributing `weight · table[row]` to an embedding.
#[derive(Debug, Clone, Copy)]
struct Tap {
    table: usize,
    row: usize,
    weight: f64,
    /// `(value, hash index)` when the weight is a learned importance weight.
    importance: Option<(usize, usize)>,
}

#[derive(Debug, Clone)]
enum TapeInner {
    Taps(Vec<Vec<Tap>>),
    Compositional {
        quotient_rows: Vec<usize>,
        groups: Vec<(usize, Vec<usize>, MlpTape)>,
    },
    Dhe {
        unique_of_row: Vec<usize>,
        n_unique: usize,
        tape: MlpTape,
    },
}

/// Record of a [`Scheme::forward`] call.
#[derive(Debug, Clone)]
pub struct SchemeTape {
    version: u64,
    batch: usize,
    inner: TapeInner,
}

impl SchemeTape {
    pub fn batch_size(&self) -> usize {
        self.batch
    }
}

#[derive(Debug, Clone, PartialEq)]
enum State {
    /// Full embedding and hashing trick.
    Table {
        table: Array2<f64>,
        family: Option<HashFamily>,
    },
    Bloom {
        tables: Vec<Array2<f64>>,
        family: HashFamily,
    },
    HashEmb {
        table: Array2<f64>,
        importance: Array2<f64>,
        family: HashFamily,
    },
    Hybrid {
        dedicated: Array2<f64>,
        shared: Array2<f64>,
        family: HashFamily,
        /// Dedicated row per in-vocab value, `u32::MAX` when hashed.
        slot: Vec<u32>,
        frequent: Vec<u64>,
    },
    Compositional {
        quotient: Array2<f64>,
        mlps: Vec<Mlp>,
    },
    Dhe {
        encoder: Option<DenseHashEncoder>,
        mlp: Mlp,
        side: Option<Array2<f64>>,
        /// Encodings of in-vocab values; deterministic, so computed once.
        /// Empty when the vocabulary is too large to cache.
        cache: Array2<f64>,
    },
}

/// A configured embedding scheme with its learnable state.
#[derive(Debug, Clone, PartialEq)]
pub struct Scheme {
    cfg: SchemeConfig,
    state: State,
    version: u64,
}

fn normal_table(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Array2<f64> {
    if std == 0.0 {
        return Array2::zeros((rows, cols));
    }
    let dist = Normal::new(0.0, std).expect("finite std");
    Array2::from_shape_simple_fn((rows, cols), || dist.sample(rng))
}

fn to_index(v: u64) -> Result<usize> {
    usize::try_from(v).map_err(|_| Error::config(format!("{v} rows do not fit in memory")))
}

impl Scheme {
    /// Builds a scheme. Hybrid hashing takes its frequent set from
    /// `frequencies` (one training count per in-vocab value); without it,
    /// ties resolve by id so the lowest ids get dedicated rows.
    pub fn new(cfg: &SchemeConfig) -> Result<Self> {
        Self::with_frequencies(cfg, None)
    }

    pub fn with_frequencies(cfg: &SchemeConfig, frequencies: Option<&[u64]>) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_7ab1e);
        let d = cfg.dim;
        let std = cfg.init_std;
        let n = to_index(cfg.vocab_size)?;
        let state = match cfg.kind {
            SchemeKind::Full => State::Table {
                table: normal_table(&mut rng, n, d, std),
                family: None,
            },
            SchemeKind::HashTrick => State::Table {
                table: normal_table(&mut rng, to_index(cfg.buckets)?, d, std),
                family: Some(HashFamily::new(cfg.seed, cfg.num_hashes, cfg.buckets)?),
            },
            SchemeKind::Bloom => {
                let m = to_index(cfg.buckets)?;
                let count = if cfg.shared_table { 1 } else { cfg.num_hashes };
                State::Bloom {
                    tables: (0..count)
                        .map(|_| normal_table(&mut rng, m, d, std))
                        .collect(),
                    family: HashFamily::new(cfg.seed, cfg.num_hashes, cfg.buckets)?,
                }
            }
            SchemeKind::HashEmb => State::HashEmb {
                table: normal_table(&mut rng, to_index(cfg.buckets)?, d, std),
                importance: Array2::from_elem((n, cfg.num_hashes), 1.0 / cfg.num_hashes as f64),
                family: HashFamily::new(cfg.seed, cfg.num_hashes, cfg.buckets)?,
            },
            SchemeKind::Hybrid => {
                if let Some(f) = frequencies {
                    if f.len() != n {
                        return Err(Error::config(format!(
                            "frequency table has {} entries for a vocabulary of {n}",
                            f.len()
                        )));
                    }
                }
                let mut order: Vec<u64> = (0..cfg.vocab_size).collect();
                if let Some(f) = frequencies {
                    order.sort_by(|&a, &b| f[b as usize].cmp(&f[a as usize]).then(a.cmp(&b)));
                }
                let mut frequent = order[..cfg.hybrid_dedicated() as usize].to_vec();
                frequent.sort_unstable();
                Self::hybrid_state(cfg, &mut rng, frequent)?
            }
            SchemeKind::Compositional => {
                let mlp_dims = [d, cfg.compositional_hidden, d];
                let quotient = normal_table(&mut rng, to_index(cfg.quotient_rows())?, d, std);
                let mlps = (0..cfg.buckets)
                    .map(|_| Mlp::with_rng(&mlp_dims, Activation::Relu, false, &mut rng))
                    .collect();
                State::Compositional { quotient, mlps }
            }
            SchemeKind::Dhe => {
                let mlp_cfg = cfg.mlp_config()?;
                let mlp = Mlp::with_rng(
                    &mlp_cfg.layer_dims(),
                    mlp_cfg.activation,
                    mlp_cfg.batchnorm,
                    &mut rng,
                );
                let encoder = if cfg.dhe.use_hash {
                    Some(DenseHashEncoder::from_seed(
                        cfg.seed,
                        cfg.num_hashes,
                        cfg.buckets,
                        cfg.dhe.distribution,
                    )?)
                } else {
                    None
                };
                let mut state = State::Dhe {
                    encoder,
                    mlp,
                    side: None,
                    cache: Array2::zeros((0, 0)),
                };
                Self::rebuild_dhe_cache(cfg, &mut state);
                state
            }
        };
        Ok(Scheme {
            cfg: cfg.clone(),
            state,
            version: 0,
        })
    }

    fn hybrid_state(cfg: &SchemeConfig, rng: &mut ChaCha8Rng, frequent: Vec<u64>) -> Result<State> {
        let n = to_index(cfg.vocab_size)?;
        let mut slot = vec![u32::MAX; n];
        for (i, &v) in frequent.iter().enumerate() {
            slot[v as usize] = i as u32;
        }
        Ok(State::Hybrid {
            dedicated: normal_table(rng, frequent.len(), cfg.dim, cfg.init_std),
            shared: normal_table(rng, to_index(cfg.buckets)?, cfg.dim, cfg.init_std),
            family: HashFamily::new(cfg.seed, cfg.num_hashes, cfg.buckets)?,
            slot,
            frequent,
        })
    }

    fn rebuild_dhe_cache(cfg: &SchemeConfig, state: &mut State) {
        if let State::Dhe {
            encoder,
            side,
            cache,
            ..
        } = state
        {
            let width = cfg.dhe_input_dim();
            let n = cfg.vocab_size as usize;
            let n = if n.saturating_mul(width) <= DHE_CACHE_LIMIT {
                n
            } else {
                0
            };
            let mut out = Array2::zeros((n, width));
            for (x, mut row) in out.rows_mut().into_iter().enumerate() {
                let row = row.as_slice_mut().expect("standard layout");
                Self::dhe_encode(cfg, encoder.as_ref(), side.as_ref(), x as u64, row);
            }
            *cache = out;
        }
    }

    fn dhe_encode(
        cfg: &SchemeConfig,
        encoder: Option<&DenseHashEncoder>,
        side: Option<&Array2<f64>>,
        x: u64,
        out: &mut [f64],
    ) {
        let k = if let Some(enc) = encoder {
            enc.encode_into(x, &mut out[..enc.k()]);
            enc.k()
        } else {
            0
        };
        let tail = &mut out[k..];
        match side {
            Some(s) if x < cfg.vocab_size => {
                tail.copy_from_slice(s.row(x as usize).as_slice().expect("standard layout"))
            }
            _ => tail.fill(0.0),
        }
    }

    pub fn config(&self) -> &SchemeConfig {
        &self.cfg
    }

    pub fn kind(&self) -> SchemeKind {
        self.cfg.kind
    }

    pub fn dim(&self) -> usize {
        self.cfg.dim
    }

    /// Attaches per-value side features (DHE only), one row per in-vocab
    /// value. Out-of-vocab values see an all-zero side vector.
    pub fn set_side_features(&mut self, side: Array2<f64>) -> Result<()> {
        let State::Dhe { side: slot, .. } = &mut self.state else {
            return Err(Error::config("side features are only supported by dhe"));
        };
        if side.dim() != (self.cfg.vocab_size as usize, self.cfg.dhe.side_dim) {
            return Err(Error::config(format!(
                "side features have shape {:?}, expected ({}, {})",
                side.dim(),
                self.cfg.vocab_size,
                self.cfg.dhe.side_dim
            )));
        }
        if side.iter().any(|v| !v.is_finite()) {
            return Err(Error::config("side features must be finite"));
        }
        *slot = Some(side.as_standard_layout().into_owned());
        Self::rebuild_dhe_cache(&self.cfg, &mut self.state);
        self.version += 1;
        Ok(())
    }

    /// Ids given dedicated rows by hybrid hashing, ascending.
    pub fn frequent_ids(&self) -> Option<&[u64]> {
        match &self.state {
            State::Hybrid { frequent, .. } => Some(frequent),
            _ => None,
        }
    }

    fn check_in_vocab(&self, x: u64) -> Result<()> {
        if !self.cfg.kind.handles_oov() && x >= self.cfg.vocab_size {
            return Err(Error::Domain {
                value: x,
                vocab: self.cfg.vocab_size,
            });
        }
        Ok(())
    }

    fn taps(&self, x: u64, out: &mut Vec<Tap>) {
        let plain = |table, row| Tap {
            table,
            row,
            weight: 1.0,
            importance: None,
        };
        match &self.state {
            State::Table { family, .. } => {
                let row = match family {
                    Some(f) => f.params()[0].hash(x) as usize,
                    None => x as usize,
                };
                out.push(plain(0, row));
            }
            State::Bloom { tables, family } => {
                for (j, h) in family.params().iter().enumerate() {
                    out.push(plain(
                        if tables.len() == 1 { 0 } else { j },
                        h.hash(x) as usize,
                    ));
                }
            }
            State::HashEmb {
                importance, family, ..
            } => {
                let k = family.k();
                for (j, h) in family.params().iter().enumerate() {
                    let (weight, imp) = if x < self.cfg.vocab_size {
                        (importance[[x as usize, j]], Some((x as usize, j)))
                    } else {
                        (1.0 / k as f64, None)
                    };
                    out.push(Tap {
                        table: 0,
                        row: h.hash(x) as usize,
                        weight,
                        importance: imp,
                    });
                }
            }
            State::Hybrid { slot, family, .. } => {
                let s = if x < self.cfg.vocab_size {
                    slot[x as usize]
                } else {
                    u32::MAX
                };
                if s != u32::MAX {
                    out.push(plain(0, s as usize));
                } else {
                    for h in family.params() {
                        out.push(plain(1, h.hash(x) as usize));
                    }
                }
            }
            State::Compositional { .. } | State::Dhe { .. } => unreachable!("not a lookup scheme"),
        }
    }

    fn tables(&self) -> Vec<&Array2<f64>> {
        match &self.state {
            State::Table { table, .. } => vec![table],
            State::Bloom { tables, .. } => tables.iter().collect(),
            State::HashEmb { table, .. } => vec![table],
            State::Hybrid {
                dedicated, shared, ..
            } => vec![dedicated, shared],
            State::Compositional { quotient, .. } => vec![quotient],
            State::Dhe { .. } => Vec::new(),
        }
    }

    /// Embedding of `x` with inference-mode normalization. Pure in the
    /// parameters and `x`.
    pub fn embed(&self, x: u64) -> Result<Vec<f64>> {
        Ok(self.embed_batch(&[x])?.row(0).to_vec())
    }

    /// Inference-mode embeddings, one row per id.
    pub fn embed_batch(&self, ids: &[u64]) -> Result<RealMatrix> {
        for &x in ids {
            self.check_in_vocab(x)?;
        }
        let d = self.cfg.dim;
        match &self.state {
            State::Compositional { quotient, mlps } => {
                let m = self.cfg.buckets;
                let mut out = Array2::zeros((ids.len(), d));
                for (i, &x) in ids.iter().enumerate() {
                    let q = quotient.row((x / m) as usize).insert_axis(ndarray::Axis(0));
                    let y = mlps[(x % m) as usize].infer(q)?;
                    out.row_mut(i).assign(&y.row(0));
                }
                Ok(out)
            }
            State::Dhe { mlp, .. } => mlp.infer(self.dhe_inputs(ids).view()),
            _ => {
                let tables = self.tables();
                let mut out = Array2::zeros((ids.len(), d));
                let mut taps = Vec::new();
                for (i, &x) in ids.iter().enumerate() {
                    taps.clear();
                    self.taps(x, &mut taps);
                    let mut row = out.row_mut(i);
                    for t in &taps {
                        row.scaled_add(t.weight, &tables[t.table].row(t.row));
                    }
                }
                Ok(out)
            }
        }
    }

    fn dhe_inputs(&self, ids: &[u64]) -> RealMatrix {
        let State::Dhe {
            encoder,
            side,
            cache,
            ..
        } = &self.state
        else {
            unreachable!("dhe only")
        };
        let width = self.cfg.dhe_input_dim();
        let mut x = Array2::zeros((ids.len(), width));
        for (i, &id) in ids.iter().enumerate() {
            if (id as usize) < cache.nrows() {
                x.row_mut(i).assign(&cache.row(id as usize));
            } else {
                let row = x.row_mut(i).into_slice().expect("standard layout");
                Self::dhe_encode(&self.cfg, encoder.as_ref(), side.as_ref(), id, row);
            }
        }
        x
    }

    /// Training-time embeddings for a minibatch, plus the tape for
    /// [`Scheme::backward`]. DHE normalizes over the distinct ids of the
    /// batch, so train mode needs at least two distinct ids when BN is on.
    pub fn forward(&mut self, ids: &[u64], mode: Mode) -> Result<(RealMatrix, SchemeTape)> {
        for &x in ids {
            self.check_in_vocab(x)?;
        }
        let version = self.version;
        let d = self.cfg.dim;
        let batch = ids.len();
        let (out, inner) = match &mut self.state {
            State::Dhe { .. } => {
                let mut first: BTreeMap<u64, usize> = BTreeMap::new();
                let mut unique = Vec::new();
                let unique_of_row: Vec<usize> = ids
                    .iter()
                    .map(|&x| {
                        *first.entry(x).or_insert_with(|| {
                            unique.push(x);
                            unique.len() - 1
                        })
                    })
                    .collect();
                let inputs = self.dhe_inputs(&unique);
                let State::Dhe { mlp, .. } = &mut self.state else {
                    unreachable!()
                };
                let (y, tape) = mlp.forward(inputs.view(), mode)?;
                let mut out = Array2::zeros((batch, d));
                for (i, &u) in unique_of_row.iter().enumerate() {
                    out.row_mut(i).assign(&y.row(u));
                }
                (
                    out,
                    TapeInner::Dhe {
                        unique_of_row,
                        n_unique: unique.len(),
                        tape,
                    },
                )
            }
            State::Compositional { quotient, mlps } => {
                let m = self.cfg.buckets;
                let mut by_mlp: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
                for (i, &x) in ids.iter().enumerate() {
                    by_mlp.entry((x % m) as usize).or_default().push(i);
                }
                let quotient_rows: Vec<usize> = ids.iter().map(|&x| (x / m) as usize).collect();
                let mut out = Array2::zeros((batch, d));
                let mut groups = Vec::with_capacity(by_mlp.len());
                for (r, rows) in by_mlp {
                    let mut input = Array2::zeros((rows.len(), d));
                    for (j, &i) in rows.iter().enumerate() {
                        input.row_mut(j).assign(&quotient.row(quotient_rows[i]));
                    }
                    let (y, tape) = mlps[r].forward(input.view(), mode)?;
                    for (j, &i) in rows.iter().enumerate() {
                        out.row_mut(i).assign(&y.row(j));
                    }
                    groups.push((r, rows, tape));
                }
                (
                    out,
                    TapeInner::Compositional {
                        quotient_rows,
                        groups,
                    },
                )
            }
            _ => {
                let out = self.embed_batch(ids)?;
                let all = ids
                    .iter()
                    .map(|&x| {
                        let mut t = Vec::new();
                        self.taps(x, &mut t);
                        t
                    })
                    .collect();
                (out, TapeInner::Taps(all))
            }
        };
        Ok((
            out,
            SchemeTape {
                version,
                batch,
                inner,
            },
        ))
    }

    /// Parameter gradients given `dL/d(embedding)` for each tape row. Table
    /// tensors come back row-sparse.
    pub fn backward(&self, tape: &SchemeTape, output_grad: ArrayView2<f64>) -> Result<SchemeGrads> {
        if tape.version != self.version {
            return Err(Error::contract(
                "stale tape: parameters changed after the forward pass",
            ));
        }
        if output_grad.dim() != (tape.batch, self.cfg.dim) {
            return Err(Error::contract(format!(
                "embedding gradient has shape {:?}, expected ({}, {})",
                output_grad.dim(),
                tape.batch,
                self.cfg.dim
            )));
        }
        let d = self.cfg.dim;
        match (&tape.inner, &self.state) {
            (TapeInner::Taps(all), _) => {
                let tables = self.tables();
                let mut rows: Vec<BTreeMap<usize, Array1<f64>>> =
                    vec![BTreeMap::new(); tables.len()];
                let mut imp: BTreeMap<(usize, usize), f64> = BTreeMap::new();
                for (i, taps) in all.iter().enumerate() {
                    let g = output_grad.row(i);
                    for t in taps {
                        rows[t.table]
                            .entry(t.row)
                            .or_insert_with(|| Array1::zeros(d))
                            .scaled_add(t.weight, &g);
                        if let Some(key) = t.importance {
                            *imp.entry(key).or_insert(0.0) += g.dot(&tables[t.table].row(t.row));
                        }
                    }
                }
                let mut grads: Vec<ParamGrad> = rows
                    .into_iter()
                    .map(|r| ParamGrad::Rows {
                        width: d,
                        rows: r.into_iter().map(|(k, v)| (k, v.to_vec())).collect(),
                    })
                    .collect();
                if let State::HashEmb { importance, .. } = &self.state {
                    let k = importance.ncols();
                    let mut by_row: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
                    for ((x, j), v) in imp {
                        by_row.entry(x).or_insert_with(|| vec![0.0; k])[j] += v;
                    }
                    grads.push(ParamGrad::Rows {
                        width: k,
                        rows: by_row.into_iter().collect(),
                    });
                }
                Ok(SchemeGrads(grads))
            }
            (
                TapeInner::Compositional {
                    quotient_rows,
                    groups,
                },
                State::Compositional { mlps, .. },
            ) => {
                let mut qrows: BTreeMap<usize, Array1<f64>> = BTreeMap::new();
                let mut mlp_grads: Vec<Option<Vec<Vec<f64>>>> = vec![None; mlps.len()];
                for (r, rows, mtape) in groups {
                    let mut g = Array2::zeros((rows.len(), d));
                    for (j, &i) in rows.iter().enumerate() {
                        g.row_mut(j).assign(&output_grad.row(i));
                    }
                    let mg = mlps[*r].backward(mtape, g.view(), true)?;
                    let input = mg.input.as_ref().expect("input gradient requested");
                    for (j, &i) in rows.iter().enumerate() {
                        *qrows
                            .entry(quotient_rows[i])
                            .or_insert_with(|| Array1::zeros(d)) += &input.row(j);
                    }
                    mlp_grads[*r] = Some(mg.flatten());
                }
                let mut grads = vec![ParamGrad::Rows {
                    width: d,
                    rows: qrows.into_iter().map(|(k, v)| (k, v.to_vec())).collect(),
                }];
                for (mlp, g) in mlps.iter().zip(mlp_grads) {
                    match g {
                        Some(flat) => grads.extend(flat.into_iter().map(ParamGrad::Dense)),
                        None => grads.extend(
                            mlp.params()
                                .iter()
                                .map(|p| ParamGrad::Dense(vec![0.0; p.len()])),
                        ),
                    }
                }
                Ok(SchemeGrads(grads))
            }
            (
                TapeInner::Dhe {
                    unique_of_row,
                    n_unique,
                    tape,
                },
                State::Dhe { mlp, .. },
            ) => {
                let mut g = Array2::zeros((*n_unique, d));
                for (i, &u) in unique_of_row.iter().enumerate() {
                    let mut row = g.row_mut(u);
                    row += &output_grad.row(i);
                }
                let mg = mlp.backward(tape, g.view(), false)?;
                Ok(SchemeGrads(
                    mg.flatten().into_iter().map(ParamGrad::Dense).collect(),
                ))
            }
            _ => Err(Error::contract("tape does not belong to this scheme")),
        }
    }

    /// Learnable tensors in a fixed order (tables, importance weights,
    /// network weights).
    pub fn params(&self) -> Vec<&[f64]> {
        fn slice(a: &Array2<f64>) -> &[f64] {
            a.as_slice().expect("standard layout")
        }
        match &self.state {
            State::Table { table, .. } => vec![slice(table)],
            State::Bloom { tables, .. } => tables.iter().map(slice).collect(),
            State::HashEmb {
                table, importance, ..
            } => vec![slice(table), slice(importance)],
            State::Hybrid {
                dedicated, shared, ..
            } => vec![slice(dedicated), slice(shared)],
            State::Compositional { quotient, mlps } => {
                let mut v = vec![slice(quotient)];
                for m in mlps {
                    v.extend(m.params());
                }
                v
            }
            State::Dhe { mlp, .. } => mlp.params(),
        }
    }

    /// Mutable views in the order of [`Scheme::params`]. Invalidates tapes.
    pub fn params_mut(&mut self) -> Vec<&mut [f64]> {
        self.version += 1;
        fn s(a: &mut Array2<f64>) -> &mut [f64] {
            a.as_slice_mut().expect("standard layout")
        }
        match &mut self.state {
            State::Table { table, .. } => vec![s(table)],
            State::Bloom { tables, .. } => tables.iter_mut().map(s).collect(),
            State::HashEmb {
                table, importance, ..
            } => vec![s(table), s(importance)],
            State::Hybrid {
                dedicated, shared, ..
            } => vec![s(dedicated), s(shared)],
            State::Compositional { quotient, mlps } => {
                let mut v = vec![s(quotient)];
                for m in mlps.iter_mut() {
                    v.extend(m.params_mut());
                }
                v
            }
            State::Dhe { mlp, .. } => mlp.params_mut(),
        }
    }

    /// Learnable scalars actually held by this instance.
    pub fn param_count(&self) -> u64 {
        self.params().iter().map(|p| p.len() as u64).sum()
    }

    /// One optimizer step. Sparse table gradients are densified so that
    /// Adam's moment decay applies to every entry.
    pub fn apply_gradients(&mut self, opt: &mut Adam, grads: &SchemeGrads) -> Result<()> {
        let lens: Vec<usize> = self.params().iter().map(|p| p.len()).collect();
        if lens.len() != grads.0.len() {
            return Err(Error::contract(format!(
                "{} gradient tensors for {} parameters",
                grads.0.len(),
                lens.len()
            )));
        }
        let dense: Vec<Vec<f64>> = grads
            .0
            .iter()
            .zip(&lens)
            .map(|(g, &len)| g.to_dense(len))
            .collect();
        opt.step(self.params_mut(), &dense)
    }

    /// Full state, including BN running statistics and scheme-specific
    /// lookup data, for checkpoints.
    pub fn tensors(&self) -> Vec<NamedTensor> {
        let mut out = Vec::new();
        match &self.state {
            State::Table { table, .. } => out.push(NamedTensor::matrix("table", table)),
            State::Bloom { tables, .. } => {
                for (j, t) in tables.iter().enumerate() {
                    out.push(NamedTensor::matrix(format!("table{j}"), t));
                }
            }
            State::HashEmb {
                table, importance, ..
            } => {
                out.push(NamedTensor::matrix("table", table));
                out.push(NamedTensor::matrix("importance", importance));
            }
            State::Hybrid {
                dedicated,
                shared,
                frequent,
                ..
            } => {
                out.push(NamedTensor::matrix("dedicated", dedicated));
                out.push(NamedTensor::matrix("shared", shared));
                out.push(NamedTensor::new(
                    "frequent_ids",
                    vec![frequent.len()],
                    frequent.iter().map(|&v| v as f64).collect(),
                ));
            }
            State::Compositional { quotient, mlps } => {
                out.push(NamedTensor::matrix("quotient", quotient));
                for (r, m) in mlps.iter().enumerate() {
                    out.extend(m.tensors(&format!("mlp{r}.")));
                }
            }
            State::Dhe { mlp, side, .. } => {
                out.extend(mlp.tensors("mlp."));
                if let Some(s) = side {
                    out.push(NamedTensor::matrix("side", s));
                }
            }
        }
        out
    }

    pub fn to_checkpoint_bytes(&self) -> Result<Vec<u8>> {
        checkpoint::encode(&serde_json::to_value(&self.cfg)?, &self.tensors())
    }

    pub fn from_checkpoint_bytes(bytes: &[u8]) -> Result<Self> {
        let (config, tensors) = checkpoint::decode(bytes)?;
        let cfg: SchemeConfig = serde_json::from_value(config)?;
        Self::from_tensors(&cfg, &tensors)
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        std::fs::write(path, self.to_checkpoint_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::from_checkpoint_bytes(&std::fs::read(path)?)
    }

    /// Rebuilds a scheme from [`Scheme::tensors`] output.
    pub fn from_tensors(cfg: &SchemeConfig, tensors: &[NamedTensor]) -> Result<Self> {
        let find = |name: &str| -> Result<&NamedTensor> {
            tensors
                .iter()
                .find(|t| t.name == name)
                .ok_or_else(|| Error::Format(format!("checkpoint is missing tensor {name}")))
        };
        let fill = |dst: &mut Array2<f64>, name: &str| -> Result<()> {
            let t = find(name)?;
            if t.shape != [dst.nrows(), dst.ncols()] {
                return Err(Error::Format(format!(
                    "tensor {name} has shape {:?}, expected {:?}",
                    t.shape,
                    dst.dim()
                )));
            }
            t.copy_into(dst.as_slice_mut().expect("standard layout"))
        };
        let mut scheme = Scheme::new(cfg)?;
        match &mut scheme.state {
            State::Table { table, .. } => fill(table, "table")?,
            State::Bloom { tables, .. } => {
                for (j, t) in tables.iter_mut().enumerate() {
                    fill(t, &format!("table{j}"))?;
                }
            }
            State::HashEmb {
                table, importance, ..
            } => {
                fill(table, "table")?;
                fill(importance, "importance")?;
            }
            State::Hybrid { .. } => {
                let ids = &find("frequent_ids")?.data;
                let frequent: Vec<u64> = ids.iter().map(|&v| v as u64).collect();
                if frequent.len() as u64 != cfg.hybrid_dedicated()
                    || frequent.iter().any(|&v| v >= cfg.vocab_size)
                    || frequent.windows(2).any(|w| w[0] >= w[1])
                {
                    return Err(Error::Format("invalid hybrid frequent set".into()));
                }
                let mut rng = ChaCha8Rng::seed_from_u64(0);
                scheme.state = Self::hybrid_state(cfg, &mut rng, frequent)?;
                if let State::Hybrid {
                    dedicated, shared, ..
                } = &mut scheme.state
                {
                    fill(dedicated, "dedicated")?;
                    fill(shared, "shared")?;
                }
            }
            State::Compositional { quotient, mlps } => {
                fill(quotient, "quotient")?;
                for (r, m) in mlps.iter_mut().enumerate() {
                    m.load_tensors(&format!("mlp{r}."), tensors)?;
                }
            }
            State::Dhe { mlp, .. } => mlp.load_tensors("mlp.", tensors)?,
        }
        if let Ok(side) = find("side") {
            let [rows, cols] = side.shape[..] else {
                return Err(Error::Format("side features must be a matrix".into()));
            };
            let m = Array2::from_shape_vec((rows, cols), side.data.clone())
                .map_err(|e| Error::Format(e.to_string()))?;
            scheme.set_side_features(m)?;
        }
        scheme.version = 0;
        Ok(scheme)
    }
}
