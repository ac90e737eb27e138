//! Encoding-property analyzer: uniqueness, equal similarity, high
//! dimensionality and high entropy, measured by Monte Carlo and compared with
//! closed forms.

use std::collections::HashMap;
use std::fmt::Write as _;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::encoders::{DenseHashEncoder, Distribution, Encoder, EncodingKind, MultiHashMode};
use crate::error::{Error, Result};
use crate::hashing::{HashFamily, SplitMix64};

/// Collision rate below which an encoding counts as unique.
pub const UNIQUENESS_EPS: f64 = 1e-3;
/// Fraction of the maximum entropy a dimension must reach on average.
pub const ENTROPY_FRACTION: f64 = 0.9;
/// Length from which an encoding counts as high-dimensional.
pub const HIGH_DIM_THRESHOLD: usize = 100;

/// `1 − exp(−n(n−1) / 2b)`: probability that `n` values hashed uniformly
/// into `b` buckets produce at least one collision.
pub fn closed_form_collision(n: f64, buckets: f64) -> f64 {
    if n <= 1.0 {
        return 0.0;
    }
    -(-n * (n - 1.0) / (2.0 * buckets)).exp_m1()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderKind {
    OneHot,
    OneHotHash,
    DoubleOneHotHash,
    Binary,
    Identity,
    DenseHash,
    RandomFourier,
}

impl EncoderKind {
    /// The six rows of the property comparison.
    pub const TABLE: [EncoderKind; 6] = [
        EncoderKind::OneHot,
        EncoderKind::OneHotHash,
        EncoderKind::DoubleOneHotHash,
        EncoderKind::Binary,
        EncoderKind::Identity,
        EncoderKind::DenseHash,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            EncoderKind::OneHot => "one_hot",
            EncoderKind::OneHotHash => "one_hot_hash",
            EncoderKind::DoubleOneHotHash => "double_one_hot_hash",
            EncoderKind::Binary => "binary",
            EncoderKind::Identity => "identity",
            EncoderKind::DenseHash => "dense_hash",
            EncoderKind::RandomFourier => "random_fourier",
        }
    }

    /// Expected verdicts `(U, E-S, H-D, H-E)` from the property table.
    pub fn expected_verdicts(self) -> Option<Verdicts> {
        let v = |u, es, hd, he| Some(Verdicts { u, es, hd, he });
        match self {
            EncoderKind::OneHot => v(true, true, true, false),
            EncoderKind::OneHotHash => v(false, true, true, false),
            EncoderKind::DoubleOneHotHash => v(false, true, true, false),
            EncoderKind::Binary => v(true, false, false, true),
            EncoderKind::Identity => v(true, false, false, true),
            EncoderKind::DenseHash => v(true, true, true, true),
            EncoderKind::RandomFourier => None,
        }
    }
}

impl std::str::FromStr for EncoderKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        EncoderKind::TABLE
            .into_iter()
            .chain([EncoderKind::RandomFourier])
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::config(format!("unknown encoder {s:?}")))
    }
}

/// Cosine features `cos(2π f_j x / n)` with seeded standard-normal
/// frequencies. A smooth baseline: nearby ids get nearby encodings.
#[derive(Debug, Clone)]
pub struct RandomFourierEncoder {
    n: u64,
    freqs: Vec<f64>,
}

impl RandomFourierEncoder {
    pub fn new(n: u64, k: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        RandomFourierEncoder {
            n,
            freqs: (0..k).map(|_| rng.sample(StandardNormal)).collect(),
        }
    }

    pub fn encode(&self, x: u64) -> Vec<f64> {
        let t = std::f64::consts::TAU * x as f64 / self.n as f64;
        self.freqs.iter().map(|f| (f * t).cos()).collect()
    }
}

/// Settings shared by all estimators.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnalysisConfig {
    /// Vocabulary size.
    pub n: u64,
    /// Hash buckets for the hashing encoders.
    pub m: u64,
    /// Dense-hash length.
    pub k: usize,
    /// Ids drawn for the entropy estimate, and the cap on distinct ids per
    /// collision trial.
    pub samples: usize,
    /// Random id pairs for the distance statistics.
    pub pairs: usize,
    /// Independent hash families for the collision estimate.
    pub trials: usize,
    /// Histogram bins for dense dimensions.
    pub bins: usize,
    pub seed: u64,
    pub hd_threshold: usize,
    pub distribution: Distribution,
    /// Feed hashing encoders a 64-bit digest of each index rather
    /// than the index itself. Contiguous indices below the hash prime are
    /// mapped almost injectively, which hides the collisions that arbitrary
    /// feature values produce.
    pub digest_values: bool,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        AnalysisConfig {
            n: 10_000,
            m: 10_000,
            k: 64,
            samples: 100_000,
            pairs: 100_000,
            trials: 20,
            bins: 100,
            seed: 0,
            hd_threshold: 64,
            distribution: Distribution::Uniform,
            digest_values: true,
        }
    }
}

/// Encoder under analysis, built per trial seed.
#[derive(Debug, Clone)]
pub struct Probe {
    encoder: ProbeEncoder,
    digest: bool,
}

#[derive(Debug, Clone)]
enum ProbeEncoder {
    Std(Encoder),
    Fourier(RandomFourierEncoder),
}

/// The feature value a hashing encoder sees for vocabulary index `x`: a
/// bijective 64-bit mix, standing in for arbitrary raw ids.
pub fn digest_value(x: u64) -> u64 {
    SplitMix64::new(x).next_u64()
}

/// An encoding in whichever form is cheaper.
#[derive(Debug, Clone, PartialEq)]
pub enum Encoded {
    Sparse(Vec<(usize, f64)>),
    Dense(Vec<f64>),
}

impl Probe {
    pub fn build(kind: EncoderKind, cfg: &AnalysisConfig, seed: u64) -> Result<Self> {
        use ProbeEncoder as P;
        let hashed = matches!(
            kind,
            EncoderKind::OneHotHash | EncoderKind::DoubleOneHotHash | EncoderKind::DenseHash
        );
        let encoder = match kind {
            EncoderKind::OneHot => P::Std(Encoder::OneHot { n: cfg.n }),
            EncoderKind::OneHotHash => P::Std(Encoder::OneHotHash {
                params: HashFamily::new(seed, 1, cfg.m)?.params()[0],
            }),
            EncoderKind::DoubleOneHotHash => P::Std(Encoder::MultiOneHotHash {
                family: HashFamily::new(seed, 2, cfg.m)?,
                mode: MultiHashMode::Concat,
            }),
            EncoderKind::Binary => P::Std(Encoder::Binary { n: cfg.n }),
            EncoderKind::Identity => P::Std(Encoder::Identity { n: cfg.n }),
            EncoderKind::DenseHash => P::Std(Encoder::DenseHash(DenseHashEncoder::from_seed(
                seed,
                cfg.k,
                cfg.m.max(2),
                cfg.distribution,
            )?)),
            EncoderKind::RandomFourier => P::Fourier(RandomFourierEncoder::new(cfg.n, cfg.k, seed)),
        };
        Ok(Probe {
            encoder,
            digest: hashed && cfg.digest_values,
        })
    }

    pub fn len(&self) -> usize {
        match &self.encoder {
            ProbeEncoder::Std(e) => e.len(),
            ProbeEncoder::Fourier(f) => f.freqs.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn kind(&self) -> EncodingKind {
        match &self.encoder {
            ProbeEncoder::Std(e) => e.kind(),
            ProbeEncoder::Fourier(_) => EncodingKind::Dense,
        }
    }

    /// Encodes vocabulary index `x`.
    pub fn encode(&self, x: u64) -> Result<Encoded> {
        let v = if self.digest { digest_value(x) } else { x };
        match &self.encoder {
            ProbeEncoder::Std(e) => match e.sparse(v)? {
                Some(s) => Ok(Encoded::Sparse(s)),
                None => Ok(Encoded::Dense(e.encode(v)?.values)),
            },
            ProbeEncoder::Fourier(f) => Ok(Encoded::Dense(f.encode(v))),
        }
    }
}

fn bits_key(e: &Encoded) -> Vec<u64> {
    match e {
        Encoded::Sparse(s) => s
            .iter()
            .flat_map(|(i, v)| [*i as u64, v.to_bits()])
            .collect(),
        Encoded::Dense(d) => d.iter().map(|v| v.to_bits()).collect(),
    }
}

fn squared_distance(a: &Encoded, b: &Encoded) -> f64 {
    match (a, b) {
        (Encoded::Dense(x), Encoded::Dense(y)) => {
            x.iter().zip(y).map(|(p, q)| (p - q) * (p - q)).sum()
        }
        (Encoded::Sparse(x), Encoded::Sparse(y)) => {
            let (mut i, mut j, mut acc) = (0, 0, 0.0);
            while i < x.len() || j < y.len() {
                let xi = x.get(i).map_or(usize::MAX, |e| e.0);
                let yj = y.get(j).map_or(usize::MAX, |e| e.0);
                let diff = if xi == yj {
                    i += 1;
                    j += 1;
                    x[i - 1].1 - y[j - 1].1
                } else if xi < yj {
                    i += 1;
                    x[i - 1].1
                } else {
                    j += 1;
                    y[j - 1].1
                };
                acc += diff * diff;
            }
            acc
        }
        _ => unreachable!("one probe yields one representation"),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CollisionEstimate {
    /// Fraction of trials in which any two sampled ids share an encoding.
    pub any_rate: f64,
    pub any_se: f64,
    /// Fraction of sampled id pairs that share an encoding. For multi-hash
    /// encoders this is inflated by families whose functions drew the same
    /// prime: ids congruent modulo it collide under every function.
    pub pair_rate: f64,
    pub trials: usize,
    pub ids_per_trial: usize,
}

/// Draws `min(n_samples, n)` distinct ids per trial, rebuilding the encoder
/// (and so its hash family) from a per-trial seed.
pub fn estimate_collision_rate(
    kind: EncoderKind,
    cfg: &AnalysisConfig,
    n_samples: usize,
    trials: usize,
    seed: u64,
) -> Result<CollisionEstimate> {
    if n_samples < 2 || trials == 0 {
        return Err(Error::config(
            "collision estimate needs at least 2 samples and 1 trial",
        ));
    }
    let s = n_samples.min(cfg.n as usize);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut hits, mut colliding_pairs) = (0usize, 0u128);
    for t in 0..trials {
        let probe = Probe::build(kind, cfg, seed.wrapping_add(t as u64))?;
        let mut groups: HashMap<Vec<u64>, usize> = HashMap::with_capacity(s);
        for x in index::sample(&mut rng, cfg.n as usize, s) {
            *groups
                .entry(bits_key(&probe.encode(x as u64)?))
                .or_insert(0) += 1;
        }
        let pairs: u128 = groups
            .values()
            .map(|&c| (c as u128) * (c as u128 - 1) / 2)
            .sum();
        if pairs > 0 {
            hits += 1;
        }
        colliding_pairs += pairs;
    }
    let any_rate = hits as f64 / trials as f64;
    let total_pairs = trials as f64 * (s as f64) * (s as f64 - 1.0) / 2.0;
    Ok(CollisionEstimate {
        any_rate,
        any_se: (any_rate * (1.0 - any_rate) / trials as f64).sqrt(),
        pair_rate: if total_pairs > 0.0 {
            colliding_pairs as f64 / total_pairs
        } else {
            0.0
        },
        trials,
        ids_per_trial: s,
    })
}

fn entropy_of_counts(counts: &[u64], total: u64) -> f64 {
    let t = total as f64;
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / t;
            -p * p.ln()
        })
        .sum()
}

/// Per-dimension histogram entropy (nats) over `n_samples` ids drawn
/// uniformly with replacement. Indicator dimensions use their two natural
/// outcomes; other dimensions use `bins` equal-width bins over the observed
/// range. Returns the entropies and the maximum attainable per dimension.
pub fn entropy_per_dimension(
    probe: &Probe,
    n: u64,
    n_samples: usize,
    bins: usize,
    seed: u64,
) -> Result<(Vec<f64>, f64)> {
    if bins < 2 || n_samples == 0 {
        return Err(Error::config("entropy needs at least 2 bins and 1 sample"));
    }
    let dims = probe.len();
    let draw = |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n_samples).map(move |_| rng.random_range(0..n))
    };
    if probe.kind() == EncodingKind::Indicator {
        let mut ones = vec![0u64; dims];
        for x in draw(seed) {
            match probe.encode(x)? {
                Encoded::Sparse(s) => s.iter().filter(|e| e.1 != 0.0).for_each(|e| ones[e.0] += 1),
                Encoded::Dense(d) => d
                    .iter()
                    .enumerate()
                    .filter(|e| *e.1 != 0.0)
                    .for_each(|e| ones[e.0] += 1),
            }
        }
        let total = n_samples as u64;
        let h = ones
            .iter()
            .map(|&c| entropy_of_counts(&[c, total - c], total))
            .collect();
        return Ok((h, std::f64::consts::LN_2));
    }
    let dense = |e: Encoded| match e {
        Encoded::Dense(d) => d,
        Encoded::Sparse(s) => {
            let mut d = vec![0.0; dims];
            s.into_iter().for_each(|(i, v)| d[i] = v);
            d
        }
    };
    let mut lo = vec![f64::INFINITY; dims];
    let mut hi = vec![f64::NEG_INFINITY; dims];
    for x in draw(seed) {
        for (j, v) in dense(probe.encode(x)?).into_iter().enumerate() {
            lo[j] = lo[j].min(v);
            hi[j] = hi[j].max(v);
        }
    }
    let mut counts = vec![0u64; dims * bins];
    for x in draw(seed) {
        for (j, v) in dense(probe.encode(x)?).into_iter().enumerate() {
            let width = hi[j] - lo[j];
            let b = if width > 0.0 {
                (((v - lo[j]) / width * bins as f64) as usize).min(bins - 1)
            } else {
                0
            };
            counts[j * bins + b] += 1;
        }
    }
    let h = counts
        .chunks_exact(bins)
        .map(|c| entropy_of_counts(c, n_samples as u64))
        .collect();
    Ok((h, (bins as f64).ln()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistanceStats {
    pub pairs: usize,
    pub mean: f64,
    pub variance: f64,
    /// Pairs with `|x − y| < n/4`.
    pub near_mean: f64,
    pub near_se: f64,
    pub near_count: usize,
    pub far_mean: f64,
    pub far_se: f64,
    pub far_count: usize,
}

fn mean_se(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, f64::NAN);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Squared Euclidean distance between encodings of uniformly drawn distinct
/// id pairs, overall and split by whether the ids are numerically close.
pub fn pairwise_distance_stats(
    probe: &Probe,
    n: u64,
    n_pairs: usize,
    seed: u64,
) -> Result<DistanceStats> {
    if n_pairs < 100 || n < 2 {
        return Err(Error::config(
            "distance statistics need at least 100 pairs and 2 ids",
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut near, mut far) = (Vec::new(), Vec::new());
    for _ in 0..n_pairs {
        let x = rng.random_range(0..n);
        let y = loop {
            let y = rng.random_range(0..n);
            if y != x {
                break y;
            }
        };
        let d = squared_distance(&probe.encode(x)?, &probe.encode(y)?);
        if x.abs_diff(y) < n / 4 {
            near.push(d);
        } else {
            far.push(d);
        }
    }
    let all: Vec<f64> = near.iter().chain(&far).copied().collect();
    let mean = all.iter().sum::<f64>() / all.len() as f64;
    let variance = all.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (all.len() as f64 - 1.0);
    let (near_mean, near_se) = mean_se(&near);
    let (far_mean, far_se) = mean_se(&far);
    Ok(DistanceStats {
        pairs: n_pairs,
        mean,
        variance,
        near_mean,
        near_se,
        near_count: near.len(),
        far_mean,
        far_se,
        far_count: far.len(),
    })
}

impl DistanceStats {
    /// Near and far means agree within three combined standard errors and
    /// the common distance is non-zero.
    pub fn equally_similar(&self) -> bool {
        if !(self.mean > 0.0) || self.near_count < 2 || self.far_count < 2 {
            return false;
        }
        let diff = (self.near_mean - self.far_mean).abs();
        let se = (self.near_se.powi(2) + self.far_se.powi(2)).sqrt();
        diff <= 3.0 * se + 1e-12 * self.mean
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Verdicts {
    pub u: bool,
    pub es: bool,
    pub hd: bool,
    pub he: bool,
}

impl Verdicts {
    pub fn marks(&self) -> [&'static str; 4] {
        let m = |b: bool| if b { "✓" } else { "✗" };
        [m(self.u), m(self.es), m(self.hd), m(self.he)]
    }
}

/// Closed-form expected squared distances for comparison with the Monte
/// Carlo mean.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistancePredictions {
    /// Prediction in encoding units, when one exists.
    pub predicted: Option<f64>,
    /// The printed one-hot hashing expression `k(m−1)/m`, which counts
    /// differing slots rather than squared distance.
    pub printed_hash_formula: Option<f64>,
    /// The printed DHE expression `m(2m+1)(m+1)/3 − (m+1)²/2`, in bucket
    /// units per dimension.
    pub printed_dhe_formula: Option<f64>,
    /// `(m+1)(2m+1)/3 − (m+1)²/2`, the per-dimension expectation for a
    /// uniform integer on `1..=m`, in bucket units.
    pub uniform_integer_formula: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropertyReport {
    pub encoder: EncoderKind,
    pub length: usize,
    pub sample_size: usize,
    pub collision_rate: f64,
    pub collision_se: f64,
    pub pair_collision_rate: f64,
    pub predicted_collision: f64,
    pub per_dim_entropy: Vec<f64>,
    pub mean_entropy: f64,
    pub max_entropy: f64,
    pub distance: DistanceStats,
    pub distance_predictions: DistancePredictions,
    pub dimensionality: usize,
    pub verdicts: Verdicts,
}

fn predictions(kind: EncoderKind, cfg: &AnalysisConfig) -> (f64, DistancePredictions) {
    let n = cfg.n.min(cfg.samples as u64) as f64;
    let m = cfg.m as f64;
    let none = DistancePredictions {
        predicted: None,
        printed_hash_formula: None,
        printed_dhe_formula: None,
        uniform_integer_formula: None,
    };
    match kind {
        EncoderKind::OneHot => (
            0.0,
            DistancePredictions {
                predicted: Some(2.0),
                ..none
            },
        ),
        EncoderKind::OneHotHash | EncoderKind::DoubleOneHotHash => {
            let k = if kind == EncoderKind::OneHotHash {
                1.0
            } else {
                2.0
            };
            (
                closed_form_collision(n, m.powf(k)),
                DistancePredictions {
                    predicted: Some(2.0 * k * (m - 1.0) / m),
                    printed_hash_formula: Some(k * (m - 1.0) / m),
                    ..none
                },
            )
        }
        EncoderKind::DenseHash => {
            let k = cfg.k as f64;
            let predicted = match cfg.distribution {
                Distribution::Uniform => Some(k * 2.0 * (m + 1.0) / (3.0 * (m - 1.0))),
                Distribution::Gaussian => Some(2.0 * k),
            };
            (
                closed_form_collision(n, m.powf(k)),
                DistancePredictions {
                    predicted,
                    printed_dhe_formula: Some(
                        m * (2.0 * m + 1.0) * (m + 1.0) / 3.0 - (m + 1.0).powi(2) / 2.0,
                    ),
                    uniform_integer_formula: Some(
                        (m + 1.0) * (2.0 * m + 1.0) / 3.0 - (m + 1.0).powi(2) / 2.0,
                    ),
                    ..none
                },
            )
        }
        _ => (0.0, none),
    }
}

/// Runs the three estimators on one encoder and applies the thresholds.
pub fn property_report(kind: EncoderKind, cfg: &AnalysisConfig) -> Result<PropertyReport> {
    let probe = Probe::build(kind, cfg, cfg.seed)?;
    let collision = estimate_collision_rate(kind, cfg, cfg.samples, cfg.trials, cfg.seed)?;
    let (entropy, max_entropy) =
        entropy_per_dimension(&probe, cfg.n, cfg.samples, cfg.bins, cfg.seed ^ 0xe47)?;
    let mean_entropy = entropy.iter().sum::<f64>() / entropy.len() as f64;
    let distance = pairwise_distance_stats(&probe, cfg.n, cfg.pairs, cfg.seed ^ 0xd15)?;
    let (predicted_collision, distance_predictions) = predictions(kind, cfg);
    let verdicts = Verdicts {
        u: collision.any_rate < UNIQUENESS_EPS,
        es: distance.equally_similar(),
        hd: probe.len() >= cfg.hd_threshold,
        he: mean_entropy >= ENTROPY_FRACTION * max_entropy,
    };
    Ok(PropertyReport {
        encoder: kind,
        length: probe.len(),
        sample_size: cfg.samples,
        collision_rate: collision.any_rate,
        collision_se: collision.any_se,
        pair_collision_rate: collision.pair_rate,
        predicted_collision,
        per_dim_entropy: entropy,
        mean_entropy,
        max_entropy,
        distance,
        distance_predictions,
        dimensionality: probe.len(),
        verdicts,
    })
}

/// Reports for every kind in `kinds`, in order.
pub fn analyze(kinds: &[EncoderKind], cfg: &AnalysisConfig) -> Result<Vec<PropertyReport>> {
    kinds.iter().map(|&k| property_report(k, cfg)).collect()
}

/// Human-readable summary, one row per report.
pub fn format_table(reports: &[PropertyReport]) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<22} {:>7}  {:^3} {:^3} {:^3} {:^3}  {:>9} {:>9} {:>10} {:>8}",
        "encoder", "length", "U", "E-S", "H-D", "H-E", "collide", "predict", "dist", "entropy"
    );
    for r in reports {
        let [u, es, hd, he] = r.verdicts.marks();
        let _ = writeln!(
            out,
            "{:<22} {:>7}  {:^3} {:^3} {:^3} {:^3}  {:>9.4} {:>9.4} {:>10.4} {:>8.4}",
            r.encoder.as_str(),
            r.length,
            u,
            es,
            hd,
            he,
            r.collision_rate,
            r.predicted_collision,
            r.distance.mean,
            r.mean_entropy / r.max_entropy
        );
    }
    out
}
