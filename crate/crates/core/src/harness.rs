//! Training loop, sampled-AUC evaluation, benchmark grid and timing probe.

use std::collections::HashSet;
use std::path::Path;
use std::time::Instant;

use ndarray::{Array1, Array2, Axis};
use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::{self, NamedTensor};
use crate::data::{frequencies, split_leave_last_two, Interaction, InteractionDataset, Split};
use crate::error::{Error, Result};
use crate::neuralnet::{Adam, Mode};
use crate::recmodels::{bce_with_grad, Backbone, BackboneKind};
use crate::schemes::{size_for_budget, DheOptions, Scheme, SchemeConfig, SchemeKind};

/// Template for one side's embedding scheme. Table sizes and the DHE width
/// are filled in from the budget.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SchemeSpec {
    pub kind: SchemeKind,
    /// Hash functions `k`; the kind's default when absent.
    pub num_hashes: Option<usize>,
    /// DHE hash range `m`; the kind's default when absent.
    pub buckets: Option<u64>,
    pub dhe: DheOptions,
    pub hybrid_fraction: f64,
    pub init_std: f64,
    /// Append the dataset's item side features to the DHE encoding.
    pub side_features: bool,
}

impl Default for SchemeSpec {
    fn default() -> Self {
        SchemeSpec {
            kind: SchemeKind::Full,
            num_hashes: None,
            buckets: None,
            dhe: DheOptions::default(),
            hybrid_fraction: 0.1,
            init_std: 0.01,
            side_features: false,
        }
    }
}

impl SchemeSpec {
    pub fn new(kind: SchemeKind) -> Self {
        SchemeSpec {
            kind,
            ..SchemeSpec::default()
        }
    }

    /// Concrete config for a vocabulary of `n`, sized to
    /// `⌊fraction · n · d⌋` parameters.
    pub fn resolve(
        &self,
        n: u64,
        dim: usize,
        fraction: f64,
        side_dim: usize,
        seed: u64,
    ) -> Result<SchemeConfig> {
        let mut base = SchemeConfig::new(self.kind, n, dim).with_seed(seed);
        if let Some(k) = self.num_hashes {
            base.num_hashes = k;
        }
        if let (Some(m), SchemeKind::Dhe) = (self.buckets, self.kind) {
            base.buckets = m;
        }
        base.dhe = self.dhe;
        if self.kind == SchemeKind::Dhe && self.side_features {
            base.dhe.side_dim = side_dim;
        }
        base.hybrid_fraction = self.hybrid_fraction;
        base.init_std = self.init_std;
        size_for_budget(&base, budget_for(n, dim, fraction))
    }
}

/// `⌊fraction · n · d⌋`, the per-side parameter budget.
pub fn budget_for(n: u64, dim: usize, fraction: f64) -> u64 {
    (fraction * (n * dim as u64) as f64).floor() as u64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub backbone: BackboneKind,
    pub dim: usize,
    pub user: SchemeSpec,
    pub item: SchemeSpec,
    /// Fraction of the full-embedding parameter count given to each side.
    pub budget_fraction: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Stop after this many epochs without a better validation AUC.
    pub patience: usize,
    pub negatives: usize,
    pub eval_negatives: usize,
    pub seed: u64,
    /// Seed for the fixed evaluation negatives, shared across training seeds.
    pub eval_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            backbone: BackboneKind::Gmf,
            dim: 32,
            user: SchemeSpec::default(),
            item: SchemeSpec::default(),
            budget_fraction: 1.0,
            learning_rate: 1e-3,
            batch_size: 256,
            max_epochs: 100,
            patience: 10,
            negatives: 4,
            eval_negatives: 100,
            seed: 0,
            eval_seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn with_scheme(mut self, spec: SchemeSpec) -> Self {
        self.user = spec.clone();
        self.item = spec;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("dim", self.dim),
            ("batch_size", self.batch_size),
            ("max_epochs", self.max_epochs),
            ("patience", self.patience),
            ("negatives", self.negatives),
            ("eval_negatives", self.eval_negatives),
        ];
        if let Some((name, _)) = positive.iter().find(|p| p.1 == 0) {
            return Err(Error::config(format!("{name} must be positive")));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("learning rate must be positive"));
        }
        if !(self.budget_fraction > 0.0 && self.budget_fraction <= 1.0) {
            return Err(Error::config("budget fraction must lie in (0, 1]"));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form.
    pub fn digest(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&bytes))
    }

    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self> {
        let cfg: TrainConfig = serde_json::from_slice(&std::fs::read(path)?)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Per-side seeds derived from the run seed.
fn sub_seed(seed: u64, stream: u64) -> u64 {
    let mut sm = crate::hashing::SplitMix64::new(seed ^ stream.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    sm.next_u64()
}

/// User scheme, item scheme and backbone.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub user: Scheme,
    pub item: Scheme,
    pub backbone: Backbone,
}

impl Model {
    /// Builds the untrained model for `cfg` on `ds`, with hybrid frequency
    /// ranks taken from `train_rows`.
    pub fn new(
        ds: &InteractionDataset,
        train_rows: &[Interaction],
        cfg: &TrainConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        let side_dim = ds.item_features.as_ref().map_or(0, |f| f.ncols());
        let ucfg = cfg.user.resolve(
            ds.n_users() as u64,
            cfg.dim,
            cfg.budget_fraction,
            0,
            sub_seed(cfg.seed, 1),
        )?;
        let icfg = cfg.item.resolve(
            ds.n_items() as u64,
            cfg.dim,
            cfg.budget_fraction,
            side_dim,
            sub_seed(cfg.seed, 2),
        )?;
        let (ufreq, ifreq) = frequencies(train_rows, ds.n_users(), ds.n_items());
        let user = Scheme::with_frequencies(&ucfg, Some(&ufreq))?;
        let mut item = Scheme::with_frequencies(&icfg, Some(&ifreq))?;
        if icfg.kind == SchemeKind::Dhe && icfg.dhe.side_dim > 0 {
            let side = ds
                .item_features
                .clone()
                .ok_or_else(|| Error::config("side features requested but the dataset has none"))?;
            item.set_side_features(side)?;
        }
        Ok(Model {
            user,
            item,
            backbone: Backbone::new(cfg.backbone, cfg.dim, sub_seed(cfg.seed, 3)),
        })
    }

    pub fn param_counts(&self) -> ParamCounts {
        ParamCounts {
            user: self.user.param_count(),
            item: self.item.param_count(),
            backbone: self.backbone.param_count() as u64,
        }
    }

    /// Logits for aligned `(user, item)` id pairs.
    pub fn score(&self, users: &[u64], items: &[u64]) -> Result<Array1<f64>> {
        let u = self.user.embed_batch(users)?;
        let i = self.item.embed_batch(items)?;
        self.backbone.score_batch(u.view(), i.view())
    }

    /// Single-file checkpoint: both scheme configs plus all tensors.
    pub fn to_checkpoint_bytes(&self) -> Result<Vec<u8>> {
        let config = serde_json::json!({
            "backbone": self.backbone.kind(),
            "dim": self.backbone.dim(),
            "user": self.user.config(),
            "item": self.item.config(),
        });
        let prefixed = |p: &str, ts: Vec<NamedTensor>| {
            ts.into_iter()
                .map(move |mut t| {
                    t.name = format!("{p}{}", t.name);
                    t
                })
                .collect::<Vec<_>>()
        };
        let mut tensors = prefixed("user.", self.user.tensors());
        tensors.extend(prefixed("item.", self.item.tensors()));
        tensors.extend(self.backbone.tensors());
        checkpoint::encode(&config, &tensors)
    }

    pub fn from_checkpoint_bytes(bytes: &[u8]) -> Result<Self> {
        let (config, tensors) = checkpoint::decode(bytes)?;
        let field = |k: &str| {
            config
                .get(k)
                .cloned()
                .ok_or_else(|| Error::Format(format!("checkpoint config lacks {k}")))
        };
        let ucfg: SchemeConfig = serde_json::from_value(field("user")?)?;
        let icfg: SchemeConfig = serde_json::from_value(field("item")?)?;
        let kind: BackboneKind = serde_json::from_value(field("backbone")?)?;
        let dim: usize = serde_json::from_value(field("dim")?)?;
        let strip = |p: &str| {
            tensors
                .iter()
                .filter_map(|t| {
                    t.name.strip_prefix(p).map(|n| NamedTensor {
                        name: n.to_string(),
                        ..t.clone()
                    })
                })
                .collect::<Vec<_>>()
        };
        let mut backbone = Backbone::new(kind, dim, 0);
        backbone.load_tensors(&tensors)?;
        Ok(Model {
            user: Scheme::from_tensors(&ucfg, &strip("user."))?,
            item: Scheme::from_tensors(&icfg, &strip("item."))?,
            backbone,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_checkpoint_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint_bytes(&std::fs::read(path)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCounts {
    pub user: u64,
    pub item: u64,
    pub backbone: u64,
}

/// Held-out positives with their fixed sampled negatives.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalSet {
    pub users: Vec<u32>,
    pub positives: Vec<u32>,
    pub negatives: Vec<Vec<u32>>,
}

/// Each user's full item history, for negative exclusion.
fn histories(ds: &InteractionDataset) -> Vec<HashSet<u32>> {
    let mut h = vec![HashSet::new(); ds.n_users()];
    for x in &ds.interactions {
        h[x.user as usize].insert(x.item);
    }
    h
}

/// Up to `k` items per row drawn uniformly without replacement from those
/// the user never interacted with.
pub fn build_eval_set(
    ds: &InteractionDataset,
    rows: &[Interaction],
    k: usize,
    seed: u64,
) -> EvalSet {
    let seen = histories(ds);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = ds.n_items() as u32;
    let mut set = EvalSet {
        users: Vec::with_capacity(rows.len()),
        positives: Vec::with_capacity(rows.len()),
        negatives: Vec::with_capacity(rows.len()),
    };
    for x in rows {
        let h = &seen[x.user as usize];
        let unseen = n as usize - h.len();
        let negs = if unseen <= k {
            (0..n).filter(|i| !h.contains(i)).collect()
        } else {
            let mut picked = HashSet::with_capacity(k);
            let mut out = Vec::with_capacity(k);
            while out.len() < k {
                let j = rng.random_range(0..n);
                if !h.contains(&j) && picked.insert(j) {
                    out.push(j);
                }
            }
            out
        };
        set.users.push(x.user);
        set.positives.push(x.item);
        set.negatives.push(negs);
    }
    set
}

/// Mean over users of the per-user sampled AUC.
pub fn evaluate(model: &Model, set: &EvalSet, n_users: usize, n_items: usize) -> Result<f64> {
    if set.users.is_empty() {
        return Err(Error::contract("evaluation set is empty"));
    }
    let all_users: Vec<u64> = (0..n_users as u64).collect();
    let all_items: Vec<u64> = (0..n_items as u64).collect();
    let ue = model.user.embed_batch(&all_users)?;
    let ie = model.item.embed_batch(&all_items)?;
    let mut total = 0.0;
    let mut counted = 0usize;
    for ((&u, &pos), negs) in set.users.iter().zip(&set.positives).zip(&set.negatives) {
        if negs.is_empty() {
            continue;
        }
        let items: Vec<usize> = std::iter::once(pos as usize)
            .chain(negs.iter().map(|&j| j as usize))
            .collect();
        let iv = ie.select(Axis(0), &items);
        let uv = ue
            .row(u as usize)
            .broadcast((items.len(), ue.ncols()))
            .expect("row broadcast")
            .to_owned();
        let s = model.backbone.score_batch(uv.view(), iv.view())?;
        total += crate::recmodels::auc(
            &s.as_slice().expect("contiguous")[..1],
            &s.as_slice().expect("contiguous")[1..],
        )?;
        counted += 1;
    }
    if counted == 0 {
        return Err(Error::contract("no evaluation row has negatives"));
    }
    Ok(total / counted as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub config_digest: String,
    pub config: TrainConfig,
    pub seed: u64,
    pub user_scheme: SchemeConfig,
    pub item_scheme: SchemeConfig,
    pub params: ParamCounts,
    pub train_loss: Vec<f64>,
    pub valid_auc: Vec<f64>,
    pub best_epoch: usize,
    pub best_valid_auc: f64,
    /// Test AUC of the model from `best_epoch`.
    pub test_auc: f64,
    /// Wall-clock seconds per epoch; machine dependent.
    pub epoch_seconds: Vec<f64>,
}

impl RunResult {
    /// Same result without wall-clock data, for byte-stable reports.
    pub fn without_timing(&self) -> Self {
        RunResult {
            epoch_seconds: Vec::new(),
            ..self.clone()
        }
    }
}

pub struct TrainOutput {
    pub result: RunResult,
    /// Parameters from the best validation epoch.
    pub model: Model,
}

/// Uniform items outside the user's training positives.
fn sample_negative(rng: &mut ChaCha8Rng, positives: &HashSet<u32>, n_items: u32) -> u32 {
    loop {
        let j = rng.random_range(0..n_items);
        if !positives.contains(&j) {
            return j;
        }
    }
}

/// Leave-last-two split, then [`train_on_split`].
pub fn train(ds: &InteractionDataset, cfg: &TrainConfig) -> Result<TrainOutput> {
    let split = split_leave_last_two(ds);
    train_on_split(ds, &split, cfg)
}

/// Minibatch BCE with `cfg.negatives` fresh negatives per positive each
/// epoch, early stopping on validation AUC.
pub fn train_on_split(
    ds: &InteractionDataset,
    split: &Split,
    cfg: &TrainConfig,
) -> Result<TrainOutput> {
    cfg.validate()?;
    let mut model = Model::new(ds, &split.train, cfg)?;
    let valid = build_eval_set(ds, &split.valid, cfg.eval_negatives, cfg.eval_seed);
    let test = build_eval_set(ds, &split.test, cfg.eval_negatives, cfg.eval_seed ^ 0x7e57);
    if valid.users.is_empty() {
        return Err(Error::config(
            "no user has enough interactions for a validation row",
        ));
    }
    let n_items = ds.n_items() as u32;
    let mut train_pos = vec![HashSet::new(); ds.n_users()];
    for x in &split.train {
        train_pos[x.user as usize].insert(x.item);
    }
    if train_pos.iter().any(|p| p.len() == n_items as usize) {
        return Err(Error::config(
            "a user has interacted with every item; no negatives exist",
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(cfg.seed, 4));
    let mut opt_user = Adam::new(cfg.learning_rate);
    let mut opt_item = Adam::new(cfg.learning_rate);
    let mut opt_backbone = Adam::new(cfg.learning_rate);

    let mut result = RunResult {
        config_digest: cfg.digest(),
        config: cfg.clone(),
        seed: cfg.seed,
        user_scheme: model.user.config().clone(),
        item_scheme: model.item.config().clone(),
        params: model.param_counts(),
        train_loss: Vec::new(),
        valid_auc: Vec::new(),
        best_epoch: 0,
        best_valid_auc: f64::NEG_INFINITY,
        test_auc: f64::NAN,
        epoch_seconds: Vec::new(),
    };
    let mut best = model.clone();
    let mut stale = 0;
    let per_pos = 1 + cfg.negatives;
    let mut rows: Vec<(u64, u64, f64)> = Vec::with_capacity(split.train.len() * per_pos);
    for epoch in 0..cfg.max_epochs {
        let start = Instant::now();
        rows.clear();
        for x in &split.train {
            rows.push((x.user as u64, x.item as u64, 1.0));
            for _ in 0..cfg.negatives {
                let j = sample_negative(&mut rng, &train_pos[x.user as usize], n_items);
                rows.push((x.user as u64, j as u64, 0.0));
            }
        }
        rows.shuffle(&mut rng);
        let (mut loss_sum, mut loss_n) = (0.0, 0usize);
        for (step, batch) in rows.chunks(cfg.batch_size).enumerate() {
            let users: Vec<u64> = batch.iter().map(|r| r.0).collect();
            let items: Vec<u64> = batch.iter().map(|r| r.1).collect();
            let labels: Vec<f64> = batch.iter().map(|r| r.2).collect();
            let (ue, ut) = model.user.forward(&users, Mode::Train)?;
            let (ie, it) = model.item.forward(&items, Mode::Train)?;
            let (logits, bt) = model.backbone.forward(ue.view(), ie.view())?;
            let (loss, dlogits) = bce_with_grad(&logits, &labels);
            if !loss.is_finite() {
                return Err(Error::Divergence { epoch, step, loss });
            }
            loss_sum += loss * batch.len() as f64;
            loss_n += batch.len();
            let g = model.backbone.backward(&bt, &dlogits)?;
            let gu = model.user.backward(&ut, g.users.view())?;
            let gi = model.item.backward(&it, g.items.view())?;
            opt_backbone.step(model.backbone.params_mut(), &g.params)?;
            model.user.apply_gradients(&mut opt_user, &gu)?;
            model.item.apply_gradients(&mut opt_item, &gi)?;
        }
        let auc = evaluate(&model, &valid, ds.n_users(), ds.n_items())?;
        result.train_loss.push(loss_sum / loss_n as f64);
        result.valid_auc.push(auc);
        log::debug!(
            "epoch {epoch}: loss {:.5} valid AUC {auc:.5}",
            loss_sum / loss_n as f64
        );
        if auc > result.best_valid_auc {
            result.best_valid_auc = auc;
            result.best_epoch = epoch;
            best = model.clone();
            stale = 0;
        } else {
            stale += 1;
        }
        result.epoch_seconds.push(start.elapsed().as_secs_f64());
        if stale >= cfg.patience {
            break;
        }
    }
    result.test_auc = if test.users.is_empty() {
        f64::NAN
    } else {
        evaluate(&best, &test, ds.n_users(), ds.n_items())?
    };
    Ok(TrainOutput {
        result,
        model: best,
    })
}

/// Grid of cells, each trained `repeats` times with seeds `seed + r`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchmarkSpec {
    pub base: TrainConfig,
    pub schemes: Vec<SchemeSpec>,
    pub budgets: Vec<f64>,
    /// Hash-count sweep; empty keeps each scheme's own `k`.
    pub ks: Vec<usize>,
    pub repeats: usize,
}

impl Default for BenchmarkSpec {
    fn default() -> Self {
        BenchmarkSpec {
            base: TrainConfig::default(),
            schemes: vec![SchemeSpec::new(SchemeKind::Full)],
            budgets: vec![1.0],
            ks: Vec::new(),
            repeats: 5,
        }
    }
}

impl BenchmarkSpec {
    /// `(scheme, budget, k)` for each cell, in output order.
    pub fn cells(&self) -> Vec<(SchemeSpec, f64, Option<usize>)> {
        let ks: Vec<Option<usize>> = if self.ks.is_empty() {
            vec![None]
        } else {
            self.ks.iter().map(|&k| Some(k)).collect()
        };
        let mut cells = Vec::new();
        for s in &self.schemes {
            for &b in &self.budgets {
                for &k in &ks {
                    cells.push((s.clone(), b, k));
                }
            }
        }
        cells
    }

    /// `(cell, repeat, config)` for every training run.
    pub fn runs(&self) -> Vec<(usize, u64, TrainConfig)> {
        self.cells()
            .into_iter()
            .enumerate()
            .flat_map(|(c, (mut s, b, k))| {
                if k.is_some() {
                    s.num_hashes = k;
                }
                (0..self.repeats as u64).map(move |r| {
                    let cfg = TrainConfig {
                        budget_fraction: b,
                        seed: self.base.seed + r,
                        ..self.base.clone()
                    }
                    .with_scheme(s.clone());
                    (c, r, cfg)
                })
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub scheme: SchemeKind,
    pub budget: f64,
    pub k: Option<usize>,
    pub mean_auc: f64,
    pub std_auc: f64,
    pub test_aucs: Vec<f64>,
    /// Embedding parameters over both sides.
    pub params: u64,
    pub budget_params: u64,
    pub error: Option<String>,
    pub runs: Vec<RunResult>,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 {
        v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

/// Threads for parallel cells: `DHE_NUM_THREADS`, else rayon's default.
pub fn thread_count() -> usize {
    std::env::var("DHE_NUM_THREADS")
        .ok()
        .and_then(|v| v.parse().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(rayon::current_num_threads)
}

/// Trains every `(scheme, budget, k)` cell. Runs are independent, so the
/// result does not depend on the thread count. A failed run marks its cell
/// and the grid continues.
pub fn benchmark(ds: &InteractionDataset, spec: &BenchmarkSpec) -> Result<Vec<CellResult>> {
    spec.base.validate()?;
    if spec.repeats == 0 {
        return Err(Error::config("repeats must be positive"));
    }
    let split = split_leave_last_two(ds);
    let jobs = spec.cells();
    let runs = spec.runs();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(thread_count())
        .build()
        .map_err(|e| Error::config(format!("thread pool: {e}")))?;
    let outcomes: Vec<Result<RunResult>> = pool.install(|| {
        runs.par_iter()
            .map(|(c, r, cfg)| {
                log::info!(
                    "cell {c} repeat {r}: {} at {}",
                    cfg.item.kind,
                    cfg.budget_fraction
                );
                train_on_split(ds, &split, cfg).map(|o| o.result)
            })
            .collect()
    });
    let mut cells: Vec<CellResult> = jobs
        .iter()
        .map(|(s, b, k)| CellResult {
            scheme: s.kind,
            budget: *b,
            k: *k,
            mean_auc: f64::NAN,
            std_auc: f64::NAN,
            test_aucs: Vec::new(),
            params: 0,
            budget_params: budget_for(ds.n_users() as u64, spec.base.dim, *b)
                + budget_for(ds.n_items() as u64, spec.base.dim, *b),
            error: None,
            runs: Vec::new(),
        })
        .collect();
    for ((c, _, _), out) in runs.iter().zip(outcomes) {
        let cell = &mut cells[*c];
        match out {
            Ok(r) => {
                cell.params = r.params.user + r.params.item;
                cell.test_aucs.push(r.test_auc);
                cell.runs.push(r);
            }
            Err(e) => {
                if cell.error.is_none() {
                    cell.error = Some(e.to_string());
                }
            }
        }
    }
    for cell in &mut cells {
        (cell.mean_auc, cell.std_auc) = mean_std(&cell.test_aucs);
    }
    Ok(cells)
}

/// Writes `results.csv` and `results.json` (wall-clock data removed, so
/// identical runs give identical bytes).
pub fn write_results(dir: impl AsRef<Path>, cells: &[CellResult]) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let mut w = csv::Writer::from_path(dir.join("results.csv"))?;
    w.write_record([
        "scheme",
        "budget",
        "k",
        "mean_auc",
        "std_auc",
        "params",
        "budget_params",
        "runs",
        "error",
    ])?;
    for c in cells {
        w.write_record([
            c.scheme.as_str().to_string(),
            c.budget.to_string(),
            c.k.map(|k| k.to_string()).unwrap_or_default(),
            format!("{:.6}", c.mean_auc),
            format!("{:.6}", c.std_auc),
            c.params.to_string(),
            c.budget_params.to_string(),
            c.runs.len().to_string(),
            c.error.clone().unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    let stable: Vec<CellResult> = cells
        .iter()
        .map(|c| CellResult {
            runs: c.runs.iter().map(RunResult::without_timing).collect(),
            ..c.clone()
        })
        .collect();
    std::fs::write(
        dir.join("results.json"),
        serde_json::to_vec_pretty(&stable)?,
    )?;
    Ok(())
}

/// Seconds to embed `n_queries` random in-vocab ids in batches of
/// `batch_size`, inference only.
pub fn timing_probe(
    scheme: &Scheme,
    n_queries: usize,
    batch_size: usize,
    seed: u64,
) -> Result<f64> {
    if n_queries == 0 {
        return Ok(0.0);
    }
    if batch_size == 0 {
        return Err(Error::config("batch size must be positive"));
    }
    let n = scheme.config().vocab_size;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<u64> = (0..n_queries).map(|_| rng.random_range(0..n)).collect();
    let start = Instant::now();
    let mut sink = 0.0;
    for chunk in ids.chunks(batch_size) {
        let e = scheme.embed_batch(chunk)?;
        sink += e[[0, 0]];
    }
    let secs = start.elapsed().as_secs_f64();
    std::hint::black_box(sink);
    Ok(secs)
}

/// Scores every user against `k` fixed random items: used to check that an
/// untrained model ranks at chance.
pub fn random_pair_scores(
    model: &Model,
    n_users: usize,
    n_items: usize,
    k: usize,
    seed: u64,
) -> Result<Array2<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let items: Vec<u64> = index::sample(&mut rng, n_items, k.min(n_items))
        .into_iter()
        .map(|i| i as u64)
        .collect();
    let mut out = Array2::zeros((n_users, items.len()));
    for u in 0..n_users {
        let users = vec![u as u64; items.len()];
        out.row_mut(u).assign(&model.score(&users, &items)?);
    }
    Ok(out)
}
