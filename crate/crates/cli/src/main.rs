use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use dhe::analysis::{self, AnalysisConfig, EncoderKind};
use dhe::data::{
    load_genres, load_interactions, split_leave_last_two, DataFormat, InteractionDataset,
};
use dhe::harness::{self, BenchmarkSpec, Model, SchemeSpec, TrainConfig};
use dhe::recmodels::BackboneKind;
use dhe::schemes::{Scheme, SchemeKind};

#[derive(Parser)]
#[command(name = "dhe", version, about = "Deep Hash Embedding experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Encoding property reports for the encoder comparison table.
    Analyze(AnalyzeArgs),
    /// Train one model and write its result and checkpoint.
    Train(TrainArgs),
    /// Evaluate a saved checkpoint on the test or validation split.
    Eval(EvalArgs),
    /// Train a grid of schemes and budgets, several seeds each.
    Benchmark(BenchmarkArgs),
    /// Time embedding generation for each scheme.
    Timing(TimingArgs),
    /// Verify or regenerate the golden files.
    Goldens(GoldensArgs),
}

#[derive(Args)]
struct DataArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, default_value = "tsv_triples")]
    format: DataFormat,
    /// Item genre file (`u.item` or `movies.csv`) for side features.
    #[arg(long)]
    genres: Option<PathBuf>,
}

impl DataArgs {
    fn load(&self) -> Result<InteractionDataset> {
        let mut ds = load_interactions(&self.dataset, self.format)
            .with_context(|| format!("loading {}", self.dataset.display()))?;
        if let Some(g) = &self.genres {
            ds.item_features = Some(load_genres(g, &ds)?);
        }
        log::info!(
            "{} users, {} items, {} interactions",
            ds.n_users(),
            ds.n_items(),
            ds.len()
        );
        Ok(ds)
    }
}

#[derive(Args)]
struct AnalyzeArgs {
    /// JSON analysis settings; flags override individual fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    n: Option<u64>,
    #[arg(long)]
    m: Option<u64>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    samples: Option<usize>,
    /// Encoders to analyze; the six table rows by default.
    #[arg(long = "encoder")]
    encoders: Vec<EncoderKind>,
    /// Directory for `report.json`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ModelArgs {
    /// JSON training config; flags override individual fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Scheme for both sides.
    #[arg(long)]
    scheme: Option<SchemeKind>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    budget_fraction: Option<f64>,
    #[arg(long)]
    backbone: Option<BackboneKind>,
}

impl ModelArgs {
    fn config(&self) -> Result<TrainConfig> {
        let mut cfg = match &self.config {
            Some(p) => TrainConfig::from_json_file(p)
                .with_context(|| format!("reading {}", p.display()))?,
            None => TrainConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(kind) = self.scheme {
            cfg.user.kind = kind;
            cfg.item.kind = kind;
        }
        if let Some(k) = self.k {
            cfg.user.num_hashes = Some(k);
            cfg.item.num_hashes = Some(k);
        }
        if let Some(f) = self.budget_fraction {
            cfg.budget_fraction = f;
        }
        if let Some(b) = self.backbone {
            cfg.backbone = b;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    model: ModelArgs,
    /// Directory for `run.json`, `model.ckpt` and the id maps.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Training config, for the evaluation seed and negative count.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Evaluate on the validation rows instead of the test rows.
    #[arg(long)]
    valid: bool,
}

#[derive(Args)]
struct BenchmarkArgs {
    #[command(flatten)]
    data: DataArgs,
    /// JSON benchmark spec; flags override individual fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Schemes to compare (repeatable).
    #[arg(long)]
    scheme: Vec<SchemeKind>,
    /// Budget fractions (repeatable).
    #[arg(long)]
    budget_fraction: Vec<f64>,
    /// Hash counts to sweep (repeatable).
    #[arg(long)]
    k: Vec<usize>,
    #[arg(long)]
    repeats: Option<usize>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Args)]
struct TimingArgs {
    /// Schemes to time (repeatable); all by default.
    #[arg(long)]
    scheme: Vec<SchemeKind>,
    #[arg(long, default_value_t = 1_000_000)]
    vocab: u64,
    #[arg(long, default_value_t = 1_000_000)]
    queries: usize,
    #[arg(long, default_value_t = 100)]
    batch_size: usize,
    #[arg(long, default_value_t = 1024)]
    k: usize,
    #[arg(long, default_value_t = 32)]
    dim: usize,
    /// Parameter budget as a fraction of the full table.
    #[arg(long, default_value_t = 0.25)]
    budget_fraction: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GoldensArgs {
    #[arg(long, default_value = "crates/core/tests/goldens")]
    dir: PathBuf,
    /// Rewrite the files instead of checking them.
    #[arg(long)]
    regenerate: bool,
}

fn write_json(dir: &Path, name: &str, value: &impl serde::Serialize) -> Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    let path = dir.join(name);
    std::fs::write(&path, serde_json::to_vec_pretty(value)?)?;
    Ok(path)
}

fn analyze(a: AnalyzeArgs) -> Result<()> {
    let mut cfg: AnalysisConfig = match &a.config {
        Some(p) => serde_json::from_slice(&std::fs::read(p)?)?,
        None => AnalysisConfig::default(),
    };
    cfg.seed = a.seed.unwrap_or(cfg.seed);
    cfg.n = a.n.unwrap_or(cfg.n);
    cfg.m = a.m.unwrap_or(cfg.m);
    cfg.k = a.k.unwrap_or(cfg.k);
    cfg.samples = a.samples.unwrap_or(cfg.samples);
    let kinds = if a.encoders.is_empty() {
        EncoderKind::TABLE.to_vec()
    } else {
        a.encoders
    };
    let reports = analysis::analyze(&kinds, &cfg)?;
    print!("{}", analysis::format_table(&reports));
    if let Some(dir) = a.out {
        let p = write_json(&dir, "report.json", &reports)?;
        println!("wrote {}", p.display());
    }
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    let ds = a.data.load()?;
    let cfg = a.model.config()?;
    let out = harness::train(&ds, &cfg)?;
    let r = &out.result;
    println!(
        "{} / {}: test AUC {:.4} (best valid {:.4} at epoch {}), params user {} item {} backbone {}",
        cfg.user.kind, cfg.item.kind, r.test_auc, r.best_valid_auc, r.best_epoch, r.params.user, r.params.item, r.params.backbone
    );
    write_json(&a.out, "run.json", r)?;
    write_json(&a.out, "config.json", &cfg)?;
    out.model.save(a.out.join("model.ckpt"))?;
    ds.save_index_maps(&a.out)?;
    println!("wrote {}", a.out.display());
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let ds = a.data.load()?;
    let cfg = match &a.config {
        Some(p) => TrainConfig::from_json_file(p)?,
        None => TrainConfig::default(),
    };
    let model = Model::load(&a.checkpoint)
        .with_context(|| format!("loading {}", a.checkpoint.display()))?;
    if model.user.config().vocab_size != ds.n_users() as u64
        || model.item.config().vocab_size != ds.n_items() as u64
    {
        bail!("checkpoint vocabulary does not match the dataset");
    }
    let split = split_leave_last_two(&ds);
    // Same seeds as training uses for its evaluation sets.
    let (rows, seed) = if a.valid {
        (&split.valid, cfg.eval_seed)
    } else {
        (&split.test, cfg.eval_seed ^ 0x7e57)
    };
    let set = harness::build_eval_set(&ds, rows, cfg.eval_negatives, seed);
    let auc = harness::evaluate(&model, &set, ds.n_users(), ds.n_items())?;
    println!(
        "{} AUC {auc:.6} over {} users",
        if a.valid { "valid" } else { "test" },
        set.users.len()
    );
    Ok(())
}

fn benchmark(a: BenchmarkArgs) -> Result<()> {
    let ds = a.data.load()?;
    let mut spec: BenchmarkSpec = match &a.config {
        Some(p) => serde_json::from_slice(&std::fs::read(p)?)
            .with_context(|| format!("reading {}", p.display()))?,
        None => BenchmarkSpec::default(),
    };
    if let Some(s) = a.seed {
        spec.base.seed = s;
    }
    if !a.scheme.is_empty() {
        spec.schemes = a.scheme.iter().map(|&k| SchemeSpec::new(k)).collect();
    }
    if !a.budget_fraction.is_empty() {
        spec.budgets = a.budget_fraction;
    }
    if !a.k.is_empty() {
        spec.ks = a.k;
    }
    if let Some(r) = a.repeats {
        spec.repeats = r;
    }
    let cells = harness::benchmark(&ds, &spec)?;
    for c in &cells {
        let k = c.k.map(|k| format!(" k={k}")).unwrap_or_default();
        match &c.error {
            Some(e) if c.runs.is_empty() => {
                println!("{:<14} {:>6}{k}: failed: {e}", c.scheme.as_str(), c.budget)
            }
            _ => println!(
                "{:<14} {:>6}{k}: AUC {:.4} ± {:.4} over {} runs, {} params",
                c.scheme.as_str(),
                c.budget,
                c.mean_auc,
                c.std_auc,
                c.runs.len(),
                c.params
            ),
        }
    }
    harness::write_results(&a.out, &cells)?;
    write_json(&a.out, "spec.json", &spec)?;
    println!("wrote {}", a.out.display());
    Ok(())
}

fn timing(a: TimingArgs) -> Result<()> {
    let kinds = if a.scheme.is_empty() {
        SchemeKind::ALL.to_vec()
    } else {
        a.scheme
    };
    let mut rows = Vec::new();
    for kind in kinds {
        let fraction = if kind == SchemeKind::Full {
            1.0
        } else {
            a.budget_fraction
        };
        let spec = SchemeSpec {
            num_hashes: (kind == SchemeKind::Dhe).then_some(a.k),
            ..SchemeSpec::new(kind)
        };
        let cfg = match spec.resolve(a.vocab, a.dim, fraction, 0, a.seed) {
            Ok(c) => c,
            Err(e) => {
                println!("{:<14} skipped: {e}", kind.as_str());
                continue;
            }
        };
        let scheme = Scheme::new(&cfg)?;
        let secs = harness::timing_probe(&scheme, a.queries, a.batch_size, a.seed)?;
        println!(
            "{:<14} {secs:>9.3} s for {} queries",
            kind.as_str(),
            a.queries
        );
        rows.push(serde_json::json!({ "scheme": kind, "seconds": secs, "queries": a.queries, "batch_size": a.batch_size }));
    }
    if let Some(dir) = a.out {
        write_json(&dir, "timing.json", &rows)?;
    }
    Ok(())
}

fn goldens(a: GoldensArgs) -> Result<()> {
    if a.regenerate {
        for name in dhe::goldens::write(&a.dir)? {
            println!("wrote {}", a.dir.join(name).display());
        }
        return Ok(());
    }
    let bad = dhe::goldens::verify(&a.dir)?;
    if bad.is_empty() {
        println!("all goldens in {} match", a.dir.display());
        Ok(())
    } else {
        bail!("golden mismatch: {}", bad.join(", "))
    }
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match Cli::parse().command {
        Command::Analyze(a) => analyze(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Benchmark(a) => benchmark(a),
        Command::Timing(a) => timing(a),
        Command::Goldens(a) => goldens(a),
    }
}
