//! Command-line interface.
//!
//! Every command writes its outputs to files and a [`RunManifest`] next to
//! them. Exit codes: 0 success, 2 usage or validation error, 3 numerical
//! failure during training.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::checkpoint::Checkpoint;
use crate::dataset::{
    generate_synthetic, ingest_tsv, read_split, split_users, CrossDomainDataset, SparseRow, SplitLabel,
    SyntheticSpec,
};
use crate::error::{Error, Result};
use crate::experiments::{
    self, BiasDecaySpec, ConvergenceSpec, SampleErrSpec,
};
use crate::losses::LossKind;
use crate::manifest::{manifest_path, RunManifest};
use crate::metrics::{evaluate, ranking, EvalOptions, Relevance};
use crate::model::{write_embeddings_tsv, EmbeddingSidecar, Model, SimilarityKind};
use crate::optim::OptimizerKind;
use crate::trainer::{self, TrainConfig, TrainOptions, ValidationPoint};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

/// Exit code for a library error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Numerical { .. } => EXIT_NUMERICAL,
        _ => EXIT_USAGE,
    }
}

#[derive(Parser, Debug)]
#[command(name = "implicit-ce", version, about = "Cross-domain co-embeddings trained on per-user correlation")]
pub struct Cli {
    /// Worker threads for parallel sections (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Write the run manifest here instead of `<out>/<command>.manifest.json`.
    #[arg(long, global = true)]
    pub manifest: Option<PathBuf>,
    /// Record wall times in logs and manifests (outputs are then not byte-stable).
    #[arg(long, global = true)]
    pub record_timing: bool,
    /// More log output; repeat for debug.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic dataset (aux.tsv, target.tsv, split.tsv).
    Generate(GenerateArgs),
    /// Train a model and write checkpoints and logs.
    Train(TrainArgs),
    /// Evaluate a checkpoint on one split.
    Evaluate(EvaluateArgs),
    /// Top-k target items for a new user given auxiliary counts.
    Recommend(RecommendArgs),
    /// Export embeddings as TSV with a JSON sidecar.
    Export(ExportArgs),
    /// Run a simulation study.
    #[command(subcommand)]
    Experiment(ExperimentCommand),
    /// Seeded random hyperparameter search.
    Search(SearchArgs),
}

fn probability(s: &str) -> std::result::Result<f64, String> {
    let p: f64 = s.parse().map_err(|_| format!("{s:?} is not a number"))?;
    if (0.0..=1.0).contains(&p) {
        Ok(p)
    } else {
        Err(format!("{p} is outside [0, 1]"))
    }
}

#[derive(Args, Debug)]
pub struct GenerateArgs {
    #[arg(long, default_value_t = 1000)]
    pub users: usize,
    #[arg(long, default_value_t = 50)]
    pub aux_items: usize,
    #[arg(long, default_value_t = 50)]
    pub target_items: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 0.0)]
    pub noise_scale: f64,
    #[arg(long, default_value_t = 0.0, value_parser = probability)]
    pub outlier_rate: f64,
    #[arg(long, default_value_t = 100.0)]
    pub outlier_magnitude: f64,
    #[arg(long, default_value_t = 1.0)]
    pub aux_mean: f64,
    #[arg(long, default_value_t = 1.0)]
    pub aux_sd: f64,
    #[arg(long, default_value_t = 0.2, value_parser = probability)]
    pub map_density: f64,
    /// Validation users (default: a tenth of the users).
    #[arg(long)]
    pub val_users: Option<usize>,
    /// Holdout users (default: a tenth of the users).
    #[arg(long)]
    pub holdout_users: Option<usize>,
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
}

/// Where the interaction data lives.
#[derive(Args, Debug, Clone, Default)]
pub struct DataArgs {
    /// Directory with aux.tsv, target.tsv and optionally split.tsv.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub aux: Option<PathBuf>,
    #[arg(long)]
    pub target: Option<PathBuf>,
    /// `user_index<TAB>label` file; without one every user is a training user.
    #[arg(long)]
    pub split_file: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    pub min_aux: usize,
    #[arg(long, default_value_t = 1)]
    pub min_target: usize,
}

impl DataArgs {
    fn is_empty(&self) -> bool {
        self.data.is_none() && self.aux.is_none() && self.target.is_none()
    }

    fn paths(&self) -> Result<(PathBuf, PathBuf, Option<PathBuf>)> {
        let from_dir = |name: &str| self.data.as_ref().map(|d| d.join(name));
        let aux = self.aux.clone().or_else(|| from_dir("aux.tsv"));
        let target = self.target.clone().or_else(|| from_dir("target.tsv"));
        let split = self
            .split_file
            .clone()
            .or_else(|| from_dir("split.tsv").filter(|p| p.exists()));
        match (aux, target) {
            (Some(a), Some(t)) => Ok((a, t, split)),
            _ => Err(Error::InvalidConfig(
                "give --data DIR or both --aux and --target".into(),
            )),
        }
    }

    /// Loads the dataset and records every file read in the manifest.
    pub fn load(&self, manifest: &mut RunManifest) -> Result<CrossDomainDataset> {
        let (aux, target, split) = self.paths()?;
        for p in [&aux, &target] {
            if !p.exists() {
                return Err(Error::InvalidInput(format!("{} does not exist", p.display())));
            }
        }
        let (ds, report) = ingest_tsv(&aux, &target, self.min_aux, self.min_target)?;
        if report.single_domain_users + report.below_threshold_users > 0 {
            log::warn!(
                "dropped {} single-domain and {} below-threshold users",
                report.single_domain_users,
                report.below_threshold_users
            );
        }
        manifest.add_input(&aux)?;
        manifest.add_input(&target)?;
        match split {
            Some(path) => {
                let labels = read_split(&path, ds.n_users())?;
                manifest.add_input(&path)?;
                ds.with_split(labels)
            }
            None => Ok(ds),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum OptimizerName {
    Sgd,
    Adam,
}

/// Training flags; each one overrides the config file, which overrides the defaults.
#[derive(Args, Debug, Clone, Default)]
pub struct ConfigFlags {
    /// JSON training config applied before the flags.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub loss: Option<LossKind>,
    #[arg(long)]
    pub similarity: Option<SimilarityKind>,
    #[arg(long)]
    pub n_su: Option<usize>,
    #[arg(long)]
    pub n_si: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long, value_enum)]
    pub optimizer: Option<OptimizerName>,
    #[arg(long)]
    pub l2: Option<f64>,
    #[arg(long)]
    pub dropout: Option<f64>,
    /// Comma-separated widths; give the flag without a value for no hidden layers.
    #[arg(long, value_delimiter = ',', num_args = 0..)]
    pub hidden_sizes: Option<Vec<usize>>,
    #[arg(long)]
    pub batch_norm: Option<bool>,
    #[arg(long)]
    pub output_layer: Option<bool>,
    #[arg(long)]
    pub d: Option<usize>,
    #[arg(long)]
    pub d_aux: Option<usize>,
    #[arg(long)]
    pub user_bias: Option<bool>,
    #[arg(long)]
    pub item_bias: Option<bool>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub eval_every: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub preprocess: Option<crate::dataset::Preprocess>,
    #[arg(long)]
    pub bpr_pairs: Option<usize>,
    #[arg(long)]
    pub max_resamples: Option<usize>,
}

impl ConfigFlags {
    /// Defaults, then the config file, then explicit flags.
    pub fn resolve(&self) -> Result<TrainConfig> {
        let mut cfg = match &self.config {
            Some(path) => {
                let text = fs::read_to_string(path)
                    .map_err(|e| Error::InvalidInput(format!("{}: {e}", path.display())))?;
                serde_json::from_str(&text)?
            }
            None => TrainConfig::default(),
        };
        macro_rules! set {
            ($($field:ident),*) => {
                $(if let Some(v) = &self.$field {
                    cfg.$field = v.clone();
                })*
            };
        }
        set!(
            loss, similarity, n_su, n_si, learning_rate, l2, dropout, hidden_sizes, batch_norm,
            output_layer, d, d_aux, user_bias, item_bias, steps, eval_every, seed, preprocess,
            bpr_pairs, max_resamples
        );
        match self.optimizer {
            Some(OptimizerName::Sgd) => cfg.optimizer = OptimizerKind::Sgd,
            Some(OptimizerName::Adam) if !matches!(cfg.optimizer, OptimizerKind::Adam { .. }) => {
                cfg.optimizer = OptimizerKind::default()
            }
            _ => {}
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn overrides_anything(&self) -> bool {
        let probe = TrainConfig::default();
        let mut moved = self.clone();
        moved.config = None;
        self.config.is_some()
            || moved.resolve().map(|c| c != probe).unwrap_or(true)
    }
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub flags: ConfigFlags,
    /// Print the resolved config as JSON and exit.
    #[arg(long)]
    pub print_config: bool,
    /// Continue from a resumable checkpoint; its config is used unchanged.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Stop after this many total steps, leaving a resumable checkpoint.
    #[arg(long)]
    pub stop_at: Option<usize>,
    #[arg(long, default_value = "run")]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, default_value = "holdout")]
    pub split: SplitLabel,
    #[arg(long, default_value_t = 10)]
    pub recall_k: usize,
    #[arg(long, default_value_t = 4)]
    pub max_grade: u32,
    #[arg(long, value_enum, default_value = "at-least-median")]
    pub relevance: RelevanceArg,
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum RelevanceArg {
    AtLeastMedian,
    Positive,
}

impl From<RelevanceArg> for Relevance {
    fn from(r: RelevanceArg) -> Self {
        match r {
            RelevanceArg::AtLeastMedian => Relevance::AtLeastMedian,
            RelevanceArg::Positive => Relevance::Positive,
        }
    }
}

#[derive(Args, Debug)]
pub struct RecommendArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// `aux_item_id<TAB>count` lines for the new user.
    #[arg(long)]
    pub affinities: PathBuf,
    #[arg(short, long, default_value_t = 10)]
    pub k: usize,
    /// Also write the list to this TSV file.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ExportArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Also export user embeddings for the users of this dataset.
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, default_value = "embeddings")]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct SearchArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub flags: ConfigFlags,
    #[arg(long, default_value_t = 10)]
    pub trials: usize,
    #[arg(long, default_value_t = 0)]
    pub search_seed: u64,
    #[arg(long, default_value = "search")]
    pub out: PathBuf,
}

#[derive(Subcommand, Debug)]
pub enum ExperimentCommand {
    /// Steps to convergence under outlier users (convergence.csv).
    Convergence(ConvergenceArgs),
    /// Error of sampled correlation and gradient by sample size (sample_error.csv).
    SampleError(SampleErrorArgs),
    /// Bias of the sampled gradient by sample size (bias_decay.csv).
    BiasDecay(BiasDecayArgs),
    /// Print the column layout of the experiment CSVs.
    Describe,
}

#[derive(Args, Debug)]
pub struct ConvergenceArgs {
    /// JSON study spec applied before the flags.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', value_parser = probability)]
    pub outlier_rates: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    pub losses: Option<Vec<LossKind>>,
    #[arg(long)]
    pub trials: Option<usize>,
    #[arg(long)]
    pub max_steps: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct SampleErrorArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub population: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    pub sizes: Option<Vec<usize>>,
    #[arg(long)]
    pub trials: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct BiasDecayArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub items: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    pub sizes: Option<Vec<usize>>,
    #[arg(long)]
    pub trials: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn run_from_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).try_init();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            log::warn!("thread pool already configured: {e}");
        }
    }
    match run(&cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            if exit_code(&e) == EXIT_USAGE {
                eprintln!("run with --help for usage");
            }
            exit_code(&e)
        }
    }
}

struct Session<'a> {
    cli: &'a Cli,
    started: Instant,
}

impl Session<'_> {
    fn finish(&self, mut manifest: RunManifest, out_dir: Option<&Path>) -> Result<()> {
        if self.cli.record_timing {
            manifest.wall_time_ms = Some(self.started.elapsed().as_secs_f64() * 1e3);
        }
        if let Some(path) = manifest_path(self.cli.manifest.as_deref(), out_dir, &manifest.command) {
            manifest.write(&path)?;
        }
        Ok(())
    }
}

pub fn run(cli: &Cli) -> Result<()> {
    let session = Session {
        cli,
        started: Instant::now(),
    };
    match &cli.command {
        Command::Generate(a) => cmd_generate(&session, a),
        Command::Train(a) => cmd_train(&session, a),
        Command::Evaluate(a) => cmd_evaluate(&session, a),
        Command::Recommend(a) => cmd_recommend(&session, a),
        Command::Export(a) => cmd_export(&session, a),
        Command::Experiment(e) => cmd_experiment(&session, e),
        Command::Search(a) => cmd_search(&session, a),
    }
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path)?;
    Ok(())
}

fn cmd_generate(session: &Session, a: &GenerateArgs) -> Result<()> {
    let spec = SyntheticSpec {
        n_users: a.users,
        n_aux_items: a.aux_items,
        n_target_items: a.target_items,
        noise_scale: a.noise_scale,
        outlier_rate: a.outlier_rate,
        outlier_magnitude: a.outlier_magnitude,
        seed: a.seed,
        aux_mean: a.aux_mean,
        aux_sd: a.aux_sd,
        map_density: a.map_density,
    };
    spec.validate()?;
    let n_val = a.val_users.unwrap_or(a.users / 10);
    let n_holdout = a.holdout_users.unwrap_or(a.users / 10);
    let generated = generate_synthetic(&spec)?;
    let ds = split_users(generated.dataset, n_val, n_holdout, a.seed)?;
    create_dir(&a.out)?;
    let (aux, target, split) = (a.out.join("aux.tsv"), a.out.join("target.tsv"), a.out.join("split.tsv"));
    ds.write_tsv(&aux, &target)?;
    ds.write_split(&split)?;

    #[derive(serde::Serialize)]
    struct GenerateConfig<'a> {
        synthetic: &'a SyntheticSpec,
        val_users: usize,
        holdout_users: usize,
    }
    let mut manifest = RunManifest::new("generate").with_config(&GenerateConfig {
        synthetic: &spec,
        val_users: n_val,
        holdout_users: n_holdout,
    })?;
    manifest.seed = Some(a.seed);
    for p in [&aux, &target, &split] {
        manifest.add_output(p);
    }
    println!(
        "{} users ({} outliers), {} train / {n_val} validation / {n_holdout} holdout",
        ds.n_users(),
        generated.outliers.iter().filter(|&&o| o).count(),
        ds.users_with(SplitLabel::Train).len()
    );
    session.finish(manifest, Some(&a.out))
}

fn write_history_csv(path: &Path, history: &[ValidationPoint]) -> Result<()> {
    let mut w = std::io::BufWriter::new(fs::File::create(path)?);
    writeln!(w, "step,correlation,ci95,n_users")?;
    for p in history {
        writeln!(w, "{},{},{},{}", p.step, p.correlation, p.ci95, p.n_users)?;
    }
    w.flush()?;
    Ok(())
}

fn check_item_ids(ckpt: &Checkpoint, ds: &CrossDomainDataset) -> Result<()> {
    if ckpt.aux_item_ids != ds.ids().aux_items || ckpt.target_item_ids != ds.ids().target_items {
        return Err(Error::InvalidInput(
            "dataset item ids differ from the checkpoint's; ingest the same item universe".into(),
        ));
    }
    Ok(())
}

fn cmd_train(session: &Session, a: &TrainArgs) -> Result<()> {
    if a.print_config {
        let cfg = match &a.resume {
            Some(path) => Checkpoint::load(path)?.train_config,
            None => a.flags.resolve()?,
        };
        println!("{}", serde_json::to_string_pretty(&cfg)?);
        return Ok(());
    }
    let mut manifest = RunManifest::new("train");
    let ds = a.data.load(&mut manifest)?;
    let opts = TrainOptions {
        record_timing: session.cli.record_timing,
        stop_at: a.stop_at,
    };
    let mut report = |s: &trainer::StepStats| {
        if let Some(l) = s.loss {
            log::debug!("step {} loss {l}", s.step);
        }
    };
    let outcome = match &a.resume {
        Some(path) => {
            if a.flags.overrides_anything() {
                return Err(Error::InvalidConfig(
                    "a resumed run keeps its checkpoint config; drop the training flags".into(),
                ));
            }
            let ckpt = Checkpoint::load(path)?;
            check_item_ids(&ckpt, &ds)?;
            manifest.add_input(path)?;
            trainer::resume(&ds, ckpt, opts, &mut report)?
        }
        None => {
            let cfg = a.flags.resolve()?;
            if let Some(p) = &a.flags.config {
                manifest.add_input(p)?;
            }
            trainer::train(&ds, &cfg, opts, &mut report)?
        }
    };
    let cfg = outcome.last.train_config.clone();
    create_dir(&a.out)?;
    let last = a.out.join("last.ckpt");
    let best = a.out.join("best.ckpt");
    let steps = a.out.join("steps.csv");
    let validation = a.out.join("validation.csv");
    outcome.last.save(&last)?;
    outcome.best.save(&best)?;
    trainer::write_step_csv(&steps, &outcome.log)?;
    write_history_csv(&validation, &outcome.last.history)?;
    manifest = manifest.with_config(&cfg)?;
    manifest.config_hash = Some(outcome.last.config_hash());
    manifest.seed = Some(cfg.seed);
    for p in [&last, &best, &steps, &validation] {
        manifest.add_output(p);
    }
    match outcome.last.history.iter().map(|p| p.correlation).reduce(f64::max) {
        Some(c) => println!("trained to step {}; best validation correlation {c:.4} at step {}", outcome.last.step, outcome.best.step),
        None => println!("trained to step {}; no validation users", outcome.last.step),
    }
    session.finish(manifest, Some(&a.out))
}

fn cmd_evaluate(session: &Session, a: &EvaluateArgs) -> Result<()> {
    let mut manifest = RunManifest::new("evaluate");
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    manifest.add_input(&a.checkpoint)?;
    let ds = a.data.load(&mut manifest)?;
    check_item_ids(&ckpt, &ds)?;
    let opts = EvalOptions {
        preprocess: ckpt.train_config.preprocess,
        recall_k: a.recall_k,
        max_grade: a.max_grade,
        relevance: a.relevance.into(),
        ..EvalOptions::default()
    };
    let mut report = evaluate(&ckpt.model, &ds, a.split, &opts)?;
    report.config_hash = Some(ckpt.config_hash());
    create_dir(&a.out)?;
    let json = a.out.join(format!("eval_{}.json", a.split));
    let csv = a.out.join(format!("eval_{}.csv", a.split));
    report.write_json(&json)?;
    report.write_csv(&csv)?;
    let m = &report.metrics;
    println!("{}", crate::metrics::EvalReport::CSV_HEADER);
    println!("{}", report.csv_row());
    log::info!(
        "correlation {:.4} ± {:.4}, ndcg {:.4}, err {:.4}, recall@{} {:.4}",
        m.correlation.mean,
        m.correlation.ci95,
        m.ndcg.mean,
        m.err.mean,
        a.recall_k,
        m.recall.mean
    );
    manifest = manifest.with_config(&opts)?;
    manifest.config_hash = report.config_hash.clone();
    manifest.add_output(&json);
    manifest.add_output(&csv);
    session.finish(manifest, Some(&a.out))
}

/// Parses `item_id<TAB>count` lines against known auxiliary ids.
///
/// Unknown ids are logged and skipped, repeated ids are summed and zero
/// counts dropped. Fails when no known id remains.
pub fn read_affinities(path: &Path, aux_ids: &[String]) -> Result<SparseRow> {
    let index: BTreeMap<&str, usize> = aux_ids.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
    let reader = BufReader::new(fs::File::open(path)?);
    let mut counts: BTreeMap<usize, f64> = BTreeMap::new();
    let mut unknown = 0usize;
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: lineno + 1,
            message,
        };
        let (id, count) = line
            .split_once('\t')
            .ok_or_else(|| parse_err("expected `item_id<TAB>count`".into()))?;
        let count: f64 = count
            .trim()
            .parse()
            .map_err(|_| parse_err(format!("count {count:?} is not a number")))?;
        if !count.is_finite() || count < 0.0 {
            return Err(parse_err(format!("count {count} must be nonnegative and finite")));
        }
        match index.get(id) {
            Some(&i) => *counts.entry(i).or_insert(0.0) += count,
            None => {
                log::warn!("unknown auxiliary item {id:?} skipped");
                unknown += 1;
            }
        }
    }
    let entries: Vec<(usize, f64)> = counts.into_iter().filter(|&(_, c)| c > 0.0).collect();
    if entries.is_empty() {
        return Err(Error::InvalidInput(format!(
            "no known auxiliary item with a positive count ({unknown} unknown ids)"
        )));
    }
    SparseRow::new(entries)
}

/// Top `k` target items for one auxiliary row, best first, ties by index.
pub fn recommend(model: &Model, row: &SparseRow, k: usize) -> Result<Vec<(usize, f64)>> {
    let e = model.user_embeddings(&[row])?;
    let items: Vec<usize> = (0..model.config.n_target_items).collect();
    let scores = model.predict_block(e.view(), None, &items)?;
    let scores = scores.row(0).to_vec();
    Ok(ranking(&scores).into_iter().take(k).map(|j| (j, scores[j])).collect())
}

fn cmd_recommend(session: &Session, a: &RecommendArgs) -> Result<()> {
    if a.k == 0 {
        return Err(Error::InvalidConfig("k must be at least 1".into()));
    }
    let mut manifest = RunManifest::new("recommend");
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    manifest.add_input(&a.checkpoint)?;
    let row = read_affinities(&a.affinities, &ckpt.aux_item_ids)?;
    manifest.add_input(&a.affinities)?;
    let row = ckpt.train_config.preprocess.row(&row);
    let top = recommend(&ckpt.model, &row, a.k)?;
    let mut text = String::new();
    for (rank, (j, s)) in top.iter().enumerate() {
        text.push_str(&format!("{}\t{}\t{}\n", rank + 1, ckpt.target_item_ids[*j], s));
    }
    print!("{text}");
    #[derive(serde::Serialize)]
    struct RecommendConfig {
        k: usize,
    }
    manifest = manifest.with_config(&RecommendConfig { k: a.k })?;
    manifest.config_hash = Some(ckpt.config_hash());
    if let Some(out) = &a.out {
        fs::write(out, &text)?;
        manifest.add_output(out);
    }
    session.finish(manifest, a.out.as_deref().and_then(Path::parent))
}

fn cmd_export(session: &Session, a: &ExportArgs) -> Result<()> {
    let mut manifest = RunManifest::new("export");
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    manifest.add_input(&a.checkpoint)?;
    create_dir(&a.out)?;
    let model = &ckpt.model;
    let items = a.out.join("target_items.tsv");
    write_embeddings_tsv(&items, &ckpt.target_item_ids, &model.params.target_embeddings)?;
    manifest.add_output(&items);
    if !a.data.is_empty() {
        let ds = a.data.load(&mut manifest)?;
        check_item_ids(&ckpt, &ds)?;
        let pre = ckpt.train_config.preprocess;
        let rows: Vec<SparseRow> = ds.auxiliary().rows().iter().map(|r| pre.row(r)).collect();
        let refs: Vec<&SparseRow> = rows.iter().collect();
        let mut blocks = Vec::new();
        for chunk in refs.chunks(1024) {
            blocks.push(model.user_embeddings(chunk)?);
        }
        let views: Vec<_> = blocks.iter().map(|b| b.view()).collect();
        let users = ndarray::concatenate(ndarray::Axis(0), &views)
            .map_err(|e| Error::Shape(e.to_string()))?;
        let path = a.out.join("users.tsv");
        write_embeddings_tsv(&path, &ds.ids().users, &users)?;
        manifest.add_output(&path);
    }
    let sidecar = a.out.join("embeddings.json");
    let meta = EmbeddingSidecar::new(model.config.d, model.config.similarity);
    let mut f = fs::File::create(&sidecar)?;
    serde_json::to_writer_pretty(&mut f, &meta)?;
    writeln!(f)?;
    manifest.add_output(&sidecar);
    manifest = manifest.with_config(&meta)?;
    manifest.config_hash = Some(ckpt.config_hash());
    session.finish(manifest, Some(&a.out))
}

fn load_spec<T: serde::de::DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    match path {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::InvalidInput(format!("{}: {e}", p.display())))?;
            Ok(serde_json::from_str(&text)?)
        }
        None => Ok(T::default()),
    }
}

fn cmd_experiment(session: &Session, cmd: &ExperimentCommand) -> Result<()> {
    match cmd {
        ExperimentCommand::Describe => {
            print!("{}", experiments::describe());
            Ok(())
        }
        ExperimentCommand::Convergence(a) => {
            let mut spec: ConvergenceSpec = load_spec(a.config.as_deref())?;
            if let Some(v) = &a.outlier_rates {
                spec.outlier_rates = v.clone();
            }
            if let Some(v) = &a.losses {
                spec.losses = v.clone();
            }
            if let Some(v) = a.trials {
                spec.trials = v;
            }
            if let Some(v) = a.max_steps {
                spec.max_steps = v;
            }
            if let Some(v) = a.seed {
                spec.seed = v;
            }
            let rows = experiments::run_convergence(&spec)?;
            create_dir(&a.out)?;
            let path = a.out.join("convergence.csv");
            experiments::write_convergence_csv(&path, &rows)?;
            println!("loss,outlier_rate,median_steps");
            for (l, p, m) in experiments::convergence_medians(&rows) {
                println!("{l},{p},{m}");
            }
            let mut manifest = RunManifest::new("experiment convergence").with_config(&spec)?;
            manifest.seed = Some(spec.seed);
            manifest.add_output(&path);
            session.finish(manifest, Some(&a.out))
        }
        ExperimentCommand::SampleError(a) => {
            let mut spec: SampleErrSpec = load_spec(a.config.as_deref())?;
            if let Some(v) = a.population {
                spec.n_items_population = v;
            }
            if let Some(v) = &a.sizes {
                spec.sample_sizes = v.clone();
            }
            if let Some(v) = a.trials {
                spec.trials = v;
            }
            if let Some(v) = a.seed {
                spec.seed = v;
            }
            let rows = experiments::run_sample_error(&spec)?;
            create_dir(&a.out)?;
            let path = a.out.join("sample_error.csv");
            experiments::write_sample_error_csv(&path, &rows)?;
            println!("{}", experiments::SAMPLE_ERROR_HEADER);
            for r in &rows {
                println!("{},{},{}", r.sample_size, r.corr_mse, r.grad_mse);
            }
            let mut manifest = RunManifest::new("experiment sample-error").with_config(&spec)?;
            manifest.seed = Some(spec.seed);
            manifest.add_output(&path);
            session.finish(manifest, Some(&a.out))
        }
        ExperimentCommand::BiasDecay(a) => {
            let mut spec: BiasDecaySpec = load_spec(a.config.as_deref())?;
            if let Some(v) = a.items {
                spec.n_items = v;
            }
            if let Some(v) = &a.sizes {
                spec.sizes = v.clone();
            }
            if let Some(v) = a.trials {
                spec.trials = v;
            }
            if let Some(v) = a.seed {
                spec.seed = v;
            }
            let rows = experiments::run_bias_decay(&spec)?;
            create_dir(&a.out)?;
            let path = a.out.join("bias_decay.csv");
            experiments::write_bias_decay_csv(&path, &rows)?;
            println!("{}", experiments::BIAS_DECAY_HEADER);
            for r in &rows {
                println!("{},{}", r.sample_size, r.bias_norm);
            }
            let pts: Vec<(f64, f64)> = rows
                .iter()
                .filter(|r| r.bias_norm > 0.0)
                .map(|r| (r.sample_size as f64, r.bias_norm))
                .collect();
            if pts.len() >= 2 {
                println!("log-log slope {:.4}", experiments::log_log_slope(&pts));
            }
            let mut manifest = RunManifest::new("experiment bias-decay").with_config(&spec)?;
            manifest.seed = Some(spec.seed);
            manifest.add_output(&path);
            session.finish(manifest, Some(&a.out))
        }
    }
}

fn cmd_search(session: &Session, a: &SearchArgs) -> Result<()> {
    if a.trials == 0 {
        return Err(Error::InvalidConfig("need at least one trial".into()));
    }
    let mut manifest = RunManifest::new("search");
    let ds = a.data.load(&mut manifest)?;
    let base = a.flags.resolve()?;
    let trials = trainer::random_search(&ds, &base, a.trials, a.search_seed)?;
    create_dir(&a.out)?;
    let path = a.out.join("search.json");
    let mut f = fs::File::create(&path)?;
    serde_json::to_writer_pretty(&mut f, &trials)?;
    writeln!(f)?;
    println!("trial,learning_rate,l2,dropout,n_su,best_step,best_validation_correlation");
    for t in &trials {
        println!(
            "{},{},{},{},{},{},{}",
            t.trial,
            t.config.learning_rate,
            t.config.l2,
            t.config.dropout,
            t.config.n_su,
            t.best_step.map_or(String::new(), |s| s.to_string()),
            t.best_validation_correlation.map_or(String::new(), |c| c.to_string())
        );
    }
    manifest = manifest.with_config(&base)?;
    manifest.config_hash = Some(base.hash());
    manifest.seed = Some(a.search_seed);
    manifest.add_output(&path);
    session.finish(manifest, Some(&a.out))
}
