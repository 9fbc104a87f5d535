//! Training loops.
//!
//! The correlation objective trains with the sample correlation update: each
//! step draws a block of training users and target items, scores only that
//! block and follows the gradient of the block's mean `1 − corr`. The MSE
//! family and BPR use the same block sampling so budgets are comparable.
//!
//! Every step draws from a ChaCha8 stream keyed by `(seed, step)`, so a run
//! is a pure function of its dataset and config and can be resumed from any
//! checkpoint without saving generator state.

use std::borrow::Cow;
use std::collections::BTreeSet;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::{BestSnapshot, Checkpoint};
use crate::dataset::{CrossDomainDataset, Preprocess, SparseRow, SplitLabel};
use crate::error::{Error, Result};
use crate::losses::{
    bpr_block_loss, mse_loss, sample_corr_loss, user_norm_mse_loss, LossKind, LossValueAndGrad,
};
use crate::metrics::{correlation_summary, EvalOptions, ModelScorer};
use crate::model::{ForwardOptions, Model, ModelConfig, SimilarityKind};
use crate::optim::{Optimizer, OptimizerKind};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub loss: LossKind,
    pub similarity: SimilarityKind,
    /// Users per step.
    pub n_su: usize,
    /// Target items per step.
    pub n_si: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub l2: f64,
    pub dropout: f64,
    pub hidden_sizes: Vec<usize>,
    pub batch_norm: bool,
    /// Linear map after the hidden layers. Without it the last hidden width must equal `d`.
    pub output_layer: bool,
    pub d: usize,
    pub d_aux: usize,
    pub user_bias: bool,
    pub item_bias: bool,
    pub steps: usize,
    /// Validation interval in steps.
    pub eval_every: usize,
    pub seed: u64,
    pub preprocess: Preprocess,
    /// BPR pairs drawn per user per step.
    pub bpr_pairs: usize,
    /// Redraws allowed for a sampled user whose target row is constant on the item sample.
    pub max_resamples: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            loss: LossKind::SampleCorr,
            similarity: SimilarityKind::Cosine,
            n_su: 64,
            n_si: 1000,
            learning_rate: 0.05,
            optimizer: OptimizerKind::default(),
            l2: 0.001,
            dropout: 0.3,
            hidden_sizes: vec![1024, 1024],
            batch_norm: true,
            output_layer: true,
            d: 300,
            d_aux: 300,
            user_bias: false,
            item_bias: false,
            steps: 10_000,
            eval_every: 500,
            seed: 0,
            preprocess: Preprocess::Raw,
            bpr_pairs: 64,
            max_resamples: 10,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.n_si < 2 {
            return bad("n_si must be at least 2");
        }
        if self.n_su == 0 {
            return bad("n_su must be at least 1");
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return bad("learning rate must be positive");
        }
        if !(self.l2 >= 0.0) || !self.l2.is_finite() {
            return bad("l2 must be nonnegative");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)");
        }
        if self.eval_every == 0 {
            return bad("eval_every must be at least 1");
        }
        if self.loss == LossKind::Bpr && self.bpr_pairs == 0 {
            return bad("bpr needs at least one pair per user");
        }
        if self.loss == LossKind::PerUserCorr {
            return bad("per-user-corr is the full-data objective; train it with sample-corr");
        }
        self.optimizer.validate()
    }

    pub fn model_config(&self, n_aux_items: usize, n_target_items: usize, n_users: usize) -> ModelConfig {
        let mut c = ModelConfig::new(n_aux_items, n_target_items);
        c.n_users = n_users;
        c.d = self.d;
        c.d_aux = self.d_aux;
        c.hidden_sizes = self.hidden_sizes.clone();
        c.batch_norm = self.batch_norm;
        c.output_layer = self.output_layer;
        c.similarity = self.similarity;
        c.user_bias = self.user_bias;
        c.item_bias = self.item_bias;
        c
    }

    /// SHA-256 of the config's JSON encoding.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(bytes))
    }
}

/// The generator for one step of a run.
pub fn step_rng(seed: u64, step: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step as u64);
    rng
}

fn init_seed(seed: u64) -> u64 {
    step_rng(seed, usize::MAX).random()
}

/// `amount` distinct values from `0..length` in increasing order.
///
/// Floyd's algorithm costs `O(amount log amount)` whatever `length` is.
pub fn sample_distinct(rng: &mut ChaCha8Rng, length: usize, amount: usize) -> Vec<usize> {
    assert!(amount <= length, "cannot draw {amount} of {length}");
    let mut chosen = BTreeSet::new();
    for j in length - amount..length {
        let t = rng.random_range(0..=j);
        if !chosen.insert(t) {
            chosen.insert(j);
        }
    }
    chosen.into_iter().collect()
}

/// A sampled (users × items) block with its targets.
#[derive(Debug, Clone, PartialEq)]
pub struct SampledBlock {
    /// Dataset user indices.
    pub users: Vec<usize>,
    /// Target item indices, increasing.
    pub items: Vec<usize>,
    /// Targets on the block; absent entries are 0.
    pub y: Array2<f64>,
    pub resampled: usize,
    pub skipped: usize,
}

fn is_constant(v: &[f64]) -> bool {
    v.iter().all(|&x| x == v[0])
}

/// Samples items, then fills user slots from a shuffled pool of training users.
///
/// With `require_variation`, a user whose targets are constant on the item
/// sample is replaced by the next pool user, up to `max_resamples` times;
/// after that the slot stays empty.
pub fn sample_block(
    ds: &CrossDomainDataset,
    train_users: &[usize],
    n_su: usize,
    n_si: usize,
    max_resamples: usize,
    require_variation: bool,
    rng: &mut ChaCha8Rng,
) -> SampledBlock {
    let n_items = ds.target().n_items();
    let items = sample_distinct(rng, n_items, n_si.min(n_items));
    let pool_size = train_users.len().min(n_su.saturating_mul(max_resamples + 1));
    let mut pool = sample_distinct(rng, train_users.len(), pool_size);
    // Floyd's output is sorted; a shuffle makes slot order uniform.
    for i in (1..pool.len()).rev() {
        pool.swap(i, rng.random_range(0..=i));
    }
    let mut pool = pool.into_iter().map(|p| train_users[p]);

    let mut users = Vec::with_capacity(n_su);
    let mut rows = Vec::with_capacity(n_su * items.len());
    let (mut resampled, mut skipped) = (0, 0);
    'slots: for _ in 0..n_su {
        let mut tries = 0;
        loop {
            let Some(u) = pool.next() else {
                skipped += 1;
                continue 'slots;
            };
            let target = ds.target().row(u);
            let y: Vec<f64> = items.iter().map(|&j| target.get(j)).collect();
            if !require_variation || !is_constant(&y) {
                users.push(u);
                rows.extend(y);
                break;
            }
            tries += 1;
            if tries > max_resamples {
                skipped += 1;
                break;
            }
            resampled += 1;
        }
    }
    let y = Array2::from_shape_vec((users.len(), items.len()), rows).expect("block shape");
    SampledBlock {
        users,
        items,
        y,
        resampled,
        skipped,
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StepStats {
    pub step: usize,
    /// `None` when no usable users were drawn.
    pub loss: Option<f64>,
    pub users: usize,
    pub resampled: usize,
    pub skipped: usize,
    /// Target embedding rows read during the step.
    pub target_rows_read: u64,
    /// Target embedding rows written by the optimizer.
    pub target_rows_written: usize,
}

/// Users whose predictions vary on the block; the rest have undefined correlation.
fn varying_rows(p: &Array2<f64>) -> Vec<usize> {
    (0..p.nrows())
        .filter(|&i| !is_constant(p.row(i).as_slice().expect("contiguous")))
        .collect()
}

fn select_rows(a: &Array2<f64>, rows: &[usize]) -> Array2<f64> {
    a.select(ndarray::Axis(0), rows)
}

fn scatter_rows(dp: &Array2<f64>, rows: &[usize], full: (usize, usize)) -> Array2<f64> {
    let mut out = Array2::zeros(full);
    for (r, &i) in rows.iter().enumerate() {
        out.row_mut(i).assign(&dp.row(r));
    }
    out
}

/// Uniform pairs `(j1, j2)` of block columns with `y[j2] > y[j1]`.
fn sample_pairs(y: &[f64], n_pairs: usize, rng: &mut ChaCha8Rng) -> Vec<(usize, usize)> {
    let n = y.len();
    let mut pairs = Vec::with_capacity(n_pairs);
    let mut attempts = 0;
    while pairs.len() < n_pairs && attempts < 20 * n_pairs {
        attempts += 1;
        let a = rng.random_range(0..n);
        let b = rng.random_range(0..n);
        if y[a] < y[b] {
            pairs.push((a, b));
        } else if y[b] < y[a] {
            pairs.push((b, a));
        }
    }
    pairs
}

fn block_loss(
    cfg: &TrainConfig,
    p: &Array2<f64>,
    y: &Array2<f64>,
    rng: &mut ChaCha8Rng,
) -> Result<Option<LossValueAndGrad>> {
    match cfg.loss {
        LossKind::SampleCorr | LossKind::PerUserCorr => {
            let keep = varying_rows(p);
            if keep.is_empty() {
                return Ok(None);
            }
            if keep.len() == p.nrows() {
                return sample_corr_loss(p, y).map(Some);
            }
            let lv = sample_corr_loss(&select_rows(p, &keep), &select_rows(y, &keep))?;
            Ok(Some(LossValueAndGrad {
                value: lv.value,
                dp: scatter_rows(&lv.dp, &keep, p.dim()),
            }))
        }
        LossKind::Mse => {
            let scale = 1.0 / p.len() as f64;
            let lv = mse_loss(p, y)?;
            Ok(Some(LossValueAndGrad {
                value: lv.value * scale,
                dp: lv.dp * scale,
            }))
        }
        LossKind::UserNormMse => user_norm_mse_loss(p, y, false).map(Some),
        LossKind::UserNormRmse => user_norm_mse_loss(p, y, true).map(Some),
        LossKind::Bpr => {
            let pairs: Vec<_> = y
                .rows()
                .into_iter()
                .map(|r| sample_pairs(r.as_slice().expect("contiguous"), cfg.bpr_pairs, rng))
                .collect();
            bpr_block_loss(p, y, &pairs).map(Some)
        }
    }
}

/// One optimization step on a sampled block.
///
/// For `sample-corr` this is the sample correlation update; the other losses
/// use the same sampling as minibatch baselines.
pub fn train_step(
    model: &mut Model,
    optimizer: &mut Optimizer,
    ds: &CrossDomainDataset,
    train_users: &[usize],
    cfg: &TrainConfig,
    step: usize,
) -> Result<StepStats> {
    let mut rng = step_rng(cfg.seed, step);
    let require_variation = cfg.loss != LossKind::Mse;
    let block = sample_block(
        ds,
        train_users,
        cfg.n_su,
        cfg.n_si,
        cfg.max_resamples,
        require_variation,
        &mut rng,
    );
    if block.skipped > 0 {
        log::debug!("step {step}: skipped {} user slots with constant targets", block.skipped);
    }
    let mut stats = StepStats {
        step,
        users: block.users.len(),
        resampled: block.resampled,
        skipped: block.skipped,
        ..StepStats::default()
    };
    let needs_pair = model.config.batch_norm && !model.config.hidden_sizes.is_empty();
    if block.users.is_empty() || (needs_pair && block.users.len() < 2) {
        return Ok(stats);
    }

    let reads_before = model.target_reads().get();
    let mut users = block.users;
    let mut y = block.y;
    let mut rows: Vec<&SparseRow> = users.iter().map(|&u| ds.auxiliary().row(u)).collect();
    let opts = ForwardOptions::train(cfg.dropout, rng.random());
    let (p, trace) = match model.forward_block(&rows, Some(&users), &block.items, &opts) {
        // Under cosine a zero user embedding has no defined prediction; drop those users.
        Err(Error::ZeroVector) if model.config.similarity == SimilarityKind::Cosine => {
            let (e, _) = model.forward(&rows, &opts)?;
            let keep: Vec<usize> = (0..e.nrows()).filter(|&i| e.row(i).iter().any(|&v| v != 0.0)).collect();
            log::debug!("step {step}: dropped {} users with zero embeddings", rows.len() - keep.len());
            stats.skipped += rows.len() - keep.len();
            stats.users = keep.len();
            if keep.is_empty() || (needs_pair && keep.len() < 2) {
                return Ok(stats);
            }
            users = keep.iter().map(|&i| users[i]).collect();
            rows = keep.iter().map(|&i| rows[i]).collect();
            y = select_rows(&y, &keep);
            model.forward_block(&rows, Some(&users), &block.items, &opts)?
        }
        r => r?,
    };
    let Some(lv) = block_loss(cfg, &p, &y, &mut rng)? else {
        stats.target_rows_read = model.target_reads().get() - reads_before;
        return Ok(stats);
    };
    if !lv.value.is_finite() {
        return Err(Error::Numerical {
            step,
            message: format!("loss is {}", lv.value),
        });
    }
    let grads = model.backward(&trace, &lv.dp)?;
    model.update_running_stats(&trace.forward);
    let update = optimizer.step(&mut model.params, &grads, cfg.learning_rate, cfg.l2);
    if !model.params.all_finite() {
        return Err(Error::Numerical {
            step,
            message: "parameters became non-finite after the update".into(),
        });
    }
    stats.loss = Some(lv.value);
    stats.target_rows_read = model.target_reads().get() - reads_before;
    stats.target_rows_written = update.target_rows_written;
    Ok(stats)
}

/// A sample correlation update step; `cfg.loss` must be `sample-corr`.
pub fn scu_step(
    model: &mut Model,
    optimizer: &mut Optimizer,
    ds: &CrossDomainDataset,
    train_users: &[usize],
    cfg: &TrainConfig,
    step: usize,
) -> Result<StepStats> {
    if cfg.loss != LossKind::SampleCorr {
        return Err(Error::InvalidConfig(format!("scu_step needs sample-corr, not {}", cfg.loss)));
    }
    train_step(model, optimizer, ds, train_users, cfg, step)
}

/// A minibatch baseline step for the MSE family or BPR.
pub fn minibatch_step(
    model: &mut Model,
    optimizer: &mut Optimizer,
    ds: &CrossDomainDataset,
    train_users: &[usize],
    cfg: &TrainConfig,
    step: usize,
) -> Result<StepStats> {
    if matches!(cfg.loss, LossKind::SampleCorr | LossKind::PerUserCorr) {
        return Err(Error::InvalidConfig(format!("minibatch_step does not train {}", cfg.loss)));
    }
    train_step(model, optimizer, ds, train_users, cfg, step)
}

/// Mean validation correlation at one point of a run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValidationPoint {
    pub step: usize,
    pub correlation: f64,
    pub ci95: f64,
    pub n_users: usize,
}

/// Everything a run needs to continue.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub model: Model,
    pub optimizer: Optimizer,
    pub step: usize,
    pub history: Vec<ValidationPoint>,
    pub best: Option<BestSnapshot>,
    pub skipped_users: u64,
}

impl TrainState {
    pub fn init(ds: &CrossDomainDataset, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let mc = cfg.model_config(ds.auxiliary().n_items(), ds.target().n_items(), ds.n_users());
        let model = Model::init(mc, init_seed(cfg.seed))?;
        let optimizer = Optimizer::new(cfg.optimizer, &model.params);
        Ok(Self {
            model,
            optimizer,
            step: 0,
            history: Vec::new(),
            best: None,
            skipped_users: 0,
        })
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct TrainOptions {
    /// Measure real per-step wall time; otherwise the CSV column is 0 so logs stay byte-stable.
    pub record_timing: bool,
    /// Stop early after this many total steps, leaving a resumable state.
    pub stop_at: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub loss: Option<f64>,
    pub wall_ms: f64,
}

pub const STEP_CSV_HEADER: &str = "step,loss,wall_ms";

pub fn write_step_csv(path: &Path, records: &[StepRecord]) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "{STEP_CSV_HEADER}")?;
    for r in records {
        match r.loss {
            Some(l) => writeln!(w, "{},{},{}", r.step, l, r.wall_ms)?,
            None => writeln!(w, "{},,{}", r.step, r.wall_ms)?,
        }
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Resumable state at the last step.
    pub last: Checkpoint,
    /// Parameters with the best validation correlation (the last ones without validation users).
    pub best: Checkpoint,
    pub log: Vec<StepRecord>,
}

fn validate_model(model: &Model, ds: &CrossDomainDataset, cfg: &TrainConfig, step: usize) -> Result<Option<ValidationPoint>> {
    let users = ds.users_with(SplitLabel::Validation);
    if users.is_empty() {
        return Ok(None);
    }
    let scorer = ModelScorer {
        model,
        preprocess: cfg.preprocess,
    };
    let opts = EvalOptions {
        preprocess: cfg.preprocess,
        ..EvalOptions::default()
    };
    let s = correlation_summary(&scorer, ds, &users, &opts)?;
    if s.values.is_empty() {
        log::warn!("step {step}: no validation user could be scored");
        return Ok(None);
    }
    Ok(Some(ValidationPoint {
        step,
        correlation: s.mean,
        ci95: s.ci95,
        n_users: s.values.len(),
    }))
}

fn record_validation(state: &mut TrainState, ds: &CrossDomainDataset, cfg: &TrainConfig) -> Result<()> {
    let Some(point) = validate_model(&state.model, ds, cfg, state.step)? else {
        return Ok(());
    };
    log::info!("step {}: validation correlation {:.4}", point.step, point.correlation);
    state.history.push(point);
    let better = state.best.as_ref().is_none_or(|b| point.correlation > b.correlation);
    if better {
        state.best = Some(BestSnapshot {
            step: point.step,
            correlation: point.correlation,
            params: state.model.params.clone(),
        });
    }
    Ok(())
}

/// Trains from a fresh initialization.
pub fn train(
    ds: &CrossDomainDataset,
    cfg: &TrainConfig,
    opts: TrainOptions,
    callback: &mut dyn FnMut(&StepStats),
) -> Result<TrainOutcome> {
    let state = TrainState::init(ds, cfg)?;
    run(ds, cfg, state, opts, callback)
}

/// Continues a run saved in a resumable checkpoint.
pub fn resume(
    ds: &CrossDomainDataset,
    checkpoint: Checkpoint,
    opts: TrainOptions,
    callback: &mut dyn FnMut(&StepStats),
) -> Result<TrainOutcome> {
    let cfg = checkpoint.train_config.clone();
    let state = checkpoint.into_state()?;
    run(ds, &cfg, state, opts, callback)
}

fn run(
    ds: &CrossDomainDataset,
    cfg: &TrainConfig,
    mut state: TrainState,
    opts: TrainOptions,
    callback: &mut dyn FnMut(&StepStats),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let train_ds: Cow<'_, CrossDomainDataset> = match cfg.preprocess {
        Preprocess::Raw => Cow::Borrowed(ds),
        p => Cow::Owned(ds.map_counts(move |c| p.apply(c))),
    };
    let train_users = ds.users_with(SplitLabel::Train);
    if train_users.is_empty() {
        return Err(Error::InvalidInput("no training users".into()));
    }
    if state.step == 0 && state.history.is_empty() {
        record_validation(&mut state, ds, cfg)?;
    }
    let end = opts.stop_at.map_or(cfg.steps, |s| s.min(cfg.steps));
    let mut log = Vec::with_capacity(end.saturating_sub(state.step));
    while state.step < end {
        let started = Instant::now();
        let stats = train_step(
            &mut state.model,
            &mut state.optimizer,
            &train_ds,
            &train_users,
            cfg,
            state.step,
        )?;
        state.skipped_users += stats.skipped as u64;
        callback(&stats);
        let wall_ms = if opts.record_timing {
            started.elapsed().as_secs_f64() * 1e3
        } else {
            0.0
        };
        log.push(StepRecord {
            step: state.step,
            loss: stats.loss,
            wall_ms,
        });
        state.step += 1;
        if state.step % cfg.eval_every == 0 {
            record_validation(&mut state, ds, cfg)?;
        }
    }
    let item_ids = (ds.ids().aux_items.clone(), ds.ids().target_items.clone());
    let last = Checkpoint::from_state(cfg, &state, item_ids.clone());
    let best = match &state.best {
        Some(b) => Checkpoint::best_of(cfg, &state, b, item_ids),
        None => {
            let mut c = last.clone();
            c.optimizer = None;
            c.best = None;
            c
        }
    };
    Ok(TrainOutcome { last, best, log })
}

/// Outcome of one random-search trial.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchTrial {
    pub trial: usize,
    pub config: TrainConfig,
    pub best_step: Option<usize>,
    pub best_validation_correlation: Option<f64>,
}

/// Seeded random search over learning rate, L2, dropout and users per step.
///
/// Learning rate is log-uniform on `[1e-4, 1e-1]`, L2 log-uniform on
/// `[1e-5, 1e-2]`, dropout uniform on `{0, 0.1, …, 0.5}` and `n_su` uniform on
/// `{16, 32, 64, 128}`. Trial `t` trains with seed `base.seed + t`.
pub fn random_search(
    ds: &CrossDomainDataset,
    base: &TrainConfig,
    trials: usize,
    seed: u64,
) -> Result<Vec<SearchTrial>> {
    if ds.users_with(SplitLabel::Validation).is_empty() {
        return Err(Error::InvalidInput("random search needs validation users".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(trials);
    for trial in 0..trials {
        let mut cfg = base.clone();
        cfg.learning_rate = 10f64.powf(rng.random_range(-4.0..=-1.0));
        cfg.l2 = 10f64.powf(rng.random_range(-5.0..=-2.0));
        cfg.dropout = rng.random_range(0..=5) as f64 / 10.0;
        cfg.n_su = [16, 32, 64, 128][rng.random_range(0..4)];
        cfg.seed = base.seed.wrapping_add(trial as u64);
        let (best_step, best_corr) = match train(ds, &cfg, TrainOptions::default(), &mut |_| {}) {
            Ok(o) => {
                let best = o.last.best.as_ref();
                (best.map(|b| b.step), best.map(|b| b.correlation))
            }
            Err(Error::Numerical { step, message }) => {
                log::warn!("trial {trial} diverged at step {step}: {message}");
                (None, None)
            }
            Err(e) => return Err(e),
        };
        out.push(SearchTrial {
            trial,
            config: cfg,
            best_step,
            best_validation_correlation: best_corr,
        });
    }
    Ok(out)
}
