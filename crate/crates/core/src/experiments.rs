//! Simulation studies.
//!
//! * `convergence`: single-user SGD on a linear auxiliary → target map with
//!   outlier users mixed in, recording steps until a clean probe loss crosses
//!   a per-loss threshold.
//! * `sample-error`: squared error of the sampled correlation and its gradient
//!   against population values, by item-sample size.
//! * `bias-decay`: norm of the bias of the sampled gradient, by sample size.
//!
//! Each study writes one CSV whose columns are listed by [`describe`].

use std::io::Write;
use std::path::Path;

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{correlation_with_grad, normalize_row, LossKind};
use crate::trainer::sample_distinct;

fn stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// One value per loss studied in the convergence experiment.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerLoss {
    pub user_norm_mse: f64,
    pub user_norm_rmse: f64,
    pub per_user_corr: f64,
}

impl PerLoss {
    pub fn get(&self, loss: LossKind) -> Result<f64> {
        match loss {
            LossKind::UserNormMse => Ok(self.user_norm_mse),
            LossKind::UserNormRmse => Ok(self.user_norm_rmse),
            LossKind::PerUserCorr => Ok(self.per_user_corr),
            other => Err(Error::InvalidConfig(format!(
                "the convergence study does not cover {other}"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConvergenceSpec {
    pub n_aux_items: usize,
    pub n_target_items: usize,
    pub outlier_rates: Vec<f64>,
    pub losses: Vec<LossKind>,
    pub thresholds: PerLoss,
    pub learning_rates: PerLoss,
    /// Clean steps allowed before a trial is censored.
    pub max_steps: usize,
    pub trials: usize,
    pub seed: u64,
    /// Mean of every auxiliary coordinate; the covariance is the identity.
    pub aux_mean: f64,
    pub outlier_magnitude: f64,
    pub probe_users: usize,
    /// Clean steps between probe evaluations.
    pub probe_every: usize,
    /// Standard deviation of the initial weights.
    pub init_sd: f64,
}

impl Default for ConvergenceSpec {
    fn default() -> Self {
        Self {
            n_aux_items: 50,
            n_target_items: 50,
            outlier_rates: vec![0.0, 0.25, 0.5],
            losses: vec![LossKind::UserNormMse, LossKind::UserNormRmse, LossKind::PerUserCorr],
            thresholds: PerLoss {
                user_norm_mse: 50.0,
                user_norm_rmse: 10.0,
                per_user_corr: 0.01,
            },
            learning_rates: PerLoss {
                user_norm_mse: 1e-4,
                user_norm_rmse: 3e-3,
                per_user_corr: 1e-2,
            },
            max_steps: 10_000,
            trials: 10,
            seed: 0,
            aux_mean: 10.0,
            outlier_magnitude: 100.0,
            probe_users: 1000,
            probe_every: 5,
            init_sd: 0.3,
        }
    }
}

impl ConvergenceSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.n_aux_items == 0 || self.n_target_items < 2 {
            return bad("need at least 1 auxiliary and 2 target items");
        }
        if self.outlier_rates.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return bad("outlier rates must lie in [0, 1]");
        }
        if self.trials == 0 || self.probe_users == 0 || self.probe_every == 0 {
            return bad("trials, probe users and probe interval must be at least 1");
        }
        for &loss in &self.losses {
            if !(self.thresholds.get(loss)? > 0.0) || !(self.learning_rates.get(loss)? > 0.0) {
                return bad("thresholds and learning rates must be positive");
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceRow {
    pub loss: LossKind,
    pub outlier_rate: f64,
    pub trial: usize,
    /// Clean steps until the probe loss fell below threshold, or `max_steps` if censored.
    pub steps: usize,
    pub converged: bool,
}

struct Probe {
    x: Array2<f64>,
    y: Array2<f64>,
    /// Rows of `y` centered and scaled to unit norm.
    y_norm: Array2<f64>,
}

fn gaussian_row(rng: &mut ChaCha8Rng, n: usize, mean: f64) -> Array1<f64> {
    Array1::from_shape_fn(n, |_| mean + rng.sample::<f64, _>(StandardNormal))
}

/// Loss of one user and its gradient with respect to the predictions.
fn user_loss(loss: LossKind, p: &[f64], y: &[f64]) -> Result<(f64, Vec<f64>)> {
    let n = p.len() as f64;
    match loss {
        LossKind::UserNormMse | LossKind::UserNormRmse => {
            let yhat = normalize_row(ndarray::ArrayView1::from(y)).ok_or(Error::ConstantRow {
                row: 0,
                kind: crate::error::RowKind::Target,
            })?;
            let rooted = loss == LossKind::UserNormRmse;
            let mut value = 0.0;
            let grad = p
                .iter()
                .zip(&yhat)
                .map(|(a, b)| {
                    let r = a - b;
                    if rooted {
                        value += r.abs() / n;
                        if r > 0.0 {
                            1.0 / n
                        } else if r < 0.0 {
                            -1.0 / n
                        } else {
                            0.0
                        }
                    } else {
                        value += r * r / n;
                        2.0 * r / n
                    }
                })
                .collect();
            Ok((value, grad))
        }
        LossKind::PerUserCorr => {
            let (c, g) = correlation_with_grad(p, y)?;
            Ok((1.0 - c, g.into_iter().map(|v| -v).collect()))
        }
        other => Err(Error::InvalidConfig(format!("the convergence study does not cover {other}"))),
    }
}

fn probe_loss(loss: LossKind, w: &Array2<f64>, probe: &Probe) -> f64 {
    let p = probe.x.dot(&w.t());
    let n_users = p.nrows();
    let mut total = 0.0;
    for i in 0..n_users {
        let pr = p.row(i);
        let pr = pr.as_slice().expect("contiguous");
        let v = match loss {
            LossKind::UserNormMse => {
                let yn = probe.y_norm.row(i);
                pr.iter().zip(yn.iter()).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / pr.len() as f64
            }
            LossKind::UserNormRmse => {
                let yn = probe.y_norm.row(i);
                pr.iter().zip(yn.iter()).map(|(a, b)| (a - b).abs()).sum::<f64>() / pr.len() as f64
            }
            _ => match correlation_with_grad(pr, probe.y.row(i).as_slice().expect("contiguous")) {
                Ok((c, _)) => 1.0 - c,
                Err(_) => return f64::NAN,
            },
        };
        total += v;
    }
    total / n_users as f64
}

fn sgd_user_step(loss: LossKind, w: &mut Array2<f64>, x: &Array1<f64>, y: &[f64], lr: f64) -> Result<()> {
    let p = w.dot(x);
    let (_, dp) = user_loss(loss, p.as_slice().expect("contiguous"), y)?;
    for (j, g) in dp.into_iter().enumerate() {
        w.row_mut(j).scaled_add(-lr * g, x);
    }
    Ok(())
}

fn convergence_trial(spec: &ConvergenceSpec, loss: LossKind, rate: f64, trial: usize) -> Result<ConvergenceRow> {
    let (na, nt) = (spec.n_aux_items, spec.n_target_items);
    // The map, probe set, initial weights and clean user stream depend only on
    // the trial, so every (loss, rate) cell sees the same draws.
    let base = spec.seed.wrapping_mul(1_000_003).wrapping_add(trial as u64);
    let mut setup = stream(base, 0);
    let map = Array2::from_shape_fn((nt, na), |_| setup.random::<f64>());
    let px = Array2::from_shape_fn((spec.probe_users, na), |_| {
        spec.aux_mean + setup.sample::<f64, _>(StandardNormal)
    });
    let py = px.dot(&map.t());
    let mut y_norm = Array2::zeros(py.dim());
    for (i, row) in py.rows().into_iter().enumerate() {
        let n = normalize_row(row).ok_or(Error::ConstantRow {
            row: i,
            kind: crate::error::RowKind::Target,
        })?;
        y_norm.row_mut(i).assign(&Array1::from(n));
    }
    let probe = Probe { x: px, y: py, y_norm };
    let mut w = Array2::from_shape_fn((nt, na), |_| spec.init_sd * setup.sample::<f64, _>(StandardNormal));

    let mut clean = stream(base, 1);
    let mut outliers = stream(base, 2);
    let lr = spec.learning_rates.get(loss)?;
    let threshold = spec.thresholds.get(loss)?;
    let row = |steps, converged| ConvergenceRow {
        loss,
        outlier_rate: rate,
        trial,
        steps,
        converged,
    };

    for step in 0..=spec.max_steps {
        if step % spec.probe_every == 0 || step == spec.max_steps {
            let l = probe_loss(loss, &w, &probe);
            if !l.is_finite() {
                return Ok(row(spec.max_steps, false));
            }
            if l < threshold {
                return Ok(row(step, true));
            }
        }
        if step == spec.max_steps {
            break;
        }
        let x = gaussian_row(&mut clean, na, spec.aux_mean);
        let y = map.dot(&x);
        sgd_user_step(loss, &mut w, &x, y.as_slice().expect("contiguous"), lr)?;
        if rate > 0.0 && outliers.random::<f64>() < rate {
            let x = gaussian_row(&mut outliers, na, spec.aux_mean) * spec.outlier_magnitude;
            let y: Vec<f64> = (0..nt).map(|_| outliers.random::<f64>()).collect();
            match sgd_user_step(loss, &mut w, &x, &y, lr) {
                Ok(()) | Err(Error::ConstantRow { .. }) => {}
                Err(e) => return Err(e),
            }
        }
        if !w.iter().all(|v| v.is_finite()) {
            return Ok(row(spec.max_steps, false));
        }
    }
    Ok(row(spec.max_steps, false))
}

/// Rows ordered by (loss, outlier rate, trial) as listed in the spec.
pub fn run_convergence(spec: &ConvergenceSpec) -> Result<Vec<ConvergenceRow>> {
    spec.validate()?;
    let cells: Vec<(LossKind, f64, usize)> = spec
        .losses
        .iter()
        .flat_map(|&l| {
            spec.outlier_rates
                .iter()
                .flat_map(move |&p| (0..spec.trials).map(move |t| (l, p, t)))
        })
        .collect();
    cells
        .par_iter()
        .map(|&(l, p, t)| convergence_trial(spec, l, p, t))
        .collect()
}

pub fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Median steps per (loss, rate), censored trials counted at `max_steps`.
pub fn convergence_medians(rows: &[ConvergenceRow]) -> Vec<(LossKind, f64, f64)> {
    let mut keys: Vec<(LossKind, f64)> = Vec::new();
    for r in rows {
        if !keys.iter().any(|&(l, p)| l == r.loss && p == r.outlier_rate) {
            keys.push((r.loss, r.outlier_rate));
        }
    }
    keys.into_iter()
        .map(|(l, p)| {
            let mut steps: Vec<f64> = rows
                .iter()
                .filter(|r| r.loss == l && r.outlier_rate == p)
                .map(|r| r.steps as f64)
                .collect();
            (l, p, median(&mut steps))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SampleErrSpec {
    pub n_items_population: usize,
    pub sample_sizes: Vec<usize>,
    pub trials: usize,
    pub seed: u64,
}

impl Default for SampleErrSpec {
    fn default() -> Self {
        Self {
            n_items_population: 5000,
            sample_sizes: vec![10, 50, 100, 500, 1000],
            trials: 1000,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SampleErrRow {
    pub sample_size: usize,
    pub corr_mse: f64,
    pub grad_mse: f64,
}

fn uniform_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random::<f64>()).collect()
}

/// Draws a sample whose predictions and targets both vary.
fn varying_sample(rng: &mut ChaCha8Rng, p: &[f64], y: &[f64], size: usize) -> (Vec<usize>, Vec<f64>, Vec<f64>) {
    loop {
        let s = sample_distinct(rng, p.len(), size);
        let ps: Vec<f64> = s.iter().map(|&j| p[j]).collect();
        let ys: Vec<f64> = s.iter().map(|&j| y[j]).collect();
        let varies = |v: &[f64]| v.iter().any(|&x| x != v[0]);
        if varies(&ps) && varies(&ys) {
            return (s, ps, ys);
        }
    }
}

/// Gradients are compared in count-scaled units: the sampled gradient times
/// the sample size against the population gradient times the population size.
pub fn run_sample_error(spec: &SampleErrSpec) -> Result<Vec<SampleErrRow>> {
    let n = spec.n_items_population;
    if n < 2 || spec.trials == 0 {
        return Err(Error::InvalidConfig("need a population of at least 2 and 1 trial".into()));
    }
    if let Some(&s) = spec.sample_sizes.iter().find(|&&s| s < 2 || s > n) {
        return Err(Error::InvalidConfig(format!("sample size {s} is outside [2, {n}]")));
    }
    let k = spec.sample_sizes.len();
    let per_trial: Vec<Vec<(f64, f64)>> = (0..spec.trials)
        .into_par_iter()
        .map(|t| {
            let mut rng = stream(spec.seed, t as u64);
            let p = uniform_vec(&mut rng, n);
            let y = uniform_vec(&mut rng, n);
            let (rho, g) = correlation_with_grad(&p, &y)?;
            spec.sample_sizes
                .iter()
                .map(|&size| {
                    let (s, ps, ys) = varying_sample(&mut rng, &p, &y, size);
                    let (rho_s, gs) = correlation_with_grad(&ps, &ys)?;
                    let grad_se = s
                        .iter()
                        .zip(&gs)
                        .map(|(&j, &gj)| (size as f64 * gj - n as f64 * g[j]).powi(2))
                        .sum::<f64>()
                        / size as f64;
                    Ok(((rho_s - rho).powi(2), grad_se))
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    Ok((0..k)
        .map(|i| {
            let (c, g) = per_trial
                .iter()
                .fold((0.0, 0.0), |(c, g), r| (c + r[i].0, g + r[i].1));
            SampleErrRow {
                sample_size: spec.sample_sizes[i],
                corr_mse: c / spec.trials as f64,
                grad_mse: g / spec.trials as f64,
            }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BiasDecaySpec {
    pub n_items: usize,
    pub sizes: Vec<usize>,
    pub trials: usize,
    pub seed: u64,
}

impl Default for BiasDecaySpec {
    fn default() -> Self {
        Self {
            n_items: 50,
            sizes: vec![5, 10, 25],
            trials: 10_000,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BiasDecayRow {
    pub sample_size: usize,
    pub bias_norm: f64,
}

/// Bias of the sampled correlation gradient as an estimator of the full one.
///
/// On a sampled coordinate the estimate is the sampled gradient converted to
/// population units (× size / n_items) and divided by the inclusion
/// probability (size / n_items); the two factors cancel. Unsampled
/// coordinates contribute 0.
pub fn run_bias_decay(spec: &BiasDecaySpec) -> Result<Vec<BiasDecayRow>> {
    let n = spec.n_items;
    if spec.trials == 0 {
        return Err(Error::InvalidConfig("need at least 1 trial".into()));
    }
    if let Some(&s) = spec.sizes.iter().find(|&&s| s < 2 || s > n) {
        return Err(Error::InvalidConfig(format!("sample size {s} is outside [2, {n}]")));
    }
    let mut rng = stream(spec.seed, 0);
    let p = uniform_vec(&mut rng, n);
    let y = uniform_vec(&mut rng, n);
    let (_, g) = correlation_with_grad(&p, &y)?;
    spec.sizes
        .par_iter()
        .enumerate()
        .map(|(i, &size)| {
            let mut rng = stream(spec.seed, 1 + i as u64);
            let mut sum = vec![0.0; n];
            for _ in 0..spec.trials {
                let (s, ps, ys) = varying_sample(&mut rng, &p, &y, size);
                let (_, gs) = correlation_with_grad(&ps, &ys)?;
                for (&j, gj) in s.iter().zip(gs) {
                    sum[j] += gj;
                }
            }
            let bias = sum
                .iter()
                .zip(&g)
                .map(|(s, gj)| (s / spec.trials as f64 - gj).powi(2))
                .sum::<f64>()
                .sqrt();
            Ok(BiasDecayRow {
                sample_size: size,
                bias_norm: bias,
            })
        })
        .collect()
}

/// Least-squares slope of `ln y` on `ln x`.
pub fn log_log_slope(points: &[(f64, f64)]) -> f64 {
    let pts: Vec<(f64, f64)> = points.iter().map(|&(x, y)| (x.ln(), y.ln())).collect();
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    sxy / sxx
}

pub const CONVERGENCE_HEADER: &str = "loss,outlier_rate,trial,steps,converged";
pub const SAMPLE_ERROR_HEADER: &str = "sample_size,corr_mse,grad_mse";
pub const BIAS_DECAY_HEADER: &str = "sample_size,bias_norm";

fn write_lines(path: &Path, header: &str, lines: impl Iterator<Item = String>) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "{header}")?;
    for l in lines {
        writeln!(w, "{l}")?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_convergence_csv(path: &Path, rows: &[ConvergenceRow]) -> Result<()> {
    write_lines(
        path,
        CONVERGENCE_HEADER,
        rows.iter().map(|r| {
            format!("{},{},{},{},{}", r.loss, r.outlier_rate, r.trial, r.steps, r.converged)
        }),
    )
}

pub fn write_sample_error_csv(path: &Path, rows: &[SampleErrRow]) -> Result<()> {
    write_lines(
        path,
        SAMPLE_ERROR_HEADER,
        rows.iter().map(|r| format!("{},{},{}", r.sample_size, r.corr_mse, r.grad_mse)),
    )
}

pub fn write_bias_decay_csv(path: &Path, rows: &[BiasDecayRow]) -> Result<()> {
    write_lines(
        path,
        BIAS_DECAY_HEADER,
        rows.iter().map(|r| format!("{},{}", r.sample_size, r.bias_norm)),
    )
}

/// Column descriptions for the experiment CSVs, one block per file.
pub fn describe() -> &'static str {
    "\
# convergence.csv
#   1 loss          user-norm-mse | user-norm-rmse | per-user-corr
#   2 outlier_rate  probability of an outlier step after each clean step
#   3 trial         trial index
#   4 steps         clean steps until the probe loss fell below threshold
#   5 converged     false when censored at max_steps (divergence included)
#   plot: median of column 4 against column 2, one series per column 1
# sample_error.csv
#   1 sample_size   items in the sample
#   2 corr_mse      mean squared error of the sampled correlation
#   3 grad_mse      mean squared error of the count-scaled sampled gradient
#   plot: columns 2 and 3 against column 1, log y axis
# bias_decay.csv
#   1 sample_size   items in the sample
#   2 bias_norm     norm of mean sampled gradient minus full gradient
#   plot: column 2 against column 1, log-log axes
"
}
