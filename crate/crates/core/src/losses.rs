//! Training objectives over a block of predictions `P` and targets `Y`.
//!
//! Rows are users and columns are items. Every loss returns its value and
//! `dL/dP` with the block's shape.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result, RowKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    Mse,
    UserNormMse,
    UserNormRmse,
    Bpr,
    PerUserCorr,
    SampleCorr,
}

impl LossKind {
    pub const ALL: [LossKind; 6] = [
        LossKind::Mse,
        LossKind::UserNormMse,
        LossKind::UserNormRmse,
        LossKind::Bpr,
        LossKind::PerUserCorr,
        LossKind::SampleCorr,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            LossKind::Mse => "mse",
            LossKind::UserNormMse => "user-norm-mse",
            LossKind::UserNormRmse => "user-norm-rmse",
            LossKind::Bpr => "bpr",
            LossKind::PerUserCorr => "per-user-corr",
            LossKind::SampleCorr => "sample-corr",
        }
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        LossKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s || k.as_str().replace('-', "_") == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown loss {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossValueAndGrad {
    pub value: f64,
    pub dp: Array2<f64>,
}

fn check_shapes(p: &Array2<f64>, y: &Array2<f64>) -> Result<()> {
    if p.dim() != y.dim() {
        return Err(Error::Shape(format!(
            "predictions are {:?} but targets are {:?}",
            p.dim(),
            y.dim()
        )));
    }
    Ok(())
}

/// `Σ_ij (P_ij − Y_ij)²`
pub fn mse_loss(p: &Array2<f64>, y: &Array2<f64>) -> Result<LossValueAndGrad> {
    check_shapes(p, y)?;
    let diff = p - y;
    let value = diff.iter().map(|d| d * d).sum();
    Ok(LossValueAndGrad {
        value,
        dp: diff * 2.0,
    })
}

/// `(y − ȳ) / ‖y − ȳ‖`, or `None` when `y` is constant.
pub fn normalize_row(y: ArrayView1<'_, f64>) -> Option<Vec<f64>> {
    let n = y.len() as f64;
    let mean = y.sum() / n;
    let centered: Vec<f64> = y.iter().map(|v| v - mean).collect();
    let norm = centered.iter().map(|v| v * v).sum::<f64>().sqrt();
    (norm > 0.0).then(|| centered.into_iter().map(|v| v / norm).collect())
}

/// User-normalized MSE: mean over users of `(1/N_I) Σ_j (P_ij − Ŷ_ij)²`.
///
/// With `rooted` each squared term is replaced by its square root, i.e. the
/// absolute deviation; the subgradient at `P_ij = Ŷ_ij` is 0.
pub fn user_norm_mse_loss(
    p: &Array2<f64>,
    y: &Array2<f64>,
    rooted: bool,
) -> Result<LossValueAndGrad> {
    check_shapes(p, y)?;
    let (n_users, n_items) = p.dim();
    let scale = 1.0 / (n_users as f64 * n_items as f64);
    let mut dp = Array2::zeros(p.dim());
    let mut value = 0.0;
    for i in 0..n_users {
        let yhat = normalize_row(y.row(i)).ok_or(Error::ConstantRow {
            row: i,
            kind: RowKind::Target,
        })?;
        for j in 0..n_items {
            let r = p[[i, j]] - yhat[j];
            if rooted {
                value += r.abs() * scale;
                dp[[i, j]] = if r > 0.0 {
                    scale
                } else if r < 0.0 {
                    -scale
                } else {
                    0.0
                };
            } else {
                value += r * r * scale;
                dp[[i, j]] = 2.0 * r * scale;
            }
        }
    }
    Ok(LossValueAndGrad { value, dp })
}

/// `ln(1 + e^{−x})`, stable for large `|x|`.
fn neg_log_sigmoid(x: f64) -> f64 {
    if x > 0.0 {
        (-x).exp().ln_1p()
    } else {
        -x + x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// BPR for one user: `Σ_(j1, j2) −ln σ(P_j2 − P_j1)`; every pair must satisfy `Y_j2 > Y_j1`.
///
/// Returns the value and the gradient with respect to the row.
pub fn bpr_loss(p_row: &[f64], y_row: &[f64], pairs: &[(usize, usize)]) -> Result<(f64, Vec<f64>)> {
    if p_row.len() != y_row.len() {
        return Err(Error::Shape("prediction and target rows differ in length".into()));
    }
    let mut grad = vec![0.0; p_row.len()];
    let mut value = 0.0;
    for &(j1, j2) in pairs {
        if j1 >= p_row.len() || j2 >= p_row.len() {
            return Err(Error::InvalidInput(format!("pair ({j1}, {j2}) is out of range")));
        }
        if !(y_row[j2] > y_row[j1]) {
            return Err(Error::InvalidInput(format!(
                "pair ({j1}, {j2}) is not ordered by affinity ({} vs {})",
                y_row[j1], y_row[j2]
            )));
        }
        let x = p_row[j2] - p_row[j1];
        value += neg_log_sigmoid(x);
        let g = sigmoid(-x);
        grad[j2] -= g;
        grad[j1] += g;
    }
    Ok((value, grad))
}

/// BPR over a block; the total is averaged over all pairs.
pub fn bpr_block_loss(
    p: &Array2<f64>,
    y: &Array2<f64>,
    pairs: &[Vec<(usize, usize)>],
) -> Result<LossValueAndGrad> {
    check_shapes(p, y)?;
    if pairs.len() != p.nrows() {
        return Err(Error::Shape("one pair list per user is required".into()));
    }
    let total: usize = pairs.iter().map(Vec::len).sum();
    let mut dp = Array2::zeros(p.dim());
    if total == 0 {
        return Ok(LossValueAndGrad { value: 0.0, dp });
    }
    let scale = 1.0 / total as f64;
    let mut value = 0.0;
    for (i, user_pairs) in pairs.iter().enumerate() {
        let p_row = p.row(i).to_vec();
        let y_row = y.row(i).to_vec();
        let (v, g) = bpr_loss(&p_row, &y_row, user_pairs)?;
        value += v * scale;
        for (j, gj) in g.into_iter().enumerate() {
            dp[[i, j]] = gj * scale;
        }
    }
    Ok(LossValueAndGrad { value, dp })
}

/// Centered sums of one (prediction, target) row pair.
#[derive(Debug, Clone, Copy)]
struct Moments {
    p_mean: f64,
    y_mean: f64,
    spp: f64,
    syy: f64,
    spy: f64,
}

fn moments(p: &[f64], y: &[f64]) -> Moments {
    let n = p.len() as f64;
    let p_mean = p.iter().sum::<f64>() / n;
    let y_mean = y.iter().sum::<f64>() / n;
    let (mut spp, mut syy, mut spy) = (0.0, 0.0, 0.0);
    for (a, b) in p.iter().zip(y) {
        let (dp, dy) = (a - p_mean, b - y_mean);
        spp += dp * dp;
        syy += dy * dy;
        spy += dp * dy;
    }
    Moments {
        p_mean,
        y_mean,
        spp,
        syy,
        spy,
    }
}

/// Sample Pearson correlation of two equal-length rows.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::Shape("pearson needs two rows of equal length ≥ 2".into()));
    }
    let m = moments(x, y);
    if m.spp == 0.0 {
        return Err(Error::ConstantRow {
            row: 0,
            kind: RowKind::Prediction,
        });
    }
    if m.syy == 0.0 {
        return Err(Error::ConstantRow {
            row: 0,
            kind: RowKind::Target,
        });
    }
    Ok((m.spy / (m.spp * m.syy).sqrt()).clamp(-1.0, 1.0))
}

/// Correlation of one row pair and its gradient with respect to `p`:
/// `∂corr/∂P_j = [(Y_j − Ȳ) − (S_PY/S_PP)(P_j − P̄)] / √(S_PP S_YY)`.
pub fn correlation_with_grad(p: &[f64], y: &[f64]) -> Result<(f64, Vec<f64>)> {
    if p.len() != y.len() || p.len() < 2 {
        return Err(Error::Shape("correlation needs rows of equal length ≥ 2".into()));
    }
    let m = moments(p, y);
    if m.spp == 0.0 {
        return Err(Error::ConstantRow {
            row: 0,
            kind: RowKind::Prediction,
        });
    }
    if m.syy == 0.0 {
        return Err(Error::ConstantRow {
            row: 0,
            kind: RowKind::Target,
        });
    }
    let denom = (m.spp * m.syy).sqrt();
    let beta = m.spy / m.spp;
    let grad = p
        .iter()
        .zip(y)
        .map(|(a, b)| ((b - m.y_mean) - beta * (a - m.p_mean)) / denom)
        .collect();
    Ok((m.spy / denom, grad))
}

fn correlation_block(p: &Array2<f64>, y: &Array2<f64>) -> Result<LossValueAndGrad> {
    check_shapes(p, y)?;
    let (n_users, n_items) = p.dim();
    if n_items < 2 {
        return Err(Error::Shape("correlation losses need at least 2 items".into()));
    }
    let scale = 1.0 / n_users as f64;
    let mut dp = Array2::zeros(p.dim());
    let mut value = 0.0;
    for i in 0..n_users {
        let p_row = p.row(i).to_vec();
        let y_row = y.row(i).to_vec();
        let (corr, grad) = correlation_with_grad(&p_row, &y_row).map_err(|e| match e {
            Error::ConstantRow { kind, .. } => Error::ConstantRow { row: i, kind },
            other => other,
        })?;
        value += (1.0 - corr) * scale;
        for (j, g) in grad.into_iter().enumerate() {
            dp[[i, j]] = -scale * g;
        }
    }
    Ok(LossValueAndGrad { value, dp })
}

/// `(1/N_U) Σ_i (1 − corr(P_i, Y_i))` over full item rows.
pub fn per_user_corr_loss(p: &Array2<f64>, y: &Array2<f64>) -> Result<LossValueAndGrad> {
    correlation_block(p, y)
}

/// The correlation loss over a sampled (users × items) block.
///
/// Uses exactly the same arithmetic as [`per_user_corr_loss`] and touches
/// nothing outside the block. A row that is constant on the sampled items
/// yields [`Error::ConstantRow`] naming its block row, which the trainer
/// treats as a signal to resample that user.
pub fn sample_corr_loss(p: &Array2<f64>, y: &Array2<f64>) -> Result<LossValueAndGrad> {
    correlation_block(p, y)
}
