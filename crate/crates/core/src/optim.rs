//! First-order optimizers over [`ModelParams`].
//!
//! Row-sparse gradients (embedding tables, biases) update only the rows they
//! carry, so a step's cost never depends on the size of an item table. Adam
//! keeps its moment estimates per element and, for sparse rows, advances them
//! only when a row is touched.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{GradView, ModelParams, ParamGradients, ParamSlot};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Default for OptimizerKind {
    fn default() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl OptimizerKind {
    pub fn validate(&self) -> Result<()> {
        if let OptimizerKind::Adam { beta1, beta2, eps } = *self {
            if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) || !(eps > 0.0) {
                return Err(Error::InvalidConfig(
                    "adam needs beta1, beta2 in [0, 1) and eps > 0".into(),
                ));
            }
        }
        Ok(())
    }
}

/// First and second moment estimates for one tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct UpdateStats {
    /// Rows of the target embedding table that were written.
    pub target_rows_written: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Optimizer {
    kind: OptimizerKind,
    t: u64,
    moments: BTreeMap<ParamSlot, Moments>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, params: &ModelParams) -> Self {
        let moments = match kind {
            OptimizerKind::Sgd => BTreeMap::new(),
            OptimizerKind::Adam { .. } => params
                .slots()
                .into_iter()
                .map(|s| {
                    let n = params.slot(s).len();
                    (
                        s,
                        Moments {
                            m: vec![0.0; n],
                            v: vec![0.0; n],
                        },
                    )
                })
                .collect(),
        };
        Self { kind, t: 0, moments }
    }

    /// Rebuilds an optimizer from saved state.
    pub fn from_state(
        kind: OptimizerKind,
        t: u64,
        moments: BTreeMap<ParamSlot, Moments>,
        params: &ModelParams,
    ) -> Result<Self> {
        if let OptimizerKind::Adam { .. } = kind {
            for s in params.slots() {
                let n = params.slot(s).len();
                match moments.get(&s) {
                    Some(mo) if mo.m.len() == n && mo.v.len() == n => {}
                    _ => {
                        return Err(Error::Checkpoint(format!(
                            "optimizer state for {} is missing or has the wrong size",
                            s.name()
                        )))
                    }
                }
            }
        }
        Ok(Self { kind, t, moments })
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    /// Number of updates applied so far.
    pub fn step_count(&self) -> u64 {
        self.t
    }

    pub fn moments(&self) -> &BTreeMap<ParamSlot, Moments> {
        &self.moments
    }

    /// Applies one update with coupled L2: each decaying element's gradient
    /// gets `l2 · θ` added before the update. Embedding rows absent from the
    /// gradient are neither decayed nor moved.
    pub fn step(
        &mut self,
        params: &mut ModelParams,
        grads: &ParamGradients,
        learning_rate: f64,
        l2: f64,
    ) -> UpdateStats {
        self.t += 1;
        let mut stats = UpdateStats::default();
        let (bc1, bc2) = match self.kind {
            OptimizerKind::Sgd => (1.0, 1.0),
            OptimizerKind::Adam { beta1, beta2, .. } => {
                let t = self.t.min(i32::MAX as u64) as i32;
                (1.0 - beta1.powi(t), 1.0 - beta2.powi(t))
            }
        };
        for slot in params.slots() {
            let decay = if slot.decays() { l2 } else { 0.0 };
            let theta = params.slot_mut(slot);
            let mut moments = self.moments.get_mut(&slot);
            let kind = self.kind;
            let mut update = |idx: usize, g: f64| {
                let g = g + decay * theta[idx];
                match kind {
                    OptimizerKind::Sgd => theta[idx] -= learning_rate * g,
                    OptimizerKind::Adam { beta1, beta2, eps } => {
                        let mo = moments.as_mut().expect("adam state");
                        let m = beta1 * mo.m[idx] + (1.0 - beta1) * g;
                        let v = beta2 * mo.v[idx] + (1.0 - beta2) * g * g;
                        mo.m[idx] = m;
                        mo.v[idx] = v;
                        theta[idx] -= learning_rate * (m / bc1) / ((v / bc2).sqrt() + eps);
                    }
                }
            };
            match grads.slot(slot) {
                GradView::Dense(g) => {
                    for (i, &gi) in g.iter().enumerate() {
                        update(i, gi);
                    }
                }
                GradView::Rows {
                    rows,
                    width,
                    values,
                } => {
                    for (r, &row) in rows.iter().enumerate() {
                        for k in 0..width {
                            update(row * width + k, values[r * width + k]);
                        }
                    }
                    if slot == ParamSlot::TargetEmbeddings {
                        stats.target_rows_written += rows.len();
                    }
                }
            }
        }
        stats
    }
}
