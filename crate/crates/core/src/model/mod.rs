//! The co-embedding model.
//!
//! A user's auxiliary embedding is the count-weighted sum of the embeddings
//! of the auxiliary items they interacted with. A feed-forward network maps it
//! into the target space, where a similarity against each target item
//! embedding predicts the user's affinity for that item.
//!
//! Hidden layers apply `affine → batch-norm (optional) → relu → dropout`.
//! The final layer is a plain affine map so embeddings can take any sign.

mod export;
mod similarity;

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

pub use export::{write_embeddings_tsv, EmbeddingSidecar};
pub use similarity::{similarity, SimilarityKind};

use crate::dataset::SparseRow;
use crate::error::{Error, Result};

/// Architecture and shape of a model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_aux_items: usize,
    pub n_target_items: usize,
    /// Number of users with a learned bias; only used when `user_bias` is set.
    pub n_users: usize,
    pub d_aux: usize,
    pub d: usize,
    pub hidden_sizes: Vec<usize>,
    pub batch_norm: bool,
    /// When false the last hidden width (or `d_aux`) must equal `d` and the
    /// network ends at the last hidden activation.
    pub output_layer: bool,
    pub similarity: SimilarityKind,
    pub user_bias: bool,
    pub item_bias: bool,
    pub bn_momentum: f64,
    pub bn_eps: f64,
}

impl ModelConfig {
    /// A config with the given table sizes, `d_aux = d = 300`, and a linear transformation.
    pub fn new(n_aux_items: usize, n_target_items: usize) -> Self {
        Self {
            n_aux_items,
            n_target_items,
            n_users: 0,
            d_aux: 300,
            d: 300,
            hidden_sizes: Vec::new(),
            batch_norm: false,
            output_layer: true,
            similarity: SimilarityKind::Cosine,
            user_bias: false,
            item_bias: false,
            bn_momentum: 0.9,
            bn_eps: 1e-5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.n_aux_items == 0 || self.n_target_items == 0 {
            return bad("item tables must be nonempty".into());
        }
        if self.d_aux == 0 || self.d == 0 || self.hidden_sizes.contains(&0) {
            return bad("embedding and hidden sizes must be positive".into());
        }
        let last = self.hidden_sizes.last().copied().unwrap_or(self.d_aux);
        if !self.output_layer && last != self.d {
            return bad(format!(
                "without an output layer the last width ({last}) must equal d ({})",
                self.d
            ));
        }
        if self.user_bias && self.n_users == 0 {
            return bad("user biases need n_users > 0".into());
        }
        if !(0.0..1.0).contains(&self.bn_momentum) || !(self.bn_eps > 0.0) {
            return bad("batch-norm momentum must lie in [0, 1) and eps be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Affine {
    /// `fan_in × fan_out`
    pub weight: Array2<f64>,
    /// Omitted when the layer is followed by batch normalization.
    pub bias: Option<Array1<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub scale: Array1<f64>,
    pub shift: Array1<f64>,
    pub running_mean: Array1<f64>,
    pub running_var: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HiddenLayer {
    pub affine: Affine,
    pub norm: Option<BatchNorm>,
}

/// All learned tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    /// `n_aux_items × d_aux`
    pub aux_embeddings: Array2<f64>,
    /// `n_target_items × d`
    pub target_embeddings: Array2<f64>,
    pub hidden: Vec<HiddenLayer>,
    pub output: Option<Affine>,
    pub user_bias: Option<Array1<f64>>,
    pub item_bias: Option<Array1<f64>>,
}

/// Identifies one trainable tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamSlot {
    AuxEmbeddings,
    TargetEmbeddings,
    HiddenWeight(usize),
    HiddenBias(usize),
    NormScale(usize),
    NormShift(usize),
    OutputWeight,
    OutputBias,
    UserBias,
    ItemBias,
}

impl ParamSlot {
    /// Whether L2 weight decay applies to this tensor.
    pub fn decays(self) -> bool {
        matches!(
            self,
            ParamSlot::AuxEmbeddings
                | ParamSlot::TargetEmbeddings
                | ParamSlot::HiddenWeight(_)
                | ParamSlot::OutputWeight
        )
    }

    pub fn name(self) -> String {
        match self {
            ParamSlot::AuxEmbeddings => "aux_embeddings".into(),
            ParamSlot::TargetEmbeddings => "target_embeddings".into(),
            ParamSlot::HiddenWeight(l) => format!("hidden.{l}.weight"),
            ParamSlot::HiddenBias(l) => format!("hidden.{l}.bias"),
            ParamSlot::NormScale(l) => format!("hidden.{l}.norm.scale"),
            ParamSlot::NormShift(l) => format!("hidden.{l}.norm.shift"),
            ParamSlot::OutputWeight => "output.weight".into(),
            ParamSlot::OutputBias => "output.bias".into(),
            ParamSlot::UserBias => "user_bias".into(),
            ParamSlot::ItemBias => "item_bias".into(),
        }
    }
}

fn slice1(a: &Array1<f64>) -> &[f64] {
    a.as_slice().expect("contiguous")
}
fn slice2(a: &Array2<f64>) -> &[f64] {
    a.as_slice().expect("contiguous")
}
fn slice1_mut(a: &mut Array1<f64>) -> &mut [f64] {
    a.as_slice_mut().expect("contiguous")
}
fn slice2_mut(a: &mut Array2<f64>) -> &mut [f64] {
    a.as_slice_mut().expect("contiguous")
}

impl ModelParams {
    /// Trainable tensors in a fixed order.
    pub fn slots(&self) -> Vec<ParamSlot> {
        let mut out = vec![ParamSlot::AuxEmbeddings, ParamSlot::TargetEmbeddings];
        for (l, layer) in self.hidden.iter().enumerate() {
            out.push(ParamSlot::HiddenWeight(l));
            if layer.affine.bias.is_some() {
                out.push(ParamSlot::HiddenBias(l));
            }
            if layer.norm.is_some() {
                out.push(ParamSlot::NormScale(l));
                out.push(ParamSlot::NormShift(l));
            }
        }
        if let Some(out_layer) = &self.output {
            out.push(ParamSlot::OutputWeight);
            if out_layer.bias.is_some() {
                out.push(ParamSlot::OutputBias);
            }
        }
        if self.user_bias.is_some() {
            out.push(ParamSlot::UserBias);
        }
        if self.item_bias.is_some() {
            out.push(ParamSlot::ItemBias);
        }
        out
    }

    /// Row width for row-sparse tensors (embeddings and biases); `None` for dense ones.
    pub fn row_width(&self, slot: ParamSlot) -> Option<usize> {
        match slot {
            ParamSlot::AuxEmbeddings => Some(self.aux_embeddings.ncols()),
            ParamSlot::TargetEmbeddings => Some(self.target_embeddings.ncols()),
            ParamSlot::UserBias | ParamSlot::ItemBias => Some(1),
            _ => None,
        }
    }

    pub fn slot(&self, slot: ParamSlot) -> &[f64] {
        match slot {
            ParamSlot::AuxEmbeddings => slice2(&self.aux_embeddings),
            ParamSlot::TargetEmbeddings => slice2(&self.target_embeddings),
            ParamSlot::HiddenWeight(l) => slice2(&self.hidden[l].affine.weight),
            ParamSlot::HiddenBias(l) => slice1(self.hidden[l].affine.bias.as_ref().unwrap()),
            ParamSlot::NormScale(l) => slice1(&self.hidden[l].norm.as_ref().unwrap().scale),
            ParamSlot::NormShift(l) => slice1(&self.hidden[l].norm.as_ref().unwrap().shift),
            ParamSlot::OutputWeight => slice2(&self.output.as_ref().unwrap().weight),
            ParamSlot::OutputBias => slice1(self.output.as_ref().unwrap().bias.as_ref().unwrap()),
            ParamSlot::UserBias => slice1(self.user_bias.as_ref().unwrap()),
            ParamSlot::ItemBias => slice1(self.item_bias.as_ref().unwrap()),
        }
    }

    pub fn slot_mut(&mut self, slot: ParamSlot) -> &mut [f64] {
        match slot {
            ParamSlot::AuxEmbeddings => slice2_mut(&mut self.aux_embeddings),
            ParamSlot::TargetEmbeddings => slice2_mut(&mut self.target_embeddings),
            ParamSlot::HiddenWeight(l) => slice2_mut(&mut self.hidden[l].affine.weight),
            ParamSlot::HiddenBias(l) => slice1_mut(self.hidden[l].affine.bias.as_mut().unwrap()),
            ParamSlot::NormScale(l) => slice1_mut(&mut self.hidden[l].norm.as_mut().unwrap().scale),
            ParamSlot::NormShift(l) => slice1_mut(&mut self.hidden[l].norm.as_mut().unwrap().shift),
            ParamSlot::OutputWeight => slice2_mut(&mut self.output.as_mut().unwrap().weight),
            ParamSlot::OutputBias => {
                slice1_mut(self.output.as_mut().unwrap().bias.as_mut().unwrap())
            }
            ParamSlot::UserBias => slice1_mut(self.user_bias.as_mut().unwrap()),
            ParamSlot::ItemBias => slice1_mut(self.item_bias.as_mut().unwrap()),
        }
    }

    /// True when every tensor (including running statistics) is finite.
    pub fn all_finite(&self) -> bool {
        let stats_ok = self.hidden.iter().all(|l| {
            l.norm.as_ref().is_none_or(|n| {
                n.running_mean.iter().all(|v| v.is_finite())
                    && n.running_var.iter().all(|&v| v.is_finite() && v > 0.0)
            })
        });
        stats_ok && self.slots().into_iter().all(|s| self.slot(s).iter().all(|v| v.is_finite()))
    }
}

/// Training forward passes use batch statistics and dropout; inference uses
/// running statistics and no dropout.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Inference,
}

#[derive(Debug, Clone, Copy)]
pub struct ForwardOptions {
    pub mode: Mode,
    pub dropout: f64,
    /// Seeds the dropout masks.
    pub seed: u64,
}

impl ForwardOptions {
    pub fn inference() -> Self {
        Self {
            mode: Mode::Inference,
            dropout: 0.0,
            seed: 0,
        }
    }

    pub fn train(dropout: f64, seed: u64) -> Self {
        Self {
            mode: Mode::Train,
            dropout,
            seed,
        }
    }
}

#[derive(Debug, Clone)]
struct LayerTrace {
    input: Array2<f64>,
    /// Batch-normalized pre-activations and the inverse std used for them.
    normalized: Option<(Array2<f64>, Array1<f64>)>,
    batch_mean: Option<Array1<f64>>,
    batch_var: Option<Array1<f64>>,
    pre_activation: Array2<f64>,
    mask: Option<Array2<f64>>,
}

/// Intermediate values from one forward pass, consumed by [`Model::backward`].
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    mode: Mode,
    rows: Vec<SparseRow>,
    layers: Vec<LayerTrace>,
    output_input: Array2<f64>,
}

impl ForwardTrace {
    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn batch_size(&self) -> usize {
        self.rows.len()
    }
}

/// Forward trace extended through a prediction block.
#[derive(Debug, Clone)]
pub struct BlockTrace {
    pub forward: ForwardTrace,
    user_embeddings: Array2<f64>,
    users: Option<Vec<usize>>,
    items: Vec<usize>,
    item_embeddings: Array2<f64>,
}

impl BlockTrace {
    pub fn items(&self) -> &[usize] {
        &self.items
    }

    pub fn user_embeddings(&self) -> &Array2<f64> {
        &self.user_embeddings
    }
}

/// Gradient for a subset of rows of a table; `rows` is strictly increasing.
#[derive(Debug, Clone, PartialEq)]
pub struct RowGrads {
    pub rows: Vec<usize>,
    /// `rows.len() × width`
    pub values: Array2<f64>,
}

impl RowGrads {
    fn from_map(map: BTreeMap<usize, Vec<f64>>, width: usize) -> Self {
        let rows: Vec<usize> = map.keys().copied().collect();
        let mut values = Array2::zeros((rows.len(), width));
        for (r, v) in map.values().enumerate() {
            values.row_mut(r).assign(&ndarray::ArrayView1::from(v.as_slice()));
        }
        Self { rows, values }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AffineGrads {
    pub weight: Array2<f64>,
    pub bias: Option<Array1<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HiddenGrads {
    pub affine: AffineGrads,
    pub scale: Option<Array1<f64>>,
    pub shift: Option<Array1<f64>>,
}

/// Gradients of a scalar loss with respect to every parameter.
///
/// Embedding and bias tables are row-sparse: rows absent from a [`RowGrads`]
/// have zero gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGradients {
    pub aux: RowGrads,
    pub target: RowGrads,
    pub hidden: Vec<HiddenGrads>,
    pub output: Option<AffineGrads>,
    pub user_bias: Option<RowGrads>,
    pub item_bias: Option<RowGrads>,
}

/// A borrowed view of one gradient tensor.
pub enum GradView<'a> {
    Dense(&'a [f64]),
    Rows {
        rows: &'a [usize],
        width: usize,
        values: &'a [f64],
    },
}

impl ParamGradients {
    pub fn slot(&self, slot: ParamSlot) -> GradView<'_> {
        fn rows_fn(g: &RowGrads) -> GradView<'_> {
            GradView::Rows {
                rows: &g.rows,
                width: g.values.ncols(),
                values: slice2(&g.values),
            }
        }
        match slot {
            ParamSlot::AuxEmbeddings => rows_fn(&self.aux),
            ParamSlot::TargetEmbeddings => rows_fn(&self.target),
            ParamSlot::HiddenWeight(l) => GradView::Dense(slice2(&self.hidden[l].affine.weight)),
            ParamSlot::HiddenBias(l) => {
                GradView::Dense(slice1(self.hidden[l].affine.bias.as_ref().unwrap()))
            }
            ParamSlot::NormScale(l) => GradView::Dense(slice1(self.hidden[l].scale.as_ref().unwrap())),
            ParamSlot::NormShift(l) => GradView::Dense(slice1(self.hidden[l].shift.as_ref().unwrap())),
            ParamSlot::OutputWeight => GradView::Dense(slice2(&self.output.as_ref().unwrap().weight)),
            ParamSlot::OutputBias => {
                GradView::Dense(slice1(self.output.as_ref().unwrap().bias.as_ref().unwrap()))
            }
            ParamSlot::UserBias => rows_fn(self.user_bias.as_ref().unwrap()),
            ParamSlot::ItemBias => rows_fn(self.item_bias.as_ref().unwrap()),
        }
    }

    /// Dense copy of one gradient tensor with `len` elements.
    pub fn dense(&self, slot: ParamSlot, len: usize) -> Vec<f64> {
        match self.slot(slot) {
            GradView::Dense(v) => v.to_vec(),
            GradView::Rows {
                rows,
                width,
                values,
            } => {
                let mut out = vec![0.0; len];
                for (r, &row) in rows.iter().enumerate() {
                    out[row * width..(row + 1) * width]
                        .copy_from_slice(&values[r * width..(r + 1) * width]);
                }
                out
            }
        }
    }
}

/// Counts target-embedding row reads, for checking per-step cost.
#[derive(Debug, Default)]
pub struct AccessCounter(AtomicU64);

impl AccessCounter {
    pub fn get(&self) -> u64 {
        self.0.load(Ordering::Relaxed)
    }

    fn add(&self, n: usize) {
        self.0.fetch_add(n as u64, Ordering::Relaxed);
    }
}

impl Clone for AccessCounter {
    fn clone(&self) -> Self {
        Self(AtomicU64::new(self.get()))
    }
}

/// Model configuration plus parameters.
#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ModelParams,
    target_reads: AccessCounter,
}

impl PartialEq for Model {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.params == other.params
    }
}

impl Model {
    /// Embeddings uniform in `[−1/√dim, 1/√dim]`, weights He-normal, biases 0,
    /// batch-norm scale 1 and shift 0.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let uniform = |rng: &mut ChaCha8Rng, rows: usize, cols: usize| {
            let bound = 1.0 / (cols as f64).sqrt();
            Array2::from_shape_fn((rows, cols), |_| rng.random_range(-bound..=bound))
        };
        let he = |rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize| {
            let sd = (2.0 / fan_in as f64).sqrt();
            Array2::from_shape_fn((fan_in, fan_out), |_| sd * rng.sample::<f64, _>(StandardNormal))
        };
        let aux_embeddings = uniform(&mut rng, config.n_aux_items, config.d_aux);
        let target_embeddings = uniform(&mut rng, config.n_target_items, config.d);
        let mut hidden = Vec::with_capacity(config.hidden_sizes.len());
        let mut fan_in = config.d_aux;
        for &width in &config.hidden_sizes {
            let weight = he(&mut rng, fan_in, width);
            let (bias, norm) = if config.batch_norm {
                (
                    None,
                    Some(BatchNorm {
                        scale: Array1::ones(width),
                        shift: Array1::zeros(width),
                        running_mean: Array1::zeros(width),
                        running_var: Array1::ones(width),
                    }),
                )
            } else {
                (Some(Array1::zeros(width)), None)
            };
            hidden.push(HiddenLayer {
                affine: Affine { weight, bias },
                norm,
            });
            fan_in = width;
        }
        let output = config.output_layer.then(|| Affine {
            weight: he(&mut rng, fan_in, config.d),
            bias: Some(Array1::zeros(config.d)),
        });
        let params = ModelParams {
            aux_embeddings,
            target_embeddings,
            hidden,
            output,
            user_bias: config.user_bias.then(|| Array1::zeros(config.n_users)),
            item_bias: config.item_bias.then(|| Array1::zeros(config.n_target_items)),
        };
        Ok(Self::from_parts(config, params))
    }

    pub fn from_parts(config: ModelConfig, params: ModelParams) -> Self {
        Self {
            config,
            params,
            target_reads: AccessCounter::default(),
        }
    }

    /// Checks that parameter shapes agree with the config.
    pub fn check_shapes(&self) -> Result<()> {
        let c = &self.config;
        let p = &self.params;
        let mismatch = |what: &str| Err(Error::Shape(format!("{what} does not match the config")));
        if p.aux_embeddings.dim() != (c.n_aux_items, c.d_aux) {
            return mismatch("aux embedding table");
        }
        if p.target_embeddings.dim() != (c.n_target_items, c.d) {
            return mismatch("target embedding table");
        }
        if p.hidden.len() != c.hidden_sizes.len() {
            return mismatch("hidden layer count");
        }
        let mut fan_in = c.d_aux;
        for (layer, &w) in p.hidden.iter().zip(&c.hidden_sizes) {
            if layer.affine.weight.dim() != (fan_in, w) || layer.norm.is_some() != c.batch_norm {
                return mismatch("hidden layer");
            }
            fan_in = w;
        }
        match (&p.output, c.output_layer) {
            (Some(o), true) if o.weight.dim() == (fan_in, c.d) => {}
            (None, false) => {}
            _ => return mismatch("output layer"),
        }
        if p.user_bias.as_ref().map(|b| b.len()) != c.user_bias.then_some(c.n_users) {
            return mismatch("user bias");
        }
        if p.item_bias.as_ref().map(|b| b.len()) != c.item_bias.then_some(c.n_target_items) {
            return mismatch("item bias");
        }
        Ok(())
    }

    pub fn target_reads(&self) -> &AccessCounter {
        &self.target_reads
    }

    /// Count-weighted sum of auxiliary item embeddings over stored entries.
    pub fn user_aux_embedding(&self, row: &SparseRow) -> Result<Array1<f64>> {
        let mut out = Array1::zeros(self.config.d_aux);
        for (a, k) in row.iter() {
            if a >= self.config.n_aux_items {
                return Err(Error::InvalidInput(format!("auxiliary item {a} out of range")));
            }
            out.scaled_add(k, &self.params.aux_embeddings.row(a));
        }
        Ok(out)
    }

    /// Maps a batch of auxiliary rows to target-space user embeddings.
    pub fn forward(
        &self,
        rows: &[&SparseRow],
        opts: &ForwardOptions,
    ) -> Result<(Array2<f64>, ForwardTrace)> {
        if rows.is_empty() {
            return Err(Error::InvalidInput("forward needs a nonempty batch".into()));
        }
        let train = opts.mode == Mode::Train;
        if train && self.config.batch_norm && !self.params.hidden.is_empty() && rows.len() < 2 {
            return Err(Error::InvalidInput(
                "batch normalization needs at least 2 users per training batch".into(),
            ));
        }
        if !(0.0..1.0).contains(&opts.dropout) {
            return Err(Error::InvalidConfig("dropout must lie in [0, 1)".into()));
        }
        let mut h = Array2::zeros((rows.len(), self.config.d_aux));
        for (b, row) in rows.iter().enumerate() {
            h.row_mut(b).assign(&self.user_aux_embedding(row)?);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        let eps = self.config.bn_eps;
        let mut layers = Vec::with_capacity(self.params.hidden.len());
        for layer in &self.params.hidden {
            let mut z = h.dot(&layer.affine.weight);
            if let Some(b) = &layer.affine.bias {
                z += b;
            }
            let (pre, normalized, batch_mean, batch_var) = match &layer.norm {
                Some(bn) => {
                    let (mean, var) = if train {
                        let mean = z.mean_axis(Axis(0)).expect("nonempty");
                        let centered = &z - &mean;
                        let var = (&centered * &centered).mean_axis(Axis(0)).expect("nonempty");
                        (mean, var)
                    } else {
                        (bn.running_mean.clone(), bn.running_var.clone())
                    };
                    let inv_std = var.mapv(|v| 1.0 / (v + eps).sqrt());
                    let xhat = (&z - &mean) * &inv_std;
                    let y = &xhat * &bn.scale + &bn.shift;
                    let (bm, bv) = if train { (Some(mean), Some(var)) } else { (None, None) };
                    (y, Some((xhat, inv_std)), bm, bv)
                }
                None => (z, None, None, None),
            };
            let mut act = pre.mapv(|v| v.max(0.0));
            let mask = if train && opts.dropout > 0.0 {
                let keep = 1.0 - opts.dropout;
                let m = Array2::from_shape_fn(act.dim(), |_| {
                    if rng.random::<f64>() < keep {
                        1.0 / keep
                    } else {
                        0.0
                    }
                });
                act *= &m;
                Some(m)
            } else {
                None
            };
            layers.push(LayerTrace {
                input: std::mem::replace(&mut h, act),
                normalized,
                batch_mean,
                batch_var,
                pre_activation: pre,
                mask,
            });
        }
        let output_input = h;
        let out = match &self.params.output {
            Some(o) => {
                let mut e = output_input.dot(&o.weight);
                if let Some(b) = &o.bias {
                    e += b;
                }
                e
            }
            None => output_input.clone(),
        };
        let trace = ForwardTrace {
            mode: opts.mode,
            rows: rows.iter().map(|r| (*r).clone()).collect(),
            layers,
            output_input,
        };
        Ok((out, trace))
    }

    /// Inference-mode user embeddings.
    pub fn user_embeddings(&self, rows: &[&SparseRow]) -> Result<Array2<f64>> {
        Ok(self.forward(rows, &ForwardOptions::inference())?.0)
    }

    /// Folds the batch statistics of a training forward pass into the running
    /// statistics: `running = momentum · running + (1 − momentum) · batch`.
    pub fn update_running_stats(&mut self, trace: &ForwardTrace) {
        let m = self.config.bn_momentum;
        for (layer, lt) in self.params.hidden.iter_mut().zip(&trace.layers) {
            if let (Some(bn), Some(mean), Some(var)) = (&mut layer.norm, &lt.batch_mean, &lt.batch_var)
            {
                bn.running_mean = &bn.running_mean * m + mean * (1.0 - m);
                bn.running_var = &bn.running_var * m + var * (1.0 - m);
            }
        }
    }

    /// `P[b][j] = sim(user b, item items[j])` plus biases when enabled.
    ///
    /// `users` gives dataset indices for the user-bias lookup; pass `None`
    /// for users without a learned bias.
    pub fn predict_block(
        &self,
        user_embeddings: ArrayView2<'_, f64>,
        users: Option<&[usize]>,
        items: &[usize],
    ) -> Result<Array2<f64>> {
        let item_embeddings = self.gather_items(items)?;
        self.score(user_embeddings, users, items, item_embeddings.view())
    }

    fn gather_items(&self, items: &[usize]) -> Result<Array2<f64>> {
        let table = &self.params.target_embeddings;
        let mut out = Array2::zeros((items.len(), table.ncols()));
        for (r, &j) in items.iter().enumerate() {
            if j >= table.nrows() {
                return Err(Error::InvalidInput(format!("target item {j} out of range")));
            }
            out.row_mut(r).assign(&table.row(j));
        }
        self.target_reads.add(items.len());
        Ok(out)
    }

    fn score(
        &self,
        user_embeddings: ArrayView2<'_, f64>,
        users: Option<&[usize]>,
        items: &[usize],
        item_embeddings: ArrayView2<'_, f64>,
    ) -> Result<Array2<f64>> {
        if user_embeddings.ncols() != self.config.d {
            return Err(Error::Shape("user embeddings have the wrong width".into()));
        }
        if let Some(u) = users {
            if u.len() != user_embeddings.nrows() {
                return Err(Error::Shape("user index list does not match the batch".into()));
            }
        }
        let kind = self.config.similarity;
        let mut p = Array2::zeros((user_embeddings.nrows(), items.len()));
        for (b, u) in user_embeddings.rows().into_iter().enumerate() {
            let u = u.to_vec();
            for (r, v) in item_embeddings.rows().into_iter().enumerate() {
                p[[b, r]] = similarity(kind, &u, v.as_slice().expect("contiguous"))?;
            }
        }
        if let (Some(bias), Some(users)) = (&self.params.user_bias, users) {
            for (b, &u) in users.iter().enumerate() {
                p.row_mut(b).mapv_inplace(|x| x + bias[u]);
            }
        }
        if let Some(bias) = &self.params.item_bias {
            for (r, &j) in items.iter().enumerate() {
                p.column_mut(r).mapv_inplace(|x| x + bias[j]);
            }
        }
        Ok(p)
    }

    /// Forward pass through the network and a prediction block.
    pub fn forward_block(
        &self,
        rows: &[&SparseRow],
        users: Option<&[usize]>,
        items: &[usize],
        opts: &ForwardOptions,
    ) -> Result<(Array2<f64>, BlockTrace)> {
        let (user_embeddings, forward) = self.forward(rows, opts)?;
        // Fail before touching any item row.
        if self.config.similarity == SimilarityKind::Cosine
            && user_embeddings.rows().into_iter().any(|u| u.iter().all(|&v| v == 0.0))
        {
            return Err(Error::ZeroVector);
        }
        let item_embeddings = self.gather_items(items)?;
        let p = self.score(user_embeddings.view(), users, items, item_embeddings.view())?;
        Ok((
            p,
            BlockTrace {
                forward,
                user_embeddings,
                users: users.map(<[usize]>::to_vec),
                items: items.to_vec(),
                item_embeddings,
            },
        ))
    }

    /// Chain rule from `dL/dP` back to every parameter.
    pub fn backward(&self, trace: &BlockTrace, dp: &Array2<f64>) -> Result<ParamGradients> {
        let batch = trace.forward.batch_size();
        let n_items = trace.items.len();
        if dp.dim() != (batch, n_items) {
            return Err(Error::Shape(format!(
                "upstream gradient is {:?} but the block is {batch}×{n_items}",
                dp.dim()
            )));
        }
        let kind = self.config.similarity;
        let d = self.config.d;

        // Similarity block.
        let mut d_user = Array2::<f64>::zeros((batch, d));
        let mut d_item = Array2::<f64>::zeros((n_items, d));
        for b in 0..batch {
            let u = trace.user_embeddings.row(b).to_vec();
            let mut du = vec![0.0; d];
            for r in 0..n_items {
                let v = trace.item_embeddings.row(r);
                let mut dv = d_item.row_mut(r);
                similarity::accumulate_similarity_grad(
                    kind,
                    &u,
                    v.as_slice().expect("contiguous"),
                    dp[[b, r]],
                    &mut du,
                    dv.as_slice_mut().expect("contiguous"),
                )?;
            }
            d_user.row_mut(b).assign(&Array1::from(du));
        }
        let mut target_map: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
        for (r, &j) in trace.items.iter().enumerate() {
            let acc = target_map.entry(j).or_insert_with(|| vec![0.0; d]);
            for (a, g) in acc.iter_mut().zip(d_item.row(r)) {
                *a += g;
            }
        }
        let item_bias = self.params.item_bias.as_ref().map(|_| {
            let mut m: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
            for (r, &j) in trace.items.iter().enumerate() {
                m.entry(j).or_insert_with(|| vec![0.0])[0] += dp.column(r).sum();
            }
            RowGrads::from_map(m, 1)
        });
        let user_bias = match (&self.params.user_bias, &trace.users) {
            (Some(_), Some(users)) => {
                let mut m: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
                for (b, &u) in users.iter().enumerate() {
                    m.entry(u).or_insert_with(|| vec![0.0])[0] += dp.row(b).sum();
                }
                Some(RowGrads::from_map(m, 1))
            }
            (Some(_), None) => Some(RowGrads::from_map(BTreeMap::new(), 1)),
            _ => None,
        };

        // Output affine layer.
        let fwd = &trace.forward;
        let (mut dh, output) = match &self.params.output {
            Some(o) => {
                let weight = fwd.output_input.t().dot(&d_user);
                let bias = o.bias.as_ref().map(|_| d_user.sum_axis(Axis(0)));
                (d_user.dot(&o.weight.t()), Some(AffineGrads { weight, bias }))
            }
            None => (d_user, None),
        };

        // Hidden layers, last to first.
        let mut hidden = Vec::with_capacity(self.params.hidden.len());
        for (layer, lt) in self.params.hidden.iter().zip(&fwd.layers).rev() {
            if let Some(mask) = &lt.mask {
                dh *= mask;
            }
            let mut dy = dh;
            ndarray::Zip::from(&mut dy)
                .and(&lt.pre_activation)
                .for_each(|g, &y| {
                    if y <= 0.0 {
                        *g = 0.0;
                    }
                });
            let (dz, scale, shift) = match (&layer.norm, &lt.normalized) {
                (Some(bn), Some((xhat, inv_std))) => {
                    let d_scale = (&dy * xhat).sum_axis(Axis(0));
                    let d_shift = dy.sum_axis(Axis(0));
                    let dxhat = &dy * &bn.scale;
                    let dz = if fwd.mode == Mode::Train {
                        let n = batch as f64;
                        let sum_dxhat = dxhat.sum_axis(Axis(0));
                        let sum_dxhat_xhat = (&dxhat * xhat).sum_axis(Axis(0));
                        let mut dz = &dxhat * n - &sum_dxhat;
                        dz -= &(xhat * &sum_dxhat_xhat);
                        dz * inv_std / n
                    } else {
                        dxhat * inv_std
                    };
                    (dz, Some(d_scale), Some(d_shift))
                }
                _ => (dy, None, None),
            };
            let weight = lt.input.t().dot(&dz);
            let bias = layer.affine.bias.as_ref().map(|_| dz.sum_axis(Axis(0)));
            dh = dz.dot(&layer.affine.weight.t());
            hidden.push(HiddenGrads {
                affine: AffineGrads { weight, bias },
                scale,
                shift,
            });
        }
        hidden.reverse();

        // Affinity-weighted aggregation.
        let d_aux = self.config.d_aux;
        let mut aux_map: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
        for (b, row) in fwd.rows.iter().enumerate() {
            let g = dh.row(b);
            for (a, k) in row.iter() {
                let acc = aux_map.entry(a).or_insert_with(|| vec![0.0; d_aux]);
                for (x, gv) in acc.iter_mut().zip(g.iter()) {
                    *x += k * gv;
                }
            }
        }

        Ok(ParamGradients {
            aux: RowGrads::from_map(aux_map, d_aux),
            target: RowGrads::from_map(target_map, d),
            hidden,
            output,
            user_bias,
            item_bias,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(hidden: Vec<usize>, batch_norm: bool, kind: SimilarityKind) -> Model {
        let mut c = ModelConfig::new(5, 4);
        c.d_aux = 3;
        c.d = 3;
        c.hidden_sizes = hidden;
        c.batch_norm = batch_norm;
        c.similarity = kind;
        Model::init(c, 11).unwrap()
    }

    fn rows() -> Vec<SparseRow> {
        vec![
            SparseRow::new(vec![(0, 1.0), (2, 2.0), (4, 0.5)]).unwrap(),
            SparseRow::new(vec![(1, 3.0), (3, 1.0)]).unwrap(),
            SparseRow::new(vec![(0, 2.0), (1, 1.0), (4, 1.5)]).unwrap(),
        ]
    }

    #[test]
    fn aggregation_selects_and_weights_rows() {
        let m = tiny(vec![], false, SimilarityKind::Dot);
        let single = SparseRow::new(vec![(3, 1.0)]).unwrap();
        assert_eq!(m.user_aux_embedding(&single).unwrap(), m.params.aux_embeddings.row(3));
        let empty = SparseRow::default();
        assert!(m.user_aux_embedding(&empty).unwrap().iter().all(|&v| v == 0.0));

        let pair = SparseRow::new(vec![(1, 2.0), (4, 3.0)]).unwrap();
        let got = m.user_aux_embedding(&pair).unwrap();
        let dense = pair.to_dense(5);
        for k in 0..3 {
            let expect: f64 = (0..5).map(|a| dense[a] * m.params.aux_embeddings[[a, k]]).sum();
            assert!((got[k] - expect).abs() < 1e-14);
        }
        let scaled = m.user_aux_embedding(&pair.scaled(2.5)).unwrap();
        for k in 0..3 {
            assert!((scaled[k] - 2.5 * got[k]).abs() < 1e-14);
        }
    }

    #[test]
    fn identity_transformations() {
        let mut c = ModelConfig::new(5, 4);
        c.d_aux = 3;
        c.d = 3;
        c.output_layer = false;
        let m = Model::init(c, 1).unwrap();
        let rs = rows();
        let refs: Vec<&SparseRow> = rs.iter().collect();
        let e = m.user_embeddings(&refs).unwrap();
        for (b, r) in rs.iter().enumerate() {
            assert_eq!(e.row(b), m.user_aux_embedding(r).unwrap());
        }

        let mut lin = tiny(vec![], false, SimilarityKind::Dot);
        let out = lin.params.output.as_mut().unwrap();
        out.weight = Array2::eye(3);
        let e2 = lin.user_embeddings(&refs).unwrap();
        for (b, r) in rs.iter().enumerate() {
            assert_eq!(e2.row(b), lin.user_aux_embedding(r).unwrap());
        }
    }

    #[test]
    fn batch_norm_rejects_single_user_training_batch() {
        let m = tiny(vec![4], true, SimilarityKind::Cosine);
        let rs = rows();
        let opts = ForwardOptions::train(0.0, 0);
        assert!(m.forward(&[&rs[0]], &opts).is_err());
        assert!(m.forward(&[&rs[0]], &ForwardOptions::inference()).is_ok());
    }

    #[test]
    fn block_matches_pairwise_similarity() {
        let m = tiny(vec![4], false, SimilarityKind::Cosine);
        let rs = rows();
        let refs: Vec<&SparseRow> = rs.iter().collect();
        let e = m.user_embeddings(&refs).unwrap();
        let items = [3, 0, 2];
        let p = m.predict_block(e.view(), None, &items).unwrap();
        for b in 0..3 {
            for (r, &j) in items.iter().enumerate() {
                let s = similarity(
                    SimilarityKind::Cosine,
                    e.row(b).as_slice().unwrap(),
                    m.params.target_embeddings.row(j).as_slice().unwrap(),
                )
                .unwrap();
                assert_eq!(p[[b, r]], s);
            }
        }
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let m = tiny(vec![8], true, SimilarityKind::Dot);
        let rs = rows();
        let refs: Vec<&SparseRow> = rs.iter().collect();
        let (p, trace) = m
            .forward_block(&refs, None, &[0, 1, 3], &ForwardOptions::train(0.0, 0))
            .unwrap();
        let g = m.backward(&trace, &Array2::zeros(p.dim())).unwrap();
        for slot in m.params.slots() {
            let n = m.params.slot(slot).len();
            assert!(g.dense(slot, n).iter().all(|&v| v == 0.0), "{slot:?}");
        }
        assert!(m.backward(&trace, &Array2::zeros((2, 2))).is_err());
    }

    #[test]
    fn untouched_rows_have_no_gradient() {
        let m = tiny(vec![], false, SimilarityKind::Dot);
        let rs = [SparseRow::new(vec![(1, 1.0)]).unwrap(), SparseRow::new(vec![(3, 2.0)]).unwrap()];
        let refs: Vec<&SparseRow> = rs.iter().collect();
        let (p, trace) = m.forward_block(&refs, None, &[2], &ForwardOptions::inference()).unwrap();
        let g = m.backward(&trace, &Array2::ones(p.dim())).unwrap();
        assert_eq!(g.aux.rows, vec![1, 3]);
        assert_eq!(g.target.rows, vec![2]);
    }

    #[test]
    fn dropout_with_all_kept_mask_matches_no_dropout() {
        let m = tiny(vec![4, 4], true, SimilarityKind::Cosine);
        let rs = rows();
        let refs: Vec<&SparseRow> = rs.iter().collect();
        let (p0, t0) = m.forward_block(&refs, None, &[0, 1, 2, 3], &ForwardOptions::train(0.0, 5)).unwrap();
        let (p1, mut t1) = m.forward_block(&refs, None, &[0, 1, 2, 3], &ForwardOptions::train(0.0, 9)).unwrap();
        for lt in &mut t1.forward.layers {
            lt.mask = Some(Array2::ones(lt.pre_activation.dim()));
        }
        assert_eq!(p0, p1);
        let dp = Array2::from_shape_fn(p0.dim(), |(i, j)| (i as f64 - j as f64) * 0.1);
        assert_eq!(m.backward(&t0, &dp).unwrap(), m.backward(&t1, &dp).unwrap());
    }

    #[test]
    fn train_forward_deterministic_given_seed() {
        let m = tiny(vec![6], true, SimilarityKind::Cosine);
        let rs = rows();
        let refs: Vec<&SparseRow> = rs.iter().collect();
        let a = m.forward(&refs, &ForwardOptions::train(0.3, 42)).unwrap().0;
        let b = m.forward(&refs, &ForwardOptions::train(0.3, 42)).unwrap().0;
        let c = m.forward(&refs, &ForwardOptions::train(0.3, 43)).unwrap().0;
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn running_stats_follow_momentum() {
        let mut m = tiny(vec![4], true, SimilarityKind::Cosine);
        let rs = rows();
        let refs: Vec<&SparseRow> = rs.iter().collect();
        let (_, trace) = m.forward(&refs, &ForwardOptions::train(0.0, 0)).unwrap();
        let mean = trace.layers[0].batch_mean.clone().unwrap();
        m.update_running_stats(&trace);
        let bn = m.params.hidden[0].norm.as_ref().unwrap();
        for k in 0..4 {
            assert!((bn.running_mean[k] - 0.1 * mean[k]).abs() < 1e-15);
        }
        assert!(m.params.all_finite());
    }
}
