//! Sparse interaction data for the auxiliary and target domains.
//!
//! Counts are stored as `f64` so preprocessing transforms such as `log1p`
//! stay in one type. Absent entries encode zero affinity; stored entries are
//! always strictly positive.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One user's interactions: strictly increasing item indices with positive counts.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SparseRow {
    indices: Vec<usize>,
    values: Vec<f64>,
}

impl SparseRow {
    /// Builds a row from `(item, count)` pairs. Zero counts are dropped.
    pub fn new(entries: Vec<(usize, f64)>) -> Result<Self> {
        let mut indices = Vec::with_capacity(entries.len());
        let mut values = Vec::with_capacity(entries.len());
        for (item, count) in entries {
            if !count.is_finite() || count < 0.0 {
                return Err(Error::InvalidInput(format!(
                    "count {count} for item {item} is not a nonnegative finite number"
                )));
            }
            if let Some(&last) = indices.last() {
                if item <= last {
                    return Err(Error::InvalidInput(format!(
                        "item indices must be strictly increasing ({last} then {item})"
                    )));
                }
            }
            if count > 0.0 {
                indices.push(item);
                values.push(count);
            }
        }
        Ok(Self { indices, values })
    }

    /// Builds a row from a dense vector, keeping the positive entries.
    pub fn from_dense(dense: &[f64]) -> Result<Self> {
        Self::new(dense.iter().copied().enumerate().collect())
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.indices.iter().copied().zip(self.values.iter().copied())
    }

    /// Count for `item`, zero when absent. O(log nnz).
    pub fn get(&self, item: usize) -> f64 {
        match self.indices.binary_search(&item) {
            Ok(pos) => self.values[pos],
            Err(_) => 0.0,
        }
    }

    pub fn to_dense(&self, n_items: usize) -> Vec<f64> {
        let mut out = vec![0.0; n_items];
        for (j, v) in self.iter() {
            out[j] = v;
        }
        out
    }

    /// Multiplies every stored count by `alpha` (which must be positive).
    pub fn scaled(&self, alpha: f64) -> Self {
        Self {
            indices: self.indices.clone(),
            values: self.values.iter().map(|v| v * alpha).collect(),
        }
    }

    pub(crate) fn map_values(&self, f: impl Fn(f64) -> f64) -> Self {
        let mut indices = Vec::with_capacity(self.len());
        let mut values = Vec::with_capacity(self.len());
        for (j, v) in self.iter() {
            let mapped = f(v);
            if mapped > 0.0 {
                indices.push(j);
                values.push(mapped);
            }
        }
        Self { indices, values }
    }
}

/// Transform applied to counts before they reach the model.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preprocess {
    #[default]
    Raw,
    Log1p,
}

impl Preprocess {
    pub fn apply(self, count: f64) -> f64 {
        match self {
            Preprocess::Raw => count,
            Preprocess::Log1p => count.ln_1p(),
        }
    }

    pub fn row(self, row: &SparseRow) -> SparseRow {
        match self {
            Preprocess::Raw => row.clone(),
            Preprocess::Log1p => row.map_values(f64::ln_1p),
        }
    }
}

impl fmt::Display for Preprocess {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Preprocess::Raw => "raw",
            Preprocess::Log1p => "log1p",
        })
    }
}

impl FromStr for Preprocess {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "raw" => Ok(Preprocess::Raw),
            "log1p" => Ok(Preprocess::Log1p),
            other => Err(Error::InvalidConfig(format!("unknown preprocessing {other:?}"))),
        }
    }
}

/// Sparse nonnegative user × item count matrix for a single domain.
#[derive(Debug, Clone, PartialEq)]
pub struct InteractionMatrix {
    n_items: usize,
    rows: Vec<SparseRow>,
}

impl InteractionMatrix {
    pub fn new(n_items: usize, rows: Vec<SparseRow>) -> Result<Self> {
        for (u, row) in rows.iter().enumerate() {
            if let Some(&last) = row.indices.last() {
                if last >= n_items {
                    return Err(Error::InvalidInput(format!(
                        "user {u} references item {last} but there are only {n_items} items"
                    )));
                }
            }
        }
        Ok(Self { n_items, rows })
    }

    pub fn n_users(&self) -> usize {
        self.rows.len()
    }

    pub fn n_items(&self) -> usize {
        self.n_items
    }

    pub fn row(&self, user: usize) -> &SparseRow {
        &self.rows[user]
    }

    pub fn rows(&self) -> &[SparseRow] {
        &self.rows
    }

    pub fn nnz(&self) -> usize {
        self.rows.iter().map(SparseRow::len).sum()
    }

    /// Applies `f` to every stored count, dropping entries that map to zero.
    pub fn map_values(&self, f: impl Fn(f64) -> f64 + Copy) -> Self {
        Self {
            n_items: self.n_items,
            rows: self.rows.iter().map(|r| r.map_values(f)).collect(),
        }
    }
}

/// Role of a user in an experiment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitLabel {
    Train,
    Validation,
    Holdout,
}

impl fmt::Display for SplitLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SplitLabel::Train => "train",
            SplitLabel::Validation => "validation",
            SplitLabel::Holdout => "holdout",
        })
    }
}

impl FromStr for SplitLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(SplitLabel::Train),
            "validation" => Ok(SplitLabel::Validation),
            "holdout" => Ok(SplitLabel::Holdout),
            other => Err(Error::InvalidInput(format!("unknown split label {other:?}"))),
        }
    }
}

/// Original string ids for users and items, indexed by dense index.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IdMaps {
    pub users: Vec<String>,
    pub aux_items: Vec<String>,
    pub target_items: Vec<String>,
}

impl IdMaps {
    /// Zero-padded ids whose lexicographic order equals index order.
    pub fn synthetic(n_users: usize, n_aux: usize, n_target: usize) -> Self {
        fn make(prefix: &str, n: usize) -> Vec<String> {
            let width = n.saturating_sub(1).to_string().len();
            (0..n).map(|i| format!("{prefix}{i:0width$}")).collect()
        }
        Self {
            users: make("u", n_users),
            aux_items: make("a", n_aux),
            target_items: make("t", n_target),
        }
    }
}

/// Paired auxiliary and target interactions for one set of users.
#[derive(Debug, Clone, PartialEq)]
pub struct CrossDomainDataset {
    auxiliary: InteractionMatrix,
    target: InteractionMatrix,
    split: Vec<SplitLabel>,
    ids: IdMaps,
}

impl CrossDomainDataset {
    pub fn new(
        auxiliary: InteractionMatrix,
        target: InteractionMatrix,
        split: Vec<SplitLabel>,
        ids: IdMaps,
    ) -> Result<Self> {
        let n = auxiliary.n_users();
        if target.n_users() != n || split.len() != n || ids.users.len() != n {
            return Err(Error::Shape(format!(
                "auxiliary has {n} users, target {}, split {}, ids {}",
                target.n_users(),
                split.len(),
                ids.users.len()
            )));
        }
        if ids.aux_items.len() != auxiliary.n_items() || ids.target_items.len() != target.n_items()
        {
            return Err(Error::Shape("item id maps do not match matrix widths".into()));
        }
        for u in 0..n {
            if auxiliary.row(u).is_empty() || target.row(u).is_empty() {
                return Err(Error::InvalidInput(format!(
                    "user {u} ({}) has no auxiliary or no target interactions",
                    ids.users[u]
                )));
            }
        }
        Ok(Self {
            auxiliary,
            target,
            split,
            ids,
        })
    }

    pub fn auxiliary(&self) -> &InteractionMatrix {
        &self.auxiliary
    }

    pub fn target(&self) -> &InteractionMatrix {
        &self.target
    }

    pub fn split(&self) -> &[SplitLabel] {
        &self.split
    }

    pub fn ids(&self) -> &IdMaps {
        &self.ids
    }

    pub fn n_users(&self) -> usize {
        self.auxiliary.n_users()
    }

    /// Indices of users with the given label, ascending.
    pub fn users_with(&self, label: SplitLabel) -> Vec<usize> {
        self.split
            .iter()
            .enumerate()
            .filter_map(|(u, &l)| (l == label).then_some(u))
            .collect()
    }

    pub fn with_split(mut self, split: Vec<SplitLabel>) -> Result<Self> {
        if split.len() != self.n_users() {
            return Err(Error::Shape(format!(
                "split has {} labels for {} users",
                split.len(),
                self.n_users()
            )));
        }
        self.split = split;
        Ok(self)
    }

    /// Applies `f` to every stored count in both domains.
    pub fn map_counts(&self, f: impl Fn(f64) -> f64 + Copy) -> Self {
        Self {
            auxiliary: self.auxiliary.map_values(f),
            target: self.target.map_values(f),
            split: self.split.clone(),
            ids: self.ids.clone(),
        }
    }

    /// Writes the canonical TSV export of both domains, sorted by (user, item).
    pub fn write_tsv(&self, aux_path: &Path, target_path: &Path) -> Result<()> {
        write_matrix_tsv(aux_path, &self.auxiliary, &self.ids.users, &self.ids.aux_items)?;
        write_matrix_tsv(
            target_path,
            &self.target,
            &self.ids.users,
            &self.ids.target_items,
        )
    }

    /// Writes `user_index <TAB> label` lines.
    pub fn write_split(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        for (u, label) in self.split.iter().enumerate() {
            writeln!(w, "{u}\t{label}")?;
        }
        w.flush()?;
        Ok(())
    }
}

fn write_matrix_tsv(
    path: &Path,
    m: &InteractionMatrix,
    users: &[String],
    items: &[String],
) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for (u, row) in m.rows().iter().enumerate() {
        for (j, v) in row.iter() {
            writeln!(w, "{}\t{}\t{}", users[u], items[j], v)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads a split file written by [`CrossDomainDataset::write_split`].
pub fn read_split(path: &Path, n_users: usize) -> Result<Vec<SplitLabel>> {
    let reader = BufReader::new(File::open(path)?);
    let mut split = vec![None; n_users];
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: lineno + 1,
            message,
        };
        let (idx, label) = line
            .split_once('\t')
            .ok_or_else(|| parse_err("expected `user_index<TAB>label`".into()))?;
        let idx: usize = idx
            .parse()
            .map_err(|_| parse_err(format!("bad user index {idx:?}")))?;
        if idx >= n_users {
            return Err(parse_err(format!("user index {idx} out of range")));
        }
        let label = label
            .parse::<SplitLabel>()
            .map_err(|e| parse_err(e.to_string()))?;
        split[idx] = Some(label);
    }
    split
        .into_iter()
        .enumerate()
        .map(|(u, l)| l.ok_or_else(|| Error::InvalidInput(format!("split file misses user {u}"))))
        .collect()
}

/// Counts of users dropped during ingestion.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct IngestReport {
    /// Users present in only one of the two files.
    pub single_domain_users: usize,
    /// Users present in both files but below one of the entry thresholds.
    pub below_threshold_users: usize,
}

type RawCounts = BTreeMap<String, BTreeMap<String, f64>>;

fn read_raw_tsv(path: &Path) -> Result<RawCounts> {
    let reader = BufReader::new(File::open(path)?);
    let mut out: RawCounts = BTreeMap::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: lineno + 1,
            message,
        };
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(parse_err(format!(
                "expected 3 tab-separated fields, found {}",
                fields.len()
            )));
        }
        let count: f64 = fields[2]
            .trim()
            .parse()
            .map_err(|_| parse_err(format!("count {:?} is not a number", fields[2])))?;
        if !count.is_finite() || count < 0.0 {
            return Err(parse_err(format!("count {count} must be nonnegative and finite")));
        }
        if fields[0].is_empty() || fields[1].is_empty() {
            return Err(parse_err("empty user or item id".into()));
        }
        *out.entry(fields[0].to_string())
            .or_default()
            .entry(fields[1].to_string())
            .or_insert(0.0) += count;
    }
    Ok(out)
}

/// Reads paired `user_id <TAB> item_id <TAB> count` files.
///
/// Users need at least `min_aux` distinct auxiliary items and `min_target`
/// distinct target items with positive counts (each threshold is at least 1).
/// Users, auxiliary items and target items are re-indexed in lexicographic
/// order of their original ids. Repeated `(user, item)` lines are summed.
pub fn ingest_tsv(
    aux_path: &Path,
    target_path: &Path,
    min_aux: usize,
    min_target: usize,
) -> Result<(CrossDomainDataset, IngestReport)> {
    let aux = read_raw_tsv(aux_path)?;
    let target = read_raw_tsv(target_path)?;
    let min_aux = min_aux.max(1);
    let min_target = min_target.max(1);

    let positive = |m: &BTreeMap<String, f64>| m.values().filter(|&&c| c > 0.0).count();

    let mut report = IngestReport::default();
    let all_users: BTreeSet<&String> = aux.keys().chain(target.keys()).collect();
    let mut kept: Vec<&String> = Vec::new();
    for user in all_users {
        match (aux.get(user), target.get(user)) {
            (Some(a), Some(t)) => {
                if positive(a) >= min_aux && positive(t) >= min_target {
                    kept.push(user);
                } else {
                    report.below_threshold_users += 1;
                }
            }
            _ => report.single_domain_users += 1,
        }
    }
    if kept.is_empty() {
        return Err(Error::EmptyDataset);
    }

    fn index_items<'a>(
        users: &[&String],
        raw: &'a RawCounts,
    ) -> (Vec<String>, BTreeMap<&'a str, usize>) {
        let items: BTreeSet<&str> = users
            .iter()
            .flat_map(|u| raw[*u].iter())
            .filter(|(_, &c)| c > 0.0)
            .map(|(i, _)| i.as_str())
            .collect();
        let ids: Vec<String> = items.iter().map(|s| s.to_string()).collect();
        let lookup = items.into_iter().enumerate().map(|(i, s)| (s, i)).collect();
        (ids, lookup)
    }

    fn build_matrix(
        users: &[&String],
        raw: &RawCounts,
        lookup: &BTreeMap<&str, usize>,
    ) -> Result<InteractionMatrix> {
        let rows = users
            .iter()
            .map(|u| {
                // BTreeMap iteration is lexicographic, which matches index order.
                SparseRow::new(
                    raw[*u]
                        .iter()
                        .filter(|(_, &c)| c > 0.0)
                        .map(|(item, &c)| (lookup[item.as_str()], c))
                        .collect(),
                )
            })
            .collect::<Result<Vec<_>>>()?;
        InteractionMatrix::new(lookup.len(), rows)
    }

    let (aux_ids, aux_lookup) = index_items(&kept, &aux);
    let (target_ids, target_lookup) = index_items(&kept, &target);
    let auxiliary = build_matrix(&kept, &aux, &aux_lookup)?;
    let target_m = build_matrix(&kept, &target, &target_lookup)?;
    let ids = IdMaps {
        users: kept.iter().map(|s| s.to_string()).collect(),
        aux_items: aux_ids,
        target_items: target_ids,
    };
    let n = ids.users.len();
    let ds = CrossDomainDataset::new(auxiliary, target_m, vec![SplitLabel::Train; n], ids)?;
    Ok((ds, report))
}

/// Parameters of the synthetic cross-domain generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n_users: usize,
    pub n_aux_items: usize,
    pub n_target_items: usize,
    /// Standard deviation of Gaussian noise added to target rows.
    pub noise_scale: f64,
    /// Probability that a user is replaced by an outlier.
    pub outlier_rate: f64,
    /// Factor applied to an outlier's auxiliary counts.
    pub outlier_magnitude: f64,
    pub seed: u64,
    /// Mean of each auxiliary count before clamping at zero.
    pub aux_mean: f64,
    /// Standard deviation of each auxiliary count before clamping at zero.
    pub aux_sd: f64,
    /// Fraction of nonzero entries in the target-from-auxiliary linear map.
    pub map_density: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_users: 1000,
            n_aux_items: 50,
            n_target_items: 50,
            noise_scale: 0.0,
            outlier_rate: 0.0,
            outlier_magnitude: 100.0,
            seed: 0,
            aux_mean: 1.0,
            aux_sd: 1.0,
            map_density: 0.2,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.n_users == 0 || self.n_aux_items == 0 || self.n_target_items == 0 {
            return bad("user and item counts must be at least 1");
        }
        if !(0.0..=1.0).contains(&self.outlier_rate) {
            return bad("outlier rate must lie in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.map_density) || self.map_density == 0.0 {
            return bad("map density must lie in (0, 1]");
        }
        if !(self.outlier_magnitude > 1.0) || !self.outlier_magnitude.is_finite() {
            return bad("outlier magnitude must be a finite number greater than 1");
        }
        if !(self.noise_scale >= 0.0) || !self.noise_scale.is_finite() {
            return bad("noise scale must be nonnegative");
        }
        if !(self.aux_sd >= 0.0) || !self.aux_mean.is_finite() || !self.aux_sd.is_finite() {
            return bad("auxiliary mean must be finite and sd nonnegative");
        }
        Ok(())
    }
}

/// A generated dataset together with its ground truth.
#[derive(Debug, Clone)]
pub struct SyntheticDataset {
    pub dataset: CrossDomainDataset,
    /// `n_target_items × n_aux_items` nonnegative map from auxiliary to target counts.
    pub linear_map: Array2<f64>,
    pub outliers: Vec<bool>,
}

impl SyntheticDataset {
    pub fn n_outliers(&self) -> usize {
        self.outliers.iter().filter(|&&o| o).count()
    }
}

const MAX_USER_REDRAWS: usize = 1000;

/// Generates a dataset whose target rows are a fixed nonnegative linear map
/// of Gaussian auxiliary rows, with optional noise and outlier users.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticDataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (n_aux, n_target) = (spec.n_aux_items, spec.n_target_items);

    let linear_map = Array2::from_shape_fn((n_target, n_aux), |_| {
        if rng.random::<f64>() < spec.map_density {
            rng.random::<f64>()
        } else {
            0.0
        }
    });

    let mut aux_rows = Vec::with_capacity(spec.n_users);
    let mut target_rows = Vec::with_capacity(spec.n_users);
    let mut outliers = Vec::with_capacity(spec.n_users);
    for u in 0..spec.n_users {
        let mut attempt = 0;
        let (aux, target, outlier) = loop {
            attempt += 1;
            if attempt > MAX_USER_REDRAWS {
                return Err(Error::InvalidConfig(format!(
                    "could not draw a non-degenerate user {u}; raise aux_mean or map_density"
                )));
            }
            let mut x: Vec<f64> = (0..n_aux)
                .map(|_| {
                    let z: f64 = rng.sample(StandardNormal);
                    (spec.aux_mean + spec.aux_sd * z).max(0.0)
                })
                .collect();
            let mut y: Vec<f64> = linear_map
                .rows()
                .into_iter()
                .map(|m| m.iter().zip(&x).map(|(a, b)| a * b).sum::<f64>())
                .collect();
            if spec.noise_scale > 0.0 {
                for v in y.iter_mut() {
                    let z: f64 = rng.sample(StandardNormal);
                    *v = (*v + spec.noise_scale * z).max(0.0);
                }
            }
            let outlier = rng.random_bool(spec.outlier_rate);
            if outlier {
                for v in x.iter_mut() {
                    *v *= spec.outlier_magnitude;
                }
                let top = y.iter().copied().fold(0.0_f64, f64::max);
                let top = if top > 0.0 { top } else { 1.0 };
                for v in y.iter_mut() {
                    *v = rng.random::<f64>() * top;
                }
            }
            if x.iter().any(|&v| v > 0.0) && y.iter().any(|&v| v > 0.0) {
                break (x, y, outlier);
            }
        };
        aux_rows.push(SparseRow::from_dense(&aux)?);
        target_rows.push(SparseRow::from_dense(&target)?);
        outliers.push(outlier);
    }

    let dataset = CrossDomainDataset::new(
        InteractionMatrix::new(n_aux, aux_rows)?,
        InteractionMatrix::new(n_target, target_rows)?,
        vec![SplitLabel::Train; spec.n_users],
        IdMaps::synthetic(spec.n_users, n_aux, n_target),
    )?;
    Ok(SyntheticDataset {
        dataset,
        linear_map,
        outliers,
    })
}

/// Assigns uniformly random, disjoint validation and holdout sets of exactly
/// the requested sizes; everyone else becomes a training user.
pub fn split_users(
    ds: CrossDomainDataset,
    n_val: usize,
    n_holdout: usize,
    seed: u64,
) -> Result<CrossDomainDataset> {
    let n = ds.n_users();
    if n_val + n_holdout >= n {
        return Err(Error::InvalidConfig(format!(
            "{n_val} validation + {n_holdout} holdout users leave no training users out of {n}"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut split = vec![SplitLabel::Train; n];
    for &u in &order[..n_val] {
        split[u] = SplitLabel::Validation;
    }
    for &u in &order[n_val..n_val + n_holdout] {
        split[u] = SplitLabel::Holdout;
    }
    ds.with_split(split)
}
