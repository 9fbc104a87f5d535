//! C ABI over `implicit-ce`: load a checkpoint, embed a new user from
//! auxiliary counts, score or recommend target items, load TSV datasets and
//! compute single-user metrics.
//!
//! Every fallible function returns an [`IceStatus`]. On failure the message is
//! kept per thread and can be read with [`ice_last_error_message`]. Handles
//! are opaque and must be released with their `_free` function. No function
//! unwinds across the boundary; a panic is reported as
//! `ICE_STATUS_PANIC`.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use implicit_ce::checkpoint::Checkpoint;
use implicit_ce::dataset::{ingest_tsv, CrossDomainDataset, SparseRow};
use implicit_ce::{cli, losses, metrics, Error};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IceStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Parse = 4,
    Checkpoint = 5,
    Numerical = 6,
    BufferTooSmall = 7,
    Panic = 8,
}

/// A loaded checkpoint.
pub struct IceModel {
    checkpoint: Checkpoint,
}

/// An ingested cross-domain dataset.
pub struct IceDataset {
    dataset: CrossDomainDataset,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(message: String) {
    let c = CString::new(message.replace('\0', " ")).expect("no interior NUL");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> IceStatus {
    match e {
        Error::Io(_) => IceStatus::Io,
        Error::Parse { .. } | Error::Json(_) => IceStatus::Parse,
        Error::Checkpoint(_) => IceStatus::Checkpoint,
        Error::Numerical { .. } => IceStatus::Numerical,
        _ => IceStatus::InvalidArgument,
    }
}

struct Failure(IceStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(status_of(&e), e.to_string())
    }
}

fn fail(status: IceStatus, message: impl Into<String>) -> Failure {
    Failure(status, message.into())
}

/// Runs `f`, converting errors and panics into a status and a stored message.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> IceStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            IceStatus::Ok
        }
        Ok(Err(Failure(status, message))) => {
            set_error(message);
            status
        }
        Err(payload) => {
            let message = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".to_string());
            set_error(format!("internal panic: {message}"));
            IceStatus::Panic
        }
    }
}

fn non_null<T>(p: *const T, what: &str) -> Result<(), Failure> {
    if p.is_null() {
        Err(fail(IceStatus::NullPointer, format!("{what} is null")))
    } else {
        Ok(())
    }
}

unsafe fn path_arg(p: *const c_char, what: &str) -> Result<PathBuf, Failure> {
    non_null(p, what)?;
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| fail(IceStatus::InvalidArgument, format!("{what} is not UTF-8")))?;
    Ok(PathBuf::from(s))
}

unsafe fn slice_arg<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    non_null(p, what)?;
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn out_slice<'a, T>(p: *mut T, len: usize, needed: usize, what: &str) -> Result<&'a mut [T], Failure> {
    if len < needed {
        return Err(fail(
            IceStatus::BufferTooSmall,
            format!("{what} holds {len} values, {needed} needed"),
        ));
    }
    if needed == 0 {
        return Ok(&mut []);
    }
    non_null(p, what)?;
    Ok(std::slice::from_raw_parts_mut(p, len))
}

/// Builds the preprocessed auxiliary row of a new user.
unsafe fn user_row(
    model: &IceModel,
    aux_items: *const usize,
    counts: *const f64,
    n: usize,
) -> Result<SparseRow, Failure> {
    let items = slice_arg(aux_items, n, "aux_items")?;
    let counts = slice_arg(counts, n, "counts")?;
    let n_aux = model.checkpoint.model.config.n_aux_items;
    let mut merged: BTreeMap<usize, f64> = BTreeMap::new();
    for (&i, &c) in items.iter().zip(counts) {
        if i >= n_aux {
            return Err(fail(
                IceStatus::InvalidArgument,
                format!("auxiliary item {i} out of range (model has {n_aux})"),
            ));
        }
        if !c.is_finite() || c < 0.0 {
            return Err(fail(IceStatus::InvalidArgument, format!("count {c} must be nonnegative and finite")));
        }
        *merged.entry(i).or_insert(0.0) += c;
    }
    let entries: Vec<(usize, f64)> = merged.into_iter().filter(|&(_, c)| c > 0.0).collect();
    if entries.is_empty() {
        return Err(fail(IceStatus::InvalidArgument, "user has no positive auxiliary count"));
    }
    let row = SparseRow::new(entries)?;
    Ok(model.checkpoint.train_config.preprocess.row(&row))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn ice_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Copies the calling thread's last error message into `buf` (truncated and
/// NUL-terminated when `len > 0`). Returns the full message length without
/// the NUL, or 0 when the last call succeeded.
///
/// # Safety
/// `buf` must be null or point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn ice_last_error_message(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| match &*e.borrow() {
        None => {
            if !buf.is_null() && len > 0 {
                *buf = 0;
            }
            0
        }
        Some(msg) => {
            let bytes = msg.as_bytes();
            if !buf.is_null() && len > 0 {
                let n = bytes.len().min(len - 1);
                ptr::copy_nonoverlapping(bytes.as_ptr().cast::<c_char>(), buf, n);
                *buf.add(n) = 0;
            }
            bytes.len()
        }
    })
}

/// Loads a checkpoint file into a new model handle.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ice_model_load(path: *const c_char, out: *mut *mut IceModel) -> IceStatus {
    guard(|| {
        non_null(out, "out")?;
        *out = ptr::null_mut();
        let path = path_arg(path, "path")?;
        let checkpoint = Checkpoint::load(&path)?;
        *out = Box::into_raw(Box::new(IceModel { checkpoint }));
        Ok(())
    })
}

/// Releases a model handle. Null is ignored.
///
/// # Safety
/// `model` must come from [`ice_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn ice_model_free(model: *mut IceModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Writes the auxiliary item count, target item count and embedding width.
///
/// # Safety
/// All pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn ice_model_dims(
    model: *const IceModel,
    n_aux_items: *mut usize,
    n_target_items: *mut usize,
    dim: *mut usize,
) -> IceStatus {
    guard(|| {
        non_null(model, "model")?;
        non_null(n_aux_items, "n_aux_items")?;
        non_null(n_target_items, "n_target_items")?;
        non_null(dim, "dim")?;
        let c = &(*model).checkpoint.model.config;
        *n_aux_items = c.n_aux_items;
        *n_target_items = c.n_target_items;
        *dim = c.d;
        Ok(())
    })
}

/// Copies the id of target item `index` into `buf` as a NUL-terminated
/// string and writes its length (without NUL) to `needed`. Returns
/// `ICE_STATUS_BUFFER_TOO_SMALL` when `len <= needed`.
///
/// # Safety
/// `buf` must point to `len` writable bytes; other pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn ice_model_target_item_id(
    model: *const IceModel,
    index: usize,
    buf: *mut c_char,
    len: usize,
    needed: *mut usize,
) -> IceStatus {
    guard(|| {
        non_null(model, "model")?;
        non_null(needed, "needed")?;
        let ids = &(*model).checkpoint.target_item_ids;
        let id = ids
            .get(index)
            .ok_or_else(|| fail(IceStatus::InvalidArgument, format!("target item {index} out of range")))?;
        *needed = id.len();
        let out = out_slice(buf, len, id.len() + 1, "buf")?;
        ptr::copy_nonoverlapping(id.as_ptr().cast::<c_char>(), out.as_mut_ptr(), id.len());
        out[id.len()] = 0;
        Ok(())
    })
}

/// Target-space embedding of a new user from `n` (aux item index, count)
/// pairs. Writes `dim` values to `out`.
///
/// # Safety
/// `aux_items` and `counts` must hold `n` values, `out` `out_len` values.
#[no_mangle]
pub unsafe extern "C" fn ice_model_user_embedding(
    model: *const IceModel,
    aux_items: *const usize,
    counts: *const f64,
    n: usize,
    out: *mut f64,
    out_len: usize,
) -> IceStatus {
    guard(|| {
        non_null(model, "model")?;
        let m = &*model;
        let row = user_row(m, aux_items, counts, n)?;
        let e = m.checkpoint.model.user_embeddings(&[&row])?;
        let out = out_slice(out, out_len, e.ncols(), "out")?;
        for (o, v) in out.iter_mut().zip(e.row(0)) {
            *o = *v;
        }
        Ok(())
    })
}

/// Scores every target item for a new user. Writes `n_target_items` values.
///
/// # Safety
/// As for [`ice_model_user_embedding`].
#[no_mangle]
pub unsafe extern "C" fn ice_model_score(
    model: *const IceModel,
    aux_items: *const usize,
    counts: *const f64,
    n: usize,
    scores: *mut f64,
    scores_len: usize,
) -> IceStatus {
    guard(|| {
        non_null(model, "model")?;
        let m = &*model;
        let row = user_row(m, aux_items, counts, n)?;
        let inner = &m.checkpoint.model;
        let e = inner.user_embeddings(&[&row])?;
        let items: Vec<usize> = (0..inner.config.n_target_items).collect();
        let p = inner.predict_block(e.view(), None, &items)?;
        let out = out_slice(scores, scores_len, items.len(), "scores")?;
        for (o, v) in out.iter_mut().zip(p.row(0)) {
            *o = *v;
        }
        Ok(())
    })
}

/// Top `k` target items for a new user, best first with ties broken by
/// lower index. Writes `min(k, n_target_items)` entries and their count to
/// `written`.
///
/// # Safety
/// `items_out` and `scores_out` must hold `k` values; inputs as for
/// [`ice_model_user_embedding`].
#[no_mangle]
#[allow(clippy::too_many_arguments)]
pub unsafe extern "C" fn ice_model_recommend(
    model: *const IceModel,
    aux_items: *const usize,
    counts: *const f64,
    n: usize,
    k: usize,
    items_out: *mut usize,
    scores_out: *mut f64,
    written: *mut usize,
) -> IceStatus {
    guard(|| {
        non_null(model, "model")?;
        non_null(written, "written")?;
        *written = 0;
        let m = &*model;
        let row = user_row(m, aux_items, counts, n)?;
        let top = cli::recommend(&m.checkpoint.model, &row, k)?;
        let items = out_slice(items_out, k, top.len(), "items_out")?;
        let scores = out_slice(scores_out, k, top.len(), "scores_out")?;
        for (r, (j, s)) in top.iter().enumerate() {
            items[r] = *j;
            scores[r] = *s;
        }
        *written = top.len();
        Ok(())
    })
}

/// Ingests paired `user<TAB>item<TAB>count` files.
///
/// # Safety
/// Paths must be NUL-terminated strings and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ice_dataset_load_tsv(
    aux_path: *const c_char,
    target_path: *const c_char,
    min_aux: usize,
    min_target: usize,
    out: *mut *mut IceDataset,
) -> IceStatus {
    guard(|| {
        non_null(out, "out")?;
        *out = ptr::null_mut();
        let aux = path_arg(aux_path, "aux_path")?;
        let target = path_arg(target_path, "target_path")?;
        let (dataset, _) = ingest_tsv(&aux, &target, min_aux, min_target)?;
        *out = Box::into_raw(Box::new(IceDataset { dataset }));
        Ok(())
    })
}

/// Releases a dataset handle. Null is ignored.
///
/// # Safety
/// `dataset` must come from [`ice_dataset_load_tsv`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn ice_dataset_free(dataset: *mut IceDataset) {
    if !dataset.is_null() {
        drop(Box::from_raw(dataset));
    }
}

/// Writes the user, auxiliary item and target item counts.
///
/// # Safety
/// All pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn ice_dataset_dims(
    dataset: *const IceDataset,
    n_users: *mut usize,
    n_aux_items: *mut usize,
    n_target_items: *mut usize,
) -> IceStatus {
    guard(|| {
        non_null(dataset, "dataset")?;
        non_null(n_users, "n_users")?;
        non_null(n_aux_items, "n_aux_items")?;
        non_null(n_target_items, "n_target_items")?;
        let ds = &(*dataset).dataset;
        *n_users = ds.n_users();
        *n_aux_items = ds.auxiliary().n_items();
        *n_target_items = ds.target().n_items();
        Ok(())
    })
}

/// Pearson correlation of two length-`n` vectors.
///
/// # Safety
/// `x` and `y` must hold `n` values; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn ice_metrics_pearson(x: *const f64, y: *const f64, n: usize, out: *mut f64) -> IceStatus {
    guard(|| {
        non_null(out, "out")?;
        let x = slice_arg(x, n, "x")?;
        let y = slice_arg(y, n, "y")?;
        *out = losses::pearson(x, y)?;
        Ok(())
    })
}

/// NDCG of `scores` against nonnegative `truth`, both of length `n`.
///
/// # Safety
/// `scores` and `truth` must hold `n` values; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn ice_metrics_ndcg(
    scores: *const f64,
    truth: *const f64,
    n: usize,
    out: *mut f64,
) -> IceStatus {
    guard(|| {
        non_null(out, "out")?;
        let s = slice_arg(scores, n, "scores")?;
        let t = slice_arg(truth, n, "truth")?;
        *out = metrics::ndcg(s, t)?;
        Ok(())
    })
}
