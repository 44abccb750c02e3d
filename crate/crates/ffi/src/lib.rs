//! C ABI over the seqvpr core: SeqGeM pooling, storage arithmetic, an exact kNN
//! descriptor store, and checkpointed models producing sequence descriptors.
//!
//! Every fallible function returns a [`SeqvprStatus`]. On failure a description is
//! kept per thread and can be read with [`seqvpr_last_error`]. Handles are opaque and
//! must be released with their matching `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;
use std::slice;

use seqvpr::aggregate::{seqgem_forward, FrameStack, SeqGemParams};
use seqvpr::checkpoint::Checkpoint;
use seqvpr::model::Model;
use seqvpr::retrieval::{build_store, knn, storage_estimate, DescriptorStore};
use seqvpr::Error;

/// Result codes.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SeqvprStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidInput = 2,
    Format = 3,
    Numeric = 4,
    Io = 5,
    Panic = 6,
}

/// Exact nearest-neighbour store over normalized `f32` descriptor rows.
pub struct SeqvprStore {
    inner: DescriptorStore,
}

/// Trained model loaded from a checkpoint.
pub struct SeqvprModel {
    inner: Model,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> SeqvprStatus {
    match e {
        Error::Io(_) => SeqvprStatus::Io,
        Error::Format(_) | Error::Integrity(_) => SeqvprStatus::Format,
        e if e.is_numeric() => SeqvprStatus::Numeric,
        _ => SeqvprStatus::InvalidInput,
    }
}

/// Runs `f`, recording any error or panic.
fn guard(f: impl FnOnce() -> Result<(), (SeqvprStatus, String)>) -> SeqvprStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => SeqvprStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            SeqvprStatus::Panic
        }
    }
}

fn core(e: Error) -> (SeqvprStatus, String) {
    (status_of(&e), e.to_string())
}

fn null(what: &str) -> (SeqvprStatus, String) {
    (SeqvprStatus::NullPointer, format!("{what} is null"))
}

/// # Safety
/// `p` must be null or point to `n` readable values.
unsafe fn input<'a, T>(p: *const T, n: usize, what: &str) -> Result<&'a [T], (SeqvprStatus, String)> {
    if n == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(slice::from_raw_parts(p, n))
}

/// # Safety
/// `p` must be null or point to `n` writable values.
unsafe fn output<'a, T>(p: *mut T, n: usize, what: &str) -> Result<&'a mut [T], (SeqvprStatus, String)> {
    if p.is_null() {
        return Err(null(what));
    }
    Ok(slice::from_raw_parts_mut(p, n))
}

/// Message of the last failed call on this thread, or null. The pointer stays valid
/// until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn seqvpr_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// SeqGeM over `len` frames of `dim` values (row-major) with exponent `p`, clamped
/// input. Writes `dim` values to `out`.
///
/// # Safety
/// `frames` must hold `len * dim` doubles and `out` must have room for `dim`.
#[no_mangle]
pub unsafe extern "C" fn seqvpr_seqgem(
    frames: *const f64,
    len: usize,
    dim: usize,
    p: f64,
    out: *mut f64,
) -> SeqvprStatus {
    guard(|| {
        let n = len.checked_mul(dim).ok_or_else(|| (SeqvprStatus::InvalidInput, "len * dim overflows".into()))?;
        let data = input(frames, n, "frames")?;
        let stack = FrameStack::from_flat(data.to_vec(), len, dim).map_err(core)?;
        let pooled = seqgem_forward(&stack, &SeqGemParams::with_p(p)).map_err(core)?;
        output(out, dim, "out")?.copy_from_slice(&pooled);
        Ok(())
    })
}

/// `n_sequences * dim * bytes_per_value`, overflow-checked.
///
/// # Safety
/// `out` must be a valid pointer to a `u64`.
#[no_mangle]
pub unsafe extern "C" fn seqvpr_storage_estimate(
    n_sequences: u64,
    dim: u64,
    bytes_per_value: u64,
    out: *mut u64,
) -> SeqvprStatus {
    guard(|| {
        let v = storage_estimate(n_sequences, dim, bytes_per_value).map_err(core)?;
        output(out, 1, "out")?[0] = v;
        Ok(())
    })
}

/// Builds a store from `n` descriptor rows of `dim` doubles. Rows are L2-normalized
/// and stored as `f32`; a zero row is rejected.
///
/// # Safety
/// `rows` must hold `n * dim` doubles; `out` must be a valid handle pointer.
#[no_mangle]
pub unsafe extern "C" fn seqvpr_store_new(
    rows: *const f64,
    n: usize,
    dim: usize,
    out: *mut *mut SeqvprStore,
) -> SeqvprStatus {
    guard(|| {
        let slot = output(out, 1, "out")?;
        slot[0] = ptr::null_mut();
        if dim == 0 {
            return Err((SeqvprStatus::InvalidInput, "dim must be >= 1".into()));
        }
        let total = n.checked_mul(dim).ok_or_else(|| (SeqvprStatus::InvalidInput, "n * dim overflows".into()))?;
        let data = input(rows, total, "rows")?;
        let descs: Vec<Vec<f64>> = data.chunks(dim).map(<[f64]>::to_vec).collect();
        let store = build_store(&descs, vec![Vec::new(); n]).map_err(core)?;
        slot[0] = Box::into_raw(Box::new(SeqvprStore { inner: store }));
        Ok(())
    })
}

/// Number of rows in the store, 0 for null.
///
/// # Safety
/// `store` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn seqvpr_store_len(store: *const SeqvprStore) -> usize {
    store.as_ref().map_or(0, |s| s.inner.len())
}

/// Exact `k` nearest rows to `query` by Euclidean distance, ties to the lower index.
/// Writes up to `k` indices and distances and the number written to `out_count`.
///
/// # Safety
/// `store` must be a live handle, `query` must hold `dim` doubles, and both output
/// arrays must have room for `k` values.
#[no_mangle]
pub unsafe extern "C" fn seqvpr_store_knn(
    store: *const SeqvprStore,
    query: *const f64,
    dim: usize,
    k: usize,
    out_indices: *mut usize,
    out_distances: *mut f64,
    out_count: *mut usize,
) -> SeqvprStatus {
    guard(|| {
        let store = store.as_ref().ok_or_else(|| null("store"))?;
        let q = input(query, dim, "query")?;
        let r = knn(&store.inner, q, k).map_err(core)?;
        let m = r.indices.len();
        output(out_indices, k, "out_indices")?[..m].copy_from_slice(&r.indices);
        output(out_distances, k, "out_distances")?[..m].copy_from_slice(&r.distances);
        output(out_count, 1, "out_count")?[0] = m;
        Ok(())
    })
}

/// Releases a store; null is ignored.
///
/// # Safety
/// `store` must be null or a handle from [`seqvpr_store_new`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn seqvpr_store_free(store: *mut SeqvprStore) {
    if !store.is_null() {
        drop(Box::from_raw(store));
    }
}

/// Loads the model stored in a checkpoint file.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be a valid handle pointer.
#[no_mangle]
pub unsafe extern "C" fn seqvpr_model_load(path: *const c_char, out: *mut *mut SeqvprModel) -> SeqvprStatus {
    guard(|| {
        let slot = output(out, 1, "out")?;
        slot[0] = ptr::null_mut();
        if path.is_null() {
            return Err(null("path"));
        }
        let path = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| (SeqvprStatus::InvalidInput, "path is not UTF-8".into()))?;
        let ck = Checkpoint::load(Path::new(path)).map_err(core)?;
        slot[0] = Box::into_raw(Box::new(SeqvprModel { inner: ck.state.model }));
        Ok(())
    })
}

/// Raw frame feature dimension the model expects, 0 for null.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn seqvpr_model_raw_dim(model: *const SeqvprModel) -> usize {
    model.as_ref().map_or(0, |m| m.inner.raw_dim())
}

/// Descriptor dimension, 0 for null.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn seqvpr_model_out_dim(model: *const SeqvprModel) -> usize {
    model.as_ref().map_or(0, |m| m.inner.out_dim())
}

/// Sequence descriptor of `len` raw frames of `raw_dim` values. `out_len` must equal
/// the model's descriptor dimension.
///
/// # Safety
/// `model` must be a live handle, `frames` must hold `len * raw_dim` doubles and `out`
/// must have room for `out_len`.
#[no_mangle]
pub unsafe extern "C" fn seqvpr_model_seq_descriptor(
    model: *const SeqvprModel,
    frames: *const f64,
    len: usize,
    raw_dim: usize,
    out: *mut f64,
    out_len: usize,
) -> SeqvprStatus {
    guard(|| {
        let model = &model.as_ref().ok_or_else(|| null("model"))?.inner;
        if out_len != model.out_dim() {
            return Err((SeqvprStatus::InvalidInput, format!("out_len {out_len} but descriptor dim {}", model.out_dim())));
        }
        let n = len.checked_mul(raw_dim).ok_or_else(|| (SeqvprStatus::InvalidInput, "len * raw_dim overflows".into()))?;
        let data = input(frames, n, "frames")?;
        let stack = FrameStack::from_flat(data.to_vec(), len, raw_dim).map_err(core)?;
        let d = model.seq_descriptor(&stack).map_err(core)?;
        output(out, out_len, "out")?.copy_from_slice(&d);
        Ok(())
    })
}

/// Releases a model; null is ignored.
///
/// # Safety
/// `model` must be null or a handle from [`seqvpr_model_load`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn seqvpr_model_free(model: *mut SeqvprModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}
