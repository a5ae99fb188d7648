//! C interface to the streaming low-rank gradient library.
//!
//! Objects are opaque handles created by `*_new`/`*_load` functions and
//! released with the matching `*_free`. Every fallible function returns a
//! [`LrStatus`]; on failure a description is available from
//! [`lr_last_error`] on the same thread until the next failing call.
//! Matrices are dense, row-major `double` arrays.

use std::cell::RefCell;
use std::ffi::{c_char, c_int, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use lowrank::nn::{evaluate, Network};
use lowrank::sbpca::{
    doubling_block_sizes, init_state, recompose, split_blocks, tracking_error, update, LowRankState, SbpcaConfig,
    UpdateTrace, Variant,
};
use lowrank::train::cost_model;
use lowrank::{Error, Matrix};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LrStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Shape = 3,
    NonFinite = 4,
    Config = 5,
    Io = 6,
    Format = 7,
    Panic = 8,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LrVariant {
    /// Fixed blocks, mixing weight `1/(i+1)`.
    Sbpca = 0,
    /// Doubling blocks, mixing weight `1/2`.
    Sbpcav = 1,
}

/// Closed-form costs of one `m x n` dense layer for one batch.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LrCostModel {
    pub mbgd_flops: u64,
    pub sbpca_stream_flops: u64,
    pub sbpca_qr_flops: u64,
    pub sbpca_recompose_flops: u64,
    pub sbpca_flops: u64,
    pub mbgd_aux_floats: u64,
    pub mbgd_gradient_floats: u64,
    pub state_floats: u64,
    pub update_floats: u64,
    pub qr_workspace_floats: u64,
    pub sbpca_aux_floats: u64,
    pub flop_ratio: f64,
    pub flop_ratio_limit: f64,
    pub memory_ratio_streamed: f64,
    pub memory_ratio_expanded: f64,
}

/// A rank-k gradient estimate with its update configuration.
pub struct LrState {
    state: LowRankState,
    config: SbpcaConfig,
}

/// A trained or preset network.
pub struct LrNetwork {
    net: Network,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(message: String) {
    let text = CString::new(message.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(text));
}

fn status_of(err: &Error) -> LrStatus {
    match err {
        Error::Shape { .. } => LrStatus::Shape,
        Error::NonFinite { .. } => LrStatus::NonFinite,
        Error::Config(_) | Error::OracleTooLarge { .. } => LrStatus::Config,
        Error::Io(_) => LrStatus::Io,
        Error::Format { .. } | Error::Decode(_) => LrStatus::Format,
        Error::Label { .. } | Error::Data(_) => LrStatus::InvalidArgument,
    }
}

struct Fail(LrStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(LrStatus::NullPointer, format!("{what} is null"))
}

fn invalid(message: impl Into<String>) -> Fail {
    Fail(LrStatus::InvalidArgument, message.into())
}

fn guard(body: impl FnOnce() -> Result<(), Fail>) -> LrStatus {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(Ok(())) => LrStatus::Ok,
        Ok(Err(Fail(status, message))) => {
            set_error(message);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            LrStatus::Panic
        }
    }
}

unsafe fn slice<'a>(data: *const f64, len: usize, what: &str) -> Result<&'a [f64], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if data.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(data, len))
}

unsafe fn slice_mut<'a>(data: *mut f64, len: usize, what: &str) -> Result<&'a mut [f64], Fail> {
    if len == 0 {
        return Ok(&mut []);
    }
    if data.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts_mut(data, len))
}

unsafe fn text<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p).to_str().map_err(|_| invalid(format!("{what} is not UTF-8")))
}

fn copy_out(out: &mut [f64], values: &[f64], what: &str) -> Result<(), Fail> {
    if out.len() != values.len() {
        return Err(invalid(format!("{what} needs {} values, buffer holds {}", values.len(), out.len())));
    }
    out.copy_from_slice(values);
    Ok(())
}

fn variant(v: LrVariant) -> Variant {
    match v {
        LrVariant::Sbpca => Variant::Sbpca,
        LrVariant::Sbpcav => Variant::Sbpcav,
    }
}

/// Description of the most recent failure on this thread, or null. The
/// pointer stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn lr_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn lr_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Seeded initial state for an `m x n` layer. `block_size` is ignored for
/// [`LrVariant::Sbpcav`].
///
/// # Safety
/// `out` must be a valid pointer to a handle slot.
#[no_mangle]
pub unsafe extern "C" fn lr_state_new(
    m: usize,
    n: usize,
    rank: usize,
    block_size: usize,
    kind: LrVariant,
    seed: u64,
    out: *mut *mut LrState,
) -> LrStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let config = SbpcaConfig::new(rank, block_size.max(1), variant(kind), seed);
        config.validate()?;
        let state = init_state(m, n, &config)?;
        *out = Box::into_raw(Box::new(LrState { state, config }));
        Ok(())
    })
}

/// # Safety
/// `state` must be null or a handle from this library, freed at most once.
#[no_mangle]
pub unsafe extern "C" fn lr_state_free(state: *mut LrState) {
    if !state.is_null() {
        drop(Box::from_raw(state));
    }
}

/// # Safety
/// `state` must be a live handle; output pointers may be null.
#[no_mangle]
pub unsafe extern "C" fn lr_state_dims(state: *const LrState, m: *mut usize, n: *mut usize, rank: *mut usize) -> LrStatus {
    guard(|| {
        let s = &state.as_ref().ok_or_else(|| null("state"))?.state;
        for (p, v) in [(m, s.m()), (n, s.n()), (rank, s.rank())] {
            if !p.is_null() {
                *p = v;
            }
        }
        Ok(())
    })
}

/// Advances the state by one batch of `rows` samples: `x` is `rows x n`
/// activations and `delta` is `rows x m` errors. SBPCA needs `rows` to be a
/// multiple of the block size; SBPCAV needs `rows = 2^L - 1`.
///
/// # Safety
/// `state` must be a live handle and the arrays must hold `rows*n` and
/// `rows*m` values.
#[no_mangle]
pub unsafe extern "C" fn lr_state_update(
    state: *mut LrState,
    x: *const f64,
    delta: *const f64,
    rows: usize,
) -> LrStatus {
    guard(|| {
        let handle = state.as_mut().ok_or_else(|| null("state"))?;
        let (m, n) = (handle.state.m(), handle.state.n());
        if rows == 0 {
            return Err(invalid("a batch needs at least one row"));
        }
        let x = Matrix::from_vec(rows, n, slice(x, rows * n, "x")?.to_vec())?;
        let delta = Matrix::from_vec(rows, m, slice(delta, rows * m, "delta")?.to_vec())?;
        let sizes = match handle.config.variant {
            Variant::Sbpca => {
                let b = handle.config.block_size;
                if !rows.is_multiple_of(b) {
                    return Err(invalid(format!("{rows} rows is not a multiple of block size {b}")));
                }
                vec![b; rows / b]
            }
            Variant::Sbpcav => doubling_block_sizes(rows)?,
        };
        let blocks = split_blocks(&x, &delta, &sizes)?;
        handle.state = update(&handle.state, &blocks, &handle.config, &mut UpdateTrace::default())?;
        Ok(())
    })
}

/// Writes the `m x n` estimate `Δ̂ diag(σ) X̂ᵀ` to `out` (`len = m*n`).
///
/// # Safety
/// `state` must be a live handle and `out` must hold `len` values.
#[no_mangle]
pub unsafe extern "C" fn lr_state_recompose(state: *const LrState, out: *mut f64, len: usize) -> LrStatus {
    guard(|| {
        let s = &state.as_ref().ok_or_else(|| null("state"))?.state;
        copy_out(slice_mut(out, len, "out")?, recompose(s).as_slice(), "recompose")
    })
}

/// Copies σ (`len = k`), `X̂` (`n x k`) and `Δ̂` (`m x k`). Any output
/// pointer may be null to skip it; non-null ones must match in length.
///
/// # Safety
/// `state` must be a live handle; each non-null buffer must hold the stated
/// number of values.
#[no_mangle]
pub unsafe extern "C" fn lr_state_factors(
    state: *const LrState,
    sigma: *mut f64,
    sigma_len: usize,
    x_hat: *mut f64,
    x_hat_len: usize,
    delta_hat: *mut f64,
    delta_hat_len: usize,
) -> LrStatus {
    guard(|| {
        let s = &state.as_ref().ok_or_else(|| null("state"))?.state;
        if !sigma.is_null() {
            copy_out(slice_mut(sigma, sigma_len, "sigma")?, &s.sigma, "sigma")?;
        }
        if !x_hat.is_null() {
            copy_out(slice_mut(x_hat, x_hat_len, "x_hat")?, s.x_hat.as_slice(), "x_hat")?;
        }
        if !delta_hat.is_null() {
            copy_out(slice_mut(delta_hat, delta_hat_len, "delta_hat")?, s.delta_hat.as_slice(), "delta_hat")?;
        }
        Ok(())
    })
}

/// `‖G − Δ̂ diag(σ) X̂ᵀ‖_F` for an `m x n` matrix `G`.
///
/// # Safety
/// `state` must be a live handle, `grad` must hold `len` values and `out`
/// must be valid.
#[no_mangle]
pub unsafe extern "C" fn lr_state_tracking_error(
    state: *const LrState,
    grad: *const f64,
    len: usize,
    out: *mut f64,
) -> LrStatus {
    guard(|| {
        let s = &state.as_ref().ok_or_else(|| null("state"))?.state;
        if out.is_null() {
            return Err(null("out"));
        }
        if len != s.m() * s.n() {
            return Err(invalid(format!("gradient needs {} values, got {len}", s.m() * s.n())));
        }
        let g = Matrix::from_vec(s.m(), s.n(), slice(grad, len, "grad")?.to_vec())?;
        *out = tracking_error(&g, s)?;
        Ok(())
    })
}

/// # Safety
/// `state` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn lr_state_save(state: *const LrState, file: *const c_char) -> LrStatus {
    guard(|| {
        let s = &state.as_ref().ok_or_else(|| null("state"))?.state;
        s.save(text(file, "path")?)?;
        Ok(())
    })
}

/// Reads a state checkpoint; the update configuration is supplied anew.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid handle slot.
#[no_mangle]
pub unsafe extern "C" fn lr_state_load(
    file: *const c_char,
    block_size: usize,
    kind: LrVariant,
    seed: u64,
    out: *mut *mut LrState,
) -> LrStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let state = LowRankState::load(text(file, "path")?)?;
        let config = SbpcaConfig::new(state.rank(), block_size.max(1), variant(kind), seed);
        *out = Box::into_raw(Box::new(LrState { state, config }));
        Ok(())
    })
}

/// Builds a named architecture (`mlp-mnist`, `mini-conv`, `mlp:W0-…-WL`).
///
/// # Safety
/// `name` must be a NUL-terminated string and `out` a valid handle slot.
#[no_mangle]
pub unsafe extern "C" fn lr_network_preset(
    name: *const c_char,
    dropout: bool,
    seed: u64,
    out: *mut *mut LrNetwork,
) -> LrStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let net = Network::preset(text(name, "name")?, dropout, seed)?;
        *out = Box::into_raw(Box::new(LrNetwork { net }));
        Ok(())
    })
}

/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid handle slot.
#[no_mangle]
pub unsafe extern "C" fn lr_network_load(file: *const c_char, out: *mut *mut LrNetwork) -> LrStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let net = Network::load(text(file, "path")?)?;
        *out = Box::into_raw(Box::new(LrNetwork { net }));
        Ok(())
    })
}

/// # Safety
/// `net` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn lr_network_save(net: *const LrNetwork, file: *const c_char) -> LrStatus {
    guard(|| {
        let net = &net.as_ref().ok_or_else(|| null("net"))?.net;
        net.save(text(file, "path")?)?;
        Ok(())
    })
}

/// # Safety
/// `net` must be null or a handle from this library, freed at most once.
#[no_mangle]
pub unsafe extern "C" fn lr_network_free(net: *mut LrNetwork) {
    if !net.is_null() {
        drop(Box::from_raw(net));
    }
}

/// Input width and number of classes.
///
/// # Safety
/// `net` must be a live handle; output pointers may be null.
#[no_mangle]
pub unsafe extern "C" fn lr_network_dims(net: *const LrNetwork, inputs: *mut usize, classes: *mut usize) -> LrStatus {
    guard(|| {
        let net = &net.as_ref().ok_or_else(|| null("net"))?.net;
        if !inputs.is_null() {
            *inputs = net.input.len();
        }
        if !classes.is_null() {
            *classes = net.class_count();
        }
        Ok(())
    })
}

/// Mean cross-entropy and accuracy on `rows` samples in eval mode.
///
/// # Safety
/// `net` must be a live handle, `inputs` must hold `rows * input width`
/// values, `labels` `rows` values, and both outputs must be valid.
#[no_mangle]
pub unsafe extern "C" fn lr_network_evaluate(
    net: *const LrNetwork,
    inputs: *const f64,
    labels: *const u32,
    rows: usize,
    loss: *mut f64,
    accuracy: *mut f64,
) -> LrStatus {
    guard(|| {
        let net = &net.as_ref().ok_or_else(|| null("net"))?.net;
        if loss.is_null() || accuracy.is_null() {
            return Err(null("output"));
        }
        if rows == 0 {
            return Err(invalid("nothing to evaluate"));
        }
        if labels.is_null() {
            return Err(null("labels"));
        }
        let width = net.input.len();
        let x = Matrix::from_vec(rows, width, slice(inputs, rows * width, "inputs")?.to_vec())?;
        let labels: Vec<usize> = std::slice::from_raw_parts(labels, rows).iter().map(|&l| l as usize).collect();
        let e = evaluate(net, &x, &labels)?;
        *loss = e.loss_sum / rows as f64;
        *accuracy = e.correct as f64 / rows as f64;
        Ok(())
    })
}

/// Fills `out` with the closed-form costs of an `m x n` layer at batch
/// size `batch`, block size `block` and rank `rank`.
///
/// # Safety
/// `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn lr_cost_model(
    m: usize,
    n: usize,
    batch: usize,
    block: usize,
    rank: usize,
    out: *mut LrCostModel,
) -> LrStatus {
    guard(|| {
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let c = cost_model(m, n, batch, block, rank)?;
        *out = LrCostModel {
            mbgd_flops: c.mbgd_flops,
            sbpca_stream_flops: c.sbpca_stream_flops,
            sbpca_qr_flops: c.sbpca_qr_flops,
            sbpca_recompose_flops: c.sbpca_recompose_flops,
            sbpca_flops: c.sbpca_flops,
            mbgd_aux_floats: c.mbgd_aux_floats,
            mbgd_gradient_floats: c.mbgd_gradient_floats,
            state_floats: c.state_floats,
            update_floats: c.update_floats,
            qr_workspace_floats: c.qr_workspace_floats,
            sbpca_aux_floats: c.sbpca_aux_floats,
            flop_ratio: c.ratios.flops,
            flop_ratio_limit: c.ratios.flops_limit,
            memory_ratio_streamed: c.ratios.memory_streamed,
            memory_ratio_expanded: c.ratios.memory_expanded,
        };
        Ok(())
    })
}

/// Executes `lowrank run <config>` in-process and returns its exit code
/// (0 success, 1 configuration error, 2 runtime failure).
///
/// # Safety
/// `config_path` must be a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn lr_run_config(config_path: *const c_char) -> c_int {
    let mut code = lowrank::cli::EXIT_CONFIG;
    let status = guard(|| {
        let p = text(config_path, "config path")?;
        code = lowrank::cli::main_with_args(["lowrank", "run", p]);
        Ok(())
    });
    match status {
        LrStatus::Ok => code,
        LrStatus::Panic => lowrank::cli::EXIT_RUNTIME,
        _ => lowrank::cli::EXIT_CONFIG,
    }
}
