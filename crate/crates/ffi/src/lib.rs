//! C ABI for the accident-risk pipeline.
//!
//! Conventions:
//!
//! * every function returns a [`MsgatStatus`] code (0 = success) or a
//!   pointer that is null on failure;
//! * the last error message is kept per thread and retrieved with
//!   [`msgat_last_error`];
//! * strings returned as `char*` are owned by the caller and must be
//!   released with [`msgat_string_free`];
//! * configuration is passed as JSON text (not a path) with the same schema
//!   and defaults as the CLI's `--config` file; null means "all defaults";
//! * trained models are exchanged as opaque [`MsgatModel`] handles.

use std::cell::RefCell;
use std::ffi::{CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use libc::c_char;

use msgat::model::{count_parameters, load_checkpoint, ModelConfig, ModelParams};
use msgat::run::{cmd_eval, cmd_prepare, cmd_synth, cmd_train, Partition, RunConfig};
use msgat::train::estimate_cost;
use msgat::Error;

/// Result codes; non-zero mirrors the CLI exit codes.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MsgatStatus {
    Ok = 0,
    Failure = 1,
    ConfigError = 2,
    GenerationError = 3,
    IngestionError = 4,
    MissingArtifact = 5,
    NullArgument = 6,
}

/// Closed-form cost-model output.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct MsgatCostReport {
    pub spatial_units_per_step: u64,
    pub temporal_units: u64,
    pub total_units: u64,
    pub baseline_total_units: u64,
    pub ratio_to_baseline: f64,
}

/// Opaque handle to a loaded checkpoint.
pub struct MsgatModel {
    params: ModelParams,
    config: ModelConfig,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let sanitized: String = msg.chars().filter(|&c| c != '\0').collect();
    LAST_ERROR.with(|e| {
        *e.borrow_mut() = CString::new(sanitized).unwrap_or_default();
    });
}

enum FfiError {
    NullArgument(String),
    Lib(Error),
}

impl From<Error> for FfiError {
    fn from(e: Error) -> Self {
        FfiError::Lib(e)
    }
}

impl FfiError {
    fn status(&self) -> MsgatStatus {
        match self {
            FfiError::NullArgument(_) => MsgatStatus::NullArgument,
            FfiError::Lib(e) => match e.exit_code() {
                2 => MsgatStatus::ConfigError,
                3 => MsgatStatus::GenerationError,
                4 => MsgatStatus::IngestionError,
                5 => MsgatStatus::MissingArtifact,
                _ => MsgatStatus::Failure,
            },
        }
    }

    fn message(&self) -> String {
        match self {
            FfiError::NullArgument(name) => format!("{name} must not be null"),
            FfiError::Lib(e) => e.to_string(),
        }
    }
}

/// Run a fallible body with panic isolation, translating errors to codes.
fn guarded(f: impl FnOnce() -> Result<(), FfiError>) -> MsgatStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => MsgatStatus::Ok,
        Ok(Err(e)) => {
            set_error(&e.message());
            e.status()
        }
        Err(_) => {
            set_error("internal panic");
            MsgatStatus::Failure
        }
    }
}

unsafe fn required_str<'a>(ptr: *const c_char, name: &str) -> Result<&'a str, FfiError> {
    if ptr.is_null() {
        return Err(FfiError::NullArgument(name.to_string()));
    }
    CStr::from_ptr(ptr)
        .to_str()
        .map_err(|_| FfiError::Lib(Error::Contract(format!("{name} is not valid UTF-8"))))
}

unsafe fn optional_str<'a>(ptr: *const c_char, name: &str) -> Result<Option<&'a str>, FfiError> {
    if ptr.is_null() {
        Ok(None)
    } else {
        required_str(ptr, name).map(Some)
    }
}

fn parse_config(json: Option<&str>) -> Result<RunConfig, FfiError> {
    match json {
        None => Ok(RunConfig::default()),
        Some(text) => serde_json::from_str(text)
            .map_err(|e| FfiError::Lib(Error::Config(format!("config json: {e}")))),
    }
}

/// Library version as a static string; do not free.
#[no_mangle]
pub extern "C" fn msgat_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the most recent error on this thread. The pointer stays valid
/// until the next failing call on the same thread; do not free.
#[no_mangle]
pub extern "C" fn msgat_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Release a string returned by this library.
///
/// # Safety
/// `s` must be a pointer previously returned by a `msgat_*` function that
/// documents caller ownership, and must not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn msgat_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Generate a synthetic dataset bundle under `out_dir`.
///
/// # Safety
/// `config_json` may be null (defaults); `out_dir` must be a valid
/// NUL-terminated UTF-8 path.
#[no_mangle]
pub unsafe extern "C" fn msgat_synth(
    config_json: *const c_char,
    out_dir: *const c_char,
) -> MsgatStatus {
    guarded(|| {
        let config = parse_config(optional_str(config_json, "config_json")?)?;
        let out = required_str(out_dir, "out_dir")?;
        cmd_synth(&config, Path::new(out))?;
        Ok(())
    })
}

/// Ingest + interpolate + sample + split `data_dir` into `out_dir`.
///
/// # Safety
/// `config_json` may be null; `data_dir` and `out_dir` must be valid
/// NUL-terminated UTF-8 paths.
#[no_mangle]
pub unsafe extern "C" fn msgat_prepare(
    config_json: *const c_char,
    data_dir: *const c_char,
    out_dir: *const c_char,
) -> MsgatStatus {
    guarded(|| {
        let config = parse_config(optional_str(config_json, "config_json")?)?;
        let data = required_str(data_dir, "data_dir")?;
        let out = required_str(out_dir, "out_dir")?;
        cmd_prepare(Path::new(data), Path::new(out), &config)?;
        Ok(())
    })
}

/// Train against a prepared dataset; writes the run directory under
/// `out_root` (optionally named `run_id`).
///
/// # Safety
/// `config_json` and `run_id` may be null; `prepared_dir` and `out_root`
/// must be valid NUL-terminated UTF-8 paths.
#[no_mangle]
pub unsafe extern "C" fn msgat_train(
    config_json: *const c_char,
    prepared_dir: *const c_char,
    out_root: *const c_char,
    run_id: *const c_char,
) -> MsgatStatus {
    guarded(|| {
        let config = parse_config(optional_str(config_json, "config_json")?)?;
        let prepared = required_str(prepared_dir, "prepared_dir")?;
        let out = required_str(out_root, "out_root")?;
        let run_id = optional_str(run_id, "run_id")?;
        cmd_train(Path::new(prepared), Path::new(out), run_id, &config)?;
        Ok(())
    })
}

/// Evaluate a checkpoint on one partition ("train", "val" or "test").
/// A negative `threshold` selects the checkpoint's own. On success,
/// `metrics_json_out` (if non-null) receives a JSON report the caller must
/// free with [`msgat_string_free`].
///
/// # Safety
/// Path and partition pointers must be valid NUL-terminated UTF-8;
/// `config_json`, `run_id` and `metrics_json_out` may be null.
#[no_mangle]
pub unsafe extern "C" fn msgat_evaluate(
    config_json: *const c_char,
    checkpoint: *const c_char,
    prepared_dir: *const c_char,
    partition: *const c_char,
    threshold: f64,
    out_root: *const c_char,
    run_id: *const c_char,
    metrics_json_out: *mut *mut c_char,
) -> MsgatStatus {
    guarded(|| {
        let config = parse_config(optional_str(config_json, "config_json")?)?;
        let checkpoint = required_str(checkpoint, "checkpoint")?;
        let prepared = required_str(prepared_dir, "prepared_dir")?;
        let partition: Partition = required_str(partition, "partition")?.parse()?;
        let out = required_str(out_root, "out_root")?;
        let run_id = optional_str(run_id, "run_id")?;
        let report = cmd_eval(
            Path::new(checkpoint),
            Path::new(prepared),
            partition,
            (threshold >= 0.0).then_some(threshold),
            Path::new(out),
            run_id,
            &config,
        )?;
        if !metrics_json_out.is_null() {
            let json = serde_json::to_string(&report)
                .map_err(|e| Error::Contract(e.to_string()))
                .map_err(FfiError::from)?;
            *metrics_json_out = CString::new(json)
                .map_err(|e| Error::Contract(e.to_string()))
                .map_err(FfiError::from)?
                .into_raw();
        }
        Ok(())
    })
}

/// Fill `out` with the closed-form cost model for the configured model and
/// a graph of `nodes`/`edges`.
///
/// # Safety
/// `config_json` may be null; `out` must point to writable memory for one
/// `MsgatCostReport`.
#[no_mangle]
pub unsafe extern "C" fn msgat_estimate_cost(
    config_json: *const c_char,
    nodes: u64,
    edges: u64,
    out: *mut MsgatCostReport,
) -> MsgatStatus {
    guarded(|| {
        if out.is_null() {
            return Err(FfiError::NullArgument("out".into()));
        }
        let config = parse_config(optional_str(config_json, "config_json")?)?;
        let report = estimate_cost(&config.model, nodes, edges)?;
        *out = MsgatCostReport {
            spatial_units_per_step: report.spatial_units_per_step,
            temporal_units: report.temporal_units,
            total_units: report.total_units,
            baseline_total_units: report.baseline_total_units,
            ratio_to_baseline: report.ratio_to_baseline,
        };
        Ok(())
    })
}

/// Load a checkpoint into an opaque model handle; null on failure (see
/// [`msgat_last_error`]). Release with [`msgat_model_free`].
///
/// # Safety
/// `checkpoint_path` must be a valid NUL-terminated UTF-8 path.
#[no_mangle]
pub unsafe extern "C" fn msgat_model_load(checkpoint_path: *const c_char) -> *mut MsgatModel {
    let result = catch_unwind(AssertUnwindSafe(|| -> Result<MsgatModel, FfiError> {
        let path = required_str(checkpoint_path, "checkpoint_path")?;
        if !Path::new(path).exists() {
            return Err(Error::MissingArtifact(path.into()).into());
        }
        let file = std::fs::File::open(path).map_err(Error::from)?;
        let (params, config) = load_checkpoint(std::io::BufReader::new(file))?;
        Ok(MsgatModel { params, config })
    }));
    match result {
        Ok(Ok(model)) => Box::into_raw(Box::new(model)),
        Ok(Err(e)) => {
            set_error(&e.message());
            std::ptr::null_mut()
        }
        Err(_) => {
            set_error("internal panic");
            std::ptr::null_mut()
        }
    }
}

/// Release a model handle.
///
/// # Safety
/// `model` must come from [`msgat_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn msgat_model_free(model: *mut MsgatModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of learnable scalars in the loaded model; 0 for a null handle.
///
/// # Safety
/// `model` must be a live handle from [`msgat_model_load`] or null.
#[no_mangle]
pub unsafe extern "C" fn msgat_model_parameter_count(model: *const MsgatModel) -> u64 {
    if model.is_null() {
        return 0;
    }
    let model = &*model;
    debug_assert_eq!(model.params.num_scalars(), count_parameters(&model.config));
    model.params.num_scalars() as u64
}

/// The model's configuration as JSON; caller frees with
/// [`msgat_string_free`]. Null for a null handle.
///
/// # Safety
/// `model` must be a live handle from [`msgat_model_load`] or null.
#[no_mangle]
pub unsafe extern "C" fn msgat_model_config_json(model: *const MsgatModel) -> *mut c_char {
    if model.is_null() {
        return std::ptr::null_mut();
    }
    match serde_json::to_string(&(*model).config) {
        Ok(json) => CString::new(json).map_or(std::ptr::null_mut(), CString::into_raw),
        Err(e) => {
            set_error(&e.to_string());
            std::ptr::null_mut()
        }
    }
}
