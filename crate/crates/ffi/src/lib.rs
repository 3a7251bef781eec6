//! C interface to the mario pipeline.
//!
//! Objects cross the boundary as opaque handles created by `mario_*_new`,
//! `*_load` or `*_train` functions and released with the matching `*_free`.
//! Every fallible call returns a [`MarioStatus`]; the message of the most recent
//! failure on the calling thread is available from [`mario_last_error`].
//! Strings passed in are NUL-terminated UTF-8. Strings handed out must be
//! released with [`mario_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use mario::data::{
    generate_synthetic, load_graph, save_graph, MultimodalGraph, Role, SyntheticSpec,
};
use mario::harness::{
    evaluate, run_stage1, run_stage2, transfer_eval, Mode, RunConfig, Stage1, Stage2Models,
    TaskData,
};
use mario::MarioError;

/// Result of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MarioStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidString = 2,
    InvalidArgument = 3,
    Contract = 4,
    Domain = 5,
    Numerical = 6,
    Config = 7,
    Data = 8,
    Checkpoint = 9,
    Io = 10,
    Json = 11,
    Panic = 12,
}

pub const MARIO_MODE_MARIO: i32 = 0;
pub const MARIO_MODE_FIXED_TXT: i32 = 1;
pub const MARIO_MODE_FIXED_VIS: i32 = 2;
pub const MARIO_MODE_FIXED_MM: i32 = 3;
/// Evaluate in the mode the models were trained in.
pub const MARIO_MODE_TRAINED: i32 = -1;

pub const MARIO_SPLIT_TRAIN: i32 = 0;
pub const MARIO_SPLIT_VAL: i32 = 1;
pub const MARIO_SPLIT_TEST: i32 = 2;

pub struct MarioGraph(MultimodalGraph);
pub struct MarioConfig(RunConfig);
pub struct MarioStage1(Stage1);
pub struct MarioModels(Stage2Models);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let msg = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(msg));
}

struct Failure(MarioStatus, String);

impl From<MarioError> for Failure {
    fn from(e: MarioError) -> Self {
        let status = match &e {
            MarioError::Contract(_) => MarioStatus::Contract,
            MarioError::Domain(_) => MarioStatus::Domain,
            MarioError::Numerical(_) => MarioStatus::Numerical,
            MarioError::Config(_) => MarioStatus::Config,
            MarioError::Data { .. } => MarioStatus::Data,
            MarioError::Checkpoint(_) => MarioStatus::Checkpoint,
            MarioError::Io(_) => MarioStatus::Io,
            MarioError::Json(_) => MarioStatus::Json,
        };
        Failure(status, e.to_string())
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure(MarioStatus::Json, e.to_string())
    }
}

type Outcome = Result<(), Failure>;

fn guard(f: impl FnOnce() -> Outcome) -> MarioStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            MarioStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("panic inside mario".into());
            MarioStatus::Panic
        }
    }
}

unsafe fn borrow<'a, T>(p: *const T, name: &str) -> Result<&'a T, Failure> {
    p.as_ref()
        .ok_or_else(|| Failure(MarioStatus::NullArgument, format!("{name} is null")))
}

unsafe fn string<'a>(p: *const c_char, name: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(Failure(
            MarioStatus::NullArgument,
            format!("{name} is null"),
        ));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure(MarioStatus::InvalidString, format!("{name} is not UTF-8")))
}

unsafe fn put<T>(out: *mut *mut T, value: T) -> Outcome {
    if out.is_null() {
        return Err(Failure(
            MarioStatus::NullArgument,
            "output pointer is null".into(),
        ));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

fn check_out<T>(out: *mut T) -> Outcome {
    if out.is_null() {
        return Err(Failure(
            MarioStatus::NullArgument,
            "output pointer is null".into(),
        ));
    }
    Ok(())
}

fn mode_of(mode: i32, trained: Mode) -> Result<Mode, Failure> {
    match mode {
        MARIO_MODE_TRAINED => Ok(trained),
        MARIO_MODE_MARIO => Ok(Mode::Mario),
        MARIO_MODE_FIXED_TXT => Ok(Mode::FixedTxt),
        MARIO_MODE_FIXED_VIS => Ok(Mode::FixedVis),
        MARIO_MODE_FIXED_MM => Ok(Mode::FixedMm),
        m => Err(Failure(
            MarioStatus::InvalidArgument,
            format!("unknown mode {m}"),
        )),
    }
}

fn role_of(split: i32) -> Result<Role, Failure> {
    match split {
        MARIO_SPLIT_TRAIN => Ok(Role::Train),
        MARIO_SPLIT_VAL => Ok(Role::Val),
        MARIO_SPLIT_TEST => Ok(Role::Test),
        s => Err(Failure(
            MarioStatus::InvalidArgument,
            format!("unknown split {s}"),
        )),
    }
}

unsafe fn free<T>(p: *mut T) {
    if !p.is_null() {
        drop(Box::from_raw(p));
    }
}

/// Message of the last failed call on this thread, or null. Valid until the
/// next call into the library on the same thread.
#[no_mangle]
pub extern "C" fn mario_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Library version as a static string.
#[no_mangle]
pub extern "C" fn mario_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// # Safety
/// `s` must be null or a string returned by this library.
#[no_mangle]
pub unsafe extern "C" fn mario_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Generates a synthetic graph from a JSON spec; null or `"{}"` uses the
/// defaults.
///
/// # Safety
/// `spec_json` must be null or a valid C string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mario_graph_generate(
    spec_json: *const c_char,
    out: *mut *mut MarioGraph,
) -> MarioStatus {
    guard(|| {
        check_out(out)?;
        let spec: SyntheticSpec = if spec_json.is_null() {
            SyntheticSpec::default()
        } else {
            serde_json::from_str(string(spec_json, "spec_json")?)?
        };
        put(out, MarioGraph(generate_synthetic(&spec)?))
    })
}

/// # Safety
/// `dir` must be a valid C string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mario_graph_load(
    dir: *const c_char,
    out: *mut *mut MarioGraph,
) -> MarioStatus {
    guard(|| {
        check_out(out)?;
        put(out, MarioGraph(load_graph(string(dir, "dir")?)?))
    })
}

/// # Safety
/// `graph` must be a live handle; `dir` a valid C string.
#[no_mangle]
pub unsafe extern "C" fn mario_graph_save(
    graph: *const MarioGraph,
    dir: *const c_char,
) -> MarioStatus {
    guard(|| Ok(save_graph(&borrow(graph, "graph")?.0, string(dir, "dir")?)?))
}

/// Node count, or 0 for a null handle.
///
/// # Safety
/// `graph` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn mario_graph_num_nodes(graph: *const MarioGraph) -> usize {
    graph.as_ref().map_or(0, |g| g.0.num_nodes())
}

/// # Safety
/// `graph` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn mario_graph_free(graph: *mut MarioGraph) {
    free(graph)
}

/// Parses a run configuration; missing fields take their defaults and
/// `MARIO_SEED` overrides the seed. The result is validated.
///
/// # Safety
/// `json` must be null or a valid C string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mario_config_new(
    json: *const c_char,
    out: *mut *mut MarioConfig,
) -> MarioStatus {
    guard(|| {
        check_out(out)?;
        let config: RunConfig = if json.is_null() {
            RunConfig::default()
        } else {
            serde_json::from_str(string(json, "json")?)?
        };
        let config = config.with_env_seed()?;
        config.validate()?;
        put(out, MarioConfig(config))
    })
}

/// # Safety
/// `config` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn mario_config_free(config: *mut MarioConfig) {
    free(config)
}

/// Trains the encoder on `graph` for the configured task.
///
/// # Safety
/// Handles must be live; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mario_stage1_train(
    graph: *const MarioGraph,
    config: *const MarioConfig,
    out: *mut *mut MarioStage1,
) -> MarioStatus {
    guard(|| {
        check_out(out)?;
        let config = &borrow(config, "config")?.0;
        let data = TaskData::new(&borrow(graph, "graph")?.0, config.task, config.seed)?;
        put(out, MarioStage1(run_stage1(&data, config)?))
    })
}

/// # Safety
/// `stage1` must be a live handle; `dir` a valid C string.
#[no_mangle]
pub unsafe extern "C" fn mario_stage1_save(
    stage1: *const MarioStage1,
    dir: *const c_char,
) -> MarioStatus {
    guard(|| Ok(borrow(stage1, "stage1")?.0.save(string(dir, "dir")?, "")?))
}

/// # Safety
/// `dir` must be a valid C string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mario_stage1_load(
    dir: *const c_char,
    out: *mut *mut MarioStage1,
) -> MarioStatus {
    guard(|| {
        check_out(out)?;
        put(out, MarioStage1(Stage1::load(string(dir, "dir")?)?))
    })
}

/// # Safety
/// `stage1` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn mario_stage1_free(stage1: *mut MarioStage1) {
    free(stage1)
}

/// Trains adapters, projector and (in `mario` mode) the router with the
/// encoder frozen.
///
/// # Safety
/// Handles must be live; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mario_stage2_train(
    graph: *const MarioGraph,
    stage1: *const MarioStage1,
    config: *const MarioConfig,
    out: *mut *mut MarioModels,
) -> MarioStatus {
    guard(|| {
        check_out(out)?;
        let config = &borrow(config, "config")?.0;
        let stage1 = &borrow(stage1, "stage1")?.0;
        let data = TaskData::new(&borrow(graph, "graph")?.0, config.task, config.seed)?;
        let emb = stage1.embed(&data.graph)?;
        put(
            out,
            MarioModels(run_stage2(&data, stage1, &emb, config)?.models),
        )
    })
}

/// # Safety
/// `models` must be a live handle; `dir` a valid C string.
#[no_mangle]
pub unsafe extern "C" fn mario_models_save(
    models: *const MarioModels,
    dir: *const c_char,
) -> MarioStatus {
    guard(|| Ok(borrow(models, "models")?.0.save(string(dir, "dir")?)?))
}

/// # Safety
/// `dir` must be a valid C string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mario_models_load(
    dir: *const c_char,
    out: *mut *mut MarioModels,
) -> MarioStatus {
    guard(|| {
        check_out(out)?;
        put(out, MarioModels(Stage2Models::load(string(dir, "dir")?)?))
    })
}

/// # Safety
/// `models` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn mario_models_free(models: *mut MarioModels) {
    free(models)
}

unsafe fn finish(
    report: mario::harness::EvalReport,
    accuracy: *mut f64,
    report_json: *mut *mut c_char,
) -> Outcome {
    *accuracy = report.accuracy;
    if !report_json.is_null() {
        let s = CString::new(serde_json::to_string(&report)?)
            .map_err(|e| Failure(MarioStatus::Json, e.to_string()))?;
        *report_json = s.into_raw();
    }
    Ok(())
}

/// Scores one split of `graph` (a `MARIO_SPLIT_*` value) in `mode` (a
/// `MARIO_MODE_*` value). Writes the accuracy and, when `report_json` is not
/// null, the full report as a JSON string owned by the caller.
///
/// # Safety
/// Handles must be live; `accuracy` must be writable; `report_json` null or
/// writable.
#[no_mangle]
pub unsafe extern "C" fn mario_evaluate(
    graph: *const MarioGraph,
    stage1: *const MarioStage1,
    models: *const MarioModels,
    split: i32,
    mode: i32,
    accuracy: *mut f64,
    report_json: *mut *mut c_char,
) -> MarioStatus {
    guard(|| {
        check_out(accuracy)?;
        let models = &borrow(models, "models")?.0;
        let stage1 = &borrow(stage1, "stage1")?.0;
        let mode = mode_of(mode, models.mode)?;
        let role = role_of(split)?;
        let data = TaskData::new(&borrow(graph, "graph")?.0, models.task, models.seed)?;
        let emb = stage1.embed(&data.graph)?;
        finish(
            evaluate(&data, &emb, models, role, mode)?,
            accuracy,
            report_json,
        )
    })
}

/// Zero-shot test accuracy on an unseen graph; no parameters change.
///
/// # Safety
/// As for [`mario_evaluate`].
#[no_mangle]
pub unsafe extern "C" fn mario_transfer(
    stage1: *const MarioStage1,
    models: *const MarioModels,
    target: *const MarioGraph,
    accuracy: *mut f64,
    report_json: *mut *mut c_char,
) -> MarioStatus {
    guard(|| {
        check_out(accuracy)?;
        let report = transfer_eval(
            &borrow(stage1, "stage1")?.0,
            &borrow(models, "models")?.0,
            &borrow(target, "target")?.0,
        )?;
        finish(report, accuracy, report_json)
    })
}
