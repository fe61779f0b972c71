//! C ABI over the `lbap` core.
//!
//! Every fallible call returns an [`LbapStatus`]; on failure a message is
//! available from [`lbap_last_error_message`] on the same thread until the
//! next call. Handles are opaque and must be released with their `_free`
//! function. Panics never cross the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;
use std::slice;

use lbap::domain::label_for;
use lbap::environment::{mobile_lexicon, tabletop_lexicon, DEFAULT_PALETTE};
use lbap::grounding::{ground_textual, iou, GroundingConfig};
use lbap::harness::{auc, conformal_threshold, nonconformity_score, HarnessError, SweepRow, CALIBRATION_DELTA};
use lbap::posterior::PosteriorError;
use lbap::{build_prediction_set, compute_posterior, BBox, CandidateAction, Lexicon, MethodMode, SceneContext, Threshold};

/// Largest option count accepted per scenario.
pub const LBAP_MAX_OPTIONS: usize = 26;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LbapStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    LengthMismatch = 3,
    DegenerateMass = 4,
    InsufficientData = 5,
    InvalidUtf8 = 6,
    Panic = 99,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LbapMode {
    Full = 0,
    SceneOnly = 1,
    WorldOnly = 2,
    PriorOnly = 3,
    NoHelp = 4,
}

impl From<LbapMode> for MethodMode {
    fn from(m: LbapMode) -> Self {
        match m {
            LbapMode::Full => MethodMode::Full,
            LbapMode::SceneOnly => MethodMode::SceneOnly,
            LbapMode::WorldOnly => MethodMode::WorldOnly,
            LbapMode::PriorOnly => MethodMode::PriorOnly,
            LbapMode::NoHelp => MethodMode::NoHelp,
        }
    }
}

/// Axis-aligned box in normalized image coordinates.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LbapBBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LbapCalibration {
    pub threshold: f64,
    pub qhat: f64,
    /// Share of calibration scenarios whose set holds a true option.
    pub coverage: f64,
    pub n: usize,
    /// Non-zero when the threshold was clipped to its upper bound.
    pub degenerate: u8,
}

/// Object vocabulary used to parse action text.
pub struct LbapLexicon(Lexicon);

struct Row {
    prior: Vec<f64>,
    scene: Vec<f64>,
    world: Vec<f64>,
    truth: Vec<bool>,
}

/// Scored calibration scenarios: per-option prior, likelihoods and truth.
pub struct LbapScenarioSet(Vec<Row>);

struct Failure(LbapStatus, String);

impl Failure {
    fn new(status: LbapStatus, msg: impl Into<String>) -> Self {
        Self(status, msg.into())
    }
}

impl From<PosteriorError> for Failure {
    fn from(e: PosteriorError) -> Self {
        let status = match e {
            PosteriorError::LengthMismatch { .. } => LbapStatus::LengthMismatch,
            PosteriorError::DegenerateMass => LbapStatus::DegenerateMass,
            _ => LbapStatus::InvalidArgument,
        };
        Self(status, e.to_string())
    }
}

impl From<HarnessError> for Failure {
    fn from(e: HarnessError) -> Self {
        let status = match e {
            HarnessError::InsufficientCalibration { .. } | HarnessError::Empty => LbapStatus::InsufficientData,
            _ => LbapStatus::InvalidArgument,
        };
        Self(status, e.to_string())
    }
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> LbapStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => LbapStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(format!("internal error: {msg}"));
            LbapStatus::Panic
        }
    }
}

fn non_null<T>(p: *const T, name: &str) -> Result<(), Failure> {
    if p.is_null() {
        Err(Failure::new(LbapStatus::NullPointer, format!("`{name}` is null")))
    } else {
        Ok(())
    }
}

/// # Safety
/// `p` must point to `n` readable values when `n > 0`.
unsafe fn view<'a, T>(p: *const T, n: usize, name: &str) -> Result<&'a [T], Failure> {
    if n == 0 {
        return Ok(&[]);
    }
    non_null(p, name)?;
    Ok(slice::from_raw_parts(p, n))
}

/// # Safety
/// `p` must be null or a nul-terminated string.
unsafe fn text<'a>(p: *const c_char, name: &str) -> Result<&'a str, Failure> {
    non_null(p, name)?;
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure::new(LbapStatus::InvalidUtf8, format!("`{name}` is not valid UTF-8")))
}

/// # Safety
/// `p` must point to `n` nul-terminated strings when `n > 0`.
unsafe fn texts(p: *const *const c_char, n: usize, name: &str) -> Result<Vec<String>, Failure> {
    view(p, n, name)?.iter().map(|s| text(*s, name).map(str::to_owned)).collect()
}

fn check_options(n: usize) -> Result<(), Failure> {
    if n == 0 || n > LBAP_MAX_OPTIONS {
        return Err(Failure::new(
            LbapStatus::InvalidArgument,
            format!("option count {n} must lie in 1..={LBAP_MAX_OPTIONS}"),
        ));
    }
    Ok(())
}

fn labels(n: usize) -> Vec<char> {
    (0..n).map(label_for).collect()
}

/// Library version as a static nul-terminated string.
#[no_mangle]
pub extern "C" fn lbap_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message for the last failed call on this thread, or null. The pointer
/// stays valid until the next `lbap_*` call on the same thread.
#[no_mangle]
pub extern "C" fn lbap_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Normalized posterior over `n` options, written to `out[0..n]`.
///
/// # Safety
/// `prior`, `scene_lik`, `world_lik` and `out` must each hold `n` doubles.
#[no_mangle]
pub unsafe extern "C" fn lbap_posterior(
    prior: *const f64,
    scene_lik: *const f64,
    world_lik: *const f64,
    n: usize,
    mode: LbapMode,
    out: *mut f64,
) -> LbapStatus {
    guard(|| {
        check_options(n)?;
        non_null(out, "out")?;
        let post = compute_posterior(
            view(prior, n, "prior")?,
            view(scene_lik, n, "scene_lik")?,
            view(world_lik, n, "world_lik")?,
            mode.into(),
        )?;
        slice::from_raw_parts_mut(out, n).copy_from_slice(&post);
        Ok(())
    })
}

/// Marks set members in `out_mask` (1 = member) and stores the set size.
/// Options strictly above `threshold` are members; an empty set falls back
/// to the argmax.
///
/// # Safety
/// `posterior` and `out_mask` must hold `n` elements; `out_size` must be
/// writable.
#[no_mangle]
pub unsafe extern "C" fn lbap_prediction_set(
    posterior: *const f64,
    n: usize,
    threshold: f64,
    out_mask: *mut u8,
    out_size: *mut usize,
) -> LbapStatus {
    guard(|| {
        check_options(n)?;
        non_null(out_mask, "out_mask")?;
        non_null(out_size, "out_size")?;
        let post = view(posterior, n, "posterior")?;
        if !post.iter().all(|p| p.is_finite() && *p >= 0.0) {
            return Err(PosteriorError::InvalidInput.into());
        }
        let l = labels(n);
        let set = build_prediction_set(post, &l, Threshold::new(threshold)?);
        let mask = slice::from_raw_parts_mut(out_mask, n);
        for (m, label) in mask.iter_mut().zip(&l) {
            *m = u8::from(set.contains(*label));
        }
        *out_size = set.len();
        Ok(())
    })
}

/// Intersection over union of two boxes with coordinates in [0,1].
///
/// # Safety
/// `a` and `b` must point to valid boxes; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn lbap_iou(a: *const LbapBBox, b: *const LbapBBox, out: *mut f64) -> LbapStatus {
    guard(|| {
        non_null(a, "a")?;
        non_null(b, "b")?;
        non_null(out, "out")?;
        let bbox = |x: &LbapBBox| {
            BBox::new(x.x_min, x.y_min, x.x_max, x.y_max)
                .map_err(|e| Failure::new(LbapStatus::InvalidArgument, e.to_string()))
        };
        *out = iou(&bbox(&*a)?, &bbox(&*b)?).map_err(|e| Failure::new(LbapStatus::InvalidArgument, e.to_string()))?;
        Ok(())
    })
}

/// Tabletop lexicon over `palette` (the default colors when `n` is 0).
///
/// # Safety
/// `palette` must hold `n` nul-terminated strings; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn lbap_lexicon_tabletop(
    palette: *const *const c_char,
    n: usize,
    out: *mut *mut LbapLexicon,
) -> LbapStatus {
    guard(|| {
        non_null(out, "out")?;
        let colors = if n == 0 {
            DEFAULT_PALETTE.iter().map(|c| c.to_string()).collect()
        } else {
            texts(palette, n, "palette")?
        };
        *out = Box::into_raw(Box::new(LbapLexicon(tabletop_lexicon(&colors))));
        Ok(())
    })
}

/// Lexicon for the mobile-manipulation kitchen.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn lbap_lexicon_mobile(out: *mut *mut LbapLexicon) -> LbapStatus {
    guard(|| {
        non_null(out, "out")?;
        *out = Box::into_raw(Box::new(LbapLexicon(mobile_lexicon())));
        Ok(())
    })
}

/// # Safety
/// `lexicon` must be null or a handle from an `lbap_lexicon_*` constructor
/// not yet freed.
#[no_mangle]
pub unsafe extern "C" fn lbap_lexicon_free(lexicon: *mut LbapLexicon) {
    if !lexicon.is_null() {
        drop(Box::from_raw(lexicon));
    }
}

/// Textual grounding likelihood of `action` against the scene object names:
/// 1 when every mentioned object is present, `epsilon` otherwise.
///
/// # Safety
/// `lexicon` must be a live handle, `action` a nul-terminated string,
/// `scene_objects` `n_objects` nul-terminated strings and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn lbap_ground_textual(
    lexicon: *const LbapLexicon,
    action: *const c_char,
    scene_objects: *const *const c_char,
    n_objects: usize,
    epsilon: f64,
    out: *mut f64,
) -> LbapStatus {
    guard(|| {
        non_null(lexicon, "lexicon")?;
        non_null(out, "out")?;
        let lex = &(*lexicon).0;
        let cfg = GroundingConfig {
            epsilon,
            ..Default::default()
        };
        cfg.validate()
            .map_err(|e| Failure::new(LbapStatus::InvalidArgument, e.to_string()))?;
        let invalid = |e: lbap::domain::DomainError| Failure::new(LbapStatus::InvalidArgument, e.to_string());
        let candidate = CandidateAction::new('A', text(action, "action")?, lex).map_err(invalid)?;
        let objects = texts(scene_objects, n_objects, "scene_objects")?
            .iter()
            .map(|name| lex.object(name))
            .collect();
        let scene = SceneContext::new(objects, "").map_err(invalid)?;
        *out = ground_textual(&candidate, &scene, &cfg);
        Ok(())
    })
}

/// Empty calibration set.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn lbap_scenario_set_new(out: *mut *mut LbapScenarioSet) -> LbapStatus {
    guard(|| {
        non_null(out, "out")?;
        *out = Box::into_raw(Box::new(LbapScenarioSet(Vec::new())));
        Ok(())
    })
}

/// Appends one scored scenario; `truth[i]` is non-zero when option `i`
/// matches a true action.
///
/// # Safety
/// `set` must be a live handle; the four arrays must each hold `n` values.
#[no_mangle]
pub unsafe extern "C" fn lbap_scenario_set_push(
    set: *mut LbapScenarioSet,
    prior: *const f64,
    scene_lik: *const f64,
    world_lik: *const f64,
    truth: *const u8,
    n: usize,
) -> LbapStatus {
    guard(|| {
        non_null(set, "set")?;
        check_options(n)?;
        let row = Row {
            prior: view(prior, n, "prior")?.to_vec(),
            scene: view(scene_lik, n, "scene_lik")?.to_vec(),
            world: view(world_lik, n, "world_lik")?.to_vec(),
            truth: view(truth, n, "truth")?.iter().map(|t| *t != 0).collect(),
        };
        compute_posterior(&row.prior, &row.scene, &row.world, MethodMode::PriorOnly)?;
        (*set).0.push(row);
        Ok(())
    })
}

/// Number of scenarios in the set; 0 for a null handle.
///
/// # Safety
/// `set` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn lbap_scenario_set_len(set: *const LbapScenarioSet) -> usize {
    set.as_ref().map_or(0, |s| s.0.len())
}

/// # Safety
/// `set` must be null or a handle from [`lbap_scenario_set_new`] not yet
/// freed.
#[no_mangle]
pub unsafe extern "C" fn lbap_scenario_set_free(set: *mut LbapScenarioSet) {
    if !set.is_null() {
        drop(Box::from_raw(set));
    }
}

/// Conformal threshold at miscoverage `alpha` for `mode`.
///
/// # Safety
/// `set` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn lbap_calibrate(
    set: *const LbapScenarioSet,
    mode: LbapMode,
    alpha: f64,
    out: *mut LbapCalibration,
) -> LbapStatus {
    guard(|| {
        non_null(set, "set")?;
        non_null(out, "out")?;
        let rows = &(*set).0;
        let mode = MethodMode::from(mode);
        let posteriors = rows
            .iter()
            .map(|r| compute_posterior(&r.prior, &r.scene, &r.world, mode))
            .collect::<Result<Vec<_>, _>>()?;
        let scores: Vec<f64> = posteriors
            .iter()
            .zip(rows)
            .map(|(p, r)| nonconformity_score(p, &r.truth))
            .collect();
        let (qhat, threshold) = conformal_threshold(&scores, alpha)?;
        let t = Threshold::new(threshold)?;
        let covered = posteriors
            .iter()
            .zip(rows)
            .filter(|(p, r)| {
                let l = labels(p.len());
                let set = build_prediction_set(p, &l, t);
                l.iter().zip(&r.truth).any(|(c, truth)| *truth && set.contains(*c))
            })
            .count();
        *out = LbapCalibration {
            threshold,
            qhat,
            coverage: covered as f64 / rows.len() as f64,
            n: rows.len(),
            degenerate: u8::from(1.0 - qhat >= 1.0 - CALIBRATION_DELTA),
        };
        Ok(())
    })
}

/// Area under the success-vs-help curve of `n` sweep points.
///
/// # Safety
/// `help_rates` and `success_rates` must hold `n` doubles; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn lbap_auc(
    help_rates: *const f64,
    success_rates: *const f64,
    n: usize,
    out: *mut f64,
) -> LbapStatus {
    guard(|| {
        non_null(out, "out")?;
        let help = view(help_rates, n, "help_rates")?;
        let success = view(success_rates, n, "success_rates")?;
        if n == 0 {
            return Err(Failure::new(LbapStatus::InsufficientData, "no sweep points"));
        }
        if !help.iter().chain(success).all(|v| (0.0..=1.0).contains(v)) {
            return Err(Failure::new(LbapStatus::InvalidArgument, "rates must lie in [0,1]"));
        }
        let rows: Vec<SweepRow> = help
            .iter()
            .zip(success)
            .map(|(h, s)| SweepRow {
                threshold: 0.0,
                success_rate: *s,
                help_rate: *h,
                mean_set_size: 0.0,
            })
            .collect();
        *out = auc(&rows);
        Ok(())
    })
}
