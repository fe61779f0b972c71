//! Evaluation: score scenarios once, then threshold, decide and judge for
//! any number of thresholds and method modes.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{Backend, BackendError, BackendQuery, QueryKind};
use crate::domain::{CandidateAction, Decision, PredictionSet, Scenario};
use crate::environment::Environment;
use crate::grounding::{ground_perception, ground_textual, DetectionOracle, GroundingConfig, GroundingError, GroundingMode};
use crate::knowledge::{knowledge_score, KnowledgeError};
use crate::mcqa::{
    binary_prompt, generate_candidates, label_tokens, parse_certainty, parse_prompt_set, prompt_set_prompt,
    score_candidates, Certainty, McqaError,
};
use crate::posterior::{argmax, build_prediction_set, compute_posterior, decide, MethodMode, PosteriorError, Threshold};
use crate::scenarios::{canonical_truths, is_true_action, judge, EpisodeOutcome};

/// Margin keeping a calibrated threshold inside (0, 1).
pub const CALIBRATION_DELTA: f64 = 1e-6;
/// Smallest calibration split accepted by [`calibrate_threshold`].
pub const MIN_CALIBRATION: usize = 20;
/// Tolerance on `(n + 1)(1 - alpha)` before taking its ceiling.
const QUANTILE_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Mcqa(#[from] McqaError),
    #[error(transparent)]
    Knowledge(#[from] KnowledgeError),
    #[error(transparent)]
    Grounding(#[from] GroundingError),
    #[error(transparent)]
    Posterior(#[from] PosteriorError),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error("scenario {id}: {cause}")]
    Scenario { id: String, cause: Box<HarnessError> },
    #[error("{failed} of {total} scenarios failed (allowed fraction {allowed}); first: {first}")]
    TooManyFailures {
        failed: usize,
        total: usize,
        allowed: f64,
        first: Box<HarnessError>,
    },
    #[error("calibration with alpha {alpha}: need n ≥ {need}, got n = {n}")]
    InsufficientCalibration { n: usize, alpha: f64, need: usize },
    #[error("alpha {0} must lie in (0, 0.5)")]
    InvalidAlpha(f64),
    #[error("threshold grid: {0}")]
    InvalidThresholds(String),
    #[error("mode {0} needs world-knowledge scores that were not computed")]
    NotScored(MethodMode),
    #[error("no scenarios to evaluate")]
    Empty,
    #[error("worker pool: {0}")]
    Pool(String),
}

impl HarnessError {
    /// Whether the root cause is a backend failure.
    pub fn is_backend(&self) -> bool {
        match self {
            HarnessError::Backend(_) => true,
            HarnessError::Mcqa(McqaError::Backend(_)) | HarnessError::Knowledge(KnowledgeError::Backend(_)) => true,
            HarnessError::Scenario { cause, .. } => cause.is_backend(),
            HarnessError::TooManyFailures { first, .. } => first.is_backend(),
            _ => false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HarnessConfig {
    pub grounding: GroundingConfig,
    pub workers: usize,
    /// Largest tolerated fraction of scenarios whose scoring fails.
    pub max_error_fraction: f64,
}

impl Default for HarnessConfig {
    fn default() -> Self {
        Self {
            grounding: GroundingConfig::default(),
            workers: 1,
            max_error_fraction: 0.0,
        }
    }
}

/// A method mode or one of the two prompting baselines.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RunMode {
    Method(MethodMode),
    /// The model lists its own prediction set.
    Prompt,
    /// The model reports Certain or Uncertain.
    Binary,
}

impl RunMode {
    pub fn as_str(self) -> &'static str {
        match self {
            RunMode::Method(m) => m.as_str(),
            RunMode::Prompt => "prompt",
            RunMode::Binary => "binary",
        }
    }
}

impl fmt::Display for RunMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for RunMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "prompt" => Ok(RunMode::Prompt),
            "binary" => Ok(RunMode::Binary),
            other => other.parse().map(RunMode::Method).map_err(|_| {
                format!("unknown mode `{other}` (expected full, scene-only, world-only, prior-only, no-help, prompt or binary)")
            }),
        }
    }
}

/// Everything the LLM contributes to one scenario. Thresholding, deciding
/// and judging are pure functions of this record.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredScenario {
    pub scenario: Scenario,
    pub candidates: Vec<CandidateAction>,
    pub prior: Vec<f64>,
    pub scene_lik: Vec<f64>,
    /// All ones unless `world_scored`.
    pub world_lik: Vec<f64>,
    pub world_scored: bool,
    /// Per candidate: matches a true action.
    pub truth: Vec<bool>,
    not_listed: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Episode {
    pub scenario_id: String,
    pub threshold: Option<f64>,
    pub posterior: Vec<f64>,
    pub set: Vec<char>,
    pub decision: String,
    pub success: bool,
    pub asked_help: bool,
    pub set_size: usize,
}

impl ScoredScenario {
    pub fn labels(&self) -> Vec<char> {
        self.candidates.iter().map(|c| c.label).collect()
    }

    pub fn posterior(&self, mode: MethodMode) -> Result<Vec<f64>, HarnessError> {
        if mode.uses_world() && !self.world_scored {
            return Err(HarnessError::NotScored(mode));
        }
        Ok(compute_posterior(&self.prior, &self.scene_lik, &self.world_lik, mode)?)
    }

    pub fn prediction_set(&self, mode: MethodMode, t: Threshold) -> Result<PredictionSet, HarnessError> {
        Ok(build_prediction_set(&self.posterior(mode)?, &self.labels(), t))
    }

    fn decision(&self, mode: MethodMode, posterior: &[f64], t: Threshold) -> Decision {
        let labels = self.labels();
        if mode == MethodMode::NoHelp {
            Decision::Execute(labels[argmax(posterior).expect("non-empty candidates")])
        } else {
            decide(build_prediction_set(posterior, &labels, t))
        }
    }

    fn judge(&self, decision: &Decision, env: &Environment) -> EpisodeOutcome {
        judge(&self.scenario, decision, &self.candidates, &env.lexicon, self.not_listed.as_deref())
    }

    fn episode(&self, threshold: Option<f64>, posterior: Vec<f64>, decision: Decision, env: &Environment) -> Episode {
        let outcome = self.judge(&decision, env);
        let (set, kind) = match &decision {
            Decision::Execute(l) => (vec![*l], "execute"),
            Decision::AskHelp(p) => (p.members().to_vec(), "ask-help"),
        };
        Episode {
            scenario_id: self.scenario.id.clone(),
            threshold,
            posterior,
            set,
            decision: kind.into(),
            success: outcome.success,
            asked_help: outcome.asked_help,
            set_size: outcome.set_size,
        }
    }

    pub fn evaluate(&self, mode: MethodMode, t: Threshold, env: &Environment) -> Result<Episode, HarnessError> {
        let posterior = self.posterior(mode)?;
        let decision = self.decision(mode, &posterior, t);
        Ok(self.episode(Some(t.value()), posterior, decision, env))
    }

    /// Nonconformity score: one minus the largest posterior on a true
    /// option, or 1 when no candidate is true.
    pub fn nonconformity(&self, mode: MethodMode) -> Result<f64, HarnessError> {
        Ok(nonconformity_score(&self.posterior(mode)?, &self.truth))
    }

    pub fn covers(&self, mode: MethodMode, t: Threshold) -> Result<bool, HarnessError> {
        let set = self.prediction_set(mode, t)?;
        Ok(self
            .candidates
            .iter()
            .zip(&self.truth)
            .any(|(c, truth)| *truth && set.contains(c.label)))
    }
}

pub struct Harness<'a> {
    pub env: &'a Environment,
    pub backend: &'a dyn Backend,
    pub detector: Option<&'a dyn DetectionOracle>,
    pub cfg: HarnessConfig,
}

impl<'a> Harness<'a> {
    pub fn new(env: &'a Environment, backend: &'a dyn Backend, cfg: HarnessConfig) -> Self {
        Self {
            env,
            backend,
            detector: None,
            cfg,
        }
    }

    pub fn with_detector(mut self, detector: &'a dyn DetectionOracle) -> Self {
        self.detector = Some(detector);
        self
    }

    /// Generates, scores and grounds one scenario. World knowledge is
    /// queried only when `with_world` is set.
    pub fn score(&self, scenario: &Scenario, with_world: bool) -> Result<ScoredScenario, HarnessError> {
        let env = self.env;
        let candidates = generate_candidates(scenario, &env.templates, &env.mcqa, &env.lexicon, self.backend)?;
        let prior = score_candidates(scenario, &candidates, &env.templates, self.backend)?;
        let g = &self.cfg.grounding;
        let scene_lik = candidates
            .iter()
            .map(|c| match g.mode {
                GroundingMode::Textual => Ok(ground_textual(c, &scenario.scene, g)),
                GroundingMode::Perception => ground_perception(c, &scenario.scene, self.detector, g),
            })
            .collect::<Result<Vec<_>, _>>()?;
        let world_lik = if with_world {
            candidates
                .iter()
                .map(|c| knowledge_score(c, &scenario.scene, &env.knowledge, &env.surface, self.backend))
                .collect::<Result<Vec<_>, _>>()?
        } else {
            vec![1.0; candidates.len()]
        };
        let truths = canonical_truths(scenario, &env.lexicon);
        let not_listed = env.mcqa.include_not_listed.then(|| env.mcqa.not_listed_text.clone());
        let truth = candidates
            .iter()
            .map(|c| {
                let is_nl = not_listed.as_deref().is_some_and(|n| n.eq_ignore_ascii_case(c.text.trim()));
                !is_nl && is_true_action(&c.text, &truths, &env.lexicon)
            })
            .collect();
        Ok(ScoredScenario {
            scenario: scenario.clone(),
            candidates,
            prior,
            scene_lik,
            world_lik,
            world_scored: with_world,
            truth,
            not_listed,
        })
    }

    fn pool(&self) -> Result<rayon::ThreadPool, HarnessError> {
        rayon::ThreadPoolBuilder::new()
            .num_threads(self.cfg.workers.max(1))
            .build()
            .map_err(|e| HarnessError::Pool(e.to_string()))
    }

    fn map_scenarios<T, F>(&self, scenarios: &[Scenario], f: F) -> Result<Vec<T>, HarnessError>
    where
        T: Send,
        F: Fn(&Scenario) -> Result<T, HarnessError> + Sync + Send,
    {
        if scenarios.is_empty() {
            return Err(HarnessError::Empty);
        }
        let results: Vec<Result<T, HarnessError>> = self.pool()?.install(|| scenarios.par_iter().map(&f).collect());
        let total = results.len();
        let mut ok = Vec::with_capacity(total);
        let mut failures = Vec::new();
        for (r, s) in results.into_iter().zip(scenarios) {
            match r {
                Ok(v) => ok.push(v),
                Err(e) => {
                    log::debug!("scenario {} failed: {e}", s.id);
                    failures.push(HarnessError::Scenario {
                        id: s.id.clone(),
                        cause: Box::new(e),
                    });
                }
            }
        }
        let failed = failures.len();
        if failed > 0 && (failed as f64 / total as f64 > self.cfg.max_error_fraction || ok.is_empty()) {
            return Err(HarnessError::TooManyFailures {
                failed,
                total,
                allowed: self.cfg.max_error_fraction,
                first: Box::new(failures.swap_remove(0)),
            });
        }
        if failed > 0 {
            log::warn!("{failed} of {total} scenarios failed and were skipped");
        }
        Ok(ok)
    }

    /// Scores every scenario on the worker pool. Output order follows input
    /// order; failed scenarios are dropped within the allowed fraction.
    pub fn score_all(&self, scenarios: &[Scenario], with_world: bool) -> Result<Vec<ScoredScenario>, HarnessError> {
        self.map_scenarios(scenarios, |s| self.score(s, with_world))
    }

    fn baseline_episode(&self, s: &Scenario, mode: RunMode) -> Result<Episode, HarnessError> {
        let scored = self.score(s, false)?;
        let labels = scored.labels();
        let fallback = labels[argmax(&scored.prior).expect("non-empty candidates")];
        let all = || PredictionSet::from_members(labels.clone(), 0.0);
        let decision = match mode {
            RunMode::Prompt => {
                let prompt = prompt_set_prompt(&self.env.templates, s, &scored.candidates);
                let q = BackendQuery::new(QueryKind::PromptSet, prompt, label_tokens(&labels))?;
                let members = parse_prompt_set(&self.backend.query(&q)?.text, &labels);
                match members.len() {
                    0 => Decision::Execute(fallback),
                    1 => Decision::Execute(members[0]),
                    _ => Decision::AskHelp(PredictionSet::from_members(members, 0.0)),
                }
            }
            RunMode::Binary => {
                let prompt = binary_prompt(&self.env.templates, s, &scored.candidates);
                let q = BackendQuery::new(
                    QueryKind::BinaryCertainty,
                    prompt,
                    vec!["Certain".into(), "Uncertain".into()],
                )?;
                match parse_certainty(&self.backend.query(&q)?.text) {
                    Certainty::Certain => Decision::Execute(fallback),
                    Certainty::Uncertain if labels.len() > 1 => Decision::AskHelp(all()),
                    Certainty::Uncertain => Decision::Execute(fallback),
                }
            }
            RunMode::Method(_) => unreachable!("method modes are evaluated from scores"),
        };
        Ok(scored.episode(None, scored.prior.clone(), decision, self.env))
    }

    /// One episode per scenario. Method modes threshold at `t`; the
    /// baselines ignore it.
    pub fn run_mode(&self, scenarios: &[Scenario], mode: RunMode, t: Threshold) -> Result<Vec<Episode>, HarnessError> {
        match mode {
            RunMode::Method(m) => {
                let scored = self.score_all(scenarios, m.uses_world())?;
                scored.iter().map(|s| s.evaluate(m, t, self.env)).collect()
            }
            baseline => self.map_scenarios(scenarios, |s| self.baseline_episode(s, baseline)),
        }
    }

    pub fn sweep(&self, scenarios: &[Scenario], mode: MethodMode, thresholds: &[f64]) -> Result<SweepReport, HarnessError> {
        let scored = self.score_all(scenarios, mode.uses_world())?;
        Ok(sweep_scored(&scored, mode, thresholds, self.env)?.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub threshold: f64,
    pub success_rate: f64,
    pub help_rate: f64,
    pub mean_set_size: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub rows: Vec<SweepRow>,
    pub auc: f64,
    pub mode: MethodMode,
    pub n: usize,
}

/// Fifteen log-spaced thresholds from 1e-7 to 0.7.
pub fn default_grid() -> Vec<f64> {
    log_grid(1e-7, 0.7, 15)
}

pub fn log_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![lo];
    }
    let (a, b) = (lo.ln(), hi.ln());
    (0..n)
        .map(|i| {
            if i == 0 {
                lo
            } else if i == n - 1 {
                hi
            } else {
                (a + (b - a) * i as f64 / (n - 1) as f64).exp()
            }
        })
        .collect()
}

fn sorted_thresholds(thresholds: &[f64]) -> Result<Vec<Threshold>, HarnessError> {
    if thresholds.is_empty() {
        return Err(HarnessError::InvalidThresholds("no thresholds".into()));
    }
    let mut ts = thresholds
        .iter()
        .map(|t| Threshold::new(*t))
        .collect::<Result<Vec<_>, _>>()?;
    ts.sort_by(|a, b| a.value().total_cmp(&b.value()));
    ts.dedup();
    Ok(ts)
}

/// Aggregates rows from cached scores; thresholding is the only work per
/// row. Also returns every episode, grouped by threshold.
pub fn sweep_scored(
    scored: &[ScoredScenario],
    mode: MethodMode,
    thresholds: &[f64],
    env: &Environment,
) -> Result<(SweepReport, Vec<Episode>), HarnessError> {
    if scored.is_empty() {
        return Err(HarnessError::Empty);
    }
    let ts = sorted_thresholds(thresholds)?;
    let posteriors = scored
        .iter()
        .map(|s| s.posterior(mode))
        .collect::<Result<Vec<_>, _>>()?;
    let n = scored.len();
    let mut rows = Vec::with_capacity(ts.len());
    let mut episodes = Vec::with_capacity(ts.len() * n);
    for t in ts {
        let (mut success, mut help, mut size) = (0usize, 0usize, 0usize);
        for (s, post) in scored.iter().zip(&posteriors) {
            let decision = s.decision(mode, post, t);
            let ep = s.episode(Some(t.value()), post.clone(), decision, env);
            success += usize::from(ep.success);
            help += usize::from(ep.asked_help);
            size += ep.set_size;
            episodes.push(ep);
        }
        rows.push(SweepRow {
            threshold: t.value(),
            success_rate: success as f64 / n as f64,
            help_rate: help as f64 / n as f64,
            mean_set_size: size as f64 / n as f64,
        });
    }
    let auc = auc(&rows);
    Ok((SweepReport { rows, auc, mode, n }, episodes))
}

/// The (help, success) curve sorted by help then success, extended
/// horizontally to help 0 and help 1.
pub fn curve(rows: &[SweepRow]) -> Vec<(f64, f64)> {
    let mut pts: Vec<(f64, f64)> = rows.iter().map(|r| (r.help_rate, r.success_rate)).collect();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    let (Some(first), Some(last)) = (pts.first().copied(), pts.last().copied()) else {
        return pts;
    };
    let mut out = Vec::with_capacity(pts.len() + 2);
    out.push((0.0, first.1));
    out.extend(pts);
    out.push((1.0, last.1));
    out
}

/// Trapezoidal area under success rate over help rate.
pub fn auc(rows: &[SweepRow]) -> f64 {
    curve(rows)
        .windows(2)
        .map(|w| (w[1].0 - w[0].0) * (w[0].1 + w[1].1) / 2.0)
        .sum()
}

/// Least help rate at which the curve reaches `success`, interpolating
/// linearly between points. `None` when the curve never gets there.
pub fn help_at_success(rows: &[SweepRow], success: f64) -> Option<f64> {
    let pts = curve(rows);
    if pts.first()?.1 >= success {
        return Some(pts[0].0);
    }
    pts.windows(2).find_map(|w| {
        let ((h0, s0), (h1, s1)) = (w[0], w[1]);
        (s1 >= success && s0 < success).then(|| h0 + (h1 - h0) * (success - s0) / (s1 - s0))
    })
}

/// Success levels reached by both sweeps at which `a` needs more help than
/// `b`, as `(success, help_a, help_b)`.
pub fn help_excess(a: &SweepReport, b: &SweepReport) -> Vec<(f64, f64, f64)> {
    let reach = |r: &SweepReport| r.rows.iter().map(|x| x.success_rate).fold(0.0, f64::max);
    let top = reach(a).min(reach(b));
    let mut levels: Vec<f64> = a
        .rows
        .iter()
        .chain(&b.rows)
        .map(|r| r.success_rate)
        .filter(|s| *s <= top)
        .collect();
    levels.sort_by(f64::total_cmp);
    levels.dedup();
    levels
        .into_iter()
        .filter_map(|s| {
            let (ha, hb) = (help_at_success(&a.rows, s)?, help_at_success(&b.rows, s)?);
            (ha > hb + 1e-12).then_some((s, ha, hb))
        })
        .collect()
}

/// Scenario ids whose prediction set at a larger threshold is not contained
/// in the set at a smaller one, plus threshold pairs where help rate rises.
pub fn nestedness_violations(
    scored: &[ScoredScenario],
    mode: MethodMode,
    thresholds: &[f64],
) -> Result<Vec<String>, HarnessError> {
    let ts = sorted_thresholds(thresholds)?;
    let mut out = Vec::new();
    for s in scored {
        let sets = ts
            .iter()
            .map(|t| s.prediction_set(mode, *t))
            .collect::<Result<Vec<_>, _>>()?;
        for (w, pair) in sets.windows(2).zip(ts.windows(2)) {
            if !w[1].members().iter().all(|l| w[0].contains(*l)) {
                out.push(format!(
                    "{}: set at t={} not within set at t={}",
                    s.scenario.id,
                    pair[1].value(),
                    pair[0].value()
                ));
            }
        }
    }
    Ok(out)
}

pub fn help_rate_increases(report: &SweepReport) -> Vec<(f64, f64)> {
    report
        .rows
        .windows(2)
        .filter(|w| w[1].help_rate > w[0].help_rate)
        .map(|w| (w[0].threshold, w[1].threshold))
        .collect()
}

/// Smallest calibration size for which `alpha` has a finite conformal
/// quantile.
pub fn min_calibration_size(alpha: f64) -> usize {
    (1..)
        .find(|n| quantile_rank(*n, alpha) <= *n)
        .expect("alpha > 0 admits some n")
}

fn quantile_rank(n: usize, alpha: f64) -> usize {
    ((n as f64 + 1.0) * (1.0 - alpha) - QUANTILE_TOLERANCE).ceil() as usize
}

/// The ⌈(n+1)(1-α)⌉-th smallest score.
pub fn conformal_quantile(scores: &[f64], alpha: f64) -> Result<f64, HarnessError> {
    if !(alpha > 0.0 && alpha < 0.5) {
        return Err(HarnessError::InvalidAlpha(alpha));
    }
    let n = scores.len();
    let k = quantile_rank(n, alpha);
    if k > n || n == 0 {
        return Err(HarnessError::InsufficientCalibration {
            n,
            alpha,
            need: min_calibration_size(alpha),
        });
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(sorted[k.max(1) - 1])
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Calibration {
    pub threshold: f64,
    pub qhat: f64,
    pub alpha: f64,
    pub n: usize,
    /// Coverage of the true option on the calibration split itself.
    pub coverage: f64,
    /// The threshold was clipped at its upper bound: every calibration
    /// posterior already puts (almost) all mass on a true option.
    pub degenerate: bool,
}

/// `1 - max` posterior over the true options; 1 when none was offered.
pub fn nonconformity_score(posterior: &[f64], truth: &[bool]) -> f64 {
    posterior
        .iter()
        .zip(truth)
        .filter(|(_, t)| **t)
        .map(|(p, _)| *p)
        .fold(None, |acc: Option<f64>, p| Some(acc.map_or(p, |a: f64| a.max(p))))
        .map_or(1.0, |p| 1.0 - p)
}

/// `(qhat, t)` from calibration scores, with `t = 1 - qhat` clipped to
/// `[delta, 1 - delta]`.
pub fn conformal_threshold(scores: &[f64], alpha: f64) -> Result<(f64, f64), HarnessError> {
    if !(alpha > 0.0 && alpha < 0.5) {
        return Err(HarnessError::InvalidAlpha(alpha));
    }
    let n = scores.len();
    let need = min_calibration_size(alpha).max(MIN_CALIBRATION);
    if n < need {
        return Err(HarnessError::InsufficientCalibration { n, alpha, need });
    }
    let qhat = conformal_quantile(scores, alpha)?;
    Ok((qhat, (1.0 - qhat).clamp(CALIBRATION_DELTA, 1.0 - CALIBRATION_DELTA)))
}

pub fn calibrate_threshold(scored: &[ScoredScenario], mode: MethodMode, alpha: f64) -> Result<Calibration, HarnessError> {
    let scores = scored
        .iter()
        .map(|s| s.nonconformity(mode))
        .collect::<Result<Vec<_>, _>>()?;
    let n = scores.len();
    let (qhat, threshold) = conformal_threshold(&scores, alpha)?;
    let raw = 1.0 - qhat;
    let coverage = empirical_coverage(scored, mode, Threshold::new(threshold)?)?;
    Ok(Calibration {
        threshold,
        qhat,
        alpha,
        n,
        coverage,
        degenerate: raw >= 1.0 - CALIBRATION_DELTA,
    })
}

/// Fraction of scenarios whose prediction set holds a true option.
pub fn empirical_coverage(scored: &[ScoredScenario], mode: MethodMode, t: Threshold) -> Result<f64, HarnessError> {
    if scored.is_empty() {
        return Err(HarnessError::Empty);
    }
    let mut hit = 0usize;
    for s in scored {
        hit += usize::from(s.covers(mode, t)?);
    }
    Ok(hit as f64 / scored.len() as f64)
}

pub const CSV_HEADER: &str = "threshold,success_rate,help_rate,mean_set_size";

pub fn write_csv(report: &SweepReport, mut w: impl Write) -> std::io::Result<()> {
    writeln!(w, "{CSV_HEADER}")?;
    for r in &report.rows {
        writeln!(
            w,
            "{:e},{:.6},{:.6},{:.6}",
            r.threshold, r.success_rate, r.help_rate, r.mean_set_size
        )?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mode: String,
    pub auc: f64,
    pub n: usize,
}

impl From<&SweepReport> for Summary {
    fn from(r: &SweepReport) -> Self {
        Self {
            mode: r.mode.to_string(),
            auc: r.auc,
            n: r.n,
        }
    }
}

pub fn write_trace<'e>(episodes: impl IntoIterator<Item = &'e Episode>, mut w: impl Write) -> std::io::Result<()> {
    for e in episodes {
        serde_json::to_writer(&mut w, e)?;
        writeln!(w)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{label_for, Ambiguity, Lexicon, SceneContext};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn row(help: f64, success: f64) -> SweepRow {
        SweepRow {
            threshold: 0.5,
            success_rate: success,
            help_rate: help,
            mean_set_size: 1.0,
        }
    }

    #[test]
    fn auc_triangle_and_perfect() {
        assert_abs_diff_eq!(auc(&[row(0.0, 0.0), row(1.0, 1.0)]), 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(auc(&[row(0.0, 1.0)]), 1.0, epsilon = 1e-15);
        // extended flat at both ends
        assert_abs_diff_eq!(auc(&[row(0.2, 0.4), row(0.6, 0.8)]), 0.2 * 0.4 + 0.4 * 0.6 + 0.4 * 0.8, epsilon = 1e-12);
    }

    #[test]
    fn grid_shape() {
        let g = default_grid();
        assert_eq!(g.len(), 15);
        assert_eq!(g[0], 1e-7);
        assert_eq!(g[14], 0.7);
        assert!(g.windows(2).all(|w| w[0] < w[1]));
        let ratio = g[1] / g[0];
        assert!(g.windows(2).all(|w| (w[1] / w[0] - ratio).abs() < 1e-9));
    }

    #[test]
    fn quantile_examples() {
        let scores: Vec<f64> = (1..=9).map(|i| i as f64 / 10.0).collect();
        assert_eq!(conformal_quantile(&scores, 0.1).unwrap(), 0.9);
        match conformal_quantile(&[0.1; 5], 0.01) {
            Err(HarnessError::InsufficientCalibration { need, .. }) => assert_eq!(need, 99),
            other => panic!("{other:?}"),
        }
        assert_eq!(min_calibration_size(0.001), 999);
        assert_eq!(min_calibration_size(0.1), 9);
    }

    #[test]
    fn calibration_error_names_minimum() {
        let err = calibrate_threshold(&[], MethodMode::Full, 0.001).unwrap_err();
        assert!(err.to_string().contains("need n ≥ 999"), "{err}");
    }

    #[test]
    fn help_interpolation() {
        let rows = [row(0.0, 0.5), row(0.5, 0.9)];
        assert_eq!(help_at_success(&rows, 0.4), Some(0.0));
        assert_abs_diff_eq!(help_at_success(&rows, 0.7).unwrap(), 0.25, epsilon = 1e-12);
        assert_eq!(help_at_success(&rows, 0.95), None);
    }

    #[test]
    fn run_mode_parsing() {
        assert_eq!("prior-only".parse::<RunMode>().unwrap(), RunMode::Method(MethodMode::PriorOnly));
        assert_eq!("binary".parse::<RunMode>().unwrap(), RunMode::Binary);
        assert!("nope".parse::<RunMode>().is_err());
    }

    fn scored(prior: Vec<f64>, truth_at: usize) -> ScoredScenario {
        let lex = Lexicon::new().with_nouns(["block"]);
        let n = prior.len();
        let candidates: Vec<CandidateAction> = (0..n)
            .map(|i| CandidateAction::new(label_for(i), format!("option {i}"), &lex).unwrap())
            .collect();
        let scene = SceneContext::new(vec![lex.object("block")], "a block").unwrap();
        let scenario = Scenario::new(
            "s",
            scene,
            "do it",
            Ambiguity::Attribute,
            vec![format!("option {truth_at}")],
        )
        .unwrap();
        ScoredScenario {
            scenario,
            candidates,
            scene_lik: vec![1.0; n],
            world_lik: vec![1.0; n],
            world_scored: true,
            truth: (0..n).map(|i| i == truth_at).collect(),
            prior,
            not_listed: None,
        }
    }

    #[test]
    fn perfect_scorer_sweep() {
        let env = Environment::tabletop();
        let s = scored(vec![1.0 - 1e-15, 1e-15], 0);
        let (report, eps) = sweep_scored(&[s], MethodMode::Full, &default_grid(), &env).unwrap();
        assert!(report.rows.iter().all(|r| r.success_rate == 1.0 && r.help_rate == 0.0));
        assert_eq!(report.auc, 1.0);
        assert_eq!(eps.len(), 15);
    }

    #[test]
    fn no_help_never_asks() {
        let env = Environment::tabletop();
        let s = scored(vec![0.4, 0.35, 0.25], 1);
        let ep = s.evaluate(MethodMode::NoHelp, Threshold::new(1e-7).unwrap(), &env).unwrap();
        assert!(!ep.asked_help && !ep.success);
        let ep = s.evaluate(MethodMode::PriorOnly, Threshold::new(1e-7).unwrap(), &env).unwrap();
        assert!(ep.asked_help && ep.success);
    }

    #[test]
    fn degenerate_calibration() {
        let set: Vec<ScoredScenario> = (0..30).map(|_| scored(vec![1.0, 0.0], 0)).collect();
        let c = calibrate_threshold(&set, MethodMode::PriorOnly, 0.1).unwrap();
        assert!(c.degenerate);
        assert_eq!(c.threshold, 1.0 - CALIBRATION_DELTA);
        assert_eq!(c.coverage, 1.0);
    }

    #[test]
    fn csv_layout() {
        let report = SweepReport {
            rows: vec![SweepRow {
                threshold: 1e-7,
                success_rate: 0.5,
                help_rate: 0.25,
                mean_set_size: 1.75,
            }],
            auc: 0.5,
            mode: MethodMode::Full,
            n: 4,
        };
        let mut buf = Vec::new();
        write_csv(&report, &mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "threshold,success_rate,help_rate,mean_set_size\n1e-7,0.500000,0.250000,1.750000\n"
        );
    }

    proptest! {
        #[test]
        fn sets_nest_and_help_falls(raw in prop::collection::vec(0.001f64..1.0, 2..6)) {
            let total: f64 = raw.iter().sum();
            let prior: Vec<f64> = raw.iter().map(|p| p / total).collect();
            let s = scored(prior, 0);
            let grid = default_grid();
            prop_assert!(nestedness_violations(std::slice::from_ref(&s), MethodMode::PriorOnly, &grid).unwrap().is_empty());
            let (report, _) = sweep_scored(&[s], MethodMode::PriorOnly, &grid, &Environment::tabletop()).unwrap();
            prop_assert!(help_rate_increases(&report).is_empty());
            prop_assert!(report.rows.iter().all(|r| r.mean_set_size >= 1.0));
        }

        #[test]
        fn auc_in_unit_interval(pts in prop::collection::vec((0.0f64..=1.0, 0.0f64..=1.0), 1..20)) {
            let rows: Vec<SweepRow> = pts.iter().map(|(h, s)| row(*h, *s)).collect();
            let a = auc(&rows);
            prop_assert!((0.0..=1.0 + 1e-12).contains(&a));
        }
    }
}
