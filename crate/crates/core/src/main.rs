use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::json;

use lbap::backend::{
    Backend, BackendError, HttpBackend, RecordingBackend, ReplayBackend, RoutedBackend, SyntheticBackend,
};
use lbap::config::{BackendKind, BackendSection, ConfigError, RunConfig};
use lbap::environment::{Environment, EnvironmentKind, MOBILE_TASKS_JSONL};
use lbap::grounding::{GroundingMode, SimulatedDetector};
use lbap::harness::{
    calibrate_threshold, help_at_success, sweep_scored, write_csv, write_trace, Harness, HarnessError, RunMode,
    Summary, SweepReport, SweepRow,
};
use lbap::posterior::{MethodMode, Threshold};
use lbap::scenarios::{generate_tabletop_cases, load_scenarios, parse_scenarios, write_scenarios, ScenarioError, TabletopSpec};
use lbap::Scenario;

#[derive(Parser)]
#[command(name = "lbap", version, about = "Prediction sets with scene and world-knowledge refinement for LLM planners")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample tabletop scenarios to a JSONL file.
    Generate {
        #[arg(long)]
        n: usize,
        #[arg(long)]
        seed: u64,
        /// TOML tabletop spec; defaults to the built-in one.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run every query a scenario set needs and save them as replay fixtures.
    Record {
        #[command(flatten)]
        common: Common,
    },
    /// Evaluate one mode at one threshold.
    Run {
        #[command(flatten)]
        common: Common,
    },
    /// Sweep thresholds and write the curve, summary and trace.
    Sweep {
        #[command(flatten)]
        common: Common,
    },
    /// Pick a threshold from a calibration split.
    Calibrate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        alpha: f64,
    },
    /// Compare sweep outputs from several directories.
    Report {
        /// Directories written by `sweep`.
        #[arg(required = true)]
        dirs: Vec<PathBuf>,
        /// Success levels at which to compare help rates.
        #[arg(long, value_delimiter = ',', default_value = "0.6,0.7,0.8")]
        success: Vec<f64>,
    },
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    /// Scenario JSONL; the mobile environment defaults to the shipped tasks.
    #[arg(long)]
    scenarios: Option<PathBuf>,
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    workers: Option<usize>,
    /// Output directory (output file for `record`).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, thiserror::Error)]
#[error("{0}")]
struct UsageError(String);

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

struct Session {
    cfg: RunConfig,
    env: Environment,
    scenarios: Vec<Scenario>,
    detector: Option<SimulatedDetector>,
}

impl Session {
    fn open(c: &Common) -> Result<Self> {
        let mut cfg = RunConfig::load(&c.config)?;
        if let Some(m) = &c.mode {
            cfg.mode = m.clone();
        }
        if c.threshold.is_some() {
            cfg.threshold = c.threshold;
        }
        if c.seed.is_some() {
            cfg.seed = c.seed;
        }
        if let Some(w) = c.workers {
            cfg.workers = w;
        }
        cfg.validate()?;
        let env = cfg.build_environment()?;
        let scenarios = match (&c.scenarios, cfg.environment) {
            (Some(p), _) => load_scenarios(p, &env.lexicon)?,
            (None, EnvironmentKind::Mobile) => parse_scenarios(MOBILE_TASKS_JSONL, &env.lexicon)?,
            (None, EnvironmentKind::Tabletop) => return Err(usage("--scenarios is required for tabletop runs")),
        };
        if scenarios.is_empty() {
            return Err(usage("scenario file is empty"));
        }
        let detector = (cfg.grounding.mode == GroundingMode::Perception).then(|| SimulatedDetector {
            seed: cfg.seed.unwrap_or(0),
            ..Default::default()
        });
        Ok(Self {
            cfg,
            env,
            scenarios,
            detector,
        })
    }

    fn build_backend(&self, section: &BackendSection) -> Result<Arc<dyn Backend>> {
        Ok(match section.kind {
            BackendKind::Synthetic => Arc::new(SyntheticBackend::new(
                self.cfg.profile_for(section),
                &self.scenarios,
                &self.env,
            )),
            BackendKind::Replay => Arc::new(ReplayBackend::load(section.fixtures.as_ref().expect("validated"))?),
            BackendKind::Http => Arc::new(HttpBackend::new(section.http.clone())?),
        })
    }

    fn base_backend(&self) -> Result<Box<dyn Backend>> {
        let default = self.build_backend(&self.cfg.backend)?;
        if self.cfg.routes.is_empty() {
            return Ok(Box::new(default));
        }
        let mut routed = RoutedBackend::new(default);
        for (kind, section) in &self.cfg.routes {
            routed = routed.route(*kind, self.build_backend(section)?);
        }
        Ok(Box::new(routed))
    }

    /// The configured backend, behind the query cache when one is set.
    fn backend(&self) -> Result<Cached> {
        let base = self.base_backend()?;
        Ok(match &self.cfg.cache_dir {
            Some(dir) => Cached::Recording(RecordingBackend::open(base, dir.join("queries.jsonl"))?),
            None => Cached::Plain(base),
        })
    }

    fn harness<'a>(&'a self, backend: &'a dyn Backend) -> Harness<'a> {
        let h = Harness::new(&self.env, backend, self.cfg.harness_config());
        match &self.detector {
            Some(d) => h.with_detector(d),
            None => h,
        }
    }

    fn method_mode(&self) -> Result<MethodMode> {
        match self.cfg.run_mode()? {
            RunMode::Method(m) => Ok(m),
            other => Err(usage(format!("mode `{other}` has no threshold to sweep or calibrate"))),
        }
    }
}

enum Cached {
    Plain(Box<dyn Backend>),
    Recording(RecordingBackend<Box<dyn Backend>>),
}

impl Cached {
    fn get(&self) -> &dyn Backend {
        match self {
            Cached::Plain(b) => b,
            Cached::Recording(r) => r,
        }
    }

    fn save(&self) -> Result<()> {
        if let Cached::Recording(r) = self {
            r.save()?;
        }
        Ok(())
    }
}

fn out_dir(c: &Common) -> Result<PathBuf> {
    let dir = c.out.clone().ok_or_else(|| usage("--out is required"))?;
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

fn create(path: &Path) -> Result<BufWriter<fs::File>> {
    Ok(BufWriter::new(
        fs::File::create(path).with_context(|| format!("creating {}", path.display()))?,
    ))
}

fn cmd_generate(n: usize, seed: u64, spec: Option<PathBuf>, out: PathBuf) -> Result<()> {
    if n == 0 {
        return Err(usage("--n must be at least 1"));
    }
    let spec: TabletopSpec = match spec {
        Some(p) => {
            let text = fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?;
            toml::from_str(&text).map_err(|e| ScenarioError::InvalidSpec(format!("{}: {e}", p.display())))?
        }
        None => TabletopSpec::default(),
    };
    let env = Environment::tabletop_with_palette(&spec.colors);
    let generated = generate_tabletop_cases(n, seed, &spec, &env.lexicon)?;
    let scenarios: Vec<Scenario> = generated.iter().map(|g| g.scenario.clone()).collect();
    write_scenarios(&out, &scenarios)?;
    let mut by_type: BTreeMap<&str, usize> = BTreeMap::new();
    for g in &generated {
        *by_type.entry(g.scenario.ambiguity.as_str()).or_default() += 1;
    }
    println!("{}", json!({ "n": n, "seed": seed, "out": out, "by_ambiguity": by_type }));
    Ok(())
}

fn cmd_record(c: &Common) -> Result<()> {
    let s = Session::open(c)?;
    let out = c.out.clone().ok_or_else(|| usage("--out is required"))?;
    let recorder = RecordingBackend::open(s.base_backend()?, &out)?;
    let h = s.harness(&recorder);
    let scored = h.score_all(&s.scenarios, true);
    let t = Threshold::new(0.5)?;
    let baselines = scored
        .as_ref()
        .ok()
        .map(|_| -> Result<(), HarnessError> {
            h.run_mode(&s.scenarios, RunMode::Prompt, t)?;
            h.run_mode(&s.scenarios, RunMode::Binary, t)?;
            Ok(())
        });
    recorder.save()?;
    scored?;
    if let Some(b) = baselines {
        b?;
    }
    println!("{}", json!({ "entries": recorder.len(), "out": out }));
    Ok(())
}

fn cmd_run(c: &Common) -> Result<()> {
    let s = Session::open(c)?;
    let dir = out_dir(c)?;
    let mode = s.cfg.run_mode()?;
    let t = Threshold::new(s.cfg.threshold.ok_or_else(|| usage("a threshold is required (--threshold or config)"))?)?;
    let backend = s.backend()?;
    let episodes = s.harness(backend.get()).run_mode(&s.scenarios, mode, t);
    backend.save()?;
    let episodes = episodes?;
    let n = episodes.len();
    let rate = |f: &dyn Fn(&lbap::harness::Episode) -> bool| episodes.iter().filter(|e| f(e)).count() as f64 / n as f64;
    let summary = json!({
        "mode": mode.as_str(),
        "threshold": t.value(),
        "n": n,
        "success_rate": rate(&|e| e.success),
        "help_rate": rate(&|e| e.asked_help),
        "mean_set_size": episodes.iter().map(|e| e.set_size).sum::<usize>() as f64 / n as f64,
    });
    write_trace(&episodes, create(&dir.join("trace.jsonl"))?)?;
    fs::write(dir.join("summary.json"), serde_json::to_string_pretty(&summary)? + "\n")?;
    println!("{summary}");
    Ok(())
}

fn cmd_sweep(c: &Common) -> Result<()> {
    let s = Session::open(c)?;
    let dir = out_dir(c)?;
    let mode = s.method_mode()?;
    let backend = s.backend()?;
    let scored = s.harness(backend.get()).score_all(&s.scenarios, mode.uses_world());
    backend.save()?;
    let (report, episodes) = sweep_scored(&scored?, mode, &s.cfg.grid(), &s.env)?;
    let mut csv = create(&dir.join("sweep.csv"))?;
    write_csv(&report, &mut csv)?;
    csv.flush()?;
    let summary = Summary::from(&report);
    fs::write(dir.join("summary.json"), serde_json::to_string_pretty(&summary)? + "\n")?;
    let mut trace = create(&dir.join("trace.jsonl"))?;
    write_trace(&episodes, &mut trace)?;
    trace.flush()?;
    println!("{}", serde_json::to_string(&summary)?);
    Ok(())
}

fn cmd_calibrate(c: &Common, alpha: f64) -> Result<()> {
    let s = Session::open(c)?;
    let mode = s.method_mode()?;
    let backend = s.backend()?;
    let scored = s.harness(backend.get()).score_all(&s.scenarios, mode.uses_world());
    backend.save()?;
    let cal = calibrate_threshold(&scored?, mode, alpha)?;
    if cal.degenerate {
        eprintln!(
            "{}",
            json!({ "warning": "calibration posteriors are all near-certain; threshold clipped to its upper bound" })
        );
    }
    let out = json!({
        "mode": mode.as_str(),
        "threshold": cal.threshold,
        "qhat": cal.qhat,
        "alpha": cal.alpha,
        "n": cal.n,
        "coverage": cal.coverage,
        "degenerate": cal.degenerate,
    });
    if let Some(dir) = &c.out {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("calibration.json"), serde_json::to_string_pretty(&out)? + "\n")?;
    }
    println!("t = {}", cal.threshold);
    println!("{out}");
    Ok(())
}

fn read_report(dir: &Path) -> Result<SweepReport> {
    let summary: Summary = serde_json::from_str(
        &fs::read_to_string(dir.join("summary.json")).with_context(|| format!("reading {}/summary.json", dir.display()))?,
    )
    .with_context(|| format!("parsing {}/summary.json", dir.display()))?;
    let csv = fs::read_to_string(dir.join("sweep.csv")).with_context(|| format!("reading {}/sweep.csv", dir.display()))?;
    let mut rows = Vec::new();
    for (i, line) in csv.lines().enumerate().skip(1) {
        let f: Vec<f64> = line
            .split(',')
            .map(str::parse)
            .collect::<Result<_, _>>()
            .map_err(|e| anyhow!("{}/sweep.csv line {}: {e}", dir.display(), i + 1))?;
        let [threshold, success_rate, help_rate, mean_set_size] = f[..] else {
            bail!("{}/sweep.csv line {}: expected 4 columns", dir.display(), i + 1);
        };
        rows.push(SweepRow {
            threshold,
            success_rate,
            help_rate,
            mean_set_size,
        });
    }
    let mode = summary.mode.parse::<MethodMode>().map_err(|e| anyhow!(e))?;
    Ok(SweepReport {
        rows,
        auc: summary.auc,
        mode,
        n: summary.n,
    })
}

fn cmd_report(dirs: &[PathBuf], success: &[f64]) -> Result<()> {
    let mut headers = vec!["dir".to_string(), "mode".into(), "n".into(), "auc".into()];
    headers.extend(success.iter().map(|s| format!("help@{s}")));
    println!("{}", headers.join("\t"));
    for dir in dirs {
        let r = read_report(dir)?;
        let mut cells = vec![dir.display().to_string(), r.mode.to_string(), r.n.to_string(), format!("{:.4}", r.auc)];
        cells.extend(
            success
                .iter()
                .map(|s| help_at_success(&r.rows, *s).map_or("-".into(), |h| format!("{h:.4}"))),
        );
        println!("{}", cells.join("\t"));
    }
    Ok(())
}

fn exit_code(e: &anyhow::Error) -> (u8, &'static str) {
    if e.downcast_ref::<UsageError>().is_some() {
        return (2, "usage");
    }
    for cause in e.chain() {
        if cause.downcast_ref::<BackendError>().is_some() {
            return (3, "backend");
        }
        if let Some(h) = cause.downcast_ref::<HarnessError>() {
            if h.is_backend() {
                return (3, "backend");
            }
            if matches!(h, HarnessError::InvalidAlpha(_) | HarnessError::InvalidThresholds(_)) {
                return (2, "usage");
            }
        }
        if cause.downcast_ref::<lbap::posterior::PosteriorError>().is_some() {
            return (2, "usage");
        }
        if cause.downcast_ref::<ConfigError>().is_some() || cause.downcast_ref::<ScenarioError>().is_some() {
            return (4, "data");
        }
    }
    (4, "data")
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Generate { n, seed, spec, out } => cmd_generate(n, seed, spec, out),
        Command::Record { common } => cmd_record(&common),
        Command::Run { common } => cmd_run(&common),
        Command::Sweep { common } => cmd_sweep(&common),
        Command::Calibrate { common, alpha } => cmd_calibrate(&common, alpha),
        Command::Report { dirs, success } => cmd_report(&dirs, &success),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let (code, kind) = exit_code(&e);
            let chain: Vec<String> = e.chain().map(|c| c.to_string()).collect();
            eprintln!("{}", json!({ "error": chain.join(": "), "kind": kind, "exit_code": code }));
            ExitCode::from(code)
        }
    }
}
