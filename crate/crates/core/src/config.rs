//! Run configuration loaded from a TOML file.
//!
//! Relative paths resolve against the directory holding the file, and every
//! referenced file must exist at load time. Credentials are never read from
//! here: the HTTP backend names an environment variable instead.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{HttpConfig, QueryKind, SyntheticProfile};
use crate::environment::{Environment, EnvironmentKind};
use crate::grounding::GroundingConfig;
use crate::harness::{default_grid, HarnessConfig, RunMode};
use crate::mcqa::McqaTemplates;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Parse { path: String, message: String },
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("referenced file does not exist: {0}")]
    MissingFile(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BackendKind {
    #[default]
    Synthetic,
    Replay,
    Http,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendSection {
    pub kind: BackendKind,
    /// Replay fixture file, required for `replay`.
    pub fixtures: Option<PathBuf>,
    pub synthetic: SyntheticProfile,
    pub http: HttpConfig,
}

/// Optional replacements for the shipped prompt files.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PromptPaths {
    pub generation: Option<PathBuf>,
    pub scoring: Option<PathBuf>,
    pub prompt_set: Option<PathBuf>,
    pub binary: Option<PathBuf>,
    /// Replaces the shipped knowledge prompt; each file adds one factor.
    pub knowledge: Vec<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Required for synthetic backends and scenario generation.
    pub seed: Option<u64>,
    pub environment: EnvironmentKind,
    /// Tabletop colors; defaults to red, yellow and green.
    pub palette: Option<Vec<String>>,
    pub mode: String,
    pub threshold: Option<f64>,
    /// Sweep thresholds; defaults to the 15-point log grid.
    pub grid: Option<Vec<f64>>,
    pub grounding: GroundingConfig,
    pub workers: usize,
    pub max_error_fraction: f64,
    /// Directory for the query cache, stored in replay-fixture format.
    pub cache_dir: Option<PathBuf>,
    pub backend: BackendSection,
    /// Per-query-kind overrides of `backend`, keyed by query kind
    /// (e.g. `[routes.world_knowledge]`).
    pub routes: BTreeMap<QueryKind, BackendSection>,
    pub prompts: PromptPaths,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: None,
            environment: EnvironmentKind::Tabletop,
            palette: None,
            mode: "full".into(),
            threshold: None,
            grid: None,
            grounding: GroundingConfig::default(),
            workers: 1,
            max_error_fraction: 0.0,
            cache_dir: None,
            backend: BackendSection::default(),
            routes: BTreeMap::new(),
            prompts: PromptPaths::default(),
        }
    }
}

fn read(path: &Path) -> Result<String, ConfigError> {
    fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn resolve(base: &Path, p: &mut PathBuf) {
    if p.is_relative() {
        *p = base.join(&*p);
    }
}

fn require(p: &Path) -> Result<(), ConfigError> {
    if p.is_file() {
        Ok(())
    } else {
        Err(ConfigError::MissingFile(p.display().to_string()))
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError::Parse {
            path: "<config>".into(),
            message: e.to_string(),
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let mut cfg: RunConfig = toml::from_str(&read(path)?).map_err(|e| ConfigError::Parse {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        cfg.validate()?;
        Ok(cfg)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let p = &mut self.prompts;
        for slot in [&mut p.generation, &mut p.scoring, &mut p.prompt_set, &mut p.binary]
            .into_iter()
            .flatten()
        {
            resolve(base, slot);
        }
        for k in &mut p.knowledge {
            resolve(base, k);
        }
        for section in std::iter::once(&mut self.backend).chain(self.routes.values_mut()) {
            if let Some(f) = &mut section.fixtures {
                resolve(base, f);
            }
        }
        if let Some(d) = &mut self.cache_dir {
            resolve(base, d);
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.run_mode()?;
        self.grounding
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.validate_backend(&self.backend, "backend")?;
        for (kind, section) in &self.routes {
            self.validate_backend(section, &format!("routes.{kind}"))?;
        }
        let p = &self.prompts;
        for f in [&p.generation, &p.scoring, &p.prompt_set, &p.binary].into_iter().flatten() {
            require(f)?;
        }
        for f in &p.knowledge {
            require(f)?;
        }
        if let Some(t) = self.threshold {
            if !(t > 0.0 && t < 1.0) {
                return Err(ConfigError::Invalid(format!("threshold {t} must lie in (0,1)")));
            }
        }
        if let Some(g) = &self.grid {
            if g.is_empty() || g.iter().any(|t| !(*t > 0.0 && *t < 1.0)) {
                return Err(ConfigError::Invalid("grid values must lie in (0,1)".into()));
            }
        }
        if !(0.0..=1.0).contains(&self.max_error_fraction) {
            return Err(ConfigError::Invalid("max_error_fraction must lie in [0,1]".into()));
        }
        Ok(())
    }

    fn validate_backend(&self, section: &BackendSection, name: &str) -> Result<(), ConfigError> {
        match section.kind {
            BackendKind::Synthetic if self.seed.is_none() => Err(ConfigError::Invalid(format!(
                "`seed` is required for the synthetic backend in `{name}`"
            ))),
            BackendKind::Replay => {
                let f = section
                    .fixtures
                    .as_ref()
                    .ok_or_else(|| ConfigError::Invalid(format!("replay backend needs `{name}.fixtures`")))?;
                require(f)
            }
            BackendKind::Http => section
                .http
                .validate()
                .map_err(|e| ConfigError::Invalid(format!("{name}: {e}"))),
            BackendKind::Synthetic => Ok(()),
        }
    }

    pub fn run_mode(&self) -> Result<RunMode, ConfigError> {
        self.mode.parse().map_err(ConfigError::Invalid)
    }

    pub fn grid(&self) -> Vec<f64> {
        self.grid.clone().unwrap_or_else(default_grid)
    }

    pub fn harness_config(&self) -> HarnessConfig {
        HarnessConfig {
            grounding: self.grounding,
            workers: self.workers.max(1),
            max_error_fraction: self.max_error_fraction,
        }
    }

    /// Synthetic profile with the run seed applied.
    pub fn synthetic_profile(&self) -> SyntheticProfile {
        self.profile_for(&self.backend)
    }

    pub fn profile_for(&self, section: &BackendSection) -> SyntheticProfile {
        let mut profile = section.synthetic.clone();
        if let Some(seed) = self.seed {
            profile.seed = seed;
        }
        profile
    }

    /// Shipped environment with the configured palette and prompt files.
    pub fn build_environment(&self) -> Result<Environment, ConfigError> {
        let mut env = match (self.environment, &self.palette) {
            (EnvironmentKind::Tabletop, Some(palette)) => Environment::tabletop_with_palette(palette),
            (kind, _) => Environment::for_kind(kind),
        };
        let p = &self.prompts;
        let pick = |slot: &Option<PathBuf>, shipped: &str| -> Result<String, ConfigError> {
            match slot {
                Some(path) => Ok(read(path)?.trim_end().to_string()),
                None => Ok(shipped.to_string()),
            }
        };
        let t = &env.templates;
        env.templates = McqaTemplates::new(
            pick(&p.generation, &t.generation)?,
            pick(&p.scoring, &t.scoring)?,
            pick(&p.prompt_set, &t.prompt_set)?,
            pick(&p.binary, &t.binary)?,
        )
        .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if !p.knowledge.is_empty() {
            env.knowledge.clear();
            for path in &p.knowledge {
                env.add_knowledge_prompt(&read(path)?)
                    .map_err(|e| ConfigError::Invalid(format!("{}: {e}", path.display())))?;
            }
        }
        Ok(env)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::posterior::MethodMode;

    #[test]
    fn minimal_synthetic_config() {
        let cfg = RunConfig::from_toml("seed = 3\nmode = \"prior-only\"\n").unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.run_mode().unwrap(), RunMode::Method(MethodMode::PriorOnly));
        assert_eq!(cfg.synthetic_profile().seed, 3);
        assert_eq!(cfg.grid().len(), 15);
    }

    #[test]
    fn synthetic_requires_seed() {
        let cfg = RunConfig::from_toml("mode = \"full\"\n").unwrap();
        assert!(cfg.validate().unwrap_err().to_string().contains("seed"));
    }

    #[test]
    fn credentials_cannot_be_configured() {
        let text = "seed = 1\n[backend]\nkind = \"http\"\n[backend.http]\napi_key = \"sk-123\"\n";
        assert!(RunConfig::from_toml(text).is_err());
    }

    #[test]
    fn paths_resolve_and_must_exist() {
        let dir = tempfile::tempdir().unwrap();
        let cfg_path = dir.path().join("run.toml");
        fs::write(&cfg_path, "[backend]\nkind = \"replay\"\nfixtures = \"fx.jsonl\"\n").unwrap();
        let err = RunConfig::load(&cfg_path).unwrap_err();
        assert!(matches!(err, ConfigError::MissingFile(ref p) if p.ends_with("fx.jsonl")), "{err}");
        fs::write(dir.path().join("fx.jsonl"), "").unwrap();
        let cfg = RunConfig::load(&cfg_path).unwrap();
        assert_eq!(cfg.backend.fixtures.unwrap(), dir.path().join("fx.jsonl"));
    }

    #[test]
    fn prompt_overrides_are_loaded() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("gen.txt"), "Scene: {scene}\nTask: {instruction}\nOptions:\n").unwrap();
        let cfg_path = dir.path().join("run.toml");
        fs::write(&cfg_path, "seed = 1\npalette = [\"blue\", \"green\", \"yellow\"]\n[prompts]\ngeneration = \"gen.txt\"\n").unwrap();
        let env = RunConfig::load(&cfg_path).unwrap().build_environment().unwrap();
        assert_eq!(env.templates.generation, "Scene: {scene}\nTask: {instruction}\nOptions:");
        assert!(env.lexicon.is_attribute("blue"));
    }

    #[test]
    fn routes_are_validated_and_resolved() {
        let dir = tempfile::tempdir().unwrap();
        let cfg_path = dir.path().join("run.toml");
        fs::write(
            &cfg_path,
            "seed = 2\n[routes.world_knowledge]\nkind = \"replay\"\nfixtures = \"world.jsonl\"\n",
        )
        .unwrap();
        let err = RunConfig::load(&cfg_path).unwrap_err();
        assert!(matches!(err, ConfigError::MissingFile(_)), "{err}");
        fs::write(dir.path().join("world.jsonl"), "").unwrap();
        let cfg = RunConfig::load(&cfg_path).unwrap();
        let route = &cfg.routes[&QueryKind::WorldKnowledge];
        assert_eq!(route.fixtures.as_deref(), Some(dir.path().join("world.jsonl").as_path()));
        assert!(RunConfig::from_toml("seed = 1\n[routes.bogus]\n").is_err());
    }

    #[test]
    fn rejects_bad_values() {
        for text in ["seed = 1\nthreshold = 1.5\n", "seed = 1\nmode = \"best\"\n", "seed = 1\ngrid = []\n"] {
            assert!(RunConfig::from_toml(text).unwrap().validate().is_err(), "{text}");
        }
    }
}
