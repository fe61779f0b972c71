//! Posterior refinement, prediction sets and the execute/ask-help decision.
//!
//! The refined score of option `i` is `prior_i * P(S|y_i) * P(W|y_i)`,
//! renormalized over the candidate set. The prediction set keeps every option
//! whose refined score is strictly above the threshold; a singleton set is
//! executed, anything larger triggers a help request.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{Decision, PredictionSet};

#[derive(Debug, Error, PartialEq)]
pub enum PosteriorError {
    #[error("no candidates to score")]
    Empty,
    #[error("vector lengths disagree: prior {prior}, scene {scene}, world {world}")]
    LengthMismatch {
        prior: usize,
        scene: usize,
        world: usize,
    },
    #[error("non-finite or negative input probability")]
    InvalidInput,
    #[error("all unnormalized products vanish; posterior is undefined")]
    DegenerateMass,
    #[error("threshold {0} must lie strictly between 0 and 1")]
    InvalidThreshold(f64),
}

/// Which likelihood factors refine the prior.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MethodMode {
    /// Prior, scene grounding and world knowledge.
    Full,
    SceneOnly,
    WorldOnly,
    /// Raw MCQA prior thresholded directly.
    PriorOnly,
    /// Always executes the prior's argmax.
    NoHelp,
}

impl MethodMode {
    pub const ALL: [MethodMode; 5] = [
        MethodMode::Full,
        MethodMode::SceneOnly,
        MethodMode::WorldOnly,
        MethodMode::PriorOnly,
        MethodMode::NoHelp,
    ];

    pub fn uses_scene(self) -> bool {
        matches!(self, MethodMode::Full | MethodMode::SceneOnly)
    }

    pub fn uses_world(self) -> bool {
        matches!(self, MethodMode::Full | MethodMode::WorldOnly)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            MethodMode::Full => "full",
            MethodMode::SceneOnly => "scene-only",
            MethodMode::WorldOnly => "world-only",
            MethodMode::PriorOnly => "prior-only",
            MethodMode::NoHelp => "no-help",
        }
    }
}

impl fmt::Display for MethodMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MethodMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        MethodMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| format!("unknown method mode `{s}`"))
    }
}

/// A threshold in the open interval (0, 1).
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize)]
pub struct Threshold(f64);

impl Threshold {
    pub fn new(t: f64) -> Result<Self, PosteriorError> {
        if t > 0.0 && t < 1.0 {
            Ok(Self(t))
        } else {
            Err(PosteriorError::InvalidThreshold(t))
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

pub fn compute_posterior(
    prior: &[f64],
    scene_lik: &[f64],
    world_lik: &[f64],
    mode: MethodMode,
) -> Result<Vec<f64>, PosteriorError> {
    let n = prior.len();
    if n == 0 {
        return Err(PosteriorError::Empty);
    }
    if scene_lik.len() != n || world_lik.len() != n {
        return Err(PosteriorError::LengthMismatch {
            prior: n,
            scene: scene_lik.len(),
            world: world_lik.len(),
        });
    }
    let valid = |v: &f64| v.is_finite() && *v >= 0.0;
    if !prior.iter().chain(scene_lik).chain(world_lik).all(valid) {
        return Err(PosteriorError::InvalidInput);
    }

    let unnormalized: Vec<f64> = (0..n)
        .map(|i| {
            let mut p = prior[i];
            if mode.uses_scene() {
                p *= scene_lik[i];
            }
            if mode.uses_world() {
                p *= world_lik[i];
            }
            p
        })
        .collect();
    let mass: f64 = unnormalized.iter().sum();
    if mass <= 0.0 || !mass.is_finite() {
        return Err(PosteriorError::DegenerateMass);
    }
    Ok(unnormalized.into_iter().map(|p| p / mass).collect())
}

/// Index of the largest entry; the first one wins exact ties.
pub fn argmax(values: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, v) in values.iter().enumerate() {
        match best {
            Some(b) if values[b] >= *v => {}
            _ => best = Some(i),
        }
    }
    best
}

/// Options with posterior strictly above `t`. Falls back to the argmax
/// singleton when nothing clears the threshold.
pub fn build_prediction_set(posterior: &[f64], labels: &[char], t: Threshold) -> PredictionSet {
    assert_eq!(posterior.len(), labels.len(), "posterior/labels misaligned");
    let mut members: Vec<char> = posterior
        .iter()
        .zip(labels)
        .filter(|(p, _)| **p > t.value())
        .map(|(_, l)| *l)
        .collect();
    if members.is_empty() {
        let best = argmax(posterior).expect("non-empty posterior");
        members.push(labels[best]);
    }
    PredictionSet::from_members(members, t.value())
}

pub fn decide(pset: PredictionSet) -> Decision {
    if pset.is_singleton() {
        Decision::Execute(pset.members()[0])
    } else {
        Decision::AskHelp(pset)
    }
}
