//! Bayesian uncertainty alignment for language-model robot planners.
//!
//! A planner proposes candidate actions as a multiple-choice question; the
//! letter distribution is the prior. Scene grounding and world-knowledge
//! likelihoods refine it into a posterior, and options above a threshold form
//! a prediction set. A singleton set is executed; otherwise the robot asks
//! for help.

pub mod backend;
pub mod config;
pub mod domain;
pub mod environment;
pub mod grounding;
pub mod harness;
pub mod knowledge;
pub mod mcqa;
pub mod posterior;
pub mod scenarios;
pub mod seeding;

pub use domain::{
    Ambiguity, BBox, CandidateAction, CandidateSet, Decision, Detection, Lexicon, ObjectRef, PredictionSet,
    Scenario, SceneContext,
};
pub use posterior::{build_prediction_set, compute_posterior, decide, MethodMode, Threshold};
