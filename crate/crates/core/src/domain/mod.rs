//! Shared vocabulary: objects, scenes, candidate actions, prediction sets and
//! decisions.

mod lexicon;

use std::fmt;
use std::hash::{Hash, Hasher};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use lexicon::{tokenize, Lexicon, ObjectSpan};

#[derive(Debug, Error, PartialEq)]
pub enum DomainError {
    #[error("invariant violated on `{field}`: {reason}")]
    Invariant { field: &'static str, reason: String },
}

fn invariant(field: &'static str, reason: impl Into<String>) -> DomainError {
    DomainError::Invariant {
        field,
        reason: reason.into(),
    }
}

/// An object phrase such as "blue bowl". Identity is the canonical name:
/// lowercase attributes in sorted order followed by the head noun.
#[derive(Debug, Clone, Eq, PartialOrd, Ord)]
pub struct ObjectRef {
    canonical_name: String,
    attributes: Vec<String>,
    noun: String,
}

impl ObjectRef {
    pub fn from_parts<I, S>(attributes: I, noun: impl Into<String>) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut attributes: Vec<String> = attributes
            .into_iter()
            .map(|a| a.into().trim().to_lowercase())
            .filter(|a| !a.is_empty())
            .collect();
        attributes.sort();
        let noun = noun
            .into()
            .split_whitespace()
            .collect::<Vec<_>>()
            .join(" ")
            .to_lowercase();
        let canonical_name = attributes
            .iter()
            .map(String::as_str)
            .chain(std::iter::once(noun.as_str()))
            .collect::<Vec<_>>()
            .join(" ");
        Self {
            canonical_name,
            attributes,
            noun,
        }
    }

    pub fn canonical_name(&self) -> &str {
        &self.canonical_name
    }

    pub fn attributes(&self) -> &[String] {
        &self.attributes
    }

    pub fn noun(&self) -> &str {
        &self.noun
    }
}

impl PartialEq for ObjectRef {
    fn eq(&self, other: &Self) -> bool {
        self.canonical_name == other.canonical_name
    }
}

impl Hash for ObjectRef {
    fn hash<H: Hasher>(&self, state: &mut H) {
        self.canonical_name.hash(state);
    }
}

impl fmt::Display for ObjectRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.canonical_name)
    }
}

/// Axis-aligned box in normalized image coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl BBox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self, DomainError> {
        let in_unit = |v: f64| (0.0..=1.0).contains(&v);
        if ![x_min, y_min, x_max, y_max].into_iter().all(in_unit) {
            return Err(invariant("bbox", "coordinates must lie in [0,1]"));
        }
        if x_min > x_max || y_min > y_max {
            return Err(invariant("bbox", "min must not exceed max on either axis"));
        }
        Ok(Self {
            x_min,
            y_min,
            x_max,
            y_max,
        })
    }

    pub fn area(&self) -> f64 {
        (self.x_max - self.x_min) * (self.y_max - self.y_min)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub object: ObjectRef,
    pub bbox: BBox,
    pub score: f64,
}

impl Detection {
    pub fn new(object: ObjectRef, bbox: BBox, score: f64) -> Result<Self, DomainError> {
        if !(0.0..=1.0).contains(&score) {
            return Err(invariant("detections.score", format!("{score} not in [0,1]")));
        }
        Ok(Self {
            object,
            bbox,
            score,
        })
    }
}

/// What the robot knows about its surroundings: the found-object set, a prose
/// description for prompts, and optional detector output.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneContext {
    objects: Vec<ObjectRef>,
    description: String,
    detections: Vec<Detection>,
}

impl SceneContext {
    /// `objects` keeps its order (prompts list objects as given) and must be
    /// duplicate-free.
    pub fn new(objects: Vec<ObjectRef>, description: impl Into<String>) -> Result<Self, DomainError> {
        for (i, o) in objects.iter().enumerate() {
            if objects[..i].contains(o) {
                return Err(invariant(
                    "scene.objects",
                    format!("duplicate object `{}`", o.canonical_name()),
                ));
            }
        }
        Ok(Self {
            objects,
            description: description.into(),
            detections: Vec::new(),
        })
    }

    pub fn with_detections(mut self, detections: Vec<Detection>) -> Self {
        self.detections = detections;
        self
    }

    pub fn objects(&self) -> &[ObjectRef] {
        &self.objects
    }

    pub fn contains(&self, object: &ObjectRef) -> bool {
        self.objects.contains(object)
    }

    pub fn description(&self) -> &str {
        &self.description
    }

    pub fn detections(&self) -> &[Detection] {
        &self.detections
    }
}

/// Option letter: `A` for index 0, `B` for 1, and so on.
pub fn label_for(index: usize) -> char {
    assert!(index < 26, "at most 26 options are supported");
    (b'A' + index as u8) as char
}

#[derive(Debug, Clone, PartialEq)]
pub struct CandidateAction {
    pub label: char,
    pub text: String,
    pub mentioned_objects: Vec<ObjectRef>,
}

impl CandidateAction {
    pub fn new(label: char, text: impl Into<String>, lexicon: &Lexicon) -> Result<Self, DomainError> {
        let text = text.into();
        if text.trim().is_empty() {
            return Err(invariant("candidate.text", "empty action text"));
        }
        if !label.is_ascii_uppercase() {
            return Err(invariant("candidate.label", format!("`{label}` is not a letter")));
        }
        let mentioned_objects = lexicon.parse_objects(&text);
        Ok(Self {
            label,
            text,
            mentioned_objects,
        })
    }
}

/// Candidates with the prior, both likelihood vectors and the posterior,
/// index-aligned.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateSet {
    candidates: Vec<CandidateAction>,
    prior: Vec<f64>,
    scene_lik: Vec<f64>,
    world_lik: Vec<f64>,
    posterior: Vec<f64>,
}

const SUM_TOLERANCE: f64 = 1e-9;

fn check_distribution(field: &'static str, v: &[f64]) -> Result<(), DomainError> {
    if v.iter().any(|p| !p.is_finite() || *p < 0.0) {
        return Err(invariant(field, "entries must be finite and non-negative"));
    }
    let sum: f64 = v.iter().sum();
    if (sum - 1.0).abs() > SUM_TOLERANCE {
        return Err(invariant(field, format!("sums to {sum}, expected 1")));
    }
    Ok(())
}

fn check_likelihood(field: &'static str, v: &[f64]) -> Result<(), DomainError> {
    if v.iter().any(|p| !(*p > 0.0 && *p <= 1.0)) {
        return Err(invariant(field, "entries must lie in (0,1]"));
    }
    Ok(())
}

impl CandidateSet {
    pub fn new(
        candidates: Vec<CandidateAction>,
        prior: Vec<f64>,
        scene_lik: Vec<f64>,
        world_lik: Vec<f64>,
        posterior: Vec<f64>,
    ) -> Result<Self, DomainError> {
        let n = candidates.len();
        if n == 0 {
            return Err(invariant("candidates", "at least one candidate required"));
        }
        for (field, len) in [
            ("prior", prior.len()),
            ("scene_lik", scene_lik.len()),
            ("world_lik", world_lik.len()),
            ("posterior", posterior.len()),
        ] {
            if len != n {
                return Err(invariant("candidates", format!("{field} has length {len}, expected {n}")));
            }
        }
        for (i, c) in candidates.iter().enumerate() {
            if candidates[..i].iter().any(|o| o.label == c.label) {
                return Err(invariant("candidates.label", format!("duplicate label {}", c.label)));
            }
        }
        check_distribution("prior", &prior)?;
        check_distribution("posterior", &posterior)?;
        check_likelihood("scene_lik", &scene_lik)?;
        check_likelihood("world_lik", &world_lik)?;
        Ok(Self {
            candidates,
            prior,
            scene_lik,
            world_lik,
            posterior,
        })
    }

    pub fn candidates(&self) -> &[CandidateAction] {
        &self.candidates
    }

    pub fn labels(&self) -> Vec<char> {
        self.candidates.iter().map(|c| c.label).collect()
    }

    pub fn prior(&self) -> &[f64] {
        &self.prior
    }

    pub fn scene_lik(&self) -> &[f64] {
        &self.scene_lik
    }

    pub fn world_lik(&self) -> &[f64] {
        &self.world_lik
    }

    pub fn posterior(&self) -> &[f64] {
        &self.posterior
    }

    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }

    pub fn by_label(&self, label: char) -> Option<&CandidateAction> {
        self.candidates.iter().find(|c| c.label == label)
    }
}

/// Options whose refined probability clears the threshold. Never empty.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PredictionSet {
    members: Vec<char>,
    threshold: f64,
}

impl PredictionSet {
    pub(crate) fn from_members(members: Vec<char>, threshold: f64) -> Self {
        debug_assert!(!members.is_empty());
        Self { members, threshold }
    }

    pub fn members(&self) -> &[char] {
        &self.members
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn is_singleton(&self) -> bool {
        self.members.len() == 1
    }

    pub fn contains(&self, label: char) -> bool {
        self.members.contains(&label)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Decision {
    Execute(char),
    AskHelp(PredictionSet),
}

impl Decision {
    pub fn set_size(&self) -> usize {
        match self {
            Decision::Execute(_) => 1,
            Decision::AskHelp(p) => p.len(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ambiguity {
    Attribute,
    Numeric,
    Spatial,
    SingleLabel,
    CreativeSingleLabel,
    MultiLabel,
    CreativeMultiLabel,
    SpatiallyAmbiguous,
    Unsafe,
    Winograd,
    None,
}

impl Ambiguity {
    pub const ALL: [Ambiguity; 11] = [
        Ambiguity::Attribute,
        Ambiguity::Numeric,
        Ambiguity::Spatial,
        Ambiguity::SingleLabel,
        Ambiguity::CreativeSingleLabel,
        Ambiguity::MultiLabel,
        Ambiguity::CreativeMultiLabel,
        Ambiguity::SpatiallyAmbiguous,
        Ambiguity::Unsafe,
        Ambiguity::Winograd,
        Ambiguity::None,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Ambiguity::Attribute => "attribute",
            Ambiguity::Numeric => "numeric",
            Ambiguity::Spatial => "spatial",
            Ambiguity::SingleLabel => "single-label",
            Ambiguity::CreativeSingleLabel => "creative-single-label",
            Ambiguity::MultiLabel => "multi-label",
            Ambiguity::CreativeMultiLabel => "creative-multi-label",
            Ambiguity::SpatiallyAmbiguous => "spatially-ambiguous",
            Ambiguity::Unsafe => "unsafe",
            Ambiguity::Winograd => "winograd",
            Ambiguity::None => "none",
        }
    }
}

impl fmt::Display for Ambiguity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub id: String,
    pub scene: SceneContext,
    pub instruction: String,
    pub ambiguity: Ambiguity,
    pub true_actions: Vec<String>,
}

impl Scenario {
    pub fn new(
        id: impl Into<String>,
        scene: SceneContext,
        instruction: impl Into<String>,
        ambiguity: Ambiguity,
        true_actions: Vec<String>,
    ) -> Result<Self, DomainError> {
        let instruction = instruction.into();
        if instruction.trim().is_empty() {
            return Err(invariant("instruction", "empty instruction"));
        }
        if true_actions.is_empty() {
            return Err(invariant("true_actions", "at least one acceptable action required"));
        }
        if true_actions.iter().any(|a| a.trim().is_empty()) {
            return Err(invariant("true_actions", "empty action string"));
        }
        Ok(Self {
            id: id.into(),
            scene,
            instruction,
            ambiguity,
            true_actions,
        })
    }

    pub fn from_record(record: ScenarioRecord, lexicon: &Lexicon) -> Result<Self, DomainError> {
        let objects = record.scene.objects.iter().map(|o| lexicon.object(o)).collect();
        let scene = SceneContext::new(objects, record.scene.description)?;
        Self::new(
            record.id,
            scene,
            record.instruction,
            record.ambiguity,
            record.true_actions,
        )
    }

    pub fn to_record(&self) -> ScenarioRecord {
        ScenarioRecord {
            id: self.id.clone(),
            scene: SceneRecord {
                objects: self
                    .scene
                    .objects()
                    .iter()
                    .map(|o| o.canonical_name().to_string())
                    .collect(),
                description: self.scene.description().to_string(),
            },
            instruction: self.instruction.clone(),
            ambiguity: self.ambiguity,
            true_actions: self.true_actions.clone(),
        }
    }
}

/// One line of a scenario JSONL file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioRecord {
    pub id: String,
    pub scene: SceneRecord,
    pub instruction: String,
    pub ambiguity: Ambiguity,
    pub true_actions: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneRecord {
    pub objects: Vec<String>,
    pub description: String,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn object_equality_is_canonical_name() {
        let a = ObjectRef::from_parts(["red", "metal"], "bowl");
        let b = ObjectRef::from_parts(["metal", "red"], "Bowl");
        assert_eq!(a, b);
        assert_eq!(a.canonical_name(), "metal red bowl");
    }

    #[test]
    fn scene_rejects_duplicates() {
        let o = ObjectRef::from_parts(["red"], "block");
        let err = SceneContext::new(vec![o.clone(), o], "x").unwrap_err();
        assert!(matches!(err, DomainError::Invariant { field: "scene.objects", .. }));
    }

    #[test]
    fn bbox_validation() {
        assert!(BBox::new(0.0, 0.0, 1.0, 1.0).is_ok());
        assert!(BBox::new(0.5, 0.0, 0.4, 1.0).is_err());
        assert!(BBox::new(0.0, 0.0, 1.1, 1.0).is_err());
    }

    #[test]
    fn detection_score_bounds() {
        let o = ObjectRef::from_parts(Vec::<String>::new(), "apple");
        let b = BBox::new(0.0, 0.0, 0.1, 0.1).unwrap();
        assert!(Detection::new(o.clone(), b, 1.0).is_ok());
        assert!(Detection::new(o, b, 1.2).is_err());
    }

    #[test]
    fn candidate_set_invariants() {
        let lex = Lexicon::new().with_nouns(["apple"]);
        let c = |l: char| CandidateAction::new(l, "pick up the apple", &lex).unwrap();
        assert!(CandidateSet::new(
            vec![c('A'), c('B')],
            vec![0.5, 0.5],
            vec![1.0, 0.001],
            vec![1.0, 1.0],
            vec![0.9, 0.1]
        )
        .is_ok());
        // prior does not sum to 1
        assert!(CandidateSet::new(vec![c('A')], vec![0.9], vec![1.0], vec![1.0], vec![1.0]).is_err());
        // zero likelihood
        assert!(CandidateSet::new(vec![c('A')], vec![1.0], vec![0.0], vec![1.0], vec![1.0]).is_err());
        // duplicate labels
        assert!(CandidateSet::new(
            vec![c('A'), c('A')],
            vec![0.5, 0.5],
            vec![1.0, 1.0],
            vec![1.0, 1.0],
            vec![0.5, 0.5]
        )
        .is_err());
    }

    #[test]
    fn scenario_requires_truth() {
        let scene = SceneContext::new(vec![], "empty").unwrap();
        assert!(Scenario::new("s", scene.clone(), "do it", Ambiguity::None, vec![]).is_err());
        assert!(Scenario::new("s", scene, " ", Ambiguity::None, vec!["x".into()]).is_err());
    }

    #[test]
    fn ambiguity_serde_names() {
        for a in Ambiguity::ALL {
            let s = serde_json::to_string(&a).unwrap();
            assert_eq!(s, format!("\"{}\"", a.as_str()));
        }
    }
}
