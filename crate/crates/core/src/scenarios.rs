//! Scenario generation, loading and episode judging.
//!
//! Tabletop goals follow the template
//! `{verb} {quantity} {color} {kind} {relation} the {color} {kind}` and the
//! instruction is derived from the goal by one ambiguity: attribute (noun or
//! color replaced by a synonym), numeric (count replaced by a vague
//! quantity) or spatial (direction replaced by a vague relation). The type is
//! uniform and the case is uniform within the type.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::rngs::StdRng;
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{Ambiguity, Decision, DomainError, Lexicon, ObjectRef, Scenario, ScenarioRecord, SceneContext, CandidateAction};
use crate::knowledge::oxford_join;
use crate::seeding::derive_seed;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: invariant violated on `{field}`: {reason}")]
    InvariantViolation {
        line: usize,
        field: String,
        reason: String,
    },
    #[error("invalid tabletop spec: {0}")]
    InvalidSpec(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

fn io_err(path: &Path, source: std::io::Error) -> ScenarioError {
    ScenarioError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Synonym tables for the three tabletop ambiguity types.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AmbiguityTables {
    pub block_synonyms: Vec<String>,
    pub bowl_synonyms: Vec<String>,
    pub generic_nouns: Vec<String>,
    /// color -> phrases that stand for it; only palette colors are used.
    pub color_synonyms: BTreeMap<String, Vec<String>>,
    /// vague quantity -> concrete counts it may mean.
    pub numeric: BTreeMap<String, Vec<u32>>,
    /// vague relation -> concrete relations it may mean.
    pub spatial: BTreeMap<String, Vec<String>>,
}

fn strings(v: &[&str]) -> Vec<String> {
    v.iter().map(|s| s.to_string()).collect()
}

impl Default for AmbiguityTables {
    fn default() -> Self {
        let dirs = ["to the left of", "to the right of", "to the front of", "at the back of"];
        let mut spatial = BTreeMap::new();
        for near in ["near", "close to", "beside", "next to"] {
            spatial.insert(near.to_string(), strings(&dirs));
        }
        spatial.insert("lateral to".into(), strings(&dirs[..2]));
        spatial.insert("along the line of sight of".into(), strings(&dirs[2..]));
        Self {
            block_synonyms: strings(&["cube", "cuboid", "box", "square object"]),
            bowl_synonyms: strings(&["container", "round object", "receptacle"]),
            generic_nouns: strings(&["object", "item", "thing"]),
            color_synonyms: BTreeMap::from([
                ("blue".to_string(), strings(&["cyan", "navy"])),
                ("green".to_string(), strings(&["greenish", "grass-colored"])),
                ("yellow".to_string(), strings(&["orange", "gold"])),
            ]),
            numeric: ["a few", "a couple of", "some", "a handful of"]
                .into_iter()
                .map(|q| (q.to_string(), vec![2, 3]))
                .collect(),
            spatial,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TabletopSpec {
    pub verbs: Vec<String>,
    pub quantities: Vec<String>,
    pub object_kinds: Vec<String>,
    pub relations: Vec<String>,
    pub colors: Vec<String>,
    pub ambiguity_tables: AmbiguityTables,
}

impl Default for TabletopSpec {
    fn default() -> Self {
        Self {
            verbs: strings(&["put", "place", "move"]),
            quantities: strings(&["a", "one", "a single of", "two", "a pair of", "three", "all"]),
            object_kinds: strings(&["block", "bowl"]),
            relations: strings(&["on", "to the left of", "to the right of", "to the front of", "at the back of"]),
            colors: strings(&["red", "yellow", "green"]),
            ambiguity_tables: AmbiguityTables::default(),
        }
    }
}

/// One enumerated way of making a goal ambiguous.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub enum TabletopCase {
    BlockNoun(String),
    BowlNoun(String),
    GenericNoun(String),
    ColorSynonym { color: String, phrase: String },
    Quantity(String),
    Relation(String),
}

impl TabletopCase {
    pub fn ambiguity(&self) -> Ambiguity {
        match self {
            TabletopCase::BlockNoun(_)
            | TabletopCase::BowlNoun(_)
            | TabletopCase::GenericNoun(_)
            | TabletopCase::ColorSynonym { .. } => Ambiguity::Attribute,
            TabletopCase::Quantity(_) => Ambiguity::Numeric,
            TabletopCase::Relation(_) => Ambiguity::Spatial,
        }
    }
}

const NUMBER_WORDS: [&str; 6] = ["zero", "one", "two", "three", "four", "five"];

fn number_word(n: u32) -> String {
    NUMBER_WORDS
        .get(n as usize)
        .map(|s| s.to_string())
        .unwrap_or_else(|| n.to_string())
}

impl TabletopSpec {
    pub fn validate(&self) -> Result<(), ScenarioError> {
        let bad = |m: &str| Err(ScenarioError::InvalidSpec(m.to_string()));
        if self.verbs.is_empty() {
            return bad("verbs must be non-empty");
        }
        if self.colors.len() < 2 {
            return bad("at least two colors are required");
        }
        let mut sorted = self.colors.clone();
        sorted.sort();
        sorted.dedup();
        if sorted.len() != self.colors.len() {
            return bad("colors must be distinct");
        }
        for kind in ["block", "bowl"] {
            if !self.object_kinds.iter().any(|k| k == kind) {
                return bad("object_kinds must include block and bowl");
            }
        }
        if self.relations.is_empty() {
            return bad("relations must be non-empty");
        }
        let t = &self.ambiguity_tables;
        for (q, counts) in &t.numeric {
            if counts.is_empty() {
                return bad(&format!("quantity `{q}` maps to no count"));
            }
        }
        for (phrase, rels) in &t.spatial {
            if rels.is_empty() {
                return bad(&format!("relation `{phrase}` maps to no direction"));
            }
        }
        for (color, phrases) in &t.color_synonyms {
            if phrases.is_empty() {
                return bad(&format!("color `{color}` has an empty synonym list"));
            }
        }
        if self.cases(Ambiguity::Attribute).is_empty()
            || self.cases(Ambiguity::Numeric).is_empty()
            || self.cases(Ambiguity::Spatial).is_empty()
        {
            return bad("every ambiguity type needs at least one case");
        }
        Ok(())
    }

    /// Cases of one ambiguity type, in a fixed order.
    pub fn cases(&self, ambiguity: Ambiguity) -> Vec<TabletopCase> {
        let t = &self.ambiguity_tables;
        match ambiguity {
            Ambiguity::Attribute => {
                let mut out: Vec<TabletopCase> = Vec::new();
                out.extend(t.block_synonyms.iter().cloned().map(TabletopCase::BlockNoun));
                out.extend(t.bowl_synonyms.iter().cloned().map(TabletopCase::BowlNoun));
                out.extend(t.generic_nouns.iter().cloned().map(TabletopCase::GenericNoun));
                for color in &self.colors {
                    for phrase in t.color_synonyms.get(color).into_iter().flatten() {
                        out.push(TabletopCase::ColorSynonym {
                            color: color.clone(),
                            phrase: phrase.clone(),
                        });
                    }
                }
                out
            }
            Ambiguity::Numeric => t.numeric.keys().cloned().map(TabletopCase::Quantity).collect(),
            Ambiguity::Spatial => t.spatial.keys().cloned().map(TabletopCase::Relation).collect(),
            _ => Vec::new(),
        }
    }
}

pub const TABLETOP_TYPES: [Ambiguity; 3] = [Ambiguity::Attribute, Ambiguity::Numeric, Ambiguity::Spatial];

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedScenario {
    pub scenario: Scenario,
    pub case: TabletopCase,
}

#[derive(Debug, Clone)]
struct Thing {
    color: String,
    kind: String,
}

impl Thing {
    fn name(&self) -> String {
        format!("{} {}", self.color, self.kind)
    }
}

/// `on` reads as `in` when the target is a bowl.
fn render_relation(relation: &str, target_kind: &str) -> String {
    if relation == "on" && target_kind == "bowl" {
        "in".into()
    } else {
        relation.into()
    }
}

fn full_scene(colors: &[String], lexicon: &Lexicon) -> SceneContext {
    let mut names = Vec::new();
    for kind in ["block", "bowl"] {
        for c in colors {
            names.push(format!("{c} {kind}"));
        }
    }
    let phrases: Vec<String> = names.iter().map(|n| format!("a {n}")).collect();
    let description = format!("On the table, there are {}.", oxford_join(&phrases));
    let objects = names.iter().map(|n| lexicon.object(n)).collect();
    SceneContext::new(objects, description).expect("distinct palette")
}

fn numeric_scene(block_color: &str, colors: &[String], lexicon: &Lexicon) -> SceneContext {
    let mut names = vec![format!("{block_color} block")];
    names.extend(colors.iter().map(|c| format!("{c} bowl")));
    let mut phrases = vec![format!("three {block_color} blocks")];
    phrases.extend(colors.iter().map(|c| format!("a {c} bowl")));
    let description = format!("On the table, there are {}.", oxford_join(&phrases));
    let objects = names.iter().map(|n| lexicon.object(n)).collect();
    SceneContext::new(objects, description).expect("distinct palette")
}

fn pick<'a, T>(rng: &mut StdRng, items: &'a [T]) -> &'a T {
    items.choose(rng).expect("non-empty choice")
}

struct Generator<'a> {
    spec: &'a TabletopSpec,
    lexicon: &'a Lexicon,
}

impl Generator<'_> {
    fn action(&self, mover: &str, relation: &str, target: &Thing) -> String {
        format!(
            "put the {mover} {} the {}",
            render_relation(relation, &target.kind),
            target.name()
        )
    }

    fn random_pair(&self, rng: &mut StdRng, mover_kind: Option<&str>) -> (Thing, Thing) {
        let kinds = ["block", "bowl"];
        let mover = Thing {
            color: pick(rng, &self.spec.colors).clone(),
            kind: mover_kind.map(str::to_string).unwrap_or_else(|| pick(rng, &kinds).to_string()),
        };
        loop {
            let target = Thing {
                color: pick(rng, &self.spec.colors).clone(),
                kind: pick(rng, &kinds).to_string(),
            };
            if target.name() != mover.name() {
                return (mover, target);
            }
        }
    }

    fn build(&self, rng: &mut StdRng, case: &TabletopCase) -> (SceneContext, String, Vec<String>) {
        let verb = pick(rng, &self.spec.verbs).clone();
        let colors = &self.spec.colors;
        match case {
            TabletopCase::BlockNoun(phrase) | TabletopCase::BowlNoun(phrase) => {
                let kind = if matches!(case, TabletopCase::BlockNoun(_)) { "block" } else { "bowl" };
                let (_, target) = self.random_pair(rng, Some(kind));
                let relation = pick(rng, &self.spec.relations).clone();
                let rel = render_relation(&relation, &target.kind);
                let instruction = format!("{verb} the {phrase} {rel} the {}", target.name());
                let truths = colors
                    .iter()
                    .map(|c| format!("{c} {kind}"))
                    .filter(|m| *m != target.name())
                    .map(|m| self.action(&m, &relation, &target))
                    .collect();
                (full_scene(colors, self.lexicon), instruction, truths)
            }
            TabletopCase::GenericNoun(noun) => {
                let (mover, target) = self.random_pair(rng, None);
                let relation = pick(rng, &self.spec.relations).clone();
                let rel = render_relation(&relation, &target.kind);
                let instruction = format!("{verb} the {} {noun} {rel} the {}", mover.color, target.name());
                let truths = ["block", "bowl"]
                    .iter()
                    .map(|k| format!("{} {k}", mover.color))
                    .filter(|m| *m != target.name())
                    .map(|m| self.action(&m, &relation, &target))
                    .collect();
                (full_scene(colors, self.lexicon), instruction, truths)
            }
            TabletopCase::ColorSynonym { color, phrase } => {
                let (mover, target) = loop {
                    let (m, t) = self.random_pair(rng, None);
                    let m = Thing {
                        color: color.clone(),
                        kind: m.kind,
                    };
                    if m.name() != t.name() {
                        break (m, t);
                    }
                };
                let relation = pick(rng, &self.spec.relations).clone();
                let rel = render_relation(&relation, &target.kind);
                let instruction = format!("{verb} the {phrase} {} {rel} the {}", mover.kind, target.name());
                let truths = vec![self.action(&mover.name(), &relation, &target)];
                (full_scene(colors, self.lexicon), instruction, truths)
            }
            TabletopCase::Quantity(q) => {
                let counts = &self.spec.ambiguity_tables.numeric[q];
                let block_color = pick(rng, colors).clone();
                let target = Thing {
                    color: pick(rng, colors).clone(),
                    kind: "bowl".into(),
                };
                let instruction = format!("{verb} {q} blocks in the {}", target.name());
                let truths = counts
                    .iter()
                    .map(|n| {
                        let noun = if *n == 1 { "block" } else { "blocks" };
                        format!("put {} {block_color} {noun} in the {}", number_word(*n), target.name())
                    })
                    .collect();
                (numeric_scene(&block_color, colors, self.lexicon), instruction, truths)
            }
            TabletopCase::Relation(phrase) => {
                let (mover, target) = self.random_pair(rng, None);
                let dirs = &self.spec.ambiguity_tables.spatial[phrase];
                let instruction = format!("{verb} the {} {phrase} the {}", mover.name(), target.name());
                let truths = dirs.iter().map(|d| self.action(&mover.name(), d, &target)).collect();
                (full_scene(colors, self.lexicon), instruction, truths)
            }
        }
    }
}

/// `n` scenarios with the case each was drawn from.
pub fn generate_tabletop_cases(
    n: usize,
    seed: u64,
    spec: &TabletopSpec,
    lexicon: &Lexicon,
) -> Result<Vec<GeneratedScenario>, ScenarioError> {
    spec.validate()?;
    let mut rng = StdRng::seed_from_u64(derive_seed([b"tabletop".as_slice(), &seed.to_le_bytes()]));
    let cases: Vec<Vec<TabletopCase>> = TABLETOP_TYPES.iter().map(|a| spec.cases(*a)).collect();
    let gen = Generator { spec, lexicon };
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let type_cases = &cases[rng.random_range(0..cases.len())];
        let case = pick(&mut rng, type_cases).clone();
        let (scene, instruction, truths) = gen.build(&mut rng, &case);
        let scenario = Scenario::new(format!("tt-{seed}-{i:05}"), scene, instruction, case.ambiguity(), truths)
            .map_err(|e| ScenarioError::InvalidSpec(e.to_string()))?;
        out.push(GeneratedScenario { scenario, case });
    }
    Ok(out)
}

pub fn generate_tabletop(n: usize, seed: u64, spec: &TabletopSpec, lexicon: &Lexicon) -> Result<Vec<Scenario>, ScenarioError> {
    Ok(generate_tabletop_cases(n, seed, spec, lexicon)?
        .into_iter()
        .map(|g| g.scenario)
        .collect())
}

pub fn parse_scenarios(text: &str, lexicon: &Lexicon) -> Result<Vec<Scenario>, ScenarioError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        push_line(&mut out, i + 1, line, lexicon)?;
    }
    Ok(out)
}

fn push_line(out: &mut Vec<Scenario>, line_no: usize, line: &str, lexicon: &Lexicon) -> Result<(), ScenarioError> {
    if line.trim().is_empty() {
        return Ok(());
    }
    let record: ScenarioRecord = serde_json::from_str(line).map_err(|e| ScenarioError::Parse {
        line: line_no,
        message: e.to_string(),
    })?;
    let scenario = Scenario::from_record(record, lexicon).map_err(|e| match e {
        DomainError::Invariant { field, reason } => ScenarioError::InvariantViolation {
            line: line_no,
            field: field.to_string(),
            reason,
        },
    })?;
    out.push(scenario);
    Ok(())
}

pub fn load_scenarios(path: impl AsRef<Path>, lexicon: &Lexicon) -> Result<Vec<Scenario>, ScenarioError> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| io_err(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| io_err(path, e))?;
        push_line(&mut out, i + 1, &line, lexicon)?;
    }
    Ok(out)
}

pub fn write_scenarios(path: impl AsRef<Path>, scenarios: &[Scenario]) -> Result<(), ScenarioError> {
    let path = path.as_ref();
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| io_err(path, e))?;
    }
    let file = fs::File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = BufWriter::new(file);
    for s in scenarios {
        let line = serde_json::to_string(&s.to_record()).expect("record serializes");
        writeln!(w, "{line}").map_err(|e| io_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodeOutcome {
    pub success: bool,
    pub asked_help: bool,
    pub set_size: usize,
}

/// Canonical forms of the scenario's acceptable actions.
pub fn canonical_truths(scenario: &Scenario, lexicon: &Lexicon) -> Vec<String> {
    scenario.true_actions.iter().map(|a| lexicon.canonical_action(a)).collect()
}

pub fn is_true_action(text: &str, truths: &[String], lexicon: &Lexicon) -> bool {
    let c = lexicon.canonical_action(text);
    truths.contains(&c)
}

/// Scores a decision. A help request succeeds when a true action is among
/// the offered options. Executing the not-listed option counts as a help
/// request that offers nothing correct.
pub fn judge(
    scenario: &Scenario,
    decision: &Decision,
    candidates: &[CandidateAction],
    lexicon: &Lexicon,
    not_listed: Option<&str>,
) -> EpisodeOutcome {
    let truths = canonical_truths(scenario, lexicon);
    let text_of = |label: char| candidates.iter().find(|c| c.label == label).map(|c| c.text.as_str());
    let is_not_listed = |text: &str| not_listed.is_some_and(|n| n.trim().eq_ignore_ascii_case(text.trim()));
    match decision {
        Decision::Execute(label) => {
            let text = text_of(*label).unwrap_or("");
            if is_not_listed(text) {
                return EpisodeOutcome {
                    success: false,
                    asked_help: true,
                    set_size: 1,
                };
            }
            EpisodeOutcome {
                success: is_true_action(text, &truths, lexicon),
                asked_help: false,
                set_size: 1,
            }
        }
        Decision::AskHelp(set) => {
            let success = set
                .members()
                .iter()
                .filter_map(|l| text_of(*l))
                .filter(|t| !is_not_listed(t))
                .any(|t| is_true_action(t, &truths, lexicon));
            EpisodeOutcome {
                success,
                asked_help: set.len() > 1,
                set_size: set.len(),
            }
        }
    }
}

/// Objects mentioned by any true action that the scene lacks. Non-empty
/// results usually indicate a data error.
pub fn ungrounded_truth_objects(scenario: &Scenario, lexicon: &Lexicon) -> Vec<ObjectRef> {
    let mut out: Vec<ObjectRef> = Vec::new();
    for a in &scenario.true_actions {
        for o in lexicon.parse_objects(a) {
            if !scenario.scene.contains(&o) && !out.contains(&o) {
                out.push(o);
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::environment::{Environment, MOBILE_TASKS_JSONL};
    use crate::posterior::{build_prediction_set, decide, Threshold};

    fn env() -> Environment {
        Environment::tabletop()
    }

    #[test]
    fn generation_is_deterministic() {
        let e = env();
        let a = generate_tabletop(200, 7, &TabletopSpec::default(), &e.lexicon).unwrap();
        let b = generate_tabletop(200, 7, &TabletopSpec::default(), &e.lexicon).unwrap();
        assert_eq!(a, b);
        let c = generate_tabletop(200, 8, &TabletopSpec::default(), &e.lexicon).unwrap();
        assert_ne!(a, c);
        assert_eq!(a[3].id, "tt-7-00003");
    }

    #[test]
    fn case_counts() {
        let spec = TabletopSpec::default();
        // 4 block + 3 bowl + 3 generic + green(2) + yellow(2)
        assert_eq!(spec.cases(Ambiguity::Attribute).len(), 14);
        assert_eq!(spec.cases(Ambiguity::Numeric).len(), 4);
        assert_eq!(spec.cases(Ambiguity::Spatial).len(), 6);
    }

    #[test]
    fn true_actions_are_grounded() {
        let e = env();
        for g in generate_tabletop_cases(500, 1, &TabletopSpec::default(), &e.lexicon).unwrap() {
            assert!(ungrounded_truth_objects(&g.scenario, &e.lexicon).is_empty(), "{:?}", g.scenario);
        }
    }

    #[test]
    fn numeric_cases_use_one_block_color() {
        let e = env();
        let all = generate_tabletop_cases(600, 3, &TabletopSpec::default(), &e.lexicon).unwrap();
        let numeric: Vec<_> = all.iter().filter(|g| g.scenario.ambiguity == Ambiguity::Numeric).collect();
        assert!(!numeric.is_empty());
        for g in numeric {
            let blocks = g.scenario.scene.objects().iter().filter(|o| o.noun() == "block").count();
            assert_eq!(blocks, 1);
            assert_eq!(g.scenario.true_actions.len(), 2);
            assert!(g.scenario.true_actions[0].starts_with("put two"));
            assert!(g.scenario.true_actions[1].starts_with("put three"));
        }
    }

    #[test]
    fn lateral_maps_to_left_and_right() {
        let e = env();
        let all = generate_tabletop_cases(2000, 5, &TabletopSpec::default(), &e.lexicon).unwrap();
        let g = all
            .iter()
            .find(|g| g.case == TabletopCase::Relation("lateral to".into()))
            .unwrap();
        assert!(g.scenario.instruction.contains("lateral to"));
        assert_eq!(g.scenario.true_actions.len(), 2);
        assert!(g.scenario.true_actions[0].contains("to the left of"));
        assert!(g.scenario.true_actions[1].contains("to the right of"));
    }

    #[test]
    fn generic_noun_instruction_shape() {
        let e = env();
        let all = generate_tabletop_cases(2000, 9, &TabletopSpec::default(), &e.lexicon).unwrap();
        let g = all
            .iter()
            .find(|g| g.case == TabletopCase::GenericNoun("object".into()))
            .unwrap();
        let words: Vec<&str> = g.scenario.instruction.split(' ').collect();
        assert_eq!(words[1], "the");
        assert_eq!(words[3], "object");
        assert!(!g.scenario.true_actions.is_empty());
    }

    #[test]
    fn custom_palette_is_used() {
        let spec = TabletopSpec {
            colors: vec!["blue".into(), "green".into(), "yellow".into()],
            ..Default::default()
        };
        let e = Environment::tabletop_with_palette(&spec.colors);
        let all = generate_tabletop(300, 2, &spec, &e.lexicon).unwrap();
        assert!(all.iter().all(|s| !s.scene.description().contains("red")));
        assert!(all.iter().any(|s| s.scene.description().contains("blue bowl")));
        assert_eq!(spec.cases(Ambiguity::Attribute).len(), 16);
    }

    #[test]
    fn invalid_spec_rejected() {
        let spec = TabletopSpec {
            colors: vec!["red".into()],
            ..Default::default()
        };
        assert!(spec.validate().is_err());
        let mut spec = TabletopSpec::default();
        spec.ambiguity_tables.numeric.insert("several".into(), vec![]);
        assert!(spec.validate().is_err());
    }

    #[test]
    fn load_and_write_roundtrip() {
        let e = env();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.jsonl");
        let scenarios = generate_tabletop(20, 4, &TabletopSpec::default(), &e.lexicon).unwrap();
        write_scenarios(&path, &scenarios).unwrap();
        let back = load_scenarios(&path, &e.lexicon).unwrap();
        assert_eq!(back, scenarios);
    }

    #[test]
    fn load_single_line() {
        let line = r#"{"id":"x","scene":{"objects":["red block"],"description":"d"},"instruction":"lift it","ambiguity":"none","true_actions":["pick up the red block"]}"#;
        assert_eq!(parse_scenarios(line, &env().lexicon).unwrap().len(), 1);
    }

    #[test]
    fn missing_true_actions_is_parse_error() {
        let text = "\n{\"id\":\"x\",\"scene\":{\"objects\":[],\"description\":\"d\"},\"instruction\":\"i\",\"ambiguity\":\"none\"}\n";
        match parse_scenarios(text, &env().lexicon) {
            Err(ScenarioError::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn empty_truths_is_invariant_violation() {
        let text = r#"{"id":"x","scene":{"objects":[],"description":"d"},"instruction":"i","ambiguity":"none","true_actions":[]}"#;
        match parse_scenarios(text, &env().lexicon) {
            Err(ScenarioError::InvariantViolation { line, field, .. }) => {
                assert_eq!(line, 1);
                assert_eq!(field, "true_actions");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn shipped_mobile_tasks() {
        let e = Environment::mobile();
        let tasks = parse_scenarios(MOBILE_TASKS_JSONL, &e.lexicon).unwrap();
        assert_eq!(tasks.len(), 63);
        for kind in [
            Ambiguity::SingleLabel,
            Ambiguity::CreativeSingleLabel,
            Ambiguity::MultiLabel,
            Ambiguity::CreativeMultiLabel,
            Ambiguity::SpatiallyAmbiguous,
            Ambiguity::Unsafe,
            Ambiguity::Winograd,
        ] {
            assert_eq!(tasks.iter().filter(|t| t.ambiguity == kind).count(), 9, "{kind}");
        }
        for t in &tasks {
            assert!(ungrounded_truth_objects(t, &e.lexicon).is_empty(), "{}", t.id);
        }
        let bowl = tasks
            .iter()
            .find(|t| t.instruction == "Place the bowl in the microwave, please.")
            .unwrap();
        assert_eq!(bowl.true_actions, ["pick up the plastic bowl and put it in the microwave"]);
        let coke = tasks.iter().find(|t| t.instruction == "Put the Coke in the drawer.").unwrap();
        assert_eq!(coke.true_actions.len(), 2);
    }

    fn candidates(texts: &[&str], lex: &Lexicon) -> Vec<CandidateAction> {
        texts
            .iter()
            .enumerate()
            .map(|(i, t)| CandidateAction::new(crate::domain::label_for(i), *t, lex).unwrap())
            .collect()
    }

    fn tabletop_scenario(lex: &Lexicon) -> Scenario {
        let scene = SceneContext::new(vec![lex.object("red block"), lex.object("green bowl"), lex.object("yellow bowl")], "d").unwrap();
        Scenario::new("j", scene, "put the block in the green bowl", Ambiguity::None, vec!["put the red block in the green bowl".into()]).unwrap()
    }

    #[test]
    fn judging() {
        let e = env();
        let lex = &e.lexicon;
        let s = tabletop_scenario(lex);
        let c = candidates(
            &["Place the red block in the green bowl", "put the red block in the yellow bowl", "put the red block in the gold bowl"],
            lex,
        );
        let t = Threshold::new(0.3).unwrap();
        let exec = judge(&s, &Decision::Execute('A'), &c, lex, None);
        assert_eq!(exec, EpisodeOutcome { success: true, asked_help: false, set_size: 1 });
        let help = decide(build_prediction_set(&[0.45, 0.45, 0.1], &['A', 'B', 'C'], t));
        let out = judge(&s, &help, &c, lex, None);
        assert_eq!(out, EpisodeOutcome { success: true, asked_help: true, set_size: 2 });
        let hallucinated = judge(&s, &Decision::Execute('C'), &c, lex, None);
        assert!(!hallucinated.success);
        let wrong_help = decide(build_prediction_set(&[0.05, 0.45, 0.5], &['A', 'B', 'C'], t));
        assert!(!judge(&s, &wrong_help, &c, lex, None).success);
    }

    #[test]
    fn not_listed_counts_as_unsuccessful_help() {
        let e = env();
        let lex = &e.lexicon;
        let s = tabletop_scenario(lex);
        let c = candidates(&["put the red block in the yellow bowl", "an option not listed here"], lex);
        let out = judge(&s, &Decision::Execute('B'), &c, lex, Some("an option not listed here"));
        assert_eq!(out, EpisodeOutcome { success: false, asked_help: true, set_size: 1 });
    }
}
