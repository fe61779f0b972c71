//! Candidate generation and the multiple-choice prior.
//!
//! A generation prompt asks the model for a few semantically different next
//! actions; the parsed options are then listed as `A) ...`, `B) ...` in a
//! scoring prompt and the next-token distribution over the letters, softmaxed,
//! is the prior.

use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{Backend, BackendError, BackendQuery, BackendResponse, QueryKind};
use crate::domain::{label_for, CandidateAction, DomainError, Lexicon, Scenario};

#[derive(Debug, Error)]
pub enum McqaError {
    #[error("completion contained no parseable options")]
    EmptyGeneration,
    #[error("none of the option labels {labels:?} appear in the scoring response")]
    NoLabelMass { labels: Vec<char> },
    #[error("template `{name}` is missing placeholder {placeholder}")]
    Template { name: &'static str, placeholder: &'static str },
    #[error(transparent)]
    Domain(#[from] DomainError),
    #[error(transparent)]
    Backend(#[from] BackendError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct McqaConfig {
    pub max_options: usize,
    pub include_not_listed: bool,
    pub not_listed_text: String,
}

impl Default for McqaConfig {
    fn default() -> Self {
        Self {
            max_options: 4,
            include_not_listed: false,
            not_listed_text: "an option not listed here".into(),
        }
    }
}

/// Prompt templates for one environment. Placeholders: `{scene}`,
/// `{instruction}` and, except for generation, `{options}`.
#[derive(Debug, Clone, PartialEq)]
pub struct McqaTemplates {
    pub generation: String,
    pub scoring: String,
    pub prompt_set: String,
    pub binary: String,
}

impl McqaTemplates {
    pub fn new(generation: String, scoring: String, prompt_set: String, binary: String) -> Result<Self, McqaError> {
        let t = Self {
            generation,
            scoring,
            prompt_set,
            binary,
        };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<(), McqaError> {
        let checks: [(&'static str, &str, &[&'static str]); 4] = [
            ("generation", &self.generation, &["{scene}", "{instruction}"]),
            ("scoring", &self.scoring, &["{scene}", "{instruction}", "{options}"]),
            ("prompt_set", &self.prompt_set, &["{scene}", "{instruction}", "{options}"]),
            ("binary", &self.binary, &["{scene}", "{instruction}", "{options}"]),
        ];
        for (name, text, placeholders) in checks {
            if let Some(placeholder) = placeholders.iter().find(|p| !text.contains(**p)) {
                return Err(McqaError::Template { name, placeholder });
            }
        }
        Ok(())
    }
}

fn fill(template: &str, scenario: &Scenario, options: &str) -> String {
    template
        .replace("{scene}", scenario.scene.description())
        .replace("{instruction}", &scenario.instruction)
        .replace("{options}", options)
}

/// Prompts for one scenario and candidate list.
#[derive(Debug, Clone, PartialEq)]
pub struct McqaPromptBundle {
    pub generation_prompt: String,
    pub scoring_prompt: String,
    pub option_labels: Vec<char>,
}

pub fn format_options(candidates: &[CandidateAction]) -> String {
    candidates
        .iter()
        .map(|c| format!("{}) {}", c.label, c.text))
        .collect::<Vec<_>>()
        .join("\n")
}

pub fn generation_prompt(templates: &McqaTemplates, scenario: &Scenario) -> String {
    fill(&templates.generation, scenario, "")
}

pub fn scoring_prompt(templates: &McqaTemplates, scenario: &Scenario, candidates: &[CandidateAction]) -> String {
    fill(&templates.scoring, scenario, &format_options(candidates))
}

pub fn prompt_set_prompt(templates: &McqaTemplates, scenario: &Scenario, candidates: &[CandidateAction]) -> String {
    fill(&templates.prompt_set, scenario, &format_options(candidates))
}

pub fn binary_prompt(templates: &McqaTemplates, scenario: &Scenario, candidates: &[CandidateAction]) -> String {
    fill(&templates.binary, scenario, &format_options(candidates))
}

pub fn bundle(templates: &McqaTemplates, scenario: &Scenario, candidates: &[CandidateAction]) -> McqaPromptBundle {
    McqaPromptBundle {
        generation_prompt: generation_prompt(templates, scenario),
        scoring_prompt: scoring_prompt(templates, scenario, candidates),
        option_labels: candidates.iter().map(|c| c.label).collect(),
    }
}

fn option_prefix() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^(?:[A-Za-z]|\d{1,2})[).:](?:\s+|$)|^[-*]\s+").expect("valid regex"))
}

fn dedup_key(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase()
}

/// Parses one option per non-empty line, stripping `A)`, `1.`, `-` style
/// prefixes and trailing periods. Keeps the first `max_options` distinct
/// options and appends the not-listed option when configured.
pub fn parse_candidates(completion: &str, cfg: &McqaConfig, lexicon: &Lexicon) -> Result<Vec<CandidateAction>, McqaError> {
    let not_listed = dedup_key(&cfg.not_listed_text);
    let mut seen: Vec<String> = Vec::new();
    let mut texts: Vec<String> = Vec::new();
    for line in completion.lines() {
        if texts.len() >= cfg.max_options {
            break;
        }
        let stripped = option_prefix().replace(line.trim(), "");
        let text = stripped.trim().trim_end_matches('.').trim();
        if text.is_empty() {
            continue;
        }
        let key = dedup_key(text);
        if key == not_listed || seen.contains(&key) {
            continue;
        }
        seen.push(key);
        texts.push(text.split_whitespace().collect::<Vec<_>>().join(" "));
    }
    if texts.is_empty() {
        return Err(McqaError::EmptyGeneration);
    }
    if cfg.include_not_listed {
        texts.push(cfg.not_listed_text.clone());
    }
    texts
        .into_iter()
        .enumerate()
        .map(|(i, t)| CandidateAction::new(label_for(i), t, lexicon).map_err(McqaError::from))
        .collect()
}

pub fn generate_candidates(
    scenario: &Scenario,
    templates: &McqaTemplates,
    cfg: &McqaConfig,
    lexicon: &Lexicon,
    backend: &dyn Backend,
) -> Result<Vec<CandidateAction>, McqaError> {
    let q = BackendQuery::new(QueryKind::GenerateCandidates, generation_prompt(templates, scenario), vec![])?;
    let response = backend.query(&q)?;
    parse_candidates(&response.text, cfg, lexicon)
}

pub fn label_tokens(labels: &[char]) -> Vec<String> {
    labels.iter().map(|l| l.to_string()).collect()
}

/// Softmax over label logprobs with missing labels floored.
pub fn prior_from_logprobs(labels: &[char], response: &BackendResponse) -> Result<Vec<f64>, McqaError> {
    if labels.is_empty() || !labels.iter().any(|l| response.token_logprobs.contains_key(&l.to_string())) {
        return Err(McqaError::NoLabelMass { labels: labels.to_vec() });
    }
    let lps: Vec<f64> = labels.iter().map(|l| response.logprob_or_floor(&l.to_string())).collect();
    Ok(softmax(&lps))
}

pub(crate) fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

pub fn score_candidates(
    scenario: &Scenario,
    candidates: &[CandidateAction],
    templates: &McqaTemplates,
    backend: &dyn Backend,
) -> Result<Vec<f64>, McqaError> {
    let labels: Vec<char> = candidates.iter().map(|c| c.label).collect();
    let q = BackendQuery::new(
        QueryKind::ScoreMcqa,
        scoring_prompt(templates, scenario, candidates),
        label_tokens(&labels),
    )?;
    let response = backend.query(&q)?;
    prior_from_logprobs(&labels, &response)
}

fn prediction_set_line() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?i)prediction set\s*:\s*\[([^\]]*)\]").expect("valid regex"))
}

/// Letters from a `Prediction set: [B, D]` completion that name known
/// labels, in label order. Empty when nothing parses.
pub fn parse_prompt_set(text: &str, labels: &[char]) -> Vec<char> {
    let Some(caps) = prediction_set_line().captures_iter(text).last() else {
        return Vec::new();
    };
    let named: Vec<char> = caps[1]
        .split(|c: char| c == ',' || c.is_whitespace())
        .filter_map(|t| {
            let t = t.trim().trim_matches(|c| c == '"' || c == '\'');
            let mut chars = t.chars();
            match (chars.next(), chars.next()) {
                (Some(c), None) => Some(c.to_ascii_uppercase()),
                _ => None,
            }
        })
        .collect();
    labels.iter().copied().filter(|l| named.contains(l)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Certainty {
    Certain,
    Uncertain,
}

/// `Uncertain` unless the completion's first word is `Certain`.
pub fn parse_certainty(text: &str) -> Certainty {
    let first = text
        .split(|c: char| !c.is_alphanumeric())
        .find(|w| !w.is_empty())
        .unwrap_or("");
    if first.eq_ignore_ascii_case("certain") {
        Certainty::Certain
    } else {
        Certainty::Uncertain
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{Ambiguity, SceneContext};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use std::collections::BTreeMap;

    fn lex() -> Lexicon {
        Lexicon::new()
            .with_attributes(["blue", "green", "yellow", "top", "bottom"])
            .with_nouns(["bowl", "block", "coke", "drawer"])
    }

    fn resp(lps: &[(&str, f64)]) -> BackendResponse {
        BackendResponse {
            text: String::new(),
            token_logprobs: lps.iter().map(|(k, v)| (k.to_string(), *v)).collect::<BTreeMap<_, _>>(),
        }
    }

    fn scenario() -> Scenario {
        let l = lex();
        let scene = SceneContext::new(vec![l.object("blue bowl"), l.object("yellow block")], "On the table: a blue bowl, a yellow block.").unwrap();
        Scenario::new("s1", scene, "put the bowl on the block", Ambiguity::None, vec!["put the blue bowl on the yellow block".into()]).unwrap()
    }

    fn templates() -> McqaTemplates {
        McqaTemplates::new(
            "Scene: {scene}\nTask: {instruction}\nOptions:".into(),
            "Scene: {scene}\nTask: {instruction}\n{options}\nAnswer:".into(),
            "Scene: {scene}\nTask: {instruction}\n{options}\nPrediction set:".into(),
            "Scene: {scene}\nTask: {instruction}\n{options}\nCertain or Uncertain:".into(),
        )
        .unwrap()
    }

    #[test]
    fn parse_two_options() {
        let c = parse_candidates(
            "A) put blue bowl on yellow block\nB) put green bowl on yellow block",
            &McqaConfig::default(),
            &lex(),
        )
        .unwrap();
        assert_eq!(c.len(), 2);
        assert_eq!((c[0].label, c[1].label), ('A', 'B'));
        assert_eq!(c[1].text, "put green bowl on yellow block");
        assert_eq!(c[1].mentioned_objects.len(), 2);
    }

    #[test]
    fn duplicates_collapse() {
        let c = parse_candidates(
            "A) put the blue bowl on the yellow block\nB) Put the  blue bowl on the yellow block.",
            &McqaConfig::default(),
            &lex(),
        )
        .unwrap();
        assert_eq!(c.len(), 1);
    }

    #[test]
    fn max_options_and_not_listed() {
        let text = "1. a bowl\n2. b bowl\n3. c bowl\n4. d bowl\n5. e bowl";
        let cfg = McqaConfig {
            include_not_listed: true,
            ..Default::default()
        };
        let c = parse_candidates(text, &cfg, &lex()).unwrap();
        assert_eq!(c.len(), 5);
        assert_eq!(c[3].text, "d bowl");
        assert_eq!(c[4].label, 'E');
        assert_eq!(c[4].text, "an option not listed here");
    }

    #[test]
    fn empty_generation() {
        assert!(matches!(
            parse_candidates("\n  \nA) \n", &McqaConfig::default(), &lex()),
            Err(McqaError::EmptyGeneration)
        ));
    }

    #[test]
    fn drawer_options_parse() {
        let c = parse_candidates(
            "A) put the coke in the top drawer\nB) put the coke in the bottom drawer",
            &McqaConfig::default(),
            &lex(),
        )
        .unwrap();
        assert_eq!(c[0].mentioned_objects[1].canonical_name(), "top drawer");
        assert_eq!(c[1].mentioned_objects[1].canonical_name(), "bottom drawer");
    }

    #[test]
    fn scoring_prompt_lists_options() {
        let c = parse_candidates("put the blue bowl on the yellow block\nlift the blue bowl", &McqaConfig::default(), &lex()).unwrap();
        let b = bundle(&templates(), &scenario(), &c);
        assert!(b.scoring_prompt.contains("\nA) put the blue bowl on the yellow block\nB) lift the blue bowl\n"));
        assert_eq!(b.option_labels, ['A', 'B']);
        assert!(b.generation_prompt.starts_with("Scene: On the table"));
    }

    #[test]
    fn template_validation() {
        let err = McqaTemplates::new("{scene}".into(), "{scene}{instruction}{options}".into(), "{scene}{instruction}{options}".into(), "{scene}{instruction}{options}".into()).unwrap_err();
        assert!(matches!(err, McqaError::Template { name: "generation", placeholder: "{instruction}" }));
    }

    // Oracle values from an independent exp/normalize script.
    #[test]
    fn prior_two_labels() {
        let p = prior_from_logprobs(&['A', 'B'], &resp(&[("A", -0.105), ("B", -2.303)])).unwrap();
        assert_abs_diff_eq!(p[0], 0.900_069_766_396_866_4, epsilon = 1e-12);
        assert_abs_diff_eq!(p[1], 0.099_930_233_603_133_65, epsilon = 1e-12);
    }

    #[test]
    fn prior_trivial_cases() {
        assert_eq!(prior_from_logprobs(&['A'], &resp(&[("A", -3.0)])).unwrap(), vec![1.0]);
        let p = prior_from_logprobs(&['A', 'B', 'C'], &resp(&[("A", -1.0), ("B", -1.0), ("C", -1.0)])).unwrap();
        for v in p {
            assert_abs_diff_eq!(v, 1.0 / 3.0, epsilon = 1e-15);
        }
    }

    #[test]
    fn prior_floors_missing_and_rejects_empty() {
        let p = prior_from_logprobs(&['A', 'B'], &resp(&[("A", -0.01)])).unwrap();
        assert!(p[1] > 0.0 && p[1] < 1e-4);
        assert!(matches!(
            prior_from_logprobs(&['A', 'B'], &resp(&[("Z", -0.1)])),
            Err(McqaError::NoLabelMass { .. })
        ));
    }

    #[test]
    fn prompt_set_parsing() {
        let labels = ['A', 'B', 'C', 'D'];
        assert_eq!(parse_prompt_set("Prediction set: [B, D]", &labels), ['B', 'D']);
        assert_eq!(parse_prompt_set("prediction set: [d,'a']", &labels), ['A', 'D']);
        assert_eq!(parse_prompt_set("Prediction set: [Z]", &labels), Vec::<char>::new());
        assert_eq!(parse_prompt_set("no idea", &labels), Vec::<char>::new());
    }

    #[test]
    fn certainty_parsing() {
        assert_eq!(parse_certainty("Certain"), Certainty::Certain);
        assert_eq!(parse_certainty(" certain."), Certainty::Certain);
        assert_eq!(parse_certainty("Uncertain"), Certainty::Uncertain);
        assert_eq!(parse_certainty(""), Certainty::Uncertain);
    }

    fn labeled(lps: &[f64]) -> (Vec<char>, BackendResponse) {
        let labels: Vec<char> = (0..lps.len()).map(label_for).collect();
        let r = BackendResponse {
            text: String::new(),
            token_logprobs: labels.iter().zip(lps).map(|(l, v)| (l.to_string(), *v)).collect(),
        };
        (labels, r)
    }

    // shifts stay above the missing-token floor, where invariance holds
    proptest! {
        #[test]
        fn shift_invariance(lps in proptest::collection::vec(-8.0f64..-0.5, 1..6), shift in -3.0f64..0.4) {
            let (labels, r) = labeled(&lps);
            let shifted: Vec<f64> = lps.iter().map(|v| v + shift).collect();
            let (_, r2) = labeled(&shifted);
            let a = prior_from_logprobs(&labels, &r).unwrap();
            let b = prior_from_logprobs(&labels, &r2).unwrap();
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() < 1e-12);
            }
            prop_assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }

        #[test]
        fn permutation_equivariance(lps in proptest::collection::vec(-10.0f64..0.0, 2..6), rot in 0usize..6) {
            let n = lps.len();
            let (labels, r) = labeled(&lps);
            let rotated: Vec<f64> = (0..n).map(|i| lps[(i + rot) % n]).collect();
            let (_, r2) = labeled(&rotated);
            let a = prior_from_logprobs(&labels, &r).unwrap();
            let b = prior_from_logprobs(&labels, &r2).unwrap();
            for i in 0..n {
                prop_assert!((b[i] - a[(i + rot) % n]).abs() < 1e-12);
            }
        }
    }
}
