//! World-knowledge likelihood `P(W|y)`.
//!
//! Each rule prompt asks whether an action is possible and safe in the scene
//! and reads the next-token probabilities of `True` and `False`. The factor
//! for one prompt is `p(True) / (p(True) + p(False))`; the likelihood is the
//! product over all prompts.
//!
//! Prompt files are plain text. Blocks are separated by blank lines:
//! - leading blocks that are not exemplars form the header;
//! - blocks whose last line is `You: True` or `You: False` are exemplars;
//! - the final block is the template and must contain `{scene_objects}` and
//!   `{action}` and end with `You:`.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::backend::{Backend, BackendError, BackendQuery, BackendResponse, QueryKind};
use crate::domain::{CandidateAction, ObjectRef, SceneContext};

pub const TRUE_TOKEN: &str = "True";
pub const FALSE_TOKEN: &str = "False";

const VERDICT_PREFIX: &str = "You:";

#[derive(Debug, Error)]
pub enum KnowledgeError {
    #[error("knowledge prompt: {0}")]
    Template(String),
    #[error("action text is empty")]
    EmptyAction,
    #[error("scene has no objects to describe")]
    EmptyScene,
    #[error("no knowledge prompts configured")]
    NoPrompts,
    #[error(transparent)]
    Backend(#[from] BackendError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Exemplar {
    /// Object list exactly as it appears in the prompt.
    pub scene_objects: String,
    pub action: String,
    pub verdict: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KnowledgePrompt {
    pub header: String,
    pub few_shot: Vec<Exemplar>,
    pub template: String,
}

fn split_blocks(text: &str) -> Vec<String> {
    let mut blocks = Vec::new();
    let mut cur: Vec<&str> = Vec::new();
    for line in text.lines() {
        if line.trim().is_empty() {
            if !cur.is_empty() {
                blocks.push(cur.join("\n"));
                cur.clear();
            }
        } else {
            cur.push(line.trim_end());
        }
    }
    if !cur.is_empty() {
        blocks.push(cur.join("\n"));
    }
    blocks
}

/// Extracts the text that fills `placeholder` in `pattern_line` from `line`.
fn capture(pattern_line: &str, placeholder: &str, line: &str) -> Option<String> {
    let (prefix, suffix) = pattern_line.split_once(placeholder)?;
    let inner = line.strip_prefix(prefix)?.strip_suffix(suffix)?;
    Some(inner.to_string())
}

impl KnowledgePrompt {
    pub fn parse(text: &str) -> Result<Self, KnowledgeError> {
        let mut blocks = split_blocks(text);
        let template = blocks
            .pop()
            .ok_or_else(|| KnowledgeError::Template("file is empty".into()))?;
        if !template.trim_end().ends_with(VERDICT_PREFIX) {
            return Err(KnowledgeError::Template(format!("template must end with `{VERDICT_PREFIX}`")));
        }
        let lines: Vec<&str> = template.lines().collect();
        let scene_line = lines
            .iter()
            .position(|l| l.contains("{scene_objects}"))
            .ok_or_else(|| KnowledgeError::Template("template lacks {scene_objects}".into()))?;
        let action_line = lines
            .iter()
            .position(|l| l.contains("{action}"))
            .ok_or_else(|| KnowledgeError::Template("template lacks {action}".into()))?;

        let mut header = Vec::new();
        let mut few_shot = Vec::new();
        for block in blocks {
            let blines: Vec<&str> = block.lines().collect();
            let verdict = match blines.last().map(|l| l.trim()) {
                Some(l) if l == format!("{VERDICT_PREFIX} {TRUE_TOKEN}") => Some(true),
                Some(l) if l == format!("{VERDICT_PREFIX} {FALSE_TOKEN}") => Some(false),
                _ => None,
            };
            let Some(verdict) = verdict else {
                if !few_shot.is_empty() {
                    return Err(KnowledgeError::Template(format!(
                        "block after the exemplars is neither an exemplar nor the template: {block:?}"
                    )));
                }
                header.push(block);
                continue;
            };
            if blines.len() != lines.len() {
                return Err(KnowledgeError::Template(format!("exemplar shape differs from template: {block:?}")));
            }
            let scene_objects = capture(lines[scene_line], "{scene_objects}", blines[scene_line]);
            let action = capture(lines[action_line], "{action}", blines[action_line]);
            match (scene_objects, action) {
                (Some(scene_objects), Some(action)) => few_shot.push(Exemplar {
                    scene_objects,
                    action,
                    verdict,
                }),
                _ => {
                    return Err(KnowledgeError::Template(format!(
                        "exemplar does not follow the template: {block:?}"
                    )))
                }
            }
        }
        Ok(Self {
            header: header.join("\n\n"),
            few_shot,
            template,
        })
    }

    fn fill(&self, scene_objects: &str, action: &str) -> String {
        self.template
            .replace("{scene_objects}", scene_objects)
            .replace("{action}", action)
    }
}

/// Per-object noun phrases used when listing a scene ("a bag of rice chips").
/// Objects without an override get `a`/`an` by leading vowel.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SurfaceForms {
    overrides: BTreeMap<String, String>,
}

impl SurfaceForms {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with(mut self, canonical: &str, phrase: &str) -> Self {
        self.overrides.insert(canonical.to_lowercase(), phrase.to_string());
        self
    }

    pub fn phrase(&self, object: &ObjectRef) -> String {
        let name = object.canonical_name();
        if let Some(p) = self.overrides.get(name) {
            return p.clone();
        }
        let article = match name.chars().next() {
            Some('a' | 'e' | 'i' | 'o' | 'u') => "an",
            _ => "a",
        };
        format!("{article} {name}")
    }
}

/// `x`, `x and y`, `x, y, and z`.
pub fn oxford_join(items: &[String]) -> String {
    match items {
        [] => String::new(),
        [one] => one.clone(),
        [a, b] => format!("{a} and {b}"),
        [init @ .., last] => format!("{}, and {last}", init.join(", ")),
    }
}

pub fn describe_objects(objects: &[ObjectRef], surface: &SurfaceForms) -> String {
    let phrases: Vec<String> = objects.iter().map(|o| surface.phrase(o)).collect();
    oxford_join(&phrases)
}

pub fn render_knowledge_prompt(
    prompt: &KnowledgePrompt,
    scene: &SceneContext,
    action: &str,
    surface: &SurfaceForms,
) -> Result<String, KnowledgeError> {
    let action = action.trim();
    if action.is_empty() {
        return Err(KnowledgeError::EmptyAction);
    }
    if scene.objects().is_empty() {
        return Err(KnowledgeError::EmptyScene);
    }
    let mut parts = Vec::with_capacity(prompt.few_shot.len() + 2);
    if !prompt.header.is_empty() {
        parts.push(prompt.header.clone());
    }
    for ex in &prompt.few_shot {
        let verdict = if ex.verdict { TRUE_TOKEN } else { FALSE_TOKEN };
        parts.push(format!("{} {verdict}", prompt.fill(&ex.scene_objects, &ex.action)));
    }
    parts.push(prompt.fill(&describe_objects(scene.objects(), surface), action));
    Ok(parts.join("\n\n"))
}

/// `p(True)` renormalized over the two verdict tokens, with missing tokens
/// floored.
pub fn true_probability(response: &BackendResponse) -> f64 {
    let lt = response.logprob_or_floor(TRUE_TOKEN);
    let lf = response.logprob_or_floor(FALSE_TOKEN);
    // logistic form of exp(lt) / (exp(lt) + exp(lf)), stable for large gaps
    1.0 / (1.0 + (lf - lt).exp())
}

pub fn knowledge_query(rendered: String) -> BackendQuery {
    BackendQuery {
        kind: QueryKind::WorldKnowledge,
        prompt: rendered,
        answer_tokens: vec![TRUE_TOKEN.to_string(), FALSE_TOKEN.to_string()],
    }
}

pub fn knowledge_score(
    candidate: &CandidateAction,
    scene: &SceneContext,
    prompts: &[KnowledgePrompt],
    surface: &SurfaceForms,
    backend: &dyn Backend,
) -> Result<f64, KnowledgeError> {
    if prompts.is_empty() {
        return Err(KnowledgeError::NoPrompts);
    }
    let mut score = 1.0;
    for prompt in prompts {
        let rendered = render_knowledge_prompt(prompt, scene, &candidate.text, surface)?;
        let response = backend.query(&knowledge_query(rendered))?;
        score *= true_probability(&response);
    }
    Ok(score)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::Lexicon;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use std::sync::Mutex;

    const PROMPT: &str = "You judge robot actions. Answer True or False.\n\n\
We: On the counter, there is a metal bowl, a plastic bowl, and a microwave.\n\
We: pick up the metal bowl and put it in the microwave\n\
We: Is this possible and safe given the provided knowledge of the scene?\n\
You: False\n\n\
We: On the counter, there is an orange, a bag of rice chips, and an apple.\n\
We: pick up the orange\n\
We: Is this possible and safe given the provided knowledge of the scene?\n\
You: True\n\n\
We: On the counter, there is {scene_objects}.\n\
We: {action}\n\
We: Is this possible and safe given the provided knowledge of the scene?\n\
You:\n";

    fn lex() -> Lexicon {
        Lexicon::new()
            .with_attributes(["metal", "plastic", "rice"])
            .with_nouns(["bowl", "microwave", "apple", "orange", "chips"])
    }

    fn scene(names: &[&str]) -> SceneContext {
        let l = lex();
        SceneContext::new(names.iter().map(|n| l.object(n)).collect(), "counter").unwrap()
    }

    fn surface() -> SurfaceForms {
        SurfaceForms::new().with("rice chips", "a bag of rice chips")
    }

    fn resp(lps: &[(&str, f64)]) -> BackendResponse {
        BackendResponse {
            text: String::new(),
            token_logprobs: lps.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
        }
    }

    /// Answers queries in order from a fixed list and records prompts.
    struct Scripted {
        answers: Mutex<Vec<BackendResponse>>,
        seen: Mutex<Vec<String>>,
    }
    impl Scripted {
        fn new(answers: Vec<BackendResponse>) -> Self {
            Self {
                answers: Mutex::new(answers.into_iter().rev().collect()),
                seen: Mutex::new(Vec::new()),
            }
        }
    }
    impl Backend for Scripted {
        fn query(&self, q: &BackendQuery) -> Result<BackendResponse, BackendError> {
            self.seen.lock().unwrap().push(q.prompt.clone());
            Ok(self.answers.lock().unwrap().pop().expect("scripted answer"))
        }
    }

    #[test]
    fn parses_header_exemplars_template() {
        let p = KnowledgePrompt::parse(PROMPT).unwrap();
        assert_eq!(p.header, "You judge robot actions. Answer True or False.");
        assert_eq!(p.few_shot.len(), 2);
        assert_eq!(p.few_shot[0].action, "pick up the metal bowl and put it in the microwave");
        assert_eq!(p.few_shot[0].scene_objects, "a metal bowl, a plastic bowl, and a microwave");
        assert!(!p.few_shot[0].verdict);
        assert!(p.few_shot[1].verdict);
        assert!(p.template.ends_with("You:"));
    }

    #[test]
    fn template_must_end_with_verdict_prompt() {
        let bad = PROMPT.trim_end().trim_end_matches("You:");
        assert!(KnowledgePrompt::parse(bad).is_err());
        assert!(KnowledgePrompt::parse("").is_err());
    }

    #[test]
    fn rendering_lists_objects() {
        let p = KnowledgePrompt::parse(PROMPT).unwrap();
        let one = render_knowledge_prompt(&p, &scene(&["apple"]), "pick up the apple", &surface()).unwrap();
        assert!(one.contains("there is an apple.\nWe: pick up the apple\n"));
        let three = render_knowledge_prompt(
            &p,
            &scene(&["orange", "rice chips", "apple"]),
            "pick up the orange",
            &surface(),
        )
        .unwrap();
        assert!(three.contains("there is an orange, a bag of rice chips, and an apple."));
        assert!(three.ends_with("You:"));
        assert!(three.contains("microwave\nWe: Is this possible and safe given the provided knowledge of the scene?\nYou: False"));
    }

    #[test]
    fn rendering_guards_inputs() {
        let p = KnowledgePrompt::parse(PROMPT).unwrap();
        assert!(matches!(
            render_knowledge_prompt(&p, &scene(&["apple"]), "  ", &surface()),
            Err(KnowledgeError::EmptyAction)
        ));
        assert!(matches!(
            render_knowledge_prompt(&p, &scene(&[]), "pick up the apple", &surface()),
            Err(KnowledgeError::EmptyScene)
        ));
    }

    #[test]
    fn oxford_join_shapes() {
        let s = |v: &[&str]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>();
        assert_eq!(oxford_join(&s(&["a"])), "a");
        assert_eq!(oxford_join(&s(&["a", "b"])), "a and b");
        assert_eq!(oxford_join(&s(&["a", "b", "c"])), "a, b, and c");
    }

    // 0.9698073814405597 comes from a separate two-token normalization script.
    #[test]
    fn single_prompt_score() {
        let p = KnowledgePrompt::parse(PROMPT).unwrap();
        let backend = Scripted::new(vec![resp(&[("True", -0.0305), ("False", -3.5)])]);
        let c = CandidateAction::new('A', "pick up the apple", &lex()).unwrap();
        let v = knowledge_score(&c, &scene(&["apple"]), &[p], &surface(), &backend).unwrap();
        assert_abs_diff_eq!(v, 0.969_807_381_440_559_7, epsilon = 1e-12);
        let seen = backend.seen.lock().unwrap();
        assert!(seen[0].ends_with("We: pick up the apple\nWe: Is this possible and safe given the provided knowledge of the scene?\nYou:"));
    }

    #[test]
    fn prompts_multiply() {
        let p = KnowledgePrompt::parse(PROMPT).unwrap();
        let backend = Scripted::new(vec![
            resp(&[("True", 0.9f64.ln()), ("False", 0.1f64.ln())]),
            resp(&[("True", 0.8f64.ln()), ("False", 0.2f64.ln())]),
        ]);
        let c = CandidateAction::new('A', "pick up the apple", &lex()).unwrap();
        let v = knowledge_score(&c, &scene(&["apple"]), &[p.clone(), p], &surface(), &backend).unwrap();
        assert_abs_diff_eq!(v, 0.72, epsilon = 1e-12);
    }

    #[test]
    fn shipped_style_exemplar_marks_metal_bowl_unsafe() {
        let p = KnowledgePrompt::parse(PROMPT).unwrap();
        let ex = p
            .few_shot
            .iter()
            .find(|e| e.action == "pick up the metal bowl and put it in the microwave")
            .unwrap();
        assert!(!ex.verdict);
    }

    #[test]
    fn missing_token_is_floored() {
        let only_true = resp(&[("True", -0.03)]);
        let p = true_probability(&only_true);
        assert!(p > 0.9999 && p < 1.0);
        assert_eq!(true_probability(&resp(&[])), 0.5);
    }

    #[test]
    fn no_prompts_is_an_error() {
        let backend = Scripted::new(vec![]);
        let c = CandidateAction::new('A', "pick up the apple", &lex()).unwrap();
        assert!(matches!(
            knowledge_score(&c, &scene(&["apple"]), &[], &surface(), &backend),
            Err(KnowledgeError::NoPrompts)
        ));
    }

    proptest! {
        #[test]
        fn equal_tokens_give_half(lp in -20.0f64..0.0) {
            prop_assert_eq!(true_probability(&resp(&[("True", lp), ("False", lp)])), 0.5);
        }

        #[test]
        fn two_token_normalization(lt in -30.0f64..0.0, lf in -30.0f64..0.0) {
            let pt = true_probability(&resp(&[("True", lt), ("False", lf)]));
            let pf = true_probability(&resp(&[("True", lf), ("False", lt)]));
            prop_assert!((pt + pf - 1.0).abs() < 1e-9);
            prop_assert!(pt > 0.0 && pt < 1.0);
        }

        #[test]
        fn extra_prompt_never_increases(lps in proptest::collection::vec((-15.0f64..0.0, -15.0f64..0.0), 1..5)) {
            let p = KnowledgePrompt::parse(PROMPT).unwrap();
            let c = CandidateAction::new('A', "pick up the apple", &lex()).unwrap();
            let s = scene(&["apple"]);
            let mut prev = 1.0;
            for k in 1..=lps.len() {
                let answers = lps[..k].iter().map(|(t, f)| resp(&[("True", *t), ("False", *f)])).collect();
                let backend = Scripted::new(answers);
                let prompts = vec![p.clone(); k];
                let v = knowledge_score(&c, &s, &prompts, &surface(), &backend).unwrap();
                prop_assert!(v <= prev);
                prev = v;
            }
        }
    }
}
