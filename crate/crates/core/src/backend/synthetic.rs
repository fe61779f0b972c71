//! Seeded stand-in for a language model.
//!
//! The backend knows the scenarios it will be asked about and answers each
//! query kind the way a capable but imperfect model might:
//! - generation fills `num_options` slots; each slot independently becomes a
//!   hallucination (a true action with one object swapped for an
//!   out-of-scene object) with probability `hallucination_rate`, the rest get
//!   true actions first, then grounded distractors, some of them infeasible
//!   (self-referential or unsafe);
//! - MCQA scoring draws per-option logits by class plus Gaussian noise;
//! - world knowledge reads the scene list and action from the prompt and
//!   answers with a noisy `True` probability by class;
//! - prompt-set and binary baselines derive their text from the same
//!   option probabilities.
//!
//! Scenarios are located through the last `Scene: ` and `Task: ` lines of
//! a prompt, which the shipped templates provide.

use std::collections::{BTreeMap, HashMap};

use rand::rngs::StdRng;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Backend, BackendError, BackendQuery, BackendResponse, QueryKind};
use crate::domain::{label_for, Lexicon, ObjectRef, Scenario};
use crate::environment::Environment;
use crate::mcqa::softmax;
use crate::seeding::derive_seed;

const SCENE_MARKER: &str = "Scene: ";
const TASK_MARKER: &str = "Task: ";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticProfile {
    pub seed: u64,
    /// Probability that a generated option mentions an out-of-scene object.
    pub hallucination_rate: f64,
    pub num_options: usize,
    /// True options get logit `ln(m / (1 - m))` against grounded
    /// distractors at 0.
    pub true_mass: f64,
    pub logit_noise: f64,
    pub hallucination_appeal: f64,
    /// Share of distractors made infeasible.
    pub infeasible_rate: f64,
    pub infeasible_appeal: f64,
    pub not_listed_logit: f64,
    pub world_feasible: f64,
    pub world_hallucinated: f64,
    pub world_infeasible: f64,
    /// Standard deviation of the logit-normal noise on `p(True)`.
    pub world_noise: f64,
    pub prompt_set_cutoff: f64,
    pub binary_cutoff: f64,
    pub top_logprobs: usize,
}

impl Default for SyntheticProfile {
    fn default() -> Self {
        Self {
            seed: 0,
            hallucination_rate: 0.3,
            num_options: 4,
            true_mass: 0.6,
            logit_noise: 1.0,
            hallucination_appeal: 0.8,
            infeasible_rate: 0.3,
            infeasible_appeal: 0.5,
            not_listed_logit: -2.5,
            world_feasible: 0.85,
            world_hallucinated: 0.35,
            world_infeasible: 0.1,
            world_noise: 0.6,
            prompt_set_cutoff: 0.25,
            binary_cutoff: 0.55,
            top_logprobs: 5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum OptionClass {
    True,
    Distractor,
    Infeasible,
    Hallucinated,
    NotListed,
}

#[derive(Debug, Clone)]
struct Facts {
    id: String,
    true_actions: Vec<String>,
    truths: Vec<String>,
    objects: Vec<ObjectRef>,
}

pub struct SyntheticBackend {
    profile: SyntheticProfile,
    lexicon: Lexicon,
    unsafe_pairs: Vec<(ObjectRef, ObjectRef)>,
    pool: Vec<ObjectRef>,
    not_listed: String,
    index: HashMap<(String, String), Facts>,
}

fn last_line_after<'a>(prompt: &'a str, marker: &str) -> Option<&'a str> {
    prompt
        .lines()
        .rev()
        .find_map(|l| l.strip_prefix(marker))
        .map(str::trim)
}

fn logit(p: f64) -> f64 {
    let p = p.clamp(1e-9, 1.0 - 1e-9);
    (p / (1.0 - p)).ln()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn has_duplicate(objects: &[ObjectRef]) -> bool {
    objects.iter().enumerate().any(|(i, o)| objects[..i].contains(o))
}

impl SyntheticBackend {
    pub fn new(profile: SyntheticProfile, scenarios: &[Scenario], env: &Environment) -> Self {
        let lexicon = env.lexicon.clone();
        let index = scenarios
            .iter()
            .map(|s| {
                let facts = Facts {
                    id: s.id.clone(),
                    true_actions: s.true_actions.clone(),
                    truths: s.true_actions.iter().map(|a| lexicon.canonical_action(a)).collect(),
                    objects: s.scene.objects().to_vec(),
                };
                ((s.scene.description().trim().to_string(), s.instruction.trim().to_string()), facts)
            })
            .collect();
        Self {
            profile,
            lexicon,
            unsafe_pairs: env.unsafe_pairs.clone(),
            pool: env.hallucination_pool.clone(),
            not_listed: env.mcqa.not_listed_text.to_lowercase(),
            index,
        }
    }

    pub fn profile(&self) -> &SyntheticProfile {
        &self.profile
    }

    fn facts_for(&self, prompt: &str) -> Result<&Facts, BackendError> {
        let scene = last_line_after(prompt, SCENE_MARKER);
        let task = last_line_after(prompt, TASK_MARKER);
        match (scene, task) {
            (Some(scene), Some(task)) => self
                .index
                .get(&(scene.to_string(), task.to_string()))
                .ok_or_else(|| BackendError::InvalidQuery(format!("synthetic backend does not know task `{task}`"))),
            _ => Err(BackendError::InvalidQuery(
                "prompt lacks the Scene:/Task: lines the synthetic backend reads".into(),
            )),
        }
    }

    fn rng(&self, parts: &[&[u8]]) -> StdRng {
        let seed = self.profile.seed.to_le_bytes();
        StdRng::seed_from_u64(derive_seed(std::iter::once(&seed[..]).chain(parts.iter().copied())))
    }

    fn is_unsafe(&self, objects: &[ObjectRef]) -> bool {
        self.unsafe_pairs
            .iter()
            .any(|(a, b)| objects.contains(a) && objects.contains(b))
    }

    fn replace_span(&self, toks: &[String], start: usize, len: usize, with: &ObjectRef) -> Vec<String> {
        let mut out = toks[..start].to_vec();
        out.extend(with.canonical_name().split(' ').map(str::to_string));
        out.extend_from_slice(&toks[start + len..]);
        out
    }

    /// A true action with one object swapped for an out-of-scene object.
    fn hallucinate(&self, rng: &mut StdRng, facts: &Facts) -> Option<String> {
        let base = facts.true_actions.choose(rng)?;
        let toks = self.lexicon.normalize_tokens(base);
        let spans = self.lexicon.spans_in(&toks);
        let span = spans.choose(rng)?;
        let outside: Vec<&ObjectRef> = self.pool.iter().filter(|o| !facts.objects.contains(o)).collect();
        let with = outside.choose(rng)?;
        Some(self.replace_span(&toks, span.start, span.len, with).join(" "))
    }

    fn infeasible(&self, rng: &mut StdRng, toks: &[String], facts: &Facts) -> Option<Vec<String>> {
        let spans = self.lexicon.spans_in(toks);
        if spans.len() < 2 {
            return None;
        }
        let (first, last) = (&spans[0], &spans[spans.len() - 1]);
        let pairs: Vec<&(ObjectRef, ObjectRef)> = self
            .unsafe_pairs
            .iter()
            .filter(|(a, b)| facts.objects.contains(a) && facts.objects.contains(b))
            .collect();
        if let Some((a, b)) = pairs.choose(rng) {
            if rng.random_bool(0.5) {
                let head = self.replace_span(toks, last.start, last.len, b);
                return Some(self.replace_span(&head, first.start, first.len, a));
            }
        }
        Some(self.replace_span(toks, last.start, last.len, &first.object))
    }

    /// A grounded alternative: one object swapped for another scene object,
    /// or an infeasible variant with probability `infeasible_rate`.
    fn distract(&self, rng: &mut StdRng, facts: &Facts) -> Option<String> {
        let base = facts.true_actions.choose(rng)?;
        let toks = self.lexicon.normalize_tokens(base);
        if rng.random_bool(self.profile.infeasible_rate.clamp(0.0, 1.0)) {
            if let Some(t) = self.infeasible(rng, &toks, facts) {
                return Some(t.join(" "));
            }
        }
        let spans = self.lexicon.spans_in(&toks);
        let span = spans.choose(rng)?;
        let mentioned: Vec<&ObjectRef> = spans.iter().map(|s| &s.object).collect();
        let others: Vec<&ObjectRef> = facts.objects.iter().filter(|o| !mentioned.contains(o)).collect();
        let with = others.choose(rng)?;
        Some(self.replace_span(&toks, span.start, span.len, with).join(" "))
    }

    fn generate(&self, facts: &Facts) -> String {
        let mut rng = self.rng(&[b"generate", facts.id.as_bytes()]);
        let k = self.profile.num_options.max(1);
        let h = self.profile.hallucination_rate.clamp(0.0, 1.0);
        let hallucinated = (0..k).filter(|_| rng.random_bool(h)).count();
        let free = k - hallucinated;

        let mut chosen: Vec<String> = Vec::new();
        let mut keys: Vec<String> = Vec::new();
        let mut push = |text: String, chosen: &mut Vec<String>| -> bool {
            let key = self.lexicon.canonical_action(&text);
            if keys.contains(&key) {
                return false;
            }
            keys.push(key);
            chosen.push(text);
            true
        };

        let mut trues = facts.true_actions.clone();
        trues.shuffle(&mut rng);
        let n_true = if free > 0 { rng.random_range(1..=free.min(trues.len())) } else { 0 };
        for t in trues.into_iter().take(n_true) {
            let t = self.lexicon.normalize_tokens(&t).join(" ");
            push(t, &mut chosen);
        }
        let mut attempts = 0;
        while chosen.len() < free && attempts < 40 {
            attempts += 1;
            if let Some(d) = self.distract(&mut rng, facts) {
                if !facts.truths.contains(&self.lexicon.canonical_action(&d)) {
                    push(d, &mut chosen);
                }
            }
        }
        let target = chosen.len() + hallucinated;
        let mut attempts = 0;
        while chosen.len() < target && attempts < 40 {
            attempts += 1;
            if let Some(hl) = self.hallucinate(&mut rng, facts) {
                push(hl, &mut chosen);
            }
        }
        chosen.shuffle(&mut rng);
        chosen
            .iter()
            .enumerate()
            .map(|(i, t)| format!("{}) {t}", label_for(i)))
            .collect::<Vec<_>>()
            .join("\n")
    }

    fn classify(&self, text: &str, facts: &Facts) -> OptionClass {
        if text.trim().to_lowercase() == self.not_listed {
            return OptionClass::NotListed;
        }
        if facts.truths.contains(&self.lexicon.canonical_action(text)) {
            return OptionClass::True;
        }
        let objects = self.lexicon.parse_objects(text);
        if objects.iter().any(|o| !facts.objects.contains(o)) {
            OptionClass::Hallucinated
        } else if has_duplicate(&objects) || self.is_unsafe(&objects) {
            OptionClass::Infeasible
        } else {
            OptionClass::Distractor
        }
    }

    /// Options listed as `X) text` after the last task line.
    fn options(prompt: &str) -> Vec<(char, String)> {
        let after_task = prompt.rfind(TASK_MARKER).map(|i| &prompt[i..]).unwrap_or(prompt);
        after_task
            .lines()
            .filter_map(|l| {
                let mut chars = l.chars();
                let label = chars.next()?;
                let rest = chars.as_str().strip_prefix(") ")?;
                label.is_ascii_uppercase().then(|| (label, rest.trim().to_string()))
            })
            .collect()
    }

    fn option_probs(&self, prompt: &str, facts: &Facts) -> Vec<(char, f64)> {
        let options = Self::options(prompt);
        let joined: String = options.iter().map(|(_, t)| format!("{t}\n")).collect();
        let mut rng = self.rng(&[b"score", facts.id.as_bytes(), joined.as_bytes()]);
        let noise = Normal::new(0.0, self.profile.logit_noise.max(0.0)).expect("finite sigma");
        let p = &self.profile;
        let logits: Vec<f64> = options
            .iter()
            .map(|(_, text)| {
                let base = match self.classify(text, facts) {
                    OptionClass::True => logit(p.true_mass),
                    OptionClass::Distractor => 0.0,
                    OptionClass::Infeasible => p.infeasible_appeal,
                    OptionClass::Hallucinated => p.hallucination_appeal,
                    OptionClass::NotListed => p.not_listed_logit,
                };
                base + noise.sample(&mut rng)
            })
            .collect();
        let probs = softmax(&logits);
        options.iter().map(|(l, _)| *l).zip(probs).collect()
    }

    fn score(&self, q: &BackendQuery, facts: &Facts) -> BackendResponse {
        let mut probs = self.option_probs(&q.prompt, facts);
        probs.retain(|(l, _)| q.answer_tokens.iter().any(|t| t.len() == 1 && t.starts_with(*l)));
        probs.sort_by(|a, b| b.1.total_cmp(&a.1));
        probs.truncate(self.profile.top_logprobs.max(1));
        BackendResponse {
            text: probs.first().map(|(l, _)| l.to_string()).unwrap_or_default(),
            token_logprobs: probs.into_iter().map(|(l, p)| (l.to_string(), p.ln().min(0.0))).collect(),
        }
    }

    fn prompt_set(&self, q: &BackendQuery, facts: &Facts) -> BackendResponse {
        let probs = self.option_probs(&q.prompt, facts);
        let mut members: Vec<char> = probs
            .iter()
            .filter(|(_, p)| *p >= self.profile.prompt_set_cutoff)
            .map(|(l, _)| *l)
            .collect();
        if members.is_empty() {
            if let Some((l, _)) = probs.iter().max_by(|a, b| a.1.total_cmp(&b.1)) {
                members.push(*l);
            }
        }
        let list: Vec<String> = members.iter().map(char::to_string).collect();
        BackendResponse::text(format!("Prediction set: [{}]", list.join(", ")))
    }

    fn binary(&self, q: &BackendQuery, facts: &Facts) -> BackendResponse {
        let top = self
            .option_probs(&q.prompt, facts)
            .iter()
            .map(|(_, p)| *p)
            .fold(0.0, f64::max);
        let certain = top >= self.profile.binary_cutoff;
        let word = if certain { "Certain" } else { "Uncertain" };
        let mut token_logprobs = BTreeMap::new();
        let confidence = if certain { top } else { 1.0 - top };
        token_logprobs.insert(word.to_string(), confidence.clamp(1e-9, 1.0).ln());
        BackendResponse {
            text: word.to_string(),
            token_logprobs,
        }
    }

    /// Reads the object list and action from the final prompt block: its first
    /// line lists the scene, its second line is the action.
    fn world(&self, q: &BackendQuery) -> Result<BackendResponse, BackendError> {
        let block = q.prompt.trim_end().rsplit("\n\n").next().unwrap_or("");
        let mut lines = block.lines().filter(|l| !l.trim().is_empty());
        let strip = |l: &str| l.split_once(": ").map(|(_, r)| r.to_string()).unwrap_or_else(|| l.to_string());
        let (Some(scene_line), Some(action_line)) = (lines.next(), lines.next()) else {
            return Err(BackendError::InvalidQuery("knowledge prompt lacks scene and action lines".into()));
        };
        let listed = self.lexicon.parse_objects(&strip(scene_line));
        let action = self.lexicon.parse_objects(&strip(action_line));
        let p = &self.profile;
        let base = if action.iter().any(|o| !listed.contains(o)) {
            p.world_hallucinated
        } else if has_duplicate(&action) || self.is_unsafe(&action) {
            p.world_infeasible
        } else {
            p.world_feasible
        };
        let mut rng = self.rng(&[b"world", q.prompt.as_bytes()]);
        let noise = Normal::new(0.0, p.world_noise.max(0.0)).expect("finite sigma");
        let p_true = sigmoid(logit(base) + noise.sample(&mut rng)).clamp(1e-9, 1.0 - 1e-9);
        let mut token_logprobs = BTreeMap::new();
        token_logprobs.insert("True".to_string(), p_true.ln());
        token_logprobs.insert("False".to_string(), (1.0 - p_true).ln());
        Ok(BackendResponse {
            text: if p_true >= 0.5 { "True" } else { "False" }.to_string(),
            token_logprobs,
        })
    }
}

impl Backend for SyntheticBackend {
    fn query(&self, q: &BackendQuery) -> Result<BackendResponse, BackendError> {
        match q.kind {
            QueryKind::WorldKnowledge => self.world(q),
            QueryKind::GenerateCandidates => Ok(BackendResponse::text(self.generate(self.facts_for(&q.prompt)?))),
            QueryKind::ScoreMcqa => Ok(self.score(q, self.facts_for(&q.prompt)?)),
            QueryKind::PromptSet => Ok(self.prompt_set(q, self.facts_for(&q.prompt)?)),
            QueryKind::BinaryCertainty => Ok(self.binary(q, self.facts_for(&q.prompt)?)),
        }
    }
}
