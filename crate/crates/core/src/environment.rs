//! The two shipped environments: a tabletop with colored blocks and bowls,
//! and an office-kitchen counter for a mobile manipulator.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::domain::{Lexicon, ObjectRef};
use crate::knowledge::{KnowledgeError, KnowledgePrompt, SurfaceForms};
use crate::mcqa::{McqaConfig, McqaTemplates};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EnvironmentKind {
    Tabletop,
    Mobile,
}

impl EnvironmentKind {
    pub fn as_str(self) -> &'static str {
        match self {
            EnvironmentKind::Tabletop => "tabletop",
            EnvironmentKind::Mobile => "mobile",
        }
    }
}

impl fmt::Display for EnvironmentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EnvironmentKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "tabletop" => Ok(EnvironmentKind::Tabletop),
            "mobile" => Ok(EnvironmentKind::Mobile),
            _ => Err(format!("unknown environment `{s}`")),
        }
    }
}

pub const DEFAULT_PALETTE: [&str; 3] = ["red", "yellow", "green"];

/// Colors the generator never places on the table; candidates using them are
/// ungrounded.
pub const EXTRA_COLORS: [&str; 8] = ["blue", "purple", "orange", "gold", "white", "black", "pink", "brown"];

const TABLETOP_NOUN_SYNONYMS: [(&str, &str); 7] = [
    ("cube", "block"),
    ("cuboid", "block"),
    ("box", "block"),
    ("square object", "block"),
    ("container", "bowl"),
    ("round object", "bowl"),
    ("receptacle", "bowl"),
];

const VERB_SYNONYMS: [(&str, &str); 2] = [("place", "put"), ("move", "put")];

pub const MOBILE_ITEMS: [&str; 18] = [
    "bottled water",
    "bottled tea",
    "orange soda",
    "redbull",
    "coke",
    "pepsi",
    "sprite",
    "rice chips",
    "jalapeno chips",
    "kettle chips",
    "multigrain chips",
    "apple",
    "orange",
    "energy bar",
    "clean sponge",
    "dirty sponge",
    "metal bowl",
    "plastic bowl",
];

/// Receptacles and appliances present in every kitchen scene.
pub const MOBILE_FIXTURES: [&str; 8] = [
    "landfill bin",
    "recycling bin",
    "compost bin",
    "microwave",
    "portable stove",
    "top drawer",
    "bottom drawer",
    "counter",
];

pub const MOBILE_HALLUCINATIONS: [&str; 7] = ["fruit", "cola", "soda", "coffee cup", "banana", "mug", "plate"];

const MOBILE_CANS: [&str; 5] = ["coke", "pepsi", "sprite", "redbull", "orange soda"];

/// One environment: vocabulary, prompts and the facts the synthetic backend
/// uses to play a plausible language model.
#[derive(Debug, Clone)]
pub struct Environment {
    pub kind: EnvironmentKind,
    pub lexicon: Lexicon,
    pub surface: SurfaceForms,
    pub templates: McqaTemplates,
    pub knowledge: Vec<KnowledgePrompt>,
    pub mcqa: McqaConfig,
    /// Object pairs an action must not combine (item, appliance).
    pub unsafe_pairs: Vec<(ObjectRef, ObjectRef)>,
    /// Plausible objects that are never in a scene.
    pub hallucination_pool: Vec<ObjectRef>,
}

fn shipped_templates(kind: EnvironmentKind) -> McqaTemplates {
    let (g, s, p, b) = match kind {
        EnvironmentKind::Tabletop => (
            include_str!("../prompts/tabletop/generation.txt"),
            include_str!("../prompts/tabletop/scoring.txt"),
            include_str!("../prompts/tabletop/prompt_set.txt"),
            include_str!("../prompts/tabletop/binary.txt"),
        ),
        EnvironmentKind::Mobile => (
            include_str!("../prompts/mobile/generation.txt"),
            include_str!("../prompts/mobile/scoring.txt"),
            include_str!("../prompts/mobile/prompt_set.txt"),
            include_str!("../prompts/mobile/binary.txt"),
        ),
    };
    McqaTemplates::new(g.trim_end().into(), s.trim_end().into(), p.trim_end().into(), b.trim_end().into())
        .expect("shipped templates are valid")
}

pub fn shipped_knowledge_prompt(kind: EnvironmentKind) -> KnowledgePrompt {
    let text = match kind {
        EnvironmentKind::Tabletop => include_str!("../prompts/tabletop/knowledge.txt"),
        EnvironmentKind::Mobile => include_str!("../prompts/mobile/knowledge.txt"),
    };
    KnowledgePrompt::parse(text).expect("shipped knowledge prompt is valid")
}

pub fn tabletop_lexicon(palette: &[String]) -> Lexicon {
    let colors = palette
        .iter()
        .map(String::as_str)
        .chain(DEFAULT_PALETTE)
        .chain(EXTRA_COLORS);
    let mut lex = Lexicon::new()
        .with_attributes(colors)
        .with_nouns(["block", "bowl", "plate", "cup"])
        .with_synonyms(TABLETOP_NOUN_SYNONYMS)
        .with_synonyms(VERB_SYNONYMS)
        .with_synonyms([("navy", "blue"), ("cyan", "blue"), ("greenish", "green"), ("grass-colored", "green")]);
    // "square"/"round" only appear inside the noun synonyms above
    lex.add_stopword("object");
    lex.add_stopword("objects");
    lex
}

pub fn mobile_lexicon() -> Lexicon {
    Lexicon::new()
        .with_attributes([
            "rice", "jalapeno", "kettle", "multigrain", "clean", "dirty", "metal", "plastic", "landfill",
            "recycling", "compost", "portable", "top", "bottom",
        ])
        .with_nouns([
            "bottled water",
            "bottled tea",
            "orange soda",
            "redbull",
            "coke",
            "pepsi",
            "sprite",
            "chips",
            "apple",
            "orange",
            "energy bar",
            "sponge",
            "bowl",
            "bin",
            "microwave",
            "stove",
            "drawer",
            "counter",
            "fruit",
            "cola",
            "soda",
            "coffee cup",
            "banana",
            "mug",
            "plate",
        ])
        .with_synonyms([("red bull", "redbull"), ("coca-cola", "coke"), ("coca cola", "coke")])
        .with_synonyms(VERB_SYNONYMS)
}

fn mobile_surface() -> SurfaceForms {
    ["rice chips", "jalapeno chips", "kettle chips", "multigrain chips"]
        .into_iter()
        .fold(SurfaceForms::new(), |s, c| s.with(c, &format!("a bag of {c}")))
}

impl Environment {
    pub fn tabletop() -> Self {
        let palette: Vec<String> = DEFAULT_PALETTE.iter().map(|s| s.to_string()).collect();
        Self::tabletop_with_palette(&palette)
    }

    pub fn tabletop_with_palette(palette: &[String]) -> Self {
        let lexicon = tabletop_lexicon(palette);
        let mut pool = Vec::new();
        for color in EXTRA_COLORS.iter().filter(|c| !palette.iter().any(|p| p == *c)) {
            for noun in ["block", "bowl"] {
                pool.push(ObjectRef::from_parts([*color], noun));
            }
        }
        for noun in ["plate", "cup"] {
            pool.push(ObjectRef::from_parts(Vec::<String>::new(), noun));
        }
        Self {
            kind: EnvironmentKind::Tabletop,
            lexicon,
            surface: SurfaceForms::new(),
            templates: shipped_templates(EnvironmentKind::Tabletop),
            knowledge: vec![shipped_knowledge_prompt(EnvironmentKind::Tabletop)],
            mcqa: McqaConfig::default(),
            unsafe_pairs: Vec::new(),
            hallucination_pool: pool,
        }
    }

    pub fn mobile() -> Self {
        let lexicon = mobile_lexicon();
        let microwave = lexicon.object("microwave");
        let stove = lexicon.object("portable stove");
        let mut unsafe_pairs = vec![
            (lexicon.object("metal bowl"), microwave.clone()),
            (lexicon.object("plastic bowl"), stove.clone()),
        ];
        for can in MOBILE_CANS {
            unsafe_pairs.push((lexicon.object(can), microwave.clone()));
            unsafe_pairs.push((lexicon.object(can), stove.clone()));
        }
        let hallucination_pool = MOBILE_HALLUCINATIONS.iter().map(|o| lexicon.object(o)).collect();
        Self {
            kind: EnvironmentKind::Mobile,
            lexicon,
            surface: mobile_surface(),
            templates: shipped_templates(EnvironmentKind::Mobile),
            knowledge: vec![shipped_knowledge_prompt(EnvironmentKind::Mobile)],
            mcqa: McqaConfig {
                include_not_listed: true,
                ..McqaConfig::default()
            },
            unsafe_pairs,
            hallucination_pool,
        }
    }

    pub fn for_kind(kind: EnvironmentKind) -> Self {
        match kind {
            EnvironmentKind::Tabletop => Self::tabletop(),
            EnvironmentKind::Mobile => Self::mobile(),
        }
    }

    /// Appends a user-supplied rule prompt.
    pub fn add_knowledge_prompt(&mut self, text: &str) -> Result<(), KnowledgeError> {
        self.knowledge.push(KnowledgePrompt::parse(text)?);
        Ok(())
    }

    pub fn is_unsafe(&self, objects: &[ObjectRef]) -> bool {
        self.unsafe_pairs
            .iter()
            .any(|(a, b)| objects.contains(a) && objects.contains(b))
    }
}

/// The mobile-manipulator task list shipped with the crate.
pub const MOBILE_TASKS_JSONL: &str = include_str!("../data/mobile_tasks.jsonl");
