//! Closed-vocabulary object parser.
//!
//! Objects are recognized with the grammar `[attribute]* noun` using
//! longest-match against a fixed attribute/noun vocabulary. Synonyms are
//! rewritten before matching so that "navy cube" and "blue block" resolve to
//! the same [`ObjectRef`].
//!
//! Two fallbacks keep near-misses visible to grounding instead of silently
//! dropping them:
//! - an unknown word directly before a known noun is taken as an attribute
//!   ("gold bowl");
//! - an unknown word directly after a run of known attributes is taken as the
//!   noun ("blue plate").

use std::collections::{BTreeMap, BTreeSet};

use super::ObjectRef;

const MAX_ATTRIBUTE_RUN: usize = 4;

const DEFAULT_STOPWORDS: &[&str] = &[
    "a", "an", "the", "of", "to", "in", "on", "into", "onto", "at", "by", "for", "from", "with",
    "and", "or", "it", "its", "them", "this", "that", "these", "those", "up", "down", "off", "out",
    "me", "my", "i", "you", "your", "we", "is", "are", "be", "please", "can", "could", "would",
    "will", "some", "few", "couple", "handful", "pair", "single", "one", "ones", "two", "three",
    "four", "five", "all", "both", "each", "other", "another", "any", "near", "close", "beside",
    "next", "left", "right", "front", "back", "behind", "lateral", "along", "line", "sight", "top",
    "bottom", "over", "under", "put", "place", "move", "pick", "bring", "give", "take", "get",
    "throw", "dispose", "open", "close", "set", "drop", "leave", "grab", "hand", "not", "no",
    "here", "there", "listed", "option", "do", "nothing", "away", "then", "so", "if",
];

/// Attribute and noun vocabulary plus synonym rewrites for one environment.
#[derive(Debug, Clone, Default)]
pub struct Lexicon {
    attributes: BTreeSet<String>,
    /// surface form (space-joined tokens) -> canonical noun
    nouns: BTreeMap<String, String>,
    max_noun_tokens: usize,
    /// surface phrase (space-joined tokens) -> replacement tokens
    synonyms: BTreeMap<String, Vec<String>>,
    max_synonym_tokens: usize,
    stopwords: BTreeSet<String>,
}

/// Position of a parsed object in the normalized token stream.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectSpan {
    pub object: ObjectRef,
    pub start: usize,
    pub len: usize,
}

impl Lexicon {
    pub fn new() -> Self {
        Self {
            stopwords: DEFAULT_STOPWORDS.iter().map(|s| s.to_string()).collect(),
            ..Self::default()
        }
    }

    pub fn with_attributes<I, S>(mut self, attrs: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        for a in attrs {
            self.add_attribute(a.as_ref());
        }
        self
    }

    pub fn with_nouns<I, S>(mut self, nouns: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        for n in nouns {
            self.add_noun(n.as_ref());
        }
        self
    }

    pub fn with_synonyms<I, A, B>(mut self, pairs: I) -> Self
    where
        I: IntoIterator<Item = (A, B)>,
        A: AsRef<str>,
        B: AsRef<str>,
    {
        for (from, to) in pairs {
            self.add_synonym(from.as_ref(), to.as_ref());
        }
        self
    }

    pub fn add_attribute(&mut self, attr: &str) {
        let attr = attr.trim().to_lowercase();
        if !attr.is_empty() {
            self.stopwords.remove(&attr);
            self.attributes.insert(attr);
        }
    }

    /// Registers a (possibly multi-word) noun and its regular plural.
    pub fn add_noun(&mut self, noun: &str) {
        let toks = tokenize(noun);
        if toks.is_empty() {
            return;
        }
        let canonical = toks.join(" ");
        let mut plural = toks.clone();
        let last = plural.last_mut().expect("non-empty");
        if !last.ends_with('s') {
            if last.ends_with("ch") || last.ends_with("sh") || last.ends_with('x') {
                last.push_str("es");
            } else {
                last.push('s');
            }
            self.insert_noun_form(plural.join(" "), &canonical, plural.len());
        }
        for t in &toks {
            self.stopwords.remove(t);
        }
        self.insert_noun_form(canonical.clone(), &canonical, toks.len());
    }

    fn insert_noun_form(&mut self, surface: String, canonical: &str, len: usize) {
        self.max_noun_tokens = self.max_noun_tokens.max(len);
        self.nouns.insert(surface, canonical.to_string());
    }

    pub fn add_synonym(&mut self, from: &str, to: &str) {
        let from = tokenize(from);
        let to = tokenize(to);
        if from.is_empty() {
            return;
        }
        self.max_synonym_tokens = self.max_synonym_tokens.max(from.len());
        self.synonyms.insert(from.join(" "), to);
    }

    pub fn add_stopword(&mut self, word: &str) {
        self.stopwords.insert(word.trim().to_lowercase());
    }

    pub fn is_attribute(&self, token: &str) -> bool {
        self.attributes.contains(token)
    }

    pub fn attributes(&self) -> impl Iterator<Item = &str> {
        self.attributes.iter().map(String::as_str)
    }

    /// Canonical noun forms (plurals excluded).
    pub fn nouns(&self) -> impl Iterator<Item = &str> {
        self.nouns
            .iter()
            .filter(|(surface, canonical)| surface == canonical)
            .map(|(_, c)| c.as_str())
    }

    /// Lowercases, tokenizes and applies synonym rewrites (longest match first).
    pub fn normalize_tokens(&self, text: &str) -> Vec<String> {
        let raw = tokenize(text);
        if self.synonyms.is_empty() {
            return raw;
        }
        let mut out = Vec::with_capacity(raw.len());
        let mut i = 0;
        'outer: while i < raw.len() {
            let max = self.max_synonym_tokens.min(raw.len() - i);
            for len in (1..=max).rev() {
                let key = raw[i..i + len].join(" ");
                if let Some(rep) = self.synonyms.get(&key) {
                    out.extend(rep.iter().cloned());
                    i += len;
                    continue 'outer;
                }
            }
            out.push(raw[i].clone());
            i += 1;
        }
        out
    }

    /// Text comparison key for actions: lowercase, synonym-normalized,
    /// articles removed, single-space separated.
    pub fn canonical_action(&self, text: &str) -> String {
        self.normalize_tokens(text)
            .into_iter()
            .filter(|t| !matches!(t.as_str(), "a" | "an" | "the"))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// Every maximal `[attribute]* noun` phrase in `text`.
    pub fn parse_objects(&self, text: &str) -> Vec<ObjectRef> {
        self.parse_spans(text).into_iter().map(|s| s.object).collect()
    }

    /// Parses a single object name (as found in a scene inventory). Names that
    /// do not parse to exactly one phrase are kept verbatim as a bare noun.
    pub fn object(&self, name: &str) -> ObjectRef {
        let toks = self.normalize_tokens(name);
        let spans = self.spans_in(&toks);
        match spans.as_slice() {
            [one] if one.start == 0 && one.len == toks.len() => one.object.clone(),
            _ => ObjectRef::from_parts(Vec::<String>::new(), toks.join(" ")),
        }
    }

    pub fn parse_spans(&self, text: &str) -> Vec<ObjectSpan> {
        let toks = self.normalize_tokens(text);
        self.spans_in(&toks)
    }

    /// Object spans over an already-normalized token stream.
    pub fn spans_in(&self, toks: &[String]) -> Vec<ObjectSpan> {
        let mut spans = Vec::new();
        let mut i = 0;
        while i < toks.len() {
            if let Some((object, len)) = self.match_at(toks, i) {
                spans.push(ObjectSpan { object, start: i, len });
                i += len;
            } else {
                i += 1;
            }
        }
        spans
    }

    fn noun_at(&self, toks: &[String], j: usize) -> Option<(String, usize)> {
        if j >= toks.len() {
            return None;
        }
        let max = self.max_noun_tokens.min(toks.len() - j);
        (1..=max).rev().find_map(|len| {
            self.nouns
                .get(&toks[j..j + len].join(" "))
                .map(|c| (c.clone(), len))
        })
    }

    fn is_wordlike(&self, tok: &str) -> bool {
        tok.chars().any(|c| c.is_ascii_alphabetic())
            && tok.chars().all(|c| c.is_ascii_alphabetic() || c == '-')
            && !self.stopwords.contains(tok)
            && !self.attributes.contains(tok)
    }

    fn match_at(&self, toks: &[String], i: usize) -> Option<(ObjectRef, usize)> {
        let run = toks[i..]
            .iter()
            .take(MAX_ATTRIBUTE_RUN)
            .take_while(|t| self.attributes.contains(t.as_str()))
            .count();

        // Longest total span wins; on equal spans prefer the longer noun.
        let mut best: Option<(usize, usize, String, usize)> = None; // (span, attrs, noun, noun_len)
        for na in (0..=run).rev() {
            if let Some((noun, nl)) = self.noun_at(toks, i + na) {
                let span = na + nl;
                let better = match &best {
                    None => true,
                    Some((bs, ba, _, _)) => span > *bs || (span == *bs && na < *ba),
                };
                if better {
                    best = Some((span, na, noun, nl));
                }
            }
        }
        if let Some((span, na, noun, _)) = best {
            return Some((ObjectRef::from_parts(toks[i..i + na].to_vec(), noun), span));
        }

        // Known attributes followed by an unknown head noun.
        if run > 0 {
            if let Some(next) = toks.get(i + run) {
                if self.is_wordlike(next) && self.noun_at(toks, i + run).is_none() {
                    return Some((
                        ObjectRef::from_parts(toks[i..i + run].to_vec(), next.clone()),
                        run + 1,
                    ));
                }
            }
            return None;
        }

        // Unknown modifier directly before a known noun.
        if self.is_wordlike(&toks[i]) {
            if let Some((noun, nl)) = self.noun_at(toks, i + 1) {
                return Some((ObjectRef::from_parts(vec![toks[i].clone()], noun), 1 + nl));
            }
        }
        None
    }
}

/// Lowercase word tokens; punctuation other than `-` and `'` separates tokens.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !(c.is_alphanumeric() || c == '-' || c == '\''))
        .map(|t| t.trim_matches(|c| c == '-' || c == '\'').to_lowercase())
        .filter(|t| !t.is_empty())
        .collect()
}
