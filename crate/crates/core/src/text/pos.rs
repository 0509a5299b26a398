//! Coarse part-of-speech tagging for POS-guided word replacement.
//!
//! A small embedded lexicon covers common clinical and function words; unknown
//! words fall back to shape/suffix heuristics. The tagger is deliberately
//! coarse (six tags): augmentation only needs a consistent partition of the
//! training vocabulary, not linguistic fidelity.

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum PosTag {
    Noun,
    Verb,
    Adj,
    Num,
    Punct,
    Other,
}

impl PosTag {
    pub const ALL: [PosTag; 6] = [
        PosTag::Noun,
        PosTag::Verb,
        PosTag::Adj,
        PosTag::Num,
        PosTag::Punct,
        PosTag::Other,
    ];
}

/// Embedded lexicon; only words the suffix heuristics would get wrong (or
/// that matter for the domain) need an entry.
const LEXICON: &[(&str, PosTag)] = &[
    ("angiomyolipoma", PosTag::Noun),
    ("appendicitis", PosTag::Noun),
    ("ascites", PosTag::Noun),
    ("biopsy", PosTag::Noun),
    ("carcinoma", PosTag::Noun),
    ("creatinine", PosTag::Noun),
    ("cyst", PosTag::Noun),
    ("cystogram", PosTag::Noun),
    ("hernia", PosTag::Noun),
    ("laceration", PosTag::Noun),
    ("lesion", PosTag::Noun),
    ("lymphoma", PosTag::Noun),
    ("mass", PosTag::Noun),
    ("metastasis", PosTag::Noun),
    ("nodule", PosTag::Noun),
    ("pain", PosTag::Noun),
    ("pseudocyst", PosTag::Noun),
    ("stone", PosTag::Noun),
    ("transplant", PosTag::Noun),
    ("tumor", PosTag::Noun),
    ("assess", PosTag::Verb),
    ("characterize", PosTag::Verb),
    ("compare", PosTag::Verb),
    ("confirm", PosTag::Verb),
    ("correlate", PosTag::Verb),
    ("evaluate", PosTag::Verb),
    ("exclude", PosTag::Verb),
    ("monitor", PosTag::Verb),
    ("restage", PosTag::Verb),
    ("stage", PosTag::Verb),
    ("acute", PosTag::Adj),
    ("benign", PosTag::Adj),
    ("elevated", PosTag::Adj),
    ("equivocal", PosTag::Adj),
    ("free", PosTag::Adj),
    ("known", PosTag::Adj),
    ("malignant", PosTag::Adj),
    ("new", PosTag::Adj),
    ("stable", PosTag::Adj),
    ("and", PosTag::Other),
    ("for", PosTag::Other),
    ("of", PosTag::Other),
    ("on", PosTag::Other),
    ("post", PosTag::Other),
    ("status", PosTag::Other),
    ("with", PosTag::Other),
    ("without", PosTag::Other),
];

/// Shape/suffix fallback for words outside the lexicon: digit shapes are NUM,
/// pure punctuation is PUNCT, -ing/-ed suffixes VERB, -ous/-al/-ic ADJ,
/// everything else NOUN.
pub fn heuristic_tag(word: &str) -> PosTag {
    let has_digit = word.chars().any(|c| c.is_ascii_digit());
    let has_alpha = word.chars().any(char::is_alphabetic);
    if has_digit && !has_alpha {
        return PosTag::Num;
    }
    if !word.is_empty() && word.chars().all(|c| !c.is_alphanumeric()) {
        return PosTag::Punct;
    }
    let lower = word.to_lowercase();
    if lower.ends_with("ing") || lower.ends_with("ed") {
        return PosTag::Verb;
    }
    if lower.ends_with("ous") || lower.ends_with("al") || lower.ends_with("ic") {
        return PosTag::Adj;
    }
    PosTag::Noun
}

fn lexicon_tag(word: &str) -> Option<PosTag> {
    let lower = word.to_lowercase();
    LEXICON
        .iter()
        .find(|(w, _)| *w == lower)
        .map(|&(_, tag)| tag)
}

/// Word -> tag map over a training vocabulary plus its exact inverse,
/// supporting same-POS replacement draws.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosIndex {
    word_tag: HashMap<String, PosTag>,
    tag_words: HashMap<PosTag, Vec<String>>,
}

impl PosIndex {
    /// Build from training text words. Words are deduplicated and processed
    /// in sorted order so the index (and every draw from it) is
    /// deterministic.
    pub fn build<'a>(words: impl IntoIterator<Item = &'a str>) -> Self {
        let distinct: BTreeSet<&str> = words.into_iter().filter(|w| !w.is_empty()).collect();
        let mut word_tag = HashMap::with_capacity(distinct.len());
        let mut tag_words: HashMap<PosTag, Vec<String>> = HashMap::new();
        for word in distinct {
            let tag = lexicon_tag(word).unwrap_or_else(|| heuristic_tag(word));
            word_tag.insert(word.to_string(), tag);
            tag_words.entry(tag).or_default().push(word.to_string());
        }
        PosIndex {
            word_tag,
            tag_words,
        }
    }

    /// Tag of a word: stored when known, heuristic otherwise.
    pub fn tag(&self, word: &str) -> PosTag {
        self.word_tag
            .get(word)
            .copied()
            .or_else(|| lexicon_tag(word))
            .unwrap_or_else(|| heuristic_tag(word))
    }

    /// Training-set words carrying the given tag, sorted.
    pub fn words_with_tag(&self, tag: PosTag) -> &[String] {
        self.tag_words.get(&tag).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn len(&self) -> usize {
        self.word_tag.len()
    }

    pub fn is_empty(&self) -> bool {
        self.word_tag.is_empty()
    }
}
