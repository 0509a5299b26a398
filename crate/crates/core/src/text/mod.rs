//! Subword vocabulary training, tokenization, and fixed-length encoding.
//!
//! The vocabulary is induced by greedy frequency pair-merging over an initial
//! character alphabet, with `##` marking word-internal continuations; encoding
//! then uses greedy longest-match per word, BERT-style. Case is preserved
//! throughout: clinical text is mixed-case and case carries signal.

pub mod pos;

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const CLS: u32 = 2;
pub const SEP: u32 = 3;
pub const MASK: u32 = 4;

pub const SPECIALS: [&str; 5] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"];

/// Sequence length every encoder input is padded or truncated to.
pub const DEFAULT_MAX_LEN: usize = 200;

const CONTINUATION: &str = "##";
const VOCAB_FILE_HEADER: &str = "#vocab v1";

/// Subword vocabulary with fixed special-token ids 0..=4.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    ids: HashMap<String, u32>,
}

impl Vocab {
    fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        for (i, special) in SPECIALS.iter().enumerate() {
            if tokens.get(i).map(String::as_str) != Some(*special) {
                return Err(Error::VocabMismatch(format!(
                    "token {i} must be {special}, found {:?}",
                    tokens.get(i)
                )));
            }
        }
        let mut ids = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if ids.insert(t.clone(), i as u32).is_some() {
                return Err(Error::VocabMismatch(format!("duplicate token {t:?}")));
            }
        }
        Ok(Vocab { tokens, ids })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id_of(&self, token: &str) -> Option<u32> {
        self.ids.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// One token per line in id order, specials first, behind a version line.
    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let mut w = BufWriter::new(file);
        let io_err = |e: std::io::Error| Error::io(path.display().to_string(), e);
        writeln!(w, "{VOCAB_FILE_HEADER}").map_err(io_err)?;
        for t in &self.tokens {
            writeln!(w, "{t}").map_err(io_err)?;
        }
        w.flush().map_err(io_err)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let mut lines = BufReader::new(file).lines();
        let header = lines
            .next()
            .transpose()
            .map_err(|e| Error::io(path.display().to_string(), e))?
            .unwrap_or_default();
        if header != VOCAB_FILE_HEADER {
            return Err(Error::VocabMismatch(format!(
                "unsupported vocab file header {header:?}"
            )));
        }
        let mut tokens = Vec::new();
        for line in lines {
            tokens.push(line.map_err(|e| Error::io(path.display().to_string(), e))?);
        }
        Vocab::from_tokens(tokens)
    }
}

/// Split text into words: special-token literals stay atomic, everything else
/// splits on whitespace and then on punctuation characters.
pub fn pre_split(text: &str) -> Vec<String> {
    let mut words = Vec::new();
    for chunk in text.split_whitespace() {
        let mut rest = chunk;
        'outer: while !rest.is_empty() {
            for special in SPECIALS {
                if let Some(tail) = rest.strip_prefix(special) {
                    words.push(special.to_string());
                    rest = tail;
                    continue 'outer;
                }
            }
            let ch = rest.chars().next().unwrap();
            if !ch.is_alphanumeric() {
                words.push(ch.to_string());
                rest = &rest[ch.len_utf8()..];
            } else {
                // Consume the alphanumeric run, stopping at punctuation or an
                // embedded special literal.
                let mut end = 0;
                for c in rest.chars() {
                    if !c.is_alphanumeric() {
                        break;
                    }
                    end += c.len_utf8();
                }
                words.push(rest[..end].to_string());
                rest = &rest[end..];
            }
        }
    }
    words
}

fn word_units(word: &str) -> Vec<String> {
    word.chars()
        .enumerate()
        .map(|(i, c)| {
            if i == 0 {
                c.to_string()
            } else {
                format!("{CONTINUATION}{c}")
            }
        })
        .collect()
}

/// Train a subword vocabulary by greedy pair-merging.
///
/// The base vocabulary is the five specials plus every observed single-char
/// unit (word-initial and `##`-continuation forms count separately); each
/// merge step joins the most frequent adjacent unit pair, ties broken by
/// lexicographically smallest pair, until `target_size` tokens exist or no
/// pairs remain. Deterministic for a fixed corpus.
pub fn train_vocab<S: AsRef<str>>(texts: &[S], target_size: usize) -> Result<Vocab> {
    if texts.is_empty() {
        return Err(Error::EmptyInput("train_vocab on empty corpus".into()));
    }
    let mut word_freq: HashMap<String, usize> = HashMap::new();
    for text in texts {
        for word in pre_split(text.as_ref()) {
            if SPECIALS.contains(&word.as_str()) {
                continue;
            }
            *word_freq.entry(word).or_insert(0) += 1;
        }
    }
    let mut words: Vec<(Vec<String>, usize)> = {
        let mut sorted: Vec<(String, usize)> = word_freq.into_iter().collect();
        sorted.sort();
        sorted
            .into_iter()
            .map(|(w, f)| (word_units(&w), f))
            .collect()
    };

    let mut alphabet: Vec<String> = {
        let mut set: std::collections::BTreeSet<String> = std::collections::BTreeSet::new();
        for (units, _) in &words {
            set.extend(units.iter().cloned());
        }
        set.into_iter().collect()
    };
    let minimum = SPECIALS.len() + alphabet.len();
    if target_size < minimum {
        return Err(Error::InvalidConfig(format!(
            "target_size {target_size} below minimum {minimum} (specials + alphabet)"
        )));
    }

    let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
    tokens.append(&mut alphabet);
    let mut have: std::collections::HashSet<String> = tokens.iter().cloned().collect();

    while tokens.len() < target_size {
        let mut pair_freq: HashMap<(&str, &str), usize> = HashMap::new();
        for (units, freq) in &words {
            for pair in units.windows(2) {
                *pair_freq.entry((&pair[0], &pair[1])).or_insert(0) += freq;
            }
        }
        let Some(best) = pair_freq
            .iter()
            .map(|(&(a, b), &f)| (f, std::cmp::Reverse((a, b))))
            .max()
            .map(|(f, std::cmp::Reverse(pair))| (pair.0.to_string(), pair.1.to_string(), f))
        else {
            break;
        };
        let (left, right, _) = best;
        let merged = format!(
            "{left}{}",
            right.strip_prefix(CONTINUATION).unwrap_or(&right)
        );
        for (units, _) in &mut words {
            let mut i = 0;
            while i + 1 < units.len() {
                if units[i] == left && units[i + 1] == right {
                    units[i] = merged.clone();
                    units.remove(i + 1);
                }
                i += 1;
            }
        }
        if have.insert(merged.clone()) {
            tokens.push(merged);
        }
    }
    Vocab::from_tokens(tokens)
}

/// Subword pieces of one pre-split source word.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WordPieces {
    pub word: String,
    pub pieces: Vec<String>,
}

/// Greedy longest-match subwording per pre-split word. A word with any
/// unmatchable remainder becomes a single `[UNK]` piece; special literals map
/// to themselves.
pub fn tokenize(text: &str, vocab: &Vocab) -> Vec<WordPieces> {
    pre_split(text)
        .into_iter()
        .map(|word| {
            if SPECIALS.contains(&word.as_str()) {
                return WordPieces {
                    pieces: vec![word.clone()],
                    word,
                };
            }
            let mut pieces = Vec::new();
            let mut rest = word.as_str();
            let mut first = true;
            while !rest.is_empty() {
                let mut fit = None;
                // Candidate prefix lengths on char boundaries, longest first.
                let boundaries: Vec<usize> = rest
                    .char_indices()
                    .map(|(i, c)| i + c.len_utf8())
                    .collect();
                for &end in boundaries.iter().rev() {
                    let candidate = if first {
                        rest[..end].to_string()
                    } else {
                        format!("{CONTINUATION}{}", &rest[..end])
                    };
                    if vocab.id_of(&candidate).is_some() {
                        fit = Some((candidate, end));
                        break;
                    }
                }
                match fit {
                    Some((piece, end)) => {
                        pieces.push(piece);
                        rest = &rest[end..];
                        first = false;
                    }
                    None => {
                        pieces = vec![SPECIALS[UNK as usize].to_string()];
                        break;
                    }
                }
            }
            WordPieces { word, pieces }
        })
        .collect()
}

/// Fixed-length id sequence: `[CLS] body [SEP]` padded to `max_len`, with the
/// body truncated so `[SEP]` is always retained.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
    /// Count of non-`[PAD]` positions (`[CLS]` and `[SEP]` included).
    pub attention_length: usize,
}

impl TokenSequence {
    pub fn max_len(&self) -> usize {
        self.ids.len()
    }

    /// Check the structural invariants; used by fuzz tests.
    pub fn check_invariants(&self) -> Result<()> {
        let max_len = self.ids.len();
        if self.attention_length < 2 || self.attention_length > max_len {
            return Err(Error::InvalidConfig(format!(
                "attention_length {} out of range for max_len {max_len}",
                self.attention_length
            )));
        }
        if self.ids[0] != CLS {
            return Err(Error::InvalidConfig("sequence must start with [CLS]".into()));
        }
        if self.ids[self.attention_length - 1] != SEP {
            return Err(Error::InvalidConfig(
                "last non-pad position must be [SEP]".into(),
            ));
        }
        if self.ids[..self.attention_length].contains(&PAD) {
            return Err(Error::InvalidConfig("[PAD] before a non-pad token".into()));
        }
        if self.ids[self.attention_length..].iter().any(|&id| id != PAD) {
            return Err(Error::InvalidConfig("non-pad token in padding".into()));
        }
        Ok(())
    }
}

pub fn encode(tokens: &[WordPieces], vocab: &Vocab, max_len: usize) -> TokenSequence {
    debug_assert!(max_len >= 2);
    let mut ids = Vec::with_capacity(max_len);
    ids.push(CLS);
    'fill: for wp in tokens {
        for piece in &wp.pieces {
            if ids.len() == max_len - 1 {
                break 'fill;
            }
            ids.push(vocab.id_of(piece).unwrap_or(UNK));
        }
    }
    ids.push(SEP);
    let attention_length = ids.len();
    ids.resize(max_len, PAD);
    TokenSequence {
        ids,
        attention_length,
    }
}

/// Convenience: tokenize then encode.
pub fn encode_text(text: &str, vocab: &Vocab, max_len: usize) -> TokenSequence {
    encode(&tokenize(text, vocab), vocab, max_len)
}

/// Reassemble words from a sequence: `##` continuations join their previous
/// piece, specials other than `[UNK]`/`[MASK]` are dropped, words join with a
/// single space.
pub fn decode(seq: &TokenSequence, vocab: &Vocab) -> String {
    let mut words: Vec<String> = Vec::new();
    for &id in &seq.ids[..seq.attention_length] {
        if id == PAD || id == CLS || id == SEP {
            continue;
        }
        let token = vocab.token(id).unwrap_or(SPECIALS[UNK as usize]);
        if let Some(cont) = token.strip_prefix(CONTINUATION) {
            if let Some(last) = words.last_mut() {
                last.push_str(cont);
                continue;
            }
        }
        words.push(token.to_string());
    }
    words.join(" ")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab_of(extra: &[&str]) -> Vocab {
        let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        tokens.extend(extra.iter().map(|s| s.to_string()));
        Vocab::from_tokens(tokens).unwrap()
    }

    #[test]
    fn specials_have_fixed_ids() {
        let v = vocab_of(&[]);
        assert_eq!(v.id_of("[PAD]"), Some(0));
        assert_eq!(v.id_of("[UNK]"), Some(1));
        assert_eq!(v.id_of("[CLS]"), Some(2));
        assert_eq!(v.id_of("[SEP]"), Some(3));
        assert_eq!(v.id_of("[MASK]"), Some(4));
    }

    #[test]
    fn longest_match_hand_oracle() {
        let v = vocab_of(&["he", "##art", "a"]);
        let pieces = tokenize("heart", &v);
        assert_eq!(pieces.len(), 1);
        assert_eq!(pieces[0].pieces, vec!["he", "##art"]);
    }

    #[test]
    fn unmatchable_word_is_single_unk() {
        let v = vocab_of(&["he"]);
        let pieces = tokenize("xyz", &v);
        assert_eq!(pieces[0].pieces, vec!["[UNK]"]);
        // Partial match then dead end also collapses to one [UNK].
        let pieces = tokenize("heq", &v);
        assert_eq!(pieces[0].pieces, vec!["[UNK]"]);
    }

    #[test]
    fn empty_text_yields_no_word_tokens() {
        let v = vocab_of(&[]);
        assert!(tokenize("", &v).is_empty());
        let seq = encode(&[], &v, 200);
        assert_eq!(seq.attention_length, 2);
        assert_eq!(seq.ids[0], CLS);
        assert_eq!(seq.ids[1], SEP);
        assert!(seq.ids[2..].iter().all(|&id| id == PAD));
    }

    #[test]
    fn mask_literal_stays_atomic() {
        let v = vocab_of(&["he"]);
        let pieces = tokenize("he [MASK] he[MASK]x", &v);
        let flat: Vec<&str> = pieces
            .iter()
            .flat_map(|wp| wp.pieces.iter().map(String::as_str))
            .collect();
        assert!(flat.contains(&"[MASK]"));
        assert_eq!(pieces[1].word, "[MASK]");
        // Embedded literal splits out of the surrounding word.
        assert_eq!(pieces[2].word, "he");
        assert_eq!(pieces[3].word, "[MASK]");
    }

    #[test]
    fn encode_truncates_and_keeps_sep() {
        let v = vocab_of(&["a"]);
        let many: Vec<WordPieces> = (0..500)
            .map(|_| WordPieces {
                word: "a".into(),
                pieces: vec!["a".into()],
            })
            .collect();
        let seq = encode(&many, &v, 200);
        assert_eq!(seq.ids.len(), 200);
        assert_eq!(seq.attention_length, 200);
        assert_eq!(seq.ids[0], CLS);
        let a = v.id_of("a").unwrap();
        assert!(seq.ids[1..199].iter().all(|&id| id == a));
        assert_eq!(seq.ids[199], SEP);
        seq.check_invariants().unwrap();
    }

    #[test]
    fn zero_merge_vocab_is_specials_plus_alphabet() {
        // Alphabet of "aaab": units a, ##a, ##b.
        let v = train_vocab(&["aaab", "aaab"], 8).unwrap();
        assert_eq!(v.len(), 8);
        let mut tail: Vec<&str> = v.tokens()[5..].iter().map(String::as_str).collect();
        tail.sort_unstable();
        assert_eq!(tail, vec!["##a", "##b", "a"]);
    }

    #[test]
    fn first_merge_is_most_frequent_pair() {
        // Hand-run: "aaab" is [a, ##a, ##a, ##b]; all adjacent pairs occur
        // twice, so the lexicographically smallest pair (##a, ##a) merges
        // first, producing ##aa.
        let v = train_vocab(&["aaab", "aaab"], 9).unwrap();
        assert!(v.id_of("##aa").is_some(), "tokens: {:?}", v.tokens());
    }

    #[test]
    fn train_vocab_is_deterministic() {
        let corpus = ["the cat sat", "the bat", "a cat"];
        let a = train_vocab(&corpus, 24).unwrap();
        let b = train_vocab(&corpus, 24).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn below_minimum_target_errors() {
        assert!(train_vocab(&["ab"], 6).is_err());
    }

    #[test]
    fn trained_vocab_round_trips_common_words() {
        let corpus = ["hepatic vein thrombosis", "hepatic mass", "portal vein"];
        let v = train_vocab(&corpus, 60).unwrap();
        let seq = encode_text("hepatic vein", &v, 32);
        seq.check_invariants().unwrap();
        assert_eq!(decode(&seq, &v), "hepatic vein");
    }

    #[test]
    fn vocab_file_round_trip() {
        let v = train_vocab(&["abc abd"], 16).unwrap();
        let dir = std::env::temp_dir().join(format!("pc-vocab-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("vocab.txt");
        v.save(&path).unwrap();
        assert_eq!(Vocab::load(&path).unwrap(), v);
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn punctuation_splits_words() {
        let v = vocab_of(&["a", "b", ",", "."]);
        let words: Vec<String> = pre_split("a,b. c").into_iter().collect();
        assert_eq!(words, vec!["a", ",", "b", ".", "c"]);
        let _ = v;
    }
}
