//! Masked data augmentation: unlabeled variants of training instances for a
//! teacher model to soft-label.
//!
//! Each variant draws `P ~ U[0,1)` and takes exactly one branch:
//!
//! - `P < mask_threshold`: one uniformly chosen history/diagnosis word
//!   becomes `[MASK]`;
//! - `P < pos_threshold`: one word is replaced by a different training-set
//!   word with the same POS tag (falling back to `[MASK]` when its tag class
//!   has no other word);
//! - otherwise: an n-gram (`n` uniform in the configured range, clipped to
//!   the remainder of the field) collapses into a single `[MASK]`.
//!
//! Only the free-text fields change; the structured template prefix stays
//! byte-identical to the origin's. Variants are deduplicated per origin on
//! the exact rendered string.

use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{render_template, ExamRecord, COLUMNS};
use crate::error::{Error, Result};
use crate::seed;
use crate::text::pos::PosIndex;
use crate::text::SPECIALS;

const MASK_WORD: &str = "[MASK]";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentationPolicy {
    /// Branch boundary for single-word masking.
    pub mask_threshold: f64,
    /// Branch boundary for POS-guided replacement.
    pub pos_threshold: f64,
    pub ngram_min: usize,
    pub ngram_max: usize,
    /// Target variants per origin instance.
    pub n_aug: usize,
    /// Originals + variants per class never exceed this.
    pub class_cap: usize,
    /// Per origin, give up after `max_attempts_factor * n_aug` draws.
    pub max_attempts_factor: usize,
    pub seed: u64,
}

impl Default for AugmentationPolicy {
    fn default() -> Self {
        AugmentationPolicy {
            mask_threshold: 0.1,
            pos_threshold: 0.2,
            ngram_min: 1,
            ngram_max: 3,
            n_aug: 30,
            class_cap: 12000,
            max_attempts_factor: 10,
            seed: 0,
        }
    }
}

impl AugmentationPolicy {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 <= self.mask_threshold
            && self.mask_threshold <= self.pos_threshold
            && self.pos_threshold <= 1.0)
        {
            return Err(Error::InvalidConfig(
                "need 0 <= mask_threshold <= pos_threshold <= 1".into(),
            ));
        }
        if self.ngram_min == 0 || self.ngram_min > self.ngram_max {
            return Err(Error::InvalidConfig(
                "ngram range must satisfy 1 <= min <= max".into(),
            ));
        }
        Ok(())
    }
}

/// Which branch a variant took; exposed for the branch-frequency checks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Branch {
    MaskWord,
    PosReplace,
    MaskNgram,
}

/// One unlabeled variant: the altered record (no gold label) plus the index
/// of its origin in the source dataset.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AugmentedInstance {
    pub origin_id: usize,
    pub record: ExamRecord,
}

impl AugmentedInstance {
    pub fn text(&self) -> String {
        render_template(&self.record)
    }

    /// Variants never carry a usable gold label.
    pub fn has_gold_label(&self) -> bool {
        false
    }
}

fn split_words(record: &ExamRecord) -> (Vec<String>, Vec<String>) {
    (
        record.history.split_whitespace().map(String::from).collect(),
        record.diagnosis.split_whitespace().map(String::from).collect(),
    )
}

/// Pick a different training-set word with the same POS tag, uniformly;
/// `None` when the tag class is a singleton.
fn pos_candidate(word: &str, pos_index: &PosIndex, rng: &mut ChaCha8Rng) -> Option<String> {
    let tag = pos_index.tag(word);
    let pool = pos_index.words_with_tag(tag);
    let word_pos = pool.binary_search_by(|w| w.as_str().cmp(word)).ok();
    let usable = pool.len() - usize::from(word_pos.is_some());
    if usable == 0 {
        return None;
    }
    let mut pick = rng.random_range(0..usable);
    if let Some(wp) = word_pos {
        if pick >= wp {
            pick += 1;
        }
    }
    Some(pool[pick].clone())
}

fn augment_with_p(
    record: &ExamRecord,
    p: f64,
    policy: &AugmentationPolicy,
    pos_index: &PosIndex,
    rng: &mut ChaCha8Rng,
) -> Result<(ExamRecord, Branch)> {
    let (mut history, mut diagnosis) = split_words(record);
    let total = history.len() + diagnosis.len();
    if total == 0 {
        return Err(Error::NotAugmentable);
    }
    let pick = rng.random_range(0..total);
    let (field, idx): (&mut Vec<String>, usize) = if pick < history.len() {
        (&mut history, pick)
    } else {
        (&mut diagnosis, pick - history.len())
    };

    let branch = if p < policy.mask_threshold {
        field[idx] = MASK_WORD.to_string();
        Branch::MaskWord
    } else if p < policy.pos_threshold {
        let replacement = pos_candidate(&field[idx], pos_index, rng)
            .unwrap_or_else(|| MASK_WORD.to_string());
        field[idx] = replacement;
        Branch::PosReplace
    } else {
        let drawn = rng.random_range(policy.ngram_min..=policy.ngram_max);
        let n = drawn.min(field.len() - idx);
        field.splice(idx..idx + n, [MASK_WORD.to_string()]);
        Branch::MaskNgram
    };

    let mut out = record.clone();
    out.history = history.join(" ");
    out.diagnosis = diagnosis.join(" ");
    out.protocol_group = None;
    Ok((out, branch))
}

/// Generate one variant of `record`. Errors when the record has no
/// history/diagnosis words (callers skip such records).
pub fn augment_instance(
    record: &ExamRecord,
    policy: &AugmentationPolicy,
    pos_index: &PosIndex,
    rng: &mut ChaCha8Rng,
) -> Result<(ExamRecord, Branch)> {
    let p: f64 = rng.random();
    augment_with_p(record, p, policy, pos_index, rng)
}

/// Generate the augmented corpus for one training fold.
///
/// Per class, the variant budget is `min(n_aug * augmentable_origins,
/// class_cap - originals)`, spread across that class's origins by randomized
/// round-robin so no origin exceeds `n_aug` and origin coverage is maximal.
/// Each origin owns a seed-derived RNG stream, so output is independent of
/// processing order; ordering is canonical (origin index, then variant
/// index).
pub fn augment_dataset(
    records: &[ExamRecord],
    labels: &[usize],
    policy: &AugmentationPolicy,
    pos_index: &PosIndex,
) -> Result<Vec<AugmentedInstance>> {
    policy.validate()?;
    if records.len() != labels.len() {
        return Err(Error::shape(
            "augment_dataset",
            &[records.len()],
            &[labels.len()],
        ));
    }
    if policy.n_aug == 0 {
        return Ok(Vec::new());
    }
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (idx, &label) in labels.iter().enumerate() {
        by_class.entry(label).or_default().push(idx);
    }
    let mut quotas: BTreeMap<usize, usize> = BTreeMap::new();
    for (&class, members) in &by_class {
        let augmentable: Vec<usize> = members
            .iter()
            .copied()
            .filter(|&i| {
                let r = &records[i];
                crate::data::word_count(&r.history) + crate::data::word_count(&r.diagnosis) > 0
            })
            .collect();
        if augmentable.is_empty() {
            continue;
        }
        let headroom = policy.class_cap.saturating_sub(members.len());
        let budget = headroom.min(policy.n_aug * augmentable.len());
        if budget == 0 {
            continue;
        }
        // Randomized round-robin: shuffle, then deal floor quotas with the
        // remainder going one-each to the front of the shuffled order.
        let mut order = augmentable;
        let mut rng = ChaCha8Rng::seed_from_u64(seed::derive_indexed(
            policy.seed,
            &["roundrobin"],
            class as u64,
        ));
        use rand::seq::SliceRandom;
        order.shuffle(&mut rng);
        let base = budget / order.len();
        let extra = budget % order.len();
        for (rank, &origin) in order.iter().enumerate() {
            let quota = (base + usize::from(rank < extra)).min(policy.n_aug);
            if quota > 0 {
                quotas.insert(origin, quota);
            }
        }
    }

    let mut out = Vec::new();
    for (origin, &quota) in &quotas {
        let record = &records[*origin];
        let origin_text = render_template(record);
        let mut rng = ChaCha8Rng::seed_from_u64(seed::derive_indexed(
            policy.seed,
            &["origin"],
            *origin as u64,
        ));
        let mut seen: HashSet<String> = HashSet::new();
        let mut produced = 0usize;
        let max_attempts = policy.max_attempts_factor * policy.n_aug;
        for _ in 0..max_attempts {
            if produced == quota {
                break;
            }
            let (variant, _) = augment_instance(record, policy, pos_index, &mut rng)?;
            let text = render_template(&variant);
            if text == origin_text || !seen.insert(text) {
                continue;
            }
            out.push(AugmentedInstance {
                origin_id: *origin,
                record: variant,
            });
            produced += 1;
        }
    }
    Ok(out)
}

/// Build a POS index from a training fold's history/diagnosis words. The
/// `[MASK]` literal never enters the index.
pub fn pos_index_for(records: &[ExamRecord]) -> PosIndex {
    let words: Vec<&str> = records
        .iter()
        .flat_map(|r| {
            r.history
                .split_whitespace()
                .chain(r.diagnosis.split_whitespace())
        })
        .filter(|w| !SPECIALS.contains(w))
        .collect();
    PosIndex::build(words)
}

const AUG_COLUMNS: [&str; 9] = [
    "exam_code",
    "exam_name",
    "sex",
    "age",
    "history",
    "diagnosis",
    "protocol_group",
    "origin_id",
    "has_gold_label",
];

/// Persist an augmented corpus: the dataset columns plus `origin_id` and
/// `has_gold_label=false`.
pub fn save_augmented(path: &Path, instances: &[AugmentedInstance]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut writer = csv::Writer::from_writer(BufWriter::new(file));
    writer.write_record(AUG_COLUMNS)?;
    for inst in instances {
        let r = &inst.record;
        writer.write_record([
            r.exam_code.as_str(),
            r.exam_name.as_str(),
            r.sex.as_str(),
            &r.age.to_string(),
            r.history.as_str(),
            r.diagnosis.as_str(),
            "",
            &inst.origin_id.to_string(),
            "false",
        ])?;
    }
    writer
        .flush()
        .map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn load_augmented(path: &Path) -> Result<Vec<AugmentedInstance>> {
    let file = File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut reader = csv::Reader::from_reader(BufReader::new(file));
    let headers = reader.headers()?.clone();
    let expected: Vec<&str> = AUG_COLUMNS.to_vec();
    let got: Vec<&str> = headers.iter().collect();
    if got != expected {
        return Err(Error::InvalidConfig(format!(
            "augmented corpus header {got:?} does not match {expected:?}"
        )));
    }
    let mut out = Vec::new();
    for (row_idx, row) in reader.records().enumerate() {
        let row = row?;
        let row_no = row_idx + 1;
        let get = |i: usize| row.get(i).unwrap_or("");
        let age: u32 = get(3).parse().map_err(|_| Error::MalformedRow {
            row: row_no,
            field: "age".into(),
            message: format!("expected integer, got {:?}", get(3)),
        })?;
        let origin_id: usize = get(7).parse().map_err(|_| Error::MalformedRow {
            row: row_no,
            field: "origin_id".into(),
            message: format!("expected integer, got {:?}", get(7)),
        })?;
        if get(8) != "false" {
            return Err(Error::MalformedRow {
                row: row_no,
                field: "has_gold_label".into(),
                message: "augmented rows must carry has_gold_label=false".into(),
            });
        }
        out.push(AugmentedInstance {
            origin_id,
            record: ExamRecord {
                exam_code: get(0).to_string(),
                exam_name: get(1).to_string(),
                sex: get(2).to_string(),
                age,
                history: get(4).to_string(),
                diagnosis: get(5).to_string(),
                protocol_group: None,
            },
        });
    }
    let _ = COLUMNS; // augmented schema extends the dataset schema
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(history: &str, diagnosis: &str) -> ExamRecord {
        ExamRecord {
            exam_code: "CABDWC".into(),
            exam_name: "CT STUDY CABDWC".into(),
            sex: "2".into(),
            age: 67,
            history: history.into(),
            diagnosis: diagnosis.into(),
            protocol_group: Some("G".into()),
        }
    }

    fn index_of(words: &[&str]) -> PosIndex {
        PosIndex::build(words.iter().copied())
    }

    #[test]
    fn forced_mask_branch_on_single_word() {
        let r = record("hernia", "");
        let policy = AugmentationPolicy::default();
        let idx = index_of(&["hernia"]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (variant, branch) = augment_with_p(&r, 0.05, &policy, &idx, &mut rng).unwrap();
        assert_eq!(branch, Branch::MaskWord);
        assert_eq!(variant.history, "[MASK]");
        assert_eq!(variant.diagnosis, "");
        assert_eq!(variant.protocol_group, None);
    }

    #[test]
    fn forced_pos_branch_two_word_class() {
        // biopsy and laceration are both NOUN; replacing biopsy must yield
        // the only other member.
        let r = record("biopsy", "");
        let policy = AugmentationPolicy::default();
        let idx = index_of(&["biopsy", "laceration"]);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (variant, branch) = augment_with_p(&r, 0.15, &policy, &idx, &mut rng).unwrap();
        assert_eq!(branch, Branch::PosReplace);
        assert_eq!(variant.history, "laceration");
    }

    #[test]
    fn pos_branch_singleton_falls_back_to_mask() {
        let r = record("biopsy", "");
        let policy = AugmentationPolicy::default();
        let idx = index_of(&["biopsy"]);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (variant, _) = augment_with_p(&r, 0.15, &policy, &idx, &mut rng).unwrap();
        assert_eq!(variant.history, "[MASK]");
    }

    #[test]
    fn ngram_branch_collapses_span() {
        let r = record("", "a b c d e");
        let policy = AugmentationPolicy::default();
        let idx = index_of(&["a", "b", "c", "d", "e"]);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (variant, branch) = augment_with_p(&r, 0.9, &policy, &idx, &mut rng).unwrap();
        assert_eq!(branch, Branch::MaskNgram);
        let words: Vec<&str> = variant.diagnosis.split_whitespace().collect();
        assert!(words.len() < 5 + 1 && words.len() >= 3, "{words:?}");
        assert_eq!(words.iter().filter(|w| **w == "[MASK]").count(), 1);
    }

    #[test]
    fn empty_record_is_not_augmentable() {
        let r = record("", "");
        let policy = AugmentationPolicy::default();
        let idx = index_of(&["x"]);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        assert!(matches!(
            augment_instance(&r, &policy, &idx, &mut rng),
            Err(Error::NotAugmentable)
        ));
    }

    #[test]
    fn branch_frequencies_track_thresholds() {
        let r = record("one two three four", "five six seven eight nine");
        let policy = AugmentationPolicy::default();
        let idx = index_of(&["one", "two", "three", "four", "five", "six", "seven"]);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut counts = [0usize; 3];
        let n = 20_000;
        for _ in 0..n {
            let (_, branch) = augment_instance(&r, &policy, &idx, &mut rng).unwrap();
            counts[match branch {
                Branch::MaskWord => 0,
                Branch::PosReplace => 1,
                Branch::MaskNgram => 2,
            }] += 1;
        }
        let freq = |c: usize| c as f64 / n as f64;
        assert!((freq(counts[0]) - 0.1).abs() < 0.02, "{counts:?}");
        assert!((freq(counts[1]) - 0.1).abs() < 0.02, "{counts:?}");
        assert!((freq(counts[2]) - 0.8).abs() < 0.02, "{counts:?}");
    }

    fn rich_records(n: usize) -> (Vec<ExamRecord>, Vec<usize>) {
        let records: Vec<ExamRecord> = (0..n)
            .map(|i| {
                record(
                    &format!("alpha{i} beta gamma delta epsilon zeta eta theta iota"),
                    &format!("kappa lambda{i} mu nu xi omicron pi rho sigma tau"),
                )
            })
            .collect();
        let labels = vec![0usize; n];
        (records, labels)
    }

    #[test]
    fn n_aug_zero_yields_empty() {
        let (records, labels) = rich_records(3);
        let policy = AugmentationPolicy {
            n_aug: 0,
            ..Default::default()
        };
        let idx = pos_index_for(&records);
        assert!(augment_dataset(&records, &labels, &policy, &idx)
            .unwrap()
            .is_empty());
    }

    #[test]
    fn rich_class_hits_full_quota_without_duplicates() {
        let (records, labels) = rich_records(40);
        let policy = AugmentationPolicy {
            n_aug: 30,
            class_cap: 12000,
            seed: 7,
            ..Default::default()
        };
        let idx = pos_index_for(&records);
        let out = augment_dataset(&records, &labels, &policy, &idx).unwrap();
        assert_eq!(out.len(), 40 * 30);
        // Brute-force duplicate scan per origin.
        let mut by_origin: BTreeMap<usize, Vec<String>> = BTreeMap::new();
        for inst in &out {
            by_origin.entry(inst.origin_id).or_default().push(inst.text());
        }
        for (origin, texts) in by_origin {
            let distinct: HashSet<&String> = texts.iter().collect();
            assert_eq!(distinct.len(), texts.len(), "origin {origin}");
            let origin_text = render_template(&records[origin]);
            assert!(!distinct.contains(&origin_text));
        }
    }

    #[test]
    fn class_cap_limits_variants() {
        let (records, labels) = rich_records(95);
        let policy = AugmentationPolicy {
            n_aug: 30,
            class_cap: 100,
            seed: 8,
            ..Default::default()
        };
        let idx = pos_index_for(&records);
        let out = augment_dataset(&records, &labels, &policy, &idx).unwrap();
        assert!(out.len() <= 5, "{}", out.len());
        // Round-robin: five distinct origins get one variant each.
        let origins: HashSet<usize> = out.iter().map(|i| i.origin_id).collect();
        assert_eq!(origins.len(), out.len());
    }

    #[test]
    fn structured_prefix_is_preserved() {
        let (records, labels) = rich_records(4);
        let policy = AugmentationPolicy {
            n_aug: 10,
            seed: 9,
            ..Default::default()
        };
        let idx = pos_index_for(&records);
        for inst in augment_dataset(&records, &labels, &policy, &idx).unwrap() {
            let origin = &records[inst.origin_id];
            let prefix = |r: &ExamRecord| {
                format!("Exam is {}. Sex is {}. Age at Exam {}. History:", r.exam_code, r.sex, r.age)
            };
            assert_eq!(prefix(&inst.record), prefix(origin));
            assert!(inst.text().starts_with(&prefix(origin)));
            assert!(!inst.has_gold_label());
        }
    }

    #[test]
    fn augmentation_is_deterministic() {
        let (records, labels) = rich_records(6);
        let policy = AugmentationPolicy {
            n_aug: 8,
            seed: 10,
            ..Default::default()
        };
        let idx = pos_index_for(&records);
        let a = augment_dataset(&records, &labels, &policy, &idx).unwrap();
        let b = augment_dataset(&records, &labels, &policy, &idx).unwrap();
        assert_eq!(a, b);
        let other = AugmentationPolicy {
            seed: 11,
            ..policy
        };
        assert_ne!(augment_dataset(&records, &labels, &other, &idx).unwrap(), a);
    }

    #[test]
    fn augmented_file_round_trip() {
        let (records, labels) = rich_records(3);
        let policy = AugmentationPolicy {
            n_aug: 4,
            seed: 12,
            ..Default::default()
        };
        let idx = pos_index_for(&records);
        let out = augment_dataset(&records, &labels, &policy, &idx).unwrap();
        let dir = std::env::temp_dir().join(format!("pc-aug-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("aug.csv");
        save_augmented(&path, &out).unwrap();
        let loaded = load_augmented(&path).unwrap();
        assert_eq!(loaded, out);
        std::fs::remove_dir_all(&dir).ok();
    }
}
