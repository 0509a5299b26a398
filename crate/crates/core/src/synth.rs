//! Synthetic exam corpora whose class imbalance and text statistics match the
//! published characteristics of the private source dataset.
//!
//! Text realism is bag-of-terms, not prose: the pipeline under test consumes
//! token statistics, so clause structure is irrelevant. Task difficulty is
//! controlled by `marker_strength` (how often a record carries its class's
//! discriminative terms) and by marker sharing between designated confusable
//! class pairs, which reproduces the qualitative minority-class failure mode
//! of the source data (the two liver-phase protocols).

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::ExamRecord;
use crate::error::{Error, Result};
use crate::seed;

/// Per-class record counts, either explicit or Zipf-shaped.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ClassProfile {
    Explicit(Vec<usize>),
    Zipf {
        n_classes: usize,
        exponent: f64,
        total: usize,
    },
}

/// Target word-count statistics for one text field, as measured over the
/// whole corpus (records with an empty field count as zero words).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WordProfile {
    pub mean: f64,
    pub sd: f64,
    pub max_words: usize,
}

/// Term pools for one class. History/diagnosis pools are typically shared
/// verbatim across classes so that, with `marker_strength = 0`, class term
/// distributions are exchangeable and carry no signal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassTerms {
    pub name: String,
    pub history_terms: Vec<String>,
    pub diagnosis_terms: Vec<String>,
    pub marker_terms: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub profile: ClassProfile,
    pub classes: Vec<ClassTerms>,
    /// Global pool: exam codes are drawn independently of class so they leak
    /// no label signal.
    pub exam_codes: Vec<String>,
    /// Probability a record's fields carry its class's marker terms.
    pub marker_strength: f64,
    /// Probability the history field is empty.
    pub history_missing_rate: f64,
    pub history_words: WordProfile,
    pub diagnosis_words: WordProfile,
    /// Class-name pairs that share marker terms (documentation for reports
    /// and tests; the sharing itself lives in the marker pools).
    pub confusable_pairs: Vec<(String, String)>,
    pub seed: u64,
}

impl SynthConfig {
    pub fn n_classes(&self) -> usize {
        match &self.profile {
            ClassProfile::Explicit(counts) => counts.len(),
            ClassProfile::Zipf { n_classes, .. } => *n_classes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.marker_strength) {
            return Err(Error::InvalidConfig("marker_strength must be in [0,1]".into()));
        }
        if !(0.0..=1.0).contains(&self.history_missing_rate) {
            return Err(Error::InvalidConfig(
                "history_missing_rate must be in [0,1]".into(),
            ));
        }
        if let ClassProfile::Zipf { exponent, .. } = self.profile {
            if exponent <= 0.0 {
                return Err(Error::InvalidConfig("zipf exponent must be > 0".into()));
            }
        }
        if self.classes.len() != self.n_classes() {
            return Err(Error::InvalidConfig(format!(
                "profile has {} classes but {} term pools were given",
                self.n_classes(),
                self.classes.len()
            )));
        }
        if self.exam_codes.is_empty() {
            return Err(Error::InvalidConfig("exam_codes pool is empty".into()));
        }
        Ok(())
    }
}

/// Resolve the per-class record counts.
///
/// Zipf mode assigns `round(N * r^-s / W)` to rank `r` (1-based, `W` the
/// normalizer) and gives any rounding remainder to rank 1, so counts sum to
/// `N` exactly and are largest-first.
pub fn class_count_profile(config: &SynthConfig) -> Result<Vec<usize>> {
    match &config.profile {
        ClassProfile::Explicit(counts) => Ok(counts.clone()),
        &ClassProfile::Zipf {
            n_classes,
            exponent,
            total,
        } => {
            if n_classes == 0 {
                return Ok(Vec::new());
            }
            if total == 0 {
                return Err(Error::InvalidConfig(
                    "zipf profile with classes but total N = 0".into(),
                ));
            }
            let weights: Vec<f64> = (1..=n_classes)
                .map(|r| (r as f64).powf(-exponent))
                .collect();
            let norm: f64 = weights.iter().sum();
            let mut counts: Vec<i64> = weights
                .iter()
                .map(|w| (total as f64 * w / norm).round() as i64)
                .collect();
            let assigned: i64 = counts.iter().sum();
            counts[0] += total as i64 - assigned;
            if counts[0] < 0 {
                return Err(Error::InvalidConfig(
                    "zipf rounding produced a negative rank-1 count".into(),
                ));
            }
            Ok(counts.into_iter().map(|c| c as usize).collect())
        }
    }
}

/// Draw-distribution parameters solved so that round+clip of a normal hits
/// the configured post-hoc targets.
#[derive(Debug, Clone, Copy)]
struct DrawParams {
    mean: f64,
    sd: f64,
    max_words: usize,
}

fn normal_pdf(z: f64) -> f64 {
    (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// First two moments of `clamp(round(N(mu, sigma)), 1, max)` by quadrature.
fn clipped_moments(mu: f64, sigma: f64, max: usize) -> (f64, f64) {
    let step = 0.004;
    let mut m1 = 0.0;
    let mut m2 = 0.0;
    let mut z = -8.0 + step / 2.0;
    while z < 8.0 {
        let x = mu + sigma * z;
        let y = x.round().clamp(1.0, max as f64);
        let w = normal_pdf(z) * step;
        m1 += y * w;
        m2 += y * y * w;
        z += step;
    }
    (m1, (m2 - m1 * m1).max(1e-12).sqrt())
}

/// Invert `clipped_moments` for a (mean, sd) target by damped fixed-point
/// iteration. Targets are the statistics of the field when present.
fn solve_draw_params(target_mean: f64, target_sd: f64, max_words: usize) -> Result<DrawParams> {
    if target_mean < 1.0 || target_sd <= 0.0 {
        return Err(Error::InvalidConfig(format!(
            "unreachable word-count target mean {target_mean} sd {target_sd}"
        )));
    }
    let mut mu = target_mean;
    let mut sigma = target_sd;
    for _ in 0..80 {
        let (m, s) = clipped_moments(mu, sigma, max_words);
        mu += 0.8 * (target_mean - m);
        sigma *= (target_sd / s).powf(0.8);
        sigma = sigma.clamp(1e-3, 1e4);
    }
    Ok(DrawParams {
        mean: mu,
        sd: sigma,
        max_words,
    })
}

/// Convert whole-corpus targets (zeros included) to present-field targets
/// given the missing rate.
fn present_field_targets(profile: &WordProfile, missing_rate: f64) -> Result<(f64, f64)> {
    if missing_rate == 0.0 {
        return Ok((profile.mean, profile.sd));
    }
    let keep = 1.0 - missing_rate;
    if keep <= 0.0 {
        return Err(Error::InvalidConfig("missing rate must be < 1".into()));
    }
    let mean = profile.mean / keep;
    let second = (profile.sd * profile.sd + profile.mean * profile.mean) / keep;
    let var = second - mean * mean;
    if var <= 0.0 {
        return Err(Error::InvalidConfig(
            "word-count targets incompatible with missing rate".into(),
        ));
    }
    Ok((mean, var.sqrt()))
}

fn draw_word_count(params: &DrawParams, rng: &mut impl Rng) -> usize {
    let normal = rand_distr::Normal::new(params.mean, params.sd).expect("finite params");
    let x: f64 = rng.sample(normal);
    x.round().clamp(1.0, params.max_words as f64) as usize
}

fn draw_words(pool: &[String], n: usize, rng: &mut impl Rng) -> Vec<String> {
    (0..n)
        .map(|_| pool[rng.random_range(0..pool.len())].clone())
        .collect()
}

/// Generate the full corpus: exactly `class_count_profile` records per class,
/// grouped by class in profile order, deterministic for a given seed. Each
/// record draws from its own seed-derived stream so generation order never
/// affects content.
pub fn generate_dataset(config: &SynthConfig) -> Result<Vec<ExamRecord>> {
    config.validate()?;
    let counts = class_count_profile(config)?;
    for (terms, &count) in config.classes.iter().zip(&counts) {
        if count > 0 && (terms.history_terms.is_empty() || terms.diagnosis_terms.is_empty()) {
            return Err(Error::EmptyInput(format!(
                "class {:?} has an empty term pool",
                terms.name
            )));
        }
        if count > 0 && config.marker_strength > 0.0 && terms.marker_terms.is_empty() {
            return Err(Error::EmptyInput(format!(
                "class {:?} has no marker terms but marker_strength > 0",
                terms.name
            )));
        }
    }
    let (h_mean, h_sd) =
        present_field_targets(&config.history_words, config.history_missing_rate)?;
    let history_draw = solve_draw_params(h_mean, h_sd, config.history_words.max_words)?;
    let diagnosis_draw = solve_draw_params(
        config.diagnosis_words.mean,
        config.diagnosis_words.sd,
        config.diagnosis_words.max_words,
    )?;

    let mut records = Vec::with_capacity(counts.iter().sum());
    let mut record_id: u64 = 0;
    for (class_idx, &count) in counts.iter().enumerate() {
        let terms = &config.classes[class_idx];
        for _ in 0..count {
            let mut rng =
                ChaCha8Rng::seed_from_u64(seed::derive_indexed(config.seed, &["record"], record_id));
            record_id += 1;

            let exam_code = config.exam_codes[rng.random_range(0..config.exam_codes.len())].clone();
            let sex = if rng.random_range(0..2) == 0 { "1" } else { "2" };
            let age: u32 = rng.random_range(18..=90);

            let history_present = rng.random::<f64>() >= config.history_missing_rate;
            let mut history = if history_present {
                let n = draw_word_count(&history_draw, &mut rng);
                draw_words(&terms.history_terms, n, &mut rng)
            } else {
                Vec::new()
            };
            let n = draw_word_count(&diagnosis_draw, &mut rng);
            let mut diagnosis = draw_words(&terms.diagnosis_terms, n, &mut rng);

            // Markers replace an existing word so word-count statistics stay
            // untouched by marker_strength.
            if config.marker_strength > 0.0 && rng.random::<f64>() < config.marker_strength {
                let marker = &terms.marker_terms[rng.random_range(0..terms.marker_terms.len())];
                let pos = rng.random_range(0..diagnosis.len());
                diagnosis[pos] = marker.clone();
                if !history.is_empty() {
                    let marker =
                        &terms.marker_terms[rng.random_range(0..terms.marker_terms.len())];
                    let pos = rng.random_range(0..history.len());
                    history[pos] = marker.clone();
                }
            }

            records.push(ExamRecord {
                exam_name: format!("CT STUDY {exam_code}"),
                exam_code,
                sex: sex.to_string(),
                age,
                history: history.join(" "),
                diagnosis: diagnosis.join(" "),
                protocol_group: Some(terms.name.clone()),
            });
        }
    }
    Ok(records)
}

/// The 25 retained protocol groups of the published distribution, largest
/// first, with their examination counts.
pub const UW_CT_BODY_GROUPS: [(&str, usize); 25] = [
    ("CT CAP IV and Oral", 11911),
    ("CT Abdomen Pelvis w IV Only", 8057),
    ("CT CAP IV Only", 3351),
    ("CT Abdomen Pelvis w IV and Oral", 2941),
    ("CT Renal Mass", 2036),
    ("CT Liver 3 Phase", 1652),
    ("CT Abdomen Pelvis No Contrast", 931),
    ("CT IVP 50 yrs +", 854),
    ("CT CAP Oral Only", 531),
    ("CT CAP No Contrast", 336),
    ("CT Abd Pel Enterography", 297),
    ("CT Liver 4 Phase", 252),
    ("CT CA IV Only", 226),
    ("CT IVP < 50", 220),
    ("CT Pancreas Mass 3 Phase", 202),
    ("CT Abdomen No Contrast", 195),
    ("CT CA IV and Oral", 194),
    ("CT Pelvis IV Only", 192),
    ("CT Abdomen IV and Oral", 173),
    ("CT Pancreas Mass 2 Phase", 143),
    ("CT Abdomen Pelvis w Oral only", 132),
    ("CT CA No Contrast", 75),
    ("CT Pelvis Cystogram", 68),
    ("CT Liver 2 Phase", 51),
    ("CT Pelvis IV and Oral", 42),
];

const HISTORY_TERMS: &str = "pain nausea vomiting fever chills fatigue weakness dizziness \
    swelling tenderness cramping bloating distension jaundice anemia dehydration hypertension \
    diabetes obesity smoker transplant dialysis chemotherapy radiation surgery resection \
    appendectomy cholecystectomy colectomy hysterectomy nephrectomy biopsy stent drain \
    catheter fistula hernia abscess cyst polyp nodule lesion mass tumor carcinoma lymphoma \
    melanoma sarcoma metastasis recurrence remission followup surveillance screening trauma \
    fall collision injury fracture hematoma bleeding melena hematuria dysuria constipation \
    diarrhea reflux gastritis colitis pancreatitis hepatitis cirrhosis ascites gallstones \
    kidney ureter bladder prostate ovarian uterine hepatic splenic renal adrenal gastric \
    colonic rectal pelvic abdominal creatinine elevated baseline chronic acute intermittent \
    progressive stable worsening postoperative anticoagulated febrile hypotensive tachycardic";

const DIAGNOSIS_TERMS: &str = "evaluate assess characterize exclude confirm monitor restage \
    stage compare correlate concern suspicion suspected possible probable known history \
    abnormal equivocal incidental enlarging shrinking persistent resolving new residual \
    recurrent metastatic primary benign malignant indeterminate obstruction perforation \
    ischemia infarction thrombosis embolism aneurysm dissection stenosis occlusion \
    inflammation infection sepsis collection fluid gas free air wall thickening \
    lymphadenopathy organomegaly hepatomegaly splenomegaly hydronephrosis calculus stone \
    diverticulitis appendicitis cholecystitis obstipation ileus volvulus intussusception \
    carcinomatosis sarcoidosis fibrosis atrophy hypertrophy hyperplasia dysplasia neoplasm \
    adenoma hemangioma angiomyolipoma oncocytoma pseudocyst pancreatic hepatic renal \
    adnexal peritoneal retroperitoneal mesenteric omental serosal mucosal surveillance \
    protocol contrast enhancement washout arterial venous delayed phase weight loss anorexia";

const EXAM_CODES: [&str; 40] = [
    "CABDWC", "CABDWO", "CABPWC", "CABPWO", "CAPIVO", "CAPORO", "CAPNCO", "CCHAPC", "CCHAPO",
    "CRENMS", "CLIV3P", "CLIV2P", "CLIV4P", "CPANM2", "CPANM3", "CIVPYG", "CIVPOG", "CENTRG",
    "CPELIV", "CPELOR", "CPELCY", "CABNCO", "CCANCO", "CCAIVO", "CCAIVR", "CABIVO", "CABIVR",
    "CAPWI31", "CAPWIV2", "CABD3X", "CPEL2X", "CREN1X", "CCAP4X", "CLIVTX", "CPANTX", "CIVPTX",
    "CENTTX", "CPELTX", "CABDTX", "CCAPTX",
];

/// Built-in profile mirroring the published body-CT distribution.
///
/// `scale` shrinks every group count (floored at 5 so 5-fold stratification
/// stays valid); `scale = 1.0` reproduces the published counts exactly. The
/// two liver-phase groups form a confusable pair: the rare group's marker
/// pool is mostly shared with the common one, so models misclassify it the
/// way the source data shows.
pub fn uw_ct_body(scale: f64, marker_strength: f64, seed: u64) -> SynthConfig {
    let counts: Vec<usize> = UW_CT_BODY_GROUPS
        .iter()
        .map(|&(_, c)| {
            if scale == 1.0 {
                c
            } else {
                ((c as f64 * scale).round() as usize).max(5)
            }
        })
        .collect();
    let history_pool: Vec<String> = HISTORY_TERMS.split_whitespace().map(String::from).collect();
    let diagnosis_pool: Vec<String> = DIAGNOSIS_TERMS
        .split_whitespace()
        .map(String::from)
        .collect();
    let marker_pool = |i: usize| -> Vec<String> {
        ["a", "b", "c", "d"]
            .iter()
            .map(|s| format!("sign{i:02}{s}"))
            .collect()
    };
    let liver3 = 5; // "CT Liver 3 Phase"
    let liver2 = 23; // "CT Liver 2 Phase"
    let classes: Vec<ClassTerms> = UW_CT_BODY_GROUPS
        .iter()
        .enumerate()
        .map(|(i, &(name, _))| {
            let marker_terms = if i == liver2 {
                // Rare liver group: three of four markers borrowed from the
                // common liver group.
                let mut m = marker_pool(liver3)[..3].to_vec();
                m.push(format!("sign{liver2:02}a"));
                m
            } else {
                marker_pool(i)
            };
            ClassTerms {
                name: name.to_string(),
                history_terms: history_pool.clone(),
                diagnosis_terms: diagnosis_pool.clone(),
                marker_terms,
            }
        })
        .collect();
    SynthConfig {
        profile: ClassProfile::Explicit(counts),
        classes,
        exam_codes: EXAM_CODES.iter().map(|s| s.to_string()).collect(),
        marker_strength,
        history_missing_rate: 0.136,
        history_words: WordProfile {
            mean: 8.0,
            sd: 6.57,
            max_words: 47,
        },
        diagnosis_words: WordProfile {
            mean: 10.0,
            sd: 8.6,
            max_words: 108,
        },
        confusable_pairs: vec![(
            UW_CT_BODY_GROUPS[liver3].0.to_string(),
            UW_CT_BODY_GROUPS[liver2].0.to_string(),
        )],
        seed,
    }
}

/// Look up a built-in profile by name.
pub fn builtin_profile(
    name: &str,
    scale: f64,
    marker_strength: f64,
    seed: u64,
) -> Result<SynthConfig> {
    match name {
        "uw-ct-body" => Ok(uw_ct_body(scale, marker_strength, seed)),
        other => Err(Error::InvalidConfig(format!(
            "unknown synth profile `{other}` (available: uw-ct-body)"
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{compute_stats, word_count};

    fn tiny_config(marker_strength: f64, seed: u64) -> SynthConfig {
        let base: Vec<String> = "alpha beta gamma delta epsilon zeta eta theta"
            .split_whitespace()
            .map(String::from)
            .collect();
        let classes = (0..4)
            .map(|i| ClassTerms {
                name: format!("class-{i}"),
                history_terms: base.clone(),
                diagnosis_terms: base.clone(),
                marker_terms: vec![format!("mk{i}x"), format!("mk{i}y")],
            })
            .collect();
        SynthConfig {
            profile: ClassProfile::Explicit(vec![30, 20, 10, 5]),
            classes,
            exam_codes: vec!["CODEA".into(), "CODEB".into(), "CODEC".into()],
            marker_strength,
            history_missing_rate: 0.1,
            history_words: WordProfile {
                mean: 6.0,
                sd: 3.0,
                max_words: 20,
            },
            diagnosis_words: WordProfile {
                mean: 8.0,
                sd: 4.0,
                max_words: 30,
            },
            confusable_pairs: vec![],
            seed,
        }
    }

    #[test]
    fn uw_profile_reproduces_published_counts() {
        let config = uw_ct_body(1.0, 0.8, 1);
        let counts = class_count_profile(&config).unwrap();
        let expected: Vec<usize> = UW_CT_BODY_GROUPS.iter().map(|&(_, c)| c).collect();
        assert_eq!(counts, expected);
        assert_eq!(counts.iter().sum::<usize>(), 35085 - 15 - 8);
    }

    #[test]
    fn single_class_profile() {
        let mut config = tiny_config(0.0, 1);
        config.profile = ClassProfile::Zipf {
            n_classes: 1,
            exponent: 1.0,
            total: 10,
        };
        config.classes.truncate(1);
        assert_eq!(class_count_profile(&config).unwrap(), vec![10]);
    }

    #[test]
    fn zipf_counts_match_harmonic_oracle() {
        let mut config = tiny_config(0.0, 1);
        config.profile = ClassProfile::Zipf {
            n_classes: 5,
            exponent: 1.0,
            total: 1000,
        };
        let counts = class_count_profile(&config).unwrap();
        // Independent oracle: round(N * (1/r) / sum(1/k)), remainder to rank 1.
        let w: Vec<f64> = (1..=5).map(|r| 1.0 / r as f64).collect();
        let norm: f64 = w.iter().sum();
        let mut oracle: Vec<i64> = w.iter().map(|x| (1000.0 * x / norm).round() as i64).collect();
        let rem: i64 = 1000 - oracle.iter().sum::<i64>();
        oracle[0] += rem;
        assert_eq!(counts, oracle.iter().map(|&c| c as usize).collect::<Vec<_>>());
        assert_eq!(counts.iter().sum::<usize>(), 1000);
        assert!(counts.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn zipf_zero_total_with_classes_errors() {
        let mut config = tiny_config(0.0, 1);
        config.profile = ClassProfile::Zipf {
            n_classes: 3,
            exponent: 1.0,
            total: 0,
        };
        config.classes.truncate(3);
        assert!(class_count_profile(&config).is_err());
    }

    #[test]
    fn generation_is_deterministic_and_seed_sensitive() {
        let config = tiny_config(0.5, 7);
        let a = generate_dataset(&config).unwrap();
        let b = generate_dataset(&config).unwrap();
        assert_eq!(a, b);
        let mut other = config.clone();
        other.seed = 8;
        assert_ne!(generate_dataset(&other).unwrap(), a);
    }

    #[test]
    fn per_class_counts_are_exact() {
        let config = tiny_config(0.3, 2);
        let records = generate_dataset(&config).unwrap();
        assert_eq!(records.len(), 65);
        for (i, want) in [30usize, 20, 10, 5].iter().enumerate() {
            let got = records
                .iter()
                .filter(|r| r.protocol_group.as_deref() == Some(&format!("class-{i}")))
                .count();
            assert_eq!(got, *want);
        }
    }

    #[test]
    fn marker_vote_oracle_is_perfect_at_full_strength() {
        let config = tiny_config(1.0, 3);
        let records = generate_dataset(&config).unwrap();
        let markers: Vec<Vec<&str>> = (0..4)
            .map(|i| config.classes[i].marker_terms.iter().map(|s| s.as_str()).collect())
            .collect();
        let mut correct = 0;
        for r in &records {
            let text = format!("{} {}", r.history, r.diagnosis);
            let votes: Vec<usize> = markers
                .iter()
                .map(|ms| {
                    text.split_whitespace()
                        .filter(|w| ms.contains(w))
                        .count()
                })
                .collect();
            let best = votes
                .iter()
                .enumerate()
                .max_by_key(|&(i, &v)| (v, std::cmp::Reverse(i)))
                .unwrap()
                .0;
            let gold: usize = r
                .protocol_group
                .as_deref()
                .unwrap()
                .strip_prefix("class-")
                .unwrap()
                .parse()
                .unwrap();
            if best == gold {
                correct += 1;
            }
        }
        assert_eq!(correct, records.len());
    }

    #[test]
    fn empty_term_pool_rejected() {
        let mut config = tiny_config(0.0, 1);
        config.classes[2].history_terms.clear();
        assert!(generate_dataset(&config).is_err());
    }

    #[test]
    fn uw_profile_matches_published_word_statistics() {
        // Full-size corpus; checks the generator calibration against the
        // published field statistics and missing-history rate.
        let config = uw_ct_body(1.0, 0.8, 11);
        let records = generate_dataset(&config).unwrap();
        let stats = compute_stats(&records).unwrap();
        assert!(
            (stats.history.mean - 8.0).abs() < 1.0,
            "history mean {}",
            stats.history.mean
        );
        assert!(
            (stats.history.std_dev - 6.57).abs() < 1.0,
            "history sd {}",
            stats.history.std_dev
        );
        assert!(
            (stats.diagnosis.mean - 10.0).abs() < 1.0,
            "diagnosis mean {}",
            stats.diagnosis.mean
        );
        assert!(
            (stats.diagnosis.std_dev - 8.6).abs() < 1.0,
            "diagnosis sd {}",
            stats.diagnosis.std_dev
        );
        assert!(
            (stats.history.empty_fraction - 0.136).abs() < 0.015,
            "empty fraction {}",
            stats.history.empty_fraction
        );
        // Diagnosis is always present.
        assert!(records.iter().all(|r| word_count(&r.diagnosis) >= 1));
    }

    #[test]
    fn scaled_profile_floors_small_classes() {
        let config = uw_ct_body(0.1, 0.8, 1);
        let counts = class_count_profile(&config).unwrap();
        assert_eq!(counts[0], 1191);
        assert!(counts.iter().all(|&c| c >= 5));
        let total: usize = counts.iter().sum();
        assert!((3400..3650).contains(&total), "total {total}");
    }
}
