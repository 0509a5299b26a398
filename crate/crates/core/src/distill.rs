//! Knowledge distillation: teacher soft labels, the per-batch blended loss
//! `L = alpha * CE + (1 - alpha) * MSE`, student training, and the
//! born-again generation loop.
//!
//! `alpha` is the fraction of gold-labeled records within one batch, so pure
//! gold batches reduce exactly to cross-entropy and pure augmented batches to
//! logit-matching MSE. Raw logits are matched directly; MSE needs no
//! temperature.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{
    add_classifier_head, init_encoder, EncoderConfig, EncoderModel, TrainConfig,
};
use crate::error::{Error, Result};
use crate::seed;
use crate::tensor::graph::Graph;
use crate::tensor::{AdamConfig, AdamState, Element, ModelParams, Tensor};
use crate::text::TokenSequence;

/// One distillation training unit: encoded input, teacher logits, and the
/// gold label when the record is an original (augmented records carry none).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SoftLabelRecord {
    pub seq: TokenSequence,
    pub teacher_logits: Vec<f64>,
    pub gold: Option<usize>,
}

/// Exact per-batch gold ratio: (records with gold) / (batch size).
pub fn batch_alpha(batch: &[SoftLabelRecord]) -> f64 {
    let golds = batch.iter().filter(|r| r.gold.is_some()).count();
    golds as f64 / batch.len() as f64
}

/// Run teacher inference over a corpus and attach logits. Originals keep
/// their gold labels; augmented records pass `None`.
pub fn generate_soft_labels<T: Element>(
    teacher: &EncoderModel<T>,
    seqs: &[TokenSequence],
    golds: &[Option<usize>],
) -> Result<Vec<SoftLabelRecord>> {
    if seqs.len() != golds.len() {
        return Err(Error::shape(
            "generate_soft_labels",
            &[seqs.len()],
            &[golds.len()],
        ));
    }
    let k = teacher.config.n_classes;
    if let Some(&Some(bad)) = golds.iter().find(|g| matches!(g, Some(l) if *l >= k)) {
        return Err(Error::LabelOutOfRange {
            label: bad,
            classes: k,
        });
    }
    let logits = crate::encoder::forward(teacher, seqs)?;
    Ok(seqs
        .iter()
        .enumerate()
        .map(|(i, seq)| SoftLabelRecord {
            seq: seq.clone(),
            teacher_logits: logits.row(i).iter().map(|&v| v.to_f64()).collect(),
            gold: golds[i],
        })
        .collect())
}

/// 64-bit digest of a soft-label set (teacher logits only); used to confirm
/// that successive generations re-labeled the pool.
pub fn soft_label_digest(records: &[SoftLabelRecord]) -> u64 {
    let mut state: u64 = 0xcbf29ce484222325;
    let mut eat = |bytes: &[u8]| {
        for &b in bytes {
            state ^= u64::from(b);
            state = state.wrapping_mul(0x100000001b3);
        }
    };
    for r in records {
        for v in &r.teacher_logits {
            eat(&v.to_bits().to_le_bytes());
        }
    }
    state
}

/// The blended distillation loss of one batch, computed directly (the
/// reference path for tests; training uses the autodiff graph version and
/// must agree with this one).
pub fn distill_loss<T: Element>(
    student_logits: &Tensor<T>,
    batch: &[SoftLabelRecord],
    mse_on_gold: bool,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::EmptyInput("distill_loss on empty batch".into()));
    }
    let (b, k) = (student_logits.rows(), student_logits.cols());
    if b != batch.len() {
        return Err(Error::shape("distill_loss", &[b, k], &[batch.len()]));
    }
    for r in batch {
        if r.teacher_logits.len() != k {
            return Err(Error::shape(
                "distill_loss teacher logits",
                &[k],
                &[r.teacher_logits.len()],
            ));
        }
    }
    let alpha = batch_alpha(batch);
    let mut ce_sum = 0.0;
    let mut ce_count = 0usize;
    let mut mse_sum = 0.0;
    let mut mse_count = 0usize;
    for (i, r) in batch.iter().enumerate() {
        let row: Vec<f64> = student_logits.row(i).iter().map(|&v| v.to_f64()).collect();
        if let Some(gold) = r.gold {
            if gold >= k {
                return Err(Error::LabelOutOfRange {
                    label: gold,
                    classes: k,
                });
            }
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let denom: f64 = row.iter().map(|&x| (x - max).exp()).sum();
            ce_sum += -(row[gold] - max - denom.ln());
            ce_count += 1;
        }
        if r.gold.is_none() || mse_on_gold {
            for (s, t) in row.iter().zip(&r.teacher_logits) {
                let d = s - t;
                mse_sum += d * d;
            }
            mse_count += k;
        }
    }
    let ce = if ce_count > 0 { ce_sum / ce_count as f64 } else { 0.0 };
    let mse = if mse_count > 0 { mse_sum / mse_count as f64 } else { 0.0 };
    Ok(alpha * ce + (1.0 - alpha) * mse)
}

/// Loss and parameter gradients of the blended objective for one batch,
/// through the full encoder.
pub fn distill_grads<T: Element>(
    params: &ModelParams<T>,
    config: &EncoderConfig,
    batch: &[SoftLabelRecord],
    mse_on_gold: bool,
    dropout: Option<(f64, &mut ChaCha8Rng)>,
) -> Result<(f64, BTreeMap<String, Tensor<T>>)> {
    if batch.is_empty() {
        return Err(Error::EmptyInput("distill batch is empty".into()));
    }
    let seqs: Vec<TokenSequence> = batch.iter().map(|r| r.seq.clone()).collect();
    let alpha = batch_alpha(batch);

    let mut graph = Graph::new();
    let (logits, nodes) =
        crate::encoder::batch_logits_graph(&mut graph, params, config, &seqs, true, dropout)?;

    let gold_rows: Vec<usize> = batch
        .iter()
        .enumerate()
        .filter_map(|(i, r)| r.gold.map(|_| i))
        .collect();
    let gold_labels: Vec<usize> = batch.iter().filter_map(|r| r.gold).collect();
    let soft_rows: Vec<usize> = if mse_on_gold {
        (0..batch.len()).collect()
    } else {
        batch
            .iter()
            .enumerate()
            .filter(|(_, r)| r.gold.is_none())
            .map(|(i, _)| i)
            .collect()
    };

    let mut terms = Vec::new();
    if !gold_rows.is_empty() {
        let picked = graph.gather_rows(logits, &gold_rows)?;
        let ce = graph.cross_entropy(picked, &gold_labels)?;
        terms.push(graph.mul_scalar(ce, alpha));
    }
    if !soft_rows.is_empty() {
        let picked = graph.gather_rows(logits, &soft_rows)?;
        let k = batch[0].teacher_logits.len();
        let mut teacher = Vec::with_capacity(soft_rows.len() * k);
        for &i in &soft_rows {
            teacher.extend(batch[i].teacher_logits.iter().map(|&v| T::from_f64(v)));
        }
        let teacher = graph.constant(Tensor::new(vec![soft_rows.len(), k], teacher)?);
        let mse = graph.mse(picked, teacher)?;
        terms.push(graph.mul_scalar(mse, 1.0 - alpha));
    }
    let loss = match terms.len() {
        1 => terms[0],
        2 => graph.add(terms[0], terms[1])?,
        _ => return Err(Error::EmptyInput("distill batch has no usable terms".into())),
    };
    graph.backward(loss)?;
    let grads = crate::encoder::collect_grads(&graph, &nodes);
    Ok((graph.value(loss).item().to_f64(), grads))
}

/// Dropout-free blended loss through the encoder (finite-difference target).
pub fn distill_loss_value<T: Element>(
    params: &ModelParams<T>,
    config: &EncoderConfig,
    batch: &[SoftLabelRecord],
    mse_on_gold: bool,
) -> Result<f64> {
    let seqs: Vec<TokenSequence> = batch.iter().map(|r| r.seq.clone()).collect();
    let logits = crate::encoder::forward(
        &EncoderModel {
            config: config.clone(),
            params: params.clone(),
        },
        &seqs,
    )?;
    distill_loss(&logits, batch, mse_on_gold)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistillConfig {
    pub train: TrainConfig,
    /// When set, the MSE term also covers gold-labeled records.
    pub mse_on_gold: bool,
}

#[derive(Debug, Clone)]
pub struct StudentOutcome<T: Element> {
    pub model: EncoderModel<T>,
    pub loss_curve: Vec<f64>,
    pub soft_label_digest: u64,
}

/// Train one born-again student against `teacher`.
///
/// The student shares the teacher's architecture; its encoder starts from the
/// MLM-pretrained lineage weights when given (otherwise a fresh random
/// encoder seeded by `student_seed`), with a fresh classification head and
/// fresh shuffling/dropout streams from `student_seed`.
pub fn train_student<T: Element>(
    teacher: &EncoderModel<T>,
    pretrained_base: Option<&ModelParams<T>>,
    original_seqs: &[TokenSequence],
    original_labels: &[usize],
    augmented_seqs: &[TokenSequence],
    config: &DistillConfig,
    student_seed: u64,
) -> Result<StudentOutcome<T>> {
    if original_seqs.is_empty() {
        return Err(Error::EmptyInput("train_student with no originals".into()));
    }
    let enc_config = &teacher.config;
    // Soft labels over the full pool: originals keep gold, variants do not.
    let mut seqs: Vec<TokenSequence> = original_seqs.to_vec();
    seqs.extend_from_slice(augmented_seqs);
    let mut golds: Vec<Option<usize>> = original_labels.iter().map(|&l| Some(l)).collect();
    golds.extend(std::iter::repeat_n(None, augmented_seqs.len()));
    let pool = generate_soft_labels(teacher, &seqs, &golds)?;
    let digest = soft_label_digest(&pool);

    let mut params = match pretrained_base {
        Some(base) => {
            let expect = [enc_config.vocab_size, enc_config.d_model];
            let tok = base
                .get("embed.tok")
                .ok_or_else(|| Error::InvalidConfig("lineage params lack embed.tok".into()))?;
            if tok.shape() != expect {
                return Err(Error::shape("train_student lineage", tok.shape(), &expect));
            }
            let mut p = base.clone();
            p.remove("head.w");
            p.remove("head.b");
            p.remove("mlm.w");
            p.remove("mlm.b");
            p
        }
        None => {
            let mut fresh_cfg = enc_config.clone();
            fresh_cfg.seed = student_seed;
            init_encoder(&fresh_cfg)?
        }
    };
    add_classifier_head(&mut params, enc_config, student_seed);

    let train = &config.train;
    let mut adam = AdamState::new(AdamConfig::with_lr(train.learning_rate));
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(seed::derive(student_seed, &["shuffle"]));
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(seed::derive(student_seed, &["dropout"]));
    let mut order: Vec<usize> = (0..pool.len()).collect();
    let mut loss_curve = Vec::with_capacity(train.epochs);
    for _epoch in 0..train.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for batch_ids in order.chunks(train.batch_size.max(1)) {
            let batch: Vec<SoftLabelRecord> =
                batch_ids.iter().map(|&i| pool[i].clone()).collect();
            let dropout =
                (enc_config.dropout > 0.0).then_some((enc_config.dropout, &mut dropout_rng));
            let (loss, grads) =
                distill_grads(&params, enc_config, &batch, config.mse_on_gold, dropout)?;
            adam.step(&mut params, &grads)?;
            epoch_loss += loss;
            batches += 1;
        }
        loss_curve.push(epoch_loss / batches as f64);
    }
    Ok(StudentOutcome {
        model: EncoderModel {
            config: enc_config.clone(),
            params,
        },
        loss_curve,
        soft_label_digest: digest,
    })
}

/// One generation of the born-again loop.
#[derive(Debug, Clone)]
pub struct Generation<T: Element> {
    pub index: usize,
    pub model: EncoderModel<T>,
    pub loss_curve: Vec<f64>,
    pub soft_label_digest: u64,
}

/// Run `generations` rounds of born-again distillation: generation g's
/// student (fresh seed per generation) becomes generation g+1's teacher, and
/// the augmented pool is re-labeled by each new teacher.
pub fn ban_loop<T: Element>(
    initial_teacher: &EncoderModel<T>,
    pretrained_base: Option<&ModelParams<T>>,
    original_seqs: &[TokenSequence],
    original_labels: &[usize],
    augmented_seqs: &[TokenSequence],
    config: &DistillConfig,
    generations: usize,
    loop_seed: u64,
) -> Result<Vec<Generation<T>>> {
    if generations == 0 {
        return Err(Error::InvalidConfig("ban_loop needs at least 1 generation".into()));
    }
    let mut teacher = initial_teacher.clone();
    let mut out = Vec::with_capacity(generations);
    for g in 1..=generations {
        let student_seed = seed::derive_indexed(loop_seed, &["ban"], g as u64);
        let outcome = train_student(
            &teacher,
            pretrained_base,
            original_seqs,
            original_labels,
            augmented_seqs,
            config,
            student_seed,
        )?;
        teacher = outcome.model.clone();
        out.push(Generation {
            index: g,
            model: outcome.model,
            loss_curve: outcome.loss_curve,
            soft_label_digest: outcome.soft_label_digest,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{fine_tune, forward, mlm_pretrain, predict, PretrainConfig};
    use crate::text::{encode_text, train_vocab, Vocab};
    use rand::Rng;

    fn tiny_vocab() -> Vocab {
        train_vocab(
            &[
                "pain mass lesion renal hepatic",
                "evaluate mass biopsy stone vein",
                "renal stone pain chronic acute",
            ],
            60,
        )
        .unwrap()
    }

    fn tiny_config(vocab: &Vocab, n_classes: usize) -> EncoderConfig {
        EncoderConfig {
            vocab_size: vocab.len(),
            d_model: 16,
            n_heads: 2,
            n_layers: 2,
            d_ff: 32,
            max_len: 12,
            n_classes,
            dropout: 0.0,
            mlm_mask_rate: 0.15,
            seed: 42,
        }
    }

    fn random_batch(k: usize, golds: &[Option<usize>], rng: &mut ChaCha8Rng) -> Vec<SoftLabelRecord> {
        golds
            .iter()
            .map(|&gold| SoftLabelRecord {
                seq: TokenSequence {
                    ids: vec![2, 3],
                    attention_length: 2,
                },
                teacher_logits: (0..k).map(|_| rng.random_range(-2.0..2.0)).collect(),
                gold,
            })
            .collect()
    }

    #[test]
    fn alpha_is_exact_ratio() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for golds in [
            vec![Some(0), None, None, None],
            vec![Some(0), Some(1), None, Some(2), None, None],
            vec![None, None],
            vec![Some(1), Some(0)],
        ] {
            let batch = random_batch(3, &golds, &mut rng);
            let k = golds.iter().filter(|g| g.is_some()).count();
            assert_eq!(batch_alpha(&batch), k as f64 / golds.len() as f64);
        }
    }

    #[test]
    fn alpha_one_reduces_to_cross_entropy() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let batch = random_batch(4, &[Some(0), Some(3), Some(1)], &mut rng);
        let logits = Tensor::<f64>::randn(&[3, 4], 1.5, &mut rng);
        let loss = distill_loss(&logits, &batch, false).unwrap();
        // Direct cross-entropy oracle.
        let mut want = 0.0;
        for (i, r) in batch.iter().enumerate() {
            let row = logits.row(i);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let denom: f64 = row.iter().map(|&x| (x - max).exp()).sum();
            want -= row[r.gold.unwrap()] - max - denom.ln();
        }
        want /= 3.0;
        assert!((loss - want).abs() < 1e-12);
    }

    #[test]
    fn alpha_zero_reduces_to_mse() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let batch = random_batch(5, &[None, None, None, None], &mut rng);
        let logits = Tensor::<f64>::randn(&[4, 5], 1.0, &mut rng);
        let loss = distill_loss(&logits, &batch, false).unwrap();
        let mut want = 0.0;
        for (i, r) in batch.iter().enumerate() {
            for (s, t) in logits.row(i).iter().zip(&r.teacher_logits) {
                want += (s - t) * (s - t);
            }
        }
        want /= 20.0;
        assert!((loss - want).abs() < 1e-12);
    }

    #[test]
    fn hand_arithmetic_half_and_half() {
        // Batch of 4 (2 gold, 2 soft), K = 3, hand-chosen logits.
        let batch = vec![
            SoftLabelRecord {
                seq: TokenSequence { ids: vec![2, 3], attention_length: 2 },
                teacher_logits: vec![0.0, 0.0, 0.0],
                gold: Some(0),
            },
            SoftLabelRecord {
                seq: TokenSequence { ids: vec![2, 3], attention_length: 2 },
                teacher_logits: vec![0.0, 0.0, 0.0],
                gold: Some(2),
            },
            SoftLabelRecord {
                seq: TokenSequence { ids: vec![2, 3], attention_length: 2 },
                teacher_logits: vec![1.0, -1.0, 0.5],
                gold: None,
            },
            SoftLabelRecord {
                seq: TokenSequence { ids: vec![2, 3], attention_length: 2 },
                teacher_logits: vec![0.0, 2.0, -2.0],
                gold: None,
            },
        ];
        let logits = Tensor::<f64>::new(
            vec![4, 3],
            vec![
                1.0, 0.0, 0.0, // gold 0
                0.0, 0.0, 1.0, // gold 2
                0.5, -0.5, 0.5, // vs [1.0, -1.0, 0.5]
                1.0, 1.0, -1.0, // vs [0.0, 2.0, -2.0]
            ],
        )
        .unwrap();
        // CE rows: -ln(e^1/(e^1+2)) twice (same by symmetry).
        let ce_row = -(1.0f64.exp() / (1.0f64.exp() + 2.0)).ln();
        let ce = ce_row; // mean of two equal values
        // MSE: row3 diffs (0.5, -0.5... ) wait: (0.5-1.0)^2 + (-0.5+1.0)^2 + 0^2 = 0.5;
        // row4: 1 + 1 + 1 = 3. Mean over 6 elements = 3.5/6.
        let mse = (0.25 + 0.25 + 0.0 + 1.0 + 1.0 + 1.0) / 6.0;
        let want = 0.5 * ce + 0.5 * mse;
        let got = distill_loss(&logits, &batch, false).unwrap();
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
    }

    #[test]
    fn loss_is_permutation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let batch = random_batch(4, &[Some(1), None, Some(2), None, None], &mut rng);
        let logits = Tensor::<f64>::randn(&[5, 4], 1.0, &mut rng);
        let base = distill_loss(&logits, &batch, false).unwrap();
        let perm = [4usize, 2, 0, 3, 1];
        let pbatch: Vec<SoftLabelRecord> = perm.iter().map(|&i| batch[i].clone()).collect();
        let mut pdata = Vec::new();
        for &i in &perm {
            pdata.extend_from_slice(logits.row(i));
        }
        let plogits = Tensor::new(vec![5, 4], pdata).unwrap();
        let permuted = distill_loss(&plogits, &pbatch, false).unwrap();
        assert!((base - permuted).abs() < 1e-12);
    }

    #[test]
    fn empty_batch_errors() {
        let logits = Tensor::<f64>::zeros(&[0, 3]);
        assert!(distill_loss(&logits, &[], false).is_err());
    }

    #[test]
    fn graph_loss_matches_reference_and_finite_differences() {
        let vocab = tiny_vocab();
        let config = tiny_config(&vocab, 3);
        let mut params = init_encoder::<f64>(&config).unwrap();
        add_classifier_head(&mut params, &config, 7);
        let texts = ["pain mass", "renal stone", "hepatic vein", "biopsy"];
        let golds = [Some(0), None, Some(2), None];
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let batch: Vec<SoftLabelRecord> = texts
            .iter()
            .zip(&golds)
            .map(|(t, &gold)| SoftLabelRecord {
                seq: encode_text(t, &vocab, config.max_len),
                teacher_logits: (0..3).map(|_| rng.random_range(-1.0..1.0)).collect(),
                gold,
            })
            .collect();
        let (loss, grads) = distill_grads(&params, &config, &batch, false, None).unwrap();
        let reference = distill_loss_value(&params, &config, &batch, false).unwrap();
        assert!((loss - reference).abs() < 1e-12);

        // Spot-check gradients of a few tensors against finite differences.
        for name in ["head.w", "layer0.attn.wq", "embed.tok"] {
            let len = params.get(name).unwrap().len();
            let grad = grads.get(name).unwrap().clone();
            for idx in (0..len).step_by(len.div_ceil(17)) {
                let base = params.get(name).unwrap().as_slice()[idx];
                let h = 1e-4 * base.abs().max(1.0);
                params.get_mut(name).unwrap().as_mut_slice()[idx] = base + h;
                let fp = distill_loss_value(&params, &config, &batch, false).unwrap();
                params.get_mut(name).unwrap().as_mut_slice()[idx] = base - h;
                let fm = distill_loss_value(&params, &config, &batch, false).unwrap();
                params.get_mut(name).unwrap().as_mut_slice()[idx] = base;
                let fd = (fp - fm) / (2.0 * h);
                let ad = grad.as_slice()[idx];
                let rel = (ad - fd).abs() / ad.abs().max(fd.abs()).max(1e-6);
                assert!(rel < 1e-5, "{name}[{idx}]: ad={ad} fd={fd}");
            }
        }
    }

    #[test]
    fn soft_labels_match_direct_prediction() {
        let vocab = tiny_vocab();
        let config = tiny_config(&vocab, 3);
        let mut params = init_encoder::<f32>(&config).unwrap();
        add_classifier_head(&mut params, &config, 7);
        let teacher = EncoderModel { config, params };
        let seqs: Vec<TokenSequence> = ["pain mass", "renal stone", "hepatic vein"]
            .iter()
            .map(|t| encode_text(t, &vocab, teacher.config.max_len))
            .collect();
        let golds = vec![Some(0), Some(1), None];
        let soft = generate_soft_labels(&teacher, &seqs, &golds).unwrap();
        assert_eq!(soft.len(), 3);
        let direct = forward(&teacher, &seqs).unwrap();
        for (i, r) in soft.iter().enumerate() {
            let want: Vec<f64> = direct.row(i).iter().map(|&v| v as f64).collect();
            assert_eq!(r.teacher_logits, want);
        }
        assert_eq!(soft[0].gold, Some(0));
        assert_eq!(soft[2].gold, None);
    }

    #[test]
    fn zero_augmented_matches_plain_fine_tuning() {
        // With no augmented data every batch has alpha = 1, so the student
        // step is exactly a cross-entropy fine-tuning step.
        let vocab = tiny_vocab();
        let config = tiny_config(&vocab, 3);
        let base = {
            let corpus: Vec<TokenSequence> = ["pain mass lesion", "renal stone", "hepatic vein"]
                .iter()
                .map(|t| encode_text(t, &vocab, config.max_len))
                .collect();
            mlm_pretrain::<f32>(
                &corpus,
                &config,
                &PretrainConfig {
                    epochs: 1,
                    batch_size: 2,
                    learning_rate: 1e-3,
                    seed: 1,
                },
            )
            .unwrap()
            .params
        };
        let mut teacher_params = base.clone();
        add_classifier_head(&mut teacher_params, &config, 99);
        let teacher = EncoderModel {
            config: config.clone(),
            params: teacher_params,
        };
        let seqs: Vec<TokenSequence> = ["pain mass", "renal stone", "hepatic vein", "biopsy"]
            .iter()
            .map(|t| encode_text(t, &vocab, config.max_len))
            .collect();
        let labels = vec![0usize, 1, 2, 0];
        let tc = TrainConfig {
            batch_size: 2,
            learning_rate: 1e-3,
            epochs: 2,
            seed: 1234,
        };
        let student = train_student(
            &teacher,
            Some(&base),
            &seqs,
            &labels,
            &[],
            &DistillConfig {
                train: tc.clone(),
                mse_on_gold: false,
            },
            1234,
        )
        .unwrap();
        let direct = fine_tune(&base, &config, &seqs, &labels, &tc).unwrap();
        assert_eq!(student.model.params, direct.model.params);
    }

    #[test]
    fn saturated_teacher_soft_labels_argmax_to_gold() {
        // Train a teacher to 100% on a tiny separable set; argmax of its
        // logits on originals must equal the gold labels.
        let vocab = tiny_vocab();
        let mut config = tiny_config(&vocab, 2);
        config.seed = 3;
        let seqs: Vec<TokenSequence> = ["pain pain pain", "stone stone stone"]
            .iter()
            .map(|t| encode_text(t, &vocab, config.max_len))
            .collect();
        let labels = vec![0usize, 1];
        let init = init_encoder::<f32>(&config).unwrap();
        let tc = TrainConfig {
            batch_size: 2,
            learning_rate: 5e-3,
            epochs: 60,
            seed: 8,
        };
        let out = fine_tune(&init, &config, &seqs, &labels, &tc).unwrap();
        let (_, preds) = predict(&out.model, &seqs).unwrap();
        assert_eq!(preds, labels, "teacher failed to saturate");
        let soft = generate_soft_labels(
            &out.model,
            &seqs,
            &[Some(0), Some(1)],
        )
        .unwrap();
        for r in &soft {
            let arg = r
                .teacher_logits
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0;
            assert_eq!(arg, r.gold.unwrap());
        }
    }

    #[test]
    fn ban_single_generation_equals_train_student() {
        let vocab = tiny_vocab();
        let config = tiny_config(&vocab, 2);
        let mut params = init_encoder::<f32>(&config).unwrap();
        add_classifier_head(&mut params, &config, 7);
        let teacher = EncoderModel {
            config: config.clone(),
            params,
        };
        let seqs: Vec<TokenSequence> = ["pain mass", "renal stone"]
            .iter()
            .map(|t| encode_text(t, &vocab, config.max_len))
            .collect();
        let labels = vec![0usize, 1];
        let dc = DistillConfig {
            train: TrainConfig {
                batch_size: 2,
                learning_rate: 1e-3,
                epochs: 1,
                seed: 0,
            },
            mse_on_gold: false,
        };
        let gens = ban_loop(&teacher, None, &seqs, &labels, &[], &dc, 1, 77).unwrap();
        assert_eq!(gens.len(), 1);
        let direct = train_student(
            &teacher,
            None,
            &seqs,
            &labels,
            &[],
            &dc,
            seed::derive_indexed(77, &["ban"], 1),
        )
        .unwrap();
        assert_eq!(gens[0].model.params, direct.model.params);
    }

    #[test]
    fn generations_relabel_the_pool() {
        let vocab = tiny_vocab();
        let config = tiny_config(&vocab, 2);
        let mut params = init_encoder::<f32>(&config).unwrap();
        add_classifier_head(&mut params, &config, 7);
        let teacher = EncoderModel {
            config: config.clone(),
            params,
        };
        let seqs: Vec<TokenSequence> = ["pain mass", "renal stone", "hepatic vein"]
            .iter()
            .map(|t| encode_text(t, &vocab, config.max_len))
            .collect();
        let labels = vec![0usize, 1, 0];
        let aug: Vec<TokenSequence> = ["pain [MASK]", "[MASK] stone"]
            .iter()
            .map(|t| encode_text(t, &vocab, config.max_len))
            .collect();
        let dc = DistillConfig {
            train: TrainConfig {
                batch_size: 2,
                learning_rate: 2e-3,
                epochs: 2,
                seed: 0,
            },
            mse_on_gold: false,
        };
        let gens = ban_loop(&teacher, None, &seqs, &labels, &aug, &dc, 2, 78).unwrap();
        assert_eq!(gens.len(), 2);
        // Models differ across generations, so the re-labeled pools differ.
        assert_ne!(gens[0].model.params, gens[1].model.params);
        assert_ne!(gens[0].soft_label_digest, gens[1].soft_label_digest);
    }

    #[test]
    fn ban_zero_generations_rejected() {
        let vocab = tiny_vocab();
        let config = tiny_config(&vocab, 2);
        let mut params = init_encoder::<f32>(&config).unwrap();
        add_classifier_head(&mut params, &config, 7);
        let teacher = EncoderModel {
            config: config.clone(),
            params,
        };
        let seqs = vec![encode_text("pain", &vocab, config.max_len)];
        let dc = DistillConfig {
            train: TrainConfig::default(),
            mse_on_gold: false,
        };
        assert!(ban_loop(&teacher, None, &seqs, &[0], &[], &dc, 0, 1).is_err());
    }
}
