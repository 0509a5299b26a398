//! Scratch probe for desk-benchmark tuning. Not part of the test suite.

use std::time::Instant;

use protoclass::augment;
use protoclass::data;
use protoclass::distill::{self, DistillConfig};
use protoclass::encoder::{self, EncoderConfig, PretrainConfig, TrainConfig};
use protoclass::metrics::{aggregate, per_class_prf, ConfusionMatrix};
use protoclass::sampling;
use protoclass::seed;
use protoclass::synth;
use protoclass::text::{self, TokenSequence};

fn eval(model: &encoder::EncoderModel<f32>, seqs: &[TokenSequence], golds: &[usize], k: usize, name: &str) -> (f64, f64, Vec<f64>) {
    let (_, preds) = encoder::predict(model, seqs).unwrap();
    let m = ConfusionMatrix::from_labels(golds, &preds, k).unwrap();
    let per = per_class_prf(&m);
    let (macro_avg, weighted) = aggregate(&per);
    let f1s: Vec<f64> = per.iter().map(|c| c.f1).collect();
    eprintln!(
        "{name}: acc {:.4} macroF1 {:.4} weightedF1 {:.4}",
        m.accuracy(),
        macro_avg.f1,
        weighted.f1
    );
    (macro_avg.f1, weighted.f1, f1s)
}

fn main() {
    let t0 = Instant::now();
    let run_seed: u64 = std::env::args()
        .nth(1)
        .and_then(|s| s.parse().ok())
        .unwrap_or(11);
    let lr: f64 = std::env::args()
        .nth(2)
        .and_then(|s| s.parse().ok())
        .unwrap_or(6e-4);
    let ft_epochs: usize = std::env::args()
        .nth(3)
        .and_then(|s| s.parse().ok())
        .unwrap_or(4);

    let config = synth::uw_ct_body(0.1, 0.8, seed::derive(run_seed, &["synth"]));
    let records = synth::generate_dataset(&config).unwrap();
    let (records, label_set) = data::consolidate_labels(&records, 0).unwrap();
    let labels = label_set.labels_for(&records).unwrap();
    let k = label_set.len();
    eprintln!("records {} classes {} [{:.1}s]", records.len(), k, t0.elapsed().as_secs_f32());

    let plan = sampling::stratified_kfold(&labels, 5, seed::derive(run_seed, &["folds"])).unwrap();
    let train_idx = plan.train_indices(0);
    let val_idx = plan.validation(0);
    let train_records: Vec<_> = train_idx.iter().map(|&i| records[i].clone()).collect();
    let train_labels: Vec<_> = train_idx.iter().map(|&i| labels[i]).collect();
    let val_records: Vec<_> = val_idx.iter().map(|&i| records[i].clone()).collect();
    let val_labels: Vec<_> = val_idx.iter().map(|&i| labels[i]).collect();

    let templates: Vec<String> = train_records.iter().map(data::render_template).collect();
    let vocab = text::train_vocab(&templates, 1500).unwrap();
    eprintln!("vocab {} [{:.1}s]", vocab.len(), t0.elapsed().as_secs_f32());
    let enc = |r: &Vec<data::ExamRecord>| -> Vec<TokenSequence> {
        r.iter()
            .map(|x| text::encode_text(&data::render_template(x), &vocab, 200))
            .collect()
    };
    let train_seqs = enc(&train_records);
    let val_seqs = enc(&val_records);
    let mean_len: f64 = train_seqs.iter().map(|s| s.attention_length as f64).sum::<f64>()
        / train_seqs.len() as f64;
    eprintln!("encoded; mean attention length {mean_len:.1} [{:.1}s]", t0.elapsed().as_secs_f32());

    let enc_cfg = EncoderConfig {
        vocab_size: vocab.len(),
        d_model: 64,
        n_heads: 4,
        n_layers: 3,
        d_ff: 256,
        max_len: 200,
        n_classes: k,
        dropout: 0.1,
        mlm_mask_rate: 0.15,
        seed: seed::derive(run_seed, &["encoder-init"]),
    };
    let pc = PretrainConfig {
        batch_size: 48,
        learning_rate: 3e-4,
        epochs: 3,
        seed: seed::derive(run_seed, &["pretrain"]),
    };
    let pre = encoder::mlm_pretrain::<f32>(&train_seqs, &enc_cfg, &pc).unwrap();
    eprintln!(
        "pretrain loss {:?} [{:.1}s]",
        pre.loss_curve,
        t0.elapsed().as_secs_f32()
    );

    let tc = TrainConfig {
        batch_size: 48,
        learning_rate: lr,
        epochs: ft_epochs,
        seed: seed::derive(run_seed, &["train-mlm"]),
    };
    let teacher = encoder::fine_tune(&pre.params, &enc_cfg, &train_seqs, &train_labels, &tc).unwrap();
    eprintln!(
        "teacher loss curve {:?} [{:.1}s]",
        teacher.loss_curve,
        t0.elapsed().as_secs_f32()
    );
    let (tm, tw, tf1) = eval(&teacher.model, &val_seqs, &val_labels, k, "teacher(mlm)");

    let mut rand_cfg = enc_cfg.clone();
    rand_cfg.seed = seed::derive(run_seed, &["encoder-rand"]);
    let rand_init = encoder::init_encoder::<f32>(&rand_cfg).unwrap();
    let tc_rand = TrainConfig {
        seed: seed::derive(run_seed, &["train-rand"]),
        ..tc.clone()
    };
    let rand = encoder::fine_tune(&rand_init, &rand_cfg, &train_seqs, &train_labels, &tc_rand).unwrap();
    let (rm, rw, _) = eval(&rand.model, &val_seqs, &val_labels, k, "random-init");
    eprintln!("[{:.1}s]", t0.elapsed().as_secs_f32());

    // Augment + BAN1.
    let policy = augment::AugmentationPolicy {
        n_aug: 8,
        class_cap: 1200,
        seed: seed::derive(run_seed, &["augment"]),
        ..Default::default()
    };
    let pos_index = augment::pos_index_for(&train_records);
    let augmented = augment::augment_dataset(&train_records, &train_labels, &policy, &pos_index).unwrap();
    eprintln!("augmented {} [{:.1}s]", augmented.len(), t0.elapsed().as_secs_f32());
    let aug_seqs: Vec<TokenSequence> = augmented
        .iter()
        .map(|a| text::encode_text(&a.text(), &vocab, 200))
        .collect();
    let dc = DistillConfig {
        train: tc.clone(),
        mse_on_gold: false,
    };
    let gens = distill::ban_loop(
        &teacher.model,
        Some(&pre.params),
        &train_seqs,
        &train_labels,
        &aug_seqs,
        &dc,
        1,
        seed::derive(run_seed, &["ban"]),
    )
    .unwrap();
    let (bm, bw, bf1) = eval(&gens[0].model, &val_seqs, &val_labels, k, "ban1");

    // Undersampled fine-tune from the same pretrained base.
    let under = sampling::undersample_majorities(&train_idx, &labels, seed::derive(run_seed, &["under"])).unwrap();
    let pos: std::collections::BTreeMap<usize, usize> =
        train_idx.iter().enumerate().map(|(p, &g)| (g, p)).collect();
    let under_seqs: Vec<TokenSequence> = under.iter().map(|&g| train_seqs[pos[&g]].clone()).collect();
    let under_labels: Vec<usize> = under.iter().map(|&g| labels[g]).collect();
    let tc_under = TrainConfig {
        seed: seed::derive(run_seed, &["train-under"]),
        ..tc.clone()
    };
    let under_out = encoder::fine_tune(&pre.params, &enc_cfg, &under_seqs, &under_labels, &tc_under).unwrap();
    let (_, uw, _) = eval(&under_out.model, &val_seqs, &val_labels, k, "undersampled");

    let tercile = k - k / 3;
    let t_min: f64 = tf1[tercile..].iter().sum::<f64>() / (k - tercile) as f64;
    let b_min: f64 = bf1[tercile..].iter().sum::<f64>() / (k - tercile) as f64;
    eprintln!("--- summary seed {run_seed} lr {lr} epochs {ft_epochs}");
    eprintln!("teacher macro {tm:.4} weighted {tw:.4} minority-mean {t_min:.4}");
    eprintln!("random  macro {rm:.4} weighted {rw:.4}");
    eprintln!("ban1    macro {bm:.4} weighted {bw:.4} minority-mean {b_min:.4}");
    eprintln!("under   weighted {uw:.4}");
    eprintln!("total {:.1}s", t0.elapsed().as_secs_f32());
}

