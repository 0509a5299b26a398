//! Config-driven experiment orchestration: the full benchmark grid
//! (baselines, random-init and domain-pretrained encoders, resampling
//! variants, born-again generations) under shared stratified folds, plus
//! artifact hashing, manifests, and checkpoint lineage headers.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::augment::{self, AugmentationPolicy};
use crate::baseline::{self, SoftmaxConfig, SvmConfig};
use crate::data::{self, ExamRecord, ProtocolLabelSet};
use crate::distill::{self, DistillConfig};
use crate::encoder::{self, EncoderConfig, EncoderModel, PretrainConfig, TrainConfig};
use crate::error::{Error, Result};
use crate::metrics::{ConfusionMatrix, MetricsReport};
use crate::sampling::{self, FoldPlan};
use crate::seed;
use crate::text::{self, TokenSequence, Vocab};

/// Where the experiment's records come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum DatasetSource {
    File {
        path: String,
        #[serde(default)]
        format: Option<String>,
    },
    Synth {
        profile: String,
        #[serde(default = "default_scale")]
        scale: f64,
        #[serde(default = "default_marker_strength")]
        marker_strength: f64,
    },
}

fn default_scale() -> f64 {
    1.0
}
fn default_marker_strength() -> f64 {
    0.8
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderSettings {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_ff: usize,
    pub max_len: usize,
    pub dropout: f64,
    pub mlm_mask_rate: f64,
}

impl Default for EncoderSettings {
    fn default() -> Self {
        EncoderSettings {
            d_model: 128,
            n_heads: 4,
            n_layers: 4,
            d_ff: 512,
            max_len: 200,
            dropout: 0.1,
            mlm_mask_rate: 0.15,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainSettings {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
}

impl Default for PretrainSettings {
    fn default() -> Self {
        PretrainSettings {
            epochs: 30,
            batch_size: 48,
            learning_rate: 3e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSettings {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
}

impl Default for TrainSettings {
    fn default() -> Self {
        TrainSettings {
            epochs: 4,
            batch_size: 48,
            learning_rate: 1e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentSettings {
    pub mask_threshold: f64,
    pub pos_threshold: f64,
    pub ngram_min: usize,
    pub ngram_max: usize,
    pub n_aug: usize,
    /// Values swept by `distill --sweep`; the published grid.
    pub n_aug_sweep: Vec<usize>,
    pub class_cap: usize,
    pub max_attempts_factor: usize,
}

impl Default for AugmentSettings {
    fn default() -> Self {
        AugmentSettings {
            mask_threshold: 0.1,
            pos_threshold: 0.2,
            ngram_min: 1,
            ngram_max: 3,
            n_aug: 30,
            n_aug_sweep: vec![25, 30, 35, 40, 50],
            class_cap: 12000,
            max_attempts_factor: 10,
        }
    }
}

impl AugmentSettings {
    pub fn to_policy(&self, policy_seed: u64) -> AugmentationPolicy {
        AugmentationPolicy {
            mask_threshold: self.mask_threshold,
            pos_threshold: self.pos_threshold,
            ngram_min: self.ngram_min,
            ngram_max: self.ngram_max,
            n_aug: self.n_aug,
            class_cap: self.class_cap,
            max_attempts_factor: self.max_attempts_factor,
            seed: policy_seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DistillSettings {
    pub generations: usize,
    pub mse_on_gold: bool,
}

impl Default for DistillSettings {
    fn default() -> Self {
        DistillSettings {
            generations: 3,
            mse_on_gold: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BaselineSettings {
    pub svm_c: f64,
    pub svm_epochs: usize,
    pub softmax_l2: f64,
    pub softmax_learning_rate: f64,
    pub softmax_epochs: usize,
}

impl Default for BaselineSettings {
    fn default() -> Self {
        BaselineSettings {
            svm_c: 1.0,
            svm_epochs: 10,
            softmax_l2: 1e-5,
            softmax_learning_rate: 0.5,
            softmax_epochs: 10,
        }
    }
}

/// The single declarative experiment config every CLI stage shares.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub dataset: DatasetSource,
    #[serde(default = "default_label_threshold")]
    pub label_threshold: usize,
    #[serde(default = "default_vocab_size")]
    pub vocab_size: usize,
    #[serde(default)]
    pub encoder: EncoderSettings,
    #[serde(default)]
    pub pretrain: PretrainSettings,
    #[serde(default)]
    pub train: TrainSettings,
    #[serde(default)]
    pub augmentation: AugmentSettings,
    #[serde(default)]
    pub distill: DistillSettings,
    #[serde(default)]
    pub baselines: BaselineSettings,
    #[serde(default = "default_folds")]
    pub folds: usize,
    #[serde(default)]
    pub master_seed: u64,
}

fn default_label_threshold() -> usize {
    20
}
fn default_vocab_size() -> usize {
    2000
}
fn default_folds() -> usize {
    5
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.folds < 2 {
            return Err(Error::InvalidConfig("folds must be at least 2".into()));
        }
        if self.vocab_size < 10 {
            return Err(Error::InvalidConfig("vocab_size too small".into()));
        }
        if self.encoder.d_model == 0 || self.encoder.d_model % self.encoder.n_heads != 0 {
            return Err(Error::InvalidConfig(
                "encoder.d_model must be a positive multiple of encoder.n_heads".into(),
            ));
        }
        Ok(())
    }

    fn encoder_config(&self, vocab_size: usize, n_classes: usize, init_seed: u64) -> EncoderConfig {
        EncoderConfig {
            vocab_size,
            d_model: self.encoder.d_model,
            n_heads: self.encoder.n_heads,
            n_layers: self.encoder.n_layers,
            d_ff: self.encoder.d_ff,
            max_len: self.encoder.max_len,
            n_classes,
            dropout: self.encoder.dropout,
            mlm_mask_rate: self.encoder.mlm_mask_rate,
            seed: init_seed,
        }
    }

    fn train_config(&self, train_seed: u64) -> TrainConfig {
        TrainConfig {
            batch_size: self.train.batch_size,
            learning_rate: self.train.learning_rate,
            epochs: self.train.epochs,
            seed: train_seed,
        }
    }
}

/// Produce the experiment's records, either from disk or the synthesizer.
pub fn materialize_dataset(config: &ExperimentConfig) -> Result<Vec<ExamRecord>> {
    match &config.dataset {
        DatasetSource::File { path, format } => {
            let path = Path::new(path);
            let format = match format {
                Some(f) => data::DatasetFormat::parse(f)?,
                None => data::DatasetFormat::from_path(path),
            };
            data::load_dataset(path, format)
        }
        DatasetSource::Synth {
            profile,
            scale,
            marker_strength,
        } => {
            let synth_seed = seed::derive(config.master_seed, &["synth"]);
            let synth = crate::synth::builtin_profile(profile, *scale, *marker_strength, synth_seed)?;
            crate::synth::generate_dataset(&synth)
        }
    }
}

/// Render and encode records against a vocabulary.
pub fn encode_records(records: &[ExamRecord], vocab: &Vocab, max_len: usize) -> Vec<TokenSequence> {
    records
        .iter()
        .map(|r| text::encode_text(&data::render_template(r), vocab, max_len))
        .collect()
}

/// Cross-validated evaluation of one model family: per-fold reports, their
/// unweighted mean, and the pooled-predictions report.
#[derive(Debug, Clone)]
pub struct ModelEvaluation {
    pub model: String,
    pub fold_reports: Vec<MetricsReport>,
    pub mean: MetricsReport,
    pub pooled: MetricsReport,
    pub pooled_confusion: ConfusionMatrix,
}

/// Train and evaluate a model on every fold of `plan`. The closure receives
/// `(fold, train_indices, validation_indices)` and returns predictions for
/// the validation records in order.
pub fn cross_validate<F>(
    model: &str,
    labels: &[usize],
    n_classes: usize,
    plan: &FoldPlan,
    mut train_and_predict: F,
) -> Result<ModelEvaluation>
where
    F: FnMut(usize, &[usize], &[usize]) -> Result<Vec<usize>>,
{
    let mut fold_reports = Vec::with_capacity(plan.k);
    let mut pooled = ConfusionMatrix::from_labels(&[], &[], n_classes)?;
    for fold in 0..plan.k {
        let train_idx = plan.train_indices(fold);
        let val_idx = plan.validation(fold);
        let preds = train_and_predict(fold, &train_idx, val_idx)?;
        if preds.len() != val_idx.len() {
            return Err(Error::shape(
                "cross_validate predictions",
                &[preds.len()],
                &[val_idx.len()],
            ));
        }
        let golds: Vec<usize> = val_idx.iter().map(|&i| labels[i]).collect();
        let matrix = ConfusionMatrix::from_labels(&golds, &preds, n_classes)?;
        pooled.merge(&matrix)?;
        fold_reports.push(MetricsReport::from_confusion(
            model,
            &format!("fold{fold}"),
            &matrix,
        ));
    }
    let mean = MetricsReport::mean_over_folds(model, &fold_reports)?;
    let pooled_report = MetricsReport::from_confusion(model, "pooled", &pooled);
    Ok(ModelEvaluation {
        model: model.to_string(),
        fold_reports,
        mean,
        pooled: pooled_report,
        pooled_confusion: pooled,
    })
}

/// Everything shared by the models of one fold: the fold-fitted vocabulary
/// and encodings, the MLM-pretrained encoder, and the fine-tuned teacher.
pub struct FoldContext {
    pub fold: usize,
    pub vocab: Vocab,
    pub encoder_config: EncoderConfig,
    pub train_idx: Vec<usize>,
    pub train_seqs: Vec<TokenSequence>,
    pub train_labels: Vec<usize>,
    pub val_seqs: Vec<TokenSequence>,
    pub pretrained: crate::tensor::ModelParams<f32>,
    pub pretrain_loss_curve: Vec<f64>,
    pub teacher: EncoderModel<f32>,
}

/// Build the shared per-fold artifacts. Everything (vocabulary, POS index,
/// pretraining corpus) fits on the training fold only.
pub fn build_fold_context(
    config: &ExperimentConfig,
    records: &[ExamRecord],
    labels: &[usize],
    n_classes: usize,
    plan: &FoldPlan,
    fold: usize,
) -> Result<FoldContext> {
    let train_idx = plan.train_indices(fold);
    let val_idx = plan.validation(fold);
    let train_records: Vec<ExamRecord> = train_idx.iter().map(|&i| records[i].clone()).collect();
    let train_labels: Vec<usize> = train_idx.iter().map(|&i| labels[i]).collect();
    let val_records: Vec<ExamRecord> = val_idx.iter().map(|&i| records[i].clone()).collect();

    let templates: Vec<String> = train_records.iter().map(data::render_template).collect();
    let vocab = text::train_vocab(&templates, config.vocab_size)?;
    let train_seqs = encode_records(&train_records, &vocab, config.encoder.max_len);
    let val_seqs = encode_records(&val_records, &vocab, config.encoder.max_len);

    let master = config.master_seed;
    let encoder_config = config.encoder_config(
        vocab.len(),
        n_classes,
        seed::derive_indexed(master, &["encoder-init"], fold as u64),
    );
    let pretrain = PretrainConfig {
        batch_size: config.pretrain.batch_size,
        learning_rate: config.pretrain.learning_rate,
        epochs: config.pretrain.epochs,
        seed: seed::derive_indexed(master, &["pretrain"], fold as u64),
    };
    let out = encoder::mlm_pretrain::<f32>(&train_seqs, &encoder_config, &pretrain)?;
    let teacher = encoder::fine_tune(
        &out.params,
        &encoder_config,
        &train_seqs,
        &train_labels,
        &config.train_config(seed::derive_indexed(master, &["train-mlm"], fold as u64)),
    )?;
    Ok(FoldContext {
        fold,
        vocab,
        encoder_config,
        train_idx,
        train_seqs,
        train_labels,
        val_seqs,
        pretrained: out.params,
        pretrain_loss_curve: out.loss_curve,
        teacher: teacher.model,
    })
}

/// Outcome of the full grid: evaluations per model in canonical order.
#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub label_names: Vec<String>,
    pub label_set: ProtocolLabelSet,
    pub model_order: Vec<String>,
    pub evaluations: BTreeMap<String, ModelEvaluation>,
    pub dataset_sha256: String,
    pub config_hash: String,
}

impl ExperimentOutcome {
    /// Reports in presentation order: pooled first, then the fold mean, then
    /// per-fold rows, per model.
    pub fn ordered_reports(&self) -> Vec<&MetricsReport> {
        let mut out = Vec::new();
        for name in &self.model_order {
            let eval = &self.evaluations[name];
            out.push(&eval.pooled);
            out.push(&eval.mean);
            out.extend(eval.fold_reports.iter());
        }
        out
    }

    /// Pooled reports only, for the per-class table.
    pub fn pooled_reports(&self) -> Vec<&MetricsReport> {
        self.model_order
            .iter()
            .map(|name| &self.evaluations[name].pooled)
            .collect()
    }
}

/// Run the full benchmark grid: TF-IDF baselines, random-init encoder,
/// domain-pretrained encoder, under/over-sampled variants, and the born-again
/// generations, all on the same folds.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentOutcome> {
    config.validate()?;
    let raw = materialize_dataset(config)?;
    let (records, label_set) = data::consolidate_labels(&raw, config.label_threshold)?;
    let labels = label_set.labels_for(&records)?;
    let n_classes = label_set.len();
    let master = config.master_seed;
    let plan = sampling::stratified_kfold(&labels, config.folds, seed::derive(master, &["folds"]))?;

    let mut contexts = Vec::with_capacity(config.folds);
    for fold in 0..config.folds {
        contexts.push(build_fold_context(
            config, &records, &labels, n_classes, &plan, fold,
        )?);
    }

    let mut model_order = Vec::new();
    let mut evaluations = BTreeMap::new();
    let register = |name: &str,
                        evaluations: &mut BTreeMap<String, ModelEvaluation>,
                        model_order: &mut Vec<String>,
                        eval: ModelEvaluation| {
        model_order.push(name.to_string());
        evaluations.insert(name.to_string(), eval);
    };

    // TF-IDF linear baselines.
    let svm_eval = cross_validate("svm", &labels, n_classes, &plan, |fold, train_idx, val_idx| {
        let train_records: Vec<ExamRecord> = train_idx.iter().map(|&i| records[i].clone()).collect();
        let train_labels: Vec<usize> = train_idx.iter().map(|&i| labels[i]).collect();
        let tfidf = baseline::fit_tfidf(&train_records)?;
        let features = baseline::transform_all(&train_records, &tfidf);
        let model = baseline::train_linear_svm(
            &features,
            &train_labels,
            &SvmConfig {
                c: config.baselines.svm_c,
                epochs: config.baselines.svm_epochs,
                seed: seed::derive_indexed(master, &["svm"], fold as u64),
                n_classes,
            },
        )?;
        let val_records: Vec<ExamRecord> = val_idx.iter().map(|&i| records[i].clone()).collect();
        Ok(model.predict_all(&baseline::transform_all(&val_records, &tfidf)))
    })?;
    register("svm", &mut evaluations, &mut model_order, svm_eval);

    let softmax_eval =
        cross_validate("softmax-reg", &labels, n_classes, &plan, |fold, train_idx, val_idx| {
            let train_records: Vec<ExamRecord> =
                train_idx.iter().map(|&i| records[i].clone()).collect();
            let train_labels: Vec<usize> = train_idx.iter().map(|&i| labels[i]).collect();
            let tfidf = baseline::fit_tfidf(&train_records)?;
            let features = baseline::transform_all(&train_records, &tfidf);
            let model = baseline::train_softmax_reg(
                &features,
                &train_labels,
                &SoftmaxConfig {
                    l2: config.baselines.softmax_l2,
                    learning_rate: config.baselines.softmax_learning_rate,
                    epochs: config.baselines.softmax_epochs,
                    seed: seed::derive_indexed(master, &["softmax"], fold as u64),
                    n_classes,
                },
            )?;
            let val_records: Vec<ExamRecord> =
                val_idx.iter().map(|&i| records[i].clone()).collect();
            Ok(model.predict_all(&baseline::transform_all(&val_records, &tfidf)))
        })?;
    register("softmax-reg", &mut evaluations, &mut model_order, softmax_eval);

    // Random-init encoder (out-of-domain analog).
    let rand_eval =
        cross_validate("encoder-rand", &labels, n_classes, &plan, |fold, _train, _val| {
            let ctx = &contexts[fold];
            let mut cfg = ctx.encoder_config.clone();
            cfg.seed = seed::derive_indexed(master, &["encoder-rand-init"], fold as u64);
            let init = encoder::init_encoder::<f32>(&cfg)?;
            let out = encoder::fine_tune(
                &init,
                &cfg,
                &ctx.train_seqs,
                &ctx.train_labels,
                &config.train_config(seed::derive_indexed(master, &["train-rand"], fold as u64)),
            )?;
            let (_, preds) = encoder::predict(&out.model, &ctx.val_seqs)?;
            Ok(preds)
        })?;
    register("encoder-rand", &mut evaluations, &mut model_order, rand_eval);

    // Domain-pretrained encoder: the teacher itself.
    let mlm_eval = cross_validate("encoder-mlm", &labels, n_classes, &plan, |fold, _t, _v| {
        let ctx = &contexts[fold];
        let (_, preds) = encoder::predict(&ctx.teacher, &ctx.val_seqs)?;
        Ok(preds)
    })?;
    register("encoder-mlm", &mut evaluations, &mut model_order, mlm_eval);

    // Resampling experiments on the pretrained encoder.
    for (name, under) in [("encoder-mlm-undersample", true), ("encoder-mlm-oversample", false)] {
        let eval = cross_validate(name, &labels, n_classes, &plan, |fold, train_idx, _val| {
            let ctx = &contexts[fold];
            let sample_seed = seed::derive_indexed(master, &[name], fold as u64);
            let resampled = if under {
                sampling::undersample_majorities(train_idx, &labels, sample_seed)?
            } else {
                sampling::oversample_minorities(train_idx, &labels, sample_seed)?
            };
            // Map global indices back to positions within the fold context.
            let pos: BTreeMap<usize, usize> = ctx
                .train_idx
                .iter()
                .enumerate()
                .map(|(p, &g)| (g, p))
                .collect();
            let seqs: Vec<TokenSequence> = resampled
                .iter()
                .map(|&g| ctx.train_seqs[pos[&g]].clone())
                .collect();
            let sub_labels: Vec<usize> = resampled.iter().map(|&g| labels[g]).collect();
            let out = encoder::fine_tune(
                &ctx.pretrained,
                &ctx.encoder_config,
                &seqs,
                &sub_labels,
                &config.train_config(seed::derive_indexed(master, &[name, "train"], fold as u64)),
            )?;
            let (_, preds) = encoder::predict(&out.model, &ctx.val_seqs)?;
            Ok(preds)
        })?;
        register(name, &mut evaluations, &mut model_order, eval);
    }

    // Born-again generations, sharing the teacher and the augmented pool.
    let generations = config.distill.generations;
    if generations > 0 {
        let mut per_gen_preds: Vec<Vec<Vec<usize>>> = vec![Vec::new(); generations];
        for ctx in &contexts {
            let train_records: Vec<ExamRecord> =
                ctx.train_idx.iter().map(|&i| records[i].clone()).collect();
            let pos_index = augment::pos_index_for(&train_records);
            let policy = config
                .augmentation
                .to_policy(seed::derive_indexed(master, &["augment"], ctx.fold as u64));
            let augmented =
                augment::augment_dataset(&train_records, &ctx.train_labels, &policy, &pos_index)?;
            let aug_seqs: Vec<TokenSequence> = augmented
                .iter()
                .map(|a| text::encode_text(&a.text(), &ctx.vocab, config.encoder.max_len))
                .collect();
            let dc = DistillConfig {
                train: config.train_config(0),
                mse_on_gold: config.distill.mse_on_gold,
            };
            let gens = distill::ban_loop(
                &ctx.teacher,
                Some(&ctx.pretrained),
                &ctx.train_seqs,
                &ctx.train_labels,
                &aug_seqs,
                &dc,
                generations,
                seed::derive_indexed(master, &["ban"], ctx.fold as u64),
            )?;
            for (g, generation) in gens.iter().enumerate() {
                let (_, preds) = encoder::predict(&generation.model, &ctx.val_seqs)?;
                per_gen_preds[g].push(preds);
            }
        }
        for (g, fold_preds) in per_gen_preds.into_iter().enumerate() {
            let name = format!("ban{}", g + 1);
            let eval = cross_validate(&name, &labels, n_classes, &plan, |fold, _t, _v| {
                Ok(fold_preds[fold].clone())
            })?;
            register(&name, &mut evaluations, &mut model_order, eval);
        }
    }

    let dataset_sha256 = {
        let mut bytes = Vec::new();
        for r in &records {
            bytes.extend_from_slice(data::render_template(r).as_bytes());
            bytes.push(b'\n');
        }
        sha256_hex(&bytes)
    };
    Ok(ExperimentOutcome {
        label_names: label_set.groups().iter().map(|g| g.name.clone()).collect(),
        label_set,
        model_order,
        evaluations,
        dataset_sha256,
        config_hash: config_hash(config)?,
    })
}

/// Sweep the per-instance augmentation count on fold 0 (one fold keeps the
/// sweep affordable; every value shares the teacher and fold artifacts) and
/// report first-generation macro-F1 per value.
pub fn run_n_aug_sweep(
    config: &ExperimentConfig,
    values: &[usize],
) -> Result<Vec<(usize, MetricsReport)>> {
    config.validate()?;
    let raw = materialize_dataset(config)?;
    let (records, label_set) = data::consolidate_labels(&raw, config.label_threshold)?;
    let labels = label_set.labels_for(&records)?;
    let n_classes = label_set.len();
    let master = config.master_seed;
    let plan = sampling::stratified_kfold(&labels, config.folds, seed::derive(master, &["folds"]))?;
    let ctx = build_fold_context(config, &records, &labels, n_classes, &plan, 0)?;
    let train_records: Vec<ExamRecord> = ctx.train_idx.iter().map(|&i| records[i].clone()).collect();
    let pos_index = augment::pos_index_for(&train_records);
    let val_golds: Vec<usize> = plan.validation(0).iter().map(|&i| labels[i]).collect();

    let mut out = Vec::with_capacity(values.len());
    for &n_aug in values {
        let mut policy = config
            .augmentation
            .to_policy(seed::derive_indexed(master, &["augment"], 0));
        policy.n_aug = n_aug;
        let augmented =
            augment::augment_dataset(&train_records, &ctx.train_labels, &policy, &pos_index)?;
        let aug_seqs: Vec<TokenSequence> = augmented
            .iter()
            .map(|a| text::encode_text(&a.text(), &ctx.vocab, config.encoder.max_len))
            .collect();
        let dc = DistillConfig {
            train: config.train_config(0),
            mse_on_gold: config.distill.mse_on_gold,
        };
        let gens = distill::ban_loop(
            &ctx.teacher,
            Some(&ctx.pretrained),
            &ctx.train_seqs,
            &ctx.train_labels,
            &aug_seqs,
            &dc,
            1,
            seed::derive_indexed(master, &["sweep", &n_aug.to_string()], 0),
        )?;
        let (_, preds) = encoder::predict(&gens[0].model, &ctx.val_seqs)?;
        let matrix = ConfusionMatrix::from_labels(&val_golds, &preds, n_classes)?;
        out.push((
            n_aug,
            MetricsReport::from_confusion(&format!("ban1-naug{n_aug}"), "fold0", &matrix),
        ));
    }
    Ok(out)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let digest = hasher.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(sha256_hex(&bytes))
}

/// Content hash of any serializable config (canonical JSON).
pub fn config_hash<T: Serialize>(value: &T) -> Result<String> {
    Ok(sha256_hex(serde_json::to_string(value)?.as_bytes()))
}

/// Checkpoint lineage header embedded in every model artifact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub stage: String,
    pub seed: u64,
    pub config_hash: String,
    pub vocab_sha256: String,
    pub dataset_sha256: String,
    pub encoder: EncoderConfig,
}

/// Training-run sidecar written next to checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetadata {
    pub stage: String,
    pub seed: u64,
    pub config_hash: String,
    pub learning_rate: f64,
    /// Documented full-scale setting for this task family.
    pub reference_full_scale_lr: f64,
    pub loss_curve: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub skipped_batches: Option<usize>,
    pub encoder: EncoderConfig,
}

/// Index of artifacts in an output directory; lets stages resume instead of
/// recomputing when config hash and seed match.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: String,
    pub stage: String,
    pub config_hash: String,
    pub seed: u64,
    #[serde(default)]
    pub inputs: Vec<String>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

impl Manifest {
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        if !path.exists() {
            return Ok(Manifest::default());
        }
        let text = fs::read_to_string(&path).map_err(|e| Error::io(path.display().to_string(), e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
        let path = dir.join(MANIFEST_FILE);
        let text = format!("{:#}\n", serde_json::to_value(self)?);
        fs::write(&path, text).map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn find(&self, path: &str) -> Option<&ManifestEntry> {
        self.entries.iter().find(|e| e.path == path)
    }

    /// True when an artifact exists on disk and was produced by the same
    /// stage, config, and seed.
    pub fn is_current(&self, dir: &Path, entry: &ManifestEntry) -> bool {
        self.find(&entry.path)
            .map(|found| found == entry && dir.join(&entry.path).exists())
            .unwrap_or(false)
    }

    pub fn upsert(&mut self, entry: ManifestEntry) {
        match self.entries.iter_mut().find(|e| e.path == entry.path) {
            Some(existing) => *existing = entry,
            None => self.entries.push(entry),
        }
    }
}

/// Resolve an output path, erroring with the producing stage's name when the
/// artifact is missing.
pub fn require_artifact(dir: &Path, name: &str, producing_stage: &str) -> Result<PathBuf> {
    let path = dir.join(name);
    if !path.exists() {
        return Err(Error::MissingArtifact {
            path: path.display().to_string(),
            stage: producing_stage.to_string(),
        });
    }
    Ok(path)
}
