//! Command-line pipeline for the protocol-assignment workbench.
//!
//! Every stage reads the same TOML experiment config and writes artifacts
//! into the output directory alongside a manifest recording the config hash
//! and stage seed that produced them. Stages skip recomputation when their
//! artifact is already current, and `evaluate` refuses models whose lineage
//! does not match the inputs it was given.
//!
//! The granular stages (`build-vocab`, `pretrain`, ...) operate on the whole
//! dataset they are pointed at, for pipeline experiments where the caller
//! manages splits. `run-experiment` is the leakage-clean protocol: every
//! fold refits the vocabulary, POS index, features, and pretraining corpus
//! on its own training split.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use protoclass::augment;
use protoclass::baseline;
use protoclass::data::{self, DatasetFormat, ExamRecord, ProtocolLabelSet};
use protoclass::distill;
use protoclass::encoder::{self, EncoderModel, PretrainConfig};
use protoclass::error::Error;
use protoclass::experiment::{
    self, config_hash, file_sha256, require_artifact, CheckpointHeader,
    DatasetSource, ExperimentConfig, Manifest, ManifestEntry, RunMetadata,
};
use protoclass::metrics::{self, ConfusionMatrix, MetricsReport};
use protoclass::sampling;
use protoclass::seed;
use protoclass::tensor::checkpoint;
use protoclass::text::{self, Vocab};
use protoclass::Result;

const DATASET_FILE: &str = "dataset.csv";
const VOCAB_FILE: &str = "vocab.txt";
const LABELS_FILE: &str = "labels.json";
const PRETRAINED_FILE: &str = "pretrained.pckp";
const ENCODER_FILE: &str = "encoder.pckp";
const AUGMENTED_FILE: &str = "augmented.csv";
const RESAMPLED_FILE: &str = "resampled.csv";

#[derive(Parser)]
#[command(
    name = "protoclass",
    about = "Radiology protocol assignment workbench",
    version
)]
struct Cli {
    /// Experiment config (TOML).
    #[arg(short, long, global = true, default_value = "protoclass.toml")]
    config: PathBuf,
    /// Output directory for artifacts and reports.
    #[arg(short, long, global = true, default_value = "out")]
    out: PathBuf,
    /// Override the config's master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset from the configured profile.
    Synth,
    /// Consolidate labels and train the subword vocabulary.
    BuildVocab,
    /// Masked-LM pretraining of the encoder on the dataset text.
    Pretrain,
    /// Train a TF-IDF linear baseline.
    TrainBaseline {
        /// Baseline family: svm | softmax.
        #[arg(long)]
        model: String,
    },
    /// Fine-tune the encoder classifier.
    TrainEncoder {
        /// Initialization: random | pretrained.
        #[arg(long, default_value = "pretrained")]
        init: String,
    },
    /// Generate the masked augmentation corpus.
    Augment,
    /// Born-again knowledge distillation against the trained encoder.
    Distill {
        /// Run the configured n_aug sweep instead of the generation loop.
        #[arg(long)]
        sweep: bool,
    },
    /// Resample the dataset (training-style slice) and write it back out.
    Resample {
        /// Mode: undersample | oversample.
        #[arg(long)]
        mode: String,
    },
    /// Evaluate a model artifact on a dataset.
    Evaluate {
        /// Path to a .pckp encoder checkpoint or baseline .json model.
        #[arg(long)]
        model: PathBuf,
        /// Evaluation dataset (defaults to the pipeline dataset).
        #[arg(long)]
        data: Option<PathBuf>,
        /// Report name (directory under <out>/eval/).
        #[arg(long)]
        name: Option<String>,
    },
    /// Merge metrics files into consolidated report tables.
    Report {
        /// metrics.json files produced by `evaluate` or `run-experiment`.
        #[arg(required = true)]
        metrics: Vec<PathBuf>,
    },
    /// Run the full cross-validated benchmark grid.
    RunExperiment {
        /// Also run the n_aug sweep and emit its table.
        #[arg(long)]
        sweep: bool,
    },
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                0
            } else {
                1
            };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    match run(cli) {
        Ok(()) => {}
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(exit_code(&e));
        }
    }
}

/// 1 for validation problems (bad config/inputs), 2 for runtime failures.
fn exit_code(e: &Error) -> i32 {
    match e {
        Error::InvalidConfig(_)
        | Error::UnknownFormat(_)
        | Error::UnknownColumn(_)
        | Error::MissingColumn(_)
        | Error::MalformedRow { .. }
        | Error::EmptyLabelSet { .. }
        | Error::EmptyInput(_)
        | Error::ClassTooSmall { .. }
        | Error::LabelOutOfRange { .. }
        | Error::VocabMismatch(_)
        | Error::LineageMismatch(_) => 1,
        _ => 2,
    }
}

struct Ctx {
    config: ExperimentConfig,
    config_hash: String,
    out: PathBuf,
    manifest: Manifest,
}

impl Ctx {
    fn new(cli: &Cli) -> Result<Self> {
        let text = fs::read_to_string(&cli.config)
            .map_err(|e| Error::io(cli.config.display().to_string(), e))?;
        let mut config: ExperimentConfig = toml::from_str(&text).map_err(|e| {
            Error::InvalidConfig(format!("{}: {e}", cli.config.display()))
        })?;
        if let Some(seed) = cli.seed {
            config.master_seed = seed;
        }
        config.validate()?;
        fs::create_dir_all(&cli.out).map_err(|e| Error::io(cli.out.display().to_string(), e))?;
        let manifest = Manifest::load(&cli.out)?;
        Ok(Ctx {
            config_hash: config_hash(&config)?,
            config,
            out: cli.out.clone(),
            manifest,
        })
    }

    fn entry(&self, path: &str, stage: &str, stage_seed: u64, inputs: Vec<String>) -> ManifestEntry {
        ManifestEntry {
            path: path.to_string(),
            stage: stage.to_string(),
            config_hash: self.config_hash.clone(),
            seed: stage_seed,
            inputs,
        }
    }

    /// True (after logging) when the artifact is already up to date.
    fn current(&self, entry: &ManifestEntry) -> bool {
        let current = self.manifest.is_current(&self.out, entry);
        if current {
            println!("{}: up to date, skipping", entry.path);
        }
        current
    }

    fn commit(&mut self, entry: ManifestEntry) -> Result<()> {
        self.manifest.upsert(entry);
        self.manifest.save(&self.out)
    }

    /// The pipeline dataset: a prior `synth` artifact, or the configured
    /// file. A synth source without the artifact means `synth` must run
    /// first.
    fn load_pipeline_dataset(&self) -> Result<Vec<ExamRecord>> {
        let artifact = self.out.join(DATASET_FILE);
        if artifact.exists() {
            return data::load_dataset(&artifact, DatasetFormat::Csv);
        }
        match &self.config.dataset {
            DatasetSource::File { path, format } => {
                let path = Path::new(path);
                let format = match format {
                    Some(f) => DatasetFormat::parse(f)?,
                    None => DatasetFormat::from_path(path),
                };
                data::load_dataset(path, format)
            }
            DatasetSource::Synth { .. } => Err(Error::MissingArtifact {
                path: artifact.display().to_string(),
                stage: "synth".to_string(),
            }),
        }
    }

    fn dataset_sha(&self) -> Result<String> {
        let artifact = self.out.join(DATASET_FILE);
        if artifact.exists() {
            return file_sha256(&artifact);
        }
        if let DatasetSource::File { path, .. } = &self.config.dataset {
            return file_sha256(Path::new(path));
        }
        Err(Error::MissingArtifact {
            path: artifact.display().to_string(),
            stage: "synth".to_string(),
        })
    }

    fn load_vocab_and_labels(&self) -> Result<(Vocab, ProtocolLabelSet)> {
        let vocab_path = require_artifact(&self.out, VOCAB_FILE, "build-vocab")?;
        let labels_path = require_artifact(&self.out, LABELS_FILE, "build-vocab")?;
        let vocab = Vocab::load(&vocab_path)?;
        let text = fs::read_to_string(&labels_path)
            .map_err(|e| Error::io(labels_path.display().to_string(), e))?;
        Ok((vocab, serde_json::from_str(&text)?))
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut ctx = Ctx::new(&cli)?;
    match &cli.command {
        Command::Synth => synth(&mut ctx),
        Command::BuildVocab => build_vocab(&mut ctx),
        Command::Pretrain => pretrain(&mut ctx),
        Command::TrainBaseline { model } => train_baseline(&mut ctx, model),
        Command::TrainEncoder { init } => train_encoder(&mut ctx, init),
        Command::Augment => augment_stage(&mut ctx),
        Command::Distill { sweep } => distill_stage(&mut ctx, *sweep),
        Command::Resample { mode } => resample(&mut ctx, mode),
        Command::Evaluate { model, data, name } => evaluate(&mut ctx, model, data.as_deref(), name.as_deref()),
        Command::Report { metrics } => report(&ctx, metrics),
        Command::RunExperiment { sweep } => run_experiment(&mut ctx, *sweep),
    }
}

fn synth(ctx: &mut Ctx) -> Result<()> {
    let DatasetSource::Synth { .. } = &ctx.config.dataset else {
        return Err(Error::InvalidConfig(
            "synth requires a [dataset] section with kind = \"synth\"".into(),
        ));
    };
    let stage_seed = seed::derive(ctx.config.master_seed, &["synth"]);
    let entry = ctx.entry(DATASET_FILE, "synth", stage_seed, vec![]);
    if ctx.current(&entry) {
        return Ok(());
    }
    let records = experiment::materialize_dataset(&ctx.config)?;
    let path = ctx.out.join(DATASET_FILE);
    data::save_dataset(&path, DatasetFormat::Csv, &records)?;
    let stats = data::compute_stats(&records)?;
    println!(
        "wrote {} records to {} (history words mean {:.2} sd {:.2}, empty {:.1}%; template chars mean {:.0} median {:.0})",
        records.len(),
        path.display(),
        stats.history.mean,
        stats.history.std_dev,
        100.0 * stats.history.empty_fraction,
        stats.template_char_mean,
        stats.template_char_median,
    );
    ctx.commit(entry)
}

fn build_vocab(ctx: &mut Ctx) -> Result<()> {
    let dataset_sha = ctx.dataset_sha()?;
    let entry = ctx.entry(VOCAB_FILE, "build-vocab", 0, vec![dataset_sha.clone()]);
    if ctx.current(&entry) && ctx.out.join(LABELS_FILE).exists() {
        return Ok(());
    }
    let records = ctx.load_pipeline_dataset()?;
    let (records, label_set) = data::consolidate_labels(&records, ctx.config.label_threshold)?;
    let templates: Vec<String> = records.iter().map(data::render_template).collect();
    let vocab = text::train_vocab(&templates, ctx.config.vocab_size)?;
    vocab.save(&ctx.out.join(VOCAB_FILE))?;
    let labels_json = format!("{:#}\n", serde_json::to_value(&label_set)?);
    fs::write(ctx.out.join(LABELS_FILE), labels_json)
        .map_err(|e| Error::io(LABELS_FILE, e))?;
    println!(
        "vocabulary: {} tokens; label set: {} groups (threshold {})",
        vocab.len(),
        label_set.len(),
        ctx.config.label_threshold
    );
    ctx.commit(entry)
}

fn encoder_config_for(ctx: &Ctx, vocab: &Vocab, label_set: &ProtocolLabelSet, init_seed: u64) -> protoclass::encoder::EncoderConfig {
    protoclass::encoder::EncoderConfig {
        vocab_size: vocab.len(),
        d_model: ctx.config.encoder.d_model,
        n_heads: ctx.config.encoder.n_heads,
        n_layers: ctx.config.encoder.n_layers,
        d_ff: ctx.config.encoder.d_ff,
        max_len: ctx.config.encoder.max_len,
        n_classes: label_set.len(),
        dropout: ctx.config.encoder.dropout,
        mlm_mask_rate: ctx.config.encoder.mlm_mask_rate,
        seed: init_seed,
    }
}

fn labeled_subset(
    records: &[ExamRecord],
    label_set: &ProtocolLabelSet,
) -> (Vec<ExamRecord>, Vec<usize>) {
    let mut out_records = Vec::new();
    let mut labels = Vec::new();
    for r in records {
        if let Some(l) = label_set.label_of(r) {
            out_records.push(r.clone());
            labels.push(l);
        }
    }
    (out_records, labels)
}

fn write_run_metadata(path: &Path, meta: &RunMetadata) -> Result<()> {
    let text = format!("{:#}\n", serde_json::to_value(meta)?);
    fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))
}

fn pretrain(ctx: &mut Ctx) -> Result<()> {
    let stage_seed = seed::derive(ctx.config.master_seed, &["pretrain"]);
    let dataset_sha = ctx.dataset_sha()?;
    let vocab_sha = file_sha256(&require_artifact(&ctx.out, VOCAB_FILE, "build-vocab")?)?;
    let entry = ctx.entry(
        PRETRAINED_FILE,
        "pretrain",
        stage_seed,
        vec![dataset_sha.clone(), vocab_sha.clone()],
    );
    if ctx.current(&entry) {
        return Ok(());
    }
    let records = ctx.load_pipeline_dataset()?;
    let (vocab, label_set) = ctx.load_vocab_and_labels()?;
    let (records, _) = labeled_subset(&records, &label_set);
    let seqs = experiment::encode_records(&records, &vocab, ctx.config.encoder.max_len);
    let enc_cfg = encoder_config_for(
        ctx,
        &vocab,
        &label_set,
        seed::derive(ctx.config.master_seed, &["encoder-init"]),
    );
    let pc = PretrainConfig {
        batch_size: ctx.config.pretrain.batch_size,
        learning_rate: ctx.config.pretrain.learning_rate,
        epochs: ctx.config.pretrain.epochs,
        seed: stage_seed,
    };
    let out = encoder::mlm_pretrain::<f32>(&seqs, &enc_cfg, &pc)?;
    if out.skipped_batches > 0 {
        println!("skipped {} batches with no maskable tokens", out.skipped_batches);
    }
    let header = CheckpointHeader {
        stage: "pretrain".into(),
        seed: stage_seed,
        config_hash: ctx.config_hash.clone(),
        vocab_sha256: vocab_sha,
        dataset_sha256: dataset_sha,
        encoder: enc_cfg.clone(),
    };
    checkpoint::save(
        &ctx.out.join(PRETRAINED_FILE),
        &serde_json::to_string(&header)?,
        &out.params,
    )?;
    write_run_metadata(
        &ctx.out.join("pretrained.meta.json"),
        &RunMetadata {
            stage: "pretrain".into(),
            seed: stage_seed,
            config_hash: ctx.config_hash.clone(),
            learning_rate: pc.learning_rate,
            reference_full_scale_lr: encoder::FULL_SCALE_LEARNING_RATE,
            loss_curve: out.loss_curve.clone(),
            skipped_batches: Some(out.skipped_batches),
            encoder: enc_cfg,
        },
    )?;
    println!(
        "pretrained for {} epochs; masked loss {:.4} -> {:.4}",
        pc.epochs,
        out.loss_curve.first().copied().unwrap_or(f64::NAN),
        out.loss_curve.last().copied().unwrap_or(f64::NAN),
    );
    ctx.commit(entry)
}

fn train_encoder(ctx: &mut Ctx, init: &str) -> Result<()> {
    let stage_seed = seed::derive(ctx.config.master_seed, &["train-encoder", init]);
    let dataset_sha = ctx.dataset_sha()?;
    let vocab_sha = file_sha256(&require_artifact(&ctx.out, VOCAB_FILE, "build-vocab")?)?;
    let mut inputs = vec![dataset_sha.clone(), vocab_sha.clone()];
    if init == "pretrained" {
        inputs.push(file_sha256(&require_artifact(
            &ctx.out,
            PRETRAINED_FILE,
            "pretrain",
        )?)?);
    }
    let entry = ctx.entry(ENCODER_FILE, "train-encoder", stage_seed, inputs);
    if ctx.current(&entry) {
        return Ok(());
    }
    let records = ctx.load_pipeline_dataset()?;
    let (vocab, label_set) = ctx.load_vocab_and_labels()?;
    let (records, labels) = labeled_subset(&records, &label_set);
    let seqs = experiment::encode_records(&records, &vocab, ctx.config.encoder.max_len);
    let enc_cfg = encoder_config_for(
        ctx,
        &vocab,
        &label_set,
        seed::derive(ctx.config.master_seed, &["encoder-init"]),
    );
    let init_params = match init {
        "random" => encoder::init_encoder::<f32>(&enc_cfg)?,
        "pretrained" => {
            let (_, params) = checkpoint::load::<f32>(&ctx.out.join(PRETRAINED_FILE))?;
            params
        }
        other => {
            return Err(Error::InvalidConfig(format!(
                "unknown init `{other}` (expected random | pretrained)"
            )))
        }
    };
    let mut tc = protoclass::encoder::TrainConfig {
        batch_size: ctx.config.train.batch_size,
        learning_rate: ctx.config.train.learning_rate,
        epochs: ctx.config.train.epochs,
        seed: stage_seed,
    };
    tc.seed = stage_seed;
    let out = encoder::fine_tune(&init_params, &enc_cfg, &seqs, &labels, &tc)?;
    let header = CheckpointHeader {
        stage: format!("train-encoder:{init}"),
        seed: stage_seed,
        config_hash: ctx.config_hash.clone(),
        vocab_sha256: vocab_sha,
        dataset_sha256: dataset_sha,
        encoder: enc_cfg.clone(),
    };
    checkpoint::save(
        &ctx.out.join(ENCODER_FILE),
        &serde_json::to_string(&header)?,
        &out.model.params,
    )?;
    write_run_metadata(
        &ctx.out.join("encoder.meta.json"),
        &RunMetadata {
            stage: format!("train-encoder:{init}"),
            seed: stage_seed,
            config_hash: ctx.config_hash.clone(),
            learning_rate: tc.learning_rate,
            reference_full_scale_lr: encoder::FULL_SCALE_LEARNING_RATE,
            loss_curve: out.loss_curve.clone(),
            skipped_batches: None,
            encoder: enc_cfg,
        },
    )?;
    println!(
        "fine-tuned ({init} init) for {} epochs; loss {:.4} -> {:.4}",
        tc.epochs,
        out.loss_curve.first().copied().unwrap_or(f64::NAN),
        out.loss_curve.last().copied().unwrap_or(f64::NAN),
    );
    ctx.commit(entry)
}

/// Serialized baseline artifact: feature model + linear weights + lineage.
#[derive(serde::Serialize, serde::Deserialize)]
struct BaselineArtifact {
    version: u32,
    stage: String,
    seed: u64,
    config_hash: String,
    dataset_sha256: String,
    tfidf: baseline::TfidfModel,
    model: baseline::LinearModel,
}

fn train_baseline(ctx: &mut Ctx, model_kind: &str) -> Result<()> {
    if !matches!(model_kind, "svm" | "softmax") {
        return Err(Error::InvalidConfig(format!(
            "unknown baseline `{model_kind}` (expected svm | softmax)"
        )));
    }
    let file = format!("baseline-{model_kind}.json");
    let stage_seed = seed::derive(ctx.config.master_seed, &["baseline", model_kind]);
    let dataset_sha = ctx.dataset_sha()?;
    let entry = ctx.entry(&file, "train-baseline", stage_seed, vec![dataset_sha.clone()]);
    if ctx.current(&entry) {
        return Ok(());
    }
    let records = ctx.load_pipeline_dataset()?;
    let (_, label_set) = ctx.load_vocab_and_labels()?;
    let (records, labels) = labeled_subset(&records, &label_set);
    let tfidf = baseline::fit_tfidf(&records)?;
    let features = baseline::transform_all(&records, &tfidf);
    let model = match model_kind {
        "svm" => baseline::train_linear_svm(
            &features,
            &labels,
            &baseline::SvmConfig {
                c: ctx.config.baselines.svm_c,
                epochs: ctx.config.baselines.svm_epochs,
                seed: stage_seed,
                n_classes: label_set.len(),
            },
        )?,
        _ => baseline::train_softmax_reg(
            &features,
            &labels,
            &baseline::SoftmaxConfig {
                l2: ctx.config.baselines.softmax_l2,
                learning_rate: ctx.config.baselines.softmax_learning_rate,
                epochs: ctx.config.baselines.softmax_epochs,
                seed: stage_seed,
                n_classes: label_set.len(),
            },
        )?,
    };
    let artifact = BaselineArtifact {
        version: 1,
        stage: format!("train-baseline:{model_kind}"),
        seed: stage_seed,
        config_hash: ctx.config_hash.clone(),
        dataset_sha256: dataset_sha,
        tfidf,
        model,
    };
    let path = ctx.out.join(&file);
    fs::write(&path, serde_json::to_string(&artifact)?)
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    println!("trained {model_kind} baseline on {} records", records.len());
    ctx.commit(entry)
}

fn augment_stage(ctx: &mut Ctx) -> Result<()> {
    let stage_seed = seed::derive(ctx.config.master_seed, &["augment"]);
    let dataset_sha = ctx.dataset_sha()?;
    let entry = ctx.entry(AUGMENTED_FILE, "augment", stage_seed, vec![dataset_sha]);
    if ctx.current(&entry) {
        return Ok(());
    }
    let records = ctx.load_pipeline_dataset()?;
    let (_, label_set) = ctx.load_vocab_and_labels()?;
    let (records, labels) = labeled_subset(&records, &label_set);
    let policy = ctx.config.augmentation.to_policy(stage_seed);
    let pos_index = augment::pos_index_for(&records);
    let instances = augment::augment_dataset(&records, &labels, &policy, &pos_index)?;
    augment::save_augmented(&ctx.out.join(AUGMENTED_FILE), &instances)?;
    println!(
        "augmented {} originals into {} variants (n_aug {}, cap {})",
        records.len(),
        instances.len(),
        policy.n_aug,
        policy.class_cap
    );
    ctx.commit(entry)
}

fn distill_stage(ctx: &mut Ctx, sweep: bool) -> Result<()> {
    if sweep {
        let values = ctx.config.augmentation.n_aug_sweep.clone();
        if values.is_empty() {
            return Err(Error::InvalidConfig("n_aug_sweep is empty".into()));
        }
        let results = experiment::run_n_aug_sweep(&ctx.config, &values)?;
        let dir = ctx.out.join("sweep");
        fs::create_dir_all(&dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
        let mut table = String::from("| n_aug | Macro F1 | Weighted F1 |\n|---|---|---|\n");
        for (n_aug, report) in &results {
            table.push_str(&format!(
                "| {n_aug} | {:.4} | {:.4} |\n",
                report.macro_avg.f1, report.weighted_avg.f1
            ));
        }
        let path = dir.join("sweep.md");
        fs::write(&path, &table).map_err(|e| Error::io(path.display().to_string(), e))?;
        print!("{table}");
        return Ok(());
    }

    let stage_seed = seed::derive(ctx.config.master_seed, &["distill"]);
    let teacher_path = require_artifact(&ctx.out, ENCODER_FILE, "train-encoder")?;
    let augmented_path = require_artifact(&ctx.out, AUGMENTED_FILE, "augment")?;
    let generations = ctx.config.distill.generations.max(1);
    let final_file = format!("ban{generations}.pckp");
    let entry = ctx.entry(
        &final_file,
        "distill",
        stage_seed,
        vec![file_sha256(&teacher_path)?, file_sha256(&augmented_path)?],
    );
    if ctx.current(&entry) {
        return Ok(());
    }
    let records = ctx.load_pipeline_dataset()?;
    let (vocab, label_set) = ctx.load_vocab_and_labels()?;
    let (records, labels) = labeled_subset(&records, &label_set);
    let seqs = experiment::encode_records(&records, &vocab, ctx.config.encoder.max_len);
    let (header_json, teacher_params) = checkpoint::load::<f32>(&teacher_path)?;
    let header: CheckpointHeader = serde_json::from_str(&header_json)?;
    let teacher = EncoderModel {
        config: header.encoder.clone(),
        params: teacher_params,
    };
    let pretrained = if ctx.out.join(PRETRAINED_FILE).exists() {
        Some(checkpoint::load::<f32>(&ctx.out.join(PRETRAINED_FILE))?.1)
    } else {
        None
    };
    let augmented = augment::load_augmented(&augmented_path)?;
    let aug_seqs: Vec<_> = augmented
        .iter()
        .map(|a| text::encode_text(&a.text(), &vocab, ctx.config.encoder.max_len))
        .collect();
    let dc = distill::DistillConfig {
        train: protoclass::encoder::TrainConfig {
            batch_size: ctx.config.train.batch_size,
            learning_rate: ctx.config.train.learning_rate,
            epochs: ctx.config.train.epochs,
            seed: 0,
        },
        mse_on_gold: ctx.config.distill.mse_on_gold,
    };
    let gens = distill::ban_loop(
        &teacher,
        pretrained.as_ref(),
        &seqs,
        &labels,
        &aug_seqs,
        &dc,
        generations,
        stage_seed,
    )?;
    for generation in &gens {
        let file = format!("ban{}.pckp", generation.index);
        let gen_header = CheckpointHeader {
            stage: format!("distill:ban{}", generation.index),
            seed: stage_seed,
            config_hash: ctx.config_hash.clone(),
            vocab_sha256: header.vocab_sha256.clone(),
            dataset_sha256: header.dataset_sha256.clone(),
            encoder: header.encoder.clone(),
        };
        checkpoint::save(
            &ctx.out.join(&file),
            &serde_json::to_string(&gen_header)?,
            &generation.model.params,
        )?;
        println!(
            "generation {}: final loss {:.4}, soft-label digest {:016x}",
            generation.index,
            generation.loss_curve.last().copied().unwrap_or(f64::NAN),
            generation.soft_label_digest
        );
    }
    ctx.commit(entry)
}

fn resample(ctx: &mut Ctx, mode: &str) -> Result<()> {
    let stage_seed = seed::derive(ctx.config.master_seed, &["resample", mode]);
    let dataset_sha = ctx.dataset_sha()?;
    let entry = ctx.entry(RESAMPLED_FILE, "resample", stage_seed, vec![dataset_sha]);
    if ctx.current(&entry) {
        return Ok(());
    }
    let records = ctx.load_pipeline_dataset()?;
    let (records, label_set) = data::consolidate_labels(&records, ctx.config.label_threshold)?;
    let labels = label_set.labels_for(&records)?;
    let all: Vec<usize> = (0..records.len()).collect();
    let picked = match mode {
        "undersample" => sampling::undersample_majorities(&all, &labels, stage_seed)?,
        "oversample" => sampling::oversample_minorities(&all, &labels, stage_seed)?,
        other => {
            return Err(Error::InvalidConfig(format!(
                "unknown mode `{other}` (expected undersample | oversample)"
            )))
        }
    };
    let out_records: Vec<ExamRecord> = picked.iter().map(|&i| records[i].clone()).collect();
    data::save_dataset(&ctx.out.join(RESAMPLED_FILE), DatasetFormat::Csv, &out_records)?;
    println!("{mode}: {} -> {} records", records.len(), out_records.len());
    ctx.commit(entry)
}

fn evaluate(ctx: &mut Ctx, model: &Path, eval_data: Option<&Path>, name: Option<&str>) -> Result<()> {
    let (vocab, label_set) = ctx.load_vocab_and_labels()?;
    let eval_records = match eval_data {
        Some(path) => data::load_dataset(path, DatasetFormat::from_path(path))?,
        None => ctx.load_pipeline_dataset()?,
    };
    let (eval_records, golds) = labeled_subset(&eval_records, &label_set);
    if eval_records.is_empty() {
        return Err(Error::EmptyInput("no labeled records to evaluate".into()));
    }

    let ext = model.extension().and_then(|e| e.to_str()).unwrap_or("");
    let (model_name, preds): (String, Vec<usize>) = if ext == "pckp" {
        let (header_json, params) = checkpoint::load::<f32>(model)?;
        let header: CheckpointHeader = serde_json::from_str(&header_json)?;
        if header.config_hash != ctx.config_hash {
            return Err(Error::LineageMismatch(format!(
                "model was produced under config {} but current config hashes to {}",
                &header.config_hash[..12],
                &ctx.config_hash[..12]
            )));
        }
        let vocab_sha = file_sha256(&ctx.out.join(VOCAB_FILE))?;
        if header.vocab_sha256 != vocab_sha {
            return Err(Error::LineageMismatch(
                "model was trained with a different vocabulary".into(),
            ));
        }
        let encoder_model = EncoderModel {
            config: header.encoder.clone(),
            params,
        };
        let seqs = experiment::encode_records(&eval_records, &vocab, header.encoder.max_len);
        let (_, preds) = encoder::predict(&encoder_model, &seqs)?;
        (header.stage, preds)
    } else {
        let text = fs::read_to_string(model)
            .map_err(|e| Error::io(model.display().to_string(), e))?;
        let artifact: BaselineArtifact = serde_json::from_str(&text)?;
        if artifact.config_hash != ctx.config_hash {
            return Err(Error::LineageMismatch(format!(
                "baseline was produced under config {} but current config hashes to {}",
                &artifact.config_hash[..12],
                &ctx.config_hash[..12]
            )));
        }
        let features = baseline::transform_all(&eval_records, &artifact.tfidf);
        (artifact.stage, artifact.model.predict_all(&features))
    };

    let matrix = ConfusionMatrix::from_labels(&golds, &preds, label_set.len())?;
    let report = MetricsReport::from_confusion(&model_name, "eval", &matrix);
    let dir_name = name.map(String::from).unwrap_or_else(|| {
        format!("eval-{}", model_name.replace([':', '/'], "-"))
    });
    let dir = ctx.out.join("eval").join(dir_name);
    let class_names: Vec<String> = label_set.groups().iter().map(|g| g.name.clone()).collect();
    let metadata = serde_json::json!({
        "model": model.display().to_string(),
        "config_hash": ctx.config_hash,
        "records": golds.len(),
    });
    metrics::emit_report(&dir, &[&report], &class_names, &metadata)?;
    let reports_json = format!("{:#}\n", serde_json::to_value(vec![&report])?);
    fs::write(dir.join("metrics.json"), reports_json)
        .map_err(|e| Error::io("metrics.json", e))?;
    println!(
        "{model_name}: accuracy {:.4}, macro F1 {:.4}, weighted F1 {:.4} ({} records) -> {}",
        report.accuracy,
        report.macro_avg.f1,
        report.weighted_avg.f1,
        golds.len(),
        dir.display()
    );
    // Top confusion pairs, most confused first.
    for pair in metrics::confusion_pairs(&matrix, 3) {
        println!(
            "  {:.0}% of misses on {:?} went to {:?} ({} cases)",
            100.0 * pair.share,
            class_names[pair.gold],
            class_names[pair.pred],
            pair.count
        );
    }
    Ok(())
}

fn report(ctx: &Ctx, metric_files: &[PathBuf]) -> Result<()> {
    let mut reports: Vec<MetricsReport> = Vec::new();
    for path in metric_files {
        let text =
            fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let batch: Vec<MetricsReport> = serde_json::from_str(&text)?;
        reports.extend(batch);
    }
    if reports.is_empty() {
        return Err(Error::EmptyInput("no reports to merge".into()));
    }
    let (_, label_set) = ctx.load_vocab_and_labels()?;
    let class_names: Vec<String> = label_set.groups().iter().map(|g| g.name.clone()).collect();
    let refs: Vec<&MetricsReport> = reports.iter().collect();
    let dir = ctx.out.join("report");
    let metadata = serde_json::json!({
        "config_hash": ctx.config_hash,
        "merged_files": metric_files.iter().map(|p| p.display().to_string()).collect::<Vec<_>>(),
    });
    metrics::emit_report(&dir, &refs, &class_names, &metadata)?;
    println!("merged {} reports into {}", reports.len(), dir.display());
    Ok(())
}

fn run_experiment(ctx: &mut Ctx, sweep: bool) -> Result<()> {
    let outcome = experiment::run_experiment(&ctx.config)?;
    let dir = ctx.out.join("report");
    let metadata = serde_json::json!({
        "config_hash": outcome.config_hash,
        "dataset_sha256": outcome.dataset_sha256,
        "master_seed": ctx.config.master_seed,
        "models": outcome.model_order,
        "folds": ctx.config.folds,
    });
    metrics::emit_report(&dir, &outcome.ordered_reports(), &outcome.label_names, &metadata)?;
    let pooled_json = format!(
        "{:#}\n",
        serde_json::to_value(outcome.pooled_reports())?
    );
    fs::write(dir.join("metrics.json"), pooled_json)
        .map_err(|e| Error::io("metrics.json", e))?;

    // Per-class table on pooled predictions only (one column per model).
    let per_class = metrics::per_class_markdown(&outcome.pooled_reports(), &outcome.label_names);
    fs::write(dir.join("per_class.md"), per_class)
        .map_err(|e| Error::io("per_class.md", e))?;

    // Confusion-pair analysis for the pretrained encoder and the last
    // generation.
    let mut pairs_md = String::new();
    for model in ["encoder-mlm", &format!("ban{}", ctx.config.distill.generations)] {
        if let Some(eval) = outcome.evaluations.get(model) {
            pairs_md.push_str(&format!("## {model}\n\n"));
            pairs_md.push_str("| Gold | Predicted | Count | Share of misses |\n|---|---|---|---|\n");
            for pair in metrics::confusion_pairs(&eval.pooled_confusion, 10) {
                pairs_md.push_str(&format!(
                    "| {} | {} | {} | {:.2} |\n",
                    outcome.label_names[pair.gold],
                    outcome.label_names[pair.pred],
                    pair.count,
                    pair.share
                ));
            }
            pairs_md.push('\n');
        }
    }
    fs::write(dir.join("confusion_pairs.md"), pairs_md)
        .map_err(|e| Error::io("confusion_pairs.md", e))?;

    let mut lines = BTreeMap::new();
    for name in &outcome.model_order {
        let eval = &outcome.evaluations[name];
        lines.insert(
            name.clone(),
            format!(
                "{name}: macro F1 {:.4}, weighted F1 {:.4} (pooled over {} folds)",
                eval.pooled.macro_avg.f1, eval.pooled.weighted_avg.f1, ctx.config.folds
            ),
        );
    }
    for name in &outcome.model_order {
        println!("{}", lines[name]);
    }
    println!("report written to {}", dir.display());

    if sweep {
        distill_stage(ctx, true)?;
    }
    Ok(())
}
