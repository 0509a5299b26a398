//! Workbench for automatic assignment of radiology examination protocols.
//!
//! The pipeline classifies templated exam text ("Exam is ... History: ...")
//! into protocol groups with a compact transformer encoder, optionally
//! domain-pretrained with masked language modeling, and mitigates the heavy
//! class imbalance with masked data augmentation plus born-again knowledge
//! distillation. TF-IDF n-gram linear baselines and resampling experiments
//! run under the same stratified cross-validation harness for comparison.
//!
//! Modules follow the pipeline stages:
//!
//! - [`data`]: exam records, label consolidation, templating, corpus stats
//! - [`synth`]: synthetic corpora matching the published class imbalance
//! - [`text`]: subword vocabulary, tokenizer, encoder inputs, POS index
//! - [`tensor`]: dense tensors, autodiff, Adam, checkpoints
//! - [`encoder`]: transformer classifier, MLM pretraining, fine-tuning
//! - [`baseline`]: TF-IDF features, linear SVM, softmax regression
//! - [`augment`]: masked data augmentation for distillation
//! - [`distill`]: soft labels, the blended loss, born-again generations
//! - [`sampling`]: stratified k-fold and resampling experiments
//! - [`metrics`]: confusion matrices and macro/weighted reporting
//! - [`experiment`]: config-driven orchestration shared with the CLI

pub mod augment;
pub mod baseline;
pub mod data;
pub mod distill;
pub mod encoder;
pub mod error;
pub mod experiment;
pub mod metrics;
pub mod sampling;
pub mod seed;
pub mod synth;
pub mod tensor;
pub mod text;

pub use error::{Error, Result};
