//! Compact transformer encoder classifier: masked-LM domain pretraining,
//! cross-entropy fine-tuning, and logit inference.
//!
//! The architecture is the standard post-norm encoder (token+position
//! embeddings, multi-head self-attention with pad masking, GELU feed-forward,
//! residual+layer-norm) with a linear classification head on the `[CLS]`
//! position. Batches are trimmed to their longest real sequence before the
//! forward pass; pad masking makes the results identical to running at full
//! padded length, so this is purely a speedup.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;
use crate::tensor::graph::{Graph, Nid};
use crate::tensor::{AdamConfig, AdamState, Element, ModelParams, Tensor};
use crate::text::{TokenSequence, CLS, MASK, SEP};

/// Learning rate used by full-scale pretrained models of this family; kept as
/// documentation and recorded in run metadata. The compact model defaults to
/// a higher rate because it trains from scratch.
pub const FULL_SCALE_LEARNING_RATE: f64 = 2e-5;

const LN_EPS: f64 = 1e-5;
const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_ff: usize,
    pub max_len: usize,
    pub n_classes: usize,
    pub dropout: f64,
    pub mlm_mask_rate: f64,
    /// Seed for parameter initialization.
    pub seed: u64,
}

impl EncoderConfig {
    /// Compact defaults sized for desk-scale experiments.
    pub fn compact(vocab_size: usize, n_classes: usize, seed: u64) -> Self {
        EncoderConfig {
            vocab_size,
            d_model: 128,
            n_heads: 4,
            n_layers: 4,
            d_ff: 512,
            max_len: crate::text::DEFAULT_MAX_LEN,
            n_classes,
            dropout: 0.1,
            mlm_mask_rate: 0.15,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.vocab_size < 5 {
            return Err(Error::InvalidConfig(
                "vocab_size must cover the special tokens".into(),
            ));
        }
        if self.max_len < 2 {
            return Err(Error::InvalidConfig("max_len must be at least 2".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::InvalidConfig("dropout must be in [0,1)".into()));
        }
        if !(0.0..=1.0).contains(&self.mlm_mask_rate) {
            return Err(Error::InvalidConfig("mlm_mask_rate must be in [0,1]".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    /// Seed for shuffling, dropout, and fresh-head initialization.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 48,
            learning_rate: 1e-4,
            epochs: 4,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            batch_size: 48,
            learning_rate: 3e-4,
            epochs: 30,
            seed: 0,
        }
    }
}

/// A trained (or initialized) classifier: config plus parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderModel<T: Element> {
    pub config: EncoderConfig,
    pub params: ModelParams<T>,
}

/// Initialize embeddings and the layer stack (no heads), seeded by
/// `config.seed`.
pub fn init_encoder<T: Element>(config: &EncoderConfig) -> Result<ModelParams<T>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(config.seed, &["encoder_init"]));
    let d = config.d_model;
    let mut params = ModelParams::new();
    params.insert(
        "embed.tok",
        Tensor::randn(&[config.vocab_size, d], INIT_STD, &mut rng),
    );
    params.insert(
        "embed.pos",
        Tensor::randn(&[config.max_len, d], INIT_STD, &mut rng),
    );
    params.insert("embed.ln.gamma", Tensor::full(&[d], T::one()));
    params.insert("embed.ln.beta", Tensor::zeros(&[d]));
    for layer in 0..config.n_layers {
        for (w, b) in [("wq", "bq"), ("wk", "bk"), ("wv", "bv"), ("wo", "bo")] {
            params.insert(
                format!("layer{layer}.attn.{w}"),
                Tensor::randn(&[d, d], INIT_STD, &mut rng),
            );
            params.insert(format!("layer{layer}.attn.{b}"), Tensor::zeros(&[d]));
        }
        params.insert(format!("layer{layer}.ln1.gamma"), Tensor::full(&[d], T::one()));
        params.insert(format!("layer{layer}.ln1.beta"), Tensor::zeros(&[d]));
        params.insert(
            format!("layer{layer}.ffn.w1"),
            Tensor::randn(&[d, config.d_ff], INIT_STD, &mut rng),
        );
        params.insert(format!("layer{layer}.ffn.b1"), Tensor::zeros(&[config.d_ff]));
        params.insert(
            format!("layer{layer}.ffn.w2"),
            Tensor::randn(&[config.d_ff, d], INIT_STD, &mut rng),
        );
        params.insert(format!("layer{layer}.ffn.b2"), Tensor::zeros(&[d]));
        params.insert(format!("layer{layer}.ln2.gamma"), Tensor::full(&[d], T::one()));
        params.insert(format!("layer{layer}.ln2.beta"), Tensor::zeros(&[d]));
    }
    Ok(params)
}

/// Add a fresh classification head seeded independently of the encoder.
pub fn add_classifier_head<T: Element>(
    params: &mut ModelParams<T>,
    config: &EncoderConfig,
    head_seed: u64,
) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(head_seed, &["classifier_head"]));
    params.insert(
        "head.w",
        Tensor::randn(&[config.d_model, config.n_classes], INIT_STD, &mut rng),
    );
    params.insert("head.b", Tensor::zeros(&[config.n_classes]));
}

fn add_mlm_head<T: Element>(params: &mut ModelParams<T>, config: &EncoderConfig, head_seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(head_seed, &["mlm_head"]));
    params.insert(
        "mlm.w",
        Tensor::randn(&[config.d_model, config.vocab_size], INIT_STD, &mut rng),
    );
    params.insert("mlm.b", Tensor::zeros(&[config.vocab_size]));
}

fn check_batch<T: Element>(
    params: &ModelParams<T>,
    config: &EncoderConfig,
    seqs: &[TokenSequence],
) -> Result<()> {
    let tok = params
        .get("embed.tok")
        .ok_or_else(|| Error::InvalidConfig("missing embed.tok parameter".into()))?;
    if tok.shape() != [config.vocab_size, config.d_model] {
        return Err(Error::VocabMismatch(format!(
            "embed.tok shape {:?} does not match vocab_size {} x d_model {}",
            tok.shape(),
            config.vocab_size,
            config.d_model
        )));
    }
    for seq in seqs {
        if seq.max_len() != config.max_len {
            return Err(Error::VocabMismatch(format!(
                "sequence length {} does not match config max_len {}",
                seq.max_len(),
                config.max_len
            )));
        }
        if let Some(&bad) = seq.ids.iter().find(|&&id| id as usize >= config.vocab_size) {
            return Err(Error::VocabMismatch(format!(
                "token id {bad} out of range for vocab_size {}",
                config.vocab_size
            )));
        }
    }
    Ok(())
}

struct DropoutStream<'r> {
    rate: f64,
    rng: &'r mut ChaCha8Rng,
}

/// Parameter nodes for one forward pass.
struct Forward<'a> {
    config: &'a EncoderConfig,
    nodes: BTreeMap<String, Nid>,
}

impl<'a> Forward<'a> {
    fn insert_params<T: Element>(
        graph: &mut Graph<T>,
        params: &ModelParams<T>,
        config: &'a EncoderConfig,
        tracked: bool,
    ) -> Self {
        let mut nodes = BTreeMap::new();
        for (name, tensor) in params.iter() {
            let id = if tracked {
                graph.param(tensor.clone())
            } else {
                graph.constant(tensor.clone())
            };
            nodes.insert(name.clone(), id);
        }
        Forward { config, nodes }
    }

    fn node(&self, name: &str) -> Result<Nid> {
        self.nodes
            .get(name)
            .copied()
            .ok_or_else(|| Error::InvalidConfig(format!("missing parameter `{name}`")))
    }

    fn dropout<T: Element>(
        &self,
        graph: &mut Graph<T>,
        x: Nid,
        stream: &mut Option<DropoutStream<'_>>,
    ) -> Result<Nid> {
        let Some(stream) = stream.as_mut() else {
            return Ok(x);
        };
        if stream.rate == 0.0 {
            return Ok(x);
        }
        let shape = graph.value(x).shape().to_vec();
        let keep_scale = T::from_f64(1.0 / (1.0 - stream.rate));
        let n: usize = shape.iter().product();
        // One u32 draw per position keeps mask generation cheap.
        let threshold = (stream.rate * 4_294_967_296.0) as u64;
        let data: Vec<T> = (0..n)
            .map(|_| {
                if u64::from(stream.rng.random::<u32>()) < threshold {
                    T::zero()
                } else {
                    keep_scale
                }
            })
            .collect();
        let mask = graph.constant(Tensor::new(shape, data)?);
        graph.mul(x, mask)
    }

    /// Run the encoder stack over a trimmed batch; returns the hidden state
    /// `[B*len, d_model]`.
    fn stack<T: Element>(
        &self,
        graph: &mut Graph<T>,
        ids: &[u32],
        attn_lens: &[usize],
        len: usize,
        dropout: &mut Option<DropoutStream<'_>>,
    ) -> Result<Nid> {
        let cfg = self.config;
        let batch = attn_lens.len();
        let d = cfg.d_model;
        let heads = cfg.n_heads;
        debug_assert!(d % heads == 0);

        let tok_rows: Vec<usize> = ids.iter().map(|&id| id as usize).collect();
        let pos_rows: Vec<usize> = (0..batch).flat_map(|_| 0..len).collect();
        let tok_table = self.node("embed.tok")?;
        let pos_table = self.node("embed.pos")?;
        let tok = graph.gather_rows(tok_table, &tok_rows)?;
        let pos = graph.gather_rows(pos_table, &pos_rows)?;
        let sum = graph.add(tok, pos)?;
        let gamma = self.node("embed.ln.gamma")?;
        let beta = self.node("embed.ln.beta")?;
        let normed = graph.layer_norm(sum, gamma, beta, LN_EPS)?;
        let mut x = self.dropout(graph, normed, dropout)?;

        for layer in 0..cfg.n_layers {
            let p = |tail: &str| format!("layer{layer}.{tail}");
            let wq = self.node(&p("attn.wq"))?;
            let bq = self.node(&p("attn.bq"))?;
            let wk = self.node(&p("attn.wk"))?;
            let bk = self.node(&p("attn.bk"))?;
            let wv = self.node(&p("attn.wv"))?;
            let bv = self.node(&p("attn.bv"))?;
            let q = graph.matmul(x, wq)?;
            let q = graph.add_row_vec(q, bq)?;
            let k = graph.matmul(x, wk)?;
            let k = graph.add_row_vec(k, bk)?;
            let v = graph.matmul(x, wv)?;
            let v = graph.add_row_vec(v, bv)?;
            let ctx = graph.self_attention(q, k, v, heads, len, attn_lens)?;
            let wo = self.node(&p("attn.wo"))?;
            let bo = self.node(&p("attn.bo"))?;
            let proj = graph.matmul(ctx, wo)?;
            let proj = graph.add_row_vec(proj, bo)?;
            let proj = self.dropout(graph, proj, dropout)?;
            let res = graph.add(x, proj)?;
            let g1 = self.node(&p("ln1.gamma"))?;
            let b1n = self.node(&p("ln1.beta"))?;
            x = graph.layer_norm(res, g1, b1n, LN_EPS)?;

            let w1 = self.node(&p("ffn.w1"))?;
            let b1 = self.node(&p("ffn.b1"))?;
            let w2 = self.node(&p("ffn.w2"))?;
            let b2 = self.node(&p("ffn.b2"))?;
            let h1 = graph.matmul(x, w1)?;
            let h1 = graph.add_row_vec(h1, b1)?;
            let h1 = graph.gelu(h1);
            let h2 = graph.matmul(h1, w2)?;
            let h2 = graph.add_row_vec(h2, b2)?;
            let h2 = self.dropout(graph, h2, dropout)?;
            let res = graph.add(x, h2)?;
            let g2 = self.node(&p("ln2.gamma"))?;
            let b2n = self.node(&p("ln2.beta"))?;
            x = graph.layer_norm(res, g2, b2n, LN_EPS)?;
        }
        Ok(x)
    }
}

/// Trim a batch to its longest real sequence and flatten ids.
fn pack_batch(seqs: &[TokenSequence]) -> (Vec<u32>, Vec<usize>, usize) {
    let attn_lens: Vec<usize> = seqs.iter().map(|s| s.attention_length).collect();
    let len = attn_lens.iter().copied().max().unwrap_or(2);
    let mut ids = Vec::with_capacity(seqs.len() * len);
    for s in seqs {
        ids.extend_from_slice(&s.ids[..len]);
    }
    (ids, attn_lens, len)
}

fn classifier_logits<T: Element>(
    graph: &mut Graph<T>,
    fwd: &Forward<'_>,
    seqs: &[TokenSequence],
    dropout: &mut Option<DropoutStream<'_>>,
) -> Result<Nid> {
    let (ids, attn_lens, len) = pack_batch(seqs);
    let hidden = fwd.stack(graph, &ids, &attn_lens, len, dropout)?;
    let cls_rows: Vec<usize> = (0..seqs.len()).map(|b| b * len).collect();
    let cls = graph.gather_rows(hidden, &cls_rows)?;
    let head_w = fwd.node("head.w")?;
    let head_b = fwd.node("head.b")?;
    let logits = graph.matmul(cls, head_w)?;
    graph.add_row_vec(logits, head_b)
}

/// Pure inference: logits `[B, n_classes]` with dropout disabled.
pub fn forward<T: Element>(model: &EncoderModel<T>, seqs: &[TokenSequence]) -> Result<Tensor<T>> {
    check_batch(&model.params, &model.config, seqs)?;
    if seqs.is_empty() {
        return Ok(Tensor::zeros(&[0, model.config.n_classes]));
    }
    let mut out = Tensor::zeros(&[seqs.len(), model.config.n_classes]);
    // Chunked so memory stays bounded on large corpora; pad trimming makes
    // chunking invisible in the results.
    let chunk_size = 64;
    for (chunk_idx, chunk) in seqs.chunks(chunk_size).enumerate() {
        let mut graph = Graph::new();
        let fwd = Forward::insert_params(&mut graph, &model.params, &model.config, false);
        let logits = classifier_logits(&mut graph, &fwd, chunk, &mut None)?;
        let values = graph.value(logits);
        for i in 0..chunk.len() {
            out.row_mut(chunk_idx * chunk_size + i)
                .copy_from_slice(values.row(i));
        }
    }
    Ok(out)
}

/// Argmax with ties broken toward the lower class id (the more frequent class
/// under support-ordered labeling).
pub fn argmax_label<T: Element>(logits: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate().skip(1) {
        if v > logits[best] {
            best = i;
        }
    }
    best
}

pub fn predict<T: Element>(
    model: &EncoderModel<T>,
    seqs: &[TokenSequence],
) -> Result<(Tensor<T>, Vec<usize>)> {
    let logits = forward(model, seqs)?;
    let labels = (0..logits.rows())
        .map(|i| argmax_label(logits.row(i)))
        .collect();
    Ok((logits, labels))
}

/// Build the classifier logits node for one batch on an existing graph,
/// returning the parameter-node map for gradient collection. Shared by the
/// fine-tuning step and the distillation trainer.
pub(crate) fn batch_logits_graph<T: Element>(
    graph: &mut Graph<T>,
    params: &ModelParams<T>,
    config: &EncoderConfig,
    seqs: &[TokenSequence],
    tracked: bool,
    dropout: Option<(f64, &mut ChaCha8Rng)>,
) -> Result<(Nid, BTreeMap<String, Nid>)> {
    let mut stream = dropout.map(|(rate, rng)| DropoutStream { rate, rng });
    let fwd = Forward::insert_params(graph, params, config, tracked);
    let logits = classifier_logits(graph, &fwd, seqs, &mut stream)?;
    Ok((logits, fwd.nodes))
}

pub(crate) fn collect_grads<T: Element>(
    graph: &Graph<T>,
    nodes: &BTreeMap<String, Nid>,
) -> BTreeMap<String, Tensor<T>> {
    nodes
        .iter()
        .filter_map(|(name, &nid)| graph.grad(nid).map(|g| (name.clone(), g.clone())))
        .collect()
}

/// Classification loss and parameter gradients for one batch; the training
/// step and the gradient-check oracles share this path.
pub fn classification_grads<T: Element>(
    params: &ModelParams<T>,
    config: &EncoderConfig,
    seqs: &[TokenSequence],
    labels: &[usize],
    dropout: Option<(f64, &mut ChaCha8Rng)>,
) -> Result<(f64, BTreeMap<String, Tensor<T>>)> {
    let mut graph = Graph::new();
    let (logits, nodes) = batch_logits_graph(&mut graph, params, config, seqs, true, dropout)?;
    let loss = graph.cross_entropy(logits, labels)?;
    graph.backward(loss)?;
    let grads = collect_grads(&graph, &nodes);
    Ok((graph.value(loss).item().to_f64(), grads))
}

/// Deterministic dropout-free classification loss (finite-difference oracle
/// target).
pub fn classification_loss<T: Element>(
    params: &ModelParams<T>,
    config: &EncoderConfig,
    seqs: &[TokenSequence],
    labels: &[usize],
) -> Result<f64> {
    let mut graph = Graph::new();
    let fwd = Forward::insert_params(&mut graph, params, config, false);
    let logits = classifier_logits(&mut graph, &fwd, seqs, &mut None)?;
    let loss = graph.cross_entropy(logits, labels)?;
    Ok(graph.value(loss).item().to_f64())
}

#[derive(Debug, Clone)]
pub struct FineTuneOutcome<T: Element> {
    pub model: EncoderModel<T>,
    /// Mean training loss per epoch.
    pub loss_curve: Vec<f64>,
}

/// Fine-tune a classifier from `init` (random or MLM-pretrained encoder
/// weights). A fresh classification head seeded from the train seed is added
/// when `init` does not carry one.
pub fn fine_tune<T: Element>(
    init: &ModelParams<T>,
    config: &EncoderConfig,
    seqs: &[TokenSequence],
    labels: &[usize],
    train: &TrainConfig,
) -> Result<FineTuneOutcome<T>> {
    config.validate()?;
    if seqs.is_empty() {
        return Err(Error::EmptyInput("fine_tune on empty dataset".into()));
    }
    if seqs.len() != labels.len() {
        return Err(Error::shape("fine_tune", &[seqs.len()], &[labels.len()]));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= config.n_classes) {
        return Err(Error::LabelOutOfRange {
            label: bad,
            classes: config.n_classes,
        });
    }
    check_batch(init, config, seqs)?;
    let mut params = init.clone();
    if params.get("head.w").is_none() {
        add_classifier_head(&mut params, config, train.seed);
    }
    params.remove("mlm.w");
    params.remove("mlm.b");

    let mut adam = AdamState::new(AdamConfig::with_lr(train.learning_rate));
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(seed::derive(train.seed, &["shuffle"]));
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(seed::derive(train.seed, &["dropout"]));
    let mut order: Vec<usize> = (0..seqs.len()).collect();
    let mut loss_curve = Vec::with_capacity(train.epochs);
    for _epoch in 0..train.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for batch_ids in order.chunks(train.batch_size.max(1)) {
            let batch_seqs: Vec<TokenSequence> =
                batch_ids.iter().map(|&i| seqs[i].clone()).collect();
            let batch_labels: Vec<usize> = batch_ids.iter().map(|&i| labels[i]).collect();
            let dropout = (config.dropout > 0.0).then_some((config.dropout, &mut dropout_rng));
            let (loss, grads) =
                classification_grads(&params, config, &batch_seqs, &batch_labels, dropout)?;
            adam.step(&mut params, &grads)?;
            epoch_loss += loss;
            batches += 1;
        }
        loss_curve.push(epoch_loss / batches as f64);
    }
    Ok(FineTuneOutcome {
        model: EncoderModel {
            config: config.clone(),
            params,
        },
        loss_curve,
    })
}

#[derive(Debug, Clone)]
pub struct PretrainOutcome<T: Element> {
    /// Encoder weights only; the MLM head is discarded.
    pub params: ModelParams<T>,
    pub loss_curve: Vec<f64>,
    pub skipped_batches: usize,
}

struct MaskedBatch {
    seqs: Vec<TokenSequence>,
    /// Flat positions into the trimmed `[B*len]` hidden matrix.
    positions: Vec<usize>,
    targets: Vec<usize>,
    len: usize,
}

/// BERT-style corruption: each maskable position is selected with
/// `mask_rate`; a selected position becomes `[MASK]` 80% of the time, a
/// random non-special token 10%, and stays unchanged 10%. Returns `None`
/// when nothing was selected.
fn mask_batch(
    seqs: &[&TokenSequence],
    mask_rate: f64,
    vocab_size: usize,
    rng: &mut ChaCha8Rng,
) -> Option<MaskedBatch> {
    let len = seqs.iter().map(|s| s.attention_length).max().unwrap_or(2);
    let specials = crate::text::SPECIALS.len() as u32;
    let mut out: Vec<TokenSequence> = Vec::with_capacity(seqs.len());
    let mut positions = Vec::new();
    let mut targets = Vec::new();
    for (b, seq) in seqs.iter().enumerate() {
        let mut corrupted = TokenSequence {
            ids: seq.ids[..len].to_vec(),
            attention_length: seq.attention_length,
        };
        for j in 1..seq.attention_length.saturating_sub(1) {
            let original = seq.ids[j];
            if original == CLS || original == SEP || (original < specials && original != MASK) {
                continue;
            }
            if rng.random::<f64>() >= mask_rate {
                continue;
            }
            positions.push(b * len + j);
            targets.push(original as usize);
            let r: f64 = rng.random();
            if r < 0.8 {
                corrupted.ids[j] = MASK;
            } else if r < 0.9 {
                corrupted.ids[j] = rng.random_range(specials..vocab_size as u32);
            }
        }
        out.push(corrupted);
    }
    if positions.is_empty() {
        return None;
    }
    Some(MaskedBatch {
        seqs: out,
        positions,
        targets,
        len,
    })
}

fn mlm_loss_graph<T: Element>(
    graph: &mut Graph<T>,
    fwd: &Forward<'_>,
    batch: &MaskedBatch,
    dropout: &mut Option<DropoutStream<'_>>,
) -> Result<Nid> {
    let attn_lens: Vec<usize> = batch.seqs.iter().map(|s| s.attention_length).collect();
    let mut ids = Vec::with_capacity(batch.seqs.len() * batch.len);
    for s in &batch.seqs {
        ids.extend_from_slice(&s.ids[..batch.len]);
    }
    let hidden = fwd.stack(graph, &ids, &attn_lens, batch.len, dropout)?;
    let picked = graph.gather_rows(hidden, &batch.positions)?;
    let w = fwd.node("mlm.w")?;
    let b = fwd.node("mlm.b")?;
    let logits = graph.matmul(picked, w)?;
    let logits = graph.add_row_vec(logits, b)?;
    graph.cross_entropy(logits, &batch.targets)
}

/// Masked-token prediction loss over a corpus with a fixed masking seed and
/// no dropout; the pretraining progress oracle. Requires an MLM head.
pub fn masked_lm_loss<T: Element>(
    params: &ModelParams<T>,
    config: &EncoderConfig,
    seqs: &[TokenSequence],
    mask_seed: u64,
    batch_size: usize,
) -> Result<f64> {
    if params.get("mlm.w").is_none() {
        return Err(Error::InvalidConfig("params carry no MLM head".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(mask_seed, &["mlm_eval"]));
    let mut total = 0.0;
    let mut count = 0usize;
    for chunk in seqs.chunks(batch_size.max(1)) {
        let refs: Vec<&TokenSequence> = chunk.iter().collect();
        let Some(batch) = mask_batch(&refs, config.mlm_mask_rate, config.vocab_size, &mut rng)
        else {
            continue;
        };
        let mut graph = Graph::new();
        let fwd = Forward::insert_params(&mut graph, params, config, false);
        let loss = mlm_loss_graph(&mut graph, &fwd, &batch, &mut None)?;
        total += graph.value(loss).item().to_f64() * batch.targets.len() as f64;
        count += batch.targets.len();
    }
    if count == 0 {
        return Err(Error::EmptyInput("no maskable tokens in corpus".into()));
    }
    Ok(total / count as f64)
}

/// Masked-LM domain pretraining from scratch. Returns encoder weights (the
/// prediction head is discarded before fine-tuning). Batches that draw zero
/// maskable tokens are skipped and counted.
pub fn mlm_pretrain<T: Element>(
    corpus: &[TokenSequence],
    config: &EncoderConfig,
    pretrain: &PretrainConfig,
) -> Result<PretrainOutcome<T>> {
    config.validate()?;
    if corpus.is_empty() {
        return Err(Error::EmptyInput("mlm_pretrain on empty corpus".into()));
    }
    let mut params = init_encoder::<T>(config)?;
    add_mlm_head(&mut params, config, config.seed);
    check_batch(&params, config, corpus)?;

    let mut adam = AdamState::new(AdamConfig::with_lr(pretrain.learning_rate));
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(seed::derive(pretrain.seed, &["shuffle"]));
    let mut mask_rng = ChaCha8Rng::seed_from_u64(seed::derive(pretrain.seed, &["mask"]));
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(seed::derive(pretrain.seed, &["dropout"]));
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    let mut loss_curve = Vec::with_capacity(pretrain.epochs);
    let mut skipped = 0usize;
    for _epoch in 0..pretrain.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for batch_ids in order.chunks(pretrain.batch_size.max(1)) {
            let refs: Vec<&TokenSequence> = batch_ids.iter().map(|&i| &corpus[i]).collect();
            let Some(batch) =
                mask_batch(&refs, config.mlm_mask_rate, config.vocab_size, &mut mask_rng)
            else {
                skipped += 1;
                continue;
            };
            let mut graph = Graph::new();
            let mut stream = (config.dropout > 0.0).then_some(DropoutStream {
                rate: config.dropout,
                rng: &mut dropout_rng,
            });
            let fwd = Forward::insert_params(&mut graph, &params, config, true);
            let loss = mlm_loss_graph(&mut graph, &fwd, &batch, &mut stream)?;
            graph.backward(loss)?;
            let mut grads = BTreeMap::new();
            for (name, &nid) in &fwd.nodes {
                if let Some(g) = graph.grad(nid) {
                    grads.insert(name.clone(), g.clone());
                }
            }
            let loss_value = graph.value(loss).item().to_f64();
            drop(graph);
            adam.step(&mut params, &grads)?;
            epoch_loss += loss_value;
            batches += 1;
        }
        loss_curve.push(if batches > 0 {
            epoch_loss / batches as f64
        } else {
            f64::NAN
        });
    }
    params.remove("mlm.w");
    params.remove("mlm.b");
    Ok(PretrainOutcome {
        params,
        loss_curve,
        skipped_batches: skipped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::text::{encode_text, train_vocab, Vocab};

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

    fn sample_batch(vocab: &Vocab, max_len: usize) -> Vec<TokenSequence> {
        ["pain mass", "evaluate renal stone biopsy", "hepatic vein"]
            .iter()
            .map(|t| encode_text(t, vocab, max_len))
            .collect()
    }

    #[test]
    fn forward_shape_contract() {
        let vocab = tiny_vocab();
        let config = tiny_config(&vocab, 4);
        let mut params = init_encoder::<f32>(&config).unwrap();
        add_classifier_head(&mut params, &config, 7);
        let model = EncoderModel { config, params };
        for n in [1usize, 2, 3] {
            let seqs = sample_batch(&vocab, model.config.max_len)[..n].to_vec();
            let logits = forward(&model, &seqs).unwrap();
            assert_eq!(logits.shape(), &[n, 4]);
            assert!(logits.all_finite());
        }
    }

    #[test]
    fn batch_equivariance() {
        let vocab = tiny_vocab();
        let config = tiny_config(&vocab, 4);
        let mut params = init_encoder::<f32>(&config).unwrap();
        add_classifier_head(&mut params, &config, 7);
        let model = EncoderModel { config, params };
        let seqs = sample_batch(&vocab, model.config.max_len);
        let logits = forward(&model, &seqs).unwrap();
        let permuted: Vec<TokenSequence> =
            vec![seqs[2].clone(), seqs[0].clone(), seqs[1].clone()];
        let plogits = forward(&model, &permuted).unwrap();
        for (orig, perm) in [(0usize, 1usize), (1, 2), (2, 0)] {
            assert_eq!(logits.row(orig), plogits.row(perm));
        }
    }

    #[test]
    fn pad_invariance() {
        // Same items encoded at a longer max_len gain only trailing pads;
        // logits must not move.
        let vocab = tiny_vocab();
        let config = tiny_config(&vocab, 4);
        let mut params = init_encoder::<f32>(&config).unwrap();
        add_classifier_head(&mut params, &config, 7);
        let short = ["pain mass", "renal stone"]
            .iter()
            .map(|t| encode_text(t, &vocab, 12))
            .collect::<Vec<_>>();
        let model = EncoderModel {
            config: config.clone(),
            params: params.clone(),
        };
        let a = forward(&model, &short).unwrap();

        let mut long_config = config.clone();
        long_config.max_len = 64;
        // Grow the position table; original rows carry over so weights agree.
        let mut grown = Tensor::zeros(&[64, config.d_model]);
        let pos = params.get("embed.pos").unwrap();
        for i in 0..12 {
            grown.row_mut(i).copy_from_slice(pos.row(i));
        }
        params.insert("embed.pos", grown);
        let long = ["pain mass", "renal stone"]
            .iter()
            .map(|t| encode_text(t, &vocab, 64))
            .collect::<Vec<_>>();
        let model_long = EncoderModel {
            config: long_config,
            params,
        };
        let b = forward(&model_long, &long).unwrap();
        for i in 0..2 {
            for (x, y) in a.row(i).iter().zip(b.row(i)) {
                assert!((x - y).abs() < 1e-5, "{x} vs {y}");
            }
        }
    }

    #[test]
    fn forward_is_pure() {
        let vocab = tiny_vocab();
        let config = tiny_config(&vocab, 3);
        let mut params = init_encoder::<f32>(&config).unwrap();
        add_classifier_head(&mut params, &config, 7);
        let model = EncoderModel { config, params };
        let seqs = sample_batch(&vocab, model.config.max_len);
        let a = forward(&model, &seqs).unwrap();
        let b = forward(&model, &seqs).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn predict_argmax_and_tie_rule() {
        assert_eq!(argmax_label(&[1.0f32, 3.0, 2.0]), 1);
        assert_eq!(argmax_label(&[5.0f32, 5.0, 0.0]), 0);
    }

    #[test]
    fn prediction_shift_invariance() {
        let logits = [0.4f32, -1.0, 2.5, 2.5];
        let shifted: Vec<f32> = logits.iter().map(|x| x + 123.0).collect();
        assert_eq!(argmax_label(&logits), argmax_label(&shifted));
    }

    #[test]
    fn full_model_gradient_check() {
        // Tiny config at f64 against central finite differences.
        let vocab = tiny_vocab();
        let config = tiny_config(&vocab, 4);
        let mut params = init_encoder::<f64>(&config).unwrap();
        add_classifier_head(&mut params, &config, 7);
        let seqs = sample_batch(&vocab, config.max_len);
        let labels = vec![0usize, 2, 3];
        let (_, grads) = classification_grads(&params, &config, &seqs, &labels, None).unwrap();
        let names: Vec<String> = params.names().cloned().collect();
        let mut worst = 0.0f64;
        for name in names {
            let len = params.get(&name).unwrap().len();
            let grad = grads.get(&name).expect("gradient for every parameter").clone();
            for idx in 0..len {
                let base = params.get(&name).unwrap().as_slice()[idx];
                let h = 1e-4 * base.abs().max(1.0);
                params.get_mut(&name).unwrap().as_mut_slice()[idx] = base + h;
                let fp = classification_loss(&params, &config, &seqs, &labels).unwrap();
                params.get_mut(&name).unwrap().as_mut_slice()[idx] = base - h;
                let fm = classification_loss(&params, &config, &seqs, &labels).unwrap();
                params.get_mut(&name).unwrap().as_mut_slice()[idx] = base;
                let fd = (fp - fm) / (2.0 * h);
                let ad = grad.as_slice()[idx];
                let rel = (ad - fd).abs() / ad.abs().max(fd.abs()).max(1e-6);
                worst = worst.max(rel);
                assert!(rel < 1e-4, "{name}[{idx}]: ad={ad} fd={fd} rel={rel}");
            }
        }
        assert!(worst < 1e-4, "worst relative error {worst}");
    }

    #[test]
    fn fine_tune_zero_epochs_returns_init() {
        let vocab = tiny_vocab();
        let config = tiny_config(&vocab, 3);
        let mut init = init_encoder::<f32>(&config).unwrap();
        add_classifier_head(&mut init, &config, 7);
        let seqs = sample_batch(&vocab, config.max_len);
        let out = fine_tune(
            &init,
            &config,
            &seqs,
            &[0, 1, 2],
            &TrainConfig {
                epochs: 0,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(out.model.params, init);
        assert!(out.loss_curve.is_empty());
    }

    #[test]
    fn fine_tune_rejects_empty_and_bad_labels() {
        let vocab = tiny_vocab();
        let config = tiny_config(&vocab, 3);
        let init = init_encoder::<f32>(&config).unwrap();
        assert!(fine_tune(&init, &config, &[], &[], &TrainConfig::default()).is_err());
        let seqs = sample_batch(&vocab, config.max_len);
        assert!(fine_tune(&init, &config, &seqs, &[0, 1, 3], &TrainConfig::default()).is_err());
    }

    #[test]
    fn fine_tune_is_deterministic() {
        let vocab = tiny_vocab();
        let mut config = tiny_config(&vocab, 3);
        config.dropout = 0.1;
        let init = init_encoder::<f32>(&config).unwrap();
        let seqs = sample_batch(&vocab, config.max_len);
        let tc = TrainConfig {
            epochs: 2,
            batch_size: 2,
            learning_rate: 1e-3,
            seed: 5,
        };
        let a = fine_tune(&init, &config, &seqs, &[0, 1, 2], &tc).unwrap();
        let b = fine_tune(&init, &config, &seqs, &[0, 1, 2], &tc).unwrap();
        assert_eq!(a.model.params, b.model.params);
        assert_eq!(a.loss_curve, b.loss_curve);
    }

    #[test]
    fn mlm_zero_rate_skips_everything() {
        let vocab = tiny_vocab();
        let mut config = tiny_config(&vocab, 3);
        config.mlm_mask_rate = 0.0;
        let corpus = sample_batch(&vocab, config.max_len);
        let out = mlm_pretrain::<f32>(
            &corpus,
            &config,
            &PretrainConfig {
                epochs: 2,
                batch_size: 2,
                learning_rate: 1e-3,
                seed: 1,
            },
        )
        .unwrap();
        assert_eq!(out.skipped_batches, 4);
        assert!(out.loss_curve.iter().all(|l| l.is_nan()));
        // Params unchanged from a fresh init.
        let fresh = init_encoder::<f32>(&config).unwrap();
        assert_eq!(out.params, fresh);
    }

    #[test]
    fn mlm_pretraining_is_deterministic() {
        let vocab = tiny_vocab();
        let config = tiny_config(&vocab, 3);
        let corpus = sample_batch(&vocab, config.max_len);
        let pc = PretrainConfig {
            epochs: 2,
            batch_size: 2,
            learning_rate: 1e-3,
            seed: 3,
        };
        let a = mlm_pretrain::<f32>(&corpus, &config, &pc).unwrap();
        let b = mlm_pretrain::<f32>(&corpus, &config, &pc).unwrap();
        assert_eq!(a.params, b.params);
        // Curves may contain NaN epochs (every batch skipped); compare bits.
        let bits = |c: &[f64]| c.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a.loss_curve), bits(&b.loss_curve));
        assert_eq!(a.skipped_batches, b.skipped_batches);
    }
}
