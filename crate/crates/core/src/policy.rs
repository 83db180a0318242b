//! Toy autoregressive policy over a small symbol vocabulary, trained by
//! supervised fine-tuning and then sequence-level clipped policy
//! optimization with group-standardized advantages.
//!
//! The policy is a linear softmax over context features: one-hot encodings
//! of the last two emitted symbols plus a fixed encoding of the task. The
//! task encoding includes per-class dot products between the query vector
//! and the centroid of historical queries the user answered with that
//! class; those products are the channel that lets a linear readout
//! recover a user's private labeling rule.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Once;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hashing::{fnv1a, fnv1a_extend};
use crate::prmu::{prmu_reward, PrmuInput, PrmuModel};
use crate::reward::{FormatConfig, RewardContext, TaskKind};
use crate::synth::{oracle_respond, render_response, EnvConfig, SynthEnv, TaskInstance};
use crate::tag_grammar::TagRegistry;
use crate::text_metrics::tokenize;

pub const POLICY_CHECKPOINT_VERSION: u32 = 1;

/// Conditional mean of a standard normal within each query-text bucket.
/// The bucket edges are the octiles of N(0, 1), so these are the octile
/// conditional means.
const BUCKET_CENTERS: [f64; 8] =
    [-1.6476, -0.9022, -0.4824, -0.1593, 0.1593, 0.4824, 0.9022, 1.6476];

const PROFILE_HASH_DIM: usize = 16;
const QUERY_HASH_DIM: usize = 8;

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("token {0:?} is outside the policy vocabulary")]
    OutOfVocabulary(String),
    #[error("empty batch")]
    EmptyBatch,
    #[error("the guided stage requires a trained preference model")]
    MissingPreferenceModel,
    #[error("training produced a non-finite parameter")]
    NonFinite,
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),
    #[error("i/o failure: {0}")]
    Io(#[from] std::io::Error),
    #[error("serialization failure: {0}")]
    Serde(#[from] serde_json::Error),
}

/// One emission step. `End` renders as nothing and terminates sampling.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Symbol {
    ThinkOpen,
    ThinkClose,
    TagOpen(usize),
    TagClose(usize),
    Content(usize),
    Label(usize),
    End,
}

/// Closed symbol set: reasoning markers, tag markers for every registry
/// name, content words, class labels, and the end symbol.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Vocab {
    tags: Vec<String>,
    words: usize,
    classes: usize,
    think_open: String,
    think_close: String,
}

impl Vocab {
    pub fn new(
        registry: &TagRegistry,
        fmt: &FormatConfig,
        words: usize,
        classes: usize,
    ) -> Result<Self, PolicyError> {
        if words == 0 || classes == 0 {
            return Err(PolicyError::InvalidConfig(
                "vocabulary needs at least one content word and one label".to_string(),
            ));
        }
        Ok(Self {
            tags: registry.names().to_vec(),
            words,
            classes,
            think_open: fmt.think_open.clone(),
            think_close: fmt.think_close.clone(),
        })
    }

    pub fn for_env(
        registry: &TagRegistry,
        fmt: &FormatConfig,
        config: &EnvConfig,
    ) -> Result<Self, PolicyError> {
        Self::new(registry, fmt, config.num_content_words, config.num_classes)
    }

    pub fn size(&self) -> usize {
        2 + 2 * self.tags.len() + self.words + self.classes + 1
    }

    pub fn end_index(&self) -> usize {
        self.size() - 1
    }

    pub fn index(&self, sym: Symbol) -> usize {
        let t = self.tags.len();
        match sym {
            Symbol::ThinkOpen => 0,
            Symbol::ThinkClose => 1,
            Symbol::TagOpen(i) => 2 + i,
            Symbol::TagClose(i) => 2 + t + i,
            Symbol::Content(i) => 2 + 2 * t + i,
            Symbol::Label(j) => 2 + 2 * t + self.words + j,
            Symbol::End => self.end_index(),
        }
    }

    pub fn symbol(&self, index: usize) -> Symbol {
        let t = self.tags.len();
        if index == 0 {
            Symbol::ThinkOpen
        } else if index == 1 {
            Symbol::ThinkClose
        } else if index < 2 + t {
            Symbol::TagOpen(index - 2)
        } else if index < 2 + 2 * t {
            Symbol::TagClose(index - 2 - t)
        } else if index < 2 + 2 * t + self.words {
            Symbol::Content(index - 2 - 2 * t)
        } else if index < 2 + 2 * t + self.words + self.classes {
            Symbol::Label(index - 2 - 2 * t - self.words)
        } else {
            Symbol::End
        }
    }

    pub fn render(&self, sym: Symbol) -> String {
        match sym {
            Symbol::ThinkOpen => self.think_open.clone(),
            Symbol::ThinkClose => self.think_close.clone(),
            Symbol::TagOpen(i) => format!("<{}>", self.tags[i]),
            Symbol::TagClose(i) => format!("</{}>", self.tags[i]),
            Symbol::Content(i) => format!("w{i}"),
            Symbol::Label(j) => j.to_string(),
            Symbol::End => String::new(),
        }
    }

    /// Space-joined rendering; the end symbol contributes nothing.
    pub fn render_sequence(&self, symbols: &[Symbol]) -> String {
        symbols
            .iter()
            .filter(|s| !matches!(s, Symbol::End))
            .map(|s| self.render(*s))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// Inverse of `render_sequence` on whitespace-separated tokens. Any
    /// token outside the closed vocabulary is an error.
    pub fn tokenize(&self, text: &str) -> Result<Vec<Symbol>, PolicyError> {
        let mut out = Vec::new();
        for tok in text.split_whitespace() {
            out.push(self.token_symbol(tok)?);
        }
        Ok(out)
    }

    fn token_symbol(&self, tok: &str) -> Result<Symbol, PolicyError> {
        let oov = || PolicyError::OutOfVocabulary(tok.to_string());
        if tok == self.think_open {
            return Ok(Symbol::ThinkOpen);
        }
        if tok == self.think_close {
            return Ok(Symbol::ThinkClose);
        }
        if let Some(name) = tok.strip_prefix("</").and_then(|r| r.strip_suffix('>')) {
            let i = self.tags.iter().position(|t| t == name).ok_or_else(oov)?;
            return Ok(Symbol::TagClose(i));
        }
        if let Some(name) = tok.strip_prefix('<').and_then(|r| r.strip_suffix('>')) {
            let i = self.tags.iter().position(|t| t == name).ok_or_else(oov)?;
            return Ok(Symbol::TagOpen(i));
        }
        if let Ok(j) = tok.parse::<usize>() {
            if j < self.classes {
                return Ok(Symbol::Label(j));
            }
            return Err(oov());
        }
        if let Some(idx) = tok.strip_prefix('w').and_then(|r| r.parse::<usize>().ok()) {
            if idx < self.words {
                return Ok(Symbol::Content(idx));
            }
        }
        Err(oov())
    }
}

/// Maps a task to the static half of the context features. The prefix half
/// is appended per step by [`PromptFeatures::context`].
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureExtractor {
    query_dim: usize,
    classes: usize,
    words: usize,
    vocab_size: usize,
}

impl FeatureExtractor {
    pub fn new(config: &EnvConfig, vocab: &Vocab) -> Self {
        Self {
            query_dim: config.feature_dim,
            classes: vocab.classes,
            words: vocab.words,
            vocab_size: vocab.size(),
        }
    }

    fn static_len(&self) -> usize {
        2 + self.query_dim + self.classes + self.words + PROFILE_HASH_DIM + QUERY_HASH_DIM + 1
    }

    pub fn feature_dim(&self) -> usize {
        2 * (self.vocab_size + 1) + self.static_len()
    }

    pub fn encode(&self, task: &TaskInstance) -> PromptFeatures {
        let mut s = Vec::with_capacity(self.static_len());
        match task.kind {
            TaskKind::Classification => s.extend([1.0, 0.0]),
            TaskKind::Generation => s.extend([0.0, 1.0]),
        }
        s.extend(task.query_features.iter().copied());
        s.extend(self.centroid_dots(task));
        s.extend(self.style_histogram(task));
        s.extend(hashed_bag(&profile_text(task), PROFILE_HASH_DIM));
        s.extend(hashed_bag(&task.query_text, QUERY_HASH_DIM));
        s.push(1.0);
        debug_assert_eq!(s.len(), self.static_len());
        PromptFeatures { static_part: s, vocab_size: self.vocab_size }
    }

    /// Per class, the dot product between the query and the mean of the
    /// approximate feature vectors of profile queries answered with that
    /// label. Zero for classes absent from the profile.
    fn centroid_dots(&self, task: &TaskInstance) -> Vec<f64> {
        let mut sums = vec![vec![0.0; self.query_dim]; self.classes];
        let mut counts = vec![0usize; self.classes];
        for item in &task.profile {
            let Some(label) = parse_label(&item.response, self.classes) else {
                continue;
            };
            let approx = approx_query_features(&item.query, self.query_dim);
            for (acc, v) in sums[label].iter_mut().zip(&approx) {
                *acc += v;
            }
            counts[label] += 1;
        }
        (0..self.classes)
            .map(|c| {
                if counts[c] == 0 {
                    return 0.0;
                }
                let scale = 1.0 / counts[c] as f64;
                sums[c]
                    .iter()
                    .zip(&task.query_features)
                    .map(|(s, x)| s * scale * x)
                    .sum()
            })
            .collect()
    }

    /// Normalized counts of content words across profile responses.
    fn style_histogram(&self, task: &TaskInstance) -> Vec<f64> {
        let mut hist = vec![0.0; self.words];
        let mut total = 0.0;
        for item in &task.profile {
            for tok in item.response.split_whitespace() {
                if let Some(idx) = tok.strip_prefix('w').and_then(|r| r.parse::<usize>().ok()) {
                    if idx < self.words {
                        hist[idx] += 1.0;
                        total += 1.0;
                    }
                }
            }
        }
        if total > 0.0 {
            for v in &mut hist {
                *v /= total;
            }
        }
        hist
    }
}

fn parse_label(response: &str, classes: usize) -> Option<usize> {
    response.trim().parse::<usize>().ok().filter(|&c| c < classes)
}

/// Recovers an approximate query vector from the bucketed query text.
fn approx_query_features(query_text: &str, dim: usize) -> Vec<f64> {
    let mut v = vec![0.0; dim];
    for tok in query_text.split_whitespace() {
        let Some(rest) = tok.strip_prefix('f') else { continue };
        let Some((i, b)) = rest.split_once('b') else { continue };
        if let (Ok(i), Ok(b)) = (i.parse::<usize>(), b.parse::<usize>()) {
            if i < dim && b < BUCKET_CENTERS.len() {
                v[i] = BUCKET_CENTERS[b];
            }
        }
    }
    v
}

fn profile_text(task: &TaskInstance) -> String {
    let mut out = String::new();
    for item in &task.profile {
        out.push_str(&item.query);
        out.push(' ');
        out.push_str(&item.response);
        out.push(' ');
    }
    out
}

/// L2-normalized hashed bag of tokens.
fn hashed_bag(text: &str, dim: usize) -> Vec<f64> {
    let mut v = vec![0.0; dim];
    for tok in tokenize(text).tokens() {
        v[(fnv1a(tok.as_bytes()) % dim as u64) as usize] += 1.0;
    }
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        for x in &mut v {
            *x /= norm;
        }
    }
    v
}

/// Static task features; combined with the last two prefix symbols to form
/// the per-step context vector.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptFeatures {
    static_part: Vec<f64>,
    vocab_size: usize,
}

impl PromptFeatures {
    pub fn context(&self, prefix: &[Symbol], vocab: &Vocab) -> Vec<f64> {
        debug_assert_eq!(vocab.size(), self.vocab_size);
        let slot = self.vocab_size + 1;
        let mut feats = vec![0.0; 2 * slot + self.static_part.len()];
        let last = prefix.last().map_or(self.vocab_size, |s| vocab.index(*s));
        feats[last] = 1.0;
        let prev = if prefix.len() >= 2 {
            vocab.index(prefix[prefix.len() - 2])
        } else {
            self.vocab_size
        };
        feats[slot + prev] = 1.0;
        feats[2 * slot..].copy_from_slice(&self.static_part);
        feats
    }
}

/// Linear softmax policy: one weight row per vocabulary symbol.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyModel {
    pub vocab: Vocab,
    pub feature_dim: usize,
    pub weights: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct PolicyCheckpoint {
    version: u32,
    model: PolicyModel,
}

impl PolicyModel {
    /// Zero weights give the uniform distribution at every step.
    pub fn new(vocab: Vocab, feature_dim: usize) -> Self {
        let weights = vec![0.0; vocab.size() * feature_dim];
        Self { vocab, feature_dim, weights }
    }

    pub fn logits(&self, feats: &[f64]) -> Vec<f64> {
        debug_assert_eq!(feats.len(), self.feature_dim);
        (0..self.vocab.size())
            .map(|v| {
                let row = &self.weights[v * self.feature_dim..(v + 1) * self.feature_dim];
                row.iter().zip(feats).map(|(w, f)| w * f).sum()
            })
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<(), PolicyError> {
        let checkpoint =
            PolicyCheckpoint { version: POLICY_CHECKPOINT_VERSION, model: self.clone() };
        std::fs::write(path, serde_json::to_string_pretty(&checkpoint)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, PolicyError> {
        let checkpoint: PolicyCheckpoint =
            serde_json::from_str(&std::fs::read_to_string(path)?)?;
        if checkpoint.version != POLICY_CHECKPOINT_VERSION {
            return Err(PolicyError::UnsupportedVersion(checkpoint.version));
        }
        Ok(checkpoint.model)
    }

    fn check_finite(&self) -> Result<(), PolicyError> {
        if self.weights.iter().all(|w| w.is_finite()) {
            Ok(())
        } else {
            Err(PolicyError::NonFinite)
        }
    }
}

fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    logits.iter().map(|l| l - lse).collect()
}

fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// One sampled sequence with its log-likelihood under the sampling policy.
#[derive(Debug, Clone, PartialEq)]
pub struct Rollout {
    pub symbols: Vec<Symbol>,
    pub logprob_old: f64,
    pub rendered: String,
}

/// Optimization settings for the clipped policy-gradient stages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GspoConfig {
    pub group_size: usize,
    pub eps_low: f64,
    pub eps_high: f64,
    pub temperature: f64,
    pub top_p: f64,
    pub lr: f64,
    pub epochs: usize,
    pub batches_per_epoch: usize,
    pub batch_size: usize,
    pub max_len: usize,
    pub eps_std: f64,
}

impl Default for GspoConfig {
    fn default() -> Self {
        Self {
            group_size: 5,
            eps_low: 0.0003,
            eps_high: 0.0004,
            temperature: 1.0,
            top_p: 1.0,
            lr: 0.05,
            epochs: 2,
            batches_per_epoch: 8,
            batch_size: 16,
            max_len: 24,
            eps_std: 1e-8,
        }
    }
}

impl GspoConfig {
    pub fn validate(&self) -> Result<(), PolicyError> {
        let bad = |msg: &str| Err(PolicyError::InvalidConfig(msg.to_string()));
        if self.group_size < 2 {
            return bad("group_size must be at least 2");
        }
        if !(self.eps_low > 0.0 && self.eps_low < 1.0 && self.eps_high > 0.0 && self.eps_high < 1.0)
        {
            return bad("clip ratios must lie strictly between 0 and 1");
        }
        if self.temperature < 0.0 || !self.temperature.is_finite() {
            return bad("temperature must be finite and non-negative");
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return bad("top_p must lie in (0, 1]");
        }
        if self.max_len == 0 || self.batch_size == 0 {
            return bad("max_len and batch_size must be positive");
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return bad("lr must be finite and non-negative");
        }
        if self.eps_std <= 0.0 {
            return bad("eps_std must be positive");
        }
        Ok(())
    }
}

static TOP_P_WARNING: Once = Once::new();

/// Samples one sequence. The stored log-likelihood always refers to the
/// untempered, untruncated policy distribution, so it matches
/// [`sequence_logprob`] whenever `top_p` is 1.0; with nucleus truncation
/// the sampler and the stored likelihood diverge and a warning is logged.
pub fn sample_sequence(
    model: &PolicyModel,
    prompt: &PromptFeatures,
    cfg: &GspoConfig,
    rng: &mut ChaCha8Rng,
) -> Rollout {
    if cfg.top_p < 1.0 {
        TOP_P_WARNING.call_once(|| {
            log::warn!(
                "top_p < 1.0 truncates sampling only; stored log-likelihoods \
                 use the full distribution"
            );
        });
    }
    let end = model.vocab.end_index();
    let mut symbols: Vec<Symbol> = Vec::new();
    let mut logprob = 0.0;
    while symbols.len() < cfg.max_len {
        let feats = prompt.context(&symbols, &model.vocab);
        let logits = model.logits(&feats);
        let idx = if cfg.temperature <= 0.0 {
            argmax(&logits)
        } else {
            sample_index(&logits, cfg.temperature, cfg.top_p, rng)
        };
        logprob += log_softmax(&logits)[idx];
        symbols.push(model.vocab.symbol(idx));
        if idx == end {
            break;
        }
    }
    let rendered = model.vocab.render_sequence(&symbols);
    Rollout { symbols, logprob_old: logprob, rendered }
}

/// Greedy decode: the zero-temperature limit of [`sample_sequence`].
pub fn greedy_sequence(model: &PolicyModel, prompt: &PromptFeatures, max_len: usize) -> Rollout {
    let cfg = GspoConfig { temperature: 0.0, max_len, ..GspoConfig::default() };
    sample_sequence(model, prompt, &cfg, &mut ChaCha8Rng::seed_from_u64(0))
}

fn sample_index(logits: &[f64], temperature: f64, top_p: f64, rng: &mut ChaCha8Rng) -> usize {
    let scaled: Vec<f64> = logits.iter().map(|l| l / temperature).collect();
    let log_probs = log_softmax(&scaled);
    let probs: Vec<f64> = log_probs.iter().map(|lp| lp.exp()).collect();
    let mut order: Vec<usize> = (0..probs.len()).collect();
    if top_p < 1.0 {
        order.sort_by(|&a, &b| probs[b].partial_cmp(&probs[a]).unwrap().then(a.cmp(&b)));
        let mut kept = 0;
        let mut cum = 0.0;
        for &i in &order {
            kept += 1;
            cum += probs[i];
            if cum >= top_p {
                break;
            }
        }
        order.truncate(kept);
    }
    let total: f64 = order.iter().map(|&i| probs[i]).sum();
    let mut u = rng.random::<f64>() * total;
    for &i in &order {
        u -= probs[i];
        if u <= 0.0 {
            return i;
        }
    }
    *order.last().expect("non-empty vocabulary")
}

/// Total log-likelihood of a symbol sequence under the model; 0 for the
/// empty sequence.
pub fn sequence_logprob(model: &PolicyModel, prompt: &PromptFeatures, symbols: &[Symbol]) -> f64 {
    let mut total = 0.0;
    for t in 0..symbols.len() {
        let feats = prompt.context(&symbols[..t], &model.vocab);
        let log_probs = log_softmax(&model.logits(&feats));
        total += log_probs[model.vocab.index(symbols[t])];
    }
    total
}

/// Adds `scale` times the gradient of the sequence log-likelihood to
/// `grad` and returns the log-likelihood itself.
fn logprob_and_grad_into(
    model: &PolicyModel,
    prompt: &PromptFeatures,
    symbols: &[Symbol],
    scale: f64,
    grad: &mut [f64],
) -> f64 {
    let dim = model.feature_dim;
    let mut total = 0.0;
    for t in 0..symbols.len() {
        let feats = prompt.context(&symbols[..t], &model.vocab);
        let log_probs = log_softmax(&model.logits(&feats));
        let target = model.vocab.index(symbols[t]);
        total += log_probs[target];
        for (v, lp) in log_probs.iter().enumerate() {
            let indicator = if v == target { 1.0 } else { 0.0 };
            let coef = scale * (indicator - lp.exp());
            let row = &mut grad[v * dim..(v + 1) * dim];
            for (g, f) in row.iter_mut().zip(&feats) {
                *g += coef * f;
            }
        }
    }
    total
}

/// Gradient of the sequence log-likelihood with respect to the weights.
pub fn sequence_logprob_grad(
    model: &PolicyModel,
    prompt: &PromptFeatures,
    symbols: &[Symbol],
) -> Vec<f64> {
    let mut grad = vec![0.0; model.weights.len()];
    logprob_and_grad_into(model, prompt, symbols, 1.0, &mut grad);
    grad
}

/// One supervised example: a task encoding and the target symbol sequence
/// (terminated by the end symbol).
#[derive(Debug, Clone, PartialEq)]
pub struct SftExample {
    pub features: PromptFeatures,
    pub target: Vec<Symbol>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SftConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for SftConfig {
    fn default() -> Self {
        Self { lr: 0.1, epochs: 30, batch_size: 32, seed: 11 }
    }
}

/// Mean sequence negative log-likelihood and its gradient.
pub fn sft_loss_and_grad(
    model: &PolicyModel,
    examples: &[&SftExample],
) -> Result<(f64, Vec<f64>), PolicyError> {
    if examples.is_empty() {
        return Err(PolicyError::EmptyBatch);
    }
    let n = examples.len() as f64;
    let mut grad = vec![0.0; model.weights.len()];
    let mut loss = 0.0;
    for ex in examples {
        let lp = logprob_and_grad_into(model, &ex.features, &ex.target, -1.0 / n, &mut grad);
        loss -= lp / n;
    }
    Ok((loss, grad))
}

/// One gradient-descent step; returns the pre-update loss.
pub fn sft_step(
    model: &mut PolicyModel,
    examples: &[&SftExample],
    lr: f64,
) -> Result<f64, PolicyError> {
    let (loss, grad) = sft_loss_and_grad(model, examples)?;
    for (w, g) in model.weights.iter_mut().zip(&grad) {
        *w -= lr * g;
    }
    model.check_finite()?;
    Ok(loss)
}

/// Epochs of shuffled minibatch descent; returns the per-epoch mean of
/// pre-update batch losses.
pub fn train_sft(
    model: &mut PolicyModel,
    examples: &[SftExample],
    cfg: &SftConfig,
) -> Result<Vec<f64>, PolicyError> {
    if cfg.epochs > 0 && examples.is_empty() {
        return Err(PolicyError::EmptyBatch);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut curve = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            let batch: Vec<&SftExample> = chunk.iter().map(|&i| &examples[i]).collect();
            epoch_loss += sft_step(model, &batch, cfg.lr)?;
            batches += 1;
        }
        curve.push(epoch_loss / batches as f64);
    }
    Ok(curve)
}

/// Builds supervised targets by rendering oracle responses for freshly
/// sampled tasks.
pub fn build_sft_dataset(
    env: &SynthEnv,
    registry: &TagRegistry,
    fmt: &FormatConfig,
    extractor: &FeatureExtractor,
    vocab: &Vocab,
    n: usize,
    seed: u64,
) -> Result<Vec<SftExample>, PolicyError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tasks = env.sample_tasks(n, "sft", &mut rng);
    tasks
        .iter()
        .map(|task| {
            let response = oracle_respond(env, task, registry, true);
            let mut target = vocab.tokenize(&render_response(&response, fmt))?;
            target.push(Symbol::End);
            Ok(SftExample { features: extractor.encode(task), target })
        })
        .collect()
}

/// Group-standardized advantages: zero mean and unit population standard
/// deviation, or all zeros when the rewards are (nearly) constant.
pub fn standardize_advantages(rewards: &[f64], eps_std: f64) -> Vec<f64> {
    debug_assert!(rewards.len() >= 2);
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let var = rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    if std < eps_std {
        return vec![0.0; rewards.len()];
    }
    rewards.iter().map(|r| (r - mean) / std).collect()
}

/// Length-normalized sequence likelihood ratio between the current and the
/// sampling-time parameters.
pub fn gspo_ratio(
    model: &PolicyModel,
    model_old: &PolicyModel,
    prompt: &PromptFeatures,
    symbols: &[Symbol],
) -> f64 {
    debug_assert!(!symbols.is_empty());
    let len = symbols.len().max(1) as f64;
    let gap = sequence_logprob(model, prompt, symbols) - sequence_logprob(model_old, prompt, symbols);
    (gap / len).exp()
}

/// The clipped surrogate for one sequence: the smaller of the raw and the
/// ratio-clamped advantage-weighted terms.
pub fn gspo_term(ratio: f64, advantage: f64, cfg: &GspoConfig) -> f64 {
    let clipped = ratio.clamp(1.0 - cfg.eps_low, 1.0 + cfg.eps_high);
    f64::min(ratio * advantage, clipped * advantage)
}

/// The sampled responses for one prompt together with their standardized
/// advantages.
#[derive(Debug, Clone)]
pub struct RolloutGroup {
    pub prompt: PromptFeatures,
    pub rollouts: Vec<Rollout>,
    pub advantages: Vec<f64>,
}

/// Objective (to be maximized) and its gradient. The gradient follows the
/// branch the min selects: clamped-and-clipped terms contribute no
/// gradient because the clamp is constant there.
pub fn gspo_objective_and_grad(
    model: &PolicyModel,
    model_old: &PolicyModel,
    groups: &[RolloutGroup],
    cfg: &GspoConfig,
) -> Result<(f64, Vec<f64>), PolicyError> {
    if groups.is_empty() {
        return Err(PolicyError::EmptyBatch);
    }
    let mut grad = vec![0.0; model.weights.len()];
    let mut objective = 0.0;
    let group_weight = 1.0 / groups.len() as f64;
    for group in groups {
        debug_assert_eq!(group.rollouts.len(), group.advantages.len());
        let member_weight = group_weight / group.rollouts.len() as f64;
        for (rollout, &adv) in group.rollouts.iter().zip(&group.advantages) {
            let len = rollout.symbols.len().max(1) as f64;
            let ratio = gspo_ratio(model, model_old, &group.prompt, &rollout.symbols);
            let clipped = ratio.clamp(1.0 - cfg.eps_low, 1.0 + cfg.eps_high);
            if ratio * adv <= clipped * adv {
                objective += member_weight * ratio * adv;
                if adv != 0.0 {
                    logprob_and_grad_into(
                        model,
                        &group.prompt,
                        &rollout.symbols,
                        member_weight * adv * ratio / len,
                        &mut grad,
                    );
                }
            } else {
                objective += member_weight * clipped * adv;
            }
        }
    }
    Ok((objective, grad))
}

/// Which reward drives a reinforcement stage: the full composite signal or
/// the correctness-only foundation signal.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RlStage {
    Guided,
    Exploratory,
}

impl RlStage {
    pub fn label(self) -> &'static str {
        match self {
            RlStage::Guided => "guided",
            RlStage::Exploratory => "exploratory",
        }
    }
}

/// One metrics row per optimizer batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RlMetricsRow {
    pub stage: String,
    pub epoch: usize,
    pub batch: usize,
    pub mean_reward: f64,
    pub tag_compliance: f64,
    pub mean_len: f64,
    pub objective: f64,
}

fn stream_seed(seed: u64, parts: &[u64]) -> u64 {
    let mut h = fnv1a(&seed.to_le_bytes());
    for p in parts {
        h = fnv1a_extend(h, &p.to_le_bytes());
    }
    h
}

/// Reinforcement stage: per batch, sample a rollout group for each prompt
/// under frozen parameters, score with the stage reward, then take one
/// clipped policy-gradient step. The frozen snapshot refreshes every
/// batch, so ratios sit at 1 when each update is taken.
#[allow(clippy::too_many_arguments)]
pub fn train_rl_stage(
    model: &mut PolicyModel,
    extractor: &FeatureExtractor,
    env: &SynthEnv,
    stage: RlStage,
    reward_ctx: &RewardContext,
    prmu: Option<&PrmuModel>,
    cfg: &GspoConfig,
    seed: u64,
) -> Result<Vec<RlMetricsRow>, PolicyError> {
    cfg.validate()?;
    if extractor.feature_dim() != model.feature_dim {
        return Err(PolicyError::InvalidConfig(
            "feature extractor dimension does not match the model".to_string(),
        ));
    }
    if matches!(stage, RlStage::Guided) && prmu.is_none() {
        return Err(PolicyError::MissingPreferenceModel);
    }
    let mut rows = Vec::with_capacity(cfg.epochs * cfg.batches_per_epoch);
    for epoch in 0..cfg.epochs {
        for batch in 0..cfg.batches_per_epoch {
            let mut task_rng = ChaCha8Rng::seed_from_u64(stream_seed(
                seed,
                &[epoch as u64, batch as u64],
            ));
            let prefix = format!("{}-e{epoch}b{batch}-", stage.label());
            let tasks = env.sample_tasks(cfg.batch_size, &prefix, &mut task_rng);
            let model_old = model.clone();
            // Per-rollout RNG streams are derived from the indices, so the
            // parallel schedule cannot change the sample.
            let sampled: Vec<(usize, Vec<Rollout>)> = tasks
                .par_iter()
                .enumerate()
                .map(|(pi, task)| {
                    let prompt = extractor.encode(task);
                    let rollouts = (0..cfg.group_size)
                        .map(|ri| {
                            let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(
                                seed,
                                &[epoch as u64, batch as u64, pi as u64, ri as u64],
                            ));
                            sample_sequence(&model_old, &prompt, cfg, &mut rng)
                        })
                        .collect();
                    (pi, rollouts)
                })
                .collect();

            let mut groups = Vec::with_capacity(tasks.len());
            let mut reward_sum = 0.0;
            let mut compliant = 0usize;
            let mut len_sum = 0usize;
            let mut scored = 0usize;
            for (pi, rollouts) in sampled {
                let task = &tasks[pi];
                let prompt = extractor.encode(task);
                let rewards: Vec<f64> = rollouts
                    .iter()
                    .map(|rollout| {
                        let (chain, answer) = reward_ctx.extract(&rollout.rendered);
                        let r_prmu = match (stage, prmu) {
                            (RlStage::Guided, Some(p)) => prmu_reward(
                                p,
                                &PrmuInput {
                                    user_id: &task.user_id,
                                    query: &task.query_text,
                                    profile: &task.profile,
                                    chain: &chain,
                                    answer: &answer,
                                },
                            ),
                            _ => 0.5,
                        };
                        let breakdown =
                            reward_ctx.score_response(&rollout.rendered, &task.gold, task.kind, r_prmu);
                        if breakdown.r_tag == 0.0 {
                            compliant += 1;
                        }
                        len_sum += rollout.symbols.len();
                        scored += 1;
                        match stage {
                            RlStage::Guided => breakdown.composite,
                            RlStage::Exploratory => breakdown.foundation,
                        }
                    })
                    .collect();
                reward_sum += rewards.iter().sum::<f64>();
                let advantages = standardize_advantages(&rewards, cfg.eps_std);
                groups.push(RolloutGroup { prompt, rollouts, advantages });
            }

            let (objective, grad) = gspo_objective_and_grad(model, &model_old, &groups, cfg)?;
            for (w, g) in model.weights.iter_mut().zip(&grad) {
                *w += cfg.lr * g;
            }
            model.check_finite()?;
            rows.push(RlMetricsRow {
                stage: stage.label().to_string(),
                epoch,
                batch,
                mean_reward: reward_sum / scored as f64,
                tag_compliance: compliant as f64 / scored as f64,
                mean_len: len_sum as f64 / scored as f64,
                objective,
            });
        }
    }
    Ok(rows)
}

/// Frequency of each emitted tag-open symbol across rollouts; useful for
/// eval reports.
pub fn tag_open_histogram(rollouts: &[Rollout], vocab: &Vocab) -> BTreeMap<String, usize> {
    let mut hist = BTreeMap::new();
    for rollout in rollouts {
        for sym in &rollout.symbols {
            if let Symbol::TagOpen(i) = sym {
                *hist.entry(vocab.tags[*i].clone()).or_insert(0) += 1;
            }
        }
    }
    hist
}
