//! Personalization reward model: hashed bag-of-token features, additive
//! per-user embeddings, a pairwise preference loss with analytic gradients,
//! and builders for the two synthetic preference datasets.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hashing::fnv1a;
use crate::reward::{verifiable_reward, TaskKind};
use crate::synth::{ProfileItem, Response, SynthEnv, TaskInstance};
use crate::text_metrics::tokenize;

/// Default feature dimensionality.
pub const DEFAULT_FEATURE_DIM: usize = 512;

const CHECKPOINT_VERSION: u32 = 1;

/// Errors raised by preference-model operations.
#[derive(Debug, Error)]
pub enum PrmuError {
    #[error("preference batch is empty")]
    EmptyBatch,
    #[error("generator produced no usable pair after {0} attempts")]
    GeneratorStalled(usize),
    #[error("checkpoint version {0} is not supported")]
    UnsupportedVersion(u32),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Serde(#[from] serde_json::Error),
}

/// Hashed bag-of-tokens feature vector, L2-normalized when nonzero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub values: Vec<f64>,
}

impl FeatureVector {
    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn dot(&self, other: &[f64]) -> f64 {
        self.values.iter().zip(other).map(|(a, b)| a * b).sum()
    }

    pub fn l2_norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Everything the model scores: who is asking, what was asked, the visible
/// profile, and the response under evaluation.
#[derive(Debug, Clone, Copy)]
pub struct PrmuInput<'a> {
    pub user_id: &'a str,
    pub query: &'a str,
    pub profile: &'a [ProfileItem],
    pub chain: &'a str,
    pub answer: &'a str,
}

/// Raw bucket counts before normalization. The user id does not enter the
/// hash; user identity acts only through the embedding table.
fn featurize_counts(input: &PrmuInput, dim: usize) -> Vec<f64> {
    let mut counts = vec![0.0; dim];
    let mut add = |text: &str| {
        for tok in tokenize(text).tokens() {
            counts[(fnv1a(tok.as_bytes()) % dim as u64) as usize] += 1.0;
        }
    };
    add(input.query);
    for item in input.profile {
        add(&item.query);
        add(&item.response);
    }
    add(input.chain);
    add(input.answer);
    counts
}

/// Hashed bag-of-tokens over query, profile, chain, and answer.
pub fn featurize(input: &PrmuInput, dim: usize) -> FeatureVector {
    let mut values = featurize_counts(input, dim);
    let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > 0.0 {
        for v in &mut values {
            *v /= norm;
        }
    }
    FeatureVector { values }
}

/// Per-user embedding storage. Unknown users read as the zero vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserEmbeddingTable {
    dim: usize,
    /// Standard deviation for embeddings created during training; zero means
    /// new embeddings start at the origin.
    sigma_init: f64,
    init_seed: u64,
    entries: BTreeMap<String, Vec<f64>>,
}

impl UserEmbeddingTable {
    pub fn new(dim: usize) -> Self {
        Self { dim, sigma_init: 0.0, init_seed: 0, entries: BTreeMap::new() }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn embedding(&self, user_id: &str) -> Option<&[f64]> {
        self.entries.get(user_id).map(Vec::as_slice)
    }

    pub fn users(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Embedding slot for a user, created on first touch. Creation is a pure
    /// function of the user id, so touch order cannot change the result.
    fn ensure(&mut self, user_id: &str) -> &mut Vec<f64> {
        let (dim, sigma, seed) = (self.dim, self.sigma_init, self.init_seed);
        self.entries.entry(user_id.to_string()).or_insert_with(|| {
            if sigma == 0.0 {
                vec![0.0; dim]
            } else {
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fnv1a(user_id.as_bytes()));
                (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal) * sigma).collect()
            }
        })
    }
}

/// Linear preference model: `score = (w + E_user) . features + b`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrmuModel {
    dim: usize,
    w: Vec<f64>,
    b: f64,
    users: UserEmbeddingTable,
}

#[derive(Serialize, Deserialize)]
struct PrmuCheckpoint {
    version: u32,
    model: PrmuModel,
}

impl PrmuModel {
    /// Model with small random shared weights and no user embeddings.
    pub fn new(dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal) * 0.01).collect();
        Self { dim, w, b: 0.0, users: UserEmbeddingTable::new(dim) }
    }

    /// All-zero model; scores every input as 0.
    pub fn zeros(dim: usize) -> Self {
        Self { dim, w: vec![0.0; dim], b: 0.0, users: UserEmbeddingTable::new(dim) }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn users(&self) -> &UserEmbeddingTable {
        &self.users
    }

    pub fn score(&self, input: &PrmuInput) -> f64 {
        let phi = featurize(input, self.dim);
        self.score_features(input.user_id, &phi)
    }

    fn score_features(&self, user_id: &str, phi: &FeatureVector) -> f64 {
        let mut score = phi.dot(&self.w) + self.b;
        if let Some(emb) = self.users.embedding(user_id) {
            score += phi.dot(emb);
        }
        score
    }

    pub fn save(&self, path: &Path) -> Result<(), PrmuError> {
        let checkpoint = PrmuCheckpoint { version: CHECKPOINT_VERSION, model: self.clone() };
        std::fs::write(path, serde_json::to_string_pretty(&checkpoint)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, PrmuError> {
        let checkpoint: PrmuCheckpoint =
            serde_json::from_str(&std::fs::read_to_string(path)?)?;
        if checkpoint.version != CHECKPOINT_VERSION {
            return Err(PrmuError::UnsupportedVersion(checkpoint.version));
        }
        Ok(checkpoint.model)
    }
}

/// Numerically stable logistic function.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Personalization reward for one response: the model score squashed to (0, 1).
pub fn prmu_reward(model: &PrmuModel, input: &PrmuInput) -> f64 {
    sigmoid(model.score(input))
}

/// One training example: the same user, query, and profile, with a preferred
/// and a rejected response.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferencePair {
    pub user_id: String,
    pub kind: TaskKind,
    pub query: String,
    pub profile: Vec<ProfileItem>,
    pub gold: String,
    pub preferred: Response,
    pub rejected: Response,
}

impl PreferencePair {
    fn side<'a>(&'a self, response: &'a Response) -> PrmuInput<'a> {
        PrmuInput {
            user_id: &self.user_id,
            query: &self.query,
            profile: &self.profile,
            chain: &response.chain,
            answer: &response.answer,
        }
    }
}

/// `ln(1 + e^x)` without overflow for large `x`.
fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

/// Gradient of the mean preference loss, sparse over touched users.
#[derive(Debug, Clone, PartialEq)]
pub struct PrmuGradient {
    pub w: Vec<f64>,
    pub b: f64,
    pub users: BTreeMap<String, Vec<f64>>,
}

fn loss_and_grad(
    model: &PrmuModel,
    pairs: &[PreferencePair],
    want_grad: bool,
) -> Result<(f64, Option<PrmuGradient>), PrmuError> {
    if pairs.is_empty() {
        return Err(PrmuError::EmptyBatch);
    }
    let scale = 1.0 / pairs.len() as f64;
    let mut loss = 0.0;
    let mut grad = want_grad.then(|| PrmuGradient {
        w: vec![0.0; model.dim],
        b: 0.0,
        users: BTreeMap::new(),
    });
    for pair in pairs {
        let phi_p = featurize(&pair.side(&pair.preferred), model.dim);
        let phi_r = featurize(&pair.side(&pair.rejected), model.dim);
        let gap = model.score_features(&pair.user_id, &phi_p)
            - model.score_features(&pair.user_id, &phi_r);
        loss += softplus(-gap) * scale;
        if let Some(grad) = grad.as_mut() {
            // d/dgap of softplus(-gap) is sigmoid(gap) - 1; the bias cancels
            // inside the gap, so its gradient is identically zero.
            let coef = (sigmoid(gap) - 1.0) * scale;
            let user = grad
                .users
                .entry(pair.user_id.clone())
                .or_insert_with(|| vec![0.0; model.dim]);
            for (i, slot) in user.iter_mut().enumerate() {
                let diff = phi_p.values[i] - phi_r.values[i];
                grad.w[i] += coef * diff;
                *slot += coef * diff;
            }
        }
    }
    Ok((loss, grad))
}

/// Mean pairwise preference loss: `-log sigmoid(score_preferred - score_rejected)`.
pub fn bt_loss(model: &PrmuModel, pairs: &[PreferencePair]) -> Result<f64, PrmuError> {
    loss_and_grad(model, pairs, false).map(|(loss, _)| loss)
}

/// Analytic gradient of [`bt_loss`] with respect to shared weights, bias,
/// and the embeddings of users present in the batch.
pub fn bt_grad(model: &PrmuModel, pairs: &[PreferencePair]) -> Result<PrmuGradient, PrmuError> {
    loss_and_grad(model, pairs, true).map(|(_, grad)| grad.expect("gradient was requested"))
}

/// Training hyperparameters for plain mini-batch gradient descent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrmuTrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for PrmuTrainConfig {
    fn default() -> Self {
        Self { lr: 0.5, epochs: 15, batch_size: 32, seed: 17 }
    }
}

/// Mini-batch gradient descent over a preference dataset. Returns the mean
/// loss per epoch, measured before each batch update.
pub fn train_prmu(
    model: &mut PrmuModel,
    pairs: &[PreferencePair],
    config: &PrmuTrainConfig,
) -> Result<Vec<f64>, PrmuError> {
    if config.epochs > 0 && pairs.is_empty() {
        return Err(PrmuError::EmptyBatch);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut curve = Vec::with_capacity(config.epochs);
    let batch_size = config.batch_size.max(1);
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0.0;
        for chunk in order.chunks(batch_size) {
            let batch: Vec<PreferencePair> =
                chunk.iter().map(|&i| pairs[i].clone()).collect();
            let (loss, grad) = loss_and_grad(model, &batch, true)?;
            let grad = grad.expect("gradient was requested");
            epoch_loss += loss;
            batches += 1.0;
            for i in 0..model.dim {
                model.w[i] -= config.lr * grad.w[i];
            }
            model.b -= config.lr * grad.b;
            for (user, g) in &grad.users {
                let emb = model.users.ensure(user);
                for i in 0..g.len() {
                    emb[i] -= config.lr * g[i];
                }
            }
        }
        curve.push(epoch_loss / batches);
    }
    Ok(curve)
}

/// Fraction of pairs the model ranks correctly; exact ties count half.
pub fn pairwise_accuracy(model: &PrmuModel, pairs: &[PreferencePair]) -> f64 {
    if pairs.is_empty() {
        return 0.0;
    }
    let mut correct = 0.0;
    for pair in pairs {
        let gap = model.score(&pair.side(&pair.preferred)) - model.score(&pair.side(&pair.rejected));
        if gap > 0.0 {
            correct += 1.0;
        } else if gap == 0.0 {
            correct += 0.5;
        }
    }
    correct / pairs.len() as f64
}

/// Produces the response pairs the preference datasets are built from.
pub trait PreferenceGenerator {
    /// Response conditioned on the visible profile.
    fn with_profile(&self, task: &TaskInstance, rng: &mut ChaCha8Rng) -> Response;
    /// Response with the profile hidden.
    fn without_profile(&self, task: &TaskInstance, rng: &mut ChaCha8Rng) -> Response;
    /// At least two profile-conditioned candidates of varying quality.
    fn candidates(&self, task: &TaskInstance, rng: &mut ChaCha8Rng) -> Vec<Response>;
}

fn sample_one_task(env: &SynthEnv, prefix: &str, serial: usize, rng: &mut ChaCha8Rng) -> TaskInstance {
    let user = rng.random_range(0..env.users.len());
    let kind = if rng.random::<f64>() < env.config.generation_share {
        TaskKind::Generation
    } else {
        TaskKind::Classification
    };
    env.sample_task(user, kind, &format!("{prefix}{serial:06}"), rng)
}

fn pair_from(task: &TaskInstance, preferred: Response, rejected: Response) -> PreferencePair {
    PreferencePair {
        user_id: task.user_id.clone(),
        kind: task.kind,
        query: task.query_text.clone(),
        profile: task.profile.clone(),
        gold: task.gold.clone(),
        preferred,
        rejected,
    }
}

/// Profile-conditioned response preferred over the profile-free response to
/// the same task. Tasks where the two coincide are skipped.
pub fn build_prp_dataset(
    env: &SynthEnv,
    generator: &dyn PreferenceGenerator,
    n: usize,
    seed: u64,
) -> Result<Vec<PreferencePair>, PrmuError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    let limit = 50 * n + 100;
    for serial in 0..limit {
        if out.len() == n {
            break;
        }
        let task = sample_one_task(env, "prp", serial, &mut rng);
        let preferred = generator.with_profile(&task, &mut rng);
        let rejected = generator.without_profile(&task, &mut rng);
        if preferred == rejected {
            continue;
        }
        out.push(pair_from(&task, preferred, rejected));
    }
    if out.len() < n {
        return Err(PrmuError::GeneratorStalled(limit));
    }
    Ok(out)
}

/// Generator backed by the synthetic environment's oracle responder. Quality
/// candidates pair the oracle response with a corrupted-answer variant.
pub struct OracleResponder<'a> {
    pub env: &'a SynthEnv,
    pub registry: &'a crate::tag_grammar::TagRegistry,
}

impl PreferenceGenerator for OracleResponder<'_> {
    fn with_profile(&self, task: &TaskInstance, _rng: &mut ChaCha8Rng) -> Response {
        crate::synth::oracle_respond(self.env, task, self.registry, true)
    }

    fn without_profile(&self, task: &TaskInstance, _rng: &mut ChaCha8Rng) -> Response {
        crate::synth::oracle_respond(self.env, task, self.registry, false)
    }

    fn candidates(&self, task: &TaskInstance, rng: &mut ChaCha8Rng) -> Vec<Response> {
        let base = crate::synth::oracle_respond(self.env, task, self.registry, true);
        let answer = match task.kind {
            TaskKind::Classification => {
                let classes = self.env.config.num_classes;
                let gold: usize = task.gold.parse().unwrap_or(0);
                let shift = rng.random_range(1..classes);
                ((gold + shift) % classes).to_string()
            }
            TaskKind::Generation => {
                let words = self.env.config.num_content_words;
                let mut toks: Vec<String> =
                    task.gold.split(' ').take(2).map(str::to_string).collect();
                for _ in 0..4 {
                    toks.push(crate::synth::content_word(rng.random_range(0..words)));
                }
                toks.join(" ")
            }
        };
        vec![base.clone(), Response { chain: base.chain, answer }]
    }
}

/// Higher-correctness candidate preferred over a strictly worse one from the
/// same prompt; ties are discarded.
pub fn build_pqp_dataset(
    env: &SynthEnv,
    generator: &dyn PreferenceGenerator,
    n: usize,
    seed: u64,
) -> Result<Vec<PreferencePair>, PrmuError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    let mut out = Vec::with_capacity(n);
    let limit = 50 * n + 100;
    for serial in 0..limit {
        if out.len() == n {
            break;
        }
        let task = sample_one_task(env, "pqp", serial, &mut rng);
        let candidates = generator.candidates(&task, &mut rng);
        if candidates.len() < 2 {
            continue;
        }
        let scores: Vec<f64> = candidates
            .iter()
            .map(|c| verifiable_reward(&c.answer, &task.gold, task.kind))
            .collect();
        let best = (0..scores.len()).max_by(|&a, &b| scores[a].total_cmp(&scores[b])).unwrap();
        let worst = (0..scores.len()).min_by(|&a, &b| scores[a].total_cmp(&scores[b])).unwrap();
        if scores[best] <= scores[worst] {
            continue;
        }
        out.push(pair_from(&task, candidates[best].clone(), candidates[worst].clone()));
    }
    if out.len() < n {
        return Err(PrmuError::GeneratorStalled(limit));
    }
    Ok(out)
}
