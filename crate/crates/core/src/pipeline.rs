//! Dataset construction pipeline: sample tasks from the synthetic
//! environment, generate candidate responses through a completion client,
//! filter by answer accuracy and judged chain quality, discover a tag
//! registry from free-form tagging (trigram embedding plus k-means), re-tag
//! each surviving chain against that registry, and serialize the records
//! that pass grammar validation, together with a run manifest.
//!
//! Responses use the default `<think>`/`</think>` reasoning markers. Every
//! stage is deterministic given the config seed and pure clients; reruns
//! produce byte-identical output files.

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clients::{complete_with_retry, GenerationClient, RetryPolicy};
use crate::hashing::{fnv1a, fnv1a_extend};
use crate::reward::{verifiable_reward, FormatConfig, RewardContext, TaskKind};
use crate::synth::{render_prompt, ProfileItem, SynthEnv, TaskInstance};
use crate::tag_grammar::{parse_chain, validate, GrammarError, TagRegistry};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("k-means wants {k} clusters but only {distinct} distinct vectors exist")]
    TooManyClusters { k: usize, distinct: usize },
    #[error("no exploratory tags survived, cannot derive a registry")]
    EmptyTagUniverse,
    #[error("tag registry construction failed: {0}")]
    Grammar(#[from] GrammarError),
    #[error("worker pool construction failed: {0}")]
    Pool(String),
    #[error("io failure: {0}")]
    Io(#[from] std::io::Error),
    #[error("serialization failure: {0}")]
    Serde(#[from] serde_json::Error),
}

/// Knobs for one pipeline run. Serializable so the manifest can echo it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub instances_per_task: usize,
    pub rollouts_per_instance: usize,
    /// Unigram-overlap F1 floor for generation answers.
    pub rouge_threshold: f64,
    /// Judge composite must be strictly above this to survive.
    pub judge_threshold: u32,
    pub k_clusters: usize,
    /// Minimum spans per chain required by the derived registry.
    pub min_tag_count: usize,
    /// Sampling temperature forwarded to the generation client.
    pub temperature: f64,
    /// Worker threads for client calls.
    pub parallelism: usize,
    /// Dimension of the hashed trigram tag embeddings.
    pub embed_dim: usize,
    pub max_kmeans_iters: usize,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            instances_per_task: 1000,
            rollouts_per_instance: 16,
            rouge_threshold: 0.3,
            judge_threshold: 15,
            k_clusters: 9,
            min_tag_count: 3,
            temperature: 1.0,
            parallelism: 4,
            embed_dim: 64,
            max_kmeans_iters: 50,
            seed: 0,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        let positive: [(&str, usize); 7] = [
            ("instances_per_task", self.instances_per_task),
            ("rollouts_per_instance", self.rollouts_per_instance),
            ("k_clusters", self.k_clusters),
            ("min_tag_count", self.min_tag_count),
            ("parallelism", self.parallelism),
            ("embed_dim", self.embed_dim),
            ("max_kmeans_iters", self.max_kmeans_iters),
        ];
        for (name, value) in positive {
            if value == 0 {
                return Err(PipelineError::InvalidConfig(format!("{name} must be positive")));
            }
        }
        if !(0.0..=1.0).contains(&self.rouge_threshold) {
            return Err(PipelineError::InvalidConfig(
                "rouge_threshold must lie in [0, 1]".to_string(),
            ));
        }
        if self.judge_threshold > 20 {
            return Err(PipelineError::InvalidConfig(
                "judge_threshold cannot exceed the 20-point composite".to_string(),
            ));
        }
        if !self.temperature.is_finite() || self.temperature < 0.0 {
            return Err(PipelineError::InvalidConfig(
                "temperature must be finite and non-negative".to_string(),
            ));
        }
        Ok(())
    }
}

/// Judge rubric: four 0..=5 integers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JudgeScore {
    pub logical_consistency: u8,
    pub factual_accuracy: u8,
    pub completeness: u8,
    pub conciseness: u8,
}

impl JudgeScore {
    pub fn composite(&self) -> u32 {
        u32::from(self.logical_consistency)
            + u32::from(self.factual_accuracy)
            + u32::from(self.completeness)
            + u32::from(self.conciseness)
    }
}

/// Parses a judge reply. Rejects anything that is not a bare JSON object
/// with the four rubric fields in range.
pub fn parse_judge_score(text: &str) -> Option<JudgeScore> {
    let score: JudgeScore = serde_json::from_str(text.trim()).ok()?;
    let fields = [
        score.logical_consistency,
        score.factual_accuracy,
        score.completeness,
        score.conciseness,
    ];
    fields.iter().all(|&f| f <= 5).then_some(score)
}

/// Which stages a record passed and which anomalies it picked up.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageFlags {
    pub accuracy_pass: bool,
    pub judge_pass: bool,
    pub format_pass: bool,
    pub empty_exploratory_tags: bool,
    /// Set when restricted tagging produced an off-registry or missing tag
    /// for at least one step; those steps are dropped.
    pub off_registry_tags: bool,
}

/// One candidate response flowing through the stages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineRecord {
    pub task_id: String,
    pub task_kind: TaskKind,
    pub user_id: String,
    pub query: String,
    pub profile: Vec<ProfileItem>,
    pub gold: String,
    /// Raw client output, reasoning markers included.
    pub candidate: String,
    /// Reasoning text between the markers.
    pub chain_text: String,
    /// Extracted final answer.
    pub answer: String,
    pub steps: Vec<String>,
    pub exploratory_tags: Vec<String>,
    pub final_steps: Vec<String>,
    pub final_tags: Vec<String>,
    pub judge_composite: Option<u32>,
    pub flags: StageFlags,
}

/// Provenance block attached to each serialized dataset record.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub stage_flags: StageFlags,
    pub judge_composite: u32,
}

/// Final training record, one JSONL line each.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub task_id: String,
    pub task_kind: TaskKind,
    pub user_id: String,
    pub query: String,
    pub profile: Vec<ProfileItem>,
    pub gold: String,
    pub chain: String,
    pub answer: String,
    pub final_tags: Vec<String>,
    pub provenance: Provenance,
}

/// Per-stage record counts plus anomaly tallies for the manifest.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageCounts {
    pub instances: usize,
    pub candidates: usize,
    pub accuracy_survivors: usize,
    pub judge_survivors: usize,
    pub tagged_records: usize,
    pub distinct_exploratory_tags: usize,
    pub format_survivors: usize,
    pub client_failures: usize,
    pub contract_violations: usize,
    pub judge_parse_failures: usize,
    pub empty_exploratory_taggings: usize,
    pub off_registry_records: usize,
}

/// Everything needed to audit a run: config echo, survival counts, and the
/// derived registry. Deliberately carries no timestamps so reruns match.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineManifest {
    pub config: PipelineConfig,
    pub counts: StageCounts,
    pub registry: Vec<String>,
    pub min_tag_count: usize,
}

/// The three client roles a run needs.
pub struct PipelineClients<'a> {
    pub generator: &'a dyn GenerationClient,
    pub judge: &'a dyn GenerationClient,
    pub tagger: &'a dyn GenerationClient,
}

pub struct PipelineOutcome {
    pub manifest: PipelineManifest,
    pub records: Vec<DatasetRecord>,
    pub dataset_path: PathBuf,
    pub manifest_path: PathBuf,
    pub report_path: PathBuf,
}

fn stage_seed(seed: u64, stage: &str, index: usize) -> u64 {
    let mut h = fnv1a(stage.as_bytes());
    h = fnv1a_extend(h, &seed.to_le_bytes());
    fnv1a_extend(h, &(index as u64).to_le_bytes())
}

fn worker_pool(cfg: &PipelineConfig) -> Result<rayon::ThreadPool, PipelineError> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.parallelism)
        .build()
        .map_err(|e| PipelineError::Pool(e.to_string()))
}

/// Lowercases, maps whitespace runs to single underscores, drops every
/// other character, and trims leading/trailing underscores.
pub fn normalize_tag(raw: &str) -> String {
    let mut out = String::with_capacity(raw.len());
    for ch in raw.to_lowercase().chars() {
        if ch.is_whitespace() || ch == '_' {
            if !out.ends_with('_') {
                out.push('_');
            }
        } else if ch.is_ascii_lowercase() {
            out.push(ch);
        }
    }
    out.trim_matches('_').to_string()
}

/// Splits a reasoning body into step sentences on terminal punctuation and
/// newlines. Empty fragments are dropped.
pub fn split_steps(chain_text: &str) -> Vec<String> {
    chain_text
        .split(['.', '!', '?', ';', '\n'])
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(str::to_string)
        .collect()
}

fn extraction_context() -> RewardContext {
    RewardContext { format: FormatConfig::default(), ..RewardContext::default() }
}

enum Fetch {
    Texts(Vec<String>),
    Contract { got: usize },
    Failed,
}

fn fetch(
    client: &dyn GenerationClient,
    retry: &RetryPolicy,
    prompt: &str,
    n: usize,
    temperature: f64,
    seed: u64,
) -> Fetch {
    match complete_with_retry(client, retry, prompt, n, temperature, seed) {
        Ok(texts) if texts.len() == n => Fetch::Texts(texts),
        Ok(texts) => Fetch::Contract { got: texts.len() },
        Err(err) => {
            log::warn!("client call failed permanently: {err}");
            Fetch::Failed
        }
    }
}

/// Stage 1: one client call per instance, `rollouts_per_instance` texts
/// each. Instances whose call fails or breaks the count contract are
/// skipped and tallied.
pub fn generate_candidates(
    env: &SynthEnv,
    tasks: &[TaskInstance],
    client: &dyn GenerationClient,
    cfg: &PipelineConfig,
    retry: &RetryPolicy,
    counts: &mut StageCounts,
) -> Result<Vec<PipelineRecord>, PipelineError> {
    let pool = worker_pool(cfg)?;
    let fetched: Vec<Fetch> = pool.install(|| {
        tasks
            .par_iter()
            .enumerate()
            .map(|(i, task)| {
                let prompt = render_prompt(task, env.config.num_classes);
                fetch(
                    client,
                    retry,
                    &prompt,
                    cfg.rollouts_per_instance,
                    cfg.temperature,
                    stage_seed(cfg.seed, "generate", i),
                )
            })
            .collect()
    });

    let ctx = extraction_context();
    let mut records = Vec::new();
    for (task, outcome) in tasks.iter().zip(fetched) {
        let texts = match outcome {
            Fetch::Texts(texts) => texts,
            Fetch::Contract { got } => {
                log::warn!(
                    "instance {}: client returned {got} texts, expected {}; skipped",
                    task.task_id,
                    cfg.rollouts_per_instance
                );
                counts.contract_violations += 1;
                continue;
            }
            Fetch::Failed => {
                log::warn!("instance {}: generation failed; skipped", task.task_id);
                counts.client_failures += 1;
                continue;
            }
        };
        for candidate in texts {
            let (chain_text, answer) = ctx.extract(&candidate);
            records.push(PipelineRecord {
                task_id: task.task_id.clone(),
                task_kind: task.kind,
                user_id: task.user_id.clone(),
                query: task.query_text.clone(),
                profile: task.profile.clone(),
                gold: task.gold.clone(),
                candidate,
                chain_text,
                answer,
                steps: Vec::new(),
                exploratory_tags: Vec::new(),
                final_steps: Vec::new(),
                final_tags: Vec::new(),
                judge_composite: None,
                flags: StageFlags::default(),
            });
        }
    }
    counts.candidates = records.len();
    Ok(records)
}

/// Stage 2: keep candidates whose extracted answer matches gold, exactly
/// for classification and by unigram-overlap F1 at or above the threshold
/// for generation.
pub fn accuracy_filter(records: Vec<PipelineRecord>, cfg: &PipelineConfig) -> Vec<PipelineRecord> {
    records
        .into_iter()
        .filter_map(|mut record| {
            let pass = match record.task_kind {
                TaskKind::Classification => {
                    verifiable_reward(&record.answer, &record.gold, TaskKind::Classification) == 1.0
                }
                TaskKind::Generation => {
                    verifiable_reward(&record.answer, &record.gold, TaskKind::Generation)
                        >= cfg.rouge_threshold
                }
            };
            pass.then(|| {
                record.flags.accuracy_pass = true;
                record
            })
        })
        .collect()
}

fn judge_prompt(record: &PipelineRecord) -> String {
    format!(
        "score the reasoning below as a json object with integer fields \
         logical_consistency, factual_accuracy, completeness and conciseness, each 0-5\n\
         query: {}\nchain: {}\nanswer: {}\n",
        record.query, record.chain_text, record.answer
    )
}

/// Stage 3: judge each survivor and keep composites strictly above the
/// threshold. Unparseable replies and failed calls drop the record.
pub fn judge_filter(
    records: Vec<PipelineRecord>,
    judge: &dyn GenerationClient,
    cfg: &PipelineConfig,
    retry: &RetryPolicy,
    counts: &mut StageCounts,
) -> Result<Vec<PipelineRecord>, PipelineError> {
    let pool = worker_pool(cfg)?;
    let fetched: Vec<Fetch> = pool.install(|| {
        records
            .par_iter()
            .enumerate()
            .map(|(i, record)| {
                fetch(judge, retry, &judge_prompt(record), 1, 0.0, stage_seed(cfg.seed, "judge", i))
            })
            .collect()
    });

    let mut survivors = Vec::new();
    for (mut record, outcome) in records.into_iter().zip(fetched) {
        let text = match outcome {
            Fetch::Texts(texts) => texts.into_iter().next().unwrap_or_default(),
            Fetch::Contract { .. } => {
                counts.contract_violations += 1;
                continue;
            }
            Fetch::Failed => {
                counts.client_failures += 1;
                continue;
            }
        };
        let Some(score) = parse_judge_score(&text) else {
            log::warn!("record {}: unparseable judge reply; dropped", record.task_id);
            counts.judge_parse_failures += 1;
            continue;
        };
        let composite = score.composite();
        if composite > cfg.judge_threshold {
            record.flags.judge_pass = true;
            record.judge_composite = Some(composite);
            survivors.push(record);
        }
    }
    Ok(survivors)
}

fn exploratory_prompt(steps: &[String]) -> String {
    let mut prompt =
        String::from("assign one short snake_case tag to each step, one per line\n");
    for step in steps {
        prompt.push_str("step: ");
        prompt.push_str(step);
        prompt.push('\n');
    }
    prompt
}

/// Stage 4: free-form tagging. Splits each chain into steps and records the
/// normalized, deduplicated tag list. Records are never dropped here; an
/// empty list only sets a flag.
pub fn exploratory_tagging(
    records: Vec<PipelineRecord>,
    tagger: &dyn GenerationClient,
    cfg: &PipelineConfig,
    retry: &RetryPolicy,
    counts: &mut StageCounts,
) -> Result<Vec<PipelineRecord>, PipelineError> {
    let mut records: Vec<PipelineRecord> = records
        .into_iter()
        .map(|mut record| {
            record.steps = split_steps(&record.chain_text);
            record
        })
        .collect();

    let pool = worker_pool(cfg)?;
    let fetched: Vec<Fetch> = pool.install(|| {
        records
            .par_iter()
            .enumerate()
            .map(|(i, record)| {
                fetch(
                    tagger,
                    retry,
                    &exploratory_prompt(&record.steps),
                    1,
                    0.0,
                    stage_seed(cfg.seed, "tag-free", i),
                )
            })
            .collect()
    });

    for (record, outcome) in records.iter_mut().zip(fetched) {
        let reply = match outcome {
            Fetch::Texts(texts) => texts.into_iter().next().unwrap_or_default(),
            Fetch::Contract { .. } => {
                counts.contract_violations += 1;
                String::new()
            }
            Fetch::Failed => {
                counts.client_failures += 1;
                String::new()
            }
        };
        let mut tags = Vec::new();
        for line in reply.lines() {
            let tag = normalize_tag(line);
            if !tag.is_empty() && !tags.contains(&tag) {
                tags.push(tag);
            }
        }
        if tags.is_empty() {
            record.flags.empty_exploratory_tags = true;
            counts.empty_exploratory_taggings += 1;
        }
        record.exploratory_tags = tags;
    }
    counts.tagged_records = records.len();
    Ok(records)
}

/// Hashed character-trigram embedding of a tag name, L2-normalized. Tags
/// shorter than one character embed to the zero vector.
pub fn embed_tag(tag: &str, dim: usize) -> Vec<f64> {
    let padded: Vec<char> = std::iter::once('^')
        .chain(tag.chars())
        .chain(std::iter::once('$'))
        .collect();
    let mut vector = vec![0.0; dim];
    for window in padded.windows(3) {
        let trigram: String = window.iter().collect();
        vector[(fnv1a(trigram.as_bytes()) % dim as u64) as usize] += 1.0;
    }
    let norm = vector.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > 0.0 {
        for v in &mut vector {
            *v /= norm;
        }
    }
    vector
}

pub fn embed_tags(tags: &[String], dim: usize) -> Vec<Vec<f64>> {
    tags.iter().map(|t| embed_tag(t, dim)).collect()
}

pub struct KmeansOutcome {
    pub assignments: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    /// Total squared distance after each assignment step; non-increasing.
    pub inertia_trace: Vec<f64>,
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest_centroid(point: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = 0;
    let mut best_dist = f64::INFINITY;
    for (i, centroid) in centroids.iter().enumerate() {
        let dist = squared_distance(point, centroid);
        if dist < best_dist {
            best = i;
            best_dist = dist;
        }
    }
    (best, best_dist)
}

/// Seeded k-means++ initialization followed by Lloyd iterations. Ties in
/// assignment go to the lowest centroid index; a cluster left empty after
/// an update is reseeded to the point farthest from its current centroid.
pub fn kmeans(
    vectors: &[Vec<f64>],
    k: usize,
    seed: u64,
    max_iters: usize,
) -> Result<KmeansOutcome, PipelineError> {
    if vectors.is_empty() || k == 0 || max_iters == 0 {
        return Err(PipelineError::InvalidConfig(
            "k-means needs vectors, k >= 1 and at least one iteration".to_string(),
        ));
    }
    let dim = vectors[0].len();
    if vectors.iter().any(|v| v.len() != dim) {
        return Err(PipelineError::InvalidConfig(
            "k-means vectors must share one dimension".to_string(),
        ));
    }
    let distinct = vectors
        .iter()
        .map(|v| v.iter().map(|x| x.to_bits()).collect::<Vec<u64>>())
        .collect::<std::collections::BTreeSet<_>>()
        .len();
    if k > distinct {
        return Err(PipelineError::TooManyClusters { k, distinct });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids: Vec<Vec<f64>> = Vec::with_capacity(k);
    centroids.push(vectors[rand::Rng::random_range(&mut rng, 0..vectors.len())].clone());
    while centroids.len() < k {
        let weights: Vec<f64> =
            vectors.iter().map(|v| nearest_centroid(v, &centroids).1).collect();
        let total: f64 = weights.iter().sum();
        let mut target = rand::Rng::random::<f64>(&mut rng) * total;
        let mut chosen = vectors.len() - 1;
        for (i, w) in weights.iter().enumerate() {
            target -= w;
            if target <= 0.0 {
                chosen = i;
                break;
            }
        }
        centroids.push(vectors[chosen].clone());
    }

    let mut assignments = vec![0usize; vectors.len()];
    let mut inertia_trace = Vec::new();
    for _ in 0..max_iters {
        let mut inertia = 0.0;
        let mut next = vec![0usize; vectors.len()];
        for (i, v) in vectors.iter().enumerate() {
            let (best, dist) = nearest_centroid(v, &centroids);
            next[i] = best;
            inertia += dist;
        }
        let stable = !inertia_trace.is_empty() && next == assignments;
        assignments = next;
        inertia_trace.push(inertia);

        let mut sums = vec![vec![0.0; dim]; k];
        let mut members = vec![0usize; k];
        for (v, &a) in vectors.iter().zip(&assignments) {
            members[a] += 1;
            for (s, x) in sums[a].iter_mut().zip(v) {
                *s += x;
            }
        }
        let mut reseeded = false;
        for c in 0..k {
            if members[c] > 0 {
                for s in &mut sums[c] {
                    *s /= members[c] as f64;
                }
                centroids[c] = std::mem::take(&mut sums[c]);
            } else {
                // Reseed the empty cluster to the overall farthest point.
                let farthest = vectors
                    .iter()
                    .enumerate()
                    .map(|(i, v)| (i, squared_distance(v, &centroids[assignments[i]])))
                    .max_by(|a, b| a.1.total_cmp(&b.1))
                    .map(|(i, _)| i)
                    .expect("vectors are nonempty");
                centroids[c] = vectors[farthest].clone();
                reseeded = true;
            }
        }
        if stable && !reseeded {
            break;
        }
    }
    Ok(KmeansOutcome { assignments, centroids, inertia_trace })
}

/// Picks each cluster's canonical surface form: the member with the highest
/// corpus count, ties broken by the lexicographically smallest name. The
/// winners become the derived registry.
pub fn derive_primary_tags(
    tags: &[String],
    assignments: &[usize],
    tag_counts: &BTreeMap<String, usize>,
    k: usize,
    min_tag_count: usize,
) -> Result<TagRegistry, PipelineError> {
    let mut names = Vec::with_capacity(k);
    for cluster in 0..k {
        let mut members: Vec<&String> = tags
            .iter()
            .zip(assignments)
            .filter(|(_, &a)| a == cluster)
            .map(|(t, _)| t)
            .collect();
        if members.is_empty() {
            return Err(PipelineError::InvalidConfig(format!("cluster {cluster} is empty")));
        }
        members.sort_by(|a, b| {
            let ca = tag_counts.get(*a).copied().unwrap_or(0);
            let cb = tag_counts.get(*b).copied().unwrap_or(0);
            cb.cmp(&ca).then(a.cmp(b))
        });
        names.push(members[0].clone());
    }
    Ok(TagRegistry::new(names, min_tag_count)?)
}

fn restricted_prompt(steps: &[String], registry: &TagRegistry) -> String {
    let mut prompt =
        String::from("assign one tag per step from the allowed list, one per line\n");
    prompt.push_str("allowed: ");
    prompt.push_str(&registry.names().join("|"));
    prompt.push('\n');
    for step in steps {
        prompt.push_str("step: ");
        prompt.push_str(step);
        prompt.push('\n');
    }
    prompt
}

/// Stage 5: re-tag every step against the derived registry. Steps whose
/// tag is off-registry or missing are dropped and the record flagged.
pub fn restricted_tagging(
    records: Vec<PipelineRecord>,
    registry: &TagRegistry,
    tagger: &dyn GenerationClient,
    cfg: &PipelineConfig,
    retry: &RetryPolicy,
    counts: &mut StageCounts,
) -> Result<Vec<PipelineRecord>, PipelineError> {
    let pool = worker_pool(cfg)?;
    let fetched: Vec<Fetch> = pool.install(|| {
        records
            .par_iter()
            .enumerate()
            .map(|(i, record)| {
                fetch(
                    tagger,
                    retry,
                    &restricted_prompt(&record.steps, registry),
                    1,
                    0.0,
                    stage_seed(cfg.seed, "tag-restricted", i),
                )
            })
            .collect()
    });

    let mut records = records;
    for (record, outcome) in records.iter_mut().zip(fetched) {
        let reply = match outcome {
            Fetch::Texts(texts) => texts.into_iter().next().unwrap_or_default(),
            Fetch::Contract { .. } => {
                counts.contract_violations += 1;
                String::new()
            }
            Fetch::Failed => {
                counts.client_failures += 1;
                String::new()
            }
        };
        let mut lines = reply.lines();
        let mut lost_step = false;
        for step in &record.steps {
            let tag = lines.next().map(normalize_tag).unwrap_or_default();
            if registry.contains(&tag) {
                record.final_steps.push(step.clone());
                record.final_tags.push(tag);
            } else {
                lost_step = true;
            }
        }
        if lost_step {
            record.flags.off_registry_tags = true;
            counts.off_registry_records += 1;
        }
    }
    Ok(records)
}

/// Renders the final tagged chain: one `<tag>step</tag>` span per
/// surviving step, space-joined.
pub fn render_tagged_chain(final_tags: &[String], final_steps: &[String]) -> String {
    final_tags
        .iter()
        .zip(final_steps)
        .map(|(tag, step)| format!("<{tag}>{step}</{tag}>"))
        .collect::<Vec<String>>()
        .join(" ")
}

/// Stage 6: keep records whose rendered chain passes grammar validation
/// against the derived registry, and convert them to dataset records.
pub fn format_filter(
    records: Vec<PipelineRecord>,
    registry: &TagRegistry,
) -> Vec<DatasetRecord> {
    records
        .into_iter()
        .filter_map(|mut record| {
            let chain = render_tagged_chain(&record.final_tags, &record.final_steps);
            let rendered = format!("{chain} {}", record.answer);
            if !validate(&parse_chain(&rendered), registry).is_clean() {
                return None;
            }
            record.flags.format_pass = true;
            Some(DatasetRecord {
                task_id: record.task_id,
                task_kind: record.task_kind,
                user_id: record.user_id,
                query: record.query,
                profile: record.profile,
                gold: record.gold,
                chain,
                answer: record.answer,
                final_tags: record.final_tags,
                provenance: Provenance {
                    stage_flags: record.flags,
                    judge_composite: record.judge_composite.unwrap_or(0),
                },
            })
        })
        .collect()
}

/// Writes one JSON object per line. A failed write removes the partial
/// file before returning the error.
pub fn write_dataset(records: &[DatasetRecord], path: &Path) -> Result<(), PipelineError> {
    let result = (|| -> Result<(), PipelineError> {
        let mut file = std::fs::File::create(path)?;
        for record in records {
            serde_json::to_writer(&mut file, record)?;
            file.write_all(b"\n")?;
        }
        file.sync_all()?;
        Ok(())
    })();
    if result.is_err() {
        let _ = std::fs::remove_file(path);
    }
    result
}

/// Pretty-prints `n` seeded-random final records for manual inspection.
pub fn sample_report(records: &[DatasetRecord], n: usize, seed: u64) -> String {
    if records.is_empty() {
        return "no records survived the pipeline\n".to_string();
    }
    let mut indices: Vec<usize> = (0..records.len()).collect();
    indices.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    indices.truncate(n);
    indices.sort_unstable();
    let mut out = String::new();
    for i in indices {
        out.push_str(&format!("record {i}\n"));
        out.push_str(&serde_json::to_string_pretty(&records[i]).unwrap_or_default());
        out.push_str("\n---\n");
    }
    out
}

/// Runs every stage in order and writes `dataset.jsonl`, `manifest.json`
/// and `sample_report.txt` into `out_dir`.
pub fn run_pipeline(
    env: &SynthEnv,
    clients: &PipelineClients,
    cfg: &PipelineConfig,
    retry: &RetryPolicy,
    out_dir: &Path,
) -> Result<PipelineOutcome, PipelineError> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir)?;

    let mut counts = StageCounts::default();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let tasks = env.sample_tasks(cfg.instances_per_task, "pipe", &mut rng);
    counts.instances = tasks.len();

    let records = generate_candidates(env, &tasks, clients.generator, cfg, retry, &mut counts)?;
    let records = accuracy_filter(records, cfg);
    counts.accuracy_survivors = records.len();
    let records = judge_filter(records, clients.judge, cfg, retry, &mut counts)?;
    counts.judge_survivors = records.len();
    let records = exploratory_tagging(records, clients.tagger, cfg, retry, &mut counts)?;

    let mut tag_counts: BTreeMap<String, usize> = BTreeMap::new();
    for record in &records {
        for tag in &record.exploratory_tags {
            *tag_counts.entry(tag.clone()).or_insert(0) += 1;
        }
    }
    if tag_counts.is_empty() {
        return Err(PipelineError::EmptyTagUniverse);
    }
    let tags: Vec<String> = tag_counts.keys().cloned().collect();
    counts.distinct_exploratory_tags = tags.len();
    let embeddings = embed_tags(&tags, cfg.embed_dim);
    let clusters = kmeans(&embeddings, cfg.k_clusters, cfg.seed, cfg.max_kmeans_iters)?;
    let registry = derive_primary_tags(
        &tags,
        &clusters.assignments,
        &tag_counts,
        cfg.k_clusters,
        cfg.min_tag_count,
    )?;

    let records =
        restricted_tagging(records, &registry, clients.tagger, cfg, retry, &mut counts)?;
    let final_records = format_filter(records, &registry);
    counts.format_survivors = final_records.len();

    let manifest = PipelineManifest {
        config: cfg.clone(),
        counts,
        registry: registry.names().to_vec(),
        min_tag_count: registry.min_tag_count(),
    };

    let dataset_path = out_dir.join("dataset.jsonl");
    write_dataset(&final_records, &dataset_path)?;
    let manifest_path = out_dir.join("manifest.json");
    std::fs::write(&manifest_path, serde_json::to_string_pretty(&manifest)? + "\n")?;
    let report_path = out_dir.join("sample_report.txt");
    std::fs::write(&report_path, sample_report(&final_records, 5, cfg.seed))?;

    Ok(PipelineOutcome { manifest, records: final_records, dataset_path, manifest_path, report_path })
}
