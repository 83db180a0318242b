//! Held-out evaluation: run a responder over seeded tasks and fold the
//! outputs into a report bundle of task metrics, tag frequencies, chain
//! length statistics, and reward decomposition averages.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tagrl_core::prmu::{prmu_reward, PrmuInput, PrmuModel};
use tagrl_core::synth::{oracle_respond, render_response, task_seed, SynthEnv, TaskInstance};
use tagrl_core::tag_grammar::{parse_chain, tag_histogram, TagRegistry, TaggedChain};
use tagrl_core::text_metrics::{classification_metrics, rouge1, rouge_l, tokenize};
use tagrl_core::{
    greedy_sequence, FeatureExtractor, FormatConfig, PolicyModel, RewardContext, TaskKind,
};

use crate::error::CliError;

/// Produces one raw response (reasoning markers included) per task.
pub trait Responder {
    fn respond(&self, task: &TaskInstance) -> String;
}

/// Greedy decoding from a trained policy checkpoint.
pub struct PolicyResponder<'a> {
    pub model: &'a PolicyModel,
    pub extractor: &'a FeatureExtractor,
    pub max_len: usize,
}

impl Responder for PolicyResponder<'_> {
    fn respond(&self, task: &TaskInstance) -> String {
        let prompt = self.extractor.encode(task);
        greedy_sequence(self.model, &prompt, self.max_len).rendered
    }
}

/// The environment's own ground-truth responder; answers are gold by
/// construction.
pub struct OracleTextResponder<'a> {
    pub env: &'a SynthEnv,
    pub registry: &'a TagRegistry,
    pub fmt: &'a FormatConfig,
}

impl Responder for OracleTextResponder<'_> {
    fn respond(&self, task: &TaskInstance) -> String {
        let response = oracle_respond(self.env, task, self.registry, true);
        render_response(&response, self.fmt)
    }
}

/// Baseline that answers uniformly at random, with a minimal valid chain.
/// Deterministic per task so evaluation stays reproducible.
pub struct UniformAnswerResponder<'a> {
    pub registry: &'a TagRegistry,
    pub fmt: &'a FormatConfig,
    pub classes: usize,
    pub content_words: usize,
    pub seed: u64,
}

impl Responder for UniformAnswerResponder<'_> {
    fn respond(&self, task: &TaskInstance) -> String {
        let mut rng = ChaCha8Rng::seed_from_u64(task_seed(self.seed, task));
        let names = self.registry.names();
        let chain: String = (0..self.registry.min_tag_count())
            .map(|i| {
                let name = &names[i % names.len()];
                format!("<{name}>guess</{name}>")
            })
            .collect::<Vec<String>>()
            .join(" ");
        let answer = match task.kind {
            TaskKind::Classification => rng.random_range(0..self.classes).to_string(),
            TaskKind::Generation => format!(
                "w{} w{}",
                rng.random_range(0..self.content_words),
                rng.random_range(0..self.content_words)
            ),
        };
        format!("{} {chain} {} {answer}", self.fmt.think_open, self.fmt.think_close)
    }
}

/// Classification metrics over the classification subset and mean ROUGE
/// over the generation subset; a field is absent when its subset is empty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsTable {
    pub classification_tasks: usize,
    pub generation_tasks: usize,
    pub accuracy: Option<f64>,
    pub macro_f1: Option<f64>,
    pub mae: Option<f64>,
    pub rmse: Option<f64>,
    pub rouge1: Option<f64>,
    pub rouge_l: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramBin {
    /// Inclusive lower edge in chain tokens.
    pub start: usize,
    /// Exclusive upper edge.
    pub end: usize,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainLengthStats {
    pub mean: f64,
    pub median: f64,
    pub histogram: Vec<HistogramBin>,
}

/// Per-component reward averages over the eval set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardMeans {
    pub r_v: f64,
    pub r_f: f64,
    pub r_rep: f64,
    pub r_tag: f64,
    pub r_prmu: f64,
    pub composite: f64,
    pub foundation: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportBundle {
    pub name: String,
    pub tasks: usize,
    pub metrics: MetricsTable,
    /// Relative tag frequencies; sums to 1 when any span was produced.
    pub tag_frequency: BTreeMap<String, f64>,
    pub chain_length: ChainLengthStats,
    pub reward_means: RewardMeans,
}

const HISTOGRAM_BIN_WIDTH: usize = 8;

fn chain_length_stats(lengths: &[usize]) -> ChainLengthStats {
    if lengths.is_empty() {
        return ChainLengthStats { mean: 0.0, median: 0.0, histogram: Vec::new() };
    }
    let mean = lengths.iter().sum::<usize>() as f64 / lengths.len() as f64;
    let mut sorted = lengths.to_vec();
    sorted.sort_unstable();
    let mid = sorted.len() / 2;
    let median = if sorted.len().is_multiple_of(2) {
        (sorted[mid - 1] + sorted[mid]) as f64 / 2.0
    } else {
        sorted[mid] as f64
    };
    let mut bins: BTreeMap<usize, usize> = BTreeMap::new();
    for &len in lengths {
        *bins.entry(len / HISTOGRAM_BIN_WIDTH * HISTOGRAM_BIN_WIDTH).or_insert(0) += 1;
    }
    let histogram = bins
        .into_iter()
        .map(|(start, count)| HistogramBin { start, end: start + HISTOGRAM_BIN_WIDTH, count })
        .collect();
    ChainLengthStats { mean, median, histogram }
}

/// Scores every task with `responder` and aggregates the bundle. `prmu`
/// feeds the personalization term; without it the neutral 0.5 is used.
pub fn evaluate(
    name: &str,
    tasks: &[TaskInstance],
    responder: &dyn Responder,
    ctx: &RewardContext,
    prmu: Option<&PrmuModel>,
) -> Result<ReportBundle, CliError> {
    if tasks.is_empty() {
        return Err(CliError::Usage("evaluation needs at least one task".to_string()));
    }
    let mut preds: Vec<String> = Vec::new();
    let mut golds: Vec<String> = Vec::new();
    let mut rouge1_sum = 0.0;
    let mut rouge_l_sum = 0.0;
    let mut generation_tasks = 0usize;
    let mut chains: Vec<TaggedChain> = Vec::new();
    let mut lengths: Vec<usize> = Vec::new();
    let mut sums = [0.0f64; 7];

    for task in tasks {
        let raw = responder.respond(task);
        let (chain_text, answer) = ctx.extract(&raw);
        let r_prmu = match prmu {
            Some(model) => prmu_reward(
                model,
                &PrmuInput {
                    user_id: &task.user_id,
                    query: &task.query_text,
                    profile: &task.profile,
                    chain: &chain_text,
                    answer: &answer,
                },
            ),
            None => 0.5,
        };
        let breakdown = ctx.score_response(&raw, &task.gold, task.kind, r_prmu);
        for (slot, value) in sums.iter_mut().zip([
            breakdown.r_v,
            breakdown.r_f,
            breakdown.r_rep,
            breakdown.r_tag,
            breakdown.r_prmu,
            breakdown.composite,
            breakdown.foundation,
        ]) {
            *slot += value;
        }
        match task.kind {
            TaskKind::Classification => {
                preds.push(answer.trim().to_lowercase());
                golds.push(task.gold.trim().to_lowercase());
            }
            TaskKind::Generation => {
                generation_tasks += 1;
                rouge1_sum += rouge1(&answer, &task.gold);
                rouge_l_sum += rouge_l(&answer, &task.gold);
            }
        }
        lengths.push(tokenize(&chain_text).tokens().len());
        chains.push(parse_chain(&chain_text));
    }

    let classification = if preds.is_empty() {
        None
    } else {
        Some(
            classification_metrics(&preds, &golds)
                .map_err(|e| CliError::Runtime(e.to_string()))?,
        )
    };
    let n = tasks.len() as f64;
    Ok(ReportBundle {
        name: name.to_string(),
        tasks: tasks.len(),
        metrics: MetricsTable {
            classification_tasks: preds.len(),
            generation_tasks,
            accuracy: classification.as_ref().map(|m| m.accuracy),
            macro_f1: classification.as_ref().map(|m| m.macro_f1),
            mae: classification.as_ref().and_then(|m| m.mae),
            rmse: classification.as_ref().and_then(|m| m.rmse),
            rouge1: (generation_tasks > 0).then(|| rouge1_sum / generation_tasks as f64),
            rouge_l: (generation_tasks > 0).then(|| rouge_l_sum / generation_tasks as f64),
        },
        tag_frequency: tag_histogram(&chains),
        chain_length: chain_length_stats(&lengths),
        reward_means: RewardMeans {
            r_v: sums[0] / n,
            r_f: sums[1] / n,
            r_rep: sums[2] / n,
            r_tag: sums[3] / n,
            r_prmu: sums[4] / n,
            composite: sums[5] / n,
            foundation: sums[6] / n,
        },
    })
}

fn fmt_opt(value: Option<f64>) -> String {
    value.map_or_else(|| "-".to_string(), |v| format!("{v:.4}"))
}

/// Plain-text comparison of several bundles: metric table, chain-length
/// table, and per-bundle tag frequencies.
pub fn render_report(bundles: &[ReportBundle]) -> String {
    let mut out = String::new();
    out.push_str(
        "name                 tasks  accuracy  macro_f1  mae      rmse     rouge1   rougeL\n",
    );
    for b in bundles {
        out.push_str(&format!(
            "{:<20} {:<6} {:<9} {:<9} {:<8} {:<8} {:<8} {:<8}\n",
            b.name,
            b.tasks,
            fmt_opt(b.metrics.accuracy),
            fmt_opt(b.metrics.macro_f1),
            fmt_opt(b.metrics.mae),
            fmt_opt(b.metrics.rmse),
            fmt_opt(b.metrics.rouge1),
            fmt_opt(b.metrics.rouge_l),
        ));
    }
    out.push_str("\nchain length (tokens)\n");
    out.push_str("name                 mean     median\n");
    for b in bundles {
        out.push_str(&format!(
            "{:<20} {:<8.2} {:<8.2}\n",
            b.name, b.chain_length.mean, b.chain_length.median
        ));
    }
    out.push_str("\nreward means\n");
    out.push_str("name                 r_v     r_f     r_rep   r_tag   r_prmu  composite\n");
    for b in bundles {
        let m = &b.reward_means;
        out.push_str(&format!(
            "{:<20} {:<7.3} {:<7.3} {:<7.3} {:<7.3} {:<7.3} {:<9.3}\n",
            b.name, m.r_v, m.r_f, m.r_rep, m.r_tag, m.r_prmu, m.composite
        ));
    }
    for b in bundles {
        out.push_str(&format!("\ntag frequencies: {}\n", b.name));
        if b.tag_frequency.is_empty() {
            out.push_str("  (no tags produced)\n");
        }
        for (tag, freq) in &b.tag_frequency {
            out.push_str(&format!("  {tag:<24} {freq:.4}\n"));
        }
    }
    out
}
