//! Composite reward over a model response: verifiable correctness, format
//! gate, repetition penalty, tag validity, and a personalization score.

use serde::{Deserialize, Serialize};

use crate::tag_grammar::{parse_chain, validate, TagRegistry};
use crate::text_metrics::{ngram_stats, rouge1, tokenize};

/// Mixing weights of the composite reward.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardWeights {
    /// Weight on the format-gated correctness and repetition terms.
    pub alpha: f64,
    /// Weight on the tag-validity term.
    pub beta: f64,
    /// Weight on the personalization term.
    pub gamma: f64,
}

impl Default for RewardWeights {
    fn default() -> Self {
        Self { alpha: 0.8, beta: 0.8, gamma: 0.2 }
    }
}

/// Window size and stabilizer for the repetition penalty.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RepetitionConfig {
    pub n: usize,
    pub delta: f64,
}

impl Default for RepetitionConfig {
    fn default() -> Self {
        Self { n: 4, delta: 1e-6 }
    }
}

/// Markers delimiting the reasoning block of a response.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FormatConfig {
    pub think_open: String,
    pub think_close: String,
}

impl Default for FormatConfig {
    fn default() -> Self {
        Self { think_open: "<think>".into(), think_close: "</think>".into() }
    }
}

/// How the verifiable term scores the extracted answer against gold.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    /// Exact match after lowercasing and trimming.
    Classification,
    /// Unigram-overlap F1 against the gold text.
    Generation,
}

/// All reward components of one response, plus their combinations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub r_v: f64,
    pub r_f: f64,
    pub r_rep: f64,
    pub r_tag: f64,
    pub r_prmu: f64,
    pub composite: f64,
    pub foundation: f64,
}

/// Correctness of an answer against gold: exact match for classification,
/// unigram-overlap F1 for generation. Always in `[0, 1]`.
pub fn verifiable_reward(answer: &str, gold: &str, kind: TaskKind) -> f64 {
    match kind {
        TaskKind::Classification => {
            let normalize = |s: &str| s.trim().to_lowercase();
            if normalize(answer) == normalize(gold) {
                1.0
            } else {
                0.0
            }
        }
        TaskKind::Generation => rouge1(answer, gold),
    }
}

/// Locates the single reasoning block. `Some((body, answer))` when the text
/// starts (modulo leading whitespace) with exactly one open marker, carries
/// exactly one close marker after it, and nothing else marker-like.
fn split_reasoning<'a>(raw: &'a str, cfg: &FormatConfig) -> Option<(&'a str, &'a str)> {
    let trimmed = raw.trim_start();
    if !trimmed.starts_with(&cfg.think_open) {
        return None;
    }
    if raw.matches(&cfg.think_open).count() != 1 || raw.matches(&cfg.think_close).count() != 1 {
        return None;
    }
    let body_start = raw.find(&cfg.think_open).expect("open marker present") + cfg.think_open.len();
    let close = raw[body_start..].find(&cfg.think_close)? + body_start;
    Some((&raw[body_start..close], raw[close + cfg.think_close.len()..].trim()))
}

/// 1 when the response is exactly one reasoning block followed by a
/// non-empty answer; 0 otherwise.
pub fn format_reward(raw: &str, cfg: &FormatConfig) -> f64 {
    match split_reasoning(raw, cfg) {
        Some((_, answer)) if !answer.is_empty() => 1.0,
        _ => 0.0,
    }
}

/// Penalty for duplicated n-gram windows: `-(total - unique) / (total + delta)`,
/// zero when the text is shorter than one window. Always in `[-1, 0]`.
pub fn repetition_penalty(text: &str, cfg: &RepetitionConfig) -> f64 {
    let stats = ngram_stats(&tokenize(text), cfg.n.max(1)).expect("window size is positive");
    if stats.total == 0 || stats.total == stats.unique {
        return 0.0;
    }
    -((stats.total - stats.unique) as f64) / (stats.total as f64 + cfg.delta)
}

/// 0 when the reasoning body parses into a clean chain under the registry,
/// -1 otherwise. The body is the text between the think markers when a
/// single block exists, the whole text otherwise.
pub fn tag_reward(raw: &str, registry: &TagRegistry, fmt: &FormatConfig) -> f64 {
    let body = split_reasoning(raw, fmt).map(|(body, _)| body).unwrap_or(raw);
    if validate(&parse_chain(body), registry).is_clean() {
        0.0
    } else {
        -1.0
    }
}

/// Weighted combination of all five components:
/// `alpha * (r_v + r_rep) * r_f + beta * r_tag + gamma * r_prmu`.
pub fn composite_reward(
    r_v: f64,
    r_f: f64,
    r_rep: f64,
    r_tag: f64,
    r_prmu: f64,
    weights: &RewardWeights,
) -> f64 {
    weights.alpha * (r_v + r_rep) * r_f + weights.beta * r_tag + weights.gamma * r_prmu
}

/// Format-gated correctness and repetition only: `(r_v + r_rep) * r_f`.
pub fn foundation_reward(r_v: f64, r_rep: f64, r_f: f64) -> f64 {
    (r_v + r_rep) * r_f
}

/// Everything needed to score raw response text.
#[derive(Debug, Clone, Default)]
pub struct RewardContext {
    pub weights: RewardWeights,
    pub repetition: RepetitionConfig,
    pub format: FormatConfig,
    pub registry: TagRegistry,
}

impl RewardContext {
    /// Splits raw text into reasoning body and answer. Falls back to the
    /// tag-grammar answer rule when no single think block exists.
    pub fn extract(&self, raw: &str) -> (String, String) {
        match split_reasoning(raw, &self.format) {
            Some((body, answer)) => (body.to_string(), answer.to_string()),
            None => (raw.to_string(), parse_chain(raw).answer),
        }
    }

    /// Scores one response. `r_prmu` is the personalization score for this
    /// response; callers without a trained scorer pass its neutral value 0.5.
    pub fn score_response(
        &self,
        raw: &str,
        gold: &str,
        kind: TaskKind,
        r_prmu: f64,
    ) -> RewardBreakdown {
        let (_, answer) = self.extract(raw);
        let r_v = verifiable_reward(&answer, gold, kind);
        let r_f = format_reward(raw, &self.format);
        let r_rep = repetition_penalty(raw, &self.repetition);
        let r_tag = tag_reward(raw, &self.registry, &self.format);
        RewardBreakdown {
            r_v,
            r_f,
            r_rep,
            r_tag,
            r_prmu,
            composite: composite_reward(r_v, r_f, r_rep, r_tag, r_prmu, &self.weights),
            foundation: foundation_reward(r_v, r_rep, r_f),
        }
    }
}
