//! Text-completion clients for the dataset pipeline: a wire-level HTTP
//! client and deterministic mocks for offline runs. Every client answers a
//! prompt with `n` completions; mocks are pure functions of
//! `(prompt, n, seed)`.

use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hashing::{fnv1a, fnv1a_extend};

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("transport failure: {0}")]
    Transport(String),
    #[error("endpoint returned status {0}")]
    Status(u16),
    #[error("malformed response body: {0}")]
    Malformed(String),
}

/// A completion backend. `n` requests that many texts; fewer or more is a
/// contract violation handled by the caller.
pub trait GenerationClient: Sync {
    fn complete(
        &self,
        prompt: &str,
        n: usize,
        temperature: f64,
        seed: u64,
    ) -> Result<Vec<String>, ClientError>;
}

/// Retry schedule for flaky transports: `attempts` tries with exponential
/// backoff starting at `base_delay`.
#[derive(Debug, Clone, PartialEq)]
pub struct RetryPolicy {
    pub attempts: usize,
    pub base_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self { attempts: 3, base_delay: Duration::from_millis(50) }
    }
}

pub fn complete_with_retry(
    client: &dyn GenerationClient,
    policy: &RetryPolicy,
    prompt: &str,
    n: usize,
    temperature: f64,
    seed: u64,
) -> Result<Vec<String>, ClientError> {
    let mut last = ClientError::Transport("no attempts made".to_string());
    for attempt in 0..policy.attempts.max(1) {
        if attempt > 0 {
            std::thread::sleep(policy.base_delay * 2u32.pow(attempt as u32 - 1));
        }
        match client.complete(prompt, n, temperature, seed) {
            Ok(texts) => return Ok(texts),
            Err(err) => {
                log::warn!("client attempt {} failed: {err}", attempt + 1);
                last = err;
            }
        }
    }
    Err(last)
}

#[derive(Serialize)]
struct WireRequest<'a> {
    prompt: &'a str,
    n: usize,
    temperature: f64,
    seed: u64,
}

#[derive(Deserialize)]
struct WireResponse {
    texts: Vec<String>,
}

/// Blocking HTTP client speaking the `{prompt, n, temperature, seed}` →
/// `{texts: [...]}` contract.
pub struct HttpGenerationClient {
    endpoint: String,
    api_key: Option<String>,
    http: reqwest::blocking::Client,
}

/// Environment variable naming the completion endpoint URL.
pub const ENDPOINT_VAR: &str = "TAGRL_ENDPOINT";
/// Environment variable holding the optional bearer credential.
pub const API_KEY_VAR: &str = "TAGRL_API_KEY";

impl HttpGenerationClient {
    pub fn new(endpoint: impl Into<String>, api_key: Option<String>) -> Result<Self, ClientError> {
        let http = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(30))
            .build()
            .map_err(|e| ClientError::Transport(e.to_string()))?;
        Ok(Self { endpoint: endpoint.into(), api_key, http })
    }

    /// Reads the endpoint and credential from the environment.
    pub fn from_env() -> Result<Self, ClientError> {
        let endpoint = std::env::var(ENDPOINT_VAR)
            .map_err(|_| ClientError::Transport(format!("{ENDPOINT_VAR} is not set")))?;
        Self::new(endpoint, std::env::var(API_KEY_VAR).ok())
    }
}

impl GenerationClient for HttpGenerationClient {
    fn complete(
        &self,
        prompt: &str,
        n: usize,
        temperature: f64,
        seed: u64,
    ) -> Result<Vec<String>, ClientError> {
        let mut request = self
            .http
            .post(&self.endpoint)
            .json(&WireRequest { prompt, n, temperature, seed });
        if let Some(key) = &self.api_key {
            request = request.bearer_auth(key);
        }
        let response = request.send().map_err(|e| ClientError::Transport(e.to_string()))?;
        let status = response.status();
        if !status.is_success() {
            return Err(ClientError::Status(status.as_u16()));
        }
        let body: WireResponse =
            response.json().map_err(|e| ClientError::Malformed(e.to_string()))?;
        Ok(body.texts)
    }
}

fn client_rng(prompt: &str, seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(fnv1a_extend(fnv1a(prompt.as_bytes()), &seed.to_le_bytes()))
}

fn prompt_line<'a>(prompt: &'a str, key: &str) -> Option<&'a str> {
    prompt.lines().find_map(|l| l.strip_prefix(key))
}

/// Deterministic stand-in for a reasoning model. Parses the task prompt and
/// answers with a short free-text chain; most answers follow a profile
/// heuristic, the rest are random, and a small share of outputs is
/// deliberately malformed so downstream filters have real work.
pub struct MockGenerator {
    pub heuristic_rate: f64,
    pub malformed_rate: f64,
}

impl Default for MockGenerator {
    fn default() -> Self {
        Self { heuristic_rate: 0.7, malformed_rate: 0.1 }
    }
}

struct ParsedPrompt {
    classes: Vec<String>,
    history_answers: Vec<String>,
    history_words: Vec<String>,
    query_tokens: Vec<String>,
}

fn parse_task_prompt(prompt: &str) -> ParsedPrompt {
    let classes = prompt_line(prompt, "options: ")
        .map(|line| line.split('|').map(str::to_string).collect())
        .unwrap_or_default();
    let mut history_answers = Vec::new();
    let mut history_words = Vec::new();
    for line in prompt.lines() {
        let Some(rest) = line.strip_prefix("history: ") else { continue };
        let Some((_, response)) = rest.split_once(" => ") else { continue };
        history_answers.push(response.trim().to_string());
        for tok in response.split_whitespace() {
            if tok.starts_with('w') && tok[1..].parse::<usize>().is_ok() {
                history_words.push(tok.to_string());
            }
        }
    }
    let query_tokens = prompt_line(prompt, "query: ")
        .map(|line| line.split_whitespace().map(str::to_string).collect())
        .unwrap_or_default();
    ParsedPrompt { classes, history_answers, history_words, query_tokens }
}

impl MockGenerator {
    fn answer(&self, parsed: &ParsedPrompt, rng: &mut ChaCha8Rng) -> String {
        let heuristic = rng.random::<f64>() < self.heuristic_rate;
        if parsed.classes.is_empty() {
            // Generation task: echo frequent profile words, else invent some.
            let pool: Vec<String> = if heuristic && !parsed.history_words.is_empty() {
                let mut counts = std::collections::BTreeMap::new();
                for w in &parsed.history_words {
                    *counts.entry(w.clone()).or_insert(0usize) += 1;
                }
                let mut ranked: Vec<(String, usize)> = counts.into_iter().collect();
                ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
                ranked.into_iter().map(|(w, _)| w).collect()
            } else {
                (0..8).map(|i| format!("w{i}")).collect()
            };
            let count = rng.random_range(4..=6).min(pool.len().max(1));
            let mut words = Vec::with_capacity(count);
            for i in 0..count {
                if heuristic {
                    words.push(pool[i % pool.len()].clone());
                } else {
                    words.push(pool[rng.random_range(0..pool.len())].clone());
                }
            }
            return words.join(" ");
        }
        if heuristic {
            // Majority label over the profile answers.
            let mut counts = vec![0usize; parsed.classes.len()];
            for answer in &parsed.history_answers {
                if let Some(i) = parsed.classes.iter().position(|c| c == answer) {
                    counts[i] += 1;
                }
            }
            let best = counts
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0)))
                .map(|(i, _)| i)
                .unwrap_or(0);
            return parsed.classes[best].clone();
        }
        parsed.classes[rng.random_range(0..parsed.classes.len())].clone()
    }

    fn chain(&self, parsed: &ParsedPrompt, answer: &str, rng: &mut ChaCha8Rng) -> String {
        let query_token = parsed
            .query_tokens
            .get(1)
            .cloned()
            .unwrap_or_else(|| "the query".to_string());
        let templates = [
            format!("first i look at the query item {query_token}"),
            "the history shows a stable preference".to_string(),
            format!("similar past items point toward {answer}"),
            "weighing the alternatives against the profile".to_string(),
            format!("so the response should be {answer}"),
            "double checking the format before answering".to_string(),
        ];
        let count = rng.random_range(3..=5);
        let start = rng.random_range(0..templates.len());
        let mut sentences = Vec::with_capacity(count);
        for i in 0..count {
            sentences.push(templates[(start + i) % templates.len()].clone());
        }
        format!("{}.", sentences.join(". "))
    }
}

impl GenerationClient for MockGenerator {
    fn complete(
        &self,
        prompt: &str,
        n: usize,
        _temperature: f64,
        seed: u64,
    ) -> Result<Vec<String>, ClientError> {
        let mut rng = client_rng(prompt, seed);
        let parsed = parse_task_prompt(prompt);
        Ok((0..n)
            .map(|_| {
                let answer = self.answer(&parsed, &mut rng);
                let chain = self.chain(&parsed, &answer, &mut rng);
                if rng.random::<f64>() < self.malformed_rate {
                    match rng.random_range(0..4) {
                        0 => format!("<think> {chain}"),
                        1 => format!("<think> {chain} </think>"),
                        2 => format!("<think> {chain} <think> again </think> {answer}"),
                        _ => format!("{answer} <think> {chain} </think> {answer}"),
                    }
                } else {
                    format!("<think> {chain} </think> {answer}")
                }
            })
            .collect())
    }
}

/// Deterministic judge: emits a JSON quality score, occasionally malformed
/// so the parse-failure path stays exercised.
pub struct MockJudge {
    pub malformed_rate: f64,
}

impl Default for MockJudge {
    fn default() -> Self {
        Self { malformed_rate: 0.05 }
    }
}

impl GenerationClient for MockJudge {
    fn complete(
        &self,
        prompt: &str,
        n: usize,
        _temperature: f64,
        seed: u64,
    ) -> Result<Vec<String>, ClientError> {
        let mut rng = client_rng(prompt, seed);
        Ok((0..n)
            .map(|_| {
                if rng.random::<f64>() < self.malformed_rate {
                    return "the chain felt adequate overall".to_string();
                }
                let mut field = || {
                    if rng.random::<f64>() < 0.8 {
                        rng.random_range(3..=5u8)
                    } else {
                        rng.random_range(0..=3u8)
                    }
                };
                format!(
                    "{{\"logical_consistency\":{},\"factual_accuracy\":{},\
                     \"completeness\":{},\"conciseness\":{}}}",
                    field(),
                    field(),
                    field(),
                    field()
                )
            })
            .collect())
    }
}

/// Synonym families the mock tagger draws from; the first member of each
/// family is its most frequent surface form.
pub const TAG_FAMILIES: [[&str; 3]; 9] = [
    ["analyze_input", "inspect_input", "analyze_the_input"],
    ["examine_examples", "review_examples", "study_examples"],
    ["identify_patterns", "find_patterns", "spot_patterns"],
    ["compare_entities", "contrast_entities", "compare_items"],
    ["make_decision", "decide_now", "final_decision"],
    ["summarize_profile", "profile_summary", "condense_profile"],
    ["recall_preferences", "remember_preferences", "preference_recall"],
    ["evaluate_options", "weigh_options", "option_weighing"],
    ["verify_consistency", "check_consistency", "consistency_check"],
];

/// Deterministic tagger. In free mode it emits one synonym-family tag per
/// step line; when the prompt carries an `allowed:` list it mostly stays
/// inside it, with a small off-list rate to exercise the restricted
/// filter.
pub struct MockTagger {
    pub empty_rate: f64,
    pub off_registry_rate: f64,
}

impl Default for MockTagger {
    fn default() -> Self {
        Self { empty_rate: 0.03, off_registry_rate: 0.05 }
    }
}

impl GenerationClient for MockTagger {
    fn complete(
        &self,
        prompt: &str,
        n: usize,
        _temperature: f64,
        seed: u64,
    ) -> Result<Vec<String>, ClientError> {
        let mut rng = client_rng(prompt, seed);
        let steps = prompt.lines().filter(|l| l.starts_with("step: ")).count();
        let allowed: Option<Vec<&str>> =
            prompt_line(prompt, "allowed: ").map(|line| line.split('|').collect());
        Ok((0..n)
            .map(|_| {
                if allowed.is_none() && rng.random::<f64>() < self.empty_rate {
                    return String::new();
                }
                let mut lines = Vec::with_capacity(steps);
                for _ in 0..steps {
                    let tag = match &allowed {
                        Some(list) => {
                            if rng.random::<f64>() < self.off_registry_rate {
                                "made_up_tag".to_string()
                            } else {
                                list[rng.random_range(0..list.len())].to_string()
                            }
                        }
                        None => {
                            let family = &TAG_FAMILIES[rng.random_range(0..TAG_FAMILIES.len())];
                            // The canonical form dominates its family.
                            if rng.random::<f64>() < 0.6 {
                                family[0].to_string()
                            } else {
                                family[rng.random_range(1..family.len())].to_string()
                            }
                        }
                    };
                    lines.push(tag);
                }
                lines.join("\n")
            })
            .collect())
    }
}
