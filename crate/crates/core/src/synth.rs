//! Synthetic personalization environment: users with private label rules and
//! writing styles, per-user interaction histories, task sampling with
//! profile retrieval, and an oracle responder with known optimal behavior.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hashing::fnv1a;
use crate::reward::{FormatConfig, TaskKind};
use crate::tag_grammar::TagRegistry;

/// Errors raised by environment construction and persistence.
#[derive(Debug, Error)]
pub enum EnvError {
    #[error("invalid environment config: {0}")]
    InvalidConfig(String),
    #[error("malformed environment dump: {0}")]
    BadDump(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Serde(#[from] serde_json::Error),
}

/// How profile items are chosen from a user's history.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Retrieval {
    /// The most recent `profile_k` items.
    Recency,
    /// A seeded random subset, kept in chronological order.
    Random,
}

/// Shape of the synthetic world.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnvConfig {
    pub seed: u64,
    pub num_users: usize,
    pub num_classes: usize,
    pub feature_dim: usize,
    pub num_content_words: usize,
    pub history_len: usize,
    pub profile_k: usize,
    /// Standard deviation of per-user label-rule offsets; larger values make
    /// users disagree more.
    pub user_offset_scale: f64,
    /// Fraction of sampled tasks that are generation tasks.
    pub generation_share: f64,
    pub retrieval: Retrieval,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            num_users: 8,
            num_classes: 3,
            feature_dim: 6,
            num_content_words: 8,
            history_len: 40,
            profile_k: 8,
            user_offset_scale: 1.5,
            generation_share: 0.0,
            retrieval: Retrieval::Recency,
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<(), EnvError> {
        let fail = |msg: &str| Err(EnvError::InvalidConfig(msg.to_string()));
        if self.num_users == 0 {
            return fail("num_users must be at least 1");
        }
        if self.num_classes < 2 {
            return fail("num_classes must be at least 2");
        }
        if self.feature_dim == 0 {
            return fail("feature_dim must be at least 1");
        }
        if self.num_content_words < 6 {
            return fail("num_content_words must be at least 6");
        }
        if self.profile_k == 0 || self.history_len < self.profile_k {
            return fail("history_len must be at least profile_k, both positive");
        }
        if !(0.0..=1.0).contains(&self.generation_share) {
            return fail("generation_share must lie in [0, 1]");
        }
        Ok(())
    }
}

/// One past interaction of a user.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryItem {
    pub features: Vec<f64>,
    pub query_text: String,
    pub response_text: String,
}

/// One profile entry shown alongside a task: an earlier query and the user's
/// response to it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProfileItem {
    pub query: String,
    pub response: String,
}

/// A reasoning chain plus the final answer text.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Response {
    pub chain: String,
    pub answer: String,
}

/// One synthetic user: a private label rule (offsets on the shared class
/// prototypes), a fixed 4-token writing style, and interaction histories.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthUser {
    pub user_id: String,
    pub offsets: Vec<Vec<f64>>,
    pub style: Vec<usize>,
    pub cls_history: Vec<HistoryItem>,
    pub gen_history: Vec<HistoryItem>,
}

/// One task to answer: a query, the retrieved profile, and the gold response.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskInstance {
    pub task_id: String,
    pub kind: TaskKind,
    pub user_id: String,
    pub user_index: usize,
    pub query_features: Vec<f64>,
    pub query_text: String,
    pub profile: Vec<ProfileItem>,
    pub gold: String,
}

/// The sampled world: shared class prototypes plus per-user state.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthEnv {
    pub config: EnvConfig,
    pub class_protos: Vec<Vec<f64>>,
    pub users: Vec<SynthUser>,
}

pub(crate) const BUCKET_EDGES: [f64; 7] = [-1.15, -0.67, -0.32, 0.0, 0.32, 0.67, 1.15];

pub(crate) fn bucket(v: f64) -> usize {
    BUCKET_EDGES.iter().filter(|e| v > **e).count()
}

pub(crate) fn content_word(idx: usize) -> String {
    format!("w{idx}")
}

fn render_item_text(features: &[f64]) -> String {
    let mut out = String::from("item");
    for (j, v) in features.iter().enumerate() {
        out.push_str(&format!(" f{j}b{}", bucket(*v)));
    }
    out
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn argmax(scores: impl Iterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, s) in scores.enumerate() {
        if s > best.1 {
            best = (i, s);
        }
    }
    best.0
}

fn normal_vec(rng: &mut ChaCha8Rng, dim: usize, scale: f64) -> Vec<f64> {
    (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal) * scale).collect()
}

impl SynthEnv {
    pub fn generate(config: EnvConfig) -> Result<Self, EnvError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let class_protos: Vec<Vec<f64>> =
            (0..config.num_classes).map(|_| normal_vec(&mut rng, config.feature_dim, 1.0)).collect();
        let mut users = Vec::with_capacity(config.num_users);
        for u in 0..config.num_users {
            let offsets: Vec<Vec<f64>> = (0..config.num_classes)
                .map(|_| normal_vec(&mut rng, config.feature_dim, config.user_offset_scale))
                .collect();
            let mut word_ids: Vec<usize> = (0..config.num_content_words).collect();
            word_ids.shuffle(&mut rng);
            let style: Vec<usize> = word_ids[..4].to_vec();
            let mut user = SynthUser {
                user_id: format!("user_{u}"),
                offsets,
                style,
                cls_history: Vec::new(),
                gen_history: Vec::new(),
            };
            for _ in 0..config.history_len {
                let x = normal_vec(&mut rng, config.feature_dim, 1.0);
                let label = argmax(
                    class_protos.iter().zip(&user.offsets).map(|(p, o)| dot(p, &x) + dot(o, &x)),
                );
                user.cls_history.push(HistoryItem {
                    query_text: render_item_text(&x),
                    response_text: label.to_string(),
                    features: x,
                });
                let x = normal_vec(&mut rng, config.feature_dim, 1.0);
                let response_text = generation_gold(&x, &user.style, config.num_content_words);
                user.gen_history.push(HistoryItem {
                    query_text: render_item_text(&x),
                    response_text,
                    features: x,
                });
            }
            users.push(user);
        }
        Ok(Self { config, class_protos, users })
    }

    /// The user's private label for an item.
    pub fn user_label(&self, user_index: usize, x: &[f64]) -> usize {
        let user = &self.users[user_index];
        argmax(
            self.class_protos.iter().zip(&user.offsets).map(|(p, o)| dot(p, x) + dot(o, x)),
        )
    }

    /// The label of the shared prototype rule, ignoring all user offsets.
    pub fn majority_label(&self, x: &[f64]) -> usize {
        argmax(self.class_protos.iter().map(|p| dot(p, x)))
    }

    fn profile_for(&self, user: &SynthUser, kind: TaskKind, rng: &mut ChaCha8Rng) -> Vec<ProfileItem> {
        let history = match kind {
            TaskKind::Classification => &user.cls_history,
            TaskKind::Generation => &user.gen_history,
        };
        let k = self.config.profile_k;
        let indices: Vec<usize> = match self.config.retrieval {
            Retrieval::Recency => (history.len() - k..history.len()).collect(),
            Retrieval::Random => {
                let mut picked: Vec<usize> =
                    rand::seq::index::sample(rng, history.len(), k).into_iter().collect();
                picked.sort_unstable();
                picked
            }
        };
        indices
            .into_iter()
            .map(|i| ProfileItem {
                query: history[i].query_text.clone(),
                response: history[i].response_text.clone(),
            })
            .collect()
    }

    /// Samples one task for a given user and kind.
    pub fn sample_task(
        &self,
        user_index: usize,
        kind: TaskKind,
        task_id: &str,
        rng: &mut ChaCha8Rng,
    ) -> TaskInstance {
        let user = &self.users[user_index];
        let x = normal_vec(rng, self.config.feature_dim, 1.0);
        let profile = self.profile_for(user, kind, rng);
        let gold = match kind {
            TaskKind::Classification => self.user_label(user_index, &x).to_string(),
            TaskKind::Generation => {
                generation_gold(&x, &user.style, self.config.num_content_words)
            }
        };
        TaskInstance {
            task_id: task_id.to_string(),
            kind,
            user_id: user.user_id.clone(),
            user_index,
            query_text: render_item_text(&x),
            query_features: x,
            profile,
            gold,
        }
    }

    /// Samples a batch of tasks across random users, with the configured
    /// generation share.
    pub fn sample_tasks(&self, n: usize, prefix: &str, rng: &mut ChaCha8Rng) -> Vec<TaskInstance> {
        (0..n)
            .map(|i| {
                let user_index = rng.random_range(0..self.users.len());
                let kind = if rng.random::<f64>() < self.config.generation_share {
                    TaskKind::Generation
                } else {
                    TaskKind::Classification
                };
                self.sample_task(user_index, kind, &format!("{prefix}{i:06}"), rng)
            })
            .collect()
    }

    /// Writes the environment as JSONL: one config line, one prototype line,
    /// then one line per user.
    pub fn dump(&self, path: &std::path::Path) -> Result<(), EnvError> {
        let mut out = String::new();
        out.push_str(&serde_json::to_string(&DumpLine::Config { config: self.config.clone() })?);
        out.push('\n');
        out.push_str(&serde_json::to_string(&DumpLine::Prototypes {
            rows: self.class_protos.clone(),
        })?);
        out.push('\n');
        for user in &self.users {
            out.push_str(&serde_json::to_string(&DumpLine::User { user: user.clone() })?);
            out.push('\n');
        }
        std::fs::write(path, out)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self, EnvError> {
        let text = std::fs::read_to_string(path)?;
        let mut config = None;
        let mut protos = None;
        let mut users = Vec::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            match serde_json::from_str::<DumpLine>(line)? {
                DumpLine::Config { config: c } => config = Some(c),
                DumpLine::Prototypes { rows } => protos = Some(rows),
                DumpLine::User { user } => users.push(user),
            }
        }
        let config = config.ok_or_else(|| EnvError::BadDump("missing config line".into()))?;
        let class_protos =
            protos.ok_or_else(|| EnvError::BadDump("missing prototype line".into()))?;
        if users.len() != config.num_users {
            return Err(EnvError::BadDump(format!(
                "dump has {} users, config declares {}",
                users.len(),
                config.num_users
            )));
        }
        Ok(Self { config, class_protos, users })
    }
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum DumpLine {
    Config { config: EnvConfig },
    Prototypes { rows: Vec<Vec<f64>> },
    User { user: SynthUser },
}

/// Gold generation response: two query-determined tokens, then the user's
/// style tokens in fixed order.
fn generation_gold(x: &[f64], style: &[usize], num_words: usize) -> String {
    let mut words = vec![
        content_word(bucket(x[0]) % num_words),
        content_word((bucket(x[x.len() - 1]) + 3) % num_words),
    ];
    words.extend(style.iter().map(|s| content_word(*s)));
    words.join(" ")
}

/// Default population style used when a profile is hidden: the first four
/// content words.
fn default_style_words() -> Vec<usize> {
    vec![0, 1, 2, 3]
}

/// Emits a minimal valid tagged chain plus the best answer available:
/// the gold answer when the profile is visible, the population-default
/// answer otherwise.
pub fn oracle_respond(
    env: &SynthEnv,
    task: &TaskInstance,
    registry: &TagRegistry,
    profile_visible: bool,
) -> Response {
    let names = registry.names();
    let count = registry.min_tag_count();
    let base = bucket(task.query_features[0]);
    let style_word = match profile_visible {
        true => env.users[task.user_index].style[0],
        false => default_style_words()[0],
    };
    let mut pieces = Vec::new();
    for i in 0..count {
        let name = &names[i % names.len()];
        let word = if i == 1 {
            content_word(style_word)
        } else {
            content_word((base + i) % env.config.num_content_words)
        };
        pieces.push(format!("<{name}> {word} </{name}>"));
    }
    let answer = if profile_visible {
        task.gold.clone()
    } else {
        match task.kind {
            TaskKind::Classification => env.majority_label(&task.query_features).to_string(),
            TaskKind::Generation => generation_gold(
                &task.query_features,
                &default_style_words(),
                env.config.num_content_words,
            ),
        }
    };
    Response { chain: pieces.join(" "), answer }
}

/// Assembles the raw response text scored by the reward engine.
pub fn render_response(response: &Response, fmt: &FormatConfig) -> String {
    format!(
        "{} {} {} {}",
        fmt.think_open, response.chain, fmt.think_close, response.answer
    )
}

/// Prompt text sent to generation clients for one task.
pub fn render_prompt(task: &TaskInstance, num_classes: usize) -> String {
    let mut out = String::new();
    match task.kind {
        TaskKind::Classification => {
            out.push_str("task: classification\n");
            let options: Vec<String> = (0..num_classes).map(|c| c.to_string()).collect();
            out.push_str(&format!("options: {}\n", options.join("|")));
        }
        TaskKind::Generation => out.push_str("task: generation\n"),
    }
    for item in &task.profile {
        out.push_str(&format!("history: {} => {}\n", item.query, item.response));
    }
    out.push_str(&format!("query: {}\n", task.query_text));
    out
}

/// Stable per-task seed for deterministic derived randomness.
pub fn task_seed(seed: u64, task: &TaskInstance) -> u64 {
    seed ^ fnv1a(task.task_id.as_bytes())
}
