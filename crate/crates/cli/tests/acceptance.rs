//! Release acceptance suite: one integration test per shipping criterion.
//! Each test prints a single pass or fail line; see them all with
//! `cargo test -p tagrl-cli --test acceptance -- --nocapture --test-threads=1`.

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;
use tagrl_cli::eval::{evaluate, render_report, PolicyResponder};
use tagrl_core::gradcheck::max_gradient_error;
use tagrl_core::{
    bt_grad, bt_loss, build_pqp_dataset, build_prp_dataset, build_sft_dataset, composite_reward,
    foundation_reward, format_reward, greedy_sequence, gspo_objective_and_grad, gspo_ratio,
    gspo_term, judge_filter, kmeans, ngram_stats, pairwise_accuracy, parse_chain,
    repetition_penalty, rouge1, rouge_l, run_pipeline, sample_sequence, sft_loss_and_grad,
    standardize_advantages, tag_reward, tokenize, train_prmu, train_rl_stage, train_sft, validate,
    verifiable_reward, ClientError, DatasetRecord, EnvConfig, FeatureExtractor, FormatConfig,
    GenerationClient, GspoConfig, MockGenerator, MockJudge, MockTagger, OracleResponder,
    PipelineClients, PipelineConfig, PipelineManifest, PipelineRecord, PolicyModel,
    PreferencePair, PrmuInput, PrmuModel, PrmuTrainConfig, ProfileItem, RepetitionConfig,
    Response, RetryPolicy, RewardContext, RewardWeights, RlStage, RolloutGroup, SftConfig,
    SftExample, StageCounts, StageFlags, Symbol, SynthEnv, TagRegistry, TaskInstance, TaskKind,
    ViolationKind, Vocab,
};

/// Collects failed requirements for one criterion and reports them as a
/// single line, enforcing the criterion's wall-clock budget.
struct Check {
    label: &'static str,
    budget: Option<Duration>,
    started: Instant,
    failures: Vec<String>,
}

impl Check {
    fn new(label: &'static str, budget_secs: Option<u64>) -> Self {
        Self {
            label,
            budget: budget_secs.map(Duration::from_secs),
            started: Instant::now(),
            failures: Vec::new(),
        }
    }

    fn require(&mut self, ok: bool, detail: impl Into<String>) {
        if !ok {
            self.failures.push(detail.into());
        }
    }

    fn finish(mut self) {
        let elapsed = self.started.elapsed();
        if let Some(budget) = self.budget {
            if elapsed > budget {
                self.failures.push(format!("took {elapsed:.1?}, budget {budget:?}"));
            }
        }
        if self.failures.is_empty() {
            println!("{}: pass ({elapsed:.1?})", self.label);
        } else {
            let detail = self.failures.join("; ");
            println!("{}: FAIL ({elapsed:.1?}) {detail}", self.label);
            panic!("{}: {detail}", self.label);
        }
    }
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

#[test]
fn c01_worked_scoring_examples() {
    let mut c = Check::new("criterion 01 worked scoring examples", Some(5));

    let single = parse_chain("<analyze_input>x</analyze_input>ans");
    c.require(single.spans.len() == 1, "single span count");
    c.require(
        single.spans.first().is_some_and(|s| s.name == "analyze_input" && s.body == "x"),
        "single span name and body",
    );
    c.require(single.answer == "ans", "single span answer");

    let empty = parse_chain("");
    c.require(empty.spans.is_empty() && empty.answer.is_empty(), "empty text parses to nothing");

    let two = parse_chain("<a>1</a><b>2</b>tail");
    c.require(two.spans.len() == 2, "two span count");
    c.require(
        two.spans.len() == 2
            && two.spans[0].name == "a"
            && two.spans[0].body == "1"
            && two.spans[1].name == "b"
            && two.spans[1].body == "2",
        "two span contents",
    );
    c.require(two.answer == "tail", "two span answer");

    let registry =
        TagRegistry::new(["analyze_input", "examine_examples", "identify_patterns"], 3).unwrap();
    let clean_text = "<analyze_input>a</analyze_input><examine_examples>b</examine_examples>\
                      <identify_patterns>c</identify_patterns>done";
    c.require(
        validate(&parse_chain(clean_text), &registry).is_clean(),
        "three registered tags validate clean",
    );
    let unknown_text = "<analyze_input>a</analyze_input><mystery_step>b</mystery_step>\
                        <identify_patterns>c</identify_patterns>done";
    let report = validate(&parse_chain(unknown_text), &registry);
    c.require(
        report.violations.iter().any(|v| v.kind == ViolationKind::UnknownTag),
        "unregistered tag is flagged",
    );
    let short_text =
        "<analyze_input>a</analyze_input><examine_examples>b</examine_examples>done";
    let report = validate(&parse_chain(short_text), &registry);
    c.require(
        report.violations.iter().any(|v| v.kind == ViolationKind::BelowMinCount),
        "two spans fall below the minimum of three",
    );

    c.require(
        tokenize("The cat, sat.").tokens() == ["the", "cat", "sat"],
        "tokenize lowercases and strips punctuation",
    );
    c.require(tokenize("").tokens().is_empty(), "tokenize of empty text");
    c.require(tokenize("a-b c").tokens() == ["a", "b", "c"], "hyphen splits tokens");

    let repeated = ["loop"; 10].join(" ");
    let stats = ngram_stats(&tokenize(&repeated), 4).unwrap();
    c.require(stats.total == 7 && stats.unique == 1, "repeated tokens share one window");
    let stats = ngram_stats(&tokenize("a b c d e f g h i j"), 4).unwrap();
    c.require(stats.total == 7 && stats.unique == 7, "distinct tokens keep all windows");
    let stats = ngram_stats(&tokenize("a b c"), 4).unwrap();
    c.require(stats.total == 0 && stats.unique == 0, "short text has no windows");

    c.require(close(rouge1("the cat sat", "the cat sat"), 1.0, 1e-9), "rouge1 identical");
    c.require(close(rouge1("dog", "cat"), 0.0, 1e-9), "rouge1 disjoint");
    c.require(
        close(rouge1("the cat on mat", "the cat sat on mat"), 8.0 / 9.0, 1e-9),
        "rouge1 partial overlap",
    );
    c.require(close(rouge_l("a b c d", "a b c d"), 1.0, 1e-9), "rouge_l identical");
    c.require(close(rouge_l("b a d c", "a b c d"), 0.5, 1e-9), "rouge_l reordering halves f1");
    c.require(close(rouge_l("", "a b"), 0.0, 1e-9), "rouge_l empty candidate");

    c.require(
        close(verifiable_reward("sci-fi", "sci-fi", TaskKind::Classification), 1.0, 0.0),
        "classification exact match",
    );
    c.require(
        close(verifiable_reward(" Sci-Fi ", "sci-fi", TaskKind::Classification), 1.0, 0.0),
        "classification normalizes case and whitespace",
    );
    c.require(
        close(
            verifiable_reward("likes short answers", "likes short answers", TaskKind::Generation),
            1.0,
            1e-9,
        ),
        "generation identical text",
    );

    let fmt = FormatConfig::default();
    let canonical = "<think> <analyze_input> a </analyze_input> </think> yes";
    c.require(close(format_reward(canonical, &fmt), 1.0, 0.0), "canonical format accepted");
    c.require(close(format_reward("<think> a", &fmt), 0.0, 0.0), "missing close marker rejected");
    c.require(
        close(format_reward("<think> a </think> x <think> b </think> y", &fmt), 0.0, 0.0),
        "second reasoning block rejected",
    );

    let rep = RepetitionConfig::default();
    c.require(
        close(repetition_penalty(&repeated, &rep), -6.0 / (7.0 + 1e-6), 1e-12),
        "fully repeated text penalty",
    );
    c.require(close(repetition_penalty("a b c d e f g h i j", &rep), 0.0, 0.0), "distinct text");
    c.require(close(repetition_penalty("a b c", &rep), 0.0, 0.0), "text below the window size");

    c.require(close(tag_reward(clean_text, &registry, &fmt), 0.0, 0.0), "clean chain scores 0");
    c.require(
        close(tag_reward(unknown_text, &registry, &fmt), -1.0, 0.0),
        "unregistered tag scores -1",
    );
    c.require(
        close(tag_reward(short_text, &registry, &fmt), -1.0, 0.0),
        "too few spans score -1",
    );

    let weights = RewardWeights::default();
    c.require(
        close(composite_reward(1.0, 1.0, 0.0, 0.0, 0.5, &weights), 0.9, 1e-12),
        "composite with full marks",
    );
    c.require(
        close(composite_reward(1.0, 0.0, 0.0, -1.0, 0.5, &weights), -0.7, 1e-12),
        "composite with failed format and dirty tags",
    );
    c.require(
        close(composite_reward(0.0, 0.0, 0.0, 0.0, 0.5, &weights), 0.1, 1e-12),
        "composite from the personalization term alone",
    );
    c.require(close(foundation_reward(1.0, 0.0, 1.0), 1.0, 0.0), "foundation full marks");
    c.require(close(foundation_reward(1.0, 0.0, 0.0), 0.0, 0.0), "foundation gated by format");
    c.require(close(foundation_reward(0.6, -0.2, 1.0), 0.4, 1e-12), "foundation partial credit");

    c.finish();
}

#[test]
fn c02_composite_reward_bounds() {
    let mut c = Check::new("criterion 02 composite reward bounds", Some(5));
    let weights = RewardWeights::default();
    c.require(
        composite_reward(1.0, 1.0, 0.0, 0.0, 1.0, &weights) == 1.0,
        "best case reaches exactly 1",
    );
    c.require(
        close(composite_reward(0.0, 1.0, -1.0, -1.0, 0.0, &weights), -1.6, 1e-12),
        "worst case reaches exactly -1.6",
    );

    let mut rng = ChaCha8Rng::seed_from_u64(20_260_822);
    let mut out_of_range = 0usize;
    for _ in 0..10_000 {
        let r_v: f64 = rng.random();
        let r_rep = -rng.random::<f64>();
        let r_f = if rng.random::<bool>() { 1.0 } else { 0.0 };
        let r_tag = if rng.random::<bool>() { 0.0 } else { -1.0 };
        let r_prmu: f64 = rng.random();
        let total = composite_reward(r_v, r_f, r_rep, r_tag, r_prmu, &weights);
        if !(-1.6..=1.0).contains(&total) {
            out_of_range += 1;
        }
        let base = foundation_reward(r_v, r_rep, r_f);
        if !(-1.0..=1.0).contains(&base) {
            out_of_range += 1;
        }
    }
    c.require(out_of_range == 0, format!("{out_of_range} samples left the documented range"));
    c.finish();
}

const SOUP: [&str; 20] = [
    "prefers", "short", "replies", "detailed", "walkthrough", "steps", "concise", "summary",
    "rambling", "anecdote", "tangent", "bullet", "list", "formal", "casual", "tone", "example",
    "driven", "answer", "first",
];

fn word_soup(rng: &mut ChaCha8Rng, lo: usize, hi: usize) -> String {
    let len = rng.random_range(lo..hi);
    (0..len).map(|_| SOUP[rng.random_range(0..SOUP.len())]).collect::<Vec<_>>().join(" ")
}

#[test]
fn c03_preference_gradient_check() {
    let mut c = Check::new("criterion 03 preference gradient check", Some(30));
    let dim = 12usize;
    let users = ["u0", "u1", "u2"];
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let w: Vec<f64> = (0..dim).map(|_| rng.random::<f64>() - 0.5).collect();
        let b = rng.random::<f64>() - 0.5;
        let mut entries = serde_json::Map::new();
        for user in users {
            let embedding: Vec<f64> = (0..dim).map(|_| rng.random::<f64>() - 0.5).collect();
            entries.insert(user.to_string(), json!(embedding));
        }
        // The checkpoint layout doubles as a constructor for arbitrary
        // parameter values; sigma_init 0 keeps lookups off the init path.
        let model_value = json!({
            "dim": dim,
            "w": w,
            "b": b,
            "users": { "dim": dim, "sigma_init": 0.0, "init_seed": 0, "entries": entries },
        });
        let model: PrmuModel = serde_json::from_value(model_value.clone()).unwrap();

        let mut pairs = Vec::new();
        for _ in 0..8 {
            pairs.push(PreferencePair {
                user_id: users[rng.random_range(0..users.len())].to_string(),
                kind: TaskKind::Classification,
                query: word_soup(&mut rng, 3, 8),
                profile: vec![ProfileItem {
                    query: word_soup(&mut rng, 3, 8),
                    response: word_soup(&mut rng, 3, 8),
                }],
                gold: "gold".to_string(),
                preferred: Response {
                    chain: word_soup(&mut rng, 3, 8),
                    answer: word_soup(&mut rng, 3, 8),
                },
                rejected: Response {
                    chain: word_soup(&mut rng, 3, 8),
                    answer: word_soup(&mut rng, 3, 8),
                },
            });
        }

        let grad = bt_grad(&model, &pairs).unwrap();
        let touched: Vec<(String, Vec<f64>)> =
            grad.users.iter().map(|(k, v)| (k.clone(), v.clone())).collect();
        let mut analytic = grad.w.clone();
        analytic.push(grad.b);
        for (_, gvec) in &touched {
            analytic.extend_from_slice(gvec);
        }
        let err = max_gradient_error(&analytic, 1e-5, |idx, delta| {
            let mut v = model_value.clone();
            if idx < dim {
                let base = v["w"][idx].as_f64().unwrap();
                v["w"][idx] = json!(base + delta);
            } else if idx == dim {
                let base = v["b"].as_f64().unwrap();
                v["b"] = json!(base + delta);
            } else {
                let rest = idx - dim - 1;
                let uid = touched[rest / dim].0.as_str();
                let j = rest % dim;
                let base = v["users"]["entries"][uid][j].as_f64().unwrap();
                v["users"]["entries"][uid][j] = json!(base + delta);
            }
            let shifted: PrmuModel = serde_json::from_value(v).unwrap();
            bt_loss(&shifted, &pairs).unwrap()
        });
        worst = worst.max(err);
    }
    c.require(worst < 1e-4, format!("max relative error {worst:.3e}"));
    c.finish();
}

fn marker_pair(user: &str, good: &str, bad: &str) -> PreferencePair {
    PreferencePair {
        user_id: user.to_string(),
        kind: TaskKind::Classification,
        query: String::new(),
        profile: Vec::new(),
        gold: String::new(),
        preferred: Response { chain: String::new(), answer: good.to_string() },
        rejected: Response { chain: String::new(), answer: bad.to_string() },
    }
}

fn separable_pairs(n: usize, seed: u64) -> Vec<PreferencePair> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let noise_a = format!("w{}", rng.random_range(0..30));
            let noise_b = format!("w{}", rng.random_range(0..30));
            marker_pair(
                &format!("u{}", i % 4),
                &format!("crisp {noise_a}"),
                &format!("mushy {noise_b}"),
            )
        })
        .collect()
}

fn coin_pairs(n: usize, seed: u64) -> Vec<PreferencePair> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let text = |rng: &mut ChaCha8Rng| {
                format!(
                    "w{} w{} w{}",
                    rng.random_range(0..40),
                    rng.random_range(0..40),
                    rng.random_range(0..40)
                )
            };
            let good = text(&mut rng);
            let bad = text(&mut rng);
            marker_pair(&format!("u{}", i % 5), &good, &bad)
        })
        .collect()
}

#[test]
fn c04_preference_personalization() {
    let mut c = Check::new("criterion 04 preference personalization", Some(120));

    // Identical candidate texts with opposite preferred sides: only the
    // user embeddings can carry the disagreement.
    let mut pairs = Vec::new();
    for i in 0..120 {
        let a = marker_pair(
            "likes_crisp",
            &format!("crisp q{}", i % 7),
            &format!("mushy q{}", (i + 3) % 7),
        );
        let mut b = a.clone();
        b.user_id = "likes_mushy".to_string();
        std::mem::swap(&mut b.preferred, &mut b.rejected);
        pairs.push(a);
        pairs.push(b);
    }
    let mut model = PrmuModel::new(64, 21);
    train_prmu(&mut model, &pairs, &PrmuTrainConfig::default()).unwrap();
    let probe = |model: &PrmuModel, user: &str, answer: &str| {
        model.score(&PrmuInput { user_id: user, query: "", profile: &[], chain: "", answer })
    };
    let gap_a = probe(&model, "likes_crisp", "crisp") - probe(&model, "likes_crisp", "mushy");
    let gap_b = probe(&model, "likes_mushy", "crisp") - probe(&model, "likes_mushy", "mushy");
    c.require(
        gap_a > 0.0 && gap_b < 0.0,
        format!("per-user score gaps {gap_a:.3} / {gap_b:.3} must have opposite signs"),
    );
    let taste_acc = pairwise_accuracy(&model, &pairs);
    c.require(taste_acc >= 0.9, format!("opposite-taste accuracy {taste_acc:.3}"));

    // A marker token on the preferred side must be learnable to held-out
    // accuracy 0.95.
    let train = separable_pairs(300, 1);
    let held_out = separable_pairs(100, 2);
    let mut separable = PrmuModel::new(64, 7);
    train_prmu(&mut separable, &train, &PrmuTrainConfig::default()).unwrap();
    let held_acc = pairwise_accuracy(&separable, &held_out);
    c.require(held_acc >= 0.95, format!("held-out accuracy {held_acc:.3}"));

    // An untrained model must sit near chance on symmetric random pairs.
    let untrained = PrmuModel::new(64, 77);
    let coin = coin_pairs(500, 5);
    let coin_acc = pairwise_accuracy(&untrained, &coin);
    c.require(
        (coin_acc - 0.5).abs() <= 0.05,
        format!("untrained accuracy {coin_acc:.3} strays from chance"),
    );
    c.finish();
}

fn small_env() -> SynthEnv {
    SynthEnv::generate(EnvConfig {
        seed: 5,
        num_users: 2,
        num_classes: 2,
        feature_dim: 3,
        num_content_words: 6,
        history_len: 8,
        profile_k: 4,
        ..EnvConfig::default()
    })
    .unwrap()
}

#[test]
fn c05_ratio_and_clipping_algebra() {
    let mut c = Check::new("criterion 05 ratio and clipping algebra", None);
    let env = small_env();
    let registry = TagRegistry::new(["alpha_step", "beta_step"], 1).unwrap();
    let fmt = FormatConfig::default();
    let vocab = Vocab::for_env(&registry, &fmt, &env.config).unwrap();
    let extractor = FeatureExtractor::new(&env.config, &vocab);
    let cfg = GspoConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(550);
    let tasks = env.sample_tasks(4, "alg-", &mut rng);

    let mut model = PolicyModel::new(vocab.clone(), extractor.feature_dim());
    for w in &mut model.weights {
        *w = 0.4 * (rng.random::<f64>() - 0.5);
    }

    let mut ratio_drift = 0.0f64;
    for i in 0..20 {
        let prompt = extractor.encode(&tasks[i % tasks.len()]);
        let rollout = sample_sequence(&model, &prompt, &cfg, &mut rng);
        ratio_drift =
            ratio_drift.max((gspo_ratio(&model, &model, &prompt, &rollout.symbols) - 1.0).abs());
    }
    c.require(ratio_drift <= 1e-12, format!("ratio at the old policy drifts {ratio_drift:.2e}"));

    let advantages = standardize_advantages(&[0.7; 5], cfg.eps_std);
    c.require(advantages.iter().all(|a| *a == 0.0), "constant rewards must zero the advantages");
    let spread = standardize_advantages(&[1.0, 2.0, 3.0], cfg.eps_std);
    let unit = 1.5f64.sqrt();
    c.require(
        close(spread[0], -unit, 1e-12)
            && close(spread[1], 0.0, 1e-12)
            && close(spread[2], unit, 1e-12),
        format!("population standardization gave {spread:?}"),
    );

    let prompt = extractor.encode(&tasks[0]);
    let rollouts: Vec<_> = (0..5).map(|_| sample_sequence(&model, &prompt, &cfg, &mut rng)).collect();
    let group = RolloutGroup { prompt: prompt.clone(), rollouts, advantages };
    let (objective, grad) = gspo_objective_and_grad(&model, &model, &[group], &cfg).unwrap();
    let grad_peak = grad.iter().fold(0.0f64, |m, g| m.max(g.abs()));
    c.require(
        objective.abs() <= 1e-12 && grad_peak <= 1e-12,
        format!("zero advantages left objective {objective:.2e}, gradient {grad_peak:.2e}"),
    );

    let hi = (0.004f64 / 4.0).exp();
    let lo = (-0.004f64 / 4.0).exp();
    c.require(
        gspo_term(hi, 1.0, &cfg) == 1.0 + cfg.eps_high,
        "upper clip binds for a positive advantage",
    );
    c.require(
        gspo_term(hi, -1.0, &cfg) == -hi,
        "upper clip must not rescue a negative advantage",
    );
    c.require(
        gspo_term(lo, 1.0, &cfg) == lo,
        "lower clip must not rescue a positive advantage",
    );
    c.require(
        gspo_term(lo, -1.0, &cfg) == -(1.0 - cfg.eps_low),
        "lower clip binds for a negative advantage",
    );
    c.finish();
}

#[test]
fn c06_policy_gradient_check() {
    let mut c = Check::new("criterion 06 policy gradient check", Some(30));
    let env = small_env();
    let registry = TagRegistry::new(["alpha_step", "beta_step"], 1).unwrap();
    let fmt = FormatConfig::default();
    let vocab = Vocab::for_env(&registry, &fmt, &env.config).unwrap();
    let extractor = FeatureExtractor::new(&env.config, &vocab);
    let mut rng = ChaCha8Rng::seed_from_u64(660);
    let tasks = env.sample_tasks(8, "fd-", &mut rng);

    let mut worst = 0.0f64;
    for _ in 0..100 {
        let mut model = PolicyModel::new(vocab.clone(), extractor.feature_dim());
        for w in &mut model.weights {
            *w = 0.2 * (rng.random::<f64>() - 0.5);
        }
        let mut examples = Vec::new();
        for _ in 0..rng.random_range(2..5) {
            let task = &tasks[rng.random_range(0..tasks.len())];
            let len = rng.random_range(3..7);
            let mut target = Vec::new();
            while target.len() < len {
                let sym = vocab.symbol(rng.random_range(0..vocab.size()));
                if sym != Symbol::End {
                    target.push(sym);
                }
            }
            target.push(Symbol::End);
            examples.push(SftExample { features: extractor.encode(task), target });
        }
        let refs: Vec<&SftExample> = examples.iter().collect();
        let (_, grad) = sft_loss_and_grad(&model, &refs).unwrap();
        let err = max_gradient_error(&grad, 1e-5, |idx, delta| {
            let mut shifted = model.clone();
            shifted.weights[idx] += delta;
            sft_loss_and_grad(&shifted, &refs).unwrap().0
        });
        worst = worst.max(err);
    }
    c.require(worst < 1e-4, format!("max relative error {worst:.3e}"));
    c.finish();
}

/// Greedy-decode accuracy and tag-compliance rate over a task set.
fn greedy_metrics(
    model: &PolicyModel,
    extractor: &FeatureExtractor,
    ctx: &RewardContext,
    tasks: &[TaskInstance],
    max_len: usize,
) -> (f64, f64) {
    let mut correct = 0.0;
    let mut compliant = 0.0;
    for task in tasks {
        let prompt = extractor.encode(task);
        let rollout = greedy_sequence(model, &prompt, max_len);
        let breakdown = ctx.score_response(&rollout.rendered, &task.gold, task.kind, 0.5);
        if breakdown.r_v == 1.0 {
            correct += 1.0;
        }
        if breakdown.r_tag == 0.0 {
            compliant += 1.0;
        }
    }
    let n = tasks.len() as f64;
    (correct / n, compliant / n)
}

#[test]
fn c07_two_stage_training_gains() {
    let mut c = Check::new("criterion 07 two-stage training gains", Some(600));
    let env = SynthEnv::generate(EnvConfig {
        profile_k: 32,
        history_len: 40,
        ..EnvConfig::default()
    })
    .unwrap();
    let registry = TagRegistry::default();
    let fmt = FormatConfig::default();
    let vocab = Vocab::for_env(&registry, &fmt, &env.config).unwrap();
    let extractor = FeatureExtractor::new(&env.config, &vocab);
    let ctx =
        RewardContext { registry: registry.clone(), format: fmt.clone(), ..Default::default() };
    let mut rng = ChaCha8Rng::seed_from_u64(555);
    let held = env.sample_tasks(400, "c7-held-", &mut rng);

    // One epoch instills the response skeleton but leaves accuracy headroom
    // for the reward-driven stages.
    let examples =
        build_sft_dataset(&env, &registry, &fmt, &extractor, &vocab, 500, 20250).unwrap();
    let mut model = PolicyModel::new(vocab.clone(), extractor.feature_dim());
    train_sft(&mut model, &examples, &SftConfig { lr: 0.1, epochs: 1, batch_size: 32, seed: 11 })
        .unwrap();
    let (warm_acc, _) = greedy_metrics(&model, &extractor, &ctx, &held, 24);

    let oracle = OracleResponder { env: &env, registry: &registry };
    let mut prmu = PrmuModel::new(128, 3);
    let mut pairs = build_prp_dataset(&env, &oracle, 150, 7).unwrap();
    pairs.extend(build_pqp_dataset(&env, &oracle, 150, 7).unwrap());
    train_prmu(&mut prmu, &pairs, &PrmuTrainConfig::default()).unwrap();

    let guided_cfg = GspoConfig {
        lr: 0.02,
        epochs: 10,
        batches_per_epoch: 40,
        batch_size: 32,
        ..GspoConfig::default()
    };
    train_rl_stage(&mut model, &extractor, &env, RlStage::Guided, &ctx, Some(&prmu), &guided_cfg, 31)
        .unwrap();
    let (guided_acc, guided_comp) = greedy_metrics(&model, &extractor, &ctx, &held, 24);

    let explore_cfg = GspoConfig {
        lr: 0.02,
        epochs: 1,
        batches_per_epoch: 40,
        batch_size: 32,
        ..GspoConfig::default()
    };
    train_rl_stage(&mut model, &extractor, &env, RlStage::Exploratory, &ctx, None, &explore_cfg, 32)
        .unwrap();
    let (explore_acc, _) = greedy_metrics(&model, &extractor, &ctx, &held, 24);

    c.require(guided_comp >= 0.99, format!("tag compliance {guided_comp:.4} below 0.99"));
    c.require(
        guided_acc >= 1.0 / 3.0 + 0.30,
        format!("accuracy {guided_acc:.4} within 0.30 of chance"),
    );
    c.require(
        guided_acc >= warm_acc + 0.05,
        format!("guided {guided_acc:.4} did not clear warm start {warm_acc:.4} by 0.05"),
    );
    c.require(
        explore_acc >= guided_acc - 0.02,
        format!("exploratory stage slipped {guided_acc:.4} -> {explore_acc:.4}"),
    );
    c.finish();
}

struct ThresholdJudge;

impl GenerationClient for ThresholdJudge {
    fn complete(
        &self,
        prompt: &str,
        n: usize,
        _temperature: f64,
        _seed: u64,
    ) -> Result<Vec<String>, ClientError> {
        // 4+4+4+c, with c smuggled in through the query text.
        let conciseness = if prompt.contains("q-at-threshold") { 3 } else { 4 };
        Ok(vec![
            format!(
                "{{\"logical_consistency\":4,\"factual_accuracy\":4,\
                 \"completeness\":4,\"conciseness\":{conciseness}}}"
            );
            n
        ])
    }
}

fn handmade_record(query: &str) -> PipelineRecord {
    PipelineRecord {
        task_id: "t0".to_string(),
        task_kind: TaskKind::Classification,
        user_id: "u0".to_string(),
        query: query.to_string(),
        profile: Vec::new(),
        gold: "g".to_string(),
        candidate: "<think> <alpha_step> x </alpha_step> </think> g".to_string(),
        chain_text: "<alpha_step> x </alpha_step>".to_string(),
        answer: "g".to_string(),
        steps: vec!["x".to_string()],
        exploratory_tags: Vec::new(),
        final_steps: Vec::new(),
        final_tags: Vec::new(),
        judge_composite: None,
        flags: StageFlags::default(),
    }
}

#[test]
fn c08_pipeline_determinism_and_integrity() {
    let mut c = Check::new("criterion 08 pipeline determinism and integrity", Some(60));
    let env = SynthEnv::generate(EnvConfig::default()).unwrap();
    let cfg = PipelineConfig {
        instances_per_task: 40,
        rollouts_per_instance: 4,
        parallelism: 2,
        ..PipelineConfig::default()
    };
    let generator = MockGenerator::default();
    let judge = MockJudge::default();
    let tagger = MockTagger::default();
    let clients = PipelineClients { generator: &generator, judge: &judge, tagger: &tagger };
    let retry = RetryPolicy::default();
    let dir = tempfile::tempdir().unwrap();

    let run = |sub: &str| {
        let outcome = run_pipeline(&env, &clients, &cfg, &retry, &dir.path().join(sub)).unwrap();
        let bytes = std::fs::read(&outcome.dataset_path).unwrap();
        let manifest: PipelineManifest =
            serde_json::from_str(&std::fs::read_to_string(&outcome.manifest_path).unwrap())
                .unwrap();
        (bytes, manifest)
    };
    let (bytes_a, manifest) = run("one");
    let (bytes_b, _) = run("two");
    c.require(bytes_a == bytes_b, "same config must give byte-identical datasets");

    let counts = &manifest.counts;
    c.require(
        counts.candidates >= counts.accuracy_survivors
            && counts.accuracy_survivors >= counts.judge_survivors
            && counts.judge_survivors >= counts.tagged_records
            && counts.tagged_records >= counts.format_survivors,
        format!("stage counts must shrink monotonically: {counts:?}"),
    );
    c.require(counts.format_survivors > 0, "pipeline produced no records");

    let registry = TagRegistry::new(manifest.registry.clone(), manifest.min_tag_count).unwrap();
    let text = String::from_utf8(bytes_a).unwrap();
    let mut records = 0usize;
    let mut dirty = 0usize;
    let mut weak = 0usize;
    for line in text.lines() {
        let record: DatasetRecord = serde_json::from_str(line).unwrap();
        records += 1;
        if !validate(&parse_chain(&record.chain), &registry).is_clean() {
            dirty += 1;
        }
        if record.provenance.judge_composite <= manifest.config.judge_threshold {
            weak += 1;
        }
    }
    c.require(
        records == counts.format_survivors,
        format!("{records} dataset lines vs {} survivors", counts.format_survivors),
    );
    c.require(dirty == 0, format!("{dirty} records fail registry validation"));
    c.require(weak == 0, format!("{weak} records at or below the judge threshold"));

    // A composite exactly at the threshold must drop; one point above stays.
    let mut stub_counts = StageCounts::default();
    let survivors = judge_filter(
        vec![handmade_record("q-at-threshold"), handmade_record("q-above")],
        &ThresholdJudge,
        &PipelineConfig::default(),
        &retry,
        &mut stub_counts,
    )
    .unwrap();
    c.require(
        survivors.len() == 1 && survivors[0].query == "q-above",
        format!("strict judge cut kept {} records", survivors.len()),
    );
    c.require(
        survivors.first().is_some_and(|r| r.judge_composite == Some(16)),
        "surviving composite must be recorded on the record",
    );
    c.finish();
}

#[test]
fn c09_kmeans_behavior() {
    let mut c = Check::new("criterion 09 kmeans behavior", Some(10));
    let mut rng = ChaCha8Rng::seed_from_u64(990);
    let vectors: Vec<Vec<f64>> =
        (0..1000).map(|_| (0..16).map(|_| rng.random::<f64>()).collect()).collect();
    let outcome = kmeans(&vectors, 9, 5, 50).unwrap();
    c.require(outcome.assignments.len() == 1000, "one assignment per vector");
    c.require(outcome.assignments.iter().all(|&a| a < 9), "assignments index the centroids");
    c.require(
        outcome.inertia_trace.windows(2).all(|w| w[1] <= w[0] + 1e-9),
        format!("inertia rose along the trace: {:?}", outcome.inertia_trace),
    );

    let clouds: Vec<Vec<f64>> = (0..100)
        .map(|i| {
            let center = if i < 50 { 0.0 } else { 10.0 };
            (0..8).map(|_| center + 0.2 * (rng.random::<f64>() - 0.5)).collect()
        })
        .collect();
    let split = kmeans(&clouds, 2, 11, 50).unwrap();
    let (first, second) = (split.assignments[0], split.assignments[50]);
    c.require(first != second, "separated clouds must land in different clusters");
    c.require(split.assignments[..50].iter().all(|&a| a == first), "first cloud split up");
    c.require(split.assignments[50..].iter().all(|&a| a == second), "second cloud split up");

    let single = kmeans(&vectors, 1, 3, 10).unwrap();
    let mut mean = vec![0.0f64; 16];
    for v in &vectors {
        for (m, x) in mean.iter_mut().zip(v) {
            *m += x;
        }
    }
    for m in &mut mean {
        *m /= 1000.0;
    }
    let drift = single.centroids[0]
        .iter()
        .zip(&mean)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f64, f64::max);
    c.require(drift <= 1e-12, format!("k=1 centroid is {drift:.2e} from the mean"));
    c.finish();
}

#[test]
fn c10_report_statistics() {
    let mut c = Check::new("criterion 10 report statistics", None);
    let env = SynthEnv::generate(EnvConfig {
        profile_k: 32,
        history_len: 40,
        ..EnvConfig::default()
    })
    .unwrap();
    let registry = TagRegistry::default();
    let fmt = FormatConfig::default();
    let vocab = Vocab::for_env(&registry, &fmt, &env.config).unwrap();
    let extractor = FeatureExtractor::new(&env.config, &vocab);
    let ctx =
        RewardContext { registry: registry.clone(), format: fmt.clone(), ..Default::default() };
    let mut rng = ChaCha8Rng::seed_from_u64(808);
    let held = env.sample_tasks(200, "c10-held-", &mut rng);

    let examples =
        build_sft_dataset(&env, &registry, &fmt, &extractor, &vocab, 500, 40410).unwrap();
    let mut model = PolicyModel::new(vocab.clone(), extractor.feature_dim());
    train_sft(&mut model, &examples, &SftConfig { lr: 0.1, epochs: 2, batch_size: 32, seed: 11 })
        .unwrap();
    let warm_model = model.clone();

    let oracle = OracleResponder { env: &env, registry: &registry };
    let mut prmu = PrmuModel::new(128, 3);
    let mut pairs = build_prp_dataset(&env, &oracle, 100, 9).unwrap();
    pairs.extend(build_pqp_dataset(&env, &oracle, 100, 9).unwrap());
    train_prmu(&mut prmu, &pairs, &PrmuTrainConfig::default()).unwrap();

    let cfg = GspoConfig {
        lr: 0.02,
        epochs: 4,
        batches_per_epoch: 40,
        batch_size: 32,
        ..GspoConfig::default()
    };
    train_rl_stage(&mut model, &extractor, &env, RlStage::Guided, &ctx, Some(&prmu), &cfg, 41)
        .unwrap();

    let warm_responder =
        PolicyResponder { model: &warm_model, extractor: &extractor, max_len: 24 };
    let rl_responder = PolicyResponder { model: &model, extractor: &extractor, max_len: 24 };
    let warm_bundle = evaluate("sft", &held, &warm_responder, &ctx, None).unwrap();
    let rl_bundle = evaluate("rl", &held, &rl_responder, &ctx, None).unwrap();

    let warm_mass: f64 = warm_bundle.tag_frequency.values().sum();
    let rl_mass: f64 = rl_bundle.tag_frequency.values().sum();
    c.require(close(warm_mass, 1.0, 1e-9), format!("warm-start tag share mass {warm_mass}"));
    c.require(close(rl_mass, 1.0, 1e-9), format!("trained tag share mass {rl_mass}"));
    c.require(
        rl_bundle.chain_length.mean <= warm_bundle.chain_length.mean,
        format!(
            "trained chains ({}) longer than warm-start chains ({})",
            rl_bundle.chain_length.mean, warm_bundle.chain_length.mean
        ),
    );
    let report = render_report(&[warm_bundle, rl_bundle]);
    c.require(report.contains("sft") && report.contains("rl"), "report must cover both runs");
    c.finish();
}
