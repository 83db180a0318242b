//! Subcommand implementations and the run-directory artifact layout.

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tagrl_core::clients::{HttpGenerationClient, MockGenerator, MockJudge, MockTagger, RetryPolicy, ENDPOINT_VAR};
use tagrl_core::pipeline::{run_pipeline, DatasetRecord, PipelineClients};
use tagrl_core::prmu::{
    build_pqp_dataset, build_prp_dataset, pairwise_accuracy, prmu_reward, train_prmu,
    OracleResponder, PrmuInput, PrmuModel,
};
use tagrl_core::{
    build_sft_dataset, train_rl_stage, train_sft, FeatureExtractor, PolicyModel, RewardBreakdown,
    RlMetricsRow, RlStage, Vocab,
};

use crate::config::RunConfig;
use crate::error::CliError;
use crate::eval::{
    evaluate, render_report, OracleTextResponder, PolicyResponder, ReportBundle,
    UniformAnswerResponder,
};

/// File layout of one run directory.
pub struct Artifacts {
    run_dir: PathBuf,
}

impl Artifacts {
    pub fn new(run_dir: PathBuf) -> Self {
        Self { run_dir }
    }

    pub fn run_dir(&self) -> &Path {
        &self.run_dir
    }

    pub fn prmu(&self) -> PathBuf {
        self.run_dir.join("prmu.json")
    }

    pub fn sft(&self) -> PathBuf {
        self.run_dir.join("sft.json")
    }

    pub fn rl_guided(&self) -> PathBuf {
        self.run_dir.join("rl_guided.json")
    }

    pub fn rl_explore(&self) -> PathBuf {
        self.run_dir.join("rl_explore.json")
    }

    pub fn metrics_csv(&self, stage: &str) -> PathBuf {
        self.run_dir.join(format!("{stage}_metrics.csv"))
    }

    pub fn eval_bundle(&self, name: &str) -> PathBuf {
        self.run_dir.join(format!("eval_{name}.json"))
    }

    pub fn eval_csv(&self, name: &str) -> PathBuf {
        self.run_dir.join(format!("eval_{name}.csv"))
    }

    pub fn pipeline_dir(&self) -> PathBuf {
        self.run_dir.join("pipeline")
    }

    pub fn report_json(&self) -> PathBuf {
        self.run_dir.join("report.json")
    }

    pub fn report_txt(&self) -> PathBuf {
        self.run_dir.join("report.txt")
    }
}

/// Training stages in their required order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainStage {
    Prmu,
    Sft,
    RlGuided,
    RlExplore,
}

/// Which responder an evaluation runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ResponderKind {
    Policy,
    Oracle,
    Uniform,
}

fn require(path: &Path, label: &str, hint: &str) -> Result<(), CliError> {
    if path.exists() {
        return Ok(());
    }
    Err(CliError::MissingArtifact(format!(
        "{label} not found at {}; run `tagrl train --stage {hint}` first",
        path.display()
    )))
}

fn load_prmu_if_present(arts: &Artifacts) -> Result<Option<PrmuModel>, CliError> {
    let path = arts.prmu();
    if path.exists() {
        Ok(Some(PrmuModel::load(&path)?))
    } else {
        Ok(None)
    }
}

#[derive(Serialize, Deserialize)]
struct ScoredRecord {
    #[serde(flatten)]
    record: DatasetRecord,
    reward: RewardBreakdown,
}

/// Scores each JSONL record and writes it back with a `reward` block
/// appended. Malformed lines abort with a line-numbered usage error.
pub fn cmd_score(
    config: &RunConfig,
    arts: &Artifacts,
    input: &Path,
    output: &Path,
) -> Result<(), CliError> {
    let ctx = config.reward_context()?;
    let prmu = load_prmu_if_present(arts)?;
    let text = std::fs::read_to_string(input)
        .map_err(|e| CliError::Usage(format!("cannot read input {}: {e}", input.display())))?;

    let mut out = String::new();
    for (index, line) in text.lines().enumerate() {
        let record: DatasetRecord = serde_json::from_str(line)
            .map_err(|e| CliError::Usage(format!("line {}: {e}", index + 1)))?;
        let raw = format!(
            "{} {} {} {}",
            ctx.format.think_open, record.chain, ctx.format.think_close, record.answer
        );
        let r_prmu = match &prmu {
            Some(model) => prmu_reward(
                model,
                &PrmuInput {
                    user_id: &record.user_id,
                    query: &record.query,
                    profile: &record.profile,
                    chain: &record.chain,
                    answer: &record.answer,
                },
            ),
            None => 0.5,
        };
        let reward = ctx.score_response(&raw, &record.gold, record.task_kind, r_prmu);
        out.push_str(&serde_json::to_string(&ScoredRecord { record, reward })?);
        out.push('\n');
    }
    std::fs::write(output, out)?;
    println!("score: wrote {} records to {}", text.lines().count(), output.display());
    Ok(())
}

/// Runs the data pipeline. Clients default to the deterministic mocks; a
/// configured endpoint switches every role to HTTP.
pub fn cmd_pipeline(config: &RunConfig, arts: &Artifacts) -> Result<(), CliError> {
    let env = config.environment()?;
    let retry = RetryPolicy::default();
    let out_dir = arts.pipeline_dir();

    let outcome = if std::env::var(ENDPOINT_VAR).is_ok() {
        let client = HttpGenerationClient::from_env()
            .map_err(|e| CliError::Runtime(e.to_string()))?;
        let clients =
            PipelineClients { generator: &client, judge: &client, tagger: &client };
        run_pipeline(&env, &clients, &config.pipeline, &retry, &out_dir)?
    } else {
        let generator = MockGenerator::default();
        let judge = MockJudge::default();
        let tagger = MockTagger::default();
        let clients =
            PipelineClients { generator: &generator, judge: &judge, tagger: &tagger };
        run_pipeline(&env, &clients, &config.pipeline, &retry, &out_dir)?
    };

    let counts = &outcome.manifest.counts;
    println!(
        "pipeline: {} instances -> {} candidates -> {} accurate -> {} judged -> {} final",
        counts.instances,
        counts.candidates,
        counts.accuracy_survivors,
        counts.judge_survivors,
        counts.format_survivors
    );
    println!("pipeline: registry [{}]", outcome.manifest.registry.join(", "));
    println!("pipeline: dataset {}", outcome.dataset_path.display());
    println!("pipeline: manifest {}", outcome.manifest_path.display());
    Ok(())
}

fn write_loss_csv(path: &Path, stage: &str, losses: &[f64]) -> Result<(), CliError> {
    let mut out = String::from("stage,epoch,loss\n");
    for (epoch, loss) in losses.iter().enumerate() {
        out.push_str(&format!("{stage},{epoch},{loss}\n"));
    }
    std::fs::write(path, out)?;
    Ok(())
}

fn write_rl_csv(path: &Path, rows: &[RlMetricsRow]) -> Result<(), CliError> {
    let mut out = String::from("stage,epoch,batch,mean_reward,tag_compliance,mean_len,objective\n");
    for row in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            row.stage,
            row.epoch,
            row.batch,
            row.mean_reward,
            row.tag_compliance,
            row.mean_len,
            row.objective
        ));
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Trains one stage, writing its checkpoint and metrics CSV. Stage order
/// is enforced through checkpoint prerequisites.
pub fn cmd_train(config: &RunConfig, arts: &Artifacts, stage: TrainStage) -> Result<(), CliError> {
    let env = config.environment()?;
    match stage {
        TrainStage::Prmu => {
            let registry = config.registry.build()?;
            let oracle = OracleResponder { env: &env, registry: &registry };
            let mut pairs = build_prp_dataset(&env, &oracle, config.prmu.prp_pairs, config.seed)?;
            pairs.extend(build_pqp_dataset(&env, &oracle, config.prmu.pqp_pairs, config.seed)?);
            let mut model = PrmuModel::new(config.prmu.feature_dim, config.prmu.init_seed);
            let losses = train_prmu(&mut model, &pairs, &config.prmu.train)?;
            model.save(&arts.prmu())?;
            write_loss_csv(&arts.metrics_csv("prmu"), "prmu", &losses)?;
            println!(
                "prmu: {} pairs, final loss {:.6}, training pairwise accuracy {:.4}",
                pairs.len(),
                losses.last().copied().unwrap_or(f64::NAN),
                pairwise_accuracy(&model, &pairs)
            );
            println!("prmu: checkpoint {}", arts.prmu().display());
        }
        TrainStage::Sft => {
            let registry = config.registry.build()?;
            let vocab = Vocab::for_env(&registry, &config.format, &config.env)?;
            let extractor = FeatureExtractor::new(&config.env, &vocab);
            let examples = build_sft_dataset(
                &env,
                &registry,
                &config.format,
                &extractor,
                &vocab,
                config.sft.examples,
                config.seed,
            )?;
            let mut model = PolicyModel::new(vocab, extractor.feature_dim());
            let losses = train_sft(&mut model, &examples, &config.sft.train)?;
            model.save(&arts.sft())?;
            write_loss_csv(&arts.metrics_csv("sft"), "sft", &losses)?;
            println!(
                "sft: {} examples, final loss {:.6}",
                examples.len(),
                losses.last().copied().unwrap_or(f64::NAN)
            );
            println!("sft: checkpoint {}", arts.sft().display());
        }
        TrainStage::RlGuided => {
            require(&arts.sft(), "sft checkpoint", "sft")?;
            require(&arts.prmu(), "prmu checkpoint", "prmu")?;
            let mut model = PolicyModel::load(&arts.sft())?;
            let prmu = PrmuModel::load(&arts.prmu())?;
            let extractor = FeatureExtractor::new(&config.env, &model.vocab);
            let ctx = config.reward_context()?;
            let rows = train_rl_stage(
                &mut model,
                &extractor,
                &env,
                RlStage::Guided,
                &ctx,
                Some(&prmu),
                &config.guided,
                config.seed,
            )?;
            model.save(&arts.rl_guided())?;
            write_rl_csv(&arts.metrics_csv("rl_guided"), &rows)?;
            report_last_row(&rows, "rl-guided");
            println!("rl-guided: checkpoint {}", arts.rl_guided().display());
        }
        TrainStage::RlExplore => {
            require(&arts.rl_guided(), "guided rl checkpoint", "rl-guided")?;
            let mut model = PolicyModel::load(&arts.rl_guided())?;
            let extractor = FeatureExtractor::new(&config.env, &model.vocab);
            let ctx = config.reward_context()?;
            let rows = train_rl_stage(
                &mut model,
                &extractor,
                &env,
                RlStage::Exploratory,
                &ctx,
                None,
                &config.explore,
                config.seed,
            )?;
            model.save(&arts.rl_explore())?;
            write_rl_csv(&arts.metrics_csv("rl_explore"), &rows)?;
            report_last_row(&rows, "rl-explore");
            println!("rl-explore: checkpoint {}", arts.rl_explore().display());
        }
    }
    Ok(())
}

fn report_last_row(rows: &[RlMetricsRow], label: &str) {
    if let Some(row) = rows.last() {
        println!(
            "{label}: mean reward {:.4}, tag compliance {:.4}, mean length {:.2}",
            row.mean_reward, row.tag_compliance, row.mean_len
        );
    }
}

fn sanitize_name(name: &str) -> String {
    let cleaned: String = name
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '_' || c == '-' { c } else { '-' })
        .collect();
    if cleaned.is_empty() { "eval".to_string() } else { cleaned }
}

fn eval_csv_text(bundle: &ReportBundle) -> String {
    let mut out = String::from("metric,value\n");
    out.push_str(&format!("tasks,{}\n", bundle.tasks));
    let pairs = [
        ("accuracy", bundle.metrics.accuracy),
        ("macro_f1", bundle.metrics.macro_f1),
        ("mae", bundle.metrics.mae),
        ("rmse", bundle.metrics.rmse),
        ("rouge1", bundle.metrics.rouge1),
        ("rouge_l", bundle.metrics.rouge_l),
        ("chain_length_mean", Some(bundle.chain_length.mean)),
        ("chain_length_median", Some(bundle.chain_length.median)),
        ("reward_composite_mean", Some(bundle.reward_means.composite)),
    ];
    for (name, value) in pairs {
        if let Some(value) = value {
            out.push_str(&format!("{name},{value}\n"));
        }
    }
    out
}

/// Evaluates one responder on the held-out task set and writes the bundle
/// as JSON plus a flat CSV.
pub fn cmd_eval(
    config: &RunConfig,
    arts: &Artifacts,
    responder: ResponderKind,
    checkpoint: Option<&Path>,
    name: Option<&str>,
) -> Result<(), CliError> {
    let env = config.environment()?;
    let ctx = config.reward_context()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.eval.seed);
    let tasks = env.sample_tasks(config.eval.tasks, "eval", &mut rng);
    let prmu = load_prmu_if_present(arts)?;

    let bundle = match responder {
        ResponderKind::Policy => {
            let path = checkpoint.ok_or_else(|| {
                CliError::Usage("--checkpoint is required with --responder policy".to_string())
            })?;
            if !path.exists() {
                return Err(CliError::MissingArtifact(format!(
                    "policy checkpoint not found at {}",
                    path.display()
                )));
            }
            let model = PolicyModel::load(path)?;
            let extractor = FeatureExtractor::new(&config.env, &model.vocab);
            let default_name =
                path.file_stem().map(|s| s.to_string_lossy().to_string()).unwrap_or_default();
            let bundle_name = sanitize_name(name.unwrap_or(&default_name));
            let responder = PolicyResponder {
                model: &model,
                extractor: &extractor,
                max_len: config.eval.max_len,
            };
            evaluate(&bundle_name, &tasks, &responder, &ctx, prmu.as_ref())?
        }
        ResponderKind::Oracle => {
            let responder =
                OracleTextResponder { env: &env, registry: &ctx.registry, fmt: &ctx.format };
            evaluate(&sanitize_name(name.unwrap_or("oracle")), &tasks, &responder, &ctx, prmu.as_ref())?
        }
        ResponderKind::Uniform => {
            let responder = UniformAnswerResponder {
                registry: &ctx.registry,
                fmt: &ctx.format,
                classes: config.env.num_classes,
                content_words: config.env.num_content_words,
                seed: config.eval.seed,
            };
            evaluate(&sanitize_name(name.unwrap_or("uniform")), &tasks, &responder, &ctx, prmu.as_ref())?
        }
    };

    let json_path = arts.eval_bundle(&bundle.name);
    std::fs::write(&json_path, serde_json::to_string_pretty(&bundle)? + "\n")?;
    std::fs::write(arts.eval_csv(&bundle.name), eval_csv_text(&bundle))?;
    if let Some(accuracy) = bundle.metrics.accuracy {
        println!("eval {}: accuracy {:.4} over {} tasks", bundle.name, accuracy, bundle.tasks);
    } else {
        println!("eval {}: {} generation tasks", bundle.name, bundle.tasks);
    }
    println!("eval {}: bundle {}", bundle.name, json_path.display());
    Ok(())
}

/// Merges every evaluation bundle in the run directory into one report.
pub fn cmd_report(arts: &Artifacts) -> Result<(), CliError> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(arts.run_dir())?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|path| {
            path.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("eval_") && n.ends_with(".json"))
        })
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(CliError::MissingArtifact(format!(
            "no evaluation bundles (eval_*.json) in {}; run `tagrl eval` first",
            arts.run_dir().display()
        )));
    }
    let mut bundles = Vec::with_capacity(paths.len());
    for path in &paths {
        let bundle: ReportBundle = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        bundles.push(bundle);
    }
    let text = render_report(&bundles);
    std::fs::write(arts.report_txt(), &text)?;
    std::fs::write(arts.report_json(), serde_json::to_string_pretty(&bundles)? + "\n")?;
    print!("{text}");
    println!("report: {}", arts.report_txt().display());
    Ok(())
}
