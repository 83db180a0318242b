//! Core library: tagged reasoning-chain grammar, text metrics, composite
//! rewards, a personalization reward model, a toy sequence policy with
//! clipped group-relative training, a data construction pipeline, and a
//! synthetic personalization environment.

pub mod clients;
pub mod gradcheck;
mod hashing;
pub mod pipeline;
pub mod policy;
pub mod prmu;
pub mod reward;
pub mod synth;
pub mod tag_grammar;
pub mod text_metrics;

pub use clients::{
    complete_with_retry, ClientError, GenerationClient, HttpGenerationClient, MockGenerator,
    MockJudge, MockTagger, RetryPolicy, API_KEY_VAR, ENDPOINT_VAR, TAG_FAMILIES,
};
pub use pipeline::{
    accuracy_filter, derive_primary_tags, embed_tag, embed_tags, exploratory_tagging,
    format_filter, generate_candidates, judge_filter, kmeans, normalize_tag, parse_judge_score,
    render_tagged_chain, restricted_tagging, run_pipeline, sample_report, split_steps,
    write_dataset, DatasetRecord, JudgeScore, KmeansOutcome, PipelineClients, PipelineConfig,
    PipelineError, PipelineManifest, PipelineOutcome, PipelineRecord, Provenance, StageCounts,
    StageFlags,
};
pub use policy::{
    build_sft_dataset, greedy_sequence, gspo_objective_and_grad, gspo_ratio, gspo_term,
    sample_sequence, sequence_logprob, sequence_logprob_grad, sft_loss_and_grad, sft_step,
    standardize_advantages, train_rl_stage, train_sft, FeatureExtractor, GspoConfig, PolicyError,
    PolicyModel, PromptFeatures, RlMetricsRow, RlStage, Rollout, RolloutGroup, SftConfig,
    SftExample, Symbol, Vocab, POLICY_CHECKPOINT_VERSION,
};
pub use prmu::{
    bt_grad, bt_loss, build_pqp_dataset, build_prp_dataset, featurize, pairwise_accuracy,
    prmu_reward, sigmoid, train_prmu, FeatureVector, OracleResponder, PreferenceGenerator,
    PreferencePair, PrmuError, PrmuGradient, PrmuInput, PrmuModel, PrmuTrainConfig,
    UserEmbeddingTable, DEFAULT_FEATURE_DIM,
};
pub use reward::{
    composite_reward, foundation_reward, format_reward, repetition_penalty, tag_reward,
    verifiable_reward, FormatConfig, RepetitionConfig, RewardBreakdown, RewardContext,
    RewardWeights, TaskKind,
};
pub use synth::{
    oracle_respond, render_prompt, render_response, EnvConfig, EnvError, ProfileItem, Response,
    Retrieval, SynthEnv, SynthUser, TaskInstance,
};
pub use tag_grammar::{
    parse_chain, tag_histogram, validate, TagRegistry, TaggedChain, TagSpan, ValidationReport,
    Violation, ViolationKind,
};
pub use text_metrics::{
    classification_metrics, ngram_stats, rouge1, rouge_l, tokenize, Metrics, MetricsError,
    NGramStats, TokenSeq,
};
