//! Answer scoring, prompt rendering for each prompting method, demonstration
//! ordering, and the seeded experiment runner.

pub mod metrics;
pub mod prompt;
pub mod report;
pub mod runner;
pub mod stats;

pub use metrics::{exact_match, extract_answer, normalize_answer, token_f1};
pub use prompt::{order_examples, render_prompt, Method, OrderPolicy, PromptError, PromptParts};
pub use runner::{
    retrieve_demonstrations, sample_queries,
    run_experiment, run_shot_sweep, EvalContext, EvalError, ExperimentConfig, ExperimentReport, ExperimentRun,
    RetrieverKind, Transcript, SHOT_SWEEP,
};
pub use stats::{
    coverage_report, order_sensitivity, population_std, rank_histogram, CoverageReport, EvalScores,
    OrderSensitivity, RankHistogram,
};
