//! Closed-loop experiments: configuration, episodes, held-out evaluation and
//! the condition × seed runner.

pub mod config;
pub mod episode;
pub mod experiment;
pub mod heldout;

pub use config::{
    apply_override, parse_override, Baseline, Condition, ExperimentConfig, HeldoutSpec,
    InfoVariantName,
};
pub use episode::{initial_belief, run_episode, run_episode_with, EpisodeRecord, StepRow};
pub use experiment::{
    median, run_experiment, summarize, write_metrics_to, ExperimentReport, Summary, HELDOUT_FILE,
    HELDOUT_HEADER, METRICS_FILE, METRICS_HEADER, SUMMARY_FILE,
};
pub use heldout::{evaluate_heldout, gen_heldout, HeldoutErrors, HeldoutSet};
