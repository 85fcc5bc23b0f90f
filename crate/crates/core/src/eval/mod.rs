//! Episodic evaluation: episode sampling, per-episode FSL relabeling and
//! scoring, synthetic datasets and feature colorization.

pub mod colorize;
mod episodes;
mod metrics;
mod runner;
pub mod synth;

pub use episodes::{sample_episodes, Episode, SupportItem};
pub use metrics::{iou, map50_95, retrieval_accuracy, ImageEval, MapResult, IOU_THRESHOLDS};
pub use runner::{
    run_episode, run_episodes, support_samples, EpisodeResult, EvalData, EvalSummary, ImageInputs,
    MetricSummary,
};
