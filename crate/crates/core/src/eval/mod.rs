//! Metrics, experiment drivers, plots and the synthetic benchmark.

mod config;
mod experiment;
mod metrics;
mod plot;
pub mod synthetic;

pub use config::{DataConfig, EncoderConfig, EncoderKind, ExperimentConfig};
pub use experiment::{
    build_encoder, config_hash, open_knowledge, read_attention_exports, run_ablation, run_experiment, sweep_dir,
    sweep_k, toy_vocabulary, Aggregate, Experiment, ExperimentReport, SeedResult, SeedRun, SWEEP_KS,
};
pub use metrics::{compute_metrics, evaluate, mean_std, predicted_label, Metrics};
pub use plot::{bar_chart_svg, emit_plots, heatmap_matrix, heatmap_svg};
