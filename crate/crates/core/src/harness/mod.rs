//! Experiment configuration, simulation with exact metrics, and file output.

pub mod experiment;
pub mod metrics;
pub mod seeding;

pub use experiment::{
    run_experiment, summarize, worker_count, write_summaries, Algo, EnvName, ExperimentConfig, SeedReport, Summary,
    THREADS_ENV_VAR,
};
pub use metrics::{
    parse_metrics_csv, read_metrics_csv, simulate, Accumulator, EpisodeNotes, MetricsHeader, MetricsLog,
    MetricsRecord, SimulationOptions, CSV_COLUMNS,
};
