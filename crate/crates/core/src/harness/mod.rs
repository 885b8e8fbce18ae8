//! Experiment configuration, external trace ingestion and report emission.

pub mod experiment;
pub mod report;
pub mod trace;

pub use experiment::{
    run_experiment, run_stepwise_experiment, AnalyzeTraceSpec, EstimateSpec, ExperimentSpec,
    InterveneSpec, LogitPair, PromptSource, StepwiseSpec,
};
pub use report::{emit_report, parse_csv, Metadata, Report, ReportFormat, ReportRow, CSV_HEADER};
pub use trace::{export_stepwise_trace, ingest_trace, LayerTag, TraceData, TraceRecord};
