//! Workloads, traces and end-to-end experiment runs.

pub mod compare;
pub mod pipeline;
pub mod trace;
pub mod workload;

pub use compare::{compare_strategies, evaluate, write_comparison_csv, ComparisonRow, Variant};
pub use pipeline::{
    needle_retention, output_fidelity, prepare, run_pipeline, run_prepared, run_trace, trace_profile, LayerRow,
    PreparedRun, RunOptions, RunReport, RunSummary, Timing, TraceRun,
};
pub use trace::{TraceEncoding, TraceFile, TraceHeader, TraceLayer};
pub use workload::{generate_workload, Layout, Workload, WorkloadSpec};
