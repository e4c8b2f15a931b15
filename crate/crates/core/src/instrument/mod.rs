//! Diagnostics: block-norm and α traces, row and γ norms, Adam
//! first-moment variance, norm-ratio and robustness reports, a log-log
//! power-law fit, and JSONL/CSV/SVG output.

mod fit;
mod metrics;
mod svg;
mod traces;

pub use fit::{power_law_fit, PowerLawFit};
pub use metrics::{read_metrics, series_of, write_csv, MetricRecord, MetricSink};
pub use svg::line_chart;
pub use traces::{
    max_row_norm, mean_token_norm, momentum_rel_variance, norm_ratio_report, repeated_token_batch,
    robustness_probe, trace_alphas, trace_block_norms, trace_gamma_norms, trace_row_norms, MomentTrace,
    NormRatioRow, RobustnessReport, RobustnessRow,
};
