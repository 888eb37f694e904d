//! Enhancement methods, quality metrics and sweep reports.

mod metrics;
mod pipeline;
mod report;

pub use metrics::{log_spectral_distance, mask_mse, mean_std, si_sdr, snr_db};
pub use pipeline::{run_method, EnhancementMethod, MethodOutput, MethodParams, MetricsRow, SnrDomain};
pub use report::{
    evaluate, format_value, load_manifest_scenes, sort_rows, summarize, thread_cap, write_report,
    SceneInput, SummaryRow, ROW_COLUMNS, THREADS_ENV,
};
