//! Attention dispersion, critical nodes, masking ablations and
//! distribution-shift measures.

mod critical;
mod report;
mod stats;

pub use critical::{
    find_critical, mask_selection, masked_evaluate, CriticalReason, CriticalSet, CriticalThresholds, MaskMode,
    MaskSpec, MaskStats, MaskedReport,
};
pub use report::{
    attention_diagnostics, dump_attention, query_row_metrics, shift_report, window_embeddings, write_diagnostics,
    DiagRow, DiagSummary, DiagnosticsConfig, RowMetrics, ShiftConfig, ShiftReport,
};
pub use stats::{
    attention_entropy, critical_mass, mmd, pearson_r, positive_normalized, row_entropy, topk_critical_proportion,
    Bandwidth, MmdResult, POSITIVE_EPS,
};
