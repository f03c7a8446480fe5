//! Overlap metrics, lesion-uncertainty analysis and slice rendering.

mod metrics;
mod ood;
mod render;

pub use metrics::{
    region_metrics, region_metrics_within, MetricsOptions, MetricsReport, RegionMetrics,
};
pub use ood::{auroc, ood_report, reference_mask, OodReport, REFERENCE_MARGIN};
pub use render::{heatmap_pgm, label_color, labels_ppm, render_heatmap, render_labels, Axis};
