//! Classification metrics and class activation maps.

mod cam;
mod metrics;

pub use cam::{
    grad_cam, jet, normalize_map, render_overlay, write_heatmap_pgm, write_ppm, CamHeatmap, CAM_SIZE, OVERLAY_ALPHA,
};
pub use metrics::{accuracy, confusion, mean_age_l1, prf1, ClassMetrics, ConfusionMatrix, MetricsReport};
