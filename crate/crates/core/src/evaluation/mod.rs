//! Segmentation quality, probability calibration and selective prediction.

mod calibration;
mod segmentation;
mod selective;

pub use calibration::{calibration, CalibrationBin, CalibrationMode, CalibrationResult, DEFAULT_BINS};
pub use segmentation::{confusion, seg_metrics, ConfusionCounts, SegMetrics};
pub use selective::{
    auroc, discard_curve, discard_curve_micro, flag_at_threshold, CurvePoint, Decision, RiskCoverageCurve,
    SelectiveSummary,
};
