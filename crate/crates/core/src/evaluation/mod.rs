//! Retrieval and localization evaluation over a query × clip grid.

mod grid;
mod metrics;
mod report;

pub use grid::{build_query_vocabulary, score_grid, worker_threads, Cell, GridClip, GridQuery, ScoreGrid};
pub use metrics::{
    acc_at_k, average_precision, average_precision_over, binarize_loc, decode_span, detected_frames, iou,
    map_cls, map_loc, ranking,
};
pub use report::{
    evaluate, length_curve_svg, probe, strata_csv, stratified_report, BucketMode, EvalReport, ProbeCurve, ProbeResult,
    StratumAxis, StratumRow,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Shortest keyword, in phonemes, admitted to the query vocabulary.
    pub min_phonemes: usize,
    pub ks: Vec<usize>,
    /// Frame binarization threshold.
    pub tau: f64,
    /// Minimum IOU for a localized detection to count.
    pub iou_threshold: f64,
    pub bucket_mode: BucketMode,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            min_phonemes: 3,
            ks: vec![1, 5],
            tau: 0.5,
            iou_threshold: 0.5,
            bucket_mode: BucketMode::Cumulative,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return Err(Error::Config(format!("tau {} outside (0, 1)", self.tau)));
        }
        if !(self.iou_threshold > 0.0 && self.iou_threshold <= 1.0) {
            return Err(Error::Config(format!(
                "iou_threshold {} outside (0, 1]",
                self.iou_threshold
            )));
        }
        if self.min_phonemes == 0 {
            return Err(Error::Config("min_phonemes must be at least 1".into()));
        }
        if self.ks.contains(&0) {
            return Err(Error::Config("k values must be at least 1".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn validation() {
        EvalConfig::default().validate().unwrap();
        let d = EvalConfig::default();
        assert!(EvalConfig { tau: 1.0, ..d.clone() }.validate().is_err());
        assert!(EvalConfig { iou_threshold: 0.0, ..d.clone() }.validate().is_err());
        assert!(EvalConfig { ks: vec![0], ..d.clone() }.validate().is_err());
        assert!(EvalConfig { min_phonemes: 0, ..d }.validate().is_err());
    }
}
