//! COCO-style detection metrics on normalized `cxcywh` boxes.
//!
//! Protocol: at most [`MAX_DETS`] detections per image; IoU thresholds
//! `0.50:0.05:0.95`; per image and class, detections in descending score order
//! (ties in input order) greedily take the unmatched ground truth of highest
//! IoU, with `IoU >= threshold` counting as a match; precision is sampled at
//! 101 recall points after taking its monotone envelope. Area ranges mark
//! ground truths outside the range as ignored, as do unmatched detections
//! outside it. Classes with no ground truth are left out of every mean.

mod matching;
mod report;

use serde::{Deserialize, Serialize};

use crate::data::{validate_box, Annotation, Sample};
use crate::error::{ensure, Result};

pub use crate::losses::iou;
pub use matching::{average_precision, match_and_score};
pub use report::{ap_report, top_detections, ApReport, ClassAp, Metrics, ModalityAp, PrCurve};

pub const MAX_DETS: usize = 100;

/// `(50 + 5i) / 100` for `i = 0..10`.
pub fn iou_thresholds() -> [f64; 10] {
    std::array::from_fn(|i| (50 + 5 * i) as f64 / 100.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub image_id: u64,
    pub class_id: usize,
    pub score: f64,
    /// `cxcywh`, normalized.
    pub bbox: [f64; 4],
}

impl Detection {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.score.is_finite() && (0.0..=1.0).contains(&self.score),
            Validation,
            "detection score {} outside [0, 1]",
            self.score
        );
        validate_box(self.bbox)
    }
}

/// Ground truth for one image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalImage {
    pub image_id: u64,
    pub modality_id: usize,
    pub annotations: Vec<Annotation>,
}

impl From<&Sample> for EvalImage {
    fn from(s: &Sample) -> Self {
        Self {
            image_id: s.sample_id,
            modality_id: s.modality_id,
            annotations: s.annotations.clone(),
        }
    }
}

/// Area-range limits as fractions of the image area.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SizeThresholds {
    pub small: f64,
    pub medium: f64,
}

impl Default for SizeThresholds {
    /// COCO's 32² and 96² pixel limits relative to a 640 × 640 image.
    fn default() -> Self {
        Self {
            small: (32.0f64 / 640.0).powi(2),
            medium: (96.0f64 / 640.0).powi(2),
        }
    }
}

impl SizeThresholds {
    /// `[all, small, medium, large]` as inclusive `[lo, hi]` ranges.
    pub(crate) fn ranges(&self) -> [[f64; 2]; 4] {
        [
            [0.0, f64::INFINITY],
            [0.0, self.small],
            [self.small, self.medium],
            [self.medium, f64::INFINITY],
        ]
    }
}
