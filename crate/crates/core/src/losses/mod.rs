//! Set-prediction objective: Hungarian matching plus focal, L1 and GIoU terms.

mod box_ops;
mod detection;
mod hungarian;

pub use box_ops::{giou, giou_on_tape, iou};
pub use detection::{build_cost_matrix, detection_loss, focal_loss, LossBreakdown, LossWeights, P_CLAMP};
pub use hungarian::{hungarian, CostMatrix, Matching};
