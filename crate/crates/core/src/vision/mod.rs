//! Patch encoder, hidden-state-conditioned detection head, NMS, and ROI pooling.

mod detector;
mod encoder;
mod loss;
mod nms;
mod roi;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::BBox;
use crate::numerics::NumericsError;

pub use detector::{proposals_from_raw, DetectionContext, Detector};
pub use encoder::PatchEncoder;
pub use loss::{assign_cells, detection_loss};
pub use nms::{nms, top_m};
pub use roi::{roi_cells, roi_pool, RoiFeature};

#[derive(Debug, Error)]
pub enum VisionError {
    #[error("config: {0}")]
    Config(String),
    #[error("expected dimension {expected}, found {found}")]
    DimMismatch { expected: usize, found: usize },
    #[error("box {0:?} does not intersect the image")]
    EmptyIntersection(BBox),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VisionConfig {
    /// Square input side in pixels.
    pub image_size: usize,
    /// Patches per side.
    pub grid: usize,
    pub dim: usize,
}

impl Default for VisionConfig {
    fn default() -> Self {
        Self { image_size: 64, grid: 8, dim: 64 }
    }
}

impl VisionConfig {
    pub fn patch_size(&self) -> usize {
        self.image_size / self.grid
    }

    pub fn cells(&self) -> usize {
        self.grid * self.grid
    }

    pub fn check(&self) -> Result<(), VisionError> {
        if self.grid == 0 || self.dim == 0 || self.image_size == 0 {
            return Err(VisionError::Config("image size, grid and dim must be positive".into()));
        }
        if self.image_size % self.grid != 0 {
            return Err(VisionError::Config(format!(
                "image size {} not divisible by grid {}",
                self.image_size, self.grid
            )));
        }
        Ok(())
    }
}

/// `N x N x D` patch features, row-major over cells.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchGrid {
    pub n: usize,
    pub d: usize,
    pub features: Vec<f32>,
}

impl PatchGrid {
    pub fn cell(&self, i: usize) -> &[f32] {
        &self.features[i * self.d..(i + 1) * self.d]
    }
}

/// A decoded box with its confidence and the grid cell that produced it.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxProposal {
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub score: f32,
    pub cell: usize,
}

impl BoxProposal {
    pub fn whole_image() -> Self {
        Self { bbox: BBox::WHOLE_IMAGE, score: 0.0, cell: 0 }
    }
}
