use serde::{Deserialize, Serialize};

use super::{BoxProposal, PatchGrid, VisionError};
use crate::geometry::BBox;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoiFeature {
    pub feature: Vec<f32>,
    pub source: BoxProposal,
}

/// Overlap areas within this relative distance of each other count as tied.
const TIE_TOLERANCE: f32 = 1e-5;

/// Cells whose patch centers lie inside `bbox`; if none do, the single cell
/// with the largest overlap (lowest index on ties).
pub fn roi_cells(bbox: &BBox, grid: usize) -> Result<Vec<usize>, VisionError> {
    if !(bbox.intersection_area(&BBox::WHOLE_IMAGE) > 0.0) {
        return Err(VisionError::EmptyIntersection(*bbox));
    }
    let n = grid as f32;
    let covered: Vec<usize> = (0..grid * grid)
        .filter(|&i| bbox.contains_point(((i % grid) as f32 + 0.5) / n, ((i / grid) as f32 + 0.5) / n))
        .collect();
    if !covered.is_empty() {
        return Ok(covered);
    }
    let mut best = (0, 0.0f32);
    for i in 0..grid * grid {
        let (r, c) = ((i / grid) as f32, (i % grid) as f32);
        let patch = BBox::from_corners(c / n, r / n, (c + 1.0) / n, (r + 1.0) / n);
        let a = bbox.intersection_area(&patch);
        if a > best.1 * (1.0 + TIE_TOLERANCE) {
            best = (i, a);
        }
    }
    Ok(vec![best.0])
}

/// Mean of the covered patch features.
pub fn roi_pool(grid: &PatchGrid, source: BoxProposal) -> Result<RoiFeature, VisionError> {
    let cells = roi_cells(&source.bbox, grid.n)?;
    let mut feature = vec![0.0f32; grid.d];
    for &i in &cells {
        for (f, &x) in feature.iter_mut().zip(grid.cell(i)) {
            *f += x;
        }
    }
    let inv = 1.0 / cells.len() as f32;
    feature.iter_mut().for_each(|f| *f *= inv);
    Ok(RoiFeature { feature, source })
}
