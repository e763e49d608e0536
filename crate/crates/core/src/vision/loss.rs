use super::{proposals_from_raw, VisionError};
use crate::geometry::BBox;
use crate::numerics::{Scalar, Tape, Var};

/// Positive cells: the cell containing each ground-truth center. When several
/// boxes share a cell, the one best overlapping that cell's prediction wins.
/// Returns `(cell, gt index)` pairs in cell order.
pub fn assign_cells<T: Scalar>(raw: &[T], gt: &[BBox], grid: usize) -> Vec<(usize, usize)> {
    let mut preds = proposals_from_raw(raw, grid);
    preds.sort_by_key(|p| p.cell);
    let mut best: Vec<Option<(usize, f32)>> = vec![None; grid * grid];
    for (gi, g) in gt.iter().enumerate() {
        let idx = |v: f32| ((v * grid as f32).floor() as isize).clamp(0, grid as isize - 1) as usize;
        let cell = idx(g.cy) * grid + idx(g.cx);
        let iou = preds[cell].bbox.iou(g);
        if best[cell].is_none_or(|(_, b)| iou > b) {
            best[cell] = Some((gi, iou));
        }
    }
    best.iter().enumerate().filter_map(|(c, b)| b.map(|(g, _)| (c, g))).collect()
}

/// Objectness BCE averaged over all cells plus the mean `1 - IoU` over
/// positive cells. `raw` is the `[N^2, 5]` head output.
pub fn detection_loss<T: Scalar>(tape: &mut Tape<T>, raw: Var, gt: &[BBox], grid: usize) -> Result<Var, VisionError> {
    let cells = grid * grid;
    if tape.shape(raw) != [cells, 5] {
        return Err(VisionError::Config(format!("head output {:?}, expected [{cells}, 5]", tape.shape(raw))));
    }
    let pos = assign_cells(tape.value(raw), gt, grid);
    let mut targets = vec![T::zero(); cells];
    for &(c, _) in &pos {
        targets[c] = T::one();
    }
    let obj = tape.slice_cols(raw, 4, 5)?;
    let bce = tape.bce_with_logits(obj, targets)?;
    if pos.is_empty() {
        return Ok(bce);
    }

    let rows = tape.gather_rows(raw, pos.iter().map(|&(c, _)| Some(c)).collect())?;
    let s = tape.sigmoid(rows)?;
    let inv_n = T::from_f64(1.0 / grid as f64);
    let sx = tape.slice_cols(s, 0, 1)?;
    let cols: Vec<T> = pos.iter().map(|&(c, _)| T::from_f64((c % grid) as f64)).collect();
    let cx = tape.add_const(sx, &cols)?;
    let cx = tape.scale(cx, inv_n)?;
    let sy = tape.slice_cols(s, 1, 2)?;
    let rows_off: Vec<T> = pos.iter().map(|&(c, _)| T::from_f64((c / grid) as f64)).collect();
    let cy = tape.add_const(sy, &rows_off)?;
    let cy = tape.scale(cy, inv_n)?;
    let wh = tape.slice_cols(s, 2, 4)?;
    let boxes = tape.concat_cols(&[cx, cy, wh])?;
    let target_boxes = pos
        .iter()
        .map(|&(_, g)| gt[g].to_array().map(|v| T::from_f64(v as f64)))
        .collect();
    let iou = tape.box_iou(boxes, target_boxes)?;
    let mean_iou = tape.mean(iou)?;
    let miss = tape.scale(mean_iou, -T::one())?;
    let miss = tape.add_const(miss, &[T::one()])?;
    Ok(tape.add(bce, miss)?)
}
