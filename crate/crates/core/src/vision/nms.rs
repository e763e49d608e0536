use super::BoxProposal;

/// Greedy non-maximum suppression. Candidates are visited by descending score,
/// ties by lower cell index; a candidate survives if its score reaches
/// `score_floor` and its IoU with every kept box is at most `iou_threshold`.
pub fn nms(proposals: &[BoxProposal], iou_threshold: f32, score_floor: f32) -> Vec<BoxProposal> {
    let mut order: Vec<&BoxProposal> = proposals.iter().filter(|p| p.score >= score_floor).collect();
    order.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.cell.cmp(&b.cell)));
    let mut kept: Vec<BoxProposal> = Vec::new();
    for p in order {
        if kept.iter().all(|k| k.bbox.iou(&p.bbox) <= iou_threshold) {
            kept.push(*p);
        }
    }
    kept
}

/// The `m` best survivors, score-descending.
pub fn top_m(proposals: &[BoxProposal], m: usize) -> Vec<BoxProposal> {
    let mut v = proposals.to_vec();
    v.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.cell.cmp(&b.cell)));
    v.truncate(m.max(1));
    v
}
