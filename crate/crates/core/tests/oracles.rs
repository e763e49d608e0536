mod common;

use common::{brute_force_nms, coverage_pool, iou};
use covlm::vision::{nms, roi_pool, top_m, BoxProposal, PatchGrid};
use covlm::BBox;
use proptest::prelude::*;

fn arb_box() -> impl Strategy<Value = BBox> {
    (0.0f32..1.0, 0.0f32..1.0, 0.02f32..0.8, 0.02f32..0.8).prop_map(|(cx, cy, w, h)| BBox::new(cx, cy, w, h))
}

fn arb_proposals() -> impl Strategy<Value = Vec<BoxProposal>> {
    // Coarse scores so that ties are common.
    prop::collection::vec((arb_box(), 0u8..10), 0..40).prop_map(|v| {
        v.into_iter()
            .enumerate()
            .map(|(cell, (bbox, s))| BoxProposal { bbox, score: s as f32 / 10.0, cell })
            .collect()
    })
}

fn arb_grid() -> impl Strategy<Value = PatchGrid> {
    (1usize..9, 1usize..5).prop_flat_map(|(n, d)| {
        prop::collection::vec(-10.0f32..10.0, n * n * d).prop_map(move |features| PatchGrid { n, d, features })
    })
}

proptest! {
    #[test]
    fn nms_matches_brute_force(props in arb_proposals(), thr in 0.1f32..0.9, floor in 0.0f32..0.5) {
        prop_assert_eq!(nms(&props, thr, floor), brute_force_nms(&props, thr, floor));
    }

    #[test]
    fn nms_survivors_are_separated_and_above_floor(props in arb_proposals(), thr in 0.1f32..0.9, floor in 0.0f32..0.5) {
        let kept = nms(&props, thr, floor);
        for (i, a) in kept.iter().enumerate() {
            prop_assert!(a.score >= floor);
            for b in &kept[i + 1..] {
                prop_assert!(iou(&a.bbox, &b.bbox) <= thr as f64 + 1e-6);
                prop_assert!(a.score >= b.score);
            }
        }
        prop_assert_eq!(nms(&kept, thr, floor), kept.clone());
    }

    #[test]
    fn top_m_is_prefix_of_sorted(props in arb_proposals(), m in 1usize..10) {
        let kept = nms(&props, 1.0, 0.0);
        let top = top_m(&props, m);
        prop_assert_eq!(top.len(), m.min(props.len()));
        prop_assert_eq!(&top[..], &kept[..top.len()]);
    }

    #[test]
    fn roi_pool_matches_coverage_loop(grid in arb_grid(), bbox in arb_box()) {
        let want = coverage_pool(&grid, &bbox).expect("box inside image");
        let got = roi_pool(&grid, BoxProposal { bbox, score: 1.0, cell: 0 }).unwrap().feature;
        for (g, w) in got.iter().zip(&want) {
            prop_assert!((*g as f64 - w).abs() <= 1e-6 * w.abs().max(1.0), "{} vs {}", g, w);
        }
    }
}

#[test]
fn whole_image_roi_is_global_mean() {
    let grid = PatchGrid { n: 3, d: 2, features: (0..18).map(|i| i as f32).collect() };
    let got = roi_pool(&grid, BoxProposal::whole_image()).unwrap().feature;
    assert_eq!(got, vec![8.0, 9.0]);
}
