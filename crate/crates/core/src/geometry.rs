use serde::{Deserialize, Serialize};

/// Axis-aligned box in normalized image coordinates, center format.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f32; 4]", into = "[f32; 4]")]
pub struct BBox {
    pub cx: f32,
    pub cy: f32,
    pub w: f32,
    pub h: f32,
}

impl From<[f32; 4]> for BBox {
    fn from(v: [f32; 4]) -> Self {
        Self { cx: v[0], cy: v[1], w: v[2], h: v[3] }
    }
}

impl From<BBox> for [f32; 4] {
    fn from(b: BBox) -> Self {
        [b.cx, b.cy, b.w, b.h]
    }
}

impl BBox {
    pub const WHOLE_IMAGE: BBox = BBox { cx: 0.5, cy: 0.5, w: 1.0, h: 1.0 };

    pub fn new(cx: f32, cy: f32, w: f32, h: f32) -> Self {
        Self { cx, cy, w, h }
    }

    pub fn from_corners(x0: f32, y0: f32, x1: f32, y1: f32) -> Self {
        Self { cx: 0.5 * (x0 + x1), cy: 0.5 * (y0 + y1), w: x1 - x0, h: y1 - y0 }
    }

    pub fn x0(&self) -> f32 {
        self.cx - 0.5 * self.w
    }

    pub fn x1(&self) -> f32 {
        self.cx + 0.5 * self.w
    }

    pub fn y0(&self) -> f32 {
        self.cy - 0.5 * self.h
    }

    pub fn y1(&self) -> f32 {
        self.cy + 0.5 * self.h
    }

    pub fn area(&self) -> f32 {
        self.w * self.h
    }

    pub fn to_array(self) -> [f32; 4] {
        self.into()
    }

    /// Center inside the unit square, positive extent at most 1, and a
    /// non-empty intersection with the image.
    pub fn is_valid(&self) -> bool {
        let finite = [self.cx, self.cy, self.w, self.h].iter().all(|v| v.is_finite());
        finite
            && (0.0..=1.0).contains(&self.cx)
            && (0.0..=1.0).contains(&self.cy)
            && self.w > 0.0
            && self.w <= 1.0
            && self.h > 0.0
            && self.h <= 1.0
            && self.intersection_area(&Self::WHOLE_IMAGE) > 0.0
    }

    pub fn intersection_area(&self, other: &BBox) -> f32 {
        let iw = (self.x1().min(other.x1()) - self.x0().max(other.x0())).max(0.0);
        let ih = (self.y1().min(other.y1()) - self.y0().max(other.y0())).max(0.0);
        iw * ih
    }

    pub fn iou(&self, other: &BBox) -> f32 {
        let inter = self.intersection_area(other);
        // Areas from the same corner arithmetic as the intersection, so that
        // identical boxes give exactly 1.
        let area = |b: &BBox| (b.x1() - b.x0()) * (b.y1() - b.y0());
        let union = area(self) + area(other) - inter;
        if union <= 0.0 {
            0.0
        } else {
            (inter / union).clamp(0.0, 1.0)
        }
    }

    pub fn contains_point(&self, x: f32, y: f32) -> bool {
        x >= self.x0() && x <= self.x1() && y >= self.y0() && y <= self.y1()
    }

    /// Clips to the unit square, keeping center format.
    pub fn clipped(&self) -> BBox {
        let x0 = self.x0().clamp(0.0, 1.0);
        let x1 = self.x1().clamp(0.0, 1.0);
        let y0 = self.y0().clamp(0.0, 1.0);
        let y1 = self.y1().clamp(0.0, 1.0);
        BBox::from_corners(x0, y0, x1, y1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn arb_box() -> impl Strategy<Value = BBox> {
        (0.0f32..=1.0, 0.0f32..=1.0, 0.01f32..=1.0, 0.01f32..=1.0).prop_map(|(cx, cy, w, h)| BBox::new(cx, cy, w, h))
    }

    proptest! {
        #[test]
        fn iou_symmetric_and_bounded(a in arb_box(), b in arb_box()) {
            let ab = a.iou(&b);
            prop_assert_eq!(ab, b.iou(&a));
            prop_assert!((0.0..=1.0).contains(&ab));
        }

        #[test]
        fn iou_self_is_one(a in arb_box()) {
            prop_assert!((a.iou(&a) - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn disjoint_boxes_have_zero_iou() {
        let a = BBox::from_corners(0.0, 0.0, 0.2, 0.2);
        let b = BBox::from_corners(0.5, 0.5, 0.7, 0.7);
        assert_eq!(a.iou(&b), 0.0);
    }

    #[test]
    fn serializes_as_array() {
        let b = BBox::new(0.25, 0.5, 0.125, 1.0);
        assert_eq!(serde_json::to_string(&b).unwrap(), "[0.25,0.5,0.125,1.0]");
    }
}
