//! Center-parameterized boxes, overlap, anchor-relative deltas and
//! sliding-window anchor grids.

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum BoxError {
    #[error("box extents must be positive and finite, got w={w}, h={h}")]
    NonPositiveExtent { w: f64, h: f64 },
    #[error("anchor generation: {0}")]
    AnchorConfig(String),
}

/// Axis-aligned rectangle in continuous pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self, BoxError> {
        if !(w > 0.0 && h > 0.0 && w.is_finite() && h.is_finite()) {
            return Err(BoxError::NonPositiveExtent { w, h });
        }
        Ok(Self { cx, cy, w, h })
    }

    pub fn square(cx: f64, cy: f64, side: f64) -> Result<Self, BoxError> {
        Self::new(cx, cy, side, side)
    }

    pub fn x0(&self) -> f64 {
        self.cx - self.w / 2.0
    }

    pub fn x1(&self) -> f64 {
        self.cx + self.w / 2.0
    }

    pub fn y0(&self) -> f64 {
        self.cy - self.h / 2.0
    }

    pub fn y1(&self) -> f64 {
        self.cy + self.h / 2.0
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        (x - self.cx).abs() <= self.w / 2.0 && (y - self.cy).abs() <= self.h / 2.0
    }

    pub fn intersection_area(&self, o: &BBox) -> f64 {
        let iw = (self.x1().min(o.x1()) - self.x0().max(o.x0())).max(0.0);
        let ih = (self.y1().min(o.y1()) - self.y0().max(o.y0())).max(0.0);
        iw * ih
    }

    /// Intersection with `bounds`, or `None` when they do not overlap.
    pub fn clipped_to(&self, bounds: &BBox) -> Option<BBox> {
        let x0 = self.x0().max(bounds.x0());
        let x1 = self.x1().min(bounds.x1());
        let y0 = self.y0().max(bounds.y0());
        let y1 = self.y1().min(bounds.y1());
        BBox::new((x0 + x1) / 2.0, (y0 + y1) / 2.0, x1 - x0, y1 - y0).ok()
    }
}

/// Anchor-relative encoding `(t_x, t_y, t_w, t_h)`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct BoxDelta {
    pub tx: f64,
    pub ty: f64,
    pub tw: f64,
    pub th: f64,
}

impl BoxDelta {
    pub fn new(tx: f64, ty: f64, tw: f64, th: f64) -> Self {
        Self { tx, ty, tw, th }
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.tx, self.ty, self.tw, self.th]
    }

    pub fn from_slice(v: &[f64]) -> Self {
        Self::new(v[0], v[1], v[2], v[3])
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }
}

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection_area(b);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

pub fn encode(gt: &BBox, anchor: &BBox) -> Result<BoxDelta, BoxError> {
    for b in [gt, anchor] {
        if !(b.w > 0.0 && b.h > 0.0) {
            return Err(BoxError::NonPositiveExtent { w: b.w, h: b.h });
        }
    }
    Ok(BoxDelta {
        tx: (gt.cx - anchor.cx) / anchor.w,
        ty: (gt.cy - anchor.cy) / anchor.h,
        tw: (gt.w / anchor.w).ln(),
        th: (gt.h / anchor.h).ln(),
    })
}

pub fn decode(d: &BoxDelta, anchor: &BBox) -> BBox {
    BBox {
        cx: anchor.cx + d.tx * anchor.w,
        cy: anchor.cy + d.ty * anchor.h,
        w: anchor.w * d.tw.exp(),
        h: anchor.h * d.th.exp(),
    }
}

/// Sliding-window anchor grid.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorSpec {
    pub scales: Vec<f64>,
    pub stride: f64,
}

impl Default for AnchorSpec {
    fn default() -> Self {
        Self {
            scales: vec![16.0, 20.0, 24.0, 28.0],
            stride: 4.0,
        }
    }
}

/// One anchor plus its position in the generation order.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Anchor {
    pub bbox: BBox,
    pub scale_index: usize,
    /// Rank in the unfiltered row-major (grid, scale) order.
    pub index: usize,
}

/// Square anchors on a grid centered on `region` (grid points
/// `region.center + k·stride` that lie inside `region`), one per scale,
/// kept when `iou(anchor, reference) > min_iou`. Order: grid rows top to
/// bottom, columns left to right, then scale.
pub fn generate_anchors(
    region: &BBox,
    scales: &[f64],
    stride: f64,
    reference: &BBox,
    min_iou: f64,
) -> Result<Vec<Anchor>, BoxError> {
    if scales.is_empty() {
        return Err(BoxError::AnchorConfig("no scales".into()));
    }
    if scales.iter().any(|&s| !(s > 0.0)) {
        return Err(BoxError::AnchorConfig(format!("scales must be positive: {scales:?}")));
    }
    if !(stride > 0.0) {
        return Err(BoxError::AnchorConfig(format!("stride must be positive, got {stride}")));
    }
    if !(0.0..=1.0).contains(&min_iou) {
        return Err(BoxError::AnchorConfig(format!("min_iou {min_iou} outside [0, 1]")));
    }
    let kx = (region.w / 2.0 / stride + 1e-9).floor() as i64;
    let ky = (region.h / 2.0 / stride + 1e-9).floor() as i64;
    let mut out = Vec::new();
    let mut index = 0;
    for gy in -ky..=ky {
        let cy = region.cy + gy as f64 * stride;
        for gx in -kx..=kx {
            let cx = region.cx + gx as f64 * stride;
            for (si, &s) in scales.iter().enumerate() {
                let bbox = BBox { cx, cy, w: s, h: s };
                if region.contains(cx, cy) && iou(&bbox, reference) > min_iou {
                    out.push(Anchor {
                        bbox,
                        scale_index: si,
                        index,
                    });
                }
                index += 1;
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn b(cx: f64, cy: f64, w: f64, h: f64) -> BBox {
        BBox::new(cx, cy, w, h).unwrap()
    }

    #[test]
    fn iou_examples() {
        let a = b(1.0, 1.0, 2.0, 2.0);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &b(10.0, 10.0, 2.0, 2.0)), 0.0);
        let c = b(2.0, 1.0, 2.0, 2.0);
        assert!((iou(&a, &c) - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn encode_examples() {
        let a = b(10.0, 10.0, 20.0, 20.0);
        assert_eq!(encode(&a, &a).unwrap(), BoxDelta::default());
        let wide = b(10.0, 10.0, 40.0, 20.0);
        assert!((encode(&wide, &a).unwrap().tw - 2f64.ln()).abs() < 1e-15);
        let shifted = b(20.0, 10.0, 20.0, 20.0);
        assert_eq!(encode(&shifted, &a).unwrap().tx, 0.5);
        let bad = BBox { cx: 0.0, cy: 0.0, w: 0.0, h: 1.0 };
        assert!(encode(&bad, &a).is_err());
        assert!(BBox::new(0.0, 0.0, -1.0, 2.0).is_err());
    }

    #[test]
    fn decode_examples() {
        let a = b(3.0, -4.0, 20.0, 12.0);
        assert_eq!(decode(&BoxDelta::default(), &a), a);
        let d = BoxDelta::new(0.0, 0.0, 2f64.ln(), 0.0);
        assert!((decode(&d, &a).w - 40.0).abs() < 1e-12);
    }

    #[test]
    fn degenerate_grid_yields_region() {
        let r = b(50.0, 50.0, 100.0, 100.0);
        let a = generate_anchors(&r, &[100.0], 100.0, &r, 0.0).unwrap();
        assert_eq!(a.len(), 1);
        assert_eq!(a[0].bbox, r);
    }

    #[test]
    fn iou_one_only_for_identical() {
        let r = b(50.0, 50.0, 100.0, 100.0);
        let reference = b(50.0, 50.0, 20.0, 20.0);
        let a = generate_anchors(&r, &[16.0, 24.0], 4.0, &reference, 1.0).unwrap();
        assert!(a.is_empty());
    }

    #[test]
    fn rejects_bad_config() {
        let r = b(0.0, 0.0, 10.0, 10.0);
        assert!(generate_anchors(&r, &[], 4.0, &r, 0.5).is_err());
        assert!(generate_anchors(&r, &[4.0], 4.0, &r, 1.5).is_err());
        assert!(generate_anchors(&r, &[4.0], 0.0, &r, 0.5).is_err());
    }

    fn arb_box() -> impl Strategy<Value = BBox> {
        (-200.0..200.0f64, -200.0..200.0f64, 0.5..80.0f64, 0.5..80.0f64)
            .prop_map(|(cx, cy, w, h)| BBox { cx, cy, w, h })
    }

    proptest! {
        #[test]
        fn iou_symmetric_and_bounded(a in arb_box(), c in arb_box()) {
            let x = iou(&a, &c);
            prop_assert_eq!(x, iou(&c, &a));
            prop_assert!((0.0..=1.0).contains(&x));
            prop_assert!((iou(&a, &a) - 1.0).abs() < 1e-12);
        }

        #[test]
        fn encode_decode_inverse(gt in arb_box(), an in arb_box()) {
            let back = decode(&encode(&gt, &an).unwrap(), &an);
            prop_assert!((back.cx - gt.cx).abs() < 1e-9);
            prop_assert!((back.cy - gt.cy).abs() < 1e-9);
            prop_assert!((back.w - gt.w).abs() < 1e-9);
            prop_assert!((back.h - gt.h).abs() < 1e-9);
        }

        #[test]
        fn anchors_satisfy_filter(r in arb_box(), reference in arb_box(), min_iou in 0.0..0.9f64) {
            let a = generate_anchors(&r, &[8.0, 16.0], 4.0, &reference, min_iou).unwrap();
            for an in &a {
                prop_assert!(iou(&an.bbox, &reference) > min_iou);
                prop_assert!(r.contains(an.bbox.cx, an.bbox.cy));
            }
            prop_assert!(a.windows(2).all(|w| w[0].index < w[1].index));
        }
    }
}
