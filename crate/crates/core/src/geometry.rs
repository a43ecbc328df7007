//! Anchor and box geometry.
//!
//! Boxes are center–size rectangles in pixel units. Anchors carry an initial
//! size per feature-map cell and aspect ratio; a per-cell scale coefficient
//! multiplies width and height while leaving the center fixed. Encode/decode
//! translate between boxes and the dimensionless regression offsets the
//! network predicts.

use crate::{Error, Result, Scalar};

/// Axis-aligned box as center coordinates plus width and height, in pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BBox<S: Scalar> {
    pub x: S,
    pub y: S,
    pub w: S,
    pub h: S,
}

impl<S: Scalar> BBox<S> {
    pub fn new(x: S, y: S, w: S, h: S) -> Result<Self> {
        if w <= S::zero() || h <= S::zero() {
            return Err(Error::DegenerateBox);
        }
        Ok(Self { x, y, w, h })
    }

    /// Corner coordinates `(x1, y1, x2, y2)`.
    pub fn corners(&self) -> (S, S, S, S) {
        let half = S::of(0.5);
        (
            self.x - self.w * half,
            self.y - self.h * half,
            self.x + self.w * half,
            self.y + self.h * half,
        )
    }

    pub fn area(&self) -> S {
        self.w * self.h
    }

    pub fn diagonal(&self) -> S {
        (self.w * self.w + self.h * self.h).sqrt()
    }

    /// Clips the box to `[0, w] × [0, h]` image bounds, preserving validity
    /// by flooring extents at a tiny positive size.
    pub fn clip(&self, image_w: S, image_h: S) -> Self {
        let (x1, y1, x2, y2) = self.corners();
        let x1 = x1.max(S::zero());
        let y1 = y1.max(S::zero());
        let x2 = x2.min(image_w).max(x1 + S::of(1e-6));
        let y2 = y2.min(image_h).max(y1 + S::of(1e-6));
        let half = S::of(0.5);
        Self {
            x: (x1 + x2) * half,
            y: (y1 + y2) * half,
            w: x2 - x1,
            h: y2 - y1,
        }
    }
}

/// An initial anchor: base box plus its grid cell and aspect-ratio slot.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnchorBox<S: Scalar> {
    pub base: BBox<S>,
    pub grid_row: usize,
    pub grid_col: usize,
    pub ratio_index: usize,
}

/// Dimensionless regression offsets `(Δx, Δy, Δw, Δh)`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Offsets<S: Scalar> {
    pub dx: S,
    pub dy: S,
    pub dw: S,
    pub dh: S,
}

impl<S: Scalar> Offsets<S> {
    pub fn new(dx: S, dy: S, dw: S, dh: S) -> Result<Self> {
        let o = Self { dx, dy, dw, dh };
        if o.is_finite() {
            Ok(o)
        } else {
            Err(Error::NonFinite("offsets".into()))
        }
    }

    pub fn is_finite(&self) -> bool {
        self.dx.is_finite() && self.dy.is_finite() && self.dw.is_finite() && self.dh.is_finite()
    }
}

/// Per-anchor match result; `matched_gt` is present iff the anchor is positive.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatchAssignment<S: Scalar> {
    pub anchor_index: usize,
    pub matched_gt: Option<usize>,
    pub iou: S,
}

impl<S: Scalar> MatchAssignment<S> {
    pub fn is_positive(&self) -> bool {
        self.matched_gt.is_some()
    }
}

/// Anchor-count accounting for the single-layer vs pyramid comparison.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AnchorBudget {
    pub single_layer: bool,
    pub layer_sizes: Vec<usize>,
    pub anchors_per_cell: usize,
    pub total: usize,
}

/// Upstream loss gradients with respect to the four decoded box coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoxGrad<S: Scalar> {
    pub gx: S,
    pub gy: S,
    pub gw: S,
    pub gh: S,
}

impl<S: Scalar> BoxGrad<S> {
    pub fn unit() -> Self {
        Self {
            gx: S::one(),
            gy: S::one(),
            gw: S::one(),
            gh: S::one(),
        }
    }
}

/// Places one anchor per (cell, aspect ratio) on a `map_h × map_w` grid.
///
/// Centers sit at cell centers in input pixels. For ratio `r` the base size
/// is split area-preserving: `w0 = base_size·√r`, `h0 = base_size/√r`.
pub fn generate_initial_anchors<S: Scalar>(
    map_h: usize,
    map_w: usize,
    stride: usize,
    base_size: S,
    aspect_ratios: &[S],
) -> Result<Vec<AnchorBox<S>>> {
    if aspect_ratios.is_empty() {
        return Err(Error::InvalidArgument("aspect ratio list is empty".into()));
    }
    if stride == 0 || base_size <= S::zero() {
        return Err(Error::InvalidArgument(
            "stride and base size must be positive".into(),
        ));
    }
    for &r in aspect_ratios {
        if r <= S::zero() {
            return Err(Error::InvalidArgument("aspect ratios must be positive".into()));
        }
    }
    let stride_s = S::of(stride as f64);
    let half = S::of(0.5);
    let mut anchors = Vec::with_capacity(map_h * map_w * aspect_ratios.len());
    for row in 0..map_h {
        let cy = (S::of(row as f64) + half) * stride_s;
        for col in 0..map_w {
            let cx = (S::of(col as f64) + half) * stride_s;
            for (ratio_index, &r) in aspect_ratios.iter().enumerate() {
                let root = r.sqrt();
                anchors.push(AnchorBox {
                    base: BBox {
                        x: cx,
                        y: cy,
                        w: base_size * root,
                        h: base_size / root,
                    },
                    grid_row: row,
                    grid_col: col,
                    ratio_index,
                });
            }
        }
    }
    Ok(anchors)
}

/// Scales an anchor's width and height by `s`, keeping the center fixed.
pub fn apply_scale<S: Scalar>(anchor: &AnchorBox<S>, s: S) -> Result<BBox<S>> {
    if s <= S::zero() || !s.is_finite() {
        return Err(Error::NonPositiveScale(s.as_f64()));
    }
    Ok(BBox {
        x: anchor.base.x,
        y: anchor.base.y,
        w: anchor.base.w * s,
        h: anchor.base.h * s,
    })
}

/// Decodes regression offsets against a (scaled) anchor box:
/// `x = x' + w'Δx`, `y = y' + h'Δy`, `w = w'·exp(Δw)`, `h = h'·exp(Δh)`.
pub fn decode_box<S: Scalar>(scaled: &BBox<S>, off: &Offsets<S>) -> Result<BBox<S>> {
    if !off.is_finite() {
        return Err(Error::NonFinite("offsets".into()));
    }
    if scaled.w <= S::zero() || scaled.h <= S::zero() {
        return Err(Error::DegenerateBox);
    }
    Ok(BBox {
        x: scaled.x + scaled.w * off.dx,
        y: scaled.y + scaled.h * off.dy,
        w: scaled.w * off.dw.exp(),
        h: scaled.h * off.dh.exp(),
    })
}

/// Exact inverse of [`decode_box`]; builds regression targets from a ground
/// truth box.
pub fn encode_box<S: Scalar>(scaled: &BBox<S>, gt: &BBox<S>) -> Result<Offsets<S>> {
    if scaled.w <= S::zero() || scaled.h <= S::zero() || gt.w <= S::zero() || gt.h <= S::zero() {
        return Err(Error::DegenerateBox);
    }
    Ok(Offsets {
        dx: (gt.x - scaled.x) / scaled.w,
        dy: (gt.y - scaled.y) / scaled.h,
        dw: (gt.w / scaled.w).ln(),
        dh: (gt.h / scaled.h).ln(),
    })
}

/// Chain rule for the anchor path: derivative of the decoded box with
/// respect to the anchor's scale coefficient, contracted with upstream
/// per-coordinate loss gradients.
///
/// With unit upstream gradients the value collapses to
/// `(Δx + exp(Δw))·w0 + (Δy + exp(Δh))·h0`.
pub fn anchor_scale_gradient<S: Scalar>(
    anchor: &AnchorBox<S>,
    off: &Offsets<S>,
    upstream: &BoxGrad<S>,
) -> S {
    let w0 = anchor.base.w;
    let h0 = anchor.base.h;
    upstream.gx * w0 * off.dx
        + upstream.gy * h0 * off.dy
        + upstream.gw * w0 * off.dw.exp()
        + upstream.gh * h0 * off.dh.exp()
}

/// Intersection over union in `[0, 1]`, computed in corner coordinates.
pub fn iou<S: Scalar>(a: &BBox<S>, b: &BBox<S>) -> S {
    let (ax1, ay1, ax2, ay2) = a.corners();
    let (bx1, by1, bx2, by2) = b.corners();
    let iw = (ax2.min(bx2) - ax1.max(bx1)).max(S::zero());
    let ih = (ay2.min(by2) - ay1.max(by1)).max(S::zero());
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= S::zero() {
        S::zero()
    } else {
        inter / union
    }
}

/// SSD-style matching.
///
/// Any anchor whose best IoU reaches `pos_thresh` becomes positive for its
/// best ground truth (ties to the lowest gt index). Afterwards each ground
/// truth forces its own best anchor positive even below threshold, processed
/// in ascending gt order with later assignments overwriting earlier ones.
pub fn match_anchors<S: Scalar>(
    scaled_anchors: &[BBox<S>],
    gts: &[BBox<S>],
    pos_thresh: S,
) -> Result<Vec<MatchAssignment<S>>> {
    if scaled_anchors.is_empty() {
        return Err(Error::InvalidArgument("no anchors to match".into()));
    }
    if pos_thresh <= S::zero() || pos_thresh >= S::one() {
        return Err(Error::InvalidArgument(
            "positive threshold must lie in (0, 1)".into(),
        ));
    }
    let mut out: Vec<MatchAssignment<S>> = (0..scaled_anchors.len())
        .map(|anchor_index| MatchAssignment {
            anchor_index,
            matched_gt: None,
            iou: S::zero(),
        })
        .collect();
    if gts.is_empty() {
        return Ok(out);
    }

    for (a_idx, anchor) in scaled_anchors.iter().enumerate() {
        let mut best_gt = 0usize;
        let mut best_iou = S::neg_infinity();
        for (g_idx, gt) in gts.iter().enumerate() {
            let v = iou(anchor, gt);
            if v > best_iou {
                best_iou = v;
                best_gt = g_idx;
            }
        }
        out[a_idx].iou = best_iou.max(S::zero());
        if best_iou >= pos_thresh {
            out[a_idx].matched_gt = Some(best_gt);
        }
    }

    // Force-match: every gt keeps at least one positive anchor.
    for (g_idx, gt) in gts.iter().enumerate() {
        let mut best_anchor = 0usize;
        let mut best_iou = S::neg_infinity();
        for (a_idx, anchor) in scaled_anchors.iter().enumerate() {
            let v = iou(anchor, gt);
            if v > best_iou {
                best_iou = v;
                best_anchor = a_idx;
            }
        }
        out[best_anchor].matched_gt = Some(g_idx);
        out[best_anchor].iou = best_iou.max(S::zero());
    }
    Ok(out)
}

/// Greedy non-maximum suppression by descending score; score ties keep the
/// lower original index. Survivors have pairwise IoU below `iou_thresh`.
pub fn nms<S: Scalar>(dets: &[(BBox<S>, S)], iou_thresh: S) -> Vec<(BBox<S>, S)> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| {
        dets[b].1
            .partial_cmp(&dets[a].1)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut kept: Vec<(BBox<S>, S)> = Vec::new();
    for &idx in &order {
        let candidate = &dets[idx];
        if kept.iter().all(|k| iou(&k.0, &candidate.0) < iou_thresh) {
            kept.push(*candidate);
        }
    }
    kept
}

/// Total anchors evaluated per image: `Σ D_i × N_c` for a pyramid, or just
/// `D_1 × N_c` for the single-layer design regardless of pyramid depth.
pub fn anchor_budget(single_layer: bool, layer_sizes: &[usize], n_c: usize) -> Result<AnchorBudget> {
    if layer_sizes.is_empty() {
        return Err(Error::InvalidArgument("layer size list is empty".into()));
    }
    let total = if single_layer {
        layer_sizes[0] * n_c
    } else {
        layer_sizes.iter().map(|&d| d * n_c).sum()
    };
    Ok(AnchorBudget {
        single_layer,
        layer_sizes: layer_sizes.to_vec(),
        anchors_per_cell: n_c,
        total,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn bb(x: f64, y: f64, w: f64, h: f64) -> BBox<f64> {
        BBox::new(x, y, w, h).unwrap()
    }

    #[test]
    fn anchor_grid_counts_and_centers() {
        let anchors = generate_initial_anchors(38, 38, 8, 16.0f64, &[1.0, 3.0, 5.0, 7.0, 10.0]).unwrap();
        assert_eq!(anchors.len(), 7220);

        let single = generate_initial_anchors(1, 1, 8, 4.0f64, &[1.0]).unwrap();
        assert_eq!(single.len(), 1);
        assert_eq!(single[0].base, bb(4.0, 4.0, 4.0, 4.0));
    }

    #[test]
    fn anchor_ratios_preserve_area() {
        let anchors = generate_initial_anchors(1, 1, 8, 4.0f64, &[4.0]).unwrap();
        let b = anchors[0].base;
        assert!((b.w - 8.0).abs() < 1e-12);
        assert!((b.h - 2.0).abs() < 1e-12);
        assert!((b.area() - 16.0).abs() < 1e-12);
    }

    #[test]
    fn empty_ratio_list_is_error() {
        assert!(generate_initial_anchors::<f64>(1, 1, 8, 4.0, &[]).is_err());
    }

    #[test]
    fn scale_application() {
        let a = AnchorBox {
            base: bb(10.0, 10.0, 4.0, 2.0),
            grid_row: 0,
            grid_col: 0,
            ratio_index: 0,
        };
        assert_eq!(apply_scale(&a, 2.0).unwrap(), bb(10.0, 10.0, 8.0, 4.0));
        assert_eq!(apply_scale(&a, 1.0).unwrap(), a.base);
        assert_eq!(apply_scale(&a, 0.5).unwrap(), bb(10.0, 10.0, 2.0, 1.0));
        assert!(apply_scale(&a, 0.0).is_err());
        assert!(apply_scale(&a, -1.0).is_err());
    }

    #[test]
    fn scale_preserves_center_and_aspect() {
        let mut rng = StdRng::seed_from_u64(11);
        for _ in 0..200 {
            let a = AnchorBox {
                base: bb(
                    rng.gen_range(-50.0..50.0),
                    rng.gen_range(-50.0..50.0),
                    rng.gen_range(0.1..40.0),
                    rng.gen_range(0.1..40.0),
                ),
                grid_row: 0,
                grid_col: 0,
                ratio_index: 0,
            };
            let s = rng.gen_range(0.05..20.0);
            let scaled = apply_scale(&a, s).unwrap();
            assert_eq!(scaled.x, a.base.x);
            assert_eq!(scaled.y, a.base.y);
            let aspect0 = a.base.w / a.base.h;
            let aspect1 = scaled.w / scaled.h;
            assert!((aspect0 - aspect1).abs() <= 1e-12 * aspect0.abs());
        }
    }

    #[test]
    fn decode_examples() {
        let b = bb(0.0, 0.0, 2.0, 2.0);
        let id = decode_box(&b, &Offsets::default()).unwrap();
        assert_eq!(id, b);
        let shifted = decode_box(&b, &Offsets { dx: 0.5, dy: 0.0, dw: 0.0, dh: 0.0 }).unwrap();
        assert!((shifted.x - 1.0).abs() < 1e-15);
        let grown = decode_box(&b, &Offsets { dx: 0.0, dy: 0.0, dw: 2.0f64.ln(), dh: 0.0 }).unwrap();
        assert!((grown.w - 4.0).abs() < 1e-15);
        assert!(decode_box(&b, &Offsets { dx: f64::NAN, dy: 0.0, dw: 0.0, dh: 0.0 }).is_err());
    }

    #[test]
    fn encode_examples_and_round_trip() {
        let b = bb(0.0, 0.0, 2.0, 2.0);
        let self_enc = encode_box(&b, &b).unwrap();
        assert_eq!(self_enc, Offsets::default());
        let off = encode_box(&b, &bb(1.0, 0.0, 2.0, 2.0)).unwrap();
        assert!((off.dx - 0.5).abs() < 1e-15);

        let mut rng = StdRng::seed_from_u64(3);
        for _ in 0..1000 {
            let anchor = bb(
                rng.gen_range(-20.0..20.0),
                rng.gen_range(-20.0..20.0),
                rng.gen_range(0.5..30.0),
                rng.gen_range(0.5..30.0),
            );
            let gt = bb(
                rng.gen_range(-20.0..20.0),
                rng.gen_range(-20.0..20.0),
                rng.gen_range(0.5..30.0),
                rng.gen_range(0.5..30.0),
            );
            let off = encode_box(&anchor, &gt).unwrap();
            let back = decode_box(&anchor, &off).unwrap();
            for (got, want) in [(back.x, gt.x), (back.y, gt.y), (back.w, gt.w), (back.h, gt.h)] {
                assert!((got - want).abs() <= 1e-9 * want.abs().max(1.0));
            }
        }
    }

    #[test]
    fn scale_gradient_zero_offset_example() {
        let a = AnchorBox {
            base: bb(0.0, 0.0, 4.0, 2.0),
            grid_row: 0,
            grid_col: 0,
            ratio_index: 0,
        };
        let g = anchor_scale_gradient(&a, &Offsets::default(), &BoxGrad::unit());
        assert!((g - 6.0).abs() < 1e-15);
        let zero_up = BoxGrad { gx: 0.0, gy: 0.0, gw: 0.0, gh: 0.0 };
        assert_eq!(anchor_scale_gradient(&a, &Offsets::default(), &zero_up), 0.0);
    }

    /// Central finite differences through decode_box composed with a fixed
    /// linear functional, against the analytic chain rule.
    #[test]
    fn scale_gradient_matches_finite_differences() {
        let mut rng = StdRng::seed_from_u64(17);
        for _ in 0..300 {
            let anchor = AnchorBox {
                base: bb(
                    rng.gen_range(-10.0..10.0),
                    rng.gen_range(-10.0..10.0),
                    rng.gen_range(0.5..20.0),
                    rng.gen_range(0.5..20.0),
                ),
                grid_row: 0,
                grid_col: 0,
                ratio_index: 0,
            };
            let off = Offsets {
                dx: rng.gen_range(-1.0..1.0),
                dy: rng.gen_range(-1.0..1.0),
                dw: rng.gen_range(-1.0..1.0),
                dh: rng.gen_range(-1.0..1.0),
            };
            let up = BoxGrad {
                gx: rng.gen_range(-2.0..2.0),
                gy: rng.gen_range(-2.0..2.0),
                gw: rng.gen_range(-2.0..2.0),
                gh: rng.gen_range(-2.0..2.0),
            };
            let s = rng.gen_range(0.2..4.0);
            let loss = |scale: f64| {
                let b = decode_box(&apply_scale(&anchor, scale).unwrap(), &off).unwrap();
                up.gx * b.x + up.gy * b.y + up.gw * b.w + up.gh * b.h
            };
            let h = 1e-6;
            let fd = (loss(s + h) - loss(s - h)) / (2.0 * h);
            let analytic = anchor_scale_gradient(&anchor, &off, &up);
            let rel = (fd - analytic).abs() / fd.abs().max(1e-9);
            assert!(rel <= 1e-6, "rel {rel} fd {fd} analytic {analytic}");
        }
    }

    #[test]
    fn iou_examples() {
        let a = bb(1.0, 1.0, 2.0, 2.0);
        assert_eq!(iou(&a, &a), 1.0);
        let far = bb(10.0, 10.0, 2.0, 2.0);
        assert_eq!(iou(&a, &far), 0.0);
        let b = bb(2.0, 1.0, 2.0, 2.0);
        assert!((iou(&a, &b) - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn iou_symmetric_and_bounded() {
        let mut rng = StdRng::seed_from_u64(5);
        for _ in 0..500 {
            let a = bb(
                rng.gen_range(-5.0..5.0),
                rng.gen_range(-5.0..5.0),
                rng.gen_range(0.1..6.0),
                rng.gen_range(0.1..6.0),
            );
            let b = bb(
                rng.gen_range(-5.0..5.0),
                rng.gen_range(-5.0..5.0),
                rng.gen_range(0.1..6.0),
                rng.gen_range(0.1..6.0),
            );
            let ab = iou(&a, &b);
            let ba = iou(&b, &a);
            assert!((ab - ba).abs() < 1e-14);
            assert!((0.0..=1.0 + 1e-12).contains(&ab));
        }
    }

    /// Exhaustive O(A·G) matcher mirroring the documented tie and force rules.
    fn brute_force_match(
        anchors: &[BBox<f64>],
        gts: &[BBox<f64>],
        thresh: f64,
    ) -> Vec<Option<usize>> {
        let mut out = vec![None; anchors.len()];
        for (ai, a) in anchors.iter().enumerate() {
            let mut best = None;
            for (gi, g) in gts.iter().enumerate() {
                let v = iou(a, g);
                if best.map_or(true, |(_, bv)| v > bv) {
                    best = Some((gi, v));
                }
            }
            if let Some((gi, v)) = best {
                if v >= thresh {
                    out[ai] = Some(gi);
                }
            }
        }
        for (gi, g) in gts.iter().enumerate() {
            let mut best = (0usize, f64::NEG_INFINITY);
            for (ai, a) in anchors.iter().enumerate() {
                let v = iou(a, g);
                if v > best.1 {
                    best = (ai, v);
                }
            }
            out[best.0] = Some(gi);
        }
        out
    }

    #[test]
    fn matching_examples() {
        let anchors = vec![bb(4.0, 4.0, 4.0, 4.0), bb(20.0, 20.0, 4.0, 4.0)];
        let gts = vec![bb(4.0, 4.0, 4.0, 4.0)];
        let m = match_anchors(&anchors, &gts, 0.5).unwrap();
        assert_eq!(m[0].matched_gt, Some(0));
        assert!((m[0].iou - 1.0).abs() < 1e-14);
        assert_eq!(m[1].matched_gt, None);

        let none = match_anchors(&anchors, &[], 0.5).unwrap();
        assert!(none.iter().all(|m| !m.is_positive()));

        assert!(match_anchors::<f64>(&[], &gts, 0.5).is_err());
    }

    #[test]
    fn matching_agrees_with_brute_force_oracle() {
        let mut rng = StdRng::seed_from_u64(23);
        for _ in 0..200 {
            let anchors: Vec<BBox<f64>> = (0..rng.gen_range(5..40))
                .map(|_| {
                    bb(
                        rng.gen_range(0.0..64.0),
                        rng.gen_range(0.0..64.0),
                        rng.gen_range(2.0..30.0),
                        rng.gen_range(2.0..30.0),
                    )
                })
                .collect();
            let gts: Vec<BBox<f64>> = (0..rng.gen_range(0..6))
                .map(|_| {
                    bb(
                        rng.gen_range(0.0..64.0),
                        rng.gen_range(0.0..64.0),
                        rng.gen_range(2.0..30.0),
                        rng.gen_range(2.0..30.0),
                    )
                })
                .collect();
            let got = match_anchors(&anchors, &gts, 0.5).unwrap();
            let want = brute_force_match(&anchors, &gts, 0.5);
            for (m, w) in got.iter().zip(want.iter()) {
                assert_eq!(m.matched_gt, *w);
            }
        }
    }

    /// O(n²) reference: repeatedly take the best remaining detection and drop
    /// everything overlapping it.
    fn brute_force_nms(dets: &[(BBox<f64>, f64)], thresh: f64) -> Vec<(BBox<f64>, f64)> {
        let mut alive: Vec<usize> = (0..dets.len()).collect();
        let mut kept = Vec::new();
        while !alive.is_empty() {
            let mut best = alive[0];
            for &i in &alive {
                if dets[i].1 > dets[best].1 {
                    best = i;
                }
            }
            kept.push(dets[best]);
            alive.retain(|&i| i != best && iou(&dets[i].0, &dets[best].0) < thresh);
        }
        kept
    }

    #[test]
    fn nms_examples() {
        let b = bb(5.0, 5.0, 4.0, 4.0);
        let kept = nms(&[(b, 0.9), (b, 0.8)], 0.5);
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].1, 0.9);

        let disjoint = vec![(bb(2.0, 2.0, 2.0, 2.0), 0.3), (bb(20.0, 2.0, 2.0, 2.0), 0.8)];
        assert_eq!(nms(&disjoint, 0.5).len(), 2);
    }

    #[test]
    fn nms_agrees_with_brute_force_oracle() {
        let mut rng = StdRng::seed_from_u64(31);
        for _ in 0..200 {
            let mut dets: Vec<(BBox<f64>, f64)> = Vec::new();
            for i in 0..50 {
                dets.push((
                    bb(
                        rng.gen_range(0.0..40.0),
                        rng.gen_range(0.0..40.0),
                        rng.gen_range(1.0..15.0),
                        rng.gen_range(1.0..15.0),
                    ),
                    // Distinct scores keep the two greedy formulations aligned.
                    rng.gen_range(0.0..1.0) + i as f64 * 1e-9,
                ));
            }
            let got = nms(&dets, 0.4);
            let want = brute_force_nms(&dets, 0.4);
            assert_eq!(got.len(), want.len());
            for (g, w) in got.iter().zip(want.iter()) {
                assert_eq!(g.1, w.1);
            }
            // Survivors overlap pairwise below threshold.
            for i in 0..got.len() {
                for j in (i + 1)..got.len() {
                    assert!(iou(&got[i].0, &got[j].0) < 0.4);
                }
            }
        }
    }

    #[test]
    fn anchor_budget_formulas() {
        let single = anchor_budget(true, &[38 * 38], 5).unwrap();
        assert_eq!(single.total, 7220);

        // Six-layer pyramid mirroring a 38/19/10/5/3/1 baseline.
        let sizes = [38 * 38, 19 * 19, 10 * 10, 5 * 5, 3 * 3, 1];
        let multi = anchor_budget(false, &sizes, 5).unwrap();
        assert_eq!(multi.total, sizes.iter().sum::<usize>() * 5);
        assert_eq!(multi.total, 9700);

        assert_eq!(anchor_budget(true, &[1], 1).unwrap().total, 1);

        // Single-layer count does not grow with pyramid depth.
        let deeper = anchor_budget(true, &sizes, 5).unwrap();
        assert_eq!(deeper.total, single.total);
    }
}
