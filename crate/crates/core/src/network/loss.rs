//! Joint detection objective: two-class softmax confidence loss over all
//! anchors (no negative mining, negatives down-weighted by a balance
//! factor) plus smooth-L1 box regression on the positives, normalized by
//! the matched-anchor count:
//!
//! `L = (L_conf + β·L_loc) / N`.
//!
//! Regression targets are encoded against the scale-adapted anchors, so the
//! localization term depends on the scale map through the targets; the
//! backward pass returns that anchor-path gradient per cell alongside the
//! head-output gradients. Matching itself uses the current scale values but
//! is treated as a constant assignment (no gradient flows through the
//! discrete match).

use crate::geometry::{apply_scale, encode_box, match_anchors, AnchorBox, BBox, MatchAssignment};
use crate::tensor::Tensor;
use crate::{Error, Result, Scalar};

#[derive(Debug, Clone, Copy)]
pub struct LossHyper<S: Scalar> {
    pub beta: S,
    pub neg_weight: S,
    pub pos_iou_threshold: S,
}

/// The scalar terms of one loss evaluation. `total` equals
/// `(conf_term + beta·loc_term)/n_matched` whenever `n_matched > 0`.
#[derive(Debug, Clone, Copy)]
pub struct LossBreakdown<S: Scalar> {
    pub total: S,
    pub conf_term: S,
    pub loc_term: S,
    pub n_matched: usize,
    pub beta: S,
    pub neg_weight: S,
}

/// Gradients of the total loss with respect to the head outputs and the
/// anchor-path contribution to the scale map.
#[derive(Debug, Clone)]
pub struct LossGrads<S: Scalar> {
    pub conf: Tensor<S>,
    pub loc: Tensor<S>,
    pub scale_anchor: Tensor<S>,
}

/// Smooth-L1: quadratic below unit residual, linear above.
pub fn smooth_l1<S: Scalar>(r: S) -> S {
    let a = r.abs();
    if a < S::one() {
        S::of(0.5) * r * r
    } else {
        a - S::of(0.5)
    }
}

pub fn smooth_l1_grad<S: Scalar>(r: S) -> S {
    if r.abs() < S::one() {
        r
    } else if r > S::zero() {
        S::one()
    } else {
        -S::one()
    }
}

/// Numerically stable two-class softmax cross-entropy.
/// Returns `(loss, dloss/du0, dloss/du1)` for the given true label.
fn softmax_ce<S: Scalar>(u0: S, u1: S, label_is_positive: bool) -> (S, S, S) {
    let m = u0.max(u1);
    let e0 = (u0 - m).exp();
    let e1 = (u1 - m).exp();
    let z = e0 + e1;
    let p0 = e0 / z;
    let p1 = e1 / z;
    let loss = if label_is_positive {
        -(p1.max(S::of(1e-300))).ln()
    } else {
        -(p0.max(S::of(1e-300))).ln()
    };
    let (t0, t1) = if label_is_positive {
        (S::zero(), S::one())
    } else {
        (S::one(), S::zero())
    };
    (loss, p0 - t0, p1 - t1)
}

/// Evaluates the joint loss and all its output-side gradients.
///
/// `conf` is `[2·N_c, H, W]`, `loc` is `[4·N_c, H, W]`, `scale` is the
/// post-activation scale map `[H, W]`, and `anchors` are the initial
/// anchors in the same cell-major, ratio-minor order the head channels use.
pub fn compute_loss<S: Scalar>(
    conf: &Tensor<S>,
    loc: &Tensor<S>,
    scale: &Tensor<S>,
    anchors: &[AnchorBox<S>],
    gts: &[BBox<S>],
    hyper: &LossHyper<S>,
) -> Result<(LossBreakdown<S>, LossGrads<S>, Vec<MatchAssignment<S>>)> {
    if anchors.is_empty() {
        return Err(Error::InvalidArgument("loss needs at least one anchor".into()));
    }
    let (map_h, map_w) = (scale.shape()[0], scale.shape()[1]);
    let cells = map_h * map_w;
    let n_c = anchors.len() / cells;
    if anchors.len() != cells * n_c
        || conf.shape() != [2 * n_c, map_h, map_w]
        || loc.shape() != [4 * n_c, map_h, map_w]
    {
        return Err(Error::ShapeMismatch {
            op: "loss inputs",
            left: conf.shape().to_vec(),
            right: vec![2 * n_c, map_h, map_w],
        });
    }

    // Scale-adapted anchors, then the match (constant w.r.t. gradients).
    let mut scaled = Vec::with_capacity(anchors.len());
    for anchor in anchors {
        let s = scale.data()[anchor.grid_row * map_w + anchor.grid_col];
        scaled.push(apply_scale(anchor, s)?);
    }
    let matches = match_anchors(&scaled, gts, hyper.pos_iou_threshold)?;
    let n_matched = matches.iter().filter(|m| m.is_positive()).count();

    let mut g_conf = Tensor::zeros(&[2 * n_c, map_h, map_w])?;
    let mut g_loc = Tensor::zeros(&[4 * n_c, map_h, map_w])?;
    let mut g_scale_anchor = Tensor::zeros(&[map_h, map_w])?;

    let norm = if n_matched > 0 {
        S::one() / S::of(n_matched as f64)
    } else {
        // No positives: only the balanced negative term, averaged over all
        // anchors so the magnitude stays comparable.
        hyper.neg_weight / S::of(anchors.len() as f64)
    };

    let mut conf_sum = S::zero();
    let mut loc_sum = S::zero();

    for (a_idx, (anchor, m)) in anchors.iter().zip(matches.iter()).enumerate() {
        let cell = anchor.grid_row * map_w + anchor.grid_col;
        let ratio = a_idx % n_c;
        let positive = m.is_positive();

        // Confidence term.
        let u0 = conf.data()[(2 * ratio) * cells + cell];
        let u1 = conf.data()[(2 * ratio + 1) * cells + cell];
        let (ce, d0, d1) = softmax_ce(u0, u1, positive);
        let weight = if positive { S::one() } else { hyper.neg_weight };
        conf_sum = conf_sum + weight * ce;
        let gscale = if n_matched > 0 { weight * norm } else { norm };
        g_conf.data_mut()[(2 * ratio) * cells + cell] = g_conf.data()[(2 * ratio) * cells + cell] + gscale * d0;
        g_conf.data_mut()[(2 * ratio + 1) * cells + cell] =
            g_conf.data()[(2 * ratio + 1) * cells + cell] + gscale * d1;

        // Localization term for positives only.
        if let Some(gt_idx) = m.matched_gt {
            let s = scale.data()[cell];
            let target = encode_box(&scaled[a_idx], &gts[gt_idx])?;
            let pred = [
                loc.data()[(4 * ratio) * cells + cell],
                loc.data()[(4 * ratio + 1) * cells + cell],
                loc.data()[(4 * ratio + 2) * cells + cell],
                loc.data()[(4 * ratio + 3) * cells + cell],
            ];
            let tgt = [target.dx, target.dy, target.dw, target.dh];
            let mut phi_grad = [S::zero(); 4];
            for k in 0..4 {
                let r = pred[k] - tgt[k];
                loc_sum = loc_sum + smooth_l1(r);
                phi_grad[k] = smooth_l1_grad(r);
                g_loc.data_mut()[(4 * ratio + k) * cells + cell] =
                    g_loc.data()[(4 * ratio + k) * cells + cell] + hyper.beta * norm * phi_grad[k];
            }
            // Anchor path: the encode targets move with the cell scale,
            //   ∂Δx*/∂s = −Δx*/s, ∂Δy*/∂s = −Δy*/s, ∂Δw*/∂s = ∂Δh*/∂s = −1/s,
            // and dL/ds accumulates over the anchors at this cell.
            let ds = (phi_grad[0] * tgt[0] + phi_grad[1] * tgt[1] + phi_grad[2] + phi_grad[3]) / s;
            g_scale_anchor.data_mut()[cell] =
                g_scale_anchor.data()[cell] + hyper.beta * norm * ds;
        }
    }

    // conf_sum already carries the per-anchor weights, so with no positives
    // the total is just the balanced negative sum averaged over all anchors.
    let total = if n_matched > 0 {
        (conf_sum + hyper.beta * loc_sum) / S::of(n_matched as f64)
    } else {
        conf_sum / S::of(anchors.len() as f64)
    };
    let breakdown = LossBreakdown {
        total,
        conf_term: conf_sum,
        loc_term: loc_sum,
        n_matched,
        beta: hyper.beta,
        neg_weight: hyper.neg_weight,
    };
    Ok((
        breakdown,
        LossGrads {
            conf: g_conf,
            loc: g_loc,
            scale_anchor: g_scale_anchor,
        },
        matches,
    ))
}
