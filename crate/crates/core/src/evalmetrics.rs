//! Detection quality metrics, the scale/size correlation report, and
//! operator timing.

use std::path::Path;
use std::time::Instant;

use crate::anchorconv::{self, ConvParams, ConvSpec};
use crate::geometry::{anchor_budget, iou, AnchorBudget, BBox};
use crate::network::layers::Conv2d;
use crate::network::{infer::scale_map_for, Model, STRIDE};
use crate::synthdata::Scene;
use crate::tensor::Tensor;
use crate::{Result, Scalar};

/// Greedy one-to-one matching result for one scene.
#[derive(Debug, Clone, Default)]
pub struct MatchedScene {
    /// `(detection index, gt index)` pairs at IoU ≥ threshold.
    pub pairs: Vec<(usize, usize)>,
    pub unmatched_dets: Vec<usize>,
    pub unmatched_gts: Vec<usize>,
}

/// Matches detections (descending score, ties by lower index) to their
/// best still-free ground truth at IoU ≥ `iou_threshold`.
pub fn match_detections<S: Scalar>(
    dets: &[(BBox<S>, S)],
    gts: &[BBox<S>],
    iou_threshold: f64,
) -> MatchedScene {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| {
        dets[b].1
            .partial_cmp(&dets[a].1)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut gt_taken = vec![false; gts.len()];
    let mut out = MatchedScene::default();
    for &d in &order {
        let mut best: Option<(usize, f64)> = None;
        for (g, gt) in gts.iter().enumerate() {
            if gt_taken[g] {
                continue;
            }
            let v = iou(&dets[d].0, gt).as_f64();
            if v >= iou_threshold && best.map_or(true, |(_, bv)| v > bv) {
                best = Some((g, v));
            }
        }
        match best {
            Some((g, _)) => {
                gt_taken[g] = true;
                out.pairs.push((d, g));
            }
            None => out.unmatched_dets.push(d),
        }
    }
    out.unmatched_gts = gt_taken
        .iter()
        .enumerate()
        .filter(|(_, &t)| !t)
        .map(|(g, _)| g)
        .collect();
    out
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SceneCounts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

/// Precision/recall/F-measure over a set of scenes.
///
/// Convention with no detections at all: precision is 1 (nothing claimed,
/// nothing wrong), recall 0, F 0.
#[derive(Debug, Clone)]
pub struct EvalReport {
    pub precision: f64,
    pub recall: f64,
    pub f_measure: f64,
    pub iou_threshold: f64,
    pub per_scene: Vec<SceneCounts>,
}

impl EvalReport {
    pub fn totals(&self) -> SceneCounts {
        let mut t = SceneCounts::default();
        for s in &self.per_scene {
            t.tp += s.tp;
            t.fp += s.fp;
            t.fn_ += s.fn_;
        }
        t
    }

    pub fn summary(&self) -> String {
        let t = self.totals();
        format!(
            "precision={:.4} recall={:.4} f_measure={:.4} iou_threshold={} tp={} fp={} fn={} (no-detections convention: P=1, R=0)",
            self.precision, self.recall, self.f_measure, self.iou_threshold, t.tp, t.fp, t.fn_
        )
    }

    pub fn csv(&self) -> String {
        let mut out = String::from("scene,tp,fp,fn\n");
        for (i, s) in self.per_scene.iter().enumerate() {
            out.push_str(&format!("{},{},{},{}\n", i, s.tp, s.fp, s.fn_));
        }
        let t = self.totals();
        out.push_str(&format!(
            "total,{},{},{}\nprecision,{}\nrecall,{}\nf_measure,{}\n",
            t.tp, t.fp, t.fn_, self.precision, self.recall, self.f_measure
        ));
        out
    }
}

pub fn f_measure(p: f64, r: f64) -> f64 {
    if p + r > 0.0 {
        2.0 * p * r / (p + r)
    } else {
        0.0
    }
}

/// Scores per-scene detections against per-scene ground truth.
pub fn evaluate<S: Scalar>(
    dets: &[Vec<(BBox<S>, S)>],
    gts: &[Vec<BBox<S>>],
    iou_threshold: f64,
) -> EvalReport {
    let mut per_scene = Vec::with_capacity(dets.len());
    for (d, g) in dets.iter().zip(gts.iter()) {
        let m = match_detections(d, g, iou_threshold);
        per_scene.push(SceneCounts {
            tp: m.pairs.len(),
            fp: m.unmatched_dets.len(),
            fn_: m.unmatched_gts.len(),
        });
    }
    let t = per_scene.iter().fold(SceneCounts::default(), |mut acc, s| {
        acc.tp += s.tp;
        acc.fp += s.fp;
        acc.fn_ += s.fn_;
        acc
    });
    let precision = if t.tp + t.fp == 0 {
        1.0
    } else {
        t.tp as f64 / (t.tp + t.fp) as f64
    };
    let recall = if t.tp + t.fn_ == 0 {
        0.0
    } else {
        t.tp as f64 / (t.tp + t.fn_) as f64
    };
    EvalReport {
        precision,
        recall,
        f_measure: f_measure(precision, recall),
        iou_threshold,
        per_scene,
    }
}

/// Pairs of (gt diagonal, predicted scale at the gt's center cell) and
/// their Pearson correlation. `pearson` is `None` when either side has
/// zero variance (e.g. an untrained constant scale map).
#[derive(Debug, Clone)]
pub struct ScaleCorrelationReport {
    pub pairs: Vec<(f64, f64)>,
    pub pearson: Option<f64>,
    /// Quartile bins over the gt diagonal: (upper edge, mean scale).
    pub bins: Vec<(f64, f64)>,
    pub skipped: usize,
}

impl ScaleCorrelationReport {
    pub fn summary(&self) -> String {
        let r = match self.pearson {
            Some(r) => format!("{r:.4}"),
            None => "degenerate (zero variance)".to_string(),
        };
        let bins = self
            .bins
            .iter()
            .map(|(edge, mean)| format!("≤{edge:.1}px → s̄={mean:.3}"))
            .collect::<Vec<_>>()
            .join(", ");
        format!(
            "pairs={} skipped={} pearson_r={} bins: {}",
            self.pairs.len(),
            self.skipped,
            r,
            bins
        )
    }
}

pub fn pearson(pairs: &[(f64, f64)]) -> Option<f64> {
    let n = pairs.len() as f64;
    if pairs.len() < 2 {
        return None;
    }
    let mx = pairs.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pairs.iter().map(|p| p.1).sum::<f64>() / n;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    let mut sxy = 0.0;
    for &(x, y) in pairs {
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
        sxy += (x - mx) * (y - my);
    }
    if sxx <= 0.0 || syy <= 0.0 {
        return None;
    }
    Some(sxy / (sxx * syy).sqrt())
}

/// Reads the predicted scale at each ground truth's center cell and
/// correlates it with the gt diagonal size.
pub fn scale_correlation<S: Scalar>(
    model: &Model<S>,
    scenes: &[Scene<S>],
) -> Result<ScaleCorrelationReport> {
    let mut pairs = Vec::new();
    let mut skipped = 0usize;
    for scene in scenes {
        let scale = scale_map_for(model, &scene.image)?;
        let (map_h, map_w) = (scale.shape()[0], scale.shape()[1]);
        for gt in &scene.gts {
            let row = (gt.y.as_f64() / STRIDE as f64).floor();
            let col = (gt.x.as_f64() / STRIDE as f64).floor();
            if row < 0.0 || col < 0.0 || row >= map_h as f64 || col >= map_w as f64 {
                skipped += 1;
                continue;
            }
            let s = scale.data()[(row as usize) * map_w + col as usize];
            pairs.push((gt.diagonal().as_f64(), s.as_f64()));
        }
    }
    let pearson = pearson(&pairs);

    // Quartile bins over the diagonal.
    let mut diags: Vec<f64> = pairs.iter().map(|p| p.0).collect();
    diags.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut bins = Vec::new();
    if !diags.is_empty() {
        for q in 1..=4 {
            let edge = diags[(diags.len() * q / 4).saturating_sub(1).min(diags.len() - 1)];
            let lo = if q == 1 { f64::NEG_INFINITY } else { bins.last().map(|&(e, _)| e).unwrap() };
            let members: Vec<f64> = pairs
                .iter()
                .filter(|p| p.0 > lo && p.0 <= edge)
                .map(|p| p.1)
                .collect();
            let mean = if members.is_empty() {
                f64::NAN
            } else {
                members.iter().sum::<f64>() / members.len() as f64
            };
            bins.push((edge, mean));
        }
    }
    Ok(ScaleCorrelationReport {
        pairs,
        pearson,
        bins,
        skipped,
    })
}

/// Normalizes a scale map to `[min, max]` and writes it as a grayscale PPM.
/// Returns the numeric range for the text summary.
pub fn write_scale_heatmap<S: Scalar>(path: &Path, scale: &Tensor<S>) -> Result<(f64, f64)> {
    let (h, w) = (scale.shape()[0], scale.shape()[1]);
    let lo = scale.data().iter().fold(f64::INFINITY, |a, &v| a.min(v.as_f64()));
    let hi = scale.data().iter().fold(f64::NEG_INFINITY, |a, &v| a.max(v.as_f64()));
    let span = (hi - lo).max(1e-12);
    let mut planes = vec![0u8; 3 * h * w];
    for (i, &v) in scale.data().iter().enumerate() {
        let g = (((v.as_f64() - lo) / span) * 255.0).round() as u8;
        planes[i] = g;
        planes[h * w + i] = g;
        planes[2 * h * w + i] = g;
    }
    crate::synthdata::write_ppm(path, &planes, h, w)?;
    Ok((lo, hi))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BenchOp {
    AnchorConvForward,
    AnchorConvBackward,
    StandardConv,
}

impl BenchOp {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "anchorconv-forward" => Some(Self::AnchorConvForward),
            "anchorconv-backward" => Some(Self::AnchorConvBackward),
            "standard-conv" => Some(Self::StandardConv),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::AnchorConvForward => "anchorconv-forward",
            Self::AnchorConvBackward => "anchorconv-backward",
            Self::StandardConv => "standard-conv",
        }
    }
}

#[derive(Debug, Clone)]
pub struct BenchRow {
    pub op: &'static str,
    pub map_size: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub scale: f64,
    pub median_ns: u128,
    pub p10_ns: u128,
    pub p90_ns: u128,
}

pub fn bench_csv(rows: &[BenchRow], single: &AnchorBudget, pyramid: &AnchorBudget) -> String {
    let mut out = String::from("op,map_size,c_in,c_out,scale,median_ns,p10_ns,p90_ns\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.op, r.map_size, r.c_in, r.c_out, r.scale, r.median_ns, r.p10_ns, r.p90_ns
        ));
    }
    out.push_str(&format!(
        "# anchor budget: single-layer {} vs pyramid {} (ratio {:.4})\n",
        single.total,
        pyramid.total,
        single.total as f64 / pyramid.total as f64
    ));
    out
}

fn percentile(sorted: &[u128], q: f64) -> u128 {
    let idx = ((sorted.len() as f64 - 1.0) * q).round() as usize;
    sorted[idx.min(sorted.len() - 1)]
}

/// Times one operator configuration. Runs serially; the first `warmup`
/// samples are discarded.
pub fn bench(
    op: BenchOp,
    map_size: usize,
    c_in: usize,
    c_out: usize,
    scale_value: f64,
    repetitions: usize,
    warmup: usize,
) -> Result<BenchRow> {
    let reps = repetitions.max(1);
    let warmup = warmup.max(1);
    let mut input = Tensor::<f64>::zeros(&[c_in, map_size, map_size])?;
    for (i, v) in input.data_mut().iter_mut().enumerate() {
        *v = ((i * 2654435761) % 1000) as f64 / 1000.0 - 0.5;
    }
    let scale = Tensor::alloc(&[map_size, map_size], scale_value)?;
    let spec = ConvSpec::new(1, 5, 1, 1, c_in, c_out, 0.5)?;
    let mut params = ConvParams::zeros(&spec)?;
    for (i, v) in params.kernel.data_mut().iter_mut().enumerate() {
        *v = ((i * 40503) % 1000) as f64 / 1000.0 - 0.5;
    }
    let mut conv = Conv2d::<f64>::zeros(c_in, c_out, 3)?;
    for (i, v) in conv.kernel.data_mut().iter_mut().enumerate() {
        *v = ((i * 40503) % 1000) as f64 / 1000.0 - 0.5;
    }

    let mut times = Vec::with_capacity(reps);
    let mut sink = 0.0f64;
    for rep in 0..reps + warmup {
        let start = Instant::now();
        match op {
            BenchOp::AnchorConvForward => {
                let (out, _) = anchorconv::forward(&input, &params, &scale, &spec)?;
                sink += out.data()[0];
            }
            BenchOp::AnchorConvBackward => {
                let (out, ctx) = anchorconv::forward(&input, &params, &scale, &spec)?;
                let grads = anchorconv::backward(&out, &input, &params, &ctx)?;
                sink += grads.kernel.data()[0];
            }
            BenchOp::StandardConv => {
                let (out, _) = conv.forward(&input)?;
                sink += out.data()[0];
            }
        }
        if rep >= warmup {
            times.push(start.elapsed().as_nanos());
        }
    }
    std::hint::black_box(sink);
    times.sort_unstable();
    Ok(BenchRow {
        op: op.name(),
        map_size,
        c_in,
        c_out,
        scale: scale_value,
        median_ns: percentile(&times, 0.5),
        p10_ns: percentile(&times, 0.1),
        p90_ns: percentile(&times, 0.9),
    })
}

/// Anchor budgets for the configured single-layer map vs a baseline pyramid.
pub fn budget_comparison(
    map_size: usize,
    n_c: usize,
    pyramid: &[usize],
) -> Result<(AnchorBudget, AnchorBudget)> {
    let single = anchor_budget(true, &[map_size * map_size], n_c)?;
    let sizes: Vec<usize> = pyramid.iter().map(|&d| d * d).collect();
    let multi = anchor_budget(false, &sizes, n_c)?;
    Ok((single, multi))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bb(x: f64, y: f64, w: f64, h: f64) -> BBox<f64> {
        BBox::new(x, y, w, h).unwrap()
    }

    #[test]
    fn perfect_detector_scores_one() {
        let gts = vec![vec![bb(5.0, 5.0, 4.0, 2.0), bb(20.0, 8.0, 6.0, 3.0)]];
        let dets = vec![vec![(bb(5.0, 5.0, 4.0, 2.0), 0.9), (bb(20.0, 8.0, 6.0, 3.0), 0.8)]];
        let r = evaluate(&dets, &gts, 0.5);
        assert_eq!(r.precision, 1.0);
        assert_eq!(r.recall, 1.0);
        assert_eq!(r.f_measure, 1.0);
    }

    #[test]
    fn no_detections_convention() {
        let gts = vec![vec![bb(5.0, 5.0, 4.0, 2.0)]];
        let dets: Vec<Vec<(BBox<f64>, f64)>> = vec![vec![]];
        let r = evaluate(&dets, &gts, 0.5);
        assert_eq!(r.precision, 1.0);
        assert_eq!(r.recall, 0.0);
        assert_eq!(r.f_measure, 0.0);
    }

    #[test]
    fn evaluate_is_order_invariant_with_distinct_scores() {
        let gts = vec![vec![bb(5.0, 5.0, 4.0, 4.0), bb(12.0, 5.0, 4.0, 4.0)]];
        let mut dets = vec![
            (bb(5.2, 5.0, 4.0, 4.0), 0.7),
            (bb(12.1, 5.0, 4.0, 4.0), 0.9),
            (bb(30.0, 30.0, 4.0, 4.0), 0.5),
        ];
        let a = evaluate(&[dets.clone()], &gts, 0.5);
        dets.reverse();
        let b = evaluate(&[dets], &gts, 0.5);
        assert_eq!(a.totals(), b.totals());
    }

    #[test]
    fn pearson_of_perfect_line_is_one() {
        let pairs: Vec<(f64, f64)> = (1..=10).map(|i| (i as f64, 3.0 * i as f64)).collect();
        assert!((pearson(&pairs).unwrap() - 1.0).abs() < 1e-12);
        let constant: Vec<(f64, f64)> = (1..=10).map(|i| (i as f64, 1.0)).collect();
        assert!(pearson(&constant).is_none());
    }

    #[test]
    fn bench_single_repetition_degenerates_to_one_sample() {
        let row = bench(BenchOp::StandardConv, 8, 4, 4, 1.0, 1, 1).unwrap();
        assert_eq!(row.median_ns, row.p10_ns);
        assert_eq!(row.median_ns, row.p90_ns);
    }

    #[test]
    fn budget_comparison_matches_hand_count() {
        let (single, multi) = budget_comparison(16, 3, &[16, 8, 4, 2, 1, 1]).unwrap();
        assert_eq!(single.total, 768);
        assert_eq!(multi.total, (256 + 64 + 16 + 4 + 1 + 1) * 3);
    }
}
