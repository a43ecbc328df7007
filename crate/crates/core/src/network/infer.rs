//! Multi-resolution inference: resize, forward, decode every anchor at its
//! learned scale, keep confident detections, map them back to original
//! pixels, and fuse the union across resolutions with NMS.

use crate::anchorconv::bilinear_sample;
use crate::geometry::{apply_scale, decode_box, nms, BBox, Offsets};
use crate::network::Model;
use crate::tensor::Tensor;
use crate::{Error, Result, Scalar};

/// Bilinear image resize with border clamping; an identity when the output
/// size equals the input size.
pub fn resize_bilinear<S: Scalar>(image: &Tensor<S>, out_h: usize, out_w: usize) -> Result<Tensor<S>> {
    let shape = image.shape();
    if shape.len() != 3 {
        return Err(Error::InvalidShape {
            shape: shape.to_vec(),
            reason: "expected channels × height × width".into(),
        });
    }
    let (c_n, in_h, in_w) = (shape[0], shape[1], shape[2]);
    if out_h == 0 || out_w == 0 {
        return Err(Error::InvalidArgument("resize target must be positive".into()));
    }
    if out_h == in_h && out_w == in_w {
        return Ok(image.clone());
    }
    let mut out = Tensor::zeros(&[c_n, out_h, out_w])?;
    let sy = in_h as f64 / out_h as f64;
    let sx = in_w as f64 / out_w as f64;
    for c in 0..c_n {
        let src = &image.data()[c * in_h * in_w..(c + 1) * in_h * in_w];
        for row in 0..out_h {
            let h = S::of((row as f64 + 0.5) * sy - 0.5);
            for col in 0..out_w {
                let w = S::of((col as f64 + 0.5) * sx - 0.5);
                out.data_mut()[(c * out_h + row) * out_w + col] =
                    bilinear_sample(src, in_h, in_w, h, w);
            }
        }
    }
    Ok(out)
}

/// Detections for one image at one resolution, in that resolution's pixels.
fn detect_at_native<S: Scalar>(
    model: &Model<S>,
    image: &Tensor<S>,
    conf_thresh: S,
) -> Result<Vec<(BBox<S>, S)>> {
    let pass = model.forward(image)?;
    let (map_h, map_w) = (pass.scale.shape()[0], pass.scale.shape()[1]);
    let cells = map_h * map_w;
    let anchors = model.anchors_for(map_h, map_w)?;
    let n_c = model.n_c();
    let mut dets = Vec::new();
    for (a_idx, anchor) in anchors.iter().enumerate() {
        let cell = anchor.grid_row * map_w + anchor.grid_col;
        let ratio = a_idx % n_c;
        let u0 = pass.conf.data()[(2 * ratio) * cells + cell];
        let u1 = pass.conf.data()[(2 * ratio + 1) * cells + cell];
        // Two-class softmax probability of the text class.
        let score = S::one() / (S::one() + (u0 - u1).exp());
        if score <= conf_thresh {
            continue;
        }
        let s = pass.scale.data()[cell];
        let scaled = apply_scale(anchor, s)?;
        let off = Offsets::new(
            pass.loc.data()[(4 * ratio) * cells + cell],
            pass.loc.data()[(4 * ratio + 1) * cells + cell],
            pass.loc.data()[(4 * ratio + 2) * cells + cell],
            pass.loc.data()[(4 * ratio + 3) * cells + cell],
        )?;
        let decoded = decode_box(&scaled, &off)?;
        dets.push((decoded, score));
    }
    Ok(dets)
}

/// Full multi-resolution pipeline. Boxes come back in the original image's
/// pixel coordinates, clipped to its bounds, after score thresholding
/// (strictly greater) and cross-resolution NMS.
pub fn infer<S: Scalar>(
    model: &Model<S>,
    image: &Tensor<S>,
    resolutions: &[usize],
    conf_thresh: S,
    nms_thresh: S,
) -> Result<Vec<(BBox<S>, S)>> {
    if resolutions.is_empty() {
        return Err(Error::InvalidArgument("no inference resolutions".into()));
    }
    let (orig_h, orig_w) = (image.shape()[1], image.shape()[2]);
    let mut union: Vec<(BBox<S>, S)> = Vec::new();
    for &res in resolutions {
        let resized = resize_bilinear(image, res, res)?;
        let dets = detect_at_native(model, &resized, conf_thresh)?;
        let fx = S::of(orig_w as f64 / res as f64);
        let fy = S::of(orig_h as f64 / res as f64);
        for (b, score) in dets {
            let mapped = BBox {
                x: b.x * fx,
                y: b.y * fy,
                w: b.w * fx,
                h: b.h * fy,
            };
            if mapped.w <= S::zero() || mapped.h <= S::zero() || !score.is_finite() {
                continue;
            }
            union.push((mapped.clip(S::of(orig_w as f64), S::of(orig_h as f64)), score));
        }
    }
    Ok(nms(&union, nms_thresh))
}

/// The post-activation scale map for an image, for heatmaps and the
/// size-correlation report.
pub fn scale_map_for<S: Scalar>(model: &Model<S>, image: &Tensor<S>) -> Result<Tensor<S>> {
    Ok(model.forward(image)?.scale)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::TrainConfig;
    use crate::synthdata::{generate_scene, SceneSpec};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg() -> TrainConfig {
        let mut cfg = TrainConfig::default();
        cfg.channels = vec![4, 6, 8, 8];
        cfg.image_size = 32;
        cfg.max_width = 24;
        cfg.aspect_ratios = vec![2.0, 4.0];
        cfg
    }

    #[test]
    fn resize_identity_and_downscale() {
        let cfg = cfg();
        let scene = generate_scene::<f64>(&SceneSpec::from_config(&cfg), 0).unwrap();
        let same = resize_bilinear(&scene.image, 32, 32).unwrap();
        assert_eq!(same.data(), scene.image.data());
        let half = resize_bilinear(&scene.image, 16, 16).unwrap();
        assert_eq!(half.shape(), &[3, 16, 16]);
        assert!(half.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn zero_head_model_yields_no_detections_at_half_threshold() {
        let cfg = cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut model = crate::network::Model::<f64>::init(&cfg, &mut rng).unwrap();
        // Zero the head entirely: both logits equal, score exactly 0.5.
        model.head_cls.kernel.fill(0.0);
        model.head_cls.bias.fill(0.0);
        let scene = generate_scene::<f64>(&SceneSpec::from_config(&cfg), 1).unwrap();
        let dets = infer(&model, &scene.image, &[32], 0.5, 0.45).unwrap();
        assert!(dets.is_empty());
    }

    #[test]
    fn single_native_resolution_equals_plain_decode_path() {
        let cfg = cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let model = crate::network::Model::<f64>::init(&cfg, &mut rng).unwrap();
        let scene = generate_scene::<f64>(&SceneSpec::from_config(&cfg), 2).unwrap();
        let via_infer = infer(&model, &scene.image, &[32], 0.1, 0.99).unwrap();
        let plain = detect_at_native(&model, &scene.image, 0.1).unwrap();
        // NMS at 0.99 with clipping applied; compare the sets by score.
        let clipped: Vec<(BBox<f64>, f64)> = plain
            .into_iter()
            .map(|(b, s)| (b.clip(32.0, 32.0), s))
            .collect();
        let nmsed = crate::geometry::nms(&clipped, 0.99);
        assert_eq!(via_infer.len(), nmsed.len());
        for (a, b) in via_infer.iter().zip(nmsed.iter()) {
            assert_eq!(a.1, b.1);
            assert_eq!(a.0, b.0);
        }
    }
}
