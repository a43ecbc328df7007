//! Deterministic synthetic scenes: elongated "text-like" bars on simple
//! backgrounds, with tight pixel-exact ground truth boxes.
//!
//! A scene is a pure function of `(seed, index)`. Pixels are quantized to
//! 8 bits at generation time, so a write/read round trip through the PPM
//! dataset reproduces scenes exactly.

use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::geometry::{iou, BBox};
use crate::tensor::Tensor;
use crate::{Error, Result, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BackgroundStyle {
    Flat,
    Gradient,
    Noise,
}

impl BackgroundStyle {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "flat" => Some(Self::Flat),
            "gradient" => Some(Self::Gradient),
            "noise" => Some(Self::Noise),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Flat => "flat",
            Self::Gradient => "gradient",
            Self::Noise => "noise",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GlyphStyle {
    SolidBar,
    StripedBar,
}

impl GlyphStyle {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "solid" => Some(Self::SolidBar),
            "striped" => Some(Self::StripedBar),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::SolidBar => "solid",
            Self::StripedBar => "striped",
        }
    }
}

/// Generator parameters; see the config keys of the same names.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub image_size: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub min_width: usize,
    pub max_width: usize,
    pub min_aspect: f64,
    pub max_aspect: f64,
    pub background: BackgroundStyle,
    pub glyph: GlyphStyle,
    pub noise_amplitude: f64,
    pub seed: u64,
}

impl SceneSpec {
    pub fn from_config(cfg: &crate::config::TrainConfig) -> Self {
        Self {
            image_size: cfg.image_size,
            min_objects: cfg.min_objects,
            max_objects: cfg.max_objects,
            min_width: cfg.min_width,
            max_width: cfg.max_width,
            min_aspect: cfg.min_aspect,
            max_aspect: cfg.max_aspect,
            background: cfg.background,
            glyph: cfg.glyph,
            noise_amplitude: cfg.noise_amplitude,
            seed: cfg.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneMeta {
    pub seed: u64,
    pub index: u64,
    pub requested_objects: usize,
    pub placed_objects: usize,
}

/// One rendered scene with its ground truth.
#[derive(Debug, Clone)]
pub struct Scene<S: Scalar> {
    pub image: Tensor<S>,
    pub gts: Vec<BBox<S>>,
    pub meta: SceneMeta,
}

// Luminance bands: backgrounds stay inside [0.30, 0.70] even after noise,
// bars stay outside [0.25, 0.75], so labels can be re-measured from pixels.
const BG_LO: f64 = 0.35;
const BG_HI: f64 = 0.65;
const MAX_NOISE: f64 = 0.05;

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Renders the scene for `(spec.seed, index)`. If the requested object count
/// cannot be placed without heavy overlap within a bounded number of
/// retries, fewer objects are placed and recorded in the meta block.
pub fn generate_scene<S: Scalar>(spec: &SceneSpec, index: u64) -> Result<Scene<S>> {
    if spec.min_objects > spec.max_objects || spec.min_width > spec.max_width {
        return Err(Error::InvalidArgument("scene spec ranges are inverted".into()));
    }
    if spec.max_width > spec.image_size {
        return Err(Error::InvalidArgument("bar width exceeds the image".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index);
    let n = spec.image_size;
    let amp = spec.noise_amplitude.clamp(0.0, MAX_NOISE);

    // Background, one u8 plane per channel.
    let mut rgb = vec![0u8; 3 * n * n];
    match spec.background {
        BackgroundStyle::Flat => {
            let base: [f64; 3] = [
                rng.gen_range(BG_LO..BG_HI),
                rng.gen_range(BG_LO..BG_HI),
                rng.gen_range(BG_LO..BG_HI),
            ];
            for c in 0..3 {
                rgb[c * n * n..(c + 1) * n * n].fill(quantize(base[c]));
            }
        }
        BackgroundStyle::Gradient => {
            let top: [f64; 3] = [
                rng.gen_range(BG_LO..BG_HI),
                rng.gen_range(BG_LO..BG_HI),
                rng.gen_range(BG_LO..BG_HI),
            ];
            let bottom: [f64; 3] = [
                rng.gen_range(BG_LO..BG_HI),
                rng.gen_range(BG_LO..BG_HI),
                rng.gen_range(BG_LO..BG_HI),
            ];
            for c in 0..3 {
                for row in 0..n {
                    let t = row as f64 / (n - 1).max(1) as f64;
                    let v = quantize(top[c] + (bottom[c] - top[c]) * t);
                    rgb[c * n * n + row * n..c * n * n + (row + 1) * n].fill(v);
                }
            }
        }
        BackgroundStyle::Noise => {
            let base: [f64; 3] = [
                rng.gen_range(BG_LO..BG_HI),
                rng.gen_range(BG_LO..BG_HI),
                rng.gen_range(BG_LO..BG_HI),
            ];
            for c in 0..3 {
                for px in rgb[c * n * n..(c + 1) * n * n].iter_mut() {
                    *px = quantize(base[c] + rng.gen_range(-amp..=amp));
                }
            }
        }
    }

    // Bars. Widths are sampled log-uniformly so small objects are common.
    let requested = rng.gen_range(spec.min_objects..=spec.max_objects);
    let mut gts: Vec<BBox<S>> = Vec::with_capacity(requested);
    let mut placed_rects: Vec<(usize, usize, usize, usize)> = Vec::new();
    for _ in 0..requested {
        let mut placed = false;
        for _attempt in 0..50 {
            let (lo, hi) = (spec.min_width as f64, spec.max_width as f64);
            let w = (lo * (hi / lo).powf(rng.gen::<f64>())).round() as usize;
            let w = w.clamp(spec.min_width, spec.max_width);
            let aspect = rng.gen_range(spec.min_aspect..=spec.max_aspect);
            let h = ((w as f64 / aspect).round() as usize).clamp(2, w.max(2));
            if h > n || w > n {
                continue;
            }
            let x0 = rng.gen_range(0..=n - w);
            let y0 = rng.gen_range(0..=n - h);
            let candidate = BBox::<f64>::new(
                x0 as f64 + w as f64 / 2.0,
                y0 as f64 + h as f64 / 2.0,
                w as f64,
                h as f64,
            )
            .expect("positive extents");
            let clash = placed_rects.iter().any(|&(px, py, pw2, ph2)| {
                let other = BBox::<f64>::new(
                    px as f64 + pw2 as f64 / 2.0,
                    py as f64 + ph2 as f64 / 2.0,
                    pw2 as f64,
                    ph2 as f64,
                )
                .expect("positive extents");
                iou(&candidate, &other) >= 0.2
            });
            if clash {
                continue;
            }

            // Bar palette sits outside the background luminance band, both
            // for the base color and the stripe alternation.
            let dark = rng.gen_bool(0.5);
            let base = if dark {
                rng.gen_range(0.03..0.14)
            } else {
                rng.gen_range(0.86..0.97)
            };
            let alt = if dark { base + 0.08 } else { base - 0.08 };
            let stripe = 2usize;
            for row in y0..y0 + h {
                for col in x0..x0 + w {
                    let v = match spec.glyph {
                        GlyphStyle::SolidBar => base,
                        GlyphStyle::StripedBar => {
                            if ((col - x0) / stripe) % 2 == 0 {
                                base
                            } else {
                                alt
                            }
                        }
                    };
                    let q = quantize(v);
                    for c in 0..3 {
                        rgb[c * n * n + row * n + col] = q;
                    }
                }
            }
            placed_rects.push((x0, y0, w, h));
            gts.push(
                BBox::new(
                    S::of(x0 as f64 + w as f64 / 2.0),
                    S::of(y0 as f64 + h as f64 / 2.0),
                    S::of(w as f64),
                    S::of(h as f64),
                )
                .expect("positive extents"),
            );
            placed = true;
            break;
        }
        if !placed {
            break;
        }
    }

    let image = rgb_to_tensor(&rgb, n, n)?;
    Ok(Scene {
        image,
        gts,
        meta: SceneMeta {
            seed: spec.seed,
            index,
            requested_objects: requested,
            placed_objects: placed_rects.len(),
        },
    })
}

/// Packs interleaved-RGB bytes into a `[3, h, w]` tensor in `[0, 1]`.
pub fn rgb_to_tensor<S: Scalar>(planes: &[u8], h: usize, w: usize) -> Result<Tensor<S>> {
    if planes.len() != 3 * h * w {
        return Err(Error::LengthMismatch {
            op: "rgb_to_tensor",
            left: planes.len(),
            right: 3 * h * w,
        });
    }
    let inv = S::of(1.0 / 255.0);
    let data = planes.iter().map(|&b| S::of(b as f64) * inv).collect();
    Tensor::from_vec(&[3, h, w], data)
}

/// Quantizes a `[3, h, w]` tensor back to channel-planar bytes.
pub fn tensor_to_rgb<S: Scalar>(image: &Tensor<S>) -> Vec<u8> {
    image.data().iter().map(|&v| quantize(v.as_f64())).collect()
}

/// Writes a binary P6 PPM from channel-planar RGB bytes.
pub fn write_ppm(path: &Path, planes: &[u8], h: usize, w: usize) -> Result<()> {
    let mut out = Vec::with_capacity(20 + 3 * h * w);
    write!(out, "P6\n{w} {h}\n255\n")?;
    for row in 0..h {
        for col in 0..w {
            for c in 0..3 {
                out.push(planes[c * h * w + row * w + col]);
            }
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Reads a binary P6 PPM into channel-planar RGB bytes plus dimensions.
/// Parse failures name the file and the byte offset.
pub fn read_ppm(path: &Path) -> Result<(Vec<u8>, usize, usize)> {
    let bytes = std::fs::read(path)?;
    let name = path.display().to_string();
    let fail = |offset: usize, msg: &str| Error::Parse {
        file: name.clone(),
        offset,
        msg: msg.to_string(),
    };

    let mut pos = 0usize;
    let skip_space = |pos: &mut usize| {
        while *pos < bytes.len() {
            match bytes[*pos] {
                b' ' | b'\t' | b'\r' | b'\n' => *pos += 1,
                b'#' => {
                    while *pos < bytes.len() && bytes[*pos] != b'\n' {
                        *pos += 1;
                    }
                }
                _ => break,
            }
        }
    };
    let read_token = |pos: &mut usize| -> Option<(usize, String)> {
        skip_space(pos);
        let start = *pos;
        while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos == start {
            None
        } else {
            Some((start, String::from_utf8_lossy(&bytes[start..*pos]).into_owned()))
        }
    };

    let (off, magic) = read_token(&mut pos).ok_or_else(|| fail(0, "missing PPM magic"))?;
    if magic != "P6" {
        return Err(fail(off, "expected binary PPM magic P6"));
    }
    let (off, w_tok) = read_token(&mut pos).ok_or_else(|| fail(pos, "missing width"))?;
    let w: usize = w_tok.parse().map_err(|_| fail(off, "bad width"))?;
    let (off, h_tok) = read_token(&mut pos).ok_or_else(|| fail(pos, "missing height"))?;
    let h: usize = h_tok.parse().map_err(|_| fail(off, "bad height"))?;
    let (off, max_tok) = read_token(&mut pos).ok_or_else(|| fail(pos, "missing maxval"))?;
    let maxval: usize = max_tok.parse().map_err(|_| fail(off, "bad maxval"))?;
    if maxval != 255 {
        return Err(fail(off, "only 8-bit PPM (maxval 255) is supported"));
    }
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(fail(pos, "expected whitespace before pixel data"));
    }
    pos += 1;
    let need = 3 * w * h;
    if bytes.len() - pos < need {
        return Err(fail(bytes.len(), "truncated pixel data"));
    }
    let pixels = &bytes[pos..pos + need];
    let mut planes = vec![0u8; need];
    for row in 0..h {
        for col in 0..w {
            for c in 0..3 {
                planes[c * h * w + row * w + col] = pixels[(row * w + col) * 3 + c];
            }
        }
    }
    Ok((planes, h, w))
}

/// Writes boxes in the text format `x_center y_center w h [score]`.
pub fn write_boxes<S: Scalar>(path: &Path, boxes: &[(BBox<S>, Option<S>)]) -> Result<()> {
    let mut out = String::new();
    for (b, score) in boxes {
        match score {
            Some(s) => out.push_str(&format!("{} {} {} {} {}\n", b.x, b.y, b.w, b.h, s)),
            None => out.push_str(&format!("{} {} {} {}\n", b.x, b.y, b.w, b.h)),
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Reads the box text format; the score column is optional per line.
pub fn read_boxes<S: Scalar>(path: &Path) -> Result<Vec<(BBox<S>, Option<S>)>> {
    let name = path.display().to_string();
    let text = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 4 && fields.len() != 5 {
            return Err(Error::Parse {
                file: name.clone(),
                offset: idx,
                msg: format!("expected 4 or 5 fields, got {}", fields.len()),
            });
        }
        let mut vals = [0f64; 5];
        for (k, f) in fields.iter().enumerate() {
            vals[k] = f.parse::<f64>().map_err(|_| Error::Parse {
                file: name.clone(),
                offset: idx,
                msg: format!("bad number `{f}`"),
            })?;
        }
        let b = BBox::new(S::of(vals[0]), S::of(vals[1]), S::of(vals[2]), S::of(vals[3]))
            .map_err(|_| Error::Parse {
                file: name.clone(),
                offset: idx,
                msg: "degenerate box".into(),
            })?;
        let score = if fields.len() == 5 { Some(S::of(vals[4])) } else { None };
        out.push((b, score));
    }
    Ok(out)
}

/// Writes scenes as `images/*.ppm` + `gt/*.txt` plus a manifest of
/// `image_path gt_path` pairs relative to the dataset directory.
pub fn write_dataset<S: Scalar>(dir: &Path, scenes: &[Scene<S>]) -> Result<()> {
    std::fs::create_dir_all(dir.join("images"))?;
    std::fs::create_dir_all(dir.join("gt"))?;
    let mut manifest = String::new();
    for (i, scene) in scenes.iter().enumerate() {
        let image_rel = format!("images/scene_{i:05}.ppm");
        let gt_rel = format!("gt/scene_{i:05}.txt");
        let n = scene.image.shape()[1];
        let m = scene.image.shape()[2];
        write_ppm(&dir.join(&image_rel), &tensor_to_rgb(&scene.image), n, m)?;
        let gt_rows: Vec<(BBox<S>, Option<S>)> = scene.gts.iter().map(|&b| (b, None)).collect();
        write_boxes(&dir.join(&gt_rel), &gt_rows)?;
        manifest.push_str(&format!("{image_rel} {gt_rel}\n"));
    }
    std::fs::write(dir.join("manifest.txt"), manifest)?;
    Ok(())
}

/// Loads a dataset directory. A missing manifest yields an empty dataset.
pub fn load_dataset<S: Scalar>(dir: &Path) -> Result<Vec<Scene<S>>> {
    let manifest_path = dir.join("manifest.txt");
    if !manifest_path.exists() {
        return Ok(Vec::new());
    }
    let name = manifest_path.display().to_string();
    let text = std::fs::read_to_string(&manifest_path)?;
    let mut scenes = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mut parts = line.split_whitespace();
        let (Some(image_rel), Some(gt_rel)) = (parts.next(), parts.next()) else {
            return Err(Error::Parse {
                file: name.clone(),
                offset: idx,
                msg: "expected `image_path gt_path`".into(),
            });
        };
        let (planes, h, w) = read_ppm(&dir.join(image_rel))?;
        let image = rgb_to_tensor::<S>(&planes, h, w)?;
        let gts = read_boxes::<S>(&dir.join(gt_rel))?
            .into_iter()
            .map(|(b, _)| b)
            .collect();
        scenes.push(Scene {
            image,
            gts,
            meta: SceneMeta {
                seed: 0,
                index: idx as u64,
                requested_objects: 0,
                placed_objects: 0,
            },
        });
    }
    Ok(scenes)
}

/// Paths of dataset entries, for commands that write per-image outputs.
pub fn manifest_entries(dir: &Path) -> Result<Vec<(PathBuf, PathBuf)>> {
    let manifest_path = dir.join("manifest.txt");
    if !manifest_path.exists() {
        return Ok(Vec::new());
    }
    let text = std::fs::read_to_string(&manifest_path)?;
    Ok(text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .filter_map(|l| {
            let mut p = l.split_whitespace();
            Some((dir.join(p.next()?), dir.join(p.next()?)))
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> SceneSpec {
        SceneSpec {
            image_size: 64,
            min_objects: 1,
            max_objects: 3,
            min_width: 8,
            max_width: 48,
            min_aspect: 2.0,
            max_aspect: 8.0,
            background: BackgroundStyle::Gradient,
            glyph: GlyphStyle::StripedBar,
            noise_amplitude: 0.03,
            seed: 5,
        }
    }

    #[test]
    fn deterministic_per_seed_and_index() {
        let s = spec();
        let a = generate_scene::<f32>(&s, 12).unwrap();
        let b = generate_scene::<f32>(&s, 12).unwrap();
        assert_eq!(a.image.data(), b.image.data());
        assert_eq!(a.gts.len(), b.gts.len());
        let c = generate_scene::<f32>(&s, 13).unwrap();
        assert_ne!(a.image.data(), c.image.data());
    }

    #[test]
    fn zero_objects_gives_background_only() {
        let mut s = spec();
        s.min_objects = 0;
        s.max_objects = 0;
        let scene = generate_scene::<f32>(&s, 0).unwrap();
        assert!(scene.gts.is_empty());
        assert_eq!(scene.meta.placed_objects, 0);
    }

    #[test]
    fn gts_inside_image_with_low_overlap() {
        let s = spec();
        for index in 0..50 {
            let scene = generate_scene::<f64>(&s, index).unwrap();
            for gt in &scene.gts {
                let (x1, y1, x2, y2) = gt.corners();
                assert!(x1 >= 0.0 && y1 >= 0.0 && x2 <= 64.0 && y2 <= 64.0);
            }
            for i in 0..scene.gts.len() {
                for j in (i + 1)..scene.gts.len() {
                    assert!(iou(&scene.gts[i], &scene.gts[j]) < 0.2);
                }
            }
        }
    }

    /// Width histogram check: log-uniform widths keep the decile spread
    /// at a ratio of at least 4 between the 10th and 90th percentiles.
    #[test]
    fn width_histogram_spans_the_range()  {
        let s = spec();
        let mut widths: Vec<f64> = Vec::new();
        for index in 0..1000 {
            let scene = generate_scene::<f64>(&s, index).unwrap();
            widths.extend(scene.gts.iter().map(|g| g.w));
        }
        widths.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let p10 = widths[widths.len() / 10];
        let p90 = widths[widths.len() * 9 / 10];
        assert!(p90 / p10 >= 4.0, "p10 {p10} p90 {p90}");
    }

    /// Labels re-measured from rendered pixels: single-object scenes, the
    /// bar is the only region outside the background luminance band.
    #[test]
    fn rendered_extent_matches_label() {
        let mut s = spec();
        s.min_objects = 1;
        s.max_objects = 1;
        for style in [BackgroundStyle::Flat, BackgroundStyle::Gradient, BackgroundStyle::Noise] {
            s.background = style;
            for index in 0..30 {
                let scene = generate_scene::<f64>(&s, index).unwrap();
                assert_eq!(scene.gts.len(), 1);
                let n = s.image_size;
                let (mut x1, mut y1, mut x2, mut y2) = (n, n, 0usize, 0usize);
                for row in 0..n {
                    for col in 0..n {
                        let lum = (0..3)
                            .map(|c| scene.image.get(&[c, row, col]))
                            .sum::<f64>()
                            / 3.0;
                        if !(0.25..=0.75).contains(&lum) {
                            x1 = x1.min(col);
                            y1 = y1.min(row);
                            x2 = x2.max(col + 1);
                            y2 = y2.max(row + 1);
                        }
                    }
                }
                assert!(x2 > x1 && y2 > y1, "no bar pixels found");
                let measured = BBox::<f64>::new(
                    (x1 + x2) as f64 / 2.0,
                    (y1 + y2) as f64 / 2.0,
                    (x2 - x1) as f64,
                    (y2 - y1) as f64,
                )
                .unwrap();
                let overlap = iou(&measured, &scene.gts[0]);
                assert!(overlap >= 0.95, "index {index} style {style:?}: IoU {overlap}");
            }
        }
    }

    #[test]
    fn dataset_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let s = spec();
        let scenes: Vec<Scene<f32>> =
            (0..5).map(|i| generate_scene(&s, i).unwrap()).collect();
        write_dataset(dir.path(), &scenes).unwrap();
        let back = load_dataset::<f32>(dir.path()).unwrap();
        assert_eq!(back.len(), scenes.len());
        for (a, b) in back.iter().zip(scenes.iter()) {
            assert_eq!(a.image.data(), b.image.data());
            assert_eq!(a.gts.len(), b.gts.len());
            for (ga, gb) in a.gts.iter().zip(b.gts.iter()) {
                assert!((ga.x - gb.x).abs() < 1e-6);
                assert!((ga.w - gb.w).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn empty_directory_is_empty_dataset() {
        let dir = tempfile::tempdir().unwrap();
        let scenes = load_dataset::<f32>(dir.path()).unwrap();
        assert!(scenes.is_empty());
    }

    #[test]
    fn truncated_ppm_reports_offset() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ppm");
        std::fs::write(&path, b"P6\n4 4\n255\n12").unwrap();
        let err = read_ppm(&path).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("bad.ppm"), "{msg}");
        assert!(msg.contains("truncated"), "{msg}");
    }

    #[test]
    fn ppm_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.ppm");
        let planes: Vec<u8> = (0..3 * 6 * 4).map(|i| (i * 7 % 256) as u8).collect();
        write_ppm(&path, &planes, 6, 4).unwrap();
        let (back, h, w) = read_ppm(&path).unwrap();
        assert_eq!((h, w), (6, 4));
        assert_eq!(back, planes);
    }
}
