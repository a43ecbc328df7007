//! Run configuration: a flat UTF-8 `key = value` file with `#` comments.
//! Unknown keys are errors. `--set key=value` overrides reuse the same
//! names after the file parse.

use std::fmt::Write as _;
use std::path::Path;

use crate::synthdata::{BackgroundStyle, GlyphStyle};
use crate::{Error, Result};

/// Every knob of a run, with desk-scale defaults.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// 32 or 64; selects the floating-point type for the whole run.
    pub precision: u8,
    pub seed: u64,

    // train.*
    pub iterations: u64,
    pub lr_initial: f64,
    pub lr_decayed: f64,
    pub lr_decay_iteration: u64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub beta: f64,
    pub neg_weight: f64,
    pub checkpoint_interval: u64,

    // model.*
    pub alpha: f64,
    pub base_size: f64,
    pub aspect_ratios: Vec<f64>,
    pub pos_iou_threshold: f64,
    pub channels: Vec<usize>,
    pub scale_adaptive: bool,
    pub scale_grad_anchor_path: bool,
    pub scale_grad_conv_path: bool,
    /// Per-layer learning-rate multiplier for the scale regression path.
    pub scale_lr_gain: f64,
    /// Per-layer weight-decay multiplier for the scale regression layer;
    /// acts as a spring holding the scale map at 1 absent data pressure.
    pub scale_decay_mult: f64,
    /// Iterations during which the box-regression head trains at
    /// `loc_warm_mult`, letting the scale map claim the size signal first.
    pub scale_warmup: u64,
    pub loc_warm_mult: f64,
    /// Weight-decay multiplier for the box-regression head; biases the
    /// division of labor so anchor scales explain size and offsets stay
    /// small corrections.
    pub loc_decay_mult: f64,

    // data.*
    pub image_size: usize,
    pub train_scenes: usize,
    pub eval_scenes: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub min_width: usize,
    pub max_width: usize,
    pub min_aspect: f64,
    pub max_aspect: f64,
    pub background: BackgroundStyle,
    pub glyph: GlyphStyle,
    pub noise_amplitude: f64,
    pub data_dir: String,

    // infer.* / eval.*
    pub checkpoint: String,
    pub resolutions: Vec<usize>,
    pub conf_thresh: f64,
    pub nms_thresh: f64,
    pub eval_iou: f64,

    // bench.*
    pub bench_map_size: usize,
    pub bench_c_in: usize,
    pub bench_c_out: usize,
    pub bench_scale: f64,
    pub bench_repetitions: usize,
    pub bench_warmup: usize,
    pub bench_pyramid: Vec<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            precision: 32,
            seed: 7,
            iterations: 1500,
            lr_initial: 1e-3,
            lr_decayed: 1e-4,
            lr_decay_iteration: 1200,
            momentum: 0.9,
            weight_decay: 5e-4,
            beta: 1.0,
            neg_weight: 0.125,
            checkpoint_interval: 500,
            alpha: 0.5,
            base_size: 16.0,
            aspect_ratios: vec![2.0, 4.0, 8.0],
            pos_iou_threshold: 0.5,
            channels: vec![16, 32, 32, 32],
            scale_adaptive: true,
            scale_grad_anchor_path: true,
            scale_grad_conv_path: true,
            scale_lr_gain: 0.5,
            scale_decay_mult: 1000.0,
            scale_warmup: 1500,
            loc_warm_mult: 0.05,
            loc_decay_mult: 300.0,
            image_size: 64,
            train_scenes: 400,
            eval_scenes: 100,
            min_objects: 1,
            max_objects: 3,
            min_width: 8,
            max_width: 48,
            min_aspect: 2.0,
            max_aspect: 8.0,
            background: BackgroundStyle::Gradient,
            glyph: GlyphStyle::StripedBar,
            noise_amplitude: 0.03,
            data_dir: "out/synth".into(),
            checkpoint: "out/train/final.sadc".into(),
            resolutions: vec![64],
            conf_thresh: 0.5,
            nms_thresh: 0.45,
            eval_iou: 0.5,
            bench_map_size: 16,
            bench_c_in: 32,
            bench_c_out: 12,
            bench_scale: 2.0,
            bench_repetitions: 50,
            bench_warmup: 5,
            bench_pyramid: vec![16, 8, 4, 2, 1, 1],
        }
    }
}

fn parse_list<T: std::str::FromStr>(raw: &str) -> std::result::Result<Vec<T>, String> {
    raw.split(',')
        .map(|p| p.trim())
        .filter(|p| !p.is_empty())
        .map(|p| p.parse::<T>().map_err(|_| format!("bad list element `{p}`")))
        .collect()
}

fn join_list<T: std::fmt::Display>(items: &[T]) -> String {
    items
        .iter()
        .map(|v| v.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

impl TrainConfig {
    /// Applies one `key = value` pair. Unknown keys and malformed values are
    /// errors carrying the given location.
    pub fn apply(&mut self, key: &str, value: &str, file: &str, line: usize) -> Result<()> {
        let err = |msg: String| Error::Config {
            file: file.to_string(),
            line,
            msg,
        };
        macro_rules! parse {
            ($ty:ty) => {
                value
                    .parse::<$ty>()
                    .map_err(|_| err(format!("key `{key}`: cannot parse `{value}`")))?
            };
        }
        match key {
            "precision" => {
                let p: u8 = parse!(u8);
                if p != 32 && p != 64 {
                    return Err(err(format!("precision must be 32 or 64, got {p}")));
                }
                self.precision = p;
            }
            "seed" => self.seed = parse!(u64),
            "train.iterations" => self.iterations = parse!(u64),
            "train.lr_initial" => self.lr_initial = parse!(f64),
            "train.lr_decayed" => self.lr_decayed = parse!(f64),
            "train.lr_decay_iteration" => self.lr_decay_iteration = parse!(u64),
            "train.momentum" => self.momentum = parse!(f64),
            "train.weight_decay" => self.weight_decay = parse!(f64),
            "train.beta" => self.beta = parse!(f64),
            "train.neg_weight" => self.neg_weight = parse!(f64),
            "train.checkpoint_interval" => self.checkpoint_interval = parse!(u64),
            "model.alpha" => self.alpha = parse!(f64),
            "model.base_size" => self.base_size = parse!(f64),
            "model.aspect_ratios" => {
                self.aspect_ratios = parse_list(value).map_err(|e| err(format!("key `{key}`: {e}")))?
            }
            "model.pos_iou_threshold" => self.pos_iou_threshold = parse!(f64),
            "model.channels" => {
                self.channels = parse_list(value).map_err(|e| err(format!("key `{key}`: {e}")))?
            }
            "model.scale_adaptive" => self.scale_adaptive = parse!(bool),
            "model.scale_grad_anchor_path" => self.scale_grad_anchor_path = parse!(bool),
            "model.scale_grad_conv_path" => self.scale_grad_conv_path = parse!(bool),
            "model.scale_lr_gain" => self.scale_lr_gain = parse!(f64),
            "model.scale_decay_mult" => self.scale_decay_mult = parse!(f64),
            "model.scale_warmup" => self.scale_warmup = parse!(u64),
            "model.loc_warm_mult" => self.loc_warm_mult = parse!(f64),
            "model.loc_decay_mult" => self.loc_decay_mult = parse!(f64),
            "data.image_size" => self.image_size = parse!(usize),
            "data.train_scenes" => self.train_scenes = parse!(usize),
            "data.eval_scenes" => self.eval_scenes = parse!(usize),
            "data.min_objects" => self.min_objects = parse!(usize),
            "data.max_objects" => self.max_objects = parse!(usize),
            "data.min_width" => self.min_width = parse!(usize),
            "data.max_width" => self.max_width = parse!(usize),
            "data.min_aspect" => self.min_aspect = parse!(f64),
            "data.max_aspect" => self.max_aspect = parse!(f64),
            "data.background" => {
                self.background = BackgroundStyle::parse(value)
                    .ok_or_else(|| err(format!("key `{key}`: unknown style `{value}`")))?
            }
            "data.glyph" => {
                self.glyph = GlyphStyle::parse(value)
                    .ok_or_else(|| err(format!("key `{key}`: unknown style `{value}`")))?
            }
            "data.noise_amplitude" => self.noise_amplitude = parse!(f64),
            "data.dir" => self.data_dir = value.to_string(),
            "infer.checkpoint" => self.checkpoint = value.to_string(),
            "infer.resolutions" => {
                self.resolutions = parse_list(value).map_err(|e| err(format!("key `{key}`: {e}")))?
            }
            "infer.conf_thresh" => self.conf_thresh = parse!(f64),
            "infer.nms_thresh" => self.nms_thresh = parse!(f64),
            "eval.iou_thresh" => self.eval_iou = parse!(f64),
            "bench.map_size" => self.bench_map_size = parse!(usize),
            "bench.c_in" => self.bench_c_in = parse!(usize),
            "bench.c_out" => self.bench_c_out = parse!(usize),
            "bench.scale" => self.bench_scale = parse!(f64),
            "bench.repetitions" => self.bench_repetitions = parse!(usize),
            "bench.warmup" => self.bench_warmup = parse!(usize),
            "bench.pyramid" => {
                self.bench_pyramid = parse_list(value).map_err(|e| err(format!("key `{key}`: {e}")))?
            }
            _ => return Err(err(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Parses config text, starting from defaults.
    pub fn parse_str(text: &str, file: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (line_idx, raw) in text.lines().enumerate() {
            let line_no = line_idx + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Config {
                    file: file.to_string(),
                    line: line_no,
                    msg: format!("expected `key = value`, got `{raw}`"),
                });
            };
            cfg.apply(key.trim(), value.trim(), file, line_no)?;
        }
        cfg.validate(file)?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse_str(&text, &path.display().to_string())
    }

    /// Applies `key=value` override strings after the file parse.
    pub fn apply_overrides(&mut self, overrides: &[String]) -> Result<()> {
        for (idx, item) in overrides.iter().enumerate() {
            let Some((key, value)) = item.split_once('=') else {
                return Err(Error::Config {
                    file: "<override>".into(),
                    line: idx + 1,
                    msg: format!("expected key=value, got `{item}`"),
                });
            };
            self.apply(key.trim(), value.trim(), "<override>", idx + 1)?;
        }
        self.validate("<override>")?;
        Ok(())
    }

    fn validate(&self, file: &str) -> Result<()> {
        let err = |msg: String| Error::Config {
            file: file.to_string(),
            line: 0,
            msg,
        };
        if self.aspect_ratios.is_empty() || self.aspect_ratios.iter().any(|&r| r <= 0.0) {
            return Err(err("model.aspect_ratios must be a nonempty positive list".into()));
        }
        if self.channels.len() != 4 || self.channels.iter().any(|&c| c == 0) {
            return Err(err("model.channels must list 4 positive channel counts".into()));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(err("model.alpha must lie in [0, 1]".into()));
        }
        if self.base_size <= 0.0 {
            return Err(err("model.base_size must be positive".into()));
        }
        if !(0.0 < self.pos_iou_threshold && self.pos_iou_threshold < 1.0) {
            return Err(err("model.pos_iou_threshold must lie in (0, 1)".into()));
        }
        if self.image_size < 4 {
            return Err(err("data.image_size must be at least 4".into()));
        }
        if self.min_width == 0 || self.min_width > self.max_width || self.max_width > self.image_size {
            return Err(err("data width range must fit inside the image".into()));
        }
        if self.min_objects > self.max_objects {
            return Err(err("data object count range is inverted".into()));
        }
        if self.min_aspect <= 0.0 || self.min_aspect > self.max_aspect {
            return Err(err("data aspect range is invalid".into()));
        }
        if self.lr_decay_iteration > self.iterations && self.iterations > 0 {
            // Allowed: decay simply never fires.
        }
        if self.resolutions.is_empty() {
            return Err(err("infer.resolutions must not be empty".into()));
        }
        Ok(())
    }

    /// Canonical serialization; `parse_str` of the output reproduces `self`.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "precision = {}", self.precision);
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "train.iterations = {}", self.iterations);
        let _ = writeln!(s, "train.lr_initial = {}", self.lr_initial);
        let _ = writeln!(s, "train.lr_decayed = {}", self.lr_decayed);
        let _ = writeln!(s, "train.lr_decay_iteration = {}", self.lr_decay_iteration);
        let _ = writeln!(s, "train.momentum = {}", self.momentum);
        let _ = writeln!(s, "train.weight_decay = {}", self.weight_decay);
        let _ = writeln!(s, "train.beta = {}", self.beta);
        let _ = writeln!(s, "train.neg_weight = {}", self.neg_weight);
        let _ = writeln!(s, "train.checkpoint_interval = {}", self.checkpoint_interval);
        let _ = writeln!(s, "model.alpha = {}", self.alpha);
        let _ = writeln!(s, "model.base_size = {}", self.base_size);
        let _ = writeln!(s, "model.aspect_ratios = {}", join_list(&self.aspect_ratios));
        let _ = writeln!(s, "model.pos_iou_threshold = {}", self.pos_iou_threshold);
        let _ = writeln!(s, "model.channels = {}", join_list(&self.channels));
        let _ = writeln!(s, "model.scale_adaptive = {}", self.scale_adaptive);
        let _ = writeln!(s, "model.scale_grad_anchor_path = {}", self.scale_grad_anchor_path);
        let _ = writeln!(s, "model.scale_grad_conv_path = {}", self.scale_grad_conv_path);
        let _ = writeln!(s, "model.scale_lr_gain = {}", self.scale_lr_gain);
        let _ = writeln!(s, "model.scale_decay_mult = {}", self.scale_decay_mult);
        let _ = writeln!(s, "model.scale_warmup = {}", self.scale_warmup);
        let _ = writeln!(s, "model.loc_warm_mult = {}", self.loc_warm_mult);
        let _ = writeln!(s, "model.loc_decay_mult = {}", self.loc_decay_mult);
        let _ = writeln!(s, "data.image_size = {}", self.image_size);
        let _ = writeln!(s, "data.train_scenes = {}", self.train_scenes);
        let _ = writeln!(s, "data.eval_scenes = {}", self.eval_scenes);
        let _ = writeln!(s, "data.min_objects = {}", self.min_objects);
        let _ = writeln!(s, "data.max_objects = {}", self.max_objects);
        let _ = writeln!(s, "data.min_width = {}", self.min_width);
        let _ = writeln!(s, "data.max_width = {}", self.max_width);
        let _ = writeln!(s, "data.min_aspect = {}", self.min_aspect);
        let _ = writeln!(s, "data.max_aspect = {}", self.max_aspect);
        let _ = writeln!(s, "data.background = {}", self.background.name());
        let _ = writeln!(s, "data.glyph = {}", self.glyph.name());
        let _ = writeln!(s, "data.noise_amplitude = {}", self.noise_amplitude);
        let _ = writeln!(s, "data.dir = {}", self.data_dir);
        let _ = writeln!(s, "infer.checkpoint = {}", self.checkpoint);
        let _ = writeln!(s, "infer.resolutions = {}", join_list(&self.resolutions));
        let _ = writeln!(s, "infer.conf_thresh = {}", self.conf_thresh);
        let _ = writeln!(s, "infer.nms_thresh = {}", self.nms_thresh);
        let _ = writeln!(s, "eval.iou_thresh = {}", self.eval_iou);
        let _ = writeln!(s, "bench.map_size = {}", self.bench_map_size);
        let _ = writeln!(s, "bench.c_in = {}", self.bench_c_in);
        let _ = writeln!(s, "bench.c_out = {}", self.bench_c_out);
        let _ = writeln!(s, "bench.scale = {}", self.bench_scale);
        let _ = writeln!(s, "bench.repetitions = {}", self.bench_repetitions);
        let _ = writeln!(s, "bench.warmup = {}", self.bench_warmup);
        let _ = writeln!(s, "bench.pyramid = {}", join_list(&self.bench_pyramid));
        s
    }
}
