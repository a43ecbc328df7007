//! The end-to-end detector: a small convolutional backbone, a scale
//! regression layer producing the per-cell scale map, and a detection head
//! of two anchor convolutions (classification and box regression).
//!
//! The scale map feeds three consumers: anchor sizes (through
//! [`crate::geometry::apply_scale`]), the head's sampling grids, and — via
//! hand-derived gradients from both paths — the scale regression layer
//! itself.

pub mod checkpoint;
pub mod infer;
pub mod layers;
pub mod loss;
pub mod optim;
pub mod train;

use rand::Rng;

use crate::anchorconv::{self, ConvParams, ConvSpec, ForwardContext};
use crate::config::TrainConfig;
use crate::geometry::{generate_initial_anchors, AnchorBox};
use crate::tensor::Tensor;
use crate::{Error, Result, Scalar};

use layers::{maxpool2_backward, maxpool2_forward, relu_backward, relu_forward, Conv2d, Conv2dCtx};

/// Feature-map stride of the backbone (two 2× pools).
pub const STRIDE: usize = 4;
/// Backbone and scale-regression kernel size.
const BACKBONE_K: usize = 3;
/// Detection-head kernel: one row of five taps.
const HEAD_KH: usize = 1;
const HEAD_KW: usize = 5;

/// The full parameter set plus the static hyperparameters forward needs.
#[derive(Debug, Clone)]
pub struct Model<S: Scalar> {
    pub backbone: Vec<Conv2d<S>>,
    pub scale_reg: Conv2d<S>,
    pub head_cls: ConvParams<S>,
    pub head_loc: ConvParams<S>,
    pub alpha: S,
    pub base_size: S,
    pub aspect_ratios: Vec<S>,
    pub scale_adaptive: bool,
    pub scale_grad_anchor_path: bool,
    pub scale_grad_conv_path: bool,
}

/// Saved activations of one forward pass, consumed by [`Model::backward`].
#[derive(Debug, Clone)]
pub struct ForwardPass<S: Scalar> {
    pub image_h: usize,
    pub image_w: usize,
    conv_ctxs: Vec<Conv2dCtx<S>>,
    relu_outs: Vec<Tensor<S>>,
    pool_args: Vec<Vec<u32>>,
    pool_in_shapes: Vec<Vec<usize>>,
    pub features: Tensor<S>,
    scale_ctx: Conv2dCtx<S>,
    pub scale_raw: Tensor<S>,
    /// Post-activation scale map, strictly positive and clamped at `s_max`.
    pub scale: Tensor<S>,
    pub s_max: S,
    head_ctx_cls: ForwardContext<S>,
    head_ctx_loc: ForwardContext<S>,
    pub conf: Tensor<S>,
    pub loc: Tensor<S>,
}

/// Gradients for every parameter tensor, in [`Model::param_names`] order,
/// plus the gradient reaching the pre-activation scale map (the combined
/// anchor-path and convolution-path signal after the activation chain rule).
#[derive(Debug, Clone)]
pub struct ModelGrads<S: Scalar> {
    pub tensors: Vec<Tensor<S>>,
    pub scale_raw: Tensor<S>,
}

impl<S: Scalar> Model<S> {
    /// Builds a model from the run configuration. Backbone and head kernels
    /// get He-uniform random values from `rng`; the scale regression layer
    /// is zero-initialized so the initial scale map is exactly 1 and the
    /// detector starts as a plain fixed-anchor network.
    pub fn init(cfg: &TrainConfig, rng: &mut impl Rng) -> Result<Self> {
        let n_c = cfg.aspect_ratios.len();
        let chans = &cfg.channels;
        let plan = [
            (3usize, chans[0]),
            (chans[0], chans[1]),
            (chans[1], chans[2]),
            (chans[2], chans[3]),
        ];
        let mut backbone = Vec::with_capacity(plan.len());
        for (c_in, c_out) in plan {
            let mut conv = Conv2d::zeros(c_in, c_out, BACKBONE_K)?;
            he_init(&mut conv.kernel, c_in * BACKBONE_K * BACKBONE_K, rng);
            backbone.push(conv);
        }
        let scale_reg = Conv2d::zeros(chans[3], 1, BACKBONE_K)?;

        let alpha = S::of(cfg.alpha);
        let cls_spec = ConvSpec::new(HEAD_KH, HEAD_KW, 1, 1, chans[3], 2 * n_c, alpha)?;
        let loc_spec = ConvSpec::new(HEAD_KH, HEAD_KW, 1, 1, chans[3], 4 * n_c, alpha)?;
        let mut head_cls = ConvParams::zeros(&cls_spec)?;
        let mut head_loc = ConvParams::zeros(&loc_spec)?;
        // Head kernels start near zero, and the classifier bias starts with
        // a background prior so the dense negatives produce calm gradients
        // from the first iterations.
        small_init(&mut head_cls.kernel, rng);
        small_init(&mut head_loc.kernel, rng);
        for (i, b) in head_cls.bias.data_mut().iter_mut().enumerate() {
            *b = if i % 2 == 0 { S::of(2.0) } else { S::of(-2.0) };
        }

        Ok(Self {
            backbone,
            scale_reg,
            head_cls,
            head_loc,
            alpha,
            base_size: S::of(cfg.base_size),
            aspect_ratios: cfg.aspect_ratios.iter().map(|&r| S::of(r)).collect(),
            scale_adaptive: cfg.scale_adaptive,
            scale_grad_anchor_path: cfg.scale_grad_anchor_path,
            scale_grad_conv_path: cfg.scale_grad_conv_path,
        })
    }

    pub fn n_c(&self) -> usize {
        self.aspect_ratios.len()
    }

    pub fn feature_channels(&self) -> usize {
        self.backbone.last().expect("backbone layers").c_out
    }

    fn head_spec(&self, c_out: usize) -> ConvSpec<S> {
        ConvSpec::new(
            HEAD_KH,
            HEAD_KW,
            1,
            1,
            self.feature_channels(),
            c_out,
            self.alpha,
        )
        .expect("head spec is valid by construction")
    }

    /// Feature-map extents for an input image.
    pub fn feature_dims(image_h: usize, image_w: usize) -> (usize, usize) {
        (image_h / 2 / 2, image_w / 2 / 2)
    }

    /// Initial anchors for a feature map of the given extents.
    pub fn anchors_for(&self, map_h: usize, map_w: usize) -> Result<Vec<AnchorBox<S>>> {
        generate_initial_anchors(map_h, map_w, STRIDE, self.base_size, &self.aspect_ratios)
    }

    /// Runs the backbone, the scale regression and the detection head.
    pub fn forward(&self, image: &Tensor<S>) -> Result<ForwardPass<S>> {
        let shape = image.shape();
        if shape.len() != 3 || shape[0] != 3 {
            return Err(Error::InvalidShape {
                shape: shape.to_vec(),
                reason: "expected a 3 × H × W image".into(),
            });
        }
        let (image_h, image_w) = (shape[1], shape[2]);
        if image_h < STRIDE || image_w < STRIDE {
            return Err(Error::InvalidArgument(format!(
                "image {image_h}×{image_w} is smaller than the stride {STRIDE}"
            )));
        }

        let mut conv_ctxs = Vec::with_capacity(self.backbone.len());
        let mut relu_outs = Vec::with_capacity(self.backbone.len());
        let mut pool_args = Vec::new();
        let mut pool_in_shapes = Vec::new();

        let mut x = image.clone();
        for (idx, conv) in self.backbone.iter().enumerate() {
            let (y, ctx) = conv.forward(&x)?;
            conv_ctxs.push(ctx);
            let y = relu_forward(&y);
            relu_outs.push(y.clone());
            x = if idx < 2 {
                pool_in_shapes.push(y.shape().to_vec());
                let (pooled, args) = maxpool2_forward(&y)?;
                pool_args.push(args);
                pooled
            } else {
                y
            };
        }
        let features = x;
        let (map_h, map_w) = (features.shape()[1], features.shape()[2]);

        // Scale regression: raw pre-activation z, then s = min(exp(z), s_max).
        let (raw3, scale_ctx) = self.scale_reg.forward(&features)?;
        let scale_raw = Tensor::from_vec(&[map_h, map_w], raw3.data().to_vec())?;
        let s_max = S::of(image_h.max(image_w) as f64);
        let scale = if self.scale_adaptive {
            let data = scale_raw.data().iter().map(|&z| z.exp().min(s_max)).collect();
            Tensor::from_vec(&[map_h, map_w], data)?
        } else {
            Tensor::alloc(&[map_h, map_w], S::one())?
        };

        let (conf, head_ctx_cls) = anchorconv::forward(
            &features,
            &self.head_cls,
            &scale,
            &self.head_spec(2 * self.n_c()),
        )?;
        let (loc, head_ctx_loc) = anchorconv::forward(
            &features,
            &self.head_loc,
            &scale,
            &self.head_spec(4 * self.n_c()),
        )?;

        Ok(ForwardPass {
            image_h,
            image_w,
            conv_ctxs,
            relu_outs,
            pool_args,
            pool_in_shapes,
            features,
            scale_ctx,
            scale_raw,
            scale,
            s_max,
            head_ctx_cls,
            head_ctx_loc,
            conf,
            loc,
        })
    }

    /// Backpropagates loss gradients on the head outputs plus the
    /// anchor-path scale gradient, combining the convolution-path scale
    /// gradient from both head layers, and returns parameter gradients in
    /// [`Model::param_names`] order.
    pub fn backward(
        &self,
        pass: &ForwardPass<S>,
        g_conf: &Tensor<S>,
        g_loc: &Tensor<S>,
        g_scale_anchor: &Tensor<S>,
    ) -> Result<ModelGrads<S>> {
        let cls_grads = anchorconv::backward(
            g_conf,
            &pass.features,
            &self.head_cls,
            &pass.head_ctx_cls,
        )?;
        let loc_grads = anchorconv::backward(
            g_loc,
            &pass.features,
            &self.head_loc,
            &pass.head_ctx_loc,
        )?;

        let mut g_features = cls_grads.input.add(&loc_grads.input)?;

        // Scale-map gradient: convolution path (sampling grids) plus anchor
        // path (box targets), then through the clamped-exp activation.
        let (map_h, map_w) = (pass.scale.shape()[0], pass.scale.shape()[1]);
        let mut g_raw_flat = Tensor::zeros(&[map_h, map_w])?;
        let (g_sr_kernel, g_sr_bias);
        if self.scale_adaptive {
            let mut g_scale = Tensor::zeros(&[map_h, map_w])?;
            if self.scale_grad_conv_path {
                g_scale = g_scale.add(&cls_grads.scale_map)?.add(&loc_grads.scale_map)?;
            }
            if self.scale_grad_anchor_path {
                g_scale = g_scale.add(g_scale_anchor)?;
            }
            let mut g_raw = Tensor::zeros(&[1, map_h, map_w])?;
            for i in 0..map_h * map_w {
                let g = g_scale.data()[i];
                let z = pass.scale_raw.data()[i];
                let s = pass.scale.data()[i];
                // Above the clamp the activation is flat.
                let v = if s < pass.s_max { g * z.exp() } else { S::zero() };
                g_raw.data_mut()[i] = v;
                g_raw_flat.data_mut()[i] = v;
            }
            let (g_feat_sr, gk, gb) = self.scale_reg.backward(&g_raw, &pass.scale_ctx)?;
            g_features = g_features.add(&g_feat_sr)?;
            g_sr_kernel = gk;
            g_sr_bias = gb;
        } else {
            g_sr_kernel = Tensor::zeros(self.scale_reg.kernel.shape())?;
            g_sr_bias = Tensor::zeros(self.scale_reg.bias.shape())?;
        }

        // Backbone chain in reverse.
        let mut bb_grads: Vec<(Tensor<S>, Tensor<S>)> = Vec::with_capacity(self.backbone.len());
        let mut upstream = g_features;
        for idx in (0..self.backbone.len()).rev() {
            if idx < 2 {
                // A pool sat between this layer's relu and the next input.
                let pool_idx = idx;
                upstream = maxpool2_backward(
                    &upstream,
                    &pass.pool_args[pool_idx],
                    &pass.pool_in_shapes[pool_idx],
                )?;
            }
            let g_relu = relu_backward(&upstream, &pass.relu_outs[idx])?;
            let (g_in, g_k, g_b) = self.backbone[idx].backward(&g_relu, &pass.conv_ctxs[idx])?;
            bb_grads.push((g_k, g_b));
            upstream = g_in;
        }
        bb_grads.reverse();

        let mut tensors = Vec::with_capacity(self.backbone.len() * 2 + 6);
        for (g_k, g_b) in bb_grads {
            tensors.push(g_k);
            tensors.push(g_b);
        }
        tensors.push(g_sr_kernel);
        tensors.push(g_sr_bias);
        tensors.push(cls_grads.kernel);
        tensors.push(cls_grads.bias);
        tensors.push(loc_grads.kernel);
        tensors.push(loc_grads.bias);
        Ok(ModelGrads {
            tensors,
            scale_raw: g_raw_flat,
        })
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for i in 0..self.backbone.len() {
            names.push(format!("backbone.{i}.kernel"));
            names.push(format!("backbone.{i}.bias"));
        }
        names.push("scale_reg.kernel".into());
        names.push("scale_reg.bias".into());
        names.push("head_cls.kernel".into());
        names.push("head_cls.bias".into());
        names.push("head_loc.kernel".into());
        names.push("head_loc.bias".into());
        names
    }

    pub fn params(&self) -> Vec<&Tensor<S>> {
        let mut out = Vec::new();
        for conv in &self.backbone {
            out.push(&conv.kernel);
            out.push(&conv.bias);
        }
        out.push(&self.scale_reg.kernel);
        out.push(&self.scale_reg.bias);
        out.push(&self.head_cls.kernel);
        out.push(&self.head_cls.bias);
        out.push(&self.head_loc.kernel);
        out.push(&self.head_loc.bias);
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<S>> {
        let mut out = Vec::new();
        for conv in &mut self.backbone {
            out.push(&mut conv.kernel);
            out.push(&mut conv.bias);
        }
        out.push(&mut self.scale_reg.kernel);
        out.push(&mut self.scale_reg.bias);
        out.push(&mut self.head_cls.kernel);
        out.push(&mut self.head_cls.bias);
        out.push(&mut self.head_loc.kernel);
        out.push(&mut self.head_loc.bias);
        out
    }
}

fn he_init<S: Scalar>(kernel: &mut Tensor<S>, fan_in: usize, rng: &mut impl Rng) {
    let bound = (6.0 / fan_in as f64).sqrt();
    for v in kernel.data_mut() {
        *v = S::of(rng.gen_range(-bound..bound));
    }
}

fn small_init<S: Scalar>(kernel: &mut Tensor<S>, rng: &mut impl Rng) {
    for v in kernel.data_mut() {
        *v = S::of(rng.gen_range(-0.03..0.03));
    }
}
