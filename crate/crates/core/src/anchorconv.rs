//! Anchor convolution: a stride-1 convolution whose sampling grid dilates
//! with a per-position scale coefficient.
//!
//! For output position `(c_h, c_w)` with scale `s`, tap `(i, j)` reads the
//! input at `(c_h + i·d_h·s, c_w + j·d_w·s)` through bilinear interpolation
//! with replicated borders. Center-row taps (`i = 0`) additionally blend in
//! two extra rows at `c_h ± (s−1)/2` with weight `α/2` each whenever `s > 1`,
//! so an `1×k_w` kernel still picks up height information as the receptive
//! field grows. At `s = 1` every coordinate is integral and the operator
//! equals a standard dilated convolution.
//!
//! The backward pass is hand-derived. Gradients with respect to the scale
//! map flow through both sampling coordinates; at points where the
//! interpolant is non-smooth (integer coordinates, and the blend activation
//! at `s = 1`) the implementation returns the symmetric derivative — the
//! mean of the one-sided derivatives — which is exactly the limit a central
//! finite difference measures.

use crate::tensor::{dot_slices, Tensor};
use crate::{Error, Result, Scalar};

/// Static description of one anchor convolution layer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConvSpec<S: Scalar> {
    pub k_h: usize,
    pub k_w: usize,
    pub d_h: usize,
    pub d_w: usize,
    pub c_in: usize,
    pub c_out: usize,
    /// Blend weight for the side rows, in `[0, 1]`.
    pub alpha: S,
}

impl<S: Scalar> ConvSpec<S> {
    pub fn new(
        k_h: usize,
        k_w: usize,
        d_h: usize,
        d_w: usize,
        c_in: usize,
        c_out: usize,
        alpha: S,
    ) -> Result<Self> {
        if k_h == 0 || k_w == 0 || k_h % 2 == 0 || k_w % 2 == 0 {
            return Err(Error::InvalidArgument(
                "kernel extents must be odd and at least 1".into(),
            ));
        }
        if d_h == 0 || d_w == 0 {
            return Err(Error::InvalidArgument("dilations must be at least 1".into()));
        }
        if c_in == 0 || c_out == 0 {
            return Err(Error::InvalidArgument("channel counts must be positive".into()));
        }
        if alpha < S::zero() || alpha > S::one() {
            return Err(Error::InvalidArgument("alpha must lie in [0, 1]".into()));
        }
        Ok(Self {
            k_h,
            k_w,
            d_h,
            d_w,
            c_in,
            c_out,
            alpha,
        })
    }

    pub fn taps(&self) -> usize {
        self.k_h * self.k_w
    }

    fn half_extents(&self) -> (i64, i64) {
        ((self.k_h / 2) as i64, (self.k_w / 2) as i64)
    }

    pub fn kernel_shape(&self) -> [usize; 4] {
        [self.c_out, self.c_in, self.k_h, self.k_w]
    }
}

/// Learnable kernel and bias for one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams<S: Scalar> {
    pub kernel: Tensor<S>,
    pub bias: Tensor<S>,
}

impl<S: Scalar> ConvParams<S> {
    pub fn zeros(spec: &ConvSpec<S>) -> Result<Self> {
        Ok(Self {
            kernel: Tensor::zeros(&spec.kernel_shape())?,
            bias: Tensor::zeros(&[spec.c_out])?,
        })
    }

    pub fn new(kernel: Tensor<S>, bias: Tensor<S>, spec: &ConvSpec<S>) -> Result<Self> {
        if kernel.shape() != spec.kernel_shape() {
            return Err(Error::ShapeMismatch {
                op: "conv kernel",
                left: kernel.shape().to_vec(),
                right: spec.kernel_shape().to_vec(),
            });
        }
        if bias.shape() != [spec.c_out] {
            return Err(Error::ShapeMismatch {
                op: "conv bias",
                left: bias.shape().to_vec(),
                right: vec![spec.c_out],
            });
        }
        Ok(Self { kernel, bias })
    }
}

/// Fractional sampling coordinates for tap `(i, j)` at scale `s`:
/// `(c_h + i·d_h·s, c_w + j·d_w·s)`. With `s = 1` this is the standard
/// dilated-convolution grid.
pub fn sample_coords<S: Scalar>(
    c_h: S,
    c_w: S,
    i: i64,
    j: i64,
    spec: &ConvSpec<S>,
    s: S,
) -> Result<(S, S)> {
    if s <= S::zero() || !s.is_finite() {
        return Err(Error::NonPositiveScale(s.as_f64()));
    }
    let h = c_h + S::of((i * spec.d_h as i64) as f64) * s;
    let w = c_w + S::of((j * spec.d_w as i64) as f64) * s;
    Ok((h, w))
}

/// One bilinear read: raw coordinates, blend weight, pre-resolved corner
/// indices and weights, and the coefficients that turn one-sided grid slopes
/// into the scale derivative.
#[derive(Debug, Clone, Copy)]
struct Sample<S: Scalar> {
    h: S,
    w: S,
    weight: S,
    /// Coefficients on the one-sided height slopes (σ₋, σ₊) in ∂value/∂s.
    gh_minus: S,
    gh_plus: S,
    /// Coefficients on the one-sided width slopes (σ₋, σ₊) in ∂value/∂s.
    gw_minus: S,
    gw_plus: S,
    corner_idx: [u32; 4],
    corner_w: [S; 4],
}

/// Per-axis corner resolution with replicated borders.
/// Returns (lower index, upper index, fraction toward the upper index).
#[inline]
fn axis_corners<S: Scalar>(coord: S, extent: usize) -> (usize, usize, S) {
    let max = S::of((extent - 1) as f64);
    let c = coord.max(S::zero()).min(max);
    let i0 = c.floor();
    let frac = c - i0;
    let i0 = i0.as_f64() as usize;
    let i1 = (i0 + 1).min(extent - 1);
    (i0, i1, frac)
}

/// Bilinear interpolation on one channel map with border clamping.
/// Integer coordinates return the stored value exactly.
pub fn bilinear_sample<S: Scalar>(map: &[S], height: usize, width: usize, h: S, w: S) -> S {
    debug_assert_eq!(map.len(), height * width);
    let (h0, h1, fy) = axis_corners(h, height);
    let (w0, w1, fx) = axis_corners(w, width);
    let one = S::one();
    (one - fy) * (one - fx) * map[h0 * width + w0]
        + (one - fy) * fx * map[h0 * width + w1]
        + fy * (one - fx) * map[h1 * width + w0]
        + fy * fx * map[h1 * width + w1]
}

/// One-sided slopes of the interpolant at a sample point, per axis.
/// Outside the map both slopes are zero (the clamp freezes the value); at an
/// interior integer coordinate the two sides are the adjacent cell slopes;
/// inside a cell both sides equal the in-cell slope.
#[inline]
fn bilinear_slopes<S: Scalar>(
    map: &[S],
    height: usize,
    width: usize,
    h: S,
    w: S,
) -> (S, S, S, S) {
    let (h0, h1, fy) = axis_corners(h, height);
    let (w0, w1, fx) = axis_corners(w, width);
    let one = S::one();
    let zero = S::zero();
    let at = |r: usize, c: usize| map[r * width + c];

    let h_max = S::of((height - 1) as f64);
    let w_max = S::of((width - 1) as f64);

    let (sh_minus, sh_plus) = if h < zero || h > h_max {
        (zero, zero)
    } else if fy > zero {
        let slope = (one - fx) * (at(h1, w0) - at(h0, w0)) + fx * (at(h1, w1) - at(h0, w1));
        (slope, slope)
    } else {
        let up = if h0 + 1 <= height - 1 {
            (one - fx) * (at(h0 + 1, w0) - at(h0, w0)) + fx * (at(h0 + 1, w1) - at(h0, w1))
        } else {
            zero
        };
        let down = if h0 >= 1 {
            (one - fx) * (at(h0, w0) - at(h0 - 1, w0)) + fx * (at(h0, w1) - at(h0 - 1, w1))
        } else {
            zero
        };
        (down, up)
    };

    let (sw_minus, sw_plus) = if w < zero || w > w_max {
        (zero, zero)
    } else if fx > zero {
        let slope = (one - fy) * (at(h0, w1) - at(h0, w0)) + fy * (at(h1, w1) - at(h1, w0));
        (slope, slope)
    } else {
        let right = if w0 + 1 <= width - 1 {
            (one - fy) * (at(h0, w0 + 1) - at(h0, w0)) + fy * (at(h1, w0 + 1) - at(h1, w0))
        } else {
            zero
        };
        let left = if w0 >= 1 {
            (one - fy) * (at(h0, w0) - at(h0, w0 - 1)) + fy * (at(h1, w0) - at(h1, w0 - 1))
        } else {
            zero
        };
        (left, right)
    };

    (sh_minus, sh_plus, sw_minus, sw_plus)
}

impl<S: Scalar> Sample<S> {
    fn new(h: S, w: S, weight: S, dh_ds: S, dw_ds: S, in_h: usize, in_w: usize) -> Self {
        let (h0, h1, fy) = axis_corners(h, in_h);
        let (w0, w1, fx) = axis_corners(w, in_w);
        let one = S::one();
        let half = S::of(0.5);
        Self {
            h,
            w,
            weight,
            gh_minus: weight * dh_ds * half,
            gh_plus: weight * dh_ds * half,
            gw_minus: weight * dw_ds * half,
            gw_plus: weight * dw_ds * half,
            corner_idx: [
                (h0 * in_w + w0) as u32,
                (h0 * in_w + w1) as u32,
                (h1 * in_w + w0) as u32,
                (h1 * in_w + w1) as u32,
            ],
            corner_w: [
                (one - fy) * (one - fx),
                (one - fy) * fx,
                fy * (one - fx),
                fy * fx,
            ],
        }
    }

    #[inline]
    fn value(&self, map: &[S]) -> S {
        self.corner_w[0] * map[self.corner_idx[0] as usize]
            + self.corner_w[1] * map[self.corner_idx[1] as usize]
            + self.corner_w[2] * map[self.corner_idx[2] as usize]
            + self.corner_w[3] * map[self.corner_idx[3] as usize]
    }
}

/// Sampling plan for one output position: every bilinear read of every tap,
/// with the weights and scale-derivative coefficients resolved.
#[derive(Debug, Clone)]
pub struct SamplePlan<S: Scalar> {
    /// Per-tap sample ranges into `samples`.
    tap_bounds: Vec<u32>,
    samples: Vec<Sample<S>>,
}

fn plan_position<S: Scalar>(
    row: usize,
    col: usize,
    s: S,
    spec: &ConvSpec<S>,
    in_h: usize,
    in_w: usize,
) -> SamplePlan<S> {
    let (fh, fw) = spec.half_extents();
    let c_h = S::of(row as f64);
    let c_w = S::of(col as f64);
    let one = S::one();
    let half = S::of(0.5);
    let alpha = spec.alpha;
    let mut samples = Vec::with_capacity(spec.taps() * 3);
    let mut tap_bounds = Vec::with_capacity(spec.taps() + 1);
    tap_bounds.push(0u32);

    for i in -fh..=fh {
        for j in -fw..=fw {
            let dw_ds = S::of((j * spec.d_w as i64) as f64);
            let w = c_w + dw_ds * s;
            if i != 0 {
                let dh_ds = S::of((i * spec.d_h as i64) as f64);
                let h = c_h + dh_ds * s;
                samples.push(Sample::new(h, w, one, dh_ds, dw_ds, in_h, in_w));
            } else if s > one {
                let delta = (s - one) * half;
                samples.push(Sample::new(c_h, w, one - alpha, S::zero(), dw_ds, in_h, in_w));
                if alpha > S::zero() {
                    let side = alpha * half;
                    samples.push(Sample::new(c_h - delta, w, side, -half, dw_ds, in_h, in_w));
                    samples.push(Sample::new(c_h + delta, w, side, half, dw_ds, in_h, in_w));
                }
            } else {
                // s ≤ 1: the center row keeps full weight so the operator
                // reduces exactly to a standard convolution at s = 1.
                samples.push(Sample::new(c_h, w, one, S::zero(), dw_ds, in_h, in_w));
                if s == one && alpha > S::zero() {
                    // Symmetric derivative across the blend activation: the
                    // side rows appear for s > 1 only, so the central limit
                    // carries half of their one-sided height slopes.
                    let eighth = alpha * S::of(0.125);
                    let mut ghost = Sample::new(c_h, w, S::zero(), S::zero(), S::zero(), in_h, in_w);
                    ghost.gh_minus = -eighth;
                    ghost.gh_plus = eighth;
                    samples.push(ghost);
                }
            }
            tap_bounds.push(samples.len() as u32);
        }
    }
    SamplePlan { tap_bounds, samples }
}

/// The `k_h·k_w` sampled values for one channel at one output position.
pub fn build_feature_vector<S: Scalar>(
    input: &Tensor<S>,
    channel: usize,
    row: usize,
    col: usize,
    s: S,
    spec: &ConvSpec<S>,
) -> Result<Vec<S>> {
    if s <= S::zero() || !s.is_finite() {
        return Err(Error::NonPositiveScale(s.as_f64()));
    }
    let [c_in, in_h, in_w] = input_dims(input)?;
    if channel >= c_in || row >= in_h || col >= in_w {
        return Err(Error::InvalidArgument("position out of bounds".into()));
    }
    let plan = plan_position(row, col, s, spec, in_h, in_w);
    let map = &input.data()[channel * in_h * in_w..(channel + 1) * in_h * in_w];
    let mut out = Vec::with_capacity(spec.taps());
    for t in 0..spec.taps() {
        let lo = plan.tap_bounds[t] as usize;
        let hi = plan.tap_bounds[t + 1] as usize;
        let mut acc = S::zero();
        for sample in &plan.samples[lo..hi] {
            acc = acc + sample.weight * sample.value(map);
        }
        out.push(acc);
    }
    Ok(out)
}

fn input_dims<S: Scalar>(input: &Tensor<S>) -> Result<[usize; 3]> {
    match input.shape() {
        [c, h, w] => Ok([*c, *h, *w]),
        other => Err(Error::InvalidShape {
            shape: other.to_vec(),
            reason: "expected channels × height × width".into(),
        }),
    }
}

/// Everything backward needs from the forward pass: the per-position plans,
/// the gathered feature vectors and the scale values they were built at.
#[derive(Debug, Clone)]
pub struct ForwardContext<S: Scalar> {
    spec: ConvSpec<S>,
    in_h: usize,
    in_w: usize,
    plans: Vec<SamplePlan<S>>,
    /// Feature vectors, laid out `[c_in][position][tap]`.
    features: Vec<S>,
}

impl<S: Scalar> ForwardContext<S> {
    pub fn positions(&self) -> usize {
        self.in_h * self.in_w
    }
}

/// Gradients of one anchor convolution layer.
#[derive(Debug, Clone)]
pub struct AnchorConvGrads<S: Scalar> {
    pub input: Tensor<S>,
    pub kernel: Tensor<S>,
    pub bias: Tensor<S>,
    pub scale_map: Tensor<S>,
}

/// Forward pass: `O[x][y] = Σ_c Φ_xc · I_cy + b_x` with the feature vector
/// `I_cy` sampled at that position's scale coefficient.
///
/// Returns the output `[c_out, H, W]` and the context for [`backward`].
pub fn forward<S: Scalar>(
    input: &Tensor<S>,
    params: &ConvParams<S>,
    scale_map: &Tensor<S>,
    spec: &ConvSpec<S>,
) -> Result<(Tensor<S>, ForwardContext<S>)> {
    let [c_in, in_h, in_w] = input_dims(input)?;
    if c_in != spec.c_in {
        return Err(Error::ShapeMismatch {
            op: "anchorconv input channels",
            left: vec![c_in],
            right: vec![spec.c_in],
        });
    }
    if scale_map.shape() != [in_h, in_w] {
        return Err(Error::ShapeMismatch {
            op: "anchorconv scale map",
            left: scale_map.shape().to_vec(),
            right: vec![in_h, in_w],
        });
    }
    if params.kernel.shape() != spec.kernel_shape() || params.bias.shape() != [spec.c_out] {
        return Err(Error::ShapeMismatch {
            op: "anchorconv params",
            left: params.kernel.shape().to_vec(),
            right: spec.kernel_shape().to_vec(),
        });
    }
    for &s in scale_map.data() {
        if s <= S::zero() || !s.is_finite() {
            return Err(Error::NonPositiveScale(s.as_f64()));
        }
    }

    let positions = in_h * in_w;
    let taps = spec.taps();

    let mut plans = Vec::with_capacity(positions);
    for row in 0..in_h {
        for col in 0..in_w {
            plans.push(plan_position(row, col, scale_map.data()[row * in_w + col], spec, in_h, in_w));
        }
    }

    // Gather I_cy for every channel and position.
    let mut features = vec![S::zero(); c_in * positions * taps];
    for c in 0..c_in {
        let map = &input.data()[c * positions..(c + 1) * positions];
        let base = c * positions * taps;
        for (y, plan) in plans.iter().enumerate() {
            let row = &mut features[base + y * taps..base + (y + 1) * taps];
            for t in 0..taps {
                let lo = plan.tap_bounds[t] as usize;
                let hi = plan.tap_bounds[t + 1] as usize;
                let mut acc = S::zero();
                for sample in &plan.samples[lo..hi] {
                    acc = acc + sample.weight * sample.value(map);
                }
                row[t] = acc;
            }
        }
    }

    let mut output = Tensor::zeros(&[spec.c_out, in_h, in_w])?;
    let out_data = output.data_mut();
    for x in 0..spec.c_out {
        let bias = params.bias.data()[x];
        for y in 0..positions {
            let mut acc = bias;
            for c in 0..c_in {
                let krow = &params.kernel.data()[(x * c_in + c) * taps..(x * c_in + c + 1) * taps];
                let feat = &features[(c * positions + y) * taps..(c * positions + y + 1) * taps];
                acc = dot_slices(krow, feat, acc);
            }
            out_data[x * positions + y] = acc;
        }
    }

    Ok((
        output,
        ForwardContext {
            spec: *spec,
            in_h,
            in_w,
            plans,
            features,
        },
    ))
}

/// Backward pass. Computes gradients with respect to the input, kernel,
/// bias and scale map given the upstream gradient `g(O)`:
///
/// - `g(I_cy) = Σ_x Φᵀ_xc g(O_xy)`, scattered back to the bilinear corners
///   for `g(input)` and contracted with the coordinate slopes for
///   `g(scale_map)`;
/// - `g(Φ_xc) = Σ_y g(O_xy) Iᵀ_cy`;
/// - `g(b_x) = Σ_y g(O_xy)`.
pub fn backward<S: Scalar>(
    upstream: &Tensor<S>,
    input: &Tensor<S>,
    params: &ConvParams<S>,
    ctx: &ForwardContext<S>,
) -> Result<AnchorConvGrads<S>> {
    let spec = &ctx.spec;
    let [c_in, in_h, in_w] = input_dims(input)?;
    if c_in != spec.c_in || in_h != ctx.in_h || in_w != ctx.in_w {
        return Err(Error::ShapeMismatch {
            op: "anchorconv backward input",
            left: vec![c_in, in_h, in_w],
            right: vec![spec.c_in, ctx.in_h, ctx.in_w],
        });
    }
    if upstream.shape() != [spec.c_out, in_h, in_w] {
        return Err(Error::ShapeMismatch {
            op: "anchorconv backward upstream",
            left: upstream.shape().to_vec(),
            right: vec![spec.c_out, in_h, in_w],
        });
    }
    let positions = in_h * in_w;
    let taps = spec.taps();

    let mut d_bias = Tensor::zeros(&[spec.c_out])?;
    let mut d_kernel = Tensor::zeros(&spec.kernel_shape())?;
    let mut d_input = Tensor::zeros(&[c_in, in_h, in_w])?;
    let mut d_scale = Tensor::zeros(&[in_h, in_w])?;

    // Bias and kernel gradients.
    for x in 0..spec.c_out {
        let up = &upstream.data()[x * positions..(x + 1) * positions];
        let mut b = S::zero();
        for &g in up {
            b = b + g;
        }
        d_bias.data_mut()[x] = b;
        for c in 0..c_in {
            let krow = &mut d_kernel.data_mut()[(x * c_in + c) * taps..(x * c_in + c + 1) * taps];
            for (y, &g) in up.iter().enumerate() {
                let feat = &ctx.features[(c * positions + y) * taps..(c * positions + y + 1) * taps];
                for t in 0..taps {
                    krow[t] = krow[t] + g * feat[t];
                }
            }
        }
    }

    // g(I_cy), then scatter to input corners and contract with slopes for
    // the scale gradient.
    let mut gfeat = vec![S::zero(); taps];
    for c in 0..c_in {
        let map = &input.data()[c * positions..(c + 1) * positions];
        let (dmaps, d_scale_data) = (&mut d_input, d_scale.data_mut());
        let dmap = &mut dmaps.data_mut()[c * positions..(c + 1) * positions];
        for y in 0..positions {
            gfeat.fill(S::zero());
            for x in 0..spec.c_out {
                let g = upstream.data()[x * positions + y];
                if g == S::zero() {
                    continue;
                }
                let krow = &params.kernel.data()[(x * c_in + c) * taps..(x * c_in + c + 1) * taps];
                for t in 0..taps {
                    gfeat[t] = gfeat[t] + krow[t] * g;
                }
            }
            let plan = &ctx.plans[y];
            let mut ds = S::zero();
            for t in 0..taps {
                let gt = gfeat[t];
                if gt == S::zero() {
                    continue;
                }
                let lo = plan.tap_bounds[t] as usize;
                let hi = plan.tap_bounds[t + 1] as usize;
                for sample in &plan.samples[lo..hi] {
                    if sample.weight != S::zero() {
                        let gw = gt * sample.weight;
                        for k in 0..4 {
                            dmap[sample.corner_idx[k] as usize] =
                                dmap[sample.corner_idx[k] as usize] + gw * sample.corner_w[k];
                        }
                    }
                    let needs_slopes = sample.gh_minus != S::zero()
                        || sample.gh_plus != S::zero()
                        || sample.gw_minus != S::zero()
                        || sample.gw_plus != S::zero();
                    if needs_slopes {
                        let (sh_m, sh_p, sw_m, sw_p) =
                            bilinear_slopes(map, in_h, in_w, sample.h, sample.w);
                        ds = ds
                            + gt * (sample.gh_minus * sh_m
                                + sample.gh_plus * sh_p
                                + sample.gw_minus * sw_m
                                + sample.gw_plus * sw_p);
                    }
                }
            }
            d_scale_data[y] = d_scale_data[y] + ds;
        }
    }

    Ok(AnchorConvGrads {
        input: d_input,
        kernel: d_kernel,
        bias: d_bias,
        scale_map: d_scale,
    })
}
