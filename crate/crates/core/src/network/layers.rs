//! Standard building blocks for the backbone: zero-padded stride-1
//! convolution, ReLU and 2×2 max pooling, each with a hand-derived backward.

use crate::tensor::Tensor;
use crate::{Error, Result, Scalar};

/// Square stride-1 convolution with zero padding of `k/2` ("same" output).
#[derive(Debug, Clone)]
pub struct Conv2d<S: Scalar> {
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
    pub kernel: Tensor<S>,
    pub bias: Tensor<S>,
}

/// Padded input copy kept for the backward pass.
#[derive(Debug, Clone)]
pub struct Conv2dCtx<S: Scalar> {
    padded: Vec<S>,
    h: usize,
    w: usize,
}

impl<S: Scalar> Conv2d<S> {
    pub fn zeros(c_in: usize, c_out: usize, k: usize) -> Result<Self> {
        if k % 2 == 0 || k == 0 {
            return Err(Error::InvalidArgument("kernel size must be odd".into()));
        }
        Ok(Self {
            c_in,
            c_out,
            k,
            kernel: Tensor::zeros(&[c_out, c_in, k, k])?,
            bias: Tensor::zeros(&[c_out])?,
        })
    }

    fn pad(&self, input: &Tensor<S>, h: usize, w: usize) -> Vec<S> {
        let p = self.k / 2;
        let (ph, pw) = (h + 2 * p, w + 2 * p);
        let mut padded = vec![S::zero(); self.c_in * ph * pw];
        for c in 0..self.c_in {
            let src = &input.data()[c * h * w..(c + 1) * h * w];
            let dst = &mut padded[c * ph * pw..(c + 1) * ph * pw];
            for row in 0..h {
                let s = &src[row * w..(row + 1) * w];
                dst[(row + p) * pw + p..(row + p) * pw + p + w].copy_from_slice(s);
            }
        }
        padded
    }

    pub fn forward(&self, input: &Tensor<S>) -> Result<(Tensor<S>, Conv2dCtx<S>)> {
        let shape = input.shape();
        if shape.len() != 3 || shape[0] != self.c_in {
            return Err(Error::ShapeMismatch {
                op: "conv2d input",
                left: shape.to_vec(),
                right: vec![self.c_in],
            });
        }
        let (h, w) = (shape[1], shape[2]);
        let p = self.k / 2;
        let pw = w + 2 * p;
        let padded = self.pad(input, h, w);

        let mut out = Tensor::zeros(&[self.c_out, h, w])?;
        let kdata = self.kernel.data();
        let out_data = out.data_mut();
        for x in 0..self.c_out {
            let och = &mut out_data[x * h * w..(x + 1) * h * w];
            och.fill(self.bias.data()[x]);
            for c in 0..self.c_in {
                let pch = &padded[c * (h + 2 * p) * pw..(c + 1) * (h + 2 * p) * pw];
                let kbase = (x * self.c_in + c) * self.k * self.k;
                for i in 0..self.k {
                    for j in 0..self.k {
                        let kv = kdata[kbase + i * self.k + j];
                        if kv == S::zero() {
                            continue;
                        }
                        for row in 0..h {
                            let src = &pch[(row + i) * pw + j..(row + i) * pw + j + w];
                            let dst = &mut och[row * w..(row + 1) * w];
                            for (d, &s) in dst.iter_mut().zip(src.iter()) {
                                *d = *d + kv * s;
                            }
                        }
                    }
                }
            }
        }
        Ok((out, Conv2dCtx { padded, h, w }))
    }

    /// Returns `(g_input, g_kernel, g_bias)`.
    pub fn backward(
        &self,
        upstream: &Tensor<S>,
        ctx: &Conv2dCtx<S>,
    ) -> Result<(Tensor<S>, Tensor<S>, Tensor<S>)> {
        let (h, w) = (ctx.h, ctx.w);
        if upstream.shape() != [self.c_out, h, w] {
            return Err(Error::ShapeMismatch {
                op: "conv2d upstream",
                left: upstream.shape().to_vec(),
                right: vec![self.c_out, h, w],
            });
        }
        let p = self.k / 2;
        let (ph, pw) = (h + 2 * p, w + 2 * p);

        let mut g_bias = Tensor::zeros(&[self.c_out])?;
        let mut g_kernel = Tensor::zeros(&[self.c_out, self.c_in, self.k, self.k])?;
        let mut g_padded = vec![S::zero(); self.c_in * ph * pw];

        let kdata = self.kernel.data();
        for x in 0..self.c_out {
            let up = &upstream.data()[x * h * w..(x + 1) * h * w];
            let mut b = S::zero();
            for &g in up {
                b = b + g;
            }
            g_bias.data_mut()[x] = b;

            for c in 0..self.c_in {
                let pch = &ctx.padded[c * ph * pw..(c + 1) * ph * pw];
                let gch = &mut g_padded[c * ph * pw..(c + 1) * ph * pw];
                let kbase = (x * self.c_in + c) * self.k * self.k;
                for i in 0..self.k {
                    for j in 0..self.k {
                        let mut acc = S::zero();
                        let kv = kdata[kbase + i * self.k + j];
                        for row in 0..h {
                            let urow = &up[row * w..(row + 1) * w];
                            let prow = &pch[(row + i) * pw + j..(row + i) * pw + j + w];
                            let grow = &mut gch[(row + i) * pw + j..(row + i) * pw + j + w];
                            for col in 0..w {
                                acc = acc + urow[col] * prow[col];
                                grow[col] = grow[col] + kv * urow[col];
                            }
                        }
                        g_kernel.data_mut()[kbase + i * self.k + j] = acc;
                    }
                }
            }
        }

        // Crop the padded input gradient back to the image.
        let mut g_input = Tensor::zeros(&[self.c_in, h, w])?;
        for c in 0..self.c_in {
            let gch = &g_padded[c * ph * pw..(c + 1) * ph * pw];
            let dst = &mut g_input.data_mut()[c * h * w..(c + 1) * h * w];
            for row in 0..h {
                dst[row * w..(row + 1) * w]
                    .copy_from_slice(&gch[(row + p) * pw + p..(row + p) * pw + p + w]);
            }
        }
        Ok((g_input, g_kernel, g_bias))
    }
}

pub fn relu_forward<S: Scalar>(input: &Tensor<S>) -> Tensor<S> {
    let mut out = input.clone();
    for v in out.data_mut() {
        if *v < S::zero() {
            *v = S::zero();
        }
    }
    out
}

/// Masks the upstream gradient by `output > 0`.
pub fn relu_backward<S: Scalar>(upstream: &Tensor<S>, output: &Tensor<S>) -> Result<Tensor<S>> {
    if upstream.shape() != output.shape() {
        return Err(Error::ShapeMismatch {
            op: "relu backward",
            left: upstream.shape().to_vec(),
            right: output.shape().to_vec(),
        });
    }
    let mut g = upstream.clone();
    for (gv, &ov) in g.data_mut().iter_mut().zip(output.data().iter()) {
        if ov <= S::zero() {
            *gv = S::zero();
        }
    }
    Ok(g)
}

/// 2×2 max pooling with stride 2; odd trailing rows/columns are dropped.
/// Returns the pooled map and the flat argmax index per output element
/// (ties resolved to the first element in scan order).
pub fn maxpool2_forward<S: Scalar>(input: &Tensor<S>) -> Result<(Tensor<S>, Vec<u32>)> {
    let shape = input.shape();
    if shape.len() != 3 {
        return Err(Error::InvalidShape {
            shape: shape.to_vec(),
            reason: "expected channels × height × width".into(),
        });
    }
    let (c_n, h, w) = (shape[0], shape[1], shape[2]);
    let (oh, ow) = (h / 2, w / 2);
    if oh == 0 || ow == 0 {
        return Err(Error::InvalidShape {
            shape: shape.to_vec(),
            reason: "too small to pool".into(),
        });
    }
    let mut out = Tensor::zeros(&[c_n, oh, ow])?;
    let mut argmax = vec![0u32; c_n * oh * ow];
    for c in 0..c_n {
        let src = &input.data()[c * h * w..(c + 1) * h * w];
        for r in 0..oh {
            for q in 0..ow {
                let mut best_idx = (2 * r) * w + 2 * q;
                let mut best = src[best_idx];
                for (di, dj) in [(0usize, 1usize), (1, 0), (1, 1)] {
                    let idx = (2 * r + di) * w + 2 * q + dj;
                    if src[idx] > best {
                        best = src[idx];
                        best_idx = idx;
                    }
                }
                out.data_mut()[(c * oh + r) * ow + q] = best;
                argmax[(c * oh + r) * ow + q] = (c * h * w + best_idx) as u32;
            }
        }
    }
    Ok((out, argmax))
}

pub fn maxpool2_backward<S: Scalar>(
    upstream: &Tensor<S>,
    argmax: &[u32],
    input_shape: &[usize],
) -> Result<Tensor<S>> {
    if upstream.len() != argmax.len() {
        return Err(Error::LengthMismatch {
            op: "maxpool backward",
            left: upstream.len(),
            right: argmax.len(),
        });
    }
    let mut g = Tensor::zeros(input_shape)?;
    for (&idx, &u) in argmax.iter().zip(upstream.data().iter()) {
        let slot = &mut g.data_mut()[idx as usize];
        *slot = *slot + u;
    }
    Ok(g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn random_tensor(rng: &mut StdRng, shape: &[usize]) -> Tensor<f64> {
        let len = shape.iter().product();
        Tensor::from_vec(shape, (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Direct triple-loop convolution used as the reference.
    fn conv_oracle(conv: &Conv2d<f64>, input: &Tensor<f64>) -> Tensor<f64> {
        let (h, w) = (input.shape()[1], input.shape()[2]);
        let p = (conv.k / 2) as i64;
        let mut out = Tensor::zeros(&[conv.c_out, h, w]).unwrap();
        for x in 0..conv.c_out {
            for row in 0..h as i64 {
                for col in 0..w as i64 {
                    let mut acc = conv.bias.data()[x];
                    for c in 0..conv.c_in {
                        for i in -p..=p {
                            for j in -p..=p {
                                let (r, q) = (row + i, col + j);
                                if r < 0 || q < 0 || r >= h as i64 || q >= w as i64 {
                                    continue;
                                }
                                acc += conv.kernel.get(&[
                                    x,
                                    c,
                                    (i + p) as usize,
                                    (j + p) as usize,
                                ]) * input.get(&[c, r as usize, q as usize]);
                            }
                        }
                    }
                    out.set(&[x, row as usize, col as usize], acc);
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_reference() {
        let mut rng = StdRng::seed_from_u64(2);
        let mut conv = Conv2d::zeros(3, 4, 3).unwrap();
        conv.kernel = random_tensor(&mut rng, &[4, 3, 3, 3]);
        conv.bias = random_tensor(&mut rng, &[4]);
        let input = random_tensor(&mut rng, &[3, 7, 6]);
        let (out, _) = conv.forward(&input).unwrap();
        let want = conv_oracle(&conv, &input);
        for (a, b) in out.data().iter().zip(want.data().iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        let mut rng = StdRng::seed_from_u64(4);
        let mut conv = Conv2d::zeros(2, 3, 3).unwrap();
        conv.kernel = random_tensor(&mut rng, &[3, 2, 3, 3]);
        conv.bias = random_tensor(&mut rng, &[3]);
        let input = random_tensor(&mut rng, &[2, 5, 5]);
        let upstream = random_tensor(&mut rng, &[3, 5, 5]);

        let loss = |conv: &Conv2d<f64>, input: &Tensor<f64>| {
            let (out, _) = conv.forward(input).unwrap();
            out.data()
                .iter()
                .zip(upstream.data().iter())
                .map(|(o, u)| o * u)
                .sum::<f64>()
        };

        let (_, ctx) = conv.forward(&input).unwrap();
        let (gi, gk, gb) = conv.backward(&upstream, &ctx).unwrap();

        let h = 1e-6;
        for idx in 0..input.len() {
            let mut plus = input.clone();
            plus.data_mut()[idx] += h;
            let mut minus = input.clone();
            minus.data_mut()[idx] -= h;
            let fd = (loss(&conv, &plus) - loss(&conv, &minus)) / (2.0 * h);
            assert!((fd - gi.data()[idx]).abs() <= 1e-6 * fd.abs().max(1.0));
        }
        for idx in 0..conv.kernel.len() {
            let mut cp = conv.clone();
            cp.kernel.data_mut()[idx] += h;
            let mut cm = conv.clone();
            cm.kernel.data_mut()[idx] -= h;
            let fd = (loss(&cp, &input) - loss(&cm, &input)) / (2.0 * h);
            assert!((fd - gk.data()[idx]).abs() <= 1e-6 * fd.abs().max(1.0));
        }
        for idx in 0..conv.bias.len() {
            let mut cp = conv.clone();
            cp.bias.data_mut()[idx] += h;
            let mut cm = conv.clone();
            cm.bias.data_mut()[idx] -= h;
            let fd = (loss(&cp, &input) - loss(&cm, &input)) / (2.0 * h);
            assert!((fd - gb.data()[idx]).abs() <= 1e-6 * fd.abs().max(1.0));
        }
    }

    #[test]
    fn pool_selects_max_and_routes_gradient() {
        let input = Tensor::from_vec(
            &[1, 4, 4],
            vec![
                1.0, 2.0, 5.0, 4.0, //
                3.0, 0.0, 1.0, 1.0, //
                9.0, 8.0, 0.0, 0.0, //
                7.0, 6.0, 0.0, 2.0,
            ],
        )
        .unwrap();
        let (out, argmax) = maxpool2_forward(&input).unwrap();
        assert_eq!(out.data(), &[3.0, 5.0, 9.0, 2.0]);
        let upstream = Tensor::from_vec(&[1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let g = maxpool2_backward(&upstream, &argmax, &[1, 4, 4]).unwrap();
        assert_eq!(g.get(&[0, 1, 0]), 1.0);
        assert_eq!(g.get(&[0, 0, 2]), 2.0);
        assert_eq!(g.get(&[0, 2, 0]), 3.0);
        assert_eq!(g.get(&[0, 3, 3]), 4.0);
        assert_eq!(g.data().iter().sum::<f64>(), 10.0);
    }

    #[test]
    fn relu_masks() {
        let x = Tensor::from_vec(&[3], vec![-1.0, 0.0, 2.0]).unwrap();
        let y = relu_forward(&x);
        assert_eq!(y.data(), &[0.0, 0.0, 2.0]);
        let up = Tensor::from_vec(&[3], vec![5.0, 5.0, 5.0]).unwrap();
        let g = relu_backward(&up, &y).unwrap();
        assert_eq!(g.data(), &[0.0, 0.0, 5.0]);
    }
}
