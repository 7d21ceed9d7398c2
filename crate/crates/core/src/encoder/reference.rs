//! Seeded strided-convolution encoder with a hand-written reverse pass.
//!
//! Geometry: `log2(downsample_factor)` layers of 3x3 convolution (stride 2,
//! zero padding 1, [`HIDDEN_CHANNELS`] outputs) each followed by `tanh`,
//! then a 1x1 convolution to `latent_channels`. Every layer has a bias.
//!
//! Weights are drawn from SplitMix64 seeded with the encoder seed. Layers are
//! enumerated in forward order; within a layer all kernel weights come first
//! in `[out][in][ky][kx]` order, then the biases in `[out]` order. Each draw
//! `u = (next >> 40) * 2^-24` maps to `(2u - 1) / sqrt(fan_in)` evaluated in
//! f64 and rounded to f32, where `fan_in = in_channels * k * k`.

use num_traits::Float;

use crate::error::{Error, Result};
use crate::media::FrameImage;

use super::{Encoder, EncoderKind, LatentShape, LatentTensor, LossGradient};

pub const HIDDEN_CHANNELS: usize = 16;

/// The hidden-layer nonlinearity. The f32 path evaluates tanh through a
/// single f64 `exp`, which is accurate to f32 rounding and about twice as
/// fast as `tanhf`.
pub(crate) trait Activation: Float {
    fn activate(self) -> Self;
}

impl Activation for f32 {
    fn activate(self) -> f32 {
        let x = self as f64;
        if x.abs() > 20.0 {
            return self.signum();
        }
        let e = (2.0 * x).exp();
        ((e - 1.0) / (e + 1.0)) as f32
    }
}

impl Activation for f64 {
    fn activate(self) -> f64 {
        self.tanh()
    }
}

/// SplitMix64, the generator behind the weight contract.
#[derive(Debug, Clone)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        Self { state: seed }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Uniform on `[0, 1)` with 24 bits of resolution.
    pub fn next_unit(&mut self) -> f64 {
        (self.next_u64() >> 40) as f64 / (1u64 << 24) as f64
    }
}

#[derive(Debug, Clone)]
pub struct ConvLayer {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    /// `[out][in][ky][kx]`
    pub weights: Vec<f32>,
    pub bias: Vec<f32>,
}

impl ConvLayer {
    fn seeded(
        rng: &mut SplitMix64,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Self {
        let fan_in = in_channels * kernel * kernel;
        let scale = 1.0 / (fan_in as f64).sqrt();
        let mut draw = || ((2.0 * rng.next_unit() - 1.0) * scale) as f32;
        let weights = (0..out_channels * fan_in).map(|_| draw()).collect();
        let bias = (0..out_channels).map(|_| draw()).collect();
        Self {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            weights,
            bias,
        }
    }

    fn out_size(&self, n: usize) -> usize {
        (n + 2 * self.padding - self.kernel) / self.stride + 1
    }

    fn weight(&self, o: usize, i: usize, ky: usize, kx: usize) -> f32 {
        self.weights[((o * self.in_channels + i) * self.kernel + ky) * self.kernel + kx]
    }

    /// Channel-major convolution; returns the output and its spatial size.
    pub fn forward<T: Float>(&self, input: &[T], h: usize, w: usize) -> (Vec<T>, usize, usize) {
        let (oh, ow) = (self.out_size(h), self.out_size(w));
        let mut out = vec![T::zero(); self.out_channels * oh * ow];
        for o in 0..self.out_channels {
            let plane = &mut out[o * oh * ow..(o + 1) * oh * ow];
            let b = T::from(self.bias[o]).unwrap();
            plane.iter_mut().for_each(|v| *v = b);
            for i in 0..self.in_channels {
                let src = &input[i * h * w..(i + 1) * h * w];
                for ky in 0..self.kernel {
                    for kx in 0..self.kernel {
                        let wt = T::from(self.weight(o, i, ky, kx)).unwrap();
                        for oy in 0..oh {
                            let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let row = &src[iy as usize * w..(iy as usize + 1) * w];
                            let dst = &mut plane[oy * ow..(oy + 1) * ow];
                            for (ox, d) in dst.iter_mut().enumerate() {
                                let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                                if ix >= 0 && ix < w as isize {
                                    *d = *d + wt * row[ix as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
        (out, oh, ow)
    }

    /// Output positions `[lo, hi)` along one axis whose input tap at kernel
    /// offset `k` falls inside `[0, n_in)`, and the input index of `lo`.
    fn valid_span(&self, n_in: usize, n_out: usize, k: usize) -> (usize, usize, usize) {
        let (s, p) = (self.stride, self.padding);
        let lo = p.saturating_sub(k).div_ceil(s);
        let hi = if n_in + p > k {
            ((n_in + p - k - 1) / s + 1).min(n_out)
        } else {
            0
        };
        let hi = hi.max(lo);
        (lo, hi, (lo * s + k).saturating_sub(p))
    }

    /// Unfolds a channel-major input into `[in * k * k][oh * ow]` patch columns.
    fn im2col(&self, input: &[f32], h: usize, w: usize) -> (Vec<f32>, usize, usize) {
        let (oh, ow) = (self.out_size(h), self.out_size(w));
        let k = self.kernel;
        let mut cols = vec![0.0f32; self.in_channels * k * k * oh * ow];
        for i in 0..self.in_channels {
            let src = &input[i * h * w..(i + 1) * h * w];
            for ky in 0..k {
                let (y_lo, y_hi, iy0) = self.valid_span(h, oh, ky);
                for kx in 0..k {
                    let (x_lo, x_hi, ix0) = self.valid_span(w, ow, kx);
                    let r = (i * k + ky) * k + kx;
                    let dst = &mut cols[r * oh * ow..(r + 1) * oh * ow];
                    for (n, oy) in (y_lo..y_hi).enumerate() {
                        let row = &src[(iy0 + n * self.stride) * w + ix0..];
                        let out = &mut dst[oy * ow + x_lo..oy * ow + x_hi];
                        for (d, v) in out.iter_mut().zip(row.iter().step_by(self.stride)) {
                            *d = *v;
                        }
                    }
                }
            }
        }
        (cols, oh, ow)
    }

    /// f32 forward pass as a matrix product over patch columns. Agrees with
    /// [`ConvLayer::forward`] up to summation order.
    pub fn forward_f32(&self, input: &[f32], h: usize, w: usize) -> (Vec<f32>, usize, usize) {
        let (cols, oh, ow) = self.im2col(input, h, w);
        let (rows, n) = (self.in_channels * self.kernel * self.kernel, oh * ow);
        let mut out: Vec<f32> = self.bias.iter().flat_map(|b| std::iter::repeat_n(*b, n)).collect();
        // SAFETY: every buffer holds exactly the extent described by its dims and strides.
        unsafe {
            matrixmultiply::sgemm(
                self.out_channels,
                rows,
                n,
                1.0,
                self.weights.as_ptr(),
                rows as isize,
                1,
                cols.as_ptr(),
                n as isize,
                1,
                1.0,
                out.as_mut_ptr(),
                n as isize,
                1,
            );
        }
        (out, oh, ow)
    }

    /// f32 counterpart of [`ConvLayer::backward_input`].
    pub fn backward_input_f32(&self, d_out: &[f32], h: usize, w: usize) -> Vec<f32> {
        let (oh, ow) = (self.out_size(h), self.out_size(w));
        let k = self.kernel;
        let (rows, n) = (self.in_channels * k * k, oh * ow);
        let mut d_cols = vec![0.0f32; rows * n];
        // SAFETY: as in `forward_f32`; the weights are read transposed.
        unsafe {
            matrixmultiply::sgemm(
                rows,
                self.out_channels,
                n,
                1.0,
                self.weights.as_ptr(),
                1,
                rows as isize,
                d_out.as_ptr(),
                n as isize,
                1,
                0.0,
                d_cols.as_mut_ptr(),
                n as isize,
                1,
            );
        }
        let mut d_in = vec![0.0f32; self.in_channels * h * w];
        for i in 0..self.in_channels {
            let dst = &mut d_in[i * h * w..(i + 1) * h * w];
            for ky in 0..k {
                let (y_lo, y_hi, iy0) = self.valid_span(h, oh, ky);
                for kx in 0..k {
                    let (x_lo, x_hi, ix0) = self.valid_span(w, ow, kx);
                    let r = (i * k + ky) * k + kx;
                    let src = &d_cols[r * n..(r + 1) * n];
                    for (m, oy) in (y_lo..y_hi).enumerate() {
                        let row = &mut dst[(iy0 + m * self.stride) * w + ix0..];
                        let grads = &src[oy * ow + x_lo..oy * ow + x_hi];
                        for (d, g) in row.iter_mut().step_by(self.stride).zip(grads) {
                            *d += *g;
                        }
                    }
                }
            }
        }
        d_in
    }

    /// Gradient with respect to the layer input given the gradient at its output.
    pub fn backward_input<T: Float>(&self, d_out: &[T], h: usize, w: usize) -> Vec<T> {
        let (oh, ow) = (self.out_size(h), self.out_size(w));
        let mut d_in = vec![T::zero(); self.in_channels * h * w];
        for o in 0..self.out_channels {
            let plane = &d_out[o * oh * ow..(o + 1) * oh * ow];
            for i in 0..self.in_channels {
                let dst = &mut d_in[i * h * w..(i + 1) * h * w];
                for ky in 0..self.kernel {
                    for kx in 0..self.kernel {
                        let wt = T::from(self.weight(o, i, ky, kx)).unwrap();
                        for oy in 0..oh {
                            let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let row = &mut dst[iy as usize * w..(iy as usize + 1) * w];
                            for (ox, g) in plane[oy * ow..(oy + 1) * ow].iter().enumerate() {
                                let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                                if ix >= 0 && ix < w as isize {
                                    row[ix as usize] = row[ix as usize] + wt * *g;
                                }
                            }
                        }
                    }
                }
            }
        }
        d_in
    }
}

#[derive(Debug, Clone)]
pub struct ReferenceEncoder {
    seed: u64,
    downsample_factor: usize,
    latent_channels: usize,
    strided: Vec<ConvLayer>,
    projection: ConvLayer,
}

impl ReferenceEncoder {
    pub fn new(seed: u64, downsample_factor: usize, latent_channels: usize) -> Result<Self> {
        if downsample_factor == 0 || !downsample_factor.is_power_of_two() {
            return Err(Error::config(format!(
                "downsample_factor must be a power of two >= 1, got {downsample_factor}"
            )));
        }
        if latent_channels == 0 {
            return Err(Error::config("latent_channels must be >= 1"));
        }
        let depth = downsample_factor.trailing_zeros() as usize;
        let mut rng = SplitMix64::new(seed);
        let mut strided = Vec::with_capacity(depth);
        let mut channels = 3;
        for _ in 0..depth {
            strided.push(ConvLayer::seeded(&mut rng, channels, HIDDEN_CHANNELS, 3, 2, 1));
            channels = HIDDEN_CHANNELS;
        }
        let projection = ConvLayer::seeded(&mut rng, channels, latent_channels, 1, 1, 0);
        Ok(Self {
            seed,
            downsample_factor,
            latent_channels,
            strided,
            projection,
        })
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn layers(&self) -> impl Iterator<Item = &ConvLayer> {
        self.strided.iter().chain(std::iter::once(&self.projection))
    }

    fn check_dims(&self, width: usize, height: usize) -> Result<()> {
        if !width.is_multiple_of(self.downsample_factor) || !height.is_multiple_of(self.downsample_factor) {
            return Err(Error::config(format!(
                "frame {width}x{height} is not divisible by downsample_factor {}",
                self.downsample_factor
            )));
        }
        Ok(())
    }

    /// Forward pass over a channel-major input. Keeps every post-tanh activation
    /// (and the input as entry 0) when `keep` is set.
    fn run<T: Activation>(
        &self,
        chw: Vec<T>,
        h: usize,
        w: usize,
        keep: bool,
        conv: impl Fn(&ConvLayer, &[T], usize, usize) -> (Vec<T>, usize, usize),
    ) -> (Vec<T>, Vec<Vec<T>>) {
        let mut kept = Vec::new();
        let (mut act, mut ah, mut aw) = (chw, h, w);
        for layer in &self.strided {
            let (mut pre, oh, ow) = conv(layer, &act, ah, aw);
            pre.iter_mut().for_each(|v| *v = v.activate());
            if keep {
                kept.push(std::mem::replace(&mut act, pre));
            } else {
                act = pre;
            }
            ah = oh;
            aw = ow;
        }
        let (z, _, _) = conv(&self.projection, &act, ah, aw);
        if keep {
            kept.push(act);
        }
        (z, kept)
    }

    fn generic_loss<T: Activation>(
        &self,
        input_hwc: &[T],
        width: usize,
        height: usize,
        target: &LatentTensor,
    ) -> Result<T> {
        self.check_dims(width, height)?;
        let shape = self.latent_shape(width, height)?;
        target.expect_shape(shape)?;
        let (z, _) = self.run(
            hwc_to_chw(input_hwc, width, height),
            height,
            width,
            false,
            ConvLayer::forward,
        );
        Ok(z.iter().zip(target.values()).fold(T::zero(), |acc, (&a, &b)| {
            let r = a - T::from(b).unwrap();
            acc + r * r
        }))
    }
}

pub(crate) fn hwc_to_chw<T: Copy>(hwc: &[T], width: usize, height: usize) -> Vec<T> {
    let plane = width * height;
    let mut out = Vec::with_capacity(hwc.len());
    for c in 0..3 {
        out.extend((0..plane).map(|p| hwc[p * 3 + c]));
    }
    out
}

pub(crate) fn chw_to_hwc<T: Copy + Default>(chw: &[T], width: usize, height: usize) -> Vec<T> {
    let plane = width * height;
    let mut out = vec![T::default(); chw.len()];
    for c in 0..3 {
        for p in 0..plane {
            out[p * 3 + c] = chw[c * plane + p];
        }
    }
    out
}

impl Encoder for ReferenceEncoder {
    fn kind(&self) -> EncoderKind {
        EncoderKind::Reference
    }

    fn latent_shape(&self, width: usize, height: usize) -> Result<LatentShape> {
        self.check_dims(width, height)?;
        Ok(LatentShape {
            channels: self.latent_channels,
            height: height / self.downsample_factor,
            width: width / self.downsample_factor,
        })
    }

    fn encode(&self, frame: &FrameImage) -> Result<LatentTensor> {
        let shape = self.latent_shape(frame.width(), frame.height())?;
        let chw = hwc_to_chw(frame.pixels(), frame.width(), frame.height());
        let (z, _) = self.run(chw, frame.height(), frame.width(), false, ConvLayer::forward_f32);
        LatentTensor::new(shape, z)
    }

    fn loss_gradient(&self, frame: &FrameImage, delta: &[f32], target: &LatentTensor) -> Result<LossGradient> {
        let (w, h) = (frame.width(), frame.height());
        let shape = self.latent_shape(w, h)?;
        target.expect_shape(shape)?;
        if delta.len() != frame.len() {
            return Err(Error::config(format!(
                "perturbation has {} entries, frame has {}",
                delta.len(),
                frame.len()
            )));
        }
        let input: Vec<f32> = frame.pixels().iter().zip(delta).map(|(x, d)| x + d).collect();
        let (z, acts) = self.run(hwc_to_chw(&input, w, h), h, w, true, ConvLayer::forward_f32);

        let mut loss = 0.0f32;
        let d_z: Vec<f32> = z
            .iter()
            .zip(target.values())
            .map(|(a, b)| {
                let r = a - b;
                loss += r * r;
                2.0 * r
            })
            .collect();

        // acts[k] is the input to layer k; the last one feeds the projection.
        let mut dims = Vec::with_capacity(acts.len());
        let (mut ah, mut aw) = (h, w);
        dims.push((ah, aw));
        for layer in &self.strided {
            ah = layer.out_size(ah);
            aw = layer.out_size(aw);
            dims.push((ah, aw));
        }

        let (ph, pw) = dims[self.strided.len()];
        let mut grad = self.projection.backward_input_f32(&d_z, ph, pw);
        for (k, layer) in self.strided.iter().enumerate().rev() {
            let out = &acts[k + 1];
            grad.iter_mut().zip(out).for_each(|(g, y)| *g *= 1.0 - y * y);
            let (ih, iw) = dims[k];
            grad = layer.backward_input_f32(&grad, ih, iw);
        }
        Ok(LossGradient {
            loss,
            grad: chw_to_hwc(&grad, w, h),
        })
    }

    fn loss_f64(&self, input: &[f64], width: usize, height: usize, target: &LatentTensor) -> Result<f64> {
        self.generic_loss(input, width, height, target)
    }
}
