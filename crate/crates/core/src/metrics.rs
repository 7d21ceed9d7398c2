//! Full-reference image similarity: PSNR and SSIM over clips.
//!
//! PSNR uses peak 1.0 and is capped at [`PSNR_CAP_DB`]. SSIM uses an 11x11
//! Gaussian window (sigma 1.5), K1 = 0.01, K2 = 0.03, dynamic range 1.0,
//! population statistics, and averages the SSIM map over the region where
//! the window fits entirely inside the frame. Each RGB channel is scored
//! separately and the three scores are averaged.

use crate::error::{Error, Result};
use crate::media::{FrameImage, VideoClip};

pub const PSNR_CAP_DB: f64 = 100.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

/// Arithmetic mean in list order; the single definition every aggregate uses.
pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

fn check_pair(a: &VideoClip, b: &VideoClip) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::config(format!("clips have {} and {} frames", a.len(), b.len())));
    }
    if !a.same_resolution(b) {
        return Err(Error::config(format!(
            "clips are {}x{} and {}x{}",
            a.width(),
            a.height(),
            b.width(),
            b.height()
        )));
    }
    Ok(())
}

pub fn frame_mse(a: &FrameImage, b: &FrameImage) -> f64 {
    let sum: f64 = a
        .pixels()
        .iter()
        .zip(b.pixels())
        .map(|(x, y)| {
            let d = *x as f64 - *y as f64;
            d * d
        })
        .sum();
    sum / a.len() as f64
}

pub fn frame_psnr(a: &FrameImage, b: &FrameImage) -> f64 {
    let mse = frame_mse(a, b);
    if mse == 0.0 {
        PSNR_CAP_DB
    } else {
        (10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB)
    }
}

/// Mean PSNR in dB and the per-frame values.
pub fn psnr(a: &VideoClip, b: &VideoClip) -> Result<(f64, Vec<f64>)> {
    check_pair(a, b)?;
    let per_frame: Vec<f64> = a
        .frames()
        .iter()
        .zip(b.frames())
        .map(|(x, y)| frame_psnr(x, y))
        .collect();
    Ok((mean(&per_frame), per_frame))
}

/// Normalized 1-D Gaussian taps of the SSIM window.
pub fn gaussian_taps() -> [f64; SSIM_WINDOW] {
    let mut taps = [0.0; SSIM_WINDOW];
    let center = (SSIM_WINDOW / 2) as f64;
    for (i, t) in taps.iter_mut().enumerate() {
        let d = i as f64 - center;
        *t = (-(d * d) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let sum: f64 = taps.iter().sum();
    taps.iter_mut().for_each(|t| *t /= sum);
    taps
}

/// Separable valid-mode filtering of a `h x w` plane.
fn filter_valid(plane: &[f64], w: usize, h: usize, taps: &[f64]) -> (Vec<f64>, usize, usize) {
    let k = taps.len();
    let (ow, oh) = (w + 1 - k, h + 1 - k);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..k).map(|i| taps[i] * plane[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..k).map(|i| taps[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    (out, ow, oh)
}

fn channel_plane(frame: &FrameImage, c: usize) -> Vec<f64> {
    frame.pixels().iter().skip(c).step_by(3).map(|v| *v as f64).collect()
}

pub fn frame_ssim(a: &FrameImage, b: &FrameImage) -> Result<f64> {
    let (w, h) = (a.width(), a.height());
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(Error::config(format!(
            "SSIM needs frames of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {w}x{h}"
        )));
    }
    if !a.same_size(b) {
        return Err(Error::config("SSIM frames differ in size"));
    }
    let taps = gaussian_taps();
    let c1 = (SSIM_K1 * 1.0).powi(2);
    let c2 = (SSIM_K2 * 1.0).powi(2);
    let mut total = 0.0;
    for c in 0..3 {
        let x = channel_plane(a, c);
        let y = channel_plane(b, c);
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(&y).map(|(p, q)| p * q).collect();
        let (mx, _, _) = filter_valid(&x, w, h, &taps);
        let (my, _, _) = filter_valid(&y, w, h, &taps);
        let (sxx, _, _) = filter_valid(&xx, w, h, &taps);
        let (syy, _, _) = filter_valid(&yy, w, h, &taps);
        let (sxy, _, _) = filter_valid(&xy, w, h, &taps);
        let n = mx.len();
        let mut acc = 0.0;
        for i in 0..n {
            let (ux, uy) = (mx[i], my[i]);
            let vx = sxx[i] - ux * ux;
            let vy = syy[i] - uy * uy;
            let cov = sxy[i] - ux * uy;
            acc += ((2.0 * ux * uy + c1) * (2.0 * cov + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2));
        }
        total += acc / n as f64;
    }
    Ok(total / 3.0)
}

/// Mean SSIM and the per-frame values.
pub fn ssim(a: &VideoClip, b: &VideoClip) -> Result<(f64, Vec<f64>)> {
    check_pair(a, b)?;
    let per_frame = a
        .frames()
        .iter()
        .zip(b.frames())
        .map(|(x, y)| frame_ssim(x, y))
        .collect::<Result<Vec<_>>>()?;
    Ok((mean(&per_frame), per_frame))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::media::Fps;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn clip(frames: Vec<FrameImage>) -> VideoClip {
        VideoClip::new("c", frames, Fps::default()).unwrap()
    }

    fn noise(seed: u64, size: usize) -> FrameImage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        FrameImage::from_fn(size, size, |_, _, _| rng.gen())
    }

    #[test]
    fn identical_clips_hit_the_cap() {
        let a = clip(vec![noise(1, 16), noise(2, 16)]);
        let (m, per) = psnr(&a, &a).unwrap();
        assert_eq!(m, 100.0);
        assert_eq!(per, vec![100.0, 100.0]);
        assert_eq!(ssim(&a, &a).unwrap().0, 1.0);
    }

    #[test]
    fn constant_offset_psnr() {
        let a = clip(vec![FrameImage::filled(12, 12, 0.4)]);
        let b = clip(vec![FrameImage::filled(12, 12, 0.5)]);
        assert!((psnr(&a, &b).unwrap().0 - 20.0).abs() < 1e-5);
    }

    #[test]
    fn uniform_frames_closed_form() {
        let a = clip(vec![FrameImage::filled(11, 11, 0.5)]);
        let b = clip(vec![FrameImage::filled(11, 11, 0.6)]);
        let expect = (2.0 * 0.5 * 0.6f64 + 1e-4) / (0.25 + 0.36 + 1e-4);
        // f32 storage of 0.6 shifts the value by ~1e-8.
        assert!((ssim(&a, &b).unwrap().0 - expect).abs() < 1e-6);
        assert!((expect - 0.98361).abs() < 1e-5);
    }

    #[test]
    fn ssim_rejects_small_frames() {
        let a = clip(vec![FrameImage::filled(10, 16, 0.5)]);
        assert!(matches!(ssim(&a, &a), Err(Error::Config(_))));
    }

    #[test]
    fn mismatched_clips_are_rejected() {
        let a = clip(vec![noise(1, 16)]);
        let b = clip(vec![noise(1, 16), noise(2, 16)]);
        assert!(psnr(&a, &b).is_err());
        let c = clip(vec![noise(1, 12)]);
        assert!(ssim(&a, &c).is_err());
    }

    #[test]
    fn taps_are_normalized_and_symmetric() {
        let t = gaussian_taps();
        assert!((t.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        for i in 0..SSIM_WINDOW {
            assert_eq!(t[i], t[SSIM_WINDOW - 1 - i]);
        }
    }

    #[test]
    fn symmetry_and_bounds() {
        for seed in 0..5 {
            let a = clip(vec![noise(seed, 16)]);
            let b = clip(vec![noise(seed + 100, 16)]);
            let (p1, p2) = (psnr(&a, &b).unwrap().0, psnr(&b, &a).unwrap().0);
            assert_eq!(p1, p2);
            assert!(p1 > 0.0 && p1 <= 100.0);
            let (s1, s2) = (ssim(&a, &b).unwrap().0, ssim(&b, &a).unwrap().0);
            assert!((s1 - s2).abs() < 1e-9);
            assert!((-1.0..=1.0).contains(&s1));
        }
    }

    #[test]
    fn psnr_decreases_with_noise_level() {
        let base = noise(3, 32);
        let mut prev = f64::INFINITY;
        for sigma in [0.01f32, 0.02, 0.05, 0.1, 0.2] {
            let mut avg = 0.0;
            for seed in 0..10u64 {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let noisy = FrameImage::from_fn(32, 32, |y, x, c| {
                    base.get(y, x, c) + sigma * rng.gen_range(-1.0f32..1.0)
                });
                avg += frame_psnr(&base, &noisy) / 10.0;
            }
            assert!(avg < prev, "sigma {sigma}: {avg} >= {prev}");
            prev = avg;
        }
    }
}
