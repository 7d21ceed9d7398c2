#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use uvcg::{Fps, FrameImage, VideoClip};

/// Same generator as `tests/oracles/oracles.py`.
pub fn lcg_frame(seed: u64, width: usize, height: usize) -> FrameImage {
    let mut state = seed;
    FrameImage::from_fn(width, height, |_, _, _| {
        state = state
            .wrapping_mul(6364136223846793005)
            .wrapping_add(1442695040888963407);
        ((state >> 40) as f64 / (1u64 << 24) as f64) as f32
    })
}

pub fn clip(name: &str, frames: Vec<FrameImage>) -> VideoClip {
    VideoClip::new(name, frames, Fps::default()).unwrap()
}

pub fn noise_clip(name: &str, seed: u64, frames: usize, width: usize, height: usize) -> VideoClip {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    clip(
        name,
        (0..frames)
            .map(|_| FrameImage::from_fn(width, height, |_, _, _| rng.gen()))
            .collect(),
    )
}

/// A smooth diagonal gradient pattern shifted by `speed` pixels per frame.
pub fn translating_clip(name: &str, seed: u64, frames: usize, size: usize, speed: f32) -> VideoClip {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let phase: [f32; 3] = [
        rng.gen_range(0.0..6.3),
        rng.gen_range(0.0..6.3),
        rng.gen_range(0.0..6.3),
    ];
    let freq: f32 = rng.gen_range(0.15..0.35);
    clip(
        name,
        (0..frames)
            .map(|t| {
                let shift = t as f32 * speed;
                FrameImage::from_fn(size, size, |y, x, c| {
                    let u = (x as f32 + shift) * freq + y as f32 * freq * 0.5;
                    0.5 + 0.35 * (u + phase[c]).sin()
                })
            })
            .collect(),
    )
}

/// A linear colour ramp at a random angle, shifted by `speed` pixels per frame.
pub fn translating_ramp(name: &str, seed: u64, frames: usize, size: usize, speed: f32) -> VideoClip {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let theta: f32 = rng.gen_range(0.0..std::f32::consts::TAU);
    let base: [f32; 3] = std::array::from_fn(|_| rng.gen_range(0.1..0.4));
    let slope: [f32; 3] = std::array::from_fn(|_| rng.gen_range(0.3..0.5));
    clip(
        name,
        (0..frames)
            .map(|t| {
                let shift = t as f32 * speed;
                FrameImage::from_fn(size, size, |y, x, c| {
                    let u = ((x as f32 - shift) * theta.cos() + y as f32 * theta.sin()) / size as f32;
                    (base[c] + slope[c] * (u + 1.0) / 2.0).clamp(0.0, 1.0)
                })
            })
            .collect(),
    )
}

pub fn echo_sidecar() -> String {
    env!("CARGO_BIN_EXE_uvcg-echo-sidecar").to_string()
}

pub fn uvcg_bin() -> &'static str {
    env!("CARGO_BIN_EXE_uvcg")
}
