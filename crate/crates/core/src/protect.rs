//! Per-frame sign-gradient PGD that pulls each frame's latent onto a target
//! video's latent sequence, with warm-started perturbations between frames.
//!
//! Frame `i` is aligned to target latent `i mod m`. Its perturbation starts
//! from the previous frame's result (or uniform noise for the first frame)
//! and takes `steps` descent steps of size `alpha` on
//! `||E(x + delta) - z_target||^2`, projecting onto the `epsilon` ball and the
//! valid pixel range after every step.

use std::time::Instant;

use log::{debug, warn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::encoder::{encode_sequence, Encoder, LatentTensor};
use crate::error::{Error, Result};
use crate::media::{FrameImage, VideoClip};

/// Which PGD iterate a frame keeps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IterateSelection {
    /// Lowest recorded loss; absorbs the oscillation of fixed-size sign steps.
    #[default]
    Best,
    /// The iterate after the final step.
    Last,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtectionConfig {
    pub epsilon: f32,
    pub alpha: f32,
    pub steps: usize,
    pub warm_start: bool,
    pub seed: u64,
    pub pixel_min: f32,
    pub pixel_max: f32,
    #[serde(default)]
    pub iterate: IterateSelection,
}

impl Default for ProtectionConfig {
    fn default() -> Self {
        Self {
            epsilon: 15.0 / 255.0,
            alpha: 2.0 / 255.0,
            steps: 200,
            warm_start: true,
            seed: 0,
            pixel_min: 0.0,
            pixel_max: 1.0,
            iterate: IterateSelection::Best,
        }
    }
}

impl ProtectionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha <= self.epsilon && self.epsilon <= 1.0) {
            return Err(Error::config(format!(
                "need 0 < alpha <= epsilon <= 1, got alpha={} epsilon={}",
                self.alpha, self.epsilon
            )));
        }
        if self.steps == 0 {
            return Err(Error::config("steps must be >= 1"));
        }
        if !(0.0 <= self.pixel_min && self.pixel_min < self.pixel_max && self.pixel_max <= 1.0) {
            return Err(Error::config(format!(
                "pixel range [{}, {}] must be a non-empty subset of [0, 1]",
                self.pixel_min, self.pixel_max
            )));
        }
        Ok(())
    }
}

/// Per-frame perturbations, all within `[-epsilon, epsilon]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PerturbationField {
    pub deltas: Vec<Vec<f32>>,
    pub epsilon: f32,
    pub width: usize,
    pub height: usize,
}

impl PerturbationField {
    pub fn max_abs(&self) -> f32 {
        self.deltas.iter().flatten().fold(0.0f32, |m, d| m.max(d.abs()))
    }

    pub fn len(&self) -> usize {
        self.deltas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.deltas.is_empty()
    }
}

/// Optimization record of a PGD run; absent for the noise baseline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub target_indices: Vec<usize>,
    pub initial: Vec<f32>,
    #[serde(rename = "final")]
    pub final_: Vec<f32>,
    pub iterations: Vec<usize>,
    /// `traces[i][t]` is the loss at iterate `t`, so each trace has `steps + 1` entries.
    pub traces: Vec<Vec<f32>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameFailure {
    pub frame: usize,
    pub reason: String,
}

#[derive(Debug, Clone)]
pub struct ProtectionResult {
    pub immunized: VideoClip,
    pub perturbations: PerturbationField,
    pub losses: Option<LossReport>,
    pub failures: Vec<FrameFailure>,
    pub wall_clock_seconds: f64,
}

pub fn target_for_frame(i: usize, m: usize) -> Result<usize> {
    if m == 0 {
        return Err(Error::config("target sequence is empty"));
    }
    Ok(i % m)
}

pub fn uniform_delta(len: usize, epsilon: f32, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let dist = Uniform::new_inclusive(-epsilon, epsilon);
    (0..len).map(|_| dist.sample(rng)).collect()
}

/// Initial perturbation for frame `i`: uniform noise for the first frame or
/// when warm start is off, otherwise a copy of the previous frame's result.
pub fn init_delta(
    i: usize,
    previous_final: Option<&[f32]>,
    len: usize,
    config: &ProtectionConfig,
    rng: &mut ChaCha8Rng,
) -> Vec<f32> {
    match previous_final {
        Some(prev) if i > 0 && config.warm_start => prev.to_vec(),
        _ => uniform_delta(len, config.epsilon, rng),
    }
}

fn sign(g: f32) -> f32 {
    if g > 0.0 {
        1.0
    } else if g < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Clamps `delta` onto the epsilon ball, then so that `frame + delta` stays in the pixel range.
pub fn project(delta: &mut [f32], frame: &FrameImage, config: &ProtectionConfig) {
    let eps = config.epsilon;
    for (d, &x) in delta.iter_mut().zip(frame.pixels()) {
        let mut v = d.clamp(-eps, eps);
        if x + v < config.pixel_min {
            v = config.pixel_min - x;
        } else if x + v > config.pixel_max {
            v = config.pixel_max - x;
        }
        *d = v.clamp(-eps, eps);
    }
}

/// One descent step `delta - alpha * sign(grad)` followed by [`project`].
pub fn pgd_step(delta: &[f32], grad: &[f32], config: &ProtectionConfig, frame: &FrameImage) -> Vec<f32> {
    let mut next: Vec<f32> = delta
        .iter()
        .zip(grad)
        .map(|(d, g)| d - config.alpha * sign(*g))
        .collect();
    project(&mut next, frame, config);
    next
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameProtection {
    pub delta: Vec<f32>,
    pub loss_trace: Vec<f32>,
    pub selected_loss: f32,
}

pub fn protect_frame(
    frame: &FrameImage,
    target: &LatentTensor,
    init: &[f32],
    encoder: &dyn Encoder,
    config: &ProtectionConfig,
) -> Result<FrameProtection> {
    if init.len() != frame.len() {
        return Err(Error::config("initial perturbation does not match the frame"));
    }
    let mut delta = init.to_vec();
    project(&mut delta, frame, config);

    let mut trace = Vec::with_capacity(config.steps + 1);
    let mut best: Option<(f32, Vec<f32>)> = None;
    let mut observe = |loss: f32, delta: &[f32], trace: &mut Vec<f32>| -> Result<()> {
        if !loss.is_finite() {
            return Err(Error::Numerical(format!(
                "loss became {loss} at iterate {}",
                trace.len()
            )));
        }
        trace.push(loss);
        if best.as_ref().is_none_or(|(b, _)| loss < *b) {
            best = Some((loss, delta.to_vec()));
        }
        Ok(())
    };

    for _ in 0..config.steps {
        let lg = encoder.loss_gradient(frame, &delta, target)?;
        observe(lg.loss, &delta, &mut trace)?;
        delta = pgd_step(&delta, &lg.grad, config, frame);
    }
    let last = encoder.loss_gradient(frame, &delta, target)?.loss;
    observe(last, &delta, &mut trace)?;

    let (best_loss, best_delta) = best.expect("at least one iterate observed");
    Ok(match config.iterate {
        IterateSelection::Best => FrameProtection {
            delta: best_delta,
            loss_trace: trace,
            selected_loss: best_loss,
        },
        IterateSelection::Last => FrameProtection {
            delta,
            loss_trace: trace,
            selected_loss: last,
        },
    })
}

fn apply(frame: &FrameImage, delta: &[f32], config: &ProtectionConfig) -> FrameImage {
    let pixels = frame
        .pixels()
        .iter()
        .zip(delta)
        .map(|(x, d)| (x + d).clamp(config.pixel_min, config.pixel_max))
        .collect();
    FrameImage::new(frame.width(), frame.height(), pixels).expect("clamped into [0, 1]")
}

/// Immunizes `clip` against `encoder` by aligning it to the latents of `target`.
pub fn protect_video(
    clip: &VideoClip,
    target: &VideoClip,
    encoder: &dyn Encoder,
    config: &ProtectionConfig,
) -> Result<ProtectionResult> {
    config.validate()?;
    if !clip.same_resolution(target) {
        return Err(Error::config(format!(
            "target is {}x{} but the protected clip is {}x{}",
            target.width(),
            target.height(),
            clip.width(),
            clip.height()
        )));
    }
    let started = Instant::now();
    let targets = encode_sequence(encoder, target)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    let n = clip.len();
    let mut report = LossReport {
        target_indices: Vec::with_capacity(n),
        initial: Vec::with_capacity(n),
        final_: Vec::with_capacity(n),
        iterations: Vec::with_capacity(n),
        traces: Vec::with_capacity(n),
    };
    let mut deltas: Vec<Vec<f32>> = Vec::with_capacity(n);
    let mut frames = Vec::with_capacity(n);
    let mut failures = Vec::new();

    for (i, frame) in clip.frames().iter().enumerate() {
        let t = target_for_frame(i, targets.len())?;
        let init = init_delta(i, deltas.last().map(Vec::as_slice), frame.len(), config, &mut rng);
        let delta = match protect_frame(frame, targets.get(t), &init, encoder, config) {
            Ok(fp) => {
                debug!(
                    "frame {i} -> target {t}: loss {} -> {}",
                    fp.loss_trace[0], fp.selected_loss
                );
                report.initial.push(fp.loss_trace[0]);
                report.final_.push(fp.selected_loss);
                report.iterations.push(config.steps);
                report.traces.push(fp.loss_trace);
                fp.delta
            }
            Err(Error::Numerical(reason)) => {
                warn!("frame {i} aborted: {reason}");
                failures.push(FrameFailure { frame: i, reason });
                report.initial.push(f32::NAN);
                report.final_.push(f32::NAN);
                report.iterations.push(0);
                report.traces.push(Vec::new());
                vec![0.0; frame.len()]
            }
            Err(other) => return Err(other),
        };
        report.target_indices.push(t);
        frames.push(apply(frame, &delta, config));
        deltas.push(delta);
    }

    let immunized = VideoClip::new(format!("{}-immunized", clip.name()), frames, clip.fps())?;
    Ok(ProtectionResult {
        immunized,
        perturbations: PerturbationField {
            deltas,
            epsilon: config.epsilon,
            width: clip.width(),
            height: clip.height(),
        },
        losses: Some(report),
        failures,
        wall_clock_seconds: started.elapsed().as_secs_f64(),
    })
}

/// Independent `U(-epsilon, epsilon)` noise per frame at the same budget.
pub fn random_noise_baseline(clip: &VideoClip, config: &ProtectionConfig) -> Result<ProtectionResult> {
    config.validate()?;
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut deltas = Vec::with_capacity(clip.len());
    let mut frames = Vec::with_capacity(clip.len());
    for frame in clip.frames() {
        let mut delta = uniform_delta(frame.len(), config.epsilon, &mut rng);
        project(&mut delta, frame, config);
        frames.push(apply(frame, &delta, config));
        deltas.push(delta);
    }
    Ok(ProtectionResult {
        immunized: VideoClip::new(format!("{}-noised", clip.name()), frames, clip.fps())?,
        perturbations: PerturbationField {
            deltas,
            epsilon: config.epsilon,
            width: clip.width(),
            height: clip.height(),
        },
        losses: None,
        failures: Vec::new(),
        wall_clock_seconds: started.elapsed().as_secs_f64(),
    })
}
