//! Target-video scoring: latent proximity to the protected clip and content
//! simplicity. Advisory only; the engine never consults these scores.

use serde::{Deserialize, Serialize};

use crate::encoder::{encode_sequence, Encoder};
use crate::error::{Error, Result};
use crate::media::{FrameImage, VideoClip};
use crate::protect::target_for_frame;

pub const DEFAULT_PROXIMITY_WEIGHT: f64 = 0.5;
pub const DEFAULT_SIMPLICITY_WEIGHT: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetScore {
    pub candidate_name: String,
    pub proximity: f64,
    pub simplicity: f64,
    pub combined: f64,
}

/// Cosine similarity in f64. Two zero vectors count as identical; a zero
/// vector against a non-zero one scores 0.
pub fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
    for (x, y) in a.iter().zip(b) {
        let (x, y) = (*x as f64, *y as f64);
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    match (na == 0.0, nb == 0.0) {
        (true, true) => 1.0,
        (true, false) | (false, true) => 0.0,
        _ => (dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0),
    }
}

/// Mean latent cosine similarity between protected frame `i` and candidate
/// frame `i mod m`.
pub fn proximity_score(protected: &VideoClip, candidate: &VideoClip, encoder: &dyn Encoder) -> Result<f64> {
    if !protected.same_resolution(candidate) {
        return Err(Error::config(format!(
            "candidate {:?} is {}x{}, protected clip is {}x{}",
            candidate.name(),
            candidate.width(),
            candidate.height(),
            protected.width(),
            protected.height()
        )));
    }
    let ours = encode_sequence(encoder, protected)?;
    let theirs = encode_sequence(encoder, candidate)?;
    let mut total = 0.0;
    for (i, z) in ours.latents().iter().enumerate() {
        let j = target_for_frame(i, theirs.len())?;
        total += cosine(z.values(), theirs.get(j).values());
    }
    Ok(total / ours.len() as f64)
}

/// Mean forward-difference gradient magnitude of one frame over all
/// channels, in `[0, sqrt(2)]`. Degenerate frames (one row or column) have
/// no full gradient and score 0.
pub fn mean_gradient_magnitude(frame: &FrameImage) -> f64 {
    let (w, h) = (frame.width(), frame.height());
    if w < 2 || h < 2 {
        return 0.0;
    }
    let mut sum = 0.0f64;
    for y in 0..h - 1 {
        for x in 0..w - 1 {
            for c in 0..3 {
                let v = frame.get(y, x, c) as f64;
                let gx = frame.get(y, x + 1, c) as f64 - v;
                let gy = frame.get(y + 1, x, c) as f64 - v;
                sum += (gx * gx + gy * gy).sqrt();
            }
        }
    }
    sum / ((w - 1) * (h - 1) * 3) as f64
}

/// `1 - mean_gradient / sqrt(2)`: 1 for flat clips, 0 for a pixel checkerboard.
pub fn simplicity_score(candidate: &VideoClip) -> f64 {
    let mean = candidate.frames().iter().map(mean_gradient_magnitude).sum::<f64>() / candidate.len() as f64;
    1.0 - mean / std::f64::consts::SQRT_2
}

/// Scores every candidate and sorts by `w1 * proximity + w2 * simplicity`,
/// descending, ties broken by name.
pub fn rank_targets(
    protected: &VideoClip,
    candidates: &[VideoClip],
    encoder: &dyn Encoder,
    w1: f64,
    w2: f64,
) -> Result<Vec<TargetScore>> {
    if candidates.is_empty() {
        return Err(Error::config("at least one candidate target is required"));
    }
    if !w1.is_finite() || !w2.is_finite() {
        return Err(Error::config("score weights must be finite"));
    }
    let mut scores = candidates
        .iter()
        .map(|c| {
            let proximity = proximity_score(protected, c, encoder)?;
            let simplicity = simplicity_score(c);
            Ok(TargetScore {
                candidate_name: c.name().to_string(),
                proximity,
                simplicity,
                combined: w1 * proximity + w2 * simplicity,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    scores.sort_by(|a, b| {
        b.combined
            .total_cmp(&a.combined)
            .then_with(|| a.candidate_name.cmp(&b.candidate_name))
    });
    Ok(scores)
}
