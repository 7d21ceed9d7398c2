//! Latent encoders.
//!
//! Every encoder maps an RGB frame to a channel-major latent and can return
//! the squared-distance loss `||E(x + delta) - target||^2` together with its
//! gradient with respect to the input pixels.

mod identity;
mod reference;
mod sidecar;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::media::{FrameImage, VideoClip};

pub use identity::IdentityEncoder;
pub use reference::{ConvLayer, ReferenceEncoder, SplitMix64, HIDDEN_CHANNELS};
pub use sidecar::{SidecarClient, SidecarEncoder};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LatentShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl LatentShape {
    pub fn len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl std::fmt::Display for LatentShape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "({}, {}, {})", self.channels, self.height, self.width)
    }
}

/// Channel-major `c x h x w` latent with finite values.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentTensor {
    shape: LatentShape,
    values: Vec<f32>,
}

impl LatentTensor {
    pub fn new(shape: LatentShape, values: Vec<f32>) -> Result<Self> {
        if values.len() != shape.len() {
            return Err(Error::config(format!(
                "latent {shape} needs {} values, got {}",
                shape.len(),
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("latent contains non-finite values".into()));
        }
        Ok(Self { shape, values })
    }

    pub fn shape(&self) -> LatentShape {
        self.shape
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub(crate) fn expect_shape(&self, shape: LatentShape) -> Result<()> {
        if self.shape != shape {
            return Err(Error::config(format!(
                "target latent has shape {}, encoder produces {shape}",
                self.shape
            )));
        }
        Ok(())
    }

    /// Squared Euclidean distance, accumulated in f64.
    pub fn squared_distance(&self, other: &LatentTensor) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| {
                let d = *a as f64 - *b as f64;
                d * d
            })
            .sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatentSequence {
    latents: Vec<LatentTensor>,
    source_name: String,
}

impl LatentSequence {
    pub fn new(source_name: impl Into<String>, latents: Vec<LatentTensor>) -> Result<Self> {
        let first = latents
            .first()
            .ok_or_else(|| Error::config("latent sequence must not be empty"))?;
        if latents.iter().any(|l| l.shape != first.shape) {
            return Err(Error::config("latent sequence mixes shapes"));
        }
        Ok(Self {
            latents,
            source_name: source_name.into(),
        })
    }

    pub fn latents(&self) -> &[LatentTensor] {
        &self.latents
    }

    pub fn get(&self, i: usize) -> &LatentTensor {
        &self.latents[i]
    }

    pub fn len(&self) -> usize {
        self.latents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.latents.is_empty()
    }

    pub fn shape(&self) -> LatentShape {
        self.latents[0].shape
    }

    pub fn source_name(&self) -> &str {
        &self.source_name
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossGradient {
    pub loss: f32,
    /// Same `height x width x 3` layout as the frame.
    pub grad: Vec<f32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncoderKind {
    Reference,
    Identity,
    Sidecar,
}

/// The latent encoder `E`.
///
/// In-process implementations are stateless and may be shared across
/// threads; the sidecar implementation serializes its requests internally.
pub trait Encoder: Send + Sync {
    fn kind(&self) -> EncoderKind;

    fn latent_shape(&self, width: usize, height: usize) -> Result<LatentShape>;

    fn encode(&self, frame: &FrameImage) -> Result<LatentTensor>;

    /// `||E(frame + delta) - target||^2` and its input gradient.
    fn loss_gradient(&self, frame: &FrameImage, delta: &[f32], target: &LatentTensor) -> Result<LossGradient>;

    /// The same loss at an arbitrary (possibly out-of-range) `h x w x 3` input,
    /// evaluated as precisely as the encoder allows. Used by the
    /// finite-difference oracle.
    fn loss_f64(&self, input: &[f64], width: usize, height: usize, target: &LatentTensor) -> Result<f64>;
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderSpec {
    pub kind: EncoderKind,
    pub seed: u64,
    pub downsample_factor: usize,
    pub latent_channels: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sidecar_command: Option<String>,
}

impl EncoderSpec {
    pub fn reference(seed: u64) -> Self {
        Self {
            kind: EncoderKind::Reference,
            seed,
            downsample_factor: 8,
            latent_channels: 4,
            sidecar_command: None,
        }
    }

    pub fn identity() -> Self {
        Self {
            kind: EncoderKind::Identity,
            seed: 0,
            downsample_factor: 1,
            latent_channels: 3,
            sidecar_command: None,
        }
    }

    pub fn sidecar(command: impl Into<String>) -> Self {
        Self {
            kind: EncoderKind::Sidecar,
            seed: 0,
            downsample_factor: 1,
            latent_channels: 0,
            sidecar_command: Some(command.into()),
        }
    }
}

pub fn build_encoder(spec: &EncoderSpec) -> Result<Box<dyn Encoder>> {
    match spec.kind {
        EncoderKind::Reference => Ok(Box::new(ReferenceEncoder::new(
            spec.seed,
            spec.downsample_factor,
            spec.latent_channels,
        )?)),
        EncoderKind::Identity => Ok(Box::new(IdentityEncoder)),
        EncoderKind::Sidecar => {
            let cmd = spec
                .sidecar_command
                .as_deref()
                .ok_or_else(|| Error::config("sidecar encoder needs a command"))?;
            Ok(Box::new(SidecarEncoder::launch(cmd)?))
        }
    }
}

pub fn encode_sequence(encoder: &dyn Encoder, clip: &VideoClip) -> Result<LatentSequence> {
    let latents = clip
        .frames()
        .iter()
        .map(|f| encoder.encode(f))
        .collect::<Result<Vec<_>>>()?;
    LatentSequence::new(clip.name(), latents)
}

/// Central-difference estimate of the input gradient of the alignment loss,
/// one coordinate at a time, in f64.
pub fn finite_difference_gradient(
    encoder: &dyn Encoder,
    frame: &FrameImage,
    delta: &[f32],
    target: &LatentTensor,
    step: f64,
) -> Result<Vec<f64>> {
    if !(step > 0.0 && step.is_finite()) {
        return Err(Error::config(format!("finite-difference step must be > 0, got {step}")));
    }
    if delta.len() != frame.len() {
        return Err(Error::config("perturbation and frame sizes differ"));
    }
    let (w, h) = (frame.width(), frame.height());
    let mut input: Vec<f64> = frame
        .pixels()
        .iter()
        .zip(delta)
        .map(|(x, d)| *x as f64 + *d as f64)
        .collect();
    let mut grad = Vec::with_capacity(input.len());
    for i in 0..input.len() {
        let orig = input[i];
        input[i] = orig + step;
        let plus = encoder.loss_f64(&input, w, h, target)?;
        input[i] = orig - step;
        let minus = encoder.loss_f64(&input, w, h, target)?;
        input[i] = orig;
        grad.push((plus - minus) / (2.0 * step));
    }
    Ok(grad)
}

/// `max_i |a_i - b_i| / max_i |b_i|`, the normwise relative error of `a` against reference `b`.
pub fn max_relative_error(a: &[f32], b: &[f64]) -> f64 {
    let scale = b.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let worst = a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((*x as f64 - y).abs()));
    if scale == 0.0 {
        worst
    } else {
        worst / scale
    }
}
