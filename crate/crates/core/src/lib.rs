//! Video immunization against latent-diffusion editing.
//!
//! Frames of a protected clip receive small l-infinity-bounded perturbations
//! that steer an encoder's latents onto the latent sequence of a separate
//! target clip, frame by frame, with each frame's perturbation warm-started
//! from the previous one. The crate also bundles a deterministic reference
//! encoder, a finite-difference gradient oracle, target-selection scores,
//! image-quality and consistency metrics, and a binary protocol for
//! out-of-process encoders.

pub mod advisor;
pub mod artifacts;
pub mod cli;
pub mod encoder;
pub mod error;
pub mod evaluation;
pub mod media;
pub mod metrics;
pub mod protect;
pub mod wire;

pub use encoder::{
    build_encoder, encode_sequence, finite_difference_gradient, Encoder, EncoderKind, EncoderSpec, LatentSequence,
    LatentShape, LatentTensor,
};
pub use error::{Error, Result};
pub use media::{load_clip, save_clip, Fps, FrameImage, Manifest, VideoClip};
pub use protect::{protect_video, random_noise_baseline, PerturbationField, ProtectionConfig, ProtectionResult};
