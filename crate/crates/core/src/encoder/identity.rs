use crate::error::{Error, Result};
use crate::media::FrameImage;

use super::reference::hwc_to_chw;
use super::{Encoder, EncoderKind, LatentShape, LatentTensor, LossGradient};

/// `E(x) = x`, with the frame laid out channel-major as `(3, h, w)`.
#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityEncoder;

impl Encoder for IdentityEncoder {
    fn kind(&self) -> EncoderKind {
        EncoderKind::Identity
    }

    fn latent_shape(&self, width: usize, height: usize) -> Result<LatentShape> {
        Ok(LatentShape {
            channels: 3,
            height,
            width,
        })
    }

    fn encode(&self, frame: &FrameImage) -> Result<LatentTensor> {
        let shape = self.latent_shape(frame.width(), frame.height())?;
        LatentTensor::new(shape, hwc_to_chw(frame.pixels(), frame.width(), frame.height()))
    }

    fn loss_gradient(&self, frame: &FrameImage, delta: &[f32], target: &LatentTensor) -> Result<LossGradient> {
        let (w, h) = (frame.width(), frame.height());
        target.expect_shape(self.latent_shape(w, h)?)?;
        if delta.len() != frame.len() {
            return Err(Error::config("perturbation and frame sizes differ"));
        }
        let plane = w * h;
        let mut loss = 0.0f32;
        let grad = frame
            .pixels()
            .iter()
            .zip(delta)
            .enumerate()
            .map(|(i, (x, d))| {
                let z = target.values()[(i % 3) * plane + i / 3];
                let r = x + d - z;
                loss += r * r;
                2.0 * r
            })
            .collect();
        Ok(LossGradient { loss, grad })
    }

    fn loss_f64(&self, input: &[f64], width: usize, height: usize, target: &LatentTensor) -> Result<f64> {
        target.expect_shape(self.latent_shape(width, height)?)?;
        let plane = width * height;
        Ok(input
            .iter()
            .enumerate()
            .map(|(i, x)| {
                let r = x - target.values()[(i % 3) * plane + i / 3] as f64;
                r * r
            })
            .sum())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::finite_difference_gradient;

    #[test]
    fn encode_is_the_frame() {
        let f = FrameImage::from_fn(4, 3, |y, x, c| (y * 12 + x * 3 + c) as f32 / 40.0);
        let z = IdentityEncoder.encode(&f).unwrap();
        assert_eq!(
            z.shape(),
            LatentShape {
                channels: 3,
                height: 3,
                width: 4
            }
        );
        for y in 0..3 {
            for x in 0..4 {
                for c in 0..3 {
                    assert_eq!(z.values()[c * 12 + y * 4 + x], f.get(y, x, c));
                }
            }
        }
    }

    #[test]
    fn zero_loss_at_own_encoding() {
        let f = FrameImage::filled(64, 64, 0.3);
        let t = IdentityEncoder.encode(&f).unwrap();
        let lg = IdentityEncoder.loss_gradient(&f, &vec![0.0; f.len()], &t).unwrap();
        assert_eq!(lg.loss, 0.0);
        assert!(lg.grad.iter().all(|g| *g == 0.0));
    }

    #[test]
    fn scalar_case() {
        let f = FrameImage::new(1, 1, vec![0.5; 3]).unwrap();
        let t = LatentTensor::new(
            LatentShape {
                channels: 3,
                height: 1,
                width: 1,
            },
            vec![0.53; 3],
        )
        .unwrap();
        let lg = IdentityEncoder.loss_gradient(&f, &[0.0; 3], &t).unwrap();
        assert!((lg.loss / 3.0 - 9e-4).abs() < 1e-7);
        assert!(lg.grad.iter().all(|g| (g + 0.06).abs() < 1e-6));
        let fd = finite_difference_gradient(&IdentityEncoder, &f, &[0.0; 3], &t, 1e-4).unwrap();
        assert!(fd.iter().all(|g| (g + 0.06).abs() < 1e-6));
    }

    #[test]
    fn shape_mismatch_is_config_error() {
        let f = FrameImage::filled(2, 2, 0.5);
        let t = IdentityEncoder.encode(&FrameImage::filled(2, 3, 0.5)).unwrap();
        assert!(matches!(
            IdentityEncoder.loss_gradient(&f, &[0.0; 12], &t),
            Err(Error::Config(_))
        ));
        let t = IdentityEncoder.encode(&f).unwrap();
        assert!(IdentityEncoder.loss_gradient(&f, &[0.0; 5], &t).is_err());
    }
}
