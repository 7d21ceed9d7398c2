use std::io::{BufReader, BufWriter};
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};
use std::sync::Mutex;

use crate::error::{Error, Result};
use crate::media::FrameImage;
use crate::wire::{self, Capabilities, ErrorPayload, Opcode, Tensor, WireError};

use super::{Encoder, EncoderKind, LatentShape, LatentTensor, LossGradient};

/// A launched model host speaking the wire protocol over its stdin/stdout.
/// One request is in flight at a time.
pub struct SidecarClient {
    child: Child,
    stdin: Option<BufWriter<ChildStdin>>,
    stdout: BufReader<ChildStdout>,
    capabilities: Capabilities,
}

fn wire_err(e: WireError) -> Error {
    Error::sidecar(e.code(), e.to_string())
}

impl SidecarClient {
    /// Runs `command` through `sh -c` and performs the hello handshake.
    pub fn launch(command: &str) -> Result<Self> {
        let mut child = Command::new("sh")
            .arg("-c")
            .arg(command)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| Error::sidecar("launch", format!("cannot start {command:?}: {e}")))?;
        let stdin = child.stdin.take().map(BufWriter::new);
        let stdout = BufReader::new(child.stdout.take().expect("stdout is piped"));
        let mut client = Self {
            child,
            stdin,
            stdout,
            capabilities: Capabilities {
                supports: Default::default(),
                deterministic: false,
                latent_channels: 0,
                downsample_factor: 0,
                name: String::new(),
            },
        };
        let body = client.request(Opcode::Hello, &[])?;
        let caps: Capabilities =
            serde_json::from_slice(&body).map_err(|e| Error::sidecar("protocol", format!("bad capabilities: {e}")))?;
        if !caps.deterministic {
            return Err(Error::sidecar(
                "nondeterministic",
                "sidecar reports deterministic=false",
            ));
        }
        if !caps.is_consistent() {
            return Err(Error::sidecar("protocol", "loss_grad advertised without encode"));
        }
        client.capabilities = caps;
        Ok(client)
    }

    pub fn capabilities(&self) -> &Capabilities {
        &self.capabilities
    }

    /// Sends one request and returns the result payload.
    pub fn request(&mut self, opcode: Opcode, payload: &[u8]) -> Result<Vec<u8>> {
        let stdin = self
            .stdin
            .as_mut()
            .ok_or_else(|| Error::sidecar("closed", "sidecar connection closed"))?;
        wire::write_frame(stdin, opcode, payload)
            .map_err(|e| Error::sidecar("io", format!("write to sidecar failed: {e}")))?;
        let frame = wire::read_frame(&mut self.stdout)
            .map_err(wire_err)?
            .ok_or_else(|| Error::sidecar("closed", "sidecar closed the connection"))?;
        match Opcode::try_from(frame.opcode).map_err(wire_err)? {
            Opcode::Result => Ok(frame.payload),
            Opcode::Error => {
                let p: ErrorPayload = serde_json::from_slice(&frame.payload).unwrap_or(ErrorPayload {
                    code: "protocol".into(),
                    message: String::from_utf8_lossy(&frame.payload).into_owned(),
                });
                Err(Error::sidecar(p.code, p.message))
            }
            other => Err(Error::sidecar(
                "protocol",
                format!("unexpected reply opcode {}", other as u8),
            )),
        }
    }

    pub fn request_tensors(&mut self, opcode: Opcode, tensors: &[Tensor]) -> Result<Vec<Tensor>> {
        let body = self.request(opcode, &wire::encode_tensors(tensors))?;
        wire::decode_tensors(&body).map_err(wire_err)
    }

    fn require(&self, op: Opcode) -> Result<()> {
        if self.capabilities.supports(op) {
            Ok(())
        } else {
            Err(Error::Capability(format!(
                "sidecar {:?} does not support opcode {}",
                self.capabilities.name, op as u8
            )))
        }
    }

    pub fn embed_image(&mut self, frame: &FrameImage) -> Result<Vec<f32>> {
        self.require(Opcode::EmbedImage)?;
        single_vector(self.request_tensors(Opcode::EmbedImage, &[Tensor::from_frame(frame)])?)
    }

    pub fn embed_text(&mut self, text: &str) -> Result<Vec<f32>> {
        self.require(Opcode::EmbedText)?;
        let body = self.request(Opcode::EmbedText, text.as_bytes())?;
        single_vector(wire::decode_tensors(&body).map_err(wire_err)?)
    }
}

fn single_vector(mut tensors: Vec<Tensor>) -> Result<Vec<f32>> {
    match tensors.len() {
        1 => Ok(tensors.pop().unwrap().data),
        n => Err(Error::sidecar("protocol", format!("expected one tensor, got {n}"))),
    }
}

impl Drop for SidecarClient {
    fn drop(&mut self) {
        // Closing stdin is the shutdown signal.
        drop(self.stdin.take());
        if let Ok(None) = self.child.try_wait() {
            std::thread::sleep(std::time::Duration::from_millis(20));
            if let Ok(None) = self.child.try_wait() {
                let _ = self.child.kill();
            }
        }
        let _ = self.child.wait();
    }
}

pub struct SidecarEncoder {
    client: Mutex<SidecarClient>,
    capabilities: Capabilities,
}

impl SidecarEncoder {
    pub fn launch(command: &str) -> Result<Self> {
        let client = SidecarClient::launch(command)?;
        for op in [Opcode::Encode, Opcode::LossGrad] {
            client
                .require(op)
                .map_err(|e| Error::sidecar("capability", e.to_string()))?;
        }
        let capabilities = client.capabilities().clone();
        Ok(Self {
            client: Mutex::new(client),
            capabilities,
        })
    }

    pub fn capabilities(&self) -> &Capabilities {
        &self.capabilities
    }

    fn call(&self, op: Opcode, tensors: &[Tensor]) -> Result<Vec<Tensor>> {
        let mut client = self.client.lock().unwrap_or_else(|p| p.into_inner());
        client.request_tensors(op, tensors)
    }

    fn encode_tensor(&self, t: Tensor, shape: LatentShape) -> Result<LatentTensor> {
        let mut out = self.call(Opcode::Encode, &[t])?;
        if out.len() != 1 {
            return Err(Error::sidecar("protocol", "encode must return one tensor"));
        }
        let z = out
            .pop()
            .unwrap()
            .into_latent()
            .map_err(|m| Error::sidecar("protocol", m))?;
        if z.shape() != shape {
            return Err(Error::sidecar(
                "protocol",
                format!("sidecar returned latent {}, advertised {shape}", z.shape()),
            ));
        }
        Ok(z)
    }
}

impl Encoder for SidecarEncoder {
    fn kind(&self) -> EncoderKind {
        EncoderKind::Sidecar
    }

    fn latent_shape(&self, width: usize, height: usize) -> Result<LatentShape> {
        self.capabilities.latent_shape_for(width, height).ok_or_else(|| {
            Error::config(format!(
                "frame {width}x{height} is not divisible by the sidecar downsample factor {}",
                self.capabilities.downsample_factor
            ))
        })
    }

    fn encode(&self, frame: &FrameImage) -> Result<LatentTensor> {
        let shape = self.latent_shape(frame.width(), frame.height())?;
        self.encode_tensor(Tensor::from_frame(frame), shape)
    }

    fn loss_gradient(&self, frame: &FrameImage, delta: &[f32], target: &LatentTensor) -> Result<LossGradient> {
        target.expect_shape(self.latent_shape(frame.width(), frame.height())?)?;
        if delta.len() != frame.len() {
            return Err(Error::config("perturbation and frame sizes differ"));
        }
        let dims = vec![frame.height() as u32, frame.width() as u32, 3];
        let out = self.call(
            Opcode::LossGrad,
            &[
                Tensor::from_frame(frame),
                Tensor::new(dims.clone(), delta.to_vec()),
                Tensor::from_latent(target),
            ],
        )?;
        match &out[..] {
            [loss, grad] if loss.data.len() == 1 && grad.dims == dims => Ok(LossGradient {
                loss: loss.data[0],
                grad: grad.data.clone(),
            }),
            _ => Err(Error::sidecar(
                "protocol",
                "loss_grad must return (scalar, frame-shaped grad)",
            )),
        }
    }

    fn loss_f64(&self, input: &[f64], width: usize, height: usize, target: &LatentTensor) -> Result<f64> {
        let shape = self.latent_shape(width, height)?;
        target.expect_shape(shape)?;
        let t = Tensor::new(
            vec![height as u32, width as u32, 3],
            input.iter().map(|v| *v as f32).collect(),
        );
        Ok(self.encode_tensor(t, shape)?.squared_distance(target))
    }
}
