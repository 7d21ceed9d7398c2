//! Binary request/response protocol spoken with out-of-process model hosts.
//!
//! Every message is `u64 LE length` followed by `length` bytes:
//! `"UVCG"`, version `u8`, opcode `u8`, payload. Tensor payloads are a
//! sequence of blocks, each `dtype u8 | ndim u8 | dims (u32 LE each) | data`,
//! row-major, with dtype 1 = float32 LE the only one defined in version 1.
//! Hello responses and error payloads carry UTF-8 JSON; embed-text requests
//! carry the raw UTF-8 prompt.
//!
//! Frames travel as `[height, width, 3]`, latents as `[c, h, w]`, the loss as
//! a rank-0 tensor, embeddings as rank-1 tensors.

use std::collections::BTreeSet;
use std::io::{self, Read, Write};

use serde::{Deserialize, Serialize};

use crate::encoder::{Encoder, LatentShape, LatentTensor};
use crate::media::FrameImage;

pub const MAGIC: [u8; 4] = *b"UVCG";
pub const VERSION: u8 = 1;
pub const DTYPE_F32: u8 = 1;
/// Upper bound on a single message body; larger prefixes are treated as corrupt.
pub const MAX_MESSAGE_LEN: u64 = 1 << 30;
const HEADER_LEN: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(into = "u8", try_from = "u8")]
pub enum Opcode {
    Hello = 1,
    Encode = 2,
    LossGrad = 3,
    EmbedImage = 4,
    EmbedText = 5,
    Error = 6,
    Result = 7,
}

impl From<Opcode> for u8 {
    fn from(op: Opcode) -> u8 {
        op as u8
    }
}

impl TryFrom<u8> for Opcode {
    type Error = WireError;

    fn try_from(v: u8) -> Result<Self, WireError> {
        Ok(match v {
            1 => Opcode::Hello,
            2 => Opcode::Encode,
            3 => Opcode::LossGrad,
            4 => Opcode::EmbedImage,
            5 => Opcode::EmbedText,
            6 => Opcode::Error,
            7 => Opcode::Result,
            other => return Err(WireError::UnsupportedOpcode(other)),
        })
    }
}

#[derive(Debug, thiserror::Error)]
pub enum WireError {
    #[error("malformed framing: {0}")]
    Framing(String),
    #[error("bad magic {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported protocol version {0}")]
    UnsupportedVersion(u8),
    #[error("unsupported dtype {0}")]
    Dtype(u8),
    #[error("unsupported opcode {0}")]
    UnsupportedOpcode(u8),
    #[error("stream error: {0}")]
    Io(#[from] io::Error),
}

impl WireError {
    /// Error code carried in opcode-6 replies.
    pub fn code(&self) -> &'static str {
        match self {
            WireError::Framing(_) => "framing",
            WireError::BadMagic(_) => "magic",
            WireError::UnsupportedVersion(_) => "unsupported_version",
            WireError::Dtype(_) => "dtype",
            WireError::UnsupportedOpcode(_) => "unsupported_opcode",
            WireError::Io(_) => "io",
        }
    }

    /// Whether the stream can no longer be trusted after this error.
    pub fn is_fatal(&self) -> bool {
        matches!(
            self,
            WireError::BadMagic(_) | WireError::UnsupportedVersion(_) | WireError::Io(_)
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub dims: Vec<u32>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn new(dims: Vec<u32>, data: Vec<f32>) -> Self {
        debug_assert_eq!(dims.iter().map(|&d| d as usize).product::<usize>(), data.len());
        Self { dims, data }
    }

    pub fn scalar(v: f32) -> Self {
        Self {
            dims: vec![],
            data: vec![v],
        }
    }

    pub fn from_frame(frame: &FrameImage) -> Self {
        Self::new(
            vec![frame.height() as u32, frame.width() as u32, 3],
            frame.pixels().to_vec(),
        )
    }

    pub fn from_latent(z: &LatentTensor) -> Self {
        let s = z.shape();
        Self::new(
            vec![s.channels as u32, s.height as u32, s.width as u32],
            z.values().to_vec(),
        )
    }

    pub fn into_latent(self) -> Result<LatentTensor, String> {
        match self.dims[..] {
            [c, h, w] => LatentTensor::new(
                LatentShape {
                    channels: c as usize,
                    height: h as usize,
                    width: w as usize,
                },
                self.data,
            )
            .map_err(|e| e.to_string()),
            _ => Err(format!("expected a rank-3 latent, got dims {:?}", self.dims)),
        }
    }

    pub fn into_frame(self) -> Result<FrameImage, String> {
        match self.dims[..] {
            [h, w, 3] => FrameImage::new(w as usize, h as usize, self.data).map_err(|e| e.to_string()),
            _ => Err(format!("expected [h, w, 3] frame, got dims {:?}", self.dims)),
        }
    }
}

pub fn encode_tensors(tensors: &[Tensor]) -> Vec<u8> {
    let mut out = Vec::new();
    for t in tensors {
        out.push(DTYPE_F32);
        out.push(t.dims.len() as u8);
        for d in &t.dims {
            out.extend_from_slice(&d.to_le_bytes());
        }
        for v in &t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode_tensors(mut buf: &[u8]) -> Result<Vec<Tensor>, WireError> {
    let truncated = || WireError::Framing("tensor block truncated".into());
    let mut out = Vec::new();
    while !buf.is_empty() {
        if buf.len() < 2 {
            return Err(truncated());
        }
        let (dtype, ndim) = (buf[0], buf[1] as usize);
        if dtype != DTYPE_F32 {
            return Err(WireError::Dtype(dtype));
        }
        buf = &buf[2..];
        if buf.len() < ndim * 4 {
            return Err(truncated());
        }
        let dims: Vec<u32> = buf[..ndim * 4]
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        buf = &buf[ndim * 4..];
        let count = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d as usize))
            .ok_or_else(truncated)?;
        let bytes = count.checked_mul(4).ok_or_else(truncated)?;
        if buf.len() < bytes {
            return Err(truncated());
        }
        let data = buf[..bytes]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        buf = &buf[bytes..];
        out.push(Tensor { dims, data });
    }
    Ok(out)
}

/// A message whose header has been validated.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub opcode: u8,
    pub payload: Vec<u8>,
}

pub fn write_frame(w: &mut impl Write, opcode: Opcode, payload: &[u8]) -> io::Result<()> {
    write_raw(w, MAGIC, VERSION, opcode as u8, payload)
}

/// Writes a message with caller-chosen header bytes; lets tests produce malformed traffic.
pub fn write_raw(w: &mut impl Write, magic: [u8; 4], version: u8, opcode: u8, payload: &[u8]) -> io::Result<()> {
    let len = (HEADER_LEN + payload.len()) as u64;
    w.write_all(&len.to_le_bytes())?;
    w.write_all(&magic)?;
    w.write_all(&[version, opcode])?;
    w.write_all(payload)?;
    w.flush()
}

/// Reads one message. `Ok(None)` means the peer closed the stream cleanly
/// between messages.
pub fn read_frame(r: &mut impl Read) -> Result<Option<Frame>, WireError> {
    let mut len_buf = [0u8; 8];
    let mut filled = 0;
    while filled < 8 {
        match r.read(&mut len_buf[filled..]) {
            Ok(0) if filled == 0 => return Ok(None),
            Ok(0) => return Err(WireError::Io(io::ErrorKind::UnexpectedEof.into())),
            Ok(n) => filled += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    let len = u64::from_le_bytes(len_buf);
    if len > MAX_MESSAGE_LEN {
        // Cannot skip an absurd body, so the stream is lost.
        return Err(WireError::Io(io::Error::new(
            io::ErrorKind::InvalidData,
            format!("message length {len} exceeds limit"),
        )));
    }
    let mut body = vec![0u8; len as usize];
    r.read_exact(&mut body)?;
    if body.len() < HEADER_LEN {
        return Err(WireError::Framing(format!("message of {len} bytes has no header")));
    }
    let magic: [u8; 4] = body[..4].try_into().unwrap();
    if magic != MAGIC {
        return Err(WireError::BadMagic(magic));
    }
    if body[4] != VERSION {
        return Err(WireError::UnsupportedVersion(body[4]));
    }
    let opcode = body[5];
    body.drain(..HEADER_LEN);
    Ok(Some(Frame { opcode, payload: body }))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Capabilities {
    pub supports: BTreeSet<Opcode>,
    pub deterministic: bool,
    /// Latent shape is `(latent_channels, h / downsample_factor, w / downsample_factor)`.
    pub latent_channels: usize,
    pub downsample_factor: usize,
    #[serde(default)]
    pub name: String,
}

impl Capabilities {
    pub fn supports(&self, op: Opcode) -> bool {
        self.supports.contains(&op)
    }

    pub fn latent_shape_for(&self, width: usize, height: usize) -> Option<LatentShape> {
        let f = self.downsample_factor;
        (f > 0 && width.is_multiple_of(f) && height.is_multiple_of(f)).then(|| LatentShape {
            channels: self.latent_channels,
            height: height / f,
            width: width / f,
        })
    }

    /// `loss_grad` support implies `encode` support.
    pub fn is_consistent(&self) -> bool {
        !self.supports(Opcode::LossGrad) || self.supports(Opcode::Encode)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorPayload {
    pub code: String,
    pub message: String,
}

pub fn write_error(w: &mut impl Write, code: &str, message: &str) -> io::Result<()> {
    let body = serde_json::to_vec(&ErrorPayload {
        code: code.into(),
        message: message.into(),
    })
    .expect("error payload serializes");
    write_frame(w, Opcode::Error, &body)
}

/// Failure reported by a model host for one request.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HostError {
    pub code: String,
    pub message: String,
}

impl HostError {
    pub fn new(code: &str, message: impl Into<String>) -> Self {
        Self {
            code: code.into(),
            message: message.into(),
        }
    }
}

/// Server side of the protocol: what a model host must provide.
pub trait ModelHost {
    fn capabilities(&self) -> Capabilities;
    fn encode(&self, frame: Tensor) -> Result<Tensor, HostError>;
    fn loss_grad(&self, frame: Tensor, delta: Tensor, target: Tensor) -> Result<(Tensor, Tensor), HostError>;
    fn embed_image(&self, frame: Tensor) -> Result<Tensor, HostError>;
    fn embed_text(&self, text: &str) -> Result<Tensor, HostError>;
}

/// Serves requests until the peer closes the stream or sends traffic that
/// makes the stream untrustworthy (bad magic, wrong version). Malformed
/// payloads inside a well-framed message get an error reply and the
/// connection stays up.
pub fn serve(host: &dyn ModelHost, r: &mut impl Read, w: &mut impl Write) -> io::Result<()> {
    loop {
        let frame = match read_frame(r) {
            Ok(Some(f)) => f,
            Ok(None) => return Ok(()),
            Err(WireError::Io(e)) if e.kind() == io::ErrorKind::UnexpectedEof => return Ok(()),
            Err(e) => {
                // Best effort: the peer may already be gone.
                let _ = write_error(w, e.code(), &e.to_string());
                if e.is_fatal() {
                    return Ok(());
                }
                continue;
            }
        };
        let caps = host.capabilities();
        let reply = match Opcode::try_from(frame.opcode) {
            Err(e) => Err(HostError::new(e.code(), e.to_string())),
            Ok(Opcode::Hello) => Ok(serde_json::to_vec(&caps).expect("capabilities serialize")),
            Ok(op) if !caps.supports(op) => Err(HostError::new(
                "unsupported_opcode",
                format!("host does not support opcode {}", op as u8),
            )),
            Ok(Opcode::EmbedText) => match std::str::from_utf8(&frame.payload) {
                Ok(text) => host.embed_text(text).map(|t| encode_tensors(&[t])),
                Err(_) => Err(HostError::new("framing", "prompt is not UTF-8")),
            },
            Ok(op) => dispatch_tensors(host, op, &frame.payload),
        };
        match reply {
            Ok(body) => write_frame(w, Opcode::Result, &body)?,
            Err(e) => write_error(w, &e.code, &e.message)?,
        }
    }
}

fn dispatch_tensors(host: &dyn ModelHost, op: Opcode, payload: &[u8]) -> Result<Vec<u8>, HostError> {
    let tensors = decode_tensors(payload).map_err(|e| HostError::new(e.code(), e.to_string()))?;
    let arity = match op {
        Opcode::LossGrad => 3,
        _ => 1,
    };
    if tensors.len() != arity {
        return Err(HostError::new(
            "shape",
            format!("expected {arity} tensors, got {}", tensors.len()),
        ));
    }
    let mut it = tensors.into_iter();
    let mut next = || it.next().unwrap();
    match op {
        Opcode::Encode => host.encode(next()).map(|t| encode_tensors(&[t])),
        Opcode::EmbedImage => host.embed_image(next()).map(|t| encode_tensors(&[t])),
        Opcode::LossGrad => {
            let (f, d, t) = (next(), next(), next());
            host.loss_grad(f, d, t).map(|(l, g)| encode_tensors(&[l, g]))
        }
        _ => Err(HostError::new("unsupported_opcode", "not a request opcode")),
    }
}

/// Hosts any in-process [`Encoder`]; image embeddings are the L2-normalized
/// flattened latent. Used for the echo sidecar and for Rust-side hosts.
pub struct EncoderHost<E> {
    pub encoder: E,
    pub name: String,
    pub latent_channels: usize,
    pub downsample_factor: usize,
}

impl<E: Encoder> EncoderHost<E> {
    fn frame(&self, t: Tensor) -> Result<FrameImage, HostError> {
        t.into_frame().map_err(|m| HostError::new("shape", m))
    }

    fn model<T>(r: crate::Result<T>) -> Result<T, HostError> {
        r.map_err(|e| match e {
            crate::Error::Config(m) => HostError::new("shape", m),
            other => HostError::new("model", other.to_string()),
        })
    }
}

impl<E: Encoder> ModelHost for EncoderHost<E> {
    fn capabilities(&self) -> Capabilities {
        Capabilities {
            supports: [Opcode::Encode, Opcode::LossGrad, Opcode::EmbedImage].into(),
            deterministic: true,
            latent_channels: self.latent_channels,
            downsample_factor: self.downsample_factor,
            name: self.name.clone(),
        }
    }

    fn encode(&self, frame: Tensor) -> Result<Tensor, HostError> {
        let frame = self.frame(frame)?;
        Self::model(self.encoder.encode(&frame)).map(|z| Tensor::from_latent(&z))
    }

    fn loss_grad(&self, frame: Tensor, delta: Tensor, target: Tensor) -> Result<(Tensor, Tensor), HostError> {
        let frame = self.frame(frame)?;
        if delta.dims != [frame.height() as u32, frame.width() as u32, 3] {
            return Err(HostError::new("shape", "delta must match the frame shape"));
        }
        let target = target.into_latent().map_err(|m| HostError::new("shape", m))?;
        let lg = Self::model(self.encoder.loss_gradient(&frame, &delta.data, &target))?;
        let dims = delta.dims;
        Ok((Tensor::scalar(lg.loss), Tensor::new(dims, lg.grad)))
    }

    fn embed_image(&self, frame: Tensor) -> Result<Tensor, HostError> {
        let frame = self.frame(frame)?;
        let z = Self::model(self.encoder.encode(&frame))?;
        let norm = z.values().iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(HostError::new("model", "zero embedding"));
        }
        let v = z.values().iter().map(|x| (*x as f64 / norm) as f32).collect::<Vec<_>>();
        Ok(Tensor::new(vec![v.len() as u32], v))
    }

    fn embed_text(&self, _text: &str) -> Result<Tensor, HostError> {
        Err(HostError::new("unsupported_opcode", "no text embedder"))
    }
}
