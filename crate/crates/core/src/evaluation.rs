//! Consistency metrics over pluggable embedders and the evaluation report.

use std::fs;
use std::path::Path;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::encoder::{Encoder, ReferenceEncoder, SidecarClient};
use crate::error::{Error, Result};
use crate::media::{FrameImage, VideoClip};
use crate::metrics::{self, mean, PSNR_CAP_DB};

/// Produces unit-norm embeddings of frames and, optionally, text.
pub trait Embedder: Send + Sync {
    fn name(&self) -> String;
    fn embed_image(&self, frame: &FrameImage) -> Result<Vec<f32>>;
    fn embed_text(&self, text: &str) -> Result<Vec<f32>>;
}

pub fn normalize(v: &[f32]) -> Result<Vec<f32>> {
    let norm = v.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    if !(norm > 0.0 && norm.is_finite()) {
        return Err(Error::Numerical(format!("cannot normalize embedding of norm {norm}")));
    }
    Ok(v.iter().map(|x| (*x as f64 / norm) as f32).collect())
}

pub fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(x, y)| *x as f64 * *y as f64).sum()
}

/// Flattened reference-encoder latent, L2-normalized. Images only.
pub struct ReferenceEmbedder {
    encoder: ReferenceEncoder,
}

impl ReferenceEmbedder {
    pub fn new(encoder: ReferenceEncoder) -> Self {
        Self { encoder }
    }
}

impl Embedder for ReferenceEmbedder {
    fn name(&self) -> String {
        format!("reference(seed={})", self.encoder.seed())
    }

    fn embed_image(&self, frame: &FrameImage) -> Result<Vec<f32>> {
        normalize(self.encoder.encode(frame)?.values())
    }

    fn embed_text(&self, _text: &str) -> Result<Vec<f32>> {
        Err(Error::Capability(
            "the reference embedder has no text tower; prompt consistency needs a sidecar embedder".into(),
        ))
    }
}

/// Embeddings served by a sidecar (opcodes 4 and 5).
pub struct SidecarEmbedder {
    client: Mutex<SidecarClient>,
    name: String,
}

impl SidecarEmbedder {
    pub fn launch(command: &str) -> Result<Self> {
        let client = SidecarClient::launch(command)?;
        let name = format!("sidecar({})", client.capabilities().name);
        Ok(Self {
            client: Mutex::new(client),
            name,
        })
    }

    fn with_client<T>(&self, f: impl FnOnce(&mut SidecarClient) -> Result<T>) -> Result<T> {
        let mut guard = self.client.lock().unwrap_or_else(|p| p.into_inner());
        f(&mut guard)
    }
}

impl Embedder for SidecarEmbedder {
    fn name(&self) -> String {
        self.name.clone()
    }

    fn embed_image(&self, frame: &FrameImage) -> Result<Vec<f32>> {
        normalize(&self.with_client(|c| c.embed_image(frame))?)
    }

    fn embed_text(&self, text: &str) -> Result<Vec<f32>> {
        normalize(&self.with_client(|c| c.embed_text(text))?)
    }
}

/// Mean cosine similarity of consecutive frame embeddings, with the per-pair values.
pub fn frame_consistency(clip: &VideoClip, embedder: &dyn Embedder) -> Result<(f64, Vec<f64>)> {
    if clip.len() < 2 {
        return Err(Error::config("frame consistency needs at least two frames"));
    }
    let embeddings = clip
        .frames()
        .iter()
        .map(|f| embedder.embed_image(f))
        .collect::<Result<Vec<_>>>()?;
    let per_pair: Vec<f64> = embeddings
        .windows(2)
        .map(|w| dot(&w[0], &w[1]).clamp(-1.0, 1.0))
        .collect();
    Ok((mean(&per_pair), per_pair))
}

/// Mean cosine similarity between each frame and the prompt.
pub fn prompt_consistency(clip: &VideoClip, prompt: &str, embedder: &dyn Embedder) -> Result<f64> {
    let text = embedder.embed_text(prompt)?;
    let sims = clip
        .frames()
        .iter()
        .map(|f| Ok(dot(&embedder.embed_image(f)?, &text).clamp(-1.0, 1.0)))
        .collect::<Result<Vec<_>>>()?;
    Ok(mean(&sims))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerFrame {
    pub ssim: Vec<f64>,
    pub psnr: Vec<f64>,
    pub frame_cos: Vec<f64>,
}

/// Consistency and similarity scores in a fixed JSON layout. `lpips` and
/// `vmaf` are always written as `null` for external tools to fill in.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub meta: serde_json::Value,
    pub prompt_consistency: Option<f64>,
    pub frame_consistency: f64,
    pub ssim: Option<f64>,
    pub psnr: Option<f64>,
    pub lpips: Option<f64>,
    pub vmaf: Option<f64>,
    pub per_frame: PerFrame,
}

pub const TABLE_COLUMNS: [&str; 4] = ["prompt_consistency", "frame_consistency", "ssim", "psnr"];

fn check_aggregate(name: &str, value: Option<f64>, list: &[f64]) -> Result<()> {
    match value {
        Some(_) if list.is_empty() => Err(Error::Schema(format!("{name} has no per-frame values"))),
        Some(v) if v != mean(list) => Err(Error::Schema(format!(
            "{name} = {v} is not the mean of its per-frame list ({})",
            mean(list)
        ))),
        None if !list.is_empty() => Err(Error::Schema(format!("{name} is null but has per-frame values"))),
        _ => Ok(()),
    }
}

fn check_range(name: &str, value: Option<f64>, lo: f64, hi: f64) -> Result<()> {
    match value {
        Some(v) if !(lo..=hi).contains(&v) => Err(Error::Schema(format!("{name} = {v} outside [{lo}, {hi}]"))),
        _ => Ok(()),
    }
}

impl EvaluationReport {
    pub fn validate(&self) -> Result<()> {
        if !self.meta.is_object() {
            return Err(Error::Schema("meta must be an object".into()));
        }
        if self.per_frame.frame_cos.is_empty() {
            return Err(Error::Schema("per_frame.frame_cos is empty".into()));
        }
        check_aggregate(
            "frame_consistency",
            Some(self.frame_consistency),
            &self.per_frame.frame_cos,
        )?;
        check_aggregate("ssim", self.ssim, &self.per_frame.ssim)?;
        check_aggregate("psnr", self.psnr, &self.per_frame.psnr)?;
        check_range("prompt_consistency", self.prompt_consistency, -1.0, 1.0)?;
        check_range("frame_consistency", Some(self.frame_consistency), -1.0, 1.0)?;
        check_range("ssim", self.ssim, -1.0, 1.0)?;
        check_range("psnr", self.psnr, f64::MIN_POSITIVE, PSNR_CAP_DB)?;
        Ok(())
    }

    /// `metric,value` rows for the four table columns; null becomes an empty field.
    pub fn csv(&self) -> String {
        let cell = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let values = [
            self.prompt_consistency,
            Some(self.frame_consistency),
            self.ssim,
            self.psnr,
        ];
        let mut out = String::from("metric,value\n");
        for (name, v) in TABLE_COLUMNS.iter().zip(values) {
            out.push_str(&format!("{name},{}\n", cell(v)));
        }
        out
    }
}

/// Scores clip `b` against reference clip `a`. Frame and prompt consistency
/// are measured on `b`.
pub fn evaluate(
    a: &VideoClip,
    b: &VideoClip,
    embedder: &dyn Embedder,
    prompt: Option<&str>,
    meta: serde_json::Value,
) -> Result<EvaluationReport> {
    let (psnr, psnr_frames) = metrics::psnr(a, b)?;
    let (ssim, ssim_frames) = metrics::ssim(a, b)?;
    let (fc, fc_pairs) = frame_consistency(b, embedder)?;
    let pc = prompt.map(|p| prompt_consistency(b, p, embedder)).transpose()?;
    let report = EvaluationReport {
        meta,
        prompt_consistency: pc,
        frame_consistency: fc,
        ssim: Some(ssim),
        psnr: Some(psnr),
        lpips: None,
        vmaf: None,
        per_frame: PerFrame {
            ssim: ssim_frames,
            psnr: psnr_frames,
            frame_cos: fc_pairs,
        },
    };
    report.validate()?;
    Ok(report)
}

/// Validates and writes the report as JSON, plus a CSV summary when `csv` is given.
pub fn emit_report(report: &EvaluationReport, path: &Path, csv: Option<&Path>) -> Result<()> {
    report.validate()?;
    let text = serde_json::to_string_pretty(report).expect("report serializes");
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))?;
    if let Some(csv) = csv {
        fs::write(csv, report.csv()).map_err(|e| Error::io(csv, e))?;
    }
    Ok(())
}

pub fn read_report(path: &Path) -> Result<EvaluationReport> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let report: EvaluationReport =
        serde_json::from_str(&text).map_err(|e| Error::Schema(format!("{}: {e}", path.display())))?;
    report.validate()?;
    Ok(report)
}
