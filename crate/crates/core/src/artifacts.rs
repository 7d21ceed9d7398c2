//! Files written next to an immunized clip.
//!
//! `perturbations.bin` holds every frame's perturbation as raw little-endian
//! f32 in frame order (`height x width x 3` each); `perturbations.json`
//! indexes it. Keeping the exact deltas lets budget audits ignore 8-bit
//! quantization of the frames.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoder::EncoderSpec;
use crate::error::{Error, Result};
use crate::protect::{FrameFailure, LossReport, PerturbationField, ProtectionConfig, ProtectionResult};

pub const PERTURBATION_DATA: &str = "perturbations.bin";
pub const PERTURBATION_INDEX: &str = "perturbations.json";
pub const PROTECT_REPORT: &str = "protect_report.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbationIndex {
    pub dtype: String,
    /// `[height, width, 3]`
    pub frame_shape: [usize; 3],
    pub epsilon: f32,
    pub frames: Vec<PerturbationEntry>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PerturbationEntry {
    pub index: usize,
    /// Byte offset into the data file.
    pub offset: u64,
    /// Number of f32 values.
    pub length: usize,
}

pub fn write_perturbations(field: &PerturbationField, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut data = Vec::new();
    let mut frames = Vec::with_capacity(field.len());
    for (index, delta) in field.deltas.iter().enumerate() {
        frames.push(PerturbationEntry {
            index,
            offset: data.len() as u64,
            length: delta.len(),
        });
        for v in delta {
            data.extend_from_slice(&v.to_le_bytes());
        }
    }
    let index = PerturbationIndex {
        dtype: "float32-le".into(),
        frame_shape: [field.height, field.width, 3],
        epsilon: field.epsilon,
        frames,
    };
    let data_path = dir.join(PERTURBATION_DATA);
    fs::write(&data_path, data).map_err(|e| Error::io(data_path, e))?;
    write_json(&dir.join(PERTURBATION_INDEX), &index)
}

pub fn read_perturbations(dir: &Path) -> Result<PerturbationField> {
    let index: PerturbationIndex = read_json(&dir.join(PERTURBATION_INDEX))?;
    if index.dtype != "float32-le" {
        return Err(Error::Format(format!(
            "unsupported perturbation dtype {:?}",
            index.dtype
        )));
    }
    let data_path = dir.join(PERTURBATION_DATA);
    let data = fs::read(&data_path).map_err(|e| Error::io(&data_path, e))?;
    let [height, width, channels] = index.frame_shape;
    let expected = height * width * channels;
    let mut deltas = Vec::with_capacity(index.frames.len());
    for (i, entry) in index.frames.iter().enumerate() {
        if entry.index != i || entry.length != expected {
            return Err(Error::Integrity(format!("perturbation entry {i} is inconsistent")));
        }
        let start = entry.offset as usize;
        let bytes = data
            .get(start..start + entry.length * 4)
            .ok_or_else(|| Error::Integrity(format!("perturbation {i} runs past the data file")))?;
        deltas.push(
            bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        );
    }
    Ok(PerturbationField {
        deltas,
        epsilon: index.epsilon,
        width,
        height,
    })
}

/// Everything `protect`/`baseline` record about a run except wall-clock
/// time, so reruns with the same inputs produce identical bytes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtectionReport {
    pub method: String,
    pub input: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub encoder: Option<EncoderSpec>,
    pub config: ProtectionConfig,
    pub frame_count: usize,
    pub max_abs_delta: f32,
    pub losses: Option<LossReport>,
    pub failures: Vec<FrameFailure>,
}

impl ProtectionReport {
    pub fn new(
        method: &str,
        input: &str,
        target: Option<&str>,
        encoder: Option<&EncoderSpec>,
        config: &ProtectionConfig,
        result: &ProtectionResult,
    ) -> Self {
        Self {
            method: method.into(),
            input: input.into(),
            target: target.map(Into::into),
            encoder: encoder.cloned(),
            config: config.clone(),
            frame_count: result.immunized.len(),
            max_abs_delta: result.perturbations.max_abs(),
            losses: result.losses.clone(),
            failures: result.failures.clone(),
        }
    }
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("report types serialize");
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub(crate) fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

pub fn write_protection_report(report: &ProtectionReport, dir: &Path) -> Result<()> {
    write_json(&dir.join(PROTECT_REPORT), report)
}
