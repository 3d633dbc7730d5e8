//! Audio decoding and feature extraction.
//!
//! Pipeline: WAV → mono 16 kHz [`AudioClip`] → 240×64 log-mel
//! [`FeatureChunk`] (optionally → 240×24 MFCC) → per-bin normalization.
//! Extraction is a pure function of the input bytes, so clips can be
//! processed in parallel and re-extraction always reproduces the same file.

pub mod featfile;
pub mod mel;
pub mod normalize;
pub mod wav;

pub use wav::{load_wav, write_wav};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const SAMPLE_RATE: u32 = 16_000;
pub const CLIP_SECONDS: f64 = 10.0;
pub const N_FFT: usize = 1024;
pub const STFT_HOP: usize = 667;
pub const N_FRAMES: usize = 240;
pub const N_MELS: usize = 64;
pub const N_MFCC: usize = 24;
pub const MEL_FMAX: f64 = 8000.0;
pub const LOG_FLOOR: f64 = 1e-10;

/// Seconds per feature frame: 240 frames tile the 10-second clip evenly,
/// which keeps event offsets within the clip duration.
pub const FRAME_HOP_SECONDS: f64 = CLIP_SECONDS / N_FRAMES as f64;

/// Mono waveform with samples in [-1, 1].
#[derive(Debug, Clone)]
pub struct AudioClip {
    samples: Vec<f64>,
    sample_rate: u32,
}

impl AudioClip {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::config("audio clip has no samples"));
        }
        if sample_rate == 0 {
            return Err(Error::config("sample rate must be positive"));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureKind {
    LogMel,
    Mfcc,
}

impl FeatureKind {
    pub fn tag(self) -> u8 {
        match self {
            Self::LogMel => 0,
            Self::Mfcc => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(Self::LogMel),
            1 => Some(Self::Mfcc),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::LogMel => "log_mel",
            Self::Mfcc => "mfcc",
        }
    }
}

/// Fixed-size feature matrix for one clip: `values` is [frames, bins].
#[derive(Debug, Clone)]
pub struct FeatureChunk {
    pub values: Tensor,
    pub kind: FeatureKind,
    pub frame_hop_seconds: f64,
}

impl FeatureChunk {
    pub fn frames(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn bins(&self) -> usize {
        self.values.shape()[1]
    }
}
