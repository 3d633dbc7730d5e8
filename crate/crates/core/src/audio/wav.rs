//! WAV decoding to mono 16 kHz and PCM16 encoding for generated corpora.

use std::path::Path;

use super::{AudioClip, SAMPLE_RATE};
use crate::error::{Error, Result};

/// Decode a PCM16 or float32 WAV file. Stereo is downmixed by averaging,
/// other rates are resampled to 16 kHz by linear interpolation.
pub fn load_wav(path: &Path) -> Result<AudioClip> {
    let mut reader =
        hound::WavReader::open(path).map_err(|e| Error::format(path, e.to_string()))?;
    let spec = reader.spec();
    if spec.channels == 0 {
        return Err(Error::format(path, "zero channels"));
    }

    let interleaved: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Int, 16) => reader
            .samples::<i16>()
            .map(|s| s.map(|v| v as f64 / 32768.0))
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::format(path, e.to_string()))?,
        (hound::SampleFormat::Float, 32) => reader
            .samples::<f32>()
            .map(|s| s.map(|v| v as f64))
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::format(path, e.to_string()))?,
        (format, bits) => {
            return Err(Error::format(
                path,
                format!("unsupported encoding: {:?} {} bits", format, bits),
            ))
        }
    };
    if interleaved.is_empty() {
        return Err(Error::format(path, "no audio samples"));
    }

    let channels = spec.channels as usize;
    let mono: Vec<f64> = interleaved
        .chunks(channels)
        .map(|frame| frame.iter().sum::<f64>() / channels as f64)
        .collect();

    let samples = if spec.sample_rate == SAMPLE_RATE {
        mono
    } else {
        resample_linear(&mono, spec.sample_rate, SAMPLE_RATE)
    };
    AudioClip::new(samples, SAMPLE_RATE)
}

/// Encode mono samples as PCM16, clamping to [-1, 1].
pub fn write_wav(path: &Path, samples: &[f64], sample_rate: u32) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer =
        hound::WavWriter::create(path, spec).map_err(|e| Error::format(path, e.to_string()))?;
    for &s in samples {
        let v = (s.clamp(-1.0, 1.0) * 32767.0).round() as i16;
        writer
            .write_sample(v)
            .map_err(|e| Error::format(path, e.to_string()))?;
    }
    writer
        .finalize()
        .map_err(|e| Error::format(path, e.to_string()))
}

fn resample_linear(samples: &[f64], from: u32, to: u32) -> Vec<f64> {
    let ratio = to as f64 / from as f64;
    let n_out = ((samples.len() as f64) * ratio).round() as usize;
    (0..n_out)
        .map(|i| {
            let pos = i as f64 / ratio;
            let lo = pos.floor() as usize;
            let frac = pos - lo as f64;
            let a = samples[lo.min(samples.len() - 1)];
            let b = samples[(lo + 1).min(samples.len() - 1)];
            a + frac * (b - a)
        })
        .collect()
}
