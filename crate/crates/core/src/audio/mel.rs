//! Log-mel spectrograms and MFCCs.
//!
//! A 10-second 16 kHz clip becomes exactly 240 frames: the waveform is
//! zero-padded/truncated to 10 s, center-padded by half a window, then
//! Hann-windowed at hop 667. The power spectrum folds through a 64-band
//! triangular filterbank on the HTK mel scale (0–8 kHz) into `ln(x + 1e-10)`.

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use super::{
    AudioClip, FeatureChunk, FeatureKind, CLIP_SECONDS, FRAME_HOP_SECONDS, LOG_FLOOR, MEL_FMAX,
    N_FFT, N_FRAMES, N_MELS, N_MFCC, SAMPLE_RATE, STFT_HOP,
};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn mel_of_hz(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn hz_of_mel(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular filters as (first FFT bin, weights). Band b spans the
/// mel-spaced breakpoints b..b+2 with unit peak at the center.
fn filterbank() -> Vec<(usize, Vec<f64>)> {
    let n_bins = N_FFT / 2 + 1;
    let hz_per_bin = SAMPLE_RATE as f64 / N_FFT as f64;
    let mel_top = mel_of_hz(MEL_FMAX);
    let points: Vec<f64> = (0..N_MELS + 2)
        .map(|j| hz_of_mel(mel_top * j as f64 / (N_MELS + 1) as f64))
        .collect();

    (0..N_MELS)
        .map(|b| {
            let (lo, center, hi) = (points[b], points[b + 1], points[b + 2]);
            let mut start = None;
            let mut weights = Vec::new();
            for k in 0..n_bins {
                let f = k as f64 * hz_per_bin;
                let w = if f <= lo || f >= hi {
                    0.0
                } else if f <= center {
                    (f - lo) / (center - lo)
                } else {
                    (hi - f) / (hi - center)
                };
                if w > 0.0 {
                    start.get_or_insert(k);
                    weights.push(w);
                } else if start.is_some() {
                    break;
                }
            }
            (start.unwrap_or(0), weights)
        })
        .collect()
}

/// 240×64 log-mel features of a 16 kHz clip. Shorter clips are zero-padded
/// to 10 s, longer ones truncated.
pub fn log_mel(clip: &AudioClip) -> Result<FeatureChunk> {
    if clip.sample_rate() != SAMPLE_RATE {
        return Err(Error::config(format!(
            "log_mel expects {} Hz input, got {}",
            SAMPLE_RATE,
            clip.sample_rate()
        )));
    }
    let clip_len = (CLIP_SECONDS * SAMPLE_RATE as f64) as usize;
    let pad = N_FFT / 2;
    let mut padded = vec![0.0; clip_len + 2 * pad];
    let n = clip.samples().len().min(clip_len);
    padded[pad..pad + n].copy_from_slice(&clip.samples()[..n]);

    let window: Vec<f64> = (0..N_FFT)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / N_FFT as f64).cos())
        .collect();
    let fft = FftPlanner::new().plan_fft_forward(N_FFT);
    let bank = filterbank();
    let n_bins = N_FFT / 2 + 1;

    let mut values = vec![0.0; N_FRAMES * N_MELS];
    let mut buf = vec![Complex::new(0.0, 0.0); N_FFT];
    let mut power = vec![0.0; n_bins];
    for frame in 0..N_FRAMES {
        let start = frame * STFT_HOP;
        for i in 0..N_FFT {
            buf[i] = Complex::new(padded[start + i] * window[i], 0.0);
        }
        fft.process(&mut buf);
        for (k, p) in power.iter_mut().enumerate() {
            *p = buf[k].norm_sqr();
        }
        for (b, (first_bin, weights)) in bank.iter().enumerate() {
            let energy: f64 = weights
                .iter()
                .zip(&power[*first_bin..])
                .map(|(w, p)| w * p)
                .sum();
            values[frame * N_MELS + b] = (energy + LOG_FLOOR).ln();
        }
    }

    Ok(FeatureChunk {
        values: Tensor::from_vec(vec![N_FRAMES, N_MELS], values)?,
        kind: FeatureKind::LogMel,
        frame_hop_seconds: FRAME_HOP_SECONDS,
    })
}

/// Orthonormal DCT-II along the band axis of a log-mel chunk, keeping the
/// first 24 coefficients.
pub fn mfcc(chunk: &FeatureChunk) -> Result<FeatureChunk> {
    if chunk.kind != FeatureKind::LogMel {
        return Err(Error::config(format!(
            "mfcc expects log_mel input, got {}",
            chunk.kind.name()
        )));
    }
    let (t, f) = (chunk.frames(), chunk.bins());
    let scale0 = (1.0 / f as f64).sqrt();
    let scale = (2.0 / f as f64).sqrt();
    let mut values = vec![0.0; t * N_MFCC];
    for r in 0..t {
        let row = &chunk.values.data()[r * f..(r + 1) * f];
        for k in 0..N_MFCC {
            let mut acc = 0.0;
            for (n, &x) in row.iter().enumerate() {
                acc += x
                    * (std::f64::consts::PI * k as f64 * (2 * n + 1) as f64 / (2.0 * f as f64))
                        .cos();
            }
            values[r * N_MFCC + k] = acc * if k == 0 { scale0 } else { scale };
        }
    }
    Ok(FeatureChunk {
        values: Tensor::from_vec(vec![t, N_MFCC], values)?,
        kind: FeatureKind::Mfcc,
        frame_hop_seconds: chunk.frame_hop_seconds,
    })
}
