//! Per-bin standardization over a feature corpus.

use super::FeatureChunk;
use crate::error::{Error, Result};

/// Floor applied to the standard deviation so constant bins map to zero
/// instead of dividing by zero.
pub const STD_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Population mean and standard deviation of each frequency bin over every
/// frame of every chunk.
pub fn compute_stats(chunks: &[FeatureChunk]) -> Result<NormStats> {
    let bins = match chunks.first() {
        Some(c) => c.bins(),
        None => return Err(Error::config("cannot compute stats over zero chunks")),
    };
    let mut sum = vec![0.0; bins];
    let mut sum_sq = vec![0.0; bins];
    let mut frames = 0usize;
    for chunk in chunks {
        if chunk.bins() != bins {
            return Err(Error::config(format!(
                "stats over mixed widths: {} vs {}",
                bins,
                chunk.bins()
            )));
        }
        for row in chunk.values.data().chunks_exact(bins) {
            for (b, &v) in row.iter().enumerate() {
                sum[b] += v;
                sum_sq[b] += v * v;
            }
        }
        frames += chunk.frames();
    }
    let n = frames as f64;
    let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
    let std = sum_sq
        .iter()
        .zip(&mean)
        .map(|(sq, m)| (sq / n - m * m).max(0.0).sqrt())
        .collect();
    Ok(NormStats { mean, std })
}

/// Standardize a chunk in place: `(x - mean) / max(std, STD_FLOOR)` per bin.
pub fn apply(chunk: &mut FeatureChunk, stats: &NormStats) -> Result<()> {
    let bins = chunk.bins();
    if stats.mean.len() != bins || stats.std.len() != bins {
        return Err(Error::config(format!(
            "normalization stats have {} bins, chunk has {}",
            stats.mean.len(),
            bins
        )));
    }
    for row in chunk.values.data_mut().chunks_exact_mut(bins) {
        for (b, v) in row.iter_mut().enumerate() {
            *v = (*v - stats.mean[b]) / stats.std[b].max(STD_FLOOR);
        }
    }
    Ok(())
}
