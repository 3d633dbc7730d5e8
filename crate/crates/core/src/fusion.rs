//! Two-level posterior fusion: across the last checkpoints of one run, and
//! across independently trained systems. Both are plain arithmetic means of
//! clip posteriors, so fusing identical inputs is the identity and input
//! order never matters. Fused rows are sorted by clip id.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::audio::normalize;
use crate::audio::FeatureChunk;
use crate::checkpoint::load_checkpoint;
use crate::error::{Error, Result};
use crate::model::{forward, ClipPooling};
use crate::parallel;

/// How many trailing checkpoints enter epoch fusion by default.
pub const DEFAULT_FUSE_K: usize = 5;

/// Clip posteriors as (clip_id, per-class probability) rows.
pub type Posteriors = Vec<(String, Vec<f64>)>;

/// Average clip posteriors over the last `k` checkpoints of one run.
/// Checkpoints must share architecture and feature kind; chunks are raw
/// (unnormalized) features, standardized with each checkpoint's own stats.
pub fn fuse_epochs(
    paths: &[PathBuf],
    clips: &[(String, FeatureChunk)],
    pooling: ClipPooling,
    k: usize,
) -> Result<Posteriors> {
    if k == 0 {
        return Err(Error::config("epoch fusion needs k >= 1"));
    }
    if paths.is_empty() {
        return Err(Error::config("epoch fusion needs at least one checkpoint"));
    }
    let picked = &paths[paths.len().saturating_sub(k)..];
    let mut sums: Vec<Vec<f64>> = Vec::new();
    let mut reference: Option<(crate::model::ModelConfig, crate::audio::FeatureKind)> = None;
    for path in picked {
        let ckpt = load_checkpoint(path)?;
        match &reference {
            None => reference = Some((ckpt.params.config, ckpt.feature_kind)),
            Some((cfg, kind)) => {
                if ckpt.params.config != *cfg || ckpt.feature_kind != *kind {
                    return Err(Error::incompatible(format!(
                        "checkpoint {} does not match the first checkpoint's architecture \
                         or feature kind",
                        path.display()
                    )));
                }
            }
        }
        let posts = parallel::try_map(clips, |(id, chunk)| {
            if chunk.kind != ckpt.feature_kind {
                return Err(Error::incompatible(format!(
                    "clip {} has {} features, checkpoint expects {}",
                    id,
                    chunk.kind.name(),
                    ckpt.feature_kind.name()
                )));
            }
            let mut c = chunk.clone();
            normalize::apply(&mut c, &ckpt.norm)?;
            Ok(forward(&c, &ckpt.params, pooling)?.clip.into_data())
        })?;
        for (i, post) in posts.into_iter().enumerate() {
            match sums.get_mut(i) {
                Some(sum) => {
                    for (s, p) in sum.iter_mut().zip(post) {
                        *s += p;
                    }
                }
                None => sums.push(post),
            }
        }
    }
    let n = picked.len() as f64;
    let mut rows: Posteriors = clips
        .iter()
        .zip(sums)
        .map(|((id, _), sum)| (id.clone(), sum.iter().map(|s| s / n).collect()))
        .collect();
    rows.sort_by(|a, b| a.0.cmp(&b.0));
    Ok(rows)
}

/// Elementwise mean of per-clip posteriors across systems. All systems must
/// cover the same clips with the same class count.
pub fn fuse_systems(systems: &[Posteriors]) -> Result<Posteriors> {
    let first = systems
        .first()
        .ok_or_else(|| Error::config("system fusion needs at least one input"))?;
    let mut acc: BTreeMap<&str, Vec<f64>> = first
        .iter()
        .map(|(id, p)| (id.as_str(), p.clone()))
        .collect();
    if acc.len() != first.len() {
        return Err(Error::incompatible("duplicate clip_id in posteriors"));
    }
    for system in &systems[1..] {
        let mut unmatched: Vec<&str> = Vec::new();
        let mut seen = 0usize;
        for (id, p) in system {
            match acc.get_mut(id.as_str()) {
                Some(sum) => {
                    if sum.len() != p.len() {
                        return Err(Error::incompatible(format!(
                            "clip {}: {} classes vs {}",
                            id,
                            p.len(),
                            sum.len()
                        )));
                    }
                    for (s, &v) in sum.iter_mut().zip(p) {
                        *s += v;
                    }
                    seen += 1;
                }
                None => unmatched.push(id),
            }
        }
        if !unmatched.is_empty() || seen != acc.len() {
            let ids: Vec<&str> = system.iter().map(|(id, _)| id.as_str()).collect();
            let missing: Vec<&&str> = acc
                .keys()
                .filter(|k| !ids.contains(*k))
                .collect();
            return Err(Error::incompatible(format!(
                "posterior clip sets differ: extra {:?}, missing {:?}",
                unmatched, missing
            )));
        }
    }
    let n = systems.len() as f64;
    Ok(acc
        .into_iter()
        .map(|(id, sum)| (id.to_string(), sum.iter().map(|s| s / n).collect()))
        .collect())
}

/// Write posterior rows as CSV `clip_id,p_0,...,p_{C-1}` with 6-decimal
/// probabilities.
pub fn write_posteriors(path: &Path, rows: &[(String, Vec<f64>)]) -> Result<()> {
    let classes = rows.first().map_or(0, |(_, p)| p.len());
    let mut text = String::from("clip_id");
    for c in 0..classes {
        write!(text, ",p_{}", c).expect("string write");
    }
    text.push('\n');
    for (id, probs) in rows {
        text.push_str(id);
        for p in probs {
            write!(text, ",{:.6}", p).expect("string write");
        }
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Read a posterior CSV back; all probabilities must lie in [0, 1] and all
/// rows must agree on the class count.
pub fn read_posteriors(path: &Path) -> Result<Posteriors> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let fail = |line: usize, reason: String| Error::Manifest {
        path: path.to_path_buf(),
        line,
        reason,
    };
    let mut rows: Posteriors = Vec::new();
    let mut classes: Option<usize> = None;
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.trim();
        if line.is_empty() || (idx == 0 && line.starts_with("clip_id")) {
            continue;
        }
        let mut fields = line.split(',');
        let id = fields.next().unwrap_or("").to_string();
        if id.is_empty() {
            return Err(fail(line_no, "missing clip_id".into()));
        }
        let probs: Vec<f64> = fields
            .map(|f| {
                f.parse::<f64>()
                    .ok()
                    .filter(|p| (0.0..=1.0).contains(p))
                    .ok_or_else(|| fail(line_no, format!("bad probability {}", f)))
            })
            .collect::<Result<_>>()?;
        if probs.is_empty() {
            return Err(fail(line_no, "row has no probabilities".into()));
        }
        match classes {
            None => classes = Some(probs.len()),
            Some(c) if c != probs.len() => {
                return Err(fail(
                    line_no,
                    format!("row has {} classes, file started with {}", probs.len(), c),
                ))
            }
            _ => {}
        }
        if rows.iter().any(|(existing, _)| *existing == id) {
            return Err(fail(line_no, format!("duplicate clip_id {}", id)));
        }
        rows.push((id, probs));
    }
    Ok(rows)
}
