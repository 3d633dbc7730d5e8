//! Weakly-labelled corpus loading and batch sampling.
//!
//! A corpus is a CSV manifest `clip_id,feature_path,label1;label2;...`
//! plus a label-map file (one class name per line, line number = class id).
//! Clip labels are weak: presence/absence per class, no time stamps.
//!
//! The balanced sampler counters class skew by drawing, for each batch
//! slot, first a class uniformly among non-empty classes and then a clip
//! uniformly from that class's pool, with replacement. Expected per-class
//! frequency is uniform regardless of pool sizes. The unbalanced epoch
//! permutation exists as the ablation control.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Ordered class names; position is the class id.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    names: Vec<String>,
}

impl LabelMap {
    pub fn from_names(names: Vec<String>) -> Result<Self> {
        if names.is_empty() {
            return Err(Error::config("label map needs at least one class"));
        }
        for (i, name) in names.iter().enumerate() {
            if name.is_empty() {
                return Err(Error::config("empty class name in label map"));
            }
            if names[..i].contains(name) {
                return Err(Error::config(format!("duplicate class name {}", name)));
            }
        }
        Ok(Self { names })
    }

    /// One class name per line; blank lines are ignored.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let names: Vec<String> = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(String::from)
            .collect();
        Self::from_names(names).map_err(|e| Error::format(path, e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = self.names.join("\n");
        text.push('\n');
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn name(&self, id: usize) -> &str {
        &self.names[id]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }
}

/// One manifest row: a feature file plus its multi-hot weak labels.
#[derive(Debug, Clone, PartialEq)]
pub struct ClipRecord {
    pub clip_id: String,
    pub feature_path: PathBuf,
    /// Multi-hot, length C, entries 0.0 or 1.0.
    pub labels: Vec<f64>,
}

impl ClipRecord {
    pub fn label_tensor(&self) -> Tensor {
        Tensor::from_vec(vec![self.labels.len()], self.labels.clone()).unwrap()
    }

    pub fn positive_classes(&self) -> impl Iterator<Item = usize> + '_ {
        self.labels
            .iter()
            .enumerate()
            .filter(|(_, &v)| v == 1.0)
            .map(|(c, _)| c)
    }
}

/// Parse a manifest. Relative feature paths resolve against the manifest's
/// directory. With `require_labels`, every clip must carry at least one
/// label (training and evaluation); without, the label field may be empty
/// (inference on unlabelled clips). With `check_features`, every feature
/// path must exist on disk; without, the manifest serves as a pure label
/// reference (scoring predictions against it).
pub fn load_corpus(
    manifest: &Path,
    labels: &LabelMap,
    require_labels: bool,
    check_features: bool,
) -> Result<Vec<ClipRecord>> {
    let text = std::fs::read_to_string(manifest).map_err(|e| Error::io(manifest, e))?;
    let base = manifest.parent().unwrap_or_else(|| Path::new(""));
    let fail = |line: usize, reason: String| Error::Manifest {
        path: manifest.to_path_buf(),
        line,
        reason,
    };

    let mut records: Vec<ClipRecord> = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        let mut fields = line.splitn(3, ',');
        let clip_id = fields.next().unwrap_or("").trim();
        let feature = fields.next().map(str::trim);
        let label_field = fields.next().map(str::trim);
        let (feature, label_field) = match (feature, label_field) {
            (Some(f), Some(l)) => (f, l),
            _ => {
                return Err(fail(
                    line_no,
                    "expected clip_id,feature_path,labels".into(),
                ))
            }
        };
        if clip_id.is_empty() {
            return Err(fail(line_no, "empty clip_id".into()));
        }
        if records.iter().any(|r| r.clip_id == clip_id) {
            return Err(fail(line_no, format!("duplicate clip_id {}", clip_id)));
        }
        let feature_path = if Path::new(feature).is_absolute() {
            PathBuf::from(feature)
        } else {
            base.join(feature)
        };
        if check_features && !feature_path.is_file() {
            return Err(fail(
                line_no,
                format!("feature file {} does not exist", feature_path.display()),
            ));
        }

        let mut multi_hot = vec![0.0; labels.len()];
        let mut any = false;
        for name in label_field.split(';').map(str::trim).filter(|s| !s.is_empty()) {
            let id = labels
                .id(name)
                .ok_or_else(|| fail(line_no, format!("unknown label {}", name)))?;
            multi_hot[id] = 1.0;
            any = true;
        }
        if require_labels && !any {
            return Err(fail(line_no, format!("clip {} has no labels", clip_id)));
        }

        records.push(ClipRecord {
            clip_id: clip_id.to_string(),
            feature_path,
            labels: multi_hot,
        });
    }
    if records.is_empty() {
        return Err(fail(0, "manifest contains no clips".into()));
    }
    Ok(records)
}

/// Class-balanced batch sampler: uniform over non-empty classes, then
/// uniform over that class's clips, with replacement. Multi-label clips
/// sit in every positive class's pool.
#[derive(Debug, Clone)]
pub struct BalancedSampler {
    /// (class id, clip indices) for classes with at least one clip.
    pools: Vec<(usize, Vec<usize>)>,
    batch_size: usize,
    rng: ChaCha8Rng,
}

impl BalancedSampler {
    pub fn new(corpus: &[ClipRecord], classes: usize, batch_size: usize, seed: u64) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::config("cannot sample from an empty corpus"));
        }
        if batch_size == 0 {
            return Err(Error::config("batch size must be at least 1"));
        }
        let mut pools = Vec::new();
        for c in 0..classes {
            let pool: Vec<usize> = corpus
                .iter()
                .enumerate()
                .filter(|(_, r)| r.labels.get(c) == Some(&1.0))
                .map(|(i, _)| i)
                .collect();
            if !pool.is_empty() {
                pools.push((c, pool));
            }
        }
        if pools.is_empty() {
            return Err(Error::config("no clip carries any label"));
        }
        Ok(Self {
            pools,
            batch_size,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    /// Clips per class pool, indexed by class id (0 for empty classes).
    pub fn pool_sizes(&self, classes: usize) -> Vec<usize> {
        let mut sizes = vec![0; classes];
        for (c, pool) in &self.pools {
            sizes[*c] = pool.len();
        }
        sizes
    }

    /// Draw the next batch of clip indices.
    pub fn next_batch(&mut self) -> Vec<usize> {
        (0..self.batch_size)
            .map(|_| {
                let (_, pool) = &self.pools[self.rng.gen_range(0..self.pools.len())];
                pool[self.rng.gen_range(0..pool.len())]
            })
            .collect()
    }
}

/// One shuffled pass over the corpus (the no-balancing control). The epoch
/// index selects a distinct RNG stream so consecutive epochs get different
/// permutations while staying reproducible.
pub fn unbalanced_epoch(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}
