//! Model checkpoints: a binary container of named f32 tensors.
//!
//! Layout: 12-byte magic, u32 version, u64 config hash, u8 flags (bit 0 =
//! optimizer state present), u32 tensor count, then each tensor as
//! (u32 name length, name bytes, u32 rank, u32 dims…, f32 data), all
//! little-endian. The model config rides along as `config.*` scalar
//! pseudo-tensors (parameter shapes alone cannot distinguish tagging from
//! sed — both pool frequency 64 → 8), and normalization stats as
//! `norm.mean` / `norm.std` / `norm.kind`, so a checkpoint is
//! self-contained for inference. When optimizer state is present it
//! follows as (u64 step, 4×f64 hyperparameters, u32 count, tensors named
//! `opt.m.*` / `opt.v.*`).
//!
//! The loader recomputes the config hash from the embedded fields and
//! rejects the file on mismatch.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::adam::{AdamConfig, AdamState};
use crate::audio::normalize::NormStats;
use crate::audio::FeatureKind;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams, TaskMode};
use crate::tensor::Tensor;

const MAGIC: &[u8; 12] = b"WSEDCKPT\0\0\0\0";
const VERSION: u32 = 1;
const FLAG_ADAM: u8 = 1;
/// Sanity cap on tensor element counts while reading.
const MAX_NUMEL: usize = 1 << 28;

#[derive(Debug)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub norm: NormStats,
    pub feature_kind: FeatureKind,
    pub adam: Option<AdamState>,
}

const CONFIG_FIELDS: [&str; 8] = [
    "config.frames",
    "config.bins",
    "config.classes",
    "config.filters",
    "config.kernel",
    "config.blocks",
    "config.hidden",
    "config.mode",
];

fn config_values(config: &ModelConfig) -> [f64; 8] {
    [
        config.frames as f64,
        config.bins as f64,
        config.classes as f64,
        config.filters as f64,
        config.kernel as f64,
        config.blocks as f64,
        config.hidden as f64,
        match config.mode {
            TaskMode::Tagging => 0.0,
            TaskMode::Sed => 1.0,
        },
    ]
}

pub fn save_checkpoint(
    path: &Path,
    params: &ModelParams,
    norm: &NormStats,
    feature_kind: FeatureKind,
    adam: Option<&AdamState>,
) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let werr = |e: std::io::Error| Error::io(path, e);

    w.write_all(MAGIC).map_err(werr)?;
    w.write_all(&VERSION.to_le_bytes()).map_err(werr)?;
    w.write_all(&params.config.config_hash().to_le_bytes())
        .map_err(werr)?;
    let flags = if adam.is_some() { FLAG_ADAM } else { 0 };
    w.write_all(&[flags]).map_err(werr)?;

    let named = params.named();
    let count = CONFIG_FIELDS.len() + 3 + named.len();
    w.write_all(&(count as u32).to_le_bytes()).map_err(werr)?;

    for (name, value) in CONFIG_FIELDS.iter().zip(config_values(&params.config)) {
        write_tensor(&mut w, path, name, &[1], &[value])?;
    }
    write_tensor(&mut w, path, "norm.mean", &[norm.mean.len()], &norm.mean)?;
    write_tensor(&mut w, path, "norm.std", &[norm.std.len()], &norm.std)?;
    write_tensor(&mut w, path, "norm.kind", &[1], &[feature_kind.tag() as f64])?;
    for (name, t) in &named {
        write_tensor(&mut w, path, name, t.shape(), t.data())?;
    }

    if let Some(state) = adam {
        let cfg = state.config();
        w.write_all(&state.step_count().to_le_bytes()).map_err(werr)?;
        for v in [cfg.lr, cfg.beta1, cfg.beta2, cfg.eps] {
            w.write_all(&v.to_le_bytes()).map_err(werr)?;
        }
        let moments: Vec<_> = state.moments().collect();
        w.write_all(&(2 * moments.len() as u32).to_le_bytes())
            .map_err(werr)?;
        for (name, m, v) in moments {
            write_tensor(&mut w, path, &format!("opt.m.{}", name), &[m.len()], m)?;
            write_tensor(&mut w, path, &format!("opt.v.{}", name), &[v.len()], v)?;
        }
    }
    w.flush().map_err(werr)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);

    let mut magic = [0u8; 12];
    read_exact(&mut r, &mut magic, path, "magic")?;
    if &magic != MAGIC {
        return Err(Error::format(path, "not a checkpoint file"));
    }
    let version = read_u32(&mut r, path, "version")?;
    if version != VERSION {
        return Err(Error::format(
            path,
            format!("unsupported checkpoint version {}", version),
        ));
    }
    let stored_hash = read_u64(&mut r, path, "config hash")?;
    let mut flags = [0u8; 1];
    read_exact(&mut r, &mut flags, path, "flags")?;
    let count = read_u32(&mut r, path, "tensor count")? as usize;

    let mut tensors = BTreeMap::new();
    for _ in 0..count {
        let (name, t) = read_tensor(&mut r, path)?;
        if tensors.insert(name.clone(), t).is_some() {
            return Err(Error::format(path, format!("duplicate tensor {}", name)));
        }
    }

    let mut scalar = |name: &str| -> Result<f64> {
        let t = tensors
            .remove(name)
            .ok_or_else(|| Error::format(path, format!("missing {}", name)))?;
        if t.numel() != 1 {
            return Err(Error::format(path, format!("{} is not a scalar", name)));
        }
        Ok(t.data()[0])
    };
    let as_count = |name: &str, v: f64| -> Result<usize> {
        if v.fract() != 0.0 || !(0.0..=1e9).contains(&v) {
            return Err(Error::format(path, format!("bad value for {}: {}", name, v)));
        }
        Ok(v as usize)
    };

    let mut raw = [0.0; 8];
    for (slot, name) in raw.iter_mut().zip(CONFIG_FIELDS) {
        *slot = scalar(name)?;
    }
    let mode = match raw[7] {
        v if v == 0.0 => TaskMode::Tagging,
        v if v == 1.0 => TaskMode::Sed,
        v => return Err(Error::format(path, format!("bad task mode tag {}", v))),
    };
    let config = ModelConfig {
        frames: as_count("config.frames", raw[0])?,
        bins: as_count("config.bins", raw[1])?,
        classes: as_count("config.classes", raw[2])?,
        filters: as_count("config.filters", raw[3])?,
        kernel: as_count("config.kernel", raw[4])?,
        blocks: as_count("config.blocks", raw[5])?,
        hidden: as_count("config.hidden", raw[6])?,
        mode,
    };
    if config.config_hash() != stored_hash {
        return Err(Error::incompatible(format!(
            "checkpoint {} config hash does not match its stored fields",
            path.display()
        )));
    }
    config.validate()?;

    let kind_tag = scalar("norm.kind")?;
    let feature_kind = FeatureKind::from_tag(kind_tag as u8)
        .filter(|_| kind_tag.fract() == 0.0)
        .ok_or_else(|| Error::format(path, format!("bad feature kind tag {}", kind_tag)))?;
    let mut norm_vec = |name: &str| -> Result<Vec<f64>> {
        let t = tensors
            .remove(name)
            .ok_or_else(|| Error::format(path, format!("missing {}", name)))?;
        if t.numel() != config.bins {
            return Err(Error::format(
                path,
                format!("{} has {} values, expected {}", name, t.numel(), config.bins),
            ));
        }
        Ok(t.into_data())
    };
    let norm = NormStats {
        mean: norm_vec("norm.mean")?,
        std: norm_vec("norm.std")?,
    };

    let mut moment_names: Vec<String> = Vec::new();
    let mut param_tensors = BTreeMap::new();
    for (name, t) in tensors {
        if name.starts_with("opt.") {
            moment_names.push(name);
            continue;
        }
        param_tensors.insert(name, t);
    }
    if !moment_names.is_empty() {
        // Optimizer tensors live after the header section, not inside it.
        return Err(Error::format(
            path,
            format!("unexpected tensor {}", moment_names[0]),
        ));
    }
    let params = ModelParams::from_named(config, param_tensors)?;

    let adam = if flags[0] & FLAG_ADAM != 0 {
        let step = read_u64(&mut r, path, "optimizer step")?;
        let mut hyper = [0.0f64; 4];
        for h in &mut hyper {
            let mut buf = [0u8; 8];
            read_exact(&mut r, &mut buf, path, "optimizer hyperparameter")?;
            *h = f64::from_le_bytes(buf);
        }
        let cfg = AdamConfig {
            lr: hyper[0],
            beta1: hyper[1],
            beta2: hyper[2],
            eps: hyper[3],
        };
        let mcount = read_u32(&mut r, path, "moment count")? as usize;
        let mut m_by_name: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        let mut v_by_name: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        let numel_of: BTreeMap<String, usize> = params
            .named()
            .into_iter()
            .map(|(n, t)| (n, t.numel()))
            .collect();
        for _ in 0..mcount {
            let (name, t) = read_tensor(&mut r, path)?;
            let (dest, param) = if let Some(p) = name.strip_prefix("opt.m.") {
                (&mut m_by_name, p.to_string())
            } else if let Some(p) = name.strip_prefix("opt.v.") {
                (&mut v_by_name, p.to_string())
            } else {
                return Err(Error::format(path, format!("bad moment name {}", name)));
            };
            match numel_of.get(param.as_str()) {
                Some(&n) if n == t.numel() => {}
                _ => {
                    return Err(Error::format(
                        path,
                        format!("moment {} does not match any parameter", name),
                    ))
                }
            }
            dest.insert(param, t.into_data());
        }
        let m_names: Vec<&String> = m_by_name.keys().collect();
        let v_names: Vec<&String> = v_by_name.keys().collect();
        if m_names != v_names {
            return Err(Error::format(path, "unpaired optimizer moments"));
        }
        let moments: Vec<(String, Vec<f64>, Vec<f64>)> = m_by_name
            .into_iter()
            .map(|(name, m)| {
                let v = v_by_name.remove(&name).unwrap();
                (name, m, v)
            })
            .collect();
        Some(AdamState::from_parts(cfg, step, moments))
    } else {
        None
    };

    Ok(Checkpoint {
        params,
        norm,
        feature_kind,
        adam,
    })
}

fn write_tensor(
    w: &mut impl Write,
    path: &Path,
    name: &str,
    shape: &[usize],
    data: &[f64],
) -> Result<()> {
    let werr = |e: std::io::Error| Error::io(path, e);
    w.write_all(&(name.len() as u32).to_le_bytes()).map_err(werr)?;
    w.write_all(name.as_bytes()).map_err(werr)?;
    w.write_all(&(shape.len() as u32).to_le_bytes()).map_err(werr)?;
    for &d in shape {
        w.write_all(&(d as u32).to_le_bytes()).map_err(werr)?;
    }
    for &v in data {
        w.write_all(&(v as f32).to_le_bytes()).map_err(werr)?;
    }
    Ok(())
}

fn read_tensor(r: &mut impl Read, path: &Path) -> Result<(String, Tensor)> {
    let name_len = read_u32(r, path, "tensor name length")? as usize;
    if name_len == 0 || name_len > 4096 {
        return Err(Error::format(
            path,
            format!("implausible tensor name length {}", name_len),
        ));
    }
    let mut name_buf = vec![0u8; name_len];
    read_exact(r, &mut name_buf, path, "tensor name")?;
    let name = String::from_utf8(name_buf)
        .map_err(|_| Error::format(path, "tensor name is not UTF-8"))?;

    let rank = read_u32(r, path, "tensor rank")? as usize;
    if rank == 0 || rank > 8 {
        return Err(Error::format(
            path,
            format!("implausible rank {} for {}", rank, name),
        ));
    }
    let mut shape = Vec::with_capacity(rank);
    let mut numel = 1usize;
    for _ in 0..rank {
        let d = read_u32(r, path, "tensor dimension")? as usize;
        numel = numel.saturating_mul(d);
        shape.push(d);
    }
    if numel == 0 || numel > MAX_NUMEL {
        return Err(Error::format(
            path,
            format!("implausible shape {:?} for {}", shape, name),
        ));
    }
    let mut data = Vec::with_capacity(numel);
    let mut buf = [0u8; 4];
    for _ in 0..numel {
        read_exact(r, &mut buf, path, "tensor data")?;
        data.push(f32::from_le_bytes(buf) as f64);
    }
    let t = Tensor::from_vec(shape, data).map_err(Error::Tensor)?;
    Ok((name, t))
}

fn read_exact(r: &mut impl Read, buf: &mut [u8], path: &Path, what: &str) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| Error::format(path, format!("truncated while reading {}", what)))
}

fn read_u32(r: &mut impl Read, path: &Path, what: &str) -> Result<u32> {
    let mut buf = [0u8; 4];
    read_exact(r, &mut buf, path, what)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_u64(r: &mut impl Read, path: &Path, what: &str) -> Result<u64> {
    let mut buf = [0u8; 8];
    read_exact(r, &mut buf, path, what)?;
    Ok(u64::from_le_bytes(buf))
}
