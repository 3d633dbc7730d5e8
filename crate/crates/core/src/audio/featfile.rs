//! Binary feature container.
//!
//! Layout: 12-byte magic + u32 LE version (16-byte header), u32 LE frame
//! count T, u32 LE bin count F, u8 feature-kind tag, then T·F f32 LE values
//! row-major. Normalization stats reuse the container with T=2 (row 0 mean,
//! row 1 std).

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::normalize::NormStats;
use super::{FeatureChunk, FeatureKind, FRAME_HOP_SECONDS};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 12] = b"FEATCHUNK\0\0\0";
const VERSION: u32 = 1;

pub fn write_chunk(path: &Path, chunk: &FeatureChunk) -> Result<()> {
    write_matrix(path, &chunk.values, chunk.kind)
}

pub fn read_chunk(path: &Path) -> Result<FeatureChunk> {
    let (values, kind) = read_matrix(path)?;
    Ok(FeatureChunk {
        values,
        kind,
        frame_hop_seconds: FRAME_HOP_SECONDS,
    })
}

pub fn write_stats(path: &Path, stats: &NormStats, kind: FeatureKind) -> Result<()> {
    let bins = stats.mean.len();
    let mut data = Vec::with_capacity(2 * bins);
    data.extend_from_slice(&stats.mean);
    data.extend_from_slice(&stats.std);
    let values = Tensor::from_vec(vec![2, bins], data).map_err(Error::from)?;
    write_matrix(path, &values, kind)
}

pub fn read_stats(path: &Path) -> Result<(NormStats, FeatureKind)> {
    let (values, kind) = read_matrix(path)?;
    if values.shape()[0] != 2 {
        return Err(Error::format(
            path,
            format!("stats file must have 2 rows, found {}", values.shape()[0]),
        ));
    }
    let bins = values.shape()[1];
    let data = values.data();
    Ok((
        NormStats {
            mean: data[..bins].to_vec(),
            std: data[bins..].to_vec(),
        },
        kind,
    ))
}

fn write_matrix(path: &Path, values: &Tensor, kind: FeatureKind) -> Result<()> {
    let io_err = |e| Error::io(path, e);
    let mut w = BufWriter::new(File::create(path).map_err(io_err)?);
    w.write_all(MAGIC).map_err(io_err)?;
    w.write_all(&VERSION.to_le_bytes()).map_err(io_err)?;
    let (t, f) = (values.shape()[0] as u32, values.shape()[1] as u32);
    w.write_all(&t.to_le_bytes()).map_err(io_err)?;
    w.write_all(&f.to_le_bytes()).map_err(io_err)?;
    w.write_all(&[kind.tag()]).map_err(io_err)?;
    for &v in values.data() {
        w.write_all(&(v as f32).to_le_bytes()).map_err(io_err)?;
    }
    w.flush().map_err(io_err)
}

fn read_matrix(path: &Path) -> Result<(Tensor, FeatureKind)> {
    let io_err = |e| Error::io(path, e);
    let mut r = BufReader::new(File::open(path).map_err(io_err)?);

    let mut magic = [0u8; 12];
    r.read_exact(&mut magic).map_err(io_err)?;
    if &magic != MAGIC {
        return Err(Error::format(path, "not a feature file (bad magic)"));
    }
    let version = read_u32(&mut r, path)?;
    if version != VERSION {
        return Err(Error::format(
            path,
            format!("unsupported feature file version {}", version),
        ));
    }
    let t = read_u32(&mut r, path)? as usize;
    let f = read_u32(&mut r, path)? as usize;
    if t == 0 || f == 0 || t.saturating_mul(f) > 1 << 28 {
        return Err(Error::format(path, format!("implausible dimensions {}x{}", t, f)));
    }
    let mut tag = [0u8; 1];
    r.read_exact(&mut tag).map_err(io_err)?;
    let kind = FeatureKind::from_tag(tag[0])
        .ok_or_else(|| Error::format(path, format!("unknown feature kind tag {}", tag[0])))?;

    let mut raw = vec![0u8; t * f * 4];
    r.read_exact(&mut raw).map_err(io_err)?;
    let data = raw
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
        .collect();
    Ok((Tensor::from_vec(vec![t, f], data)?, kind))
}

fn read_u32(r: &mut impl Read, path: &Path) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|e| Error::io(path, e))?;
    Ok(u32::from_le_bytes(b))
}
