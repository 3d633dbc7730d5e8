//! Tag binarization, event extraction from frame tracks, and DCASE-style
//! scoring for both sub-tasks.
//!
//! Tagging is micro-averaged over every (clip, class) decision. Detection
//! is segment-based: both event lists are discretized onto fixed-length
//! segments (1 s default) and each segment contributes substitutions
//! S = min(FN, FP), deletions D = max(0, FN−FP) and insertions
//! I = max(0, FP−FN) toward ER = (ΣS+ΣD+ΣI)/ΣN, with micro F1 from the
//! same segment counts. Zero-denominator scores are defined as 0 so every
//! report is total; "probability ≥ θ" counts as active.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::dataset::LabelMap;
use crate::error::{Error, Result};
use crate::model::FramePosteriors;
use crate::tensor::Tensor;

/// Binarized clip-level decision.
#[derive(Debug, Clone, PartialEq)]
pub struct TagPrediction {
    pub clip_id: String,
    pub posterior: Vec<f64>,
    pub active: Vec<bool>,
}

/// Threshold a clip posterior; `θ ∈ (0,1)`, active iff posterior ≥ θ.
pub fn tag_clip(clip_id: impl Into<String>, posterior: &[f64], theta: f64) -> Result<TagPrediction> {
    if !(theta > 0.0 && theta < 1.0) {
        return Err(Error::config(format!(
            "threshold must lie strictly between 0 and 1, got {}",
            theta
        )));
    }
    debug_assert!(posterior.iter().all(|p| (0.0..=1.0).contains(p)));
    Ok(TagPrediction {
        clip_id: clip_id.into(),
        posterior: posterior.to_vec(),
        active: posterior.iter().map(|&p| p >= theta).collect(),
    })
}

/// One detected or reference event, in seconds.
#[derive(Debug, Clone, PartialEq)]
pub struct EventInterval {
    pub class: usize,
    pub onset: f64,
    pub offset: f64,
}

/// All events of one clip.
#[derive(Debug, Clone, PartialEq)]
pub struct ClipEvents {
    pub clip_id: String,
    pub events: Vec<EventInterval>,
}

/// Binarization and morphology settings for event extraction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PostProcess {
    pub theta: f64,
    pub median_win: usize,
    pub min_dur_s: f64,
    pub merge_gap_s: f64,
}

impl Default for PostProcess {
    fn default() -> Self {
        Self {
            theta: 0.5,
            median_win: 11,
            min_dur_s: 0.2,
            merge_gap_s: 0.2,
        }
    }
}

impl PostProcess {
    fn validate(&self) -> Result<()> {
        if !(self.theta > 0.0 && self.theta < 1.0) {
            return Err(Error::config(format!("bad threshold {}", self.theta)));
        }
        if self.median_win % 2 == 0 || self.median_win == 0 {
            return Err(Error::config(format!(
                "median window must be odd, got {}",
                self.median_win
            )));
        }
        if self.min_dur_s < 0.0 || self.merge_gap_s < 0.0 {
            return Err(Error::config("durations must be non-negative"));
        }
        Ok(())
    }
}

fn binarize(track: &Tensor, class: usize, theta: f64) -> Vec<bool> {
    let (t_len, classes) = (track.shape()[0], track.shape()[1]);
    (0..t_len)
        .map(|t| track.data()[t * classes + class] >= theta)
        .collect()
}

/// Majority vote over a centered window, truncated at the edges; ties
/// (possible only in truncated windows) vote inactive.
fn median_filter(bits: &[bool], win: usize) -> Vec<bool> {
    let half = win / 2;
    let n = bits.len();
    (0..n)
        .map(|t| {
            let lo = t.saturating_sub(half);
            let hi = (t + half + 1).min(n);
            let count = bits[lo..hi].iter().filter(|&&b| b).count();
            2 * count > hi - lo
        })
        .collect()
}

/// Maximal true runs as [start, end) frame ranges.
fn runs(bits: &[bool]) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut start = None;
    for (t, &b) in bits.iter().enumerate() {
        match (b, start) {
            (true, None) => start = Some(t),
            (false, Some(s)) => {
                out.push((s, t));
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = start {
        out.push((s, bits.len()));
    }
    out
}

/// Turn one frame track [T', C] into per-class event intervals: binarize
/// at θ, median-filter, drop runs shorter than `min_dur_s`, merge runs
/// separated by less than `merge_gap_s`, convert frames to seconds.
/// Output is grouped by class, onsets ascending and disjoint within each.
pub fn extract_events(
    track: &Tensor,
    frame_hop_s: f64,
    pp: &PostProcess,
) -> Result<Vec<EventInterval>> {
    pp.validate()?;
    if track.rank() != 2 {
        return Err(Error::config(format!(
            "event track must be [frames, classes], got {:?}",
            track.shape()
        )));
    }
    if frame_hop_s <= 0.0 {
        return Err(Error::config("frame hop must be positive"));
    }
    let classes = track.shape()[1];
    let mut events = Vec::new();
    for k in 0..classes {
        let bits = median_filter(&binarize(track, k, pp.theta), pp.median_win);
        let mut kept: Vec<(f64, f64)> = Vec::new();
        for (s, e) in runs(&bits) {
            let (onset, offset) = (s as f64 * frame_hop_s, e as f64 * frame_hop_s);
            if offset - onset < pp.min_dur_s {
                continue;
            }
            match kept.last_mut() {
                Some((_, prev_off)) if onset - *prev_off < pp.merge_gap_s => *prev_off = offset,
                _ => kept.push((onset, offset)),
            }
        }
        events.extend(kept.into_iter().map(|(onset, offset)| EventInterval {
            class: k,
            onset,
            offset,
        }));
    }
    Ok(events)
}

/// Micro-averaged tagging scores on the 0–100 scale.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TagScores {
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
    pub true_pos: usize,
    pub false_pos: usize,
    pub false_neg: usize,
}

impl TagScores {
    pub fn report_lines(&self) -> Vec<String> {
        vec![
            "task=tagging".into(),
            format!("f1={:.2}", self.f1),
            format!("precision={:.2}", self.precision),
            format!("recall={:.2}", self.recall),
            format!("tp={}", self.true_pos),
            format!("fp={}", self.false_pos),
            format!("fn={}", self.false_neg),
        ]
    }
}

fn prf(tp: usize, fp: usize, fn_: usize) -> (f64, f64, f64) {
    let div = |num: f64, den: f64| if den > 0.0 { num / den } else { 0.0 };
    let p = div(tp as f64, (tp + fp) as f64);
    let r = div(tp as f64, (tp + fn_) as f64);
    let f1 = div(2.0 * p * r, p + r);
    (100.0 * p, 100.0 * r, 100.0 * f1)
}

/// Score binarized tags against reference tag sets. Both sides must cover
/// exactly the same clips.
pub fn score_tagging(preds: &[TagPrediction], refs: &[(String, Vec<bool>)]) -> Result<TagScores> {
    let ref_map: BTreeMap<&str, &Vec<bool>> =
        refs.iter().map(|(id, v)| (id.as_str(), v)).collect();
    if ref_map.len() != refs.len() {
        return Err(Error::incompatible("duplicate clip_id in references"));
    }
    let mut missing: Vec<&str> = Vec::new();
    let mut seen: Vec<&str> = Vec::new();
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    for pred in preds {
        let Some(r) = ref_map.get(pred.clip_id.as_str()) else {
            missing.push(&pred.clip_id);
            continue;
        };
        seen.push(&pred.clip_id);
        if r.len() != pred.active.len() {
            return Err(Error::incompatible(format!(
                "clip {}: {} predicted classes vs {} reference classes",
                pred.clip_id,
                pred.active.len(),
                r.len()
            )));
        }
        for (&p, &t) in pred.active.iter().zip(r.iter()) {
            match (p, t) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                (false, false) => {}
            }
        }
    }
    if !missing.is_empty() || seen.len() != ref_map.len() {
        let extras: Vec<&str> = ref_map
            .keys()
            .filter(|k| !seen.contains(*k))
            .copied()
            .collect();
        return Err(Error::incompatible(format!(
            "clip sets differ: only in predictions {:?}, only in references {:?}",
            missing, extras
        )));
    }
    let (precision, recall, f1) = prf(tp, fp, fn_);
    Ok(TagScores {
        f1,
        precision,
        recall,
        true_pos: tp,
        false_pos: fp,
        false_neg: fn_,
    })
}

/// Segment-based detection scores on the 0–100 scale (ER is a plain rate).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SedScores {
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
    pub er: f64,
    pub substitutions: usize,
    pub deletions: usize,
    pub insertions: usize,
    pub ref_segments: usize,
}

impl SedScores {
    pub fn report_lines(&self) -> Vec<String> {
        vec![
            "task=sed".into(),
            format!("f1={:.2}", self.f1),
            format!("er={:.4}", self.er),
            format!("precision={:.2}", self.precision),
            format!("recall={:.2}", self.recall),
            format!("s={}", self.substitutions),
            format!("d={}", self.deletions),
            format!("i={}", self.insertions),
            format!("n={}", self.ref_segments),
        ]
    }
}

/// Active classes of one clip per segment index.
fn segment_activity(events: &[EventInterval], segment_s: f64, nseg: usize) -> Vec<Vec<bool>> {
    let classes = events.iter().map(|e| e.class + 1).max().unwrap_or(0);
    let mut grid = vec![vec![false; classes]; nseg];
    for e in events {
        let first = (e.onset / segment_s).floor() as usize;
        for (i, row) in grid.iter_mut().enumerate().skip(first) {
            let (lo, hi) = (i as f64 * segment_s, (i + 1) as f64 * segment_s);
            if e.onset < hi && e.offset > lo {
                row[e.class] = true;
            } else if e.offset <= lo {
                break;
            }
        }
    }
    grid
}

/// Score predicted events against reference events on fixed segments.
/// Clips appear in either list only if they have events; the clip universe
/// is the union of both. With no reference activity at all, ER and F1 are
/// 0 by the zero-denominator convention.
pub fn score_sed(
    preds: &[ClipEvents],
    refs: &[ClipEvents],
    segment_s: f64,
) -> Result<SedScores> {
    if segment_s <= 0.0 {
        return Err(Error::config(format!(
            "segment length must be positive, got {}",
            segment_s
        )));
    }
    let mut clips: BTreeMap<&str, (&[EventInterval], &[EventInterval])> = BTreeMap::new();
    for p in preds {
        let slot = clips.entry(&p.clip_id).or_insert((&[], &[]));
        slot.0 = &p.events;
    }
    for r in refs {
        let slot = clips.entry(&r.clip_id).or_insert((&[], &[]));
        slot.1 = &r.events;
    }

    let (mut s, mut d, mut i_) = (0usize, 0usize, 0usize);
    let (mut n, mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize, 0usize);
    for (_, (pev, rev)) in clips {
        let horizon = pev
            .iter()
            .chain(rev.iter())
            .map(|e| e.offset)
            .fold(0.0f64, f64::max);
        let nseg = (horizon / segment_s).ceil() as usize;
        let pact = segment_activity(pev, segment_s, nseg);
        let ract = segment_activity(rev, segment_s, nseg);
        for seg in 0..nseg {
            let empty = Vec::new();
            let p = pact.get(seg).unwrap_or(&empty);
            let r = ract.get(seg).unwrap_or(&empty);
            let classes = p.len().max(r.len());
            let (mut seg_tp, mut seg_fp, mut seg_fn, mut seg_n) = (0, 0, 0, 0);
            for c in 0..classes {
                let pa = p.get(c).copied().unwrap_or(false);
                let ra = r.get(c).copied().unwrap_or(false);
                seg_n += ra as usize;
                match (pa, ra) {
                    (true, true) => seg_tp += 1,
                    (true, false) => seg_fp += 1,
                    (false, true) => seg_fn += 1,
                    (false, false) => {}
                }
            }
            s += seg_fn.min(seg_fp);
            d += seg_fn.saturating_sub(seg_fp);
            i_ += seg_fp.saturating_sub(seg_fn);
            n += seg_n;
            tp += seg_tp;
            fp += seg_fp;
            fn_ += seg_fn;
        }
    }
    let er = if n > 0 {
        (s + d + i_) as f64 / n as f64
    } else {
        0.0
    };
    let (precision, recall, f1) = prf(tp, fp, fn_);
    Ok(SedScores {
        f1,
        precision,
        recall,
        er,
        substitutions: s,
        deletions: d,
        insertions: i_,
        ref_segments: n,
    })
}

/// Write events as `clip_id<TAB>onset<TAB>offset<TAB>class_name` with
/// 3-decimal seconds.
pub fn write_event_tsv(path: &Path, clips: &[ClipEvents], labels: &LabelMap) -> Result<()> {
    let mut text = String::new();
    for clip in clips {
        for e in &clip.events {
            if e.class >= labels.len() {
                return Err(Error::config(format!(
                    "event class {} outside the label map",
                    e.class
                )));
            }
            writeln!(
                text,
                "{}\t{:.3}\t{:.3}\t{}",
                clip.clip_id,
                e.onset,
                e.offset,
                labels.name(e.class)
            )
            .expect("string write");
        }
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Read an event TSV, grouping rows by clip in first-appearance order.
pub fn read_event_tsv(path: &Path, labels: &LabelMap) -> Result<Vec<ClipEvents>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let fail = |line: usize, reason: String| Error::Manifest {
        path: path.to_path_buf(),
        line,
        reason,
    };
    let mut order: Vec<String> = Vec::new();
    let mut by_clip: BTreeMap<String, Vec<EventInterval>> = BTreeMap::new();
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 4 {
            return Err(fail(
                line_no,
                "expected clip_id<TAB>onset<TAB>offset<TAB>class_name".into(),
            ));
        }
        let parse = |v: &str, what: &str| -> Result<f64> {
            v.parse::<f64>()
                .ok()
                .filter(|x| x.is_finite())
                .ok_or_else(|| fail(line_no, format!("bad {} {}", what, v)))
        };
        let onset = parse(fields[1], "onset")?;
        let offset = parse(fields[2], "offset")?;
        if !(0.0..).contains(&onset) || offset <= onset {
            return Err(fail(
                line_no,
                format!("invalid interval [{}, {}]", onset, offset),
            ));
        }
        let class = labels
            .id(fields[3])
            .ok_or_else(|| fail(line_no, format!("unknown class {}", fields[3])))?;
        let clip_id = fields[0].to_string();
        if !by_clip.contains_key(&clip_id) {
            order.push(clip_id.clone());
        }
        by_clip.entry(clip_id).or_default().push(EventInterval {
            class,
            onset,
            offset,
        });
    }
    Ok(order
        .into_iter()
        .map(|clip_id| {
            let events = by_clip.remove(&clip_id).unwrap();
            ClipEvents { clip_id, events }
        })
        .collect())
}

/// Write a key=value score report.
pub fn write_score_report(path: &Path, lines: &[String]) -> Result<()> {
    let mut text = lines.join("\n");
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Per-frame posterior curves for one clip as CSV rows
/// `frame,class_name,O,Z_loc,O_prime`.
pub fn write_curves_csv(path: &Path, fp: &FramePosteriors, labels: &LabelMap) -> Result<()> {
    let (t_len, classes) = (fp.o.shape()[0], fp.o.shape()[1]);
    if classes != labels.len() {
        return Err(Error::config(format!(
            "{} classes in posteriors vs {} labels",
            classes,
            labels.len()
        )));
    }
    let mut text = String::from("frame,class_name,O,Z_loc,O_prime\n");
    for t in 0..t_len {
        for c in 0..classes {
            writeln!(
                text,
                "{},{},{:.6},{:.6},{:.6}",
                t,
                labels.name(c),
                fp.o.at2(t, c),
                fp.z_loc.at2(t, c),
                fp.o_prime.at2(t, c)
            )
            .expect("string write");
        }
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}
