//! Synthetic tone corpus with known event boundaries.
//!
//! Each 10 s clip mixes 1–3 sinusoid events over low-level noise. Every
//! class owns a distinct fundamental, spaced uniformly on the mel scale so
//! the tones separate cleanly in log-mel features. The generator writes the
//! clips, a weak-label manifest (label set = union of the clip's event
//! classes) and the hidden frame-level truth, so detection trained on weak
//! labels alone can be scored against real boundaries.

use std::path::{Path, PathBuf};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::audio::{self, CLIP_SECONDS, SAMPLE_RATE};
use crate::dataset::LabelMap;
use crate::error::{Error, Result};
use crate::eval::{write_event_tsv, ClipEvents, EventInterval};

const TONE_AMP: f64 = 0.3;
const RAMP_S: f64 = 0.05;
const NOISE_AMP: f64 = 0.005;
const MIN_ONSET_S: f64 = 0.5;
const MAX_ONSET_S: f64 = 6.5;
const MIN_DUR_S: f64 = 1.5;
const MAX_DUR_S: f64 = 3.0;
const FREQ_LO_HZ: f64 = 300.0;
const FREQ_HI_HZ: f64 = 4000.0;

#[derive(Debug, Clone, Copy)]
pub struct SynthConfig {
    pub clips: usize,
    pub classes: usize,
    pub seed: u64,
}

/// Paths of the generated corpus, all inside the requested directory.
#[derive(Debug, Clone)]
pub struct SynthOutput {
    pub manifest: PathBuf,
    pub labels: PathBuf,
    pub events_ref: PathBuf,
    pub audio_dir: PathBuf,
}

fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Fundamental of one class: mel-uniform between 300 and 4000 Hz.
pub fn class_frequency(class: usize, classes: usize) -> f64 {
    let (lo, hi) = (hz_to_mel(FREQ_LO_HZ), hz_to_mel(FREQ_HI_HZ));
    let frac = (class as f64 + 0.5) / classes as f64;
    mel_to_hz(lo + frac * (hi - lo))
}

fn render_clip(events: &[EventInterval], classes: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let n = (CLIP_SECONDS * SAMPLE_RATE as f64) as usize;
    let mut samples: Vec<f64> = (0..n)
        .map(|_| rng.gen_range(-NOISE_AMP..NOISE_AMP))
        .collect();
    for e in events {
        let freq = class_frequency(e.class, classes);
        let start = (e.onset * SAMPLE_RATE as f64).round() as usize;
        let stop = ((e.offset * SAMPLE_RATE as f64).round() as usize).min(n);
        let dur = e.offset - e.onset;
        for (s, sample) in samples.iter_mut().enumerate().take(stop).skip(start) {
            let t = (s - start) as f64 / SAMPLE_RATE as f64;
            let env = (t / RAMP_S).min((dur - t) / RAMP_S).min(1.0).max(0.0);
            *sample += TONE_AMP * env * (2.0 * std::f64::consts::PI * freq * t).sin();
        }
    }
    samples
}

/// Overlapping or touching same-class intervals folded into one.
fn merge_same_class(mut events: Vec<EventInterval>) -> Vec<EventInterval> {
    events.sort_by(|a, b| {
        (a.class, a.onset)
            .partial_cmp(&(b.class, b.onset))
            .expect("finite onsets")
    });
    let mut merged: Vec<EventInterval> = Vec::new();
    for e in events {
        match merged.last_mut() {
            Some(prev) if prev.class == e.class && e.onset <= prev.offset => {
                prev.offset = prev.offset.max(e.offset);
            }
            _ => merged.push(e),
        }
    }
    merged
}

/// Generate the corpus under `out_dir`: `audio/<clip>.wav`, `labels.txt`,
/// `manifest.csv` (feature paths point at `features/<clip>.feat`, to be
/// produced by extraction) and the reference events `events_ref.tsv`.
/// Byte-identical for identical config.
pub fn generate(out_dir: &Path, cfg: &SynthConfig) -> Result<SynthOutput> {
    if cfg.clips == 0 || cfg.classes == 0 {
        return Err(Error::config("need at least one clip and one class"));
    }
    let audio_dir = out_dir.join("audio");
    std::fs::create_dir_all(&audio_dir).map_err(|e| Error::io(&audio_dir, e))?;

    let labels = LabelMap::from_names((0..cfg.classes).map(|i| format!("tone_{}", i)).collect())?;
    let labels_path = out_dir.join("labels.txt");
    labels.save(&labels_path)?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut manifest = String::new();
    let mut truth: Vec<ClipEvents> = Vec::new();
    for i in 0..cfg.clips {
        let clip_id = format!("clip_{:03}", i);
        let n_events = rng.gen_range(1..=3);
        let events: Vec<EventInterval> = (0..n_events)
            .map(|_| {
                let class = rng.gen_range(0..cfg.classes);
                let onset = rng.gen_range(MIN_ONSET_S..MAX_ONSET_S);
                let dur = rng.gen_range(MIN_DUR_S..MAX_DUR_S);
                EventInterval {
                    class,
                    onset,
                    offset: onset + dur,
                }
            })
            .collect();

        let samples = render_clip(&events, cfg.classes, &mut rng);
        audio::write_wav(
            &audio_dir.join(format!("{}.wav", clip_id)),
            &samples,
            SAMPLE_RATE,
        )?;

        let merged = merge_same_class(events);
        let mut active: Vec<&str> = merged.iter().map(|e| labels.name(e.class)).collect();
        active.dedup();
        manifest.push_str(&format!(
            "{},features/{}.feat,{}\n",
            clip_id,
            clip_id,
            active.join(";")
        ));
        truth.push(ClipEvents {
            clip_id,
            events: merged,
        });
    }

    let manifest_path = out_dir.join("manifest.csv");
    std::fs::write(&manifest_path, manifest).map_err(|e| Error::io(&manifest_path, e))?;
    let events_path = out_dir.join("events_ref.tsv");
    write_event_tsv(&events_path, &truth, &labels)?;
    Ok(SynthOutput {
        manifest: manifest_path,
        labels: labels_path,
        events_ref: events_path,
        audio_dir,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::read_event_tsv;
    use std::collections::BTreeSet;

    fn small() -> SynthConfig {
        SynthConfig {
            clips: 4,
            classes: 3,
            seed: 7,
        }
    }

    #[test]
    fn writes_one_wav_and_manifest_row_per_clip() {
        let dir = tempfile::tempdir().unwrap();
        let out = generate(dir.path(), &small()).unwrap();
        let wavs = std::fs::read_dir(&out.audio_dir).unwrap().count();
        assert_eq!(wavs, 4);
        let manifest = std::fs::read_to_string(&out.manifest).unwrap();
        assert_eq!(manifest.lines().count(), 4);
        assert!(manifest.starts_with("clip_000,features/clip_000.feat,"));
        let labels = LabelMap::load(&out.labels).unwrap();
        assert_eq!(labels.names().join(","), "tone_0,tone_1,tone_2");
    }

    #[test]
    fn same_seed_reproduces_identical_bytes() {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let out_a = generate(a.path(), &small()).unwrap();
        let out_b = generate(b.path(), &small()).unwrap();
        for name in ["manifest.csv", "events_ref.tsv", "labels.txt"] {
            assert_eq!(
                std::fs::read(a.path().join(name)).unwrap(),
                std::fs::read(b.path().join(name)).unwrap(),
                "{} differs",
                name
            );
        }
        for i in 0..4 {
            let wav = format!("clip_{:03}.wav", i);
            assert_eq!(
                std::fs::read(out_a.audio_dir.join(&wav)).unwrap(),
                std::fs::read(out_b.audio_dir.join(&wav)).unwrap(),
                "{} differs",
                wav
            );
        }
        let c = tempfile::tempdir().unwrap();
        let other = generate(
            c.path(),
            &SynthConfig {
                seed: 8,
                ..small()
            },
        )
        .unwrap();
        assert_ne!(
            std::fs::read(out_a.audio_dir.join("clip_000.wav")).unwrap(),
            std::fs::read(other.audio_dir.join("clip_000.wav")).unwrap()
        );
    }

    #[test]
    fn weak_labels_are_the_union_of_event_classes() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SynthConfig {
            clips: 12,
            classes: 4,
            seed: 3,
        };
        let out = generate(dir.path(), &cfg).unwrap();
        let labels = LabelMap::load(&out.labels).unwrap();
        let truth = read_event_tsv(&out.events_ref, &labels).unwrap();
        let manifest = std::fs::read_to_string(&out.manifest).unwrap();
        for (line, clip) in manifest.lines().zip(&truth) {
            let fields: Vec<&str> = line.splitn(3, ',').collect();
            assert_eq!(fields[0], clip.clip_id);
            let tagged: BTreeSet<&str> = fields[2].split(';').collect();
            let from_events: BTreeSet<&str> =
                clip.events.iter().map(|e| labels.name(e.class)).collect();
            assert_eq!(tagged, from_events, "{}", clip.clip_id);
        }
    }

    #[test]
    fn reference_intervals_are_merged_sorted_and_in_range() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SynthConfig {
            clips: 30,
            classes: 2, // few classes: same-class overlap is common
            seed: 11,
        };
        let out = generate(dir.path(), &cfg).unwrap();
        let labels = LabelMap::load(&out.labels).unwrap();
        for clip in read_event_tsv(&out.events_ref, &labels).unwrap() {
            for pair in clip.events.windows(2) {
                if pair[0].class == pair[1].class {
                    assert!(pair[0].offset < pair[1].onset, "overlap in {}", clip.clip_id);
                }
            }
            for e in &clip.events {
                assert!(e.onset >= MIN_ONSET_S - 1e-3);
                assert!(e.offset <= MAX_ONSET_S + MAX_DUR_S + 1e-3);
                assert!(e.offset <= CLIP_SECONDS - 0.5 + 1e-3);
            }
        }
    }

    #[test]
    fn class_frequencies_are_distinct_and_inside_the_band() {
        for classes in [1, 2, 4, 8] {
            let freqs: Vec<f64> = (0..classes).map(|c| class_frequency(c, classes)).collect();
            for pair in freqs.windows(2) {
                assert!(pair[1] > pair[0] + 50.0);
            }
            assert!(freqs[0] > FREQ_LO_HZ);
            assert!(*freqs.last().unwrap() < FREQ_HI_HZ);
        }
    }

    #[test]
    fn generated_audio_round_trips_through_the_decoder() {
        let dir = tempfile::tempdir().unwrap();
        let out = generate(
            dir.path(),
            &SynthConfig {
                clips: 1,
                classes: 2,
                seed: 0,
            },
        )
        .unwrap();
        let clip = audio::load_wav(&out.audio_dir.join("clip_000.wav")).unwrap();
        assert_eq!(clip.sample_rate(), SAMPLE_RATE);
        assert_eq!(clip.samples().len(), 160_000);
        assert!(clip.samples().iter().all(|s| s.abs() <= 1.0));
        // Tones at 0.3 amplitude clearly exceed the noise floor somewhere.
        assert!(clip.samples().iter().any(|s| s.abs() > 0.2));
    }

    #[test]
    fn rejects_empty_settings() {
        let dir = tempfile::tempdir().unwrap();
        assert!(generate(
            dir.path(),
            &SynthConfig {
                clips: 0,
                classes: 2,
                seed: 0
            }
        )
        .is_err());
        assert!(generate(
            dir.path(),
            &SynthConfig {
                clips: 1,
                classes: 0,
                seed: 0
            }
        )
        .is_err());
    }
}
