//! Command-line surface: argument parsing plus one function per subcommand.
//!
//! Subcommands cover the whole pipeline: synthesize a corpus, extract
//! features, train, tag clips, detect events, fuse systems, and evaluate.
//! An optional `--config` file supplies `key=value` defaults that any
//! explicit flag overrides. Exit codes (mapped in `main`): 0 success,
//! 1 usage error, 2 unreadable or malformed input data, 3 runtime failure.

pub mod config;

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use weaksed_core::audio::featfile;
use weaksed_core::audio::mel::{log_mel, mfcc};
use weaksed_core::audio::normalize;
use weaksed_core::audio::{load_wav, FeatureChunk, FeatureKind};
use weaksed_core::checkpoint::{load_checkpoint, save_checkpoint};
use weaksed_core::dataset::load_corpus;
use weaksed_core::eval::{
    extract_events, read_event_tsv, score_sed, score_tagging, tag_clip, write_curves_csv,
    write_event_tsv, write_score_report,
};
use weaksed_core::fusion::{fuse_epochs, fuse_systems, read_posteriors, write_posteriors};
use weaksed_core::synth::{self, SynthConfig};
use weaksed_core::trainer::{train, TrainConfig};
use weaksed_core::{
    parallel, ClipEvents, ClipPooling, Error, LabelMap, PostProcess, Result, TaskMode,
};

use config::FileConfig;

#[derive(Debug, Parser)]
#[command(
    name = "weaksed",
    version,
    about = "Audio tagging and weakly supervised sound event detection"
)]
pub struct Cli {
    /// Config file of key=value lines; explicit flags take precedence
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Extract features from a directory of WAV files
    Extract(ExtractArgs),
    /// Train a model on a manifest of labelled feature files
    Train(TrainArgs),
    /// Write clip posteriors, optionally fused over several checkpoints
    Tag(TagArgs),
    /// Detect timestamped sound events with one checkpoint
    Detect(DetectArgs),
    /// Score predictions against references
    Evaluate(EvaluateArgs),
    /// Average posterior files produced by different systems
    Fuse(FuseArgs),
    /// Generate a synthetic tone corpus with weak labels and event truth
    Synth(SynthArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FeatureArg {
    #[value(name = "log_mel")]
    LogMel,
    Mfcc,
}

impl From<FeatureArg> for FeatureKind {
    fn from(a: FeatureArg) -> Self {
        match a {
            FeatureArg::LogMel => FeatureKind::LogMel,
            FeatureArg::Mfcc => FeatureKind::Mfcc,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Tagging,
    Sed,
}

impl From<ModeArg> for TaskMode {
    fn from(a: ModeArg) -> Self {
        match a {
            ModeArg::Tagging => TaskMode::Tagging,
            ModeArg::Sed => TaskMode::Sed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PoolArg {
    Attention,
    Mean,
}

impl From<PoolArg> for ClipPooling {
    fn from(a: PoolArg) -> Self {
        match a {
            PoolArg::Attention => ClipPooling::Attention,
            PoolArg::Mean => ClipPooling::Mean,
        }
    }
}

/// Which frame-level track drives event extraction: the raw class
/// posteriors O or the localization-gated O'.
#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TrackArg {
    #[value(name = "O", alias = "o")]
    O,
    #[value(name = "Oprime", alias = "oprime")]
    Oprime,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TaskArg {
    Tagging,
    Sed,
}

#[derive(Debug, Args)]
pub struct ExtractArgs {
    /// Directory scanned (non-recursively) for .wav files
    pub wav_dir: PathBuf,
    /// Output directory for .feat files and the corpus stats file
    pub out_dir: PathBuf,
    /// Feature type [default: log_mel]
    #[arg(long, value_enum)]
    pub feature: Option<FeatureArg>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Manifest of clip_id,feature_path,labels rows
    pub manifest: PathBuf,
    /// Label map file, one class name per line
    pub label_map: PathBuf,
    /// Output directory for checkpoints and the run log
    #[arg(long, default_value = "run")]
    pub out: PathBuf,
    /// Task mode; sed keeps a finer time axis [default: tagging]
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
    /// Balance minibatches across classes [default: true]
    #[arg(long)]
    pub balance: Option<bool>,
    /// Training epochs [default: 30]
    #[arg(long)]
    pub epochs: Option<usize>,
    /// RNG seed for init and sampling [default: 0]
    #[arg(long)]
    pub seed: Option<u64>,
    /// Clips per minibatch [default: 16]
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Adam learning rate [default: 0.001]
    #[arg(long)]
    pub lr: Option<f64>,
    /// Clip-level pooling of frame posteriors [default: attention]
    #[arg(long, value_enum)]
    pub pool: Option<PoolArg>,
    /// Save a checkpoint every N epochs, 0 to disable [default: 1]
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
    /// Convolution filters per block [default: 64]
    #[arg(long)]
    pub filters: Option<usize>,
    /// Number of gated convolution blocks [default: 3]
    #[arg(long)]
    pub blocks: Option<usize>,
    /// Recurrent units per GRU direction [default: 128]
    #[arg(long)]
    pub hidden: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TagArgs {
    /// Manifest of clips to tag; label column may be empty
    pub manifest: PathBuf,
    /// Label map file, one class name per line
    pub label_map: PathBuf,
    /// Checkpoints; without --fuse only the last one is used
    #[arg(num_args = 1.., required = true)]
    pub checkpoints: Vec<PathBuf>,
    /// Output posterior CSV
    #[arg(long, default_value = "posteriors.csv")]
    pub out: PathBuf,
    /// Clip-level pooling of frame posteriors [default: attention]
    #[arg(long, value_enum)]
    pub pool: Option<PoolArg>,
    /// Average posteriors over all listed checkpoints
    #[arg(long)]
    pub fuse: bool,
    /// Threshold for the scores written when the manifest has labels [default: 0.5]
    #[arg(long)]
    pub theta: Option<f64>,
}

#[derive(Debug, Args)]
pub struct DetectArgs {
    /// Checkpoint to run
    pub checkpoint: PathBuf,
    /// Manifest of clips to detect on; label column may be empty
    pub manifest: PathBuf,
    /// Label map file, one class name per line
    pub label_map: PathBuf,
    /// Output event list TSV
    #[arg(long, default_value = "events.tsv")]
    pub out: PathBuf,
    /// Frame-activity threshold in (0,1) [default: 0.5]
    #[arg(long)]
    pub theta: Option<f64>,
    /// Median filter window in frames, odd [default: 11]
    #[arg(long)]
    pub median_win: Option<usize>,
    /// Drop events shorter than this many seconds [default: 0.2]
    #[arg(long)]
    pub min_dur: Option<f64>,
    /// Merge same-class events closer than this many seconds [default: 0.2]
    #[arg(long)]
    pub merge_gap: Option<f64>,
    /// Frame track to binarize [default: Oprime]
    #[arg(long, value_enum)]
    pub track: Option<TrackArg>,
    /// Also write per-clip frame,class,O,Z_loc,O_prime curve CSVs
    #[arg(long)]
    pub emit_curves: bool,
    /// Directory for curve CSVs [default: curves next to the event list]
    #[arg(long)]
    pub curves_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Predictions: posterior CSV (tagging) or event TSV (sed)
    pub predictions: PathBuf,
    /// Reference: labelled manifest (tagging) or event TSV (sed)
    pub reference: PathBuf,
    /// Label map file, one class name per line
    pub label_map: PathBuf,
    /// Which metric family to compute [default: tagging]
    #[arg(long, value_enum)]
    pub task: Option<TaskArg>,
    /// Threshold binarizing posteriors for tagging [default: 0.5]
    #[arg(long)]
    pub theta: Option<f64>,
    /// Segment length in seconds for sed scoring [default: 1.0]
    #[arg(long)]
    pub segment: Option<f64>,
    /// Also write the report to a file [default: stdout only]
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct FuseArgs {
    /// Posterior CSVs, one per system, over the same clips
    #[arg(num_args = 1.., required = true)]
    pub posteriors: Vec<PathBuf>,
    /// Output fused posterior CSV
    #[arg(long, default_value = "fused.csv")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Output directory for wavs, manifest, labels, and reference events
    pub out_dir: PathBuf,
    /// Number of clips [default: 40]
    #[arg(long)]
    pub clips: Option<usize>,
    /// Number of classes [default: 4]
    #[arg(long)]
    pub classes: Option<usize>,
    /// RNG seed [default: 0]
    #[arg(long)]
    pub seed: Option<u64>,
}

pub fn run(cli: Cli) -> Result<()> {
    let cfg = match &cli.config {
        Some(path) => FileConfig::load(path)?,
        None => FileConfig::default(),
    };
    match &cli.command {
        Command::Extract(a) => cmd_extract(a, &cfg),
        Command::Train(a) => cmd_train(a, &cfg),
        Command::Tag(a) => cmd_tag(a, &cfg),
        Command::Detect(a) => cmd_detect(a, &cfg),
        Command::Evaluate(a) => cmd_evaluate(a, &cfg),
        Command::Fuse(a) => cmd_fuse(a, &cfg),
        Command::Synth(a) => cmd_synth(a, &cfg),
    }
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn extract_one(path: &Path, kind: FeatureKind) -> Result<FeatureChunk> {
    let clip = load_wav(path)?;
    let chunk = log_mel(&clip)?;
    match kind {
        FeatureKind::LogMel => Ok(chunk),
        FeatureKind::Mfcc => mfcc(&chunk),
    }
}

pub fn cmd_extract(args: &ExtractArgs, cfg: &FileConfig) -> Result<()> {
    let kind: FeatureKind = cfg
        .resolve_enum(args.feature, "feature", FeatureArg::LogMel)?
        .into();
    let entries = std::fs::read_dir(&args.wav_dir).map_err(|e| Error::io(&args.wav_dir, e))?;
    let mut wavs: Vec<PathBuf> = entries
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .map_or(false, |ext| ext.eq_ignore_ascii_case("wav"))
        })
        .collect();
    wavs.sort();
    if wavs.is_empty() {
        return Err(Error::config(format!(
            "no input files in {}",
            args.wav_dir.display()
        )));
    }

    create_dir(&args.out_dir)?;
    let results = parallel::map(&wavs, |path| extract_one(path, kind));
    let mut chunks = Vec::new();
    let mut written = 0usize;
    for (path, result) in wavs.iter().zip(results) {
        match result {
            Ok(chunk) => {
                let name = path.file_stem().unwrap_or_default();
                let out = args.out_dir.join(name).with_extension("feat");
                featfile::write_chunk(&out, &chunk)?;
                chunks.push(chunk);
                written += 1;
            }
            Err(e) => log::warn!("skipping {}: {}", path.display(), e),
        }
    }
    if written == 0 {
        return Err(Error::format(
            &args.wav_dir,
            format!("all {} input files failed to extract", wavs.len()),
        ));
    }
    let stats = normalize::compute_stats(&chunks)?;
    featfile::write_stats(&args.out_dir.join("stats.norm"), &stats, kind)?;
    println!(
        "extracted {} of {} clips ({}) -> {}",
        written,
        wavs.len(),
        kind.name(),
        args.out_dir.display()
    );
    Ok(())
}

pub fn cmd_train(args: &TrainArgs, cfg: &FileConfig) -> Result<()> {
    let d = TrainConfig::default();
    let config = TrainConfig {
        batch_size: cfg.resolve(args.batch_size, "batch-size", d.batch_size)?,
        epochs: cfg.resolve(args.epochs, "epochs", d.epochs)?,
        lr: cfg.resolve(args.lr, "lr", d.lr)?,
        seed: cfg.resolve(args.seed, "seed", d.seed)?,
        mode: cfg.resolve_enum(args.mode, "mode", ModeArg::Tagging)?.into(),
        pooling: cfg
            .resolve_enum(args.pool, "pool", PoolArg::Attention)?
            .into(),
        checkpoint_every: cfg.resolve(args.checkpoint_every, "checkpoint-every", d.checkpoint_every)?,
        balance: cfg.resolve(args.balance, "balance", d.balance)?,
        filters: cfg.resolve(args.filters, "filters", d.filters)?,
        blocks: cfg.resolve(args.blocks, "blocks", d.blocks)?,
        hidden: cfg.resolve(args.hidden, "hidden", d.hidden)?,
    };
    let labels = LabelMap::load(&args.label_map)?;
    let records = load_corpus(&args.manifest, &labels, true, true)?;
    create_dir(&args.out)?;

    let mut outcome = train(&records, Some(&args.out), &config)?;
    // The last periodic checkpoint already holds the final parameters;
    // write final.ckpt only when the schedule missed the last epoch.
    let last = if config.checkpoint_every == 0 || config.epochs % config.checkpoint_every != 0 {
        let path = args.out.join("final.ckpt");
        save_checkpoint(&path, &outcome.params, &outcome.norm, outcome.kind, None)?;
        outcome.log.checkpoints.push(path.clone());
        path
    } else {
        outcome.log.checkpoints.last().cloned().expect("periodic checkpoints")
    };
    outcome.log.save(&args.out.join("run.log"))?;

    for line in outcome.log.lines() {
        println!("{}", line);
    }
    println!("final checkpoint -> {}", last.display());
    Ok(())
}

/// Read the raw (unnormalized) feature chunks named by manifest records.
fn load_chunks(records: &[weaksed_core::ClipRecord]) -> Result<Vec<(String, FeatureChunk)>> {
    records
        .iter()
        .map(|r| featfile::read_chunk(&r.feature_path).map(|c| (r.clip_id.clone(), c)))
        .collect()
}

pub fn cmd_tag(args: &TagArgs, cfg: &FileConfig) -> Result<()> {
    let pooling: ClipPooling = cfg
        .resolve_enum(args.pool, "pool", PoolArg::Attention)?
        .into();
    let theta = cfg.resolve(args.theta, "theta", 0.5)?;
    let fuse = cfg.resolve_switch(args.fuse, "fuse")?;

    let labels = LabelMap::load(&args.label_map)?;
    let records = load_corpus(&args.manifest, &labels, false, true)?;
    let clips = load_chunks(&records)?;
    let k = if fuse { args.checkpoints.len() } else { 1 };
    let rows = fuse_epochs(&args.checkpoints, &clips, pooling, k)?;
    write_posteriors(&args.out, &rows)?;
    println!(
        "wrote posteriors for {} clips -> {}",
        rows.len(),
        args.out.display()
    );

    // Score against the manifest when it doubles as a reference.
    if records.iter().all(|r| r.labels.iter().any(|&v| v == 1.0)) {
        let preds = rows
            .iter()
            .map(|(id, p)| tag_clip(id.clone(), p, theta))
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<(String, Vec<bool>)> = records
            .iter()
            .map(|r| (r.clip_id.clone(), r.labels.iter().map(|&v| v == 1.0).collect()))
            .collect();
        let report = score_tagging(&preds, &refs)?.report_lines();
        for line in &report {
            println!("{}", line);
        }
        let scores_path = args.out.with_extension("scores");
        write_score_report(&scores_path, &report)?;
        println!("scores -> {}", scores_path.display());
    }
    Ok(())
}

pub fn cmd_detect(args: &DetectArgs, cfg: &FileConfig) -> Result<()> {
    let pp = PostProcess {
        theta: cfg.resolve(args.theta, "theta", PostProcess::default().theta)?,
        median_win: cfg.resolve(args.median_win, "median-win", PostProcess::default().median_win)?,
        min_dur_s: cfg.resolve(args.min_dur, "min-dur", PostProcess::default().min_dur_s)?,
        merge_gap_s: cfg.resolve(args.merge_gap, "merge-gap", PostProcess::default().merge_gap_s)?,
    };
    let track = cfg.resolve_enum(args.track, "track", TrackArg::Oprime)?;
    let emit_curves = cfg.resolve_switch(args.emit_curves, "emit-curves")?;

    let labels = LabelMap::load(&args.label_map)?;
    let ckpt = load_checkpoint(&args.checkpoint)?;
    if labels.len() != ckpt.params.config.classes {
        return Err(Error::incompatible(format!(
            "label map has {} classes, checkpoint {}",
            labels.len(),
            ckpt.params.config.classes
        )));
    }
    let records = load_corpus(&args.manifest, &labels, false, true)?;
    let mut clips = Vec::with_capacity(records.len());
    for r in &records {
        let mut chunk = featfile::read_chunk(&r.feature_path)?;
        if chunk.kind != ckpt.feature_kind {
            return Err(Error::incompatible(format!(
                "clip {} has {} features, checkpoint expects {}",
                r.clip_id,
                chunk.kind.name(),
                ckpt.feature_kind.name()
            )));
        }
        normalize::apply(&mut chunk, &ckpt.norm)?;
        clips.push((r.clip_id.clone(), chunk));
    }

    let posteriors = parallel::try_map(&clips, |(_, chunk)| {
        weaksed_core::model::forward(chunk, &ckpt.params, ClipPooling::Attention)
    })?;
    let mut out_clips = Vec::with_capacity(clips.len());
    let mut total = 0usize;
    for ((clip_id, chunk), fp) in clips.iter().zip(&posteriors) {
        let tensor = match track {
            TrackArg::O => &fp.o,
            TrackArg::Oprime => &fp.o_prime,
        };
        let events = extract_events(tensor, chunk.frame_hop_seconds, &pp)?;
        total += events.len();
        out_clips.push(ClipEvents {
            clip_id: clip_id.clone(),
            events,
        });
    }
    write_event_tsv(&args.out, &out_clips, &labels)?;
    println!(
        "wrote {} events for {} clips -> {}",
        total,
        out_clips.len(),
        args.out.display()
    );

    if emit_curves {
        let dir = match &args.curves_dir {
            Some(d) => d.clone(),
            None => args
                .out
                .parent()
                .unwrap_or_else(|| Path::new("."))
                .join("curves"),
        };
        create_dir(&dir)?;
        for ((clip_id, _), fp) in clips.iter().zip(&posteriors) {
            write_curves_csv(&dir.join(format!("{}.csv", clip_id)), fp, &labels)?;
        }
        println!("curves -> {}", dir.display());
    }
    Ok(())
}

pub fn cmd_evaluate(args: &EvaluateArgs, cfg: &FileConfig) -> Result<()> {
    let task = cfg.resolve_enum(args.task, "task", TaskArg::Tagging)?;
    let labels = LabelMap::load(&args.label_map)?;
    let report = match task {
        TaskArg::Tagging => {
            let theta = cfg.resolve(args.theta, "theta", 0.5)?;
            let rows = read_posteriors(&args.predictions)?;
            let preds = rows
                .iter()
                .map(|(id, p)| tag_clip(id.clone(), p, theta))
                .collect::<Result<Vec<_>>>()?;
            // The manifest serves as a label reference; its feature files
            // need not exist.
            let records = load_corpus(&args.reference, &labels, true, false)?;
            let refs: Vec<(String, Vec<bool>)> = records
                .iter()
                .map(|r| (r.clip_id.clone(), r.labels.iter().map(|&v| v == 1.0).collect()))
                .collect();
            score_tagging(&preds, &refs)?.report_lines()
        }
        TaskArg::Sed => {
            let segment = cfg.resolve(args.segment, "segment", 1.0)?;
            let preds = read_event_tsv(&args.predictions, &labels)?;
            let refs = read_event_tsv(&args.reference, &labels)?;
            score_sed(&preds, &refs, segment)?.report_lines()
        }
    };
    for line in &report {
        println!("{}", line);
    }
    let out = match &args.out {
        Some(p) => Some(p.clone()),
        None => cfg.get("out").map(PathBuf::from),
    };
    if let Some(path) = out {
        write_score_report(&path, &report)?;
        println!("report -> {}", path.display());
    }
    Ok(())
}

pub fn cmd_fuse(args: &FuseArgs, _cfg: &FileConfig) -> Result<()> {
    let systems = args
        .posteriors
        .iter()
        .map(|p| read_posteriors(p))
        .collect::<Result<Vec<_>>>()?;
    let fused = fuse_systems(&systems)?;
    write_posteriors(&args.out, &fused)?;
    println!(
        "fused {} systems over {} clips -> {}",
        systems.len(),
        fused.len(),
        args.out.display()
    );
    Ok(())
}

pub fn cmd_synth(args: &SynthArgs, cfg: &FileConfig) -> Result<()> {
    let config = SynthConfig {
        clips: cfg.resolve(args.clips, "clips", 40)?,
        classes: cfg.resolve(args.classes, "classes", 4)?,
        seed: cfg.resolve(args.seed, "seed", 0)?,
    };
    let out = synth::generate(&args.out_dir, &config)?;
    println!(
        "synthesized {} clips over {} classes -> {}",
        config.clips,
        config.classes,
        args.out_dir.display()
    );
    println!("manifest -> {}", out.manifest.display());
    println!("labels -> {}", out.labels.display());
    println!("reference events -> {}", out.events_ref.display());
    Ok(())
}
