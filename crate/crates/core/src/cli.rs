//! Command-line front end.
//!
//! Every command writes its effective configuration to `config.json` in
//! its output directory. Failures map to exit codes through
//! [`Error::exit_code`]: 2 configuration, 3 I/O, 4 data or protocol,
//! 5 numerical.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use crate::augment::resize;
use crate::backbone::{Encoder, TinyEncoder, TinyEncoderConfig};
use crate::checkpoint::load_checkpoint;
use crate::config::{resolve_config, write_effective_config, EvalConfig};
use crate::dataio::{generate_synthetic, load_manifest, read_png, write_png, Split, SyntheticSpec};
use crate::datamodel::EmbeddingMatrix;
use crate::error::{Error, Result};
use crate::eval::{distance_report, evaluate, extract_embeddings, heat_overlay, saliency_pair, write_npy, Protocol, SetLabels};
use crate::profiler::{profile, DEFAULT_ITERS, DEFAULT_WARMUP};
use crate::trainer::{run_training, RunOptions, TrainLog, TrainRecord, TRAIN_LOG_FILE};

#[derive(Debug, Parser)]
#[command(name = "ssbver", version, about = "Vehicle re-identification with self-distillation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a synthetic dataset and its manifest.
    MakeSynthetic(MakeSyntheticArgs),
    /// Train a model and write checkpoints and the training log.
    Train(TrainArgs),
    /// Retrieval metrics and distance distributions of a checkpoint.
    Evaluate(EvaluateArgs),
    /// Gradient saliency maps for a query/gallery pair.
    Saliency(SaliencyArgs),
    /// Parameter count, latency and memory of an encoder.
    Profile(ProfileArgs),
}

#[derive(Debug, Args)]
pub struct MakeSyntheticArgs {
    /// JSON dataset spec; defaults apply to missing keys.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dataset manifest (JSONL).
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Supervised losses only: no self-distillation and no local views.
    #[arg(long)]
    pub baseline: bool,
    /// `dotted.path=value` override, repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub sets: Vec<String>,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Stop after this many completed epochs.
    #[arg(long)]
    pub stop_after_epoch: Option<u32>,
    /// No progress lines on stderr.
    #[arg(long)]
    pub quiet: bool,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "cross_camera")]
    pub protocol: String,
    #[arg(long)]
    pub out: PathBuf,
    /// Evaluate the student instead of the teacher.
    #[arg(long)]
    pub student: bool,
}

#[derive(Debug, Args)]
pub struct SaliencyArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub query: PathBuf,
    #[arg(long)]
    pub gallery: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ProfileArgs {
    #[arg(long, conflicts_with = "arch", required_unless_present = "arch")]
    pub checkpoint: Option<PathBuf>,
    /// `tiny`, or a JSON file with an encoder config.
    #[arg(long)]
    pub arch: Option<String>,
    #[arg(long)]
    pub out: PathBuf,
    /// Square input side; defaults to the training view size.
    #[arg(long)]
    pub image_size: Option<usize>,
    #[arg(long, default_value_t = DEFAULT_WARMUP)]
    pub warmup: usize,
    #[arg(long, default_value_t = DEFAULT_ITERS)]
    pub iters: usize,
}

/// Parses the process arguments, runs the command and returns the exit
/// code.
pub fn main() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::MakeSynthetic(a) => make_synthetic(&a),
        Command::Train(a) => train(&a),
        Command::Evaluate(a) => evaluate_cmd(&a),
        Command::Saliency(a) => saliency(&a),
        Command::Profile(a) => profile_cmd(&a),
    }
}

fn read_json_file<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    if !path.is_file() {
        return Err(Error::Config(format!("{} does not exist", path.display())));
    }
    serde_json::from_str(&fs::read_to_string(path)?).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn make_synthetic(a: &MakeSyntheticArgs) -> Result<()> {
    let spec: SyntheticSpec = match &a.spec {
        Some(p) => read_json_file(p)?,
        None => SyntheticSpec::default(),
    };
    spec.validate()?;
    let manifest = generate_synthetic(&spec, &a.out)?;
    write_effective_config(&a.out, &spec)?;
    eprintln!(
        "wrote {} images ({} train identities) to {}",
        manifest.entries().len(),
        manifest.num_train_identities(),
        a.out.display()
    );
    Ok(())
}

fn progress(r: &TrainRecord) {
    if r.iter % 50 == 0 {
        eprintln!(
            "iter {:>6} epoch {:>3}  L_c {:.4}  L_t {:.4}  L_s {:.4}  lr {:.2e}",
            r.iter, r.epoch, r.l_c, r.l_t, r.l_s, r.lr
        );
    }
}

fn train(a: &TrainArgs) -> Result<()> {
    let mut cfg = resolve_config(a.config.as_deref(), &a.sets)?;
    if a.baseline {
        cfg.train = cfg.train.baseline();
    }
    let manifest = load_manifest(&a.data)?;
    let (resume, prior_log) = match &a.resume {
        Some(path) => {
            let ckpt = load_checkpoint(path)?;
            let log_path = a.out.join(TRAIN_LOG_FILE);
            let mut log = if log_path.is_file() { TrainLog::read_csv(&log_path)? } else { TrainLog::default() };
            log.records.retain(|r| r.iter < ckpt.state.iteration);
            (Some(ckpt.state), log)
        }
        None => (None, TrainLog::default()),
    };
    write_effective_config(&a.out, &cfg)?;
    let outcome = run_training(
        &cfg.train,
        &manifest,
        resume,
        RunOptions {
            out_dir: Some(a.out.clone()),
            stop_after_epoch: a.stop_after_epoch,
            prior_log,
            on_step: if a.quiet { None } else { Some(progress) },
        },
    )?;
    eprintln!(
        "finished {} iterations ({} epochs); log and checkpoint in {}",
        outcome.state.iteration,
        outcome.state.epoch,
        a.out.display()
    );
    Ok(())
}

fn labels_of(samples: &[crate::datamodel::ImageSample]) -> Result<SetLabels> {
    SetLabels::new(
        samples.iter().map(|s| s.identity()).collect(),
        samples.iter().map(|s| s.camera()).collect(),
    )
}

fn evaluate_cmd(a: &EvaluateArgs) -> Result<()> {
    let protocol: Protocol = a.protocol.parse()?;
    let ckpt = load_checkpoint(&a.checkpoint)?;
    let manifest = load_manifest(&a.data)?;
    let eval_cfg = EvalConfig {
        protocol,
        ..EvalConfig::default()
    };
    write_effective_config(
        &a.out,
        &json!({"train": ckpt.config, "eval": eval_cfg, "checkpoint": a.checkpoint, "data": a.data, "model": if a.student { "student" } else { "teacher" }}),
    )?;
    let query = manifest.load_samples(Split::Query)?;
    let gallery = manifest.load_samples(Split::Gallery)?;
    if query.is_empty() || gallery.is_empty() {
        return Err(Error::Data("manifest needs query and gallery entries".into()));
    }
    let (ql, gl) = (labels_of(&query)?, labels_of(&gallery)?);
    let encoder = if a.student { &ckpt.state.pair.student } else { &ckpt.state.pair.teacher };
    let size = ckpt.config.augment.global_size;
    let embed = |set: &[crate::datamodel::ImageSample]| {
        let images: Vec<_> = set.iter().map(|s| s.pixels().clone()).collect();
        extract_embeddings(encoder, &ckpt.state.head.bn, &images, size)
    };
    let (qe, ge) = (embed(&query)?, embed(&gallery)?);
    let metrics = evaluate(&qe, &ql, &ge, &gl, protocol, &eval_cfg.cmc_ranks)?;
    fs::write(a.out.join("metrics.json"), serde_json::to_string_pretty(&metrics)?)?;

    let mut all = qe.data().to_vec();
    all.extend_from_slice(ge.data());
    let joint = EmbeddingMatrix::new(qe.rows() + ge.rows(), qe.dim(), all)?;
    let mut ids = ql.identities.clone();
    ids.extend(&gl.identities);
    let report = distance_report(&joint, &ids)?;
    report.write_csv(a.out.join("distances.csv"))?;
    report.write_summary_json(a.out.join("distances.json"))?;
    eprintln!(
        "mAP {:.4}  CMC@1 {:.4}  mu_pos {:.4}  mu_neg {:.4}",
        metrics.map,
        metrics.cmc.get(&1).copied().unwrap_or(f64::NAN),
        report.mu_pos,
        report.mu_neg
    );
    Ok(())
}

fn saliency(a: &SaliencyArgs) -> Result<()> {
    let ckpt = load_checkpoint(&a.checkpoint)?;
    let size = ckpt.config.augment.global_size;
    let query = resize(&read_png(&a.query)?, size);
    let gallery = resize(&read_png(&a.gallery)?, size);
    write_effective_config(
        &a.out,
        &json!({"train": ckpt.config, "checkpoint": a.checkpoint, "query": a.query, "gallery": a.gallery}),
    )?;
    let res = saliency_pair(&ckpt.state.pair.teacher, &ckpt.state.head.bn, &query, &gallery)?;
    for (name, img, map, grad) in [
        ("query", &query, &res.query_map, &res.query_grad),
        ("gallery", &gallery, &res.gallery_map, &res.gallery_grad),
    ] {
        write_png(a.out.join(format!("{name}_saliency.png")), &heat_overlay(img, map, 0.6)?)?;
        write_npy(a.out.join(format!("{name}_saliency.npy")), &[map.rows(), map.cols()], map.data())?;
        write_npy(
            a.out.join(format!("{name}_gradient.npy")),
            &[3, grad.height(), grad.width()],
            grad.data(),
        )?;
    }
    fs::write(
        a.out.join("saliency.json"),
        serde_json::to_string_pretty(&json!({
            "score": res.score,
            "query": a.query,
            "gallery": a.gallery,
            "input_size": size,
        }))?,
    )?;
    eprintln!("similarity {:.6}", res.score);
    Ok(())
}

fn profile_cmd(a: &ProfileArgs) -> Result<()> {
    let (encoder, default_size, source) = match (&a.checkpoint, &a.arch) {
        (Some(path), _) => {
            let ckpt = load_checkpoint(path)?;
            (ckpt.state.pair.teacher, ckpt.config.augment.global_size, json!({"checkpoint": path}))
        }
        (None, Some(arch)) => {
            let cfg: TinyEncoderConfig = if arch == "tiny" {
                TinyEncoderConfig::default()
            } else {
                read_json_file(Path::new(arch))?
            };
            let enc = TinyEncoder::new(cfg.clone())?;
            (enc, crate::augment::AugmentConfig::default().global_size, json!({"arch": cfg}))
        }
        (None, None) => return Err(Error::Config("profile needs --checkpoint or --arch".into())),
    };
    let size = a.image_size.unwrap_or(default_size);
    write_effective_config(
        &a.out,
        &json!({"source": source, "image_size": size, "warmup": a.warmup, "iters": a.iters}),
    )?;
    let report = profile(&encoder, (size, size), a.warmup, a.iters)?;
    report.write_json(a.out.join("efficiency.json"))?;
    eprintln!(
        "{:.4} M params, {:.3} ms/image, {:.2} MB peak, {} dims",
        report.params_millions,
        report.ms_per_image,
        report.peak_memory_mb,
        encoder.dim()
    );
    Ok(())
}
