//! The `asd` command line. Exit codes: 0 on success, 1 on a usage error,
//! 2 when the command itself fails.
//!
//! Settings resolve as flags, then the `--config` TOML file, then defaults.
//! Every command prints its resolved settings as JSON before running.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use asd_core::data::{parse_manifest, synth_corpus, write_corpus, CorpusSpec, Split};
use asd_core::dsp::MelConfig;
use asd_core::eval::{angle_histogram, metrics_report, write_histogram_csv, write_report_json, write_scores_csv, Scorer};
use asd_core::losses::{LossConfig, LossVariant};
use asd_core::model::{BackboneConfig, ModelDims};
use asd_core::trainer::{load_checkpoint, save_checkpoint, train_with_dims, write_loss_log, TrainConfig};
use asd_core::{Error, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

/// Log filter variable, e.g. `ASD_LOG=debug`.
pub const LOG_ENV: &str = "ASD_LOG";

#[derive(Debug, Parser)]
#[command(name = "asd", version, about = "Anomalous sound detection toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Render a synthetic corpus of WAV files and its manifest.
    Synth(SynthArgs),
    /// Train a model and write a checkpoint plus a loss log.
    Train(TrainArgs),
    /// Score the test split and write metrics and per-clip scores.
    Eval(EvalArgs),
    /// Histogram of angles to the true class center.
    Angles(AnglesArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum LossArg {
    Ce,
    Arcface,
    Arcmix,
    NoisyArcmix,
}

impl From<LossArg> for LossVariant {
    fn from(l: LossArg) -> Self {
        match l {
            LossArg::Ce => LossVariant::Ce,
            LossArg::Arcface => LossVariant::Arcface,
            LossArg::Arcmix => LossVariant::Arcmix,
            LossArg::NoisyArcmix => LossVariant::NoisyArcmix,
        }
    }
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    types: Option<usize>,
    #[arg(long)]
    ids: Option<usize>,
    /// Normal training clips per machine.
    #[arg(long)]
    clips: Option<usize>,
    #[arg(long)]
    test_normal: Option<usize>,
    #[arg(long)]
    test_anomaly: Option<usize>,
    #[arg(long)]
    duration: Option<f64>,
    #[arg(long)]
    strength: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum)]
    loss: Option<LossArg>,
    #[arg(long)]
    margin: Option<f64>,
    #[arg(long)]
    scale: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Defaults to the checkpoint path with a `.loss.csv` extension.
    #[arg(long)]
    loss_log: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    report: PathBuf,
    #[arg(long)]
    scores: PathBuf,
    /// Upper false-positive rate of the partial AUC.
    #[arg(long)]
    p: Option<f64>,
    /// Apply the training margin to the true class when scoring.
    #[arg(long)]
    margin_at_inference: bool,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct AnglesArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    bins: Option<usize>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_parser = parse_split)]
    split: Option<Split>,
    #[arg(long)]
    config: Option<PathBuf>,
}

fn parse_split(s: &str) -> std::result::Result<Split, String> {
    s.parse()
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct ConfigFile {
    synth: SynthFile,
    model: ModelFile,
    train: TrainFile,
    eval: EvalFile,
    angles: AnglesFile,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct SynthFile {
    types: Option<usize>,
    ids: Option<usize>,
    clips: Option<usize>,
    test_normal: Option<usize>,
    test_anomaly: Option<usize>,
    duration: Option<f64>,
    strength: Option<f64>,
    noise_level: Option<f64>,
    seed: Option<u64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct ModelFile {
    n_fft: Option<usize>,
    hop: Option<usize>,
    n_mels: Option<usize>,
    channels: Option<Vec<usize>>,
    embedding_dim: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct TrainFile {
    loss: Option<String>,
    margin: Option<f64>,
    scale: Option<f64>,
    alpha: Option<f64>,
    epochs: Option<usize>,
    batch_size: Option<usize>,
    lr: Option<f64>,
    weight_decay: Option<f64>,
    seed: Option<u64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct EvalFile {
    p: Option<f64>,
    margin_at_inference: Option<bool>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct AnglesFile {
    bins: Option<usize>,
    split: Option<String>,
}

fn load_config(path: Option<&Path>) -> Result<ConfigFile> {
    let Some(path) = path else {
        return Ok(ConfigFile::default());
    };
    let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn pick<T>(flag: Option<T>, file: Option<T>, default: T) -> T {
    flag.or(file).unwrap_or(default)
}

fn variant_from_file(name: &str) -> Result<LossVariant> {
    LossArg::from_str(name, true)
        .map(LossVariant::from)
        .or_else(|_| name.parse())
        .map_err(|_| Error::Config(format!("unknown loss {name:?}")))
}

fn print_resolved<T: Serialize>(command: &str, value: &T) -> Result<()> {
    println!("{command} resolved config:\n{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

#[derive(Debug, Serialize)]
struct SynthResolved<'a> {
    out: &'a Path,
    corpus: CorpusSpec,
}

fn synth(a: SynthArgs) -> Result<()> {
    let file = load_config(a.config.as_deref())?.synth;
    let d = CorpusSpec::default();
    let corpus = CorpusSpec {
        machine_types: pick(a.types, file.types, d.machine_types),
        ids_per_type: pick(a.ids, file.ids, d.ids_per_type),
        train_per_machine: pick(a.clips, file.clips, d.train_per_machine),
        test_normal_per_machine: pick(a.test_normal, file.test_normal, d.test_normal_per_machine),
        test_anomaly_per_machine: pick(a.test_anomaly, file.test_anomaly, d.test_anomaly_per_machine),
        duration_secs: pick(a.duration, file.duration, d.duration_secs),
        anomaly_strength: pick(a.strength, file.strength, d.anomaly_strength),
        noise_level: file.noise_level.unwrap_or(d.noise_level),
        seed: pick(a.seed, file.seed, d.seed),
        ..d
    };
    print_resolved("synth", &SynthResolved { out: &a.out, corpus: corpus.clone() })?;
    let records = synth_corpus(&corpus)?;
    let manifest = write_corpus(&a.out, &records)?;
    println!("wrote {} clips and {}", records.len(), manifest.display());
    Ok(())
}

#[derive(Debug, Serialize)]
struct TrainResolved<'a> {
    manifest: &'a Path,
    out: &'a Path,
    loss_log: &'a Path,
    mel: &'a MelConfig,
    backbone: &'a BackboneConfig,
    train: &'a TrainConfig,
}

fn train(a: TrainArgs) -> Result<()> {
    let cfg = load_config(a.config.as_deref())?;
    let (m, t) = (cfg.model, cfg.train);
    let dm = MelConfig::default();
    let mel = MelConfig {
        n_fft: m.n_fft.unwrap_or(dm.n_fft),
        hop: m.hop.unwrap_or(dm.hop),
        n_mels: m.n_mels.unwrap_or(dm.n_mels),
        ..dm
    };
    let db = BackboneConfig::default();
    let backbone = BackboneConfig {
        channels: m.channels.unwrap_or(db.channels.clone()),
        embedding_dim: m.embedding_dim.unwrap_or(db.embedding_dim),
        ..db
    };
    let dl = LossConfig::default();
    let file_variant = t.loss.as_deref().map(variant_from_file).transpose()?;
    let loss = LossConfig {
        margin: pick(a.margin, t.margin, dl.margin),
        scale: pick(a.scale, t.scale, dl.scale),
        alpha: pick(a.alpha, t.alpha, dl.alpha),
        variant: pick(a.loss.map(LossVariant::from), file_variant, dl.variant),
    };
    let dt = TrainConfig::default();
    let config = TrainConfig {
        epochs: pick(a.epochs, t.epochs, dt.epochs),
        batch_size: pick(a.batch_size, t.batch_size, dt.batch_size),
        learning_rate: pick(a.lr, t.lr, dt.learning_rate),
        weight_decay: pick(a.weight_decay, t.weight_decay, dt.weight_decay),
        seed: pick(a.seed, t.seed, dt.seed),
        loss,
        ..dt
    };
    let loss_log = a.loss_log.clone().unwrap_or_else(|| a.out.with_extension("loss.csv"));
    print_resolved(
        "train",
        &TrainResolved {
            manifest: &a.manifest,
            out: &a.out,
            loss_log: &loss_log,
            mel: &mel,
            backbone: &backbone,
            train: &config,
        },
    )?;
    let manifest = parse_manifest(&a.manifest)?;
    let mut dims = ModelDims::new(mel, manifest.n_classes());
    dims.backbone = backbone;
    let (ckpt, report) = train_with_dims(&manifest, &dims, &config)?;
    save_checkpoint(&ckpt, &a.out)?;
    write_loss_log(&loss_log, &report.epoch_losses)?;
    println!(
        "wrote {} and {} (final mean loss {:.6})",
        a.out.display(),
        loss_log.display(),
        report.epoch_losses.last().copied().unwrap_or(f64::NAN)
    );
    Ok(())
}

#[derive(Debug, Serialize)]
struct EvalResolved<'a> {
    checkpoint: &'a Path,
    manifest: &'a Path,
    report: &'a Path,
    scores: &'a Path,
    p: f64,
    margin_at_inference: bool,
}

fn eval(a: EvalArgs) -> Result<()> {
    let file = load_config(a.config.as_deref())?.eval;
    let p = pick(a.p, file.p, asd_core::eval::DEFAULT_P);
    let margin = a.margin_at_inference || file.margin_at_inference.unwrap_or(false);
    print_resolved(
        "eval",
        &EvalResolved {
            checkpoint: &a.checkpoint,
            manifest: &a.manifest,
            report: &a.report,
            scores: &a.scores,
            p,
            margin_at_inference: margin,
        },
    )?;
    let scorer = Scorer::from_checkpoint(&load_checkpoint(&a.checkpoint)?, margin)?;
    let manifest = parse_manifest(&a.manifest)?;
    let (scores, _) = scorer.score_split(&manifest, Split::Test)?;
    let report = metrics_report(&scores, p)?;
    write_scores_csv(&a.scores, &scores)?;
    write_report_json(&a.report, &report)?;
    for (ty, m) in &report.per_type {
        println!("{ty}: AUC {:.4} pAUC {:.4} mAUC {:.4}", m.auc, m.pauc, m.mauc);
    }
    let avg = &report.average;
    println!("average: AUC {:.4} pAUC {:.4} mAUC {:.4}", avg.auc, avg.pauc, avg.mauc);
    Ok(())
}

#[derive(Debug, Serialize)]
struct AnglesResolved<'a> {
    checkpoint: &'a Path,
    manifest: &'a Path,
    out: &'a Path,
    bins: usize,
    split: Split,
}

fn angles(a: AnglesArgs) -> Result<()> {
    let file = load_config(a.config.as_deref())?.angles;
    let file_split = file
        .split
        .as_deref()
        .map(|s| s.parse::<Split>().map_err(Error::Config))
        .transpose()?;
    let bins = pick(a.bins, file.bins, 36);
    let split = pick(a.split, file_split, Split::Test);
    print_resolved(
        "angles",
        &AnglesResolved {
            checkpoint: &a.checkpoint,
            manifest: &a.manifest,
            out: &a.out,
            bins,
            split,
        },
    )?;
    let scorer = Scorer::from_checkpoint(&load_checkpoint(&a.checkpoint)?, false)?;
    let manifest = parse_manifest(&a.manifest)?;
    let (_, records) = scorer.score_split(&manifest, split)?;
    let hist = angle_histogram(&records, bins)?;
    write_histogram_csv(&a.out, &hist)?;
    println!("wrote {} angles to {}", records.len(), a.out.display());
    Ok(())
}

fn init_logging() {
    let env = env_logger::Env::default().filter_or(LOG_ENV, "info");
    // a second call inside one process (tests) keeps the first logger
    let _ = env_logger::Builder::from_env(env).format_timestamp(None).try_init();
}

/// Parses `argv` (program name first), runs the command and returns the
/// exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    init_logging();
    let outcome = match cli.command {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Angles(a) => angles(a),
    };
    match outcome {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_RUNTIME
        }
    }
}
