//! `imse` subcommands.
//!
//! Exit status: 0 on success, 1 on an error, 2 on a usage error and 3 when a
//! numerical check exceeds its tolerance.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use imse_core::model::{Model, ModelConfig, ParamReport, PUBLISHED_TOTALS};
use imse_core::spectral::Stft;
use imse_core::train::{grad_check, train_toy, BatchObjective, GradCheckReport, ToyDataset, ToyDatasetConfig, TrainOptions, TrainReport};
use imse_core::Rng;
use serde::Serialize;

use crate::bench::{self, BenchOptions};
use crate::checkpoint;
use crate::config::RunConfig;
use crate::error::{CliError, Result};
use crate::resample::resample;
use crate::wav::{wav_read, wav_write, WavFile};

#[derive(Debug, Parser)]
#[command(name = "imse", version, about = "Amplitude-aware linear attention speech enhancer")]
pub struct Cli {
    /// Seed for every random stream (initialization, data, sampling).
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Accepted for scripting symmetry; every command is already
    /// single-threaded and bit-reproducible for a given seed.
    #[arg(long, global = true)]
    pub deterministic: bool,
    /// TOML run configuration; command-line flags take precedence.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Emit JSON instead of tables or CSV.
    #[arg(long, global = true)]
    pub json: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Time linear against quadratic attention over doubling sequence lengths.
    Bench(BenchArgs),
    /// Enhance a 16-bit PCM WAV file with a checkpoint.
    Enhance(EnhanceArgs),
    /// Print parameter counts by component.
    Params(ParamsArgs),
    /// Compare analytic and finite-difference gradients of the training loss.
    Gradcheck(GradcheckArgs),
    /// Train on synthetic noisy/clean pairs and print the epoch history.
    TrainToy(TrainToyArgs),
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// Comma-separated sequence lengths.
    #[arg(long, value_delimiter = ',', default_values_t = bench::DEFAULT_SIZES)]
    pub sizes: Vec<usize>,
    #[arg(long, default_value_t = 4)]
    pub d: usize,
    #[arg(long, default_value_t = 4)]
    pub dv: usize,
    #[arg(long, default_value_t = 20)]
    pub reps: usize,
    #[arg(long, default_value_t = 2)]
    pub warmup: usize,
    /// Exit with status 3 unless linear ratios are <= 2.5 and quadratic >= 3.0.
    #[arg(long)]
    pub check: bool,
}

#[derive(Debug, Args)]
pub struct EnhanceArgs {
    pub input: PathBuf,
    pub output: PathBuf,
    #[arg(long, value_name = "PATH")]
    pub checkpoint: PathBuf,
    /// Convert other sample rates to the model rate and back.
    #[arg(long)]
    pub resample: bool,
}

#[derive(Debug, Args)]
pub struct ParamsArgs {
    /// base, tiny or smoke [default: base, or the config file's preset]
    #[arg(long)]
    pub preset: Option<String>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// [default: tiny]
    #[arg(long)]
    pub preset: Option<String>,
    #[arg(long, default_value_t = 100)]
    pub samples: usize,
    /// Central-difference step.
    #[arg(long, default_value_t = 1e-5)]
    pub step: f64,
    #[arg(long, default_value_t = 1e-3)]
    pub tolerance: f64,
    /// Toy items in the checked batch.
    #[arg(long, default_value_t = 1)]
    pub items: usize,
    /// Seconds per item.
    #[arg(long, default_value_t = 0.1)]
    pub duration: f64,
}

#[derive(Debug, Args)]
pub struct TrainToyArgs {
    /// [default: tiny]
    #[arg(long)]
    pub preset: Option<String>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Training pairs.
    #[arg(long)]
    pub items: Option<usize>,
    /// Held-out pairs.
    #[arg(long)]
    pub val_items: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Write the weights of the best held-out epoch here.
    #[arg(long, value_name = "PATH")]
    pub checkpoint: Option<PathBuf>,
}

pub fn exit_code(e: &CliError) -> i32 {
    match e {
        CliError::Tolerance(_) => 3,
        _ => 1,
    }
}

fn run_config(cli: &Cli) -> Result<RunConfig> {
    cli.config.as_deref().map_or_else(|| Ok(RunConfig::default()), RunConfig::load)
}

fn model_config(cli: &Cli, preset: Option<&str>, fallback: &str) -> Result<ModelConfig> {
    let mut cfg = run_config(cli)?;
    if let Some(p) = preset {
        cfg.model.preset = Some(p.to_owned());
    }
    cfg.model(fallback)
}

pub fn run(cli: &Cli, out: &mut dyn Write, log: &mut dyn Write) -> Result<()> {
    let io = |source| CliError::Io {
        path: PathBuf::from("<stdout>"),
        source,
    };
    match &cli.command {
        Command::Bench(a) => cmd_bench(cli, a, out, log),
        Command::Enhance(a) => {
            let summary = cmd_enhance(a, log)?;
            if cli.json {
                serde_json::to_writer(&mut *out, &summary)?;
                writeln!(out).map_err(io)?;
            }
            Ok(())
        }
        Command::Params(a) => {
            let cfg = model_config(cli, a.preset.as_deref(), "base")?;
            let name = a
                .preset
                .clone()
                .or_else(|| run_config(cli).ok()?.model.preset)
                .unwrap_or_else(|| "base".into());
            let table = params_table(&name, &cfg)?;
            if cli.json {
                serde_json::to_writer_pretty(&mut *out, &table)?;
                writeln!(out).map_err(io)?;
            } else {
                out.write_all(render_params(&table).as_bytes()).map_err(io)?;
            }
            Ok(())
        }
        Command::Gradcheck(a) => cmd_gradcheck(cli, a, out),
        Command::TrainToy(a) => cmd_train_toy(cli, a, out, log),
    }
}

fn cmd_bench(cli: &Cli, a: &BenchArgs, out: &mut dyn Write, log: &mut dyn Write) -> Result<()> {
    let opts = BenchOptions {
        sizes: a.sizes.clone(),
        d: a.d,
        dv: a.dv,
        reps: a.reps,
        warmup: a.warmup,
        ..BenchOptions::default()
    };
    let rows = bench::run_bench(&opts, &mut Rng::new(cli.seed))?;
    let ratios = bench::doubling_ratios(&rows);
    if cli.json {
        #[derive(Serialize)]
        struct Out<'a> {
            rows: &'a [bench::BenchRow],
            ratios: &'a [bench::Doubling],
        }
        serde_json::to_writer_pretty(&mut *out, &Out { rows: &rows, ratios: &ratios })?;
        let _ = writeln!(out);
    } else {
        bench::write_csv(&rows, &mut *out)?;
    }
    for r in &ratios {
        let _ = writeln!(log, "{:?} {} -> {}: x{:.3}", r.mode, r.from, r.to, r.ratio);
    }
    if a.check && !bench::scaling_ok(&ratios) {
        return Err(CliError::Tolerance(format!(
            "scaling outside bounds (linear <= {}, quadratic >= {})",
            bench::LINEAR_MAX_RATIO,
            bench::QUADRATIC_MIN_RATIO
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, Serialize)]
pub struct EnhanceSummary {
    pub input: PathBuf,
    pub output: PathBuf,
    pub sample_rate: u32,
    pub samples: usize,
    pub frames: usize,
}

/// Runs the model on a mono signal at the model rate. The signal is padded
/// with one hop of zeros in front and enough zeros behind that every sample
/// lies inside the fully overlapped region; the result has the input length.
pub fn enhance_signal(model: &Model, stft: &Stft, x: &[f64]) -> Result<(Vec<f64>, usize)> {
    if x.is_empty() {
        return Ok((Vec::new(), 0));
    }
    let cfg = stft.config();
    let need = x.len() + 2 * cfg.hop;
    let frames = if need <= cfg.frame_len {
        1
    } else {
        (need - cfg.frame_len).div_ceil(cfg.hop) + 1
    };
    let mut padded = vec![0.0; cfg.span(frames)];
    padded[cfg.hop..cfg.hop + x.len()].copy_from_slice(x);
    let spec = stft.analyze(&padded)?;
    let y = stft.synthesize(&model.enhance(&spec)?);
    Ok((y[cfg.hop..cfg.hop + x.len()].to_vec(), frames))
}

pub fn cmd_enhance(a: &EnhanceArgs, log: &mut dyn Write) -> Result<EnhanceSummary> {
    let model = checkpoint::load(&a.checkpoint)?;
    let stft = Stft::new(model.config().stft)?;
    let rate = model.config().stft.sample_rate;
    let wav = wav_read(&a.input)?;
    if wav.channels > 1 {
        let _ = writeln!(
            log,
            "warning: {}: averaging {} channels to mono",
            a.input.display(),
            wav.channels
        );
    }
    let x = wav.downmix();
    if wav.sample_rate != rate && !a.resample {
        return Err(CliError::RateMismatch {
            got: wav.sample_rate,
            expected: rate,
        });
    }
    let xm = resample(&x, wav.sample_rate, rate);
    let (ym, frames) = enhance_signal(&model, &stft, &xm)?;
    let mut y = resample(&ym, rate, wav.sample_rate);
    y.resize(x.len(), 0.0);
    wav_write(&a.output, &WavFile::mono(wav.sample_rate, y))?;
    Ok(EnhanceSummary {
        input: a.input.clone(),
        output: a.output.clone(),
        sample_rate: wav.sample_rate,
        samples: x.len(),
        frames,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct PublishedTotal {
    pub variant: &'static str,
    pub params: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ParamsTable {
    pub preset: String,
    pub config: ModelConfig,
    pub counts: ParamReport,
    /// Context only: totals of the original architecture, which this
    /// reconstruction does not reproduce.
    pub published: Vec<PublishedTotal>,
}

pub fn params_table(preset: &str, cfg: &ModelConfig) -> Result<ParamsTable> {
    let model = Model::build(*cfg, &mut Rng::new(0))?;
    Ok(ParamsTable {
        preset: preset.to_owned(),
        config: *cfg,
        counts: model.param_report(),
        published: PUBLISHED_TOTALS
            .iter()
            .map(|&(variant, params)| PublishedTotal { variant, params })
            .collect(),
    })
}

pub fn render_params(t: &ParamsTable) -> String {
    let c = &t.counts;
    let both = t.published.last().map_or(0.0, |p| p.params);
    let mut s = format!(
        "preset {} (levels {}, base channels {}, heads {})\n\n",
        t.preset, t.config.levels, t.config.base_channels, t.config.heads
    );
    s += &format!("{:<12} {:>10} {:>12}\n", "component", "params", "published*");
    for (name, n) in [
        ("embedding", c.embedding),
        ("attention", c.attention),
        ("resampling", c.resampling),
        ("head", c.head),
    ] {
        s += &format!("{name:<12} {n:>10}\n");
    }
    s += &format!(
        "{:<12} {:>10} {:>12}\n",
        "total",
        c.total,
        format!("{:.3}M", both / 1e6)
    );
    s += &format!("{:<12} {:>10.3}M\n\n", "", c.total as f64 / 1e6);
    s += "* context only: published totals of the original architecture, whose\n  block internals differ from this reconstruction. Not a target.\n";
    for p in &t.published {
        s += &format!("  {:<40} {:.3}M\n", p.variant, p.params / 1e6);
    }
    s
}

fn cmd_gradcheck(cli: &Cli, a: &GradcheckArgs, out: &mut dyn Write) -> Result<()> {
    let cfg = model_config(cli, a.preset.as_deref(), "tiny")?;
    let report = gradcheck(&cfg, a.items, a.duration, a.samples, a.step, cli.seed)?;
    let io = |source| CliError::Io {
        path: PathBuf::from("<stdout>"),
        source,
    };
    if cli.json {
        serde_json::to_writer_pretty(&mut *out, &report)?;
        writeln!(out).map_err(io)?;
    } else {
        writeln!(out, "{:>8} {:>14} {:>14} {:>10}", "index", "analytic", "numeric", "rel_error").map_err(io)?;
        for s in &report.samples {
            writeln!(out, "{:>8} {:>14.6e} {:>14.6e} {:>10.2e}", s.index, s.analytic, s.numeric, s.rel_error)
                .map_err(io)?;
        }
        writeln!(out, "max relative error {:.3e} (tolerance {:.1e})", report.max_rel_error, a.tolerance).map_err(io)?;
    }
    if !(report.max_rel_error <= a.tolerance) {
        return Err(CliError::Tolerance(format!(
            "gradient check failed: max relative error {:e} exceeds {:e}",
            report.max_rel_error, a.tolerance
        )));
    }
    Ok(())
}

/// End-to-end check of the training loss gradient on `items` toy pairs.
pub fn gradcheck(cfg: &ModelConfig, items: usize, duration: f64, samples: usize, step: f64, seed: u64) -> Result<GradCheckReport> {
    let mut root = Rng::new(seed);
    let data_cfg = ToyDatasetConfig {
        n_items: items.max(1),
        duration,
        ..ToyDatasetConfig::default()
    };
    let data = ToyDataset::generate(&data_cfg, 0, &cfg.stft, root.next_u64())?;
    let stft = Stft::new(cfg.stft)?;
    let mut obj = BatchObjective {
        model: Model::build(*cfg, &mut root.fork())?,
        stft: &stft,
        batch: &data.train,
    };
    Ok(grad_check(&mut obj, samples, step, &mut root.fork())?)
}

/// Builds a model and a dataset from `seed` and trains. Returns the trained
/// model (final weights) and the report.
pub fn toy_run(
    model_cfg: &ModelConfig,
    data_cfg: &ToyDatasetConfig,
    val_items: usize,
    opts: &TrainOptions,
    seed: u64,
) -> Result<(Model, TrainReport)> {
    let mut root = Rng::new(seed);
    let mut model = Model::build(*model_cfg, &mut root.fork())?;
    let data = ToyDataset::generate(data_cfg, val_items, &model_cfg.stft, root.next_u64())?;
    let report = train_toy(&mut model, &data, opts, &mut root.fork())?;
    Ok((model, report))
}

fn cmd_train_toy(cli: &Cli, a: &TrainToyArgs, out: &mut dyn Write, log: &mut dyn Write) -> Result<()> {
    let rc = run_config(cli)?;
    let cfg = model_config(cli, a.preset.as_deref(), "tiny")?;
    let (mut data_cfg, mut val_items) = rc.dataset();
    let mut opts = rc.train();
    if let Some(v) = a.items {
        data_cfg.n_items = v;
    }
    if let Some(v) = a.val_items {
        val_items = v;
    }
    if let Some(v) = a.epochs {
        opts.epochs = v;
    }
    if let Some(v) = a.lr {
        opts.optimizer.lr = v;
    }
    let (model, report) = toy_run(&cfg, &data_cfg, val_items, &opts, cli.seed)?;
    if cli.json {
        #[derive(Serialize)]
        struct Out<'a> {
            history: &'a [imse_core::train::EpochRecord],
            noisy_val_sisnr_db: f64,
            best_epoch: usize,
            improvement_db: f64,
        }
        serde_json::to_writer_pretty(
            &mut *out,
            &Out {
                history: &report.history,
                noisy_val_sisnr_db: report.noisy_val_sisnr_db,
                best_epoch: report.best_epoch,
                improvement_db: report.final_improvement_db(),
            },
        )?;
        let _ = writeln!(out);
    } else {
        let mut w = csv::Writer::from_writer(&mut *out);
        for r in &report.history {
            w.serialize(r)?;
        }
        w.flush().map_err(csv::Error::from)?;
    }
    let _ = writeln!(
        log,
        "noisy held-out SI-SNR {:.2} dB, final {:+.2} dB improvement, best epoch {}",
        report.noisy_val_sisnr_db,
        report.final_improvement_db(),
        report.best_epoch
    );
    if let Some(path) = &a.checkpoint {
        let best = Model::from_params(*model.config(), report.best_params.clone())?;
        checkpoint::save(path, &best)?;
        let _ = writeln!(log, "saved epoch {} weights to {}", report.best_epoch, path.display());
    }
    Ok(())
}

/// Saves a checkpoint whose mask is exactly the identity, for pipeline checks.
pub fn identity_checkpoint(path: &Path, cfg: &ModelConfig, seed: u64) -> Result<()> {
    let mut model = Model::build(*cfg, &mut Rng::new(seed))?;
    model.zero_head();
    checkpoint::save(path, &model)
}
