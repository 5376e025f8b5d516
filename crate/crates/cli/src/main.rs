use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use pws_core::config::{parse_pairs, RunConfig, KEYS};
use pws_core::data::{epoch_batches, load_split, make_batch, write_synthetic_cifar, Normalizer, Split};
use pws_core::diagnostics::{shift_probe, ProbeWriter};
use pws_core::net::{fold_checkpoint, Network, NormMode};
use pws_core::train::{bench_modes, build_network, evaluate, train_run, BenchConfig, PROBES_FILE};
use pws_core::{Error, Rng, Tensor};

/// Exit status of a training run that diverged.
const EXIT_DIVERGED: u8 = 3;

#[derive(Parser, Debug)]
#[command(
    name = "pws",
    about = "Train, evaluate, probe, fold and benchmark conv nets under plain, BN, WN, PWS and group normalization",
    after_help = "Any config key can be overridden after the subcommand as --key value, e.g. `pws train --config run.cfg --lr 0.01 --norm bn`."
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone, Default)]
struct ConfigArgs {
    /// Flat key = value config file.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train to completion or divergence.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Suppress per-epoch progress on stderr.
        #[arg(long)]
        quiet: bool,
    },
    /// Top-1 error of a checkpoint on a split.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "test")]
        split: Split,
    },
    /// Gradient-shift and variance statistics without updating parameters.
    Probe {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Probe this checkpoint instead of a freshly initialized network.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Number of training batches to probe.
        #[arg(long, default_value_t = 1)]
        batches: usize,
    },
    /// Convert a PWS checkpoint into a plain-conv checkpoint.
    Fold {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Median training-step time per normalization mode.
    Bench {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, default_value_t = 5)]
        warmup: usize,
        #[arg(long, default_value_t = 100)]
        steps: usize,
        /// Comma-separated modes; all by default.
        #[arg(long, value_delimiter = ',')]
        modes: Vec<NormMode>,
    },
    /// Write a synthetic dataset in the CIFAR-10 binary layout.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 5000)]
        train: usize,
        #[arg(long, default_value_t = 1000)]
        test: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

/// Subcommands that read a run config and accept `--key value` overrides.
const CONFIG_COMMANDS: [&str; 4] = ["train", "eval", "probe", "bench"];

/// Splits `--key value` / `--key=value` pairs for config keys out of the
/// arguments of config-reading subcommands; everything else is left for clap.
fn split_overrides(args: Vec<String>) -> Result<(Vec<String>, Vec<(String, String)>)> {
    let takes_config = args.get(1).is_some_and(|c| CONFIG_COMMANDS.contains(&c.as_str()));
    if !takes_config {
        return Ok((args, Vec::new()));
    }
    let mut rest = Vec::with_capacity(args.len());
    let mut overrides = Vec::new();
    let mut it = args.into_iter();
    while let Some(arg) = it.next() {
        let Some(flag) = arg.strip_prefix("--") else {
            rest.push(arg);
            continue;
        };
        let (key, inline) = match flag.split_once('=') {
            Some((k, v)) => (k.to_string(), Some(v.to_string())),
            None => (flag.to_string(), None),
        };
        if key == "config" || !KEYS.contains(&key.as_str()) {
            rest.push(arg);
            continue;
        }
        let value = match inline {
            Some(v) => v,
            None => it.next().with_context(|| format!("--{key} needs a value"))?,
        };
        overrides.push((key, value));
    }
    Ok((rest, overrides))
}

fn load_config(args: &ConfigArgs, overrides: &[(String, String)]) -> Result<RunConfig> {
    let mut pairs = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
            parse_pairs(&text).with_context(|| format!("in config {}", path.display()))?
        }
        None => Vec::new(),
    };
    for (k, v) in overrides {
        pairs.retain(|(seen, _)| seen != k);
        pairs.push((k.clone(), v.clone()));
    }
    Ok(RunConfig::from_pairs(&pairs)?)
}

fn cmd_train(cfg: &RunConfig, quiet: bool) -> Result<ExitCode> {
    let report = train_run(cfg, !quiet)?;
    match &report.outcome.diverged {
        Some(rep) => {
            eprintln!("{rep}");
            println!("diverged step={} location={}", rep.step, rep.location);
            println!("outputs in {}", report.out_dir.display());
            Ok(ExitCode::from(EXIT_DIVERGED))
        }
        None => {
            if let Some(m) = report.outcome.metrics.last() {
                println!("final test_err={:.4} train_loss={:.4}", m.test_err, m.train_loss);
            }
            println!("outputs in {}", report.out_dir.display());
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn normalizer(cfg: &RunConfig, dir: &Path) -> Result<Normalizer> {
    let mut train = load_split(dir, Split::Train)?;
    if cfg.train_subset > 0 {
        train.truncate(cfg.train_subset);
    }
    Ok(Normalizer::new(cfg.pixel_norm, &train)?)
}

fn cmd_eval(cfg: &RunConfig, checkpoint: &Path, split: Split) -> Result<ExitCode> {
    let net = Network::<f32>::load(checkpoint)?;
    let dir = cfg.resolve_data_dir()?;
    let norm = normalizer(cfg, &dir)?;
    let mut data = load_split(&dir, split)?;
    let subset = match split {
        Split::Train => cfg.train_subset,
        Split::Test => cfg.test_subset,
    };
    if subset > 0 {
        data.truncate(subset);
    }
    let err = evaluate(&net, &data, &norm, cfg.batch_size)?;
    println!("top1_error = {err:.6}");
    Ok(ExitCode::SUCCESS)
}

fn cmd_probe(cfg: &RunConfig, checkpoint: Option<&Path>, batches: usize) -> Result<ExitCode> {
    let net = match checkpoint {
        Some(p) => Network::<f32>::load(p)?,
        None => build_network::<f32>(cfg)?,
    };
    let dir = cfg.resolve_data_dir()?;
    let mut train = load_split(&dir, Split::Train)?;
    if cfg.train_subset > 0 {
        train.truncate(cfg.train_subset);
    }
    let norm = Normalizer::new(cfg.pixel_norm, &train)?;
    std::fs::create_dir_all(&cfg.out_dir).with_context(|| format!("creating {}", cfg.out_dir.display()))?;
    cfg.write_resolved(&cfg.out_dir)?;
    let path = cfg.out_dir.join(PROBES_FILE);
    let mut writer = ProbeWriter::create(&path)?;
    let mut rng = Rng::new(cfg.seed);
    let mut worst: Vec<(String, f64)> = Vec::new();
    for (step, idx) in epoch_batches(train.len(), cfg.batch_size, &mut rng)
        .into_iter()
        .take(batches.max(1))
        .enumerate()
    {
        let (x, labels) = make_batch(&train, &idx, &norm, None)?;
        let x: Tensor<f32> = x;
        let records = match shift_probe(&net, &x, &labels, cfg.lr, step) {
            Err(Error::Diverged(rep)) => {
                eprintln!("{rep}");
                return Ok(ExitCode::from(EXIT_DIVERGED));
            }
            other => other?,
        };
        writer.write(&records)?;
        for r in &records {
            let s = r.shift_stat.unwrap_or(0.0);
            match worst.iter_mut().find(|(n, _)| *n == r.name) {
                Some(w) => w.1 = w.1.max(s),
                None => worst.push((r.name.clone(), s)),
            }
        }
    }
    for (name, s) in &worst {
        println!("{name:<16} max shift_stat {s:.6e}");
    }
    println!("wrote {}", path.display());
    Ok(ExitCode::SUCCESS)
}

fn cmd_bench(cfg: &RunConfig, warmup: usize, steps: usize, modes: Vec<NormMode>) -> Result<ExitCode> {
    let bench = BenchConfig {
        arch: cfg.arch_config(),
        options: cfg.net_options(),
        modes: if modes.is_empty() { NormMode::ALL.to_vec() } else { modes },
        batch: cfg.batch_size,
        warmup,
        steps,
        seed: cfg.seed,
    };
    let results = bench_modes::<f32>(&bench)?;
    println!("{:<6} {:>12} {:>12} {:>14}", "mode", "median_ms", "images/s", "vs_plain");
    for r in &results {
        let overhead = r
            .overhead_vs_plain
            .map(|o| format!("{:+.1}%", 100.0 * o))
            .unwrap_or_else(|| "-".into());
        println!(
            "{:<6} {:>12.3} {:>12.1} {:>14}",
            r.mode.as_str(),
            1e3 * r.median_seconds,
            r.images_per_second,
            overhead
        );
    }
    Ok(ExitCode::SUCCESS)
}

fn run(cli: Cli, overrides: &[(String, String)]) -> Result<ExitCode> {
    let needs_config = |cfg: &ConfigArgs| load_config(cfg, overrides);
    match cli.command {
        Command::Train { cfg, quiet } => cmd_train(&needs_config(&cfg)?, quiet),
        Command::Eval { cfg, checkpoint, split } => cmd_eval(&needs_config(&cfg)?, &checkpoint, split),
        Command::Probe { cfg, checkpoint, batches } => cmd_probe(&needs_config(&cfg)?, checkpoint.as_deref(), batches),
        Command::Bench { cfg, warmup, steps, modes } => cmd_bench(&needs_config(&cfg)?, warmup, steps, modes),
        Command::Fold { input, output } => {
            fold_checkpoint(&input, &output)?;
            println!("wrote {}", output.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Synth { out, train, test, seed } => {
            write_synthetic_cifar(&out, train, test, seed)?;
            println!("wrote {} train and {} test images to {}", train, test, out.display());
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    let (args, overrides) = match split_overrides(std::env::args().collect()) {
        Ok(v) => v,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(2);
        }
    };
    let cli = Cli::parse_from(args);
    match run(cli, &overrides) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
