//! Training loop, evaluation and step-time measurement.

use std::fs::File;
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::config::{Precision, RunConfig};
use crate::data::{epoch_batches, load_cifar10, make_batch, Dataset, Normalizer};
use crate::diagnostics::{shift_probe, ProbeWriter};
use crate::error::{DivergenceReport, Error, Result};
use crate::layers::{argmax_rows, softmax_xent};
use crate::net::{ArchConfig, ArchitectureSpec, NetOptions, Network, NormMode};
use crate::norm::Mode;
use crate::optim::Sgd;
use crate::tensor::{Rng, Scalar, Tensor};

pub const METRICS_FILE: &str = "metrics.csv";
pub const PROBES_FILE: &str = "probes.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.pwsl";
pub const DIVERGENCE_FILE: &str = "divergence.txt";
pub const METRICS_COLUMNS: [&str; 6] = ["epoch", "lr", "train_loss", "train_err", "test_err", "wall_seconds"];

/// Seed offset separating the data stream from weight initialization.
const DATA_STREAM: u64 = 0x5eed_da7a;

#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_err: f64,
    pub test_err: f64,
    pub wall_seconds: f64,
}

/// Hooks called by [`train_loop`].
pub trait Observer<T> {
    /// Before the update of `step`, with the batch about to be used.
    fn before_update(&mut self, _step: usize, _net: &Network<T>, _x: &Tensor<T>, _labels: &[usize], _lr: f64) -> Result<()> {
        Ok(())
    }

    fn after_update(&mut self, _step: usize, _net: &Network<T>) -> Result<()> {
        Ok(())
    }

    fn epoch_end(&mut self, _metrics: &EpochMetrics) -> Result<()> {
        Ok(())
    }
}

/// Observer that does nothing.
pub struct NoObserver;

impl<T> Observer<T> for NoObserver {}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub metrics: Vec<EpochMetrics>,
    pub steps: usize,
    pub diverged: Option<DivergenceReport>,
}

impl TrainOutcome {
    pub fn final_test_err(&self) -> Option<f64> {
        self.metrics.last().map(|m| m.test_err)
    }
}

/// Top-1 error in inference mode over the whole dataset.
pub fn evaluate<T: Scalar>(net: &Network<T>, data: &Dataset, norm: &Normalizer, batch: usize) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::domain("cannot evaluate on an empty dataset"));
    }
    let mut wrong = 0usize;
    let indices: Vec<usize> = (0..data.len()).collect();
    for chunk in indices.chunks(batch.max(1)) {
        let (x, labels) = make_batch(data, chunk, norm, None)?;
        let logits = net.infer(&x.cast())?;
        wrong += argmax_rows(&logits)?.iter().zip(&labels).filter(|(p, l)| p != l).count();
    }
    Ok(wrong as f64 / data.len() as f64)
}

fn locate_non_finite<T: Scalar>(net: &Network<T>, x: &Tensor<T>) -> String {
    match net.forward_pure(x, Mode::Train, true) {
        Ok(pass) => net
            .conv_layers()
            .into_iter()
            .zip(&pass.taps)
            .find(|(_, tap)| !tap.output.all_finite())
            .map(|(info, _)| info.name)
            .unwrap_or_else(|| "logits".to_string()),
        Err(_) => "forward".to_string(),
    }
}

/// One SGD step. Returns the batch loss and the number of misclassified
/// samples.
pub fn train_step<T: Scalar>(
    net: &mut Network<T>,
    opt: &mut Sgd<T>,
    x: &Tensor<T>,
    labels: &[usize],
    lr: f64,
    step: usize,
) -> Result<(f64, usize)> {
    let pass = net.forward(x, Mode::Train).map_err(|e| match e {
        Error::Numeric { layer, filter, message } => Error::Diverged(DivergenceReport {
            step,
            location: layer,
            detail: format!("filter {filter}: {message}"),
        }),
        other => other,
    })?;
    let (loss, dlogits) = softmax_xent(&pass.logits, labels)?;
    let loss = loss.to_f64_lossy();
    if !loss.is_finite() {
        return Err(Error::Diverged(DivergenceReport {
            step,
            location: locate_non_finite(net, x),
            detail: "non-finite loss".into(),
        }));
    }
    let wrong = argmax_rows(&pass.logits)?.iter().zip(labels).filter(|(p, l)| p != l).count();
    let grads = net.backward(&pass, &dlogits)?;
    opt.step(net.registry_mut(), &grads, lr).map_err(|e| match e {
        Error::Diverged(mut rep) => {
            rep.step = step;
            Error::Diverged(rep)
        }
        other => other,
    })?;
    Ok((loss, wrong))
}

/// Trains `net` for `cfg.epochs` epochs. Divergence ends the loop early and
/// is reported in the outcome rather than as an error.
pub fn train_loop<T: Scalar>(
    cfg: &RunConfig,
    net: &mut Network<T>,
    train: &Dataset,
    test: &Dataset,
    norm: &Normalizer,
    observer: &mut dyn Observer<T>,
) -> Result<TrainOutcome> {
    let sgd = cfg.sgd();
    let mut opt = Sgd::new(sgd.clone(), net.registry())?;
    let mut rng = Rng::new(cfg.seed ^ DATA_STREAM);
    let start = Instant::now();
    let mut outcome = TrainOutcome {
        metrics: Vec::new(),
        steps: 0,
        diverged: None,
    };
    if train.len() < cfg.batch_size {
        return Err(Error::Config(format!(
            "training set has {} images, fewer than batch_size {}",
            train.len(),
            cfg.batch_size
        )));
    }
    for epoch in 0..cfg.epochs {
        let lr = sgd.lr_at(epoch);
        let (mut loss_sum, mut wrong, mut seen, mut batches) = (0.0, 0usize, 0usize, 0usize);
        for idx in epoch_batches(train.len(), cfg.batch_size, &mut rng) {
            let aug = if cfg.augment { Some(&mut rng) } else { None };
            let (x, labels) = make_batch(train, &idx, norm, aug)?;
            let x: Tensor<T> = x.cast();
            let step = outcome.steps;
            let result = observer
                .before_update(step, net, &x, &labels, lr)
                .and_then(|_| train_step(net, &mut opt, &x, &labels, lr, step))
                .and_then(|r| observer.after_update(step, net).map(|_| r));
            match result {
                Ok((loss, w)) => {
                    loss_sum += loss;
                    wrong += w;
                    seen += labels.len();
                    batches += 1;
                    outcome.steps += 1;
                }
                Err(Error::Diverged(rep)) => {
                    outcome.diverged = Some(rep);
                    return Ok(outcome);
                }
                Err(e) => return Err(e),
            }
        }
        let m = EpochMetrics {
            epoch,
            lr,
            train_loss: loss_sum / batches as f64,
            train_err: wrong as f64 / seen as f64,
            test_err: evaluate(net, test, norm, cfg.batch_size)?,
            wall_seconds: start.elapsed().as_secs_f64(),
        };
        observer.epoch_end(&m)?;
        outcome.metrics.push(m);
    }
    Ok(outcome)
}

/// Appends one row per epoch and flushes, so partial runs leave a usable
/// file.
pub struct MetricsWriter {
    inner: csv::Writer<File>,
    path: PathBuf,
}

impl MetricsWriter {
    pub fn create(path: &Path) -> Result<Self> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut inner = csv::Writer::from_writer(file);
        inner
            .write_record(METRICS_COLUMNS)
            .map_err(|e| Error::io(path, std::io::Error::other(e)))?;
        inner.flush().map_err(|e| Error::io(path, e))?;
        Ok(MetricsWriter {
            inner,
            path: path.to_path_buf(),
        })
    }

    pub fn write(&mut self, m: &EpochMetrics) -> Result<()> {
        let row = [
            m.epoch.to_string(),
            m.lr.to_string(),
            m.train_loss.to_string(),
            m.train_err.to_string(),
            m.test_err.to_string(),
            format!("{:.3}", m.wall_seconds),
        ];
        self.inner
            .write_record(&row)
            .map_err(|e| Error::io(&self.path, std::io::Error::other(e)))?;
        self.inner.flush().map_err(|e| Error::io(&self.path, e))
    }
}

struct FileObserver {
    metrics: MetricsWriter,
    probes: Option<(ProbeWriter, usize)>,
    verbose: bool,
}

impl<T: Scalar> Observer<T> for FileObserver {
    fn before_update(&mut self, step: usize, net: &Network<T>, x: &Tensor<T>, labels: &[usize], lr: f64) -> Result<()> {
        if let Some((writer, every)) = self.probes.as_mut() {
            if step % *every == 0 {
                writer.write(&shift_probe(net, x, labels, lr, step)?)?;
            }
        }
        Ok(())
    }

    fn epoch_end(&mut self, m: &EpochMetrics) -> Result<()> {
        if self.verbose {
            eprintln!(
                "epoch {:>3}  lr {:.2e}  loss {:.4}  train_err {:.4}  test_err {:.4}  {:.1}s",
                m.epoch, m.lr, m.train_loss, m.train_err, m.test_err, m.wall_seconds
            );
        }
        self.metrics.write(m)
    }
}

/// Training set, test set and the pixel normalizer fitted on the former.
pub struct RunData {
    pub train: Dataset,
    pub test: Dataset,
    pub norm: Normalizer,
}

impl RunData {
    pub fn load(cfg: &RunConfig) -> Result<Self> {
        let dir = cfg.resolve_data_dir()?;
        let (mut train, mut test) = load_cifar10(&dir)?;
        if cfg.train_subset > 0 {
            train.truncate(cfg.train_subset);
        }
        if cfg.test_subset > 0 {
            test.truncate(cfg.test_subset);
        }
        let norm = Normalizer::new(cfg.pixel_norm, &train)?;
        Ok(RunData { train, test, norm })
    }
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub outcome: TrainOutcome,
    pub out_dir: PathBuf,
    /// Written only when training completes.
    pub checkpoint: Option<PathBuf>,
}

pub fn build_network<T: Scalar>(cfg: &RunConfig) -> Result<Network<T>> {
    let spec = ArchitectureSpec::from_config(cfg.arch_config())?;
    Network::build(spec, cfg.norm, cfg.net_options(), &mut Rng::new(cfg.seed))
}

/// Full run: loads data, trains, and writes `config.resolved`,
/// `metrics.csv`, optionally `probes.csv`, and either a checkpoint or a
/// divergence report into `out_dir`.
pub fn train_run(cfg: &RunConfig, verbose: bool) -> Result<TrainReport> {
    let data = RunData::load(cfg)?;
    let resolved = RunConfig {
        data_dir: Some(cfg.resolve_data_dir()?),
        ..cfg.clone()
    };
    match cfg.precision {
        Precision::F32 => run_with::<f32>(&resolved, &data, verbose),
        Precision::F64 => run_with::<f64>(&resolved, &data, verbose),
    }
}

fn run_with<T: Scalar>(cfg: &RunConfig, data: &RunData, verbose: bool) -> Result<TrainReport> {
    let dir = &cfg.out_dir;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    cfg.write_resolved(dir)?;
    let mut obs = FileObserver {
        metrics: MetricsWriter::create(&dir.join(METRICS_FILE))?,
        probes: match cfg.probe_every {
            0 => None,
            every => Some((ProbeWriter::create(&dir.join(PROBES_FILE))?, every)),
        },
        verbose,
    };
    let mut net = build_network::<T>(cfg)?;
    let outcome = train_loop(cfg, &mut net, &data.train, &data.test, &data.norm, &mut obs)?;
    let checkpoint = match &outcome.diverged {
        None => {
            let path = dir.join(CHECKPOINT_FILE);
            net.save(&path)?;
            Some(path)
        }
        Some(rep) => {
            let path = dir.join(DIVERGENCE_FILE);
            let text = format!("step = {}\nlocation = {}\ndetail = {}\n", rep.step, rep.location, rep.detail);
            std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
            None
        }
    };
    Ok(TrainReport {
        outcome,
        out_dir: dir.clone(),
        checkpoint,
    })
}

#[derive(Clone, Debug)]
pub struct BenchConfig {
    pub arch: ArchConfig,
    pub options: NetOptions,
    pub modes: Vec<NormMode>,
    pub batch: usize,
    pub warmup: usize,
    pub steps: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchResult {
    pub mode: NormMode,
    pub median_seconds: f64,
    pub images_per_second: f64,
    /// `median / median(plain) − 1` when plain was measured.
    pub overhead_vs_plain: Option<f64>,
}

fn median(xs: &mut [f64]) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

/// Median wall time of a full training step (forward, loss, backward,
/// optimizer) per mode. Modes are interleaved step by step so that drift in
/// machine load affects all of them alike. The learning rate is zero, so
/// every step repeats the same arithmetic on the same values.
pub fn bench_modes<T: Scalar>(cfg: &BenchConfig) -> Result<Vec<BenchResult>> {
    if cfg.steps == 0 || cfg.modes.is_empty() {
        return Err(Error::Config("bench needs at least one step and one mode".into()));
    }
    let spec = ArchitectureSpec::from_config(cfg.arch)?;
    let mut rng = Rng::new(cfg.seed);
    let x: Tensor<T> = rng.gaussian_tensor(&[cfg.batch, cfg.arch.in_channels, cfg.arch.in_size, cfg.arch.in_size], 0.0, 1.0)?;
    let labels: Vec<usize> = (0..cfg.batch).map(|_| rng.below(cfg.arch.classes)).collect();
    let mut nets = Vec::with_capacity(cfg.modes.len());
    for &mode in &cfg.modes {
        let net = Network::<T>::build(spec.clone(), mode, cfg.options, &mut Rng::new(cfg.seed))?;
        let opt = Sgd::new(crate::optim::SgdConfig::default(), net.registry())?;
        nets.push((net, opt));
    }
    let mut times = vec![Vec::with_capacity(cfg.steps); cfg.modes.len()];
    for s in 0..cfg.warmup + cfg.steps {
        // rotate the order each round so no mode always follows the same one
        for k in 0..nets.len() {
            let i = (s + k) % nets.len();
            let (net, opt) = &mut nets[i];
            let start = Instant::now();
            train_step(net, opt, &x, &labels, 0.0, s)?;
            if s >= cfg.warmup {
                times[i].push(start.elapsed().as_secs_f64());
            }
        }
    }
    let medians: Vec<f64> = times.iter_mut().map(|t| median(t)).collect();
    let plain = cfg.modes.iter().position(|&m| m == NormMode::Plain).map(|i| medians[i]);
    Ok(cfg
        .modes
        .iter()
        .zip(&medians)
        .map(|(&mode, &m)| BenchResult {
            mode,
            median_seconds: m,
            images_per_second: cfg.batch as f64 / m,
            overhead_vs_plain: plain.map(|p| m / p - 1.0),
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{write_synthetic_cifar, PixelNorm};
    use crate::net::Preset;

    fn tiny_cfg(dir: &Path, norm: NormMode) -> RunConfig {
        RunConfig {
            arch: Preset::Tiny,
            norm,
            epochs: 2,
            batch_size: 16,
            lr: 1e-2,
            seed: 3,
            data_dir: Some(dir.to_path_buf()),
            out_dir: dir.join(format!("run-{norm}")),
            train_subset: 64,
            test_subset: 32,
            gn_groups: 4,
            ..RunConfig::default()
        }
    }

    fn data_dir() -> tempfile::TempDir {
        let dir = tempfile::tempdir().unwrap();
        write_synthetic_cifar(dir.path(), 64, 32, 1).unwrap();
        dir
    }

    #[test]
    fn run_writes_artifacts() {
        let dir = data_dir();
        let mut cfg = tiny_cfg(dir.path(), NormMode::Pws);
        cfg.probe_every = 2;
        let report = train_run(&cfg, false).unwrap();
        assert!(report.outcome.diverged.is_none());
        assert_eq!(report.outcome.metrics.len(), 2);
        assert_eq!(report.outcome.steps, 2 * 64 / 16);
        let metrics = std::fs::read_to_string(cfg.out_dir.join(METRICS_FILE)).unwrap();
        assert_eq!(metrics.lines().next().unwrap(), METRICS_COLUMNS.join(","));
        assert_eq!(metrics.lines().count(), 3);
        let probes = std::fs::read_to_string(cfg.out_dir.join(PROBES_FILE)).unwrap();
        let layers = build_network::<f32>(&cfg).unwrap().conv_layers().len();
        assert_eq!(probes.lines().count(), 1 + 4 * layers);
        let resolved = RunConfig::load(&cfg.out_dir.join(crate::config::RESOLVED_FILE)).unwrap();
        assert_eq!(resolved, cfg);
        let net = Network::<f32>::load(report.checkpoint.as_ref().unwrap()).unwrap();
        let data = RunData::load(&cfg).unwrap();
        let err = evaluate(&net, &data.test, &data.norm, 16).unwrap();
        assert_eq!(err, report.outcome.final_test_err().unwrap());
    }

    #[test]
    fn fixed_seed_is_deterministic() {
        let dir = data_dir();
        for norm in [NormMode::Bn, NormMode::Wn] {
            let cfg = tiny_cfg(dir.path(), norm);
            let a = train_run(&cfg, false).unwrap().outcome;
            let b = train_run(&cfg, false).unwrap().outcome;
            let strip = |o: &TrainOutcome| {
                o.metrics
                    .iter()
                    .map(|m| (m.epoch, m.lr, m.train_loss, m.train_err, m.test_err))
                    .collect::<Vec<_>>()
            };
            assert_eq!(strip(&a), strip(&b));
        }
    }

    #[test]
    fn evaluation_is_repeatable_and_near_chance_at_init() {
        let dir = tempfile::tempdir().unwrap();
        write_synthetic_cifar(dir.path(), 32, 400, 2).unwrap();
        let cfg = tiny_cfg(dir.path(), NormMode::Plain);
        let data = RunData::load(&RunConfig {
            test_subset: 0,
            ..cfg.clone()
        })
        .unwrap();
        let net = build_network::<f32>(&cfg).unwrap();
        let a = evaluate(&net, &data.test, &data.norm, 50).unwrap();
        let b = evaluate(&net, &data.test, &data.norm, 7).unwrap();
        assert_eq!(a, b);
        assert!(a > 0.6, "{a}");
    }

    #[test]
    fn exploding_learning_rate_is_reported() {
        let dir = data_dir();
        let mut cfg = tiny_cfg(dir.path(), NormMode::Plain);
        cfg.lr = 1e6;
        cfg.pixel_norm = PixelNorm::Scale;
        let report = train_run(&cfg, false).unwrap();
        let rep = report.outcome.diverged.expect("divergence");
        assert!(report.checkpoint.is_none());
        let text = std::fs::read_to_string(cfg.out_dir.join(DIVERGENCE_FILE)).unwrap();
        assert!(text.contains(&format!("step = {}", rep.step)));
    }

    #[test]
    fn loss_decreases_on_a_learnable_set() {
        let dir = data_dir();
        let mut cfg = tiny_cfg(dir.path(), NormMode::Pws);
        cfg.epochs = 6;
        cfg.augment = false;
        let out = train_run(&cfg, false).unwrap().outcome;
        let first = out.metrics.first().unwrap().train_loss;
        let last = out.metrics.last().unwrap().train_loss;
        assert!(last < first, "{first} -> {last}");
    }

    #[test]
    fn missing_data_is_a_clear_error() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_cfg(dir.path(), NormMode::Plain);
        assert!(matches!(train_run(&cfg, false), Err(Error::Io { .. })));
    }

    #[test]
    fn bench_reports_every_mode() {
        let mut arch = ArchConfig::new(Preset::Tiny);
        arch.in_size = 8;
        let cfg = BenchConfig {
            arch,
            options: NetOptions {
                gn_groups: 4,
                ..NetOptions::default()
            },
            modes: NormMode::ALL.to_vec(),
            batch: 4,
            warmup: 1,
            steps: 3,
            seed: 1,
        };
        let r = bench_modes::<f32>(&cfg).unwrap();
        assert_eq!(r.len(), NormMode::ALL.len());
        assert_eq!(r[0].overhead_vs_plain, Some(0.0));
        assert!(r.iter().all(|b| b.median_seconds > 0.0 && b.images_per_second.is_finite()));
    }
}
