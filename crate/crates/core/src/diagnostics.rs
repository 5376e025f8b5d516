//! Read-only probes over a network and a batch, and Monte-Carlo conv stacks
//! for the variance-transmission relations.

use std::fs::File;
use std::path::Path;

use crate::error::{DivergenceReport, Error, Result};
use crate::layers::{conv_apply, conv_backward, conv_forward, softmax_xent, ConvCache, ConvGeometry};
use crate::net::{ForwardPass, Network, WeightTransform};
use crate::norm::{pws_standardize, Mode, PwsConfig};
use crate::oracle::Activation;
use crate::tensor::{Rng, Scalar, Tensor};

/// Min, mean and max of a non-empty sample.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Range {
    pub min: f64,
    pub mean: f64,
    pub max: f64,
}

impl Range {
    pub fn of(xs: &[f64]) -> Range {
        if xs.is_empty() {
            return Range {
                min: 0.0,
                mean: 0.0,
                max: 0.0,
            };
        }
        let mut r = Range {
            min: f64::INFINITY,
            mean: 0.0,
            max: f64::NEG_INFINITY,
        };
        for &x in xs {
            r.min = r.min.min(x);
            r.max = r.max.max(x);
            r.mean += x;
        }
        r.mean /= xs.len() as f64;
        r
    }
}

/// One conv layer's statistics at one step.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbeRecord {
    pub step: usize,
    /// 1-based conv layer index.
    pub layer: usize,
    pub name: String,
    pub n_l: usize,
    /// Per-filter `Var[W_o]` of the raw weights.
    pub var_w: Range,
    /// `Var_o[n_l · mean(ΔW_o)]` with `ΔW = lr · dW`; absent for forward-only probes.
    pub shift_stat: Option<f64>,
    /// Per-filter `Var[W_o − ΔW_o] / Var[W_o]`.
    pub retention: Option<Range>,
    /// Per-sample `E²[X_l]` of the layer input.
    pub e2x: Range,
    /// Per-sample `E[X_l²]`.
    pub ex2: Range,
    /// Mean over samples of `E²[X_l] / E[X_l²]` (0 when `E[X_l²] = 0`).
    pub ratio_e2x_ex2: f64,
    /// `Var[Y_l]` of the raw conv output over the whole batch.
    pub var_y: f64,
    /// `1/sqrt(min_o Var[W_o] + γ)`, PWS layers only.
    pub reciprocal: Option<f64>,
}

fn mean_var64<T: Scalar>(xs: &[T]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().map(|x| x.to_f64_lossy()).sum::<f64>() / n;
    let var = xs.iter().map(|x| (x.to_f64_lossy() - mean).powi(2)).sum::<f64>() / n;
    (mean, var)
}

fn population_var(xs: &[f64]) -> f64 {
    mean_var64(xs).1
}

/// Population variance of each filter `W_o`.
pub fn filter_variances<T: Scalar>(w: &Tensor<T>) -> Vec<f64> {
    let d = w.shape()[0];
    (0..d).map(|o| mean_var64(w.outer(o)).1).collect()
}

/// `Var_o[n_l · mean(lr · dW_o)]`.
pub fn shift_statistic<T: Scalar>(dw: &Tensor<T>, lr: f64) -> f64 {
    let d = dw.shape()[0];
    let n = (dw.len() / d) as f64;
    let means: Vec<f64> = (0..d).map(|o| n * lr * mean_var64(dw.outer(o)).0).collect();
    population_var(&means)
}

/// `Var[W_o − lr·dW_o] / Var[W_o]` for each filter.
pub fn retention_ratios<T: Scalar>(w: &Tensor<T>, dw: &Tensor<T>, lr: f64) -> Vec<f64> {
    let d = w.shape()[0];
    (0..d)
        .map(|o| {
            let next: Vec<f64> = w
                .outer(o)
                .iter()
                .zip(dw.outer(o))
                .map(|(&a, &g)| a.to_f64_lossy() - lr * g.to_f64_lossy())
                .collect();
            let before = mean_var64(w.outer(o)).1;
            let after = population_var(&next);
            if before == 0.0 && after == 0.0 {
                1.0
            } else {
                after / before
            }
        })
        .collect()
}

/// Per-sample `E²[X]` and `E[X²]` ranges, and the mean per-sample ratio.
pub fn activation_stats<T: Scalar>(x: &Tensor<T>) -> (Range, Range, f64) {
    let n = x.shape()[0];
    let mut e2 = Vec::with_capacity(n);
    let mut sq = Vec::with_capacity(n);
    let mut ratio = 0.0;
    for s in 0..n {
        let xs = x.outer(s);
        let len = xs.len() as f64;
        let m = xs.iter().map(|v| v.to_f64_lossy()).sum::<f64>() / len;
        let m2 = xs.iter().map(|v| v.to_f64_lossy().powi(2)).sum::<f64>() / len;
        e2.push(m * m);
        sq.push(m2);
        ratio += if m2 == 0.0 { 0.0 } else { m * m / m2 };
    }
    (Range::of(&e2), Range::of(&sq), ratio / n.max(1) as f64)
}

fn records<T: Scalar>(net: &Network<T>, pass: &ForwardPass<T>, step: usize) -> Vec<ProbeRecord> {
    let reg = net.registry();
    net.conv_layers()
        .into_iter()
        .zip(&pass.taps)
        .enumerate()
        .map(|(i, (info, tap))| {
            let w = reg.value(info.weight);
            let var_w = filter_variances(w);
            let (e2x, ex2, ratio) = activation_stats(&tap.input);
            let reciprocal = match (info.transform, info.gamma) {
                (WeightTransform::Pws, Some(g)) => {
                    let gamma = reg.value(g).data()[0].to_f64_lossy();
                    let min = var_w.iter().copied().fold(f64::INFINITY, f64::min);
                    Some(1.0 / (min + gamma).sqrt())
                }
                _ => None,
            };
            ProbeRecord {
                step,
                layer: i + 1,
                name: info.name,
                n_l: info.geom.fan_in(),
                var_w: Range::of(&var_w),
                shift_stat: None,
                retention: None,
                e2x,
                ex2,
                ratio_e2x_ex2: ratio,
                var_y: mean_var64(tap.output.data()).1,
                reciprocal,
            }
        })
        .collect()
}

/// Forward-only statistics per conv layer. Batch statistics are used in
/// normalizing layers but no running average is touched.
pub fn variance_transmission_probe<T: Scalar>(net: &Network<T>, x: &Tensor<T>, step: usize) -> Result<Vec<ProbeRecord>> {
    let pass = net.forward_pure(x, Mode::Train, true)?;
    Ok(records(net, &pass, step))
}

/// One forward and backward pass with no update; adds the gradient-shift
/// statistic and the retention ratio to every conv record.
pub fn shift_probe<T: Scalar>(net: &Network<T>, x: &Tensor<T>, labels: &[usize], lr: f64, step: usize) -> Result<Vec<ProbeRecord>> {
    let pass = net.forward_pure(x, Mode::Train, true)?;
    let (_, dlogits) = softmax_xent(&pass.logits, labels)?;
    let grads = net.backward(&pass, &dlogits)?;
    let mut out = records(net, &pass, step);
    for (rec, info) in out.iter_mut().zip(net.conv_layers()) {
        let dw = grads
            .get(info.weight)
            .ok_or_else(|| Error::state(format!("no gradient for {}", info.name)))?;
        if !dw.all_finite() {
            return Err(Error::Diverged(DivergenceReport {
                step,
                location: info.name.clone(),
                detail: format!("non-finite weight gradient at conv layer {}", rec.layer),
            }));
        }
        let w = net.registry().value(info.weight);
        rec.shift_stat = Some(shift_statistic(dw, lr));
        rec.retention = Some(Range::of(&retention_ratios(w, dw, lr)));
    }
    Ok(out)
}

/// Largest shift statistic over the given layers.
pub fn max_shift(records: &[ProbeRecord], layers: impl Fn(&ProbeRecord) -> bool) -> f64 {
    records
        .iter()
        .filter(|r| layers(r))
        .filter_map(|r| r.shift_stat)
        .fold(0.0, f64::max)
}

/// Law of total variance over the channel axis (axis 1):
/// `lhs = Var[Y]`, `rhs = mean_o Var[Y_o] + Var_o E[Y_o]`.
pub fn variance_decomposition_check(y: &Tensor<f64>) -> Result<(f64, f64, f64)> {
    let shape = y.shape();
    if shape.len() < 2 || shape[1] < 2 {
        return Err(Error::domain(format!("need at least two channels on axis 1, got shape {shape:?}")));
    }
    let (n, c) = (shape[0], shape[1]);
    let inner: usize = shape[2..].iter().product();
    let mut means = Vec::with_capacity(c);
    let mut vars = Vec::with_capacity(c);
    let mut buf = Vec::with_capacity(n * inner);
    for o in 0..c {
        buf.clear();
        for s in 0..n {
            let base = (s * c + o) * inner;
            buf.extend_from_slice(&y.data()[base..base + inner]);
        }
        let (m, v) = mean_var64(&buf);
        means.push(m);
        vars.push(v);
    }
    let lhs = mean_var64(y.data()).1;
    let rhs = vars.iter().sum::<f64>() / c as f64 + population_var(&means);
    Ok((lhs, rhs, (lhs - rhs).abs()))
}

/// Minimum per-filter weight variance and the reciprocal `1/sqrt(v + γ)`
/// for a grid of γ, recorded once per observed step.
#[derive(Clone, Debug, PartialEq)]
pub struct ReciprocalSample {
    pub step: usize,
    pub min_var: f64,
    pub reciprocals: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct ReciprocalTracker {
    layer: usize,
    gammas: Vec<f64>,
    samples: Vec<ReciprocalSample>,
}

impl ReciprocalTracker {
    pub fn new(layer: usize, gammas: Vec<f64>) -> Self {
        ReciprocalTracker {
            layer,
            gammas,
            samples: Vec::new(),
        }
    }

    pub fn layer(&self) -> usize {
        self.layer
    }

    pub fn gammas(&self) -> &[f64] {
        &self.gammas
    }

    pub fn samples(&self) -> &[ReciprocalSample] {
        &self.samples
    }

    pub fn observe<T: Scalar>(&mut self, step: usize, weight: &Tensor<T>) {
        let min_var = filter_variances(weight).into_iter().fold(f64::INFINITY, f64::min);
        let reciprocals = self.gammas.iter().map(|g| 1.0 / (min_var + g).sqrt()).collect();
        self.samples.push(ReciprocalSample {
            step,
            min_var,
            reciprocals,
        });
    }

    pub fn observe_network<T: Scalar>(&mut self, step: usize, net: &Network<T>) -> Result<()> {
        let layers = net.conv_layers();
        let info = layers
            .get(self.layer)
            .ok_or_else(|| Error::domain(format!("conv layer {} out of range ({} layers)", self.layer, layers.len())))?;
        self.observe(step, net.registry().value(info.weight));
        Ok(())
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv_writer(path)?;
        let mut header = vec!["step".to_string(), "min_var".to_string()];
        header.extend(self.gammas.iter().map(|g| format!("reciprocal_gamma_{g:e}")));
        w.write_record(&header).map_err(|e| csv_err(path, e))?;
        for s in &self.samples {
            let mut row = vec![s.step.to_string(), s.min_var.to_string()];
            row.extend(s.reciprocals.iter().map(f64::to_string));
            w.write_record(&row).map_err(|e| csv_err(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

pub const PROBE_COLUMNS: [&str; 14] = [
    "step",
    "layer",
    "n_l",
    "var_w_min",
    "var_w_mean",
    "var_w_max",
    "shift_stat",
    "retention_ratio",
    "e2x_min",
    "e2x_mean",
    "e2x_max",
    "ratio_e2x_ex2",
    "var_y",
    "reciprocal",
];

fn csv_writer(path: &Path) -> Result<csv::Writer<File>> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::Writer::from_writer(file))
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::io(path, std::io::Error::other(e))
}

fn opt(v: Option<f64>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

/// Streams probe records as CSV; the retention column carries the mean
/// over filters.
pub struct ProbeWriter {
    inner: csv::Writer<File>,
    path: std::path::PathBuf,
}

impl ProbeWriter {
    pub fn create(path: &Path) -> Result<Self> {
        let mut inner = csv_writer(path)?;
        inner.write_record(PROBE_COLUMNS).map_err(|e| csv_err(path, e))?;
        Ok(ProbeWriter {
            inner,
            path: path.to_path_buf(),
        })
    }

    pub fn write(&mut self, records: &[ProbeRecord]) -> Result<()> {
        for r in records {
            let row = [
                r.step.to_string(),
                r.layer.to_string(),
                r.n_l.to_string(),
                r.var_w.min.to_string(),
                r.var_w.mean.to_string(),
                r.var_w.max.to_string(),
                opt(r.shift_stat),
                opt(r.retention.map(|x| x.mean)),
                r.e2x.min.to_string(),
                r.e2x.mean.to_string(),
                r.e2x.max.to_string(),
                r.ratio_e2x_ex2.to_string(),
                r.var_y.to_string(),
                opt(r.reciprocal),
            ];
            self.inner.write_record(&row).map_err(|e| csv_err(&self.path, e))?;
        }
        self.inner.flush().map_err(|e| Error::io(&self.path, e))
    }
}

pub fn write_probe_csv(path: &Path, records: &[ProbeRecord]) -> Result<()> {
    ProbeWriter::create(path)?.write(records)
}

/// A stack of equal-width convolutions (no padding) on Gaussian input:
/// `X_1 = act(Y_0)`, `Y_l = conv(X_l, W_l)`, `X_{l+1} = act(Y_l)`.
#[derive(Clone, Copy, Debug)]
pub struct StackConfig {
    pub width: usize,
    pub depth: usize,
    pub kernel: usize,
    pub batch: usize,
    pub spatial: usize,
    pub activation: Activation,
}

impl StackConfig {
    pub fn new(width: usize, depth: usize) -> Self {
        StackConfig {
            width,
            depth,
            kernel: 1,
            batch: 16,
            spatial: 16,
            activation: Activation::Relu,
        }
    }

    pub fn fan_in(&self) -> usize {
        self.kernel * self.kernel * self.width
    }

    fn validate(&self) -> Result<()> {
        if self.width == 0 || self.depth == 0 || self.kernel == 0 || self.batch == 0 {
            return Err(Error::domain(format!("degenerate stack {self:?}")));
        }
        if self.spatial < self.depth * (self.kernel - 1) + 1 {
            return Err(Error::domain(format!(
                "spatial extent {} too small for {} layers of {}x{} kernels",
                self.spatial, self.depth, self.kernel, self.kernel
            )));
        }
        Ok(())
    }
}

/// How the stack's filters are produced from He-initialized draws.
#[derive(Clone, Copy, Debug)]
pub enum StackWeights {
    He,
    /// He draws with variance multiplied by the factor.
    ScaledHe(f64),
    /// He draws, then per-filter standardization.
    Pws(PwsConfig),
}

/// Per-filter offsets `δ_o` added at one layer so that `Var_o[n_l·δ_o]`
/// equals `magnitude` exactly.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ShiftInjection {
    pub layer: usize,
    pub magnitude: f64,
}

/// Statistics of one layer of a stack run.
#[derive(Clone, Debug, PartialEq)]
pub struct StackLayer {
    pub n_l: usize,
    /// `Var[Y_{l-1}]` (the Gaussian input for the first layer).
    pub var_prev: f64,
    pub var_out: f64,
    /// `E²[X_l]` and `E[X_l²]` over the whole layer input.
    pub e2x: f64,
    pub ex2: f64,
    /// Population variance of the filters actually applied.
    pub var_w: f64,
}

#[derive(Clone, Debug)]
pub struct StackRun {
    pub layers: Vec<StackLayer>,
}

impl StackRun {
    pub fn ratios(&self) -> Vec<f64> {
        self.layers.iter().map(|l| l.var_out / l.var_prev).collect()
    }

    /// `Var[Y_depth] / Var[Y_0]`.
    pub fn amplification(&self) -> f64 {
        match (self.layers.first(), self.layers.last()) {
            (Some(a), Some(b)) => b.var_out / a.var_prev,
            _ => 1.0,
        }
    }
}

struct StackTrace {
    run: StackRun,
    /// Pre-activations `Y_l` for `l = 1..=depth` and their conv caches.
    ys: Vec<Tensor<f64>>,
    caches: Vec<ConvCache<f64>>,
}

fn activate(t: &Tensor<f64>, act: Activation) -> Tensor<f64> {
    match act {
        Activation::Relu => t.map(|v| v.max(0.0)),
        Activation::Identity => t.clone(),
    }
}

fn stack_filters(
    cfg: &StackConfig,
    weights: StackWeights,
    layer: usize,
    inject: Option<ShiftInjection>,
    rng: &mut Rng,
) -> Result<Tensor<f64>> {
    let n = cfg.fan_in();
    let mut w_rng = rng.fork();
    let mut z_rng = rng.fork();
    let std = match weights {
        StackWeights::ScaledHe(f) => (2.0 * f / n as f64).sqrt(),
        _ => (2.0 / n as f64).sqrt(),
    };
    let mut w: Tensor<f64> = w_rng.gaussian_tensor(&[cfg.width, cfg.width, cfg.kernel, cfg.kernel], 0.0, std)?;
    let z: Vec<f64> = (0..cfg.width).map(|_| z_rng.gaussian()).collect();
    if let Some(inj) = inject.filter(|i| i.layer == layer) {
        let (m, v) = mean_var64(&z);
        let scale = inj.magnitude.sqrt() / (v.sqrt() * n as f64);
        for (o, zo) in z.iter().enumerate() {
            let delta = (zo - m) * scale;
            w.outer_mut(o).iter_mut().for_each(|x| *x += delta);
        }
    }
    if let StackWeights::Pws(pcfg) = weights {
        for o in 0..cfg.width {
            let hat = pws_standardize(w.outer(o), &pcfg)?;
            w.outer_mut(o).copy_from_slice(&hat);
        }
    }
    Ok(w)
}

fn run_stack(cfg: &StackConfig, weights: StackWeights, inject: Option<ShiftInjection>, seed: u64, keep: bool) -> Result<StackTrace> {
    cfg.validate()?;
    let mut rng = Rng::new(seed);
    let mut y: Tensor<f64> = rng
        .fork()
        .gaussian_tensor(&[cfg.batch, cfg.width, cfg.spatial, cfg.spatial], 0.0, 1.0)?;
    let geom = ConvGeometry::new(cfg.width, cfg.width, cfg.kernel, 1, 0);
    let mut layers = Vec::with_capacity(cfg.depth);
    let (mut ys, mut caches) = (Vec::new(), Vec::new());
    for l in 0..cfg.depth {
        let w = stack_filters(cfg, weights, l, inject, &mut rng)?;
        let x = activate(&y, cfg.activation);
        let (m, _) = mean_var64(x.data());
        let ex2 = x.data().iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
        let var_prev = mean_var64(y.data()).1;
        let next = if keep {
            let (out, cache) = conv_forward(&x, &w, None, &geom)?;
            caches.push(cache);
            out
        } else {
            conv_apply(&x, &w, None, &geom)?
        };
        layers.push(StackLayer {
            n_l: cfg.fan_in(),
            var_prev,
            var_out: mean_var64(next.data()).1,
            e2x: m * m,
            ex2,
            var_w: mean_var64(w.data()).1,
        });
        y = next;
        if keep {
            ys.push(y.clone());
        }
    }
    Ok(StackTrace {
        run: StackRun { layers },
        ys,
        caches,
    })
}

/// Forward statistics of one stack draw.
pub fn stack_forward(cfg: &StackConfig, weights: StackWeights, inject: Option<ShiftInjection>, seed: u64) -> Result<StackRun> {
    Ok(run_stack(cfg, weights, inject, seed, false)?.run)
}

/// Per-layer `Var[Y_l]/Var[Y_{l-1}]` averaged over independent draws.
pub fn monte_carlo_ratios(cfg: &StackConfig, weights: StackWeights, trials: usize, seed: u64) -> Result<Vec<f64>> {
    let mut acc = vec![0.0; cfg.depth];
    for t in 0..trials.max(1) {
        for (a, r) in acc
            .iter_mut()
            .zip(stack_forward(cfg, weights, None, seed.wrapping_add(t as u64))?.ratios())
        {
            *a += r;
        }
    }
    Ok(acc.into_iter().map(|a| a / trials.max(1) as f64).collect())
}

/// One (magnitude, layer) cell of the shift-injection experiment.
#[derive(Clone, Debug, PartialEq)]
pub struct ShiftInjectionRow {
    pub layer: usize,
    pub magnitude: f64,
    pub var_prev: f64,
    pub e2x: f64,
    /// `Var[Y_l]` without and with the injection.
    pub var_base: f64,
    pub var_shifted: f64,
    /// `Var[Y_{l-1}] + E²[X_l] · magnitude`.
    pub predicted: f64,
    /// `Var[Y_l]` with injection over without, both after standardization.
    pub pws_ratio: f64,
}

impl ShiftInjectionRow {
    pub fn relative_error(&self) -> f64 {
        (self.var_shifted - self.predicted).abs() / self.predicted
    }

    /// Measured growth `var_shifted − var_base` against `E²[X_l] · magnitude`.
    pub fn growth_error(&self) -> f64 {
        let want = self.e2x * self.magnitude;
        ((self.var_shifted - self.var_base) - want).abs() / want
    }
}

/// Injects each magnitude at each layer in turn (all other layers left at
/// He initialization) and compares the output variance with
/// `Var[Y_{l-1}] + E²[X_l]·magnitude`. The same draws are repeated under
/// per-filter standardization. Every field is averaged over `trials`
/// independent draws.
pub fn shift_injection_experiment(
    cfg: &StackConfig,
    magnitudes: &[f64],
    pws: PwsConfig,
    trials: usize,
    seed: u64,
) -> Result<Vec<ShiftInjectionRow>> {
    let trials = trials.max(1);
    let mut rows: Vec<ShiftInjectionRow> = magnitudes
        .iter()
        .flat_map(|&magnitude| {
            (0..cfg.depth).map(move |layer| ShiftInjectionRow {
                layer,
                magnitude,
                var_prev: 0.0,
                e2x: 0.0,
                var_base: 0.0,
                var_shifted: 0.0,
                predicted: 0.0,
                pws_ratio: 0.0,
            })
        })
        .collect();
    let w = 1.0 / trials as f64;
    for t in 0..trials {
        let seed = seed.wrapping_add(t as u64);
        let base = stack_forward(cfg, StackWeights::He, None, seed)?;
        let pws_base = stack_forward(cfg, StackWeights::Pws(pws), None, seed)?;
        for row in rows.iter_mut() {
            let layer = row.layer;
            let inject = Some(ShiftInjection {
                layer,
                magnitude: row.magnitude,
            });
            let upto = StackConfig { depth: layer + 1, ..*cfg };
            let shifted = stack_forward(&upto, StackWeights::He, inject, seed)?;
            let pws_shifted = stack_forward(&upto, StackWeights::Pws(pws), inject, seed)?;
            let s = &shifted.layers[layer];
            row.var_prev += w * s.var_prev;
            row.e2x += w * s.e2x;
            row.var_base += w * base.layers[layer].var_out;
            row.var_shifted += w * s.var_out;
            row.predicted += w * (s.var_prev + s.e2x * row.magnitude);
            row.pws_ratio += w * pws_shifted.layers[layer].var_out / pws_base.layers[layer].var_out;
        }
    }
    Ok(rows)
}

/// Measured and predicted `Var[∇X_l] / Var[∇X_top]` for one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct BackwardRow {
    pub layer: usize,
    pub measured: f64,
    pub predicted: f64,
}

impl BackwardRow {
    pub fn relative_error(&self) -> f64 {
        (self.measured - self.predicted).abs() / self.predicted
    }
}

fn theta(act: Activation) -> f64 {
    match act {
        Activation::Relu => 0.5,
        Activation::Identity => 1.0,
    }
}

/// Variance of a gradient restricted to positions that every output
/// window reaches when the kernel is larger than one.
fn interior_var(g: &Tensor<f64>, margin: usize) -> Result<f64> {
    let [n, c, h, w] = g.dims4()?;
    if h <= 2 * margin || w <= 2 * margin {
        return Err(Error::domain(format!("no interior in {h}x{w} with margin {margin}")));
    }
    let mut vals = Vec::with_capacity(n * c * (h - 2 * margin) * (w - 2 * margin));
    for s in 0..n {
        let plane = g.outer(s);
        for ch in 0..c {
            for i in margin..h - margin {
                let row = &plane[(ch * h + i) * w..(ch * h + i + 1) * w];
                vals.extend_from_slice(&row[margin..w - margin]);
            }
        }
    }
    Ok(population_var(&vals))
}

/// Back-propagates a standard Gaussian gradient placed on the last
/// activation through the stack, and compares each layer's input-gradient
/// variance ratio with `Π θ · k²·d · Var[W_i]` over the layers above.
/// Both sides are averaged over `trials` independent draws.
pub fn backward_variance_check(cfg: &StackConfig, weights: StackWeights, trials: usize, seed: u64) -> Result<Vec<BackwardRow>> {
    let trials = trials.max(1);
    let mut rows: Vec<BackwardRow> = (0..cfg.depth)
        .map(|layer| BackwardRow {
            layer,
            measured: 0.0,
            predicted: 0.0,
        })
        .collect();
    for t in 0..trials {
        for (row, one) in rows.iter_mut().zip(backward_once(cfg, weights, seed.wrapping_add(t as u64))?) {
            row.measured += one.measured / trials as f64;
            row.predicted += one.predicted / trials as f64;
        }
    }
    Ok(rows)
}

fn backward_once(cfg: &StackConfig, weights: StackWeights, seed: u64) -> Result<Vec<BackwardRow>> {
    let trace = run_stack(cfg, weights, None, seed, true)?;
    let top = trace.ys.last().expect("depth validated");
    let mut g: Tensor<f64> = Rng::new(seed ^ 0x9e37_79b9_7f4a_7c15).gaussian_tensor(top.shape(), 0.0, 1.0)?;
    let margin = cfg.kernel - 1;
    let top_var = mean_var64(g.data()).1;
    let fan_out = (cfg.kernel * cfg.kernel * cfg.width) as f64;
    let th = theta(cfg.activation);
    let mut predicted = 1.0;
    let mut rows = Vec::with_capacity(cfg.depth);
    for l in (0..cfg.depth).rev() {
        let y = &trace.ys[l];
        let mut dy = g.clone();
        for (d, &z) in dy.data_mut().iter_mut().zip(y.data()) {
            *d *= cfg.activation.derivative(z);
        }
        g = conv_backward(&dy, &trace.caches[l])?.dx;
        predicted *= th * fan_out * trace.run.layers[l].var_w;
        rows.push(BackwardRow {
            layer: l,
            measured: interior_var(&g, margin * (cfg.depth - l))? / top_var,
            predicted,
        });
    }
    rows.reverse();
    Ok(rows)
}
