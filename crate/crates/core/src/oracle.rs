//! Independent verification machinery: central finite differences, a
//! direct nested-loop convolution, and Monte-Carlo activation statistics.
//!
//! Nothing here calls into the analytic backward passes it is used to check.

use crate::error::{Error, Result};
use crate::layers::conv::ConvGeometry;
use crate::tensor::{Rng, Scalar, Tensor};

/// Finite-difference settings. The step for element `p` is
/// `rel_step * max(|p|, 1)`.
#[derive(Clone, Debug)]
pub struct FdConfig {
    pub rel_step: f64,
    /// Number of elements to probe; `None` probes every element.
    pub budget: Option<usize>,
    pub seed: u64,
}

impl Default for FdConfig {
    fn default() -> Self {
        FdConfig {
            rel_step: 1e-3,
            budget: None,
            seed: 0,
        }
    }
}

impl FdConfig {
    pub fn sampled(budget: usize, seed: u64) -> Self {
        FdConfig {
            budget: Some(budget),
            seed,
            ..Self::default()
        }
    }
}

/// One loss evaluation. `pattern` fingerprints the piecewise-linear region
/// (ReLU masks, pool argmaxes); perturbations that change it are rejected.
#[derive(Clone, Copy, Debug)]
pub struct Evaluation {
    pub loss: f64,
    pub pattern: u64,
}

impl From<f64> for Evaluation {
    fn from(loss: f64) -> Self {
        Evaluation { loss, pattern: 0 }
    }
}

impl From<f32> for Evaluation {
    fn from(loss: f32) -> Self {
        Evaluation {
            loss: loss as f64,
            pattern: 0,
        }
    }
}

/// Finite-difference estimates at a set of flat indices.
#[derive(Clone, Debug)]
pub struct FdEstimate {
    pub entries: Vec<(usize, f64)>,
    pub rejected: usize,
}

impl FdEstimate {
    /// Max-norm relative error between the estimate and an analytic gradient
    /// at the probed indices: `max|a - n| / max(max|a|, max|n|)`.
    pub fn max_rel_error<T: Scalar>(&self, analytic: &Tensor<T>) -> f64 {
        let a: Vec<f64> = self.entries.iter().map(|&(i, _)| analytic.data()[i].to_f64_lossy()).collect();
        let n: Vec<f64> = self.entries.iter().map(|&(_, v)| v).collect();
        max_rel_error(&a, &n)
    }
}

/// `max|a - b| / max(max|a|, max|b|)`; 0 when both are identically zero.
pub fn max_rel_error<T: Scalar>(a: &[T], b: &[T]) -> f64 {
    assert_eq!(a.len(), b.len());
    let mut diff = 0.0f64;
    let mut scale = 0.0f64;
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x.to_f64_lossy(), y.to_f64_lossy());
        diff = diff.max((x - y).abs());
        scale = scale.max(x.abs()).max(y.abs());
    }
    if diff.is_nan() || scale.is_nan() {
        return f64::INFINITY;
    }
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

fn evaluate<T, F, E>(f: &mut F, p: &Tensor<T>) -> Result<Evaluation>
where
    T: Scalar,
    F: FnMut(&Tensor<T>) -> E,
    E: Into<Evaluation>,
{
    let e: Evaluation = f(p).into();
    if !e.loss.is_finite() {
        return Err(Error::Oracle(format!("non-finite loss {}", e.loss)));
    }
    Ok(e)
}

/// Central differences `(L(p+h) - L(p-h)) / 2h` on the sampled elements of
/// `param`. Elements whose perturbation changes the evaluation pattern are
/// rejected and, under a budget, replaced by fresh samples.
pub fn finite_diff_grad<T, F, E>(mut f: F, param: &Tensor<T>, cfg: &FdConfig) -> Result<FdEstimate>
where
    T: Scalar,
    F: FnMut(&Tensor<T>) -> E,
    E: Into<Evaluation>,
{
    if cfg.rel_step <= 0.0 {
        return Err(Error::Oracle("finite-difference step must be positive".into()));
    }
    let base = evaluate(&mut f, param)?;
    let len = param.len();
    let mut order: Vec<usize> = (0..len).collect();
    let want = match cfg.budget {
        Some(b) if b < len => {
            Rng::new(cfg.seed).shuffle(&mut order);
            b
        }
        _ => len,
    };
    let mut p = param.clone();
    let mut entries = Vec::with_capacity(want);
    let mut rejected = 0;
    for &i in &order {
        if entries.len() == want {
            break;
        }
        let orig = p.data()[i];
        let h = cfg.rel_step * orig.to_f64_lossy().abs().max(1.0);
        p.data_mut()[i] = T::lit(orig.to_f64_lossy() + h);
        let plus = evaluate(&mut f, &p)?;
        p.data_mut()[i] = T::lit(orig.to_f64_lossy() - h);
        let minus = evaluate(&mut f, &p)?;
        p.data_mut()[i] = orig;
        if plus.pattern != base.pattern || minus.pattern != base.pattern {
            rejected += 1;
            continue;
        }
        entries.push((i, (plus.loss - minus.loss) / (2.0 * h)));
    }
    if entries.is_empty() && len > 0 {
        return Err(Error::Oracle("every probed element crossed a kink".into()));
    }
    Ok(FdEstimate { entries, rejected })
}

/// Direct nested-loop correlation, the reference for the im2col path.
pub fn conv_reference<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, bias: Option<&[T]>, geom: &ConvGeometry) -> Result<Tensor<T>> {
    let [n, c, h, wd] = x.dims4()?;
    if c != geom.in_channels || w.shape() != geom.weight_shape() {
        return Err(Error::ShapeMismatch {
            op: "conv_reference",
            left: x.shape().to_vec(),
            right: w.shape().to_vec(),
        });
    }
    let (d, k) = (geom.out_channels, geom.kernel);
    let oh = geom.output_extent(h)?;
    let ow = geom.output_extent(wd)?;
    let mut y = Tensor::zeros(&[n, d, oh, ow])?;
    let xd = x.data();
    let wdat = w.data();
    for s in 0..n {
        for o in 0..d {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = bias.map_or(T::zero(), |b| b[o]);
                    for ci in 0..c {
                        for kh in 0..k {
                            for kw in 0..k {
                                let iy = (oy * geom.stride + kh) as isize - geom.padding as isize;
                                let ix = (ox * geom.stride + kw) as isize - geom.padding as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                let xv = xd[((s * c + ci) * h + iy as usize) * wd + ix as usize];
                                let wv = wdat[((o * c + ci) * k + kh) * k + kw];
                                acc = acc + xv * wv;
                            }
                        }
                    }
                    y.data_mut()[((s * d + o) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    Ok(y)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    pub fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ThetaEstimate {
    /// Fraction of an independent zero-mean gradient's variance that survives
    /// the activation's derivative mask.
    pub theta: f64,
    pub input_mean: f64,
    /// Set when the pre-activation sample mean is more than five standard
    /// errors from zero, i.e. the symmetric zero-mean assumption fails.
    pub assumption_violated: bool,
}

/// Monte-Carlo estimate of θ with pre-activations drawn from
/// `N(input_shift, 1)` and upstream gradients from `N(0, 1)`.
pub fn theta_estimator(activation: Activation, samples: usize, input_shift: f64, rng: &mut Rng) -> ThetaEstimate {
    assert!(samples > 1);
    let mut passed = 0.0;
    let mut total = 0.0;
    let mut zsum = 0.0;
    let mut zsq = 0.0;
    for _ in 0..samples {
        let z = input_shift + rng.gaussian();
        let g = rng.gaussian();
        let gated = activation.derivative(z) * g;
        passed += gated * gated;
        total += g * g;
        zsum += z;
        zsq += z * z;
    }
    let n = samples as f64;
    let mean = zsum / n;
    let std = (zsq / n - mean * mean).max(0.0).sqrt();
    ThetaEstimate {
        theta: passed / total,
        input_mean: mean,
        assumption_violated: mean.abs() > 5.0 * std / n.sqrt(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact() {
        let p = Tensor::from_slice(&[3.0f64]);
        let est = finite_diff_grad(|t| t.data()[0] * t.data()[0], &p, &FdConfig::default()).unwrap();
        assert!((est.entries[0].1 - 6.0).abs() < 1e-6);
    }

    #[test]
    fn constant_has_zero_gradient() {
        let p = Tensor::from_slice(&[1.0f64, -2.0, 5.0]);
        let est = finite_diff_grad(|_| 4.2f64, &p, &FdConfig::default()).unwrap();
        assert!(est.entries.iter().all(|&(_, g)| g == 0.0));
    }

    #[test]
    fn polynomial_self_test() {
        // L = sum_i (i+1) p_i^3 + p_0 p_1, gradient known in closed form.
        let p = Tensor::from_slice(&[0.3f64, -1.2, 2.0, 0.7]);
        let loss = |t: &Tensor<f64>| {
            let d = t.data();
            d.iter().enumerate().map(|(i, v)| (i as f64 + 1.0) * v.powi(3)).sum::<f64>() + d[0] * d[1]
        };
        let d = p.data();
        let exact: Vec<f64> = (0..4)
            .map(|i| {
                3.0 * (i as f64 + 1.0) * d[i] * d[i]
                    + match i {
                        0 => d[1],
                        1 => d[0],
                        _ => 0.0,
                    }
            })
            .collect();
        let cfg = FdConfig {
            rel_step: 1e-5,
            ..FdConfig::default()
        };
        let est = finite_diff_grad(loss, &p, &cfg).unwrap();
        assert!(est.max_rel_error(&Tensor::from_slice(&exact)) < 1e-8);
    }

    #[test]
    fn second_order_convergence() {
        let p = Tensor::from_slice(&[0.9f64]);
        let loss = |t: &Tensor<f64>| t.data()[0].sin() * t.data()[0].exp();
        let exact = {
            let x = 0.9f64;
            x.cos() * x.exp() + x.sin() * x.exp()
        };
        let err = |h: f64| {
            let cfg = FdConfig {
                rel_step: h,
                ..FdConfig::default()
            };
            (finite_diff_grad(loss, &p, &cfg).unwrap().entries[0].1 - exact).abs()
        };
        let ratio = err(1e-2) / err(5e-3);
        assert!((ratio - 4.0).abs() < 0.2, "ratio {ratio}");
    }

    #[test]
    fn kinks_are_rejected() {
        // |p| with p very close to the kink: the perturbed sign changes.
        let p = Tensor::from_slice(&[1e-5f64, 2.0]);
        let f = |t: &Tensor<f64>| Evaluation {
            loss: t.data().iter().map(|v| v.abs()).sum(),
            pattern: t.data().iter().enumerate().fold(0, |acc, (i, v)| acc | (((*v > 0.0) as u64) << i)),
        };
        let est = finite_diff_grad(f, &p, &FdConfig::default()).unwrap();
        assert_eq!(est.rejected, 1);
        assert_eq!(est.entries.len(), 1);
        assert_eq!(est.entries[0].0, 1);
    }

    #[test]
    fn non_finite_loss_is_an_error() {
        let p = Tensor::from_slice(&[1.0f64]);
        assert!(matches!(
            finite_diff_grad(|_| f64::NAN, &p, &FdConfig::default()),
            Err(Error::Oracle(_))
        ));
    }

    #[test]
    fn theta_relu_and_identity() {
        let mut rng = Rng::new(1);
        let relu = theta_estimator(Activation::Relu, 1_000_000, 0.0, &mut rng);
        assert!((relu.theta - 0.5).abs() < 0.01, "{}", relu.theta);
        assert!(!relu.assumption_violated);
        let id = theta_estimator(Activation::Identity, 10_000, 0.0, &mut rng);
        assert_eq!(id.theta, 1.0);
    }

    #[test]
    fn theta_flags_shifted_input() {
        let mut rng = Rng::new(2);
        let est = theta_estimator(Activation::Relu, 100_000, 1.0, &mut rng);
        assert!(est.assumption_violated);
        // P(z > 0) for z ~ N(1, 1) is about 0.841
        assert!((est.theta - 0.841).abs() < 0.01, "{}", est.theta);
    }
}
