//! Parametric weights standardization.
//!
//! Each filter is centred and rescaled before the convolution:
//!
//! ```text
//! Ŵ_o = s · (W_o − mean(W_o)) / sqrt(var(W_o) + γ),   s = sqrt(2 / n_l)
//! Y_o = α_o · (X ⊛ Ŵ_o) + β_o
//! ```
//!
//! `γ` is a fixed positive constant, `α_o` and `β_o` are trainable. Because
//! the centring is a projection, the gradient reaching `W_o` has exactly
//! zero mean for every filter, whatever the upstream gradient is.

use crate::error::{Error, Result};
use crate::layers::conv::{conv_backward, conv_forward_owned, ConvCache, ConvGeometry};
use crate::tensor::{dot, mean_var, Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PwsConfig {
    pub gamma: f64,
    /// Multiply by `sqrt(2 / n_l)`. Turning this off leaves standardized
    /// filters with variance close to 1.
    pub scale_sqrt2nl: bool,
}

impl Default for PwsConfig {
    fn default() -> Self {
        PwsConfig {
            gamma: 1e-3,
            scale_sqrt2nl: true,
        }
    }
}

/// Ways of choosing γ.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GammaPreset {
    /// 1e-3 when the learning rate is at least 1e-2, 1e-5 when it is at most
    /// 1e-3, log-linear in between.
    LearningRate,
    /// `0.1 * sqrt(n_l / 2)`.
    SqrtHalfFanIn,
    /// `0.1 * sqrt(2 / n_l)`.
    SqrtTwoOverFanIn,
}

impl GammaPreset {
    pub fn gamma(self, lr: f64, fan_in: usize) -> f64 {
        let n = fan_in as f64;
        match self {
            GammaPreset::LearningRate => {
                if lr >= 1e-2 {
                    1e-3
                } else if lr <= 1e-3 {
                    1e-5
                } else {
                    // interpolate exponent linearly between the two anchors
                    let t = (lr.log10() + 3.0) / 1.0;
                    10f64.powf(-5.0 + 2.0 * t)
                }
            }
            GammaPreset::SqrtHalfFanIn => 0.1 * (n / 2.0).sqrt(),
            GammaPreset::SqrtTwoOverFanIn => 0.1 * (2.0 / n).sqrt(),
        }
    }
}

impl PwsConfig {
    fn scale(&self, fan_in: usize) -> f64 {
        if self.scale_sqrt2nl {
            (2.0 / fan_in as f64).sqrt()
        } else {
            1.0
        }
    }
}

/// Standardize one filter. `n_l` is the filter's element count.
pub fn pws_standardize<T: Scalar>(w_o: &[T], cfg: &PwsConfig) -> Result<Vec<T>> {
    let (mean, var) = mean_var(w_o)?;
    let s = T::lit(cfg.scale(w_o.len()));
    let inv_sigma = T::one() / (var + T::lit(cfg.gamma)).sqrt();
    Ok(w_o.iter().map(|&w| s * (w - mean) * inv_sigma).collect())
}

/// A standardized filter bank plus what its backward pass needs.
#[derive(Clone, Debug)]
pub struct StandardizedBank<T> {
    pub w_hat: Tensor<T>,
    centered: Tensor<T>,
    inv_sigma: Vec<T>,
    scale: T,
}

impl<T: Scalar> StandardizedBank<T> {
    pub fn new(weight: &Tensor<T>, cfg: &PwsConfig) -> Result<Self> {
        let d = weight.shape()[0];
        let fan_in = weight.len() / d;
        let scale = T::lit(cfg.scale(fan_in));
        let gamma = T::lit(cfg.gamma);
        let mut centered = weight.clone();
        let mut w_hat = weight.zeros_like();
        let mut inv_sigma = Vec::with_capacity(d);
        for o in 0..d {
            let (mean, var) = mean_var(weight.outer(o))?;
            let inv = T::one() / (var + gamma).sqrt();
            inv_sigma.push(inv);
            let u = centered.outer_mut(o);
            for v in u.iter_mut() {
                *v = *v - mean;
            }
            for (h, &c) in w_hat.outer_mut(o).iter_mut().zip(u.iter()) {
                *h = scale * c * inv;
            }
        }
        Ok(StandardizedBank {
            w_hat,
            centered,
            inv_sigma,
            scale,
        })
    }

    /// Per-filter `1 / sqrt(var(W_o) + γ)`.
    pub fn inv_sigma(&self) -> &[T] {
        &self.inv_sigma
    }

    /// Chain rule from `dL/dŴ` to `dL/dW` through centring and scaling:
    /// `dW = s/σ · (G − mean(G) − u · mean(G ⊙ u) / σ²)`.
    pub fn backward(&self, grad_w_hat: &Tensor<T>) -> Result<Tensor<T>> {
        if grad_w_hat.shape() != self.w_hat.shape() {
            return Err(Error::ShapeMismatch {
                op: "pws weight backward",
                left: grad_w_hat.shape().to_vec(),
                right: self.w_hat.shape().to_vec(),
            });
        }
        let d = self.inv_sigma.len();
        let n = T::lit((grad_w_hat.len() / d) as f64);
        let mut dw = grad_w_hat.zeros_like();
        for o in 0..d {
            let g = grad_w_hat.outer(o);
            let u = self.centered.outer(o);
            let inv = self.inv_sigma[o];
            let g_mean = crate::tensor::sum(g) / n;
            let gu_mean = dot(g, u) / n;
            let k = gu_mean * inv * inv;
            let s = self.scale * inv;
            for ((out, &gi), &ui) in dw.outer_mut(o).iter_mut().zip(g).zip(u) {
                *out = s * (gi - g_mean - ui * k);
            }
        }
        Ok(dw)
    }
}

/// Borrowed view of a PWS layer's parameters.
#[derive(Clone, Copy, Debug)]
pub struct PwsParams<'a, T> {
    pub weight: &'a Tensor<T>,
    pub alpha: &'a [T],
    pub beta: &'a [T],
    pub cfg: PwsConfig,
}

#[derive(Clone, Debug)]
pub struct PwsCache<T> {
    conv: ConvCache<T>,
    bank: StandardizedBank<T>,
    alpha: Vec<T>,
}

impl<T: Scalar> PwsCache<T> {
    pub fn conv(&self) -> &ConvCache<T> {
        &self.conv
    }

    pub fn bank(&self) -> &StandardizedBank<T> {
        &self.bank
    }
}

#[derive(Clone, Debug)]
pub struct PwsGrads<T> {
    pub dx: Tensor<T>,
    pub dw: Tensor<T>,
    pub dalpha: Vec<T>,
    pub dbeta: Vec<T>,
}

fn check_params<T: Scalar>(params: &PwsParams<'_, T>) -> Result<usize> {
    let d = params.weight.shape()[0];
    if params.alpha.len() != d || params.beta.len() != d {
        return Err(Error::ShapeMismatch {
            op: "pws alpha/beta",
            left: vec![params.alpha.len(), params.beta.len()],
            right: vec![d],
        });
    }
    if params.cfg.gamma < 0.0 {
        return Err(Error::domain(format!("pws gamma must be non-negative, got {}", params.cfg.gamma)));
    }
    Ok(d)
}

/// Effective conv weights `α_o · Ŵ_o`.
fn scaled_bank<T: Scalar>(bank: &StandardizedBank<T>, alpha: &[T]) -> Tensor<T> {
    let mut w = bank.w_hat.clone();
    for (o, &a) in alpha.iter().enumerate() {
        for v in w.outer_mut(o) {
            *v = *v * a;
        }
    }
    w
}

pub fn pws_forward<T: Scalar>(x: &Tensor<T>, params: &PwsParams<'_, T>, geom: &ConvGeometry) -> Result<(Tensor<T>, PwsCache<T>)> {
    pws_forward_owned(x.clone(), params, geom)
}

pub(crate) fn pws_forward_owned<T: Scalar>(
    x: Tensor<T>,
    params: &PwsParams<'_, T>,
    geom: &ConvGeometry,
) -> Result<(Tensor<T>, PwsCache<T>)> {
    check_params(params)?;
    let bank = StandardizedBank::new(params.weight, &params.cfg)?;
    let w_eff = scaled_bank(&bank, params.alpha);
    let (y, conv) = conv_forward_owned(x, &w_eff, Some(params.beta), geom)?;
    Ok((
        y,
        PwsCache {
            conv,
            bank,
            alpha: params.alpha.to_vec(),
        },
    ))
}

pub fn pws_backward<T: Scalar>(dy: &Tensor<T>, cache: &PwsCache<T>) -> Result<PwsGrads<T>> {
    let g = conv_backward(dy, &cache.conv)?;
    let d = cache.alpha.len();
    let mut grad_w_hat = g.dw;
    let mut dalpha = Vec::with_capacity(d);
    for o in 0..d {
        dalpha.push(dot(grad_w_hat.outer(o), cache.bank.w_hat.outer(o)));
        let a = cache.alpha[o];
        for v in grad_w_hat.outer_mut(o) {
            *v = *v * a;
        }
    }
    let dw = cache.bank.backward(&grad_w_hat)?;
    Ok(PwsGrads {
        dx: g.dx,
        dw,
        dalpha,
        dbeta: g.db.expect("pws conv always carries beta"),
    })
}

/// Collapse a PWS layer into ordinary conv weights and bias:
/// `W_eff_o = α_o · Ŵ_o`, `b_eff_o = β_o`.
pub fn pws_fold<T: Scalar>(params: &PwsParams<'_, T>) -> Result<(Tensor<T>, Vec<T>)> {
    check_params(params)?;
    let bank = StandardizedBank::new(params.weight, &params.cfg)?;
    Ok((scaled_bank(&bank, params.alpha), params.beta.to_vec()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::conv::conv_apply;
    use crate::oracle::{conv_reference, finite_diff_grad, max_rel_error, FdConfig};
    use crate::tensor::Rng;
    use proptest::prelude::*;

    fn cfg(gamma: f64) -> PwsConfig {
        PwsConfig {
            gamma,
            scale_sqrt2nl: true,
        }
    }

    #[test]
    fn standardize_examples() {
        assert_eq!(pws_standardize(&[0.3f64; 9], &cfg(1e-3)).unwrap(), vec![0.0; 9]);
        assert_eq!(pws_standardize(&[1.0f64, -1.0], &cfg(0.0)).unwrap(), vec![1.0, -1.0]);
        let h = pws_standardize(&[1.0f64, -1.0], &cfg(1.0)).unwrap();
        let r = 1.0 / 2f64.sqrt();
        assert!((h[0] - r).abs() < 1e-15 && (h[1] + r).abs() < 1e-15);
        assert!((h[0] - 0.70711).abs() < 1e-5);
    }

    #[test]
    fn standardized_moments() {
        let mut rng = Rng::new(1);
        for _ in 0..20 {
            let w: Vec<f64> = (0..27).map(|_| 0.3 * rng.gaussian() + 0.1).collect();
            let c = cfg(1e-3);
            let h = pws_standardize(&w, &c).unwrap();
            let (_, v) = mean_var(&w).unwrap();
            let (hm, hv) = mean_var(&h).unwrap();
            assert!(hm.abs() < 1e-6);
            let want = (2.0 / 27.0) * v / (v + c.gamma);
            assert!((hv / want - 1.0).abs() < 1e-6);
            assert!(hv <= 2.0 / 27.0);
        }
    }

    #[test]
    fn gamma_presets() {
        assert_eq!(GammaPreset::LearningRate.gamma(5e-2, 27), 1e-3);
        assert_eq!(GammaPreset::LearningRate.gamma(1e-2, 27), 1e-3);
        assert_eq!(GammaPreset::LearningRate.gamma(1e-3, 27), 1e-5);
        assert!((GammaPreset::SqrtHalfFanIn.gamma(0.1, 576) - 0.1 * 288f64.sqrt()).abs() < 1e-12);
        assert!((GammaPreset::SqrtTwoOverFanIn.gamma(0.1, 576) - 0.1 * (2.0f64 / 576.0).sqrt()).abs() < 1e-12);
    }

    fn setup(seed: u64) -> (Tensor<f64>, Tensor<f64>, Vec<f64>, Vec<f64>, ConvGeometry) {
        let mut rng = Rng::new(seed);
        let geom = ConvGeometry::same(2, 3, 3);
        let x = rng.gaussian_tensor(&[2, 2, 5, 5], 0.0, 1.0).unwrap();
        let w = rng.gaussian_tensor(&[3, 2, 3, 3], 0.05, 0.3).unwrap();
        let alpha = vec![1.3, -0.7, 0.9];
        let beta = vec![0.2, -0.1, 0.5];
        (x, w, alpha, beta, geom)
    }

    #[test]
    fn gamma_zero_matches_plain_conv_of_standardized_weights() {
        let mut rng = Rng::new(2);
        let geom = ConvGeometry::same(2, 2, 3);
        let x = rng.gaussian_tensor::<f64>(&[1, 2, 4, 4], 0.0, 1.0).unwrap();
        let w = rng.gaussian_tensor::<f64>(&[2, 2, 3, 3], 0.0, 0.5).unwrap();
        // centre each filter so only the scaling remains
        let mut wc = w.clone();
        for o in 0..2 {
            let (m, _) = mean_var(w.outer(o)).unwrap();
            wc.outer_mut(o).iter_mut().for_each(|v| *v -= m);
        }
        let params = PwsParams {
            weight: &wc,
            alpha: &[1.0, 1.0],
            beta: &[0.0, 0.0],
            cfg: cfg(0.0),
        };
        let (y, _) = pws_forward(&x, &params, &geom).unwrap();
        let mut scaled = wc.clone();
        for o in 0..2 {
            let (_, v) = mean_var(wc.outer(o)).unwrap();
            let f = (2.0f64 / 18.0).sqrt() / v.sqrt();
            scaled.outer_mut(o).iter_mut().for_each(|x| *x *= f);
        }
        let want = conv_apply(&x, &scaled, None, &geom).unwrap();
        assert!(max_rel_error(y.data(), want.data()) < 1e-12);
    }

    #[test]
    fn zero_alpha_gives_beta() {
        let (x, w, _, beta, geom) = setup(3);
        let params = PwsParams {
            weight: &w,
            alpha: &[0.0, 0.0, 0.0],
            beta: &beta,
            cfg: cfg(1e-3),
        };
        let (y, _) = pws_forward(&x, &params, &geom).unwrap();
        for s in 0..2 {
            for o in 0..3 {
                assert!(y.outer(s)[o * 25..(o + 1) * 25].iter().all(|&v| v == beta[o]));
            }
        }
    }

    #[test]
    fn impulse_reads_scaled_filter() {
        let (_, w, _, _, geom) = setup(4);
        let mut x = Tensor::<f64>::zeros(&[1, 2, 5, 5]).unwrap();
        x.data_mut()[2 * 5 + 2] = 1.0;
        let params = PwsParams {
            weight: &w,
            alpha: &[2.0, 2.0, 2.0],
            beta: &[0.5, 0.5, 0.5],
            cfg: cfg(1e-3),
        };
        let (y, _) = pws_forward(&x, &params, &geom).unwrap();
        let w_hat = StandardizedBank::new(&w, &params.cfg).unwrap().w_hat;
        let want = conv_reference(&x, &w_hat.scale(2.0), Some(&[0.5, 0.5, 0.5]), &geom).unwrap();
        assert!(max_rel_error(y.data(), want.data()) < 1e-14);
        for o in 0..3 {
            for kh in 0..3 {
                for kw in 0..3 {
                    let got = y.data()[o * 25 + (3 - kh) * 5 + (3 - kw)];
                    let expect = 2.0 * w_hat.data()[o * 18 + kh * 3 + kw] + 0.5;
                    assert!((got - expect).abs() < 1e-14);
                }
            }
        }
    }

    #[test]
    fn constant_upstream_on_w_hat_is_annihilated() {
        let (_, w, _, _, _) = setup(5);
        let bank = StandardizedBank::new(&w, &cfg(1e-3)).unwrap();
        let g = Tensor::full(w.shape(), 0.37).unwrap();
        assert!(bank.backward(&g).unwrap().max_abs() < 1e-14);
    }

    #[test]
    fn backward_matches_finite_differences() {
        for seed in 0..5 {
            let (x, w, alpha, beta, geom) = setup(10 + seed);
            let mut rng = Rng::new(100 + seed);
            let dy: Tensor<f64> = rng.gaussian_tensor(&[2, 3, 5, 5], 0.0, 1.0).unwrap();
            let c = cfg(1e-3);
            let loss = |x: &Tensor<f64>, w: &Tensor<f64>, a: &[f64], b: &[f64]| {
                let p = PwsParams {
                    weight: w,
                    alpha: a,
                    beta: b,
                    cfg: c,
                };
                pws_forward(x, &p, &geom).unwrap().0.dot(&dy).unwrap()
            };
            let p = PwsParams {
                weight: &w,
                alpha: &alpha,
                beta: &beta,
                cfg: c,
            };
            let (_, cache) = pws_forward(&x, &p, &geom).unwrap();
            let g = pws_backward(&dy, &cache).unwrap();
            let fd = FdConfig::default();
            assert!(
                finite_diff_grad(|t| loss(t, &w, &alpha, &beta), &x, &fd)
                    .unwrap()
                    .max_rel_error(&g.dx)
                    < 1e-4
            );
            assert!(
                finite_diff_grad(|t| loss(&x, t, &alpha, &beta), &w, &fd)
                    .unwrap()
                    .max_rel_error(&g.dw)
                    < 1e-4
            );
            let at = Tensor::from_slice(&alpha);
            let bt = Tensor::from_slice(&beta);
            assert!(
                finite_diff_grad(|t| loss(&x, &w, t.data(), &beta), &at, &fd)
                    .unwrap()
                    .max_rel_error(&Tensor::from_slice(&g.dalpha))
                    < 1e-4
            );
            assert!(
                finite_diff_grad(|t| loss(&x, &w, &alpha, t.data()), &bt, &fd)
                    .unwrap()
                    .max_rel_error(&Tensor::from_slice(&g.dbeta))
                    < 1e-4
            );

            // dalpha_o = <dY_o, X ⊛ Ŵ_o>, dbeta_o = sum(dY_o)
            let plain = conv_apply(&x, &cache.bank.w_hat, None, &geom).unwrap();
            for o in 0..3 {
                let mut da = 0.0;
                let mut db = 0.0;
                for s in 0..2 {
                    let r = o * 25..(o + 1) * 25;
                    da += dot(&dy.outer(s)[r.clone()], &plain.outer(s)[r.clone()]);
                    db += crate::tensor::sum(&dy.outer(s)[r]);
                }
                assert!((g.dalpha[o] - da).abs() < 1e-10 * da.abs().max(1.0));
                assert!((g.dbeta[o] - db).abs() < 1e-10 * db.abs().max(1.0));
            }
        }
    }

    #[test]
    fn fold_examples() {
        let w = Tensor::<f64>::from_f64(&[1, 2, 1, 1], &[1.0, -1.0]).unwrap();
        let params = PwsParams {
            weight: &w,
            alpha: &[1.0],
            beta: &[0.0],
            cfg: cfg(0.0),
        };
        let (we, be) = pws_fold(&params).unwrap();
        assert_eq!(we.data(), &[1.0, -1.0]);
        assert_eq!(be, vec![0.0]);
        let params = PwsParams {
            alpha: &[2.0],
            beta: &[0.5],
            ..params
        };
        let (we, be) = pws_fold(&params).unwrap();
        assert_eq!(we.data(), &[2.0, -2.0]);
        assert_eq!(be, vec![0.5]);
    }

    #[test]
    fn fold_equivalence_on_random_inputs() {
        let (_, w, alpha, beta, geom) = setup(6);
        let params = PwsParams {
            weight: &w,
            alpha: &alpha,
            beta: &beta,
            cfg: cfg(1e-3),
        };
        let (we, be) = pws_fold(&params).unwrap();
        let mut rng = Rng::new(60);
        for _ in 0..10 {
            let x = rng.gaussian_tensor::<f64>(&[2, 2, 5, 5], 0.0, 1.0).unwrap();
            let (y, _) = pws_forward(&x, &params, &geom).unwrap();
            let folded = conv_apply(&x, &we, Some(&be), &geom).unwrap();
            assert!(max_rel_error(y.data(), folded.data()) <= 1e-6);
        }
    }

    proptest! {
        #[test]
        fn weight_gradient_has_zero_mean(seed in 0u64..10_000, gamma in 0.0f64..1e-2) {
            let mut rng = Rng::new(seed);
            let w: Tensor<f64> = rng.gaussian_tensor(&[4, 3, 3, 3], 0.2, 0.5).unwrap();
            let bank = StandardizedBank::new(&w, &cfg(gamma.max(1e-6))).unwrap();
            let g: Tensor<f64> = rng.gaussian_tensor(w.shape(), 0.5, 2.0).unwrap();
            let dw = bank.backward(&g).unwrap();
            for o in 0..4 {
                let (m, _) = mean_var(dw.outer(o)).unwrap();
                prop_assert!(m.abs() <= 1e-8);
            }
        }

        #[test]
        fn standardization_is_affine_invariant(seed in 0u64..10_000, c in 0.1f64..10.0, d in -5.0f64..5.0) {
            let mut rng = Rng::new(seed);
            let w: Vec<f64> = (0..18).map(|_| rng.gaussian()).collect();
            let shifted: Vec<f64> = w.iter().map(|v| c * v + d).collect();
            let base = pws_standardize(&w, &cfg(1e-3)).unwrap();
            let moved = pws_standardize(&shifted, &cfg(1e-3 * c * c)).unwrap();
            prop_assert!(max_rel_error(&base, &moved) <= 1e-8);
        }
    }
}
