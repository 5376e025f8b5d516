//! Weight normalization: `Ŵ_o = (g_o / ‖W_o‖) · W_o`.

use crate::error::{Error, Result};
use crate::layers::conv::{conv_backward, conv_forward_owned, ConvCache, ConvGeometry};
use crate::tensor::{dot, Scalar, Tensor};

/// Filters whose norm falls to this level are reported as degenerate.
pub const MIN_FILTER_NORM: f64 = 1e-12;

#[derive(Clone, Copy, Debug)]
pub struct WnParams<'a, T> {
    pub weight: &'a Tensor<T>,
    pub g: &'a [T],
    pub bias: Option<&'a [T]>,
}

/// Normalized filters and the norms they were divided by.
#[derive(Clone, Debug)]
pub struct WnBank<T> {
    pub w_hat: Tensor<T>,
    pub norms: Vec<T>,
    direction: Tensor<T>,
    g: Vec<T>,
}

impl<T: Scalar> WnBank<T> {
    pub fn new(weight: &Tensor<T>, g: &[T]) -> Result<Self> {
        let d = weight.shape()[0];
        if g.len() != d {
            return Err(Error::ShapeMismatch {
                op: "wn g",
                left: vec![g.len()],
                right: vec![d],
            });
        }
        let mut direction = weight.clone();
        let mut w_hat = weight.clone();
        let mut norms = Vec::with_capacity(d);
        for o in 0..d {
            let w = weight.outer(o);
            let norm = dot(w, w).sqrt();
            if !(norm.to_f64_lossy() > MIN_FILTER_NORM) {
                return Err(Error::Numeric {
                    layer: String::new(),
                    filter: o,
                    message: format!("filter norm {norm} is too small to normalize"),
                });
            }
            let inv = T::one() / norm;
            direction.outer_mut(o).iter_mut().for_each(|v| *v = *v * inv);
            let k = g[o] / norm;
            w_hat.outer_mut(o).iter_mut().for_each(|v| *v = *v * k);
            norms.push(norm);
        }
        Ok(WnBank {
            w_hat,
            norms,
            direction,
            g: g.to_vec(),
        })
    }

    /// From `G = dL/dŴ` to `(dL/dW, dL/dg)` with `u = W/‖W‖`:
    /// `dW = (g/‖W‖)·(G − u·⟨G, u⟩)`, `dg = ⟨G, u⟩`.
    pub fn backward(&self, grad_w_hat: &Tensor<T>) -> Result<(Tensor<T>, Vec<T>)> {
        if grad_w_hat.shape() != self.w_hat.shape() {
            return Err(Error::state("wn weight backward shape does not match forward"));
        }
        let d = self.norms.len();
        let mut dw = grad_w_hat.zeros_like();
        let mut dg = Vec::with_capacity(d);
        for o in 0..d {
            let gr = grad_w_hat.outer(o);
            let u = self.direction.outer(o);
            let radial = dot(gr, u);
            let k = self.g[o] / self.norms[o];
            for ((out, &gi), &ui) in dw.outer_mut(o).iter_mut().zip(gr).zip(u) {
                *out = k * (gi - ui * radial);
            }
            dg.push(radial);
        }
        Ok((dw, dg))
    }
}

#[derive(Clone, Debug)]
pub struct WnCache<T> {
    conv: ConvCache<T>,
    bank: WnBank<T>,
}

impl<T: Scalar> WnCache<T> {
    pub fn bank(&self) -> &WnBank<T> {
        &self.bank
    }
}

#[derive(Clone, Debug)]
pub struct WnGrads<T> {
    pub dx: Tensor<T>,
    pub dw: Tensor<T>,
    pub dg: Vec<T>,
    pub db: Option<Vec<T>>,
}

pub fn wn_forward<T: Scalar>(x: &Tensor<T>, params: &WnParams<'_, T>, geom: &ConvGeometry) -> Result<(Tensor<T>, WnCache<T>)> {
    wn_forward_owned(x.clone(), params, geom)
}

pub(crate) fn wn_forward_owned<T: Scalar>(x: Tensor<T>, params: &WnParams<'_, T>, geom: &ConvGeometry) -> Result<(Tensor<T>, WnCache<T>)> {
    let bank = WnBank::new(params.weight, params.g)?;
    let (y, conv) = conv_forward_owned(x, &bank.w_hat, params.bias, geom)?;
    Ok((y, WnCache { conv, bank }))
}

pub fn wn_backward<T: Scalar>(dy: &Tensor<T>, cache: &WnCache<T>) -> Result<WnGrads<T>> {
    let g = conv_backward(dy, &cache.conv)?;
    let (dw, dg) = cache.bank.backward(&g.dw)?;
    Ok(WnGrads {
        dx: g.dx,
        dw,
        dg,
        db: g.db,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::{finite_diff_grad, max_rel_error, FdConfig};
    use crate::tensor::{mean_var, sum, Rng};

    #[test]
    fn hand_examples() {
        let w = Tensor::<f64>::from_f64(&[1, 2, 1, 1], &[3.0, 4.0]).unwrap();
        let bank = WnBank::new(&w, &[1.0]).unwrap();
        assert!(max_rel_error(bank.w_hat.data(), &[0.6, 0.8]) < 1e-15);
        let bank = WnBank::new(&w, &[5.0]).unwrap();
        assert!(max_rel_error(bank.w_hat.data(), w.data()) < 1e-15);
    }

    #[test]
    fn variance_of_normalized_filter() {
        let mut rng = Rng::new(1);
        let w: Tensor<f64> = rng.gaussian_tensor(&[4, 3, 3, 3], 0.1, 0.5).unwrap();
        let g = [0.7, 1.0, 1.3, 2.0];
        let bank = WnBank::new(&w, &g).unwrap();
        for o in 0..4 {
            let (_, vw) = mean_var(w.outer(o)).unwrap();
            let (_, vh) = mean_var(bank.w_hat.outer(o)).unwrap();
            let norm2 = dot(w.outer(o), w.outer(o));
            assert!((vh - g[o] * g[o] * vw / norm2).abs() <= 1e-8 * vh);
        }
        // zero-mean filters with g = 1 have variance 1/n_l
        let mut wc = w.clone();
        for o in 0..4 {
            let (m, _) = mean_var(w.outer(o)).unwrap();
            wc.outer_mut(o).iter_mut().for_each(|v| *v -= m);
        }
        let bank = WnBank::new(&wc, &[1.0; 4]).unwrap();
        for o in 0..4 {
            let (_, vh) = mean_var(bank.w_hat.outer(o)).unwrap();
            assert!((vh - 1.0 / 27.0).abs() < 1e-12);
        }
    }

    #[test]
    fn vanishing_norm_is_reported() {
        let mut w = Tensor::<f64>::full(&[3, 1, 1, 2], 1.0).unwrap();
        w.outer_mut(1).fill(0.0);
        match WnBank::new(&w, &[1.0; 3]) {
            Err(Error::Numeric { filter, .. }) => assert_eq!(filter, 1),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn radial_gradient_is_annihilated() {
        let mut rng = Rng::new(2);
        let w: Tensor<f64> = rng.gaussian_tensor(&[3, 2, 3, 3], 0.0, 1.0).unwrap();
        let bank = WnBank::new(&w, &[1.0, 0.5, 2.0]).unwrap();
        let radial = bank.w_hat.scale(-1.7);
        let (dw, _) = bank.backward(&radial).unwrap();
        assert!(dw.max_abs() < 1e-12);
    }

    #[test]
    fn gradient_identities() {
        let mut rng = Rng::new(3);
        for _ in 0..20 {
            let w: Tensor<f64> = rng.gaussian_tensor(&[3, 2, 3, 3], 0.0, 1.0).unwrap();
            let g = [0.5 + rng.uniform(), 0.5 + rng.uniform(), 0.5 + rng.uniform()];
            let bank = WnBank::new(&w, &g).unwrap();
            let gr: Tensor<f64> = rng.gaussian_tensor(w.shape(), 0.3, 1.0).unwrap();
            let (dw, dg) = bank.backward(&gr).unwrap();
            for o in 0..3 {
                let (gw, wh, d) = (gr.outer(o), bank.w_hat.outer(o), dw.outer(o));
                let norm = bank.norms[o];
                let lhs = dot(d, d);
                let rhs = g[o] * g[o] / (norm * norm) * (dot(gw, gw) - dot(gw, wh).powi(2) / (g[o] * g[o]));
                assert!((lhs - rhs).abs() <= 1e-8 * rhs);
                let dg_direct = dot(gw, w.outer(o)) / norm;
                assert!((dg[o] - dg_direct).abs() <= 1e-10 * dg_direct.abs().max(1.0));
            }
        }
    }

    #[test]
    fn mean_relation_for_centered_filters() {
        let mut rng = Rng::new(4);
        let mut w: Tensor<f64> = rng.gaussian_tensor(&[3, 4, 3, 3], 0.0, 1.0).unwrap();
        for o in 0..3 {
            let (m, _) = mean_var(w.outer(o)).unwrap();
            w.outer_mut(o).iter_mut().for_each(|v| *v -= m);
        }
        let g = [1.0, 0.8, 1.4];
        let bank = WnBank::new(&w, &g).unwrap();
        let gr: Tensor<f64> = rng.gaussian_tensor(w.shape(), 0.5, 1.0).unwrap();
        let (dw, _) = bank.backward(&gr).unwrap();
        for o in 0..3 {
            let n = 36.0;
            let lhs = sum(dw.outer(o)) / n;
            let rhs = g[o] / bank.norms[o] * sum(gr.outer(o)) / n;
            assert!((lhs - rhs).abs() <= 1e-8 * rhs.abs());
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = Rng::new(5);
        let geom = ConvGeometry::same(2, 3, 3);
        for _ in 0..3 {
            let x: Tensor<f64> = rng.gaussian_tensor(&[2, 2, 5, 5], 0.0, 1.0).unwrap();
            let w: Tensor<f64> = rng.gaussian_tensor(&[3, 2, 3, 3], 0.0, 0.5).unwrap();
            let g = vec![1.0, 0.7, 1.6];
            let b = vec![0.1, -0.2, 0.3];
            let dy: Tensor<f64> = rng.gaussian_tensor(&[2, 3, 5, 5], 0.0, 1.0).unwrap();
            let loss = |x: &Tensor<f64>, w: &Tensor<f64>, g: &[f64]| {
                let p = WnParams {
                    weight: w,
                    g,
                    bias: Some(&b),
                };
                wn_forward(x, &p, &geom).unwrap().0.dot(&dy).unwrap()
            };
            let p = WnParams {
                weight: &w,
                g: &g,
                bias: Some(&b),
            };
            let (_, cache) = wn_forward(&x, &p, &geom).unwrap();
            let grads = wn_backward(&dy, &cache).unwrap();
            let fd = FdConfig::default();
            assert!(finite_diff_grad(|t| loss(t, &w, &g), &x, &fd).unwrap().max_rel_error(&grads.dx) < 1e-4);
            assert!(finite_diff_grad(|t| loss(&x, t, &g), &w, &fd).unwrap().max_rel_error(&grads.dw) < 1e-4);
            let gt = Tensor::from_slice(&g);
            assert!(
                finite_diff_grad(|t| loss(&x, &w, t.data()), &gt, &fd)
                    .unwrap()
                    .max_rel_error(&Tensor::from_slice(&grads.dg))
                    < 1e-4
            );
        }
    }
}
