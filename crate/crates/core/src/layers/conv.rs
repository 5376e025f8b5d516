//! 2-D convolution (cross-correlation, no kernel flip) via im2col + GEMM.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        ConvGeometry {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
        }
    }

    /// Stride 1 with `kernel / 2` zero padding, preserving odd-kernel extents.
    pub fn same(in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        Self::new(in_channels, out_channels, kernel, 1, kernel / 2)
    }

    /// Units per filter, `k * k * c`.
    pub fn fan_in(&self) -> usize {
        self.kernel * self.kernel * self.in_channels
    }

    /// Units each input element fans out to, `k * k * d`.
    pub fn fan_out(&self) -> usize {
        self.kernel * self.kernel * self.out_channels
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [self.out_channels, self.in_channels, self.kernel, self.kernel]
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.out_channels == 0 || self.kernel == 0 || self.stride == 0 {
            return Err(Error::domain(format!("degenerate conv geometry {self:?}")));
        }
        Ok(())
    }

    pub fn output_extent(&self, input: usize) -> Result<usize> {
        let padded = input + 2 * self.padding;
        if padded < self.kernel {
            return Err(Error::domain(format!(
                "input extent {input} with padding {} is smaller than kernel {}",
                self.padding, self.kernel
            )));
        }
        Ok((padded - self.kernel) / self.stride + 1)
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.padding == 0
    }
}

/// Saved forward state consumed by [`conv_backward`].
#[derive(Clone, Debug)]
pub struct ConvCache<T> {
    pub(crate) input: Tensor<T>,
    pub(crate) weight: Tensor<T>,
    pub(crate) geom: ConvGeometry,
    pub(crate) has_bias: bool,
    pub(crate) out_hw: (usize, usize),
}

impl<T: Scalar> ConvCache<T> {
    pub fn input(&self) -> &Tensor<T> {
        &self.input
    }
}

#[derive(Clone, Debug)]
pub struct ConvGrads<T> {
    pub dx: Tensor<T>,
    pub dw: Tensor<T>,
    pub db: Option<Vec<T>>,
}

fn check_inputs<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&[T]>,
    geom: &ConvGeometry,
) -> Result<(usize, usize, usize, usize, usize)> {
    geom.validate()?;
    let [n, c, h, wd] = x.dims4()?;
    if c != geom.in_channels {
        return Err(Error::ShapeMismatch {
            op: "conv input channels",
            left: x.shape().to_vec(),
            right: geom.weight_shape().to_vec(),
        });
    }
    if w.shape() != geom.weight_shape() {
        return Err(Error::ShapeMismatch {
            op: "conv weight",
            left: w.shape().to_vec(),
            right: geom.weight_shape().to_vec(),
        });
    }
    if let Some(b) = bias {
        if b.len() != geom.out_channels {
            return Err(Error::ShapeMismatch {
                op: "conv bias",
                left: vec![b.len()],
                right: vec![geom.out_channels],
            });
        }
    }
    let oh = geom.output_extent(h)?;
    let ow = geom.output_extent(wd)?;
    Ok((n, h, wd, oh, ow))
}

/// Output columns `[lo, hi)` whose input column `ox·stride + kw − pad` is in bounds.
fn valid_range(g: &ConvGeometry, kw: usize, w: usize, ow: usize) -> (usize, usize) {
    let (s, pad) = (g.stride, g.padding);
    let lo = pad.saturating_sub(kw).div_ceil(s).min(ow);
    let hi = if w + pad > kw { ((w + pad - kw - 1) / s + 1).min(ow) } else { 0 };
    (lo, hi.max(lo))
}

#[allow(clippy::too_many_arguments)]
fn im2col<T: Scalar>(x: &[T], c: usize, h: usize, w: usize, g: &ConvGeometry, oh: usize, ow: usize, cols: &mut [T]) {
    let k = g.kernel;
    let p = oh * ow;
    let pad = g.padding as isize;
    for ci in 0..c {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for kh in 0..k {
            for kw in 0..k {
                let row = (ci * k + kh) * k + kw;
                let dst = &mut cols[row * p..(row + 1) * p];
                let (lo, hi) = valid_range(g, kw, w, ow);
                for oy in 0..oh {
                    let iy = (oy * g.stride + kh) as isize - pad;
                    let out = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= h as isize {
                        out.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    out[..lo].fill(T::zero());
                    out[hi..].fill(T::zero());
                    let first = lo * g.stride + kw - g.padding;
                    if g.stride == 1 {
                        out[lo..hi].copy_from_slice(&src[first..first + hi - lo]);
                    } else {
                        for (j, o) in out[lo..hi].iter_mut().enumerate() {
                            *o = src[first + j * g.stride];
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im<T: Scalar>(cols: &[T], c: usize, h: usize, w: usize, g: &ConvGeometry, oh: usize, ow: usize, dx: &mut [T]) {
    let k = g.kernel;
    let p = oh * ow;
    let pad = g.padding as isize;
    for ci in 0..c {
        let plane = &mut dx[ci * h * w..(ci + 1) * h * w];
        for kh in 0..k {
            for kw in 0..k {
                let row = (ci * k + kh) * k + kw;
                let src = &cols[row * p..(row + 1) * p];
                let (lo, hi) = valid_range(g, kw, w, ow);
                if lo == hi {
                    continue;
                }
                let first = lo * g.stride + kw - g.padding;
                for oy in 0..oh {
                    let iy = (oy * g.stride + kh) as isize - pad;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    let row_src = &src[oy * ow + lo..oy * ow + hi];
                    if g.stride == 1 {
                        for (d, &v) in dst[first..first + hi - lo].iter_mut().zip(row_src) {
                            *d = *d + v;
                        }
                    } else {
                        for (j, &v) in row_src.iter().enumerate() {
                            let d = &mut dst[first + j * g.stride];
                            *d = *d + v;
                        }
                    }
                }
            }
        }
    }
}

/// Forward pass without building a cache.
pub fn conv_apply<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, bias: Option<&[T]>, geom: &ConvGeometry) -> Result<Tensor<T>> {
    let (n, h, wd, oh, ow) = check_inputs(x, w, bias, geom)?;
    let (c, d) = (geom.in_channels, geom.out_channels);
    let kdim = geom.fan_in();
    let p = oh * ow;
    let mut y = Tensor::zeros(&[n, d, oh, ow])?;
    let mut cols = if geom.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); kdim * p]
    };
    for s in 0..n {
        let xs = x.outer(s);
        let b: &[T] = if geom.is_pointwise() {
            xs
        } else {
            im2col(xs, c, h, wd, geom, oh, ow, &mut cols);
            &cols
        };
        let ys = y.outer_mut(s);
        if let Some(bias) = bias {
            for (o, row) in ys.chunks_exact_mut(p).enumerate() {
                row.fill(bias[o]);
            }
        }
        let beta = if bias.is_some() { T::one() } else { T::zero() };
        T::gemm(
            d,
            kdim,
            p,
            T::one(),
            w.data(),
            (kdim as isize, 1),
            b,
            (p as isize, 1),
            beta,
            ys,
            (p as isize, 1),
        );
    }
    Ok(y)
}

/// `Y[n,o] = sum over the k x k x c window of X * W_o + b_o`.
pub fn conv_forward<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, bias: Option<&[T]>, geom: &ConvGeometry) -> Result<(Tensor<T>, ConvCache<T>)> {
    let y = conv_apply(x, w, bias, geom)?;
    let [_, _, oh, ow] = y.dims4()?;
    let cache = ConvCache {
        input: x.clone(),
        weight: w.clone(),
        geom: *geom,
        has_bias: bias.is_some(),
        out_hw: (oh, ow),
    };
    Ok((y, cache))
}

/// Same as [`conv_forward`] but takes ownership of the input to avoid a copy.
pub(crate) fn conv_forward_owned<T: Scalar>(
    x: Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&[T]>,
    geom: &ConvGeometry,
) -> Result<(Tensor<T>, ConvCache<T>)> {
    let y = conv_apply(&x, w, bias, geom)?;
    let [_, _, oh, ow] = y.dims4()?;
    let cache = ConvCache {
        input: x,
        weight: w.clone(),
        geom: *geom,
        has_bias: bias.is_some(),
        out_hw: (oh, ow),
    };
    Ok((y, cache))
}

pub fn conv_backward<T: Scalar>(dy: &Tensor<T>, cache: &ConvCache<T>) -> Result<ConvGrads<T>> {
    let geom = &cache.geom;
    let [n, c, h, wd] = cache.input.dims4()?;
    let (d, kdim) = (geom.out_channels, geom.fan_in());
    let (oh, ow) = cache.out_hw;
    if dy.shape() != [n, d, oh, ow] {
        return Err(Error::state(format!(
            "conv backward got gradient of shape {:?}, cached forward produced {:?}",
            dy.shape(),
            [n, d, oh, ow]
        )));
    }
    let p = oh * ow;
    let mut dx = cache.input.zeros_like();
    let mut dw = cache.weight.zeros_like();
    let mut db = cache.has_bias.then(|| vec![T::zero(); d]);
    let pointwise = geom.is_pointwise();
    let mut cols = if pointwise { Vec::new() } else { vec![T::zero(); kdim * p] };
    let mut dcols = if pointwise { Vec::new() } else { vec![T::zero(); kdim * p] };
    for s in 0..n {
        let dys = dy.outer(s);
        if let Some(db) = db.as_mut() {
            for (o, row) in dys.chunks_exact(p).enumerate() {
                db[o] = db[o] + crate::tensor::sum(row);
            }
        }
        let xs = cache.input.outer(s);
        let b: &[T] = if pointwise {
            xs
        } else {
            im2col(xs, c, h, wd, geom, oh, ow, &mut cols);
            &cols
        };
        // dW += dY_s * cols^T
        T::gemm(
            d,
            p,
            kdim,
            T::one(),
            dys,
            (p as isize, 1),
            b,
            (1, p as isize),
            T::one(),
            dw.data_mut(),
            (kdim as isize, 1),
        );
        // dcols = W^T * dY_s
        if pointwise {
            T::gemm(
                kdim,
                d,
                p,
                T::one(),
                cache.weight.data(),
                (1, kdim as isize),
                dys,
                (p as isize, 1),
                T::zero(),
                dx.outer_mut(s),
                (p as isize, 1),
            );
        } else {
            T::gemm(
                kdim,
                d,
                p,
                T::one(),
                cache.weight.data(),
                (1, kdim as isize),
                dys,
                (p as isize, 1),
                T::zero(),
                &mut dcols,
                (p as isize, 1),
            );
            col2im(&dcols, c, h, wd, geom, oh, ow, dx.outer_mut(s));
        }
    }
    Ok(ConvGrads { dx, dw, db })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::{conv_reference, finite_diff_grad, max_rel_error, FdConfig};
    use crate::tensor::Rng;

    fn rand(shape: &[usize], rng: &mut Rng) -> Tensor<f64> {
        rng.gaussian_tensor(shape, 0.0, 1.0).unwrap()
    }

    #[test]
    fn pointwise_identity() {
        let mut rng = Rng::new(1);
        let x = rand(&[2, 1, 4, 5], &mut rng);
        let w = Tensor::from_f64(&[1, 1, 1, 1], &[1.0]).unwrap();
        let (y, _) = conv_forward(&x, &w, Some(&[0.0]), &ConvGeometry::new(1, 1, 1, 1, 0)).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn impulse_reads_off_filter() {
        let mut rng = Rng::new(2);
        let geom = ConvGeometry::same(2, 3, 3);
        let w = rand(&[3, 2, 3, 3], &mut rng);
        let mut x = Tensor::<f64>::zeros(&[1, 2, 5, 5]).unwrap();
        x.data_mut()[25 + 2 * 5 + 2] = 1.0; // channel 1 centre
        let (y, _) = conv_forward(&x, &w, None, &geom).unwrap();
        let want = conv_reference(&x, &w, None, &geom).unwrap();
        assert!(max_rel_error(y.data(), want.data()) < 1e-14);
        // correlation: output (2+1-kh, 2+1-kw) sees W[o,1,kh,kw]
        for o in 0..3 {
            for kh in 0..3 {
                for kw in 0..3 {
                    let yi = o * 25 + (3 - kh) * 5 + (3 - kw);
                    assert_eq!(y.data()[yi], w.data()[o * 18 + 9 + kh * 3 + kw]);
                }
            }
        }
    }

    #[test]
    fn zero_weights_bias_only() {
        let x = Rng::new(3).gaussian_tensor::<f64>(&[2, 3, 4, 4], 0.0, 1.0).unwrap();
        let w = Tensor::zeros(&[2, 3, 3, 3]).unwrap();
        let (y, _) = conv_forward(&x, &w, Some(&[0.5, 0.5]), &ConvGeometry::same(3, 2, 3)).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn matches_reference_with_stride_and_padding() {
        let mut rng = Rng::new(4);
        for &(k, s, p) in &[(3, 1, 1), (3, 2, 1), (3, 1, 0), (1, 2, 0), (5, 2, 2), (2, 2, 0)] {
            let geom = ConvGeometry::new(3, 4, k, s, p);
            let x = rand(&[2, 3, 7, 6], &mut rng);
            let w = rand(&geom.weight_shape(), &mut rng);
            let b = [0.1, -0.2, 0.3, 0.0];
            let y = conv_apply(&x, &w, Some(&b), &geom).unwrap();
            let want = conv_reference(&x, &w, Some(&b), &geom).unwrap();
            assert_eq!(y.shape(), want.shape());
            assert!(max_rel_error(y.data(), want.data()) < 1e-12, "k{k} s{s} p{p}");
        }
    }

    #[test]
    fn zero_upstream_gives_zero_grads() {
        let mut rng = Rng::new(5);
        let geom = ConvGeometry::same(2, 3, 3);
        let x = rand(&[2, 2, 5, 5], &mut rng);
        let w = rand(&[3, 2, 3, 3], &mut rng);
        let (y, cache) = conv_forward(&x, &w, Some(&[0.0; 3]), &geom).unwrap();
        let g = conv_backward(&y.zeros_like(), &cache).unwrap();
        assert_eq!(g.dx.max_abs(), 0.0);
        assert_eq!(g.dw.max_abs(), 0.0);
        assert!(g.db.unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn pointwise_weight_grad_is_channel_dot() {
        let mut rng = Rng::new(6);
        let geom = ConvGeometry::new(3, 2, 1, 1, 0);
        let x = rand(&[1, 3, 4, 4], &mut rng);
        let w = rand(&[2, 3, 1, 1], &mut rng);
        let (_, cache) = conv_forward(&x, &w, None, &geom).unwrap();
        let dy = rand(&[1, 2, 4, 4], &mut rng);
        let g = conv_backward(&dy, &cache).unwrap();
        for o in 0..2 {
            for ci in 0..3 {
                let want = crate::tensor::dot(&dy.data()[o * 16..(o + 1) * 16], &x.data()[ci * 16..(ci + 1) * 16]);
                assert!((g.dw.data()[o * 3 + ci] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn backward_rejects_mismatched_gradient() {
        let mut rng = Rng::new(7);
        let geom = ConvGeometry::same(1, 1, 3);
        let (_, cache) = conv_forward(&rand(&[1, 1, 4, 4], &mut rng), &rand(&[1, 1, 3, 3], &mut rng), None, &geom).unwrap();
        let bad = Tensor::zeros(&[1, 1, 3, 3]).unwrap();
        assert!(matches!(conv_backward(&bad, &cache), Err(Error::State(_))));
    }

    #[test]
    fn forward_rejects_bad_shapes() {
        let geom = ConvGeometry::same(2, 3, 3);
        let x = Tensor::<f64>::zeros(&[1, 1, 4, 4]).unwrap();
        let w = Tensor::zeros(&[3, 2, 3, 3]).unwrap();
        assert!(conv_apply(&x, &w, None, &geom).is_err());
        let x = Tensor::<f64>::zeros(&[1, 2, 4, 4]).unwrap();
        assert!(conv_apply(&x, &w, Some(&[0.0]), &geom).is_err());
    }

    #[test]
    fn finite_difference_small_case() {
        let mut rng = Rng::new(8);
        let geom = ConvGeometry::same(2, 3, 3);
        let x = rand(&[2, 2, 5, 5], &mut rng);
        let w = rand(&[3, 2, 3, 3], &mut rng);
        let b = vec![0.1, 0.2, -0.3];
        let dy = rand(&[2, 3, 5, 5], &mut rng);
        let (_, cache) = conv_forward(&x, &w, Some(&b), &geom).unwrap();
        let g = conv_backward(&dy, &cache).unwrap();
        let cfg = FdConfig::default();
        let loss = |x: &Tensor<f64>, w: &Tensor<f64>, b: &[f64]| conv_apply(x, w, Some(b), &geom).unwrap().dot(&dy).unwrap();
        let fx = finite_diff_grad(|p| loss(p, &w, &b), &x, &cfg).unwrap();
        let fw = finite_diff_grad(|p| loss(&x, p, &b), &w, &cfg).unwrap();
        let bt = Tensor::from_slice(&b);
        let fb = finite_diff_grad(|p| loss(&x, &w, p.data()), &bt, &cfg).unwrap();
        assert!(fx.max_rel_error(&g.dx) < 1e-4);
        assert!(fw.max_rel_error(&g.dw) < 1e-4);
        assert!(fb.max_rel_error(&Tensor::from_slice(&g.db.unwrap())) < 1e-4);
    }

    #[test]
    fn linear_in_input_and_weight() {
        let mut rng = Rng::new(9);
        let geom = ConvGeometry::new(2, 3, 3, 2, 1);
        let (x1, x2) = (rand(&[2, 2, 6, 6], &mut rng), rand(&[2, 2, 6, 6], &mut rng));
        let (w1, w2) = (rand(&[3, 2, 3, 3], &mut rng), rand(&[3, 2, 3, 3], &mut rng));
        let (a, b) = (0.7, -1.3);
        let mix = |p: &Tensor<f64>, q: &Tensor<f64>| p.scale(a).add(&q.scale(b)).unwrap();
        let lhs = conv_apply(&mix(&x1, &x2), &w1, None, &geom).unwrap();
        let rhs = mix(
            &conv_apply(&x1, &w1, None, &geom).unwrap(),
            &conv_apply(&x2, &w1, None, &geom).unwrap(),
        );
        assert!(max_rel_error(lhs.data(), rhs.data()) < 1e-6);
        let lhs = conv_apply(&x1, &mix(&w1, &w2), None, &geom).unwrap();
        let rhs = mix(
            &conv_apply(&x1, &w1, None, &geom).unwrap(),
            &conv_apply(&x1, &w2, None, &geom).unwrap(),
        );
        assert!(max_rel_error(lhs.data(), rhs.data()) < 1e-6);
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(64))]
        #[test]
        fn random_geometry_matches_reference_and_adjoint(
            k in 1usize..5, stride in 1usize..4, pad in 0usize..4,
            h in 4usize..9, w in 4usize..9, seed in 0u64..1000,
        ) {
            proptest::prop_assume!(h + 2 * pad >= k && w + 2 * pad >= k);
            let mut rng = Rng::new(seed);
            let geom = ConvGeometry::new(2, 3, k, stride, pad);
            let x = rand(&[2, 2, h, w], &mut rng);
            let wt = rand(&geom.weight_shape(), &mut rng);
            let (y, cache) = conv_forward(&x, &wt, None, &geom).unwrap();
            let want = conv_reference(&x, &wt, None, &geom).unwrap();
            proptest::prop_assert!(max_rel_error(y.data(), want.data()) < 1e-12);
            // the map is linear in x, so <dy, conv(x)> = <dx(dy), x>
            let dy = rand(y.shape(), &mut rng);
            let g = conv_backward(&dy, &cache).unwrap();
            let lhs = dy.dot(&y).unwrap();
            let rhs = g.dx.dot(&x).unwrap();
            proptest::prop_assert!((lhs - rhs).abs() <= 1e-10 * lhs.abs().max(1.0));
            let rhs_w = g.dw.dot(&wt).unwrap();
            proptest::prop_assert!((lhs - rhs_w).abs() <= 1e-10 * lhs.abs().max(1.0));
        }
    }
}
