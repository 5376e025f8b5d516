//! Dense tensors, population statistics and the seeded random source.
//!
//! Activations are laid out NCHW and filter banks DCKK, both row-major in a
//! flat buffer. All reductions walk the buffer sequentially so results are
//! bitwise reproducible for a given precision.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};
use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

use crate::error::{Error, Result};

pub const MAX_RANK: usize = 4;

/// Floating point element type. `f32` is the training precision, `f64` the
/// oracle precision.
pub trait Scalar: Float + FromPrimitive + ToPrimitive + Sum + Debug + Display + Default + Send + Sync + 'static {
    const NAME: &'static str;

    /// `c = alpha * a * b + beta * c` on strided row/column views, where `a`
    /// is `m x k`, `b` is `k x n` and `c` is `m x n`.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        a_strides: (isize, isize),
        b: &[Self],
        b_strides: (isize, isize),
        beta: Self,
        c: &mut [Self],
        c_strides: (isize, isize),
    );

    #[inline]
    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("literal representable")
    }

    #[inline]
    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

fn check_extent(len: usize, rows: usize, cols: usize, (rs, cs): (isize, isize)) {
    if rows == 0 || cols == 0 {
        return;
    }
    let last = (rows - 1) as isize * rs + (cols - 1) as isize * cs;
    assert!(rs >= 0 && cs >= 0 && (last as usize) < len, "gemm view out of bounds");
}

macro_rules! impl_scalar {
    ($t:ty, $name:literal, $gemm:path) => {
        impl Scalar for $t {
            const NAME: &'static str = $name;

            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                a_strides: (isize, isize),
                b: &[Self],
                b_strides: (isize, isize),
                beta: Self,
                c: &mut [Self],
                c_strides: (isize, isize),
            ) {
                check_extent(a.len(), m, k, a_strides);
                check_extent(b.len(), k, n, b_strides);
                check_extent(c.len(), m, n, c_strides);
                if m == 0 || n == 0 {
                    return;
                }
                // SAFETY: every view was bounds-checked above and `c` is
                // exclusively borrowed, so it cannot alias `a` or `b`.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        alpha,
                        a.as_ptr(),
                        a_strides.0,
                        a_strides.1,
                        b.as_ptr(),
                        b_strides.0,
                        b_strides.1,
                        beta,
                        c.as_mut_ptr(),
                        c_strides.0,
                        c_strides.1,
                    );
                }
            }
        }
    };
}

impl_scalar!(f32, "f32", matrixmultiply::sgemm);
impl_scalar!(f64, "f64", matrixmultiply::dgemm);

/// Dense tensor of rank 1 to 4.
#[derive(Clone, PartialEq)]
pub struct Tensor<T = f64> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T> Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("len", &self.data.len())
            .finish()
    }
}

fn validate_shape(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() || shape.len() > MAX_RANK {
        return Err(Error::domain(format!("tensor rank must be 1..={MAX_RANK}, got {}", shape.len())));
    }
    Ok(shape.iter().product())
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let len = validate_shape(shape)?;
        if len != data.len() {
            return Err(Error::domain(format!(
                "buffer length {} does not match shape {shape:?}",
                data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn from_slice(data: &[T]) -> Self {
        Tensor {
            shape: vec![data.len()],
            data: data.to_vec(),
        }
    }

    pub fn from_f64(shape: &[usize], data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&v| T::lit(v)).collect())
    }

    pub fn full(shape: &[usize], value: T) -> Result<Self> {
        let len = validate_shape(shape)?;
        Ok(Tensor {
            shape: shape.to_vec(),
            data: vec![value; len],
        })
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        Self::full(shape, T::zero())
    }

    pub fn zeros_like(&self) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: vec![T::zero(); self.data.len()],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Extents as NCHW, failing unless the tensor has rank 4.
    pub fn dims4(&self) -> Result<[usize; 4]> {
        match self.shape[..] {
            [a, b, c, d] => Ok([a, b, c, d]),
            _ => Err(Error::domain(format!("expected a rank-4 tensor, got shape {:?}", self.shape))),
        }
    }

    pub fn dims2(&self) -> Result<[usize; 2]> {
        match self.shape[..] {
            [a, b] => Ok([a, b]),
            _ => Err(Error::domain(format!("expected a rank-2 tensor, got shape {:?}", self.shape))),
        }
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let len = validate_shape(shape)?;
        if len != self.data.len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                left: self.shape,
                right: shape.to_vec(),
            });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::lit(v.to_f64_lossy())).collect(),
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    fn same_shape(&self, other: &Self, op: &'static str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                op,
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        Ok(())
    }

    fn zip_with(&self, other: &Self, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Self> {
        self.same_shape(other, op)?;
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn hadamard(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "hadamard", |a, b| a * b)
    }

    pub fn scale(&self, factor: T) -> Self {
        self.map(|v| v * factor)
    }

    pub fn add_scalar(&self, c: T) -> Self {
        self.map(|v| v + c)
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        self.same_shape(other, "add_assign")?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
        Ok(())
    }

    pub fn sum(&self) -> T {
        sum(&self.data)
    }

    pub fn dot(&self, other: &Self) -> Result<T> {
        self.same_shape(other, "dot")?;
        Ok(dot(&self.data, &other.data))
    }

    pub fn sq_norm(&self) -> T {
        dot(&self.data, &self.data)
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, v| m.max(v.abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Population mean and variance of every element.
    pub fn mean_var(&self) -> Result<(T, T)> {
        mean_var(&self.data)
    }

    /// Contiguous sub-slice for the leading index, e.g. filter `o` of a DCKK
    /// bank or sample `n` of an NCHW batch.
    pub fn outer(&self, i: usize) -> &[T] {
        let stride = self.data.len() / self.shape[0];
        &self.data[i * stride..(i + 1) * stride]
    }

    pub fn outer_mut(&mut self, i: usize) -> &mut [T] {
        let stride = self.data.len() / self.shape[0];
        &mut self.data[i * stride..(i + 1) * stride]
    }
}

pub fn sum<T: Scalar>(xs: &[T]) -> T {
    xs.iter().fold(T::zero(), |acc, &v| acc + v)
}

pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

/// Two-pass population mean and variance.
pub fn mean_var<T: Scalar>(xs: &[T]) -> Result<(T, T)> {
    if xs.is_empty() {
        return Err(Error::domain("mean_var of an empty tensor"));
    }
    let n = T::lit(xs.len() as f64);
    let mean = sum(xs) / n;
    let var = xs.iter().fold(T::zero(), |acc, &v| {
        let d = v - mean;
        acc + d * d
    }) / n;
    Ok((mean, var))
}

/// Deterministic random source: ChaCha8 stream plus Box-Muller Gaussians.
#[derive(Clone, Debug)]
pub struct Rng {
    inner: ChaCha8Rng,
    spare: Option<f64>,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng {
            inner: ChaCha8Rng::seed_from_u64(seed),
            spare: None,
        }
    }

    /// Independent child stream; advances `self` by one draw.
    pub fn fork(&mut self) -> Self {
        Rng::new(self.next_u64())
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in `[0, 1)` with 53 random bits.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `[0, n)`.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0);
        // Lemire's multiply-shift; bias is below 2^-64 * n.
        ((self.next_u64() as u128 * n as u128) >> 64) as usize
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    /// Standard normal draw via Box-Muller; the second variate is cached.
    pub fn gaussian(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        let u1 = 1.0 - self.uniform(); // (0, 1]
        let u2 = self.uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.spare = Some(r * theta.sin());
        r * theta.cos()
    }

    pub fn shuffle<X>(&mut self, xs: &mut [X]) {
        for i in (1..xs.len()).rev() {
            let j = self.below(i + 1);
            xs.swap(i, j);
        }
    }

    pub fn gaussian_tensor<T: Scalar>(&mut self, shape: &[usize], mean: f64, std: f64) -> Result<Tensor<T>> {
        let len = validate_shape(shape)?;
        let data = (0..len).map(|_| T::lit(mean + std * self.gaussian())).collect();
        Tensor::new(shape, data)
    }

    pub fn uniform_tensor<T: Scalar>(&mut self, shape: &[usize], lo: f64, hi: f64) -> Result<Tensor<T>> {
        let len = validate_shape(shape)?;
        let data = (0..len).map(|_| T::lit(lo + (hi - lo) * self.uniform())).collect();
        Tensor::new(shape, data)
    }
}

/// He initialization for a `(d, c, k, k)` filter bank: i.i.d. zero-mean
/// Gaussian with variance `2 / (k*k*c)`.
pub fn he_init<T: Scalar>(d: usize, c: usize, k: usize, rng: &mut Rng) -> Result<Tensor<T>> {
    if d == 0 || c == 0 || k == 0 {
        return Err(Error::domain(format!("he_init with zero extent (d={d}, c={c}, k={k})")));
    }
    let fan_in = (k * k * c) as f64;
    rng.gaussian_tensor(&[d, c, k, k], 0.0, (2.0 / fan_in).sqrt())
}

#[cfg(test)]
mod tests {
    use super::Rng;
    use super::*;
    use proptest::prelude::*;

    fn t(v: &[f64]) -> Tensor<f64> {
        Tensor::from_slice(v)
    }

    #[test]
    fn mean_var_examples() {
        assert_eq!(t(&[-1.0, 1.0]).mean_var().unwrap(), (0.0, 1.0));
        assert_eq!(t(&[5.0, 5.0, 5.0]).mean_var().unwrap(), (5.0, 0.0));
        // direct summation: mean 10/4, var ((1.5²+0.5²)*2)/4
        let expected_var = (1.5f64.powi(2) + 0.5f64.powi(2)) * 2.0 / 4.0;
        let (m, v) = t(&[1.0, 2.0, 3.0, 4.0]).mean_var().unwrap();
        assert_eq!(m, 2.5);
        assert!((v - expected_var).abs() < 1e-15);
        assert!((v - 1.25).abs() < 1e-15);
    }

    #[test]
    fn mean_var_rejects_empty() {
        assert!(matches!(mean_var::<f64>(&[]), Err(Error::Domain(_))));
    }

    #[test]
    fn he_init_target_variance() {
        let mut rng = Rng::new(3);
        let w: Tensor<f64> = he_init(64, 64, 3, &mut rng).unwrap();
        let target = 2.0 / 576.0;
        assert!((target - 0.00347f64).abs() < 1e-5);
        let (m, v) = w.mean_var().unwrap();
        assert!(m.abs() < 3.0 * (target / w.len() as f64).sqrt() + 1e-4);
        assert!((v / target - 1.0).abs() < 0.02, "variance {v} vs {target}");

        let w1: Tensor<f64> = he_init(1, 1, 1, &mut rng).unwrap();
        assert_eq!(w1.shape(), &[1, 1, 1, 1]);
    }

    #[test]
    fn he_init_unit_fan_in_variance() {
        let mut rng = Rng::new(11);
        let samples: Vec<f64> = (0..20000).map(|_| he_init::<f64>(1, 1, 1, &mut rng).unwrap().data()[0]).collect();
        let (_, v) = mean_var(&samples).unwrap();
        assert!((v - 2.0).abs() < 0.08, "{v}");
    }

    #[test]
    fn he_init_is_deterministic() {
        let a: Tensor<f32> = he_init(8, 4, 3, &mut Rng::new(7)).unwrap();
        let b: Tensor<f32> = he_init(8, 4, 3, &mut Rng::new(7)).unwrap();
        let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
    }

    #[test]
    fn he_init_rejects_zero_extent() {
        assert!(he_init::<f64>(0, 3, 3, &mut Rng::new(1)).is_err());
        assert!(he_init::<f64>(2, 3, 0, &mut Rng::new(1)).is_err());
    }

    #[test]
    fn dot_and_elementwise() {
        assert_eq!(t(&[1.0, 2.0]).dot(&t(&[3.0, 4.0])).unwrap(), 11.0);
        assert_eq!(t(&[1.0, 2.0]).dot(&t(&[0.0, 0.0])).unwrap(), 0.0);
        let x = t(&[1.5, -2.0, 7.0]);
        assert_eq!(x.scale(1.0), x);
        assert!(matches!(x.add(&t(&[1.0])), Err(Error::ShapeMismatch { op: "add", .. })));
        assert_eq!(x.sub(&x).unwrap().sum(), 0.0);
    }

    #[test]
    fn rng_streams_are_reproducible() {
        let mut a = Rng::new(42);
        let mut b = Rng::new(42);
        for _ in 0..100 {
            assert_eq!(a.gaussian().to_bits(), b.gaussian().to_bits());
        }
        let mut xs: Vec<usize> = (0..50).collect();
        Rng::new(9).shuffle(&mut xs);
        let mut ys: Vec<usize> = (0..50).collect();
        Rng::new(9).shuffle(&mut ys);
        assert_eq!(xs, ys);
        xs.sort_unstable();
        assert_eq!(xs, (0..50).collect::<Vec<_>>());
    }

    #[test]
    fn gemm_small() {
        // [[1,2],[3,4]] * [[5,6],[7,8]]
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        let mut c = [0.0f64; 4];
        f64::gemm(2, 2, 2, 1.0, &a, (2, 1), &b, (2, 1), 0.0, &mut c, (2, 1));
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);
        // transpose of a via strides
        f64::gemm(2, 2, 2, 1.0, &a, (1, 2), &b, (2, 1), 0.0, &mut c, (2, 1));
        assert_eq!(c, [26.0, 30.0, 38.0, 44.0]);
    }

    fn vec_strategy() -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-100.0f64..100.0, 1..200)
    }

    proptest! {
        #[test]
        fn mean_var_translation_covariant(xs in vec_strategy(), c in -50.0f64..50.0) {
            let x = Tensor::from_slice(&xs);
            let (m, v) = x.mean_var().unwrap();
            let (m2, v2) = x.add_scalar(c).mean_var().unwrap();
            let scale = m.abs().max(c.abs()).max(1.0);
            prop_assert!((m2 - (m + c)).abs() <= 1e-10 * scale);
            prop_assert!((v2 - v).abs() <= 1e-10 * v.max(1.0));
        }

        #[test]
        fn var_matches_second_moment_form(xs in vec_strategy()) {
            let x = Tensor::from_slice(&xs);
            let (m, v) = x.mean_var().unwrap();
            let ex2 = x.sq_norm() / xs.len() as f64;
            let alt = ex2 - m * m;
            prop_assert!((alt - v).abs() <= 1e-8 * ex2.max(1e-12));
        }

        #[test]
        fn dot_equals_sum_of_hadamard(xs in vec_strategy(), seed in 0u64..1000) {
            let x = Tensor::from_slice(&xs);
            let y: Tensor<f64> = Rng::new(seed).gaussian_tensor(&[xs.len()], 0.0, 3.0).unwrap();
            prop_assert_eq!(x.dot(&y).unwrap().to_bits(), x.hadamard(&y).unwrap().sum().to_bits());
        }
    }
}
