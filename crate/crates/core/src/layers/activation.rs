use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Which pre-activation elements were positive.
#[derive(Clone, Debug)]
pub struct ReluCache {
    mask: Vec<bool>,
    shape: Vec<usize>,
}

impl ReluCache {
    /// Fingerprint of the activation pattern, used to detect kink crossings.
    pub fn pattern_hash(&self) -> u64 {
        // FNV-1a over the packed mask
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for chunk in self.mask.chunks(64) {
            let word = chunk.iter().enumerate().fold(0u64, |w, (i, &b)| w | ((b as u64) << i));
            h ^= word;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        h
    }
}

pub fn relu_forward<T: Scalar>(y: &Tensor<T>) -> (Tensor<T>, ReluCache) {
    relu_forward_owned(y.clone())
}

pub(crate) fn relu_forward_owned<T: Scalar>(mut y: Tensor<T>) -> (Tensor<T>, ReluCache) {
    let mask: Vec<bool> = y.data().iter().map(|&v| v > T::zero()).collect();
    for (v, &on) in y.data_mut().iter_mut().zip(&mask) {
        *v = if on { *v } else { T::zero() };
    }
    let shape = y.shape().to_vec();
    (y, ReluCache { mask, shape })
}

/// Masks the upstream gradient by `Y > 0`; the subgradient at 0 is 0.
pub fn relu_backward<T: Scalar>(dx_next: &Tensor<T>, cache: &ReluCache) -> Result<Tensor<T>> {
    relu_backward_owned(dx_next.clone(), cache)
}

pub(crate) fn relu_backward_owned<T: Scalar>(mut g: Tensor<T>, cache: &ReluCache) -> Result<Tensor<T>> {
    if g.shape() != cache.shape.as_slice() {
        return Err(Error::state(format!(
            "relu backward got {:?}, forward saw {:?}",
            g.shape(),
            cache.shape
        )));
    }
    for (v, &on) in g.data_mut().iter_mut().zip(&cache.mask) {
        *v = if on { *v } else { T::zero() };
    }
    Ok(g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{mean_var, Rng};

    #[test]
    fn forward_and_backward() {
        let y = Tensor::from_slice(&[-1.0f64, 2.0, 0.0]);
        let (x, cache) = relu_forward(&y);
        assert_eq!(x.data(), &[0.0, 2.0, 0.0]);
        let d = relu_backward(&Tensor::from_slice(&[5.0, 5.0, 5.0]), &cache).unwrap();
        assert_eq!(d.data(), &[0.0, 5.0, 0.0]);
    }

    #[test]
    fn backward_shape_checked() {
        let (_, cache) = relu_forward(&Tensor::from_slice(&[1.0f64, 2.0]));
        assert!(relu_backward(&Tensor::from_slice(&[1.0]), &cache).is_err());
    }

    #[test]
    fn second_moment_is_half_variance() {
        // Monte-Carlo: E[relu(Z)^2] = Var[Z] / 2 for symmetric zero-mean Z.
        let mut rng = Rng::new(12);
        let z: Tensor<f64> = rng.gaussian_tensor(&[1_000_000], 0.0, 1.7).unwrap();
        let (_, var) = mean_var(z.data()).unwrap();
        let (x, _) = relu_forward(&z);
        let ex2 = x.sq_norm() / x.len() as f64;
        assert!((ex2 / (0.5 * var) - 1.0).abs() < 0.02);
    }
}
