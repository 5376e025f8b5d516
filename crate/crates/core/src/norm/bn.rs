//! Batch normalization over the `N·H·W` elements of each channel.

use crate::error::{Error, Result};
use crate::norm::Mode;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BnConfig {
    pub eps: f64,
    /// Weight kept on the old running value: `r = m·r + (1 − m)·batch`.
    pub momentum: f64,
    pub affine: bool,
}

impl Default for BnConfig {
    fn default() -> Self {
        BnConfig {
            eps: 1e-5,
            momentum: 0.9,
            affine: true,
        }
    }
}

/// Learnable affine plus running statistics of one BN layer.
#[derive(Clone, Debug, PartialEq)]
pub struct BnParams<T> {
    pub cfg: BnConfig,
    pub scale: Vec<T>,
    pub shift: Vec<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    /// Train-mode forwards seen so far, or a positive value after loading
    /// running statistics from a checkpoint.
    pub batches_seen: u64,
}

impl<T: Scalar> BnParams<T> {
    pub fn new(channels: usize, cfg: BnConfig) -> Self {
        BnParams {
            cfg,
            scale: vec![T::one(); channels],
            shift: vec![T::zero(); channels],
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            batches_seen: 0,
        }
    }

    pub fn channels(&self) -> usize {
        self.running_mean.len()
    }
}

#[derive(Clone, Debug)]
pub struct BnCache<T> {
    x_hat: Tensor<T>,
    inv_sigma: Vec<T>,
    scale: Option<Vec<T>>,
}

impl<T> BnCache<T> {
    /// The standardized input `Ŷ` before the affine.
    pub fn normalized(&self) -> &Tensor<T> {
        &self.x_hat
    }

    /// Per-channel `1/σ_o`.
    pub fn inv_sigma(&self) -> &[T] {
        &self.inv_sigma
    }
}

#[derive(Clone, Debug)]
pub struct BnGrads<T> {
    pub dy: Tensor<T>,
    pub dscale: Option<Vec<T>>,
    pub dshift: Option<Vec<T>>,
}

fn channel_stats<T: Scalar>(y: &Tensor<T>, n: usize, c: usize, hw: usize) -> Vec<(T, T)> {
    let count = T::lit((n * hw) as f64);
    let data = y.data();
    (0..c)
        .map(|o| {
            let mut s = T::zero();
            for i in 0..n {
                s = s + crate::tensor::sum(&data[(i * c + o) * hw..][..hw]);
            }
            let mean = s / count;
            let mut ss = T::zero();
            for i in 0..n {
                for &v in &data[(i * c + o) * hw..][..hw] {
                    let d = v - mean;
                    ss = ss + d * d;
                }
            }
            (mean, ss / count)
        })
        .collect()
}

/// Train mode standardizes with batch statistics and updates the running
/// averages; infer mode uses the running averages and mutates nothing.
pub fn bn_forward<T: Scalar>(y: &Tensor<T>, params: &mut BnParams<T>, mode: Mode) -> Result<(Tensor<T>, BnCache<T>)> {
    let [n, c, h, w] = y.dims4()?;
    let hw = h * w;
    if params.channels() != c || params.scale.len() != c || params.shift.len() != c {
        return Err(Error::ShapeMismatch {
            op: "bn channels",
            left: vec![params.channels()],
            right: vec![c],
        });
    }
    let eps = T::lit(params.cfg.eps);
    let stats: Vec<(T, T)> = match mode {
        Mode::Train => {
            let stats = channel_stats(y, n, c, hw);
            let m = T::lit(params.cfg.momentum);
            let one_m = T::one() - m;
            for (o, &(mean, var)) in stats.iter().enumerate() {
                params.running_mean[o] = m * params.running_mean[o] + one_m * mean;
                params.running_var[o] = m * params.running_var[o] + one_m * var;
            }
            params.batches_seen += 1;
            stats
        }
        Mode::Infer => {
            if params.batches_seen == 0 {
                return Err(Error::state("bn inference before any training step or loaded statistics"));
            }
            params
                .running_mean
                .iter()
                .copied()
                .zip(params.running_var.iter().copied())
                .collect()
        }
    };
    let inv_sigma: Vec<T> = stats.iter().map(|&(_, v)| T::one() / (v + eps).sqrt()).collect();
    let mut x_hat = y.clone();
    for (i, plane) in x_hat.data_mut().chunks_exact_mut(hw).enumerate() {
        let o = i % c;
        let (mean, _) = stats[o];
        let inv = inv_sigma[o];
        for v in plane {
            *v = (*v - mean) * inv;
        }
    }
    let out = if params.cfg.affine {
        let mut out = x_hat.clone();
        for (i, plane) in out.data_mut().chunks_exact_mut(hw).enumerate() {
            let o = i % c;
            let (a, b) = (params.scale[o], params.shift[o]);
            for v in plane {
                *v = a * *v + b;
            }
        }
        out
    } else {
        x_hat.clone()
    };
    let cache = BnCache {
        x_hat,
        inv_sigma,
        scale: params.cfg.affine.then(|| params.scale.clone()),
    };
    match mode {
        Mode::Train => Ok((out, cache)),
        // infer caches are not differentiable; mark them by dropping sigma
        Mode::Infer => Ok((
            out,
            BnCache {
                inv_sigma: Vec::new(),
                ..cache
            },
        )),
    }
}

/// `dY = (1/σ)·(dŶ − mean(dŶ) − Ŷ·mean(dŶ ⊙ Ŷ))` per channel, where `dŶ`
/// already includes the affine scale.
pub fn bn_backward<T: Scalar>(dout: &Tensor<T>, cache: &BnCache<T>) -> Result<BnGrads<T>> {
    if cache.inv_sigma.is_empty() {
        return Err(Error::state("bn backward needs a train-mode cache"));
    }
    if dout.shape() != cache.x_hat.shape() {
        return Err(Error::state("bn backward shape does not match forward"));
    }
    let [n, c, h, w] = dout.dims4()?;
    let hw = h * w;
    let count = T::lit((n * hw) as f64);
    let xd = cache.x_hat.data();
    let gd = dout.data();
    let mut sum_g = vec![T::zero(); c];
    let mut sum_gx = vec![T::zero(); c];
    for i in 0..n * c {
        let o = i % c;
        let g = &gd[i * hw..][..hw];
        let x = &xd[i * hw..][..hw];
        sum_g[o] = sum_g[o] + crate::tensor::sum(g);
        sum_gx[o] = sum_gx[o] + crate::tensor::dot(g, x);
    }
    let (dscale, dshift) = match &cache.scale {
        Some(_) => (Some(sum_gx.clone()), Some(sum_g.clone())),
        None => (None, None),
    };
    let mut dy = dout.zeros_like();
    for (i, plane) in dy.data_mut().chunks_exact_mut(hw).enumerate() {
        let o = i % c;
        let a = cache.scale.as_ref().map_or(T::one(), |s| s[o]);
        let mean_g = a * sum_g[o] / count;
        let mean_gx = a * sum_gx[o] / count;
        let k = cache.inv_sigma[o];
        let g = &gd[i * hw..][..hw];
        let x = &xd[i * hw..][..hw];
        for ((out, &gi), &xi) in plane.iter_mut().zip(g).zip(x) {
            *out = k * (a * gi - mean_g - xi * mean_gx);
        }
    }
    Ok(BnGrads { dy, dscale, dshift })
}
