//! Group normalization. Statistics are taken per sample over each group of
//! `C/G` consecutive channels; `G = C` is instance norm, `G = 1` layer norm.

use crate::error::{Error, Result};
use crate::tensor::{dot, mean_var, sum, Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GroupNormConfig {
    pub groups: usize,
    pub eps: f64,
}

impl GroupNormConfig {
    pub fn instance(channels: usize) -> Self {
        GroupNormConfig {
            groups: channels,
            eps: 1e-5,
        }
    }

    pub fn layer() -> Self {
        GroupNormConfig { groups: 1, eps: 1e-5 }
    }
}

/// Per-channel affine; `None` leaves the standardized output as is.
#[derive(Clone, Copy, Debug)]
pub struct GroupNormParams<'a, T> {
    pub cfg: GroupNormConfig,
    pub scale: Option<&'a [T]>,
    pub shift: Option<&'a [T]>,
}

#[derive(Clone, Debug)]
pub struct GroupNormCache<T> {
    x_hat: Tensor<T>,
    inv_sigma: Vec<T>,
    scale: Option<Vec<T>>,
    groups: usize,
}

#[derive(Clone, Debug)]
pub struct GroupNormGrads<T> {
    pub dy: Tensor<T>,
    pub dscale: Option<Vec<T>>,
    pub dshift: Option<Vec<T>>,
}

pub fn group_norm_forward<T: Scalar>(y: &Tensor<T>, params: &GroupNormParams<'_, T>) -> Result<(Tensor<T>, GroupNormCache<T>)> {
    let [_, c, h, w] = y.dims4()?;
    let groups = params.cfg.groups;
    if groups == 0 || c % groups != 0 {
        return Err(Error::domain(format!("{c} channels cannot be split into {groups} groups")));
    }
    for p in [params.scale, params.shift].into_iter().flatten() {
        if p.len() != c {
            return Err(Error::ShapeMismatch {
                op: "group norm affine",
                left: vec![p.len()],
                right: vec![c],
            });
        }
    }
    let hw = h * w;
    let slab = c / groups * hw;
    let eps = T::lit(params.cfg.eps);
    let mut x_hat = y.clone();
    let mut inv_sigma = Vec::with_capacity(y.len() / slab);
    for chunk in x_hat.data_mut().chunks_exact_mut(slab) {
        let (mean, var) = mean_var(chunk)?;
        let inv = T::one() / (var + eps).sqrt();
        chunk.iter_mut().for_each(|v| *v = (*v - mean) * inv);
        inv_sigma.push(inv);
    }
    let mut out = x_hat.clone();
    if params.scale.is_some() || params.shift.is_some() {
        for (i, plane) in out.data_mut().chunks_exact_mut(hw).enumerate() {
            let o = i % c;
            let a = params.scale.map_or(T::one(), |s| s[o]);
            let b = params.shift.map_or(T::zero(), |s| s[o]);
            plane.iter_mut().for_each(|v| *v = a * *v + b);
        }
    }
    Ok((
        out,
        GroupNormCache {
            x_hat,
            inv_sigma,
            scale: params.scale.map(<[T]>::to_vec),
            groups,
        },
    ))
}

pub fn group_norm_backward<T: Scalar>(dout: &Tensor<T>, cache: &GroupNormCache<T>) -> Result<GroupNormGrads<T>> {
    if dout.shape() != cache.x_hat.shape() {
        return Err(Error::state("group norm backward shape does not match forward"));
    }
    let [_, c, h, w] = dout.dims4()?;
    let hw = h * w;
    let slab = c / cache.groups * hw;
    let mut dscale = vec![T::zero(); c];
    let mut dshift = vec![T::zero(); c];
    let mut dxhat = dout.clone();
    for (i, (plane, x)) in dxhat
        .data_mut()
        .chunks_exact_mut(hw)
        .zip(cache.x_hat.data().chunks_exact(hw))
        .enumerate()
    {
        let o = i % c;
        dscale[o] = dscale[o] + dot(plane, x);
        dshift[o] = dshift[o] + sum(plane);
        if let Some(s) = &cache.scale {
            plane.iter_mut().for_each(|v| *v = *v * s[o]);
        }
    }
    let n = T::lit(slab as f64);
    let mut dy = dxhat.clone();
    for ((out, g), (x, &inv)) in dy
        .data_mut()
        .chunks_exact_mut(slab)
        .zip(dxhat.data().chunks_exact(slab))
        .zip(cache.x_hat.data().chunks_exact(slab).zip(&cache.inv_sigma))
    {
        let mean_g = sum(g) / n;
        let mean_gx = dot(g, x) / n;
        for ((o, &gi), &xi) in out.iter_mut().zip(g).zip(x) {
            *o = inv * (gi - mean_g - xi * mean_gx);
        }
    }
    let affine = cache.scale.is_some();
    Ok(GroupNormGrads {
        dy,
        dscale: affine.then_some(dscale),
        dshift: affine.then_some(dshift),
    })
}
