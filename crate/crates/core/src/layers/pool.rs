use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PoolGeometry {
    pub kernel: usize,
    pub stride: usize,
}

impl PoolGeometry {
    pub fn output_extent(&self, input: usize) -> Result<usize> {
        if self.kernel == 0 || self.stride == 0 || input < self.kernel {
            return Err(Error::domain(format!("pool {self:?} does not fit input extent {input}")));
        }
        Ok((input - self.kernel) / self.stride + 1)
    }
}

#[derive(Clone, Debug)]
pub struct MaxPoolCache {
    argmax: Vec<usize>,
    in_shape: Vec<usize>,
    out_shape: Vec<usize>,
}

impl MaxPoolCache {
    pub fn pattern_hash(&self) -> u64 {
        self.argmax
            .iter()
            .fold(0xcbf2_9ce4_8422_2325u64, |h, &i| (h ^ i as u64).wrapping_mul(0x0000_0100_0000_01b3))
    }
}

/// Max pooling without padding; ties resolve to the first maximum.
pub fn maxpool_forward<T: Scalar>(x: &Tensor<T>, geom: PoolGeometry) -> Result<(Tensor<T>, MaxPoolCache)> {
    let [n, c, h, w] = x.dims4()?;
    let oh = geom.output_extent(h)?;
    let ow = geom.output_extent(w)?;
    let mut y = Tensor::zeros(&[n, c, oh, ow])?;
    let mut argmax = Vec::with_capacity(y.len());
    let xd = x.data();
    let yd = y.data_mut();
    let mut out = 0;
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + oy * geom.stride * w + ox * geom.stride;
                for ky in 0..geom.kernel {
                    for kx in 0..geom.kernel {
                        let i = base + (oy * geom.stride + ky) * w + ox * geom.stride + kx;
                        best = if xd[i] > xd[best] { i } else { best };
                    }
                }
                yd[out] = xd[best];
                argmax.push(best);
                out += 1;
            }
        }
    }
    let out_shape = y.shape().to_vec();
    Ok((
        y,
        MaxPoolCache {
            argmax,
            in_shape: x.shape().to_vec(),
            out_shape,
        },
    ))
}

pub fn maxpool_backward<T: Scalar>(dy: &Tensor<T>, cache: &MaxPoolCache) -> Result<Tensor<T>> {
    if dy.shape() != cache.out_shape.as_slice() {
        return Err(Error::state("maxpool backward shape does not match forward"));
    }
    let mut dx = Tensor::zeros(&cache.in_shape)?;
    let dxd = dx.data_mut();
    for (&i, &g) in cache.argmax.iter().zip(dy.data()) {
        dxd[i] = dxd[i] + g;
    }
    Ok(dx)
}

#[derive(Clone, Debug)]
pub struct GapCache {
    in_shape: [usize; 4],
}

/// `(N, C, H, W) -> (N, C)` spatial mean.
pub fn global_avg_pool_forward<T: Scalar>(x: &Tensor<T>) -> Result<(Tensor<T>, GapCache)> {
    let [n, c, h, w] = x.dims4()?;
    let hw = h * w;
    let inv = T::lit(1.0 / hw as f64);
    let data = x.data().chunks_exact(hw).map(|p| crate::tensor::sum(p) * inv).collect();
    Ok((Tensor::new(&[n, c], data)?, GapCache { in_shape: [n, c, h, w] }))
}

pub fn global_avg_pool_backward<T: Scalar>(dy: &Tensor<T>, cache: &GapCache) -> Result<Tensor<T>> {
    let [n, c, h, w] = cache.in_shape;
    if dy.shape() != [n, c] {
        return Err(Error::state("global average pool backward shape does not match forward"));
    }
    let inv = T::lit(1.0 / (h * w) as f64);
    let mut dx = Tensor::zeros(&cache.in_shape)?;
    for (plane, &g) in dx.data_mut().chunks_exact_mut(h * w).zip(dy.data()) {
        plane.fill(g * inv);
    }
    Ok(dx)
}
