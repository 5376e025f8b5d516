use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug)]
pub struct LinearCache<T> {
    input: Tensor<T>,
    weight: Tensor<T>,
}

#[derive(Clone, Debug)]
pub struct LinearGrads<T> {
    pub dx: Tensor<T>,
    pub dw: Tensor<T>,
    pub db: Vec<T>,
}

/// `y = x W^T + b` with `x: (N, in)`, `W: (out, in)`.
pub fn linear_forward<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: &[T]) -> Result<(Tensor<T>, LinearCache<T>)> {
    let [n, fin] = x.dims2()?;
    let [fout, win] = w.dims2()?;
    if win != fin || b.len() != fout {
        return Err(Error::ShapeMismatch {
            op: "linear",
            left: x.shape().to_vec(),
            right: w.shape().to_vec(),
        });
    }
    let mut y = Tensor::zeros(&[n, fout])?;
    for row in y.data_mut().chunks_exact_mut(fout) {
        row.copy_from_slice(b);
    }
    T::gemm(
        n,
        fin,
        fout,
        T::one(),
        x.data(),
        (fin as isize, 1),
        w.data(),
        (1, fin as isize),
        T::one(),
        y.data_mut(),
        (fout as isize, 1),
    );
    Ok((
        y,
        LinearCache {
            input: x.clone(),
            weight: w.clone(),
        },
    ))
}

pub fn linear_backward<T: Scalar>(dy: &Tensor<T>, cache: &LinearCache<T>) -> Result<LinearGrads<T>> {
    let [n, fin] = cache.input.dims2()?;
    let [fout, _] = cache.weight.dims2()?;
    if dy.shape() != [n, fout] {
        return Err(Error::state("linear backward shape does not match forward"));
    }
    let mut dx = Tensor::zeros(&[n, fin])?;
    T::gemm(
        n,
        fout,
        fin,
        T::one(),
        dy.data(),
        (fout as isize, 1),
        cache.weight.data(),
        (fin as isize, 1),
        T::zero(),
        dx.data_mut(),
        (fin as isize, 1),
    );
    let mut dw = Tensor::zeros(&[fout, fin])?;
    T::gemm(
        fout,
        n,
        fin,
        T::one(),
        dy.data(),
        (1, fout as isize),
        cache.input.data(),
        (fin as isize, 1),
        T::zero(),
        dw.data_mut(),
        (fin as isize, 1),
    );
    let mut db = vec![T::zero(); fout];
    for row in dy.data().chunks_exact(fout) {
        for (acc, &g) in db.iter_mut().zip(row) {
            *acc = *acc + g;
        }
    }
    Ok(LinearGrads { dx, dw, db })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::{finite_diff_grad, FdConfig};
    use crate::tensor::Rng;

    #[test]
    fn forward_by_hand() {
        let x = Tensor::from_f64(&[1, 2], &[1.0, 2.0]).unwrap();
        let w = Tensor::from_f64(&[3, 2], &[1.0, 0.0, 0.0, 1.0, 1.0, 1.0]).unwrap();
        let (y, _) = linear_forward(&x, &w, &[0.5, 0.0, -1.0]).unwrap();
        assert_eq!(y.data(), &[1.5, 2.0, 2.0]);
    }

    #[test]
    fn finite_difference() {
        let mut rng = Rng::new(4);
        let x: Tensor<f64> = rng.gaussian_tensor(&[3, 5], 0.0, 1.0).unwrap();
        let w: Tensor<f64> = rng.gaussian_tensor(&[4, 5], 0.0, 1.0).unwrap();
        let b = vec![0.1, -0.1, 0.2, 0.3];
        let dy: Tensor<f64> = rng.gaussian_tensor(&[3, 4], 0.0, 1.0).unwrap();
        let (_, cache) = linear_forward(&x, &w, &b).unwrap();
        let g = linear_backward(&dy, &cache).unwrap();
        let loss = |x: &Tensor<f64>, w: &Tensor<f64>, b: &[f64]| linear_forward(x, w, b).unwrap().0.dot(&dy).unwrap();
        let cfg = FdConfig::default();
        assert!(finite_diff_grad(|p| loss(p, &w, &b), &x, &cfg).unwrap().max_rel_error(&g.dx) < 1e-4);
        assert!(finite_diff_grad(|p| loss(&x, p, &b), &w, &cfg).unwrap().max_rel_error(&g.dw) < 1e-4);
        let bt = Tensor::from_slice(&b);
        assert!(
            finite_diff_grad(|p| loss(&x, &w, p.data()), &bt, &cfg)
                .unwrap()
                .max_rel_error(&Tensor::from_slice(&g.db))
                < 1e-4
        );
    }
}
