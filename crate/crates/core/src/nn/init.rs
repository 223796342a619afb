use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{Float, Tensor};

/// Uniform in `±sqrt(6 / fan_in)`, the He bound for ReLU networks.
pub fn kaiming_uniform<T: Float, R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor<T> {
    let bound = (6.0 / fan_in.max(1) as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| T::c(rng.random_range(-bound..bound))).collect();
    Tensor::new(shape.to_vec(), data).expect("init shape")
}

/// A `rows × cols` matrix with orthonormal rows or columns (whichever is
/// fewer), from the QR factorization of a Gaussian matrix.
pub fn orthogonal<T: Float, R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Tensor<T> {
    let (r, c) = if rows >= cols { (rows, cols) } else { (cols, rows) };
    let g = DMatrix::<f64>::from_fn(r, c, |_, _| StandardNormal.sample(rng));
    let qr = g.qr();
    let mut q = qr.q();
    let rr = qr.r();
    // Sign fix makes the distribution uniform over the orthogonal group.
    for j in 0..c {
        if rr[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    let q = if rows >= cols { q } else { q.transpose() };
    let mut data = Vec::with_capacity(rows * cols);
    for i in 0..rows {
        for j in 0..cols {
            data.push(T::c(q[(i, j)]));
        }
    }
    Tensor::new(vec![rows, cols], data).expect("init shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn orthogonal_is_orthonormal() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for (r, c) in [(6, 6), (8, 3), (3, 8)] {
            let q: Tensor<f64> = orthogonal(r, c, &mut rng);
            let m = DMatrix::from_row_slice(r, c, q.data());
            let g = if r >= c { m.transpose() * &m } else { &m * m.transpose() };
            let id = DMatrix::<f64>::identity(g.nrows(), g.ncols());
            assert!((g - id).abs().max() < 1e-12);
        }
    }

    #[test]
    fn kaiming_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w: Tensor<f32> = kaiming_uniform(&[16, 24], 24, &mut rng);
        let b = (6.0f32 / 24.0).sqrt();
        assert!(w.data().iter().all(|v| v.abs() <= b));
    }
}
