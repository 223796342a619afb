use rand::Rng;

use super::gemm;
use super::init::{kaiming_uniform, orthogonal};
use super::{Float, Module, Param, Tensor};
use crate::error::{Error, Result};

/// One LSTM layer without peepholes. Gate blocks are stacked in the order
/// input, forget, output, candidate: `w` is `(4H, D)`, `u` is `(4H, H)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Lstm<T> {
    pub w: Param<T>,
    pub u: Param<T>,
    pub b: Param<T>,
}

/// Forward state needed by [`Lstm::backward`].
#[derive(Debug, Clone)]
pub struct LstmCache<T> {
    x: Vec<T>,
    h_prev: Vec<T>,
    c_prev: Vec<T>,
    /// Activated gates `[i, f, o, g]`.
    gates: Vec<T>,
    tanh_c: Vec<T>,
}

pub const GATE_INPUT: usize = 0;
pub const GATE_FORGET: usize = 1;
pub const GATE_OUTPUT: usize = 2;
pub const GATE_CANDIDATE: usize = 3;

fn sigmoid<T: Float>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

impl<T: Float> Lstm<T> {
    /// Forget-gate bias starts at 1; input weights are He-uniform and each
    /// recurrent gate block is orthogonal.
    pub fn new<R: Rng + ?Sized>(name: &str, input: usize, hidden: usize, rng: &mut R) -> Self {
        let w = kaiming_uniform(&[4 * hidden, input], input, rng);
        let mut u = Vec::with_capacity(4 * hidden * hidden);
        for _ in 0..4 {
            u.extend_from_slice(orthogonal::<T, R>(hidden, hidden, rng).data());
        }
        let mut b = Tensor::zeros(&[4 * hidden]);
        b.data_mut()[GATE_FORGET * hidden..(GATE_FORGET + 1) * hidden].fill(T::one());
        Self {
            w: Param::new(format!("{name}.w"), w),
            u: Param::new(format!("{name}.u"), Tensor::new(vec![4 * hidden, hidden], u).expect("lstm shape")),
            b: Param::new(format!("{name}.b"), b),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w.value.shape()[1]
    }

    pub fn hidden_dim(&self) -> usize {
        self.u.value.shape()[1]
    }

    /// Bias block of one gate.
    pub fn gate_bias_mut(&mut self, gate: usize) -> &mut [T] {
        let h = self.hidden_dim();
        &mut self.b.value.data_mut()[gate * h..(gate + 1) * h]
    }

    pub fn forward(&self, x: &[T], h: &[T], c: &[T]) -> Result<(Vec<T>, Vec<T>, LstmCache<T>)> {
        let (d, hd) = (self.input_dim(), self.hidden_dim());
        if x.len() != d || h.len() != hd || c.len() != hd {
            return Err(Error::Shape {
                op: "lstm_cell",
                expected: vec![d, hd, hd],
                actual: vec![x.len(), h.len(), c.len()],
            });
        }
        let mut z = self.b.value.data().to_vec();
        gemm::nn(4 * hd, d, 1, self.w.value.data(), x, &mut z);
        gemm::nn(4 * hd, hd, 1, self.u.value.data(), h, &mut z);
        let mut gates = z;
        for (k, v) in gates.iter_mut().enumerate() {
            *v = if k / hd == GATE_CANDIDATE { v.tanh() } else { sigmoid(*v) };
        }
        let (gi, rest) = gates.split_at(hd);
        let (gf, rest) = rest.split_at(hd);
        let (go, gg) = rest.split_at(hd);
        let c_new: Vec<T> = (0..hd).map(|j| gf[j] * c[j] + gi[j] * gg[j]).collect();
        let tanh_c: Vec<T> = c_new.iter().map(|v| v.tanh()).collect();
        let h_new: Vec<T> = (0..hd).map(|j| go[j] * tanh_c[j]).collect();
        let cache = LstmCache {
            x: x.to_vec(),
            h_prev: h.to_vec(),
            c_prev: c.to_vec(),
            gates,
            tanh_c,
        };
        Ok((h_new, c_new, cache))
    }

    /// Given `dL/dh'` and `dL/dc'`, accumulates parameter gradients and
    /// returns `(dL/dx, dL/dh, dL/dc)`.
    pub fn backward(&mut self, cache: &LstmCache<T>, dh: &[T], dc: &[T]) -> Result<(Vec<T>, Vec<T>, Vec<T>)> {
        let (d, hd) = (self.input_dim(), self.hidden_dim());
        if dh.len() != hd || dc.len() != hd {
            return Err(Error::Shape {
                op: "lstm_cell backward",
                expected: vec![hd, hd],
                actual: vec![dh.len(), dc.len()],
            });
        }
        let g = &cache.gates;
        let one = T::one();
        let mut dz = vec![T::zero(); 4 * hd];
        let mut dc_prev = vec![T::zero(); hd];
        for j in 0..hd {
            let (i, f, o, gg) = (g[j], g[hd + j], g[2 * hd + j], g[3 * hd + j]);
            let tc = cache.tanh_c[j];
            let dct = dc[j] + dh[j] * o * (one - tc * tc);
            let d_o = dh[j] * tc;
            let d_i = dct * gg;
            let d_f = dct * cache.c_prev[j];
            let d_g = dct * i;
            dc_prev[j] = dct * f;
            dz[j] = d_i * i * (one - i);
            dz[hd + j] = d_f * f * (one - f);
            dz[2 * hd + j] = d_o * o * (one - o);
            dz[3 * hd + j] = d_g * (one - gg * gg);
        }
        for (gb, &v) in self.b.grad.data_mut().iter_mut().zip(&dz) {
            *gb += v;
        }
        gemm::nn(4 * hd, 1, d, &dz, &cache.x, self.w.grad.data_mut());
        gemm::nn(4 * hd, 1, hd, &dz, &cache.h_prev, self.u.grad.data_mut());
        let mut dx = vec![T::zero(); d];
        gemm::tn(1, 4 * hd, d, &dz, self.w.value.data(), &mut dx);
        let mut dh_prev = vec![T::zero(); hd];
        gemm::tn(1, 4 * hd, hd, &dz, self.u.value.data(), &mut dh_prev);
        Ok((dx, dh_prev, dc_prev))
    }
}

impl<T: Float> Module<T> for Lstm<T> {
    fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        f(&self.w);
        f(&self.u);
        f(&self.b);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        f(&mut self.w);
        f(&mut self.u);
        f(&mut self.b);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_inputs_give_zero_state() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut cell = Lstm::<f64>::new("l", 3, 4, &mut rng);
        cell.b.value.fill(0.0);
        let (h, c, _) = cell.forward(&[0.0; 3], &[0.0; 4], &[0.0; 4]).unwrap();
        assert!(h.iter().chain(&c).all(|&v| v == 0.0));
    }

    #[test]
    fn saturated_gates_keep_cell() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut cell = Lstm::<f64>::new("l", 3, 4, &mut rng);
        cell.w.value.fill(0.0);
        cell.u.value.fill(0.0);
        cell.gate_bias_mut(GATE_FORGET).fill(800.0);
        cell.gate_bias_mut(GATE_INPUT).fill(-800.0);
        let c0 = [0.3, -1.2, 2.5, 0.0];
        let (_, c, _) = cell.forward(&[1.0, 2.0, 3.0], &[0.5; 4], &c0).unwrap();
        assert_eq!(c, c0.to_vec());
    }

    #[test]
    fn init_properties() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut cell = Lstm::<f32>::new("l", 5, 3, &mut rng);
        assert_eq!(cell.w.value.shape(), &[12, 5]);
        assert_eq!(cell.u.value.shape(), &[12, 3]);
        assert!(cell.gate_bias_mut(GATE_FORGET).iter().all(|&v| v == 1.0));
        assert!(cell.gate_bias_mut(GATE_OUTPUT).iter().all(|&v| v == 0.0));
        assert!(cell.forward(&[0.0; 4], &[0.0; 3], &[0.0; 3]).is_err());
    }
}
