use rand::Rng;

use super::gemm;
use super::init::kaiming_uniform;
use super::{Float, Module, Param, Tensor};
use crate::error::{Error, Result};

/// 2-D convolution over a single `(C, H, W)` input, zero padded.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d<T> {
    /// `(out, in, k, k)`
    pub weight: Param<T>,
    pub bias: Param<T>,
    pub stride: usize,
    pub padding: usize,
}

#[derive(Debug, Clone)]
pub struct Conv2dCache<T> {
    input_shape: [usize; 3],
    out_hw: (usize, usize),
    /// im2col matrix `(C·k·k, Ho·Wo)`.
    cols: Vec<T>,
}

impl<T: Float> Conv2d<T> {
    pub fn new<R: Rng + ?Sized>(
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = in_channels * kernel * kernel;
        Self {
            weight: Param::new(
                format!("{name}.weight"),
                kaiming_uniform(&[out_channels, in_channels, kernel, kernel], fan_in, rng),
            ),
            bias: Param::zeros(format!("{name}.bias"), &[out_channels]),
            stride: stride.max(1),
            padding,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.weight.value.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.value.shape()[0]
    }

    pub fn kernel(&self) -> usize {
        self.weight.value.shape()[2]
    }

    pub fn output_shape(&self, input: &[usize]) -> Result<[usize; 3]> {
        let k = self.kernel();
        if input.len() != 3 || input[0] != self.in_channels() {
            return Err(Error::Shape {
                op: "conv2d",
                expected: vec![self.in_channels(), 0, 0],
                actual: input.to_vec(),
            });
        }
        let (h, w) = (input[1] + 2 * self.padding, input[2] + 2 * self.padding);
        if h < k || w < k {
            return Err(Error::Shape {
                op: "conv2d",
                expected: vec![self.in_channels(), k, k],
                actual: input.to_vec(),
            });
        }
        Ok([self.out_channels(), (h - k) / self.stride + 1, (w - k) / self.stride + 1])
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<(Tensor<T>, Conv2dCache<T>)> {
        let [o, ho, wo] = self.output_shape(x.shape())?;
        let [c, h, w] = [x.shape()[0], x.shape()[1], x.shape()[2]];
        let k = self.kernel();
        let hw = ho * wo;
        let rows = c * k * k;
        let mut cols = vec![T::zero(); rows * hw];
        let (s, p) = (self.stride as isize, self.padding as isize);
        let xd = x.data();
        for ci in 0..c {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let dst = &mut cols[row * hw..(row + 1) * hw];
                    for oy in 0..ho {
                        let iy = oy as isize * s + ky as isize - p;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let src = &xd[(ci * h + iy as usize) * w..(ci * h + iy as usize + 1) * w];
                        for ox in 0..wo {
                            let ix = ox as isize * s + kx as isize - p;
                            if ix >= 0 && ix < w as isize {
                                dst[oy * wo + ox] = src[ix as usize];
                            }
                        }
                    }
                }
            }
        }
        let mut y = vec![T::zero(); o * hw];
        for (oc, b) in self.bias.value.data().iter().enumerate() {
            y[oc * hw..(oc + 1) * hw].iter_mut().for_each(|v| *v = *b);
        }
        gemm::nn(o, rows, hw, self.weight.value.data(), &cols, &mut y);
        Ok((
            Tensor::new(vec![o, ho, wo], y)?,
            Conv2dCache {
                input_shape: [c, h, w],
                out_hw: (ho, wo),
                cols,
            },
        ))
    }

    /// Accumulates parameter gradients and returns the input gradient.
    pub fn backward(&mut self, cache: &Conv2dCache<T>, dy: &Tensor<T>) -> Result<Tensor<T>> {
        let (ho, wo) = cache.out_hw;
        let o = self.out_channels();
        dy.expect_shape("conv2d backward", &[o, ho, wo])?;
        let [c, h, w] = cache.input_shape;
        let k = self.kernel();
        let hw = ho * wo;
        let rows = c * k * k;
        let dyd = dy.data();
        for (oc, g) in self.bias.grad.data_mut().iter_mut().enumerate() {
            *g += dyd[oc * hw..(oc + 1) * hw].iter().copied().sum::<T>();
        }
        gemm::nt(o, hw, rows, dyd, &cache.cols, self.weight.grad.data_mut());
        let mut dcols = vec![T::zero(); rows * hw];
        gemm::tn(rows, o, hw, self.weight.value.data(), dyd, &mut dcols);
        let mut dx = vec![T::zero(); c * h * w];
        let (s, p) = (self.stride as isize, self.padding as isize);
        for ci in 0..c {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let src = &dcols[row * hw..(row + 1) * hw];
                    for oy in 0..ho {
                        let iy = oy as isize * s + ky as isize - p;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let base = (ci * h + iy as usize) * w;
                        for ox in 0..wo {
                            let ix = ox as isize * s + kx as isize - p;
                            if ix >= 0 && ix < w as isize {
                                dx[base + ix as usize] += src[oy * wo + ox];
                            }
                        }
                    }
                }
            }
        }
        Tensor::new(vec![c, h, w], dx)
    }
}

impl<T: Float> Module<T> for Conv2d<T> {
    fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        f(&self.weight);
        f(&self.bias);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }
}

/// Max pooling without padding; ties resolve to the first position in
/// row-major window order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MaxPool2d {
    pub size: usize,
    pub stride: usize,
}

#[derive(Debug, Clone)]
pub struct PoolCache {
    input_shape: [usize; 3],
    argmax: Vec<usize>,
}

impl MaxPool2d {
    pub fn new(size: usize, stride: usize) -> Self {
        Self {
            size: size.max(1),
            stride: stride.max(1),
        }
    }

    pub fn output_shape(&self, input: &[usize]) -> Result<[usize; 3]> {
        if input.len() != 3 || input[1] < self.size || input[2] < self.size {
            return Err(Error::Shape {
                op: "maxpool2d",
                expected: vec![0, self.size, self.size],
                actual: input.to_vec(),
            });
        }
        Ok([
            input[0],
            (input[1] - self.size) / self.stride + 1,
            (input[2] - self.size) / self.stride + 1,
        ])
    }

    pub fn forward<T: Float>(&self, x: &Tensor<T>) -> Result<(Tensor<T>, PoolCache)> {
        let [c, ho, wo] = self.output_shape(x.shape())?;
        let (h, w) = (x.shape()[1], x.shape()[2]);
        let xd = x.data();
        let mut out = Vec::with_capacity(c * ho * wo);
        let mut argmax = Vec::with_capacity(c * ho * wo);
        for ci in 0..c {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = usize::MAX;
                    for dy in 0..self.size {
                        for dx in 0..self.size {
                            let idx = (ci * h + oy * self.stride + dy) * w + ox * self.stride + dx;
                            if best == usize::MAX || xd[idx] > xd[best] {
                                best = idx;
                            }
                        }
                    }
                    out.push(xd[best]);
                    argmax.push(best);
                }
            }
        }
        Ok((
            Tensor::new(vec![c, ho, wo], out)?,
            PoolCache {
                input_shape: [c, h, w],
                argmax,
            },
        ))
    }

    pub fn backward<T: Float>(&self, cache: &PoolCache, dy: &Tensor<T>) -> Result<Tensor<T>> {
        if dy.len() != cache.argmax.len() {
            return Err(Error::Shape {
                op: "maxpool2d backward",
                expected: vec![cache.argmax.len()],
                actual: dy.shape().to_vec(),
            });
        }
        let [c, h, w] = cache.input_shape;
        let mut dx = vec![T::zero(); c * h * w];
        for (&i, &g) in cache.argmax.iter().zip(dy.data()) {
            dx[i] += g;
        }
        Tensor::new(vec![c, h, w], dx)
    }
}

/// Dense layer `y = W x + b` with `W` of shape `(out, in)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
}

impl<T: Float> Linear<T> {
    pub fn new<R: Rng + ?Sized>(name: &str, input: usize, output: usize, rng: &mut R) -> Self {
        Self {
            weight: Param::new(format!("{name}.weight"), kaiming_uniform(&[output, input], input, rng)),
            bias: Param::zeros(format!("{name}.bias"), &[output]),
        }
    }

    pub fn zeros(name: &str, input: usize, output: usize) -> Self {
        Self {
            weight: Param::zeros(format!("{name}.weight"), &[output, input]),
            bias: Param::zeros(format!("{name}.bias"), &[output]),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.value.shape()[1]
    }

    pub fn output_dim(&self) -> usize {
        self.weight.value.shape()[0]
    }

    pub fn forward(&self, x: &[T]) -> Result<Vec<T>> {
        let (o, i) = (self.output_dim(), self.input_dim());
        if x.len() != i {
            return Err(Error::Shape {
                op: "linear",
                expected: vec![i],
                actual: vec![x.len()],
            });
        }
        let w = self.weight.value.data();
        Ok((0..o)
            .map(|r| self.bias.value.data()[r] + gemm::dot(&w[r * i..(r + 1) * i], x))
            .collect())
    }

    /// Accumulates parameter gradients and returns `dL/dx`.
    pub fn backward(&mut self, x: &[T], dy: &[T]) -> Result<Vec<T>> {
        let (o, i) = (self.output_dim(), self.input_dim());
        if x.len() != i || dy.len() != o {
            return Err(Error::Shape {
                op: "linear backward",
                expected: vec![i, o],
                actual: vec![x.len(), dy.len()],
            });
        }
        for (g, &d) in self.bias.grad.data_mut().iter_mut().zip(dy) {
            *g += d;
        }
        gemm::nn(o, 1, i, dy, x, self.weight.grad.data_mut());
        let mut dx = vec![T::zero(); i];
        gemm::tn(1, o, i, dy, self.weight.value.data(), &mut dx);
        Ok(dx)
    }
}

impl<T: Float> Module<T> for Linear<T> {
    fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        f(&self.weight);
        f(&self.bias);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }
}

pub fn relu<T: Float>(x: &[T]) -> Vec<T> {
    x.iter().map(|&v| if v > T::zero() { v } else { T::zero() }).collect()
}

/// Gradient through ReLU given its input `x`; zero wherever `x <= 0`.
pub fn relu_backward<T: Float>(x: &[T], dy: &[T]) -> Vec<T> {
    x.iter()
        .zip(dy)
        .map(|(&v, &d)| if v > T::zero() { d } else { T::zero() })
        .collect()
}

pub fn log_softmax<T: Float>(z: &[T]) -> Vec<T> {
    let m = z.iter().copied().fold(T::neg_infinity(), T::max);
    let lse = m + z.iter().map(|&v| (v - m).exp()).sum::<T>().ln();
    z.iter().map(|&v| v - lse).collect()
}

pub fn softmax<T: Float>(z: &[T]) -> Vec<T> {
    let m = z.iter().copied().fold(T::neg_infinity(), T::max);
    let e: Vec<T> = z.iter().map(|&v| (v - m).exp()).collect();
    let s: T = e.iter().copied().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Vector-Jacobian product of softmax given its output `p`.
pub fn softmax_backward<T: Float>(p: &[T], dp: &[T]) -> Vec<T> {
    let s: T = p.iter().zip(dp).map(|(&a, &b)| a * b).sum();
    p.iter().zip(dp).map(|(&a, &b)| a * (b - s)).collect()
}

/// Negative log-likelihood of `label` under `softmax(logits)` and its
/// gradient `softmax - one_hot(label)`.
pub fn softmax_cross_entropy<T: Float>(logits: &[T], label: usize) -> Result<(T, Vec<T>)> {
    if logits.len() < 2 || label >= logits.len() {
        return Err(Error::InvalidArgument(format!(
            "label {label} out of range for {} classes",
            logits.len()
        )));
    }
    let lp = log_softmax(logits);
    let mut grad: Vec<T> = lp.iter().map(|v| v.exp()).collect();
    grad[label] -= T::one();
    Ok((-lp[label], grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_kernel_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut conv = Conv2d::<f64>::new("c", 2, 2, 1, 1, 0, &mut rng);
        conv.weight.value = Tensor::new(vec![2, 2, 1, 1], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let x = Tensor::new(vec![2, 3, 3], (0..18).map(f64::from).collect()).unwrap();
        let (y, _) = conv.forward(&x).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn conv_matches_direct_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let conv = Conv2d::<f64>::new("c", 2, 3, 3, 2, 1, &mut rng);
        let x = Tensor::new(vec![2, 5, 4], (0..40).map(|i| (i as f64 * 0.7).sin()).collect()).unwrap();
        let (y, _) = conv.forward(&x).unwrap();
        assert_eq!(y.shape(), &[3, 3, 2]);
        let w = conv.weight.value.data();
        for o in 0..3 {
            for oy in 0..3 {
                for ox in 0..2 {
                    let mut s = 0.0;
                    for c in 0..2 {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let iy = (oy * 2 + ky) as isize - 1;
                                let ix = (ox * 2 + kx) as isize - 1;
                                if (0..5).contains(&iy) && (0..4).contains(&ix) {
                                    s += w[((o * 2 + c) * 3 + ky) * 3 + kx] * x.data()[(c * 5 + iy as usize) * 4 + ix as usize];
                                }
                            }
                        }
                    }
                    assert!((y.data()[(o * 3 + oy) * 2 + ox] - s).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn shape_errors_name_expected_and_actual() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let conv = Conv2d::<f32>::new("c", 3, 4, 3, 1, 1, &mut rng);
        let err = conv.forward(&Tensor::zeros(&[2, 8, 8])).unwrap_err();
        assert!(err.to_string().contains("conv2d"), "{err}");
        let lin = Linear::<f32>::new("l", 4, 2, &mut rng);
        assert!(lin.forward(&[0.0; 3]).is_err());
        assert!(MaxPool2d::new(2, 2).forward(&Tensor::<f32>::zeros(&[1, 1, 4])).is_err());
    }

    #[test]
    fn relu_backward_zero_on_negatives() {
        assert_eq!(relu_backward(&[-1.0, 0.0, 2.0], &[5.0, 5.0, 5.0]), vec![0.0, 0.0, 5.0]);
        assert_eq!(relu(&[-1.0f32, 3.0]), vec![0.0, 3.0]);
    }

    #[test]
    fn pool_picks_max_and_routes_gradient() {
        let x = Tensor::new(vec![1, 2, 4], vec![1.0, 5.0, 2.0, 2.0, 3.0, 4.0, 7.0, 0.0]).unwrap();
        let pool = MaxPool2d::new(2, 2);
        let (y, cache) = pool.forward(&x).unwrap();
        assert_eq!(y.data(), &[5.0, 7.0]);
        let dx = pool.backward(&cache, &Tensor::new(vec![1, 1, 2], vec![1.0, 2.0]).unwrap()).unwrap();
        assert_eq!(dx.data(), &[0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 2.0, 0.0]);
        // Ties go to the first element of the window.
        let (_, c) = pool.forward(&Tensor::<f64>::zeros(&[1, 2, 2])).unwrap();
        assert_eq!(c.argmax, vec![0]);
    }

    #[test]
    fn cross_entropy_basics() {
        let (l, g) = softmax_cross_entropy(&[0.0f64; 4], 2).unwrap();
        assert!((l - 4f64.ln()).abs() < 1e-12);
        assert!((g.iter().sum::<f64>()).abs() < 1e-12);
        let (l2, g2) = softmax_cross_entropy(&[3.0f64; 4], 2).unwrap();
        assert!((l - l2).abs() < 1e-12);
        assert!(g.iter().zip(&g2).all(|(a, b)| (a - b).abs() < 1e-15));
        assert!(softmax_cross_entropy(&[0.0f64; 4], 4).is_err());
        assert!(softmax_cross_entropy(&[0.0f64], 0).is_err());
        let p = softmax(&[1000.0f64, -1000.0, 3.0]);
        assert!(p.iter().all(|v| v.is_finite() && *v >= 0.0));
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}
