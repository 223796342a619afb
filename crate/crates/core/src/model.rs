//! The two-stream splice classifier.
//!
//! Each stream encodes every frame of a W-frame splice with one shared
//! (tied) convolutional encoder, runs a single LSTM layer over the W
//! features, classifies every step, and averages the W per-step
//! distributions with learned weights. The RGB and flow streams are trained
//! separately and fused late.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::nn::{
    relu, relu_backward, softmax, softmax_backward, softmax_cross_entropy, Conv2d, Conv2dCache, Float, Linear, Lstm,
    LstmCache, MaxPool2d, Module, Param, PoolCache, Tensor,
};
use crate::preprocess::{resize_bilinear, write_tensor_file};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvBlock {
    pub filters: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    /// Max-pool window and stride; 0 or 1 disables pooling.
    pub pool: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub in_channels: usize,
    pub input_size: usize,
    pub blocks: Vec<ConvBlock>,
    pub feature_dim: usize,
}

impl EncoderConfig {
    /// Three 3x3 conv-ReLU-pool blocks (8, 16, 32 filters) and a 64-d
    /// feature.
    pub fn toy(in_channels: usize, input_size: usize) -> Self {
        let block = |filters| ConvBlock {
            filters,
            kernel: 3,
            stride: 1,
            padding: 1,
            pool: 2,
        };
        Self {
            in_channels,
            input_size,
            blocks: vec![block(8), block(16), block(32)],
            feature_dim: 64,
        }
    }

    /// Shapes `(C, H, W)` after each block's convolution and after its
    /// pooling, plus the flattened length fed to the feature layer.
    fn shapes(&self) -> Result<(Vec<[usize; 3]>, Vec<[usize; 3]>, usize)> {
        if self.blocks.is_empty() || self.feature_dim == 0 || self.in_channels == 0 {
            return Err(Error::InvalidArgument(format!("invalid encoder config {self:?}")));
        }
        let mut shape = [self.in_channels, self.input_size, self.input_size];
        let (mut conv, mut pooled) = (Vec::new(), Vec::new());
        for b in &self.blocks {
            let k = b.kernel;
            let (h, w) = (shape[1] + 2 * b.padding, shape[2] + 2 * b.padding);
            if k == 0 || b.stride == 0 || b.filters == 0 || h < k || w < k {
                return Err(Error::InvalidArgument(format!("conv block {b:?} does not fit input {shape:?}")));
            }
            shape = [b.filters, (h - k) / b.stride + 1, (w - k) / b.stride + 1];
            conv.push(shape);
            if b.pool > 1 {
                if shape[1] < b.pool || shape[2] < b.pool {
                    return Err(Error::InvalidArgument(format!("pool {} does not fit {shape:?}", b.pool)));
                }
                shape = [shape[0], (shape[1] - b.pool) / b.pool + 1, (shape[2] - b.pool) / b.pool + 1];
            }
            pooled.push(shape);
        }
        Ok((conv, pooled, shape.iter().product()))
    }

    /// Spatial size `(H, W)` of the last convolution's activation maps.
    pub fn last_conv_hw(&self) -> Result<(usize, usize)> {
        let (conv, _, _) = self.shapes()?;
        let s = conv.last().expect("nonempty");
        Ok((s[1], s[2]))
    }
}

/// Per-frame CNN: conv-ReLU-pool blocks, then a ReLU feature layer of
/// width D.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoder<T> {
    config: EncoderConfig,
    convs: Vec<Conv2d<T>>,
    pools: Vec<Option<MaxPool2d>>,
    fc: Linear<T>,
}

struct BlockCache<T> {
    conv: Conv2dCache<T>,
    pre_relu: Vec<T>,
    /// Post-ReLU activation (pool input).
    act: Tensor<T>,
    pool: Option<PoolCache>,
}

/// Forward state for [`Encoder::backward`].
pub struct EncoderCache<T> {
    blocks: Vec<BlockCache<T>>,
    flat: Vec<T>,
    fc_out: Vec<T>,
    pooled_shape: [usize; 3],
}

impl<T> EncoderCache<T> {
    /// Post-ReLU activations of the last convolution.
    pub fn last_activation(&self) -> &Tensor<T> {
        &self.blocks.last().expect("nonempty").act
    }
}

impl<T: Float> Encoder<T> {
    pub fn new<R: Rng + ?Sized>(config: &EncoderConfig, rng: &mut R) -> Result<Self> {
        let (_, _, flat) = config.shapes()?;
        let mut convs = Vec::new();
        let mut pools = Vec::new();
        let mut c = config.in_channels;
        for (i, b) in config.blocks.iter().enumerate() {
            convs.push(Conv2d::new(&format!("encoder.conv{i}"), c, b.filters, b.kernel, b.stride, b.padding, rng));
            pools.push((b.pool > 1).then(|| MaxPool2d::new(b.pool, b.pool)));
            c = b.filters;
        }
        let fc = Linear::new("encoder.fc", flat, config.feature_dim, rng);
        Ok(Self {
            config: config.clone(),
            convs,
            pools,
            fc,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn feature_dim(&self) -> usize {
        self.config.feature_dim
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        let c = &self.config;
        x.expect_shape("encode", &[c.in_channels, c.input_size, c.input_size])
    }

    pub fn encode(&self, x: &Tensor<T>) -> Result<Vec<T>> {
        Ok(self.encode_cached(x)?.0)
    }

    pub fn encode_cached(&self, x: &Tensor<T>) -> Result<(Vec<T>, EncoderCache<T>)> {
        self.check_input(x)?;
        let mut blocks = Vec::with_capacity(self.convs.len());
        let mut cur = x.clone();
        for (conv, pool) in self.convs.iter().zip(&self.pools) {
            let (y, conv_cache) = conv.forward(&cur)?;
            let shape = y.shape().to_vec();
            let pre_relu = y.into_data();
            let act = Tensor::new(shape, relu(&pre_relu))?;
            let (next, pool_cache) = match pool {
                Some(p) => {
                    let (o, c) = p.forward(&act)?;
                    (o, Some(c))
                }
                None => (act.clone(), None),
            };
            blocks.push(BlockCache {
                conv: conv_cache,
                pre_relu,
                act,
                pool: pool_cache,
            });
            cur = next;
        }
        let pooled_shape = [cur.shape()[0], cur.shape()[1], cur.shape()[2]];
        let flat = cur.into_data();
        let fc_out = self.fc.forward(&flat)?;
        let feat = relu(&fc_out);
        Ok((
            feat,
            EncoderCache {
                blocks,
                flat,
                fc_out,
                pooled_shape,
            },
        ))
    }

    /// Gradient of the feature w.r.t. the last conv activation, without
    /// touching parameter gradients.
    fn grad_last_activation(&self, cache: &EncoderCache<T>, dfeat: &[T]) -> Result<Tensor<T>> {
        let dfc = relu_backward(&cache.fc_out, dfeat);
        let mut dflat = vec![T::zero(); self.fc.input_dim()];
        let w = self.fc.weight.value.data();
        let n = self.fc.input_dim();
        for (r, &d) in dfc.iter().enumerate() {
            for (dv, &wv) in dflat.iter_mut().zip(&w[r * n..(r + 1) * n]) {
                *dv += d * wv;
            }
        }
        let dpooled = Tensor::new(cache.pooled_shape.to_vec(), dflat)?;
        let last = cache.blocks.last().expect("nonempty");
        match (self.pools.last().expect("nonempty"), &last.pool) {
            (Some(p), Some(pc)) => p.backward(pc, &dpooled),
            _ => Ok(dpooled),
        }
    }

    /// Accumulates parameter gradients given `dL/dfeature`; returns
    /// `dL/dinput`.
    pub fn backward(&mut self, cache: &EncoderCache<T>, dfeat: &[T]) -> Result<Tensor<T>> {
        let dfc = relu_backward(&cache.fc_out, dfeat);
        let dflat = self.fc.backward(&cache.flat, &dfc)?;
        let mut grad = Tensor::new(cache.pooled_shape.to_vec(), dflat)?;
        for i in (0..self.convs.len()).rev() {
            let b = &cache.blocks[i];
            let dact = match (&self.pools[i], &b.pool) {
                (Some(p), Some(pc)) => p.backward(pc, &grad)?,
                _ => grad,
            };
            let dpre = Tensor::new(b.act.shape().to_vec(), relu_backward(&b.pre_relu, dact.data()))?;
            grad = self.convs[i].backward(&b.conv, &dpre)?;
        }
        Ok(grad)
    }
}

impl<T: Float> Module<T> for Encoder<T> {
    fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        for c in &self.convs {
            c.visit(f);
        }
        self.fc.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        for c in &mut self.convs {
            c.visit_mut(f);
        }
        self.fc.visit_mut(f);
    }
}

/// Encoder plus a linear softmax head, for per-frame encoder training.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameClassifier<T> {
    pub encoder: Encoder<T>,
    pub head: Linear<T>,
}

impl<T: Float> FrameClassifier<T> {
    pub fn new<R: Rng + ?Sized>(config: &EncoderConfig, num_classes: usize, rng: &mut R) -> Result<Self> {
        let encoder = Encoder::new(config, rng)?;
        let head = Linear::new("frame_head", config.feature_dim, num_classes, rng);
        Ok(Self { encoder, head })
    }

    pub fn logits(&self, x: &Tensor<T>) -> Result<Vec<T>> {
        self.head.forward(&self.encoder.encode(x)?)
    }

    /// Softmax cross-entropy on one frame; accumulates gradients.
    pub fn loss_backward(&mut self, x: &Tensor<T>, label: usize) -> Result<T> {
        let (feat, cache) = self.encoder.encode_cached(x)?;
        let logits = self.head.forward(&feat)?;
        let (loss, dlogits) = softmax_cross_entropy(&logits, label)?;
        let dfeat = self.head.backward(&feat, &dlogits)?;
        self.encoder.backward(&cache, &dfeat)?;
        Ok(loss)
    }
}

impl<T: Float> Module<T> for FrameClassifier<T> {
    fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        self.encoder.visit(f);
        self.head.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.encoder.visit_mut(f);
        self.head.visit_mut(f);
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpliceConfig {
    pub encoder: EncoderConfig,
    pub hidden_dim: usize,
    pub num_classes: usize,
    pub window: usize,
}

impl SpliceConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.shapes()?;
        if self.hidden_dim == 0 || self.num_classes < 2 || self.window == 0 {
            return Err(Error::InvalidArgument(format!(
                "invalid splice classifier: hidden {}, classes {}, window {}",
                self.hidden_dim, self.num_classes, self.window
            )));
        }
        Ok(())
    }
}

/// Per-step class distributions and their weighted average.
#[derive(Debug, Clone, PartialEq)]
pub struct StreamOutput<T> {
    pub per_step_probs: Vec<Vec<T>>,
    pub fused_probs: Vec<T>,
}

impl<T: Float> StreamOutput<T> {
    /// Index of the most probable class; ties go to the lowest index.
    pub fn argmax(&self) -> usize {
        argmax(&self.fused_probs)
    }
}

pub fn argmax<T: Float>(p: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in p.iter().enumerate() {
        if v > p[best] {
            best = i;
        }
    }
    best
}

/// Forward state of the recurrent part, for backpropagation.
pub struct SequenceCache<T> {
    features: Vec<Vec<T>>,
    cells: Vec<LstmCache<T>>,
    hs: Vec<Vec<T>>,
    weights: Vec<T>,
    output: StreamOutput<T>,
}

impl<T> SequenceCache<T> {
    pub fn output(&self) -> &StreamOutput<T> {
        &self.output
    }
}

/// One stream: tied encoder, LSTM, per-step head, learned step weights.
#[derive(Debug, Clone, PartialEq)]
pub struct SpliceClassifier<T> {
    config: SpliceConfig,
    pub encoder: Encoder<T>,
    pub lstm: Lstm<T>,
    pub head: Linear<T>,
    /// Pre-softmax weights of the W steps; zero means a plain mean.
    pub step_weights: Param<T>,
}

/// Smallest probability fed to the log in the loss.
const PROB_FLOOR: f64 = 1e-12;

impl<T: Float> SpliceClassifier<T> {
    pub fn new<R: Rng + ?Sized>(config: &SpliceConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let encoder = Encoder::new(&config.encoder, rng)?;
        let lstm = Lstm::new("lstm", config.encoder.feature_dim, config.hidden_dim, rng);
        let head = Linear::new("head", config.hidden_dim, config.num_classes, rng);
        Ok(Self {
            config: config.clone(),
            encoder,
            lstm,
            head,
            step_weights: Param::zeros("step_weights", &[config.window]),
        })
    }

    pub fn config(&self) -> &SpliceConfig {
        &self.config
    }

    pub fn window(&self) -> usize {
        self.config.window
    }

    pub fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    /// Replace the classifier head, e.g. after changing the label set.
    pub fn set_head(&mut self, head: Linear<T>) -> Result<()> {
        if head.input_dim() != self.config.hidden_dim {
            return Err(Error::Shape {
                op: "set_head",
                expected: vec![self.config.hidden_dim],
                actual: vec![head.input_dim()],
            });
        }
        self.config.num_classes = head.output_dim();
        self.head = head;
        Ok(())
    }

    pub fn step_distribution(&self) -> Vec<T> {
        softmax(self.step_weights.value.data())
    }

    fn check_len(&self, n: usize) -> Result<()> {
        if n != self.config.window {
            return Err(Error::Shape {
                op: "forward_splice",
                expected: vec![self.config.window],
                actual: vec![n],
            });
        }
        Ok(())
    }

    pub fn encode_splice(&self, frames: &[Tensor<T>]) -> Result<Vec<Vec<T>>> {
        self.check_len(frames.len())?;
        frames.iter().map(|f| self.encoder.encode(f)).collect()
    }

    /// Recurrent part on precomputed per-frame features.
    pub fn forward_features(&self, features: &[Vec<T>]) -> Result<SequenceCache<T>> {
        self.check_len(features.len())?;
        let hd = self.config.hidden_dim;
        let mut h = vec![T::zero(); hd];
        let mut c = vec![T::zero(); hd];
        let mut cells = Vec::with_capacity(features.len());
        let mut hs = Vec::with_capacity(features.len());
        let mut per_step = Vec::with_capacity(features.len());
        for x in features {
            let (h2, c2, cache) = self.lstm.forward(x, &h, &c)?;
            per_step.push(softmax(&self.head.forward(&h2)?));
            cells.push(cache);
            hs.push(h2.clone());
            h = h2;
            c = c2;
        }
        let weights = self.step_distribution();
        let fused = fuse_steps(&per_step, &weights)?;
        Ok(SequenceCache {
            features: features.to_vec(),
            cells,
            hs,
            weights,
            output: StreamOutput {
                per_step_probs: per_step,
                fused_probs: fused,
            },
        })
    }

    pub fn forward_splice(&self, frames: &[Tensor<T>]) -> Result<StreamOutput<T>> {
        let feats = self.encode_splice(frames)?;
        Ok(self.forward_features(&feats)?.output)
    }

    /// Backpropagates `dL/dfused` through the head, the step weights and
    /// the LSTM; returns `dL/dfeature` for each step.
    pub fn backward_features(&mut self, cache: &SequenceCache<T>, dfused: &[T]) -> Result<Vec<Vec<T>>> {
        let w = cache.features.len();
        let out = &cache.output;
        let dweights: Vec<T> = out
            .per_step_probs
            .iter()
            .map(|p| p.iter().zip(dfused).map(|(&a, &b)| a * b).sum())
            .collect();
        for (g, d) in self.step_weights.grad.data_mut().iter_mut().zip(softmax_backward(&cache.weights, &dweights)) {
            *g += d;
        }
        let hd = self.config.hidden_dim;
        let mut dh_next = vec![T::zero(); hd];
        let mut dc_next = vec![T::zero(); hd];
        let mut dfeat = vec![Vec::new(); w];
        for t in (0..w).rev() {
            let dp: Vec<T> = dfused.iter().map(|&d| d * cache.weights[t]).collect();
            let dz = softmax_backward(&out.per_step_probs[t], &dp);
            let dh_head = self.head.backward(&cache.hs[t], &dz)?;
            let dh: Vec<T> = dh_head.iter().zip(&dh_next).map(|(&a, &b)| a + b).collect();
            let (dx, dh_prev, dc_prev) = self.lstm.backward(&cache.cells[t], &dh, &dc_next)?;
            dfeat[t] = dx;
            dh_next = dh_prev;
            dc_next = dc_prev;
        }
        Ok(dfeat)
    }

    /// NLL of the fused distribution on precomputed features; accumulates
    /// gradients of everything except the encoder.
    pub fn loss_backward_features(&mut self, features: &[Vec<T>], label: usize) -> Result<T> {
        let cache = self.forward_features(features)?;
        let (loss, dfused) = fused_nll(&cache.output.fused_probs, label)?;
        self.backward_features(&cache, &dfused)?;
        Ok(loss)
    }

    /// NLL of the fused distribution end to end; accumulates all gradients.
    /// The encoder gradient is the sum of its W positional contributions.
    pub fn loss_backward(&mut self, frames: &[Tensor<T>], label: usize) -> Result<T> {
        self.check_len(frames.len())?;
        let mut feats = Vec::with_capacity(frames.len());
        let mut enc_caches = Vec::with_capacity(frames.len());
        for f in frames {
            let (x, c) = self.encoder.encode_cached(f)?;
            feats.push(x);
            enc_caches.push(c);
        }
        let cache = self.forward_features(&feats)?;
        let (loss, dfused) = fused_nll(&cache.output.fused_probs, label)?;
        let dfeat = self.backward_features(&cache, &dfused)?;
        for (c, d) in enc_caches.iter().zip(&dfeat) {
            self.encoder.backward(c, d)?;
        }
        Ok(loss)
    }

    /// Raw logits of every step, used by Grad-CAM and diagnostics.
    pub fn step_logits(&self, features: &[Vec<T>]) -> Result<Vec<Vec<T>>> {
        let cache = self.forward_features(features)?;
        cache.hs.iter().map(|h| self.head.forward(h)).collect()
    }
}

impl<T: Float> Module<T> for SpliceClassifier<T> {
    fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        self.encoder.visit(f);
        self.lstm.visit(f);
        self.head.visit(f);
        f(&self.step_weights);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.encoder.visit_mut(f);
        self.lstm.visit_mut(f);
        self.head.visit_mut(f);
        f(&mut self.step_weights);
    }
}

/// `-ln p[label]` and its gradient with respect to `p`.
pub fn fused_nll<T: Float>(p: &[T], label: usize) -> Result<(T, Vec<T>)> {
    if label >= p.len() {
        return Err(Error::InvalidArgument(format!("label {label} out of range for {} classes", p.len())));
    }
    let q = p[label].max(T::c(PROB_FLOOR));
    let mut grad = vec![T::zero(); p.len()];
    grad[label] = -T::one() / q;
    Ok((-q.ln(), grad))
}

/// Weighted average of per-step distributions; `weights` must lie on the
/// simplex.
pub fn fuse_steps<T: Float>(per_step: &[Vec<T>], weights: &[T]) -> Result<Vec<T>> {
    if per_step.len() != weights.len() || per_step.is_empty() {
        return Err(Error::Shape {
            op: "fuse_steps",
            expected: vec![per_step.len()],
            actual: vec![weights.len()],
        });
    }
    let sum: f64 = weights.iter().map(|w| w.f64()).sum();
    if weights.iter().any(|w| w.f64() < 0.0) || (sum - 1.0).abs() > 1e-6 {
        return Err(Error::InvalidArgument(format!("step weights must be a distribution, sum {sum}")));
    }
    let l = per_step[0].len();
    let mut out = vec![T::zero(); l];
    for (row, &w) in per_step.iter().zip(weights) {
        if row.len() != l {
            return Err(Error::Shape {
                op: "fuse_steps",
                expected: vec![l],
                actual: vec![row.len()],
            });
        }
        for (o, &p) in out.iter_mut().zip(row) {
            *o += w * p;
        }
    }
    Ok(out)
}

/// Late fusion of the RGB and flow posteriors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum Fusion {
    Mean,
    /// `lambda · rgb + (1 − lambda) · flow`.
    Weighted { lambda: f64 },
}

impl Default for Fusion {
    fn default() -> Self {
        Fusion::Mean
    }
}

pub fn fuse_streams(rgb: &[f64], flow: &[f64], mode: Fusion) -> Result<Vec<f64>> {
    if rgb.len() != flow.len() {
        return Err(Error::Shape {
            op: "fuse_streams",
            expected: vec![rgb.len()],
            actual: vec![flow.len()],
        });
    }
    let lambda = match mode {
        Fusion::Mean => 0.5,
        Fusion::Weighted { lambda } if (0.0..=1.0).contains(&lambda) => lambda,
        Fusion::Weighted { lambda } => {
            return Err(Error::InvalidArgument(format!("fusion weight {lambda} outside [0, 1]")))
        }
    };
    Ok(rgb.iter().zip(flow).map(|(&a, &b)| lambda * a + (1.0 - lambda) * b).collect())
}

/// The RGB and flow streams with their fusion rule.
#[derive(Debug, Clone, PartialEq)]
pub struct TwoStreamModel<T> {
    pub rgb: SpliceClassifier<T>,
    pub flow: SpliceClassifier<T>,
    pub fusion: Fusion,
}

impl<T: Float> TwoStreamModel<T> {
    pub fn new(rgb: SpliceClassifier<T>, flow: SpliceClassifier<T>, fusion: Fusion) -> Result<Self> {
        if rgb.window() != flow.window() || rgb.num_classes() != flow.num_classes() {
            return Err(Error::InvalidArgument(format!(
                "streams disagree: window {}/{} classes {}/{}",
                rgb.window(),
                flow.window(),
                rgb.num_classes(),
                flow.num_classes()
            )));
        }
        Ok(Self { rgb, flow, fusion })
    }

    pub fn predict(&self, rgb: &[Tensor<T>], flow: &[Tensor<T>]) -> Result<Vec<f64>> {
        let a: Vec<f64> = self.rgb.forward_splice(rgb)?.fused_probs.iter().map(|v| v.f64()).collect();
        let b: Vec<f64> = self.flow.forward_splice(flow)?.fused_probs.iter().map(|v| v.f64()).collect();
        fuse_streams(&a, &b, self.fusion)
    }
}

/// Max-normalized class activation map over the last conv layer's grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Heatmap {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f64>,
}

impl Heatmap {
    /// Upsample to `(width, height)` as a single-channel image in [0, 1].
    pub fn upsample(&self, width: usize, height: usize) -> Image {
        let img = Image::new(1, self.width, self.height, self.values.iter().map(|&v| v as f32).collect())
            .expect("heatmap dims");
        resize_bilinear(&img, width, height)
    }

    /// Fraction of total mass inside `[x0, x1) × [y0, y1)` in heatmap cells.
    pub fn mass_in(&self, x0: f64, y0: f64, x1: f64, y1: f64) -> f64 {
        let total: f64 = self.values.iter().sum();
        if total <= 0.0 {
            return 0.0;
        }
        let mut inside = 0.0;
        for y in 0..self.height {
            for x in 0..self.width {
                // Area overlap of cell [x, x+1) x [y, y+1) with the box.
                let ox = ((x as f64 + 1.0).min(x1) - (x as f64).max(x0)).max(0.0);
                let oy = ((y as f64 + 1.0).min(y1) - (y as f64).max(y0)).max(0.0);
                inside += ox * oy * self.values[y * self.width + x];
            }
        }
        inside / total
    }

    /// 8-bit grayscale PNG upsampled to `size`, plus the raw values as a
    /// tensor file next to it (`.bin`).
    pub fn save(&self, png: &Path, size: (usize, usize)) -> Result<()> {
        self.upsample(size.0, size.1).save_png(png)?;
        let raw: Vec<f32> = self.values.iter().map(|&v| v as f32).collect();
        write_tensor_file(&png.with_extension("bin"), &[self.height, self.width], "", &raw)
    }
}

/// Grad-CAM for class `class` at step `step` (0-based) of a splice: channel
/// weights are the spatial mean of the logit's gradient w.r.t. the last
/// conv activation of frame `step`; the map is the ReLU of the weighted sum
/// of activation channels, scaled to max 1.
pub fn grad_cam<T: Float>(stream: &SpliceClassifier<T>, frames: &[Tensor<T>], step: usize, class: usize) -> Result<Heatmap> {
    if step >= stream.window() || class >= stream.num_classes() {
        return Err(Error::InvalidArgument(format!(
            "grad-cam step {step} / class {class} out of range (window {}, classes {})",
            stream.window(),
            stream.num_classes()
        )));
    }
    stream.check_len(frames.len())?;
    let mut feats = Vec::with_capacity(frames.len());
    let mut target_cache = None;
    for (t, f) in frames.iter().enumerate() {
        if t == step {
            let (x, c) = stream.encoder.encode_cached(f)?;
            feats.push(x);
            target_cache = Some(c);
        } else {
            feats.push(stream.encoder.encode(f)?);
        }
    }
    let enc_cache = target_cache.expect("step in range");
    let seq = stream.forward_features(&feats)?;
    // The frame at `step` enters the network only through LSTM input
    // x_step, so backprop through that one cell is exact.
    let hd = stream.config.hidden_dim;
    let dh: Vec<T> = stream.head.weight.value.data()[class * hd..(class + 1) * hd].to_vec();
    let mut scratch = stream.lstm.clone();
    let (dx, _, _) = scratch.backward(&seq.cells[step], &dh, &vec![T::zero(); hd])?;
    let da = stream.encoder.grad_last_activation(&enc_cache, &dx)?;
    let act = enc_cache.last_activation();
    let (k, h, w) = (act.shape()[0], act.shape()[1], act.shape()[2]);
    let n = h * w;
    let mut cam = vec![0.0f64; n];
    for ch in 0..k {
        let alpha: f64 = da.data()[ch * n..(ch + 1) * n].iter().map(|v| v.f64()).sum::<f64>() / n as f64;
        for (cv, a) in cam.iter_mut().zip(&act.data()[ch * n..(ch + 1) * n]) {
            *cv += alpha * a.f64();
        }
    }
    cam.iter_mut().for_each(|v| *v = v.max(0.0));
    let m = cam.iter().copied().fold(0.0, f64::max);
    if m > 0.0 {
        cam.iter_mut().for_each(|v| *v /= m);
    }
    Ok(Heatmap {
        width: w,
        height: h,
        values: cam,
    })
}

/// Converts a preprocessed frame into a tensor of the model precision.
pub fn image_to_tensor<T: Float>(img: &Image) -> Tensor<T> {
    Tensor::new(
        vec![img.channels(), img.height(), img.width()],
        img.data().iter().map(|&v| T::c(f64::from(v))).collect(),
    )
    .expect("image dims")
}
