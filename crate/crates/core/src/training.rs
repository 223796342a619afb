//! Per-stream training: SGD with momentum, step learning-rate decay and
//! weight decay, in two stages (encoder on single frames with an auxiliary
//! head, then the recurrent part on frozen-encoder features), optionally
//! followed by end-to-end fine-tuning. A curriculum can first train on
//! merged opposite-action labels and then split them.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::LabelMap;
use crate::error::{Error, Result};
use crate::model::{image_to_tensor, EncoderConfig, FrameClassifier, SpliceClassifier, SpliceConfig};
use crate::nn::{save_checkpoint, Linear, Module, Tensor};
use crate::preprocess::{center_offset, make_splices, preprocess_at, random_offset, CropConfig, DatasetStats, SpliceMode};
use crate::seed::derive_seed;
use crate::streams::{StreamData, StreamKind};

/// Optimizer and schedule of one training stage.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StageConfig {
    pub base_lr: f64,
    pub momentum: f64,
    pub lr_decay_factor: f64,
    pub lr_step: usize,
    pub max_iterations: usize,
    pub weight_decay: f64,
    pub batch_size: usize,
    /// Global gradient-norm clip.
    pub clip_norm: Option<f64>,
}

impl Default for StageConfig {
    fn default() -> Self {
        Self {
            base_lr: 0.001,
            momentum: 0.9,
            lr_decay_factor: 0.1,
            lr_step: 100,
            max_iterations: 500,
            weight_decay: 0.005,
            batch_size: 16,
            clip_norm: None,
        }
    }
}

impl StageConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.base_lr > 0.0
            && (0.0..1.0).contains(&self.momentum)
            && self.lr_decay_factor > 0.0
            && self.lr_decay_factor <= 1.0
            && self.lr_step > 0
            && self.weight_decay >= 0.0
            && self.batch_size > 0
            && self.clip_norm.is_none_or(|c| c > 0.0);
        if !ok {
            return Err(Error::InvalidArgument(format!("invalid stage config {self:?}")));
        }
        Ok(())
    }

    /// `base_lr · decay^⌊iter / step⌋`
    pub fn learning_rate(&self, iteration: usize) -> f64 {
        self.base_lr * self.lr_decay_factor.powi((iteration / self.lr_step) as i32)
    }

    /// Same schedule shape at a hundredth of the iterations, batch 16.
    pub fn desk(self) -> Self {
        Self {
            lr_step: (self.lr_step / 100).max(1),
            max_iterations: self.max_iterations / 100,
            batch_size: 16,
            ..self
        }
    }
}

/// Schedules of the stages of one stream.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StreamSchedule {
    pub encoder: StageConfig,
    pub lstm: StageConfig,
    /// End-to-end fine-tuning after the two stages.
    #[serde(default)]
    pub finetune: Option<StageConfig>,
}

impl StreamSchedule {
    /// Full-scale schedules. The RGB recurrent stage's length is not
    /// reported; it is set to the flow stream's 70K.
    pub fn paper(kind: StreamKind) -> Self {
        let base = StageConfig {
            base_lr: 0.001,
            momentum: 0.9,
            lr_decay_factor: 0.1,
            weight_decay: 0.005,
            batch_size: 128,
            ..StageConfig::default()
        };
        let clip = Some(5.0);
        match kind {
            StreamKind::Rgb => Self {
                encoder: StageConfig {
                    lr_step: 10_000,
                    max_iterations: 50_000,
                    ..base
                },
                lstm: StageConfig {
                    lr_step: 50_000,
                    max_iterations: 70_000,
                    clip_norm: clip,
                    ..base
                },
                finetune: None,
            },
            StreamKind::Flow => Self {
                encoder: StageConfig {
                    lr_step: 20_000,
                    max_iterations: 70_000,
                    ..base
                },
                lstm: StageConfig {
                    lr_step: 20_000,
                    max_iterations: 70_000,
                    clip_norm: clip,
                    ..base
                },
                finetune: None,
            },
        }
    }

    pub fn desk(kind: StreamKind) -> Self {
        let p = Self::paper(kind);
        Self {
            encoder: p.encoder.desk(),
            lstm: p.lstm.desk(),
            finetune: None,
        }
    }

    /// Override the base learning rate of every stage.
    pub fn with_base_lr(mut self, lr: f64) -> Self {
        self.encoder.base_lr = lr;
        self.lstm.base_lr = lr;
        if let Some(f) = &mut self.finetune {
            f.base_lr = lr;
        }
        self
    }
}

/// Velocity per parameter element plus the iteration counter.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub velocity: Vec<f32>,
    pub iteration: usize,
}

impl OptimizerState {
    pub fn new<M: Module<f32> + ?Sized>(model: &M) -> Self {
        Self {
            velocity: vec![0.0; model.num_params()],
            iteration: 0,
        }
    }
}

/// One momentum step on every parameter accepted by `trainable`:
/// `v ← m·v − lr·(g + wd·w); w ← w + v`. Returns the learning rate used.
pub fn sgd_step<M: Module<f32> + ?Sized>(
    model: &mut M,
    state: &mut OptimizerState,
    config: &StageConfig,
    trainable: &dyn Fn(&str) -> bool,
) -> Result<f64> {
    if state.velocity.len() != model.num_params() {
        return Err(Error::Shape {
            op: "sgd_step",
            expected: vec![model.num_params()],
            actual: vec![state.velocity.len()],
        });
    }
    let mut bad = None;
    model.visit(&mut |p| {
        if bad.is_none() && trainable(&p.name) && !p.grad.all_finite() {
            bad = Some(p.name.clone());
        }
    });
    if let Some(name) = bad {
        return Err(Error::NonFiniteGradient {
            name,
            iteration: state.iteration,
        });
    }
    let lr = config.learning_rate(state.iteration);
    let (m, wd) = (config.momentum as f32, config.weight_decay as f32);
    let lr32 = lr as f32;
    let mut off = 0;
    let velocity = &mut state.velocity;
    model.visit_mut(&mut |p| {
        let n = p.value.len();
        if trainable(&p.name) {
            let v = &mut velocity[off..off + n];
            let grads = p.grad.data().to_vec();
            for ((w, vel), g) in p.value.data_mut().iter_mut().zip(v.iter_mut()).zip(grads) {
                *vel = m * *vel - lr32 * (g + wd * *w);
                *w += *vel;
            }
        }
        off += n;
    });
    state.iteration += 1;
    Ok(lr)
}

/// Scale gradients of trainable parameters so their global norm is at most
/// `max_norm`. Returns the norm before clipping.
pub fn clip_grad_norm<M: Module<f32> + ?Sized>(model: &mut M, max_norm: f64, trainable: &dyn Fn(&str) -> bool) -> f64 {
    let mut sq = 0.0f64;
    model.visit(&mut |p| {
        if trainable(&p.name) {
            sq += p.grad.data().iter().map(|&g| f64::from(g) * f64::from(g)).sum::<f64>();
        }
    });
    let norm = sq.sqrt();
    if norm > max_norm {
        let k = (max_norm / norm) as f32;
        model.visit_mut(&mut |p| {
            if trainable(&p.name) {
                p.grad.data_mut().iter_mut().for_each(|g| *g *= k);
            }
        });
    }
    norm
}

/// Opposite-action pairs trained as one class first, then split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurriculumSchedule {
    pub merge_pairs: Vec<(usize, usize)>,
    /// Recurrent-stage iterations on merged labels.
    pub phase1_iterations: usize,
    /// Recurrent-stage iterations on full labels.
    pub phase2_iterations: usize,
    #[serde(default = "default_noise")]
    pub split_noise_std: f64,
}

fn default_noise() -> f64 {
    0.01
}

impl CurriculumSchedule {
    fn total(&self) -> usize {
        self.phase1_iterations + self.phase2_iterations
    }

    /// Phase-1 share of `iterations`, proportional to the recurrent split.
    fn phase1_share(&self, iterations: usize) -> usize {
        if self.total() == 0 {
            return 0;
        }
        ((iterations as f64 * self.phase1_iterations as f64 / self.total() as f64).round() as usize).min(iterations)
    }
}

/// Merge each pair `(a, b)` into one class named `"a+b"`, placed at the
/// position of the lower index. Returns the merged map and the old→merged
/// index mapping.
pub fn curriculum_merge(labels: &LabelMap, pairs: &[(usize, usize)]) -> Result<(LabelMap, Vec<usize>)> {
    let l = labels.len();
    let mut partner: Vec<Option<usize>> = vec![None; l];
    for &(a, b) in pairs {
        if a >= l || b >= l || a == b {
            return Err(Error::InvalidArgument(format!("invalid merge pair ({a}, {b}) for {l} classes")));
        }
        if partner[a].is_some() || partner[b].is_some() {
            return Err(Error::InvalidArgument(format!("merge pairs overlap at ({a}, {b})")));
        }
        partner[a] = Some(b);
        partner[b] = Some(a);
    }
    let pair_name: std::collections::HashMap<usize, String> = pairs
        .iter()
        .map(|&(a, b)| (a.min(b), format!("{}+{}", labels.name(a), labels.name(b))))
        .collect();
    let mut names = Vec::new();
    let mut cats = Vec::new();
    let mut mapping = vec![usize::MAX; l];
    for i in 0..l {
        match partner[i] {
            Some(j) if j < i => mapping[i] = mapping[j],
            _ => {
                mapping[i] = names.len();
                names.push(pair_name.get(&i).cloned().unwrap_or_else(|| labels.name(i).to_string()));
                if let Some(c) = labels.categories() {
                    cats.push(c[i].clone());
                }
            }
        }
    }
    let merged = LabelMap::with_categories(names, labels.categories().map(|_| cats))?;
    Ok((merged, mapping))
}

/// Full-label head from a merged-label head. Each class's row copies its
/// merged row; the bias also gets `-ln k` for a k-way split so that the
/// split probabilities sum back to the merged one. Gaussian noise of
/// `noise_std` then breaks the tie.
pub fn split_head<R: Rng + ?Sized>(head: &Linear<f32>, mapping: &[usize], noise_std: f64, rng: &mut R) -> Result<Linear<f32>> {
    let merged = head.output_dim();
    if mapping.iter().any(|&m| m >= merged) {
        return Err(Error::InvalidArgument(format!(
            "mapping targets a class beyond the {merged}-way head"
        )));
    }
    let d = head.input_dim();
    let mut counts = vec![0usize; merged];
    for &m in mapping {
        counts[m] += 1;
    }
    let normal = Normal::new(0.0, noise_std.max(0.0)).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let noise = |rng: &mut R| if noise_std > 0.0 { normal.sample(rng) as f32 } else { 0.0 };
    let mut out = Linear::zeros("head", d, mapping.len());
    let (w_old, b_old) = (head.weight.value.data(), head.bias.value.data());
    for (j, &m) in mapping.iter().enumerate() {
        for k in 0..d {
            out.weight.value.data_mut()[j * d + k] = w_old[m * d + k] + noise(rng);
        }
        out.bias.value.data_mut()[j] = b_old[m] - (counts[m] as f32).ln() + noise(rng);
    }
    out.weight.name = head.weight.name.clone();
    out.bias.name = head.bias.name.clone();
    Ok(out)
}

/// Split a merged-label stream: encoder, LSTM and step weights carry over
/// unchanged and the head is expanded with [`split_head`].
pub fn curriculum_split<R: Rng + ?Sized>(
    model: &SpliceClassifier<f32>,
    mapping: &[usize],
    full: &LabelMap,
    noise_std: f64,
    rng: &mut R,
) -> Result<SpliceClassifier<f32>> {
    if mapping.len() != full.len() || model.num_classes() != mapping.iter().max().map_or(0, |m| m + 1) {
        return Err(Error::InvalidArgument(format!(
            "mapping of {} classes does not connect a {}-way model to {} labels",
            mapping.len(),
            model.num_classes(),
            full.len()
        )));
    }
    let mut out = model.clone();
    out.set_head(split_head(&model.head, mapping, noise_std, rng)?)?;
    out.zero_grad();
    Ok(out)
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub stream: StreamKind,
    pub stage: String,
    pub phase: String,
    pub iter: usize,
    pub lr: f64,
    pub loss: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub val_accuracy: Option<f64>,
}

/// Model shape and data handling shared by all stages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainOptions {
    pub encoder: EncoderConfig,
    pub hidden_dim: usize,
    pub window: usize,
    pub crop: CropConfig,
    /// Stride between training splice centers.
    pub splice_stride: usize,
    pub validation_every: usize,
    /// Cap on validation splices (evenly spread over the held-in videos).
    pub validation_splices: usize,
    pub checkpoint_every: Option<usize>,
    pub seed: u64,
}

/// Result of [`train_stream`].
#[derive(Debug, Clone)]
pub struct TrainedStream {
    pub model: SpliceClassifier<f32>,
    pub stats: DatasetStats,
    pub log: Vec<LogEntry>,
    /// The recurrent-stage model at the end of phase 1, with its merged
    /// label map and mapping, when a curriculum ran.
    pub merged: Option<(SpliceClassifier<f32>, LabelMap, Vec<usize>)>,
    pub final_checkpoint: Option<PathBuf>,
}

/// Where training writes its log and checkpoints.
#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub dir: PathBuf,
}

struct Sink {
    log: Vec<LogEntry>,
    file: Option<BufWriter<File>>,
    dir: Option<PathBuf>,
    last_good: Option<PathBuf>,
}

impl Sink {
    fn new(kind: StreamKind, out: Option<&TrainOutput>) -> Result<Self> {
        let (file, dir) = match out {
            Some(o) => {
                std::fs::create_dir_all(&o.dir).map_err(|e| Error::io(&o.dir, e))?;
                let p = o.dir.join(format!("train_{kind}.jsonl"));
                let f = File::create(&p).map_err(|e| Error::io(&p, e))?;
                (Some(BufWriter::new(f)), Some(o.dir.clone()))
            }
            None => (None, None),
        };
        Ok(Self {
            log: Vec::new(),
            file,
            dir,
            last_good: None,
        })
    }

    fn push(&mut self, e: LogEntry) -> Result<()> {
        if let Some(f) = &mut self.file {
            let line = serde_json::to_string(&e)?;
            writeln!(f, "{line}").map_err(|err| Error::io("training log", err))?;
        }
        self.log.push(e);
        Ok(())
    }

    fn checkpoint<M: Module<f32>>(&mut self, name: &str, model: &M, meta: serde_json::Value) -> Result<Option<PathBuf>> {
        let Some(dir) = &self.dir else { return Ok(None) };
        let p = dir.join(format!("{name}.ckpt"));
        save_checkpoint(&p, model, &meta)?;
        self.last_good = Some(p.clone());
        Ok(Some(p))
    }

    fn finish(&mut self) -> Result<()> {
        if let Some(f) = &mut self.file {
            f.flush().map_err(|e| Error::io("training log", e))?;
        }
        Ok(())
    }
}

/// Mean loss and mean gradient over a batch. Each sample's gradient is
/// computed on its own copy of the model and the copies are summed in
/// sample order, so the result does not depend on the thread count.
fn batch_gradient<M, S, F>(model: &mut M, samples: &[S], f: F) -> Result<f64>
where
    M: Module<f32> + Clone + Send + Sync,
    S: Sync,
    F: Fn(&mut M, &S) -> Result<f32> + Sync,
{
    let base = {
        let mut b = model.clone();
        b.zero_grad();
        b
    };
    let parts: Vec<(f32, Vec<f32>)> = samples
        .par_iter()
        .map(|s| {
            let mut m = base.clone();
            let loss = f(&mut m, s)?;
            Ok((loss, m.flat_grads()))
        })
        .collect::<Result<_>>()?;
    let n = model.num_params();
    let mut sum = vec![0.0f32; n];
    let mut loss = 0.0f64;
    for (l, g) in &parts {
        loss += f64::from(*l);
        for (a, b) in sum.iter_mut().zip(g) {
            *a += b;
        }
    }
    let k = 1.0 / samples.len() as f32;
    sum.iter_mut().for_each(|v| *v *= k);
    model.zero_grad();
    model.add_flat_grads(&sum);
    Ok(loss / samples.len() as f64)
}

/// Precomputed center-crop features of every frame of the given videos.
pub fn encode_videos(
    encoder: &crate::model::Encoder<f32>,
    data: &StreamData,
    videos: &[usize],
    crop: &CropConfig,
    stats: &DatasetStats,
) -> Result<Vec<Vec<Vec<f32>>>> {
    videos
        .iter()
        .map(|&v| {
            data.videos[v]
                .frames
                .par_iter()
                .map(|f| {
                    let off = center_offset(f.width(), f.height(), crop.crop_size);
                    encoder.encode(&image_to_tensor(&preprocess_at(f, crop, stats, off)?))
                })
                .collect()
        })
        .collect()
}

#[derive(Clone, Copy)]
struct SpliceRef {
    video: usize,
    splice: usize,
}

/// Train one stream on `train_videos` (indices into `data.videos`).
pub fn train_stream(
    data: &StreamData,
    train_videos: &[usize],
    labels: &LabelMap,
    schedule: &StreamSchedule,
    curriculum: Option<&CurriculumSchedule>,
    opts: &TrainOptions,
    out: Option<&TrainOutput>,
) -> Result<TrainedStream> {
    schedule.encoder.validate()?;
    schedule.lstm.validate()?;
    if let Some(f) = &schedule.finetune {
        f.validate()?;
    }
    opts.crop.validate()?;
    if train_videos.is_empty() {
        return Err(Error::InvalidArgument("no training videos".into()));
    }
    let kind = data.kind;
    let l = labels.len();
    let stats = data.stats(train_videos)?;
    let (merged_map, mapping) = match curriculum {
        Some(c) => curriculum_merge(labels, &c.merge_pairs)?,
        None => (labels.clone(), (0..l).collect()),
    };
    let tag = |s: &str| format!("train/{kind}/{s}");
    let mut sink = Sink::new(kind, out)?;
    let all_frames: Vec<(usize, usize)> = train_videos
        .iter()
        .flat_map(|&v| (0..data.videos[v].len()).map(move |t| (v, t)))
        .collect();

    // Stage 1: encoder with an auxiliary per-frame head.
    let enc_cfg = schedule.encoder;
    let enc_phase1 = curriculum.map_or(0, |c| c.phase1_share(enc_cfg.max_iterations));
    let mut init_rng = ChaCha8Rng::seed_from_u64(derive_seed(opts.seed, &tag("init"), 0));
    let mut frame_model = FrameClassifier::<f32>::new(&opts.encoder, if enc_phase1 > 0 { merged_map.len() } else { l }, &mut init_rng)?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(opts.seed, &tag("encoder"), 0));
    let mut state = OptimizerState::new(&frame_model);
    let all = |_: &str| true;
    for it in 0..enc_cfg.max_iterations {
        if it == enc_phase1 && enc_phase1 > 0 {
            let head = split_head(&frame_model.head, &mapping, curriculum.map_or(0.0, |c| c.split_noise_std), &mut rng)?;
            frame_model.head = head;
            // New head shape: phase 2 is a fresh solver run, so momentum
            // and the step schedule both restart.
            state = OptimizerState::new(&frame_model);
        }
        let merged_phase = it < enc_phase1;
        let batch: Vec<(usize, usize, (usize, usize), usize)> = (0..enc_cfg.batch_size)
            .map(|_| {
                let (v, t) = all_frames[rng.random_range(0..all_frames.len())];
                let f = &data.videos[v].frames[t];
                let off = random_offset(f.width(), f.height(), opts.crop.crop_size, &mut rng)?;
                let y = data.videos[v].labels[t];
                Ok((v, t, off, if merged_phase { mapping[y] } else { y }))
            })
            .collect::<Result<_>>()?;
        let loss = batch_gradient(&mut frame_model, &batch, |m, &(v, t, off, y)| {
            let x = image_to_tensor(&preprocess_at(&data.videos[v].frames[t], &opts.crop, &stats, off)?);
            m.loss_backward(&x, y)
        })?;
        check_loss(loss, it, &sink)?;
        if let Some(c) = enc_cfg.clip_norm {
            clip_grad_norm(&mut frame_model, c, &all);
        }
        let lr = sgd_step(&mut frame_model, &mut state, &enc_cfg, &all)?;
        let val = (should_validate(it, enc_cfg.max_iterations, opts.validation_every))
            .then(|| frame_accuracy(&frame_model, data, train_videos, opts, &stats, if merged_phase { Some(&mapping) } else { None }))
            .transpose()?;
        sink.push(LogEntry {
            stream: kind,
            stage: "encoder".into(),
            phase: phase_name(merged_phase),
            iter: it,
            lr,
            loss,
            val_accuracy: val,
        })?;
        if opts.checkpoint_every.is_some_and(|k| (it + 1) % k == 0) {
            sink.checkpoint(&format!("{kind}_encoder_{:06}", it + 1), &frame_model, serde_json::json!({"iter": it + 1}))?;
        }
    }

    // Stage 2: recurrent part on frozen-encoder features.
    let splice_cfg = SpliceConfig {
        encoder: opts.encoder.clone(),
        hidden_dim: opts.hidden_dim,
        num_classes: l,
        window: opts.window,
    };
    let mut model = SpliceClassifier::<f32>::new(&splice_cfg, &mut init_rng)?;
    model.encoder = frame_model.encoder.clone();
    let lstm_cfg = schedule.lstm;
    let (phase1, total) = match curriculum {
        Some(c) => (c.phase1_iterations, c.total()),
        None => (0, lstm_cfg.max_iterations),
    };
    if phase1 > 0 {
        let mut h_rng = ChaCha8Rng::seed_from_u64(derive_seed(opts.seed, &tag("merged_head"), 0));
        model.set_head(Linear::new("head", opts.hidden_dim, merged_map.len(), &mut h_rng))?;
    }
    let feats = encode_videos(&model.encoder, data, train_videos, &opts.crop, &stats)?;
    let splices: Vec<Vec<crate::preprocess::Splice>> = train_videos
        .iter()
        .map(|&v| make_splices(&data.videos[v].labels, opts.window, SpliceMode::Train { stride: opts.splice_stride }))
        .collect::<Result<_>>()?;
    let pool: Vec<SpliceRef> = splices
        .iter()
        .enumerate()
        .flat_map(|(vi, s)| (0..s.len()).map(move |si| SpliceRef { video: vi, splice: si }))
        .collect();
    let val_set = validation_set(data, train_videos, opts)?;
    let not_encoder = |name: &str| !name.starts_with("encoder.");
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(opts.seed, &tag("lstm"), 0));
    let mut state = OptimizerState::new(&model);
    let mut merged_snapshot = None;
    for it in 0..total {
        if it == phase1 && phase1 > 0 {
            let c = curriculum.expect("phase 1 implies a curriculum");
            merged_snapshot = Some((model.clone(), merged_map.clone(), mapping.clone()));
            model = curriculum_split(&model, &mapping, labels, c.split_noise_std, &mut rng)?;
            state = OptimizerState::new(&model);
        }
        let merged_phase = it < phase1;
        let batch: Vec<SpliceRef> = (0..lstm_cfg.batch_size).map(|_| pool[rng.random_range(0..pool.len())]).collect();
        let loss = batch_gradient(&mut model, &batch, |m, r| {
            let s = &splices[r.video][r.splice];
            let x: Vec<Vec<f32>> = s.frame_indices.iter().map(|&t| feats[r.video][t].clone()).collect();
            m.loss_backward_features(&x, if merged_phase { mapping[s.label] } else { s.label })
        })?;
        check_loss(loss, it, &sink)?;
        if let Some(c) = lstm_cfg.clip_norm {
            clip_grad_norm(&mut model, c, &not_encoder);
        }
        let lr = sgd_step(&mut model, &mut state, &lstm_cfg, &not_encoder)?;
        let val = should_validate(it, total, opts.validation_every)
            .then(|| splice_accuracy(&model, &val_set, &opts.crop, &stats, merged_phase.then_some(&mapping[..])))
            .transpose()?;
        sink.push(LogEntry {
            stream: kind,
            stage: "lstm".into(),
            phase: phase_name(merged_phase),
            iter: it,
            lr,
            loss,
            val_accuracy: val,
        })?;
        if opts.checkpoint_every.is_some_and(|k| (it + 1) % k == 0) {
            sink.checkpoint(&format!("{kind}_lstm_{:06}", it + 1), &model, serde_json::json!({"iter": it + 1}))?;
        }
    }

    // Optional stage 3: end-to-end fine-tuning on full labels.
    if let Some(ft) = &schedule.finetune {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(opts.seed, &tag("finetune"), 0));
        let mut state = OptimizerState::new(&model);
        for it in 0..ft.max_iterations {
            let batch: Vec<(SpliceRef, (usize, usize))> = (0..ft.batch_size)
                .map(|_| {
                    let r = pool[rng.random_range(0..pool.len())];
                    let f = &data.videos[train_videos[r.video]].frames[0];
                    let off = random_offset(f.width(), f.height(), opts.crop.crop_size, &mut rng)?;
                    Ok((r, off))
                })
                .collect::<Result<_>>()?;
            let loss = batch_gradient(&mut model, &batch, |m, (r, off)| {
                let s = &splices[r.video][r.splice];
                let v = &data.videos[train_videos[r.video]];
                let frames: Vec<Tensor<f32>> = s
                    .frame_indices
                    .iter()
                    .map(|&t| Ok(image_to_tensor(&preprocess_at(&v.frames[t], &opts.crop, &stats, *off)?)))
                    .collect::<Result<_>>()?;
                m.loss_backward(&frames, s.label)
            })?;
            check_loss(loss, it, &sink)?;
            if let Some(c) = ft.clip_norm {
                clip_grad_norm(&mut model, c, &all);
            }
            let lr = sgd_step(&mut model, &mut state, ft, &all)?;
            let val = should_validate(it, ft.max_iterations, opts.validation_every)
                .then(|| splice_accuracy(&model, &val_set, &opts.crop, &stats, None))
                .transpose()?;
            sink.push(LogEntry {
                stream: kind,
                stage: "finetune".into(),
                phase: phase_name(false),
                iter: it,
                lr,
                loss,
                val_accuracy: val,
            })?;
        }
    }

    let final_checkpoint = sink.checkpoint(
        &format!("{kind}_final"),
        &model,
        serde_json::json!({
            "stream": kind,
            "config": splice_cfg,
            "stats": stats,
            "labels": labels.names(),
        }),
    )?;
    sink.finish()?;
    Ok(TrainedStream {
        model,
        stats,
        log: sink.log,
        merged: merged_snapshot,
        final_checkpoint,
    })
}

fn phase_name(merged: bool) -> String {
    if merged { "merged" } else { "full" }.to_string()
}

fn should_validate(it: usize, total: usize, every: usize) -> bool {
    (every > 0 && (it + 1) % every == 0) || it + 1 == total
}

fn check_loss(loss: f64, it: usize, sink: &Sink) -> Result<()> {
    if !loss.is_finite() {
        return Err(Error::Diverged {
            iteration: it,
            last_good: sink.last_good.clone(),
        });
    }
    Ok(())
}

/// Held-in validation splices: evaluation tiles of the training videos,
/// evenly subsampled.
struct ValidationSet<'a> {
    items: Vec<(&'a crate::streams::VideoFrames, crate::preprocess::Splice)>,
}

fn validation_set<'a>(data: &'a StreamData, videos: &[usize], opts: &TrainOptions) -> Result<ValidationSet<'a>> {
    let mut all = Vec::new();
    for &v in videos {
        let vf = &data.videos[v];
        for s in make_splices(&vf.labels, opts.window, SpliceMode::Eval)? {
            all.push((vf, s));
        }
    }
    let k = opts.validation_splices.min(all.len());
    let items = if k == 0 {
        Vec::new()
    } else {
        (0..k).map(|i| all[i * all.len() / k].clone()).collect()
    };
    Ok(ValidationSet { items })
}

fn splice_accuracy(
    model: &SpliceClassifier<f32>,
    set: &ValidationSet<'_>,
    crop: &CropConfig,
    stats: &DatasetStats,
    mapping: Option<&[usize]>,
) -> Result<f64> {
    if set.items.is_empty() {
        return Ok(0.0);
    }
    let correct: usize = set
        .items
        .par_iter()
        .map(|(v, s)| {
            let frames: Vec<Tensor<f32>> = s
                .frame_indices
                .iter()
                .map(|&t| {
                    let f = &v.frames[t];
                    let off = center_offset(f.width(), f.height(), crop.crop_size);
                    Ok(image_to_tensor(&preprocess_at(f, crop, stats, off)?))
                })
                .collect::<Result<_>>()?;
            let pred = model.forward_splice(&frames)?.argmax();
            let y = mapping.map_or(s.label, |m| m[s.label]);
            Ok(usize::from(pred == y))
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .sum();
    Ok(correct as f64 / set.items.len() as f64)
}

fn frame_accuracy(
    model: &FrameClassifier<f32>,
    data: &StreamData,
    videos: &[usize],
    opts: &TrainOptions,
    stats: &DatasetStats,
    mapping: Option<&Vec<usize>>,
) -> Result<f64> {
    let frames: Vec<(usize, usize)> = videos
        .iter()
        .flat_map(|&v| (0..data.videos[v].len()).map(move |t| (v, t)))
        .collect();
    let k = opts.validation_splices.min(frames.len());
    if k == 0 {
        return Ok(0.0);
    }
    let correct: usize = (0..k)
        .into_par_iter()
        .map(|i| {
            let (v, t) = frames[i * frames.len() / k];
            let f = &data.videos[v].frames[t];
            let off = center_offset(f.width(), f.height(), opts.crop.crop_size);
            let logits = model.logits(&image_to_tensor(&preprocess_at(f, &opts.crop, stats, off)?))?;
            let y = data.videos[v].labels[t];
            let y = mapping.map_or(y, |m| m[y]);
            Ok(usize::from(crate::model::argmax(&logits) == y))
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .sum();
    Ok(correct as f64 / k as f64)
}

/// Read the training log written by [`train_stream`].
pub fn read_log(path: &Path) -> Result<Vec<LogEntry>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                msg: e.to_string(),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paper_schedule_arithmetic() {
        let s = StageConfig {
            base_lr: 0.001,
            lr_decay_factor: 0.1,
            lr_step: 10_000,
            ..StageConfig::default()
        };
        assert!((s.learning_rate(25_000) - 1e-5).abs() < 1e-15);
        assert_eq!(s.learning_rate(9_999), 0.001);
        let d = StreamSchedule::desk(StreamKind::Flow);
        assert_eq!((d.encoder.lr_step, d.encoder.max_iterations, d.encoder.batch_size), (200, 700, 16));
        let r = StreamSchedule::desk(StreamKind::Rgb);
        assert_eq!((r.encoder.lr_step, r.encoder.max_iterations), (100, 500));
        assert_eq!(r.lstm.clip_norm, Some(5.0));
    }

    #[test]
    fn zero_gradient_is_fixed_point() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut lin = Linear::<f32>::new("l", 3, 2, &mut rng);
        let before = lin.clone();
        let cfg = StageConfig {
            weight_decay: 0.0,
            ..StageConfig::default()
        };
        let mut st = OptimizerState::new(&lin);
        for _ in 0..5 {
            sgd_step(&mut lin, &mut st, &cfg, &|_| true).unwrap();
        }
        assert_eq!(lin, before);
        assert_eq!(st.iteration, 5);
    }

    #[test]
    fn nonfinite_gradient_names_parameter() {
        let mut lin = Linear::<f32>::zeros("fc", 2, 2);
        lin.bias.grad.data_mut()[1] = f32::NAN;
        let mut st = OptimizerState::new(&lin);
        match sgd_step(&mut lin, &mut st, &StageConfig::default(), &|_| true) {
            Err(Error::NonFiniteGradient { name, .. }) => assert_eq!(name, "fc.bias"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn merge_counts_and_names() {
        let names: Vec<String> = (0..11).map(|i| format!("c{i}")).collect();
        let lm = LabelMap::new(names).unwrap();
        let (m, map) = curriculum_merge(&lm, &[(2, 5), (9, 7)]).unwrap();
        assert_eq!(m.len(), 9);
        assert_eq!(m.name(map[2]), "c2+c5");
        assert_eq!(m.name(map[7]), "c9+c7");
        assert_eq!(map[2], map[5]);
        for merged in 0..m.len() {
            let pre: Vec<usize> = (0..11).filter(|&i| map[i] == merged).collect();
            assert!(pre.len() == 1 || pre == vec![2, 5] || pre == vec![7, 9]);
        }
        let (same, id) = curriculum_merge(&lm, &[]).unwrap();
        assert_eq!(same, lm);
        assert_eq!(id, (0..11).collect::<Vec<_>>());
        assert!(curriculum_merge(&lm, &[(1, 2), (2, 3)]).is_err());
        assert!(curriculum_merge(&lm, &[(1, 11)]).is_err());
    }

    #[test]
    fn split_preserves_merged_distribution_without_noise() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let head = Linear::<f32>::new("head", 4, 3, &mut rng);
        let mapping = [0, 1, 1, 2];
        let split = split_head(&head, &mapping, 0.0, &mut rng).unwrap();
        let x = [0.3f32, -0.7, 1.1, 0.2];
        let pm = crate::nn::softmax(&head.forward(&x).unwrap());
        let ps = crate::nn::softmax(&split.forward(&x).unwrap());
        assert_eq!(ps[1], ps[2]);
        let remerged = [ps[0], ps[1] + ps[2], ps[3]];
        for (a, b) in pm.iter().zip(remerged) {
            assert!((a - b).abs() < 1e-6);
        }
    }
}
