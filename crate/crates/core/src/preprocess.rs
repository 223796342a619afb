//! Frame preprocessing: central crop, random (train) or center (eval)
//! crop, bilinear upscaling to enlarge small objects, and per-channel
//! normalization. Also splice extraction and the on-disk tensor cache.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::image::Image;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct CropConfig {
    /// Dataset-dependent central crop (M x N).
    pub central_width: usize,
    pub central_height: usize,
    pub crop_size: usize,
    /// Side of the network input. Equal to `crop_size` disables upscaling.
    pub resize_to: usize,
    pub random_seed: u64,
}

impl Default for CropConfig {
    fn default() -> Self {
        Self::toy()
    }
}

impl CropConfig {
    /// The 224/256/300 geometry scaled to 48 x 48 synthetic frames: a 30
    /// crop from a 40 x 40 central region, upscaled back to 40.
    pub fn toy() -> Self {
        Self {
            central_width: 40,
            central_height: 40,
            crop_size: 30,
            resize_to: 40,
            random_seed: 0,
        }
    }

    /// 224 crop upscaled to 300 from a 256 x 256 central crop.
    pub fn paper(central_width: usize, central_height: usize) -> Self {
        Self {
            central_width,
            central_height,
            crop_size: 224,
            resize_to: 300,
            random_seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.crop_size == 0 || self.crop_size > self.central_width.min(self.central_height) || self.resize_to == 0 {
            return Err(Error::InvalidArgument(format!("invalid crop config {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CropMode {
    Train,
    Eval,
}

/// Centered `m x n` window; an odd leftover pixel goes to the right/bottom.
pub fn central_crop(img: &Image, m: usize, n: usize) -> Result<Image> {
    if m > img.width() || n > img.height() {
        return Err(Error::Dimension(format!(
            "central crop {m}x{n} exceeds image {}x{}",
            img.width(),
            img.height()
        )));
    }
    img.crop((img.width() - m) / 2, (img.height() - n) / 2, m, n)
}

pub fn center_offset(width: usize, height: usize, crop_size: usize) -> (usize, usize) {
    ((width - crop_size) / 2, (height - crop_size) / 2)
}

/// Offset drawn uniformly over every valid position.
pub fn random_offset<R: Rng + ?Sized>(width: usize, height: usize, crop_size: usize, rng: &mut R) -> Result<(usize, usize)> {
    if crop_size > width || crop_size > height {
        return Err(Error::Dimension(format!(
            "crop {crop_size} exceeds image {width}x{height}"
        )));
    }
    Ok((
        rng.random_range(0..=width - crop_size),
        rng.random_range(0..=height - crop_size),
    ))
}

pub fn random_crop<R: Rng + ?Sized>(img: &Image, crop_size: usize, rng: &mut R) -> Result<(Image, (usize, usize))> {
    let (x, y) = random_offset(img.width(), img.height(), crop_size, rng)?;
    Ok((img.crop(x, y, crop_size, crop_size)?, (x, y)))
}

/// Bilinear resize with half-pixel-centered sampling (corners not aligned).
pub fn resize_bilinear(img: &Image, out_w: usize, out_h: usize) -> Image {
    let (w, h) = (img.width(), img.height());
    let sx = w as f64 / out_w as f64;
    let sy = h as f64 / out_h as f64;
    // Precompute taps per axis; they are shared by all channels.
    let taps = |n_out: usize, n_in: usize, s: f64| -> Vec<(usize, usize, f32)> {
        (0..n_out)
            .map(|o| {
                let f = ((o as f64 + 0.5) * s - 0.5).clamp(0.0, (n_in - 1) as f64);
                let i0 = f.floor() as usize;
                let i1 = (i0 + 1).min(n_in - 1);
                (i0, i1, (f - i0 as f64) as f32)
            })
            .collect()
    };
    let tx = taps(out_w, w, sx);
    let ty = taps(out_h, h, sy);
    let mut data = Vec::with_capacity(img.channels() * out_w * out_h);
    for c in 0..img.channels() {
        let p = img.plane(c);
        for &(y0, y1, fy) in &ty {
            for &(x0, x1, fx) in &tx {
                let top = p[y0 * w + x0] + fx * (p[y0 * w + x1] - p[y0 * w + x0]);
                let bot = p[y1 * w + x0] + fx * (p[y1 * w + x1] - p[y1 * w + x0]);
                data.push(top + fy * (bot - top));
            }
        }
    }
    Image::new(img.channels(), out_w, out_h, data).expect("resize dims")
}

/// Per-channel mean and population variance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
    pub count: u64,
}

impl DatasetStats {
    pub fn identity(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            variance: vec![1.0; channels],
            count: 0,
        }
    }

    /// Content hash used to key preprocessed caches.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("stats serialize");
        hex::encode(Sha256::digest(json))
    }
}

/// Streaming, mergeable mean/variance (Welford updates, Chan merges).
#[derive(Debug, Clone, Default)]
pub struct StatsAccumulator {
    count: u64,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl StatsAccumulator {
    pub fn new(channels: usize) -> Self {
        Self {
            count: 0,
            mean: vec![0.0; channels],
            m2: vec![0.0; channels],
        }
    }

    pub fn push(&mut self, img: &Image) -> Result<()> {
        if img.channels() != self.mean.len() {
            return Err(Error::Dimension(format!(
                "stats over {} channels, image has {}",
                self.mean.len(),
                img.channels()
            )));
        }
        // Per-image batch statistics merged in, which keeps the update
        // numerically stable for long streams.
        let n = (img.width() * img.height()) as u64;
        if n == 0 {
            return Ok(());
        }
        let mut batch = StatsAccumulator::new(img.channels());
        batch.count = n;
        for c in 0..img.channels() {
            let p = img.plane(c);
            let mean = p.iter().map(|&x| f64::from(x)).sum::<f64>() / n as f64;
            let m2 = p.iter().map(|&x| (f64::from(x) - mean).powi(2)).sum::<f64>();
            batch.mean[c] = mean;
            batch.m2[c] = m2;
        }
        self.merge(&batch);
        Ok(())
    }

    pub fn merge(&mut self, other: &StatsAccumulator) {
        if other.count == 0 {
            return;
        }
        if self.count == 0 {
            *self = other.clone();
            return;
        }
        let (na, nb) = (self.count as f64, other.count as f64);
        let n = na + nb;
        for c in 0..self.mean.len() {
            let delta = other.mean[c] - self.mean[c];
            self.mean[c] += delta * nb / n;
            self.m2[c] += other.m2[c] + delta * delta * na * nb / n;
        }
        self.count += other.count;
    }

    pub fn finish(&self) -> Result<DatasetStats> {
        if self.count == 0 {
            return Err(Error::InvalidArgument("statistics over an empty frame set".into()));
        }
        Ok(DatasetStats {
            mean: self.mean.clone(),
            variance: self.m2.iter().map(|m| (m / self.count as f64).max(0.0)).collect(),
            count: self.count,
        })
    }
}

/// Statistics over a stream of frames.
pub fn compute_dataset_stats<I>(frames: I) -> Result<DatasetStats>
where
    I: IntoIterator<Item = Result<Image>>,
{
    let mut acc: Option<StatsAccumulator> = None;
    for f in frames {
        let f = f?;
        acc.get_or_insert_with(|| StatsAccumulator::new(f.channels())).push(&f)?;
    }
    acc.ok_or_else(|| Error::InvalidArgument("statistics over an empty split".into()))?
        .finish()
}

const NORM_EPS: f64 = 1e-8;

/// Subtract the mean and divide by `sqrt(variance + 1e-8)`, per channel.
pub fn normalize(img: &mut Image, stats: &DatasetStats) -> Result<()> {
    if stats.mean.len() != img.channels() {
        return Err(Error::Dimension(format!(
            "stats for {} channels, image has {}",
            stats.mean.len(),
            img.channels()
        )));
    }
    let n = img.width() * img.height();
    let data = img.data_mut();
    for c in 0..stats.mean.len() {
        let m = stats.mean[c] as f32;
        let inv = (1.0 / (stats.variance[c] + NORM_EPS).sqrt()) as f32;
        for v in &mut data[c * n..(c + 1) * n] {
            *v = (*v - m) * inv;
        }
    }
    Ok(())
}

/// Crop + resize + normalize an already centrally cropped frame at a given
/// crop offset.
pub fn preprocess_at(img: &Image, config: &CropConfig, stats: &DatasetStats, offset: (usize, usize)) -> Result<Image> {
    let cropped = img.crop(offset.0, offset.1, config.crop_size, config.crop_size)?;
    let mut out = if config.resize_to == config.crop_size {
        cropped
    } else {
        resize_bilinear(&cropped, config.resize_to, config.resize_to)
    };
    normalize(&mut out, stats)?;
    Ok(out)
}

/// The full chain on a raw frame: central crop, random (train) or center
/// (eval) crop, resize and normalization. Output is `(C, R, R)` planar.
pub fn preprocess_frame<R: Rng + ?Sized>(
    img: &Image,
    config: &CropConfig,
    stats: &DatasetStats,
    mode: CropMode,
    rng: &mut R,
) -> Result<Image> {
    config.validate()?;
    let central = central_crop(img, config.central_width, config.central_height)?;
    let offset = match mode {
        CropMode::Train => random_offset(central.width(), central.height(), config.crop_size, rng)?,
        CropMode::Eval => center_offset(central.width(), central.height(), config.crop_size),
    };
    preprocess_at(&central, config, stats, offset)
}

/// Map a point in central-crop coordinates to network-input coordinates.
pub fn map_point(config: &CropConfig, offset: (usize, usize), x: f64, y: f64) -> (f64, f64) {
    let s = config.resize_to as f64 / config.crop_size as f64;
    // Half-pixel-centered mapping, matching `resize_bilinear`.
    (
        (x - offset.0 as f64 + 0.5) * s - 0.5,
        (y - offset.1 as f64 + 0.5) * s - 0.5,
    )
}

/// W consecutive frame indices and the label they are trained or scored on.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splice {
    pub center: usize,
    pub frame_indices: Vec<usize>,
    pub label: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpliceMode {
    /// One splice centered on every `stride`-th frame, borders replicated.
    Train { stride: usize },
    /// Non-overlapping tiles; the last one is shifted back to end on the
    /// final frame.
    Eval,
}

pub fn make_splices(labels: &[usize], window: usize, mode: SpliceMode) -> Result<Vec<Splice>> {
    if window == 0 || window % 2 == 0 {
        return Err(Error::InvalidArgument(format!("splice window must be odd, got {window}")));
    }
    if labels.is_empty() {
        return Err(Error::InvalidArgument("cannot splice an empty video".into()));
    }
    let len = labels.len() as isize;
    let clamp = |i: isize| i.clamp(0, len - 1) as usize;
    let half = (window / 2) as isize;
    match mode {
        SpliceMode::Train { stride } => {
            let stride = stride.max(1);
            Ok((0..labels.len())
                .step_by(stride)
                .map(|t| Splice {
                    center: t,
                    frame_indices: (-half..=half).map(|d| clamp(t as isize + d)).collect(),
                    label: labels[t],
                })
                .collect())
        }
        SpliceMode::Eval => {
            let mut starts: Vec<isize> = (0..len).step_by(window).filter(|s| s + window as isize <= len).collect();
            if starts.last().map_or(true, |&s| s + (window as isize) < len) {
                starts.push(len - window as isize);
            }
            Ok(starts
                .into_iter()
                .map(|s| {
                    let idx: Vec<usize> = (s..s + window as isize).map(clamp).collect();
                    Splice {
                        center: clamp(s + half),
                        label: majority_label(labels, &idx),
                        frame_indices: idx,
                    }
                })
                .collect())
        }
    }
}

/// Most frequent label among the distinct frames covered; ties go to the
/// lowest class index.
fn majority_label(labels: &[usize], idx: &[usize]) -> usize {
    let mut frames: Vec<usize> = idx.to_vec();
    frames.dedup();
    let max_label = frames.iter().map(|&i| labels[i]).max().unwrap_or(0);
    let mut counts = vec![0usize; max_label + 1];
    for &i in &frames {
        counts[labels[i]] += 1;
    }
    let best = counts.iter().copied().max().unwrap_or(0);
    counts.iter().position(|&c| c == best).unwrap_or(0)
}

/// Header of a cached tensor file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorHeader {
    pub dims: Vec<usize>,
    pub dtype: String,
    pub stats_hash: String,
}

/// One JSON header line followed by little-endian `f32` payload.
pub fn write_tensor_file(path: &Path, dims: &[usize], stats_hash: &str, data: &[f32]) -> Result<()> {
    let expected: usize = dims.iter().product();
    if expected != data.len() {
        return Err(Error::Shape {
            op: "write_tensor_file",
            expected: dims.to_vec(),
            actual: vec![data.len()],
        });
    }
    let header = TensorHeader {
        dims: dims.to_vec(),
        dtype: "f32".into(),
        stats_hash: stats_hash.into(),
    };
    let mut buf = serde_json::to_vec(&header)?;
    buf.push(b'\n');
    buf.reserve(4 * data.len());
    for v in data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

pub fn read_tensor_file(path: &Path) -> Result<(TensorHeader, Vec<f32>)> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(f);
    let mut line = String::new();
    r.read_line(&mut line).map_err(|e| Error::io(path, e))?;
    let header: TensorHeader = serde_json::from_str(line.trim_end())?;
    if header.dtype != "f32" {
        return Err(Error::Format(format!("unsupported dtype `{}`", header.dtype)));
    }
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;
    let n: usize = header.dims.iter().product();
    if bytes.len() != 4 * n {
        return Err(Error::Format(format!(
            "tensor {:?} needs {} bytes, found {}",
            header.dims,
            4 * n,
            bytes.len()
        )));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok((header, data))
}
