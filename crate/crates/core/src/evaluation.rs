//! Frame-level evaluation: splice predictions are propagated to every frame
//! they cover, scored against per-frame ground truth, and pooled across
//! leave-one-subject-out splits.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{LabelMap, LosoSplit};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::model::{argmax, fuse_streams, Fusion, SpliceClassifier, SpliceConfig};
use crate::nn::{load_checkpoint, read_checkpoint};
use crate::preprocess::{make_splices, CropConfig, DatasetStats, Splice, SpliceMode};
use crate::streams::{StreamData, StreamKind, VideoFrames};
use crate::training::encode_videos;

/// Class distribution of one evaluation splice.
#[derive(Debug, Clone, PartialEq)]
pub struct SplicePrediction {
    pub splice: Splice,
    pub probs: Vec<f64>,
}

/// A trained stream with the statistics it was trained under.
#[derive(Debug, Clone)]
pub struct StreamPredictor {
    pub model: SpliceClassifier<f32>,
    pub stats: DatasetStats,
}

impl StreamPredictor {
    /// Fused distribution of every evaluation tile of `video`.
    pub fn predict_splices(&self, data: &StreamData, video: usize, crop: &CropConfig) -> Result<Vec<SplicePrediction>> {
        let v = &data.videos[video];
        let feats = encode_videos(&self.model.encoder, data, &[video], crop, &self.stats)?.pop().expect("one video");
        make_splices(&v.labels, self.model.window(), SpliceMode::Eval)?
            .into_par_iter()
            .map(|s| {
                let x: Vec<Vec<f32>> = s.frame_indices.iter().map(|&t| feats[t].clone()).collect();
                let out = self.model.forward_features(&x)?;
                let probs = out.output().fused_probs.iter().map(|&p| f64::from(p)).collect();
                Ok(SplicePrediction { splice: s, probs })
            })
            .collect()
    }
}

impl StreamPredictor {
    /// Rebuild a predictor from a final training checkpoint, whose metadata
    /// carries the model shape and the normalization statistics.
    pub fn load(path: &Path) -> Result<(Self, StreamKind)> {
        let ckpt = read_checkpoint(path)?;
        let field = |k: &str| {
            ckpt.meta
                .get(k)
                .cloned()
                .ok_or_else(|| Error::Format(format!("{}: checkpoint metadata lacks `{k}`", path.display())))
        };
        let config: SpliceConfig = serde_json::from_value(field("config")?)?;
        let stats: DatasetStats = serde_json::from_value(field("stats")?)?;
        let kind: StreamKind = serde_json::from_value(field("stream")?)?;
        // Initialization is overwritten by the stored weights.
        let mut model = SpliceClassifier::new(&config, &mut ChaCha8Rng::seed_from_u64(0))?;
        load_checkpoint(path, &mut model)?;
        Ok((Self { model, stats }, kind))
    }
}

/// Give every frame its splice's argmax label. Tiles are applied in order,
/// so a frame covered twice keeps the later tile's label.
pub fn assign_frames(len: usize, preds: &[SplicePrediction]) -> Result<Vec<usize>> {
    if len == 0 {
        return Err(Error::InvalidArgument("cannot label an empty video".into()));
    }
    let mut out = vec![usize::MAX; len];
    for p in preds {
        let label = argmax(&p.probs);
        for &t in &p.splice.frame_indices {
            out[t] = label;
        }
    }
    if out.contains(&usize::MAX) {
        return Err(Error::InvalidArgument("splices do not cover every frame".into()));
    }
    Ok(out)
}

pub fn predict_frames(predictor: &StreamPredictor, data: &StreamData, video: usize, crop: &CropConfig) -> Result<Vec<usize>> {
    assign_frames(data.videos[video].len(), &predictor.predict_splices(data, video, crop)?)
}

/// Combine the two streams tile by tile.
pub fn fuse_predictions(rgb: &[SplicePrediction], flow: &[SplicePrediction], fusion: Fusion) -> Result<Vec<SplicePrediction>> {
    if rgb.len() != flow.len() {
        return Err(Error::InvalidArgument(format!("{} RGB tiles vs {} flow tiles", rgb.len(), flow.len())));
    }
    rgb.iter()
        .zip(flow)
        .map(|(a, b)| {
            if a.splice.frame_indices != b.splice.frame_indices {
                return Err(Error::InvalidArgument("streams tiled differently".into()));
            }
            Ok(SplicePrediction {
                splice: a.splice.clone(),
                probs: fuse_streams(&a.probs, &b.probs, fusion)?,
            })
        })
        .collect()
}

/// Counts with rows indexed by ground truth and columns by prediction.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub labels: Vec<String>,
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn new(labels: Vec<String>) -> Self {
        let l = labels.len();
        Self {
            labels,
            counts: vec![vec![0; l]; l],
        }
    }

    pub fn num_classes(&self) -> usize {
        self.labels.len()
    }

    pub fn add(&mut self, predictions: &[usize], ground_truth: &[usize]) -> Result<()> {
        if predictions.len() != ground_truth.len() {
            return Err(Error::Dimension(format!(
                "{} predictions for {} ground-truth frames",
                predictions.len(),
                ground_truth.len()
            )));
        }
        let l = self.num_classes();
        for (&p, &g) in predictions.iter().zip(ground_truth) {
            if p >= l || g >= l {
                return Err(Error::InvalidArgument(format!("label {} outside {l} classes", p.max(g))));
            }
            self.counts[g][p] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.labels != self.labels {
            return Err(Error::InvalidArgument("confusion matrices over different labels".into()));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
        Ok(())
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.num_classes()).map(|i| self.counts[i][i]).sum()
    }

    pub fn accuracy(&self) -> f64 {
        match self.total() {
            0 => 0.0,
            n => self.trace() as f64 / n as f64,
        }
    }

    /// Recall of each class; `None` for classes without ground truth.
    pub fn per_class_recall(&self) -> Vec<Option<f64>> {
        self.counts
            .iter()
            .enumerate()
            .map(|(i, row)| {
                let n: u64 = row.iter().sum();
                (n > 0).then(|| row[i] as f64 / n as f64)
            })
            .collect()
    }

    /// Mean recall over classes with at least one ground-truth frame.
    pub fn average_recall(&self) -> Result<f64> {
        let r: Vec<f64> = self.per_class_recall().into_iter().flatten().collect();
        if r.is_empty() {
            return Err(Error::InvalidArgument("average recall of an empty confusion matrix".into()));
        }
        Ok(r.iter().sum::<f64>() / r.len() as f64)
    }

    pub fn row_normalized(&self) -> Vec<Vec<f64>> {
        self.counts
            .iter()
            .map(|row| {
                let n: u64 = row.iter().sum();
                row.iter().map(|&c| if n == 0 { 0.0 } else { c as f64 / n as f64 }).collect()
            })
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("ground_truth");
        for l in &self.labels {
            s.push(',');
            s.push_str(&csv_field(l));
        }
        s.push('\n');
        for (l, row) in self.labels.iter().zip(&self.counts) {
            s.push_str(&csv_field(l));
            for c in row {
                s.push_str(&format!(",{c}"));
            }
            s.push('\n');
        }
        s
    }

    /// Row-normalized matrix as a grayscale image, `cell` pixels per entry,
    /// darker for larger fractions.
    pub fn heatmap_image(&self, cell: usize) -> Image {
        let l = self.num_classes();
        let n = self.row_normalized();
        let side = l * cell;
        let mut data = vec![0.0f32; side * side];
        for y in 0..side {
            for x in 0..side {
                data[y * side + x] = 1.0 - n[y / cell][x / cell] as f32;
            }
        }
        Image::new(1, side, side, data).expect("heatmap dims")
    }

    /// Fraction of scored frames whose predicted class lies in a different
    /// category than the ground truth.
    pub fn cross_category_fraction(&self, categories: &[String]) -> Option<f64> {
        if categories.len() != self.num_classes() || self.total() == 0 {
            return None;
        }
        let mut cross = 0;
        for (g, row) in self.counts.iter().enumerate() {
            for (p, &c) in row.iter().enumerate() {
                if categories[g] != categories[p] {
                    cross += c;
                }
            }
        }
        Some(cross as f64 / self.total() as f64)
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub fn score(predictions: &[usize], ground_truth: &[usize], labels: &LabelMap) -> Result<ConfusionMatrix> {
    let mut cm = ConfusionMatrix::new(labels.names().to_vec());
    cm.add(predictions, ground_truth)?;
    Ok(cm)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitAccuracy {
    pub held_out_subject: String,
    pub frames: u64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub frame_accuracy: f64,
    pub per_class_recall: Vec<Option<f64>>,
    pub average_recall: f64,
    pub confusion: ConfusionMatrix,
    pub per_split: Vec<SplitAccuracy>,
    /// Share of frames confused across label categories, when the label
    /// map defines categories.
    pub cross_category_confusion: Option<f64>,
}

impl EvalReport {
    pub fn from_confusion(confusion: ConfusionMatrix, per_split: Vec<SplitAccuracy>, labels: &LabelMap) -> Result<Self> {
        Ok(Self {
            frame_accuracy: confusion.accuracy(),
            per_class_recall: confusion.per_class_recall(),
            average_recall: confusion.average_recall()?,
            cross_category_confusion: labels.categories().and_then(|c| confusion.cross_category_fraction(c)),
            confusion,
            per_split,
        })
    }

    /// Accuracy restricted to frames whose ground truth is in `classes`.
    pub fn accuracy_on(&self, classes: &[usize]) -> f64 {
        let (mut hit, mut n) = (0, 0);
        for &c in classes {
            hit += self.confusion.counts[c][c];
            n += self.confusion.counts[c].iter().sum::<u64>();
        }
        if n == 0 {
            0.0
        } else {
            hit as f64 / n as f64
        }
    }
}

/// Per-frame outcome, kept for diagnostics and visualization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FramePrediction {
    pub video_id: String,
    pub frame: usize,
    pub ground_truth: usize,
    pub rgb: usize,
    pub flow: usize,
    pub combined: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitStatus {
    pub held_out_subject: String,
    pub error: Option<String>,
}

/// RGB-only, flow-only and combined reports over all splits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LosoReport {
    pub rgb: EvalReport,
    pub flow: EvalReport,
    pub combined: EvalReport,
    pub fusion: Fusion,
    pub splits: Vec<SplitStatus>,
    #[serde(skip)]
    pub frames: Vec<FramePrediction>,
}

impl LosoReport {
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let p = dir.join("report.json");
        std::fs::write(&p, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(&p, e))?;
        for (name, r) in [("rgb", &self.rgb), ("flow", &self.flow), ("combined", &self.combined)] {
            let csv = dir.join(format!("confusion_{name}.csv"));
            std::fs::write(&csv, r.confusion.to_csv()).map_err(|e| Error::io(&csv, e))?;
            r.confusion.heatmap_image(16).save_png(&dir.join(format!("confusion_{name}.png")))?;
        }
        Ok(())
    }
}

/// Both streams of one split.
#[derive(Debug, Clone)]
pub struct SplitModels {
    pub rgb: StreamPredictor,
    pub flow: StreamPredictor,
}

/// Evaluate every split on its held-out subject and pool the frames.
/// `models` supplies the trained streams of a split; splits whose models
/// cannot be produced are reported as failed and skipped.
pub fn loso_evaluate<F>(
    rgb: &StreamData,
    flow: &StreamData,
    splits: &[LosoSplit],
    labels: &LabelMap,
    crop: &CropConfig,
    fusion: Fusion,
    mut models: F,
) -> Result<LosoReport>
where
    F: FnMut(usize, &LosoSplit) -> Result<SplitModels>,
{
    let names = labels.names().to_vec();
    let mut cms = [
        ConfusionMatrix::new(names.clone()),
        ConfusionMatrix::new(names.clone()),
        ConfusionMatrix::new(names.clone()),
    ];
    let mut per_split: [Vec<SplitAccuracy>; 3] = Default::default();
    let mut statuses = Vec::new();
    let mut frames = Vec::new();
    let mut first_err = None;
    for (i, split) in splits.iter().enumerate() {
        let outcome = models(i, split).and_then(|m| evaluate_split(rgb, flow, split, &m, labels, crop, fusion));
        match outcome {
            Ok((split_cms, preds)) => {
                for k in 0..3 {
                    per_split[k].push(SplitAccuracy {
                        held_out_subject: split.held_out_subject.clone(),
                        frames: split_cms[k].total(),
                        accuracy: split_cms[k].accuracy(),
                    });
                    cms[k].merge(&split_cms[k])?;
                }
                frames.extend(preds);
                statuses.push(SplitStatus {
                    held_out_subject: split.held_out_subject.clone(),
                    error: None,
                });
            }
            Err(e) => {
                log::warn!("split {} failed: {e}", split.held_out_subject);
                statuses.push(SplitStatus {
                    held_out_subject: split.held_out_subject.clone(),
                    error: Some(e.to_string()),
                });
                first_err.get_or_insert(e);
            }
        }
    }
    if statuses.iter().all(|s| s.error.is_some()) {
        return Err(first_err.unwrap_or_else(|| Error::InvalidArgument("no splits to evaluate".into())));
    }
    let [c_rgb, c_flow, c_comb] = cms;
    let [s_rgb, s_flow, s_comb] = per_split;
    Ok(LosoReport {
        rgb: EvalReport::from_confusion(c_rgb, s_rgb, labels)?,
        flow: EvalReport::from_confusion(c_flow, s_flow, labels)?,
        combined: EvalReport::from_confusion(c_comb, s_comb, labels)?,
        fusion,
        splits: statuses,
        frames,
    })
}

fn evaluate_split(
    rgb: &StreamData,
    flow: &StreamData,
    split: &LosoSplit,
    models: &SplitModels,
    labels: &LabelMap,
    crop: &CropConfig,
    fusion: Fusion,
) -> Result<([ConfusionMatrix; 3], Vec<FramePrediction>)> {
    let names = labels.names().to_vec();
    let mut cms = [
        ConfusionMatrix::new(names.clone()),
        ConfusionMatrix::new(names.clone()),
        ConfusionMatrix::new(names),
    ];
    let mut frames = Vec::new();
    for id in &split.test_videos {
        let (ri, fi) = (
            rgb.video_index(id).ok_or_else(|| Error::InvalidArgument(format!("video `{id}` missing from RGB stream")))?,
            flow.video_index(id).ok_or_else(|| Error::InvalidArgument(format!("video `{id}` missing from flow stream")))?,
        );
        let v: &VideoFrames = &rgb.videos[ri];
        if flow.videos[fi].labels != v.labels {
            return Err(Error::Validation {
                video_id: id.clone(),
                msg: "RGB and flow labels differ".into(),
            });
        }
        let pr = models.rgb.predict_splices(rgb, ri, crop)?;
        let pf = models.flow.predict_splices(flow, fi, crop)?;
        let pc = fuse_predictions(&pr, &pf, fusion)?;
        let lr = assign_frames(v.len(), &pr)?;
        let lf = assign_frames(v.len(), &pf)?;
        let lc = assign_frames(v.len(), &pc)?;
        cms[0].add(&lr, &v.labels)?;
        cms[1].add(&lf, &v.labels)?;
        cms[2].add(&lc, &v.labels)?;
        for t in 0..v.len() {
            frames.push(FramePrediction {
                video_id: id.clone(),
                frame: t,
                ground_truth: v.labels[t],
                rgb: lr[t],
                flow: lf[t],
                combined: lc[t],
            });
        }
    }
    Ok((cms, frames))
}
