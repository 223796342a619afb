//! One function per command. Every stage reads its inputs from the cache,
//! keyed by the content hash of those inputs plus the configuration that
//! shapes its output, so reruns with unchanged inputs are pure cache hits.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use egoaction::dataset::{load_manifest, loso_splits, LoadedManifest, LosoSplit};
use egoaction::ego::compensate_sequence;
use egoaction::evaluation::{loso_evaluate, LosoReport, SplitModels, StreamPredictor};
use egoaction::flow::{read_flo, write_flo, FlowField};
use egoaction::image::Image;
use egoaction::model::{argmax, grad_cam, image_to_tensor};
use egoaction::preprocess::{center_offset, map_point, preprocess_at, read_tensor_file, write_tensor_file};
use egoaction::streams::{flow_images, rgb_frames, sequence_flow, StreamData, StreamKind, VideoFrames};
use egoaction::synth::{generate_synthetic_dataset, FrameTruth};
use egoaction::training::{train_stream, TrainOutput};
use rayon::prelude::*;
use serde::Serialize;
use serde_json::{json, Value};

use crate::cache::{content_hash, files_hash, Cache, CacheTally};
use crate::config::PipelineConfig;
use crate::error::CliError;

type Result<T> = std::result::Result<T, CliError>;

/// Marks preprocessed tensors as raw stream frames: normalization uses
/// per-split statistics and happens when a split is trained or evaluated.
const UNNORMALIZED: &str = "unnormalized";

pub struct Pipeline {
    pub cfg: PipelineConfig,
    pub cache: Cache,
}

/// Per-video cache keys, derived once per command.
struct VideoKeys {
    flow: String,
    compensated: String,
    rgb: String,
    flow_stream: String,
}

impl Pipeline {
    pub fn new(cfg: PipelineConfig) -> Self {
        let cache = Cache::new(cfg.cache_root());
        Self { cfg, cache }
    }

    fn synth_key(&self) -> String {
        content_hash(&json!({"seed": self.cfg.seed, "synth": self.cfg.synth}))
    }

    fn manifest_path(&self) -> Result<PathBuf> {
        if let Some(p) = &self.cfg.paths.manifest {
            return if p.is_file() {
                Ok(p.clone())
            } else {
                Err(CliError::Config {
                    path: "<config>".into(),
                    key: "paths.manifest".into(),
                    message: format!("{} does not exist", p.display()),
                })
            };
        }
        let p = self.cache.entry("synth", &self.synth_key()).join("manifest.jsonl");
        if p.is_file() {
            Ok(p)
        } else {
            Err(CliError::missing("synth", format!("no dataset at {}", p.display())))
        }
    }

    fn manifest(&self) -> Result<LoadedManifest> {
        let lm = load_manifest(&self.manifest_path()?)?;
        if let Some(w) = lm.warnings.first() {
            return Err(CliError::Pipeline(egoaction::Error::Validation {
                video_id: lm.manifest.name.clone(),
                msg: w.clone(),
            }));
        }
        Ok(lm)
    }

    fn video_keys(&self, lm: &LoadedManifest) -> Result<Vec<VideoKeys>> {
        let crop = (self.cfg.crop.central_width, self.cfg.crop.central_height);
        lm.manifest
            .videos
            .par_iter()
            .map(|v| {
                let paths: Vec<PathBuf> = v.frame_paths.iter().map(|p| lm.frame_path(p)).collect();
                let frames = files_hash(paths.iter().map(PathBuf::as_path))?;
                let flow = content_hash(&json!({"frames": frames, "central": crop, "flow": self.cfg.flow}));
                let compensated = content_hash(&json!({"flow": flow, "compensation": self.cfg.compensation}));
                let rgb = content_hash(&json!({"frames": frames, "central": crop}));
                let source = if self.cfg.compensate { &compensated } else { &flow };
                let flow_stream = content_hash(&json!({"source": source, "max_norm": self.cfg.flow_max_norm}));
                Ok(VideoKeys {
                    flow,
                    compensated,
                    rgb,
                    flow_stream,
                })
            })
            .collect()
    }

    fn raw_frames(lm: &LoadedManifest, video: usize) -> Result<Vec<Image>> {
        lm.manifest.videos[video]
            .frame_paths
            .iter()
            .map(|p| Ok(Image::load_png(&lm.frame_path(p))?))
            .collect()
    }

    pub fn synth(&self) -> Result<Summary> {
        let dir = self.cache.entry("synth", &self.synth_key());
        let (cfg, seed) = (&self.cfg.synth, self.cfg.seed);
        let hit = self.cache.ensure(&dir, |d| {
            generate_synthetic_dataset(cfg, seed, d)?;
            Ok(())
        })?;
        let mut tally = CacheTally::default();
        tally.record(hit);
        Ok(Summary::new("synth", tally).with("manifest", dir.join("manifest.jsonl").display().to_string()))
    }

    pub fn flow(&self) -> Result<Summary> {
        let lm = self.manifest()?;
        let keys = self.video_keys(&lm)?;
        let mut tally = CacheTally::default();
        for (i, k) in keys.iter().enumerate() {
            let dir = self.cache.entry("flow", &k.flow);
            let hit = self.cache.ensure(&dir, |d| {
                let raw = Self::raw_frames(&lm, i)?;
                let flows = sequence_flow(&raw, &self.cfg.crop, &self.cfg.flow)?;
                write_flows(d, &flows)
            })?;
            tally.record(hit);
        }
        Ok(Summary::new("flow", tally))
    }

    pub fn compensate(&self) -> Result<Summary> {
        let lm = self.manifest()?;
        let keys = self.video_keys(&lm)?;
        let mut tally = CacheTally::default();
        for k in &keys {
            let src = self.require("flow", &k.flow)?;
            let dir = self.cache.entry("compensate", &k.compensated);
            let hit = self.cache.ensure(&dir, |d| {
                let flows = read_flows(&src)?;
                let (comp, reports) = compensate_sequence(&flows, &self.cfg.compensation);
                write_flows(d, &comp)?;
                let mut f = std::io::BufWriter::new(std::fs::File::create(d.join("fits.jsonl"))?);
                for r in &reports {
                    writeln!(f, "{}", serde_json::to_string(r)?)?;
                }
                f.flush()?;
                Ok(())
            })?;
            tally.record(hit);
        }
        Ok(Summary::new("compensate", tally))
    }

    pub fn preprocess(&self) -> Result<Summary> {
        let lm = self.manifest()?;
        let keys = self.video_keys(&lm)?;
        let mut tally = CacheTally::default();
        for (i, k) in keys.iter().enumerate() {
            let src = if self.cfg.compensate {
                self.require("compensate", &k.compensated)?
            } else {
                self.require("flow", &k.flow)?
            };
            let dir = self.cache.entry("preprocess/rgb", &k.rgb);
            let hit = self.cache.ensure(&dir, |d| {
                let frames = rgb_frames(&Self::raw_frames(&lm, i)?, &self.cfg.crop)?;
                write_frames(&d.join("frames.tensor"), &frames)
            })?;
            tally.record(hit);
            let dir = self.cache.entry("preprocess/flow", &k.flow_stream);
            let n = lm.manifest.videos[i].len();
            let hit = self.cache.ensure(&dir, |d| {
                let flows = read_flows(&src)?;
                let frames = flow_images(&flows, n, self.cfg.flow_max_norm)?;
                write_frames(&d.join("frames.tensor"), &frames)
            })?;
            tally.record(hit);
        }
        Ok(Summary::new("preprocess", tally))
    }

    fn require(&self, stage: &str, key: &str) -> Result<PathBuf> {
        let dir = self.cache.entry(stage, key);
        if dir.is_dir() {
            Ok(dir)
        } else {
            Err(CliError::missing(stage, format!("cache entry {} is absent", dir.display())))
        }
    }

    /// Both streams for every manifest video, read from the preprocess cache.
    fn load_streams(&self, lm: &LoadedManifest, keys: &[VideoKeys]) -> Result<(StreamData, StreamData)> {
        let mut out = Vec::new();
        for kind in [StreamKind::Rgb, StreamKind::Flow] {
            let videos = lm
                .manifest
                .videos
                .par_iter()
                .zip(keys)
                .map(|(v, k)| {
                    let key = match kind {
                        StreamKind::Rgb => &k.rgb,
                        StreamKind::Flow => &k.flow_stream,
                    };
                    let dir = self.require(&format!("preprocess/{kind}"), key).map_err(|_| {
                        CliError::missing("preprocess", format!("{kind} frames of `{}` are not cached", v.video_id))
                    })?;
                    let frames = read_frames(&dir.join("frames.tensor"))?;
                    Ok(VideoFrames::new(&v.video_id, &v.subject, frames, v.frame_labels.clone())?)
                })
                .collect::<Result<Vec<_>>>()?;
            out.push(StreamData { kind, videos });
        }
        let flow = out.pop().expect("two streams");
        Ok((out.pop().expect("two streams"), flow))
    }

    fn stream_key(keys: &[VideoKeys], data: &StreamData, video: usize) -> String {
        match data.kind {
            StreamKind::Rgb => keys[video].rgb.clone(),
            StreamKind::Flow => keys[video].flow_stream.clone(),
        }
    }

    pub fn stats(&self) -> Result<Summary> {
        let lm = self.manifest()?;
        let keys = self.video_keys(&lm)?;
        let (rgb, flow) = self.load_streams(&lm, &keys)?;
        let mut tally = CacheTally::default();
        let mut all = BTreeMap::new();
        for split in loso_splits(&lm.manifest)? {
            let mut per = BTreeMap::new();
            for data in [&rgb, &flow] {
                let idx = data.indices(&split.train_videos)?;
                let inputs: Vec<String> = idx.iter().map(|&v| Self::stream_key(&keys, data, v)).collect();
                let dir = self.cache.entry("stats", &content_hash(&json!({"kind": data.kind, "videos": inputs})));
                let hit = self.cache.ensure(&dir, |d| {
                    std::fs::write(d.join("stats.json"), serde_json::to_string_pretty(&data.stats(&idx)?)?)?;
                    Ok(())
                })?;
                tally.record(hit);
                let stats: Value = serde_json::from_str(&std::fs::read_to_string(dir.join("stats.json"))?)?;
                per.insert(data.kind.to_string(), stats);
            }
            all.insert(split.held_out_subject.clone(), per);
        }
        Ok(Summary::new("stats", tally).with_artifact("stats.json", serde_json::to_value(all)?))
    }

    fn train_dir(&self, keys: &[VideoKeys], data: &StreamData, split: &LosoSplit, lm: &LoadedManifest) -> Result<PathBuf> {
        let idx = data.indices(&split.train_videos)?;
        let inputs: Vec<String> = idx.iter().map(|&v| Self::stream_key(keys, data, v)).collect();
        let labels = &lm.manifest.label_map;
        let key = content_hash(&json!({
            "kind": data.kind,
            "videos": inputs,
            "labels": labels.names(),
            "schedule": self.cfg.schedule(data.kind),
            "curriculum": self.cfg.curriculum(labels)?,
            "options": self.cfg.train_options(),
        }));
        Ok(self.cache.entry("train", &key))
    }

    pub fn train(&self) -> Result<Summary> {
        let lm = self.manifest()?;
        let keys = self.video_keys(&lm)?;
        let (rgb, flow) = self.load_streams(&lm, &keys)?;
        let labels = &lm.manifest.label_map;
        let curriculum = self.cfg.curriculum(labels)?;
        let mut tally = CacheTally::default();
        let mut index = BTreeMap::new();
        for split in loso_splits(&lm.manifest)? {
            let mut per = BTreeMap::new();
            for data in [&rgb, &flow] {
                let dir = self.train_dir(&keys, data, &split, &lm)?;
                let hit = self.cache.ensure(&dir, |d| {
                    let idx = data.indices(&split.train_videos)?;
                    log::info!("training {} stream, held-out {}", data.kind, split.held_out_subject);
                    train_stream(
                        data,
                        &idx,
                        labels,
                        &self.cfg.schedule(data.kind),
                        curriculum.as_ref(),
                        &self.cfg.train_options(),
                        Some(&TrainOutput { dir: d.to_path_buf() }),
                    )?;
                    Ok(())
                })?;
                tally.record(hit);
                per.insert(data.kind.to_string(), dir.join(format!("{}_final.ckpt", data.kind)).display().to_string());
            }
            index.insert(split.held_out_subject.clone(), per);
        }
        Ok(Summary::new("train", tally).with_artifact("checkpoints.json", serde_json::to_value(index)?))
    }

    fn checkpoint(&self, keys: &[VideoKeys], data: &StreamData, split: &LosoSplit, lm: &LoadedManifest) -> Result<PathBuf> {
        let p = self
            .train_dir(keys, data, split, lm)?
            .join(format!("{}_final.ckpt", data.kind));
        if p.is_file() {
            Ok(p)
        } else {
            Err(CliError::missing(
                "train",
                format!("no {} checkpoint for held-out subject {}", data.kind, split.held_out_subject),
            ))
        }
    }

    pub fn eval(&self) -> Result<(Summary, LosoReport)> {
        let lm = self.manifest()?;
        let keys = self.video_keys(&lm)?;
        let (rgb, flow) = self.load_streams(&lm, &keys)?;
        let splits = loso_splits(&lm.manifest)?;
        // Per-split failures are flagged in the report; a run with no
        // trained split at all is a missing dependency.
        let mut available = 0;
        for split in &splits {
            if self.checkpoint(&keys, &rgb, split, &lm).is_ok() && self.checkpoint(&keys, &flow, split, &lm).is_ok() {
                available += 1;
            }
        }
        if available == 0 {
            return Err(CliError::missing("train", "no trained checkpoints for any split"));
        }
        let mut missing = None;
        let report = loso_evaluate(
            &rgb,
            &flow,
            &splits,
            &lm.manifest.label_map,
            &self.cfg.crop,
            self.cfg.eval.fusion,
            |_, split| {
                let mut load = |data: &StreamData| -> egoaction::Result<StreamPredictor> {
                    let p = self.checkpoint(&keys, data, split, &lm).map_err(|e| {
                        let msg = e.to_string();
                        missing.get_or_insert(msg.clone());
                        egoaction::Error::MissingDependency(msg)
                    });
                    Ok(StreamPredictor::load(&p?)?.0)
                };
                Ok(SplitModels {
                    rgb: load(&rgb)?,
                    flow: load(&flow)?,
                })
            },
        )?;
        let mut tally = CacheTally::default();
        tally.items = splits.len();
        tally.hits = available;
        let mut s = Summary::new("eval", tally)
            .with("frame_accuracy_combined", report.combined.frame_accuracy)
            .with("frame_accuracy_rgb", report.rgb.frame_accuracy)
            .with("frame_accuracy_flow", report.flow.frame_accuracy);
        if let Some(m) = missing {
            s = s.with("warning", m);
        }
        Ok((s, report))
    }

    pub fn gradcam(&self, out: &Path) -> Result<Summary> {
        let lm = self.manifest()?;
        let keys = self.video_keys(&lm)?;
        let (rgb, _) = self.load_streams(&lm, &keys)?;
        let crop = &self.cfg.crop;
        let gt_root = lm.root.join("gt");
        std::fs::create_dir_all(out)?;
        let mut records = Vec::new();
        let mut tally = CacheTally::default();
        for split in loso_splits(&lm.manifest)? {
            let (pred, _) = StreamPredictor::load(&self.checkpoint(&keys, &rgb, &split, &lm)?)?;
            tally.record(true);
            let center = pred.model.window() / 2;
            for v in rgb.indices(&split.test_videos)? {
                let video = &rgb.videos[v];
                let truth = read_truth(&gt_root.join(&video.video_id).join("frames.jsonl"))?;
                let raw_size = Image::load_png(&lm.frame_path(&lm.manifest.videos[v].frame_paths[0]))
                    .map(|im| (im.width(), im.height()))?;
                let tiles = pred.predict_splices(&rgb, v, crop)?;
                let mut taken = 0;
                for tile in tiles.iter().filter(|t| argmax(&t.probs) == t.splice.label) {
                    if taken == self.cfg.eval.gradcam_frames {
                        break;
                    }
                    taken += 1;
                    let off = center_offset(crop.central_width, crop.central_height, crop.crop_size);
                    let frames = tile
                        .splice
                        .frame_indices
                        .iter()
                        .map(|&t| Ok(image_to_tensor(&preprocess_at(&video.frames[t], crop, &pred.stats, off)?)))
                        .collect::<Result<Vec<_>>>()?;
                    let heat = grad_cam(&pred.model, &frames, center, tile.splice.label)?;
                    let frame = tile.splice.frame_indices[center];
                    let name = format!("{}_{frame:06}.png", video.video_id);
                    heat.save(&out.join(&name), (crop.resize_to, crop.resize_to))?;
                    let mass = truth
                        .as_ref()
                        .and_then(|t| t.get(frame))
                        .and_then(|t| t.object_box)
                        .map(|b| box_mass(&heat, b, raw_size, off, crop));
                    records.push(json!({
                        "video": video.video_id,
                        "frame": frame,
                        "class": lm.manifest.label_map.name(tile.splice.label),
                        "heatmap": name,
                        "mass_in_object_box": mass,
                    }));
                }
            }
        }
        Ok(Summary::new("gradcam", tally).with_artifact("gradcam.json", Value::Array(records)))
    }
}

/// Heatmap mass inside a raw-frame box, after mapping the box through the
/// central crop, the network crop and the resize.
fn box_mass(
    heat: &egoaction::model::Heatmap,
    b: [f64; 4],
    raw: (usize, usize),
    off: (usize, usize),
    crop: &egoaction::preprocess::CropConfig,
) -> f64 {
    let cx = ((raw.0 - crop.central_width) / 2) as f64;
    let cy = ((raw.1 - crop.central_height) / 2) as f64;
    let (x0, y0) = map_point(crop, off, b[0] - cx, b[1] - cy);
    let (x1, y1) = map_point(crop, off, b[2] - cx, b[3] - cy);
    let sx = heat.width as f64 / crop.resize_to as f64;
    let sy = heat.height as f64 / crop.resize_to as f64;
    // Pixel indices to pixel edges, then to heatmap cells.
    heat.mass_in((x0 + 0.5) * sx, (y0 + 0.5) * sy, (x1 + 0.5) * sx, (y1 + 0.5) * sy)
}

fn read_truth(path: &Path) -> Result<Option<Vec<FrameTruth>>> {
    if !path.is_file() {
        return Ok(None);
    }
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for line in f.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(Some(out))
}

fn write_flows(dir: &Path, flows: &[FlowField]) -> Result<()> {
    for (t, f) in flows.iter().enumerate() {
        write_flo(&dir.join(format!("{t:06}.flo")), f)?;
    }
    Ok(())
}

fn read_flows(dir: &Path) -> Result<Vec<FlowField>> {
    let mut names: Vec<PathBuf> = std::fs::read_dir(dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    names.retain(|p| p.extension().is_some_and(|x| x == "flo"));
    names.sort();
    names.iter().map(|p| Ok(read_flo(p)?)).collect()
}

fn write_frames(path: &Path, frames: &[Image]) -> Result<()> {
    let f = &frames[0];
    let dims = [frames.len(), f.channels(), f.height(), f.width()];
    let data: Vec<f32> = frames.iter().flat_map(|im| im.data().iter().copied()).collect();
    write_tensor_file(path, &dims, UNNORMALIZED, &data)?;
    Ok(())
}

fn read_frames(path: &Path) -> Result<Vec<Image>> {
    let (header, data) = read_tensor_file(path)?;
    let [n, c, h, w] = header.dims[..] else {
        return Err(CliError::Pipeline(egoaction::Error::Format(format!(
            "{}: expected 4-d frame tensor, got {:?}",
            path.display(),
            header.dims
        ))));
    };
    if header.stats_hash != UNNORMALIZED {
        return Err(CliError::Pipeline(egoaction::Error::Format(format!(
            "{}: expected raw frames, found stats hash {}",
            path.display(),
            header.stats_hash
        ))));
    }
    let per = c * h * w;
    (0..n)
        .map(|i| Ok(Image::new(c, w, h, data[i * per..(i + 1) * per].to_vec())?))
        .collect()
}

/// Machine-readable outcome of one command, printed as a JSON line.
#[derive(Debug, Serialize)]
pub struct Summary {
    pub command: String,
    pub items: usize,
    pub cache_hits: usize,
    pub hit_rate: f64,
    #[serde(flatten)]
    pub extra: BTreeMap<String, Value>,
    #[serde(skip)]
    pub artifacts: Vec<(String, Value)>,
}

impl Summary {
    pub fn new(command: &str, tally: CacheTally) -> Self {
        Self {
            command: command.into(),
            items: tally.items,
            cache_hits: tally.hits,
            hit_rate: tally.hit_rate(),
            extra: BTreeMap::new(),
            artifacts: Vec::new(),
        }
    }

    pub fn with(mut self, key: &str, value: impl Serialize) -> Self {
        self.extra.insert(key.into(), serde_json::to_value(value).expect("serializable"));
        self
    }

    fn with_artifact(mut self, name: &str, value: Value) -> Self {
        self.artifacts.push((name.into(), value));
        self
    }
}
