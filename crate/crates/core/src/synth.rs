//! Synthetic egocentric video generator.
//!
//! Each subject owns a smoothly textured planar "world". A head-mounted
//! camera random-walks over it through small frame-to-frame homographies,
//! and a hand-held object is composited in camera coordinates. Classes are
//! defined by the object's shape and color, the object's motion direction
//! and the head-motion amplitude, so some classes are separable by
//! appearance and others only by motion.
//!
//! Ground truth is exact by construction: the frame-to-frame homography,
//! the per-pixel flow (object velocity on object pixels, the homography's
//! induced displacement elsewhere), object boxes and object masks.

use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{write_manifest, DatasetManifest, LabelMap, VideoRecord};
use crate::ego::{Homography, Point};
use crate::error::{Error, Result};
use crate::flow::{write_flo, FlowField};
use crate::image::Image;
use crate::seed::derive_seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    Square,
    Disk,
    Cross,
    Triangle,
    Ring,
    Diamond,
}

impl Shape {
    /// Membership test in object-local coordinates scaled so the shape
    /// fits the unit box `[-1, 1]²`.
    fn contains(self, x: f64, y: f64) -> bool {
        match self {
            Shape::Square => x.abs() <= 0.8 && y.abs() <= 0.8,
            Shape::Disk => x * x + y * y <= 0.9,
            Shape::Cross => (x.abs() <= 0.3 && y.abs() <= 1.0) || (y.abs() <= 0.3 && x.abs() <= 1.0),
            Shape::Triangle => y <= 0.8 && y >= 2.0 * x.abs() - 1.0,
            Shape::Ring => {
                let r = x * x + y * y;
                (0.3..=0.95).contains(&r)
            }
            Shape::Diamond => x.abs() + y.abs() <= 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectSpec {
    pub shape: Shape,
    pub color: [f32; 3],
    /// Side of the object's bounding square, pixels.
    pub size: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthClass {
    pub name: String,
    #[serde(default)]
    pub object: Option<ObjectSpec>,
    /// Object displacement per frame in image coordinates.
    #[serde(default)]
    pub velocity: [f64; 2],
    /// Multiplier on the global head-motion jitter.
    #[serde(default = "one")]
    pub head_amplitude: f64,
    /// Constant head translation per frame, pixels.
    #[serde(default)]
    pub head_drift: [f64; 2],
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HeadMotion {
    pub rotation_deg: f64,
    pub translation_px: f64,
    pub scale: f64,
    pub perspective: f64,
}

impl Default for HeadMotion {
    fn default() -> Self {
        Self {
            rotation_deg: 0.4,
            translation_px: 0.6,
            scale: 0.003,
            perspective: 2e-5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub name: String,
    pub width: usize,
    pub height: usize,
    pub subjects: usize,
    pub videos_per_subject: usize,
    pub frames_per_video: usize,
    /// Inclusive range of labeled segment lengths, frames.
    pub segment_frames: (usize, usize),
    /// Motion-class objects travel this far before wrapping back.
    pub motion_span: f64,
    pub head_motion: HeadMotion,
    pub classes: Vec<SynthClass>,
    pub write_ground_truth: bool,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self::toy()
    }
}

impl SynthConfig {
    /// 4 subjects, 6 classes: three object-identity classes, and three
    /// motion-direction classes of which `push_left`/`push_right` are an
    /// opposite pair.
    pub fn toy() -> Self {
        let object = |shape, color: [f32; 3]| ObjectSpec {
            shape,
            color,
            size: 12.0,
        };
        let hand = object(Shape::Disk, [0.9, 0.7, 0.55]);
        let class = |name: &str, obj: ObjectSpec, vel: [f64; 2]| SynthClass {
            name: name.into(),
            object: Some(obj),
            velocity: vel,
            head_amplitude: 1.0,
            head_drift: [0.0, 0.0],
        };
        Self {
            name: "synthetic".into(),
            width: 48,
            height: 48,
            subjects: 4,
            videos_per_subject: 3,
            frames_per_video: 200,
            segment_frames: (24, 40),
            motion_span: 14.0,
            head_motion: HeadMotion::default(),
            classes: vec![
                class("take_cup", object(Shape::Square, [0.15, 0.3, 0.9]), [0.0, 0.0]),
                class("take_bread", object(Shape::Triangle, [0.2, 0.85, 0.2]), [0.0, 0.0]),
                class("take_knife", object(Shape::Cross, [0.9, 0.15, 0.15]), [0.0, 0.0]),
                class("push_left", hand.clone(), [-1.0, 0.0]),
                class("push_right", hand.clone(), [1.0, 0.0]),
                class("lift", hand, [0.0, -1.0]),
            ],
            write_ground_truth: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes.is_empty() {
            return Err(Error::InvalidArgument("synthetic config has no classes".into()));
        }
        if self.classes.len() < 2 {
            return Err(Error::InvalidArgument("synthetic config needs at least 2 classes".into()));
        }
        if self.width < 8 || self.height < 8 || self.frames_per_video == 0 || self.subjects == 0 || self.videos_per_subject == 0 {
            return Err(Error::InvalidArgument(format!(
                "degenerate synthetic config {}x{}, {} frames, {} subjects, {} videos",
                self.width, self.height, self.frames_per_video, self.subjects, self.videos_per_subject
            )));
        }
        let (lo, hi) = self.segment_frames;
        if lo == 0 || hi < lo {
            return Err(Error::InvalidArgument(format!("bad segment range {lo}..={hi}")));
        }
        Ok(())
    }

    pub fn label_map(&self) -> Result<LabelMap> {
        LabelMap::new(self.classes.iter().map(|c| c.name.clone()).collect())
    }

    pub fn class_index(&self, name: &str) -> Option<usize> {
        self.classes.iter().position(|c| c.name == name)
    }
}

/// Per-frame ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameTruth {
    pub frame: usize,
    pub label: usize,
    /// Maps frame `t` pixel coordinates to frame `t+1` for static scene points.
    pub homography: [[f64; 3]; 3],
    /// `[x0, y0, x1, y1]`, pixel coordinates, when an object is visible.
    pub object_box: Option<[f64; 4]>,
    pub object_velocity: [f64; 2],
}

/// Everything rendered for one video.
#[derive(Debug, Clone)]
pub struct SyntheticVideo {
    pub frames: Vec<Image>,
    pub labels: Vec<usize>,
    pub truth: Vec<FrameTruth>,
    /// Object coverage > 0.5, per frame, row-major.
    pub masks: Vec<Vec<bool>>,
    /// Flow from frame `t` to `t + 1`; one fewer than frames.
    pub flows: Vec<FlowField>,
}

/// Subject-specific world texture: a sum of sinusoids per channel.
#[derive(Debug, Clone)]
struct World {
    base: [f64; 3],
    waves: Vec<[f64; 5]>, // channel, amplitude, fx, fy, phase
}

impl World {
    fn new(rng: &mut ChaCha8Rng) -> Self {
        let mut base = [0.0; 3];
        for b in &mut base {
            *b = rng.random_range(0.45..0.55);
        }
        let mut waves = Vec::new();
        for c in 0..3 {
            for _ in 0..5 {
                let wavelength: f64 = rng.random_range(6.0..18.0);
                let theta: f64 = rng.random_range(0.0..std::f64::consts::TAU);
                let k = std::f64::consts::TAU / wavelength;
                waves.push([
                    c as f64,
                    rng.random_range(0.04..0.09),
                    k * theta.cos(),
                    k * theta.sin(),
                    rng.random_range(0.0..std::f64::consts::TAU),
                ]);
            }
        }
        Self { base, waves }
    }

    fn color(&self, x: f64, y: f64) -> [f64; 3] {
        let mut out = self.base;
        for w in &self.waves {
            out[w[0] as usize] += w[1] * (w[2] * x + w[3] * y + w[4]).sin();
        }
        out.map(|v| v.clamp(0.0, 1.0))
    }
}

const SUPERSAMPLE: usize = 4;

/// Object coverage of pixel `(px, py)` for an object centered at `center`.
fn coverage(obj: &ObjectSpec, center: [f64; 2], px: usize, py: usize) -> f64 {
    let half = obj.size / 2.0;
    let mut hits = 0;
    for sy in 0..SUPERSAMPLE {
        for sx in 0..SUPERSAMPLE {
            let x = px as f64 + (sx as f64 + 0.5) / SUPERSAMPLE as f64 - 0.5;
            let y = py as f64 + (sy as f64 + 0.5) / SUPERSAMPLE as f64 - 0.5;
            if obj.shape.contains((x - center[0]) / half, (y - center[1]) / half) {
                hits += 1;
            }
        }
    }
    hits as f64 / (SUPERSAMPLE * SUPERSAMPLE) as f64
}

fn object_texture(obj: &ObjectSpec, lx: f64, ly: f64, c: usize) -> f64 {
    let t = 0.8 + 0.2 * (0.9 * lx + 0.3).sin() * (0.7 * ly + 1.1).cos();
    (f64::from(obj.color[c]) * t).clamp(0.0, 1.0)
}

fn head_step(cfg: &SynthConfig, class: &SynthClass, rng: &mut ChaCha8Rng) -> Homography {
    let hm = &cfg.head_motion;
    let a = class.head_amplitude;
    let mut u = || rng.random_range(-1.0..1.0) * a;
    let theta = (u() * hm.rotation_deg).to_radians();
    let s = 1.0 + u() * hm.scale;
    let tx = class.head_drift[0] + u() * hm.translation_px;
    let ty = class.head_drift[1] + u() * hm.translation_px;
    let p1 = u() * hm.perspective;
    let p2 = u() * hm.perspective;
    let (cx, cy) = ((cfg.width as f64 - 1.0) / 2.0, (cfg.height as f64 - 1.0) / 2.0);
    let (c, sn) = (theta.cos() * s, theta.sin() * s);
    // Rotate/scale about the image center, then translate; mild keystone.
    let m = nalgebra::Matrix3::new(
        c,
        -sn,
        cx - c * cx + sn * cy + tx,
        sn,
        c,
        cy - sn * cx - c * cy + ty,
        p1,
        p2,
        1.0 - p1 * cx - p2 * cy,
    );
    Homography::from_matrix(m)
}

/// Segment plan: the label of every frame plus the index of each frame
/// within its segment.
fn plan_segments(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> (Vec<usize>, Vec<usize>) {
    let n = cfg.frames_per_video;
    let l = cfg.classes.len();
    let mut labels = Vec::with_capacity(n);
    let mut local = Vec::with_capacity(n);
    let mut order: Vec<usize> = Vec::new();
    while labels.len() < n {
        if order.is_empty() {
            order = (0..l).collect();
            // Fisher–Yates with the video's generator.
            for i in (1..l).rev() {
                let j = rng.random_range(0..=i);
                order.swap(i, j);
            }
        }
        let class = order.pop().expect("non-empty");
        let len = rng.random_range(cfg.segment_frames.0..=cfg.segment_frames.1);
        for k in 0..len.min(n - labels.len()) {
            labels.push(class);
            local.push(k);
        }
    }
    (labels, local)
}

fn object_center(cfg: &SynthConfig, class: &SynthClass, k: usize, phase: f64) -> [f64; 2] {
    let (cx, cy) = ((cfg.width as f64 - 1.0) / 2.0, (cfg.height as f64 - 1.0) / 2.0);
    let speed = class.velocity[0].hypot(class.velocity[1]);
    if speed == 0.0 {
        return [cx, cy];
    }
    let span = cfg.motion_span;
    let travel = (phase + k as f64 * speed).rem_euclid(span) - span / 2.0;
    [cx + class.velocity[0] / speed * travel, cy + class.velocity[1] / speed * travel]
}

/// Render video `video_index` of `subject`. Deterministic in
/// `(cfg, seed, subject, video_index)`.
pub fn render_video(cfg: &SynthConfig, seed: u64, subject: usize, video_index: usize) -> Result<SyntheticVideo> {
    cfg.validate()?;
    let mut world_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "synth/world", subject as u64));
    let world = World::new(&mut world_rng);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
        seed,
        "synth/video",
        (subject * 10_000 + video_index) as u64,
    ));
    let (labels, local) = plan_segments(cfg, &mut rng);
    render_frames(cfg, &world, &labels, &local, &mut rng)
}

/// Render a single-class sequence on subject `subject`'s world; used by
/// oracle tests that need pure head motion or a lone moving object.
pub fn render_class_sequence(cfg: &SynthConfig, class: usize, frames: usize, seed: u64, subject: usize) -> Result<SyntheticVideo> {
    cfg.validate()?;
    if class >= cfg.classes.len() {
        return Err(Error::InvalidArgument(format!("class {class} out of range")));
    }
    let mut world_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "synth/world", subject as u64));
    let world = World::new(&mut world_rng);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "synth/sequence", class as u64));
    let labels = vec![class; frames];
    let local: Vec<usize> = (0..frames).collect();
    render_frames(cfg, &world, &labels, &local, &mut rng)
}

fn render_frames(
    cfg: &SynthConfig,
    world: &World,
    labels: &[usize],
    local: &[usize],
    rng: &mut ChaCha8Rng,
) -> Result<SyntheticVideo> {
    let (w, h) = (cfg.width, cfg.height);
    let n = labels.len();
    // Camera pose: world -> image. Start somewhere random in the world.
    let mut camera = Homography::translation(rng.random_range(-200.0..200.0), rng.random_range(-200.0..200.0));
    let phase: f64 = rng.random_range(0.0..cfg.motion_span);
    let mut frames = Vec::with_capacity(n);
    let mut truth = Vec::with_capacity(n);
    let mut masks = Vec::with_capacity(n);
    let mut centers = Vec::with_capacity(n);
    let mut steps = Vec::with_capacity(n);
    for t in 0..n {
        let class = &cfg.classes[labels[t]];
        let center = object_center(cfg, class, local[t], phase);
        let inv = camera
            .inverse()
            .ok_or_else(|| Error::InvalidArgument("singular camera pose".into()))?;
        let mut data = vec![0.0f32; 3 * w * h];
        let mut mask = vec![false; w * h];
        for y in 0..h {
            for x in 0..w {
                let wp = inv.apply(&Point::new(x as f64, y as f64))?;
                let mut px = world.color(wp.x, wp.y);
                if let Some(obj) = &class.object {
                    let cov = coverage(obj, center, x, y);
                    if cov > 0.0 {
                        for (c, v) in px.iter_mut().enumerate() {
                            let o = object_texture(obj, x as f64 - center[0], y as f64 - center[1], c);
                            *v = (1.0 - cov) * *v + cov * o;
                        }
                    }
                    mask[y * w + x] = cov > 0.5;
                }
                for c in 0..3 {
                    data[(c * h + y) * w + x] = px[c] as f32;
                }
            }
        }
        frames.push(Image::new(3, w, h, data)?);
        masks.push(mask);
        centers.push(center);
        let step = head_step(cfg, class, rng);
        camera = step.compose(&camera);
        steps.push(step);
        let object_box = class.object.as_ref().map(|o| {
            let half = o.size / 2.0;
            [center[0] - half, center[1] - half, center[0] + half, center[1] + half]
        });
        truth.push(FrameTruth {
            frame: t,
            label: labels[t],
            homography: step.to_rows(),
            object_box,
            object_velocity: [0.0, 0.0],
        });
    }
    let mut flows = Vec::with_capacity(n.saturating_sub(1));
    for t in 0..n.saturating_sub(1) {
        let vel = [centers[t + 1][0] - centers[t][0], centers[t + 1][1] - centers[t][1]];
        truth[t].object_velocity = if truth[t].object_box.is_some() { vel } else { [0.0, 0.0] };
        let step = &steps[t];
        let mask = &masks[t];
        let mut u = Vec::with_capacity(w * h);
        let mut v = Vec::with_capacity(w * h);
        for y in 0..h {
            for x in 0..w {
                if mask[y * w + x] {
                    u.push(vel[0]);
                    v.push(vel[1]);
                } else {
                    let p = Point::new(x as f64, y as f64);
                    let q = step.apply(&p)?;
                    u.push(q.x - p.x);
                    v.push(q.y - p.y);
                }
            }
        }
        flows.push(FlowField::new(w, h, u, v)?);
    }
    Ok(SyntheticVideo {
        frames,
        labels: labels.to_vec(),
        truth,
        masks,
        flows,
    })
}

pub fn video_id(subject: usize, video: usize) -> String {
    format!("s{subject:02}_v{video:02}")
}

pub fn subject_id(subject: usize) -> String {
    format!("S{}", subject + 1)
}

/// Render the whole dataset under `out_dir`: `frames/<video>/NNNNNN.png`,
/// `manifest.jsonl`, `synth_config.json` and, when enabled, ground truth in
/// `gt/<video>/` (`flow_NNNNNN.flo`, `mask_NNNNNN.png`, `frames.jsonl`).
pub fn generate_synthetic_dataset(cfg: &SynthConfig, seed: u64, out_dir: &Path) -> Result<DatasetManifest> {
    cfg.validate()?;
    let label_map = cfg.label_map()?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let jobs: Vec<(usize, usize)> = (0..cfg.subjects)
        .flat_map(|s| (0..cfg.videos_per_subject).map(move |v| (s, v)))
        .collect();
    let videos = jobs
        .par_iter()
        .map(|&(s, v)| write_video(cfg, seed, s, v, out_dir))
        .collect::<Result<Vec<_>>>()?;
    let manifest = DatasetManifest::new(cfg.name.clone(), label_map, videos)?;
    write_manifest(&out_dir.join("manifest.jsonl"), &manifest)?;
    let cfg_path = out_dir.join("synth_config.json");
    let text = serde_json::to_string_pretty(&SeededConfig { seed, config: cfg.clone() })?;
    std::fs::write(&cfg_path, text).map_err(|e| Error::io(&cfg_path, e))?;
    Ok(manifest)
}

#[derive(Serialize)]
struct SeededConfig {
    seed: u64,
    config: SynthConfig,
}

fn write_video(cfg: &SynthConfig, seed: u64, s: usize, v: usize, out_dir: &Path) -> Result<VideoRecord> {
    let vid = video_id(s, v);
    let video = render_video(cfg, seed, s, v)?;
    let frame_dir = out_dir.join("frames").join(&vid);
    std::fs::create_dir_all(&frame_dir).map_err(|e| Error::io(&frame_dir, e))?;
    let mut paths = Vec::with_capacity(video.frames.len());
    for (t, f) in video.frames.iter().enumerate() {
        let rel = format!("frames/{vid}/{t:06}.png");
        f.save_png(&out_dir.join(&rel))?;
        paths.push(rel);
    }
    if cfg.write_ground_truth {
        let gt_dir = out_dir.join("gt").join(&vid);
        std::fs::create_dir_all(&gt_dir).map_err(|e| Error::io(&gt_dir, e))?;
        for (t, flow) in video.flows.iter().enumerate() {
            write_flo(&gt_dir.join(format!("flow_{t:06}.flo")), flow)?;
        }
        for (t, m) in video.masks.iter().enumerate() {
            let data = m.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
            Image::new(1, cfg.width, cfg.height, data)?.save_png(&gt_dir.join(format!("mask_{t:06}.png")))?;
        }
        let path = gt_dir.join("frames.jsonl");
        let mut f = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        for t in &video.truth {
            writeln!(f, "{}", serde_json::to_string(t)?).map_err(|e| Error::io(&path, e))?;
        }
    }
    Ok(VideoRecord {
        video_id: vid,
        subject: subject_id(s),
        frame_paths: paths,
        frame_labels: video.labels,
    })
}
