//! In-memory frame stores for the two input streams.
//!
//! Both streams keep centrally cropped, un-normalized frames so that the
//! per-split normalization statistics and the random training crops can be
//! applied on the fly.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ego::{compensate_sequence, CompensationParams, FitReport};
use crate::error::{Error, Result};
use crate::flow::{compute_flow, flow_to_color, FlowField, FlowParams};
use crate::image::Image;
use crate::preprocess::{central_crop, compute_dataset_stats, CropConfig, DatasetStats};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StreamKind {
    Rgb,
    Flow,
}

impl StreamKind {
    pub fn name(self) -> &'static str {
        match self {
            StreamKind::Rgb => "rgb",
            StreamKind::Flow => "flow",
        }
    }
}

impl std::fmt::Display for StreamKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// One video's stream frames with per-frame labels.
#[derive(Debug, Clone)]
pub struct VideoFrames {
    pub video_id: String,
    pub subject: String,
    pub frames: Vec<Image>,
    pub labels: Vec<usize>,
}

impl VideoFrames {
    pub fn new(video_id: impl Into<String>, subject: impl Into<String>, frames: Vec<Image>, labels: Vec<usize>) -> Result<Self> {
        let video_id = video_id.into();
        if frames.len() != labels.len() || frames.is_empty() {
            return Err(Error::Validation {
                video_id,
                msg: format!("{} frames but {} labels", frames.len(), labels.len()),
            });
        }
        Ok(Self {
            video_id,
            subject: subject.into(),
            frames,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct StreamData {
    pub kind: StreamKind,
    pub videos: Vec<VideoFrames>,
}

impl StreamData {
    pub fn video_index(&self, id: &str) -> Option<usize> {
        self.videos.iter().position(|v| v.video_id == id)
    }

    /// Indices of the named videos, in the given order.
    pub fn indices(&self, ids: &[String]) -> Result<Vec<usize>> {
        ids.iter()
            .map(|id| {
                self.video_index(id)
                    .ok_or_else(|| Error::InvalidArgument(format!("video `{id}` not in the {} stream", self.kind)))
            })
            .collect()
    }

    /// Normalization statistics over every frame of the given videos.
    pub fn stats(&self, videos: &[usize]) -> Result<DatasetStats> {
        compute_dataset_stats(videos.iter().flat_map(|&v| self.videos[v].frames.iter().map(|f| Ok(f.clone()))))
    }
}

/// RGB stream frames: the central crop of every raw frame.
pub fn rgb_frames(raw: &[Image], crop: &CropConfig) -> Result<Vec<Image>> {
    raw.iter()
        .map(|f| central_crop(f, crop.central_width, crop.central_height))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FlowStreamParams {
    pub flow: FlowParams,
    pub compensation: CompensationParams,
    /// Disable to feed raw (head-motion-laden) flow.
    pub compensate: bool,
    /// Flow magnitude rendered at full saturation. `None` normalizes each
    /// field by its own maximum.
    pub max_norm: Option<f64>,
}

impl Default for FlowStreamParams {
    fn default() -> Self {
        Self {
            flow: FlowParams::default(),
            compensation: CompensationParams::default(),
            compensate: true,
            max_norm: Some(2.0),
        }
    }
}

/// Dense flow between consecutive central crops, one field per pair.
pub fn sequence_flow(raw: &[Image], crop: &CropConfig, params: &FlowParams) -> Result<Vec<FlowField>> {
    let gray = raw
        .iter()
        .map(|f| central_crop(f, crop.central_width, crop.central_height)?.to_gray())
        .collect::<Result<Vec<_>>>()?;
    (0..gray.len().saturating_sub(1))
        .into_par_iter()
        .map(|t| compute_flow(&gray[t], &gray[t + 1], params))
        .collect()
}

/// Render flow fields as color images. Frame `t` gets the flow from `t` to
/// `t + 1`; the last frame reuses the final field so the stream stays
/// aligned with the labels.
pub fn flow_images(flows: &[FlowField], frames: usize, max_norm: Option<f64>) -> Result<Vec<Image>> {
    if flows.is_empty() || flows.len() + 1 != frames {
        return Err(Error::InvalidArgument(format!(
            "{} flow fields for {frames} frames",
            flows.len()
        )));
    }
    let mut out: Vec<Image> = flows.iter().map(|f| flow_to_color(f, max_norm).to_image()).collect();
    out.push(out.last().expect("nonempty").clone());
    Ok(out)
}

/// Flow stream frames for one video plus the per-pair fit reports.
pub fn flow_frames(raw: &[Image], crop: &CropConfig, params: &FlowStreamParams) -> Result<(Vec<Image>, Vec<FitReport>)> {
    if raw.len() < 2 {
        return Err(Error::InvalidArgument("flow needs at least two frames".into()));
    }
    let flows = sequence_flow(raw, crop, &params.flow)?;
    let (flows, reports) = if params.compensate {
        compensate_sequence(&flows, &params.compensation)
    } else {
        (flows, Vec::new())
    };
    Ok((flow_images(&flows, raw.len(), params.max_norm)?, reports))
}
