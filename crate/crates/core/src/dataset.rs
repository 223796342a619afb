//! Video dataset manifests and leave-one-subject-out splits.
//!
//! A manifest is a JSON-lines file. The first line is a header
//! `{"label_names": [...], "name": "..."}` (optionally with
//! `"label_categories"`), and every following line describes one video:
//! `{"video_id": ..., "subject": ..., "frames": [...], "labels": [...]}`.
//! Frame paths are relative to the manifest's directory unless absolute.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    names: Vec<String>,
    /// Optional coarse grouping of classes (e.g. hand-object interaction vs
    /// locomotion), used for cross-category confusion reporting.
    categories: Option<Vec<String>>,
}

impl LabelMap {
    pub fn new(names: Vec<String>) -> Result<Self> {
        Self::with_categories(names, None)
    }

    pub fn with_categories(names: Vec<String>, categories: Option<Vec<String>>) -> Result<Self> {
        if names.len() < 2 {
            return Err(Error::InvalidArgument(format!(
                "label map needs at least 2 classes, got {}",
                names.len()
            )));
        }
        let mut seen = HashSet::new();
        for n in &names {
            if !seen.insert(n.as_str()) {
                return Err(Error::InvalidArgument(format!("duplicate class name `{n}`")));
            }
        }
        if let Some(c) = &categories {
            if c.len() != names.len() {
                return Err(Error::InvalidArgument(format!(
                    "{} categories for {} classes",
                    c.len(),
                    names.len()
                )));
            }
        }
        Ok(Self { names, categories })
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn name(&self, i: usize) -> &str {
        &self.names[i]
    }

    pub fn categories(&self) -> Option<&[String]> {
        self.categories.as_deref()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VideoRecord {
    pub video_id: String,
    pub subject: String,
    #[serde(rename = "frames")]
    pub frame_paths: Vec<String>,
    #[serde(rename = "labels")]
    pub frame_labels: Vec<usize>,
}

impl VideoRecord {
    pub fn len(&self) -> usize {
        self.frame_paths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frame_paths.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetManifest {
    pub name: String,
    pub label_map: LabelMap,
    pub videos: Vec<VideoRecord>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    label_names: Vec<String>,
    name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    label_categories: Option<Vec<String>>,
}

impl DatasetManifest {
    pub fn new(name: impl Into<String>, label_map: LabelMap, videos: Vec<VideoRecord>) -> Result<Self> {
        let m = Self {
            name: name.into(),
            label_map,
            videos,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        let mut ids = HashSet::new();
        let l = self.label_map.len();
        for v in &self.videos {
            let fail = |msg: String| {
                Err(Error::Validation {
                    video_id: v.video_id.clone(),
                    msg,
                })
            };
            if !ids.insert(v.video_id.as_str()) {
                return fail("duplicate video_id".into());
            }
            if v.subject.is_empty() {
                return fail("empty subject".into());
            }
            if v.frame_paths.is_empty() {
                return fail("video has no frames".into());
            }
            if v.frame_paths.len() != v.frame_labels.len() {
                return fail(format!(
                    "{} frames but {} labels",
                    v.frame_paths.len(),
                    v.frame_labels.len()
                ));
            }
            if let Some(&bad) = v.frame_labels.iter().find(|&&x| x >= l) {
                return fail(format!("label index {bad} out of range for {l} classes"));
            }
            let mut seen = HashSet::new();
            if let Some(dup) = v.frame_paths.iter().find(|p| !seen.insert(p.as_str())) {
                return fail(format!("duplicate frame path `{dup}`"));
            }
        }
        Ok(())
    }

    pub fn video(&self, id: &str) -> Option<&VideoRecord> {
        self.videos.iter().find(|v| v.video_id == id)
    }

    /// Distinct subjects in sorted order.
    pub fn subjects(&self) -> Vec<String> {
        self.videos
            .iter()
            .map(|v| v.subject.clone())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }

    pub fn frame_count(&self) -> usize {
        self.videos.iter().map(VideoRecord::len).sum()
    }

    /// Rewrite relative frame paths as paths under `root`.
    pub fn absolutize(&mut self, root: &Path) {
        for v in &mut self.videos {
            for p in &mut v.frame_paths {
                if Path::new(p).is_relative() {
                    *p = root.join(&*p).to_string_lossy().into_owned();
                }
            }
        }
    }

    pub fn to_jsonl(&self) -> String {
        let header = Header {
            label_names: self.label_map.names.clone(),
            name: self.name.clone(),
            label_categories: self.label_map.categories.clone(),
        };
        let mut out = serde_json::to_string(&header).expect("header serializes");
        out.push('\n');
        for v in &self.videos {
            out.push_str(&serde_json::to_string(v).expect("video serializes"));
            out.push('\n');
        }
        out
    }

    pub fn parse_jsonl(text: &str, path: &Path) -> Result<Self> {
        let parse_err = |line: usize, msg: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            msg,
        };
        let mut lines = text
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l))
            .filter(|(_, l)| !l.trim().is_empty());
        let (hline, htext) = lines.next().ok_or_else(|| parse_err(1, "empty manifest".into()))?;
        let header: Header = serde_json::from_str(htext).map_err(|e| parse_err(hline, e.to_string()))?;
        let label_map = LabelMap::with_categories(header.label_names, header.label_categories)
            .map_err(|e| parse_err(hline, e.to_string()))?;
        let mut videos = Vec::new();
        for (n, l) in lines {
            let v: VideoRecord = serde_json::from_str(l).map_err(|e| parse_err(n, e.to_string()))?;
            videos.push(v);
        }
        DatasetManifest::new(header.name, label_map, videos)
    }
}

/// A validated manifest plus the non-fatal problems found while loading.
#[derive(Debug, Clone)]
pub struct LoadedManifest {
    pub manifest: DatasetManifest,
    /// Directory that relative frame paths resolve against.
    pub root: PathBuf,
    pub warnings: Vec<String>,
}

impl LoadedManifest {
    pub fn frame_path(&self, frame: &str) -> PathBuf {
        self.root.join(frame)
    }
}

pub fn load_manifest(path: &Path) -> Result<LoadedManifest> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let manifest = DatasetManifest::parse_jsonl(&text, path)?;
    let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut warnings = Vec::new();
    for v in &manifest.videos {
        let missing = v
            .frame_paths
            .iter()
            .filter(|p| !root.join(p).exists())
            .count();
        if missing > 0 {
            warnings.push(format!(
                "video `{}`: {missing} of {} frame files missing",
                v.video_id,
                v.len()
            ));
        }
    }
    Ok(LoadedManifest {
        manifest,
        root,
        warnings,
    })
}

pub fn write_manifest(path: &Path, manifest: &DatasetManifest) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(manifest.to_jsonl().as_bytes())
        .map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LosoSplit {
    pub held_out_subject: String,
    pub train_videos: Vec<String>,
    pub test_videos: Vec<String>,
}

/// One split per distinct subject, in sorted subject order.
pub fn loso_splits(manifest: &DatasetManifest) -> Result<Vec<LosoSplit>> {
    let subjects = manifest.subjects();
    if subjects.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "leave-one-subject-out needs at least 2 subjects, manifest `{}` has {}",
            manifest.name,
            subjects.len()
        )));
    }
    Ok(subjects
        .into_iter()
        .map(|s| {
            let (test, train): (Vec<_>, Vec<_>) = manifest.videos.iter().partition(|v| v.subject == s);
            LosoSplit {
                held_out_subject: s,
                train_videos: train.into_iter().map(|v| v.video_id.clone()).collect(),
                test_videos: test.into_iter().map(|v| v.video_id.clone()).collect(),
            }
        })
        .collect())
}

/// Combine two datasets. Class names are deduplicated (first occurrence
/// wins), subjects become `"<manifest name>/<subject>"`, and video ids are
/// namespaced the same way only where they would collide. Classes without
/// explicit categories are categorized by their source manifest's name.
pub fn merge_manifests(a: &DatasetManifest, b: &DatasetManifest) -> DatasetManifest {
    let (na, nb) = if a.name == b.name {
        (format!("{}[0]", a.name), format!("{}[1]", b.name))
    } else {
        (a.name.clone(), b.name.clone())
    };
    let cats = |m: &DatasetManifest, ns: &str| -> Vec<String> {
        m.label_map
            .categories
            .clone()
            .unwrap_or_else(|| vec![ns.to_string(); m.label_map.len()])
    };
    let mut names = a.label_map.names.clone();
    let mut categories = cats(a, &na);
    let b_cats = cats(b, &nb);
    let mut remap_b = Vec::with_capacity(b.label_map.len());
    for (name, cat) in b.label_map.names.iter().zip(b_cats) {
        match names.iter().position(|n| n == name) {
            Some(i) => remap_b.push(i),
            None => {
                remap_b.push(names.len());
                names.push(name.clone());
                categories.push(cat);
            }
        }
    }
    let b_ids: HashSet<&str> = b.videos.iter().map(|v| v.video_id.as_str()).collect();
    let a_ids: HashSet<&str> = a.videos.iter().map(|v| v.video_id.as_str()).collect();
    let mut videos = Vec::with_capacity(a.videos.len() + b.videos.len());
    for v in &a.videos {
        let mut v = v.clone();
        if b_ids.contains(v.video_id.as_str()) {
            v.video_id = format!("{na}/{}", v.video_id);
        }
        v.subject = format!("{na}/{}", v.subject);
        videos.push(v);
    }
    for v in &b.videos {
        let mut v = v.clone();
        if a_ids.contains(v.video_id.as_str()) {
            v.video_id = format!("{nb}/{}", v.video_id);
        }
        v.subject = format!("{nb}/{}", v.subject);
        v.frame_labels = v.frame_labels.iter().map(|&l| remap_b[l]).collect();
        videos.push(v);
    }
    let distinct: BTreeSet<&String> = categories.iter().collect();
    let label_map = LabelMap::with_categories(names, (distinct.len() > 1).then_some(categories))
        .expect("merged names are unique and at least as many as either input");
    DatasetManifest {
        name: format!("{na}+{nb}"),
        label_map,
        videos,
    }
}

/// Table-style dataset statistics: subjects, frames, classes, plus the
/// per-class frame histogram.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub name: String,
    pub subjects: usize,
    pub videos: usize,
    pub frames: usize,
    pub classes: usize,
    pub frames_per_class: BTreeMap<String, usize>,
}

pub fn summarize(manifest: &DatasetManifest) -> DatasetSummary {
    let mut counts: HashMap<usize, usize> = HashMap::new();
    for v in &manifest.videos {
        for &l in &v.frame_labels {
            *counts.entry(l).or_default() += 1;
        }
    }
    DatasetSummary {
        name: manifest.name.clone(),
        subjects: manifest.subjects().len(),
        videos: manifest.videos.len(),
        frames: manifest.frame_count(),
        classes: manifest.label_map.len(),
        frames_per_class: manifest
            .label_map
            .names
            .iter()
            .enumerate()
            .map(|(i, n)| (n.clone(), counts.get(&i).copied().unwrap_or(0)))
            .collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labels(n: usize) -> LabelMap {
        LabelMap::new((0..n).map(|i| format!("c{i}")).collect()).unwrap()
    }

    fn video(id: &str, subject: &str, labels: &[usize]) -> VideoRecord {
        VideoRecord {
            video_id: id.into(),
            subject: subject.into(),
            frame_paths: (0..labels.len()).map(|i| format!("{id}/{i:06}.png")).collect(),
            frame_labels: labels.to_vec(),
        }
    }

    #[test]
    fn round_trip_two_videos() {
        let m = DatasetManifest::new(
            "toy",
            labels(3),
            vec![video("a", "S1", &[0, 1, 2]), video("b", "S2", &[2, 2])],
        )
        .unwrap();
        let back = DatasetManifest::parse_jsonl(&m.to_jsonl(), Path::new("m.jsonl")).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.videos.len(), 2);
    }

    #[test]
    fn out_of_range_label_names_the_video() {
        let m = DatasetManifest::new("toy", labels(3), vec![video("bad", "S1", &[0, 3])]);
        match m {
            Err(Error::Validation { video_id, .. }) => assert_eq!(video_id, "bad"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn duplicate_video_id_rejected() {
        let m = DatasetManifest::new("toy", labels(2), vec![video("a", "S1", &[0]), video("a", "S2", &[1])]);
        assert!(matches!(m, Err(Error::Validation { .. })));
    }

    #[test]
    fn parse_error_reports_line() {
        let text = "{\"label_names\":[\"a\",\"b\"],\"name\":\"x\"}\n{not json}\n";
        match DatasetManifest::parse_jsonl(text, Path::new("m.jsonl")) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn empty_subject_and_length_mismatch() {
        assert!(DatasetManifest::new("t", labels(2), vec![video("a", "", &[0])]).is_err());
        let mut v = video("a", "S", &[0, 1]);
        v.frame_labels.pop();
        assert!(DatasetManifest::new("t", labels(2), vec![v]).is_err());
    }

    #[test]
    fn four_subjects_four_splits() {
        let vids = (0..8).map(|i| video(&format!("v{i}"), &format!("S{}", i % 4 + 1), &[0])).collect();
        let m = DatasetManifest::new("gtea-like", labels(11), vids).unwrap();
        let splits = loso_splits(&m).unwrap();
        assert_eq!(splits.len(), 4);
        for s in &splits {
            assert_eq!(s.test_videos.len(), 2);
            assert_eq!(s.train_videos.len(), 6);
        }
    }

    #[test]
    fn single_subject_is_an_error() {
        let m = DatasetManifest::new("t", labels(2), vec![video("a", "S1", &[0])]).unwrap();
        assert!(loso_splits(&m).is_err());
    }

    #[test]
    fn two_subjects_three_videos_partition() {
        let m = DatasetManifest::new(
            "t",
            labels(2),
            vec![video("a", "S1", &[0]), video("b", "S2", &[1]), video("c", "S1", &[1])],
        )
        .unwrap();
        let splits = loso_splits(&m).unwrap();
        assert_eq!(splits.len(), 2);
        let mut all: Vec<_> = splits.iter().flat_map(|s| s.test_videos.clone()).collect();
        all.sort();
        assert_eq!(all, vec!["a", "b", "c"]);
    }

    #[test]
    fn merge_disjoint_label_sets() {
        let a = DatasetManifest::new(
            "gtea",
            LabelMap::new((0..11).map(|i| format!("g{i}")).collect()).unwrap(),
            vec![video("a", "S1", &[10])],
        )
        .unwrap();
        let b = DatasetManifest::new(
            "huji",
            LabelMap::new((0..14).map(|i| format!("h{i}")).collect()).unwrap(),
            vec![video("b", "S1", &[3])],
        )
        .unwrap();
        let m = merge_manifests(&a, &b);
        assert_eq!(m.label_map.len(), 25);
        assert_eq!(m.video("b").unwrap().frame_labels, vec![14]);
        assert_eq!(m.subjects(), vec!["gtea/S1", "huji/S1"]);
        let cats = m.label_map.categories().unwrap();
        assert_eq!(cats[0], "gtea");
        assert_eq!(cats[24], "huji");
        m.validate().unwrap();
    }

    #[test]
    fn merge_with_empty_namespaces_subjects() {
        let a = DatasetManifest::new("m", labels(3), vec![video("a", "S1", &[0, 1])]).unwrap();
        let empty = DatasetManifest::new("e", labels(3), vec![]).unwrap();
        let merged = merge_manifests(&a, &empty);
        assert_eq!(merged.label_map.names(), a.label_map.names());
        assert_eq!(merged.videos.len(), 1);
        assert_eq!(merged.videos[0].subject, "m/S1");
        assert_eq!(merged.videos[0].frame_labels, a.videos[0].frame_labels);
    }

    #[test]
    fn shared_class_name_appears_once() {
        let a = DatasetManifest::new("a", LabelMap::new(vec!["open".into(), "close".into()]).unwrap(), vec![]).unwrap();
        let b = DatasetManifest::new(
            "b",
            LabelMap::new(vec!["walk".into(), "open".into()]).unwrap(),
            vec![video("v", "S", &[1, 0])],
        )
        .unwrap();
        let m = merge_manifests(&a, &b);
        assert_eq!(m.label_map.names(), &["open", "close", "walk"]);
        assert_eq!(m.videos[0].frame_labels, vec![0, 2]);
    }

    #[test]
    fn missing_frames_are_warnings() {
        let dir = tempfile::tempdir().unwrap();
        let m = DatasetManifest::new("t", labels(2), vec![video("a", "S1", &[0, 1])]).unwrap();
        let path = dir.path().join("manifest.jsonl");
        write_manifest(&path, &m).unwrap();
        let loaded = load_manifest(&path).unwrap();
        assert_eq!(loaded.manifest, m);
        assert_eq!(loaded.warnings.len(), 1);
    }
}
