//! Dataset manifest and validated in-memory video features.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::feature::read_feature;
use crate::diffkernel::Tensor;
use crate::error::{Error, Result};

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Normal,
    Anomaly,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// One video entry. Paths are relative to the manifest's directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VideoRecord {
    pub id: String,
    pub label: Label,
    pub category: String,
    pub frames: usize,
    /// Scene feature files at granularity 1, 2 and 3.
    pub scene: [String; 3],
    pub tracklets: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub annotations: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<Split>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: u32,
    /// Segment count T at granularity 1.
    pub segments: usize,
    pub videos: Vec<VideoRecord>,
}

impl Manifest {
    pub fn parse(text: &str) -> std::result::Result<Self, String> {
        let m: Manifest = serde_json::from_str(text).map_err(|e| e.to_string())?;
        if m.version != MANIFEST_VERSION {
            return Err(format!("unsupported manifest version {}", m.version));
        }
        if m.segments == 0 {
            return Err("segments must be positive".into());
        }
        Ok(m)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }
}

/// Per-segment human tracklet features.
#[derive(Clone, Debug, PartialEq)]
pub struct TrackletMap {
    /// T×k×n; absent entries are zero vectors.
    pub features: Tensor,
    pub ids: Vec<usize>,
    /// T×k, row-major; true where the tracklet is present in the segment.
    pub mask: Vec<bool>,
}

impl TrackletMap {
    pub fn new(features: Tensor) -> Result<Self> {
        let [t, k, n] = *features.shape() else {
            return Err(Error::invalid(format!(
                "tracklet map must be T×k×n, got {:?}",
                features.shape()
            )));
        };
        let mask = (0..t * k)
            .map(|i| features.data()[i * n..(i + 1) * n].iter().any(|&v| v != 0.0))
            .collect();
        Ok(TrackletMap {
            features,
            ids: (0..k).collect(),
            mask,
        })
    }

    pub fn segments(&self) -> usize {
        self.features.shape()[0]
    }

    pub fn count(&self) -> usize {
        self.features.shape()[1]
    }

    pub fn channels(&self) -> usize {
        self.features.shape()[2]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VideoFeatures {
    pub id: String,
    pub label: Label,
    pub category: String,
    pub frames: usize,
    pub split: Option<Split>,
    /// Scene maps of shape (G·T)×n for G = 1, 2, 3.
    pub scene: [Tensor; 3],
    pub tracklets: TrackletMap,
    /// Per-frame 0/1 ground truth, when annotated.
    pub annotations: Option<Vec<u8>>,
}

impl VideoFeatures {
    pub fn segments(&self) -> usize {
        self.scene[0].shape()[0]
    }

    pub fn channels(&self) -> usize {
        self.scene[0].shape()[1]
    }

    /// Frame labels, with unannotated normal videos treated as all-normal.
    pub fn frame_labels(&self) -> Option<Vec<u8>> {
        match (&self.annotations, self.label) {
            (Some(a), _) => Some(a.clone()),
            (None, Label::Normal) => Some(vec![0; self.frames]),
            (None, Label::Anomaly) => None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub segments: usize,
    pub channels: Option<usize>,
    pub videos: Vec<VideoFeatures>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.videos.len()
    }

    pub fn is_empty(&self) -> bool {
        self.videos.is_empty()
    }

    /// Videos marked for training, or every video when no split is marked.
    pub fn train_videos(&self) -> Vec<&VideoFeatures> {
        self.by_split(Split::Train)
    }

    /// Videos marked for testing, or every video when no split is marked.
    pub fn test_videos(&self) -> Vec<&VideoFeatures> {
        self.by_split(Split::Test)
    }

    fn by_split(&self, split: Split) -> Vec<&VideoFeatures> {
        if self.videos.iter().all(|v| v.split.is_none()) {
            return self.videos.iter().collect();
        }
        self.videos.iter().filter(|v| v.split == Some(split)).collect()
    }

    pub fn subset(&self, keep: impl Fn(&VideoFeatures) -> bool) -> Dataset {
        Dataset {
            segments: self.segments,
            channels: self.channels,
            videos: self.videos.iter().filter(|v| keep(v)).cloned().collect(),
        }
    }
}

pub fn parse_annotations(text: &str) -> std::result::Result<Vec<u8>, String> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| match l.trim() {
            "0" => Ok(0),
            "1" => Ok(1),
            other => Err(format!("line {}: expected 0 or 1, got {other:?}", i + 1)),
        })
        .collect()
}

pub fn format_annotations(labels: &[u8]) -> String {
    let mut s = String::with_capacity(labels.len() * 2);
    for l in labels {
        s.push(if *l == 0 { '0' } else { '1' });
        s.push('\n');
    }
    s
}

/// Reads a manifest and every file it references, checking all shape rules.
pub fn load_dataset(manifest_path: &Path) -> Result<Dataset> {
    let text = fs::read_to_string(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
    let manifest = Manifest::parse(&text).map_err(|msg| Error::Parse {
        path: manifest_path.to_path_buf(),
        msg,
    })?;
    let root = manifest_path.parent().unwrap_or(Path::new("."));
    let t = manifest.segments;
    let mut channels: Option<(usize, String)> = None;
    let mut videos = Vec::with_capacity(manifest.videos.len());
    for rec in &manifest.videos {
        let video = load_video(root, rec, t)?;
        let n = video.channels();
        match &channels {
            None => channels = Some((n, rec.id.clone())),
            Some((n0, first)) if *n0 != n => {
                return Err(Error::Parse {
                    path: root.join(&rec.scene[0]),
                    msg: format!(
                        "video {}: {n} channels, but video {first} has {n0}; channel count must be uniform",
                        rec.id
                    ),
                })
            }
            _ => {}
        }
        videos.push(video);
    }
    Ok(Dataset {
        segments: t,
        channels: channels.map(|(n, _)| n),
        videos,
    })
}

fn load_video(root: &Path, rec: &VideoRecord, t: usize) -> Result<VideoFeatures> {
    let violation = |path: PathBuf, msg: String| Error::Parse {
        path,
        msg: format!("video {}: {msg}", rec.id),
    };
    if rec.frames == 0 {
        return Err(violation(root.to_path_buf(), "frame count must be positive".into()));
    }
    let mut scene: Vec<Tensor> = Vec::with_capacity(3);
    for (g, file) in rec.scene.iter().enumerate() {
        let path = root.join(file);
        let map = read_feature(&path)?;
        let want = (g + 1) * t;
        match *map.shape() {
            [len, n] if len == want && n > 0 => {}
            _ => {
                return Err(violation(
                    path,
                    format!("granularity {} map has shape {:?}, expected {want}×n", g + 1, map.shape()),
                ))
            }
        }
        if let Some(first) = scene.first() {
            if first.shape()[1] != map.shape()[1] {
                return Err(violation(
                    path,
                    format!(
                        "granularity {} has {} channels, granularity 1 has {}",
                        g + 1,
                        map.shape()[1],
                        first.shape()[1]
                    ),
                ));
            }
        }
        scene.push(map);
    }
    let n = scene[0].shape()[1];
    let tr_path = root.join(&rec.tracklets);
    let tr = read_feature(&tr_path)?;
    match *tr.shape() {
        [tt, _, nn] if tt == t && nn == n => {}
        _ => {
            return Err(violation(
                tr_path,
                format!("tracklet map has shape {:?}, expected {t}×k×{n}", tr.shape()),
            ))
        }
    }
    let tracklets = TrackletMap::new(tr)?;

    let annotations = match &rec.annotations {
        Some(file) => {
            let path = root.join(file);
            let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            let labels = parse_annotations(&text).map_err(|m| violation(path.clone(), m))?;
            if labels.len() != rec.frames {
                return Err(violation(
                    path,
                    format!("{} annotation lines for {} frames", labels.len(), rec.frames),
                ));
            }
            Some(labels)
        }
        None => None,
    };
    if rec.label == Label::Anomaly && rec.split == Some(Split::Test) && annotations.is_none() {
        return Err(violation(
            root.to_path_buf(),
            "anomaly videos in the test split need frame annotations".into(),
        ));
    }
    let scene: [Tensor; 3] = scene.try_into().expect("three granularities");
    Ok(VideoFeatures {
        id: rec.id.clone(),
        label: rec.label,
        category: rec.category.clone(),
        frames: rec.frames,
        split: rec.split,
        scene,
        tracklets,
        annotations,
    })
}
