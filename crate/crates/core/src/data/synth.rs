//! Synthetic feature datasets with planted anomalies.
//!
//! Every video starts from per-frame Gaussian latents; the scene maps at
//! each granularity are mean pools of the same latents, so the three maps
//! stay mutually consistent. Scene anomalies shift the latents of a span of
//! frames along a fixed direction. Human anomalies leave the scene alone and
//! shift one tracklet's features along a second direction instead.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::feature::{write_feature, Precision};
use super::manifest::{
    format_annotations, Dataset, Label, Manifest, Split, TrackletMap, VideoFeatures, VideoRecord, MANIFEST_VERSION,
};
use super::segments::segment_boundaries;
use crate::diffkernel::Tensor;
use crate::error::{ensure, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AnomalyKind {
    /// Shift along the scene direction only.
    Scene,
    /// Shift one tracklet along the human direction only.
    Human,
    /// Both shifts in the same video.
    Mixed,
    /// Anomaly videos alternate between scene and human kinds.
    Alternate,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    /// Normal training videos.
    pub normal: usize,
    /// Anomalous training videos.
    pub anomaly: usize,
    #[serde(default)]
    pub test_normal: usize,
    #[serde(default)]
    pub test_anomaly: usize,
    /// Segment count T at granularity 1.
    pub segments: usize,
    pub frames_per_segment: usize,
    pub channels: usize,
    pub tracklets: usize,
    /// Suggested k^s; recorded for downstream configs only.
    #[serde(default = "default_selected")]
    pub selected_hint: usize,
    pub kind: AnomalyKind,
    /// Anomalous span length as a fraction of T, `[min, max]`.
    pub duration: [f64; 2],
    /// Planted shift μ.
    pub magnitude: f64,
    /// Per-frame noise σ.
    pub noise: f64,
    pub seed: u64,
    #[serde(default)]
    pub precision: Precision,
}

fn default_selected() -> usize {
    2
}

impl SynthSpec {
    pub fn parse_toml(text: &str) -> std::result::Result<Self, String> {
        let spec: SynthSpec = toml::from_str(text).map_err(|e| e.to_string())?;
        spec.validate().map_err(|e| e.to_string())?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.segments >= 1, "segments must be positive");
        ensure!(self.frames_per_segment >= 1, "frames_per_segment must be positive");
        ensure!(self.channels >= 1, "channels must be positive");
        let [lo, hi] = self.duration;
        ensure!(
            lo > 0.0 && lo <= hi && hi <= 1.0,
            "duration range [{lo}, {hi}] must lie in (0, 1] with min ≤ max"
        );
        ensure!(self.magnitude > 0.0, "magnitude must be positive");
        ensure!(self.noise >= 0.0, "noise must be non-negative");
        ensure!(
            self.tracklets >= 1 || self.kind == AnomalyKind::Scene || self.anomaly + self.test_anomaly == 0,
            "human anomalies need at least one tracklet"
        );
        Ok(())
    }

    pub fn frames(&self) -> usize {
        self.segments * self.frames_per_segment
    }

    /// Desk-scale set: T=8, n=16, k=4, 40 training and 20 test videos,
    /// half of each anomalous, μ/σ = 4.
    pub fn desk(kind: AnomalyKind, seed: u64) -> Self {
        SynthSpec {
            normal: 20,
            anomaly: 20,
            test_normal: 10,
            test_anomaly: 10,
            segments: 8,
            frames_per_segment: 4,
            channels: 16,
            tracklets: 4,
            selected_hint: 2,
            kind,
            duration: [0.25, 0.5],
            magnitude: 4.0,
            noise: 1.0,
            seed,
            precision: Precision::F64,
        }
    }
}

/// What was planted in one anomalous video.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlantedAnomaly {
    pub id: String,
    pub kind: AnomalyKind,
    /// Segment span at granularity 1, half open.
    pub segments: [usize; 2],
    /// Frame span, half open.
    pub frames: [usize; 2],
    pub tracklet: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub scene_direction: Vec<f64>,
    pub human_direction: Vec<f64>,
    pub anomalies: Vec<PlantedAnomaly>,
}

#[derive(Clone, Debug)]
pub struct SynthOutput {
    pub manifest_path: PathBuf,
    pub manifest: Manifest,
    pub truth: GroundTruth,
}

fn unit_vector(n: usize, rng: &mut ChaCha8Rng, orthogonal_to: Option<&[f64]>) -> Vec<f64> {
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    loop {
        let mut v: Vec<f64> = (0..n).map(|_| normal.sample(rng)).collect();
        if let Some(u) = orthogonal_to {
            if n > 1 {
                let dot: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(u).for_each(|(a, b)| *a -= dot * b);
            }
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm > 1e-6 {
            return v.into_iter().map(|a| a / norm).collect();
        }
    }
}

struct VideoPlan {
    id: String,
    label: Label,
    split: Split,
    kind: Option<AnomalyKind>,
}

fn plan(spec: &SynthSpec) -> Vec<VideoPlan> {
    let mut out = Vec::new();
    for (split, normal, anomaly) in [
        (Split::Train, spec.normal, spec.anomaly),
        (Split::Test, spec.test_normal, spec.test_anomaly),
    ] {
        let prefix = match split {
            Split::Train => "train",
            Split::Test => "test",
        };
        for i in 0..normal {
            out.push(VideoPlan {
                id: format!("{prefix}_n{i:03}"),
                label: Label::Normal,
                split,
                kind: None,
            });
        }
        for i in 0..anomaly {
            let kind = match spec.kind {
                AnomalyKind::Alternate if i % 2 == 0 => AnomalyKind::Scene,
                AnomalyKind::Alternate => AnomalyKind::Human,
                k => k,
            };
            out.push(VideoPlan {
                id: format!("{prefix}_a{i:03}"),
                label: Label::Anomaly,
                split,
                kind: Some(kind),
            });
        }
    }
    out
}

fn kind_name(kind: AnomalyKind) -> &'static str {
    match kind {
        AnomalyKind::Scene => "scene",
        AnomalyKind::Human => "human",
        AnomalyKind::Mixed => "mixed",
        AnomalyKind::Alternate => "alternate",
    }
}

pub struct SynthVideo {
    pub scene: [Tensor; 3],
    pub tracklets: Tensor,
    pub frame_labels: Vec<u8>,
    pub planted: Option<PlantedAnomaly>,
    /// The per-frame latents the scene maps were pooled from.
    pub latents: Tensor,
}

/// Mean-pools an N×n frame matrix over the `g·t` segment ranges.
pub fn pool_frames(latents: &Tensor, t: usize, g: usize) -> Tensor {
    let (n_frames, n) = (latents.shape()[0], latents.shape()[1]);
    let ranges = segment_boundaries(n_frames, t, g);
    let mut out = Tensor::zeros(&[ranges.len(), n]);
    for (i, r) in ranges.iter().enumerate() {
        let inv = 1.0 / r.len() as f64;
        for f in r.clone() {
            for c in 0..n {
                let v = out.get(&[i, c]) + latents.get(&[f, c]) * inv;
                out.set(&[i, c], v);
            }
        }
    }
    out
}

fn generate_video(
    spec: &SynthSpec,
    plan: &VideoPlan,
    dirs: (&[f64], &[f64]),
    rng: &mut ChaCha8Rng,
) -> SynthVideo {
    let (t, n, k) = (spec.segments, spec.channels, spec.tracklets);
    let frames = spec.frames();
    let noise = Normal::new(0.0, spec.noise.max(0.0)).expect("finite noise scale");
    let mut latents = Tensor::new(
        vec![frames, n],
        (0..frames * n).map(|_| noise.sample(rng)).collect(),
    )
    .expect("latent shape");
    let mut tracklets = Tensor::new(
        vec![t, k, n],
        (0..t * k * n).map(|_| noise.sample(rng)).collect(),
    )
    .expect("tracklet shape");
    let mut frame_labels = vec![0u8; frames];

    let planted = plan.kind.map(|kind| {
        let [lo, hi] = spec.duration;
        let frac = if hi > lo { rng.random_range(lo..=hi) } else { lo };
        let len = ((frac * t as f64).round() as usize).clamp(1, t);
        let start = rng.random_range(0..=t - len);
        let bounds = segment_boundaries(frames, t, 1);
        let frame_span = [bounds[start].start, bounds[start + len - 1].end];
        frame_labels[frame_span[0]..frame_span[1]].fill(1);

        let scene = matches!(kind, AnomalyKind::Scene | AnomalyKind::Mixed);
        let human = matches!(kind, AnomalyKind::Human | AnomalyKind::Mixed);
        if scene {
            for f in frame_span[0]..frame_span[1] {
                for c in 0..n {
                    let v = latents.get(&[f, c]) + spec.magnitude * dirs.0[c];
                    latents.set(&[f, c], v);
                }
            }
        }
        let tracklet = human.then(|| rng.random_range(0..k));
        if let Some(j) = tracklet {
            for s in start..start + len {
                for c in 0..n {
                    let v = tracklets.get(&[s, j, c]) + spec.magnitude * dirs.1[c];
                    tracklets.set(&[s, j, c], v);
                }
            }
        }
        PlantedAnomaly {
            id: plan.id.clone(),
            kind,
            segments: [start, start + len],
            frames: frame_span,
            tracklet,
        }
    });

    let scene = [1, 2, 3].map(|g| pool_frames(&latents, t, g));
    SynthVideo {
        scene,
        tracklets,
        frame_labels,
        planted,
        latents,
    }
}

/// Generates videos in memory, in manifest order, without touching disk.
pub fn synthesize_videos(spec: &SynthSpec) -> Result<(Vec<(VideoRecord, SynthVideo)>, GroundTruth)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let u_s = unit_vector(spec.channels, &mut rng, None);
    let u_h = unit_vector(spec.channels, &mut rng, Some(&u_s));
    let mut videos = Vec::new();
    let mut anomalies = Vec::new();
    for (i, p) in plan(spec).iter().enumerate() {
        let mut vrng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x9e37_79b9_7f4a_7c15u64.wrapping_mul(i as u64 + 1));
        let video = generate_video(spec, p, (&u_s, &u_h), &mut vrng);
        let record = VideoRecord {
            id: p.id.clone(),
            label: p.label,
            category: p.kind.map_or("normal", kind_name).to_string(),
            frames: spec.frames(),
            scene: [1, 2, 3].map(|g| format!("features/{}_g{g}.hsnf", p.id)),
            tracklets: format!("features/{}_tracklets.hsnf", p.id),
            annotations: Some(format!("annotations/{}.txt", p.id)),
            split: Some(p.split),
        };
        if let Some(a) = &video.planted {
            anomalies.push(a.clone());
        }
        videos.push((record, video));
    }
    let truth = GroundTruth {
        scene_direction: u_s,
        human_direction: u_h,
        anomalies,
    };
    Ok((videos, truth))
}

/// The dataset [`synthesize_dataset`] would write, built without touching
/// disk. Values are rounded through the spec's precision.
pub fn synthesize_in_memory(spec: &SynthSpec) -> Result<(Dataset, GroundTruth)> {
    let (videos, truth) = synthesize_videos(spec)?;
    let round = |t: Tensor| match spec.precision {
        Precision::F64 => t,
        Precision::F32 => t.map(|v| v as f32 as f64),
    };
    let videos = videos
        .into_iter()
        .map(|(r, v)| {
            Ok(VideoFeatures {
                id: r.id,
                label: r.label,
                category: r.category,
                frames: r.frames,
                split: r.split,
                scene: v.scene.map(round),
                tracklets: TrackletMap::new(round(v.tracklets))?,
                annotations: Some(v.frame_labels),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((
        Dataset {
            segments: spec.segments,
            channels: Some(spec.channels),
            videos,
        },
        truth,
    ))
}

/// Writes a synthetic dataset under `out`: `manifest.json`,
/// `ground_truth.json`, `features/` and `annotations/`.
pub fn synthesize_dataset(spec: &SynthSpec, out: &Path) -> Result<SynthOutput> {
    let (videos, truth) = synthesize_videos(spec)?;
    let features = out.join("features");
    let annotations = out.join("annotations");
    for dir in [out, features.as_path(), annotations.as_path()] {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut records = Vec::with_capacity(videos.len());
    for (record, video) in videos {
        for (g, map) in video.scene.iter().enumerate() {
            write_feature(&out.join(&record.scene[g]), map, spec.precision)?;
        }
        write_feature(&out.join(&record.tracklets), &video.tracklets, spec.precision)?;
        let ann = out.join(record.annotations.as_ref().expect("synthetic videos are annotated"));
        fs::write(&ann, format_annotations(&video.frame_labels)).map_err(|e| Error::io(&ann, e))?;
        records.push(record);
    }
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        segments: spec.segments,
        videos: records,
    };
    let manifest_path = out.join("manifest.json");
    fs::write(&manifest_path, manifest.to_json()).map_err(|e| Error::io(&manifest_path, e))?;
    let truth_path = out.join("ground_truth.json");
    let truth_json = serde_json::to_string_pretty(&truth).expect("ground truth serializes");
    fs::write(&truth_path, truth_json).map_err(|e| Error::io(&truth_path, e))?;
    Ok(SynthOutput {
        manifest_path,
        manifest,
        truth,
    })
}
