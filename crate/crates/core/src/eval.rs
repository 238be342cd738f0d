//! Frame-level ROC AUC from segment scores, per-category breakdown and
//! stratified k-fold cross-validation.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::data::{segment_boundaries, Dataset, Label, Split, VideoFeatures};
use crate::error::{ensure, Error, Result};
use crate::loss::LossKind;
use crate::model::{Head, HsnModel};
use crate::train::train;

/// Piecewise-constant frame scores: frame f takes the score of the
/// segment whose range contains it.
pub fn expand_to_frames(scores: &[f64], n_frames: usize) -> Result<Vec<f64>> {
    ensure!(!scores.is_empty(), "no segment scores to expand");
    ensure!(n_frames >= 1, "video has no frames");
    let mut out = vec![0.0; n_frames];
    // Later segments win where short videos make ranges overlap.
    for (r, &s) in segment_boundaries(n_frames, scores.len(), 1).iter().zip(scores) {
        out[r.clone()].fill(s);
    }
    Ok(out)
}

/// Probability that a random positive outscores a random negative, ties
/// counting one half. Computed from midranks in O(n log n).
pub fn roc_auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    ensure!(
        scores.len() == labels.len(),
        "{} scores for {} labels",
        scores.len(),
        labels.len()
    );
    let pos = labels.iter().filter(|&&l| l != 0).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedMetric(format!(
            "AUC needs both classes, got {pos} positive and {neg} negative frames"
        )));
    }
    ensure!(scores.iter().all(|s| !s.is_nan()), "scores contain NaN");
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // Ranks i+1..=j+1 share their mean.
        let mid = (i + j + 2) as f64 / 2.0;
        rank_sum += mid * order[i..=j].iter().filter(|&&k| labels[k] != 0).count() as f64;
        i = j + 1;
    }
    let (p, n) = (pos as f64, neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub fold: usize,
    pub videos: usize,
    pub auc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KFoldReport {
    pub folds: Vec<FoldResult>,
    pub mean_auc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub auc: f64,
    /// Each anomaly category pooled with every normal video. Categories
    /// whose pooled frames hold a single class are left out.
    pub categories: BTreeMap<String, f64>,
    pub videos: usize,
    pub frames: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kfold: Option<KFoldReport>,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Frame scores and labels of one video.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameScores {
    pub id: String,
    pub label: Label,
    pub category: String,
    pub scores: Vec<f64>,
    pub labels: Vec<u8>,
}

pub fn frame_scores(model: &HsnModel, video: &VideoFeatures, head: Head) -> Result<FrameScores> {
    let labels = video
        .frame_labels()
        .ok_or_else(|| Error::invalid(format!("video {}: anomalous test video lacks frame annotations", video.id)))?;
    ensure!(
        labels.len() == video.frames,
        "video {}: {} annotations for {} frames",
        video.id,
        labels.len(),
        video.frames
    );
    let s = model.score(video)?;
    let segs = s.head(head);
    ensure!(!segs.is_empty(), "model variant does not produce the {head:?} score");
    Ok(FrameScores {
        id: video.id.clone(),
        label: video.label,
        category: video.category.clone(),
        scores: expand_to_frames(segs, video.frames)?,
        labels,
    })
}

/// Report over already-expanded per-video frame scores.
pub fn report(videos: &[FrameScores]) -> Result<EvalReport> {
    let pooled = |keep: &dyn Fn(&FrameScores) -> bool| {
        let mut s = Vec::new();
        let mut l = Vec::new();
        for v in videos.iter().filter(|v| keep(v)) {
            s.extend_from_slice(&v.scores);
            l.extend_from_slice(&v.labels);
        }
        (s, l)
    };
    let (s, l) = pooled(&|_| true);
    let auc = roc_auc(&s, &l)?;
    let mut categories = BTreeMap::new();
    let names: std::collections::BTreeSet<&str> = videos
        .iter()
        .filter(|v| v.label == Label::Anomaly)
        .map(|v| v.category.as_str())
        .collect();
    for name in names {
        let (s, l) = pooled(&|v| v.label == Label::Normal || v.category == name);
        match roc_auc(&s, &l) {
            Ok(a) => {
                categories.insert(name.to_string(), a);
            }
            Err(Error::UndefinedMetric(_)) => {}
            Err(e) => return Err(e),
        }
    }
    Ok(EvalReport {
        auc,
        categories,
        videos: videos.len(),
        frames: s.len(),
        kfold: None,
    })
}

/// Scores every video with the model's primary head.
pub fn score_videos(model: &HsnModel, videos: &[&VideoFeatures]) -> Result<Vec<FrameScores>> {
    let head = model.primary_head();
    videos.iter().map(|v| frame_scores(model, v, head)).collect()
}

/// Evaluates on the test videos of `data`.
pub fn evaluate(model: &HsnModel, data: &Dataset) -> Result<EvalReport> {
    report(&score_videos(model, &data.test_videos())?)
}

/// Assigns each video to one of `k` folds, stratified by label and
/// category. Within each stratum videos are shuffled with `seed` and dealt
/// round-robin, continuing the deal across strata so fold sizes stay
/// within one of each other.
pub fn fold_assignment(videos: &[&VideoFeatures], k: usize, seed: u64) -> Result<Vec<usize>> {
    ensure!(k >= 2, "k-fold needs k ≥ 2");
    for label in [Label::Normal, Label::Anomaly] {
        let count = videos.iter().filter(|v| v.label == label).count();
        ensure!(count >= k, "{k}-fold needs at least {k} {label:?} videos, found {count}");
    }
    let mut strata: BTreeMap<(u8, &str), Vec<usize>> = BTreeMap::new();
    for (i, v) in videos.iter().enumerate() {
        let label = u8::from(v.label == Label::Anomaly);
        strata.entry((label, v.category.as_str())).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut folds = vec![0; videos.len()];
    let mut next = 0;
    for members in strata.values_mut() {
        members.shuffle(&mut rng);
        for &i in members.iter() {
            folds[i] = next % k;
            next += 1;
        }
    }
    Ok(folds)
}

/// Trains a fresh copy of `template` on all but one fold and evaluates on
/// the held-out fold, for each fold. Uses every video of `data` regardless
/// of split markers.
pub fn kfold(template: &HsnModel, config: &TrainConfig, data: &Dataset, k: usize, seed: u64) -> Result<KFoldReport> {
    let videos: Vec<&VideoFeatures> = data.videos.iter().collect();
    let folds = fold_assignment(&videos, k, seed)?;
    let mut results = Vec::with_capacity(k);
    for fold in 0..k {
        let part = |held: bool| Dataset {
            segments: data.segments,
            channels: data.channels,
            videos: videos
                .iter()
                .zip(&folds)
                .filter(|(_, &f)| (f == fold) == held)
                .map(|(v, _)| VideoFeatures {
                    split: Some(if held { Split::Test } else { Split::Train }),
                    ..(*v).clone()
                })
                .collect(),
        };
        let (train_set, test_set) = (part(false), part(true));
        let mut model = template.clone();
        let fold_config = TrainConfig {
            seed: config.seed.wrapping_add(fold as u64),
            ..config.clone()
        };
        train(&mut model, &fold_config, &train_set)?;
        let r = evaluate(&model, &test_set)?;
        results.push(FoldResult {
            fold,
            videos: test_set.videos.len(),
            auc: r.auc,
        });
    }
    let mean_auc = results.iter().map(|f| f.auc).sum::<f64>() / k as f64;
    Ok(KFoldReport { folds: results, mean_auc })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossComparison {
    pub self_rectifying: f64,
    pub classical_ranking: f64,
    /// AUC(self-rectifying) − AUC(classical ranking).
    pub delta: f64,
}

/// Trains two copies of `template` that differ only in the loss. Both use
/// `config.seed`, so they see the same pair sequence.
pub fn compare_losses(template: &HsnModel, config: &TrainConfig, data: &Dataset) -> Result<LossComparison> {
    let mut auc = [0.0; 2];
    for (slot, loss) in [LossKind::SelfRectifying, LossKind::ClassicalRanking].into_iter().enumerate() {
        let mut model = template.clone();
        train(&mut model, &TrainConfig { loss, ..config.clone() }, data)?;
        auc[slot] = evaluate(&model, data)?.auc;
    }
    Ok(LossComparison {
        self_rectifying: auc[0],
        classical_ranking: auc[1],
        delta: auc[0] - auc[1],
    })
}
