//! Human branch: feature-magnitude tracklet selection, relation LSTM across
//! the selected tracklets, and a per-tracklet ranker max-pooled per segment.

use rand_chacha::ChaCha8Rng;

use crate::config::HyperParams;
use crate::diffkernel::{lstm_batched, PoolMode, Tape, Tensor, Var};
use crate::error::{ensure, Error, Result};
use crate::params::{Binding, Group, Lstm, ParamStore};
use crate::scene::Ranker;

/// Sum over segments of each tracklet's per-segment L2 norm, for a T×k×n map.
pub fn feature_magnitude(map: &Tensor) -> Result<Vec<f64>> {
    let [t, k, n] = *map.shape() else {
        return Err(Error::invalid(format!("tracklet map must be T×k×n, got {:?}", map.shape())));
    };
    let d = map.data();
    Ok((0..k)
        .map(|j| {
            (0..t)
                .map(|i| {
                    let off = (i * k + j) * n;
                    d[off..off + n].iter().map(|v| v * v).sum::<f64>().sqrt()
                })
                .sum()
        })
        .collect())
}

/// Tracklets kept by [`select_tracklets`], in ascending magnitude order.
#[derive(Clone, Debug, PartialEq)]
pub struct Selection {
    /// T×k^s×n.
    pub features: Tensor,
    /// Original index of each kept slot; `None` for zero padding.
    pub source: Vec<Option<usize>>,
    pub magnitudes: Vec<f64>,
}

/// Keeps the `keep` largest-magnitude tracklets of the whole video and
/// orders them by ascending magnitude, ties by original index. Missing
/// tracklets are zero pads, which sort first.
pub fn select_tracklets(map: &Tensor, keep: usize) -> Result<Selection> {
    ensure!(keep >= 1, "must keep at least one tracklet");
    let fm = feature_magnitude(map)?;
    let [t, k, n] = *map.shape() else { unreachable!() };
    let mut order: Vec<usize> = (0..k).collect();
    // Largest first, smaller index first on ties.
    order.sort_by(|&a, &b| fm[b].total_cmp(&fm[a]).then(a.cmp(&b)));
    order.truncate(keep);
    order.sort_by(|&a, &b| fm[a].total_cmp(&fm[b]).then(a.cmp(&b)));

    let pads = keep.saturating_sub(order.len());
    let mut source: Vec<Option<usize>> = vec![None; pads];
    source.extend(order.iter().map(|&j| Some(j)));
    let magnitudes = source.iter().map(|s| s.map_or(0.0, |j| fm[j])).collect();

    let mut features = Tensor::zeros(&[t, keep, n]);
    let src = map.data();
    let dst = features.data_mut();
    for i in 0..t {
        for (slot, s) in source.iter().enumerate() {
            if let Some(j) = *s {
                let from = (i * k + j) * n;
                let to = (i * keep + slot) * n;
                dst[to..to + n].copy_from_slice(&src[from..from + n]);
            }
        }
    }
    Ok(Selection {
        features,
        source,
        magnitudes,
    })
}

#[derive(Clone, Debug)]
pub struct HumanNet {
    pub lstm: Lstm,
    pub ranker: Ranker,
}

impl HumanNet {
    pub fn new(store: &mut ParamStore, hp: &HyperParams, rng: &mut ChaCha8Rng) -> Self {
        let g = Group::Human;
        HumanNet {
            lstm: Lstm::new(store, "human.lstm", g, (hp.channels, hp.hidden), rng),
            ranker: Ranker::new(store, "human.ranker", g, hp.hidden, hp.ranker_width, rng),
        }
    }

    /// Runs the shared LSTM along the tracklet axis of every segment,
    /// T×k^s×n → T×k^s×n_h. No state is carried between segments.
    pub fn relation_model(&self, tape: &mut Tape, bind: &Binding, selected: Var) -> Result<Var> {
        let [t, ks, n] = *tape.shape(selected) else {
            return Err(Error::invalid(format!(
                "selected tracklets must be T×k^s×n, got {:?}",
                tape.shape(selected)
            )));
        };
        ensure!(ks >= 1, "relation model needs at least one tracklet slot");
        let steps = (0..ks)
            .map(|j| {
                let s = tape.slice(selected, 1, j, 1)?;
                tape.reshape(s, &[t, n])
            })
            .collect::<Result<Vec<_>>>()?;
        let hidden = lstm_batched(tape, &steps, &self.lstm.vars(bind))?;
        tape.stack(&hidden, 1)
    }

    /// Scores every (segment, tracklet) and max-pools over tracklets.
    /// Returns (D_Tr: T×1, F_T: T×k^s×m).
    pub fn rank(&self, tape: &mut Tape, bind: &Binding, relations: Var) -> Result<(Var, Var)> {
        let [t, ks, nh] = *tape.shape(relations) else {
            return Err(Error::invalid("relation features must be T×k^s×n_h"));
        };
        let flat = tape.reshape(relations, &[t * ks, nh])?;
        let (scores, feats) = self.ranker.forward(tape, bind, flat)?;
        let m = tape.shape(feats)[1];
        let scores = tape.reshape(scores, &[t, ks])?;
        let d_tr = tape.pool(scores, 1, PoolMode::Max)?;
        let d_tr = tape.reshape(d_tr, &[t, 1])?;
        let f_t = tape.reshape(feats, &[t, ks, m])?;
        Ok((d_tr, f_t))
    }

    pub fn forward(&self, tape: &mut Tape, bind: &Binding, selected: Var) -> Result<(Var, Var)> {
        let rel = self.relation_model(tape, bind, selected)?;
        self.rank(tape, bind, rel)
    }
}
