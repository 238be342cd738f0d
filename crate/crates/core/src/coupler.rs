//! Soft-selection coupler.
//!
//! Segment-level and video-level attention blocks each project the human
//! and scene intermediates through their own ReLU layer, concatenate, and
//! emit two independent sigmoid units. The selection factors are the
//! products of the two levels, and the final score is
//! `S_HsN·D_Tr + S_SsN·D_Sc`.

use rand_chacha::ChaCha8Rng;

use crate::config::HyperParams;
use crate::diffkernel::{Activation, PoolMode, Tape, Var};
use crate::error::{ensure, Result};
use crate::params::{Binding, Group, Linear, ParamStore};

#[derive(Clone, Debug)]
pub struct SelectionBlock {
    pub latent_human: Linear,
    pub latent_scene: Linear,
    pub head_human: Linear,
    pub head_scene: Linear,
}

impl SelectionBlock {
    fn new(store: &mut ParamStore, name: &str, m: usize, rng: &mut ChaCha8Rng) -> Self {
        let g = Group::Coupler;
        SelectionBlock {
            latent_human: Linear::new(store, &format!("{name}.latent_human"), g, (m, m), Activation::Relu, rng),
            latent_scene: Linear::new(store, &format!("{name}.latent_scene"), g, (m, m), Activation::Relu, rng),
            head_human: Linear::new(store, &format!("{name}.head_human"), g, (2 * m, 1), Activation::Sigmoid, rng),
            head_scene: Linear::new(store, &format!("{name}.head_scene"), g, (2 * m, 1), Activation::Sigmoid, rng),
        }
    }

    /// Row-wise attention for two L×m maps; returns (L×1, L×1).
    pub fn forward(&self, tape: &mut Tape, bind: &Binding, human: Var, scene: Var) -> Result<(Var, Var)> {
        ensure!(
            tape.shape(human) == tape.shape(scene),
            "selection inputs differ: {:?} vs {:?}",
            tape.shape(human),
            tape.shape(scene)
        );
        let h = self.latent_human.forward(tape, bind, human)?;
        let s = self.latent_scene.forward(tape, bind, scene)?;
        let joint = tape.concat(h, s, 1)?;
        let a_h = self.head_human.forward(tape, bind, joint)?;
        let a_s = self.head_scene.forward(tape, bind, joint)?;
        Ok((a_h, a_s))
    }
}

/// Output of the segment-level block.
#[derive(Clone, Copy, Debug)]
pub struct SegmentSelection {
    /// F_T max-pooled over tracklets, T×m.
    pub pooled_human: Var,
    pub human: Var,
    pub scene: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct Fused {
    pub s_human: Var,
    pub s_scene: Var,
    pub score: Var,
}

#[derive(Clone, Debug)]
pub struct Coupler {
    pub segment: SelectionBlock,
    pub video: SelectionBlock,
}

impl Coupler {
    pub fn new(store: &mut ParamStore, hp: &HyperParams, rng: &mut ChaCha8Rng) -> Self {
        Coupler {
            segment: SelectionBlock::new(store, "coupler.segment", hp.ranker_width, rng),
            video: SelectionBlock::new(store, "coupler.video", hp.ranker_width, rng),
        }
    }

    /// F_T: T×k^s×m, F_S: T×m → per-segment attentions.
    pub fn segment_level(&self, tape: &mut Tape, bind: &Binding, f_t: Var, f_s: Var) -> Result<SegmentSelection> {
        let (ts, ss) = (tape.shape(f_t).to_vec(), tape.shape(f_s).to_vec());
        ensure!(
            ts.len() == 3 && ss.len() == 2 && ts[0] == ss[0] && ts[2] == ss[1],
            "segment selection: F_T {:?} and F_S {:?} disagree",
            ts,
            ss
        );
        let pooled = tape.pool(f_t, 1, PoolMode::Max)?;
        let (human, scene) = self.segment.forward(tape, bind, pooled, f_s)?;
        Ok(SegmentSelection {
            pooled_human: pooled,
            human,
            scene,
        })
    }

    /// Mean-pools both T×m maps over time and returns two 1×1 attentions.
    pub fn video_level(&self, tape: &mut Tape, bind: &Binding, f_tm: Var, f_s: Var) -> Result<(Var, Var)> {
        ensure!(
            tape.shape(f_tm) == tape.shape(f_s) && tape.shape(f_s).len() == 2,
            "video selection: {:?} vs {:?}",
            tape.shape(f_tm),
            tape.shape(f_s)
        );
        let m = tape.shape(f_s)[1];
        let h = tape.pool(f_tm, 0, PoolMode::Mean)?;
        let h = tape.reshape(h, &[1, m])?;
        let s = tape.pool(f_s, 0, PoolMode::Mean)?;
        let s = tape.reshape(s, &[1, m])?;
        self.video.forward(tape, bind, h, s)
    }
}

/// Combines attentions and branch scores. With `video` absent the
/// video-level factors are taken as 1.
pub fn fuse(
    tape: &mut Tape,
    segment: (Var, Var),
    video: Option<(Var, Var)>,
    d_tr: Var,
    d_sc: Var,
) -> Result<Fused> {
    let t = tape.shape(segment.0)[0];
    for v in [segment.0, segment.1, d_tr, d_sc] {
        ensure!(tape.shape(v) == [t, 1], "fuse: expected {t}×1, got {:?}", tape.shape(v));
    }
    let (s_human, s_scene) = match video {
        Some((vh, vs)) => {
            let vh = tape.expand_rows(vh, t)?;
            let vs = tape.expand_rows(vs, t)?;
            (tape.mul(segment.0, vh)?, tape.mul(segment.1, vs)?)
        }
        None => segment,
    };
    let h = tape.mul(s_human, d_tr)?;
    let s = tape.mul(s_scene, d_sc)?;
    let score = tape.add(h, s)?;
    Ok(Fused {
        s_human,
        s_scene,
        score,
    })
}
