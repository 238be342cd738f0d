//! The assembled network: scene branch, human branch and coupler over one
//! parameter store.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{ArchConfig, HyperParams, Variant};
use crate::coupler::{fuse, Coupler};
use crate::data::VideoFeatures;
use crate::diffkernel::{Tape, Tensor, Var};
use crate::error::{ensure, Result};
use crate::human::{select_tracklets, HumanNet};
use crate::params::{Binding, Group, ParamStore};
use crate::scene::SceneNet;

/// Which score a computation is for.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Head {
    /// D_Sc.
    Scene,
    /// D_Tr.
    Human,
    /// D = S_HsN·D_Tr + S_SsN·D_Sc.
    Coupled,
}

impl Head {
    pub fn primary(variant: Variant) -> Head {
        match variant {
            Variant::Full => Head::Coupled,
            Variant::SceneOnly => Head::Scene,
            Variant::HumanOnly => Head::Human,
        }
    }
}

/// Tape variables produced by one forward pass. Entries a head does not
/// need are left out.
#[derive(Clone, Copy, Debug, Default)]
pub struct Forward {
    pub d_sc: Option<Var>,
    pub d_tr: Option<Var>,
    pub s_human: Option<Var>,
    pub s_scene: Option<Var>,
    pub d: Option<Var>,
}

impl Forward {
    pub fn head(&self, head: Head) -> Var {
        match head {
            Head::Scene => self.d_sc,
            Head::Human => self.d_tr,
            Head::Coupled => self.d,
        }
        .expect("forward pass computed the requested head")
    }
}

/// Per-segment scores of one video as plain numbers.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoScores {
    pub d_sc: Vec<f64>,
    pub d_tr: Vec<f64>,
    /// Empty unless the coupled head was computed.
    pub s_human: Vec<f64>,
    pub s_scene: Vec<f64>,
    pub d: Vec<f64>,
}

impl VideoScores {
    pub fn head(&self, head: Head) -> &[f64] {
        match head {
            Head::Scene => &self.d_sc,
            Head::Human => &self.d_tr,
            Head::Coupled => &self.d,
        }
    }
}

#[derive(Clone, Debug)]
pub struct HsnModel {
    pub hyper: HyperParams,
    pub arch: ArchConfig,
    pub store: ParamStore,
    pub scene: SceneNet,
    pub human: HumanNet,
    pub coupler: Coupler,
}

impl HsnModel {
    /// Initialises every parameter from `hyper.seed`, whatever the variant,
    /// so that checkpoints always carry the full set.
    pub fn new(hyper: HyperParams, arch: ArchConfig) -> Result<Self> {
        hyper.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed);
        let mut store = ParamStore::new();
        let scene = SceneNet::new(&mut store, &hyper, &mut rng);
        let human = HumanNet::new(&mut store, &hyper, &mut rng);
        let coupler = Coupler::new(&mut store, &hyper, &mut rng);
        Ok(HsnModel {
            hyper,
            arch,
            store,
            scene,
            human,
            coupler,
        })
    }

    pub fn primary_head(&self) -> Head {
        Head::primary(self.arch.variant)
    }

    pub fn check_video(&self, video: &VideoFeatures) -> Result<()> {
        let (t, n) = (self.hyper.segments, self.hyper.channels);
        for (g, map) in video.scene.iter().enumerate() {
            ensure!(
                map.shape() == [(g + 1) * t, n],
                "video {}: scene map G={} is {:?}, model expects {}×{n}",
                video.id,
                g + 1,
                map.shape(),
                (g + 1) * t
            );
        }
        let tr = video.tracklets.features.shape();
        ensure!(
            tr[0] == t && tr[2] == n,
            "video {}: tracklet map is {:?}, model expects {t}×k×{n}",
            video.id,
            tr
        );
        Ok(())
    }

    pub fn bind(&self, tape: &mut Tape, trainable: &[Group]) -> Binding {
        self.store.bind(tape, trainable)
    }

    /// Records the computation for `head` on `tape`.
    pub fn forward(&self, tape: &mut Tape, bind: &Binding, video: &VideoFeatures, head: Head) -> Result<Forward> {
        self.check_video(video)?;
        let mut out = Forward::default();
        if matches!(head, Head::Scene | Head::Coupled) {
            let maps = [0, 1, 2].map(|g| tape.constant(video.scene[g].clone()));
            let (d_sc, f_s) = self.scene.forward(tape, bind, maps)?;
            out.d_sc = Some(d_sc);
            if head == Head::Scene {
                return Ok(out);
            }
            let (d_tr, f_t) = self.human_forward(tape, bind, video)?;
            return self.couple(tape, bind, [d_sc, f_s, d_tr, f_t]);
        }
        out.d_tr = Some(self.human_forward(tape, bind, video)?.0);
        Ok(out)
    }

    /// Coupler on top of branch outputs `[D_Sc, F_S, D_Tr, F_T]`.
    pub fn couple(&self, tape: &mut Tape, bind: &Binding, branches: [Var; 4]) -> Result<Forward> {
        let [d_sc, f_s, d_tr, f_t] = branches;
        let seg = self.coupler.segment_level(tape, bind, f_t, f_s)?;
        let vid = if self.arch.video_level_selection {
            Some(self.coupler.video_level(tape, bind, seg.pooled_human, f_s)?)
        } else {
            None
        };
        let fused = fuse(tape, (seg.human, seg.scene), vid, d_tr, d_sc)?;
        Ok(Forward {
            d_sc: Some(d_sc),
            d_tr: Some(d_tr),
            s_human: Some(fused.s_human),
            s_scene: Some(fused.s_scene),
            d: Some(fused.score),
        })
    }

    /// Values of `[D_Sc, F_S, D_Tr, F_T]` for one video. With both branches
    /// frozen these are constants, so coupler training can reuse them.
    pub fn branch_outputs(&self, video: &VideoFeatures) -> Result<[Tensor; 4]> {
        self.check_video(video)?;
        let mut tape = Tape::new();
        let bind = self.bind(&mut tape, &[]);
        let maps = [0, 1, 2].map(|g| tape.constant(video.scene[g].clone()));
        let (d_sc, f_s) = self.scene.forward(&mut tape, &bind, maps)?;
        let (d_tr, f_t) = self.human_forward(&mut tape, &bind, video)?;
        Ok([d_sc, f_s, d_tr, f_t].map(|v| tape.value(v).clone()))
    }

    fn human_forward(&self, tape: &mut Tape, bind: &Binding, video: &VideoFeatures) -> Result<(Var, Var)> {
        let sel = select_tracklets(&video.tracklets.features, self.hyper.selected)?;
        let x = tape.constant(sel.features);
        self.human.forward(tape, bind, x)
    }

    /// Inference: every score the variant defines, as plain vectors.
    pub fn score(&self, video: &VideoFeatures) -> Result<VideoScores> {
        let mut tape = Tape::new();
        let bind = self.bind(&mut tape, &[]);
        let f = self.forward(&mut tape, &bind, video, self.primary_head())?;
        let read = |v: Option<Var>| v.map_or_else(Vec::new, |v| tape.value(v).data().to_vec());
        Ok(VideoScores {
            d_sc: read(f.d_sc),
            d_tr: read(f.d_tr),
            s_human: read(f.s_human),
            s_scene: read(f.s_scene),
            d: read(f.d),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synthesize_in_memory, AnomalyKind, SynthSpec};
    use crate::test_util::desk_hyper;

    fn videos(kind: AnomalyKind) -> Vec<VideoFeatures> {
        let spec = SynthSpec {
            normal: 1,
            anomaly: 1,
            test_normal: 0,
            test_anomaly: 0,
            ..SynthSpec::desk(kind, 3)
        };
        synthesize_in_memory(&spec).unwrap().0.videos
    }

    #[test]
    fn full_scores_are_bounded_and_consistent() {
        let model = HsnModel::new(desk_hyper(), ArchConfig::default()).unwrap();
        for v in videos(AnomalyKind::Mixed) {
            let s = model.score(&v).unwrap();
            assert_eq!(s.d.len(), 8);
            for i in 0..8 {
                assert!(s.s_human[i] > 0.0 && s.s_human[i] < 1.0);
                assert!(s.s_scene[i] > 0.0 && s.s_scene[i] < 1.0);
                assert!((0.0..=2.0).contains(&s.d[i]));
                let d = s.s_human[i] * s.d_tr[i] + s.s_scene[i] * s.d_sc[i];
                assert!((d - s.d[i]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn single_branch_variants_skip_the_other_branch() {
        let v = &videos(AnomalyKind::Scene)[0];
        let full = HsnModel::new(desk_hyper(), ArchConfig::default()).unwrap().score(v).unwrap();
        for (variant, head) in [(Variant::SceneOnly, Head::Scene), (Variant::HumanOnly, Head::Human)] {
            let arch = ArchConfig { variant, ..ArchConfig::default() };
            let model = HsnModel::new(desk_hyper(), arch).unwrap();
            let s = model.score(v).unwrap();
            assert!(s.d.is_empty() && s.s_human.is_empty());
            assert_eq!(s.head(head), full.head(head));
            assert!(s.head(if head == Head::Scene { Head::Human } else { Head::Scene }).is_empty());
        }
    }

    #[test]
    fn init_is_seeded() {
        let a = HsnModel::new(desk_hyper(), ArchConfig::default()).unwrap();
        let b = HsnModel::new(desk_hyper(), ArchConfig::default()).unwrap();
        assert_eq!(a.store, b.store);
        let c = HsnModel::new(HyperParams { seed: 1, ..desk_hyper() }, ArchConfig::default()).unwrap();
        assert_ne!(a.store, c.store);
    }

    #[test]
    fn wrong_video_shape_is_rejected() {
        let mut v = videos(AnomalyKind::Scene).remove(0);
        let model = HsnModel::new(HyperParams { channels: 8, ..desk_hyper() }, ArchConfig::default()).unwrap();
        let err = model.score(&v).unwrap_err().to_string();
        assert!(err.contains(&v.id), "{err}");
        v.scene[1] = crate::diffkernel::Tensor::zeros(&[17, 16]);
        let model = HsnModel::new(desk_hyper(), ArchConfig::default()).unwrap();
        assert!(model.score(&v).is_err());
    }

    #[test]
    fn video_without_tracklets_still_scores() {
        let mut v = videos(AnomalyKind::Scene).remove(0);
        v.tracklets = crate::data::TrackletMap::new(crate::diffkernel::Tensor::zeros(&[8, 0, 16])).unwrap();
        let model = HsnModel::new(desk_hyper(), ArchConfig::default()).unwrap();
        let s = model.score(&v).unwrap();
        assert!(s.d_tr.iter().all(|&x| x == s.d_tr[0]));
    }

    #[test]
    fn sls_only_mode_uses_segment_attention() {
        let v = &videos(AnomalyKind::Mixed)[1];
        let arch = ArchConfig {
            video_level_selection: false,
            ..ArchConfig::default()
        };
        let model = HsnModel::new(desk_hyper(), arch).unwrap();
        let s = model.score(v).unwrap();
        // Recompute the segment heads directly.
        let mut tape = Tape::new();
        let bind = model.bind(&mut tape, &[]);
        let maps = [0, 1, 2].map(|g| tape.constant(v.scene[g].clone()));
        let (_, f_s) = model.scene.forward(&mut tape, &bind, maps).unwrap();
        let (_, f_t) = model.human_forward(&mut tape, &bind, v).unwrap();
        let seg = model.coupler.segment_level(&mut tape, &bind, f_t, f_s).unwrap();
        assert_eq!(tape.value(seg.human).data(), &s.s_human[..]);
        assert_eq!(tape.value(seg.scene).data(), &s.s_scene[..]);
    }

    #[test]
    fn cached_branches_reproduce_the_coupled_score() {
        let v = &videos(AnomalyKind::Mixed)[1];
        let model = HsnModel::new(desk_hyper(), ArchConfig::default()).unwrap();
        let direct = model.score(v).unwrap();
        let cached = model.branch_outputs(v).unwrap();
        let mut tape = Tape::new();
        let bind = model.bind(&mut tape, &[]);
        let vars = cached.map(|t| tape.constant(t));
        let f = model.couple(&mut tape, &bind, vars).unwrap();
        assert_eq!(tape.value(f.head(Head::Coupled)).data(), &direct.d[..]);
    }
}
