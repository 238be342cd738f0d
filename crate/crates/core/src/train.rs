//! Bag-pair training with Adam.
//!
//! The staged schedule fits the scene branch on D_Sc, then the human branch
//! on D_Tr, then the coupler on D with both branches frozen. The joint
//! schedule fits every group of the variant on its primary score at once.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{Schedule, TrainConfig, Variant};
use crate::data::{Dataset, Label, VideoFeatures};
use crate::diffkernel::{Tape, Tensor, Var};
use crate::error::{ensure, Result};
use crate::loss::{bag_loss, LossWeights};
use crate::model::{Head, HsnModel};
use crate::params::{Group, ParamStore};

const ADAM_EPS: f64 = 1e-8;

/// Adam with bias correction over a whole [`ParamStore`]; frozen entries
/// keep zero moments and are never touched.
#[derive(Clone, Debug)]
pub struct Adam {
    pub learning_rate: f64,
    pub betas: (f64, f64),
    m: ParamStore,
    v: ParamStore,
    step: i32,
}

impl Adam {
    pub fn new(store: &ParamStore, learning_rate: f64, betas: (f64, f64)) -> Self {
        Adam {
            learning_rate,
            betas,
            m: store.zero_like(),
            v: store.zero_like(),
            step: 0,
        }
    }

    /// Applies one update from `grads`, indexed like the store; `None`
    /// marks a frozen parameter.
    pub fn update(&mut self, store: &mut ParamStore, grads: &[Option<&Tensor>]) {
        self.step += 1;
        let (b1, b2) = self.betas;
        let c1 = 1.0 - b1.powi(self.step);
        let c2 = 1.0 - b2.powi(self.step);
        let ids: Vec<_> = store.ids().collect();
        for (id, g) in ids.into_iter().zip(grads) {
            let Some(g) = g else { continue };
            let m = self.m.get_mut(id).data_mut();
            let v = self.v.get_mut(id).data_mut();
            let p = store.get_mut(id).data_mut();
            for i in 0..p.len() {
                let gi = g.data()[i];
                m[i] = b1 * m[i] + (1.0 - b1) * gi;
                v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                p[i] -= self.learning_rate * m_hat / (v_hat.sqrt() + ADAM_EPS);
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PhaseKind {
    Scene,
    Human,
    Coupler,
    Joint,
}

/// One stretch of training on a fixed head and trainable set.
#[derive(Clone, Debug, PartialEq)]
pub struct Phase {
    pub kind: PhaseKind,
    pub head: Head,
    pub groups: Vec<Group>,
    pub steps: usize,
}

/// Splits `config.steps` into phases for the given variant.
pub fn plan_phases(config: &TrainConfig, variant: Variant) -> Vec<Phase> {
    let total = config.steps;
    let single = |kind, head, groups: &[Group]| {
        vec![Phase {
            kind,
            head,
            groups: groups.to_vec(),
            steps: total,
        }]
    };
    match (variant, config.schedule) {
        (Variant::SceneOnly, Schedule::Staged) => single(PhaseKind::Scene, Head::Scene, &[Group::Scene]),
        (Variant::HumanOnly, Schedule::Staged) => single(PhaseKind::Human, Head::Human, &[Group::Human]),
        (Variant::SceneOnly, Schedule::Joint) => single(PhaseKind::Joint, Head::Scene, &[Group::Scene]),
        (Variant::HumanOnly, Schedule::Joint) => single(PhaseKind::Joint, Head::Human, &[Group::Human]),
        (Variant::Full, Schedule::Joint) => single(PhaseKind::Joint, Head::Coupled, &Group::ALL),
        (Variant::Full, Schedule::Staged) => {
            let third = total / 3;
            let kinds = [
                (PhaseKind::Scene, Head::Scene, Group::Scene, third),
                (PhaseKind::Human, Head::Human, Group::Human, third),
                (PhaseKind::Coupler, Head::Coupled, Group::Coupler, total - 2 * third),
            ];
            kinds
                .into_iter()
                .map(|(kind, head, g, steps)| Phase {
                    kind,
                    head,
                    groups: vec![g],
                    steps,
                })
                .collect()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    /// Global step index, from 0.
    pub step: usize,
    pub phase: PhaseKind,
    pub loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseBoundary {
    pub phase: PhaseKind,
    pub start: usize,
    pub steps: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainTrace {
    pub phases: Vec<PhaseBoundary>,
    pub steps: Vec<StepRecord>,
}

impl TrainTrace {
    pub fn losses(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.loss).collect()
    }
}

fn weights(config: &TrainConfig) -> LossWeights {
    LossWeights {
        lambda1: config.lambda1,
        lambda2: config.lambda2,
        normalize_context: config.normalize_context,
    }
}

/// Where the scores of one video come from during a step.
enum Source<'a> {
    Video(&'a VideoFeatures),
    /// Frozen branch outputs `[D_Sc, F_S, D_Tr, F_T]`.
    Cached(&'a [Tensor; 4]),
}

fn scores(model: &HsnModel, tape: &mut Tape, bind: &crate::params::Binding, src: &Source, head: Head) -> Result<Var> {
    let f = match src {
        Source::Video(v) => model.forward(tape, bind, v, head)?,
        Source::Cached(c) => {
            let vars = [0, 1, 2, 3].map(|i| tape.constant(c[i].clone()));
            model.couple(tape, bind, vars)?
        }
    };
    Ok(f.head(head))
}

fn step_on(
    model: &mut HsnModel,
    adam: &mut Adam,
    pairs: &[(Source, Source)],
    head: Head,
    groups: &[Group],
    config: &TrainConfig,
) -> Result<f64> {
    let mut tape = Tape::new();
    let bind = model.bind(&mut tape, groups);
    let w = weights(config);
    let mut total: Option<Var> = None;
    for (a, n) in pairs {
        let d_a = scores(model, &mut tape, &bind, a, head)?;
        let d_n = scores(model, &mut tape, &bind, n, head)?;
        let l = bag_loss(&mut tape, config.loss, d_a, d_n, &w)?;
        total = Some(match total {
            Some(t) => tape.add(t, l)?,
            None => l,
        });
    }
    let total = total.expect("at least one pair");
    let loss = tape.scale(total, 1.0 / pairs.len() as f64);
    let value = tape.value(loss).item().expect("scalar loss");
    let grads = tape.backward(loss)?;
    let per_param: Vec<Option<&Tensor>> = bind
        .iter()
        .map(|(id, var)| {
            if groups.contains(&model.store.entry(id).group) {
                grads.get(var)
            } else {
                None
            }
        })
        .collect();
    adam.update(&mut model.store, &per_param);
    Ok(value)
}

/// One update on a single (anomaly, normal) pair. Returns the loss before
/// the update.
pub fn train_step(
    model: &mut HsnModel,
    adam: &mut Adam,
    anomaly: &VideoFeatures,
    normal: &VideoFeatures,
    head: Head,
    groups: &[Group],
    config: &TrainConfig,
) -> Result<f64> {
    step_on(model, adam, &[(Source::Video(anomaly), Source::Video(normal))], head, groups, config)
}

/// Trains `model` on the training videos of `data`.
pub fn train(model: &mut HsnModel, config: &TrainConfig, data: &Dataset) -> Result<TrainTrace> {
    config.validate()?;
    let videos = data.train_videos();
    let anomalies: Vec<&VideoFeatures> = videos.iter().copied().filter(|v| v.label == Label::Anomaly).collect();
    let normals: Vec<&VideoFeatures> = videos.iter().copied().filter(|v| v.label == Label::Normal).collect();
    ensure!(
        !anomalies.is_empty() && !normals.is_empty(),
        "training needs at least one anomalous and one normal video (have {} and {})",
        anomalies.len(),
        normals.len()
    );
    for v in &videos {
        model.check_video(v)?;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut trace = TrainTrace::default();
    let mut global = 0;
    for phase in plan_phases(config, model.arch.variant) {
        log::info!("phase {:?}: {} steps from step {global}", phase.kind, phase.steps);
        trace.phases.push(PhaseBoundary {
            phase: phase.kind,
            start: global,
            steps: phase.steps,
        });
        let mut adam = Adam::new(&model.store, config.learning_rate, config.betas);
        // Frozen branches make the coupler inputs constant per video.
        let cache: Option<(Vec<[Tensor; 4]>, Vec<[Tensor; 4]>)> = if phase.kind == PhaseKind::Coupler {
            let outputs = |vs: &[&VideoFeatures]| vs.iter().map(|v| model.branch_outputs(v)).collect::<Result<Vec<_>>>();
            Some((outputs(&anomalies)?, outputs(&normals)?))
        } else {
            None
        };
        for _ in 0..phase.steps {
            let picks: Vec<(usize, usize)> = (0..config.batch)
                .map(|_| (rng.random_range(0..anomalies.len()), rng.random_range(0..normals.len())))
                .collect();
            let pairs: Vec<(Source, Source)> = picks
                .iter()
                .map(|&(a, n)| match &cache {
                    Some((ca, cn)) => (Source::Cached(&ca[a]), Source::Cached(&cn[n])),
                    None => (Source::Video(anomalies[a]), Source::Video(normals[n])),
                })
                .collect();
            let loss = step_on(model, &mut adam, &pairs, phase.head, &phase.groups, config)?;
            log::debug!("step {global} loss {loss:.6}");
            trace.steps.push(StepRecord {
                step: global,
                phase: phase.kind,
                loss,
            });
            global += 1;
        }
    }
    Ok(trace)
}
