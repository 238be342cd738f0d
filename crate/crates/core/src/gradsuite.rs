//! Named finite-difference checks over every primitive and the network
//! blocks built from them. Used by the `gradcheck` command and the tests.
//!
//! Inputs are drawn from fixed seeds at small extents (≤ 8) and kept away
//! from kinks: relu/abs arguments by 0.05, hinge and label boundaries by
//! more than 1e-3.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::HyperParams;
use crate::coupler::{fuse, Coupler};
use crate::diffkernel::{grad_check_with_fault, lstm_forward, LstmVars, OpKind, PoolMode, Tape, Tensor, Var};
use crate::diffkernel::{DEFAULT_EPS, TOLERANCE};
use crate::error::Result;
use crate::human::HumanNet;
use crate::loss::{context_loss, instance_loss, pseudo_labels};
use crate::params::{Binding, ParamStore};
use crate::scene::SceneNet;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckOutcome {
    pub name: String,
    pub max_rel_error: f64,
}

impl CheckOutcome {
    pub fn passed(&self) -> bool {
        self.max_rel_error < TOLERANCE
    }
}

/// Op names accepted by [`parse_op`], for corrupting one adjoint on purpose.
pub const OP_NAMES: [(&str, OpKind); 22] = [
    ("matmul", OpKind::MatMul),
    ("add_bias", OpKind::AddBias),
    ("add", OpKind::Add),
    ("sub", OpKind::Sub),
    ("mul", OpKind::Mul),
    ("scale", OpKind::Scale),
    ("offset", OpKind::Offset),
    ("relu", OpKind::Relu),
    ("sigmoid", OpKind::Sigmoid),
    ("tanh", OpKind::Tanh),
    ("abs", OpKind::Abs),
    ("square", OpKind::Square),
    ("conv1d", OpKind::Conv1d),
    ("pool", OpKind::Pool),
    ("concat", OpKind::Concat),
    ("stack", OpKind::Stack),
    ("reshape", OpKind::Reshape),
    ("slice", OpKind::Slice),
    ("sum", OpKind::Sum),
    ("mean", OpKind::Mean),
    ("adaptive_mean_pool", OpKind::AdaptiveMeanPool),
    ("expand_rows", OpKind::ExpandRows),
];

pub fn parse_op(name: &str) -> Option<OpKind> {
    OP_NAMES.iter().find(|(n, _)| *n == name).map(|&(_, k)| k)
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).expect("shape product")
}

fn off_kink(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    random(shape, rng).map(|v| if v.abs() < 0.05 { v + v.signum() * 0.05 } else { v })
}

/// Weighted sum so every output element carries a distinct adjoint.
fn weighted_sum(tape: &mut Tape, y: Var, salt: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(salt);
    let w = tape.constant(random(tape.shape(y), &mut rng));
    let p = tape.mul(y, w)?;
    Ok(tape.sum(p))
}

fn params(store: &ParamStore) -> Vec<Tensor> {
    store.entries().iter().map(|e| e.value.clone()).collect()
}

struct Suite {
    fault: Option<OpKind>,
    rng: ChaCha8Rng,
    out: Vec<CheckOutcome>,
}

impl Suite {
    /// Records the worst error under `name`, merging repeated names.
    fn check<F>(&mut self, name: &str, inputs: &[Tensor], build: F) -> Result<()>
    where
        F: Fn(&mut Tape, &[Var]) -> Result<Var>,
    {
        let err = grad_check_with_fault(inputs, DEFAULT_EPS, self.fault, build)?;
        match self.out.iter_mut().find(|c| c.name == name) {
            Some(c) => c.max_rel_error = c.max_rel_error.max(err),
            None => self.out.push(CheckOutcome {
                name: name.to_string(),
                max_rel_error: err,
            }),
        }
        Ok(())
    }

    fn rand(&mut self, shape: &[usize]) -> Tensor {
        random(shape, &mut self.rng)
    }

    fn primitives(&mut self) -> Result<()> {
        let a = self.rand(&[4, 3]);
        let b = self.rand(&[3, 5]);
        let c = self.rand(&[4, 3]);
        let k = off_kink(&[4, 3], &mut self.rng);
        let bias = self.rand(&[3]);

        self.check("matmul", &[a.clone(), b], |t, v| {
            let y = t.matmul(v[0], v[1])?;
            weighted_sum(t, y, 1)
        })?;
        self.check("add_bias", &[a.clone(), bias], |t, v| {
            let y = t.add_bias(v[0], v[1])?;
            weighted_sum(t, y, 2)
        })?;
        for (name, op) in [("add", 0), ("sub", 1), ("mul", 2)] {
            self.check(name, &[a.clone(), c.clone()], |t, v| {
                let y = match op {
                    0 => t.add(v[0], v[1])?,
                    1 => t.sub(v[0], v[1])?,
                    _ => t.mul(v[0], v[1])?,
                };
                weighted_sum(t, y, 3)
            })?;
        }
        for (name, op) in [
            ("scale", 0),
            ("offset", 1),
            ("relu", 2),
            ("sigmoid", 3),
            ("tanh", 4),
            ("abs", 5),
            ("square", 6),
        ] {
            self.check(name, std::slice::from_ref(&k), |t, v| {
                let y = match op {
                    0 => t.scale(v[0], -1.7),
                    1 => t.offset(v[0], 0.4),
                    2 => t.relu(v[0]),
                    3 => t.sigmoid(v[0]),
                    4 => t.tanh(v[0]),
                    5 => t.abs(v[0]),
                    _ => t.square(v[0]),
                };
                weighted_sum(t, y, 4)
            })?;
        }
        for (kernel, dilation) in [(5, 4), (3, 8), (1, 1), (4, 2)] {
            let inputs = [self.rand(&[8, 3]), self.rand(&[kernel, 3, 2]), self.rand(&[2])];
            self.check("conv1d", &inputs, |t, v| {
                let y = t.conv1d(v[0], v[1], v[2], dilation)?;
                weighted_sum(t, y, 5)
            })?;
        }
        let cube = self.rand(&[3, 4, 2]);
        for axis in 0..3 {
            for mode in [PoolMode::Max, PoolMode::Mean] {
                self.check("pool", std::slice::from_ref(&cube), |t, v| {
                    let y = t.pool(v[0], axis, mode)?;
                    weighted_sum(t, y, 6)
                })?;
            }
        }
        for axis in 0..2 {
            let other = if axis == 0 { self.rand(&[2, 3]) } else { self.rand(&[4, 2]) };
            self.check("concat", &[a.clone(), other], |t, v| {
                let y = t.concat(v[0], v[1], axis)?;
                weighted_sum(t, y, 7)
            })?;
        }
        for axis in 0..3 {
            self.check("stack", &[a.clone(), c.clone()], |t, v| {
                let y = t.stack(&[v[0], v[1], v[0]], axis)?;
                weighted_sum(t, y, 8)
            })?;
        }
        self.check("reshape", std::slice::from_ref(&cube), |t, v| {
            let y = t.reshape(v[0], &[6, 4])?;
            weighted_sum(t, y, 9)
        })?;
        for axis in 0..3 {
            self.check("slice", std::slice::from_ref(&cube), |t, v| {
                let y = t.slice(v[0], axis, 1, 1)?;
                weighted_sum(t, y, 10)
            })?;
        }
        self.check("sum", std::slice::from_ref(&a), |t, v| {
            let s = t.sum(v[0]);
            Ok(t.scale(s, 0.7))
        })?;
        self.check("mean", std::slice::from_ref(&a), |t, v| t.mean(v[0]))?;
        for (len, bins) in [(8, 5), (6, 4), (8, 2), (3, 3)] {
            let x = self.rand(&[len, 2]);
            self.check("adaptive_mean_pool", &[x], |t, v| {
                let y = t.adaptive_mean_pool(v[0], bins)?;
                weighted_sum(t, y, 11)
            })?;
        }
        let row = self.rand(&[1, 3]);
        self.check("expand_rows", &[row], |t, v| {
            let y = t.expand_rows(v[0], 5)?;
            weighted_sum(t, y, 12)
        })?;
        let lstm = [self.rand(&[3, 2]), self.rand(&[2, 12]), self.rand(&[3, 12]), self.rand(&[12])];
        self.check("lstm", &lstm, |t, v| {
            let w = LstmVars {
                w_x: v[1],
                w_h: v[2],
                b: v[3],
            };
            let y = lstm_forward(t, v[0], &w)?;
            weighted_sum(t, y, 13)
        })
    }

    fn composites(&mut self) -> Result<()> {
        let hp = HyperParams {
            segments: 3,
            channels: 2,
            conv_channels: 2,
            hidden: 2,
            selected: 2,
            ranker_width: 3,
            seed: 17,
        };

        let mut store = ParamStore::new();
        let scene = SceneNet::new(&mut store, &hp, &mut self.rng);
        let mut inputs: Vec<Tensor> = [1, 2, 3].iter().map(|g| self.rand(&[g * 3, 2])).collect();
        inputs.extend(params(&store));
        self.check("mgtm_forward", &inputs, |t, v| {
            let bind = Binding::from_vars(v[3..].to_vec());
            let y = scene.mgtm_forward(t, &bind, [v[0], v[1], v[2]])?;
            weighted_sum(t, y, 20)
        })?;
        self.check("scene_rank", &inputs, |t, v| {
            let bind = Binding::from_vars(v[3..].to_vec());
            let (d, f) = scene.forward(t, &bind, [v[0], v[1], v[2]])?;
            let sd = weighted_sum(t, d, 21)?;
            let sf = weighted_sum(t, f, 22)?;
            t.add(sd, sf)
        })?;

        let mut store = ParamStore::new();
        let human = HumanNet::new(&mut store, &hp, &mut self.rng);
        let mut inputs = vec![self.rand(&[3, 2, 2])];
        inputs.extend(params(&store));
        self.check("relation_model+tracklet_rank", &inputs, |t, v| {
            let bind = Binding::from_vars(v[1..].to_vec());
            let (d, f) = human.forward(t, &bind, v[0])?;
            let sd = weighted_sum(t, d, 23)?;
            let sf = weighted_sum(t, f, 24)?;
            t.add(sd, sf)
        })?;

        let mut store = ParamStore::new();
        let coupler = Coupler::new(&mut store, &hp, &mut self.rng);
        let mut inputs = vec![self.rand(&[4, 2, 3]), self.rand(&[4, 3])];
        inputs.extend(params(&store));
        self.check("segment_selection", &inputs, |t, v| {
            let bind = Binding::from_vars(v[2..].to_vec());
            let seg = coupler.segment_level(t, &bind, v[0], v[1])?;
            let a = weighted_sum(t, seg.human, 25)?;
            let b = weighted_sum(t, seg.scene, 26)?;
            t.add(a, b)
        })?;
        let mut inputs = vec![self.rand(&[4, 3]), self.rand(&[4, 3])];
        inputs.extend(params(&store));
        self.check("video_selection", &inputs, |t, v| {
            let bind = Binding::from_vars(v[2..].to_vec());
            let (a, b) = coupler.video_level(t, &bind, v[0], v[1])?;
            let a = weighted_sum(t, a, 27)?;
            let b = weighted_sum(t, b, 28)?;
            t.add(a, b)
        })?;

        let unit = |rng: &mut ChaCha8Rng| random(&[4, 1], rng).map(|v| 0.5 + 0.45 * v);
        let inputs = [
            unit(&mut self.rng),
            unit(&mut self.rng),
            random(&[1, 1], &mut self.rng).map(|v| 0.5 + 0.45 * v),
            random(&[1, 1], &mut self.rng).map(|v| 0.5 + 0.45 * v),
            unit(&mut self.rng),
            unit(&mut self.rng),
        ];
        self.check("fuse", &inputs, |t, v| {
            let f = fuse(t, (v[0], v[1]), Some((v[2], v[3])), v[4], v[5])?;
            let a = weighted_sum(t, f.score, 29)?;
            let b = weighted_sum(t, f.s_human, 30)?;
            t.add(a, b)
        })?;

        // Active hinge: 1 − ΣD_a + ΣD_n = 1 − 1.65 + 1.1 = 0.45.
        let d_a = Tensor::new(vec![4, 1], vec![0.2, 0.6, 0.35, 0.5]).expect("4×1");
        let d_n = Tensor::new(vec![4, 1], vec![0.3, 0.1, 0.45, 0.25]).expect("4×1");
        for normalize in [false, true] {
            self.check("context_loss", &[d_a.clone(), d_n.clone()], |t, v| {
                context_loss(t, v[0], v[1], 1.3, normalize)
            })?;
        }

        // D_ref = 0.4; no score within 1e-3 of it, and the two error terms
        // differ by far more than the step.
        let labels = pseudo_labels(d_a.data());
        self.check("instance_loss", &[d_a, d_n], |t, v| instance_loss(t, v[0], v[1], &labels, 0.8))
    }
}

/// Runs every check. `fault` corrupts the recorded adjoint of one primitive
/// kind on the analytic side only, so the affected checks must fail.
pub fn run(fault: Option<OpKind>) -> Result<Vec<CheckOutcome>> {
    let mut suite = Suite {
        fault,
        rng: ChaCha8Rng::seed_from_u64(2024),
        out: Vec::new(),
    };
    suite.primitives()?;
    suite.composites()?;
    Ok(suite.out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clean_build_passes_everything() {
        let results = run(None).unwrap();
        for r in &results {
            assert!(r.passed(), "{}: {}", r.name, r.max_rel_error);
        }
        for required in ["mgtm_forward", "fuse", "context_loss", "instance_loss", "video_selection"] {
            assert!(results.iter().any(|r| r.name == required), "{required}");
        }
    }

    #[test]
    fn corrupted_adjoint_fails_its_checks() {
        let results = run(parse_op("sigmoid")).unwrap();
        let failed: Vec<&str> = results.iter().filter(|r| !r.passed()).map(|r| r.name.as_str()).collect();
        assert!(failed.contains(&"sigmoid"), "{failed:?}");
        assert!(failed.contains(&"segment_selection"), "{failed:?}");
        assert!(!failed.contains(&"matmul"), "{failed:?}");
    }

    #[test]
    fn op_names_round_trip() {
        for (name, kind) in OP_NAMES {
            assert_eq!(parse_op(name), Some(kind));
        }
        assert_eq!(parse_op("leaf"), None);
    }
}
