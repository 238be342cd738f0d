//! Multiple-instance losses over a pair of bags: the scores of one
//! anomalous video (`d_a`) and one normal video (`d_n`).

use serde::{Deserialize, Serialize};

use crate::diffkernel::{PoolMode, Tape, Tensor, Var};
use crate::error::{ensure, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    /// Bag-level hinge plus pseudo-label instance term.
    #[default]
    SelfRectifying,
    /// Hinge on the top-scoring instance of each bag.
    ClassicalRanking,
}

impl LossKind {
    pub fn name(self) -> &'static str {
        match self {
            LossKind::SelfRectifying => "self-rectifying",
            LossKind::ClassicalRanking => "classical-ranking",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    /// Divide the bag sums of the hinge term by T.
    pub normalize_context: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda1: 1.0,
            lambda2: 1.0,
            normalize_context: false,
        }
    }
}

fn check_pair(tape: &Tape, d_a: Var, d_n: Var) -> Result<usize> {
    let (a, n) = (tape.shape(d_a), tape.shape(d_n));
    ensure!(a == n, "bag shapes differ: {a:?} vs {n:?}");
    let t = tape.value(d_a).numel();
    ensure!(t >= 1, "bags must hold at least one instance");
    Ok(t)
}

/// `λ1·max(0, 1 − ΣD_a + ΣD_n)`.
pub fn context_loss(tape: &mut Tape, d_a: Var, d_n: Var, lambda1: f64, normalize: bool) -> Result<Var> {
    let t = check_pair(tape, d_a, d_n)?;
    let gap = tape.sub(d_n, d_a)?;
    let mut gap = tape.sum(gap);
    if normalize {
        gap = tape.scale(gap, 1.0 / t as f64);
    }
    let margin = tape.offset(gap, 1.0);
    let hinge = tape.relu(margin);
    Ok(tape.scale(hinge, lambda1))
}

#[derive(Clone, Debug, PartialEq)]
pub struct PseudoLabels {
    pub d_ref: f64,
    /// 1 where the anomalous score is strictly above `d_ref`.
    pub anomaly: Vec<f64>,
    /// Always zero.
    pub normal: Vec<f64>,
}

/// Midpoint of the score range; instances strictly above it are labelled
/// anomalous.
pub fn pseudo_labels(d_a: &[f64]) -> PseudoLabels {
    let max = d_a.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = d_a.iter().copied().fold(f64::INFINITY, f64::min);
    let d_ref = (max + min) / 2.0;
    PseudoLabels {
        d_ref,
        anomaly: d_a.iter().map(|&v| if v > d_ref { 1.0 } else { 0.0 }).collect(),
        normal: vec![0.0; d_a.len()],
    }
}

/// `λ2·|mean(D_n²) − mean((D_a − P)²)|`. The labels enter as constants.
pub fn instance_loss(tape: &mut Tape, d_a: Var, d_n: Var, labels: &PseudoLabels, lambda2: f64) -> Result<Var> {
    let t = check_pair(tape, d_a, d_n)?;
    ensure!(
        labels.anomaly.len() == t && labels.normal.len() == t,
        "pseudo labels cover {} instances, bags have {t}",
        labels.anomaly.len()
    );
    let shape = tape.shape(d_a).to_vec();
    let p_a = tape.constant(Tensor::new(shape.clone(), labels.anomaly.clone())?);
    let p_n = tape.constant(Tensor::new(shape, labels.normal.clone())?);
    let en = tape.sub(d_n, p_n)?;
    let en = tape.square(en);
    let correct = tape.mean(en)?;
    let ea = tape.sub(d_a, p_a)?;
    let ea = tape.square(ea);
    let noisy = tape.mean(ea)?;
    let diff = tape.sub(correct, noisy)?;
    let diff = tape.abs(diff);
    Ok(tape.scale(diff, lambda2))
}

/// Context term plus instance term, with labels drawn from the current
/// anomalous scores.
pub fn self_rectifying_loss(tape: &mut Tape, d_a: Var, d_n: Var, w: &LossWeights) -> Result<Var> {
    let labels = pseudo_labels(tape.value(d_a).data());
    let lc = context_loss(tape, d_a, d_n, w.lambda1, w.normalize_context)?;
    let li = instance_loss(tape, d_a, d_n, &labels, w.lambda2)?;
    tape.add(lc, li)
}

/// `max(0, 1 − max D_a + max D_n)`.
pub fn classical_ranking_loss(tape: &mut Tape, d_a: Var, d_n: Var) -> Result<Var> {
    check_pair(tape, d_a, d_n)?;
    let top = |tape: &mut Tape, d: Var| -> Result<Var> {
        let t = tape.value(d).numel();
        let flat = tape.reshape(d, &[t])?;
        let m = tape.pool(flat, 0, PoolMode::Max)?;
        Ok(tape.sum(m))
    };
    let a = top(tape, d_a)?;
    let n = top(tape, d_n)?;
    let gap = tape.sub(n, a)?;
    let margin = tape.offset(gap, 1.0);
    Ok(tape.relu(margin))
}

pub fn bag_loss(tape: &mut Tape, kind: LossKind, d_a: Var, d_n: Var, w: &LossWeights) -> Result<Var> {
    match kind {
        LossKind::SelfRectifying => self_rectifying_loss(tape, d_a, d_n, w),
        LossKind::ClassicalRanking => classical_ranking_loss(tape, d_a, d_n),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffkernel::{grad_check, DEFAULT_EPS};
    use proptest::prelude::*;

    fn pair(tape: &mut Tape, a: &[f64], n: &[f64]) -> (Var, Var) {
        let a = tape.constant(Tensor::new(vec![a.len(), 1], a.to_vec()).unwrap());
        let n = tape.constant(Tensor::new(vec![n.len(), 1], n.to_vec()).unwrap());
        (a, n)
    }

    fn eval(f: impl FnOnce(&mut Tape, Var, Var) -> Result<Var>, a: &[f64], n: &[f64]) -> f64 {
        let mut tape = Tape::new();
        let (a, n) = pair(&mut tape, a, n);
        let l = f(&mut tape, a, n).unwrap();
        tape.value(l).item().unwrap()
    }

    fn lc(a: &[f64], n: &[f64]) -> f64 {
        eval(|t, a, n| context_loss(t, a, n, 1.0, false), a, n)
    }

    fn li(a: &[f64], n: &[f64], lambda2: f64) -> f64 {
        let labels = pseudo_labels(a);
        eval(|t, a, n| instance_loss(t, a, n, &labels, lambda2), a, n)
    }

    fn lsr(a: &[f64], n: &[f64]) -> f64 {
        eval(|t, a, n| self_rectifying_loss(t, a, n, &LossWeights::default()), a, n)
    }

    fn rank(a: &[f64], n: &[f64]) -> f64 {
        eval(classical_ranking_loss, a, n)
    }

    /// Direct scalar transcription used as an oracle.
    fn lsr_oracle(a: &[f64], n: &[f64]) -> f64 {
        let t = a.len() as f64;
        let lc = (1.0 - a.iter().sum::<f64>() + n.iter().sum::<f64>()).max(0.0);
        let max = a.iter().copied().fold(f64::MIN, f64::max);
        let min = a.iter().copied().fold(f64::MAX, f64::min);
        let r = (max + min) / 2.0;
        let correct = n.iter().map(|v| v * v).sum::<f64>() / t;
        let noisy = a.iter().map(|&v| (v - if v > r { 1.0 } else { 0.0 }).powi(2)).sum::<f64>() / t;
        lc + (correct - noisy).abs()
    }

    #[test]
    fn context_examples() {
        assert_eq!(lc(&[1.0, 1.0], &[0.0, 0.0]), 0.0);
        assert_eq!(lc(&[0.0, 0.0], &[0.0, 0.0]), 1.0);
        assert!((lc(&[0.5, 0.5], &[0.3, 0.2]) - 0.5).abs() <= 1e-12);
        let scaled = eval(|t, a, n| context_loss(t, a, n, 2.5, false), &[0.5, 0.5], &[0.3, 0.2]);
        assert!((scaled - 1.25).abs() <= 1e-12);
        let norm = eval(|t, a, n| context_loss(t, a, n, 1.0, true), &[0.5, 0.5], &[0.3, 0.2]);
        assert!((norm - 0.75).abs() <= 1e-12);
    }

    #[test]
    fn pseudo_label_examples() {
        let p = pseudo_labels(&[0.1, 0.9, 0.5]);
        assert!((p.d_ref - 0.5).abs() <= 1e-12);
        assert_eq!(p.anomaly, [0.0, 1.0, 0.0]);
        assert_eq!(p.normal, [0.0; 3]);
        let p = pseudo_labels(&[0.3, 0.3]);
        assert_eq!((p.d_ref, p.anomaly), (0.3, vec![0.0, 0.0]));
        let p = pseudo_labels(&[0.0, 1.0, 0.6, 0.4]);
        assert_eq!((p.d_ref, p.anomaly), (0.5, vec![0.0, 1.0, 1.0, 0.0]));
    }

    #[test]
    fn instance_examples() {
        assert_eq!(li(&[0.0, 1.0], &[0.0, 0.0], 1.0), 0.0);
        assert!((li(&[0.4, 0.8], &[0.2, 0.2], 1.0) - 0.06).abs() <= 1e-12);
        assert_eq!(li(&[0.4, 0.8], &[0.2, 0.2], 0.0), 0.0);
    }

    #[test]
    fn instance_rejects_foreign_labels() {
        let labels = pseudo_labels(&[0.1, 0.2, 0.3]);
        let mut tape = Tape::new();
        let (a, n) = pair(&mut tape, &[0.1, 0.2], &[0.0, 0.0]);
        assert!(instance_loss(&mut tape, a, n, &labels, 1.0).is_err());
        let (a, _) = pair(&mut tape, &[0.1, 0.2], &[]);
        let (_, n) = pair(&mut tape, &[], &[0.0, 0.0, 0.0]);
        assert!(context_loss(&mut tape, a, n, 1.0, false).is_err());
    }

    #[test]
    fn self_rectifying_examples() {
        assert_eq!(lsr(&[1.0, 0.0], &[0.0, 0.0]), 0.0);
        // A constant anomalous bag labels nothing: D_ref equals every score,
        // so the noisy error is mean((1 − 0)²) = 1 even with the hinge off.
        assert_eq!(lsr(&[1.0; 4], &[0.0; 4]), 1.0);
        // Hinge from one pair and instance term from the other.
        let composed = lc(&[0.4, 0.8], &[0.3, 0.2]) + li(&[0.4, 0.8], &[0.2, 0.2], 1.0);
        assert!((composed - 0.36).abs() <= 1e-12);
        // The same anomalous bag against D_n = [0.3, 0.2] end to end.
        assert!((lsr(&[0.4, 0.8], &[0.3, 0.2]) - 0.335).abs() <= 1e-12);
    }

    #[test]
    fn ranking_examples() {
        assert!((rank(&[0.1, 0.9], &[0.2, 0.05]) - 0.3).abs() <= 1e-12);
        assert_eq!(rank(&[1.0, 0.3], &[0.0, 0.0]), 0.0);
        assert_eq!(rank(&[0.4, 0.7], &[0.4, 0.7]), 1.0);
    }

    #[test]
    fn labels_are_constants() {
        // Away from the hinge the gradient of L_I with respect to D_a is
        // exactly 2(D_a − P)/T·sign, with no contribution from D_ref.
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::new(vec![3, 1], vec![0.2, 0.9, 0.7]).unwrap(), true);
        let n = tape.leaf(Tensor::new(vec![3, 1], vec![0.1, 0.1, 0.1]).unwrap(), true);
        let labels = pseudo_labels(&[0.2, 0.9, 0.7]);
        let l = instance_loss(&mut tape, a, n, &labels, 1.0).unwrap();
        let g = tape.backward(l).unwrap();
        // Err(Noisy) = (0.04+0.01+0.09)/3 > Err(Correct) = 0.01, so sign is −1 on
        // the correct term and +1 on the noisy one.
        let ga = g.get(a).unwrap().data();
        for (got, (v, p)) in ga.iter().zip([(0.2, 0.0), (0.9, 1.0), (0.7, 1.0)]) {
            assert!((got - 2.0 * (v - p) / 3.0).abs() < 1e-14);
        }
    }

    fn off_kink(a: &[f64], n: &[f64]) -> bool {
        let p = pseudo_labels(a);
        let t = a.len() as f64;
        let hinge = 1.0 - a.iter().sum::<f64>() + n.iter().sum::<f64>();
        let correct = n.iter().map(|v| v * v).sum::<f64>() / t;
        let noisy = a.iter().zip(&p.anomaly).map(|(v, l)| (v - l).powi(2)).sum::<f64>() / t;
        let spread = a.iter().copied().fold(f64::MIN, f64::max) - a.iter().copied().fold(f64::MAX, f64::min);
        hinge.abs() > 1e-3
            && (correct - noisy).abs() > 1e-3
            && spread > 1e-3
            && a.iter().all(|v| (v - p.d_ref).abs() > 1e-3)
    }

    proptest! {
        #[test]
        fn lsr_non_negative_and_matches_oracle(
            (a, n) in (1usize..9).prop_flat_map(|t| (
                prop::collection::vec(0.0f64..2.0, t),
                prop::collection::vec(0.0f64..2.0, t),
            ))
        ) {
            let v = lsr(&a, &n);
            prop_assert!(v >= 0.0);
            prop_assert!((v - lsr_oracle(&a, &n)).abs() < 1e-12);
        }

        #[test]
        fn separated_labels_hold_both_classes(a in prop::collection::vec(0.0f64..1.0, 2..9)) {
            let p = pseudo_labels(&a);
            let max = a.iter().copied().fold(f64::MIN, f64::max);
            let min = a.iter().copied().fold(f64::MAX, f64::min);
            if max > min {
                prop_assert!(p.anomaly.contains(&1.0) && p.anomaly.contains(&0.0));
            }
        }

        #[test]
        fn labels_survive_increasing_affine_maps(
            a in prop::collection::vec(0.0f64..1.0, 1..9),
            scale in 0.1f64..10.0,
            shift in -5.0f64..5.0,
        ) {
            let mapped: Vec<f64> = a.iter().map(|v| scale * v + shift).collect();
            let p = pseudo_labels(&a);
            let q = pseudo_labels(&mapped);
            // Exclude points that round onto the midpoint.
            if a.iter().all(|v| (v - p.d_ref).abs() > 1e-9) {
                prop_assert_eq!(p.anomaly, q.anomaly);
            }
        }

        #[test]
        fn zero_iff_hinge_inactive_and_errors_equal(
            (a, n) in (2usize..6).prop_flat_map(|t| (
                prop::collection::vec(prop::sample::select(vec![0.0, 0.25, 0.5, 0.75, 1.0]), t),
                prop::collection::vec(prop::sample::select(vec![0.0, 0.25, 0.5]), t),
            ))
        ) {
            let t = a.len() as f64;
            let hinge_off = 1.0 - a.iter().sum::<f64>() + n.iter().sum::<f64>() <= 0.0;
            let p = pseudo_labels(&a);
            let correct = n.iter().map(|v| v * v).sum::<f64>() / t;
            let noisy = a.iter().zip(&p.anomaly).map(|(v, l)| (v - l).powi(2)).sum::<f64>() / t;
            prop_assert_eq!(lsr(&a, &n) == 0.0, hinge_off && correct == noisy);
        }

        #[test]
        fn loss_gradients_match_finite_differences(
            (a, n) in (2usize..8).prop_flat_map(|t| (
                prop::collection::vec(0.0f64..1.0, t),
                prop::collection::vec(0.0f64..1.0, t),
            ))
        ) {
            prop_assume!(off_kink(&a, &n));
            let inputs = [
                Tensor::new(vec![a.len(), 1], a.clone()).unwrap(),
                Tensor::new(vec![n.len(), 1], n.clone()).unwrap(),
            ];
            let err = grad_check(&inputs, DEFAULT_EPS, |tape, v| {
                self_rectifying_loss(tape, v[0], v[1], &LossWeights::default())
            }).unwrap();
            prop_assert!(err < 1e-4, "{}", err);
            let top_gap = a.iter().copied().fold(f64::MIN, f64::max) - n.iter().copied().fold(f64::MIN, f64::max);
            prop_assume!((1.0 - top_gap).abs() > 1e-3);
            // The max must also be unique by a margin in both bags.
            let runner_up_gap = |d: &[f64]| {
                let mut s = d.to_vec();
                s.sort_by(|x, y| y.total_cmp(x));
                s[0] - s[1]
            };
            prop_assume!(runner_up_gap(&a) > 1e-3 && runner_up_gap(&n) > 1e-3);
            let err = grad_check(&inputs, DEFAULT_EPS, |tape, v| classical_ranking_loss(tape, v[0], v[1])).unwrap();
            prop_assert!(err < 1e-4, "{}", err);
        }
    }
}
