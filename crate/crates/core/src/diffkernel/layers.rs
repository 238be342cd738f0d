//! Composite building blocks assembled from tape primitives.

use serde::{Deserialize, Serialize};

use super::tape::{Tape, Var};
use crate::error::{ensure, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    None,
    Relu,
    Sigmoid,
    Tanh,
}

pub fn activate(tape: &mut Tape, x: Var, act: Activation) -> Var {
    match act {
        Activation::None => x,
        Activation::Relu => tape.relu(x),
        Activation::Sigmoid => tape.sigmoid(x),
        Activation::Tanh => tape.tanh(x),
    }
}

/// `act(x·W + b)` for an L×C_in input, C_in×C_out weight and C_out bias.
pub fn affine(tape: &mut Tape, x: Var, w: Var, b: Var, act: Activation) -> Result<Var> {
    let xw = tape.matmul(x, w)?;
    let y = tape.add_bias(xw, b)?;
    Ok(activate(tape, y, act))
}

/// Bound LSTM weights: input projection C×4n_h, recurrent projection
/// n_h×4n_h and bias 4n_h, gate blocks ordered input, forget, cell, output.
#[derive(Clone, Copy, Debug)]
pub struct LstmVars {
    pub w_x: Var,
    pub w_h: Var,
    pub b: Var,
}

impl LstmVars {
    fn hidden(&self, tape: &Tape) -> Result<usize> {
        let shape = tape.shape(self.w_h);
        ensure!(
            shape.len() == 2 && shape[1] == 4 * shape[0],
            "lstm: recurrent weight shape {:?} is not n_h×4n_h",
            shape
        );
        ensure!(
            tape.shape(self.b) == [shape[1]],
            "lstm: bias shape {:?}",
            tape.shape(self.b)
        );
        Ok(shape[0])
    }
}

/// Runs the recurrence over already projected inputs (each B×4n_h, bias
/// included) from zero initial hidden and cell states.
fn lstm_recur(tape: &mut Tape, projected: &[Var], w: &LstmVars, n_h: usize) -> Result<Vec<Var>> {
    let Some(&first) = projected.first() else {
        return Ok(Vec::new());
    };
    let batch = tape.shape(first)[0];
    let mut h: Option<Var> = None;
    let mut c: Option<Var> = None;
    let mut outputs = Vec::with_capacity(projected.len());
    for &z_x in projected {
        let z = match h {
            Some(h) => {
                let hw = tape.matmul(h, w.w_h)?;
                tape.add(z_x, hw)?
            }
            None => z_x,
        };
        let i = tape.slice(z, 1, 0, n_h)?;
        let f = tape.slice(z, 1, n_h, n_h)?;
        let g = tape.slice(z, 1, 2 * n_h, n_h)?;
        let o = tape.slice(z, 1, 3 * n_h, n_h)?;
        let i = tape.sigmoid(i);
        let f = tape.sigmoid(f);
        let g = tape.tanh(g);
        let o = tape.sigmoid(o);
        let ig = tape.mul(i, g)?;
        let c_next = match c {
            Some(c) => {
                let fc = tape.mul(f, c)?;
                tape.add(fc, ig)?
            }
            None => ig,
        };
        let tc = tape.tanh(c_next);
        let h_next = tape.mul(o, tc)?;
        debug_assert_eq!(tape.shape(h_next), [batch, n_h]);
        outputs.push(h_next);
        h = Some(h_next);
        c = Some(c_next);
    }
    Ok(outputs)
}

/// Many-to-many LSTM over an L×C sequence, returning the L×n_h hidden states.
pub fn lstm_forward(tape: &mut Tape, seq: Var, w: &LstmVars) -> Result<Var> {
    let n_h = w.hidden(tape)?;
    let shape = tape.shape(seq).to_vec();
    ensure!(shape.len() == 2 && shape[0] >= 1, "lstm: sequence shape {:?}", shape);
    let z = affine(tape, seq, w.w_x, w.b, Activation::None)?;
    let rows = (0..shape[0])
        .map(|t| tape.slice(z, 0, t, 1))
        .collect::<Result<Vec<_>>>()?;
    let hs = lstm_recur(tape, &rows, w, n_h)?;
    let stacked = tape.stack(&hs, 0)?;
    tape.reshape(stacked, &[shape[0], n_h])
}

/// Batched LSTM: `steps[j]` is the B×C input at step j for B independent
/// sequences sharing weights. Returns the B×n_h hidden state of every step.
pub fn lstm_batched(tape: &mut Tape, steps: &[Var], w: &LstmVars) -> Result<Vec<Var>> {
    let n_h = w.hidden(tape)?;
    let projected = steps
        .iter()
        .map(|&x| affine(tape, x, w.w_x, w.b, Activation::None))
        .collect::<Result<Vec<_>>>()?;
    lstm_recur(tape, &projected, w, n_h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffkernel::tape::sigmoid;
    use crate::diffkernel::tensor::Tensor;

    fn lstm_vars(tape: &mut Tape, c: usize, n_h: usize, fill: impl Fn(usize) -> f64) -> LstmVars {
        let mk = |shape: &[usize], off: usize| {
            let n: usize = shape.iter().product();
            Tensor::new(shape.to_vec(), (0..n).map(|i| fill(i + off)).collect()).unwrap()
        };
        let w_x = tape.leaf(mk(&[c, 4 * n_h], 0), true);
        let w_h = tape.leaf(mk(&[n_h, 4 * n_h], 100), true);
        let b = tape.leaf(mk(&[4 * n_h], 200), true);
        LstmVars { w_x, w_h, b }
    }

    #[test]
    fn affine_sigmoid_of_zero_input_is_half() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[2, 3]));
        let w = tape.constant(Tensor::full(&[3, 4], 0.7));
        let b = tape.constant(Tensor::zeros(&[4]));
        let y = affine(&mut tape, x, w, b, Activation::Sigmoid).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn affine_identity_weight_returns_input() {
        let mut tape = Tape::new();
        let xt = Tensor::from_rows(&[vec![1.0, -2.0, 3.5], vec![0.25, 4.0, -1.0]]).unwrap();
        let x = tape.constant(xt.clone());
        let w = tape.constant(Tensor::identity(3));
        let b = tape.constant(Tensor::zeros(&[3]));
        let y = affine(&mut tape, x, w, b, Activation::None).unwrap();
        assert_eq!(tape.value(y), &xt);
    }

    #[test]
    fn affine_relu_arithmetic() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap());
        let w = tape.constant(Tensor::from_rows(&[vec![1.0], vec![1.0]]).unwrap());
        let b = tape.constant(Tensor::vector(&[0.5]));
        let y = affine(&mut tape, x, w, b, Activation::Relu).unwrap();
        assert_eq!(tape.value(y).data(), &[3.5]);
    }

    #[test]
    fn affine_rejects_inner_mismatch() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[2, 3]));
        let w = tape.constant(Tensor::zeros(&[2, 4]));
        let b = tape.constant(Tensor::zeros(&[4]));
        assert!(affine(&mut tape, x, w, b, Activation::None).is_err());
    }

    #[test]
    fn lstm_zero_params_emit_zeros() {
        let mut tape = Tape::new();
        let seq = tape.constant(Tensor::full(&[7, 4], 0.3));
        let w = lstm_vars(&mut tape, 4, 5, |_| 0.0);
        let h = lstm_forward(&mut tape, seq, &w).unwrap();
        assert_eq!(tape.shape(h), [7, 5]);
        assert!(tape.value(h).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn lstm_single_step_matches_hand_unrolled() {
        // One input channel, one hidden unit, distinct gate weights.
        let wx = [0.5, -0.3, 0.8, 0.2];
        let bias = [0.1, 0.2, -0.1, 0.05];
        let x = 0.7;
        let mut tape = Tape::new();
        let seq = tape.constant(Tensor::from_rows(&[vec![x]]).unwrap());
        let w = LstmVars {
            w_x: tape.leaf(Tensor::new(vec![1, 4], wx.to_vec()).unwrap(), true),
            w_h: tape.leaf(Tensor::new(vec![1, 4], vec![0.9, 0.9, 0.9, 0.9]).unwrap(), true),
            b: tape.leaf(Tensor::vector(&bias), true),
        };
        let h = lstm_forward(&mut tape, seq, &w).unwrap();

        let z: Vec<f64> = (0..4).map(|j| x * wx[j] + bias[j]).collect();
        let c1 = sigmoid(z[0]) * z[2].tanh();
        let h1 = sigmoid(z[3]) * c1.tanh();
        assert!((tape.value(h).data()[0] - h1).abs() < 1e-15);
    }

    #[test]
    fn lstm_two_steps_match_hand_unrolled() {
        let wx = [0.5, -0.3, 0.8, 0.2];
        let wh = [0.4, 0.6, -0.7, 0.3];
        let xs = [0.7, -1.2];
        let mut tape = Tape::new();
        let seq = tape.constant(Tensor::new(vec![2, 1], xs.to_vec()).unwrap());
        let w = LstmVars {
            w_x: tape.leaf(Tensor::new(vec![1, 4], wx.to_vec()).unwrap(), true),
            w_h: tape.leaf(Tensor::new(vec![1, 4], wh.to_vec()).unwrap(), true),
            b: tape.leaf(Tensor::zeros(&[4]), true),
        };
        let out = lstm_forward(&mut tape, seq, &w).unwrap();

        let (mut h, mut c) = (0.0, 0.0);
        let mut expect = Vec::new();
        for &x in &xs {
            let z: Vec<f64> = (0..4).map(|j| x * wx[j] + h * wh[j]).collect();
            c = sigmoid(z[1]) * c + sigmoid(z[0]) * z[2].tanh();
            h = sigmoid(z[3]) * c.tanh();
            expect.push(h);
        }
        for (a, e) in tape.value(out).data().iter().zip(&expect) {
            assert!((a - e).abs() < 1e-15);
        }
    }

    #[test]
    fn batched_lstm_matches_per_sequence_runs() {
        let fill = |i: usize| ((i * 37 % 11) as f64 - 5.0) / 10.0;
        let rows = [vec![0.1, -0.4, 0.3], vec![0.9, 0.2, -0.5]];
        let mut tape = Tape::new();
        let w = lstm_vars(&mut tape, 3, 2, fill);
        let step0 = tape.constant(Tensor::from_rows(&rows).unwrap());
        let step1 = tape.constant(Tensor::from_rows(&[rows[1].clone(), rows[0].clone()]).unwrap());
        let batched = lstm_batched(&mut tape, &[step0, step1], &w).unwrap();
        let last = tape.value(batched[1]).clone();

        for (b, order) in [(0, [0, 1]), (1, [1, 0])] {
            let seq = tape.constant(
                Tensor::from_rows(&[rows[order[0]].clone(), rows[order[1]].clone()]).unwrap(),
            );
            let single = lstm_forward(&mut tape, seq, &w).unwrap();
            let v = tape.value(single);
            for j in 0..2 {
                assert!((v.get(&[1, j]) - last.get(&[b, j])).abs() < 1e-14);
            }
        }
    }
}
