//! Scene branch: multi-granularity temporal pyramid, LSTM encoding and a
//! per-segment ranker.

use rand_chacha::ChaCha8Rng;

use crate::config::HyperParams;
use crate::diffkernel::{lstm_forward, Activation, Tape, Var};
use crate::error::{ensure, Result};
use crate::params::{Binding, Conv, Group, Linear, Lstm, ParamStore};

/// Kernel size and dilation of the two stacked downscaler convolutions.
pub const DOWNSCALER_LAYERS: [(usize, usize); 2] = [(5, 4), (3, 8)];

/// Two same-length dilated convolutions followed by adaptive mean pooling
/// to the target length.
#[derive(Clone, Debug)]
pub struct Downscaler {
    pub convs: [Conv; 2],
}

impl Downscaler {
    fn new(store: &mut ParamStore, name: &str, group: Group, c_in: usize, c_out: usize, rng: &mut ChaCha8Rng) -> Self {
        let [(k0, d0), (k1, d1)] = DOWNSCALER_LAYERS;
        Downscaler {
            convs: [
                Conv::new(store, &format!("{name}.conv0"), group, (c_in, c_out), k0, d0, Activation::Relu, rng),
                Conv::new(store, &format!("{name}.conv1"), group, (c_out, c_out), k1, d1, Activation::Relu, rng),
            ],
        }
    }

    pub fn forward(&self, tape: &mut Tape, bind: &Binding, x: Var, target_len: usize) -> Result<Var> {
        let len = tape.shape(x)[0];
        ensure!(
            target_len >= 1 && len > target_len,
            "temporal downscaler: cannot reduce {len} segments to {target_len}"
        );
        let h = self.convs[0].forward(tape, bind, x)?;
        let h = self.convs[1].forward(tape, bind, h)?;
        tape.adaptive_mean_pool(h, target_len)
    }
}

/// Three fully connected layers n_in→m→m→1; the last is a sigmoid unit.
#[derive(Clone, Debug)]
pub struct Ranker {
    pub layers: [Linear; 3],
}

impl Ranker {
    pub fn new(store: &mut ParamStore, name: &str, group: Group, c_in: usize, m: usize, rng: &mut ChaCha8Rng) -> Self {
        Ranker {
            layers: [
                Linear::new(store, &format!("{name}.fc0"), group, (c_in, m), Activation::Relu, rng),
                Linear::new(store, &format!("{name}.fc1"), group, (m, m), Activation::Relu, rng),
                Linear::new(store, &format!("{name}.fc2"), group, (m, 1), Activation::Sigmoid, rng),
            ],
        }
    }

    /// Scores each row of an R×n_in map. Returns (R×1 scores, R×m
    /// second-layer activations).
    pub fn forward(&self, tape: &mut Tape, bind: &Binding, x: Var) -> Result<(Var, Var)> {
        let h = self.layers[0].forward(tape, bind, x)?;
        let features = self.layers[1].forward(tape, bind, h)?;
        let score = self.layers[2].forward(tape, bind, features)?;
        Ok((score, features))
    }
}

#[derive(Clone, Debug)]
pub struct SceneNet {
    pub level1: Downscaler,
    pub level2: Downscaler,
    /// Pointwise projection of the 2T map.
    pub bottleneck2: Conv,
    /// Pointwise projection of the T map.
    pub bottleneck1: Conv,
    pub lstm: Lstm,
    pub ranker: Ranker,
}

impl SceneNet {
    pub fn new(store: &mut ParamStore, hp: &HyperParams, rng: &mut ChaCha8Rng) -> Self {
        let g = Group::Scene;
        let (n, nc) = (hp.channels, hp.conv_channels);
        SceneNet {
            level1: Downscaler::new(store, "scene.level1", g, n, nc, rng),
            level2: Downscaler::new(store, "scene.level2", g, 2 * nc, nc, rng),
            bottleneck2: Conv::new(store, "scene.bottleneck2", g, (n, nc), 1, 1, Activation::Relu, rng),
            bottleneck1: Conv::new(store, "scene.bottleneck1", g, (n, nc), 1, 1, Activation::Relu, rng),
            lstm: Lstm::new(store, "scene.lstm", g, (2 * nc, hp.hidden), rng),
            ranker: Ranker::new(store, "scene.ranker", g, hp.hidden, hp.ranker_width, rng),
        }
    }

    /// Builds the temporal pyramid from the T, 2T and 3T maps and encodes it
    /// with the LSTM, giving a T×n_h map.
    pub fn mgtm_forward(&self, tape: &mut Tape, bind: &Binding, maps: [Var; 3]) -> Result<Var> {
        let [f_t, f_2t, f_3t] = maps;
        let t = tape.shape(f_t)[0];
        let n = tape.shape(f_t)[1];
        for (g, &m) in maps.iter().enumerate() {
            let s = tape.shape(m);
            ensure!(
                s.len() == 2 && s[0] == (g + 1) * t && s[1] == n,
                "scene map at granularity {} has shape {:?}, expected {}×{n}",
                g + 1,
                s,
                (g + 1) * t
            );
        }
        let down = self.level1.forward(tape, bind, f_3t, 2 * t)?;
        let b2 = self.bottleneck2.forward(tape, bind, f_2t)?;
        let level1 = tape.concat(down, b2, 1)?;
        let down = self.level2.forward(tape, bind, level1, t)?;
        let b1 = self.bottleneck1.forward(tape, bind, f_t)?;
        let level2 = tape.concat(down, b1, 1)?;
        lstm_forward(tape, level2, &self.lstm.vars(bind))
    }

    /// Returns (D_Sc: T×1, F_S: T×m).
    pub fn rank(&self, tape: &mut Tape, bind: &Binding, encoded: Var) -> Result<(Var, Var)> {
        self.ranker.forward(tape, bind, encoded)
    }

    pub fn forward(&self, tape: &mut Tape, bind: &Binding, maps: [Var; 3]) -> Result<(Var, Var)> {
        let encoded = self.mgtm_forward(tape, bind, maps)?;
        self.rank(tape, bind, encoded)
    }
}
