//! Named parameter tensors and the layer descriptors that index into them.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffkernel::{affine, Activation, LstmVars, Tape, Tensor, Var};
use crate::error::Result;

/// Which network component owns a parameter; the unit of freezing.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Group {
    Scene,
    Human,
    Coupler,
}

impl Group {
    pub const ALL: [Group; 3] = [Group::Scene, Group::Human, Group::Coupler];
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub group: Group,
    pub value: Tensor,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, group: Group, value: Tensor) -> ParamId {
        self.entries.push(ParamEntry {
            name: name.into(),
            group,
            value,
        });
        ParamId(self.entries.len() - 1)
    }

    /// Uniform in ±1/√fan_in.
    pub fn add_uniform(
        &mut self,
        name: impl Into<String>,
        group: Group,
        shape: &[usize],
        fan_in: usize,
        rng: &mut ChaCha8Rng,
    ) -> ParamId {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
        let value = Tensor::new(shape.to_vec(), data).expect("shape product");
        self.add(name, group, value)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    /// Records every parameter on `tape`; only members of `trainable`
    /// receive gradients.
    pub fn bind(&self, tape: &mut Tape, trainable: &[Group]) -> Binding {
        let vars = self
            .entries
            .iter()
            .map(|e| tape.leaf(e.value.clone(), trainable.contains(&e.group)))
            .collect();
        Binding { vars }
    }

    pub fn zero_like(&self) -> ParamStore {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry {
                    name: e.name.clone(),
                    group: e.group,
                    value: Tensor::zeros(e.value.shape()),
                })
                .collect(),
        }
    }
}

/// Tape variables for every parameter of a store, indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct Binding {
    vars: Vec<Var>,
}

impl Binding {
    /// Wraps variables already on a tape, in store order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Binding { vars }
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, Var)> + '_ {
        self.vars.iter().enumerate().map(|(i, &v)| (ParamId(i), v))
    }
}

/// Fully connected layer.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub act: Activation,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        group: Group,
        (c_in, c_out): (usize, usize),
        act: Activation,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Linear {
            w: store.add_uniform(format!("{name}.weight"), group, &[c_in, c_out], c_in, rng),
            b: store.add_uniform(format!("{name}.bias"), group, &[c_out], c_in, rng),
            act,
        }
    }

    pub fn forward(&self, tape: &mut Tape, bind: &Binding, x: Var) -> Result<Var> {
        affine(tape, x, bind.var(self.w), bind.var(self.b), self.act)
    }
}

/// Same-length dilated temporal convolution followed by an activation.
#[derive(Clone, Copy, Debug)]
pub struct Conv {
    pub w: ParamId,
    pub b: ParamId,
    pub dilation: usize,
    pub act: Activation,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        group: Group,
        (c_in, c_out): (usize, usize),
        kernel: usize,
        dilation: usize,
        act: Activation,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let fan_in = kernel * c_in;
        Conv {
            w: store.add_uniform(format!("{name}.weight"), group, &[kernel, c_in, c_out], fan_in, rng),
            b: store.add_uniform(format!("{name}.bias"), group, &[c_out], fan_in, rng),
            dilation,
            act,
        }
    }

    pub fn forward(&self, tape: &mut Tape, bind: &Binding, x: Var) -> Result<Var> {
        let y = tape.conv1d(x, bind.var(self.w), bind.var(self.b), self.dilation)?;
        Ok(crate::diffkernel::activate(tape, y, self.act))
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Lstm {
    pub w_x: ParamId,
    pub w_h: ParamId,
    pub b: ParamId,
}

impl Lstm {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        group: Group,
        (c_in, n_h): (usize, usize),
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let fan_in = c_in + n_h;
        Lstm {
            w_x: store.add_uniform(format!("{name}.w_x"), group, &[c_in, 4 * n_h], fan_in, rng),
            w_h: store.add_uniform(format!("{name}.w_h"), group, &[n_h, 4 * n_h], fan_in, rng),
            b: store.add_uniform(format!("{name}.bias"), group, &[4 * n_h], fan_in, rng),
        }
    }

    pub fn vars(&self, bind: &Binding) -> LstmVars {
        LstmVars {
            w_x: bind.var(self.w_x),
            w_h: bind.var(self.w_h),
            b: bind.var(self.b),
        }
    }
}
