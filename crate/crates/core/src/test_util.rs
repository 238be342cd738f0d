use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::config::HyperParams;
use crate::diffkernel::{Tensor, Var};
use crate::params::{Binding, Group, ParamStore};

pub fn desk_hyper() -> HyperParams {
    HyperParams {
        selected: 2,
        ..HyperParams::desk(8, 16)
    }
}

/// Entries drawn from U(-1, 1).
pub fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

pub fn zero_group(store: &mut ParamStore, group: Group) {
    let ids: Vec<_> = store.ids().filter(|&id| store.entry(id).group == group).collect();
    for id in ids {
        store.get_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
}

pub fn binding_from(vars: &[Var]) -> Binding {
    Binding::from_vars(vars.to_vec())
}
