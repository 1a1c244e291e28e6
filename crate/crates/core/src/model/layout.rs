use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::config::INIT_STD;
use crate::error::Result;
use crate::rng::stream_rng;
use crate::tensor::{ParamId, ParamStore, Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    /// Truncated normal N(0, 0.02²), cut at ±2σ.
    Normal,
    Zeros,
    Ones,
}

/// Name, shape and initializer of one parameter array.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    pub fn weight(name: String, shape: Vec<usize>) -> Self {
        ParamSpec { name, shape, init: Init::Normal }
    }

    pub fn bias(name: String, len: usize) -> Self {
        ParamSpec { name, shape: vec![len], init: Init::Zeros }
    }

    pub fn gain(name: String, len: usize) -> Self {
        ParamSpec { name, shape: vec![len], init: Init::Ones }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Draws the initial value of a parameter. Each parameter has its own random
/// stream keyed by `(seed, name)`, so values do not depend on build order.
pub fn init_value<T: Scalar>(spec: &ParamSpec, seed: u64) -> Tensor<T> {
    match spec.init {
        Init::Zeros => Tensor::zeros(spec.shape.clone()),
        Init::Ones => Tensor::full(spec.shape.clone(), T::one()),
        Init::Normal => {
            let mut rng = stream_rng(seed, &spec.name, 0);
            let data = (0..spec.numel())
                .map(|_| T::lit(truncated_normal(&mut rng, INIT_STD)))
                .collect();
            Tensor::new(spec.shape.clone(), data).expect("spec shape")
        }
    }
}

fn truncated_normal(rng: &mut impl Rng, std: f64) -> f64 {
    let normal = Normal::new(0.0, std).expect("positive std");
    loop {
        let x = normal.sample(rng);
        if x.abs() <= 2.0 * std {
            return x;
        }
    }
}

/// Registers every spec in `store`, initialized from `seed`.
pub fn register<T: Scalar>(store: &mut ParamStore<T>, specs: &[ParamSpec], seed: u64) -> Result<Vec<ParamId>> {
    specs
        .iter()
        .map(|s| store.add(s.name.clone(), init_value(s, seed), s.init == Init::Normal))
        .collect()
}

/// Re-draws the given parameters in place from `seed`.
pub fn init_parameters<T: Scalar>(store: &mut ParamStore<T>, specs: &[ParamSpec], seed: u64) {
    for spec in specs {
        if let Some(id) = store.id(&spec.name) {
            *store.get_mut(id) = init_value(spec, seed);
        }
    }
}

/// Looks a registered name up; layouts and registration come from the same
/// spec list so a miss is a programming error.
pub(crate) fn lookup<T: Scalar>(store: &ParamStore<T>, name: &str) -> ParamId {
    store
        .id(name)
        .unwrap_or_else(|| panic!("parameter `{name}` was not registered"))
}
