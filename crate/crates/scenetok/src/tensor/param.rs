//! Named parameter store: deterministic init, freezing, checkpoint access.

use super::Tensor;
use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::cell::RefCell;
use std::collections::BTreeMap;
use std::rc::Rc;

/// Weight initialization schemes. All draws come from the store's seeded RNG,
/// in parameter creation order, so a fixed seed fixes every weight.
#[derive(Clone, Copy, Debug)]
pub enum Init {
    Zeros,
    Ones,
    Const(f64),
    /// Uniform in [-a, a].
    Uniform(f64),
    /// Kaiming-style uniform for a given fan-in.
    KaimingFanIn(usize),
    Normal(f64),
}

struct StoreInner {
    params: BTreeMap<String, Tensor>,
    rng: ChaCha8Rng,
}

/// Shared registry of trainable tensors, keyed by hierarchical dotted names.
#[derive(Clone)]
pub struct ParamStore {
    inner: Rc<RefCell<StoreInner>>,
    prefix: String,
}

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        ParamStore {
            inner: Rc::new(RefCell::new(StoreInner {
                params: BTreeMap::new(),
                rng: ChaCha8Rng::seed_from_u64(seed),
            })),
            prefix: String::new(),
        }
    }

    /// Child scope: names created through it get `name.` prepended.
    pub fn scope(&self, name: &str) -> ParamStore {
        let prefix = if self.prefix.is_empty() {
            format!("{name}.")
        } else {
            format!("{}{name}.", self.prefix)
        };
        ParamStore {
            inner: Rc::clone(&self.inner),
            prefix,
        }
    }

    /// Create (or fetch) a parameter. Re-requesting an existing name returns
    /// the same tensor; the shape must match.
    pub fn param(&self, name: &str, shape: &[usize], init: Init) -> Tensor {
        let full = format!("{}{name}", self.prefix);
        let mut inner = self.inner.borrow_mut();
        if let Some(existing) = inner.params.get(&full) {
            assert_eq!(existing.shape(), shape, "param {full} re-registered with new shape");
            return existing.clone();
        }
        let n: usize = shape.iter().product();
        let data: Vec<f64> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Const(c) => vec![c; n],
            Init::Uniform(a) => (0..n).map(|_| inner.rng.gen_range(-a..=a)).collect(),
            Init::KaimingFanIn(fan_in) => {
                let bound = (1.0 / fan_in.max(1) as f64).sqrt();
                (0..n).map(|_| inner.rng.gen_range(-bound..=bound)).collect()
            }
            Init::Normal(std) => (0..n)
                .map(|_| {
                    // Box-Muller from two uniforms; deterministic under the seed.
                    let u1: f64 = inner.rng.gen_range(f64::MIN_POSITIVE..1.0);
                    let u2: f64 = inner.rng.gen_range(0.0..1.0);
                    std * (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
                })
                .collect(),
        };
        let t = Tensor::new(
            ArrayD::from_shape_vec(IxDyn(shape), data).expect("param shape"),
            true,
        );
        inner.params.insert(full, t.clone());
        t
    }

    /// All parameters in sorted-name order.
    pub fn named_params(&self) -> Vec<(String, Tensor)> {
        self.inner
            .borrow()
            .params
            .iter()
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect()
    }

    pub fn get(&self, full_name: &str) -> Option<Tensor> {
        self.inner.borrow().params.get(full_name).cloned()
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn n_scalars(&self) -> usize {
        self.inner.borrow().params.values().map(|t| t.len()).sum()
    }

    pub fn zero_grads(&self) {
        for (_, p) in self.named_params() {
            p.zero_grad();
        }
    }

    /// Overwrite a parameter's value (checkpoint load, test fixtures).
    pub fn set(&self, full_name: &str, value: ArrayD<f64>) {
        let t = self
            .get(full_name)
            .unwrap_or_else(|| panic!("unknown param {full_name}"));
        t.set_value(value);
    }
}
