use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::tensor::Tensor;

static NEXT_PARAM_ID: AtomicU64 = AtomicU64::new(1);

fn fresh_id() -> u64 {
    NEXT_PARAM_ID.fetch_add(1, Ordering::Relaxed)
}

/// A trainable tensor with a process-unique identity.
///
/// The value sits behind an `Arc` so graphs can borrow it without copying;
/// the optimizer mutates it through [`Param::value_mut`] once no graph holds it.
pub struct Param {
    id: u64,
    value: Arc<Tensor>,
}

impl Clone for Param {
    fn clone(&self) -> Self {
        Self {
            id: fresh_id(),
            value: self.value.clone(),
        }
    }
}

impl std::fmt::Debug for Param {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Param")
            .field("id", &self.id)
            .field("shape", &self.value.shape())
            .finish()
    }
}

impl Param {
    pub fn new(value: Tensor) -> Self {
        Self {
            id: fresh_id(),
            value: Arc::new(value),
        }
    }

    /// He-normal initialization: `N(0, gain² / fan_in)`.
    pub fn kaiming<R: Rng + ?Sized>(
        shape: &[usize],
        fan_in: usize,
        gain: f64,
        rng: &mut R,
    ) -> Self {
        let std = gain / (fan_in as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("finite std");
        Self::new(Tensor::from_fn(shape, |_| normal.sample(rng)))
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::new(Tensor::zeros(shape))
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub(crate) fn shared(&self) -> Arc<Tensor> {
        self.value.clone()
    }

    pub fn value_mut(&mut self) -> &mut Tensor {
        Arc::make_mut(&mut self.value)
    }

    pub fn set(&mut self, value: Tensor) {
        assert_eq!(
            value.shape(),
            self.value.shape(),
            "parameter shape cannot change on assignment"
        );
        self.value = Arc::new(value);
    }
}

/// Kaiming gain for a leaky-ReLU with the given negative slope.
pub fn leaky_relu_gain(slope: f64) -> f64 {
    (2.0 / (1.0 + slope * slope)).sqrt()
}

/// Visitor access to the named parameters of a model.
pub trait Module {
    fn visit(&self, f: &mut dyn FnMut(&str, &Param));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Param));

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, p| n += p.value().numel());
        n
    }

    fn param_ids(&self) -> Vec<u64> {
        let mut ids = Vec::new();
        self.visit(&mut |_, p| ids.push(p.id()));
        ids
    }
}

/// Prefixes parameter names when a module nests another.
pub fn scoped(prefix: &str, name: &str) -> String {
    format!("{prefix}.{name}")
}
