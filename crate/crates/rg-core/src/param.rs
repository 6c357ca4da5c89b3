//! Trainable parameters and named parameter groups.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tensor::{Real, Tensor};

/// A tensor with a gradient accumulator.
#[derive(Debug, Clone)]
pub struct Parameter {
    pub value: Tensor,
    pub grad: Tensor,
    pub trainable: bool,
}

impl Parameter {
    pub fn new(value: Tensor) -> Self {
        let grad = Tensor::zeros(value.shape());
        Self {
            value,
            grad,
            trainable: true,
        }
    }

    pub fn frozen(value: Tensor) -> Self {
        let mut p = Self::new(value);
        p.trainable = false;
        p
    }

    pub fn zero_grad(&mut self) {
        self.grad.data_mut().fill(0.0);
    }
}

/// A named, deterministically ordered collection of parameters.
///
/// Names double as tape binding keys and serialization keys, so visit order
/// must be stable across runs.
pub trait ParamGroup {
    fn for_each(&self, f: &mut dyn FnMut(&str, &Parameter));
    fn for_each_mut(&mut self, f: &mut dyn FnMut(&str, &mut Parameter));

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.for_each(&mut |_, p| n += p.value.numel());
        n
    }

    fn zero_grads(&mut self) {
        self.for_each_mut(&mut |_, p| p.zero_grad());
    }
}

/// Weight + bias of one affine projection.
#[derive(Debug, Clone)]
pub struct LinearParams {
    pub weight: Parameter,
    pub bias: Parameter,
}

impl LinearParams {
    /// Xavier-uniform weight, zero bias.
    pub fn init(din: usize, dout: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = (6.0 / (din + dout) as Real).sqrt();
        let data = (0..din * dout)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        Self {
            weight: Parameter::new(Tensor::new(vec![din, dout], data).expect("shape")),
            bias: Parameter::new(Tensor::zeros(&[dout])),
        }
    }

    pub fn zeros(din: usize, dout: usize) -> Self {
        Self {
            weight: Parameter::new(Tensor::zeros(&[din, dout])),
            bias: Parameter::new(Tensor::zeros(&[dout])),
        }
    }

    /// Xavier weight with a frozen zero bias, for projections whose bias
    /// is mathematically inert (it cancels through a downstream softmax).
    pub fn init_no_bias(din: usize, dout: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut lp = Self::init(din, dout, rng);
        lp.bias = Parameter::frozen(Tensor::zeros(&[dout]));
        lp
    }

    /// Identity map (requires square dims); handy for passthrough tests.
    pub fn identity(d: usize) -> Self {
        let mut w = Tensor::zeros(&[d, d]);
        for i in 0..d {
            w.set(&[i, i], 1.0);
        }
        Self {
            weight: Parameter::new(w),
            bias: Parameter::new(Tensor::zeros(&[d])),
        }
    }

    pub fn din(&self) -> usize {
        self.value_shape()[0]
    }

    pub fn dout(&self) -> usize {
        self.value_shape()[1]
    }

    fn value_shape(&self) -> &[usize] {
        self.weight.value.shape()
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Parameter)) {
        f(&format!("{prefix}.w"), &self.weight);
        f(&format!("{prefix}.b"), &self.bias);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Parameter)) {
        f(&format!("{prefix}.w"), &mut self.weight);
        f(&format!("{prefix}.b"), &mut self.bias);
    }
}

/// Deterministic RNG used for parameter initialization and dropout seeds.
pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
