//! Named parameter storage shared by the codec and the priors: an ordered
//! name -> tensor map that binds onto a tape per step and applies Adam
//! updates from the tape's gradients. Ordering is insertion order, so
//! checkpoints and updates are reproducible byte for byte.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::{adam_step, AdamParams, AdamState, ConvSpec, Result, Scalar, Tape, Tensor, TensorError, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(usize);

pub struct ParamStore<S: Scalar> {
    names: Vec<String>,
    tensors: Vec<Tensor<S>>,
}

/// Per-tape registration of every parameter, in store order.
pub struct ParamBinding<S: Scalar> {
    vars: Vec<Var>,
    _marker: std::marker::PhantomData<S>,
}

impl<S: Scalar> ParamBinding<S> {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

fn fan_in_uniform<S: Scalar>(shape: Vec<usize>, fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor<S> {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    Tensor::from_fn(shape, |_| S::from_f64((rng.gen::<f64>() * 2.0 - 1.0) * bound))
}

impl<S: Scalar> Default for ParamStore<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        ParamStore { names: Vec::new(), tensors: Vec::new() }
    }

    pub fn add(&mut self, name: &str, tensor: Tensor<S>) -> ParamId {
        debug_assert!(!self.names.iter().any(|n| n == name), "duplicate param {name}");
        self.names.push(name.to_string());
        self.tensors.push(tensor.with_requires_grad(true));
        ParamId(self.tensors.len() - 1)
    }

    /// Fan-in scaled uniform weights for the forward direction of `spec`.
    pub fn add_conv(&mut self, name: &str, spec: &ConvSpec, rng: &mut ChaCha8Rng) -> ParamId {
        let fan_in = spec.in_channels * spec.taps();
        self.add(name, fan_in_uniform(spec.weight_shape(), fan_in, rng))
    }

    /// Weights for the transposed direction; each output gathers roughly
    /// `taps / stride-volume` contributions from `out_channels` inputs.
    pub fn add_conv_transpose(&mut self, name: &str, spec: &ConvSpec, rng: &mut ChaCha8Rng) -> ParamId {
        let stride_volume = spec.stride[0] * spec.stride[1] * spec.stride[2];
        let fan_in = (spec.out_channels * spec.taps()).div_ceil(stride_volume);
        self.add(name, fan_in_uniform(spec.weight_shape(), fan_in, rng))
    }

    pub fn add_bias(&mut self, name: &str, channels: usize) -> ParamId {
        self.add(name, Tensor::zeros(vec![channels]))
    }

    pub fn add_matrix(&mut self, name: &str, rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> ParamId {
        self.add(name, fan_in_uniform(vec![rows, cols], rows, rng))
    }

    pub fn add_embedding(&mut self, name: &str, count: usize, dim: usize, rng: &mut ChaCha8Rng) -> ParamId {
        self.add(name, fan_in_uniform(vec![count, dim], dim, rng))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<S> {
        &self.tensors[id.0]
    }

    pub fn set(&mut self, id: ParamId, tensor: Tensor<S>) -> Result<()> {
        if tensor.shape() != self.tensors[id.0].shape() {
            return Err(TensorError::ShapeMismatch {
                op: "ParamStore::set",
                detail: format!("{:?} vs {:?}", tensor.shape(), self.tensors[id.0].shape()),
            });
        }
        self.tensors[id.0] = tensor.with_requires_grad(true);
        Ok(())
    }

    pub fn tensors(&self) -> &[Tensor<S>] {
        &self.tensors
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<S>)> {
        self.names.iter().map(|n| n.as_str()).zip(self.tensors.iter())
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    /// Register every parameter as a trainable leaf on `tape`.
    pub fn bind_trainable(&self, tape: &mut Tape<S>) -> ParamBinding<S> {
        ParamBinding {
            vars: self.tensors.iter().map(|t| tape.param(t.clone())).collect(),
            _marker: std::marker::PhantomData,
        }
    }

    /// Register every parameter as a constant; backward stops here. Used for
    /// inference and for frozen models feeding another model's training.
    pub fn bind_frozen(&self, tape: &mut Tape<S>) -> ParamBinding<S> {
        ParamBinding {
            vars: self.tensors.iter().map(|t| tape.constant(t.clone())).collect(),
            _marker: std::marker::PhantomData,
        }
    }

    /// Pull gradients off the tape and take one Adam step.
    pub fn apply_adam(
        &mut self,
        tape: &Tape<S>,
        binding: &ParamBinding<S>,
        state: &mut AdamState<S>,
        hp: &AdamParams,
    ) -> Result<()> {
        let grads: Vec<Option<Tensor<S>>> =
            binding.vars.iter().map(|&v| tape.grad_tensor(v)).collect();
        adam_step(&mut self.tensors, &grads, state, hp)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn binding_preserves_store_order_and_lookup() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::<f64>::new();
        let a = store.add_matrix("a", 2, 3, &mut rng);
        let b = store.add_bias("b", 4);
        assert_eq!(store.id_of("a"), Some(a));
        assert_eq!(store.id_of("b"), Some(b));
        assert_eq!(store.id_of("missing"), None);
        let mut tape = Tape::new();
        let binding = store.bind_trainable(&mut tape);
        assert_eq!(tape.shape(binding.var(a)), &[2, 3]);
        assert_eq!(tape.shape(binding.var(b)), &[4]);
    }

    #[test]
    fn adam_application_moves_only_parameters_with_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::<f64>::new();
        let used = store.add_matrix("used", 1, 2, &mut rng);
        let unused = store.add_matrix("unused", 1, 2, &mut rng);
        let before_unused = store.get(unused).clone();
        let mut tape = Tape::new();
        let binding = store.bind_trainable(&mut tape);
        let loss = tape.sum_sq(binding.var(used)).unwrap();
        tape.backward(loss).unwrap();
        let mut state = AdamState::for_params(store.tensors());
        store
            .apply_adam(&tape, &binding, &mut state, &AdamParams::default())
            .unwrap();
        assert_eq!(store.get(unused).data(), before_unused.data());
        assert_ne!(store.get(used).data(), before_unused.data());
    }
}
