//! Small building blocks shared by the codec and the prior conditioning
//! stacks.

use rand_chacha::ChaCha8Rng;

use crate::params::{ParamBinding, ParamId, ParamStore};
use crate::tensor::{ConvSpec, Result, Scalar, Tape, Var};

/// relu -> 3x3x3 conv -> relu -> 1x1 conv back, with a skip connection.
pub(crate) struct ResBlock {
    conv: ParamId,
    conv_bias: ParamId,
    project: ParamId,
    project_bias: ParamId,
    conv_spec: ConvSpec,
    project_spec: ConvSpec,
}

impl ResBlock {
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        prefix: &str,
        channels: usize,
        units: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let conv_spec = ConvSpec::same([3, 3, 3], [1, 1, 1], channels, units);
        let project_spec = ConvSpec::pointwise(units, channels);
        ResBlock {
            conv: store.add_conv(&format!("{prefix}.conv"), &conv_spec, rng),
            conv_bias: store.add_bias(&format!("{prefix}.conv_bias"), units),
            project: store.add_conv(&format!("{prefix}.project"), &project_spec, rng),
            project_bias: store.add_bias(&format!("{prefix}.project_bias"), channels),
            conv_spec,
            project_spec,
        }
    }

    pub fn forward<S: Scalar>(&self, p: &ParamBinding<S>, tape: &mut Tape<S>, x: Var) -> Result<Var> {
        let a = tape.relu(x)?;
        let a = tape.conv3d(a, p.var(self.conv), &self.conv_spec)?;
        let a = tape.add_bias(a, p.var(self.conv_bias))?;
        let a = tape.relu(a)?;
        let a = tape.conv3d(a, p.var(self.project), &self.project_spec)?;
        let a = tape.add_bias(a, p.var(self.project_bias))?;
        tape.add(x, a)
    }
}

/// Strided conv + bias, used wherever a stage changes resolution.
pub(crate) struct ConvLayer {
    weights: ParamId,
    bias: ParamId,
    pub spec: ConvSpec,
}

impl ConvLayer {
    pub fn new<S: Scalar>(store: &mut ParamStore<S>, prefix: &str, spec: ConvSpec, rng: &mut ChaCha8Rng) -> Self {
        ConvLayer {
            weights: store.add_conv(&format!("{prefix}.w"), &spec, rng),
            bias: store.add_bias(&format!("{prefix}.b"), spec.out_channels),
            spec,
        }
    }

    pub fn forward<S: Scalar>(&self, p: &ParamBinding<S>, tape: &mut Tape<S>, x: Var) -> Result<Var> {
        let h = tape.conv3d(x, p.var(self.weights), &self.spec)?;
        tape.add_bias(h, p.var(self.bias))
    }
}

/// Transposed conv + bias for the upsampling chains. The spec describes the
/// mirrored forward direction; this layer consumes `spec.out_channels`.
pub(crate) struct ConvTransposeLayer {
    weights: ParamId,
    bias: ParamId,
    pub spec: ConvSpec,
}

impl ConvTransposeLayer {
    pub fn new<S: Scalar>(store: &mut ParamStore<S>, prefix: &str, spec: ConvSpec, rng: &mut ChaCha8Rng) -> Self {
        ConvTransposeLayer {
            weights: store.add_conv_transpose(&format!("{prefix}.w"), &spec, rng),
            bias: store.add_bias(&format!("{prefix}.b"), spec.in_channels),
            spec,
        }
    }

    pub fn forward<S: Scalar>(&self, p: &ParamBinding<S>, tape: &mut Tape<S>, x: Var) -> Result<Var> {
        let h = tape.conv_transpose3d(x, p.var(self.weights), &self.spec)?;
        tape.add_bias(h, p.var(self.bias))
    }
}
