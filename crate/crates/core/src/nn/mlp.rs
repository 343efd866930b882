use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use super::params::ParamVector;
use super::tape::{ParamVars, Tape, Var};
use super::tensor::{matmul, Matrix};
use crate::error::{check_dim, invalid, Result};
use crate::rng::{uniform, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum Activation {
    Relu,
    Tanh,
    Identity,
}

impl Activation {
    fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Relu => {
                if v > 0.0 {
                    v
                } else {
                    0.0
                }
            }
            Activation::Tanh => libm::tanh(v),
            Activation::Identity => v,
        }
    }
}

/// Layer widths and activations of a fully connected network.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MlpSpec {
    pub layer_sizes: Vec<usize>,
    pub hidden_activation: Activation,
    pub output_activation: Activation,
}

impl MlpSpec {
    /// ReLU hidden layers, identity output.
    pub fn new(layer_sizes: Vec<usize>) -> Self {
        Self {
            layer_sizes,
            hidden_activation: Activation::Relu,
            output_activation: Activation::Identity,
        }
    }

    pub fn with_output(mut self, act: Activation) -> Self {
        self.output_activation = act;
        self
    }

    pub fn with_hidden(mut self, act: Activation) -> Self {
        self.hidden_activation = act;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_sizes.len() < 2 {
            return Err(invalid("mlp spec", "needs an input and an output layer"));
        }
        if self.layer_sizes.contains(&0) {
            return Err(invalid("mlp spec", "needs positive layer sizes"));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_sizes.last().expect("validated spec")
    }

    pub fn num_layers(&self) -> usize {
        self.layer_sizes.len() - 1
    }

    pub fn param_count(&self) -> usize {
        self.layer_sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    fn activation(&self, layer: usize) -> Activation {
        if layer + 1 == self.num_layers() {
            self.output_activation
        } else {
            self.hidden_activation
        }
    }
}

/// A network whose weights live in a [`ParamVector`], starting at
/// `first_segment` as alternating `[in, out]` weight and `[out]` bias
/// segments.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    spec: MlpSpec,
    first_segment: usize,
}

impl Mlp {
    /// Appends freshly initialized layers to `params` under `prefix`.
    /// Weights and biases are uniform on `±1/√fan_in`.
    pub fn append(params: &mut ParamVector, prefix: &str, spec: MlpSpec, rng: &mut Rng) -> Result<Self> {
        spec.validate()?;
        let first_segment = params.segments().len();
        for (l, w) in spec.layer_sizes.windows(2).enumerate() {
            let (fan_in, fan_out) = (w[0], w[1]);
            let bound = 1.0 / libm::sqrt(fan_in as f64);
            let weights = (0..fan_in * fan_out).map(|_| uniform(rng, -bound, bound)).collect();
            params.push_segment(format!("{prefix}l{l}.weight"), vec![fan_in, fan_out], weights);
            let bias = (0..fan_out).map(|_| uniform(rng, -bound, bound)).collect();
            params.push_segment(format!("{prefix}l{l}.bias"), vec![fan_out], bias);
        }
        Ok(Self { spec, first_segment })
    }

    /// Binds to layers already present in `params` at `first_segment`,
    /// checking their shapes.
    pub fn bind(params: &ParamVector, first_segment: usize, spec: MlpSpec) -> Result<Self> {
        spec.validate()?;
        let segs = params.segments();
        if segs.len() < first_segment + 2 * spec.num_layers() {
            return Err(invalid("mlp layout", "has too few segments"));
        }
        for (l, w) in spec.layer_sizes.windows(2).enumerate() {
            let ws = &segs[first_segment + 2 * l];
            let bs = &segs[first_segment + 2 * l + 1];
            if ws.shape != [w[0], w[1]] || bs.shape != [w[1]] {
                return Err(invalid("mlp layout", format!("has layer {l} not matching {:?}", spec.layer_sizes)));
            }
        }
        Ok(Self { spec, first_segment })
    }

    /// Describes layers at `first_segment` without checking any parameters.
    pub(crate) fn at(first_segment: usize, spec: MlpSpec) -> Self {
        Self { spec, first_segment }
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn first_segment(&self) -> usize {
        self.first_segment
    }

    /// Number of segments this network occupies.
    pub fn segment_count(&self) -> usize {
        2 * self.spec.num_layers()
    }

    /// Batched forward pass; `input` is `batch × in`.
    pub fn forward(&self, params: &ParamVector, input: &Matrix) -> Matrix {
        assert_eq!(input.cols(), self.spec.input_dim(), "mlp input width");
        let mut x = input.clone();
        for (l, w) in self.spec.layer_sizes.windows(2).enumerate() {
            let weight = Matrix::from_vec(w[0], w[1], params.segment(self.first_segment + 2 * l).to_vec());
            let bias = params.segment(self.first_segment + 2 * l + 1);
            let act = self.spec.activation(l);
            let mut y = matmul(&x, &weight);
            for i in 0..y.rows() {
                for (v, b) in y.row_mut(i).iter_mut().zip(bias) {
                    *v = act.apply(*v + b);
                }
            }
            x = y;
        }
        x
    }

    pub fn forward_tape(&self, tape: &mut Tape, vars: &ParamVars, input: Var) -> Var {
        let mut x = input;
        for l in 0..self.spec.num_layers() {
            let w = vars.get(self.first_segment + 2 * l);
            let b = vars.get(self.first_segment + 2 * l + 1);
            x = tape.affine(x, w, Some(b));
            x = match self.spec.activation(l) {
                Activation::Relu => tape.relu(x),
                Activation::Tanh => tape.tanh(x),
                Activation::Identity => x,
            };
        }
        x
    }
}

/// Fresh parameters laid out for `spec` from segment 0.
pub fn init_mlp(spec: &MlpSpec, rng: &mut Rng) -> Result<ParamVector> {
    let mut p = ParamVector::new();
    Mlp::append(&mut p, "", spec.clone(), rng)?;
    Ok(p)
}

/// Single-input forward pass of a network laid out for `spec` from segment 0.
pub fn mlp_forward(params: &ParamVector, spec: &MlpSpec, input: &[f64]) -> Result<Vec<f64>> {
    let mlp = Mlp::bind(params, 0, spec.clone())?;
    check_dim("mlp input", spec.input_dim(), input.len())?;
    check_dim("mlp parameters", spec.param_count(), params.len())?;
    let x = Matrix::row_vector(input.to_vec());
    Ok(mlp.forward(params, &x).into_vec())
}

/// Recovers layer widths from alternating `[in, out]` / `[out]` segments
/// starting at `first_segment`, stopping at the end of the vector or at the
/// first segment that does not continue the chain.
pub fn spec_from_layout(params: &ParamVector, first_segment: usize) -> Result<MlpSpec> {
    let segs = params.segments();
    let mut sizes: Vec<usize> = Vec::new();
    let mut idx = first_segment;
    while idx + 1 < segs.len() {
        let (w, b) = (&segs[idx].shape, &segs[idx + 1].shape);
        let chained = match sizes.last() {
            Some(&prev) => w.len() == 2 && w[0] == prev,
            None => w.len() == 2,
        };
        if !chained || b.as_slice() != [w[1]] {
            break;
        }
        if sizes.is_empty() {
            sizes.push(w[0]);
        }
        sizes.push(w[1]);
        idx += 2;
    }
    let spec = MlpSpec::new(sizes);
    spec.validate()?;
    Ok(spec)
}
