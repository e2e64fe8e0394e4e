//! Dense SiLU perceptron with hidden-layer taps and an optional additive
//! conditioning input on the first hidden layer.

use serde::{Deserialize, Serialize};

use super::params::{init_weight, ParamStore};
use crate::error::ensure;
use crate::numeric::{Matrix, RngStream};
use crate::Result;

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub(crate) fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

#[inline]
pub(crate) fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

/// Layer sizes of a perceptron. Hidden layers use SiLU, the output is affine.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub output_dim: usize,
}

impl MlpSpec {
    pub fn new(input_dim: usize, hidden: Vec<usize>, output_dim: usize) -> Self {
        Self {
            input_dim,
            hidden,
            output_dim,
        }
    }

    pub fn num_layers(&self) -> usize {
        self.hidden.len() + 1
    }

    fn layer_dims(&self, i: usize) -> (usize, usize) {
        let fan_in = if i == 0 { self.input_dim } else { self.hidden[i - 1] };
        let fan_out = self.hidden.get(i).copied().unwrap_or(self.output_dim);
        (fan_in, fan_out)
    }

    pub fn weight_name(prefix: &str, i: usize) -> String {
        format!("{prefix}.l{i}.w")
    }

    pub fn bias_name(prefix: &str, i: usize) -> String {
        format!("{prefix}.l{i}.b")
    }

    /// Inserts `prefix.l{i}.w` (`fan_in x fan_out`) and `prefix.l{i}.b`
    /// (`1 x fan_out`, zero) for each layer, in layer order.
    pub fn init_params(&self, prefix: &str, rng: &mut RngStream, store: &mut ParamStore) -> Result<()> {
        for i in 0..self.num_layers() {
            let (fan_in, fan_out) = self.layer_dims(i);
            store.insert(Self::weight_name(prefix, i), init_weight(rng, fan_in, fan_out))?;
            store.insert(Self::bias_name(prefix, i), Matrix::zeros(1, fan_out))?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.input_dim > 0 && self.output_dim > 0,
            InvalidArgument,
            "zero-width perceptron {self:?}"
        );
        ensure!(
            self.hidden.iter().all(|&h| h > 0),
            InvalidArgument,
            "zero-width hidden layer in {self:?}"
        );
        Ok(())
    }
}

/// Intermediate values of one forward pass.
#[derive(Debug, Clone)]
pub struct MlpCache {
    /// Input to each layer (`inputs[0]` is the network input).
    inputs: Vec<Matrix>,
    /// Pre-activation of each hidden layer.
    pre: Vec<Matrix>,
    output: Matrix,
}

impl MlpCache {
    pub fn output(&self) -> &Matrix {
        &self.output
    }

    /// Post-activation of hidden layer `i`.
    pub fn hidden(&self, i: usize) -> &Matrix {
        &self.inputs[i + 1]
    }

    pub fn input(&self) -> &Matrix {
        &self.inputs[0]
    }
}

/// Gradients produced by [`mlp_backward`].
pub struct MlpGrads {
    /// Gradient with respect to the additive first-layer conditioning term.
    pub d_cond: Option<Matrix>,
    pub d_input: Matrix,
}

/// Forward pass. `cond`, when given, is added to the first hidden layer's
/// pre-activation (batch x hidden[0]).
pub fn mlp_forward(
    params: &ParamStore,
    prefix: &str,
    spec: &MlpSpec,
    x: &Matrix,
    cond: Option<&Matrix>,
) -> Result<MlpCache> {
    ensure!(
        x.cols() == spec.input_dim,
        Shape,
        "{prefix}: input has {} columns, expected {}",
        x.cols(),
        spec.input_dim
    );
    let mut inputs = Vec::with_capacity(spec.num_layers());
    let mut pre = Vec::with_capacity(spec.hidden.len());
    inputs.push(x.clone());
    for i in 0..spec.num_layers() {
        let w = params.get(&MlpSpec::weight_name(prefix, i))?;
        let b = params.get(&MlpSpec::bias_name(prefix, i))?;
        let mut z = inputs[i].matmul(w)?;
        z.add_row_vector(b.as_slice())?;
        if i == 0 {
            if let Some(c) = cond {
                ensure!(
                    !spec.hidden.is_empty(),
                    Shape,
                    "{prefix}: conditioning needs at least one hidden layer"
                );
                z = z.add(c)?;
            }
        }
        z.check_finite(&format!("{prefix} layer {i} pre-activation"))?;
        if i < spec.hidden.len() {
            inputs.push(z.map(silu));
            pre.push(z);
        } else {
            return Ok(MlpCache { inputs, pre, output: z });
        }
    }
    unreachable!("perceptron has at least one layer")
}

/// Backward pass. `d_out` is the loss gradient at the output (absent means
/// zero) and `d_taps` injects gradients at hidden-layer activations.
/// Parameter gradients are accumulated into `grads` under the same names.
pub fn mlp_backward(
    params: &ParamStore,
    prefix: &str,
    spec: &MlpSpec,
    cache: &MlpCache,
    d_out: Option<&Matrix>,
    d_taps: &[(usize, &Matrix)],
    grads: &mut ParamStore,
) -> Result<MlpGrads> {
    let n_hidden = spec.hidden.len();
    let batch = cache.output.rows();
    let mut delta = match d_out {
        Some(d) => {
            ensure!(
                d.shape() == cache.output.shape(),
                Shape,
                "{prefix}: output gradient shape"
            );
            d.clone()
        }
        None => Matrix::zeros(batch, spec.output_dim),
    };
    let mut d_cond = None;
    for i in (0..spec.num_layers()).rev() {
        // delta is dL/d(pre-activation of layer i), or of the output for the last layer
        let w_name = MlpSpec::weight_name(prefix, i);
        let w = params.get(&w_name)?;
        let input = &cache.inputs[i];
        grads.accumulate(&w_name, &input.t_matmul(&delta)?)?;
        let db = Matrix::from_vec(1, delta.cols(), delta.col_sums())?;
        grads.accumulate(&MlpSpec::bias_name(prefix, i), &db)?;
        if i == 0 {
            if n_hidden > 0 {
                d_cond = Some(delta.clone());
            }
            let d_input = delta.matmul_t(w)?;
            return Ok(MlpGrads { d_cond, d_input });
        }
        // gradient at activation of hidden layer i-1
        let mut d_act = delta.matmul_t(w)?;
        for &(tap, g) in d_taps {
            if tap == i - 1 {
                ensure!(g.shape() == d_act.shape(), Shape, "{prefix}: tap {tap} gradient shape");
                d_act.axpy(1.0, g)?;
            }
        }
        let pre = &cache.pre[i - 1];
        delta = Matrix::from_vec(
            d_act.rows(),
            d_act.cols(),
            d_act
                .as_slice()
                .iter()
                .zip(pre.as_slice())
                .map(|(&g, &z)| g * silu_grad(z))
                .collect(),
        )?;
    }
    unreachable!("perceptron has at least one layer")
}
