//! Small feed-forward networks with tanh hidden layers.
//!
//! Networks here are deliberately tiny (a few hundred parameters): they act
//! as residual corrections inside an otherwise physics-shaped model, not as
//! end-to-end surrogates.  Parameters live in one flat slice per network —
//! for each affine layer the weight matrix (row-major, `out x in`) followed
//! by the bias vector — so a network can be a zero-copy view into the global
//! parameter vector.
//!
//! Two forward paths are provided: a plain `f64` evaluation for cheap
//! simulation, and a taped evaluation for training.  Both execute the same
//! kernel in the same order, so their outputs are bitwise identical.

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use rand::Rng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

/// Architecture of a multilayer perceptron: all layer widths from input to
/// output.  Hidden layers use tanh; the output layer is affine.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub widths: Vec<usize>,
}

impl MlpSpec {
    /// Creates a spec, requiring at least one hidden layer and nonzero
    /// widths.
    pub fn new(widths: Vec<usize>) -> Result<Self> {
        if widths.len() < 3 {
            return Err(Error::Validation(format!(
                "network needs input, at least one hidden, and output layer; got {} widths",
                widths.len()
            )));
        }
        if widths.iter().any(|w| *w == 0) {
            return Err(Error::Validation(
                "network layer widths must be positive".into(),
            ));
        }
        Ok(MlpSpec { widths })
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().unwrap()
    }

    /// Number of affine layers.
    pub fn layers(&self) -> usize {
        self.widths.len() - 1
    }

    /// Total parameter count: sum over layers of `out*in + out`.
    pub fn param_count(&self) -> usize {
        self.widths
            .windows(2)
            .map(|w| w[1] * w[0] + w[1])
            .sum()
    }
}

/// Initializes parameters: weights uniform in `±sqrt(6/(fan_in+fan_out))`
/// (scaled-uniform scheme), biases exactly zero.
pub fn mlp_init(spec: &MlpSpec, rng: &mut ChaCha12Rng) -> Vec<f64> {
    let mut params = Vec::with_capacity(spec.param_count());
    for w in spec.widths.windows(2) {
        let (fan_in, fan_out) = (w[0], w[1]);
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        for _ in 0..fan_in * fan_out {
            params.push(rng.random_range(-limit..limit));
        }
        params.extend(std::iter::repeat(0.0).take(fan_out));
    }
    params
}

/// Plain forward pass.  `params` must hold exactly `spec.param_count()`
/// entries; `input` must match the input width.
pub fn mlp_forward(spec: &MlpSpec, params: &[f64], input: &[f64]) -> Result<Vec<f64>> {
    if params.len() != spec.param_count() {
        return Err(Error::DimensionMismatch {
            context: "mlp params",
            expected: spec.param_count(),
            got: params.len(),
        });
    }
    if input.len() != spec.input_dim() {
        return Err(Error::DimensionMismatch {
            context: "mlp input",
            expected: spec.input_dim(),
            got: input.len(),
        });
    }
    let mut x = input.to_vec();
    let mut off = 0;
    let last = spec.layers() - 1;
    for (l, w) in spec.widths.windows(2).enumerate() {
        let (n_in, n_out) = (w[0], w[1]);
        let weights = &params[off..off + n_out * n_in];
        let bias = &params[off + n_out * n_in..off + n_out * n_in + n_out];
        off += n_out * n_in + n_out;
        // Matches the tape's matmul kernel (including the zero skip) so both
        // paths are bitwise identical.
        let mut z = vec![0.0; n_out];
        for i in 0..n_out {
            for j in 0..n_in {
                let wij = weights[i * n_in + j];
                if wij == 0.0 {
                    continue;
                }
                z[i] += wij * x[j];
            }
        }
        for i in 0..n_out {
            z[i] += bias[i];
        }
        if l != last {
            for v in &mut z {
                *v = v.tanh();
            }
        }
        x = z;
    }
    Ok(x)
}

/// Taped forward pass.  `params` is a tape variable (typically a view into
/// the global parameter leaf) of length `spec.param_count()`; `input` is a
/// column vector of the input width.
pub fn mlp_forward_taped(tape: &mut Tape, spec: &MlpSpec, params: Var, input: Var) -> Var {
    assert_eq!(
        params.len(),
        spec.param_count(),
        "mlp parameter view has wrong length"
    );
    assert_eq!(
        input.shape(),
        (spec.input_dim(), 1),
        "mlp input has wrong shape"
    );
    let mut x = input;
    let mut off = 0;
    let last = spec.layers() - 1;
    for (l, w) in spec.widths.windows(2).enumerate() {
        let (n_in, n_out) = (w[0], w[1]);
        let weights = tape.view(params, off, n_out, n_in);
        let bias = tape.view(params, off + n_out * n_in, n_out, 1);
        off += n_out * n_in + n_out;
        let wx = tape.matmul(weights, x);
        let z = tape.add(wx, bias);
        x = if l != last { tape.tanh(z) } else { z };
    }
    x
}
