//! Fully connected networks over a flat parameter slice, with a batched
//! reverse-mode pass.
//!
//! Parameters are stored layer by layer as `weights (in × out, row-major)`
//! followed by `bias (out)`. The activation follows every hidden layer; the
//! output layer is linear.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SnlError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "relu" => Ok(Activation::Relu),
            "tanh" => Ok(Activation::Tanh),
            other => Err(SnlError::UnknownName {
                kind: "activation",
                name: other.to_string(),
            }),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Tanh => "tanh",
        }
    }

    pub fn apply(&self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
        }
    }

    /// Derivative expressed through the activation output.
    fn derivative_from_output(&self, a: f64) -> f64 {
        match self {
            Activation::Relu => {
                if a > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - a * a,
        }
    }
}

/// Architecture of a dense network: layer widths from input to output.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpShape {
    pub widths: Vec<usize>,
    pub activation: Activation,
}

/// Activations kept from a forward pass for the backward pass.
#[derive(Debug, Clone)]
pub struct Trace {
    /// Input of every layer; `layer_inputs[0]` is the network input.
    layer_inputs: Vec<Array2<f64>>,
    output: Array2<f64>,
}

impl Trace {
    pub fn output(&self) -> &Array2<f64> {
        &self.output
    }

    pub fn into_output(self) -> Array2<f64> {
        self.output
    }
}

impl MlpShape {
    pub fn new(widths: Vec<usize>, activation: Activation) -> Result<Self> {
        if widths.len() < 2 || widths.iter().any(|&w| w == 0) {
            return Err(SnlError::InvalidConfig(format!(
                "network widths must have at least two positive entries, got {widths:?}"
            )));
        }
        Ok(Self { widths, activation })
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().unwrap()
    }

    pub fn num_layers(&self) -> usize {
        self.widths.len() - 1
    }

    /// Total trainable parameters (weights and biases).
    pub fn num_params(&self) -> usize {
        self.widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    /// Weight-matrix entries only, without biases.
    pub fn weight_count(&self) -> usize {
        self.widths.windows(2).map(|w| w[0] * w[1]).sum()
    }

    fn layer_offsets(&self, layer: usize) -> (usize, usize, usize) {
        let start: usize = self.widths[..layer + 1]
            .windows(2)
            .map(|w| w[0] * w[1] + w[1])
            .sum();
        let (fan_in, fan_out) = (self.widths[layer], self.widths[layer + 1]);
        (start, start + fan_in * fan_out, start + fan_in * fan_out + fan_out)
    }

    /// Index of the output-layer bias in the flat parameter vector.
    pub fn output_bias_index(&self) -> usize {
        self.num_params() - self.output_dim()
    }

    /// Weight matrix (`fan_in × fan_out`) and bias of one layer.
    pub fn layer<'a>(&self, params: &'a [f64], layer: usize) -> (ArrayView2<'a, f64>, ArrayView1<'a, f64>) {
        let (w0, b0, end) = self.layer_offsets(layer);
        let shape = (self.widths[layer], self.widths[layer + 1]);
        let w = ArrayView2::from_shape(shape, &params[w0..b0]).expect("layer shape");
        let b = ArrayView1::from(&params[b0..end]);
        (w, b)
    }

    /// Uniform `±1/sqrt(fan_in)` initialisation of weights and hidden biases;
    /// the output bias starts at zero.
    pub fn init<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let mut params = vec![0.0; self.num_params()];
        for layer in 0..self.num_layers() {
            let (w0, b0, end) = self.layer_offsets(layer);
            let bound = 1.0 / (self.widths[layer] as f64).sqrt();
            for p in &mut params[w0..b0] {
                *p = rng.random_range(-bound..bound);
            }
            if layer + 1 < self.num_layers() {
                for p in &mut params[b0..end] {
                    *p = rng.random_range(-bound..bound);
                }
            }
        }
        params
    }

    fn check(&self, params: &[f64], inputs: &ArrayView2<f64>) -> Result<()> {
        if params.len() != self.num_params() {
            return Err(SnlError::DimensionMismatch {
                expected: self.num_params(),
                got: params.len(),
                context: "network parameters",
            });
        }
        if inputs.ncols() != self.input_dim() {
            return Err(SnlError::DimensionMismatch {
                expected: self.input_dim(),
                got: inputs.ncols(),
                context: "network input",
            });
        }
        Ok(())
    }

    /// Forward pass without keeping intermediate activations.
    pub fn forward(&self, params: &[f64], inputs: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check(params, &inputs)?;
        let mut h = inputs.to_owned();
        for layer in 0..self.num_layers() {
            h = self.layer_forward(params, layer, h.view());
        }
        Ok(h)
    }

    /// Forward pass that records what the backward pass needs.
    pub fn forward_trace(&self, params: &[f64], inputs: ArrayView2<f64>) -> Result<Trace> {
        self.check(params, &inputs)?;
        let mut layer_inputs = Vec::with_capacity(self.num_layers());
        let mut h = inputs.to_owned();
        for layer in 0..self.num_layers() {
            let next = self.layer_forward(params, layer, h.view());
            layer_inputs.push(h);
            h = next;
        }
        Ok(Trace {
            layer_inputs,
            output: h,
        })
    }

    fn layer_forward(&self, params: &[f64], layer: usize, h: ArrayView2<f64>) -> Array2<f64> {
        let (w, b) = self.layer(params, layer);
        let mut z = h.dot(&w);
        z += &b;
        if layer + 1 < self.num_layers() {
            let act = self.activation;
            z.mapv_inplace(|v| act.apply(v));
        }
        z
    }

    /// Reverse pass. `grad_output` is the derivative of a scalar loss with
    /// respect to each output row; parameter gradients are *added* into
    /// `grad_params`. Returns the gradient with respect to the inputs when
    /// `want_input_grad` is set.
    pub fn backward(
        &self,
        params: &[f64],
        trace: &Trace,
        grad_output: ArrayView2<f64>,
        grad_params: &mut [f64],
        want_input_grad: bool,
    ) -> Option<Array2<f64>> {
        debug_assert_eq!(grad_params.len(), self.num_params());
        let mut g = grad_output.to_owned();
        for layer in (0..self.num_layers()).rev() {
            let input = &trace.layer_inputs[layer];
            let (w, _) = self.layer(params, layer);
            let (w0, b0, end) = self.layer_offsets(layer);
            let dw = input.t().dot(&g);
            for (acc, v) in grad_params[w0..b0].iter_mut().zip(dw.iter()) {
                *acc += v;
            }
            let db = g.sum_axis(Axis(0));
            for (acc, v) in grad_params[b0..end].iter_mut().zip(db.iter()) {
                *acc += v;
            }
            if layer == 0 {
                return if want_input_grad { Some(g.dot(&w.t())) } else { None };
            }
            let mut g_prev = g.dot(&w.t());
            let act = self.activation;
            ndarray::Zip::from(&mut g_prev)
                .and(input)
                .for_each(|gp, &a| *gp *= act.derivative_from_output(a));
            g = g_prev;
        }
        None
    }
}

/// Column of a single-output network as a vector.
pub fn single_column(out: Array2<f64>) -> Array1<f64> {
    out.index_axis_move(Axis(1), 0)
}
