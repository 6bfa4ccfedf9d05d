//! Recurrent building blocks: LSTM cell, affine projection, inverted dropout.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{BoundParams, NodeId, ParamId, ParamStore, Tape, Tensor};

/// Forward-pass mode; dropout is the identity at inference.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// Single LSTM cell. Each gate maps the concatenated `[x; h_prev]` of length
/// `input_dim + hidden_dim` to `hidden_dim` units.
///
/// Weights are Glorot-uniform, biases zero except the forget gate at +1.
#[derive(Debug, Clone)]
pub struct LstmCell {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub w_input: ParamId,
    pub w_forget: ParamId,
    pub w_cell: ParamId,
    pub w_output: ParamId,
    pub b_input: ParamId,
    pub b_forget: ParamId,
    pub b_cell: ParamId,
    pub b_output: ParamId,
}

impl LstmCell {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        input_dim: usize,
        hidden_dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let cols = input_dim + hidden_dim;
        let mut weight = |gate: &str, rng: &mut ChaCha8Rng| {
            store.register(format!("{prefix}.w_{gate}"), Tensor::glorot(hidden_dim, cols, rng))
        };
        let w_input = weight("input", rng);
        let w_forget = weight("forget", rng);
        let w_cell = weight("cell", rng);
        let w_output = weight("output", rng);
        let b_input = store.register(format!("{prefix}.b_input"), Tensor::zeros(vec![hidden_dim]));
        let b_forget = store.register(
            format!("{prefix}.b_forget"),
            Tensor::filled(vec![hidden_dim], 1.0),
        );
        let b_cell = store.register(format!("{prefix}.b_cell"), Tensor::zeros(vec![hidden_dim]));
        let b_output = store.register(format!("{prefix}.b_output"), Tensor::zeros(vec![hidden_dim]));
        Self {
            input_dim,
            hidden_dim,
            w_input,
            w_forget,
            w_cell,
            w_output,
            b_input,
            b_forget,
            b_cell,
            b_output,
        }
    }

    /// One recurrence step: returns `(h_t, s_t)`.
    pub fn step(
        &self,
        tape: &mut Tape,
        bound: &BoundParams,
        x: NodeId,
        h_prev: NodeId,
        s_prev: NodeId,
    ) -> Result<(NodeId, NodeId)> {
        let xv = tape.value(x);
        if xv.shape() != [self.input_dim] {
            return Err(Error::ShapeMismatch {
                op: "lstm_step input",
                lhs: xv.shape().to_vec(),
                rhs: vec![self.input_dim],
            });
        }
        let hv = tape.value(h_prev);
        if hv.shape() != [self.hidden_dim] {
            return Err(Error::ShapeMismatch {
                op: "lstm_step state",
                lhs: hv.shape().to_vec(),
                rhs: vec![self.hidden_dim],
            });
        }
        let z = tape.concat(x, h_prev, 0)?;
        let gate = |tape: &mut Tape, w: ParamId, b: ParamId| -> Result<NodeId> {
            let wz = tape.matmul(bound.node(w), z)?;
            tape.add(wz, bound.node(b))
        };
        let pre_i = gate(tape, self.w_input, self.b_input)?;
        let i = tape.sigmoid(pre_i);
        let pre_f = gate(tape, self.w_forget, self.b_forget)?;
        let f = tape.sigmoid(pre_f);
        let pre_g = gate(tape, self.w_cell, self.b_cell)?;
        let g = tape.tanh(pre_g);
        let pre_o = gate(tape, self.w_output, self.b_output)?;
        let o = tape.sigmoid(pre_o);

        let keep = tape.mul(f, s_prev)?;
        let write = tape.mul(i, g)?;
        let s = tape.add(keep, write)?;
        let s_act = tape.tanh(s);
        let h = tape.mul(o, s_act)?;
        Ok((h, s))
    }

    /// Zero initial `(h, s)` leaves for a fresh sequence.
    pub fn zero_state(&self, tape: &mut Tape) -> (NodeId, NodeId) {
        let h = tape.leaf(Tensor::zeros(vec![self.hidden_dim]));
        let s = tape.leaf(Tensor::zeros(vec![self.hidden_dim]));
        (h, s)
    }
}

/// Affine map `Wx + b`.
#[derive(Debug, Clone)]
pub struct AffineLayer {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weight: ParamId,
    pub bias: ParamId,
}

impl AffineLayer {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let weight = store.register(format!("{prefix}.weight"), Tensor::glorot(out_dim, in_dim, rng));
        let bias = store.register(format!("{prefix}.bias"), Tensor::zeros(vec![out_dim]));
        Self {
            in_dim,
            out_dim,
            weight,
            bias,
        }
    }

    pub fn apply(&self, tape: &mut Tape, bound: &BoundParams, x: NodeId) -> Result<NodeId> {
        let xv = tape.value(x);
        if xv.shape() != [self.in_dim] {
            return Err(Error::ShapeMismatch {
                op: "affine",
                lhs: xv.shape().to_vec(),
                rhs: vec![self.in_dim],
            });
        }
        let wx = tape.matmul(bound.node(self.weight), x)?;
        tape.add(wx, bound.node(self.bias))
    }
}

/// Inverted dropout: in training, each element is zeroed with probability
/// `rate` and survivors are scaled by `1/(1-rate)`, so expectation is
/// preserved; at inference it is the identity.
#[derive(Debug, Clone, Copy)]
pub struct Dropout {
    rate: f64,
}

impl Dropout {
    pub fn new(rate: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!("dropout rate must be in [0, 1), got {rate}")));
        }
        Ok(Self { rate })
    }

    pub fn rate(&self) -> f64 {
        self.rate
    }

    pub fn apply(
        &self,
        tape: &mut Tape,
        x: NodeId,
        mode: Mode,
        rng: &mut ChaCha8Rng,
    ) -> Result<NodeId> {
        if mode == Mode::Infer || self.rate == 0.0 {
            return Ok(x);
        }
        let scale = 1.0 / (1.0 - self.rate);
        let mask: Vec<f64> = (0..tape.value(x).numel())
            .map(|_| if rng.random::<f64>() < self.rate { 0.0 } else { scale })
            .collect();
        tape.mask(x, mask)
    }
}
