//! Stacked LSTM used both as the NTM controller and as the baseline network.

use rand::RngCore;

use crate::error::ModelError;
use crate::model::SequenceModel;
use crate::params::{Init, ParamLayout, ParamStore};
use crate::tape::{ParamId, Tape, Var};
use crate::tensor::Tensor;

/// One LSTM layer. The fused weight has shape `[4H, input + H]`: columns
/// `0..input` are the input weights and the remaining `H` columns the
/// recurrent weights. Gate rows are ordered input, forget, output, candidate.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmLayer {
    pub input_size: usize,
    pub hidden: usize,
    pub weight: ParamId,
    pub bias: ParamId,
}

impl LstmLayer {
    pub fn declare(layout: &mut ParamLayout, prefix: &str, input_size: usize, hidden: usize) -> Self {
        let limit = (1.0 / (input_size + hidden) as f64).sqrt();
        let weight = layout.declare(
            format!("{prefix}.weight"),
            &[4 * hidden, input_size + hidden],
            Init::Uniform(limit),
        );
        let bias = layout.declare(format!("{prefix}.bias"), &[4 * hidden], Init::LstmBias { hidden });
        LstmLayer {
            input_size,
            hidden,
            weight,
            bias,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LstmCellState {
    pub h: Var,
    pub c: Var,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LstmState {
    pub layers: Vec<LstmCellState>,
}

/// One LSTM update: `c' = f*c + i*tanh(cand)`, `h' = o*tanh(c')`.
pub fn lstm_step(
    tape: &mut Tape,
    x: Var,
    state: LstmCellState,
    weight: Var,
    bias: Var,
    hidden: usize,
) -> Result<LstmCellState, ModelError> {
    let xh = tape.concat(&[x, state.h], 0)?;
    let pre = tape.matmul(weight, xh)?;
    let z = tape.add(pre, bias)?;
    let zi = tape.slice(z, 0, 0, hidden)?;
    let zf = tape.slice(z, 0, hidden, hidden)?;
    let zo = tape.slice(z, 0, 2 * hidden, hidden)?;
    let zg = tape.slice(z, 0, 3 * hidden, hidden)?;
    let i = tape.sigmoid(zi)?;
    let f = tape.sigmoid(zf)?;
    let o = tape.sigmoid(zo)?;
    let g = tape.tanh(zg)?;
    let keep = tape.mul(f, state.c)?;
    let fresh = tape.mul(i, g)?;
    let c = tape.add(keep, fresh)?;
    let tc = tape.tanh(c)?;
    let h = tape.mul(o, tc)?;
    Ok(LstmCellState { h, c })
}

/// Layers applied in sequence within one timestep.
#[derive(Debug, Clone, PartialEq)]
pub struct StackedLstm {
    pub layers: Vec<LstmLayer>,
}

impl StackedLstm {
    pub fn declare(
        layout: &mut ParamLayout,
        prefix: &str,
        input_size: usize,
        hidden: usize,
        num_layers: usize,
    ) -> Result<Self, ModelError> {
        if num_layers == 0 || hidden == 0 {
            return Err(ModelError::Config("LSTM stack needs at least one layer and one unit".into()));
        }
        let layers = (0..num_layers)
            .map(|l| {
                let input = if l == 0 { input_size } else { hidden };
                LstmLayer::declare(layout, &format!("{prefix}.l{l}"), input, hidden)
            })
            .collect();
        Ok(StackedLstm { layers })
    }

    pub fn hidden(&self) -> usize {
        self.layers.last().map_or(0, |l| l.hidden)
    }

    pub fn zero_state(&self, tape: &mut Tape) -> LstmState {
        let layers = self
            .layers
            .iter()
            .map(|l| LstmCellState {
                h: tape.constant(Tensor::zeros(&[l.hidden])),
                c: tape.constant(Tensor::zeros(&[l.hidden])),
            })
            .collect();
        LstmState { layers }
    }

    /// Feeds `x` through every layer; returns the top layer's hidden output.
    pub fn step(
        &self,
        tape: &mut Tape,
        params: &ParamStore,
        x: Var,
        state: &LstmState,
    ) -> Result<(Var, LstmState), ModelError> {
        let mut input = x;
        let mut next = Vec::with_capacity(self.layers.len());
        for (layer, &cell) in self.layers.iter().zip(&state.layers) {
            let w = tape.param(layer.weight, params.get(layer.weight));
            let b = tape.param(layer.bias, params.get(layer.bias));
            let out = lstm_step(tape, input, cell, w, b, layer.hidden)?;
            input = out.h;
            next.push(out);
        }
        Ok((input, LstmState { layers: next }))
    }
}

/// Stacked LSTM followed by a linear read-out at every timestep.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmBaseline {
    input_dim: usize,
    output_dim: usize,
    stack: StackedLstm,
    out_weight: ParamId,
    out_bias: ParamId,
    layout: ParamLayout,
}

impl LstmBaseline {
    pub fn new(input_dim: usize, output_dim: usize, layers: usize, units: usize) -> Result<Self, ModelError> {
        let mut layout = ParamLayout::new();
        let stack = StackedLstm::declare(&mut layout, "lstm", input_dim, units, layers)?;
        let limit = (1.0 / units as f64).sqrt();
        let out_weight = layout.declare("readout.weight", &[output_dim, units], Init::Uniform(limit));
        let out_bias = layout.declare("readout.bias", &[output_dim], Init::Zeros);
        Ok(LstmBaseline {
            input_dim,
            output_dim,
            stack,
            out_weight,
            out_bias,
            layout,
        })
    }

    pub fn stack(&self) -> &StackedLstm {
        &self.stack
    }
}

impl SequenceModel for LstmBaseline {
    fn input_dim(&self) -> usize {
        self.input_dim
    }

    fn output_dim(&self) -> usize {
        self.output_dim
    }

    fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    fn forward(
        &self,
        tape: &mut Tape,
        params: &ParamStore,
        inputs: &Tensor,
        _rng: &mut dyn RngCore,
    ) -> Result<Var, ModelError> {
        check_inputs(inputs, self.input_dim)?;
        let w = tape.param(self.out_weight, params.get(self.out_weight));
        let b = tape.param(self.out_bias, params.get(self.out_bias));
        let mut state = self.stack.zero_state(tape);
        let mut rows = Vec::with_capacity(inputs.shape()[0]);
        for t in 0..inputs.shape()[0] {
            let x = tape.constant(Tensor::vector(inputs.row(t).to_vec()));
            let (h, next) = self.stack.step(tape, params, x, &state)?;
            state = next;
            let proj = tape.matmul(w, h)?;
            let o = tape.add(proj, b)?;
            rows.push(tape.reshape(o, &[1, self.output_dim])?);
        }
        Ok(tape.concat(&rows, 0)?)
    }
}

pub(crate) fn check_inputs(inputs: &Tensor, input_dim: usize) -> Result<(), ModelError> {
    if inputs.rank() != 2 || inputs.shape()[1] != input_dim || inputs.shape()[0] == 0 {
        return Err(ModelError::Tensor(crate::error::TensorError::ShapeMismatch {
            op: "forward",
            lhs: vec![0, input_dim],
            rhs: inputs.shape().to_vec(),
        }));
    }
    Ok(())
}
