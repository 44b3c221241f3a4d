//! The Neural Turing Machine cell.
//!
//! Addressing runs content lookup, interpolation with the previous weighting,
//! circular shift and sharpening in that order. Within a timestep every head
//! addresses the memory left by the previous step: reads happen first, then
//! each write head applies erase-then-add in head order.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, RngCore};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::controllers::{check_inputs, LstmState, StackedLstm};
use crate::error::ModelError;
use crate::model::SequenceModel;
use crate::params::{Init, ParamLayout, ParamStore};
use crate::tape::{ParamId, Tape, Var};
use crate::tensor::Tensor;

/// Value of every memory cell under [`InitScheme::Constant`].
pub const CONSTANT_MEMORY_VALUE: f64 = 1e-6;
/// Standard deviation of [`InitScheme::Random`] memory contents.
pub const RANDOM_MEMORY_STD: f64 = 0.5;
/// Random memory samples are redrawn beyond this many standard deviations.
pub const RANDOM_MEMORY_TRUNCATION: f64 = 2.0;
pub const COSINE_EPSILON: f64 = 1e-8;
pub const SHARPEN_EPSILON: f64 = 1e-16;

/// How the memory matrix is filled at `t = 0`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum InitScheme {
    /// Every cell set to `1e-6`.
    Constant,
    /// A trainable `N x W` matrix.
    Learned,
    /// Fresh truncated-normal draw per episode, not trained.
    Random,
}

impl InitScheme {
    pub const ALL: [InitScheme; 3] = [InitScheme::Constant, InitScheme::Learned, InitScheme::Random];

    pub fn as_str(self) -> &'static str {
        match self {
            InitScheme::Constant => "constant",
            InitScheme::Learned => "learned",
            InitScheme::Random => "random",
        }
    }
}

impl fmt::Display for InitScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for InitScheme {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "constant" => Ok(InitScheme::Constant),
            "learned" => Ok(InitScheme::Learned),
            "random" => Ok(InitScheme::Random),
            other => Err(ModelError::UnknownScheme(other.to_string())),
        }
    }
}

/// Where the controller-output clip is applied.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ClipTarget {
    /// Clip the projected head parameters and output logits.
    Projection,
    /// Clip the controller hidden output before projection.
    Hidden,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NtmConfig {
    /// Number of memory locations `N`.
    pub memory_slots: usize,
    /// Width of each memory cell `W`.
    pub cell_width: usize,
    pub read_heads: usize,
    pub write_heads: usize,
    /// Number of allowed shifts; odd.
    pub shift_range: usize,
    pub init_scheme: InitScheme,
    pub clip_bound: f64,
    pub clip_target: ClipTarget,
}

impl Default for NtmConfig {
    fn default() -> Self {
        NtmConfig {
            memory_slots: 128,
            cell_width: 20,
            read_heads: 1,
            write_heads: 1,
            shift_range: 3,
            init_scheme: InitScheme::Constant,
            clip_bound: 20.0,
            clip_target: ClipTarget::Projection,
        }
    }
}

impl NtmConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let fail = |msg: &str| Err(ModelError::Config(msg.to_string()));
        if self.memory_slots < 2 {
            return fail("memory_slots must be at least 2");
        }
        if self.cell_width < 1 {
            return fail("cell_width must be at least 1");
        }
        if self.read_heads < 1 || self.write_heads < 1 {
            return fail("at least one read head and one write head are required");
        }
        if self.shift_range % 2 == 0 || self.shift_range > self.memory_slots {
            return fail("shift_range must be odd and no larger than memory_slots");
        }
        if !(self.clip_bound > 0.0) {
            return fail("clip_bound must be positive");
        }
        Ok(())
    }

    /// Length of one head's slice of the controller projection.
    pub fn head_raw_len(&self, is_write: bool) -> usize {
        let base = self.cell_width + 3 + self.shift_range;
        if is_write {
            base + 2 * self.cell_width
        } else {
            base
        }
    }

    pub fn total_heads(&self) -> usize {
        self.read_heads + self.write_heads
    }

    /// Scalars added by learned `w0` and `r0`: `W*H_r + N*(H_r + H_w)`.
    pub fn bias_init_param_count(&self) -> usize {
        self.cell_width * self.read_heads + self.memory_slots * self.total_heads()
    }
}

/// One head's addressing (and, for write heads, erase/add) parameters after
/// their nonlinearities.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HeadParams {
    /// Key, tanh; `[W]`.
    pub key: Var,
    /// Key strength, softplus; scalar.
    pub beta: Var,
    /// Interpolation gate, sigmoid; scalar.
    pub gate: Var,
    /// Shift distribution, softmax; `[shift_range]`.
    pub shift: Var,
    /// Sharpening exponent, `1 + softplus`; scalar.
    pub gamma: Var,
    /// Erase vector, sigmoid; write heads only.
    pub erase: Option<Var>,
    /// Add vector, tanh; write heads only.
    pub add: Option<Var>,
}

/// Clips `raw` to the configured bound and maps the layout
/// `[k | beta | g | s | gamma | e | a]` through each parameter's nonlinearity.
pub fn decode_head_params(tape: &mut Tape, raw: Var, is_write: bool, cfg: &NtmConfig) -> Result<HeadParams, ModelError> {
    let expected = cfg.head_raw_len(is_write);
    let actual = tape.value(raw)?.len();
    if actual != expected || tape.value(raw)?.rank() != 1 {
        return Err(ModelError::RawLength { expected, actual });
    }
    let w = cfg.cell_width;
    let s = cfg.shift_range;
    let clipped = tape.clip(raw, -cfg.clip_bound, cfg.clip_bound)?;

    let k = tape.slice(clipped, 0, 0, w)?;
    let key = tape.tanh(k)?;
    let b = tape.slice(clipped, 0, w, 1)?;
    let beta = tape.softplus(b)?;
    let g = tape.slice(clipped, 0, w + 1, 1)?;
    let gate = tape.sigmoid(g)?;
    let sh = tape.slice(clipped, 0, w + 2, s)?;
    let shift = tape.softmax(sh, 0)?;
    let gm = tape.slice(clipped, 0, w + 2 + s, 1)?;
    let gsp = tape.softplus(gm)?;
    let gamma = tape.offset(gsp, 1.0)?;

    let (erase, add) = if is_write {
        let at = w + 3 + s;
        let e = tape.slice(clipped, 0, at, w)?;
        let a = tape.slice(clipped, 0, at + w, w)?;
        (Some(tape.sigmoid(e)?), Some(tape.tanh(a)?))
    } else {
        (None, None)
    };
    Ok(HeadParams {
        key,
        beta,
        gate,
        shift,
        gamma,
        erase,
        add,
    })
}

/// `u.v / (|u| |v| + eps)` for two vectors; scalar result.
pub fn cosine_similarity(tape: &mut Tape, u: Var, v: Var) -> Result<Var, ModelError> {
    let dot = tape.matmul(u, v)?;
    let nu = tape.l2_norm(u, None)?;
    let nv = tape.l2_norm(v, None)?;
    let prod = tape.mul(nu, nv)?;
    let denom = tape.offset(prod, COSINE_EPSILON)?;
    Ok(tape.div(dot, denom)?)
}

/// Softmax over memory rows of `beta * cosine(key, M(i))`.
pub fn content_addressing(tape: &mut Tape, memory: Var, key: Var, beta: Var) -> Result<Var, ModelError> {
    let dots = tape.matmul(memory, key)?;
    let row_norms = tape.l2_norm(memory, Some(1))?;
    let key_norm = tape.l2_norm(key, None)?;
    let prod = tape.mul_scalar(row_norms, key_norm)?;
    let denom = tape.offset(prod, COSINE_EPSILON)?;
    let sim = tape.div(dots, denom)?;
    let logits = tape.mul_scalar(sim, beta)?;
    Ok(tape.softmax(logits, 0)?)
}

/// `g * w_c + (1 - g) * w_prev`.
pub fn interpolate(tape: &mut Tape, content: Var, previous: Var, gate: Var) -> Result<Var, ModelError> {
    let neg = tape.scale(gate, -1.0)?;
    let keep = tape.offset(neg, 1.0)?;
    let a = tape.mul_scalar(content, gate)?;
    let b = tape.mul_scalar(previous, keep)?;
    Ok(tape.add(a, b)?)
}

/// Circular convolution with the shift distribution; entry `k` of `shift`
/// moves weight by `k - (len-1)/2` locations.
pub fn shift(tape: &mut Tape, weights: Var, shift: Var) -> Result<Var, ModelError> {
    Ok(tape.circular_convolve(weights, shift)?)
}

/// `w(i)^gamma / sum_j w(j)^gamma`.
///
/// The weights are first divided by the power of two just above their
/// maximum. The result is unchanged, but `sum_j w(j)^gamma` stays at least
/// `2^-gamma` instead of underflowing below the epsilon for diffuse weights
/// and large `gamma`.
pub fn sharpen(tape: &mut Tape, weights: Var, gamma: Var) -> Result<Var, ModelError> {
    let max = tape.value(weights)?.data().iter().fold(0.0f64, |m, &x| m.max(x));
    let scaled = if max > 0.0 && max.is_finite() {
        let exp = max.log2().ceil() as i32;
        tape.scale(weights, 2f64.powi(-exp))?
    } else {
        weights
    };
    let powered = tape.power(scaled, gamma)?;
    let total = tape.sum(powered, None)?;
    let denom = tape.offset(total, SHARPEN_EPSILON)?;
    Ok(tape.div_scalar(powered, denom)?)
}

/// Full addressing pipeline for one head.
pub fn address(tape: &mut Tape, memory: Var, head: &HeadParams, previous: Var) -> Result<Var, ModelError> {
    let wc = content_addressing(tape, memory, head.key, head.beta)?;
    let wg = interpolate(tape, wc, previous, head.gate)?;
    let wt = shift(tape, wg, head.shift)?;
    sharpen(tape, wt, head.gamma)
}

/// `r = sum_i w(i) M(i)`.
pub fn read(tape: &mut Tape, memory: Var, weights: Var) -> Result<Var, ModelError> {
    Ok(tape.matmul(weights, memory)?)
}

/// Erase then add: `M(i) * (1 - w(i) e) + w(i) a`.
pub fn write(tape: &mut Tape, memory: Var, weights: Var, erase: Var, add: Var) -> Result<Var, ModelError> {
    let shape = tape.value(memory)?.shape().to_vec();
    if shape.len() != 2 {
        return Err(ModelError::Config(format!("memory must be rank 2, got {shape:?}")));
    }
    let (n, w) = (shape[0], shape[1]);
    let col = tape.reshape(weights, &[n, 1])?;
    let e_row = tape.reshape(erase, &[1, w])?;
    let a_row = tape.reshape(add, &[1, w])?;
    let we = tape.matmul(col, e_row)?;
    let neg = tape.scale(we, -1.0)?;
    let retain = tape.offset(neg, 1.0)?;
    let erased = tape.mul(memory, retain)?;
    let wa = tape.matmul(col, a_row)?;
    Ok(tape.add(erased, wa)?)
}

/// Memory, the previous weighting of every head (read heads first) and the
/// previous read vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct NtmState {
    pub memory: Var,
    pub weights: Vec<Var>,
    pub reads: Vec<Var>,
}

/// Trainable initial-state parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct InitParams {
    /// Present only under [`InitScheme::Learned`].
    pub memory: Option<ParamId>,
    /// One `[N]` logit vector per head, read heads first.
    pub w0_logits: Vec<ParamId>,
    /// One `[W]` vector per read head.
    pub r0_raw: Vec<ParamId>,
}

impl InitParams {
    pub fn declare(layout: &mut ParamLayout, cfg: &NtmConfig) -> Self {
        let (n, w) = (cfg.memory_slots, cfg.cell_width);
        let glorot = |fan_out: usize| (6.0 / (1 + fan_out) as f64).sqrt();
        let memory = (cfg.init_scheme == InitScheme::Learned)
            .then(|| layout.declare("init.memory", &[n, w], Init::Uniform(glorot(n * w))));
        let mut w0_logits = Vec::with_capacity(cfg.total_heads());
        for h in 0..cfg.read_heads {
            w0_logits.push(layout.declare(format!("init.w0.read{h}"), &[n], Init::Uniform(glorot(n))));
        }
        for h in 0..cfg.write_heads {
            w0_logits.push(layout.declare(format!("init.w0.write{h}"), &[n], Init::Uniform(glorot(n))));
        }
        let r0_raw = (0..cfg.read_heads)
            .map(|h| layout.declare(format!("init.r0.read{h}"), &[w], Init::Uniform(glorot(w))))
            .collect();
        InitParams {
            memory,
            w0_logits,
            r0_raw,
        }
    }
}

/// Draws an `N x W` matrix from a normal(0, 0.5) truncated at two standard
/// deviations by rejection.
pub fn sample_random_memory<R: Rng + ?Sized>(rng: &mut R, slots: usize, width: usize) -> Tensor {
    let normal = Normal::new(0.0, RANDOM_MEMORY_STD).expect("valid normal parameters");
    let bound = RANDOM_MEMORY_TRUNCATION * RANDOM_MEMORY_STD;
    let mut t = Tensor::zeros(&[slots, width]);
    for x in t.data_mut() {
        *x = loop {
            let v: f64 = normal.sample(rng);
            if v.abs() <= bound {
                break v;
            }
        };
    }
    t
}

/// Builds the `t = 0` state: memory per scheme, `w0 = softmax(logits)` per
/// head and `r0 = tanh(raw)` per read head.
pub fn init_state(
    tape: &mut Tape,
    cfg: &NtmConfig,
    init: &InitParams,
    params: &ParamStore,
    rng: &mut dyn RngCore,
) -> Result<NtmState, ModelError> {
    let (n, w) = (cfg.memory_slots, cfg.cell_width);
    let memory = match (cfg.init_scheme, init.memory) {
        (InitScheme::Constant, _) => tape.constant(Tensor::full(&[n, w], CONSTANT_MEMORY_VALUE)),
        (InitScheme::Learned, Some(id)) => tape.param(id, params.get(id)),
        (InitScheme::Learned, None) => {
            return Err(ModelError::Config("learned scheme requires a memory parameter".into()))
        }
        (InitScheme::Random, _) => tape.constant(sample_random_memory(rng, n, w)),
    };
    let mut weights = Vec::with_capacity(init.w0_logits.len());
    for &id in &init.w0_logits {
        let logits = tape.param(id, params.get(id));
        weights.push(tape.softmax(logits, 0)?);
    }
    let mut reads = Vec::with_capacity(init.r0_raw.len());
    for &id in &init.r0_raw {
        let raw = tape.param(id, params.get(id));
        reads.push(tape.tanh(raw)?);
    }
    Ok(NtmState { memory, weights, reads })
}

/// NTM with a stacked LSTM controller and a single linear projection emitting
/// all head parameters followed by the output logits.
#[derive(Debug, Clone, PartialEq)]
pub struct NtmModel {
    cfg: NtmConfig,
    input_dim: usize,
    output_dim: usize,
    controller: StackedLstm,
    proj_weight: ParamId,
    proj_bias: ParamId,
    init: InitParams,
    layout: ParamLayout,
}

impl NtmModel {
    pub fn new(
        cfg: NtmConfig,
        input_dim: usize,
        output_dim: usize,
        controller_units: usize,
        controller_layers: usize,
    ) -> Result<Self, ModelError> {
        cfg.validate()?;
        let mut layout = ParamLayout::new();
        let controller_input = input_dim + cfg.read_heads * cfg.cell_width;
        let controller = StackedLstm::declare(
            &mut layout,
            "controller",
            controller_input,
            controller_units,
            controller_layers,
        )?;
        let raw_len = cfg.read_heads * cfg.head_raw_len(false) + cfg.write_heads * cfg.head_raw_len(true) + output_dim;
        let limit = (1.0 / controller_units as f64).sqrt();
        let proj_weight = layout.declare("projection.weight", &[raw_len, controller_units], Init::Uniform(limit));
        let proj_bias = layout.declare("projection.bias", &[raw_len], Init::Zeros);
        let init = InitParams::declare(&mut layout, &cfg);
        Ok(NtmModel {
            cfg,
            input_dim,
            output_dim,
            controller,
            proj_weight,
            proj_bias,
            init,
            layout,
        })
    }

    pub fn config(&self) -> &NtmConfig {
        &self.cfg
    }

    pub fn controller(&self) -> &StackedLstm {
        &self.controller
    }

    pub fn init_params(&self) -> &InitParams {
        &self.init
    }

    pub fn projection(&self) -> (ParamId, ParamId) {
        (self.proj_weight, self.proj_bias)
    }

    /// Initial memory/attention/read state plus a zeroed controller state.
    pub fn initial_state(
        &self,
        tape: &mut Tape,
        params: &ParamStore,
        rng: &mut dyn RngCore,
    ) -> Result<(NtmState, LstmState), ModelError> {
        let state = init_state(tape, &self.cfg, &self.init, params, rng)?;
        let ctrl = self.controller.zero_state(tape);
        Ok((state, ctrl))
    }

    /// One timestep. Returns the output logits and the next states.
    pub fn step(
        &self,
        tape: &mut Tape,
        params: &ParamStore,
        x: Var,
        state: &NtmState,
        ctrl: &LstmState,
    ) -> Result<(Var, NtmState, LstmState), ModelError> {
        let cfg = &self.cfg;
        let mut parts = Vec::with_capacity(1 + state.reads.len());
        parts.push(x);
        parts.extend_from_slice(&state.reads);
        let input = tape.concat(&parts, 0)?;
        let (h, next_ctrl) = self.controller.step(tape, params, input, ctrl)?;
        let h = match cfg.clip_target {
            ClipTarget::Hidden => tape.clip(h, -cfg.clip_bound, cfg.clip_bound)?,
            ClipTarget::Projection => h,
        };
        let pw = tape.param(self.proj_weight, params.get(self.proj_weight));
        let pb = tape.param(self.proj_bias, params.get(self.proj_bias));
        let proj = tape.matmul(pw, h)?;
        let raw = tape.add(proj, pb)?;

        let mut heads = Vec::with_capacity(cfg.total_heads());
        let mut at = 0;
        for i in 0..cfg.total_heads() {
            let is_write = i >= cfg.read_heads;
            let len = cfg.head_raw_len(is_write);
            let slice = tape.slice(raw, 0, at, len)?;
            heads.push(decode_head_params(tape, slice, is_write, cfg)?);
            at += len;
        }
        let out_raw = tape.slice(raw, 0, at, self.output_dim)?;
        let output = match cfg.clip_target {
            ClipTarget::Projection => tape.clip(out_raw, -cfg.clip_bound, cfg.clip_bound)?,
            ClipTarget::Hidden => out_raw,
        };

        let mut weights = Vec::with_capacity(heads.len());
        let mut reads = Vec::with_capacity(cfg.read_heads);
        for (head, &prev) in heads[..cfg.read_heads].iter().zip(&state.weights) {
            let w = address(tape, state.memory, head, prev)?;
            reads.push(read(tape, state.memory, w)?);
            weights.push(w);
        }
        let mut memory = state.memory;
        for (head, &prev) in heads[cfg.read_heads..].iter().zip(&state.weights[cfg.read_heads..]) {
            let w = address(tape, state.memory, head, prev)?;
            let (e, a) = head.erase.zip(head.add).expect("write heads carry erase and add");
            memory = write(tape, memory, w, e, a)?;
            weights.push(w);
        }
        Ok((output, NtmState { memory, weights, reads }, next_ctrl))
    }
}

impl SequenceModel for NtmModel {
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
        rng: &mut dyn RngCore,
    ) -> Result<Var, ModelError> {
        check_inputs(inputs, self.input_dim)?;
        let (mut state, mut ctrl) = self.initial_state(tape, params, rng)?;
        let steps = inputs.shape()[0];
        let mut rows = Vec::with_capacity(steps);
        for t in 0..steps {
            let x = tape.constant(Tensor::vector(inputs.row(t).to_vec()));
            let (o, next_state, next_ctrl) = self.step(tape, params, x, &state, &ctrl)?;
            state = next_state;
            ctrl = next_ctrl;
            rows.push(tape.reshape(o, &[1, self.output_dim])?);
        }
        Ok(tape.concat(&rows, 0)?)
    }
}
