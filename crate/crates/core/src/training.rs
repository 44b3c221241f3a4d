//! Loss, optimizer, gradient clipping and the training loop.

use std::io;
use std::time::Instant;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::error::{ModelError, TensorError};
use crate::model::{ModelSpec, SequenceModel};
use crate::params::ParamStore;
use crate::tape::{Tape, Var};
use crate::tasks::{generate, Episode, TaskConfig, TaskError};
use crate::tensor::Tensor;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPSILON: f64 = 1e-8;

const INIT_STREAM: u64 = 0;
const TRAIN_STREAM: u64 = 1;
const VALIDATION_STREAM: u64 = 2;
const EPISODE_MODEL_STREAM: u64 = 7;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Task(#[from] TaskError),
    #[error("episode mask selects no steps")]
    EmptyMask,
    #[error("non-finite {what} at step {step}: {name} = {value}")]
    NonFinite {
        step: u64,
        what: &'static str,
        name: String,
        value: f64,
    },
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("curve sink failed: {0}")]
    Sink(#[from] io::Error),
}

impl From<TensorError> for TrainError {
    fn from(e: TensorError) -> Self {
        TrainError::Model(e.into())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub max_grad_norm: f64,
    pub batch_size: usize,
    pub total_steps: u64,
    pub eval_every: u64,
    pub eval_examples: usize,
    pub seed: u64,
    pub model: ModelSpec,
    pub task: TaskConfig,
}

impl TrainConfig {
    pub fn new(model: ModelSpec, task: TaskConfig) -> Self {
        TrainConfig {
            learning_rate: 0.001,
            max_grad_norm: 50.0,
            batch_size: 32,
            total_steps: 20_000,
            eval_every: 200,
            eval_examples: 640,
            seed: 0,
            model,
            task,
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return bad("learning_rate must be finite and non-negative");
        }
        if !(self.max_grad_norm > 0.0) {
            return bad("max_grad_norm must be positive");
        }
        if self.batch_size == 0 || self.eval_examples == 0 {
            return bad("batch_size and eval_examples must be positive");
        }
        if self.eval_every == 0 || self.total_steps == 0 || self.eval_every > self.total_steps {
            return bad("eval_every must be positive and at most total_steps");
        }
        self.task.validate()?;
        Ok(())
    }
}

/// One validation measurement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub step: u64,
    pub val_loss: f64,
    pub val_bits_per_seq: f64,
    pub wall_ms: u64,
}

impl CurvePoint {
    /// Equality on everything except elapsed time.
    pub fn same_metrics(&self, other: &CurvePoint) -> bool {
        self.step == other.step
            && self.val_loss.to_bits() == other.val_loss.to_bits()
            && self.val_bits_per_seq.to_bits() == other.val_bits_per_seq.to_bits()
    }
}

/// Receives curve points as they are produced.
pub trait CurveSink {
    fn record(&mut self, point: &CurvePoint) -> io::Result<()>;
}

impl CurveSink for Vec<CurvePoint> {
    fn record(&mut self, point: &CurvePoint) -> io::Result<()> {
        self.push(point.clone());
        Ok(())
    }
}

/// Discards every point.
pub struct NullSink;

impl CurveSink for NullSink {
    fn record(&mut self, _: &CurvePoint) -> io::Result<()> {
        Ok(())
    }
}

fn mask_matrix(mask: &[f64], channels: usize) -> Tensor {
    let data = mask.iter().flat_map(|&m| std::iter::repeat(m).take(channels)).collect();
    Tensor::new(vec![mask.len(), channels], data).expect("mask matrix shape")
}

/// Sum of sigmoid cross-entropy over masked steps and all channels.
pub fn masked_bce_sum(tape: &mut Tape, logits: Var, targets: &Tensor, mask: &[f64]) -> Result<Var, TrainError> {
    let shape = tape.value(logits)?.shape().to_vec();
    if shape.len() != 2 || shape[0] != mask.len() {
        return Err(TensorError::ShapeMismatch {
            op: "masked_bce",
            lhs: shape,
            rhs: vec![mask.len()],
        }
        .into());
    }
    let per_element = tape.bce_with_logits(logits, targets)?;
    let m = tape.constant(mask_matrix(mask, shape[1]));
    let masked = tape.mul(per_element, m)?;
    Ok(tape.sum(masked, None)?)
}

/// Mean sigmoid cross-entropy over masked steps and channels.
pub fn masked_bce_loss(tape: &mut Tape, logits: Var, targets: &Tensor, mask: &[f64]) -> Result<Var, TrainError> {
    let active: f64 = mask.iter().sum();
    if active <= 0.0 {
        return Err(TrainError::EmptyMask);
    }
    let total = masked_bce_sum(tape, logits, targets, mask)?;
    let channels = targets.shape()[1] as f64;
    Ok(tape.scale(total, 1.0 / (active * channels))?)
}

/// Number of masked target bits whose thresholded prediction `sigmoid(z) >= 0.5`
/// disagrees with the target.
pub fn bit_errors(logits: &Tensor, targets: &Tensor, mask: &[f64]) -> usize {
    let channels = targets.shape()[1];
    mask.iter()
        .enumerate()
        .filter(|(_, &m)| m != 0.0)
        .map(|(t, _)| {
            (0..channels)
                .filter(|&c| {
                    let predicted = logits.at2(t, c) >= 0.0;
                    predicted != (targets.at2(t, c) >= 0.5)
                })
                .count()
        })
        .sum()
}

/// Mean bit errors per sequence over a batch of `(logits, episode)` pairs.
pub fn bits_per_sequence(batch: &[(Tensor, &Episode)]) -> f64 {
    if batch.is_empty() {
        return 0.0;
    }
    let total: usize = batch.iter().map(|(z, ep)| bit_errors(z, &ep.targets, &ep.mask)).sum();
    total as f64 / batch.len() as f64
}

/// Scales gradients so their joint L2 norm is at most `max_norm`. Returns the
/// pre-clip norm. Non-finite entries are reported with their parameter name.
pub fn clip_by_global_norm(
    grads: &mut [Tensor],
    names: &[&str],
    max_norm: f64,
    step: u64,
) -> Result<f64, TrainError> {
    let mut sq = 0.0;
    for (g, name) in grads.iter().zip(names) {
        if let Some(&bad) = g.data().iter().find(|x| !x.is_finite()) {
            return Err(TrainError::NonFinite {
                step,
                what: "gradient",
                name: name.to_string(),
                value: bad,
            });
        }
        sq += g.squared_norm();
    }
    let norm = sq.sqrt();
    if norm > max_norm {
        let scale = max_norm / norm;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|x| *x *= scale);
        }
    }
    Ok(norm)
}

/// Adam moments and step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = params.iter().map(|(_, p)| Tensor::zeros(p.value.shape())).collect();
        AdamState {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }
}

/// One bias-corrected Adam update of every parameter.
pub fn adam_step(params: &mut ParamStore, grads: &[Tensor], state: &mut AdamState, lr: f64) {
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - ADAM_BETA1.powi(t);
    let c2 = 1.0 - ADAM_BETA2.powi(t);
    for (i, id) in params.ids().collect::<Vec<_>>().into_iter().enumerate() {
        let p = params.get_mut(id).data_mut();
        let g = grads[i].data();
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for j in 0..p.len() {
            m[j] = ADAM_BETA1 * m[j] + (1.0 - ADAM_BETA1) * g[j];
            v[j] = ADAM_BETA2 * v[j] + (1.0 - ADAM_BETA2) * g[j] * g[j];
            let m_hat = m[j] / c1;
            let v_hat = v[j] / c2;
            p[j] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPSILON);
        }
    }
}

fn episode_model_rng(episode_seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(episode_seed);
    rng.set_stream(EPISODE_MODEL_STREAM);
    rng
}

/// Forward pass and mean masked loss for one episode.
pub fn episode_loss(
    model: &dyn SequenceModel,
    params: &ParamStore,
    episode: &Episode,
) -> Result<(Tape, Var, Var), TrainError> {
    let mut tape = Tape::new();
    let mut rng = episode_model_rng(episode.meta.seed.unwrap_or(0));
    let logits = model.forward(&mut tape, params, &episode.inputs, &mut rng)?;
    let loss = masked_bce_loss(&mut tape, logits, &episode.targets, &episode.mask)?;
    Ok((tape, logits, loss))
}

/// Validation loss and bits-per-sequence.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    pub loss: f64,
    pub bits_per_seq: f64,
}

/// Mean loss and bit errors over `n_examples` episodes drawn from a generator
/// seeded with `seed`. Parameters are not modified.
pub fn evaluate(
    model: &dyn SequenceModel,
    params: &ParamStore,
    task: &TaskConfig,
    n_examples: usize,
    seed: u64,
) -> Result<Evaluation, TrainError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut loss = 0.0;
    let mut errors = 0usize;
    for _ in 0..n_examples {
        let episode = generate(task, rng.next_u64());
        let (tape, logits, l) = episode_loss(model, params, &episode)?;
        loss += tape.value(l)?.item()?;
        errors += bit_errors(tape.value(logits)?, &episode.targets, &episode.mask);
    }
    let n = n_examples.max(1) as f64;
    Ok(Evaluation {
        loss: loss / n,
        bits_per_seq: errors as f64 / n,
    })
}

/// Everything needed to continue a run exactly where it stopped.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainerState {
    pub params: ParamStore,
    pub adam: AdamState,
    pub step: u64,
    /// `(seed, word position)` of the training-episode stream.
    pub train_rng: (u64, u128),
    /// `(seed, word position)` of the validation-seed stream.
    pub val_rng: (u64, u128),
    pub curve: Vec<CurvePoint>,
    pub elapsed_ms: u64,
}

/// A single training run: owns the model, parameters, optimizer state and
/// the two random streams.
pub struct Trainer {
    cfg: TrainConfig,
    model: Box<dyn SequenceModel>,
    params: ParamStore,
    adam: AdamState,
    step: u64,
    train_rng: ChaCha8Rng,
    val_rng: ChaCha8Rng,
    curve: Vec<CurvePoint>,
    elapsed_before: u64,
    started: Instant,
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

impl Trainer {
    pub fn new(cfg: TrainConfig) -> Result<Self, TrainError> {
        cfg.validate()?;
        let model = cfg.model.build(cfg.task.input_dim(), cfg.task.output_dim())?;
        let params = model.layout().instantiate(&mut stream(cfg.seed, INIT_STREAM));
        let adam = AdamState::new(&params);
        Ok(Trainer {
            model,
            params,
            adam,
            step: 0,
            train_rng: stream(cfg.seed, TRAIN_STREAM),
            val_rng: stream(cfg.seed, VALIDATION_STREAM),
            curve: Vec::new(),
            elapsed_before: 0,
            started: Instant::now(),
            cfg,
        })
    }

    /// Rebuilds a trainer from saved state.
    pub fn resume(cfg: TrainConfig, state: TrainerState) -> Result<Self, TrainError> {
        let mut trainer = Trainer::new(cfg)?;
        if !trainer.model.layout().matches(&state.params) || state.adam.m.len() != state.params.len() {
            return Err(TrainError::Config("saved parameters do not match the model layout".into()));
        }
        trainer.params = state.params;
        trainer.adam = state.adam;
        trainer.step = state.step;
        trainer.train_rng = stream(state.train_rng.0, TRAIN_STREAM);
        trainer.train_rng.set_word_pos(state.train_rng.1);
        trainer.val_rng = stream(state.val_rng.0, VALIDATION_STREAM);
        trainer.val_rng.set_word_pos(state.val_rng.1);
        trainer.curve = state.curve;
        trainer.elapsed_before = state.elapsed_ms;
        Ok(trainer)
    }

    pub fn state(&self) -> TrainerState {
        TrainerState {
            params: self.params.clone(),
            adam: self.adam.clone(),
            step: self.step,
            train_rng: (self.cfg.seed, self.train_rng.get_word_pos()),
            val_rng: (self.cfg.seed, self.val_rng.get_word_pos()),
            curve: self.curve.clone(),
            elapsed_ms: self.elapsed_ms(),
        }
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn model(&self) -> &dyn SequenceModel {
        self.model.as_ref()
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn adam(&self) -> &AdamState {
        &self.adam
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn curve(&self) -> &[CurvePoint] {
        &self.curve
    }

    fn elapsed_ms(&self) -> u64 {
        self.elapsed_before + self.started.elapsed().as_millis() as u64
    }

    /// Mean loss and mean gradient over one freshly drawn batch.
    pub fn batch_gradients(&mut self) -> Result<(f64, Vec<Tensor>), TrainError> {
        let mut grads: Vec<Tensor> = self.params.iter().map(|(_, p)| Tensor::zeros(p.value.shape())).collect();
        let mut loss = 0.0;
        for _ in 0..self.cfg.batch_size {
            let episode = generate(&self.cfg.task, self.train_rng.next_u64());
            let (tape, _, l) = episode_loss(self.model.as_ref(), &self.params, &episode)?;
            loss += tape.value(l)?.item()?;
            for (id, g) in tape.backward(l)?.iter() {
                grads[id.0].add_assign(g)?;
            }
        }
        let scale = 1.0 / self.cfg.batch_size as f64;
        for g in &mut grads {
            g.data_mut().iter_mut().for_each(|x| *x *= scale);
        }
        Ok((loss * scale, grads))
    }

    /// One optimization step. Returns the batch loss.
    pub fn train_step(&mut self) -> Result<f64, TrainError> {
        let step = self.step + 1;
        let (loss, mut grads) = self.batch_gradients()?;
        if !loss.is_finite() {
            return Err(TrainError::NonFinite {
                step,
                what: "loss",
                name: "batch".into(),
                value: loss,
            });
        }
        let names: Vec<&str> = self.params.iter().map(|(_, p)| p.name.as_str()).collect();
        clip_by_global_norm(&mut grads, &names, self.cfg.max_grad_norm, step)?;
        adam_step(&mut self.params, &grads, &mut self.adam, self.cfg.learning_rate);
        for (_, p) in self.params.iter() {
            if let Some(&bad) = p.value.data().iter().find(|x| !x.is_finite()) {
                return Err(TrainError::NonFinite {
                    step,
                    what: "parameter",
                    name: p.name.clone(),
                    value: bad,
                });
            }
        }
        self.step = step;
        Ok(loss)
    }

    /// Evaluates on `eval_examples` episodes seeded from the validation stream
    /// and appends the result to the curve.
    pub fn record_evaluation(&mut self) -> Result<CurvePoint, TrainError> {
        let seed = self.val_rng.next_u64();
        let eval = evaluate(
            self.model.as_ref(),
            &self.params,
            &self.cfg.task,
            self.cfg.eval_examples,
            seed,
        )?;
        let point = CurvePoint {
            step: self.step,
            val_loss: eval.loss,
            val_bits_per_seq: eval.bits_per_seq,
            wall_ms: self.elapsed_ms(),
        };
        self.curve.push(point.clone());
        Ok(point)
    }

    /// Trains until `target` steps, evaluating every `eval_every` steps.
    pub fn run_until(&mut self, target: u64, sink: &mut dyn CurveSink) -> Result<(), TrainError> {
        while self.step < target {
            self.train_step()?;
            if self.step % self.cfg.eval_every == 0 {
                let point = self.record_evaluation()?;
                sink.record(&point)?;
            }
        }
        Ok(())
    }

    pub fn into_params(self) -> ParamStore {
        self.params
    }
}

/// Result of [`train`]: the curve and final parameters, or the failure and the
/// points recorded before it.
#[derive(Debug)]
pub struct TrainOutcome {
    pub curve: Vec<CurvePoint>,
    pub params: ParamStore,
    pub error: Option<TrainError>,
}

/// Runs `cfg.total_steps` optimization steps from scratch.
pub fn train(cfg: TrainConfig, sink: &mut dyn CurveSink) -> Result<TrainOutcome, TrainError> {
    let total = cfg.total_steps;
    let mut trainer = Trainer::new(cfg)?;
    let error = trainer.run_until(total, sink).err();
    Ok(TrainOutcome {
        curve: trainer.curve.clone(),
        params: trainer.into_params(),
        error,
    })
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::ntm::NtmConfig;
    use crate::tasks::{copy_episode, Range, TaskKind};
    use approx::assert_abs_diff_eq;

    fn logits_var(tape: &mut Tape, rows: &[Vec<f64>]) -> Var {
        tape.constant(Tensor::from_rows(rows).unwrap())
    }

    #[test]
    fn zero_logits_give_ln2_loss() {
        let mut tape = Tape::new();
        let z = logits_var(&mut tape, &[vec![0.0; 3], vec![0.0; 3]]);
        let y = Tensor::from_rows(&[vec![1., 0., 1.], vec![0., 0., 1.]]).unwrap();
        let l = masked_bce_loss(&mut tape, z, &y, &[1.0, 1.0]).unwrap();
        assert_abs_diff_eq!(tape.value(l).unwrap().item().unwrap(), 2f64.ln(), epsilon = 1e-15);
    }

    #[test]
    fn saturated_correct_logits_give_tiny_loss() {
        let mut tape = Tape::new();
        let z = logits_var(&mut tape, &[vec![20., -20.], vec![-20., 20.]]);
        let y = Tensor::from_rows(&[vec![1., 0.], vec![0., 1.]]).unwrap();
        let l = masked_bce_loss(&mut tape, z, &y, &[1.0, 1.0]).unwrap();
        assert!(tape.value(l).unwrap().item().unwrap() < 1e-8);
    }

    #[test]
    fn masked_step_contributes_nothing() {
        let y = Tensor::from_rows(&[vec![1., 0.], vec![0., 1.]]).unwrap();
        let mut tape = Tape::new();
        let z = logits_var(&mut tape, &[vec![3., -1.], vec![-7., 0.5]]);
        let both = masked_bce_sum(&mut tape, z, &y, &[1.0, 0.0]).unwrap();
        let z2 = logits_var(&mut tape, &[vec![3., -1.], vec![100., -100.]]);
        let other = masked_bce_sum(&mut tape, z2, &y, &[1.0, 0.0]).unwrap();
        assert_eq!(tape.value(both).unwrap(), tape.value(other).unwrap());
        let zero = masked_bce_sum(&mut tape, z, &y, &[0.0, 0.0]).unwrap();
        assert_eq!(tape.value(zero).unwrap().item().unwrap(), 0.0);
        assert!(matches!(
            masked_bce_loss(&mut tape, z, &y, &[0.0, 0.0]),
            Err(TrainError::EmptyMask)
        ));
    }

    #[test]
    fn bit_error_counting() {
        let ep = copy_episode(2, &[vec![1., 0.], vec![0., 1.]]);
        let mut perfect = Tensor::zeros(&[5, 2]);
        for t in 0..5 {
            for c in 0..2 {
                let y = ep.targets.at2(t, c);
                perfect.data_mut()[t * 2 + c] = if y > 0.5 { 5.0 } else { -5.0 };
            }
        }
        assert_eq!(bit_errors(&perfect, &ep.targets, &ep.mask), 0);
        // zero logits predict 1 everywhere: wrong exactly on the zero targets
        assert_eq!(bit_errors(&Tensor::zeros(&[5, 2]), &ep.targets, &ep.mask), 2);

        let mut one_wrong = perfect.clone();
        one_wrong.data_mut()[3 * 2] = -5.0;
        let batch = vec![
            (one_wrong, &ep),
            (perfect.clone(), &ep),
            (perfect.clone(), &ep),
            (perfect.clone(), &ep),
        ];
        assert_eq!(bits_per_sequence(&batch), 0.25);
    }

    #[test]
    fn clipping_cases() {
        let names = ["a", "b"];
        let mut g = vec![Tensor::vector(vec![6.0, 8.0]), Tensor::vector(vec![0.0])];
        assert_eq!(clip_by_global_norm(&mut g, &names, 50.0, 1).unwrap(), 10.0);
        assert_eq!(g[0].data(), &[6.0, 8.0]);

        let mut g = vec![Tensor::vector(vec![30.0, 40.0]), Tensor::vector(vec![0.0])];
        clip_by_global_norm(&mut g, &names, 50.0, 1).unwrap();
        assert_eq!(g[0].data(), &[30.0, 40.0]);

        let mut g = vec![Tensor::vector(vec![60.0, 80.0]), Tensor::vector(vec![0.0])];
        clip_by_global_norm(&mut g, &names, 50.0, 1).unwrap();
        assert_eq!(g[0].data(), &[30.0, 40.0]);

        let mut g = vec![Tensor::vector(vec![1.0]), Tensor::vector(vec![f64::NAN])];
        match clip_by_global_norm(&mut g, &names, 50.0, 17) {
            Err(TrainError::NonFinite { step, name, .. }) => {
                assert_eq!(step, 17);
                assert_eq!(name, "b");
            }
            other => panic!("expected non-finite error, got {other:?}"),
        }
    }

    #[test]
    fn adam_zero_gradient_keeps_params() {
        let mut store = ParamStore::new();
        store.add("p", Tensor::vector(vec![1.0, -2.0]));
        let before = store.clone();
        let mut state = AdamState::new(&store);
        adam_step(&mut store, &[Tensor::zeros(&[2])], &mut state, 0.001);
        assert_eq!(store, before);
        assert_eq!(state.t, 1);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut store = ParamStore::new();
        store.add("p", Tensor::scalar(1.0));
        let mut state = AdamState::new(&store);
        adam_step(&mut store, &[Tensor::scalar(4.0)], &mut state, 0.001);
        let p = store.get(crate::tape::ParamId(0)).item().unwrap();
        assert_abs_diff_eq!(p, 0.999, epsilon = 1e-11);
    }

    pub(crate) fn tiny_config() -> TrainConfig {
        let ntm = NtmConfig {
            memory_slots: 6,
            cell_width: 3,
            ..NtmConfig::default()
        };
        let task = TaskConfig {
            kind: TaskKind::Copy,
            bits: 2,
            length: Range::new(1, 2),
            ..TaskConfig::copy()
        };
        TrainConfig {
            batch_size: 2,
            total_steps: 4,
            eval_every: 2,
            eval_examples: 4,
            seed: 11,
            ..TrainConfig::new(
                ModelSpec::Ntm {
                    ntm,
                    controller_units: 5,
                    controller_layers: 1,
                },
                task,
            )
        }
    }

    #[test]
    fn config_validation() {
        assert!(tiny_config().validate().is_ok());
        assert!(TrainConfig { eval_every: 5, ..tiny_config() }.validate().is_err());
        assert!(TrainConfig { batch_size: 0, ..tiny_config() }.validate().is_err());
        assert!(TrainConfig { max_grad_norm: 0.0, ..tiny_config() }.validate().is_err());
    }

    #[test]
    fn curve_has_one_point_per_eval_interval() {
        let mut sink = Vec::new();
        let out = train(tiny_config(), &mut sink).unwrap();
        assert!(out.error.is_none());
        assert_eq!(out.curve.len(), 2);
        assert_eq!(sink.len(), 2);
        assert_eq!(out.curve[0].step, 2);
        assert_eq!(out.curve[1].step, 4);
    }

    #[test]
    fn zero_learning_rate_keeps_params_bit_identical() {
        let cfg = TrainConfig {
            learning_rate: 0.0,
            ..tiny_config()
        };
        let mut trainer = Trainer::new(cfg).unwrap();
        let before = trainer.params().checksum();
        trainer.train_step().unwrap();
        assert_eq!(trainer.params().checksum(), before);
    }

    #[test]
    fn evaluate_is_pure_and_repeatable() {
        let trainer = Trainer::new(tiny_config()).unwrap();
        let before = trainer.params().checksum();
        let adam_before = trainer.adam().clone();
        let task = &trainer.config().task;
        let a = evaluate(trainer.model(), trainer.params(), task, 8, 99).unwrap();
        let b = evaluate(trainer.model(), trainer.params(), task, 8, 99).unwrap();
        assert_eq!(a, b);
        assert_eq!(trainer.params().checksum(), before);
        assert_eq!(trainer.adam(), &adam_before);
    }

    #[test]
    fn zero_output_model_has_ln2_validation_loss() {
        let mut trainer = Trainer::new(tiny_config()).unwrap();
        let ids: Vec<_> = trainer.params().ids().collect();
        let params = &mut trainer.params;
        for id in ids {
            params.get_mut(id).data_mut().fill(0.0);
        }
        let e = evaluate(trainer.model(), trainer.params(), &trainer.config().task, 16, 3).unwrap();
        assert_abs_diff_eq!(e.loss, 2f64.ln(), epsilon = 1e-12);
    }
}
