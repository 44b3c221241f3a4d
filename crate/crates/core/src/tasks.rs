//! Seeded episode generators for Copy, Repeat Copy and Associative Recall.
//!
//! Channel layout, with `B` payload bits:
//!
//! | task               | inputs                                      | targets               |
//! |--------------------|---------------------------------------------|-----------------------|
//! | copy               | `B` payload, delimiter at `B`               | `B` payload           |
//! | repeat copy        | `B` payload, delimiter at `B`, repeat `B+1` | `B` payload, end `B`  |
//! | associative recall | `B` payload, item mark `B`, query mark `B+1`| `B` payload           |
//!
//! Answer steps receive all-zero input and are the only masked-in steps.

use std::fmt;
use std::io::{self, Write};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::Tensor;

/// Vectors per associative-recall item.
pub const ITEM_STEPS: usize = 3;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TaskError {
    #[error("unknown task {0:?}")]
    UnknownTask(String),
    #[error("invalid task configuration: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Copy,
    RepeatCopy,
    AssociativeRecall,
}

impl TaskKind {
    pub fn as_str(self) -> &'static str {
        match self {
            TaskKind::Copy => "copy",
            TaskKind::RepeatCopy => "repeat_copy",
            TaskKind::AssociativeRecall => "associative_recall",
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TaskKind {
    type Err = TaskError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "copy" => Ok(TaskKind::Copy),
            "repeat_copy" => Ok(TaskKind::RepeatCopy),
            "associative_recall" => Ok(TaskKind::AssociativeRecall),
            other => Err(TaskError::UnknownTask(other.to_string())),
        }
    }
}

/// Inclusive integer range.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Range {
    pub min: usize,
    pub max: usize,
}

impl Range {
    pub const fn new(min: usize, max: usize) -> Self {
        Range { min, max }
    }

    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        rng.gen_range(self.min..=self.max)
    }
}

impl fmt::Display for Range {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}..{}", self.min, self.max)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskConfig {
    pub kind: TaskKind,
    /// Payload width.
    pub bits: usize,
    /// Sequence length (copy, repeat copy).
    pub length: Range,
    /// Repeat count (repeat copy).
    pub repeats: Range,
    /// Item count (associative recall).
    pub items: Range,
}

impl TaskConfig {
    /// 8-bit vectors, lengths 1..=20.
    pub fn copy() -> Self {
        TaskConfig {
            kind: TaskKind::Copy,
            bits: 8,
            length: Range::new(1, 20),
            repeats: Range::new(1, 1),
            items: Range::new(2, 2),
        }
    }

    /// 8-bit vectors, lengths 1..=10, repeats 1..=10.
    pub fn repeat_copy() -> Self {
        TaskConfig {
            kind: TaskKind::RepeatCopy,
            length: Range::new(1, 10),
            repeats: Range::new(1, 10),
            ..Self::copy()
        }
    }

    /// Items of three 6-bit vectors, 2..=6 items.
    pub fn associative_recall() -> Self {
        TaskConfig {
            kind: TaskKind::AssociativeRecall,
            bits: 6,
            items: Range::new(2, 6),
            ..Self::copy()
        }
    }

    pub fn for_kind(kind: TaskKind) -> Self {
        match kind {
            TaskKind::Copy => Self::copy(),
            TaskKind::RepeatCopy => Self::repeat_copy(),
            TaskKind::AssociativeRecall => Self::associative_recall(),
        }
    }

    pub fn validate(&self) -> Result<(), TaskError> {
        let bad = |m: String| Err(TaskError::Config(m));
        if self.bits == 0 {
            return bad("bits must be at least 1".into());
        }
        let check = |name: &str, r: Range, floor: usize| {
            if r.min < floor || r.min > r.max {
                Err(TaskError::Config(format!("{name} range {r} must be nonempty with minimum >= {floor}")))
            } else {
                Ok(())
            }
        };
        match self.kind {
            TaskKind::Copy => check("length", self.length, 1),
            TaskKind::RepeatCopy => {
                check("length", self.length, 1)?;
                check("repeat", self.repeats, 1)
            }
            TaskKind::AssociativeRecall => check("item", self.items, 2),
        }
    }

    pub fn input_dim(&self) -> usize {
        match self.kind {
            TaskKind::Copy => self.bits + 1,
            TaskKind::RepeatCopy | TaskKind::AssociativeRecall => self.bits + 2,
        }
    }

    pub fn output_dim(&self) -> usize {
        match self.kind {
            TaskKind::Copy | TaskKind::AssociativeRecall => self.bits,
            TaskKind::RepeatCopy => self.bits + 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeMeta {
    pub task: TaskKind,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub length: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub repeats: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub items: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub query: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl EpisodeMeta {
    fn new(task: TaskKind) -> Self {
        EpisodeMeta {
            task,
            length: None,
            repeats: None,
            items: None,
            query: None,
            seed: None,
        }
    }
}

/// One task instance. `mask[t] == 1` marks steps that contribute to the loss.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub inputs: Tensor,
    pub targets: Tensor,
    pub mask: Vec<f64>,
    pub meta: EpisodeMeta,
}

impl Episode {
    pub fn steps(&self) -> usize {
        self.mask.len()
    }

    pub fn answer_steps(&self) -> usize {
        self.mask.iter().filter(|&&m| m != 0.0).count()
    }
}

fn random_bits<R: Rng + ?Sized>(rng: &mut R, bits: usize) -> Vec<f64> {
    (0..bits).map(|_| if rng.gen::<bool>() { 1.0 } else { 0.0 }).collect()
}

fn set_row(t: &mut Tensor, row: usize, values: &[f64]) {
    let width = t.shape()[1];
    t.data_mut()[row * width..row * width + values.len()].copy_from_slice(values);
}

fn set(t: &mut Tensor, row: usize, col: usize, value: f64) {
    let width = t.shape()[1];
    t.data_mut()[row * width + col] = value;
}

/// Copy episode for a given payload: `L` inputs, a delimiter, `L` answers.
pub fn copy_episode(bits: usize, payload: &[Vec<f64>]) -> Episode {
    let len = payload.len();
    let steps = 2 * len + 1;
    let mut inputs = Tensor::zeros(&[steps, bits + 1]);
    let mut targets = Tensor::zeros(&[steps, bits]);
    let mut mask = vec![0.0; steps];
    for (t, p) in payload.iter().enumerate() {
        set_row(&mut inputs, t, p);
        set_row(&mut targets, len + 1 + t, p);
        mask[len + 1 + t] = 1.0;
    }
    set(&mut inputs, len, bits, 1.0);
    let mut meta = EpisodeMeta::new(TaskKind::Copy);
    meta.length = Some(len);
    Episode {
        inputs,
        targets,
        mask,
        meta,
    }
}

/// Repeat Copy episode: payload, one marker step carrying `repeats / max_repeats`,
/// then the payload `repeats` times with an end marker on the last step.
pub fn repeat_copy_episode(bits: usize, payload: &[Vec<f64>], repeats: usize, max_repeats: usize) -> Episode {
    let len = payload.len();
    let answer = repeats * len;
    let steps = len + 1 + answer;
    let mut inputs = Tensor::zeros(&[steps, bits + 2]);
    let mut targets = Tensor::zeros(&[steps, bits + 1]);
    let mut mask = vec![0.0; steps];
    for (t, p) in payload.iter().enumerate() {
        set_row(&mut inputs, t, p);
    }
    set(&mut inputs, len, bits, 1.0);
    set(&mut inputs, len, bits + 1, repeats as f64 / max_repeats as f64);
    for a in 0..answer {
        let t = len + 1 + a;
        set_row(&mut targets, t, &payload[a % len]);
        mask[t] = 1.0;
    }
    set(&mut targets, steps - 1, bits, 1.0);
    let mut meta = EpisodeMeta::new(TaskKind::RepeatCopy);
    meta.length = Some(len);
    meta.repeats = Some(repeats);
    Episode {
        inputs,
        targets,
        mask,
        meta,
    }
}

/// Associative Recall episode. Each item is [`ITEM_STEPS`] vectors; the
/// target is the item after `items[query]`.
pub fn associative_recall_episode(bits: usize, items: &[Vec<Vec<f64>>], query: usize) -> Episode {
    let n = items.len();
    assert!(query + 1 < n, "query item needs a successor");
    let steps = (ITEM_STEPS + 1) * n + 2 * ITEM_STEPS + 2;
    let mut inputs = Tensor::zeros(&[steps, bits + 2]);
    let mut targets = Tensor::zeros(&[steps, bits]);
    let mut mask = vec![0.0; steps];
    let mut t = 0;
    for item in items {
        set(&mut inputs, t, bits, 1.0);
        t += 1;
        for v in item {
            set_row(&mut inputs, t, v);
            t += 1;
        }
    }
    set(&mut inputs, t, bits + 1, 1.0);
    t += 1;
    for v in &items[query] {
        set_row(&mut inputs, t, v);
        t += 1;
    }
    set(&mut inputs, t, bits + 1, 1.0);
    t += 1;
    for v in &items[query + 1] {
        set_row(&mut targets, t, v);
        mask[t] = 1.0;
        t += 1;
    }
    debug_assert_eq!(t, steps);
    let mut meta = EpisodeMeta::new(TaskKind::AssociativeRecall);
    meta.items = Some(n);
    meta.query = Some(query);
    Episode {
        inputs,
        targets,
        mask,
        meta,
    }
}

pub fn gen_copy<R: Rng + ?Sized>(cfg: &TaskConfig, rng: &mut R) -> Episode {
    let len = cfg.length.sample(rng);
    let payload: Vec<_> = (0..len).map(|_| random_bits(rng, cfg.bits)).collect();
    copy_episode(cfg.bits, &payload)
}

pub fn gen_repeat_copy<R: Rng + ?Sized>(cfg: &TaskConfig, rng: &mut R) -> Episode {
    let len = cfg.length.sample(rng);
    let repeats = cfg.repeats.sample(rng);
    let payload: Vec<_> = (0..len).map(|_| random_bits(rng, cfg.bits)).collect();
    repeat_copy_episode(cfg.bits, &payload, repeats, cfg.repeats.max)
}

pub fn gen_associative_recall<R: Rng + ?Sized>(cfg: &TaskConfig, rng: &mut R) -> Episode {
    let n = cfg.items.sample(rng);
    let items: Vec<Vec<Vec<f64>>> = (0..n)
        .map(|_| (0..ITEM_STEPS).map(|_| random_bits(rng, cfg.bits)).collect())
        .collect();
    let query = rng.gen_range(0..n - 1);
    associative_recall_episode(cfg.bits, &items, query)
}

pub fn gen_episode<R: Rng + ?Sized>(cfg: &TaskConfig, rng: &mut R) -> Episode {
    match cfg.kind {
        TaskKind::Copy => gen_copy(cfg, rng),
        TaskKind::RepeatCopy => gen_repeat_copy(cfg, rng),
        TaskKind::AssociativeRecall => gen_associative_recall(cfg, rng),
    }
}

/// Episode drawn from a generator seeded with `seed`; the seed is recorded in
/// the metadata.
pub fn generate(cfg: &TaskConfig, seed: u64) -> Episode {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ep = gen_episode(cfg, &mut rng);
    ep.meta.seed = Some(seed);
    ep
}

#[derive(Serialize, Deserialize)]
struct EpisodeRecord {
    meta: EpisodeMeta,
    inputs: Vec<Vec<f64>>,
    targets: Vec<Vec<f64>>,
    mask: Vec<f64>,
}

fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.shape()[0]).map(|i| t.row(i).to_vec()).collect()
}

/// Writes one JSON object per line: `{"meta":…,"inputs":[[…]],"targets":[[…]],"mask":[…]}`.
pub fn write_jsonl<W: Write>(mut out: W, episodes: &[Episode]) -> io::Result<()> {
    for ep in episodes {
        let record = EpisodeRecord {
            meta: ep.meta.clone(),
            inputs: rows(&ep.inputs),
            targets: rows(&ep.targets),
            mask: ep.mask.clone(),
        };
        serde_json::to_writer(&mut out, &record)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// Parses one line written by [`write_jsonl`].
pub fn parse_jsonl_line(line: &str) -> Result<Episode, serde_json::Error> {
    let r: EpisodeRecord = serde_json::from_str(line)?;
    let to_tensor = |rows: &[Vec<f64>]| {
        Tensor::from_rows(rows).map_err(|e| serde::de::Error::custom(e.to_string()))
    };
    Ok(Episode {
        inputs: to_tensor(&r.inputs)?,
        targets: to_tensor(&r.targets)?,
        mask: r.mask,
        meta: r.meta,
    })
}
