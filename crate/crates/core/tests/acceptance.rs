//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.
//!
//! Training runs stop as soon as they cross the threshold they are measured
//! against; nothing else about the run differs from `ntm-lab train`.

mod common;

use std::panic::{self, AssertUnwindSafe};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use common::*;
use ntm_lab::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use ntm_lab::controllers::{lstm_step, LstmCellState};
use ntm_lab::experiment::{median, ExperimentSpec, ModelKind, Preset};
use ntm_lab::ntm::{address, decode_head_params, read, write, InitScheme, NtmConfig, NtmModel};
use ntm_lab::tasks::{generate, Episode, TaskConfig, TaskKind, ITEM_STEPS};
use ntm_lab::training::{adam_step, clip_by_global_norm, AdamState, CurvePoint, NullSink, TrainConfig, Trainer};
use ntm_lab::{ModelSpec, ParamStore, SequenceModel, Tape, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn ensure(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// ---------------------------------------------------------------- 1

const GRAD_DRAWS: u64 = 100;

fn primitive_error(gen: impl Fn(&mut ChaCha8Rng) -> Vec<Tensor>, op: impl Fn(&mut Tape, &[Var]) -> Var) -> f64 {
    (0..GRAD_DRAWS)
        .map(|draw| {
            let store = store_of(gen(&mut rng(7000 + draw)));
            max_gradient_error(&store, &|tape, s| {
                let v = vars(tape, s);
                let out = op(tape, &v);
                weighted_sum(tape, out, draw)
            })
        })
        .fold(0.0, f64::max)
}

fn mat(r: &mut ChaCha8Rng) -> Vec<Tensor> {
    let (m, n) = (r.gen_range(1..5), r.gen_range(1..5));
    vec![random_tensor(r, &[m, n], -2.0, 2.0)]
}

fn mat_pair(r: &mut ChaCha8Rng, positive_second: bool) -> Vec<Tensor> {
    let (m, n) = (r.gen_range(1..5), r.gen_range(1..5));
    let b = if positive_second {
        random_tensor(r, &[m, n], 0.2, 2.0)
    } else {
        random_tensor(r, &[m, n], -2.0, 2.0)
    };
    vec![random_tensor(r, &[m, n], -2.0, 2.0), b]
}

fn with_scalar(r: &mut ChaCha8Rng) -> Vec<Tensor> {
    let mut v = mat(r);
    v.push(random_tensor(r, &[1], 0.2, 2.0));
    v
}

fn primitive_errors() -> Vec<(&'static str, f64)> {
    let mut out = Vec::new();
    let mut check = |name, e| out.push((name, e));
    check(
        "matmul",
        primitive_error(
            |r| {
                let (m, k, n) = (r.gen_range(1..5), r.gen_range(1..5), r.gen_range(1..5));
                vec![random_tensor(r, &[m, k], -2.0, 2.0), random_tensor(r, &[k, n], -2.0, 2.0)]
            },
            |t, v| t.matmul(v[0], v[1]).unwrap(),
        ),
    );
    check(
        "matvec",
        primitive_error(
            |r| {
                let (m, k) = (r.gen_range(1..5), r.gen_range(1..5));
                vec![random_tensor(r, &[m, k], -2.0, 2.0), random_tensor(r, &[k], -2.0, 2.0)]
            },
            |t, v| t.matmul(v[0], v[1]).unwrap(),
        ),
    );
    check("add", primitive_error(|r| mat_pair(r, false), |t, v| t.add(v[0], v[1]).unwrap()));
    check("sub", primitive_error(|r| mat_pair(r, false), |t, v| t.sub(v[0], v[1]).unwrap()));
    check("mul", primitive_error(|r| mat_pair(r, false), |t, v| t.mul(v[0], v[1]).unwrap()));
    check("div", primitive_error(|r| mat_pair(r, true), |t, v| t.div(v[0], v[1]).unwrap()));
    check("mul_scalar", primitive_error(with_scalar, |t, v| t.mul_scalar(v[0], v[1]).unwrap()));
    check("add_scalar", primitive_error(with_scalar, |t, v| t.add_scalar(v[0], v[1]).unwrap()));
    check("div_scalar", primitive_error(with_scalar, |t, v| t.div_scalar(v[0], v[1]).unwrap()));
    check(
        "concat",
        primitive_error(
            |r| {
                let (m, a, b) = (r.gen_range(1..4), r.gen_range(1..4), r.gen_range(1..4));
                vec![random_tensor(r, &[m, a], -2.0, 2.0), random_tensor(r, &[m, b], -2.0, 2.0)]
            },
            |t, v| t.concat(v, 1).unwrap(),
        ),
    );
    check(
        "slice",
        primitive_error(|r| vec![random_tensor(r, &[3, 5], -2.0, 2.0)], |t, v| t.slice(v[0], 1, 1, 3).unwrap()),
    );
    check(
        "reshape",
        primitive_error(|r| vec![random_tensor(r, &[2, 3], -2.0, 2.0)], |t, v| t.reshape(v[0], &[3, 2]).unwrap()),
    );
    check("sum", primitive_error(mat, |t, v| t.sum(v[0], Some(1)).unwrap()));
    check("sum all", primitive_error(mat, |t, v| t.sum(v[0], None).unwrap()));
    check("scale", primitive_error(mat, |t, v| t.scale(v[0], -1.7).unwrap()));
    check(
        "offset",
        primitive_error(mat, |t, v| {
            let o = t.offset(v[0], 0.3).unwrap();
            t.mul(o, o).unwrap()
        }),
    );
    check("sigmoid", primitive_error(mat, |t, v| t.sigmoid(v[0]).unwrap()));
    check("tanh", primitive_error(mat, |t, v| t.tanh(v[0]).unwrap()));
    check("softplus", primitive_error(mat, |t, v| t.softplus(v[0]).unwrap()));
    check("exp", primitive_error(mat, |t, v| t.exp(v[0]).unwrap()));
    check("softmax", primitive_error(mat, |t, v| t.softmax(v[0], 1).unwrap()));
    check(
        "power",
        primitive_error(
            |r| {
                let n = r.gen_range(1..6);
                vec![random_tensor(r, &[n], 0.05, 1.0), random_tensor(r, &[1], 1.0, 6.0)]
            },
            |t, v| t.power(v[0], v[1]).unwrap(),
        ),
    );
    check(
        "clip",
        primitive_error(
            |r| {
                let data = (0..6)
                    .map(|_| {
                        let x: f64 = r.gen_range(-3.0..3.0);
                        if (x.abs() - 1.0).abs() < 0.01 { x * 1.05 } else { x }
                    })
                    .collect();
                vec![Tensor::vector(data)]
            },
            |t, v| t.clip(v[0], -1.0, 1.0).unwrap(),
        ),
    );
    check(
        "circular_convolve",
        primitive_error(
            |r| {
                let n = r.gen_range(3..9);
                vec![random_tensor(r, &[n], -2.0, 2.0), random_tensor(r, &[3], -2.0, 2.0)]
            },
            |t, v| t.circular_convolve(v[0], v[1]).unwrap(),
        ),
    );
    check("l2_norm", primitive_error(mat, |t, v| t.l2_norm(v[0], Some(1)).unwrap()));
    check(
        "bce_with_logits",
        primitive_error(
            |r| vec![random_tensor(r, &[2, 3], -6.0, 6.0)],
            |t, v| {
                let targets = Tensor::new(vec![2, 3], vec![0., 1., 1., 0., 0.5, 1.]).unwrap();
                t.bce_with_logits(v[0], &targets).unwrap()
            },
        ),
    );
    out
}

fn desk_cell(scheme: InitScheme) -> NtmConfig {
    NtmConfig {
        memory_slots: 8,
        cell_width: 4,
        read_heads: 1,
        write_heads: 1,
        init_scheme: scheme,
        ..NtmConfig::default()
    }
}

fn gradient_correctness() -> Outcome {
    let start = Instant::now();
    let mut errors = primitive_errors();

    let cfg = desk_cell(InitScheme::Constant);
    for is_write in [false, true] {
        let len = cfg.head_raw_len(is_write);
        let e = primitive_error(
            |r| vec![random_tensor(r, &[len], -3.0, 3.0)],
            |t, v| {
                let h = decode_head_params(t, v[0], is_write, &cfg).unwrap();
                let mut parts = vec![h.key, h.beta, h.gate, h.shift, h.gamma];
                parts.extend(h.erase);
                parts.extend(h.add);
                t.concat(&parts, 0).unwrap()
            },
        );
        errors.push((if is_write { "decode write head" } else { "decode read head" }, e));
    }

    errors.push((
        "lstm step",
        primitive_error(
            |r| {
                vec![
                    random_tensor(r, &[3], -2.0, 2.0),
                    random_tensor(r, &[4], -1.0, 1.0),
                    random_tensor(r, &[4], -2.0, 2.0),
                    random_tensor(r, &[16, 7], -0.8, 0.8),
                    random_tensor(r, &[16], -1.0, 1.0),
                ]
            },
            |t, v| {
                let s = lstm_step(t, v[0], LstmCellState { h: v[1], c: v[2] }, v[3], v[4], 4).unwrap();
                t.concat(&[s.h, s.c], 0).unwrap()
            },
        ),
    ));

    let inputs = random_tensor(&mut rng(41), &[8, 5], 0.0, 1.0);
    for scheme in InitScheme::ALL {
        let model = NtmModel::new(desk_cell(scheme), 5, 4, 16, 1).unwrap();
        let params = model.layout().instantiate(&mut rng(3));
        let e = max_gradient_error(&params, &|tape, p| {
            let logits = model.forward(tape, p, &inputs, &mut rng(99)).unwrap();
            weighted_sum(tape, logits, 12)
        });
        errors.push((scheme.as_str(), e));
    }

    let secs = start.elapsed().as_secs_f64();
    let (name, worst) = errors.iter().cloned().fold(("", 0.0), |a, b| if b.1 > a.1 { b } else { a });
    ensure(
        worst < REL_TOLERANCE && secs < 120.0,
        format!(
            "{} checks, worst relative error {worst:.2e} ({name}), {secs:.1}s",
            errors.len()
        ),
    )
}

// ---------------------------------------------------------------- 2

fn values(tape: &Tape, v: Var) -> Vec<f64> {
    tape.value(v).unwrap().data().to_vec()
}

fn addressing_fuzz() -> Outcome {
    let start = Instant::now();
    let mut worst_sum = 0.0f64;
    let mut min_entry = f64::INFINITY;
    for seed in 0..1000u64 {
        let mut r = rng(50_000 + seed);
        let (n, w) = (r.gen_range(1..40), r.gen_range(1..12));
        let cfg = NtmConfig {
            memory_slots: n,
            cell_width: w,
            shift_range: [1, 3, 5][r.gen_range(0..3)],
            ..NtmConfig::default()
        };
        let scale = [0.5, 5.0, 100.0][r.gen_range(0..3)];
        let mut tape = Tape::new();
        let m = tape.constant(random_tensor(&mut r, &[n, w], -2.0, 2.0));
        let raw = tape.constant(random_tensor(&mut r, &[cfg.head_raw_len(false)], -scale, scale));
        let head = decode_head_params(&mut tape, raw, false, &cfg).unwrap();
        let logits = tape.constant(random_tensor(&mut r, &[n], -scale, scale));
        let prev = tape.softmax(logits, 0).unwrap();
        let addressed = address(&mut tape, m, &head, prev).unwrap();
        let out = values(&tape, addressed);
        worst_sum = worst_sum.max((out.iter().sum::<f64>() - 1.0).abs());
        min_entry = min_entry.min(out.iter().cloned().fold(f64::INFINITY, f64::min));
    }

    let mut identities = true;
    for seed in 0..100u64 {
        let mut r = rng(60_000 + seed);
        let (n, w) = (r.gen_range(1..10), r.gen_range(1..8));
        let m = random_tensor(&mut r, &[n, w], -3.0, 3.0);
        let mut tape = Tape::new();
        let mv = tape.constant(m.clone());
        let wv = tape.constant(random_tensor(&mut r, &[n], 0.0, 1.0));
        let zero = tape.constant(Tensor::zeros(&[w]));
        let same = write(&mut tape, mv, wv, zero, zero).unwrap();
        identities &= tape.value(same).unwrap() == &m;
        let i = r.gen_range(0..n);
        let mut onehot = vec![0.0; n];
        onehot[i] = 1.0;
        let oh = tape.constant(Tensor::vector(onehot));
        let rv = read(&mut tape, mv, oh).unwrap();
        identities &= values(&tape, rv) == m.row(i);
    }
    let secs = start.elapsed().as_secs_f64();
    ensure(
        worst_sum <= 1e-6 && min_entry >= 0.0 && identities && secs < 30.0,
        format!("max |sum-1| {worst_sum:.1e}, min entry {min_entry:.1e}, identities exact: {identities}, {secs:.1}s"),
    )
}

// ---------------------------------------------------------------- 3

fn adam_oracle() -> Outcome {
    // (p, m, v) after steps 1..5 for f(p) = p^2 from p = 1, lr 0.001
    const TABLE: [(f64, f64, f64); 5] = [
        (0.999000000004999999975, 0.2, 0.004),
        (0.9980000262138343668071814, 0.379800000000999999995, 0.0079880040000399599998003),
        (0.9970000960651409343369069, 0.5414200052436668733569363, 0.01196403220533117637304948),
        (0.9960002269257634770236919, 0.686678023932328372888624, 0.01592810493934144620299282),
        (0.995000436052391998976643, 0.8172102669242482310045, 0.01988024264254679412292312),
    ];
    let mut params = ParamStore::new();
    let id = params.add("p", Tensor::vector(vec![1.0]));
    let mut state = AdamState::new(&params);
    let mut worst = 0.0f64;
    for (i, &(p, m, v)) in TABLE.iter().enumerate() {
        let mut tape = Tape::new();
        let x = tape.param(id, params.get(id));
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum(sq, None).unwrap();
        let mut g = vec![tape.backward(loss).unwrap().get(id).unwrap().clone()];
        clip_by_global_norm(&mut g, &["p"], 50.0, i as u64 + 1).unwrap();
        adam_step(&mut params, &g, &mut state, 0.001);
        for (got, want) in [(params.get(id).data()[0], p), (state.m[0].data()[0], m), (state.v[0].data()[0], v)] {
            worst = worst.max((got - want).abs());
        }
    }
    ensure(worst < 1e-12, format!("max deviation from table {worst:.1e} over 5 steps"))
}

// ---------------------------------------------------------------- 4 to 7

const STEP_CAP: u64 = 20_000;
const SEEDS: usize = 5;

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
enum Arm {
    Ntm(InitScheme),
    Lstm,
}

impl Arm {
    fn label(self) -> &'static str {
        match self {
            Arm::Ntm(s) => s.as_str(),
            Arm::Lstm => "lstm",
        }
    }

    fn spec(self) -> ExperimentSpec {
        match self {
            Arm::Ntm(scheme) => {
                let mut s = ExperimentSpec::preset(Preset::Desk, TaskKind::Copy, ModelKind::Ntm);
                s.init_scheme = Some(scheme);
                s
            }
            Arm::Lstm => ExperimentSpec::preset(Preset::Desk, TaskKind::Copy, ModelKind::Lstm),
        }
    }

    /// Constant init also answers the convergence criterion, so it runs on
    /// to the tighter threshold.
    fn stop_below(self) -> f64 {
        if self == Arm::Ntm(InitScheme::Constant) {
            0.5
        } else {
            1.0
        }
    }
}

#[derive(Debug)]
struct RunRecord {
    arm: Arm,
    seed: u64,
    first_below_one: Option<u64>,
    first_below_half: Option<u64>,
    steps: u64,
    error: Option<String>,
}

fn first_below(curve: &[CurvePoint], threshold: f64) -> Option<u64> {
    curve.iter().find(|p| p.val_bits_per_seq < threshold).map(|p| p.step)
}

fn train_arm(arm: Arm, run: usize) -> RunRecord {
    let spec = arm.spec();
    spec.validate().expect("desk preset validates");
    let cfg = TrainConfig {
        total_steps: STEP_CAP,
        ..spec.train_config(run)
    };
    let seed = cfg.seed;
    let mut record = RunRecord {
        arm,
        seed,
        first_below_one: None,
        first_below_half: None,
        steps: 0,
        error: None,
    };
    let mut trainer = match Trainer::new(cfg.clone()) {
        Ok(t) => t,
        Err(e) => {
            record.error = Some(e.to_string());
            return record;
        }
    };
    while trainer.step() < STEP_CAP {
        // train_step rejects non-finite losses, gradients and parameters
        let next = trainer.step() + cfg.eval_every;
        if let Err(e) = trainer.run_until(next, &mut NullSink) {
            record.error = Some(e.to_string());
            break;
        }
        let last = trainer.curve().last().expect("one point per eval interval");
        if !(last.val_loss.is_finite() && last.val_bits_per_seq.is_finite()) {
            record.error = Some(format!("non-finite evaluation at step {}", last.step));
            break;
        }
        if last.val_bits_per_seq < arm.stop_below() {
            break;
        }
    }
    record.steps = trainer.step();
    record.first_below_one = first_below(trainer.curve(), 1.0);
    record.first_below_half = first_below(trainer.curve(), 0.5);
    eprintln!(
        "  {:>8} seed {} stopped at {:>5}  <1.0 at {:?}  <0.5 at {:?}{}",
        arm.label(),
        seed,
        record.steps,
        record.first_below_one,
        record.first_below_half,
        record.error.as_deref().map(|e| format!("  error: {e}")).unwrap_or_default()
    );
    record
}

fn run_all(arms: &[Arm]) -> Vec<RunRecord> {
    let jobs: Vec<(Arm, usize)> = arms.iter().flat_map(|&a| (0..SEEDS).map(move |r| (a, r))).collect();
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get()).min(jobs.len());
    let next = AtomicUsize::new(0);
    let results = Mutex::new(Vec::new());
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(&(arm, run)) = jobs.get(i) else { break };
                let rec = train_arm(arm, run);
                results.lock().unwrap().push(rec);
            });
        }
    });
    let mut out = results.into_inner().unwrap();
    out.sort_by_key(|r| (arms.iter().position(|&a| a == r.arm), r.seed));
    out
}

/// Median steps to a threshold; runs that never reach it count as infinite.
fn median_steps(records: &[RunRecord], arm: Arm, pick: fn(&RunRecord) -> Option<u64>) -> f64 {
    let steps: Vec<f64> = records
        .iter()
        .filter(|r| r.arm == arm)
        .map(|r| pick(r).map_or(f64::INFINITY, |s| s as f64))
        .collect();
    median(&steps)
}

fn per_seed(records: &[RunRecord], arm: Arm) -> String {
    let steps: Vec<String> = records
        .iter()
        .filter(|r| r.arm == arm)
        .map(|r| r.first_below_one.map_or(format!(">{STEP_CAP}"), |s| s.to_string()))
        .collect();
    format!("[{}]", steps.join(" "))
}

fn fmt_steps(x: f64) -> String {
    if x.is_finite() {
        format!("{x}")
    } else {
        format!(">{STEP_CAP}")
    }
}

fn desk_convergence(records: &[RunRecord]) -> Outcome {
    let arm = Arm::Ntm(InitScheme::Constant);
    let med = median_steps(records, arm, |r| r.first_below_half);
    let clean = records.iter().filter(|r| r.arm == arm).all(|r| r.error.is_none());
    ensure(
        med.is_finite() && clean,
        format!("constant init, median steps to bits/seq < 0.5: {}, all finite: {clean}", fmt_steps(med)),
    )
}

fn init_ordering(records: &[RunRecord]) -> Outcome {
    let m = |s| median_steps(records, Arm::Ntm(s), |r| r.first_below_one);
    let (c, l, r) = (m(InitScheme::Constant), m(InitScheme::Learned), m(InitScheme::Random));
    ensure(
        c < l && c < r,
        format!(
            "median steps to < 1.0: constant {} {}, learned {} {}, random {} {}",
            fmt_steps(c),
            per_seed(records, Arm::Ntm(InitScheme::Constant)),
            fmt_steps(l),
            per_seed(records, Arm::Ntm(InitScheme::Learned)),
            fmt_steps(r),
            per_seed(records, Arm::Ntm(InitScheme::Random))
        ),
    )
}

fn architecture_ordering(records: &[RunRecord]) -> Outcome {
    let ntm = median_steps(records, Arm::Ntm(InitScheme::Constant), |r| r.first_below_one);
    let lstm = median_steps(records, Arm::Lstm, |r| r.first_below_one);
    ensure(
        ntm < lstm,
        format!(
            "median steps to < 1.0: ntm {} {}, lstm 2x64 {} {}",
            fmt_steps(ntm),
            per_seed(records, Arm::Ntm(InitScheme::Constant)),
            fmt_steps(lstm),
            per_seed(records, Arm::Lstm)
        ),
    )
}

fn stability(records: &[RunRecord]) -> Outcome {
    let failed: Vec<String> = records
        .iter()
        .filter_map(|r| r.error.as_ref().map(|e| format!("{} seed {}: {e}", r.arm.label(), r.seed)))
        .collect();
    let steps: u64 = records.iter().map(|r| r.steps).sum();
    ensure(
        records.len() >= 20 && failed.is_empty(),
        format!(
            "{} runs, {steps} checked steps, {} with non-finite values{}",
            records.len(),
            failed.len(),
            if failed.is_empty() { String::new() } else { format!(": {}", failed.join("; ")) }
        ),
    )
}

// ---------------------------------------------------------------- 8

fn chi_square_ok(counts: &[usize]) -> bool {
    use statrs::distribution::{ChiSquared, ContinuousCDF};
    let total: usize = counts.iter().sum();
    let expected = total as f64 / counts.len() as f64;
    let stat: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    stat < ChiSquared::new((counts.len() - 1) as f64).unwrap().inverse_cdf(0.999)
}

fn episode_ok(ep: &Episode, cfg: &TaskConfig) -> bool {
    ep.inputs.shape() == [ep.steps(), cfg.input_dim()]
        && ep.targets.shape() == [ep.steps(), cfg.output_dim()]
        && ep.mask.iter().all(|&m| m == 0.0 || m == 1.0)
        && ep.targets.data().iter().all(|&x| x == 0.0 || x == 1.0)
}

fn generator_conformance() -> Outcome {
    const DRAWS: u64 = 10_000;
    let mut problems = Vec::new();

    let cfg = TaskConfig::for_kind(TaskKind::Copy);
    let mut counts = vec![0usize; 20];
    for s in 0..DRAWS {
        let ep = generate(&cfg, s);
        let l = ep.meta.length.unwrap_or(0);
        if !(1..=20).contains(&l) || ep.steps() != 2 * l + 1 || ep.answer_steps() != l || !episode_ok(&ep, &cfg) {
            problems.push(format!("copy seed {s}"));
            break;
        }
        counts[l - 1] += 1;
    }
    if cfg.bits != 8 || !chi_square_ok(&counts) {
        problems.push("copy distribution".into());
    }

    let cfg = TaskConfig::for_kind(TaskKind::RepeatCopy);
    let mut counts = vec![0usize; 100];
    for s in 0..DRAWS {
        let ep = generate(&cfg, s);
        let (l, r) = (ep.meta.length.unwrap_or(0), ep.meta.repeats.unwrap_or(0));
        let ranges = (1..=10).contains(&l) && (1..=10).contains(&r);
        if !ranges || ep.steps() != l + 1 + r * l || ep.answer_steps() != r * l || !episode_ok(&ep, &cfg) {
            problems.push(format!("repeat copy seed {s}"));
            break;
        }
        counts[(l - 1) * 10 + r - 1] += 1;
    }
    if cfg.bits != 8 || !chi_square_ok(&counts) {
        problems.push("repeat copy distribution".into());
    }

    let cfg = TaskConfig::for_kind(TaskKind::AssociativeRecall);
    let mut counts = vec![0usize; 5];
    for s in 0..DRAWS {
        let ep = generate(&cfg, s);
        let n = ep.meta.items.unwrap_or(0);
        if !(2..=6).contains(&n) || ep.steps() != 4 * n + 8 || ep.answer_steps() != ITEM_STEPS || !episode_ok(&ep, &cfg) {
            problems.push(format!("associative recall seed {s}"));
            break;
        }
        counts[n - 2] += 1;
    }
    if cfg.bits != 6 || ITEM_STEPS != 3 || !chi_square_ok(&counts) {
        problems.push("associative recall distribution".into());
    }

    for kind in [TaskKind::Copy, TaskKind::RepeatCopy, TaskKind::AssociativeRecall] {
        let cfg = TaskConfig::for_kind(kind);
        let bits = |e: &Episode| e.inputs.data().iter().chain(e.targets.data()).map(|x| x.to_bits()).collect::<Vec<_>>();
        if (0..100).any(|s| bits(&generate(&cfg, s)) != bits(&generate(&cfg, s))) {
            problems.push(format!("{} not deterministic", kind.as_str()));
        }
    }
    ensure(
        problems.is_empty(),
        if problems.is_empty() {
            format!("3 tasks x {DRAWS} episodes conform, seeding bit-exact")
        } else {
            problems.join(", ")
        },
    )
}

// ---------------------------------------------------------------- 9

fn resume_equivalence() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let spec = Arm::Ntm(InitScheme::Constant).spec();
    let cfg = TrainConfig {
        total_steps: 50,
        eval_every: 10,
        eval_examples: 32,
        ..spec.train_config(0)
    };
    let mut whole = Trainer::new(cfg.clone()).map_err(|e| e.to_string())?;
    whole.run_until(50, &mut NullSink).map_err(|e| e.to_string())?;

    let mut first = Trainer::new(cfg).map_err(|e| e.to_string())?;
    first.run_until(20, &mut NullSink).map_err(|e| e.to_string())?;
    let path = dir.path().join("interrupted.ckpt");
    save_checkpoint(&path, &Checkpoint { config: first.config().clone(), state: first.state() }).map_err(|e| e.to_string())?;
    drop(first);
    let ckpt = load_checkpoint(&path).map_err(|e| e.to_string())?;
    let mut second = Trainer::resume(ckpt.config, ckpt.state).map_err(|e| e.to_string())?;
    second.run_until(50, &mut NullSink).map_err(|e| e.to_string())?;

    let params = second.params() == whole.params();
    let adam = second.adam() == whole.adam();
    let rows = second.curve().len() == whole.curve().len()
        && second.curve().iter().zip(whole.curve()).all(|(a, b)| a.same_metrics(b));
    ensure(
        params && adam && rows,
        format!("interrupted at 20 of 50: params equal {params}, optimizer equal {adam}, curve rows equal {rows}"),
    )
}

// ---------------------------------------------------------------- 10

fn parameter_accounting() -> Outcome {
    let mut lines = Vec::new();
    let mut ok = true;
    for (n, w, hr, hw) in [(128, 20, 1, 1), (32, 12, 1, 1), (8, 4, 2, 3)] {
        let count = |scheme| {
            let cfg = NtmConfig {
                memory_slots: n,
                cell_width: w,
                read_heads: hr,
                write_heads: hw,
                init_scheme: scheme,
                ..NtmConfig::default()
            };
            let model = ModelSpec::Ntm { ntm: cfg, controller_units: 100, controller_layers: 1 }.build(9, 8).unwrap();
            let init: usize = model
                .layout()
                .specs()
                .iter()
                .filter(|s| s.name.starts_with("init.w0") || s.name.starts_with("init.r0"))
                .map(|s| s.shape.iter().product::<usize>())
                .sum();
            (model.layout().scalar_count(), init)
        };
        let (constant, init) = count(InitScheme::Constant);
        let (learned, _) = count(InitScheme::Learned);
        ok &= learned - constant == n * w && init == w * hr + n * (hr + hw);
        lines.push(format!("N={n} W={w} Hr={hr} Hw={hw}: +{} / {init}", learned - constant));
    }
    ensure(ok, lines.join("; "))
}

// ----------------------------------------------------------------

fn guarded(f: impl FnOnce() -> Outcome) -> Outcome {
    panic::catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        Err(p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panicked".into()))
    })
}

fn report(n: u32, name: &str, outcome: Outcome) -> bool {
    let (tag, detail) = match &outcome {
        Ok(d) => ("PASS", d),
        Err(d) => ("FAIL", d),
    };
    println!("criterion {n:>2} {tag} {name}: {detail}");
    outcome.is_ok()
}

fn main() {
    // libtest flags such as --nocapture are accepted and ignored
    let started = Instant::now();
    let mut passed = vec![
        report(1, "gradient correctness", guarded(gradient_correctness)),
        report(2, "addressing fuzz", guarded(addressing_fuzz)),
        report(3, "adam oracle", guarded(adam_oracle)),
        report(8, "task generators", guarded(generator_conformance)),
        report(9, "resume equivalence", guarded(resume_equivalence)),
        report(10, "parameter accounting", guarded(parameter_accounting)),
    ];

    eprintln!("training {} desk-scale copy runs", 4 * SEEDS);
    let arms = [
        Arm::Ntm(InitScheme::Constant),
        Arm::Ntm(InitScheme::Learned),
        Arm::Ntm(InitScheme::Random),
        Arm::Lstm,
    ];
    let records = run_all(&arms);
    passed.push(report(4, "desk copy convergence", guarded(|| desk_convergence(&records))));
    passed.push(report(5, "init scheme ordering", guarded(|| init_ordering(&records))));
    passed.push(report(6, "ntm vs lstm ordering", guarded(|| architecture_ordering(&records))));
    passed.push(report(7, "training stability", guarded(|| stability(&records))));

    let failures = passed.iter().filter(|&&p| !p).count();
    println!(
        "acceptance: {} passed, {failures} failed in {:.0}s",
        passed.len() - failures,
        started.elapsed().as_secs_f64()
    );
    if failures > 0 {
        std::process::exit(1);
    }
}
