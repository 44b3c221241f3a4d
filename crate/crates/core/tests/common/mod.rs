#![allow(dead_code)]

use ntm_lab::{ParamId, ParamStore, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;
pub const REL_TOLERANCE: f64 = 1e-4;

/// Denominator floor. Central differences at `FD_STEP` resolve gradients
/// only to about `1e-11` absolute for O(1) losses, so smaller gradients are
/// compared absolutely at `REL_TOLERANCE * GRAD_FLOOR`.
pub const GRAD_FLOOR: f64 = 1e-6;

pub fn rel_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(GRAD_FLOOR)
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor<R: Rng>(rng: &mut R, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

/// Worst relative error between analytic gradients and central differences
/// for every scalar of every parameter.
///
/// `loss` builds a scalar from the parameters (looked up by id on the given
/// tape) and must be a pure function of the store.
pub fn max_gradient_error(params: &ParamStore, loss: &dyn Fn(&mut Tape, &ParamStore) -> Var) -> f64 {
    let mut tape = Tape::new();
    let out = loss(&mut tape, params);
    let grads = tape.backward(out).unwrap();

    let eval = |store: &ParamStore| {
        let mut t = Tape::new();
        let v = loss(&mut t, store);
        t.value(v).unwrap().item().unwrap()
    };
    let mut worst = 0.0f64;
    let mut probe = params.clone();
    for (id, p) in params.iter() {
        let analytic = grads.get(id).expect("every parameter receives a gradient").clone();
        for j in 0..p.value.len() {
            let x = p.value.data()[j];
            probe.get_mut(id).data_mut()[j] = x + FD_STEP;
            let up = eval(&probe);
            probe.get_mut(id).data_mut()[j] = x - FD_STEP;
            let down = eval(&probe);
            probe.get_mut(id).data_mut()[j] = x;
            let numeric = (up - down) / (2.0 * FD_STEP);
            let err = rel_error(analytic.data()[j], numeric);
            if err > worst {
                worst = err;
            }
        }
    }
    worst
}

/// Store holding `inputs` as parameters `x0, x1, ...`.
pub fn store_of(inputs: Vec<Tensor>) -> ParamStore {
    let mut s = ParamStore::new();
    for (i, t) in inputs.into_iter().enumerate() {
        s.add(format!("x{i}"), t);
    }
    s
}

/// Reduces an arbitrary output to a scalar by a fixed random weighting, so
/// outputs with constant sums (softmax, normalized weights) still carry
/// gradient.
pub fn weighted_sum(tape: &mut Tape, out: Var, seed: u64) -> Var {
    let shape = tape.value(out).unwrap().shape().to_vec();
    let weights = random_tensor(&mut rng(seed), &shape, -1.0, 1.0);
    let w = tape.constant(weights);
    let prod = tape.mul(out, w).unwrap();
    tape.sum(prod, None).unwrap()
}

/// Registers every parameter of `store` on the tape in id order.
pub fn vars(tape: &mut Tape, store: &ParamStore) -> Vec<Var> {
    store.iter().map(|(id, p)| tape.param(id, &p.value)).collect()
}

pub fn param(i: usize) -> ParamId {
    ParamId(i)
}
