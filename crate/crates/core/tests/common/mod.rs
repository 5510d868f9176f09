#![allow(dead_code)]

use fiber_core::params::Bound;
use fiber_core::{ParamStore, Result};
use fiber_tensor::{Rng, Tape, Tensor, Var};

/// Finite-difference step.
pub const H: f64 = 1e-5;
/// Tolerance for single ops.
pub const OP_TOL: f64 = 1e-4;
/// Tolerance for composite blocks and losses.
pub const COMPOSITE_TOL: f64 = 1e-3;

pub fn rand_tensor(rng: &mut Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.uniform_range(-1.0, 1.0))
}

/// Random weighting so every output element carries a distinct gradient.
pub fn weighted_sum(y: &Var, seed: u64) -> Result<Var> {
    let mut rng = Rng::new(seed);
    let w = Var::constant(rand_tensor(&mut rng, y.shape()));
    Ok(y.mul(&w)?.sum_all())
}

fn rel(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-3)
}

/// Compares tape gradients of every parameter whose name passes `filter`
/// against central differences taken by editing the store, at up to
/// `samples` evenly spread entries per parameter. Returns the worst relative
/// error and the number of entries checked.
pub fn param_gradcheck(store: &mut ParamStore, filter: impl Fn(&str) -> bool, samples: usize, f: impl Fn(&Bound) -> Result<Var>) -> (f64, usize) {
    let tape = Tape::new();
    let bound = store.bind(Some(&tape));
    let loss = f(&bound).unwrap();
    let grads = bound.collect_grads(&tape.backward(&loss).unwrap());
    let eval = |s: &ParamStore| f(&s.bind(None)).unwrap().value().item().unwrap();
    let picked: Vec<(usize, _)> = store.iter().enumerate().filter(|(_, (_, p))| filter(&p.name)).map(|(slot, (id, _))| (slot, id)).collect();
    let (mut worst, mut checked) = (0.0f64, 0);
    for (slot, id) in picked {
        let original = store.value(id).clone();
        let n = original.numel();
        let picks: Vec<usize> = if n <= samples { (0..n).collect() } else { (0..samples).map(|i| i * n / samples).collect() };
        for i in picks {
            let mut plus = original.clone();
            plus.data_mut()[i] += H;
            store.set(id, plus);
            let up = eval(store);
            let mut minus = original.clone();
            minus.data_mut()[i] -= H;
            store.set(id, minus);
            let down = eval(store);
            store.set(id, original.clone());
            let numeric = (up - down) / (2.0 * H);
            let analytic = grads[slot].as_ref().map_or(0.0, |g| g.data()[i]);
            let e = rel(analytic, numeric);
            assert!(e.is_finite(), "non-finite error for {}", store.get(id).name);
            worst = worst.max(e);
            checked += 1;
        }
    }
    (worst, checked)
}

pub fn assert_close(a: &[f64], b: &[f64], tol: f64, what: &str) {
    assert_eq!(a.len(), b.len(), "{what}: length");
    for (i, (x, y)) in a.iter().zip(b).enumerate() {
        assert!((x - y).abs() <= tol * (1.0 + y.abs()), "{what}[{i}]: {x} vs {y}");
    }
}

/// Worst relative error of the input gradient of `f` at `x`.
pub fn input_gradcheck(x: &Tensor, f: impl Fn(&Var) -> Result<Var>) -> f64 {
    let lifted = |v: &Var| -> fiber_tensor::Result<Var> {
        f(v).map_err(|e| match e {
            fiber_core::Error::Tensor(t) => t,
            other => panic!("{other}"),
        })
    };
    fiber_tensor::finite_diff_check(lifted, x, H).unwrap().max_rel_err
}
