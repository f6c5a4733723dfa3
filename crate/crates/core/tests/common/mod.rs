#![allow(dead_code)]

use medkgqa::autodiff::{ParamId, ParamStore, Tape, Tensor, Var};
use medkgqa::Result;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const EPS: f64 = 1e-5;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Relative error with a small floor so exact zeros compare sanely.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Reduces any output to a scalar through a fixed random weighting so every
/// output element receives a generic upstream gradient.
pub fn to_scalar<'t>(out: Var<'t>) -> Var<'t> {
    if out.shape().iter().product::<usize>() == 1 {
        return out;
    }
    let w = Tensor::randn(&out.shape(), 1.0, &mut rng(99));
    out.mul(out.tape().constant(w)).unwrap().sum()
}

fn loss_at<F>(store: &ParamStore, ids: &[ParamId], f: &F) -> f64
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let vars: Vec<Var> = ids.iter().map(|&id| tape.param(store, id)).collect();
    to_scalar(f(&tape, &vars).unwrap()).value().item()
}

/// Largest relative error between tape gradients and central differences
/// over every input element.
pub fn grad_check<F>(inputs: Vec<Tensor>, f: F) -> f64
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let mut store = ParamStore::new();
    let ids: Vec<ParamId> = inputs
        .into_iter()
        .enumerate()
        .map(|(i, t)| store.add(format!("x{i}"), t))
        .collect();
    let tape = Tape::new();
    let vars: Vec<Var> = ids.iter().map(|&id| tape.param(&store, id)).collect();
    let loss = to_scalar(f(&tape, &vars).unwrap());
    let grads = tape.backward(loss).unwrap();
    let mut worst: f64 = 0.0;
    for &id in &ids {
        let analytic = grads.get_or_zero(id, &store);
        for k in 0..store.get(id).numel() {
            let orig = store.get(id).data()[k];
            store.get_mut(id).data_mut()[k] = orig + EPS;
            let up = loss_at(&store, &ids, &f);
            store.get_mut(id).data_mut()[k] = orig - EPS;
            let down = loss_at(&store, &ids, &f);
            store.get_mut(id).data_mut()[k] = orig;
            let numeric = (up - down) / (2.0 * EPS);
            worst = worst.max(rel_err(analytic.data()[k], numeric));
        }
    }
    worst
}
pub mod oracles;
pub mod kg;
pub mod ops;
