#![allow(dead_code)]

use flowcast::autodiff::{Tape, Var};
use flowcast::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

/// Worst norm-wise relative error, over `inputs`, between reverse-mode
/// gradients of the scalar `f` and central differences with step `h`.
pub fn grad_check<F>(inputs: &[Tensor], h: f64, f: F) -> f64
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Var<'t>,
{
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&tape, &vars);
    let grads = out.backward().unwrap();
    let eval = |k: usize, idx: usize, delta: f64| {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = inputs
            .iter()
            .enumerate()
            .map(|(j, t)| {
                let mut t = t.clone();
                if j == k {
                    t.data_mut()[idx] += delta;
                }
                tape.constant(t)
            })
            .collect();
        let v = f(&tape, &vars).value().item().unwrap();
        v
    };
    let mut worst: f64 = 0.0;
    for (k, input) in inputs.iter().enumerate() {
        let analytic = grads.wrt(vars[k]);
        let (mut diff, mut na, mut nn) = (0.0, 0.0, 0.0);
        for idx in 0..input.len() {
            let numeric = (eval(k, idx, h) - eval(k, idx, -h)) / (2.0 * h);
            let a = analytic.data()[idx];
            diff += (a - numeric).powi(2);
            na += a * a;
            nn += numeric * numeric;
        }
        let scale = na.sqrt().max(nn.sqrt()).max(1e-10);
        worst = worst.max(diff.sqrt() / scale);
    }
    worst
}

/// `sum(x * r)` for a fixed random `r`, to turn any output into a scalar
/// with a generic upstream gradient.
pub fn project<'t>(x: Var<'t>, r: &Tensor) -> Var<'t> {
    let w = x.tape().constant(r.clone());
    x.mul(w).unwrap().sum()
}

/// As [`grad_check`], over every parameter of `store` bound through a
/// [`Binder`](flowcast::params::Binder).
pub fn param_grad_check<F>(store: &flowcast::params::ParamStore, h: f64, f: F) -> f64
where
    F: for<'t, 's> Fn(&flowcast::params::Binder<'t, 's>) -> Var<'t>,
{
    use flowcast::params::Binder;
    let tape = Tape::new();
    let binder = Binder::new(&tape, store, |_| true);
    let mut grads = f(&binder).backward().unwrap();
    let analytic = binder.collect(&mut grads);
    let ids: Vec<_> = store.ids().collect();
    let mut worst: f64 = 0.0;
    for (k, &id) in ids.iter().enumerate() {
        let base = store.get(id).clone();
        let (mut diff, mut na, mut nn) = (0.0, 0.0, 0.0);
        for idx in 0..base.len() {
            let eval = |delta: f64| {
                let mut t = base.clone();
                t.data_mut()[idx] += delta;
                let tape = Tape::new();
                let binder = Binder::frozen(&tape, store);
                binder.bind_value(id, t).unwrap();
                let v = f(&binder).value().item().unwrap();
                v
            };
            let numeric = (eval(h) - eval(-h)) / (2.0 * h);
            let a = analytic[k].data()[idx];
            diff += (a - numeric).powi(2);
            na += a * a;
            nn += numeric * numeric;
        }
        let scale = na.sqrt().max(nn.sqrt()).max(1e-10);
        worst = worst.max(diff.sqrt() / scale);
    }
    worst
}
