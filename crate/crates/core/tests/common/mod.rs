#![allow(dead_code)]

use dpgan::blocks::{Builder, Fwd};
use dpgan::rng;
use dpgan_autograd::check::relative_error;
use dpgan_autograd::{Bound, Graph, ParamKind, ParamStore, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| r.random_range(-1.0..1.0))
}

pub fn builder(store: &mut ParamStore<f64>, seed: u64) -> Builder<'_, f64> {
    Builder::new(store, rng::stream(seed, &[rng::INIT]))
}

/// Sum of `x` weighted by fixed pseudo-random coefficients.
pub fn project(g: &mut Graph<f64>, x: Var, seed: u64) -> Var {
    let w = random(g.shape(x), seed);
    let w = g.constant(w);
    let p = g.mul(x, w).unwrap();
    g.sum(p)
}

/// Gradient of a scalar model function with respect to every trainable
/// parameter, analytic vs central differences on up to `per_param`
/// elements of each. Returns the worst relative error.
pub fn param_gradcheck(
    store: &ParamStore<f64>,
    per_param: usize,
    f: impl Fn(&mut Fwd<'_, f64>) -> Var,
) -> f64 {
    let eval = |s: &ParamStore<f64>, track: bool| {
        let mut g = Graph::new();
        let bound = Bound::new(&mut g, s, track);
        let out = {
            let mut fw = Fwd::new(&mut g, &bound, s);
            f(&mut fw)
        };
        (g, bound, out)
    };
    let (g, bound, out) = eval(store, true);
    let mut grads = g.backward(out).unwrap();
    let analytic = bound.gradients(&mut grads);
    let mut worst = 0.0f64;
    let mut probe = store.clone();
    for (k, id) in store.ids().enumerate() {
        if store.entry(id).kind != ParamKind::Trainable {
            continue;
        }
        let n = store.get(id).numel();
        let step = (n / per_param).max(1);
        let idx: Vec<usize> = (0..n).step_by(step).take(per_param).collect();
        let a: Vec<f64> = idx
            .iter()
            .map(|&i| analytic[k].as_ref().map_or(0.0, |t| t.data()[i]))
            .collect();
        let num: Vec<f64> = idx
            .iter()
            .map(|&i| {
                let orig = probe.get(id).data()[i];
                let h = 1e-6;
                probe.get_mut(id).data_mut()[i] = orig + h;
                let (g, _, o) = eval(&probe, false);
                let up = g.value(o).item().unwrap();
                probe.get_mut(id).data_mut()[i] = orig - h;
                let (g, _, o) = eval(&probe, false);
                let down = g.value(o).item().unwrap();
                probe.get_mut(id).data_mut()[i] = orig;
                (up - down) / (2.0 * h)
            })
            .collect();
        let err = relative_error(&a, &num, 1e-4);
        assert!(err.is_finite(), "{}: non-finite error", store.entry(id).name);
        if err >= 1e-4 {
            eprintln!("{}: rel err {err:.3e}\n  analytic {a:?}\n  numeric  {num:?}", store.entry(id).name);
        }
        worst = worst.max(err);
    }
    worst
}

/// Analytic vs numeric gradient of `f` with respect to each input tensor.
pub fn input_gradcheck(inputs: &[Tensor<f64>], f: impl Fn(&mut Graph<f64>, &[Var]) -> Var) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.variable(t.clone())).collect();
    let out = f(&mut g, &vars);
    let mut grads = g.backward(out).unwrap();
    let mut worst = 0.0f64;
    for (k, input) in inputs.iter().enumerate() {
        let a = grads.take(vars[k]).map(|t| t.into_data()).unwrap_or_else(|| vec![0.0; input.numel()]);
        let idx: Vec<usize> = (0..input.numel()).collect();
        let num = dpgan_autograd::check::numeric_gradient(input, &idx, 1e-6, |probe| {
            let mut g = Graph::new();
            let vars: Vec<Var> = inputs
                .iter()
                .enumerate()
                .map(|(j, t)| g.constant(if j == k { probe.clone() } else { t.clone() }))
                .collect();
            let out = f(&mut g, &vars);
            g.value(out).item().unwrap()
        });
        worst = worst.max(relative_error(&a, &num, 1e-6));
    }
    worst
}
