#![allow(dead_code)]

use danhar::graph::{Graph, Mode, Var};
use danhar::model::BoundParams;
use danhar::{Model, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;
pub const DENOM_FLOOR: f64 = 1e-6;

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(DENOM_FLOOR)
}

pub fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap()
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Worst relative error between autodiff and central differences over every
/// element of every input. `f` must reduce to a scalar.
pub fn gradcheck(inputs: &[Tensor], f: impl Fn(&mut Graph, &[Var]) -> Var) -> f64 {
    let eval = |tensors: &[Tensor]| -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = tensors.iter().map(|t| g.leaf(t.clone().with_requires_grad(false))).collect();
        let out = f(&mut g, &vars);
        g.value(out).data()[0]
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone().with_requires_grad(true))).collect();
    let out = f(&mut g, &vars);
    let grads = g.backward(out).unwrap();
    let mut worst: f64 = 0.0;
    let mut probe = inputs.to_vec();
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads.get(*v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; inputs[i].numel()]);
        for j in 0..inputs[i].numel() {
            let orig = inputs[i].data()[j];
            probe[i].data_mut()[j] = orig + FD_STEP;
            let up = eval(&probe);
            probe[i].data_mut()[j] = orig - FD_STEP;
            let down = eval(&probe);
            probe[i].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(analytic[j], numeric));
        }
    }
    worst
}

/// Weighted sum with fixed pseudo-random weights, so every output element
/// contributes a distinct gradient.
pub fn weighted_sum(g: &mut Graph, x: Var, seed: u64) -> Var {
    let shape = g.shape(x).to_vec();
    let w = random_tensor(&shape, &mut rng(seed));
    let w = g.constant(w);
    let y = g.mul(x, w).unwrap();
    g.sum(y).unwrap()
}

/// Worst relative error over every model parameter, loss in train mode.
pub fn model_gradcheck(model: &Model, batch: &Tensor, labels: &[usize]) -> f64 {
    let n = model.params().len();
    gradcheck(model.params().tensors(), |g, v| {
        let p = BoundParams { vars: v[..n].to_vec() };
        let x = g.constant(batch.clone());
        let (logits, _) = model.run(g, &p, x, Mode::Train, None).unwrap();
        g.cross_entropy(logits, labels).unwrap()
    })
}

