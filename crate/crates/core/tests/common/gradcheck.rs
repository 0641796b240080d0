//! Central finite differences against reverse-mode gradients, in f64.

use iriskit::nn::layer::{Forward, ParamStore};
use iriskit::nn::{BnMode, Graph, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const STEP: f64 = 1e-3;
pub const TOLERANCE: f64 = 1e-4;
pub const INSTANCES: u64 = 5;
/// Coordinates probed per leaf when a leaf is larger than this.
pub const PROBES: usize = 24;

pub fn random(rng: &mut ChaCha8Rng, shape: Vec<usize>, scale: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-scale..scale))
}

/// Values that keep a safe distance from the ReLU6 kinks at 0 and 6.
pub fn away_from_kinks(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| match rng.gen_range(0..4) {
        0 => -rng.gen_range(0.05..3.0),
        1 | 2 => rng.gen_range(0.05..5.95),
        _ => rng.gen_range(6.05..8.0),
    })
}

/// Projects `out` onto a fixed random direction so every output element
/// contributes to a scalar loss.
pub fn project(g: &mut Graph<f64>, out: Var, seed: u64) -> Var {
    let shape = g.value(out).shape().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let dir = g.leaf(random(&mut rng, shape, 1.0));
    let prod = g.mul(out, dir).unwrap();
    g.sum(prod).unwrap()
}

/// Relative error `‖a − n‖ / max(‖a‖, ‖n‖)`: the largest per leaf, and over
/// all probes together. `probes` coordinates are drawn per leaf (all of them
/// for smaller leaves).
///
/// A probe whose central differences at `step` and `step / 2` disagree sits
/// across a ReLU6 kink, where no derivative exists; it is skipped, and at
/// most a quarter of the probes may be.
pub fn check_with<F>(leaves: &[Tensor<f64>], seed: u64, probes: usize, step: f64, build: F) -> (f64, f64)
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Var,
{
    let eval = |values: &[Tensor<f64>]| -> f64 {
        let mut g = Graph::inference();
        let vars: Vec<Var> = values.iter().map(|t| g.leaf(t.clone())).collect();
        let out = build(&mut g, &vars);
        let loss = project(&mut g, out, seed);
        g.value(loss).data()[0]
    };
    let central = |i: usize, k: usize, h: f64| -> f64 {
        let mut work = leaves.to_vec();
        work[i].data_mut()[k] += h;
        let plus = eval(&work);
        work[i].data_mut()[k] -= 2.0 * h;
        (plus - eval(&work)) / (2.0 * h)
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = leaves.iter().map(|t| g.leaf(t.clone())).collect();
    let out = build(&mut g, &vars);
    let loss = project(&mut g, out, seed);
    let grads = g.backward(loss).unwrap();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    let (mut probed, mut skipped) = (0usize, 0usize);
    let (mut all_diff, mut all_a, mut all_n) = (0.0, 0.0, 0.0);
    for (i, leaf) in leaves.iter().enumerate() {
        let analytic = grads.wrt(vars[i]);
        let coords: Vec<usize> = if leaf.len() <= probes {
            (0..leaf.len()).collect()
        } else {
            (0..probes).map(|_| rng.gen_range(0..leaf.len())).collect()
        };
        let (mut diff, mut na, mut nn) = (0.0, 0.0, 0.0);
        for &k in &coords {
            probed += 1;
            let numeric = central(i, k, step);
            let half = central(i, k, step / 2.0);
            if (numeric - half).abs() > 1e-6 * (1.0 + numeric.abs()) {
                skipped += 1;
                continue;
            }
            let a = analytic.data()[k];
            diff += (a - numeric).powi(2);
            na += a * a;
            nn += numeric * numeric;
        }
        let denom = na.sqrt().max(nn.sqrt());
        if denom > 0.0 {
            worst = worst.max(diff.sqrt() / denom);
        }
        all_diff += diff;
        all_a += na;
        all_n += nn;
    }
    assert!(skipped * 4 <= probed, "{skipped} of {probed} probes straddle a kink");
    (worst, all_diff.sqrt() / all_a.sqrt().max(all_n.sqrt()))
}

pub fn check<F>(leaves: &[Tensor<f64>], seed: u64, build: F) -> f64
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Var,
{
    check_with(leaves, seed, PROBES, STEP, build).0
}

/// Largest error of `case` over seeds `0..INSTANCES`.
pub fn worst(mut case: impl FnMut(u64) -> f64) -> f64 {
    (0..INSTANCES).map(&mut case).fold(0.0, f64::max)
}

/// Checks a layer's gradients with respect to its parameters and input.
pub fn check_layer<L>(store: &ParamStore<f64>, input: Tensor<f64>, mode: BnMode, seed: u64, forward: L) -> f64
where
    L: Fn(&mut Forward<'_, f64>, Var) -> Var,
{
    let mut leaves = store.params().to_vec();
    leaves.push(input);
    let n = store.num_params();
    check(&leaves, seed, |g, v| {
        let mut f = Forward::new(g, &v[..n], store, mode);
        forward(&mut f, v[n])
    })
}

/// Fresh running statistics so infer-mode checks exercise non-trivial values.
pub fn randomize_buffers(store: &mut ParamStore<f64>, rng: &mut ChaCha8Rng) {
    store.map_all(|name, t| {
        if name.ends_with("running_mean") {
            t.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-0.3..0.3));
        } else if name.ends_with("running_var") {
            t.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(0.5..2.0));
        }
    });
}
