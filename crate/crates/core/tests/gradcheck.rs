//! Central finite-difference checks of every differentiable graph operation.

use dsr_core::autodiff::{BnStats, Graph, Var};
use dsr_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-5;
const SEEDS: u64 = 10;

fn random(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Loss `Σ out ⊙ R` for a fixed random `R`, so every output element matters.
fn loss_of(build: &dyn Fn(&mut Graph, &[Var]) -> Var, inputs: &[Tensor], weights_seed: u64) -> (Graph, Var, Vec<Var>) {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = build(&mut g, &vars);
    let shape = g.value(out).shape().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(weights_seed);
    let r = g.constant(random(&mut rng, &shape, -1.0, 1.0));
    let prod = g.mul(out, r).unwrap();
    let loss = g.sum(prod);
    (g, loss, vars)
}

fn check(name: &str, inputs: Vec<Tensor>, build: &dyn Fn(&mut Graph, &[Var]) -> Var, seed: u64) {
    let (mut g, loss, vars) = loss_of(build, &inputs, seed + 1000);
    g.backward(loss).unwrap();
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(&inputs)
        .map(|(&v, t)| g.grad(v).map(|s| s.to_vec()).unwrap_or_else(|| vec![0.0; t.numel()]))
        .collect();
    for (k, t) in inputs.iter().enumerate() {
        for j in 0..t.numel() {
            let eval = |delta: f64| {
                let mut shifted = inputs.clone();
                shifted[k].data_mut()[j] += delta;
                let (g, loss, _) = loss_of(build, &shifted, seed + 1000);
                g.value(loss).item()
            };
            let fd = (eval(H) - eval(-H)) / (2.0 * H);
            let a = analytic[k][j];
            let scale = a.abs().max(fd.abs());
            let ok = if scale < 1e-6 {
                (a - fd).abs() < 1e-9
            } else {
                (a - fd).abs() / scale < 1e-4
            };
            assert!(ok, "{name} seed {seed}: input {k}[{j}] analytic {a} vs fd {fd}");
        }
    }
}

/// Moves values away from `lo` and `hi` so finite differences do not straddle a kink.
fn avoid(t: Tensor, points: &[f64]) -> Tensor {
    t.map(|v| {
        let mut v = v;
        for &p in points {
            if (v - p).abs() < 1e-2 {
                v = p + 0.05;
            }
        }
        v
    })
}

#[test]
fn elementwise_and_reductions() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random(&mut rng, &[3, 4], -2.0, 2.0);
        let b = random(&mut rng, &[3, 4], -2.0, 2.0);
        let s = random(&mut rng, &[1], -2.0, 2.0);
        check(
            "add",
            vec![a.clone(), b.clone()],
            &|g, v| g.add(v[0], v[1]).unwrap(),
            seed,
        );
        check(
            "mul",
            vec![a.clone(), b.clone()],
            &|g, v| g.mul(v[0], v[1]).unwrap(),
            seed,
        );
        check(
            "mul-scalar",
            vec![a.clone(), s.clone()],
            &|g, v| g.mul(v[0], v[1]).unwrap(),
            seed,
        );
        check(
            "add-scalar",
            vec![s.clone(), b.clone()],
            &|g, v| g.add(v[0], v[1]).unwrap(),
            seed,
        );
        check("scale", vec![a.clone()], &|g, v| g.scale(v[0], -1.7), seed);
        check("sum", vec![a.clone()], &|g, v| g.sum(v[0]), seed);
        check("transpose", vec![a.clone()], &|g, v| g.transpose(v[0]).unwrap(), seed);
        check(
            "reshape",
            vec![a.clone()],
            &|g, v| g.reshape(v[0], &[2, 6]).unwrap(),
            seed,
        );
    }
}

#[test]
fn matmul_gradients() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random(&mut rng, &[3, 5], -1.0, 1.0);
        let b = random(&mut rng, &[5, 2], -1.0, 1.0);
        check("matmul", vec![a, b], &|g, v| g.matmul(v[0], v[1]).unwrap(), seed);
    }
}

#[test]
fn conv_and_pool_gradients() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (stride, padding) = [(1, 0), (1, 1), (2, 1), (2, 0)][seed as usize % 4];
        let x = random(&mut rng, &[2, 2, 5, 6], -1.0, 1.0);
        let w = random(&mut rng, &[3, 2, 3, 3], -1.0, 1.0);
        check(
            "conv2d",
            vec![x, w],
            &move |g, v| g.conv2d(v[0], v[1], stride, padding).unwrap(),
            seed,
        );
        let x = random(&mut rng, &[2, 3, 4, 6], -1.0, 1.0);
        check("avg_pool2d", vec![x], &|g, v| g.avg_pool2d(v[0], 2).unwrap(), seed);
    }
}

#[test]
fn clamp_gradients_including_bounds() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let lo = -0.3;
        let hi = random(&mut rng, &[1], 0.4, 0.9);
        let x = avoid(random(&mut rng, &[4, 5], -1.5, 1.5), &[lo, hi.item()]);
        check(
            "clamp-const",
            vec![x.clone()],
            &|g, v| g.clamp(v[0], lo, 0.6).unwrap(),
            seed,
        );
        let lo_t = Tensor::scalar(lo);
        check(
            "clamp-var-bounds",
            vec![x, lo_t, hi],
            &|g, v| g.clamp(v[0], v[1], v[2]).unwrap(),
            seed,
        );
    }
}

#[test]
fn batch_norm_gradients() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&mut rng, &[4, 3, 2, 2], -2.0, 2.0);
        let gamma = random(&mut rng, &[3], 0.5, 1.5);
        let beta = random(&mut rng, &[3], -0.5, 0.5);
        let mean_offset: Vec<f64> = (0..3).map(|_| rng.random_range(-0.3..0.3)).collect();
        let var_offset: Vec<f64> = (0..3).map(|_| rng.random_range(0.0..0.4)).collect();
        let zero = BnStats::Batch {
            mean_offset: vec![0.0; 3],
            var_offset: vec![0.0; 3],
        };
        let shifted = BnStats::Batch {
            mean_offset,
            var_offset,
        };
        let fixed = BnStats::Fixed {
            mean: vec![0.1, -0.2, 0.3],
            var: vec![0.5, 1.5, 2.0],
        };
        for (label, stats) in [("bn-batch", zero), ("bn-offset", shifted), ("bn-fixed", fixed)] {
            check(
                label,
                vec![x.clone(), gamma.clone(), beta.clone()],
                &move |g, v| g.batch_norm(v[0], v[1], v[2], stats.clone(), 1e-5).unwrap(),
                seed,
            );
        }
        let feats = random(&mut rng, &[6, 4], -1.0, 1.0);
        let (g4, b4) = (random(&mut rng, &[4], 0.5, 1.5), random(&mut rng, &[4], -0.5, 0.5));
        check(
            "bn-features",
            vec![feats, g4, b4],
            &|g, v| {
                let stats = BnStats::Batch {
                    mean_offset: vec![0.05; 4],
                    var_offset: vec![0.1; 4],
                };
                g.batch_norm(v[0], v[1], v[2], stats, 1e-5).unwrap()
            },
            seed,
        );
    }
}

#[test]
fn cross_entropy_gradients() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let logits = random(&mut rng, &[5, 4], -3.0, 3.0);
        let labels: Vec<usize> = (0..5).map(|_| rng.random_range(0..4)).collect();
        check(
            "softmax_cross_entropy",
            vec![logits],
            &move |g, v| g.softmax_cross_entropy(v[0], &labels).unwrap(),
            seed,
        );
    }
}

#[test]
fn composite_chain_gradients() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&mut rng, &[3, 4], 0.0, 1.0);
        let w1 = random(&mut rng, &[4, 5], -1.0, 1.0);
        let w2 = random(&mut rng, &[5, 3], -1.0, 1.0);
        let labels = vec![0, 2, 1];
        let build = move |g: &mut Graph, v: &[Var]| {
            let h = g.matmul(v[0], v[1]).unwrap();
            let h = g.scale(h, 0.8);
            let h = g.clamp(h, 0.0, 10.0).unwrap();
            let o = g.matmul(h, v[2]).unwrap();
            g.softmax_cross_entropy(o, &labels).unwrap()
        };
        check("chain", vec![x, w1, w2], &build, seed);
    }
}
