//! Analytic gradients of every differentiable operation against central
//! finite differences.

use std::sync::Arc;

use fairgkd_core::losses::{bce, mse, nt_xent, nt_xent_streamed, SimHead};
use fairgkd_core::models::{gcn_layer, gin_layer, Activation};
use fairgkd_core::tensor::{CsrMatrix, Matrix, Tape, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const STEP: f64 = 1e-5;
const TOLERANCE: f64 = 1e-4;
const INSTANCES: u64 = 20;

type Build = dyn Fn(&mut Tape, &[Var]) -> Var;

fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    let data = (0..rows * cols)
        .map(|_| {
            // keep clear of relu / clamp kinks
            let v: f64 = rng.random_range(0.05..1.5);
            if rng.random::<bool>() { v } else { -v }
        })
        .collect();
    Matrix::from_vec(rows, cols, data).unwrap()
}

fn random_graph(rng: &mut ChaCha8Rng, n: usize) -> CsrMatrix {
    let mut t = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            if rng.random::<f64>() < 0.4 {
                t.push((i, j, 1.0));
                t.push((j, i, 1.0));
            }
        }
    }
    CsrMatrix::from_triplets(n, n, &t).unwrap()
}

fn evaluate(build: &Build, inputs: &[Matrix]) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|m| tape.leaf(m.clone(), false)).collect();
    let out = build(&mut tape, &vars);
    tape.value(out).get(0, 0)
}

/// Largest relative error `|g - g_fd| / max(|g|, |g_fd|)` (vector norms)
/// over all inputs.
fn check(build: &Build, inputs: &[Matrix]) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|m| tape.leaf(m.clone(), true)).collect();
    let out = build(&mut tape, &vars);
    tape.backward(out).unwrap();
    let mut worst: f64 = 0.0;
    for (k, v) in vars.iter().enumerate() {
        let analytic = tape.grad(*v).cloned().unwrap_or_else(|| Matrix::zeros(inputs[k].rows(), inputs[k].cols()));
        let (mut diff, mut norm_a, mut norm_n) = (0.0, 0.0, 0.0);
        for idx in 0..inputs[k].len() {
            let mut plus = inputs.to_vec();
            plus[k].as_mut_slice()[idx] += STEP;
            let mut minus = inputs.to_vec();
            minus[k].as_mut_slice()[idx] -= STEP;
            let numeric = (evaluate(build, &plus) - evaluate(build, &minus)) / (2.0 * STEP);
            let a = analytic.as_slice()[idx];
            diff += (a - numeric).powi(2);
            norm_a += a * a;
            norm_n += numeric * numeric;
        }
        let scale = norm_a.sqrt().max(norm_n.sqrt());
        if scale > 1e-10 {
            worst = worst.max(diff.sqrt() / scale);
        }
    }
    worst
}

/// Projects a matrix output onto a fixed random direction to get a scalar.
fn project(tape: &mut Tape, out: Var, weights: &Matrix) -> Var {
    let w = tape.constant(weights.clone());
    let p = tape.mul(out, w).unwrap();
    tape.sum(p).unwrap()
}

fn run_suite(name: &str, make: impl Fn(&mut ChaCha8Rng) -> (Box<Build>, Vec<Matrix>)) {
    for seed in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(seed * 7919 + name.len() as u64);
        let (build, inputs) = make(&mut rng);
        let err = check(build.as_ref(), &inputs);
        assert!(err < TOLERANCE, "{name} instance {seed}: relative error {err:e}");
    }
}

#[test]
fn linear_layer() {
    run_suite("linear", |rng| {
        let (n, d, k) = (rng.random_range(2..6), rng.random_range(1..5), rng.random_range(1..5));
        let r = random(rng, n, k);
        let build: Box<Build> = Box::new(move |t, v| {
            let xw = t.matmul(v[0], v[1]).unwrap();
            let y = t.add_row_bias(xw, v[2]).unwrap();
            project(t, y, &r)
        });
        (build, vec![random(rng, n, d), random(rng, d, k), random(rng, 1, k)])
    });
}

#[test]
fn gcn_layer_with_relu() {
    run_suite("gcn", |rng| {
        let (n, d, k) = (rng.random_range(2..7), rng.random_range(1..4), rng.random_range(1..4));
        let mut a = random_graph(rng, n);
        // normalise like a GCN would, without depending on the graph module
        let deg: Vec<f64> = (0..n).map(|i| a.row(i).0.len() as f64 + 1.0).collect();
        let mut t = vec![];
        for (i, j, _) in a.iter() {
            t.push((i, j, 1.0 / (deg[i] * deg[j]).sqrt()));
        }
        for i in 0..n {
            t.push((i, i, 1.0 / deg[i]));
        }
        a = CsrMatrix::from_triplets(n, n, &t).unwrap();
        let a = Arc::new(a);
        let r = random(rng, n, k);
        let build: Box<Build> = Box::new(move |t, v| {
            let y = gcn_layer(t, &a, v[0], v[1], v[2], Activation::Relu).unwrap();
            project(t, y, &r)
        });
        (build, vec![random(rng, n, d), random(rng, d, k), random(rng, 1, k)])
    });
}

#[test]
fn gin_layer_with_mlp() {
    run_suite("gin", |rng| {
        let (n, d, h, k) = (rng.random_range(2..7), rng.random_range(1..4), rng.random_range(1..4), rng.random_range(1..4));
        let a = Arc::new(random_graph(rng, n));
        let r = random(rng, n, k);
        let build: Box<Build> = Box::new(move |t, v| {
            let y = gin_layer(t, &a, v[0], &v[1..], 0.0).unwrap();
            project(t, y, &r)
        });
        let inputs = vec![random(rng, n, d), random(rng, d, h), random(rng, 1, h), random(rng, h, k), random(rng, 1, k)];
        (build, inputs)
    });
}

#[test]
fn spmm_and_activations() {
    run_suite("spmm", |rng| {
        let (n, d) = (rng.random_range(2..7), rng.random_range(1..4));
        let a = Arc::new(random_graph(rng, n));
        let r = random(rng, n, d);
        let build: Box<Build> = Box::new(move |t, v| {
            let y = t.spmm(&a, v[0]).unwrap();
            project(t, y, &r)
        });
        (build, vec![random(rng, n, d)])
    });
    run_suite("sigmoid", |rng| {
        let (n, d) = (rng.random_range(1..6), rng.random_range(1..4));
        let r = random(rng, n, d);
        let build: Box<Build> = Box::new(move |t, v| {
            let y = t.sigmoid(v[0]).unwrap();
            project(t, y, &r)
        });
        (build, vec![random(rng, n, d)])
    });
    run_suite("relu", |rng| {
        let (n, d) = (rng.random_range(1..6), rng.random_range(1..4));
        let r = random(rng, n, d);
        let build: Box<Build> = Box::new(move |t, v| {
            let y = t.relu(v[0]).unwrap();
            project(t, y, &r)
        });
        (build, vec![random(rng, n, d)])
    });
    run_suite("normalize", |rng| {
        let (n, d) = (rng.random_range(1..6), rng.random_range(1..4));
        let r = random(rng, n, d);
        let build: Box<Build> = Box::new(move |t, v| {
            let y = t.row_l2_normalize(v[0]).unwrap();
            project(t, y, &r)
        });
        (build, vec![random(rng, n, d)])
    });
}

#[test]
fn binary_cross_entropy() {
    run_suite("bce", |rng| {
        let n = rng.random_range(2..10);
        let labels: Vec<u8> = (0..n).map(|_| rng.random_range(0..2)).collect();
        let mask: Vec<usize> = (0..n).filter(|_| rng.random::<f64>() < 0.7).chain([0]).collect();
        let build: Box<Build> = Box::new(move |t, v| {
            let p = t.sigmoid(v[0]).unwrap();
            bce(t, p, &labels, &mask).unwrap()
        });
        (build, vec![random(rng, n, 1)])
    });
}

#[test]
fn contrastive_objectives() {
    for (name, streamed) in [("ntxent-dense", false), ("ntxent-streamed", true)] {
        run_suite(name, |rng| {
            let (n, k) = (rng.random_range(2..8), rng.random_range(2..5));
            let tau = rng.random_range(0.2..1.5);
            let build: Box<Build> = Box::new(move |t, v| {
                if streamed {
                    nt_xent_streamed(t, v[0], v[1], tau).unwrap()
                } else {
                    nt_xent(t, v[0], v[1], tau, None).unwrap()
                }
            });
            (build, vec![random(rng, n, k), random(rng, n, k)])
        });
    }
    run_suite("ntxent-head", |rng| {
        let (n, k) = (rng.random_range(2..6), rng.random_range(2..4));
        let build: Box<Build> = Box::new(move |t, v| {
            let head = SimHead { weight: v[2], bias: v[3] };
            nt_xent(t, v[0], v[1], 0.5, Some(head)).unwrap()
        });
        (build, vec![random(rng, n, k), random(rng, n, k), random(rng, k, k), random(rng, 1, k)])
    });
    run_suite("mse", |rng| {
        let (n, k) = (rng.random_range(1..6), rng.random_range(1..4));
        let build: Box<Build> = Box::new(|t, v| mse(t, v[0], v[1]).unwrap());
        (build, vec![random(rng, n, k), random(rng, n, k)])
    });
}
