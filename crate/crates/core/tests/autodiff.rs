//! Autodiff ops checked against independent oracles: a triple-loop matrix
//! product and central finite differences computed here, outside the crate.

use cmssl_core::gradcheck;
use cmssl_core::{Error, Graph, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const FD_EPS: f64 = 1e-6;

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Builds a scalar loss from parameter leaves.
type Build = dyn Fn(&mut Graph, &[Var]) -> Var;

fn scalar_loss(build: &Build, inputs: &[Tensor]) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t)).collect();
    let loss = build(&mut g, &vars);
    g.value(loss)[0]
}

fn analytic(build: &Build, inputs: &[Tensor]) -> Vec<Vec<f64>> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t)).collect();
    let loss = build(&mut g, &vars);
    g.backward(loss).unwrap();
    vars.iter().map(|&v| g.grad(v).unwrap().to_vec()).collect()
}

/// Largest elementwise relative error `|a − n| / max(1, |a|)` between backward
/// and central differences.
fn fd_max_error(build: &Build, inputs: &[Tensor]) -> f64 {
    let grads = analytic(build, inputs);
    let mut worst: f64 = 0.0;
    for (t, grad) in grads.iter().enumerate() {
        for (i, &g) in grad.iter().enumerate() {
            let mut plus = inputs.to_vec();
            plus[t].values_mut()[i] += FD_EPS;
            let mut minus = inputs.to_vec();
            minus[t].values_mut()[i] -= FD_EPS;
            let numeric = (scalar_loss(build, &plus) - scalar_loss(build, &minus)) / (2.0 * FD_EPS);
            worst = worst.max((g - numeric).abs() / g.abs().max(1.0));
        }
    }
    worst
}

/// Weighted sum with fixed, non-uniform weights so every output element
/// receives a distinct upstream gradient.
fn weighted_sum(g: &mut Graph, x: Var) -> Var {
    let n = g.value(x).len();
    let shape = g.shape(x).to_vec();
    let w = Tensor::new(shape, (0..n).map(|i| 0.3 + 0.17 * ((i * 7) % 11) as f64).collect()).unwrap();
    let w = g.constant(&w);
    let p = g.mul(x, w).unwrap();
    g.sum(p).unwrap()
}

#[test]
fn matmul_matches_triple_loop_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let a = random_tensor(&mut rng, &[3, 4]);
    let b = random_tensor(&mut rng, &[4, 2]);
    let upstream = random_tensor(&mut rng, &[3, 2]);

    let mut g = Graph::new();
    let va = g.param(&a);
    let vb = g.param(&b);
    let c = g.matmul(va, vb).unwrap();
    let u = g.constant(&upstream);
    let p = g.mul(c, u).unwrap();
    let loss = g.sum(p).unwrap();
    g.backward(loss).unwrap();

    let (av, bv, uv) = (a.values(), b.values(), upstream.values());
    let mut worst: f64 = 0.0;
    for i in 0..3 {
        for j in 0..2 {
            let mut s = 0.0;
            for k in 0..4 {
                s += av[i * 4 + k] * bv[k * 2 + j];
            }
            worst = worst.max((g.value(c)[i * 2 + j] - s).abs());
        }
    }
    // dA = U Bᵀ, dB = Aᵀ U by explicit loops.
    for i in 0..3 {
        for k in 0..4 {
            let mut s = 0.0;
            for j in 0..2 {
                s += uv[i * 2 + j] * bv[k * 2 + j];
            }
            worst = worst.max((g.grad(va).unwrap()[i * 4 + k] - s).abs());
        }
    }
    for k in 0..4 {
        for j in 0..2 {
            let mut s = 0.0;
            for i in 0..3 {
                s += av[i * 4 + k] * uv[i * 2 + j];
            }
            worst = worst.max((g.grad(vb).unwrap()[k * 2 + j] - s).abs());
        }
    }
    assert!(worst <= 1e-12, "max abs diff {worst:e}");
}

#[test]
fn matmul_identity_leaves_matrix_unchanged() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let b = random_tensor(&mut rng, &[3, 5]);
    let mut eye = Tensor::zeros(vec![3, 3]);
    for i in 0..3 {
        eye.values_mut()[i * 4] = 1.0;
    }
    let mut g = Graph::new();
    let (e, vb) = (g.constant(&eye), g.constant(&b));
    let c = g.matmul(e, vb).unwrap();
    assert_eq!(g.value(c), b.values());
}

#[test]
fn conv2d_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let inputs = [random_tensor(&mut rng, &[2, 5, 5]), random_tensor(&mut rng, &[3, 2, 3, 3])];
    let err = fd_max_error(
        &|g, v| {
            let y = g.conv2d(v[0], v[1], 1).unwrap();
            weighted_sum(g, y)
        },
        &inputs,
    );
    assert!(err <= 1e-6, "conv2d relative error {err:e}");
}

#[test]
fn strided_batched_conv2d_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let inputs = [random_tensor(&mut rng, &[2, 2, 7, 7]), random_tensor(&mut rng, &[3, 2, 3, 3])];
    let err = fd_max_error(
        &|g, v| {
            let y = g.conv2d(v[0], v[1], 2).unwrap();
            weighted_sum(g, y)
        },
        &inputs,
    );
    assert!(err <= 1e-6, "strided conv2d relative error {err:e}");
}

#[test]
fn conv2d_is_cross_correlation() {
    // A kernel with a single 1 at (0, 1) reads the pixel one column to the
    // right; a flipped (true) convolution would read one to the left.
    let x = Tensor::new(vec![1, 3, 3], (0..9).map(f64::from).collect()).unwrap();
    let k = Tensor::new(vec![1, 1, 2, 2], vec![0.0, 1.0, 0.0, 0.0]).unwrap();
    let mut g = Graph::new();
    let (vx, vk) = (g.constant(&x), g.constant(&k));
    let y = g.conv2d(vx, vk, 1).unwrap();
    assert_eq!(g.shape(y), &[1, 2, 2]);
    assert_eq!(g.value(y), &[1.0, 2.0, 4.0, 5.0]);
}

#[test]
fn avgpool2_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let err = fd_max_error(
        &|g, v| {
            let y = g.avgpool2(v[0]).unwrap();
            weighted_sum(g, y)
        },
        &[random_tensor(&mut rng, &[3, 4, 4])],
    );
    assert!(err <= 1e-6, "avgpool2 relative error {err:e}");
}

#[test]
fn avgpool2_rejects_odd_sizes() {
    let mut g = Graph::new();
    let x = g.constant(&Tensor::zeros(vec![1, 3, 4]));
    assert!(matches!(g.avgpool2(x), Err(Error::Dimension(_))));
}

#[test]
fn dense_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let inputs =
        [random_tensor(&mut rng, &[5, 4]), random_tensor(&mut rng, &[4, 3]), random_tensor(&mut rng, &[3])];
    let err = fd_max_error(
        &|g, v| {
            let y = g.dense(v[0], v[1], v[2]).unwrap();
            weighted_sum(g, y)
        },
        &inputs,
    );
    assert!(err <= 1e-6, "dense relative error {err:e}");
}

#[test]
fn relu_l2norm_and_cross_entropy_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    // Keep relu inputs away from the kink so differences stay one-sided-free.
    let mut x = random_tensor(&mut rng, &[4, 5]);
    x.values_mut().iter_mut().for_each(|v| *v += 0.05 * v.signum());
    let err = fd_max_error(
        &|g, v| {
            let y = g.relu(v[0]).unwrap();
            weighted_sum(g, y)
        },
        std::slice::from_ref(&x),
    );
    assert!(err <= 1e-6, "relu relative error {err:e}");

    let err = fd_max_error(
        &|g, v| {
            let y = g.l2_normalize(v[0]).unwrap();
            weighted_sum(g, y)
        },
        &[random_tensor(&mut rng, &[3, 6])],
    );
    assert!(err <= 1e-6, "l2_normalize relative error {err:e}");

    let err = fd_max_error(
        &|g, v| g.softmax_cross_entropy(v[0], &[2, 0, 5]).unwrap(),
        &[random_tensor(&mut rng, &[3, 6])],
    );
    assert!(err <= 1e-6, "softmax_cross_entropy relative error {err:e}");
}

#[test]
fn two_layer_network_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let inputs = [
        random_tensor(&mut rng, &[6, 5]),
        random_tensor(&mut rng, &[5, 7]),
        random_tensor(&mut rng, &[7]),
        random_tensor(&mut rng, &[7, 4]),
        random_tensor(&mut rng, &[4]),
    ];
    let err = fd_max_error(
        &|g, v| {
            let h = g.dense(v[0], v[1], v[2]).unwrap();
            let h = g.relu(h).unwrap();
            let o = g.dense(h, v[3], v[4]).unwrap();
            g.softmax_cross_entropy(o, &[0, 1, 2, 3, 0, 1]).unwrap()
        },
        &inputs,
    );
    assert!(err <= 1e-6, "two-layer relative error {err:e}");
}

#[test]
fn random_composed_graphs_match_finite_differences() {
    // Depth ≤ 6 chains of shape-preserving ops over a 3×4 input, chosen at random.
    for seed in 0..40u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let depth = rng.random_range(1..=6);
        let ops: Vec<u8> = (0..depth).map(|_| rng.random_range(0..6)).collect();
        let inputs = [random_tensor(&mut rng, &[3, 4]), random_tensor(&mut rng, &[3, 4]), random_tensor(&mut rng, &[4, 4])];
        let chain = ops.clone();
        let build = move |g: &mut Graph, v: &[Var]| {
            let mut x = v[0];
            for &op in &chain {
                x = match op {
                    0 => g.add(x, v[1]).unwrap(),
                    1 => g.mul(x, v[1]).unwrap(),
                    2 => g.matmul(x, v[2]).unwrap(),
                    3 => g.l2_normalize(x).unwrap(),
                    4 => g.scale(x, -0.7).unwrap(),
                    _ => {
                        let t = g.transpose(x).unwrap();
                        g.transpose(t).unwrap()
                    }
                };
            }
            weighted_sum(g, x)
        };
        let err = fd_max_error(&build, &inputs);
        assert!(err <= gradcheck::TOLERANCE, "ops {ops:?}: relative error {err:e}");
    }
}

#[test]
fn backward_accumulates_linearly() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let (a, b) = (random_tensor(&mut rng, &[2, 3]), random_tensor(&mut rng, &[3, 2]));
    let mut g = Graph::new();
    let (va, vb) = (g.param(&a), g.param(&b));
    let c = g.matmul(va, vb).unwrap();
    let c = g.relu(c).unwrap();
    let loss = g.mean(c).unwrap();
    g.backward(loss).unwrap();
    let once: Vec<f64> = g.grad(va).unwrap().to_vec();
    g.backward(loss).unwrap();
    let twice = g.grad(va).unwrap();
    for (o, t) in once.iter().zip(twice) {
        assert_eq!(2.0 * o, *t);
    }
    g.zero_grad();
    assert!(g.grad(va).unwrap().iter().all(|&x| x == 0.0));
}

#[test]
fn forward_and_backward_are_bit_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let x = random_tensor(&mut rng, &[2, 6, 6]);
        let k = random_tensor(&mut rng, &[3, 2, 3, 3]);
        let mut g = Graph::new();
        let (vx, vk) = (g.param(&x), g.param(&k));
        let y = g.conv2d(vx, vk, 1).unwrap();
        let y = g.relu(y).unwrap();
        let y = g.avgpool2(y).unwrap();
        let loss = g.sum(y).unwrap();
        g.backward(loss).unwrap();
        (g.value(loss).to_vec(), g.grad(vx).unwrap().to_vec(), g.grad(vk).unwrap().to_vec())
    };
    let (a, b) = (run(), run());
    let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a.0), bits(&b.0));
    assert_eq!(bits(&a.1), bits(&b.1));
    assert_eq!(bits(&a.2), bits(&b.2));
}

#[test]
fn l2_normalize_produces_unit_rows() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    for _ in 0..200 {
        let d = rng.random_range(1..10);
        let scale = 10f64.powf(rng.random_range(-6.0..6.0));
        let x = Tensor::new(vec![1, d], (0..d).map(|_| scale * rng.random_range(-1.0..1.0)).collect()).unwrap();
        let mut g = Graph::new();
        let v = g.constant(&x);
        let y = g.l2_normalize(v).unwrap();
        let norm = g.value(y).iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() <= 1e-12, "norm {norm}");
    }
    let mut g = Graph::new();
    let z = g.constant(&Tensor::zeros(vec![1, 3]));
    assert!(matches!(g.l2_normalize(z), Err(Error::DegenerateInput(_))));
}

#[test]
fn crate_gradient_suite_passes_and_detects_faults() {
    let start = std::time::Instant::now();
    let report = gradcheck::run_suite(0, None).unwrap();
    assert!(report.passed(), "failures: {:?}", report.failures());
    assert!(report.cases.iter().any(|c| c.name.contains("composed")));
    assert!(start.elapsed().as_secs_f64() < 60.0);

    let broken = gradcheck::run_suite(0, Some(gradcheck::parse_fault("conv2d").unwrap())).unwrap();
    let failed = broken.failures();
    assert!(failed.iter().any(|n| n.contains("conv2d")), "{failed:?}");
    assert!(!failed.iter().any(|n| n.contains("matmul")), "{failed:?}");
}
