use mimo_core::data::{gen_blobs, gen_noisy_regression, sample_mimo_batch, SamplingConfig};
use mimo_core::model::{build_network, Architecture, NamedTensor, Network, NetworkConfig, Task};
use mimo_core::seed::rng_from_seed;
use mimo_core::tensor::{gradient_check, gradient_check_tensors, Graph, NodeId, Result, Tensor};
use mimo_core::training::{check_loss_gradient, compute_loss, sgd_step, OptimizerConfig};
use proptest::prelude::*;
use rand::Rng;

const TOLERANCE: f64 = 1e-5;

fn random_tensor(shape: &[usize], lo: f64, hi: f64, rng: &mut impl Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Values bounded away from zero so relu/abs kinks stay out of the stencil.
fn off_zero(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v = rng.random_range(0.05..2.0);
            if rng.random_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// `sum(out * w)` for a fixed random `w`, so every output coordinate matters.
fn project(g: &mut Graph, out: NodeId, seed: u64) -> Result<NodeId> {
    let shape = g.value(out).shape().to_vec();
    let mut rng = rng_from_seed(seed ^ 0x5eed);
    let w = g.constant(random_tensor(&shape, -1.0, 1.0, &mut rng));
    let prod = g.mul(out, w)?;
    g.sum(prod)
}

fn check(point: Vec<Tensor>, seed: u64, op: impl Fn(&mut Graph, &[NodeId]) -> Result<NodeId>) -> f64 {
    gradient_check_tensors(&point, |g, ids| {
        let out = op(g, ids)?;
        project(g, out, seed)
    })
    .unwrap()
}

fn dims() -> impl Strategy<Value = (usize, usize, usize, u64)> {
    (1usize..5, 1usize..5, 1usize..5, any::<u64>())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn matmul_gradients((m, k, n, seed) in dims()) {
        let mut rng = rng_from_seed(seed);
        let point = vec![random_tensor(&[m, k], -1.0, 1.0, &mut rng), random_tensor(&[k, n], -1.0, 1.0, &mut rng)];
        prop_assert!(check(point, seed, |g, p| g.matmul(p[0], p[1])) < TOLERANCE);
    }

    #[test]
    fn add_sub_mul_gradients((m, n, _, seed) in dims()) {
        let mut rng = rng_from_seed(seed);
        let point = vec![random_tensor(&[m, n], -1.0, 1.0, &mut rng), random_tensor(&[m, n], -1.0, 1.0, &mut rng)];
        prop_assert!(check(point.clone(), seed, |g, p| g.add(p[0], p[1])) < TOLERANCE);
        prop_assert!(check(point.clone(), seed, |g, p| g.sub(p[0], p[1])) < TOLERANCE);
        prop_assert!(check(point, seed, |g, p| g.mul(p[0], p[1])) < TOLERANCE);
    }

    #[test]
    fn broadcast_gradients((m, n, _, seed) in dims()) {
        let mut rng = rng_from_seed(seed);
        let point = vec![random_tensor(&[m, n], -1.0, 1.0, &mut rng), random_tensor(&[n], -1.0, 1.0, &mut rng)];
        prop_assert!(check(point.clone(), seed, |g, p| g.add(p[0], p[1])) < TOLERANCE);
        prop_assert!(check(point.clone(), seed, |g, p| g.sub(p[0], p[1])) < TOLERANCE);
        prop_assert!(check(point, seed, |g, p| g.mul(p[0], p[1])) < TOLERANCE);
    }

    #[test]
    fn concat_and_slice_gradients((m, a, b, seed) in dims()) {
        let mut rng = rng_from_seed(seed);
        let point = vec![random_tensor(&[m, a], -1.0, 1.0, &mut rng), random_tensor(&[m, b], -1.0, 1.0, &mut rng)];
        prop_assert!(check(point.clone(), seed, |g, p| g.concat(p)) < TOLERANCE);
        let start = seed as usize % (a + b);
        let len = 1 + (seed as usize / 7) % (a + b - start);
        let err = check(point, seed, |g, p| {
            let c = g.concat(p)?;
            g.slice(c, start, len)
        });
        prop_assert!(err < TOLERANCE);
    }

    #[test]
    fn elementwise_gradients((m, n, _, seed) in dims()) {
        let mut rng = rng_from_seed(seed);
        let x = off_zero(&[m, n], &mut rng);
        let pos = random_tensor(&[m, n], 0.1, 3.0, &mut rng);
        prop_assert!(check(vec![x.clone()], seed, |g, p| g.relu(p[0])) < TOLERANCE);
        prop_assert!(check(vec![x.clone()], seed, |g, p| g.abs(p[0])) < TOLERANCE);
        prop_assert!(check(vec![x.clone()], seed, |g, p| g.square(p[0])) < TOLERANCE);
        prop_assert!(check(vec![x.clone()], seed, |g, p| g.scale(p[0], -1.7)) < TOLERANCE);
        prop_assert!(check(vec![pos], seed, |g, p| g.log(p[0])) < TOLERANCE);
        prop_assert!(check(vec![x], seed, |g, p| g.reshape(p[0], vec![m * n])) < TOLERANCE);
    }

    #[test]
    fn softmax_gradients((m, n, _, seed) in dims()) {
        let mut rng = rng_from_seed(seed);
        let x = random_tensor(&[m, n + 1], -3.0, 3.0, &mut rng);
        prop_assert!(check(vec![x.clone()], seed, |g, p| g.softmax(p[0])) < TOLERANCE);
        prop_assert!(check(vec![x], seed, |g, p| g.log_softmax(p[0])) < TOLERANCE);
    }

    #[test]
    fn reduction_gradients((m, n, _, seed) in dims()) {
        let mut rng = rng_from_seed(seed);
        let x = random_tensor(&[m, n], -2.0, 2.0, &mut rng);
        prop_assert!(check(vec![x.clone()], seed, |g, p| g.mean(p[0])) < TOLERANCE);
        prop_assert!(check(vec![x], seed, |g, p| g.sum(p[0])) < TOLERANCE);
    }

    #[test]
    fn softmax_rows_are_distributions((m, n, _, seed) in dims()) {
        let mut rng = rng_from_seed(seed);
        let mut g = Graph::new();
        let x = g.constant(random_tensor(&[m, n], -30.0, 30.0, &mut rng));
        let s = g.softmax(x).unwrap();
        let out = g.value(s);
        for r in 0..m {
            let row = out.row(r);
            prop_assert!(row.iter().all(|&v| v >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn concat_then_slice_is_identity((m, a, b, seed) in dims()) {
        let mut rng = rng_from_seed(seed);
        let left = random_tensor(&[m, a], -1.0, 1.0, &mut rng);
        let right = random_tensor(&[m, b], -1.0, 1.0, &mut rng);
        let mut g = Graph::new();
        let l = g.constant(left.clone());
        let r = g.constant(right.clone());
        let c = g.concat(&[l, r]).unwrap();
        let back_l = g.slice(c, 0, a).unwrap();
        let back_r = g.slice(c, a, b).unwrap();
        prop_assert_eq!(g.value(back_l), &left);
        prop_assert_eq!(g.value(back_r), &right);
    }

    #[test]
    fn evaluation_is_bit_deterministic((m, k, n, seed) in dims()) {
        let run = || {
            let mut rng = rng_from_seed(seed);
            let mut g = Graph::new();
            let a = g.constant(random_tensor(&[m, k], -1.0, 1.0, &mut rng));
            let b = g.constant(random_tensor(&[k, n], -1.0, 1.0, &mut rng));
            let c = g.matmul(a, b).unwrap();
            let s = g.log_softmax(c).unwrap();
            g.value(s).clone()
        };
        prop_assert_eq!(run(), run());
    }
}

#[test]
fn quadratic_gradient_check() {
    let err = gradient_check(&[1.0, 2.0, 3.0], |g, p| {
        let sq = g.square(p)?;
        g.sum(sq)
    })
    .unwrap();
    assert!(err < 1e-8);
}

#[test]
fn linear_regression_gradient_check() {
    let mut rng = rng_from_seed(3);
    let x = random_tensor(&[5, 3], -1.0, 1.0, &mut rng);
    let y = random_tensor(&[5, 2], -1.0, 1.0, &mut rng);
    let w = random_tensor(&[3, 2], -1.0, 1.0, &mut rng);
    let err = gradient_check_tensors(&[w], |g, p| {
        let xn = g.constant(x.clone());
        let yn = g.constant(y.clone());
        let pred = g.matmul(xn, p[0])?;
        let d = g.sub(pred, yn)?;
        let sq = g.square(d)?;
        g.mean(sq)
    })
    .unwrap();
    assert!(err < 1e-6);
}

fn jitter(net: &Network, seed: u64) -> Network {
    let mut rng = rng_from_seed(seed);
    let params = net
        .parameters()
        .iter()
        .map(|p| NamedTensor {
            name: p.name.clone(),
            tensor: Tensor::new(
                p.tensor.shape().to_vec(),
                p.tensor.data().iter().map(|v| v + rng.random_range(-0.3..0.3)).collect(),
            )
            .unwrap(),
        })
        .collect();
    Network::from_parameters(net.config().clone(), params).unwrap()
}

#[test]
fn mlp_loss_gradients_at_random_init() {
    for (i, arch) in [Architecture::Mimo, Architecture::NaiveMultihead, Architecture::DeepEnsemble, Architecture::Standard]
        .into_iter()
        .enumerate()
    {
        for task in [Task::Classification, Task::Regression] {
            let m = if arch == Architecture::Standard { 1 } else { 3 };
            let (input_dim, output_dim, data) = match task {
                Task::Classification => (2, 3, gen_blobs(20, 3, 2, 2.0, i as u64).unwrap()),
                Task::Regression => (1, 1, gen_noisy_regression(20, i as u64, (0.0, 0.5), 0.02).unwrap()),
            };
            let net = build_network(&NetworkConfig {
                ensemble_size: m,
                input_dim,
                hidden_widths: vec![5, 4],
                output_dim,
                task,
                architecture: arch,
                init_seed: i as u64,
            })
            .unwrap();
            let net = jitter(&net, 40 + i as u64);
            let sampling = SamplingConfig {
                batch_size: 6,
                ensemble_size: m,
                input_repetition_probability: 0.3,
                batch_repetitions: 2,
                seed: 1,
            };
            let batch = sample_mimo_batch(&data, &sampling, &mut rng_from_seed(2)).unwrap();
            let err = check_loss_gradient(&net, &batch, 1e-3, 1e-2).unwrap();
            assert!(err < TOLERANCE, "{arch:?} {task:?}: {err}");
        }
    }
}

#[test]
fn sgd_step_matches_hand_rolled_update() {
    // one input, no hidden layer, two classes: logits = x * [w0, w1] + [b0, b1]
    let config = NetworkConfig {
        ensemble_size: 1,
        input_dim: 1,
        hidden_widths: vec![],
        output_dim: 2,
        task: Task::Classification,
        architecture: Architecture::Standard,
        init_seed: 0,
    };
    let (w, b) = ([0.3, -0.2], [0.1, 0.05]);
    let params = vec![
        NamedTensor {
            name: "output.weight".into(),
            tensor: Tensor::new(vec![1, 2], w.to_vec()).unwrap(),
        },
        NamedTensor {
            name: "output.bias".into(),
            tensor: Tensor::new(vec![2], b.to_vec()).unwrap(),
        },
    ];
    let mut net = Network::from_parameters(config, params).unwrap();
    let x = [0.7, -1.2];
    let y = [0usize, 1];
    let batch = mimo_core::data::MimoBatch {
        inputs: vec![Tensor::new(vec![2, 1], x.to_vec()).unwrap()],
        labels: vec![Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap()],
        indices: vec![vec![0, 1]],
    };
    let lr = 0.5;
    let opt = OptimizerConfig::with_step_decay(lr, 1);

    // textbook softmax cross-entropy gradient: (p - onehot) averaged over the batch
    let mut gw = [0.0; 2];
    let mut gb = [0.0; 2];
    for i in 0..2 {
        let z: Vec<f64> = (0..2).map(|k| x[i] * w[k] + b[k]).collect();
        let zmax = z[0].max(z[1]);
        let e: Vec<f64> = z.iter().map(|v| (v - zmax).exp()).collect();
        let s = e[0] + e[1];
        for k in 0..2 {
            let d = e[k] / s - if y[i] == k { 1.0 } else { 0.0 };
            gw[k] += d * x[i] / 2.0;
            gb[k] += d / 2.0;
        }
    }
    sgd_step(&mut net, &batch, &opt, lr).unwrap();
    let new_w = net.parameter("output.weight").unwrap().data().to_vec();
    let new_b = net.parameter("output.bias").unwrap().data().to_vec();
    for k in 0..2 {
        assert!((new_w[k] - (w[k] - lr * gw[k])).abs() < 1e-14);
        assert!((new_b[k] - (b[k] - lr * gb[k])).abs() < 1e-14);
    }
}

#[test]
fn summed_head_nll_equals_joint_nll() {
    let data = gen_blobs(30, 3, 2, 2.0, 5).unwrap();
    let net = build_network(&NetworkConfig {
        ensemble_size: 3,
        input_dim: 2,
        hidden_widths: vec![6],
        output_dim: 3,
        task: Task::Classification,
        architecture: Architecture::Mimo,
        init_seed: 5,
    })
    .unwrap();
    let sampling = SamplingConfig {
        batch_size: 1,
        ensemble_size: 3,
        input_repetition_probability: 0.0,
        batch_repetitions: 1,
        seed: 0,
    };
    let mut rng = rng_from_seed(9);
    for _ in 0..20 {
        let batch = sample_mimo_batch(&data, &sampling, &mut rng).unwrap();
        let mut g = Graph::new();
        let params: Vec<NodeId> = net.parameters().iter().map(|p| g.constant(p.tensor.clone())).collect();
        let loss = compute_loss(&mut g, &net, &params, &batch, 0.0, 0.0).unwrap();
        let summed = g.value(loss.total).data()[0];
        let heads = net.forward_mimo(&batch.inputs).unwrap();
        let joint: f64 = (0..3)
            .map(|m| {
                let class = batch.labels[m].row(0).iter().position(|&v| v == 1.0).unwrap();
                heads[m].row(0)[class]
            })
            .product();
        assert!((summed + joint.ln()).abs() < 1e-12, "{summed} vs {}", -joint.ln());
    }
}
