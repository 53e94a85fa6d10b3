//! Analytic gradients of every layer and loss against central differences
//! of plain f64 reference implementations.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sitscf::losses::{
    class_swap_loss_node, discriminator_loss_node, generator_loss_node, localization_weights, weighted_l1_loss_node,
};
use sitscf::nnkernel::{Activation, BatchNormMode, Graph, NodeId, Tensor, BATCHNORM_EPS};

const TOL: f64 = 1e-3;
const H: f64 = 1e-6;
const CASES: u64 = 12;

thread_local! {
    static CHECKED: std::cell::Cell<usize> = const { std::cell::Cell::new(0) };
}

/// Runs every check on this thread and returns how many randomized cases
/// passed; panics on the first failure.
#[allow(dead_code)]
pub fn run_all() -> usize {
    CHECKED.with(|c| c.set(0));
    check_conv1d();
    check_dense();
    check_batchnorm_train_and_eval();
    check_activations_and_softmax();
    check_dropout_and_flatten();
    check_composed_tempcnn_block();
    check_counterfactual_losses();
    CHECKED.with(|c| c.get())
}

type Oracle<'a> = dyn Fn(&[Vec<f64>]) -> f64 + 'a;

fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f32, hi: f32) -> Vec<f32> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

fn tensor(shape: &[usize], data: Vec<f32>) -> Tensor {
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// `|a - b| / max(|b|, 1e-2)` in the 2-norm. The floor covers gradients
/// that are exactly zero, e.g. a conv bias feeding batch normalization.
fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let norm: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    diff / norm.max(1e-2)
}

/// Builds the graph on `inputs` (all differentiable), backpropagates the
/// scalar it returns, and compares every input gradient with central
/// differences of `oracle`. Also checks the forward value.
fn check(name: &str, inputs: &[Tensor], build: &dyn Fn(&mut Graph, &[NodeId]) -> NodeId, oracle: &Oracle<'_>) {
    let mut g = Graph::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| g.input_with_grad(t.clone())).collect();
    let loss = build(&mut g, &ids);
    let value = g.value(loss).item() as f64;
    let grads = g.backward(loss).unwrap();

    let mut point: Vec<Vec<f64>> = inputs.iter().map(|t| t.data().iter().map(|&v| v as f64).collect()).collect();
    let reference = oracle(&point);
    assert!(
        (value - reference).abs() <= 1e-4 * reference.abs().max(1.0),
        "{name}: forward {value} vs reference {reference}"
    );
    for (k, id) in ids.iter().enumerate() {
        let analytic: Vec<f64> = grads
            .node(*id)
            .map(|g| g.iter().map(|&v| v as f64).collect())
            .unwrap_or_else(|| vec![0.0; inputs[k].numel()]);
        let mut numeric = Vec::with_capacity(analytic.len());
        for i in 0..point[k].len() {
            let orig = point[k][i];
            point[k][i] = orig + H;
            let up = oracle(&point);
            point[k][i] = orig - H;
            let down = oracle(&point);
            point[k][i] = orig;
            numeric.push((up - down) / (2.0 * H));
        }
        let err = rel_err(&analytic, &numeric);
        assert!(err < TOL, "{name}: input {k} relative error {err}");
    }
    CHECKED.with(|c| c.set(c.get() + 1));
}

/// Contracts a layer output with fixed weights so it becomes a scalar.
fn project(g: &mut Graph, out: NodeId, r: &[f32]) -> NodeId {
    let m = g.mul_const(out, r.to_vec()).unwrap();
    g.sum(m).unwrap()
}

fn dot(a: &[f64], r: &[f32]) -> f64 {
    a.iter().zip(r).map(|(x, &w)| x * w as f64).sum()
}

fn conv_ref(x: &[f64], w: &[f64], b: &[f64], n: usize, len: usize, cin: usize, cout: usize, k: usize) -> Vec<f64> {
    let pad = k / 2;
    let mut out = vec![0.0; n * len * cout];
    for s in 0..n {
        for t in 0..len {
            for o in 0..cout {
                let mut acc = b[o];
                for c in 0..cin {
                    for j in 0..k {
                        let src = t as isize + j as isize - pad as isize;
                        if src >= 0 && (src as usize) < len {
                            acc += w[(o * cin + c) * k + j] * x[(s * len + src as usize) * cin + c];
                        }
                    }
                }
                out[(s * len + t) * cout + o] = acc;
            }
        }
    }
    out
}

fn linear_ref(x: &[f64], w: &[f64], b: &[f64], n: usize, fin: usize, fout: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * fout];
    for s in 0..n {
        for o in 0..fout {
            out[s * fout + o] = b[o] + (0..fin).map(|i| w[o * fin + i] * x[s * fin + i]).sum::<f64>();
        }
    }
    out
}

/// Per-channel normalization of channels-last rows with batch statistics
/// (`stats = None`) or the given `(mean, var)`.
fn bn_ref(x: &[f64], gamma: &[f64], beta: &[f64], c: usize, stats: Option<(&[f64], &[f64])>) -> Vec<f64> {
    let m = (x.len() / c) as f64;
    let (mean, var): (Vec<f64>, Vec<f64>) = match stats {
        Some((mu, v)) => (mu.to_vec(), v.to_vec()),
        None => {
            let mean: Vec<f64> = (0..c).map(|ch| x.iter().skip(ch).step_by(c).sum::<f64>() / m).collect();
            let var = (0..c)
                .map(|ch| x.iter().skip(ch).step_by(c).map(|v| (v - mean[ch]).powi(2)).sum::<f64>() / m)
                .collect();
            (mean, var)
        }
    };
    x.iter()
        .enumerate()
        .map(|(i, v)| {
            let ch = i % c;
            gamma[ch] * (v - mean[ch]) / (var[ch] + BATCHNORM_EPS as f64).sqrt() + beta[ch]
        })
        .collect()
}

fn softmax_ref(x: &[f64], k: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks(k) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
        out.extend(row.iter().map(|v| (v - max).exp() / z));
    }
    out
}

fn sigmoid_ref(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

fn check_conv1d() {
    for seed in 0..CASES {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (n, len, cin, cout) = (rng.random_range(1..4), rng.random_range(3..9), rng.random_range(1..4), rng.random_range(1..5));
        let k = [1, 3, 5][rng.random_range(0..3)];
        let x = tensor(&[n, len, cin], uniform(&mut rng, n * len * cin, -1.0, 1.0));
        let w = tensor(&[cout, cin, k], uniform(&mut rng, cout * cin * k, -0.5, 0.5));
        let b = tensor(&[cout], uniform(&mut rng, cout, -0.5, 0.5));
        let r = uniform(&mut rng, n * len * cout, -1.0, 1.0);
        check(
            "conv1d",
            &[x, w, b],
            &|g, ids| {
                let y = g.conv1d(ids[0], ids[1], ids[2]).unwrap();
                project(g, y, &r)
            },
            &|p| dot(&conv_ref(&p[0], &p[1], &p[2], n, len, cin, cout, k), &r),
        );
    }
}

fn check_dense() {
    for seed in 0..CASES {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let (n, fin, fout) = (rng.random_range(1..5), rng.random_range(1..8), rng.random_range(1..6));
        let x = tensor(&[n, fin], uniform(&mut rng, n * fin, -1.0, 1.0));
        let w = tensor(&[fout, fin], uniform(&mut rng, fout * fin, -0.5, 0.5));
        let b = tensor(&[fout], uniform(&mut rng, fout, -0.5, 0.5));
        let r = uniform(&mut rng, n * fout, -1.0, 1.0);
        check(
            "dense",
            &[x, w, b],
            &|g, ids| {
                let y = g.linear(ids[0], ids[1], ids[2]).unwrap();
                project(g, y, &r)
            },
            &|p| dot(&linear_ref(&p[0], &p[1], &p[2], n, fin, fout), &r),
        );
    }
}

fn check_batchnorm_train_and_eval() {
    for seed in 0..CASES {
        let mut rng = ChaCha8Rng::seed_from_u64(200 + seed);
        let (n, c) = (rng.random_range(2..6), rng.random_range(1..4));
        let shape = if seed % 2 == 0 { vec![n, c] } else { vec![n, rng.random_range(2..5), c] };
        let numel: usize = shape.iter().product();
        let x = tensor(&shape, uniform(&mut rng, numel, -1.0, 1.0));
        let gamma = tensor(&[c], uniform(&mut rng, c, 0.5, 1.5));
        let beta = tensor(&[c], uniform(&mut rng, c, -0.5, 0.5));
        let r = uniform(&mut rng, numel, -1.0, 1.0);
        check(
            "batchnorm train",
            &[x.clone(), gamma.clone(), beta.clone()],
            &|g, ids| {
                let (y, _) = g.batch_norm(ids[0], ids[1], ids[2], BatchNormMode::Train).unwrap();
                project(g, y, &r)
            },
            &|p| dot(&bn_ref(&p[0], &p[1], &p[2], c, None), &r),
        );

        let mean = uniform(&mut rng, c, -0.2, 0.2);
        let var = uniform(&mut rng, c, 0.5, 2.0);
        let (m64, v64): (Vec<f64>, Vec<f64>) =
            (mean.iter().map(|&v| v as f64).collect(), var.iter().map(|&v| v as f64).collect());
        check(
            "batchnorm eval",
            &[x, gamma, beta],
            &|g, ids| {
                let mode = BatchNormMode::Eval {
                    running_mean: &mean,
                    running_var: &var,
                };
                let (y, _) = g.batch_norm(ids[0], ids[1], ids[2], mode).unwrap();
                project(g, y, &r)
            },
            &|p| dot(&bn_ref(&p[0], &p[1], &p[2], c, Some((&m64, &v64))), &r),
        );
    }
}

fn check_activations_and_softmax() {
    for seed in 0..CASES {
        let mut rng = ChaCha8Rng::seed_from_u64(300 + seed);
        let (n, k) = (rng.random_range(1..4), rng.random_range(2..6));
        // keep away from the ReLU kink
        let data: Vec<f32> = uniform(&mut rng, n * k, 0.05, 2.0)
            .into_iter()
            .map(|v| if rng.random::<bool>() { v } else { -v })
            .collect();
        let x = tensor(&[n, k], data);
        let r = uniform(&mut rng, n * k, -1.0, 1.0);
        let refs: [(Activation, fn(f64) -> f64); 3] = [
            (Activation::Relu, |v| v.max(0.0)),
            (Activation::Tanh, f64::tanh),
            (Activation::Sigmoid, sigmoid_ref),
        ];
        for (kind, f) in refs {
            check(
                &format!("{kind:?}"),
                &[x.clone()],
                &|g, ids| {
                    let y = g.activation(ids[0], kind).unwrap();
                    project(g, y, &r)
                },
                &|p| dot(&p[0].iter().map(|&v| f(v)).collect::<Vec<_>>(), &r),
            );
        }
        check(
            "softmax",
            &[x.clone()],
            &|g, ids| {
                let y = g.softmax(ids[0]).unwrap();
                project(g, y, &r)
            },
            &|p| dot(&softmax_ref(&p[0], k), &r),
        );
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
        check(
            "cross entropy",
            &[x],
            &|g, ids| g.cross_entropy(ids[0], &labels).unwrap(),
            &|p| {
                let probs = softmax_ref(&p[0], k);
                -labels.iter().enumerate().map(|(i, &y)| probs[i * k + y].ln()).sum::<f64>() / n as f64
            },
        );
    }
}

fn check_dropout_and_flatten() {
    for seed in 0..CASES {
        let mut rng = ChaCha8Rng::seed_from_u64(400 + seed);
        let (n, len, c) = (rng.random_range(1..4), rng.random_range(2..6), rng.random_range(1..4));
        let rate = rng.random_range(0.1..0.7f32);
        let x = tensor(&[n, len, c], uniform(&mut rng, n * len * c, -1.0, 1.0));
        let r = uniform(&mut rng, n * len * c, -1.0, 1.0);
        // the mask a given rng state draws, read off an all-ones input
        let mask: Vec<f64> = {
            let mut g = Graph::new();
            let ones = g.input(Tensor::filled(vec![n, len, c], 1.0));
            let mut mrng = ChaCha8Rng::seed_from_u64(seed);
            let y = g.dropout(ones, rate, Some(&mut mrng)).unwrap();
            g.value(y).data().iter().map(|&v| v as f64).collect()
        };
        check(
            "dropout + flatten",
            &[x],
            &|g, ids| {
                let mut mrng = ChaCha8Rng::seed_from_u64(seed);
                let y = g.dropout(ids[0], rate, Some(&mut mrng)).unwrap();
                let f = g.reshape(y, vec![n, len * c]).unwrap();
                project(g, f, &r)
            },
            &|p| dot(&p[0].iter().zip(&mask).map(|(v, m)| v * m).collect::<Vec<_>>(), &r),
        );
    }
}

fn check_composed_tempcnn_block() {
    for seed in 0..CASES {
        let mut rng = ChaCha8Rng::seed_from_u64(500 + seed);
        let (n, len, ch, k, classes) = (rng.random_range(2..4), rng.random_range(3..7), 2, 3, 3);
        let x = tensor(&[n, len, 1], uniform(&mut rng, n * len, -1.0, 1.0));
        let w = tensor(&[ch, 1, k], uniform(&mut rng, ch * k, -1.0, 1.0));
        let b = tensor(&[ch], uniform(&mut rng, ch, -0.5, 0.5));
        let gamma = tensor(&[ch], uniform(&mut rng, ch, 0.5, 1.5));
        let beta = tensor(&[ch], uniform(&mut rng, ch, -0.5, 0.5));
        let dw = tensor(&[classes, len * ch], uniform(&mut rng, classes * len * ch, -0.5, 0.5));
        let db = tensor(&[classes], uniform(&mut rng, classes, -0.5, 0.5));
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..classes)).collect();
        check(
            "conv-bn-tanh-dense-ce",
            &[x, w, b, gamma, beta, dw, db],
            &|g, ids| {
                let y = g.conv1d(ids[0], ids[1], ids[2]).unwrap();
                let (y, _) = g.batch_norm(y, ids[3], ids[4], BatchNormMode::Train).unwrap();
                let y = g.tanh(y).unwrap();
                let y = g.reshape(y, vec![n, len * ch]).unwrap();
                let y = g.linear(y, ids[5], ids[6]).unwrap();
                g.cross_entropy(y, &labels).unwrap()
            },
            &|p| {
                let y = conv_ref(&p[0], &p[1], &p[2], n, len, 1, ch, k);
                let y: Vec<f64> = bn_ref(&y, &p[3], &p[4], ch, None).into_iter().map(f64::tanh).collect();
                let y = linear_ref(&y, &p[5], &p[6], n, len * ch, classes);
                let probs = softmax_ref(&y, classes);
                -labels.iter().enumerate().map(|(i, &c)| probs[i * classes + c].ln()).sum::<f64>() / n as f64
            },
        );
    }
}

fn check_counterfactual_losses() {
    for seed in 0..CASES {
        let mut rng = ChaCha8Rng::seed_from_u64(600 + seed);
        let (n, k) = (rng.random_range(1..5), rng.random_range(2..5));
        let logits = tensor(&[n, k], uniform(&mut rng, n * k, -2.0, 2.0));
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
        check(
            "class swap",
            &[logits],
            &|g, ids| {
                let p = g.softmax(ids[0]).unwrap();
                class_swap_loss_node(g, p, &labels).unwrap()
            },
            &|p| {
                let probs = softmax_ref(&p[0], k);
                -labels.iter().enumerate().map(|(i, &y)| (1.0 - probs[i * k + y]).ln()).sum::<f64>() / n as f64
            },
        );

        let real = tensor(&[n], uniform(&mut rng, n, -3.0, 3.0));
        let fake = tensor(&[n], uniform(&mut rng, n, -3.0, 3.0));
        check(
            "discriminator loss",
            &[real, fake.clone()],
            &|g, ids| {
                let r = g.sigmoid(ids[0]).unwrap();
                let f = g.sigmoid(ids[1]).unwrap();
                discriminator_loss_node(g, r, f).unwrap()
            },
            &|p| {
                let r: f64 = p[0].iter().map(|&v| sigmoid_ref(v).ln()).sum::<f64>() / n as f64;
                let f: f64 = p[1].iter().map(|&v| (1.0 - sigmoid_ref(v)).ln()).sum::<f64>() / n as f64;
                -(r + f)
            },
        );
        check(
            "generator loss",
            &[fake],
            &|g, ids| {
                let f = g.sigmoid(ids[0]).unwrap();
                generator_loss_node(g, f).unwrap()
            },
            &|p| -p[0].iter().map(|&v| sigmoid_ref(v).ln()).sum::<f64>() / n as f64,
        );

        // weighted l1 with the peak frozen at its initial position; entries
        // stay away from zero and the peak is unique.
        let len = rng.random_range(4..12);
        let mut delta: Vec<f32> = uniform(&mut rng, n * len, 0.05, 0.5)
            .into_iter()
            .map(|v| if rng.random::<bool>() { v } else { -v })
            .collect();
        for row in delta.chunks_mut(len) {
            let at = rng.random_range(0..len);
            row[at] = row[at].signum() * 0.9;
        }
        let weights: Vec<f64> = delta.chunks(len).flat_map(localization_weights).map(|w| w as f64).collect();
        check(
            "weighted l1",
            &[tensor(&[n, len], delta)],
            &|g, ids| weighted_l1_loss_node(g, ids[0]).unwrap(),
            &|p| p[0].iter().zip(&weights).map(|(d, w)| w * d.abs()).sum::<f64>() / n as f64,
        );
    }
}

#[test]
fn conv1d() {
    check_conv1d();
}

#[test]
fn dense() {
    check_dense();
}

#[test]
fn batchnorm_train_and_eval() {
    check_batchnorm_train_and_eval();
}

#[test]
fn activations_and_softmax() {
    check_activations_and_softmax();
}

#[test]
fn dropout_and_flatten() {
    check_dropout_and_flatten();
}

#[test]
fn composed_tempcnn_block() {
    check_composed_tempcnn_block();
}

#[test]
fn counterfactual_losses() {
    check_counterfactual_losses();
}
