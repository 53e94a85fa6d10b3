//! Dynamic reverse-mode tape.
//!
//! Every forward operation appends a node holding its output value and
//! whatever the backward rule needs. `backward` walks the tape in reverse
//! and accumulates gradients only into nodes that require them, so frozen
//! networks (leaves recorded with `trainable = false`) cost an input-gradient
//! pass but no weight-gradient pass.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::gemm::{gemm, plain, trans};
use super::{ParameterSet, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
    Sigmoid,
    Softmax,
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Activation::Relu => "relu",
            Activation::Tanh => "tanh",
            Activation::Sigmoid => "sigmoid",
            Activation::Softmax => "softmax",
        };
        f.write_str(s)
    }
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Activation::Relu),
            "tanh" => Ok(Activation::Tanh),
            "sigmoid" => Ok(Activation::Sigmoid),
            "softmax" => Ok(Activation::Softmax),
            other => Err(Error::InvalidArgument(format!("unknown activation '{other}'"))),
        }
    }
}

/// Batchnorm behaviour for one forward call.
pub enum BatchNormMode<'a> {
    /// Normalize with batch statistics.
    Train,
    /// Normalize with the supplied running statistics.
    Eval {
        running_mean: &'a [f32],
        running_var: &'a [f32],
    },
}

/// Per-channel statistics of a training-mode batchnorm call; `var` is the
/// unbiased estimate used for running averages.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
}

pub const BATCHNORM_EPS: f32 = 1e-5;

enum Op {
    Leaf,
    Param {
        scope: String,
        name: String,
    },
    Conv1d {
        x: NodeId,
        w: NodeId,
        b: NodeId,
        cols: Vec<f32>,
        wk: Vec<f32>,
        dims: ConvDims,
    },
    Linear {
        x: NodeId,
        w: NodeId,
        b: NodeId,
    },
    BatchNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        xhat: Vec<f32>,
        inv_std: Vec<f32>,
        train: bool,
        channels: usize,
    },
    Relu(NodeId),
    Tanh(NodeId),
    Sigmoid(NodeId),
    Softmax(NodeId),
    Dropout {
        x: NodeId,
        mask: Vec<f32>,
    },
    Reshape(NodeId),
    Add(NodeId, NodeId),
    Gather {
        x: NodeId,
        idx: Vec<usize>,
    },
    OneMinus(NodeId),
    ClampLog {
        x: NodeId,
        lo: f32,
        hi: f32,
    },
    Abs(NodeId),
    MulConst {
        x: NodeId,
        c: Vec<f32>,
    },
    Scale {
        x: NodeId,
        s: f32,
    },
    Sum(NodeId),
    Mean(NodeId),
    CrossEntropy {
        logits: NodeId,
        labels: Vec<usize>,
        probs: Vec<f32>,
    },
}

#[derive(Clone, Copy)]
struct ConvDims {
    n: usize,
    cin: usize,
    cout: usize,
    len: usize,
    k: usize,
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recorded computation for one forward pass.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by one backward pass.
pub struct Gradients {
    nodes: Vec<Option<Vec<f32>>>,
    params: BTreeMap<(String, String), Vec<f32>>,
}

impl Gradients {
    /// Gradient with respect to an input or parameter leaf, if it was reached.
    /// Intermediate nodes are not kept.
    pub fn node(&self, id: NodeId) -> Option<&[f32]> {
        self.nodes.get(id.0).and_then(|g| g.as_deref())
    }

    /// Gradient summed over every leaf recorded for `scope/name`.
    pub fn param(&self, scope: &str, name: &str) -> Option<&[f32]> {
        self.params
            .get(&(scope.to_owned(), name.to_owned()))
            .map(Vec::as_slice)
    }

    pub fn param_names(&self) -> impl Iterator<Item = (&str, &str)> {
        self.params.keys().map(|(s, n)| (s.as_str(), n.as_str()))
    }
}

/// Rows `(s, t)` of `[N * L, K * Cin]` holding the zero-padded window
/// around `t`, tap by tap.
fn im2col(x: &[f32], d: ConvDims) -> Vec<f32> {
    let ck = d.cin * d.k;
    let pad = d.k / 2;
    let mut cols = vec![0.0f32; d.n * d.len * ck];
    for s in 0..d.n {
        for t in 0..d.len {
            let row = &mut cols[(s * d.len + t) * ck..(s * d.len + t + 1) * ck];
            for j in 0..d.k {
                let src = t + j;
                if src >= pad && src - pad < d.len {
                    let at = (s * d.len + src - pad) * d.cin;
                    row[j * d.cin..(j + 1) * d.cin].copy_from_slice(&x[at..at + d.cin]);
                }
            }
        }
    }
    cols
}

fn dims_str(t: &Tensor) -> String {
    format!("{:?}", t.shape())
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|i| self.nodes[i.0].requires_grad)
    }

    fn check(&self, id: NodeId) -> Result<()> {
        if id.0 >= self.nodes.len() {
            return Err(Error::State(format!(
                "node {} was not recorded on this graph",
                id.0
            )));
        }
        Ok(())
    }

    /// Constant input; no gradient is tracked.
    pub fn input(&mut self, t: Tensor) -> NodeId {
        self.push(t, Op::Leaf, false)
    }

    /// Input whose gradient is wanted (gradient checks, saliency).
    pub fn input_with_grad(&mut self, t: Tensor) -> NodeId {
        self.push(t, Op::Leaf, true)
    }

    /// Records a copy of `params[name]`. Frozen leaves still propagate
    /// gradients to upstream inputs but do not produce weight gradients.
    pub fn param(&mut self, params: &ParameterSet, name: &str, trainable: bool) -> Result<NodeId> {
        let value = params.get(name)?.clone();
        Ok(self.push(
            value,
            Op::Param {
                scope: params.scope().to_owned(),
                name: name.to_owned(),
            },
            trainable,
        ))
    }

    /// 'Same' zero-padded 1-D convolution over channels-last activations.
    /// `x: [N, L, Cin]`, `w: [Cout, Cin, K]` with odd `K`, `b: [Cout]`;
    /// the output is `[N, L, Cout]`.
    pub fn conv1d(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        for id in [x, w, b] {
            self.check(id)?;
        }
        let (xt, wt, bt) = (self.value(x), self.value(w), self.value(b));
        if xt.shape().len() != 3 || wt.shape().len() != 3 || bt.shape().len() != 1 {
            return Err(Error::shape(
                "conv1d",
                format!(
                    "input {} / weights {} / bias {} must be rank 3/3/1",
                    dims_str(xt),
                    dims_str(wt),
                    dims_str(bt)
                ),
            ));
        }
        let (n, len, cin) = (xt.shape()[0], xt.shape()[1], xt.shape()[2]);
        let (cout, wcin, k) = (wt.shape()[0], wt.shape()[1], wt.shape()[2]);
        if wcin != cin {
            return Err(Error::shape(
                "conv1d",
                format!("input channels {cin} != weight input channels {wcin}"),
            ));
        }
        if bt.shape()[0] != cout {
            return Err(Error::shape(
                "conv1d",
                format!("bias length {} != output channels {cout}", bt.shape()[0]),
            ));
        }
        if k % 2 == 0 {
            return Err(Error::shape("conv1d", format!("kernel width {k} must be odd")));
        }
        let dims = ConvDims { n, cin, cout, len, k };
        let ck = cin * k;
        // tap-major copy of the weights: [Cout, K * Cin]
        let wd = wt.data();
        let mut wk = vec![0.0f32; cout * ck];
        for o in 0..cout {
            for c in 0..cin {
                for j in 0..k {
                    wk[o * ck + j * cin + c] = wd[(o * cin + c) * k + j];
                }
            }
        }
        let cols = im2col(xt.data(), dims);
        let mut out: Vec<f32> = bt.data().iter().copied().cycle().take(n * len * cout).collect();
        gemm(n * len, ck, cout, plain(&cols), trans(&wk), 1.0, &mut out);
        let rg = self.rg(&[x, w, b]);
        let value = Tensor::new(vec![n, len, cout], out)?;
        Ok(self.push(value, Op::Conv1d { x, w, b, cols, wk, dims }, rg))
    }

    /// Fully connected layer. `x: [N, In]` (or `[In]`), `w: [Out, In]`, `b: [Out]`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        for id in [x, w, b] {
            self.check(id)?;
        }
        let (xt, wt, bt) = (self.value(x), self.value(w), self.value(b));
        if wt.shape().len() != 2 || bt.shape().len() != 1 || !(1..=2).contains(&xt.shape().len()) {
            return Err(Error::shape(
                "dense",
                format!(
                    "input {} / weights {} / bias {} must be rank 1-2/2/1",
                    dims_str(xt),
                    dims_str(wt),
                    dims_str(bt)
                ),
            ));
        }
        let vector_input = xt.shape().len() == 1;
        let (n, fin) = if vector_input {
            (1, xt.shape()[0])
        } else {
            (xt.shape()[0], xt.shape()[1])
        };
        let (fout, wfin) = (wt.shape()[0], wt.shape()[1]);
        if wfin != fin {
            return Err(Error::shape(
                "dense",
                format!("input features {fin} != weight columns {wfin}"),
            ));
        }
        if bt.shape()[0] != fout {
            return Err(Error::shape(
                "dense",
                format!("bias length {} != weight rows {fout}", bt.shape()[0]),
            ));
        }
        let mut out = vec![0.0f32; n * fout];
        for row in out.chunks_mut(fout) {
            row.copy_from_slice(bt.data());
        }
        gemm(n, fin, fout, plain(xt.data()), trans(wt.data()), 1.0, &mut out);
        let shape = if vector_input { vec![fout] } else { vec![n, fout] };
        let rg = self.rg(&[x, w, b]);
        Ok(self.push(Tensor::new(shape, out)?, Op::Linear { x, w, b }, rg))
    }

    /// Batch normalization per channel over `[N, C]` or channels-last
    /// `[N, L, C]` inputs. Training mode needs at least two samples and also
    /// returns the batch statistics so the caller can update its running
    /// averages.
    pub fn batch_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mode: BatchNormMode<'_>,
    ) -> Result<(NodeId, Option<BatchStats>)> {
        for id in [x, gamma, beta] {
            self.check(id)?;
        }
        let xt = self.value(x);
        let (n, c) = match xt.shape() {
            [n, c] | [n, _, c] => (*n, *c),
            s => {
                return Err(Error::shape(
                    "batchnorm",
                    format!("input must be [N, C] or [N, L, C], got {s:?}"),
                ))
            }
        };
        let (gt, bt) = (self.value(gamma), self.value(beta));
        if gt.shape() != [c] || bt.shape() != [c] {
            return Err(Error::shape(
                "batchnorm",
                format!(
                    "gamma {} / beta {} must be [{c}]",
                    dims_str(gt),
                    dims_str(bt)
                ),
            ));
        }
        let xd = xt.data();
        let m = xd.len() / c.max(1);
        let train = matches!(mode, BatchNormMode::Train);
        let (mean, istd, stats) = match mode {
            BatchNormMode::Train => {
                if n < 2 {
                    return Err(Error::InvalidArgument(format!(
                        "batchnorm in training mode needs a batch of at least 2, got {n}"
                    )));
                }
                let mut mean = vec![0.0f64; c];
                for row in xd.chunks(c) {
                    for (a, &v) in mean.iter_mut().zip(row) {
                        *a += v as f64;
                    }
                }
                mean.iter_mut().for_each(|a| *a /= m as f64);
                let mut sq = vec![0.0f64; c];
                for row in xd.chunks(c) {
                    for ((a, &v), mu) in sq.iter_mut().zip(row).zip(&mean) {
                        *a += (v as f64 - mu).powi(2);
                    }
                }
                let istd: Vec<f64> = sq
                    .iter()
                    .map(|q| 1.0 / (q / m as f64 + BATCHNORM_EPS as f64).sqrt())
                    .collect();
                let stats = BatchStats {
                    mean: mean.iter().map(|&v| v as f32).collect(),
                    var: sq.iter().map(|q| (q / (m - 1).max(1) as f64) as f32).collect(),
                };
                (mean, istd, Some(stats))
            }
            BatchNormMode::Eval {
                running_mean,
                running_var,
            } => {
                if running_mean.len() != c || running_var.len() != c {
                    return Err(Error::shape(
                        "batchnorm",
                        format!(
                            "running stats have {}/{} entries, expected {c}",
                            running_mean.len(),
                            running_var.len()
                        ),
                    ));
                }
                let mean = running_mean.iter().map(|&v| v as f64).collect();
                let istd = running_var
                    .iter()
                    .map(|&v| 1.0 / (v as f64 + BATCHNORM_EPS as f64).sqrt())
                    .collect();
                (mean, istd, None)
            }
        };
        let mut xhat = Vec::with_capacity(xd.len());
        for row in xd.chunks(c) {
            for ((&v, mu), is) in row.iter().zip(&mean).zip(&istd) {
                xhat.push(((v as f64 - mu) * is) as f32);
            }
        }
        let (gd, bd) = (gt.data(), bt.data());
        let mut out = Vec::with_capacity(xd.len());
        for row in xhat.chunks(c) {
            for ((&h, g), b) in row.iter().zip(gd).zip(bd) {
                out.push(g * h + b);
            }
        }
        let shape = xt.shape().to_vec();
        let rg = self.rg(&[x, gamma, beta]);
        let id = self.push(
            Tensor::new(shape, out)?,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std: istd.iter().map(|&v| v as f32).collect(),
                train,
                channels: c,
            },
            rg,
        );
        Ok((id, stats))
    }

    pub fn activation(&mut self, x: NodeId, kind: Activation) -> Result<NodeId> {
        match kind {
            Activation::Relu => self.relu(x),
            Activation::Tanh => self.tanh(x),
            Activation::Sigmoid => self.sigmoid(x),
            Activation::Softmax => self.softmax(x),
        }
    }

    fn map_unary(&mut self, x: NodeId, f: impl Fn(f32) -> f32, op: Op) -> Result<NodeId> {
        self.check(x)?;
        let xt = self.value(x);
        let data = xt.data().iter().map(|&v| f(v)).collect();
        let value = Tensor::new(xt.shape().to_vec(), data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, op, rg))
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        self.map_unary(x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn tanh(&mut self, x: NodeId) -> Result<NodeId> {
        self.map_unary(x, tanh, Op::Tanh(x))
    }

    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId> {
        self.map_unary(x, sigmoid, Op::Sigmoid(x))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId> {
        self.check(x)?;
        let xt = self.value(x);
        let width = *xt.shape().last().ok_or_else(|| {
            Error::shape("softmax", "scalar input has no class axis")
        })?;
        let mut out = vec![0.0f32; xt.numel()];
        for (src, dst) in xt.data().chunks(width.max(1)).zip(out.chunks_mut(width.max(1))) {
            softmax_row(src, dst);
        }
        let value = Tensor::new(xt.shape().to_vec(), out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Softmax(x), rg))
    }

    /// Inverted dropout. With `rng = None` (evaluation) this is the identity.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: NodeId, rate: f32, rng: Option<&mut R>) -> Result<NodeId> {
        self.check(x)?;
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::InvalidArgument(format!(
                "dropout rate must lie in [0, 1), got {rate}"
            )));
        }
        let rng = match rng {
            Some(r) if rate > 0.0 => r,
            _ => return Ok(x),
        };
        let xt = self.value(x);
        let keep = 1.0 / (1.0 - rate);
        let mask: Vec<f32> = (0..xt.numel())
            .map(|_| if rng.random::<f32>() < rate { 0.0 } else { keep })
            .collect();
        let data = xt.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let value = Tensor::new(xt.shape().to_vec(), data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Dropout { x, mask }, rg))
    }

    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        self.check(x)?;
        let value = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check(a)?;
        self.check(b)?;
        let (at, bt) = (self.value(a), self.value(b));
        if at.shape() != bt.shape() {
            return Err(Error::shape(
                "add",
                format!("{} vs {}", dims_str(at), dims_str(bt)),
            ));
        }
        let data = at.data().iter().zip(bt.data()).map(|(x, y)| x + y).collect();
        let value = Tensor::new(at.shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    /// `out[i] = x[i, idx[i]]` for `x: [N, K]`.
    pub fn gather(&mut self, x: NodeId, idx: &[usize]) -> Result<NodeId> {
        self.check(x)?;
        let xt = self.value(x);
        let (n, k) = match xt.shape() {
            [n, k] => (*n, *k),
            s => return Err(Error::shape("gather", format!("input must be [N, K], got {s:?}"))),
        };
        if idx.len() != n {
            return Err(Error::shape(
                "gather",
                format!("{} indices for {n} rows", idx.len()),
            ));
        }
        if let Some(bad) = idx.iter().find(|&&i| i >= k) {
            return Err(Error::InvalidArgument(format!(
                "gather index {bad} out of range for {k} columns"
            )));
        }
        let data = idx.iter().enumerate().map(|(r, &c)| xt.data()[r * k + c]).collect();
        let value = Tensor::new(vec![n], data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(
            value,
            Op::Gather {
                x,
                idx: idx.to_vec(),
            },
            rg,
        ))
    }

    pub fn one_minus(&mut self, x: NodeId) -> Result<NodeId> {
        self.map_unary(x, |v| 1.0 - v, Op::OneMinus(x))
    }

    /// `log(clamp(x, lo, hi))`. The backward rule evaluates `1/x` at the
    /// clamped point, so saturated inputs keep a finite, non-zero gradient.
    pub fn clamp_log(&mut self, x: NodeId, lo: f32, hi: f32) -> Result<NodeId> {
        if !(lo > 0.0 && lo <= hi) {
            return Err(Error::InvalidArgument(format!(
                "clamp_log needs 0 < lo <= hi, got [{lo}, {hi}]"
            )));
        }
        self.map_unary(x, move |v| v.clamp(lo, hi).ln(), Op::ClampLog { x, lo, hi })
    }

    pub fn abs(&mut self, x: NodeId) -> Result<NodeId> {
        self.map_unary(x, f32::abs, Op::Abs(x))
    }

    /// Elementwise product with a constant tensor of the same size.
    pub fn mul_const(&mut self, x: NodeId, c: Vec<f32>) -> Result<NodeId> {
        self.check(x)?;
        let xt = self.value(x);
        if c.len() != xt.numel() {
            return Err(Error::shape(
                "mul_const",
                format!("{} constants for input {}", c.len(), dims_str(xt)),
            ));
        }
        let data = xt.data().iter().zip(&c).map(|(v, w)| v * w).collect();
        let value = Tensor::new(xt.shape().to_vec(), data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::MulConst { x, c }, rg))
    }

    pub fn scale(&mut self, x: NodeId, s: f32) -> Result<NodeId> {
        self.map_unary(x, move |v| v * s, Op::Scale { x, s })
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        self.check(x)?;
        let total: f64 = self.value(x).data().iter().map(|&v| v as f64).sum();
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::scalar(total as f32), Op::Sum(x), rg))
    }

    pub fn mean(&mut self, x: NodeId) -> Result<NodeId> {
        self.check(x)?;
        let xt = self.value(x);
        if xt.numel() == 0 {
            return Err(Error::InvalidArgument("mean of an empty tensor".into()));
        }
        let total: f64 = xt.data().iter().map(|&v| v as f64).sum();
        let value = Tensor::scalar((total / xt.numel() as f64) as f32);
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Mean(x), rg))
    }

    /// Mean negative log-likelihood of `labels` under `softmax(logits)`.
    pub fn cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        self.check(logits)?;
        let lt = self.value(logits);
        let (n, k) = match lt.shape() {
            [n, k] => (*n, *k),
            s => {
                return Err(Error::shape(
                    "cross_entropy",
                    format!("logits must be [N, K], got {s:?}"),
                ))
            }
        };
        if labels.len() != n || n == 0 {
            return Err(Error::shape(
                "cross_entropy",
                format!("{} labels for {n} rows", labels.len()),
            ));
        }
        if let Some(bad) = labels.iter().find(|&&y| y >= k) {
            return Err(Error::InvalidArgument(format!(
                "label {bad} out of range for {k} classes"
            )));
        }
        let mut probs = vec![0.0f32; n * k];
        let mut total = 0.0f64;
        for (r, (row, prow)) in lt.data().chunks(k).zip(probs.chunks_mut(k)).enumerate() {
            let max = row.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b)) as f64;
            let z: f64 = row.iter().map(|&v| (v as f64 - max).exp()).sum();
            let log_z = z.ln() + max;
            total -= row[labels[r]] as f64 - log_z;
            for (p, &v) in prow.iter_mut().zip(row) {
                *p = (v as f64 - log_z).exp() as f32;
            }
        }
        let value = Tensor::scalar((total / n as f64) as f32);
        let rg = self.rg(&[logits]);
        Ok(self.push(
            value,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Backpropagates from a scalar node with seed gradient 1.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        self.check(loss)?;
        if self.value(loss).numel() != 1 {
            return Err(Error::State(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        self.backward_with(loss, vec![1.0])
    }

    /// Backpropagates an arbitrary upstream gradient from `root`.
    pub fn backward_with(&self, root: NodeId, seed: Vec<f32>) -> Result<Gradients> {
        if self.nodes.is_empty() {
            return Err(Error::State("backward called before any forward pass".into()));
        }
        self.check(root)?;
        if seed.len() != self.value(root).numel() {
            return Err(Error::shape(
                "backward",
                format!(
                    "seed has {} values, root has {}",
                    seed.len(),
                    self.value(root).numel()
                ),
            ));
        }
        let mut grads: Vec<Option<Vec<f32>>> = Vec::new();
        grads.resize_with(root.0 + 1, || None);
        grads[root.0] = Some(seed);

        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if self.nodes[i].requires_grad {
                self.backprop_node(i, &g, &mut grads);
            }
            // only leaf gradients are reported
            if matches!(self.nodes[i].op, Op::Leaf | Op::Param { .. }) {
                grads[i] = Some(g);
            }
        }

        let mut params: BTreeMap<(String, String), Vec<f32>> = BTreeMap::new();
        for (i, node) in self.nodes.iter().enumerate().take(root.0 + 1) {
            if let (Op::Param { scope, name }, true, Some(g)) =
                (&node.op, node.requires_grad, grads[i].as_ref())
            {
                match params.entry((scope.clone(), name.clone())) {
                    std::collections::btree_map::Entry::Vacant(v) => {
                        v.insert(g.clone());
                    }
                    std::collections::btree_map::Entry::Occupied(mut o) => {
                        o.get_mut().iter_mut().zip(g).for_each(|(a, b)| *a += b);
                    }
                }
            }
        }
        Ok(Gradients {
            nodes: grads,
            params,
        })
    }

    fn wants(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn backprop_node(&self, i: usize, g: &[f32], grads: &mut [Option<Vec<f32>>]) {
        let node = &self.nodes[i];
        let acc = |grads: &mut [Option<Vec<f32>>], id: NodeId, f: &mut dyn FnMut(&mut [f32])| {
            let n = self.nodes[id.0].value.numel();
            let slot = grads[id.0].get_or_insert_with(|| vec![0.0; n]);
            f(slot);
        };
        match &node.op {
            Op::Leaf | Op::Param { .. } => {}
            Op::Conv1d {
                x,
                w,
                b,
                cols,
                wk,
                dims,
            } => {
                let ConvDims {
                    n,
                    cin,
                    cout,
                    len,
                    k,
                } = *dims;
                let ck = cin * k;
                let rows = n * len;
                if self.wants(*w) {
                    let mut dwk = vec![0.0f32; cout * ck];
                    gemm(cout, rows, ck, trans(g), plain(cols), 0.0, &mut dwk);
                    acc(grads, *w, &mut |dw| {
                        for o in 0..cout {
                            for c in 0..cin {
                                for j in 0..k {
                                    dw[(o * cin + c) * k + j] += dwk[o * ck + j * cin + c];
                                }
                            }
                        }
                    });
                }
                if self.wants(*b) {
                    acc(grads, *b, &mut |db| {
                        for row in g.chunks(cout) {
                            for (d, v) in db.iter_mut().zip(row) {
                                *d += v;
                            }
                        }
                    });
                }
                if self.wants(*x) {
                    let mut dcols = vec![0.0f32; rows * ck];
                    gemm(rows, cout, ck, plain(g), plain(wk), 0.0, &mut dcols);
                    let pad = k / 2;
                    acc(grads, *x, &mut |dx| {
                        for s in 0..n {
                            for t in 0..len {
                                let row = &dcols[(s * len + t) * ck..(s * len + t + 1) * ck];
                                for j in 0..k {
                                    let src = t + j;
                                    if src >= pad && src - pad < len {
                                        let at = (s * len + src - pad) * cin;
                                        for (d, v) in dx[at..at + cin].iter_mut().zip(&row[j * cin..(j + 1) * cin]) {
                                            *d += v;
                                        }
                                    }
                                }
                            }
                        }
                    });
                }
            }
            Op::Linear { x, w, b } => {
                let xt = self.value(*x);
                let wt = self.value(*w);
                let (fout, fin) = (wt.shape()[0], wt.shape()[1]);
                let n = xt.numel() / fin;
                if self.wants(*w) {
                    acc(grads, *w, &mut |dw| {
                        gemm(fout, n, fin, trans(g), plain(xt.data()), 1.0, dw);
                    });
                }
                if self.wants(*b) {
                    acc(grads, *b, &mut |db| {
                        for row in g.chunks(fout) {
                            for (d, v) in db.iter_mut().zip(row) {
                                *d += v;
                            }
                        }
                    });
                }
                if self.wants(*x) {
                    acc(grads, *x, &mut |dx| {
                        gemm(n, fout, fin, plain(g), plain(wt.data()), 1.0, dx);
                    });
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
                channels,
            } => {
                let c = *channels;
                let gd = self.value(*gamma).data();
                let m = (g.len() / c) as f64;
                let mut sum_dy = vec![0.0f64; c];
                let mut sum_dy_xhat = vec![0.0f64; c];
                for (grow, hrow) in g.chunks(c).zip(xhat.chunks(c)) {
                    for ch in 0..c {
                        sum_dy[ch] += grow[ch] as f64;
                        sum_dy_xhat[ch] += grow[ch] as f64 * hrow[ch] as f64;
                    }
                }
                if self.wants(*gamma) {
                    acc(grads, *gamma, &mut |d| {
                        for ch in 0..c {
                            d[ch] += sum_dy_xhat[ch] as f32;
                        }
                    });
                }
                if self.wants(*beta) {
                    acc(grads, *beta, &mut |d| {
                        for ch in 0..c {
                            d[ch] += sum_dy[ch] as f32;
                        }
                    });
                }
                if self.wants(*x) {
                    let scale: Vec<f64> = (0..c).map(|ch| gd[ch] as f64 * inv_std[ch] as f64).collect();
                    acc(grads, *x, &mut |dx| {
                        for ((drow, grow), hrow) in dx.chunks_mut(c).zip(g.chunks(c)).zip(xhat.chunks(c)) {
                            for ch in 0..c {
                                let v = if *train {
                                    scale[ch] / m
                                        * (m * grow[ch] as f64 - sum_dy[ch] - hrow[ch] as f64 * sum_dy_xhat[ch])
                                } else {
                                    scale[ch] * grow[ch] as f64
                                };
                                drow[ch] += v as f32;
                            }
                        }
                    });
                }
            }
            Op::Relu(x) => {
                let xd = self.value(*x).data();
                acc(grads, *x, &mut |dx| {
                    for ((d, &v), &gi) in dx.iter_mut().zip(xd).zip(g) {
                        if v > 0.0 {
                            *d += gi;
                        }
                    }
                });
            }
            Op::Tanh(x) => {
                let y = node.value.data();
                acc(grads, *x, &mut |dx| {
                    for ((d, &yi), &gi) in dx.iter_mut().zip(y).zip(g) {
                        *d += gi * (1.0 - yi * yi);
                    }
                });
            }
            Op::Sigmoid(x) => {
                let y = node.value.data();
                acc(grads, *x, &mut |dx| {
                    for ((d, &yi), &gi) in dx.iter_mut().zip(y).zip(g) {
                        *d += gi * yi * (1.0 - yi);
                    }
                });
            }
            Op::Softmax(x) => {
                let y = node.value.data();
                let width = *node.value.shape().last().unwrap_or(&1);
                acc(grads, *x, &mut |dx| {
                    for ((drow, yrow), grow) in dx
                        .chunks_mut(width)
                        .zip(y.chunks(width))
                        .zip(g.chunks(width))
                    {
                        let dot: f64 = yrow.iter().zip(grow).map(|(a, b)| *a as f64 * *b as f64).sum();
                        for ((d, &yi), &gi) in drow.iter_mut().zip(yrow).zip(grow) {
                            *d += (yi as f64 * (gi as f64 - dot)) as f32;
                        }
                    }
                });
            }
            Op::Dropout { x, mask } => {
                acc(grads, *x, &mut |dx| {
                    for ((d, m), gi) in dx.iter_mut().zip(mask).zip(g) {
                        *d += gi * m;
                    }
                });
            }
            Op::Reshape(x) => {
                acc(grads, *x, &mut |dx| {
                    dx.iter_mut().zip(g).for_each(|(d, gi)| *d += gi);
                });
            }
            Op::Add(a, b) => {
                for id in [*a, *b] {
                    if self.wants(id) {
                        acc(grads, id, &mut |dx| {
                            dx.iter_mut().zip(g).for_each(|(d, gi)| *d += gi);
                        });
                    }
                }
            }
            Op::Gather { x, idx } => {
                let k = self.value(*x).shape()[1];
                acc(grads, *x, &mut |dx| {
                    for (r, (&c, gi)) in idx.iter().zip(g).enumerate() {
                        dx[r * k + c] += gi;
                    }
                });
            }
            Op::OneMinus(x) => {
                acc(grads, *x, &mut |dx| {
                    dx.iter_mut().zip(g).for_each(|(d, gi)| *d -= gi);
                });
            }
            Op::ClampLog { x, lo, hi } => {
                let xd = self.value(*x).data();
                acc(grads, *x, &mut |dx| {
                    for ((d, &v), gi) in dx.iter_mut().zip(xd).zip(g) {
                        *d += gi / v.clamp(*lo, *hi);
                    }
                });
            }
            Op::Abs(x) => {
                let xd = self.value(*x).data();
                acc(grads, *x, &mut |dx| {
                    for ((d, &v), gi) in dx.iter_mut().zip(xd).zip(g) {
                        if v > 0.0 {
                            *d += gi;
                        } else if v < 0.0 {
                            *d -= gi;
                        }
                    }
                });
            }
            Op::MulConst { x, c } => {
                acc(grads, *x, &mut |dx| {
                    for ((d, w), gi) in dx.iter_mut().zip(c).zip(g) {
                        *d += gi * w;
                    }
                });
            }
            Op::Scale { x, s } => {
                acc(grads, *x, &mut |dx| {
                    dx.iter_mut().zip(g).for_each(|(d, gi)| *d += gi * s);
                });
            }
            Op::Sum(x) => {
                let g0 = g[0];
                acc(grads, *x, &mut |dx| dx.iter_mut().for_each(|d| *d += g0));
            }
            Op::Mean(x) => {
                let n = self.value(*x).numel() as f32;
                let g0 = g[0] / n;
                acc(grads, *x, &mut |dx| dx.iter_mut().for_each(|d| *d += g0));
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let k = self.value(*logits).shape()[1];
                let scale = g[0] / labels.len() as f32;
                acc(grads, *logits, &mut |dx| {
                    for (r, (drow, prow)) in dx.chunks_mut(k).zip(probs.chunks(k)).enumerate() {
                        for (c, (d, p)) in drow.iter_mut().zip(prow).enumerate() {
                            let onehot = if c == labels[r] { 1.0 } else { 0.0 };
                            *d += scale * (p - onehot);
                        }
                    }
                });
            }
        }
    }
}

/// Largest `f32` below one.
const BELOW_ONE: f32 = 1.0 - f32::EPSILON / 2.0;

/// `tanh` kept inside the open interval (-1, 1) at `f32` precision.
pub fn tanh(v: f32) -> f32 {
    v.tanh().clamp(-BELOW_ONE, BELOW_ONE)
}

/// Logistic function kept inside the open interval (0, 1) at `f32` precision.
pub fn sigmoid(v: f32) -> f32 {
    let s = if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    };
    s.clamp(f32::MIN_POSITIVE, BELOW_ONE)
}

/// Numerically stable softmax of one row, accumulated in `f64`.
pub fn softmax_row(src: &[f32], dst: &mut [f32]) {
    let max = src.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b)) as f64;
    let z: f64 = src.iter().map(|&v| (v as f64 - max).exp()).sum();
    for (d, &v) in dst.iter_mut().zip(src) {
        *d = ((v as f64 - max).exp() / z) as f32;
    }
}
