//! Tensor-level reverse-mode differentiation.
//!
//! A [`Tape`] records one forward pass as a list of nodes in topological
//! order. Parameters enter as leaves that borrow their value from a shared
//! [`ParameterStore`], so several tapes (one per record of a batch) can be
//! alive at once and reduced afterwards. Sequence kernels that are costly to
//! express as primitive ops (scan, attention, convolution) plug in through
//! [`CustomOp`] with hand-written backward passes.

use crate::error::{Error, Result};
use crate::numerics::store::{ParamId, ParameterStore};
use crate::numerics::tensor::{
    self, linear_backward, linear_forward, matmul, sigmoid, transpose, Tensor,
};

/// Index of a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// A differentiable operation with a hand-written vector-Jacobian product.
pub trait CustomOp {
    fn name(&self) -> &'static str;

    /// Gradients for each input given the upstream gradient of the output.
    /// `None` marks an input that receives no gradient.
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>>;
}

enum Op {
    Constant,
    Param(ParamId),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    MatMul {
        a: Var,
        b: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Sub {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        a: Var,
        factor: f64,
    },
    BroadcastRows {
        a: Var,
    },
    Tanh {
        a: Var,
    },
    Sigmoid {
        a: Var,
    },
    Silu {
        a: Var,
    },
    Softplus {
        a: Var,
    },
    Exp {
        a: Var,
    },
    RmsNorm {
        x: Var,
        gain: Var,
        inv_rms: Vec<f64>,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        stats: Vec<(f64, f64)>,
    },
    Gather {
        table: Var,
        index: Vec<usize>,
    },
    ConcatCols {
        a: Var,
        b: Var,
    },
    Reshape {
        a: Var,
    },
    Softmax {
        a: Var,
    },
    MeanRows {
        a: Var,
    },
    Sum {
        a: Var,
    },
    MaskedSquaredError {
        pred: Var,
        target: Vec<f64>,
        mask: Vec<f64>,
        scale: f64,
    },
    BceWithLogits {
        logit: Var,
        label: f64,
        scale: f64,
    },
    Custom {
        inputs: Vec<Var>,
        op: Box<dyn CustomOp>,
    },
}

struct Node {
    value: Option<Tensor>,
    op: Op,
}

/// Parameter gradients produced by [`Tape::backward`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    /// Set when any propagated gradient contained NaN or infinity.
    pub non_finite: bool,
}

impl Gradients {
    pub fn empty(num_params: usize) -> Self {
        Self {
            grads: vec![None; num_params],
            non_finite: false,
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn set(&mut self, id: ParamId, g: Tensor) {
        self.grads[id.0] = Some(g);
    }

    /// Element-wise sum; used to reduce per-record gradients in a fixed order.
    pub fn add(&mut self, other: &Gradients) {
        self.non_finite |= other.non_finite;
        for (mine, theirs) in self.grads.iter_mut().zip(&other.grads) {
            match (mine.as_mut(), theirs) {
                (Some(a), Some(b)) => a.add_assign(b),
                (None, Some(b)) => *mine = Some(b.clone()),
                _ => {}
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for g in self.grads.iter_mut().flatten() {
            g.scale(factor);
        }
    }

    pub fn accumulate_into(&self, store: &mut ParameterStore) {
        for (i, g) in self.grads.iter().enumerate() {
            if let Some(g) = g {
                store.accumulate_grad(ParamId(i), g);
            }
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.grads
            .iter()
            .enumerate()
            .filter_map(|(i, g)| g.as_ref().map(|g| (ParamId(i), g)))
    }
}

pub struct Tape<'s> {
    store: &'s ParameterStore,
    nodes: Vec<Node>,
}

impl<'s> Tape<'s> {
    pub fn new(store: &'s ParameterStore) -> Self {
        Self {
            store,
            nodes: Vec::with_capacity(128),
        }
    }

    pub fn store(&self) -> &'s ParameterStore {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(t), _) => t,
            (None, Op::Param(id)) => self.store.value(*id),
            _ => unreachable!("node without value"),
        }
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node {
            value: Some(value),
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Constant)
    }

    /// `x · Wᵀ + b` with `W: out×in`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let y = linear_forward(self.value(x), self.value(w), b.map(|b| self.value(b)));
        self.push(y, Op::Linear { x, w, b })
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let y = matmul(self.value(a), self.value(b));
        self.push(y, Op::MatMul { a, b })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let y = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push(y, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let y = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.push(y, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let y = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push(y, Op::Mul { a, b })
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let y = self.value(a).map(|x| x * factor);
        self.push(y, Op::Scale { a, factor })
    }

    /// Repeats a vector of length `c` into an `n × c` matrix.
    pub fn broadcast_rows(&mut self, a: Var, n: usize) -> Var {
        let src = self.value(a).data();
        let c = src.len();
        let mut data = Vec::with_capacity(n * c);
        for _ in 0..n {
            data.extend_from_slice(src);
        }
        self.push(
            Tensor::from_parts(vec![n, c], data),
            Op::BroadcastRows { a },
        )
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let y = self.value(a).map(f64::tanh);
        self.push(y, Op::Tanh { a })
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let y = self.value(a).map(sigmoid);
        self.push(y, Op::Sigmoid { a })
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let y = self.value(a).map(tensor::silu);
        self.push(y, Op::Silu { a })
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let y = self.value(a).map(tensor::softplus);
        self.push(y, Op::Softplus { a })
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let y = self.value(a).map(f64::exp);
        self.push(y, Op::Exp { a })
    }

    /// Row-wise RMS normalization with a learned gain.
    pub fn rms_norm(&mut self, x: Var, gain: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let g = self.value(gain).data();
        let (n, c) = (xv.rows(), xv.cols());
        let mut out = vec![0.0; n * c];
        let mut inv_rms = Vec::with_capacity(n);
        for i in 0..n {
            let row = xv.row(i);
            let ms = row.iter().map(|v| v * v).sum::<f64>() / c as f64;
            let r = 1.0 / (ms + eps).sqrt();
            inv_rms.push(r);
            for j in 0..c {
                out[i * c + j] = g[j] * row[j] * r;
            }
        }
        let y = Tensor::from_parts(xv.shape().to_vec(), out);
        self.push(y, Op::RmsNorm { x, gain, inv_rms })
    }

    /// Row-wise layer normalization with gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let (n, c) = (xv.rows(), xv.cols());
        let mut out = vec![0.0; n * c];
        let mut stats = Vec::with_capacity(n);
        for i in 0..n {
            let row = xv.row(i);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let inv = 1.0 / (var + eps).sqrt();
            stats.push((mean, inv));
            for j in 0..c {
                out[i * c + j] = g[j] * (row[j] - mean) * inv + b[j];
            }
        }
        let y = Tensor::from_parts(xv.shape().to_vec(), out);
        self.push(
            y,
            Op::LayerNorm {
                x,
                gain,
                bias,
                stats,
            },
        )
    }

    /// Selects rows of `table` by index.
    pub fn gather(&mut self, table: Var, index: Vec<usize>) -> Result<Var> {
        let t = self.value(table);
        let (rows, c) = (t.rows(), t.cols());
        if let Some(&bad) = index.iter().find(|&&i| i >= rows) {
            return Err(Error::contract(format!(
                "row index {bad} out of range for table with {rows} rows"
            )));
        }
        if index.is_empty() {
            return Err(Error::contract("gather needs at least one index"));
        }
        let mut data = Vec::with_capacity(index.len() * c);
        for &i in &index {
            data.extend_from_slice(t.row(i));
        }
        let y = Tensor::from_parts(vec![index.len(), c], data);
        Ok(self.push(y, Op::Gather { table, index }))
    }

    /// Concatenates two matrices with the same row count along columns.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let n = av.rows();
        debug_assert_eq!(n, bv.rows());
        let (ca, cb) = (av.cols(), bv.cols());
        let mut data = Vec::with_capacity(n * (ca + cb));
        for i in 0..n {
            data.extend_from_slice(av.row(i));
            data.extend_from_slice(bv.row(i));
        }
        let y = Tensor::from_parts(vec![n, ca + cb], data);
        self.push(y, Op::ConcatCols { a, b })
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let y = self.value(a).clone().reshape(shape)?;
        Ok(self.push(y, Op::Reshape { a }))
    }

    /// Softmax over every element of `a`.
    pub fn softmax(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let y = Tensor::from_parts(av.shape().to_vec(), tensor::softmax(av.data()));
        self.push(y, Op::Softmax { a })
    }

    /// Column means of an `n × c` matrix, as `1 × c`.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let (n, c) = (av.rows(), av.cols());
        let mut out = vec![0.0; c];
        for i in 0..n {
            tensor::axpy(1.0, av.row(i), &mut out);
        }
        out.iter_mut().for_each(|x| *x /= n as f64);
        self.push(Tensor::from_parts(vec![1, c], out), Op::MeanRows { a })
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        self.push(Tensor::scalar(s), Op::Sum { a })
    }

    /// `scale · Σ_j mask_j (pred_j − target_j)²`. Masked entries are never
    /// read, so their target values are irrelevant.
    pub fn masked_squared_error(
        &mut self,
        pred: Var,
        target: &[f64],
        mask: &[f64],
        scale: f64,
    ) -> Var {
        let p = self.value(pred).data();
        debug_assert_eq!(p.len(), target.len());
        let mut s = 0.0;
        for j in 0..p.len() {
            if mask[j] != 0.0 {
                let d = p[j] - target[j];
                s += mask[j] * d * d;
            }
        }
        let target = target
            .iter()
            .zip(mask)
            .map(|(&t, &m)| if m != 0.0 { t } else { 0.0 })
            .collect();
        self.push(
            Tensor::scalar(scale * s),
            Op::MaskedSquaredError {
                pred,
                target,
                mask: mask.to_vec(),
                scale,
            },
        )
    }

    /// `scale · BCE(σ(logit), label)`, computed from the logit for stability.
    pub fn bce_with_logits(&mut self, logit: Var, label: f64, scale: f64) -> Var {
        let z = self.value(logit).item();
        // log(1 + e^z) − y z
        let loss = tensor::softplus(z) - label * z;
        self.push(
            Tensor::scalar(scale * loss),
            Op::BceWithLogits {
                logit,
                label,
                scale,
            },
        )
    }

    /// Records a fused op whose forward value the caller already computed.
    pub fn custom(&mut self, inputs: Vec<Var>, output: Tensor, op: Box<dyn CustomOp>) -> Var {
        self.push(output, Op::Custom { inputs, op })
    }

    /// Propagates gradients from the scalar `root` back to every parameter.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        if !self.value(root).is_scalar() {
            return Err(Error::contract(format!(
                "backward needs a scalar root, got shape {:?}",
                self.value(root).shape()
            )));
        }
        let mut out = Gradients::empty(self.store.len());
        let mut grads: Vec<Option<Tensor>> = vec![None; root.0 + 1];
        grads[root.0] = Some(Tensor::scalar(1.0));

        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !g.is_finite() {
                out.non_finite = true;
            }
            let node = &self.nodes[i];
            match &node.op {
                Op::Constant => {}
                Op::Param(id) => match &mut out.grads[id.0] {
                    Some(acc) => acc.add_assign(&g),
                    slot => *slot = Some(g),
                },
                Op::Linear { x, w, b } => {
                    let (gx, gw, gb) = linear_backward(self.value(*x), self.value(*w), &g);
                    accumulate(&mut grads, *x, gx);
                    accumulate(&mut grads, *w, gw);
                    if let Some(b) = b {
                        let gb = gb.reshape(self.value(*b).shape()).expect("bias shape");
                        accumulate(&mut grads, *b, gb);
                    }
                }
                Op::MatMul { a, b } => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let ga = matmul(&g, &transpose(bv))
                        .reshape(av.shape())
                        .expect("shape");
                    let gb = matmul(&transpose(av), &g)
                        .reshape(bv.shape())
                        .expect("shape");
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Add { a, b } => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g);
                }
                Op::Sub { a, b } => {
                    accumulate(&mut grads, *b, g.map(|x| -x));
                    accumulate(&mut grads, *a, g);
                }
                Op::Mul { a, b } => {
                    let ga = g.zip_map(self.value(*b), |x, y| x * y);
                    let gb = g.zip_map(self.value(*a), |x, y| x * y);
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Scale { a, factor } => {
                    accumulate(&mut grads, *a, g.map(|x| x * factor));
                }
                Op::BroadcastRows { a } => {
                    let shape = self.value(*a).shape().to_vec();
                    let c = g.cols();
                    let mut acc = vec![0.0; c];
                    for r in 0..g.rows() {
                        tensor::axpy(1.0, g.row(r), &mut acc);
                    }
                    accumulate(&mut grads, *a, Tensor::from_parts(shape, acc));
                }
                Op::Tanh { a } => {
                    let y = node.value.as_ref().expect("value");
                    accumulate(&mut grads, *a, g.zip_map(y, |g, y| g * (1.0 - y * y)));
                }
                Op::Sigmoid { a } => {
                    let y = node.value.as_ref().expect("value");
                    accumulate(&mut grads, *a, g.zip_map(y, |g, y| g * y * (1.0 - y)));
                }
                Op::Silu { a } => {
                    let ga = g.zip_map(self.value(*a), |g, x| {
                        let s = sigmoid(x);
                        g * s * (1.0 + x * (1.0 - s))
                    });
                    accumulate(&mut grads, *a, ga);
                }
                Op::Softplus { a } => {
                    accumulate(
                        &mut grads,
                        *a,
                        g.zip_map(self.value(*a), |g, x| g * sigmoid(x)),
                    );
                }
                Op::Exp { a } => {
                    let y = node.value.as_ref().expect("value");
                    accumulate(&mut grads, *a, g.zip_map(y, |g, y| g * y));
                }
                Op::RmsNorm { x, gain, inv_rms } => {
                    let (gx, gg) =
                        rms_norm_backward(self.value(*x), self.value(*gain), inv_rms, &g);
                    accumulate(&mut grads, *x, gx);
                    accumulate(&mut grads, *gain, gg);
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    stats,
                } => {
                    let (gx, gg, gb) =
                        layer_norm_backward(self.value(*x), self.value(*gain), stats, &g);
                    accumulate(&mut grads, *x, gx);
                    accumulate(&mut grads, *gain, gg);
                    accumulate(&mut grads, *bias, gb);
                }
                Op::Gather { table, index } => {
                    let t = self.value(*table);
                    let mut gt = Tensor::zeros(t.shape());
                    for (r, &src) in index.iter().enumerate() {
                        tensor::axpy(1.0, g.row(r), gt.row_mut(src));
                    }
                    accumulate(&mut grads, *table, gt);
                }
                Op::ConcatCols { a, b } => {
                    let (ash, bsh) = (
                        self.value(*a).shape().to_vec(),
                        self.value(*b).shape().to_vec(),
                    );
                    let ca = self.value(*a).cols();
                    let cb = self.value(*b).cols();
                    let n = g.rows();
                    let mut ga = Vec::with_capacity(n * ca);
                    let mut gb = Vec::with_capacity(n * cb);
                    for r in 0..n {
                        let row = g.row(r);
                        ga.extend_from_slice(&row[..ca]);
                        gb.extend_from_slice(&row[ca..]);
                    }
                    accumulate(&mut grads, *a, Tensor::from_parts(ash, ga));
                    accumulate(&mut grads, *b, Tensor::from_parts(bsh, gb));
                }
                Op::Reshape { a } => {
                    let shape = self.value(*a).shape().to_vec();
                    accumulate(&mut grads, *a, g.reshape(&shape).expect("shape"));
                }
                Op::Softmax { a } => {
                    let y = node.value.as_ref().expect("value");
                    let d = tensor::dot(g.data(), y.data());
                    accumulate(&mut grads, *a, y.zip_map(&g, |y, g| y * (g - d)));
                }
                Op::MeanRows { a } => {
                    let av = self.value(*a);
                    let n = av.rows();
                    let mut ga = Tensor::zeros(av.shape());
                    for r in 0..n {
                        tensor::axpy(1.0 / n as f64, g.data(), ga.row_mut(r));
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::Sum { a } => {
                    let shape = self.value(*a).shape().to_vec();
                    accumulate(&mut grads, *a, Tensor::filled(&shape, g.item()));
                }
                Op::MaskedSquaredError {
                    pred,
                    target,
                    mask,
                    scale,
                } => {
                    let p = self.value(*pred);
                    let up = g.item();
                    let mut gp = Tensor::zeros(p.shape());
                    for (j, gj) in gp.data_mut().iter_mut().enumerate() {
                        if mask[j] != 0.0 {
                            *gj = up * scale * 2.0 * mask[j] * (p.data()[j] - target[j]);
                        }
                    }
                    accumulate(&mut grads, *pred, gp);
                }
                Op::BceWithLogits {
                    logit,
                    label,
                    scale,
                } => {
                    let z = self.value(*logit);
                    let gz = z.map(|z| g.item() * scale * (sigmoid(z) - label));
                    accumulate(&mut grads, *logit, gz);
                }
                Op::Custom { inputs, op } => {
                    let vals: Vec<&Tensor> = inputs.iter().map(|&v| self.value(v)).collect();
                    let out_val = node.value.as_ref().expect("value");
                    let gin = op.backward(&vals, out_val, &g);
                    debug_assert_eq!(
                        gin.len(),
                        inputs.len(),
                        "{} returned wrong arity",
                        op.name()
                    );
                    for (v, gi) in inputs.iter().zip(gin) {
                        if let Some(gi) = gi {
                            accumulate(&mut grads, *v, gi);
                        }
                    }
                }
            }
        }
        Ok(out)
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(acc) => acc.add_assign(&g),
        slot => *slot = Some(g),
    }
}

fn rms_norm_backward(x: &Tensor, gain: &Tensor, inv_rms: &[f64], gy: &Tensor) -> (Tensor, Tensor) {
    let (n, c) = (x.rows(), x.cols());
    let g = gain.data();
    let mut gx = Tensor::zeros(x.shape());
    let mut gg = vec![0.0; c];
    for i in 0..n {
        let (xr, gyr, r) = (x.row(i), gy.row(i), inv_rms[i]);
        let mut s = 0.0;
        for j in 0..c {
            gg[j] += gyr[j] * xr[j] * r;
            s += g[j] * gyr[j] * xr[j];
        }
        let k = s * r * r * r / c as f64;
        let gxr = gx.row_mut(i);
        for j in 0..c {
            gxr[j] = g[j] * gyr[j] * r - xr[j] * k;
        }
    }
    (gx, Tensor::from_parts(gain.shape().to_vec(), gg))
}

fn layer_norm_backward(
    x: &Tensor,
    gain: &Tensor,
    stats: &[(f64, f64)],
    gy: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let (n, c) = (x.rows(), x.cols());
    let g = gain.data();
    let mut gx = Tensor::zeros(x.shape());
    let mut gg = vec![0.0; c];
    let mut gb = vec![0.0; c];
    let mut xhat = vec![0.0; c];
    let mut dxhat = vec![0.0; c];
    for i in 0..n {
        let (mean, inv) = stats[i];
        let (xr, gyr) = (x.row(i), gy.row(i));
        for j in 0..c {
            xhat[j] = (xr[j] - mean) * inv;
            dxhat[j] = gyr[j] * g[j];
            gg[j] += gyr[j] * xhat[j];
            gb[j] += gyr[j];
        }
        let m1 = dxhat.iter().sum::<f64>() / c as f64;
        let m2 = tensor::dot(&dxhat, &xhat) / c as f64;
        let gxr = gx.row_mut(i);
        for j in 0..c {
            gxr[j] = inv * (dxhat[j] - m1 - xhat[j] * m2);
        }
    }
    (
        gx,
        Tensor::from_parts(gain.shape().to_vec(), gg),
        Tensor::from_parts(gain.shape().to_vec(), gb),
    )
}
