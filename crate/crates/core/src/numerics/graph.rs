use std::collections::{BTreeMap, HashMap};

use super::kernels::gemm;
use super::{ParamStore, Tensor};
use crate::error::{Error, Result};

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Gradients keyed by parameter name.
pub type GradMap = BTreeMap<String, Tensor>;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum GradMode {
    /// Only parameters flagged trainable receive gradients.
    Trainable,
    /// Every parameter receives gradients, regardless of its flag.
    All,
    /// Inference: nothing is differentiated.
    Off,
}

enum Op {
    Leaf,
    Param(String),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    Transpose(Var),
    Square(Var),
    Relu(Var),
    Gelu(Var),
    LayerNorm { x: Var, inv_std: Vec<f64> },
    LogSoftmax(Var),
    Softmax(Var),
    WeightedSum { layers: Vec<Var>, weights: Var },
    Unfold { x: Var, kernel: usize, stride: usize },
    Attention { q: Var, k: Var, v: Var, heads: usize, probs: Vec<f64> },
    MaskRows { x: Var, fill: Var, mask: Vec<bool> },
    Sum(Var),
    Mean(Var),
    MaskedMse { pred: Var, target: Tensor, mask: Vec<bool> },
    /// Scalar computed outside the tape with a known gradient w.r.t. `input`.
    External { input: Var, grad: Tensor },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Param(_) => "param",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddRow(..) => "add_row",
            Op::MulRow(..) => "mul_row",
            Op::Scale(..) => "scale",
            Op::Transpose(_) => "transpose",
            Op::Square(_) => "square",
            Op::Relu(_) => "relu",
            Op::Gelu(_) => "gelu",
            Op::LayerNorm { .. } => "layer_norm",
            Op::LogSoftmax(_) => "log_softmax",
            Op::Softmax(_) => "softmax",
            Op::WeightedSum { .. } => "weighted_sum",
            Op::Unfold { .. } => "unfold",
            Op::Attention { .. } => "attention",
            Op::MaskRows { .. } => "mask_rows",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::MaskedMse { .. } => "masked_mse",
            Op::External { .. } => "external",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Define-by-run tape. A fresh graph is recorded for every step.
///
/// Operations panic on shape mismatches between recorded nodes; those are
/// programming errors. Inputs arriving from outside should be validated
/// before they reach the graph.
pub struct Graph<'p> {
    params: Option<&'p ParamStore>,
    nodes: Vec<Node>,
    param_vars: HashMap<String, Var>,
    mode: GradMode,
    first_non_finite: Option<(usize, &'static str)>,
}

impl<'p> Graph<'p> {
    /// Graph differentiating the trainable parameters of `params`.
    pub fn new(params: &'p ParamStore) -> Self {
        Self::with_mode(Some(params), GradMode::Trainable)
    }

    /// Graph differentiating every parameter of `params`, trainable or not.
    pub fn with_all_grads(params: &'p ParamStore) -> Self {
        Self::with_mode(Some(params), GradMode::All)
    }

    /// Inference-only graph.
    pub fn no_grad(params: &'p ParamStore) -> Self {
        Self::with_mode(Some(params), GradMode::Off)
    }

    /// Graph without a parameter store; only leaves and constants.
    pub fn detached() -> Graph<'static> {
        Graph::with_mode(None, GradMode::Trainable)
    }

    fn with_mode(params: Option<&'p ParamStore>, mode: GradMode) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            param_vars: HashMap::new(),
            mode,
            first_non_finite: None,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let id = self.nodes.len();
        if self.first_non_finite.is_none() && !value.is_finite() {
            self.first_non_finite = Some((id, op.name()));
        }
        let requires_grad = requires_grad && self.mode != GradMode::Off;
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(id)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Non-differentiated input.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Differentiable free leaf; its gradient is available via [`Graph::backward_vars`].
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Node holding the current value of parameter `name`.
    ///
    /// Repeated calls return the same node, so gradients accumulate.
    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.param_vars.get(name) {
            return Ok(v);
        }
        let store = self
            .params
            .ok_or_else(|| Error::UnknownParam(name.to_string()))?;
        let p = store.get(name)?;
        let rg = match self.mode {
            GradMode::Trainable => p.trainable,
            GradMode::All => true,
            GradMode::Off => false,
        };
        let v = self.push(p.value.clone(), Op::Param(name.to_string()), rg);
        self.param_vars.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k, n) = (av.rows(), av.cols(), bv.cols());
        assert_eq!(k, bv.rows(), "matmul {:?} x {:?}", av.shape(), bv.shape());
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, av.data(), false, bv.data(), false, &mut out, 0.0);
        let rg = self.rg(&[a, b]);
        self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b), rg)
    }

    fn zip_same(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "elementwise op shape mismatch");
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::from_parts(av.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let t = self.zip_same(a, b, |x, y| x + y);
        let rg = self.rg(&[a, b]);
        self.push(t, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let t = self.zip_same(a, b, |x, y| x - y);
        let rg = self.rg(&[a, b]);
        self.push(t, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let t = self.zip_same(a, b, |x, y| x * y);
        let rg = self.rg(&[a, b]);
        self.push(t, Op::Mul(a, b), rg)
    }

    fn broadcast_row(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (av, bv) = (self.value(a), self.value(b));
        let c = av.cols();
        assert_eq!(bv.len(), c, "row broadcast {:?} with {:?}", av.shape(), bv.shape());
        let row = bv.data();
        let data = av
            .data()
            .chunks(c)
            .flat_map(|r| r.iter().zip(row).map(|(&x, &y)| f(x, y)))
            .collect();
        Tensor::from_parts(av.shape().to_vec(), data)
    }

    /// `a + b` with `b` (length = columns of `a`) added to every row.
    pub fn add_row(&mut self, a: Var, b: Var) -> Var {
        let t = self.broadcast_row(a, b, |x, y| x + y);
        let rg = self.rg(&[a, b]);
        self.push(t, Op::AddRow(a, b), rg)
    }

    /// `a * b` with `b` (length = columns of `a`) multiplied into every row.
    pub fn mul_row(&mut self, a: Var, b: Var) -> Var {
        let t = self.broadcast_row(a, b, |x, y| x * y);
        let rg = self.rg(&[a, b]);
        self.push(t, Op::MulRow(a, b), rg)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let t = self.value(a).map(|x| x * c);
        let rg = self.rg(&[a]);
        self.push(t, Op::Scale(a, c), rg)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|x| x * x);
        let rg = self.rg(&[a]);
        self.push(t, Op::Square(a), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|x| x.max(0.0));
        let rg = self.rg(&[a]);
        self.push(t, Op::Relu(a), rg)
    }

    /// Tanh approximation of GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|x| {
            let u = GELU_C * (x + 0.044715 * x * x * x);
            0.5 * x * (1.0 + u.tanh())
        });
        let rg = self.rg(&[a]);
        self.push(t, Op::Gelu(a), rg)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let t = self.value(a).transpose();
        let rg = self.rg(&[a]);
        self.push(t, Op::Transpose(a), rg)
    }

    /// Per-column normalisation over rows (time), no affine part.
    pub fn instance_norm(&mut self, x: Var) -> Var {
        let t = self.transpose(x);
        let n = self.layer_norm(t);
        self.transpose(n)
    }

    /// Per-row normalisation to zero mean and unit variance (no affine part).
    pub fn layer_norm(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let c = xv.cols();
        let mut out = Vec::with_capacity(xv.len());
        let mut inv_std = Vec::with_capacity(xv.rows());
        for row in xv.data().chunks(c) {
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c as f64;
            let inv = 1.0 / (var + LN_EPS).sqrt();
            inv_std.push(inv);
            out.extend(row.iter().map(|v| (v - mean) * inv));
        }
        let t = Tensor::from_parts(xv.shape().to_vec(), out);
        let rg = self.rg(&[x]);
        self.push(t, Op::LayerNorm { x, inv_std }, rg)
    }

    pub fn log_softmax(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let c = xv.cols();
        let mut out = Vec::with_capacity(xv.len());
        for row in xv.data().chunks(c) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            out.extend(row.iter().map(|v| v - lse));
        }
        let t = Tensor::from_parts(xv.shape().to_vec(), out);
        let rg = self.rg(&[x]);
        self.push(t, Op::LogSoftmax(x), rg)
    }

    /// Row-wise softmax (a vector is a single row).
    pub fn softmax(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let c = xv.cols();
        let mut out = Vec::with_capacity(xv.len());
        for row in xv.data().chunks(c) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
            let z: f64 = exps.iter().sum();
            out.extend(exps.into_iter().map(|e| e / z));
        }
        let t = Tensor::from_parts(xv.shape().to_vec(), out);
        let rg = self.rg(&[x]);
        self.push(t, Op::Softmax(x), rg)
    }

    /// `Σ_l weights[l] * layers[l]`; `weights` is used as given.
    pub fn weighted_sum(&mut self, layers: &[Var], weights: Var) -> Var {
        let wv = self.value(weights).data().to_vec();
        assert_eq!(wv.len(), layers.len(), "one weight per layer");
        let shape = self.value(layers[0]).shape().to_vec();
        let mut out = vec![0.0; self.value(layers[0]).len()];
        for (&l, &w) in layers.iter().zip(&wv) {
            let lv = self.value(l);
            assert_eq!(lv.shape(), shape.as_slice(), "layers must share a shape");
            for (o, x) in out.iter_mut().zip(lv.data()) {
                *o += w * x;
            }
        }
        let mut deps = layers.to_vec();
        deps.push(weights);
        let rg = self.rg(&deps);
        self.push(
            Tensor::from_parts(shape, out),
            Op::WeightedSum {
                layers: layers.to_vec(),
                weights,
            },
            rg,
        )
    }

    /// Frames `[T, C]` to strided windows `[ceil(T / stride), kernel * C]`.
    ///
    /// Window `t` covers input rows `t*stride .. t*stride + kernel`; rows past
    /// the end read as zero.
    pub fn unfold(&mut self, x: Var, kernel: usize, stride: usize) -> Var {
        let xv = self.value(x);
        let (t_in, c) = (xv.rows(), xv.cols());
        let t_out = t_in.div_ceil(stride);
        let mut out = vec![0.0; t_out * kernel * c];
        for t in 0..t_out {
            for j in 0..kernel {
                let src = t * stride + j;
                if src < t_in {
                    let dst = t * kernel * c + j * c;
                    out[dst..dst + c].copy_from_slice(xv.row(src));
                }
            }
        }
        let rg = self.rg(&[x]);
        self.push(
            Tensor::from_parts(vec![t_out, kernel * c], out),
            Op::Unfold { x, kernel, stride },
            rg,
        )
    }

    /// Multi-head scaled dot-product attention over `[T, d]` projections.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (t, d) = (qv.rows(), qv.cols());
        assert!(kv.shape() == qv.shape() && vv.shape() == qv.shape());
        assert_eq!(d % heads, 0);
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut probs = vec![0.0; heads * t * t];
        let mut out = vec![0.0; t * d];
        let (qd, kd, vd) = (qv.data(), kv.data(), vv.data());
        for h in 0..heads {
            let off = h * dh;
            let p = &mut probs[h * t * t..(h + 1) * t * t];
            for i in 0..t {
                let qi = &qd[i * d + off..i * d + off + dh];
                let row = &mut p[i * t..(i + 1) * t];
                let mut max = f64::NEG_INFINITY;
                for (j, s) in row.iter_mut().enumerate() {
                    let kj = &kd[j * d + off..j * d + off + dh];
                    *s = scale * qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>();
                    max = max.max(*s);
                }
                let mut z = 0.0;
                for s in row.iter_mut() {
                    *s = (*s - max).exp();
                    z += *s;
                }
                for s in row.iter_mut() {
                    *s /= z;
                }
                let oi = &mut out[i * d + off..i * d + off + dh];
                for (j, &pij) in row.iter().enumerate() {
                    let vj = &vd[j * d + off..j * d + off + dh];
                    for (o, x) in oi.iter_mut().zip(vj) {
                        *o += pij * x;
                    }
                }
            }
        }
        let rg = self.rg(&[q, k, v]);
        self.push(
            Tensor::from_parts(vec![t, d], out),
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            },
            rg,
        )
    }

    /// Rows where `mask` is true are replaced by `fill` (a length-`cols` vector).
    pub fn mask_rows(&mut self, x: Var, fill: Var, mask: &[bool]) -> Var {
        let xv = self.value(x);
        let fv = self.value(fill);
        let c = xv.cols();
        assert_eq!(mask.len(), xv.rows(), "mask length");
        assert_eq!(fv.len(), c, "fill width");
        let mut out = xv.data().to_vec();
        for (r, _) in mask.iter().enumerate().filter(|(_, m)| **m) {
            out[r * c..(r + 1) * c].copy_from_slice(fv.data());
        }
        let t = Tensor::from_parts(xv.shape().to_vec(), out);
        let rg = self.rg(&[x, fill]);
        self.push(
            t,
            Op::MaskRows {
                x,
                fill,
                mask: mask.to_vec(),
            },
            rg,
        )
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let s = xv.sum() / xv.len() as f64;
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Mean(x), rg)
    }

    /// Mean squared error between `pred` and a constant `target`, restricted
    /// to rows where `mask` is true.
    pub fn masked_mse(&mut self, pred: Var, target: Tensor, mask: &[bool]) -> Var {
        let pv = self.value(pred);
        assert_eq!(pv.shape(), target.shape(), "masked_mse shapes");
        assert_eq!(mask.len(), pv.rows(), "mask length");
        let c = pv.cols();
        let n = mask.iter().filter(|m| **m).count();
        assert!(n > 0, "masked_mse needs at least one masked row");
        let mut acc = 0.0;
        for (r, _) in mask.iter().enumerate().filter(|(_, m)| **m) {
            for (a, b) in pv.row(r).iter().zip(target.row(r)) {
                acc += (a - b) * (a - b);
            }
        }
        let loss = acc / (n * c) as f64;
        let rg = self.rg(&[pred]);
        self.push(
            Tensor::scalar(loss),
            Op::MaskedMse {
                pred,
                target,
                mask: mask.to_vec(),
            },
            rg,
        )
    }

    /// Scalar computed off-tape, with `grad` = d(value)/d(input).
    pub fn external(&mut self, input: Var, value: f64, grad: Tensor) -> Var {
        assert_eq!(self.value(input).shape(), grad.shape(), "external grad shape");
        let rg = self.rg(&[input]);
        self.push(Tensor::scalar(value), Op::External { input, grad }, rg)
    }

    /// First node whose value contained NaN or infinity, if any.
    pub fn check_finite(&self) -> Result<()> {
        match self.first_non_finite {
            Some((node, op)) => Err(Error::NonFinite { op, node }),
            None => Ok(()),
        }
    }

    /// Reverse pass; returns adjoints for every node (None where unused).
    fn adjoints(&self, loss: Var) -> Result<Vec<Option<Tensor>>> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        self.check_finite()?;
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::from_parts(lv.shape().to_vec(), vec![1.0]));
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(dy) = grads[id].take() else { continue };
            self.backprop_node(node, &dy, &mut grads);
            grads[id] = Some(dy);
        }
        Ok(grads)
    }

    /// Gradient of `loss` w.r.t. parameters.
    ///
    /// Every trainable parameter of the store gets an entry (zero when not
    /// reachable); in all-gradients mode every parameter does.
    pub fn backward(&self, loss: Var) -> Result<GradMap> {
        let mut grads = self.adjoints(loss)?;
        let mut out = GradMap::new();
        for node in &self.nodes {
            if let Op::Param(name) = &node.op {
                if node.requires_grad {
                    let id = self.param_vars[name].0;
                    let g = grads[id]
                        .take()
                        .unwrap_or_else(|| Tensor::zeros(node.value.shape()));
                    out.insert(name.clone(), g);
                }
            }
        }
        if let Some(store) = self.params {
            for (name, p) in store.iter() {
                let wanted = match self.mode {
                    GradMode::Trainable => p.trainable,
                    GradMode::All => true,
                    GradMode::Off => false,
                };
                if wanted && !out.contains_key(name) {
                    out.insert(name.to_string(), Tensor::zeros(p.value.shape()));
                }
            }
        }
        Ok(out)
    }

    /// Gradient of `loss` w.r.t. arbitrary nodes (zero when unreachable).
    pub fn backward_vars(&self, loss: Var, vars: &[Var]) -> Result<Vec<Tensor>> {
        let mut grads = self.adjoints(loss)?;
        Ok(vars
            .iter()
            .map(|v| {
                grads[v.0]
                    .take()
                    .unwrap_or_else(|| Tensor::zeros(self.value(*v).shape()))
            })
            .collect())
    }

    fn backprop_node(&self, node: &Node, dy: &Tensor, grads: &mut [Option<Tensor>]) {
        let y = &node.value;
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                if self.requires_grad(*a) {
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, dy.data(), false, bv.data(), true, &mut da, 0.0);
                    self.accum(grads, *a, da);
                }
                if self.requires_grad(*b) {
                    let mut db = vec![0.0; k * n];
                    gemm(k, m, n, av.data(), true, dy.data(), false, &mut db, 0.0);
                    self.accum(grads, *b, db);
                }
            }
            Op::Add(a, b) => {
                self.accum(grads, *a, dy.data().to_vec());
                self.accum(grads, *b, dy.data().to_vec());
            }
            Op::Sub(a, b) => {
                self.accum(grads, *a, dy.data().to_vec());
                self.accum(grads, *b, dy.data().iter().map(|g| -g).collect());
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.requires_grad(*a) {
                    let da = dy.data().iter().zip(bv.data()).map(|(g, x)| g * x).collect();
                    self.accum(grads, *a, da);
                }
                if self.requires_grad(*b) {
                    let db = dy.data().iter().zip(av.data()).map(|(g, x)| g * x).collect();
                    self.accum(grads, *b, db);
                }
            }
            Op::AddRow(a, b) => {
                self.accum(grads, *a, dy.data().to_vec());
                if self.requires_grad(*b) {
                    let c = dy.cols();
                    let mut db = vec![0.0; c];
                    for row in dy.data().chunks(c) {
                        for (d, g) in db.iter_mut().zip(row) {
                            *d += g;
                        }
                    }
                    self.accum(grads, *b, db);
                }
            }
            Op::MulRow(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let c = av.cols();
                if self.requires_grad(*a) {
                    let da = dy
                        .data()
                        .chunks(c)
                        .flat_map(|r| r.iter().zip(bv.data()).map(|(g, w)| g * w))
                        .collect();
                    self.accum(grads, *a, da);
                }
                if self.requires_grad(*b) {
                    let mut db = vec![0.0; c];
                    for (grow, xrow) in dy.data().chunks(c).zip(av.data().chunks(c)) {
                        for ((d, g), x) in db.iter_mut().zip(grow).zip(xrow) {
                            *d += g * x;
                        }
                    }
                    self.accum(grads, *b, db);
                }
            }
            Op::Scale(a, c) => {
                self.accum(grads, *a, dy.data().iter().map(|g| g * c).collect());
            }
            Op::Transpose(a) => {
                self.accum(grads, *a, dy.transpose().into_data());
            }
            Op::Square(a) => {
                let av = self.value(*a);
                let da = dy.data().iter().zip(av.data()).map(|(g, x)| 2.0 * g * x).collect();
                self.accum(grads, *a, da);
            }
            Op::Relu(a) => {
                let av = self.value(*a);
                let da = dy
                    .data()
                    .iter()
                    .zip(av.data())
                    .map(|(g, x)| if *x > 0.0 { *g } else { 0.0 })
                    .collect();
                self.accum(grads, *a, da);
            }
            Op::Gelu(a) => {
                let av = self.value(*a);
                let da = dy
                    .data()
                    .iter()
                    .zip(av.data())
                    .map(|(g, &x)| {
                        let u = GELU_C * (x + 0.044715 * x * x * x);
                        let th = u.tanh();
                        let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
                        g * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du)
                    })
                    .collect();
                self.accum(grads, *a, da);
            }
            Op::LayerNorm { x, inv_std } => {
                let c = y.cols();
                let mut dx = Vec::with_capacity(y.len());
                for ((grow, yrow), inv) in dy.data().chunks(c).zip(y.data().chunks(c)).zip(inv_std) {
                    let mean_g = grow.iter().sum::<f64>() / c as f64;
                    let mean_gy = grow.iter().zip(yrow).map(|(g, v)| g * v).sum::<f64>() / c as f64;
                    dx.extend(
                        grow.iter()
                            .zip(yrow)
                            .map(|(g, v)| inv * (g - mean_g - v * mean_gy)),
                    );
                }
                self.accum(grads, *x, dx);
            }
            Op::LogSoftmax(x) => {
                let c = y.cols();
                let mut dx = Vec::with_capacity(y.len());
                for (grow, yrow) in dy.data().chunks(c).zip(y.data().chunks(c)) {
                    let s: f64 = grow.iter().sum();
                    dx.extend(grow.iter().zip(yrow).map(|(g, l)| g - l.exp() * s));
                }
                self.accum(grads, *x, dx);
            }
            Op::Softmax(x) => {
                let c = y.cols();
                let mut dx = Vec::with_capacity(y.len());
                for (grow, prow) in dy.data().chunks(c).zip(y.data().chunks(c)) {
                    let dot: f64 = grow.iter().zip(prow).map(|(g, p)| g * p).sum();
                    dx.extend(grow.iter().zip(prow).map(|(g, p)| p * (g - dot)));
                }
                self.accum(grads, *x, dx);
            }
            Op::WeightedSum { layers, weights } => {
                let wv = self.value(*weights).data();
                for (&l, &w) in layers.iter().zip(wv) {
                    if self.requires_grad(l) {
                        self.accum(grads, l, dy.data().iter().map(|g| g * w).collect());
                    }
                }
                if self.requires_grad(*weights) {
                    let dw = layers
                        .iter()
                        .map(|&l| {
                            self.value(l)
                                .data()
                                .iter()
                                .zip(dy.data())
                                .map(|(x, g)| x * g)
                                .sum()
                        })
                        .collect();
                    self.accum(grads, *weights, dw);
                }
            }
            Op::Unfold { x, kernel, stride } => {
                let xv = self.value(*x);
                let (t_in, c) = (xv.rows(), xv.cols());
                let mut dx = vec![0.0; t_in * c];
                for t in 0..y.rows() {
                    for j in 0..*kernel {
                        let src = t * stride + j;
                        if src < t_in {
                            let off = t * kernel * c + j * c;
                            for (d, g) in dx[src * c..(src + 1) * c]
                                .iter_mut()
                                .zip(&dy.data()[off..off + c])
                            {
                                *d += g;
                            }
                        }
                    }
                }
                self.accum(grads, *x, dx);
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            } => self.backprop_attention(*q, *k, *v, *heads, probs, dy, grads),
            Op::MaskRows { x, fill, mask } => {
                let c = y.cols();
                if self.requires_grad(*x) {
                    let mut dx = dy.data().to_vec();
                    for (r, _) in mask.iter().enumerate().filter(|(_, m)| **m) {
                        dx[r * c..(r + 1) * c].fill(0.0);
                    }
                    self.accum(grads, *x, dx);
                }
                if self.requires_grad(*fill) {
                    let mut df = vec![0.0; c];
                    for (r, _) in mask.iter().enumerate().filter(|(_, m)| **m) {
                        for (d, g) in df.iter_mut().zip(dy.row(r)) {
                            *d += g;
                        }
                    }
                    self.accum(grads, *fill, df);
                }
            }
            Op::Sum(x) => {
                let g = dy.item();
                let n = self.value(*x).len();
                self.accum(grads, *x, vec![g; n]);
            }
            Op::Mean(x) => {
                let n = self.value(*x).len();
                let g = dy.item() / n as f64;
                self.accum(grads, *x, vec![g; n]);
            }
            Op::MaskedMse { pred, target, mask } => {
                let pv = self.value(*pred);
                let c = pv.cols();
                let n = mask.iter().filter(|m| **m).count();
                let k = 2.0 * dy.item() / (n * c) as f64;
                let mut dp = vec![0.0; pv.len()];
                for (r, _) in mask.iter().enumerate().filter(|(_, m)| **m) {
                    for ((d, a), b) in dp[r * c..(r + 1) * c]
                        .iter_mut()
                        .zip(pv.row(r))
                        .zip(target.row(r))
                    {
                        *d = k * (a - b);
                    }
                }
                self.accum(grads, *pred, dp);
            }
            Op::External { input, grad } => {
                let g = dy.item();
                self.accum(grads, *input, grad.data().iter().map(|x| x * g).collect());
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn backprop_attention(
        &self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: &[f64],
        dy: &Tensor,
        grads: &mut [Option<Tensor>],
    ) {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (t, d) = (qv.rows(), qv.cols());
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd, gd) = (qv.data(), kv.data(), vv.data(), dy.data());
        let mut dq = vec![0.0; t * d];
        let mut dk = vec![0.0; t * d];
        let mut dv = vec![0.0; t * d];
        let mut ds = vec![0.0; t];
        for h in 0..heads {
            let off = h * dh;
            let p = &probs[h * t * t..(h + 1) * t * t];
            for i in 0..t {
                let gi = &gd[i * d + off..i * d + off + dh];
                let prow = &p[i * t..(i + 1) * t];
                // dP_ij = <dO_i, V_j>; dS = P * (dP - <dP, P>)
                let mut dot = 0.0;
                for (j, s) in ds.iter_mut().enumerate() {
                    let vj = &vd[j * d + off..j * d + off + dh];
                    *s = gi.iter().zip(vj).map(|(a, b)| a * b).sum();
                    dot += *s * prow[j];
                }
                for (j, s) in ds.iter_mut().enumerate() {
                    *s = prow[j] * (*s - dot) * scale;
                }
                for j in 0..t {
                    let pij = prow[j];
                    let sij = ds[j];
                    for c in 0..dh {
                        dv[j * d + off + c] += pij * gi[c];
                        dq[i * d + off + c] += sij * kd[j * d + off + c];
                        dk[j * d + off + c] += sij * qd[i * d + off + c];
                    }
                }
            }
        }
        self.accum(grads, q, dq);
        self.accum(grads, k, dk);
        self.accum(grads, v, dv);
    }

    fn accum(&self, grads: &mut [Option<Tensor>], v: Var, g: Vec<f64>) {
        if !self.requires_grad(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(t) => {
                for (a, b) in t.data_mut().iter_mut().zip(&g) {
                    *a += b;
                }
            }
            slot @ None => {
                *slot = Some(Tensor::from_parts(self.value(v).shape().to_vec(), g));
            }
        }
    }
}
