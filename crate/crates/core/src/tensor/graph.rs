use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Contiguous groups described by offsets: group `g` spans
/// `offsets[g]..offsets[g + 1]`. Used by the grouped softmax (over flat
/// elements) and by the segment sum (over rows).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Segments {
    offsets: Arc<[usize]>,
}

impl Segments {
    pub fn from_offsets(offsets: Vec<usize>) -> Result<Self> {
        if offsets.first() != Some(&0) || offsets.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Invalid(
                "segment offsets must start at 0 and strictly increase".into(),
            ));
        }
        Ok(Self {
            offsets: offsets.into(),
        })
    }

    /// A single group spanning `n` elements.
    pub fn single(n: usize) -> Self {
        Self {
            offsets: vec![0, n].into(),
        }
    }

    /// `groups` consecutive groups of `width` elements each.
    pub fn uniform(groups: usize, width: usize) -> Self {
        Self {
            offsets: (0..=groups).map(|g| g * width).collect::<Vec<_>>().into(),
        }
    }

    pub fn count(&self) -> usize {
        self.offsets.len() - 1
    }

    /// Total number of covered elements.
    pub fn total(&self) -> usize {
        *self.offsets.last().unwrap()
    }

    pub fn range(&self, g: usize) -> std::ops::Range<usize> {
        self.offsets[g]..self.offsets[g + 1]
    }

    pub fn offsets(&self) -> &[usize] {
        &self.offsets
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf {
        name: String,
        trainable: bool,
    },
    Const(Tensor),
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Add(NodeId, NodeId),
    /// `[n, k] + [1, k]`, the row broadcast used for biases.
    AddRow(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Affine {
        x: NodeId,
        scale: f64,
        shift: f64,
    },
    /// Multiply by a `[1, 1]` node.
    ScaleBy(NodeId, NodeId),
    /// `[n, k] * [n, 1]`, each row scaled by its own coefficient.
    ScaleRows(NodeId, NodeId),
    Tanh(NodeId),
    Sigmoid(NodeId),
    Relu(NodeId),
    Exp(NodeId),
    Log(NodeId),
    Pow {
        x: NodeId,
        exponent: f64,
    },
    Softmax {
        x: NodeId,
        groups: Segments,
    },
    LogSoftmax {
        x: NodeId,
        groups: Segments,
    },
    LayerNorm {
        x: NodeId,
        scale: Option<NodeId>,
        shift: Option<NodeId>,
        eps: f64,
    },
    Sum(NodeId),
    Mean(NodeId),
    SumCols(NodeId),
    SegmentSum {
        x: NodeId,
        rows: Segments,
    },
    Concat(Vec<NodeId>),
    Gather {
        x: NodeId,
        rows: Arc<[usize]>,
    },
}

impl Op {
    fn kind(&self) -> &'static str {
        match self {
            Op::Leaf { .. } => "leaf",
            Op::Const(_) => "const",
            Op::MatMul(..) => "matmul",
            Op::Transpose(_) => "transpose",
            Op::Add(..) => "add",
            Op::AddRow(..) => "add_row",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Affine { .. } => "affine",
            Op::ScaleBy(..) => "scale_by",
            Op::ScaleRows(..) => "scale_rows",
            Op::Tanh(_) => "tanh",
            Op::Sigmoid(_) => "sigmoid",
            Op::Relu(_) => "relu",
            Op::Exp(_) => "exp",
            Op::Log(_) => "log",
            Op::Pow { .. } => "pow",
            Op::Softmax { .. } => "softmax",
            Op::LogSoftmax { .. } => "log_softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::SumCols(_) => "sum_cols",
            Op::SegmentSum { .. } => "segment_sum",
            Op::Concat(_) => "concat",
            Op::Gather { .. } => "gather",
        }
    }

    fn inputs(&self) -> Vec<NodeId> {
        match self {
            Op::Leaf { .. } | Op::Const(_) => vec![],
            Op::MatMul(a, b)
            | Op::Add(a, b)
            | Op::AddRow(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::ScaleBy(a, b)
            | Op::ScaleRows(a, b) => vec![*a, *b],
            Op::Transpose(x)
            | Op::Tanh(x)
            | Op::Sigmoid(x)
            | Op::Relu(x)
            | Op::Exp(x)
            | Op::Log(x)
            | Op::Sum(x)
            | Op::Mean(x)
            | Op::SumCols(x)
            | Op::Affine { x, .. }
            | Op::Pow { x, .. }
            | Op::Softmax { x, .. }
            | Op::LogSoftmax { x, .. }
            | Op::SegmentSum { x, .. }
            | Op::Gather { x, .. } => vec![*x],
            Op::LayerNorm { x, scale, shift, .. } => {
                let mut v = vec![*x];
                v.extend(scale.iter().chain(shift.iter()).copied());
                v
            }
            Op::Concat(xs) => xs.clone(),
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    requires_grad: bool,
    value: Option<Tensor>,
}

/// A computation graph recorded in topological (insertion) order.
///
/// Build the graph with the op methods, bind leaves by name in
/// [`Graph::forward`], then call [`Graph::backward`] on a scalar node.
/// Leaves created with [`Graph::param`] are the parameter registry and are
/// the only ones that receive gradients.
#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    outputs: Vec<(String, NodeId)>,
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

    fn push(&mut self, op: Op) -> NodeId {
        let requires_grad = match &op {
            Op::Leaf { trainable, .. } => *trainable,
            Op::Const(_) => false,
            other => other.inputs().iter().any(|id| {
                assert!(id.0 < self.nodes.len(), "node {} is not in this graph", id.0);
                self.nodes[id.0].requires_grad
            }),
        };
        self.nodes.push(Node {
            op,
            requires_grad,
            value: None,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// A frozen input bound by name at forward time.
    pub fn input(&mut self, name: &str) -> NodeId {
        self.push(Op::Leaf {
            name: name.to_string(),
            trainable: false,
        })
    }

    /// A trainable leaf: bound by name like an input, but registered for
    /// gradients.
    pub fn param(&mut self, name: &str) -> NodeId {
        self.push(Op::Leaf {
            name: name.to_string(),
            trainable: true,
        })
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Const(value))
    }

    pub fn output(&mut self, name: &str, node: NodeId) {
        self.outputs.push((name.to_string(), node));
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Transpose(x))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Add(a, b))
    }

    pub fn add_row(&mut self, x: NodeId, bias: NodeId) -> NodeId {
        self.push(Op::AddRow(x, bias))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Mul(a, b))
    }

    /// `scale * x + shift` with constant coefficients.
    pub fn affine(&mut self, x: NodeId, scale: f64, shift: f64) -> NodeId {
        self.push(Op::Affine { x, scale, shift })
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        self.affine(x, c, 0.0)
    }

    pub fn scale_by(&mut self, x: NodeId, s: NodeId) -> NodeId {
        self.push(Op::ScaleBy(x, s))
    }

    pub fn scale_rows(&mut self, x: NodeId, coeffs: NodeId) -> NodeId {
        self.push(Op::ScaleRows(x, coeffs))
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Tanh(x))
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Sigmoid(x))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Relu(x))
    }

    pub fn exp(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Exp(x))
    }

    pub fn log(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Log(x))
    }

    /// `x^exponent` elementwise; `x` must be nonnegative.
    pub fn pow(&mut self, x: NodeId, exponent: f64) -> NodeId {
        self.push(Op::Pow { x, exponent })
    }

    pub fn softmax(&mut self, x: NodeId, groups: Segments) -> NodeId {
        self.push(Op::Softmax { x, groups })
    }

    pub fn log_softmax(&mut self, x: NodeId, groups: Segments) -> NodeId {
        self.push(Op::LogSoftmax { x, groups })
    }

    /// Row-wise normalization over the feature axis with optional affine
    /// `[1, k]` scale and shift.
    pub fn layer_norm(&mut self, x: NodeId, scale: Option<NodeId>, shift: Option<NodeId>, eps: f64) -> NodeId {
        self.push(Op::LayerNorm { x, scale, shift, eps })
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Sum(x))
    }

    pub fn mean(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Mean(x))
    }

    /// `[n, k] -> [n, 1]`.
    pub fn sum_cols(&mut self, x: NodeId) -> NodeId {
        self.push(Op::SumCols(x))
    }

    /// Sum consecutive row groups: `[E, k] -> [groups, k]`.
    pub fn segment_sum(&mut self, x: NodeId, rows: Segments) -> NodeId {
        self.push(Op::SegmentSum { x, rows })
    }

    /// Stack along rows.
    pub fn concat(&mut self, xs: &[NodeId]) -> NodeId {
        self.push(Op::Concat(xs.to_vec()))
    }

    pub fn gather(&mut self, x: NodeId, rows: Arc<[usize]>) -> NodeId {
        self.push(Op::Gather { x, rows })
    }

    pub fn value(&self, node: NodeId) -> Option<&Tensor> {
        self.nodes[node.0].value.as_ref()
    }

    /// Names of all trainable leaves, in insertion order.
    pub fn param_names(&self) -> Vec<&str> {
        self.nodes
            .iter()
            .filter_map(|n| match &n.op {
                Op::Leaf { name, trainable: true } => Some(name.as_str()),
                _ => None,
            })
            .collect()
    }

    /// Evaluate every node. Leaves are looked up in `inputs` by name.
    pub fn forward(&mut self, inputs: &HashMap<String, Tensor>) -> Result<BTreeMap<String, Tensor>> {
        for i in 0..self.nodes.len() {
            let out = self.eval_node(i, inputs)?;
            if let Some(index) = out.first_non_finite() {
                return Err(Error::NonFinite {
                    node: i,
                    op: self.nodes[i].op.kind(),
                    index,
                });
            }
            self.nodes[i].value = Some(out);
        }
        Ok(self
            .outputs
            .iter()
            .map(|(name, id)| (name.clone(), self.nodes[id.0].value.clone().unwrap()))
            .collect())
    }

    fn val(&self, id: NodeId) -> &Tensor {
        self.nodes[id.0]
            .value
            .as_ref()
            .expect("inputs are evaluated before their consumers")
    }

    fn eval_node(&self, i: usize, inputs: &HashMap<String, Tensor>) -> Result<Tensor> {
        let op = &self.nodes[i].op;
        let kind = op.kind();
        let shape_err = |detail: String| Error::Shape {
            node: i,
            op: kind,
            detail,
        };
        let rank2 = |t: &Tensor| -> Result<(usize, usize)> {
            if t.shape.len() != 2 {
                return Err(shape_err(format!("rank-2 input expected, got {:?}", t.shape)));
            }
            Ok((t.shape[0], t.shape[1]))
        };

        Ok(match op {
            Op::Leaf { name, .. } => inputs
                .get(name)
                .cloned()
                .ok_or_else(|| Error::UnboundInput(name.clone()))?,
            Op::Const(t) => t.clone(),
            Op::MatMul(a, b) => {
                let (a, b) = (self.val(*a), self.val(*b));
                let (n, k) = rank2(a)?;
                let (k2, m) = rank2(b)?;
                if k != k2 {
                    return Err(shape_err(format!("{:?} x {:?}", a.shape, b.shape)));
                }
                Tensor {
                    shape: vec![n, m],
                    data: matmul(&a.data, &b.data, n, k, m),
                }
            }
            Op::Transpose(x) => {
                let x = self.val(*x);
                let (r, c) = rank2(x)?;
                Tensor {
                    shape: vec![c, r],
                    data: transpose(&x.data, r, c),
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => {
                let (a, b) = (self.val(*a), self.val(*b));
                if a.shape != b.shape {
                    return Err(shape_err(format!("{:?} vs {:?}", a.shape, b.shape)));
                }
                let f: fn(f64, f64) -> f64 = match op {
                    Op::Add(..) => |x, y| x + y,
                    Op::Sub(..) => |x, y| x - y,
                    _ => |x, y| x * y,
                };
                Tensor {
                    shape: a.shape.clone(),
                    data: a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect(),
                }
            }
            Op::AddRow(x, bias) => {
                let (x, bias) = (self.val(*x), self.val(*bias));
                let (_, k) = rank2(x)?;
                if bias.shape != [1, k] {
                    return Err(shape_err(format!("{:?} + row {:?}", x.shape, bias.shape)));
                }
                let mut data = x.data.clone();
                for row in data.chunks_mut(k) {
                    for (v, b) in row.iter_mut().zip(&bias.data) {
                        *v += b;
                    }
                }
                Tensor {
                    shape: x.shape.clone(),
                    data,
                }
            }
            Op::Affine { x, scale, shift } => {
                let x = self.val(*x);
                map(x, |v| scale * v + shift)
            }
            Op::ScaleBy(x, s) => {
                let (x, s) = (self.val(*x), self.val(*s));
                if !s.is_scalar() {
                    return Err(shape_err(format!("scale must be [1, 1], got {:?}", s.shape)));
                }
                let s = s.data[0];
                map(x, |v| s * v)
            }
            Op::ScaleRows(x, c) => {
                let (x, c) = (self.val(*x), self.val(*c));
                let (n, k) = rank2(x)?;
                if c.shape != [n, 1] {
                    return Err(shape_err(format!("{:?} scaled by {:?}", x.shape, c.shape)));
                }
                let mut data = x.data.clone();
                for (row, &ci) in data.chunks_mut(k.max(1)).zip(&c.data) {
                    row.iter_mut().for_each(|v| *v *= ci);
                }
                Tensor {
                    shape: x.shape.clone(),
                    data,
                }
            }
            Op::Tanh(x) => map(self.val(*x), f64::tanh),
            Op::Sigmoid(x) => map(self.val(*x), sigmoid),
            Op::Relu(x) => map(self.val(*x), |v| v.max(0.0)),
            Op::Exp(x) => map(self.val(*x), f64::exp),
            Op::Log(x) => map(self.val(*x), f64::ln),
            Op::Pow { x, exponent } => {
                let e = *exponent;
                map(self.val(*x), |v| v.powf(e))
            }
            Op::Softmax { x, groups } | Op::LogSoftmax { x, groups } => {
                let x = self.val(*x);
                if groups.total() != x.len() {
                    return Err(shape_err(format!(
                        "groups cover {} elements, input has {}",
                        groups.total(),
                        x.len()
                    )));
                }
                let mut data = x.data.clone();
                let log = matches!(op, Op::LogSoftmax { .. });
                for g in 0..groups.count() {
                    let seg = &mut data[groups.range(g)];
                    if log {
                        log_softmax_in_place(seg);
                    } else {
                        softmax_in_place(seg);
                    }
                }
                Tensor {
                    shape: x.shape.clone(),
                    data,
                }
            }
            Op::LayerNorm { x, scale, shift, eps } => {
                let xv = self.val(*x);
                let (_, k) = rank2(xv)?;
                let scale = scale.map(|s| self.val(s));
                let shift = shift.map(|s| self.val(s));
                for p in scale.iter().chain(shift.iter()) {
                    if p.shape != [1, k] {
                        return Err(shape_err(format!(
                            "affine parameter {:?} for feature width {k}",
                            p.shape
                        )));
                    }
                }
                let mut data = xv.data.clone();
                for row in data.chunks_mut(k) {
                    let (mean, inv) = row_moments(row, *eps);
                    for (j, v) in row.iter_mut().enumerate() {
                        let mut y = (*v - mean) * inv;
                        if let Some(s) = scale {
                            y *= s.data[j];
                        }
                        if let Some(b) = shift {
                            y += b.data[j];
                        }
                        *v = y;
                    }
                }
                Tensor {
                    shape: xv.shape.clone(),
                    data,
                }
            }
            Op::Sum(x) => Tensor::scalar(self.val(*x).data.iter().sum()),
            Op::Mean(x) => {
                let x = self.val(*x);
                if x.is_empty() {
                    return Err(shape_err("mean of an empty tensor".into()));
                }
                Tensor::scalar(x.data.iter().sum::<f64>() / x.len() as f64)
            }
            Op::SumCols(x) => {
                let x = self.val(*x);
                let (n, k) = rank2(x)?;
                Tensor {
                    shape: vec![n, 1],
                    data: x.data.chunks(k.max(1)).map(|r| r.iter().sum()).collect(),
                }
            }
            Op::SegmentSum { x, rows } => {
                let x = self.val(*x);
                let (n, k) = rank2(x)?;
                if rows.total() != n {
                    return Err(shape_err(format!(
                        "segments cover {} rows, input has {n}",
                        rows.total()
                    )));
                }
                let mut data = vec![0.0; rows.count() * k];
                for g in 0..rows.count() {
                    let out = &mut data[g * k..(g + 1) * k];
                    for r in rows.range(g) {
                        for (o, v) in out.iter_mut().zip(&x.data[r * k..(r + 1) * k]) {
                            *o += v;
                        }
                    }
                }
                Tensor {
                    shape: vec![rows.count(), k],
                    data,
                }
            }
            Op::Concat(xs) => {
                if xs.is_empty() {
                    return Err(shape_err("nothing to concatenate".into()));
                }
                let (_, k) = rank2(self.val(xs[0]))?;
                let mut rows = 0;
                let mut data = Vec::new();
                for id in xs {
                    let t = self.val(*id);
                    let (n, k2) = rank2(t)?;
                    if k2 != k {
                        return Err(shape_err(format!("width {k2} vs {k}")));
                    }
                    rows += n;
                    data.extend_from_slice(&t.data);
                }
                Tensor {
                    shape: vec![rows, k],
                    data,
                }
            }
            Op::Gather { x, rows } => {
                let x = self.val(*x);
                let (n, k) = rank2(x)?;
                if let Some(bad) = rows.iter().find(|&&r| r >= n) {
                    return Err(shape_err(format!("row {bad} out of range for {n} rows")));
                }
                let mut data = Vec::with_capacity(rows.len() * k);
                for &r in rows.iter() {
                    data.extend_from_slice(&x.data[r * k..(r + 1) * k]);
                }
                Tensor {
                    shape: vec![rows.len(), k],
                    data,
                }
            }
        })
    }

    /// Reverse pass from a scalar node. Returns one gradient per trainable
    /// leaf (zeros when the loss does not depend on it).
    pub fn backward(&self, loss: NodeId) -> Result<BTreeMap<String, Tensor>> {
        let loss_val = self.nodes[loss.0].value.as_ref().ok_or(Error::NotEvaluated)?;
        if !loss_val.is_scalar() {
            return Err(Error::NonScalarLoss {
                node: loss.0,
                shape: loss_val.shape.clone(),
            });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::full(&loss_val.shape, 1.0));

        for i in (0..=loss.0).rev() {
            let Some(dy) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf { .. } = node.op {
                grads[i] = Some(dy);
                continue;
            }
            for (input, g) in self.local_grads(i, &dy) {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => acc.data.iter_mut().zip(&g.data).for_each(|(a, b)| *a += b),
                    slot => *slot = Some(g),
                }
            }
        }

        let mut out = BTreeMap::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if let Op::Leaf { name, trainable: true } = &node.op {
                let g = match grads.get_mut(i).and_then(Option::take) {
                    Some(g) => g,
                    None => {
                        let shape = node.value.as_ref().ok_or(Error::NotEvaluated)?.shape.clone();
                        Tensor::zeros(&shape)
                    }
                };
                match out.get_mut(name) {
                    // The same parameter bound at several leaves.
                    Some(acc) => {
                        let acc: &mut Tensor = acc;
                        acc.data.iter_mut().zip(&g.data).for_each(|(a, b)| *a += b);
                    }
                    None => {
                        out.insert(name.clone(), g);
                    }
                }
            }
        }
        Ok(out)
    }

    /// Vector-Jacobian products of node `i` for each of its inputs.
    fn local_grads(&self, i: usize, dy: &Tensor) -> Vec<(NodeId, Tensor)> {
        let y = self.nodes[i].value.as_ref().unwrap();
        let needs = |id: &NodeId| self.nodes[id.0].requires_grad;
        let like = |t: &Tensor, data: Vec<f64>| Tensor {
            shape: t.shape.clone(),
            data,
        };
        match &self.nodes[i].op {
            Op::Leaf { .. } | Op::Const(_) => vec![],
            Op::MatMul(a, b) => {
                let (av, bv) = (self.val(*a), self.val(*b));
                let (n, k) = (av.shape[0], av.shape[1]);
                let m = bv.shape[1];
                let mut out = Vec::new();
                if needs(a) {
                    out.push((*a, like(av, matmul_nt(&dy.data, &bv.data, n, m, k))));
                }
                if needs(b) {
                    out.push((*b, like(bv, matmul_tn(&av.data, &dy.data, n, k, m))));
                }
                out
            }
            Op::Transpose(x) => {
                let (r, c) = (y.shape[0], y.shape[1]);
                vec![(*x, like(self.val(*x), transpose(&dy.data, r, c)))]
            }
            Op::Add(a, b) => vec![(*a, dy.clone()), (*b, dy.clone())],
            Op::Sub(a, b) => vec![(*a, dy.clone()), (*b, map(dy, |v| -v))],
            Op::Mul(a, b) => {
                let (av, bv) = (self.val(*a), self.val(*b));
                vec![(*a, zip_map(dy, bv, |g, v| g * v)), (*b, zip_map(dy, av, |g, v| g * v))]
            }
            Op::AddRow(x, bias) => {
                let k = y.shape[1];
                let mut db = vec![0.0; k];
                for row in dy.data.chunks(k) {
                    db.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                }
                vec![(*x, dy.clone()), (*bias, Tensor::row(&db))]
            }
            Op::Affine { x, scale, .. } => vec![(*x, map(dy, |g| g * scale))],
            Op::ScaleBy(x, s) => {
                let xv = self.val(*x);
                let sv = self.val(*s).data[0];
                let ds: f64 = dy.data.iter().zip(&xv.data).map(|(g, v)| g * v).sum();
                vec![(*x, map(dy, |g| g * sv)), (*s, Tensor::scalar(ds))]
            }
            Op::ScaleRows(x, c) => {
                let (xv, cv) = (self.val(*x), self.val(*c));
                let k = xv.shape[1].max(1);
                let mut dx = dy.data.clone();
                let mut dc = vec![0.0; cv.len()];
                for (r, (drow, xrow)) in dx.chunks_mut(k).zip(xv.data.chunks(k)).enumerate() {
                    let ci = cv.data[r];
                    dc[r] = drow.iter().zip(xrow).map(|(g, v)| g * v).sum();
                    drow.iter_mut().for_each(|g| *g *= ci);
                }
                vec![(*x, like(xv, dx)), (*c, like(cv, dc))]
            }
            Op::Tanh(x) => vec![(*x, zip_map(dy, y, |g, t| g * (1.0 - t * t)))],
            Op::Sigmoid(x) => vec![(*x, zip_map(dy, y, |g, s| g * s * (1.0 - s)))],
            Op::Relu(x) => {
                let xv = self.val(*x);
                vec![(*x, zip_map(dy, xv, |g, v| if v > 0.0 { g } else { 0.0 }))]
            }
            Op::Exp(x) => vec![(*x, zip_map(dy, y, |g, e| g * e))],
            Op::Log(x) => vec![(*x, zip_map(dy, self.val(*x), |g, v| g / v))],
            Op::Pow { x, exponent } => {
                let e = *exponent;
                let d = move |v: f64| {
                    if v == 0.0 {
                        match e {
                            0.0 => 0.0,
                            1.0 => 1.0,
                            e if e > 1.0 => 0.0,
                            _ => f64::INFINITY,
                        }
                    } else {
                        e * v.powf(e - 1.0)
                    }
                };
                vec![(*x, zip_map(dy, self.val(*x), |g, v| g * d(v)))]
            }
            Op::Softmax { x, groups } => {
                let mut dx = vec![0.0; y.len()];
                for g in 0..groups.count() {
                    let r = groups.range(g);
                    let dot: f64 = dy.data[r.clone()]
                        .iter()
                        .zip(&y.data[r.clone()])
                        .map(|(a, b)| a * b)
                        .sum();
                    for j in r {
                        dx[j] = y.data[j] * (dy.data[j] - dot);
                    }
                }
                vec![(*x, like(y, dx))]
            }
            Op::LogSoftmax { x, groups } => {
                let mut dx = vec![0.0; y.len()];
                for g in 0..groups.count() {
                    let r = groups.range(g);
                    let total: f64 = dy.data[r.clone()].iter().sum();
                    for j in r {
                        dx[j] = dy.data[j] - y.data[j].exp() * total;
                    }
                }
                vec![(*x, like(y, dx))]
            }
            Op::LayerNorm { x, scale, shift, eps } => {
                let xv = self.val(*x);
                let k = xv.shape[1];
                let sv = scale.map(|s| self.val(s));
                let mut dx = vec![0.0; xv.len()];
                let mut dscale = vec![0.0; k];
                let mut dshift = vec![0.0; k];
                let mut xhat = vec![0.0; k];
                let mut dxhat = vec![0.0; k];
                for r in 0..xv.shape[0] {
                    let row = &xv.data[r * k..(r + 1) * k];
                    let grow = &dy.data[r * k..(r + 1) * k];
                    let (mean, inv) = row_moments(row, *eps);
                    for j in 0..k {
                        xhat[j] = (row[j] - mean) * inv;
                        dxhat[j] = grow[j] * sv.map_or(1.0, |s| s.data[j]);
                        dscale[j] += grow[j] * xhat[j];
                        dshift[j] += grow[j];
                    }
                    let sum_d: f64 = dxhat.iter().sum();
                    let sum_dx: f64 = dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum();
                    let kf = k as f64;
                    for j in 0..k {
                        dx[r * k + j] = inv / kf * (kf * dxhat[j] - sum_d - xhat[j] * sum_dx);
                    }
                }
                let mut out = vec![(*x, like(xv, dx))];
                if let Some(s) = scale {
                    out.push((*s, Tensor::row(&dscale)));
                }
                if let Some(b) = shift {
                    out.push((*b, Tensor::row(&dshift)));
                }
                out
            }
            Op::Sum(x) => {
                let xv = self.val(*x);
                vec![(*x, Tensor::full(&xv.shape, dy.data[0]))]
            }
            Op::Mean(x) => {
                let xv = self.val(*x);
                vec![(*x, Tensor::full(&xv.shape, dy.data[0] / xv.len() as f64))]
            }
            Op::SumCols(x) => {
                let xv = self.val(*x);
                let k = xv.shape[1].max(1);
                let data = dy.data.iter().flat_map(|&g| std::iter::repeat_n(g, k)).collect();
                vec![(*x, like(xv, data))]
            }
            Op::SegmentSum { x, rows } => {
                let xv = self.val(*x);
                let k = xv.shape[1];
                let mut dx = vec![0.0; xv.len()];
                for g in 0..rows.count() {
                    let src = &dy.data[g * k..(g + 1) * k];
                    for r in rows.range(g) {
                        dx[r * k..(r + 1) * k].copy_from_slice(src);
                    }
                }
                vec![(*x, like(xv, dx))]
            }
            Op::Concat(xs) => {
                let mut offset = 0;
                xs.iter()
                    .map(|id| {
                        let t = self.val(*id);
                        let g = like(t, dy.data[offset..offset + t.len()].to_vec());
                        offset += t.len();
                        (*id, g)
                    })
                    .collect()
            }
            Op::Gather { x, rows } => {
                let xv = self.val(*x);
                let k = xv.shape[1];
                let mut dx = vec![0.0; xv.len()];
                for (e, &r) in rows.iter().enumerate() {
                    for j in 0..k {
                        dx[r * k + j] += dy.data[e * k + j];
                    }
                }
                vec![(*x, like(xv, dx))]
            }
        }
    }
}

fn map(t: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor {
        shape: t.shape.clone(),
        data: t.data.iter().map(|&v| f(v)).collect(),
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    Tensor {
        shape: a.shape.clone(),
        data: a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect(),
    }
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Max-subtracted softmax over a slice.
pub(crate) fn softmax_in_place(xs: &mut [f64]) {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in xs.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    xs.iter_mut().for_each(|v| *v /= total);
}

pub(crate) fn log_softmax_in_place(xs: &mut [f64]) {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = xs.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
    xs.iter_mut().for_each(|v| *v -= lse);
}

/// Row mean and `1 / sqrt(var + eps)` with the biased variance.
pub(crate) fn row_moments(row: &[f64], eps: f64) -> (f64, f64) {
    let k = row.len() as f64;
    let mean = row.iter().sum::<f64>() / k;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / k;
    (mean, 1.0 / (var + eps).sqrt())
}

/// `[n, k] x [k, m]`.
fn matmul(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let orow = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            for (o, bv) in orow.iter_mut().zip(&b[p * m..(p + 1) * m]) {
                *o += aip * bv;
            }
        }
    }
    out
}

/// `[n, m] x [k, m]^T -> [n, k]`.
fn matmul_nt(a: &[f64], b: &[f64], n: usize, m: usize, k: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * k];
    for i in 0..n {
        let arow = &a[i * m..(i + 1) * m];
        for j in 0..k {
            out[i * k + j] = arow.iter().zip(&b[j * m..(j + 1) * m]).map(|(x, y)| x * y).sum();
        }
    }
    out
}

/// `[n, k]^T x [n, m] -> [k, m]`.
fn matmul_tn(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * m];
    for i in 0..n {
        let brow = &b[i * m..(i + 1) * m];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            for (o, bv) in out[p * m..(p + 1) * m].iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
    out
}

fn transpose(x: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = x[i * c + j];
        }
    }
    out
}
