//! Dense `f64` tensors and a define-by-run tape with reverse-mode gradients.
//!
//! Every primitive appends a node holding its forward value. Parameters are
//! borrowed from an external slice so building a tape per sentence does not
//! copy the model. [`Tape::backward`] walks the nodes in reverse insertion
//! order, which is a reverse topological order because inputs always precede
//! their consumers; fan-out contributions are summed in that fixed order.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Row-major array with up to three axes. Scalars have an empty shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.len() > 3 || shape.iter().product::<usize>() != data.len() {
            return Err(Error::Shape {
                op: "Tensor::new",
                left: shape,
                right: vec![data.len()],
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.shape[1] + col]
    }

    pub fn row(&self, row: usize) -> &[f64] {
        let c = self.shape[1];
        &self.data[row * c..(row + 1) * c]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn squared_norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum()
    }

    pub fn fill(&mut self, value: f64) {
        self.data.iter_mut().for_each(|x| *x = value);
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&mut self, factor: f64) {
        self.data.iter_mut().for_each(|x| *x *= factor);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Param(usize),
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Tanh(NodeId),
    Sigmoid(NodeId),
    Softmax(NodeId),
    Concat(Vec<NodeId>),
    Lookup(NodeId, usize),
    Sum(NodeId, Option<usize>),
    SoftmaxXent(NodeId, usize),
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Option<Tensor>,
}

/// Records primitive applications for one forward pass.
#[derive(Debug)]
pub struct Tape<'p> {
    params: &'p [Tensor],
    param_nodes: Vec<Option<NodeId>>,
    nodes: Vec<Node>,
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Shape {
        op,
        left: a.shape.clone(),
        right: b.shape.clone(),
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Softmax with max-subtraction.
pub fn softmax_vec(x: &[f64]) -> Vec<f64> {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = x.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    out.iter_mut().for_each(|v| *v /= sum);
    out
}

pub fn log_softmax_vec(x: &[f64]) -> Vec<f64> {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + x.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    x.iter().map(|v| v - lse).collect()
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p [Tensor]) -> Self {
        Tape {
            params,
            param_nodes: vec![None; params.len()],
            nodes: Vec::new(),
        }
    }

    /// A tape without parameters.
    pub fn detached() -> Tape<'static> {
        Tape::new(&[])
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        let node = &self.nodes[id.0];
        match node.op {
            Op::Param(i) => &self.params[i],
            _ => node.value.as_ref().expect("computed node has a value"),
        }
    }

    fn push(&mut self, op: Op, value: Tensor) -> NodeId {
        self.nodes.push(Node { op, value: Some(value) });
        NodeId(self.nodes.len() - 1)
    }

    /// Leaf holding `value`; its gradient can be read back after [`Tape::backward`].
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, value)
    }

    /// Leaf for parameter `index`; repeated calls return the same node.
    pub fn param(&mut self, index: usize) -> NodeId {
        if let Some(id) = self.param_nodes[index] {
            return id;
        }
        self.nodes.push(Node {
            op: Op::Param(index),
            value: None,
        });
        let id = NodeId(self.nodes.len() - 1);
        self.param_nodes[index] = Some(id);
        id
    }

    /// Matrix and vector products: `[r,k]·[k]`, `[k]·[k,c]`, `[r,k]·[k,c]`, `[k]·[k]`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        let out = match (av.shape.as_slice(), bv.shape.as_slice()) {
            (&[r, k], &[k2]) if k == k2 => {
                let mut out = vec![0.0; r];
                for (i, o) in out.iter_mut().enumerate() {
                    let row = &av.data[i * k..(i + 1) * k];
                    *o = dot(row, &bv.data);
                }
                Tensor::vector(out)
            }
            (&[k], &[k2, c]) if k == k2 => {
                let mut out = vec![0.0; c];
                for (kk, &x) in av.data.iter().enumerate() {
                    let row = &bv.data[kk * c..(kk + 1) * c];
                    for (o, &w) in out.iter_mut().zip(row) {
                        *o += x * w;
                    }
                }
                Tensor::vector(out)
            }
            (&[r, k], &[k2, c]) if k == k2 => {
                let mut out = vec![0.0; r * c];
                for i in 0..r {
                    let o = &mut out[i * c..(i + 1) * c];
                    for kk in 0..k {
                        let x = av.data[i * k + kk];
                        let row = &bv.data[kk * c..(kk + 1) * c];
                        for (oj, &w) in o.iter_mut().zip(row) {
                            *oj += x * w;
                        }
                    }
                }
                Tensor {
                    shape: vec![r, c],
                    data: out,
                }
            }
            (&[k], &[k2]) if k == k2 => Tensor::scalar(dot(&av.data, &bv.data)),
            _ => return Err(shape_err("matmul", av, bv)),
        };
        Ok(self.push(Op::MatMul(a, b), out))
    }

    /// Elementwise sum; a vector right operand broadcasts over matrix rows.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        let out = if av.shape == bv.shape {
            Tensor {
                shape: av.shape.clone(),
                data: av.data.iter().zip(&bv.data).map(|(x, y)| x + y).collect(),
            }
        } else if av.shape.len() == 2 && bv.shape.len() == 1 && av.shape[1] == bv.shape[0] {
            let c = bv.data.len();
            Tensor {
                shape: av.shape.clone(),
                data: av.data.iter().enumerate().map(|(i, x)| x + bv.data[i % c]).collect(),
            }
        } else {
            return Err(shape_err("add", av, bv));
        };
        Ok(self.push(Op::Add(a, b), out))
    }

    /// Elementwise product of equally shaped tensors.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape != bv.shape {
            return Err(shape_err("mul", av, bv));
        }
        let out = Tensor {
            shape: av.shape.clone(),
            data: av.data.iter().zip(&bv.data).map(|(x, y)| x * y).collect(),
        };
        Ok(self.push(Op::Mul(a, b), out))
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let av = self.value(a);
        let out = Tensor {
            shape: av.shape.clone(),
            data: av.data.iter().map(|x| x.tanh()).collect(),
        };
        self.push(Op::Tanh(a), out)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let av = self.value(a);
        let out = Tensor {
            shape: av.shape.clone(),
            data: av.data.iter().map(|&x| sigmoid(x)).collect(),
        };
        self.push(Op::Sigmoid(a), out)
    }

    /// Softmax of a vector.
    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId> {
        let av = self.value(a);
        if av.shape.len() != 1 || av.data.is_empty() {
            return Err(Error::Shape {
                op: "softmax",
                left: av.shape.clone(),
                right: vec![],
            });
        }
        let out = Tensor::vector(softmax_vec(&av.data));
        Ok(self.push(Op::Softmax(a), out))
    }

    /// Concatenates vectors end to end.
    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let mut data = Vec::new();
        for &p in parts {
            let v = self.value(p);
            if v.shape.len() != 1 {
                return Err(Error::Shape {
                    op: "concat",
                    left: v.shape.clone(),
                    right: vec![],
                });
            }
            data.extend_from_slice(&v.data);
        }
        Ok(self.push(Op::Concat(parts.to_vec()), Tensor::vector(data)))
    }

    /// Concatenates equally long vectors as the rows of a matrix.
    pub fn stack(&mut self, rows: &[NodeId]) -> Result<NodeId> {
        let Some(&first) = rows.first() else {
            return Err(Error::Contract("stack of zero rows".into()));
        };
        let width = self.value(first).len();
        let mut data = Vec::with_capacity(width * rows.len());
        for &p in rows {
            let v = self.value(p);
            if v.shape != [width] {
                return Err(shape_err("stack", self.value(first), v));
            }
            data.extend_from_slice(&v.data);
        }
        let out = Tensor {
            shape: vec![rows.len(), width],
            data,
        };
        Ok(self.push(Op::Concat(rows.to_vec()), out))
    }

    /// Row `index` of a matrix.
    pub fn lookup(&mut self, matrix: NodeId, index: usize) -> Result<NodeId> {
        let m = self.value(matrix);
        if m.shape.len() != 2 {
            return Err(Error::Shape {
                op: "lookup",
                left: m.shape.clone(),
                right: vec![],
            });
        }
        if index >= m.shape[0] {
            return Err(Error::Lookup {
                what: "embedding row".into(),
                id: index,
                size: m.shape[0],
            });
        }
        let out = Tensor::vector(m.row(index).to_vec());
        Ok(self.push(Op::Lookup(matrix, index), out))
    }

    /// Sum over all elements (`None`) or over one axis.
    pub fn sum(&mut self, a: NodeId, axis: Option<usize>) -> Result<NodeId> {
        let av = self.value(a);
        let out = match (axis, av.shape.as_slice()) {
            (None, _) | (Some(0), [_]) => Tensor::scalar(av.data.iter().sum()),
            (Some(0), &[r, c]) => {
                let mut out = vec![0.0; c];
                for i in 0..r {
                    for (o, x) in out.iter_mut().zip(&av.data[i * c..(i + 1) * c]) {
                        *o += x;
                    }
                }
                Tensor::vector(out)
            }
            (Some(1), &[_, c]) => Tensor::vector(av.data.chunks(c).map(|r| r.iter().sum()).collect()),
            _ => {
                return Err(Error::Shape {
                    op: "sum",
                    left: av.shape.clone(),
                    right: vec![axis.unwrap_or(0)],
                })
            }
        };
        Ok(self.push(Op::Sum(a, axis), out))
    }

    /// Fused `-ln softmax(logits)[target]`.
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, target: usize) -> Result<NodeId> {
        let lv = self.value(logits);
        if lv.shape.len() != 1 || target >= lv.len() {
            return Err(Error::Lookup {
                what: "cross-entropy target".into(),
                id: target,
                size: lv.len(),
            });
        }
        let max = lv.data.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + lv.data.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        let out = Tensor::scalar(lse - lv.data[target]);
        Ok(self.push(Op::SoftmaxXent(logits, target), out))
    }

    /// Reverse pass from a scalar node. Parameter gradients go to a fresh
    /// buffer shaped like the parameter slice.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let mut params: Vec<Tensor> = self.params.iter().map(|p| Tensor::zeros(&p.shape)).collect();
        let nodes = self.backward_into(loss, &mut params)?;
        Ok(Gradients { nodes, params })
    }

    /// Reverse pass that adds parameter gradients into `param_grads`. Returns
    /// the gradients of the non-parameter leaves.
    pub fn backward_into(&self, loss: NodeId, param_grads: &mut [Tensor]) -> Result<Vec<Option<Vec<f64>>>> {
        let lv = self.value(loss);
        if lv.len() != 1 || !lv.shape.is_empty() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            match &node.op {
                Op::Leaf => {
                    grads[id] = Some(g);
                }
                Op::Param(i) => {
                    for (p, x) in param_grads[*i].data.iter_mut().zip(&g) {
                        *p += x;
                    }
                }
                Op::MatMul(a, b) => self.matmul_backward(*a, *b, &g, &mut grads),
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, &g);
                    let bl = self.value(*b).len();
                    if bl == g.len() {
                        accumulate(&mut grads, *b, &g);
                    } else {
                        let mut gb = vec![0.0; bl];
                        for (i, x) in g.iter().enumerate() {
                            gb[i % bl] += x;
                        }
                        accumulate(&mut grads, *b, &gb);
                    }
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let ga: Vec<f64> = g.iter().zip(&bv.data).map(|(x, y)| x * y).collect();
                    let gb: Vec<f64> = g.iter().zip(&av.data).map(|(x, y)| x * y).collect();
                    accumulate(&mut grads, *a, &ga);
                    accumulate(&mut grads, *b, &gb);
                }
                Op::Tanh(a) => {
                    let out = node.value.as_ref().unwrap();
                    let ga: Vec<f64> = g.iter().zip(&out.data).map(|(x, y)| x * (1.0 - y * y)).collect();
                    accumulate(&mut grads, *a, &ga);
                }
                Op::Sigmoid(a) => {
                    let out = node.value.as_ref().unwrap();
                    let ga: Vec<f64> = g.iter().zip(&out.data).map(|(x, y)| x * y * (1.0 - y)).collect();
                    accumulate(&mut grads, *a, &ga);
                }
                Op::Softmax(a) => {
                    let p = &node.value.as_ref().unwrap().data;
                    let inner: f64 = g.iter().zip(p).map(|(x, y)| x * y).sum();
                    let ga: Vec<f64> = g.iter().zip(p).map(|(x, y)| y * (x - inner)).collect();
                    accumulate(&mut grads, *a, &ga);
                }
                Op::Concat(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let n = self.value(*p).len();
                        accumulate(&mut grads, *p, &g[offset..offset + n]);
                        offset += n;
                    }
                }
                Op::Lookup(m, index) => {
                    let mv = self.value(*m);
                    let c = mv.shape[1];
                    accumulate_row(&mut grads, *m, mv.len(), index * c, &g);
                }
                Op::Sum(a, axis) => {
                    let av = self.value(*a);
                    let ga: Vec<f64> = match (axis, av.shape.as_slice()) {
                        (Some(0), &[_, c]) => (0..av.len()).map(|i| g[i % c]).collect(),
                        (Some(1), &[_, c]) => (0..av.len()).map(|i| g[i / c]).collect(),
                        _ => vec![g[0]; av.len()],
                    };
                    accumulate(&mut grads, *a, &ga);
                }
                Op::SoftmaxXent(logits, target) => {
                    let mut p = softmax_vec(&self.value(*logits).data);
                    p[*target] -= 1.0;
                    p.iter_mut().for_each(|x| *x *= g[0]);
                    accumulate(&mut grads, *logits, &p);
                }
            }
        }
        Ok(grads)
    }

    fn matmul_backward(&self, a: NodeId, b: NodeId, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let (av, bv) = (self.value(a), self.value(b));
        match (av.shape.as_slice(), bv.shape.as_slice()) {
            (&[r, k], &[_]) => {
                let ga = grad_buf(grads, a, r * k);
                for (i, &gi) in g.iter().enumerate() {
                    for (o, &x) in ga[i * k..(i + 1) * k].iter_mut().zip(&bv.data) {
                        *o += gi * x;
                    }
                }
                let gb = grad_buf(grads, b, k);
                for (i, &gi) in g.iter().enumerate() {
                    for (o, &w) in gb.iter_mut().zip(&av.data[i * k..(i + 1) * k]) {
                        *o += w * gi;
                    }
                }
            }
            (&[k], &[_, c]) => {
                let ga = grad_buf(grads, a, k);
                for (kk, o) in ga.iter_mut().enumerate() {
                    *o += dot(&bv.data[kk * c..(kk + 1) * c], g);
                }
                let gb = grad_buf(grads, b, k * c);
                for (kk, &x) in av.data.iter().enumerate() {
                    for (o, &gj) in gb[kk * c..(kk + 1) * c].iter_mut().zip(g) {
                        *o += x * gj;
                    }
                }
            }
            (&[r, k], &[_, c]) => {
                // dA = G·Bᵀ, dB = Aᵀ·G
                let ga = grad_buf(grads, a, r * k);
                for i in 0..r {
                    let gi = &g[i * c..(i + 1) * c];
                    for kk in 0..k {
                        ga[i * k + kk] += dot(&bv.data[kk * c..(kk + 1) * c], gi);
                    }
                }
                let gb = grad_buf(grads, b, k * c);
                for i in 0..r {
                    let gi = &g[i * c..(i + 1) * c];
                    for kk in 0..k {
                        let x = av.data[i * k + kk];
                        for (o, &gj) in gb[kk * c..(kk + 1) * c].iter_mut().zip(gi) {
                            *o += x * gj;
                        }
                    }
                }
            }
            _ => {
                let ga: Vec<f64> = bv.data.iter().map(|x| x * g[0]).collect();
                let gb: Vec<f64> = av.data.iter().map(|x| x * g[0]).collect();
                accumulate(grads, a, &ga);
                accumulate(grads, b, &gb);
            }
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn grad_buf(grads: &mut [Option<Vec<f64>>], id: NodeId, len: usize) -> &mut Vec<f64> {
    grads[id.0].get_or_insert_with(|| vec![0.0; len])
}

fn accumulate(grads: &mut [Option<Vec<f64>>], id: NodeId, g: &[f64]) {
    match &mut grads[id.0] {
        Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
        slot @ None => *slot = Some(g.to_vec()),
    }
}

/// Adds `g` into a window of a (possibly not yet allocated) gradient.
fn accumulate_row(grads: &mut [Option<Vec<f64>>], id: NodeId, len: usize, offset: usize, g: &[f64]) {
    let acc = grads[id.0].get_or_insert_with(|| vec![0.0; len]);
    acc[offset..offset + g.len()]
        .iter_mut()
        .zip(g)
        .for_each(|(a, b)| *a += b);
}

/// Result of [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    nodes: Vec<Option<Vec<f64>>>,
    params: Vec<Tensor>,
}

impl Gradients {
    /// Gradient with respect to a leaf; zero when the leaf does not reach the loss.
    pub fn wrt(&self, tape: &Tape<'_>, leaf: NodeId) -> Tensor {
        let shape = tape.value(leaf).shape.clone();
        match self.nodes.get(leaf.0).and_then(Option::as_ref) {
            Some(g) => Tensor { shape, data: g.clone() },
            None => Tensor::zeros(&shape),
        }
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn into_params(self) -> Vec<Tensor> {
        self.params
    }
}

pub fn flatten(tensors: &[Tensor]) -> Vec<f64> {
    tensors.iter().flat_map(|t| t.data.iter().copied()).collect()
}

/// Writes a flat vector back into tensors of the existing shapes.
pub fn unflatten_into(tensors: &mut [Tensor], flat: &[f64]) {
    let mut offset = 0;
    for t in tensors {
        let n = t.data.len();
        t.data.copy_from_slice(&flat[offset..offset + n]);
        offset += n;
    }
}

/// Outcome of a finite-difference comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub max_relative_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

pub const MIN_GRAD_CHECK_SAMPLE: usize = 200;

/// Compares `gradient(point)` with central differences of `loss` at `point`.
///
/// `sample` is `Some((count, seed))` to probe a random subset of at least
/// [`MIN_GRAD_CHECK_SAMPLE`] coordinates; `None` probes every coordinate.
/// Relative error is `|a - b| / max(|a|, |b|, 1e-8)`.
pub fn grad_check<L, G>(
    mut loss: L,
    gradient: G,
    point: &[f64],
    epsilon: f64,
    sample: Option<(usize, u64)>,
) -> Result<GradCheck>
where
    L: FnMut(&[f64]) -> Result<f64>,
    G: FnOnce(&[f64]) -> Result<Vec<f64>>,
{
    if !(epsilon > 0.0 && epsilon <= 1e-2) {
        return Err(Error::Contract(format!("epsilon {epsilon} outside (0, 1e-2]")));
    }
    let analytic = gradient(point)?;
    if analytic.len() != point.len() {
        return Err(Error::Shape {
            op: "grad_check",
            left: vec![point.len()],
            right: vec![analytic.len()],
        });
    }
    let coords: Vec<usize> = match sample {
        Some((count, seed)) if count.max(MIN_GRAD_CHECK_SAMPLE) < point.len() => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut idx = sample_indices(&mut rng, point.len(), count.max(MIN_GRAD_CHECK_SAMPLE));
            idx.sort_unstable();
            idx
        }
        _ => (0..point.len()).collect(),
    };
    let mut x = point.to_vec();
    let mut report = GradCheck {
        max_relative_error: 0.0,
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        checked: coords.len(),
    };
    for &i in &coords {
        let orig = x[i];
        x[i] = orig + epsilon;
        let plus = loss(&x)?;
        x[i] = orig - epsilon;
        let minus = loss(&x)?;
        x[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite(format!("loss probe at coordinate {i}")));
        }
        let numeric = (plus - minus) / (2.0 * epsilon);
        let a = analytic[i];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
        if rel > report.max_relative_error || report.checked == 0 {
            report.max_relative_error = rel;
            report.worst_index = i;
            report.analytic = a;
            report.numeric = numeric;
        }
    }
    Ok(report)
}

fn sample_indices(rng: &mut ChaCha8Rng, n: usize, k: usize) -> Vec<usize> {
    sample(rng, n, k).into_vec()
}
