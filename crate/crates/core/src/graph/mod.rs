//! Tape-based reverse-mode automatic differentiation.
//!
//! Every operation appends a [`Node`] to the tape; node ids only ever refer to
//! earlier nodes, so a single reverse sweep visits each node exactly once.
//! [`Graph::backward`] consumes the tape and hands back a [`Gradients`] table.

mod conv;
mod elementwise;
mod linalg;
mod loss;
pub(crate) mod nn;

use std::collections::HashMap;

use crate::error::{dim_err, param_err, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{numel, strides, Real, Tensor};

pub use loss::LossKind;
pub use nn::Activation;

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
pub(crate) enum Op<F> {
    Leaf,
    Add { a: Var, b: Var, bmap: Option<Vec<usize>> },
    Sub { a: Var, b: Var, bmap: Option<Vec<usize>> },
    Mul { a: Var, b: Var, bmap: Option<Vec<usize>> },
    Scale { a: Var, c: F },
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    Transpose { a: Var },
    Reshape { a: Var },
    Concat { parts: Vec<Var>, axis: usize },
    Narrow { a: Var, axis: usize, start: usize },
    GatherRows { a: Var, rows: Vec<usize> },
    Conv3d { x: Var, k: Var, pad: [usize; 3] },
    MaxPool { x: Var, argmax: Vec<usize> },
    Mean { a: Var, map: Vec<usize>, count: usize },
    Sum { a: Var },
    Gelu { a: Var },
    Sigmoid { a: Var },
    Softmax { a: Var },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<F>, inv_std: Vec<F> },
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<F> },
    Bce { p: Var, t: Var },
    Mse { a: Var, b: Var },
    KlDiv { p: Var, q: Var },
}

#[derive(Debug)]
pub(crate) struct Node<F> {
    pub shape: Vec<usize>,
    pub value: Vec<F>,
    pub op: Op<F>,
    pub requires_grad: bool,
}

/// Computation tape. Single-threaded; build one per forward pass.
#[derive(Debug, Default)]
pub struct Graph<F: Real = f32> {
    nodes: Vec<Node<F>>,
    params: HashMap<ParamId, Var>,
}

impl<F: Real> Graph<F> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            params: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub(crate) fn push(&mut self, shape: Vec<usize>, value: Vec<F>, op: Op<F>) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        let requires_grad = match &op {
            Op::Leaf => false,
            op => inputs(op).iter().any(|v| self.nodes[v.0].requires_grad),
        };
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn leaf(&mut self, t: Tensor<F>, track: bool) -> Var {
        let shape = t.shape().to_vec();
        let v = self.push(shape, t.into_data(), Op::Leaf);
        self.nodes[v.0].requires_grad = track;
        v
    }

    /// Untracked input.
    pub fn constant(&mut self, t: Tensor<F>) -> Var {
        self.leaf(t, false)
    }

    /// Tracked leaf: its gradient is available after [`Graph::backward`].
    pub fn variable(&mut self, t: Tensor<F>) -> Var {
        self.leaf(t, true)
    }

    /// Binds a stored parameter as a tracked leaf. Repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore<F>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let t = store.get(id).clone();
        let v = self.leaf(t, true);
        self.params.insert(id, v);
        v
    }

    /// Copy of `v` with no gradient path back.
    pub fn detach(&mut self, v: Var) -> Var {
        let n = &self.nodes[v.0];
        let (shape, value) = (n.shape.clone(), n.value.clone());
        self.push(shape, value, Op::Leaf)
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[F] {
        &self.nodes[v.0].value
    }

    pub fn tensor(&self, v: Var) -> Tensor<F> {
        let n = &self.nodes[v.0];
        Tensor::new(&n.shape, n.value.clone()).expect("node shape is consistent")
    }

    pub fn scalar(&self, v: Var) -> F {
        self.nodes[v.0].value[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Reverse sweep from a scalar root. Consumes the tape.
    pub fn backward(self, root: Var) -> Result<Gradients<F>> {
        if numel(&self.nodes[root.0].shape) != 1 {
            return Err(param_err!(
                "backward needs a scalar root, got shape {:?}",
                self.nodes[root.0].shape
            ));
        }
        let Graph { mut nodes, params } = self;
        let mut bufs: Vec<Option<Vec<F>>> = (0..nodes.len()).map(|_| None).collect();
        if nodes[root.0].requires_grad {
            bufs[root.0] = Some(vec![F::one()]);
        }
        for i in (0..=root.0).rev() {
            let Some(g) = bufs[i].take() else { continue };
            if matches!(nodes[i].op, Op::Leaf) {
                bufs[i] = Some(g);
                continue;
            }
            backward_node(&nodes, i, &g, &mut bufs);
            // consumers of node i all sit later on the tape and are done
            nodes[i].value = Vec::new();
        }
        let shapes = nodes.into_iter().map(|n| n.shape).collect();
        Ok(Gradients {
            bufs,
            shapes,
            params,
        })
    }
}

/// Leaf gradients produced by one backward sweep.
#[derive(Debug)]
pub struct Gradients<F> {
    bufs: Vec<Option<Vec<F>>>,
    shapes: Vec<Vec<usize>>,
    params: HashMap<ParamId, Var>,
}

impl<F: Real> Gradients<F> {
    /// Gradient of a tracked leaf; zeros if the root does not depend on it.
    pub fn get(&self, v: Var) -> Tensor<F> {
        let shape = &self.shapes[v.0];
        match &self.bufs[v.0] {
            Some(g) => Tensor::new(shape, g.clone()).expect("gradient shape"),
            None => Tensor::zeros(shape),
        }
    }

    /// Adds parameter gradients into the store's gradient buffers.
    pub fn accumulate_into(&self, store: &mut ParamStore<F>) -> Result<()> {
        let mut bound: Vec<_> = self.params.iter().collect();
        bound.sort();
        for (&id, &v) in bound {
            if let Some(g) = &self.bufs[v.0] {
                store.get_mut(id).accumulate_grad(g)?;
            }
        }
        Ok(())
    }
}

fn inputs<F>(op: &Op<F>) -> Vec<Var> {
    match op {
        Op::Leaf => vec![],
        Op::Add { a, b, .. } | Op::Sub { a, b, .. } | Op::Mul { a, b, .. } => vec![*a, *b],
        Op::MatMul { a, b, .. } | Op::Mse { a, b } => vec![*a, *b],
        Op::Scale { a, .. }
        | Op::Transpose { a }
        | Op::Reshape { a }
        | Op::Narrow { a, .. }
        | Op::GatherRows { a, .. }
        | Op::Mean { a, .. }
        | Op::Sum { a }
        | Op::Gelu { a }
        | Op::Sigmoid { a }
        | Op::Softmax { a } => vec![*a],
        Op::Concat { parts, .. } => parts.clone(),
        Op::Conv3d { x, k, .. } => vec![*x, *k],
        Op::MaxPool { x, .. } => vec![*x],
        Op::LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
        Op::CrossEntropy { logits, .. } => vec![*logits],
        Op::Bce { p, t } => vec![*p, *t],
        Op::KlDiv { p, q } => vec![*p, *q],
    }
}

/// Mutable gradient buffer for `v`, or `None` when `v` needs no gradient.
pub(crate) fn grad_buf<'b, F: Real>(
    nodes: &[Node<F>],
    bufs: &'b mut [Option<Vec<F>>],
    v: Var,
) -> Option<&'b mut Vec<F>> {
    if !nodes[v.0].requires_grad {
        return None;
    }
    let n = nodes[v.0].value.len();
    Some(bufs[v.0].get_or_insert_with(|| vec![F::zero(); n]))
}

fn backward_node<F: Real>(nodes: &[Node<F>], i: usize, g: &[F], bufs: &mut [Option<Vec<F>>]) {
    let node = &nodes[i];
    match &node.op {
        Op::Leaf => {}
        Op::Add { a, b, bmap } => elementwise::add_backward(nodes, *a, *b, bmap, g, F::one(), bufs),
        Op::Sub { a, b, bmap } => {
            elementwise::add_backward(nodes, *a, *b, bmap, g, -F::one(), bufs)
        }
        Op::Mul { a, b, bmap } => elementwise::mul_backward(nodes, *a, *b, bmap, g, bufs),
        Op::Scale { a, c } => {
            if let Some(ga) = grad_buf(nodes, bufs, *a) {
                for (d, s) in ga.iter_mut().zip(g) {
                    *d = *d + *s * *c;
                }
            }
        }
        Op::MatMul { a, b, m, k, n } => linalg::matmul_backward(nodes, *a, *b, (*m, *k, *n), g, bufs),
        Op::Transpose { a } => linalg::transpose_backward(nodes, *a, g, bufs),
        Op::Reshape { a } => {
            if let Some(ga) = grad_buf(nodes, bufs, *a) {
                add_into(ga, g);
            }
        }
        Op::Concat { parts, axis } => linalg::concat_backward(nodes, parts, *axis, &node.shape, g, bufs),
        Op::Narrow { a, axis, start } => {
            linalg::narrow_backward(nodes, *a, *axis, *start, &node.shape, g, bufs)
        }
        Op::GatherRows { a, rows } => linalg::gather_backward(nodes, *a, rows, g, bufs),
        Op::Conv3d { x, k, pad } => conv::conv3d_backward(nodes, *x, *k, *pad, &node.shape, g, bufs),
        Op::MaxPool { x, argmax } => {
            if let Some(gx) = grad_buf(nodes, bufs, *x) {
                for (&src, &gv) in argmax.iter().zip(g) {
                    gx[src] = gx[src] + gv;
                }
            }
        }
        Op::Mean { a, map, count } => {
            if let Some(ga) = grad_buf(nodes, bufs, *a) {
                let inv = F::one() / F::from_usize(*count).unwrap();
                for (d, &o) in ga.iter_mut().zip(map) {
                    *d = *d + g[o] * inv;
                }
            }
        }
        Op::Sum { a } => {
            if let Some(ga) = grad_buf(nodes, bufs, *a) {
                ga.iter_mut().for_each(|d| *d = *d + g[0]);
            }
        }
        Op::Gelu { a } => nn::gelu_backward(nodes, *a, g, bufs),
        Op::Sigmoid { a } => nn::sigmoid_backward(nodes, *a, &node.value, g, bufs),
        Op::Softmax { a } => nn::softmax_backward(nodes, *a, &node.value, &node.shape, g, bufs),
        Op::LayerNorm {
            x,
            gain,
            bias,
            xhat,
            inv_std,
        } => nn::layer_norm_backward(nodes, (*x, *gain, *bias), xhat, inv_std, g, bufs),
        Op::CrossEntropy {
            logits,
            targets,
            probs,
        } => loss::cross_entropy_backward(nodes, *logits, targets, probs, g[0], bufs),
        Op::Bce { p, t } => loss::bce_backward(nodes, *p, *t, g[0], bufs),
        Op::Mse { a, b } => loss::mse_backward(nodes, *a, *b, g[0], bufs),
        Op::KlDiv { p, q } => loss::kl_backward(nodes, *p, *q, g[0], bufs),
    }
}

pub(crate) fn add_into<F: Real>(dst: &mut [F], src: &[F]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d = *d + *s;
    }
}

/// For every flat index of `big`, the flat index of `small` it reads from when
/// `small` is expanded over its singleton dimensions.
pub(crate) fn broadcast_map(big: &[usize], small: &[usize]) -> Result<Vec<usize>> {
    if small.len() > big.len() {
        return Err(dim_err!("cannot broadcast {:?} to {:?}", small, big));
    }
    let mut padded = vec![1; big.len() - small.len()];
    padded.extend_from_slice(small);
    for (b, s) in big.iter().zip(&padded) {
        if s != b && *s != 1 {
            return Err(dim_err!("cannot broadcast {:?} to {:?}", small, big));
        }
    }
    let sstr = strides(&padded);
    let eff: Vec<usize> = padded
        .iter()
        .zip(&sstr)
        .map(|(&d, &s)| if d == 1 { 0 } else { s })
        .collect();
    let n = numel(big);
    let mut out = Vec::with_capacity(n);
    let mut idx = vec![0usize; big.len()];
    let mut off = 0usize;
    for _ in 0..n {
        out.push(off);
        for ax in (0..big.len()).rev() {
            idx[ax] += 1;
            off += eff[ax];
            if idx[ax] < big[ax] {
                break;
            }
            off -= eff[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    Ok(out)
}
