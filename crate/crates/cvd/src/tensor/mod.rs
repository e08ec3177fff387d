//! Dense f64 tensors with tape-based reverse-mode differentiation.
//!
//! A [`Graph`] owns an append-only arena of nodes; a [`Tensor`] is a
//! handle (graph + node id). Forward values are stored in the arena, so
//! topological order equals insertion order and backward is a single
//! reverse sweep. Stochastic draws (projection directions, derangements)
//! come from the graph's seeded rng and are stored as constant leaves,
//! which makes gradient checks replayable by reseeding.

mod conv;
pub mod check;

use std::cell::RefCell;
use std::rc::Rc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{CvdError, Result};

pub type NodeId = usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnKind {
    Neg,
    Exp,
    Log,
    Sqrt,
    Square,
    Relu,
    Sigmoid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Unary {
        kind: UnKind,
        x: NodeId,
    },
    Binary {
        kind: BinKind,
        a: NodeId,
        b: NodeId,
    },
    AddScalar {
        x: NodeId,
    },
    MulScalar {
        x: NodeId,
        c: f64,
    },
    Matmul {
        a: NodeId,
        b: NodeId,
        m: usize,
        k: usize,
        n: usize,
    },
    Conv2d {
        x: NodeId,
        kernel: NodeId,
        stride: usize,
        pad: usize,
    },
    AddChannelBias {
        x: NodeId,
        bias: NodeId,
    },
    Upsample2x {
        x: NodeId,
    },
    ConcatAxis1 {
        parts: Vec<NodeId>,
        outer: usize,
        widths: Vec<usize>,
        inner: usize,
    },
    SortLast {
        x: NodeId,
        n: usize,
        perm: Vec<u32>,
    },
    Reshape {
        x: NodeId,
    },
    SumAll {
        x: NodeId,
    },
    MeanSpatial {
        x: NodeId,
    },
    L2NormRows {
        x: NodeId,
    },
    PermuteRows {
        x: NodeId,
        perm: Vec<u32>,
    },
    Transpose2 {
        x: NodeId,
        rows: usize,
        cols: usize,
    },
    LogsumexpRows {
        x: NodeId,
        cols: usize,
    },
    Diag {
        x: NodeId,
        n: usize,
    },
}

struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    op: Op,
}

struct GraphInner {
    nodes: Vec<Node>,
    rng: ChaCha8Rng,
    watermark: usize,
}

/// Computation tape plus its seeded rng. Single-threaded per graph.
pub struct Graph {
    inner: RefCell<GraphInner>,
    seed: u64,
}

impl Graph {
    pub fn new(seed: u64) -> Rc<Graph> {
        Rc::new(Graph {
            inner: RefCell::new(GraphInner {
                nodes: Vec::new(),
                rng: ChaCha8Rng::seed_from_u64(seed),
                watermark: 0,
            }),
            seed,
        })
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Number of nodes currently on the tape.
    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Mark everything inserted so far (model parameters) as permanent;
    /// `reset` truncates back to this point.
    pub fn freeze(&self) {
        let mut inner = self.inner.borrow_mut();
        inner.watermark = inner.nodes.len();
    }

    /// Drop all nodes recorded after `freeze`. Leaf gradients survive;
    /// zero them explicitly via `zero_grads`.
    pub fn reset(&self) {
        let mut inner = self.inner.borrow_mut();
        let w = inner.watermark;
        inner.nodes.truncate(w);
    }

    /// Reseed the rng to its initial state. Used by `grad_check` so every
    /// evaluation replays identical stochastic draws.
    pub fn reseed_rng(&self) {
        self.inner.borrow_mut().rng = ChaCha8Rng::seed_from_u64(self.seed);
    }

    pub fn with_rng<R>(&self, f: impl FnOnce(&mut ChaCha8Rng) -> R) -> R {
        f(&mut self.inner.borrow_mut().rng)
    }

    /// (seed, word_pos) of the rng stream, for checkpointing.
    pub fn rng_state(&self) -> ([u8; 32], u128) {
        let inner = self.inner.borrow();
        (inner.rng.get_seed(), inner.rng.get_word_pos())
    }

    pub fn set_rng_state(&self, seed: [u8; 32], word_pos: u128) {
        let mut inner = self.inner.borrow_mut();
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_word_pos(word_pos);
        inner.rng = rng;
    }

    pub fn zero_grads(&self) {
        for node in self.inner.borrow_mut().nodes.iter_mut() {
            node.grad = None;
        }
    }

    fn push(self: &Rc<Self>, shape: Vec<usize>, data: Vec<f64>, op: Op, requires_grad: bool) -> Result<Tensor> {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        if let Some(bad) = data.iter().find(|v| !v.is_finite()) {
            return Err(CvdError::Domain(format!(
                "non-finite value {bad} produced by forward op"
            )));
        }
        let mut inner = self.inner.borrow_mut();
        let id = inner.nodes.len();
        inner.nodes.push(Node {
            shape: shape.clone(),
            data,
            grad: None,
            requires_grad,
            op,
        });
        Ok(Tensor {
            graph: Rc::clone(self),
            id,
            shape,
        })
    }

    /// Insert a leaf tensor.
    pub fn tensor(self: &Rc<Self>, data: Vec<f64>, shape: &[usize], requires_grad: bool) -> Result<Tensor> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(CvdError::Shape(format!(
                "leaf data length {} does not match shape {:?}",
                data.len(),
                shape
            )));
        }
        if shape.iter().any(|&d| d == 0) {
            return Err(CvdError::Shape("zero-sized dimension".into()));
        }
        self.push(shape.to_vec(), data, Op::Leaf, requires_grad)
    }

    pub fn scalar(self: &Rc<Self>, v: f64) -> Result<Tensor> {
        self.tensor(vec![v], &[1], false)
    }

    /// Re-create a handle for an existing node (used by the parameter map).
    pub fn handle(self: &Rc<Self>, id: NodeId) -> Tensor {
        let shape = self.inner.borrow().nodes[id].shape.clone();
        Tensor {
            graph: Rc::clone(self),
            id,
            shape,
        }
    }

    pub fn node_data(&self, id: NodeId) -> Vec<f64> {
        self.inner.borrow().nodes[id].data.clone()
    }

    pub fn node_grad(&self, id: NodeId) -> Option<Vec<f64>> {
        self.inner.borrow().nodes[id].grad.clone()
    }

    pub fn node_shape(&self, id: NodeId) -> Vec<usize> {
        self.inner.borrow().nodes[id].shape.clone()
    }

    pub fn set_node_data(&self, id: NodeId, data: Vec<f64>) {
        let mut inner = self.inner.borrow_mut();
        assert_eq!(inner.nodes[id].data.len(), data.len());
        inner.nodes[id].data = data;
    }

    /// In-place update of one leaf buffer (optimizer steps, finite
    /// differences).
    pub fn update_node_data(&self, id: NodeId, f: impl FnOnce(&mut [f64])) {
        f(&mut self.inner.borrow_mut().nodes[id].data);
    }
}

/// Handle to one node on a [`Graph`].
#[derive(Clone)]
pub struct Tensor {
    graph: Rc<Graph>,
    id: NodeId,
    shape: Vec<usize>,
}

fn same_graph(a: &Tensor, b: &Tensor) -> Result<()> {
    if Rc::ptr_eq(&a.graph, &b.graph) {
        Ok(())
    } else {
        Err(CvdError::Precondition("tensors live on different graphs".into()))
    }
}

impl Tensor {
    pub fn graph(&self) -> &Rc<Graph> {
        &self.graph
    }

    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn data(&self) -> Vec<f64> {
        self.graph.node_data(self.id)
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.graph.node_grad(self.id)
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.inner.borrow().nodes[self.id].requires_grad
    }

    /// Scalar value; panics if the tensor is not a single element.
    pub fn item(&self) -> f64 {
        let d = self.data();
        assert_eq!(d.len(), 1, "item() on non-scalar tensor");
        d[0]
    }

    fn is_scalar(&self) -> bool {
        self.numel() == 1
    }

    fn unary(&self, kind: UnKind) -> Result<Tensor> {
        let x = self.data();
        let out: Vec<f64> = match kind {
            UnKind::Neg => x.iter().map(|v| -v).collect(),
            UnKind::Exp => x.iter().map(|v| v.exp()).collect(),
            UnKind::Log => {
                if let Some(bad) = x.iter().find(|v| **v <= 0.0) {
                    return Err(CvdError::Domain(format!("log of non-positive value {bad}")));
                }
                x.iter().map(|v| v.ln()).collect()
            }
            UnKind::Sqrt => {
                if let Some(bad) = x.iter().find(|v| **v < 0.0) {
                    return Err(CvdError::Domain(format!("sqrt of negative value {bad}")));
                }
                x.iter().map(|v| v.sqrt()).collect()
            }
            UnKind::Square => x.iter().map(|v| v * v).collect(),
            UnKind::Relu => x.iter().map(|v| v.max(0.0)).collect(),
            UnKind::Sigmoid => x.iter().map(|v| 1.0 / (1.0 + (-v).exp())).collect(),
        };
        let rg = self.requires_grad();
        self.graph
            .push(self.shape.clone(), out, Op::Unary { kind, x: self.id }, rg)
    }

    pub fn neg(&self) -> Result<Tensor> {
        self.unary(UnKind::Neg)
    }
    pub fn exp(&self) -> Result<Tensor> {
        self.unary(UnKind::Exp)
    }
    pub fn log(&self) -> Result<Tensor> {
        self.unary(UnKind::Log)
    }
    pub fn sqrt(&self) -> Result<Tensor> {
        self.unary(UnKind::Sqrt)
    }
    pub fn square(&self) -> Result<Tensor> {
        self.unary(UnKind::Square)
    }
    pub fn relu(&self) -> Result<Tensor> {
        self.unary(UnKind::Relu)
    }
    pub fn sigmoid(&self) -> Result<Tensor> {
        self.unary(UnKind::Sigmoid)
    }

    fn binary(&self, other: &Tensor, kind: BinKind) -> Result<Tensor> {
        same_graph(self, other)?;
        let (a, b) = (self.data(), other.data());
        let out_shape;
        let out: Vec<f64>;
        let apply = |x: f64, y: f64| -> f64 {
            match kind {
                BinKind::Add => x + y,
                BinKind::Sub => x - y,
                BinKind::Mul => x * y,
                BinKind::Div => x / y,
            }
        };
        if kind == BinKind::Div && b.iter().any(|v| *v == 0.0) {
            return Err(CvdError::Domain("division by zero".into()));
        }
        if self.shape == other.shape {
            out_shape = self.shape.clone();
            out = a.iter().zip(&b).map(|(x, y)| apply(*x, *y)).collect();
        } else if other.is_scalar() {
            out_shape = self.shape.clone();
            out = a.iter().map(|x| apply(*x, b[0])).collect();
        } else if self.is_scalar() {
            out_shape = other.shape.clone();
            out = b.iter().map(|y| apply(a[0], *y)).collect();
        } else {
            return Err(CvdError::Shape(format!(
                "binary op on incompatible shapes {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        let rg = self.requires_grad() || other.requires_grad();
        self.graph.push(
            out_shape,
            out,
            Op::Binary {
                kind,
                a: self.id,
                b: other.id,
            },
            rg,
        )
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, BinKind::Add)
    }
    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, BinKind::Sub)
    }
    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, BinKind::Mul)
    }
    pub fn div(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, BinKind::Div)
    }

    pub fn add_scalar(&self, c: f64) -> Result<Tensor> {
        let out: Vec<f64> = self.data().iter().map(|v| v + c).collect();
        let rg = self.requires_grad();
        self.graph
            .push(self.shape.clone(), out, Op::AddScalar { x: self.id }, rg)
    }

    pub fn mul_scalar(&self, c: f64) -> Result<Tensor> {
        let out: Vec<f64> = self.data().iter().map(|v| v * c).collect();
        let rg = self.requires_grad();
        self.graph
            .push(self.shape.clone(), out, Op::MulScalar { x: self.id, c }, rg)
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        same_graph(self, other)?;
        if self.shape.len() != 2 || other.shape.len() != 2 {
            return Err(CvdError::Shape("matmul expects rank-2 tensors".into()));
        }
        let (m, k) = (self.shape[0], self.shape[1]);
        let (k2, n) = (other.shape[0], other.shape[1]);
        if k != k2 {
            return Err(CvdError::Shape(format!(
                "matmul inner dims disagree: {k} vs {k2}"
            )));
        }
        let out = matmul_raw(&self.data(), &other.data(), m, k, n);
        let rg = self.requires_grad() || other.requires_grad();
        self.graph.push(
            vec![m, n],
            out,
            Op::Matmul {
                a: self.id,
                b: other.id,
                m,
                k,
                n,
            },
            rg,
        )
    }

    /// 3x3 cross-correlation, NCHW layout.
    pub fn conv2d(&self, kernel: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
        same_graph(self, kernel)?;
        let (out, shape) = conv::conv2d_forward(
            &self.data(),
            &self.shape,
            &kernel.data(),
            &kernel.shape,
            stride,
            pad,
        )?;
        let rg = self.requires_grad() || kernel.requires_grad();
        self.graph.push(
            shape,
            out,
            Op::Conv2d {
                x: self.id,
                kernel: kernel.id,
                stride,
                pad,
            },
            rg,
        )
    }

    /// Add a per-channel bias to a [B,C,H,W] map.
    pub fn add_channel_bias(&self, bias: &Tensor) -> Result<Tensor> {
        same_graph(self, bias)?;
        if self.shape.len() != 4 || bias.shape.len() != 1 || bias.shape[0] != self.shape[1] {
            return Err(CvdError::Shape(format!(
                "channel bias {:?} does not match map {:?}",
                bias.shape, self.shape
            )));
        }
        let (b, c, h, w) = (self.shape[0], self.shape[1], self.shape[2], self.shape[3]);
        let x = self.data();
        let bv = bias.data();
        let mut out = x;
        for bi in 0..b {
            for ci in 0..c {
                let base = (bi * c + ci) * h * w;
                let add = bv[ci];
                for v in &mut out[base..base + h * w] {
                    *v += add;
                }
            }
        }
        let rg = self.requires_grad() || bias.requires_grad();
        self.graph.push(
            self.shape.clone(),
            out,
            Op::AddChannelBias {
                x: self.id,
                bias: bias.id,
            },
            rg,
        )
    }

    /// Nearest-neighbor 2x spatial upsampling of a [B,C,H,W] map.
    pub fn upsample2x(&self) -> Result<Tensor> {
        if self.shape.len() != 4 {
            return Err(CvdError::Shape("upsample2x expects [B,C,H,W]".into()));
        }
        let (b, c, h, w) = (self.shape[0], self.shape[1], self.shape[2], self.shape[3]);
        let x = self.data();
        let (oh, ow) = (2 * h, 2 * w);
        let mut out = vec![0.0; b * c * oh * ow];
        for bc in 0..b * c {
            let src = &x[bc * h * w..(bc + 1) * h * w];
            let dst = &mut out[bc * oh * ow..(bc + 1) * oh * ow];
            for y in 0..oh {
                for xx in 0..ow {
                    dst[y * ow + xx] = src[(y / 2) * w + xx / 2];
                }
            }
        }
        let rg = self.requires_grad();
        self.graph
            .push(vec![b, c, oh, ow], out, Op::Upsample2x { x: self.id }, rg)
    }

    /// Concatenate along axis 1. All tensors must agree on axis 0 and on
    /// every trailing axis.
    pub fn concat_axis1(parts: &[&Tensor]) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(CvdError::Shape("concat of zero tensors".into()));
        }
        let first = parts[0];
        for p in parts.iter().skip(1) {
            same_graph(first, p)?;
            if p.shape.len() != first.shape.len()
                || p.shape[0] != first.shape[0]
                || p.shape[2..] != first.shape[2..]
            {
                return Err(CvdError::Shape(format!(
                    "concat_axis1 mismatch: {:?} vs {:?}",
                    first.shape, p.shape
                )));
            }
        }
        let outer = first.shape[0];
        let inner: usize = first.shape[2..].iter().product();
        let widths: Vec<usize> = parts.iter().map(|p| p.shape[1]).collect();
        let total: usize = widths.iter().sum();
        let mut shape = first.shape.clone();
        shape[1] = total;
        let mut out = vec![0.0; outer * total * inner];
        let datas: Vec<Vec<f64>> = parts.iter().map(|p| p.data()).collect();
        for o in 0..outer {
            let mut off = 0;
            for (pi, w) in widths.iter().enumerate() {
                let src = &datas[pi][o * w * inner..(o + 1) * w * inner];
                out[(o * total + off) * inner..(o * total + off + w) * inner].copy_from_slice(src);
                off += w;
            }
        }
        let rg = parts.iter().any(|p| p.requires_grad());
        first.graph.push(
            shape,
            out,
            Op::ConcatAxis1 {
                parts: parts.iter().map(|p| p.id).collect(),
                outer,
                widths,
                inner,
            },
            rg,
        )
    }

    /// Sort each slice along the last dimension, ascending, ties broken
    /// stably by original index. Returns the sorted tensor and the flat
    /// permutation (`sorted[i] = x[perm[i]]` within each slice).
    pub fn sort_last(&self) -> Result<(Tensor, Vec<usize>)> {
        let n = *self.shape.last().ok_or_else(|| CvdError::Shape("sort_last on rank-0".into()))?;
        let x = self.data();
        let slices = x.len() / n;
        let mut out = vec![0.0; x.len()];
        let mut perm = vec![0u32; x.len()];
        let mut idx: Vec<u32> = Vec::with_capacity(n);
        for s in 0..slices {
            let src = &x[s * n..(s + 1) * n];
            idx.clear();
            idx.extend(0..n as u32);
            idx.sort_by(|&i, &j| src[i as usize].partial_cmp(&src[j as usize]).unwrap());
            for (i, &p) in idx.iter().enumerate() {
                out[s * n + i] = src[p as usize];
                perm[s * n + i] = p;
            }
        }
        let rg = self.requires_grad();
        let perm_usize = perm.iter().map(|&p| p as usize).collect();
        let t = self.graph.push(
            self.shape.clone(),
            out,
            Op::SortLast {
                x: self.id,
                n,
                perm,
            },
            rg,
        )?;
        Ok((t, perm_usize))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if shape.iter().product::<usize>() != self.numel() {
            return Err(CvdError::Shape(format!(
                "reshape {:?} -> {:?} changes element count",
                self.shape, shape
            )));
        }
        let rg = self.requires_grad();
        self.graph
            .push(shape.to_vec(), self.data(), Op::Reshape { x: self.id }, rg)
    }

    pub fn sum_all(&self) -> Result<Tensor> {
        let s: f64 = self.data().iter().sum();
        let rg = self.requires_grad();
        self.graph.push(vec![1], vec![s], Op::SumAll { x: self.id }, rg)
    }

    /// Mean of all elements.
    pub fn mean_all(&self) -> Result<Tensor> {
        let n = self.numel() as f64;
        self.sum_all()?.mul_scalar(1.0 / n)
    }

    /// Global average pool: [B,C,H,W] -> [B,C].
    pub fn mean_spatial(&self) -> Result<Tensor> {
        if self.shape.len() != 4 {
            return Err(CvdError::Shape("mean_spatial expects [B,C,H,W]".into()));
        }
        let (b, c, h, w) = (self.shape[0], self.shape[1], self.shape[2], self.shape[3]);
        let x = self.data();
        let hw = (h * w) as f64;
        let mut out = vec![0.0; b * c];
        for bc in 0..b * c {
            out[bc] = x[bc * h * w..(bc + 1) * h * w].iter().sum::<f64>() / hw;
        }
        let rg = self.requires_grad();
        self.graph
            .push(vec![b, c], out, Op::MeanSpatial { x: self.id }, rg)
    }

    /// Normalize each row of a [B,D] matrix to unit L2 norm.
    pub fn l2_normalize_rows(&self) -> Result<Tensor> {
        if self.shape.len() != 2 {
            return Err(CvdError::Shape("l2_normalize_rows expects [B,D]".into()));
        }
        let (b, d) = (self.shape[0], self.shape[1]);
        let x = self.data();
        let mut out = vec![0.0; b * d];
        for r in 0..b {
            let row = &x[r * d..(r + 1) * d];
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm < 1e-300 {
                return Err(CvdError::Degenerate(format!("zero-norm row {r}")));
            }
            for (o, v) in out[r * d..(r + 1) * d].iter_mut().zip(row) {
                *o = v / norm;
            }
        }
        let rg = self.requires_grad();
        self.graph
            .push(self.shape.clone(), out, Op::L2NormRows { x: self.id }, rg)
    }

    /// Reorder the rows (axis-0 slices) of a tensor: `out.row[i] = x.row[perm[i]]`.
    pub fn permute_rows(&self, perm: &[usize]) -> Result<Tensor> {
        let b = self.shape[0];
        if perm.len() != b {
            return Err(CvdError::Shape(format!(
                "permutation length {} vs {} rows",
                perm.len(),
                b
            )));
        }
        let inner = self.numel() / b;
        let x = self.data();
        let mut out = vec![0.0; x.len()];
        for (i, &p) in perm.iter().enumerate() {
            out[i * inner..(i + 1) * inner].copy_from_slice(&x[p * inner..(p + 1) * inner]);
        }
        let rg = self.requires_grad();
        self.graph.push(
            self.shape.clone(),
            out,
            Op::PermuteRows {
                x: self.id,
                perm: perm.iter().map(|&p| p as u32).collect(),
            },
            rg,
        )
    }

    pub fn transpose2(&self) -> Result<Tensor> {
        if self.shape.len() != 2 {
            return Err(CvdError::Shape("transpose2 expects rank-2".into()));
        }
        let (r, c) = (self.shape[0], self.shape[1]);
        let x = self.data();
        let mut out = vec![0.0; x.len()];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = x[i * c + j];
            }
        }
        let rg = self.requires_grad();
        self.graph.push(
            vec![c, r],
            out,
            Op::Transpose2 {
                x: self.id,
                rows: r,
                cols: c,
            },
            rg,
        )
    }

    /// Row-wise log-sum-exp of a [B,N] matrix, max-subtracted for
    /// stability. Returns [B].
    pub fn logsumexp_rows(&self) -> Result<Tensor> {
        if self.shape.len() != 2 {
            return Err(CvdError::Shape("logsumexp_rows expects [B,N]".into()));
        }
        let (b, n) = (self.shape[0], self.shape[1]);
        let x = self.data();
        let mut out = vec![0.0; b];
        for r in 0..b {
            let row = &x[r * n..(r + 1) * n];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let s: f64 = row.iter().map(|v| (v - m).exp()).sum();
            out[r] = m + s.ln();
        }
        let rg = self.requires_grad();
        self.graph.push(
            vec![b],
            out,
            Op::LogsumexpRows {
                x: self.id,
                cols: n,
            },
            rg,
        )
    }

    /// Main diagonal of a square matrix.
    pub fn diag(&self) -> Result<Tensor> {
        if self.shape.len() != 2 || self.shape[0] != self.shape[1] {
            return Err(CvdError::Shape("diag expects a square matrix".into()));
        }
        let n = self.shape[0];
        let x = self.data();
        let out: Vec<f64> = (0..n).map(|i| x[i * n + i]).collect();
        let rg = self.requires_grad();
        self.graph.push(vec![n], out, Op::Diag { x: self.id, n }, rg)
    }

    /// Reverse sweep from a scalar loss. Gradients accumulate on
    /// `requires_grad` leaves until `Graph::zero_grads`.
    pub fn backward(&self) -> Result<()> {
        if !self.is_scalar() {
            return Err(CvdError::Shape(format!(
                "backward on non-scalar tensor of shape {:?}",
                self.shape
            )));
        }
        let inner = &mut *self.graph.inner.borrow_mut();
        let nodes = &mut inner.nodes;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.id + 1];
        grads[self.id] = Some(vec![1.0]);
        for id in (0..=self.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            if !nodes[id].requires_grad {
                continue;
            }
            backward_node(nodes, &mut grads, id, &g);
            if matches!(nodes[id].op, Op::Leaf) {
                let node = &mut nodes[id];
                match &mut node.grad {
                    Some(acc) => {
                        for (a, v) in acc.iter_mut().zip(&g) {
                            *a += v;
                        }
                    }
                    None => node.grad = Some(g),
                }
            }
        }
        Ok(())
    }
}

fn accum(grads: &mut [Option<Vec<f64>>], nodes: &[Node], id: NodeId, contrib: impl FnOnce(&mut [f64])) {
    if !nodes[id].requires_grad {
        return;
    }
    let slot = grads[id].get_or_insert_with(|| vec![0.0; nodes[id].data.len()]);
    contrib(slot);
}

fn backward_node(nodes: &[Node], grads: &mut [Option<Vec<f64>>], id: NodeId, g: &[f64]) {
    match &nodes[id].op {
        Op::Leaf => {}
        Op::Unary { kind, x } => {
            let xd = &nodes[*x].data;
            let out = &nodes[id].data;
            accum(grads, nodes, *x, |gx| match kind {
                UnKind::Neg => {
                    for (gx, g) in gx.iter_mut().zip(g) {
                        *gx -= g;
                    }
                }
                UnKind::Exp => {
                    for i in 0..gx.len() {
                        gx[i] += g[i] * out[i];
                    }
                }
                UnKind::Log => {
                    for i in 0..gx.len() {
                        gx[i] += g[i] / xd[i];
                    }
                }
                UnKind::Sqrt => {
                    for i in 0..gx.len() {
                        gx[i] += g[i] * 0.5 / out[i];
                    }
                }
                UnKind::Square => {
                    for i in 0..gx.len() {
                        gx[i] += g[i] * 2.0 * xd[i];
                    }
                }
                UnKind::Relu => {
                    for i in 0..gx.len() {
                        if xd[i] > 0.0 {
                            gx[i] += g[i];
                        }
                    }
                }
                UnKind::Sigmoid => {
                    for i in 0..gx.len() {
                        gx[i] += g[i] * out[i] * (1.0 - out[i]);
                    }
                }
            });
        }
        Op::Binary { kind, a, b } => {
            let (a, b) = (*a, *b);
            let an = nodes[a].data.len();
            let bn = nodes[b].data.len();
            let ad = &nodes[a].data;
            let bd = &nodes[b].data;
            let pick = |d: &[f64], i: usize| if d.len() == 1 { d[0] } else { d[i] };
            // d/da
            accum(grads, nodes, a, |ga| {
                for i in 0..g.len() {
                    let v = match kind {
                        BinKind::Add => g[i],
                        BinKind::Sub => g[i],
                        BinKind::Mul => g[i] * pick(bd, i),
                        BinKind::Div => g[i] / pick(bd, i),
                    };
                    if an == 1 {
                        ga[0] += v;
                    } else {
                        ga[i] += v;
                    }
                }
            });
            // d/db
            accum(grads, nodes, b, |gb| {
                for i in 0..g.len() {
                    let bi = pick(bd, i);
                    let v = match kind {
                        BinKind::Add => g[i],
                        BinKind::Sub => -g[i],
                        BinKind::Mul => g[i] * pick(ad, i),
                        BinKind::Div => -g[i] * pick(ad, i) / (bi * bi),
                    };
                    if bn == 1 {
                        gb[0] += v;
                    } else {
                        gb[i] += v;
                    }
                }
            });
        }
        Op::AddScalar { x } => {
            accum(grads, nodes, *x, |gx| {
                for (gx, g) in gx.iter_mut().zip(g) {
                    *gx += g;
                }
            });
        }
        Op::MulScalar { x, c } => {
            let c = *c;
            accum(grads, nodes, *x, |gx| {
                for (gx, g) in gx.iter_mut().zip(g) {
                    *gx += g * c;
                }
            });
        }
        Op::Matmul { a, b, m, k, n } => {
            let (a, b) = (*a, *b);
            let (m, k, n) = (*m, *k, *n);
            let ad = &nodes[a].data;
            let bd = &nodes[b].data;
            // dA = g . B^T
            accum(grads, nodes, a, |ga| {
                for i in 0..m {
                    for p in 0..k {
                        let mut s = 0.0;
                        for j in 0..n {
                            s += g[i * n + j] * bd[p * n + j];
                        }
                        ga[i * k + p] += s;
                    }
                }
            });
            // dB = A^T . g
            accum(grads, nodes, b, |gb| {
                for i in 0..m {
                    let av = &ad[i * k..(i + 1) * k];
                    let gv = &g[i * n..(i + 1) * n];
                    for (p, &avp) in av.iter().enumerate() {
                        let row = &mut gb[p * n..(p + 1) * n];
                        for (r, &gj) in row.iter_mut().zip(gv) {
                            *r += avp * gj;
                        }
                    }
                }
            });
        }
        Op::Conv2d {
            x,
            kernel,
            stride,
            pad,
        } => {
            let (x, kernel) = (*x, *kernel);
            let xshape = nodes[x].shape.clone();
            let kshape = nodes[kernel].shape.clone();
            let oshape = nodes[id].shape.clone();
            let xd = &nodes[x].data;
            let kd = &nodes[kernel].data;
            if nodes[x].requires_grad {
                let dx = conv::conv2d_backward_input(g, &oshape, kd, &kshape, &xshape, *stride, *pad);
                accum(grads, nodes, x, |gx| {
                    for (gx, v) in gx.iter_mut().zip(&dx) {
                        *gx += v;
                    }
                });
            }
            if nodes[kernel].requires_grad {
                let dk = conv::conv2d_backward_kernel(g, &oshape, xd, &xshape, &kshape, *stride, *pad);
                accum(grads, nodes, kernel, |gk| {
                    for (gk, v) in gk.iter_mut().zip(&dk) {
                        *gk += v;
                    }
                });
            }
        }
        Op::AddChannelBias { x, bias } => {
            let (x, bias) = (*x, *bias);
            let shape = nodes[id].shape.clone();
            let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
            accum(grads, nodes, x, |gx| {
                for (gx, g) in gx.iter_mut().zip(g) {
                    *gx += g;
                }
            });
            accum(grads, nodes, bias, |gb| {
                for bi in 0..b {
                    for ci in 0..c {
                        let base = (bi * c + ci) * h * w;
                        gb[ci] += g[base..base + h * w].iter().sum::<f64>();
                    }
                }
            });
        }
        Op::Upsample2x { x } => {
            let x = *x;
            let xs = nodes[x].shape.clone();
            let (b, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
            let (oh, ow) = (2 * h, 2 * w);
            accum(grads, nodes, x, |gx| {
                for bc in 0..b * c {
                    let gsrc = &g[bc * oh * ow..(bc + 1) * oh * ow];
                    let gdst = &mut gx[bc * h * w..(bc + 1) * h * w];
                    for y in 0..oh {
                        for xx in 0..ow {
                            gdst[(y / 2) * w + xx / 2] += gsrc[y * ow + xx];
                        }
                    }
                }
            });
        }
        Op::ConcatAxis1 {
            parts,
            outer,
            widths,
            inner,
        } => {
            let total: usize = widths.iter().sum();
            let (outer, inner) = (*outer, *inner);
            let mut off = 0;
            for (pi, w) in widths.iter().enumerate() {
                let pid = parts[pi];
                let w = *w;
                let start = off;
                accum(grads, nodes, pid, |gp| {
                    for o in 0..outer {
                        let src = &g[(o * total + start) * inner..(o * total + start + w) * inner];
                        let dst = &mut gp[o * w * inner..(o + 1) * w * inner];
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                });
                off += w;
            }
        }
        Op::SortLast { x, n, perm } => {
            let x = *x;
            let n = *n;
            accum(grads, nodes, x, |gx| {
                let slices = gx.len() / n;
                for s in 0..slices {
                    for i in 0..n {
                        gx[s * n + perm[s * n + i] as usize] += g[s * n + i];
                    }
                }
            });
        }
        Op::Reshape { x } => {
            accum(grads, nodes, *x, |gx| {
                for (gx, g) in gx.iter_mut().zip(g) {
                    *gx += g;
                }
            });
        }
        Op::SumAll { x } => {
            let g0 = g[0];
            accum(grads, nodes, *x, |gx| {
                for gx in gx.iter_mut() {
                    *gx += g0;
                }
            });
        }
        Op::MeanSpatial { x } => {
            let x = *x;
            let xs = nodes[x].shape.clone();
            let (b, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
            let inv = 1.0 / (h * w) as f64;
            accum(grads, nodes, x, |gx| {
                for bc in 0..b * c {
                    let gv = g[bc] * inv;
                    for v in &mut gx[bc * h * w..(bc + 1) * h * w] {
                        *v += gv;
                    }
                }
            });
        }
        Op::L2NormRows { x } => {
            let x = *x;
            let xs = nodes[x].shape.clone();
            let (b, d) = (xs[0], xs[1]);
            let xd = &nodes[x].data;
            let out = &nodes[id].data;
            accum(grads, nodes, x, |gx| {
                for r in 0..b {
                    let row = &xd[r * d..(r + 1) * d];
                    let y = &out[r * d..(r + 1) * d];
                    let gr = &g[r * d..(r + 1) * d];
                    let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                    let dot: f64 = gr.iter().zip(y).map(|(a, b)| a * b).sum();
                    for i in 0..d {
                        gx[r * d + i] += (gr[i] - y[i] * dot) / norm;
                    }
                }
            });
        }
        Op::PermuteRows { x, perm } => {
            let x = *x;
            let inner = nodes[x].data.len() / perm.len();
            accum(grads, nodes, x, |gx| {
                for (i, &p) in perm.iter().enumerate() {
                    let src = &g[i * inner..(i + 1) * inner];
                    let dst = &mut gx[p as usize * inner..(p as usize + 1) * inner];
                    for (d, s) in dst.iter_mut().zip(src) {
                        *d += s;
                    }
                }
            });
        }
        Op::Transpose2 { x, rows, cols } => {
            let (rows, cols) = (*rows, *cols);
            accum(grads, nodes, *x, |gx| {
                for i in 0..rows {
                    for j in 0..cols {
                        gx[i * cols + j] += g[j * rows + i];
                    }
                }
            });
        }
        Op::LogsumexpRows { x, cols } => {
            let x = *x;
            let n = *cols;
            let xd = &nodes[x].data;
            let out = &nodes[id].data;
            accum(grads, nodes, x, |gx| {
                for r in 0..out.len() {
                    let gr = g[r];
                    for j in 0..n {
                        gx[r * n + j] += gr * (xd[r * n + j] - out[r]).exp();
                    }
                }
            });
        }
        Op::Diag { x, n } => {
            let n = *n;
            accum(grads, nodes, *x, |gx| {
                for i in 0..n {
                    gx[i * n + i] += g[i];
                }
            });
        }
    }
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}
