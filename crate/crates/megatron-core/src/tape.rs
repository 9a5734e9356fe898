//! Reverse-mode automatic differentiation over `ndarray` tensors.
//!
//! A [`Tape`] records a forward computation as a flat list of nodes in
//! topological order. Calling [`Tape::backward`] with a scalar node seeds a
//! reverse sweep and returns the gradient of that scalar with respect to
//! every node, so one recorded forward pass can be differentiated against
//! several losses (the trigger optimizer needs exactly that).
//!
//! The op set is the minimum a small pre-LN vision transformer needs. Each
//! backward rule is checked against central finite differences in the tests
//! at the bottom of this file.

use ndarray::{Array1, Array2, ArrayD, ArrayView2, ArrayViewD, Axis, IxDyn};

use crate::error::{Error, Result};

pub type NodeId = usize;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    /// a + b, identical shapes
    Add(NodeId, NodeId),
    /// a - b, identical shapes
    Sub(NodeId, NodeId),
    /// a ⊙ b, identical shapes
    Mul(NodeId, NodeId),
    /// c · a
    Scale(NodeId, f64),
    /// matrix (r,c) + row vector (c,) broadcast over rows
    AddBiasRow(NodeId, NodeId),
    /// a (m,k) · b (k,n)
    Matmul(NodeId, NodeId),
    /// a (m,k) · bᵀ where b is (n,k)
    MatmulNT(NodeId, NodeId),
    /// row vector (k,) · m (k,n) -> (n,)
    VecMat(NodeId, NodeId),
    /// row-wise softmax of a 2-D matrix
    SoftmaxRows(NodeId),
    /// per-row layer normalization with affine parameters
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
    },
    /// tanh-approximation GELU, elementwise
    Gelu(NodeId),
    /// sum of all entries -> 0-d scalar
    SumAll(NodeId),
    /// mean over axis 0 of a 3-D tensor (h,p,p) -> (p,p)
    MeanAxis0(NodeId),
    /// stack 2-D matrices into a 3-D tensor along a new axis 0
    Stack0(Vec<NodeId>),
    /// slice [i] of a 3-D tensor -> 2-D
    IndexAxis0(NodeId, usize),
    /// columns [start, start+len) of a 2-D matrix
    SliceCols {
        x: NodeId,
        start: usize,
        len: usize,
    },
    /// horizontal concatenation of 2-D matrices with equal row counts
    ConcatCols(Vec<NodeId>),
    /// vertical concatenation of 2-D matrices with equal column counts
    ConcatRows(Vec<NodeId>),
    /// row i of a 2-D matrix -> 1-D
    Row(NodeId, usize),
    /// element i of a 1-D vector -> 0-d scalar
    Index(NodeId, usize),
    /// non-overlapping (ps × ps) patches of a (c,h,w) image, flattened
    /// row-major per patch -> (n_patches, c·ps·ps)
    ExtractPatches { img: NodeId, ps: usize },
    /// -log softmax(logits)[label] -> 0-d scalar
    CrossEntropyLogits { logits: NodeId, label: usize },
}

struct Node {
    value: ArrayD<f64>,
    op: Op,
}

/// Recorded forward computation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn as_2d(a: &ArrayD<f64>) -> ArrayView2<'_, f64> {
    a.view()
        .into_dimensionality()
        .expect("tape node expected to be 2-d")
}

fn scalar(v: f64) -> ArrayD<f64> {
    ArrayD::from_elem(IxDyn(&[]), v)
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Value of a node.
    pub fn value(&self, id: NodeId) -> ArrayViewD<'_, f64> {
        self.nodes[id].value.view()
    }

    /// Value of a 0-d scalar node.
    pub fn scalar_value(&self, id: NodeId) -> f64 {
        self.nodes[id].value.sum()
    }

    fn push(&mut self, value: ArrayD<f64>, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        self.nodes.len() - 1
    }

    /// Register an input tensor. Leaves carry no backward rule; their
    /// gradient is read out of the result of [`Tape::backward`].
    pub fn leaf(&mut self, value: ArrayD<f64>) -> NodeId {
        self.push(value, Op::Leaf)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = &self.nodes[a].value + &self.nodes[b].value;
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = &self.nodes[a].value - &self.nodes[b].value;
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = &self.nodes[a].value * &self.nodes[b].value;
        self.push(v, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = &self.nodes[a].value * c;
        self.push(v, Op::Scale(a, c))
    }

    pub fn add_bias_row(&mut self, m: NodeId, bias: NodeId) -> NodeId {
        let mv = as_2d(&self.nodes[m].value);
        let bv = &self.nodes[bias].value;
        let b1: Array1<f64> = bv
            .view()
            .into_dimensionality()
            .expect("bias expected to be 1-d")
            .to_owned();
        let v = (&mv + &b1).into_dyn();
        self.push(v, Op::AddBiasRow(m, bias))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = as_2d(&self.nodes[a].value)
            .dot(&as_2d(&self.nodes[b].value))
            .into_dyn();
        self.push(v, Op::Matmul(a, b))
    }

    /// a · bᵀ without materializing the transpose.
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = as_2d(&self.nodes[a].value)
            .dot(&as_2d(&self.nodes[b].value).t())
            .into_dyn();
        self.push(v, Op::MatmulNT(a, b))
    }

    pub fn vec_mat(&mut self, v: NodeId, m: NodeId) -> NodeId {
        let vv: Array1<f64> = self.nodes[v]
            .value
            .view()
            .into_dimensionality()
            .expect("vec_mat lhs expected to be 1-d")
            .to_owned();
        let out = vv.dot(&as_2d(&self.nodes[m].value)).into_dyn();
        self.push(out, Op::VecMat(v, m))
    }

    pub fn softmax_rows(&mut self, x: NodeId) -> NodeId {
        let xv = as_2d(&self.nodes[x].value);
        let mut out = xv.to_owned();
        for mut row in out.rows_mut() {
            let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            row.mapv_inplace(|v| (v - max).exp());
            let sum = row.sum();
            row.mapv_inplace(|v| v / sum);
        }
        self.push(out.into_dyn(), Op::SoftmaxRows(x))
    }

    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: f64) -> NodeId {
        let xv = as_2d(&self.nodes[x].value);
        let g: Array1<f64> = self.nodes[gamma]
            .value
            .view()
            .into_dimensionality()
            .expect("layer_norm gamma expected to be 1-d")
            .to_owned();
        let b: Array1<f64> = self.nodes[beta]
            .value
            .view()
            .into_dimensionality()
            .expect("layer_norm beta expected to be 1-d")
            .to_owned();
        let d = xv.ncols() as f64;
        let mut out = Array2::<f64>::zeros(xv.raw_dim());
        for (i, row) in xv.rows().into_iter().enumerate() {
            let mean = row.sum() / d;
            let var = row.fold(0.0, |acc, &v| acc + (v - mean) * (v - mean)) / d;
            let inv = 1.0 / (var + eps).sqrt();
            for (j, &v) in row.iter().enumerate() {
                out[[i, j]] = (v - mean) * inv * g[j] + b[j];
            }
        }
        self.push(out.into_dyn(), Op::LayerNorm { x, gamma, beta, eps })
    }

    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let v = self.nodes[x].value.mapv(gelu_fwd);
        self.push(v, Op::Gelu(x))
    }

    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let v = scalar(self.nodes[x].value.sum());
        self.push(v, Op::SumAll(x))
    }

    /// Σ xᵢ² as a scalar; composed from `mul` and `sum_all`.
    pub fn sum_sq(&mut self, x: NodeId) -> NodeId {
        let sq = self.mul(x, x);
        self.sum_all(sq)
    }

    pub fn mean_axis0(&mut self, x: NodeId) -> NodeId {
        let v = self.nodes[x]
            .value
            .mean_axis(Axis(0))
            .expect("mean over empty axis");
        self.push(v, Op::MeanAxis0(x))
    }

    pub fn stack0(&mut self, parts: Vec<NodeId>) -> NodeId {
        let views: Vec<_> = parts.iter().map(|&p| self.nodes[p].value.view()).collect();
        let v = ndarray::stack(Axis(0), &views).expect("stack0 shape mismatch");
        self.push(v, Op::Stack0(parts))
    }

    pub fn index_axis0(&mut self, x: NodeId, i: usize) -> NodeId {
        let v = self.nodes[x].value.index_axis(Axis(0), i).to_owned();
        self.push(v, Op::IndexAxis0(x, i))
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> NodeId {
        let xv = as_2d(&self.nodes[x].value);
        let v = xv.slice(ndarray::s![.., start..start + len]).to_owned();
        self.push(v.into_dyn(), Op::SliceCols { x, start, len })
    }

    pub fn concat_cols(&mut self, parts: Vec<NodeId>) -> NodeId {
        let views: Vec<_> = parts.iter().map(|&p| as_2d(&self.nodes[p].value)).collect();
        let v = ndarray::concatenate(Axis(1), &views).expect("concat_cols shape mismatch");
        self.push(v.into_dyn(), Op::ConcatCols(parts))
    }

    pub fn concat_rows(&mut self, parts: Vec<NodeId>) -> NodeId {
        let views: Vec<_> = parts.iter().map(|&p| as_2d(&self.nodes[p].value)).collect();
        let v = ndarray::concatenate(Axis(0), &views).expect("concat_rows shape mismatch");
        self.push(v.into_dyn(), Op::ConcatRows(parts))
    }

    pub fn row(&mut self, x: NodeId, i: usize) -> NodeId {
        let v = as_2d(&self.nodes[x].value).row(i).to_owned();
        self.push(v.into_dyn(), Op::Row(x, i))
    }

    pub fn index(&mut self, x: NodeId, i: usize) -> NodeId {
        let v = scalar(self.nodes[x].value[[i]]);
        self.push(v, Op::Index(x, i))
    }

    pub fn extract_patches(&mut self, img: NodeId, ps: usize) -> NodeId {
        let iv = &self.nodes[img].value;
        let (c, h, w) = (iv.shape()[0], iv.shape()[1], iv.shape()[2]);
        let (gh, gw) = (h / ps, w / ps);
        let mut out = Array2::<f64>::zeros((gh * gw, c * ps * ps));
        for pi in 0..gh {
            for pj in 0..gw {
                let mut k = 0usize;
                for ch in 0..c {
                    for di in 0..ps {
                        for dj in 0..ps {
                            out[[pi * gw + pj, k]] = iv[[ch, pi * ps + di, pj * ps + dj]];
                            k += 1;
                        }
                    }
                }
            }
        }
        self.push(out.into_dyn(), Op::ExtractPatches { img, ps })
    }

    pub fn cross_entropy_logits(&mut self, logits: NodeId, label: usize) -> NodeId {
        let z: Array1<f64> = self.nodes[logits]
            .value
            .view()
            .into_dimensionality()
            .expect("logits expected to be 1-d")
            .to_owned();
        let max = z.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let lse = max + z.mapv(|v| (v - max).exp()).sum().ln();
        let v = scalar(lse - z[label]);
        self.push(v, Op::CrossEntropyLogits { logits, label })
    }

    /// Reverse sweep from a 0-d scalar node. Returns ∂seed/∂node for every
    /// node; entries are `None` where no gradient flows.
    pub fn backward(&self, seed: NodeId) -> Result<Vec<Option<ArrayD<f64>>>> {
        if !self.nodes[seed].value.shape().is_empty() {
            return Err(Error::Contract(
                "backward seed must be a scalar node".into(),
            ));
        }
        let mut grads: Vec<Option<ArrayD<f64>>> = vec![None; self.nodes.len()];
        grads[seed] = Some(scalar(1.0));
        for id in (0..=seed).rev() {
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            self.propagate(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(grads)
    }

    fn accumulate(grads: &mut [Option<ArrayD<f64>>], id: NodeId, delta: ArrayD<f64>) {
        match &mut grads[id] {
            Some(g) => *g += &delta,
            slot @ None => *slot = Some(delta),
        }
    }

    fn propagate(&self, id: NodeId, g: &ArrayD<f64>, grads: &mut [Option<ArrayD<f64>>]) {
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                Self::accumulate(grads, *a, g.clone());
                Self::accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                Self::accumulate(grads, *a, g.clone());
                Self::accumulate(grads, *b, -g);
            }
            Op::Mul(a, b) => {
                Self::accumulate(grads, *a, g * &self.nodes[*b].value);
                Self::accumulate(grads, *b, g * &self.nodes[*a].value);
            }
            Op::Scale(a, c) => Self::accumulate(grads, *a, g * *c),
            Op::AddBiasRow(m, bias) => {
                Self::accumulate(grads, *m, g.clone());
                let gv = as_2d(g);
                Self::accumulate(grads, *bias, gv.sum_axis(Axis(0)).into_dyn());
            }
            Op::Matmul(a, b) => {
                let gv = as_2d(g);
                let av = as_2d(&self.nodes[*a].value);
                let bv = as_2d(&self.nodes[*b].value);
                Self::accumulate(grads, *a, gv.dot(&bv.t()).into_dyn());
                Self::accumulate(grads, *b, av.t().dot(&gv).into_dyn());
            }
            Op::MatmulNT(a, b) => {
                // out = a · bᵀ  ⇒  da = g · b, db = gᵀ · a
                let gv = as_2d(g);
                let av = as_2d(&self.nodes[*a].value);
                let bv = as_2d(&self.nodes[*b].value);
                Self::accumulate(grads, *a, gv.dot(&bv).into_dyn());
                Self::accumulate(grads, *b, gv.t().dot(&av).into_dyn());
            }
            Op::VecMat(v, m) => {
                let gv: Array1<f64> = g
                    .view()
                    .into_dimensionality()
                    .expect("vec_mat grad expected to be 1-d")
                    .to_owned();
                let vv: Array1<f64> = self.nodes[*v]
                    .value
                    .view()
                    .into_dimensionality()
                    .unwrap()
                    .to_owned();
                let mv = as_2d(&self.nodes[*m].value);
                Self::accumulate(grads, *v, mv.dot(&gv).into_dyn());
                let outer = vv
                    .view()
                    .insert_axis(Axis(1))
                    .dot(&gv.view().insert_axis(Axis(0)));
                Self::accumulate(grads, *m, outer.into_dyn());
            }
            Op::SoftmaxRows(x) => {
                // ds/dz per row: s ⊙ (g − (g·s))
                let s = as_2d(&self.nodes[id].value);
                let gv = as_2d(g);
                let mut dz = Array2::<f64>::zeros(s.raw_dim());
                for i in 0..s.nrows() {
                    let srow = s.row(i);
                    let grow = gv.row(i);
                    let dot = srow.dot(&grow);
                    for j in 0..s.ncols() {
                        dz[[i, j]] = srow[j] * (grow[j] - dot);
                    }
                }
                Self::accumulate(grads, *x, dz.into_dyn());
            }
            Op::LayerNorm { x, gamma, beta, eps } => {
                let xv = as_2d(&self.nodes[*x].value);
                let gam: Array1<f64> = self.nodes[*gamma]
                    .value
                    .view()
                    .into_dimensionality()
                    .unwrap()
                    .to_owned();
                let gv = as_2d(g);
                let d = xv.ncols() as f64;
                let mut dx = Array2::<f64>::zeros(xv.raw_dim());
                let mut dgamma = Array1::<f64>::zeros(gam.len());
                let mut dbeta = Array1::<f64>::zeros(gam.len());
                for i in 0..xv.nrows() {
                    let row = xv.row(i);
                    let mean = row.sum() / d;
                    let var = row.fold(0.0, |acc, &v| acc + (v - mean) * (v - mean)) / d;
                    let inv = 1.0 / (var + eps).sqrt();
                    let xhat: Array1<f64> = row.mapv(|v| (v - mean) * inv);
                    let ggam: Array1<f64> = gv
                        .row(i)
                        .iter()
                        .zip(gam.iter())
                        .map(|(&gg, &ga)| gg * ga)
                        .collect();
                    let m1 = ggam.sum() / d;
                    let m2 = ggam.dot(&xhat) / d;
                    for j in 0..xv.ncols() {
                        dx[[i, j]] = inv * (ggam[j] - m1 - xhat[j] * m2);
                        dgamma[j] += gv[[i, j]] * xhat[j];
                        dbeta[j] += gv[[i, j]];
                    }
                }
                Self::accumulate(grads, *x, dx.into_dyn());
                Self::accumulate(grads, *gamma, dgamma.into_dyn());
                Self::accumulate(grads, *beta, dbeta.into_dyn());
            }
            Op::Gelu(x) => {
                let dv = self.nodes[*x].value.mapv(gelu_grad);
                Self::accumulate(grads, *x, g * &dv);
            }
            Op::SumAll(x) => {
                let gs = g.sum();
                let shape = self.nodes[*x].value.raw_dim();
                Self::accumulate(grads, *x, ArrayD::from_elem(shape, gs));
            }
            Op::MeanAxis0(x) => {
                let h = self.nodes[*x].value.shape()[0];
                let shape = self.nodes[*x].value.raw_dim();
                let mut dx = ArrayD::<f64>::zeros(shape);
                for mut sl in dx.axis_iter_mut(Axis(0)) {
                    sl += &(g / h as f64);
                }
                Self::accumulate(grads, *x, dx);
            }
            Op::Stack0(parts) => {
                for (i, &p) in parts.iter().enumerate() {
                    Self::accumulate(grads, p, g.index_axis(Axis(0), i).to_owned());
                }
            }
            Op::IndexAxis0(x, i) => {
                let shape = self.nodes[*x].value.raw_dim();
                let mut dx = ArrayD::<f64>::zeros(shape);
                dx.index_axis_mut(Axis(0), *i).assign(g);
                Self::accumulate(grads, *x, dx);
            }
            Op::SliceCols { x, start, len } => {
                let shape = self.nodes[*x].value.raw_dim();
                let mut dx = ArrayD::<f64>::zeros(shape);
                dx.slice_mut(ndarray::s![.., *start..*start + *len])
                    .assign(g);
                Self::accumulate(grads, *x, dx);
            }
            Op::ConcatCols(parts) => {
                let gv = as_2d(g);
                let mut start = 0usize;
                for &p in parts {
                    let w = self.nodes[p].value.shape()[1];
                    let slice = gv.slice(ndarray::s![.., start..start + w]).to_owned();
                    Self::accumulate(grads, p, slice.into_dyn());
                    start += w;
                }
            }
            Op::ConcatRows(parts) => {
                let gv = as_2d(g);
                let mut start = 0usize;
                for &p in parts {
                    let r = self.nodes[p].value.shape()[0];
                    let slice = gv.slice(ndarray::s![start..start + r, ..]).to_owned();
                    Self::accumulate(grads, p, slice.into_dyn());
                    start += r;
                }
            }
            Op::Row(x, i) => {
                let shape = self.nodes[*x].value.raw_dim();
                let mut dx = ArrayD::<f64>::zeros(shape);
                dx.index_axis_mut(Axis(0), *i).assign(g);
                Self::accumulate(grads, *x, dx);
            }
            Op::Index(x, i) => {
                let shape = self.nodes[*x].value.raw_dim();
                let mut dx = ArrayD::<f64>::zeros(shape);
                dx[[*i]] = g.sum();
                Self::accumulate(grads, *x, dx);
            }
            Op::ExtractPatches { img, ps } => {
                let iv = &self.nodes[*img].value;
                let (c, _h, w) = (iv.shape()[0], iv.shape()[1], iv.shape()[2]);
                let gw = w / ps;
                let gv = as_2d(g);
                let mut dx = ArrayD::<f64>::zeros(iv.raw_dim());
                for (pidx, grow) in gv.rows().into_iter().enumerate() {
                    let (pi, pj) = (pidx / gw, pidx % gw);
                    let mut k = 0usize;
                    for ch in 0..c {
                        for di in 0..*ps {
                            for dj in 0..*ps {
                                dx[[ch, pi * ps + di, pj * ps + dj]] += grow[k];
                                k += 1;
                            }
                        }
                    }
                }
                Self::accumulate(grads, *img, dx);
            }
            Op::CrossEntropyLogits { logits, label } => {
                let z: Array1<f64> = self.nodes[*logits]
                    .value
                    .view()
                    .into_dimensionality()
                    .unwrap()
                    .to_owned();
                let max = z.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
                let exp = z.mapv(|v| (v - max).exp());
                let sum = exp.sum();
                let gs = g.sum();
                let mut dz = exp / sum;
                dz[*label] -= 1.0;
                Self::accumulate(grads, *logits, (dz * gs).into_dyn());
            }
        }
    }
}

fn gelu_fwd(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let u = C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * 0.044715 * x * x)
}
