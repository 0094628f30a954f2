//! Tape-based reverse-mode differentiation over row-major f64 matrices.
//!
//! Sequences are laid out one token (or pixel) per row. Every op records what
//! its backward pass needs; losses are fused ops that store their input
//! gradients at forward time.

use std::collections::{BTreeMap, HashMap};

use ndarray::{s, Array2, Axis, Zip};

use super::params::ParameterStore;

pub type Mat = Array2<f64>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// (frames, height, width) of a stack of feature maps stored pixel-per-row.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FrameGeom {
    pub frames: usize,
    pub h: usize,
    pub w: usize,
}

impl FrameGeom {
    pub fn pixels(&self) -> usize {
        self.frames * self.h * self.w
    }
}

enum Op {
    Input,
    Param,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Mat, inv_std: Vec<f64> },
    Attention { qkv: Var, heads: usize, probs: Vec<Mat> },
    Gather { x: Var, idx: Vec<usize> },
    Concat(Vec<Var>),
    Interleave { visible: Var, token: Var, visible_idx: Vec<usize>, hidden_idx: Vec<usize> },
    Rearrange { x: Var, src: Vec<usize> },
    Conv3x3 { x: Var, w: Var, geom: FrameGeom, cols: Mat },
    Sum(Var),
    Loss { inputs: Vec<(Var, Mat)> },
}

struct Node {
    value: Mat,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<String, Var>,
}

/// Gradients of one backward pass, indexed by node.
pub struct Grads(Vec<Option<Mat>>);

impl Grads {
    pub fn wrt(&self, v: Var) -> Option<&Mat> {
        self.0[v.0].as_ref()
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;
pub const LN_EPS: f64 = 1e-5;

pub fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_K * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
}

fn softmax_rows(m: &mut Mat) {
    for mut row in m.rows_mut() {
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - mx).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
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

    fn push(&mut self, value: Mat, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    /// Constant input; no gradient flows into it.
    pub fn input(&mut self, value: Mat) -> Var {
        self.push(value, Op::Input, false)
    }

    /// Input that receives a gradient (for input-gradient checks).
    pub fn input_with_grad(&mut self, value: Mat) -> Var {
        self.push(value, Op::Input, true)
    }

    /// Leaf bound to a named parameter; repeated calls return the same node.
    pub fn param(&mut self, store: &ParameterStore, name: &str) -> Var {
        if let Some(&v) = self.params.get(name) {
            return v;
        }
        let value = store
            .get(name)
            .unwrap_or_else(|| panic!("parameter `{name}` not in store"))
            .clone();
        let v = self.push(value, Op::Param, true);
        self.params.insert(name.to_string(), v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::MatMul(a, b), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).dim(), self.value(b).dim(), "add shape mismatch");
        let value = self.value(a) + self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Add(a, b), rg)
    }

    /// `a + b` with the single row `b` broadcast over the rows of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(b).nrows(), 1, "add_row expects a single-row operand");
        let value = self.value(a) + self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::AddRow(a, b), rg)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let value = self.value(a) * k;
        let rg = self.rg(a);
        self.push(value, Op::Scale(a, k), rg)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(gelu_scalar);
        let rg = self.rg(a);
        self.push(value, Op::Gelu(a), rg)
    }

    /// Row-wise layer norm with affine single-row `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xv = self.value(x);
        let d = xv.ncols() as f64;
        let mut xhat = xv.clone();
        let mut inv_std = Vec::with_capacity(xv.nrows());
        for mut row in xhat.rows_mut() {
            let mean = row.sum() / d;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d;
            let is = 1.0 / (var + LN_EPS).sqrt();
            row.mapv_inplace(|v| (v - mean) * is);
            inv_std.push(is);
        }
        let value = &xhat * self.value(gamma) + self.value(beta);
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        self.push(value, Op::LayerNorm { x, gamma, beta, xhat, inv_std }, rg)
    }

    /// Multi-head scaled dot-product self-attention over the rows of a packed
    /// `[q | k | v]` matrix (n × 3d). Returns the concatenated head outputs (n × d).
    pub fn attention(&mut self, qkv: Var, heads: usize) -> Var {
        let m = self.value(qkv);
        let d = m.ncols() / 3;
        assert_eq!(d * 3, m.ncols(), "qkv width must be 3*dim");
        assert_eq!(d % heads, 0, "dim must be divisible by heads");
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let n = m.nrows();
        let mut out = Mat::zeros((n, d));
        let mut probs = Vec::with_capacity(heads);
        for j in 0..heads {
            let q = m.slice(s![.., j * dh..(j + 1) * dh]);
            let k = m.slice(s![.., d + j * dh..d + (j + 1) * dh]);
            let v = m.slice(s![.., 2 * d + j * dh..2 * d + (j + 1) * dh]);
            let mut p = q.dot(&k.t()) * scale;
            softmax_rows(&mut p);
            out.slice_mut(s![.., j * dh..(j + 1) * dh]).assign(&p.dot(&v));
            probs.push(p);
        }
        let rg = self.rg(qkv);
        self.push(out, Op::Attention { qkv, heads, probs }, rg)
    }

    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Var {
        let value = self.value(x).select(Axis(0), idx);
        let rg = self.rg(x);
        self.push(value, Op::Gather { x, idx: idx.to_vec() }, rg)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let value = ndarray::concatenate(Axis(0), &views).expect("concat_rows: column mismatch");
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(value, Op::Concat(parts.to_vec()), rg)
    }

    /// Places the rows of `visible` at `visible_idx` and copies the single-row
    /// `token` into every position of `hidden_idx`.
    pub fn interleave(&mut self, visible: Var, token: Var, visible_idx: &[usize], hidden_idx: &[usize]) -> Var {
        let vv = self.value(visible);
        let tv = self.value(token);
        assert_eq!(vv.nrows(), visible_idx.len());
        assert_eq!(tv.nrows(), 1);
        let l = visible_idx.len() + hidden_idx.len();
        let mut out = Mat::zeros((l, vv.ncols()));
        for (r, &i) in visible_idx.iter().enumerate() {
            out.row_mut(i).assign(&vv.row(r));
        }
        for &i in hidden_idx {
            out.row_mut(i).assign(&tv.row(0));
        }
        let rg = self.rg(visible) || self.rg(token);
        self.push(
            out,
            Op::Interleave { visible, token, visible_idx: visible_idx.to_vec(), hidden_idx: hidden_idx.to_vec() },
            rg,
        )
    }

    /// Element permutation/reshape: `out.flat[i] = x.flat[src[i]]`.
    pub fn rearrange(&mut self, x: Var, src: Vec<usize>, shape: (usize, usize)) -> Var {
        assert_eq!(src.len(), shape.0 * shape.1);
        let xv = self.value(x).as_standard_layout().into_owned();
        let flat = xv.as_slice().expect("standard layout");
        let data: Vec<f64> = src.iter().map(|&i| flat[i]).collect();
        let value = Mat::from_shape_vec(shape, data).expect("shape");
        let rg = self.rg(x);
        self.push(value, Op::Rearrange { x, src }, rg)
    }

    /// 3×3 same-padded convolution applied per frame; `w` is (9·Cin × Cout)
    /// with rows ordered (ky, kx, cin).
    pub fn conv3x3(&mut self, x: Var, w: Var, geom: FrameGeom) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.nrows(), geom.pixels());
        let cin = xv.ncols();
        assert_eq!(self.value(w).nrows(), 9 * cin);
        let cols = im2col(xv, geom);
        let value = cols.dot(self.value(w));
        let rg = self.rg(x) || self.rg(w);
        self.push(value, Op::Conv3x3 { x, w, geom, cols }, rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Mat::from_elem((1, 1), self.value(x).sum());
        let rg = self.rg(x);
        self.push(value, Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len().max(1) as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Fused scalar loss with precomputed d(loss)/d(input) for each input.
    pub fn loss_node(&mut self, value: f64, inputs: Vec<(Var, Mat)>) -> Var {
        for (v, g) in &inputs {
            assert_eq!(self.value(*v).dim(), g.dim(), "loss gradient shape mismatch");
        }
        let rg = inputs.iter().any(|(v, _)| self.rg(*v));
        self.push(Mat::from_elem((1, 1), value), Op::Loss { inputs }, rg)
    }

    /// Reverse pass from `root`, seeded with ones.
    pub fn backward(&self, root: Var) -> Grads {
        let mut grads: Vec<Option<Mat>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Mat::ones(self.nodes[root.0].value.dim()));
        for i in (0..=root.0).rev() {
            if !self.nodes[i].requires_grad {
                grads[i] = None;
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(i, &g, &mut grads);
            if matches!(self.nodes[i].op, Op::Input | Op::Param) {
                grads[i] = Some(g);
            }
        }
        Grads(grads)
    }

    fn acc(&self, grads: &mut [Option<Mat>], v: Var, g: Mat) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => *existing += &g,
            slot => *slot = Some(g),
        }
    }

    fn backward_node(&self, i: usize, g: &Mat, grads: &mut [Option<Mat>]) {
        match &self.nodes[i].op {
            Op::Input | Op::Param => {}
            Op::MatMul(a, b) => {
                if self.rg(*a) {
                    self.acc(grads, *a, g.dot(&self.value(*b).t()));
                }
                if self.rg(*b) {
                    self.acc(grads, *b, self.value(*a).t().dot(g));
                }
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.clone());
            }
            Op::AddRow(a, b) => {
                self.acc(grads, *a, g.clone());
                if self.rg(*b) {
                    self.acc(grads, *b, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
            }
            Op::Scale(a, k) => self.acc(grads, *a, g * *k),
            Op::Gelu(a) => {
                let mut d = self.value(*a).mapv(gelu_grad);
                d *= g;
                self.acc(grads, *a, d);
            }
            Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                if self.rg(*gamma) {
                    self.acc(grads, *gamma, (g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
                if self.rg(*beta) {
                    self.acc(grads, *beta, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
                if self.rg(*x) {
                    let dxhat = g * self.value(*gamma);
                    let d = xhat.ncols() as f64;
                    let mut dx = Mat::zeros(xhat.dim());
                    for r in 0..xhat.nrows() {
                        let dh = dxhat.row(r);
                        let xh = xhat.row(r);
                        let sum_dh = dh.sum();
                        let sum_dh_xh = dh.dot(&xh);
                        let is = inv_std[r];
                        Zip::from(dx.row_mut(r)).and(&dh).and(&xh).for_each(|o, &a, &b| {
                            *o = is / d * (d * a - sum_dh - b * sum_dh_xh);
                        });
                    }
                    self.acc(grads, *x, dx);
                }
            }
            Op::Attention { qkv, heads, probs } => {
                let m = self.value(*qkv);
                let d = m.ncols() / 3;
                let dh = d / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let mut dqkv = Mat::zeros(m.dim());
                for (j, p) in probs.iter().enumerate() {
                    let (qc, kc, vc) = (j * dh, d + j * dh, 2 * d + j * dh);
                    let q = m.slice(s![.., qc..qc + dh]);
                    let k = m.slice(s![.., kc..kc + dh]);
                    let v = m.slice(s![.., vc..vc + dh]);
                    let go = g.slice(s![.., j * dh..(j + 1) * dh]);
                    dqkv.slice_mut(s![.., vc..vc + dh]).assign(&p.t().dot(&go));
                    let dp = go.dot(&v.t());
                    let mut ds = p * &dp;
                    for (mut row, prow) in ds.rows_mut().into_iter().zip(p.rows()) {
                        let inner = row.sum();
                        Zip::from(&mut row).and(&prow).for_each(|o, &pv| *o -= pv * inner);
                    }
                    ds *= scale;
                    dqkv.slice_mut(s![.., qc..qc + dh]).assign(&ds.dot(&k));
                    dqkv.slice_mut(s![.., kc..kc + dh]).assign(&ds.t().dot(&q));
                }
                self.acc(grads, *qkv, dqkv);
            }
            Op::Gather { x, idx } => {
                let mut dx = Mat::zeros(self.value(*x).dim());
                for (r, &src) in idx.iter().enumerate() {
                    let mut row = dx.row_mut(src);
                    row += &g.row(r);
                }
                self.acc(grads, *x, dx);
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.value(p).nrows();
                    if self.rg(p) {
                        self.acc(grads, p, g.slice(s![off..off + n, ..]).to_owned());
                    }
                    off += n;
                }
            }
            Op::Interleave { visible, token, visible_idx, hidden_idx } => {
                if self.rg(*visible) {
                    self.acc(grads, *visible, g.select(Axis(0), visible_idx));
                }
                if self.rg(*token) {
                    let mut dt = Mat::zeros((1, g.ncols()));
                    for &i in hidden_idx {
                        let mut row = dt.row_mut(0);
                        row += &g.row(i);
                    }
                    self.acc(grads, *token, dt);
                }
            }
            Op::Rearrange { x, src } => {
                let dim = self.value(*x).dim();
                let mut flat = vec![0.0; dim.0 * dim.1];
                let gs = g.as_standard_layout();
                for (o, &sidx) in gs.iter().zip(src) {
                    flat[sidx] += *o;
                }
                self.acc(grads, *x, Mat::from_shape_vec(dim, flat).expect("shape"));
            }
            Op::Conv3x3 { x, w, geom, cols } => {
                if self.rg(*w) {
                    self.acc(grads, *w, cols.t().dot(g));
                }
                if self.rg(*x) {
                    let dcols = g.dot(&self.value(*w).t());
                    self.acc(grads, *x, col2im(&dcols, *geom, self.value(*x).ncols()));
                }
            }
            Op::Sum(x) => {
                let k = g[[0, 0]];
                self.acc(grads, *x, Mat::from_elem(self.value(*x).dim(), k));
            }
            Op::Loss { inputs } => {
                let k = g[[0, 0]];
                for (v, dg) in inputs {
                    if self.rg(*v) {
                        self.acc(grads, *v, dg * k);
                    }
                }
            }
        }
    }

    /// Gradients for every parameter leaf reached by the pass.
    pub fn param_grads(&self, grads: &Grads) -> BTreeMap<String, Mat> {
        self.params
            .iter()
            .filter_map(|(name, v)| grads.wrt(*v).map(|g| (name.clone(), g.clone())))
            .collect()
    }
}

fn im2col(x: &Mat, geom: FrameGeom) -> Mat {
    let c = x.ncols();
    let FrameGeom { frames, h, w } = geom;
    let mut cols = Mat::zeros((geom.pixels(), 9 * c));
    for f in 0..frames {
        for y in 0..h {
            for xx in 0..w {
                let p = (f * h + y) * w + xx;
                let mut row = cols.row_mut(p);
                for ky in 0..3 {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for kx in 0..3 {
                        let sx = xx as isize + kx as isize - 1;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        let q = (f * h + sy as usize) * w + sx as usize;
                        let k = ky * 3 + kx;
                        row.slice_mut(s![k * c..(k + 1) * c]).assign(&x.row(q));
                    }
                }
            }
        }
    }
    cols
}

fn col2im(dcols: &Mat, geom: FrameGeom, c: usize) -> Mat {
    let FrameGeom { frames, h, w } = geom;
    let mut dx = Mat::zeros((geom.pixels(), c));
    for f in 0..frames {
        for y in 0..h {
            for xx in 0..w {
                let p = (f * h + y) * w + xx;
                let row = dcols.row(p);
                for ky in 0..3 {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for kx in 0..3 {
                        let sx = xx as isize + kx as isize - 1;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        let q = (f * h + sy as usize) * w + sx as usize;
                        let k = ky * 3 + kx;
                        let mut dst = dx.row_mut(q);
                        dst += &row.slice(s![k * c..(k + 1) * c]);
                    }
                }
            }
        }
    }
    dx
}
