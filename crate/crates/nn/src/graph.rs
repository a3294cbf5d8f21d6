//! Tape-based reverse-mode automatic differentiation over dense matrices.
//!
//! A [`Graph`] records every operation of one forward pass. Each node holds
//! its value as a row-major `rows × cols` matrix; 1-D parameters are single
//! rows. [`Graph::backward`] walks the tape in reverse and returns the
//! gradient of a scalar loss with respect to every node that requires one.
//! Parameter gradients are then folded into a [`ParamStore`] with
//! [`Graph::accumulate_param_grads`].
//!
//! Nodes built only from inputs and frozen parameters do not require
//! gradients and are skipped entirely on the backward pass.

use std::collections::HashMap;
use std::sync::Arc;

use crate::error::{shape_err, NnError, Result};
use crate::gemm::{gemm, View};
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Kinematic tree used by [`Graph::forward_kinematics`]. Joint 0 is the
/// root; every other joint's parent has a smaller index.
#[derive(Clone, Debug)]
pub struct KinematicTree {
    pub parents: Vec<usize>,
    pub offsets: Vec<[f64; 3]>,
}

impl KinematicTree {
    pub fn new(parents: Vec<usize>, offsets: Vec<[f64; 3]>) -> Result<Self> {
        if parents.len() != offsets.len() || parents.is_empty() {
            return Err(shape_err(
                "kinematic_tree",
                format!("{} parents vs {} offsets", parents.len(), offsets.len()),
            ));
        }
        for (j, &p) in parents.iter().enumerate().skip(1) {
            if p >= j {
                return Err(shape_err(
                    "kinematic_tree",
                    format!("joint {j} has parent {p}; parents must precede children"),
                ));
            }
        }
        Ok(Self { parents, offsets })
    }

    pub fn len(&self) -> usize {
        self.parents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.parents.is_empty()
    }
}

enum Op {
    Input,
    Param,
    MatMul(Var, Var),
    Linear { x: Var, w: Var, b: Option<Var> },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    Sigmoid(Var),
    Tanh(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        q_block: usize,
        kv_block: usize,
        probs: Vec<f64>,
    },
    ConcatCols(Vec<Var>),
    SliceCols { x: Var, start: usize },
    ConcatRows(Vec<Var>),
    SliceRows { x: Var, start: usize },
    GatherRows { x: Var, idx: Vec<usize> },
    LstmCell { gates: Var, c_prev: Var },
    Rot6dToMat(Var),
    ForwardKinematics {
        rots: Var,
        trans: Option<Var>,
        tree: Arc<KinematicTree>,
    },
    Sum(Var),
    Mean(Var),
    CosineRows(Var, Var),
}

struct Node {
    rows: usize,
    cols: usize,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

/// Per-node gradients produced by [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<(u64, usize), Var>,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;
const LN_EPS: f64 = 1e-5;
const NORM_EPS: f64 = 1e-12;

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn dims_str(r: usize, c: usize) -> String {
    format!("{r}x{c}")
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

    fn push(&mut self, rows: usize, cols: usize, value: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(rows * cols, value.len());
        self.nodes.push(Node {
            rows,
            cols,
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn dims(&self, v: Var) -> (usize, usize) {
        let n = &self.nodes[v.0];
        (n.rows, n.cols)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::matrix(n.rows, n.cols, n.value.clone()).expect("node dims are consistent")
    }

    /// Constant input; no gradient flows into it.
    pub fn input(&mut self, rows: usize, cols: usize, data: Vec<f64>) -> Result<Var> {
        if rows * cols != data.len() {
            return Err(shape_err(
                "input",
                format!("{} needs {} values, got {}", dims_str(rows, cols), rows * cols, data.len()),
            ));
        }
        Ok(self.push(rows, cols, data, Op::Input, false))
    }

    /// Input whose gradient is tracked (used by gradient checks).
    pub fn variable(&mut self, rows: usize, cols: usize, data: Vec<f64>) -> Result<Var> {
        let v = self.input(rows, cols, data)?;
        self.nodes[v.0].requires_grad = true;
        Ok(v)
    }

    pub fn zeros(&mut self, rows: usize, cols: usize) -> Var {
        self.push(rows, cols, vec![0.0; rows * cols], Op::Input, false)
    }

    /// Brings a stored parameter onto the tape. Repeated calls with the same
    /// name return the same node.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        let idx = store
            .index_of(name)
            .ok_or_else(|| NnError::UnknownParam(name.to_string()))?;
        if let Some(&v) = self.params.get(&(store.id(), idx)) {
            return Ok(v);
        }
        let p = store.by_index(idx);
        let (rows, cols) = p.value.as_matrix_dims();
        let v = self.push(rows, cols, p.value.data().to_vec(), Op::Param, !p.frozen);
        self.params.insert((store.id(), idx), v);
        Ok(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (k2, n) = self.dims(b);
        if k != k2 {
            return Err(shape_err("matmul", format!("{} · {}", dims_str(m, k), dims_str(k2, n))));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a), View::rm(0, k), self.value(b), View::rm(0, n), 0.0, &mut out, View::rm(0, n));
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(m, n, out, Op::MatMul(a, b), rg))
    }

    /// `x · w + b` with `w: in × out` and `b: 1 × out`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (m, k) = self.dims(x);
        let (k2, n) = self.dims(w);
        if k != k2 {
            return Err(shape_err("linear", format!("input {} vs weight {}", dims_str(m, k), dims_str(k2, n))));
        }
        let mut out = vec![0.0; m * n];
        if let Some(b) = b {
            let (br, bc) = self.dims(b);
            if br != 1 || bc != n {
                return Err(shape_err("linear", format!("bias {} vs output width {n}", dims_str(br, bc))));
            }
            let bv = self.value(b);
            for row in out.chunks_mut(n) {
                row.copy_from_slice(bv);
            }
        }
        let beta = if b.is_some() { 1.0 } else { 0.0 };
        gemm(m, k, n, self.value(x), View::rm(0, k), self.value(w), View::rm(0, n), beta, &mut out, View::rm(0, n));
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(m, n, out, Op::Linear { x, w, b }, rg))
    }

    fn same_dims(&self, op: &'static str, a: Var, b: Var) -> Result<(usize, usize)> {
        let da = self.dims(a);
        let db = self.dims(b);
        if da != db {
            return Err(shape_err(op, format!("{} vs {}", dims_str(da.0, da.1), dims_str(db.0, db.1))));
        }
        Ok(da)
    }

    fn zip_op(&mut self, a: Var, b: Var, op: Op, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        let (r, c) = self.same_dims(name, a, b)?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| f(x, y)).collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(r, c, out, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_op(a, b, Op::Add(a, b), "add", |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_op(a, b, Op::Sub(a, b), "sub", |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_op(a, b, Op::Mul(a, b), "mul", |x, y| x * y)
    }

    /// Adds a `1 × cols` row to every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (r, c) = self.dims(x);
        let (rr, rc) = self.dims(row);
        if rr != 1 || rc != c {
            return Err(shape_err("add_row", format!("{} + row {}", dims_str(r, c), dims_str(rr, rc))));
        }
        let rv = self.value(row);
        let out = self
            .value(x)
            .chunks(c)
            .flat_map(|xr| xr.iter().zip(rv).map(|(a, b)| a + b))
            .collect();
        let rg = self.rg(x) || self.rg(row);
        Ok(self.push(r, c, out, Op::AddRow(x, row), rg))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let (r, c) = self.dims(x);
        let out = self.value(x).iter().map(|v| v * s).collect();
        let rg = self.rg(x);
        self.push(r, c, out, Op::Scale(x, s), rg)
    }

    fn map_op(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let (r, c) = self.dims(x);
        let out = self.value(x).iter().map(|&v| f(v)).collect();
        let rg = self.rg(x);
        self.push(r, c, out, op, rg)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        self.map_op(x, Op::Gelu(x), |v| 0.5 * v * (1.0 + (GELU_C * (v + GELU_A * v * v * v)).tanh()))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.map_op(x, Op::Sigmoid(x), sigmoid)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.map_op(x, Op::Tanh(x), f64::tanh)
    }

    /// Row-wise layer normalisation with learned `gain` and `bias` rows.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (r, c) = self.dims(x);
        for (name, p) in [("gain", gain), ("bias", bias)] {
            let d = self.dims(p);
            if d != (1, c) {
                return Err(shape_err("layer_norm", format!("{name} {} for width {c}", dims_str(d.0, d.1))));
            }
        }
        let xv = self.value(x);
        let gv = self.value(gain);
        let bv = self.value(bias);
        let mut xhat = vec![0.0; r * c];
        let mut rstd = vec![0.0; r];
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &xv[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let s = 1.0 / (var + LN_EPS).sqrt();
            rstd[i] = s;
            for j in 0..c {
                let h = (row[j] - mean) * s;
                xhat[i * c + j] = h;
                out[i * c + j] = h * gv[j] + bv[j];
            }
        }
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(
            r,
            c,
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Scaled dot-product attention with `heads` heads. Rows of `q` are split
    /// into independent blocks of `q_block` rows, and rows of `k`/`v` into
    /// blocks of `kv_block`; block `i` of the queries attends only to block
    /// `i` of the keys. Inputs are already projected.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, q_block: usize, kv_block: usize) -> Result<Var> {
        let (qr, d) = self.dims(q);
        let (kr, kd) = self.dims(k);
        let (vr, vd) = self.dims(v);
        if kd != d || vd != d || kr != vr {
            return Err(shape_err(
                "attention",
                format!("q {} k {} v {}", dims_str(qr, d), dims_str(kr, kd), dims_str(vr, vd)),
            ));
        }
        if heads == 0 || d % heads != 0 {
            return Err(shape_err("attention", format!("width {d} not divisible by {heads} heads")));
        }
        if q_block == 0 || kv_block == 0 || qr % q_block != 0 || kr % kv_block != 0 || qr / q_block != kr / kv_block {
            return Err(shape_err(
                "attention",
                format!("blocks: {qr} query rows / {q_block}, {kr} key rows / {kv_block}"),
            ));
        }
        let blocks = qr / q_block;
        let dk = d / heads;
        let scale = 1.0 / (dk as f64).sqrt();
        let (tq, tk) = (q_block, kv_block);
        let mut probs = vec![0.0; blocks * heads * tq * tk];
        let mut out = vec![0.0; qr * d];
        {
            let qv = self.value(q);
            let kvv = self.value(k);
            let vv = self.value(v);
            for bi in 0..blocks {
                for h in 0..heads {
                    let poff = (bi * heads + h) * tq * tk;
                    let qoff = bi * tq * d + h * dk;
                    let koff = bi * tk * d + h * dk;
                    let p = &mut probs[poff..poff + tq * tk];
                    gemm(
                        tq,
                        dk,
                        tk,
                        qv,
                        View { off: qoff, rs: d, cs: 1 },
                        kvv,
                        View { off: koff, rs: 1, cs: d },
                        0.0,
                        p,
                        View::rm(0, tk),
                    );
                    for row in p.chunks_mut(tk) {
                        let mx = row.iter().fold(f64::NEG_INFINITY, |m, &s| m.max(s * scale));
                        let mut z = 0.0;
                        for s in row.iter_mut() {
                            *s = (*s * scale - mx).exp();
                            z += *s;
                        }
                        for s in row.iter_mut() {
                            *s /= z;
                        }
                    }
                    gemm(
                        tq,
                        tk,
                        dk,
                        p,
                        View::rm(0, tk),
                        vv,
                        View { off: koff, rs: d, cs: 1 },
                        0.0,
                        &mut out,
                        View { off: qoff, rs: d, cs: 1 },
                    );
                }
            }
        }
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        Ok(self.push(
            qr,
            d,
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                q_block,
                kv_block,
                probs,
            },
            rg,
        ))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let r = parts.first().map(|&p| self.dims(p).0).ok_or_else(|| shape_err("concat_cols", "no inputs"))?;
        if let Some(&bad) = parts.iter().find(|&&p| self.dims(p).0 != r) {
            return Err(shape_err("concat_cols", format!("row count {} vs {r}", self.dims(bad).0)));
        }
        let c: usize = parts.iter().map(|&p| self.dims(p).1).sum();
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            for &p in parts {
                let pc = self.dims(p).1;
                out.extend_from_slice(&self.value(p)[i * pc..(i + 1) * pc]);
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(r, c, out, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.dims(x);
        if start + len > c || len == 0 {
            return Err(shape_err("slice_cols", format!("[{start}, {}) of width {c}", start + len)));
        }
        let out = self.value(x).chunks(c).flat_map(|row| row[start..start + len].iter().copied()).collect();
        let rg = self.rg(x);
        Ok(self.push(r, len, out, Op::SliceCols { x, start }, rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let c = parts.first().map(|&p| self.dims(p).1).ok_or_else(|| shape_err("concat_rows", "no inputs"))?;
        if let Some(&bad) = parts.iter().find(|&&p| self.dims(p).1 != c) {
            return Err(shape_err("concat_rows", format!("width {} vs {c}", self.dims(bad).1)));
        }
        let r: usize = parts.iter().map(|&p| self.dims(p).0).sum();
        let mut out = Vec::with_capacity(r * c);
        for &p in parts {
            out.extend_from_slice(self.value(p));
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(r, c, out, Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.dims(x);
        if start + len > r || len == 0 {
            return Err(shape_err("slice_rows", format!("[{start}, {}) of {r} rows", start + len)));
        }
        let out = self.value(x)[start * c..(start + len) * c].to_vec();
        let rg = self.rg(x);
        Ok(self.push(len, c, out, Op::SliceRows { x, start }, rg))
    }

    /// Row gather; indices may repeat.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (r, c) = self.dims(x);
        if let Some(&bad) = idx.iter().find(|&&i| i >= r) {
            return Err(shape_err("gather_rows", format!("row {bad} of {r}")));
        }
        if idx.is_empty() {
            return Err(shape_err("gather_rows", "empty index list"));
        }
        let xv = self.value(x);
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            out.extend_from_slice(&xv[i * c..(i + 1) * c]);
        }
        let rg = self.rg(x);
        Ok(self.push(idx.len(), c, out, Op::GatherRows { x, idx: idx.to_vec() }, rg))
    }

    /// One LSTM cell update. `gates` is `B × 4H` in `[input, forget, cell,
    /// output]` order (pre-activation), `c_prev` is `B × H`. Returns `B × 2H`
    /// holding `[h | c]`.
    pub fn lstm_cell(&mut self, gates: Var, c_prev: Var) -> Result<Var> {
        let (b, g4) = self.dims(gates);
        let (cb, h) = self.dims(c_prev);
        if cb != b || g4 != 4 * h {
            return Err(shape_err("lstm_cell", format!("gates {} vs cell {}", dims_str(b, g4), dims_str(cb, h))));
        }
        let gv = self.value(gates);
        let cv = self.value(c_prev);
        let mut out = vec![0.0; b * 2 * h];
        for r in 0..b {
            let gr = &gv[r * g4..(r + 1) * g4];
            for j in 0..h {
                let i = sigmoid(gr[j]);
                let f = sigmoid(gr[h + j]);
                let g = gr[2 * h + j].tanh();
                let o = sigmoid(gr[3 * h + j]);
                let c = f * cv[r * h + j] + i * g;
                out[r * 2 * h + j] = o * c.tanh();
                out[r * 2 * h + h + j] = c;
            }
        }
        let rg = self.rg(gates) || self.rg(c_prev);
        Ok(self.push(b, 2 * h, out, Op::LstmCell { gates, c_prev }, rg))
    }

    /// Gram–Schmidt decoding of packed 6D rotations. Every 6 columns
    /// `[a1 | a2]` (first two matrix columns) become 9 columns holding the
    /// row-major rotation matrix.
    pub fn rot6d_to_mat(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.dims(x);
        if c % 6 != 0 {
            return Err(shape_err("rot6d_to_mat", format!("width {c} is not a multiple of 6")));
        }
        let n = c / 6;
        let xv = self.value(x);
        let mut out = vec![0.0; r * n * 9];
        for blk in 0..r * n {
            let (b1, b2, b3, ..) = gram_schmidt(&xv[blk * 6..blk * 6 + 6]);
            let m = &mut out[blk * 9..blk * 9 + 9];
            for row in 0..3 {
                m[row * 3] = b1[row];
                m[row * 3 + 1] = b2[row];
                m[row * 3 + 2] = b3[row];
            }
        }
        let rg = self.rg(x);
        Ok(self.push(r, n * 9, out, Op::Rot6dToMat(x), rg))
    }

    /// Forward kinematics. `rots` is `F × 9J` (row-major local rotation
    /// matrices), `trans` an optional `F × 3` root translation. Output is
    /// `F × 3J` global joint positions.
    pub fn forward_kinematics(&mut self, rots: Var, trans: Option<Var>, tree: Arc<KinematicTree>) -> Result<Var> {
        let (f, c) = self.dims(rots);
        let j = tree.len();
        if c != 9 * j {
            return Err(shape_err("forward_kinematics", format!("rotation width {c} for {j} joints")));
        }
        if let Some(t) = trans {
            let d = self.dims(t);
            if d != (f, 3) {
                return Err(shape_err("forward_kinematics", format!("translation {} for {f} frames", dims_str(d.0, d.1))));
            }
        }
        let rv = self.value(rots);
        let mut out = vec![0.0; f * 3 * j];
        let mut glob = vec![[0.0; 9]; j];
        for fi in 0..f {
            let t = trans.map(|t| {
                let tv = self.value(t);
                [tv[fi * 3], tv[fi * 3 + 1], tv[fi * 3 + 2]]
            });
            fk_frame(&tree, &rv[fi * 9 * j..(fi + 1) * 9 * j], t, &mut glob, &mut out[fi * 3 * j..(fi + 1) * 3 * j]);
        }
        let rg = self.rg(rots) || trans.is_some_and(|t| self.rg(t));
        Ok(self.push(f, 3 * j, out, Op::ForwardKinematics { rots, trans, tree }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().sum();
        let rg = self.rg(x);
        self.push(1, 1, vec![s], Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.iter().sum::<f64>() / v.len() as f64;
        let rg = self.rg(x);
        self.push(1, 1, vec![s], Op::Mean(x), rg)
    }

    /// Row-wise cosine similarity, `rows × 1`.
    pub fn cosine_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, c) = self.same_dims("cosine_rows", a, b)?;
        let av = self.value(a);
        let bv = self.value(b);
        let out = (0..r)
            .map(|i| {
                let (x, y) = (&av[i * c..(i + 1) * c], &bv[i * c..(i + 1) * c]);
                let (dot, na, nb) = dot_norms(x, y);
                dot / (na * nb)
            })
            .collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(r, 1, out, Op::CosineRows(a, b), rg))
    }

    /// Mean squared difference, a `1 × 1` node.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let sq = self.mul(d, d)?;
        Ok(self.mean(sq))
    }

    /// Mean of `1 - cos(a_i, b_i)` over rows.
    pub fn cosine_distance(&mut self, a: Var, b: Var) -> Result<Var> {
        let c = self.cosine_rows(a, b)?;
        let m = self.mean(c);
        let neg = self.scale(m, -1.0);
        let one = self.input(1, 1, vec![1.0])?;
        self.add(one, neg)
    }

    /// Weighted sum of `1 × 1` terms.
    pub fn weighted_sum(&mut self, terms: &[(f64, Var)]) -> Result<Var> {
        let mut acc: Option<Var> = None;
        for &(w, t) in terms {
            let s = self.scale(t, w);
            acc = Some(match acc {
                Some(a) => self.add(a, s)?,
                None => s,
            });
        }
        acc.ok_or_else(|| shape_err("weighted_sum", "no terms"))
    }

    /// Reverse pass from a `1 × 1` loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let (r, c) = self.dims(loss);
        if (r, c) != (1, 1) {
            return Err(shape_err("backward", format!("loss must be 1x1, got {}", dims_str(r, c))));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Adds this graph's parameter gradients into `store`. Frozen parameters
    /// are skipped.
    pub fn accumulate_param_grads(&self, grads: &Gradients, store: &mut ParamStore) {
        let mut entries: Vec<_> = self.params.iter().filter(|((id, _), _)| *id == store.id()).collect();
        entries.sort_by_key(|((_, idx), _)| *idx);
        for (&(_, idx), &v) in entries {
            if let Some(g) = grads.get(v) {
                store.add_grad(idx, g);
            }
        }
    }

    fn acc(&self, grads: &mut [Option<Vec<f64>>], v: Var, local: &[f64]) {
        match &mut grads[v.0] {
            Some(g) => g.iter_mut().zip(local).for_each(|(a, b)| *a += b),
            slot @ None => *slot = Some(local.to_vec()),
        }
    }

    fn acc_with(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
        let n = self.nodes[v.0].value.len();
        let g = grads[v.0].get_or_insert_with(|| vec![0.0; n]);
        f(g);
    }

    fn backward_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let (rows, cols) = (node.rows, node.cols);
        match &node.op {
            Op::Input | Op::Param => {}
            &Op::MatMul(a, b) => {
                let (m, k) = self.dims(a);
                let n = cols;
                if self.rg(a) {
                    let bv = self.value(b);
                    self.acc_with(grads, a, |ga| {
                        gemm(m, n, k, g, View::rm(0, n), bv, View::rm_t(0, n), 1.0, ga, View::rm(0, k))
                    });
                }
                if self.rg(b) {
                    let av = self.value(a);
                    self.acc_with(grads, b, |gb| {
                        gemm(k, m, n, av, View::rm_t(0, k), g, View::rm(0, n), 1.0, gb, View::rm(0, n))
                    });
                }
            }
            &Op::Linear { x, w, b } => {
                let (m, k) = self.dims(x);
                let n = cols;
                if self.rg(x) {
                    let wv = self.value(w);
                    self.acc_with(grads, x, |gx| {
                        gemm(m, n, k, g, View::rm(0, n), wv, View::rm_t(0, n), 1.0, gx, View::rm(0, k))
                    });
                }
                if self.rg(w) {
                    let xv = self.value(x);
                    self.acc_with(grads, w, |gw| {
                        gemm(k, m, n, xv, View::rm_t(0, k), g, View::rm(0, n), 1.0, gw, View::rm(0, n))
                    });
                }
                if let Some(b) = b.filter(|&b| self.rg(b)) {
                    self.acc_with(grads, b, |gb| {
                        for row in g.chunks(n) {
                            gb.iter_mut().zip(row).for_each(|(a, v)| *a += v);
                        }
                    });
                }
            }
            &Op::Add(a, b) => {
                if self.rg(a) {
                    self.acc(grads, a, g);
                }
                if self.rg(b) {
                    self.acc(grads, b, g);
                }
            }
            &Op::Sub(a, b) => {
                if self.rg(a) {
                    self.acc(grads, a, g);
                }
                if self.rg(b) {
                    self.acc_with(grads, b, |gb| gb.iter_mut().zip(g).for_each(|(a, v)| *a -= v));
                }
            }
            &Op::Mul(a, b) => {
                if self.rg(a) {
                    let bv = self.value(b);
                    let local: Vec<f64> = g.iter().zip(bv).map(|(x, y)| x * y).collect();
                    self.acc(grads, a, &local);
                }
                if self.rg(b) {
                    let av = self.value(a);
                    let local: Vec<f64> = g.iter().zip(av).map(|(x, y)| x * y).collect();
                    self.acc(grads, b, &local);
                }
            }
            &Op::AddRow(x, row) => {
                if self.rg(x) {
                    self.acc(grads, x, g);
                }
                if self.rg(row) {
                    self.acc_with(grads, row, |gr| {
                        for r in g.chunks(cols) {
                            gr.iter_mut().zip(r).for_each(|(a, v)| *a += v);
                        }
                    });
                }
            }
            &Op::Scale(x, s) => {
                self.acc_with(grads, x, |gx| gx.iter_mut().zip(g).for_each(|(a, v)| *a += v * s));
            }
            &Op::Gelu(x) => {
                let xv = self.value(x);
                self.acc_with(grads, x, |gx| {
                    for ((a, &gv), &v) in gx.iter_mut().zip(g).zip(xv) {
                        let t = (GELU_C * (v + GELU_A * v * v * v)).tanh();
                        let d = 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * v * v);
                        *a += gv * d;
                    }
                });
            }
            &Op::Sigmoid(x) => {
                let yv = &node.value;
                self.acc_with(grads, x, |gx| {
                    for ((a, &gv), &y) in gx.iter_mut().zip(g).zip(yv) {
                        *a += gv * y * (1.0 - y);
                    }
                });
            }
            &Op::Tanh(x) => {
                let yv = &node.value;
                self.acc_with(grads, x, |gx| {
                    for ((a, &gv), &y) in gx.iter_mut().zip(g).zip(yv) {
                        *a += gv * (1.0 - y * y);
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let gv = self.value(*gain);
                if self.rg(*gain) {
                    self.acc_with(grads, *gain, |gg| {
                        for (gr, hr) in g.chunks(cols).zip(xhat.chunks(cols)) {
                            for j in 0..cols {
                                gg[j] += gr[j] * hr[j];
                            }
                        }
                    });
                }
                if self.rg(*bias) {
                    self.acc_with(grads, *bias, |gb| {
                        for gr in g.chunks(cols) {
                            gb.iter_mut().zip(gr).for_each(|(a, v)| *a += v);
                        }
                    });
                }
                if self.rg(*x) {
                    let n = cols as f64;
                    self.acc_with(grads, *x, |gx| {
                        for r in 0..rows {
                            let gr = &g[r * cols..(r + 1) * cols];
                            let hr = &xhat[r * cols..(r + 1) * cols];
                            let mut s1 = 0.0;
                            let mut s2 = 0.0;
                            for j in 0..cols {
                                let gh = gr[j] * gv[j];
                                s1 += gh;
                                s2 += gh * hr[j];
                            }
                            for j in 0..cols {
                                let gh = gr[j] * gv[j];
                                gx[r * cols + j] += rstd[r] / n * (n * gh - s1 - hr[j] * s2);
                            }
                        }
                    });
                }
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                q_block,
                kv_block,
                probs,
            } => {
                let (q, k, v) = (*q, *k, *v);
                let d = cols;
                let (tq, tk, heads) = (*q_block, *kv_block, *heads);
                let blocks = rows / tq;
                let dk = d / heads;
                let scale = 1.0 / (dk as f64).sqrt();
                let (kr, _) = self.dims(k);
                let qv = self.value(q);
                let kvv = self.value(k);
                let vv = self.value(v);
                let mut gq = vec![0.0; rows * d];
                let mut gk = vec![0.0; kr * d];
                let mut gvv = vec![0.0; kr * d];
                let mut gp = vec![0.0; tq * tk];
                for bi in 0..blocks {
                    for h in 0..heads {
                        let poff = (bi * heads + h) * tq * tk;
                        let p = &probs[poff..poff + tq * tk];
                        let qoff = bi * tq * d + h * dk;
                        let koff = bi * tk * d + h * dk;
                        let qview = View { off: qoff, rs: d, cs: 1 };
                        let kview = View { off: koff, rs: d, cs: 1 };
                        gemm(tk, tq, dk, p, View::rm_t(0, tk), g, qview, 1.0, &mut gvv, kview);
                        gemm(tq, dk, tk, g, qview, vv, View { off: koff, rs: 1, cs: d }, 0.0, &mut gp, View::rm(0, tk));
                        for (gr, pr) in gp.chunks_mut(tk).zip(p.chunks(tk)) {
                            let dot: f64 = gr.iter().zip(pr).map(|(a, b)| a * b).sum();
                            for (a, &pv) in gr.iter_mut().zip(pr) {
                                *a = pv * (*a - dot) * scale;
                            }
                        }
                        gemm(tq, tk, dk, &gp, View::rm(0, tk), kvv, kview, 1.0, &mut gq, qview);
                        gemm(tk, tq, dk, &gp, View::rm_t(0, tk), qv, qview, 1.0, &mut gk, kview);
                    }
                }
                if self.rg(q) {
                    self.acc(grads, q, &gq);
                }
                if self.rg(k) {
                    self.acc(grads, k, &gk);
                }
                if self.rg(v) {
                    self.acc(grads, v, &gvv);
                }
            }
            Op::ConcatCols(parts) => {
                let mut start = 0;
                for &p in parts {
                    let pc = self.dims(p).1;
                    if self.rg(p) {
                        self.acc_with(grads, p, |gp| {
                            for r in 0..rows {
                                for j in 0..pc {
                                    gp[r * pc + j] += g[r * cols + start + j];
                                }
                            }
                        });
                    }
                    start += pc;
                }
            }
            &Op::SliceCols { x, start } => {
                let xc = self.dims(x).1;
                self.acc_with(grads, x, |gx| {
                    for r in 0..rows {
                        for j in 0..cols {
                            gx[r * xc + start + j] += g[r * cols + j];
                        }
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.nodes[p.0].value.len();
                    if self.rg(p) {
                        self.acc(grads, p, &g[off..off + n]);
                    }
                    off += n;
                }
            }
            &Op::SliceRows { x, start } => {
                self.acc_with(grads, x, |gx| {
                    gx[start * cols..(start + rows) * cols]
                        .iter_mut()
                        .zip(g)
                        .for_each(|(a, v)| *a += v);
                });
            }
            Op::GatherRows { x, idx } => {
                self.acc_with(grads, *x, |gx| {
                    for (r, &src) in idx.iter().enumerate() {
                        for j in 0..cols {
                            gx[src * cols + j] += g[r * cols + j];
                        }
                    }
                });
            }
            &Op::LstmCell { gates, c_prev } => {
                let h = cols / 2;
                let gv = self.value(gates);
                let cv = self.value(c_prev);
                let out = &node.value;
                let mut ggates = vec![0.0; rows * 4 * h];
                let mut gc_prev = vec![0.0; rows * h];
                for r in 0..rows {
                    let gr = &gv[r * 4 * h..(r + 1) * 4 * h];
                    for j in 0..h {
                        let i_ = sigmoid(gr[j]);
                        let f_ = sigmoid(gr[h + j]);
                        let g_ = gr[2 * h + j].tanh();
                        let o_ = sigmoid(gr[3 * h + j]);
                        let c = out[r * 2 * h + h + j];
                        let tc = c.tanh();
                        let gh = g[r * 2 * h + j];
                        let gc = g[r * 2 * h + h + j] + gh * o_ * (1.0 - tc * tc);
                        let base = r * 4 * h;
                        ggates[base + j] = gc * g_ * i_ * (1.0 - i_);
                        ggates[base + h + j] = gc * cv[r * h + j] * f_ * (1.0 - f_);
                        ggates[base + 2 * h + j] = gc * i_ * (1.0 - g_ * g_);
                        ggates[base + 3 * h + j] = gh * tc * o_ * (1.0 - o_);
                        gc_prev[r * h + j] = gc * f_;
                    }
                }
                if self.rg(gates) {
                    self.acc(grads, gates, &ggates);
                }
                if self.rg(c_prev) {
                    self.acc(grads, c_prev, &gc_prev);
                }
            }
            &Op::Rot6dToMat(x) => {
                let xv = self.value(x);
                self.acc_with(grads, x, |gx| {
                    for blk in 0..xv.len() / 6 {
                        let gm = &g[blk * 9..blk * 9 + 9];
                        let col = |c: usize| [gm[c], gm[3 + c], gm[6 + c]];
                        let local = gram_schmidt_backward(&xv[blk * 6..blk * 6 + 6], col(0), col(1), col(2));
                        gx[blk * 6..blk * 6 + 6].iter_mut().zip(local).for_each(|(a, v)| *a += v);
                    }
                });
            }
            Op::ForwardKinematics { rots, trans, tree } => {
                let j = tree.len();
                let rv = self.value(*rots);
                let mut grot = vec![0.0; rows * 9 * j];
                let mut gtrans = vec![0.0; rows * 3];
                let mut glob = vec![[0.0; 9]; j];
                let mut scratch = vec![0.0; 3 * j];
                for fi in 0..rows {
                    let r = &rv[fi * 9 * j..(fi + 1) * 9 * j];
                    fk_frame(tree, r, None, &mut glob, &mut scratch);
                    let gp = &g[fi * 3 * j..(fi + 1) * 3 * j];
                    let (gr, gt) = fk_frame_backward(tree, r, &glob, gp);
                    grot[fi * 9 * j..(fi + 1) * 9 * j].copy_from_slice(&gr);
                    gtrans[fi * 3..fi * 3 + 3].copy_from_slice(&gt);
                }
                if self.rg(*rots) {
                    self.acc(grads, *rots, &grot);
                }
                if let Some(t) = trans.filter(|&t| self.rg(t)) {
                    self.acc(grads, t, &gtrans);
                }
            }
            &Op::Sum(x) => {
                let s = g[0];
                self.acc_with(grads, x, |gx| gx.iter_mut().for_each(|a| *a += s));
            }
            &Op::Mean(x) => {
                let n = self.nodes[x.0].value.len() as f64;
                let s = g[0] / n;
                self.acc_with(grads, x, |gx| gx.iter_mut().for_each(|a| *a += s));
            }
            &Op::CosineRows(a, b) => {
                let (_, c) = self.dims(a);
                let av = self.value(a);
                let bv = self.value(b);
                let mut ga = vec![0.0; av.len()];
                let mut gb = vec![0.0; bv.len()];
                for r in 0..rows {
                    let (x, y) = (&av[r * c..(r + 1) * c], &bv[r * c..(r + 1) * c]);
                    let (dot, na, nb) = dot_norms(x, y);
                    let cos = dot / (na * nb);
                    for k in 0..c {
                        ga[r * c + k] = g[r] * (y[k] / (na * nb) - cos * x[k] / (na * na));
                        gb[r * c + k] = g[r] * (x[k] / (na * nb) - cos * y[k] / (nb * nb));
                    }
                }
                if self.rg(a) {
                    self.acc(grads, a, &ga);
                }
                if self.rg(b) {
                    self.acc(grads, b, &gb);
                }
            }
        }
    }
}

fn dot_norms(x: &[f64], y: &[f64]) -> (f64, f64, f64) {
    let mut dot = 0.0;
    let mut nx = 0.0;
    let mut ny = 0.0;
    for (a, b) in x.iter().zip(y) {
        dot += a * b;
        nx += a * a;
        ny += b * b;
    }
    (dot, nx.sqrt().max(NORM_EPS), ny.sqrt().max(NORM_EPS))
}

type V3 = [f64; 3];

fn dot3(a: V3, b: V3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn cross3(a: V3, b: V3) -> V3 {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

fn axpy3(a: V3, s: f64, b: V3) -> V3 {
    [a[0] + s * b[0], a[1] + s * b[1], a[2] + s * b[2]]
}

fn norm3(a: V3) -> f64 {
    dot3(a, a).sqrt().max(NORM_EPS)
}

/// Returns `(b1, b2, b3, n1, n2)`; columns of the decoded rotation and the
/// two normalisation lengths.
fn gram_schmidt(v: &[f64]) -> (V3, V3, V3, f64, f64) {
    let a1 = [v[0], v[1], v[2]];
    let a2 = [v[3], v[4], v[5]];
    let n1 = norm3(a1);
    let b1 = a1.map(|x| x / n1);
    let u2 = axpy3(a2, -dot3(b1, a2), b1);
    let n2 = norm3(u2);
    let b2 = u2.map(|x| x / n2);
    (b1, b2, cross3(b1, b2), n1, n2)
}

fn gram_schmidt_backward(v: &[f64], g1: V3, g2: V3, g3: V3) -> [f64; 6] {
    let a2 = [v[3], v[4], v[5]];
    let (b1, b2, _, n1, n2) = gram_schmidt(v);
    let mut gb1 = axpy3(g1, 1.0, cross3(b2, g3));
    let gb2 = axpy3(g2, 1.0, cross3(g3, b1));
    // b2 = u2 / |u2|
    let gu2 = axpy3(gb2, -dot3(b2, gb2), b2).map(|x| x / n2);
    // u2 = a2 - (b1 . a2) b1
    let ga2 = axpy3(gu2, -dot3(b1, gu2), b1);
    gb1 = axpy3(gb1, -dot3(b1, a2), gu2);
    gb1 = axpy3(gb1, -dot3(b1, gu2), a2);
    // b1 = a1 / |a1|
    let ga1 = axpy3(gb1, -dot3(b1, gb1), b1).map(|x| x / n1);
    [ga1[0], ga1[1], ga1[2], ga2[0], ga2[1], ga2[2]]
}

fn mat3_mul(a: &[f64; 9], b: &[f64]) -> [f64; 9] {
    let mut out = [0.0; 9];
    for r in 0..3 {
        for c in 0..3 {
            out[r * 3 + c] = a[r * 3] * b[c] + a[r * 3 + 1] * b[3 + c] + a[r * 3 + 2] * b[6 + c];
        }
    }
    out
}

fn mat3_vec(a: &[f64; 9], v: [f64; 3]) -> V3 {
    [
        a[0] * v[0] + a[1] * v[1] + a[2] * v[2],
        a[3] * v[0] + a[4] * v[1] + a[5] * v[2],
        a[6] * v[0] + a[7] * v[1] + a[8] * v[2],
    ]
}

fn fk_frame(tree: &KinematicTree, rots: &[f64], trans: Option<V3>, glob: &mut [[f64; 9]], pos: &mut [f64]) {
    let o0 = tree.offsets[0];
    let t = trans.unwrap_or([0.0; 3]);
    glob[0].copy_from_slice(&rots[0..9]);
    pos[0..3].copy_from_slice(&[o0[0] + t[0], o0[1] + t[1], o0[2] + t[2]]);
    for j in 1..tree.len() {
        let p = tree.parents[j];
        let gp = glob[p];
        glob[j] = mat3_mul(&gp, &rots[j * 9..j * 9 + 9]);
        let d = mat3_vec(&gp, tree.offsets[j]);
        for a in 0..3 {
            pos[j * 3 + a] = pos[p * 3 + a] + d[a];
        }
    }
}

fn fk_frame_backward(tree: &KinematicTree, rots: &[f64], glob: &[[f64; 9]], gpos: &[f64]) -> (Vec<f64>, V3) {
    let j_n = tree.len();
    let mut gglob = vec![[0.0; 9]; j_n];
    let mut gp: Vec<f64> = gpos.to_vec();
    let mut grot = vec![0.0; 9 * j_n];
    for j in (1..j_n).rev() {
        let p = tree.parents[j];
        let o = tree.offsets[j];
        let gpj = [gp[j * 3], gp[j * 3 + 1], gp[j * 3 + 2]];
        for a in 0..3 {
            gp[p * 3 + a] += gpj[a];
        }
        let r = &rots[j * 9..j * 9 + 9];
        let gg = gglob[j];
        let gpar = glob[p];
        let mut add = [0.0; 9];
        for row in 0..3 {
            for col in 0..3 {
                // dG_p += gG_j R_j^T + gP_j o_j^T
                add[row * 3 + col] = gg[row * 3] * r[col * 3]
                    + gg[row * 3 + 1] * r[col * 3 + 1]
                    + gg[row * 3 + 2] * r[col * 3 + 2]
                    + gpj[row] * o[col];
                // dR_j = G_p^T gG_j
                grot[j * 9 + row * 3 + col] =
                    gpar[row] * gg[col] + gpar[3 + row] * gg[3 + col] + gpar[6 + row] * gg[6 + col];
            }
        }
        for (a, b) in gglob[p].iter_mut().zip(add) {
            *a += b;
        }
    }
    grot[0..9].copy_from_slice(&gglob[0]);
    (grot, [gp[0], gp[1], gp[2]])
}
