//! Dynamic reverse-mode tape.
//!
//! Every op appends a node holding its output value and whatever it needs
//! for the backward pass. Nodes only reference earlier nodes, so walking the
//! node list backwards is a reverse topological order.
//!
//! Broadcasting is limited to a right operand whose shape is a suffix of the
//! left operand's shape (a bias row added to every row, for example).

use std::collections::HashMap;

use crate::error::{invalid, mismatch, GradError, Result};
use crate::kernels;
use crate::params::{Gradients, ParamId, ParamStore};
use crate::tensor::Tensor;

/// Score written into attention slots that fall outside a window. Large
/// enough that `exp` underflows to exactly zero, yet finite.
pub const MASKED_SCORE: f32 = -1.0e30;

const LAYERNORM_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f32),
    Concat(Vec<Var>),
    SliceLast {
        a: Var,
        start: usize,
    },
    Transpose(Var),
    Reshape(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f32>,
        rstd: Vec<f64>,
    },
    Gelu(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    Sum(Var),
    Mean(Var),
    L1(Var, Var),
    L2(Var, Var),
    GatherRows {
        table: Var,
        idx: Vec<usize>,
    },
    ShiftRows {
        a: Var,
        offset: isize,
        segment: usize,
    },
    Rotary {
        a: Var,
        positions: Vec<usize>,
        base: f32,
    },
    BandScores {
        q: Var,
        k: Var,
        band: Band,
    },
    BandMix {
        p: Var,
        v: Var,
        band: Band,
    },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// A banded attention pattern over rows grouped into equal segments.
///
/// Row `i` (local index within its segment) sees local rows
/// `[i - behind, i + ahead]` clamped to the segment.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Band {
    pub behind: usize,
    pub ahead: usize,
    pub segment: usize,
}

impl Band {
    pub fn width(&self) -> usize {
        self.behind + self.ahead + 1
    }

    /// Global source row for slot `j` of row `r`, if it is inside the segment.
    #[inline]
    pub fn source(&self, r: usize, j: usize) -> Option<usize> {
        let local = r % self.segment;
        let src = local as isize - self.behind as isize + j as isize;
        if src < 0 || src >= self.segment as isize {
            None
        } else {
            Some(r - local + src as usize)
        }
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
}

fn check(op: &'static str, t: Tensor) -> Result<Tensor> {
    if t.is_finite() {
        Ok(t)
    } else {
        Err(GradError::NonFinite { op })
    }
}

/// Right operand must equal the left shape or be a suffix of it.
fn broadcast_ok(a: &[usize], b: &[usize]) -> bool {
    b.len() <= a.len() && a[a.len() - b.len()..] == *b
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

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    /// Places a parameter on the tape; repeated requests return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.get(id).clone(), Op::Param(id));
        self.params.insert(id, v);
        v
    }

    /// `a[.., k] @ b[k, n]`; leading axes of `a` are treated as a batch.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if bv.rank() != 2 || av.rank() < 1 || av.last_dim() != bv.shape()[0] {
            return Err(mismatch("matmul", av.shape(), bv.shape()));
        }
        let (m, k, n) = (av.rows(), av.last_dim(), bv.shape()[1]);
        let data = kernels::matmul_nn(av.data(), bv.data(), m, k, n);
        let mut shape = av.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        let out = check("matmul", Tensor::from_parts(shape, data))?;
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f32, f32) -> f32,
    ) -> Result<Tensor> {
        let (av, bv) = (self.value(a), self.value(b));
        if !broadcast_ok(av.shape(), bv.shape()) || bv.numel() == 0 {
            return Err(mismatch(name, av.shape(), bv.shape()));
        }
        let bn = bv.numel();
        let bd = bv.data();
        let data = av
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, bd[i % bn]))
            .collect();
        check(name, Tensor::from_parts(av.shape().to_vec(), data))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary("add", a, b, |x, y| x + y)?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary("sub", a, b, |x, y| x - y)?;
        Ok(self.push(out, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary("mul", a, b, |x, y| x * y)?;
        Ok(self.push(out, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, c: f32) -> Result<Var> {
        let out = check("scale", self.value(a).map(|x| x * c))?;
        Ok(self.push(out, Op::Scale(a, c)))
    }

    pub fn concat_last(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(invalid("concat_last", "no inputs"));
        }
        let values: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let lead = &values[0].shape()[..values[0].rank().saturating_sub(1)];
        for v in &values {
            if v.rank() == 0 || &v.shape()[..v.rank() - 1] != lead {
                return Err(mismatch("concat_last", values[0].shape(), v.shape()));
            }
        }
        let out = Tensor::concat_last(&values)?;
        Ok(self.push(out, Op::Concat(parts.to_vec())))
    }

    pub fn slice_last(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let out = self.value(a).slice_last(start, end)?;
        Ok(self.push(out, Op::SliceLast { a, start }))
    }

    /// Transpose of a 2-D tensor.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        if av.rank() != 2 {
            return Err(invalid("transpose", format!("expected rank 2, got {:?}", av.shape())));
        }
        let (r, c) = (av.shape()[0], av.shape()[1]);
        let src = av.data();
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = src[i * c + j];
            }
        }
        let out = Tensor::from_parts(vec![c, r], data);
        Ok(self.push(out, Op::Transpose(a)))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).reshape(shape)?;
        Ok(self.push(out, Op::Reshape(a)))
    }

    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let c = av.last_dim();
        let mut data = Vec::with_capacity(av.numel());
        for r in 0..av.rows() {
            let row = av.row(r);
            let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
            let exps: Vec<f64> = row.iter().map(|&x| (x as f64 - max).exp()).collect();
            let z: f64 = exps.iter().sum();
            data.extend(exps.iter().map(|e| (e / z) as f32));
        }
        debug_assert_eq!(data.len(), av.rows() * c);
        let out = check("softmax", Tensor::from_parts(av.shape().to_vec(), data))?;
        Ok(self.push(out, Op::Softmax(a)))
    }

    /// Normalizes the last axis, then applies `gamma * xhat + beta`.
    pub fn layernorm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let xv = self.value(x);
        let c = xv.last_dim();
        let (gv, bv) = (self.value(gamma), self.value(beta));
        if gv.shape() != [c] || bv.shape() != [c] {
            return Err(mismatch("layernorm", xv.shape(), gv.shape()));
        }
        let rows = xv.rows();
        let mut xhat = Vec::with_capacity(xv.numel());
        let mut rstd = Vec::with_capacity(rows);
        let mut data = Vec::with_capacity(xv.numel());
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().map(|&v| v as f64).sum::<f64>() / c as f64;
            let var = row.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / c as f64;
            let rs = 1.0 / (var + LAYERNORM_EPS).sqrt();
            rstd.push(rs);
            for (j, &v) in row.iter().enumerate() {
                let h = (v as f64 - mean) * rs;
                xhat.push(h as f32);
                data.push((h * gv.data()[j] as f64 + bv.data()[j] as f64) as f32);
            }
        }
        let out = check("layernorm", Tensor::from_parts(xv.shape().to_vec(), data))?;
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
        ))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let out = check(
            "gelu",
            self.value(a).map(|x| {
                let x = x as f64;
                (0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())) as f32
            }),
        )?;
        Ok(self.push(out, Op::Gelu(a)))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let out = check(
            "sigmoid",
            self.value(a).map(|x| (1.0 / (1.0 + (-(x as f64)).exp())) as f32),
        )?;
        Ok(self.push(out, Op::Sigmoid(a)))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let out = check("exp", self.value(a).map(f32::exp))?;
        Ok(self.push(out, Op::Exp(a)))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        let out = check("log", self.value(a).map(f32::ln))?;
        Ok(self.push(out, Op::Log(a)))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let out = check("sum", Tensor::scalar(self.value(a).sum() as f32))?;
        Ok(self.push(out, Op::Sum(a)))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        if av.numel() == 0 {
            return Err(invalid("mean", "empty tensor"));
        }
        let out = check("mean", Tensor::scalar(av.mean() as f32))?;
        Ok(self.push(out, Op::Mean(a)))
    }

    fn pairwise_mean(&self, name: &'static str, a: Var, b: Var, f: impl Fn(f64) -> f64) -> Result<Tensor> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() || av.numel() == 0 {
            return Err(mismatch(name, av.shape(), bv.shape()));
        }
        let total: f64 = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(&x, &y)| f(x as f64 - y as f64))
            .sum();
        check(name, Tensor::scalar((total / av.numel() as f64) as f32))
    }

    /// Mean absolute error.
    pub fn l1_loss(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.pairwise_mean("l1_loss", a, b, f64::abs)?;
        Ok(self.push(out, Op::L1(a, b)))
    }

    /// Mean squared error.
    pub fn l2_loss(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.pairwise_mean("l2_loss", a, b, |d| d * d)?;
        Ok(self.push(out, Op::L2(a, b)))
    }

    /// Row gather from a 2-D table (embedding lookup, upsampling by index).
    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        if tv.rank() != 2 {
            return Err(invalid("gather_rows", "table must be 2-D"));
        }
        let (rows, c) = (tv.shape()[0], tv.shape()[1]);
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            if i >= rows {
                return Err(invalid("gather_rows", format!("index {i} >= {rows}")));
            }
            data.extend_from_slice(tv.row(i));
        }
        let out = Tensor::from_parts(vec![idx.len(), c], data);
        Ok(self.push(
            out,
            Op::GatherRows {
                table,
                idx: idx.to_vec(),
            },
        ))
    }

    /// `out[i] = a[i - offset]` within each segment of rows, zero-filled.
    pub fn shift_rows(&mut self, a: Var, offset: isize, segment: usize) -> Result<Var> {
        let av = self.value(a);
        let (rows, c) = (av.rows(), av.last_dim());
        if segment == 0 || rows % segment != 0 {
            return Err(invalid("shift_rows", format!("{rows} rows, segment {segment}")));
        }
        let mut data = vec![0.0; rows * c];
        for r in 0..rows {
            let local = (r % segment) as isize;
            let src = local - offset;
            if (0..segment as isize).contains(&src) {
                let s = r - local as usize + src as usize;
                data[r * c..(r + 1) * c].copy_from_slice(av.row(s));
            }
        }
        let out = Tensor::from_parts(av.shape().to_vec(), data);
        Ok(self.push(out, Op::ShiftRows { a, offset, segment }))
    }

    /// Rotary position rotation of consecutive `(2i, 2i+1)` pairs.
    /// `positions[r]` is the position of row `r`.
    pub fn rotary(&mut self, a: Var, positions: &[usize], base: f32) -> Result<Var> {
        let av = self.value(a);
        let d = av.last_dim();
        if d % 2 != 0 {
            return Err(invalid("rotary", format!("odd head dim {d}")));
        }
        if positions.len() != av.rows() {
            return Err(mismatch("rotary", av.shape(), &[positions.len()]));
        }
        let mut data = av.data().to_vec();
        rotate_rows(&mut data, d, positions, base, 1.0);
        let out = Tensor::from_parts(av.shape().to_vec(), data);
        Ok(self.push(
            out,
            Op::Rotary {
                a,
                positions: positions.to_vec(),
                base,
            },
        ))
    }

    /// Dot products of each query row with the key rows inside its band.
    /// Output `[rows, band.width()]`; out-of-segment slots hold [`MASKED_SCORE`].
    pub fn band_scores(&mut self, q: Var, k: Var, band: Band) -> Result<Var> {
        let (qv, kv) = (self.value(q), self.value(k));
        if qv.shape() != kv.shape() || qv.rank() != 2 {
            return Err(mismatch("band_scores", qv.shape(), kv.shape()));
        }
        let rows = qv.rows();
        if band.segment == 0 || rows % band.segment != 0 {
            return Err(invalid("band_scores", format!("{rows} rows, segment {}", band.segment)));
        }
        let w = band.width();
        let mut data = vec![MASKED_SCORE; rows * w];
        for r in 0..rows {
            let qr = qv.row(r);
            for j in 0..w {
                if let Some(s) = band.source(r, j) {
                    data[r * w + j] = dot(qr, kv.row(s)) as f32;
                }
            }
        }
        let out = check("band_scores", Tensor::from_parts(vec![rows, w], data))?;
        Ok(self.push(out, Op::BandScores { q, k, band }))
    }

    /// Weighted sum of value rows inside each row's band: `out[r] = Σ_j p[r,j] v[src(r,j)]`.
    pub fn band_mix(&mut self, p: Var, v: Var, band: Band) -> Result<Var> {
        let (pv, vv) = (self.value(p), self.value(v));
        let rows = vv.rows();
        if pv.shape() != [rows, band.width()] || vv.rank() != 2 {
            return Err(mismatch("band_mix", pv.shape(), vv.shape()));
        }
        if band.segment == 0 || rows % band.segment != 0 {
            return Err(invalid("band_mix", format!("{rows} rows, segment {}", band.segment)));
        }
        let (w, c) = (band.width(), vv.last_dim());
        let mut acc = vec![0.0f64; c];
        let mut data = Vec::with_capacity(rows * c);
        for r in 0..rows {
            acc.iter_mut().for_each(|a| *a = 0.0);
            for j in 0..w {
                if let Some(s) = band.source(r, j) {
                    let weight = pv.data()[r * w + j] as f64;
                    for (a, &x) in acc.iter_mut().zip(vv.row(s)) {
                        *a += weight * x as f64;
                    }
                }
            }
            data.extend(acc.iter().map(|&a| a as f32));
        }
        let out = check("band_mix", Tensor::from_parts(vec![rows, c], data))?;
        Ok(self.push(out, Op::BandMix { p, v, band }))
    }

    /// Reverse pass from a scalar loss; returns gradients for every
    /// parameter placed on this tape.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(GradError::NotScalar(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        let mut out = Gradients::with_capacity(0);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {}
                Op::Param(id) => out.put(*id, Tensor::from_parts(node.value.shape().to_vec(), g)),
                Op::MatMul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let (m, k, n) = (av.rows(), av.last_dim(), bv.shape()[1]);
                    acc(&mut grads, *a, kernels::matmul_nt(&g, bv.data(), m, n, k));
                    acc(&mut grads, *b, kernels::matmul_tn(av.data(), &g, m, k, n));
                }
                Op::Add(a, b) => {
                    let bn = self.value(*b).numel();
                    acc(&mut grads, *b, reduce_to(&g, bn));
                    acc(&mut grads, *a, g);
                }
                Op::Sub(a, b) => {
                    let bn = self.value(*b).numel();
                    acc(&mut grads, *b, reduce_to(&g, bn).into_iter().map(|x| -x).collect());
                    acc(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                    let bn = bv.len();
                    let mut gb = vec![0.0f64; bn];
                    let mut ga = Vec::with_capacity(g.len());
                    for (idx, &gi) in g.iter().enumerate() {
                        ga.push(gi * bv[idx % bn]);
                        gb[idx % bn] += gi as f64 * av[idx] as f64;
                    }
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb.into_iter().map(|x| x as f32).collect());
                }
                Op::Scale(a, c) => acc(&mut grads, *a, g.into_iter().map(|x| x * c).collect()),
                Op::Concat(parts) => {
                    let width = node.value.last_dim();
                    let rows = node.value.rows();
                    let mut offset = 0;
                    for p in parts {
                        let pw = self.value(*p).last_dim();
                        let mut gp = Vec::with_capacity(rows * pw);
                        for r in 0..rows {
                            gp.extend_from_slice(&g[r * width + offset..r * width + offset + pw]);
                        }
                        acc(&mut grads, *p, gp);
                        offset += pw;
                    }
                }
                Op::SliceLast { a, start } => {
                    let av = self.value(*a);
                    let (rows, c) = (av.rows(), av.last_dim());
                    let w = node.value.last_dim();
                    let mut ga = vec![0.0; rows * c];
                    for r in 0..rows {
                        ga[r * c + start..r * c + start + w].copy_from_slice(&g[r * w..(r + 1) * w]);
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::Transpose(a) => {
                    let (c, r) = (node.value.shape()[0], node.value.shape()[1]);
                    let mut ga = vec![0.0; r * c];
                    for i in 0..c {
                        for j in 0..r {
                            ga[j * c + i] = g[i * r + j];
                        }
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::Reshape(a) => acc(&mut grads, *a, g),
                Op::Softmax(a) => {
                    let y = &node.value;
                    let c = y.last_dim();
                    let mut ga = Vec::with_capacity(g.len());
                    for r in 0..y.rows() {
                        let yr = y.row(r);
                        let gr = &g[r * c..(r + 1) * c];
                        let dot: f64 = yr.iter().zip(gr).map(|(&a, &b)| a as f64 * b as f64).sum();
                        ga.extend(yr.iter().zip(gr).map(|(&yv, &gv)| (yv as f64 * (gv as f64 - dot)) as f32));
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    rstd,
                } => {
                    let gv = self.value(*gamma).data();
                    let c = gv.len();
                    let rows = rstd.len();
                    let mut dgamma = vec![0.0f64; c];
                    let mut dbeta = vec![0.0f64; c];
                    let mut dx = Vec::with_capacity(rows * c);
                    let mut dxhat = vec![0.0f64; c];
                    for r in 0..rows {
                        let gr = &g[r * c..(r + 1) * c];
                        let hr = &xhat[r * c..(r + 1) * c];
                        let mut mean_d = 0.0;
                        let mut mean_dh = 0.0;
                        for j in 0..c {
                            dgamma[j] += gr[j] as f64 * hr[j] as f64;
                            dbeta[j] += gr[j] as f64;
                            dxhat[j] = gr[j] as f64 * gv[j] as f64;
                            mean_d += dxhat[j];
                            mean_dh += dxhat[j] * hr[j] as f64;
                        }
                        mean_d /= c as f64;
                        mean_dh /= c as f64;
                        for j in 0..c {
                            dx.push((rstd[r] * (dxhat[j] - mean_d - hr[j] as f64 * mean_dh)) as f32);
                        }
                    }
                    acc(&mut grads, *x, dx);
                    acc(&mut grads, *gamma, dgamma.into_iter().map(|v| v as f32).collect());
                    acc(&mut grads, *beta, dbeta.into_iter().map(|v| v as f32).collect());
                }
                Op::Gelu(a) => {
                    let av = self.value(*a).data();
                    let ga = av
                        .iter()
                        .zip(&g)
                        .map(|(&x, &gi)| {
                            let x = x as f64;
                            let th = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
                            let d = 0.5 * (1.0 + th)
                                + 0.5 * x * (1.0 - th * th) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
                            (gi as f64 * d) as f32
                        })
                        .collect();
                    acc(&mut grads, *a, ga);
                }
                Op::Sigmoid(a) => {
                    let ga = node.value.data().iter().zip(&g).map(|(&y, &gi)| gi * y * (1.0 - y)).collect();
                    acc(&mut grads, *a, ga);
                }
                Op::Exp(a) => {
                    let ga = node.value.data().iter().zip(&g).map(|(&y, &gi)| gi * y).collect();
                    acc(&mut grads, *a, ga);
                }
                Op::Log(a) => {
                    let ga = self.value(*a).data().iter().zip(&g).map(|(&x, &gi)| gi / x).collect();
                    acc(&mut grads, *a, ga);
                }
                Op::Sum(a) => {
                    let n = self.value(*a).numel();
                    acc(&mut grads, *a, vec![g[0]; n]);
                }
                Op::Mean(a) => {
                    let n = self.value(*a).numel();
                    acc(&mut grads, *a, vec![(g[0] as f64 / n as f64) as f32; n]);
                }
                Op::L1(a, b) => {
                    let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                    let s = g[0] as f64 / av.len() as f64;
                    let ga: Vec<f32> = av
                        .iter()
                        .zip(bv)
                        .map(|(&x, &y)| {
                            let d = x - y;
                            if d > 0.0 {
                                s as f32
                            } else if d < 0.0 {
                                -s as f32
                            } else {
                                0.0
                            }
                        })
                        .collect();
                    acc(&mut grads, *b, ga.iter().map(|x| -x).collect());
                    acc(&mut grads, *a, ga);
                }
                Op::L2(a, b) => {
                    let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                    let s = 2.0 * g[0] as f64 / av.len() as f64;
                    let ga: Vec<f32> = av
                        .iter()
                        .zip(bv)
                        .map(|(&x, &y)| (s * (x as f64 - y as f64)) as f32)
                        .collect();
                    acc(&mut grads, *b, ga.iter().map(|x| -x).collect());
                    acc(&mut grads, *a, ga);
                }
                Op::GatherRows { table, idx } => {
                    let tv = self.value(*table);
                    let c = tv.last_dim();
                    let mut gt = vec![0.0f64; tv.numel()];
                    for (r, &i) in idx.iter().enumerate() {
                        for j in 0..c {
                            gt[i * c + j] += g[r * c + j] as f64;
                        }
                    }
                    acc(&mut grads, *table, gt.into_iter().map(|v| v as f32).collect());
                }
                Op::ShiftRows { a, offset, segment } => {
                    let c = node.value.last_dim();
                    let rows = node.value.rows();
                    let mut ga = vec![0.0; rows * c];
                    for r in 0..rows {
                        let local = (r % segment) as isize;
                        let src = local - offset;
                        if (0..*segment as isize).contains(&src) {
                            let s = r - local as usize + src as usize;
                            ga[s * c..(s + 1) * c].copy_from_slice(&g[r * c..(r + 1) * c]);
                        }
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::Rotary { a, positions, base } => {
                    let mut ga = g;
                    rotate_rows(&mut ga, node.value.last_dim(), positions, *base, -1.0);
                    acc(&mut grads, *a, ga);
                }
                Op::BandScores { q, k, band } => {
                    let (qv, kv) = (self.value(*q), self.value(*k));
                    let (rows, c, w) = (qv.rows(), qv.last_dim(), band.width());
                    let mut gq = vec![0.0f64; rows * c];
                    let mut gk = vec![0.0f64; rows * c];
                    for r in 0..rows {
                        for j in 0..w {
                            let Some(s) = band.source(r, j) else { continue };
                            let gs = g[r * w + j] as f64;
                            if gs == 0.0 {
                                continue;
                            }
                            let (qr, ks) = (qv.row(r), kv.row(s));
                            for t in 0..c {
                                gq[r * c + t] += gs * ks[t] as f64;
                                gk[s * c + t] += gs * qr[t] as f64;
                            }
                        }
                    }
                    acc(&mut grads, *q, gq.into_iter().map(|v| v as f32).collect());
                    acc(&mut grads, *k, gk.into_iter().map(|v| v as f32).collect());
                }
                Op::BandMix { p, v, band } => {
                    let (pv, vv) = (self.value(*p), self.value(*v));
                    let (rows, c, w) = (vv.rows(), vv.last_dim(), band.width());
                    let mut gp = vec![0.0f32; rows * w];
                    let mut gv = vec![0.0f64; rows * c];
                    for r in 0..rows {
                        let gr = &g[r * c..(r + 1) * c];
                        for j in 0..w {
                            let Some(s) = band.source(r, j) else { continue };
                            gp[r * w + j] = dot(gr, vv.row(s)) as f32;
                            let weight = pv.data()[r * w + j] as f64;
                            for t in 0..c {
                                gv[s * c + t] += weight * gr[t] as f64;
                            }
                        }
                    }
                    acc(&mut grads, *p, gp);
                    acc(&mut grads, *v, gv.into_iter().map(|x| x as f32).collect());
                }
            }
        }

        for (&id, &var) in &self.params {
            if var.0 <= loss.0 && out.get(id).is_none() {
                log::debug!("parameter {:?} is disconnected from the loss", id);
                out.put(id, Tensor::zeros(self.value(var).shape()));
            }
        }
        Ok(out)
    }
}

fn acc(grads: &mut [Option<Vec<f32>>], v: Var, g: Vec<f32>) {
    match &mut grads[v.0] {
        Some(existing) => existing.iter_mut().zip(g).for_each(|(e, x)| *e += x),
        slot @ None => *slot = Some(g),
    }
}

/// Sums a broadcast gradient back down to `n` trailing elements.
fn reduce_to(g: &[f32], n: usize) -> Vec<f32> {
    if g.len() == n {
        return g.to_vec();
    }
    let mut out = vec![0.0f64; n];
    for (i, &x) in g.iter().enumerate() {
        out[i % n] += x as f64;
    }
    out.into_iter().map(|v| v as f32).collect()
}

fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum()
}

/// Rotates each `(2i, 2i+1)` pair of every row by `sign * pos * base^(-2i/d)`.
fn rotate_rows(data: &mut [f32], d: usize, positions: &[usize], base: f32, sign: f64) {
    let half = d / 2;
    let freqs: Vec<f64> = (0..half)
        .map(|i| (base as f64).powf(-2.0 * i as f64 / d as f64))
        .collect();
    for (r, &pos) in positions.iter().enumerate() {
        let row = &mut data[r * d..(r + 1) * d];
        for (i, &f) in freqs.iter().enumerate() {
            let theta = sign * pos as f64 * f;
            let (s, c) = theta.sin_cos();
            let (x0, x1) = (row[2 * i] as f64, row[2 * i + 1] as f64);
            row[2 * i] = (x0 * c - x1 * s) as f32;
            row[2 * i + 1] = (x0 * s + x1 * c) as f32;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f32]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2, 2], &[1., 2., 3., 4.]));
        let i = tape.constant(t(&[2, 2], &[1., 0., 0., 1.]));
        let y = tape.matmul(a, i).unwrap();
        assert_eq!(tape.value(y).data(), &[1., 2., 3., 4.]);
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2], &[0., 0.]));
        let y = tape.softmax(a).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, 0.5]);
    }

    #[test]
    fn l1_of_identical_inputs_is_zero() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[3], &[1., -2., 3.]));
        let l = tape.l1_loss(a, a).unwrap();
        assert_eq!(tape.value(l).item(), 0.0);
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut store = ParamStore::new();
        let id = store.insert("w", t(&[2, 3], &[0.5; 6])).unwrap();
        let mut tape = Tape::new();
        let w = tape.param(&store, id);
        let l = tape.sum(w).unwrap();
        let g = tape.backward(l).unwrap();
        assert_eq!(g.get(id).unwrap().data(), &[1.0; 6]);
    }

    #[test]
    fn l2_gradient_at_zero_weights() {
        // loss = mean((x w - y)^2) at w = 0  =>  dL/dw = -2 x^T y / size
        let x = t(&[3, 2], &[1., 2., 3., 4., 5., 6.]);
        let y = t(&[3, 1], &[1., -1., 2.]);
        let mut store = ParamStore::new();
        let id = store.insert("w", Tensor::zeros(&[2, 1])).unwrap();
        let mut tape = Tape::new();
        let w = tape.param(&store, id);
        let xv = tape.constant(x.clone());
        let yv = tape.constant(y.clone());
        let pred = tape.matmul(xv, w).unwrap();
        let l = tape.l2_loss(pred, yv).unwrap();
        let g = tape.backward(l).unwrap();
        let want = [-2.0 * (1. - 3. + 10.) / 3.0, -2.0 * (2. - 4. + 12.) / 3.0];
        for (got, want) in g.get(id).unwrap().data().iter().zip(want) {
            assert!((got - want).abs() < 1e-5, "{got} vs {want}");
        }
    }

    #[test]
    fn backward_requires_scalar() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2], &[1., 2.]));
        assert!(matches!(tape.backward(a), Err(GradError::NotScalar(_))));
    }

    #[test]
    fn log_of_zero_is_non_finite_error() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[1], &[0.]));
        assert!(matches!(tape.log(a), Err(GradError::NonFinite { .. })));
    }

    #[test]
    fn broadcast_only_over_leading_axes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let bias = tape.constant(t(&[3], &[1., 2., 3.]));
        let bad = tape.constant(Tensor::zeros(&[2]));
        let y = tape.add(a, bias).unwrap();
        assert_eq!(tape.value(y).data(), &[1., 2., 3., 1., 2., 3.]);
        assert!(matches!(tape.add(a, bad), Err(GradError::ShapeMismatch { .. })));
    }

    #[test]
    fn disconnected_parameter_gets_zero_gradient() {
        let mut store = ParamStore::new();
        let used = store.insert("used", Tensor::ones(&[2])).unwrap();
        let unused = store.insert("unused", Tensor::ones(&[3])).unwrap();
        let mut tape = Tape::new();
        let u = tape.param(&store, used);
        let _ = tape.param(&store, unused);
        let l = tape.sum(u).unwrap();
        let g = tape.backward(l).unwrap();
        assert_eq!(g.get(unused).unwrap().data(), &[0.0; 3]);
    }

    #[test]
    fn band_source_clamps_to_segment() {
        let band = Band { behind: 2, ahead: 1, segment: 4 };
        // row 4 is local 0 of the second segment
        assert_eq!(band.source(4, 0), None);
        assert_eq!(band.source(4, 2), Some(4));
        assert_eq!(band.source(4, 3), Some(5));
        assert_eq!(band.source(7, 3), None);
    }
}
