//! Minimal tensor tape for reverse-mode differentiation.
//!
//! Every operation records its inputs on a [`Tape`]; [`Tape::backward`]
//! walks the tape in reverse and applies each operation's hand-derived
//! adjoint. Tensors are dense, row-major `f64`. Matrices are `[rows, cols]`;
//! "row" ops (linear, layer norm, softmax groups) act on the last axis.

use std::rc::Rc;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn scalar(x: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![x],
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "matrix {rows}x{cols}");
        Self {
            shape: vec![rows, cols],
            data,
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rows(&self) -> usize {
        if self.shape.len() < 2 {
            1
        } else {
            self.shape[..self.shape.len() - 1].iter().product()
        }
    }

    pub fn cols(&self) -> usize {
        *self.shape.last().unwrap_or(&1)
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

/// Sampling slot of a deformable-attention query: which value map, which
/// offset/weight group, and which row of the reference tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Slot {
    pub map: usize,
    pub group: usize,
    pub reference: usize,
}

/// Static layout of a deformable attention call.
#[derive(Debug, Clone)]
pub struct DeformLayout {
    pub heads: usize,
    pub groups: usize,
    pub points: usize,
    /// `(height, width)` of each value map.
    pub map_dims: Vec<(usize, usize)>,
    /// Visible slots per query; output is averaged over them.
    pub slots: Vec<Vec<Slot>>,
}

enum Op {
    Leaf,
    Linear { x: Var, w: Var, b: Option<Var> },
    MatMul { a: Var, b: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    AddRow { x: Var, row: Var },
    Scale { x: Var, s: f64 },
    MaskAdd { x: Var, mask: Vec<f64> },
    Gelu { x: Var },
    Sigmoid { x: Var },
    Tanh { x: Var },
    SoftmaxGroups { x: Var, group: usize },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    MeanRows { x: Var },
    Sum { x: Var },
    GatherRows { x: Var, idx: Vec<usize> },
    ReplaceRows { base: Var, rows: Var, idx: Vec<usize> },
    Reshape { x: Var },
    Bilinear { map: Var, locs: Var, dims: (usize, usize) },
    Deform { values: Vec<Var>, refs: Var, offsets: Var, attn: Var, layout: Rc<DeformLayout> },
    Mha { q: Var, k: Var, v: Var, heads: usize, probs: Vec<f64> },
    ScalarJacobian { x: Var, jac: Vec<f64> },
    BoxDecode { raw: Var, ref_logit: Var },
    Bce { p: Var, target: Vec<f64>, eps: f64 },
    Focal { logits: Var, targets: Vec<Option<usize>>, gamma: f64, alpha: f64, norm: f64 },
    L1 { a: Var, target: Vec<f64> },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Recorded computation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients indexed by tape variable.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient of `v`, zeros when no path reached it.
    pub fn get_or_zero(&self, v: Var, len: usize) -> Vec<f64> {
        self.get(v).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; len])
    }
}

const LN_EPS: f64 = 1e-5;
const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_K * (x + GELU_C * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_K * (x + GELU_C * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_K * (1.0 + 3.0 * GELU_C * x * x)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn logit(p: f64) -> f64 {
    let p = p.clamp(1e-6, 1.0 - 1e-6);
    (p / (1.0 - p)).ln()
}

/// Bilinear lookup in a channel-last `[h*w, c]` map at continuous pixel
/// coordinates (`x` along width, pixel centers at integers). Corners outside
/// the map read zero. Adds `scale * value` into `out` for channels
/// `c0..c0+out.len()`.
fn bilinear_accumulate(map: &[f64], dims: (usize, usize), stride: usize, c0: usize, x: f64, y: f64, scale: f64, out: &mut [f64]) {
    let (h, w) = dims;
    let x0 = x.floor();
    let y0 = y.floor();
    let (fx, fy) = (x - x0, y - y0);
    let (x0, y0) = (x0 as i64, y0 as i64);
    let corners = [
        (x0, y0, (1.0 - fx) * (1.0 - fy)),
        (x0 + 1, y0, fx * (1.0 - fy)),
        (x0, y0 + 1, (1.0 - fx) * fy),
        (x0 + 1, y0 + 1, fx * fy),
    ];
    for (cx, cy, wgt) in corners {
        if cx < 0 || cy < 0 || cx >= w as i64 || cy >= h as i64 || wgt == 0.0 {
            continue;
        }
        let base = (cy as usize * w + cx as usize) * stride + c0;
        let s = scale * wgt;
        let len = out.len();
        for (o, v) in out.iter_mut().zip(&map[base..base + len]) {
            *o += s * v;
        }
    }
}

/// Adjoint of [`bilinear_accumulate`]: scatters `scale * gout` into the map
/// gradient and returns `(d/dx, d/dy)` of `scale * <gout, sample>`.
#[allow(clippy::too_many_arguments)]
fn bilinear_backward(
    map: &[f64],
    gmap: Option<&mut [f64]>,
    dims: (usize, usize),
    stride: usize,
    c0: usize,
    x: f64,
    y: f64,
    scale: f64,
    gout: &[f64],
) -> (f64, f64) {
    let (h, w) = dims;
    let x0f = x.floor();
    let y0f = y.floor();
    let (fx, fy) = (x - x0f, y - y0f);
    let (x0, y0) = (x0f as i64, y0f as i64);
    // (corner, weight, d weight/dx, d weight/dy)
    let corners = [
        (x0, y0, (1.0 - fx) * (1.0 - fy), -(1.0 - fy), -(1.0 - fx)),
        (x0 + 1, y0, fx * (1.0 - fy), 1.0 - fy, -fx),
        (x0, y0 + 1, (1.0 - fx) * fy, -fy, 1.0 - fx),
        (x0 + 1, y0 + 1, fx * fy, fy, fx),
    ];
    let mut gmap = gmap;
    let (mut gx, mut gy) = (0.0, 0.0);
    for (cx, cy, wgt, dwx, dwy) in corners {
        if cx < 0 || cy < 0 || cx >= w as i64 || cy >= h as i64 {
            continue;
        }
        let base = (cy as usize * w + cx as usize) * stride + c0;
        let mut dotv = 0.0;
        for (g, v) in gout.iter().zip(&map[base..base + gout.len()]) {
            dotv += g * v;
        }
        gx += scale * dwx * dotv;
        gy += scale * dwy * dotv;
        if let Some(gm) = gmap.as_deref_mut() {
            let s = scale * wgt;
            for (d, g) in gm[base..base + gout.len()].iter_mut().zip(gout) {
                *d += s * g;
            }
        }
    }
    (gx, gy)
}

/// Normalized `(u, v)` to pixel coordinates with pixel centers at
/// `(i + 0.5) / size`.
#[inline]
fn to_pixel(u: f64, v: f64, dims: (usize, usize)) -> (f64, f64) {
    (u * dims.1 as f64 - 0.5, v * dims.0 as f64 - 0.5)
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Differentiable input.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let (xv, wv) = (self.value(x), self.value(w));
        let (n, k, m) = (xv.rows(), xv.cols(), wv.cols());
        assert_eq!(wv.rows(), k, "linear: input width {k} vs weight {:?}", wv.shape);
        let mut out = vec![0.0; n * m];
        matmul_into(&xv.data, &wv.data, &mut out, n, k, m);
        if let Some(b) = b {
            let bv = &self.value(b).data;
            assert_eq!(bv.len(), m, "linear bias");
            for r in 0..n {
                for (o, bb) in out[r * m..(r + 1) * m].iter_mut().zip(bv) {
                    *o += bb;
                }
            }
        }
        let mut shape = xv.shape.clone();
        *shape.last_mut().unwrap() = m;
        let ng = self.ng(x) || self.ng(w) || b.map_or(false, |b| self.ng(b));
        self.push(Tensor { shape, data: out }, Op::Linear { x, w, b }, ng)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let (n, k, m) = (av.rows(), av.cols(), bv.cols());
        assert_eq!(bv.rows(), k, "matmul inner dims");
        let mut out = vec![0.0; n * m];
        matmul_into(&av.data, &bv.data, &mut out, n, k, m);
        let ng = self.ng(a) || self.ng(b);
        self.push(Tensor::matrix(n, m, out), Op::MatMul { a, b }, ng)
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.data.len(), bv.data.len(), "elementwise shapes {:?} vs {:?}", av.shape, bv.shape);
        let data = av.data.iter().zip(&bv.data).map(|(x, y)| f(*x, *y)).collect();
        let shape = av.shape.clone();
        let ng = self.ng(a) || self.ng(b);
        self.push(Tensor { shape, data }, op, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x + y, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x - y, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x * y, Op::Mul { a, b })
    }

    /// Adds a length-`c` row to every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Var {
        let (xv, rv) = (self.value(x), self.value(row));
        let c = xv.cols();
        assert_eq!(rv.len(), c, "add_row width");
        let mut data = xv.data.clone();
        for chunk in data.chunks_mut(c) {
            for (d, r) in chunk.iter_mut().zip(&rv.data) {
                *d += r;
            }
        }
        let shape = xv.shape.clone();
        let ng = self.ng(x) || self.ng(row);
        self.push(Tensor { shape, data }, Op::AddRow { x, row }, ng)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let xv = self.value(x);
        let t = Tensor {
            shape: xv.shape.clone(),
            data: xv.data.iter().map(|v| v * s).collect(),
        };
        let ng = self.ng(x);
        self.push(t, Op::Scale { x, s }, ng)
    }

    /// `x * mask + offset` with constant `mask` and `offset`.
    pub fn mask_add(&mut self, x: Var, mask: Vec<f64>, offset: &[f64]) -> Var {
        let xv = self.value(x);
        assert!(mask.len() == xv.len() && offset.len() == xv.len(), "mask_add sizes");
        let data = xv
            .data
            .iter()
            .zip(&mask)
            .zip(offset)
            .map(|((v, m), o)| v * m + o)
            .collect();
        let shape = xv.shape.clone();
        let ng = self.ng(x);
        self.push(Tensor { shape, data }, Op::MaskAdd { x, mask }, ng)
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let xv = self.value(x);
        let t = Tensor {
            shape: xv.shape.clone(),
            data: xv.data.iter().map(|v| f(*v)).collect(),
        };
        let ng = self.ng(x);
        self.push(t, op, ng)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(x, gelu, Op::Gelu { x })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid { x })
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, f64::tanh, Op::Tanh { x })
    }

    /// Softmax over consecutive groups of `group` entries.
    pub fn softmax_groups(&mut self, x: Var, group: usize) -> Var {
        let xv = self.value(x);
        assert!(group > 0 && xv.len() % group == 0, "softmax group size");
        let mut data = xv.data.clone();
        for g in data.chunks_mut(group) {
            let m = g.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in g.iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            for v in g.iter_mut() {
                *v /= s;
            }
        }
        let shape = xv.shape.clone();
        let ng = self.ng(x);
        self.push(Tensor { shape, data }, Op::SoftmaxGroups { x, group }, ng)
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xv = self.value(x);
        let c = xv.cols();
        let n = xv.rows();
        let (gv, bv) = (&self.value(gamma).data, &self.value(beta).data);
        assert!(gv.len() == c && bv.len() == c, "layer_norm affine width");
        let mut xhat = vec![0.0; n * c];
        let mut rstd = vec![0.0; n];
        let mut out = vec![0.0; n * c];
        for r in 0..n {
            let row = &xv.data[r * c..(r + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let rs = 1.0 / (var + LN_EPS).sqrt();
            rstd[r] = rs;
            for i in 0..c {
                let h = (row[i] - mean) * rs;
                xhat[r * c + i] = h;
                out[r * c + i] = h * gv[i] + bv[i];
            }
        }
        let shape = xv.shape.clone();
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        self.push(
            Tensor { shape, data: out },
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            ng,
        )
    }

    /// Mean over rows: `[n, c] -> [1, c]`.
    pub fn mean_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (n, c) = (xv.rows(), xv.cols());
        let mut out = vec![0.0; c];
        for r in 0..n {
            for (o, v) in out.iter_mut().zip(&xv.data[r * c..(r + 1) * c]) {
                *o += v;
            }
        }
        for o in &mut out {
            *o /= n as f64;
        }
        let ng = self.ng(x);
        self.push(Tensor::matrix(1, c, out), Op::MeanRows { x }, ng)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data.iter().sum();
        let ng = self.ng(x);
        self.push(Tensor::scalar(s), Op::Sum { x }, ng)
    }

    pub fn gather_rows(&mut self, x: Var, idx: Vec<usize>) -> Var {
        let xv = self.value(x);
        let c = xv.cols();
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in &idx {
            data.extend_from_slice(xv.row(i));
        }
        let ng = self.ng(x);
        let n = idx.len();
        self.push(Tensor::matrix(n, c, data), Op::GatherRows { x, idx }, ng)
    }

    /// Copy of `base` with row `idx[r]` replaced by row `r` of `rows`.
    pub fn replace_rows(&mut self, base: Var, rows: Var, idx: Vec<usize>) -> Var {
        let (bv, rv) = (self.value(base), self.value(rows));
        let c = bv.cols();
        assert_eq!(rv.cols(), c, "replace_rows width");
        assert_eq!(rv.rows(), idx.len(), "replace_rows count");
        let mut data = bv.data.clone();
        for (r, &i) in idx.iter().enumerate() {
            data[i * c..(i + 1) * c].copy_from_slice(rv.row(r));
        }
        let shape = bv.shape.clone();
        let ng = self.ng(base) || self.ng(rows);
        self.push(Tensor { shape, data }, Op::ReplaceRows { base, rows, idx }, ng)
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Var {
        let xv = self.value(x);
        assert_eq!(shape.iter().product::<usize>(), xv.len(), "reshape size");
        let data = xv.data.clone();
        let ng = self.ng(x);
        self.push(Tensor { shape, data }, Op::Reshape { x }, ng)
    }

    /// Bilinear samples of a channel-last map `[h*w, c]` at normalized
    /// locations `[l, 2]`, zero padded; returns `[l, c]`.
    pub fn bilinear(&mut self, map: Var, locs: Var, dims: (usize, usize)) -> Var {
        let (mv, lv) = (self.value(map), self.value(locs));
        let c = mv.cols();
        assert_eq!(mv.rows(), dims.0 * dims.1, "bilinear map dims");
        let l = lv.len() / 2;
        let mut out = vec![0.0; l * c];
        for i in 0..l {
            let (x, y) = to_pixel(lv.data[2 * i], lv.data[2 * i + 1], dims);
            bilinear_accumulate(&mv.data, dims, c, 0, x, y, 1.0, &mut out[i * c..(i + 1) * c]);
        }
        let ng = self.ng(map) || self.ng(locs);
        self.push(Tensor::matrix(l, c, out), Op::Bilinear { map, locs, dims }, ng)
    }

    /// Multi-map deformable attention core.
    ///
    /// `values[m]` is `[h_m*w_m, C]` channel-last with `C = heads * d`;
    /// `refs` is `[R, 2]` normalized; `offsets` is
    /// `[N, heads*groups*points*2]` in pixels of the sampled map; `attn` is
    /// `[N, heads*groups*points]`. For query `n` the output averages over its
    /// slots `s` the sum over points of `attn * sample(values[s.map], ref + offset)`.
    pub fn deform_attention(&mut self, values: &[Var], refs: Var, offsets: Var, attn: Var, layout: Rc<DeformLayout>) -> Result<Var> {
        let n = layout.slots.len();
        let (h, g, p) = (layout.heads, layout.groups, layout.points);
        if values.len() != layout.map_dims.len() {
            return Err(Error::Shape("deform: value map count".into()));
        }
        let c = self.value(values[0]).cols();
        if c % h != 0 {
            return Err(Error::Shape(format!("deform: {c} channels not divisible by {h} heads")));
        }
        for (m, v) in values.iter().enumerate() {
            let t = self.value(*v);
            let (mh, mw) = layout.map_dims[m];
            if t.cols() != c || t.rows() != mh * mw {
                return Err(Error::Shape(format!("deform: value map {m} has shape {:?}", t.shape)));
            }
        }
        if self.value(offsets).len() != n * h * g * p * 2 || self.value(attn).len() != n * h * g * p {
            return Err(Error::Shape("deform: offset/weight tensor sizes".into()));
        }
        let d = c / h;
        let mut out = vec![0.0; n * c];
        {
            let rv = &self.value(refs).data;
            let ov = &self.value(offsets).data;
            let av = &self.value(attn).data;
            for (q, slots) in layout.slots.iter().enumerate() {
                if slots.is_empty() {
                    continue;
                }
                let norm = 1.0 / slots.len() as f64;
                let orow = &mut out[q * c..(q + 1) * c];
                for s in slots {
                    let dims = layout.map_dims[s.map];
                    let map = &self.nodes[values[s.map].0].value.data;
                    let (ru, rv_) = (rv[2 * s.reference], rv[2 * s.reference + 1]);
                    for head in 0..h {
                        for pt in 0..p {
                            let a_idx = q * h * g * p + (head * g + s.group) * p + pt;
                            let (ox, oy) = (ov[2 * a_idx], ov[2 * a_idx + 1]);
                            let (x, y) = to_pixel(ru, rv_, dims);
                            bilinear_accumulate(map, dims, c, head * d, x + ox, y + oy, av[a_idx] * norm, &mut orow[head * d..(head + 1) * d]);
                        }
                    }
                }
            }
        }
        let ng = values.iter().any(|v| self.ng(*v)) || self.ng(refs) || self.ng(offsets) || self.ng(attn);
        Ok(self.push(
            Tensor::matrix(n, c, out),
            Op::Deform {
                values: values.to_vec(),
                refs,
                offsets,
                attn,
                layout,
            },
            ng,
        ))
    }

    /// Multi-head scaled dot-product attention over `[n, c]` inputs.
    pub fn mha(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (n, c) = (qv.rows(), qv.cols());
        let m = kv.rows();
        assert!(c % heads == 0 && kv.cols() == c && vv.cols() == c && vv.rows() == m, "mha shapes");
        let d = c / heads;
        let scale = 1.0 / (d as f64).sqrt();
        let mut probs = vec![0.0; heads * n * m];
        let mut out = vec![0.0; n * c];
        for hh in 0..heads {
            for i in 0..n {
                let pr = &mut probs[(hh * n + i) * m..(hh * n + i + 1) * m];
                let qi = &qv.data[i * c + hh * d..i * c + (hh + 1) * d];
                let mut mx = f64::NEG_INFINITY;
                for j in 0..m {
                    let kj = &kv.data[j * c + hh * d..j * c + (hh + 1) * d];
                    let s: f64 = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
                    pr[j] = s;
                    mx = mx.max(s);
                }
                let mut tot = 0.0;
                for x in pr.iter_mut() {
                    *x = (*x - mx).exp();
                    tot += *x;
                }
                for x in pr.iter_mut() {
                    *x /= tot;
                }
                let oi = &mut out[i * c + hh * d..i * c + (hh + 1) * d];
                for j in 0..m {
                    let vj = &vv.data[j * c + hh * d..j * c + (hh + 1) * d];
                    for (o, x) in oi.iter_mut().zip(vj) {
                        *o += pr[j] * x;
                    }
                }
            }
        }
        let ng = self.ng(q) || self.ng(k) || self.ng(v);
        self.push(Tensor::matrix(n, c, out), Op::Mha { q, k, v, heads, probs }, ng)
    }

    /// Output computed outside the tape as a function of the scalar `x`,
    /// with its derivative `jac` (same length as `value`).
    pub fn scalar_jacobian(&mut self, x: Var, value: Tensor, jac: Vec<f64>) -> Var {
        assert_eq!(self.value(x).len(), 1, "scalar_jacobian input must be scalar");
        assert_eq!(value.len(), jac.len(), "scalar_jacobian sizes");
        let ng = self.ng(x);
        self.push(value, Op::ScalarJacobian { x, jac }, ng)
    }

    /// Box decoding: columns 0 and 1 become `sigmoid(raw + ref_logit)`, the
    /// remaining columns pass through.
    pub fn box_decode(&mut self, raw: Var, ref_logit: Var) -> Var {
        let (rv, lv) = (self.value(raw), self.value(ref_logit));
        let (n, c) = (rv.rows(), rv.cols());
        assert!(c >= 2 && lv.len() == 2 * n, "box_decode shapes");
        let mut data = rv.data.clone();
        for i in 0..n {
            data[i * c] = sigmoid(rv.data[i * c] + lv.data[2 * i]);
            data[i * c + 1] = sigmoid(rv.data[i * c + 1] + lv.data[2 * i + 1]);
        }
        let ng = self.ng(raw) || self.ng(ref_logit);
        self.push(Tensor::matrix(n, c, data), Op::BoxDecode { raw, ref_logit }, ng)
    }

    /// Mean binary cross-entropy of probabilities against `target`, with the
    /// probabilities clamped to `[eps, 1 - eps]`.
    pub fn bce(&mut self, p: Var, target: Vec<f64>, eps: f64) -> Var {
        let pv = self.value(p);
        assert_eq!(pv.len(), target.len(), "bce sizes");
        let n = pv.len() as f64;
        let mut s = 0.0;
        for (x, t) in pv.data.iter().zip(&target) {
            let q = x.clamp(eps, 1.0 - eps);
            s -= t * q.ln() + (1.0 - t) * (1.0 - q).ln();
        }
        let ng = self.ng(p);
        self.push(Tensor::scalar(s / n), Op::Bce { p, target, eps }, ng)
    }

    /// Sigmoid focal loss over `[n, k]` logits; `targets[i]` is the positive
    /// class of row `i`, if any. Summed and divided by `norm`.
    pub fn focal(&mut self, logits: Var, targets: Vec<Option<usize>>, gamma: f64, alpha: f64, norm: f64) -> Var {
        let lv = self.value(logits);
        let k = lv.cols();
        assert_eq!(lv.rows(), targets.len(), "focal rows");
        let mut s = 0.0;
        for (i, t) in targets.iter().enumerate() {
            for j in 0..k {
                s += focal_term(lv.data[i * k + j], *t == Some(j), gamma, alpha).0;
            }
        }
        let ng = self.ng(logits);
        self.push(
            Tensor::scalar(s / norm),
            Op::Focal {
                logits,
                targets,
                gamma,
                alpha,
                norm,
            },
            ng,
        )
    }

    /// Mean absolute difference against a constant target.
    pub fn l1(&mut self, a: Var, target: Vec<f64>) -> Var {
        let av = self.value(a);
        assert_eq!(av.len(), target.len(), "l1 sizes");
        let s = if target.is_empty() {
            0.0
        } else {
            av.data.iter().zip(&target).map(|(x, t)| (x - t).abs()).sum::<f64>() / target.len() as f64
        };
        let ng = self.ng(a);
        self.push(Tensor::scalar(s), Op::L1 { a, target }, ng)
    }

    /// Hash of every discrete choice made by the recorded operations:
    /// bilinear sample cells, deformable-attention slot structure, signs
    /// inside L1 and active clamps inside BCE. Two evaluations with equal
    /// signatures lie on the same smooth piece of the computation.
    pub fn smoothness_signature(&self) -> u64 {
        use std::hash::{Hash, Hasher};
        let mut h = std::collections::hash_map::DefaultHasher::new();
        let cell = |h: &mut std::collections::hash_map::DefaultHasher, x: f64, y: f64| {
            (x.floor() as i64).hash(h);
            (y.floor() as i64).hash(h);
        };
        for node in &self.nodes {
            match &node.op {
                Op::Bilinear { locs, dims, .. } => {
                    let l = &self.value(*locs).data;
                    for i in 0..l.len() / 2 {
                        let (x, y) = to_pixel(l[2 * i], l[2 * i + 1], *dims);
                        cell(&mut h, x, y);
                    }
                }
                Op::Deform {
                    refs,
                    offsets,
                    layout,
                    ..
                } => {
                    let (rv, ov) = (&self.value(*refs).data, &self.value(*offsets).data);
                    let (hh, g, p) = (layout.heads, layout.groups, layout.points);
                    for (q, slots) in layout.slots.iter().enumerate() {
                        slots.len().hash(&mut h);
                        for s in slots {
                            (s.map, s.group, s.reference).hash(&mut h);
                            let dims = layout.map_dims[s.map];
                            let (x, y) = to_pixel(rv[2 * s.reference], rv[2 * s.reference + 1], dims);
                            for head in 0..hh {
                                for pt in 0..p {
                                    let a = q * hh * g * p + (head * g + s.group) * p + pt;
                                    cell(&mut h, x + ov[2 * a], y + ov[2 * a + 1]);
                                }
                            }
                        }
                    }
                }
                Op::L1 { a, target } => {
                    for (x, t) in self.value(*a).data.iter().zip(target) {
                        (x >= t).hash(&mut h);
                    }
                }
                Op::Bce { p, eps, .. } => {
                    for x in &self.value(*p).data {
                        (*x < *eps, *x > 1.0 - eps).hash(&mut h);
                    }
                }
                _ => {}
            }
        }
        h.finish()
    }

    /// Reverse sweep from the scalar `root`.
    pub fn backward(&self, root: Var) -> Gradients {
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        assert_eq!(self.value(root).len(), 1, "backward root must be scalar");
        grads[root.0] = Some(vec![1.0]);
        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.backprop_node(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn acc<'a>(&self, grads: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut Vec<f64>> {
        if !self.nodes[v.0].needs_grad {
            return None;
        }
        let len = self.nodes[v.0].value.len();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]))
    }

    fn backprop_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Linear { x, w, b } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (n, k, m) = (xv.rows(), xv.cols(), wv.cols());
                if let Some(gx) = self.acc(grads, *x) {
                    // gx += g * w^T
                    gemm(n, m, k, g, [m, 1], &wv.data, [1, m], gx);
                }
                if let Some(gw) = self.acc(grads, *w) {
                    // gw += x^T * g
                    gemm(k, n, m, &xv.data, [1, k], g, [m, 1], gw);
                }
                if let Some(b) = b {
                    if let Some(gb) = self.acc(grads, *b) {
                        for r in 0..n {
                            for (o, gg) in gb.iter_mut().zip(&g[r * m..(r + 1) * m]) {
                                *o += gg;
                            }
                        }
                    }
                }
            }
            Op::MatMul { a, b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (n, k, m) = (av.rows(), av.cols(), bv.cols());
                if let Some(ga) = self.acc(grads, *a) {
                    gemm(n, m, k, g, [m, 1], &bv.data, [1, m], ga);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    gemm(k, n, m, &av.data, [1, k], g, [m, 1], gb);
                }
            }
            Op::Add { a, b } => {
                for v in [*a, *b] {
                    if let Some(gv) = self.acc(grads, v) {
                        add_into(gv, g);
                    }
                }
            }
            Op::Sub { a, b } => {
                if let Some(ga) = self.acc(grads, *a) {
                    add_into(ga, g);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    for (o, x) in gb.iter_mut().zip(g) {
                        *o -= x;
                    }
                }
            }
            Op::Mul { a, b } => {
                let bv = self.value(*b).data.clone();
                let av = self.value(*a).data.clone();
                if let Some(ga) = self.acc(grads, *a) {
                    for i in 0..g.len() {
                        ga[i] += g[i] * bv[i];
                    }
                }
                if let Some(gb) = self.acc(grads, *b) {
                    for i in 0..g.len() {
                        gb[i] += g[i] * av[i];
                    }
                }
            }
            Op::AddRow { x, row } => {
                if let Some(gx) = self.acc(grads, *x) {
                    add_into(gx, g);
                }
                if let Some(gr) = self.acc(grads, *row) {
                    let c = gr.len();
                    for chunk in g.chunks(c) {
                        add_into(gr, chunk);
                    }
                }
            }
            Op::Scale { x, s } => {
                if let Some(gx) = self.acc(grads, *x) {
                    for (o, v) in gx.iter_mut().zip(g) {
                        *o += s * v;
                    }
                }
            }
            Op::MaskAdd { x, mask } => {
                if let Some(gx) = self.acc(grads, *x) {
                    for i in 0..g.len() {
                        gx[i] += g[i] * mask[i];
                    }
                }
            }
            Op::Gelu { x } => {
                let xv = &self.value(*x).data;
                if let Some(gx) = self.acc(grads, *x) {
                    for i in 0..g.len() {
                        gx[i] += g[i] * gelu_grad(xv[i]);
                    }
                }
            }
            Op::Sigmoid { x } => {
                let y = &node.value.data;
                if let Some(gx) = self.acc(grads, *x) {
                    for i in 0..g.len() {
                        gx[i] += g[i] * y[i] * (1.0 - y[i]);
                    }
                }
            }
            Op::Tanh { x } => {
                let y = &node.value.data;
                if let Some(gx) = self.acc(grads, *x) {
                    for i in 0..g.len() {
                        gx[i] += g[i] * (1.0 - y[i] * y[i]);
                    }
                }
            }
            Op::SoftmaxGroups { x, group } => {
                let y = &node.value.data;
                if let Some(gx) = self.acc(grads, *x) {
                    for start in (0..g.len()).step_by(*group) {
                        let r = start..start + group;
                        let dotv: f64 = g[r.clone()].iter().zip(&y[r.clone()]).map(|(a, b)| a * b).sum();
                        for i in r {
                            gx[i] += y[i] * (g[i] - dotv);
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let c = self.value(*x).cols();
                let n = rstd.len();
                let gv = self.value(*gamma).data.clone();
                if let Some(gg) = self.acc(grads, *gamma) {
                    for r in 0..n {
                        for i in 0..c {
                            gg[i] += g[r * c + i] * xhat[r * c + i];
                        }
                    }
                }
                if let Some(gb) = self.acc(grads, *beta) {
                    for r in 0..n {
                        for i in 0..c {
                            gb[i] += g[r * c + i];
                        }
                    }
                }
                if let Some(gx) = self.acc(grads, *x) {
                    for r in 0..n {
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for i in 0..c {
                            let dh = g[r * c + i] * gv[i];
                            m1 += dh;
                            m2 += dh * xhat[r * c + i];
                        }
                        m1 /= c as f64;
                        m2 /= c as f64;
                        for i in 0..c {
                            let dh = g[r * c + i] * gv[i];
                            gx[r * c + i] += rstd[r] * (dh - m1 - xhat[r * c + i] * m2);
                        }
                    }
                }
            }
            Op::MeanRows { x } => {
                let (n, c) = {
                    let xv = self.value(*x);
                    (xv.rows(), xv.cols())
                };
                if let Some(gx) = self.acc(grads, *x) {
                    for r in 0..n {
                        for i in 0..c {
                            gx[r * c + i] += g[i] / n as f64;
                        }
                    }
                }
            }
            Op::Sum { x } => {
                if let Some(gx) = self.acc(grads, *x) {
                    for o in gx.iter_mut() {
                        *o += g[0];
                    }
                }
            }
            Op::GatherRows { x, idx } => {
                let c = self.value(*x).cols();
                if let Some(gx) = self.acc(grads, *x) {
                    for (r, &i) in idx.iter().enumerate() {
                        for j in 0..c {
                            gx[i * c + j] += g[r * c + j];
                        }
                    }
                }
            }
            Op::ReplaceRows { base, rows, idx } => {
                let c = self.value(*base).cols();
                if let Some(gb) = self.acc(grads, *base) {
                    let mut masked = g.to_vec();
                    for &i in idx {
                        masked[i * c..(i + 1) * c].iter_mut().for_each(|v| *v = 0.0);
                    }
                    add_into(gb, &masked);
                }
                if let Some(gr) = self.acc(grads, *rows) {
                    for (r, &i) in idx.iter().enumerate() {
                        for j in 0..c {
                            gr[r * c + j] += g[i * c + j];
                        }
                    }
                }
            }
            Op::Reshape { x } => {
                if let Some(gx) = self.acc(grads, *x) {
                    add_into(gx, g);
                }
            }
            Op::Bilinear { map, locs, dims } => {
                let mv = self.value(*map).data.clone();
                let lv = self.value(*locs).data.clone();
                let c = self.value(*map).cols();
                let l = lv.len() / 2;
                let mut gl = vec![0.0; lv.len()];
                {
                    let mut gm = self.acc(grads, *map).map(|v| std::mem::take(v));
                    for i in 0..l {
                        let (x, y) = to_pixel(lv[2 * i], lv[2 * i + 1], *dims);
                        let (gx, gy) = bilinear_backward(&mv, gm.as_deref_mut(), *dims, c, 0, x, y, 1.0, &g[i * c..(i + 1) * c]);
                        gl[2 * i] = gx * dims.1 as f64;
                        gl[2 * i + 1] = gy * dims.0 as f64;
                    }
                    if let Some(gm) = gm {
                        grads[map.0] = Some(gm);
                    }
                }
                if let Some(g2) = self.acc(grads, *locs) {
                    add_into(g2, &gl);
                }
            }
            Op::Deform {
                values,
                refs,
                offsets,
                attn,
                layout,
            } => self.deform_backward(values, *refs, *offsets, *attn, layout, g, grads),
            Op::Mha { q, k, v, heads, probs } => {
                let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                let (n, c) = (qv.rows(), qv.cols());
                let m = kv.rows();
                let d = c / heads;
                let scale = 1.0 / (d as f64).sqrt();
                let mut gq = vec![0.0; n * c];
                let mut gk = vec![0.0; m * c];
                let mut gvv = vec![0.0; m * c];
                let mut ds = vec![0.0; m];
                for hh in 0..*heads {
                    for i in 0..n {
                        let pr = &probs[(hh * n + i) * m..(hh * n + i + 1) * m];
                        let go = &g[i * c + hh * d..i * c + (hh + 1) * d];
                        let mut dotp = 0.0;
                        for j in 0..m {
                            let vj = &vv.data[j * c + hh * d..j * c + (hh + 1) * d];
                            let dp: f64 = go.iter().zip(vj).map(|(a, b)| a * b).sum();
                            ds[j] = dp;
                            dotp += dp * pr[j];
                            for (o, x) in gvv[j * c + hh * d..j * c + (hh + 1) * d].iter_mut().zip(go) {
                                *o += pr[j] * x;
                            }
                        }
                        for j in 0..m {
                            let s = pr[j] * (ds[j] - dotp) * scale;
                            if s == 0.0 {
                                continue;
                            }
                            for t in 0..d {
                                gq[i * c + hh * d + t] += s * kv.data[j * c + hh * d + t];
                                gk[j * c + hh * d + t] += s * qv.data[i * c + hh * d + t];
                            }
                        }
                    }
                }
                for (var, gg) in [(*q, gq), (*k, gk), (*v, gvv)] {
                    if let Some(acc) = self.acc(grads, var) {
                        add_into(acc, &gg);
                    }
                }
            }
            Op::ScalarJacobian { x, jac } => {
                if let Some(gx) = self.acc(grads, *x) {
                    gx[0] += g.iter().zip(jac).map(|(a, b)| a * b).sum::<f64>();
                }
            }
            Op::BoxDecode { raw, ref_logit } => {
                let y = &node.value.data;
                let c = node.value.cols();
                let n = node.value.rows();
                let mut graw = g.to_vec();
                let mut gl = vec![0.0; 2 * n];
                for i in 0..n {
                    for t in 0..2 {
                        let s = y[i * c + t];
                        let d = g[i * c + t] * s * (1.0 - s);
                        graw[i * c + t] = d;
                        gl[2 * i + t] = d;
                    }
                }
                if let Some(gr) = self.acc(grads, *raw) {
                    add_into(gr, &graw);
                }
                if let Some(gg) = self.acc(grads, *ref_logit) {
                    add_into(gg, &gl);
                }
            }
            Op::Bce { p, target, eps } => {
                let pv = self.value(*p).data.clone();
                let n = pv.len() as f64;
                if let Some(gp) = self.acc(grads, *p) {
                    for i in 0..pv.len() {
                        let x = pv[i];
                        if x < *eps || x > 1.0 - eps {
                            continue;
                        }
                        let t = target[i];
                        gp[i] += g[0] * (-t / x + (1.0 - t) / (1.0 - x)) / n;
                    }
                }
            }
            Op::Focal {
                logits,
                targets,
                gamma,
                alpha,
                norm,
            } => {
                let lv = self.value(*logits).data.clone();
                let k = self.value(*logits).cols();
                if let Some(gl) = self.acc(grads, *logits) {
                    for (i, t) in targets.iter().enumerate() {
                        for j in 0..k {
                            let d = focal_term(lv[i * k + j], *t == Some(j), *gamma, *alpha).1;
                            gl[i * k + j] += g[0] * d / norm;
                        }
                    }
                }
            }
            Op::L1 { a, target } => {
                let av = self.value(*a).data.clone();
                let n = target.len() as f64;
                if let Some(ga) = self.acc(grads, *a) {
                    for i in 0..av.len() {
                        let d = av[i] - target[i];
                        let s = if d > 0.0 {
                            1.0
                        } else if d < 0.0 {
                            -1.0
                        } else {
                            0.0
                        };
                        ga[i] += g[0] * s / n;
                    }
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn deform_backward(
        &self,
        values: &[Var],
        refs: Var,
        offsets: Var,
        attn: Var,
        layout: &DeformLayout,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let (h, gr, p) = (layout.heads, layout.groups, layout.points);
        let c = self.value(values[0]).cols();
        let d = c / h;
        let rv = &self.value(refs).data;
        let ov = &self.value(offsets).data;
        let av = &self.value(attn).data;
        // the same variable may back several maps
        let mut uniq: Vec<Var> = Vec::new();
        let map_slot: Vec<usize> = values
            .iter()
            .map(|v| match uniq.iter().position(|u| u == v) {
                Some(i) => i,
                None => {
                    uniq.push(*v);
                    uniq.len() - 1
                }
            })
            .collect();
        let mut gmaps: Vec<Option<Vec<f64>>> = uniq
            .iter()
            .map(|v| self.acc(grads, *v).map(|x| std::mem::take(x)))
            .collect();
        let mut grefs = vec![0.0; rv.len()];
        let mut goff = vec![0.0; ov.len()];
        let mut gattn = vec![0.0; av.len()];
        let mut sample = vec![0.0; d];
        for (q, slots) in layout.slots.iter().enumerate() {
            if slots.is_empty() {
                continue;
            }
            let norm = 1.0 / slots.len() as f64;
            for s in slots {
                let dims = layout.map_dims[s.map];
                let map = &self.value(values[s.map]).data;
                let (ru, rvv) = (rv[2 * s.reference], rv[2 * s.reference + 1]);
                for head in 0..h {
                    let go = &g[q * c + head * d..q * c + (head + 1) * d];
                    for pt in 0..p {
                        let a_idx = q * h * gr * p + (head * gr + s.group) * p + pt;
                        let (x, y) = to_pixel(ru, rvv, dims);
                        let (x, y) = (x + ov[2 * a_idx], y + ov[2 * a_idx + 1]);
                        sample.iter_mut().for_each(|v| *v = 0.0);
                        bilinear_accumulate(map, dims, c, head * d, x, y, 1.0, &mut sample);
                        gattn[a_idx] += norm * go.iter().zip(&sample).map(|(a, b)| a * b).sum::<f64>();
                        let scale = av[a_idx] * norm;
                        let (gx, gy) = bilinear_backward(map, gmaps[map_slot[s.map]].as_deref_mut(), dims, c, head * d, x, y, scale, go);
                        goff[2 * a_idx] += gx;
                        goff[2 * a_idx + 1] += gy;
                        grefs[2 * s.reference] += gx * dims.1 as f64;
                        grefs[2 * s.reference + 1] += gy * dims.0 as f64;
                    }
                }
            }
        }
        for (v, gm) in uniq.iter().zip(gmaps) {
            if let Some(gm) = gm {
                grads[v.0] = Some(gm);
            }
        }
        for (var, gg) in [(refs, grefs), (offsets, goff), (attn, gattn)] {
            if let Some(acc) = self.acc(grads, var) {
                add_into(acc, &gg);
            }
        }
    }
}

/// `(loss, d loss / d logit)` of one sigmoid focal term.
pub fn focal_term(z: f64, positive: bool, gamma: f64, alpha: f64) -> (f64, f64) {
    let p = sigmoid(z);
    if positive {
        let log_p = -softplus(-z);
        let w = (1.0 - p).powf(gamma);
        let loss = -alpha * w * log_p;
        let grad = alpha * w * (gamma * p * log_p - (1.0 - p));
        (loss, grad)
    } else {
        let log_q = -softplus(z);
        let w = p.powf(gamma);
        let loss = -(1.0 - alpha) * w * log_q;
        let grad = (1.0 - alpha) * w * (p - gamma * (1.0 - p) * log_q);
        (loss, grad)
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// `out[n, m] += a[n, k] * b[k, m]`, all row-major.
fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], n: usize, k: usize, m: usize) {
    gemm(n, k, m, a, [k, 1], b, [m, 1], out);
}

/// `c[n, m] += a * b` where `a` is `n x k` and `b` is `k x m` with the
/// given (row, column) strides; `c` is row-major and contiguous.
#[allow(clippy::too_many_arguments)]
fn gemm(n: usize, k: usize, m: usize, a: &[f64], sa: [usize; 2], b: &[f64], sb: [usize; 2], c: &mut [f64]) {
    if n == 0 || m == 0 || k == 0 {
        return;
    }
    assert!(a.len() > (n - 1) * sa[0] + (k - 1) * sa[1], "gemm: left operand too short");
    assert!(b.len() > (k - 1) * sb[0] + (m - 1) * sb[1], "gemm: right operand too short");
    assert!(c.len() >= n * m, "gemm: output too short");
    // SAFETY: the assertions above bound every index the kernel touches.
    unsafe {
        matrixmultiply::dgemm(
            n,
            k,
            m,
            1.0,
            a.as_ptr(),
            sa[0] as isize,
            sa[1] as isize,
            b.as_ptr(),
            sb[0] as isize,
            sb[1] as isize,
            1.0,
            c.as_mut_ptr(),
            m as isize,
            1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-scale..scale)).collect()).unwrap()
    }

    /// Central differences of `f` over every entry of every input.
    fn check(inputs: Vec<Tensor>, f: impl Fn(&mut Tape, &[Var]) -> Var) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = f(&mut tape, &vars);
        let grads = tape.backward(out);
        let eval = |ins: &[Tensor]| {
            let mut t = Tape::new();
            let vs: Vec<Var> = ins.iter().map(|x| t.leaf(x.clone())).collect();
            let o = f(&mut t, &vs);
            t.value(o).data[0]
        };
        let h = 1e-6;
        for (vi, inp) in inputs.iter().enumerate() {
            let an = grads.get_or_zero(vars[vi], inp.len());
            let mut worst: f64 = 0.0;
            let mut scale: f64 = 1e-10;
            for e in 0..inp.len() {
                let mut plus = inputs.clone();
                plus[vi].data[e] += h;
                let mut minus = inputs.clone();
                minus[vi].data[e] -= h;
                let num = (eval(&plus) - eval(&minus)) / (2.0 * h);
                worst = worst.max((num - an[e]).abs());
                scale = scale.max(num.abs()).max(an[e].abs());
            }
            assert!(worst / scale < 1e-6, "input {vi}: rel err {}", worst / scale);
        }
    }

    #[test]
    fn dense_ops_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = rand_tensor(&mut rng, &[3, 4], 1.0);
        let w = rand_tensor(&mut rng, &[4, 5], 1.0);
        let b = rand_tensor(&mut rng, &[5], 1.0);
        let gam = rand_tensor(&mut rng, &[5], 1.0);
        let bet = rand_tensor(&mut rng, &[5], 1.0);
        check(vec![x, w, b, gam, bet], |t, v| {
            let y = t.linear(v[0], v[1], Some(v[2]));
            let y = t.gelu(y);
            let y = t.layer_norm(y, v[3], v[4]);
            let s = t.sigmoid(y);
            let z = t.tanh(s);
            let z = t.softmax_groups(z, 5);
            let m = t.mul(z, y);
            let m = t.mean_rows(m);
            t.sum(m)
        });
    }

    #[test]
    fn matmul_gather_replace_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = rand_tensor(&mut rng, &[4, 3], 1.0);
        let b = rand_tensor(&mut rng, &[3, 3], 1.0);
        let r = rand_tensor(&mut rng, &[2, 3], 1.0);
        let row = rand_tensor(&mut rng, &[3], 1.0);
        check(vec![a, b, r, row], |t, v| {
            let y = t.matmul(v[0], v[1]);
            let y = t.add_row(y, v[3]);
            let y = t.replace_rows(y, v[2], vec![3, 0]);
            let g = t.gather_rows(y, vec![0, 2, 2]);
            let s = t.sub(g, g);
            let s2 = t.add(s, g);
            let s3 = t.scale(s2, 0.7);
            let m = t.mask_add(s3, vec![1.0, 0.0, 2.0, 1.0, 1.0, 0.5, 0.0, 1.0, 3.0], &[0.5; 9]);
            let m = t.mul(m, m);
            t.sum(m)
        });
    }

    #[test]
    fn mha_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let q = rand_tensor(&mut rng, &[3, 4], 1.0);
        let k = rand_tensor(&mut rng, &[5, 4], 1.0);
        let v = rand_tensor(&mut rng, &[5, 4], 1.0);
        let w = rand_tensor(&mut rng, &[3, 4], 1.0);
        check(vec![q, k, v, w], |t, x| {
            let o = t.mha(x[0], x[1], x[2], 2);
            let o = t.mul(o, x[3]);
            t.sum(o)
        });
    }

    #[test]
    fn loss_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let z = rand_tensor(&mut rng, &[4, 3], 2.0);
        let raw = rand_tensor(&mut rng, &[4, 10], 1.0);
        let rl = rand_tensor(&mut rng, &[4, 2], 1.0);
        let target: Vec<f64> = (0..12).map(|_| rng.gen_range(0.0..1.0)).collect();
        let l1t: Vec<f64> = (0..20).map(|_| rng.gen_range(-2.0..2.0)).collect();
        check(vec![z, raw, rl], move |t, v| {
            let p = t.sigmoid(v[0]);
            let a = t.bce(p, target.clone(), 1e-7);
            let b = t.focal(v[0], vec![Some(1), None, Some(0), None], 2.0, 0.25, 2.0);
            let d = t.box_decode(v[1], v[2]);
            let d = t.gather_rows(d, vec![1, 3]);
            let c = t.l1(d, l1t.clone());
            let s = t.add(a, b);
            t.add(s, c)
        });
    }

    #[test]
    fn bilinear_gradients_and_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let map = rand_tensor(&mut rng, &[12, 3], 1.0);
        let locs = Tensor::new(vec![3, 2], vec![0.31, 0.47, 0.83, 0.12, 0.05, 0.96]).unwrap();
        let w = rand_tensor(&mut rng, &[3, 3], 1.0);
        check(vec![map.clone(), locs, w], |t, v| {
            let s = t.bilinear(v[0], v[1], (3, 4));
            let s = t.mul(s, v[2]);
            t.sum(s)
        });

        let mut t = Tape::new();
        let m = t.constant(map.clone());
        // node (row 1, col 2) of a 3x4 map
        let l = t.constant(Tensor::new(vec![2, 2], vec![2.5 / 4.0, 1.5 / 3.0, 1.7, 0.5]).unwrap());
        let s = t.bilinear(m, l, (3, 4));
        assert_eq!(t.value(s).row(0), map.row(6));
        assert_eq!(t.value(s).row(1), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn deform_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (heads, groups, points) = (2, 2, 2);
        let maps = [rand_tensor(&mut rng, &[20, 4], 1.0), rand_tensor(&mut rng, &[6, 4], 1.0)];
        let refs = Tensor::new(vec![3, 2], vec![0.3, 0.6, 0.71, 0.22, 0.55, 0.41]).unwrap();
        let offs = rand_tensor(&mut rng, &[2, heads * groups * points * 2], 0.8);
        let attn = rand_tensor(&mut rng, &[2, heads * groups * points], 1.0);
        let layout = Rc::new(DeformLayout {
            heads,
            groups,
            points,
            map_dims: vec![(4, 5), (2, 3)],
            slots: vec![
                vec![
                    Slot { map: 0, group: 0, reference: 0 },
                    Slot { map: 1, group: 1, reference: 1 },
                ],
                vec![Slot { map: 1, group: 0, reference: 2 }],
            ],
        });
        let w = rand_tensor(&mut rng, &[2, 4], 1.0);
        check(
            vec![maps[0].clone(), maps[1].clone(), refs, offs, attn, w],
            |t, v| {
                let a = t.softmax_groups(v[4], points);
                let o = t.deform_attention(&[v[0], v[1]], v[2], v[3], a, layout.clone()).unwrap();
                let o = t.mul(o, v[5]);
                t.sum(o)
            },
        );
    }

    #[test]
    fn focal_reduces_to_half_bce() {
        for &z in &[-3.0, -0.2, 0.0, 0.9, 4.0] {
            for &pos in &[true, false] {
                let p = sigmoid(z);
                let bce = if pos { -p.ln() } else { -(1.0 - p).ln() };
                assert!((focal_term(z, pos, 0.0, 0.5).0 - 0.5 * bce).abs() < 1e-12);
            }
        }
    }
}
