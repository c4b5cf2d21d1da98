//! Reverse-mode gradient tape over a fixed primitive set.
//!
//! A forward pass pushes one node per primitive. Each node records its
//! inputs; backward recomputes whatever auxiliary quantities it needs from
//! the stored input and output values, so the tape holds nothing but values
//! and op descriptors. [`GradTape::replay`] re-executes the same descriptors
//! from the leaves, which is how bit-exact replay is checked.
//!
//! Non-smooth primitives (`relu`, `group_max`) use subgradient 0 at exact kinks
//! (ties in `group_max` route to the lowest index).

use std::collections::BTreeMap;
use std::collections::HashMap;

use super::tensor::{
    bilinear_taps, dot, gemm_nn, gemm_nt, gemm_tn_acc, sample_with_taps, sigmoid_scalar,
    softmax_rows_inplace, Tensor,
};
use crate::error::{Error, Result};

const LN_EPS: f64 = 1e-5;
const NORM_FLOOR: f64 = 1e-12;

/// Handle to a node on a [`GradTape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Sigmoid(Var),
    Silu(Var),
    Relu(Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
    },
    Sample {
        fm: Var,
        taps: Vec<Vec<(usize, f64)>>,
    },
    SampleAt {
        fm: Var,
        xs: Var,
        ys: Var,
    },
    Cells(Var),
    ConcatRows(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    MeanRows(Var),
    NormalizeRows(Var),
    GroupMax {
        x: Var,
        group: usize,
    },
    Sum(Var),
    Reshape(Var, Vec<usize>),
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Clone, Debug, Default)]
pub struct GradTape {
    nodes: Vec<Node>,
    params: Vec<(String, Var)>,
    param_lookup: HashMap<String, Var>,
}

/// Gradients of a backward pass, per node and per named parameter.
#[derive(Clone, Debug)]
pub struct Gradients {
    per_node: Vec<Option<Tensor>>,
    params: Vec<(String, Var)>,
    dims: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.per_node[v.0].as_ref()
    }

    /// Gradient of a named parameter; parameters the seeds never reach get zeros.
    pub fn param(&self, name: &str) -> Option<Tensor> {
        self.params
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| self.dense(*v))
    }

    /// Every parameter that appeared on the tape, with a (possibly zero) gradient.
    pub fn params(&self) -> BTreeMap<String, Tensor> {
        self.params
            .iter()
            .map(|(n, v)| (n.clone(), self.dense(*v)))
            .collect()
    }

    fn dense(&self, v: Var) -> Tensor {
        self.per_node[v.0]
            .clone()
            .unwrap_or_else(|| Tensor::zeros(&self.dims[v.0]))
    }
}

fn conv_out(size: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    let padded = size + 2 * pad;
    if padded < k || stride == 0 {
        return Err(Error::Shape(format!(
            "conv kernel {k} / stride {stride} does not fit input {size} with pad {pad}"
        )));
    }
    Ok((padded - k) / stride + 1)
}

/// Unfolds `Cin×H×W` into `(Cin·k·k)×(Ho·Wo)`.
fn im2col(
    x: &[f64],
    cin: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
) -> (Vec<f64>, usize, usize) {
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (w + 2 * pad - k) / stride + 1;
    let cols = ho * wo;
    let mut col = vec![0.0; cin * k * k * cols];
    for c in 0..cin {
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut col[row * cols..(row + 1) * cols];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = &x[c * h * w + iy as usize * w..c * h * w + (iy as usize + 1) * w];
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[oy * wo + ox] = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    (col, ho, wo)
}

#[allow(clippy::too_many_arguments)]
fn col2im_acc(
    col: &[f64],
    cin: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    dx: &mut [f64],
) {
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (w + 2 * pad - k) / stride + 1;
    let cols = ho * wo;
    for c in 0..cin {
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &col[row * cols..(row + 1) * cols];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dx[c * h * w + iy as usize * w + ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

fn layer_norm_stats(row: &[f64]) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, 1.0 / (var + LN_EPS).sqrt())
}

fn compute<'a>(op: &Op, val: &dyn Fn(Var) -> &'a Tensor) -> Result<Tensor> {
    Ok(match op {
        Op::Leaf => unreachable!("leaves carry their own value"),
        Op::MatMul(a, b) => super::tensor::matmul(val(*a), val(*b))?,
        Op::MatMulBt(a, b) => super::tensor::matmul_bt(val(*a), val(*b))?,
        Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => {
            let (x, y) = (val(*a), val(*b));
            if x.dims() != y.dims() {
                return Err(Error::Shape(format!(
                    "elementwise op on {:?} and {:?}",
                    x.dims(),
                    y.dims()
                )));
            }
            let data = x
                .data()
                .iter()
                .zip(y.data())
                .map(|(&p, &q)| match op {
                    Op::Add(..) => p + q,
                    Op::Sub(..) => p - q,
                    _ => p * q,
                })
                .collect();
            Tensor::from_parts(x.dims().to_vec(), data)
        }
        Op::AddRow(a, b) => {
            let (x, bias) = (val(*a), val(*b));
            if bias.len() != x.cols() {
                return Err(Error::Shape(format!(
                    "row bias of {} for {:?}",
                    bias.len(),
                    x.dims()
                )));
            }
            let mut out = x.data().to_vec();
            for row in out.chunks_mut(bias.len()) {
                for (o, &bv) in row.iter_mut().zip(bias.data()) {
                    *o += bv;
                }
            }
            Tensor::from_parts(x.dims().to_vec(), out)
        }
        Op::Scale(a, s) => val(*a).map(|v| v * s),
        Op::Sigmoid(a) => val(*a).map(sigmoid_scalar),
        Op::Silu(a) => val(*a).map(|v| v * sigmoid_scalar(v)),
        Op::Relu(a) => val(*a).map(|v| if v > 0.0 { v } else { 0.0 }),
        Op::SoftmaxRows(a) => {
            let x = val(*a);
            let mut out = x.data().to_vec();
            softmax_rows_inplace(&mut out, x.cols());
            Tensor::from_parts(x.dims().to_vec(), out)
        }
        Op::LayerNorm { x, gain, bias } => {
            let (x, g, b) = (val(*x), val(*gain), val(*bias));
            let d = x.cols();
            if g.len() != d || b.len() != d {
                return Err(Error::Shape("layer norm affine size".into()));
            }
            let mut out = vec![0.0; x.len()];
            for (row, orow) in x.data().chunks(d).zip(out.chunks_mut(d)) {
                let (mean, rstd) = layer_norm_stats(row);
                for j in 0..d {
                    orow[j] = (row[j] - mean) * rstd * g.data()[j] + b.data()[j];
                }
            }
            Tensor::from_parts(x.dims().to_vec(), out)
        }
        Op::Conv2d {
            x,
            w,
            b,
            stride,
            pad,
        } => {
            let (x, w, b) = (val(*x), val(*w), val(*b));
            let [cin, h, wd] = match x.dims() {
                [c, h, w] => [*c, *h, *w],
                d => return Err(Error::Shape(format!("conv input must be C×H×W, got {d:?}"))),
            };
            let [cout, cin2, k, k2] = match w.dims() {
                [a, b, c, d] => [*a, *b, *c, *d],
                d => return Err(Error::Shape(format!("conv weight must be 4-D, got {d:?}"))),
            };
            if cin != cin2 || k != k2 || b.len() != cout {
                return Err(Error::Shape("conv weight/bias do not match input".into()));
            }
            let ho = conv_out(h, k, *stride, *pad)?;
            let wo = conv_out(wd, k, *stride, *pad)?;
            let (col, _, _) = im2col(x.data(), cin, h, wd, k, *stride, *pad);
            let mut out = gemm_nn(w.data(), &col, cout, cin * k * k, ho * wo);
            for (co, chunk) in out.chunks_mut(ho * wo).enumerate() {
                let bv = b.data()[co];
                chunk.iter_mut().for_each(|v| *v += bv);
            }
            Tensor::from_parts(vec![cout, ho, wo], out)
        }
        Op::Sample { fm, taps } => {
            let fm = val(*fm);
            let [c, h, w] = match fm.dims() {
                [c, h, w] => [*c, *h, *w],
                d => return Err(Error::Shape(format!("sample needs C×H×W, got {d:?}"))),
            };
            if taps.iter().flatten().any(|&(cell, _)| cell >= h * w) {
                return Err(Error::Range("sample tap outside the feature map".into()));
            }
            sample_with_taps(fm.data(), c, h * w, taps)
        }
        Op::SampleAt { fm, xs, ys } => {
            let fm = val(*fm);
            let [c, h, w] = match fm.dims() {
                [c, h, w] => [*c, *h, *w],
                d => return Err(Error::Shape(format!("sample needs C×H×W, got {d:?}"))),
            };
            let (xs, ys) = (val(*xs), val(*ys));
            if xs.len() != ys.len() {
                return Err(Error::Shape(format!(
                    "{} x and {} y coordinates",
                    xs.len(),
                    ys.len()
                )));
            }
            if !(xs.is_finite() && ys.is_finite()) {
                return Err(Error::Range("non-finite sample coordinate".into()));
            }
            let mut out = vec![0.0; xs.len() * c];
            for (p, (&x, &y)) in xs.data().iter().zip(ys.data()).enumerate() {
                let k = Corners::new(h, w, x, y);
                for (ch, o) in out[p * c..(p + 1) * c].iter_mut().enumerate() {
                    *o = k.interp(&fm.data()[ch * h * w..(ch + 1) * h * w], w);
                }
            }
            Tensor::from_parts(vec![xs.len(), c], out)
        }
        Op::Cells(a) => {
            let x = val(*a);
            let [c, h, w] = match x.dims() {
                [c, h, w] => [*c, *h, *w],
                d => return Err(Error::Shape(format!("cells needs C×H×W, got {d:?}"))),
            };
            let hw = h * w;
            let mut out = vec![0.0; hw * c];
            for ch in 0..c {
                for cell in 0..hw {
                    out[cell * c + ch] = x.data()[ch * hw + cell];
                }
            }
            Tensor::from_parts(vec![hw, c], out)
        }
        Op::ConcatRows(parts) => {
            let vals: Vec<&Tensor> = parts.iter().map(|p| val(*p)).collect();
            let cols = vals
                .first()
                .map(|t| t.cols())
                .ok_or_else(|| Error::Shape("concat of nothing".into()))?;
            if vals.iter().any(|t| t.cols() != cols) {
                return Err(Error::Shape("concat rows with different widths".into()));
            }
            let rows: usize = vals.iter().map(|t| t.rows()).sum();
            let mut data = Vec::with_capacity(rows * cols);
            for t in &vals {
                data.extend_from_slice(t.data());
            }
            Tensor::from_parts(vec![rows, cols], data)
        }
        Op::GatherRows(a, idx) => {
            let x = val(*a);
            let c = x.cols();
            let mut data = Vec::with_capacity(idx.len() * c);
            for &i in idx {
                if i >= x.rows() {
                    return Err(Error::Range(format!("row {i} of {}", x.rows())));
                }
                data.extend_from_slice(x.row(i));
            }
            Tensor::from_parts(vec![idx.len(), c], data)
        }
        Op::MeanRows(a) => {
            let x = val(*a);
            let (r, c) = (x.rows(), x.cols());
            let mut out = vec![0.0; c];
            for row in x.data().chunks(c) {
                for (o, v) in out.iter_mut().zip(row) {
                    *o += v;
                }
            }
            out.iter_mut().for_each(|v| *v /= r as f64);
            Tensor::from_parts(vec![1, c], out)
        }
        Op::NormalizeRows(a) => {
            let x = val(*a);
            let c = x.cols();
            let mut out = x.data().to_vec();
            for row in out.chunks_mut(c) {
                let n = dot(row, row).sqrt().max(NORM_FLOOR);
                row.iter_mut().for_each(|v| *v /= n);
            }
            Tensor::from_parts(x.dims().to_vec(), out)
        }
        Op::GroupMax { x, group } => {
            let x = val(*x);
            let c = x.cols();
            if *group == 0 || !c.is_multiple_of(*group) {
                return Err(Error::Shape(format!("group {group} does not divide {c}")));
            }
            let g = c / group;
            let mut out = Vec::with_capacity(x.rows() * g);
            for row in x.data().chunks(c) {
                for chunk in row.chunks(*group) {
                    out.push(chunk.iter().copied().fold(f64::NEG_INFINITY, f64::max));
                }
            }
            Tensor::from_parts(vec![x.rows(), g], out)
        }
        Op::Sum(a) => Tensor::scalar(val(*a).data().iter().sum()),
        Op::Reshape(a, dims) => val(*a).reshape(dims)?,
    })
}

fn argmax_in(chunk: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in chunk.iter().enumerate() {
        if v > chunk[best] {
            best = i;
        }
    }
    best
}

impl GradTape {
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

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    /// Registers a named parameter leaf; registering the same name again returns the same node.
    pub fn param(&mut self, name: &str, t: &Tensor) -> Var {
        if let Some(v) = self.param_lookup.get(name) {
            return *v;
        }
        let v = self.constant(t.clone());
        self.params.push((name.to_string(), v));
        self.param_lookup.insert(name.to_string(), v);
        v
    }

    pub fn param_var(&self, name: &str) -> Option<Var> {
        self.param_lookup.get(name).copied()
    }

    fn push(&mut self, op: Op) -> Result<Var> {
        let nodes = &self.nodes;
        let value = compute(&op, &|v: Var| &nodes[v.0].value)?;
        self.nodes.push(Node { value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    fn push_value(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = super::tensor::matmul(self.value(a), self.value(b))?;
        Ok(self.push_value(value, Op::MatMul(a, b)))
    }

    /// `a · bᵀ`
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = super::tensor::matmul_bt(self.value(a), self.value(b))?;
        Ok(self.push_value(value, Op::MatMulBt(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Mul(a, b))
    }

    /// Adds a length-`n` bias to every row of `a[m×n]`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        self.push(Op::AddRow(a, bias))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        self.push(Op::Scale(a, s))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Sigmoid(a))
    }

    pub fn silu(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Silu(a))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Relu(a))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        self.push(Op::SoftmaxRows(a))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        self.push(Op::LayerNorm { x, gain, bias })
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        self.push(Op::Conv2d {
            x,
            w,
            b,
            stride,
            pad,
        })
    }

    /// Bilinear samples of a `C×H×W` node at map coordinates; returns `P×C`.
    pub fn bilinear_sample(&mut self, fm: Var, points: &[(f64, f64)]) -> Result<Var> {
        let [_, h, w] = match self.value(fm).dims() {
            [c, h, w] => [*c, *h, *w],
            d => return Err(Error::Shape(format!("sample needs C×H×W, got {d:?}"))),
        };
        let taps = points
            .iter()
            .map(|&(x, y)| bilinear_taps(h, w, x, y))
            .collect::<Result<Vec<_>>>()?;
        self.push(Op::Sample { fm, taps })
    }

    /// Bilinear samples at coordinates held on the tape, differentiable in both
    /// the map and the coordinates. Coordinates are clamped to the map; a clamped
    /// coordinate gets zero gradient. Returns `P×C` for `P` coordinate pairs.
    pub fn sample_at(&mut self, fm: Var, xs: Var, ys: Var) -> Result<Var> {
        self.push(Op::SampleAt { fm, xs, ys })
    }

    /// `C×H×W` → `(H·W)×C`, one row per spatial cell.
    pub fn cells(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Cells(a))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        self.push(Op::ConcatRows(parts.to_vec()))
    }

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        self.push(Op::GatherRows(a, idx.to_vec()))
    }

    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        self.push(Op::MeanRows(a))
    }

    pub fn normalize_rows(&mut self, a: Var) -> Result<Var> {
        self.push(Op::NormalizeRows(a))
    }

    /// Max over consecutive column groups of width `group`: `m×(g·group)` → `m×g`.
    pub fn group_max(&mut self, x: Var, group: usize) -> Result<Var> {
        self.push(Op::GroupMax { x, group })
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Sum(a))
    }

    pub fn reshape(&mut self, a: Var, dims: &[usize]) -> Result<Var> {
        self.push(Op::Reshape(a, dims.to_vec()))
    }

    /// Recomputes every node from the leaves and returns all values.
    pub fn replay(&self) -> Result<Vec<Tensor>> {
        let mut values: Vec<Tensor> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let v = match node.op {
                Op::Leaf => node.value.clone(),
                _ => compute(&node.op, &|v: Var| &values[v.0])?,
            };
            values.push(v);
        }
        Ok(values)
    }

    /// Backpropagates from one or more seeded nodes.
    pub fn backward(&self, seeds: &[(Var, Tensor)]) -> Result<Gradients> {
        let n = self.nodes.len();
        let mut grads: Vec<Option<Tensor>> = vec![None; n];
        for (v, g) in seeds {
            if g.dims() != self.value(*v).dims() {
                return Err(Error::Shape(format!(
                    "seed {:?} for node of {:?}",
                    g.dims(),
                    self.value(*v).dims()
                )));
            }
            accumulate(&mut grads, &self.nodes, *v, |dst| {
                for (d, s) in dst.iter_mut().zip(g.data()) {
                    *d += s;
                }
            });
        }
        for i in (0..n).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            self.backprop_node(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients {
            per_node: grads,
            params: self.params.clone(),
            dims: self.nodes.iter().map(|n| n.value.dims().to_vec()).collect(),
        })
    }

    fn backprop_node(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let nodes = &self.nodes;
        let val = |v: Var| &nodes[v.0].value;
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let (m, k, nn) = (av.rows(), av.cols(), bv.cols());
                let da = gemm_nt(gd, bv.data(), m, nn, k);
                accumulate(grads, nodes, *a, |dst| add_into(dst, &da));
                accumulate(grads, nodes, *b, |dst| {
                    gemm_tn_acc(av.data(), gd, m, k, nn, dst)
                });
            }
            Op::MatMulBt(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let (m, k, nn) = (av.rows(), av.cols(), bv.rows());
                let da = gemm_nn(gd, bv.data(), m, nn, k);
                accumulate(grads, nodes, *a, |dst| add_into(dst, &da));
                accumulate(grads, nodes, *b, |dst| {
                    gemm_tn_acc(gd, av.data(), m, nn, k, dst)
                });
            }
            Op::Add(a, b) => {
                accumulate(grads, nodes, *a, |dst| add_into(dst, gd));
                accumulate(grads, nodes, *b, |dst| add_into(dst, gd));
            }
            Op::Sub(a, b) => {
                accumulate(grads, nodes, *a, |dst| add_into(dst, gd));
                accumulate(grads, nodes, *b, |dst| {
                    for (d, s) in dst.iter_mut().zip(gd) {
                        *d -= s;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a).data(), val(*b).data());
                accumulate(grads, nodes, *a, |dst| {
                    for ((d, s), y) in dst.iter_mut().zip(gd).zip(bv) {
                        *d += s * y;
                    }
                });
                accumulate(grads, nodes, *b, |dst| {
                    for ((d, s), x) in dst.iter_mut().zip(gd).zip(av) {
                        *d += s * x;
                    }
                });
            }
            Op::AddRow(a, bias) => {
                accumulate(grads, nodes, *a, |dst| add_into(dst, gd));
                let c = val(*bias).len();
                accumulate(grads, nodes, *bias, |dst| {
                    for row in gd.chunks(c) {
                        add_into(dst, row);
                    }
                });
            }
            Op::Scale(a, s) => {
                accumulate(grads, nodes, *a, |dst| {
                    for (d, x) in dst.iter_mut().zip(gd) {
                        *d += s * x;
                    }
                });
            }
            Op::Sigmoid(a) => {
                let y = node.value.data();
                accumulate(grads, nodes, *a, |dst| {
                    for ((d, s), y) in dst.iter_mut().zip(gd).zip(y) {
                        *d += s * y * (1.0 - y);
                    }
                });
            }
            Op::Silu(a) => {
                let x = val(*a).data();
                accumulate(grads, nodes, *a, |dst| {
                    for ((d, s), &x) in dst.iter_mut().zip(gd).zip(x) {
                        let sg = sigmoid_scalar(x);
                        *d += s * sg * (1.0 + x * (1.0 - sg));
                    }
                });
            }
            Op::Relu(a) => {
                let x = val(*a).data();
                accumulate(grads, nodes, *a, |dst| {
                    for ((d, s), &x) in dst.iter_mut().zip(gd).zip(x) {
                        if x > 0.0 {
                            *d += s;
                        }
                    }
                });
            }
            Op::SoftmaxRows(a) => {
                let y = node.value.data();
                let c = node.value.cols();
                accumulate(grads, nodes, *a, |dst| {
                    for ((drow, grow), yrow) in dst.chunks_mut(c).zip(gd.chunks(c)).zip(y.chunks(c))
                    {
                        let inner = dot(grow, yrow);
                        for j in 0..c {
                            drow[j] += yrow[j] * (grow[j] - inner);
                        }
                    }
                });
            }
            Op::LayerNorm { x, gain, bias } => {
                let xv = val(*x);
                let gv = val(*gain).data();
                let d = xv.cols();
                let mut dx = vec![0.0; xv.len()];
                let mut dgain = vec![0.0; d];
                let mut dbias = vec![0.0; d];
                let mut xhat = vec![0.0; d];
                let mut dxhat = vec![0.0; d];
                for ((row, grow), dxrow) in
                    xv.data().chunks(d).zip(gd.chunks(d)).zip(dx.chunks_mut(d))
                {
                    let (mean, rstd) = layer_norm_stats(row);
                    for j in 0..d {
                        xhat[j] = (row[j] - mean) * rstd;
                        dgain[j] += grow[j] * xhat[j];
                        dbias[j] += grow[j];
                        dxhat[j] = grow[j] * gv[j];
                    }
                    let mean_dxhat = dxhat.iter().sum::<f64>() / d as f64;
                    let mean_dxhat_xhat = dot(&dxhat, &xhat) / d as f64;
                    for j in 0..d {
                        dxrow[j] = rstd * (dxhat[j] - mean_dxhat - xhat[j] * mean_dxhat_xhat);
                    }
                }
                accumulate(grads, nodes, *x, |dst| add_into(dst, &dx));
                accumulate(grads, nodes, *gain, |dst| add_into(dst, &dgain));
                accumulate(grads, nodes, *bias, |dst| add_into(dst, &dbias));
            }
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            } => {
                let (xv, wv) = (val(*x), val(*w));
                let (cin, h, wd) = (xv.dims()[0], xv.dims()[1], xv.dims()[2]);
                let (cout, k) = (wv.dims()[0], wv.dims()[2]);
                let (col, ho, wo) = im2col(xv.data(), cin, h, wd, k, *stride, *pad);
                let cols = ho * wo;
                let ckk = cin * k * k;
                let dw = gemm_nt(gd, &col, cout, cols, ckk);
                accumulate(grads, nodes, *w, |dst| add_into(dst, &dw));
                accumulate(grads, nodes, *b, |dst| {
                    for (co, chunk) in gd.chunks(cols).enumerate() {
                        dst[co] += chunk.iter().sum::<f64>();
                    }
                });
                let mut dcol = vec![0.0; ckk * cols];
                gemm_tn_acc(wv.data(), gd, cout, ckk, cols, &mut dcol);
                accumulate(grads, nodes, *x, |dst| {
                    col2im_acc(&dcol, cin, h, wd, k, *stride, *pad, dst)
                });
            }
            Op::Sample { fm, taps } => {
                let dims = val(*fm).dims();
                let (c, hw) = (dims[0], dims[1] * dims[2]);
                accumulate(grads, nodes, *fm, |dst| {
                    for (p, point_taps) in taps.iter().enumerate() {
                        let grow = &gd[p * c..(p + 1) * c];
                        for &(cell, wgt) in point_taps {
                            for (ch, s) in grow.iter().enumerate() {
                                dst[ch * hw + cell] += wgt * s;
                            }
                        }
                    }
                });
            }
            Op::SampleAt { fm, xs, ys } => {
                let fmv = val(*fm);
                let (c, h, w) = (fmv.dims()[0], fmv.dims()[1], fmv.dims()[2]);
                let (xv, yv) = (val(*xs), val(*ys));
                let corners: Vec<Corners> = xv
                    .data()
                    .iter()
                    .zip(yv.data())
                    .map(|(&x, &y)| Corners::new(h, w, x, y))
                    .collect();
                accumulate(grads, nodes, *fm, |dst| {
                    for (p, k) in corners.iter().enumerate() {
                        for ch in 0..c {
                            k.scatter(&mut dst[ch * h * w..(ch + 1) * h * w], w, gd[p * c + ch]);
                        }
                    }
                });
                let mut dx = vec![0.0; corners.len()];
                let mut dy = vec![0.0; corners.len()];
                for (p, k) in corners.iter().enumerate() {
                    for ch in 0..c {
                        let (gx, gy) = k.slopes(&fmv.data()[ch * h * w..(ch + 1) * h * w], w);
                        dx[p] += gd[p * c + ch] * gx;
                        dy[p] += gd[p * c + ch] * gy;
                    }
                }
                accumulate(grads, nodes, *xs, |dst| add_into(dst, &dx));
                accumulate(grads, nodes, *ys, |dst| add_into(dst, &dy));
            }
            Op::Cells(a) => {
                let dims = val(*a).dims();
                let (c, hw) = (dims[0], dims[1] * dims[2]);
                accumulate(grads, nodes, *a, |dst| {
                    for cell in 0..hw {
                        for ch in 0..c {
                            dst[ch * hw + cell] += gd[cell * c + ch];
                        }
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let len = val(*p).len();
                    let slice = &gd[offset..offset + len];
                    accumulate(grads, nodes, *p, |dst| add_into(dst, slice));
                    offset += len;
                }
            }
            Op::GatherRows(a, idx) => {
                let c = val(*a).cols();
                accumulate(grads, nodes, *a, |dst| {
                    for (r, &i) in idx.iter().enumerate() {
                        add_into(&mut dst[i * c..(i + 1) * c], &gd[r * c..(r + 1) * c]);
                    }
                });
            }
            Op::MeanRows(a) => {
                let xv = val(*a);
                let (r, c) = (xv.rows(), xv.cols());
                accumulate(grads, nodes, *a, |dst| {
                    for row in dst.chunks_mut(c) {
                        for (d, s) in row.iter_mut().zip(gd) {
                            *d += s / r as f64;
                        }
                    }
                });
            }
            Op::NormalizeRows(a) => {
                let xv = val(*a);
                let y = node.value.data();
                let c = xv.cols();
                accumulate(grads, nodes, *a, |dst| {
                    for (((drow, grow), yrow), xrow) in dst
                        .chunks_mut(c)
                        .zip(gd.chunks(c))
                        .zip(y.chunks(c))
                        .zip(xv.data().chunks(c))
                    {
                        let norm = dot(xrow, xrow).sqrt();
                        if norm < NORM_FLOOR {
                            for (d, s) in drow.iter_mut().zip(grow) {
                                *d += s / NORM_FLOOR;
                            }
                            continue;
                        }
                        let proj = dot(yrow, grow);
                        for j in 0..c {
                            drow[j] += (grow[j] - yrow[j] * proj) / norm;
                        }
                    }
                });
            }
            Op::GroupMax { x, group } => {
                let xv = val(*x);
                let c = xv.cols();
                let gcount = c / group;
                accumulate(grads, nodes, *x, |dst| {
                    for (r, row) in xv.data().chunks(c).enumerate() {
                        for gi in 0..gcount {
                            let chunk = &row[gi * group..(gi + 1) * group];
                            let j = gi * group + argmax_in(chunk);
                            dst[r * c + j] += gd[r * gcount + gi];
                        }
                    }
                });
            }
            Op::Sum(a) => {
                let s = gd[0];
                accumulate(grads, nodes, *a, |dst| dst.iter_mut().for_each(|d| *d += s));
            }
            Op::Reshape(a, _) => {
                accumulate(grads, nodes, *a, |dst| add_into(dst, gd));
            }
        }
    }
}

/// Bilinear stencil of one clamped point.
struct Corners {
    x0: usize,
    x1: usize,
    y0: usize,
    y1: usize,
    fx: f64,
    fy: f64,
    x_free: bool,
    y_free: bool,
}

impl Corners {
    fn new(h: usize, w: usize, x: f64, y: f64) -> Self {
        let axis = |v: f64, n: usize| {
            let hi = (n - 1) as f64;
            let free = v > 0.0 && v < hi;
            let v = v.clamp(0.0, hi);
            let i0 = (v.floor() as usize).min(n.saturating_sub(2));
            let i1 = (i0 + 1).min(n - 1);
            (i0, i1, v - i0 as f64, free && n > 1)
        };
        let (x0, x1, fx, x_free) = axis(x, w);
        let (y0, y1, fy, y_free) = axis(y, h);
        Corners {
            x0,
            x1,
            y0,
            y1,
            fx,
            fy,
            x_free,
            y_free,
        }
    }

    fn interp(&self, plane: &[f64], w: usize) -> f64 {
        let at = |y: usize, x: usize| plane[y * w + x];
        (1.0 - self.fy) * ((1.0 - self.fx) * at(self.y0, self.x0) + self.fx * at(self.y0, self.x1))
            + self.fy * ((1.0 - self.fx) * at(self.y1, self.x0) + self.fx * at(self.y1, self.x1))
    }

    fn scatter(&self, plane: &mut [f64], w: usize, g: f64) {
        plane[self.y0 * w + self.x0] += g * (1.0 - self.fy) * (1.0 - self.fx);
        plane[self.y0 * w + self.x1] += g * (1.0 - self.fy) * self.fx;
        plane[self.y1 * w + self.x0] += g * self.fy * (1.0 - self.fx);
        plane[self.y1 * w + self.x1] += g * self.fy * self.fx;
    }

    fn slopes(&self, plane: &[f64], w: usize) -> (f64, f64) {
        let at = |y: usize, x: usize| plane[y * w + x];
        let gx = (1.0 - self.fy) * (at(self.y0, self.x1) - at(self.y0, self.x0))
            + self.fy * (at(self.y1, self.x1) - at(self.y1, self.x0));
        let gy = (1.0 - self.fx) * (at(self.y1, self.x0) - at(self.y0, self.x0))
            + self.fx * (at(self.y1, self.x1) - at(self.y0, self.x1));
        (
            if self.x_free { gx } else { 0.0 },
            if self.y_free { gy } else { 0.0 },
        )
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn accumulate(grads: &mut [Option<Tensor>], nodes: &[Node], v: Var, f: impl FnOnce(&mut [f64])) {
    let slot = &mut grads[v.0];
    if slot.is_none() {
        *slot = Some(Tensor::zeros(nodes[v.0].value.dims()));
    }
    if let Some(t) = slot.as_mut() {
        f(t.data_mut());
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::grad_check;
    use crate::rng::stream;
    use proptest::prelude::*;
    use rand::Rng as _;

    type Build = dyn Fn(&mut GradTape, &[Var]) -> Result<Var>;

    fn random(rng: &mut crate::rng::Rng, dims: &[usize]) -> Tensor {
        let n = dims.iter().product();
        Tensor::new(
            dims.to_vec(),
            (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect(),
        )
        .unwrap()
    }

    fn run(build: &Build, inputs: &[Tensor]) -> Result<(GradTape, Vec<Var>, Var)> {
        let mut tape = GradTape::new();
        let vars: Vec<Var> = inputs
            .iter()
            .enumerate()
            .map(|(i, x)| tape.param(&format!("in{i}"), x))
            .collect();
        let out = build(&mut tape, &vars)?;
        Ok((tape, vars, out))
    }

    fn unflatten(flat: &[f64], like: &[Tensor]) -> Vec<Tensor> {
        let mut offset = 0;
        like.iter()
            .map(|t| {
                let t2 =
                    Tensor::from_parts(t.dims().to_vec(), flat[offset..offset + t.len()].to_vec());
                offset += t.len();
                t2
            })
            .collect()
    }

    /// Checks `sum(op(inputs) ⊙ w)` against finite differences at 100 random probes.
    fn check(name: &str, build: &Build, dims: &[&[usize]]) {
        let mut rng = stream(11, name);
        for _ in 0..100 {
            let inputs: Vec<Tensor> = dims.iter().map(|d| random(&mut rng, d)).collect();
            let (tape, vars, out) = run(build, &inputs).unwrap();
            let w = random(&mut rng, tape.value(out).dims());
            let grads = tape.backward(&[(out, w.clone())]).unwrap();
            let analytic: Vec<f64> = vars
                .iter()
                .flat_map(|v| grads.wrt(*v).unwrap().data().to_vec())
                .collect();
            let flat: Vec<f64> = inputs.iter().flat_map(|t| t.data().to_vec()).collect();
            let f = |x: &[f64]| {
                let (tape, _, out) = run(build, &unflatten(x, &inputs))?;
                Ok(dot(tape.value(out).data(), w.data()))
            };
            let report = grad_check(f, &flat, &analytic, 1e-5, 1e-4).unwrap();
            assert!(report.passed, "{name}: {report:?}");
        }
    }

    #[test]
    fn matmul_gradients() {
        check("matmul", &|t, v| t.matmul(v[0], v[1]), &[&[3, 4], &[4, 2]]);
        check(
            "matmul_bt",
            &|t, v| t.matmul_bt(v[0], v[1]),
            &[&[3, 4], &[2, 4]],
        );
    }

    #[test]
    fn elementwise_gradients() {
        check("add", &|t, v| t.add(v[0], v[1]), &[&[2, 3], &[2, 3]]);
        check("sub", &|t, v| t.sub(v[0], v[1]), &[&[2, 3], &[2, 3]]);
        check("mul", &|t, v| t.mul(v[0], v[1]), &[&[2, 3], &[2, 3]]);
        check("add_row", &|t, v| t.add_row(v[0], v[1]), &[&[3, 4], &[4]]);
        check("scale", &|t, v| t.scale(v[0], -1.7), &[&[2, 3]]);
        check("sigmoid", &|t, v| t.sigmoid(v[0]), &[&[2, 3]]);
        check("silu", &|t, v| t.silu(v[0]), &[&[2, 3]]);
        check("relu", &|t, v| t.relu(v[0]), &[&[2, 3]]);
    }

    #[test]
    fn row_gradients() {
        check("softmax", &|t, v| t.softmax_rows(v[0]), &[&[2, 4]]);
        check(
            "layer_norm",
            &|t, v| t.layer_norm(v[0], v[1], v[2]),
            &[&[3, 5], &[5], &[5]],
        );
        check("mean_rows", &|t, v| t.mean_rows(v[0]), &[&[3, 4]]);
        check("normalize_rows", &|t, v| t.normalize_rows(v[0]), &[&[2, 3]]);
        check("group_max", &|t, v| t.group_max(v[0], 3), &[&[2, 6]]);
    }

    #[test]
    fn structural_gradients() {
        check(
            "concat",
            &|t, v| t.concat_rows(&[v[0], v[1]]),
            &[&[2, 3], &[1, 3]],
        );
        check(
            "gather",
            &|t, v| t.gather_rows(v[0], &[2, 0, 2]),
            &[&[4, 3]],
        );
        check("sum", &|t, v| t.sum(v[0]), &[&[2, 3]]);
        check("reshape", &|t, v| t.reshape(v[0], &[3, 2]), &[&[2, 3]]);
        check("cells", &|t, v| t.cells(v[0]), &[&[2, 3, 3]]);
    }

    #[test]
    fn spatial_gradients() {
        check(
            "conv",
            &|t, v| t.conv2d(v[0], v[1], v[2], 2, 1),
            &[&[2, 5, 5], &[3, 2, 3, 3], &[3]],
        );
        check(
            "conv_s1",
            &|t, v| t.conv2d(v[0], v[1], v[2], 1, 1),
            &[&[1, 4, 4], &[2, 1, 3, 3], &[2]],
        );
        check(
            "sample",
            &|t, v| t.bilinear_sample(v[0], &[(0.3, 1.7), (3.2, 0.5), (4.0, 3.0)]),
            &[&[2, 4, 5]],
        );
        fn shifted(t: &mut GradTape, v: Var, by: f64) -> Result<Var> {
            let off = t.constant(Tensor::filled(t.value(v).dims(), by));
            t.add(v, off)
        }
        check(
            "sample_at",
            &|t, v| {
                let xs = shifted(t, v[1], 2.2)?;
                let ys = shifted(t, v[2], 1.6)?;
                t.sample_at(v[0], xs, ys)
            },
            &[&[2, 4, 5], &[6], &[6]],
        );
    }

    #[test]
    fn sample_at_matches_fixed_taps() {
        let mut rng = stream(5, "sample_at");
        let fm = random(&mut rng, &[3, 4, 6]);
        let pts = [
            (0.0, 0.0),
            (5.0, 3.0),
            (2.5, 1.25),
            (4.999, 0.001),
            (3.0, 2.0),
        ];
        let mut tape = GradTape::new();
        let f = tape.constant(fm.clone());
        let xs = tape.constant(Tensor::new(vec![5], pts.iter().map(|p| p.0).collect()).unwrap());
        let ys = tape.constant(Tensor::new(vec![5], pts.iter().map(|p| p.1).collect()).unwrap());
        let a = tape.sample_at(f, xs, ys).unwrap();
        let b = super::super::bilinear_sample(&fm, &pts).unwrap();
        for (x, y) in tape.value(a).data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-12);
        }
        let xs = tape.constant(Tensor::new(vec![1], vec![-3.0]).unwrap());
        let ys = tape.constant(Tensor::new(vec![1], vec![9.0]).unwrap());
        let c = tape.sample_at(f, xs, ys).unwrap();
        let g = tape.backward(&[(c, Tensor::filled(&[1, 3], 1.0))]).unwrap();
        assert_eq!(g.wrt(xs).unwrap().data(), &[0.0]);
        assert_eq!(g.wrt(ys).unwrap().data(), &[0.0]);
        assert_eq!(
            tape.value(c).row(0),
            &[fm.data()[18], fm.data()[42], fm.data()[66]]
        );
    }

    #[test]
    fn composite_gradient() {
        // attention block: softmax(q kᵀ) v, then layer norm and sigmoid
        let build: &Build = &|t, v| {
            let s = t.matmul_bt(v[0], v[1])?;
            let a = t.softmax_rows(s)?;
            let o = t.matmul(a, v[2])?;
            let r = t.add(o, v[0])?;
            let n = t.layer_norm(r, v[3], v[4])?;
            t.sigmoid(n)
        };
        check("attention", build, &[&[2, 4], &[5, 4], &[5, 4], &[4], &[4]]);
    }

    #[test]
    fn replay_is_bit_exact() {
        let mut rng = stream(3, "replay");
        let mut t = GradTape::new();
        let a = t.param("a", &random(&mut rng, &[3, 4]));
        let b = t.param("b", &random(&mut rng, &[4, 4]));
        let m = t.matmul(a, b).unwrap();
        let s = t.softmax_rows(m).unwrap();
        let n = t.normalize_rows(s).unwrap();
        let y = t.sum(n).unwrap();
        let replayed = t.replay().unwrap();
        for (i, r) in replayed.iter().enumerate() {
            assert_eq!(r.data(), t.value(Var(i)).data());
        }
        assert_eq!(
            replayed[y.index()].data()[0].to_bits(),
            t.value(y).data()[0].to_bits()
        );
    }

    #[test]
    fn unused_param_gets_zero_gradient() {
        let mut t = GradTape::new();
        let a = t.param("a", &Tensor::filled(&[2], 1.0));
        let _unused = t.param("unused", &Tensor::filled(&[3], 1.0));
        let y = t.sum(a).unwrap();
        let g = t.backward(&[(y, Tensor::scalar(1.0))]).unwrap();
        let all = g.params();
        assert_eq!(all.len(), 2);
        assert_eq!(all["unused"], Tensor::zeros(&[3]));
        assert_eq!(all["a"], Tensor::filled(&[2], 1.0));
    }

    #[test]
    fn param_registration_is_idempotent() {
        let mut t = GradTape::new();
        let a = t.param("w", &Tensor::scalar(1.0));
        let b = t.param("w", &Tensor::scalar(5.0));
        assert_eq!(a, b);
        assert_eq!(t.param_var("w"), Some(a));
    }

    #[test]
    fn seeds_accumulate() {
        let mut t = GradTape::new();
        let x = t.param("x", &Tensor::scalar(2.0));
        let y = t.scale(x, 3.0).unwrap();
        let z = t.scale(x, 5.0).unwrap();
        let g = t
            .backward(&[(y, Tensor::scalar(1.0)), (z, Tensor::scalar(2.0))])
            .unwrap();
        assert_eq!(g.param("x").unwrap().data(), &[13.0]);
    }

    #[test]
    fn seed_shape_checked() {
        let mut t = GradTape::new();
        let x = t.param("x", &Tensor::zeros(&[2]));
        assert!(t.backward(&[(x, Tensor::scalar(1.0))]).is_err());
    }

    #[test]
    fn group_max_tie_goes_to_lowest_index() {
        let mut t = GradTape::new();
        let x = t.param(
            "x",
            &Tensor::from_rows(&[vec![1.0, 3.0, 3.0, 0.0]]).unwrap(),
        );
        let m = t.group_max(x, 4).unwrap();
        assert_eq!(t.value(m).data(), &[3.0]);
        let g = t
            .backward(&[(m, Tensor::scalar(1.0).reshape(&[1, 1]).unwrap())])
            .unwrap();
        assert_eq!(g.param("x").unwrap().data(), &[0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn conv_matches_direct_sum() {
        let mut rng = stream(5, "conv");
        let x = random(&mut rng, &[2, 5, 4]);
        let w = random(&mut rng, &[3, 2, 3, 3]);
        let b = random(&mut rng, &[3]);
        let mut t = GradTape::new();
        let (xv, wv, bv) = (
            t.constant(x.clone()),
            t.constant(w.clone()),
            t.constant(b.clone()),
        );
        let y = t.conv2d(xv, wv, bv, 2, 1).unwrap();
        let out = t.value(y);
        assert_eq!(out.dims(), &[3, 3, 2]);
        for co in 0..3 {
            for oy in 0..3 {
                for ox in 0..2 {
                    let mut s = b.data()[co];
                    for ci in 0..2 {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let iy = (oy * 2 + ky) as isize - 1;
                                let ix = (ox * 2 + kx) as isize - 1;
                                if (0..5).contains(&iy) && (0..4).contains(&ix) {
                                    s += w.data()[((co * 2 + ci) * 3 + ky) * 3 + kx]
                                        * x.data()[(ci * 5 + iy as usize) * 4 + ix as usize];
                                }
                            }
                        }
                    }
                    let got = out.data()[(co * 3 + oy) * 2 + ox];
                    assert!((got - s).abs() < 1e-12, "{got} vs {s}");
                }
            }
        }
    }

    #[test]
    fn shape_errors() {
        let mut t = GradTape::new();
        let a = t.constant(Tensor::zeros(&[2, 3]));
        let b = t.constant(Tensor::zeros(&[2, 2]));
        assert!(t.add(a, b).is_err());
        assert!(t.matmul(a, b).is_err());
        assert!(t.group_max(a, 2).is_err());
        assert!(t.gather_rows(a, &[5]).is_err());
        assert!(t.cells(a).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn softmax_rows_sum_to_one(data in proptest::collection::vec(-30.0f64..30.0, 12)) {
            let mut t = GradTape::new();
            let x = t.constant(Tensor::new(vec![3, 4], data).unwrap());
            let s = t.softmax_rows(x).unwrap();
            for row in t.value(s).data().chunks(4) {
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                prop_assert!(row.iter().all(|&p| p > 0.0));
            }
        }

        #[test]
        fn forward_is_deterministic(seed in 0u64..1000) {
            let build = |seed| {
                let mut rng = stream(seed, "det");
                let mut t = GradTape::new();
                let a = t.param("a", &random(&mut rng, &[4, 6]));
                let b = t.param("b", &random(&mut rng, &[6, 6]));
                let m = t.matmul(a, b).unwrap();
                let s = t.silu(m).unwrap();
                let y = t.sum(s).unwrap();
                let g = t.backward(&[(y, Tensor::scalar(1.0))]).unwrap();
                (t.value(y).data()[0].to_bits(), g.param("a").unwrap())
            };
            prop_assert_eq!(build(seed), build(seed));
        }

        #[test]
        fn matmul_identity_is_neutral(data in proptest::collection::vec(-5.0f64..5.0, 6)) {
            let a = Tensor::new(vec![2, 3], data).unwrap();
            prop_assert_eq!(crate::numcore::matmul(&Tensor::eye(2), &a).unwrap(), a.clone());
            prop_assert_eq!(crate::numcore::matmul(&a, &Tensor::eye(3)).unwrap(), a);
        }
    }
}
