//! Reverse-mode autodiff over a flat op tape.
//!
//! Values are computed eagerly as ops are recorded; `backward` replays the
//! tape in reverse and accumulates gradients into parameter slots. The op
//! set is exactly what the pipeline needs, nothing more.

use ndarray::{Array1, Array2, ArrayD, ArrayView2, Axis, IxDyn};

use super::kernels;
use super::params::{ParamId, ParamStore};

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

const GELU_C: f64 = 0.7978845608028654; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad_scalar(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

enum Op {
    Const,
    Param(ParamId),
    Add(Var, Var),
    /// Weighted sum of same-shaped inputs.
    LinComb(Vec<(Var, f64)>),
    Scale(Var, f64),
    MatMul(Var, Var),
    Transpose(Var),
    /// (R,C) plus a length-C bias row.
    AddBias(Var, Var),
    Gelu(Var),
    Sigmoid(Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    },
    ColsSlice {
        x: Var,
        start: usize,
        len: usize,
    },
    ConcatCols(Vec<Var>),
    Reshape(Var),
    RepeatRows {
        x: Var,
        times: usize,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
    },
    Upsample2x(Var),
    RoiAlign {
        x: Var,
        grid: Vec<(f64, f64)>,
    },
    /// Per-row cross entropy with integer labels, weighted and divided.
    CeRows {
        logits: Var,
        labels: Vec<usize>,
        weights: Vec<f64>,
        divisor: f64,
    },
    /// Per-row L1 distance to a constant target, weighted and divided.
    L1Rows {
        pred: Var,
        target: Array2<f64>,
        weights: Vec<f64>,
        divisor: f64,
    },
}

struct Node {
    value: ArrayD<f64>,
    op: Op,
}

/// A recording of one forward pass.
pub struct Tape<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
}

fn as2(v: &ArrayD<f64>) -> ArrayView2<'_, f64> {
    v.view().into_dimensionality().expect("expected 2-d value")
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self { params, nodes: Vec::with_capacity(256) }
    }

    pub fn params(&self) -> &ParamStore {
        self.params
    }

    fn push(&mut self, value: ArrayD<f64>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &ArrayD<f64> {
        &self.nodes[v.0].value
    }

    pub fn value2(&self, v: Var) -> ArrayView2<'_, f64> {
        as2(&self.nodes[v.0].value)
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let val = &self.nodes[v.0].value;
        debug_assert_eq!(val.len(), 1, "scalar() on non-scalar node");
        *val.iter().next().unwrap()
    }

    pub fn constant(&mut self, value: ArrayD<f64>) -> Var {
        self.push(value, Op::Const)
    }

    pub fn constant2(&mut self, value: Array2<f64>) -> Var {
        self.push(value.into_dyn(), Op::Const)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        let value = self.params.value(id).clone();
        self.push(value, Op::Param(id))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = &self.nodes[a.0].value + &self.nodes[b.0].value;
        self.push(value, Op::Add(a, b))
    }

    pub fn lincomb(&mut self, terms: &[(Var, f64)]) -> Var {
        assert!(!terms.is_empty());
        let mut value = self.nodes[terms[0].0 .0].value.clone() * terms[0].1;
        for &(v, c) in &terms[1..] {
            value = value + &self.nodes[v.0].value * c;
        }
        self.push(value, Op::LinComb(terms.to_vec()))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = &self.nodes[a.0].value * c;
        self.push(value, Op::Scale(a, c))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = as2(&self.nodes[a.0].value)
            .dot(&as2(&self.nodes[b.0].value))
            .into_dyn();
        self.push(value, Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = as2(&self.nodes[a.0].value).t().to_owned().into_dyn();
        self.push(value, Op::Transpose(a))
    }

    pub fn add_bias(&mut self, x: Var, b: Var) -> Var {
        let xv = as2(&self.nodes[x.0].value).to_owned();
        let bv = &self.nodes[b.0].value;
        let b1: Array1<f64> = bv.view().into_dimensionality().expect("1-d bias").to_owned();
        let mut out = xv;
        for mut row in out.rows_mut() {
            row += &b1;
        }
        self.push(out.into_dyn(), Op::AddBias(x, b))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.mapv(gelu_scalar);
        self.push(value, Op::Gelu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.mapv(sigmoid_scalar);
        self.push(value, Op::Sigmoid(a))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let x = as2(&self.nodes[a.0].value);
        let mut out = x.to_owned();
        for mut row in out.rows_mut() {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            row.mapv_inplace(|v| (v - m).exp());
            let s = row.sum();
            row.mapv_inplace(|v| v / s);
        }
        self.push(out.into_dyn(), Op::SoftmaxRows(a))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let xv = as2(&self.nodes[x.0].value);
        let g: Array1<f64> = self.nodes[gamma.0]
            .value
            .view()
            .into_dimensionality()
            .expect("1-d gamma")
            .to_owned();
        let b: Array1<f64> = self.nodes[beta.0]
            .value
            .view()
            .into_dimensionality()
            .expect("1-d beta")
            .to_owned();
        let d = xv.ncols() as f64;
        let mut out = xv.to_owned();
        for mut row in out.rows_mut() {
            let mu = row.sum() / d;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d;
            let inv = 1.0 / (var + eps).sqrt();
            for (j, v) in row.iter_mut().enumerate() {
                *v = (*v - mu) * inv * g[j] + b[j];
            }
        }
        self.push(out.into_dyn(), Op::LayerNorm { x, gamma, beta, eps })
    }

    pub fn cols_slice(&mut self, x: Var, start: usize, len: usize) -> Var {
        let xv = as2(&self.nodes[x.0].value);
        let value = xv.slice(ndarray::s![.., start..start + len]).to_owned().into_dyn();
        self.push(value, Op::ColsSlice { x, start, len })
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<ArrayView2<f64>> =
            parts.iter().map(|v| as2(&self.nodes[v.0].value)).collect();
        let value = ndarray::concatenate(Axis(1), &views).expect("concat cols").into_dyn();
        self.push(value, Op::ConcatCols(parts.to_vec()))
    }

    /// Reinterpret a standard-layout value with a new shape.
    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let value = self.nodes[x.0]
            .value
            .view()
            .to_shape(IxDyn(shape))
            .expect("reshape-compatible")
            .to_owned();
        self.push(value, Op::Reshape(x))
    }

    pub fn repeat_rows(&mut self, x: Var, times: usize) -> Var {
        let xv = as2(&self.nodes[x.0].value);
        let (r, c) = xv.dim();
        let mut out = Array2::<f64>::zeros((r * times, c));
        for i in 0..r {
            for t in 0..times {
                out.row_mut(i * times + t).assign(&xv.row(i));
            }
        }
        self.push(out.into_dyn(), Op::RepeatRows { x, times })
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Var {
        let xv = self.nodes[x.0].value.view().into_dimensionality().expect("3-d input");
        let wv = self.nodes[w.0].value.view().into_dimensionality().expect("4-d weight");
        let bv: Array1<f64> = self.nodes[b.0]
            .value
            .view()
            .into_dimensionality()
            .expect("1-d bias")
            .to_owned();
        let out = kernels::conv2d(&xv, &wv, &bv, stride, pad);
        self.push(out.into_dyn(), Op::Conv2d { x, w, b, stride, pad })
    }

    pub fn upsample2x(&mut self, x: Var) -> Var {
        let xv = self.nodes[x.0].value.view().into_dimensionality().expect("3-d input");
        let out = kernels::upsample2x(&xv);
        self.push(out.into_dyn(), Op::Upsample2x(x))
    }

    pub fn roi_align(&mut self, x: Var, grid: Vec<(f64, f64)>, s: usize) -> Var {
        let xv: ndarray::ArrayView3<f64> =
            self.nodes[x.0].value.view().into_dimensionality().expect("3-d feature");
        let c = xv.dim().2;
        let flat = kernels::roi_sample(&xv, &grid);
        let out = flat.into_shape_with_order((s, s, c)).expect("roi reshape");
        self.push(out.into_dyn(), Op::RoiAlign { x, grid })
    }

    pub fn ce_rows(&mut self, logits: Var, labels: &[usize], weights: &[f64], divisor: f64) -> Var {
        let lv = as2(&self.nodes[logits.0].value);
        assert_eq!(lv.nrows(), labels.len());
        assert_eq!(lv.nrows(), weights.len());
        let mut total = 0.0;
        for (r, row) in lv.rows().into_iter().enumerate() {
            if weights[r] == 0.0 {
                continue;
            }
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            total += weights[r] * (lse - row[labels[r]]);
        }
        let value = ArrayD::from_elem(IxDyn(&[]), total / divisor);
        self.push(
            value,
            Op::CeRows {
                logits,
                labels: labels.to_vec(),
                weights: weights.to_vec(),
                divisor,
            },
        )
    }

    pub fn l1_rows(&mut self, pred: Var, target: Array2<f64>, weights: &[f64], divisor: f64) -> Var {
        let pv = as2(&self.nodes[pred.0].value);
        assert_eq!(pv.dim(), target.dim());
        assert_eq!(pv.nrows(), weights.len());
        let mut total = 0.0;
        for r in 0..pv.nrows() {
            if weights[r] == 0.0 {
                continue;
            }
            let mut s = 0.0;
            for c in 0..pv.ncols() {
                s += (pv[[r, c]] - target[[r, c]]).abs();
            }
            total += weights[r] * s;
        }
        let value = ArrayD::from_elem(IxDyn(&[]), total / divisor);
        self.push(
            value,
            Op::L1Rows { pred, target, weights: weights.to_vec(), divisor },
        )
    }

    /// Reverse pass from a scalar node; returns per-parameter gradients.
    pub fn backward(&self, loss: Var) -> Vec<Option<ArrayD<f64>>> {
        let mut grads: Vec<Option<ArrayD<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut param_grads = self.params.zero_grads();
        grads[loss.0] = Some(ArrayD::from_elem(self.nodes[loss.0].value.raw_dim(), 1.0));

        for i in (0..self.nodes.len()).rev() {
            let Some(g) = grads[i].take() else { continue };
            match &self.nodes[i].op {
                Op::Const => {}
                Op::Param(pid) => {
                    match &mut param_grads[pid.0] {
                        Some(acc) => *acc += &g,
                        slot => *slot = Some(g),
                    }
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g);
                }
                Op::LinComb(terms) => {
                    for &(v, c) in terms {
                        accumulate(&mut grads, v, &g * c);
                    }
                }
                Op::Scale(a, c) => accumulate(&mut grads, *a, &g * *c),
                Op::MatMul(a, b) => {
                    let g2 = as2(&g);
                    let av = as2(&self.nodes[a.0].value);
                    let bv = as2(&self.nodes[b.0].value);
                    accumulate(&mut grads, *a, g2.dot(&bv.t()).into_dyn());
                    accumulate(&mut grads, *b, av.t().dot(&g2).into_dyn());
                }
                Op::Transpose(a) => {
                    accumulate(&mut grads, *a, as2(&g).t().to_owned().into_dyn());
                }
                Op::AddBias(x, b) => {
                    let g2 = as2(&g);
                    accumulate(&mut grads, *b, g2.sum_axis(Axis(0)).into_dyn());
                    accumulate(&mut grads, *x, g);
                }
                Op::Gelu(a) => {
                    let dx = self.nodes[a.0].value.mapv(gelu_grad_scalar) * &g;
                    accumulate(&mut grads, *a, dx);
                }
                Op::Sigmoid(a) => {
                    let s = &self.nodes[i].value;
                    let dx = s.mapv(|v| v * (1.0 - v)) * &g;
                    accumulate(&mut grads, *a, dx);
                }
                Op::SoftmaxRows(a) => {
                    let p = as2(&self.nodes[i].value);
                    let g2 = as2(&g);
                    let mut dx = Array2::<f64>::zeros(p.dim());
                    for r in 0..p.nrows() {
                        let dot: f64 = p.row(r).iter().zip(g2.row(r)).map(|(x, y)| x * y).sum();
                        for c in 0..p.ncols() {
                            dx[[r, c]] = p[[r, c]] * (g2[[r, c]] - dot);
                        }
                    }
                    accumulate(&mut grads, *a, dx.into_dyn());
                }
                Op::LayerNorm { x, gamma, beta, eps } => {
                    let xv = as2(&self.nodes[x.0].value);
                    let gv: Array1<f64> = self.nodes[gamma.0]
                        .value
                        .view()
                        .into_dimensionality()
                        .unwrap()
                        .to_owned();
                    let g2 = as2(&g);
                    let d = xv.ncols();
                    let df = d as f64;
                    let mut dx = Array2::<f64>::zeros(xv.dim());
                    let mut dgamma = Array1::<f64>::zeros(d);
                    let mut dbeta = Array1::<f64>::zeros(d);
                    for r in 0..xv.nrows() {
                        let row = xv.row(r);
                        let mu = row.sum() / df;
                        let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / df;
                        let inv = 1.0 / (var + eps).sqrt();
                        let xhat: Vec<f64> = row.iter().map(|v| (v - mu) * inv).collect();
                        let gr = g2.row(r);
                        let mut mean_dxh = 0.0;
                        let mut mean_dxh_xh = 0.0;
                        for j in 0..d {
                            let dxh = gr[j] * gv[j];
                            mean_dxh += dxh;
                            mean_dxh_xh += dxh * xhat[j];
                            dgamma[j] += gr[j] * xhat[j];
                            dbeta[j] += gr[j];
                        }
                        mean_dxh /= df;
                        mean_dxh_xh /= df;
                        for j in 0..d {
                            let dxh = gr[j] * gv[j];
                            dx[[r, j]] = inv * (dxh - mean_dxh - xhat[j] * mean_dxh_xh);
                        }
                    }
                    accumulate(&mut grads, *x, dx.into_dyn());
                    accumulate(&mut grads, *gamma, dgamma.into_dyn());
                    accumulate(&mut grads, *beta, dbeta.into_dyn());
                }
                Op::ColsSlice { x, start, len } => {
                    let xv = as2(&self.nodes[x.0].value);
                    let g2 = as2(&g);
                    let mut dx = Array2::<f64>::zeros(xv.dim());
                    dx.slice_mut(ndarray::s![.., *start..start + len]).assign(&g2);
                    accumulate(&mut grads, *x, dx.into_dyn());
                }
                Op::ConcatCols(parts) => {
                    let g2 = as2(&g);
                    let mut offset = 0;
                    for &p in parts {
                        let w = as2(&self.nodes[p.0].value).ncols();
                        let gp = g2.slice(ndarray::s![.., offset..offset + w]).to_owned();
                        accumulate(&mut grads, p, gp.into_dyn());
                        offset += w;
                    }
                }
                Op::Reshape(x) => {
                    let shaped = g
                        .view()
                        .to_shape(self.nodes[x.0].value.raw_dim())
                        .expect("reshape grad")
                        .to_owned();
                    accumulate(&mut grads, *x, shaped);
                }
                Op::RepeatRows { x, times } => {
                    let g2 = as2(&g);
                    let (rt, c) = g2.dim();
                    let r = rt / times;
                    let mut dx = Array2::<f64>::zeros((r, c));
                    for i2 in 0..r {
                        for t in 0..*times {
                            let row = g2.row(i2 * times + t);
                            let mut acc = dx.row_mut(i2);
                            acc += &row;
                        }
                    }
                    accumulate(&mut grads, *x, dx.into_dyn());
                }
                Op::Conv2d { x, w, b, stride, pad } => {
                    let xv = self.nodes[x.0].value.view().into_dimensionality().unwrap();
                    let wv = self.nodes[w.0].value.view().into_dimensionality().unwrap();
                    let gv = g.view().into_dimensionality().unwrap();
                    let (dx, dw, db) = kernels::conv2d_backward(&xv, &wv, &gv, *stride, *pad);
                    accumulate(&mut grads, *x, dx.into_dyn());
                    accumulate(&mut grads, *w, dw.into_dyn());
                    accumulate(&mut grads, *b, db.into_dyn());
                }
                Op::Upsample2x(x) => {
                    let gv = g.view().into_dimensionality().unwrap();
                    let dx = kernels::upsample2x_backward(&gv);
                    accumulate(&mut grads, *x, dx.into_dyn());
                }
                Op::RoiAlign { x, grid } => {
                    let (h, w, c) = self.nodes[x.0]
                        .value
                        .view()
                        .into_dimensionality::<ndarray::Ix3>()
                        .unwrap()
                        .dim();
                    let s2 = grid.len();
                    let g2 = g.view().to_shape((s2, c)).expect("grad reshape").to_owned();
                    let dx = kernels::roi_sample_backward(&g2.view(), grid, h, w, c);
                    accumulate(&mut grads, *x, dx.into_dyn());
                }
                Op::CeRows { logits, labels, weights, divisor } => {
                    let scale = g.iter().next().copied().unwrap_or(1.0) / divisor;
                    let lv = as2(&self.nodes[logits.0].value);
                    let mut dl = Array2::<f64>::zeros(lv.dim());
                    for (r, row) in lv.rows().into_iter().enumerate() {
                        if weights[r] == 0.0 {
                            continue;
                        }
                        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let exps: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
                        let sum: f64 = exps.iter().sum();
                        for c in 0..row.len() {
                            let p = exps[c] / sum;
                            let ind = if c == labels[r] { 1.0 } else { 0.0 };
                            dl[[r, c]] = weights[r] * scale * (p - ind);
                        }
                    }
                    accumulate(&mut grads, *logits, dl.into_dyn());
                }
                Op::L1Rows { pred, target, weights, divisor } => {
                    let scale = g.iter().next().copied().unwrap_or(1.0) / divisor;
                    let pv = as2(&self.nodes[pred.0].value);
                    let mut dp = Array2::<f64>::zeros(pv.dim());
                    for r in 0..pv.nrows() {
                        if weights[r] == 0.0 {
                            continue;
                        }
                        for c in 0..pv.ncols() {
                            let diff = pv[[r, c]] - target[[r, c]];
                            dp[[r, c]] = weights[r] * scale * diff.signum();
                        }
                    }
                    accumulate(&mut grads, *pred, dp.into_dyn());
                }
            }
        }
        param_grads
    }
}

fn accumulate(grads: &mut [Option<ArrayD<f64>>], v: Var, g: ArrayD<f64>) {
    match &mut grads[v.0] {
        Some(acc) => *acc += &g,
        slot => *slot = Some(g),
    }
}
