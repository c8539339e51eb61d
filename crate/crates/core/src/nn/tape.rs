//! Reverse-mode automatic differentiation over row-major matrices.
//!
//! A [`Tape`] records every operation of one forward pass. Operations are
//! coarse (whole-matrix products, fused selective scan, fused attention) so
//! the bookkeeping cost is negligible next to the arithmetic.

use ndarray::{s, Axis, Zip};

use super::{loss, Grads, Mat, ParamId, ParamSet};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

struct ScanCache {
    u: Var,
    delta: Var,
    a_log: Var,
    b: Var,
    c: Var,
    d: Var,
    /// Hidden states, laid out `[t][i][j]`.
    states: Vec<f64>,
    /// `exp(delta·A)` in the same layout.
    decays: Vec<f64>,
}

struct AttnCache {
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    probs: Vec<Mat>,
}

enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    AddRow(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Silu(Var),
    Softplus(Var),
    Gelu(Var),
    /// `inv_rms` holds one entry per row, or a single entry when the whole
    /// matrix shares one scale.
    RmsNorm {
        x: Var,
        gain: Var,
        inv_rms: Vec<f64>,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        xhat: Mat,
        inv_std: Vec<f64>,
    },
    GatherRows {
        table: Var,
        idx: Vec<usize>,
    },
    ReplaceRows {
        x: Var,
        row: Var,
        mask: Vec<bool>,
    },
    ReverseRows(Var),
    MeanRows(Var),
    Scan(Box<ScanCache>),
    Attention(Box<AttnCache>),
    /// Scalar loss of a prediction against a constant target; the gradient
    /// with respect to the prediction is computed during the forward pass.
    Loss {
        pred: Var,
        dpred: Mat,
    },
    WeightedSum(Vec<(Var, f64)>),
}

struct Node {
    value: Mat,
    op: Op,
    requires_grad: bool,
}

pub struct Tape<'p> {
    params: &'p ParamSet,
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
}

/// Result of [`Tape::backward`]: gradients for every recorded node and for
/// every parameter reached by the loss.
pub struct Gradients {
    nodes: Vec<Option<Mat>>,
    pub params: Grads,
}

impl Gradients {
    pub fn of(&self, v: Var) -> Option<&Mat> {
        self.nodes[v.0].as_ref()
    }
}

const NORM_EPS: f64 = 1e-5;

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_K * (x + GELU_C * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_K * (x + GELU_C * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_K * (1.0 + 3.0 * GELU_C * x * x)
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamSet) -> Self {
        Self {
            params,
            nodes: Vec::with_capacity(256),
            param_vars: vec![None; params.len()],
        }
    }

    pub fn params(&self) -> &'p ParamSet {
        self.params
    }

    fn push(&mut self, value: Mat, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Mat {
        match self.nodes[v.0].op {
            Op::Param(id) => self.params.get(id),
            _ => &self.nodes[v.0].value,
        }
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        debug_assert_eq!(m.dim(), (1, 1));
        m[[0, 0]]
    }

    /// A constant input; gradients still flow to it if a consumer needs them.
    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A constant input that gradients should be reported for.
    pub fn input(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        let trainable = self.params.entry(id).trainable;
        let v = self.push(Mat::zeros((0, 0)), Op::Param(id), trainable);
        self.param_vars[id.0] = Some(v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::MatMul(a, b), rg)
    }

    /// `x + row`, broadcasting a `1×m` row over every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Var {
        let r = self.value(row);
        assert_eq!(r.nrows(), 1, "add_row expects a single row");
        let value = self.value(x) + r;
        let rg = self.rg(x) || self.rg(row);
        self.push(value, Op::AddRow(x, row), rg)
    }

    /// `x·W (+ b)` for parameters `W` and optional bias `b`.
    pub fn linear(&mut self, x: Var, w: ParamId, b: Option<ParamId>) -> Var {
        let w = self.param(w);
        let y = self.matmul(x, w);
        match b {
            Some(b) => {
                let b = self.param(b);
                self.add_row(y, b)
            }
            None => y,
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) + self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Add(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) * self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Mul(a, b), rg)
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Var {
        let value = self.value(x) * k;
        let rg = self.rg(x);
        self.push(value, Op::Scale(x, k), rg)
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let value = self.value(x).mapv(|v| v * sigmoid(v));
        let rg = self.rg(x);
        self.push(value, Op::Silu(x), rg)
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        let value = self.value(x).mapv(softplus);
        let rg = self.rg(x);
        self.push(value, Op::Softplus(x), rg)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let value = self.value(x).mapv(gelu);
        let rg = self.rg(x);
        self.push(value, Op::Gelu(x), rg)
    }

    /// Row-wise RMS normalization with a learnable `1×d` gain.
    pub fn rms_norm(&mut self, x: Var, gain: ParamId) -> Var {
        let gain = self.param(gain);
        let xv = self.value(x);
        let g = self.value(gain);
        let d = xv.ncols() as f64;
        let mut value = xv.clone();
        let mut inv_rms = Vec::with_capacity(xv.nrows());
        for mut row in value.rows_mut() {
            let ms = row.iter().map(|v| v * v).sum::<f64>() / d;
            let inv = 1.0 / (ms + NORM_EPS).sqrt();
            inv_rms.push(inv);
            Zip::from(&mut row).and(g.row(0)).for_each(|v, &gj| *v *= inv * gj);
        }
        let rg = self.rg(x) || self.rg(gain);
        self.push(value, Op::RmsNorm { x, gain, inv_rms }, rg)
    }

    /// RMS normalization with one scale for the whole matrix, so relative
    /// magnitudes between rows survive.
    pub fn rms_norm_global(&mut self, x: Var, gain: ParamId) -> Var {
        let gain = self.param(gain);
        let xv = self.value(x);
        let ms = xv.iter().map(|v| v * v).sum::<f64>() / xv.len().max(1) as f64;
        let inv = 1.0 / (ms + NORM_EPS).sqrt();
        let value = xv * &(self.value(gain) * inv);
        let rg = self.rg(x) || self.rg(gain);
        self.push(
            value,
            Op::RmsNorm {
                x,
                gain,
                inv_rms: vec![inv],
            },
            rg,
        )
    }

    pub fn layer_norm(&mut self, x: Var, gain: ParamId, bias: ParamId) -> Var {
        let gain_v = self.param(gain);
        let xv = self.value(x);
        let d = xv.ncols() as f64;
        let mut xhat = xv.clone();
        let mut inv_std = Vec::with_capacity(xv.nrows());
        for mut row in xhat.rows_mut() {
            let mean = row.sum() / d;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
            let inv = 1.0 / (var + NORM_EPS).sqrt();
            inv_std.push(inv);
            row.mapv_inplace(|v| (v - mean) * inv);
        }
        let value = &xhat * self.value(gain_v);
        let rg = self.rg(x) || self.rg(gain_v);
        let normed = self.push(
            value,
            Op::LayerNorm {
                x,
                gain: gain_v,
                xhat,
                inv_std,
            },
            rg,
        );
        let b = self.param(bias);
        self.add_row(normed, b)
    }

    pub fn gather_rows(&mut self, table: Var, idx: Vec<usize>) -> Var {
        let t = self.value(table);
        let mut value = Mat::zeros((idx.len(), t.ncols()));
        for (r, &i) in idx.iter().enumerate() {
            value.row_mut(r).assign(&t.row(i));
        }
        let rg = self.rg(table);
        self.push(value, Op::GatherRows { table, idx }, rg)
    }

    /// Replace the rows of `x` selected by `mask` with the single row `row`.
    pub fn replace_rows(&mut self, x: Var, row: Var, mask: Vec<bool>) -> Var {
        let xv = self.value(x);
        assert_eq!(mask.len(), xv.nrows());
        let r = self.value(row);
        assert_eq!(r.dim(), (1, xv.ncols()));
        let mut value = xv.clone();
        for (i, &m) in mask.iter().enumerate() {
            if m {
                value.row_mut(i).assign(&r.row(0));
            }
        }
        let rg = self.rg(x) || self.rg(row);
        self.push(value, Op::ReplaceRows { x, row, mask }, rg)
    }

    pub fn reverse_rows(&mut self, x: Var) -> Var {
        let value = self.value(x).slice(s![..;-1, ..]).to_owned();
        let rg = self.rg(x);
        self.push(value, Op::ReverseRows(x), rg)
    }

    pub fn mean_rows(&mut self, x: Var) -> Var {
        let value = self
            .value(x)
            .mean_axis(Axis(0))
            .expect("mean over at least one row")
            .insert_axis(Axis(0));
        let rg = self.rg(x);
        self.push(value, Op::MeanRows(x), rg)
    }

    /// Diagonal selective state-space scan.
    ///
    /// With `A = -exp(a_log)` (`Di×S`), per step `t` and channel `i`:
    /// `h[t,i,:] = exp(delta[t,i]·A[i,:]) ⊙ h[t-1,i,:] + delta[t,i]·b[t,:]·u[t,i]`
    /// and `y[t,i] = c[t,:]·h[t,i,:] + d[i]·u[t,i]`.
    pub fn selective_scan(&mut self, u: Var, delta: Var, a_log: Var, b: Var, c: Var, d: Var) -> Var {
        let (uv, dv, av, bv, cv, skip) = (
            self.value(u),
            self.value(delta),
            self.value(a_log),
            self.value(b),
            self.value(c),
            self.value(d),
        );
        let (n, di) = uv.dim();
        let sd = av.ncols();
        assert_eq!(dv.dim(), (n, di));
        assert_eq!(av.nrows(), di);
        assert_eq!(bv.dim(), (n, sd));
        assert_eq!(cv.dim(), (n, sd));
        assert_eq!(skip.dim(), (1, di));
        let a: Vec<f64> = av.iter().map(|v| -v.exp()).collect();
        let mut states = vec![0.0; n * di * sd];
        let mut decays = vec![0.0; n * di * sd];
        let mut y = Mat::zeros((n, di));
        for t in 0..n {
            let brow = bv.row(t);
            let crow = cv.row(t);
            for i in 0..di {
                let dt = dv[[t, i]];
                let ut = uv[[t, i]];
                let mut acc = skip[[0, i]] * ut;
                let base = (t * di + i) * sd;
                let prev_base = base.wrapping_sub(di * sd);
                for j in 0..sd {
                    let prev = if t > 0 { states[prev_base + j] } else { 0.0 };
                    let decay = (dt * a[i * sd + j]).exp();
                    let h = decay * prev + dt * brow[j] * ut;
                    states[base + j] = h;
                    decays[base + j] = decay;
                    acc += crow[j] * h;
                }
                y[[t, i]] = acc;
            }
        }
        let rg = [u, delta, a_log, b, c, d].iter().any(|&v| self.rg(v));
        self.push(
            y,
            Op::Scan(Box::new(ScanCache {
                u,
                delta,
                a_log,
                b,
                c,
                d,
                states,
                decays,
            })),
            rg,
        )
    }

    /// Multi-head scaled dot-product self-attention (no masking).
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (n, dm) = qv.dim();
        assert_eq!(dm % heads, 0, "model dim must divide into heads");
        let dh = dm / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut out = Mat::zeros((n, dm));
        let mut probs = Vec::with_capacity(heads);
        for h in 0..heads {
            let cols = s![.., h * dh..(h + 1) * dh];
            let mut p = qv.slice(cols).dot(&kv.slice(cols).t()) * scale;
            for mut row in p.rows_mut() {
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                row.mapv_inplace(|x| (x - max).exp());
                let sum = row.sum();
                row.mapv_inplace(|x| x / sum);
            }
            out.slice_mut(cols).assign(&p.dot(&vv.slice(cols)));
            probs.push(p);
        }
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        self.push(out, Op::Attention(Box::new(AttnCache { q, k, v, heads, probs })), rg)
    }

    pub fn mae(&mut self, pred: Var, target: &Mat, weights: Option<&Mat>) -> Var {
        let (value, dpred) = loss::mae(self.value(pred).view(), target.view(), weights.map(|w| w.view()));
        self.loss_node(pred, value, dpred)
    }

    pub fn phase_mae(&mut self, pred: Var, target: &Mat, weights: Option<&Mat>) -> Var {
        let (value, dpred) = loss::phase_mae(self.value(pred).view(), target.view(), weights.map(|w| w.view()));
        self.loss_node(pred, value, dpred)
    }

    pub fn mse(&mut self, pred: Var, target: &Mat) -> Var {
        let (value, dpred) = loss::mse(self.value(pred).view(), target.view());
        self.loss_node(pred, value, dpred)
    }

    pub fn cross_entropy(&mut self, logits: Var, label: usize) -> Var {
        let (value, dpred) = loss::cross_entropy(self.value(logits).view(), label);
        self.loss_node(logits, value, dpred)
    }

    fn loss_node(&mut self, pred: Var, value: f64, dpred: Mat) -> Var {
        let rg = self.rg(pred);
        self.push(Mat::from_elem((1, 1), value), Op::Loss { pred, dpred }, rg)
    }

    /// `Σ coef·term` over scalar nodes.
    pub fn weighted_sum(&mut self, terms: Vec<(Var, f64)>) -> Var {
        let value: f64 = terms.iter().map(|&(v, c)| c * self.scalar(v)).sum();
        let rg = terms.iter().any(|&(v, _)| self.rg(v));
        self.push(Mat::from_elem((1, 1), value), Op::WeightedSum(terms), rg)
    }

    /// Backpropagate from a scalar node.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(self.value(root).dim(), (1, 1), "backward needs a scalar root");
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut pgrads = Grads::new(self.params.len());
        grads[root.0] = Some(Mat::from_elem((1, 1), 1.0));

        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            self.backward_op(&node.op, &g, &mut grads, &mut pgrads);
            grads[idx] = Some(g);
        }
        Gradients {
            nodes: grads,
            params: pgrads,
        }
    }

    fn backward_op(&self, op: &Op, g: &Mat, grads: &mut [Option<Mat>], pgrads: &mut Grads) {
        let mut acc = |v: Var, delta: Mat| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => *existing += &delta,
                slot @ None => *slot = Some(delta),
            }
        };
        match op {
            Op::Leaf => {}
            Op::Param(id) => pgrads.accumulate(*id, g),
            Op::MatMul(a, b) => {
                if self.rg(*a) {
                    acc(*a, g.dot(&self.value(*b).t()));
                }
                if self.rg(*b) {
                    acc(*b, self.value(*a).t().dot(g));
                }
            }
            Op::AddRow(x, row) => {
                if self.rg(*row) {
                    acc(*row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
                acc(*x, g.clone());
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    acc(*a, g * self.value(*b));
                }
                if self.rg(*b) {
                    acc(*b, g * self.value(*a));
                }
            }
            Op::Scale(x, k) => acc(*x, g * *k),
            Op::Silu(x) => {
                let mut d = self.value(*x).mapv(|v| {
                    let s = sigmoid(v);
                    s * (1.0 + v * (1.0 - s))
                });
                d *= g;
                acc(*x, d);
            }
            Op::Softplus(x) => {
                let mut d = self.value(*x).mapv(sigmoid);
                d *= g;
                acc(*x, d);
            }
            Op::Gelu(x) => {
                let mut d = self.value(*x).mapv(gelu_grad);
                d *= g;
                acc(*x, d);
            }
            Op::RmsNorm { x, gain, inv_rms } => {
                let xv = self.value(*x);
                let gv = self.value(*gain);
                let mut dx = Mat::zeros(xv.dim());
                let mut dgain = Mat::zeros(gv.dim());
                // Rows sharing one scale form a group.
                let (group_rows, groups) = if inv_rms.len() == xv.nrows() {
                    (1, xv.nrows())
                } else {
                    (xv.nrows(), 1)
                };
                let n = (group_rows * xv.ncols()) as f64;
                for (k, &inv) in inv_rms.iter().enumerate().take(groups) {
                    let rows = k * group_rows..(k + 1) * group_rows;
                    let mut dot = 0.0;
                    for r in rows.clone() {
                        for j in 0..xv.ncols() {
                            let xhat = xv[[r, j]] * inv;
                            dgain[[0, j]] += g[[r, j]] * xhat;
                            dot += g[[r, j]] * gv[[0, j]] * xhat;
                        }
                    }
                    let mean_dot = dot / n;
                    for r in rows {
                        for j in 0..xv.ncols() {
                            let xhat = xv[[r, j]] * inv;
                            dx[[r, j]] = inv * (g[[r, j]] * gv[[0, j]] - xhat * mean_dot);
                        }
                    }
                }
                acc(*gain, dgain);
                acc(*x, dx);
            }
            Op::LayerNorm { x, gain, xhat, inv_std } => {
                let gv = self.value(*gain);
                let d = xhat.ncols() as f64;
                if self.rg(*gain) {
                    acc(*gain, (g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
                let dxhat = g * gv;
                let mut dx = Mat::zeros(xhat.dim());
                for r in 0..xhat.nrows() {
                    let sum: f64 = dxhat.row(r).sum();
                    let dot: f64 = dxhat.row(r).dot(&xhat.row(r));
                    for j in 0..xhat.ncols() {
                        dx[[r, j]] = inv_std[r] / d * (d * dxhat[[r, j]] - sum - xhat[[r, j]] * dot);
                    }
                }
                acc(*x, dx);
            }
            Op::GatherRows { table, idx } => {
                let t = self.value(*table);
                let mut dt = Mat::zeros(t.dim());
                for (r, &i) in idx.iter().enumerate() {
                    let mut row = dt.row_mut(i);
                    row += &g.row(r);
                }
                acc(*table, dt);
            }
            Op::ReplaceRows { x, row, mask } => {
                let mut dx = g.clone();
                let mut drow = Mat::zeros((1, g.ncols()));
                for (i, &m) in mask.iter().enumerate() {
                    if m {
                        let mut acc_row = drow.row_mut(0);
                        acc_row += &g.row(i);
                        dx.row_mut(i).fill(0.0);
                    }
                }
                acc(*row, drow);
                acc(*x, dx);
            }
            Op::ReverseRows(x) => acc(*x, g.slice(s![..;-1, ..]).to_owned()),
            Op::MeanRows(x) => {
                let n = self.value(*x).nrows();
                let row = g.row(0).mapv(|v| v / n as f64);
                let d = row.broadcast((n, row.len())).expect("broadcast").to_owned();
                acc(*x, d);
            }
            Op::Scan(cache) => {
                let (du, ddelta, dalog, db, dc, dd) = self.scan_backward(cache, g);
                acc(cache.u, du);
                acc(cache.delta, ddelta);
                acc(cache.a_log, dalog);
                acc(cache.b, db);
                acc(cache.c, dc);
                acc(cache.d, dd);
            }
            Op::Attention(cache) => {
                let (dq, dk, dv) = self.attention_backward(cache, g);
                acc(cache.q, dq);
                acc(cache.k, dk);
                acc(cache.v, dv);
            }
            Op::Loss { pred, dpred } => acc(*pred, dpred * g[[0, 0]]),
            Op::WeightedSum(terms) => {
                for &(v, c) in terms {
                    acc(v, Mat::from_elem((1, 1), c * g[[0, 0]]));
                }
            }
        }
    }

    #[allow(clippy::type_complexity)]
    fn scan_backward(&self, cache: &ScanCache, g: &Mat) -> (Mat, Mat, Mat, Mat, Mat, Mat) {
        let uv = self.value(cache.u);
        let dv = self.value(cache.delta);
        let av = self.value(cache.a_log);
        let bv = self.value(cache.b);
        let cv = self.value(cache.c);
        let skip = self.value(cache.d);
        let (n, di) = uv.dim();
        let sd = av.ncols();
        let a: Vec<f64> = av.iter().map(|v| -v.exp()).collect();
        let states = &cache.states;

        let mut du = Mat::zeros((n, di));
        let mut ddelta = Mat::zeros((n, di));
        let mut da = vec![0.0; di * sd];
        let mut db = Mat::zeros((n, sd));
        let mut dc = Mat::zeros((n, sd));
        let mut dd = Mat::zeros((1, di));
        // carry[i,j] = dL/dh[t+1,i,j] * decay[t+1,i,j]
        let mut carry = vec![0.0; di * sd];

        for t in (0..n).rev() {
            for i in 0..di {
                let gy = g[[t, i]];
                let dt = dv[[t, i]];
                let ut = uv[[t, i]];
                dd[[0, i]] += gy * ut;
                let mut gu = gy * skip[[0, i]];
                let mut gdt = 0.0;
                let base = (t * di + i) * sd;
                for j in 0..sd {
                    let aij = a[i * sd + j];
                    let decay = cache.decays[base + j];
                    let h = states[base + j];
                    let prev = if t > 0 { states[base - di * sd + j] } else { 0.0 };
                    let gh = gy * cv[[t, j]] + carry[i * sd + j];
                    dc[[t, j]] += gy * h;
                    let gdecay = gh * prev * decay;
                    gdt += gdecay * aij + gh * bv[[t, j]] * ut;
                    da[i * sd + j] += gdecay * dt;
                    db[[t, j]] += gh * dt * ut;
                    gu += gh * dt * bv[[t, j]];
                    carry[i * sd + j] = gh * decay;
                }
                du[[t, i]] += gu;
                ddelta[[t, i]] += gdt;
            }
        }
        // A = -exp(a_log) so dA/da_log = A.
        let dalog = Mat::from_shape_fn((di, sd), |(i, j)| da[i * sd + j] * a[i * sd + j]);
        (du, ddelta, dalog, db, dc, dd)
    }

    fn attention_backward(&self, cache: &AttnCache, g: &Mat) -> (Mat, Mat, Mat) {
        let qv = self.value(cache.q);
        let kv = self.value(cache.k);
        let vv = self.value(cache.v);
        let (n, dm) = qv.dim();
        let dh = dm / cache.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut dq = Mat::zeros((n, dm));
        let mut dk = Mat::zeros((n, dm));
        let mut dv = Mat::zeros((n, dm));
        for (h, p) in cache.probs.iter().enumerate() {
            let cols = s![.., h * dh..(h + 1) * dh];
            let go = g.slice(cols);
            dv.slice_mut(cols).assign(&p.t().dot(&go));
            let dp = go.dot(&vv.slice(cols).t());
            let mut ds = p * &dp;
            for r in 0..n {
                let rowsum: f64 = ds.row(r).sum();
                for c in 0..n {
                    ds[[r, c]] -= p[[r, c]] * rowsum;
                }
            }
            ds *= scale;
            dq.slice_mut(cols).assign(&ds.dot(&kv.slice(cols)));
            dk.slice_mut(cols).assign(&ds.t().dot(&qv.slice(cols)));
        }
        (dq, dk, dv)
    }
}
