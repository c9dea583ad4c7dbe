//! Reverse-mode automatic differentiation over dynamically shaped `f64`
//! tensors.
//!
//! A [`Graph`] is a define-by-run tape: every operation appends a node
//! holding its value, and [`Graph::backward`] walks the tape in reverse,
//! accumulating gradients for every node that (transitively) depends on a
//! parameter. Networks rebuild their graph each step; parameters enter via
//! [`Graph::param`] and constants via [`Graph::input`].
//!
//! The op set is exactly what the detector, classifier and fusion networks
//! need — elementwise math, conv / transposed conv / pooling, a fused linear
//! layer, per-sample min-max normalization, and the loss primitives.

mod conv;

use ndarray::{Array1, Array4, ArrayD, Axis, IxDyn};

use conv::{conv_bwd_data, conv_bwd_weight, conv_fwd, conv_transpose_out_dim};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddScalar(Var),
    MulScalar(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Exp(Var),
    Ln(Var),
    Softplus(Var),
    Abs(Var),
    Minimum(Var, Var),
    Clamp(Var, f64, f64),
    Reshape(Var),
    Gather(Var, Vec<usize>),
    SliceChannel(Var, usize),
    Conv2d { x: Var, w: Var, b: Var, stride: usize, pad: usize },
    ConvTranspose2d { x: Var, w: Var, b: Var, stride: usize, pad: usize },
    MaxPool2 { x: Var, argmax: Vec<usize> },
    Linear { x: Var, w: Var, b: Var },
    SpatialMean(Var),
    MinMaxNormalize(Var),
    MulBroadcastChannel { x: Var, a: Var },
    Sum(Var),
    Mean(Var),
    CrossEntropyLogits { logits: Var, targets: Vec<usize> },
}

struct Node {
    value: ArrayD<f64>,
    requires_grad: bool,
    op: Op,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<ArrayD<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&ArrayD<f64>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of a parameter node; zero-filled if the loss never touched it.
    pub fn wrt(&self, v: Var, shape: &[usize]) -> ArrayD<f64> {
        match self.get(v) {
            Some(g) => g.clone(),
            None => ArrayD::zeros(IxDyn(shape)),
        }
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn stable_softplus(x: f64) -> f64 {
    // ln(1 + e^x) = max(x, 0) + ln(1 + e^-|x|)
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    fn push(&mut self, value: ArrayD<f64>, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node { value, requires_grad, op });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &ArrayD<f64> {
        &self.nodes[v.0].value
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        let val = self.value(v);
        assert_eq!(val.len(), 1, "scalar_value on non-scalar node");
        val.iter().next().copied().unwrap()
    }

    /// Constant leaf: no gradient flows into it.
    pub fn input(&mut self, value: ArrayD<f64>) -> Var {
        self.push(value, false, Op::Leaf)
    }

    /// Trainable leaf: gradients are accumulated for it.
    pub fn param(&mut self, value: ArrayD<f64>) -> Var {
        self.push(value, true, Op::Leaf)
    }

    // ---- elementwise -------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = &self.nodes[a.0].value + &self.nodes[b.0].value;
        let rg = self.rg(a) || self.rg(b);
        self.push(v, rg, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = &self.nodes[a.0].value - &self.nodes[b.0].value;
        let rg = self.rg(a) || self.rg(b);
        self.push(v, rg, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = &self.nodes[a.0].value * &self.nodes[b.0].value;
        let rg = self.rg(a) || self.rg(b);
        self.push(v, rg, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let v = &self.nodes[a.0].value / &self.nodes[b.0].value;
        let rg = self.rg(a) || self.rg(b);
        self.push(v, rg, Op::Div(a, b))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| x + s);
        let rg = self.rg(a);
        self.push(v, rg, Op::AddScalar(a))
    }

    pub fn mul_scalar(&mut self, a: Var, s: f64) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| x * s);
        let rg = self.rg(a);
        self.push(v, rg, Op::MulScalar(a, s))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| x.max(0.0));
        let rg = self.rg(a);
        self.push(v, rg, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(stable_sigmoid);
        let rg = self.rg(a);
        self.push(v, rg, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(f64::tanh);
        let rg = self.rg(a);
        self.push(v, rg, Op::Tanh(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(f64::exp);
        let rg = self.rg(a);
        self.push(v, rg, Op::Exp(a))
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(f64::ln);
        let rg = self.rg(a);
        self.push(v, rg, Op::Ln(a))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(stable_softplus);
        let rg = self.rg(a);
        self.push(v, rg, Op::Softplus(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(f64::abs);
        let rg = self.rg(a);
        self.push(v, rg, Op::Abs(a))
    }

    /// Elementwise minimum; on ties the gradient routes to `a`.
    pub fn minimum(&mut self, a: Var, b: Var) -> Var {
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        assert_eq!(av.shape(), bv.shape(), "minimum: shape mismatch");
        let mut v = av.clone();
        v.zip_mut_with(bv, |x, &y| *x = x.min(y));
        let rg = self.rg(a) || self.rg(b);
        self.push(v, rg, Op::Minimum(a, b))
    }

    /// Clamp into `[lo, hi]`; gradient passes only strictly inside.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| x.clamp(lo, hi));
        let rg = self.rg(a);
        self.push(v, rg, Op::Clamp(a, lo, hi))
    }

    // ---- shape -------------------------------------------------------

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let v = self.nodes[a.0]
            .value
            .clone()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape: incompatible shape");
        let rg = self.rg(a);
        self.push(v, rg, Op::Reshape(a))
    }

    pub fn flatten(&mut self, a: Var) -> Var {
        let len = self.nodes[a.0].value.len();
        self.reshape(a, &[len])
    }

    /// Gather elements of a 1-D node at `idx` (duplicates allowed).
    pub fn gather(&mut self, a: Var, idx: Vec<usize>) -> Var {
        let av = &self.nodes[a.0].value;
        assert_eq!(av.ndim(), 1, "gather expects a 1-D node");
        let v = ArrayD::from_shape_vec(IxDyn(&[idx.len()]), idx.iter().map(|&i| av[[i]]).collect())
            .unwrap();
        let rg = self.rg(a);
        self.push(v, rg, Op::Gather(a, idx))
    }

    /// Select channel `c` of an `(N, C, H, W)` node, keeping a unit channel axis.
    pub fn slice_channel(&mut self, a: Var, c: usize) -> Var {
        let av = &self.nodes[a.0].value;
        assert_eq!(av.ndim(), 4, "slice_channel expects (N, C, H, W)");
        let v = av
            .index_axis(Axis(1), c)
            .to_owned()
            .insert_axis(Axis(1))
            .into_dyn();
        let rg = self.rg(a);
        self.push(v, rg, Op::SliceChannel(a, c))
    }

    // ---- neural-network ops -------------------------------------------

    fn as4(v: &ArrayD<f64>) -> Array4<f64> {
        v.view().into_dimensionality::<ndarray::Ix4>().expect("expected 4-D tensor").to_owned()
    }

    fn as1(v: &ArrayD<f64>) -> Array1<f64> {
        v.view().into_dimensionality::<ndarray::Ix1>().expect("expected 1-D tensor").to_owned()
    }

    /// `x: (N, Ci, H, W)`, `w: (Co, Ci, k, k)`, `b: (Co)`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Var {
        let xv = Self::as4(&self.nodes[x.0].value);
        let wv = Self::as4(&self.nodes[w.0].value);
        let bv = Self::as1(&self.nodes[b.0].value);
        let y = conv_fwd(&xv, &wv, Some(&bv), stride, pad).into_dyn();
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        self.push(y, rg, Op::Conv2d { x, w, b, stride, pad })
    }

    /// `x: (N, Ci, H, W)`, `w: (Ci, Co, k, k)`, `b: (Co)`. Output spatial size
    /// is `(H - 1) * stride + k - 2 * pad`.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Var {
        let xv = Self::as4(&self.nodes[x.0].value);
        let wv = Self::as4(&self.nodes[w.0].value);
        let bv = Self::as1(&self.nodes[b.0].value);
        let (_, _, h, win) = xv.dim();
        let k = wv.dim().2;
        let oh = conv_transpose_out_dim(h, k, stride, pad);
        let ow = conv_transpose_out_dim(win, k, stride, pad);
        // Transposed conv forward == conv backward-data with weights viewed
        // as (Co=Ci_in, Ci=Co_out, k, k).
        let mut y = conv_bwd_data(&xv, &wv, stride, pad, (oh, ow));
        for (mut channel, &bias) in y.axis_iter_mut(Axis(1)).zip(bv.iter()) {
            channel += bias;
        }
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        self.push(y.into_dyn(), rg, Op::ConvTranspose2d { x, w, b, stride, pad })
    }

    /// 2x2 max pooling with stride 2; requires even spatial dims.
    pub fn max_pool2(&mut self, x: Var) -> Var {
        let xv = Self::as4(&self.nodes[x.0].value);
        let (n, c, h, w) = xv.dim();
        assert!(h % 2 == 0 && w % 2 == 0, "max_pool2 requires even spatial dims");
        let (ho, wo) = (h / 2, w / 2);
        let mut out = Array4::zeros((n, c, ho, wo));
        let mut argmax = vec![0usize; n * c * ho * wo];
        for i in 0..n {
            for ch in 0..c {
                for oh in 0..ho {
                    for ow in 0..wo {
                        let mut best = f64::NEG_INFINITY;
                        let mut best_idx = 0;
                        for di in 0..2 {
                            for dj in 0..2 {
                                let (ih, iw) = (oh * 2 + di, ow * 2 + dj);
                                let v = xv[[i, ch, ih, iw]];
                                if v > best {
                                    best = v;
                                    best_idx = ((i * c + ch) * h + ih) * w + iw;
                                }
                            }
                        }
                        out[[i, ch, oh, ow]] = best;
                        argmax[((i * c + ch) * ho + oh) * wo + ow] = best_idx;
                    }
                }
            }
        }
        let rg = self.rg(x);
        self.push(out.into_dyn(), rg, Op::MaxPool2 { x, argmax })
    }

    /// `x: (N, I)`, `w: (O, I)`, `b: (O)` -> `(N, O)`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let xv = self.nodes[x.0].value.view().into_dimensionality::<ndarray::Ix2>().expect("linear x");
        let wv = self.nodes[w.0].value.view().into_dimensionality::<ndarray::Ix2>().expect("linear w");
        let bv = self.nodes[b.0].value.view().into_dimensionality::<ndarray::Ix1>().expect("linear b");
        let mut y = xv.dot(&wv.t());
        for mut row in y.rows_mut() {
            row += &bv;
        }
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        self.push(y.into_dyn(), rg, Op::Linear { x, w, b })
    }

    /// Mean over the spatial axes: `(N, C, H, W)` -> `(N, C)`.
    pub fn spatial_mean(&mut self, x: Var) -> Var {
        let xv = Self::as4(&self.nodes[x.0].value);
        let (_, _, h, w) = xv.dim();
        let y = xv.sum_axis(Axis(3)).sum_axis(Axis(2)).mapv(|v| v / (h * w) as f64);
        let rg = self.rg(x);
        self.push(y.into_dyn(), rg, Op::SpatialMean(x))
    }

    /// Per-sample min-max normalization of `(N, 1, H, W)` maps into `[0, 1]`.
    /// A constant map normalizes to all zeros.
    pub fn minmax_normalize(&mut self, x: Var) -> Var {
        let xv = Self::as4(&self.nodes[x.0].value);
        assert_eq!(xv.dim().1, 1, "minmax_normalize expects (N, 1, H, W)");
        let mut y = xv.clone();
        for mut sample in y.axis_iter_mut(Axis(0)) {
            let (mn, mx) = sample.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| {
                (a.min(v), b.max(v))
            });
            if mx > mn {
                let range = mx - mn;
                sample.mapv_inplace(|v| (v - mn) / range);
            } else {
                sample.fill(0.0);
            }
        }
        let rg = self.rg(x);
        self.push(y.into_dyn(), rg, Op::MinMaxNormalize(x))
    }

    /// `x: (N, C, H, W)` times `a: (N, 1, H, W)` broadcast across channels.
    pub fn mul_broadcast_channel(&mut self, x: Var, a: Var) -> Var {
        let xv = Self::as4(&self.nodes[x.0].value);
        let av = Self::as4(&self.nodes[a.0].value);
        assert_eq!(av.dim().1, 1, "broadcast map must have one channel");
        assert_eq!((xv.dim().0, xv.dim().2, xv.dim().3), (av.dim().0, av.dim().2, av.dim().3));
        let mut y = xv.clone();
        for (mut xs, am) in y.axis_iter_mut(Axis(0)).zip(av.axis_iter(Axis(0))) {
            let map = am.index_axis(Axis(0), 0);
            for mut channel in xs.axis_iter_mut(Axis(0)) {
                channel *= &map;
            }
        }
        let rg = self.rg(x) || self.rg(a);
        self.push(y.into_dyn(), rg, Op::MulBroadcastChannel { x, a })
    }

    // ---- reductions and losses ----------------------------------------

    pub fn sum(&mut self, a: Var) -> Var {
        let v = ArrayD::from_elem(IxDyn(&[]), self.nodes[a.0].value.sum());
        let rg = self.rg(a);
        self.push(v, rg, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let av = &self.nodes[a.0].value;
        let n = av.len().max(1);
        let v = ArrayD::from_elem(IxDyn(&[]), av.sum() / n as f64);
        let rg = self.rg(a);
        self.push(v, rg, Op::Mean(a))
    }

    /// Mean softmax cross-entropy over a batch: `logits: (N, K)`, one target
    /// class index per row.
    pub fn cross_entropy_logits(&mut self, logits: Var, targets: Vec<usize>) -> Var {
        let lv = self.nodes[logits.0].value.view().into_dimensionality::<ndarray::Ix2>().expect("logits 2-D");
        let (n, _) = lv.dim();
        assert_eq!(n, targets.len(), "one target per row");
        let mut total = 0.0;
        for (row, &t) in lv.rows().into_iter().zip(targets.iter()) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|&z| (z - m).exp()).sum::<f64>().ln();
            total += lse - row[t];
        }
        let v = ArrayD::from_elem(IxDyn(&[]), total / n as f64);
        let rg = self.rg(logits);
        self.push(v, rg, Op::CrossEntropyLogits { logits, targets })
    }

    // ---- backward ------------------------------------------------------

    /// Backpropagate from a scalar loss node. Returns gradients for every
    /// node reachable from a parameter leaf.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.nodes[loss.0].value.len(), 1, "backward expects a scalar loss");
        let mut grads: Vec<Option<ArrayD<f64>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(ArrayD::from_elem(self.nodes[loss.0].value.raw_dim(), 1.0));

        for i in (0..=loss.0).rev() {
            if grads[i].is_none() || !self.nodes[i].requires_grad {
                continue;
            }
            let g = grads[i].take().unwrap();
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    fn acc(&self, grads: &mut [Option<ArrayD<f64>>], v: Var, delta: ArrayD<f64>) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(g) => *g += &delta,
            slot => *slot = Some(delta),
        }
    }

    fn backprop_node(&self, i: usize, g: &ArrayD<f64>, grads: &mut [Option<ArrayD<f64>>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.mapv(|x| -x));
            }
            Op::Mul(a, b) => {
                self.acc(grads, *a, g * val(*b));
                self.acc(grads, *b, g * val(*a));
            }
            Op::Div(a, b) => {
                let bv = val(*b);
                self.acc(grads, *a, g / bv);
                let da = g * val(*a);
                self.acc(grads, *b, -da / (bv * bv));
            }
            Op::AddScalar(a) => self.acc(grads, *a, g.clone()),
            Op::MulScalar(a, s) => self.acc(grads, *a, g.mapv(|x| x * s)),
            Op::Relu(a) => {
                let mut d = g.clone();
                d.zip_mut_with(val(*a), |gi, &x| {
                    if x <= 0.0 {
                        *gi = 0.0;
                    }
                });
                self.acc(grads, *a, d);
            }
            Op::Sigmoid(a) => {
                let y = &self.nodes[i].value;
                self.acc(grads, *a, g * &y.mapv(|v| v * (1.0 - v)));
            }
            Op::Tanh(a) => {
                let y = &self.nodes[i].value;
                self.acc(grads, *a, g * &y.mapv(|v| 1.0 - v * v));
            }
            Op::Exp(a) => {
                self.acc(grads, *a, g * &self.nodes[i].value);
            }
            Op::Ln(a) => {
                self.acc(grads, *a, g / val(*a));
            }
            Op::Softplus(a) => {
                self.acc(grads, *a, g * &val(*a).mapv(stable_sigmoid));
            }
            Op::Abs(a) => {
                let mut d = g.clone();
                d.zip_mut_with(val(*a), |gi, &x| *gi *= if x > 0.0 { 1.0 } else if x < 0.0 { -1.0 } else { 0.0 });
                self.acc(grads, *a, d);
            }
            Op::Minimum(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let mut da = g.clone();
                da.zip_mut_with(&(av - bv), |gi, &d| {
                    if d > 0.0 {
                        *gi = 0.0;
                    }
                });
                let mut db = g.clone();
                db.zip_mut_with(&(av - bv), |gi, &d| {
                    if d <= 0.0 {
                        *gi = 0.0;
                    }
                });
                self.acc(grads, *a, da);
                self.acc(grads, *b, db);
            }
            Op::Clamp(a, lo, hi) => {
                let mut d = g.clone();
                d.zip_mut_with(val(*a), |gi, &x| {
                    if x <= *lo || x >= *hi {
                        *gi = 0.0;
                    }
                });
                self.acc(grads, *a, d);
            }
            Op::Reshape(a) => {
                let d = g.clone().into_shape_with_order(val(*a).raw_dim()).unwrap();
                self.acc(grads, *a, d);
            }
            Op::Gather(a, idx) => {
                let mut d = ArrayD::zeros(val(*a).raw_dim());
                for (j, &src) in idx.iter().enumerate() {
                    d[[src]] += g[[j]];
                }
                self.acc(grads, *a, d);
            }
            Op::SliceChannel(a, c) => {
                let av = val(*a);
                let mut d = Array4::zeros(
                    av.view().into_dimensionality::<ndarray::Ix4>().unwrap().dim(),
                );
                let g4 = g.view().into_dimensionality::<ndarray::Ix4>().unwrap();
                d.index_axis_mut(Axis(1), *c).assign(&g4.index_axis(Axis(1), 0));
                self.acc(grads, *a, d.into_dyn());
            }
            Op::Conv2d { x, w, b, stride, pad } => {
                let g4 = Self::as4(g);
                let xv = Self::as4(val(*x));
                let wv = Self::as4(val(*w));
                let k = wv.dim().2;
                if self.rg(*x) {
                    let dx = conv_bwd_data(&g4, &wv, *stride, *pad, (xv.dim().2, xv.dim().3));
                    self.acc(grads, *x, dx.into_dyn());
                }
                if self.rg(*w) || self.rg(*b) {
                    let (dw, db) = conv_bwd_weight(&xv, &g4, k, *stride, *pad);
                    self.acc(grads, *w, dw.into_dyn());
                    self.acc(grads, *b, db.into_dyn());
                }
            }
            Op::ConvTranspose2d { x, w, b, stride, pad } => {
                let g4 = Self::as4(g);
                let xv = Self::as4(val(*x));
                let wv = Self::as4(val(*w));
                let k = wv.dim().2;
                if self.rg(*x) {
                    // forward was conv_bwd_data, so the input grad is conv_fwd
                    let dx = conv_fwd(&g4, &wv, None, *stride, *pad);
                    self.acc(grads, *x, dx.into_dyn());
                }
                if self.rg(*w) || self.rg(*b) {
                    // weight axes are (Ci_in, Co_out, k, k): roles of x and g swap
                    let (dw, _) = conv_bwd_weight(&g4, &xv, k, *stride, *pad);
                    let db = g4.sum_axis(Axis(3)).sum_axis(Axis(2)).sum_axis(Axis(0));
                    self.acc(grads, *w, dw.into_dyn());
                    self.acc(grads, *b, db.into_dyn());
                }
            }
            Op::MaxPool2 { x, argmax } => {
                let xv = val(*x);
                let mut d = ArrayD::zeros(xv.raw_dim());
                {
                    let dflat = d.as_slice_mut().unwrap();
                    for (j, gv) in g.iter().enumerate() {
                        dflat[argmax[j]] += gv;
                    }
                }
                self.acc(grads, *x, d);
            }
            Op::Linear { x, w, b } => {
                let g2 = g.view().into_dimensionality::<ndarray::Ix2>().unwrap();
                let xv = val(*x).view().into_dimensionality::<ndarray::Ix2>().unwrap();
                let wv = val(*w).view().into_dimensionality::<ndarray::Ix2>().unwrap();
                if self.rg(*x) {
                    self.acc(grads, *x, g2.dot(&wv).into_dyn());
                }
                if self.rg(*w) {
                    self.acc(grads, *w, g2.t().dot(&xv).into_dyn());
                }
                if self.rg(*b) {
                    self.acc(grads, *b, g2.sum_axis(Axis(0)).into_dyn());
                }
            }
            Op::SpatialMean(x) => {
                let xv = Self::as4(val(*x));
                let (n, c, h, w) = xv.dim();
                let g2 = g.view().into_dimensionality::<ndarray::Ix2>().unwrap();
                let scale = 1.0 / (h * w) as f64;
                let mut d = Array4::zeros((n, c, h, w));
                for i in 0..n {
                    for ch in 0..c {
                        d.index_axis_mut(Axis(0), i)
                            .index_axis_mut(Axis(0), ch)
                            .fill(g2[[i, ch]] * scale);
                    }
                }
                self.acc(grads, *x, d.into_dyn());
            }
            Op::MinMaxNormalize(x) => {
                let xv = Self::as4(val(*x));
                let yv = Self::as4(&self.nodes[i].value);
                let g4 = Self::as4(g);
                let mut d = Array4::zeros(xv.dim());
                for s in 0..xv.dim().0 {
                    let sample = xv.index_axis(Axis(0), s);
                    let flat: Vec<f64> = sample.iter().copied().collect();
                    let mut amin = 0;
                    let mut amax = 0;
                    for (j, &v) in flat.iter().enumerate() {
                        if v < flat[amin] {
                            amin = j;
                        }
                        if v > flat[amax] {
                            amax = j;
                        }
                    }
                    if flat[amax] <= flat[amin] {
                        continue; // constant map: zero gradient
                    }
                    let range = flat[amax] - flat[amin];
                    let gs = g4.index_axis(Axis(0), s);
                    let ys = yv.index_axis(Axis(0), s);
                    let gsum: f64 = gs.sum();
                    let gysum: f64 = gs.iter().zip(ys.iter()).map(|(a, b)| a * b).sum();
                    let mut ds = d.index_axis_mut(Axis(0), s);
                    {
                        let ds_flat = ds.as_slice_mut().unwrap();
                        for (j, gv) in gs.iter().enumerate() {
                            ds_flat[j] = gv / range;
                        }
                        ds_flat[amin] -= (gsum - gysum) / range;
                        ds_flat[amax] -= gysum / range;
                    }
                }
                self.acc(grads, *x, d.into_dyn());
            }
            Op::MulBroadcastChannel { x, a } => {
                let xv = Self::as4(val(*x));
                let av = Self::as4(val(*a));
                let g4 = Self::as4(g);
                if self.rg(*x) {
                    let mut dx = g4.clone();
                    for (mut gs, am) in dx.axis_iter_mut(Axis(0)).zip(av.axis_iter(Axis(0))) {
                        let map = am.index_axis(Axis(0), 0);
                        for mut channel in gs.axis_iter_mut(Axis(0)) {
                            channel *= &map;
                        }
                    }
                    self.acc(grads, *x, dx.into_dyn());
                }
                if self.rg(*a) {
                    let (n, _, h, w) = xv.dim();
                    let mut da = Array4::zeros((n, 1, h, w));
                    for s in 0..n {
                        let prod = &g4.index_axis(Axis(0), s) * &xv.index_axis(Axis(0), s);
                        da.index_axis_mut(Axis(0), s)
                            .index_axis_mut(Axis(0), 0)
                            .assign(&prod.sum_axis(Axis(0)));
                    }
                    self.acc(grads, *a, da.into_dyn());
                }
            }
            Op::Sum(a) => {
                let gs = g.iter().next().copied().unwrap();
                self.acc(grads, *a, ArrayD::from_elem(val(*a).raw_dim(), gs));
            }
            Op::Mean(a) => {
                let n = val(*a).len().max(1) as f64;
                let gs = g.iter().next().copied().unwrap() / n;
                self.acc(grads, *a, ArrayD::from_elem(val(*a).raw_dim(), gs));
            }
            Op::CrossEntropyLogits { logits, targets } => {
                let lv = val(*logits).view().into_dimensionality::<ndarray::Ix2>().unwrap();
                let (n, k) = lv.dim();
                let gs = g.iter().next().copied().unwrap() / n as f64;
                let mut d = ndarray::Array2::<f64>::zeros((n, k));
                for (r, (row, &t)) in lv.rows().into_iter().zip(targets.iter()).enumerate() {
                    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let denom: f64 = row.iter().map(|&z| (z - m).exp()).sum();
                    for c in 0..k {
                        let p = (row[c] - m).exp() / denom;
                        d[[r, c]] = gs * (p - if c == t { 1.0 } else { 0.0 });
                    }
                }
                self.acc(grads, *logits, d.into_dyn());
            }
        }
    }
}

#[cfg(test)]
mod tests;
