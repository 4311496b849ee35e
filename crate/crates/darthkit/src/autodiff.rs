//! Reverse-mode automatic differentiation over dynamic f64 arrays.
//!
//! A [`Graph`] is a tape: every operation appends a node holding its value
//! and enough information to push gradients to its parents. Node ids are
//! creation-ordered, so a single reverse sweep visits consumers before
//! producers. Everything is f64; the point of this module is exactness
//! against finite differences, not throughput.
//!
//! Teacher-side quantities enter losses as [`Graph::constant`] nodes:
//! gradients are never accumulated for them, which makes "the teacher
//! receives no gradients" a structural property rather than a convention.

use ndarray::{Array1, Array2, Array3, ArrayD, Ix1, Ix2, Ix3, Ix4, IxDyn};

/// Node id on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Tid(pub(crate) usize);

/// Per-RoI average-pool layout: one `(y0, y1, x0, x1)` feature-map window per
/// output cell, half-open, each at least one pixel.
#[derive(Debug, Clone)]
pub struct RoiBins {
    pub cells: Vec<(usize, usize, usize, usize)>,
}

enum Op {
    Leaf,
    Add(Tid, Tid),
    Sub(Tid, Tid),
    Mul(Tid, Tid),
    Div(Tid, Tid),
    AddScalar(Tid),
    MulScalar(Tid, f64),
    Exp(Tid),
    Log(Tid),
    Sqrt(Tid),
    Relu(Tid),
    Sigmoid(Tid),
    /// `[m,k] x [k,n] -> [m,n]`
    MatMul(Tid, Tid),
    Transpose(Tid),
    Sum(Tid),
    Mean(Tid),
    SumAxis1(Tid),
    MeanAxis1(Tid),
    /// `y[r,c] = a[r,c] - b[r]`
    SubBroadcastCol(Tid, Tid),
    /// `y[r,c] = a[r,c] / b[r]`
    DivBroadcastCol(Tid, Tid),
    /// `y[r,c] = a[r,c] * b[c]`
    MulBroadcastRow(Tid, Tid),
    /// `y[r,c] = a[r,c] + b[c]`
    AddBroadcastRow(Tid, Tid),
    /// `y[c,h,w] = a[c,h,w] + b[c]`
    AddBroadcastChan(Tid, Tid),
    /// Single-image convolution, floor semantics, zero padding.
    Conv2d {
        input: Tid,
        weight: Tid,
        stride: usize,
        pad: usize,
        /// im2col matrix cached at forward time for the backward pass.
        cols: Array2<f64>,
    },
    /// `[c,h,w] -> [k, c * cells]` average pooling over per-RoI windows.
    RoiPool { input: Tid, bins: Vec<RoiBins> },
    /// `[r,c] -> [idx.len, c]`
    GatherRows { input: Tid, idx: Vec<usize> },
    /// `[n] -> [idx.len]`
    Gather1d { input: Tid, idx: Vec<usize> },
    /// `[r,c] -> [idx.len]` picking `(row, col)` entries.
    GatherElems { input: Tid, idx: Vec<(usize, usize)> },
    /// `y[i,j] = a[i] - b[j]`
    SubOuter(Tid, Tid),
    /// Scalars -> `[n]`.
    StackScalars { inputs: Vec<Tid> },
    Reshape { input: Tid },
    Permute3 { input: Tid, perm: [usize; 3] },
    /// `log(1 + sum_i exp(x_i))` over the flattened input, max-shifted so
    /// arguments of several hundred stay finite.
    LogSumExpZero(Tid),
}

pub struct Graph {
    values: Vec<ArrayD<f64>>,
    ops: Vec<Op>,
    no_grad: Vec<bool>,
}

/// Gradients for the leaves of one backward sweep, indexed by [`Tid`].
pub struct Gradients {
    grads: Vec<Option<ArrayD<f64>>>,
}

impl Gradients {
    pub fn get(&self, t: Tid) -> Option<&ArrayD<f64>> {
        self.grads.get(t.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, t: Tid) -> Option<ArrayD<f64>> {
        self.grads.get_mut(t.0).and_then(|g| g.take())
    }
}

fn as2(v: &ArrayD<f64>) -> ndarray::ArrayView2<'_, f64> {
    v.view().into_dimensionality::<Ix2>().expect("2-d value")
}

fn as1(v: &ArrayD<f64>) -> ndarray::ArrayView1<'_, f64> {
    v.view().into_dimensionality::<Ix1>().expect("1-d value")
}

fn as3(v: &ArrayD<f64>) -> ndarray::ArrayView3<'_, f64> {
    v.view().into_dimensionality::<Ix3>().expect("3-d value")
}

fn as4(v: &ArrayD<f64>) -> ndarray::ArrayView4<'_, f64> {
    v.view().into_dimensionality::<Ix4>().expect("4-d value")
}

fn scalar_of(v: &ArrayD<f64>) -> f64 {
    debug_assert_eq!(v.len(), 1, "scalar node expected");
    *v.iter().next().expect("non-empty scalar")
}

/// Dimensions of a conv output under floor semantics.
pub fn conv_out_size(inp: usize, k: usize, stride: usize, pad: usize) -> usize {
    (inp + 2 * pad - k) / stride + 1
}

/// Logistic function, branch-split so exp never sees a large positive argument.
pub fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn im2col(input: &ndarray::ArrayView3<'_, f64>, k: usize, stride: usize, pad: usize) -> Array2<f64> {
    let (c_in, h, w) = input.dim();
    let oh = conv_out_size(h, k, stride, pad);
    let ow = conv_out_size(w, k, stride, pad);
    let mut cols = Array2::zeros((c_in * k * k, oh * ow));
    for ci in 0..c_in {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        cols[[row, oy * ow + ox]] = input[[ci, iy as usize, ix as usize]];
                    }
                }
            }
        }
    }
    cols
}

fn col2im(
    dcols: &Array2<f64>,
    c_in: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
) -> Array3<f64> {
    let oh = conv_out_size(h, k, stride, pad);
    let ow = conv_out_size(w, k, stride, pad);
    let mut dinput = Array3::zeros((c_in, h, w));
    for ci in 0..c_in {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        dinput[[ci, iy as usize, ix as usize]] += dcols[[row, oy * ow + ox]];
                    }
                }
            }
        }
    }
    dinput
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            values: Vec::new(),
            ops: Vec::new(),
            no_grad: Vec::new(),
        }
    }

    fn push(&mut self, value: ArrayD<f64>, op: Op) -> Tid {
        self.values.push(value);
        self.ops.push(op);
        self.no_grad.push(false);
        Tid(self.values.len() - 1)
    }

    /// A differentiable leaf (a parameter or an input under test).
    pub fn leaf(&mut self, value: ArrayD<f64>) -> Tid {
        self.push(value, Op::Leaf)
    }

    /// A node gradients never flow into.
    pub fn constant(&mut self, value: ArrayD<f64>) -> Tid {
        let t = self.push(value, Op::Leaf);
        self.no_grad[t.0] = true;
        t
    }

    pub fn scalar_const(&mut self, v: f64) -> Tid {
        self.constant(ArrayD::from_elem(IxDyn(&[]), v))
    }

    pub fn value(&self, t: Tid) -> &ArrayD<f64> {
        &self.values[t.0]
    }

    /// Every node created so far, in creation order.
    pub fn tids(&self) -> impl Iterator<Item = Tid> {
        (0..self.values.len()).map(Tid)
    }

    /// True for nodes marked as gradient-free targets.
    pub fn is_constant(&self, t: Tid) -> bool {
        self.no_grad[t.0]
    }

    pub fn scalar_value(&self, t: Tid) -> f64 {
        scalar_of(&self.values[t.0])
    }

    pub fn add(&mut self, a: Tid, b: Tid) -> Tid {
        let v = &self.values[a.0] + &self.values[b.0];
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Tid, b: Tid) -> Tid {
        let v = &self.values[a.0] - &self.values[b.0];
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Tid, b: Tid) -> Tid {
        let v = &self.values[a.0] * &self.values[b.0];
        self.push(v, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Tid, b: Tid) -> Tid {
        let v = &self.values[a.0] / &self.values[b.0];
        self.push(v, Op::Div(a, b))
    }

    pub fn add_scalar(&mut self, a: Tid, s: f64) -> Tid {
        let v = self.values[a.0].mapv(|x| x + s);
        self.push(v, Op::AddScalar(a))
    }

    pub fn mul_scalar(&mut self, a: Tid, s: f64) -> Tid {
        let v = self.values[a.0].mapv(|x| x * s);
        self.push(v, Op::MulScalar(a, s))
    }

    pub fn exp(&mut self, a: Tid) -> Tid {
        let v = self.values[a.0].mapv(f64::exp);
        self.push(v, Op::Exp(a))
    }

    pub fn log(&mut self, a: Tid) -> Tid {
        let v = self.values[a.0].mapv(f64::ln);
        self.push(v, Op::Log(a))
    }

    pub fn sqrt(&mut self, a: Tid) -> Tid {
        let v = self.values[a.0].mapv(f64::sqrt);
        self.push(v, Op::Sqrt(a))
    }

    pub fn relu(&mut self, a: Tid) -> Tid {
        let v = self.values[a.0].mapv(|x| x.max(0.0));
        self.push(v, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Tid) -> Tid {
        let v = self.values[a.0].mapv(stable_sigmoid);
        self.push(v, Op::Sigmoid(a))
    }

    pub fn matmul(&mut self, a: Tid, b: Tid) -> Tid {
        let v = as2(&self.values[a.0]).dot(&as2(&self.values[b.0]));
        self.push(v.into_dyn(), Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: Tid) -> Tid {
        let v = as2(&self.values[a.0]).t().to_owned();
        self.push(v.into_dyn(), Op::Transpose(a))
    }

    pub fn sum(&mut self, a: Tid) -> Tid {
        let v = ArrayD::from_elem(IxDyn(&[]), self.values[a.0].sum());
        self.push(v, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Tid) -> Tid {
        let n = self.values[a.0].len();
        assert!(n > 0, "mean of empty array");
        let v = ArrayD::from_elem(IxDyn(&[]), self.values[a.0].sum() / n as f64);
        self.push(v, Op::Mean(a))
    }

    pub fn sum_axis1(&mut self, a: Tid) -> Tid {
        let v = as2(&self.values[a.0]).sum_axis(ndarray::Axis(1));
        self.push(v.into_dyn(), Op::SumAxis1(a))
    }

    pub fn mean_axis1(&mut self, a: Tid) -> Tid {
        let m = as2(&self.values[a.0]);
        assert!(m.ncols() > 0, "mean over empty axis");
        let v = m.sum_axis(ndarray::Axis(1)) / m.ncols() as f64;
        self.push(v.into_dyn(), Op::MeanAxis1(a))
    }

    pub fn sub_broadcast_col(&mut self, a: Tid, b: Tid) -> Tid {
        let m = as2(&self.values[a.0]).to_owned();
        let col = as1(&self.values[b.0]).to_owned();
        let v = m - col.insert_axis(ndarray::Axis(1));
        self.push(v.into_dyn(), Op::SubBroadcastCol(a, b))
    }

    pub fn div_broadcast_col(&mut self, a: Tid, b: Tid) -> Tid {
        let m = as2(&self.values[a.0]).to_owned();
        let col = as1(&self.values[b.0]).to_owned();
        let v = m / col.insert_axis(ndarray::Axis(1));
        self.push(v.into_dyn(), Op::DivBroadcastCol(a, b))
    }

    pub fn mul_broadcast_row(&mut self, a: Tid, b: Tid) -> Tid {
        let m = as2(&self.values[a.0]).to_owned();
        let row = as1(&self.values[b.0]).to_owned();
        let v = m * row.insert_axis(ndarray::Axis(0));
        self.push(v.into_dyn(), Op::MulBroadcastRow(a, b))
    }

    pub fn add_broadcast_row(&mut self, a: Tid, b: Tid) -> Tid {
        let m = as2(&self.values[a.0]).to_owned();
        let row = as1(&self.values[b.0]).to_owned();
        let v = m + row.insert_axis(ndarray::Axis(0));
        self.push(v.into_dyn(), Op::AddBroadcastRow(a, b))
    }

    pub fn add_broadcast_chan(&mut self, a: Tid, b: Tid) -> Tid {
        let mut v = as3(&self.values[a.0]).to_owned();
        let bias = as1(&self.values[b.0]).to_owned();
        for (c, mut plane) in v.outer_iter_mut().enumerate() {
            plane += bias[c];
        }
        self.push(v.into_dyn(), Op::AddBroadcastChan(a, b))
    }

    pub fn conv2d(&mut self, input: Tid, weight: Tid, stride: usize, pad: usize) -> Tid {
        let inp = as3(&self.values[input.0]);
        let wgt = as4(&self.values[weight.0]);
        let (c_out, c_in, kh, kw) = wgt.dim();
        assert_eq!(kh, kw, "square kernels only");
        assert_eq!(c_in, inp.dim().0, "conv channel mismatch");
        let (_, h, w) = inp.dim();
        let oh = conv_out_size(h, kh, stride, pad);
        let ow = conv_out_size(w, kw, stride, pad);
        let cols = im2col(&inp, kh, stride, pad);
        let w2 = wgt.to_shape((c_out, c_in * kh * kw)).expect("contiguous weight").to_owned();
        let out = w2.dot(&cols);
        let out3 = out.into_shape_with_order((c_out, oh, ow)).expect("conv reshape");
        self.push(out3.into_dyn(), Op::Conv2d { input, weight, stride, pad, cols })
    }

    pub fn roi_pool(&mut self, input: Tid, bins: Vec<RoiBins>, cells: usize) -> Tid {
        let feat = as3(&self.values[input.0]);
        let (c, _, _) = feat.dim();
        let mut out = Array2::zeros((bins.len(), c * cells));
        for (k, roi) in bins.iter().enumerate() {
            assert_eq!(roi.cells.len(), cells, "ragged roi bins");
            for ci in 0..c {
                for (j, &(y0, y1, x0, x1)) in roi.cells.iter().enumerate() {
                    let area = ((y1 - y0) * (x1 - x0)) as f64;
                    let mut acc = 0.0;
                    for y in y0..y1 {
                        for x in x0..x1 {
                            acc += feat[[ci, y, x]];
                        }
                    }
                    out[[k, ci * cells + j]] = acc / area;
                }
            }
        }
        self.push(out.into_dyn(), Op::RoiPool { input, bins })
    }

    pub fn gather_rows(&mut self, input: Tid, idx: Vec<usize>) -> Tid {
        let m = as2(&self.values[input.0]);
        let mut out = Array2::zeros((idx.len(), m.ncols()));
        for (i, &r) in idx.iter().enumerate() {
            out.row_mut(i).assign(&m.row(r));
        }
        self.push(out.into_dyn(), Op::GatherRows { input, idx })
    }

    pub fn gather_1d(&mut self, input: Tid, idx: Vec<usize>) -> Tid {
        let v = as1(&self.values[input.0]);
        let out: Array1<f64> = idx.iter().map(|&i| v[i]).collect();
        self.push(out.into_dyn(), Op::Gather1d { input, idx })
    }

    pub fn gather_elems(&mut self, input: Tid, idx: Vec<(usize, usize)>) -> Tid {
        let m = as2(&self.values[input.0]);
        let out: Array1<f64> = idx.iter().map(|&(r, c)| m[[r, c]]).collect();
        self.push(out.into_dyn(), Op::GatherElems { input, idx })
    }

    pub fn sub_outer(&mut self, a: Tid, b: Tid) -> Tid {
        let av = as1(&self.values[a.0]).to_owned();
        let bv = as1(&self.values[b.0]).to_owned();
        let v = av.insert_axis(ndarray::Axis(1)) - bv.insert_axis(ndarray::Axis(0));
        self.push(v.into_dyn(), Op::SubOuter(a, b))
    }

    pub fn stack_scalars(&mut self, inputs: Vec<Tid>) -> Tid {
        assert!(!inputs.is_empty(), "stack of nothing");
        let out: Array1<f64> = inputs.iter().map(|&t| scalar_of(&self.values[t.0])).collect();
        self.push(out.into_dyn(), Op::StackScalars { inputs })
    }

    pub fn reshape(&mut self, input: Tid, shape: &[usize]) -> Tid {
        let flat: Vec<f64> = self.values[input.0].iter().cloned().collect();
        let v = ArrayD::from_shape_vec(IxDyn(shape), flat).expect("reshape size mismatch");
        self.push(v, Op::Reshape { input })
    }

    pub fn permute3(&mut self, input: Tid, perm: [usize; 3]) -> Tid {
        let v = as3(&self.values[input.0])
            .permuted_axes(perm)
            .as_standard_layout()
            .to_owned();
        self.push(v.into_dyn(), Op::Permute3 { input, perm })
    }

    pub fn logsumexp_zero(&mut self, a: Tid) -> Tid {
        let x = &self.values[a.0];
        let m = x.iter().cloned().fold(0.0f64, f64::max);
        let s: f64 = (-m).exp() + x.iter().map(|&v| (v - m).exp()).sum::<f64>();
        let v = ArrayD::from_elem(IxDyn(&[]), m + s.ln());
        self.push(v, Op::LogSumExpZero(a))
    }

    /// Reverse sweep from a scalar node. Returns gradients for every
    /// differentiable leaf that influenced it.
    pub fn backward(&self, loss: Tid) -> Gradients {
        assert_eq!(self.values[loss.0].len(), 1, "backward from non-scalar");
        let mut grads: Vec<Option<ArrayD<f64>>> = vec![None; self.values.len()];
        grads[loss.0] = Some(ArrayD::from_elem(self.values[loss.0].raw_dim(), 1.0));

        for i in (0..=loss.0).rev() {
            if matches!(self.ops[i], Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.push_grad(i, &g, &mut grads);
        }
        Gradients { grads }
    }

    fn acc(&self, grads: &mut [Option<ArrayD<f64>>], t: Tid, delta: ArrayD<f64>) {
        if self.no_grad[t.0] {
            return;
        }
        match &mut grads[t.0] {
            Some(a) => *a += &delta,
            slot => *slot = Some(delta),
        }
    }

    fn push_grad(&self, i: usize, g: &ArrayD<f64>, grads: &mut [Option<ArrayD<f64>>]) {
        let val = |t: Tid| &self.values[t.0];
        match &self.ops[i] {
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
                self.acc(grads, *a, g / val(*b));
                let db = -(g * val(*a)) / (val(*b) * val(*b));
                self.acc(grads, *b, db);
            }
            Op::AddScalar(a) => self.acc(grads, *a, g.clone()),
            Op::MulScalar(a, s) => self.acc(grads, *a, g.mapv(|x| x * s)),
            Op::Exp(a) => self.acc(grads, *a, g * &self.values[i]),
            Op::Log(a) => self.acc(grads, *a, g / val(*a)),
            Op::Sqrt(a) => {
                let da = g / &self.values[i].mapv(|y| 2.0 * y);
                self.acc(grads, *a, da);
            }
            Op::Relu(a) => {
                let da = g * &val(*a).mapv(|x| if x > 0.0 { 1.0 } else { 0.0 });
                self.acc(grads, *a, da);
            }
            Op::Sigmoid(a) => {
                let da = g * &self.values[i].mapv(|y| y * (1.0 - y));
                self.acc(grads, *a, da);
            }
            Op::MatMul(a, b) => {
                let g2 = as2(g);
                let da = g2.dot(&as2(val(*b)).t());
                let db = as2(val(*a)).t().dot(&g2);
                self.acc(grads, *a, da.into_dyn());
                self.acc(grads, *b, db.into_dyn());
            }
            Op::Transpose(a) => {
                self.acc(grads, *a, as2(g).t().to_owned().into_dyn());
            }
            Op::Sum(a) => {
                let gs = scalar_of(g);
                self.acc(grads, *a, ArrayD::from_elem(val(*a).raw_dim(), gs));
            }
            Op::Mean(a) => {
                let gs = scalar_of(g) / val(*a).len() as f64;
                self.acc(grads, *a, ArrayD::from_elem(val(*a).raw_dim(), gs));
            }
            Op::SumAxis1(a) => {
                let (r, c) = as2(val(*a)).dim();
                let g1 = as1(g);
                let da = Array2::from_shape_fn((r, c), |(i, _)| g1[i]);
                self.acc(grads, *a, da.into_dyn());
            }
            Op::MeanAxis1(a) => {
                let (r, c) = as2(val(*a)).dim();
                let g1 = as1(g);
                let da = Array2::from_shape_fn((r, c), |(i, _)| g1[i] / c as f64);
                self.acc(grads, *a, da.into_dyn());
            }
            Op::SubBroadcastCol(a, b) => {
                self.acc(grads, *a, g.clone());
                let db = -as2(g).sum_axis(ndarray::Axis(1));
                self.acc(grads, *b, db.into_dyn());
            }
            Op::DivBroadcastCol(a, b) => {
                let bv = as1(val(*b)).to_owned();
                let g2 = as2(g).to_owned();
                let da = &g2 / &bv.clone().insert_axis(ndarray::Axis(1));
                let num = (&g2 * &as2(val(*a)).to_owned()).sum_axis(ndarray::Axis(1));
                let db = -(num / (&bv * &bv));
                self.acc(grads, *a, da.into_dyn());
                self.acc(grads, *b, db.into_dyn());
            }
            Op::MulBroadcastRow(a, b) => {
                let bv = as1(val(*b)).to_owned();
                let g2 = as2(g).to_owned();
                let da = &g2 * &bv.insert_axis(ndarray::Axis(0));
                let db = (&g2 * &as2(val(*a)).to_owned()).sum_axis(ndarray::Axis(0));
                self.acc(grads, *a, da.into_dyn());
                self.acc(grads, *b, db.into_dyn());
            }
            Op::AddBroadcastRow(a, b) => {
                self.acc(grads, *a, g.clone());
                let db = as2(g).sum_axis(ndarray::Axis(0));
                self.acc(grads, *b, db.into_dyn());
            }
            Op::AddBroadcastChan(a, b) => {
                self.acc(grads, *a, g.clone());
                let g3 = as3(g);
                let db: Array1<f64> = g3.outer_iter().map(|plane| plane.sum()).collect();
                self.acc(grads, *b, db.into_dyn());
            }
            Op::Conv2d { input, weight, stride, pad, cols } => {
                let wgt = as4(val(*weight));
                let (c_out, c_in, kh, _) = wgt.dim();
                let (_, h, w) = as3(val(*input)).dim();
                let g3 = as3(g);
                let (gc, gh, gw) = g3.dim();
                debug_assert_eq!(gc, c_out);
                let g2 = g3.to_shape((c_out, gh * gw)).expect("grad reshape").to_owned();
                let dw2 = g2.dot(&cols.t());
                let dw = dw2
                    .into_shape_with_order((c_out, c_in, kh, kh))
                    .expect("weight grad reshape");
                let w2 = wgt.to_shape((c_out, c_in * kh * kh)).expect("weight reshape").to_owned();
                let dcols = w2.t().dot(&g2);
                let dinput = col2im(&dcols, c_in, h, w, kh, *stride, *pad);
                self.acc(grads, *input, dinput.into_dyn());
                self.acc(grads, *weight, dw.into_dyn());
            }
            Op::RoiPool { input, bins } => {
                let feat = as3(val(*input));
                let (c, h, w) = feat.dim();
                let cells = bins.first().map(|b| b.cells.len()).unwrap_or(0);
                let g2 = as2(g);
                let mut dinput = Array3::zeros((c, h, w));
                for (k, roi) in bins.iter().enumerate() {
                    for ci in 0..c {
                        for (j, &(y0, y1, x0, x1)) in roi.cells.iter().enumerate() {
                            let area = ((y1 - y0) * (x1 - x0)) as f64;
                            let gv = g2[[k, ci * cells + j]] / area;
                            for y in y0..y1 {
                                for x in x0..x1 {
                                    dinput[[ci, y, x]] += gv;
                                }
                            }
                        }
                    }
                }
                self.acc(grads, *input, dinput.into_dyn());
            }
            Op::GatherRows { input, idx } => {
                let (r, c) = as2(val(*input)).dim();
                let g2 = as2(g);
                let mut da = Array2::zeros((r, c));
                for (i, &row) in idx.iter().enumerate() {
                    let mut target = da.row_mut(row);
                    target += &g2.row(i);
                }
                self.acc(grads, *input, da.into_dyn());
            }
            Op::Gather1d { input, idx } => {
                let n = val(*input).len();
                let g1 = as1(g);
                let mut da = Array1::zeros(n);
                for (i, &j) in idx.iter().enumerate() {
                    da[j] += g1[i];
                }
                self.acc(grads, *input, da.into_dyn());
            }
            Op::GatherElems { input, idx } => {
                let (r, c) = as2(val(*input)).dim();
                let g1 = as1(g);
                let mut da = Array2::zeros((r, c));
                for (i, &(row, col)) in idx.iter().enumerate() {
                    da[[row, col]] += g1[i];
                }
                self.acc(grads, *input, da.into_dyn());
            }
            Op::SubOuter(a, b) => {
                let g2 = as2(g);
                let da = g2.sum_axis(ndarray::Axis(1));
                let db = -g2.sum_axis(ndarray::Axis(0));
                self.acc(grads, *a, da.into_dyn());
                self.acc(grads, *b, db.into_dyn());
            }
            Op::StackScalars { inputs } => {
                let g1 = as1(g);
                for (i, &t) in inputs.iter().enumerate() {
                    self.acc(grads, t, ArrayD::from_elem(IxDyn(&[]), g1[i]));
                }
            }
            Op::Reshape { input } => {
                let flat: Vec<f64> = g.iter().cloned().collect();
                let da = ArrayD::from_shape_vec(val(*input).raw_dim(), flat).expect("reshape grad");
                self.acc(grads, *input, da);
            }
            Op::Permute3 { input, perm } => {
                let mut inv = [0usize; 3];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                let da = as3(g).permuted_axes(inv).as_standard_layout().to_owned();
                self.acc(grads, *input, da.into_dyn());
            }
            Op::LogSumExpZero(a) => {
                let y = scalar_of(&self.values[i]);
                let gs = scalar_of(g);
                let da = val(*a).mapv(|x| gs * (x - y).exp());
                self.acc(grads, *a, da);
            }
        }
    }
}

impl Default for Graph {
    fn default() -> Self {
        Graph::new()
    }
}

/// Central finite differences of `f` with respect to every entry of every
/// input, step `eps` (scaled by coordinate magnitude).
pub fn finite_difference<F>(f: F, inputs: &[ArrayD<f64>], eps: f64) -> Vec<ArrayD<f64>>
where
    F: Fn(&[ArrayD<f64>]) -> f64,
{
    let mut out = Vec::with_capacity(inputs.len());
    for (k, inp) in inputs.iter().enumerate() {
        let mut grad = ArrayD::zeros(inp.raw_dim());
        for idx in 0..inp.len() {
            let mut plus = inputs.to_vec();
            let mut minus = inputs.to_vec();
            let base = inp.as_slice().expect("standard layout")[idx];
            let h = eps * (1.0 + base.abs());
            plus[k].as_slice_mut().expect("standard layout")[idx] = base + h;
            minus[k].as_slice_mut().expect("standard layout")[idx] = base - h;
            grad.as_slice_mut().expect("standard layout")[idx] = (f(&plus) - f(&minus)) / (2.0 * h);
        }
        out.push(grad);
    }
    out
}

/// Worst relative disagreement between analytic and numeric gradients, with a
/// floor on the denominator so near-zero entries compare absolutely.
pub fn max_grad_err(analytic: &ArrayD<f64>, numeric: &ArrayD<f64>) -> f64 {
    assert_eq!(analytic.shape(), numeric.shape(), "gradient shape mismatch");
    analytic
        .iter()
        .zip(numeric.iter())
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-3))
        .fold(0.0, f64::max)
}
