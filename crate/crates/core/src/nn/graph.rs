//! Define-by-run reverse-mode autodiff over [`Tensor`] values.
//!
//! Every op appends a node holding its forward value. `backward` walks the
//! tape in reverse and returns gradients for every node that depends on a
//! gradient-requiring leaf.

use super::tensor::{gemm, Mat, Scalar, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<F> {
    Leaf,
    Conv2d { x: Var, w: Var, b: Var, cols: Vec<F> },
    LeakyRelu { x: Var, slope: F },
    AvgPool2 { x: Var },
    Upsample2 { x: Var },
    Concat { a: Var, b: Var },
    Add { a: Var, b: Var },
    Scale { x: Var, s: F },
    Warp { img: Var, flow: Var },
    Mse { a: Var, b: Var },
    GradReg { x: Var },
    SegLoss { logits: Var, labels: Vec<usize>, probs: Vec<F>, smooth: F },
}

struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    needs_grad: bool,
}

pub struct Graph<F> {
    nodes: Vec<Node<F>>,
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients<F> {
    grads: Vec<Option<Tensor<F>>>,
}

impl<F: Scalar> Gradients<F> {
    pub fn get(&self, v: Var) -> Option<&Tensor<F>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<F>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

impl<F: Scalar> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

/// Bilinear sampling footprint of one output pixel.
struct Tap<F> {
    idx: [usize; 4],
    wy: F,
    wx: F,
    dy_live: bool,
    dx_live: bool,
}

/// Sample position `(y, x)` clamped to the image; out-of-range coordinates
/// replicate the border and carry no gradient.
fn bilinear_tap<F: Scalar>(h: usize, w: usize, y: F, x: F) -> Tap<F> {
    let ymax = F::from_usize(h - 1).unwrap();
    let xmax = F::from_usize(w - 1).unwrap();
    let dy_live = y >= F::zero() && y <= ymax;
    let dx_live = x >= F::zero() && x <= xmax;
    let yc = y.max(F::zero()).min(ymax);
    let xc = x.max(F::zero()).min(xmax);
    let y0 = yc.floor().to_usize().unwrap().min(h.saturating_sub(2));
    let x0 = xc.floor().to_usize().unwrap().min(w.saturating_sub(2));
    let y1 = (y0 + 1).min(h - 1);
    let x1 = (x0 + 1).min(w - 1);
    let wy = yc - F::from_usize(y0).unwrap();
    let wx = xc - F::from_usize(x0).unwrap();
    Tap { idx: [y0 * w + x0, y0 * w + x1, y1 * w + x0, y1 * w + x1], wy, wx, dy_live, dx_live }
}

impl<F: Scalar> Tap<F> {
    fn weights(&self) -> [F; 4] {
        let one = F::one();
        [
            (one - self.wy) * (one - self.wx),
            (one - self.wy) * self.wx,
            self.wy * (one - self.wx),
            self.wy * self.wx,
        ]
    }

    fn sample(&self, plane: &[F]) -> F {
        let wts = self.weights();
        (0..4).fold(F::zero(), |acc, k| acc + wts[k] * plane[self.idx[k]])
    }

    /// Partial derivatives of the sample with respect to the (y, x) position.
    fn position_grad(&self, plane: &[F]) -> (F, F) {
        let one = F::one();
        let [i00, i01, i10, i11] = self.idx.map(|i| plane[i]);
        let gy = (one - self.wx) * (i10 - i00) + self.wx * (i11 - i01);
        let gx = (one - self.wy) * (i01 - i00) + self.wy * (i11 - i10);
        (
            if self.dy_live { gy } else { F::zero() },
            if self.dx_live { gx } else { F::zero() },
        )
    }
}

/// Warp a batch of images by a batch of `(dy, dx)` displacement fields:
/// `out(p) = img(p + flow(p))`, bilinear, border clamped.
pub fn warp_forward<F: Scalar>(img: &Tensor<F>, flow: &Tensor<F>) -> Tensor<F> {
    let [n, c, h, w] = img.shape();
    assert_eq!(flow.shape(), [n, 2, h, w], "flow must be [N, 2, H, W] matching the image");
    let plane = h * w;
    let mut out = Tensor::zeros(img.shape());
    let (src, fl) = (img.data(), flow.data());
    let dst = out.data_mut();
    for b in 0..n {
        for i in 0..h {
            for j in 0..w {
                let p = i * w + j;
                let y = F::from_usize(i).unwrap() + fl[(b * 2) * plane + p];
                let x = F::from_usize(j).unwrap() + fl[(b * 2 + 1) * plane + p];
                let tap = bilinear_tap(h, w, y, x);
                for ch in 0..c {
                    let base = (b * c + ch) * plane;
                    dst[base + p] = tap.sample(&src[base..base + plane]);
                }
            }
        }
    }
    out
}

fn im2col<F: Scalar>(x: &[F], cin: usize, h: usize, w: usize, k: usize, cols: &mut [F]) {
    let pad = k / 2;
    let hw = h * w;
    for c in 0..cin {
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - pad as isize;
                    let drow = &mut dst[y * w..(y + 1) * w];
                    if sy < 0 || sy >= h as isize {
                        drow.fill(F::zero());
                        continue;
                    }
                    let srow = &x[c * hw + sy as usize * w..c * hw + (sy as usize + 1) * w];
                    for (xx, d) in drow.iter_mut().enumerate() {
                        let sx = xx as isize + kx as isize - pad as isize;
                        *d = if sx < 0 || sx >= w as isize { F::zero() } else { srow[sx as usize] };
                    }
                }
            }
        }
    }
}

fn col2im_add<F: Scalar>(cols: &[F], cin: usize, h: usize, w: usize, k: usize, dx: &mut [F]) {
    let pad = k / 2;
    let hw = h * w;
    for c in 0..cin {
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &cols[row * hw..(row + 1) * hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - pad as isize;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let base = c * hw + sy as usize * w;
                    for xx in 0..w {
                        let sx = xx as isize + kx as isize - pad as isize;
                        if sx >= 0 && sx < w as isize {
                            dx[base + sx as usize] = dx[base + sx as usize] + src[y * w + xx];
                        }
                    }
                }
            }
        }
    }
}

/// Per-pixel softmax over the channel axis.
pub fn softmax_channels<F: Scalar>(logits: &Tensor<F>) -> Tensor<F> {
    let [n, c, h, w] = logits.shape();
    let plane = h * w;
    let mut out = Tensor::zeros(logits.shape());
    let (src, dst) = (logits.data(), out.data_mut());
    for b in 0..n {
        for p in 0..plane {
            let at = |ch: usize| (b * c + ch) * plane + p;
            let m = (0..c).map(|ch| src[at(ch)]).fold(F::neg_infinity(), F::max);
            let mut z = F::zero();
            for ch in 0..c {
                let e = (src[at(ch)] - m).exp();
                dst[at(ch)] = e;
                z = z + e;
            }
            for ch in 0..c {
                dst[at(ch)] = dst[at(ch)] / z;
            }
        }
    }
    out
}

impl<F: Scalar> Graph<F> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Constant input; no gradient is tracked.
    pub fn input(&mut self, t: Tensor<F>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Leaf whose gradient is reported by `backward`.
    pub fn leaf(&mut self, t: Tensor<F>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    /// Stride-1 "same" convolution; the kernel `[Cout, Cin, k, k]` must have odd `k`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var) -> Var {
        let [n, cin, h, wd] = self.value(x).shape();
        let [cout, wcin, k, k2] = self.value(w).shape();
        assert_eq!(cin, wcin, "conv2d input channels");
        assert!(k == k2 && k % 2 == 1, "conv2d kernel must be square and odd");
        assert_eq!(self.value(b).len(), cout, "conv2d bias length");
        let needs = self.needs(x) || self.needs(w) || self.needs(b);
        let hw = h * wd;
        let rows = cin * k * k;
        let mut out = Tensor::zeros([n, cout, h, wd]);
        let mut cols = vec![F::zero(); rows * hw * n];
        {
            let (xs, ws, bs) = (self.value(x).data(), self.value(w).data(), self.value(b).data());
            let od = out.data_mut();
            for s in 0..n {
                let col = &mut cols[s * rows * hw..(s + 1) * rows * hw];
                im2col(&xs[s * cin * hw..(s + 1) * cin * hw], cin, h, wd, k, col);
                let o = &mut od[s * cout * hw..(s + 1) * cout * hw];
                for (co, chunk) in o.chunks_mut(hw).enumerate() {
                    chunk.fill(bs[co]);
                }
                gemm(Mat::new(ws, cout, rows), Mat::new(col, rows, hw), F::one(), o);
            }
        }
        if !needs {
            cols = Vec::new();
        }
        self.push(out, Op::Conv2d { x, w, b, cols }, needs)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let s = F::lit(slope);
        let out = self.value(x).map(|v| if v > F::zero() { v } else { v * s });
        let needs = self.needs(x);
        self.push(out, Op::LeakyRelu { x, slope: s }, needs)
    }

    /// 2x2 average pooling; H and W must be even.
    pub fn avg_pool2(&mut self, x: Var) -> Var {
        let [n, c, h, w] = self.value(x).shape();
        assert!(h % 2 == 0 && w % 2 == 0, "avg_pool2 needs even spatial size, got {h}x{w}");
        let (ho, wo) = (h / 2, w / 2);
        let mut out = Tensor::zeros([n, c, ho, wo]);
        let quarter = F::lit(0.25);
        {
            let src = self.value(x).data();
            let dst = out.data_mut();
            for pc in 0..n * c {
                for i in 0..ho {
                    for j in 0..wo {
                        let b = pc * h * w;
                        let s = src[b + 2 * i * w + 2 * j]
                            + src[b + 2 * i * w + 2 * j + 1]
                            + src[b + (2 * i + 1) * w + 2 * j]
                            + src[b + (2 * i + 1) * w + 2 * j + 1];
                        dst[pc * ho * wo + i * wo + j] = s * quarter;
                    }
                }
            }
        }
        let needs = self.needs(x);
        self.push(out, Op::AvgPool2 { x }, needs)
    }

    /// Nearest-neighbour 2x upsampling.
    pub fn upsample2(&mut self, x: Var) -> Var {
        let [n, c, h, w] = self.value(x).shape();
        let (ho, wo) = (2 * h, 2 * w);
        let mut out = Tensor::zeros([n, c, ho, wo]);
        {
            let src = self.value(x).data();
            let dst = out.data_mut();
            for pc in 0..n * c {
                for i in 0..ho {
                    for j in 0..wo {
                        dst[pc * ho * wo + i * wo + j] = src[pc * h * w + (i / 2) * w + j / 2];
                    }
                }
            }
        }
        let needs = self.needs(x);
        self.push(out, Op::Upsample2 { x }, needs)
    }

    pub fn concat(&mut self, a: Var, b: Var) -> Var {
        let out = Tensor::concat_channels(self.value(a), self.value(b));
        let needs = self.needs(a) || self.needs(b);
        self.push(out, Op::Concat { a, b }, needs)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        let needs = self.needs(a) || self.needs(b);
        self.push(out, Op::Add { a, b }, needs)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let s = F::lit(s);
        let out = self.value(x).map(|v| v * s);
        let needs = self.needs(x);
        self.push(out, Op::Scale { x, s }, needs)
    }

    /// Bilinear warp `img(p + flow(p))`; see [`warp_forward`].
    pub fn warp(&mut self, img: Var, flow: Var) -> Var {
        let out = warp_forward(self.value(img), self.value(flow));
        let needs = self.needs(img) || self.needs(flow);
        self.push(out, Op::Warp { img, flow }, needs)
    }

    /// Mean squared difference over all elements.
    pub fn mse(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape(), tb.shape(), "mse shape mismatch");
        let sum = ta
            .data()
            .iter()
            .zip(tb.data())
            .fold(F::zero(), |acc, (&x, &y)| acc + (x - y) * (x - y));
        let out = Tensor::scalar(sum / F::from_usize(ta.len()).unwrap());
        let needs = self.needs(a) || self.needs(b);
        self.push(out, Op::Mse { a, b }, needs)
    }

    /// Squared forward-difference smoothness penalty of a field batch:
    /// `(mean(Δy²) + mean(Δx²)) / 2`, each mean over valid (non-edge) positions
    /// of every channel and sample.
    pub fn grad_reg(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(grad_reg_value(self.value(x)));
        let needs = self.needs(x);
        self.push(out, Op::GradReg { x }, needs)
    }

    /// Cross-entropy plus soft Dice (foreground classes) on per-pixel logits.
    /// `labels` holds one class id per pixel in `N x H x W` order.
    pub fn seg_loss(&mut self, logits: Var, labels: &[usize], smooth: f64) -> Var {
        let t = self.value(logits);
        let [n, c, h, w] = t.shape();
        assert_eq!(labels.len(), n * h * w, "seg_loss label count");
        assert!(c >= 2, "seg_loss needs at least two classes");
        let probs = softmax_channels(t).into_vec();
        let smooth = F::lit(smooth);
        let plane = h * w;
        let mut ce = F::zero();
        for b in 0..n {
            for p in 0..plane {
                let l = labels[b * plane + p];
                assert!(l < c, "label {l} out of range for {c} classes");
                let pr = probs[(b * c + l) * plane + p].max(F::min_positive_value());
                ce = ce - pr.ln();
            }
        }
        ce = ce / F::from_usize(n * plane).unwrap();
        let mut dice_sum = F::zero();
        for b in 0..n {
            for cl in 1..c {
                let (i, ps, gs) = dice_terms(&probs, labels, b, cl, c, plane);
                dice_sum = dice_sum + (F::lit(2.0) * i + smooth) / (ps + gs + smooth);
            }
        }
        let dice_loss = F::one() - dice_sum / F::from_usize(n * (c - 1)).unwrap();
        let needs = self.needs(logits);
        self.push(
            Tensor::scalar(ce + dice_loss),
            Op::SegLoss { logits, labels: labels.to_vec(), probs, smooth },
            needs,
        )
    }

    /// Reverse pass seeded with d(loss)/d(loss) = 1. `loss` must be a scalar.
    pub fn backward(&self, loss: Var) -> Gradients<F> {
        assert_eq!(self.value(loss).len(), 1, "backward from a non-scalar node");
        let mut grads: Vec<Option<Tensor<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(F::one()));
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.backward_node(node, &g, &mut grads);
            if matches!(node.op, Op::Leaf) {
                grads[id] = Some(g);
            }
        }
        Gradients { grads }
    }

    fn backward_node(&self, node: &Node<F>, g: &Tensor<F>, grads: &mut [Option<Tensor<F>>]) {
        let acc = |v: Var, t: Tensor<F>, grads: &mut [Option<Tensor<F>>]| {
            if !self.needs(v) {
                return;
            }
            match &mut grads[v.0] {
                Some(e) => e.add_assign(&t),
                slot => *slot = Some(t),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, cols } => {
                let [n, cin, h, wd] = self.value(*x).shape();
                let wt = self.value(*w);
                let [cout, _, k, _] = wt.shape();
                let hw = h * wd;
                let rows = cin * k * k;
                let gd = g.data();
                if self.needs(*w) || self.needs(*b) {
                    let mut dw = Tensor::zeros(wt.shape());
                    let mut db = Tensor::zeros([1, 1, 1, cout]);
                    for s in 0..n {
                        let go = &gd[s * cout * hw..(s + 1) * cout * hw];
                        let col = &cols[s * rows * hw..(s + 1) * rows * hw];
                        gemm(Mat::new(go, cout, hw), Mat::new(col, rows, hw).t(), F::one(), dw.data_mut());
                        for (co, chunk) in go.chunks(hw).enumerate() {
                            let s = chunk.iter().fold(F::zero(), |a, &v| a + v);
                            db.data_mut()[co] = db.data()[co] + s;
                        }
                    }
                    let bshape = self.value(*b).shape();
                    acc(*w, dw, grads);
                    acc(*b, Tensor::from_vec(bshape, db.into_vec()), grads);
                }
                if self.needs(*x) {
                    let mut dx = Tensor::zeros([n, cin, h, wd]);
                    let mut dcol = vec![F::zero(); rows * hw];
                    for s in 0..n {
                        let go = &gd[s * cout * hw..(s + 1) * cout * hw];
                        gemm(Mat::new(wt.data(), cout, rows).t(), Mat::new(go, cout, hw), F::zero(), &mut dcol);
                        col2im_add(&dcol, cin, h, wd, k, &mut dx.data_mut()[s * cin * hw..(s + 1) * cin * hw]);
                    }
                    acc(*x, dx, grads);
                }
            }
            Op::LeakyRelu { x, slope } => {
                let xv = self.value(*x).data();
                let data = g
                    .data()
                    .iter()
                    .zip(xv)
                    .map(|(&gv, &v)| if v > F::zero() { gv } else { gv * *slope })
                    .collect();
                acc(*x, Tensor::from_vec(g.shape(), data), grads);
            }
            Op::AvgPool2 { x } => {
                let [n, c, h, w] = self.value(*x).shape();
                let (ho, wo) = (h / 2, w / 2);
                let mut dx = Tensor::zeros([n, c, h, w]);
                let quarter = F::lit(0.25);
                let (gd, dd) = (g.data(), dx.data_mut());
                for pc in 0..n * c {
                    for i in 0..h {
                        for j in 0..w {
                            dd[pc * h * w + i * w + j] = gd[pc * ho * wo + (i / 2) * wo + j / 2] * quarter;
                        }
                    }
                }
                acc(*x, dx, grads);
            }
            Op::Upsample2 { x } => {
                let [n, c, h, w] = self.value(*x).shape();
                let (ho, wo) = (2 * h, 2 * w);
                let mut dx = Tensor::zeros([n, c, h, w]);
                let (gd, dd) = (g.data(), dx.data_mut());
                for pc in 0..n * c {
                    for i in 0..ho {
                        for j in 0..wo {
                            let d = &mut dd[pc * h * w + (i / 2) * w + j / 2];
                            *d = *d + gd[pc * ho * wo + i * wo + j];
                        }
                    }
                }
                acc(*x, dx, grads);
            }
            Op::Concat { a, b } => {
                let [n, ca, h, w] = self.value(*a).shape();
                let cb = self.value(*b).shape()[1];
                let plane = h * w;
                let mut da = Vec::with_capacity(n * ca * plane);
                let mut db = Vec::with_capacity(n * cb * plane);
                for s in 0..n {
                    let base = s * (ca + cb) * plane;
                    da.extend_from_slice(&g.data()[base..base + ca * plane]);
                    db.extend_from_slice(&g.data()[base + ca * plane..base + (ca + cb) * plane]);
                }
                acc(*a, Tensor::from_vec([n, ca, h, w], da), grads);
                acc(*b, Tensor::from_vec([n, cb, h, w], db), grads);
            }
            Op::Add { a, b } => {
                acc(*a, g.clone(), grads);
                acc(*b, g.clone(), grads);
            }
            Op::Scale { x, s } => {
                acc(*x, g.map(|v| v * *s), grads);
            }
            Op::Warp { img, flow } => {
                let it = self.value(*img);
                let ft = self.value(*flow);
                let [n, c, h, w] = it.shape();
                let plane = h * w;
                let mut dimg = Tensor::zeros(it.shape());
                let mut dflow = Tensor::zeros(ft.shape());
                let (src, fl, gd) = (it.data(), ft.data(), g.data());
                for b in 0..n {
                    for i in 0..h {
                        for j in 0..w {
                            let p = i * w + j;
                            let y = F::from_usize(i).unwrap() + fl[(b * 2) * plane + p];
                            let x = F::from_usize(j).unwrap() + fl[(b * 2 + 1) * plane + p];
                            let tap = bilinear_tap(h, w, y, x);
                            let wts = tap.weights();
                            let (mut gy, mut gx) = (F::zero(), F::zero());
                            for ch in 0..c {
                                let base = (b * c + ch) * plane;
                                let go = gd[base + p];
                                let di = &mut dimg.data_mut()[base..base + plane];
                                for k in 0..4 {
                                    di[tap.idx[k]] = di[tap.idx[k]] + wts[k] * go;
                                }
                                let (py, px) = tap.position_grad(&src[base..base + plane]);
                                gy = gy + py * go;
                                gx = gx + px * go;
                            }
                            dflow.data_mut()[(b * 2) * plane + p] = gy;
                            dflow.data_mut()[(b * 2 + 1) * plane + p] = gx;
                        }
                    }
                }
                acc(*img, dimg, grads);
                acc(*flow, dflow, grads);
            }
            Op::Mse { a, b } => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let k = g.item() * F::lit(2.0) / F::from_usize(ta.len()).unwrap();
                let diff: Vec<F> = ta.data().iter().zip(tb.data()).map(|(&x, &y)| (x - y) * k).collect();
                let neg = diff.iter().map(|&v| -v).collect();
                acc(*a, Tensor::from_vec(ta.shape(), diff), grads);
                acc(*b, Tensor::from_vec(tb.shape(), neg), grads);
            }
            Op::GradReg { x } => {
                let t = self.value(*x);
                let [n, c, h, w] = t.shape();
                let mut dx = Tensor::zeros(t.shape());
                let gs = g.item();
                let ny = n * c * h.saturating_sub(1) * w;
                let nx = n * c * h * w.saturating_sub(1);
                let ky = if ny > 0 { gs / F::from_usize(ny).unwrap() } else { F::zero() };
                let kx = if nx > 0 { gs / F::from_usize(nx).unwrap() } else { F::zero() };
                let (src, dst) = (t.data(), dx.data_mut());
                for pc in 0..n * c {
                    let b = pc * h * w;
                    for i in 0..h {
                        for j in 0..w {
                            let p = b + i * w + j;
                            if i + 1 < h {
                                let d = src[p + w] - src[p];
                                dst[p + w] = dst[p + w] + d * ky;
                                dst[p] = dst[p] - d * ky;
                            }
                            if j + 1 < w {
                                let d = src[p + 1] - src[p];
                                dst[p + 1] = dst[p + 1] + d * kx;
                                dst[p] = dst[p] - d * kx;
                            }
                        }
                    }
                }
                acc(*x, dx, grads);
            }
            Op::SegLoss { logits, labels, probs, smooth } => {
                let [n, c, h, w] = self.value(*logits).shape();
                let plane = h * w;
                let gs = g.item();
                let two = F::lit(2.0);
                let ce_k = gs / F::from_usize(n * plane).unwrap();
                let dice_k = -gs / F::from_usize(n * (c - 1)).unwrap();
                // d(loss)/d(prob) from the Dice term.
                let mut dp = vec![F::zero(); probs.len()];
                for b in 0..n {
                    for cl in 1..c {
                        let (i, ps, gsum) = dice_terms(probs, labels, b, cl, c, plane);
                        let den = ps + gsum + *smooth;
                        let num = two * i + *smooth;
                        for p in 0..plane {
                            let gt = if labels[b * plane + p] == cl { F::one() } else { F::zero() };
                            dp[(b * c + cl) * plane + p] = dice_k * (two * gt * den - num) / (den * den);
                        }
                    }
                }
                let mut dz = vec![F::zero(); probs.len()];
                for b in 0..n {
                    for p in 0..plane {
                        let at = |ch: usize| (b * c + ch) * plane + p;
                        let dot = (0..c).fold(F::zero(), |a, ch| a + probs[at(ch)] * dp[at(ch)]);
                        let l = labels[b * plane + p];
                        for ch in 0..c {
                            let pr = probs[at(ch)];
                            let onehot = if ch == l { F::one() } else { F::zero() };
                            dz[at(ch)] = pr * (dp[at(ch)] - dot) + ce_k * (pr - onehot);
                        }
                    }
                }
                acc(*logits, Tensor::from_vec([n, c, h, w], dz), grads);
            }
        }
    }
}

fn dice_terms<F: Scalar>(probs: &[F], labels: &[usize], b: usize, cl: usize, c: usize, plane: usize) -> (F, F, F) {
    let mut inter = F::zero();
    let mut psum = F::zero();
    let mut gsum = F::zero();
    for p in 0..plane {
        let pr = probs[(b * c + cl) * plane + p];
        psum = psum + pr;
        if labels[b * plane + p] == cl {
            inter = inter + pr;
            gsum = gsum + F::one();
        }
    }
    (inter, psum, gsum)
}

pub(crate) fn grad_reg_value<F: Scalar>(t: &Tensor<F>) -> F {
    let [n, c, h, w] = t.shape();
    let src = t.data();
    let (mut sy, mut sx) = (F::zero(), F::zero());
    for pc in 0..n * c {
        let b = pc * h * w;
        for i in 0..h {
            for j in 0..w {
                let p = b + i * w + j;
                if i + 1 < h {
                    let d = src[p + w] - src[p];
                    sy = sy + d * d;
                }
                if j + 1 < w {
                    let d = src[p + 1] - src[p];
                    sx = sx + d * d;
                }
            }
        }
    }
    let ny = n * c * h.saturating_sub(1) * w;
    let nx = n * c * h * w.saturating_sub(1);
    let my = if ny > 0 { sy / F::from_usize(ny).unwrap() } else { F::zero() };
    let mx = if nx > 0 { sx / F::from_usize(nx).unwrap() } else { F::zero() };
    (my + mx) / F::lit(2.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(shape: [usize; 4], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    /// Central-difference check of d(loss)/d(leaf) for a graph builder.
    fn check_grad(
        leaves: Vec<Tensor<f64>>,
        build: impl Fn(&mut Graph<f64>, &[Var]) -> Var,
        tol: f64,
    ) {
        let mut g = Graph::new();
        let vars: Vec<Var> = leaves.iter().map(|t| g.leaf(t.clone())).collect();
        let loss = build(&mut g, &vars);
        let grads = g.backward(loss);
        let eps = 1e-6;
        for (li, leaf) in leaves.iter().enumerate() {
            let analytic = grads.get(vars[li]).expect("leaf gradient").clone();
            for k in 0..leaf.len() {
                let eval = |delta: f64| {
                    let mut ls = leaves.clone();
                    ls[li].data_mut()[k] += delta;
                    let mut g2 = Graph::new();
                    let v2: Vec<Var> = ls.into_iter().map(|t| g2.leaf(t)).collect();
                    let l = build(&mut g2, &v2);
                    g2.value(l).item()
                };
                let num = (eval(eps) - eval(-eps)) / (2.0 * eps);
                let a = analytic.data()[k];
                assert!(
                    (a - num).abs() <= tol * (1.0 + num.abs()),
                    "leaf {li} elem {k}: analytic {a} vs numeric {num}"
                );
            }
        }
    }

    #[test]
    fn conv_pool_upsample_concat_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rand_tensor([2, 2, 4, 4], &mut rng);
        let w3 = rand_tensor([3, 2, 3, 3], &mut rng);
        let b3 = rand_tensor([1, 1, 1, 3], &mut rng);
        let w1 = rand_tensor([2, 5, 1, 1], &mut rng);
        let b1 = rand_tensor([1, 1, 1, 2], &mut rng);
        let target = rand_tensor([2, 2, 4, 4], &mut rng);
        check_grad(
            vec![x, w3, b3, w1, b1],
            |g, v| {
                let h = g.conv2d(v[0], v[1], v[2]);
                let h = g.leaky_relu(h, 0.2);
                let d = g.avg_pool2(h);
                let u = g.upsample2(d);
                let c = g.concat(u, v[0]);
                let o = g.conv2d(c, v[3], v[4]);
                let o = g.scale(o, 0.7);
                let t = g.input(target.clone());
                let s = g.add(o, t);
                g.mse(s, t)
            },
            1e-6,
        );
    }

    #[test]
    fn warp_and_smoothness_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let img = rand_tensor([1, 1, 5, 6], &mut rng);
        // Keep samples away from integer lattice lines, where bilinear has kinks.
        let flow = Tensor::from_vec(
            [1, 2, 5, 6],
            (0..60).map(|_| rng.gen_range(0.1..0.4) * if rng.gen() { 1.0 } else { -1.0 } + 0.5).collect(),
        );
        let target = rand_tensor([1, 1, 5, 6], &mut rng);
        check_grad(
            vec![img, flow],
            |g, v| {
                let wp = g.warp(v[0], v[1]);
                let t = g.input(target.clone());
                let m = g.mse(wp, t);
                let r = g.grad_reg(v[1]);
                let r = g.scale(r, 0.3);
                g.add(m, r)
            },
            1e-6,
        );
    }

    #[test]
    fn seg_loss_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let logits = rand_tensor([2, 3, 3, 3], &mut rng);
        let labels: Vec<usize> = (0..18).map(|_| rng.gen_range(0..3)).collect();
        check_grad(vec![logits], |g, v| g.seg_loss(v[0], &labels, 1e-5), 1e-6);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = softmax_channels(&rand_tensor([2, 4, 3, 3], &mut rng).map(|v| v * 30.0));
        for b in 0..2 {
            for px in 0..9 {
                let s: f64 = (0..4).map(|c| p.data()[(b * 4 + c) * 9 + px]).sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }
}
