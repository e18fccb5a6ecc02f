//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every operation appends a node holding its output value; `backward` walks
//! the tape in reverse and accumulates gradients into the nodes that require
//! them. Nodes that do not (transitively) depend on a gradient-requiring leaf
//! are skipped entirely, so frozen network weights cost nothing in backward.

use alloc::vec;
use alloc::vec::Vec;

use crate::scalar::{gemm, Real};
use crate::schedule::{cfg_elem, ddim_elem, DdimCoefficients};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn kdim(&self) -> usize {
        self.cin * self.k * self.k
    }
    fn pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }
}

enum Op<F> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, F),
    AddBias { x: Var, bias: Var, axis: usize },
    Conv2d { x: Var, w: Var, geom: ConvGeom },
    Linear { x: Var, w: Var },
    Silu(Var),
    Tanh(Var),
    Sigmoid(Var),
    UpsampleNearest2x(Var),
    Concat1(Vec<Var>),
    Film { x: Var, scale: Option<Var>, shift: Var },
    MulSpatial { x: Var, mask: Var },
    GlobalAvgPool(Var),
    GlobalMaxPool { x: Var, argmax: Vec<usize> },
    MeanAxis1(Var),
    Reshape(Var),
    PixelShuffle { x: Var, r: usize },
    GroupNorm { x: Var, groups: usize, eps: F },
    SoftmaxCrossEntropy { logits: Var, labels: Vec<usize> },
    SumSquares(Var),
    Mse(Var, Var),
    Cfg { uncond: Var, cond: Var, lambda: F },
    Ddim { z: Var, eps: Var, coef: DdimCoefficients<F> },
}

struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    requires_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients<F> {
    grads: Vec<Option<Tensor<F>>>,
}

impl<F: Real> Gradients<F> {
    pub fn get(&self, v: Var) -> Option<&Tensor<F>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<F>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

pub struct Tape<F: Real> {
    nodes: Vec<Node<F>>,
}

impl<F: Real> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

fn silu<F: Real>(x: F) -> F {
    x / (F::one() + (-x).exp())
}

fn sigmoid<F: Real>(x: F) -> F {
    F::one() / (F::one() + (-x).exp())
}

/// Output columns `ow` whose input column `ow·stride + kj − pad` lies inside the row.
fn valid_cols(g: &ConvGeom, kj: usize) -> core::ops::Range<usize> {
    let lo = g.pad.saturating_sub(kj).div_ceil(g.stride);
    let hi = if g.w + g.pad > kj { (g.w + g.pad - kj - 1) / g.stride + 1 } else { 0 };
    lo.min(g.wo)..hi.min(g.wo).max(lo.min(g.wo))
}

fn im2col<F: Real>(x: &[F], g: &ConvGeom, col: &mut [F]) {
    let hw_out = g.ho * g.wo;
    for ci in 0..g.cin {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (ci * g.k + ki) * g.k + kj;
                let dst = &mut col[row * hw_out..(row + 1) * hw_out];
                let cols = valid_cols(g, kj);
                for oh in 0..g.ho {
                    let ih = (oh * g.stride + ki) as isize - g.pad as isize;
                    let out_row = &mut dst[oh * g.wo..(oh + 1) * g.wo];
                    if ih < 0 || ih >= g.h as isize {
                        out_row.fill(F::zero());
                        continue;
                    }
                    let src = &plane[ih as usize * g.w..(ih as usize + 1) * g.w];
                    out_row[..cols.start].fill(F::zero());
                    out_row[cols.end..].fill(F::zero());
                    if cols.is_empty() {
                        continue;
                    }
                    let first = cols.start * g.stride + kj - g.pad;
                    if g.stride == 1 {
                        out_row[cols.clone()].copy_from_slice(&src[first..first + cols.len()]);
                    } else {
                        for (i, v) in out_row[cols.clone()].iter_mut().enumerate() {
                            *v = src[first + i * g.stride];
                        }
                    }
                }
            }
        }
    }
}

fn col2im<F: Real>(col: &[F], g: &ConvGeom, dx: &mut [F]) {
    let hw_out = g.ho * g.wo;
    for ci in 0..g.cin {
        let plane = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (ci * g.k + ki) * g.k + kj;
                let src = &col[row * hw_out..(row + 1) * hw_out];
                let cols = valid_cols(g, kj);
                if cols.is_empty() {
                    continue;
                }
                let first = cols.start * g.stride + kj - g.pad;
                for oh in 0..g.ho {
                    let ih = (oh * g.stride + ki) as isize - g.pad as isize;
                    if ih < 0 || ih >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[ih as usize * g.w..(ih as usize + 1) * g.w];
                    let s = &src[oh * g.wo + cols.start..oh * g.wo + cols.end];
                    for (i, v) in s.iter().enumerate() {
                        dst[first + i * g.stride] += *v;
                    }
                }
            }
        }
    }
}

fn add_into<F: Real>(slot: &mut Option<Tensor<F>>, g: Tensor<F>) {
    match slot {
        Some(acc) => {
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += *b;
            }
        }
        None => *slot = Some(g),
    }
}

impl<F: Real> Tape<F> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// A leaf whose gradient is tracked.
    pub fn var(&mut self, value: Tensor<F>) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad: true });
        Var(self.nodes.len() - 1)
    }

    /// A leaf excluded from differentiation.
    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad: false });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor<F>, requires_grad: bool) -> Var {
        if requires_grad {
            self.var(value)
        } else {
            self.constant(value)
        }
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(F, F) -> F) -> Tensor<F> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(va.shape(), vb.shape(), "elementwise operands must match");
        va.zip_with(vb, f).expect("shapes checked")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.binary(a, b, |x, y| x + y);
        self.push(v, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.binary(a, b, |x, y| x - y);
        self.push(v, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.binary(a, b, |x, y| x * y);
        self.push(v, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, x: Var, s: F) -> Var {
        let v = self.nodes[x.0].value.map(|a| a * s);
        self.push(v, Op::Scale(x, s), &[x])
    }

    /// Adds `bias` (length `shape[axis]`) broadcast along every other axis.
    pub fn add_bias(&mut self, x: Var, bias: Var, axis: usize) -> Var {
        let xv = &self.nodes[x.0].value;
        let bv = &self.nodes[bias.0].value;
        let shape = xv.shape();
        assert_eq!(bv.len(), shape[axis], "bias length must match axis size");
        let inner: usize = shape[axis + 1..].iter().product();
        let c = shape[axis];
        let mut out = xv.clone();
        for (i, o) in out.data_mut().iter_mut().enumerate() {
            *o += bv.data()[(i / inner) % c];
        }
        self.push(out, Op::AddBias { x, bias, axis }, &[x, bias])
    }

    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Var {
        let xv = &self.nodes[x.0].value;
        let wv = &self.nodes[w.0].value;
        let (xs, ws) = (xv.shape(), wv.shape());
        assert_eq!(xs.len(), 4, "conv2d input must be NCHW");
        assert_eq!(ws[1], xs[1], "conv2d channel mismatch");
        assert_eq!(ws[2], ws[3], "square kernels only");
        let (n, cin, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (cout, k) = (ws[0], ws[2]);
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (wd + 2 * pad - k) / stride + 1;
        let geom = ConvGeom { n, cin, h, w: wd, cout, k, stride, pad, ho, wo };
        let kdim = geom.kdim();
        let hw_out = ho * wo;
        let mut out = vec![F::zero(); n * cout * hw_out];
        let mut col = if geom.pointwise() { Vec::new() } else { vec![F::zero(); kdim * hw_out] };
        for b in 0..n {
            let xb = &xv.data()[b * cin * h * wd..(b + 1) * cin * h * wd];
            let ob = &mut out[b * cout * hw_out..(b + 1) * cout * hw_out];
            if geom.pointwise() {
                gemm(cout, kdim, hw_out, wv.data(), false, xb, false, ob, false);
            } else {
                im2col(xb, &geom, &mut col);
                gemm(cout, kdim, hw_out, wv.data(), false, &col, false, ob, false);
            }
        }
        let value = Tensor::from_vec(&[n, cout, ho, wo], out).expect("conv output shape");
        self.push(value, Op::Conv2d { x, w, geom }, &[x, w])
    }

    /// `y = x · wᵀ` over the last axis; `w` is (out, in).
    pub fn linear(&mut self, x: Var, w: Var) -> Var {
        let xv = &self.nodes[x.0].value;
        let wv = &self.nodes[w.0].value;
        let (out_dim, in_dim) = (wv.dim(0), wv.dim(1));
        assert_eq!(*xv.shape().last().unwrap(), in_dim, "linear input width mismatch");
        let rows = xv.len() / in_dim;
        let mut out = vec![F::zero(); rows * out_dim];
        gemm(rows, in_dim, out_dim, xv.data(), false, wv.data(), true, &mut out, false);
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().unwrap() = out_dim;
        let value = Tensor::from_vec(&shape, out).expect("linear output shape");
        self.push(value, Op::Linear { x, w }, &[x, w])
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let v = self.nodes[x.0].value.map(silu);
        self.push(v, Op::Silu(x), &[x])
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let v = self.nodes[x.0].value.map(|a| a.tanh());
        self.push(v, Op::Tanh(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let v = self.nodes[x.0].value.map(sigmoid);
        self.push(v, Op::Sigmoid(x), &[x])
    }

    pub fn upsample_nearest2x(&mut self, x: Var) -> Var {
        let xv = &self.nodes[x.0].value;
        let s = xv.shape();
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let mut out = vec![F::zero(); n * c * 4 * h * w];
        for p in 0..n * c {
            let src = &xv.data()[p * h * w..(p + 1) * h * w];
            let dst = &mut out[p * 4 * h * w..(p + 1) * 4 * h * w];
            for i in 0..2 * h {
                for j in 0..2 * w {
                    dst[i * 2 * w + j] = src[(i / 2) * w + j / 2];
                }
            }
        }
        let value = Tensor::from_vec(&[n, c, 2 * h, 2 * w], out).expect("upsample shape");
        self.push(value, Op::UpsampleNearest2x(x), &[x])
    }

    /// Concatenates along axis 1; all other axes must agree.
    pub fn concat1(&mut self, parts: &[Var]) -> Var {
        let first = self.nodes[parts[0].0].value.shape().to_vec();
        let n = first[0];
        let inner: usize = first[2..].iter().product();
        let total_c: usize = parts.iter().map(|p| self.nodes[p.0].value.dim(1)).sum();
        let mut out = Vec::with_capacity(n * total_c * inner);
        for b in 0..n {
            for p in parts {
                let v = &self.nodes[p.0].value;
                assert_eq!(v.dim(0), n);
                assert_eq!(v.shape()[2..].iter().product::<usize>(), inner);
                let c = v.dim(1);
                out.extend_from_slice(&v.data()[b * c * inner..(b + 1) * c * inner]);
            }
        }
        let mut shape = first.clone();
        shape[1] = total_c;
        let value = Tensor::from_vec(&shape, out).expect("concat shape");
        self.push(value, Op::Concat1(parts.to_vec()), parts)
    }

    /// Feature-wise modulation: `x * (1 + scale) + shift` with (N, C) modulators.
    pub fn film(&mut self, x: Var, scale: Option<Var>, shift: Var) -> Var {
        let xv = &self.nodes[x.0].value;
        let (n, c) = (xv.dim(0), xv.dim(1));
        let inner = xv.len() / (n * c);
        let sh = self.nodes[shift.0].value.data();
        assert_eq!(sh.len(), n * c, "film shift must be (N, C)");
        let sc = scale.map(|s| self.nodes[s.0].value.data());
        let mut out = xv.clone();
        for (i, o) in out.data_mut().iter_mut().enumerate() {
            let nc = i / inner;
            if let Some(sc) = sc {
                *o = *o * (F::one() + sc[nc]) + sh[nc];
            } else {
                *o += sh[nc];
            }
        }
        let mut inputs = vec![x, shift];
        inputs.extend(scale);
        self.push(out, Op::Film { x, scale, shift }, &inputs)
    }

    /// Multiplies (N, C, H, W) by a (N, 1, H, W) spatial map.
    pub fn mul_spatial(&mut self, x: Var, mask: Var) -> Var {
        let xv = &self.nodes[x.0].value;
        let mv = &self.nodes[mask.0].value;
        let (n, c) = (xv.dim(0), xv.dim(1));
        let hw = xv.len() / (n * c);
        assert_eq!(mv.len(), n * hw, "spatial map must be (N, 1, H, W)");
        let mut out = xv.clone();
        for (i, o) in out.data_mut().iter_mut().enumerate() {
            let b = i / (c * hw);
            *o *= mv.data()[b * hw + i % hw];
        }
        self.push(out, Op::MulSpatial { x, mask }, &[x, mask])
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let xv = &self.nodes[x.0].value;
        let (n, c) = (xv.dim(0), xv.dim(1));
        let hw = xv.len() / (n * c);
        let inv = F::one() / F::of(hw as f64);
        let out: Vec<F> =
            xv.data().chunks(hw).map(|ch| ch.iter().copied().sum::<F>() * inv).collect();
        let value = Tensor::from_vec(&[n, c], out).expect("pool shape");
        self.push(value, Op::GlobalAvgPool(x), &[x])
    }

    /// Spatial maximum per channel; gradient goes to the first maximal element.
    pub fn global_max_pool(&mut self, x: Var) -> Var {
        let xv = &self.nodes[x.0].value;
        let (n, c) = (xv.dim(0), xv.dim(1));
        let hw = xv.len() / (n * c);
        let mut out = Vec::with_capacity(n * c);
        let mut argmax = Vec::with_capacity(n * c);
        for (k, ch) in xv.data().chunks(hw).enumerate() {
            let mut best = 0;
            for (i, v) in ch.iter().enumerate() {
                if *v > ch[best] {
                    best = i;
                }
            }
            out.push(ch[best]);
            argmax.push(k * hw + best);
        }
        let value = Tensor::from_vec(&[n, c], out).expect("pool shape");
        self.push(value, Op::GlobalMaxPool { x, argmax }, &[x])
    }

    /// Mean over axis 1 of an (N, L, D) tensor.
    pub fn mean_axis1(&mut self, x: Var) -> Var {
        let xv = &self.nodes[x.0].value;
        let (n, l, d) = (xv.dim(0), xv.dim(1), xv.dim(2));
        let inv = F::one() / F::of(l as f64);
        let mut out = vec![F::zero(); n * d];
        for b in 0..n {
            for t in 0..l {
                for k in 0..d {
                    out[b * d + k] += xv.data()[(b * l + t) * d + k];
                }
            }
        }
        out.iter_mut().for_each(|v| *v *= inv);
        let value = Tensor::from_vec(&[n, d], out).expect("mean shape");
        self.push(value, Op::MeanAxis1(x), &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let v = self.nodes[x.0].value.clone().reshape(shape).expect("reshape size");
        self.push(v, Op::Reshape(x), &[x])
    }

    /// Depth-to-space: (N, C·r², H, W) → (N, C, H·r, W·r).
    pub fn pixel_shuffle(&mut self, x: Var, r: usize) -> Var {
        let xv = &self.nodes[x.0].value;
        let s = xv.shape();
        let (n, crr, h, w) = (s[0], s[1], s[2], s[3]);
        let c = crr / (r * r);
        let mut out = vec![F::zero(); xv.len()];
        for (src_idx, dst_idx) in shuffle_pairs(n, c, h, w, r) {
            out[dst_idx] = xv.data()[src_idx];
        }
        let value = Tensor::from_vec(&[n, c, h * r, w * r], out).expect("shuffle shape");
        self.push(value, Op::PixelShuffle { x, r }, &[x])
    }

    /// Group normalisation without affine parameters.
    pub fn group_norm(&mut self, x: Var, groups: usize, eps: F) -> Var {
        let xv = &self.nodes[x.0].value;
        let (n, c) = (xv.dim(0), xv.dim(1));
        assert_eq!(c % groups, 0, "channels must divide into groups");
        let size = xv.len() / (n * groups);
        let mut out = xv.clone();
        for chunk in out.data_mut().chunks_mut(size) {
            let (mean, inv_std) = moments(chunk, eps);
            chunk.iter_mut().for_each(|v| *v = (*v - mean) * inv_std);
        }
        self.push(out, Op::GroupNorm { x, groups, eps }, &[x])
    }

    /// Mean over the batch of `-log softmax(logits)[label]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Var {
        let lv = &self.nodes[logits.0].value;
        let (n, k) = (lv.dim(0), lv.dim(1));
        assert_eq!(labels.len(), n, "one label per row");
        let mut total = F::zero();
        for (row, &y) in lv.data().chunks(k).zip(labels) {
            total += log_sum_exp(row) - row[y];
        }
        let value = Tensor::scalar(total / F::of(n as f64));
        self.push(value, Op::SoftmaxCrossEntropy { logits, labels: labels.to_vec() }, &[logits])
    }

    pub fn sum_squares(&mut self, x: Var) -> Var {
        let v = Tensor::scalar(self.nodes[x.0].value.sum_squares());
        self.push(v, Op::SumSquares(x), &[x])
    }

    /// Mean squared difference, reduced to a scalar.
    pub fn mse(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(va.shape(), vb.shape(), "mse operands must match");
        let s: F = va.data().iter().zip(vb.data()).map(|(&x, &y)| (x - y) * (x - y)).sum();
        let v = Tensor::scalar(s / F::of(va.len() as f64));
        self.push(v, Op::Mse(a, b), &[a, b])
    }

    /// Classifier-free guidance, value-identical to [`cfg_combine`](crate::schedule::cfg_combine).
    pub fn cfg(&mut self, uncond: Var, cond: Var, lambda: F) -> Var {
        let v = self.binary(uncond, cond, |u, c| cfg_elem(u, c, lambda));
        self.push(v, Op::Cfg { uncond, cond, lambda }, &[uncond, cond])
    }

    /// Deterministic DDIM update, value-identical to [`ddim_step`](crate::sampler::ddim_step).
    pub fn ddim_update(&mut self, z: Var, eps: Var, coef: DdimCoefficients<F>) -> Var {
        let v = self.binary(z, eps, |a, b| ddim_elem(a, b, &coef));
        self.push(v, Op::Ddim { z, eps, coef }, &[z, eps])
    }

    /// Back-propagates from a scalar output.
    pub fn backward(&self, output: Var) -> Gradients<F> {
        assert_eq!(self.nodes[output.0].value.len(), 1, "backward needs a scalar output");
        let mut grads: Vec<Option<Tensor<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Tensor::full(self.nodes[output.0].value.shape(), F::one()));
        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, idx: usize, g: &Tensor<F>, grads: &mut [Option<Tensor<F>>]) {
        let node = &self.nodes[idx];
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if self.wants(*a) {
                    add_into(&mut grads[a.0], g.clone());
                }
                if self.wants(*b) {
                    add_into(&mut grads[b.0], g.clone());
                }
            }
            Op::Sub(a, b) => {
                if self.wants(*a) {
                    add_into(&mut grads[a.0], g.clone());
                }
                if self.wants(*b) {
                    add_into(&mut grads[b.0], g.map(|v| -v));
                }
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    let gb = g.zip_with(self.value(*b), |x, y| x * y).unwrap();
                    add_into(&mut grads[a.0], gb);
                }
                if self.wants(*b) {
                    let ga = g.zip_with(self.value(*a), |x, y| x * y).unwrap();
                    add_into(&mut grads[b.0], ga);
                }
            }
            Op::Scale(x, s) => {
                if self.wants(*x) {
                    let s = *s;
                    add_into(&mut grads[x.0], g.map(|v| v * s));
                }
            }
            Op::AddBias { x, bias, axis } => {
                if self.wants(*x) {
                    add_into(&mut grads[x.0], g.clone());
                }
                if self.wants(*bias) {
                    let shape = out.shape();
                    let inner: usize = shape[axis + 1..].iter().product();
                    let c = shape[*axis];
                    let mut gb = Tensor::zeros(&[c]);
                    for (i, v) in g.data().iter().enumerate() {
                        gb.data_mut()[(i / inner) % c] += *v;
                    }
                    add_into(&mut grads[bias.0], gb);
                }
            }
            Op::Conv2d { x, w, geom } => self.conv_backward(*x, *w, geom, g, grads),
            Op::Linear { x, w } => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                let (out_dim, in_dim) = (wv.dim(0), wv.dim(1));
                let rows = xv.len() / in_dim;
                if self.wants(*x) {
                    let mut gx = vec![F::zero(); rows * in_dim];
                    gemm(rows, out_dim, in_dim, g.data(), false, wv.data(), false, &mut gx, false);
                    add_into(&mut grads[x.0], Tensor::from_vec(xv.shape(), gx).unwrap());
                }
                if self.wants(*w) {
                    let mut gw = vec![F::zero(); out_dim * in_dim];
                    gemm(out_dim, rows, in_dim, g.data(), true, xv.data(), false, &mut gw, false);
                    add_into(&mut grads[w.0], Tensor::from_vec(wv.shape(), gw).unwrap());
                }
            }
            Op::Silu(x) => {
                if self.wants(*x) {
                    let gx = g
                        .zip_with(self.value(*x), |gv, xv| {
                            let s = sigmoid(xv);
                            gv * s * (F::one() + xv * (F::one() - s))
                        })
                        .unwrap();
                    add_into(&mut grads[x.0], gx);
                }
            }
            Op::Tanh(x) => {
                if self.wants(*x) {
                    let gx = g.zip_with(out, |gv, y| gv * (F::one() - y * y)).unwrap();
                    add_into(&mut grads[x.0], gx);
                }
            }
            Op::Sigmoid(x) => {
                if self.wants(*x) {
                    let gx = g.zip_with(out, |gv, y| gv * y * (F::one() - y)).unwrap();
                    add_into(&mut grads[x.0], gx);
                }
            }
            Op::UpsampleNearest2x(x) => {
                if self.wants(*x) {
                    let xs = self.value(*x).shape().to_vec();
                    let (h, w) = (xs[2], xs[3]);
                    let mut gx = Tensor::zeros(&xs);
                    for p in 0..xs[0] * xs[1] {
                        let src = &g.data()[p * 4 * h * w..(p + 1) * 4 * h * w];
                        let dst = &mut gx.data_mut()[p * h * w..(p + 1) * h * w];
                        for i in 0..2 * h {
                            for j in 0..2 * w {
                                dst[(i / 2) * w + j / 2] += src[i * 2 * w + j];
                            }
                        }
                    }
                    add_into(&mut grads[x.0], gx);
                }
            }
            Op::Concat1(parts) => {
                let n = out.dim(0);
                let inner: usize = out.shape()[2..].iter().product();
                let total_c = out.dim(1);
                let mut offset = 0;
                for p in parts {
                    let pv = self.value(*p);
                    let c = pv.dim(1);
                    if self.wants(*p) {
                        let mut gp = Vec::with_capacity(pv.len());
                        for b in 0..n {
                            let start = (b * total_c + offset) * inner;
                            gp.extend_from_slice(&g.data()[start..start + c * inner]);
                        }
                        add_into(&mut grads[p.0], Tensor::from_vec(pv.shape(), gp).unwrap());
                    }
                    offset += c;
                }
            }
            Op::Film { x, scale, shift } => {
                let xv = self.value(*x);
                let (n, c) = (xv.dim(0), xv.dim(1));
                let inner = xv.len() / (n * c);
                let sc = scale.map(|s| self.value(s).data());
                if self.wants(*x) {
                    let gx = match sc {
                        Some(sc) => {
                            let mut gx = g.clone();
                            for (i, v) in gx.data_mut().iter_mut().enumerate() {
                                *v *= F::one() + sc[i / inner];
                            }
                            gx
                        }
                        None => g.clone(),
                    };
                    add_into(&mut grads[x.0], gx);
                }
                if self.wants(*shift) {
                    let mut gs = Tensor::zeros(&[n, c]);
                    for (i, v) in g.data().iter().enumerate() {
                        gs.data_mut()[i / inner] += *v;
                    }
                    add_into(&mut grads[shift.0], gs);
                }
                if let Some(s) = scale {
                    if self.wants(*s) {
                        let mut gs = Tensor::zeros(&[n, c]);
                        for (i, (gv, xv)) in g.data().iter().zip(xv.data()).enumerate() {
                            gs.data_mut()[i / inner] += *gv * *xv;
                        }
                        add_into(&mut grads[s.0], gs);
                    }
                }
            }
            Op::MulSpatial { x, mask } => {
                let xv = self.value(*x);
                let mv = self.value(*mask);
                let (n, c) = (xv.dim(0), xv.dim(1));
                let hw = xv.len() / (n * c);
                if self.wants(*x) {
                    let mut gx = g.clone();
                    for (i, v) in gx.data_mut().iter_mut().enumerate() {
                        *v *= mv.data()[(i / (c * hw)) * hw + i % hw];
                    }
                    add_into(&mut grads[x.0], gx);
                }
                if self.wants(*mask) {
                    let mut gm = Tensor::zeros(mv.shape());
                    for (i, (gv, xv)) in g.data().iter().zip(xv.data()).enumerate() {
                        gm.data_mut()[(i / (c * hw)) * hw + i % hw] += *gv * *xv;
                    }
                    add_into(&mut grads[mask.0], gm);
                }
            }
            Op::GlobalAvgPool(x) => {
                if self.wants(*x) {
                    let xv = self.value(*x);
                    let (n, c) = (xv.dim(0), xv.dim(1));
                    let hw = xv.len() / (n * c);
                    let inv = F::one() / F::of(hw as f64);
                    let mut gx = Tensor::zeros(xv.shape());
                    for (i, v) in gx.data_mut().iter_mut().enumerate() {
                        *v = g.data()[i / hw] * inv;
                    }
                    add_into(&mut grads[x.0], gx);
                }
            }
            Op::GlobalMaxPool { x, argmax } => {
                if self.wants(*x) {
                    let mut gx = Tensor::zeros(self.value(*x).shape());
                    for (gv, at) in g.data().iter().zip(argmax) {
                        gx.data_mut()[*at] += *gv;
                    }
                    add_into(&mut grads[x.0], gx);
                }
            }
            Op::MeanAxis1(x) => {
                if self.wants(*x) {
                    let xv = self.value(*x);
                    let (l, d) = (xv.dim(1), xv.dim(2));
                    let inv = F::one() / F::of(l as f64);
                    let mut gx = Tensor::zeros(xv.shape());
                    for (i, v) in gx.data_mut().iter_mut().enumerate() {
                        let b = i / (l * d);
                        *v = g.data()[b * d + i % d] * inv;
                    }
                    add_into(&mut grads[x.0], gx);
                }
            }
            Op::Reshape(x) => {
                if self.wants(*x) {
                    let gx = g.clone().reshape(self.value(*x).shape()).unwrap();
                    add_into(&mut grads[x.0], gx);
                }
            }
            Op::PixelShuffle { x, r } => {
                if self.wants(*x) {
                    let xs = self.value(*x).shape().to_vec();
                    let c = xs[1] / (r * r);
                    let mut gx = Tensor::zeros(&xs);
                    for (src_idx, dst_idx) in shuffle_pairs(xs[0], c, xs[2], xs[3], *r) {
                        gx.data_mut()[src_idx] = g.data()[dst_idx];
                    }
                    add_into(&mut grads[x.0], gx);
                }
            }
            Op::GroupNorm { x, groups, eps } => {
                if self.wants(*x) {
                    let xv = self.value(*x);
                    let size = xv.len() / (xv.dim(0) * groups);
                    let mut gx = Tensor::zeros(xv.shape());
                    let chunks = gx
                        .data_mut()
                        .chunks_mut(size)
                        .zip(xv.data().chunks(size))
                        .zip(g.data().chunks(size).zip(out.data().chunks(size)));
                    for ((dst, xc), (gc, yc)) in chunks {
                        let (_, inv_std) = moments(xc, *eps);
                        let m = F::of(size as f64);
                        let mean_g: F = gc.iter().copied().sum::<F>() / m;
                        let mean_gy: F =
                            gc.iter().zip(yc).map(|(&a, &b)| a * b).sum::<F>() / m;
                        for ((d, &gv), &yv) in dst.iter_mut().zip(gc).zip(yc) {
                            *d = inv_std * (gv - mean_g - yv * mean_gy);
                        }
                    }
                    add_into(&mut grads[x.0], gx);
                }
            }
            Op::SoftmaxCrossEntropy { logits, labels } => {
                if self.wants(*logits) {
                    let lv = self.value(*logits);
                    let (n, k) = (lv.dim(0), lv.dim(1));
                    let scale = g.data()[0] / F::of(n as f64);
                    let mut gl = Tensor::zeros(lv.shape());
                    for (b, (row, &y)) in lv.data().chunks(k).zip(labels.iter()).enumerate() {
                        let lse = log_sum_exp(row);
                        for (j, &v) in row.iter().enumerate() {
                            let p = (v - lse).exp();
                            let t = if j == y { F::one() } else { F::zero() };
                            gl.data_mut()[b * k + j] = (p - t) * scale;
                        }
                    }
                    add_into(&mut grads[logits.0], gl);
                }
            }
            Op::SumSquares(x) => {
                if self.wants(*x) {
                    let two_g = F::of(2.0) * g.data()[0];
                    add_into(&mut grads[x.0], self.value(*x).map(|v| v * two_g));
                }
            }
            Op::Mse(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let s = F::of(2.0) * g.data()[0] / F::of(va.len() as f64);
                let diff = va.zip_with(vb, |x, y| (x - y) * s).unwrap();
                if self.wants(*b) {
                    add_into(&mut grads[b.0], diff.map(|v| -v));
                }
                if self.wants(*a) {
                    add_into(&mut grads[a.0], diff);
                }
            }
            Op::Cfg { uncond, cond, lambda } => {
                let l = *lambda;
                if self.wants(*uncond) {
                    add_into(&mut grads[uncond.0], g.map(|v| v * (F::one() - l)));
                }
                if self.wants(*cond) {
                    add_into(&mut grads[cond.0], g.map(|v| v * l));
                }
            }
            Op::Ddim { z, eps, coef } => {
                let (dz, de) = coef.partials();
                if self.wants(*z) {
                    add_into(&mut grads[z.0], g.map(|v| v * dz));
                }
                if self.wants(*eps) {
                    add_into(&mut grads[eps.0], g.map(|v| v * de));
                }
            }
        }
    }

    fn conv_backward(
        &self,
        x: Var,
        w: Var,
        geom: &ConvGeom,
        g: &Tensor<F>,
        grads: &mut [Option<Tensor<F>>],
    ) {
        let (want_x, want_w) = (self.wants(x), self.wants(w));
        if !want_x && !want_w {
            return;
        }
        let xv = self.value(x);
        let wv = self.value(w);
        let kdim = geom.kdim();
        let hw_out = geom.ho * geom.wo;
        let in_per = geom.cin * geom.h * geom.w;
        let mut gw = if want_w { vec![F::zero(); wv.len()] } else { Vec::new() };
        let mut gx = if want_x { vec![F::zero(); xv.len()] } else { Vec::new() };
        let mut col = vec![F::zero(); kdim * hw_out];
        for b in 0..geom.n {
            let gb = &g.data()[b * geom.cout * hw_out..(b + 1) * geom.cout * hw_out];
            let xb = &xv.data()[b * in_per..(b + 1) * in_per];
            if want_w {
                let colv: &[F] = if geom.pointwise() {
                    xb
                } else {
                    im2col(xb, geom, &mut col);
                    &col
                };
                gemm(geom.cout, hw_out, kdim, gb, false, colv, true, &mut gw, true);
            }
            if want_x {
                let dxb = &mut gx[b * in_per..(b + 1) * in_per];
                if geom.pointwise() {
                    gemm(kdim, geom.cout, hw_out, wv.data(), true, gb, false, dxb, true);
                } else {
                    gemm(kdim, geom.cout, hw_out, wv.data(), true, gb, false, &mut col, false);
                    col2im(&col, geom, dxb);
                }
            }
        }
        if want_w {
            add_into(&mut grads[w.0], Tensor::from_vec(wv.shape(), gw).unwrap());
        }
        if want_x {
            add_into(&mut grads[x.0], Tensor::from_vec(xv.shape(), gx).unwrap());
        }
    }
}

fn moments<F: Real>(xs: &[F], eps: F) -> (F, F) {
    let m = F::of(xs.len() as f64);
    let mean = xs.iter().copied().sum::<F>() / m;
    let var = xs.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / m;
    (mean, F::one() / (var + eps).sqrt())
}

pub(crate) fn log_sum_exp<F: Real>(row: &[F]) -> F {
    let mx = row.iter().copied().fold(F::neg_infinity(), F::max);
    mx + row.iter().map(|&v| (v - mx).exp()).sum::<F>().ln()
}

fn shuffle_pairs(
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    r: usize,
) -> impl Iterator<Item = (usize, usize)> {
    let (ho, wo) = (h * r, w * r);
    (0..n * c * ho * wo).map(move |dst| {
        let ow = dst % wo;
        let oh = (dst / wo) % ho;
        let ch = (dst / (wo * ho)) % c;
        let b = dst / (wo * ho * c);
        let (i, di) = (oh / r, oh % r);
        let (j, dj) = (ow / r, ow % r);
        let src_c = ch * r * r + di * r + dj;
        let src = ((b * c * r * r + src_c) * h + i) * w + j;
        (src, dst)
    })
}
