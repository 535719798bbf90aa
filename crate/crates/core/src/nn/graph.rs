//! Define-by-run reverse-mode differentiation over NCHW tensors.
//!
//! A [`Graph`] records each operation together with its output value.
//! [`Graph::backward`] walks the tape in reverse and returns one gradient per
//! parameter of the borrowed [`ParamStore`]. Batch items are processed in
//! parallel, but every reduction over the batch runs in item order, so
//! results do not depend on the thread count.

use rayon::prelude::*;

use super::param::ParamStore;
use super::tensor::{Element, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

const GROUP_NORM_EPS: f64 = 1e-5;

#[derive(Debug)]
enum Op<T> {
    Input,
    Param(usize),
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
    },
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    Add(Var, Var),
    ChannelBias {
        x: Var,
        bias: Var,
    },
    Silu(Var),
    ScaleItems {
        x: Var,
        scales: Vec<T>,
    },
    GroupNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        stats: Vec<(T, T)>,
    },
    Upsample2(Var),
    Concat(Var, Var),
}

#[derive(Debug)]
struct Node<T> {
    op: Op<T>,
    value: Option<Tensor<T>>,
}

pub struct Graph<'p, T: Element> {
    params: &'p ParamStore<T>,
    nodes: Vec<Node<T>>,
}

#[derive(Clone, Copy)]
struct ConvGeom {
    cin: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn rows(&self) -> usize {
        self.cin * self.k * self.k
    }

    fn pixels(&self) -> usize {
        self.ho * self.wo
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }
}

fn im2col<T: Element>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let p = g.pixels();
    for ci in 0..g.cin {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, d) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *d = if ix < 0 || ix >= g.w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Element>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let p = g.pixels();
    for ci in 0..g.cin {
        let plane = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let line = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            line[ix as usize] = line[ix as usize] + src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

#[inline]
fn sigmoid<T: Element>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

fn group_norm_groups(channels: usize, groups: usize) -> usize {
    assert!(
        groups > 0 && channels.is_multiple_of(groups),
        "group norm: {channels} channels, {groups} groups"
    );
    channels / groups
}

impl<'p, T: Element> Graph<'p, T> {
    pub fn new(params: &'p ParamStore<T>) -> Self {
        Self {
            params,
            nodes: Vec::new(),
        }
    }

    fn push(&mut self, op: Op<T>, value: Option<Tensor<T>>) -> Var {
        self.nodes.push(Node { op, value });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        match &self.nodes[v.0].op {
            Op::Param(id) => self.params.get(*id),
            _ => self.nodes[v.0].value.as_ref().expect("node value"),
        }
    }

    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(Op::Input, Some(t))
    }

    pub fn param(&mut self, id: usize) -> Var {
        self.push(Op::Param(id), None)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Var {
        let xs = self.value(x).shape();
        let ws = self.value(w).shape();
        assert_eq!(xs[1], ws[1], "conv2d: input channels");
        assert_eq!(ws[2], ws[3], "conv2d: square kernels only");
        let k = ws[2];
        let geom = ConvGeom {
            cin: xs[1],
            h: xs[2],
            w: xs[3],
            k,
            stride,
            pad,
            ho: (xs[2] + 2 * pad - k) / stride + 1,
            wo: (xs[3] + 2 * pad - k) / stride + 1,
        };
        let cout = ws[0];
        let (batch, p, rows) = (xs[0], geom.pixels(), geom.rows());
        let mut out = Tensor::zeros([batch, cout, geom.ho, geom.wo]);
        {
            let xv = self.value(x);
            let wv = self.value(w).data();
            let bv = self.value(b).data();
            let item_in = xv.item_len();
            out.data_mut().par_chunks_mut(cout * p).enumerate().for_each(|(bi, o)| {
                let xi = &xv.data()[bi * item_in..(bi + 1) * item_in];
                let owned;
                let cols: &[T] = if geom.is_pointwise() {
                    xi
                } else {
                    let mut c = vec![T::zero(); rows * p];
                    im2col(xi, &geom, &mut c);
                    owned = c;
                    &owned
                };
                T::gemm(cout, rows, p, wv, rows, 1, cols, p, 1, T::zero(), o, p, 1);
                for (co, chunk) in o.chunks_mut(p).enumerate() {
                    let bias = bv[co];
                    for v in chunk {
                        *v = *v + bias;
                    }
                }
            });
        }
        self.push(Op::Conv2d { x, w, b, stride, pad }, Some(out))
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let xs = self.value(x).shape();
        let ws = self.value(w).shape();
        let (batch, fan_in, fan_out) = (xs[0], ws[1], ws[0]);
        assert_eq!(xs[1] * xs[2] * xs[3], fan_in, "linear: input features");
        let mut out = Tensor::zeros([batch, fan_out, 1, 1]);
        T::gemm(
            batch,
            fan_in,
            fan_out,
            self.value(x).data(),
            fan_in,
            1,
            self.value(w).data(),
            1,
            fan_in,
            T::zero(),
            out.data_mut(),
            fan_out,
            1,
        );
        let bv = self.value(b).data();
        for row in out.data_mut().chunks_mut(fan_out) {
            for (v, &bias) in row.iter_mut().zip(bv) {
                *v = *v + bias;
            }
        }
        self.push(Op::Linear { x, w, b }, Some(out))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        self.push(Op::Add(a, b), Some(out))
    }

    /// Adds a per-(item, channel) vector `bias: [B, C, 1, 1]` to every pixel.
    pub fn channel_bias(&mut self, x: Var, bias: Var) -> Var {
        let mut out = self.value(x).clone();
        let [batch, ch, h, w] = out.shape();
        let bv = self.value(bias);
        assert_eq!(bv.shape(), [batch, ch, 1, 1], "channel_bias shape");
        let hw = h * w;
        for (idx, plane) in out.data_mut().chunks_mut(hw).enumerate() {
            let add = bv.data()[idx];
            for v in plane {
                *v = *v + add;
            }
        }
        self.push(Op::ChannelBias { x, bias }, Some(out))
    }

    /// Multiplies every value of batch item `i` by the constant `scales[i]`.
    pub fn scale_items(&mut self, x: Var, scales: Vec<T>) -> Var {
        let mut out = self.value(x).clone();
        assert_eq!(out.shape()[0], scales.len(), "scale_items batch");
        let item = out.item_len();
        for (chunk, &s) in out.data_mut().chunks_mut(item).zip(&scales) {
            for v in chunk {
                *v = *v * s;
            }
        }
        self.push(Op::ScaleItems { x, scales }, Some(out))
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let data = xv.data().iter().map(|&v| v * sigmoid(v)).collect();
        let out = Tensor::from_vec(xv.shape(), data);
        self.push(Op::Silu(x), Some(out))
    }

    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize) -> Var {
        let xv = self.value(x);
        let [batch, ch, h, w] = xv.shape();
        let per_group = group_norm_groups(ch, groups);
        let group_len = per_group * h * w;
        let eps = T::from_f64_lossy(GROUP_NORM_EPS);
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let mut out = Tensor::zeros(xv.shape());
        let mut stats = Vec::with_capacity(batch * groups);
        for (gi, (src, dst)) in xv
            .data()
            .chunks(group_len)
            .zip(out.data_mut().chunks_mut(group_len))
            .enumerate()
        {
            let n = T::from_usize(group_len).unwrap();
            let mean = src.iter().copied().sum::<T>() / n;
            let var = src.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let rstd = (var + eps).sqrt().recip();
            stats.push((mean, rstd));
            let group = gi % groups;
            for (local_c, (s_plane, d_plane)) in src.chunks(h * w).zip(dst.chunks_mut(h * w)).enumerate() {
                let c = group * per_group + local_c;
                for (s, d) in s_plane.iter().zip(d_plane) {
                    *d = (*s - mean) * rstd * gv[c] + bv[c];
                }
            }
        }
        self.push(
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                stats,
            },
            Some(out),
        )
    }

    /// Nearest-neighbour 2x upsampling.
    pub fn upsample2(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let [batch, ch, h, w] = xv.shape();
        let mut out = Tensor::zeros([batch, ch, 2 * h, 2 * w]);
        let (src, dst) = (xv.data(), out.data_mut());
        for plane in 0..batch * ch {
            for r in 0..2 * h {
                for c in 0..2 * w {
                    dst[plane * 4 * h * w + r * 2 * w + c] = src[plane * h * w + (r / 2) * w + c / 2];
                }
            }
        }
        self.push(Op::Upsample2(x), Some(out))
    }

    /// Concatenates along channels.
    pub fn concat(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let [batch, ca, h, w] = av.shape();
        let [bb, cb, hb, wb] = bv.shape();
        assert_eq!((batch, h, w), (bb, hb, wb), "concat shapes");
        let mut data = Vec::with_capacity(batch * (ca + cb) * h * w);
        for bi in 0..batch {
            data.extend_from_slice(&av.data()[bi * av.item_len()..(bi + 1) * av.item_len()]);
            data.extend_from_slice(&bv.data()[bi * bv.item_len()..(bi + 1) * bv.item_len()]);
        }
        self.push(Op::Concat(a, b), Some(Tensor::from_vec([batch, ca + cb, h, w], data)))
    }

    fn needs_grad(&self, v: Var) -> bool {
        !matches!(self.nodes[v.0].op, Op::Input)
    }

    /// Back-propagates `grad` (same shape as `output`) and returns one
    /// gradient tensor per parameter in the store.
    pub fn backward(&self, output: Var, grad: Tensor<T>) -> Vec<Tensor<T>> {
        assert_eq!(self.value(output).shape(), grad.shape(), "backward seed shape");
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut param_grads: Vec<Tensor<T>> = self.params.iter().map(|t| Tensor::zeros(t.shape())).collect();
        grads[output.0] = Some(grad);

        fn accumulate<T: Element>(grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        }

        for idx in (0..self.nodes.len()).rev() {
            let Some(g) = grads[idx].take() else { continue };
            match &self.nodes[idx].op {
                Op::Input => {}
                Op::Param(id) => param_grads[*id].add_assign(&g),
                Op::Conv2d { x, w, b, stride, pad } => {
                    let (dx, dw, db) = self.conv2d_backward(*x, *w, *stride, *pad, &g);
                    if let Some(dx) = dx {
                        accumulate(&mut grads, *x, dx);
                    }
                    accumulate(&mut grads, *w, dw);
                    accumulate(&mut grads, *b, db);
                }
                Op::Linear { x, w, b } => {
                    let xv = self.value(*x);
                    let wv = self.value(*w);
                    let [fan_out, fan_in, _, _] = wv.shape();
                    let batch = xv.shape()[0];
                    let mut dx = Tensor::zeros(xv.shape());
                    T::gemm(
                        batch,
                        fan_out,
                        fan_in,
                        g.data(),
                        fan_out,
                        1,
                        wv.data(),
                        fan_in,
                        1,
                        T::zero(),
                        dx.data_mut(),
                        fan_in,
                        1,
                    );
                    let mut dw = Tensor::zeros(wv.shape());
                    T::gemm(
                        fan_out,
                        batch,
                        fan_in,
                        g.data(),
                        1,
                        fan_out,
                        xv.data(),
                        fan_in,
                        1,
                        T::zero(),
                        dw.data_mut(),
                        fan_in,
                        1,
                    );
                    let mut db = Tensor::zeros([fan_out, 1, 1, 1]);
                    for row in g.data().chunks(fan_out) {
                        for (d, &v) in db.data_mut().iter_mut().zip(row) {
                            *d = *d + v;
                        }
                    }
                    if self.needs_grad(*x) {
                        accumulate(&mut grads, *x, dx);
                    }
                    accumulate(&mut grads, *w, dw);
                    accumulate(&mut grads, *b, db);
                }
                Op::Add(a, b) => {
                    if self.needs_grad(*b) {
                        accumulate(&mut grads, *b, g.clone());
                    }
                    if self.needs_grad(*a) {
                        accumulate(&mut grads, *a, g);
                    }
                }
                Op::ChannelBias { x, bias } => {
                    let [batch, ch, h, w] = g.shape();
                    let sums = g
                        .data()
                        .chunks(h * w)
                        .map(|plane| plane.iter().copied().sum::<T>())
                        .collect();
                    accumulate(&mut grads, *bias, Tensor::from_vec([batch, ch, 1, 1], sums));
                    accumulate(&mut grads, *x, g);
                }
                Op::ScaleItems { x, scales } => {
                    let mut dx = g;
                    let item = dx.item_len();
                    for (chunk, &s) in dx.data_mut().chunks_mut(item).zip(scales) {
                        for v in chunk {
                            *v = *v * s;
                        }
                    }
                    if self.needs_grad(*x) {
                        accumulate(&mut grads, *x, dx);
                    }
                }
                Op::Silu(x) => {
                    let xv = self.value(*x);
                    let data = xv
                        .data()
                        .iter()
                        .zip(g.data())
                        .map(|(&v, &gv)| {
                            let s = sigmoid(v);
                            gv * s * (T::one() + v * (T::one() - s))
                        })
                        .collect();
                    accumulate(&mut grads, *x, Tensor::from_vec(xv.shape(), data));
                }
                Op::GroupNorm {
                    x,
                    gamma,
                    beta,
                    groups,
                    stats,
                } => {
                    let (dx, dgamma, dbeta) = self.group_norm_backward(*x, *gamma, *groups, stats, &g);
                    accumulate(&mut grads, *x, dx);
                    accumulate(&mut grads, *gamma, dgamma);
                    accumulate(&mut grads, *beta, dbeta);
                }
                Op::Upsample2(x) => {
                    let xs = self.value(*x).shape();
                    let [batch, ch, h, w] = xs;
                    let mut dx = Tensor::zeros(xs);
                    let (src, dst) = (g.data(), dx.data_mut());
                    for plane in 0..batch * ch {
                        for r in 0..2 * h {
                            for c in 0..2 * w {
                                let d = &mut dst[plane * h * w + (r / 2) * w + c / 2];
                                *d = *d + src[plane * 4 * h * w + r * 2 * w + c];
                            }
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::Concat(a, b) => {
                    let (sa, sb) = (self.value(*a).shape(), self.value(*b).shape());
                    let (la, lb) = (sa[1] * sa[2] * sa[3], sb[1] * sb[2] * sb[3]);
                    let mut da = Vec::with_capacity(sa[0] * la);
                    let mut db = Vec::with_capacity(sb[0] * lb);
                    for item in g.data().chunks(la + lb) {
                        da.extend_from_slice(&item[..la]);
                        db.extend_from_slice(&item[la..]);
                    }
                    accumulate(&mut grads, *a, Tensor::from_vec(sa, da));
                    accumulate(&mut grads, *b, Tensor::from_vec(sb, db));
                }
            }
        }
        param_grads
    }

    fn conv2d_backward(
        &self,
        x: Var,
        w: Var,
        stride: usize,
        pad: usize,
        g: &Tensor<T>,
    ) -> (Option<Tensor<T>>, Tensor<T>, Tensor<T>) {
        let xv = self.value(x);
        let wv = self.value(w);
        let xs = xv.shape();
        let [cout, _, k, _] = wv.shape();
        let [batch, _, ho, wo] = g.shape();
        let geom = ConvGeom {
            cin: xs[1],
            h: xs[2],
            w: xs[3],
            k,
            stride,
            pad,
            ho,
            wo,
        };
        let (p, rows) = (geom.pixels(), geom.rows());
        let item_in = xv.item_len();
        let want_dx = self.needs_grad(x);
        let mut dx = Tensor::zeros(xs);

        let partial_dw: Vec<Vec<T>> = dx
            .data_mut()
            .par_chunks_mut(item_in)
            .enumerate()
            .map(|(bi, dxi)| {
                let xi = &xv.data()[bi * item_in..(bi + 1) * item_in];
                let gi = &g.data()[bi * cout * p..(bi + 1) * cout * p];
                let owned;
                let cols: &[T] = if geom.is_pointwise() {
                    xi
                } else {
                    let mut c = vec![T::zero(); rows * p];
                    im2col(xi, &geom, &mut c);
                    owned = c;
                    &owned
                };
                let mut dw = vec![T::zero(); cout * rows];
                T::gemm(cout, p, rows, gi, p, 1, cols, 1, p, T::zero(), &mut dw, rows, 1);
                if want_dx {
                    if geom.is_pointwise() {
                        T::gemm(rows, cout, p, wv.data(), 1, rows, gi, p, 1, T::zero(), dxi, p, 1);
                    } else {
                        let mut dcols = vec![T::zero(); rows * p];
                        T::gemm(rows, cout, p, wv.data(), 1, rows, gi, p, 1, T::zero(), &mut dcols, p, 1);
                        col2im(&dcols, &geom, dxi);
                    }
                }
                dw
            })
            .collect();

        let mut dw = Tensor::zeros(wv.shape());
        for part in &partial_dw {
            for (d, &v) in dw.data_mut().iter_mut().zip(part) {
                *d = *d + v;
            }
        }
        let mut db = Tensor::zeros([cout, 1, 1, 1]);
        for bi in 0..batch {
            for co in 0..cout {
                let start = (bi * cout + co) * p;
                let s: T = g.data()[start..start + p].iter().copied().sum();
                db.data_mut()[co] = db.data()[co] + s;
            }
        }
        (want_dx.then_some(dx), dw, db)
    }

    fn group_norm_backward(
        &self,
        x: Var,
        gamma: Var,
        groups: usize,
        stats: &[(T, T)],
        g: &Tensor<T>,
    ) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
        let xv = self.value(x);
        let [_, ch, h, w] = xv.shape();
        let per_group = group_norm_groups(ch, groups);
        let hw = h * w;
        let group_len = per_group * hw;
        let gv = self.value(gamma).data();
        let mut dx = Tensor::zeros(xv.shape());
        let mut dgamma = vec![T::zero(); ch];
        let mut dbeta = vec![T::zero(); ch];
        let n = T::from_usize(group_len).unwrap();
        for (gi, ((src, dy), out)) in xv
            .data()
            .chunks(group_len)
            .zip(g.data().chunks(group_len))
            .zip(dx.data_mut().chunks_mut(group_len))
            .enumerate()
        {
            let (mean, rstd) = stats[gi];
            let group = gi % groups;
            let mut sum_dxhat = T::zero();
            let mut sum_dxhat_xhat = T::zero();
            for local_c in 0..per_group {
                let c = group * per_group + local_c;
                for j in local_c * hw..(local_c + 1) * hw {
                    let xhat = (src[j] - mean) * rstd;
                    dgamma[c] = dgamma[c] + dy[j] * xhat;
                    dbeta[c] = dbeta[c] + dy[j];
                    let dxhat = dy[j] * gv[c];
                    sum_dxhat = sum_dxhat + dxhat;
                    sum_dxhat_xhat = sum_dxhat_xhat + dxhat * xhat;
                }
            }
            let mean_dxhat = sum_dxhat / n;
            let mean_dxhat_xhat = sum_dxhat_xhat / n;
            for local_c in 0..per_group {
                let c = group * per_group + local_c;
                for j in local_c * hw..(local_c + 1) * hw {
                    let xhat = (src[j] - mean) * rstd;
                    let dxhat = dy[j] * gv[c];
                    out[j] = rstd * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat);
                }
            }
        }
        (
            dx,
            Tensor::from_vec([ch, 1, 1, 1], dgamma),
            Tensor::from_vec([ch, 1, 1, 1], dbeta),
        )
    }
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn random(rng: &mut ChaCha8Rng, shape: [usize; 4]) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    /// Compares analytic parameter gradients of `sum(out * probe)` against
    /// central differences.
    fn check_gradients(store: ParamStore<f64>, build: impl Fn(&mut Graph<f64>) -> Var) {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let probe = {
            let g = &mut Graph::new(&store);
            let out = build(g);
            random(&mut rng, g.value(out).shape())
        };
        let objective = |s: &ParamStore<f64>| -> f64 {
            let mut g = Graph::new(s);
            let out = build(&mut g);
            g.value(out).data().iter().zip(probe.data()).map(|(a, b)| a * b).sum()
        };
        let mut g = Graph::new(&store);
        let out = build(&mut g);
        let grads = g.backward(out, probe.clone());
        let h = 1e-6;
        #[allow(clippy::needless_range_loop)]
        for id in 0..store.len() {
            for i in 0..store.get(id).len() {
                let mut plus = store.clone();
                plus.get_mut(id).data_mut()[i] += h;
                let mut minus = store.clone();
                minus.get_mut(id).data_mut()[i] -= h;
                let fd = (objective(&plus) - objective(&minus)) / (2.0 * h);
                let an = grads[id].data()[i];
                assert!(
                    (fd - an).abs() <= 1e-6 * (1.0 + fd.abs()),
                    "param {} index {i}: analytic {an}, numeric {fd}",
                    store.name(id)
                );
            }
        }
    }

    fn conv_store(rng: &mut ChaCha8Rng, cin: usize, cout: usize, k: usize, hw: usize) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.register("x", random(rng, [2, cin, hw, hw]));
        s.register("w", random(rng, [cout, cin, k, k]));
        s.register("b", random(rng, [cout, 1, 1, 1]));
        s
    }

    #[test]
    fn conv_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for (k, stride, pad) in [(3, 1, 1), (3, 2, 1), (1, 1, 0)] {
            check_gradients(conv_store(&mut rng, 2, 3, k, 6), |g| {
                let (x, w, b) = (g.param(0), g.param(1), g.param(2));
                g.conv2d(x, w, b, stride, pad)
            });
        }
    }

    #[test]
    fn conv_matches_direct_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let s = conv_store(&mut rng, 2, 3, 3, 5);
        let mut g = Graph::new(&s);
        let (x, w, b) = (g.param(0), g.param(1), g.param(2));
        let out = g.conv2d(x, w, b, 2, 1);
        let y = g.value(out);
        assert_eq!(y.shape(), [2, 3, 3, 3]);
        let (xv, wv, bv) = (s.get(0).data(), s.get(1).data(), s.get(2).data());
        for n in 0..2 {
            for co in 0..3 {
                for oy in 0..3 {
                    for ox in 0..3 {
                        let mut acc = bv[co];
                        for ci in 0..2 {
                            for ky in 0..3 {
                                for kx in 0..3 {
                                    let iy = (oy * 2 + ky) as isize - 1;
                                    let ix = (ox * 2 + kx) as isize - 1;
                                    if (0..5).contains(&iy) && (0..5).contains(&ix) {
                                        acc += wv[((co * 2 + ci) * 3 + ky) * 3 + kx]
                                            * xv[((n * 2 + ci) * 5 + iy as usize) * 5 + ix as usize];
                                    }
                                }
                            }
                        }
                        let got = y.data()[((n * 3 + co) * 3 + oy) * 3 + ox];
                        assert!((got - acc).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn linear_and_channel_bias_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut s = ParamStore::new();
        s.register("t", random(&mut rng, [2, 4, 1, 1]));
        s.register("w", random(&mut rng, [3, 4, 1, 1]));
        s.register("b", random(&mut rng, [3, 1, 1, 1]));
        s.register("x", random(&mut rng, [2, 3, 2, 2]));
        check_gradients(s, |g| {
            let (t, w, b, x) = (g.param(0), g.param(1), g.param(2), g.param(3));
            let e = g.linear(t, w, b);
            g.channel_bias(x, e)
        });
    }

    #[test]
    fn silu_add_scale_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut s = ParamStore::new();
        s.register("a", random(&mut rng, [2, 2, 3, 3]));
        s.register("b", random(&mut rng, [2, 2, 3, 3]));
        check_gradients(s, |g| {
            let (a, b) = (g.param(0), g.param(1));
            let h = g.silu(a);
            let h = g.scale_items(h, vec![0.5, -3.0]);
            let sum = g.add(h, b);
            g.add(sum, a)
        });
    }

    #[test]
    fn group_norm_gradients_and_statistics() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut s = ParamStore::new();
        s.register("x", random(&mut rng, [2, 4, 3, 3]));
        s.register("gamma", random(&mut rng, [4, 1, 1, 1]));
        s.register("beta", random(&mut rng, [4, 1, 1, 1]));
        check_gradients(s.clone(), |g| {
            let (x, gm, bt) = (g.param(0), g.param(1), g.param(2));
            g.group_norm(x, gm, bt, 2)
        });

        s.get_mut(1).data_mut().fill(1.0);
        s.get_mut(2).data_mut().fill(0.0);
        let mut g = Graph::new(&s);
        let (x, gm, bt) = (g.param(0), g.param(1), g.param(2));
        let out = g.group_norm(x, gm, bt, 2);
        for group in g.value(out).data().chunks(18) {
            let mean = group.iter().sum::<f64>() / 18.0;
            let var = group.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 18.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn upsample_and_concat_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut s = ParamStore::new();
        s.register("a", random(&mut rng, [2, 2, 2, 3]));
        s.register("b", random(&mut rng, [2, 1, 4, 6]));
        check_gradients(s, |g| {
            let (a, b) = (g.param(0), g.param(1));
            let up = g.upsample2(a);
            g.concat(up, b)
        });
    }

    #[test]
    fn inputs_receive_no_gradient_but_pass_through() {
        let mut s = ParamStore::new();
        s.register("w", Tensor::from_vec([1, 1, 1, 1], vec![2.0f64]));
        s.register("b", Tensor::from_vec([1, 1, 1, 1], vec![0.0f64]));
        let mut g = Graph::new(&s);
        let x = g.input(Tensor::from_vec([1, 1, 1, 2], vec![3.0, 4.0]));
        let (w, b) = (g.param(0), g.param(1));
        let y = g.conv2d(x, w, b, 1, 0);
        assert_eq!(g.value(y).data(), &[6.0, 8.0]);
        let grads = g.backward(y, Tensor::from_vec([1, 1, 1, 2], vec![1.0, 1.0]));
        assert_eq!(grads[0].data(), &[7.0]);
        assert_eq!(grads[1].data(), &[2.0]);
    }
}
