//! Reverse-mode automatic differentiation over a linear tape.
//!
//! A [`Tape`] records every operation of one forward computation. Nodes that
//! do not depend on any trainable leaf are marked constant and never receive
//! gradients, so frozen networks only pay for input gradients.

use std::cell::RefCell;

use crate::tensor::{gemm, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Square(Var),
    Rsqrt(Var),
    Exp(Var),
    LogClamped(Var, f64),
    ClampMin(Var, f64),
    Softplus(Var),
    LeakyRelu(Var, f64),
    Tanh(Var),
    Sigmoid(Var),
    Linear { x: Var, w: Var, b: Option<Var> },
    Conv2d { x: Var, w: Var, b: Option<Var> },
    ChannelScale { x: Var, s: Var },
    ChannelBias { x: Var, b: Var },
    AddNoise { x: Var, noise: Var, strength: Var },
    BroadcastBatch(Var),
    Upsample2x(Var),
    AvgPool2x(Var),
    CenterCrop(Var, usize),
    Reshape(Var),
    LogSoftmax(Var),
    SumAll(Var),
    MeanAll(Var),
    SumLastAxis(Var),
    UnitNormChannels(Var, f64),
    Pick(Var, Vec<usize>),
    Roll { x: Var, axis: usize, shift: usize },
    GlobalAvgPool(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of one scalar output with respect to the tape's trainable leaves.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

thread_local! {
    static COLS: RefCell<Vec<f64>> = const { RefCell::new(Vec::new()) };
    static GCOLS: RefCell<Vec<f64>> = const { RefCell::new(Vec::new()) };
}

/// Runs `f` on a reusable per-thread buffer of at least `len` elements; contents are stale.
fn with_buf<R>(key: &'static std::thread::LocalKey<RefCell<Vec<f64>>>, len: usize, f: impl FnOnce(&mut [f64]) -> R) -> R {
    key.with(|b| {
        let mut b = b.borrow_mut();
        if b.len() < len {
            b.resize(len, 0.0);
        }
        f(&mut b[..len])
    })
}

fn im2col(x: &[f64], c: usize, h: usize, w: usize, k: usize, cols: &mut [f64]) {
    let pad = (k / 2) as isize;
    let hw = h * w;
    for ci in 0..c {
        let plane = &x[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                for y in 0..h {
                    let sy = y as isize + dy;
                    let out_row = &mut dst[y * w..(y + 1) * w];
                    if sy < 0 || sy >= h as isize {
                        out_row.fill(0.0);
                        continue;
                    }
                    let src = &plane[sy as usize * w..(sy as usize + 1) * w];
                    for (xo, o) in out_row.iter_mut().enumerate() {
                        let sx = xo as isize + dx;
                        *o = if sx < 0 || sx >= w as isize {
                            0.0
                        } else {
                            src[sx as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im(cols: &[f64], c: usize, h: usize, w: usize, k: usize, x: &mut [f64]) {
    let pad = (k / 2) as isize;
    let hw = h * w;
    for ci in 0..c {
        let plane = &mut x[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &cols[row * hw..(row + 1) * hw];
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[sy as usize * w..(sy as usize + 1) * w];
                    for xo in 0..w {
                        let sx = xo as isize + dx;
                        if sx >= 0 && sx < w as isize {
                            dst[sx as usize] += src[y * w + xo];
                        }
                    }
                }
            }
        }
    }
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

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A value that never receives gradients.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A trainable leaf.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.ng(v)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::Mul(a, b), ng)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).map(|x| x * s);
        let ng = self.ng(a);
        self.push(v, Op::Scale(a, s), ng)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).map(|x| x + s);
        let ng = self.ng(a);
        self.push(v, Op::AddScalar(a), ng)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x * x);
        let ng = self.ng(a);
        self.push(v, Op::Square(a), ng)
    }

    /// `x^{-1/2}`; the caller keeps the input positive.
    pub fn rsqrt(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| 1.0 / x.sqrt());
        let ng = self.ng(a);
        self.push(v, Op::Rsqrt(a), ng)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::exp);
        let ng = self.ng(a);
        self.push(v, Op::Exp(a), ng)
    }

    /// `ln(max(x, eps))`, zero gradient where the clamp is active.
    pub fn log_clamped(&mut self, a: Var, eps: f64) -> Var {
        let v = self.value(a).map(|x| x.max(eps).ln());
        let ng = self.ng(a);
        self.push(v, Op::LogClamped(a, eps), ng)
    }

    pub fn clamp_min(&mut self, a: Var, lo: f64) -> Var {
        let v = self.value(a).map(|x| x.max(lo));
        let ng = self.ng(a);
        self.push(v, Op::ClampMin(a, lo), ng)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let v = self.value(a).map(softplus);
        let ng = self.ng(a);
        self.push(v, Op::Softplus(a), ng)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let v = self.value(a).map(|x| if x > 0.0 { x } else { slope * x });
        let ng = self.ng(a);
        self.push(v, Op::LeakyRelu(a, slope), ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.leaky_relu(a, 0.0)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::tanh);
        let ng = self.ng(a);
        self.push(v, Op::Tanh(a), ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(sigmoid);
        let ng = self.ng(a);
        self.push(v, Op::Sigmoid(a), ng)
    }

    /// `x [N, I] · wᵀ [I, O] + b [O]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let (n, i) = self.value(x).dims2();
        let (o, wi) = self.value(w).dims2();
        assert_eq!(i, wi, "linear: input width {i} vs weight width {wi}");
        let mut out = vec![0.0; n * o];
        gemm(
            n,
            i,
            o,
            self.value(x).data(),
            false,
            self.value(w).data(),
            true,
            &mut out,
            0.0,
        );
        if let Some(b) = b {
            let bd = self.value(b).data();
            assert_eq!(bd.len(), o);
            for row in out.chunks_mut(o) {
                for (y, bb) in row.iter_mut().zip(bd) {
                    *y += bb;
                }
            }
        }
        let ng = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        self.push(Tensor::new(vec![n, o], out), Op::Linear { x, w, b }, ng)
    }

    /// Stride-1 "same" convolution with an odd square kernel.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let (n, ci, h, wd) = self.value(x).dims4();
        let (co, wci, k, k2) = self.value(w).dims4();
        assert_eq!(ci, wci, "conv2d: input channels {ci} vs kernel {wci}");
        assert!(k == k2 && k % 2 == 1, "conv2d expects odd square kernels");
        let hw = h * wd;
        let ckk = ci * k * k;
        let mut out = vec![0.0; n * co * hw];
        let xd = self.value(x).data();
        let wdta = self.value(w).data();
        with_buf(&COLS, if k == 1 { 0 } else { ckk * hw }, |cols| {
            for s in 0..n {
                let xs = &xd[s * ci * hw..(s + 1) * ci * hw];
                let os = &mut out[s * co * hw..(s + 1) * co * hw];
                if k == 1 {
                    gemm(co, ci, hw, wdta, false, xs, false, os, 0.0);
                } else {
                    im2col(xs, ci, h, wd, k, cols);
                    gemm(co, ckk, hw, wdta, false, cols, false, os, 0.0);
                }
            }
        });
        if let Some(b) = b {
            let bd = self.value(b).data();
            for s in 0..n {
                for c in 0..co {
                    let off = (s * co + c) * hw;
                    for v in &mut out[off..off + hw] {
                        *v += bd[c];
                    }
                }
            }
        }
        let ng = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        self.push(
            Tensor::new(vec![n, co, h, wd], out),
            Op::Conv2d { x, w, b },
            ng,
        )
    }

    /// Per-sample, per-channel scaling: `x [N, C, ...] * s [N, C]`.
    pub fn channel_scale(&mut self, x: Var, s: Var) -> Var {
        let xs = self.value(x).shape().to_vec();
        let (n, c) = (xs[0], xs[1]);
        assert_eq!(self.value(s).shape(), &[n, c], "channel_scale shape");
        let inner: usize = xs[2..].iter().product();
        let sd = self.value(s).data();
        let mut out = self.value(x).data().to_vec();
        for (idx, chunk) in out.chunks_mut(inner).enumerate() {
            let f = sd[idx];
            for v in chunk {
                *v *= f;
            }
        }
        let ng = self.ng(x) || self.ng(s);
        self.push(Tensor::new(xs, out), Op::ChannelScale { x, s }, ng)
    }

    /// Adds `b [C]` along axis 1 of `x [N, C, ...]`.
    pub fn channel_bias(&mut self, x: Var, b: Var) -> Var {
        let xs = self.value(x).shape().to_vec();
        let c = xs[1];
        assert_eq!(self.value(b).len(), c, "channel_bias shape");
        let inner: usize = xs[2..].iter().product();
        let bd = self.value(b).data();
        let mut out = self.value(x).data().to_vec();
        for (idx, chunk) in out.chunks_mut(inner).enumerate() {
            let f = bd[idx % c];
            for v in chunk {
                *v += f;
            }
        }
        let ng = self.ng(x) || self.ng(b);
        self.push(Tensor::new(xs, out), Op::ChannelBias { x, b }, ng)
    }

    /// `x [N, C, H, W] + strength[c] * noise[n or 0, h, w]`.
    pub fn add_noise(&mut self, x: Var, noise: Var, strength: Var) -> Var {
        let (n, c, h, w) = self.value(x).dims4();
        let ns = self.value(noise).shape().to_vec();
        assert!(
            ns.len() == 3 && (ns[0] == 1 || ns[0] == n) && ns[1] == h && ns[2] == w,
            "add_noise: noise shape {ns:?} incompatible with {:?}",
            self.value(x).shape()
        );
        assert_eq!(self.value(strength).len(), c);
        let hw = h * w;
        let nd = self.value(noise).data();
        let sd = self.value(strength).data();
        let mut out = self.value(x).data().to_vec();
        for s in 0..n {
            let np = &nd[if ns[0] == 1 { 0 } else { s * hw }..][..hw];
            for ch in 0..c {
                let st = sd[ch];
                let o = &mut out[(s * c + ch) * hw..][..hw];
                for (v, z) in o.iter_mut().zip(np) {
                    *v += st * z;
                }
            }
        }
        let ng = self.ng(x) || self.ng(noise) || self.ng(strength);
        self.push(
            Tensor::new(vec![n, c, h, w], out),
            Op::AddNoise { x, noise, strength },
            ng,
        )
    }

    /// Repeats a batch-1 tensor `n` times along the leading axis.
    pub fn broadcast_batch(&mut self, x: Var, n: usize) -> Var {
        let xs = self.value(x).shape().to_vec();
        assert_eq!(xs[0], 1, "broadcast_batch expects a leading axis of 1");
        let d = self.value(x).data();
        let mut out = Vec::with_capacity(d.len() * n);
        for _ in 0..n {
            out.extend_from_slice(d);
        }
        let mut shape = xs;
        shape[0] = n;
        let ng = self.ng(x);
        self.push(Tensor::new(shape, out), Op::BroadcastBatch(x), ng)
    }

    pub fn upsample2x(&mut self, x: Var) -> Var {
        let (n, c, h, w) = self.value(x).dims4();
        let d = self.value(x).data();
        let (h2, w2) = (2 * h, 2 * w);
        let mut out = vec![0.0; n * c * h2 * w2];
        for p in 0..n * c {
            let src = &d[p * h * w..(p + 1) * h * w];
            let dst = &mut out[p * h2 * w2..(p + 1) * h2 * w2];
            for y in 0..h2 {
                for xx in 0..w2 {
                    dst[y * w2 + xx] = src[(y / 2) * w + xx / 2];
                }
            }
        }
        let ng = self.ng(x);
        self.push(Tensor::new(vec![n, c, h2, w2], out), Op::Upsample2x(x), ng)
    }

    pub fn avg_pool2x(&mut self, x: Var) -> Var {
        let (n, c, h, w) = self.value(x).dims4();
        assert!(h % 2 == 0 && w % 2 == 0, "avg_pool2x needs even sides");
        let d = self.value(x).data();
        let (h2, w2) = (h / 2, w / 2);
        let mut out = vec![0.0; n * c * h2 * w2];
        for p in 0..n * c {
            let src = &d[p * h * w..(p + 1) * h * w];
            let dst = &mut out[p * h2 * w2..(p + 1) * h2 * w2];
            for y in 0..h2 {
                for xx in 0..w2 {
                    let i = 2 * y * w + 2 * xx;
                    dst[y * w2 + xx] = 0.25 * (src[i] + src[i + 1] + src[i + w] + src[i + w + 1]);
                }
            }
        }
        let ng = self.ng(x);
        self.push(Tensor::new(vec![n, c, h2, w2], out), Op::AvgPool2x(x), ng)
    }

    pub fn center_crop(&mut self, x: Var, size: usize) -> Var {
        let (n, c, h, w) = self.value(x).dims4();
        assert!(size <= h && size <= w, "crop {size} larger than {h}x{w}");
        let (oy, ox) = ((h - size) / 2, (w - size) / 2);
        let d = self.value(x).data();
        let mut out = Vec::with_capacity(n * c * size * size);
        for p in 0..n * c {
            for y in 0..size {
                let row = &d[p * h * w + (y + oy) * w + ox..][..size];
                out.extend_from_slice(row);
            }
        }
        let ng = self.ng(x);
        self.push(
            Tensor::new(vec![n, c, size, size], out),
            Op::CenterCrop(x, size),
            ng,
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let v = self.value(x).clone().reshape(shape);
        let ng = self.ng(x);
        self.push(v, Op::Reshape(x), ng)
    }

    /// Row-wise log-softmax of `x [N, K]`.
    pub fn log_softmax(&mut self, x: Var) -> Var {
        let (n, k) = self.value(x).dims2();
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(k) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            for v in row {
                *v -= lse;
            }
        }
        let ng = self.ng(x);
        self.push(Tensor::new(vec![n, k], out), Op::LogSoftmax(x), ng)
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let v = Tensor::scalar(self.value(x).sum());
        let ng = self.ng(x);
        self.push(v, Op::SumAll(x), ng)
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let v = Tensor::scalar(self.value(x).mean());
        let ng = self.ng(x);
        self.push(v, Op::MeanAll(x), ng)
    }

    /// Sums away the last axis.
    pub fn sum_last_axis(&mut self, x: Var) -> Var {
        let xs = self.value(x).shape().to_vec();
        let last = *xs.last().unwrap();
        let out: Vec<f64> = self
            .value(x)
            .data()
            .chunks(last)
            .map(|c| c.iter().sum())
            .collect();
        let shape = if xs.len() == 1 {
            vec![1]
        } else {
            xs[..xs.len() - 1].to_vec()
        };
        let ng = self.ng(x);
        self.push(Tensor::new(shape, out), Op::SumLastAxis(x), ng)
    }

    /// `x / (‖x‖₂ over channels + eps)` at every spatial location.
    pub fn unit_norm_channels(&mut self, x: Var, eps: f64) -> Var {
        let (n, c, h, w) = self.value(x).dims4();
        let hw = h * w;
        let d = self.value(x).data();
        let mut out = vec![0.0; d.len()];
        for s in 0..n {
            for p in 0..hw {
                let mut ss = 0.0;
                for ch in 0..c {
                    let v = d[(s * c + ch) * hw + p];
                    ss += v * v;
                }
                let denom = ss.sqrt() + eps;
                for ch in 0..c {
                    let i = (s * c + ch) * hw + p;
                    out[i] = d[i] / denom;
                }
            }
        }
        let ng = self.ng(x);
        self.push(
            Tensor::new(vec![n, c, h, w], out),
            Op::UnitNormChannels(x, eps),
            ng,
        )
    }

    /// `y[n] = x[n, idx[n]]` for `x [N, K]`.
    pub fn pick(&mut self, x: Var, idx: &[usize]) -> Var {
        let (n, k) = self.value(x).dims2();
        assert_eq!(idx.len(), n, "pick: one index per row");
        let d = self.value(x).data();
        let out: Vec<f64> = idx
            .iter()
            .enumerate()
            .map(|(r, &j)| {
                assert!(j < k, "pick index {j} out of range {k}");
                d[r * k + j]
            })
            .collect();
        let ng = self.ng(x);
        self.push(Tensor::new(vec![n], out), Op::Pick(x, idx.to_vec()), ng)
    }

    /// Circular shift: the element at position `i` moves to `i + shift`.
    pub fn roll(&mut self, x: Var, axis: usize, shift: usize) -> Var {
        let v = roll_tensor(self.value(x), axis, shift);
        let ng = self.ng(x);
        self.push(v, Op::Roll { x, axis, shift }, ng)
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let (n, c, h, w) = self.value(x).dims4();
        let out: Vec<f64> = self
            .value(x)
            .data()
            .chunks(h * w)
            .map(|p| p.iter().sum::<f64>() / (h * w) as f64)
            .collect();
        let ng = self.ng(x);
        self.push(Tensor::new(vec![n, c], out), Op::GlobalAvgPool(x), ng)
    }

    /// Reverse pass from the scalar `out`.
    pub fn backward(&self, out: Var) -> Gradients {
        assert_eq!(self.value(out).len(), 1, "backward needs a scalar output");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.ng(out) {
            return Gradients { grads };
        }
        grads[out.0] = Some(Tensor::new(self.value(out).shape().to_vec(), vec![1.0]));
        for i in (0..=out.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if matches!(self.nodes[i].op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            self.backprop(i, &g, &mut grads);
        }
        Gradients { grads }
    }

    fn acc(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.ng(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn backprop(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let y = &self.nodes[i].value;
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, g.clone());
                if self.ng(*b) {
                    self.acc(grads, *b, g.map(|v| -v));
                }
            }
            Op::Mul(a, b) => {
                if self.ng(*a) {
                    self.acc(grads, *a, g.zip_map(self.value(*b), |gg, bb| gg * bb));
                }
                if self.ng(*b) {
                    self.acc(grads, *b, g.zip_map(self.value(*a), |gg, aa| gg * aa));
                }
            }
            Op::Scale(a, s) => self.acc(grads, *a, g.map(|v| v * s)),
            Op::AddScalar(a) => self.acc(grads, *a, g.clone()),
            Op::Square(a) => {
                self.acc(grads, *a, g.zip_map(self.value(*a), |gg, x| 2.0 * gg * x))
            }
            Op::Rsqrt(a) => self.acc(grads, *a, g.zip_map(y, |gg, yy| -0.5 * gg * yy * yy * yy)),
            Op::Exp(a) => self.acc(grads, *a, g.zip_map(y, |gg, yy| gg * yy)),
            Op::LogClamped(a, eps) => {
                let eps = *eps;
                self.acc(
                    grads,
                    *a,
                    g.zip_map(self.value(*a), |gg, x| if x > eps { gg / x } else { 0.0 }),
                )
            }
            Op::ClampMin(a, lo) => {
                let lo = *lo;
                self.acc(
                    grads,
                    *a,
                    g.zip_map(self.value(*a), |gg, x| if x > lo { gg } else { 0.0 }),
                )
            }
            Op::Softplus(a) => {
                self.acc(grads, *a, g.zip_map(self.value(*a), |gg, x| gg * sigmoid(x)))
            }
            Op::LeakyRelu(a, slope) => {
                let s = *slope;
                self.acc(
                    grads,
                    *a,
                    g.zip_map(self.value(*a), |gg, x| if x > 0.0 { gg } else { s * gg }),
                )
            }
            Op::Tanh(a) => self.acc(grads, *a, g.zip_map(y, |gg, yy| gg * (1.0 - yy * yy))),
            Op::Sigmoid(a) => self.acc(grads, *a, g.zip_map(y, |gg, yy| gg * yy * (1.0 - yy))),
            Op::Linear { x, w, b } => {
                let (n, i) = self.value(*x).dims2();
                let o = self.value(*w).shape()[0];
                if self.ng(*x) {
                    let mut gx = vec![0.0; n * i];
                    gemm(n, o, i, g.data(), false, self.value(*w).data(), false, &mut gx, 0.0);
                    self.acc(grads, *x, Tensor::new(vec![n, i], gx));
                }
                if self.ng(*w) {
                    let mut gw = vec![0.0; o * i];
                    gemm(o, n, i, g.data(), true, self.value(*x).data(), false, &mut gw, 0.0);
                    self.acc(grads, *w, Tensor::new(vec![o, i], gw));
                }
                if let Some(b) = b {
                    if self.ng(*b) {
                        let mut gb = vec![0.0; o];
                        for row in g.data().chunks(o) {
                            for (acc, v) in gb.iter_mut().zip(row) {
                                *acc += v;
                            }
                        }
                        self.acc(grads, *b, Tensor::new(vec![o], gb));
                    }
                }
            }
            Op::Conv2d { x, w, b } => self.backprop_conv(*x, *w, *b, g, grads),
            Op::ChannelScale { x, s } => {
                let xs = self.value(*x);
                let (n, c) = (xs.shape()[0], xs.shape()[1]);
                let inner = xs.len() / (n * c);
                if self.ng(*x) {
                    let sd = self.value(*s).data();
                    let mut gx = g.data().to_vec();
                    for (idx, chunk) in gx.chunks_mut(inner).enumerate() {
                        for v in chunk {
                            *v *= sd[idx];
                        }
                    }
                    self.acc(grads, *x, Tensor::new(xs.shape().to_vec(), gx));
                }
                if self.ng(*s) {
                    let gs: Vec<f64> = g
                        .data()
                        .chunks(inner)
                        .zip(xs.data().chunks(inner))
                        .map(|(gc, xc)| gc.iter().zip(xc).map(|(a, b)| a * b).sum())
                        .collect();
                    self.acc(grads, *s, Tensor::new(vec![n, c], gs));
                }
            }
            Op::ChannelBias { x, b } => {
                self.acc(grads, *x, g.clone());
                if self.ng(*b) {
                    let xs = self.value(*x).shape();
                    let c = xs[1];
                    let inner: usize = xs[2..].iter().product();
                    let mut gb = vec![0.0; c];
                    for (idx, chunk) in g.data().chunks(inner).enumerate() {
                        gb[idx % c] += chunk.iter().sum::<f64>();
                    }
                    self.acc(grads, *b, Tensor::new(vec![c], gb));
                }
            }
            Op::AddNoise { x, noise, strength } => {
                self.acc(grads, *x, g.clone());
                let (n, c, h, w) = self.value(*x).dims4();
                let hw = h * w;
                let nshape = self.value(*noise).shape().to_vec();
                let nd = self.value(*noise).data();
                let sd = self.value(*strength).data();
                if self.ng(*noise) {
                    let mut gn = vec![0.0; nd.len()];
                    for s in 0..n {
                        let off = if nshape[0] == 1 { 0 } else { s * hw };
                        for ch in 0..c {
                            let gp = &g.data()[(s * c + ch) * hw..][..hw];
                            for (acc, v) in gn[off..off + hw].iter_mut().zip(gp) {
                                *acc += sd[ch] * v;
                            }
                        }
                    }
                    self.acc(grads, *noise, Tensor::new(nshape.clone(), gn));
                }
                if self.ng(*strength) {
                    let mut gs = vec![0.0; c];
                    for s in 0..n {
                        let off = if nshape[0] == 1 { 0 } else { s * hw };
                        for (ch, acc) in gs.iter_mut().enumerate() {
                            let gp = &g.data()[(s * c + ch) * hw..][..hw];
                            *acc += gp
                                .iter()
                                .zip(&nd[off..off + hw])
                                .map(|(a, b)| a * b)
                                .sum::<f64>();
                        }
                    }
                    self.acc(grads, *strength, Tensor::new(vec![c], gs));
                }
            }
            Op::BroadcastBatch(x) => {
                let xs = self.value(*x).shape().to_vec();
                let inner = self.value(*x).len();
                let mut gx = vec![0.0; inner];
                for chunk in g.data().chunks(inner) {
                    for (acc, v) in gx.iter_mut().zip(chunk) {
                        *acc += v;
                    }
                }
                self.acc(grads, *x, Tensor::new(xs, gx));
            }
            Op::Upsample2x(x) => {
                let (n, c, h, w) = self.value(*x).dims4();
                let w2 = 2 * w;
                let mut gx = vec![0.0; n * c * h * w];
                for p in 0..n * c {
                    let src = &g.data()[p * 4 * h * w..(p + 1) * 4 * h * w];
                    let dst = &mut gx[p * h * w..(p + 1) * h * w];
                    for y in 0..2 * h {
                        for xx in 0..w2 {
                            dst[(y / 2) * w + xx / 2] += src[y * w2 + xx];
                        }
                    }
                }
                self.acc(grads, *x, Tensor::new(vec![n, c, h, w], gx));
            }
            Op::AvgPool2x(x) => {
                let (n, c, h, w) = self.value(*x).dims4();
                let (h2, w2) = (h / 2, w / 2);
                let mut gx = vec![0.0; n * c * h * w];
                for p in 0..n * c {
                    let src = &g.data()[p * h2 * w2..(p + 1) * h2 * w2];
                    let dst = &mut gx[p * h * w..(p + 1) * h * w];
                    for y in 0..h {
                        for xx in 0..w {
                            dst[y * w + xx] = 0.25 * src[(y / 2) * w2 + xx / 2];
                        }
                    }
                }
                self.acc(grads, *x, Tensor::new(vec![n, c, h, w], gx));
            }
            Op::CenterCrop(x, size) => {
                let (n, c, h, w) = self.value(*x).dims4();
                let size = *size;
                let (oy, ox) = ((h - size) / 2, (w - size) / 2);
                let mut gx = vec![0.0; n * c * h * w];
                for p in 0..n * c {
                    for yy in 0..size {
                        let src = &g.data()[(p * size + yy) * size..][..size];
                        let dst = &mut gx[p * h * w + (yy + oy) * w + ox..][..size];
                        dst.copy_from_slice(src);
                    }
                }
                self.acc(grads, *x, Tensor::new(vec![n, c, h, w], gx));
            }
            Op::Reshape(x) => {
                let shape = self.value(*x).shape().to_vec();
                self.acc(grads, *x, g.clone().reshape(&shape));
            }
            Op::LogSoftmax(x) => {
                let (n, k) = y.dims2();
                let mut gx = vec![0.0; n * k];
                for r in 0..n {
                    let gr = &g.data()[r * k..(r + 1) * k];
                    let yr = &y.data()[r * k..(r + 1) * k];
                    let gs: f64 = gr.iter().sum();
                    for j in 0..k {
                        gx[r * k + j] = gr[j] - yr[j].exp() * gs;
                    }
                }
                self.acc(grads, *x, Tensor::new(vec![n, k], gx));
            }
            Op::SumAll(x) => {
                let gv = g.item();
                let shape = self.value(*x).shape().to_vec();
                self.acc(grads, *x, Tensor::full(&shape, gv));
            }
            Op::MeanAll(x) => {
                let t = self.value(*x);
                let gv = g.item() / t.len() as f64;
                let shape = t.shape().to_vec();
                self.acc(grads, *x, Tensor::full(&shape, gv));
            }
            Op::SumLastAxis(x) => {
                let t = self.value(*x);
                let last = *t.shape().last().unwrap();
                let mut gx = vec![0.0; t.len()];
                for (chunk, gv) in gx.chunks_mut(last).zip(g.data()) {
                    chunk.fill(*gv);
                }
                self.acc(grads, *x, Tensor::new(t.shape().to_vec(), gx));
            }
            Op::UnitNormChannels(x, eps) => {
                let t = self.value(*x);
                let (n, c, h, w) = t.dims4();
                let hw = h * w;
                let d = t.data();
                let gd = g.data();
                let mut gx = vec![0.0; d.len()];
                for s in 0..n {
                    for p in 0..hw {
                        let mut ss = 0.0;
                        let mut gdotx = 0.0;
                        for ch in 0..c {
                            let i = (s * c + ch) * hw + p;
                            ss += d[i] * d[i];
                            gdotx += gd[i] * d[i];
                        }
                        let r = ss.sqrt();
                        let denom = r + eps;
                        let corr = if r > 0.0 {
                            gdotx / (r * denom * denom)
                        } else {
                            0.0
                        };
                        for ch in 0..c {
                            let i = (s * c + ch) * hw + p;
                            gx[i] = gd[i] / denom - d[i] * corr;
                        }
                    }
                }
                self.acc(grads, *x, Tensor::new(vec![n, c, h, w], gx));
            }
            Op::Pick(x, idx) => {
                let (n, k) = self.value(*x).dims2();
                let mut gx = vec![0.0; n * k];
                for (r, &j) in idx.iter().enumerate() {
                    gx[r * k + j] = g.data()[r];
                }
                self.acc(grads, *x, Tensor::new(vec![n, k], gx));
            }
            Op::Roll { x, axis, shift } => {
                let size = self.value(*x).shape()[*axis];
                let back = (size - shift % size) % size;
                self.acc(grads, *x, roll_tensor(g, *axis, back));
            }
            Op::GlobalAvgPool(x) => {
                let (n, c, h, w) = self.value(*x).dims4();
                let hw = h * w;
                let mut gx = vec![0.0; n * c * hw];
                for (p, gv) in g.data().iter().enumerate() {
                    gx[p * hw..(p + 1) * hw].fill(gv / hw as f64);
                }
                self.acc(grads, *x, Tensor::new(vec![n, c, h, w], gx));
            }
        }
    }

    fn backprop_conv(
        &self,
        x: Var,
        w: Var,
        b: Option<Var>,
        g: &Tensor,
        grads: &mut [Option<Tensor>],
    ) {
        let (n, ci, h, wd) = self.value(x).dims4();
        let (co, _, k, _) = self.value(w).dims4();
        let hw = h * wd;
        let ckk = ci * k * k;
        let xd = self.value(x).data();
        let wdta = self.value(w).data();
        let gd = g.data();
        let need_x = self.ng(x);
        let need_w = self.ng(w);
        let mut gx = if need_x { vec![0.0; n * ci * hw] } else { Vec::new() };
        let mut gw = if need_w { vec![0.0; co * ckk] } else { Vec::new() };
        let cols_len = if need_w && k > 1 { ckk * hw } else { 0 };
        let gcols_len = if need_x && k > 1 { ckk * hw } else { 0 };
        with_buf(&COLS, cols_len, |cols| {
            with_buf(&GCOLS, gcols_len, |gcols| {
                for s in 0..n {
                    let gs = &gd[s * co * hw..(s + 1) * co * hw];
                    if need_w {
                        let xs = &xd[s * ci * hw..(s + 1) * ci * hw];
                        if k == 1 {
                            gemm(co, hw, ci, gs, false, xs, true, &mut gw, 1.0);
                        } else {
                            im2col(xs, ci, h, wd, k, cols);
                            gemm(co, hw, ckk, gs, false, cols, true, &mut gw, 1.0);
                        }
                    }
                    if need_x {
                        let gxs = &mut gx[s * ci * hw..(s + 1) * ci * hw];
                        if k == 1 {
                            gemm(ci, co, hw, wdta, true, gs, false, gxs, 0.0);
                        } else {
                            gemm(ckk, co, hw, wdta, true, gs, false, gcols, 0.0);
                            col2im(gcols, ci, h, wd, k, gxs);
                        }
                    }
                }
            })
        });
        if need_x {
            self.acc(grads, x, Tensor::new(vec![n, ci, h, wd], gx));
        }
        if need_w {
            self.acc(grads, w, Tensor::new(vec![co, ci, k, k], gw));
        }
        if let Some(b) = b {
            if self.ng(b) {
                let mut gb = vec![0.0; co];
                for s in 0..n {
                    for (c, acc) in gb.iter_mut().enumerate() {
                        *acc += gd[(s * co + c) * hw..][..hw].iter().sum::<f64>();
                    }
                }
                self.acc(grads, b, Tensor::new(vec![co], gb));
            }
        }
    }
}

pub(crate) fn roll_tensor(t: &Tensor, axis: usize, shift: usize) -> Tensor {
    let shape = t.shape();
    let size = shape[axis];
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let d = t.data();
    let mut out = vec![0.0; d.len()];
    for o in 0..outer {
        for i in 0..size {
            let dst = (i + shift) % size;
            let src_off = (o * size + i) * inner;
            let dst_off = (o * size + dst) * inner;
            out[dst_off..dst_off + inner].copy_from_slice(&d[src_off..src_off + inner]);
        }
    }
    Tensor::new(shape.to_vec(), out)
}
