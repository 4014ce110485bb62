use alloc::vec;
use alloc::vec::Vec;

use super::{Init, ParamLayout, Slot};
use crate::tensor::{Real, Tensor};

const GN_EPS: f64 = 1e-5;

/// Sinusoidal features of `t * 1000` over log-spaced frequencies:
/// `dim / 2` sines followed by `dim / 2` cosines.
pub fn time_embedding<T: Real>(t: f64, dim: usize) -> Vec<T> {
    let half = dim / 2;
    let mut out = vec![T::zero(); dim];
    for k in 0..half {
        let freq = libm::exp(-libm::log(10_000.0) * k as f64 / half as f64);
        let arg = 1000.0 * t * freq;
        out[k] = T::of(libm::sin(arg));
        out[half + k] = T::of(libm::cos(arg));
    }
    out
}

#[inline]
fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

pub fn silu<T: Real>(x: &[T]) -> Vec<T> {
    x.iter().map(|&v| v * sigmoid(v)).collect()
}

pub fn silu_backward<T: Real>(x: &[T], dy: &[T]) -> Vec<T> {
    x.iter()
        .zip(dy)
        .map(|(&v, &d)| {
            let s = sigmoid(v);
            d * s * (T::one() + v * (T::one() - s))
        })
        .collect()
}

pub fn silu_t<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    Tensor::from_vec(x.shape(), silu(x.data())).expect("same shape")
}

pub fn silu_backward_t<T: Real>(x: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    Tensor::from_vec(x.shape(), silu_backward(x.data(), dy.data())).expect("same shape")
}

/// Fully connected layer on rows: `y = x W^T + b`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub fan_in: usize,
    pub fan_out: usize,
    weight: Slot,
    bias: Slot,
}

impl Linear {
    pub fn declare(layout: &mut ParamLayout, name: &str, fan_in: usize, fan_out: usize) -> Self {
        let weight = layout.declare(alloc::format!("{name}.weight"), fan_in * fan_out, Init::FanIn(fan_in));
        let bias = layout.declare(alloc::format!("{name}.bias"), fan_out, Init::Zeros);
        Self { fan_in, fan_out, weight, bias }
    }

    pub fn forward<T: Real>(&self, p: &[T], x: &[T], rows: usize) -> Vec<T> {
        let bias = self.bias.get(p);
        let mut y: Vec<T> = (0..rows).flat_map(|_| bias.iter().copied()).collect();
        T::gemm(false, true, rows, self.fan_in, self.fan_out, T::one(), x, self.weight.get(p), T::one(), &mut y);
        y
    }

    pub fn backward<T: Real>(&self, p: &[T], g: &mut [T], x: &[T], dy: &[T], rows: usize, need_dx: bool) -> Option<Vec<T>> {
        T::gemm(true, false, self.fan_out, rows, self.fan_in, T::one(), dy, x, T::one(), self.weight.get_mut(g));
        let gb = self.bias.get_mut(g);
        for r in 0..rows {
            for (b, &d) in gb.iter_mut().zip(&dy[r * self.fan_out..(r + 1) * self.fan_out]) {
                *b += d;
            }
        }
        need_dx.then(|| {
            let mut dx = vec![T::zero(); rows * self.fan_in];
            T::gemm(false, false, rows, self.fan_out, self.fan_in, T::one(), dy, self.weight.get(p), T::zero(), &mut dx);
            dx
        })
    }
}

/// Same-padded, stride-1 convolution with an odd square kernel.
#[derive(Debug, Clone)]
pub struct Conv {
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    weight: Slot,
    bias: Slot,
}

fn im2col<T: Real>(x: &[T], c: usize, h: usize, w: usize, k: usize, col: &mut [T]) {
    let pad = (k / 2) as isize;
    let hw = h * w;
    for ci in 0..c {
        let plane = &x[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut col[((ci * k + ky) * k + kx) * hw..][..hw];
                let (dy, dx) = (ky as isize - pad, kx as isize - pad);
                let x0 = (-dx).max(0) as usize;
                let x1 = (w as isize - dx).min(w as isize).max(x0 as isize) as usize;
                for y in 0..h {
                    let dst = &mut row[y * w..(y + 1) * w];
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        dst.fill(T::zero());
                        continue;
                    }
                    let src = &plane[sy as usize * w..(sy as usize + 1) * w];
                    dst[..x0].fill(T::zero());
                    dst[x1..].fill(T::zero());
                    dst[x0..x1].copy_from_slice(&src[(x0 as isize + dx) as usize..(x1 as isize + dx) as usize]);
                }
            }
        }
    }
}

fn col2im<T: Real>(col: &[T], c: usize, h: usize, w: usize, k: usize, dx_out: &mut [T]) {
    let pad = (k / 2) as isize;
    let hw = h * w;
    dx_out.fill(T::zero());
    for ci in 0..c {
        let plane = &mut dx_out[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = &col[((ci * k + ky) * k + kx) * hw..][..hw];
                let (dy, dx) = (ky as isize - pad, kx as isize - pad);
                let x0 = (-dx).max(0) as usize;
                let x1 = (w as isize - dx).min(w as isize).max(x0 as isize) as usize;
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src = &row[y * w + x0..y * w + x1];
                    let start = sy as usize * w + (x0 as isize + dx) as usize;
                    for (d, &s) in plane[start..start + src.len()].iter_mut().zip(src) {
                        *d += s;
                    }
                }
            }
        }
    }
}

impl Conv {
    pub fn declare(layout: &mut ParamLayout, name: &str, cin: usize, cout: usize, k: usize, zero: bool) -> Self {
        let fan_in = cin * k * k;
        let init = if zero { Init::Zeros } else { Init::FanIn(fan_in) };
        let weight = layout.declare(alloc::format!("{name}.weight"), cout * fan_in, init);
        let bias = layout.declare(alloc::format!("{name}.bias"), cout, Init::Zeros);
        Self { cin, cout, k, weight, bias }
    }

    pub fn forward<T: Real>(&self, p: &[T], x: &Tensor<T>) -> Tensor<T> {
        let [n, c, h, w] = x.shape();
        assert_eq!(c, self.cin, "conv input channels");
        let (hw, kk) = (h * w, self.cin * self.k * self.k);
        let mut out = Tensor::zeros([n, self.cout, h, w]);
        let mut col = if self.k > 1 { vec![T::zero(); kk * hw] } else { Vec::new() };
        let (weight, bias) = (self.weight.get(p), self.bias.get(p));
        for i in 0..n {
            let src: &[T] = if self.k == 1 {
                x.item(i)
            } else {
                im2col(x.item(i), c, h, w, self.k, &mut col);
                &col
            };
            let dst = out.item_mut(i);
            for (co, &b) in bias.iter().enumerate() {
                dst[co * hw..(co + 1) * hw].fill(b);
            }
            T::gemm(false, false, self.cout, kk, hw, T::one(), weight, src, T::one(), dst);
        }
        out
    }

    pub fn backward<T: Real>(&self, p: &[T], g: &mut [T], x: &Tensor<T>, dy: &Tensor<T>, need_dx: bool) -> Option<Tensor<T>> {
        let [n, c, h, w] = x.shape();
        let (hw, kk) = (h * w, self.cin * self.k * self.k);
        let mut col = if self.k > 1 { vec![T::zero(); kk * hw] } else { Vec::new() };
        let mut dcol = if need_dx && self.k > 1 { vec![T::zero(); kk * hw] } else { Vec::new() };
        let mut dx = need_dx.then(|| Tensor::zeros(x.shape()));
        let weight = self.weight.get(p);
        for i in 0..n {
            let src: &[T] = if self.k == 1 {
                x.item(i)
            } else {
                im2col(x.item(i), c, h, w, self.k, &mut col);
                &col
            };
            let d = dy.item(i);
            T::gemm(false, true, self.cout, hw, kk, T::one(), d, src, T::one(), self.weight.get_mut(g));
            for (co, b) in self.bias.get_mut(g).iter_mut().enumerate() {
                *b += d[co * hw..(co + 1) * hw].iter().copied().sum::<T>();
            }
            if let Some(dx) = dx.as_mut() {
                if self.k == 1 {
                    T::gemm(true, false, kk, self.cout, hw, T::one(), weight, d, T::zero(), dx.item_mut(i));
                } else {
                    T::gemm(true, false, kk, self.cout, hw, T::one(), weight, d, T::zero(), &mut dcol);
                    col2im(&dcol, c, h, w, self.k, dx.item_mut(i));
                }
            }
        }
        dx
    }
}

#[derive(Debug, Clone)]
pub struct GroupNorm {
    pub channels: usize,
    pub groups: usize,
    gamma: Slot,
    beta: Slot,
}

#[derive(Debug, Clone)]
pub struct GnCache<T: Real> {
    xhat: Tensor<T>,
    inv_std: Vec<T>,
}

/// Largest of 8, 4, 2, 1 dividing `channels`.
pub fn groups_for(channels: usize) -> usize {
    [8, 4, 2, 1].into_iter().find(|g| channels.is_multiple_of(*g)).unwrap_or(1)
}

impl GroupNorm {
    pub fn declare(layout: &mut ParamLayout, name: &str, channels: usize) -> Self {
        let gamma = layout.declare(alloc::format!("{name}.gamma"), channels, Init::Ones);
        let beta = layout.declare(alloc::format!("{name}.beta"), channels, Init::Zeros);
        Self { channels, groups: groups_for(channels), gamma, beta }
    }

    pub fn forward<T: Real>(&self, p: &[T], x: &Tensor<T>) -> (Tensor<T>, GnCache<T>) {
        let [n, c, h, w] = x.shape();
        let hw = h * w;
        let cg = c / self.groups;
        let m = cg * hw;
        let (gamma, beta) = (self.gamma.get(p), self.beta.get(p));
        let mut xhat = Tensor::zeros(x.shape());
        let mut y = Tensor::zeros(x.shape());
        let mut inv_std = Vec::with_capacity(n * self.groups);
        for i in 0..n {
            for gi in 0..self.groups {
                let range = gi * m..(gi + 1) * m;
                let src = &x.item(i)[range.clone()];
                let mean = src.iter().copied().sum::<T>() / T::of(m as f64);
                let var = src.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / T::of(m as f64);
                let inv = T::one() / (var + T::of(GN_EPS)).sqrt();
                inv_std.push(inv);
                let xh = &mut xhat.item_mut(i)[range.clone()];
                for (d, &s) in xh.iter_mut().zip(src) {
                    *d = (s - mean) * inv;
                }
                let xh = &xhat.item(i)[range.clone()];
                let yo = &mut y.item_mut(i)[range];
                for cc in 0..cg {
                    let ch = gi * cg + cc;
                    for j in cc * hw..(cc + 1) * hw {
                        yo[j] = xh[j] * gamma[ch] + beta[ch];
                    }
                }
            }
        }
        (y, GnCache { xhat, inv_std })
    }

    pub fn backward<T: Real>(&self, p: &[T], g: &mut [T], cache: &GnCache<T>, dy: &Tensor<T>) -> Tensor<T> {
        let [n, c, h, w] = dy.shape();
        let hw = h * w;
        let cg = c / self.groups;
        let m = cg * hw;
        let gamma = self.gamma.get(p);
        let mut dgamma = vec![T::zero(); c];
        let mut dbeta = vec![T::zero(); c];
        let mut dx = Tensor::zeros(dy.shape());
        let mut dxhat = vec![T::zero(); m];
        for i in 0..n {
            for gi in 0..self.groups {
                let range = gi * m..(gi + 1) * m;
                let d = &dy.item(i)[range.clone()];
                let xh = &cache.xhat.item(i)[range.clone()];
                for cc in 0..cg {
                    let ch = gi * cg + cc;
                    for j in cc * hw..(cc + 1) * hw {
                        dgamma[ch] += d[j] * xh[j];
                        dbeta[ch] += d[j];
                        dxhat[j] = d[j] * gamma[ch];
                    }
                }
                let s1 = dxhat.iter().copied().sum::<T>();
                let s2 = dxhat.iter().zip(xh).map(|(&a, &b)| a * b).sum::<T>();
                let inv = cache.inv_std[i * self.groups + gi];
                let mf = T::of(m as f64);
                let scale = inv / mf;
                for (o, (&dh, &x)) in dx.item_mut(i)[range].iter_mut().zip(dxhat.iter().zip(xh)) {
                    *o = scale * (mf * dh - s1 - x * s2);
                }
            }
        }
        for (a, b) in self.gamma.get_mut(g).iter_mut().zip(dgamma) {
            *a += b;
        }
        for (a, b) in self.beta.get_mut(g).iter_mut().zip(dbeta) {
            *a += b;
        }
        dx
    }
}

pub fn avg_pool2<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let [n, c, h, w] = x.shape();
    let (ho, wo) = (h / 2, w / 2);
    let mut out = Tensor::zeros([n, c, ho, wo]);
    let quarter = T::of(0.25);
    let src = x.data();
    for (plane, dst) in out.data_mut().chunks_mut(ho * wo).enumerate() {
        let base = plane * h * w;
        for y in 0..ho {
            for xx in 0..wo {
                let i = base + 2 * y * w + 2 * xx;
                dst[y * wo + xx] = quarter * (src[i] + src[i + 1] + src[i + w] + src[i + w + 1]);
            }
        }
    }
    out
}

pub fn avg_pool2_backward<T: Real>(dy: &Tensor<T>) -> Tensor<T> {
    let [n, c, ho, wo] = dy.shape();
    let (h, w) = (2 * ho, 2 * wo);
    let mut dx = Tensor::zeros([n, c, h, w]);
    let quarter = T::of(0.25);
    let src = dy.data();
    for (plane, dst) in dx.data_mut().chunks_mut(h * w).enumerate() {
        for y in 0..h {
            for xx in 0..w {
                dst[y * w + xx] = quarter * src[plane * ho * wo + (y / 2) * wo + xx / 2];
            }
        }
    }
    dx
}

pub fn upsample2<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let [n, c, h, w] = x.shape();
    let (ho, wo) = (2 * h, 2 * w);
    let mut out = Tensor::zeros([n, c, ho, wo]);
    let src = x.data();
    for (plane, dst) in out.data_mut().chunks_mut(ho * wo).enumerate() {
        for y in 0..ho {
            for xx in 0..wo {
                dst[y * wo + xx] = src[plane * h * w + (y / 2) * w + xx / 2];
            }
        }
    }
    out
}

pub fn upsample2_backward<T: Real>(dy: &Tensor<T>) -> Tensor<T> {
    let [n, c, ho, wo] = dy.shape();
    let (h, w) = (ho / 2, wo / 2);
    let mut dx = Tensor::zeros([n, c, h, w]);
    let src = dy.data();
    for (plane, dst) in dx.data_mut().chunks_mut(h * w).enumerate() {
        let base = plane * ho * wo;
        for y in 0..h {
            for xx in 0..w {
                let i = base + 2 * y * wo + 2 * xx;
                dst[y * w + xx] = src[i] + src[i + 1] + src[i + wo] + src[i + wo + 1];
            }
        }
    }
    dx
}

pub fn concat_channels<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let [n, ca, h, w] = a.shape();
    let cb = b.channels();
    assert_eq!((b.batch(), b.height(), b.width()), (n, h, w), "concat shapes");
    let mut out = Tensor::zeros([n, ca + cb, h, w]);
    for i in 0..n {
        let dst = out.item_mut(i);
        dst[..a.item_len()].copy_from_slice(a.item(i));
        dst[a.item_len()..].copy_from_slice(b.item(i));
    }
    out
}

pub fn split_channels<T: Real>(x: &Tensor<T>, first: usize) -> (Tensor<T>, Tensor<T>) {
    let [n, c, h, w] = x.shape();
    let mut a = Tensor::zeros([n, first, h, w]);
    let mut b = Tensor::zeros([n, c - first, h, w]);
    let split = first * h * w;
    for i in 0..n {
        a.item_mut(i).copy_from_slice(&x.item(i)[..split]);
        b.item_mut(i).copy_from_slice(&x.item(i)[split..]);
    }
    (a, b)
}

/// Single-head self-attention over spatial positions with a residual
/// connection: `x + proj(attend(norm(x)))`.
#[derive(Debug, Clone)]
pub struct Attention {
    pub channels: usize,
    norm: GroupNorm,
    qkv: Conv,
    proj: Conv,
}

#[derive(Debug, Clone)]
pub struct AttnCache<T: Real> {
    gn: GnCache<T>,
    normed: Tensor<T>,
    qkv: Tensor<T>,
    probs: Vec<T>,
    attended: Tensor<T>,
}

impl Attention {
    pub fn declare(layout: &mut ParamLayout, name: &str, channels: usize) -> Self {
        Self {
            channels,
            norm: GroupNorm::declare(layout, &alloc::format!("{name}.norm"), channels),
            qkv: Conv::declare(layout, &alloc::format!("{name}.qkv"), channels, 3 * channels, 1, false),
            proj: Conv::declare(layout, &alloc::format!("{name}.proj"), channels, channels, 1, false),
        }
    }

    pub fn forward<T: Real>(&self, p: &[T], x: &Tensor<T>) -> (Tensor<T>, AttnCache<T>) {
        let [n, c, h, w] = x.shape();
        let hw = h * w;
        let scale = T::of(1.0 / libm::sqrt(c as f64));
        let (normed, gn) = self.norm.forward(p, x);
        let qkv = self.qkv.forward(p, &normed);
        let mut probs = vec![T::zero(); n * hw * hw];
        let mut attended = Tensor::zeros([n, c, h, w]);
        for i in 0..n {
            let item = qkv.item(i);
            let (q, k, v) = (&item[..c * hw], &item[c * hw..2 * c * hw], &item[2 * c * hw..]);
            let pr = &mut probs[i * hw * hw..(i + 1) * hw * hw];
            T::gemm(true, false, hw, c, hw, scale, q, k, T::zero(), pr);
            for row in pr.chunks_mut(hw) {
                let max = row.iter().copied().fold(T::neg_infinity(), T::max);
                let mut sum = T::zero();
                for v in row.iter_mut() {
                    *v = (*v - max).exp();
                    sum += *v;
                }
                for v in row.iter_mut() {
                    *v /= sum;
                }
            }
            T::gemm(false, true, c, hw, hw, T::one(), v, pr, T::zero(), attended.item_mut(i));
        }
        let mut y = self.proj.forward(p, &attended);
        for (o, &r) in y.data_mut().iter_mut().zip(x.data()) {
            *o += r;
        }
        (y, AttnCache { gn, normed, qkv, probs, attended })
    }

    pub fn backward<T: Real>(&self, p: &[T], g: &mut [T], cache: &AttnCache<T>, dy: &Tensor<T>) -> Tensor<T> {
        let [n, c, h, w] = dy.shape();
        let hw = h * w;
        let scale = T::of(1.0 / libm::sqrt(c as f64));
        let dattended = self.proj.backward(p, g, &cache.attended, dy, true).expect("dx requested");
        let mut dqkv = Tensor::zeros(cache.qkv.shape());
        let mut dprobs = vec![T::zero(); hw * hw];
        for i in 0..n {
            let item = cache.qkv.item(i);
            let (q, k, v) = (&item[..c * hw], &item[c * hw..2 * c * hw], &item[2 * c * hw..]);
            let pr = &cache.probs[i * hw * hw..(i + 1) * hw * hw];
            let da = dattended.item(i);
            let dst = dqkv.item_mut(i);
            let (dq, rest) = dst.split_at_mut(c * hw);
            let (dk, dv) = rest.split_at_mut(c * hw);
            T::gemm(false, false, c, hw, hw, T::one(), da, pr, T::zero(), dv);
            T::gemm(true, false, hw, c, hw, T::one(), da, v, T::zero(), &mut dprobs);
            // Softmax backward turns dprobs into dscores in place.
            for (drow, prow) in dprobs.chunks_mut(hw).zip(pr.chunks(hw)) {
                let dot = drow.iter().zip(prow).map(|(&a, &b)| a * b).sum::<T>();
                for (d, &pv) in drow.iter_mut().zip(prow) {
                    *d = pv * (*d - dot);
                }
            }
            T::gemm(false, true, c, hw, hw, scale, k, &dprobs, T::zero(), dq);
            T::gemm(false, false, c, hw, hw, scale, q, &dprobs, T::zero(), dk);
        }
        let dnormed = self.qkv.backward(p, g, &cache.normed, &dqkv, true).expect("dx requested");
        let mut dx = self.norm.backward(p, g, &cache.gn, &dnormed);
        for (o, &d) in dx.data_mut().iter_mut().zip(dy.data()) {
            *o += d;
        }
        dx
    }
}
