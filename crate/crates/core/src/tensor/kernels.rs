//! Forward and backward kernels over flat row-major buffers.
//!
//! Shape validation happens in the callers; these functions assume
//! consistent geometry.

use super::Element;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    fn cin_g(&self) -> usize {
        self.cin / self.groups
    }

    fn cout_g(&self) -> usize {
        self.cout / self.groups
    }

    fn col_rows(&self) -> usize {
        self.cin_g() * self.k * self.k
    }

    fn pixels(&self) -> usize {
        self.ho * self.wo
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    pub fn macs(&self) -> u64 {
        (self.n * self.cout * self.pixels() * self.col_rows()) as u64
    }
}

fn im2col<T: Element>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let (h, w, k) = (g.h as isize, g.w as isize, g.k);
    let l = g.pixels();
    for c in 0..g.cin_g() {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut cols[((c * k + ky) * k + kx) * l..][..l];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let dst = &mut row[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= h {
                        dst.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *d = if ix < 0 || ix >= w {
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
    let (h, w, k) = (g.h as isize, g.w as isize, g.k);
    let l = g.pixels();
    for c in 0..g.cin_g() {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..k {
            for kx in 0..k {
                let row = &cols[((c * k + ky) * k + kx) * l..][..l];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= h {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, &v) in row[oy * g.wo..(oy + 1) * g.wo].iter().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < w {
                            dst[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

pub fn conv2d_forward<T: Element>(x: &[T], weight: &[T], bias: Option<&[T]>, g: &ConvGeom) -> Vec<T> {
    let l = g.pixels();
    let rows = g.col_rows();
    let (cin_g, cout_g) = (g.cin_g(), g.cout_g());
    let mut out = vec![T::zero(); g.n * g.cout * l];
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); rows * l]
    };
    for n in 0..g.n {
        for grp in 0..g.groups {
            let xs = &x[(n * g.cin + grp * cin_g) * g.h * g.w..][..cin_g * g.h * g.w];
            let b: &[T] = if g.is_pointwise() {
                xs
            } else {
                im2col(xs, g, &mut cols);
                &cols
            };
            let wg = &weight[grp * cout_g * rows..][..cout_g * rows];
            let og = &mut out[(n * g.cout + grp * cout_g) * l..][..cout_g * l];
            T::gemm(cout_g, rows, l, T::one(), wg, (rows, 1), b, (l, 1), T::zero(), og, (l, 1));
        }
    }
    if let Some(bias) = bias {
        for n in 0..g.n {
            for (c, &bv) in bias.iter().enumerate() {
                out[(n * g.cout + c) * l..][..l].iter_mut().for_each(|v| *v += bv);
            }
        }
    }
    out
}

pub struct ConvGrads<T> {
    pub dx: Option<Vec<T>>,
    pub dw: Vec<T>,
    pub db: Vec<T>,
}

pub fn conv2d_backward<T: Element>(x: &[T], weight: &[T], dy: &[T], g: &ConvGeom, need_dx: bool) -> ConvGrads<T> {
    let l = g.pixels();
    let rows = g.col_rows();
    let (cin_g, cout_g) = (g.cin_g(), g.cout_g());
    let mut dw = vec![T::zero(); weight.len()];
    let mut db = vec![T::zero(); g.cout];
    let mut dx = need_dx.then(|| vec![T::zero(); x.len()]);
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); rows * l]
    };
    let mut dcols = vec![T::zero(); if need_dx { rows * l } else { 0 }];
    for n in 0..g.n {
        for grp in 0..g.groups {
            let xoff = (n * g.cin + grp * cin_g) * g.h * g.w;
            let xs = &x[xoff..][..cin_g * g.h * g.w];
            let b: &[T] = if g.is_pointwise() {
                xs
            } else {
                im2col(xs, g, &mut cols);
                &cols
            };
            let dyg = &dy[(n * g.cout + grp * cout_g) * l..][..cout_g * l];
            let dwg = &mut dw[grp * cout_g * rows..][..cout_g * rows];
            T::gemm(cout_g, l, rows, T::one(), dyg, (l, 1), b, (1, l), T::one(), dwg, (rows, 1));
            if let Some(dx) = dx.as_mut() {
                let wg = &weight[grp * cout_g * rows..][..cout_g * rows];
                let dxs = &mut dx[xoff..][..cin_g * g.h * g.w];
                if g.is_pointwise() {
                    T::gemm(rows, cout_g, l, T::one(), wg, (1, rows), dyg, (l, 1), T::one(), dxs, (l, 1));
                } else {
                    T::gemm(rows, cout_g, l, T::one(), wg, (1, rows), dyg, (l, 1), T::zero(), &mut dcols, (l, 1));
                    col2im(&dcols, g, dxs);
                }
            }
        }
        for c in 0..g.cout {
            db[c] += dy[(n * g.cout + c) * l..][..l].iter().copied().sum::<T>();
        }
    }
    ConvGrads { dx, dw, db }
}

/// Per-pixel affine map over channels: `y[n, :, p] = W x[n, :, p] + b`.
pub fn channel_linear_forward<T: Element>(
    x: &[T],
    weight: &[T],
    bias: Option<&[T]>,
    n: usize,
    cin: usize,
    cout: usize,
    l: usize,
) -> Vec<T> {
    let g = ConvGeom {
        n,
        cin,
        h: 1,
        w: l,
        cout,
        k: 1,
        stride: 1,
        pad: 0,
        groups: 1,
        ho: 1,
        wo: l,
    };
    conv2d_forward(x, weight, bias, &g)
}

pub fn channel_linear_backward<T: Element>(
    x: &[T],
    weight: &[T],
    dy: &[T],
    n: usize,
    cin: usize,
    cout: usize,
    l: usize,
    need_dx: bool,
) -> ConvGrads<T> {
    let g = ConvGeom {
        n,
        cin,
        h: 1,
        w: l,
        cout,
        k: 1,
        stride: 1,
        pad: 0,
        groups: 1,
        ho: 1,
        wo: l,
    };
    conv2d_backward(x, weight, dy, &g, need_dx)
}

/// `y = x W^T + b` over `rows` rows of width `din`.
pub fn linear_forward<T: Element>(x: &[T], weight: &[T], bias: Option<&[T]>, rows: usize, din: usize, dout: usize) -> Vec<T> {
    let mut y = vec![T::zero(); rows * dout];
    T::gemm(rows, din, dout, T::one(), x, (din, 1), weight, (1, din), T::zero(), &mut y, (dout, 1));
    if let Some(b) = bias {
        for row in y.chunks_mut(dout) {
            row.iter_mut().zip(b).for_each(|(v, &bv)| *v += bv);
        }
    }
    y
}

pub fn linear_backward<T: Element>(
    x: &[T],
    weight: &[T],
    dy: &[T],
    rows: usize,
    din: usize,
    dout: usize,
    need_dx: bool,
) -> ConvGrads<T> {
    let mut dw = vec![T::zero(); dout * din];
    T::gemm(dout, rows, din, T::one(), dy, (1, dout), x, (din, 1), T::zero(), &mut dw, (din, 1));
    let mut db = vec![T::zero(); dout];
    for row in dy.chunks(dout) {
        db.iter_mut().zip(row).for_each(|(d, &v)| *d += v);
    }
    let dx = need_dx.then(|| {
        let mut dx = vec![T::zero(); rows * din];
        T::gemm(rows, dout, din, T::one(), dy, (dout, 1), weight, (din, 1), T::zero(), &mut dx, (din, 1));
        dx
    });
    ConvGrads { dx, dw, db }
}

pub struct GroupNormSaved<T> {
    pub mean: Vec<T>,
    pub rstd: Vec<T>,
}

pub fn group_norm_forward<T: Element>(
    x: &[T],
    gamma: &[T],
    beta: &[T],
    dims: [usize; 4],
    groups: usize,
    eps: T,
) -> (Vec<T>, GroupNormSaved<T>) {
    let [n, c, h, w] = dims;
    let cg = c / groups;
    let block = cg * h * w;
    let hw = h * w;
    let count = T::lit(block as f64);
    let mut y = vec![T::zero(); x.len()];
    let mut mean = Vec::with_capacity(n * groups);
    let mut rstd = Vec::with_capacity(n * groups);
    for ni in 0..n {
        for gi in 0..groups {
            let off = (ni * c + gi * cg) * hw;
            let xs = &x[off..off + block];
            let mu = xs.iter().copied().sum::<T>() / count;
            let var = xs.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() / count;
            let r = T::one() / (var + eps).sqrt();
            mean.push(mu);
            rstd.push(r);
            for ci in 0..cg {
                let ch = gi * cg + ci;
                let (ga, be) = (gamma[ch], beta[ch]);
                let src = &xs[ci * hw..(ci + 1) * hw];
                let dst = &mut y[off + ci * hw..off + (ci + 1) * hw];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d = (s - mu) * r * ga + be;
                }
            }
        }
    }
    (y, GroupNormSaved { mean, rstd })
}

pub struct NormGrads<T> {
    pub dx: Vec<T>,
    pub dgamma: Vec<T>,
    pub dbeta: Vec<T>,
}

pub fn group_norm_backward<T: Element>(
    x: &[T],
    gamma: &[T],
    dy: &[T],
    dims: [usize; 4],
    groups: usize,
    saved: &GroupNormSaved<T>,
) -> NormGrads<T> {
    let [n, c, h, w] = dims;
    let cg = c / groups;
    let hw = h * w;
    let block = cg * hw;
    let m = T::lit(block as f64);
    let mut dx = vec![T::zero(); x.len()];
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for ni in 0..n {
        for gi in 0..groups {
            let idx = ni * groups + gi;
            let (mu, r) = (saved.mean[idx], saved.rstd[idx]);
            let off = (ni * c + gi * cg) * hw;
            let mut sum_dxhat = T::zero();
            let mut sum_dxhat_xhat = T::zero();
            for ci in 0..cg {
                let ch = gi * cg + ci;
                let mut dg = T::zero();
                let mut dbv = T::zero();
                for p in 0..hw {
                    let i = off + ci * hw + p;
                    let xhat = (x[i] - mu) * r;
                    dg += dy[i] * xhat;
                    dbv += dy[i];
                    let dxhat = dy[i] * gamma[ch];
                    sum_dxhat += dxhat;
                    sum_dxhat_xhat += dxhat * xhat;
                }
                dgamma[ch] += dg;
                dbeta[ch] += dbv;
            }
            for ci in 0..cg {
                let ch = gi * cg + ci;
                for p in 0..hw {
                    let i = off + ci * hw + p;
                    let xhat = (x[i] - mu) * r;
                    let dxhat = dy[i] * gamma[ch];
                    dx[i] = r / m * (m * dxhat - sum_dxhat - xhat * sum_dxhat_xhat);
                }
            }
        }
    }
    NormGrads { dx, dgamma, dbeta }
}

/// Windowed maximum; returns outputs and the flat input index of each
/// window's first (row-major) maximum.
pub fn max_pool_forward<T: Element>(x: &[T], dims: [usize; 4], k: usize, stride: usize, ho: usize, wo: usize) -> (Vec<T>, Vec<usize>) {
    let [n, c, h, w] = dims;
    let mut y = Vec::with_capacity(n * c * ho * wo);
    let mut arg = Vec::with_capacity(n * c * ho * wo);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = base + oy * stride * w + ox * stride;
                for ky in 0..k {
                    for kx in 0..k {
                        let i = base + (oy * stride + ky) * w + ox * stride + kx;
                        if x[i] > x[best] || (x[i].is_nan() && !x[best].is_nan()) {
                            best = i;
                        }
                    }
                }
                y.push(x[best]);
                arg.push(best);
            }
        }
    }
    (y, arg)
}

#[inline]
pub fn adaptive_bin(i: usize, len: usize, p: usize) -> (usize, usize) {
    let start = i * len / p;
    let end = ((i + 1) * len).div_ceil(p);
    (start, end)
}

pub fn adaptive_avg_pool_forward<T: Element>(x: &[T], dims: [usize; 4], p: usize) -> Vec<T> {
    let [n, c, h, w] = dims;
    let mut y = Vec::with_capacity(n * c * p * p);
    for plane in 0..n * c {
        let xs = &x[plane * h * w..(plane + 1) * h * w];
        for i in 0..p {
            let (y0, y1) = adaptive_bin(i, h, p);
            for j in 0..p {
                let (x0, x1) = adaptive_bin(j, w, p);
                let mut s = T::zero();
                for yy in y0..y1 {
                    for xx in x0..x1 {
                        s += xs[yy * w + xx];
                    }
                }
                y.push(s / T::lit(((y1 - y0) * (x1 - x0)) as f64));
            }
        }
    }
    y
}

pub fn adaptive_avg_pool_backward<T: Element>(dy: &[T], dims: [usize; 4], p: usize) -> Vec<T> {
    let [n, c, h, w] = dims;
    let mut dx = vec![T::zero(); n * c * h * w];
    for plane in 0..n * c {
        let dxs = &mut dx[plane * h * w..(plane + 1) * h * w];
        for i in 0..p {
            let (y0, y1) = adaptive_bin(i, h, p);
            for j in 0..p {
                let (x0, x1) = adaptive_bin(j, w, p);
                let g = dy[plane * p * p + i * p + j] / T::lit(((y1 - y0) * (x1 - x0)) as f64);
                for yy in y0..y1 {
                    for xx in x0..x1 {
                        dxs[yy * w + xx] += g;
                    }
                }
            }
        }
    }
    dx
}

/// Source taps for one axis of an align-corners=false bilinear resize.
#[derive(Clone, Copy, Debug)]
pub struct Tap {
    pub lo: usize,
    pub hi: usize,
    pub frac: f64,
}

pub fn bilinear_taps(input: usize, output: usize) -> Vec<Tap> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(input - 1);
            let hi = (lo + 1).min(input - 1);
            Tap {
                lo,
                hi,
                frac: src - lo as f64,
            }
        })
        .collect()
}

pub fn bilinear_forward<T: Element>(x: &[T], dims: [usize; 4], ho: usize, wo: usize) -> Vec<T> {
    let [n, c, h, w] = dims;
    if ho == h && wo == w {
        return x.to_vec();
    }
    let ty = bilinear_taps(h, ho);
    let tx = bilinear_taps(w, wo);
    let mut y = Vec::with_capacity(n * c * ho * wo);
    for plane in 0..n * c {
        let xs = &x[plane * h * w..(plane + 1) * h * w];
        for a in &ty {
            let fy = T::lit(a.frac);
            for b in &tx {
                let fx = T::lit(b.frac);
                let top = xs[a.lo * w + b.lo] * (T::one() - fx) + xs[a.lo * w + b.hi] * fx;
                let bot = xs[a.hi * w + b.lo] * (T::one() - fx) + xs[a.hi * w + b.hi] * fx;
                y.push(top * (T::one() - fy) + bot * fy);
            }
        }
    }
    y
}

pub fn bilinear_backward<T: Element>(dy: &[T], dims: [usize; 4], ho: usize, wo: usize) -> Vec<T> {
    let [n, c, h, w] = dims;
    if ho == h && wo == w {
        return dy.to_vec();
    }
    let ty = bilinear_taps(h, ho);
    let tx = bilinear_taps(w, wo);
    let mut dx = vec![T::zero(); n * c * h * w];
    for plane in 0..n * c {
        let dxs = &mut dx[plane * h * w..(plane + 1) * h * w];
        let dys = &dy[plane * ho * wo..(plane + 1) * ho * wo];
        for (i, a) in ty.iter().enumerate() {
            let fy = T::lit(a.frac);
            for (j, b) in tx.iter().enumerate() {
                let fx = T::lit(b.frac);
                let g = dys[i * wo + j];
                dxs[a.lo * w + b.lo] += g * (T::one() - fy) * (T::one() - fx);
                dxs[a.lo * w + b.hi] += g * (T::one() - fy) * fx;
                dxs[a.hi * w + b.lo] += g * fy * (T::one() - fx);
                dxs[a.hi * w + b.hi] += g * fy * fx;
            }
        }
    }
    dx
}

/// In-place stable softmax over each contiguous row of length `d`.
pub fn softmax_rows<T: Element>(x: &mut [T], d: usize) {
    for row in x.chunks_mut(d) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        row.iter_mut().for_each(|v| *v /= sum);
    }
}

pub fn softmax_backward<T: Element>(y: &[T], dy: &[T], d: usize) -> Vec<T> {
    let mut dx = Vec::with_capacity(y.len());
    for (yr, gr) in y.chunks(d).zip(dy.chunks(d)) {
        let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
        dx.extend(yr.iter().zip(gr).map(|(&a, &b)| a * (b - dot)));
    }
    dx
}

/// Geometry of channel-major multi-head cross-attention.
///
/// Queries are `[n, c, lq]`, keys and values `[n, c, lk]`; head `h` owns
/// channels `h * c / heads .. (h + 1) * c / heads`.
#[derive(Clone, Copy, Debug)]
pub struct AttnGeom {
    pub n: usize,
    pub c: usize,
    pub lq: usize,
    pub lk: usize,
    pub heads: usize,
}

impl AttnGeom {
    fn head_dim(&self) -> usize {
        self.c / self.heads
    }

    pub fn score_macs(&self) -> u64 {
        (self.n * self.lq * self.lk * self.c) as u64
    }
}

/// Returns the output `[n, c, lq]` and the post-softmax probabilities
/// `[n, heads, lq, lk]`.
pub fn attention_forward<T: Element>(q: &[T], k: &[T], v: &[T], g: &AttnGeom, scale: T) -> (Vec<T>, Vec<T>) {
    let dh = g.head_dim();
    let (lq, lk) = (g.lq, g.lk);
    let mut probs = vec![T::zero(); g.n * g.heads * lq * lk];
    let mut out = vec![T::zero(); g.n * g.c * lq];
    for n in 0..g.n {
        for h in 0..g.heads {
            let qh = &q[(n * g.c + h * dh) * lq..][..dh * lq];
            let kh = &k[(n * g.c + h * dh) * lk..][..dh * lk];
            let vh = &v[(n * g.c + h * dh) * lk..][..dh * lk];
            let ph = &mut probs[(n * g.heads + h) * lq * lk..][..lq * lk];
            T::gemm(lq, dh, lk, scale, qh, (1, lq), kh, (lk, 1), T::zero(), ph, (lk, 1));
            softmax_rows(ph, lk);
            let oh = &mut out[(n * g.c + h * dh) * lq..][..dh * lq];
            T::gemm(dh, lk, lq, T::one(), vh, (lk, 1), ph, (1, lk), T::zero(), oh, (lq, 1));
        }
    }
    (out, probs)
}

pub struct AttnGrads<T> {
    pub dq: Vec<T>,
    pub dk: Vec<T>,
    pub dv: Vec<T>,
}

pub fn attention_backward<T: Element>(
    q: &[T],
    k: &[T],
    v: &[T],
    probs: &[T],
    dy: &[T],
    g: &AttnGeom,
    scale: T,
) -> AttnGrads<T> {
    let dh = g.head_dim();
    let (lq, lk) = (g.lq, g.lk);
    let mut dq = vec![T::zero(); q.len()];
    let mut dk = vec![T::zero(); k.len()];
    let mut dv = vec![T::zero(); v.len()];
    let mut dp = vec![T::zero(); lq * lk];
    for n in 0..g.n {
        for h in 0..g.heads {
            let qoff = (n * g.c + h * dh) * lq;
            let koff = (n * g.c + h * dh) * lk;
            let ph = &probs[(n * g.heads + h) * lq * lk..][..lq * lk];
            let dyh = &dy[qoff..][..dh * lq];
            // dV = dY P
            T::gemm(dh, lq, lk, T::one(), dyh, (lq, 1), ph, (lk, 1), T::zero(), &mut dv[koff..][..dh * lk], (lk, 1));
            // dP = dY^T V
            T::gemm(lq, dh, lk, T::one(), dyh, (1, lq), &v[koff..][..dh * lk], (lk, 1), T::zero(), &mut dp, (lk, 1));
            let ds = softmax_backward(ph, &dp, lk);
            // dQ = scale K dS^T
            T::gemm(dh, lk, lq, scale, &k[koff..][..dh * lk], (lk, 1), &ds, (1, lk), T::zero(), &mut dq[qoff..][..dh * lq], (lq, 1));
            // dK = scale Q dS
            T::gemm(dh, lq, lk, scale, &q[qoff..][..dh * lq], (lq, 1), &ds, (lk, 1), T::zero(), &mut dk[koff..][..dh * lk], (lk, 1));
        }
    }
    AttnGrads { dq, dk, dv }
}

/// Mean negative log-likelihood over non-ignored pixels.
///
/// Returns the loss, the softmax probabilities `[n, k, l]` and the number of
/// counted pixels.
pub fn cross_entropy_forward<T: Element>(
    logits: &[T],
    labels: &[u8],
    n: usize,
    k: usize,
    l: usize,
    ignore: u8,
) -> (T, Vec<T>, usize) {
    let mut probs = vec![T::zero(); logits.len()];
    let mut total = T::zero();
    let mut count = 0usize;
    let mut col = vec![T::zero(); k];
    for ni in 0..n {
        for p in 0..l {
            for (c, slot) in col.iter_mut().enumerate() {
                *slot = logits[(ni * k + c) * l + p];
            }
            let max = col.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = col.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
            for (c, &v) in col.iter().enumerate() {
                probs[(ni * k + c) * l + p] = (v - lse).exp();
            }
            let label = labels[ni * l + p];
            if label != ignore {
                total += lse - col[label as usize];
                count += 1;
            }
        }
    }
    let loss = if count > 0 {
        total / T::lit(count as f64)
    } else {
        T::zero()
    };
    (loss, probs, count)
}

pub fn cross_entropy_backward<T: Element>(
    probs: &[T],
    labels: &[u8],
    n: usize,
    k: usize,
    l: usize,
    ignore: u8,
    count: usize,
    dloss: T,
) -> Vec<T> {
    let mut dx = vec![T::zero(); probs.len()];
    let scale = dloss / T::lit(count as f64);
    for ni in 0..n {
        for p in 0..l {
            let label = labels[ni * l + p];
            if label == ignore {
                continue;
            }
            for c in 0..k {
                let i = (ni * k + c) * l + p;
                let target = if c == label as usize { T::one() } else { T::zero() };
                dx[i] = (probs[i] - target) * scale;
            }
        }
    }
    dx
}
