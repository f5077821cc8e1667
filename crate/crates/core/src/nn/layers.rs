//! Layer kernels. Each forward returns whatever its backward needs; backward
//! functions accumulate (`+=`) into parameter gradient slices.

use super::{gemm, Real, Tensor};

// ---------------------------------------------------------------------------
// Convolution (stride 1, zero "same" padding, odd kernel)
// ---------------------------------------------------------------------------

fn im2col<T: Real>(x: &[T], cin: usize, h: usize, w: usize, k: usize, col: &mut [T]) {
    let pad = (k / 2) as isize;
    let hw = h * w;
    for ci in 0..cin {
        let src = &x[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            let oy = ky as isize - pad;
            for kx in 0..k {
                let ox = kx as isize - pad;
                let row = (ci * k + ky) * k + kx;
                let dst = &mut col[row * hw..(row + 1) * hw];
                let x_lo = (-ox).max(0) as usize;
                let x_hi = (w as isize - ox).min(w as isize).max(0) as usize;
                for y in 0..h {
                    let sy = y as isize + oy;
                    let drow = &mut dst[y * w..(y + 1) * w];
                    if sy < 0 || sy >= h as isize || x_lo >= x_hi {
                        drow.fill(T::zero());
                        continue;
                    }
                    let srow = &src[sy as usize * w..(sy as usize + 1) * w];
                    drow[..x_lo].fill(T::zero());
                    let s0 = (x_lo as isize + ox) as usize;
                    drow[x_lo..x_hi].copy_from_slice(&srow[s0..s0 + (x_hi - x_lo)]);
                    drow[x_hi..].fill(T::zero());
                }
            }
        }
    }
}

fn col2im<T: Real>(col: &[T], cin: usize, h: usize, w: usize, k: usize, dx: &mut [T]) {
    let pad = (k / 2) as isize;
    let hw = h * w;
    for ci in 0..cin {
        let dst = &mut dx[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            let oy = ky as isize - pad;
            for kx in 0..k {
                let ox = kx as isize - pad;
                let row = (ci * k + ky) * k + kx;
                let src = &col[row * hw..(row + 1) * hw];
                let x_lo = (-ox).max(0) as usize;
                let x_hi = (w as isize - ox).min(w as isize).max(0) as usize;
                if x_lo >= x_hi {
                    continue;
                }
                for y in 0..h {
                    let sy = y as isize + oy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let s0 = (x_lo as isize + ox) as usize;
                    let drow = &mut dst[sy as usize * w + s0..sy as usize * w + s0 + (x_hi - x_lo)];
                    let crow = &src[y * w + x_lo..y * w + x_hi];
                    for (d, c) in drow.iter_mut().zip(crow) {
                        *d += *c;
                    }
                }
            }
        }
    }
}

/// `weight` is `[cout, cin, k, k]`.
pub fn conv2d_forward<T: Real>(
    x: &Tensor<T>,
    weight: &[T],
    bias: Option<&[T]>,
    cout: usize,
    k: usize,
) -> Tensor<T> {
    let (cin, h, w) = (x.c, x.h, x.w);
    let hw = h * w;
    let kk = cin * k * k;
    assert_eq!(weight.len(), cout * kk, "conv weight shape");
    let mut y = Tensor::zeros(x.n, cout, h, w);
    let mut col = if k == 1 { Vec::new() } else { vec![T::zero(); kk * hw] };
    for i in 0..x.n {
        let xs = x.sample(i);
        let cols: &[T] = if k == 1 {
            xs
        } else {
            im2col(xs, cin, h, w, k, &mut col);
            &col
        };
        let ys = y.sample_mut(i);
        if let Some(b) = bias {
            for (co, bv) in b.iter().enumerate() {
                ys[co * hw..(co + 1) * hw].fill(*bv);
            }
            gemm(false, false, cout, hw, kk, T::one(), weight, cols, T::one(), ys);
        } else {
            gemm(false, false, cout, hw, kk, T::one(), weight, cols, T::zero(), ys);
        }
    }
    y
}

/// Accumulates weight/bias gradients; returns the input gradient when asked.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward<T: Real>(
    x: &Tensor<T>,
    weight: &[T],
    cout: usize,
    k: usize,
    dy: &Tensor<T>,
    dweight: &mut [T],
    dbias: Option<&mut [T]>,
    need_dx: bool,
) -> Option<Tensor<T>> {
    let (cin, h, w) = (x.c, x.h, x.w);
    let hw = h * w;
    let kk = cin * k * k;
    let mut col = if k == 1 { Vec::new() } else { vec![T::zero(); kk * hw] };
    let mut dcol = if k == 1 || !need_dx { Vec::new() } else { vec![T::zero(); kk * hw] };
    let mut dx = if need_dx { Some(x.zeros_like()) } else { None };
    if let Some(db) = dbias {
        for i in 0..x.n {
            let dys = dy.sample(i);
            for (co, d) in db.iter_mut().enumerate() {
                *d += dys[co * hw..(co + 1) * hw].iter().copied().sum::<T>();
            }
        }
    }
    for i in 0..x.n {
        let xs = x.sample(i);
        let dys = dy.sample(i);
        let cols: &[T] = if k == 1 {
            xs
        } else {
            im2col(xs, cin, h, w, k, &mut col);
            &col
        };
        // dW[cout×kk] += dY[cout×hw] · colᵀ[hw×kk]
        gemm(false, true, cout, kk, hw, T::one(), dys, cols, T::one(), dweight);
        if let Some(dx) = dx.as_mut() {
            let dxs = dx.sample_mut(i);
            if k == 1 {
                gemm(true, false, kk, hw, cout, T::one(), weight, dys, T::zero(), dxs);
            } else {
                gemm(true, false, kk, hw, cout, T::one(), weight, dys, T::zero(), &mut dcol);
                col2im(&dcol, cin, h, w, k, dxs);
            }
        }
    }
    dx
}

// ---------------------------------------------------------------------------
// Batch normalization
// ---------------------------------------------------------------------------

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Debug)]
pub struct BnCache<T> {
    pub xhat: Tensor<T>,
    pub inv_std: Vec<T>,
}

/// Batch statistics produced by a training-mode forward pass.
#[derive(Clone, Debug)]
pub struct BnBatchStats<T> {
    pub mean: Vec<T>,
    pub var_unbiased: Vec<T>,
}

pub fn batchnorm_forward_train<T: Real>(
    x: &Tensor<T>,
    gamma: &[T],
    beta: &[T],
) -> (Tensor<T>, BnCache<T>, BnBatchStats<T>) {
    let (n, c, p) = (x.n, x.c, x.plane());
    let count = T::from_usize(n * p).unwrap();
    let eps = T::lit(BN_EPS);
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    for ch in 0..c {
        let mut s = T::zero();
        for i in 0..n {
            s += x.channel(i, ch).iter().copied().sum::<T>();
        }
        let m = s / count;
        let mut v = T::zero();
        for i in 0..n {
            for &val in x.channel(i, ch) {
                let d = val - m;
                v += d * d;
            }
        }
        mean[ch] = m;
        var[ch] = v / count;
    }
    let inv_std: Vec<T> = var.iter().map(|v| T::one() / (*v + eps).sqrt()).collect();
    let mut xhat = x.zeros_like();
    let mut y = x.zeros_like();
    for i in 0..n {
        for ch in 0..c {
            let off = (i * c + ch) * p;
            let (m, is, g, b) = (mean[ch], inv_std[ch], gamma[ch], beta[ch]);
            for j in off..off + p {
                let xh = (x.data[j] - m) * is;
                xhat.data[j] = xh;
                y.data[j] = g * xh + b;
            }
        }
    }
    let total = n * p;
    let var_unbiased = if total > 1 {
        let corr = T::from_usize(total).unwrap() / T::from_usize(total - 1).unwrap();
        var.iter().map(|v| *v * corr).collect()
    } else {
        var.clone()
    };
    (y, BnCache { xhat, inv_std }, BnBatchStats { mean, var_unbiased })
}

pub fn batchnorm_forward_eval<T: Real>(
    x: &Tensor<T>,
    gamma: &[T],
    beta: &[T],
    running_mean: &[T],
    running_var: &[T],
) -> Tensor<T> {
    let (n, c, p) = (x.n, x.c, x.plane());
    let eps = T::lit(BN_EPS);
    let mut y = x.zeros_like();
    for ch in 0..c {
        let scale = gamma[ch] / (running_var[ch] + eps).sqrt();
        let shift = beta[ch] - running_mean[ch] * scale;
        for i in 0..n {
            let off = (i * c + ch) * p;
            for j in off..off + p {
                y.data[j] = x.data[j] * scale + shift;
            }
        }
    }
    y
}

pub fn batchnorm_backward<T: Real>(
    dy: &Tensor<T>,
    cache: &BnCache<T>,
    gamma: &[T],
    dgamma: &mut [T],
    dbeta: &mut [T],
) -> Tensor<T> {
    let (n, c, p) = (dy.n, dy.c, dy.plane());
    let count = T::from_usize(n * p).unwrap();
    let mut dx = dy.zeros_like();
    for ch in 0..c {
        let mut sum_dy = T::zero();
        let mut sum_dy_xhat = T::zero();
        for i in 0..n {
            let off = (i * c + ch) * p;
            for j in off..off + p {
                sum_dy += dy.data[j];
                sum_dy_xhat += dy.data[j] * cache.xhat.data[j];
            }
        }
        dgamma[ch] += sum_dy_xhat;
        dbeta[ch] += sum_dy;
        let k = gamma[ch] * cache.inv_std[ch] / count;
        for i in 0..n {
            let off = (i * c + ch) * p;
            for j in off..off + p {
                dx.data[j] = k * (count * dy.data[j] - sum_dy - cache.xhat.data[j] * sum_dy_xhat);
            }
        }
    }
    dx
}

// ---------------------------------------------------------------------------
// Pointwise and resampling
// ---------------------------------------------------------------------------

pub fn relu_inplace<T: Real>(x: &mut Tensor<T>) {
    for v in &mut x.data {
        if *v < T::zero() {
            *v = T::zero();
        }
    }
}

/// Gradient of a rectifier given its *output*.
pub fn relu_backward_inplace<T: Real>(dy: &mut Tensor<T>, y: &Tensor<T>) {
    for (d, v) in dy.data.iter_mut().zip(&y.data) {
        if *v <= T::zero() {
            *d = T::zero();
        }
    }
}

pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// 2×2 max pooling, stride 2. Returns argmax offsets within each window.
pub fn maxpool2_forward<T: Real>(x: &Tensor<T>) -> (Tensor<T>, Vec<u8>) {
    let (oh, ow) = (x.h / 2, x.w / 2);
    let mut y = Tensor::zeros(x.n, x.c, oh, ow);
    let mut arg = vec![0u8; y.data.len()];
    let planes = x.n * x.c;
    for pl in 0..planes {
        let src = &x.data[pl * x.plane()..(pl + 1) * x.plane()];
        let base = pl * oh * ow;
        for oy in 0..oh {
            for ox in 0..ow {
                let i0 = 2 * oy * x.w + 2 * ox;
                let cand = [src[i0], src[i0 + 1], src[i0 + x.w], src[i0 + x.w + 1]];
                let mut best = 0;
                for (j, v) in cand.iter().enumerate().skip(1) {
                    if *v > cand[best] {
                        best = j;
                    }
                }
                y.data[base + oy * ow + ox] = cand[best];
                arg[base + oy * ow + ox] = best as u8;
            }
        }
    }
    (y, arg)
}

pub fn maxpool2_backward<T: Real>(dy: &Tensor<T>, arg: &[u8], h: usize, w: usize) -> Tensor<T> {
    let mut dx = Tensor::zeros(dy.n, dy.c, h, w);
    let (oh, ow) = (dy.h, dy.w);
    for pl in 0..dy.n * dy.c {
        let base = pl * oh * ow;
        let dst = &mut dx.data[pl * h * w..(pl + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let a = arg[base + oy * ow + ox] as usize;
                let idx = (2 * oy + a / 2) * w + 2 * ox + a % 2;
                dst[idx] += dy.data[base + oy * ow + ox];
            }
        }
    }
    dx
}

/// 2×2 average pooling, stride 2.
pub fn avgpool2_forward<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let (oh, ow) = (x.h / 2, x.w / 2);
    let quarter = T::lit(0.25);
    let mut y = Tensor::zeros(x.n, x.c, oh, ow);
    for pl in 0..x.n * x.c {
        let src = &x.data[pl * x.plane()..(pl + 1) * x.plane()];
        let dst = &mut y.data[pl * oh * ow..(pl + 1) * oh * ow];
        for oy in 0..oh {
            for ox in 0..ow {
                let i0 = 2 * oy * x.w + 2 * ox;
                dst[oy * ow + ox] = (src[i0] + src[i0 + 1] + src[i0 + x.w] + src[i0 + x.w + 1]) * quarter;
            }
        }
    }
    y
}

pub fn avgpool2_backward<T: Real>(dy: &Tensor<T>, h: usize, w: usize) -> Tensor<T> {
    let quarter = T::lit(0.25);
    let mut dx = Tensor::zeros(dy.n, dy.c, h, w);
    let (oh, ow) = (dy.h, dy.w);
    for pl in 0..dy.n * dy.c {
        let src = &dy.data[pl * oh * ow..(pl + 1) * oh * ow];
        let dst = &mut dx.data[pl * h * w..(pl + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let g = src[oy * ow + ox] * quarter;
                let i0 = 2 * oy * w + 2 * ox;
                dst[i0] = g;
                dst[i0 + 1] = g;
                dst[i0 + w] = g;
                dst[i0 + w + 1] = g;
            }
        }
    }
    dx
}

/// Nearest-neighbour 2× upsampling.
pub fn upsample2_forward<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let (oh, ow) = (x.h * 2, x.w * 2);
    let mut y = Tensor::zeros(x.n, x.c, oh, ow);
    for pl in 0..x.n * x.c {
        let src = &x.data[pl * x.plane()..(pl + 1) * x.plane()];
        let dst = &mut y.data[pl * oh * ow..(pl + 1) * oh * ow];
        for oy in 0..oh {
            let srow = &src[(oy / 2) * x.w..(oy / 2 + 1) * x.w];
            let drow = &mut dst[oy * ow..(oy + 1) * ow];
            for (ox, d) in drow.iter_mut().enumerate() {
                *d = srow[ox / 2];
            }
        }
    }
    y
}

pub fn upsample2_backward<T: Real>(dy: &Tensor<T>) -> Tensor<T> {
    let (h, w) = (dy.h / 2, dy.w / 2);
    let mut dx = Tensor::zeros(dy.n, dy.c, h, w);
    for pl in 0..dy.n * dy.c {
        let src = &dy.data[pl * dy.plane()..(pl + 1) * dy.plane()];
        let dst = &mut dx.data[pl * h * w..(pl + 1) * h * w];
        for oy in 0..dy.h {
            for ox in 0..dy.w {
                dst[(oy / 2) * w + ox / 2] += src[oy * dy.w + ox];
            }
        }
    }
    dx
}

/// Channel concatenation `[a, b]`.
pub fn concat_channels<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    assert_eq!((a.n, a.h, a.w), (b.n, b.h, b.w), "concat spatial mismatch");
    let mut y = Tensor::zeros(a.n, a.c + b.c, a.h, a.w);
    let (la, lb) = (a.sample_len(), b.sample_len());
    for i in 0..a.n {
        let dst = y.sample_mut(i);
        dst[..la].copy_from_slice(a.sample(i));
        dst[la..la + lb].copy_from_slice(b.sample(i));
    }
    y
}

pub fn split_channels<T: Real>(dy: &Tensor<T>, ca: usize) -> (Tensor<T>, Tensor<T>) {
    let cb = dy.c - ca;
    let mut a = Tensor::zeros(dy.n, ca, dy.h, dy.w);
    let mut b = Tensor::zeros(dy.n, cb, dy.h, dy.w);
    let la = a.sample_len();
    for i in 0..dy.n {
        let src = dy.sample(i);
        a.sample_mut(i).copy_from_slice(&src[..la]);
        b.sample_mut(i).copy_from_slice(&src[la..]);
    }
    (a, b)
}

// ---------------------------------------------------------------------------
// Squeeze-and-excitation
// ---------------------------------------------------------------------------

/// Weights of one squeeze-and-excitation gate: `fc1: c → hidden`, `fc2: hidden → c`.
#[derive(Clone, Copy, Debug)]
pub struct SeWeights<'a, T> {
    pub fc1_w: &'a [T],
    pub fc1_b: &'a [T],
    pub fc2_w: &'a [T],
    pub fc2_b: &'a [T],
    pub hidden: usize,
}

#[derive(Clone, Debug)]
pub struct SeCache<T> {
    pub squeezed: Vec<T>,
    pub hidden_act: Vec<T>,
    pub gates: Vec<T>,
}

/// Global average per channel, `n×c`.
pub fn se_squeeze<T: Real>(x: &Tensor<T>) -> Vec<T> {
    let inv = T::one() / T::from_usize(x.plane()).unwrap();
    let mut s = vec![T::zero(); x.n * x.c];
    for i in 0..x.n {
        for ch in 0..x.c {
            s[i * x.c + ch] = x.channel(i, ch).iter().copied().sum::<T>() * inv;
        }
    }
    s
}

/// Excitation: the two fully connected maps with a rectifier in between and a
/// logistic squashing after. Returns (hidden activations, gates), each `n×_`.
pub fn se_excite<T: Real>(squeezed: &[T], n: usize, c: usize, wts: &SeWeights<'_, T>) -> (Vec<T>, Vec<T>) {
    let hd = wts.hidden;
    let mut hidden = vec![T::zero(); n * hd];
    let mut gates = vec![T::zero(); n * c];
    for i in 0..n {
        let s = &squeezed[i * c..(i + 1) * c];
        for j in 0..hd {
            let row = &wts.fc1_w[j * c..(j + 1) * c];
            let z = wts.fc1_b[j] + row.iter().zip(s).map(|(a, b)| *a * *b).sum::<T>();
            hidden[i * hd + j] = z.max(T::zero());
        }
        let hrow = &hidden[i * hd..(i + 1) * hd];
        for ch in 0..c {
            let row = &wts.fc2_w[ch * hd..(ch + 1) * hd];
            let z = wts.fc2_b[ch] + row.iter().zip(hrow).map(|(a, b)| *a * *b).sum::<T>();
            gates[i * c + ch] = sigmoid(z);
        }
    }
    (hidden, gates)
}

/// Rescales every channel plane by its gate.
pub fn se_apply_gates<T: Real>(x: &Tensor<T>, gates: &[T]) -> Tensor<T> {
    let mut y = x.clone();
    let p = x.plane();
    for (pl, g) in gates.iter().enumerate() {
        for v in &mut y.data[pl * p..(pl + 1) * p] {
            *v *= *g;
        }
    }
    y
}

pub fn se_forward<T: Real>(x: &Tensor<T>, wts: &SeWeights<'_, T>) -> (Tensor<T>, SeCache<T>) {
    let squeezed = se_squeeze(x);
    let (hidden_act, gates) = se_excite(&squeezed, x.n, x.c, wts);
    let y = se_apply_gates(x, &gates);
    (y, SeCache { squeezed, hidden_act, gates })
}

/// Gradient slices for one SE gate, in the same layout as [`SeWeights`].
pub struct SeGrads<'a, T> {
    pub fc1_w: &'a mut [T],
    pub fc1_b: &'a mut [T],
    pub fc2_w: &'a mut [T],
    pub fc2_b: &'a mut [T],
}

pub fn se_backward<T: Real>(
    x: &Tensor<T>,
    dy: &Tensor<T>,
    cache: &SeCache<T>,
    wts: &SeWeights<'_, T>,
    grads: SeGrads<'_, T>,
) -> Tensor<T> {
    let (n, c, p) = (x.n, x.c, x.plane());
    let hd = wts.hidden;
    let inv = T::one() / T::from_usize(p).unwrap();
    let mut dx = dy.clone();
    for i in 0..n {
        let mut dz2 = vec![T::zero(); c];
        for ch in 0..c {
            let pl = i * c + ch;
            let g = cache.gates[pl];
            let xs = &x.data[pl * p..(pl + 1) * p];
            let ds = &dy.data[pl * p..(pl + 1) * p];
            let dg: T = xs.iter().zip(ds).map(|(a, b)| *a * *b).sum();
            dz2[ch] = dg * g * (T::one() - g);
            for v in &mut dx.data[pl * p..(pl + 1) * p] {
                *v *= g;
            }
        }
        let hrow = &cache.hidden_act[i * hd..(i + 1) * hd];
        let mut dh = vec![T::zero(); hd];
        for ch in 0..c {
            grads.fc2_b[ch] += dz2[ch];
            for j in 0..hd {
                grads.fc2_w[ch * hd + j] += dz2[ch] * hrow[j];
                dh[j] += wts.fc2_w[ch * hd + j] * dz2[ch];
            }
        }
        let s = &cache.squeezed[i * c..(i + 1) * c];
        let mut dsq = vec![T::zero(); c];
        for j in 0..hd {
            if hrow[j] <= T::zero() {
                continue;
            }
            let dz1 = dh[j];
            grads.fc1_b[j] += dz1;
            for ch in 0..c {
                grads.fc1_w[j * c + ch] += dz1 * s[ch];
                dsq[ch] += wts.fc1_w[j * c + ch] * dz1;
            }
        }
        for ch in 0..c {
            let add = dsq[ch] * inv;
            let pl = i * c + ch;
            for v in &mut dx.data[pl * p..(pl + 1) * p] {
                *v += add;
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(x: &Tensor<f64>, w: &[f64], b: &[f64], cout: usize, k: usize) -> Tensor<f64> {
        let pad = (k / 2) as isize;
        let mut y = Tensor::zeros(x.n, cout, x.h, x.w);
        for i in 0..x.n {
            for co in 0..cout {
                for yy in 0..x.h {
                    for xx in 0..x.w {
                        let mut s = b[co];
                        for ci in 0..x.c {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let sy = yy as isize + ky as isize - pad;
                                    let sx = xx as isize + kx as isize - pad;
                                    if sy < 0 || sx < 0 || sy >= x.h as isize || sx >= x.w as isize {
                                        continue;
                                    }
                                    let xv = x.data[((i * x.c + ci) * x.h + sy as usize) * x.w + sx as usize];
                                    s += w[((co * x.c + ci) * k + ky) * k + kx] * xv;
                                }
                            }
                        }
                        y.data[((i * cout + co) * x.h + yy) * x.w + xx] = s;
                    }
                }
            }
        }
        y
    }

    fn seq(n: usize, scale: f64) -> Vec<f64> {
        (0..n).map(|i| ((i * 37 % 23) as f64 - 11.0) * scale).collect()
    }

    #[test]
    fn conv_matches_direct_loops() {
        for k in [1, 3] {
            let x = Tensor::from_vec(2, 3, 5, 6, seq(180, 0.1));
            let w = seq(4 * 3 * k * k, 0.05);
            let b = vec![0.1, -0.2, 0.3, 0.0];
            let fast = conv2d_forward(&x, &w, Some(&b), 4, k);
            let slow = naive_conv(&x, &w, &b, 4, k);
            for (a, s) in fast.data.iter().zip(&slow.data) {
                assert!((a - s).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_input_gradient_is_adjoint() {
        // <conv(x), dy> == <x, conv_backward(dy)> for a bias-free conv.
        let x = Tensor::from_vec(1, 2, 4, 5, seq(40, 0.3));
        let w = seq(3 * 2 * 9, 0.07);
        let dy = Tensor::from_vec(1, 3, 4, 5, seq(60, 0.11));
        let y = conv2d_forward(&x, &w, None, 3, 3);
        let mut dw = vec![0.0; w.len()];
        let dx = conv2d_backward(&x, &w, 3, 3, &dy, &mut dw, None, true).unwrap();
        let lhs: f64 = y.data.iter().zip(&dy.data).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data.iter().zip(&dx.data).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
        // linear in w as well
        let rhs_w: f64 = w.iter().zip(&dw).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs_w).abs() < 1e-10);
    }

    #[test]
    fn maxpool_and_upsample_roundtrip_shapes() {
        let x = Tensor::from_vec(1, 1, 4, 4, seq(16, 1.0));
        let (y, arg) = maxpool2_forward(&x);
        assert_eq!(y.dims(), [1, 1, 2, 2]);
        let dx = maxpool2_backward(&Tensor::from_vec(1, 1, 2, 2, vec![1.0; 4]), &arg, 4, 4);
        assert_eq!(dx.data.iter().sum::<f64>(), 4.0);
        let up = upsample2_forward(&y);
        assert_eq!(up.dims(), [1, 1, 4, 4]);
        assert_eq!(upsample2_backward(&up).data, y.data.iter().map(|v| v * 4.0).collect::<Vec<_>>());
    }

    #[test]
    fn batchnorm_train_output_is_standardized() {
        let x = Tensor::from_vec(2, 2, 3, 3, seq(36, 0.5));
        let (y, _, stats) = batchnorm_forward_train(&x, &[1.0, 1.0], &[0.0, 0.0]);
        for ch in 0..2 {
            let vals: Vec<f64> = (0..2).flat_map(|i| y.channel(i, ch).to_vec()).collect();
            let m = vals.iter().sum::<f64>() / 18.0;
            assert!(m.abs() < 1e-12);
            assert!(stats.var_unbiased[ch] > 0.0);
        }
    }

    #[test]
    fn se_gate_identity_and_zero() {
        let x = Tensor::from_vec(1, 2, 2, 2, seq(8, 0.4));
        assert_eq!(se_apply_gates(&x, &[1.0, 1.0]), x);
        let w1 = [0.5, -0.3];
        let w2 = [0.2, -0.7];
        let wts = SeWeights { fc1_w: &w1, fc1_b: &[0.0], fc2_w: &w2, fc2_b: &[0.0, 0.0], hidden: 1 };
        let zero = Tensor::<f64>::zeros(1, 2, 2, 2);
        let (y, cache) = se_forward(&zero, &wts);
        assert!(y.data.iter().all(|v| *v == 0.0));
        assert!(cache.gates.iter().all(|g| *g > 0.0 && *g < 1.0));
    }

    #[test]
    fn se_two_channel_hand_computation() {
        let x = Tensor::<f64>::from_vec(1, 2, 2, 2, vec![1.0, 2.0, 3.0, 4.0, 0.0, 0.0, 2.0, 2.0]);
        let wts = SeWeights { fc1_w: &[0.5, -0.3], fc1_b: &[0.1], fc2_w: &[0.2, -0.7], fc2_b: &[0.0, 0.5], hidden: 1 };
        let (y, cache) = se_forward(&x, &wts);
        let (g0, g1): (f64, f64) = (0.5523079095743253, 0.44151888756183866);
        assert!((cache.gates[0] - g0).abs() < 1e-12 && (cache.gates[1] - g1).abs() < 1e-12);
        let want = [g0, 2.0 * g0, 3.0 * g0, 4.0 * g0, 0.0, 0.0, 2.0 * g1, 2.0 * g1];
        for (a, b) in y.data.iter().zip(want) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
