//! Per-sample numeric kernels shared by inference and training.

use crate::graph::{Conv2d, Pool};

/// `c = op(a) * op(b) (+ c)` for row-major operands, where `op` optionally
/// transposes. `a` is (m x k) after `op`, `b` is (k x n), `c` is (m x n).
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    a_trans: bool,
    b: &[f32],
    b_trans: bool,
    c: &mut [f32],
    accumulate: bool,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the asserts above bound every index the strides can reach.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ConvGeom {
    pub in_c: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn new(conv: &Conv2d, in_h: usize, in_w: usize) -> Self {
        let (kh, kw) = conv.kernel();
        let (out_h, out_w) = conv
            .output_hw(in_h, in_w)
            .expect("validated conv geometry");
        ConvGeom {
            in_c: conv.in_channels(),
            in_h,
            in_w,
            kh,
            kw,
            stride: conv.stride,
            pad: conv.padding,
            out_h,
            out_w,
        }
    }

    pub fn patch(&self) -> usize {
        self.in_c * self.kh * self.kw
    }

    pub fn out_plane(&self) -> usize {
        self.out_h * self.out_w
    }

    pub fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Unfold one (C, H, W) sample into a (C*kh*kw) x (out_h*out_w) matrix.
pub fn im2col(x: &[f32], g: &ConvGeom, cols: &mut [f32]) {
    im2col_ld(x, g, cols, g.out_plane());
}

/// Output columns `ox` whose input column `ox * stride + kx - pad` lies in
/// `0..in_w`.
fn valid_cols(g: &ConvGeom, kx: usize) -> (usize, usize) {
    let lo = g.pad.saturating_sub(kx).div_ceil(g.stride);
    let hi = if g.in_w + g.pad > kx {
        ((g.in_w + g.pad - kx - 1) / g.stride + 1).min(g.out_w)
    } else {
        0
    };
    (lo.min(hi), hi)
}

/// [`im2col`] into a matrix whose rows are `ld` apart.
fn im2col_ld(x: &[f32], g: &ConvGeom, cols: &mut [f32], ld: usize) {
    let p = g.out_plane();
    let mut row = 0;
    for c in 0..g.in_c {
        let plane = &x[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let (lo, hi) = valid_cols(g, kx);
                let dst = &mut cols[row * ld..row * ld + p];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    if iy < 0 || iy >= g.in_h as isize || lo >= hi {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                    line[..lo].fill(0.0);
                    line[hi..].fill(0.0);
                    let first = lo * g.stride + kx - g.pad;
                    if g.stride == 1 {
                        line[lo..hi].copy_from_slice(&src[first..first + hi - lo]);
                    } else {
                        for (v, s) in line[lo..hi].iter_mut().zip(src[first..].iter().step_by(g.stride)) {
                            *v = *s;
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add columns back into a (C, H, W) sample.
pub fn col2im(cols: &[f32], g: &ConvGeom, dx: &mut [f32]) {
    col2im_ld(cols, g, dx, g.out_plane());
}

fn col2im_ld(cols: &[f32], g: &ConvGeom, dx: &mut [f32], ld: usize) {
    let p = g.out_plane();
    let mut row = 0;
    for c in 0..g.in_c {
        let plane = &mut dx[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let (lo, hi) = valid_cols(g, kx);
                let src = &cols[row * ld..row * ld + p];
                row += 1;
                if lo >= hi {
                    continue;
                }
                let first = lo * g.stride + kx - g.pad;
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.in_h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                    let line = &src[oy * g.out_w + lo..oy * g.out_w + hi];
                    for (d, s) in dst[first..].iter_mut().step_by(g.stride).zip(line) {
                        *d += s;
                    }
                }
            }
        }
    }
}

/// Convolve one sample. `cols` is scratch of at least `patch * out_plane`.
pub fn conv_forward(conv: &Conv2d, g: &ConvGeom, x: &[f32], cols: &mut Vec<f32>, y: &mut [f32]) {
    let o = conv.out_channels();
    let (k, p) = (g.patch(), g.out_plane());
    let w = conv.weight.data();
    if g.is_pointwise() {
        gemm(o, k, p, w, false, x, false, y, false);
    } else {
        cols.resize(k * p, 0.0);
        im2col(x, g, cols);
        gemm(o, k, p, w, false, cols, false, y, false);
    }
    if let Some(bias) = &conv.bias {
        for (ch, b) in bias.iter().enumerate() {
            for v in &mut y[ch * p..(ch + 1) * p] {
                *v += b;
            }
        }
    }
}

/// Upper bound on the unfolded-patch scratch, in floats, per batched call.
const COLS_LIMIT: usize = 1 << 20;

/// Scratch reused across batched convolution calls.
#[derive(Debug, Default)]
pub struct ConvScratch {
    cols: Vec<f32>,
    tmp: Vec<f32>,
}

/// Samples per batched gemm: as many as fit in [`COLS_LIMIT`].
fn chunk_len(g: &ConvGeom, n: usize) -> usize {
    (COLS_LIMIT / (g.patch() * g.out_plane()).max(1)).clamp(1, n.max(1))
}

/// Convolve `n` samples, unfolding several at once so each gemm is wide.
pub fn conv_forward_batch(
    conv: &Conv2d,
    g: &ConvGeom,
    x: &[f32],
    n: usize,
    s: &mut ConvScratch,
    y: &mut [f32],
) {
    let o = conv.out_channels();
    let (k, p) = (g.patch(), g.out_plane());
    let (in_len, out_len) = (g.in_c * g.in_h * g.in_w, o * p);
    let chunk = chunk_len(g, n);
    for start in (0..n).step_by(chunk) {
        let nb = chunk.min(n - start);
        let ld = nb * p;
        s.cols.resize(k * ld, 0.0);
        s.tmp.resize(o * ld, 0.0);
        for b in 0..nb {
            let xs = &x[(start + b) * in_len..(start + b + 1) * in_len];
            im2col_ld(xs, g, &mut s.cols[b * p..], ld);
        }
        gemm(o, k, ld, conv.weight.data(), false, &s.cols, false, &mut s.tmp, false);
        for b in 0..nb {
            let ys = &mut y[(start + b) * out_len..(start + b + 1) * out_len];
            for ch in 0..o {
                let src = &s.tmp[ch * ld + b * p..ch * ld + (b + 1) * p];
                let dst = &mut ys[ch * p..(ch + 1) * p];
                match &conv.bias {
                    Some(bias) => {
                        for (d, v) in dst.iter_mut().zip(src) {
                            *d = v + bias[ch];
                        }
                    }
                    None => dst.copy_from_slice(src),
                }
            }
        }
    }
}

/// Gradients of a batched convolution: accumulates into `dw` and `db`,
/// overwrites `dx` when given.
#[allow(clippy::too_many_arguments)]
pub fn conv_backward_batch(
    conv: &Conv2d,
    g: &ConvGeom,
    x: &[f32],
    dy: &[f32],
    n: usize,
    s: &mut ConvScratch,
    dw: &mut [f32],
    mut db: Option<&mut [f32]>,
    mut dx: Option<&mut [f32]>,
) {
    let o = conv.out_channels();
    let (k, p) = (g.patch(), g.out_plane());
    let (in_len, out_len) = (g.in_c * g.in_h * g.in_w, o * p);
    if let Some(d) = dx.as_deref_mut() {
        d[..n * in_len].fill(0.0);
    }
    let chunk = chunk_len(g, n);
    for start in (0..n).step_by(chunk) {
        let nb = chunk.min(n - start);
        let ld = nb * p;
        s.cols.resize(k * ld, 0.0);
        s.tmp.resize(o * ld, 0.0);
        for b in 0..nb {
            let xs = &x[(start + b) * in_len..(start + b + 1) * in_len];
            im2col_ld(xs, g, &mut s.cols[b * p..], ld);
            let dys = &dy[(start + b) * out_len..(start + b + 1) * out_len];
            for ch in 0..o {
                s.tmp[ch * ld + b * p..ch * ld + (b + 1) * p].copy_from_slice(&dys[ch * p..(ch + 1) * p]);
            }
        }
        // dW += dY (o x ld) * cols^T (ld x k)
        gemm(o, ld, k, &s.tmp, false, &s.cols, true, dw, true);
        if let Some(db) = db.as_deref_mut() {
            for (ch, v) in db.iter_mut().enumerate() {
                *v += s.tmp[ch * ld..(ch + 1) * ld].iter().sum::<f32>();
            }
        }
        if let Some(d) = dx.as_deref_mut() {
            // dcols = W^T (k x o) * dY (o x ld), reusing the patch buffer.
            gemm(k, o, ld, conv.weight.data(), true, &s.tmp, false, &mut s.cols, false);
            for b in 0..nb {
                let dxs = &mut d[(start + b) * in_len..(start + b + 1) * in_len];
                col2im_ld(&s.cols[b * p..], g, dxs, ld);
            }
        }
    }
}

/// Max pool one (C, H, W) sample; `argmax` receives the flat input index of
/// each output's winner (first maximum wins).
pub fn max_pool(
    pool: &Pool,
    c: usize,
    h: usize,
    w: usize,
    x: &[f32],
    y: &mut [f32],
    mut argmax: Option<&mut [u32]>,
) {
    let (oh, ow) = pool.output_hw(h, w).expect("validated pool geometry");
    for ch in 0..c {
        let base = ch * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = f32::NEG_INFINITY;
                let mut at = base;
                for ky in 0..pool.kernel {
                    for kx in 0..pool.kernel {
                        let idx = base + (oy * pool.stride + ky) * w + ox * pool.stride + kx;
                        if x[idx] > best {
                            best = x[idx];
                            at = idx;
                        }
                    }
                }
                let o = (ch * oh + oy) * ow + ox;
                y[o] = best;
                if let Some(a) = argmax.as_deref_mut() {
                    a[o] = at as u32;
                }
            }
        }
    }
}

pub fn avg_pool(pool: &Pool, c: usize, h: usize, w: usize, x: &[f32], y: &mut [f32]) {
    let (oh, ow) = pool.output_hw(h, w).expect("validated pool geometry");
    let norm = 1.0 / (pool.kernel * pool.kernel) as f32;
    for ch in 0..c {
        let base = ch * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut s = 0.0;
                for ky in 0..pool.kernel {
                    let row = base + (oy * pool.stride + ky) * w + ox * pool.stride;
                    s += x[row..row + pool.kernel].iter().sum::<f32>();
                }
                y[(ch * oh + oy) * ow + ox] = s * norm;
            }
        }
    }
}

pub fn avg_pool_backward(pool: &Pool, c: usize, h: usize, w: usize, dy: &[f32], dx: &mut [f32]) {
    let (oh, ow) = pool.output_hw(h, w).expect("validated pool geometry");
    let norm = 1.0 / (pool.kernel * pool.kernel) as f32;
    for ch in 0..c {
        let base = ch * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let g = dy[(ch * oh + oy) * ow + ox] * norm;
                for ky in 0..pool.kernel {
                    let row = base + (oy * pool.stride + ky) * w + ox * pool.stride;
                    for v in &mut dx[row..row + pool.kernel] {
                        *v += g;
                    }
                }
            }
        }
    }
}
