//! Raw numeric kernels behind the differentiable ops.
//!
//! Everything here works on flat row-major slices. Layouts are channels-last:
//! images are `(batch, height, width, channels)`, sequences are
//! `(batch, time, channels)`.

use crate::tensor::strides_of;

/// `c = alpha * a·b + beta * c` for row-major operands with arbitrary strides.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    debug_assert!(c.len() >= m * n);
    debug_assert!(k == 0 || a.len() > (m - 1) * rsa + (k - 1) * csa);
    debug_assert!(k == 0 || b.len() > (k - 1) * rsb + (n - 1) * csb);
    // SAFETY: the asserts above bound every index dgemm touches.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Numpy-style broadcast of two shapes, or `None` when incompatible.
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() {
            1
        } else {
            a[i - (rank - a.len())]
        };
        let db = if i < rank - b.len() {
            1
        } else {
            b[i - (rank - b.len())]
        };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// For every linear index of `out_shape`, the linear index into a tensor of
/// `in_shape` that broadcasts to it.
pub(crate) fn broadcast_map(out_shape: &[usize], in_shape: &[usize]) -> Vec<usize> {
    let n: usize = out_shape.iter().product();
    let rank = out_shape.len();
    let offset = rank - in_shape.len();
    let in_strides = strides_of(in_shape);
    let mut eff = vec![0usize; rank];
    for i in 0..in_shape.len() {
        if in_shape[i] != 1 {
            eff[offset + i] = in_strides[i];
        }
    }
    let mut map = Vec::with_capacity(n);
    let mut idx = vec![0usize; rank];
    let mut lin = 0usize;
    for _ in 0..n {
        map.push(lin);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            lin += eff[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            lin -= eff[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    map
}

/// Sum a gradient of `out_shape` down to `in_shape` (inverse of broadcasting).
pub(crate) fn reduce_to(grad: &[f64], out_shape: &[usize], in_shape: &[usize]) -> Vec<f64> {
    if out_shape == in_shape {
        return grad.to_vec();
    }
    let n_in: usize = in_shape.iter().product();
    let mut acc = vec![0.0; n_in];
    for (g, j) in grad.iter().zip(broadcast_map(out_shape, in_shape)) {
        acc[j] += g;
    }
    acc
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub h: usize,
    pub w: usize,
    pub cin: usize,
    pub kh: usize,
    pub kw: usize,
    pub pad_top: usize,
    pub pad_left: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    fn patch(&self) -> usize {
        self.kh * self.kw * self.cin
    }

    fn rows(&self) -> usize {
        self.batch * self.ho * self.wo
    }
}

/// Columns `j` of a kernel row that land inside the input for output column `ow`.
fn valid_cols(g: &ConvGeom, ow: usize) -> (usize, usize) {
    let lo = g.pad_left.saturating_sub(ow);
    let hi = g.kw.min((g.w + g.pad_left).saturating_sub(ow));
    (lo, hi.max(lo))
}

/// Unfold input patches into a `(batch·ho·wo, kh·kw·cin)` matrix.
pub(crate) fn im2col(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let patch = g.patch();
    let mut cols = vec![0.0; g.rows() * patch];
    for b in 0..g.batch {
        let xb = &x[b * g.h * g.w * g.cin..];
        for oh in 0..g.ho {
            for ow in 0..g.wo {
                let row = ((b * g.ho + oh) * g.wo + ow) * patch;
                let (j0, j1) = valid_cols(g, ow);
                let len = (j1 - j0) * g.cin;
                for i in 0..g.kh {
                    let ih = oh + i;
                    if ih < g.pad_top || ih - g.pad_top >= g.h || len == 0 {
                        continue;
                    }
                    let src = ((ih - g.pad_top) * g.w + ow + j0 - g.pad_left) * g.cin;
                    let dst = row + (i * g.kw + j0) * g.cin;
                    cols[dst..dst + len].copy_from_slice(&xb[src..src + len]);
                }
            }
        }
    }
    cols
}

/// Scatter-add a patch matrix back onto the input layout.
pub(crate) fn col2im(cols: &[f64], g: &ConvGeom) -> Vec<f64> {
    let patch = g.patch();
    let mut x = vec![0.0; g.batch * g.h * g.w * g.cin];
    for b in 0..g.batch {
        let base = b * g.h * g.w * g.cin;
        for oh in 0..g.ho {
            for ow in 0..g.wo {
                let row = ((b * g.ho + oh) * g.wo + ow) * patch;
                let (j0, j1) = valid_cols(g, ow);
                let len = (j1 - j0) * g.cin;
                for i in 0..g.kh {
                    let ih = oh + i;
                    if ih < g.pad_top || ih - g.pad_top >= g.h || len == 0 {
                        continue;
                    }
                    let dst = base + ((ih - g.pad_top) * g.w + ow + j0 - g.pad_left) * g.cin;
                    let src = row + (i * g.kw + j0) * g.cin;
                    for (d, s) in x[dst..dst + len].iter_mut().zip(&cols[src..src + len]) {
                        *d += s;
                    }
                }
            }
        }
    }
    x
}

/// Convolution forward: returns `(output, cols)` where cols is kept for backward.
pub(crate) fn conv2d_forward(
    x: &[f64],
    kernel: &[f64],
    bias: Option<&[f64]>,
    g: &ConvGeom,
    cout: usize,
) -> (Vec<f64>, Vec<f64>) {
    let cols = im2col(x, g);
    let rows = g.rows();
    let patch = g.patch();
    let mut out = vec![0.0; rows * cout];
    if let Some(b) = bias {
        for r in 0..rows {
            out[r * cout..(r + 1) * cout].copy_from_slice(b);
        }
    }
    gemm(
        rows,
        patch,
        cout,
        1.0,
        &cols,
        (patch, 1),
        kernel,
        (cout, 1),
        1.0,
        &mut out,
    );
    (out, cols)
}

/// Convolution backward: `(d_input, d_kernel, d_bias)`; `d_input` is only
/// computed when `need_dx` (it is the expensive part for a first layer).
pub(crate) fn conv2d_backward(
    grad: &[f64],
    cols: &[f64],
    kernel: &[f64],
    g: &ConvGeom,
    cout: usize,
    need_dx: bool,
) -> (Option<Vec<f64>>, Vec<f64>, Vec<f64>) {
    let rows = g.rows();
    let patch = g.patch();
    let mut dk = vec![0.0; patch * cout];
    // dK = colsᵀ · dOut
    gemm(
        patch,
        rows,
        cout,
        1.0,
        cols,
        (1, patch),
        grad,
        (cout, 1),
        0.0,
        &mut dk,
    );
    let mut db = vec![0.0; cout];
    for r in 0..rows {
        for (o, d) in db.iter_mut().enumerate() {
            *d += grad[r * cout + o];
        }
    }
    if !need_dx {
        return (None, dk, db);
    }
    // dCols = dOut · Kᵀ
    let mut dcols = vec![0.0; rows * patch];
    gemm(
        rows,
        cout,
        patch,
        1.0,
        grad,
        (cout, 1),
        kernel,
        (1, cout),
        0.0,
        &mut dcols,
    );
    (Some(col2im(&dcols, g)), dk, db)
}

/// Depthwise convolution: kernel `(kh, kw, cin, mult)`, output channel `c·mult + m`.
pub(crate) fn depthwise_forward(x: &[f64], kernel: &[f64], g: &ConvGeom, mult: usize) -> Vec<f64> {
    let cout = g.cin * mult;
    let mut out = vec![0.0; g.batch * g.ho * g.wo * cout];
    for b in 0..g.batch {
        let xb = &x[b * g.h * g.w * g.cin..(b + 1) * g.h * g.w * g.cin];
        for oh in 0..g.ho {
            for ow in 0..g.wo {
                let o = &mut out[((b * g.ho + oh) * g.wo + ow) * cout..][..cout];
                for i in 0..g.kh {
                    let ih = oh + i;
                    if ih < g.pad_top || ih - g.pad_top >= g.h {
                        continue;
                    }
                    let ih = ih - g.pad_top;
                    for j in 0..g.kw {
                        let iw = ow + j;
                        if iw < g.pad_left || iw - g.pad_left >= g.w {
                            continue;
                        }
                        let iw = iw - g.pad_left;
                        let xs = &xb[(ih * g.w + iw) * g.cin..][..g.cin];
                        let ks = &kernel[(i * g.kw + j) * cout..][..cout];
                        for ((xv, kc), oc) in xs
                            .iter()
                            .zip(ks.chunks_exact(mult))
                            .zip(o.chunks_exact_mut(mult))
                        {
                            for (ov, kv) in oc.iter_mut().zip(kc) {
                                *ov += xv * kv;
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

pub(crate) fn depthwise_backward(
    grad: &[f64],
    x: &[f64],
    kernel: &[f64],
    g: &ConvGeom,
    mult: usize,
) -> (Vec<f64>, Vec<f64>) {
    let cout = g.cin * mult;
    let mut dx = vec![0.0; x.len()];
    let mut dk = vec![0.0; kernel.len()];
    for b in 0..g.batch {
        let off = b * g.h * g.w * g.cin;
        for oh in 0..g.ho {
            for ow in 0..g.wo {
                let go = &grad[((b * g.ho + oh) * g.wo + ow) * cout..][..cout];
                for i in 0..g.kh {
                    let ih = oh + i;
                    if ih < g.pad_top || ih - g.pad_top >= g.h {
                        continue;
                    }
                    let ih = ih - g.pad_top;
                    for j in 0..g.kw {
                        let iw = ow + j;
                        if iw < g.pad_left || iw - g.pad_left >= g.w {
                            continue;
                        }
                        let iw = iw - g.pad_left;
                        let xo = off + (ih * g.w + iw) * g.cin;
                        let ko = (i * g.kw + j) * cout;
                        let xs = &x[xo..xo + g.cin];
                        let dxs = &mut dx[xo..xo + g.cin];
                        let ks = &kernel[ko..ko + cout];
                        let dks = &mut dk[ko..ko + cout];
                        for ((((xv, dxv), kc), dkc), gc) in xs
                            .iter()
                            .zip(dxs.iter_mut())
                            .zip(ks.chunks_exact(mult))
                            .zip(dks.chunks_exact_mut(mult))
                            .zip(go.chunks_exact(mult))
                        {
                            let mut acc = 0.0;
                            for ((kv, dkv), gv) in kc.iter().zip(dkc.iter_mut()).zip(gc) {
                                acc += gv * kv;
                                *dkv += gv * xv;
                            }
                            *dxv += acc;
                        }
                    }
                }
            }
        }
    }
    (dx, dk)
}

/// Non-overlapping average pooling with truncation of trailing remainders.
pub(crate) fn avg_pool_forward(
    x: &[f64],
    (batch, h, w, c): (usize, usize, usize, usize),
    (ph, pw): (usize, usize),
) -> Vec<f64> {
    let (ho, wo) = (h / ph, w / pw);
    let scale = 1.0 / (ph * pw) as f64;
    let mut out = vec![0.0; batch * ho * wo * c];
    for b in 0..batch {
        for oh in 0..ho {
            for ow in 0..wo {
                let o = ((b * ho + oh) * wo + ow) * c;
                for i in 0..ph {
                    for j in 0..pw {
                        let s = ((b * h + oh * ph + i) * w + ow * pw + j) * c;
                        for k in 0..c {
                            out[o + k] += x[s + k];
                        }
                    }
                }
                for k in 0..c {
                    out[o + k] *= scale;
                }
            }
        }
    }
    out
}

pub(crate) fn avg_pool_backward(
    grad: &[f64],
    (batch, h, w, c): (usize, usize, usize, usize),
    (ph, pw): (usize, usize),
) -> Vec<f64> {
    let (ho, wo) = (h / ph, w / pw);
    let scale = 1.0 / (ph * pw) as f64;
    let mut dx = vec![0.0; batch * h * w * c];
    for b in 0..batch {
        for oh in 0..ho {
            for ow in 0..wo {
                let o = ((b * ho + oh) * wo + ow) * c;
                for i in 0..ph {
                    for j in 0..pw {
                        let s = ((b * h + oh * ph + i) * w + ow * pw + j) * c;
                        for k in 0..c {
                            dx[s + k] += grad[o + k] * scale;
                        }
                    }
                }
            }
        }
    }
    dx
}

/// Dilated causal 1-D convolution over `(batch, time, cin)` with kernel `(k, cin, cout)`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn causal_conv1d_forward(
    x: &[f64],
    kernel: &[f64],
    bias: &[f64],
    (batch, time, cin): (usize, usize, usize),
    k: usize,
    cout: usize,
    dilation: usize,
) -> Vec<f64> {
    let mut out = vec![0.0; batch * time * cout];
    for b in 0..batch {
        for t in 0..time {
            let o = &mut out[(b * time + t) * cout..][..cout];
            o.copy_from_slice(bias);
            for j in 0..k {
                let lag = (k - 1 - j) * dilation;
                if lag > t {
                    continue;
                }
                let xs = &x[(b * time + t - lag) * cin..][..cin];
                for (c, &xv) in xs.iter().enumerate() {
                    let ks = &kernel[(j * cin + c) * cout..][..cout];
                    for (ov, kv) in o.iter_mut().zip(ks) {
                        *ov += xv * kv;
                    }
                }
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn causal_conv1d_backward(
    grad: &[f64],
    x: &[f64],
    kernel: &[f64],
    (batch, time, cin): (usize, usize, usize),
    k: usize,
    cout: usize,
    dilation: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut dx = vec![0.0; x.len()];
    let mut dk = vec![0.0; kernel.len()];
    let mut db = vec![0.0; cout];
    for b in 0..batch {
        for t in 0..time {
            let go = &grad[(b * time + t) * cout..][..cout];
            for (d, g) in db.iter_mut().zip(go) {
                *d += g;
            }
            for j in 0..k {
                let lag = (k - 1 - j) * dilation;
                if lag > t {
                    continue;
                }
                let xo = (b * time + t - lag) * cin;
                for c in 0..cin {
                    let ko = (j * cin + c) * cout;
                    let xv = x[xo + c];
                    let mut acc = 0.0;
                    for o in 0..cout {
                        acc += go[o] * kernel[ko + o];
                        dk[ko + o] += go[o] * xv;
                    }
                    dx[xo + c] += acc;
                }
            }
        }
    }
    (dx, dk, db)
}
