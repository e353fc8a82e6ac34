//! Raw numeric kernels behind the graph operations.
//!
//! Volumes are laid out `[N, C, D, H, W]` row-major. Convolutions use stride 1
//! and zero padding `k / 2`, so spatial extents are preserved; all downsampling
//! comes from max pooling.

use rayon::prelude::*;

use crate::error::{NnError, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
struct Vol {
    d: usize,
    h: usize,
    w: usize,
}

impl Vol {
    fn len(self) -> usize {
        self.d * self.h * self.w
    }
}

fn split_volume_shape(shape: &[usize], what: &str) -> Result<(usize, usize, Vol)> {
    if shape.len() != 5 {
        return Err(NnError::Shape(format!("{what} expects [N, C, D, H, W], got {shape:?}")));
    }
    Ok((shape[0], shape[1], Vol { d: shape[2], h: shape[3], w: shape[4] }))
}

/// Unfolds one sample `[C, D, H, W]` into `[C * k^3, D * H * W]`.
fn im2col(x: &[f64], cin: usize, v: Vol, k: usize, col: &mut [f64]) {
    let p = v.len();
    let pad = k / 2;
    col.fill(0.0);
    let mut row = 0;
    for ci in 0..cin {
        let xc = &x[ci * p..(ci + 1) * p];
        for kd in 0..k {
            for kh in 0..k {
                for kw in 0..k {
                    let dst = &mut col[row * p..(row + 1) * p];
                    // output x index ox reads input ox + kw - pad
                    let ow_lo = pad.saturating_sub(kw);
                    let ow_hi = (v.w + pad).saturating_sub(kw).min(v.w);
                    for od in 0..v.d {
                        let id = od + kd;
                        if id < pad || id - pad >= v.d {
                            continue;
                        }
                        let id = id - pad;
                        for oh in 0..v.h {
                            let ih = oh + kh;
                            if ih < pad || ih - pad >= v.h {
                                continue;
                            }
                            let ih = ih - pad;
                            if ow_lo >= ow_hi {
                                continue;
                            }
                            let src_base = (id * v.h + ih) * v.w;
                            let dst_base = (od * v.h + oh) * v.w;
                            let iw_lo = ow_lo + kw - pad;
                            let n = ow_hi - ow_lo;
                            dst[dst_base + ow_lo..dst_base + ow_lo + n]
                                .copy_from_slice(&xc[src_base + iw_lo..src_base + iw_lo + n]);
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters `[C * k^3, P]` back onto `[C, D, H, W]`.
fn col2im(col: &[f64], cin: usize, v: Vol, k: usize, dx: &mut [f64]) {
    let p = v.len();
    let pad = k / 2;
    let mut row = 0;
    for ci in 0..cin {
        let dxc = &mut dx[ci * p..(ci + 1) * p];
        for kd in 0..k {
            for kh in 0..k {
                for kw in 0..k {
                    let src = &col[row * p..(row + 1) * p];
                    let ow_lo = pad.saturating_sub(kw);
                    let ow_hi = (v.w + pad).saturating_sub(kw).min(v.w);
                    for od in 0..v.d {
                        let id = od + kd;
                        if id < pad || id - pad >= v.d {
                            continue;
                        }
                        let id = id - pad;
                        for oh in 0..v.h {
                            let ih = oh + kh;
                            if ih < pad || ih - pad >= v.h || ow_lo >= ow_hi {
                                continue;
                            }
                            let ih = ih - pad;
                            let dst_base = (id * v.h + ih) * v.w + ow_lo + kw - pad;
                            let src_base = (od * v.h + oh) * v.w + ow_lo;
                            let n = ow_hi - ow_lo;
                            for (d, s) in dxc[dst_base..dst_base + n]
                                .iter_mut()
                                .zip(&src[src_base..src_base + n])
                            {
                                *d += s;
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// `c[m, n] = alpha * a[m, k] * b[k, n] + beta * c` with explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (isize, isize),
    b: &[f64],
    (rsb, csb): (isize, isize),
    beta: f64,
    c: &mut [f64],
) {
    debug_assert!(c.len() >= m * n);
    // SAFETY: every caller passes slices whose extents cover the strided m x k,
    // k x n and m x n views; c is row-major with stride n.
    unsafe {
        matrixmultiply::dgemm(
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

fn check_conv(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<(usize, usize, usize, Vol, usize)> {
    let (n, cin, v) = split_volume_shape(x.shape(), "conv3d input")?;
    let ws = w.shape();
    if ws.len() != 5 || ws[2] != ws[3] || ws[3] != ws[4] {
        return Err(NnError::Shape(format!("conv3d kernel must be [Cout, Cin, k, k, k], got {ws:?}")));
    }
    if ws[1] != cin {
        return Err(NnError::Shape(format!(
            "conv3d input has {cin} channels but kernel expects {}",
            ws[1]
        )));
    }
    let k = ws[2];
    if k % 2 == 0 {
        return Err(NnError::Shape(format!("conv3d kernel extent must be odd, got {k}")));
    }
    if b.shape() != [ws[0]] {
        return Err(NnError::Shape(format!(
            "conv3d bias must be [{}], got {:?}",
            ws[0],
            b.shape()
        )));
    }
    Ok((n, cin, ws[0], v, k))
}

pub fn conv3d_forward(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (n, cin, cout, v, k) = check_conv(x, w, b)?;
    let p = v.len();
    let kk = cin * k * k * k;
    let mut out = vec![0.0; n * cout * p];
    out.par_chunks_mut(cout * p)
        .zip(x.data().par_chunks(cin * p))
        .for_each(|(o, xs)| {
            let mut col = vec![0.0; kk * p];
            im2col(xs, cin, v, k, &mut col);
            for (co, row) in o.chunks_mut(p).enumerate() {
                row.fill(b.data()[co]);
            }
            gemm(cout, kk, p, w.data(), (kk as isize, 1), &col, (p as isize, 1), 1.0, o);
        });
    Tensor::new(vec![n, cout, v.d, v.h, v.w], out)
}

pub struct ConvGrads {
    pub dx: Option<Tensor>,
    pub dw: Option<Tensor>,
    pub db: Option<Tensor>,
}

pub fn conv3d_backward(
    x: &Tensor,
    w: &Tensor,
    b: &Tensor,
    dy: &Tensor,
    need_dx: bool,
    need_dw: bool,
) -> Result<ConvGrads> {
    let (n, cin, cout, v, k) = check_conv(x, w, b)?;
    let p = v.len();
    let kk = cin * k * k * k;
    let per_sample: Vec<(Option<Vec<f64>>, Option<Vec<f64>>)> = x
        .data()
        .par_chunks(cin * p)
        .zip(dy.data().par_chunks(cout * p))
        .map(|(xs, dys)| {
            let mut col = vec![0.0; kk * p];
            let dw = if need_dw {
                im2col(xs, cin, v, k, &mut col);
                let mut dw = vec![0.0; cout * kk];
                // dW = dY [cout, P] * col^T [P, kk]
                gemm(cout, p, kk, dys, (p as isize, 1), &col, (1, p as isize), 0.0, &mut dw);
                Some(dw)
            } else {
                None
            };
            let dx = if need_dx {
                // dcol = W^T [kk, cout] * dY [cout, P]
                gemm(kk, cout, p, w.data(), (1, kk as isize), dys, (p as isize, 1), 0.0, &mut col);
                let mut dx = vec![0.0; cin * p];
                col2im(&col, cin, v, k, &mut dx);
                Some(dx)
            } else {
                None
            };
            (dx, dw)
        })
        .collect();

    let dx = if need_dx {
        let mut data = Vec::with_capacity(n * cin * p);
        for (dx, _) in &per_sample {
            data.extend_from_slice(dx.as_ref().expect("dx computed"));
        }
        Some(Tensor::new(x.shape().to_vec(), data)?)
    } else {
        None
    };
    let (dw, db) = if need_dw {
        let mut dw = vec![0.0; cout * kk];
        for (_, g) in &per_sample {
            for (a, b) in dw.iter_mut().zip(g.as_ref().expect("dw computed")) {
                *a += b;
            }
        }
        let mut db = vec![0.0; cout];
        for dys in dy.data().chunks(cout * p) {
            for (co, row) in dys.chunks(p).enumerate() {
                db[co] += row.iter().sum::<f64>();
            }
        }
        (Some(Tensor::new(w.shape().to_vec(), dw)?), Some(Tensor::new(vec![cout], db)?))
    } else {
        (None, None)
    };
    Ok(ConvGrads { dx, dw, db })
}

/// Non-overlapping max pooling with window `factor`; trailing voxels that do not
/// fill a window are dropped. Returns the output and, per output voxel, the flat
/// input index of the selected maximum (first maximum on ties).
pub fn max_pool3d_forward(x: &Tensor, factor: usize) -> Result<(Tensor, Vec<usize>)> {
    let (n, c, v) = split_volume_shape(x.shape(), "max_pool3d input")?;
    let o = Vol { d: v.d / factor, h: v.h / factor, w: v.w / factor };
    if o.d == 0 || o.h == 0 || o.w == 0 {
        return Err(NnError::Shape(format!(
            "max_pool3d factor {factor} too large for {:?}",
            x.shape()
        )));
    }
    let xd = x.data();
    let mut out = Vec::with_capacity(n * c * o.len());
    let mut arg = Vec::with_capacity(n * c * o.len());
    for plane in 0..n * c {
        let base = plane * v.len();
        for od in 0..o.d {
            for oh in 0..o.h {
                for ow in 0..o.w {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_i = usize::MAX;
                    for a in 0..factor {
                        for bb in 0..factor {
                            let row = base + ((od * factor + a) * v.h + oh * factor + bb) * v.w;
                            for cc in 0..factor {
                                let i = row + ow * factor + cc;
                                if xd[i] > best || best_i == usize::MAX {
                                    best = xd[i];
                                    best_i = i;
                                }
                            }
                        }
                    }
                    out.push(best);
                    arg.push(best_i);
                }
            }
        }
    }
    Ok((Tensor::new(vec![n, c, o.d, o.h, o.w], out)?, arg))
}

/// Per-channel statistics layout: returns (channels, inner size per channel block, count per channel).
pub(crate) fn channel_layout(shape: &[usize]) -> Result<(usize, usize, usize)> {
    if shape.len() < 2 {
        return Err(NnError::Shape(format!("expected [N, C, ...], got {shape:?}")));
    }
    let inner: usize = shape[2..].iter().product();
    Ok((shape[1], inner, shape[0]))
}

/// `y = x * w^T + b` for `x: [N, in]`, `w: [out, in]`, `b: [out]`.
pub fn linear_forward(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (n, fin, fout) = check_linear(x, w, b)?;
    let mut out = Vec::with_capacity(n * fout);
    for _ in 0..n {
        out.extend_from_slice(b.data());
    }
    gemm(n, fin, fout, x.data(), (fin as isize, 1), w.data(), (1, fin as isize), 1.0, &mut out);
    Tensor::new(vec![n, fout], out)
}

pub(crate) fn check_linear(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<(usize, usize, usize)> {
    let xs = x.shape();
    let ws = w.shape();
    if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] || b.shape() != [ws[0]] {
        return Err(NnError::Shape(format!(
            "linear: input {xs:?}, weight {ws:?}, bias {:?} are incompatible",
            b.shape()
        )));
    }
    Ok((xs[0], xs[1], ws[0]))
}

pub fn linear_backward(
    x: &Tensor,
    w: &Tensor,
    dy: &Tensor,
    need_dx: bool,
    need_dw: bool,
) -> (Option<Vec<f64>>, Option<(Vec<f64>, Vec<f64>)>) {
    let n = x.shape()[0];
    let fin = x.shape()[1];
    let fout = w.shape()[0];
    let dx = need_dx.then(|| {
        let mut dx = vec![0.0; n * fin];
        gemm(n, fout, fin, dy.data(), (fout as isize, 1), w.data(), (fin as isize, 1), 0.0, &mut dx);
        dx
    });
    let dwb = need_dw.then(|| {
        let mut dw = vec![0.0; fout * fin];
        gemm(fout, n, fin, dy.data(), (1, fout as isize), x.data(), (fin as isize, 1), 0.0, &mut dw);
        let mut db = vec![0.0; fout];
        for row in dy.data().chunks(fout) {
            for (a, b) in db.iter_mut().zip(row) {
                *a += b;
            }
        }
        (dw, db)
    });
    (dx, dwb)
}
