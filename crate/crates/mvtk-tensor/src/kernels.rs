//! Dense compute kernels. Forward kernels optionally count multiply-accumulates
//! into a counter (one increment per multiply of the zero-padded formulation);
//! backward kernels never count. All kernels use a fixed accumulation order per
//! output element, so results are bit-identical across runs and thread counts.

use std::cell::Cell;
use std::sync::atomic::{AtomicUsize, Ordering};

use crate::element::Element;
use crate::error::{Result, TensorError};
use crate::shape::Shape;
use crate::tensor::Tensor;

pub type Macs<'a> = Option<&'a Cell<u64>>;

static NUM_THREADS: AtomicUsize = AtomicUsize::new(1);

/// Intra-op worker threads. Results are identical for any value.
pub fn set_num_threads(n: usize) {
    NUM_THREADS.store(n.max(1), Ordering::Relaxed);
}

pub fn num_threads() -> usize {
    NUM_THREADS.load(Ordering::Relaxed)
}

fn bump(macs: Macs, n: u64) {
    if let Some(c) = macs {
        c.set(c.get() + n);
    }
}

// ---------------------------------------------------------------------------
// GEMM primitives. c[m x n] += op(a) op(b), row-major.
// ---------------------------------------------------------------------------

/// c += a[m x k] * b[k x n]
pub fn gemm_nn<T: Element>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    let nt = num_threads();
    if nt > 1 && m >= 2 * nt {
        let rows = m.div_ceil(nt);
        std::thread::scope(|s| {
            for (ci, slab) in c.chunks_mut(rows * n).enumerate() {
                let i0 = ci * rows;
                s.spawn(move || {
                    for (ii, crow) in slab.chunks_mut(n).enumerate() {
                        gemm_nn_row(a, b, crow, i0 + ii, k, n);
                    }
                });
            }
        });
    } else {
        for (i, crow) in c.chunks_mut(n).enumerate() {
            gemm_nn_row(a, b, crow, i, k, n);
        }
    }
}

#[inline]
fn gemm_nn_row<T: Element>(a: &[T], b: &[T], crow: &mut [T], i: usize, k: usize, n: usize) {
    let arow = &a[i * k..(i + 1) * k];
    for (kk, &av) in arow.iter().enumerate() {
        if av == T::ZERO {
            continue;
        }
        let brow = &b[kk * n..(kk + 1) * n];
        for (cv, &bv) in crow.iter_mut().zip(brow) {
            *cv += av * bv;
        }
    }
}

/// c += a[m x k] * b[n x k]^T
pub fn gemm_nt<T: Element>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    let nt = num_threads();
    let body = |i0: usize, slab: &mut [T]| {
        for (ii, crow) in slab.chunks_mut(n).enumerate() {
            let arow = &a[(i0 + ii) * k..(i0 + ii + 1) * k];
            for (j, cv) in crow.iter_mut().enumerate() {
                let brow = &b[j * k..(j + 1) * k];
                let mut acc = T::ZERO;
                for (&av, &bv) in arow.iter().zip(brow) {
                    acc += av * bv;
                }
                *cv += acc;
            }
        }
    };
    if nt > 1 && m >= 2 * nt {
        let rows = m.div_ceil(nt);
        std::thread::scope(|s| {
            for (ci, slab) in c.chunks_mut(rows * n).enumerate() {
                s.spawn(move || body(ci * rows, slab));
            }
        });
    } else {
        body(0, c);
    }
}

/// c += a[k x m]^T * b[k x n]
pub fn gemm_tn<T: Element>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for kk in 0..k {
        let brow = &b[kk * n..(kk + 1) * n];
        let arow = &a[kk * m..(kk + 1) * m];
        for (i, &av) in arow.iter().enumerate() {
            if av == T::ZERO {
                continue;
            }
            let crow = &mut c[i * n..(i + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Convolution
// ---------------------------------------------------------------------------

pub fn conv_out_dim(input: usize, k: usize, stride: usize, padding: usize) -> Result<usize> {
    let padded = input + 2 * padding;
    if padded < k {
        return Err(TensorError::ShapeMismatch {
            op: "conv2d",
            detail: format!("input {input} + 2*{padding} smaller than kernel {k}"),
        });
    }
    Ok((padded - k) / stride + 1)
}

pub struct ConvGeom {
    pub n: usize,
    pub cin: usize,
    pub cout: usize,
    pub groups: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
    pub h: usize,
    pub w: usize,
    pub hout: usize,
    pub wout: usize,
}

pub fn conv_geometry<T: Element>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    stride: usize,
    padding: usize,
    groups: usize,
) -> Result<ConvGeom> {
    let (xs, ws) = (x.shape(), w.shape());
    let (cin, cout) = (xs.c(), ws.n());
    if stride == 0 {
        return Err(TensorError::ShapeMismatch {
            op: "conv2d",
            detail: "stride must be >= 1".into(),
        });
    }
    if groups == 0 || cin % groups != 0 {
        return Err(TensorError::GroupMismatch {
            op: "conv2d",
            channels: cin,
            groups,
            which: "input",
        });
    }
    if cout % groups != 0 {
        return Err(TensorError::GroupMismatch {
            op: "conv2d",
            channels: cout,
            groups,
            which: "output",
        });
    }
    if ws.c() != cin / groups {
        return Err(TensorError::ShapeMismatch {
            op: "conv2d",
            detail: format!(
                "weight expects {} input channels per group, input has {} ({} groups)",
                ws.c(),
                cin,
                groups
            ),
        });
    }
    Ok(ConvGeom {
        n: xs.n(),
        cin,
        cout,
        groups,
        kh: ws.h(),
        kw: ws.w(),
        stride,
        padding,
        h: xs.h(),
        w: xs.w(),
        hout: conv_out_dim(xs.h(), ws.h(), stride, padding)?,
        wout: conv_out_dim(xs.w(), ws.w(), stride, padding)?,
    })
}

fn im2col<T: Element>(x: &[T], g: &ConvGeom, cols: &mut [T], cing: usize, group: usize) {
    // cols[(c*kh + ky)*kw + kx][oh*wout + ow]
    let l = g.hout * g.wout;
    for c in 0..cing {
        let plane = &x[(group * cing + c) * g.h * g.w..(group * cing + c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = ((c * g.kh + ky) * g.kw + kx) * l;
                for oh in 0..g.hout {
                    let ih = (oh * g.stride + ky) as isize - g.padding as isize;
                    let dst = &mut cols[row + oh * g.wout..row + (oh + 1) * g.wout];
                    if ih < 0 || ih as usize >= g.h {
                        dst.fill(T::ZERO);
                        continue;
                    }
                    let src = &plane[ih as usize * g.w..(ih as usize + 1) * g.w];
                    for (ow, d) in dst.iter_mut().enumerate() {
                        let iw = (ow * g.stride + kx) as isize - g.padding as isize;
                        *d = if iw < 0 || iw as usize >= g.w {
                            T::ZERO
                        } else {
                            src[iw as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im_add<T: Element>(cols: &[T], g: &ConvGeom, x: &mut [T], cing: usize, group: usize) {
    let l = g.hout * g.wout;
    for c in 0..cing {
        let plane_off = (group * cing + c) * g.h * g.w;
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = ((c * g.kh + ky) * g.kw + kx) * l;
                for oh in 0..g.hout {
                    let ih = (oh * g.stride + ky) as isize - g.padding as isize;
                    if ih < 0 || ih as usize >= g.h {
                        continue;
                    }
                    for ow in 0..g.wout {
                        let iw = (ow * g.stride + kx) as isize - g.padding as isize;
                        if iw < 0 || iw as usize >= g.w {
                            continue;
                        }
                        x[plane_off + ih as usize * g.w + iw as usize] += cols[row + oh * g.wout + ow];
                    }
                }
            }
        }
    }
}

/// Zero-padded 2d convolution, NCHW. Weight layout `[cout, cin/groups, kh, kw]`.
pub fn conv2d<T: Element>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    padding: usize,
    groups: usize,
    macs: Macs,
) -> Result<Tensor<T>> {
    let g = conv_geometry(x, w, stride, padding, groups)?;
    if let Some(b) = bias {
        if b.numel() != g.cout {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                detail: format!("bias length {} != cout {}", b.numel(), g.cout),
            });
        }
    }
    let (cing, coutg) = (g.cin / groups, g.cout / groups);
    let kk = cing * g.kh * g.kw;
    let l = g.hout * g.wout;
    bump(macs, (g.n * g.cout * kk * l) as u64);

    let mut out = vec![T::ZERO; g.n * g.cout * l];
    let xd = x.data();
    let wd = w.data();
    let pointwise = g.kh == 1 && g.kw == 1 && g.stride == 1 && g.padding == 0;
    let mut cols = if pointwise { Vec::new() } else { vec![T::ZERO; kk * l] };
    for n in 0..g.n {
        let xn = &xd[n * g.cin * g.h * g.w..(n + 1) * g.cin * g.h * g.w];
        for grp in 0..groups {
            let wg = &wd[grp * coutg * kk..(grp + 1) * coutg * kk];
            let og = &mut out[(n * g.cout + grp * coutg) * l..(n * g.cout + (grp + 1) * coutg) * l];
            if pointwise {
                let xg = &xn[grp * cing * l..(grp + 1) * cing * l];
                gemm_nn(wg, xg, og, coutg, kk, l);
            } else {
                im2col(xn, &g, &mut cols, cing, grp);
                gemm_nn(wg, &cols, og, coutg, kk, l);
            }
        }
        if let Some(b) = bias {
            let bd = b.data();
            for c in 0..g.cout {
                let bv = bd[c];
                for v in &mut out[(n * g.cout + c) * l..(n * g.cout + c + 1) * l] {
                    *v += bv;
                }
            }
        }
    }
    Tensor::new(Shape::nchw(g.n, g.cout, g.hout, g.wout), out)
}

/// Sugar for [`conv2d`] with one group per input channel; the weight is
/// `[c, 1, kh, kw]`.
pub fn depthwise_conv2d<T: Element>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    padding: usize,
    macs: Macs,
) -> Result<Tensor<T>> {
    conv2d(x, w, bias, stride, padding, x.shape().c(), macs)
}

pub fn conv2d_dx<T: Element>(
    dy: &Tensor<T>,
    w: &Tensor<T>,
    x_shape: Shape,
    stride: usize,
    padding: usize,
    groups: usize,
) -> Result<Tensor<T>> {
    let x_probe = Tensor::<T>::zeros(x_shape);
    let g = conv_geometry(&x_probe, w, stride, padding, groups)?;
    let (cing, coutg) = (g.cin / groups, g.cout / groups);
    let kk = cing * g.kh * g.kw;
    let l = g.hout * g.wout;
    let mut dx = vec![T::ZERO; x_shape.numel()];
    let mut dcols = vec![T::ZERO; kk * l];
    let (dyd, wd) = (dy.data(), w.data());
    for n in 0..g.n {
        for grp in 0..groups {
            let wg = &wd[grp * coutg * kk..(grp + 1) * coutg * kk];
            let dyg = &dyd[(n * g.cout + grp * coutg) * l..(n * g.cout + (grp + 1) * coutg) * l];
            dcols.fill(T::ZERO);
            gemm_tn(wg, dyg, &mut dcols, kk, coutg, l);
            col2im_add(
                &dcols,
                &g,
                &mut dx[n * g.cin * g.h * g.w..(n + 1) * g.cin * g.h * g.w],
                cing,
                grp,
            );
        }
    }
    Tensor::new(x_shape, dx)
}

pub fn conv2d_dw<T: Element>(
    dy: &Tensor<T>,
    x: &Tensor<T>,
    w_shape: Shape,
    stride: usize,
    padding: usize,
    groups: usize,
) -> Result<Tensor<T>> {
    let w_probe = Tensor::<T>::zeros(w_shape);
    let g = conv_geometry(x, &w_probe, stride, padding, groups)?;
    let (cing, coutg) = (g.cin / groups, g.cout / groups);
    let kk = cing * g.kh * g.kw;
    let l = g.hout * g.wout;
    let mut dw = vec![T::ZERO; w_shape.numel()];
    let mut cols = vec![T::ZERO; kk * l];
    let (dyd, xd) = (dy.data(), x.data());
    for n in 0..g.n {
        let xn = &xd[n * g.cin * g.h * g.w..(n + 1) * g.cin * g.h * g.w];
        for grp in 0..groups {
            im2col(xn, &g, &mut cols, cing, grp);
            let dyg = &dyd[(n * g.cout + grp * coutg) * l..(n * g.cout + (grp + 1) * coutg) * l];
            gemm_nt(
                dyg,
                &cols,
                &mut dw[grp * coutg * kk..(grp + 1) * coutg * kk],
                coutg,
                l,
                kk,
            );
        }
    }
    Tensor::new(w_shape, dw)
}

pub fn conv2d_db<T: Element>(dy: &Tensor<T>) -> Tensor<T> {
    let s = dy.shape();
    let l = s.h() * s.w();
    let mut db = vec![T::ZERO; s.c()];
    let d = dy.data();
    for n in 0..s.n() {
        for (c, dbv) in db.iter_mut().enumerate() {
            for v in &d[(n * s.c() + c) * l..(n * s.c() + c + 1) * l] {
                *dbv += *v;
            }
        }
    }
    Tensor::new(Shape::nchw(1, s.c(), 1, 1), db).unwrap()
}

// ---------------------------------------------------------------------------
// Matrix products
// ---------------------------------------------------------------------------

/// Rank-2 product: `a[m x k] * b[k x n]`.
pub fn matmul2<T: Element>(a: &Tensor<T>, b: &Tensor<T>, macs: Macs) -> Result<Tensor<T>> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.h() != 1 || sa.w() != 1 || sb.h() != 1 || sb.w() != 1 {
        return Err(TensorError::ShapeMismatch {
            op: "matmul",
            detail: format!("expected rank-2 views, got {sa} and {sb}"),
        });
    }
    if sa.c() != sb.n() {
        return Err(TensorError::ShapeMismatch {
            op: "matmul",
            detail: format!("inner dims disagree: {} vs {}", sa.c(), sb.n()),
        });
    }
    let (m, k, n) = (sa.n(), sa.c(), sb.c());
    bump(macs, (m * k * n) as u64);
    let mut c = vec![T::ZERO; m * n];
    gemm_nn(a.data(), b.data(), &mut c, m, k, n);
    Tensor::new(Shape::mat(m, n), c)
}

/// Batched product over the leading dim: `a[B, m, k] * b[B, k, n]` with
/// optional per-operand transposes of the trailing two dims.
pub fn bmm<T: Element>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    ta: bool,
    tb: bool,
    macs: Macs,
) -> Result<Tensor<T>> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.n() != sb.n() || sa.w() != 1 || sb.w() != 1 {
        return Err(TensorError::ShapeMismatch {
            op: "bmm",
            detail: format!("batch dims disagree: {sa} vs {sb}"),
        });
    }
    let bsz = sa.n();
    let (m, ka) = if ta { (sa.h(), sa.c()) } else { (sa.c(), sa.h()) };
    let (kb, n) = if tb { (sb.h(), sb.c()) } else { (sb.c(), sb.h()) };
    if ka != kb {
        return Err(TensorError::ShapeMismatch {
            op: "bmm",
            detail: format!("inner dims disagree: {ka} vs {kb}"),
        });
    }
    bump(macs, (bsz * m * ka * n) as u64);
    let mut out = vec![T::ZERO; bsz * m * n];
    let (ad, bd) = (a.data(), b.data());
    let (alen, blen) = (sa.c() * sa.h(), sb.c() * sb.h());
    for i in 0..bsz {
        let av = &ad[i * alen..(i + 1) * alen];
        let bv = &bd[i * blen..(i + 1) * blen];
        let cv = &mut out[i * m * n..(i + 1) * m * n];
        match (ta, tb) {
            (false, false) => gemm_nn(av, bv, cv, m, ka, n),
            (false, true) => gemm_nt(av, bv, cv, m, ka, n),
            (true, false) => gemm_tn(av, bv, cv, m, ka, n),
            (true, true) => unreachable!("tt bmm unused"),
        }
    }
    Tensor::new(Shape::nchw(bsz, m, n, 1), out)
}

/// Token linear: x `[S, n, din, 1]` times `w[dout, din]` plus bias.
pub fn linear<T: Element>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    macs: Macs,
) -> Result<Tensor<T>> {
    let (xs, ws) = (x.shape(), w.shape());
    let (din, dout) = (ws.c(), ws.n());
    if xs.h() != din || xs.w() != 1 {
        return Err(TensorError::ShapeMismatch {
            op: "linear",
            detail: format!("token dim {} != weight input dim {}", xs.h(), din),
        });
    }
    let rows = xs.n() * xs.c();
    bump(macs, (rows * din * dout) as u64);
    let mut out = vec![T::ZERO; rows * dout];
    gemm_nt(x.data(), w.data(), &mut out, rows, din, dout);
    if let Some(b) = bias {
        let bd = b.data();
        for row in out.chunks_mut(dout) {
            for (v, &bv) in row.iter_mut().zip(bd) {
                *v += bv;
            }
        }
    }
    Tensor::new(Shape::nchw(xs.n(), xs.c(), dout, 1), out)
}

pub fn linear_dx<T: Element>(dy: &Tensor<T>, w: &Tensor<T>, x_shape: Shape) -> Result<Tensor<T>> {
    let rows = x_shape.n() * x_shape.c();
    let (dout, din) = (w.shape().n(), w.shape().c());
    let mut dx = vec![T::ZERO; rows * din];
    gemm_nn(dy.data(), w.data(), &mut dx, rows, dout, din);
    Tensor::new(x_shape, dx)
}

pub fn linear_dw<T: Element>(dy: &Tensor<T>, x: &Tensor<T>, w_shape: Shape) -> Result<Tensor<T>> {
    let rows = x.shape().n() * x.shape().c();
    let (dout, din) = (w_shape.n(), w_shape.c());
    let mut dw = vec![T::ZERO; dout * din];
    gemm_tn(dy.data(), x.data(), &mut dw, dout, rows, din);
    Tensor::new(w_shape, dw)
}

pub fn linear_db<T: Element>(dy: &Tensor<T>) -> Tensor<T> {
    let dout = dy.shape().h();
    let mut db = vec![T::ZERO; dout];
    for row in dy.data().chunks(dout) {
        for (d, &v) in db.iter_mut().zip(row) {
            *d += v;
        }
    }
    Tensor::new(Shape::nchw(1, dout, 1, 1), db).unwrap()
}

// ---------------------------------------------------------------------------
// Elementwise
// ---------------------------------------------------------------------------

pub fn zip<T: Element>(
    op: &'static str,
    a: &Tensor<T>,
    b: &Tensor<T>,
    f: impl Fn(T, T) -> T,
) -> Result<Tensor<T>> {
    if a.shape() != b.shape() {
        return Err(TensorError::ShapeMismatch {
            op,
            detail: format!("{} vs {}", a.shape(), b.shape()),
        });
    }
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| f(x, y))
        .collect();
    Tensor::new(a.shape(), data)
}

pub fn add<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    zip("add", a, b, |x, y| x + y)
}

pub fn sub<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    zip("sub", a, b, |x, y| x - y)
}

pub fn mul<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    zip("mul", a, b, |x, y| x * y)
}

pub fn scale<T: Element>(x: &Tensor<T>, s: T) -> Tensor<T> {
    x.map(|v| v * s)
}

pub fn add_scalar<T: Element>(x: &Tensor<T>, s: T) -> Tensor<T> {
    x.map(|v| v + s)
}

#[inline]
fn sig<T: Element>(v: T) -> T {
    T::ONE / (T::ONE + (-v).exp())
}

pub fn sigmoid<T: Element>(x: &Tensor<T>) -> Tensor<T> {
    x.map(sig)
}

pub fn silu<T: Element>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| v * sig(v))
}

pub fn relu<T: Element>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::ZERO { v } else { T::ZERO })
}

pub fn sigmoid_vjp<T: Element>(dy: &Tensor<T>, x: &Tensor<T>) -> Tensor<T> {
    let data = dy
        .data()
        .iter()
        .zip(x.data())
        .map(|(&g, &v)| {
            let s = sig(v);
            g * s * (T::ONE - s)
        })
        .collect();
    Tensor::new(x.shape(), data).unwrap()
}

pub fn silu_vjp<T: Element>(dy: &Tensor<T>, x: &Tensor<T>) -> Tensor<T> {
    let data = dy
        .data()
        .iter()
        .zip(x.data())
        .map(|(&g, &v)| {
            let s = sig(v);
            g * s * (T::ONE + v * (T::ONE - s))
        })
        .collect();
    Tensor::new(x.shape(), data).unwrap()
}

pub fn relu_vjp<T: Element>(dy: &Tensor<T>, x: &Tensor<T>) -> Tensor<T> {
    let data = dy
        .data()
        .iter()
        .zip(x.data())
        .map(|(&g, &v)| if v > T::ZERO { g } else { T::ZERO })
        .collect();
    Tensor::new(x.shape(), data).unwrap()
}

// ---------------------------------------------------------------------------
// Softmax along one axis
// ---------------------------------------------------------------------------

fn axis_spans(shape: Shape, axis: usize) -> (usize, usize, usize) {
    let d = shape.0;
    let pre: usize = d[..axis].iter().product();
    let post: usize = d[axis + 1..].iter().product();
    (pre, d[axis], post)
}

pub fn softmax<T: Element>(x: &Tensor<T>, axis: usize) -> Tensor<T> {
    let (pre, len, post) = axis_spans(x.shape(), axis);
    let xd = x.data();
    let mut out = vec![T::ZERO; xd.len()];
    for p in 0..pre {
        for q in 0..post {
            let base = p * len * post + q;
            let mut mx = xd[base];
            for i in 1..len {
                mx = mx.maximum(xd[base + i * post]);
            }
            let mut sum = T::ZERO;
            for i in 0..len {
                let e = (xd[base + i * post] - mx).exp();
                out[base + i * post] = e;
                sum += e;
            }
            for i in 0..len {
                out[base + i * post] = out[base + i * post] / sum;
            }
        }
    }
    Tensor::new(x.shape(), out).unwrap()
}

pub fn softmax_vjp<T: Element>(dy: &Tensor<T>, y: &Tensor<T>, axis: usize) -> Tensor<T> {
    let (pre, len, post) = axis_spans(y.shape(), axis);
    let (dyd, yd) = (dy.data(), y.data());
    let mut dx = vec![T::ZERO; yd.len()];
    for p in 0..pre {
        for q in 0..post {
            let base = p * len * post + q;
            let mut dot = T::ZERO;
            for i in 0..len {
                dot += dyd[base + i * post] * yd[base + i * post];
            }
            for i in 0..len {
                let ix = base + i * post;
                dx[ix] = yd[ix] * (dyd[ix] - dot);
            }
        }
    }
    Tensor::new(y.shape(), dx).unwrap()
}

// ---------------------------------------------------------------------------
// Normalization
// ---------------------------------------------------------------------------

pub fn batchnorm_infer<T: Element>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    mean: &Tensor<T>,
    var: &Tensor<T>,
    eps: f64,
) -> Result<Tensor<T>> {
    let s = x.shape();
    if gamma.numel() != s.c() {
        return Err(TensorError::ShapeMismatch {
            op: "batchnorm",
            detail: format!("affine length {} != channels {}", gamma.numel(), s.c()),
        });
    }
    let l = s.h() * s.w();
    let mut out = vec![T::ZERO; x.numel()];
    let (xd, gd, bd, md, vd) = (x.data(), gamma.data(), beta.data(), mean.data(), var.data());
    for n in 0..s.n() {
        for c in 0..s.c() {
            let inv = T::ONE / (vd[c] + T::from_f64(eps)).sqrt();
            let (sc, sh) = (gd[c] * inv, bd[c] - gd[c] * inv * md[c]);
            let off = (n * s.c() + c) * l;
            for i in 0..l {
                out[off + i] = xd[off + i] * sc + sh;
            }
        }
    }
    Tensor::new(s, out)
}

/// Per-batch statistics; returns (y, mean, invstd) for the backward pass and
/// running-stat updates.
pub fn batchnorm_train<T: Element>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: f64,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let s = x.shape();
    if gamma.numel() != s.c() {
        return Err(TensorError::ShapeMismatch {
            op: "batchnorm",
            detail: format!("affine length {} != channels {}", gamma.numel(), s.c()),
        });
    }
    let l = s.h() * s.w();
    let m = (s.n() * l) as f64;
    let (xd, gd, bd) = (x.data(), gamma.data(), beta.data());
    let mut mean = vec![T::ZERO; s.c()];
    let mut invstd = vec![T::ZERO; s.c()];
    let mut out = vec![T::ZERO; x.numel()];
    for c in 0..s.c() {
        let mut sum = T::ZERO;
        for n in 0..s.n() {
            let off = (n * s.c() + c) * l;
            for i in 0..l {
                sum += xd[off + i];
            }
        }
        let mu = sum / T::from_f64(m);
        let mut varsum = T::ZERO;
        for n in 0..s.n() {
            let off = (n * s.c() + c) * l;
            for i in 0..l {
                let d = xd[off + i] - mu;
                varsum += d * d;
            }
        }
        let var = varsum / T::from_f64(m);
        let inv = T::ONE / (var + T::from_f64(eps)).sqrt();
        mean[c] = mu;
        invstd[c] = inv;
        for n in 0..s.n() {
            let off = (n * s.c() + c) * l;
            for i in 0..l {
                out[off + i] = (xd[off + i] - mu) * inv * gd[c] + bd[c];
            }
        }
    }
    Ok((
        Tensor::new(s, out)?,
        Tensor::new(Shape::nchw(1, s.c(), 1, 1), mean)?,
        Tensor::new(Shape::nchw(1, s.c(), 1, 1), invstd)?,
    ))
}

pub fn batchnorm_train_vjp<T: Element>(
    dy: &Tensor<T>,
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    mean: &Tensor<T>,
    invstd: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let s = x.shape();
    let l = s.h() * s.w();
    let m = T::from_f64((s.n() * l) as f64);
    let (dyd, xd, gd, md, ivd) = (dy.data(), x.data(), gamma.data(), mean.data(), invstd.data());
    let mut dx = vec![T::ZERO; x.numel()];
    let mut dgamma = vec![T::ZERO; s.c()];
    let mut dbeta = vec![T::ZERO; s.c()];
    for c in 0..s.c() {
        let (mu, inv) = (md[c], ivd[c]);
        let mut sum_dy = T::ZERO;
        let mut sum_dy_xhat = T::ZERO;
        for n in 0..s.n() {
            let off = (n * s.c() + c) * l;
            for i in 0..l {
                let xhat = (xd[off + i] - mu) * inv;
                sum_dy += dyd[off + i];
                sum_dy_xhat += dyd[off + i] * xhat;
            }
        }
        dgamma[c] = sum_dy_xhat;
        dbeta[c] = sum_dy;
        let g = gd[c];
        for n in 0..s.n() {
            let off = (n * s.c() + c) * l;
            for i in 0..l {
                let xhat = (xd[off + i] - mu) * inv;
                dx[off + i] =
                    g * inv * (dyd[off + i] - sum_dy / m - xhat * (sum_dy_xhat / m));
            }
        }
    }
    (
        Tensor::new(s, dx).unwrap(),
        Tensor::new(Shape::nchw(1, s.c(), 1, 1), dgamma).unwrap(),
        Tensor::new(Shape::nchw(1, s.c(), 1, 1), dbeta).unwrap(),
    )
}

/// Layernorm over all dims from `start_axis` on; affine has one value per
/// normalized position.
pub fn layernorm<T: Element>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: f64,
    start_axis: usize,
) -> Result<Tensor<T>> {
    let d = x.shape().0;
    let lanes: usize = d[..start_axis].iter().product();
    let len: usize = d[start_axis..].iter().product();
    if gamma.numel() != len || beta.numel() != len {
        return Err(TensorError::ShapeMismatch {
            op: "layernorm",
            detail: format!("affine length {} != normalized size {}", gamma.numel(), len),
        });
    }
    let (xd, gd, bd) = (x.data(), gamma.data(), beta.data());
    let mut out = vec![T::ZERO; x.numel()];
    for lane in 0..lanes {
        let seg = &xd[lane * len..(lane + 1) * len];
        let (mu, inv) = lane_stats(seg, eps);
        let dst = &mut out[lane * len..(lane + 1) * len];
        for i in 0..len {
            dst[i] = (seg[i] - mu) * inv * gd[i] + bd[i];
        }
    }
    Tensor::new(x.shape(), out)
}

fn lane_stats<T: Element>(seg: &[T], eps: f64) -> (T, T) {
    let m = T::from_f64(seg.len() as f64);
    let mut sum = T::ZERO;
    for &v in seg {
        sum += v;
    }
    let mu = sum / m;
    let mut varsum = T::ZERO;
    for &v in seg {
        let d = v - mu;
        varsum += d * d;
    }
    let inv = T::ONE / (varsum / m + T::from_f64(eps)).sqrt();
    (mu, inv)
}

pub fn layernorm_vjp<T: Element>(
    dy: &Tensor<T>,
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    eps: f64,
    start_axis: usize,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let d = x.shape().0;
    let lanes: usize = d[..start_axis].iter().product();
    let len: usize = d[start_axis..].iter().product();
    let (dyd, xd, gd) = (dy.data(), x.data(), gamma.data());
    let mut dx = vec![T::ZERO; x.numel()];
    let mut dgamma = vec![T::ZERO; len];
    let mut dbeta = vec![T::ZERO; len];
    let m = T::from_f64(len as f64);
    for lane in 0..lanes {
        let seg = &xd[lane * len..(lane + 1) * len];
        let dseg = &dyd[lane * len..(lane + 1) * len];
        let (mu, inv) = lane_stats(seg, eps);
        let mut sum_g = T::ZERO;
        let mut sum_gx = T::ZERO;
        for i in 0..len {
            let xhat = (seg[i] - mu) * inv;
            let g = dseg[i] * gd[i];
            dgamma[i] += dseg[i] * xhat;
            dbeta[i] += dseg[i];
            sum_g += g;
            sum_gx += g * xhat;
        }
        let dst = &mut dx[lane * len..(lane + 1) * len];
        for i in 0..len {
            let xhat = (seg[i] - mu) * inv;
            let g = dseg[i] * gd[i];
            dst[i] = inv * (g - sum_g / m - xhat * (sum_gx / m));
        }
    }
    (
        Tensor::new(x.shape(), dx).unwrap(),
        Tensor::new(Shape::nchw(1, len, 1, 1), dgamma).unwrap(),
        Tensor::new(Shape::nchw(1, len, 1, 1), dbeta).unwrap(),
    )
}

/// Group normalization on NCHW with per-channel affine.
pub fn groupnorm<T: Element>(
    x: &Tensor<T>,
    groups: usize,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: f64,
) -> Result<Tensor<T>> {
    let s = x.shape();
    if groups == 0 || s.c() % groups != 0 {
        return Err(TensorError::GroupMismatch {
            op: "groupnorm",
            channels: s.c(),
            groups,
            which: "input",
        });
    }
    let cg = s.c() / groups;
    let l = s.h() * s.w();
    let (xd, gd, bd) = (x.data(), gamma.data(), beta.data());
    let mut out = vec![T::ZERO; x.numel()];
    for n in 0..s.n() {
        for g in 0..groups {
            let start = (n * s.c() + g * cg) * l;
            let seg = &xd[start..start + cg * l];
            let (mu, inv) = lane_stats(seg, eps);
            for c in 0..cg {
                let (ga, be) = (gd[g * cg + c], bd[g * cg + c]);
                for i in 0..l {
                    let ix = start + c * l + i;
                    out[ix] = (xd[ix] - mu) * inv * ga + be;
                }
            }
        }
    }
    Tensor::new(s, out)
}

pub fn groupnorm_vjp<T: Element>(
    dy: &Tensor<T>,
    x: &Tensor<T>,
    groups: usize,
    gamma: &Tensor<T>,
    eps: f64,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let s = x.shape();
    let cg = s.c() / groups;
    let l = s.h() * s.w();
    let region = cg * l;
    let m = T::from_f64(region as f64);
    let (dyd, xd, gd) = (dy.data(), x.data(), gamma.data());
    let mut dx = vec![T::ZERO; x.numel()];
    let mut dgamma = vec![T::ZERO; s.c()];
    let mut dbeta = vec![T::ZERO; s.c()];
    for n in 0..s.n() {
        for g in 0..groups {
            let start = (n * s.c() + g * cg) * l;
            let seg = &xd[start..start + region];
            let (mu, inv) = lane_stats(seg, eps);
            let mut sum_g = T::ZERO;
            let mut sum_gx = T::ZERO;
            for c in 0..cg {
                let ga = gd[g * cg + c];
                for i in 0..l {
                    let ix = start + c * l + i;
                    let xhat = (xd[ix] - mu) * inv;
                    dgamma[g * cg + c] += dyd[ix] * xhat;
                    dbeta[g * cg + c] += dyd[ix];
                    sum_g += dyd[ix] * ga;
                    sum_gx += dyd[ix] * ga * xhat;
                }
            }
            for c in 0..cg {
                let ga = gd[g * cg + c];
                for i in 0..l {
                    let ix = start + c * l + i;
                    let xhat = (xd[ix] - mu) * inv;
                    dx[ix] = inv * (dyd[ix] * ga - sum_g / m - xhat * (sum_gx / m));
                }
            }
        }
    }
    (
        Tensor::new(s, dx).unwrap(),
        Tensor::new(Shape::nchw(1, s.c(), 1, 1), dgamma).unwrap(),
        Tensor::new(Shape::nchw(1, s.c(), 1, 1), dbeta).unwrap(),
    )
}

/// Group-of-one norm over token maps: x is `[S, n, d, 1]` with `S = batch * P`;
/// statistics span everything belonging to one original sample, affine is per
/// feature.
pub fn groupnorm_tokens<T: Element>(
    x: &Tensor<T>,
    batch: usize,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: f64,
) -> Result<Tensor<T>> {
    let s = x.shape();
    let d = s.h();
    if gamma.numel() != d || s.n() % batch != 0 {
        return Err(TensorError::ShapeMismatch {
            op: "groupnorm_tokens",
            detail: format!("affine {} vs d {}, S {} vs batch {}", gamma.numel(), d, s.n(), batch),
        });
    }
    let region = (s.n() / batch) * s.c() * d;
    let (xd, gd, bd) = (x.data(), gamma.data(), beta.data());
    let mut out = vec![T::ZERO; x.numel()];
    for b in 0..batch {
        let seg = &xd[b * region..(b + 1) * region];
        let (mu, inv) = lane_stats(seg, eps);
        let dst = &mut out[b * region..(b + 1) * region];
        for (i, v) in seg.iter().enumerate() {
            let f = i % d;
            dst[i] = (*v - mu) * inv * gd[f] + bd[f];
        }
    }
    Tensor::new(s, out)
}

pub fn groupnorm_tokens_vjp<T: Element>(
    dy: &Tensor<T>,
    x: &Tensor<T>,
    batch: usize,
    gamma: &Tensor<T>,
    eps: f64,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let s = x.shape();
    let d = s.h();
    let region = (s.n() / batch) * s.c() * d;
    let m = T::from_f64(region as f64);
    let (dyd, xd, gd) = (dy.data(), x.data(), gamma.data());
    let mut dx = vec![T::ZERO; x.numel()];
    let mut dgamma = vec![T::ZERO; d];
    let mut dbeta = vec![T::ZERO; d];
    for b in 0..batch {
        let seg = &xd[b * region..(b + 1) * region];
        let dseg = &dyd[b * region..(b + 1) * region];
        let (mu, inv) = lane_stats(seg, eps);
        let mut sum_g = T::ZERO;
        let mut sum_gx = T::ZERO;
        for i in 0..region {
            let f = i % d;
            let xhat = (seg[i] - mu) * inv;
            dgamma[f] += dseg[i] * xhat;
            dbeta[f] += dseg[i];
            let g = dseg[i] * gd[f];
            sum_g += g;
            sum_gx += g * xhat;
        }
        let dst = &mut dx[b * region..(b + 1) * region];
        for i in 0..region {
            let f = i % d;
            let xhat = (seg[i] - mu) * inv;
            let g = dseg[i] * gd[f];
            dst[i] = inv * (g - sum_g / m - xhat * (sum_gx / m));
        }
    }
    (
        Tensor::new(s, dx).unwrap(),
        Tensor::new(Shape::nchw(1, d, 1, 1), dgamma).unwrap(),
        Tensor::new(Shape::nchw(1, d, 1, 1), dbeta).unwrap(),
    )
}

// ---------------------------------------------------------------------------
// Pooling, reshaping, patches
// ---------------------------------------------------------------------------

pub fn global_avg_pool<T: Element>(x: &Tensor<T>) -> Tensor<T> {
    let s = x.shape();
    let l = s.h() * s.w();
    let xd = x.data();
    let mut out = vec![T::ZERO; s.n() * s.c()];
    for (i, o) in out.iter_mut().enumerate() {
        let mut sum = T::ZERO;
        for v in &xd[i * l..(i + 1) * l] {
            sum += *v;
        }
        *o = sum / T::from_f64(l as f64);
    }
    Tensor::new(Shape::nchw(s.n(), s.c(), 1, 1), out).unwrap()
}

pub fn global_avg_pool_vjp<T: Element>(dy: &Tensor<T>, x_shape: Shape) -> Tensor<T> {
    let l = x_shape.h() * x_shape.w();
    let inv = T::ONE / T::from_f64(l as f64);
    let dyd = dy.data();
    let mut dx = vec![T::ZERO; x_shape.numel()];
    for (i, chunk) in dx.chunks_mut(l).enumerate() {
        let g = dyd[i] * inv;
        chunk.fill(g);
    }
    Tensor::new(x_shape, dx).unwrap()
}

/// Rearrange `[N, d, H, W]` into `ph*pw` token sequences per sample: output is
/// `[N*ph*pw, H*W/(ph*pw), d, 1]`. Pixels at the same intra-patch offset form
/// one sequence; exact inverse of [`fold`].
pub fn unfold<T: Element>(x: &Tensor<T>, ph: usize, pw: usize) -> Result<Tensor<T>> {
    let s = x.shape();
    if ph == 0 || pw == 0 || s.h() % ph != 0 || s.w() % pw != 0 {
        return Err(TensorError::PatchDivisibility {
            h: s.h(),
            w: s.w(),
            ph,
            pw,
        });
    }
    let (nh, nw) = (s.h() / ph, s.w() / pw);
    let tokens = nh * nw;
    let xd = x.data();
    let mut out = vec![T::ZERO; x.numel()];
    let d = s.c();
    for b in 0..s.n() {
        for dy in 0..ph {
            for dx in 0..pw {
                let seq = (b * ph + dy) * pw + dx;
                for py in 0..nh {
                    for px in 0..nw {
                        let t = py * nw + px;
                        let (h, w) = (py * ph + dy, px * pw + dx);
                        for c in 0..d {
                            out[(seq * tokens + t) * d + c] = xd[s.idx(b, c, h, w)];
                        }
                    }
                }
            }
        }
    }
    Tensor::new(Shape::nchw(s.n() * ph * pw, tokens, d, 1), out)
}

/// Exact inverse of [`unfold`].
pub fn fold<T: Element>(
    t: &Tensor<T>,
    ph: usize,
    pw: usize,
    h: usize,
    w: usize,
) -> Result<Tensor<T>> {
    let s = t.shape();
    let p = ph * pw;
    if p == 0 || s.n() % p != 0 || h % ph != 0 || w % pw != 0 {
        return Err(TensorError::PatchDivisibility { h, w, ph, pw });
    }
    let n = s.n() / p;
    let (nh, nw) = (h / ph, w / pw);
    if s.c() != nh * nw {
        return Err(TensorError::ShapeMismatch {
            op: "fold",
            detail: format!(
                "token count {} inconsistent with {}x{} map and {}x{} patch",
                s.c(),
                h,
                w,
                ph,
                pw
            ),
        });
    }
    let d = s.h();
    let tokens = s.c();
    let td = t.data();
    let out_shape = Shape::nchw(n, d, h, w);
    let mut out = vec![T::ZERO; out_shape.numel()];
    for b in 0..n {
        for dy in 0..ph {
            for dx in 0..pw {
                let seq = (b * ph + dy) * pw + dx;
                for py in 0..nh {
                    for px in 0..nw {
                        let t_ix = py * nw + px;
                        let (hh, ww) = (py * ph + dy, px * pw + dx);
                        for c in 0..d {
                            out[out_shape.idx(b, c, hh, ww)] = td[(seq * tokens + t_ix) * d + c];
                        }
                    }
                }
            }
        }
    }
    Tensor::new(out_shape, out)
}

/// `[S, n, d, 1]` -> `[S*h, n, d/h, 1]`
pub fn head_split<T: Element>(x: &Tensor<T>, heads: usize) -> Result<Tensor<T>> {
    let s = x.shape();
    let d = s.h();
    if d % heads != 0 {
        return Err(TensorError::ShapeMismatch {
            op: "head_split",
            detail: format!("dim {d} not divisible by {heads} heads"),
        });
    }
    let dh = d / heads;
    let xd = x.data();
    let mut out = vec![T::ZERO; x.numel()];
    for seq in 0..s.n() {
        for t in 0..s.c() {
            for hh in 0..heads {
                for j in 0..dh {
                    out[(((seq * heads + hh) * s.c()) + t) * dh + j] =
                        xd[(seq * s.c() + t) * d + hh * dh + j];
                }
            }
        }
    }
    Tensor::new(Shape::nchw(s.n() * heads, s.c(), dh, 1), out)
}

/// Inverse of [`head_split`].
pub fn head_merge<T: Element>(x: &Tensor<T>, heads: usize) -> Result<Tensor<T>> {
    let s = x.shape();
    let dh = s.h();
    let seqs = s.n() / heads;
    let d = dh * heads;
    let xd = x.data();
    let mut out = vec![T::ZERO; x.numel()];
    for seq in 0..seqs {
        for t in 0..s.c() {
            for hh in 0..heads {
                for j in 0..dh {
                    out[(seq * s.c() + t) * d + hh * dh + j] =
                        xd[(((seq * heads + hh) * s.c()) + t) * dh + j];
                }
            }
        }
    }
    Tensor::new(Shape::nchw(seqs, s.c(), d, 1), out)
}

pub fn concat_channels<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.n() != sb.n() || sa.h() != sb.h() || sa.w() != sb.w() {
        return Err(TensorError::ShapeMismatch {
            op: "concat",
            detail: format!("{sa} vs {sb}"),
        });
    }
    let l = sa.h() * sa.w();
    let out_shape = Shape::nchw(sa.n(), sa.c() + sb.c(), sa.h(), sa.w());
    let mut out = vec![T::ZERO; out_shape.numel()];
    let (ad, bd) = (a.data(), b.data());
    for n in 0..sa.n() {
        let dst = &mut out[n * (sa.c() + sb.c()) * l..];
        dst[..sa.c() * l].copy_from_slice(&ad[n * sa.c() * l..(n + 1) * sa.c() * l]);
        dst[sa.c() * l..(sa.c() + sb.c()) * l]
            .copy_from_slice(&bd[n * sb.c() * l..(n + 1) * sb.c() * l]);
    }
    Tensor::new(out_shape, out)
}

pub fn slice_channels<T: Element>(x: &Tensor<T>, offset: usize, len: usize) -> Tensor<T> {
    let s = x.shape();
    let l = s.h() * s.w();
    let xd = x.data();
    let mut out = vec![T::ZERO; s.n() * len * l];
    for n in 0..s.n() {
        out[n * len * l..(n + 1) * len * l]
            .copy_from_slice(&xd[(n * s.c() + offset) * l..(n * s.c() + offset + len) * l]);
    }
    Tensor::new(Shape::nchw(s.n(), len, s.h(), s.w()), out).unwrap()
}

/// Slice the feature axis of a token tensor `[S, n, D, 1]`.
pub fn slice_tokens<T: Element>(x: &Tensor<T>, offset: usize, len: usize) -> Tensor<T> {
    let s = x.shape();
    let d = s.h();
    let xd = x.data();
    let mut out = vec![T::ZERO; s.n() * s.c() * len];
    for row in 0..s.n() * s.c() {
        out[row * len..(row + 1) * len].copy_from_slice(&xd[row * d + offset..row * d + offset + len]);
    }
    Tensor::new(Shape::nchw(s.n(), s.c(), len, 1), out).unwrap()
}

pub fn slice_tokens_vjp<T: Element>(dy: &Tensor<T>, x_shape: Shape, offset: usize) -> Tensor<T> {
    let d = x_shape.h();
    let len = dy.shape().h();
    let dyd = dy.data();
    let mut dx = vec![T::ZERO; x_shape.numel()];
    for row in 0..x_shape.n() * x_shape.c() {
        dx[row * d + offset..row * d + offset + len].copy_from_slice(&dyd[row * len..(row + 1) * len]);
    }
    Tensor::new(x_shape, dx).unwrap()
}

/// v ⊙ ctx with ctx broadcast over the token axis: v `[S, n, d, 1]`,
/// ctx `[S, 1, d, 1]`.
pub fn mul_bcast_tokens<T: Element>(v: &Tensor<T>, ctx: &Tensor<T>) -> Result<Tensor<T>> {
    let (sv, sc) = (v.shape(), ctx.shape());
    if sv.n() != sc.n() || sc.c() != 1 || sv.h() != sc.h() {
        return Err(TensorError::ShapeMismatch {
            op: "mul_bcast_tokens",
            detail: format!("{sv} vs {sc}"),
        });
    }
    let d = sv.h();
    let (vd, cd) = (v.data(), ctx.data());
    let mut out = vec![T::ZERO; v.numel()];
    for seq in 0..sv.n() {
        let cseg = &cd[seq * d..(seq + 1) * d];
        for t in 0..sv.c() {
            let off = (seq * sv.c() + t) * d;
            for j in 0..d {
                out[off + j] = vd[off + j] * cseg[j];
            }
        }
    }
    Tensor::new(sv, out)
}

pub fn mul_bcast_tokens_vjp<T: Element>(
    dy: &Tensor<T>,
    v: &Tensor<T>,
    ctx: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>) {
    let sv = v.shape();
    let d = sv.h();
    let (dyd, vd, cd) = (dy.data(), v.data(), ctx.data());
    let mut dv = vec![T::ZERO; v.numel()];
    let mut dctx = vec![T::ZERO; ctx.numel()];
    for seq in 0..sv.n() {
        let cseg = &cd[seq * d..(seq + 1) * d];
        let dcseg = &mut dctx[seq * d..(seq + 1) * d];
        for t in 0..sv.c() {
            let off = (seq * sv.c() + t) * d;
            for j in 0..d {
                dv[off + j] = dyd[off + j] * cseg[j];
                dcseg[j] += dyd[off + j] * vd[off + j];
            }
        }
    }
    (
        Tensor::new(sv, dv).unwrap(),
        Tensor::new(ctx.shape(), dctx).unwrap(),
    )
}

// ---------------------------------------------------------------------------
// Reductions and losses
// ---------------------------------------------------------------------------

pub fn sum_all<T: Element>(x: &Tensor<T>) -> Tensor<T> {
    let mut s = T::ZERO;
    for &v in x.data() {
        s += v;
    }
    Tensor::scalar(s)
}

/// Mean cross-entropy over the batch; logits `[N, K, 1, 1]`. Returns the loss
/// and the softmax probabilities for the backward pass.
pub fn cross_entropy<T: Element>(
    logits: &Tensor<T>,
    targets: &[usize],
) -> Result<(Tensor<T>, Tensor<T>)> {
    let s = logits.shape();
    if s.n() != targets.len() || s.h() != 1 || s.w() != 1 {
        return Err(TensorError::ShapeMismatch {
            op: "cross_entropy",
            detail: format!("logits {s} vs {} targets", targets.len()),
        });
    }
    let probs = softmax(logits, 1);
    let pd = probs.data();
    let k = s.c();
    let mut loss = 0.0f64;
    for (n, &t) in targets.iter().enumerate() {
        loss -= pd[n * k + t].to_f64().max(1e-300).ln();
    }
    loss /= targets.len() as f64;
    Ok((Tensor::scalar(T::from_f64(loss)), probs))
}

pub fn cross_entropy_vjp<T: Element>(
    dy: &Tensor<T>,
    probs: &Tensor<T>,
    targets: &[usize],
) -> Tensor<T> {
    let s = probs.shape();
    let k = s.c();
    let g = dy.data()[0] / T::from_f64(targets.len() as f64);
    let pd = probs.data();
    let mut dx = vec![T::ZERO; probs.numel()];
    for (n, &t) in targets.iter().enumerate() {
        for c in 0..k {
            let onehot = if c == t { T::ONE } else { T::ZERO };
            dx[n * k + c] = (pd[n * k + c] - onehot) * g;
        }
    }
    Tensor::new(s, dx).unwrap()
}
