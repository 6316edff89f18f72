//! Raw forward/backward kernels over flat slices.
//!
//! Accumulation order is fixed: gemm rows in output order, then kernel taps
//! in `(channel, ky, kx)` order. Encoder and decoder rely on this to agree
//! bitwise.

use super::{Real, Shape, ShapeError, Tensor};

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvGeom {
    pub fn new(c: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize) -> Option<Self> {
        if stride == 0 || k == 0 || h + 2 * pad < k || w + 2 * pad < k {
            return None;
        }
        Some(Self {
            c,
            h,
            w,
            k,
            stride,
            pad,
            h_out: (h + 2 * pad - k) / stride + 1,
            w_out: (w + 2 * pad - k) / stride + 1,
        })
    }

    fn rows(&self) -> usize {
        self.c * self.k * self.k
    }

    fn cols(&self) -> usize {
        self.h_out * self.w_out
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    /// Output columns `[lo, hi)` whose source coordinate for tap `kk` falls
    /// inside `0..len`.
    fn valid_range(&self, kk: usize, len: usize, out_len: usize) -> (usize, usize) {
        let s = self.stride as isize;
        let off = kk as isize - self.pad as isize;
        // o * s + off >= 0  and  o * s + off <= len - 1
        let lo = if off >= 0 { 0 } else { (-off + s - 1) / s };
        let hi_num = len as isize - 1 - off;
        let hi = if hi_num < 0 { -1 } else { hi_num / s };
        let lo = lo.max(0) as usize;
        let hi = ((hi + 1).max(0) as usize).min(out_len);
        (lo.min(hi), hi)
    }
}

/// Unfolds one image `(c, h, w)` into a `(c*k*k, h_out*w_out)` matrix.
pub(crate) fn im2col<R: Real>(src: &[R], g: &ConvGeom, cols: &mut [R]) {
    let hw = g.cols();
    for ci in 0..g.c {
        let plane = &src[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            let (oy_lo, oy_hi) = g.valid_range(ky, g.h, g.h_out);
            for kx in 0..g.k {
                let (ox_lo, ox_hi) = g.valid_range(kx, g.w, g.w_out);
                let row = (ci * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                dst.iter_mut().for_each(|v| *v = R::zero());
                if ox_lo == ox_hi {
                    continue;
                }
                for oy in oy_lo..oy_hi {
                    let iy = oy * g.stride + ky - g.pad;
                    let src_row = &plane[iy * g.w..(iy + 1) * g.w];
                    let dst_row = &mut dst[oy * g.w_out..(oy + 1) * g.w_out];
                    if g.stride == 1 {
                        let ix0 = ox_lo + kx - g.pad;
                        dst_row[ox_lo..ox_hi].copy_from_slice(&src_row[ix0..ix0 + ox_hi - ox_lo]);
                    } else {
                        for ox in ox_lo..ox_hi {
                            dst_row[ox] = src_row[ox * g.stride + kx - g.pad];
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters-and-adds columns back into `(c, h, w)`.
pub(crate) fn col2im<R: Real>(cols: &[R], g: &ConvGeom, dst: &mut [R]) {
    let hw = g.cols();
    for ci in 0..g.c {
        let plane = &mut dst[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            let (oy_lo, oy_hi) = g.valid_range(ky, g.h, g.h_out);
            for kx in 0..g.k {
                let (ox_lo, ox_hi) = g.valid_range(kx, g.w, g.w_out);
                let row = (ci * g.k + ky) * g.k + kx;
                let src = &cols[row * hw..(row + 1) * hw];
                for oy in oy_lo..oy_hi {
                    let iy = oy * g.stride + ky - g.pad;
                    let dst_row = &mut plane[iy * g.w..(iy + 1) * g.w];
                    let src_row = &src[oy * g.w_out..(oy + 1) * g.w_out];
                    for ox in ox_lo..ox_hi {
                        dst_row[ox * g.stride + kx - g.pad] += src_row[ox];
                    }
                }
            }
        }
    }
}

fn add_bias<R: Real>(out: &mut [R], bias: &[R], plane: usize) {
    for (chunk, &b) in out.chunks_mut(plane).zip(bias.iter()) {
        chunk.iter_mut().for_each(|v| *v += b);
    }
}

fn bias_grad<R: Real>(g_out: &[R], plane: usize, db: &mut [R]) {
    for (chunk, d) in g_out.chunks(plane).zip(db.iter_mut()) {
        *d += chunk.iter().copied().sum::<R>();
    }
}

pub(crate) struct ConvShapes {
    pub geom: ConvGeom,
    pub c_out: usize,
    pub out: Shape,
}

pub(crate) fn conv2d_shapes(
    x: Shape,
    w: Shape,
    bias: Option<Shape>,
    stride: usize,
    pad: usize,
) -> Result<ConvShapes, ShapeError> {
    if w.h != w.w {
        return Err(ShapeError::new("conv2d", format!("non-square kernel {w}")));
    }
    if w.c != x.c {
        return Err(ShapeError::new(
            "conv2d",
            format!("input has {} channels, kernel {w} expects {}", x.c, w.c),
        ));
    }
    if !(1..=2).contains(&stride) {
        return Err(ShapeError::new(
            "conv2d",
            format!("stride {stride} not in {{1, 2}}"),
        ));
    }
    if let Some(b) = bias {
        if b.numel() != w.n {
            return Err(ShapeError::new(
                "conv2d",
                format!("bias {b} does not match {} output channels", w.n),
            ));
        }
    }
    let geom = ConvGeom::new(x.c, x.h, x.w, w.h, stride, pad).ok_or_else(|| {
        ShapeError::new(
            "conv2d",
            format!("input {x} too small for kernel {w} with padding {pad}"),
        )
    })?;
    Ok(ConvShapes {
        geom,
        c_out: w.n,
        out: Shape::new(x.n, w.n, geom.h_out, geom.w_out),
    })
}

pub(crate) fn conv2d_forward<R: Real>(
    x: &Tensor<R>,
    w: &Tensor<R>,
    bias: Option<&Tensor<R>>,
    s: &ConvShapes,
) -> Tensor<R> {
    let g = &s.geom;
    let in_len = g.c * g.h * g.w;
    let out_len = s.c_out * g.cols();
    let mut out = vec![R::zero(); s.out.numel()];
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![R::zero(); g.rows() * g.cols()]
    };
    for n in 0..s.out.n {
        let src = &x.data()[n * in_len..(n + 1) * in_len];
        let dst = &mut out[n * out_len..(n + 1) * out_len];
        let cols_ref: &[R] = if g.is_pointwise() {
            src
        } else {
            im2col(src, g, &mut cols);
            &cols
        };
        R::gemm(
            s.c_out,
            g.rows(),
            g.cols(),
            w.data(),
            false,
            cols_ref,
            false,
            R::zero(),
            dst,
        );
        if let Some(b) = bias {
            add_bias(dst, b.data(), g.cols());
        }
    }
    Tensor::from_parts(s.out, out)
}

pub(crate) struct ConvGrads<R> {
    pub dx: Option<Vec<R>>,
    pub dw: Option<Vec<R>>,
    pub db: Option<Vec<R>>,
}

pub(crate) fn conv2d_backward<R: Real>(
    x: &Tensor<R>,
    w: &Tensor<R>,
    s: &ConvShapes,
    g_out: &[R],
    want: [bool; 3],
) -> ConvGrads<R> {
    let g = &s.geom;
    let in_len = g.c * g.h * g.w;
    let out_len = s.c_out * g.cols();
    let mut dx = want[0].then(|| vec![R::zero(); x.numel()]);
    let mut dw = want[1].then(|| vec![R::zero(); w.numel()]);
    let mut db = want[2].then(|| vec![R::zero(); s.c_out]);
    let mut cols = vec![R::zero(); g.rows() * g.cols()];
    for n in 0..s.out.n {
        let src = &x.data()[n * in_len..(n + 1) * in_len];
        let gn = &g_out[n * out_len..(n + 1) * out_len];
        if let Some(dw) = dw.as_mut() {
            let cols_ref: &[R] = if g.is_pointwise() {
                src
            } else {
                im2col(src, g, &mut cols);
                &cols
            };
            R::gemm(
                s.c_out,
                g.cols(),
                g.rows(),
                gn,
                false,
                cols_ref,
                true,
                R::one(),
                dw,
            );
        }
        if let Some(db) = db.as_mut() {
            bias_grad(gn, g.cols(), db);
        }
        if let Some(dx) = dx.as_mut() {
            let dst = &mut dx[n * in_len..(n + 1) * in_len];
            if g.is_pointwise() {
                R::gemm(
                    g.rows(),
                    s.c_out,
                    g.cols(),
                    w.data(),
                    true,
                    gn,
                    false,
                    R::zero(),
                    dst,
                );
            } else {
                R::gemm(
                    g.rows(),
                    s.c_out,
                    g.cols(),
                    w.data(),
                    true,
                    gn,
                    false,
                    R::zero(),
                    &mut cols,
                );
                col2im(&cols, g, dst);
            }
        }
    }
    ConvGrads { dx, dw, db }
}

/// Padding that makes a stride-`s` transposed conv produce exactly `s*H`.
pub(crate) fn deconv_padding(k: usize, stride: usize) -> usize {
    (k + 1).saturating_sub(stride) / 2
}

pub(crate) fn deconv2d_shapes(
    x: Shape,
    w: Shape,
    bias: Option<Shape>,
    stride: usize,
) -> Result<ConvShapes, ShapeError> {
    if w.h != w.w {
        return Err(ShapeError::new(
            "deconv2d",
            format!("non-square kernel {w}"),
        ));
    }
    if w.n != x.c {
        return Err(ShapeError::new(
            "deconv2d",
            format!("input has {} channels, kernel {w} expects {}", x.c, w.n),
        ));
    }
    if !(1..=2).contains(&stride) {
        return Err(ShapeError::new(
            "deconv2d",
            format!("stride {stride} not in {{1, 2}}"),
        ));
    }
    if let Some(b) = bias {
        if b.numel() != w.c {
            return Err(ShapeError::new(
                "deconv2d",
                format!("bias {b} does not match {} output channels", w.c),
            ));
        }
    }
    let pad = deconv_padding(w.h, stride);
    let (h, wd) = (x.h * stride, x.w * stride);
    // Geometry of the forward conv this op is the adjoint of.
    let geom = ConvGeom::new(w.c, h, wd, w.h, stride, pad)
        .filter(|g| g.h_out == x.h && g.w_out == x.w)
        .ok_or_else(|| {
            ShapeError::new(
                "deconv2d",
                format!("kernel {w} with stride {stride} cannot upsample {x}"),
            )
        })?;
    Ok(ConvShapes {
        geom,
        c_out: w.c,
        out: Shape::new(x.n, w.c, h, wd),
    })
}

pub(crate) fn deconv2d_forward<R: Real>(
    x: &Tensor<R>,
    w: &Tensor<R>,
    bias: Option<&Tensor<R>>,
    s: &ConvShapes,
) -> Tensor<R> {
    let g = &s.geom;
    let c_in = x.shape().c;
    let in_len = c_in * g.cols();
    let out_len = g.c * g.h * g.w;
    let mut out = vec![R::zero(); s.out.numel()];
    let mut cols = vec![R::zero(); g.rows() * g.cols()];
    for n in 0..s.out.n {
        let src = &x.data()[n * in_len..(n + 1) * in_len];
        R::gemm(
            g.rows(),
            c_in,
            g.cols(),
            w.data(),
            true,
            src,
            false,
            R::zero(),
            &mut cols,
        );
        let dst = &mut out[n * out_len..(n + 1) * out_len];
        col2im(&cols, g, dst);
        if let Some(b) = bias {
            add_bias(dst, b.data(), g.h * g.w);
        }
    }
    Tensor::from_parts(s.out, out)
}

pub(crate) fn deconv2d_backward<R: Real>(
    x: &Tensor<R>,
    w: &Tensor<R>,
    s: &ConvShapes,
    g_out: &[R],
    want: [bool; 3],
) -> ConvGrads<R> {
    let g = &s.geom;
    let c_in = x.shape().c;
    let in_len = c_in * g.cols();
    let out_len = g.c * g.h * g.w;
    let mut dx = want[0].then(|| vec![R::zero(); x.numel()]);
    let mut dw = want[1].then(|| vec![R::zero(); w.numel()]);
    let mut db = want[2].then(|| vec![R::zero(); g.c]);
    let mut cols = vec![R::zero(); g.rows() * g.cols()];
    for n in 0..s.out.n {
        let gn = &g_out[n * out_len..(n + 1) * out_len];
        if let Some(db) = db.as_mut() {
            bias_grad(gn, g.h * g.w, db);
        }
        if dx.is_none() && dw.is_none() {
            continue;
        }
        im2col(gn, g, &mut cols);
        if let Some(dx) = dx.as_mut() {
            let dst = &mut dx[n * in_len..(n + 1) * in_len];
            R::gemm(
                c_in,
                g.rows(),
                g.cols(),
                w.data(),
                false,
                &cols,
                false,
                R::zero(),
                dst,
            );
        }
        if let Some(dw) = dw.as_mut() {
            let src = &x.data()[n * in_len..(n + 1) * in_len];
            R::gemm(
                c_in,
                g.cols(),
                g.rows(),
                src,
                false,
                &cols,
                true,
                R::one(),
                dw,
            );
        }
    }
    ConvGrads { dx, dw, db }
}

/// Bilinear tap for one output pixel: clamped source position split into
/// integer corners and fractional weights, plus whether each axis was
/// clamped (zero flow gradient there).
#[derive(Clone, Copy)]
struct Tap<R> {
    x0: usize,
    x1: usize,
    y0: usize,
    y1: usize,
    ax: R,
    ay: R,
    free_x: bool,
    free_y: bool,
}

#[inline]
fn tap<R: Real>(x: usize, y: usize, dx: R, dy: R, w: usize, h: usize) -> Tap<R> {
    let max_x = R::from_f64((w - 1) as f64);
    let max_y = R::from_f64((h - 1) as f64);
    let px_raw = R::from_f64(x as f64) + dx;
    let py_raw = R::from_f64(y as f64) + dy;
    let free_x = px_raw > R::zero() && px_raw < max_x;
    let free_y = py_raw > R::zero() && py_raw < max_y;
    let px = px_raw.max(R::zero()).min(max_x);
    let py = py_raw.max(R::zero()).min(max_y);
    let fx = px.floor();
    let fy = py.floor();
    let x0 = fx.as_f64() as usize;
    let y0 = fy.as_f64() as usize;
    Tap {
        x0,
        x1: (x0 + 1).min(w - 1),
        y0,
        y1: (y0 + 1).min(h - 1),
        ax: px - fx,
        ay: py - fy,
        free_x,
        free_y,
    }
}

pub(crate) fn warp_forward<R: Real>(src: &Tensor<R>, flow: &Tensor<R>) -> Tensor<R> {
    let s = src.shape();
    let plane = s.plane();
    let mut out = vec![R::zero(); s.numel()];
    let sd = src.data();
    let fd = flow.data();
    for n in 0..s.n {
        let fbase = n * 2 * plane;
        for y in 0..s.h {
            for x in 0..s.w {
                let p = y * s.w + x;
                let t = tap(x, y, fd[fbase + p], fd[fbase + plane + p], s.w, s.h);
                let one = R::one();
                for c in 0..s.c {
                    let base = (n * s.c + c) * plane;
                    let top = sd[base + t.y0 * s.w + t.x0] * (one - t.ax)
                        + sd[base + t.y0 * s.w + t.x1] * t.ax;
                    let bot = sd[base + t.y1 * s.w + t.x0] * (one - t.ax)
                        + sd[base + t.y1 * s.w + t.x1] * t.ax;
                    out[base + p] = top * (one - t.ay) + bot * t.ay;
                }
            }
        }
    }
    Tensor::from_parts(s, out)
}

pub(crate) fn warp_backward<R: Real>(
    src: &Tensor<R>,
    flow: &Tensor<R>,
    g_out: &[R],
    want: [bool; 2],
) -> (Option<Vec<R>>, Option<Vec<R>>) {
    let s = src.shape();
    let plane = s.plane();
    let sd = src.data();
    let fd = flow.data();
    let mut dsrc = want[0].then(|| vec![R::zero(); s.numel()]);
    let mut dflow = want[1].then(|| vec![R::zero(); flow.numel()]);
    let one = R::one();
    for n in 0..s.n {
        let fbase = n * 2 * plane;
        for y in 0..s.h {
            for x in 0..s.w {
                let p = y * s.w + x;
                let t = tap(x, y, fd[fbase + p], fd[fbase + plane + p], s.w, s.h);
                let mut gdx = R::zero();
                let mut gdy = R::zero();
                for c in 0..s.c {
                    let base = (n * s.c + c) * plane;
                    let g = g_out[base + p];
                    if let Some(ds) = dsrc.as_mut() {
                        ds[base + t.y0 * s.w + t.x0] += g * (one - t.ay) * (one - t.ax);
                        ds[base + t.y0 * s.w + t.x1] += g * (one - t.ay) * t.ax;
                        ds[base + t.y1 * s.w + t.x0] += g * t.ay * (one - t.ax);
                        ds[base + t.y1 * s.w + t.x1] += g * t.ay * t.ax;
                    }
                    if dflow.is_some() {
                        let s00 = sd[base + t.y0 * s.w + t.x0];
                        let s01 = sd[base + t.y0 * s.w + t.x1];
                        let s10 = sd[base + t.y1 * s.w + t.x0];
                        let s11 = sd[base + t.y1 * s.w + t.x1];
                        if t.free_x {
                            gdx += g * ((one - t.ay) * (s01 - s00) + t.ay * (s11 - s10));
                        }
                        if t.free_y {
                            gdy += g * ((one - t.ax) * (s10 - s00) + t.ax * (s11 - s01));
                        }
                    }
                }
                if let Some(df) = dflow.as_mut() {
                    df[fbase + p] += gdx;
                    df[fbase + plane + p] += gdy;
                }
            }
        }
    }
    (dsrc, dflow)
}
