//! Per-sample forward/backward kernels operating on `C×H×W` slices.
//!
//! Every routine here has a fixed loop and reduction order so repeated calls
//! are bit-identical.

/// `c (m×n) = op(a)·op(b)`, optionally added onto the existing `c`.
///
/// `a` is stored row-major as `m×k`, or as `k×m` when `ta` is set; likewise
/// `b` is `k×n` or `n×k` when `tb` is set.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    ta: bool,
    b: &[f64],
    tb: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the slice lengths checked above cover every element addressed
    // by the (m, k, n) extents and strides.
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

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub pad: usize,
    pub stride: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn new(c: usize, h: usize, w: usize, k: usize, pad: usize, stride: usize) -> Option<Self> {
        let span_h = h + 2 * pad;
        let span_w = w + 2 * pad;
        if span_h < k || span_w < k {
            return None;
        }
        Some(ConvGeom {
            c,
            h,
            w,
            k,
            pad,
            stride,
            oh: (span_h - k) / stride + 1,
            ow: (span_w - k) / stride + 1,
        })
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.pad == 0 && self.stride == 1
    }

    fn col_rows(&self) -> usize {
        self.c * self.k * self.k
    }

    /// Output columns `[lo, hi)` whose tap `kx` lands inside the input row.
    fn valid_range(&self, tap: usize, extent: usize, out: usize) -> (usize, usize) {
        let s = self.stride;
        let lo = if tap >= self.pad {
            0
        } else {
            (self.pad - tap).div_ceil(s)
        };
        let limit = extent + self.pad;
        let hi = if limit > tap {
            ((limit - tap - 1) / s + 1).min(out)
        } else {
            0
        };
        (lo.min(hi), hi)
    }
}

fn im2col(x: &[f64], g: &ConvGeom, cols: &mut [f64]) {
    let plane = g.oh * g.ow;
    for ci in 0..g.c {
        let src = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            let (ylo, yhi) = g.valid_range(ky, g.h, g.oh);
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                let (xlo, xhi) = g.valid_range(kx, g.w, g.ow);
                for oy in 0..g.oh {
                    let out_row = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    if oy < ylo || oy >= yhi || xlo >= xhi {
                        out_row.fill(0.0);
                        continue;
                    }
                    let iy = oy * g.stride + ky - g.pad;
                    let src_row = &src[iy * g.w..(iy + 1) * g.w];
                    out_row[..xlo].fill(0.0);
                    out_row[xhi..].fill(0.0);
                    if g.stride == 1 {
                        let start = xlo + kx - g.pad;
                        out_row[xlo..xhi].copy_from_slice(&src_row[start..start + (xhi - xlo)]);
                    } else {
                        for ox in xlo..xhi {
                            out_row[ox] = src_row[ox * g.stride + kx - g.pad];
                        }
                    }
                }
            }
        }
    }
}

fn col2im(cols: &[f64], g: &ConvGeom, dx: &mut [f64]) {
    let plane = g.oh * g.ow;
    for ci in 0..g.c {
        let dst = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            let (ylo, yhi) = g.valid_range(ky, g.h, g.oh);
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let src = &cols[row * plane..(row + 1) * plane];
                let (xlo, xhi) = g.valid_range(kx, g.w, g.ow);
                for oy in ylo..yhi {
                    let iy = oy * g.stride + ky - g.pad;
                    let dst_row = &mut dst[iy * g.w..(iy + 1) * g.w];
                    let src_row = &src[oy * g.ow..(oy + 1) * g.ow];
                    for ox in xlo..xhi {
                        dst_row[ox * g.stride + kx - g.pad] += src_row[ox];
                    }
                }
            }
        }
    }
}

/// One sample of `out = weight ⋆ x + bias` (cross-correlation).
pub(crate) fn conv2d_forward(x: &[f64], g: &ConvGeom, weight: &[f64], bias: &[f64], out: &mut [f64]) {
    let oc = bias.len();
    let plane = g.oh * g.ow;
    for (o, &b) in bias.iter().enumerate() {
        out[o * plane..(o + 1) * plane].fill(b);
    }
    if g.is_pointwise() {
        gemm(oc, g.c, plane, weight, false, x, false, out, true);
    } else {
        let mut cols = vec![0.0; g.col_rows() * plane];
        im2col(x, g, &mut cols);
        gemm(oc, g.col_rows(), plane, weight, false, &cols, false, out, true);
    }
}

/// Accumulates the weight and bias gradients of one sample and, when `dx` is
/// given, writes the input gradient into it.
pub(crate) fn conv2d_backward(
    x: &[f64],
    g: &ConvGeom,
    weight: &[f64],
    dout: &[f64],
    dw: &mut [f64],
    db: &mut [f64],
    dx: Option<&mut [f64]>,
) {
    let oc = db.len();
    let plane = g.oh * g.ow;
    for (o, acc) in db.iter_mut().enumerate() {
        *acc += dout[o * plane..(o + 1) * plane].iter().sum::<f64>();
    }
    let rows = g.col_rows();
    if g.is_pointwise() {
        gemm(oc, plane, rows, dout, false, x, true, dw, true);
        if let Some(dx) = dx {
            gemm(rows, oc, plane, weight, true, dout, false, dx, true);
        }
        return;
    }
    let mut cols = vec![0.0; rows * plane];
    im2col(x, g, &mut cols);
    gemm(oc, plane, rows, dout, false, &cols, true, dw, true);
    if let Some(dx) = dx {
        gemm(rows, oc, plane, weight, true, dout, false, &mut cols, false);
        col2im(&cols, g, dx);
    }
}

/// One sample of a 2×2, stride-2 transposed convolution.
/// `weight` is laid out `(in, out, 2, 2)`; `out` is `oc × 2h × 2w`.
pub(crate) fn conv_t2_forward(
    x: &[f64],
    (ic, h, w): (usize, usize, usize),
    weight: &[f64],
    bias: &[f64],
    out: &mut [f64],
) {
    let oc = bias.len();
    let hw = h * w;
    let mut tmp = vec![0.0; oc * 4 * hw];
    gemm(oc * 4, ic, hw, weight, true, x, false, &mut tmp, false);
    let ow = 2 * w;
    for o in 0..oc {
        let dst = &mut out[o * 4 * hw..(o + 1) * 4 * hw];
        for q in 0..4 {
            let (dy, dx) = (q / 2, q % 2);
            let src = &tmp[(o * 4 + q) * hw..(o * 4 + q + 1) * hw];
            for y in 0..h {
                let row = &mut dst[(2 * y + dy) * ow..(2 * y + dy + 1) * ow];
                for xx in 0..w {
                    row[2 * xx + dx] = src[y * w + xx] + bias[o];
                }
            }
        }
    }
}

pub(crate) fn conv_t2_backward(
    x: &[f64],
    (ic, h, w): (usize, usize, usize),
    weight: &[f64],
    dout: &[f64],
    dw: &mut [f64],
    db: &mut [f64],
    dx: Option<&mut [f64]>,
) {
    let oc = db.len();
    let hw = h * w;
    let ow = 2 * w;
    let mut dtmp = vec![0.0; oc * 4 * hw];
    for o in 0..oc {
        let src = &dout[o * 4 * hw..(o + 1) * 4 * hw];
        db[o] += src.iter().sum::<f64>();
        for q in 0..4 {
            let (dy, dxo) = (q / 2, q % 2);
            let dst = &mut dtmp[(o * 4 + q) * hw..(o * 4 + q + 1) * hw];
            for y in 0..h {
                let row = &src[(2 * y + dy) * ow..(2 * y + dy + 1) * ow];
                for xx in 0..w {
                    dst[y * w + xx] = row[2 * xx + dxo];
                }
            }
        }
    }
    gemm(ic, hw, oc * 4, x, false, &dtmp, true, dw, true);
    if let Some(dx) = dx {
        gemm(ic, oc * 4, hw, weight, false, &dtmp, false, dx, true);
    }
}

/// 2×2 stride-2 max pooling over `planes` planes of `h×w`; records the flat
/// source index of each maximum (first in row-major scan on ties).
pub(crate) fn maxpool2_forward(x: &[f64], planes: usize, h: usize, w: usize, out: &mut [f64], argmax: &mut [usize]) {
    let (oh, ow) = (h / 2, w / 2);
    for p in 0..planes {
        let base = p * h * w;
        for y in 0..oh {
            for xx in 0..ow {
                let mut best_idx = base + 2 * y * w + 2 * xx;
                let mut best = x[best_idx];
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * y + dy) * w + 2 * xx + dx;
                    if x[idx] > best {
                        best = x[idx];
                        best_idx = idx;
                    }
                }
                let o = p * oh * ow + y * ow + xx;
                out[o] = best;
                argmax[o] = best_idx;
            }
        }
    }
}

/// Source taps of one output coordinate along one axis.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Tap {
    pub lo: usize,
    pub hi: usize,
    pub frac: f64,
}

/// Half-pixel-centre bilinear taps mapping `src` samples onto `dst` samples.
pub(crate) fn bilinear_taps(src: usize, dst: usize) -> Vec<Tap> {
    (0..dst)
        .map(|d| {
            let pos = ((d as f64 + 0.5) * src as f64 / dst as f64 - 0.5).clamp(0.0, (src - 1) as f64);
            let lo = pos.floor() as usize;
            Tap {
                lo,
                hi: (lo + 1).min(src - 1),
                frac: pos - lo as f64,
            }
        })
        .collect()
}

pub(crate) fn resize_forward(
    x: &[f64],
    planes: usize,
    (h, w): (usize, usize),
    (oh, ow): (usize, usize),
    out: &mut [f64],
) {
    let ty = bilinear_taps(h, oh);
    let tx = bilinear_taps(w, ow);
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for (oy, a) in ty.iter().enumerate() {
            let r0 = &src[a.lo * w..(a.lo + 1) * w];
            let r1 = &src[a.hi * w..(a.hi + 1) * w];
            for (ox, b) in tx.iter().enumerate() {
                let top = (1.0 - b.frac) * r0[b.lo] + b.frac * r0[b.hi];
                let bot = (1.0 - b.frac) * r1[b.lo] + b.frac * r1[b.hi];
                dst[oy * ow + ox] = (1.0 - a.frac) * top + a.frac * bot;
            }
        }
    }
}

pub(crate) fn resize_backward(
    dout: &[f64],
    planes: usize,
    (h, w): (usize, usize),
    (oh, ow): (usize, usize),
    dx: &mut [f64],
) {
    let ty = bilinear_taps(h, oh);
    let tx = bilinear_taps(w, ow);
    for p in 0..planes {
        let src = &dout[p * oh * ow..(p + 1) * oh * ow];
        let dst = &mut dx[p * h * w..(p + 1) * h * w];
        for (oy, a) in ty.iter().enumerate() {
            for (ox, b) in tx.iter().enumerate() {
                let g = src[oy * ow + ox];
                let top = (1.0 - a.frac) * g;
                let bot = a.frac * g;
                dst[a.lo * w + b.lo] += (1.0 - b.frac) * top;
                dst[a.lo * w + b.hi] += b.frac * top;
                dst[a.hi * w + b.lo] += (1.0 - b.frac) * bot;
                dst[a.hi * w + b.hi] += b.frac * bot;
            }
        }
    }
}

/// Half-open source interval `[floor(i·n/s), ceil((i+1)·n/s))` of adaptive cell `i`.
pub fn adaptive_region(i: usize, n: usize, s: usize) -> (usize, usize) {
    (i * n / s, ((i + 1) * n).div_ceil(s))
}

pub(crate) fn adaptive_pool_forward(x: &[f64], planes: usize, (h, w): (usize, usize), s: usize, out: &mut [f64]) {
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        for i in 0..s {
            let (y0, y1) = adaptive_region(i, h, s);
            for j in 0..s {
                let (x0, x1) = adaptive_region(j, w, s);
                let mut acc = 0.0;
                for y in y0..y1 {
                    acc += src[y * w + x0..y * w + x1].iter().sum::<f64>();
                }
                out[p * s * s + i * s + j] = acc / ((y1 - y0) * (x1 - x0)) as f64;
            }
        }
    }
}

pub(crate) fn adaptive_pool_backward(dout: &[f64], planes: usize, (h, w): (usize, usize), s: usize, dx: &mut [f64]) {
    for p in 0..planes {
        let dst = &mut dx[p * h * w..(p + 1) * h * w];
        for i in 0..s {
            let (y0, y1) = adaptive_region(i, h, s);
            for j in 0..s {
                let (x0, x1) = adaptive_region(j, w, s);
                let g = dout[p * s * s + i * s + j] / ((y1 - y0) * (x1 - x0)) as f64;
                for y in y0..y1 {
                    for v in &mut dst[y * w + x0..y * w + x1] {
                        *v += g;
                    }
                }
            }
        }
    }
}

pub const BCE_EPS: f64 = 1e-7;

/// Fraction of negative pixels in a `{0,1}` target map.
pub fn negative_fraction(target: &[f64]) -> f64 {
    let negatives = target.iter().filter(|&&t| t == 0.0).count();
    negatives as f64 / target.len() as f64
}

/// Class-balanced binary cross-entropy of one map; `beta` weights positives.
pub fn weighted_bce_value(pred: &[f64], target: &[f64], beta: f64) -> f64 {
    let mut acc = 0.0;
    for (&p, &y) in pred.iter().zip(target) {
        let p = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
        acc += beta * y * p.ln() + (1.0 - beta) * (1.0 - y) * (1.0 - p).ln();
    }
    -acc / pred.len() as f64
}

pub(crate) fn weighted_bce_grad(pred: &[f64], target: &[f64], beta: f64, scale: f64, dx: &mut [f64]) {
    let inv = scale / pred.len() as f64;
    for ((d, &p), &y) in dx.iter_mut().zip(pred).zip(target) {
        if !(BCE_EPS..=1.0 - BCE_EPS).contains(&p) {
            continue;
        }
        *d += -inv * (beta * y / p - (1.0 - beta) * (1.0 - y) / (1.0 - p));
    }
}
