//! Raw loops behind the tape primitives. Everything here works on flat
//! row-major slices; shape checking happens in the tape layer.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvGeometry {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
    pub groups: usize,
}

impl Default for ConvGeometry {
    fn default() -> Self {
        ConvGeometry {
            stride: 1,
            padding: 0,
            dilation: 1,
            groups: 1,
        }
    }
}

impl ConvGeometry {
    pub fn new(stride: usize, padding: usize, dilation: usize, groups: usize) -> Self {
        ConvGeometry {
            stride,
            padding,
            dilation,
            groups,
        }
    }

    /// Output extent along one spatial axis.
    pub fn out_len(&self, input: usize, kernel: usize) -> Result<usize> {
        if self.stride == 0 || self.dilation == 0 {
            return Err(Error::invalid("stride and dilation must be positive"));
        }
        let span = self.dilation * (kernel - 1) + 1;
        let padded = input + 2 * self.padding;
        if kernel == 0 || span > padded {
            return Err(Error::invalid(format!(
                "kernel span {span} larger than padded input {padded}"
            )));
        }
        Ok((padded - span) / self.stride + 1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolKind {
    Max,
    Avg,
}

impl std::str::FromStr for PoolKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "max" => Ok(PoolKind::Max),
            "avg" => Ok(PoolKind::Avg),
            other => Err(Error::invalid(format!("unknown pool kind {other:?}"))),
        }
    }
}

/// Output positions `o` in `[lo, hi)` whose input index
/// `o * stride + offset - pad` falls inside `[0, in_len)`.
#[inline]
fn valid_range(out_len: usize, in_len: usize, stride: usize, offset: usize, pad: usize) -> (usize, usize) {
    let lo = if pad > offset {
        (pad - offset).div_ceil(stride)
    } else {
        0
    };
    let limit = in_len + pad;
    let hi = if limit > offset {
        ((limit - offset - 1) / stride + 1).min(out_len)
    } else {
        0
    };
    (lo.min(hi), hi)
}

pub(crate) fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `a` is `[k × m]`; returns `aᵀ · b` with `b` `[k × n]`.
pub(crate) fn matmul_tn(a: &[f64], b: &[f64], k: usize, m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for p in 0..k {
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let av = a[p * m + i];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `a` is `[m × k]`, `b` is `[n × k]`; returns `a · bᵀ`.
pub(crate) fn matmul_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            out[i * n + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    out
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvDims {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub f: usize,
    pub kh: usize,
    pub kw: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvDims {
    pub fn resolve(x: &[usize], w: &[usize], g: &ConvGeometry) -> Result<Self> {
        if x.len() != 4 || w.len() != 4 {
            return Err(Error::shape("conv2d", x, w));
        }
        let (n, c, h, wd) = (x[0], x[1], x[2], x[3]);
        let (f, cg, kh, kw) = (w[0], w[1], w[2], w[3]);
        if g.groups == 0 || c % g.groups != 0 || f % g.groups != 0 {
            return Err(Error::invalid(format!(
                "conv2d: channels {c} / filters {f} not divisible by groups {}",
                g.groups
            )));
        }
        if cg != c / g.groups {
            return Err(Error::shape("conv2d", x, w));
        }
        let ho = g.out_len(h, kh)?;
        let wo = g.out_len(wd, kw)?;
        Ok(ConvDims {
            n,
            c,
            h,
            w: wd,
            f,
            kh,
            kw,
            ho,
            wo,
        })
    }
}

fn is_pointwise(d: &ConvDims, g: &ConvGeometry) -> bool {
    d.kh == 1 && d.kw == 1 && g.stride == 1 && g.padding == 0 && g.groups == 1
}

/// Valid output ranges per kernel row and column, shared by every plane.
fn tap_ranges(d: &ConvDims, g: &ConvGeometry) -> (Vec<(usize, usize)>, Vec<(usize, usize)>) {
    let rows = (0..d.kh)
        .map(|ki| valid_range(d.ho, d.h, g.stride, ki * g.dilation, g.padding))
        .collect();
    let cols = (0..d.kw)
        .map(|kj| valid_range(d.wo, d.w, g.stride, kj * g.dilation, g.padding))
        .collect();
    (rows, cols)
}

pub(crate) fn conv2d_forward(x: &[f64], w: &[f64], d: &ConvDims, g: &ConvGeometry) -> Vec<f64> {
    let (hw, ohw) = (d.h * d.w, d.ho * d.wo);
    if is_pointwise(d, g) {
        let mut out = Vec::with_capacity(d.n * d.f * ohw);
        for n in 0..d.n {
            out.extend(matmul(w, &x[n * d.c * hw..(n + 1) * d.c * hw], d.f, d.c, hw));
        }
        return out;
    }
    let cg = d.c / g.groups;
    let fpg = d.f / g.groups;
    let (rows, cols) = tap_ranges(d, g);
    let mut out = vec![0.0; d.n * d.f * ohw];
    for n in 0..d.n {
        for f in 0..d.f {
            let grp = f / fpg;
            let oplane = &mut out[(n * d.f + f) * ohw..(n * d.f + f + 1) * ohw];
            for ci in 0..cg {
                let c = grp * cg + ci;
                let xplane = &x[(n * d.c + c) * hw..(n * d.c + c + 1) * hw];
                for (ki, &(oy0, oy1)) in rows.iter().enumerate() {
                    for (kj, &(ox0, ox1)) in cols.iter().enumerate() {
                        let wv = w[((f * cg + ci) * d.kh + ki) * d.kw + kj];
                        if wv == 0.0 || ox0 >= ox1 {
                            continue;
                        }
                        let xoff = kj * g.dilation;
                        for oy in oy0..oy1 {
                            let iy = oy * g.stride + ki * g.dilation - g.padding;
                            let orow = &mut oplane[oy * d.wo + ox0..oy * d.wo + ox1];
                            let start = iy * d.w + ox0 * g.stride + xoff - g.padding;
                            if g.stride == 1 {
                                let xs = &xplane[start..start + orow.len()];
                                for (o, &xv) in orow.iter_mut().zip(xs) {
                                    *o += wv * xv;
                                }
                            } else {
                                for (j, o) in orow.iter_mut().enumerate() {
                                    *o += wv * xplane[start + j * g.stride];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Returns `(dx, dw)`; either may be skipped.
pub(crate) fn conv2d_backward(
    x: &[f64],
    w: &[f64],
    grad: &[f64],
    d: &ConvDims,
    g: &ConvGeometry,
    want_dx: bool,
    want_dw: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let (hw, ohw) = (d.h * d.w, d.ho * d.wo);
    if is_pointwise(d, g) {
        let mut dx = want_dx.then(|| Vec::with_capacity(x.len()));
        let mut dw = want_dw.then(|| vec![0.0; w.len()]);
        for n in 0..d.n {
            let gn = &grad[n * d.f * ohw..(n + 1) * d.f * ohw];
            let xn = &x[n * d.c * hw..(n + 1) * d.c * hw];
            if let Some(dx) = dx.as_mut() {
                dx.extend(matmul_tn(w, gn, d.f, d.c, hw));
            }
            if let Some(dw) = dw.as_mut() {
                for (a, b) in dw.iter_mut().zip(matmul_nt(gn, xn, d.f, hw, d.c)) {
                    *a += b;
                }
            }
        }
        return (dx, dw);
    }
    let cg = d.c / g.groups;
    let fpg = d.f / g.groups;
    let (rows, cols) = tap_ranges(d, g);
    let mut dx = want_dx.then(|| vec![0.0; x.len()]);
    let mut dw = want_dw.then(|| vec![0.0; w.len()]);
    for n in 0..d.n {
        for f in 0..d.f {
            let grp = f / fpg;
            let gplane = &grad[(n * d.f + f) * ohw..(n * d.f + f + 1) * ohw];
            for ci in 0..cg {
                let c = grp * cg + ci;
                let xbase = (n * d.c + c) * hw;
                for (ki, &(oy0, oy1)) in rows.iter().enumerate() {
                    for (kj, &(ox0, ox1)) in cols.iter().enumerate() {
                        if ox0 >= ox1 {
                            continue;
                        }
                        let widx = ((f * cg + ci) * d.kh + ki) * d.kw + kj;
                        let wv = w[widx];
                        let xoff = kj * g.dilation;
                        let mut acc = 0.0;
                        for oy in oy0..oy1 {
                            let iy = oy * g.stride + ki * g.dilation - g.padding;
                            let grow = &gplane[oy * d.wo + ox0..oy * d.wo + ox1];
                            // first valid column, so the index never goes negative
                            let rbase = xbase + iy * d.w + ox0 * g.stride + xoff - g.padding;
                            if g.stride == 1 {
                                let len = grow.len();
                                if let Some(dx) = dx.as_mut() {
                                    if wv != 0.0 {
                                        for (o, &gv) in dx[rbase..rbase + len].iter_mut().zip(grow) {
                                            *o += wv * gv;
                                        }
                                    }
                                }
                                if dw.is_some() {
                                    acc += grow.iter().zip(&x[rbase..rbase + len]).map(|(a, b)| a * b).sum::<f64>();
                                }
                            } else {
                                if let Some(dx) = dx.as_mut() {
                                    if wv != 0.0 {
                                        for (j, &gv) in grow.iter().enumerate() {
                                            dx[rbase + j * g.stride] += wv * gv;
                                        }
                                    }
                                }
                                if dw.is_some() {
                                    for (j, &gv) in grow.iter().enumerate() {
                                        acc += gv * x[rbase + j * g.stride];
                                    }
                                }
                            }
                        }
                        if let Some(dw) = dw.as_mut() {
                            dw[widx] += acc;
                        }
                    }
                }
            }
        }
    }
    (dx, dw)
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct PoolDims {
    pub planes: usize,
    pub h: usize,
    pub w: usize,
    pub ho: usize,
    pub wo: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl PoolDims {
    pub fn resolve(x: &[usize], kernel: usize, stride: usize, padding: usize) -> Result<Self> {
        if x.len() != 4 {
            return Err(Error::invalid(format!("pool2d expects NCHW input, got {x:?}")));
        }
        if padding >= kernel {
            return Err(Error::invalid(format!(
                "pool padding {padding} must be smaller than kernel {kernel}"
            )));
        }
        let geom = ConvGeometry::new(stride, padding, 1, 1);
        Ok(PoolDims {
            planes: x[0] * x[1],
            h: x[2],
            w: x[3],
            ho: geom.out_len(x[2], kernel)?,
            wo: geom.out_len(x[3], kernel)?,
            kernel,
            stride,
            padding,
        })
    }
}

/// Max pool; also returns, per output element, the flat input index that
/// won (first in row-major window order on ties).
pub(crate) fn max_pool_forward(x: &[f64], d: &PoolDims) -> (Vec<f64>, Vec<usize>) {
    let (hw, ohw) = (d.h * d.w, d.ho * d.wo);
    let mut out = vec![0.0; d.planes * ohw];
    let mut arg = vec![0usize; d.planes * ohw];
    for p in 0..d.planes {
        let base = p * hw;
        for oy in 0..d.ho {
            for ox in 0..d.wo {
                let mut best = f64::NEG_INFINITY;
                let mut best_idx = usize::MAX;
                for ki in 0..d.kernel {
                    let iy = (oy * d.stride + ki) as isize - d.padding as isize;
                    if iy < 0 || iy >= d.h as isize {
                        continue;
                    }
                    for kj in 0..d.kernel {
                        let ix = (ox * d.stride + kj) as isize - d.padding as isize;
                        if ix < 0 || ix >= d.w as isize {
                            continue;
                        }
                        let idx = base + iy as usize * d.w + ix as usize;
                        if best_idx == usize::MAX || x[idx] > best {
                            best = x[idx];
                            best_idx = idx;
                        }
                    }
                }
                let o = p * ohw + oy * d.wo + ox;
                out[o] = best;
                arg[o] = best_idx;
            }
        }
    }
    (out, arg)
}

/// Average pool; padded positions count as zeros in a full `kernel²` window.
pub(crate) fn avg_pool_forward(x: &[f64], d: &PoolDims) -> Vec<f64> {
    let (hw, ohw) = (d.h * d.w, d.ho * d.wo);
    let area = (d.kernel * d.kernel) as f64;
    let mut out = vec![0.0; d.planes * ohw];
    for p in 0..d.planes {
        let base = p * hw;
        for oy in 0..d.ho {
            for ox in 0..d.wo {
                let mut acc = 0.0;
                for ki in 0..d.kernel {
                    let iy = (oy * d.stride + ki) as isize - d.padding as isize;
                    if iy < 0 || iy >= d.h as isize {
                        continue;
                    }
                    let row = base + iy as usize * d.w;
                    for kj in 0..d.kernel {
                        let ix = (ox * d.stride + kj) as isize - d.padding as isize;
                        if ix >= 0 && ix < d.w as isize {
                            acc += x[row + ix as usize];
                        }
                    }
                }
                out[p * ohw + oy * d.wo + ox] = acc / area;
            }
        }
    }
    out
}

pub(crate) fn avg_pool_backward(grad: &[f64], d: &PoolDims) -> Vec<f64> {
    let (hw, ohw) = (d.h * d.w, d.ho * d.wo);
    let area = (d.kernel * d.kernel) as f64;
    let mut dx = vec![0.0; d.planes * hw];
    for p in 0..d.planes {
        let base = p * hw;
        for oy in 0..d.ho {
            for ox in 0..d.wo {
                let gv = grad[p * ohw + oy * d.wo + ox] / area;
                for ki in 0..d.kernel {
                    let iy = (oy * d.stride + ki) as isize - d.padding as isize;
                    if iy < 0 || iy >= d.h as isize {
                        continue;
                    }
                    let row = base + iy as usize * d.w;
                    for kj in 0..d.kernel {
                        let ix = (ox * d.stride + kj) as isize - d.padding as isize;
                        if ix >= 0 && ix < d.w as isize {
                            dx[row + ix as usize] += gv;
                        }
                    }
                }
            }
        }
    }
    dx
}
