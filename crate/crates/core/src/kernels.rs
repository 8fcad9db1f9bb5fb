//! Forward and backward kernels for the dense NCHW operations used by the
//! tape. Convolution goes through im2col and a blocked GEMM.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `c = alpha * a * b + beta * c` with explicit row/column strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
    (rsc, csc): (usize, usize),
) {
    if m == 0 || n == 0 {
        return;
    }
    let last = |rows: usize, cols: usize, rs: usize, cs: usize| (rows - 1) * rs + (cols - 1) * cs;
    assert!(last(m, n, rsc, csc) < c.len());
    if k == 0 {
        c.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    assert!(last(m, k, rsa, csa) < a.len());
    assert!(last(k, n, rsb, csb) < b.len());
    // SAFETY: every index touched by dgemm is bounded by the asserts above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

fn expect_rank(op: &'static str, t: &Tensor, rank: usize) -> Result<()> {
    if t.rank() != rank {
        return Err(Error::dim(op, "rank", rank, t.rank()));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeometry {
    pub n: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvGeometry {
    pub fn new(input: &Tensor, weight: &Tensor, bias: &Tensor, stride: usize, pad: usize) -> Result<Self> {
        const OP: &str = "conv2d";
        expect_rank(OP, input, 4)?;
        expect_rank(OP, weight, 4)?;
        expect_rank(OP, bias, 1)?;
        let [n, c_in, h, w] = [input.shape()[0], input.shape()[1], input.shape()[2], input.shape()[3]];
        let [c_out, wc, kh, kw] = [weight.shape()[0], weight.shape()[1], weight.shape()[2], weight.shape()[3]];
        if wc != c_in {
            return Err(Error::dim(OP, "in_channels", c_in, wc));
        }
        if kh != kw {
            return Err(Error::dim(OP, "kernel_width", kh, kw));
        }
        if kh % 2 == 0 {
            return Err(Error::dim(OP, "kernel_height", "odd extent", kh));
        }
        if bias.shape()[0] != c_out {
            return Err(Error::dim(OP, "bias", c_out, bias.shape()[0]));
        }
        if stride == 0 {
            return Err(Error::dim(OP, "stride", ">= 1", 0));
        }
        if h + 2 * pad < kh {
            return Err(Error::dim(OP, "height", format!(">= {}", kh - 2 * pad.min(kh / 2)), h));
        }
        if w + 2 * pad < kw {
            return Err(Error::dim(OP, "width", format!(">= {}", kw - 2 * pad.min(kw / 2)), w));
        }
        Ok(ConvGeometry {
            n,
            c_in,
            h,
            w,
            c_out,
            k: kh,
            stride,
            pad,
            h_out: (h + 2 * pad - kh) / stride + 1,
            w_out: (w + 2 * pad - kw) / stride + 1,
        })
    }

    fn patch_len(&self) -> usize {
        self.c_in * self.k * self.k
    }

    fn plane(&self) -> usize {
        self.h_out * self.w_out
    }
}

/// Range of output columns `ox` whose input column `ox*stride + kj - pad`
/// falls inside `[0, w)`.
fn valid_columns(g: &ConvGeometry, kj: usize) -> std::ops::Range<usize> {
    let lo = g.pad.saturating_sub(kj).div_ceil(g.stride);
    let hi = if g.w + g.pad > kj {
        ((g.w + g.pad - kj - 1) / g.stride + 1).min(g.w_out)
    } else {
        0
    };
    lo..hi.max(lo)
}

/// Output rows per column tile: keeps the unfolded tile near 128 KiB so it
/// stays cache-resident while the GEMM packs it.
fn band_rows(g: &ConvGeometry) -> usize {
    const TILE_BYTES: usize = 128 * 1024;
    (TILE_BYTES / (8 * g.patch_len() * g.w_out).max(1)).clamp(1, g.h_out)
}

/// Unfolds output rows `rows` of one image `[c_in, h, w]` into a
/// `[c_in*k*k, rows.len()*w_out]` column matrix, writing zeros where the
/// patch overhangs the padding.
fn im2col(g: &ConvGeometry, x: &[f64], rows: std::ops::Range<usize>, cols: &mut [f64]) {
    let width = rows.len() * g.w_out;
    for c in 0..g.c_in {
        let src = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let dst_row = &mut cols[row * width..(row + 1) * width];
                let xs = valid_columns(g, kj);
                for (r, oy) in rows.clone().enumerate() {
                    let dst = &mut dst_row[r * g.w_out..(r + 1) * g.w_out];
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    let src_row = &src[iy as usize * g.w..(iy as usize + 1) * g.w];
                    dst[..xs.start].fill(0.0);
                    dst[xs.end..].fill(0.0);
                    if g.stride == 1 {
                        let ix0 = xs.start + kj - g.pad;
                        dst[xs.clone()].copy_from_slice(&src_row[ix0..ix0 + xs.len()]);
                    } else {
                        for ox in xs.clone() {
                            dst[ox] = src_row[ox * g.stride + kj - g.pad];
                        }
                    }
                }
            }
        }
    }
}

/// Folds the column matrix of output rows `rows` back onto one image
/// `[c_in, h, w]`, accumulating overlaps.
fn col2im(g: &ConvGeometry, cols: &[f64], rows: std::ops::Range<usize>, dx: &mut [f64]) {
    let width = rows.len() * g.w_out;
    for c in 0..g.c_in {
        let dst = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let src_row = &cols[row * width..(row + 1) * width];
                let xs = valid_columns(g, kj);
                for (r, oy) in rows.clone().enumerate() {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst_row = &mut dst[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let src = &src_row[r * g.w_out..(r + 1) * g.w_out];
                    for ox in xs.clone() {
                        dst_row[ox * g.stride + kj - g.pad] += src[ox];
                    }
                }
            }
        }
    }
}

/// Output-row bands `[start, end)` covering the output plane.
fn bands(g: &ConvGeometry) -> impl Iterator<Item = std::ops::Range<usize>> {
    let (step, h) = (band_rows(g), g.h_out);
    (0..h).step_by(step).map(move |r| r..(r + step).min(h))
}

pub(crate) fn conv2d(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    let g = ConvGeometry::new(x, w, b, stride, pad)?;
    let kk = g.patch_len();
    let plane = g.plane();
    let in_len = g.c_in * g.h * g.w;
    let out_len = g.c_out * plane;
    let mut cols = vec![0.0; kk * band_rows(&g) * g.w_out];
    let mut out = vec![0.0; g.n * out_len];
    for (n, y) in out.chunks_exact_mut(out_len).enumerate() {
        let img = &x.data()[n * in_len..(n + 1) * in_len];
        for (co, row) in y.chunks_exact_mut(plane).enumerate() {
            row.fill(b.data()[co]);
        }
        for rows in bands(&g) {
            let (off, width) = (rows.start * g.w_out, rows.len() * g.w_out);
            im2col(&g, img, rows, &mut cols);
            gemm(g.c_out, kk, width, w.data(), (kk, 1), &cols, (width, 1), 1.0, &mut y[off..], (plane, 1));
        }
    }
    Tensor::new(vec![g.n, g.c_out, g.h_out, g.w_out], out)
}

pub(crate) struct ConvGrads {
    pub input: Option<Vec<f64>>,
    pub weight: Option<Vec<f64>>,
    pub bias: Option<Vec<f64>>,
}

pub(crate) fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    b: &Tensor,
    stride: usize,
    pad: usize,
    dout: &[f64],
    want: [bool; 3],
) -> Result<ConvGrads> {
    let g = ConvGeometry::new(x, w, b, stride, pad)?;
    let plane = g.plane();
    let kk = g.patch_len();
    let in_len = g.c_in * g.h * g.w;
    let out_len = g.c_out * plane;
    let mut bias = want[2].then(|| vec![0.0; g.c_out]);
    let mut weight = want[1].then(|| vec![0.0; g.c_out * kk]);
    let mut input = want[0].then(|| vec![0.0; x.len()]);
    let mut cols = vec![0.0; kk * band_rows(&g) * g.w_out];
    for n in 0..g.n {
        // Each image's output gradient is a [c_out, plane] matrix; a band
        // is the column block starting at `off`.
        let dy = &dout[n * out_len..(n + 1) * out_len];
        if let Some(db) = bias.as_mut() {
            for (co, row) in dy.chunks_exact(plane).enumerate() {
                db[co] += row.iter().sum::<f64>();
            }
        }
        for rows in bands(&g) {
            let (off, width) = (rows.start * g.w_out, rows.len() * g.w_out);
            if let Some(dw) = weight.as_mut() {
                im2col(&g, &x.data()[n * in_len..(n + 1) * in_len], rows.clone(), &mut cols);
                gemm(g.c_out, width, kk, &dy[off..], (plane, 1), &cols, (1, width), 1.0, dw, (kk, 1));
            }
            if let Some(dx) = input.as_mut() {
                gemm(kk, g.c_out, width, w.data(), (1, kk), &dy[off..], (plane, 1), 0.0, &mut cols, (width, 1));
                col2im(&g, &cols, rows, &mut dx[n * in_len..(n + 1) * in_len]);
            }
        }
    }
    Ok(ConvGrads { input, weight, bias })
}

fn nchw(op: &'static str, x: &Tensor) -> Result<[usize; 4]> {
    expect_rank(op, x, 4)?;
    let s = x.shape();
    Ok([s[0], s[1], s[2], s[3]])
}

pub(crate) fn avg_pool2(x: &Tensor) -> Result<Tensor> {
    const OP: &str = "avg_pool2d";
    let [n, c, h, w] = nchw(OP, x)?;
    if h % 2 != 0 {
        return Err(Error::dim(OP, "height", "even extent", h));
    }
    if w % 2 != 0 {
        return Err(Error::dim(OP, "width", "even extent", w));
    }
    let (ho, wo) = (h / 2, w / 2);
    let src = x.data();
    let mut out = vec![0.0; n * c * ho * wo];
    for p in 0..n * c {
        let s = &src[p * h * w..(p + 1) * h * w];
        let d = &mut out[p * ho * wo..(p + 1) * ho * wo];
        for oy in 0..ho {
            for ox in 0..wo {
                let i = 2 * oy * w + 2 * ox;
                d[oy * wo + ox] = 0.25 * (s[i] + s[i + 1] + s[i + w] + s[i + w + 1]);
            }
        }
    }
    Tensor::new(vec![n, c, ho, wo], out)
}

pub(crate) fn avg_pool2_backward(input_shape: &[usize], dout: &[f64]) -> Vec<f64> {
    let [n, c, h, w] = [input_shape[0], input_shape[1], input_shape[2], input_shape[3]];
    let (ho, wo) = (h / 2, w / 2);
    let mut dx = vec![0.0; n * c * h * w];
    for p in 0..n * c {
        let d = &mut dx[p * h * w..(p + 1) * h * w];
        let g = &dout[p * ho * wo..(p + 1) * ho * wo];
        for oy in 0..ho {
            for ox in 0..wo {
                let v = 0.25 * g[oy * wo + ox];
                let i = 2 * oy * w + 2 * ox;
                d[i] += v;
                d[i + 1] += v;
                d[i + w] += v;
                d[i + w + 1] += v;
            }
        }
    }
    dx
}

pub(crate) fn upsample2(x: &Tensor) -> Result<Tensor> {
    let [n, c, h, w] = nchw("nearest_upsample2d", x)?;
    let (ho, wo) = (2 * h, 2 * w);
    let src = x.data();
    let mut out = vec![0.0; n * c * ho * wo];
    for p in 0..n * c {
        let s = &src[p * h * w..(p + 1) * h * w];
        let d = &mut out[p * ho * wo..(p + 1) * ho * wo];
        for oy in 0..ho {
            for ox in 0..wo {
                d[oy * wo + ox] = s[(oy / 2) * w + ox / 2];
            }
        }
    }
    Tensor::new(vec![n, c, ho, wo], out)
}

pub(crate) fn upsample2_backward(input_shape: &[usize], dout: &[f64]) -> Vec<f64> {
    let [n, c, h, w] = [input_shape[0], input_shape[1], input_shape[2], input_shape[3]];
    let wo = 2 * w;
    let mut dx = vec![0.0; n * c * h * w];
    for p in 0..n * c {
        let d = &mut dx[p * h * w..(p + 1) * h * w];
        let g = &dout[p * 4 * h * w..(p + 1) * 4 * h * w];
        for oy in 0..2 * h {
            for ox in 0..wo {
                d[(oy / 2) * w + ox / 2] += g[oy * wo + ox];
            }
        }
    }
    dx
}

pub(crate) fn global_avg_pool(x: &Tensor) -> Result<Tensor> {
    let [n, c, h, w] = nchw("global_avg_pool", x)?;
    let hw = h * w;
    let inv = 1.0 / hw as f64;
    let data = x
        .data()
        .chunks_exact(hw)
        .map(|p| p.iter().sum::<f64>() * inv)
        .collect();
    Tensor::new(vec![n, c], data)
}

pub(crate) fn concat_channels(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    const OP: &str = "concat_channels";
    let [n, ca, h, w] = nchw(OP, a)?;
    let [nb, cb, hb, wb] = nchw(OP, b)?;
    if nb != n {
        return Err(Error::dim(OP, "batch", n, nb));
    }
    if hb != h {
        return Err(Error::dim(OP, "height", h, hb));
    }
    if wb != w {
        return Err(Error::dim(OP, "width", w, wb));
    }
    let hw = h * w;
    let mut out = Vec::with_capacity(n * (ca + cb) * hw);
    for i in 0..n {
        out.extend_from_slice(&a.data()[i * ca * hw..(i + 1) * ca * hw]);
        out.extend_from_slice(&b.data()[i * cb * hw..(i + 1) * cb * hw]);
    }
    Tensor::new(vec![n, ca + cb, h, w], out)
}

/// `x [n, in] -> x * w^T + b` with `w [out, in]`.
pub(crate) fn linear(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    const OP: &str = "linear";
    expect_rank(OP, x, 2)?;
    expect_rank(OP, w, 2)?;
    expect_rank(OP, b, 1)?;
    let (n, d_in) = (x.shape()[0], x.shape()[1]);
    let d_out = w.shape()[0];
    if w.shape()[1] != d_in {
        return Err(Error::dim(OP, "in_features", d_in, w.shape()[1]));
    }
    if b.shape()[0] != d_out {
        return Err(Error::dim(OP, "bias", d_out, b.shape()[0]));
    }
    let mut out = Vec::with_capacity(n * d_out);
    for row in x.data().chunks_exact(d_in) {
        for (o, wrow) in w.data().chunks_exact(d_in).enumerate() {
            out.push(b.data()[o] + row.iter().zip(wrow).map(|(a, b)| a * b).sum::<f64>());
        }
    }
    Tensor::new(vec![n, d_out], out)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct seven-loop convolution used as an oracle for the GEMM path.
    fn conv_naive(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize, pad: usize) -> Vec<f64> {
        let g = ConvGeometry::new(x, w, b, stride, pad).unwrap();
        let mut out = vec![0.0; g.n * g.c_out * g.h_out * g.w_out];
        for n in 0..g.n {
            for co in 0..g.c_out {
                for oy in 0..g.h_out {
                    for ox in 0..g.w_out {
                        let mut acc = b.data()[co];
                        for c in 0..g.c_in {
                            for ki in 0..g.k {
                                for kj in 0..g.k {
                                    let iy = (oy * stride + ki) as isize - pad as isize;
                                    let ix = (ox * stride + kj) as isize - pad as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < g.h && (ix as usize) < g.w {
                                        acc += x.data()[((n * g.c_in + c) * g.h + iy as usize) * g.w + ix as usize]
                                            * w.data()[((co * g.c_in + c) * g.k + ki) * g.k + kj];
                                    }
                                }
                            }
                        }
                        out[((n * g.c_out + co) * g.h_out + oy) * g.w_out + ox] = acc;
                    }
                }
            }
        }
        out
    }

    fn seq(shape: &[usize], scale: f64) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|i| ((i * 37 % 11) as f64 - 5.0) * scale).collect()).unwrap()
    }

    #[test]
    fn conv_matches_naive_loops() {
        for &(stride, pad) in &[(1, 0), (1, 1), (2, 1), (2, 0), (3, 2)] {
            let x = seq(&[2, 3, 7, 6], 0.1);
            let w = seq(&[4, 3, 3, 3], 0.05);
            let b = seq(&[4], 0.3);
            let fast = conv2d(&x, &w, &b, stride, pad).unwrap();
            let slow = conv_naive(&x, &w, &b, stride, pad);
            for (a, e) in fast.data().iter().zip(&slow) {
                assert!((a - e).abs() < 1e-12, "stride={stride} pad={pad}");
            }
        }
    }

    #[test]
    fn banded_conv_matches_naive_loops() {
        // Wide enough patches that the plane splits into several bands with
        // a short last band.
        for &(stride, pad) in &[(1, 1), (2, 1)] {
            let x = seq(&[2, 16, 37, 35], 0.01);
            let w = seq(&[5, 16, 3, 3], 0.02);
            let b = seq(&[5], 0.3);
            let g = ConvGeometry::new(&x, &w, &b, stride, pad).unwrap();
            assert!(band_rows(&g) < g.h_out && g.h_out % band_rows(&g) != 0);
            let fast = conv2d(&x, &w, &b, stride, pad).unwrap();
            let slow = conv_naive(&x, &w, &b, stride, pad);
            for (a, e) in fast.data().iter().zip(&slow) {
                assert!((a - e).abs() < 1e-10, "stride={stride} pad={pad}");
            }
        }
    }

    #[test]
    fn conv_output_extent() {
        let x = Tensor::zeros(&[1, 1, 9, 9]);
        let w = Tensor::zeros(&[1, 1, 3, 3]);
        let b = Tensor::zeros(&[1]);
        let y = conv2d(&x, &w, &b, 2, 1).unwrap();
        assert_eq!(y.shape(), &[1, 1, 5, 5]);
    }

    #[test]
    fn conv_rejects_even_kernel_and_channel_mismatch() {
        let x = Tensor::zeros(&[1, 2, 4, 4]);
        let err = conv2d(&x, &Tensor::zeros(&[1, 2, 2, 2]), &Tensor::zeros(&[1]), 1, 0).unwrap_err();
        assert!(err.to_string().contains("kernel_height"));
        let err = conv2d(&x, &Tensor::zeros(&[1, 3, 3, 3]), &Tensor::zeros(&[1]), 1, 0).unwrap_err();
        assert!(err.to_string().contains("in_channels"));
    }

    #[test]
    fn pool_rejects_odd_extent() {
        let err = avg_pool2(&Tensor::zeros(&[1, 1, 4, 5])).unwrap_err();
        assert!(err.to_string().contains("width"));
    }

    #[test]
    fn upsample_then_pool_is_identity() {
        let x = seq(&[2, 2, 3, 4], 1.0);
        let y = avg_pool2(&upsample2(&x).unwrap()).unwrap();
        assert_eq!(x, y);
    }
}
