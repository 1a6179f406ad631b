//! Raw numeric kernels behind the taped operations. Everything here works on
//! plain slices; shape validation happens in the tape layer.

/// Strided matrix view descriptor for [`gemm`].
#[derive(Clone, Copy)]
pub(crate) struct Layout {
    pub row_stride: isize,
    pub col_stride: isize,
}

impl Layout {
    pub fn row_major(cols: usize) -> Self {
        Self {
            row_stride: cols as isize,
            col_stride: 1,
        }
    }

    /// Transposed view of a row-major matrix with `cols` columns.
    pub fn transposed(cols: usize) -> Self {
        Self {
            row_stride: 1,
            col_stride: cols as isize,
        }
    }
}

/// `c[m×n] = beta·c + a[m×k]·b[k×n]`, with `c` row-major.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    la: Layout,
    b: &[f64],
    lb: Layout,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert!(c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: the caller sizes every buffer to cover the strided extents
    // described by `la`, `lb` and the row-major `c`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            la.row_stride,
            la.col_stride,
            b.as_ptr(),
            lb.row_stride,
            lb.col_stride,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn patch_len(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    pub fn out_pixels(&self) -> usize {
        self.ho * self.wo
    }
}

pub(crate) fn im2col(x: &[f64], g: &ConvGeom, cols: &mut [f64]) {
    let p = g.out_pixels();
    for ci in 0..g.cin {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        dst[oy * g.wo + ox] = if iy >= 0
                            && (iy as usize) < g.h
                            && ix >= 0
                            && (ix as usize) < g.w
                        {
                            plane[iy as usize * g.w + ix as usize]
                        } else {
                            0.0
                        };
                    }
                }
            }
        }
    }
}

pub(crate) fn col2im_add(cols: &[f64], g: &ConvGeom, dx: &mut [f64]) {
    let p = g.out_pixels();
    for ci in 0..g.cin {
        let plane = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy as usize >= g.h {
                        continue;
                    }
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && (ix as usize) < g.w {
                            plane[iy as usize * g.w + ix as usize] += src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Cross-correlation of a batch, one GEMM per sample.
pub(crate) fn conv2d_forward(x: &[f64], w: &[f64], batch: usize, g: &ConvGeom) -> Vec<f64> {
    let k = g.patch_len();
    let p = g.out_pixels();
    let in_len = g.cin * g.h * g.w;
    let out_len = g.cout * p;
    let mut out = vec![0.0; batch * out_len];
    let mut cols = vec![0.0; k * p];
    for b in 0..batch {
        im2col(&x[b * in_len..(b + 1) * in_len], g, &mut cols);
        gemm(
            g.cout,
            k,
            p,
            w,
            Layout::row_major(k),
            &cols,
            Layout::row_major(p),
            0.0,
            &mut out[b * out_len..(b + 1) * out_len],
        );
    }
    out
}

/// Returns `(dx, dw)`; either is skipped when not requested.
pub(crate) fn conv2d_backward(
    x: &[f64],
    w: &[f64],
    dy: &[f64],
    batch: usize,
    g: &ConvGeom,
    want_dx: bool,
    want_dw: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let k = g.patch_len();
    let p = g.out_pixels();
    let in_len = g.cin * g.h * g.w;
    let out_len = g.cout * p;
    let mut dx = want_dx.then(|| vec![0.0; batch * in_len]);
    let mut dw = want_dw.then(|| vec![0.0; g.cout * k]);
    let mut cols = vec![0.0; k * p];
    for b in 0..batch {
        let dyb = &dy[b * out_len..(b + 1) * out_len];
        if let Some(dw) = dw.as_mut() {
            im2col(&x[b * in_len..(b + 1) * in_len], g, &mut cols);
            gemm(
                g.cout,
                p,
                k,
                dyb,
                Layout::row_major(p),
                &cols,
                Layout::transposed(p),
                1.0,
                dw,
            );
        }
        if let Some(dx) = dx.as_mut() {
            gemm(
                k,
                g.cout,
                p,
                w,
                Layout::transposed(k),
                dyb,
                Layout::row_major(p),
                0.0,
                &mut cols,
            );
            col2im_add(&cols, g, &mut dx[b * in_len..(b + 1) * in_len]);
        }
    }
    (dx, dw)
}

/// Per-sample, per-group statistics: returns normalized output plus `(mean, rstd)` per group.
pub(crate) fn group_norm_forward(
    x: &[f64],
    batch: usize,
    channels: usize,
    spatial: usize,
    groups: usize,
    eps: f64,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let per_group = channels / groups * spatial;
    let mut y = vec![0.0; x.len()];
    let mut means = Vec::with_capacity(batch * groups);
    let mut rstds = Vec::with_capacity(batch * groups);
    for (gi, chunk) in x.chunks(per_group).enumerate() {
        let n = per_group as f64;
        let mean = chunk.iter().sum::<f64>() / n;
        let var = chunk.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let rstd = 1.0 / (var + eps).sqrt();
        let out = &mut y[gi * per_group..(gi + 1) * per_group];
        for (o, v) in out.iter_mut().zip(chunk) {
            *o = (v - mean) * rstd;
        }
        means.push(mean);
        rstds.push(rstd);
    }
    (y, means, rstds)
}

pub(crate) fn group_norm_backward(
    x: &[f64],
    dy: &[f64],
    means: &[f64],
    rstds: &[f64],
    per_group: usize,
) -> Vec<f64> {
    let mut dx = vec![0.0; x.len()];
    let n = per_group as f64;
    for gi in 0..means.len() {
        let range = gi * per_group..(gi + 1) * per_group;
        let (mean, rstd) = (means[gi], rstds[gi]);
        let xs = &x[range.clone()];
        let dys = &dy[range.clone()];
        let mut sum_dy = 0.0;
        let mut sum_dy_xhat = 0.0;
        for (v, d) in xs.iter().zip(dys) {
            let xhat = (v - mean) * rstd;
            sum_dy += d;
            sum_dy_xhat += d * xhat;
        }
        let (mdy, mdyx) = (sum_dy / n, sum_dy_xhat / n);
        for ((o, v), d) in dx[range].iter_mut().zip(xs).zip(dys) {
            let xhat = (v - mean) * rstd;
            *o = rstd * (d - mdy - xhat * mdyx);
        }
    }
    dx
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}
