//! Slice-level compute kernels behind the graph ops.
//!
//! Inner loops are written as contiguous axpy/dot runs so the compiler can
//! vectorize them. All loops run in a fixed order, so results are bitwise
//! reproducible.

/// Geometry of a zero-padded, dilated, strided 2-D cross-correlation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: (usize, usize),
    pub dilation: (usize, usize),
    pub pad: (usize, usize),
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    /// "Same" padding of `dilation * (k - 1) / 2` per side.
    pub fn same(
        cin: usize,
        h: usize,
        w: usize,
        cout: usize,
        (kh, kw): (usize, usize),
        stride: (usize, usize),
        dilation: (usize, usize),
    ) -> Self {
        let pad = (dilation.0 * (kh - 1) / 2, dilation.1 * (kw - 1) / 2);
        let ho = (h + 2 * pad.0 - dilation.0 * (kh - 1) - 1) / stride.0 + 1;
        let wo = (w + 2 * pad.1 - dilation.1 * (kw - 1) - 1) / stride.1 + 1;
        Self {
            cin,
            h,
            w,
            cout,
            kh,
            kw,
            stride,
            dilation,
            pad,
            ho,
            wo,
        }
    }

    fn tap_offset(&self, i: usize, j: usize) -> (isize, isize) {
        (
            (i * self.dilation.0) as isize - self.pad.0 as isize,
            (j * self.dilation.1) as isize - self.pad.1 as isize,
        )
    }

    /// Output columns `[lo, hi)` whose input column `ow * sw + dx` is in range.
    fn col_range(&self, dx: isize) -> (usize, usize) {
        let sw = self.stride.1 as isize;
        let lo = if dx < 0 { (-dx + sw - 1) / sw } else { 0 };
        let hi = (self.w as isize - 1 - dx).div_euclid(sw) + 1;
        let hi = hi.clamp(0, self.wo as isize);
        (lo as usize, (hi.max(lo)) as usize)
    }

    fn in_row(&self, oh: usize, dy: isize) -> Option<usize> {
        let ih = (oh * self.stride.0) as isize + dy;
        (ih >= 0 && (ih as usize) < self.h).then_some(ih as usize)
    }
}

#[inline]
fn axpy(y: &mut [f32], a: f32, x: &[f32]) {
    for (yv, xv) in y.iter_mut().zip(x) {
        *yv += a * xv;
    }
}

/// Dot product with eight independent partial sums.
#[inline]
pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0f32; 8];
    let chunks = n / 8;
    for c in 0..chunks {
        let (ac, bc) = (&a[c * 8..c * 8 + 8], &b[c * 8..c * 8 + 8]);
        for l in 0..8 {
            acc[l] += ac[l] * bc[l];
        }
    }
    let mut tail = 0.0f32;
    for i in chunks * 8..n {
        tail += a[i] * b[i];
    }
    acc.iter().sum::<f32>() + tail
}

pub fn conv2d_forward(x: &[f32], k: &[f32], bias: Option<&[f32]>, g: &ConvGeom) -> Vec<f32> {
    let (hw, ohw) = (g.h * g.w, g.ho * g.wo);
    let mut out = vec![0.0f32; g.cout * ohw];
    for co in 0..g.cout {
        let plane = &mut out[co * ohw..(co + 1) * ohw];
        if let Some(b) = bias {
            plane.fill(b[co]);
        }
        for ci in 0..g.cin {
            let xp = &x[ci * hw..(ci + 1) * hw];
            for i in 0..g.kh {
                for j in 0..g.kw {
                    let wv = k[((co * g.cin + ci) * g.kh + i) * g.kw + j];
                    if wv == 0.0 {
                        continue;
                    }
                    let (dy, dx) = g.tap_offset(i, j);
                    let (lo, hi) = g.col_range(dx);
                    if lo >= hi {
                        continue;
                    }
                    for oh in 0..g.ho {
                        let Some(ih) = g.in_row(oh, dy) else { continue };
                        let orow = &mut plane[oh * g.wo + lo..oh * g.wo + hi];
                        let xrow = &xp[ih * g.w..(ih + 1) * g.w];
                        if g.stride.1 == 1 {
                            let s = (lo as isize + dx) as usize;
                            axpy(orow, wv, &xrow[s..s + (hi - lo)]);
                        } else {
                            for (n, o) in orow.iter_mut().enumerate() {
                                let iw = ((lo + n) * g.stride.1) as isize + dx;
                                *o += wv * xrow[iw as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Gradient with respect to the input.
pub fn conv2d_backward_input(gy: &[f32], k: &[f32], g: &ConvGeom) -> Vec<f32> {
    let (hw, ohw) = (g.h * g.w, g.ho * g.wo);
    let mut gx = vec![0.0f32; g.cin * hw];
    for ci in 0..g.cin {
        let gxp = &mut gx[ci * hw..(ci + 1) * hw];
        for co in 0..g.cout {
            let gp = &gy[co * ohw..(co + 1) * ohw];
            for i in 0..g.kh {
                for j in 0..g.kw {
                    let wv = k[((co * g.cin + ci) * g.kh + i) * g.kw + j];
                    if wv == 0.0 {
                        continue;
                    }
                    let (dy, dx) = g.tap_offset(i, j);
                    let (lo, hi) = g.col_range(dx);
                    if lo >= hi {
                        continue;
                    }
                    for oh in 0..g.ho {
                        let Some(ih) = g.in_row(oh, dy) else { continue };
                        let grow = &gp[oh * g.wo + lo..oh * g.wo + hi];
                        let xrow = &mut gxp[ih * g.w..(ih + 1) * g.w];
                        if g.stride.1 == 1 {
                            let s = (lo as isize + dx) as usize;
                            axpy(&mut xrow[s..s + (hi - lo)], wv, grow);
                        } else {
                            for (n, gv) in grow.iter().enumerate() {
                                let iw = ((lo + n) * g.stride.1) as isize + dx;
                                xrow[iw as usize] += wv * gv;
                            }
                        }
                    }
                }
            }
        }
    }
    gx
}

/// Gradient with respect to the kernel; per-row partial dots are summed in
/// `f64`.
pub fn conv2d_backward_kernel(gy: &[f32], x: &[f32], g: &ConvGeom) -> Vec<f32> {
    let (hw, ohw) = (g.h * g.w, g.ho * g.wo);
    let mut gk = vec![0.0f32; g.cout * g.cin * g.kh * g.kw];
    for co in 0..g.cout {
        let gp = &gy[co * ohw..(co + 1) * ohw];
        for ci in 0..g.cin {
            let xp = &x[ci * hw..(ci + 1) * hw];
            for i in 0..g.kh {
                for j in 0..g.kw {
                    let (dy, dx) = g.tap_offset(i, j);
                    let (lo, hi) = g.col_range(dx);
                    let mut acc = 0.0f64;
                    if lo < hi {
                        for oh in 0..g.ho {
                            let Some(ih) = g.in_row(oh, dy) else { continue };
                            let grow = &gp[oh * g.wo + lo..oh * g.wo + hi];
                            let xrow = &xp[ih * g.w..(ih + 1) * g.w];
                            let part = if g.stride.1 == 1 {
                                let s = (lo as isize + dx) as usize;
                                dot(grow, &xrow[s..s + (hi - lo)])
                            } else {
                                grow.iter()
                                    .enumerate()
                                    .map(|(n, gv)| {
                                        let iw = ((lo + n) * g.stride.1) as isize + dx;
                                        gv * xrow[iw as usize]
                                    })
                                    .sum()
                            };
                            acc += part as f64;
                        }
                    }
                    gk[((co * g.cin + ci) * g.kh + i) * g.kw + j] = acc as f32;
                }
            }
        }
    }
    gk
}

/// Per-channel sum of a `[c, n]` buffer.
pub fn channel_sums(gy: &[f32], channels: usize) -> Vec<f32> {
    let n = gy.len() / channels;
    (0..channels)
        .map(|c| gy[c * n..(c + 1) * n].iter().map(|&v| v as f64).sum::<f64>() as f32)
        .collect()
}

/// `out[m, n] += a[m, k] * b[k, n]`.
pub fn mm_nn(a: &[f32], b: &[f32], out: &mut [f32], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (kk, &av) in arow.iter().enumerate() {
            if av != 0.0 {
                axpy(orow, av, &b[kk * n..(kk + 1) * n]);
            }
        }
    }
}

/// `out[m, n] = sum_k a[k, m] * b[k, n]`, summing blocks of 32 rows in `f32`
/// and the blocks in `f64`.
pub fn mm_tn(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    const BLOCK: usize = 32;
    let mut total = vec![0.0f64; m * n];
    let mut part = vec![0.0f32; m * n];
    for start in (0..k).step_by(BLOCK) {
        part.fill(0.0);
        for kk in start..(start + BLOCK).min(k) {
            let arow = &a[kk * m..(kk + 1) * m];
            let brow = &b[kk * n..(kk + 1) * n];
            for (i, &av) in arow.iter().enumerate() {
                if av != 0.0 {
                    axpy(&mut part[i * n..(i + 1) * n], av, brow);
                }
            }
        }
        for (t, p) in total.iter_mut().zip(&part) {
            *t += *p as f64;
        }
    }
    total.into_iter().map(|v| v as f32).collect()
}

/// Row-major `[rows, cols]` to `[cols, rows]`.
pub fn transpose(a: &[f32], rows: usize, cols: usize) -> Vec<f32> {
    let mut t = vec![0.0f32; a.len()];
    for r in 0..rows {
        for c in 0..cols {
            t[c * rows + r] = a[r * cols + c];
        }
    }
    t
}
