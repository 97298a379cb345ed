//! Raw numeric kernels behind the differentiable ops.
//!
//! Everything here works on flat row-major slices. Batch items are processed
//! through [`crate::par`]; per-item partial results are reduced by the caller
//! in batch order so the outcome does not depend on scheduling.

use crate::par;

/// `c = a·b + beta·c` on strided row-major views.
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
    rsc: usize,
) {
    debug_assert!(m == 0 || k == 0 || a.len() > (m - 1) * rsa + (k - 1) * csa);
    debug_assert!(k == 0 || n == 0 || b.len() > (k - 1) * rsb + (n - 1) * csb);
    debug_assert!(m == 0 || n == 0 || c.len() > (m - 1) * rsc + (n - 1));
    // SAFETY: the asserted bounds cover every element addressed by the strides.
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
            1,
        );
    }
}

/// Geometry of a 2-D cross-correlation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub n: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.padding - self.kh) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.padding - self.kw) / self.stride + 1
    }

    fn cin_g(&self) -> usize {
        self.c_in / self.groups
    }

    fn cout_g(&self) -> usize {
        self.c_out / self.groups
    }

    /// Rows of the unfolded patch matrix per group.
    fn patch(&self) -> usize {
        self.cin_g() * self.kh * self.kw
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.padding == 0
    }

    /// Unfolds group `g` of one image into `cols` (patch × out_h·out_w).
    fn im2col(&self, x: &[f64], g: usize, cols: &mut [f64]) {
        let (oh, ow) = (self.out_h(), self.out_w());
        let hw = oh * ow;
        let (s, p) = (self.stride as isize, self.padding as isize);
        for ci in 0..self.cin_g() {
            let plane = &x[(g * self.cin_g() + ci) * self.h * self.w..][..self.h * self.w];
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = &mut cols[((ci * self.kh + ky) * self.kw + kx) * hw..][..hw];
                    for oy in 0..oh {
                        let iy = oy as isize * s - p + ky as isize;
                        let dst = &mut row[oy * ow..(oy + 1) * ow];
                        if iy < 0 || iy >= self.h as isize {
                            dst.fill(0.0);
                            continue;
                        }
                        let src = &plane[iy as usize * self.w..][..self.w];
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = ox as isize * s - p + kx as isize;
                            *d = if ix < 0 || ix >= self.w as isize {
                                0.0
                            } else {
                                src[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`Self::im2col`]: scatters `cols` back into `dx`.
    fn col2im(&self, cols: &[f64], g: usize, dx: &mut [f64]) {
        let (oh, ow) = (self.out_h(), self.out_w());
        let hw = oh * ow;
        let (s, p) = (self.stride as isize, self.padding as isize);
        for ci in 0..self.cin_g() {
            let plane = &mut dx[(g * self.cin_g() + ci) * self.h * self.w..][..self.h * self.w];
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = &cols[((ci * self.kh + ky) * self.kw + kx) * hw..][..hw];
                    for oy in 0..oh {
                        let iy = oy as isize * s - p + ky as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * self.w..][..self.w];
                        for ox in 0..ow {
                            let ix = ox as isize * s - p + kx as isize;
                            if ix >= 0 && ix < self.w as isize {
                                dst[ix as usize] += row[oy * ow + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

pub fn conv2d_forward(geom: &ConvGeom, x: &[f64], kernel: &[f64], bias: Option<&[f64]>) -> Vec<f64> {
    let g = *geom;
    let hw = g.out_h() * g.out_w();
    let in_len = g.c_in * g.h * g.w;
    let per_image = par::map_range(g.n, |ni| {
        let xi = &x[ni * in_len..(ni + 1) * in_len];
        let mut out = vec![0.0; g.c_out * hw];
        let mut cols = if g.is_pointwise() {
            Vec::new()
        } else {
            vec![0.0; g.patch() * hw]
        };
        for grp in 0..g.groups {
            let b: &[f64] = if g.is_pointwise() {
                &xi[grp * g.cin_g() * hw..(grp + 1) * g.cin_g() * hw]
            } else {
                g.im2col(xi, grp, &mut cols);
                &cols
            };
            let a = &kernel[grp * g.cout_g() * g.patch()..][..g.cout_g() * g.patch()];
            let c = &mut out[grp * g.cout_g() * hw..][..g.cout_g() * hw];
            gemm(g.cout_g(), g.patch(), hw, a, (g.patch(), 1), b, (hw, 1), 0.0, c, hw);
        }
        if let Some(bias) = bias {
            for (co, plane) in out.chunks_mut(hw).enumerate() {
                plane.iter_mut().for_each(|v| *v += bias[co]);
            }
        }
        out
    });
    per_image.concat()
}

/// Gradients of a convolution: `(d_input, d_kernel, d_bias)`.
pub fn conv2d_backward(
    geom: &ConvGeom,
    x: &[f64],
    kernel: &[f64],
    dout: &[f64],
    want_input: bool,
    want_kernel: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>, Vec<f64>) {
    let g = *geom;
    let hw = g.out_h() * g.out_w();
    let in_len = g.c_in * g.h * g.w;
    let out_len = g.c_out * hw;
    let per_image = par::map_range(g.n, |ni| {
        let xi = &x[ni * in_len..(ni + 1) * in_len];
        let di = &dout[ni * out_len..(ni + 1) * out_len];
        let mut dx = want_input.then(|| vec![0.0; in_len]);
        let mut dk = want_kernel.then(|| vec![0.0; kernel.len()]);
        let mut cols = vec![0.0; g.patch() * hw];
        for grp in 0..g.groups {
            let a = &kernel[grp * g.cout_g() * g.patch()..][..g.cout_g() * g.patch()];
            let dg = &di[grp * g.cout_g() * hw..][..g.cout_g() * hw];
            if let Some(dk) = dk.as_mut() {
                let b: &[f64] = if g.is_pointwise() {
                    &xi[grp * g.cin_g() * hw..(grp + 1) * g.cin_g() * hw]
                } else {
                    g.im2col(xi, grp, &mut cols);
                    &cols
                };
                let c = &mut dk[grp * g.cout_g() * g.patch()..][..g.cout_g() * g.patch()];
                // dK (cout_g × patch) = dout (cout_g × hw) · colsᵀ (hw × patch)
                gemm(g.cout_g(), hw, g.patch(), dg, (hw, 1), b, (1, hw), 1.0, c, g.patch());
            }
            if let Some(dx) = dx.as_mut() {
                // dcols (patch × hw) = Kᵀ (patch × cout_g) · dout (cout_g × hw)
                if g.is_pointwise() {
                    let c = &mut dx[grp * g.cin_g() * hw..(grp + 1) * g.cin_g() * hw];
                    gemm(g.patch(), g.cout_g(), hw, a, (1, g.patch()), dg, (hw, 1), 1.0, c, hw);
                } else {
                    gemm(g.patch(), g.cout_g(), hw, a, (1, g.patch()), dg, (hw, 1), 0.0, &mut cols, hw);
                    g.col2im(&cols, grp, dx);
                }
            }
        }
        (dx, dk)
    });

    let mut d_bias = vec![0.0; g.c_out];
    for ni in 0..g.n {
        let di = &dout[ni * out_len..(ni + 1) * out_len];
        for (co, plane) in di.chunks(hw).enumerate() {
            d_bias[co] += plane.iter().sum::<f64>();
        }
    }
    let mut d_input = want_input.then(|| Vec::with_capacity(g.n * in_len));
    let mut d_kernel = want_kernel.then(|| vec![0.0; kernel.len()]);
    for (dx, dk) in per_image {
        if let (Some(acc), Some(dx)) = (d_input.as_mut(), dx) {
            acc.extend_from_slice(&dx);
        }
        if let (Some(acc), Some(dk)) = (d_kernel.as_mut(), dk) {
            acc.iter_mut().zip(&dk).for_each(|(a, v)| *a += v);
        }
    }
    (d_input, d_kernel, d_bias)
}

/// Kernel extent and padding of a stride-`factor` transposed convolution
/// whose output is exactly `factor` times its input.
pub fn upsample_geometry(factor: usize) -> (usize, usize) {
    let k = 2 * factor - factor % 2;
    (k, (k - factor) / 2)
}

/// Separable bilinear interpolation kernel of extent `k` (row-major k×k).
pub fn bilinear_kernel(k: usize) -> Vec<f64> {
    let f = (k + 1) / 2;
    let center = if k % 2 == 1 {
        f as f64 - 1.0
    } else {
        f as f64 - 0.5
    };
    let taps: Vec<f64> = (0..k)
        .map(|i| 1.0 - (i as f64 - center).abs() / f as f64)
        .collect();
    let mut out = Vec::with_capacity(k * k);
    for &a in &taps {
        for &b in &taps {
            out.push(a * b);
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct UpGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub factor: usize,
}

impl UpGeom {
    pub fn k(&self) -> usize {
        upsample_geometry(self.factor).0
    }

    fn pad(&self) -> usize {
        upsample_geometry(self.factor).1
    }

    pub fn out_h(&self) -> usize {
        self.h * self.factor
    }

    pub fn out_w(&self) -> usize {
        self.w * self.factor
    }

    /// Visits every (input pixel, kernel tap, output pixel) triple of the
    /// transposed convolution for one plane.
    #[inline]
    fn for_taps(&self, mut f: impl FnMut(usize, usize, usize)) {
        let (k, p, s) = (self.k() as isize, self.pad() as isize, self.factor as isize);
        let (oh, ow) = (self.out_h() as isize, self.out_w() as isize);
        for iy in 0..self.h as isize {
            for ky in 0..k {
                let oy = iy * s - p + ky;
                if oy < 0 || oy >= oh {
                    continue;
                }
                for ix in 0..self.w as isize {
                    for kx in 0..k {
                        let ox = ix * s - p + kx;
                        if ox < 0 || ox >= ow {
                            continue;
                        }
                        f(
                            (iy * self.w as isize + ix) as usize,
                            (ky * k + kx) as usize,
                            (oy * ow + ox) as usize,
                        );
                    }
                }
            }
        }
    }

    /// Reciprocal of the total kernel weight each output pixel receives from a
    /// constant input under `kernel`; rescales border pixels so that constant
    /// maps are preserved everywhere.
    pub fn border_scale(&self, kernel: &[f64]) -> Vec<f64> {
        let mut acc = vec![0.0; self.out_h() * self.out_w()];
        self.for_taps(|_, t, o| acc[o] += kernel[t]);
        acc.into_iter().map(|v| 1.0 / v).collect()
    }
}

/// Depthwise transposed convolution followed by border rescaling.
/// `kernel` is `c × k × k`.
pub fn upsample_forward(geom: &UpGeom, x: &[f64], kernel: &[f64], scale: &[f64]) -> Vec<f64> {
    let g = *geom;
    let (in_plane, out_plane, kk) = (g.h * g.w, g.out_h() * g.out_w(), g.k() * g.k());
    let mut out = vec![0.0; g.n * g.c * out_plane];
    par::for_each_chunk_mut(&mut out, out_plane, |plane_idx, dst| {
        let c = plane_idx % g.c;
        let src = &x[plane_idx * in_plane..][..in_plane];
        let ker = &kernel[c * kk..][..kk];
        g.for_taps(|i, t, o| dst[o] += src[i] * ker[t]);
        dst.iter_mut().zip(scale).for_each(|(v, s)| *v *= s);
    });
    out
}

/// Returns `(d_input, d_kernel)`.
pub fn upsample_backward(
    geom: &UpGeom,
    x: &[f64],
    kernel: &[f64],
    scale: &[f64],
    dout: &[f64],
    want_kernel: bool,
) -> (Vec<f64>, Option<Vec<f64>>) {
    let g = *geom;
    let (in_plane, out_plane, kk) = (g.h * g.w, g.out_h() * g.out_w(), g.k() * g.k());
    let planes = par::map_range(g.n * g.c, |plane_idx| {
        let c = plane_idx % g.c;
        let src = &x[plane_idx * in_plane..][..in_plane];
        let ker = &kernel[c * kk..][..kk];
        let d: Vec<f64> = dout[plane_idx * out_plane..][..out_plane]
            .iter()
            .zip(scale)
            .map(|(a, b)| a * b)
            .collect();
        let mut dx = vec![0.0; in_plane];
        let mut dk = if want_kernel { vec![0.0; kk] } else { Vec::new() };
        g.for_taps(|i, t, o| {
            dx[i] += d[o] * ker[t];
            if want_kernel {
                dk[t] += d[o] * src[i];
            }
        });
        (dx, dk)
    });
    let mut d_input = Vec::with_capacity(g.n * g.c * in_plane);
    let mut d_kernel = want_kernel.then(|| vec![0.0; kernel.len()]);
    for (plane_idx, (dx, dk)) in planes.into_iter().enumerate() {
        d_input.extend_from_slice(&dx);
        if let Some(acc) = d_kernel.as_mut() {
            let c = plane_idx % g.c;
            acc[c * kk..(c + 1) * kk]
                .iter_mut()
                .zip(&dk)
                .for_each(|(a, v)| *a += v);
        }
    }
    (d_input, d_kernel)
}
