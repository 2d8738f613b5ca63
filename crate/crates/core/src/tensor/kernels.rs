//! Raw row-major kernels used by the graph ops.

use crate::error::{shape_err, Result};

/// `c[m,n] += a[m,k] · b[k,n]`
pub(crate) fn gemm_nn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    for i in 0..m {
        let c_row = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (cv, bv) in c_row.iter_mut().zip(b_row) {
                *cv += av * bv;
            }
        }
    }
}

/// `c[m,n] += a[m,k] · b[n,k]ᵀ`
pub(crate) fn gemm_nt(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            let dot: f64 = a_row.iter().zip(b_row).map(|(x, y)| x * y).sum();
            c[i * n + j] += dot;
        }
    }
}

/// `c[m,n] += a[k,m]ᵀ · b[k,n]`
pub(crate) fn gemm_tn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    for p in 0..k {
        let b_row = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let av = a[p * m + i];
            if av == 0.0 {
                continue;
            }
            let c_row = &mut c[i * n..(i + 1) * n];
            for (cv, bv) in c_row.iter_mut().zip(b_row) {
                *cv += av * bv;
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub groups: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn new(
        x_shape: &[usize],
        w_shape: &[usize],
        groups: usize,
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        if x_shape.len() != 4 || w_shape.len() != 4 {
            return Err(shape_err!(
                "conv2d expects 4-d input and kernel, got {x_shape:?} and {w_shape:?}"
            ));
        }
        if groups == 0 || stride == 0 {
            return Err(shape_err!("conv2d needs groups ≥ 1 and stride ≥ 1"));
        }
        let (batch, cin, h, w) = (x_shape[0], x_shape[1], x_shape[2], x_shape[3]);
        let (cout, cg, kh, kw) = (w_shape[0], w_shape[1], w_shape[2], w_shape[3]);
        if cin % groups != 0 || cout % groups != 0 {
            return Err(shape_err!(
                "channels ({cin} in, {cout} out) not divisible by groups {groups}"
            ));
        }
        if cin / groups != cg {
            return Err(shape_err!(
                "kernel expects {cg} input channels per group, input provides {}",
                cin / groups
            ));
        }
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(shape_err!(
                "kernel {kh}x{kw} larger than padded input {}x{}",
                h + 2 * pad,
                w + 2 * pad
            ));
        }
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (w + 2 * pad - kw) / stride + 1;
        Ok(ConvGeom {
            batch,
            cin,
            h,
            w,
            cout,
            kh,
            kw,
            groups,
            stride,
            pad,
            ho,
            wo,
        })
    }

    pub fn cin_g(&self) -> usize {
        self.cin / self.groups
    }

    pub fn cout_g(&self) -> usize {
        self.cout / self.groups
    }

    /// Rows of the im2col matrix of one group.
    pub fn col_rows(&self) -> usize {
        self.cin_g() * self.kh * self.kw
    }

    pub fn out_pixels(&self) -> usize {
        self.ho * self.wo
    }

    pub fn out_shape(&self) -> [usize; 4] {
        [self.batch, self.cout, self.ho, self.wo]
    }

    pub fn macs(&self) -> u64 {
        (self.batch * self.cout * self.out_pixels() * self.col_rows()) as u64
    }

    fn input_offset(&self, n: usize, g: usize) -> usize {
        (n * self.cin + g * self.cin_g()) * self.h * self.w
    }

    fn im2col(&self, x: &[f64], n: usize, g: usize, cols: &mut [f64]) {
        let base = self.input_offset(n, g);
        let npix = self.out_pixels();
        for c in 0..self.cin_g() {
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (c * self.kh + ki) * self.kw + kj;
                    let dst = &mut cols[row * npix..(row + 1) * npix];
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride + ki) as isize - self.pad as isize;
                        for ox in 0..self.wo {
                            let ix = (ox * self.stride + kj) as isize - self.pad as isize;
                            dst[oy * self.wo + ox] = if iy >= 0
                                && ix >= 0
                                && (iy as usize) < self.h
                                && (ix as usize) < self.w
                            {
                                x[base + (c * self.h + iy as usize) * self.w + ix as usize]
                            } else {
                                0.0
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im_add(&self, cols: &[f64], n: usize, g: usize, dx: &mut [f64]) {
        let base = self.input_offset(n, g);
        let npix = self.out_pixels();
        for c in 0..self.cin_g() {
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (c * self.kh + ki) * self.kw + kj;
                    let src = &cols[row * npix..(row + 1) * npix];
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride + ki) as isize - self.pad as isize;
                        if iy < 0 || iy as usize >= self.h {
                            continue;
                        }
                        for ox in 0..self.wo {
                            let ix = (ox * self.stride + kj) as isize - self.pad as isize;
                            if ix < 0 || ix as usize >= self.w {
                                continue;
                            }
                            dx[base + (c * self.h + iy as usize) * self.w + ix as usize] +=
                                src[oy * self.wo + ox];
                        }
                    }
                }
            }
        }
    }

    /// Grouped cross-correlation with zero padding: one im2col matrix per
    /// (exemplar, group) multiplied by the group's block of the kernel.
    pub fn forward(&self, x: &[f64], w: &[f64]) -> Vec<f64> {
        let (rows, npix, coutg) = (self.col_rows(), self.out_pixels(), self.cout_g());
        let mut out = vec![0.0; self.batch * self.cout * npix];
        let mut cols = vec![0.0; rows * npix];
        for n in 0..self.batch {
            for g in 0..self.groups {
                self.im2col(x, n, g, &mut cols);
                let wg = &w[g * coutg * rows..(g + 1) * coutg * rows];
                let o = (n * self.cout + g * coutg) * npix;
                gemm_nn(coutg, rows, npix, wg, &cols, &mut out[o..o + coutg * npix]);
            }
        }
        out
    }

    /// Accumulates input and kernel gradients for upstream gradient `dout`.
    pub fn backward(
        &self,
        x: &[f64],
        w: &[f64],
        dout: &[f64],
        mut dx: Option<&mut [f64]>,
        mut dw: Option<&mut [f64]>,
    ) {
        let (rows, npix, coutg) = (self.col_rows(), self.out_pixels(), self.cout_g());
        let mut cols = vec![0.0; rows * npix];
        for n in 0..self.batch {
            for g in 0..self.groups {
                let o = (n * self.cout + g * coutg) * npix;
                let dog = &dout[o..o + coutg * npix];
                let wrange = g * coutg * rows..(g + 1) * coutg * rows;
                if let Some(dw) = dw.as_deref_mut() {
                    self.im2col(x, n, g, &mut cols);
                    gemm_nt(coutg, npix, rows, dog, &cols, &mut dw[wrange.clone()]);
                }
                if let Some(dx) = dx.as_deref_mut() {
                    cols.iter_mut().for_each(|v| *v = 0.0);
                    gemm_tn(rows, coutg, npix, &w[wrange], dog, &mut cols);
                    self.col2im_add(&cols, n, g, dx);
                }
            }
        }
    }
}

/// Splits a shape around `axis` into (outer, axis length, inner) extents.
pub(crate) fn axis_extents(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Log-softmax along an axis using max subtraction.
pub(crate) fn log_softmax(data: &[f64], shape: &[usize], axis: usize) -> Vec<f64> {
    let (outer, dim, inner) = axis_extents(shape, axis);
    let mut out = vec![0.0; data.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |k: usize| (o * dim + k) * inner + i;
            let max = (0..dim).map(|k| data[idx(k)]).fold(f64::NEG_INFINITY, f64::max);
            let lse = max + (0..dim).map(|k| (data[idx(k)] - max).exp()).sum::<f64>().ln();
            for k in 0..dim {
                out[idx(k)] = data[idx(k)] - lse;
            }
        }
    }
    out
}

pub(crate) fn softmax(data: &[f64], shape: &[usize], axis: usize) -> Vec<f64> {
    let (outer, dim, inner) = axis_extents(shape, axis);
    let mut out = vec![0.0; data.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |k: usize| (o * dim + k) * inner + i;
            let max = (0..dim).map(|k| data[idx(k)]).fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for k in 0..dim {
                let e = (data[idx(k)] - max).exp();
                out[idx(k)] = e;
                total += e;
            }
            for k in 0..dim {
                out[idx(k)] /= total;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_variants_agree() {
        let a: Vec<f64> = (0..6).map(|v| v as f64 - 2.5).collect(); // [2,3]
        let b: Vec<f64> = (0..12).map(|v| (v as f64).sin()).collect(); // [3,4]
        let mut c1 = vec![0.0; 8];
        gemm_nn(2, 3, 4, &a, &b, &mut c1);

        // b transposed to [4,3]
        let bt: Vec<f64> = (0..12).map(|i| b[(i % 3) * 4 + i / 3]).collect();
        let mut c2 = vec![0.0; 8];
        gemm_nt(2, 3, 4, &a, &bt, &mut c2);

        // a transposed to [3,2]
        let at: Vec<f64> = (0..6).map(|i| a[(i % 2) * 3 + i / 2]).collect();
        let mut c3 = vec![0.0; 8];
        gemm_tn(2, 3, 4, &at, &b, &mut c3);

        for i in 0..8 {
            assert!((c1[i] - c2[i]).abs() < 1e-14);
            assert!((c1[i] - c3[i]).abs() < 1e-14);
        }
    }

    #[test]
    fn conv_geometry_errors() {
        assert!(ConvGeom::new(&[1, 3, 5, 5], &[4, 3, 3, 3], 2, 1, 0).is_err());
        assert!(ConvGeom::new(&[1, 4, 5, 5], &[4, 1, 3, 3], 2, 1, 0).is_err());
        assert!(ConvGeom::new(&[1, 4, 2, 2], &[4, 4, 3, 3], 1, 1, 0).is_err());
        let g = ConvGeom::new(&[2, 4, 5, 5], &[6, 2, 3, 3], 2, 2, 1).unwrap();
        assert_eq!(g.out_shape(), [2, 6, 3, 3]);
    }
}
