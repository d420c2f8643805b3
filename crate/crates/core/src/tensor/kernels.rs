//! Raw numeric kernels shared by the forward and backward rules.

/// `c = beta * c + a * b` for row-major `a` (m×k) and `b` (k×n), with either
/// operand optionally read transposed.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|x| *x *= beta);
        return;
    }
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above guarantee every strided access stays inside
    // the slices: `a` is read as m×k, `b` as k×n and `c` written as m×n.
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

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeometry {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub stride: usize,
    pub padding: usize,
    pub h_out: usize,
    pub w_out: usize,
}

pub(crate) const KSIZE: usize = 3;

impl ConvGeometry {
    pub fn cols_rows(&self) -> usize {
        self.c_in * KSIZE * KSIZE
    }

    pub fn cols_len(&self) -> usize {
        self.h_out * self.w_out
    }
}

/// Upper bound on patch-matrix entries materialized at once.
const COLS_BUDGET: usize = 1 << 16;

/// Images per batched patch matrix.
pub(crate) fn images_per_chunk(g: &ConvGeometry) -> usize {
    (COLS_BUDGET / (g.cols_rows() * g.cols_len()).max(1)).max(1)
}

/// Output columns `ox` whose input column `ox·stride + kx − padding` lies
/// inside the image.
fn valid_cols(g: &ConvGeometry, kx: usize) -> std::ops::Range<usize> {
    let lo = g.padding.saturating_sub(kx).div_ceil(g.stride);
    let hi = if g.w + g.padding > kx {
        ((g.w + g.padding - kx - 1) / g.stride + 1).min(g.w_out)
    } else {
        0
    };
    lo..hi.max(lo)
}

/// Unfolds one C×H×W image into columns `off..off + H'·W'` of a
/// (C·9)×`ld` patch matrix.
pub(crate) fn im2col(img: &[f64], g: &ConvGeometry, cols: &mut [f64], ld: usize, off: usize) {
    let hw_out = g.cols_len();
    for c in 0..g.c_in {
        let plane = &img[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..KSIZE {
            for kx in 0..KSIZE {
                let row = (c * KSIZE + ky) * KSIZE + kx;
                let dst = &mut cols[row * ld + off..row * ld + off + hw_out];
                let valid = valid_cols(g, kx);
                for oy in 0..g.h_out {
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    let line = &mut dst[oy * g.w_out..(oy + 1) * g.w_out];
                    if iy < 0 || iy >= g.h as isize || valid.is_empty() {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    line[..valid.start].fill(0.0);
                    line[valid.end..].fill(0.0);
                    let first = valid.start * g.stride + kx - g.padding;
                    if g.stride == 1 {
                        line[valid.clone()].copy_from_slice(&src[first..first + valid.len()]);
                    } else {
                        for (k, v) in line[valid.clone()].iter_mut().enumerate() {
                            *v = src[first + k * g.stride];
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates patch gradients back into the image.
pub(crate) fn col2im_add(cols: &[f64], g: &ConvGeometry, img: &mut [f64], ld: usize, off: usize) {
    let hw_out = g.cols_len();
    for c in 0..g.c_in {
        let plane = &mut img[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..KSIZE {
            for kx in 0..KSIZE {
                let row = (c * KSIZE + ky) * KSIZE + kx;
                let src = &cols[row * ld + off..row * ld + off + hw_out];
                let valid = valid_cols(g, kx);
                if valid.is_empty() {
                    continue;
                }
                let first = valid.start * g.stride + kx - g.padding;
                for oy in 0..g.h_out {
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let line = &src[oy * g.w_out + valid.start..oy * g.w_out + valid.end];
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (k, v) in line.iter().enumerate() {
                        dst[first + k * g.stride] += v;
                    }
                }
            }
        }
    }
}

/// Numerically stable `ln(1 + e^x)`.
pub(crate) fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(m: usize, k: usize, n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    c[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        c
    }

    #[test]
    fn gemm_transposes_agree_with_naive() {
        let a: Vec<f64> = (0..6).map(|x| x as f64 - 2.0).collect(); // 2x3
        let b: Vec<f64> = (0..12).map(|x| (x as f64) * 0.5).collect(); // 3x4
        let want = naive(2, 3, 4, &a, &b);
        let mut c = vec![0.0; 8];
        gemm(2, 3, 4, &a, false, &b, false, 0.0, &mut c);
        assert_eq!(c, want);

        // a stored transposed (3x2), b stored transposed (4x3)
        let at: Vec<f64> = (0..3).flat_map(|p| (0..2).map(move |i| (i, p))).map(|(i, p)| a[i * 3 + p]).collect();
        let bt: Vec<f64> = (0..4).flat_map(|j| (0..3).map(move |p| (p, j))).map(|(p, j)| b[p * 4 + j]).collect();
        let mut c2 = vec![0.0; 8];
        gemm(2, 3, 4, &at, true, &bt, true, 0.0, &mut c2);
        assert_eq!(c2, want);
    }

    #[test]
    fn softplus_is_stable() {
        assert!((softplus(0.0) - 2f64.ln()).abs() < 1e-15);
        assert_eq!(softplus(1000.0), 1000.0);
        assert!(softplus(-1000.0) >= 0.0);
        assert!((sigmoid(-800.0)).abs() < 1e-300);
    }
}
