//! Dense kernels shared by the tape's forward and backward passes.

/// `c (m×n) = a (m×k) · b (k×n)`, optionally accumulating into `c`.
/// A transposed flag means the operand is stored as its transpose.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    a_trans: bool,
    b: &[f32],
    b_trans: bool,
    c: &mut [f32],
    accumulate: bool,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the slices cover exactly the strided extents described above.
    unsafe {
        matrixmultiply::sgemm(
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
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn k(&self) -> usize {
        self.c * self.kh * self.kw
    }

    pub fn p(&self) -> usize {
        self.oh * self.ow
    }

    /// 1×1, stride 1, unpadded: the input plane already is the column matrix.
    pub fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

pub(crate) fn im2col(g: &ConvGeom, x: &[f32], cols: &mut [f32]) {
    let p = g.p();
    for c in 0..g.c {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let out = &mut cols[row * p..(row + 1) * p];
                for oi in 0..g.oh {
                    let ii = (oi * g.stride + ki) as isize - g.pad as isize;
                    let dst = &mut out[oi * g.ow..(oi + 1) * g.ow];
                    if ii < 0 || ii >= g.h as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    let src = &plane[ii as usize * g.w..(ii as usize + 1) * g.w];
                    for (oj, d) in dst.iter_mut().enumerate() {
                        let jj = (oj * g.stride + kj) as isize - g.pad as isize;
                        *d = if jj < 0 || jj >= g.w as isize {
                            0.0
                        } else {
                            src[jj as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Scatter-adds a column matrix back onto an input plane (adjoint of `im2col`).
pub(crate) fn col2im_add(g: &ConvGeom, cols: &[f32], dx: &mut [f32]) {
    let p = g.p();
    for c in 0..g.c {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * p..(row + 1) * p];
                for oi in 0..g.oh {
                    let ii = (oi * g.stride + ki) as isize - g.pad as isize;
                    if ii < 0 || ii >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[ii as usize * g.w..(ii as usize + 1) * g.w];
                    for oj in 0..g.ow {
                        let jj = (oj * g.stride + kj) as isize - g.pad as isize;
                        if jj >= 0 && jj < g.w as isize {
                            dst[jj as usize] += src[oi * g.ow + oj];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward(
    g: &ConvGeom,
    n: usize,
    f: usize,
    x: &[f32],
    w: &[f32],
    out: &mut [f32],
) {
    let k = g.k();
    let p = g.p();
    let in_stride = g.c * g.h * g.w;
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![0.0; k * p]
    };
    for b in 0..n {
        let xb = &x[b * in_stride..(b + 1) * in_stride];
        let ob = &mut out[b * f * p..(b + 1) * f * p];
        if g.is_pointwise() {
            gemm(f, k, p, w, false, xb, false, ob, false);
        } else {
            im2col(g, xb, &mut cols);
            gemm(f, k, p, w, false, &cols, false, ob, false);
        }
    }
}

/// Accumulates input and/or kernel gradients of a convolution.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_backward(
    g: &ConvGeom,
    n: usize,
    f: usize,
    x: &[f32],
    w: &[f32],
    dy: &[f32],
    mut dx: Option<&mut [f32]>,
    mut dw: Option<&mut [f32]>,
) {
    let k = g.k();
    let p = g.p();
    let in_stride = g.c * g.h * g.w;
    let pointwise = g.is_pointwise();
    let mut cols = if pointwise { Vec::new() } else { vec![0.0; k * p] };
    let mut dcols = if pointwise || dx.is_none() {
        Vec::new()
    } else {
        vec![0.0; k * p]
    };
    for b in 0..n {
        let xb = &x[b * in_stride..(b + 1) * in_stride];
        let dyb = &dy[b * f * p..(b + 1) * f * p];
        if let Some(dw) = dw.as_deref_mut() {
            if pointwise {
                gemm(f, p, k, dyb, false, xb, true, dw, true);
            } else {
                im2col(g, xb, &mut cols);
                gemm(f, p, k, dyb, false, &cols, true, dw, true);
            }
        }
        if let Some(dx) = dx.as_deref_mut() {
            let dxb = &mut dx[b * in_stride..(b + 1) * in_stride];
            if pointwise {
                gemm(k, f, p, w, true, dyb, false, dxb, true);
            } else {
                gemm(k, f, p, w, true, dyb, false, &mut dcols, false);
                col2im_add(g, &dcols, dxb);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_transposes() {
        // a = [[1,2],[3,4]], b = [[5,6],[7,8]]
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        let mut c = [0.0; 4];
        gemm(2, 2, 2, &a, false, &b, false, &mut c, false);
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);
        // aᵀ stored as a
        gemm(2, 2, 2, &a, true, &b, false, &mut c, false);
        assert_eq!(c, [26.0, 30.0, 38.0, 44.0]);
        gemm(2, 2, 2, &a, false, &b, true, &mut c, true);
        assert_eq!(c, [26.0 + 17.0, 30.0 + 23.0, 38.0 + 39.0, 44.0 + 53.0]);
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let g = ConvGeom {
            c: 2,
            h: 5,
            w: 4,
            kh: 3,
            kw: 3,
            stride: 2,
            pad: 1,
            oh: 3,
            ow: 2,
        };
        let x: Vec<f32> = (0..40).map(|i| (i as f32 * 0.37).sin()).collect();
        let y: Vec<f32> = (0..g.k() * g.p()).map(|i| (i as f32 * 0.11).cos()).collect();
        let mut cols = vec![0.0; g.k() * g.p()];
        im2col(&g, &x, &mut cols);
        let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| (*a as f64) * (*b as f64)).sum();
        let mut back = vec![0.0; 40];
        col2im_add(&g, &y, &mut back);
        let rhs: f64 = back.iter().zip(&x).map(|(a, b)| (*a as f64) * (*b as f64)).sum();
        assert!((lhs - rhs).abs() < 1e-4, "{lhs} vs {rhs}");
    }
}
