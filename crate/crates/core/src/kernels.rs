//! Raw numeric kernels shared by the graph ops.
//!
//! All matrices are row-major slices. The GEMM calls go through
//! `matrixmultiply`, which is single-threaded and deterministic for a fixed
//! build, so graph execution stays bitwise reproducible.

/// c = a[m,k] @ b[k,n] + beta * c
pub(crate) fn gemm(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], beta: f64, c: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            n as isize,
            1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// c = a[k,m]^T @ b[k,n] + beta * c  (a stored row-major as [k,m])
pub(crate) fn gemm_tn(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    b: &[f64],
    beta: f64,
    c: &mut [f64],
) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            1,
            m as isize,
            b.as_ptr(),
            n as isize,
            1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// c = a[m,k] @ b[n,k]^T + beta * c  (b stored row-major as [n,k])
pub(crate) fn gemm_nt(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    b: &[f64],
    beta: f64,
    c: &mut [f64],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            1,
            k as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Unfold a same-padded [t, f, cin] input into patch rows [t*f, k*k*cin].
///
/// Column layout matches a [k, k, cin, cout] filter tensor flattened to
/// [k*k*cin, cout], so convolution becomes one GEMM.
pub(crate) fn im2col(x: &[f64], t: usize, f: usize, cin: usize, k: usize, out: &mut [f64]) {
    let pad = k / 2;
    let cols = k * k * cin;
    debug_assert_eq!(x.len(), t * f * cin);
    debug_assert_eq!(out.len(), t * f * cols);
    out.fill(0.0);
    for ti in 0..t {
        for fi in 0..f {
            let row = (ti * f + fi) * cols;
            for dt in 0..k {
                let si = ti as isize + dt as isize - pad as isize;
                if si < 0 || si >= t as isize {
                    continue;
                }
                for df in 0..k {
                    let sj = fi as isize + df as isize - pad as isize;
                    if sj < 0 || sj >= f as isize {
                        continue;
                    }
                    let src = (si as usize * f + sj as usize) * cin;
                    let dst = row + (dt * k + df) * cin;
                    out[dst..dst + cin].copy_from_slice(&x[src..src + cin]);
                }
            }
        }
    }
}

/// Scatter-add patch-row gradients [t*f, k*k*cin] back onto the input grid.
pub(crate) fn col2im_add(cols_grad: &[f64], t: usize, f: usize, cin: usize, k: usize, dx: &mut [f64]) {
    let pad = k / 2;
    let cols = k * k * cin;
    debug_assert_eq!(dx.len(), t * f * cin);
    debug_assert_eq!(cols_grad.len(), t * f * cols);
    for ti in 0..t {
        for fi in 0..f {
            let row = (ti * f + fi) * cols;
            for dt in 0..k {
                let si = ti as isize + dt as isize - pad as isize;
                if si < 0 || si >= t as isize {
                    continue;
                }
                for df in 0..k {
                    let sj = fi as isize + df as isize - pad as isize;
                    if sj < 0 || sj >= f as isize {
                        continue;
                    }
                    let dst = (si as usize * f + sj as usize) * cin;
                    let src = row + (dt * k + df) * cin;
                    for c in 0..cin {
                        dx[dst + c] += cols_grad[src + c];
                    }
                }
            }
        }
    }
}

pub(crate) fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
