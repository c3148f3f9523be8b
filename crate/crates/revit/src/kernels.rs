//! Shared numeric kernels used by both the tape ops and the pure attention
//! API. All loops run in a fixed order so results are bitwise deterministic.

use crate::tensor::Real;

/// out[m,n] += a[m,k] * b[k,n]
pub(crate) fn matmul_nn_acc(a: &[Real], b: &[Real], m: usize, k: usize, n: usize, out: &mut [Real]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let out_row = &mut out[i * n..(i + 1) * n];
        for (p, &av) in a_row.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

/// out[m,n] += a[m,k] * b[n,k]^T
pub(crate) fn matmul_nt_acc(a: &[Real], b: &[Real], m: usize, k: usize, n: usize, out: &mut [Real]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for (&av, &bv) in a_row.iter().zip(b_row) {
                acc += av * bv;
            }
            out[i * n + j] += acc;
        }
    }
}

/// out[m,n] += a[k,m]^T * b[k,n]
pub(crate) fn matmul_tn_acc(a: &[Real], b: &[Real], m: usize, k: usize, n: usize, out: &mut [Real]) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for p in 0..k {
        let a_row = &a[p * m..(p + 1) * m];
        let b_row = &b[p * n..(p + 1) * n];
        for (i, &av) in a_row.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let out_row = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

/// Row-wise softmax with max subtraction.
pub(crate) fn softmax_rows(x: &[Real], rows: usize, cols: usize, out: &mut [Real]) {
    debug_assert_eq!(x.len(), rows * cols);
    debug_assert_eq!(out.len(), rows * cols);
    for r in 0..rows {
        let row = &x[r * cols..(r + 1) * cols];
        let out_row = &mut out[r * cols..(r + 1) * cols];
        let max = row.iter().cloned().fold(Real::NEG_INFINITY, Real::max);
        let mut sum = 0.0;
        for (o, &v) in out_row.iter_mut().zip(row) {
            let e = (v - max).exp();
            *o = e;
            sum += e;
        }
        for o in out_row.iter_mut() {
            *o /= sum;
        }
    }
}

/// log(sum(exp(row))) with max subtraction.
pub(crate) fn logsumexp_row(row: &[Real]) -> Real {
    let max = row.iter().cloned().fold(Real::NEG_INFINITY, Real::max);
    let sum: Real = row.iter().map(|&v| (v - max).exp()).sum();
    max + sum.ln()
}

/// Per-row mean/variance normalization followed by the affine map.
pub(crate) fn layer_norm_rows(
    x: &[Real],
    gamma: &[Real],
    beta: &[Real],
    eps: Real,
    rows: usize,
    cols: usize,
    out: &mut [Real],
) {
    debug_assert_eq!(gamma.len(), cols);
    debug_assert_eq!(beta.len(), cols);
    for r in 0..rows {
        let row = &x[r * cols..(r + 1) * cols];
        let out_row = &mut out[r * cols..(r + 1) * cols];
        let (mean, inv_std) = row_moments(row, eps);
        for ((o, &v), (&g, &b)) in out_row.iter_mut().zip(row).zip(gamma.iter().zip(beta)) {
            *o = (v - mean) * inv_std * g + b;
        }
    }
}

/// (mean, 1/sqrt(var + eps)) over one row, biased variance.
pub(crate) fn row_moments(row: &[Real], eps: Real) -> (Real, Real) {
    let n = row.len() as Real;
    let mean: Real = row.iter().sum::<Real>() / n;
    let var: Real = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<Real>() / n;
    (mean, 1.0 / (var + eps).sqrt())
}

/// GELU in the exact-erf form x * Phi(x).
pub(crate) fn gelu_val(x: Real) -> Real {
    let xf = x as f64;
    (xf * 0.5 * (1.0 + libm::erf(xf / std::f64::consts::SQRT_2))) as Real
}

/// d/dx [x * Phi(x)] = Phi(x) + x * phi(x)
pub(crate) fn gelu_grad(x: Real) -> Real {
    let xf = x as f64;
    let phi_cum = 0.5 * (1.0 + libm::erf(xf / std::f64::consts::SQRT_2));
    let phi_pdf = (-0.5 * xf * xf).exp() / (2.0 * std::f64::consts::PI).sqrt();
    (phi_cum + xf * phi_pdf) as Real
}

pub(crate) fn sigmoid_val(x: Real) -> Real {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
