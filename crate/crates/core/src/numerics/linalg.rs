//! Plain (untracked) dense kernels shared by the tape and by adapter code
//! that never needs gradients.

use alloc::vec;
use alloc::vec::Vec;

use super::Tensor;
use crate::{Error, Result};

/// Strided `out = a · b` through `matrixmultiply`. Strides are in elements:
/// `(rsa, csa)` for the `m×k` operand, `(rsb, csb)` for the `k×n` one.
#[allow(clippy::too_many_arguments)]
fn dgemm(a: &[f64], rsa: usize, csa: usize, b: &[f64], rsb: usize, csb: usize, m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    if m == 0 || n == 0 || k == 0 {
        return out;
    }
    debug_assert!(a.len() > (m - 1) * rsa + (k - 1) * csa);
    debug_assert!(b.len() > (k - 1) * rsb + (n - 1) * csb);
    // SAFETY: the asserted lengths cover every strided read, and `out`
    // holds exactly m·n elements written with row stride n.
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
            0.0,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
    out
}

/// `out[m×n] = a[m×k] · b[k×n]` on raw row-major slices.
pub(crate) fn gemm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    assert!(a.len() == m * k && b.len() == k * n, "gemm operand lengths");
    dgemm(a, k, 1, b, n, 1, m, k, n)
}

/// `out[m×n] = a[m×k] · bᵀ` where `b` is stored `n×k`.
pub(crate) fn gemm_bt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    assert!(a.len() == m * k && b.len() == n * k, "gemm_bt operand lengths");
    dgemm(a, k, 1, b, 1, k, m, k, n)
}

/// `out[k×n] = aᵀ · b` where `a` is stored `m×k` and `b` is `m×n`.
pub(crate) fn gemm_at(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    assert!(a.len() == m * k && b.len() == m * n, "gemm_at operand lengths");
    dgemm(a, 1, k, b, n, 1, k, m, n)
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2("matmul")?;
    let (k2, n) = b.dims2("matmul")?;
    if k != k2 {
        return Err(Error::shape("matmul", a.shape(), b.shape()));
    }
    Ok(Tensor::from_parts(vec![m, n], gemm(a.data(), b.data(), m, k, n)))
}

pub fn transpose(a: &Tensor) -> Result<Tensor> {
    let (m, n) = a.dims2("transpose")?;
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a.data()[i * n + j];
        }
    }
    Ok(Tensor::from_parts(vec![n, m], out))
}

/// Materialized Kronecker product: `out[i·s+u, j·t+v] = c[i,j]·d[u,v]`.
pub fn kron(c: &Tensor, d: &Tensor) -> Result<Tensor> {
    let (p, q) = c.dims2("kron")?;
    let (s, t) = d.dims2("kron")?;
    let cols = q * t;
    let mut out = vec![0.0; p * s * cols];
    for i in 0..p {
        for j in 0..q {
            let cij = c.data()[i * q + j];
            for u in 0..s {
                for v in 0..t {
                    out[(i * s + u) * cols + j * t + v] = cij * d.data()[u * t + v];
                }
            }
        }
    }
    Ok(Tensor::from_parts(vec![p * s, cols], out))
}

/// Shape bookkeeping for `x · kron(c, d)` with `c: p×q`, `d: s×t`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct KronDims {
    pub batch: usize,
    pub p: usize,
    pub q: usize,
    pub s: usize,
    pub t: usize,
}

impl KronDims {
    pub(crate) fn check(c: &Tensor, d: &Tensor, x: &Tensor) -> Result<Self> {
        let (p, q) = c.dims2("kron_apply")?;
        let (s, t) = d.dims2("kron_apply")?;
        let (batch, width) = x.dims2("kron_apply")?;
        if width != p * s {
            return Err(Error::shape("kron_apply", x.shape(), &[p * s, q * t]));
        }
        Ok(KronDims { batch, p, q, s, t })
    }
}

/// `x · kron(c, d)` without materializing the product: each row of `x` is
/// viewed as a `p×s` matrix `X` and mapped to `cᵀ X d` (a `q×t` matrix).
pub(crate) fn kron_apply_raw(c: &[f64], d: &[f64], x: &[f64], k: KronDims) -> Vec<f64> {
    let KronDims { batch, p, q, s, t } = k;
    let mut out = vec![0.0; batch * q * t];
    let mut xd = vec![0.0; p * t];
    for n in 0..batch {
        let xn = &x[n * p * s..(n + 1) * p * s];
        xd.iter_mut().for_each(|v| *v = 0.0);
        // X·D: p×t
        for i in 0..p {
            for u in 0..s {
                let xv = xn[i * s + u];
                if xv == 0.0 {
                    continue;
                }
                for v in 0..t {
                    xd[i * t + v] += xv * d[u * t + v];
                }
            }
        }
        // Cᵀ·(X·D): q×t
        let on = &mut out[n * q * t..(n + 1) * q * t];
        for i in 0..p {
            for j in 0..q {
                let cij = c[i * q + j];
                if cij == 0.0 {
                    continue;
                }
                for v in 0..t {
                    on[j * t + v] += cij * xd[i * t + v];
                }
            }
        }
    }
    out
}

/// Gradients of `kron_apply_raw` w.r.t. `(c, d, x)` given the output
/// gradient `g` (batch × q·t).
pub(crate) fn kron_apply_backward(
    c: &[f64],
    d: &[f64],
    x: &[f64],
    g: &[f64],
    k: KronDims,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let KronDims { batch, p, q, s, t } = k;
    let mut dc = vec![0.0; p * q];
    let mut dd = vec![0.0; s * t];
    let mut dx = vec![0.0; batch * p * s];
    for n in 0..batch {
        let xn = &x[n * p * s..(n + 1) * p * s];
        let gn = &g[n * q * t..(n + 1) * q * t];
        // X·D (p×t), then dC = (X·D)·Gᵀ
        let xd = gemm(xn, d, p, s, t);
        let dcn = gemm_bt(&xd, gn, p, t, q);
        // C·G (p×t): dX = C·G·Dᵀ, dD = Xᵀ·C·G
        let cg = gemm(c, gn, p, q, t);
        let dxn = gemm_bt(&cg, d, p, t, s);
        let ddn = gemm_at(xn, &cg, p, s, t);
        for (a, b) in dc.iter_mut().zip(&dcn) {
            *a += b;
        }
        for (a, b) in dd.iter_mut().zip(&ddn) {
            *a += b;
        }
        dx[n * p * s..(n + 1) * p * s].copy_from_slice(&dxn);
    }
    (dc, dd, dx)
}

/// Untracked `x · kron(c, d)`.
pub fn apply_kron_factored(c: &Tensor, d: &Tensor, x: &Tensor) -> Result<Tensor> {
    let k = KronDims::check(c, d, x)?;
    Ok(Tensor::from_parts(
        vec![k.batch, k.q * k.t],
        kron_apply_raw(c.data(), d.data(), x.data(), k),
    ))
}
