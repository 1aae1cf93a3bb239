// Dense kernels shared by the forward and backward passes.

/// `a[m,k] @ b[k,n]`
pub(crate) fn matmul(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; m * n];
    gemm(a, (k, 1), b, &mut out, m, k, n);
    out
}

/// `a[m,k] @ b[n,k]^T`
pub(crate) fn matmul_nt(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    let bt = transpose(b, n, k);
    matmul(a, &bt, m, k, n)
}

/// `a[k,m]^T @ b[k,n]`
pub(crate) fn matmul_tn(a: &[f32], b: &[f32], k: usize, m: usize, n: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; m * n];
    gemm(a, (1, m), b, &mut out, m, k, n);
    out
}

pub(crate) fn transpose(x: &[f32], rows: usize, cols: usize) -> Vec<f32> {
    let mut t = vec![0.0f32; rows * cols];
    const B: usize = 32;
    for i0 in (0..rows).step_by(B) {
        let i1 = (i0 + B).min(rows);
        for j0 in (0..cols).step_by(B) {
            let j1 = (j0 + B).min(cols);
            for (j, col) in t[j0 * rows..j1 * rows].chunks_exact_mut(rows).enumerate() {
                for (i, dst) in col[i0..i1].iter_mut().enumerate() {
                    *dst = x[(i0 + i) * cols + j0 + j];
                }
            }
        }
    }
    t
}

/// `out += A @ b[k,n]` where `A[i,p] = a[i * stride.0 + p * stride.1]`,
/// dispatching to an FMA build when available.
fn gemm(a: &[f32], stride: (usize, usize), b: &[f32], out: &mut [f32], m: usize, k: usize, n: usize) {
    assert!(m == 0 || k == 0 || a.len() > (m - 1) * stride.0 + (k - 1) * stride.1);
    assert!(b.len() >= k * n && out.len() >= m * n);
    #[cfg(target_arch = "x86_64")]
    {
        if std::is_x86_feature_detected!("avx2") && std::is_x86_feature_detected!("fma") {
            // SAFETY: the required CPU features were detected above.
            unsafe { gemm_fma(a, stride, b, out, m, k, n) };
            return;
        }
    }
    gemm_blocked::<false>(a, stride, b, out, m, k, n);
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2,fma")]
unsafe fn gemm_fma(a: &[f32], stride: (usize, usize), b: &[f32], out: &mut [f32], m: usize, k: usize, n: usize) {
    gemm_blocked::<true>(a, stride, b, out, m, k, n);
}

#[inline(always)]
fn madd<const FMA: bool>(acc: f32, x: f32, y: f32) -> f32 {
    if FMA {
        x.mul_add(y, acc)
    } else {
        acc + x * y
    }
}

const MR: usize = 4;

#[inline(always)]
fn gemm_blocked<const FMA: bool>(
    a: &[f32],
    (rs, cs): (usize, usize),
    b: &[f32],
    out: &mut [f32],
    m: usize,
    k: usize,
    n: usize,
) {
    let mut j0 = 0;
    while j0 + 16 <= n {
        panel::<FMA, 16>(a, (rs, cs), b, out, m, k, n, j0);
        j0 += 16;
    }
    while j0 + 8 <= n {
        panel::<FMA, 8>(a, (rs, cs), b, out, m, k, n, j0);
        j0 += 8;
    }
    if j0 < n {
        for i in 0..m {
            for p in 0..k {
                let av = a[i * rs + p * cs];
                for j in j0..n {
                    out[i * n + j] = madd::<FMA>(out[i * n + j], av, b[p * n + j]);
                }
            }
        }
    }
}

/// Columns `j0..j0 + NR` of the product, `MR` rows at a time.
#[inline(always)]
fn panel<const FMA: bool, const NR: usize>(
    a: &[f32],
    (rs, cs): (usize, usize),
    b: &[f32],
    out: &mut [f32],
    m: usize,
    k: usize,
    n: usize,
    j0: usize,
) {
    let mut i0 = 0;
    while i0 + MR <= m {
        let mut acc = [[0.0f32; NR]; MR];
        for p in 0..k {
            let brow: &[f32; NR] = b[p * n + j0..p * n + j0 + NR].try_into().expect("panel width");
            let base = i0 * rs + p * cs;
            let av: [f32; MR] = std::array::from_fn(|r| a[base + r * rs]);
            for r in 0..MR {
                let av = av[r];
                for l in 0..NR {
                    acc[r][l] = madd::<FMA>(acc[r][l], av, brow[l]);
                }
            }
        }
        for (r, acc_r) in acc.iter().enumerate() {
            let o = &mut out[(i0 + r) * n + j0..(i0 + r) * n + j0 + NR];
            for l in 0..NR {
                o[l] += acc_r[l];
            }
        }
        i0 += MR;
    }
    for i in i0..m {
        let mut acc = [0.0f32; NR];
        for p in 0..k {
            let brow: &[f32; NR] = b[p * n + j0..p * n + j0 + NR].try_into().expect("panel width");
            let av = a[i * rs + p * cs];
            for l in 0..NR {
                acc[l] = madd::<FMA>(acc[l], av, brow[l]);
            }
        }
        let o = &mut out[i * n + j0..i * n + j0 + NR];
        for l in 0..NR {
            o[l] += acc[l];
        }
    }
}

#[inline]
pub(crate) fn axpy(alpha: f32, x: &[f32], y: &mut [f32]) {
    for (yv, &xv) in y.iter_mut().zip(x) {
        *yv += alpha * xv;
    }
}

#[inline]
pub(crate) fn dot(a: &[f32], b: &[f32]) -> f32 {
    let mut acc = [0.0f32; 8];
    let chunks = a.len() / 8;
    for c in 0..chunks {
        let (x, y) = (&a[c * 8..c * 8 + 8], &b[c * 8..c * 8 + 8]);
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut s: f32 = acc.iter().sum();
    for i in chunks * 8..a.len() {
        s += a[i] * b[i];
    }
    s
}

/// Standard normal CDF.
#[inline]
pub(crate) fn phi_cdf(x: f32) -> f32 {
    0.5 * (1.0 + libm::erff(x * std::f32::consts::FRAC_1_SQRT_2))
}

/// Standard normal density.
#[inline]
pub(crate) fn phi_pdf(x: f32) -> f32 {
    const INV_SQRT_2PI: f32 = 0.398_942_3;
    INV_SQRT_2PI * (-0.5 * x * x).exp()
}

#[inline]
pub(crate) fn sigmoid(x: f32) -> f32 {
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

    fn naive(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    out[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        out
    }

    #[test]
    fn matmul_variants_agree_with_naive() {
        let (m, k, n) = (5, 11, 3);
        let a: Vec<f32> = (0..m * k).map(|i| (i as f32 * 0.37).sin()).collect();
        let b: Vec<f32> = (0..k * n).map(|i| (i as f32 * 0.91).cos()).collect();
        let want = naive(&a, &b, m, k, n);
        let close = |x: &[f32]| x.iter().zip(&want).all(|(p, q)| (p - q).abs() < 1e-5);
        assert!(close(&matmul(&a, &b, m, k, n)));
        assert!(close(&matmul_nt(&a, &transpose(&b, k, n), m, k, n)));
        assert!(close(&matmul_tn(&transpose(&a, m, k), &b, k, m, n)));
    }

    #[test]
    fn blocked_panels_and_tails_agree_with_naive() {
        for &(m, k, n) in &[(1, 1, 1), (4, 3, 8), (7, 9, 16), (9, 17, 27), (13, 40, 35), (3, 64, 7)] {
            let a: Vec<f32> = (0..m * k).map(|i| ((i * 7 + 3) as f32 * 0.13).sin()).collect();
            let b: Vec<f32> = (0..k * n).map(|i| ((i * 5 + 1) as f32 * 0.29).cos()).collect();
            let want = naive(&a, &b, m, k, n);
            let tol = 1e-5 * k as f32;
            let close = |x: &[f32]| x.len() == want.len() && x.iter().zip(&want).all(|(p, q)| (p - q).abs() < tol);
            assert!(close(&matmul(&a, &b, m, k, n)), "{m}x{k}x{n}");
            assert!(close(&matmul_nt(&a, &transpose(&b, k, n), m, k, n)), "nt {m}x{k}x{n}");
            assert!(close(&matmul_tn(&transpose(&a, m, k), &b, k, m, n)), "tn {m}x{k}x{n}");
            let mut portable = vec![0.0f32; m * n];
            gemm_blocked::<false>(&a, (k, 1), &b, &mut portable, m, k, n);
            assert!(close(&portable));
        }
    }
}
