//! Register-blocked matrix multiply.
//!
//! Every output element is accumulated as `c + a[i,0]*b[0,j] + a[i,1]*b[1,j] + ...`
//! in ascending `k`, with a separate multiply and add per term. The result is
//! therefore bit-identical to the textbook triple loop regardless of which
//! instruction set the kernel was compiled for, and appending or removing
//! all-zero terms never perturbs the sum.

use super::Scalar;

const MR: usize = 4;
const NR: usize = 16;

/// Strided read-only view of a matrix: element `(i, j)` lives at
/// `data[i * row_stride + j * col_stride]`.
#[derive(Clone, Copy)]
pub(crate) struct MatRef<'a, T> {
    pub data: &'a [T],
    pub row_stride: usize,
    pub col_stride: usize,
}

impl<'a, T: Copy> MatRef<'a, T> {
    pub fn row_major(data: &'a [T], cols: usize) -> Self {
        MatRef {
            data,
            row_stride: cols,
            col_stride: 1,
        }
    }

    /// The transpose of a row-major `rows x cols` buffer.
    pub fn transposed(data: &'a [T], cols: usize) -> Self {
        MatRef {
            data,
            row_stride: 1,
            col_stride: cols,
        }
    }

    #[inline(always)]
    fn at(&self, i: usize, j: usize) -> T {
        self.data[i * self.row_stride + j * self.col_stride]
    }
}

/// `c += a · b` where `a` is `m x k`, `b` is `k x n` and `c` is a row-major
/// `m x n` buffer.
pub(crate) fn gemm_acc<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: MatRef<'_, T>,
    b: MatRef<'_, T>,
    c: &mut [T],
) {
    assert_eq!(c.len(), m * n, "gemm output buffer has wrong length");
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    #[cfg(target_arch = "x86_64")]
    {
        if std::arch::is_x86_feature_detected!("avx512f") {
            // SAFETY: feature presence checked at runtime just above.
            unsafe { gemm_avx512(m, k, n, a, b, c) };
            return;
        }
        if std::arch::is_x86_feature_detected!("avx2") {
            // SAFETY: feature presence checked at runtime just above.
            unsafe { gemm_avx2(m, k, n, a, b, c) };
            return;
        }
    }
    gemm_body(m, k, n, a, b, c);
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn gemm_avx2<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: MatRef<'_, T>,
    b: MatRef<'_, T>,
    c: &mut [T],
) {
    gemm_body(m, k, n, a, b, c)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx512f")]
unsafe fn gemm_avx512<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: MatRef<'_, T>,
    b: MatRef<'_, T>,
    c: &mut [T],
) {
    gemm_body(m, k, n, a, b, c)
}

#[inline(always)]
fn gemm_body<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: MatRef<'_, T>,
    b: MatRef<'_, T>,
    c: &mut [T],
) {
    let mut panel = vec![T::zero(); k * NR];
    let mut a_block = vec![T::zero(); k * MR];
    for jb in (0..n).step_by(NR) {
        let nr = NR.min(n - jb);
        for kk in 0..k {
            let dst = &mut panel[kk * NR..(kk + 1) * NR];
            for (j, d) in dst.iter_mut().enumerate() {
                *d = if j < nr { b.at(kk, jb + j) } else { T::zero() };
            }
        }

        let mut ib = 0;
        while ib < m {
            let mr = MR.min(m - ib);
            // Pack rows of `a` k-major so the inner loop reads contiguously.
            for kk in 0..k {
                for r in 0..MR {
                    a_block[kk * MR + r] = if r < mr { a.at(ib + r, kk) } else { T::zero() };
                }
            }
            micro_kernel(k, &a_block, &panel, c, n, ib, mr, jb, nr);
            ib += MR;
        }
    }
}

#[inline(always)]
#[allow(clippy::too_many_arguments)]
fn micro_kernel<T: Scalar>(
    k: usize,
    a_block: &[T],
    panel: &[T],
    c: &mut [T],
    ldc: usize,
    ib: usize,
    mr: usize,
    jb: usize,
    nr: usize,
) {
    let mut acc = [[T::zero(); NR]; MR];
    for r in 0..mr {
        let row = &c[(ib + r) * ldc + jb..(ib + r) * ldc + jb + nr];
        acc[r][..nr].copy_from_slice(row);
    }
    for (a_col, b_row) in a_block
        .chunks_exact(MR)
        .zip(panel.chunks_exact(NR))
        .take(k)
    {
        let b_row: &[T; NR] = b_row.try_into().unwrap();
        for r in 0..MR {
            let av = a_col[r];
            let acc_r = &mut acc[r];
            for j in 0..NR {
                acc_r[j] = acc_r[j] + av * b_row[j];
            }
        }
    }
    for r in 0..mr {
        let row = &mut c[(ib + r) * ldc + jb..(ib + r) * ldc + jb + nr];
        row.copy_from_slice(&acc[r][..nr]);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn naive(m: usize, k: usize, n: usize, a: &[f32], b: &[f32], c: &mut [f32]) {
        for i in 0..m {
            for j in 0..n {
                let mut s = c[i * n + j];
                for kk in 0..k {
                    s = s + a[i * k + kk] * b[kk * n + j];
                }
                c[i * n + j] = s;
            }
        }
    }

    #[test]
    fn matches_triple_loop_bit_for_bit() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for &(m, k, n) in &[(1, 1, 1), (5, 7, 3), (4, 16, 16), (9, 33, 17), (31, 290, 70)] {
            let a: Vec<f32> = (0..m * k).map(|_| rng.random_range(-1.0..1.0)).collect();
            let b: Vec<f32> = (0..k * n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let c0: Vec<f32> = (0..m * n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let mut expect = c0.clone();
            naive(m, k, n, &a, &b, &mut expect);
            let mut got = c0.clone();
            gemm_acc(m, k, n, MatRef::row_major(&a, k), MatRef::row_major(&b, n), &mut got);
            assert_eq!(expect, got, "m={m} k={k} n={n}");
        }
    }

    #[test]
    fn transposed_views() {
        // a is stored as k x m, b as n x k.
        let (m, k, n) = (3, 4, 5);
        let at: Vec<f64> = (0..k * m).map(|v| v as f64 * 0.5 - 2.0).collect();
        let bt: Vec<f64> = (0..n * k).map(|v| (v as f64).sin()).collect();
        let mut got = vec![0.0; m * n];
        gemm_acc(
            m,
            k,
            n,
            MatRef::transposed(&at, m),
            MatRef::transposed(&bt, k),
            &mut got,
        );
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for kk in 0..k {
                    s += at[kk * m + i] * bt[j * k + kk];
                }
                assert_eq!(got[i * n + j], s);
            }
        }
    }
}
