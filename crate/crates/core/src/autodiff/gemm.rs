//! Register-blocked matrix product used by the convolution paths.
//!
//! Every output element is accumulated over the inner dimension in ascending
//! order with plain multiply-then-add, so the result is bitwise identical to
//! a naive triple loop with the same starting value.

use rayon::prelude::*;

use crate::tensor::Element;

const MR: usize = 4;
const NR: usize = 16;

/// Row-major matrix view with a leading dimension.
#[derive(Clone, Copy)]
pub(crate) struct MatRef<'a, T> {
    pub data: &'a [T],
    pub ld: usize,
}

/// `c[i][j] = (accumulate ? c[i][j] : 0) + sum_l a[i][l] * b[l][j]`
/// for `i < m`, `j < n`, `l < k`.
pub(crate) fn gemm<T: Element>(
    m: usize,
    n: usize,
    k: usize,
    a: MatRef<'_, T>,
    b: MatRef<'_, T>,
    c: &mut [T],
    ldc: usize,
    accumulate: bool,
) {
    if m == 0 || n == 0 {
        return;
    }
    debug_assert!(a.data.len() >= (m - 1) * a.ld + k);
    debug_assert!(k == 0 || b.data.len() >= (k - 1) * b.ld + n);
    debug_assert!(c.len() >= (m - 1) * ldc + n);

    // Row blocks are independent, so splitting them across threads does not
    // change any result.
    let rows_per_task = MR * 8;
    let work = m * n * k;
    if work >= 1 << 21 && m > rows_per_task && rayon::current_num_threads() > 1 {
        let span = rows_per_task * ldc;
        let c_len = (m - 1) * ldc + n;
        c[..c_len].par_chunks_mut(span).enumerate().for_each(|(t, c_blk)| {
            let i0 = t * rows_per_task;
            let rows = rows_per_task.min(m - i0);
            let a_blk = MatRef { data: &a.data[i0 * a.ld..], ld: a.ld };
            gemm_serial(rows, n, k, a_blk, b, c_blk, ldc, accumulate);
        });
    } else {
        gemm_serial(m, n, k, a, b, c, ldc, accumulate);
    }
}

fn gemm_serial<T: Element>(
    m: usize,
    n: usize,
    k: usize,
    a: MatRef<'_, T>,
    b: MatRef<'_, T>,
    c: &mut [T],
    ldc: usize,
    accumulate: bool,
) {
    let mut i = 0;
    while i + MR <= m {
        let mut j = 0;
        while j + NR <= n {
            block::<T, MR, NR>(k, a, b, c, ldc, i, j, accumulate);
            j += NR;
        }
        if j + NR / 2 <= n {
            block::<T, MR, { NR / 2 }>(k, a, b, c, ldc, i, j, accumulate);
            j += NR / 2;
        }
        if j < n {
            edge(MR, n - j, k, a, b, c, ldc, i, j, accumulate);
        }
        i += MR;
    }
    while i < m {
        let mut j = 0;
        while j + NR <= n {
            block::<T, 1, NR>(k, a, b, c, ldc, i, j, accumulate);
            j += NR;
        }
        if j < n {
            edge(1, n - j, k, a, b, c, ldc, i, j, accumulate);
        }
        i += 1;
    }
}

#[inline(always)]
#[allow(clippy::too_many_arguments)]
fn block<T: Element, const R: usize, const C: usize>(
    k: usize,
    a: MatRef<'_, T>,
    b: MatRef<'_, T>,
    c: &mut [T],
    ldc: usize,
    i0: usize,
    j0: usize,
    accumulate: bool,
) {
    let mut acc = [[T::zero(); C]; R];
    if accumulate {
        for (r, row) in acc.iter_mut().enumerate() {
            row.copy_from_slice(&c[(i0 + r) * ldc + j0..][..C]);
        }
    }
    let a_rows: [&[T]; R] = std::array::from_fn(|r| &a.data[(i0 + r) * a.ld..][..k]);
    for l in 0..k {
        let b_row: &[T; C] = b.data[l * b.ld + j0..][..C].try_into().unwrap();
        for r in 0..R {
            let av = a_rows[r][l];
            for (acc_v, &bv) in acc[r].iter_mut().zip(b_row) {
                *acc_v = *acc_v + av * bv;
            }
        }
    }
    for (r, row) in acc.iter().enumerate() {
        c[(i0 + r) * ldc + j0..][..C].copy_from_slice(row);
    }
}

#[allow(clippy::too_many_arguments)]
fn edge<T: Element>(
    rows: usize,
    cols: usize,
    k: usize,
    a: MatRef<'_, T>,
    b: MatRef<'_, T>,
    c: &mut [T],
    ldc: usize,
    i0: usize,
    j0: usize,
    accumulate: bool,
) {
    let mut acc = [T::zero(); NR];
    for r in 0..rows {
        let c_row = &mut c[(i0 + r) * ldc + j0..][..cols];
        if accumulate {
            acc[..cols].copy_from_slice(c_row);
        } else {
            acc[..cols].iter_mut().for_each(|v| *v = T::zero());
        }
        let a_row = &a.data[(i0 + r) * a.ld..][..k];
        for (l, &av) in a_row.iter().enumerate() {
            let b_row = &b.data[l * b.ld + j0..][..cols];
            for (acc_v, &bv) in acc[..cols].iter_mut().zip(b_row) {
                *acc_v = *acc_v + av * bv;
            }
        }
        c_row.copy_from_slice(&acc[..cols]);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn naive(m: usize, n: usize, k: usize, a: &[f64], b: &[f64], c0: &[f64], acc: bool) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut s = if acc { c0[i * n + j] } else { 0.0 };
                for l in 0..k {
                    s = s + a[i * k + l] * b[l * n + j];
                }
                c[i * n + j] = s;
            }
        }
        c
    }

    #[test]
    fn matches_naive_bitwise_on_ragged_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for &(m, n, k) in &[(1, 1, 1), (3, 5, 7), (4, 16, 9), (9, 37, 13), (17, 33, 1), (8, 64, 40)] {
            let a: Vec<f64> = (0..m * k).map(|_| rng.random_range(-1.0..1.0)).collect();
            let b: Vec<f64> = (0..k * n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let c0: Vec<f64> = (0..m * n).map(|_| rng.random_range(-1.0..1.0)).collect();
            for acc in [false, true] {
                let mut c = c0.clone();
                gemm(m, n, k, MatRef { data: &a, ld: k }, MatRef { data: &b, ld: n }, &mut c, n, acc);
                let want = naive(m, n, k, &a, &b, &c0, acc);
                assert!(c.iter().zip(&want).all(|(x, y)| x.to_bits() == y.to_bits()), "{m}x{n}x{k}");
            }
        }
    }
}
