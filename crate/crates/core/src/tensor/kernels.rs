//! Matmul kernels. Every output element is produced by one sequential loop, so
//! splitting rows across threads never changes the result.

use rayon::prelude::*;

use super::Scalar;

const PAR_THRESHOLD: usize = 1 << 16;

/// `c[m,n] = a[m,k] · b[k,n]`
pub(crate) fn gemm_nn<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let row = |(i, c_row): (usize, &mut [T])| {
        c_row.iter_mut().for_each(|x| *x = T::zero());
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &a_ip) in a_row.iter().enumerate() {
            if a_ip == T::zero() {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += a_ip * bv;
            }
        }
    };
    if m * k * n >= PAR_THRESHOLD && m > 1 {
        c.par_chunks_mut(n).enumerate().for_each(row);
    } else {
        c.chunks_mut(n).enumerate().for_each(row);
    }
}

/// `c[m,r] = a[m,k] · b[r,k]ᵀ`
pub(crate) fn gemm_nt<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, r: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), r * k);
    debug_assert_eq!(c.len(), m * r);
    let row = |(i, c_row): (usize, &mut [T])| {
        let a_row = &a[i * k..(i + 1) * k];
        for (j, cv) in c_row.iter_mut().enumerate() {
            *cv = dot(a_row, &b[j * k..(j + 1) * k]);
        }
    };
    if m * k * r >= PAR_THRESHOLD && m > 1 {
        c.par_chunks_mut(r).enumerate().for_each(row);
    } else {
        c.chunks_mut(r).enumerate().for_each(row);
    }
}

/// `c[k,n] += a[m,k]ᵀ · g[m,n]`
pub(crate) fn gemm_tn_acc<T: Scalar>(a: &[T], g: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(g.len(), m * n);
    debug_assert_eq!(c.len(), k * n);
    const ROWS: usize = 16;
    let block = |(blk, c_blk): (usize, &mut [T])| {
        let p0 = blk * ROWS;
        let rows = c_blk.len() / n;
        for i in 0..m {
            let g_row = &g[i * n..(i + 1) * n];
            for r in 0..rows {
                let a_ip = a[i * k + p0 + r];
                if a_ip == T::zero() {
                    continue;
                }
                let c_row = &mut c_blk[r * n..(r + 1) * n];
                for (cv, &gv) in c_row.iter_mut().zip(g_row) {
                    *cv += a_ip * gv;
                }
            }
        }
    };
    if m * k * n >= PAR_THRESHOLD && k > ROWS {
        c.par_chunks_mut(ROWS * n).enumerate().for_each(block);
    } else {
        c.chunks_mut(ROWS * n).enumerate().for_each(block);
    }
}

pub(crate) fn dot<T: Scalar>(x: &[T], y: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let mut xs = x.chunks_exact(8);
    let mut ys = y.chunks_exact(8);
    for (a, b) in (&mut xs).zip(&mut ys) {
        for l in 0..8 {
            acc[l] += a[l] * b[l];
        }
    }
    let mut tail = T::zero();
    for (&a, &b) in xs.remainder().iter().zip(ys.remainder()) {
        tail += a * b;
    }
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail
}
