//! Packed, register-blocked matrix multiply.

use rayon::prelude::*;

use crate::Scalar;

const MR: usize = 4;
const NR: usize = 8;
/// Column panels handed to one rayon task.
const PANELS_PER_TASK: usize = 16;

/// `c[m×n] (+)= a[m×k] · b[k×n]`, all row-major and contiguous.
///
/// When `accumulate` is false `c` is overwritten.
pub fn gemm<T: Scalar>(
    m: usize,
    n: usize,
    k: usize,
    a: &[T],
    b: &[T],
    c: &mut [T],
    accumulate: bool,
) {
    assert_eq!(a.len(), m * k, "gemm: a");
    assert_eq!(b.len(), k * n, "gemm: b");
    assert_eq!(c.len(), m * n, "gemm: c");
    if !accumulate {
        c.fill(T::zero());
    }
    if m == 0 || n == 0 || k == 0 {
        return;
    }

    // A packed into MR-row strips, k-major inside each strip, zero padded.
    let strips = m.div_ceil(MR);
    let mut ap = vec![T::zero(); strips * MR * k];
    for s in 0..strips {
        let dst = &mut ap[s * MR * k..(s + 1) * MR * k];
        for r in 0..MR.min(m - s * MR) {
            let row = &a[(s * MR + r) * k..(s * MR + r + 1) * k];
            for (p, &v) in row.iter().enumerate() {
                dst[p * MR + r] = v;
            }
        }
    }

    let panels = n.div_ceil(NR);
    let out = SyncPtr(c.as_mut_ptr());
    let run = |first: usize| {
        let mut bp = vec![T::zero(); k * NR];
        for panel in first..(first + PANELS_PER_TASK).min(panels) {
            let j0 = panel * NR;
            let cols = NR.min(n - j0);
            for p in 0..k {
                let src = &b[p * n + j0..p * n + j0 + cols];
                let dst = &mut bp[p * NR..p * NR + NR];
                dst[..cols].copy_from_slice(src);
                dst[cols..].fill(T::zero());
            }
            for s in 0..strips {
                let rows = MR.min(m - s * MR);
                let acc = micro_kernel(&ap[s * MR * k..(s + 1) * MR * k], &bp);
                for (r, acc_row) in acc.iter().enumerate().take(rows) {
                    let base = (s * MR + r) * n + j0;
                    for (cc, &v) in acc_row.iter().enumerate().take(cols) {
                        // SAFETY: each task owns a disjoint set of column panels,
                        // so no two tasks touch the same element of `c`.
                        unsafe {
                            *out.get().add(base + cc) += v;
                        }
                    }
                }
            }
        }
    };

    let tasks: Vec<usize> = (0..panels).step_by(PANELS_PER_TASK).collect();
    if tasks.len() > 1 && m * n * k > 1 << 16 {
        tasks.into_par_iter().for_each(run);
    } else {
        tasks.into_iter().for_each(run);
    }
}

#[inline(always)]
fn micro_kernel<T: Scalar>(ap: &[T], bp: &[T]) -> [[T; NR]; MR] {
    let mut acc = [[T::zero(); NR]; MR];
    for (a, b) in ap.chunks_exact(MR).zip(bp.chunks_exact(NR)) {
        let a: &[T; MR] = a.try_into().unwrap();
        let b: &[T; NR] = b.try_into().unwrap();
        for r in 0..MR {
            let ar = a[r];
            for c in 0..NR {
                acc[r][c] += ar * b[c];
            }
        }
    }
    acc
}

#[derive(Clone, Copy)]
struct SyncPtr<T>(*mut T);

impl<T> SyncPtr<T> {
    #[inline]
    fn get(self) -> *mut T {
        self.0
    }
}

unsafe impl<T> Send for SyncPtr<T> {}
unsafe impl<T> Sync for SyncPtr<T> {}
