//! Strided matrix product `C (+)= op(A) · op(B)` over row-major buffers.

/// Below this many multiply-adds the packing overhead of the blocked kernel
/// dominates and a plain loop is faster.
const BLOCKED_MIN_WORK: usize = 512;

/// `c[m×n] = op(a)·op(b) + beta·c`, where `op(a)` is `m×k` and `op(b)` is `k×n`.
///
/// `a` is stored as `m×k` (or `k×m` when `trans_a`), `b` as `k×n` (or `n×k`
/// when `trans_b`), all row-major and contiguous.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    c: &mut [f64],
    beta: f64,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };

    if m * n * k >= BLOCKED_MIN_WORK {
        // SAFETY: slice lengths were checked above and the strides describe
        // in-bounds row-major layouts of those slices.
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
        return;
    }

    if beta == 0.0 {
        c.iter_mut().for_each(|x| *x = 0.0);
    } else if beta != 1.0 {
        c.iter_mut().for_each(|x| *x *= beta);
    }
    let (rsa, csa) = (rsa as usize, csa as usize);
    if !trans_b {
        // i-p-j order keeps the innermost loop contiguous in b and c
        for i in 0..m {
            let crow = &mut c[i * n..(i + 1) * n];
            for p in 0..k {
                let av = a[i * rsa + p * csa];
                let brow = &b[p * n..(p + 1) * n];
                for (cv, bv) in crow.iter_mut().zip(brow) {
                    *cv += av * bv;
                }
            }
        }
    } else {
        for i in 0..m {
            for j in 0..n {
                let brow = &b[j * k..(j + 1) * k];
                let mut acc = 0.0;
                for (p, bv) in brow.iter().enumerate() {
                    acc += a[i * rsa + p * csa] * bv;
                }
                c[i * n + j] += acc;
            }
        }
    }
}
