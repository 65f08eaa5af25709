//! Packed, cache-blocked matrix multiply.
//!
//! Single-threaded and free of fused multiply-add so that results are
//! bit-reproducible for a given build regardless of how many windows are
//! processed concurrently.

use crate::scalar::Scalar;

const MR: usize = 4;
const NR: usize = 8;
const KC: usize = 256;
const MC: usize = 64;
const NC: usize = 2048;

/// `c (m×n) += a (m×k) · b (k×n)`, all row-major. When `accumulate` is false
/// `c` is overwritten.
pub(crate) fn gemm<T: Scalar>(
    m: usize,
    n: usize,
    k: usize,
    a: &[T],
    b: &[T],
    c: &mut [T],
    accumulate: bool,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if !accumulate {
        c[..m * n].fill(T::zero());
    }
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    let mut bpack = Vec::new();
    let mut apack = Vec::new();
    for jc in (0..n).step_by(NC) {
        let nc = NC.min(n - jc);
        for pc in (0..k).step_by(KC) {
            let kc = KC.min(k - pc);
            pack_b(b, n, pc, kc, jc, nc, &mut bpack);
            for ic in (0..m).step_by(MC) {
                let mc = MC.min(m - ic);
                pack_a(a, k, ic, mc, pc, kc, &mut apack);
                for jr in (0..nc).step_by(NR) {
                    let bp = &bpack[(jr / NR) * kc * NR..][..kc * NR];
                    for ir in (0..mc).step_by(MR) {
                        let ap = &apack[(ir / MR) * kc * MR..][..kc * MR];
                        let tile = micro_kernel(kc, ap, bp);
                        let rows = MR.min(mc - ir);
                        let cols = NR.min(nc - jr);
                        for (i, acc) in tile.iter().enumerate().take(rows) {
                            let row = &mut c[(ic + ir + i) * n + jc + jr..][..cols];
                            for (dst, &v) in row.iter_mut().zip(acc.iter()) {
                                *dst += v;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Row-major transpose of an `rows × cols` matrix.
pub(crate) fn transpose<T: Scalar>(src: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); rows * cols];
    const B: usize = 32;
    for r0 in (0..rows).step_by(B) {
        for c0 in (0..cols).step_by(B) {
            for r in r0..(r0 + B).min(rows) {
                for c in c0..(c0 + B).min(cols) {
                    out[c * rows + r] = src[r * cols + c];
                }
            }
        }
    }
    out
}

#[inline(always)]
fn micro_kernel<T: Scalar>(kc: usize, ap: &[T], bp: &[T]) -> [[T; NR]; MR] {
    let mut acc = [[T::zero(); NR]; MR];
    for (a, b) in ap.chunks_exact(MR).zip(bp.chunks_exact(NR)).take(kc) {
        let a: &[T; MR] = a.try_into().unwrap();
        let b: &[T; NR] = b.try_into().unwrap();
        for i in 0..MR {
            let ai = a[i];
            for j in 0..NR {
                acc[i][j] = acc[i][j] + ai * b[j];
            }
        }
    }
    acc
}

fn pack_a<T: Scalar>(
    a: &[T],
    lda: usize,
    ic: usize,
    mc: usize,
    pc: usize,
    kc: usize,
    out: &mut Vec<T>,
) {
    let panels = mc.div_ceil(MR);
    out.clear();
    out.resize(panels * kc * MR, T::zero());
    for panel in 0..panels {
        let dst = &mut out[panel * kc * MR..][..kc * MR];
        for i in 0..MR {
            let row = panel * MR + i;
            if row >= mc {
                break;
            }
            let src = &a[(ic + row) * lda + pc..][..kc];
            for (p, &v) in src.iter().enumerate() {
                dst[p * MR + i] = v;
            }
        }
    }
}

fn pack_b<T: Scalar>(
    b: &[T],
    ldb: usize,
    pc: usize,
    kc: usize,
    jc: usize,
    nc: usize,
    out: &mut Vec<T>,
) {
    let panels = nc.div_ceil(NR);
    out.clear();
    out.resize(panels * kc * NR, T::zero());
    for p in 0..kc {
        let src = &b[(pc + p) * ldb + jc..][..nc];
        for panel in 0..panels {
            let cols = NR.min(nc - panel * NR);
            let dst = &mut out[panel * kc * NR + p * NR..][..cols];
            dst.copy_from_slice(&src[panel * NR..panel * NR + cols]);
        }
    }
}
