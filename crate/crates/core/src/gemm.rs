//! Matrix multiply tuned for this crate's convolution shapes.
//!
//! The lowered convolutions produce many tall-skinny products (weight
//! matrices with millions of rows against a handful of columns at the
//! bottleneck) where packing-based GEMM libraries spend more time copying
//! than multiplying. This kernel streams the operands in place with a
//! 4-row by 16-column register tile and a fused-multiply-add inner loop.
//!
//! Accumulation order over `k` is fixed per output element and row blocks
//! are data-parallel, so results are bit-identical regardless of thread
//! count.

use rayon::prelude::*;

const TILE_COLS: usize = 16;
const TILE_ROWS: usize = 4;
// Row blocks handed to rayon; large enough to amortize task dispatch.
const BLOCK_ROWS: usize = 64;
// Below this many multiply-adds the parallel dispatch costs more than it buys.
const PAR_MIN_MACS: usize = 1 << 17;

/// `C = A(m x k) * B(k x n)`, with `A` and `B` given in arbitrary strides and
/// `C` written row-major contiguous. Operands with a non-unit column stride
/// are first materialized row-major.
pub fn gemm_f32(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    rsa: usize,
    csa: usize,
    b: &[f32],
    rsb: usize,
    csb: usize,
    c: &mut [f32],
) {
    debug_assert!(c.len() >= m * n);

    // A given as the transpose of a contiguous (k x m) buffer, with far more
    // weight data than output: compute C^T = B^T * buffer instead, which
    // streams the buffer in place, then transpose the small result.
    if rsa == 1 && csa == m && m * k > 4 * (m * n + k * n) {
        let mut ct = vec![0.0f32; n * m];
        gemm_f32(n, k, m, b, csb, rsb, a, csa, rsa, &mut ct);
        for j in 0..n {
            let row = &ct[j * m..(j + 1) * m];
            for (i, &v) in row.iter().enumerate() {
                c[i * n + j] = v;
            }
        }
        return;
    }

    let a_buf;
    let a_rows: &[f32] = if csa == 1 && rsa == k {
        a
    } else {
        a_buf = materialize(m, k, a, rsa, csa);
        &a_buf
    };
    let parallel = 2 * m * k * n >= PAR_MIN_MACS;

    // Tall-skinny products (the bottleneck layers) go through a dot-product
    // kernel over a transposed copy of B, streaming each A row exactly once.
    if n < 8 {
        let bt = materialize(n, k, b, csb, rsb);
        let run = |(i, c_row): (usize, &mut [f32])| {
            let a_row = &a_rows[i * k..(i + 1) * k];
            for (j, out) in c_row.iter_mut().enumerate() {
                *out = dot(a_row, &bt[j * k..(j + 1) * k]);
            }
        };
        if parallel {
            c[..m * n].par_chunks_mut(n).enumerate().for_each(run);
        } else {
            c[..m * n].chunks_mut(n).enumerate().for_each(run);
        }
        return;
    }

    let b_buf;
    let b_rows: &[f32] = if csb == 1 && rsb == n {
        b
    } else {
        b_buf = materialize(k, n, b, rsb, csb);
        &b_buf
    };
    // Small m still wants several tasks per thread.
    let block_rows = if m >= 2 * BLOCK_ROWS { BLOCK_ROWS } else { TILE_ROWS };
    let run = |(block, c_block): (usize, &mut [f32])| {
        let row0 = block * block_rows;
        let rows = c_block.len() / n;
        kernel(rows, k, n, &a_rows[row0 * k..(row0 + rows) * k], b_rows, c_block);
    };
    if parallel {
        c[..m * n]
            .par_chunks_mut(block_rows * n)
            .enumerate()
            .for_each(run);
    } else {
        c[..m * n].chunks_mut(block_rows * n).enumerate().for_each(run);
    }
}

/// Dot product with a fixed lane-then-sequential reduction order.
#[inline]
fn dot(a: &[f32], b: &[f32]) -> f32 {
    #[cfg(target_arch = "x86_64")]
    {
        if std::arch::is_x86_feature_detected!("avx2") && std::arch::is_x86_feature_detected!("fma")
        {
            // Safety: gated on the feature check; slices are equal length.
            unsafe {
                return dot_fma(a, b);
            }
        }
    }
    dot_generic(a, b)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2,fma")]
unsafe fn dot_fma(a: &[f32], b: &[f32]) -> f32 {
    use std::arch::x86_64::*;
    debug_assert_eq!(a.len(), b.len());
    let k = a.len();
    let (ap, bp) = (a.as_ptr(), b.as_ptr());
    let mut acc = [_mm256_setzero_ps(); 4];
    let mut kk = 0;
    while kk + 32 <= k {
        for u in 0..4 {
            let av = _mm256_loadu_ps(ap.add(kk + 8 * u));
            let bv = _mm256_loadu_ps(bp.add(kk + 8 * u));
            acc[u] = _mm256_fmadd_ps(av, bv, acc[u]);
        }
        kk += 32;
    }
    let acc01 = _mm256_add_ps(acc[0], acc[1]);
    let acc23 = _mm256_add_ps(acc[2], acc[3]);
    let sum = _mm256_add_ps(acc01, acc23);
    let mut lanes = [0.0f32; 8];
    _mm256_storeu_ps(lanes.as_mut_ptr(), sum);
    let mut total = lanes.iter().sum::<f32>();
    while kk < k {
        total = (*ap.add(kk)).mul_add(*bp.add(kk), total);
        kk += 1;
    }
    total
}

fn dot_generic(a: &[f32], b: &[f32]) -> f32 {
    let mut lanes = [0.0f32; 8];
    let mut chunks_a = a.chunks_exact(8);
    let mut chunks_b = b.chunks_exact(8);
    for (ca, cb) in (&mut chunks_a).zip(&mut chunks_b) {
        for t in 0..8 {
            lanes[t] = ca[t].mul_add(cb[t], lanes[t]);
        }
    }
    let mut total = lanes.iter().sum::<f32>();
    for (x, y) in chunks_a.remainder().iter().zip(chunks_b.remainder()) {
        total = x.mul_add(*y, total);
    }
    total
}

/// Copies a strided matrix view into a row-major contiguous buffer, moving
/// 32x32 blocks so both sides stay cache-resident.
fn materialize(rows: usize, cols: usize, src: &[f32], rs: usize, cs: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; rows * cols];
    if cs == 1 && rs == cols {
        out.copy_from_slice(&src[..rows * cols]);
        return out;
    }
    const BT: usize = 32;
    for i0 in (0..rows).step_by(BT) {
        let i1 = (i0 + BT).min(rows);
        for j0 in (0..cols).step_by(BT) {
            let j1 = (j0 + BT).min(cols);
            for i in i0..i1 {
                let base = i * rs;
                let dst = &mut out[i * cols + j0..i * cols + j1];
                for (dj, v) in dst.iter_mut().enumerate() {
                    *v = src[base + (j0 + dj) * cs];
                }
            }
        }
    }
    out
}

/// Row-major `C(rows x n) = A(rows x k) * B(k x n)` over contiguous slices.
///
/// Column tiles are the outer loop so one 16-column slab of `B` stays cached
/// while every row tile of the block consumes it.
fn kernel(rows: usize, k: usize, n: usize, a: &[f32], b: &[f32], c: &mut [f32]) {
    let mut j = 0;
    while j < n {
        let jw = (n - j).min(TILE_COLS);
        let mut i = 0;
        while i < rows {
            let ir = (rows - i).min(TILE_ROWS);
            if ir == TILE_ROWS && jw == TILE_COLS {
                tile_4x16(k, n, &a[i * k..], b, j, &mut c[i * n..]);
            } else {
                tile_edge(ir, jw, k, n, &a[i * k..], b, j, &mut c[i * n..]);
            }
            i += ir;
        }
        j += jw;
    }
}

/// Full 4x16 register tile dispatch.
#[inline]
fn tile_4x16(k: usize, n: usize, a: &[f32], b: &[f32], j0: usize, c: &mut [f32]) {
    #[cfg(target_arch = "x86_64")]
    {
        if std::arch::is_x86_feature_detected!("avx2") && std::arch::is_x86_feature_detected!("fma")
        {
            // Safety: operand extents are checked by the caller; the feature
            // check above gates the instruction set.
            unsafe {
                return tile_4x16_fma(k, n, a, b, j0, c);
            }
        }
    }
    tile_4x16_generic(k, n, a, b, j0, c);
}

/// 4x16 tile with explicit AVX2 FMA: eight 256-bit accumulators stay in
/// registers across the whole k loop.
#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2,fma")]
unsafe fn tile_4x16_fma(k: usize, n: usize, a: &[f32], b: &[f32], j0: usize, c: &mut [f32]) {
    use std::arch::x86_64::*;
    debug_assert!(a.len() >= TILE_ROWS * k);
    debug_assert!(b.len() >= (k - 1) * n + j0 + TILE_COLS);
    let ap = a.as_ptr();
    let bp = b.as_ptr().add(j0);
    let mut acc = [_mm256_setzero_ps(); 2 * TILE_ROWS];
    for kk in 0..k {
        let b_lo = _mm256_loadu_ps(bp.add(kk * n));
        let b_hi = _mm256_loadu_ps(bp.add(kk * n + 8));
        for r in 0..TILE_ROWS {
            let av = _mm256_set1_ps(*ap.add(r * k + kk));
            acc[2 * r] = _mm256_fmadd_ps(av, b_lo, acc[2 * r]);
            acc[2 * r + 1] = _mm256_fmadd_ps(av, b_hi, acc[2 * r + 1]);
        }
    }
    let cp = c.as_mut_ptr().add(j0);
    for r in 0..TILE_ROWS {
        _mm256_storeu_ps(cp.add(r * n), acc[2 * r]);
        _mm256_storeu_ps(cp.add(r * n + 8), acc[2 * r + 1]);
    }
}

/// Portable fallback for the full tile.
fn tile_4x16_generic(k: usize, n: usize, a: &[f32], b: &[f32], j0: usize, c: &mut [f32]) {
    let mut acc = [[0.0f32; TILE_COLS]; TILE_ROWS];
    for kk in 0..k {
        let brow: &[f32; TILE_COLS] = b[kk * n + j0..kk * n + j0 + TILE_COLS]
            .try_into()
            .expect("tile width");
        for r in 0..TILE_ROWS {
            let av = a[r * k + kk];
            let accr = &mut acc[r];
            for t in 0..TILE_COLS {
                accr[t] = av.mul_add(brow[t], accr[t]);
            }
        }
    }
    for (r, accr) in acc.iter().enumerate() {
        c[r * n + j0..r * n + j0 + TILE_COLS].copy_from_slice(accr);
    }
}

/// Remainder tile of up to 4x16, any width.
fn tile_edge(ir: usize, jw: usize, k: usize, n: usize, a: &[f32], b: &[f32], j0: usize, c: &mut [f32]) {
    let mut acc = [[0.0f32; TILE_COLS]; TILE_ROWS];
    for kk in 0..k {
        let brow = &b[kk * n + j0..kk * n + j0 + jw];
        for r in 0..ir {
            let av = a[r * k + kk];
            let accr = &mut acc[r];
            for (t, &bv) in brow.iter().enumerate() {
                accr[t] = av.mul_add(bv, accr[t]);
            }
        }
    }
    for r in 0..ir {
        c[r * n + j0..r * n + j0 + jw].copy_from_slice(&acc[r][..jw]);
    }
}

/// f64 twin of [`gemm_f32`]; used by the verification paths, so clarity over
/// speed.
pub fn gemm_f64(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: usize,
    csa: usize,
    b: &[f64],
    rsb: usize,
    csb: usize,
    c: &mut [f64],
) {
    debug_assert!(c.len() >= m * n);
    let run = |(i, c_row): (usize, &mut [f64])| {
        for j in 0..n {
            let mut acc = 0.0f64;
            for kk in 0..k {
                acc += a[i * rsa + kk * csa] * b[kk * rsb + j * csb];
            }
            c_row[j] = acc;
        }
    };
    if 2 * m * k * n >= PAR_MIN_MACS {
        c[..m * n].par_chunks_mut(n).enumerate().for_each(run);
    } else {
        c[..m * n].chunks_mut(n).enumerate().for_each(run);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn reference(m: usize, k: usize, n: usize, a: &[f32], b: &[f32]) -> Vec<f32> {
        let mut c = vec![0.0f32; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0f64;
                for kk in 0..k {
                    acc += a[i * k + kk] as f64 * b[kk * n + j] as f64;
                }
                c[i * n + j] = acc as f32;
            }
        }
        c
    }

    fn filled(len: usize, seed: u64) -> Vec<f32> {
        let mut state = seed;
        (0..len)
            .map(|_| {
                state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((state >> 33) as f32 / (1u64 << 31) as f32) - 1.0
            })
            .collect()
    }

    #[test]
    fn matches_reference_on_awkward_shapes() {
        for &(m, k, n) in &[
            (1usize, 1usize, 1usize),
            (4, 16, 16),
            (5, 7, 3),
            (17, 33, 19),
            (64, 48, 100),
            (3, 128, 4),
            (130, 5, 17),
        ] {
            let a = filled(m * k, 1 + m as u64);
            let b = filled(k * n, 99 + n as u64);
            let mut c = vec![0.0f32; m * n];
            gemm_f32(m, k, n, &a, k, 1, &b, n, 1, &mut c);
            let want = reference(m, k, n, &a, &b);
            for (got, want) in c.iter().zip(&want) {
                assert!(
                    (got - want).abs() <= 1e-4 * want.abs().max(1.0),
                    "({m},{k},{n}): {got} vs {want}"
                );
            }
        }
    }

    #[test]
    fn strided_views_match_materialized_transpose() {
        let (m, k, n) = (9, 11, 13);
        let a_t = filled(k * m, 5); // k x m, so A = transpose view
        let b = filled(k * n, 6);
        let mut c = vec![0.0f32; m * n];
        gemm_f32(m, k, n, &a_t, 1, m, &b, n, 1, &mut c);

        let mut a = vec![0.0f32; m * k];
        for i in 0..m {
            for kk in 0..k {
                a[i * k + kk] = a_t[kk * m + i];
            }
        }
        let want = reference(m, k, n, &a, &b);
        for (got, want) in c.iter().zip(&want) {
            assert!((got - want).abs() <= 1e-4 * want.abs().max(1.0));
        }
    }

    #[test]
    fn f64_matches_f32_reference_closely() {
        let (m, k, n) = (6, 20, 9);
        let a = filled(m * k, 7);
        let b = filled(k * n, 8);
        let a64: Vec<f64> = a.iter().map(|&v| v as f64).collect();
        let b64: Vec<f64> = b.iter().map(|&v| v as f64).collect();
        let mut c = vec![0.0f64; m * n];
        gemm_f64(m, k, n, &a64, k, 1, &b64, n, 1, &mut c);
        let want = reference(m, k, n, &a, &b);
        for (got, want) in c.iter().zip(&want) {
            assert!((got - *want as f64).abs() <= 1e-5 * want.abs().max(1.0) as f64);
        }
    }
}
