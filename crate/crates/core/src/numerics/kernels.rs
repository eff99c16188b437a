//! Slice-level kernels shared by the taped forward pass and the cached decoder.
//!
//! Every reduction runs sequentially in ascending index order, so a quantity
//! computed here for one row is bitwise identical to the same row computed as
//! part of a larger batch.

use super::Scalar;

// Register tiles of the blocked matmuls (rows by columns), sized to the
// vector registers available.
const MR: usize = 4;
const NR: usize = 16;
const MR_512: usize = 8;
const NR_512: usize = 32;

/// `out[m×n] = a[m×k] · b[k×n]`.
///
/// Each output is `0 + a[i,0]·b[0,j] + a[i,1]·b[1,j] + …` in ascending `k`
/// with separate multiply and add, whatever the blocking or instruction set,
/// so a row's result does not depend on how many other rows are computed.
pub fn matmul<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    out.fill(T::zero());
    #[cfg(target_arch = "x86_64")]
    {
        if std::arch::is_x86_feature_detected!("avx512f") {
            // SAFETY: the CPU supports AVX-512F.
            unsafe { matmul_avx512(a, b, m, k, n, out) };
            return;
        }
        if std::arch::is_x86_feature_detected!("avx2") {
            // SAFETY: the CPU supports AVX2.
            unsafe { matmul_avx2(a, b, m, k, n, out) };
            return;
        }
    }
    matmul_acc::<T, MR, NR>(a, b, m, k, n, out);
}

/// `out[k×n] += a[m×k]ᵀ · c[m×n]`, accumulating over `m` in ascending order.
pub fn matmul_tn_acc<T: Scalar>(a: &[T], c: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(c.len(), m * n);
    debug_assert_eq!(out.len(), k * n);
    #[cfg(target_arch = "x86_64")]
    {
        if std::arch::is_x86_feature_detected!("avx512f") {
            // SAFETY: the CPU supports AVX-512F.
            unsafe { matmul_tn_avx512(a, c, m, k, n, out) };
            return;
        }
        if std::arch::is_x86_feature_detected!("avx2") {
            // SAFETY: the CPU supports AVX2.
            unsafe { matmul_tn_avx2(a, c, m, k, n, out) };
            return;
        }
    }
    matmul_tn_body::<T, MR, NR>(a, c, m, k, n, out);
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn matmul_avx2<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    matmul_acc::<T, MR, NR>(a, b, m, k, n, out);
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx512f")]
unsafe fn matmul_avx512<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    matmul_acc::<T, MR_512, NR_512>(a, b, m, k, n, out);
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn matmul_tn_avx2<T: Scalar>(a: &[T], c: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    matmul_tn_body::<T, MR, NR>(a, c, m, k, n, out);
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx512f")]
unsafe fn matmul_tn_avx512<T: Scalar>(a: &[T], c: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    matmul_tn_body::<T, MR_512, NR_512>(a, c, m, k, n, out);
}

/// `out += a · b` over full tiles, with a plain i-k-j loop on the fringes.
#[inline(always)]
fn matmul_acc<T: Scalar, const MR: usize, const NR: usize>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    let (m_full, n_full) = (m - m % MR, n - n % NR);
    for i in (0..m_full).step_by(MR) {
        for j in (0..n_full).step_by(NR) {
            let mut acc = [[T::zero(); NR]; MR];
            for (r, row) in acc.iter_mut().enumerate() {
                row.copy_from_slice(&out[(i + r) * n + j..][..NR]);
            }
            for kk in 0..k {
                let b_row: &[T; NR] = b[kk * n + j..][..NR].try_into().expect("tile width");
                for (r, row) in acc.iter_mut().enumerate() {
                    let av = a[(i + r) * k + kk];
                    for (o, &bv) in row.iter_mut().zip(b_row) {
                        *o = *o + av * bv;
                    }
                }
            }
            for (r, row) in acc.iter().enumerate() {
                out[(i + r) * n + j..][..NR].copy_from_slice(row);
            }
        }
        if n_full < n {
            ikj(a, b, i..i + MR, k, n, n_full, out);
        }
    }
    ikj(a, b, m_full..m, k, n, 0, out);
}

#[inline(always)]
fn ikj<T: Scalar>(a: &[T], b: &[T], rows: std::ops::Range<usize>, k: usize, n: usize, j0: usize, out: &mut [T]) {
    for i in rows {
        let a_row = &a[i * k..(i + 1) * k];
        let o_row = &mut out[i * n + j0..(i + 1) * n];
        for (kk, &aik) in a_row.iter().enumerate() {
            let b_row = &b[kk * n + j0..(kk + 1) * n];
            for (o, &bv) in o_row.iter_mut().zip(b_row) {
                *o = *o + aik * bv;
            }
        }
    }
}

#[inline(always)]
fn matmul_tn_body<T: Scalar, const MR: usize, const NR: usize>(a: &[T], c: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    let (k_full, n_full) = (k - k % MR, n - n % NR);
    for kk in (0..k_full).step_by(MR) {
        for j in (0..n_full).step_by(NR) {
            let mut acc = [[T::zero(); NR]; MR];
            for (r, row) in acc.iter_mut().enumerate() {
                row.copy_from_slice(&out[(kk + r) * n + j..][..NR]);
            }
            for i in 0..m {
                let c_row: &[T; NR] = c[i * n + j..][..NR].try_into().expect("tile width");
                for (r, row) in acc.iter_mut().enumerate() {
                    let av = a[i * k + kk + r];
                    for (o, &cv) in row.iter_mut().zip(c_row) {
                        *o = *o + av * cv;
                    }
                }
            }
            for (r, row) in acc.iter().enumerate() {
                out[(kk + r) * n + j..][..NR].copy_from_slice(row);
            }
        }
        if n_full < n {
            tn_fringe(a, c, m, k, n, kk..kk + MR, n_full, out);
        }
    }
    tn_fringe(a, c, m, k, n, k_full..k, 0, out);
}

#[allow(clippy::too_many_arguments)]
#[inline(always)]
fn tn_fringe<T: Scalar>(
    a: &[T],
    c: &[T],
    m: usize,
    k: usize,
    n: usize,
    ks: std::ops::Range<usize>,
    j0: usize,
    out: &mut [T],
) {
    for i in 0..m {
        let c_row = &c[i * n + j0..(i + 1) * n];
        for kk in ks.clone() {
            let aik = a[i * k + kk];
            let o_row = &mut out[kk * n + j0..(kk + 1) * n];
            for (o, &cv) in o_row.iter_mut().zip(c_row) {
                *o = *o + aik * cv;
            }
        }
    }
}

pub fn transpose<T: Scalar>(x: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = x[r * cols + c];
        }
    }
    out
}

#[inline]
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut s = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        s = s + x * y;
    }
    s
}

#[inline]
pub fn sum<T: Scalar>(x: &[T]) -> T {
    let mut s = T::zero();
    for &v in x {
        s = s + v;
    }
    s
}

/// In-place softmax of one row with max subtraction.
pub fn softmax_in_place<T: Scalar>(x: &mut [T]) {
    let max = x.iter().copied().fold(T::neg_infinity(), T::max);
    for v in x.iter_mut() {
        *v = (*v - max).exp();
    }
    let total = sum(x);
    for v in x.iter_mut() {
        *v = *v / total;
    }
}

/// Normalizes one row; returns `(mean, 1/sqrt(var + eps))`.
pub fn layer_norm_row<T: Scalar>(x: &[T], gamma: &[T], beta: &[T], eps: T, out: &mut [T]) -> (T, T) {
    let d = T::from_f64(x.len() as f64);
    let mean = sum(x) / d;
    let mut var = T::zero();
    for &v in x {
        let c = v - mean;
        var = var + c * c;
    }
    var = var / d;
    let rstd = T::one() / (var + eps).sqrt();
    for i in 0..x.len() {
        out[i] = (x[i] - mean) * rstd * gamma[i] + beta[i];
    }
    (mean, rstd)
}

const GELU_COEF: f64 = 0.044_715;

/// `tanh` through a single `exp`, which is much cheaper than the libm
/// routine; saturates cleanly to ±1.
#[inline]
fn tanh_via_exp<T: Scalar>(u: T) -> T {
    let two = T::from_f64(2.0);
    T::one() - two / ((two * u).exp() + T::one())
}

/// GELU, tanh approximation.
#[inline]
pub fn gelu<T: Scalar>(x: T) -> T {
    let c = T::from_f64((2.0 / std::f64::consts::PI).sqrt());
    let half = T::from_f64(0.5);
    let inner = c * (x + T::from_f64(GELU_COEF) * x * x * x);
    half * x * (T::one() + tanh_via_exp(inner))
}

#[inline]
pub fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::from_f64((2.0 / std::f64::consts::PI).sqrt());
    let half = T::from_f64(0.5);
    let a = T::from_f64(GELU_COEF);
    let t = tanh_via_exp(c * (x + a * x * x * x));
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::from_f64(3.0) * a * x * x)
}

#[inline]
pub fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

/// Scaled dot-product attention for a single query row and head.
///
/// Slot layout of `probs`: when `zero_key` is given, index 0 is the zero slot
/// and visible positions follow; otherwise positions start at 0. The zero slot
/// carries an all-zero value and so adds nothing to `out`.
#[allow(clippy::too_many_arguments)]
pub fn attend_row<'a, T: Scalar>(
    q: &[T],
    zero_key: Option<&[T]>,
    visible: usize,
    key: impl Fn(usize) -> &'a [T],
    value: impl Fn(usize) -> &'a [T],
    scale: T,
    probs: &mut [T],
    out: &mut [T],
) {
    let z = usize::from(zero_key.is_some());
    debug_assert_eq!(probs.len(), visible + z);
    if let Some(zk) = zero_key {
        probs[0] = dot(q, zk) * scale;
    }
    for j in 0..visible {
        probs[z + j] = dot(q, key(j)) * scale;
    }
    softmax_in_place(probs);
    out.fill(T::zero());
    for j in 0..visible {
        let p = probs[z + j];
        for (o, &v) in out.iter_mut().zip(value(j)) {
            *o = *o + p * v;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_hand_case() {
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        let mut out = [0.0f64; 4];
        matmul(&a, &b, 2, 2, 2, &mut out);
        assert_eq!(out, [19.0, 22.0, 43.0, 50.0]);
    }

    fn naive(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for kk in 0..k {
                    s += a[i * k + kk] * b[kk * n + j];
                }
                out[i * n + j] = s;
            }
        }
        out
    }

    proptest::proptest! {
        #[test]
        fn blocked_kernels_match_naive_sums_bitwise(m in 1usize..11, k in 1usize..9, n in 1usize..40, seed in 0u32..1000) {
            let f = |i: usize| (((i as u32).wrapping_mul(2654435761) ^ seed) % 1000) as f32 / 997.0 - 0.5;
            let a: Vec<f32> = (0..m * k).map(f).collect();
            let b: Vec<f32> = (0..k * n).map(|i| f(i + 7919)).collect();
            let mut out = vec![f32::NAN; m * n];
            matmul(&a, &b, m, k, n, &mut out);
            proptest::prop_assert_eq!(&out, &naive(&a, &b, m, k, n));
            // each row alone gives the same bits
            for i in 0..m {
                let mut row = vec![0.0; n];
                matmul(&a[i * k..(i + 1) * k], &b, 1, k, n, &mut row);
                proptest::prop_assert_eq!(&row[..], &out[i * n..(i + 1) * n]);
            }
            let at = transpose(&a, m, k);
            let c: Vec<f32> = (0..m * n).map(|i| f(i + 31)).collect();
            let mut acc = vec![0.0; k * n];
            matmul_tn_acc(&a, &c, m, k, n, &mut acc);
            proptest::prop_assert_eq!(acc, naive(&at, &c, k, m, n));
        }
    }

    #[test]
    fn tn_matches_transpose_then_matmul() {
        let a: Vec<f64> = (0..6).map(|i| i as f64 * 0.5 - 1.0).collect(); // 3×2
        let c: Vec<f64> = (0..12).map(|i| (i as f64).sin()).collect(); // 3×4
        let mut acc = vec![0.0; 8];
        matmul_tn_acc(&a, &c, 3, 2, 4, &mut acc);
        let at = transpose(&a, 3, 2);
        let mut direct = vec![0.0; 8];
        matmul(&at, &c, 2, 3, 4, &mut direct);
        assert_eq!(acc, direct);
    }

    #[test]
    fn gelu_matches_the_tanh_form() {
        for i in -400..=400 {
            let x = i as f64 * 0.025;
            let c = (2.0 / std::f64::consts::PI).sqrt();
            let reference = 0.5 * x * (1.0 + (c * (x + GELU_COEF * x * x * x)).tanh());
            assert!((gelu(x) - reference).abs() < 1e-14, "x={x}");
        }
        assert_eq!(gelu(1e4f32), 1e4);
        assert_eq!(gelu(-1e4f32), 0.0);
    }

    #[test]
    fn gelu_grad_matches_difference_quotient() {
        for &x in &[-3.0f64, -0.7, 0.0, 0.4, 2.5] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8, "x={x}");
        }
    }
}
