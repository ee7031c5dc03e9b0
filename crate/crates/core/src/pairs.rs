//! O(N²) pair sums in structure-of-arrays layout, one row per particle.
//!
//! The `j` loop runs over 4-wide lanes; lane partial sums are combined in a
//! fixed order, so results do not depend on the thread count.

use rayon::prelude::*;
use wide::f64x4;

use crate::types::Vec3;

/// `(|z|² + ε²)^{γ/2}` as a function of `q = |z|² + ε²`.
#[derive(Clone, Copy, Debug)]
pub(crate) enum Prefactor {
    Coulomb,
    One,
    Power(f64),
}

impl Prefactor {
    pub(crate) fn new(gamma: f64) -> Self {
        if gamma == -3.0 {
            Prefactor::Coulomb
        } else if gamma == 0.0 {
            Prefactor::One
        } else {
            Prefactor::Power(0.5 * gamma)
        }
    }

    #[inline(always)]
    fn scalar(self, q: f64) -> f64 {
        match self {
            Prefactor::Coulomb => 1.0 / (q * q.sqrt()),
            Prefactor::One => 1.0,
            Prefactor::Power(e) => q.powf(e),
        }
    }

    #[inline(always)]
    fn vector(self, q: f64x4) -> f64x4 {
        match self {
            Prefactor::Coulomb => f64x4::ONE / (q * q.sqrt()),
            Prefactor::One => f64x4::ONE,
            Prefactor::Power(e) => f64x4::new(q.to_array().map(|x| x.powf(e))),
        }
    }
}

pub(crate) struct Columns(pub [Vec<f64>; 3]);

impl Columns {
    pub(crate) fn new(a: &[Vec3]) -> Self {
        let col = |k: usize| a.iter().map(|v| v[k]).collect::<Vec<_>>();
        Columns([col(0), col(1), col(2)])
    }
}

#[inline(always)]
fn load(a: &[f64], j: usize) -> f64x4 {
    f64x4::new([a[j], a[j + 1], a[j + 2], a[j + 3]])
}

#[inline(always)]
fn lane_sum(a: f64x4) -> f64 {
    let a = a.to_array();
    (a[0] + a[1]) + (a[2] + a[3])
}

/// `U_i = -Σ_j w_j A(v_i - v_j)(s_i - s_j)`, coincident pairs skipped.
pub(crate) fn velocity(
    x: &Columns,
    s: &Columns,
    w: &[f64],
    eps2: f64,
    pre: Prefactor,
) -> Vec<Vec3> {
    (0..w.len())
        .into_par_iter()
        .map(|i| velocity_row_dispatch(x, s, w, i, eps2, pre))
        .collect()
}

#[cfg(target_arch = "x86_64")]
fn velocity_row_dispatch(
    x: &Columns,
    s: &Columns,
    w: &[f64],
    i: usize,
    eps2: f64,
    pre: Prefactor,
) -> Vec3 {
    if matches!(pre, Prefactor::Coulomb) && std::arch::is_x86_feature_detected!("avx") {
        // SAFETY: AVX support was just detected.
        unsafe { avx::coulomb_row(x, s, w, i, eps2) }
    } else {
        velocity_row(x, s, w, i, eps2, pre)
    }
}

#[cfg(not(target_arch = "x86_64"))]
fn velocity_row_dispatch(
    x: &Columns,
    s: &Columns,
    w: &[f64],
    i: usize,
    eps2: f64,
    pre: Prefactor,
) -> Vec3 {
    velocity_row(x, s, w, i, eps2, pre)
}

/// One row of the velocity sum. The 4-lane body and the scalar tail use the
/// same per-lane operation order as the AVX kernel, so both agree bit for bit.
fn velocity_row(x: &Columns, s: &Columns, w: &[f64], i: usize, eps2: f64, pre: Prefactor) -> Vec3 {
    let n = w.len();
    let [x0, x1, x2] = &x.0;
    let [s0, s1, s2] = &s.0;
    let viv = [x0[i], x1[i], x2[i]].map(f64x4::splat);
    let siv = [s0[i], s1[i], s2[i]].map(f64x4::splat);
    let eps2v = f64x4::splat(eps2);
    let mut acc = [f64x4::ZERO; 3];
    let body = n - n % 4;
    for j in (0..body).step_by(4) {
        let z = [viv[0] - load(x0, j), viv[1] - load(x1, j), viv[2] - load(x2, j)];
        let d = [siv[0] - load(s0, j), siv[1] - load(s1, j), siv[2] - load(s2, j)];
        let r2 = z[0] * z[0] + z[1] * z[1] + z[2] * z[2];
        let p = pre.vector(r2 + eps2v) * load(w, j);
        let p = r2.simd_gt(f64x4::ZERO).select(p, f64x4::ZERO);
        let zx = z[0] * d[0] + z[1] * d[1] + z[2] * d[2];
        for k in 0..3 {
            acc[k] -= p * (r2 * d[k] - z[k] * zx);
        }
    }
    let mut u = acc.map(lane_sum);
    for j in body..n {
        let z = [x0[i] - x0[j], x1[i] - x1[j], x2[i] - x2[j]];
        let d = [s0[i] - s0[j], s1[i] - s1[j], s2[i] - s2[j]];
        let r2 = z[0] * z[0] + z[1] * z[1] + z[2] * z[2];
        if r2 > 0.0 {
            let p = pre.scalar(r2 + eps2) * w[j];
            let zx = z[0] * d[0] + z[1] * d[1] + z[2] * d[2];
            for k in 0..3 {
                u[k] -= p * (r2 * d[k] - z[k] * zx);
            }
        }
    }
    u
}

#[cfg(target_arch = "x86_64")]
mod avx {
    use std::arch::x86_64::*;

    use super::Columns;
    use crate::types::Vec3;

    #[target_feature(enable = "avx")]
    pub(super) unsafe fn coulomb_row(
        x: &Columns,
        s: &Columns,
        w: &[f64],
        i: usize,
        eps2: f64,
    ) -> Vec3 {
        let n = w.len();
        let [x0, x1, x2] = &x.0;
        let [s0, s1, s2] = &s.0;
        let ld = |a: &[f64], j: usize| {
            debug_assert!(j + 4 <= a.len());
            _mm256_loadu_pd(a.as_ptr().add(j))
        };
        let vi = [x0[i], x1[i], x2[i]].map(|v| _mm256_set1_pd(v));
        let si = [s0[i], s1[i], s2[i]].map(|v| _mm256_set1_pd(v));
        let eps2v = _mm256_set1_pd(eps2);
        let one = _mm256_set1_pd(1.0);
        let zero = _mm256_setzero_pd();
        let mut acc = [zero; 3];
        let body = n - n % 4;
        let mut j = 0;
        while j < body {
            let z = [
                _mm256_sub_pd(vi[0], ld(x0, j)),
                _mm256_sub_pd(vi[1], ld(x1, j)),
                _mm256_sub_pd(vi[2], ld(x2, j)),
            ];
            let d = [
                _mm256_sub_pd(si[0], ld(s0, j)),
                _mm256_sub_pd(si[1], ld(s1, j)),
                _mm256_sub_pd(si[2], ld(s2, j)),
            ];
            let r2 = _mm256_add_pd(
                _mm256_add_pd(_mm256_mul_pd(z[0], z[0]), _mm256_mul_pd(z[1], z[1])),
                _mm256_mul_pd(z[2], z[2]),
            );
            let q = _mm256_add_pd(r2, eps2v);
            let p = _mm256_div_pd(one, _mm256_mul_pd(q, _mm256_sqrt_pd(q)));
            let p = _mm256_mul_pd(p, ld(w, j));
            let p = _mm256_and_pd(_mm256_cmp_pd::<_CMP_GT_OQ>(r2, zero), p);
            let zx = _mm256_add_pd(
                _mm256_add_pd(_mm256_mul_pd(z[0], d[0]), _mm256_mul_pd(z[1], d[1])),
                _mm256_mul_pd(z[2], d[2]),
            );
            for k in 0..3 {
                let y = _mm256_sub_pd(_mm256_mul_pd(r2, d[k]), _mm256_mul_pd(z[k], zx));
                acc[k] = _mm256_sub_pd(acc[k], _mm256_mul_pd(p, y));
            }
            j += 4;
        }
        let mut u = [0.0; 3];
        for k in 0..3 {
            let mut a = [0.0; 4];
            _mm256_storeu_pd(a.as_mut_ptr(), acc[k]);
            u[k] = (a[0] + a[1]) + (a[2] + a[3]);
        }
        for j in body..n {
            let z = [x0[i] - x0[j], x1[i] - x1[j], x2[i] - x2[j]];
            let d = [s0[i] - s0[j], s1[i] - s1[j], s2[i] - s2[j]];
            let r2 = z[0] * z[0] + z[1] * z[1] + z[2] * z[2];
            if r2 > 0.0 {
                let q = r2 + eps2;
                let p = 1.0 / (q * q.sqrt()) * w[j];
                let zx = z[0] * d[0] + z[1] * d[1] + z[2] * d[2];
                for k in 0..3 {
                    u[k] -= p * (r2 * d[k] - z[k] * zx);
                }
            }
        }
        u
    }

    #[target_feature(enable = "avx2")]
    pub(super) unsafe fn blob_row(x: &Columns, w: &[f64], i: usize, inv: f64) -> (Vec3, f64) {
        let n = w.len();
        let [x0, x1, x2] = &x.0;
        let ld = |a: &[f64], j: usize| {
            debug_assert!(j + 4 <= a.len());
            _mm256_loadu_pd(a.as_ptr().add(j))
        };
        let vi_s = [x0[i], x1[i], x2[i]];
        let vi = vi_s.map(|v| _mm256_set1_pd(v));
        let ninv = _mm256_set1_pd(-inv);
        let log2e = _mm256_set1_pd(std::f64::consts::LOG2_E);
        let half = _mm256_set1_pd(0.5);
        let ln2_hi = _mm256_set1_pd(super::LN2_HI);
        let ln2_lo = _mm256_set1_pd(super::LN2_LO);
        let xmin = _mm256_set1_pd(super::EXP_MIN);
        let bias = _mm256_set1_epi64x(1023);
        let mut acc = [_mm256_setzero_pd(); 4];
        let body = n - n % 4;
        let mut j = 0;
        while j < body {
            let z = [
                _mm256_sub_pd(ld(x0, j), vi[0]),
                _mm256_sub_pd(ld(x1, j), vi[1]),
                _mm256_sub_pd(ld(x2, j), vi[2]),
            ];
            let r2 = _mm256_add_pd(
                _mm256_add_pd(_mm256_mul_pd(z[0], z[0]), _mm256_mul_pd(z[1], z[1])),
                _mm256_mul_pd(z[2], z[2]),
            );
            let xv = _mm256_mul_pd(r2, ninv);
            let keep = _mm256_cmp_pd::<_CMP_GE_OQ>(xv, xmin);
            let xc = _mm256_max_pd(xv, xmin);
            let k = _mm256_floor_pd(_mm256_add_pd(_mm256_mul_pd(xc, log2e), half));
            let r = _mm256_sub_pd(
                _mm256_sub_pd(xc, _mm256_mul_pd(k, ln2_hi)),
                _mm256_mul_pd(k, ln2_lo),
            );
            let mut p = _mm256_set1_pd(super::EXP_POLY[0]);
            for c in &super::EXP_POLY[1..] {
                p = _mm256_add_pd(_mm256_mul_pd(p, r), _mm256_set1_pd(*c));
            }
            let ki = _mm256_cvtepi32_epi64(_mm256_cvtpd_epi32(k));
            let scale = _mm256_castsi256_pd(_mm256_slli_epi64::<52>(_mm256_add_epi64(ki, bias)));
            let e = _mm256_and_pd(keep, _mm256_mul_pd(p, scale));
            let e = _mm256_mul_pd(ld(w, j), e);
            for k in 0..3 {
                acc[k] = _mm256_add_pd(acc[k], _mm256_mul_pd(e, z[k]));
            }
            acc[3] = _mm256_add_pd(acc[3], e);
            j += 4;
        }
        let mut t = [0.0; 4];
        for k in 0..4 {
            let mut a = [0.0; 4];
            _mm256_storeu_pd(a.as_mut_ptr(), acc[k]);
            t[k] = (a[0] + a[1]) + (a[2] + a[3]);
        }
        super::blob_tail(x, w, &vi_s, body, inv, [t[0], t[1], t[2]], t[3])
    }
}

const LN2_HI: f64 = 6.931_471_803_691_238_164_90e-1;
const LN2_LO: f64 = 1.908_214_929_270_587_700_02e-10;
const EXP_MIN: f64 = -708.0;
/// Taylor coefficients `1/k!`, `k = 13, ..., 0`, for Horner evaluation.
const EXP_POLY: [f64; 14] = [
    1.0 / 6_227_020_800.0,
    1.0 / 479_001_600.0,
    1.0 / 39_916_800.0,
    1.0 / 3_628_800.0,
    1.0 / 362_880.0,
    1.0 / 40_320.0,
    1.0 / 5_040.0,
    1.0 / 720.0,
    1.0 / 120.0,
    1.0 / 24.0,
    1.0 / 6.0,
    0.5,
    1.0,
    1.0,
];

/// `exp(x)` for `x ≤ 0`, zero below `EXP_MIN`. Written with the exact
/// operation sequence of the AVX2 kernel so both paths agree bit for bit.
#[inline(always)]
pub(crate) fn exp_neg(x: f64) -> f64 {
    if !(x >= EXP_MIN) {
        return 0.0;
    }
    let k = (x * std::f64::consts::LOG2_E + 0.5).floor();
    let r = (x - k * LN2_HI) - k * LN2_LO;
    let mut p = EXP_POLY[0];
    for c in &EXP_POLY[1..] {
        p = p * r + c;
    }
    let scale = f64::from_bits(((k as i64 + 1023) as u64) << 52);
    p * scale
}

/// Unnormalized blob sums `(Σ_j w_j e_ij (v_j - v_i), Σ_j w_j e_ij)` with
/// `e_ij = exp(-|v_i - v_j|² · inv)`, self term included.
pub(crate) fn blob(x: &Columns, w: &[f64], inv: f64) -> (Vec<Vec3>, Vec<f64>) {
    (0..w.len())
        .into_par_iter()
        .map(|i| blob_row_dispatch(x, w, i, inv))
        .unzip()
}

#[cfg(target_arch = "x86_64")]
fn blob_row_dispatch(x: &Columns, w: &[f64], i: usize, inv: f64) -> (Vec3, f64) {
    if std::arch::is_x86_feature_detected!("avx2") {
        // SAFETY: AVX2 support was just detected.
        unsafe { avx::blob_row(x, w, i, inv) }
    } else {
        blob_row(x, w, i, inv)
    }
}

#[cfg(not(target_arch = "x86_64"))]
fn blob_row_dispatch(x: &Columns, w: &[f64], i: usize, inv: f64) -> (Vec3, f64) {
    blob_row(x, w, i, inv)
}

#[inline(always)]
fn blob_pair(x: &Columns, w: &[f64], vi: &Vec3, j: usize, inv: f64) -> (Vec3, f64) {
    let [x0, x1, x2] = &x.0;
    let z = [x0[j] - vi[0], x1[j] - vi[1], x2[j] - vi[2]];
    let e = w[j] * exp_neg((z[0] * z[0] + z[1] * z[1] + z[2] * z[2]) * -inv);
    ([e * z[0], e * z[1], e * z[2]], e)
}

fn blob_row(x: &Columns, w: &[f64], i: usize, inv: f64) -> (Vec3, f64) {
    let n = w.len();
    let vi = [x.0[0][i], x.0[1][i], x.0[2][i]];
    let body = n - n % 4;
    let mut acc = [[0.0; 4]; 4];
    for j in (0..body).step_by(4) {
        for lane in 0..4 {
            let (t, e) = blob_pair(x, w, &vi, j + lane, inv);
            for k in 0..3 {
                acc[k][lane] += t[k];
            }
            acc[3][lane] += e;
        }
    }
    let total = |a: &[f64; 4]| (a[0] + a[1]) + (a[2] + a[3]);
    blob_tail(x, w, &vi, body, inv, [total(&acc[0]), total(&acc[1]), total(&acc[2])], total(&acc[3]))
}

#[inline(always)]
fn blob_tail(
    x: &Columns,
    w: &[f64],
    vi: &Vec3,
    from: usize,
    inv: f64,
    mut num: Vec3,
    mut den: f64,
) -> (Vec3, f64) {
    for j in from..w.len() {
        let (t, e) = blob_pair(x, w, vi, j, inv);
        for k in 0..3 {
            num[k] += t[k];
        }
        den += e;
    }
    (num, den)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exp_neg_matches_std() {
        let mut worst: f64 = 0.0;
        for i in 0..=200_000 {
            let x = -700.0 * i as f64 / 200_000.0;
            let rel = (exp_neg(x) - x.exp()).abs() / x.exp();
            worst = worst.max(rel);
        }
        assert!(worst < 4e-16, "{worst}");
        assert_eq!(exp_neg(0.0), 1.0);
        assert_eq!(exp_neg(-1e4), 0.0);
        assert_eq!(exp_neg(f64::NEG_INFINITY), 0.0);
    }

    fn columns(n: usize) -> (Columns, Columns, Vec<f64>) {
        let v: Vec<Vec3> = (0..n)
            .map(|i| {
                let t = i as f64;
                [(0.7 * t).sin() * 2.0, (1.3 * t).cos(), (0.37 * t).sin() - 0.2]
            })
            .collect();
        let s: Vec<Vec3> = v.iter().map(|x| [-x[0] + 0.1, -x[1] * 0.5, x[2]]).collect();
        let w: Vec<f64> = (0..n).map(|i| 1.0 + (i % 3) as f64).collect();
        let total: f64 = w.iter().sum();
        (Columns::new(&v), Columns::new(&s), w.iter().map(|x| x / total).collect())
    }

    #[test]
    fn dispatched_rows_match_portable_rows() {
        for n in [1, 4, 7, 37] {
            let (x, s, w) = columns(n);
            for i in 0..n {
                assert_eq!(
                    velocity_row_dispatch(&x, &s, &w, i, 1e-4, Prefactor::Coulomb),
                    velocity_row(&x, &s, &w, i, 1e-4, Prefactor::Coulomb)
                );
                assert_eq!(blob_row_dispatch(&x, &w, i, 2.0), blob_row(&x, &w, i, 2.0));
            }
        }
    }

    #[test]
    fn general_prefactor_matches_powf() {
        for g in [-3.0, -2.0, -1.0, -0.5, 0.0] {
            let pre = Prefactor::new(g);
            for q in [0.01, 1.0, 7.5] {
                let a = pre.scalar(q);
                let b: f64 = f64::powf(q, 0.5 * g);
                assert!((a - b).abs() <= 1e-14 * b);
                assert_eq!(pre.vector(f64x4::splat(q)).to_array()[2], a);
            }
        }
    }
}
