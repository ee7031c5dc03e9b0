//! The Landau matrix kernel `A(z) = |z|^γ (|z|² I − z zᵀ)`, its divergence
//! `b = ∇·A = (1 - d) z |z|^γ`, and their convolutions against particles.
//!
//! Only the scalar prefactor is regularized, `|z|^γ → (|z|² + ε²)^{γ/2}`;
//! the projector is kept exact so `A(z) z = 0` holds for every ε.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::types::{
    add, dot, norm2, scale, sub, KernelParams, Mat3, ParticleEnsemble, Vec3, ZERO3, ZERO_MAT3,
};

/// Regularized scalar prefactor `(r² + ε²)^{γ/2}`.
#[inline]
pub fn prefactor(r2: f64, params: &KernelParams) -> f64 {
    let q = r2 + params.epsilon * params.epsilon;
    if params.gamma == -3.0 {
        1.0 / (q * q.sqrt())
    } else if params.gamma == 0.0 {
        1.0
    } else if params.gamma == -2.0 {
        1.0 / q
    } else if params.gamma == -1.0 {
        1.0 / q.sqrt()
    } else {
        q.powf(0.5 * params.gamma)
    }
}

#[inline]
fn check_singular(z: &Vec3, params: &KernelParams) -> Result<()> {
    if params.epsilon == 0.0 && norm2(z) == 0.0 {
        Err(Error::SingularEvaluation)
    } else {
        Ok(())
    }
}

/// `A(z)` as a 3×3 array; the block outside `dim × dim` is zero.
pub fn eval_a(z: &Vec3, params: &KernelParams) -> Result<Mat3> {
    check_singular(z, params)?;
    Ok(eval_a_unchecked(z, params))
}

#[inline]
pub(crate) fn eval_a_unchecked(z: &Vec3, params: &KernelParams) -> Mat3 {
    let r2 = norm2(z);
    let p = prefactor(r2, params);
    let mut m = ZERO_MAT3;
    for a in 0..params.dim {
        for b in 0..params.dim {
            let delta = if a == b { r2 } else { 0.0 };
            m[a][b] = p * (delta - z[a] * z[b]);
        }
    }
    m
}

/// `b(z) = (1 - d) z (|z|² + ε²)^{γ/2}`.
pub fn eval_b(z: &Vec3, params: &KernelParams) -> Result<Vec3> {
    check_singular(z, params)?;
    Ok(eval_b_unchecked(z, params))
}

#[inline]
pub(crate) fn eval_b_unchecked(z: &Vec3, params: &KernelParams) -> Vec3 {
    let p = prefactor(norm2(z), params);
    scale(z, (1.0 - params.dim as f64) * p)
}

/// `A(z) x` without forming the matrix. Zero at `z = 0`.
#[inline]
pub fn apply_a(z: &Vec3, x: &Vec3, params: &KernelParams) -> Vec3 {
    let r2 = norm2(z);
    if r2 == 0.0 {
        return ZERO3;
    }
    let p = prefactor(r2, params);
    let zx = dot(z, x);
    [
        p * (r2 * x[0] - z[0] * zx),
        p * (r2 * x[1] - z[1] * zx),
        p * (r2 * x[2] - z[2] * zx),
    ]
}

/// `Σ_j w_j A(v - v_j)`; coincident pairs contribute zero.
pub fn conv_a_particles(v: &Vec3, ensemble: &ParticleEnsemble, params: &KernelParams) -> Mat3 {
    let mut acc = ZERO_MAT3;
    for (vj, wj) in ensemble.velocities.iter().zip(&ensemble.weights) {
        let z = sub(v, vj);
        if norm2(&z) == 0.0 {
            continue;
        }
        let a = eval_a_unchecked(&z, params);
        for r in 0..3 {
            for c in 0..3 {
                acc[r][c] += wj * a[r][c];
            }
        }
    }
    acc
}

/// `Σ_j w_j b(v - v_j)`; coincident pairs contribute zero.
pub fn conv_b_particles(v: &Vec3, ensemble: &ParticleEnsemble, params: &KernelParams) -> Vec3 {
    let mut acc = ZERO3;
    for (vj, wj) in ensemble.velocities.iter().zip(&ensemble.weights) {
        let z = sub(v, vj);
        if norm2(&z) == 0.0 {
            continue;
        }
        acc = add(&acc, &scale(&eval_b_unchecked(&z, params), *wj));
    }
    acc
}

/// `(A ∗ g)(v_i)` at every particle of the ensemble.
pub fn conv_a_at_particles(ensemble: &ParticleEnsemble, params: &KernelParams) -> Vec<Mat3> {
    ensemble
        .velocities
        .par_iter()
        .map(|v| conv_a_particles(v, ensemble, params))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::{mat_vec, AnalyticDensity, GridDensity, GridSpec};
    use proptest::prelude::*;

    fn min_eig(m: &Mat3) -> f64 {
        let n = nalgebra::Matrix3::from_fn(|r, c| m[r][c]);
        n.symmetric_eigen().eigenvalues.min()
    }

    #[test]
    fn unit_projector() {
        let p = KernelParams::new(3, 0.0, 0.0).unwrap();
        let a = eval_a(&[1.0, 0.0, 0.0], &p).unwrap();
        assert_eq!(a, [[0.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]);
    }

    #[test]
    fn coulomb_scaling() {
        let p = KernelParams::coulomb(0.0);
        let a = eval_a(&[2.0, 0.0, 0.0], &p).unwrap();
        assert_eq!(a, [[0.0, 0.0, 0.0], [0.0, 0.5, 0.0], [0.0, 0.0, 0.5]]);
    }

    #[test]
    fn singular_origin_is_an_error() {
        let p = KernelParams::coulomb(0.0);
        assert_eq!(eval_a(&ZERO3, &p), Err(Error::SingularEvaluation));
        assert_eq!(eval_b(&ZERO3, &p), Err(Error::SingularEvaluation));
        assert_eq!(eval_a(&ZERO3, &p.with_epsilon(0.1)).unwrap(), ZERO_MAT3);
    }

    #[test]
    fn b_values() {
        let p = KernelParams::coulomb(0.0);
        assert_eq!(eval_b(&[1.0, 0.0, 0.0], &p).unwrap(), [-2.0, 0.0, 0.0]);
        let p0 = KernelParams::new(3, 0.0, 0.0).unwrap();
        assert_eq!(eval_b(&[0.0, 2.0, 0.0], &p0).unwrap(), [0.0, -4.0, 0.0]);
    }

    /// Central-difference divergence `Σ_c ∂_c A_rc`.
    fn fd_divergence(z: &Vec3, p: &KernelParams, h: f64) -> Vec3 {
        let mut out = ZERO3;
        for c in 0..p.dim {
            let mut zp = *z;
            let mut zm = *z;
            zp[c] += h;
            zm[c] -= h;
            let ap = eval_a(&zp, p).unwrap();
            let am = eval_a(&zm, p).unwrap();
            for r in 0..p.dim {
                out[r] += (ap[r][c] - am[r][c]) / (2.0 * h);
            }
        }
        out
    }

    #[test]
    fn b_is_the_divergence_of_a() {
        let z = [0.7, -0.3, 0.5];
        for p in [
            KernelParams::coulomb(0.0),
            KernelParams::coulomb(0.2),
            KernelParams::new(2, -1.5, 0.05).unwrap(),
        ] {
            let mut zz = z;
            if p.dim == 2 {
                zz[2] = 0.0;
            }
            let fd = fd_divergence(&zz, &p, 1e-4);
            let b = eval_b(&zz, &p).unwrap();
            for r in 0..p.dim {
                assert!((fd[r] - b[r]).abs() <= 1e-6 * b[r].abs(), "{fd:?} vs {b:?}");
            }
        }
    }

    #[test]
    fn point_mass_convolutions() {
        let e = ParticleEnsemble::uniform(3, vec![ZERO3]).unwrap();
        let p0 = KernelParams::new(3, 0.0, 0.0).unwrap();
        let a = conv_a_particles(&[1.0, 0.0, 0.0], &e, &p0);
        assert_eq!(a, [[0.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]);
        assert_eq!(conv_a_particles(&ZERO3, &e, &KernelParams::coulomb(0.0)), ZERO_MAT3);
        let b = conv_b_particles(&[1.0, 0.0, 0.0], &e, &KernelParams::coulomb(0.0));
        assert_eq!(b, [-2.0, 0.0, 0.0]);
    }

    #[test]
    fn symmetric_ensemble_has_no_drift_at_origin() {
        let vs = vec![
            [1.0, 0.2, -0.3],
            [-1.0, -0.2, 0.3],
            [0.1, 0.8, 0.5],
            [-0.1, -0.8, -0.5],
        ];
        let e = ParticleEnsemble::uniform(3, vs).unwrap();
        let b = conv_b_particles(&ZERO3, &e, &KernelParams::coulomb(0.0));
        assert!(b.iter().all(|x| x.abs() < 1e-15));
    }

    /// Gaussian node ensemble on a 20³ lattice. At the origin the result is
    /// isotropic and equals the trapezoid convolution of the same density;
    /// the continuum value `(2/3) E|w|^{-1} = (2/3) sqrt(2/π)` bounds the
    /// lattice error.
    #[test]
    fn gaussian_lattice_ensemble_against_quadrature() {
        let f = AnalyticDensity::standard(3);
        let spec = GridSpec::new(3, 5.0, 20).unwrap();
        let q = spec.quadrature_weights();
        let nodes = spec.nodes();
        let dens: Vec<f64> = nodes.iter().map(|v| f.density(v)).collect();
        let w: Vec<f64> = dens.iter().zip(&q).map(|(d, q)| q * d).collect();
        let ens = ParticleEnsemble::new(3, nodes.clone(), w).unwrap().renormalized();
        let p = KernelParams::coulomb(0.0);
        let mass = spec.integrate(&dens);

        let quadrature = |v: &Vec3| -> (Mat3, Vec3) {
            let mut a = ZERO_MAT3;
            let mut b = ZERO3;
            for ((x, qx), fx) in nodes.iter().zip(&q).zip(&dens) {
                let z = sub(v, x);
                let ak = eval_a(&z, &p).unwrap();
                for r in 0..3 {
                    for c in 0..3 {
                        a[r][c] += qx * fx * ak[r][c];
                    }
                }
                b = add(&b, &scale(&eval_b(&z, &p).unwrap(), qx * fx));
            }
            (scale_mat(&a, 1.0 / mass), scale(&b, 1.0 / mass))
        };

        let a = conv_a_particles(&ZERO3, &ens, &p);
        let (a_ref, _) = quadrature(&ZERO3);
        let lambda = a[0][0];
        assert!(lambda > 0.0);
        for r in 0..3 {
            for c in 0..3 {
                let expect = if r == c { lambda } else { 0.0 };
                assert!((a[r][c] - expect).abs() < 1e-12);
                assert!((a[r][c] - a_ref[r][c]).abs() <= 1e-3 * lambda);
            }
        }
        let continuum = 2.0 / 3.0 * (2.0 / std::f64::consts::PI).sqrt();
        assert!((lambda - continuum).abs() < 0.05 * continuum, "{lambda} vs {continuum}");

        let v = [0.5, 0.0, 0.0];
        let b = conv_b_particles(&v, &ens, &p);
        let (_, b_ref) = quadrature(&v);
        assert!((b[0] - b_ref[0]).abs() <= 1e-3 * b_ref[0].abs(), "{b:?} vs {b_ref:?}");
        assert!(b[0] < 0.0);
    }

    fn scale_mat(m: &Mat3, s: f64) -> Mat3 {
        let mut out = *m;
        out.iter_mut().flatten().for_each(|x| *x *= s);
        out
    }

    #[test]
    fn convolution_is_linear_in_weights() {
        let p = KernelParams::coulomb(0.05);
        let vs = vec![[0.3, 0.1, 0.0], [-0.2, 0.5, 1.0], [1.0, -1.0, 0.2]];
        let w1 = vec![0.2, 0.3, 0.5];
        let w2 = vec![0.6, 0.1, 0.3];
        let e1 = ParticleEnsemble::new(3, vs.clone(), w1.clone()).unwrap();
        let e2 = ParticleEnsemble::new(3, vs.clone(), w2.clone()).unwrap();
        let mix: Vec<f64> = w1.iter().zip(&w2).map(|(a, b)| 0.25 * a + 0.75 * b).collect();
        let em = ParticleEnsemble::new(3, vs, mix).unwrap();
        let v = [0.1, 0.2, 0.3];
        let (a1, a2, am) = (
            conv_a_particles(&v, &e1, &p),
            conv_a_particles(&v, &e2, &p),
            conv_a_particles(&v, &em, &p),
        );
        for r in 0..3 {
            for c in 0..3 {
                assert!((am[r][c] - (0.25 * a1[r][c] + 0.75 * a2[r][c])).abs() < 1e-13);
            }
        }
    }

    #[test]
    fn regularized_kernel_converges_monotonically() {
        let z = [0.3, -0.4, 0.2];
        let exact = eval_a(&z, &KernelParams::coulomb(0.0)).unwrap()[1][1];
        let mut prev = 0.0;
        for eps in [0.4, 0.2, 0.1, 0.05, 0.01, 1e-4] {
            let a = eval_a(&z, &KernelParams::coulomb(eps)).unwrap()[1][1];
            assert!(a > prev && a <= exact);
            prev = a;
        }
        assert!((prev - exact).abs() < 1e-6 * exact);
    }

    #[test]
    fn grid_density_type_is_usable_here() {
        // Guards the cross-module contract used by the grid convolution.
        let spec = GridSpec::new(3, 4.0, 9).unwrap();
        let g = GridDensity::from_analytic(spec, &AnalyticDensity::standard(3)).unwrap();
        assert_eq!(g.values.len(), 729);
    }

    fn arb_vec3() -> impl Strategy<Value = Vec3> {
        (-3.0f64..3.0, -3.0f64..3.0, -3.0f64..3.0).prop_map(|(a, b, c)| [a, b, c])
    }

    proptest! {
        #[test]
        fn projector_annihilates_z_and_is_psd(
            z in arb_vec3(), gamma in -3.0f64..=0.0, eps in 0.0f64..0.5
        ) {
            prop_assume!(norm2(&z) > 1e-6);
            let p = KernelParams::new(3, gamma, eps).unwrap();
            let a = eval_a(&z, &p).unwrap();
            let scale_ = a.iter().flatten().fold(0.0f64, |m, x| m.max(x.abs())).max(1.0);
            let az = mat_vec(&a, &z);
            prop_assert!(az.iter().all(|x| x.abs() <= 1e-13 * scale_));
            for r in 0..3 {
                for c in 0..3 {
                    prop_assert_eq!(a[r][c], a[c][r]);
                }
            }
            prop_assert!(min_eig(&a) >= -1e-13 * scale_);
            let neg = [-z[0], -z[1], -z[2]];
            prop_assert_eq!(eval_a(&neg, &p).unwrap(), a);
            let b = eval_b(&z, &p).unwrap();
            let bn = eval_b(&neg, &p).unwrap();
            prop_assert_eq!(bn, [-b[0], -b[1], -b[2]]);
        }

        #[test]
        fn particle_convolution_is_translation_covariant(
            shift in arb_vec3(), v in arb_vec3()
        ) {
            let p = KernelParams::coulomb(0.1);
            let vs = vec![[0.3, 0.1, 0.0], [-0.2, 0.5, 1.0], [1.0, -1.0, 0.2]];
            let e = ParticleEnsemble::uniform(3, vs.clone()).unwrap();
            let es = ParticleEnsemble::uniform(3, vs.iter().map(|x| add(x, &shift)).collect()).unwrap();
            let a = conv_a_particles(&v, &e, &p);
            let a2 = conv_a_particles(&add(&v, &shift), &es, &p);
            for r in 0..3 {
                for c in 0..3 {
                    prop_assert!((a[r][c] - a2[r][c]).abs() < 1e-9 * (1.0 + a[r][c].abs()));
                }
            }
        }
    }
}
