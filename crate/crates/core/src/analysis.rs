//! Quadrature checks of the relative-entropy inequalities: the key
//! dissipation estimate, both Pinsker inequalities, coercivity of `A∗g`
//! and the affine growth envelope of the weighted Fisher information.

use nalgebra::{Matrix3, SymmetricEigen};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::gridconv::{ConvField, GridConvolver};
use crate::oracle::{pair_functionals, single_functionals, FunctionalOptions, Sampled};
use crate::sampling::random_mixture_pairs;
use crate::sum::NeumaierSum;
use crate::types::{
    bracket, mat_vec, norm2, quad_form, sub, GridDensity, GridSpec, KernelParams, Mat3,
    TrajectoryRecord, Vec3,
};

fn to_matrix(a: &Mat3) -> Matrix3<f64> {
    Matrix3::from_fn(|r, c| a[r][c])
}

/// Smallest eigenvalue of the `dim × dim` block of a symmetric matrix.
pub fn min_eigenvalue(a: &Mat3, dim: usize) -> f64 {
    if dim == 2 {
        let (p, q, r) = (a[0][0], a[0][1], a[1][1]);
        let mid = 0.5 * (p + r);
        let rad = (0.25 * (p - r) * (p - r) + q * q).sqrt();
        return mid - rad;
    }
    let e = SymmetricEigen::new(to_matrix(a));
    e.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min)
}

/// Spectral norm of the `dim × dim` block of a symmetric matrix.
pub fn spectral_norm(a: &Mat3, dim: usize) -> f64 {
    if dim == 2 {
        let (p, q, r) = (a[0][0], a[0][1], a[1][1]);
        let mid = 0.5 * (p + r);
        let rad = (0.25 * (p - r) * (p - r) + q * q).sqrt();
        return mid.abs() + rad;
    }
    let e = SymmetricEigen::new(to_matrix(a));
    e.eigenvalues.iter().map(|x| x.abs()).fold(0.0, f64::max)
}

fn support_mask(values: &[f64], floor: f64) -> Vec<bool> {
    let max = values.iter().copied().fold(0.0, f64::max);
    values.iter().map(|&f| f > floor * max).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoercivityReport {
    /// `min_v λ_min((A∗g)(v)) ⟨v⟩^{-γ}` over the sample nodes.
    pub c_coe: f64,
    pub argmin: Vec3,
    pub samples: usize,
}

/// Coercivity constant of `A∗g` over the grid nodes selected by `mask`.
pub fn coercivity_from_field(
    spec: &GridSpec,
    a_conv: &[Mat3],
    gamma: f64,
    mask: &[bool],
) -> Result<CoercivityReport> {
    let (c, idx, n) = (0..spec.len())
        .into_par_iter()
        .filter(|&i| mask[i])
        .map(|i| {
            let v = spec.node(i);
            (min_eigenvalue(&a_conv[i], spec.dim) * bracket(&v).powf(-gamma), i, 1usize)
        })
        .reduce(
            || (f64::INFINITY, usize::MAX, 0),
            |a, b| {
                let n = a.2 + b.2;
                if b.0 < a.0 || (b.0 == a.0 && b.1 < a.1) {
                    (b.0, b.1, n)
                } else {
                    (a.0, a.1, n)
                }
            },
        );
    if n == 0 {
        return Err(Error::InvalidInput("no coercivity sample points".into()));
    }
    if !(c > 0.0) {
        return Err(Error::NonPositiveCoercivity(c));
    }
    Ok(CoercivityReport {
        c_coe: c,
        argmin: spec.node(idx),
        samples: n,
    })
}

/// Coercivity of `A∗g` on the nodes with `g > floor · max g` and
/// `|v| ≤ radius`.
pub fn coercivity_check(
    g: &GridDensity,
    convolver: &GridConvolver,
    radius: f64,
    floor: f64,
) -> Result<CoercivityReport> {
    let spec = g.spec;
    let field = convolver.convolve(&g.values);
    let support = support_mask(&g.values, floor);
    let mask: Vec<bool> = (0..spec.len())
        .map(|i| support[i] && norm2(&spec.node(i)).sqrt() <= radius)
        .collect();
    coercivity_from_field(&spec, &field.a, convolver.params().gamma, &mask)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InequalityForm {
    Raw,
    KlForm,
}

/// Term-by-term evaluation of the key inequality
///
/// ```text
/// ∫ f (U[f] − U[g])·∇log(f/g)
///   ≤ −½ ∫ f |∇log(f/g)|²_{A∗g} + R_A + R_b
/// ```
///
/// with `R_A = C_coe⁻¹ ∫ f ⟨v⟩^{−γ} ‖A∗(f−g)‖² |∇log f|²` and
/// `R_b = C_coe⁻¹ ∫ f ⟨v⟩^{−γ} |b∗(f−g)|²`, or in KL form
/// `C_abs · KL(f‖g) · bracket`.
#[derive(Debug, Clone, PartialEq)]
pub struct InequalityReport {
    pub form: InequalityForm,
    pub lhs: f64,
    /// `∫ f |∇log(f/g)|²_{A∗g}`.
    pub dissipation: f64,
    pub remainder_diffusion: f64,
    pub remainder_drift: f64,
    pub c_coe: f64,
    pub kl: f64,
    /// `(‖f‖_∞ + ‖g‖_∞)(‖f⟨v⟩³|∇log f|²‖₁ + ‖f⟨v⟩³‖₂) + ‖f⟨v⟩³‖₁`.
    pub bracket: f64,
    pub c_abs: f64,
    pub rhs: f64,
    pub margin: f64,
    /// Margin when the remainders are multiplied by `C_coe` instead of
    /// divided by it; informational.
    pub margin_multiplied_constant: f64,
    pub grid: GridSpec,
    pub support_nodes: usize,
}

/// The bracket multiplying `KL(f‖g)` in the KL form.
pub fn kl_bracket(f: &Sampled, g: &Sampled) -> f64 {
    let opts = FunctionalOptions {
        moment_weights: vec![3.0],
        fisher_weights: vec![3.0],
        lp_exponents: vec![],
        support_floor: crate::oracle::DEFAULT_SUPPORT_FLOOR,
    };
    let sf = single_functionals(f, &opts);
    let fisher3 = sf.fisher[0].1;
    let moment3 = sf.moments[0].1;
    (f.max_value() + g.max_value()) * (fisher3 + sf.weighted_l2_3) + moment3
}

/// Evaluates both sides of the key inequality by quadrature. `C_coe` is
/// measured on the support of `f`.
pub fn verify_key_inequality(
    f: &Sampled,
    g: &Sampled,
    convolver: &GridConvolver,
    form: InequalityForm,
    c_abs: f64,
    support_floor: f64,
) -> Result<InequalityReport> {
    let spec = f.spec;
    if g.spec != spec || *convolver.spec() != spec {
        return Err(Error::InvalidInput("densities and convolver must share a grid".into()));
    }
    let params = convolver.params();
    if form == InequalityForm::KlForm && !params.is_coulomb() {
        return Err(Error::InvalidInput("the KL form needs d = 3 and γ = -3".into()));
    }
    let dim = spec.dim;
    let cf = convolver.convolve(&f.values);
    let cg = convolver.convolve(&g.values);
    let cd: ConvField = cf.difference(&cg);
    let mask = support_mask(&f.values, support_floor);
    let coe = coercivity_from_field(&spec, &cg.a, params.gamma, &mask)?;
    let q = spec.quadrature_weights();

    let terms: Vec<[f64; 4]> = (0..spec.len())
        .into_par_iter()
        .map(|i| {
            if !mask[i] {
                return [0.0; 4];
            }
            let fi = f.values[i];
            let (sf, sg) = (f.score[i], g.score[i]);
            let x = sub(&sf, &sg);
            let uf = sub(&cf.b[i], &mat_vec(&cf.a[i], &sf));
            let ug = sub(&cg.b[i], &mat_vec(&cg.a[i], &sg));
            let du = sub(&uf, &ug);
            let dot: f64 = (0..dim).map(|k| du[k] * x[k]).sum();
            let w = fi * q[i];
            let weight = bracket(&spec.node(i)).powf(-params.gamma);
            let na = spectral_norm(&cd.a[i], dim);
            [
                w * dot,
                w * quad_form(&cg.a[i], &x),
                w * weight * na * na * norm2(&sf),
                w * weight * norm2(&cd.b[i]),
            ]
        })
        .collect();
    let total = |k: usize| {
        let mut acc = NeumaierSum::new();
        for t in &terms {
            acc.add(t[k]);
        }
        acc.value()
    };
    let (lhs, dissipation) = (total(0), total(1));
    let (ra, rb) = (total(2), total(3));
    let c_coe = coe.c_coe;
    let remainder_diffusion = ra / c_coe;
    let remainder_drift = rb / c_coe;
    let kl = pair_functionals(&f.values, &g.values, &spec, support_floor).kl;
    let kb = if params.is_coulomb() { kl_bracket(f, g) } else { f64::NAN };
    let rhs = match form {
        InequalityForm::Raw => -0.5 * dissipation + remainder_diffusion + remainder_drift,
        InequalityForm::KlForm => -0.5 * dissipation + c_abs * kl * kb,
    };
    let margin_multiplied_constant = -0.5 * dissipation + c_coe * (ra + rb) - lhs;
    Ok(InequalityReport {
        form,
        lhs,
        dissipation,
        remainder_diffusion,
        remainder_drift,
        c_coe,
        kl,
        bracket: kb,
        c_abs,
        rhs,
        margin: rhs - lhs,
        margin_multiplied_constant,
        grid: spec,
        support_nodes: mask.iter().filter(|&&m| m).count(),
    })
}

/// Smallest `C_abs` for which every report's KL-form margin is
/// nonnegative.
pub fn calibrate_c_abs(reports: &[InequalityReport]) -> f64 {
    reports
        .iter()
        .filter(|r| r.kl > 0.0 && r.bracket > 0.0)
        .map(|r| (r.lhs + 0.5 * r.dissipation) / (r.kl * r.bracket))
        .fold(0.0, f64::max)
}

/// KL-form reports and the calibrated `C_abs` over a seeded suite of
/// random mixture pairs (Coulomb kernel).
pub fn calibration_suite(
    spec: GridSpec,
    params: KernelParams,
    pairs: usize,
    seed: u64,
) -> Result<(f64, Vec<InequalityReport>)> {
    let convolver = GridConvolver::new(spec, params);
    let reports = random_mixture_pairs(spec.dim, pairs, seed)?
        .iter()
        .map(|(f, g)| {
            verify_key_inequality(
                &Sampled::from_analytic(spec, f)?,
                &Sampled::from_analytic(spec, g)?,
                &convolver,
                InequalityForm::KlForm,
                1.0,
                crate::oracle::DEFAULT_SUPPORT_FLOOR,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((calibrate_c_abs(&reports), reports))
}

#[derive(Debug, Clone, PartialEq)]
pub struct PinskerReport {
    pub kl: f64,
    /// `∫ |f − g|²`.
    pub l2_sq: f64,
    /// `2(‖f‖_∞ + ‖g‖_∞) KL`.
    pub l2_bound: f64,
    pub l1: f64,
    /// `√(2 KL)`.
    pub l1_bound: f64,
    pub l2_margin: f64,
    pub l1_margin: f64,
}

impl PinskerReport {
    pub fn holds(&self, tol: f64) -> bool {
        self.l2_margin >= -tol && self.l1_margin >= -tol
    }
}

/// Both Pinsker inequalities by quadrature on a shared grid.
pub fn pinsker_check(f: &[f64], g: &[f64], spec: &GridSpec, support_floor: f64) -> PinskerReport {
    let pf = pair_functionals(f, g, spec, support_floor);
    let fmax = f.iter().copied().fold(0.0, f64::max);
    let gmax = g.iter().copied().fold(0.0, f64::max);
    let kl = pf.kl.max(0.0);
    let l2_bound = 2.0 * (fmax + gmax) * kl;
    let l1_bound = (2.0 * kl).sqrt();
    PinskerReport {
        kl: pf.kl,
        l2_sq: pf.l2_sq,
        l2_bound,
        l1: pf.l1,
        l1_bound,
        l2_margin: l2_bound - pf.l2_sq,
        l1_margin: l1_bound - pf.l1,
    }
}

/// Least-squares affine fit `I(t) ≈ a + b t` over `t ≥ t_burn`.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvelopeFit {
    pub a: f64,
    pub b: f64,
    /// `max (I(t) − (a + b t)) / (a + b t)` over the window, ≥ 0.
    pub max_violation: f64,
    pub points: usize,
}

pub fn fit_envelope(times: &[f64], values: &[f64], t_burn: f64) -> Result<EnvelopeFit> {
    let pts: Vec<(f64, f64)> = times
        .iter()
        .zip(values)
        .filter(|(t, _)| **t >= t_burn)
        .map(|(t, v)| (*t, *v))
        .collect();
    if pts.len() < 3 {
        return Err(Error::SeriesTooShort {
            needed: 3,
            got: pts.len(),
        });
    }
    let n = pts.len() as f64;
    let tm = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let vm = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let stt: f64 = pts.iter().map(|p| (p.0 - tm) * (p.0 - tm)).sum();
    let stv: f64 = pts.iter().map(|p| (p.0 - tm) * (p.1 - vm)).sum();
    let b = if stt > 0.0 { stv / stt } else { 0.0 };
    let a = vm - b * tm;
    let max_violation = pts
        .iter()
        .map(|&(t, v)| {
            let env = a + b * t;
            if env > 0.0 {
                (v - env) / env
            } else if v > env {
                f64::INFINITY
            } else {
                0.0
            }
        })
        .fold(0.0, f64::max);
    Ok(EnvelopeFit {
        a,
        b,
        max_violation,
        points: pts.len(),
    })
}

/// Affine envelope of the trajectory's weighted Fisher series.
pub fn fisher_growth_envelope(record: &TrajectoryRecord, t_burn: f64) -> Result<EnvelopeFit> {
    fit_envelope(&record.times, &record.fisher_series(), t_burn)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::DEFAULT_SUPPORT_FLOOR;
    use crate::types::{AnalyticDensity, DiagnosticRow, GaussianComponent};
    use proptest::prelude::*;

    fn sampled(spec: GridSpec, f: &AnalyticDensity) -> Sampled {
        Sampled::from_analytic(spec, f).unwrap()
    }

    #[test]
    fn identical_densities_give_zero_terms() {
        let spec = GridSpec::new(3, 7.0, 24).unwrap();
        let f = sampled(spec, &AnalyticDensity::standard(3));
        let conv = GridConvolver::new(spec, KernelParams::coulomb(0.0));
        let r = verify_key_inequality(&f, &f, &conv, InequalityForm::Raw, 1.0, DEFAULT_SUPPORT_FLOOR)
            .unwrap();
        assert_eq!(r.lhs, 0.0);
        assert_eq!(r.dissipation, 0.0);
        assert_eq!(r.remainder_diffusion, 0.0);
        assert_eq!(r.remainder_drift, 0.0);
        assert_eq!(r.margin, 0.0);
    }

    #[test]
    fn shifted_gaussian_pair_has_nonnegative_margin() {
        let spec = GridSpec::new(3, 8.0, 48).unwrap();
        let f = sampled(spec, &AnalyticDensity::standard(3));
        let g = sampled(spec, &AnalyticDensity::gaussian(3, &[0.3, 0.0, 0.0], 1.0).unwrap());
        let conv = GridConvolver::new(spec, KernelParams::coulomb(0.0));
        let r = verify_key_inequality(&f, &g, &conv, InequalityForm::Raw, 1.0, DEFAULT_SUPPORT_FLOOR)
            .unwrap();
        assert!(r.margin >= -1e-8, "{r:?}");
        assert!(r.dissipation > 0.0);
        // Maxwellians are stationary, so both fields vanish.
        assert!(r.lhs.abs() < 1e-6);
        let k = verify_key_inequality(&f, &g, &conv, InequalityForm::KlForm, 1.0, DEFAULT_SUPPORT_FLOOR)
            .unwrap();
        assert!(k.bracket > 0.0 && (k.kl - 0.045).abs() < 1e-4);
        let c = calibrate_c_abs(std::slice::from_ref(&k));
        let again = InequalityReport {
            rhs: -0.5 * k.dissipation + c * k.kl * k.bracket,
            ..k.clone()
        };
        assert!(again.rhs - again.lhs >= -1e-12);
    }

    #[test]
    fn kl_form_requires_coulomb() {
        let spec = GridSpec::new(3, 5.0, 12).unwrap();
        let f = sampled(spec, &AnalyticDensity::standard(3));
        let conv = GridConvolver::new(spec, KernelParams::new(3, 0.0, 0.0).unwrap());
        assert!(verify_key_inequality(&f, &f, &conv, InequalityForm::KlForm, 1.0, 1e-12).is_err());
    }

    #[test]
    fn pinsker_examples() {
        let spec = GridSpec::new(3, 8.0, 40).unwrap();
        let f = GridDensity::from_analytic(spec, &AnalyticDensity::standard(3)).unwrap();
        let g = GridDensity::from_analytic(spec, &AnalyticDensity::maxwellian(3, 2.0)).unwrap();
        let same = pinsker_check(&f.values, &f.values, &spec, DEFAULT_SUPPORT_FLOOR);
        assert!(same.l2_sq == 0.0 && same.l1 == 0.0 && same.kl.abs() < 1e-14);
        let r = pinsker_check(&f.values, &g.values, &spec, DEFAULT_SUPPORT_FLOOR);
        assert!((r.kl - 0.28972).abs() < 1e-4);
        assert!(r.l2_margin > 0.0 && r.l1_margin > 0.0, "{r:?}");
    }

    #[test]
    fn coercivity_examples() {
        let spec = GridSpec::new(3, 8.0, 33).unwrap();
        let params = KernelParams::coulomb(0.0);
        let conv = GridConvolver::new(spec, params);
        let g = GridDensity::from_analytic(spec, &AnalyticDensity::standard(3)).unwrap();
        let field = conv.convolve(&g.values);
        let c = field.a[spec.center_index()];
        assert!(c[0][0] > 0.0);
        for r in 0..3 {
            for k in 0..3 {
                let expect = if r == k { c[0][0] } else { 0.0 };
                assert!((c[r][k] - expect).abs() < 1e-12 * c[0][0]);
            }
        }
        let narrow = coercivity_check(&g, &conv, 4.0, DEFAULT_SUPPORT_FLOOR).unwrap().c_coe;
        let wide_g = GridDensity::from_analytic(spec, &AnalyticDensity::maxwellian(3, 4.0)).unwrap();
        let wide = coercivity_check(&wide_g, &conv, 4.0, DEFAULT_SUPPORT_FLOOR).unwrap().c_coe;
        assert!(narrow > 0.0 && wide > 0.0);
        let mid_g = GridDensity::from_analytic(spec, &AnalyticDensity::maxwellian(3, 2.0)).unwrap();
        let mid = coercivity_check(&mid_g, &conv, 4.0, DEFAULT_SUPPORT_FLOOR).unwrap().c_coe;
        assert!(mid > 0.0 && mid < narrow.max(wide) && mid > narrow.min(wide), "{narrow} {mid} {wide}");
    }

    #[test]
    fn envelope_examples() {
        let t: Vec<f64> = (0..10).map(|i| i as f64 * 0.2).collect();
        let c = fit_envelope(&t, &vec![2.5; 10], 0.0).unwrap();
        assert!((c.a - 2.5).abs() < 1e-14 && c.b.abs() < 1e-14 && c.max_violation < 1e-14);
        let lin: Vec<f64> = t.iter().map(|x| 1.0 + 3.0 * x).collect();
        let l = fit_envelope(&t, &lin, 0.0).unwrap();
        assert!((l.a - 1.0).abs() < 1e-12 && (l.b - 3.0).abs() < 1e-12 && l.max_violation < 1e-12);
        assert!(matches!(
            fit_envelope(&t, &lin, 1.5),
            Err(Error::SeriesTooShort { needed: 3, got: 2 })
        ));
        let mut rec = TrajectoryRecord::new(3, 3.0);
        for (ti, v) in t.iter().zip(&lin) {
            rec.push(*ti, DiagnosticRow { fisher: *v, ..Default::default() });
        }
        assert_eq!(fisher_growth_envelope(&rec, 0.0).unwrap(), l);
    }

    #[test]
    fn calibration_gives_nonnegative_kl_margins() {
        let spec = GridSpec::new(3, 7.0, 20).unwrap();
        let (c, reports) = calibration_suite(spec, KernelParams::coulomb(0.0), 4, 5).unwrap();
        assert!(c > 0.0 && reports.len() == 4);
        for r in &reports {
            let rhs = -0.5 * r.dissipation + c * r.kl * r.bracket;
            assert!(rhs - r.lhs >= -1e-12 * r.lhs.abs().max(1e-12));
        }
        let again = calibration_suite(spec, KernelParams::coulomb(0.0), 4, 5).unwrap();
        assert_eq!(again.0, c);
    }

    #[test]
    fn eigen_helpers() {
        let a = [[2.0, 1.0, 0.0], [1.0, 2.0, 0.0], [0.0, 0.0, 5.0]];
        assert!((min_eigenvalue(&a, 3) - 1.0).abs() < 1e-14);
        assert!((spectral_norm(&a, 3) - 5.0).abs() < 1e-14);
        assert!((min_eigenvalue(&a, 2) - 1.0).abs() < 1e-14);
        assert!((spectral_norm(&a, 2) - 3.0).abs() < 1e-14);
    }

    fn mixture(p: &[f64]) -> AnalyticDensity {
        AnalyticDensity::mixture(
            3,
            vec![
                GaussianComponent { weight: p[0], mean: vec![p[1], p[2], 0.0], variance: p[3] },
                GaussianComponent { weight: 1.0 - p[0], mean: vec![-p[2], 0.0, p[1]], variance: p[4] },
            ],
        )
        .unwrap()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(12))]
        #[test]
        fn raw_margin_and_pinsker_hold_on_mixtures(
            a in proptest::collection::vec(0.0..1.0f64, 5),
            b in proptest::collection::vec(0.0..1.0f64, 5),
        ) {
            let param = |u: &[f64]| [0.2 + 0.6 * u[0], u[1] - 0.5, u[2] - 0.5, 0.6 + 0.8 * u[3], 0.6 + 0.8 * u[4]];
            let spec = GridSpec::new(3, 8.0, 24).unwrap();
            let fa = mixture(&param(&a));
            let fb = mixture(&param(&b));
            let conv = GridConvolver::new(spec, KernelParams::coulomb(0.0));
            let (sa, sb) = (sampled(spec, &fa), sampled(spec, &fb));
            let r = verify_key_inequality(&sa, &sb, &conv, InequalityForm::Raw, 1.0, DEFAULT_SUPPORT_FLOOR).unwrap();
            prop_assert!(r.margin >= -1e-10 * (1.0 + r.lhs.abs()), "{:?}", r);
            prop_assert!(r.dissipation >= 0.0);
            prop_assert!(pinsker_check(&sa.values, &sb.values, &spec, DEFAULT_SUPPORT_FLOOR).holds(1e-12));
        }
    }
}
