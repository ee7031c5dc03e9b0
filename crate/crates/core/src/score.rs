//! Score fields `s ≈ ∇ log g` and the weighted score-matching loss
//! `L(s, g, A∗g) = ∫ |∇ log g - s|²_{A∗g} g`.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::gridconv::GridConvolver;
use crate::kernel::conv_a_at_particles;
use crate::pairs::{self, Columns};
use crate::sum::{NeumaierSum, Reduction};
use crate::types::{
    add, mat_vec, norm2, quad_form, scale, sub, AnalyticDensity, GridDensity, KernelParams, Mat3,
    ParticleEnsemble, Vec3, ZERO3,
};

/// Additive perturbation of a base score.
#[derive(Debug, Clone, PartialEq)]
pub enum OffsetField {
    /// `s(v) + c`.
    Constant(Vec3),
    /// `s(v) + M v`.
    Linear(Mat3),
}

impl OffsetField {
    pub fn eval(&self, v: &Vec3) -> Vec3 {
        match self {
            OffsetField::Constant(c) => *c,
            OffsetField::Linear(m) => mat_vec(m, v),
        }
    }

    pub fn scaled(&self, k: f64) -> Self {
        match self {
            OffsetField::Constant(c) => OffsetField::Constant(scale(c, k)),
            OffsetField::Linear(m) => {
                let mut out = *m;
                out.iter_mut().flatten().for_each(|x| *x *= k);
                OffsetField::Linear(out)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ScoreField {
    /// Exact score of a closed-form density.
    Analytic(AnalyticDensity),
    /// `∇ log(ψ_δ ∗ ĝ)` of the current ensemble.
    Blob { bandwidth: f64 },
    Perturbed {
        base: Box<ScoreField>,
        offset: OffsetField,
    },
}

impl ScoreField {
    pub fn perturbed(base: ScoreField, offset: OffsetField) -> Self {
        ScoreField::Perturbed {
            base: Box::new(base),
            offset,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            ScoreField::Analytic(_) => "analytic",
            ScoreField::Blob { .. } => "blob",
            ScoreField::Perturbed { .. } => "perturbed",
        }
    }

    /// Bandwidth of the blob score at the base of this field, if any.
    pub fn blob_bandwidth(&self) -> Option<f64> {
        match self {
            ScoreField::Blob { bandwidth } => Some(*bandwidth),
            ScoreField::Perturbed { base, .. } => base.blob_bandwidth(),
            ScoreField::Analytic(_) => None,
        }
    }

    /// Whether evaluation needs the particle ensemble.
    pub fn needs_ensemble(&self) -> bool {
        match self {
            ScoreField::Analytic(_) => false,
            ScoreField::Blob { .. } => true,
            ScoreField::Perturbed { base, .. } => base.needs_ensemble(),
        }
    }

    /// The score at every particle of `ensemble`.
    pub fn at_particles(
        &self,
        ensemble: &ParticleEnsemble,
        reduction: Reduction,
    ) -> Result<Vec<Vec3>> {
        match self {
            ScoreField::Analytic(f) => ensemble
                .velocities
                .iter()
                .map(|v| analytic_score(f, v))
                .collect(),
            ScoreField::Blob { bandwidth } => {
                Ok(blob_eval(ensemble, *bandwidth, reduction)?.scores)
            }
            ScoreField::Perturbed { base, offset } => {
                let mut s = base.at_particles(ensemble, reduction)?;
                for (si, v) in s.iter_mut().zip(&ensemble.velocities) {
                    *si = add(si, &offset.eval(v));
                }
                Ok(s)
            }
        }
    }

    /// The score at an arbitrary point; blob scores use `ensemble`.
    pub fn at_point(&self, v: &Vec3, ensemble: Option<&ParticleEnsemble>) -> Result<Vec3> {
        match self {
            ScoreField::Analytic(f) => analytic_score(f, v),
            ScoreField::Blob { bandwidth } => {
                let e = ensemble.ok_or_else(|| {
                    Error::Config("blob score evaluation needs a particle ensemble".into())
                })?;
                blob_score_at(v, e, *bandwidth)
            }
            ScoreField::Perturbed { base, offset } => {
                Ok(add(&base.at_point(v, ensemble)?, &offset.eval(v)))
            }
        }
    }
}

/// Exact `∇ log f(v)` of a closed-form density.
pub fn analytic_score(density: &AnalyticDensity, v: &Vec3) -> Result<Vec3> {
    density.score(v)
}

/// Blob score and mollified density at every particle.
#[derive(Debug, Clone, PartialEq)]
pub struct BlobEval {
    pub scores: Vec<Vec3>,
    /// `(ψ_δ ∗ ĝ)(v_i)`.
    pub densities: Vec<f64>,
}

impl BlobEval {
    /// Regularized entropy `Σ_i w_i log (ψ_δ ∗ ĝ)(v_i)`.
    pub fn entropy(&self, ensemble: &ParticleEnsemble) -> f64 {
        let mut acc = NeumaierSum::new();
        for (w, d) in ensemble.weights.iter().zip(&self.densities) {
            acc.add(w * d.ln());
        }
        acc.value()
    }
}

fn mollifier_norm(dim: usize, delta: f64) -> f64 {
    (2.0 * std::f64::consts::PI * delta * delta).powf(-0.5 * dim as f64)
}

/// Bandwidth rule `δ = c N^{-1/(d+4)}`.
pub fn bandwidth_rule(constant: f64, n: usize, dim: usize) -> f64 {
    constant * (n as f64).powf(-1.0 / (dim as f64 + 4.0))
}

/// `s_i = Σ_j w_j ∇ψ_δ(v_i - v_j) / Σ_j w_j ψ_δ(v_i - v_j)`.
pub fn blob_score(
    ensemble: &ParticleEnsemble,
    bandwidth: f64,
    reduction: Reduction,
) -> Result<Vec<Vec3>> {
    Ok(blob_eval(ensemble, bandwidth, reduction)?.scores)
}

pub fn blob_eval(
    ensemble: &ParticleEnsemble,
    bandwidth: f64,
    reduction: Reduction,
) -> Result<BlobEval> {
    if !(bandwidth > 0.0) || !bandwidth.is_finite() {
        return Err(Error::InvalidInput(format!("bandwidth must be positive, got {bandwidth}")));
    }
    let inv = 1.0 / (2.0 * bandwidth * bandwidth);
    let inv_d2 = 1.0 / (bandwidth * bandwidth);
    let vs = &ensemble.velocities;
    let ws = &ensemble.weights;
    let n = vs.len();

    // Unnormalized numerator (Σ w_j e_ij (v_j - v_i)) and denominator.
    let (num, den): (Vec<Vec3>, Vec<f64>) = match reduction {
        Reduction::Deterministic => vs
            .par_iter()
            .map(|vi| {
                let mut nx = NeumaierSum::new();
                let mut ny = NeumaierSum::new();
                let mut nz = NeumaierSum::new();
                let mut d = NeumaierSum::new();
                for (vj, wj) in vs.iter().zip(ws) {
                    let z = sub(vj, vi);
                    let e = wj * (-norm2(&z) * inv).exp();
                    nx.add(e * z[0]);
                    ny.add(e * z[1]);
                    nz.add(e * z[2]);
                    d.add(e);
                }
                ([nx.value(), ny.value(), nz.value()], d.value())
            })
            .unzip(),
        Reduction::Fast => pairs::blob(&Columns::new(vs), ws, inv),
    };

    let norm = mollifier_norm(ensemble.dim, bandwidth);
    let mut scores = Vec::with_capacity(n);
    let mut densities = Vec::with_capacity(n);
    for (i, (nu, de)) in num.iter().zip(&den).enumerate() {
        if !(*de > 0.0) || !de.is_finite() {
            return Err(Error::BlobUnderflow { index: i });
        }
        scores.push(scale(nu, inv_d2 / de));
        densities.push(de * norm);
    }
    Ok(BlobEval { scores, densities })
}

/// `∇ log(ψ_δ ∗ ĝ)(v)` at an arbitrary point.
pub fn blob_score_at(v: &Vec3, ensemble: &ParticleEnsemble, bandwidth: f64) -> Result<Vec3> {
    let inv = 1.0 / (2.0 * bandwidth * bandwidth);
    // Shift exponents by the nearest particle to avoid underflow far out.
    let r2min = ensemble
        .velocities
        .iter()
        .map(|vj| norm2(&sub(vj, v)))
        .fold(f64::INFINITY, f64::min);
    let mut num = ZERO3;
    let mut den = 0.0;
    for (vj, wj) in ensemble.velocities.iter().zip(&ensemble.weights) {
        let z = sub(vj, v);
        let e = wj * (-(norm2(&z) - r2min) * inv).exp();
        num = add(&num, &scale(&z, e));
        den += e;
    }
    if !(den > 0.0) {
        return Err(Error::DensityUnderflow {
            point: v[..ensemble.dim].to_vec(),
        });
    }
    Ok(scale(&num, 1.0 / (bandwidth * bandwidth * den)))
}

/// Weighted particle estimate `Σ_i w_i (r_i - s_i)ᵀ (A∗g)(v_i) (r_i - s_i)`.
pub fn loss_from_parts(weights: &[f64], s: &[Vec3], reference: &[Vec3], a_conv: &[Mat3]) -> f64 {
    let mut acc = NeumaierSum::new();
    for (((w, si), ri), a) in weights.iter().zip(s).zip(reference).zip(a_conv) {
        let diff = sub(ri, si);
        acc.add(w * quad_form(a, &diff));
    }
    acc.value().max(0.0)
}

/// Where the loss integral is evaluated.
pub enum LossTarget<'a> {
    /// Weighted sum over particles with particle convolutions.
    Particles(&'a ParticleEnsemble),
    /// Trapezoid quadrature with spectral grid convolutions.
    Grid {
        density: &'a GridDensity,
        convolver: &'a GridConvolver,
    },
}

/// `L(s, g, A∗g)`, with `ref_score` standing in for `∇ log g`.
pub fn score_matching_loss(
    s: &ScoreField,
    g: LossTarget<'_>,
    ref_score: Option<&ScoreField>,
    params: &KernelParams,
    reduction: Reduction,
) -> Result<f64> {
    let reference = ref_score
        .ok_or_else(|| Error::Config("score-matching loss needs a reference score".into()))?;
    match g {
        LossTarget::Particles(e) => {
            let sv = s.at_particles(e, reduction)?;
            let rv = reference.at_particles(e, reduction)?;
            let a = conv_a_at_particles(e, params);
            Ok(loss_from_parts(&e.weights, &sv, &rv, &a))
        }
        LossTarget::Grid { density, convolver } => {
            if s.needs_ensemble() || reference.needs_ensemble() {
                return Err(Error::Config(
                    "grid loss needs scores that are evaluable without particles".into(),
                ));
            }
            let spec = density.spec;
            let field = convolver.convolve(&density.values);
            let q = spec.quadrature_weights();
            let mut acc = NeumaierSum::new();
            for i in 0..spec.len() {
                let gi = density.values[i];
                if gi <= 0.0 {
                    continue;
                }
                let v = spec.node(i);
                let diff = sub(&reference.at_point(&v, None)?, &s.at_point(&v, None)?);
                acc.add(q[i] * gi * quad_form(&field.a[i], &diff));
            }
            Ok(acc.value().max(0.0))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sampling::sample_random;
    use crate::types::{GaussianComponent, GridSpec};

    #[test]
    fn analytic_examples() {
        let f = AnalyticDensity::standard(3);
        assert_eq!(analytic_score(&f, &[1.0, 2.0, 3.0]).unwrap(), [-1.0, -2.0, -3.0]);
        let g = AnalyticDensity::gaussian(3, &[1.0, 0.0, 0.0], 4.0).unwrap();
        assert_eq!(analytic_score(&g, &[1.0, 0.0, 0.0]).unwrap(), [0.0, 0.0, 0.0]);
        let mix = AnalyticDensity::mixture(
            3,
            vec![
                GaussianComponent { weight: 0.5, mean: vec![1.0, 0.5, 0.0], variance: 0.8 },
                GaussianComponent { weight: 0.5, mean: vec![-1.0, -0.5, 0.0], variance: 0.8 },
            ],
        )
        .unwrap();
        let s = analytic_score(&mix, &ZERO3).unwrap();
        assert!(s.iter().all(|x| x.abs() < 1e-15));
    }

    #[test]
    fn single_particle_blob_score_vanishes() {
        let e = ParticleEnsemble::uniform(3, vec![[0.3, -1.0, 2.0]]).unwrap();
        for r in [Reduction::Fast, Reduction::Deterministic] {
            assert_eq!(blob_score(&e, 0.7, r).unwrap(), vec![ZERO3]);
        }
    }

    #[test]
    fn two_particles_point_inward() {
        let a = 0.6;
        let e = ParticleEnsemble::uniform(3, vec![[a, 0.0, 0.0], [-a, 0.0, 0.0]]).unwrap();
        for r in [Reduction::Fast, Reduction::Deterministic] {
            let s = blob_score(&e, 0.5, r).unwrap();
            assert!(s[0][0] < 0.0 && s[1][0] > 0.0);
            assert_eq!(s[0], [-s[1][0], -s[1][1], -s[1][2]]);
        }
    }

    #[test]
    fn blob_rejects_bad_bandwidth() {
        let e = ParticleEnsemble::uniform(3, vec![ZERO3]).unwrap();
        assert!(blob_score(&e, 0.0, Reduction::Fast).is_err());
    }

    #[test]
    fn reduction_modes_agree() {
        let e = sample_random(&AnalyticDensity::standard(3), 300, 11).unwrap();
        let fast = blob_eval(&e, 0.4, Reduction::Fast).unwrap();
        let det = blob_eval(&e, 0.4, Reduction::Deterministic).unwrap();
        for (a, b) in fast.scores.iter().zip(&det.scores) {
            for k in 0..3 {
                assert!((a[k] - b[k]).abs() < 1e-12 * (1.0 + b[k].abs()));
            }
        }
        for (a, b) in fast.densities.iter().zip(&det.densities) {
            assert!((a - b).abs() < 1e-12 * b);
        }
        let at = blob_score_at(&e.velocities[5], &e, 0.4).unwrap();
        for k in 0..3 {
            assert!((at[k] - det.scores[5][k]).abs() < 1e-12 * (1.0 + at[k].abs()));
        }
    }

    /// Expected mean squared error of the blob score of `n` iid standard
    /// normal samples in 3-d against the mollified score `-v / (1 + δ²)`.
    ///
    /// Delta-method variance of the ratio estimator plus the self-term bias
    /// of the denominator; the inner Gaussian integral is closed form and
    /// the outer expectation is a radial trapezoid quadrature.
    fn predicted_blob_mse(n: usize, delta: f64) -> f64 {
        let d = 3.0;
        let nf = n as f64;
        let pi = std::f64::consts::PI;
        let phi = |var: f64, r2: f64| (2.0 * pi * var).powf(-0.5 * d) * (-0.5 * r2 / var).exp();
        let d2 = delta * delta;
        let psi0 = (2.0 * pi * d2).powf(-0.5 * d);
        let a = 0.5 * d2;
        let tau = a / (1.0 + a);
        let c0 = (4.0 * pi * d2).powf(-0.5 * d);
        let mse_at = |r: f64| -> f64 {
            let r2 = r * r;
            let s_star = -r / (1.0 + d2);
            let m = r / (1.0 + a);
            let shift = (m - r) / d2 - s_star;
            let var = c0 * phi(1.0 + a, r2) * (shift * shift + d * tau / (d2 * d2));
            let den = phi(1.0 + d2, r2) + psi0 / nf;
            (var / nf + (s_star * psi0 / nf).powi(2)) / (den * den)
        };
        let (rmax, steps) = (9.0, 20_000);
        let h = rmax / steps as f64;
        (0..=steps)
            .map(|k| {
                let r = k as f64 * h;
                let w = if k == 0 || k == steps { 0.5 } else { 1.0 };
                w * h * 4.0 * pi * r * r * phi(1.0, r * r) * mse_at(r)
            })
            .sum()
    }

    #[test]
    fn blob_score_matches_mollified_gaussian() {
        let n = 10_000;
        let delta = 0.4;
        let e = sample_random(&AnalyticDensity::standard(3), n, 2024).unwrap();
        let s = blob_score(&e, delta, Reduction::Fast).unwrap();
        let mse: f64 = s
            .iter()
            .zip(&e.velocities)
            .map(|(si, v)| norm2(&sub(si, &scale(v, -1.0 / (1.0 + delta * delta)))))
            .sum::<f64>()
            / n as f64;
        let predicted = predicted_blob_mse(n, delta);
        assert!(mse < 1.5 * predicted, "mse {mse} vs predicted {predicted}");
    }

    #[test]
    fn exact_score_has_zero_loss() {
        let f = AnalyticDensity::standard(3);
        let e = sample_random(&f, 200, 5).unwrap();
        let p = KernelParams::coulomb(0.0);
        let s = ScoreField::Analytic(f.clone());
        let l = score_matching_loss(&s, LossTarget::Particles(&e), Some(&s), &p, Reduction::Fast)
            .unwrap();
        assert!(l < 1e-12);
        assert!(matches!(
            score_matching_loss(&s, LossTarget::Particles(&e), None, &p, Reduction::Fast),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn constant_offset_loss_on_grid_scales_quadratically() {
        let f = AnalyticDensity::standard(3);
        let spec = GridSpec::new(3, 6.0, 21).unwrap();
        let g = GridDensity::from_analytic(spec, &f).unwrap();
        let p = KernelParams::coulomb(0.0);
        let conv = GridConvolver::new(spec, p);
        let base = ScoreField::Analytic(f);
        let c = OffsetField::Constant([0.1, 0.0, 0.0]);
        let loss = |off: &OffsetField| {
            score_matching_loss(
                &ScoreField::perturbed(base.clone(), off.clone()),
                LossTarget::Grid { density: &g, convolver: &conv },
                Some(&base),
                &p,
                Reduction::Fast,
            )
            .unwrap()
        };
        let l1 = loss(&c);
        let l2 = loss(&c.scaled(2.0));
        assert!(l1 > 0.0);
        assert!((l2 / l1 - 4.0).abs() < 1e-12);

        // Direct evaluation of ∫ cᵀ (A∗g) c g.
        let field = conv.convolve(&g.values);
        let q = spec.quadrature_weights();
        let direct: f64 = (0..spec.len())
            .map(|i| q[i] * g.values[i] * 0.01 * field.a[i][0][0])
            .sum();
        assert!((l1 - direct).abs() < 1e-12 * direct);
    }

    #[test]
    fn particle_loss_matches_grid_quadrature() {
        let f = AnalyticDensity::standard(3);
        let p = KernelParams::coulomb(0.0);
        let base = ScoreField::Analytic(f.clone());
        let s = ScoreField::perturbed(base.clone(), OffsetField::Constant([0.1, 0.0, 0.0]));
        let e = sample_random(&f, 10_000, 77).unwrap();
        let particle =
            score_matching_loss(&s, LossTarget::Particles(&e), Some(&base), &p, Reduction::Fast)
                .unwrap();
        let spec = GridSpec::new(3, 8.0, 48).unwrap();
        let g = GridDensity::from_analytic(spec, &f).unwrap();
        let conv = GridConvolver::new(spec, p);
        let grid = score_matching_loss(
            &s,
            LossTarget::Grid { density: &g, convolver: &conv },
            Some(&base),
            &p,
            Reduction::Fast,
        )
        .unwrap();
        assert!((particle - grid).abs() < 0.05 * grid, "{particle} vs {grid}");
    }

    #[test]
    fn loss_is_rotation_invariant() {
        let f = AnalyticDensity::gaussian(3, &[0.4, -0.2, 0.1], 1.2).unwrap();
        let p = KernelParams::coulomb(0.05);
        let e = sample_random(&f, 400, 3).unwrap();
        let c = [0.1, 0.05, -0.2];
        // 90° rotation about the z axis.
        let q: Mat3 = [[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]];
        let fr = f.rotated(&q);
        let er = ParticleEnsemble::new(
            3,
            e.velocities.iter().map(|v| mat_vec(&q, v)).collect(),
            e.weights.clone(),
        )
        .unwrap();
        let loss = |dens: &AnalyticDensity, ens: &ParticleEnsemble, off: Vec3| {
            let base = ScoreField::Analytic(dens.clone());
            let s = ScoreField::perturbed(base.clone(), OffsetField::Constant(off));
            score_matching_loss(&s, LossTarget::Particles(ens), Some(&base), &p, Reduction::Fast)
                .unwrap()
        };
        let l = loss(&f, &e, c);
        let lr = loss(&fr, &er, mat_vec(&q, &c));
        assert!((l - lr).abs() < 1e-12 * l);
    }

    #[test]
    fn blob_score_is_translation_equivariant() {
        let e = sample_random(&AnalyticDensity::standard(2), 100, 9).unwrap();
        let shift = [0.75, -0.5, 0.0];
        let es = ParticleEnsemble::new(
            2,
            e.velocities.iter().map(|v| add(v, &shift)).collect(),
            e.weights.clone(),
        )
        .unwrap();
        let s = blob_score(&e, 0.5, Reduction::Deterministic).unwrap();
        let ss = blob_score(&es, 0.5, Reduction::Deterministic).unwrap();
        for (a, b) in s.iter().zip(&ss) {
            assert!(norm2(&sub(a, b)).sqrt() < 1e-10);
            assert_eq!(a[2], 0.0);
        }
    }

    #[test]
    fn bandwidth_rule_shrinks_with_n() {
        assert!((bandwidth_rule(1.0, 1, 3) - 1.0).abs() < 1e-15);
        assert!((bandwidth_rule(1.0, 128, 3) - 0.5).abs() < 1e-12);
    }
}
