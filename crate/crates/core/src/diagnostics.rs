//! Diagnostic rows of particle states: conserved quantities, regularized
//! entropy, weighted Fisher information, moments and `L^p` norms of the
//! mollified density.

use std::borrow::Cow;

use crate::error::Result;
use crate::score::{blob_eval, BlobEval};
use crate::sum::{NeumaierSum, Reduction};
use crate::transport::{conserved_quantities, max_speed, FieldEval, ParticleSolver};
use crate::types::{bracket, norm2, DiagnosticRow, ParticleEnsemble};

#[derive(Debug, Clone, PartialEq)]
pub struct ParticleDiagOptions {
    /// Weight exponent `s` of `I_s = Σ w_i ⟨v_i⟩^s |s_i|²`.
    pub fisher_weight: f64,
    pub moment_weights: Vec<f64>,
    /// Exponents `p` of `‖ψ_δ ∗ ĝ‖_p`; `f64::INFINITY` allowed.
    pub lp_exponents: Vec<f64>,
    /// Bandwidth `δ` of the mollified density used for entropy and `L^p`.
    pub entropy_bandwidth: f64,
}

impl ParticleDiagOptions {
    pub fn new(entropy_bandwidth: f64) -> Self {
        Self {
            fisher_weight: 3.0,
            moment_weights: vec![2.0, 3.0],
            lp_exponents: vec![2.0, f64::INFINITY],
            entropy_bandwidth,
        }
    }
}

fn weighted_sum(ws: &[f64], f: impl Fn(usize) -> f64) -> f64 {
    let mut acc = NeumaierSum::new();
    for (i, w) in ws.iter().enumerate() {
        acc.add(w * f(i));
    }
    acc.value()
}

/// Diagnostics of `ensemble` given its field and its mollified density.
///
/// The entropy is `Σ w_i log (ψ_δ ∗ ĝ)(v_i)` and `‖ψ_δ ∗ ĝ‖_p^p` is
/// estimated by `Σ w_i (ψ_δ ∗ ĝ)(v_i)^{p-1}`; the sup norm by the largest
/// value at a particle.
pub fn particle_diagnostics(
    ensemble: &ParticleEnsemble,
    field: &FieldEval,
    mollified: &BlobEval,
    opts: &ParticleDiagOptions,
    loss: Option<f64>,
) -> DiagnosticRow {
    let c = conserved_quantities(ensemble);
    let ws = &ensemble.weights;
    let vs = &ensemble.velocities;
    let dens = &mollified.densities;
    let fisher = weighted_sum(ws, |i| {
        bracket(&vs[i]).powf(opts.fisher_weight) * norm2(&field.scores[i])
    });
    let moments = opts
        .moment_weights
        .iter()
        .map(|&k| (k, weighted_sum(ws, |i| bracket(&vs[i]).powf(k))))
        .collect();
    let lp_norms = opts
        .lp_exponents
        .iter()
        .map(|&p| {
            let v = if p.is_infinite() {
                dens.iter().copied().fold(0.0, f64::max)
            } else {
                weighted_sum(ws, |i| dens[i].powf(p - 1.0)).powf(1.0 / p)
            };
            (p, v)
        })
        .collect();
    DiagnosticRow {
        mass: c.mass,
        momentum: c.momentum,
        energy: c.energy,
        entropy: mollified.entropy(ensemble),
        fisher,
        lp_norms,
        moments,
        max_speed: max_speed(&field.velocity),
        loss,
    }
}

/// Diagnostics of the solver's current state; the blob evaluation of the
/// field is reused when its bandwidth matches the entropy bandwidth.
pub fn solver_diagnostics(
    solver: &mut ParticleSolver,
    opts: &ParticleDiagOptions,
    loss: Option<f64>,
) -> Result<DiagnosticRow> {
    let reuse = solver.config.score.blob_bandwidth() == Some(opts.entropy_bandwidth);
    let reduction: Reduction = solver.config.reduction;
    let ensemble = solver.ensemble().clone();
    let field = solver.field()?;
    let mollified = match (&field.blob, reuse) {
        (Some(b), true) => Cow::Borrowed(b),
        _ => Cow::Owned(blob_eval(&ensemble, opts.entropy_bandwidth, reduction)?),
    };
    Ok(particle_diagnostics(&ensemble, field, &mollified, opts, loss))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sampling::sample_random;
    use crate::score::ScoreField;
    use crate::transport::{evaluate, IntegratorConfig, Scheme};
    use crate::types::{AnalyticDensity, KernelParams};
    use std::f64::consts::PI;

    #[test]
    fn gaussian_sample_diagnostics() {
        let f = AnalyticDensity::standard(3);
        let ens = sample_random(&f, 4000, 11).unwrap();
        let params = KernelParams::coulomb(0.05);
        let score = ScoreField::Analytic(f);
        let field = evaluate(&ens, &score, &params, Reduction::Fast).unwrap();
        let delta = 0.3;
        let blob = blob_eval(&ens, delta, Reduction::Fast).unwrap();
        let mut opts = ParticleDiagOptions::new(delta);
        opts.fisher_weight = 0.0;
        let row = particle_diagnostics(&ens, &field, &blob, &opts, Some(0.5));
        let s2 = 1.0 + delta * delta;
        // Radial quadrature of ∫ f log(ψ∗f + ψ_δ(0)/N); the self pair sits
        // inside every particle's density estimate.
        let g = |r: f64, var: f64| (2.0 * PI * var).powf(-1.5) * (-r * r / (2.0 * var)).exp();
        let self_term = g(0.0, delta * delta) / 4000.0;
        let h = 1e-3;
        let cross: f64 = (0..12_000)
            .map(|k| {
                let r = (k as f64 + 0.5) * h;
                4.0 * PI * r * r * g(r, 1.0) * (g(r, s2) + self_term).ln() * h
            })
            .sum();
        assert!((row.entropy - cross).abs() < 0.02, "{} {}", row.entropy, cross);
        assert!((row.fisher - 3.0).abs() < 0.15);
        assert!((row.energy - 1.5).abs() < 0.08);
        assert!((row.mass - 1.0).abs() < 1e-12);
        assert_eq!(row.loss, Some(0.5));
        assert!(row.max_speed < 1e-12);
        let sup = row.lp_norms[1].1;
        assert!((sup / (2.0 * PI * s2).powf(-1.5) - 1.0).abs() < 0.15);
        // Σ w_i (ψ∗ĝ)(v_i) ≈ ∫ f (ψ∗f) = N(0, (2 + δ²) I)(0), plus the self pair.
        let l2 = ((2.0 * PI * (1.0 + s2)).powf(-1.5) + self_term).sqrt();
        assert!((row.lp_norms[0].1 / l2 - 1.0).abs() < 0.05);
        assert_eq!(row.moments[0].0, 2.0);
        assert!((row.moments[0].1 - 4.0).abs() < 0.15);
    }

    #[test]
    fn solver_reuses_blob_when_bandwidths_match() {
        let f = AnalyticDensity::maxwellian(3, 1.5);
        let ens = sample_random(&f, 300, 2).unwrap();
        let config = IntegratorConfig {
            scheme: Scheme::Heun,
            dt: 0.01,
            t_end: 0.02,
            score: ScoreField::Blob { bandwidth: 0.5 },
            params: KernelParams::coulomb(0.1),
            snapshot_stride: 1,
            reduction: Reduction::Deterministic,
        };
        let mut solver = ParticleSolver::new(ens.clone(), config).unwrap();
        let a = solver_diagnostics(&mut solver, &ParticleDiagOptions::new(0.5), None).unwrap();
        let blob = blob_eval(&ens, 0.5, Reduction::Deterministic).unwrap();
        assert_eq!(a.entropy, blob.entropy(&ens));
        let b = solver_diagnostics(&mut solver, &ParticleDiagOptions::new(0.4), None).unwrap();
        assert_ne!(a.entropy, b.entropy);
        assert_eq!(a.fisher, b.fisher);
    }
}
