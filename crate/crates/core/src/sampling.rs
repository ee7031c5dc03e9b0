//! Initial particle ensembles drawn from closed-form densities.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::types::{
    add, scale, AnalyticDensity, GaussianComponent, GridSpec, ParticleEnsemble, Vec3, ZERO3,
};

fn component_means(comps: &[GaussianComponent], dim: usize) -> Vec<Vec3> {
    comps
        .iter()
        .map(|c| {
            let mut m = ZERO3;
            m[..dim].copy_from_slice(&c.mean);
            m
        })
        .collect()
}

fn pick_component(comps: &[GaussianComponent], u: f64) -> usize {
    let mut acc = 0.0;
    for (k, c) in comps.iter().enumerate() {
        acc += c.weight;
        if u < acc {
            return k;
        }
    }
    comps.len() - 1
}

fn check_n(n: usize) -> Result<()> {
    if n == 0 {
        Err(Error::InvalidInput("particle count must be positive".into()))
    } else {
        Ok(())
    }
}

/// `n` iid samples with equal weights, reproducible from `seed`.
pub fn sample_random(density: &AnalyticDensity, n: usize, seed: u64) -> Result<ParticleEnsemble> {
    check_n(n)?;
    let dim = density.dim;
    let comps = density.components();
    let means = component_means(&comps, dim);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let vs = (0..n)
        .map(|_| {
            let k = if comps.len() == 1 {
                0
            } else {
                pick_component(&comps, rng.random::<f64>())
            };
            let sd = comps[k].variance.sqrt();
            let mut x = ZERO3;
            for xi in x.iter_mut().take(dim) {
                let z: f64 = rng.sample(StandardNormal);
                *xi = sd * z;
            }
            add(&means[k], &x)
        })
        .collect();
    ParticleEnsemble::uniform(dim, vs)
}

fn radical_inverse(mut i: u64, base: u64) -> f64 {
    let inv = 1.0 / base as f64;
    let mut f = inv;
    let mut out = 0.0;
    while i > 0 {
        out += f * (i % base) as f64;
        i /= base;
        f *= inv;
    }
    out
}

/// Low-discrepancy samples: Halton points pushed through the normal
/// inverse CDF, equal weights. Deterministic.
pub fn sample_halton(density: &AnalyticDensity, n: usize) -> Result<ParticleEnsemble> {
    check_n(n)?;
    const BASES: [u64; 4] = [2, 3, 5, 7];
    let dim = density.dim;
    let comps = density.components();
    let means = component_means(&comps, dim);
    let normal = Normal::standard();
    let mixture = comps.len() > 1;
    let vs = (1..=n as u64)
        .map(|i| {
            let mut axis_base = BASES.iter().copied();
            let k = if mixture {
                pick_component(&comps, radical_inverse(i, axis_base.next().unwrap()))
            } else {
                0
            };
            let sd = comps[k].variance.sqrt();
            let mut x = ZERO3;
            for xi in x.iter_mut().take(dim) {
                let u = radical_inverse(i, axis_base.next().unwrap());
                *xi = sd * normal.inverse_cdf(u);
            }
            add(&means[k], &x)
        })
        .collect();
    ParticleEnsemble::uniform(dim, vs)
}

/// Particles at the nodes of a tensor lattice, weighted by the density
/// times the trapezoid weight. Nodes with relative weight below
/// `floor` are dropped.
pub fn sample_lattice(
    density: &AnalyticDensity,
    spec: &GridSpec,
    floor: f64,
) -> Result<ParticleEnsemble> {
    if spec.dim != density.dim {
        return Err(Error::InvalidInput("lattice and density dimensions differ".into()));
    }
    let q = spec.quadrature_weights();
    let raw: Vec<(Vec3, f64)> = (0..spec.len())
        .map(|i| {
            let v = spec.node(i);
            (v, q[i] * density.density(&v))
        })
        .collect();
    let max = raw.iter().map(|r| r.1).fold(0.0, f64::max);
    let (vs, ws): (Vec<Vec3>, Vec<f64>) =
        raw.into_iter().filter(|(_, w)| *w > floor * max).unzip();
    Ok(ParticleEnsemble::new(density.dim, vs, ws)?.renormalized())
}

/// Seeded isotropic Gaussian mixture with one or two components, means in
/// `[-0.6, 0.6]^d` and variances in `[0.6, 1.4]`.
pub fn random_mixture(dim: usize, rng: &mut impl Rng) -> Result<AnalyticDensity> {
    let k = rng.random_range(1..=2usize);
    let w0 = if k == 1 { 1.0 } else { rng.random_range(0.25..0.75) };
    let comps = (0..k)
        .map(|j| GaussianComponent {
            weight: if j == 0 { w0 } else { 1.0 - w0 },
            mean: (0..dim).map(|_| rng.random_range(-0.6..0.6)).collect(),
            variance: rng.random_range(0.6..1.4),
        })
        .collect();
    AnalyticDensity::mixture(dim, comps)
}

/// `n` seeded pairs from [`random_mixture`].
pub fn random_mixture_pairs(
    dim: usize,
    n: usize,
    seed: u64,
) -> Result<Vec<(AnalyticDensity, AnalyticDensity)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| Ok((random_mixture(dim, &mut rng)?, random_mixture(dim, &mut rng)?)))
        .collect()
}

/// Sample mean of an ensemble, for tests and diagnostics.
pub fn ensemble_mean(e: &ParticleEnsemble) -> Vec3 {
    e.velocities
        .iter()
        .zip(&e.weights)
        .fold(ZERO3, |acc, (v, w)| add(&acc, &scale(v, *w)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::{norm2, Validate};

    #[test]
    fn random_samples_are_reproducible_and_valid() {
        let f = AnalyticDensity::standard(3);
        let a = sample_random(&f, 500, 42).unwrap();
        let b = sample_random(&f, 500, 42).unwrap();
        assert_eq!(a, b);
        assert!(a.validate().is_empty());
        assert_ne!(a, sample_random(&f, 500, 43).unwrap());
    }

    #[test]
    fn halton_moments_are_accurate() {
        let f = AnalyticDensity::gaussian(3, &[0.5, 0.0, -0.5], 1.5).unwrap();
        let e = sample_halton(&f, 4096).unwrap();
        let m = ensemble_mean(&e);
        assert!((m[0] - 0.5).abs() < 5e-3 && (m[2] + 0.5).abs() < 5e-3, "{m:?}");
        let second: f64 = e
            .velocities
            .iter()
            .map(|v| norm2(&[v[0] - 0.5, v[1], v[2] + 0.5]))
            .sum::<f64>()
            / 4096.0;
        assert!((second - 4.5).abs() < 0.05, "{second}");
    }

    #[test]
    fn lattice_ensemble_in_two_dimensions() {
        let f = AnalyticDensity::standard(2);
        let spec = GridSpec::new(2, 5.0, 21).unwrap();
        let e = sample_lattice(&f, &spec, 1e-12).unwrap();
        assert!(e.validate().is_empty());
        let m = ensemble_mean(&e);
        assert!(m[0].abs() < 1e-14 && m[1].abs() < 1e-14);
        assert!(e.velocities.iter().all(|v| v[2] == 0.0));
    }
}
