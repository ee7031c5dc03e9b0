use landau_core::certificate::{certify_run, CertifySetup, CoefficientSpec, RatioSource};
use landau_core::diagnostics::ParticleDiagOptions;
use landau_core::gridconv::GridConvolver;
use landau_core::oracle::{oracle_trajectory, pair_functionals};
use landau_core::sampling::{sample_lattice, sample_random};
use landau_core::score::{OffsetField, ScoreField};
use landau_core::transport::{conserved_quantities, IntegratorConfig, ParticleSolver, Scheme};
use landau_core::types::{AnalyticDensity, GaussianComponent, GridDensity, GridSpec, KernelParams};
use landau_core::Reduction;

fn bimaxwellian() -> AnalyticDensity {
    AnalyticDensity::mixture(
        3,
        vec![
            GaussianComponent { weight: 0.5, mean: vec![0.8, 0.0, 0.0], variance: 0.8 },
            GaussianComponent { weight: 0.5, mean: vec![-0.8, 0.0, 0.0], variance: 0.8 },
        ],
    )
    .unwrap()
}

#[test]
fn blob_run_conserves_mass_and_momentum() {
    let ens = sample_random(&bimaxwellian(), 400, 9).unwrap();
    let config = IntegratorConfig {
        scheme: Scheme::Heun,
        dt: 0.01,
        t_end: 0.1,
        score: ScoreField::Blob { bandwidth: 0.5 },
        params: KernelParams::coulomb(0.02),
        snapshot_stride: 1,
        reduction: Reduction::Deterministic,
    };
    let c0 = conserved_quantities(&ens);
    let mut solver = ParticleSolver::new(ens, config).unwrap();
    for _ in 0..10 {
        solver.advance().unwrap();
    }
    let c = conserved_quantities(solver.ensemble());
    assert_eq!(c.mass, c0.mass);
    for k in 0..3 {
        assert!((c.momentum[k] - c0.momentum[k]).abs() < 1e-13);
    }
    assert!(((c.energy - c0.energy) / c0.energy).abs() < 1e-6);
}

#[test]
fn oracle_keeps_maxwellian_nearly_fixed() {
    let spec = GridSpec::new(3, 7.0, 24).unwrap();
    let f0 = GridDensity::from_analytic(spec, &AnalyticDensity::standard(3)).unwrap();
    let conv = GridConvolver::new(spec, KernelParams::coulomb(0.0));
    let traj = oracle_trajectory(f0.clone(), &conv, &[0.0, 0.05], 0.1).unwrap();
    let f1 = &traj.states[1];
    assert!(traj.clipped_mass < 1e-12, "{}", traj.clipped_mass);
    assert!((f1.mass() - f0.mass()).abs() < 1e-12);
    let kl = pair_functionals(&f1.values, &f0.values, &spec, 1e-12).kl;
    assert!(kl < 1e-4, "{kl}");
}

fn lattice_setup(score: ScoreField) -> CertifySetup {
    let maxwellian = AnalyticDensity::standard(3);
    let lattice = GridSpec::new(3, 4.0, 8).unwrap();
    CertifySetup {
        ensemble: sample_lattice(&maxwellian, &lattice, 1e-8).unwrap(),
        integrator: IntegratorConfig {
            scheme: Scheme::Heun,
            dt: 0.02,
            t_end: 0.1,
            score,
            params: KernelParams::coulomb(0.05),
            snapshot_stride: 1,
            reduction: Reduction::Fast,
        },
        reference: ScoreField::Analytic(maxwellian),
        bandwidth: 0.6,
        grid: GridSpec::new(3, 6.0, 20).unwrap(),
        coefficient: CoefficientSpec::PaperForm { c: 1.0 },
        ratio_budget: 1e-2,
        support_floor: 1e-12,
        diagnostics: ParticleDiagOptions::new(0.6),
    }
}

#[test]
fn loss_free_twin_certificate_is_zero() {
    let setup = lattice_setup(ScoreField::Analytic(AnalyticDensity::standard(3)));
    let conv = GridConvolver::new(setup.grid, setup.integrator.params);
    let oracle = oracle_trajectory(setup.initial_grid().unwrap(), &conv, &setup.output_times(), 0.1).unwrap();
    let out = certify_run(&setup, RatioSource::Twin(&oracle)).unwrap();
    let r = &out.report;
    assert_eq!(r.kl0, 0.0);
    assert!(r.loss.iter().all(|l| *l == 0.0));
    assert!(r.bound.iter().all(|b| *b == 0.0));
    assert_eq!(out.record.times.len(), 6);
}

#[test]
fn constant_offset_bound_scales_with_its_square() {
    let base = ScoreField::Analytic(AnalyticDensity::standard(3));
    let bound = |a: f64| {
        let score = ScoreField::perturbed(base.clone(), OffsetField::Constant([a, 0.0, 0.0]));
        certify_run(&lattice_setup(score), RatioSource::Assumed(2.0)).unwrap().report
    };
    let (small, large) = (bound(0.1), bound(0.2));
    // Constant offsets cancel in the velocity field, so both runs move
    // identically and only the loss differs, by exactly a factor 4.
    for (a, b) in small.bound.iter().zip(&large.bound).skip(1) {
        assert!((b / a - 4.0).abs() < 1e-9, "{a} {b}");
    }
    assert!(small.valid && large.valid);
}
