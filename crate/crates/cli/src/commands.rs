//! Subcommand drivers. Each reads a resolved [`Config`], writes its files
//! into the output directory and returns the in-memory results.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde_json::json;

use landau_core::analysis::{
    calibrate_c_abs, calibration_suite, coercivity_check, pinsker_check, verify_key_inequality,
    CoercivityReport, InequalityForm, InequalityReport, PinskerReport,
};
use landau_core::certificate::{
    certify_run, error_bound, CertMode, CertificateInput, CertificateReport, CertifySetup,
    CoefficientSpec, RatioSource,
};
use landau_core::diagnostics::{particle_diagnostics, solver_diagnostics, ParticleDiagOptions};
use landau_core::gridconv::GridConvolver;
use landau_core::oracle::{
    ensemble_to_grid, grid_diagnostics, oracle_trajectory, single_functionals, FunctionalOptions,
    OracleTrajectory, Sampled,
};
use landau_core::sampling::{random_mixture_pairs, sample_halton, sample_lattice, sample_random};
use landau_core::score::{blob_eval, ScoreField};
use landau_core::transport::{evaluate, IntegratorConfig, ParticleSolver};
use landau_core::types::{AnalyticDensity, GridDensity, GridSpec, ParticleEnsemble, TrajectoryRecord};
use landau_core::Reduction;

use crate::config::{density_from, CertifyMode, CoefficientKind, Config, ReferenceKind, Sampler};
use crate::output::{
    diagnostic_columns, diagnostic_values, fmt, header, read_snapshots, read_tsv_columns,
    SnapshotWriter, TsvWriter, TRAJECTORY_UNITS, VERSION,
};

/// Command-line values that take precedence over the config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub deterministic: bool,
    pub out: Option<PathBuf>,
    pub threads: Option<usize>,
}

/// Applies overrides and resolves every defaulted value.
pub fn prepare(mut cfg: Config, ov: &Overrides) -> Result<Config> {
    if let Some(s) = ov.seed {
        cfg.run.seed = s;
    }
    if ov.deterministic {
        cfg.run.deterministic = true;
    }
    if let Some(o) = &ov.out {
        cfg.run.output_dir = o.clone();
    }
    if let Some(t) = ov.threads {
        cfg.run.threads = t;
    }
    cfg.resolve()?;
    Ok(cfg)
}

pub fn reduction(cfg: &Config) -> Reduction {
    if cfg.run.deterministic {
        Reduction::Deterministic
    } else {
        Reduction::Fast
    }
}

fn output_dir(cfg: &Config) -> Result<PathBuf> {
    let dir = cfg.run.output_dir.clone();
    std::fs::create_dir_all(&dir).with_context(|| format!("cannot create {}", dir.display()))?;
    Ok(dir)
}

pub fn initial_ensemble(cfg: &Config) -> Result<ParticleEnsemble> {
    let f = cfg.initial_density()?;
    let n = cfg.initial.particles;
    Ok(match cfg.initial.sampler {
        Sampler::Random => sample_random(&f, n, cfg.run.seed)?,
        Sampler::Halton => sample_halton(&f, n)?,
        Sampler::Lattice => {
            let l = cfg.initial.lattice_half_width.context("initial.lattice_half_width unresolved")?;
            let m = cfg.initial.lattice_points.context("initial.lattice_points unresolved")?;
            sample_lattice(&f, &GridSpec::new(cfg.kernel.dim, l, m)?, cfg.initial.lattice_floor)?
        }
    })
}

pub fn integrator_config(cfg: &Config) -> Result<IntegratorConfig> {
    Ok(IntegratorConfig {
        scheme: cfg.scheme(),
        dt: cfg.integrator.dt,
        t_end: cfg.integrator.t_end,
        score: cfg.score_field()?,
        params: cfg.kernel_params()?,
        snapshot_stride: cfg.integrator.output_stride,
        reduction: reduction(cfg),
    })
}

pub fn diag_options(cfg: &Config) -> Result<ParticleDiagOptions> {
    Ok(ParticleDiagOptions {
        fisher_weight: cfg.diagnostics.fisher_weight,
        moment_weights: cfg.diagnostics.moments.clone(),
        lp_exponents: cfg.diagnostics.lp.clone(),
        entropy_bandwidth: cfg
            .diagnostics
            .entropy_bandwidth
            .context("diagnostics.entropy_bandwidth unresolved")?,
    })
}

pub fn functional_options(cfg: &Config) -> FunctionalOptions {
    FunctionalOptions {
        moment_weights: cfg.diagnostics.moments.clone(),
        fisher_weights: vec![cfg.diagnostics.fisher_weight],
        lp_exponents: cfg.diagnostics.lp.clone(),
        support_floor: cfg.grid.support_floor,
    }
}

fn trajectory_columns(cfg: &Config) -> Vec<String> {
    let mut c = diagnostic_columns(cfg);
    c.push("max_speed".into());
    c.push("loss".into());
    c
}

fn trajectory_row(t: f64, row: &landau_core::types::DiagnosticRow) -> Vec<f64> {
    let mut v = diagnostic_values(t, row);
    v.push(row.max_speed);
    v.push(row.loss.unwrap_or(f64::NAN));
    v
}

pub struct SimulateOutput {
    pub trajectory: PathBuf,
    pub snapshots: Option<PathBuf>,
    pub record: TrajectoryRecord,
    pub steps: usize,
}

/// Particle run with diagnostics every `output_stride` steps. A failed
/// step leaves the rows written so far on disk.
pub fn simulate(cfg: &Config) -> Result<SimulateOutput> {
    let dir = output_dir(cfg)?;
    let integrator = integrator_config(cfg)?;
    let n = integrator.n_steps();
    let stride = integrator.snapshot_stride;
    let opts = diag_options(cfg)?;
    let mut solver = ParticleSolver::new(initial_ensemble(cfg)?, integrator)?;
    let path = dir.join("trajectory.tsv");
    let head = header("trajectory/1", cfg, TRAJECTORY_UNITS)?;
    let mut tsv = TsvWriter::create(&path, &head, &trajectory_columns(cfg))?;
    let snap_path = dir.join("snapshots.jsonl");
    let mut snaps = if cfg.integrator.snapshots {
        Some(SnapshotWriter::create(&snap_path, cfg)?)
    } else {
        None
    };
    let mut record = TrajectoryRecord::new(cfg.kernel.dim, cfg.diagnostics.fisher_weight);
    for k in 0..=n {
        if k % stride == 0 || k == n {
            let t = solver.time();
            let row = solver_diagnostics(&mut solver, &opts, None)?;
            tsv.row(&trajectory_row(t, &row))?;
            if let Some(s) = snaps.as_mut() {
                let ens = solver.ensemble().clone();
                let scores = solver.field()?.scores.clone();
                s.write(t, &ens, &scores)?;
            }
            record.push(t, row);
        }
        if k < n {
            if let Err(e) = solver.advance() {
                tsv.flush()?;
                if let Some(s) = snaps.as_mut() {
                    s.flush()?;
                }
                bail!(
                    "step {} of {n} failed at t = {}: {e}; partial output flushed to {}",
                    k + 1,
                    solver.time(),
                    dir.display()
                );
            }
        }
    }
    tsv.flush()?;
    if let Some(s) = snaps.as_mut() {
        s.flush()?;
    }
    Ok(SimulateOutput {
        trajectory: path,
        snapshots: snaps.map(|_| snap_path),
        record,
        steps: n,
    })
}

pub struct OracleOutput {
    pub path: PathBuf,
    pub times: Vec<f64>,
    pub states: Vec<GridDensity>,
    pub clipped_mass: Vec<f64>,
}

/// Output times `0, Δ, 2Δ, …` ending exactly at `t_end`.
pub fn oracle_times(t_end: f64, interval: f64) -> Vec<f64> {
    let mut times = vec![0.0];
    let mut k = 1;
    while (k as f64) * interval < t_end - 1e-9 * t_end.max(1.0) {
        times.push(k as f64 * interval);
        k += 1;
    }
    if t_end > 0.0 {
        times.push(t_end);
    }
    times
}

/// Grid solver run from the initial density.
pub fn oracle(cfg: &Config) -> Result<OracleOutput> {
    let dir = output_dir(cfg)?;
    let spec = cfg.grid_spec()?;
    let convolver = GridConvolver::new(spec, cfg.kernel_params()?);
    let f0 = GridDensity::from_analytic(spec, &cfg.initial_density()?)?
        .with_mass_tolerance(cfg.grid.mass_tolerance);
    let interval = cfg.grid.output_interval.context("grid.output_interval unresolved")?;
    let times = oracle_times(cfg.integrator.t_end, interval);
    let opts = functional_options(cfg);
    let path = dir.join("oracle.tsv");
    let head = header("oracle/1", cfg, "as trajectory/1; clipped_mass [1]")?;
    let mut cols = diagnostic_columns(cfg);
    cols.push("clipped_mass".into());
    let mut tsv = TsvWriter::create(&path, &head, &cols)?;
    let mut out = OracleOutput {
        path: path.clone(),
        times: vec![],
        states: vec![],
        clipped_mass: vec![],
    };
    let mut state = f0;
    let mut clipped = 0.0;
    for (k, &t) in times.iter().enumerate() {
        if k > 0 {
            let seg = oracle_trajectory(state, &convolver, &[t - times[k - 1]], cfg.grid.c_stab)
                .with_context(|| format!("oracle failed before t = {t}; partial output in {}", path.display()))?;
            clipped += seg.clipped_mass;
            state = seg.states.into_iter().next().unwrap();
        }
        let mut row = diagnostic_values(t, &grid_diagnostics(&state, &opts));
        row.push(clipped);
        tsv.row(&row)?;
        out.times.push(t);
        out.states.push(state.clone());
        out.clipped_mass.push(clipped);
    }
    tsv.flush()?;
    Ok(out)
}

/// `C_abs` from the seeded calibration suite, or the configured value.
pub fn calibrated_c_abs(cfg: &Config) -> Result<f64> {
    if let Some(c) = cfg.certify.c_abs {
        return Ok(c);
    }
    let params = cfg.kernel_params()?;
    if !params.is_coulomb() {
        bail!("certify.c_abs: calibration needs d = 3 and γ = -3; set it explicitly");
    }
    let spec = GridSpec::new(3, 7.0, cfg.certify.calibration_points)?;
    let (c, _) = calibration_suite(spec, params.with_epsilon(0.0), cfg.certify.calibration_pairs, cfg.run.seed)?;
    log::info!("calibrated C_abs = {c:e}");
    Ok(c)
}

pub fn certify_setup(cfg: &Config, c_abs: Option<f64>) -> Result<CertifySetup> {
    let bandwidth = cfg.certify.bandwidth.context("certify.bandwidth unresolved")?;
    let reference = match cfg.certify.reference.context("certify.reference unresolved")? {
        ReferenceKind::Base => cfg.base_score()?,
        ReferenceKind::BlobHalf => ScoreField::Blob {
            bandwidth: 0.5 * bandwidth,
        },
    };
    let coefficient = match cfg.certify.coefficient {
        CoefficientKind::PaperForm => CoefficientSpec::PaperForm { c: cfg.certify.paper_c },
        CoefficientKind::Measured => CoefficientSpec::Measured {
            c_abs: match c_abs {
                Some(c) => c,
                None => calibrated_c_abs(cfg)?,
            },
        },
    };
    Ok(CertifySetup {
        ensemble: initial_ensemble(cfg)?,
        integrator: integrator_config(cfg)?,
        reference,
        bandwidth,
        grid: cfg.grid_spec()?,
        coefficient,
        ratio_budget: cfg.certify.ratio_budget,
        support_floor: cfg.grid.support_floor,
        diagnostics: diag_options(cfg)?,
    })
}

/// Grid oracle started from `ψ_δ ∗ ĝ_0`, recorded at the run's output
/// times.
pub fn twin_oracle(cfg: &Config, setup: &CertifySetup) -> Result<OracleTrajectory> {
    let convolver = GridConvolver::new(setup.grid, setup.integrator.params);
    let f0 = setup.initial_grid()?.with_mass_tolerance(cfg.grid.mass_tolerance);
    Ok(oracle_trajectory(f0, &convolver, &setup.output_times(), cfg.grid.c_stab)?)
}

pub struct CertifyOutput {
    pub report: CertificateReport,
    pub record: Option<TrajectoryRecord>,
    pub json: PathBuf,
    pub tsv: PathBuf,
}

pub fn certify(cfg: &Config) -> Result<CertifyOutput> {
    if cfg.certify.input.is_some() {
        return certify_from_file(cfg);
    }
    let setup = certify_setup(cfg, None)?;
    let oracle = match cfg.certify.mode {
        CertifyMode::Twin => Some(twin_oracle(cfg, &setup)?),
        _ => None,
    };
    certify_with(cfg, &setup, oracle.as_ref())
}

/// Certified run with a precomputed setup and, in twin mode, oracle.
pub fn certify_with(
    cfg: &Config,
    setup: &CertifySetup,
    oracle: Option<&OracleTrajectory>,
) -> Result<CertifyOutput> {
    let source = match (cfg.certify.mode, oracle) {
        (CertifyMode::Twin, Some(o)) => RatioSource::Twin(o),
        (CertifyMode::Twin, None) => bail!("twin mode needs an oracle trajectory"),
        (CertifyMode::SelfReference, _) => RatioSource::SelfReference,
        (CertifyMode::AssumedRatio, _) => RatioSource::Assumed(cfg.certify.assumed_ratio),
    };
    let outcome = certify_run(setup, source)?;
    let dir = output_dir(cfg)?;
    let head = header("trajectory/1", cfg, TRAJECTORY_UNITS)?;
    let mut tsv = TsvWriter::create(&dir.join("trajectory.tsv"), &head, &trajectory_columns(cfg))?;
    for (t, row) in outcome.record.times.iter().zip(&outcome.record.rows) {
        tsv.row(&trajectory_row(*t, row))?;
    }
    tsv.flush()?;
    let (json, tsv) = write_certificate(cfg, &dir, &outcome.report)?;
    Ok(CertifyOutput {
        report: outcome.report,
        record: Some(outcome.record),
        json,
        tsv,
    })
}

/// Certificate from the loss column of an earlier trajectory file.
fn certify_from_file(cfg: &Config) -> Result<CertifyOutput> {
    let input = cfg.certify.input.as_ref().unwrap();
    if cfg.certify.mode != CertifyMode::AssumedRatio {
        bail!("certify.input: post-processing needs certify.mode = \"assumed_ratio\"");
    }
    if cfg.certify.coefficient != CoefficientKind::PaperForm {
        bail!("certify.input: measured coefficients need the states; use coefficient = \"paper_form\"");
    }
    let cols = read_tsv_columns(input, &["t", "loss"])?;
    let (times, loss) = (cols[0].clone(), cols[1].clone());
    if let Some(k) = loss.iter().position(|l| !l.is_finite()) {
        bail!("{}: loss missing at t = {}", input.display(), times[k]);
    }
    let n = times.len();
    let r = cfg.certify.assumed_ratio;
    let c = cfg.certify.paper_c;
    let report = error_bound(CertificateInput {
        mode: CertMode::AssumedRatio,
        coefficient: times.iter().map(|t| c * (1.0 + t)).collect(),
        times,
        loss,
        ratio: vec![r; n],
        truncated_mass: vec![0.0; n],
        coefficient_mode: format!("paper_form(C={c})"),
        kl0: 0.0,
        c_abs: f64::NAN,
        ratio_budget: cfg.certify.ratio_budget,
        measured_kl: None,
        heuristics: vec![
            format!("‖f_t/g_t‖_∞ assumed ≤ {r}"),
            format!("loss read from {}", input.display()),
            "identical initial data assumed (kl0 = 0)".into(),
        ],
    })?;
    let dir = output_dir(cfg)?;
    let (json, tsv) = write_certificate(cfg, &dir, &report)?;
    Ok(CertifyOutput {
        report,
        record: None,
        json,
        tsv,
    })
}

fn write_certificate(cfg: &Config, dir: &Path, r: &CertificateReport) -> Result<(PathBuf, PathBuf)> {
    let json_path = dir.join("certificate.json");
    let last = |v: &Vec<f64>| v.last().copied().unwrap_or(f64::NAN);
    let doc = json!({
        "schema": "certificate/1",
        "version": VERSION,
        "seed": cfg.run.seed,
        "config_sha256": cfg.hash()?,
        "mode": r.mode.name(),
        "coefficient_mode": r.coefficient_mode,
        "c_abs": finite(r.c_abs),
        "kl0": r.kl0,
        "c_lin": finite(r.c_lin),
        "valid": r.valid,
        "invalid_reasons": r.invalid_reasons,
        "heuristics": r.heuristics,
        "final_bound": finite(r.final_bound()),
        "final_envelope": finite(last(&r.envelope)),
        "final_measured_kl": r.measured_kl.as_ref().map(last),
        "holds": r.holds(0.0),
    });
    std::fs::write(&json_path, serde_json::to_string_pretty(&doc)? + "\n")?;
    let tsv_path = dir.join("certificate.tsv");
    let head = header(
        "certificate/1",
        cfg,
        "t [time]; loss [velocity^gamma]; ratio [1]; truncated_mass [1]; coefficient [1/time]; \
         forcing [1/time]; integrated_rl [1]; bound [1]; envelope [1]; measured_kl [1]",
    )?;
    let cols: Vec<String> = [
        "t", "loss", "ratio", "truncated_mass", "coefficient", "forcing", "integrated_rl", "bound",
        "envelope", "measured_kl",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    let mut tsv = TsvWriter::create(&tsv_path, &head, &cols)?;
    for k in 0..r.times.len() {
        tsv.row(&[
            r.times[k],
            r.loss[k],
            r.ratio[k],
            r.truncated_mass[k],
            r.coefficient[k],
            r.forcing[k],
            r.integrated_rl[k],
            r.bound[k],
            r.envelope[k],
            r.measured_kl.as_ref().map_or(f64::NAN, |m| m[k]),
        ])?;
    }
    tsv.flush()?;
    Ok((json_path, tsv_path))
}

fn finite(x: f64) -> Option<f64> {
    x.is_finite().then_some(x)
}

pub struct VerifyRow {
    pub pair: usize,
    pub raw: InequalityReport,
    /// KL-form margin with the suite's calibrated `C_abs`; NaN outside
    /// the Coulomb case.
    pub kl_form_margin: f64,
    pub pinsker: PinskerReport,
    pub refined: Option<InequalityReport>,
    pub coercivity: CoercivityReport,
    pub refined_coercivity: Option<CoercivityReport>,
}

impl VerifyRow {
    /// Relative change of the raw margin under refinement.
    pub fn margin_change(&self) -> Option<f64> {
        self.refined
            .as_ref()
            .map(|r| (r.margin - self.raw.margin).abs() / self.raw.margin.abs())
    }
}

pub struct VerifyOutput {
    pub rows: Vec<VerifyRow>,
    pub c_abs: f64,
    pub margins: PathBuf,
    pub coercivity: PathBuf,
}

/// Explicit pairs followed by the seeded random ones.
pub fn verify_pairs(cfg: &Config) -> Result<Vec<(AnalyticDensity, AnalyticDensity)>> {
    let d = cfg.kernel.dim;
    let mut pairs = cfg
        .verify
        .pairs
        .iter()
        .map(|p| Ok((density_from(d, &p.f)?, density_from(d, &p.g)?)))
        .collect::<Result<Vec<_>>>()?;
    pairs.extend(random_mixture_pairs(d, cfg.verify.random_pairs, cfg.run.seed)?);
    Ok(pairs)
}

struct Resolution {
    spec: GridSpec,
    convolver: GridConvolver,
}

impl Resolution {
    fn new(cfg: &Config, points: usize) -> Result<Self> {
        let spec = GridSpec::new(cfg.kernel.dim, cfg.verify.half_width, points)?;
        Ok(Self {
            spec,
            convolver: GridConvolver::new(spec, cfg.kernel_params()?),
        })
    }

    fn evaluate(&self, cfg: &Config, f: &AnalyticDensity, g: &AnalyticDensity) -> Result<(InequalityReport, CoercivityReport, Sampled, Sampled)> {
        let sf = Sampled::from_analytic(self.spec, f)?;
        let sg = Sampled::from_analytic(self.spec, g)?;
        let raw = verify_key_inequality(&sf, &sg, &self.convolver, InequalityForm::Raw, f64::NAN, cfg.grid.support_floor)?;
        let gd = GridDensity::new(self.spec, sg.values.clone())?;
        let coe = coercivity_check(&gd, &self.convolver, cfg.verify.coercivity_radius, cfg.grid.support_floor)?;
        Ok((raw, coe, sf, sg))
    }
}

/// Key inequality, Pinsker and coercivity checks over a pair suite.
pub fn verify(cfg: &Config) -> Result<VerifyOutput> {
    let dir = output_dir(cfg)?;
    let base = Resolution::new(cfg, cfg.verify.points)?;
    let fine = match cfg.verify.refine_points {
        0 => None,
        m => Some(Resolution::new(cfg, m)?),
    };
    let coulomb = cfg.kernel_params()?.is_coulomb() && cfg.verify.kl_form;
    let mut rows = Vec::new();
    for (k, (f, g)) in verify_pairs(cfg)?.iter().enumerate() {
        let (raw, coercivity, sf, sg) = base.evaluate(cfg, f, g).with_context(|| format!("pair {k}"))?;
        let pinsker = pinsker_check(&sf.values, &sg.values, &base.spec, cfg.grid.support_floor);
        let (refined, refined_coercivity) = match &fine {
            Some(r) => {
                let (rep, coe, _, _) = r.evaluate(cfg, f, g).with_context(|| format!("pair {k} refined"))?;
                (Some(rep), Some(coe))
            }
            None => (None, None),
        };
        log::info!("pair {k}: margin {:e}", raw.margin);
        rows.push(VerifyRow {
            pair: k,
            raw,
            kl_form_margin: f64::NAN,
            pinsker,
            refined,
            coercivity,
            refined_coercivity,
        });
    }
    let c_abs = if coulomb {
        let reports: Vec<InequalityReport> = rows.iter().map(|r| r.raw.clone()).collect();
        let c = calibrate_c_abs(&reports);
        for r in &mut rows {
            let raw = &r.raw;
            r.kl_form_margin = -0.5 * raw.dissipation + c * raw.kl * raw.bracket - raw.lhs;
        }
        c
    } else {
        f64::NAN
    };

    let margins = dir.join("margins.tsv");
    let head = header("margins/1", cfg, "all integrals [velocity^gamma / time]; kl [1]; points [1]")?;
    let cols: Vec<String> = [
        "pair", "points", "lhs", "dissipation", "remainder_diffusion", "remainder_drift", "c_coe",
        "rhs", "margin", "kl", "bracket", "kl_form_margin", "pinsker_l2_margin", "pinsker_l1_margin",
        "refined_margin", "margin_change",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    let mut tsv = TsvWriter::create(&margins, &head, &cols)?;
    for r in &rows {
        let raw = &r.raw;
        tsv.row(&[
            r.pair as f64,
            base.spec.points_per_axis as f64,
            raw.lhs,
            raw.dissipation,
            raw.remainder_diffusion,
            raw.remainder_drift,
            raw.c_coe,
            raw.rhs,
            raw.margin,
            raw.kl,
            raw.bracket,
            r.kl_form_margin,
            r.pinsker.l2_margin,
            r.pinsker.l1_margin,
            r.refined.as_ref().map_or(f64::NAN, |x| x.margin),
            r.margin_change().unwrap_or(f64::NAN),
        ])?;
    }
    tsv.flush()?;

    let coercivity = dir.join("coercivity.tsv");
    let head = header("coercivity/1", cfg, "c_coe [1]; argmin_norm [velocity]")?;
    let cols: Vec<String> = ["pair", "points", "c_coe", "argmin_norm", "samples"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let mut tsv = TsvWriter::create(&coercivity, &head, &cols)?;
    for r in &rows {
        let fine_pts = fine.as_ref().map(|x| x.spec.points_per_axis);
        for (points, c) in [(Some(base.spec.points_per_axis), Some(&r.coercivity)), (fine_pts, r.refined_coercivity.as_ref())] {
            if let (Some(p), Some(c)) = (points, c) {
                let norm = c.argmin.iter().map(|x| x * x).sum::<f64>().sqrt();
                tsv.row(&[r.pair as f64, p as f64, c.c_coe, norm, c.samples as f64])?;
            }
        }
    }
    tsv.flush()?;
    Ok(VerifyOutput {
        rows,
        c_abs,
        margins,
        coercivity,
    })
}

pub struct DiagnoseOutput {
    pub path: PathBuf,
    pub rows: usize,
}

/// Recomputes diagnostics from a snapshot file, adding grid functionals
/// of the mollified ensemble.
pub fn diagnose(cfg: &Config) -> Result<DiagnoseOutput> {
    let dir = output_dir(cfg)?;
    let input = cfg
        .diagnose
        .input
        .clone()
        .unwrap_or_else(|| dir.join("snapshots.jsonl"));
    let snaps = read_snapshots(&input, cfg.kernel.dim)?;
    let opts = diag_options(cfg)?;
    let score = cfg.score_field()?;
    let params = cfg.kernel_params()?;
    let spec = cfg.grid_spec()?;
    let fopts = functional_options(cfg);
    let path = dir.join("diagnose.tsv");
    let head = header(
        "diagnose/1",
        cfg,
        &format!("{TRAJECTORY_UNITS}; grid_* as their particle counterparts; grid_h2_5 [density^2]"),
    )?;
    let mut cols = trajectory_columns(cfg);
    cols.pop();
    let s = cfg.diagnostics.fisher_weight;
    cols.extend(["grid_entropy".to_string(), format!("grid_fisher_{s}"), "grid_h2_5".to_string()]);
    let mut tsv = TsvWriter::create(&path, &head, &cols)?;
    for (t, ens) in &snaps {
        let field = evaluate(ens, &score, &params, reduction(cfg))?;
        let blob = blob_eval(ens, opts.entropy_bandwidth, reduction(cfg))?;
        let row = particle_diagnostics(ens, &field, &blob, &opts, None);
        let grid = ensemble_to_grid(ens, opts.entropy_bandwidth, &spec)?;
        let gf = single_functionals(&Sampled::from_grid(&grid), &fopts);
        let mut values = diagnostic_values(*t, &row);
        values.push(row.max_speed);
        values.extend([gf.entropy, gf.fisher[0].1, gf.h2_5]);
        tsv.row(&values)?;
    }
    tsv.flush()?;
    log::info!("diagnosed {} snapshots from {}", snaps.len(), input.display());
    Ok(DiagnoseOutput {
        path,
        rows: snaps.len(),
    })
}

/// One-line human summary of a certificate.
pub fn certificate_summary(r: &CertificateReport) -> String {
    let mut s = format!(
        "mode {} coefficient {} final bound {} envelope {}",
        r.mode.name(),
        r.coefficient_mode,
        fmt(r.final_bound()),
        fmt(r.envelope.last().copied().unwrap_or(f64::NAN)),
    );
    if let Some(m) = &r.measured_kl {
        s.push_str(&format!(" measured KL {}", fmt(*m.last().unwrap())));
    }
    if !r.valid {
        s.push_str(&format!(" INVALID: {}", r.invalid_reasons.join("; ")));
    }
    s
}
