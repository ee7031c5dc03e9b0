//! A posteriori relative-entropy certificates: Grönwall integration of
//! measured coefficients and score-matching losses into KL bounds, and the
//! drivers that certify particle runs in twin, self and assumed-ratio modes.

use crate::analysis::kl_bracket;
use crate::diagnostics::{solver_diagnostics, ParticleDiagOptions};
use crate::error::{Error, Result};
use crate::kernel::conv_a_at_particles;
use crate::oracle::{ensemble_to_grid, pair_functionals, OracleTrajectory, Sampled};
use crate::score::{loss_from_parts, ScoreField};
use crate::transport::{IntegratorConfig, ParticleSolver};
use crate::types::{GridDensity, GridSpec, ParticleEnsemble, TrajectoryRecord};

// 8-point Gauss–Legendre rule on [-1, 1].
const GL_NODES: [f64; 4] = [
    0.183_434_642_495_649_8,
    0.525_532_409_916_329,
    0.796_666_477_413_626_7,
    0.960_289_856_497_536_3,
];
const GL_WEIGHTS: [f64; 4] = [
    0.362_683_783_378_362,
    0.313_706_645_877_887_3,
    0.222_381_034_453_374_5,
    0.101_228_536_290_376_3,
];

fn check_nonnegative(name: &'static str, xs: &[f64]) -> Result<()> {
    match xs.iter().position(|x| !(*x >= 0.0) || !x.is_finite()) {
        Some(index) => Err(Error::NegativeInput {
            name,
            index,
            value: xs[index],
        }),
        None => Ok(()),
    }
}

/// Solves `y' = c(t) y + F(t)`, `y(t_0) = kl0`, with `c` and `F` the
/// piecewise-linear interpolants of the series. On each interval the
/// integrating factor is exact; the forcing integral uses an 8-point
/// Gauss–Legendre rule, whose positive weights keep the map monotone in
/// `c`, `F` and `kl0`.
pub fn gronwall_integrate(kl0: f64, times: &[f64], c: &[f64], forcing: &[f64]) -> Result<Vec<f64>> {
    if times.len() != c.len() || times.len() != forcing.len() {
        return Err(Error::InvalidInput("series must share the time grid".into()));
    }
    if times.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::InvalidInput("times must be strictly increasing".into()));
    }
    check_nonnegative("kl0", &[kl0])?;
    check_nonnegative("coefficient", c)?;
    check_nonnegative("forcing", forcing)?;
    let mut out = Vec::with_capacity(times.len());
    let mut y = kl0;
    if !times.is_empty() {
        out.push(y);
    }
    for k in 1..times.len() {
        let h = times[k] - times[k - 1];
        let (c0, c1) = (c[k - 1], c[k]);
        let (f0, f1) = (forcing[k - 1], forcing[k]);
        // ∫_σ^h c for c linear on [0, h].
        let growth = |s: f64| c0 * (h - s) + (c1 - c0) * (h * h - s * s) / (2.0 * h);
        let mut integral = 0.0;
        for (x, w) in GL_NODES.iter().zip(&GL_WEIGHTS) {
            for s in [0.5 * h * (1.0 - x), 0.5 * h * (1.0 + x)] {
                let f = f0 + (f1 - f0) * s / h;
                integral += 0.5 * h * w * f * growth(s).exp();
            }
        }
        y = y * growth(0.0).exp() + integral;
        out.push(y);
    }
    Ok(out)
}

/// Growth coefficient `c(t)` of the stability estimate.
#[derive(Debug, Clone, PartialEq)]
pub enum CoefficientMode {
    /// `c(t) = C (1 + t)`.
    PaperForm { c: f64 },
    /// Measured series on its own time grid.
    Measured { times: Vec<f64>, values: Vec<f64> },
}

impl CoefficientMode {
    pub fn name(&self) -> &'static str {
        match self {
            CoefficientMode::PaperForm { .. } => "paper_form",
            CoefficientMode::Measured { .. } => "measured",
        }
    }
}

/// KL bound at `t_end` from `kl0` with zero forcing. Measured series are
/// integrated up to `t_end`, which must lie on their time range.
pub fn stability_bound(kl0: f64, mode: &CoefficientMode, t_end: f64) -> Result<f64> {
    if t_end == 0.0 {
        check_nonnegative("kl0", &[kl0])?;
        return Ok(kl0);
    }
    let (times, values) = match mode {
        CoefficientMode::PaperForm { c } => (vec![0.0, t_end], vec![*c, c * (1.0 + t_end)]),
        CoefficientMode::Measured { times, values } => {
            if times.len() != values.len() || times.first() != Some(&0.0) {
                return Err(Error::InvalidInput("measured series must start at t = 0".into()));
            }
            let last = *times.last().unwrap();
            if t_end > last * (1.0 + 1e-12) {
                return Err(Error::InvalidInput(format!(
                    "t_end {t_end} beyond the measured range {last}"
                )));
            }
            let mut ts = Vec::new();
            let mut vs = Vec::new();
            for (k, (&t, &v)) in times.iter().zip(values).enumerate() {
                if t < t_end {
                    ts.push(t);
                    vs.push(v);
                } else {
                    let (t0, v0) = (times[k - 1], values[k - 1]);
                    ts.push(t_end);
                    vs.push(v0 + (v - v0) * (t_end - t0) / (t - t0));
                    break;
                }
            }
            (ts, vs)
        }
    };
    let zeros = vec![0.0; times.len()];
    Ok(*gronwall_integrate(kl0, &times, &values, &zeros)?.last().unwrap())
}

/// How `‖f_t / g_t‖_∞` is obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CertMode {
    /// Measured against the grid oracle solution.
    Twin,
    /// Mollified ensemble against itself at half the bandwidth.
    SelfReference,
    /// Supplied by the user.
    AssumedRatio,
}

impl CertMode {
    pub fn name(&self) -> &'static str {
        match self {
            CertMode::Twin => "twin",
            CertMode::SelfReference => "self",
            CertMode::AssumedRatio => "assumed_ratio",
        }
    }
}

/// Measured series that feed a certificate.
#[derive(Debug, Clone, PartialEq)]
pub struct CertificateInput {
    pub mode: CertMode,
    pub times: Vec<f64>,
    /// `L(s_t, g_t, A∗g_t)`.
    pub loss: Vec<f64>,
    /// `R(t) ≈ ‖f_t / g_t‖_∞`.
    pub ratio: Vec<f64>,
    /// Mass of `f` outside the support set on which `R` was measured.
    pub truncated_mass: Vec<f64>,
    pub coefficient: Vec<f64>,
    pub coefficient_mode: String,
    pub kl0: f64,
    pub c_abs: f64,
    pub ratio_budget: f64,
    pub measured_kl: Option<Vec<f64>>,
    pub heuristics: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CertificateReport {
    pub mode: CertMode,
    pub coefficient_mode: String,
    pub c_abs: f64,
    pub kl0: f64,
    pub times: Vec<f64>,
    pub loss: Vec<f64>,
    pub ratio: Vec<f64>,
    pub truncated_mass: Vec<f64>,
    pub coefficient: Vec<f64>,
    /// `2 R(t) L(t)`.
    pub forcing: Vec<f64>,
    /// `∫_0^t R L` by the trapezoid rule.
    pub integrated_rl: Vec<f64>,
    /// Integrating-factor solution of `y' = c y + 2 R L`.
    pub bound: Vec<f64>,
    /// `C_lin = max c(t) / (1 + t)`.
    pub c_lin: f64,
    /// `e^{C_lin (t + t²/2)} (kl0 + 2 ∫_0^t R L)`, an upper envelope of
    /// `bound` in the shape of the `C e^{T²} ∫ R L` display.
    pub envelope: Vec<f64>,
    pub measured_kl: Option<Vec<f64>>,
    pub valid: bool,
    pub invalid_reasons: Vec<String>,
    pub heuristics: Vec<String>,
}

impl CertificateReport {
    pub fn final_bound(&self) -> f64 {
        self.bound.last().copied().unwrap_or(self.kl0)
    }

    /// Whether the measured KL stays below the bound at every time, with
    /// `tol` absolute slack.
    pub fn holds(&self, tol: f64) -> Option<bool> {
        self.measured_kl
            .as_ref()
            .map(|m| m.iter().zip(&self.bound).all(|(k, b)| *k <= b + tol))
    }
}

/// Assembles the sharp and envelope bounds from measured series.
pub fn error_bound(input: CertificateInput) -> Result<CertificateReport> {
    let n = input.times.len();
    if n == 0 {
        return Err(Error::Config("certificate needs a loss series".into()));
    }
    for (name, len) in [
        ("loss", input.loss.len()),
        ("ratio", input.ratio.len()),
        ("truncated_mass", input.truncated_mass.len()),
        ("coefficient", input.coefficient.len()),
    ] {
        if len != n {
            return Err(Error::InvalidInput(format!("{name} has {len} entries for {n} times")));
        }
    }
    check_nonnegative("loss", &input.loss)?;
    check_nonnegative("ratio", &input.ratio)?;
    let forcing: Vec<f64> = input.ratio.iter().zip(&input.loss).map(|(r, l)| 2.0 * r * l).collect();
    let bound = gronwall_integrate(input.kl0, &input.times, &input.coefficient, &forcing)?;
    let mut integrated_rl = vec![0.0; n];
    for k in 1..n {
        let h = input.times[k] - input.times[k - 1];
        integrated_rl[k] = integrated_rl[k - 1] + 0.25 * h * (forcing[k - 1] + forcing[k]);
    }
    let t0 = input.times[0];
    let c_lin = input
        .times
        .iter()
        .zip(&input.coefficient)
        .map(|(t, c)| c / (1.0 + (t - t0)))
        .fold(0.0, f64::max);
    let envelope = input
        .times
        .iter()
        .zip(&integrated_rl)
        .map(|(t, i)| {
            let s = t - t0;
            (c_lin * (s + 0.5 * s * s)).exp() * (input.kl0 + 2.0 * i)
        })
        .collect();
    let mut invalid_reasons = Vec::new();
    if let Some(k) = input.truncated_mass.iter().position(|m| *m > input.ratio_budget) {
        invalid_reasons.push(format!(
            "ratio truncation {:.3e} at t = {} exceeds budget {:.3e}",
            input.truncated_mass[k], input.times[k], input.ratio_budget
        ));
    }
    if input.ratio.iter().any(|r| !r.is_finite()) {
        invalid_reasons.push("ratio bound is not finite".into());
    }
    Ok(CertificateReport {
        mode: input.mode,
        coefficient_mode: input.coefficient_mode,
        c_abs: input.c_abs,
        kl0: input.kl0,
        times: input.times,
        loss: input.loss,
        ratio: input.ratio,
        truncated_mass: input.truncated_mass,
        coefficient: input.coefficient,
        forcing,
        integrated_rl,
        bound,
        c_lin,
        envelope,
        measured_kl: input.measured_kl,
        valid: invalid_reasons.is_empty(),
        invalid_reasons,
        heuristics: input.heuristics,
    })
}

/// How the twin driver obtains `c(t)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CoefficientSpec {
    PaperForm { c: f64 },
    /// `C_abs` times the KL-form bracket of `(f_t, g_t)` on the grid.
    Measured { c_abs: f64 },
}

/// Particle run certified against the grid oracle.
#[derive(Debug, Clone, PartialEq)]
pub struct CertifySetup {
    /// Initial particles `ĝ_0`.
    pub ensemble: ParticleEnsemble,
    pub integrator: IntegratorConfig,
    /// Stand-in for `∇ log g_t` in the loss.
    pub reference: ScoreField,
    /// Bandwidth `δ` of the grid representation `ψ_δ ∗ ĝ_t`.
    pub bandwidth: f64,
    pub grid: GridSpec,
    pub coefficient: CoefficientSpec,
    pub ratio_budget: f64,
    pub support_floor: f64,
    pub diagnostics: ParticleDiagOptions,
}

impl CertifySetup {
    /// `f_0 = ψ_δ ∗ ĝ_0` on the grid, so that `KL(f_0 ‖ g_0) = 0`.
    pub fn initial_grid(&self) -> Result<GridDensity> {
        ensemble_to_grid(&self.ensemble, self.bandwidth, &self.grid)
    }

    /// Output times `k · stride · dt` up to `t_end`.
    pub fn output_times(&self) -> Vec<f64> {
        let cfg = &self.integrator;
        let n = cfg.n_steps();
        (0..=n)
            .filter(|k| k % cfg.snapshot_stride == 0 || *k == n)
            .map(|k| k as f64 * cfg.dt)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutcome {
    pub report: CertificateReport,
    pub record: TrajectoryRecord,
}

/// Where `f_t` and the ratio bound come from.
#[derive(Debug, Clone, Copy)]
pub enum RatioSource<'a> {
    /// Grid oracle states at the run's output times.
    Twin(&'a OracleTrajectory),
    /// `ψ_{δ/2} ∗ ĝ_t` stands in for `f_t`.
    SelfReference,
    /// A user-supplied bound on `‖f_t / g_t‖_∞`; `f_t` is taken as `g_t`
    /// for measured coefficients.
    Assumed(f64),
}

impl RatioSource<'_> {
    pub fn mode(&self) -> CertMode {
        match self {
            RatioSource::Twin(_) => CertMode::Twin,
            RatioSource::SelfReference => CertMode::SelfReference,
            RatioSource::Assumed(_) => CertMode::AssumedRatio,
        }
    }
}

/// Runs the particle solver and builds the certificate at the setup's
/// output times.
pub fn certify_run(setup: &CertifySetup, source: RatioSource<'_>) -> Result<RunOutcome> {
    let times = setup.output_times();
    if let RatioSource::Twin(oracle) = source {
        if oracle.times.len() != times.len()
            || oracle.times.iter().zip(&times).any(|(a, b)| (a - b).abs() > 1e-9 * b.max(1.0))
        {
            return Err(Error::InvalidInput("oracle output times do not match the run".into()));
        }
    }
    if let RatioSource::Assumed(r) = source {
        if !(r >= 1.0) || !r.is_finite() {
            return Err(Error::InvalidInput(format!("assumed ratio must be ≥ 1, got {r}")));
        }
    }
    let cfg = &setup.integrator;
    let params = cfg.params;
    let spec = &setup.grid;
    let mut solver = ParticleSolver::new(setup.ensemble.clone(), cfg.clone())?;
    let mut record = TrajectoryRecord::new(cfg.params.dim, setup.diagnostics.fisher_weight);
    let mut series = Series::default();
    for (k, &t) in times.iter().enumerate() {
        while solver.steps() < (t / cfg.dt).round() as usize {
            solver.advance()?;
        }
        let ens = solver.ensemble().clone();
        let s = solver.field()?.scores.clone();
        let reference = match (&setup.reference, &solver.field()?.blob) {
            (ScoreField::Blob { bandwidth }, Some(b))
                if cfg.score.blob_bandwidth() == Some(*bandwidth) =>
            {
                b.scores.clone()
            }
            (r, _) => r.at_particles(&ens, cfg.reduction)?,
        };
        let a = conv_a_at_particles(&ens, &params);
        let loss = loss_from_parts(&ens.weights, &s, &reference, &a);
        record.push(t, solver_diagnostics(&mut solver, &setup.diagnostics, Some(loss))?);

        let g = ensemble_to_grid(&ens, setup.bandwidth, spec)?;
        let f = match source {
            RatioSource::Twin(oracle) => Some(oracle.states[k].clone()),
            RatioSource::SelfReference => Some(ensemble_to_grid(&ens, 0.5 * setup.bandwidth, spec)?),
            RatioSource::Assumed(_) => None,
        };
        let f_ref = f.as_ref().unwrap_or(&g);
        let (ratio, truncated, kl) = match source {
            RatioSource::Assumed(r) => (r, 0.0, None),
            _ => {
                let pf = pair_functionals(&f_ref.values, &g.values, spec, setup.support_floor);
                (pf.sup_ratio, pf.truncated_mass, Some(pf.kl.max(0.0)))
            }
        };
        let coefficient = match setup.coefficient {
            CoefficientSpec::PaperForm { c } => c * (1.0 + t),
            CoefficientSpec::Measured { c_abs } => {
                c_abs * kl_bracket(&Sampled::from_grid(f_ref), &Sampled::from_grid(&g))
            }
        };
        series.loss.push(loss);
        series.ratio.push(ratio);
        series.truncated.push(truncated);
        series.coefficient.push(coefficient);
        if let Some(kl) = kl {
            series.kl.push(kl);
        }
    }
    let (coefficient_mode, c_abs) = match setup.coefficient {
        CoefficientSpec::PaperForm { c } => (format!("paper_form(C={c})"), f64::NAN),
        CoefficientSpec::Measured { c_abs } => ("measured".to_string(), c_abs),
    };
    let mut heuristics = vec![
        format!("g_t represented by ψ_δ ∗ ĝ_t with δ = {} on a {}-point grid", setup.bandwidth, spec.points_per_axis),
        format!("∇log g_t replaced by the {} reference score", setup.reference.kind()),
        format!("support floor {:e} for ratios and KL", setup.support_floor),
    ];
    let (kl0, measured_kl) = match source {
        RatioSource::Twin(_) => {
            heuristics.insert(0, "f_t from the grid oracle".into());
            (series.kl[0], Some(series.kl))
        }
        RatioSource::SelfReference => {
            heuristics.insert(0, "f_t replaced by ψ_{δ/2} ∗ ĝ_t; ratio measured against it".into());
            heuristics.push("identical initial data assumed (kl0 = 0)".into());
            (0.0, None)
        }
        RatioSource::Assumed(r) => {
            heuristics.insert(0, format!("‖f_t/g_t‖_∞ assumed ≤ {r}; f_t replaced by g_t in the coefficient"));
            heuristics.push("identical initial data assumed (kl0 = 0)".into());
            (0.0, None)
        }
    };
    let report = error_bound(CertificateInput {
        mode: source.mode(),
        times,
        loss: series.loss,
        ratio: series.ratio,
        truncated_mass: series.truncated,
        coefficient: series.coefficient,
        coefficient_mode,
        kl0,
        c_abs,
        ratio_budget: setup.ratio_budget,
        measured_kl,
        heuristics,
    })?;
    Ok(RunOutcome { report, record })
}

#[derive(Default)]
struct Series {
    loss: Vec<f64>,
    ratio: Vec<f64>,
    truncated: Vec<f64>,
    coefficient: Vec<f64>,
    kl: Vec<f64>,
}
