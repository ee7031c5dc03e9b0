//! Run configuration: TOML sections, environment overrides, defaults and
//! validation.

use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use landau_core::score::{bandwidth_rule, OffsetField, ScoreField};
use landau_core::transport::Scheme;
use landau_core::types::{AnalyticDensity, GaussianComponent, GridSpec, KernelParams, Mat3, Vec3};

/// Prefix of environment overrides: `LANDAU_CERT_<SECTION>__<KEY>=value`.
pub const ENV_PREFIX: &str = "LANDAU_CERT_";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    #[serde(default)]
    pub run: RunSection,
    #[serde(default)]
    pub kernel: KernelSection,
    pub initial: InitialSection,
    #[serde(default)]
    pub score: ScoreSection,
    #[serde(default)]
    pub integrator: IntegratorSection,
    #[serde(default)]
    pub grid: GridSection,
    #[serde(default)]
    pub diagnostics: DiagnosticsSection,
    #[serde(default)]
    pub certify: CertifySection,
    #[serde(default)]
    pub verify: VerifySection,
    #[serde(default)]
    pub diagnose: DiagnoseSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    pub seed: u64,
    /// Worker threads; 0 uses all cores.
    pub threads: usize,
    /// Fixed-order compensated reductions.
    pub deterministic: bool,
    pub output_dir: PathBuf,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            seed: 0,
            threads: 0,
            deterministic: false,
            output_dir: PathBuf::from("out"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KernelSection {
    pub dim: usize,
    pub gamma: f64,
    /// Regularization length; `0.1 N^{-1/3}` times the initial spread when
    /// absent.
    pub epsilon: Option<f64>,
}

impl Default for KernelSection {
    fn default() -> Self {
        Self {
            dim: 3,
            gamma: -3.0,
            epsilon: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComponentSpec {
    pub weight: f64,
    pub mean: Vec<f64>,
    pub variance: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sampler {
    Random,
    Halton,
    Lattice,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitialSection {
    pub components: Vec<ComponentSpec>,
    #[serde(default = "default_sampler")]
    pub sampler: Sampler,
    #[serde(default = "default_particles")]
    pub particles: usize,
    /// Lattice half-width; 4.5 times the initial spread when absent.
    #[serde(default)]
    pub lattice_half_width: Option<f64>,
    /// Lattice nodes per axis; `round(particles^{1/d})` when absent.
    #[serde(default)]
    pub lattice_points: Option<usize>,
    #[serde(default = "default_lattice_floor")]
    pub lattice_floor: f64,
}

fn default_sampler() -> Sampler {
    Sampler::Random
}
fn default_particles() -> usize {
    4096
}
fn default_lattice_floor() -> f64 {
    1e-8
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreKind {
    /// `∇ log(ψ_δ ∗ ĝ_t)` of the current ensemble.
    Blob,
    /// Exact score of the initial density, frozen in time.
    Analytic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OffsetKind {
    None,
    Constant,
    Linear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OffsetSection {
    pub kind: OffsetKind,
    pub vector: Vec<f64>,
    pub matrix: Vec<Vec<f64>>,
}

impl Default for OffsetSection {
    fn default() -> Self {
        Self {
            kind: OffsetKind::None,
            vector: vec![],
            matrix: vec![],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScoreSection {
    pub kind: ScoreKind,
    /// Blob bandwidth; `c N^{-1/(d+4)}` times the initial spread when absent.
    pub bandwidth: Option<f64>,
    pub bandwidth_constant: f64,
    pub offset: OffsetSection,
}

impl Default for ScoreSection {
    fn default() -> Self {
        Self {
            kind: ScoreKind::Blob,
            bandwidth: None,
            bandwidth_constant: 1.5,
            offset: OffsetSection::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SchemeName {
    Euler,
    Heun,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IntegratorSection {
    pub scheme: SchemeName,
    pub dt: f64,
    pub t_end: f64,
    /// Steps between output rows.
    pub output_stride: usize,
    /// Write per-particle snapshots at output times.
    pub snapshots: bool,
}

impl Default for IntegratorSection {
    fn default() -> Self {
        Self {
            scheme: SchemeName::Heun,
            dt: 1e-3,
            t_end: 1.0,
            output_stride: 100,
            snapshots: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridSection {
    /// Box half-width; 6 times the initial spread plus the largest mean
    /// norm when absent.
    pub half_width: Option<f64>,
    /// Nodes per axis; 48 in 3-d and 128 in 2-d when absent.
    pub points: Option<usize>,
    pub c_stab: f64,
    pub support_floor: f64,
    pub mass_tolerance: f64,
    /// Oracle output interval; the integrator output interval when absent.
    pub output_interval: Option<f64>,
}

impl Default for GridSection {
    fn default() -> Self {
        Self {
            half_width: None,
            points: None,
            c_stab: 0.1,
            support_floor: 1e-12,
            mass_tolerance: 1e-3,
            output_interval: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiagnosticsSection {
    pub fisher_weight: f64,
    pub moments: Vec<f64>,
    pub lp: Vec<f64>,
    /// Bandwidth of the mollified density behind entropy and `L^p`; the
    /// blob bandwidth rule when absent.
    pub entropy_bandwidth: Option<f64>,
}

impl Default for DiagnosticsSection {
    fn default() -> Self {
        Self {
            fisher_weight: 3.0,
            moments: vec![2.0, 3.0],
            lp: vec![2.0, f64::INFINITY],
            entropy_bandwidth: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CertifyMode {
    Twin,
    #[serde(rename = "self")]
    SelfReference,
    AssumedRatio,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReferenceKind {
    /// The unperturbed base of the run's score.
    Base,
    /// Blob score at half the representation bandwidth.
    BlobHalf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CoefficientKind {
    Measured,
    PaperForm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CertifySection {
    pub mode: CertifyMode,
    /// Reference score; `base` in twin mode and `blob_half` otherwise when
    /// absent.
    pub reference: Option<ReferenceKind>,
    pub coefficient: CoefficientKind,
    pub paper_c: f64,
    /// Absolute constant of the KL form; calibrated when absent.
    pub c_abs: Option<f64>,
    pub calibration_pairs: usize,
    pub calibration_points: usize,
    pub ratio_budget: f64,
    pub assumed_ratio: f64,
    /// Bandwidth of `ψ_δ ∗ ĝ_t`; the blob bandwidth when absent.
    pub bandwidth: Option<f64>,
    /// Trajectory file with a loss column to post-process instead of
    /// running (assumed-ratio mode only).
    pub input: Option<PathBuf>,
}

impl Default for CertifySection {
    fn default() -> Self {
        Self {
            mode: CertifyMode::Twin,
            reference: None,
            coefficient: CoefficientKind::Measured,
            paper_c: 1.0,
            c_abs: None,
            calibration_pairs: 12,
            calibration_points: 32,
            ratio_budget: 1e-6,
            assumed_ratio: 2.0,
            bandwidth: None,
            input: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairSpec {
    pub f: Vec<ComponentSpec>,
    pub g: Vec<ComponentSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VerifySection {
    /// Seeded random mixture pairs added to the explicit ones.
    pub random_pairs: usize,
    pub pairs: Vec<PairSpec>,
    pub points: usize,
    /// Second resolution for the refinement study; 0 disables it.
    pub refine_points: usize,
    pub half_width: f64,
    pub coercivity_radius: f64,
    pub kl_form: bool,
}

impl Default for VerifySection {
    fn default() -> Self {
        Self {
            random_pairs: 20,
            pairs: vec![],
            points: 48,
            refine_points: 0,
            half_width: 8.0,
            coercivity_radius: 4.0,
            kl_form: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiagnoseSection {
    /// Snapshot file written by `simulate`.
    pub input: Option<PathBuf>,
}

/// Applies `LANDAU_CERT_<SECTION>__<KEY>[__<KEY>...]=value` overrides.
/// Values parse as TOML scalars or arrays; anything else is a string.
pub fn apply_env_overrides(
    table: &mut toml::Table,
    vars: impl IntoIterator<Item = (String, String)>,
) -> Result<Vec<String>> {
    let mut applied = Vec::new();
    let mut vars: Vec<(String, String)> = vars
        .into_iter()
        .filter(|(k, _)| k.starts_with(ENV_PREFIX))
        .collect();
    vars.sort();
    for (key, raw) in vars {
        let path: Vec<String> = key[ENV_PREFIX.len()..]
            .split("__")
            .map(|s| s.to_ascii_lowercase())
            .collect();
        if path.iter().any(|p| p.is_empty()) {
            bail!("malformed override {key}");
        }
        let value = parse_value(&raw);
        let mut node = &mut *table;
        for seg in &path[..path.len() - 1] {
            let entry = node
                .entry(seg.clone())
                .or_insert_with(|| toml::Value::Table(toml::Table::new()));
            node = entry
                .as_table_mut()
                .ok_or_else(|| anyhow!("override {key}: {seg} is not a section"))?;
        }
        node.insert(path.last().unwrap().clone(), value);
        applied.push(path.join("."));
    }
    Ok(applied)
}

fn parse_value(raw: &str) -> toml::Value {
    match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap(),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

impl Config {
    /// Parses TOML text, applying environment overrides first.
    pub fn from_toml_with_env(
        text: &str,
        vars: impl IntoIterator<Item = (String, String)>,
    ) -> Result<Self> {
        let mut table: toml::Table = text.parse().context("config is not valid TOML")?;
        apply_env_overrides(&mut table, vars)?;
        let cfg: Config = serde_path_to_error::deserialize(toml::Value::Table(table))
            .map_err(|e| anyhow!("config schema violation at `{}`: {}", e.path(), e.inner()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        Self::from_toml_with_env(text, std::iter::empty())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("cannot read config {}", path.display()))?;
        Self::from_toml_with_env(&text, std::env::vars())
    }

    /// Checks value ranges; errors name the offending field.
    pub fn validate(&self) -> Result<()> {
        let d = self.kernel.dim;
        let mut errs = Vec::new();
        let mut check = |ok: bool, field: &str, rule: &str| {
            if !ok {
                errs.push(format!("{field}: {rule}"));
            }
        };
        check(d == 2 || d == 3, "kernel.dim", "must be 2 or 3");
        check(self.kernel.gamma <= 0.0, "kernel.gamma", "must be ≤ 0");
        check(
            self.kernel.epsilon.is_none_or(|e| e >= 0.0),
            "kernel.epsilon",
            "must be ≥ 0",
        );
        check(!self.initial.components.is_empty(), "initial.components", "must not be empty");
        for (k, c) in self.initial.components.iter().enumerate() {
            check(c.mean.len() == d, &format!("initial.components[{k}].mean"), "length must equal kernel.dim");
            check(c.variance > 0.0, &format!("initial.components[{k}].variance"), "must be > 0");
            check(c.weight >= 0.0, &format!("initial.components[{k}].weight"), "must be ≥ 0");
        }
        check(self.initial.particles > 0, "initial.particles", "must be > 0");
        check(
            self.score.bandwidth.is_none_or(|b| b > 0.0),
            "score.bandwidth",
            "must be > 0",
        );
        match self.score.offset.kind {
            OffsetKind::None => {}
            OffsetKind::Constant => check(
                self.score.offset.vector.len() == d,
                "score.offset.vector",
                "length must equal kernel.dim",
            ),
            OffsetKind::Linear => check(
                self.score.offset.matrix.len() == d
                    && self.score.offset.matrix.iter().all(|r| r.len() == d),
                "score.offset.matrix",
                "must be dim × dim",
            ),
        }
        check(self.integrator.dt > 0.0, "integrator.dt", "must be > 0");
        check(self.integrator.t_end >= 0.0, "integrator.t_end", "must be ≥ 0");
        check(self.integrator.output_stride > 0, "integrator.output_stride", "must be > 0");
        check(self.grid.half_width.is_none_or(|l| l > 0.0), "grid.half_width", "must be > 0");
        check(self.grid.points.is_none_or(|m| m >= 3), "grid.points", "must be ≥ 3");
        check(self.grid.c_stab > 0.0, "grid.c_stab", "must be > 0");
        check(self.grid.support_floor >= 0.0, "grid.support_floor", "must be ≥ 0");
        check(self.certify.assumed_ratio >= 1.0, "certify.assumed_ratio", "must be ≥ 1");
        check(self.certify.ratio_budget >= 0.0, "certify.ratio_budget", "must be ≥ 0");
        check(self.verify.points >= 3, "verify.points", "must be ≥ 3");
        if errs.is_empty() {
            Ok(())
        } else {
            bail!("config schema violation: {}", errs.join("; "))
        }
    }

    pub fn initial_density(&self) -> Result<AnalyticDensity> {
        density_from(self.kernel.dim, &self.initial.components)
    }

    /// Standard deviation scale of the initial density.
    pub fn spread(&self) -> Result<f64> {
        Ok(self.initial_density()?.max_std())
    }

    /// Fills every defaulted value so that the echoed config reproduces
    /// the run exactly.
    pub fn resolve(&mut self) -> Result<()> {
        let d = self.kernel.dim;
        let f = self.initial_density()?;
        let spread = f.max_std();
        if self.initial.sampler == Sampler::Lattice {
            let m = *self
                .initial
                .lattice_points
                .get_or_insert_with(|| (self.initial.particles as f64).powf(1.0 / d as f64).round() as usize);
            self.initial.lattice_half_width.get_or_insert(4.5 * spread + f.max_mean_norm());
            self.initial.particles = m.pow(d as u32);
        }
        let n = self.initial.particles;
        self.kernel
            .epsilon
            .get_or_insert(0.1 * (n as f64).powf(-1.0 / 3.0) * spread);
        let rule = bandwidth_rule(self.score.bandwidth_constant, n, d) * spread;
        self.score.bandwidth.get_or_insert(rule);
        self.diagnostics.entropy_bandwidth.get_or_insert(self.score.bandwidth.unwrap());
        self.grid.half_width.get_or_insert(6.0 * spread + f.max_mean_norm());
        self.grid.points.get_or_insert(if d == 3 { 48 } else { 128 });
        let out = self.integrator.dt * self.integrator.output_stride as f64;
        self.grid.output_interval.get_or_insert(out);
        self.certify.bandwidth.get_or_insert(self.score.bandwidth.unwrap());
        self.certify.reference.get_or_insert(match self.certify.mode {
            CertifyMode::Twin => ReferenceKind::Base,
            _ => ReferenceKind::BlobHalf,
        });
        self.validate()
    }

    pub fn kernel_params(&self) -> Result<KernelParams> {
        Ok(KernelParams::new(
            self.kernel.dim,
            self.kernel.gamma,
            self.kernel.epsilon.unwrap_or(0.0),
        )?)
    }

    pub fn grid_spec(&self) -> Result<GridSpec> {
        let l = self.grid.half_width.ok_or_else(|| anyhow!("grid.half_width unresolved"))?;
        let m = self.grid.points.ok_or_else(|| anyhow!("grid.points unresolved"))?;
        Ok(GridSpec::new(self.kernel.dim, l, m)?)
    }

    pub fn scheme(&self) -> Scheme {
        match self.integrator.scheme {
            SchemeName::Euler => Scheme::Euler,
            SchemeName::Heun => Scheme::Heun,
        }
    }

    /// The unperturbed score of the run.
    pub fn base_score(&self) -> Result<ScoreField> {
        Ok(match self.score.kind {
            ScoreKind::Blob => ScoreField::Blob {
                bandwidth: self.score.bandwidth.ok_or_else(|| anyhow!("score.bandwidth unresolved"))?,
            },
            ScoreKind::Analytic => ScoreField::Analytic(self.initial_density()?),
        })
    }

    pub fn score_field(&self) -> Result<ScoreField> {
        let base = self.base_score()?;
        let o = &self.score.offset;
        Ok(match o.kind {
            OffsetKind::None => base,
            OffsetKind::Constant => ScoreField::perturbed(base, OffsetField::Constant(pad3(&o.vector))),
            OffsetKind::Linear => {
                let mut m: Mat3 = [[0.0; 3]; 3];
                for (r, row) in o.matrix.iter().enumerate() {
                    m[r][..row.len()].copy_from_slice(row);
                }
                ScoreField::perturbed(base, OffsetField::Linear(m))
            }
        })
    }

    /// Canonical TOML of the (resolved) config.
    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    /// SHA-256 of the canonical TOML.
    pub fn hash(&self) -> Result<String> {
        let digest = Sha256::digest(self.to_toml()?.as_bytes());
        Ok(format!("{digest:x}"))
    }
}

fn pad3(xs: &[f64]) -> Vec3 {
    let mut v = [0.0; 3];
    v[..xs.len()].copy_from_slice(xs);
    v
}

pub fn density_from(dim: usize, comps: &[ComponentSpec]) -> Result<AnalyticDensity> {
    if let [c] = comps {
        return Ok(AnalyticDensity::gaussian(dim, &c.mean, c.variance)?);
    }
    let comps = comps
        .iter()
        .map(|c| GaussianComponent {
            weight: c.weight,
            mean: c.mean.clone(),
            variance: c.variance,
        })
        .collect();
    Ok(AnalyticDensity::mixture(dim, comps)?)
}
