//! Density representations shared by the solver, the oracle and the
//! certificate engine.
//!
//! Velocities are stored as `[f64; 3]` for both supported dimensions; in
//! two dimensions the third component is held at zero. Every kernel in
//! the crate is written so that a zero third component stays zero.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec3 = [f64; 3];
pub type Mat3 = [[f64; 3]; 3];

pub const ZERO3: Vec3 = [0.0; 3];
pub const ZERO_MAT3: Mat3 = [[0.0; 3]; 3];

#[inline]
pub fn dot(a: &Vec3, b: &Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

#[inline]
pub fn norm2(a: &Vec3) -> f64 {
    dot(a, a)
}

#[inline]
pub fn sub(a: &Vec3, b: &Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

#[inline]
pub fn add(a: &Vec3, b: &Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

#[inline]
pub fn scale(a: &Vec3, s: f64) -> Vec3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

#[inline]
pub fn mat_vec(m: &Mat3, v: &Vec3) -> Vec3 {
    [dot(&m[0], v), dot(&m[1], v), dot(&m[2], v)]
}

/// Quadratic form `vᵀ M v`.
#[inline]
pub fn quad_form(m: &Mat3, v: &Vec3) -> f64 {
    dot(v, &mat_vec(m, v))
}

/// Japanese bracket `sqrt(1 + |v|²)`.
#[inline]
pub fn bracket(v: &Vec3) -> f64 {
    (1.0 + norm2(v)).sqrt()
}

/// Pads a slice of length `dim` into a `Vec3`.
pub fn pad(dim: usize, xs: &[f64]) -> Result<Vec3> {
    if xs.len() != dim {
        return Err(Error::InvalidInput(format!(
            "expected a {dim}-vector, got length {}",
            xs.len()
        )));
    }
    let mut out = ZERO3;
    out[..dim].copy_from_slice(xs);
    Ok(out)
}

fn check_dim(dim: usize) -> Result<()> {
    if dim == 2 || dim == 3 {
        Ok(())
    } else {
        Err(Error::InvalidInput(format!("dimension must be 2 or 3, got {dim}")))
    }
}

/// A single invariant violation: which field, and which rule it broke.
#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    pub field: String,
    pub rule: String,
}

impl Violation {
    fn new(field: impl Into<String>, rule: impl Into<String>) -> Self {
        Self {
            field: field.into(),
            rule: rule.into(),
        }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {}", self.field, self.rule)
    }
}

/// Reports every broken invariant of an instance. Never mutates.
pub trait Validate {
    fn validate(&self) -> Vec<Violation>;
}

/// Dimension, exponent and regularization of the Landau kernel pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelParams {
    pub dim: usize,
    pub gamma: f64,
    pub epsilon: f64,
}

impl KernelParams {
    pub fn new(dim: usize, gamma: f64, epsilon: f64) -> Result<Self> {
        let p = Self { dim, gamma, epsilon };
        match p.validate().first() {
            None => Ok(p),
            Some(v) => Err(Error::InvalidInput(v.to_string())),
        }
    }

    /// The Coulomb case d = 3, γ = -3 with the given regularization.
    pub fn coulomb(epsilon: f64) -> Self {
        Self {
            dim: 3,
            gamma: -3.0,
            epsilon,
        }
    }

    pub fn is_coulomb(&self) -> bool {
        self.dim == 3 && self.gamma == -3.0
    }

    pub fn with_epsilon(self, epsilon: f64) -> Self {
        Self { epsilon, ..self }
    }
}

impl Validate for KernelParams {
    fn validate(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        if self.dim != 2 && self.dim != 3 {
            out.push(Violation::new("dim", format!("{} not in {{2, 3}}", self.dim)));
        }
        if !(self.gamma <= 0.0) {
            out.push(Violation::new("gamma", format!("{} > 0", self.gamma)));
        }
        if !(self.epsilon >= 0.0) || !self.epsilon.is_finite() {
            out.push(Violation::new("epsilon", format!("{} < 0", self.epsilon)));
        }
        out
    }
}

/// N weighted velocity points representing a probability density.
#[derive(Debug, Clone, PartialEq)]
pub struct ParticleEnsemble {
    pub dim: usize,
    pub velocities: Vec<Vec3>,
    pub weights: Vec<f64>,
    pub scores: Option<Vec<Vec3>>,
}

impl ParticleEnsemble {
    /// Builds an ensemble; only shapes are checked here, invariants are
    /// reported by [`Validate::validate`].
    pub fn new(dim: usize, velocities: Vec<Vec3>, weights: Vec<f64>) -> Result<Self> {
        check_dim(dim)?;
        if velocities.len() != weights.len() {
            return Err(Error::InvalidInput(format!(
                "{} velocities but {} weights",
                velocities.len(),
                weights.len()
            )));
        }
        Ok(Self {
            dim,
            velocities,
            weights,
            scores: None,
        })
    }

    /// Equal weights `1/N`.
    pub fn uniform(dim: usize, velocities: Vec<Vec3>) -> Result<Self> {
        let n = velocities.len();
        let w = if n == 0 { 0.0 } else { 1.0 / n as f64 };
        Self::new(dim, velocities, vec![w; n])
    }

    pub fn len(&self) -> usize {
        self.velocities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.velocities.is_empty()
    }

    pub fn with_scores(mut self, scores: Vec<Vec3>) -> Result<Self> {
        if scores.len() != self.len() {
            return Err(Error::InvalidInput(format!(
                "{} scores for {} particles",
                scores.len(),
                self.len()
            )));
        }
        self.scores = Some(scores);
        Ok(self)
    }

    /// Divides the weights by their sum.
    pub fn renormalized(mut self) -> Self {
        let total: f64 = self.weights.iter().sum();
        if total > 0.0 && total.is_finite() {
            for w in &mut self.weights {
                *w /= total;
            }
        }
        self
    }
}

impl Validate for ParticleEnsemble {
    fn validate(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        if self.dim != 2 && self.dim != 3 {
            out.push(Violation::new("dim", format!("{} not in {{2, 3}}", self.dim)));
        }
        if self.is_empty() {
            out.push(Violation::new("velocities", "N ≥ 1 violated (N = 0)"));
        }
        if self.velocities.len() != self.weights.len() {
            out.push(Violation::new(
                "weights",
                format!("length {} ≠ N = {}", self.weights.len(), self.velocities.len()),
            ));
        }
        if let Some(i) = self.weights.iter().position(|w| !(*w > 0.0) || !w.is_finite()) {
            out.push(Violation::new(
                "weights",
                format!("strictly positive violated at index {i}"),
            ));
        }
        let total: f64 = self.weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            out.push(Violation::new("weights", format!("sum {total} ≠ 1")));
        }
        for (i, v) in self.velocities.iter().enumerate() {
            if v.iter().any(|x| !x.is_finite()) {
                out.push(Violation::new(
                    "velocities",
                    format!("finite violated at index {i}"),
                ));
                break;
            }
            if v[self.dim.min(3)..].iter().any(|x| *x != 0.0) {
                out.push(Violation::new(
                    "velocities",
                    format!("padding components nonzero at index {i}"),
                ));
                break;
            }
        }
        if let Some(scores) = &self.scores {
            if scores.len() != self.velocities.len() {
                out.push(Violation::new(
                    "scores",
                    format!("length {} ≠ N = {}", scores.len(), self.velocities.len()),
                ));
            }
            if let Some(i) = scores.iter().position(|s| s.iter().any(|x| !x.is_finite())) {
                out.push(Violation::new("scores", format!("finite violated at index {i}")));
            }
        }
        out
    }
}

/// Uniform tensor grid on the box `[-L, L]^d` with `M` points per axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub dim: usize,
    pub half_width: f64,
    pub points_per_axis: usize,
}

impl GridSpec {
    pub fn new(dim: usize, half_width: f64, points_per_axis: usize) -> Result<Self> {
        check_dim(dim)?;
        if !(half_width > 0.0) || !half_width.is_finite() {
            return Err(Error::InvalidInput(format!(
                "half_width must be positive, got {half_width}"
            )));
        }
        if points_per_axis < 3 {
            return Err(Error::InvalidInput(format!(
                "points_per_axis must be at least 3, got {points_per_axis}"
            )));
        }
        Ok(Self {
            dim,
            half_width,
            points_per_axis,
        })
    }

    pub fn spacing(&self) -> f64 {
        2.0 * self.half_width / (self.points_per_axis - 1) as f64
    }

    pub fn len(&self) -> usize {
        self.points_per_axis.pow(self.dim as u32)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Axis coordinate of index `i`.
    #[inline]
    pub fn coord(&self, i: usize) -> f64 {
        -self.half_width + i as f64 * self.spacing()
    }

    /// Multi-index of a flat index; last axis varies fastest.
    #[inline]
    pub fn unflatten(&self, mut flat: usize) -> [usize; 3] {
        let m = self.points_per_axis;
        let mut idx = [0usize; 3];
        for axis in (0..self.dim).rev() {
            idx[axis] = flat % m;
            flat /= m;
        }
        idx
    }

    #[inline]
    pub fn flatten(&self, idx: &[usize; 3]) -> usize {
        let m = self.points_per_axis;
        let mut flat = 0;
        for &i in idx.iter().take(self.dim) {
            flat = flat * m + i;
        }
        flat
    }

    /// Index stride along `axis`.
    #[inline]
    pub fn stride(&self, axis: usize) -> usize {
        self.points_per_axis.pow((self.dim - 1 - axis) as u32)
    }

    pub fn node(&self, flat: usize) -> Vec3 {
        let idx = self.unflatten(flat);
        let mut v = ZERO3;
        for axis in 0..self.dim {
            v[axis] = self.coord(idx[axis]);
        }
        v
    }

    pub fn nodes(&self) -> Vec<Vec3> {
        (0..self.len()).map(|i| self.node(i)).collect()
    }

    /// One-dimensional trapezoid weight (1 inside, 1/2 at the ends).
    #[inline]
    pub fn axis_weight(&self, i: usize) -> f64 {
        if i == 0 || i + 1 == self.points_per_axis {
            0.5
        } else {
            1.0
        }
    }

    /// Trapezoid quadrature weights including the cell volume `h^d`.
    pub fn quadrature_weights(&self) -> Vec<f64> {
        let cell = self.spacing().powi(self.dim as i32);
        (0..self.len())
            .map(|flat| {
                let idx = self.unflatten(flat);
                (0..self.dim).map(|a| self.axis_weight(idx[a])).product::<f64>() * cell
            })
            .collect()
    }

    /// Trapezoid integral of nodal values.
    pub fn integrate(&self, values: &[f64]) -> f64 {
        let q = self.quadrature_weights();
        crate::sum::compensated_sum(q.iter().zip(values).map(|(w, f)| w * f))
    }

    /// Index of the node nearest to the box center.
    pub fn center_index(&self) -> usize {
        let c = self.points_per_axis / 2;
        self.flatten(&[c, c, c])
    }
}

/// Tensor-grid density values on a [`GridSpec`].
#[derive(Debug, Clone, PartialEq)]
pub struct GridDensity {
    pub spec: GridSpec,
    pub values: Vec<f64>,
    /// Allowed deviation of the quadrature mass from 1.
    pub mass_tolerance: f64,
}

pub const DEFAULT_MASS_TOLERANCE: f64 = 1e-3;

impl GridDensity {
    pub fn new(spec: GridSpec, values: Vec<f64>) -> Result<Self> {
        if values.len() != spec.len() {
            return Err(Error::InvalidInput(format!(
                "grid expects {} values, got {}",
                spec.len(),
                values.len()
            )));
        }
        Ok(Self {
            spec,
            values,
            mass_tolerance: DEFAULT_MASS_TOLERANCE,
        })
    }

    pub fn with_mass_tolerance(mut self, tol: f64) -> Self {
        self.mass_tolerance = tol;
        self
    }

    /// Samples an analytic density at the grid nodes.
    pub fn from_analytic(spec: GridSpec, density: &AnalyticDensity) -> Result<Self> {
        if spec.dim != density.dim {
            return Err(Error::InvalidInput(format!(
                "grid dimension {} ≠ density dimension {}",
                spec.dim, density.dim
            )));
        }
        let values = (0..spec.len()).map(|i| density.density(&spec.node(i))).collect();
        Self::new(spec, values)
    }

    pub fn mass(&self) -> f64 {
        self.spec.integrate(&self.values)
    }

    /// Rescales to unit quadrature mass.
    pub fn normalized(mut self) -> Self {
        let m = self.mass();
        if m > 0.0 && m.is_finite() {
            for v in &mut self.values {
                *v /= m;
            }
        }
        self
    }

    pub fn max_value(&self) -> f64 {
        self.values.iter().copied().fold(0.0, f64::max)
    }
}

impl Validate for GridDensity {
    fn validate(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        if self.values.len() != self.spec.len() {
            out.push(Violation::new(
                "values",
                format!("length {} ≠ M^d = {}", self.values.len(), self.spec.len()),
            ));
            return out;
        }
        if let Some(i) = self.values.iter().position(|v| !v.is_finite()) {
            out.push(Violation::new("values", format!("finite violated at index {i}")));
        }
        if let Some(i) = self.values.iter().position(|v| *v < 0.0) {
            out.push(Violation::new("values", format!("≥ 0 violated at index {i}")));
        }
        let mass = self.mass();
        if !((mass - 1.0).abs() <= self.mass_tolerance) {
            out.push(Violation::new(
                "values",
                format!(
                    "quadrature mass {mass} outside [1 - {tol}, 1 + {tol}]",
                    tol = self.mass_tolerance
                ),
            ));
        }
        out
    }
}

/// One isotropic Gaussian component `weight · N(mean, variance · I)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianComponent {
    pub weight: f64,
    pub mean: Vec<f64>,
    pub variance: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AnalyticKind {
    Gaussian,
    GaussianMixture,
}

/// Closed-form isotropic Gaussian or Gaussian mixture with exact score.
#[derive(Debug, Clone, PartialEq)]
pub struct AnalyticDensity {
    pub dim: usize,
    components: Vec<Component>,
}

#[derive(Debug, Clone, PartialEq)]
struct Component {
    weight: f64,
    log_weight: f64,
    mean: Vec3,
    variance: f64,
}

impl AnalyticDensity {
    pub fn gaussian(dim: usize, mean: &[f64], variance: f64) -> Result<Self> {
        Self::mixture(
            dim,
            vec![GaussianComponent {
                weight: 1.0,
                mean: mean.to_vec(),
                variance,
            }],
        )
    }

    /// Standard normal `N(0, I)`.
    pub fn standard(dim: usize) -> Self {
        Self::maxwellian(dim, 1.0)
    }

    /// Centered isotropic Gaussian `N(0, variance · I)`.
    pub fn maxwellian(dim: usize, variance: f64) -> Self {
        Self::gaussian(dim, &vec![0.0; dim], variance).expect("valid maxwellian")
    }

    pub fn mixture(dim: usize, components: Vec<GaussianComponent>) -> Result<Self> {
        check_dim(dim)?;
        if components.is_empty() {
            return Err(Error::InvalidInput("mixture needs at least one component".into()));
        }
        let total: f64 = components.iter().map(|c| c.weight).sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidInput(format!(
                "component weights sum to {total}, expected 1"
            )));
        }
        let mut out = Vec::with_capacity(components.len());
        for (k, c) in components.into_iter().enumerate() {
            if !(c.weight >= 0.0) {
                return Err(Error::InvalidInput(format!("component {k}: weight < 0")));
            }
            if !(c.variance > 0.0) || !c.variance.is_finite() {
                return Err(Error::InvalidInput(format!("component {k}: variance ≤ 0")));
            }
            let mean = pad(dim, &c.mean)?;
            if mean.iter().any(|x| !x.is_finite()) {
                return Err(Error::InvalidInput(format!("component {k}: non-finite mean")));
            }
            out.push(Component {
                weight: c.weight,
                log_weight: c.weight.ln(),
                mean,
                variance: c.variance,
            });
        }
        Ok(Self {
            dim,
            components: out,
        })
    }

    pub fn kind(&self) -> AnalyticKind {
        if self.components.len() == 1 {
            AnalyticKind::Gaussian
        } else {
            AnalyticKind::GaussianMixture
        }
    }

    pub fn components(&self) -> Vec<GaussianComponent> {
        self.components
            .iter()
            .map(|c| GaussianComponent {
                weight: c.weight,
                mean: c.mean[..self.dim].to_vec(),
                variance: c.variance,
            })
            .collect()
    }

    /// Largest component standard deviation.
    pub fn max_std(&self) -> f64 {
        self.components
            .iter()
            .map(|c| c.variance.sqrt())
            .fold(0.0, f64::max)
    }

    /// Largest distance of a component mean from the origin.
    pub fn max_mean_norm(&self) -> f64 {
        self.components
            .iter()
            .map(|c| norm2(&c.mean).sqrt())
            .fold(0.0, f64::max)
    }

    pub fn mean(&self) -> Vec3 {
        self.components
            .iter()
            .fold(ZERO3, |acc, c| add(&acc, &scale(&c.mean, c.weight)))
    }

    /// Total covariance trace.
    pub fn second_moment(&self) -> f64 {
        self.components
            .iter()
            .map(|c| c.weight * (self.dim as f64 * c.variance + norm2(&c.mean)))
            .sum()
    }

    fn component_log_terms(&self, v: &Vec3) -> impl Iterator<Item = (f64, &Component)> + '_ {
        let d = self.dim as f64;
        let v = *v;
        self.components.iter().filter(|c| c.weight > 0.0).map(move |c| {
            let r2 = norm2(&sub(&v, &c.mean));
            let log_phi = -0.5 * r2 / c.variance
                - 0.5 * d * (2.0 * std::f64::consts::PI * c.variance).ln();
            (c.log_weight + log_phi, c)
        })
    }

    pub fn log_density(&self, v: &Vec3) -> f64 {
        let terms: Vec<f64> = self.component_log_terms(v).map(|(l, _)| l).collect();
        log_sum_exp(&terms)
    }

    pub fn density(&self, v: &Vec3) -> f64 {
        self.log_density(v).exp()
    }

    /// Mixture responsibilities at `v` paired with components.
    fn responsibilities(&self, v: &Vec3) -> Vec<(f64, &Component)> {
        let terms: Vec<(f64, &Component)> = self.component_log_terms(v).collect();
        let max = terms.iter().map(|t| t.0).fold(f64::NEG_INFINITY, f64::max);
        let mut r: Vec<(f64, &Component)> =
            terms.iter().map(|(l, c)| ((l - max).exp(), *c)).collect();
        let total: f64 = r.iter().map(|t| t.0).sum();
        for t in &mut r {
            t.0 /= total;
        }
        r
    }

    /// Exact `∇ log f(v)`.
    pub fn score(&self, v: &Vec3) -> Result<Vec3> {
        let log_f = self.log_density(v);
        if !log_f.is_finite() {
            return Err(Error::DensityUnderflow {
                point: v[..self.dim].to_vec(),
            });
        }
        let mut s = ZERO3;
        for (r, c) in self.responsibilities(v) {
            let ds = scale(&sub(&c.mean, v), r / c.variance);
            s = add(&s, &ds);
        }
        Ok(s)
    }

    /// Exact `∇f(v)`.
    pub fn gradient(&self, v: &Vec3) -> Vec3 {
        let mut g = ZERO3;
        for (l, c) in self.component_log_terms(v) {
            let phi = l.exp();
            g = add(&g, &scale(&sub(&c.mean, v), phi / c.variance));
        }
        g
    }

    /// Exact Hessian `∇²f(v)`.
    pub fn hessian(&self, v: &Vec3) -> Mat3 {
        let mut h = ZERO_MAT3;
        for (l, c) in self.component_log_terms(v) {
            let phi = l.exp();
            let s = scale(&sub(&c.mean, v), 1.0 / c.variance);
            for a in 0..self.dim {
                for b in 0..self.dim {
                    let delta = if a == b { 1.0 / c.variance } else { 0.0 };
                    h[a][b] += phi * (s[a] * s[b] - delta);
                }
            }
        }
        h
    }

    /// Convolution with the isotropic Gaussian mollifier of width `delta`.
    pub fn mollified(&self, delta: f64) -> Self {
        let mut out = self.clone();
        for c in &mut out.components {
            c.variance += delta * delta;
        }
        out
    }

    /// Applies the orthogonal map `q` to the density.
    pub fn rotated(&self, q: &Mat3) -> Self {
        let mut out = self.clone();
        for c in &mut out.components {
            c.mean = mat_vec(q, &c.mean);
        }
        out
    }

    /// Closed-form KL divergence between two isotropic Gaussians.
    pub fn gaussian_kl(&self, other: &Self) -> Option<f64> {
        if self.components.len() != 1 || other.components.len() != 1 || self.dim != other.dim {
            return None;
        }
        let (a, b) = (&self.components[0], &other.components[0]);
        let d = self.dim as f64;
        let dm = norm2(&sub(&a.mean, &b.mean));
        Some(0.5 * (d * a.variance / b.variance + dm / b.variance - d + d * (b.variance / a.variance).ln()))
    }

    /// Closed-form `∫ f log f` for a single Gaussian.
    pub fn gaussian_neg_entropy(&self) -> Option<f64> {
        if self.components.len() != 1 {
            return None;
        }
        let d = self.dim as f64;
        let var = self.components[0].variance;
        Some(-0.5 * d * (1.0 + (2.0 * std::f64::consts::PI * var).ln()))
    }
}

impl Validate for AnalyticDensity {
    fn validate(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        let total: f64 = self.components.iter().map(|c| c.weight).sum();
        if (total - 1.0).abs() > 1e-12 {
            out.push(Violation::new("components", format!("weights sum {total} ≠ 1")));
        }
        for (k, c) in self.components.iter().enumerate() {
            if !(c.variance > 0.0) {
                out.push(Violation::new(
                    format!("components[{k}].variance"),
                    "σ² > 0 violated",
                ));
            }
        }
        out
    }
}

pub fn log_sum_exp(terms: &[f64]) -> f64 {
    let max = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + terms.iter().map(|t| (t - max).exp()).sum::<f64>().ln()
}

/// Per-time diagnostics of a particle or grid trajectory.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct DiagnosticRow {
    pub mass: f64,
    pub momentum: Vec3,
    pub energy: f64,
    pub entropy: f64,
    pub fisher: f64,
    pub lp_norms: Vec<(f64, f64)>,
    pub moments: Vec<(f64, f64)>,
    pub max_speed: f64,
    pub loss: Option<f64>,
}

/// Time series of diagnostics; one row per output time.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrajectoryRecord {
    pub dim: usize,
    /// Weight exponent `s` of the tracked Fisher information.
    pub fisher_weight: f64,
    pub times: Vec<f64>,
    pub rows: Vec<DiagnosticRow>,
}

impl TrajectoryRecord {
    pub fn new(dim: usize, fisher_weight: f64) -> Self {
        Self {
            dim,
            fisher_weight,
            ..Default::default()
        }
    }

    pub fn push(&mut self, t: f64, row: DiagnosticRow) {
        self.times.push(t);
        self.rows.push(row);
    }

    pub fn fisher_series(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.fisher).collect()
    }

    pub fn loss_series(&self) -> Option<Vec<f64>> {
        self.rows.iter().map(|r| r.loss).collect()
    }
}

impl Validate for TrajectoryRecord {
    fn validate(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        if self.times.len() != self.rows.len() {
            out.push(Violation::new(
                "rows",
                format!("{} rows for {} times", self.rows.len(), self.times.len()),
            ));
        }
        if let Some(i) = self.times.windows(2).position(|w| !(w[1] > w[0])) {
            out.push(Violation::new(
                "times",
                format!("strictly increasing violated at index {}", i + 1),
            ));
        }
        out
    }
}
