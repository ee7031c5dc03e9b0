//! Grid-quadrature reference solver and integral functionals.
//!
//! The grid equation is `∂_t f = ∇·((A∗f)∇f − (b∗f)f)` in conservative
//! form: fluxes live on cell faces, boundary faces carry no flux and the
//! half cells at the box boundary are divided by their trapezoid weight, so
//! the quadrature mass telescopes exactly.

use log::debug;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::gridconv::{ConvField, GridConvolver};
use crate::sum::NeumaierSum;
use crate::types::{
    bracket, norm2, AnalyticDensity, DiagnosticRow, GridDensity, GridSpec, Mat3, ParticleEnsemble,
    Vec3, ZERO3, ZERO_MAT3,
};

/// Default parabolic stability constant of [`grid_step`].
pub const DEFAULT_C_STAB: f64 = 0.1;
/// Relative floor defining the support set `{f > floor · max f}`.
pub const DEFAULT_SUPPORT_FLOOR: f64 = 1e-12;

/// Central difference of nodal values along `axis`, one-sided at the ends.
fn axis_derivative(spec: &GridSpec, values: &[f64], flat: usize, axis: usize) -> f64 {
    let m = spec.points_per_axis;
    let h = spec.spacing();
    let i = spec.unflatten(flat)[axis];
    let s = spec.stride(axis);
    if i == 0 {
        (values[flat + s] - values[flat]) / h
    } else if i + 1 == m {
        (values[flat] - values[flat - s]) / h
    } else {
        (values[flat + s] - values[flat - s]) / (2.0 * h)
    }
}

fn gradient_field(spec: &GridSpec, values: &[f64]) -> Vec<Vec3> {
    (0..spec.len())
        .into_par_iter()
        .map(|i| {
            let mut g = ZERO3;
            for (axis, gk) in g.iter_mut().enumerate().take(spec.dim) {
                *gk = axis_derivative(spec, values, i, axis);
            }
            g
        })
        .collect()
}

/// `∇·((A∗f)∇f − (b∗f)f)` at every node, given the convolutions of `values`.
pub fn grid_rhs_with(spec: &GridSpec, values: &[f64], conv: &ConvField) -> Vec<f64> {
    let dim = spec.dim;
    let h = spec.spacing();
    let m = spec.points_per_axis;
    let grad = gradient_field(spec, values);
    let mut rhs = vec![0.0; spec.len()];
    for axis in 0..dim {
        let s = spec.stride(axis);
        // Flux through the face between node `a` and `a + e_axis`.
        let flux: Vec<f64> = (0..spec.len())
            .into_par_iter()
            .map(|a| {
                if spec.unflatten(a)[axis] + 1 == m {
                    return 0.0;
                }
                let b = a + s;
                let mut df = ZERO3;
                for (l, dl) in df.iter_mut().enumerate().take(dim) {
                    *dl = if l == axis {
                        (values[b] - values[a]) / h
                    } else {
                        0.5 * (grad[a][l] + grad[b][l])
                    };
                }
                let mut diffusion = 0.0;
                for (l, dl) in df.iter().enumerate().take(dim) {
                    diffusion += 0.5 * (conv.a[a][axis][l] + conv.a[b][axis][l]) * dl;
                }
                let drift = 0.5 * (conv.b[a][axis] + conv.b[b][axis]) * 0.5 * (values[a] + values[b]);
                diffusion - drift
            })
            .collect();
        for (i, r) in rhs.iter_mut().enumerate() {
            let k = spec.unflatten(i)[axis];
            let out = flux[i];
            let inn = if k > 0 { flux[i - s] } else { 0.0 };
            *r += (out - inn) / (h * spec.axis_weight(k));
        }
    }
    rhs
}

/// Landau right-hand side on the grid.
pub fn grid_rhs(density: &GridDensity, convolver: &GridConvolver) -> Vec<f64> {
    let conv = convolver.convolve(&density.values);
    grid_rhs_with(&density.spec, &density.values, &conv)
}

fn frobenius(a: &Mat3) -> f64 {
    a.iter().flatten().map(|x| x * x).sum::<f64>().sqrt()
}

/// Largest stable step `c_stab h² / max ‖A∗f‖`.
pub fn stable_dt(spec: &GridSpec, conv: &ConvField, c_stab: f64) -> f64 {
    let amax = conv.a.iter().map(frobenius).fold(0.0, f64::max);
    let h = spec.spacing();
    if amax > 0.0 {
        c_stab * h * h / amax
    } else {
        f64::INFINITY
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridStepOutcome {
    pub density: GridDensity,
    /// Quadrature mass removed by clipping negative values.
    pub clipped_mass: f64,
}

/// One explicit Heun step of the grid equation.
pub fn grid_step(
    density: &GridDensity,
    convolver: &GridConvolver,
    dt: f64,
    c_stab: f64,
) -> Result<GridStepOutcome> {
    if dt == 0.0 {
        return Ok(GridStepOutcome {
            density: density.clone(),
            clipped_mass: 0.0,
        });
    }
    if !(dt > 0.0) || !dt.is_finite() {
        return Err(Error::InvalidInput(format!("dt must be ≥ 0, got {dt}")));
    }
    let spec = &density.spec;
    let f0 = &density.values;
    let conv0 = convolver.convolve(f0);
    let limit = stable_dt(spec, &conv0, c_stab);
    if dt > limit {
        return Err(Error::UnstableTimeStep {
            dt,
            suggested: limit,
        });
    }
    heun_from(density, convolver, &conv0, dt)
}

fn heun_from(
    density: &GridDensity,
    convolver: &GridConvolver,
    conv0: &ConvField,
    dt: f64,
) -> Result<GridStepOutcome> {
    let spec = &density.spec;
    let f0 = &density.values;
    let k1 = grid_rhs_with(spec, f0, conv0);
    let f1: Vec<f64> = f0.iter().zip(&k1).map(|(f, k)| f + dt * k).collect();
    let conv1 = convolver.convolve(&f1);
    let k2 = grid_rhs_with(spec, &f1, &conv1);
    let mut values: Vec<f64> = f0
        .iter()
        .zip(k1.iter().zip(&k2))
        .map(|(f, (a, b))| f + 0.5 * dt * (a + b))
        .collect();
    let q = spec.quadrature_weights();
    let mut clipped = NeumaierSum::new();
    for (v, w) in values.iter_mut().zip(&q) {
        if *v < 0.0 {
            clipped.add(-*v * w);
            *v = 0.0;
        }
    }
    let clipped_mass = clipped.value();
    if clipped_mass > 0.0 {
        debug!("grid step clipped mass {clipped_mass:.3e}");
    }
    let mut out = GridDensity::new(*spec, values)?;
    out.mass_tolerance = density.mass_tolerance;
    Ok(GridStepOutcome {
        density: out,
        clipped_mass,
    })
}

/// Heun step of size `min(dt_max, stable limit)`; returns the size used.
pub fn grid_step_adaptive(
    density: &GridDensity,
    convolver: &GridConvolver,
    dt_max: f64,
    c_stab: f64,
) -> Result<(GridStepOutcome, f64)> {
    if !(dt_max > 0.0) || !dt_max.is_finite() {
        return Err(Error::InvalidInput(format!("dt must be > 0, got {dt_max}")));
    }
    let conv0 = convolver.convolve(&density.values);
    let dt = dt_max.min(stable_dt(&density.spec, &conv0, c_stab));
    Ok((heun_from(density, convolver, &conv0, dt)?, dt))
}

/// Grid states at prescribed output times.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleTrajectory {
    pub times: Vec<f64>,
    pub states: Vec<GridDensity>,
    pub clipped_mass: f64,
    pub steps: usize,
}

/// Runs the grid solver from `initial` and records it at each of the
/// increasing `times` (the first may be 0). Step sizes follow the
/// stability limit and land exactly on every output time.
pub fn oracle_trajectory(
    initial: GridDensity,
    convolver: &GridConvolver,
    times: &[f64],
    c_stab: f64,
) -> Result<OracleTrajectory> {
    if times.windows(2).any(|w| !(w[1] > w[0])) || times.first().is_some_and(|t| *t < 0.0) {
        return Err(Error::InvalidInput("output times must be increasing and ≥ 0".into()));
    }
    let mut state = initial;
    let mut t = 0.0;
    let mut out = OracleTrajectory {
        times: Vec::with_capacity(times.len()),
        states: Vec::with_capacity(times.len()),
        clipped_mass: 0.0,
        steps: 0,
    };
    for &target in times {
        while target - t > 1e-12 * target.max(1.0) {
            let (step, dt) = grid_step_adaptive(&state, convolver, target - t, c_stab)?;
            state = step.density;
            out.clipped_mass += step.clipped_mass;
            out.steps += 1;
            t = if dt == target - t { target } else { t + dt };
        }
        out.times.push(target);
        out.states.push(state.clone());
    }
    Ok(out)
}

/// Explicit grid run with a fixed step.
pub struct GridSolver {
    convolver: GridConvolver,
    density: GridDensity,
    dt: f64,
    c_stab: f64,
    steps: usize,
    clipped_mass: f64,
}

impl GridSolver {
    pub fn new(density: GridDensity, convolver: GridConvolver, dt: f64, c_stab: f64) -> Result<Self> {
        if density.spec != *convolver.spec() {
            return Err(Error::InvalidInput("density and convolver grids differ".into()));
        }
        Ok(Self {
            convolver,
            density,
            dt,
            c_stab,
            steps: 0,
            clipped_mass: 0.0,
        })
    }

    pub fn density(&self) -> &GridDensity {
        &self.density
    }

    pub fn convolver(&self) -> &GridConvolver {
        &self.convolver
    }

    pub fn time(&self) -> f64 {
        self.steps as f64 * self.dt
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    /// Total quadrature mass removed by clipping so far.
    pub fn clipped_mass(&self) -> f64 {
        self.clipped_mass
    }

    pub fn advance(&mut self) -> Result<()> {
        let out = grid_step(&self.density, &self.convolver, self.dt, self.c_stab)?;
        self.density = out.density;
        self.clipped_mass += out.clipped_mass;
        self.steps += 1;
        Ok(())
    }
}

/// Density with first and second derivatives and score at the grid nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct Sampled {
    pub spec: GridSpec,
    pub values: Vec<f64>,
    pub gradient: Vec<Vec3>,
    pub hessian: Vec<Mat3>,
    /// `∇ log f`; zero where `f` vanishes.
    pub score: Vec<Vec3>,
}

impl Sampled {
    /// Exact values and derivatives of a closed-form density.
    pub fn from_analytic(spec: GridSpec, density: &AnalyticDensity) -> Result<Self> {
        if spec.dim != density.dim {
            return Err(Error::InvalidInput("grid and density dimensions differ".into()));
        }
        let nodes = spec.nodes();
        let values = nodes.par_iter().map(|v| density.density(v)).collect();
        let gradient = nodes.par_iter().map(|v| density.gradient(v)).collect();
        let hessian = nodes.par_iter().map(|v| density.hessian(v)).collect();
        let score = nodes
            .par_iter()
            .map(|v| density.score(v).unwrap_or(ZERO3))
            .collect();
        Ok(Self {
            spec,
            values,
            gradient,
            hessian,
            score,
        })
    }

    /// Central-difference derivatives of grid values. The score is the
    /// difference quotient of `log f` where the stencil is positive.
    pub fn from_grid(density: &GridDensity) -> Self {
        let spec = density.spec;
        let values = density.values.clone();
        let gradient = gradient_field(&spec, &values);
        let hessian: Vec<Mat3> = (0..spec.len())
            .into_par_iter()
            .map(|i| {
                let mut hm = ZERO_MAT3;
                for c in 0..spec.dim {
                    for r in 0..spec.dim {
                        hm[r][c] = axis_derivative_of(&spec, &gradient, i, r, c);
                    }
                }
                // Symmetrize the mixed differences.
                for r in 0..spec.dim {
                    for c in (r + 1)..spec.dim {
                        let s = 0.5 * (hm[r][c] + hm[c][r]);
                        hm[r][c] = s;
                        hm[c][r] = s;
                    }
                }
                hm
            })
            .collect();
        let logs: Vec<f64> = values
            .iter()
            .map(|&f| if f > 0.0 { f.ln() } else { f64::NAN })
            .collect();
        let score = (0..spec.len())
            .into_par_iter()
            .map(|i| {
                if !(values[i] > 0.0) {
                    return ZERO3;
                }
                let mut s = ZERO3;
                for (axis, sk) in s.iter_mut().enumerate().take(spec.dim) {
                    let d = axis_derivative(&spec, &logs, i, axis);
                    *sk = if d.is_finite() {
                        d
                    } else {
                        gradient[i][axis] / values[i]
                    };
                }
                s
            })
            .collect();
        Self {
            spec,
            values,
            gradient,
            hessian,
            score,
        }
    }

    pub fn max_value(&self) -> f64 {
        self.values.iter().copied().fold(0.0, f64::max)
    }
}

/// `∂_axis` of component `comp` of a vector field.
fn axis_derivative_of(spec: &GridSpec, field: &[Vec3], flat: usize, axis: usize, comp: usize) -> f64 {
    let m = spec.points_per_axis;
    let h = spec.spacing();
    let i = spec.unflatten(flat)[axis];
    let s = spec.stride(axis);
    if i == 0 {
        (field[flat + s][comp] - field[flat][comp]) / h
    } else if i + 1 == m {
        (field[flat][comp] - field[flat - s][comp]) / h
    } else {
        (field[flat + s][comp] - field[flat - s][comp]) / (2.0 * h)
    }
}

/// Which single-density functionals to evaluate.
#[derive(Debug, Clone, PartialEq)]
pub struct FunctionalOptions {
    pub moment_weights: Vec<f64>,
    pub fisher_weights: Vec<f64>,
    /// Exponents `p`; `f64::INFINITY` gives the sup norm.
    pub lp_exponents: Vec<f64>,
    pub support_floor: f64,
}

impl Default for FunctionalOptions {
    fn default() -> Self {
        Self {
            moment_weights: vec![2.0, 3.0],
            fisher_weights: vec![0.0, 3.0],
            lp_exponents: vec![2.0, f64::INFINITY],
            support_floor: DEFAULT_SUPPORT_FLOOR,
        }
    }
}

/// Quadrature values of the single-density functionals.
#[derive(Debug, Clone, PartialEq)]
pub struct SingleFunctionals {
    pub mass: f64,
    pub momentum: Vec3,
    /// `½ ∫ |v|² f`.
    pub energy: f64,
    /// `∫ f log f` over the support set.
    pub entropy: f64,
    /// `(s, ∫ ⟨v⟩^s f)`.
    pub moments: Vec<(f64, f64)>,
    /// `(s, ∫ f ⟨v⟩^s |∇ log f|²)`.
    pub fisher: Vec<(f64, f64)>,
    /// `(p, ‖f‖_p)`.
    pub lp_norms: Vec<(f64, f64)>,
    /// `∫ (|∇²f|² + |∇f|² + f²) ⟨v⟩^10`.
    pub h2_5: f64,
    /// `‖f ⟨v⟩³‖₂`.
    pub weighted_l2_3: f64,
}

pub fn single_functionals(f: &Sampled, opts: &FunctionalOptions) -> SingleFunctionals {
    let spec = &f.spec;
    let q = spec.quadrature_weights();
    let floor = opts.support_floor * f.max_value();
    let nodes = spec.nodes();
    let integrate = |g: &dyn Fn(usize) -> f64| -> f64 {
        let mut acc = NeumaierSum::new();
        for (i, w) in q.iter().enumerate() {
            acc.add(w * g(i));
        }
        acc.value()
    };
    let fv = &f.values;
    let mass = integrate(&|i| fv[i]);
    let mut momentum = ZERO3;
    for (k, mk) in momentum.iter_mut().enumerate().take(spec.dim) {
        *mk = integrate(&|i| fv[i] * nodes[i][k]);
    }
    let energy = integrate(&|i| 0.5 * norm2(&nodes[i]) * fv[i]);
    let entropy = integrate(&|i| if fv[i] > floor { fv[i] * fv[i].ln() } else { 0.0 });
    let moments = opts
        .moment_weights
        .iter()
        .map(|&s| (s, integrate(&|i| bracket(&nodes[i]).powf(s) * fv[i])))
        .collect();
    let fisher = opts
        .fisher_weights
        .iter()
        .map(|&s| {
            (
                s,
                integrate(&|i| {
                    if fv[i] > floor {
                        fv[i] * bracket(&nodes[i]).powf(s) * norm2(&f.score[i])
                    } else {
                        0.0
                    }
                }),
            )
        })
        .collect();
    let lp_norms = opts
        .lp_exponents
        .iter()
        .map(|&p| {
            if p.is_infinite() {
                (p, f.max_value())
            } else {
                (p, integrate(&|i| fv[i].max(0.0).powf(p)).powf(1.0 / p))
            }
        })
        .collect();
    let h2_5 = integrate(&|i| {
        let hs: f64 = f.hessian[i].iter().flatten().map(|x| x * x).sum();
        (hs + norm2(&f.gradient[i]) + fv[i] * fv[i]) * bracket(&nodes[i]).powi(10)
    });
    let weighted_l2_3 = integrate(&|i| (fv[i] * bracket(&nodes[i]).powi(3)).powi(2)).sqrt();
    SingleFunctionals {
        mass,
        momentum,
        energy,
        entropy,
        moments,
        fisher,
        lp_norms,
        h2_5,
        weighted_l2_3,
    }
}

/// Quadrature values of the two-density functionals.
#[derive(Debug, Clone, PartialEq)]
pub struct PairFunctionals {
    /// `∫ (f log(f/g) − f + g)` over the support set; equals `KL(f‖g)` for
    /// unit-mass densities and is nonnegative term by term.
    pub kl: f64,
    /// `‖f − g‖₂²`.
    pub l2_sq: f64,
    /// `‖f − g‖₁`.
    pub l1: f64,
    /// `max f/g` over the support set.
    pub sup_ratio: f64,
    /// Mass of `f` where `g` is below its floor; excluded from `kl` and
    /// `sup_ratio`.
    pub truncated_mass: f64,
}

pub fn pair_functionals(f: &[f64], g: &[f64], spec: &GridSpec, support_floor: f64) -> PairFunctionals {
    let q = spec.quadrature_weights();
    let fmax = f.iter().copied().fold(0.0, f64::max);
    let gmax = g.iter().copied().fold(0.0, f64::max);
    let (ffl, gfl) = (support_floor * fmax, support_floor * gmax);
    let mut kl = NeumaierSum::new();
    let mut l2 = NeumaierSum::new();
    let mut l1 = NeumaierSum::new();
    let mut trunc = NeumaierSum::new();
    let mut sup: f64 = 0.0;
    for i in 0..q.len() {
        let (fi, gi) = (f[i], g[i]);
        l2.add(q[i] * (fi - gi) * (fi - gi));
        l1.add(q[i] * (fi - gi).abs());
        if fi > ffl {
            if gi > gfl {
                kl.add(q[i] * (fi * (fi / gi).ln() - fi + gi));
                sup = sup.max(fi / gi);
            } else {
                trunc.add(q[i] * fi);
            }
        } else if gi > gfl {
            kl.add(q[i] * gi);
        }
    }
    let truncated_mass = trunc.value();
    if truncated_mass > 0.0 {
        debug!("support truncation excluded mass {truncated_mass:.3e}");
    }
    PairFunctionals {
        kl: kl.value(),
        l2_sq: l2.value(),
        l1: l1.value(),
        sup_ratio: sup,
        truncated_mass,
    }
}

/// Normalized Gaussian weights `φ_δ(x_i − c)` on one axis with cutoff.
fn axis_kernel(spec: &GridSpec, c: f64, delta: f64) -> (usize, Vec<f64>) {
    let h = spec.spacing();
    let m = spec.points_per_axis;
    let reach = 9.0 * delta;
    let lo = (((c - reach) + spec.half_width) / h).floor().max(0.0) as usize;
    let hi = ((((c + reach) + spec.half_width) / h).ceil().max(0.0) as usize).min(m - 1);
    let norm = 1.0 / ((2.0 * std::f64::consts::PI).sqrt() * delta);
    let w = if lo > hi {
        vec![]
    } else {
        (lo..=hi)
            .map(|i| {
                let x = spec.coord(i) - c;
                norm * (-x * x / (2.0 * delta * delta)).exp()
            })
            .collect()
    };
    (lo, w)
}

/// Kernel density estimate `ψ_δ ∗ ĝ` on the grid, renormalized to unit
/// quadrature mass. Contributions beyond nine bandwidths are dropped.
pub fn ensemble_to_grid(ensemble: &ParticleEnsemble, delta: f64, spec: &GridSpec) -> Result<GridDensity> {
    if !(delta > 0.0) {
        return Err(Error::InvalidInput(format!("bandwidth must be positive, got {delta}")));
    }
    if ensemble.dim != spec.dim {
        return Err(Error::InvalidInput("ensemble and grid dimensions differ".into()));
    }
    let dim = spec.dim;
    let mut values = vec![0.0; spec.len()];
    for (v, w) in ensemble.velocities.iter().zip(&ensemble.weights) {
        let ks: Vec<(usize, Vec<f64>)> = (0..dim).map(|k| axis_kernel(spec, v[k], delta)).collect();
        if ks.iter().any(|(_, w)| w.is_empty()) {
            continue;
        }
        if dim == 2 {
            for (a, wa) in ks[0].1.iter().enumerate() {
                for (b, wb) in ks[1].1.iter().enumerate() {
                    let flat = spec.flatten(&[ks[0].0 + a, ks[1].0 + b, 0]);
                    values[flat] += w * wa * wb;
                }
            }
        } else {
            for (a, wa) in ks[0].1.iter().enumerate() {
                for (b, wb) in ks[1].1.iter().enumerate() {
                    let wab = w * wa * wb;
                    let base = spec.flatten(&[ks[0].0 + a, ks[1].0 + b, ks[2].0]);
                    for (c, wc) in ks[2].1.iter().enumerate() {
                        values[base + c] += wab * wc;
                    }
                }
            }
        }
    }
    let out = GridDensity::new(*spec, values)?;
    if !(out.mass() > 0.0) {
        return Err(Error::InvalidInput("ensemble lies outside the grid".into()));
    }
    Ok(out.normalized())
}

/// Gaussian smoothing `ψ_δ ∗ f` of grid values by separable trapezoid
/// convolution, renormalized to unit mass.
pub fn mollify_grid(density: &GridDensity, delta: f64) -> Result<GridDensity> {
    if !(delta > 0.0) {
        return Err(Error::InvalidInput(format!("bandwidth must be positive, got {delta}")));
    }
    let spec = density.spec;
    let m = spec.points_per_axis;
    let h = spec.spacing();
    let norm = 1.0 / ((2.0 * std::f64::consts::PI).sqrt() * delta);
    let kernel: Vec<Vec<f64>> = (0..m)
        .map(|i| {
            (0..m)
                .map(|j| {
                    let x = spec.coord(i) - spec.coord(j);
                    norm * (-x * x / (2.0 * delta * delta)).exp() * h * spec.axis_weight(j)
                })
                .collect()
        })
        .collect();
    let mut values = density.values.clone();
    for axis in 0..spec.dim {
        let s = spec.stride(axis);
        let src = values.clone();
        values = (0..spec.len())
            .into_par_iter()
            .map(|flat| {
                let i = spec.unflatten(flat)[axis];
                let base = flat - i * s;
                let row = &kernel[i];
                let mut acc = 0.0;
                for (j, k) in row.iter().enumerate() {
                    acc += k * src[base + j * s];
                }
                acc
            })
            .collect();
    }
    let mut out = GridDensity::new(spec, values)?.normalized();
    out.mass_tolerance = density.mass_tolerance;
    Ok(out)
}

/// Diagnostic row of a grid state.
pub fn grid_diagnostics(density: &GridDensity, opts: &FunctionalOptions) -> DiagnosticRow {
    let f = single_functionals(&Sampled::from_grid(density), opts);
    DiagnosticRow {
        mass: f.mass,
        momentum: f.momentum,
        energy: f.energy,
        entropy: f.entropy,
        fisher: f.fisher.last().map(|x| x.1).unwrap_or(0.0),
        lp_norms: f.lp_norms,
        moments: f.moments,
        max_speed: 0.0,
        loss: None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sampling::sample_random;
    use crate::types::{GaussianComponent, KernelParams};

    fn gaussian_grid(spec: GridSpec, variance: f64) -> GridDensity {
        GridDensity::from_analytic(spec, &AnalyticDensity::maxwellian(spec.dim, variance)).unwrap()
    }

    #[test]
    fn closed_form_functionals() {
        let spec = GridSpec::new(3, 8.0, 64).unwrap();
        let f = AnalyticDensity::standard(3);
        let g = AnalyticDensity::maxwellian(3, 2.0);
        let sf = Sampled::from_analytic(spec, &f).unwrap();
        let sg = Sampled::from_analytic(spec, &g).unwrap();
        let one = single_functionals(&sf, &FunctionalOptions::default());
        assert!((one.entropy + 4.25681).abs() < 1e-4, "{}", one.entropy);
        assert!((one.energy - 1.5).abs() < 1e-6, "{}", one.energy);
        assert!((one.fisher[0].1 - 3.0).abs() < 1e-4);
        assert!((one.mass - 1.0).abs() < 1e-10);
        let kl = pair_functionals(&sf.values, &sg.values, &spec, DEFAULT_SUPPORT_FLOOR).kl;
        assert!((kl - 0.28972).abs() < 1e-4, "{kl}");
        assert!((kl - f.gaussian_kl(&g).unwrap()).abs() < 1e-6);
        let same = pair_functionals(&sf.values, &sf.values, &spec, DEFAULT_SUPPORT_FLOOR);
        assert!(same.kl.abs() < 1e-10 && same.sup_ratio == 1.0);
    }

    #[test]
    fn grid_derivatives_match_analytic() {
        let spec = GridSpec::new(3, 8.0, 48).unwrap();
        let f = AnalyticDensity::standard(3);
        let exact = single_functionals(&Sampled::from_analytic(spec, &f).unwrap(), &FunctionalOptions::default());
        let grid = single_functionals(
            &Sampled::from_grid(&GridDensity::from_analytic(spec, &f).unwrap()),
            &FunctionalOptions::default(),
        );
        for (a, b) in exact.fisher.iter().zip(&grid.fisher) {
            assert!((a.1 - b.1).abs() < 0.02 * a.1, "{a:?} {b:?}");
        }
        assert!((exact.h2_5 - grid.h2_5).abs() < 0.05 * exact.h2_5);
    }

    #[test]
    fn functionals_are_invariant_under_lattice_rotation() {
        let spec = GridSpec::new(3, 6.0, 25).unwrap();
        let mix = AnalyticDensity::mixture(
            3,
            vec![
                GaussianComponent { weight: 0.3, mean: vec![1.0, 0.5, -0.2], variance: 0.7 },
                GaussianComponent { weight: 0.7, mean: vec![-0.4, 0.0, 0.3], variance: 1.2 },
            ],
        )
        .unwrap();
        let g = GridDensity::from_analytic(spec, &mix).unwrap();
        // (x, y, z) -> (-y, x, z) maps lattice nodes onto lattice nodes.
        let m = spec.points_per_axis;
        let mut rotated = vec![0.0; spec.len()];
        for (i, r) in rotated.iter_mut().enumerate() {
            let [a, b, c] = spec.unflatten(i);
            *r = g.values[spec.flatten(&[b, m - 1 - a, c])];
        }
        let rg = GridDensity::new(spec, rotated).unwrap();
        let opts = FunctionalOptions::default();
        let x = single_functionals(&Sampled::from_grid(&g), &opts);
        let y = single_functionals(&Sampled::from_grid(&rg), &opts);
        let close = |a: f64, b: f64| (a - b).abs() <= 1e-12 * (1.0 + a.abs());
        assert!(close(x.entropy, y.entropy) && close(x.energy, y.energy) && close(x.h2_5, y.h2_5));
        for (a, b) in x.fisher.iter().zip(&y.fisher) {
            assert!(close(a.1, b.1));
        }
        let std = GridDensity::from_analytic(spec, &AnalyticDensity::standard(3)).unwrap();
        let k1 = pair_functionals(&g.values, &std.values, &spec, DEFAULT_SUPPORT_FLOOR).kl;
        let k2 = pair_functionals(&rg.values, &std.values, &spec, DEFAULT_SUPPORT_FLOOR).kl;
        assert!(close(k1, k2));
    }

    #[test]
    fn rhs_conserves_mass_and_symmetry() {
        let spec = GridSpec::new(3, 5.0, 16).unwrap();
        let mix = AnalyticDensity::mixture(
            3,
            vec![
                GaussianComponent { weight: 0.5, mean: vec![1.0, 0.0, 0.0], variance: 0.6 },
                GaussianComponent { weight: 0.5, mean: vec![-1.0, 0.0, 0.0], variance: 0.6 },
            ],
        )
        .unwrap();
        let g = GridDensity::from_analytic(spec, &mix).unwrap();
        let conv = GridConvolver::new(spec, KernelParams::coulomb(0.0));
        let rhs = grid_rhs(&g, &conv);
        let total = spec.integrate(&rhs);
        let scale = rhs.iter().map(|x| x.abs()).fold(0.0, f64::max);
        assert!(total.abs() < 1e-14 * scale.max(1.0), "{total}");
        // Mirror x -> -x.
        let m = spec.points_per_axis;
        for i in 0..spec.len() {
            let [a, b, c] = spec.unflatten(i);
            let j = spec.flatten(&[m - 1 - a, b, c]);
            assert!((rhs[i] - rhs[j]).abs() <= 1e-12 * scale);
        }
    }

    #[test]
    fn maxwellian_residual_is_second_order() {
        for params in [
            KernelParams::new(3, 0.0, 0.0).unwrap(),
            KernelParams::coulomb(0.0),
        ] {
            let res: Vec<(f64, f64)> = [33, 49]
                .iter()
                .map(|&m| {
                    let spec = GridSpec::new(3, 6.0, m).unwrap();
                    let g = gaussian_grid(spec, 1.0);
                    let conv = GridConvolver::new(spec, params);
                    let r = grid_rhs(&g, &conv);
                    (spec.spacing(), r.iter().map(|x| x.abs()).fold(0.0, f64::max))
                })
                .collect();
            let rate = (res[0].1 / res[1].1).ln() / (res[0].0 / res[1].0).ln();
            assert!(rate > 1.7, "γ={}: rate {rate}, residuals {res:?}", params.gamma);
        }
    }

    #[test]
    fn grid_step_behaviour() {
        let spec = GridSpec::new(3, 5.0, 14).unwrap();
        let g = GridDensity::from_analytic(spec, &AnalyticDensity::gaussian(3, &[0.4, 0.0, 0.0], 0.8).unwrap())
            .unwrap();
        let conv = GridConvolver::new(spec, KernelParams::coulomb(0.0));
        assert_eq!(grid_step(&g, &conv, 0.0, DEFAULT_C_STAB).unwrap().density, g);
        let limit = stable_dt(&spec, &conv.convolve(&g.values), DEFAULT_C_STAB);
        let err = grid_step(&g, &conv, 2.0 * limit, DEFAULT_C_STAB).unwrap_err();
        match err {
            Error::UnstableTimeStep { suggested, .. } => assert_eq!(suggested, limit),
            e => panic!("unexpected {e:?}"),
        }
        let out = grid_step(&g, &conv, 0.9 * limit, DEFAULT_C_STAB).unwrap();
        // Clipping only adds mass back; the scheme itself conserves it.
        assert!((out.density.mass() - out.clipped_mass - g.mass()).abs() < 1e-14);
    }

    #[test]
    fn maxwellian_grid_step_barely_moves() {
        let spec = GridSpec::new(3, 6.0, 17).unwrap();
        let g = gaussian_grid(spec, 1.0);
        let conv = GridConvolver::new(spec, KernelParams::coulomb(0.0));
        let dt = 0.5 * stable_dt(&spec, &conv.convolve(&g.values), DEFAULT_C_STAB);
        let out = grid_step(&g, &conv, dt, DEFAULT_C_STAB).unwrap().density;
        let r = grid_rhs(&g, &conv).iter().map(|x| x.abs()).fold(0.0, f64::max);
        let change = out.values.iter().zip(&g.values).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(change <= 1.01 * dt * r, "{change} vs {}", dt * r);
    }

    #[test]
    fn single_particle_kde_is_mollifier() {
        let spec = GridSpec::new(3, 4.0, 41).unwrap();
        let e = ParticleEnsemble::uniform(3, vec![[0.2, 0.0, -0.6]]).unwrap();
        let g = ensemble_to_grid(&e, 0.5, &spec).unwrap();
        assert!((g.mass() - 1.0).abs() < 1e-14);
        let psi = AnalyticDensity::gaussian(3, &[0.2, 0.0, -0.6], 0.25).unwrap();
        let exact = GridDensity::from_analytic(spec, &psi).unwrap().normalized();
        for (a, b) in g.values.iter().zip(&exact.values) {
            assert!((a - b).abs() < 1e-12 * exact.max_value().max(1.0));
        }
    }

    #[test]
    fn kde_of_gaussian_samples() {
        let spec = GridSpec::new(3, 6.0, 31).unwrap();
        let delta = 0.4;
        let exact = GridDensity::from_analytic(spec, &AnalyticDensity::maxwellian(3, 1.0 + delta * delta)).unwrap();
        let norm = spec.integrate(&exact.values.iter().map(|x| x * x).collect::<Vec<_>>()).sqrt();
        let rel = |n: usize| {
            let e = sample_random(&AnalyticDensity::standard(3), n, 11).unwrap();
            let g = ensemble_to_grid(&e, delta, &spec).unwrap();
            pair_functionals(&g.values, &exact.values, &spec, DEFAULT_SUPPORT_FLOOR).l2_sq.sqrt() / norm
        };
        let (a, b) = (rel(2500), rel(10_000));
        // Sampling error decays like N^{-1/2}.
        assert!(b < 0.1, "{b}");
        assert!(b < 0.75 * a, "{a} {b}");
    }

    #[test]
    fn mollified_grid_matches_closed_form() {
        let spec = GridSpec::new(3, 8.0, 41).unwrap();
        let g = gaussian_grid(spec, 1.0);
        let m = mollify_grid(&g, 0.5).unwrap();
        let exact = gaussian_grid(spec, 1.25);
        let err = m.values.iter().zip(&exact.values).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn oracle_trajectory_lands_on_output_times() {
        let spec = GridSpec::new(3, 6.0, 17).unwrap();
        let f0 = GridDensity::from_analytic(
            spec,
            &AnalyticDensity::gaussian(3, &[0.4, 0.0, 0.0], 0.8).unwrap(),
        )
        .unwrap();
        let conv = GridConvolver::new(spec, KernelParams::coulomb(0.0));
        let times = [0.0, 0.01, 0.05];
        let traj = oracle_trajectory(f0.clone(), &conv, &times, DEFAULT_C_STAB).unwrap();
        assert_eq!(traj.times, times);
        assert_eq!(traj.states[0], f0);
        assert!(traj.steps >= 2);
        for s in &traj.states {
            assert!((s.mass() - f0.mass()).abs() < 1e-13 + traj.clipped_mass);
        }
        let (one, dt) = grid_step_adaptive(&f0, &conv, 0.01, DEFAULT_C_STAB).unwrap();
        if dt == 0.01 {
            assert_eq!(one.density, traj.states[1]);
        }
        assert!(oracle_trajectory(f0, &conv, &[0.1, 0.05], DEFAULT_C_STAB).is_err());
    }
}
