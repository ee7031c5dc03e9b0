//! Deterministic particle dynamics `dv_i/dt = U_i` with the collision
//! velocity field
//!
//! ```text
//! U_i = -Σ_j w_j A(v_i - v_j) (s_i - s_j)
//! ```
//!
//! The summand is antisymmetric under `i ↔ j`, so `Σ w_i U_i = 0` and
//! momentum is conserved up to roundoff. Since `A(z) z = 0` also holds for
//! the regularized kernel, `Σ w_i v_i · U_i = 0` and the kinetic energy is
//! conserved by the continuous-time flow.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::kernel::apply_a;
use crate::pairs::{self, Columns, Prefactor};
use crate::score::{blob_eval, BlobEval, ScoreField};
use crate::sum::{NeumaierSum, Reduction};
use crate::types::{add, norm2, scale, sub, KernelParams, ParticleEnsemble, Vec3};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scheme {
    Euler,
    Heun,
}

impl Scheme {
    pub fn order(&self) -> u32 {
        match self {
            Scheme::Euler => 1,
            Scheme::Heun => 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IntegratorConfig {
    pub scheme: Scheme,
    pub dt: f64,
    pub t_end: f64,
    pub score: ScoreField,
    pub params: KernelParams,
    /// Output every `snapshot_stride` steps.
    pub snapshot_stride: usize,
    pub reduction: Reduction,
}

impl IntegratorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.dt >= 0.0) || !self.dt.is_finite() {
            return Err(Error::InvalidInput(format!("dt must be ≥ 0, got {}", self.dt)));
        }
        if !(self.t_end >= 0.0) || !self.t_end.is_finite() {
            return Err(Error::InvalidInput(format!("t_end must be ≥ 0, got {}", self.t_end)));
        }
        if self.snapshot_stride == 0 {
            return Err(Error::InvalidInput("snapshot_stride must be positive".into()));
        }
        Ok(())
    }

    /// Number of steps to reach `t_end`.
    pub fn n_steps(&self) -> usize {
        if self.dt == 0.0 {
            0
        } else {
            (self.t_end / self.dt - 1e-9).ceil().max(0.0) as usize
        }
    }
}

/// `U_i = -Σ_j w_j A(v_i - v_j)(s_i - s_j)`; needs scores on the ensemble.
pub fn velocity_field(
    ensemble: &ParticleEnsemble,
    params: &KernelParams,
    reduction: Reduction,
) -> Result<Vec<Vec3>> {
    let scores = ensemble
        .scores
        .as_ref()
        .ok_or_else(|| Error::InvalidInput("velocity field needs particle scores".into()))?;
    Ok(velocity_field_with(
        &ensemble.velocities,
        &ensemble.weights,
        scores,
        params,
        reduction,
    ))
}

pub fn velocity_field_with(
    vs: &[Vec3],
    ws: &[f64],
    ss: &[Vec3],
    params: &KernelParams,
    reduction: Reduction,
) -> Vec<Vec3> {
    let n = vs.len();
    match reduction {
        Reduction::Deterministic => (0..n)
            .into_par_iter()
            .map(|i| {
                let (vi, si) = (vs[i], ss[i]);
                let mut acc = [NeumaierSum::new(); 3];
                for j in 0..n {
                    let y = apply_a(&sub(&vi, &vs[j]), &sub(&si, &ss[j]), params);
                    for k in 0..3 {
                        acc[k].add(-ws[j] * y[k]);
                    }
                }
                [acc[0].value(), acc[1].value(), acc[2].value()]
            })
            .collect(),
        Reduction::Fast => pairs::velocity(
            &Columns::new(vs),
            &Columns::new(ss),
            ws,
            params.epsilon * params.epsilon,
            Prefactor::new(params.gamma),
        ),
    }
}

/// Scores and velocity field at one state.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldEval {
    pub scores: Vec<Vec3>,
    pub velocity: Vec<Vec3>,
    /// Present when the score (or its base) is a blob score.
    pub blob: Option<BlobEval>,
}

/// Evaluates the score and the velocity field at the given state.
pub fn evaluate(
    ensemble: &ParticleEnsemble,
    score: &ScoreField,
    params: &KernelParams,
    reduction: Reduction,
) -> Result<FieldEval> {
    let (scores, blob) = match score.blob_bandwidth() {
        Some(bw) => {
            let blob = blob_eval(ensemble, bw, reduction)?;
            let scores = match score {
                ScoreField::Blob { .. } => blob.scores.clone(),
                ScoreField::Perturbed { offset, .. } => blob
                    .scores
                    .iter()
                    .zip(&ensemble.velocities)
                    .map(|(s, v)| add(s, &offset.eval(v)))
                    .collect(),
                ScoreField::Analytic(_) => unreachable!(),
            };
            (scores, Some(blob))
        }
        None => (score.at_particles(ensemble, reduction)?, None),
    };
    let velocity =
        velocity_field_with(&ensemble.velocities, &ensemble.weights, &scores, params, reduction);
    Ok(FieldEval {
        scores,
        velocity,
        blob,
    })
}

fn advanced(
    ensemble: &ParticleEnsemble,
    increments: impl Fn(usize) -> Vec3,
    step_index: usize,
) -> Result<ParticleEnsemble> {
    let mut out = ensemble.clone();
    out.scores = None;
    for (i, v) in out.velocities.iter_mut().enumerate() {
        let nv = add(v, &increments(i));
        if nv.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFiniteVelocity {
                step: step_index,
                particle: i,
            });
        }
        *v = nv;
    }
    Ok(out)
}

/// One step of the configured scheme, reusing `stage0` when it was already
/// evaluated at `ensemble`. Scores are recomputed at every stage; weights
/// are never touched.
pub fn step_with(
    ensemble: &ParticleEnsemble,
    config: &IntegratorConfig,
    stage0: Option<&FieldEval>,
    step_index: usize,
) -> Result<ParticleEnsemble> {
    let dt = config.dt;
    if dt == 0.0 {
        return Ok(ensemble.clone());
    }
    let owned;
    let k1 = match stage0 {
        Some(e) => &e.velocity,
        None => {
            owned = evaluate(ensemble, &config.score, &config.params, config.reduction)?;
            &owned.velocity
        }
    };
    let predictor = advanced(ensemble, |i| scale(&k1[i], dt), step_index)?;
    match config.scheme {
        Scheme::Euler => Ok(predictor),
        Scheme::Heun => {
            let k2 = evaluate(&predictor, &config.score, &config.params, config.reduction)?.velocity;
            advanced(
                ensemble,
                |i| scale(&add(&k1[i], &k2[i]), 0.5 * dt),
                step_index,
            )
        }
    }
}

/// Ensemble at `t + dt`.
pub fn step(
    ensemble: &ParticleEnsemble,
    config: &IntegratorConfig,
    step_index: usize,
) -> Result<ParticleEnsemble> {
    step_with(ensemble, config, None, step_index)
}

/// Mass, momentum and kinetic energy `½ Σ w_i |v_i|²`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Conserved {
    pub mass: f64,
    pub momentum: Vec3,
    pub energy: f64,
}

pub fn conserved_quantities(ensemble: &ParticleEnsemble) -> Conserved {
    let mut mass = NeumaierSum::new();
    let mut mom = [NeumaierSum::new(); 3];
    let mut energy = NeumaierSum::new();
    for (v, w) in ensemble.velocities.iter().zip(&ensemble.weights) {
        mass.add(*w);
        for k in 0..3 {
            mom[k].add(w * v[k]);
        }
        energy.add(0.5 * w * norm2(v));
    }
    Conserved {
        mass: mass.value(),
        momentum: [mom[0].value(), mom[1].value(), mom[2].value()],
        energy: energy.value(),
    }
}

/// Largest `|U_i|`.
pub fn max_speed(velocity: &[Vec3]) -> f64 {
    velocity.iter().map(|u| norm2(u).sqrt()).fold(0.0, f64::max)
}

/// Step-by-step particle integration that keeps the stage-0 field of the
/// current state around so diagnostics and the next step share it.
pub struct ParticleSolver {
    pub config: IntegratorConfig,
    ensemble: ParticleEnsemble,
    time: f64,
    steps: usize,
    current: Option<FieldEval>,
}

impl ParticleSolver {
    pub fn new(ensemble: ParticleEnsemble, config: IntegratorConfig) -> Result<Self> {
        config.validate()?;
        if ensemble.dim != config.params.dim {
            return Err(Error::InvalidInput(format!(
                "ensemble dimension {} ≠ kernel dimension {}",
                ensemble.dim, config.params.dim
            )));
        }
        Ok(Self {
            config,
            ensemble,
            time: 0.0,
            steps: 0,
            current: None,
        })
    }

    pub fn ensemble(&self) -> &ParticleEnsemble {
        &self.ensemble
    }

    pub fn time(&self) -> f64 {
        self.time
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    /// Scores and velocity at the current state.
    pub fn field(&mut self) -> Result<&FieldEval> {
        if self.current.is_none() {
            self.current = Some(evaluate(
                &self.ensemble,
                &self.config.score,
                &self.config.params,
                self.config.reduction,
            )?);
        }
        Ok(self.current.as_ref().unwrap())
    }

    /// Ensemble with the current scores attached.
    pub fn ensemble_with_scores(&mut self) -> Result<ParticleEnsemble> {
        let scores = self.field()?.scores.clone();
        self.ensemble.clone().with_scores(scores)
    }

    pub fn advance(&mut self) -> Result<()> {
        self.field()?;
        let next = step_with(
            &self.ensemble,
            &self.config,
            self.current.as_ref(),
            self.steps + 1,
        )?;
        self.ensemble = next;
        self.current = None;
        self.steps += 1;
        self.time = self.steps as f64 * self.config.dt;
        Ok(())
    }
}
