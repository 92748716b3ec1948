//! Closed-loop simulation of a unit point mass driven by one or more KMP
//! controllers whose commands are fused by precision.

pub mod scenarios;

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::fusion::{self, ControllerOutput};
use crate::kmp::KmpModel;
use crate::linalg;
use crate::lqr::{self, ControlGains, LinearSystem};

/// Relative Frobenius change below which a controller reuses its last gains.
pub const GAIN_CACHE_TOLERANCE: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct PointMassState {
    pub position: DVector<f64>,
    pub velocity: DVector<f64>,
}

impl PointMassState {
    pub fn new(position: DVector<f64>, velocity: DVector<f64>) -> Result<Self> {
        if position.len() != velocity.len() || position.is_empty() {
            return Err(Error::Dimension(format!(
                "position has dimension {}, velocity {}",
                position.len(),
                velocity.len()
            )));
        }
        if !linalg::is_finite(&position) || !linalg::is_finite(&velocity) {
            return Err(Error::InvalidArgument("state is not finite".into()));
        }
        Ok(Self { position, velocity })
    }

    pub fn at_rest(position: DVector<f64>) -> Self {
        let n = position.len();
        Self {
            position,
            velocity: DVector::zeros(n),
        }
    }

    pub fn dim(&self) -> usize {
        self.position.len()
    }

    /// `ζ = [x; ẋ]`.
    pub fn stacked(&self) -> DVector<f64> {
        let n = self.dim();
        let mut z = DVector::zeros(2 * n);
        z.rows_mut(0, n).copy_from(&self.position);
        z.rows_mut(n, n).copy_from(&self.velocity);
        z
    }

    pub fn kinetic_energy(&self) -> f64 {
        0.5 * self.velocity.norm_squared()
    }
}

/// Exact update of a unit mass under an acceleration held for `dt`.
pub fn step_dynamics(state: &PointMassState, u: &DVector<f64>, dt: f64) -> PointMassState {
    PointMassState {
        position: &state.position + &state.velocity * dt + u * (0.5 * dt * dt),
        velocity: &state.velocity + u * dt,
    }
}

/// Piecewise-linear input trajectory, held constant outside its time span.
#[derive(Clone, Debug, PartialEq)]
pub struct InputSignal {
    times: Vec<f64>,
    values: Vec<DVector<f64>>,
}

impl InputSignal {
    pub fn new(samples: Vec<(f64, DVector<f64>)>) -> Result<Self> {
        let first = samples
            .first()
            .ok_or_else(|| Error::InvalidArgument("input signal is empty".into()))?;
        let dim = first.1.len();
        if dim == 0 {
            return Err(Error::Dimension("input signal has dimension 0".into()));
        }
        for (i, (t, v)) in samples.iter().enumerate() {
            if !t.is_finite() || !linalg::is_finite(v) {
                return Err(Error::InvalidArgument(format!("input sample {i} is not finite")));
            }
            if v.len() != dim {
                return Err(Error::Dimension(format!("input sample {i} has dimension {}", v.len())));
            }
            if i > 0 && *t <= samples[i - 1].0 {
                return Err(Error::InvalidArgument(format!("input times must increase (sample {i})")));
            }
        }
        let (times, values) = samples.into_iter().unzip();
        Ok(Self { times, values })
    }

    pub fn dim(&self) -> usize {
        self.values[0].len()
    }

    pub fn start(&self) -> f64 {
        self.times[0]
    }

    pub fn end(&self) -> f64 {
        *self.times.last().expect("non-empty")
    }

    pub fn samples(&self) -> impl Iterator<Item = (f64, &DVector<f64>)> {
        self.times.iter().copied().zip(&self.values)
    }

    pub fn at(&self, t: f64) -> DVector<f64> {
        if t <= self.start() {
            return self.values[0].clone();
        }
        if t >= self.end() {
            return self.values.last().expect("non-empty").clone();
        }
        let hi = self.times.partition_point(|&s| s <= t);
        let lo = hi - 1;
        let w = (t - self.times[lo]) / (self.times[hi] - self.times[lo]);
        &self.values[lo] * (1.0 - w) + &self.values[hi] * w
    }
}

/// How stiffness is derived from predictions during a run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GainSchedule {
    /// Continuous infinite-horizon regulator around the current prediction.
    InfiniteHorizon,
    /// Backward Riccati recursion over the whole (time-driven) run.
    FiniteHorizon,
}

#[derive(Clone, Debug)]
pub struct ControllerSpec {
    pub label: String,
    pub model: Arc<KmpModel>,
    /// Control penalty `R`, `N_C × N_C`.
    pub r: DMatrix<f64>,
    pub velocity_weight: f64,
}

#[derive(Clone, Debug)]
pub struct ScenarioConfig {
    pub controllers: Vec<ControllerSpec>,
    pub input_signal: InputSignal,
    pub dt: f64,
    pub duration: f64,
    pub initial_state: PointMassState,
    pub seed: u64,
    pub schedule: GainSchedule,
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::InvalidArgument(format!("dt must be positive, got {}", self.dt)));
        }
        if !(self.duration > 0.0 && self.duration.is_finite()) {
            return Err(Error::InvalidArgument(format!("duration must be positive, got {}", self.duration)));
        }
        let sig = &self.input_signal;
        if sig.start() > 1e-12 || sig.end() < self.duration - 1e-9 {
            return Err(Error::InvalidArgument(format!(
                "input signal spans [{}, {}] but the run needs [0, {}]",
                sig.start(),
                sig.end(),
                self.duration
            )));
        }
        let first = self
            .controllers
            .first()
            .ok_or_else(|| Error::InvalidArgument("scenario has no controllers".into()))?;
        let (d_i, d_o) = (first.model.dim_in(), first.model.dim_out());
        if sig.dim() != d_i {
            return Err(Error::Dimension(format!(
                "input signal has dimension {}, models expect {d_i}",
                sig.dim()
            )));
        }
        if self.initial_state.dim() != d_o {
            return Err(Error::Dimension(format!(
                "state has dimension {}, models predict {d_o}",
                self.initial_state.dim()
            )));
        }
        let mut labels: Vec<&str> = Vec::new();
        for c in &self.controllers {
            if c.model.dim_in() != d_i || c.model.dim_out() != d_o {
                return Err(Error::Dimension(format!("controller '{}' has mismatched dimensions", c.label)));
            }
            if c.r.nrows() != d_o || c.r.ncols() != d_o {
                return Err(Error::Dimension(format!("R of '{}' must be {d_o}x{d_o}", c.label)));
            }
            if !linalg::is_symmetric(&c.r, 1e-10 * c.r.amax().max(1.0)) {
                return Err(Error::InvalidArgument(format!("R of '{}' is not symmetric", c.label)));
            }
            linalg::cholesky(&c.r, &format!("R of '{}'", c.label)).map_err(|_| {
                Error::InvalidArgument(format!("R of '{}' is not positive-definite", c.label))
            })?;
            if !(c.velocity_weight >= 0.0 && c.velocity_weight.is_finite()) {
                return Err(Error::InvalidArgument(format!("velocity weight of '{}' is negative", c.label)));
            }
            if labels.contains(&c.label.as_str()) {
                return Err(Error::InvalidArgument(format!("duplicate controller label '{}'", c.label)));
            }
            labels.push(&c.label);
        }
        Ok(())
    }

    /// Number of control steps; records are taken at `k·dt` for `k < steps`.
    pub fn steps(&self) -> usize {
        ((self.duration / self.dt).round() as usize).max(1)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ControllerStep {
    pub mean: DVector<f64>,
    pub covariance: DMatrix<f64>,
    pub uncertainty_ratio: f64,
    pub gains: ControlGains,
    pub command: DVector<f64>,
    /// Trace share of this controller's precision in the fusion.
    pub share: f64,
}

impl ControllerStep {
    /// First diagonal entry of the predicted covariance.
    pub fn sigma1(&self) -> f64 {
        self.covariance[(0, 0)]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub time: f64,
    pub input: DVector<f64>,
    pub controllers: Vec<ControllerStep>,
    pub fused: DVector<f64>,
    /// Fusion had no confident controller and a zero command was applied.
    pub no_confidence: bool,
    /// State at `time`, before `fused` is applied.
    pub state: PointMassState,
    /// Distance from the precision-weighted mean of the controller targets.
    pub tracking_error: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TraceRecord {
    pub labels: Vec<String>,
    pub dim_in: usize,
    pub dim_out: usize,
    pub steps: Vec<StepRecord>,
    pub final_state: PointMassState,
}

impl TraceRecord {
    pub fn peak_fused_norm(&self) -> f64 {
        self.steps.iter().map(|s| s.fused.norm()).fold(0.0, f64::max)
    }
}

struct Prepared {
    mean: DVector<f64>,
    covariance: DMatrix<f64>,
    ratio: f64,
    gamma: DMatrix<f64>,
}

fn prepare(model: &KmpModel, input: &DVector<f64>) -> Result<Prepared> {
    let p = model.predict(input)?;
    let gamma = fusion::gamma_from_cov(&p.covariance)?;
    Ok(Prepared {
        mean: p.mean,
        covariance: p.covariance,
        ratio: p.uncertainty_ratio,
        gamma,
    })
}

struct GainCache {
    covariance: DMatrix<f64>,
    gains: ControlGains,
}

/// Runs the prediction → gains → fusion → dynamics loop.
pub fn run_scenario(config: &ScenarioConfig) -> Result<TraceRecord> {
    config.validate()?;
    let n_c = config.initial_state.dim();
    let sys = LinearSystem::double_integrator(n_c);
    let steps = config.steps();
    let times: Vec<f64> = (0..steps).map(|k| k as f64 * config.dt).collect();

    let schedules: Option<Vec<Vec<ControlGains>>> = match config.schedule {
        GainSchedule::InfiniteHorizon => None,
        GainSchedule::FiniteHorizon => Some(
            config
                .controllers
                .iter()
                .map(|c| finite_schedule(&sys, c, &config.input_signal, &times, config.dt))
                .collect::<Result<_>>()?,
        ),
    };

    let mut caches: Vec<Option<GainCache>> = config.controllers.iter().map(|_| None).collect();
    let mut state = config.initial_state.clone();
    let mut records = Vec::with_capacity(steps);
    let zero_velocity = DVector::zeros(n_c);

    for (k, &t) in times.iter().enumerate() {
        let input = config.input_signal.at(t);
        let zeta = state.stacked();
        let mut outputs = Vec::with_capacity(config.controllers.len());
        let mut target_votes = Vec::with_capacity(config.controllers.len());
        let mut per = Vec::with_capacity(config.controllers.len());
        for (j, c) in config.controllers.iter().enumerate() {
            let p = prepare(&c.model, &input).map_err(|e| Error::at(k, e))?;
            let gains = match &schedules {
                Some(s) => s[j][k].clone(),
                None => cached_gains(&sys, c, &p.covariance, &mut caches[j]).map_err(|e| Error::at(k, e))?,
            };
            let target = stack(&p.mean, &zero_velocity);
            let command = lqr::control_command(&gains, &target, &zeta).map_err(|e| Error::at(k, e))?;
            outputs.push(ControllerOutput {
                source_id: c.label.clone(),
                command: command.clone(),
                weight: p.gamma.clone(),
            });
            target_votes.push(ControllerOutput {
                source_id: c.label.clone(),
                command: p.mean.clone(),
                weight: p.gamma.clone(),
            });
            per.push(ControllerStep {
                mean: p.mean,
                covariance: p.covariance,
                uncertainty_ratio: p.ratio,
                gains,
                command,
                share: 0.0,
            });
        }

        let (fused, no_confidence) = match fusion::fuse(&outputs) {
            Ok(f) => {
                for (s, share) in per.iter_mut().zip(&f.per_controller_share) {
                    s.share = *share;
                }
                (f.command, false)
            }
            Err(Error::NoConfidence) => {
                log::warn!("step {k} (t = {t:.3} s): no confident controller, applying zero command");
                (DVector::zeros(n_c), true)
            }
            Err(e) => return Err(Error::at(k, e)),
        };
        let target = match fusion::fuse(&target_votes) {
            Ok(f) => f.command,
            Err(_) => per.iter().fold(DVector::zeros(n_c), |acc, s| acc + &s.mean) / per.len() as f64,
        };
        let tracking_error = (&state.position - target).norm();

        let next = step_dynamics(&state, &fused, config.dt);
        if !linalg::is_finite(&next.position) || !linalg::is_finite(&next.velocity) {
            return Err(Error::at(k, Error::Unstable(f64::INFINITY)));
        }
        records.push(StepRecord {
            time: t,
            input,
            controllers: per,
            fused,
            no_confidence,
            state,
            tracking_error,
        });
        state = next;
    }

    let first = &config.controllers[0].model;
    Ok(TraceRecord {
        labels: config.controllers.iter().map(|c| c.label.clone()).collect(),
        dim_in: first.dim_in(),
        dim_out: first.dim_out(),
        steps: records,
        final_state: state,
    })
}

fn stack(a: &DVector<f64>, b: &DVector<f64>) -> DVector<f64> {
    let mut z = DVector::zeros(a.len() + b.len());
    z.rows_mut(0, a.len()).copy_from(a);
    z.rows_mut(a.len(), b.len()).copy_from(b);
    z
}

fn cached_gains(
    sys: &LinearSystem,
    c: &ControllerSpec,
    cov: &DMatrix<f64>,
    cache: &mut Option<GainCache>,
) -> Result<ControlGains> {
    if let Some(hit) = cache {
        if (cov - &hit.covariance).norm() < GAIN_CACHE_TOLERANCE * hit.covariance.norm() {
            return Ok(hit.gains.clone());
        }
    }
    let q = lqr::weight_from_cov(cov, c.velocity_weight)?;
    let warm = cache.as_ref().map(|h| &h.gains);
    let gains = lqr::infinite_horizon_gains_from(sys, &q, &c.r, warm)?;
    *cache = Some(GainCache {
        covariance: cov.clone(),
        gains: gains.clone(),
    });
    Ok(gains)
}

fn finite_schedule(
    sys: &LinearSystem,
    c: &ControllerSpec,
    signal: &InputSignal,
    times: &[f64],
    dt: f64,
) -> Result<Vec<ControlGains>> {
    let q_seq = times
        .iter()
        .enumerate()
        .map(|(k, &t)| {
            let cov = c.model.predict_cov(&signal.at(t)).map_err(|e| Error::at(k, e))?;
            lqr::weight_from_cov(&cov, c.velocity_weight).map_err(|e| Error::at(k, e))
        })
        .collect::<Result<Vec<_>>>()?;
    let terminal = q_seq.last().expect("at least one step").clone();
    lqr::finite_horizon_gains(sys, &q_seq, &c.r, dt, &terminal)
}

/// One probe of [`gains_vs_distance`].
#[derive(Clone, Debug, PartialEq)]
pub struct GainSample {
    pub distance: f64,
    pub kp_diag: DVector<f64>,
    pub sigma1: f64,
}

/// Infinite-horizon stiffness along the ray `base + s·direction` for `steps`
/// evenly spaced `s` in `[0, max_distance]`.
pub fn gains_vs_distance(
    model: &KmpModel,
    base_query: &DVector<f64>,
    direction: &DVector<f64>,
    max_distance: f64,
    steps: usize,
    r: &DMatrix<f64>,
    velocity_weight: f64,
) -> Result<Vec<GainSample>> {
    if direction.len() != model.dim_in() || base_query.len() != model.dim_in() {
        return Err(Error::Dimension("probe ray does not match the model input dimension".into()));
    }
    let norm = direction.norm();
    if !(norm > 0.0 && norm.is_finite()) {
        return Err(Error::InvalidArgument("probe direction must be non-zero".into()));
    }
    if !(max_distance >= 0.0 && max_distance.is_finite()) || steps == 0 {
        return Err(Error::InvalidArgument("need a non-negative distance and at least one step".into()));
    }
    let unit = direction / norm;
    let sys = LinearSystem::double_integrator(model.dim_out());
    let mut warm: Option<ControlGains> = None;
    let mut out = Vec::with_capacity(steps);
    for i in 0..steps {
        let distance = if steps == 1 {
            0.0
        } else {
            max_distance * i as f64 / (steps - 1) as f64
        };
        let query = base_query + &unit * distance;
        let cov = model.predict_cov(&query).map_err(|e| Error::at(i, e))?;
        let q = lqr::weight_from_cov(&cov, velocity_weight).map_err(|e| Error::at(i, e))?;
        let gains = lqr::infinite_horizon_gains_from(&sys, &q, r, warm.as_ref()).map_err(|e| Error::at(i, e))?;
        out.push(GainSample {
            distance,
            kp_diag: gains.kp.diagonal(),
            sigma1: cov[(0, 0)],
        });
        warm = Some(gains);
    }
    Ok(out)
}

/// Per-axis stiffness once the prediction has reached the far-field limit,
/// for a scalar control penalty `r`: `√(λ₂ / (σ_f² N r))`.
pub fn floor_stiffness(model: &KmpModel, r: f64) -> f64 {
    let h = model.hyper();
    (h.lambda2 / (h.sigma_f2 * model.len() as f64 * r)).sqrt()
}
