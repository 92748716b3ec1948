//! Synthetic demonstration datasets and test inputs for the packaged
//! scenarios.
//!
//! * `toy1d`: a scalar function of a scalar input whose spread is wide at
//!   the ends of the input window and narrow in the middle.
//! * `handover`: robot end-effector position as a function of the human hand
//!   position; demonstrations start scattered and converge on a common
//!   handover point.
//! * `painting`: short vertical strokes with the robot holding a fixed offset
//!   from the hand.
//! * `painting_full`: both sub-tasks, driven by a hand that performs the
//!   handover, wanders to a region with no data, then paints.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{ControllerSpec, GainSchedule, InputSignal, PointMassState, ScenarioConfig};
use crate::error::{Error, Result};
use crate::kmp::{KmpHyperparams, KmpModel};
use crate::reference::Demonstration;
use crate::sub_seed;

pub const CONTROL_DT: f64 = 0.01;
/// Demonstration sample rate, Hz.
pub const DEMO_RATE: f64 = 50.0;

pub const TOY_HYPERPARAMS: KmpHyperparams = KmpHyperparams {
    lambda1: 5.0,
    lambda2: 750.0,
    lengthscale: 1e-2,
    sigma_f2: 1.0,
};
pub const TOY_COMPONENTS: usize = 4;
pub const TOY_REFERENCE_POINTS: usize = 750;
/// Width of the toy input window.
pub const TOY_WINDOW: f64 = 0.06;

pub const TASK_HYPERPARAMS: KmpHyperparams = KmpHyperparams {
    lambda1: 0.1,
    lambda2: 1.0,
    lengthscale: 0.1,
    sigma_f2: 1.0,
};
pub const TASK_COMPONENTS: usize = 3;
pub const TASK_REFERENCE_POINTS: usize = 500;
pub const TASK_R: f64 = 1e-2;

pub const HANDOVER_HAND_START: [f64; 3] = [1.6, -0.6, 0.8];
pub const HANDOVER_HAND_END: [f64; 3] = [0.9, 0.1, 1.1];
pub const HANDOVER_ROBOT_START: [f64; 3] = [0.35, 0.35, 0.55];
pub const HANDOVER_ROBOT_END: [f64; 3] = [0.7, 0.05, 1.0];
pub const PAINT_HAND_BASE: [f64; 3] = [1.15, 0.95, 0.85];
pub const PAINT_STROKE: f64 = 0.4;
pub const PAINT_OFFSET: [f64; 3] = [-0.3, -0.15, 0.0];
/// Hand position far from both sub-tasks.
pub const GAP_POINT: [f64; 3] = [1.7, 0.6, 1.8];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ScenarioName {
    Toy1d,
    Handover,
    Painting,
    PaintingFull,
}

impl ScenarioName {
    pub const ALL: [ScenarioName; 4] = [
        ScenarioName::Toy1d,
        ScenarioName::Handover,
        ScenarioName::Painting,
        ScenarioName::PaintingFull,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            ScenarioName::Toy1d => "toy1d",
            ScenarioName::Handover => "handover",
            ScenarioName::Painting => "painting",
            ScenarioName::PaintingFull => "painting_full",
        }
    }
}

impl fmt::Display for ScenarioName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ScenarioName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ScenarioName::ALL
            .iter()
            .find(|n| n.as_str() == s)
            .copied()
            .ok_or_else(|| {
                Error::InvalidArgument(format!(
                    "unknown scenario '{s}' (expected toy1d, handover, painting or painting_full)"
                ))
            })
    }
}

/// One independently demonstrated sub-task and the settings used to learn it.
#[derive(Clone, Debug)]
pub struct SubTask {
    pub label: String,
    pub demonstrations: Vec<Demonstration>,
    pub hyper: KmpHyperparams,
    pub components: usize,
    pub reference_points: usize,
}

#[derive(Clone, Debug)]
pub struct Scenario {
    pub name: ScenarioName,
    pub seed: u64,
    pub subtasks: Vec<SubTask>,
    pub input_signal: InputSignal,
    pub dt: f64,
    pub duration: f64,
    pub initial_state: PointMassState,
    pub r: DMatrix<f64>,
    pub velocity_weight: f64,
    pub schedule: GainSchedule,
}

impl Scenario {
    /// Fits one KMP per sub-task, in sub-task order.
    pub fn train_models(&self) -> Result<Vec<KmpModel>> {
        self.subtasks
            .iter()
            .enumerate()
            .map(|(i, s)| {
                KmpModel::from_demonstrations(
                    &s.demonstrations,
                    s.components,
                    s.reference_points,
                    s.hyper,
                    sub_seed(self.seed, 200 + i as u64),
                )
            })
            .collect()
    }

    /// Assembles a run configuration around already trained models.
    pub fn config(&self, models: Vec<Arc<KmpModel>>) -> Result<ScenarioConfig> {
        if models.len() != self.subtasks.len() {
            return Err(Error::InvalidArgument(format!(
                "scenario has {} sub-tasks but {} models were given",
                self.subtasks.len(),
                models.len()
            )));
        }
        let controllers = self
            .subtasks
            .iter()
            .zip(models)
            .map(|(s, model)| ControllerSpec {
                label: s.label.clone(),
                model,
                r: self.r.clone(),
                velocity_weight: self.velocity_weight,
            })
            .collect();
        let config = ScenarioConfig {
            controllers,
            input_signal: self.input_signal.clone(),
            dt: self.dt,
            duration: self.duration,
            initial_state: self.initial_state.clone(),
            seed: self.seed,
            schedule: self.schedule,
        };
        config.validate()?;
        Ok(config)
    }

    pub fn train(&self) -> Result<ScenarioConfig> {
        let models = self.train_models()?.into_iter().map(Arc::new).collect();
        self.config(models)
    }
}

/// `10τ³ − 15τ⁴ + 6τ⁵`, clamped to `[0, 1]`.
pub fn min_jerk(tau: f64) -> f64 {
    let t = tau.clamp(0.0, 1.0);
    t * t * t * (10.0 + t * (-15.0 + 6.0 * t))
}

fn lerp(a: &[f64], b: &[f64], s: f64) -> DVector<f64> {
    DVector::from_iterator(a.len(), a.iter().zip(b).map(|(x, y)| x + (y - x) * s))
}

/// Samples a chain of minimum-jerk segments every `sample_dt`. Each segment
/// is `(duration, target)`; a target equal to the current point holds still.
fn min_jerk_signal(start: &[f64], segments: &[(f64, Vec<f64>)], sample_dt: f64) -> Result<InputSignal> {
    let mut samples = vec![(0.0, DVector::from_column_slice(start))];
    let mut from = start.to_vec();
    let mut t0 = 0.0;
    for (duration, to) in segments {
        let n = (duration / sample_dt).ceil().max(1.0) as usize;
        for k in 1..=n {
            let tau = k as f64 / n as f64;
            samples.push((t0 + duration * tau, lerp(&from, to, min_jerk(tau))));
        }
        t0 += duration;
        from = to.clone();
    }
    InputSignal::new(samples)
}

fn add_noise(rng: &mut ChaCha8Rng, base: &[f64], std: f64) -> Vec<f64> {
    let normal = Normal::new(0.0, std).expect("finite standard deviation");
    base.iter().map(|b| b + normal.sample(rng)).collect()
}

fn noisy(rng: &mut ChaCha8Rng, v: DVector<f64>, std: f64) -> DVector<f64> {
    let normal = Normal::new(0.0, std).expect("finite standard deviation");
    v.map(|x| x + normal.sample(rng))
}

pub fn make_scenario(name: ScenarioName, seed: u64) -> Result<Scenario> {
    match name {
        ScenarioName::Toy1d => toy1d(seed),
        ScenarioName::Handover => handover(seed),
        ScenarioName::Painting => painting(seed),
        ScenarioName::PaintingFull => painting_full(seed),
    }
}

/// Mean of the toy function.
pub fn toy_mean(x: f64) -> f64 {
    2.0 * (std::f64::consts::PI * x / TOY_WINDOW).sin()
}

/// Standard deviation of the toy data: 0.5 at the window edges, 0.3 in the
/// middle.
pub fn toy_std(x: f64) -> f64 {
    0.5 - 0.1 * (1.0 - (2.0 * std::f64::consts::PI * x / TOY_WINDOW).cos())
}

/// Sample position at demonstration phase `tau ∈ [0, 1]`; samples crowd
/// towards the window edges.
fn toy_input(tau: f64) -> f64 {
    let w = 2.0 * std::f64::consts::PI;
    TOY_WINDOW * (tau - 0.3 * (w * tau).sin() / w)
}

pub fn toy_demonstrations(seed: u64) -> Result<Vec<Demonstration>> {
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(seed, 100));
    let std_normal = Normal::new(0.0, 1.0).expect("unit normal");
    let samples = 200;
    (0..10)
        .map(|_| {
            let mut inputs = Vec::with_capacity(samples);
            let mut outputs = Vec::with_capacity(samples);
            for j in 0..samples {
                let x = toy_input(j as f64 / (samples - 1) as f64);
                let y = toy_mean(x) + toy_std(x) * std_normal.sample(&mut rng);
                inputs.push(DVector::from_element(1, x));
                outputs.push(DVector::from_element(1, y));
            }
            Demonstration::new(inputs, outputs)
        })
        .collect()
}

fn toy1d(seed: u64) -> Result<Scenario> {
    let duration = 4.0;
    let input_signal = InputSignal::new(vec![
        (0.0, DVector::from_element(1, 0.0)),
        (duration, DVector::from_element(1, TOY_WINDOW)),
    ])?;
    Ok(Scenario {
        name: ScenarioName::Toy1d,
        seed,
        subtasks: vec![SubTask {
            label: "toy".into(),
            demonstrations: toy_demonstrations(seed)?,
            hyper: TOY_HYPERPARAMS,
            components: TOY_COMPONENTS,
            reference_points: TOY_REFERENCE_POINTS,
        }],
        input_signal,
        dt: CONTROL_DT,
        duration,
        initial_state: PointMassState::at_rest(DVector::from_element(1, 0.0)),
        r: DMatrix::from_element(1, 1, TASK_R),
        velocity_weight: 0.0,
        schedule: GainSchedule::FiniteHorizon,
    })
}

/// Seven approaches of the hand to the handover point, with the robot moving
/// from a loosely defined start to a tightly defined handover pose. Each
/// demonstration rests 0.5 s before a 3 s approach and 1 s after it.
pub fn handover_demonstrations(seed: u64) -> Result<Vec<Demonstration>> {
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(seed, 101));
    let (rest, motion) = (0.5, 3.0);
    let samples = ((rest + motion + 1.0) * DEMO_RATE) as usize + 1;
    (0..7)
        .map(|_| {
            let hand0 = add_noise(&mut rng, &HANDOVER_HAND_START, 0.06);
            let hand1 = add_noise(&mut rng, &HANDOVER_HAND_END, 0.005);
            let robot0 = add_noise(&mut rng, &HANDOVER_ROBOT_START, 0.08);
            let mut end_offset = DVector::from_vec(add_noise(&mut rng, &[0.0; 3], 0.005));
            if end_offset.norm() > 0.015 {
                end_offset *= 0.015 / end_offset.norm();
            }
            let robot1: Vec<f64> = HANDOVER_ROBOT_END.iter().zip(end_offset.iter()).map(|(a, b)| a + b).collect();
            let mut inputs = Vec::with_capacity(samples);
            let mut outputs = Vec::with_capacity(samples);
            for j in 0..samples {
                let s = min_jerk((j as f64 / DEMO_RATE - rest) / motion);
                inputs.push(noisy(&mut rng, lerp(&hand0, &hand1, s), 0.0015));
                outputs.push(noisy(&mut rng, lerp(&robot0, &robot1, s), 0.0015));
            }
            Demonstration::new(inputs, outputs)
        })
        .collect()
}

/// Five up-and-down strokes with the robot following the hand at a fixed
/// offset.
pub fn painting_demonstrations(seed: u64) -> Result<Vec<Demonstration>> {
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(seed, 102));
    let half = (2.0 * DEMO_RATE) as usize;
    (0..5)
        .map(|_| {
            let base = add_noise(&mut rng, &PAINT_HAND_BASE, 0.01);
            let offset = add_noise(&mut rng, &PAINT_OFFSET, 0.003);
            let top: Vec<f64> = vec![base[0], base[1], base[2] + PAINT_STROKE];
            let mut inputs = Vec::with_capacity(2 * half + 1);
            let mut outputs = Vec::with_capacity(2 * half + 1);
            for j in 0..=2 * half {
                let s = if j <= half {
                    min_jerk(j as f64 / half as f64)
                } else {
                    1.0 - min_jerk((j - half) as f64 / half as f64)
                };
                let hand = lerp(&base, &top, s);
                let robot = &hand + DVector::from_column_slice(&offset);
                inputs.push(noisy(&mut rng, hand, 0.001));
                outputs.push(noisy(&mut rng, robot, 0.001));
            }
            Demonstration::new(inputs, outputs)
        })
        .collect()
}

fn task_subtask(label: &str, demonstrations: Vec<Demonstration>) -> SubTask {
    SubTask {
        label: label.into(),
        demonstrations,
        hyper: TASK_HYPERPARAMS,
        components: TASK_COMPONENTS,
        reference_points: TASK_REFERENCE_POINTS,
    }
}

fn task_scenario(
    name: ScenarioName,
    seed: u64,
    subtasks: Vec<SubTask>,
    input_signal: InputSignal,
    robot_start: &[f64],
) -> Scenario {
    let duration = input_signal.end();
    Scenario {
        name,
        seed,
        subtasks,
        input_signal,
        dt: CONTROL_DT,
        duration,
        initial_state: PointMassState::at_rest(DVector::from_column_slice(robot_start)),
        r: DMatrix::identity(3, 3) * TASK_R,
        velocity_weight: 0.0,
        schedule: GainSchedule::InfiniteHorizon,
    }
}

const TEST_HAND_START: [f64; 3] = [1.55, -0.55, 0.85];
const TEST_ROBOT_START: [f64; 3] = [0.4, 0.3, 0.5];

fn handover(seed: u64) -> Result<Scenario> {
    let end = HANDOVER_HAND_END.to_vec();
    let signal = min_jerk_signal(&TEST_HAND_START, &[(4.0, end.clone()), (2.0, end)], 1.0 / DEMO_RATE)?;
    Ok(task_scenario(
        ScenarioName::Handover,
        seed,
        vec![task_subtask("handover", handover_demonstrations(seed)?)],
        signal,
        &TEST_ROBOT_START,
    ))
}

fn stroke_segments(strokes: usize) -> Vec<(f64, Vec<f64>)> {
    let bottom = PAINT_HAND_BASE.to_vec();
    let top = vec![PAINT_HAND_BASE[0], PAINT_HAND_BASE[1], PAINT_HAND_BASE[2] + PAINT_STROKE];
    (0..strokes)
        .map(|i| (2.0, if i % 2 == 0 { top.clone() } else { bottom.clone() }))
        .collect()
}

fn painting(seed: u64) -> Result<Scenario> {
    let signal = min_jerk_signal(&PAINT_HAND_BASE, &stroke_segments(4), 1.0 / DEMO_RATE)?;
    let robot: Vec<f64> = PAINT_HAND_BASE.iter().zip(&PAINT_OFFSET).map(|(a, b)| a + b).collect();
    Ok(task_scenario(
        ScenarioName::Painting,
        seed,
        vec![task_subtask("painting", painting_demonstrations(seed)?)],
        signal,
        &robot,
    ))
}

/// Handover approach (4 s) and hold (1 s), a move into empty space (2 s)
/// and a pause there (3 s), a move to the board (2 s) and three strokes.
fn painting_full(seed: u64) -> Result<Scenario> {
    let end = HANDOVER_HAND_END.to_vec();
    let gap = GAP_POINT.to_vec();
    let mut segments = vec![
        (4.0, end.clone()),
        (1.0, end),
        (2.0, gap.clone()),
        (3.0, gap),
        (2.0, PAINT_HAND_BASE.to_vec()),
    ];
    segments.extend(stroke_segments(3));
    let signal = min_jerk_signal(&TEST_HAND_START, &segments, 1.0 / DEMO_RATE)?;
    Ok(task_scenario(
        ScenarioName::PaintingFull,
        seed,
        vec![
            task_subtask("handover", handover_demonstrations(seed)?),
            task_subtask("painting", painting_demonstrations(seed)?),
        ],
        signal,
        &TEST_ROBOT_START,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_round_trip() {
        for n in ScenarioName::ALL {
            assert_eq!(n.as_str().parse::<ScenarioName>().unwrap(), n);
        }
        assert!("juggling".parse::<ScenarioName>().is_err());
    }

    #[test]
    fn min_jerk_profile() {
        assert_eq!(min_jerk(0.0), 0.0);
        assert_eq!(min_jerk(1.0), 1.0);
        assert!((min_jerk(0.5) - 0.5).abs() < 1e-15);
        assert_eq!(min_jerk(2.0), 1.0);
    }

    #[test]
    fn handover_endpoints_converge() {
        let demos = handover_demonstrations(3).unwrap();
        assert_eq!(demos.len(), 7);
        let ends: Vec<_> = demos.iter().map(|d| d.outputs().last().unwrap().clone()).collect();
        let target = DVector::from_column_slice(&HANDOVER_ROBOT_END);
        for e in &ends {
            assert!((e - &target).norm() < 0.02);
        }
    }

    #[test]
    fn datasets_are_deterministic() {
        for n in ScenarioName::ALL {
            let a = make_scenario(n, 11).unwrap();
            let b = make_scenario(n, 11).unwrap();
            for (sa, sb) in a.subtasks.iter().zip(&b.subtasks) {
                assert_eq!(sa.demonstrations, sb.demonstrations);
            }
            assert_eq!(a.input_signal, b.input_signal);
        }
    }

    #[test]
    fn signals_cover_the_run() {
        for n in ScenarioName::ALL {
            let s = make_scenario(n, 0).unwrap();
            assert!(s.input_signal.start() <= 0.0);
            assert!(s.input_signal.end() >= s.duration - 1e-9);
        }
        assert!((make_scenario(ScenarioName::PaintingFull, 0).unwrap().duration - 18.0).abs() < 1e-9);
    }
}
