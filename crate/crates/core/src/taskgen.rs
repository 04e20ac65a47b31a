//! The seasons task: stimuli on a circular dial, task rules, similarity
//! conditions and the seeded A1 -> B -> A2 trial schedule.

use std::f64::consts::{PI, TAU};
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::training::LossSpec;

/// Stimuli per task.
pub const STIMULI_PER_TASK: usize = 6;
/// One-hot input width (both tasks).
pub const INPUT_DIM: usize = 2 * STIMULI_PER_TASK;
/// Two cosine-sine pairs: summer then winter.
pub const OUTPUT_DIM: usize = 4;

/// RNG stream reserved for schedule generation.
const SCHEDULE_STREAM: u64 = 1;
const MAX_PLACEMENT_ATTEMPTS: usize = 100_000;

/// Wraps any angle into `(-pi, pi]`.
pub fn wrap_signed(x: f64) -> f64 {
    let r = x.rem_euclid(TAU);
    if r > PI {
        r - TAU
    } else {
        r
    }
}

/// An angle on the dial, stored in radians within `[0, 2pi)`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Angle(f64);

impl Angle {
    pub fn new(radians: f64) -> Self {
        let r = radians.rem_euclid(TAU);
        // rem_euclid can round up to exactly TAU for tiny negative inputs
        Angle(if r >= TAU { 0.0 } else { r })
    }

    pub fn from_degrees(deg: f64) -> Self {
        Self::new(deg.to_radians())
    }

    pub fn radians(self) -> f64 {
        self.0
    }

    pub fn degrees(self) -> f64 {
        self.0.to_degrees()
    }

    /// `self - other`, wrapped into `(-pi, pi]`.
    pub fn signed_diff(self, other: Angle) -> f64 {
        wrap_signed(self.0 - other.0)
    }

    pub fn rotate(self, by: Angle) -> Angle {
        Angle::new(self.0 + by.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Condition {
    Same,
    Near,
    Far,
}

impl Condition {
    pub const ALL: [Condition; 3] = [Condition::Same, Condition::Near, Condition::Far];

    pub fn as_str(self) -> &'static str {
        match self {
            Condition::Same => "same",
            Condition::Near => "near",
            Condition::Far => "far",
        }
    }
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Condition {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "same" => Ok(Condition::Same),
            "near" => Ok(Condition::Near),
            "far" => Ok(Condition::Far),
            other => Err(format!("unknown condition '{other}' (expected same, near or far)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TaskId {
    A,
    B,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Phase {
    A1,
    B,
    A2,
}

impl Phase {
    pub const ALL: [Phase; 3] = [Phase::A1, Phase::B, Phase::A2];

    pub fn task(self) -> TaskId {
        match self {
            Phase::A1 | Phase::A2 => TaskId::A,
            Phase::B => TaskId::B,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Phase::A1 => "A1",
            Phase::B => "B",
            Phase::A2 => "A2",
        }
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Phase {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "A1" => Ok(Phase::A1),
            "B" => Ok(Phase::B),
            "A2" => Ok(Phase::A2),
            other => Err(format!("unknown phase '{other}'")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Season {
    Summer,
    Winter,
}

impl Season {
    pub fn as_str(self) -> &'static str {
        match self {
            Season::Summer => "summer",
            Season::Winter => "winter",
        }
    }

    /// Index of the first output of this season's cosine-sine pair.
    pub fn output_offset(self) -> usize {
        match self {
            Season::Summer => 0,
            Season::Winter => 2,
        }
    }
}

impl fmt::Display for Season {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Season {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "summer" => Ok(Season::Summer),
            "winter" => Ok(Season::Winter),
            other => Err(format!("unknown season '{other}'")),
        }
    }
}

/// Winter location = summer location + offset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TaskRule {
    pub offset: Angle,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StimulusSet {
    pub task: TaskId,
    pub summer_locations: Vec<Angle>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trial {
    pub phase: Phase,
    /// 0-5 are task A stimuli, 6-11 task B.
    pub stimulus_index: usize,
    pub probed_season: Season,
    pub target_angle: Angle,
    pub supervised: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskConfig {
    /// Even. The default is the shortest length at which every calibration
    /// cell converges on A1 (see `runner::calibrate_trials`); at 120 small
    /// initializations never leave the starting saddle.
    pub trials_per_phase: usize,
    pub near_offset_deg: f64,
    pub far_offset_deg: f64,
    pub min_separation_deg: f64,
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self { trials_per_phase: 960, near_offset_deg: 30.0, far_offset_deg: 150.0, min_separation_deg: 15.0 }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TaskError {
    #[error("invalid task config field `{field}`: {reason}")]
    InvalidConfig { field: &'static str, reason: String },
    #[error("could not place {STIMULI_PER_TASK} stimuli with {0} degree separation")]
    Placement(f64),
    #[error("stimulus index {0} out of range")]
    StimulusIndex(usize),
    #[error("schedule invariant violated: {0}")]
    Invariant(String),
}

impl TaskConfig {
    pub fn validate(&self) -> Result<(), TaskError> {
        let invalid = |field, reason: &str| Err(TaskError::InvalidConfig { field, reason: reason.to_string() });
        if self.trials_per_phase == 0 {
            return invalid("trials_per_phase", "must be positive");
        }
        if !self.trials_per_phase.is_multiple_of(2) {
            return invalid("trials_per_phase", "must be even so seasons can alternate");
        }
        for (field, v) in [("near_offset_deg", self.near_offset_deg), ("far_offset_deg", self.far_offset_deg)] {
            if !(v > 0.0 && v <= 180.0) {
                return invalid(field, "must lie in (0, 180] degrees");
            }
        }
        let max_sep = 360.0 / STIMULI_PER_TASK as f64;
        if !(self.min_separation_deg >= 0.0 && self.min_separation_deg < max_sep) {
            return invalid("min_separation_deg", &format!("must lie in [0, {max_sep}) degrees"));
        }
        Ok(())
    }

    /// Signed offset of rule B relative to rule A.
    pub fn condition_offset(&self, condition: Condition) -> Angle {
        match condition {
            Condition::Same => Angle::new(0.0),
            Condition::Near => Angle::from_degrees(self.near_offset_deg),
            Condition::Far => Angle::from_degrees(self.far_offset_deg),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub condition: Condition,
    pub rule_a: TaskRule,
    pub rule_b: TaskRule,
    pub stimuli_a: StimulusSet,
    pub stimuli_b: StimulusSet,
    pub trials: Vec<Trial>,
    pub seed: u64,
}

impl Schedule {
    pub fn rule(&self, phase: Phase) -> TaskRule {
        match phase.task() {
            TaskId::A => self.rule_a,
            TaskId::B => self.rule_b,
        }
    }

    /// Summer location of a stimulus by global index (0-11).
    pub fn summer_location(&self, stimulus_index: usize) -> Angle {
        if stimulus_index < STIMULI_PER_TASK {
            self.stimuli_a.summer_locations[stimulus_index]
        } else {
            self.stimuli_b.summer_locations[stimulus_index - STIMULI_PER_TASK]
        }
    }

    pub fn phase_trials(&self, phase: Phase) -> impl Iterator<Item = &Trial> {
        self.trials.iter().filter(move |t| t.phase == phase)
    }

    /// Checks phase contiguity, season alternation, stimulus ranges, target
    /// consistency and per-phase stimulus balance.
    pub fn validate(&self) -> Result<(), TaskError> {
        let bad = |msg: String| Err(TaskError::Invariant(msg));
        let mut last_phase = None::<Phase>;
        for (i, t) in self.trials.iter().enumerate() {
            if let Some(p) = last_phase {
                if t.phase < p {
                    return bad(format!("trial {i}: phase {} after {}", t.phase, p));
                }
                let prev = &self.trials[i - 1];
                if prev.phase == t.phase && prev.probed_season == t.probed_season {
                    return bad(format!("trial {i}: season does not alternate"));
                }
            }
            last_phase = Some(t.phase);
            let in_range = match t.phase.task() {
                TaskId::A => t.stimulus_index < STIMULI_PER_TASK,
                TaskId::B => (STIMULI_PER_TASK..INPUT_DIM).contains(&t.stimulus_index),
            };
            if !in_range {
                return bad(format!("trial {i}: stimulus {} in phase {}", t.stimulus_index, t.phase));
            }
            let summer = self.summer_location(t.stimulus_index);
            let expected = match t.probed_season {
                Season::Summer => summer,
                Season::Winter => summer.rotate(self.rule(t.phase).offset),
            };
            if t.target_angle.signed_diff(expected).abs() > 1e-12 {
                return bad(format!("trial {i}: inconsistent target"));
            }
        }
        for phase in Phase::ALL {
            for season in [Season::Summer, Season::Winter] {
                let mut counts = [0usize; INPUT_DIM];
                for t in self.phase_trials(phase).filter(|t| t.probed_season == season) {
                    counts[t.stimulus_index] += 1;
                }
                let range = match phase.task() {
                    TaskId::A => 0..STIMULI_PER_TASK,
                    TaskId::B => STIMULI_PER_TASK..INPUT_DIM,
                };
                let c = &counts[range];
                let (lo, hi) = (c.iter().min().unwrap(), c.iter().max().unwrap());
                if hi - lo > 1 {
                    return bad(format!("phase {phase} {season}: unbalanced stimulus counts {c:?}"));
                }
            }
        }
        Ok(())
    }
}

/// Builds the full A1 -> B -> A2 schedule.
///
/// Rule A is uniform on the dial and rule B is rule A shifted by the
/// condition's offset. Each phase is a block-randomized stream of stimulus
/// presentations; every presentation is a summer probe immediately followed
/// by a winter probe of the same plant, so seasons alternate trial by trial.
/// A2 replays task A's stimuli and rule.
pub fn make_schedule(condition: Condition, config: &TaskConfig, seed: u64) -> Result<Schedule, TaskError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(SCHEDULE_STREAM);

    let rule_a = TaskRule { offset: Angle::new(rng.gen_range(0.0..TAU)) };
    let rule_b = TaskRule { offset: rule_a.offset.rotate(config.condition_offset(condition)) };
    let stimuli_a = StimulusSet { task: TaskId::A, summer_locations: place_stimuli(&mut rng, config)? };
    let stimuli_b = StimulusSet { task: TaskId::B, summer_locations: place_stimuli(&mut rng, config)? };

    let mut schedule = Schedule { condition, rule_a, rule_b, stimuli_a, stimuli_b, trials: Vec::new(), seed };
    let presentations = config.trials_per_phase / 2;
    let mut trials = Vec::with_capacity(3 * config.trials_per_phase);
    for phase in Phase::ALL {
        let base = match phase.task() {
            TaskId::A => 0,
            TaskId::B => STIMULI_PER_TASK,
        };
        let rule = schedule.rule(phase).offset;
        let mut order: Vec<usize> = Vec::with_capacity(presentations + STIMULI_PER_TASK);
        while order.len() < presentations {
            let mut block: Vec<usize> = (0..STIMULI_PER_TASK).collect();
            block.shuffle(&mut rng);
            order.extend(block);
        }
        order.truncate(presentations);
        for local in order {
            let idx = base + local;
            let summer = schedule.summer_location(idx);
            for (season, target) in [(Season::Summer, summer), (Season::Winter, summer.rotate(rule))] {
                trials.push(Trial { phase, stimulus_index: idx, probed_season: season, target_angle: target, supervised: true });
            }
        }
    }
    schedule.trials = trials;
    Ok(schedule)
}

fn place_stimuli(rng: &mut ChaCha8Rng, config: &TaskConfig) -> Result<Vec<Angle>, TaskError> {
    let min_sep = config.min_separation_deg.to_radians();
    let mut locations: Vec<Angle> = Vec::with_capacity(STIMULI_PER_TASK);
    let mut attempts = 0;
    while locations.len() < STIMULI_PER_TASK {
        attempts += 1;
        if attempts > MAX_PLACEMENT_ATTEMPTS {
            return Err(TaskError::Placement(config.min_separation_deg));
        }
        let cand = Angle::new(rng.gen_range(0.0..TAU));
        if locations.iter().all(|l| cand.signed_diff(*l).abs() >= min_sep) {
            locations.push(cand);
        }
    }
    Ok(locations)
}

/// One-hot encoding of the trial's stimulus.
pub fn encode_input(trial: &Trial) -> Result<Vec<f64>, TaskError> {
    one_hot(trial.stimulus_index)
}

pub fn one_hot(index: usize) -> Result<Vec<f64>, TaskError> {
    if index >= INPUT_DIM {
        return Err(TaskError::StimulusIndex(index));
    }
    let mut x = vec![0.0; INPUT_DIM];
    x[index] = 1.0;
    Ok(x)
}

/// `(cos s, sin s, cos w, sin w)` for the stimulus's summer and winter
/// locations, masked to the probed season's pair.
pub fn encode_target(trial: &Trial, schedule: &Schedule) -> LossSpec {
    let summer = schedule.summer_location(trial.stimulus_index);
    let winter = summer.rotate(schedule.rule(trial.phase).offset);
    let target = [summer.radians().cos(), summer.radians().sin(), winter.radians().cos(), winter.radians().sin()];
    LossSpec::new(target, trial.probed_season)
}

/// All twelve one-hot inputs in index order; task A first.
pub fn canonical_sweep() -> Vec<Vec<f64>> {
    (0..INPUT_DIM).map(|i| one_hot(i).expect("index within input width")).collect()
}
