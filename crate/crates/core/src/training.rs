//! Masked MSE, backpropagation through time, online SGD and the
//! A1 -> B -> A2 protocol driver.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::Matrix;
use crate::metrics::predicted_angle;
use crate::network::{init_params, run_trial, Arch, ForwardTrace, NetworkConfig, NetworkError, NetworkParams};
use crate::taskgen::{canonical_sweep, encode_input, encode_target, Phase, Schedule, Season, TaskError, OUTPUT_DIM};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Task(#[from] TaskError),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid hyperparameter `{field}`: {reason}")]
    InvalidHyper { field: &'static str, reason: String },
    #[error("training diverged at trial {trial} (loss {loss})")]
    Diverged { trial: usize, loss: f64 },
}

/// Target outputs and the probed-season mask.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossSpec {
    pub target: [f64; OUTPUT_DIM],
    pub mask: [f64; OUTPUT_DIM],
}

impl LossSpec {
    pub fn new(target: [f64; OUTPUT_DIM], season: Season) -> Self {
        let mask = match season {
            Season::Summer => [1.0, 1.0, 0.0, 0.0],
            Season::Winter => [0.0, 0.0, 1.0, 1.0],
        };
        Self { target, mask }
    }

    pub fn season(&self) -> Season {
        if self.mask[0] == 1.0 {
            Season::Summer
        } else {
            Season::Winter
        }
    }

    fn active(&self) -> f64 {
        self.mask.iter().sum()
    }
}

/// Mean of the squared errors over the masked-in outputs.
pub fn masked_mse(y: &[f64; OUTPUT_DIM], spec: &LossSpec) -> f64 {
    let sse: f64 = y.iter().zip(&spec.target).zip(&spec.mask).map(|((y, t), m)| m * (y - t) * (y - t)).sum();
    sse / spec.active()
}

/// One gradient matrix per trainable matrix, in [`NetworkParams::matrices`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub names: Vec<&'static str>,
    pub mats: Vec<Matrix>,
}

impl Gradients {
    pub fn zeros_like(params: &NetworkParams) -> Self {
        let (names, mats) = params.matrices().into_iter().map(|(n, m)| (n, Matrix::zeros(m.rows(), m.cols()))).unzip();
        Self { names, mats }
    }

    pub fn get(&self, name: &str) -> Option<&Matrix> {
        self.names.iter().position(|n| *n == name).map(|i| &self.mats[i])
    }

    pub fn global_norm(&self) -> f64 {
        self.mats.iter().map(|m| m.as_slice().iter().map(|v| v * v).sum::<f64>()).sum::<f64>().sqrt()
    }

    /// Rescales to `max_norm` if the global norm exceeds it; returns whether it did.
    pub fn clip_global_norm(&mut self, max_norm: f64) -> bool {
        let n = self.global_norm();
        if n > max_norm {
            let s = max_norm / n;
            self.mats.iter_mut().for_each(|m| m.scale(s));
            true
        } else {
            false
        }
    }
}

/// `acc += a b^T`, skipping zero entries of `b`.
fn add_outer(acc: &mut Matrix, a: &[f64], b: &[f64]) {
    for (j, bj) in b.iter().enumerate() {
        if *bj == 0.0 {
            continue;
        }
        for (i, ai) in a.iter().enumerate() {
            acc[(i, j)] += ai * bj;
        }
    }
}

/// Exact gradient of the final-step masked MSE with respect to every
/// trainable matrix, propagated back through all steps of the trace.
pub fn bptt(params: &NetworkParams, trace: &ForwardTrace, spec: &LossSpec) -> Result<Gradients, TrainError> {
    let modules = params.modules();
    let last = trace.steps.last().ok_or_else(|| TrainError::Shape("empty trace".into()))?;
    if last.hidden.len() != modules.len() || trace.initial.len() != modules.len() {
        return Err(TrainError::Shape(format!(
            "trace has {} modules, params have {}",
            last.hidden.len(),
            modules.len()
        )));
    }
    for (i, view) in modules.iter().enumerate() {
        let h = view.module.hidden();
        if trace.steps.iter().any(|s| s.hidden[i].len() != h) || trace.initial[i].len() != h {
            return Err(TrainError::Shape(format!("module {i} expects hidden size {h}")));
        }
    }

    let mut grads = Gradients::zeros_like(params);
    let y = last.output;
    let scale = 2.0 / spec.active();
    let dy: Vec<f64> = (0..OUTPUT_DIM).map(|k| scale * spec.mask[k] * (y[k] - spec.target[k])).collect();

    let concat: Vec<f64> = last.hidden.iter().flatten().copied().collect();
    let out_idx = grads.mats.len() - 1;
    add_outer(&mut grads.mats[out_idx], &dy, &concat);
    let d_concat = params.w_out().matvec_t(&dy);

    let mut offset = 0;
    for (m, view) in modules.iter().enumerate() {
        let h_size = view.module.hidden();
        let mut dh = d_concat[offset..offset + h_size].to_vec();
        offset += h_size;
        let x = view.masked_input(&trace.input);
        let (g_ih, rest) = grads.mats[2 * m..].split_at_mut(1);
        let (g_ih, g_hh) = (&mut g_ih[0], &mut rest[0]);
        for t in (0..trace.steps.len()).rev() {
            let h_t = &trace.steps[t].hidden[m];
            let dz: Vec<f64> = dh.iter().zip(h_t).map(|(d, h)| d * (1.0 - h * h)).collect();
            add_outer(g_ih, &dz, &x);
            let h_prev = if t == 0 { &trace.initial[m] } else { &trace.steps[t - 1].hidden[m] };
            add_outer(g_hh, &dz, h_prev);
            dh = view.module.w_hh.matvec_t(&dz);
        }
    }
    Ok(grads)
}

/// `params -= lr * grads`, entrywise.
pub fn sgd_step(params: &mut NetworkParams, grads: &Gradients, lr: f64) -> Result<(), TrainError> {
    if !(lr >= 0.0 && lr.is_finite()) {
        return Err(TrainError::InvalidHyper { field: "lr", reason: format!("must be non-negative, got {lr}") });
    }
    let mats = params.matrices_mut();
    if mats.len() != grads.mats.len() {
        return Err(TrainError::Shape("gradient count does not match parameters".into()));
    }
    for (p, g) in mats.into_iter().zip(&grads.mats) {
        if p.shape() != g.shape() {
            return Err(TrainError::Shape(format!("gradient {:?} vs parameter {:?}", g.shape(), p.shape())));
        }
        for (w, d) in p.as_mut_slice().iter_mut().zip(g.as_slice()) {
            *w -= lr * d;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Hyper {
    pub lr: f64,
    /// Global gradient-norm ceiling.
    pub clip_norm: f64,
    /// Loss above which a run is aborted as diverged.
    pub divergence_loss: f64,
}

impl Default for Hyper {
    fn default() -> Self {
        Self { lr: DEFAULT_LR, clip_norm: 10.0, divergence_loss: 1e6 }
    }
}

/// Learning rate frozen from the calibration sweep (see `runner::calibrate_lr`).
/// Chosen jointly with the default phase length: at 960 trials the rate
/// calibration picks 0.1, and at 0.1 the trial calibration picks 960.
pub const DEFAULT_LR: f64 = 0.1;

impl Hyper {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |field, v: f64| TrainError::InvalidHyper { field, reason: format!("must be positive, got {v}") };
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(bad("lr", self.lr));
        }
        if !(self.clip_norm > 0.0) {
            return Err(bad("clip_norm", self.clip_norm));
        }
        if !(self.divergence_loss > 0.0) {
            return Err(bad("divergence_loss", self.divergence_loss));
        }
        Ok(())
    }
}

/// One row of `run.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub phase: Phase,
    /// Index into the schedule's trial list.
    pub trial: usize,
    pub season: Season,
    pub target_deg: f64,
    /// Empty when the probed output pair is too close to zero to define an angle.
    pub predicted_deg: Option<f64>,
    pub loss: f64,
}

/// Final-step states for the canonical 12-stimulus sweep, one row per stimulus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "PhaseTraceRows", try_from = "PhaseTraceRows")]
pub struct PhaseTrace {
    pub phase: Phase,
    pub states: Matrix,
}

#[derive(Serialize, Deserialize)]
struct PhaseTraceRows {
    phase: Phase,
    rows: Vec<Vec<f64>>,
}

impl From<PhaseTrace> for PhaseTraceRows {
    fn from(t: PhaseTrace) -> Self {
        let rows = (0..t.states.rows()).map(|i| t.states.row(i).to_vec()).collect();
        Self { phase: t.phase, rows }
    }
}

impl TryFrom<PhaseTraceRows> for PhaseTrace {
    type Error = String;

    fn try_from(r: PhaseTraceRows) -> Result<Self, Self::Error> {
        let states = Matrix::from_rows(&r.rows).map_err(|e| e.to_string())?;
        Ok(Self { phase: r.phase, states })
    }
}

/// Runs the canonical sweep without learning and stacks the final states.
pub fn extract_phase_trace(params: &NetworkParams, phase: Phase, steps: usize) -> Result<PhaseTrace, TrainError> {
    let rows = canonical_sweep()
        .iter()
        .map(|x| run_trial(params, x, steps).map(|t| t.final_state()))
        .collect::<Result<Vec<_>, _>>()?;
    let states = Matrix::from_rows(&rows).map_err(|e| TrainError::Shape(e.to_string()))?;
    Ok(PhaseTrace { phase, states })
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub records: Vec<TrialRecord>,
    /// Snapshots after A1, B and A2, in that order.
    pub traces: Vec<PhaseTrace>,
    pub final_params: NetworkParams,
    /// Number of updates whose gradient was clipped.
    pub clip_events: usize,
}

/// Trains one freshly initialized network through the whole schedule with
/// one forward pass and one SGD update per supervised trial, snapshotting
/// the canonical sweep after the last trial of each phase.
pub fn run_protocol(
    schedule: &Schedule,
    arch: Arch,
    gamma: f64,
    network: &NetworkConfig,
    hyper: &Hyper,
    seed: u64,
) -> Result<RunResult, TrainError> {
    hyper.validate()?;
    network.validate()?;
    if schedule.trials.is_empty() {
        return Err(TaskError::InvalidConfig { field: "trials_per_phase", reason: "schedule is empty".into() }.into());
    }
    for phase in Phase::ALL {
        if schedule.phase_trials(phase).next().is_none() {
            return Err(TaskError::InvalidConfig {
                field: "trials_per_phase",
                reason: format!("phase {phase} has no trials"),
            }
            .into());
        }
    }
    let mut params = init_params(arch, network, gamma, seed)?;
    let steps = network.steps_per_trial;
    let mut records = Vec::with_capacity(schedule.trials.len());
    let mut traces = Vec::with_capacity(3);
    let mut clip_events = 0;

    for (i, trial) in schedule.trials.iter().enumerate() {
        let x = encode_input(trial)?;
        let spec = encode_target(trial, schedule);
        let trace = run_trial(&params, &x, steps)?;
        let y = trace.output();
        let loss = masked_mse(&y, &spec);
        if !loss.is_finite() || loss > hyper.divergence_loss {
            return Err(TrainError::Diverged { trial: i, loss });
        }
        records.push(TrialRecord {
            phase: trial.phase,
            trial: i,
            season: trial.probed_season,
            target_deg: trial.target_angle.degrees(),
            predicted_deg: predicted_angle(&y, trial.probed_season).map(|a| a.degrees()),
            loss,
        });
        if trial.supervised {
            let mut grads = bptt(&params, &trace, &spec)?;
            if grads.clip_global_norm(hyper.clip_norm) {
                clip_events += 1;
            }
            sgd_step(&mut params, &grads, hyper.lr)?;
            if !params.is_finite() {
                return Err(TrainError::Diverged { trial: i, loss: f64::NAN });
            }
        }
        let phase_ends = schedule.trials.get(i + 1).is_none_or(|next| next.phase != trial.phase);
        if phase_ends {
            traces.push(extract_phase_trace(&params, trial.phase, steps)?);
        }
    }
    Ok(RunResult { records, traces, final_params: params, clip_events })
}
