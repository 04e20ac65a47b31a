//! Single and task-partitioned modular tanh RNNs with a shared linear readout.
//!
//! Both architectures are expressed as a list of independent recurrent
//! modules whose final states are concatenated before the readout; the
//! single network is one unmasked module, the modular network two modules
//! fed through complementary binary input masks.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::Matrix;
use crate::taskgen::{INPUT_DIM, OUTPUT_DIM, STIMULI_PER_TASK};

/// RNG stream reserved for weight initialization.
const INIT_STREAM: u64 = 2;
pub const INIT_DISTRIBUTION: &str = "uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) * gamma";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arch {
    Single,
    Modular,
}

impl Arch {
    pub const ALL: [Arch; 2] = [Arch::Single, Arch::Modular];

    pub fn as_str(self) -> &'static str {
        match self {
            Arch::Single => "single",
            Arch::Modular => "modular",
        }
    }
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Arch {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "single" => Ok(Arch::Single),
            "modular" => Ok(Arch::Modular),
            other => Err(format!("unknown architecture '{other}' (expected single or modular)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    pub hidden_single: usize,
    /// Units per module; two modules are concatenated before the readout.
    pub hidden_module: usize,
    pub steps_per_trial: usize,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self { hidden_single: 128, hidden_module: 64, steps_per_trial: 3 }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NetworkError {
    #[error("gamma must be a positive finite number, got {0}")]
    InvalidGamma(f64),
    #[error("invalid network config field `{field}`: {reason}")]
    InvalidConfig { field: &'static str, reason: String },
    #[error("shape mismatch: {0}")]
    Shape(String),
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<(), NetworkError> {
        for (field, v) in [
            ("hidden_single", self.hidden_single),
            ("hidden_module", self.hidden_module),
            ("steps_per_trial", self.steps_per_trial),
        ] {
            if v == 0 {
                return Err(NetworkError::InvalidConfig { field, reason: "must be positive".into() });
            }
        }
        Ok(())
    }
}

/// One recurrent population: `h_t = tanh(W_ih x_t + W_hh h_{t-1})`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecurrentModule {
    pub w_ih: Matrix,
    pub w_hh: Matrix,
}

impl RecurrentModule {
    pub fn hidden(&self) -> usize {
        self.w_hh.rows()
    }

    /// `tanh(W_ih x + W_hh h_prev)`, also returning the pre-activation.
    pub fn step(&self, x: &[f64], h_prev: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let mut pre = self.w_ih.matvec(x);
        for (p, r) in pre.iter_mut().zip(self.w_hh.matvec(h_prev)) {
            *p += r;
        }
        let h = pre.iter().map(|z| z.tanh()).collect();
        (pre, h)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SingleParams {
    pub core: RecurrentModule,
    pub w_out: Matrix,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModularParams {
    pub module_a: RecurrentModule,
    pub module_b: RecurrentModule,
    /// `4 x (H_a + H_b)`; columns follow the concatenation `[h_a; h_b]`.
    pub w_out: Matrix,
    pub mask_a: Vec<f64>,
    pub mask_b: Vec<f64>,
}

/// Task A stimuli (0-5) route to module A, task B stimuli (6-11) to module B.
pub fn task_masks() -> (Vec<f64>, Vec<f64>) {
    let mask_a = (0..INPUT_DIM).map(|i| if i < STIMULI_PER_TASK { 1.0 } else { 0.0 }).collect();
    let mask_b = (0..INPUT_DIM).map(|i| if i < STIMULI_PER_TASK { 0.0 } else { 1.0 }).collect();
    (mask_a, mask_b)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "arch", rename_all = "lowercase")]
pub enum NetworkParams {
    Single(SingleParams),
    Modular(ModularParams),
}

/// Borrowed view of one module together with its input mask.
pub(crate) struct ModuleView<'a> {
    pub module: &'a RecurrentModule,
    pub mask: Option<&'a [f64]>,
}

impl ModuleView<'_> {
    pub fn masked_input(&self, x: &[f64]) -> Vec<f64> {
        match self.mask {
            Some(m) => x.iter().zip(m).map(|(a, b)| a * b).collect(),
            None => x.to_vec(),
        }
    }
}

impl NetworkParams {
    pub fn arch(&self) -> Arch {
        match self {
            NetworkParams::Single(_) => Arch::Single,
            NetworkParams::Modular(_) => Arch::Modular,
        }
    }

    pub fn w_out(&self) -> &Matrix {
        match self {
            NetworkParams::Single(p) => &p.w_out,
            NetworkParams::Modular(p) => &p.w_out,
        }
    }

    /// Width of the (concatenated) pre-readout state.
    pub fn width(&self) -> usize {
        self.w_out().cols()
    }

    pub(crate) fn modules(&self) -> Vec<ModuleView<'_>> {
        match self {
            NetworkParams::Single(p) => vec![ModuleView { module: &p.core, mask: None }],
            NetworkParams::Modular(p) => vec![
                ModuleView { module: &p.module_a, mask: Some(&p.mask_a) },
                ModuleView { module: &p.module_b, mask: Some(&p.mask_b) },
            ],
        }
    }

    /// Trainable matrices in canonical order: per module `w_ih`, `w_hh`, then `w_out`.
    pub fn matrices(&self) -> Vec<(&'static str, &Matrix)> {
        match self {
            NetworkParams::Single(p) => vec![("w_ih", &p.core.w_ih), ("w_hh", &p.core.w_hh), ("w_out", &p.w_out)],
            NetworkParams::Modular(p) => vec![
                ("w_ih_a", &p.module_a.w_ih),
                ("w_hh_a", &p.module_a.w_hh),
                ("w_ih_b", &p.module_b.w_ih),
                ("w_hh_b", &p.module_b.w_hh),
                ("w_out", &p.w_out),
            ],
        }
    }

    pub fn matrices_mut(&mut self) -> Vec<&mut Matrix> {
        match self {
            NetworkParams::Single(p) => vec![&mut p.core.w_ih, &mut p.core.w_hh, &mut p.w_out],
            NetworkParams::Modular(p) => vec![
                &mut p.module_a.w_ih,
                &mut p.module_a.w_hh,
                &mut p.module_b.w_ih,
                &mut p.module_b.w_hh,
                &mut p.w_out,
            ],
        }
    }

    pub fn zero_state(&self) -> HiddenState {
        match self {
            NetworkParams::Single(p) => HiddenState::Single(vec![0.0; p.core.hidden()]),
            NetworkParams::Modular(p) => {
                HiddenState::Modular(vec![0.0; p.module_a.hidden()], vec![0.0; p.module_b.hidden()])
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.matrices().iter().all(|(_, m)| m.is_finite())
    }

    /// Advances every module by one step and applies the readout.
    pub fn step(&self, state: &HiddenState, x: &[f64]) -> (HiddenState, [f64; OUTPUT_DIM]) {
        let (h, _, y) = self.step_detailed(state.parts(), x);
        (HiddenState::from_parts(self.arch(), h), y)
    }

    pub(crate) fn step_detailed(&self, prev: Vec<&[f64]>, x: &[f64]) -> (Vec<Vec<f64>>, Vec<Vec<f64>>, [f64; OUTPUT_DIM]) {
        let mut hidden = Vec::with_capacity(prev.len());
        let mut pre = Vec::with_capacity(prev.len());
        for (view, h_prev) in self.modules().iter().zip(prev) {
            let (z, h) = view.module.step(&view.masked_input(x), h_prev);
            pre.push(z);
            hidden.push(h);
        }
        let y = readout(self.w_out(), &hidden);
        (hidden, pre, y)
    }
}

fn readout(w_out: &Matrix, hidden: &[Vec<f64>]) -> [f64; OUTPUT_DIM] {
    let concat: Vec<f64> = hidden.iter().flatten().copied().collect();
    let y = w_out.matvec(&concat);
    let mut out = [0.0; OUTPUT_DIM];
    out.copy_from_slice(&y);
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum HiddenState {
    Single(Vec<f64>),
    Modular(Vec<f64>, Vec<f64>),
}

impl HiddenState {
    pub fn parts(&self) -> Vec<&[f64]> {
        match self {
            HiddenState::Single(h) => vec![h],
            HiddenState::Modular(a, b) => vec![a, b],
        }
    }

    fn from_parts(arch: Arch, mut parts: Vec<Vec<f64>>) -> Self {
        match arch {
            Arch::Single => HiddenState::Single(parts.pop().expect("single state")),
            Arch::Modular => {
                let b = parts.pop().expect("module b state");
                let a = parts.pop().expect("module a state");
                HiddenState::Modular(a, b)
            }
        }
    }

    /// Pre-readout state: the module states concatenated `[h_a; h_b]`.
    pub fn concat(&self) -> Vec<f64> {
        self.parts().into_iter().flatten().copied().collect()
    }
}

/// Draws weights uniformly on `[-1/sqrt(fan_in), 1/sqrt(fan_in)]` and then
/// multiplies every trainable entry by `gamma`.
///
/// The draws depend only on `(arch, sizes, seed)`, so changing `gamma`
/// rescales the same network.
pub fn init_params(arch: Arch, config: &NetworkConfig, gamma: f64, seed: u64) -> Result<NetworkParams, NetworkError> {
    if !(gamma > 0.0 && gamma.is_finite()) {
        return Err(NetworkError::InvalidGamma(gamma));
    }
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(INIT_STREAM);
    let mut draw = |rows: usize, cols: usize| -> Matrix {
        let bound = 1.0 / (cols as f64).sqrt();
        Matrix::from_fn(rows, cols, |_, _| rng.gen_range(-bound..=bound) * gamma)
    };
    let params = match arch {
        Arch::Single => {
            let h = config.hidden_single;
            let core = RecurrentModule { w_ih: draw(h, INPUT_DIM), w_hh: draw(h, h) };
            NetworkParams::Single(SingleParams { core, w_out: draw(OUTPUT_DIM, h) })
        }
        Arch::Modular => {
            let h = config.hidden_module;
            let module_a = RecurrentModule { w_ih: draw(h, INPUT_DIM), w_hh: draw(h, h) };
            let module_b = RecurrentModule { w_ih: draw(h, INPUT_DIM), w_hh: draw(h, h) };
            let w_out = draw(OUTPUT_DIM, 2 * h);
            let (mask_a, mask_b) = task_masks();
            NetworkParams::Modular(ModularParams { module_a, module_b, w_out, mask_a, mask_b })
        }
    };
    Ok(params)
}

/// `h = tanh(W_ih x + W_hh h_prev)`, `y = W_out h`.
pub fn step_single(params: &SingleParams, h_prev: &[f64], x: &[f64]) -> (Vec<f64>, [f64; OUTPUT_DIM]) {
    let (_, h) = params.core.step(x, h_prev);
    let y = readout(&params.w_out, std::slice::from_ref(&h));
    (h, y)
}

/// Masked, independent module updates followed by the shared readout on `[h_a; h_b]`.
pub fn step_modular(
    params: &ModularParams,
    h_a: &[f64],
    h_b: &[f64],
    x: &[f64],
) -> ((Vec<f64>, Vec<f64>), [f64; OUTPUT_DIM]) {
    let x_a: Vec<f64> = x.iter().zip(&params.mask_a).map(|(v, m)| v * m).collect();
    let x_b: Vec<f64> = x.iter().zip(&params.mask_b).map(|(v, m)| v * m).collect();
    let (_, ha) = params.module_a.step(&x_a, h_a);
    let (_, hb) = params.module_b.step(&x_b, h_b);
    let hidden = [ha, hb];
    let y = readout(&params.w_out, &hidden);
    let [ha, hb] = hidden;
    ((ha, hb), y)
}

/// Everything one step of a trial produced, per module.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceStep {
    pub pre: Vec<Vec<f64>>,
    pub hidden: Vec<Vec<f64>>,
    pub output: [f64; OUTPUT_DIM],
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    /// The trial input, held constant across steps.
    pub input: Vec<f64>,
    /// Module states before the first step.
    pub initial: Vec<Vec<f64>>,
    pub steps: Vec<TraceStep>,
}

impl ForwardTrace {
    pub fn output(&self) -> [f64; OUTPUT_DIM] {
        self.steps.last().expect("trace has at least one step").output
    }

    /// Final pre-readout state, modules concatenated.
    pub fn final_state(&self) -> Vec<f64> {
        self.steps.last().expect("trace has at least one step").hidden.iter().flatten().copied().collect()
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
}

/// Runs one trial from the zero state with the input held for `steps` steps.
pub fn run_trial(params: &NetworkParams, x: &[f64], steps: usize) -> Result<ForwardTrace, NetworkError> {
    run_trial_from(params, &params.zero_state(), x, steps)
}

/// Like [`run_trial`] but starting from an explicit state.
pub fn run_trial_from(
    params: &NetworkParams,
    initial: &HiddenState,
    x: &[f64],
    steps: usize,
) -> Result<ForwardTrace, NetworkError> {
    if steps == 0 {
        return Err(NetworkError::InvalidConfig { field: "steps_per_trial", reason: "must be positive".into() });
    }
    if x.len() != INPUT_DIM {
        return Err(NetworkError::Shape(format!("input has {} entries, expected {INPUT_DIM}", x.len())));
    }
    let initial: Vec<Vec<f64>> = initial.parts().into_iter().map(<[f64]>::to_vec).collect();
    let mut trace = ForwardTrace { input: x.to_vec(), initial: initial.clone(), steps: Vec::with_capacity(steps) };
    let mut prev = initial;
    for _ in 0..steps {
        let (hidden, pre, output) = params.step_detailed(prev.iter().map(Vec::as_slice).collect(), x);
        prev = hidden.clone();
        trace.steps.push(TraceStep { pre, hidden, output });
    }
    Ok(trace)
}

/// Serialized parameters with the metadata needed to reproduce them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub gamma: f64,
    pub seed: u64,
    pub init_distribution: String,
    pub params: NetworkParams,
}

impl Checkpoint {
    pub const FORMAT_VERSION: u32 = 1;

    pub fn new(params: NetworkParams, gamma: f64, seed: u64) -> Self {
        Self { format_version: Self::FORMAT_VERSION, gamma, seed, init_distribution: INIT_DISTRIBUTION.into(), params }
    }
}
