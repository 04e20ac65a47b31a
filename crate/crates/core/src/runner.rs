//! Sweep configuration, per-cell execution and persistence, aggregation and
//! re-analysis of stored runs.
//!
//! Output layout under the output root:
//!
//! ```text
//! config.toml            effective configuration
//! results.csv            one row per cell
//! aggregate.csv          seed means / standard errors per (arch, condition, gamma)
//! cells/<cell>/          schedule.json run.csv traces.json pca3.json
//!                        params_final.json meta.json cell.json
//! ```
//!
//! `cell.json` is written last; a cell directory without a valid one is
//! recomputed on the next sweep.

use std::cmp::Ordering;
use std::fmt;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{bail, Context};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::geometry::{summarize_geometry, GeometrySummary};
use crate::metrics::{summarize_behavior, BehavioralSummary};
use crate::network::{Arch, Checkpoint, NetworkConfig, INIT_DISTRIBUTION};
use crate::taskgen::{make_schedule, Condition, Phase, Schedule, TaskConfig};
use crate::training::{run_protocol, Hyper, PhaseTrace, TrainError, TrialRecord};

pub const CODE_VERSION: &str = env!("CARGO_PKG_VERSION");
pub const CONFIG_SCHEMA_VERSION: u32 = 1;
/// Overrides `output_dir` from the configuration.
pub const OUTPUT_ROOT_ENV: &str = "SEASONS_OUTPUT_ROOT";
pub const ACCURACY_FORM: &str = "1 - |wrapped error| / pi";

pub const DEFAULT_GAMMAS: [f64; 6] = [2.0, 1.0, 0.5, 0.1, 0.01, 0.001];

fn default_schema() -> u32 {
    CONFIG_SCHEMA_VERSION
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    #[serde(default = "default_schema")]
    pub schema_version: u32,
    pub output_dir: PathBuf,
    pub architectures: Vec<Arch>,
    pub conditions: Vec<Condition>,
    pub gamma_grid: Vec<f64>,
    pub seeds: Vec<u64>,
    /// Worker threads; 0 lets the pool decide.
    pub workers: usize,
    pub task: TaskConfig,
    pub network: NetworkConfig,
    pub training: Hyper,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            schema_version: CONFIG_SCHEMA_VERSION,
            output_dir: PathBuf::from("seasons-out"),
            architectures: Arch::ALL.to_vec(),
            conditions: Condition::ALL.to_vec(),
            gamma_grid: DEFAULT_GAMMAS.to_vec(),
            seeds: (0..10).collect(),
            workers: 0,
            task: TaskConfig::default(),
            network: NetworkConfig::default(),
            training: Hyper::default(),
        }
    }
}

impl SweepConfig {
    pub fn from_toml(text: &str) -> anyhow::Result<Self> {
        let cfg: SweepConfig = toml::from_str(text).context("parsing sweep config")?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        Self::from_toml(&text).with_context(|| format!("in config {}", path.display()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("sweep config serializes to toml")
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        if self.schema_version != CONFIG_SCHEMA_VERSION {
            bail!("unsupported schema_version {} (expected {CONFIG_SCHEMA_VERSION})", self.schema_version);
        }
        if self.architectures.is_empty() {
            bail!("architectures must not be empty");
        }
        if self.conditions.is_empty() {
            bail!("conditions must not be empty");
        }
        if self.gamma_grid.is_empty() {
            bail!("gamma_grid must not be empty");
        }
        if let Some(g) = self.gamma_grid.iter().find(|g| !(**g > 0.0 && g.is_finite())) {
            bail!("gamma_grid values must be positive, got {g}");
        }
        if self.seeds.is_empty() {
            bail!("seeds must not be empty");
        }
        let mut seeds = self.seeds.clone();
        seeds.sort_unstable();
        seeds.dedup();
        if seeds.len() != self.seeds.len() {
            bail!("seeds must be distinct");
        }
        self.task.validate()?;
        self.network.validate()?;
        self.training.validate()?;
        Ok(())
    }

    /// `output_dir`, unless the environment override is set.
    pub fn output_root(&self) -> PathBuf {
        std::env::var_os(OUTPUT_ROOT_ENV).map(PathBuf::from).unwrap_or_else(|| self.output_dir.clone())
    }

    /// Every cell of the grid in canonical order.
    pub fn cells(&self) -> Vec<CellKey> {
        let mut keys = Vec::new();
        for &arch in &self.architectures {
            for &condition in &self.conditions {
                for &gamma in &self.gamma_grid {
                    for &seed in &self.seeds {
                        keys.push(CellKey { arch, condition, gamma, seed });
                    }
                }
            }
        }
        keys.sort();
        keys.dedup();
        keys
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CellKey {
    pub arch: Arch,
    pub condition: Condition,
    pub gamma: f64,
    pub seed: u64,
}

impl Eq for CellKey {}

impl Ord for CellKey {
    fn cmp(&self, other: &Self) -> Ordering {
        self.arch
            .cmp(&other.arch)
            .then(self.condition.cmp(&other.condition))
            .then(self.gamma.total_cmp(&other.gamma))
            .then(self.seed.cmp(&other.seed))
    }
}

impl PartialOrd for CellKey {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl fmt::Display for CellKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}_{}_g{}_s{}", self.arch, self.condition, self.gamma, self.seed)
    }
}

impl FromStr for CellKey {
    type Err = String;

    /// Parses the directory form `modular_far_g0.001_s1`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let parts: Vec<&str> = s.split('_').collect();
        let [arch, condition, gamma, seed] = parts.as_slice() else {
            return Err(format!("cell key '{s}' is not of the form <arch>_<condition>_g<gamma>_s<seed>"));
        };
        let gamma = gamma.strip_prefix('g').and_then(|g| g.parse().ok()).ok_or(format!("bad gamma in '{s}'"))?;
        let seed = seed.strip_prefix('s').and_then(|v| v.parse().ok()).ok_or(format!("bad seed in '{s}'"))?;
        Ok(CellKey { arch: arch.parse()?, condition: condition.parse()?, gamma, seed })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CellStatus {
    Ok,
    Diverged,
    Failed,
}

impl CellStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            CellStatus::Ok => "ok",
            CellStatus::Diverged => "diverged",
            CellStatus::Failed => "failed",
        }
    }
}

/// Settings that produced a cell; a stored cell is reused only when these match.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellMeta {
    pub code_version: String,
    pub config_schema_version: u32,
    pub init_distribution: String,
    pub accuracy_form: String,
    pub task: TaskConfig,
    pub network: NetworkConfig,
    pub training: Hyper,
    pub clip_events: usize,
}

impl CellMeta {
    fn new(config: &SweepConfig, clip_events: usize) -> Self {
        Self {
            code_version: CODE_VERSION.into(),
            config_schema_version: CONFIG_SCHEMA_VERSION,
            init_distribution: INIT_DISTRIBUTION.into(),
            accuracy_form: ACCURACY_FORM.into(),
            task: config.task.clone(),
            network: config.network.clone(),
            training: config.training.clone(),
            clip_events,
        }
    }

    fn matches(&self, config: &SweepConfig) -> bool {
        self.code_version == CODE_VERSION
            && self.config_schema_version == CONFIG_SCHEMA_VERSION
            && self.task == config.task
            && self.network == config.network
            && self.training == config.training
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub key: CellKey,
    pub status: CellStatus,
    pub behavior: Option<BehavioralSummary>,
    pub geometry: Option<GeometrySummary>,
    pub meta: CellMeta,
    pub error: Option<String>,
}

/// Everything a finished cell writes to disk.
pub struct CellArtifacts {
    pub schedule: Schedule,
    pub records: Vec<TrialRecord>,
    pub traces: Vec<PhaseTrace>,
    pub checkpoint: Option<Checkpoint>,
}

fn analyze_run(
    key: CellKey,
    meta: CellMeta,
    schedule: &Schedule,
    records: &[TrialRecord],
    traces: &[PhaseTrace],
) -> CellResult {
    let analysis = summarize_behavior(records, schedule)
        .map_err(|e| e.to_string())
        .and_then(|b| summarize_geometry(traces).map(|g| (b, g)).map_err(|e| e.to_string()));
    match analysis {
        Ok((b, g)) => CellResult { key, status: CellStatus::Ok, behavior: Some(b), geometry: Some(g), meta, error: None },
        Err(e) => CellResult { key, status: CellStatus::Failed, behavior: None, geometry: None, meta, error: Some(e) },
    }
}

/// Trains and analyses one cell in memory.
pub fn compute_cell(key: CellKey, config: &SweepConfig) -> (CellResult, Option<CellArtifacts>) {
    let failed = |status, error: String, meta| CellResult { key, status, behavior: None, geometry: None, meta, error: Some(error) };
    let schedule = match make_schedule(key.condition, &config.task, key.seed) {
        Ok(s) => s,
        Err(e) => return (failed(CellStatus::Failed, e.to_string(), CellMeta::new(config, 0)), None),
    };
    let run = run_protocol(&schedule, key.arch, key.gamma, &config.network, &config.training, key.seed);
    let run = match run {
        Ok(r) => r,
        Err(e) => {
            let status = if matches!(e, TrainError::Diverged { .. }) { CellStatus::Diverged } else { CellStatus::Failed };
            let artifacts = CellArtifacts { schedule, records: Vec::new(), traces: Vec::new(), checkpoint: None };
            return (failed(status, e.to_string(), CellMeta::new(config, 0)), Some(artifacts));
        }
    };
    let meta = CellMeta::new(config, run.clip_events);
    let result = analyze_run(key, meta, &schedule, &run.records, &run.traces);
    let checkpoint = Checkpoint::new(run.final_params, key.gamma, key.seed);
    (result, Some(CellArtifacts { schedule, records: run.records, traces: run.traces, checkpoint: Some(checkpoint) }))
}

fn write_atomic(path: &Path, bytes: &[u8]) -> io::Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    write_atomic(path, text.as_bytes()).with_context(|| format!("writing {}", path.display()))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> anyhow::Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

pub fn write_records_csv(path: &Path, records: &[TrialRecord]) -> anyhow::Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in records {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| anyhow::anyhow!("flushing csv: {e}"))?;
    write_atomic(path, &bytes).with_context(|| format!("writing {}", path.display()))
}

pub fn read_records_csv(path: &Path) -> anyhow::Result<Vec<TrialRecord>> {
    let mut r = csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
    r.deserialize().collect::<Result<Vec<TrialRecord>, _>>().with_context(|| format!("parsing {}", path.display()))
}

pub fn cell_dir(root: &Path, key: &CellKey) -> PathBuf {
    root.join("cells").join(key.to_string())
}

/// Writes a cell's artifacts, finishing with `cell.json`.
pub fn persist_cell(root: &Path, result: &CellResult, artifacts: Option<&CellArtifacts>) -> anyhow::Result<()> {
    let dir = cell_dir(root, &result.key);
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    write_json(&dir.join("meta.json"), &(&result.key, &result.meta))?;
    if let Some(a) = artifacts {
        write_json(&dir.join("schedule.json"), &a.schedule)?;
        if !a.records.is_empty() {
            write_records_csv(&dir.join("run.csv"), &a.records)?;
        }
        if !a.traces.is_empty() {
            write_json(&dir.join("traces.json"), &a.traces)?;
        }
        if let Some(ck) = &a.checkpoint {
            write_json(&dir.join("params_final.json"), ck)?;
        }
    }
    if let Some(g) = &result.geometry {
        write_json(&dir.join("pca3.json"), &g.pca3)?;
    }
    write_json(&dir.join("cell.json"), result)
}

/// A stored cell that parses, has the expected key and was produced by the
/// same settings.
pub fn load_valid_cell(root: &Path, key: &CellKey, config: &SweepConfig) -> Option<CellResult> {
    let dir = cell_dir(root, key);
    let result: CellResult = read_json(&dir.join("cell.json")).ok()?;
    if result.key != *key || !result.meta.matches(config) {
        return None;
    }
    if result.status == CellStatus::Ok && !(dir.join("run.csv").is_file() && dir.join("traces.json").is_file()) {
        return None;
    }
    Some(result)
}

/// One row of `results.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub arch: Arch,
    pub condition: Condition,
    pub gamma: f64,
    pub seed: u64,
    pub status: CellStatus,
    pub transfer: Option<f64>,
    pub interference: Option<f64>,
    #[serde(rename = "fit_w_A")]
    pub fit_w_a: Option<f64>,
    pub fit_kappa: Option<f64>,
    pub degenerate: Option<bool>,
    #[serde(rename = "eff_dim_A1")]
    pub eff_dim_a1: Option<usize>,
    #[serde(rename = "eff_dim_B")]
    pub eff_dim_b: Option<usize>,
    #[serde(rename = "eff_dim_A2")]
    pub eff_dim_a2: Option<usize>,
    pub principal_angle_deg: Option<f64>,
    pub angle_degenerate: Option<bool>,
    pub undefined_angle_count: Option<usize>,
    pub a1_winter_error_deg: Option<f64>,
    pub lr: f64,
    pub n_trials_per_phase: usize,
}

pub const RESULT_COLUMNS: [&str; 19] = [
    "arch",
    "condition",
    "gamma",
    "seed",
    "status",
    "transfer",
    "interference",
    "fit_w_A",
    "fit_kappa",
    "degenerate",
    "eff_dim_A1",
    "eff_dim_B",
    "eff_dim_A2",
    "principal_angle_deg",
    "angle_degenerate",
    "undefined_angle_count",
    "a1_winter_error_deg",
    "lr",
    "n_trials_per_phase",
];

impl From<&CellResult> for ResultRow {
    fn from(c: &CellResult) -> Self {
        let b = c.behavior.as_ref();
        let g = c.geometry.as_ref();
        let eff = |i: usize| g.map(|g| g.eff_dim[i].count);
        ResultRow {
            arch: c.key.arch,
            condition: c.key.condition,
            gamma: c.key.gamma,
            seed: c.key.seed,
            status: c.status,
            transfer: b.map(|b| b.transfer),
            interference: b.map(|b| b.interference),
            fit_w_a: b.map(|b| b.fit.w_a),
            fit_kappa: b.map(|b| b.fit.kappa),
            degenerate: b.map(|b| b.fit.degenerate),
            eff_dim_a1: eff(0),
            eff_dim_b: eff(1),
            eff_dim_a2: eff(2),
            principal_angle_deg: g.map(|g| g.principal_angle.degrees).filter(|d| d.is_finite()),
            angle_degenerate: g.map(|g| g.principal_angle.degenerate),
            undefined_angle_count: b.map(|b| b.undefined_angle_count),
            a1_winter_error_deg: b.and_then(|b| b.a1_final_winter_error_deg),
            lr: c.meta.training.lr,
            n_trials_per_phase: c.meta.task.trials_per_phase,
        }
    }
}

pub fn results_csv(cells: &[CellResult]) -> anyhow::Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for c in cells {
        w.serialize(ResultRow::from(c))?;
    }
    w.into_inner().map_err(|e| anyhow::anyhow!("flushing csv: {e}"))
}

/// Mean and standard error of the mean over a group of seeds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    /// Zero when only one value was available.
    pub stderr: f64,
    pub n: usize,
}

impl Stat {
    pub fn of(values: &[f64]) -> Option<Stat> {
        let v: Vec<f64> = values.iter().copied().filter(|x| x.is_finite()).collect();
        if v.is_empty() {
            return None;
        }
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let stderr = if v.len() < 2 {
            0.0
        } else {
            (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt() / n.sqrt()
        };
        Some(Stat { mean, stderr, n: v.len() })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub arch: Arch,
    pub condition: Condition,
    pub gamma: f64,
    pub n_total: usize,
    pub n_ok: usize,
    pub transfer: Option<Stat>,
    pub interference: Option<Stat>,
    pub eff_dim_a1: Option<Stat>,
    pub eff_dim_b: Option<Stat>,
    pub eff_dim_a2: Option<Stat>,
    pub principal_angle_deg: Option<Stat>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct AggregateTable {
    pub rows: Vec<AggregateRow>,
}

impl AggregateTable {
    pub fn get(&self, arch: Arch, condition: Condition, gamma: f64) -> Option<&AggregateRow> {
        self.rows.iter().find(|r| r.arch == arch && r.condition == condition && r.gamma == gamma)
    }

    pub fn to_csv(&self) -> anyhow::Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let metrics = ["transfer", "interference", "eff_dim_A1", "eff_dim_B", "eff_dim_A2", "principal_angle_deg"];
        let mut header = vec!["arch".to_string(), "condition".into(), "gamma".into(), "n_total".into(), "n_ok".into()];
        for m in metrics {
            header.push(format!("{m}_mean"));
            header.push(format!("{m}_stderr"));
        }
        w.write_record(&header)?;
        for r in &self.rows {
            let mut rec = vec![
                r.arch.to_string(),
                r.condition.to_string(),
                r.gamma.to_string(),
                r.n_total.to_string(),
                r.n_ok.to_string(),
            ];
            for s in [r.transfer, r.interference, r.eff_dim_a1, r.eff_dim_b, r.eff_dim_a2, r.principal_angle_deg] {
                match s {
                    Some(s) => {
                        rec.push(s.mean.to_string());
                        rec.push(s.stderr.to_string());
                    }
                    None => {
                        rec.push(String::new());
                        rec.push(String::new());
                    }
                }
            }
            w.write_record(&rec)?;
        }
        w.into_inner().map_err(|e| anyhow::anyhow!("flushing csv: {e}"))
    }
}

/// Seed means and standard errors per (arch, condition, gamma) over `ok` cells.
pub fn aggregate(cells: &[CellResult]) -> AggregateTable {
    let mut groups: Vec<(Arch, Condition, f64)> = cells.iter().map(|c| (c.key.arch, c.key.condition, c.key.gamma)).collect();
    groups.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.total_cmp(&b.2)));
    groups.dedup();
    let rows = groups
        .into_iter()
        .map(|(arch, condition, gamma)| {
            let members: Vec<&CellResult> =
                cells.iter().filter(|c| c.key.arch == arch && c.key.condition == condition && c.key.gamma == gamma).collect();
            let ok: Vec<&CellResult> = members.iter().copied().filter(|c| c.status == CellStatus::Ok).collect();
            let collect = |f: &dyn Fn(&CellResult) -> Option<f64>| -> Option<Stat> {
                Stat::of(&ok.iter().filter_map(|c| f(c)).collect::<Vec<_>>())
            };
            let eff = |i: usize| collect(&|c| c.geometry.as_ref().map(|g| g.eff_dim[i].count as f64));
            AggregateRow {
                arch,
                condition,
                gamma,
                n_total: members.len(),
                n_ok: ok.len(),
                transfer: collect(&|c| c.behavior.as_ref().map(|b| b.transfer)),
                interference: collect(&|c| c.behavior.as_ref().map(|b| b.interference)),
                eff_dim_a1: eff(0),
                eff_dim_b: eff(1),
                eff_dim_a2: eff(2),
                principal_angle_deg: collect(&|c| c.geometry.as_ref().map(|g| g.principal_angle.degrees)),
            }
        })
        .collect();
    AggregateTable { rows }
}

/// One-sided sign test: probability of at least this many positive
/// differences under a fair coin, ties dropped.
pub fn sign_test_greater(diffs: &[f64]) -> f64 {
    let pos = diffs.iter().filter(|d| **d > 0.0).count();
    let n = diffs.iter().filter(|d| **d != 0.0).count();
    if n == 0 {
        return 1.0;
    }
    let mut p = 0.0;
    for k in pos..=n {
        p += binomial(n, k) * 0.5f64.powi(n as i32);
    }
    p.min(1.0)
}

fn binomial(n: usize, k: usize) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

#[derive(Debug, Clone)]
pub struct SweepOutcome {
    pub root: PathBuf,
    pub cells: Vec<CellResult>,
    pub table: AggregateTable,
    pub computed: usize,
    pub reused: usize,
}

fn prepare_root(config: &SweepConfig) -> anyhow::Result<PathBuf> {
    let root = config.output_root();
    fs::create_dir_all(root.join("cells")).with_context(|| format!("creating output directory {}", root.display()))?;
    write_atomic(&root.join("config.toml"), config.to_toml().as_bytes())
        .with_context(|| format!("output directory {} is not writable", root.display()))?;
    Ok(root)
}

fn pool(workers: usize) -> anyhow::Result<rayon::ThreadPool> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if workers > 0 {
        b = b.num_threads(workers);
    }
    b.build().context("building worker pool")
}

/// Runs every cell not already completed, then rewrites the summary tables.
pub fn run_sweep(config: &SweepConfig) -> anyhow::Result<SweepOutcome> {
    config.validate()?;
    let root = prepare_root(config)?;
    let keys = config.cells();
    let mut done: Vec<CellResult> = Vec::new();
    let mut pending: Vec<CellKey> = Vec::new();
    for key in keys {
        match load_valid_cell(&root, &key, config) {
            Some(c) => done.push(c),
            None => pending.push(key),
        }
    }
    let reused = done.len();
    let computed = pending.len();
    let fresh: Vec<CellResult> = pool(config.workers)?.install(|| {
        pending
            .par_iter()
            .map(|&key| {
                let (mut result, artifacts) = compute_cell(key, config);
                if let Err(e) = persist_cell(&root, &result, artifacts.as_ref()) {
                    result.status = CellStatus::Failed;
                    result.error = Some(format!("{e:#}"));
                }
                result
            })
            .collect()
    });
    done.extend(fresh);
    done.sort_by_key(|c| c.key);
    let table = write_tables(&root, &done)?;
    Ok(SweepOutcome { root, cells: done, table, computed, reused })
}

/// Runs a single cell and persists it under `root`.
pub fn run_single_cell(config: &SweepConfig, key: CellKey) -> anyhow::Result<CellResult> {
    config.validate()?;
    let root = prepare_root(config)?;
    let (result, artifacts) = compute_cell(key, config);
    persist_cell(&root, &result, artifacts.as_ref())?;
    Ok(result)
}

fn write_tables(root: &Path, cells: &[CellResult]) -> anyhow::Result<AggregateTable> {
    write_atomic(&root.join("results.csv"), &results_csv(cells)?).context("writing results.csv")?;
    let table = aggregate(cells);
    write_atomic(&root.join("aggregate.csv"), &table.to_csv()?).context("writing aggregate.csv")?;
    Ok(table)
}

/// Recomputes every stored cell's metrics and geometry from its
/// `schedule.json`, `run.csv` and `traces.json`, then rewrites the tables.
pub fn analyze(root: &Path) -> anyhow::Result<SweepOutcome> {
    let cells_dir = root.join("cells");
    let entries = fs::read_dir(&cells_dir).with_context(|| format!("reading {}", cells_dir.display()))?;
    let mut cells = Vec::new();
    for entry in entries {
        let dir = entry?.path();
        if !dir.is_dir() {
            continue;
        }
        let (key, meta): (CellKey, CellMeta) = read_json(&dir.join("meta.json"))?;
        let stored: Option<CellResult> = read_json(&dir.join("cell.json")).ok();
        let result = if dir.join("run.csv").is_file() && dir.join("traces.json").is_file() {
            let schedule: Schedule = read_json(&dir.join("schedule.json"))?;
            let records = read_records_csv(&dir.join("run.csv"))?;
            let traces: Vec<PhaseTrace> = read_json(&dir.join("traces.json"))?;
            let result = analyze_run(key, meta, &schedule, &records, &traces);
            if let Some(g) = &result.geometry {
                write_json(&dir.join("pca3.json"), &g.pca3)?;
            }
            write_json(&dir.join("cell.json"), &result)?;
            result
        } else if let Some(stored) = stored {
            stored
        } else {
            continue;
        };
        cells.push(result);
    }
    cells.sort_by_key(|c| c.key);
    let table = write_tables(root, &cells)?;
    let n = cells.len();
    Ok(SweepOutcome { root: root.to_path_buf(), cells, table, computed: n, reused: 0 })
}

/// Reads the stored 3-PC projection of one cell.
pub fn load_pca3(root: &Path, key: &CellKey) -> anyhow::Result<serde_json::Value> {
    read_json(&cell_dir(root, key).join("pca3.json"))
}

#[derive(Debug, Clone, Serialize)]
pub struct CalibrationRow {
    pub lr: f64,
    pub cells: usize,
    pub diverged: usize,
    pub failed: usize,
    /// Cells whose last six A1 winter errors average 15 degrees or more.
    pub unlearned: usize,
    pub mean_a1_winter_error_deg: f64,
    pub worst_a1_winter_error_deg: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct Calibration {
    pub rows: Vec<CalibrationRow>,
    /// Largest learning rate with no diverged, failed or unlearned cell.
    pub chosen_lr: Option<f64>,
}

pub const CALIBRATION_LRS: [f64; 5] = [0.005, 0.01, 0.05, 0.1, 0.5];
pub const CALIBRATION_GAMMAS: [f64; 2] = [2.0, 0.001];
/// Winter error threshold used for the learning sanity check.
pub const LEARNED_ERROR_DEG: f64 = 15.0;

/// Runs the base configuration at each learning rate on the given gammas
/// (all architectures, conditions and seeds of `base`) without persisting.
pub fn calibrate_lr(base: &SweepConfig, lrs: &[f64], gammas: &[f64]) -> anyhow::Result<Calibration> {
    let mut rows = Vec::new();
    for &lr in lrs {
        let mut cfg = base.clone();
        cfg.training.lr = lr;
        cfg.gamma_grid = gammas.to_vec();
        cfg.validate()?;
        let keys = cfg.cells();
        let results: Vec<CellResult> = pool(cfg.workers)?.install(|| keys.par_iter().map(|&k| compute_cell(k, &cfg).0).collect());
        let errs: Vec<f64> =
            results.iter().filter_map(|c| c.behavior.as_ref().and_then(|b| b.a1_final_winter_error_deg)).collect();
        rows.push(CalibrationRow {
            lr,
            cells: results.len(),
            diverged: results.iter().filter(|c| c.status == CellStatus::Diverged).count(),
            failed: results.iter().filter(|c| c.status == CellStatus::Failed).count(),
            unlearned: results.len() - errs.iter().filter(|e| **e < LEARNED_ERROR_DEG).count(),
            mean_a1_winter_error_deg: errs.iter().sum::<f64>() / errs.len().max(1) as f64,
            worst_a1_winter_error_deg: errs.iter().fold(0.0, |m, e| m.max(*e)),
        });
    }
    // Clipping keeps almost every rate finite, so "no divergence" alone
    // would pick rates that oscillate without learning.
    let chosen_lr = rows.iter().filter(|r| r.diverged == 0 && r.failed == 0 && r.unlearned == 0).map(|r| r.lr).fold(None, |m: Option<f64>, lr| {
        Some(m.map_or(lr, |m| m.max(lr)))
    });
    Ok(Calibration { rows, chosen_lr })
}

/// Trial counts tried, in order, by [`calibrate_trials`].
pub const TRIAL_LADDER: [usize; 5] = [120, 240, 480, 960, 1920];
/// Late A1 loss every calibration cell must reach. Chance-level output sits at 0.5.
pub const CONVERGED_LOSS: f64 = 0.05;
/// Number of closing A1 trials averaged for the late loss.
pub const LATE_WINDOW: usize = 12;

#[derive(Debug, Clone, Serialize)]
pub struct TrialCalibrationRow {
    pub trials_per_phase: usize,
    pub cells: usize,
    pub diverged: usize,
    pub failed: usize,
    pub mean_late_a1_loss: f64,
    pub worst_late_a1_loss: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct TrialCalibration {
    pub rows: Vec<TrialCalibrationRow>,
    /// Smallest trial count whose worst late A1 loss is under [`CONVERGED_LOSS`].
    pub chosen_trials_per_phase: Option<usize>,
}

/// Walks up the trial ladder at the base learning rate and stops at the first
/// count where every cell (all architectures, conditions and seeds of `base`
/// at the given gammas) has converged on A1.
pub fn calibrate_trials(base: &SweepConfig, ladder: &[usize], gammas: &[f64]) -> anyhow::Result<TrialCalibration> {
    let mut rows = Vec::new();
    let mut chosen = None;
    for &n in ladder {
        let mut cfg = base.clone();
        cfg.task.trials_per_phase = n;
        cfg.gamma_grid = gammas.to_vec();
        cfg.validate()?;
        let keys = cfg.cells();
        let out: Vec<(CellStatus, Option<f64>)> = pool(cfg.workers)?.install(|| {
            keys.par_iter()
                .map(|&k| {
                    let (res, art) = compute_cell(k, &cfg);
                    let late = art.and_then(|a| {
                        let a1: Vec<f64> = a.records.iter().filter(|r| r.phase == Phase::A1).map(|r| r.loss).collect();
                        let tail = &a1[a1.len().saturating_sub(LATE_WINDOW)..];
                        (!tail.is_empty()).then(|| tail.iter().sum::<f64>() / tail.len() as f64)
                    });
                    (res.status, late)
                })
                .collect()
        });
        let late: Vec<f64> = out.iter().filter_map(|o| o.1).collect();
        let row = TrialCalibrationRow {
            trials_per_phase: n,
            cells: out.len(),
            diverged: out.iter().filter(|o| o.0 == CellStatus::Diverged).count(),
            failed: out.iter().filter(|o| o.0 == CellStatus::Failed).count(),
            mean_late_a1_loss: late.iter().sum::<f64>() / late.len().max(1) as f64,
            worst_late_a1_loss: if late.len() == out.len() { late.iter().fold(0.0, |m, l| m.max(*l)) } else { f64::INFINITY },
        };
        let done = row.diverged == 0 && row.failed == 0 && row.worst_late_a1_loss < CONVERGED_LOSS;
        rows.push(row);
        if done {
            chosen = Some(n);
            break;
        }
    }
    Ok(TrialCalibration { rows, chosen_trials_per_phase: chosen })
}
