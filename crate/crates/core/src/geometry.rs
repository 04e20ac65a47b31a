//! Representational analyses on phase snapshots: PCA, effective
//! dimensionality, task-subspace principal angles and joint 3-PC projections.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{dot, principal_angles, qr_orthonormalize, sym_eigen, LinalgError, Matrix};
use crate::taskgen::{Phase, STIMULI_PER_TASK};
use crate::training::PhaseTrace;

/// Eigenvalues below this fraction of the largest count as zero.
pub const ZERO_EIGEN_RTOL: f64 = 1e-12;
pub const DEFAULT_VARIANCE_THRESHOLD: f64 = 0.99;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("PCA needs at least 2 observations, got {0}")]
    TooFewRows(usize),
    #[error("expected {expected} traces of equal width")]
    TraceShape { expected: usize },
    #[error("row group is empty or out of range")]
    BadGroup,
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaModel {
    pub mean: Vec<f64>,
    /// One principal axis per row, orthonormal, sign-fixed so the
    /// largest-magnitude loading is positive.
    pub components: Matrix,
    pub explained_variance: Vec<f64>,
    /// Sums to 1 unless the data have no variance at all.
    pub explained_ratio: Vec<f64>,
}

impl PcaModel {
    /// Number of components with non-zero variance.
    pub fn rank(&self) -> usize {
        self.explained_variance.iter().filter(|v| **v > 0.0).count()
    }

    pub fn total_variance(&self) -> f64 {
        self.explained_variance.iter().sum()
    }

    /// Scores of `x` on the first `k` components (zero-padded past the rank).
    pub fn project(&self, x: &Matrix, k: usize) -> Matrix {
        let avail = self.components.rows();
        Matrix::from_fn(x.rows(), k, |i, j| {
            if j >= avail {
                return 0.0;
            }
            let centered: Vec<f64> = x.row(i).iter().zip(&self.mean).map(|(a, m)| a - m).collect();
            dot(&centered, self.components.row(j))
        })
    }
}

/// Covariance PCA (normalized by `n - 1`).
///
/// The centered rows span at most `n - 1` directions, so the covariance is
/// diagonalized inside an orthonormal basis of that row space; axes outside
/// it carry exactly zero variance and are not reported.
pub fn fit_pca(x: &Matrix) -> Result<PcaModel, GeometryError> {
    let (n, d) = x.shape();
    if n < 2 {
        return Err(GeometryError::TooFewRows(n));
    }
    let mean: Vec<f64> = (0..d).map(|j| (0..n).map(|i| x[(i, j)]).sum::<f64>() / n as f64).collect();
    let centered = Matrix::from_fn(n, d, |i, j| x[(i, j)] - mean[j]);

    let empty = |mean| PcaModel {
        mean,
        components: Matrix::zeros(0, d),
        explained_variance: Vec::new(),
        explained_ratio: Vec::new(),
    };
    if centered.max_abs() == 0.0 {
        return Ok(empty(mean));
    }
    let basis = qr_orthonormalize(&centered.transpose())?.q;
    if basis.cols() == 0 {
        return Ok(empty(mean));
    }
    let reduced = centered.matmul(&basis)?;
    let cov = reduced.gram().scaled(1.0 / (n - 1) as f64);
    let eig = sym_eigen(&cov)?;
    let lmax = eig.eigenvalues[0].max(0.0);

    let mut components = Vec::new();
    let mut explained_variance = Vec::new();
    for (k, &l) in eig.eigenvalues.iter().enumerate() {
        if l <= ZERO_EIGEN_RTOL * lmax || l <= 0.0 {
            continue;
        }
        let mut axis = basis.matvec(&eig.eigenvectors.column(k));
        crate::linalg::fix_sign(&mut axis);
        components.push(axis);
        explained_variance.push(l);
    }
    let total: f64 = explained_variance.iter().sum();
    let explained_ratio = explained_variance.iter().map(|v| v / total).collect();
    let components = if components.is_empty() { Matrix::zeros(0, d) } else { Matrix::from_rows(&components)? };
    Ok(PcaModel { mean, components, explained_variance, explained_ratio })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EffectiveDim {
    pub count: usize,
    /// Set when the data had no variance; `count` is then reported as 1.
    pub degenerate: bool,
}

/// Smallest `k` whose cumulative explained ratio reaches `threshold`.
pub fn effective_dimensionality(model: &PcaModel, threshold: f64) -> EffectiveDim {
    if model.explained_ratio.is_empty() {
        return EffectiveDim { count: 1, degenerate: true };
    }
    let mut cum = 0.0;
    for (k, r) in model.explained_ratio.iter().enumerate() {
        cum += r;
        if cum >= threshold - 1e-12 {
            return EffectiveDim { count: k + 1, degenerate: false };
        }
    }
    EffectiveDim { count: model.explained_ratio.len(), degenerate: false }
}

/// How to split the twelve sweep rows into two groups for the angle analysis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum GroupSplit {
    /// Task A stimuli (rows 0-5) against task B stimuli (rows 6-11).
    #[default]
    TaskIdentity,
    /// Arbitrary row groups.
    Explicit { group_a: Vec<usize>, group_b: Vec<usize> },
}

impl GroupSplit {
    fn groups(&self) -> (Vec<usize>, Vec<usize>) {
        match self {
            GroupSplit::TaskIdentity => {
                ((0..STIMULI_PER_TASK).collect(), (STIMULI_PER_TASK..2 * STIMULI_PER_TASK).collect())
            }
            GroupSplit::Explicit { group_a, group_b } => (group_a.clone(), group_b.clone()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SubspaceAngle {
    /// Largest principal angle in degrees; NaN (`null` in JSON) when a group
    /// has no variance.
    #[serde(with = "nan_as_null")]
    pub degrees: f64,
    /// Set when either group spans fewer than two dimensions.
    pub degenerate: bool,
    pub rank_a: usize,
    pub rank_b: usize,
}

mod nan_as_null {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_nan() {
            s.serialize_none()
        } else {
            s.serialize_f64(*v)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NAN))
    }
}

/// Orthonormal basis (as columns) of the top `k` principal axes.
fn top_axes(model: &PcaModel, k: usize) -> Result<Matrix, GeometryError> {
    let k = k.min(model.components.rows());
    let top = Matrix::from_fn(model.components.cols(), k, |i, j| model.components[(j, i)]);
    Ok(qr_orthonormalize(&top)?.q)
}

/// Largest principal angle between the two-dimensional PCA subspaces of
/// the two row groups.
pub fn subspace_angle(states: &Matrix, split: &GroupSplit) -> Result<SubspaceAngle, GeometryError> {
    let (ga, gb) = split.groups();
    if ga.len() < 2 || gb.len() < 2 || ga.iter().chain(&gb).any(|&i| i >= states.rows()) {
        return Err(GeometryError::BadGroup);
    }
    let qa = top_axes(&fit_pca(&states.select_rows(&ga))?, 2)?;
    let qb = top_axes(&fit_pca(&states.select_rows(&gb))?, 2)?;
    let (rank_a, rank_b) = (qa.cols(), qb.cols());
    let degenerate = rank_a < 2 || rank_b < 2;
    if rank_a == 0 || rank_b == 0 {
        return Ok(SubspaceAngle { degrees: f64::NAN, degenerate, rank_a, rank_b });
    }
    let largest = principal_angles(&qa, &qb)?.into_iter().fold(0.0f64, f64::max);
    Ok(SubspaceAngle { degrees: largest.to_degrees().clamp(0.0, 90.0), degenerate, rank_a, rank_b })
}

/// Task-subspace angle of a post-B snapshot using the task-identity split.
pub fn task_subspace_angle(trace: &PhaseTrace) -> Result<SubspaceAngle, GeometryError> {
    subspace_angle(&trace.states, &GroupSplit::TaskIdentity)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseProjection {
    pub phase: Phase,
    /// Twelve rows in sweep order, three PC scores each.
    pub scores: Vec<[f64; 3]>,
    /// Task label per row.
    pub tasks: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointProjection {
    pub explained_ratio: Vec<f64>,
    pub phases: Vec<PhaseProjection>,
}

/// One PCA over the stacked A1/B/A2 snapshots; each snapshot projected on its top three axes.
pub fn joint_pca3(traces: &[PhaseTrace]) -> Result<(PcaModel, JointProjection), GeometryError> {
    if traces.len() != 3 {
        return Err(GeometryError::TraceShape { expected: 3 });
    }
    let width = traces[0].states.cols();
    if traces.iter().any(|t| t.states.cols() != width) {
        return Err(GeometryError::TraceShape { expected: 3 });
    }
    let rows: Vec<Vec<f64>> =
        traces.iter().flat_map(|t| (0..t.states.rows()).map(move |i| t.states.row(i).to_vec())).collect();
    let model = fit_pca(&Matrix::from_rows(&rows)?)?;
    let phases = traces
        .iter()
        .map(|t| {
            let p = model.project(&t.states, 3);
            let scores = (0..p.rows()).map(|i| [p[(i, 0)], p[(i, 1)], p[(i, 2)]]).collect();
            let tasks = (0..p.rows()).map(|i| if i < STIMULI_PER_TASK { "A" } else { "B" }.to_string()).collect();
            PhaseProjection { phase: t.phase, scores, tasks }
        })
        .collect();
    let explained_ratio = model.explained_ratio.iter().take(3).copied().collect();
    Ok((model, JointProjection { explained_ratio, phases }))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeometrySummary {
    /// A1, B, A2 in order.
    pub eff_dim: Vec<EffectiveDim>,
    pub principal_angle: SubspaceAngle,
    pub pca3: JointProjection,
}

impl GeometrySummary {
    pub fn eff_dim_of(&self, phase: Phase) -> EffectiveDim {
        self.eff_dim[Phase::ALL.iter().position(|p| *p == phase).expect("known phase")]
    }
}

pub fn summarize_geometry(traces: &[PhaseTrace]) -> Result<GeometrySummary, GeometryError> {
    if traces.len() != 3 {
        return Err(GeometryError::TraceShape { expected: 3 });
    }
    let eff_dim = traces
        .iter()
        .map(|t| fit_pca(&t.states).map(|m| effective_dimensionality(&m, DEFAULT_VARIANCE_THRESHOLD)))
        .collect::<Result<Vec<_>, _>>()?;
    let post_b = traces.iter().find(|t| t.phase == Phase::B).ok_or(GeometryError::TraceShape { expected: 3 })?;
    let principal_angle = task_subspace_angle(post_b)?;
    let (_, pca3) = joint_pca3(traces)?;
    Ok(GeometrySummary { eff_dim, principal_angle, pca3 })
}
