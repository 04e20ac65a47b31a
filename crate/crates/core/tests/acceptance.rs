//! Exit criteria for the project, one test per criterion. Each test prints a
//! single `PASS`/`FAIL` line with the measured values before asserting.
//!
//! Criteria 5-10 share one full default sweep, run once into the cargo
//! target temp directory. Criteria 9 and 10 also use a second full sweep with
//! 120 trials per phase, the short protocol the runtime budget was set for.

mod common;

use std::f64::consts::PI;
use std::fs;
use std::path::PathBuf;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use rand::Rng;

use common::{lu_determinant, max_gradient_error, random_matrix, rng, sample_mixture};
use seasons::geometry::{effective_dimensionality, fit_pca, subspace_angle, GroupSplit};
use seasons::linalg::{sym_eigen, thin_svd, Matrix};
use seasons::metrics::fit_fixed_mean_mixture;
use seasons::network::{init_params, Arch, HiddenState, NetworkConfig};
use seasons::runner::{analyze, run_sweep, sign_test_greater, CellResult, CellStatus, SweepConfig, SweepOutcome};
use seasons::taskgen::{Condition, Phase, Season};
use seasons::training::LossSpec;

fn report(id: u32, name: &str, pass: bool, detail: &str) {
    println!("criterion {id:>2} [{}] {name}: {detail}", if pass { "PASS" } else { "FAIL" });
    assert!(pass, "criterion {id} ({name}) failed: {detail}");
}

// ---------------------------------------------------------------------------
// 1. gradients

#[test]
fn criterion_01_bptt_matches_finite_differences() {
    const CONFIGS: usize = 50;
    const EPS: f64 = 1e-6;
    const TOL: f64 = 1e-5;
    // entries whose gradient is below this are compared in absolute terms
    const FLOOR: f64 = 1e-4;
    let start = Instant::now();
    let mut r = rng(101);
    let mut worst = 0.0f64;
    for i in 0..CONFIGS {
        let arch = if i % 2 == 0 { Arch::Single } else { Arch::Modular };
        let season = if (i / 2) % 2 == 0 { Season::Summer } else { Season::Winter };
        let h = r.gen_range(1..=8);
        let steps = r.gen_range(1..=4);
        let cfg = NetworkConfig { hidden_single: h, hidden_module: h, steps_per_trial: steps };
        let gamma = r.gen_range(0.5..2.0);
        let params = init_params(arch, &cfg, gamma, r.gen()).unwrap();
        let x: Vec<f64> = (0..12).map(|_| r.gen_range(-1.0..1.0)).collect();
        let mut initial = params.zero_state();
        if i % 3 == 0 {
            initial = match initial {
                HiddenState::Single(v) => HiddenState::Single(v.iter().map(|_| r.gen_range(-0.9..0.9)).collect()),
                HiddenState::Modular(a, b) => HiddenState::Modular(
                    a.iter().map(|_| r.gen_range(-0.9..0.9)).collect(),
                    b.iter().map(|_| r.gen_range(-0.9..0.9)).collect(),
                ),
            };
        }
        let th = r.gen_range(-PI..PI);
        let spec = LossSpec::new([th.cos(), th.sin(), th.cos(), th.sin()], season);
        worst = worst.max(max_gradient_error(&params, &initial, &x, steps, &spec, EPS, FLOOR));
    }
    let elapsed = start.elapsed();
    report(
        1,
        "gradient exactness",
        worst <= TOL && elapsed < Duration::from_secs(60),
        &format!("{CONFIGS} configs, max rel err {worst:.2e} (tol {TOL:.0e}), {:.2}s", elapsed.as_secs_f64()),
    );
}

// ---------------------------------------------------------------------------
// 2. linear algebra

#[test]
fn criterion_02_linear_algebra_oracles() {
    const MATRICES: usize = 100;
    const TOL: f64 = 1e-8;
    let start = Instant::now();
    let mut r = rng(202);
    let mut worst_sv = 0.0f64;
    let mut worst_recon = 0.0f64;
    let mut worst_trace = 0.0f64;
    let mut worst_det = 0.0f64;
    for _ in 0..MATRICES {
        let (m, n) = (r.gen_range(1..=20), r.gen_range(1..=20));
        let a = random_matrix(m, n, &mut r);
        let svd = thin_svd(&a).unwrap();
        // the SVD goes through the smaller Gram matrix; compare with the larger one
        let big = if m >= n { a.matmul(&a.transpose()).unwrap() } else { a.gram() };
        let eig = sym_eigen(&big).unwrap();
        let scale = eig.eigenvalues[0].abs().max(1.0);
        for (s, l) in svd.singular_values.iter().zip(&eig.eigenvalues) {
            worst_sv = worst_sv.max((s * s - l).abs() / scale);
        }
        let recon = svd.reconstruct().sub(&a).unwrap().max_abs() / a.max_abs().max(1e-300);
        worst_recon = worst_recon.max(recon);

        let k = r.gen_range(1..=20);
        let b = random_matrix(k, k, &mut r);
        let s = Matrix::from_fn(k, k, |i, j| b[(i, j)] + b[(j, i)]);
        let e = sym_eigen(&s).unwrap();
        let sum: f64 = e.eigenvalues.iter().sum();
        worst_trace = worst_trace.max((sum - s.trace()).abs() / s.frobenius_norm().max(1.0));
        let prod: f64 = e.eigenvalues.iter().product();
        let det = lu_determinant(&s);
        worst_det = worst_det.max((prod - det).abs() / det.abs().max(1e-300));
    }
    let pass = worst_sv <= TOL && worst_recon <= TOL && worst_trace <= TOL && worst_det <= TOL;
    let elapsed = start.elapsed();
    report(
        2,
        "linear-algebra oracles",
        pass && elapsed < Duration::from_secs(60),
        &format!(
            "{MATRICES} matrices: sigma^2 vs eig {worst_sv:.1e}, reconstruction {worst_recon:.1e}, trace {worst_trace:.1e}, det {worst_det:.1e} (tol {TOL:.0e}), {:.2}s",
            elapsed.as_secs_f64()
        ),
    );
}

// ---------------------------------------------------------------------------
// 3. mixture recovery

#[test]
fn criterion_03_mixture_recovery() {
    const DRAWS: usize = 50;
    const N: usize = 2000;
    const WEIGHT_TOL: f64 = 0.05;
    const MIN_SHARE: f64 = 0.9;
    // floating-point slack on successive log-likelihoods, relative to |LL|
    const LL_SLACK: f64 = 1e-12;
    let start = Instant::now();
    let mu_b = 150f64.to_radians();
    let mut r = rng(303);
    let mut worst_share = f64::INFINITY;
    let mut worst_cell = String::new();
    let mut decreases = 0usize;
    for w in [0.1, 0.5, 0.9] {
        for kappa in [2.0, 8.0, 32.0] {
            let mut hits = 0;
            for _ in 0..DRAWS {
                let d = sample_mixture(N, w, kappa, 0.0, mu_b, &mut r);
                let fit = fit_fixed_mean_mixture(&d, 0.0, mu_b);
                if (fit.w_a - w).abs() <= WEIGHT_TOL {
                    hits += 1;
                }
                decreases += fit
                    .log_likelihood_trace
                    .windows(2)
                    .filter(|p| p[1] < p[0] - LL_SLACK * p[0].abs())
                    .count();
            }
            let share = hits as f64 / DRAWS as f64;
            if share < worst_share {
                worst_share = share;
                worst_cell = format!("w={w} kappa={kappa}");
            }
        }
    }
    let elapsed = start.elapsed();
    report(
        3,
        "mixture recovery",
        worst_share >= MIN_SHARE && decreases == 0 && elapsed < Duration::from_secs(120),
        &format!(
            "worst cell {worst_cell} recovered {:.0}% (need {:.0}%), {decreases} log-likelihood decreases, {:.2}s",
            100.0 * worst_share,
            100.0 * MIN_SHARE,
            elapsed.as_secs_f64()
        ),
    );
}

// ---------------------------------------------------------------------------
// 4. geometry

/// Counts components reaching 99% from the eigenvalues of the centred
/// row Gram matrix, i.e. without going through the covariance.
fn brute_force_eff_dim(x: &Matrix) -> usize {
    let n = x.rows();
    let mean: Vec<f64> = (0..x.cols()).map(|j| x.column(j).iter().sum::<f64>() / n as f64).collect();
    let c = Matrix::from_fn(n, x.cols(), |i, j| x[(i, j)] - mean[j]);
    let eig = sym_eigen(&c.matmul(&c.transpose()).unwrap()).unwrap();
    let lmax = eig.eigenvalues[0];
    let pos: Vec<f64> = eig.eigenvalues.into_iter().filter(|l| *l > 1e-12 * lmax).collect();
    let total: f64 = pos.iter().sum();
    let mut cum = 0.0;
    for (k, l) in pos.iter().enumerate() {
        cum += l;
        if cum / total >= 0.99 - 1e-12 {
            return k + 1;
        }
    }
    pos.len()
}

fn plane_rows(u: &[f64], v: &[f64], coeffs: &[(f64, f64)]) -> Vec<Vec<f64>> {
    coeffs.iter().map(|(a, b)| u.iter().zip(v).map(|(x, y)| a * x + b * y).collect()).collect()
}

fn angle_between_planes(pa: (&[f64], &[f64]), pb: (&[f64], &[f64])) -> f64 {
    let ca = [(1.0, 0.2), (-0.3, 1.1), (0.7, -0.8), (1.5, 0.4), (-1.2, -0.6), (0.1, 0.9)];
    let cb = [(0.4, -1.0), (1.3, 0.5), (-0.9, 0.3), (0.2, 1.4), (-0.5, -1.1), (1.0, 0.0)];
    let mut rows = plane_rows(pa.0, pa.1, &ca);
    rows.extend(plane_rows(pb.0, pb.1, &cb));
    let states = Matrix::from_rows(&rows).unwrap();
    let split = GroupSplit::Explicit { group_a: (0..6).collect(), group_b: (6..12).collect() };
    subspace_angle(&states, &split).unwrap().degrees
}

#[test]
fn criterion_04_geometry_oracles() {
    const DATASETS: usize = 100;
    const ANGLE_TOL_DEG: f64 = 1e-6;
    let mut r = rng(404);
    let mut mismatches = 0;
    for _ in 0..DATASETS {
        let rows = r.gen_range(3..=16);
        let cols = r.gen_range(2..=24);
        let latent = r.gen_range(1..=cols.min(rows));
        // decaying latent scales give a spread of effective dimensionalities
        let z = Matrix::from_fn(rows, latent, |_, j| r.gen_range(-1.0..1.0) * 0.5f64.powi(j as i32));
        let w = random_matrix(latent, cols, &mut r);
        let x = z.matmul(&w).unwrap();
        let model = fit_pca(&x).unwrap();
        if effective_dimensionality(&model, 0.99).count != brute_force_eff_dim(&x) {
            mismatches += 1;
        }
    }
    let e = |i: usize| -> Vec<f64> { (0..8).map(|k| if k == i { 1.0 } else { 0.0 }).collect() };
    let s = std::f64::consts::FRAC_1_SQRT_2;
    let diag: Vec<f64> = (0..8).map(|k| if k == 1 || k == 2 { s } else { 0.0 }).collect();
    let same = angle_between_planes((&e(0), &e(1)), (&e(0), &e(1)));
    // same plane, different spanning vectors
    let same_rotated: Vec<f64> = e(0).iter().zip(e(1)).map(|(a, b)| a + 2.0 * b).collect();
    let same2 = angle_between_planes((&e(0), &e(1)), (&same_rotated, &e(1)));
    let orth = angle_between_planes((&e(0), &e(1)), (&e(2), &e(3)));
    let half = angle_between_planes((&e(0), &e(1)), (&e(0), &diag));
    let pass = mismatches == 0
        && same.abs() <= ANGLE_TOL_DEG
        && same2.abs() <= ANGLE_TOL_DEG
        && (orth - 90.0).abs() <= ANGLE_TOL_DEG
        && (half - 45.0).abs() <= ANGLE_TOL_DEG;
    report(
        4,
        "geometry oracles",
        pass,
        &format!(
            "{mismatches}/{DATASETS} eff-dim mismatches; angles {same:.2e}, {same2:.2e}, {orth:.9}, {half:.9} deg (tol {ANGLE_TOL_DEG:.0e})"
        ),
    );
}

// ---------------------------------------------------------------------------
// shared default sweep

struct Sweep {
    config: SweepConfig,
    outcome: SweepOutcome,
    elapsed: Duration,
}

fn sweep_root(name: &str) -> PathBuf {
    let dir = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join(name);
    let _ = fs::remove_dir_all(&dir);
    dir
}

fn default_sweep() -> &'static Sweep {
    static SWEEP: OnceLock<Sweep> = OnceLock::new();
    SWEEP.get_or_init(|| {
        let config = SweepConfig { output_dir: sweep_root("acceptance-sweep"), ..SweepConfig::default() };
        let start = Instant::now();
        let outcome = run_sweep(&config).expect("default sweep runs");
        Sweep { config, outcome, elapsed: start.elapsed() }
    })
}

fn short_sweep() -> &'static Sweep {
    static SWEEP: OnceLock<Sweep> = OnceLock::new();
    SWEEP.get_or_init(|| {
        let mut config = SweepConfig { output_dir: sweep_root("acceptance-short"), ..SweepConfig::default() };
        config.task.trials_per_phase = 120;
        let start = Instant::now();
        let outcome = run_sweep(&config).expect("short sweep runs");
        Sweep { config, outcome, elapsed: start.elapsed() }
    })
}

fn cells(arch: Arch, condition: Condition, gamma: f64) -> Vec<&'static CellResult> {
    let mut v: Vec<&CellResult> = default_sweep()
        .outcome
        .cells
        .iter()
        .filter(|c| c.key.arch == arch && c.key.condition == condition && c.key.gamma == gamma)
        .collect();
    v.sort_by_key(|c| c.key.seed);
    v
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn ok_values(cells: &[&CellResult], f: impl Fn(&CellResult) -> Option<f64>) -> Vec<f64> {
    cells.iter().filter(|c| c.status == CellStatus::Ok).filter_map(|c| f(c)).collect()
}

// ---------------------------------------------------------------------------
// 5. interference ordering

#[test]
fn criterion_05_single_interferes_more_than_modular_when_rich() {
    const GAMMA: f64 = 0.001;
    const ALPHA: f64 = 0.05;
    let mut pass = true;
    let mut detail = Vec::new();
    for condition in [Condition::Near, Condition::Far] {
        let single = cells(Arch::Single, condition, GAMMA);
        let modular = cells(Arch::Modular, condition, GAMMA);
        let mut diffs = Vec::new();
        for s in &single {
            let Some(m) = modular.iter().find(|m| m.key.seed == s.key.seed) else { continue };
            if let (Some(bs), Some(bm)) = (&s.behavior, &m.behavior) {
                diffs.push(bs.interference - bm.interference);
            }
        }
        let p = sign_test_greater(&diffs);
        let ms = mean(&ok_values(&single, |c| c.behavior.as_ref().map(|b| b.interference)));
        let mm = mean(&ok_values(&modular, |c| c.behavior.as_ref().map(|b| b.interference)));
        let wins = diffs.iter().filter(|d| **d > 0.0).count();
        pass &= ms > mm && p < ALPHA;
        detail.push(format!("{condition}: single {ms:.3} vs modular {mm:.3}, {wins}/{} pairs, p={p:.4}", diffs.len()));
    }
    report(5, "interference ordering at gamma=0.001", pass, &detail.join("; "));
}

// ---------------------------------------------------------------------------
// 6. dimensionality ordering

#[test]
fn criterion_06_dimensionality_lower_when_rich() {
    let mut failures = Vec::new();
    let mut checked = 0;
    for arch in Arch::ALL {
        for condition in Condition::ALL {
            for (i, phase) in Phase::ALL.iter().enumerate() {
                let dim = |gamma| {
                    mean(&ok_values(&cells(arch, condition, gamma), |c| {
                        c.geometry.as_ref().map(|g| g.eff_dim[i].count as f64)
                    }))
                };
                let (rich, lazy) = (dim(0.001), dim(2.0));
                checked += 1;
                if !(rich < lazy) {
                    failures.push(format!("{arch}/{condition}/{phase}: {rich:.1} vs {lazy:.1}"));
                }
            }
        }
    }
    let detail = if failures.is_empty() {
        format!("all {checked} (arch, condition, phase) groups lower at gamma=0.001")
    } else {
        format!("{}/{checked} groups not lower at gamma=0.001 than at 2: {}", failures.len(), failures.join(", "))
    };
    report(6, "dimensionality ordering", failures.is_empty(), &detail);
}

// ---------------------------------------------------------------------------
// 7. graded modular geometry

#[test]
fn criterion_07_modular_angles_graded_by_similarity() {
    let angle = |condition| {
        mean(&ok_values(&cells(Arch::Modular, condition, 0.001), |c| {
            c.geometry.as_ref().map(|g| g.principal_angle.degrees).filter(|d| d.is_finite())
        }))
    };
    let (same, near, far) = (angle(Condition::Same), angle(Condition::Near), angle(Condition::Far));
    report(
        7,
        "modular same < near < far angle at gamma=0.001",
        same < near && near < far,
        &format!("same {same:.4}, near {near:.4}, far {far:.4} deg"),
    );
}

// ---------------------------------------------------------------------------
// 8. learning sanity

#[test]
fn criterion_08_every_ok_cell_learns_a1() {
    const MAX_ERROR_DEG: f64 = 15.0;
    let sweep = default_sweep();
    let ok: Vec<&CellResult> = sweep.outcome.cells.iter().filter(|c| c.status == CellStatus::Ok).collect();
    let not_ok = sweep.outcome.cells.len() - ok.len();
    let mut bad = Vec::new();
    for c in &ok {
        match c.behavior.as_ref().and_then(|b| b.a1_final_winter_error_deg) {
            Some(e) if e < MAX_ERROR_DEG => {}
            Some(e) => bad.push(format!("{} ({e:.1})", c.key)),
            None => bad.push(format!("{} (undefined)", c.key)),
        }
    }
    let detail = format!(
        "{}/{} ok cells above {MAX_ERROR_DEG} deg final A1 winter error ({not_ok} cells not ok){}{}",
        bad.len(),
        ok.len(),
        if bad.is_empty() { "" } else { ": " },
        bad.join(", ")
    );
    report(8, "learning sanity", bad.is_empty(), &detail);
}

// ---------------------------------------------------------------------------
// 9. determinism and resume

#[test]
fn criterion_09_determinism_and_resume() {
    let reference = short_sweep();
    let ref_root = reference.outcome.root.clone();
    let ref_results = fs::read(ref_root.join("results.csv")).unwrap();
    let ref_aggregate = fs::read(ref_root.join("aggregate.csv")).unwrap();

    // interrupted: half the seeds, then one cell left half-written
    let root = sweep_root("acceptance-resume");
    let full = SweepConfig { output_dir: root.clone(), ..reference.config.clone() };
    let partial = SweepConfig { seeds: full.seeds[..5].to_vec(), ..full.clone() };
    run_sweep(&partial).unwrap();
    let victim = root.join("cells").join(partial.cells()[7].to_string());
    fs::remove_file(victim.join("cell.json")).unwrap();
    fs::write(victim.join("run.csv"), "phase,trial\nA1,").unwrap();
    let resumed = run_sweep(&full).unwrap();
    let resumed_ok = fs::read(root.join("results.csv")).unwrap() == ref_results
        && fs::read(root.join("aggregate.csv")).unwrap() == ref_aggregate
        && resumed.reused == partial.cells().len() - 1;

    // a second, fully reused pass and a re-analysis from stored files
    let again = run_sweep(&full).unwrap();
    let again_ok = again.computed == 0 && fs::read(root.join("results.csv")).unwrap() == ref_results;
    analyze(&root).unwrap();
    let mut analyze_ok = fs::read(root.join("results.csv")).unwrap() == ref_results;
    let default_root = &default_sweep().outcome.root;
    let stored = fs::read(default_root.join("results.csv")).unwrap();
    analyze(default_root).unwrap();
    analyze_ok &= fs::read(default_root.join("results.csv")).unwrap() == stored;

    report(
        9,
        "determinism and resume",
        resumed_ok && again_ok && analyze_ok,
        &format!(
            "resumed run identical: {resumed_ok} ({} reused, {} computed); repeat identical: {again_ok}; re-analysis identical: {analyze_ok}",
            resumed.reused, resumed.computed
        ),
    );
}

// ---------------------------------------------------------------------------
// 10. runtime

#[test]
fn criterion_10_full_sweep_runtime() {
    const LIMIT: Duration = Duration::from_secs(30 * 60);
    let expected = 2 * 3 * 6 * 10;
    let mut pass = true;
    let mut detail = Vec::new();
    for sweep in [short_sweep(), default_sweep()] {
        let n = sweep.outcome.cells.len();
        pass &= n == expected && sweep.outcome.computed == expected && sweep.elapsed < LIMIT;
        detail.push(format!(
            "{n} cells at {} trials/phase, H={} in {:.1}s",
            sweep.config.task.trials_per_phase,
            sweep.config.network.hidden_single,
            sweep.elapsed.as_secs_f64()
        ));
    }
    detail.push(format!("limit {}s each", LIMIT.as_secs()));
    report(10, "desk-scale runtime", pass, &detail.join("; "));
}
