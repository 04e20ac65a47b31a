//! Behavioural measures: angle read-out, accuracy, transfer and
//! interference from a fixed-mean two-component von Mises mixture.

use std::f64::consts::{PI, TAU};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::taskgen::{wrap_signed, Angle, Phase, Schedule, Season, OUTPUT_DIM};
use crate::training::TrialRecord;

/// Output pairs with a smaller norm do not define an angle.
pub const MIN_PAIR_NORM: f64 = 1e-12;
/// Winter trials averaged at each side of the A1/B boundary.
pub const TRANSFER_WINDOW: usize = 6;
pub const MIN_MIXTURE_TRIALS: usize = 12;
pub const KAPPA_MIN: f64 = 1e-3;
pub const KAPPA_MAX: f64 = 500.0;
pub const EM_TOL: f64 = 1e-8;
pub const EM_MAX_ITER: usize = 500;
/// Component means closer than this (degrees) make the mixture degenerate.
pub const DEGENERATE_SEPARATION_DEG: f64 = 1.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("need at least {needed} {what}, found {found}")]
    TooFewTrials { what: &'static str, needed: usize, found: usize },
    #[error("record references trial {0} outside the schedule")]
    UnknownTrial(usize),
}

/// `atan2` of the season's cosine-sine pair, or `None` when the pair is ~0.
pub fn predicted_angle(y: &[f64; OUTPUT_DIM], season: Season) -> Option<Angle> {
    let o = season.output_offset();
    let (c, s) = (y[o], y[o + 1]);
    if c.hypot(s) < MIN_PAIR_NORM {
        return None;
    }
    Some(Angle::new(s.atan2(c)))
}

/// `1 - |wrapped error| / pi`, in `[0, 1]`.
pub fn accuracy(predicted: Angle, target: Angle) -> f64 {
    1.0 - predicted.signed_diff(target).abs() / PI
}

fn record_accuracy(r: &TrialRecord) -> Option<f64> {
    r.predicted_deg.map(|p| accuracy(Angle::from_degrees(p), Angle::from_degrees(r.target_deg)))
}

fn winter_accuracies<'a>(records: &'a [TrialRecord], phase: Phase) -> impl Iterator<Item = f64> + 'a {
    records.iter().filter(move |r| r.phase == phase && r.season == Season::Winter).filter_map(record_accuracy)
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Mean accuracy on the first six winter trials of B minus that on the last
/// six winter trials of A1. Trials without a defined angle are skipped.
pub fn transfer(records: &[TrialRecord]) -> Result<f64, MetricsError> {
    let a1: Vec<f64> = winter_accuracies(records, Phase::A1).collect();
    let b: Vec<f64> = winter_accuracies(records, Phase::B).take(TRANSFER_WINDOW).collect();
    for (what, found) in [("A1 winter trials", a1.len()), ("B winter trials", b.len())] {
        if found < TRANSFER_WINDOW {
            return Err(MetricsError::TooFewTrials { what, needed: TRANSFER_WINDOW, found });
        }
    }
    Ok(mean(&b) - mean(&a1[a1.len() - TRANSFER_WINDOW..]))
}

/// Mean absolute winter error (degrees) over the last six defined A1 winter trials.
pub fn final_a1_winter_error_deg(records: &[TrialRecord]) -> Option<f64> {
    let errs: Vec<f64> = records
        .iter()
        .filter(|r| r.phase == Phase::A1 && r.season == Season::Winter)
        .filter_map(|r| r.predicted_deg.map(|p| wrap_signed((p - r.target_deg).to_radians()).abs().to_degrees()))
        .collect();
    (errs.len() >= TRANSFER_WINDOW).then(|| mean(&errs[errs.len() - TRANSFER_WINDOW..]))
}

// ---------------------------------------------------------------------------
// Bessel helpers

const SERIES_LIMIT: f64 = 20.0;

/// Power series for `I0(x)` and `I1(x)`, for moderate `x >= 0`.
fn bessel_series(x: f64) -> (f64, f64) {
    let q = 0.25 * x * x;
    let (mut t0, mut t1) = (1.0, 0.5 * x);
    let (mut i0, mut i1) = (t0, t1);
    for k in 1..500 {
        let k = k as f64;
        t0 *= q / (k * k);
        t1 *= q / (k * (k + 1.0));
        i0 += t0;
        i1 += t1;
        if t0 < 1e-17 * i0 && t1 <= 1e-17 * i1 {
            break;
        }
    }
    (i0, i1)
}

/// `I_nu(x) e^{-x} sqrt(2 pi x)` from the large-argument expansion.
fn bessel_asymptotic_scaled(nu: f64, x: f64) -> f64 {
    let mu = 4.0 * nu * nu;
    let mut term = 1.0;
    let mut sum = 1.0;
    for k in 1..200 {
        let odd = (2 * k - 1) as f64;
        let next = -term * (mu - odd * odd) / (k as f64 * 8.0 * x);
        if next.abs() >= term.abs() {
            break;
        }
        term = next;
        sum += term;
        if term.abs() < 1e-17 * sum.abs() {
            break;
        }
    }
    sum
}

/// `ln I0(x)` for `x >= 0`.
pub fn log_bessel_i0(x: f64) -> f64 {
    let x = x.abs();
    if x < SERIES_LIMIT {
        bessel_series(x).0.ln()
    } else {
        x - 0.5 * (TAU * x).ln() + bessel_asymptotic_scaled(0.0, x).ln()
    }
}

/// Mean resultant length of a von Mises with concentration `kappa`: `I1/I0`.
pub fn bessel_ratio_a1(kappa: f64) -> f64 {
    if kappa <= 0.0 {
        return 0.0;
    }
    if kappa < SERIES_LIMIT {
        let (i0, i1) = bessel_series(kappa);
        i1 / i0
    } else {
        bessel_asymptotic_scaled(1.0, kappa) / bessel_asymptotic_scaled(0.0, kappa)
    }
}

/// Closed-form approximation `kappa ~ R (2 - R^2) / (1 - R^2)`, clamped.
pub fn banerjee_kappa(mean_resultant: f64) -> f64 {
    let r = mean_resultant;
    if r <= 0.0 {
        return KAPPA_MIN;
    }
    if r >= 1.0 {
        return KAPPA_MAX;
    }
    (r * (2.0 - r * r) / (1.0 - r * r)).clamp(KAPPA_MIN, KAPPA_MAX)
}

/// Solves `A1(kappa) = r` on `[KAPPA_MIN, KAPPA_MAX]`, starting from the
/// Banerjee estimate and polishing with bracketed Newton steps.
pub fn invert_a1(r: f64) -> f64 {
    if r <= bessel_ratio_a1(KAPPA_MIN) {
        return KAPPA_MIN;
    }
    if r >= bessel_ratio_a1(KAPPA_MAX) {
        return KAPPA_MAX;
    }
    let (mut lo, mut hi) = (KAPPA_MIN, KAPPA_MAX);
    let mut k = banerjee_kappa(r);
    for _ in 0..100 {
        let a = bessel_ratio_a1(k);
        let f = a - r;
        if f > 0.0 {
            hi = k;
        } else {
            lo = k;
        }
        if f.abs() < 1e-15 {
            break;
        }
        let slope = 1.0 - a / k - a * a;
        let mut next = k - f / slope;
        if !(next > lo && next < hi) || !next.is_finite() {
            next = 0.5 * (lo + hi);
        }
        if (next - k).abs() <= 1e-14 * k {
            k = next;
            break;
        }
        k = next;
    }
    k
}

// ---------------------------------------------------------------------------
// Mixture fit

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VonMisesMixtureFit {
    /// Weight of the component centred on the task-A response.
    pub w_a: f64,
    pub kappa: f64,
    /// Signed component means in radians.
    pub mu_a: f64,
    pub mu_b: f64,
    pub log_likelihood: f64,
    pub iterations: usize,
    pub converged: bool,
    pub degenerate: bool,
    /// Log-likelihood at the start and after every EM iteration.
    #[serde(default)]
    pub log_likelihood_trace: Vec<f64>,
}

fn log_sum_exp(a: f64, b: f64) -> f64 {
    let m = a.max(b);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + ((a - m).exp() + (b - m).exp()).ln()
}

fn mixture_log_likelihood(deltas: &[f64], w_a: f64, kappa: f64, mu_a: f64, mu_b: f64) -> f64 {
    let norm = TAU.ln() + log_bessel_i0(kappa);
    let (lw_a, lw_b) = (w_a.ln(), (1.0 - w_a).ln());
    deltas
        .iter()
        .map(|d| log_sum_exp(lw_a + kappa * (d - mu_a).cos(), lw_b + kappa * (d - mu_b).cos()) - norm)
        .sum()
}

/// EM for `w_a vM(mu_a, kappa) + (1 - w_a) vM(mu_b, kappa)` with both means
/// fixed. Starts from `w_a = 0.5, kappa = 4`; the kappa M-step is solved
/// exactly so the log-likelihood never decreases.
pub fn fit_fixed_mean_mixture(deltas: &[f64], mu_a: f64, mu_b: f64) -> VonMisesMixtureFit {
    let n = deltas.len() as f64;
    if wrap_signed(mu_b - mu_a).abs() < DEGENERATE_SEPARATION_DEG.to_radians() {
        let r = deltas.iter().map(|d| (d - mu_a).cos()).sum::<f64>() / n;
        let kappa = invert_a1(r);
        let ll = mixture_log_likelihood(deltas, 1.0, kappa, mu_a, mu_b);
        return VonMisesMixtureFit {
            w_a: 1.0,
            kappa,
            mu_a,
            mu_b,
            log_likelihood: ll,
            iterations: 0,
            converged: true,
            degenerate: true,
            log_likelihood_trace: vec![ll],
        };
    }

    let cos_a: Vec<f64> = deltas.iter().map(|d| (d - mu_a).cos()).collect();
    let cos_b: Vec<f64> = deltas.iter().map(|d| (d - mu_b).cos()).collect();
    let (mut w_a, mut kappa) = (0.5, 4.0);
    let mut ll = mixture_log_likelihood(deltas, w_a, kappa, mu_a, mu_b);
    let mut trace = vec![ll];
    let mut converged = false;
    let mut iterations = 0;
    while iterations < EM_MAX_ITER {
        iterations += 1;
        // E-step: responsibilities of the A component
        let (lw_a, lw_b) = (w_a.ln(), (1.0 - w_a).ln());
        let mut sum_r = 0.0;
        let mut resultant = 0.0;
        for (ca, cb) in cos_a.iter().zip(&cos_b) {
            let la = lw_a + kappa * ca;
            let lb = lw_b + kappa * cb;
            let r = if la == lb { 0.5 } else { 1.0 / (1.0 + (lb - la).exp()) };
            sum_r += r;
            resultant += r * ca + (1.0 - r) * cb;
        }
        // M-step
        w_a = (sum_r / n).clamp(0.0, 1.0);
        kappa = invert_a1(resultant / n);
        let next = mixture_log_likelihood(deltas, w_a, kappa, mu_a, mu_b);
        trace.push(next);
        let delta = next - ll;
        ll = next;
        if delta.abs() < EM_TOL {
            converged = true;
            break;
        }
    }
    VonMisesMixtureFit {
        w_a,
        kappa,
        mu_a,
        mu_b,
        log_likelihood: ll,
        iterations,
        converged,
        degenerate: false,
        log_likelihood_trace: trace,
    }
}

/// Fits the mixture to A2 winter errors measured from the task-A rule, with
/// components fixed at 0 and at the wrapped B-minus-A rule difference.
pub fn fit_interference_mixture(records: &[TrialRecord], schedule: &Schedule) -> Result<VonMisesMixtureFit, MetricsError> {
    let mut deltas = Vec::new();
    for r in records.iter().filter(|r| r.phase == Phase::A2 && r.season == Season::Winter) {
        let trial = schedule.trials.get(r.trial).ok_or(MetricsError::UnknownTrial(r.trial))?;
        if let Some(p) = r.predicted_deg {
            deltas.push(Angle::from_degrees(p).signed_diff(trial.target_angle));
        }
    }
    if deltas.len() < MIN_MIXTURE_TRIALS {
        return Err(MetricsError::TooFewTrials {
            what: "A2 winter trials with a defined angle",
            needed: MIN_MIXTURE_TRIALS,
            found: deltas.len(),
        });
    }
    let mu_b = schedule.rule_b.offset.signed_diff(schedule.rule_a.offset);
    Ok(fit_fixed_mean_mixture(&deltas, 0.0, mu_b))
}

/// `1 - w_a`, or 0 for a degenerate fit.
pub fn interference(fit: &VonMisesMixtureFit) -> f64 {
    if fit.degenerate {
        0.0
    } else {
        1.0 - fit.w_a
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyCurve {
    pub phase: Phase,
    pub season: Season,
    /// Per-trial accuracy in schedule order; `None` where no angle was defined.
    pub accuracy: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BehavioralSummary {
    pub curves: Vec<AccuracyCurve>,
    pub transfer: f64,
    pub interference: f64,
    pub fit: VonMisesMixtureFit,
    pub undefined_angle_count: usize,
    pub a1_final_winter_error_deg: Option<f64>,
}

pub fn summarize_behavior(records: &[TrialRecord], schedule: &Schedule) -> Result<BehavioralSummary, MetricsError> {
    let mut curves = Vec::new();
    for phase in Phase::ALL {
        for season in [Season::Summer, Season::Winter] {
            let accuracy =
                records.iter().filter(|r| r.phase == phase && r.season == season).map(record_accuracy).collect();
            curves.push(AccuracyCurve { phase, season, accuracy });
        }
    }
    let fit = fit_interference_mixture(records, schedule)?;
    Ok(BehavioralSummary {
        curves,
        transfer: transfer(records)?,
        interference: interference(&fit),
        fit,
        undefined_angle_count: records.iter().filter(|r| r.predicted_deg.is_none()).count(),
        a1_final_winter_error_deg: final_a1_winter_error_deg(records),
    })
}
