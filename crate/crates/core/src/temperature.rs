//! Softmax temperature as an erasure mitigation: rescaling, a 1-D search
//! for the temperature minimizing ER^r, and perplexity traces.

use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::distributions::{CandidateSet, ProbDist};
use crate::error::{Error, Result};
use crate::metrics;
use crate::scoring::{self, ScoringBackend, ScoringError};

pub const GRID_STEP: f64 = 0.005;
pub const REFINE_TOLERANCE: f64 = 1e-4;
pub const DEFAULT_INTERVAL: (f64, f64) = (0.25, 4.0);
const TIE_TOLERANCE: f64 = 1e-12;
const EDGE_TOLERANCE: f64 = 1e-6;

/// `p_i ∝ exp(ℓ_i / τ)` over candidate log-masses.
pub fn rescale(candidates: &Arc<CandidateSet>, log_masses: &[f64], tau: f64) -> Result<ProbDist> {
    if !(tau.is_finite() && tau > 0.0) {
        return Err(Error::Domain(format!("temperature must be > 0, got {tau}")));
    }
    if let Some(l) = log_masses.iter().find(|l| !l.is_finite()) {
        return Err(Error::Domain(format!("log-mass {l} is not finite")));
    }
    let scaled: Vec<f64> = log_masses.iter().map(|l| l / tau).collect();
    ProbDist::from_log_weights(candidates.clone(), &scaled)
}

/// Where the temperature is applied.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemperatureMode {
    /// Per-token softmax temperature inside the backend.
    Exact,
    /// Rescaling of the alias-summed candidate masses.
    CandidateAggregate,
}

/// What the search minimizes.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TauObjective {
    /// Mean over prompts of per-prompt ER^r.
    #[default]
    Average,
    /// ER^r of the uniform prompt aggregate.
    Aggregate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TauCurve {
    pub mode: TemperatureMode,
    pub objective: TauObjective,
    pub r: f64,
    pub tau_values: Vec<f64>,
    pub er_values: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub perplexity_values: Option<Vec<f64>>,
    pub tau_star: f64,
    pub er_at_star: f64,
    pub er_at_one: Option<f64>,
}

impl TauCurve {
    /// `tau,er[,perplexity]`
    pub fn to_csv(&self) -> String {
        let mut out = String::from(if self.perplexity_values.is_some() {
            "tau,er,perplexity\n"
        } else {
            "tau,er\n"
        });
        for (i, (t, e)) in self.tau_values.iter().zip(&self.er_values).enumerate() {
            match &self.perplexity_values {
                Some(p) => out.push_str(&format!("{t},{e},{}\n", p[i])),
                None => out.push_str(&format!("{t},{e}\n")),
            }
        }
        out
    }
}

/// Grid points `lo, lo + step, …` up to and including `hi`.
pub fn tau_grid(lo: f64, hi: f64, step: f64) -> Result<Vec<f64>> {
    if !(lo.is_finite() && hi.is_finite() && lo > 0.0 && lo < hi) {
        return Err(Error::Contract(format!(
            "temperature interval [{lo}, {hi}] is empty or not positive"
        )));
    }
    if step.is_nan() || step <= 0.0 {
        return Err(Error::Contract(format!("grid step must be > 0, got {step}")));
    }
    let n = ((hi - lo) / step + 1e-9).floor() as usize;
    let mut grid: Vec<f64> = (0..=n).map(|k| lo + k as f64 * step).collect();
    if hi - grid[n] > 1e-12 {
        grid.push(hi);
    }
    Ok(grid)
}

/// `a` beats `b` when its objective is lower, or equal within tolerance and
/// its τ is closer to 1 (then smaller).
fn better(a: (f64, f64), b: (f64, f64)) -> bool {
    let (ta, ea) = a;
    let (tb, eb) = b;
    if ea < eb - TIE_TOLERANCE {
        return true;
    }
    if ea > eb + TIE_TOLERANCE {
        return false;
    }
    let (da, db) = ((ta - 1.0).abs(), (tb - 1.0).abs());
    da < db || (da == db && ta < tb)
}

/// Picks the best `(τ, objective)` pair under the tie rule of the search.
pub fn best_point(points: &[(f64, f64)]) -> Option<(f64, f64)> {
    points.iter().copied().fold(None, |best, p| match best {
        Some(b) if !better(p, b) => Some(b),
        _ => Some(p),
    })
}

fn golden_section<F: Fn(f64) -> Result<f64>>(f: &F, mut a: f64, mut b: f64, tol: f64) -> Result<(f64, f64)> {
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let mut fc = f(c)?;
    let mut fd = f(d)?;
    while b - a > tol {
        if fc <= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = f(c)?;
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = f(d)?;
        }
    }
    Ok(if fc <= fd { (c, fc) } else { (d, fd) })
}

/// Bisects between `inside` and `outside` for the last point whose value
/// ties with `inside`.
fn plateau_edge<F: Fn(f64) -> Result<f64>>(f: &F, inside: (f64, f64), outside: f64) -> Result<(f64, f64)> {
    let (mut good, mut value) = inside;
    let mut bad = outside;
    while (bad - good).abs() > EDGE_TOLERANCE {
        let mid = 0.5 * (good + bad);
        let e = f(mid)?;
        if e <= inside.1 + TIE_TOLERANCE {
            good = mid;
            value = e;
        } else {
            bad = mid;
        }
    }
    Ok((good, value))
}

/// Minimizes `objective` over `[lo, hi]`: a grid of step [`GRID_STEP`], then
/// golden-section refinement around the best grid point. τ = 1 is always
/// considered when it lies in the interval. Near-equal values (within 1e-12)
/// are resolved in favour of the τ closest to 1.
pub fn minimize_tau<F>(
    objective: F,
    interval: (f64, f64),
    mode: TemperatureMode,
    kind: TauObjective,
    r: f64,
) -> Result<TauCurve>
where
    F: Fn(f64) -> Result<f64> + Sync,
{
    let (lo, hi) = interval;
    let grid = tau_grid(lo, hi, GRID_STEP)?;
    let er_values = grid
        .par_iter()
        .map(|&t| objective(t))
        .collect::<Result<Vec<f64>>>()?;
    let points: Vec<(f64, f64)> = grid.iter().copied().zip(er_values.iter().copied()).collect();
    let (best_tau, _) = best_point(&points).expect("grid is non-empty");
    let i = grid.iter().position(|&t| t == best_tau).expect("grid point");

    let mut candidates = points.clone();
    let a = grid[i.saturating_sub(1)];
    let b = grid[(i + 1).min(grid.len() - 1)];
    if b > a {
        candidates.push(golden_section(&objective, a, b, REFINE_TOLERANCE)?);
    }
    // a flat minimum ends at a jump; find the end nearest τ = 1
    let toward_one = if best_tau < 1.0 { i + 1 } else { i.wrapping_sub(1) };
    if best_tau != 1.0 && toward_one < grid.len() {
        candidates.push(plateau_edge(&objective, points[i], grid[toward_one])?);
    }
    let er_at_one = if (lo..=hi).contains(&1.0) {
        let e = objective(1.0)?;
        candidates.push((1.0, e));
        Some(e)
    } else {
        None
    };
    let (tau_star, er_at_star) = best_point(&candidates).expect("non-empty");
    Ok(TauCurve {
        mode,
        objective: kind,
        r,
        tau_values: grid,
        er_values,
        perplexity_values: None,
        tau_star,
        er_at_star,
        er_at_one,
    })
}

/// Objective value at one τ for candidate-aggregate rescaling.
pub fn rescaled_objective(
    candidates: &Arc<CandidateSet>,
    per_prompt_logmasses: &[Vec<f64>],
    p_true: &ProbDist,
    r: f64,
    tau: f64,
    kind: TauObjective,
) -> Result<f64> {
    let preds = per_prompt_logmasses
        .iter()
        .map(|l| rescale(candidates, l, tau))
        .collect::<Result<Vec<_>>>()?;
    objective_of(&preds, p_true, r, kind)
}

fn objective_of(preds: &[ProbDist], p_true: &ProbDist, r: f64, kind: TauObjective) -> Result<f64> {
    match kind {
        TauObjective::Average => {
            let mut total = 0.0;
            for p in preds {
                total += metrics::erasure(p_true, p, r)?;
            }
            Ok(total / preds.len() as f64)
        }
        TauObjective::Aggregate => metrics::erasure(p_true, &metrics::aggregate_uniform(preds)?, r),
    }
}

/// Temperature search by rescaling stored candidate log-masses.
pub fn optimize_tau(
    per_prompt_logmasses: &[Vec<f64>],
    p_true: &ProbDist,
    r: f64,
    interval: (f64, f64),
    kind: TauObjective,
) -> Result<TauCurve> {
    if per_prompt_logmasses.is_empty() {
        return Err(Error::Contract("at least one prompt is required".into()));
    }
    let candidates = p_true.candidates().clone();
    if let Some(l) = per_prompt_logmasses.iter().find(|l| l.len() != candidates.len()) {
        return Err(Error::Contract(format!(
            "{} log-masses for {} countries",
            l.len(),
            candidates.len()
        )));
    }
    minimize_tau(
        |tau| rescaled_objective(&candidates, per_prompt_logmasses, p_true, r, tau, kind),
        interval,
        TemperatureMode::CandidateAggregate,
        kind,
        r,
    )
}

/// Temperature search with the backend applying τ at every token.
pub fn optimize_tau_exact<B: ScoringBackend + ?Sized>(
    backend: &B,
    prompts: &[String],
    p_true: &ProbDist,
    r: f64,
    interval: (f64, f64),
    kind: TauObjective,
) -> Result<TauCurve> {
    if !backend.descriptor().supports_temperature {
        return Err(ScoringError::Capability(format!(
            "{} does not support temperature",
            backend.descriptor().model_label
        ))
        .into());
    }
    if prompts.is_empty() {
        return Err(Error::Contract("at least one prompt is required".into()));
    }
    let candidates = p_true.candidates().clone();
    minimize_tau(
        |tau| {
            let preds = prompts
                .iter()
                .map(|c| scoring::country_distribution(backend, c, &candidates, tau))
                .collect::<Result<Vec<_>>>()?;
            objective_of(&preds, p_true, r, kind)
        },
        interval,
        TemperatureMode::Exact,
        kind,
        r,
    )
}

/// Perplexity of `texts` with τ applied at the backend's per-token softmax.
pub fn tau_perplexity_trace<B: ScoringBackend + ?Sized, S: AsRef<str> + Sync>(
    backend: &B,
    texts: &[S],
    tau_values: &[f64],
) -> Result<Vec<f64>> {
    if !backend.descriptor().supports_temperature {
        return Err(ScoringError::Capability(format!(
            "{} does not support temperature",
            backend.descriptor().model_label
        ))
        .into());
    }
    tau_values
        .iter()
        .map(|&t| scoring::perplexity_at(backend, texts, t))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(n: usize) -> Arc<CandidateSet> {
        let names: Vec<String> = (0..n).map(|i| format!("C{i}")).collect();
        Arc::new(CandidateSet::from_names(&names).unwrap())
    }

    #[test]
    fn rescale_examples() {
        let s = set(2);
        let l = [0.0, 0.25f64.ln()];
        let p = rescale(&s, &l, 0.5).unwrap();
        assert!((p.probs()[0] - 1.0 / 1.0625).abs() < 1e-12);
        assert!((p.probs()[0] - 0.9412).abs() < 1e-4);
        assert!((p.probs()[1] - 0.0588).abs() < 1e-4);
        let one = rescale(&s, &l, 1.0).unwrap();
        assert_eq!(
            one.probs(),
            ProbDist::from_log_weights(s.clone(), &l).unwrap().probs()
        );
        let cold = rescale(&s, &l, 1e-3).unwrap();
        assert!(cold.probs()[0] > 1.0 - 1e-12);
        assert!(matches!(rescale(&s, &l, 0.0), Err(Error::Domain(_))));
        assert!(matches!(
            rescale(&s, &[0.0, f64::NEG_INFINITY], 1.0),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn grid_covers_interval() {
        let g = tau_grid(0.25, 4.0, GRID_STEP).unwrap();
        assert_eq!(g.len(), 751);
        assert_eq!(g[0], 0.25);
        assert!((g[750] - 4.0).abs() < 1e-12);
        assert!(tau_grid(1.0, 1.0, GRID_STEP).is_err());
        assert!(tau_grid(2.0, 1.0, GRID_STEP).is_err());
        let g = tau_grid(1.0, 1.012, GRID_STEP).unwrap();
        assert_eq!(*g.last().unwrap(), 1.012);
    }

    #[test]
    fn matched_truth_keeps_unit_temperature() {
        let s = set(3);
        let l = vec![-1.0, -2.0, -3.5];
        let p_true = rescale(&s, &l, 1.0).unwrap();
        let curve = optimize_tau(&[l], &p_true, 3.0, DEFAULT_INTERVAL, TauObjective::Average).unwrap();
        assert!((curve.tau_star - 1.0).abs() < 1e-3);
        assert!(curve.er_at_star.abs() < 1e-12);
        assert_eq!(curve.mode, TemperatureMode::CandidateAggregate);
    }

    #[test]
    fn flattening_reduces_erasure() {
        let s = set(3);
        let p_true = ProbDist::new(s.clone(), vec![0.4, 0.35, 0.25]).unwrap();
        let l = vec![0.9f64.ln(), 0.08f64.ln(), 0.02f64.ln()];
        let curve = optimize_tau(
            std::slice::from_ref(&l),
            &p_true,
            2.0,
            DEFAULT_INTERVAL,
            TauObjective::Average,
        )
        .unwrap();
        assert!(curve.tau_star > 1.0);
        assert!(curve.er_at_star <= curve.er_at_one.unwrap());
        assert!(curve.er_values.iter().all(|e| curve.er_at_star <= e + 1e-9));
        let agg = optimize_tau(&[l], &p_true, 2.0, DEFAULT_INTERVAL, TauObjective::Aggregate).unwrap();
        assert!((agg.tau_star - curve.tau_star).abs() < 1e-9);
    }

    #[test]
    fn tie_rule_prefers_unit_temperature() {
        assert_eq!(
            best_point(&[(0.5, 0.0), (1.2, 0.0), (3.0, 0.0)]),
            Some((1.2, 0.0))
        );
        assert_eq!(best_point(&[(0.9, 0.0), (1.1, 0.0)]).unwrap().0, 0.9);
        assert_eq!(best_point(&[(0.5, -1.0), (1.0, 0.0)]), Some((0.5, -1.0)));
    }

    #[test]
    fn csv_has_header() {
        let s = set(2);
        let p_true = ProbDist::new(s, vec![0.5, 0.5]).unwrap();
        let curve = optimize_tau(
            &[vec![0.0, -1.0]],
            &p_true,
            2.0,
            (0.9, 1.0),
            TauObjective::Average,
        )
        .unwrap();
        let csv = curve.to_csv();
        assert!(csv.starts_with("tau,er\n0.9,"));
        assert_eq!(csv.lines().count(), 22);
    }
}
