//! Survival evaluation: time-dependent concordance, Harrell's C, and
//! the Kaplan-Meier product-limit estimator.
//!
//! Pair conventions, pinned for reproducibility: a pair `(i, j)` is
//! comparable when `time_i < time_j` and subject `i` had the event;
//! pairs with tied outcome times are excluded (not half-counted). Ties
//! in the *predicted* quantity count one half. Both indices are rank
//! statistics: any strictly increasing transform of the predictions
//! leaves them unchanged.

use crate::error::{Error, Result};
use crate::survival::TimeGrid;

/// Observed follow-up of one subject.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Outcome {
    pub time: f64,
    pub event: bool,
}

fn check_outcomes(outcomes: &[Outcome]) -> Result<()> {
    if outcomes.is_empty() {
        return Err(Error::EmptyCohort);
    }
    for o in outcomes {
        if !o.time.is_finite() || o.time <= 0.0 {
            return Err(Error::NonPositiveTime { context: format!("outcome time {}", o.time) });
        }
    }
    Ok(())
}

/// Time-dependent concordance over per-subject survival curves aligned
/// to one grid. For a comparable pair the curves are compared at the
/// grid interval containing the earlier subject's time (right-closed,
/// the same convention as label discretization): concordant when the
/// earlier subject's predicted survival there is strictly lower.
pub fn ctd_index(curves: &[Vec<f64>], grid: &TimeGrid, outcomes: &[Outcome]) -> Result<f64> {
    check_outcomes(outcomes)?;
    if curves.len() != outcomes.len() {
        return Err(Error::shape(
            "ctd_index",
            format!("{} curves vs {} outcomes", curves.len(), outcomes.len()),
        ));
    }
    let p = grid.intervals();
    for c in curves {
        if c.len() != p {
            return Err(Error::shape(
                "ctd_index",
                format!("curve of length {} vs {p} grid intervals", c.len()),
            ));
        }
    }
    let n = outcomes.len();
    let mut comparable = 0u64;
    let mut concordant = 0u64;
    let mut ties = 0u64;
    for i in 0..n {
        if !outcomes[i].event {
            continue;
        }
        let tau = grid.interval_index(outcomes[i].time) - 1;
        let si = curves[i][tau];
        for j in 0..n {
            if outcomes[i].time >= outcomes[j].time {
                continue;
            }
            comparable += 1;
            let sj = curves[j][tau];
            if si < sj {
                concordant += 1;
            } else if si == sj {
                ties += 1;
            }
        }
    }
    if comparable == 0 {
        return Err(Error::NoComparablePairs);
    }
    Ok((concordant as f64 + 0.5 * ties as f64) / comparable as f64)
}

/// Harrell's concordance for one time-independent risk score per
/// subject: higher risk should pair with the earlier event.
pub fn harrell_c(risk_scores: &[f64], outcomes: &[Outcome]) -> Result<f64> {
    check_outcomes(outcomes)?;
    if risk_scores.len() != outcomes.len() {
        return Err(Error::shape(
            "harrell_c",
            format!("{} scores vs {} outcomes", risk_scores.len(), outcomes.len()),
        ));
    }
    let n = outcomes.len();
    let mut comparable = 0u64;
    let mut concordant = 0u64;
    let mut ties = 0u64;
    for i in 0..n {
        if !outcomes[i].event {
            continue;
        }
        for j in 0..n {
            if outcomes[i].time >= outcomes[j].time {
                continue;
            }
            comparable += 1;
            if risk_scores[i] > risk_scores[j] {
                concordant += 1;
            } else if risk_scores[i] == risk_scores[j] {
                ties += 1;
            }
        }
    }
    if comparable == 0 {
        return Err(Error::NoComparablePairs);
    }
    Ok((concordant as f64 + 0.5 * ties as f64) / comparable as f64)
}

/// Product-limit survival estimate as a right-continuous step curve.
/// The curve starts at `(0, 1)` and steps at each distinct event time.
#[derive(Clone, Debug, PartialEq)]
pub struct StepCurve {
    pub points: Vec<(f64, f64)>,
}

impl StepCurve {
    /// Survival at `time` (right-continuous lookup).
    pub fn survival_at(&self, time: f64) -> f64 {
        let mut s = 1.0;
        for &(t, v) in &self.points {
            if t <= time {
                s = v;
            } else {
                break;
            }
        }
        s
    }
}

/// Kaplan-Meier estimator: `S(t) = prod_{t_i <= t} (1 - d_i / n_i)`
/// over distinct event times, where `n_i` counts subjects still at
/// risk (`time >= t_i`) and censored subjects leave the risk set after
/// their censor time.
pub fn kaplan_meier(outcomes: &[Outcome]) -> Result<StepCurve> {
    check_outcomes(outcomes)?;
    let mut sorted: Vec<&Outcome> = outcomes.iter().collect();
    sorted.sort_by(|a, b| a.time.partial_cmp(&b.time).unwrap());
    let n = sorted.len();

    let mut points = vec![(0.0, 1.0)];
    let mut survival = 1.0;
    let mut i = 0;
    while i < n {
        let t = sorted[i].time;
        let at_risk = (n - i) as f64;
        let mut deaths = 0.0;
        let mut j = i;
        while j < n && sorted[j].time == t {
            if sorted[j].event {
                deaths += 1.0;
            }
            j += 1;
        }
        if deaths > 0.0 {
            survival *= 1.0 - deaths / at_risk;
            points.push((t, survival));
        }
        i = j;
    }
    Ok(StepCurve { points })
}
