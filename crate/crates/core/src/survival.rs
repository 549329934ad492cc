//! Fully parametric discrete-time survival head.
//!
//! Time is discretized into `p` right-closed intervals `(t_{j-1}, t_j]`
//! with `t_0 = 0`. The head maps a fused embedding to `p` logits; the
//! sigmoid of each logit is the conditional probability of *surviving*
//! its interval, so the hazard is `h_j = sigmoid(-logit_j)`. Survival
//! through interval `j` is the running product of `(1 - h_q)`.
//!
//! The training loss is the per-subject factorization of the negative
//! log-likelihood, averaged over the batch:
//!
//! * event in interval `j*`: `-(log h_{j*} + sum_{q<j*} log(1 - h_q))`
//! * censored: `-sum log(1 - h_q)` over fully elapsed intervals only —
//!   intervals `1..j*-1`, plus `j*` itself when the censor time sits
//!   exactly on `t_{j*}` (or beyond the grid horizon).
//!
//! Hazards are clamped to `[1e-7, 1 - 1e-7]` inside the logs only.

use crate::error::{Error, Result};
use crate::nn::LinearLayer;
use crate::tensor::{elem, Element, Tape, Tensor};

/// Strictly increasing positive interval upper limits `t_1 < .. < t_p`.
#[derive(Clone, Debug, PartialEq)]
pub struct TimeGrid {
    edges: Vec<f64>,
}

impl TimeGrid {
    pub fn from_edges(edges: Vec<f64>) -> Result<Self> {
        if edges.is_empty() {
            return Err(Error::ConfigError("time grid needs at least one edge".into()));
        }
        let mut prev = 0.0;
        for &e in &edges {
            if !e.is_finite() || e <= prev {
                return Err(Error::ConfigError(format!(
                    "grid edges must be strictly increasing positive reals, got {edges:?}"
                )));
            }
            prev = e;
        }
        Ok(TimeGrid { edges })
    }

    pub fn intervals(&self) -> usize {
        self.edges.len()
    }

    pub fn edges(&self) -> &[f64] {
        &self.edges
    }

    /// 1-based index of the interval containing `time` (right-closed);
    /// times beyond the last edge clamp to the last interval.
    pub fn interval_index(&self, time: f64) -> usize {
        match self.edges.iter().position(|&e| time <= e) {
            Some(i) => i + 1,
            None => self.edges.len(),
        }
    }
}

/// Builds a grid with edges at the `j/p` empirical quantiles of the
/// supplied times (linear interpolation between order statistics, the
/// R type-7 convention), so every interval receives roughly the same
/// number of subjects. The last edge is the maximum time.
pub fn build_grid(times: &[f64], p: usize) -> Result<TimeGrid> {
    if p == 0 {
        return Err(Error::ConfigError("interval count must be at least 1".into()));
    }
    for &t in times {
        if !t.is_finite() || t <= 0.0 {
            return Err(Error::NonPositiveTime { context: format!("grid input time {t}") });
        }
    }
    let mut sorted = times.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut distinct = sorted.clone();
    distinct.dedup();
    if distinct.len() < p {
        return Err(Error::TooFewDistinctTimes { needed: p, got: distinct.len() });
    }
    let n = sorted.len();
    let mut edges = Vec::with_capacity(p);
    for j in 1..=p {
        let q = j as f64 / p as f64;
        let pos = (n - 1) as f64 * q;
        let lo = pos.floor() as usize;
        let frac = pos - lo as f64;
        let v = if lo + 1 < n {
            sorted[lo] + frac * (sorted[lo + 1] - sorted[lo])
        } else {
            sorted[lo]
        };
        edges.push(v);
    }
    if edges.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::TooFewDistinctTimes { needed: p, got: distinct.len() });
    }
    TimeGrid::from_edges(edges)
}

/// Discrete outcome of one subject on a grid.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DiscreteLabel {
    /// 1-based interval containing the observed time.
    pub interval_index: usize,
    pub event: bool,
    pub raw_time: f64,
}

/// Maps a raw follow-up time onto the grid. Intervals are right-closed;
/// times beyond the horizon clamp to the last interval with the event
/// flag forced to censored.
pub fn discretize(grid: &TimeGrid, raw_time: f64, event: bool) -> Result<DiscreteLabel> {
    if !raw_time.is_finite() || raw_time <= 0.0 {
        return Err(Error::NonPositiveTime { context: format!("discretize time {raw_time}") });
    }
    let p = grid.intervals();
    let (interval_index, event) = if raw_time > grid.edges()[p - 1] {
        (p, false)
    } else {
        (grid.interval_index(raw_time), event)
    };
    Ok(DiscreteLabel { interval_index, event, raw_time })
}

/// Output layer: one unit per interval.
pub struct SurvivalHead<T: Element> {
    pub linear: LinearLayer<T>,
}

impl<T: Element> SurvivalHead<T> {
    pub fn new(embed_dim: usize, intervals: usize, rng: &mut rand_chacha::ChaCha8Rng) -> Self {
        SurvivalHead { linear: LinearLayer::new(embed_dim, intervals, rng) }
    }

    pub fn intervals(&self) -> usize {
        self.linear.out_features()
    }

    /// Hazards and survival curve for a fused batch `[N, m]`. The
    /// sigmoid of a logit is the conditional survival of the interval,
    /// so `h = sigmoid(-logit)`.
    pub fn forward(&self, tape: &mut Tape<T>, fused: &Tensor<T>) -> Result<SurvivalOutput<T>> {
        let logits = self.linear.forward(tape, fused)?;
        let neg = tape.neg(&logits)?;
        let hazards = tape.sigmoid(&neg)?;
        let survival = survival_curve(tape, &hazards)?;
        Ok(SurvivalOutput { hazards, survival })
    }

    pub(crate) fn visit_params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor<T>)>) {
        self.linear.visit_params(&format!("{prefix}.linear"), out);
    }

    pub(crate) fn visit_params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor<T>)>) {
        self.linear.visit_params_mut(&format!("{prefix}.linear"), out);
    }
}

/// Per-subject hazards `h` and survival `S`, both `[N, p]`, with
/// `S_j = prod_{q<=j} (1 - h_q)` (non-increasing in `j`).
pub struct SurvivalOutput<T: Element> {
    pub hazards: Tensor<T>,
    pub survival: Tensor<T>,
}

fn check_hazards<T: Element>(h: &Tensor<T>) -> Result<()> {
    for &v in h.data() {
        let v = v.to_f64().unwrap();
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::HazardOutOfRange { value: v });
        }
    }
    Ok(())
}

/// `S_j = prod_{q<=j} (1 - h_q)` along each row of `h [N, p]`.
pub fn survival_curve<T: Element>(tape: &mut Tape<T>, hazards: &Tensor<T>) -> Result<Tensor<T>> {
    if hazards.rank() != 2 {
        return Err(Error::shape(
            "survival_curve",
            format!("expected [N,p] hazards, got {:?}", hazards.shape()),
        ));
    }
    check_hazards(hazards)?;
    let one_minus = tape.affine(hazards, -T::one(), T::one())?;
    tape.cumprod_rows(&one_minus)
}

const HAZARD_CLAMP: f64 = 1e-7;

/// Censoring-aware negative log-likelihood, averaged over the batch.
/// The grid supplies the interval edges needed to decide whether a
/// censored subject fully survived its final interval.
pub fn nll_loss<T: Element>(
    tape: &mut Tape<T>,
    out: &SurvivalOutput<T>,
    labels: &[DiscreteLabel],
    grid: &TimeGrid,
) -> Result<Tensor<T>> {
    let h = &out.hazards;
    let (n, p) = match h.shape() {
        [n, p] => (*n, *p),
        s => return Err(Error::shape("nll_loss", format!("hazards {s:?}"))),
    };
    if labels.len() != n {
        return Err(Error::shape(
            "nll_loss",
            format!("{n} hazard rows vs {} labels", labels.len()),
        ));
    }
    if grid.intervals() != p {
        return Err(Error::shape(
            "nll_loss",
            format!("{p} hazard columns vs {} grid intervals", grid.intervals()),
        ));
    }
    check_hazards(h)?;

    let mut event_mask = vec![T::zero(); n * p];
    let mut surv_mask = vec![T::zero(); n * p];
    for (i, label) in labels.iter().enumerate() {
        let j = label.interval_index;
        if j == 0 || j > p {
            return Err(Error::shape("nll_loss", format!("label interval {j} outside 1..={p}")));
        }
        if label.event {
            event_mask[i * p + (j - 1)] = T::one();
            for q in 0..j - 1 {
                surv_mask[i * p + q] = T::one();
            }
        } else {
            // fully elapsed intervals only: include j when the censor
            // time reaches the interval's upper edge (or lies beyond
            // the horizon)
            let full = label.raw_time >= grid.edges()[j - 1];
            let upto = if full { j } else { j - 1 };
            for q in 0..upto {
                surv_mask[i * p + q] = T::one();
            }
        }
    }

    let event_mask = Tensor::from_vec(vec![n, p], event_mask)?;
    let surv_mask = Tensor::from_vec(vec![n, p], surv_mask)?;
    let lo = elem::<T>(HAZARD_CLAMP);
    let hi = T::one() - lo;

    let h_cl = tape.clamp(h, lo, hi)?;
    let log_h = tape.log(&h_cl)?;
    let one_minus = tape.affine(h, -T::one(), T::one())?;
    let om_cl = tape.clamp(&one_minus, lo, hi)?;
    let log_s = tape.log(&om_cl)?;

    let ev_term = tape.mul(&event_mask, &log_h)?;
    let sv_term = tape.mul(&surv_mask, &log_s)?;
    let sum = tape.add(&ev_term, &sv_term)?;
    let total = tape.sum_all(&sum)?;
    tape.affine(&total, -T::one() / elem::<T>(n as f64), T::zero())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid_246() -> TimeGrid {
        TimeGrid::from_edges(vec![2.0, 4.0, 6.0]).unwrap()
    }

    #[test]
    fn build_grid_deciles_of_one_to_ten() {
        let times: Vec<f64> = (1..=10).map(|v| v as f64).collect();
        let grid = build_grid(&times, 2).unwrap();
        assert_eq!(grid.edges(), &[5.5, 10.0]);
        // every interval receives five subjects
        let in_first = times.iter().filter(|&&t| t <= 5.5).count();
        assert_eq!(in_first, 5);
    }

    #[test]
    fn build_grid_single_interval_is_max() {
        let grid = build_grid(&[3.0, 1.0, 7.5], 1).unwrap();
        assert_eq!(grid.edges(), &[7.5]);
        assert_eq!(grid.interval_index(0.1), 1);
        assert_eq!(grid.interval_index(7.5), 1);
    }

    #[test]
    fn build_grid_identical_times_rejected() {
        assert!(matches!(
            build_grid(&[2.0, 2.0, 2.0], 2),
            Err(Error::TooFewDistinctTimes { needed: 2, got: 1 })
        ));
    }

    #[test]
    fn discretize_membership_and_boundaries() {
        let grid = grid_246();
        assert_eq!(discretize(&grid, 3.0, true).unwrap().interval_index, 2);
        // right-closed: exactly 4.0 belongs to interval 2
        assert_eq!(discretize(&grid, 4.0, true).unwrap().interval_index, 2);
        let clamped = discretize(&grid, 9.9, true).unwrap();
        assert_eq!(clamped.interval_index, 3);
        assert!(!clamped.event);
    }

    #[test]
    fn discretize_rejects_non_positive() {
        let grid = grid_246();
        assert!(matches!(discretize(&grid, 0.0, true), Err(Error::NonPositiveTime { .. })));
    }

    #[test]
    fn survival_curve_zero_and_half_hazards() {
        let mut tape = Tape::new();
        let zero = Tensor::zeros(vec![1, 3]);
        assert_eq!(survival_curve(&mut tape, &zero).unwrap().data(), &[1.0, 1.0, 1.0]);

        let half = Tensor::from_vec(vec![1, 2], vec![0.5, 0.5]).unwrap();
        assert_eq!(survival_curve(&mut tape, &half).unwrap().data(), &[0.5, 0.25]);
    }

    #[test]
    fn survival_curve_rejects_out_of_range() {
        let mut tape = Tape::new();
        let bad = Tensor::from_vec(vec![1, 2], vec![0.5, 1.5]).unwrap();
        assert!(matches!(
            survival_curve(&mut tape, &bad),
            Err(Error::HazardOutOfRange { .. })
        ));
    }

    #[test]
    fn loss_single_event_first_interval() {
        let grid = grid_246();
        let mut tape = Tape::new();
        let h = Tensor::from_vec(vec![1, 3], vec![0.5, 0.9, 0.9]).unwrap();
        let s = survival_curve(&mut tape, &h).unwrap();
        let out = SurvivalOutput { hazards: h, survival: s };
        let labels = vec![DiscreteLabel { interval_index: 1, event: true, raw_time: 1.0 }];
        let loss = nll_loss(&mut tape, &out, &labels, &grid).unwrap();
        assert!((loss.item() - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn loss_censored_before_first_interval_end_is_zero() {
        let grid = grid_246();
        let mut tape = Tape::new();
        let h = Tensor::from_vec(vec![1, 3], vec![0.3, 0.6, 0.9]).unwrap();
        let s = survival_curve(&mut tape, &h).unwrap();
        let out = SurvivalOutput { hazards: h, survival: s };
        let labels = vec![DiscreteLabel { interval_index: 1, event: false, raw_time: 1.0 }];
        let loss = nll_loss(&mut tape, &out, &labels, &grid).unwrap();
        assert_eq!(loss.item(), 0.0);
    }

    #[test]
    fn loss_censored_exactly_at_edge_includes_the_interval() {
        let grid = grid_246();
        let mut tape = Tape::new();
        let h = Tensor::from_vec(vec![1, 3], vec![0.25, 0.5, 0.75]).unwrap();
        let s = survival_curve(&mut tape, &h).unwrap();
        let out = SurvivalOutput { hazards: h, survival: s };
        // censored at exactly t_2 = 4.0: survived intervals 1 and 2
        let labels = vec![DiscreteLabel { interval_index: 2, event: false, raw_time: 4.0 }];
        let loss = nll_loss(&mut tape, &out, &labels, &grid).unwrap();
        let want = -((1.0f64 - 0.25).ln() + (1.0f64 - 0.5).ln());
        assert!((loss.item() - want).abs() < 1e-12);
    }

    #[test]
    fn all_zero_logits_give_halving_curve() {
        let mut r = rand::SeedableRng::seed_from_u64(1);
        let head = SurvivalHead::<f64>::new(4, 3, &mut r);
        let head = SurvivalHead {
            linear: LinearLayer {
                weight: Tensor::zeros(head.linear.weight.shape().to_vec()).with_grad(),
                bias: Tensor::zeros(vec![3]).with_grad(),
            },
        };
        let mut tape = Tape::new();
        let fused = Tensor::from_vec(vec![1, 4], vec![0.4, -0.2, 1.0, 2.0]).unwrap();
        let out = head.forward(&mut tape, &fused).unwrap();
        assert_eq!(out.hazards.data(), &[0.5, 0.5, 0.5]);
        assert_eq!(out.survival.data(), &[0.5, 0.25, 0.125]);
    }

    #[test]
    fn large_positive_logits_drive_hazard_to_zero() {
        let head = SurvivalHead {
            linear: LinearLayer {
                weight: Tensor::from_vec(vec![2, 1], vec![30.0, 30.0]).unwrap().with_grad(),
                bias: Tensor::zeros(vec![2]).with_grad(),
            },
        };
        let mut tape = Tape::new();
        let fused = Tensor::from_vec(vec![1, 1], vec![1.0]).unwrap();
        let out = head.forward(&mut tape, &fused).unwrap();
        assert!(out.hazards.data().iter().all(|&h| h < 1e-12));
        assert!(out.survival.data().iter().all(|&s| s > 1.0 - 1e-11));
    }
}
