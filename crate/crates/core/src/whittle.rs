//! Closed-form Whittle index of the decoupled single-user problem.
//!
//! For a user in state `(a, d)` (queuing delay `a >= 1`, staleness gap
//! `d >= 0`) with arrival probability `lambda` and error probability `eps`:
//!
//! * `a = 1`: `I = (1-eps) (lambda (1-eps) d omega(d) - sum_{h<=d} v(h))`
//! * `2 <= a <= D1`: the same expression with `d` replaced by `D1`
//! * `a > D1`: `I = (1-eps) (psi(a+d) - psi(a) + lambda eps (omega(a+d) - omega(a)))`
//!
//! where `D1` is the smallest positive integer at which
//! `eps theta(D1+1) + lambda (1-eps) (a + 1/lambda - 1) omega(D1)` reaches
//! `lambda eps omega(a+d) + psi(a+d) + sum_{h<a} v(h)`.

use std::ops::RangeInclusive;

use serde::{Deserialize, Serialize};

use crate::cost::CostFunction;
use crate::error::WhittleError;
use crate::series::SeriesContext;

/// Default cap for threshold searches, both in `D1` and in `d`.
pub const DEFAULT_CAP: u64 = 10_000;

/// Per-user MDP state.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct UeState {
    /// Slots since the newest buffered packet was generated.
    pub a: u64,
    /// Generation gap between the newest buffered and the last delivered packet.
    pub d: u64,
}

impl UeState {
    pub fn new(a: u64, d: u64) -> Result<Self, WhittleError> {
        if a == 0 {
            Err(WhittleError::InvalidState { a, d })
        } else {
            Ok(UeState { a, d })
        }
    }

    /// Fresh user: empty buffer, AoI 1.
    pub fn initial() -> Self {
        UeState { a: 1, d: 0 }
    }

    /// Age of Information `h = a + d`.
    #[inline]
    pub fn aoi(&self) -> u64 {
        self.a + self.d
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IndexBranch {
    /// `d = 0`: nothing fresher to deliver.
    NoNewInformation,
    /// `a = 1`.
    FreshPacket,
    /// `2 <= a <= D1`.
    BelowFirstThreshold,
    /// `a > D1`.
    AboveFirstThreshold,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WhittleIndexValue {
    pub value: f64,
    pub state: UeState,
    pub lambda: f64,
    pub eps: f64,
    pub cost: CostFunction,
    /// First threshold used for branch selection (`d` itself when `a = 1`).
    pub d1: Option<u64>,
    pub branch: IndexBranch,
}

/// Thresholds `D_a` at a fixed service charge.
#[derive(Clone, Debug, PartialEq)]
pub struct ThresholdProfile {
    pub charge: f64,
    /// `thresholds[a - 1] = D_a`.
    pub thresholds: Vec<u64>,
}

impl ThresholdProfile {
    pub fn threshold(&self, a: u64) -> Option<u64> {
        self.thresholds.get((a as usize).checked_sub(1)?).copied()
    }

    /// First `a` with `D_a > D_{a+1}`, if any.
    pub fn first_decrease(&self) -> Option<u64> {
        self.thresholds
            .windows(2)
            .position(|w| w[1] < w[0])
            .map(|i| i as u64 + 1)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct IndexabilityViolation {
    pub lower_charge: f64,
    pub upper_charge: f64,
    /// Idle under `lower_charge` but active under `upper_charge`.
    pub state: UeState,
}

#[derive(Clone, Debug, PartialEq)]
pub struct IndexabilityReport {
    pub charges: Vec<f64>,
    /// Size of the idle set at each charge.
    pub idle_counts: Vec<usize>,
    pub violations: Vec<IndexabilityViolation>,
}

impl IndexabilityReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Checks that the idle sets `idle[i]` (membership per state, same order for
/// every charge) are nested along ascending `charges`.
pub fn nested_idle_sets(
    charges: &[f64],
    states: &[UeState],
    idle: &[Vec<bool>],
) -> IndexabilityReport {
    let mut violations = Vec::new();
    for (i, pair) in idle.windows(2).enumerate() {
        for (k, state) in states.iter().enumerate() {
            if pair[0][k] && !pair[1][k] {
                violations.push(IndexabilityViolation {
                    lower_charge: charges[i],
                    upper_charge: charges[i + 1],
                    state: *state,
                });
            }
        }
    }
    IndexabilityReport {
        charges: charges.to_vec(),
        idle_counts: idle.iter().map(|s| s.iter().filter(|&&b| b).count()).collect(),
        violations,
    }
}

/// Evaluates the closed-form index for one user class.
#[derive(Clone, Debug)]
pub struct IndexCalculator {
    ctx: SeriesContext,
    cap: u64,
}

impl IndexCalculator {
    pub fn new(lambda: f64, eps: f64, cost: CostFunction) -> Result<Self, WhittleError> {
        Ok(Self::from_context(SeriesContext::new(lambda, eps, cost)?))
    }

    pub fn from_context(ctx: SeriesContext) -> Self {
        IndexCalculator {
            ctx,
            cap: DEFAULT_CAP,
        }
    }

    pub fn with_cap(mut self, cap: u64) -> Self {
        self.cap = cap.max(1);
        self
    }

    pub fn context(&self) -> &SeriesContext {
        &self.ctx
    }

    fn tie_tolerance(scale: f64) -> f64 {
        1e-12 * scale.abs().max(1.0)
    }

    fn d1_lhs(&self, candidate: u64, a: u64) -> f64 {
        let (lambda, eps) = (self.ctx.lambda(), self.ctx.eps());
        eps * self.ctx.theta(candidate + 1)
            + lambda * (1.0 - eps) * (a as f64 + 1.0 / lambda - 1.0) * self.ctx.omega(candidate)
    }

    /// Smallest positive `D1` whose left-hand side reaches the right-hand
    /// side of the first-threshold equation for state `(a, d)`, `a >= 2`.
    pub fn solve_d1(&self, a: u64, d: u64) -> Result<u64, WhittleError> {
        if a < 2 || d == 0 {
            return Err(WhittleError::InvalidArgument(format!(
                "first-threshold solver needs a >= 2 and d >= 1, got a = {a}, d = {d}"
            )));
        }
        let (lambda, eps) = (self.ctx.lambda(), self.ctx.eps());
        let h = a + d;
        let rhs = lambda * eps * self.ctx.omega(h) + self.ctx.psi(h) + self.ctx.prefix(a - 1);
        let target = rhs - Self::tie_tolerance(rhs);
        let reaches = |x: u64| self.d1_lhs(x, a) >= target;

        if reaches(1) {
            return Ok(1);
        }
        // The left-hand side is non-decreasing: bracket, then bisect.
        let mut lo = 1u64;
        let mut hi = 2u64;
        loop {
            if hi >= self.cap {
                if reaches(self.cap) {
                    hi = self.cap;
                    break;
                }
                return Err(WhittleError::NoSolutionWithinCap {
                    what: "first threshold D1",
                    cap: self.cap,
                });
            }
            if reaches(hi) {
                break;
            }
            lo = hi;
            hi *= 2;
        }
        while hi - lo > 1 {
            let mid = lo + (hi - lo) / 2;
            if reaches(mid) {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        Ok(hi)
    }

    fn fresh_packet_index(&self, threshold: u64) -> f64 {
        let (lambda, eps) = (self.ctx.lambda(), self.ctx.eps());
        let success = 1.0 - eps;
        success
            * (lambda * success * threshold as f64 * self.ctx.omega(threshold)
                - self.ctx.prefix(threshold))
    }

    pub fn index(&self, state: UeState) -> Result<WhittleIndexValue, WhittleError> {
        let UeState { a, d } = state;
        if a == 0 {
            return Err(WhittleError::InvalidState { a, d });
        }
        let (lambda, eps) = (self.ctx.lambda(), self.ctx.eps());
        let make = |value, d1, branch| WhittleIndexValue {
            value,
            state,
            lambda,
            eps,
            cost: self.ctx.cost(),
            d1,
            branch,
        };
        if d == 0 {
            return Ok(make(0.0, None, IndexBranch::NoNewInformation));
        }
        if a == 1 {
            return Ok(make(
                self.fresh_packet_index(d),
                Some(d),
                IndexBranch::FreshPacket,
            ));
        }
        let d1 = self.solve_d1(a, d)?;
        if a <= d1 {
            Ok(make(
                self.fresh_packet_index(d1),
                Some(d1),
                IndexBranch::BelowFirstThreshold,
            ))
        } else {
            let h = a + d;
            let value = (1.0 - eps)
                * (self.ctx.psi(h) - self.ctx.psi(a)
                    + lambda * eps * (self.ctx.omega(h) - self.ctx.omega(a)));
            Ok(make(value, Some(d1), IndexBranch::AboveFirstThreshold))
        }
    }

    #[inline]
    pub fn index_value(&self, state: UeState) -> Result<f64, WhittleError> {
        self.index(state).map(|v| v.value)
    }

    /// Smallest `d >= 0` whose index at `(a, d)` reaches `charge`.
    pub fn threshold_for_charge(&self, charge: f64, a: u64) -> Result<u64, WhittleError> {
        if !(charge >= 0.0) {
            return Err(WhittleError::InvalidArgument(format!(
                "service charge must be non-negative, got {charge}"
            )));
        }
        if a == 0 {
            return Err(WhittleError::InvalidState { a, d: 0 });
        }
        let target = charge - Self::tie_tolerance(charge);
        for d in 0..=self.cap {
            if self.index_value(UeState { a, d })? >= target {
                return Ok(d);
            }
        }
        Err(WhittleError::NoSolutionWithinCap {
            what: "threshold D_a",
            cap: self.cap,
        })
    }

    /// `D_1 .. D_{a_max}` at `charge`.
    pub fn threshold_profile(&self, charge: f64, a_max: u64) -> Result<ThresholdProfile, WhittleError> {
        let thresholds = (1..=a_max)
            .map(|a| self.threshold_for_charge(charge, a))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(ThresholdProfile { charge, thresholds })
    }

    /// Idle sets `{(a, d) : d < D_a(m)}` over the given state ranges for each
    /// charge, checked for nesting along the ascending grid.
    pub fn indexability_report(
        &self,
        charges: &[f64],
        a_range: RangeInclusive<u64>,
        d_range: RangeInclusive<u64>,
    ) -> Result<IndexabilityReport, WhittleError> {
        if charges.windows(2).any(|w| !(w[0] <= w[1])) {
            return Err(WhittleError::InvalidArgument(
                "charge grid must be ascending".into(),
            ));
        }
        if *a_range.start() == 0 {
            return Err(WhittleError::InvalidArgument("a starts at 1".into()));
        }
        let d_end = *d_range.end();
        let states: Vec<UeState> = a_range
            .clone()
            .flat_map(|a| d_range.clone().map(move |d| UeState { a, d }))
            .collect();
        // Index rows over d = 0..=d_end so thresholds below the range are seen.
        let rows: Vec<Vec<f64>> = a_range
            .clone()
            .map(|a| {
                (0..=d_end)
                    .map(|d| self.index_value(UeState { a, d }))
                    .collect::<Result<Vec<_>, _>>()
            })
            .collect::<Result<_, _>>()?;
        let idle: Vec<Vec<bool>> = charges
            .iter()
            .map(|&m| {
                let target = m - Self::tie_tolerance(m);
                let thresholds: Vec<u64> = rows
                    .iter()
                    .map(|row| {
                        row.iter()
                            .position(|&i| i >= target)
                            .map_or(u64::MAX, |d| d as u64)
                    })
                    .collect();
                let a0 = *a_range.start();
                states
                    .iter()
                    .map(|s| s.d < thresholds[(s.a - a0) as usize])
                    .collect()
            })
            .collect();
        Ok(nested_idle_sets(charges, &states, &idle))
    }
}

pub fn whittle_index(
    lambda: f64,
    eps: f64,
    cost: CostFunction,
    state: UeState,
) -> Result<WhittleIndexValue, WhittleError> {
    IndexCalculator::new(lambda, eps, cost)?.index(state)
}

pub fn solve_d1(lambda: f64, eps: f64, cost: CostFunction, a: u64, d: u64) -> Result<u64, WhittleError> {
    IndexCalculator::new(lambda, eps, cost)?.solve_d1(a, d)
}

pub fn threshold_for_charge(
    lambda: f64,
    eps: f64,
    cost: CostFunction,
    charge: f64,
    a: u64,
) -> Result<u64, WhittleError> {
    IndexCalculator::new(lambda, eps, cost)?.threshold_for_charge(charge, a)
}

pub fn indexability_report(
    lambda: f64,
    eps: f64,
    cost: CostFunction,
    charges: &[f64],
    a_range: RangeInclusive<u64>,
    d_range: RangeInclusive<u64>,
) -> Result<IndexabilityReport, WhittleError> {
    IndexCalculator::new(lambda, eps, cost)?.indexability_report(charges, a_range, d_range)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn calc(lambda: f64, eps: f64, v: CostFunction) -> IndexCalculator {
        IndexCalculator::new(lambda, eps, v).unwrap()
    }

    #[test]
    fn fresh_packet_examples() {
        let c = calc(0.5, 0.25, CostFunction::Linear);
        let i = c.index(UeState { a: 1, d: 2 }).unwrap();
        assert!((i.value - 4.25).abs() < 1e-12);
        assert_eq!(i.branch, IndexBranch::FreshPacket);
        assert_eq!(i.d1, Some(2));

        let c = calc(0.5, 0.25, CostFunction::step(3));
        assert!((c.index_value(UeState { a: 1, d: 1 }).unwrap() - 0.46875).abs() < 1e-12);
    }

    #[test]
    fn empty_buffer_has_zero_index() {
        for v in [CostFunction::Linear, CostFunction::step(4), CostFunction::polynomial(2, 1.0)] {
            let c = calc(0.4, 0.3, v);
            for a in 1..20 {
                let i = c.index(UeState { a, d: 0 }).unwrap();
                assert_eq!(i.value, 0.0);
                assert_eq!(i.branch, IndexBranch::NoNewInformation);
            }
        }
    }

    #[test]
    fn constant_cost_has_zero_index_everywhere() {
        let c = calc(0.6, 0.2, CostFunction::constant(3.0));
        for a in 1..10 {
            for d in 0..10 {
                assert!(c.index_value(UeState { a, d }).unwrap().abs() < 1e-12);
            }
        }
        assert_eq!(calc(0.6, 0.2, CostFunction::constant(0.0)).solve_d1(3, 4).unwrap(), 1);
    }

    #[test]
    fn solve_d1_rejects_fresh_packets_and_empty_buffers() {
        let c = calc(0.5, 0.25, CostFunction::Linear);
        assert!(c.solve_d1(1, 5).is_err());
        assert!(c.solve_d1(3, 0).is_err());
        // a = 1 uses D1 = d directly.
        assert_eq!(c.index(UeState { a: 1, d: 5 }).unwrap().d1, Some(5));
    }

    #[test]
    fn solve_d1_is_the_first_crossing() {
        // Brute-force scan of the defining inequality.
        for v in [CostFunction::Linear, CostFunction::step(5), CostFunction::step(10)] {
            for (lambda, eps) in [(0.3, 0.5), (0.5, 0.25), (0.8, 0.1), (1.0, 0.5)] {
                let c = calc(lambda, eps, v);
                let s = c.context();
                for a in 2..9 {
                    for d in 1..9 {
                        let h = a + d;
                        let rhs = lambda * eps * s.omega(h) + s.psi(h) + s.prefix(a - 1);
                        let scan = (1..10_000)
                            .find(|&x| {
                                eps * s.theta(x + 1)
                                    + lambda * (1.0 - eps) * (a as f64 + 1.0 / lambda - 1.0) * s.omega(x)
                                    >= rhs - 1e-12 * rhs.max(1.0)
                            })
                            .unwrap();
                        assert_eq!(c.solve_d1(a, d).unwrap(), scan, "{v:?} {lambda} {eps} {a} {d}");
                    }
                }
            }
        }
    }

    #[test]
    fn threshold_for_charge_examples() {
        let c = calc(0.5, 0.25, CostFunction::Linear);
        assert_eq!(c.threshold_for_charge(4.25, 1).unwrap(), 2);
        for a in 1..6 {
            assert_eq!(c.threshold_for_charge(0.0, a).unwrap(), 0);
        }
        let c = calc(0.5, 0.25, CostFunction::step(5)).with_cap(500);
        assert!(matches!(
            c.threshold_for_charge(1e6, 1),
            Err(WhittleError::NoSolutionWithinCap { .. })
        ));
        assert!(c.threshold_for_charge(-1.0, 1).is_err());
    }

    #[test]
    fn threshold_inverts_index_where_index_increases() {
        for v in [CostFunction::Linear, CostFunction::step(6)] {
            let c = calc(0.5, 0.25, v);
            for a in 1..10 {
                for d in 1..12 {
                    let i = c.index(UeState { a, d }).unwrap();
                    if i.branch == IndexBranch::BelowFirstThreshold {
                        continue;
                    }
                    let below = (0..d).all(|dd| c.index_value(UeState { a, d: dd }).unwrap() < i.value - 1e-9);
                    if below {
                        assert_eq!(c.threshold_for_charge(i.value, a).unwrap(), d, "{v:?} ({a},{d})");
                    }
                }
            }
        }
    }

    #[test]
    fn indexability_examples() {
        let c = calc(0.5, 0.25, CostFunction::Linear);
        let r = c.indexability_report(&[0.0], 1..=5, 0..=5).unwrap();
        assert!(r.passed());
        assert_eq!(r.idle_counts, vec![0]);

        let r = c
            .indexability_report(&[0.0, 1.0, 2.0, 4.0, 8.0], 1..=12, 0..=12)
            .unwrap();
        assert!(r.passed());
        assert!(r.idle_counts.windows(2).all(|w| w[0] <= w[1]));

        let c = calc(0.3, 0.5, CostFunction::step(10));
        let grid: Vec<f64> = (0..=20).map(|i| i as f64 * 0.1).collect();
        assert!(c.indexability_report(&grid, 1..=25, 0..=25).unwrap().passed());

        assert!(c.indexability_report(&[1.0, 0.5], 1..=3, 0..=3).is_err());
    }

    #[test]
    fn nesting_check_reports_witness() {
        let states = [UeState { a: 1, d: 1 }, UeState { a: 1, d: 2 }];
        let r = nested_idle_sets(&[0.0, 1.0], &states, &[vec![true, false], vec![false, false]]);
        assert!(!r.passed());
        assert_eq!(r.violations[0].state, UeState { a: 1, d: 1 });
    }

    #[test]
    fn deterministic_arrivals_match_cycle_argument() {
        // lambda = 1, eps = 0: a renewal cycle of length D costs m + sum_{h=1}^{D} v(h)
        // (end-of-slot accounting); indifference between D and D+1 gives
        // m = D v(D+1) - sum_{h=1}^{D} v(h).
        for v in [CostFunction::Linear, CostFunction::step(4), CostFunction::polynomial(2, 1.0)] {
            let c = calc(1.0, 0.0, v);
            for d in 1..15u64 {
                let expect = d as f64 * v.evaluate(d + 1) - v.prefix_sum(d);
                let got = c.index_value(UeState { a: 1, d }).unwrap();
                assert!((got - expect).abs() < 1e-9 * expect.max(1.0), "{v:?} {d}");
            }
        }
    }

    #[test]
    fn offset_context_evaluates_shifted_cost() {
        // Step H shifted by one slot is step H - 1.
        let shifted = IndexCalculator::from_context(
            SeriesContext::new(0.6, 0.2, CostFunction::step(6)).unwrap().with_offset(1),
        );
        let plain = calc(0.6, 0.2, CostFunction::step(5));
        for a in 1..12 {
            for d in 0..12 {
                let s = UeState { a, d };
                assert!((shifted.index_value(s).unwrap() - plain.index_value(s).unwrap()).abs() < 1e-12);
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn index_is_non_negative(lambda in 0.1f64..=1.0, eps in 0.0f64..0.9, h in 1u64..20, a in 1u64..25, d in 0u64..25) {
            for v in [CostFunction::Linear, CostFunction::step(h)] {
                let c = calc(lambda, eps, v);
                let state = UeState { a, d };
                prop_assert!(c.index_value(state).unwrap() >= -1e-9);
            }
        }

        #[test]
        fn index_grows_with_d_above_first_threshold(lambda in 0.1f64..=1.0, eps in 0.0f64..0.9, a in 2u64..30) {
            for v in [CostFunction::Linear, CostFunction::step(8), CostFunction::polynomial(2, 0.5)] {
                let c = calc(lambda, eps, v);
                for d in 0..30 {
                    let here = c.index(UeState { a, d }).unwrap();
                    let next = c.index(UeState { a, d: d + 1 }).unwrap();
                    if here.branch == IndexBranch::AboveFirstThreshold
                        && next.branch == IndexBranch::AboveFirstThreshold
                    {
                        prop_assert!(next.value >= here.value - 1e-9);
                    }
                }
            }
        }

        #[test]
        fn index_scales_with_cost(lambda in 0.1f64..=1.0, eps in 0.0f64..0.9, factor in 0.1f64..10.0, a in 1u64..12, d in 0u64..12) {
            let base = calc(lambda, eps, CostFunction::polynomial(1, 1.0)).with_cap(5_000);
            let scaled = calc(lambda, eps, CostFunction::polynomial(1, factor)).with_cap(5_000);
            let s = UeState { a, d };
            let b = base.index_value(s).unwrap();
            let x = scaled.index_value(s).unwrap();
            prop_assert!((x - factor * b).abs() <= 1e-6 * (factor * b).abs().max(1.0));
        }
    }
}
