//! Geometric-weighted tail sums of the cost function.
//!
//! With `r = 1 - lambda` (no arrival) and `s = eps` (failed transmission):
//!
//! * `theta(h) = sum_{k>=0} s^k v(h+k)`
//! * `psi(h)   = sum_{k>=0} r^k v(h+k)`
//! * `omega(h) = sum_{k>=1} e_k v(h+k)` with `e_k = sum_{j<k} r^j s^(k-1-j)`
//!
//! `e_k = (r^k - s^k) / (r - s)` away from `r = s` and `k s^(k-1)` on it, so
//! `omega` coincides with `(psi - theta) / (1 - lambda - eps)` in the regular
//! case and with `sum_{k>=1} eps^(k-1) theta(h+k)` in the degenerate case
//! `eps = 1 - lambda`. The weight form has no cancellation, so it is used for
//! every `(lambda, eps)`; the two textbook forms are kept for cross-checks.
//!
//! Linear, step and constant costs have exact closed forms. Polynomial costs
//! are summed until a certified bound on the remaining tail drops below the
//! context tolerance.

use std::collections::HashMap;
use std::sync::Mutex;

use crate::cost::{validate, CostFunction, GrowthBound};
use crate::error::SeriesError;

/// `|1 - lambda - eps|` below this marks the degenerate case.
pub const DEGENERACY_THRESHOLD: f64 = 1e-9;
/// Default absolute truncation tolerance.
pub const DEFAULT_TOLERANCE: f64 = 1e-12;

const MAX_TERMS: u64 = 50_000_000;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SeriesValues {
    pub theta: f64,
    pub psi: f64,
    pub omega: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
enum Which {
    Theta,
    Psi,
    Omega,
}

/// Parameters of one user's series plus a memo of truncated evaluations.
///
/// `offset` shifts the cost in time: every query evaluates the series of
/// `h -> v(h + offset)`.
#[derive(Debug)]
pub struct SeriesContext {
    lambda: f64,
    eps: f64,
    cost: CostFunction,
    offset: u64,
    tolerance: f64,
    degenerate: bool,
    memo: Mutex<HashMap<(Which, u64), f64>>,
}

impl Clone for SeriesContext {
    fn clone(&self) -> Self {
        SeriesContext {
            lambda: self.lambda,
            eps: self.eps,
            cost: self.cost,
            offset: self.offset,
            tolerance: self.tolerance,
            degenerate: self.degenerate,
            memo: Mutex::new(HashMap::new()),
        }
    }
}

impl SeriesContext {
    pub fn new(lambda: f64, eps: f64, cost: CostFunction) -> Result<Self, SeriesError> {
        validate(&cost, lambda, eps)?;
        Ok(SeriesContext {
            lambda,
            eps,
            cost,
            offset: 0,
            tolerance: DEFAULT_TOLERANCE,
            degenerate: (1.0 - lambda - eps).abs() < DEGENERACY_THRESHOLD,
            memo: Mutex::new(HashMap::new()),
        })
    }

    pub fn with_tolerance(mut self, tolerance: f64) -> Self {
        assert!(tolerance > 0.0, "tolerance must be positive");
        self.tolerance = tolerance;
        self.memo = Mutex::new(HashMap::new());
        self
    }

    pub fn with_offset(mut self, offset: u64) -> Self {
        self.offset = offset;
        self.memo = Mutex::new(HashMap::new());
        self
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn eps(&self) -> f64 {
        self.eps
    }

    pub fn cost(&self) -> CostFunction {
        self.cost
    }

    pub fn offset(&self) -> u64 {
        self.offset
    }

    pub fn tolerance(&self) -> f64 {
        self.tolerance
    }

    /// True iff `|1 - lambda - eps| < DEGENERACY_THRESHOLD`.
    pub fn is_degenerate(&self) -> bool {
        self.degenerate
    }

    fn no_arrival(&self) -> f64 {
        1.0 - self.lambda
    }

    /// Shifted cost `v(h + offset)`.
    #[inline]
    pub fn v(&self, h: u64) -> f64 {
        self.cost.evaluate(h + self.offset)
    }

    /// `sum_{h=1}^{n} v(h + offset)`.
    pub fn prefix(&self, n: u64) -> f64 {
        if n == 0 {
            return 0.0;
        }
        if self.offset == 0 {
            self.cost.prefix_sum(n)
        } else {
            match self.cost {
                CostFunction::Polynomial { .. } => {
                    (1..=n).map(|h| self.v(h)).sum()
                }
                _ => self.cost.prefix_sum(n + self.offset) - self.cost.prefix_sum(self.offset),
            }
        }
    }

    pub fn values(&self, h: u64) -> SeriesValues {
        SeriesValues {
            theta: self.theta(h),
            psi: self.psi(h),
            omega: self.omega(h),
        }
    }

    pub fn theta(&self, h: u64) -> f64 {
        self.geometric(Which::Theta, self.eps, h)
    }

    pub fn psi(&self, h: u64) -> f64 {
        self.geometric(Which::Psi, self.no_arrival(), h)
    }

    pub fn omega(&self, h: u64) -> f64 {
        let x = h + self.offset;
        let (r, s) = (self.no_arrival(), self.eps);
        let (lambda, success) = (self.lambda, 1.0 - self.eps);
        match self.cost {
            CostFunction::Linear => {
                x as f64 / (lambda * success) + (1.0 - r * s) / (lambda * lambda * success * success)
            }
            CostFunction::Constant { value } => value / (lambda * success),
            CostFunction::StepViolation { threshold } => {
                if x + 1 >= threshold {
                    1.0 / (lambda * success)
                } else {
                    // sum_{k>=K} e_k = (e_K + s^K / (1 - s)) / (1 - r)
                    let first = threshold - x;
                    let (e_k, s_pow) = kernel_weight(r, s, first);
                    (e_k + s_pow / success) / lambda
                }
            }
            CostFunction::Polynomial { .. } => {
                self.memoized(Which::Omega, h, || self.omega_truncated(h, self.tolerance))
            }
        }
    }

    fn geometric(&self, which: Which, ratio: f64, h: u64) -> f64 {
        let x = h + self.offset;
        let tail = 1.0 - ratio;
        match self.cost {
            CostFunction::Linear => x as f64 / tail + ratio / (tail * tail),
            CostFunction::Constant { value } => {
                if x == 0 {
                    value * ratio / tail
                } else {
                    value / tail
                }
            }
            CostFunction::StepViolation { threshold } => {
                if x >= threshold {
                    1.0 / tail
                } else {
                    ratio.powi((threshold - x) as i32) / tail
                }
            }
            CostFunction::Polynomial { .. } => {
                self.memoized(which, h, || self.geometric_truncated(ratio, h, self.tolerance))
            }
        }
    }

    fn memoized(&self, which: Which, h: u64, compute: impl FnOnce() -> f64) -> f64 {
        if let Some(v) = self.memo.lock().expect("series memo poisoned").get(&(which, h)) {
            return *v;
        }
        let v = compute();
        self.memo
            .lock()
            .expect("series memo poisoned")
            .insert((which, h), v);
        v
    }

    /// `theta(h)` by certified truncation, whatever the cost family.
    pub fn theta_truncated(&self, h: u64, tolerance: f64) -> f64 {
        self.geometric_truncated(self.eps, h, tolerance)
    }

    /// `psi(h)` by certified truncation, whatever the cost family.
    pub fn psi_truncated(&self, h: u64, tolerance: f64) -> f64 {
        self.geometric_truncated(self.no_arrival(), h, tolerance)
    }

    /// `sum_{k>=0} ratio^k v(h+k)`, stopped once the tail bound is below
    /// `tolerance`.
    fn geometric_truncated(&self, ratio: f64, h: u64, tolerance: f64) -> f64 {
        let x = h + self.offset;
        let bound = self.cost.growth_bound();
        let mut sum = 0.0;
        let mut weight = 1.0;
        let mut k = 0u64;
        loop {
            sum += weight * self.cost.evaluate(x + k);
            k += 1;
            weight *= ratio;
            if weight == 0.0 {
                break;
            }
            if let Some(tail) = geometric_tail_bound(&bound, ratio, weight, x + k) {
                if tail <= tolerance {
                    break;
                }
            }
            assert!(k < MAX_TERMS, "series truncation exceeded {MAX_TERMS} terms");
        }
        sum
    }

    /// `omega(h)` by summing the weights `e_k` until the certified tail bound
    /// `sum_{k>=K} k rho^(k-1) C (1+x+k)^p` is below `tolerance`.
    pub fn omega_truncated(&self, h: u64, tolerance: f64) -> f64 {
        let x = h + self.offset;
        let (r, s) = (self.no_arrival(), self.eps);
        let rho = r.max(s);
        let bound = self.cost.growth_bound();
        let mut sum = 0.0;
        let mut e_k = 1.0; // e_1
        let mut s_pow = s; // s^1
        let mut k = 1u64;
        loop {
            sum += e_k * self.cost.evaluate(x + k);
            e_k = r * e_k + s_pow;
            s_pow *= s;
            k += 1;
            if rho == 0.0 || e_k == 0.0 {
                break;
            }
            // Terms k rho^(k-1) C (1+x+k)^p shrink by at most q per step from K on.
            let kf = k as f64;
            let growth = ((2 + x + k) as f64 / (1 + x + k) as f64).powi(bound.degree as i32);
            let q = rho * (kf + 1.0) / kf * growth;
            if q < 1.0 {
                let term = kf * rho.powf(kf - 1.0) * bound.at(x + k);
                if term / (1.0 - q) <= tolerance {
                    break;
                }
            }
            assert!(k < MAX_TERMS, "series truncation exceeded {MAX_TERMS} terms");
        }
        sum
    }

    /// `(psi(h) - theta(h)) / (1 - lambda - eps)`; `None` when the
    /// denominator is exactly zero.
    pub fn omega_quotient(&self, h: u64) -> Option<f64> {
        let gap = 1.0 - self.lambda - self.eps;
        if gap == 0.0 {
            None
        } else {
            Some((self.psi(h) - self.theta(h)) / gap)
        }
    }

    /// `sum_{k>=1} eps^(k-1) theta(h+k)`, truncated with the tail bound of
    /// the equivalent weight series at `rho = eps`. Equals `omega` only when
    /// `eps = 1 - lambda`.
    pub fn omega_nested(&self, h: u64, tolerance: f64) -> f64 {
        let s = self.eps;
        let bound = self.cost.growth_bound();
        let x = h + self.offset;
        let mut sum = 0.0;
        let mut weight = 1.0;
        let mut k = 1u64;
        loop {
            sum += weight * self.theta(h + k);
            weight *= s;
            k += 1;
            if weight == 0.0 {
                break;
            }
            let kf = k as f64;
            let growth = ((2 + x + k) as f64 / (1 + x + k) as f64).powi(bound.degree as i32);
            let q = s * (kf + 1.0) / kf * growth;
            if q < 1.0 {
                let term = kf * s.powf(kf - 1.0) * bound.at(x + k);
                if term / (1.0 - q) <= tolerance {
                    break;
                }
            }
            assert!(k < MAX_TERMS, "series truncation exceeded {MAX_TERMS} terms");
        }
        sum
    }

    /// The textbook piecewise definition: nested series when degenerate,
    /// quotient otherwise.
    pub fn omega_by_branch(&self, h: u64) -> f64 {
        if self.degenerate {
            self.omega_nested(h, self.tolerance)
        } else {
            self.omega_quotient(h).expect("non-degenerate gap is non-zero")
        }
    }
}

/// `(e_K, s^K)` for `e_1 = 1`, `e_{k+1} = r e_k + s^k`.
fn kernel_weight(r: f64, s: f64, k: u64) -> (f64, f64) {
    let mut e = 1.0;
    let mut s_pow = s;
    for _ in 1..k {
        e = r * e + s_pow;
        s_pow *= s;
    }
    (e, s_pow)
}

/// Bound on `sum_{j>=0} ratio^(K+j) v(x_K + j)` given `weight = ratio^K`,
/// valid once consecutive envelope terms shrink geometrically.
fn geometric_tail_bound(bound: &GrowthBound, ratio: f64, weight: f64, x_k: u64) -> Option<f64> {
    let growth = ((2 + x_k) as f64 / (1 + x_k) as f64).powi(bound.degree as i32);
    let q = ratio * growth;
    if q < 1.0 {
        Some(weight * bound.at(x_k) / (1.0 - q))
    } else {
        None
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Naive partial sums with a fixed, generous term count.
    fn brute(ratio: f64, v: impl Fn(u64) -> f64, h: u64, terms: u64) -> f64 {
        let mut w = 1.0;
        let mut sum = 0.0;
        for k in 0..terms {
            sum += w * v(h + k);
            w *= ratio;
        }
        sum
    }

    fn brute_omega(lambda: f64, eps: f64, v: impl Fn(u64) -> f64, h: u64, terms: u64) -> f64 {
        // sum_{k>=1} sum_{j<k} r^j s^(k-1-j) v(h+k), built from explicit powers
        let r = 1.0 - lambda;
        let mut sum = 0.0;
        for k in 1..terms {
            let mut e = 0.0;
            for j in 0..k {
                e += r.powi(j as i32) * eps.powi((k - 1 - j) as i32);
            }
            sum += e * v(h + k);
        }
        sum
    }

    fn ctx(lambda: f64, eps: f64, v: CostFunction) -> SeriesContext {
        SeriesContext::new(lambda, eps, v).unwrap()
    }

    #[test]
    fn theta_examples() {
        let c = ctx(0.5, 0.25, CostFunction::Linear);
        let oracle = brute(0.25, |h| h as f64, 1, 200);
        assert!((oracle - 16.0 / 9.0).abs() < 1e-12);
        assert!((c.theta(1) - oracle).abs() < 1e-12);

        let c = ctx(0.5, 0.25, CostFunction::step(3));
        let step = |h: u64| if h >= 3 { 1.0 } else { 0.0 };
        assert!((c.theta(3) - brute(0.25, step, 3, 200)).abs() < 1e-12);
        assert!((c.theta(3) - 4.0 / 3.0).abs() < 1e-12);
        assert!((c.theta(1) - brute(0.25, step, 1, 200)).abs() < 1e-12);
        assert!((c.theta(1) - 0.0625 / 0.75).abs() < 1e-12);

        let c = ctx(0.3, 0.6, CostFunction::constant(0.0));
        assert_eq!(c.theta(5), 0.0);
    }

    #[test]
    fn psi_examples() {
        let c = ctx(0.5, 0.25, CostFunction::Linear);
        assert!((c.psi(1) - 4.0).abs() < 1e-12);
        assert!((c.psi(1) - brute(0.5, |h| h as f64, 1, 200)).abs() < 1e-12);
        let c = ctx(0.5, 0.25, CostFunction::step(3));
        assert!((c.psi(1) - 0.5).abs() < 1e-12);
        let c = ctx(1.0, 0.25, CostFunction::Linear);
        assert_eq!(c.psi(5), 5.0);
    }

    #[test]
    fn omega_examples() {
        let c = ctx(0.5, 0.25, CostFunction::Linear);
        let lin = |h: u64| h as f64;
        assert!((c.omega(1) - 80.0 / 9.0).abs() < 1e-12);
        assert!((c.omega(1) - brute_omega(0.5, 0.25, lin, 1, 150)).abs() < 1e-9);
        assert!((c.omega(2) - 104.0 / 9.0).abs() < 1e-12);
        assert!((c.omega(2) - brute_omega(0.5, 0.25, lin, 2, 150)).abs() < 1e-9);

        let c = ctx(0.4, 0.3, CostFunction::constant(2.5));
        for h in [1, 4, 20] {
            assert!((c.omega(h) - 2.5 / (0.4 * 0.7)).abs() < 1e-12);
            assert!((c.omega_quotient(h).unwrap() - 2.5 / (0.4 * 0.7)).abs() < 1e-10);
        }

        let c = ctx(0.5, 0.5, CostFunction::step(3));
        assert!(c.is_degenerate());
        for h in 3..10 {
            assert!((c.omega(h) - 4.0).abs() < 1e-12);
            assert!((c.omega_nested(h, 1e-13) - 4.0).abs() < 1e-12);
        }
    }

    #[test]
    fn omega_at_deterministic_arrivals_and_perfect_channel() {
        let c = ctx(1.0, 0.0, CostFunction::Linear);
        assert!(c.is_degenerate());
        for h in 1..20 {
            assert_eq!(c.omega(h), (h + 1) as f64);
            assert_eq!(c.omega_by_branch(h), (h + 1) as f64);
        }
    }

    #[test]
    fn step_omega_matches_brute_force_below_and_above_threshold() {
        for (lambda, eps) in [(0.3, 0.5), (0.5, 0.25), (0.9, 0.1), (0.5, 0.5), (1.0, 0.4)] {
            let c = ctx(lambda, eps, CostFunction::step(10));
            let step = |h: u64| if h >= 10 { 1.0 } else { 0.0 };
            for h in 1..15 {
                let oracle = brute_omega(lambda, eps, step, h, 400);
                assert!((c.omega(h) - oracle).abs() < 1e-10, "{lambda} {eps} {h}");
            }
        }
    }

    #[test]
    fn polynomial_truncation_matches_brute_force() {
        let v = CostFunction::polynomial(2, 0.5);
        let c = ctx(0.6, 0.3, v).with_tolerance(1e-11);
        let f = |h: u64| 0.5 * (h * h) as f64;
        for h in [1, 2, 7, 30] {
            assert!((c.theta(h) - brute(0.3, f, h, 400)).abs() < 1e-9);
            assert!((c.psi(h) - brute(0.4, f, h, 400)).abs() < 1e-9);
            assert!((c.omega(h) - brute_omega(0.6, 0.3, f, h, 300)).abs() < 1e-8);
        }
    }

    #[test]
    fn offset_shifts_every_series() {
        let base = ctx(0.5, 0.25, CostFunction::step(6));
        let shifted = ctx(0.5, 0.25, CostFunction::step(6)).with_offset(1);
        for h in 1..12 {
            assert_eq!(shifted.theta(h), base.theta(h + 1));
            assert_eq!(shifted.psi(h), base.psi(h + 1));
            assert_eq!(shifted.omega(h), base.omega(h + 1));
            assert_eq!(shifted.v(h), base.v(h + 1));
            assert_eq!(shifted.prefix(h), base.prefix(h + 1) - base.prefix(1));
        }
    }

    #[test]
    fn quotient_and_weight_forms_agree_near_degeneracy() {
        for v in [CostFunction::Linear, CostFunction::step(5)] {
            for lambda in [0.3, 0.5, 0.8] {
                let eps = 1.0 - lambda + 10.0 * DEGENERACY_THRESHOLD * 1e3;
                let c = ctx(lambda, eps, v);
                for h in 1..10 {
                    // The quotient loses ~|psi| * 1e-16 / gap; 1e-5 gap keeps it at 1e-10.
                    let q = c.omega_quotient(h).unwrap();
                    assert!((q - c.omega(h)).abs() < 1e-8, "{v:?} {lambda} {h}");
                }
            }
        }
    }

    #[test]
    fn nested_and_weight_forms_agree_at_degeneracy() {
        for v in [CostFunction::Linear, CostFunction::step(5), CostFunction::polynomial(2, 1.0)] {
            for lambda in [0.3, 0.5, 0.8] {
                let c = ctx(lambda, 1.0 - lambda, v).with_tolerance(1e-11);
                for h in 1..10 {
                    let nested = c.omega_nested(h, 1e-11);
                    assert!((nested - c.omega(h)).abs() < 1e-8 * nested.max(1.0));
                }
            }
        }
    }

    #[test]
    fn rejects_divergent_parameters() {
        assert!(SeriesContext::new(0.0, 0.5, CostFunction::Linear).is_err());
        assert!(SeriesContext::new(0.5, 1.0, CostFunction::Linear).is_err());
    }

    #[test]
    fn evaluations_are_reproducible() {
        let a = ctx(0.37, 0.21, CostFunction::polynomial(3, 1.5));
        let b = a.clone();
        for h in 1..30 {
            assert_eq!(a.omega(h).to_bits(), b.omega(h).to_bits());
            assert_eq!(a.omega(h).to_bits(), a.omega(h).to_bits());
        }
    }

    fn arb_cost() -> impl Strategy<Value = CostFunction> {
        prop_oneof![
            Just(CostFunction::Linear),
            (1u64..30).prop_map(CostFunction::step),
            (1u32..4, 0.1f64..3.0).prop_map(|(p, c)| CostFunction::polynomial(p, c)),
            (0.0f64..5.0).prop_map(CostFunction::constant),
        ]
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn series_are_monotone_in_h(v in arb_cost(), lambda in 0.05f64..1.0, eps in 0.0f64..0.95) {
            let c = SeriesContext::new(lambda, eps, v).unwrap().with_tolerance(1e-10);
            let mut prev = c.values(1);
            for h in 2..60 {
                let cur = c.values(h);
                let slack = 1e-9 * cur.omega.abs().max(1.0);
                prop_assert!(cur.theta >= prev.theta - slack);
                prop_assert!(cur.psi >= prev.psi - slack);
                prop_assert!(cur.omega >= prev.omega - slack);
                prev = cur;
            }
        }

        #[test]
        fn omega_dominates_next_cost(v in arb_cost(), lambda in 0.05f64..1.0, eps in 0.0f64..0.95) {
            let c = SeriesContext::new(lambda, eps, v).unwrap().with_tolerance(1e-10);
            for h in 1..60 {
                let lhs = lambda * (1.0 - eps) * c.omega(h);
                prop_assert!(lhs - c.v(h + 1) >= -1e-9 * lhs.abs().max(1.0));
            }
        }
    }
}
