//! Relative value iteration on truncated MDPs.
//!
//! The decoupled problem has states `(a, d)` with `1 <= a <= a_max`,
//! `0 <= d <= d_max`, a service charge `m` per transmission, and the
//! transition law
//!
//! * idle: `(1, a+d)` w.p. `lambda`, `(a+1, d)` otherwise;
//! * schedule: as idle w.p. `eps`; else `(1, a)` w.p. `lambda`, `(a+1, 0)`
//!   otherwise.
//!
//! Coordinates beyond the caps are clamped. The solver iterates
//! `f <- (1-k) f + k (B f - (B f)(1,0))` with `k = APERIODICITY` so periodic
//! optimal chains (e.g. `lambda = 1`, `eps = 0`) still converge; the fixed
//! point and gain are those of the untransformed Bellman operator `B`.

use serde::{Deserialize, Serialize};

use crate::cost::CostFunction;
use crate::error::{CostError, OracleError};
use crate::policies::UeConfig;
use crate::whittle::{nested_idle_sets, IndexabilityReport, UeState};

const APERIODICITY: f64 = 0.9;

pub const DEFAULT_CAP: u64 = 64;
pub const DEFAULT_TOLERANCE: f64 = 1e-9;
pub const DEFAULT_MAX_SWEEPS: usize = 100_000;
pub const DEFAULT_STATE_LIMIT: usize = 2_000_000;

/// When within a slot the AoI cost is charged.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CostTiming {
    /// `v(a + d)` of the state the slot starts in, whatever happens. This is
    /// what the simulator accrues.
    StartOfSlot,
    /// `v(a)` after a successful transmission, `v(a + d)` otherwise; the
    /// accounting the closed-form index is derived under.
    #[default]
    AfterTransmission,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoupledMdp {
    pub lambda: f64,
    pub eps: f64,
    pub cost: CostFunction,
    pub charge: f64,
    pub a_max: u64,
    pub d_max: u64,
    pub tolerance: f64,
    pub max_sweeps: usize,
    pub timing: CostTiming,
}

impl DecoupledMdp {
    pub fn new(lambda: f64, eps: f64, cost: CostFunction, charge: f64) -> Self {
        DecoupledMdp {
            lambda,
            eps,
            cost,
            charge,
            a_max: DEFAULT_CAP,
            d_max: DEFAULT_CAP,
            tolerance: DEFAULT_TOLERANCE,
            max_sweeps: DEFAULT_MAX_SWEEPS,
            timing: CostTiming::default(),
        }
    }

    pub fn with_caps(mut self, a_max: u64, d_max: u64) -> Self {
        self.a_max = a_max;
        self.d_max = d_max;
        self
    }

    pub fn with_timing(mut self, timing: CostTiming) -> Self {
        self.timing = timing;
        self
    }

    pub fn with_charge(mut self, charge: f64) -> Self {
        self.charge = charge;
        self
    }

    pub fn with_tolerance(mut self, tolerance: f64) -> Self {
        self.tolerance = tolerance;
        self
    }

    fn check(&self) -> Result<(), OracleError> {
        for (name, p) in [("lambda", self.lambda), ("epsilon", self.eps)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(CostError::InvalidProbability { name, value: p }.into());
            }
        }
        self.cost.check()?;
        if self.a_max < 2 || self.d_max < 2 {
            return Err(OracleError::Precondition("caps must be at least 2".into()));
        }
        if !(self.tolerance > 0.0) {
            return Err(OracleError::Precondition("tolerance must be positive".into()));
        }
        if !(self.charge >= 0.0) {
            return Err(OracleError::Precondition("charge must be non-negative".into()));
        }
        Ok(())
    }

    fn width(&self) -> usize {
        self.d_max as usize + 1
    }

    #[inline]
    fn index(&self, a: u64, d: u64) -> usize {
        (a.min(self.a_max) as usize - 1) * self.width() + d.min(self.d_max) as usize
    }

    pub fn state_count(&self) -> usize {
        self.a_max as usize * self.width()
    }

    pub fn contains(&self, state: UeState) -> bool {
        state.a >= 1 && state.a <= self.a_max && state.d <= self.d_max
    }
}

/// Per-state successor indices and stage costs, precomputed once per solve.
struct Kernel {
    idle_arrival: Vec<u32>,
    idle_none: Vec<u32>,
    success_arrival: Vec<u32>,
    success_none: Vec<u32>,
    idle_cost: Vec<f64>,
    schedule_cost: Vec<f64>,
}

impl Kernel {
    fn build(mdp: &DecoupledMdp) -> Self {
        let n = mdp.state_count();
        let mut k = Kernel {
            idle_arrival: Vec::with_capacity(n),
            idle_none: Vec::with_capacity(n),
            success_arrival: Vec::with_capacity(n),
            success_none: Vec::with_capacity(n),
            idle_cost: Vec::with_capacity(n),
            schedule_cost: Vec::with_capacity(n),
        };
        for a in 1..=mdp.a_max {
            for d in 0..=mdp.d_max {
                k.idle_arrival.push(mdp.index(1, a + d) as u32);
                k.idle_none.push(mdp.index(a + 1, d) as u32);
                k.success_arrival.push(mdp.index(1, a) as u32);
                k.success_none.push(mdp.index(a + 1, 0) as u32);
                let held = mdp.cost.evaluate(a + d);
                k.idle_cost.push(held);
                k.schedule_cost.push(
                    mdp.charge
                        + match mdp.timing {
                            CostTiming::StartOfSlot => held,
                            CostTiming::AfterTransmission => {
                                mdp.eps * held + (1.0 - mdp.eps) * mdp.cost.evaluate(a)
                            }
                        },
                );
            }
        }
        k
    }

    /// Action values `(idle, schedule)` of state `s` under `f`.
    #[inline]
    fn action_values(&self, mdp: &DecoupledMdp, f: &[f64], s: usize) -> (f64, f64) {
        let (lambda, eps) = (mdp.lambda, mdp.eps);
        let stay = lambda * f[self.idle_arrival[s] as usize]
            + (1.0 - lambda) * f[self.idle_none[s] as usize];
        let moved = lambda * f[self.success_arrival[s] as usize]
            + (1.0 - lambda) * f[self.success_none[s] as usize];
        (
            self.idle_cost[s] + stay,
            self.schedule_cost[s] + eps * stay + (1.0 - eps) * moved,
        )
    }
}

/// Converged relative values and greedy actions of a [`DecoupledMdp`].
#[derive(Clone, Debug, PartialEq)]
pub struct ValueTable {
    pub a_max: u64,
    pub d_max: u64,
    /// Relative values, row-major in `a`, anchored at `f(1, 0) = 0`.
    pub values: Vec<f64>,
    /// Average cost per slot.
    pub gain: f64,
    pub idle_values: Vec<f64>,
    pub schedule_values: Vec<f64>,
    pub sweeps: usize,
    /// `span(B f - f)` at termination.
    pub span: f64,
}

impl ValueTable {
    #[inline]
    fn slot(&self, a: u64, d: u64) -> usize {
        assert!(a >= 1 && a <= self.a_max && d <= self.d_max, "state outside table");
        (a as usize - 1) * (self.d_max as usize + 1) + d as usize
    }

    pub fn value(&self, a: u64, d: u64) -> f64 {
        self.values[self.slot(a, d)]
    }

    /// `(idle, schedule)` action values.
    pub fn action_values(&self, a: u64, d: u64) -> (f64, f64) {
        let s = self.slot(a, d);
        (self.idle_values[s], self.schedule_values[s])
    }

    /// Greedy action; ties go to idle.
    pub fn schedules(&self, a: u64, d: u64) -> bool {
        let (idle, schedule) = self.action_values(a, d);
        schedule < idle
    }

    /// Both action values within `rel` of each other.
    pub fn is_indifferent(&self, a: u64, d: u64, rel: f64) -> bool {
        let (idle, schedule) = self.action_values(a, d);
        (idle - schedule).abs() <= rel * idle.abs().max(schedule.abs())
    }

    /// Per `a`, the smallest `d` the greedy policy schedules (`None`: never).
    pub fn thresholds(&self) -> Vec<Option<u64>> {
        (1..=self.a_max)
            .map(|a| (0..=self.d_max).find(|&d| self.schedules(a, d)))
            .collect()
    }

    /// Greedy policy idles below and schedules from the threshold on, per row.
    pub fn is_threshold_type(&self) -> bool {
        (1..=self.a_max).all(|a| {
            let mut scheduled = false;
            (0..=self.d_max).all(|d| {
                let s = self.schedules(a, d);
                let ok = s || !scheduled;
                scheduled |= s;
                ok
            })
        })
    }
}

/// Solves `J + f = min(mu_idle, mu_schedule)` by relative value iteration.
pub fn rvi_solve(mdp: &DecoupledMdp) -> Result<ValueTable, OracleError> {
    rvi_solve_from(mdp, None)
}

/// As [`rvi_solve`], starting from `initial` relative values when given.
pub fn rvi_solve_from(mdp: &DecoupledMdp, initial: Option<&[f64]>) -> Result<ValueTable, OracleError> {
    mdp.check()?;
    let kernel = Kernel::build(mdp);
    let n = mdp.state_count();
    let mut f = match initial {
        Some(init) if init.len() == n => init.to_vec(),
        _ => vec![0.0; n],
    };
    let mut next = vec![0.0; n];
    for sweep in 1..=mdp.max_sweeps {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for s in 0..n {
            let (idle, schedule) = kernel.action_values(mdp, &f, s);
            let t = idle.min(schedule);
            let diff = t - f[s];
            lo = lo.min(diff);
            hi = hi.max(diff);
            next[s] = t;
        }
        let span = hi - lo;
        if span <= mdp.tolerance {
            let mut idle_values = Vec::with_capacity(n);
            let mut schedule_values = Vec::with_capacity(n);
            for s in 0..n {
                let (idle, schedule) = kernel.action_values(mdp, &f, s);
                idle_values.push(idle);
                schedule_values.push(schedule);
            }
            return Ok(ValueTable {
                a_max: mdp.a_max,
                d_max: mdp.d_max,
                values: f,
                gain: 0.5 * (lo + hi),
                idle_values,
                schedule_values,
                sweeps: sweep,
                span,
            });
        }
        let anchor = next[0];
        for s in 0..n {
            f[s] = (1.0 - APERIODICITY) * f[s] + APERIODICITY * (next[s] - anchor);
        }
    }
    let span = (0..n)
        .map(|s| {
            let (i, sc) = kernel.action_values(mdp, &f, s);
            i.min(sc) - f[s]
        })
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), x| (lo.min(x), hi.max(x)));
    Err(OracleError::NotConverged {
        sweeps: mdp.max_sweeps,
        span: span.1 - span.0,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BisectionOptions {
    /// Stop once the bracket is narrower than `relative_tolerance * m_hi`.
    pub relative_tolerance: f64,
    pub max_doublings: u32,
}

impl Default for BisectionOptions {
    fn default() -> Self {
        BisectionOptions {
            relative_tolerance: 1e-4,
            max_doublings: 60,
        }
    }
}

/// Charge at which the greedy action at `state` flips from schedule to idle.
///
/// `base` supplies everything but the charge. `m_hi` is the initial upper
/// bracket; it is doubled until the state is idle there.
pub fn index_by_bisection(base: &DecoupledMdp, state: UeState, m_hi: f64) -> Result<f64, OracleError> {
    index_by_bisection_with(base, state, m_hi, BisectionOptions::default())
}

pub fn index_by_bisection_with(
    base: &DecoupledMdp,
    state: UeState,
    m_hi: f64,
    options: BisectionOptions,
) -> Result<f64, OracleError> {
    if state.d == 0 {
        return Err(OracleError::Precondition(
            "index is only defined by bisection for d >= 1".into(),
        ));
    }
    if !base.contains(state) {
        return Err(OracleError::Precondition(format!(
            "state ({}, {}) outside the truncated space",
            state.a, state.d
        )));
    }
    let mut warm: Option<Vec<f64>> = None;
    let mut scheduled = |m: f64| -> Result<bool, OracleError> {
        let table = rvi_solve_from(&base.clone().with_charge(m), warm.as_deref())?;
        let s = table.schedules(state.a, state.d);
        warm = Some(table.values);
        Ok(s)
    };
    if !scheduled(0.0)? {
        return Ok(0.0);
    }
    let mut lo = 0.0;
    let mut hi = if m_hi > 0.0 { m_hi } else { 1.0 };
    let mut doublings = 0;
    while scheduled(hi)? {
        lo = hi;
        hi *= 2.0;
        doublings += 1;
        if doublings > options.max_doublings {
            return Err(OracleError::NoFlip {
                a: state.a,
                d: state.d,
                charge: hi,
            });
        }
    }
    let width = options.relative_tolerance * hi;
    while hi - lo > width {
        let mid = 0.5 * (lo + hi);
        if scheduled(mid)? {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Idle sets of the greedy RVI policy at each charge, checked for nesting.
pub fn greedy_indexability(
    base: &DecoupledMdp,
    charges: &[f64],
    a_max: u64,
    d_max: u64,
) -> Result<IndexabilityReport, OracleError> {
    if charges.windows(2).any(|w| !(w[0] <= w[1])) {
        return Err(OracleError::Precondition("charge grid must be ascending".into()));
    }
    let states: Vec<UeState> = (1..=a_max)
        .flat_map(|a| (0..=d_max).map(move |d| UeState { a, d }))
        .collect();
    let mut warm: Option<Vec<f64>> = None;
    let mut idle = Vec::with_capacity(charges.len());
    for &m in charges {
        let table = rvi_solve_from(&base.clone().with_charge(m), warm.as_deref())?;
        idle.push(states.iter().map(|s| !table.schedules(s.a, s.d)).collect());
        warm = Some(table.values);
    }
    Ok(nested_idle_sets(charges, &states, &idle))
}

/// Small multi-user problem solved exactly over the product state space.
///
/// Costs are charged at the start of each slot, as in the simulator. Memory
/// is `O((a_max (d_max + 1))^N)`; the product must stay below `state_limit`
/// (two million states by default, about 50 MB of working vectors).
#[derive(Clone, Debug, PartialEq)]
pub struct JointMdp {
    pub ues: Vec<UeConfig>,
    pub a_max: u64,
    pub d_max: u64,
    pub tolerance: f64,
    pub max_sweeps: usize,
    pub state_limit: usize,
}

impl JointMdp {
    pub fn new(ues: Vec<UeConfig>, a_max: u64, d_max: u64) -> Self {
        JointMdp {
            ues,
            a_max,
            d_max,
            tolerance: DEFAULT_TOLERANCE,
            max_sweeps: DEFAULT_MAX_SWEEPS,
            state_limit: DEFAULT_STATE_LIMIT,
        }
    }

    fn local_count(&self) -> usize {
        self.a_max as usize * (self.d_max as usize + 1)
    }

    #[inline]
    fn local_index(&self, a: u64, d: u64) -> usize {
        (a.min(self.a_max) as usize - 1) * (self.d_max as usize + 1) + d.min(self.d_max) as usize
    }
}

/// Optimal stationary joint policy.
#[derive(Clone, Debug, PartialEq)]
pub struct JointPolicy {
    pub ue_count: usize,
    pub a_max: u64,
    pub d_max: u64,
    /// Per joint state: 0 = idle, `k` = schedule UE `k - 1`.
    pub actions: Vec<u8>,
    /// Optimal total cost per slot.
    pub gain: f64,
    /// Optimal cost per slot per UE.
    pub xi_opt: f64,
    pub sweeps: usize,
}

impl JointPolicy {
    fn local(&self, s: &UeState) -> Option<usize> {
        if s.a == 0 || s.a > self.a_max || s.d > self.d_max {
            None
        } else {
            Some((s.a as usize - 1) * (self.d_max as usize + 1) + s.d as usize)
        }
    }

    /// Tabled action for the joint state; `None` outside the caps.
    pub fn action(&self, states: &[UeState]) -> Option<Option<usize>> {
        if states.len() != self.ue_count {
            return None;
        }
        let radix = self.a_max as usize * (self.d_max as usize + 1);
        let mut index = 0usize;
        for s in states {
            index = index * radix + self.local(s)?;
        }
        Some(match self.actions[index] {
            0 => None,
            k => Some(k as usize - 1),
        })
    }
}

/// Per-user outcome lists: `(probability, local successor)`.
struct LocalOutcomes {
    passive: Vec<[(f64, usize); 2]>,
    active: Vec<[(f64, usize); 4]>,
    cost: Vec<f64>,
}

pub fn joint_rvi_solve(mdp: &JointMdp) -> Result<JointPolicy, OracleError> {
    let n_ues = mdp.ues.len();
    if n_ues == 0 || n_ues > 3 {
        return Err(OracleError::Precondition(format!(
            "joint solver supports 1 to 3 UEs, got {n_ues}"
        )));
    }
    if mdp.a_max < 2 || mdp.d_max < 2 {
        return Err(OracleError::Precondition("caps must be at least 2".into()));
    }
    for ue in &mdp.ues {
        ue.check()?;
    }
    let local = mdp.local_count();
    let total = local
        .checked_pow(n_ues as u32)
        .filter(|&t| t <= mdp.state_limit)
        .ok_or(OracleError::CapacityExceeded {
            states: local.saturating_pow(n_ues as u32),
            limit: mdp.state_limit,
        })?;

    let outcomes: Vec<LocalOutcomes> = mdp
        .ues
        .iter()
        .map(|ue| {
            let (l, e) = (ue.lambda, ue.eps);
            let mut o = LocalOutcomes {
                passive: Vec::with_capacity(local),
                active: Vec::with_capacity(local),
                cost: Vec::with_capacity(local),
            };
            for a in 1..=mdp.a_max {
                for d in 0..=mdp.d_max {
                    let ia = mdp.local_index(1, a + d);
                    let inone = mdp.local_index(a + 1, d);
                    let sa = mdp.local_index(1, a);
                    let snone = mdp.local_index(a + 1, 0);
                    o.passive.push([(l, ia), (1.0 - l, inone)]);
                    o.active.push([
                        (e * l, ia),
                        (e * (1.0 - l), inone),
                        ((1.0 - e) * l, sa),
                        ((1.0 - e) * (1.0 - l), snone),
                    ]);
                    o.cost.push(ue.cost.evaluate(a + d));
                }
            }
            o
        })
        .collect();

    // Decompose joint index into local indices, most significant UE first.
    let decompose = |mut s: usize, buf: &mut [usize; 3]| {
        for k in (0..n_ues).rev() {
            buf[k] = s % local;
            s /= local;
        }
    };

    let expect = |f: &[f64], locals: &[usize; 3], active: Option<usize>| -> f64 {
        let list = |k: usize| -> &[(f64, usize)] {
            if active == Some(k) {
                &outcomes[k].active[locals[k]]
            } else {
                &outcomes[k].passive[locals[k]]
            }
        };
        match n_ues {
            1 => list(0).iter().map(|&(p, i)| p * f[i]).sum(),
            2 => {
                let (l0, l1) = (list(0), list(1));
                let mut acc = 0.0;
                for &(p0, i0) in l0 {
                    let base = i0 * local;
                    let inner: f64 = l1.iter().map(|&(p1, i1)| p1 * f[base + i1]).sum();
                    acc += p0 * inner;
                }
                acc
            }
            _ => {
                let (l0, l1, l2) = (list(0), list(1), list(2));
                let mut acc = 0.0;
                for &(p0, i0) in l0 {
                    for &(p1, i1) in l1 {
                        let base = (i0 * local + i1) * local;
                        let inner: f64 = l2.iter().map(|&(p2, i2)| p2 * f[base + i2]).sum();
                        acc += p0 * p1 * inner;
                    }
                }
                acc
            }
        }
    };

    let stage: Vec<f64> = (0..total)
        .map(|s| {
            let mut buf = [0usize; 3];
            decompose(s, &mut buf);
            (0..n_ues).map(|k| outcomes[k].cost[buf[k]]).sum()
        })
        .collect();

    let mut f = vec![0.0; total];
    let mut next = vec![0.0; total];
    let mut actions = vec![0u8; total];
    let mut buf = [0usize; 3];
    for sweep in 1..=mdp.max_sweeps {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for s in 0..total {
            decompose(s, &mut buf);
            let mut best = expect(&f, &buf, None);
            let mut best_action = 0u8;
            for k in 0..n_ues {
                let q = expect(&f, &buf, Some(k));
                if q < best {
                    best = q;
                    best_action = k as u8 + 1;
                }
            }
            let t = stage[s] + best;
            let diff = t - f[s];
            lo = lo.min(diff);
            hi = hi.max(diff);
            next[s] = t;
            actions[s] = best_action;
        }
        if hi - lo <= mdp.tolerance {
            let gain = 0.5 * (lo + hi);
            return Ok(JointPolicy {
                ue_count: n_ues,
                a_max: mdp.a_max,
                d_max: mdp.d_max,
                actions,
                gain,
                xi_opt: gain / n_ues as f64,
                sweeps: sweep,
            });
        }
        let anchor = next[0];
        for s in 0..total {
            f[s] = (1.0 - APERIODICITY) * f[s] + APERIODICITY * (next[s] - anchor);
        }
    }
    Err(OracleError::NotConverged {
        sweeps: mdp.max_sweeps,
        span: f64::NAN,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::whittle::IndexCalculator;

    fn mdp(lambda: f64, eps: f64, v: CostFunction, m: f64) -> DecoupledMdp {
        DecoupledMdp::new(lambda, eps, v, m)
    }

    #[test]
    fn zero_cost_zero_charge_is_flat() {
        let t = rvi_solve(&mdp(0.4, 0.3, CostFunction::constant(0.0), 0.0)).unwrap();
        assert!(t.gain.abs() < 1e-12);
        assert!(t.values.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn zero_charge_schedules_every_informative_state() {
        let t = rvi_solve(&mdp(0.5, 0.25, CostFunction::Linear, 0.0)).unwrap();
        for a in 1..=20 {
            assert!(!t.schedules(a, 0));
            for d in 1..=20 {
                assert!(t.schedules(a, d), "({a},{d})");
            }
        }
    }

    #[test]
    fn closed_form_charge_is_near_indifference() {
        let t = rvi_solve(&mdp(0.5, 0.25, CostFunction::Linear, 4.25)).unwrap();
        assert!(t.is_indifferent(1, 2, 0.02));
    }

    #[test]
    fn residual_bound_holds_after_one_more_sweep() {
        for timing in [CostTiming::StartOfSlot, CostTiming::AfterTransmission] {
            let m = mdp(0.3, 0.5, CostFunction::step(5), 0.7).with_timing(timing);
            let t = rvi_solve(&m).unwrap();
            let k = Kernel::build(&m);
            let diffs: Vec<f64> = (0..m.state_count())
                .map(|s| {
                    let (i, sc) = k.action_values(&m, &t.values, s);
                    i.min(sc) - t.values[s]
                })
                .collect();
            let span = diffs.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
                - diffs.iter().cloned().fold(f64::INFINITY, f64::min);
            assert!(span <= m.tolerance);
            assert_eq!(t.value(1, 0), 0.0);
        }
    }

    #[test]
    fn value_table_structure() {
        let t = rvi_solve(&mdp(0.5, 0.25, CostFunction::Linear, 6.0)).unwrap();
        for a in 1..=t.a_max {
            for d in 0..t.d_max {
                assert!(t.value(a, d + 1) >= t.value(a, d) - 1e-9);
            }
        }
        assert!(t.is_threshold_type());
        let th: Vec<u64> = t.thresholds().into_iter().map(|x| x.unwrap()).collect();
        assert!(th.windows(2).all(|w| w[0] <= w[1]), "{th:?}");
    }

    #[test]
    fn periodic_case_converges() {
        let t = rvi_solve(&mdp(1.0, 0.0, CostFunction::Linear, 1.5)).unwrap();
        assert!(t.span <= 1e-9);
    }

    #[test]
    fn timings_differ_by_a_one_slot_cost_shift() {
        // Start-of-slot accounting with v equals end-of-slot accounting with v(h+1):
        // step H (start) behaves like step H-1 (after transmission).
        let start = rvi_solve(
            &mdp(0.6, 0.2, CostFunction::step(6), 0.4).with_timing(CostTiming::StartOfSlot),
        )
        .unwrap();
        let after = rvi_solve(&mdp(0.6, 0.2, CostFunction::step(5), 0.4)).unwrap();
        assert!((start.gain - after.gain).abs() < 1e-7);
        assert_eq!(start.thresholds()[..10], after.thresholds()[..10]);
    }

    #[test]
    fn bisection_reference_values() {
        // Reference charges from an independent value-iteration solver.
        let base = mdp(0.5, 0.25, CostFunction::Linear, 0.0);
        let m = index_by_bisection(&base, UeState { a: 1, d: 2 }, 8.5).unwrap();
        assert!((m - 4.3355).abs() / 4.3355 < 2e-3, "{m}");

        let base = mdp(0.5, 0.25, CostFunction::step(3), 0.0);
        let m = index_by_bisection(&base, UeState { a: 1, d: 1 }, 1.0).unwrap();
        assert!((m - 0.3).abs() < 1e-3, "{m}");
        let start = base.clone().with_timing(CostTiming::StartOfSlot);
        let m = index_by_bisection(&start, UeState { a: 1, d: 1 }, 1.0).unwrap();
        assert!((m - 0.75).abs() < 1e-3, "{m}");

        assert!(index_by_bisection(&base, UeState { a: 2, d: 0 }, 1.0).is_err());
    }

    #[test]
    fn bisection_is_exact_where_closed_form_is_exact() {
        // Deterministic arrivals and the above-first-threshold branch.
        let calc = IndexCalculator::new(1.0, 0.25, CostFunction::Linear).unwrap();
        let base = mdp(1.0, 0.25, CostFunction::Linear, 0.0).with_caps(40, 40);
        for d in 1..5 {
            let s = UeState { a: 1, d };
            let cf = calc.index_value(s).unwrap();
            let m = index_by_bisection(&base, s, 2.0 * cf).unwrap();
            assert!((m - cf).abs() <= 2e-4 * cf, "{d}: {m} vs {cf}");
        }
    }

    #[test]
    fn greedy_indexability_holds() {
        let base = mdp(0.5, 0.25, CostFunction::Linear, 0.0).with_caps(40, 40);
        let r = greedy_indexability(&base, &[0.0, 1.0, 2.0, 4.0, 8.0], 12, 12).unwrap();
        assert!(r.passed());
        assert_eq!(r.idle_counts[0], 12); // only d = 0 states idle at m = 0
    }

    #[test]
    fn joint_single_ue_matches_decoupled() {
        let ue = UeConfig::new(0.5, 0.25, CostFunction::step(6));
        let joint = joint_rvi_solve(&JointMdp::new(vec![ue], 20, 20)).unwrap();
        let single = rvi_solve(
            &mdp(0.5, 0.25, CostFunction::step(6), 0.0)
                .with_caps(20, 20)
                .with_timing(CostTiming::StartOfSlot),
        )
        .unwrap();
        assert!((joint.gain - single.gain).abs() < 1e-8);
    }

    #[test]
    fn joint_zero_costs_idle_everywhere() {
        let ue = UeConfig::new(0.6, 0.2, CostFunction::constant(0.0));
        let p = joint_rvi_solve(&JointMdp::new(vec![ue, ue], 6, 6)).unwrap();
        assert_eq!(p.xi_opt, 0.0);
        assert!(p.actions.iter().all(|&a| a == 0));
    }

    #[test]
    fn joint_capacity_is_enforced() {
        let ue = UeConfig::new(0.6, 0.2, CostFunction::Linear);
        let mut m = JointMdp::new(vec![ue; 3], 30, 30);
        m.state_limit = 1000;
        assert!(matches!(
            joint_rvi_solve(&m),
            Err(OracleError::CapacityExceeded { .. })
        ));
        assert!(joint_rvi_solve(&JointMdp::new(vec![ue; 4], 3, 3)).is_err());
    }

    #[test]
    fn joint_policy_lookup() {
        let ue = UeConfig::new(0.6, 0.2, CostFunction::step(4));
        let p = joint_rvi_solve(&JointMdp::new(vec![ue, ue], 6, 6)).unwrap();
        let empty = [UeState { a: 1, d: 0 }, UeState { a: 2, d: 0 }];
        assert_eq!(p.action(&empty), Some(None));
        assert_eq!(p.action(&[UeState { a: 7, d: 0 }, UeState { a: 1, d: 0 }]), None);
        // A lone informative UE with cost at stake is scheduled.
        let one = [UeState { a: 1, d: 5 }, UeState { a: 1, d: 0 }];
        assert_eq!(p.action(&one), Some(Some(0)));
    }
}
