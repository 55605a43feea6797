//! Schedulers. Each decides, from a snapshot of every user's configuration
//! and state, which single user (if any) transmits this slot.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cost::CostFunction;
use crate::error::{CostError, PolicyError, WhittleError};
use crate::oracle::{JointPolicy, ValueTable};
use crate::series::SeriesContext;
use crate::whittle::{IndexCalculator, UeState};

/// Per-user channel and cost parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct UeConfig {
    pub lambda: f64,
    #[serde(rename = "epsilon")]
    pub eps: f64,
    pub cost: CostFunction,
}

impl UeConfig {
    pub fn new(lambda: f64, eps: f64, cost: CostFunction) -> Self {
        UeConfig { lambda, eps, cost }
    }

    /// Probabilities in `[0, 1]` and a valid cost. `eps = 1` is allowed here;
    /// index computation rejects it separately.
    pub fn check(&self) -> Result<(), CostError> {
        for (name, value) in [("lambda", self.lambda), ("epsilon", self.eps)] {
            if !(0.0..=1.0).contains(&value) {
                return Err(CostError::InvalidProbability { name, value });
            }
        }
        self.cost.check()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SchedulerDecision {
    Idle,
    Schedule(usize),
}

impl SchedulerDecision {
    pub fn scheduled(&self) -> Option<usize> {
        match *self {
            SchedulerDecision::Idle => None,
            SchedulerDecision::Schedule(n) => Some(n),
        }
    }
}

/// Snapshot of the fleet at the decision instant.
#[derive(Clone, Copy, Debug)]
pub struct FleetView<'a> {
    pub configs: &'a [UeConfig],
    pub states: &'a [UeState],
}

impl<'a> FleetView<'a> {
    pub fn new(configs: &'a [UeConfig], states: &'a [UeState]) -> Result<Self, PolicyError> {
        if configs.is_empty() {
            return Err(PolicyError::EmptyFleet);
        }
        if configs.len() != states.len() {
            return Err(PolicyError::FleetMismatch {
                expected: configs.len(),
                got: states.len(),
            });
        }
        Ok(FleetView { configs, states })
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }
}

pub trait Scheduler: Send + Sync {
    fn name(&self) -> &str;

    fn decide(&mut self, view: &FleetView<'_>) -> Result<SchedulerDecision, PolicyError>;

    /// Restores the initial internal state (cursor, tie-break stream) for
    /// replication `replication`.
    fn reset(&mut self, _replication: u32) {}

    fn clone_box(&self) -> Box<dyn Scheduler>;
}

impl Clone for Box<dyn Scheduler> {
    fn clone(&self) -> Self {
        self.clone_box()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TieBreak {
    #[default]
    LowestId,
    /// Uniform among tied users, from a stream seeded by `(seed, replication)`.
    Random { seed: u64 },
}

/// Picks the argmax of `score` over eligible users, or `Idle` when the best
/// score is not positive.
#[derive(Clone, Debug)]
struct Chooser {
    tie_break: TieBreak,
    rng: Option<ChaCha8Rng>,
    tied: Vec<usize>,
}

impl Chooser {
    fn new(tie_break: TieBreak) -> Self {
        let mut c = Chooser {
            tie_break,
            rng: None,
            tied: Vec::new(),
        };
        c.reset(0);
        c
    }

    fn reset(&mut self, replication: u32) {
        self.rng = match self.tie_break {
            TieBreak::LowestId => None,
            TieBreak::Random { seed } => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(replication as u64);
                Some(rng)
            }
        };
    }

    fn choose(&mut self, scores: impl Iterator<Item = Option<f64>>) -> SchedulerDecision {
        let mut best = 0.0;
        self.tied.clear();
        for (n, score) in scores.enumerate() {
            let Some(s) = score else { continue };
            if s > best {
                best = s;
                self.tied.clear();
                self.tied.push(n);
            } else if s == best && !self.tied.is_empty() {
                self.tied.push(n);
            }
        }
        match (self.tied.len(), self.rng.as_mut()) {
            (0, _) => SchedulerDecision::Idle,
            (1, _) | (_, None) => SchedulerDecision::Schedule(self.tied[0]),
            (k, Some(rng)) => SchedulerDecision::Schedule(self.tied[rng.random_range(0..k)]),
        }
    }
}

const DENSE_SIDE: usize = 128;

/// Lazily filled index table for one user class.
#[derive(Clone, Debug)]
struct IndexCache {
    calc: Arc<IndexCalculator>,
    dense: Vec<f64>,
    overflow: HashMap<UeState, f64>,
}

impl IndexCache {
    fn new(calc: IndexCalculator) -> Self {
        IndexCache {
            calc: Arc::new(calc),
            dense: vec![f64::NAN; DENSE_SIDE * DENSE_SIDE],
            overflow: HashMap::new(),
        }
    }

    fn get(&mut self, state: UeState) -> Result<f64, WhittleError> {
        if state.d == 0 {
            return Ok(0.0);
        }
        let (a, d) = (state.a as usize, state.d as usize);
        if a >= 1 && a <= DENSE_SIDE && d < DENSE_SIDE {
            let slot = (a - 1) * DENSE_SIDE + d;
            let cached = self.dense[slot];
            if !cached.is_nan() {
                return Ok(cached);
            }
            let v = self.calc.index_value(state)?;
            self.dense[slot] = v;
            return Ok(v);
        }
        if let Some(&v) = self.overflow.get(&state) {
            return Ok(v);
        }
        let v = self.calc.index_value(state)?;
        self.overflow.insert(state, v);
        Ok(v)
    }
}

/// Shared implementation of the two index policies.
#[derive(Clone, Debug)]
struct IndexTables {
    /// Cache per distinct user class.
    caches: Vec<IndexCache>,
    /// User to cache slot.
    class_of: Vec<usize>,
}

impl IndexTables {
    fn build(
        ues: &[UeConfig],
        offset: u64,
        lambda_override: Option<f64>,
    ) -> Result<Self, PolicyError> {
        if ues.is_empty() {
            return Err(PolicyError::EmptyFleet);
        }
        let mut keys: Vec<(u64, u64, (u8, u64, u64))> = Vec::new();
        let mut caches = Vec::new();
        let mut class_of = Vec::with_capacity(ues.len());
        for (n, ue) in ues.iter().enumerate() {
            let lambda = lambda_override.unwrap_or(ue.lambda);
            let key = (lambda.to_bits(), ue.eps.to_bits(), ue.cost.key());
            let slot = match keys.iter().position(|k| *k == key) {
                Some(slot) => slot,
                None => {
                    let ctx = SeriesContext::new(lambda, ue.eps, ue.cost)
                        .map_err(|e| PolicyError::Index {
                            ue: n,
                            source: e.into(),
                        })?
                        .with_offset(offset);
                    keys.push(key);
                    caches.push(IndexCache::new(IndexCalculator::from_context(ctx)));
                    caches.len() - 1
                }
            };
            class_of.push(slot);
        }
        Ok(IndexTables { caches, class_of })
    }

    fn index(&mut self, ue: usize, state: UeState) -> Result<f64, PolicyError> {
        let class = self.class_of[ue];
        self.caches[class]
            .get(state)
            .map_err(|source| PolicyError::Index { ue, source })
    }

    fn check_fleet(&self, view: &FleetView<'_>) -> Result<(), PolicyError> {
        if view.len() != self.class_of.len() {
            return Err(PolicyError::FleetMismatch {
                expected: self.class_of.len(),
                got: view.len(),
            });
        }
        Ok(())
    }
}

/// Schedules the user with the largest closed-form Whittle index; idles when
/// every index is zero.
///
/// `offset` shifts the cost argument inside the index (`v(h + offset)`).
/// The closed form charges the AoI reached after a transmission while the
/// simulator charges the AoI held at the start of a slot; offset 1 makes the
/// two accountings coincide.
#[derive(Clone, Debug)]
pub struct WhittlePolicy {
    tables: IndexTables,
    chooser: Chooser,
    scores: Vec<Option<f64>>,
}

impl WhittlePolicy {
    pub fn new(ues: &[UeConfig], offset: u64, tie_break: TieBreak) -> Result<Self, PolicyError> {
        Ok(WhittlePolicy {
            tables: IndexTables::build(ues, offset, None)?,
            chooser: Chooser::new(tie_break),
            scores: Vec::with_capacity(ues.len()),
        })
    }

    pub fn index(&mut self, ue: usize, state: UeState) -> Result<f64, PolicyError> {
        self.tables.index(ue, state)
    }
}

fn index_decision(
    tables: &mut IndexTables,
    chooser: &mut Chooser,
    scores: &mut Vec<Option<f64>>,
    view: &FleetView<'_>,
) -> Result<SchedulerDecision, PolicyError> {
    tables.check_fleet(view)?;
    scores.clear();
    for (n, state) in view.states.iter().enumerate() {
        scores.push(if state.d == 0 {
            None
        } else {
            Some(tables.index(n, *state)?)
        });
    }
    Ok(chooser.choose(scores.iter().copied()))
}

impl Scheduler for WhittlePolicy {
    fn name(&self) -> &str {
        "whittle"
    }

    fn decide(&mut self, view: &FleetView<'_>) -> Result<SchedulerDecision, PolicyError> {
        index_decision(&mut self.tables, &mut self.chooser, &mut self.scores, view)
    }

    fn reset(&mut self, replication: u32) {
        self.chooser.reset(replication);
    }

    fn clone_box(&self) -> Box<dyn Scheduler> {
        Box::new(self.clone())
    }
}

/// The same index with every `lambda` replaced by 1, restricted to users
/// holding a packet.
#[derive(Clone, Debug)]
pub struct OnDemandWhittlePolicy {
    tables: IndexTables,
    chooser: Chooser,
    scores: Vec<Option<f64>>,
}

impl OnDemandWhittlePolicy {
    pub fn new(ues: &[UeConfig], offset: u64, tie_break: TieBreak) -> Result<Self, PolicyError> {
        Ok(OnDemandWhittlePolicy {
            tables: IndexTables::build(ues, offset, Some(1.0))?,
            chooser: Chooser::new(tie_break),
            scores: Vec::with_capacity(ues.len()),
        })
    }
}

impl Scheduler for OnDemandWhittlePolicy {
    fn name(&self) -> &str {
        "on_demand_whittle"
    }

    fn decide(&mut self, view: &FleetView<'_>) -> Result<SchedulerDecision, PolicyError> {
        index_decision(&mut self.tables, &mut self.chooser, &mut self.scores, view)
    }

    fn reset(&mut self, replication: u32) {
        self.chooser.reset(replication);
    }

    fn clone_box(&self) -> Box<dyn Scheduler> {
        Box::new(self.clone())
    }
}

/// Largest AoI among users holding a deliverable packet.
#[derive(Clone, Debug)]
pub struct AgeGreedyPolicy {
    chooser: Chooser,
}

impl AgeGreedyPolicy {
    pub fn new(tie_break: TieBreak) -> Self {
        AgeGreedyPolicy {
            chooser: Chooser::new(tie_break),
        }
    }
}

impl Scheduler for AgeGreedyPolicy {
    fn name(&self) -> &str {
        "age_greedy"
    }

    fn decide(&mut self, view: &FleetView<'_>) -> Result<SchedulerDecision, PolicyError> {
        Ok(self.chooser.choose(
            view.states
                .iter()
                .map(|s| (s.d >= 1).then_some(s.aoi() as f64)),
        ))
    }

    fn reset(&mut self, replication: u32) {
        self.chooser.reset(replication);
    }

    fn clone_box(&self) -> Box<dyn Scheduler> {
        Box::new(self.clone())
    }
}

/// Cycles through user ids, skipping users without a packet.
#[derive(Clone, Debug, Default)]
pub struct RoundRobinPolicy {
    cursor: usize,
}

impl RoundRobinPolicy {
    pub fn new() -> Self {
        RoundRobinPolicy::default()
    }
}

impl Scheduler for RoundRobinPolicy {
    fn name(&self) -> &str {
        "round_robin"
    }

    fn decide(&mut self, view: &FleetView<'_>) -> Result<SchedulerDecision, PolicyError> {
        let n = view.len();
        for k in 0..n {
            let ue = (self.cursor + k) % n;
            if view.states[ue].d >= 1 {
                self.cursor = (ue + 1) % n;
                return Ok(SchedulerDecision::Schedule(ue));
            }
        }
        Ok(SchedulerDecision::Idle)
    }

    fn reset(&mut self, _replication: u32) {
        self.cursor = 0;
    }

    fn clone_box(&self) -> Box<dyn Scheduler> {
        Box::new(self.clone())
    }
}

/// Single user, transmits every slot whatever the buffer holds.
#[derive(Clone, Debug, Default)]
pub struct AlwaysSchedulePolicy;

impl Scheduler for AlwaysSchedulePolicy {
    fn name(&self) -> &str {
        "always_schedule"
    }

    fn decide(&mut self, view: &FleetView<'_>) -> Result<SchedulerDecision, PolicyError> {
        if view.len() != 1 {
            return Err(PolicyError::FleetMismatch {
                expected: 1,
                got: view.len(),
            });
        }
        Ok(SchedulerDecision::Schedule(0))
    }

    fn clone_box(&self) -> Box<dyn Scheduler> {
        Box::new(self.clone())
    }
}

/// Lookup in a solved joint MDP.
///
/// With `clamp` set, coordinates beyond the caps map to the boundary, which is
/// how the solver itself treats them; otherwise they are an error.
#[derive(Clone, Debug)]
pub struct OptimalPolicy {
    table: Arc<JointPolicy>,
    clamp: bool,
    scratch: Vec<UeState>,
}

impl OptimalPolicy {
    pub fn new(table: Arc<JointPolicy>, clamp: bool) -> Self {
        OptimalPolicy {
            table,
            clamp,
            scratch: Vec::new(),
        }
    }
}

impl Scheduler for OptimalPolicy {
    fn name(&self) -> &str {
        "optimal"
    }

    fn decide(&mut self, view: &FleetView<'_>) -> Result<SchedulerDecision, PolicyError> {
        let t = &self.table;
        if view.len() != t.ue_count {
            return Err(PolicyError::FleetMismatch {
                expected: t.ue_count,
                got: view.len(),
            });
        }
        self.scratch.clear();
        for (ue, s) in view.states.iter().enumerate() {
            if s.a > t.a_max || s.d > t.d_max {
                if !self.clamp {
                    return Err(PolicyError::OutOfTable { ue, a: s.a, d: s.d });
                }
                self.scratch.push(UeState {
                    a: s.a.min(t.a_max),
                    d: s.d.min(t.d_max),
                });
            } else {
                self.scratch.push(*s);
            }
        }
        let action = t.action(&self.scratch).ok_or(PolicyError::OutOfTable {
            ue: 0,
            a: view.states[0].a,
            d: view.states[0].d,
        })?;
        Ok(match action {
            Some(n) => SchedulerDecision::Schedule(n),
            None => SchedulerDecision::Idle,
        })
    }

    fn clone_box(&self) -> Box<dyn Scheduler> {
        Box::new(self.clone())
    }
}

/// Greedy action of a decoupled single-user value table, clamped to its caps.
#[derive(Clone, Debug)]
pub struct DecoupledTablePolicy {
    table: Arc<ValueTable>,
}

impl DecoupledTablePolicy {
    pub fn new(table: Arc<ValueTable>) -> Self {
        DecoupledTablePolicy { table }
    }
}

impl Scheduler for DecoupledTablePolicy {
    fn name(&self) -> &str {
        "decoupled_table"
    }

    fn decide(&mut self, view: &FleetView<'_>) -> Result<SchedulerDecision, PolicyError> {
        if view.len() != 1 {
            return Err(PolicyError::FleetMismatch {
                expected: 1,
                got: view.len(),
            });
        }
        let s = view.states[0];
        let t = &self.table;
        Ok(if t.schedules(s.a.min(t.a_max), s.d.min(t.d_max)) {
            SchedulerDecision::Schedule(0)
        } else {
            SchedulerDecision::Idle
        })
    }

    fn clone_box(&self) -> Box<dyn Scheduler> {
        Box::new(self.clone())
    }
}

/// Policy names accepted in experiment configs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    Whittle,
    AgeGreedy,
    OnDemandWhittle,
    Optimal,
    RoundRobin,
    AlwaysSchedule,
}

impl PolicyKind {
    pub const ALL: [PolicyKind; 6] = [
        PolicyKind::Whittle,
        PolicyKind::AgeGreedy,
        PolicyKind::OnDemandWhittle,
        PolicyKind::Optimal,
        PolicyKind::RoundRobin,
        PolicyKind::AlwaysSchedule,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            PolicyKind::Whittle => "whittle",
            PolicyKind::AgeGreedy => "age_greedy",
            PolicyKind::OnDemandWhittle => "on_demand_whittle",
            PolicyKind::Optimal => "optimal",
            PolicyKind::RoundRobin => "round_robin",
            PolicyKind::AlwaysSchedule => "always_schedule",
        }
    }
}

impl fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PolicyKind {
    type Err = PolicyError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        PolicyKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| PolicyError::UnknownPolicy(s.to_string()))
    }
}

/// Construction options shared by the factory.
#[derive(Clone, Debug, Default)]
pub struct PolicyOptions {
    pub index_offset: u64,
    pub tie_break: TieBreak,
    /// Required for [`PolicyKind::Optimal`].
    pub joint: Option<Arc<JointPolicy>>,
    pub clamp_to_table: bool,
}

impl PolicyOptions {
    /// Offset 1, lowest-id ties, no joint table.
    pub fn aligned() -> Self {
        PolicyOptions {
            index_offset: 1,
            ..PolicyOptions::default()
        }
    }
}

pub fn build_policy(
    kind: PolicyKind,
    ues: &[UeConfig],
    options: &PolicyOptions,
) -> Result<Box<dyn Scheduler>, PolicyError> {
    if ues.is_empty() {
        return Err(PolicyError::EmptyFleet);
    }
    Ok(match kind {
        PolicyKind::Whittle => Box::new(WhittlePolicy::new(ues, options.index_offset, options.tie_break)?),
        PolicyKind::OnDemandWhittle => Box::new(OnDemandWhittlePolicy::new(
            ues,
            options.index_offset,
            options.tie_break,
        )?),
        PolicyKind::AgeGreedy => Box::new(AgeGreedyPolicy::new(options.tie_break)),
        PolicyKind::RoundRobin => Box::new(RoundRobinPolicy::new()),
        PolicyKind::AlwaysSchedule => Box::new(AlwaysSchedulePolicy),
        PolicyKind::Optimal => {
            let table = options.joint.clone().ok_or_else(|| {
                PolicyError::UnknownPolicy("optimal (no joint table supplied)".into())
            })?;
            if table.ue_count != ues.len() {
                return Err(PolicyError::FleetMismatch {
                    expected: table.ue_count,
                    got: ues.len(),
                });
            }
            Box::new(OptimalPolicy::new(table, options.clamp_to_table))
        }
    })
}
