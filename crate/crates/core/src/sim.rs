//! Time-slotted Monte-Carlo simulator.
//!
//! Per slot and user: the cost `v(a + d)` of the current state is accrued,
//! then the scheduled user's transmission succeeds w.p. `1 - eps`, then a
//! packet arrives w.p. `lambda`. Transitions follow the decoupled MDP law.
//!
//! Randomness: user `n` in replication `r` owns a `ChaCha8Rng` keyed by the
//! config seed with stream id `(r << 32) | n`, and consumes exactly one
//! 64-bit word per slot (low half: channel, high half: arrival) whether or not
//! it is scheduled. Policies therefore see common random numbers.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::SimError;
use crate::policies::{build_policy, FleetView, PolicyKind, PolicyOptions, Scheduler, SchedulerDecision, UeConfig};
use crate::whittle::UeState;

const Z_95: f64 = 1.959_963_984_540_054;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub ues: Vec<UeConfig>,
    /// Slots simulated per replication (`T`).
    pub horizon: u64,
    /// Leading slots excluded from the averages (`W`).
    pub warmup: u64,
    pub seed: u64,
    pub policy: PolicyKind,
    pub replications: u32,
    /// Charge added per transmission, reported separately from the AoI cost.
    #[serde(default)]
    pub charge: f64,
}

impl SimConfig {
    /// Default warmup `max(1000, T / 100)`, one replication, seed 0.
    pub fn new(ues: Vec<UeConfig>, horizon: u64, policy: PolicyKind) -> Self {
        SimConfig {
            ues,
            horizon,
            warmup: default_warmup(horizon),
            seed: 0,
            policy,
            replications: 1,
            charge: 0.0,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_replications(mut self, replications: u32) -> Self {
        self.replications = replications;
        self
    }

    pub fn with_warmup(mut self, warmup: u64) -> Self {
        self.warmup = warmup;
        self
    }

    pub fn with_charge(mut self, charge: f64) -> Self {
        self.charge = charge;
        self
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: String| Err(SimError::InvalidConfig(m));
        if self.ues.is_empty() {
            return bad("ues: at least one UE is required".into());
        }
        for (n, ue) in self.ues.iter().enumerate() {
            if let Err(e) = ue.check() {
                return bad(format!("ues[{n}]: {e}"));
            }
        }
        if self.horizon <= self.warmup {
            return bad(format!(
                "horizon: must exceed warmup ({} <= {})",
                self.horizon, self.warmup
            ));
        }
        if self.replications == 0 {
            return bad("replications: must be at least 1".into());
        }
        if !(self.charge >= 0.0) || !self.charge.is_finite() {
            return bad(format!("charge: must be finite and non-negative, got {}", self.charge));
        }
        Ok(())
    }
}

pub fn default_warmup(horizon: u64) -> u64 {
    (horizon / 100).max(1000)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimReport {
    pub policy: String,
    pub ue_count: usize,
    pub horizon: u64,
    pub warmup: u64,
    pub replications: u32,
    /// Average AoI cost per user and slot, mean over replications.
    pub mean_cost: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub std_error: f64,
    pub replication_costs: Vec<f64>,
    pub per_ue_cost: Vec<f64>,
    pub per_ue_aoi: Vec<f64>,
    /// Successful deliveries of fresher information per slot (whole fleet).
    pub throughput: f64,
    /// Transmissions per slot (whole fleet).
    pub transmissions: f64,
    /// `charge * transmissions`.
    pub mean_charge: f64,
}

impl SimReport {
    /// AoI cost plus transmission charges, per slot, summed over users.
    pub fn total_cost_per_slot(&self) -> f64 {
        self.mean_cost * self.ue_count as f64 + self.mean_charge
    }
}

/// Next state of one user.
#[inline]
pub fn transition(state: UeState, scheduled: bool, success: bool, arrival: bool) -> UeState {
    let UeState { a, d } = state;
    match (scheduled && success, arrival) {
        (true, true) => UeState { a: 1, d: a },
        (true, false) => UeState { a: a + 1, d: 0 },
        (false, true) => UeState { a: 1, d: a + d },
        (false, false) => UeState { a: a + 1, d },
    }
}

/// Probability as a threshold on a uniform 32-bit word.
#[inline]
fn threshold(p: f64) -> u64 {
    (p * 4_294_967_296.0).floor() as u64
}

#[derive(Clone, Debug)]
struct Thresholds {
    success: Vec<u64>,
    arrival: Vec<u64>,
}

impl Thresholds {
    fn new(ues: &[UeConfig]) -> Self {
        Thresholds {
            success: ues.iter().map(|u| threshold(1.0 - u.eps)).collect(),
            arrival: ues.iter().map(|u| threshold(u.lambda)).collect(),
        }
    }
}

/// Independent per-user streams for one replication.
pub fn replication_rngs(seed: u64, replication: u32, ue_count: usize) -> Vec<ChaCha8Rng> {
    (0..ue_count)
        .map(|n| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(((replication as u64) << 32) | n as u64);
            rng
        })
        .collect()
}

/// Advances every user by one slot; returns next states and the slot costs.
pub fn step(
    configs: &[UeConfig],
    states: &[UeState],
    decision: SchedulerDecision,
    rngs: &mut [ChaCha8Rng],
) -> (Vec<UeState>, Vec<f64>) {
    let th = Thresholds::new(configs);
    let mut next = states.to_vec();
    let costs = states
        .iter()
        .zip(configs)
        .map(|(s, c)| c.cost.evaluate(s.aoi()))
        .collect();
    advance(&th, &mut next, decision.scheduled(), rngs);
    (next, costs)
}

/// In place; returns whether the scheduled user delivered fresher information.
#[inline]
fn advance(th: &Thresholds, states: &mut [UeState], scheduled: Option<usize>, rngs: &mut [ChaCha8Rng]) -> (bool, bool) {
    let mut delivered = false;
    let mut succeeded = false;
    for (n, state) in states.iter_mut().enumerate() {
        let word = rngs[n].next_u64();
        let success = (word & 0xFFFF_FFFF) < th.success[n];
        let arrival = (word >> 32) < th.arrival[n];
        let is_scheduled = scheduled == Some(n);
        let next = transition(*state, is_scheduled, success, arrival);
        debug_assert_eq!(
            next.aoi(),
            if is_scheduled && success { state.a + 1 } else { state.aoi() + 1 }
        );
        if is_scheduled && success {
            succeeded = true;
            delivered = state.d >= 1;
        }
        *state = next;
    }
    (succeeded, delivered)
}

#[derive(Clone, Debug)]
struct ReplicationResult {
    per_ue_cost: Vec<f64>,
    per_ue_aoi: Vec<f64>,
    deliveries: u64,
    transmissions: u64,
}

fn run_replication(
    config: &SimConfig,
    th: &Thresholds,
    policy: &mut dyn Scheduler,
    replication: u32,
) -> Result<ReplicationResult, SimError> {
    let n = config.ues.len();
    let mut rngs = replication_rngs(config.seed, replication, n);
    let mut states = vec![UeState::initial(); n];
    let mut cost_sums = vec![0.0; n];
    let mut aoi_sums = vec![0u64; n];
    let mut deliveries = 0u64;
    let mut transmissions = 0u64;
    policy.reset(replication);
    for slot in 0..config.horizon {
        let view = FleetView {
            configs: &config.ues,
            states: &states,
        };
        let decision = policy.decide(&view).map_err(|source| SimError::Policy {
            replication,
            slot,
            source,
        })?;
        let scheduled = decision.scheduled();
        if let Some(k) = scheduled {
            if k >= n {
                return Err(SimError::InvalidConfig(format!(
                    "policy {} scheduled UE {k} of {n}",
                    policy.name()
                )));
            }
        }
        let counted = slot >= config.warmup;
        if counted {
            for (k, (s, c)) in states.iter().zip(&config.ues).enumerate() {
                cost_sums[k] += c.cost.evaluate(s.aoi());
                aoi_sums[k] += s.aoi();
            }
        }
        let (_, delivered) = advance(th, &mut states, scheduled, &mut rngs);
        if counted {
            transmissions += scheduled.is_some() as u64;
            deliveries += delivered as u64;
        }
    }
    let slots = (config.horizon - config.warmup) as f64;
    Ok(ReplicationResult {
        per_ue_cost: cost_sums.iter().map(|c| c / slots).collect(),
        per_ue_aoi: aoi_sums.iter().map(|&h| h as f64 / slots).collect(),
        deliveries,
        transmissions,
    })
}

/// `R` replications of `policy`, each on a fresh clone of it.
pub fn run(config: &SimConfig, policy: &dyn Scheduler) -> Result<SimReport, SimError> {
    config.validate()?;
    let th = Thresholds::new(&config.ues);
    let results: Vec<ReplicationResult> = (0..config.replications)
        .into_par_iter()
        .map(|r| {
            let mut p = policy.clone_box();
            run_replication(config, &th, p.as_mut(), r)
        })
        .collect::<Result<_, _>>()?;
    Ok(aggregate(config, policy.name(), &results))
}

/// Builds the configured policy by name and runs it.
pub fn run_named(config: &SimConfig, options: &PolicyOptions) -> Result<SimReport, SimError> {
    config.validate()?;
    let policy = build_policy(config.policy, &config.ues, options)
        .map_err(|e| SimError::PolicySetup(e.to_string()))?;
    run(config, policy.as_ref())
}

fn aggregate(config: &SimConfig, name: &str, results: &[ReplicationResult]) -> SimReport {
    let n = config.ues.len();
    let reps = results.len() as f64;
    let slots = (config.horizon - config.warmup) as f64;
    let replication_costs: Vec<f64> = results
        .iter()
        .map(|r| r.per_ue_cost.iter().sum::<f64>() / n as f64)
        .collect();
    let mean = replication_costs.iter().sum::<f64>() / reps;
    let std_error = if results.len() > 1 {
        let var = replication_costs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (reps - 1.0);
        (var / reps).sqrt()
    } else {
        0.0
    };
    let column_mean = |f: &dyn Fn(&ReplicationResult) -> &Vec<f64>| -> Vec<f64> {
        (0..n)
            .map(|k| results.iter().map(|r| f(r)[k]).sum::<f64>() / reps)
            .collect()
    };
    let transmissions = results.iter().map(|r| r.transmissions as f64).sum::<f64>() / (reps * slots);
    SimReport {
        policy: name.to_string(),
        ue_count: n,
        horizon: config.horizon,
        warmup: config.warmup,
        replications: config.replications,
        mean_cost: mean,
        ci_low: mean - Z_95 * std_error,
        ci_high: mean + Z_95 * std_error,
        std_error,
        per_ue_cost: column_mean(&|r| &r.per_ue_cost),
        per_ue_aoi: column_mean(&|r| &r.per_ue_aoi),
        throughput: results.iter().map(|r| r.deliveries as f64).sum::<f64>() / (reps * slots),
        transmissions,
        mean_charge: config.charge * transmissions,
        replication_costs,
    }
}

/// Overrides applied to every user of the base config. Empty axes keep the
/// base values.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SweepGrid {
    #[serde(default)]
    pub lambdas: Vec<f64>,
    #[serde(default, rename = "epsilons")]
    pub eps: Vec<f64>,
}

impl SweepGrid {
    /// Grid points in row-major order (`lambda` outer).
    pub fn points(&self) -> Vec<(Option<f64>, Option<f64>)> {
        let ls: Vec<Option<f64>> = if self.lambdas.is_empty() {
            vec![None]
        } else {
            self.lambdas.iter().map(|&l| Some(l)).collect()
        };
        let es: Vec<Option<f64>> = if self.eps.is_empty() {
            vec![None]
        } else {
            self.eps.iter().map(|&e| Some(e)).collect()
        };
        ls.iter()
            .flat_map(|&l| es.iter().map(move |&e| (l, e)))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepCell {
    pub lambda: Option<f64>,
    pub eps: Option<f64>,
    pub policy: PolicyKind,
    pub report: Result<SimReport, SimError>,
}

/// Every grid point under every policy, each cell an independent [`run_named`].
pub fn sweep(
    base: &SimConfig,
    grid: &SweepGrid,
    policies: &[PolicyKind],
    options: &PolicyOptions,
) -> Result<Vec<SweepCell>, SimError> {
    let points = grid.points();
    if policies.is_empty() {
        return Err(SimError::InvalidConfig("policies: at least one policy is required".into()));
    }
    let cells: Vec<(Option<f64>, Option<f64>, PolicyKind)> = points
        .iter()
        .flat_map(|&(l, e)| policies.iter().map(move |&p| (l, e, p)))
        .collect();
    Ok(cells
        .into_par_iter()
        .map(|(lambda, eps, policy)| {
            let mut config = base.clone();
            config.policy = policy;
            for ue in &mut config.ues {
                if let Some(l) = lambda {
                    ue.lambda = l;
                }
                if let Some(e) = eps {
                    ue.eps = e;
                }
            }
            SweepCell {
                lambda,
                eps,
                policy,
                report: run_named(&config, options),
            }
        })
        .collect())
}
