use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CostError {
    #[error("{name} = {value} is not a probability")]
    InvalidProbability { name: &'static str, value: f64 },
    #[error("invalid cost function: {0}")]
    InvalidCost(String),
    #[error("rejected parameters: {0}")]
    RejectedParameters(String),
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SeriesError {
    #[error("series does not converge: {0}")]
    NonConvergent(#[from] CostError),
    #[error("AoI argument must be at least 1, got {0}")]
    InvalidArgument(u64),
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum WhittleError {
    #[error(transparent)]
    Series(#[from] SeriesError),
    #[error("invalid state (a = {a}, d = {d}): queuing delay must be at least 1")]
    InvalidState { a: u64, d: u64 },
    #[error("no solution for {what} within cap {cap}")]
    NoSolutionWithinCap { what: &'static str, cap: u64 },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum OracleError {
    #[error(transparent)]
    Cost(#[from] CostError),
    #[error("relative value iteration did not converge after {sweeps} sweeps (span {span:e})")]
    NotConverged { sweeps: usize, span: f64 },
    #[error("state (a = {a}, d = {d}) is scheduled even at charge {charge}; caps too small")]
    NoFlip { a: u64, d: u64, charge: f64 },
    #[error("joint state space of {states} states exceeds limit {limit}")]
    CapacityExceeded { states: usize, limit: usize },
    #[error("precondition violated: {0}")]
    Precondition(String),
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PolicyError {
    #[error("UE {ue}: {source}")]
    Index {
        ue: usize,
        #[source]
        source: WhittleError,
    },
    #[error("state of UE {ue} (a = {a}, d = {d}) lies outside the optimal-policy table")]
    OutOfTable { ue: usize, a: u64, d: u64 },
    #[error("fleet of {got} UEs does not match policy built for {expected}")]
    FleetMismatch { expected: usize, got: usize },
    #[error("unknown policy {0:?}")]
    UnknownPolicy(String),
    #[error("empty fleet")]
    EmptyFleet,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SimError {
    #[error("invalid simulation config: {0}")]
    InvalidConfig(String),
    #[error("replication {replication}, slot {slot}: {source}")]
    Policy {
        replication: u32,
        slot: u64,
        #[source]
        source: PolicyError,
    },
    #[error("policy construction failed: {0}")]
    PolicySetup(String),
}
