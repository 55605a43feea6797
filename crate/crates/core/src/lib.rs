//! Whittle-index scheduling for minimizing the cost of Age of Information in a
//! time-slotted downlink with random packet generation and unreliable
//! channels.
//!
//! * [`cost`] holds the cost-of-AoI families.
//! * [`series`] evaluates the tail sums the index is built from.
//! * [`whittle`] has the closed-form index, the first-threshold solver and
//!   threshold/indexability utilities.
//! * [`oracle`] solves the decoupled and the small joint MDPs by relative value
//!   iteration and is the independent ground truth for the index.
//! * [`policies`] implements the schedulers and [`sim`] the Monte-Carlo
//!   simulator.

pub mod cost;
pub mod error;
pub mod oracle;
pub mod policies;
pub mod series;
pub mod sim;
pub mod whittle;

pub use cost::{CostFunction, GrowthBound};
pub use error::{CostError, OracleError, PolicyError, SeriesError, SimError, WhittleError};
pub use oracle::{
    index_by_bisection, joint_rvi_solve, rvi_solve, CostTiming, DecoupledMdp, JointMdp,
    JointPolicy, ValueTable,
};
pub use policies::{FleetView, Scheduler, SchedulerDecision, UeConfig};
pub use series::{SeriesContext, SeriesValues};
pub use sim::{SimConfig, SimReport};
pub use whittle::{IndexCalculator, UeState, WhittleIndexValue};

/// Library version recorded in experiment metadata.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
