//! Constrained deterministic annealing for facility location, facility
//! location with path optimization, and last-mile delivery scheduling.
//!
//! Every solver minimizes a free energy `beta * D - H` while raising `beta`
//! along a geometric ladder. Inequality constraints (facility or vehicle
//! capacities) enter through an exponential penalty
//! `beta' * sum_j exp(theta * slack_j)` whose weight `beta'` is annealed in an
//! inner ladder.
//!
//! ```
//! use capanneal::anneal::geometric_ladder;
//!
//! let ladder = geometric_ladder(1.0, 8.0, 2.0).unwrap();
//! assert_eq!(ladder, vec![1.0, 2.0, 4.0, 8.0]);
//! ```

pub mod anneal;
pub mod error;
pub mod flp;
pub mod flpo;
pub mod geometry;
pub mod io;
pub mod lmdp;
pub mod oracles;
mod prices;
pub mod trace;

pub use anneal::{AnnealSchedule, FixedPointConfig, PenaltyConfig};
pub use error::{Error, Result};
pub use flp::{FlpInstance, FlpSolution, FlpState};
pub use flpo::{FlpoInstance, FlpoSolution, PathPolicy};
pub use geometry::{Points, RowMatrix};
pub use lmdp::{DeliveryPlan, LmdpInstance};
pub use trace::{SolverTrace, TraceRow};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    pub struct Introduction;
    #[doc = include_str!("../../../book/src/schedules.md")]
    pub struct Schedules;
    #[doc = include_str!("../../../book/src/facility-location.md")]
    pub struct FacilityLocation;
    #[doc = include_str!("../../../book/src/path-optimization.md")]
    pub struct PathOptimization;
    #[doc = include_str!("../../../book/src/last-mile.md")]
    pub struct LastMile;
    #[doc = include_str!("../../../book/src/oracles.md")]
    pub struct Oracles;
    #[doc = include_str!("../../../book/src/formats.md")]
    pub struct Formats;
}
