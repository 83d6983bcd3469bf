//! Metric search for ranked-preference lists.
//!
//! Users express preferences as a full ranking of a fixed item set; two
//! rankings are compared with the Kendall-Tau distance (the number of
//! item pairs the two orders disagree on). Because that distance is a
//! metric, a population of rankings can be indexed with a metric tree and
//! searched with ball and ring range queries far faster than a linear
//! scan.
//!
//! The crate has four parts:
//!
//! - [`kendall`]: the distance itself, its quadratic reference
//!   implementation, and normalization to `[0, 1]`.
//! - [`mtree`]: the cascading metric tree with instrumented range
//!   queries, incremental insert, soft delete, and cleanup rebuild.
//! - [`mod@bench`]: synthetic populations and the scaling-study harness
//!   that sweeps list length, population size, and query radius into
//!   plot-ready CSV.
//! - [`matchd`]: a small compatibility-matching service over the tree
//!   with a line-based wire protocol and snapshot persistence.

pub mod bench;
pub mod kendall;
pub mod matchd;
pub mod mtree;

pub use kendall::{RankList, RawDistance};
pub use mtree::{QuerySpec, QueryStats, Tree, TreeConfig, UserRecord};
