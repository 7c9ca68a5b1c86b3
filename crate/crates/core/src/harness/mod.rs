//! Simulated workloads, the Adult preparation and the two studies.

pub mod adult;
pub mod studies;
pub mod workload;

pub use adult::{load_adult, load_adult_binary, read_adult, AdultVariables};
pub use studies::{
    run_monotonicity_study, run_utility_study, write_table, MonotonicityConfig, MonotonicityRow,
    StudyData, UtilityConfig, UtilityRow,
};
pub use workload::{gen_nested_pairs, gen_queries, gen_sim_db, WorkloadSpec};
