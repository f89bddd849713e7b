//! Data generation, simulation conditions, performance metrics and the
//! Monte Carlo driver.

mod condition;
mod generate;
pub mod metrics;
mod study;

pub use condition::{Allocation, ClassTruth, GridCell, SimulationCondition};
pub use generate::{generate_dataset, simulate_individual};
pub use metrics::{coverage, empirical_se, mc_se_of_bias, relative_bias, relative_rmse, ParameterMetrics};
pub use study::{
    align_to_truth, metrics_from_records, read_records, replication_seeds, run_condition, run_replication,
    write_records, MetricsReport, ReplicationRecord, StudyOptions, StudyOutcome,
};
