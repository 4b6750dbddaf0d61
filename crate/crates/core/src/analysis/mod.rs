//! Hyperparameter analysis: regression forests approximating a metric as a
//! function of the hyperparameters, feature importances and greedy
//! filtering of the worst values.

mod filter;
mod forest;
mod records;

pub use filter::{greedy_filter, Direction, FilterConfig, FilterOutcome, FilterRound, Ranked, StopReason};
pub use forest::{Feature, FeatureKind, ForestConfig, Node, RegressionForest, Rule, Table, Tree};
pub use records::{append_records, read_records, to_table, EvalRecord, Metric, Module, FEATURES, NOT_APPLICABLE};
