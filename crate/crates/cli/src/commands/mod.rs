mod analyze;
mod eval;
mod gen_data;
mod teach;
mod train;

pub use analyze::{analyze, AnalyzeSummary, FILTER_LOG, IMPORTANCES};
pub use eval::{eval, report_name};
pub use gen_data::gen_data;
pub use teach::{serve, teach, teach_config, TeachSummary};
pub use train::{snapshot_name, train, TrainSummary, FINAL, LOSS_LOG};
