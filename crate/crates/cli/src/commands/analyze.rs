use std::fs;

use pnp_core::analysis::{
    greedy_filter, read_records, to_table, Direction, FilterConfig, FilterOutcome, ForestConfig, Metric,
    RegressionForest,
};
use serde::{Deserialize, Serialize};

use crate::args::{AnalyzeArgs, DirectionArg};
use crate::error::Result;
use crate::run_config::RunConfig;

pub const IMPORTANCES: &str = "importances.csv";
pub const FILTER_LOG: &str = "filter_log.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Importance {
    pub feature: String,
    pub gini: f64,
    pub permutation: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalyzeSummary {
    pub records: usize,
    pub importances: Vec<Importance>,
    pub filter: FilterOutcome,
}

/// Importances from one forest over all matching records, then the greedy
/// filter. Writes `importances.csv` and `filter_log.json` under `out`.
pub fn analyze(a: &AnalyzeArgs) -> Result<AnalyzeSummary> {
    let mut rc = RunConfig::new("analyze", &a.out, a.seed);
    rc.module = Some(a.module.to_string());
    rc.inputs = vec![a.records.clone()];
    rc.validate()?;
    let records = read_records(&a.records)?;
    let table = to_table(&records, a.module, a.metric)?;
    let forest = ForestConfig {
        trees: a.trees,
        seed: a.seed,
        ..ForestConfig::default()
    };
    let fitted = RegressionForest::fit(&table, &forest)?;
    let gini = fitted.gini_importance();
    let permutation = fitted.permutation_importance(&table, a.repeats, a.seed)?;
    let importances: Vec<Importance> = table
        .features
        .iter()
        .zip(gini.iter().zip(&permutation))
        .map(|(f, (g, p))| Importance {
            feature: f.name.clone(),
            gini: *g,
            permutation: *p,
        })
        .collect();

    let direction = match a.direction {
        Some(DirectionArg::Minimize) => Direction::Minimize,
        Some(DirectionArg::Maximize) => Direction::Maximize,
        None if a.metric == Metric::SuccessRate => Direction::Maximize,
        None => Direction::Minimize,
    };
    let filter = greedy_filter(
        &table,
        &FilterConfig {
            forest,
            permutation_repeats: a.repeats,
            direction,
            ..FilterConfig::default()
        },
    )?;

    fs::create_dir_all(&a.out)?;
    rc.save(&a.out)?;
    let mut w = csv::Writer::from_path(a.out.join(IMPORTANCES))?;
    for row in &importances {
        w.serialize(row)?;
    }
    w.flush()?;
    fs::write(a.out.join(FILTER_LOG), serde_json::to_vec_pretty(&filter)?)?;
    Ok(AnalyzeSummary {
        records: table.len(),
        importances,
        filter,
    })
}
