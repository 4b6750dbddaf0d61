//! Greedy elimination of the worst value of the most influential
//! hyperparameter.

use serde::{Deserialize, Serialize};

use super::forest::{ForestConfig, RegressionForest, Table};
use crate::error::{invalid, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Minimize,
    Maximize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FilterConfig {
    pub forest: ForestConfig,
    pub permutation_repeats: usize,
    /// A feature whose predicted per-value spread is below this fraction
    /// of the surviving targets' standard deviation has no effect.
    pub no_effect_fraction: f64,
    pub direction: Direction,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            forest: ForestConfig::default(),
            permutation_repeats: 5,
            no_effect_fraction: 0.02,
            direction: Direction::Minimize,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ranked {
    pub feature: String,
    pub gini: f64,
    pub permutation: f64,
    /// Mean of both importances, each normalised to sum to one.
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterRound {
    pub round: usize,
    pub survivors_before: usize,
    /// Features that still take more than one value, most important first.
    pub ranking: Vec<Ranked>,
    pub feature: String,
    /// Forest-predicted metric per value of `feature`.
    pub predicted: Vec<(String, f64)>,
    pub spread: f64,
    pub threshold: f64,
    /// `None` when the round ended the search for lack of effect.
    pub eliminated: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    SingleCombination,
    NoEffect,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterOutcome {
    /// Indices of the surviving input rows.
    pub survivors: Vec<usize>,
    /// Remaining values of every feature.
    pub remaining: Vec<(String, Vec<String>)>,
    pub rounds: Vec<FilterRound>,
    pub stop: StopReason,
}

fn normalised(v: &[f64]) -> Vec<f64> {
    let clipped: Vec<f64> = v.iter().map(|x| x.max(0.0)).collect();
    let total: f64 = clipped.iter().sum();
    if total > 0.0 {
        clipped.iter().map(|x| x / total).collect()
    } else {
        vec![0.0; v.len()]
    }
}

fn std_dev(v: &[f64]) -> f64 {
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / v.len() as f64).sqrt()
}

/// Repeatedly fits a forest on the surviving rows, takes the top-ranked
/// feature and drops every row holding its worst predicted value, until a
/// single combination remains or the top feature makes no difference.
pub fn greedy_filter(table: &Table, config: &FilterConfig) -> Result<FilterOutcome> {
    if table.is_empty() {
        return Err(invalid!("no records to filter"));
    }
    let nf = table.features.len();
    if (0..nf).all(|f| table.values(f).len() < 2) {
        return Err(invalid!("records vary in no feature"));
    }
    let mut survivors: Vec<usize> = (0..table.len()).collect();
    let mut rounds = Vec::new();
    let stop = loop {
        let current = table.subset(&survivors);
        let varying: Vec<usize> = (0..nf).filter(|&f| current.values(f).len() > 1).collect();
        if varying.is_empty() {
            break StopReason::SingleCombination;
        }
        let mut forest_cfg = config.forest;
        forest_cfg.seed = config.forest.seed.wrapping_add(rounds.len() as u64);
        let forest = RegressionForest::fit(&current, &forest_cfg)?;
        let gini = forest.gini_importance();
        let perm = forest.permutation_importance(&current, config.permutation_repeats, forest_cfg.seed)?;
        let (gn, pn) = (normalised(&gini), normalised(&perm));
        let mut ranking: Vec<(usize, Ranked)> = varying
            .iter()
            .map(|&f| {
                (
                    f,
                    Ranked {
                        feature: table.features[f].name.clone(),
                        gini: gini[f],
                        permutation: perm[f],
                        score: 0.5 * (gn[f] + pn[f]),
                    },
                )
            })
            .collect();
        ranking.sort_by(|a, b| b.1.score.total_cmp(&a.1.score).then(a.0.cmp(&b.0)));
        let top = ranking[0].0;
        let feature = &table.features[top];
        let predicted: Vec<(f64, f64)> = current
            .values(top)
            .into_iter()
            .map(|v| (v, forest.partial_dependence(&current, top, v)))
            .collect();
        let lo = predicted.iter().map(|p| p.1).fold(f64::INFINITY, f64::min);
        let hi = predicted.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
        let spread = hi - lo;
        let threshold = config.no_effect_fraction * std_dev(&current.target);
        let mut round = FilterRound {
            round: rounds.len(),
            survivors_before: survivors.len(),
            ranking: ranking.into_iter().map(|r| r.1).collect(),
            feature: feature.name.clone(),
            predicted: predicted.iter().map(|(v, p)| (feature.label(*v), *p)).collect(),
            spread,
            threshold,
            eliminated: None,
        };
        if spread <= threshold {
            rounds.push(round);
            break StopReason::NoEffect;
        }
        let worst = match config.direction {
            Direction::Minimize => predicted.iter().max_by(|a, b| a.1.total_cmp(&b.1)),
            Direction::Maximize => predicted.iter().min_by(|a, b| a.1.total_cmp(&b.1)),
        }
        .map(|p| p.0)
        .expect("a varying feature has values");
        round.eliminated = Some(feature.label(worst));
        rounds.push(round);
        survivors.retain(|&i| table.rows[i][top] != worst);
        if survivors.is_empty() {
            return Err(invalid!("filtering left no records"));
        }
    };
    let last = table.subset(&survivors);
    let remaining = (0..nf)
        .map(|f| {
            let feat = &table.features[f];
            (
                feat.name.clone(),
                last.values(f).iter().map(|v| feat.label(*v)).collect(),
            )
        })
        .collect();
    Ok(FilterOutcome {
        survivors,
        remaining,
        rounds,
        stop,
    })
}
