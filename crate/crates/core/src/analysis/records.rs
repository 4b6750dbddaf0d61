//! Evaluation records: one CSV row per evaluated module, holding its
//! hyperparameters and mean errors.

use std::fmt;
use std::fs::OpenOptions;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::forest::{Feature, FeatureKind, Table};
use crate::attention::{AttentionInferMethod, AttentionTrainMethod, AttentionVariant};
use crate::error::{invalid, Error, Result};
use crate::scene::Task;
use crate::transport::{TransportInferMethod, TransportTrainMethod, TransportVariant};

/// Placeholder for a variant the record's module does not use.
pub const NOT_APPLICABLE: &str = "-";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Module {
    Attention,
    Transport,
    /// Attention and transport run end to end. Method fields join the two
    /// modules' methods with `+`.
    Execution,
}

impl fmt::Display for Module {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Module::Attention => "attention",
            Module::Transport => "transport",
            Module::Execution => "execution",
        })
    }
}

impl FromStr for Module {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "attention" => Ok(Self::Attention),
            "transport" => Ok(Self::Transport),
            "execution" => Ok(Self::Execution),
            _ => Err(invalid!("unknown module '{s}'")),
        }
    }
}

/// Metric columns of a record.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    RotationDeg,
    TranslationCm,
    SuccessRate,
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rotation_deg" | "rotation" => Ok(Self::RotationDeg),
            "translation_cm" | "translation" => Ok(Self::TranslationCm),
            "success_rate" | "success" => Ok(Self::SuccessRate),
            _ => Err(invalid!("unknown metric '{s}'")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub task: String,
    pub demos: u64,
    pub steps: u64,
    pub module: Module,
    pub attention_variant: String,
    pub transport_variant: String,
    pub train_method: String,
    pub infer_method: String,
    pub rotation_deg: f64,
    pub translation_cm: f64,
    pub success_rate: Option<f64>,
    pub model_id: String,
}

fn check_variant<T: FromStr>(value: &str, used: bool, what: &str) -> Result<()> {
    match (used, value == NOT_APPLICABLE) {
        (false, true) => Ok(()),
        (true, false) if value.parse::<T>().is_ok() => Ok(()),
        _ => Err(invalid!("unexpected {what} variant '{value}'")),
    }
}

fn check_method<A: FromStr, T: FromStr>(value: &str, module: Module, what: &str) -> Result<()> {
    let ok = match module {
        Module::Attention => value.parse::<A>().is_ok(),
        Module::Transport => value.parse::<T>().is_ok(),
        Module::Execution => value
            .split_once('+')
            .is_some_and(|(a, t)| a.parse::<A>().is_ok() && t.parse::<T>().is_ok()),
    };
    if ok {
        Ok(())
    } else {
        Err(invalid!("unknown {what} method '{value}' for {module}"))
    }
}

impl EvalRecord {
    /// Rejects unknown categories and non-finite metrics.
    pub fn validate(&self) -> Result<()> {
        self.task.parse::<Task>()?;
        let (att, tr) = match self.module {
            Module::Attention => (true, false),
            Module::Transport => (false, true),
            Module::Execution => (true, true),
        };
        check_variant::<AttentionVariant>(&self.attention_variant, att, "attention")?;
        check_variant::<TransportVariant>(&self.transport_variant, tr, "transport")?;
        check_method::<AttentionTrainMethod, TransportTrainMethod>(&self.train_method, self.module, "training")?;
        check_method::<AttentionInferMethod, TransportInferMethod>(&self.infer_method, self.module, "inference")?;
        if !self.rotation_deg.is_finite() || !self.translation_cm.is_finite() {
            return Err(invalid!("record metrics must be finite"));
        }
        if self.success_rate.is_some_and(|s| !(0.0..=1.0).contains(&s)) {
            return Err(invalid!("success rate must lie in [0, 1]"));
        }
        Ok(())
    }

    pub fn metric(&self, m: Metric) -> Option<f64> {
        match m {
            Metric::RotationDeg => Some(self.rotation_deg),
            Metric::TranslationCm => Some(self.translation_cm),
            Metric::SuccessRate => self.success_rate,
        }
    }
}

/// Appends `records` to the CSV at `path`, writing the header if the file
/// is new or empty.
pub fn append_records(path: &Path, records: &[EvalRecord]) -> Result<()> {
    for r in records {
        r.validate()?;
    }
    let fresh = std::fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
    let file = OpenOptions::new().create(true).append(true).open(path)?;
    let mut w = csv::WriterBuilder::new().has_headers(fresh).from_writer(file);
    for r in records {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_records(path: &Path) -> Result<Vec<EvalRecord>> {
    let mut rd = csv::Reader::from_path(path).map_err(csv_err)?;
    let mut out = Vec::new();
    for (i, row) in rd.deserialize().enumerate() {
        let r: EvalRecord = row.map_err(|e| Error::Format(format!("{} row {}: {e}", path.display(), i + 1)))?;
        r.validate()
            .map_err(|e| Error::Format(format!("{} row {}: {e}", path.display(), i + 1)))?;
        out.push(r);
    }
    Ok(out)
}

fn csv_err(e: csv::Error) -> Error {
    Error::Format(e.to_string())
}

/// Hyperparameter columns used as forest features, in table order.
pub const FEATURES: [&str; 7] = [
    "task",
    "demos",
    "steps",
    "attention_variant",
    "transport_variant",
    "train_method",
    "infer_method",
];

/// Feature table of the `module` records that carry `metric`. Numeric
/// columns are `demos` and `steps`; every other column is categorical with
/// levels in sorted order.
pub fn to_table(records: &[EvalRecord], module: Module, metric: Metric) -> Result<Table> {
    let chosen: Vec<&EvalRecord> = records
        .iter()
        .filter(|r| r.module == module && r.metric(metric).is_some())
        .collect();
    if chosen.is_empty() {
        return Err(invalid!("no {module} records carry the requested metric"));
    }
    let text = |r: &EvalRecord, f: usize| -> String {
        match f {
            0 => r.task.clone(),
            3 => r.attention_variant.clone(),
            4 => r.transport_variant.clone(),
            5 => r.train_method.clone(),
            _ => r.infer_method.clone(),
        }
    };
    let features: Vec<Feature> = FEATURES
        .iter()
        .enumerate()
        .map(|(f, name)| match f {
            1 | 2 => Feature::numeric(name),
            _ => {
                let mut levels: Vec<String> = chosen.iter().map(|r| text(r, f)).collect();
                levels.sort();
                levels.dedup();
                Feature {
                    name: name.to_string(),
                    kind: FeatureKind::Categorical { levels },
                }
            }
        })
        .collect();
    let rows = chosen
        .iter()
        .map(|r| {
            features
                .iter()
                .enumerate()
                .map(|(f, feat)| match (&feat.kind, f) {
                    (_, 1) => r.demos as f64,
                    (_, 2) => r.steps as f64,
                    (FeatureKind::Categorical { levels }, _) => {
                        let t = text(r, f);
                        levels.iter().position(|l| *l == t).expect("level collected above") as f64
                    }
                    (FeatureKind::Numeric, _) => unreachable!("only demos and steps are numeric"),
                })
                .collect()
        })
        .collect();
    let target = chosen
        .iter()
        .map(|r| r.metric(metric).expect("filtered above"))
        .collect();
    Table::new(features, rows, target)
}
