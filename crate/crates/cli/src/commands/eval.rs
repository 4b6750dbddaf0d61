use std::fs;
use std::path::{Path, PathBuf};

use pnp_core::analysis::{append_records, EvalRecord, Module, NOT_APPLICABLE};
use pnp_core::attention::{AttentionInferMethod, AttentionModel};
use pnp_core::eval::{evaluate, EvalReport, Evaluated};
use pnp_core::nets::checkpoint_paths;
use pnp_core::transport::{TransportInferMethod, TransportModel};

use crate::args::EvalArgs;
use crate::error::{usage, CliError, Result};
use crate::run_config::{RunConfig, RUN_CONFIG};

const ATTENTION_DEFAULTS: [&str; 4] = ["discrete", "iter:3:6:2", "iter:3:6:4", "iter:3:6:6"];
const TRANSPORT_DEFAULTS: [&str; 4] = ["discrete", "iter:3:12:2", "iter:3:12:4", "iter:3:12:6"];

/// File name of the report for checkpoint number `index` and `method`.
pub fn report_name(index: usize, stem: &Path, method: &str) -> String {
    let name = stem
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    format!("{index:02}-{name}--{}.json", method.replace(':', "_"))
}

fn strip_suffix(path: &Path) -> PathBuf {
    match path.extension().and_then(|e| e.to_str()) {
        Some("json" | "pnpw") => path.with_extension(""),
        _ => path.to_path_buf(),
    }
}

fn sidecar_module(stem: &Path) -> Result<String> {
    let path = checkpoint_paths(stem).1;
    let raw = fs::read(&path).map_err(|e| CliError::Format(format!("{}: {e}", path.display())))?;
    let v: serde_json::Value = serde_json::from_slice(&raw)?;
    v.get("module")
        .and_then(|m| m.as_str())
        .map(str::to_string)
        .ok_or_else(|| CliError::Format(format!("{} names no module", path.display())))
}

fn demos_for(a: &EvalArgs, stem: &Path) -> Result<u64> {
    if let Some(d) = a.demos {
        return Ok(d);
    }
    let dir = stem.parent().unwrap_or(Path::new("."));
    if dir.join(RUN_CONFIG).exists() {
        if let Some(d) = RunConfig::load(dir)?.demos {
            return Ok(d);
        }
    }
    Err(usage!("no training run config beside {}; pass --demos", stem.display()))
}

fn methods<'a>(a: &'a EvalArgs, defaults: &'a [&'a str]) -> Vec<&'a str> {
    if a.infer_methods.is_empty() {
        defaults.to_vec()
    } else {
        a.infer_methods.iter().map(String::as_str).collect()
    }
}

/// Evaluates each checkpoint with each inference method, writes one report
/// per pair and appends one record per report. Returns the report paths.
pub fn eval(a: &EvalArgs) -> Result<Vec<PathBuf>> {
    let records_path = a.records.clone().unwrap_or_else(|| a.out.join("records.csv"));
    let stems: Vec<PathBuf> = a.checkpoints.iter().map(|p| strip_suffix(p)).collect();
    let mut rc = RunConfig::new("eval", &a.out, a.seed);
    rc.task = Some(a.task.to_string());
    rc.scenes = Some(a.scenes);
    rc.infer_methods = a.infer_methods.clone();
    rc.inputs = stems.clone();
    rc.records = Some(records_path.clone());
    rc.validate()?;
    fs::create_dir_all(&a.out)?;
    rc.save(&a.out)?;

    let mut reports = Vec::new();
    let mut records = Vec::new();
    for (i, stem) in stems.iter().enumerate() {
        let model_id = stem.display().to_string();
        let demos = demos_for(a, stem)?;
        let mut evaluated: Vec<(String, EvalReport, EvalRecord)> = Vec::new();
        match sidecar_module(stem)?.as_str() {
            "attention" => {
                let (model, meta) = AttentionModel::load(stem)?;
                if let Some(v) = a.attention_variant.filter(|v| *v != model.config.variant) {
                    return Err(usage!(
                        "{} is variant {}, expected {v}",
                        stem.display(),
                        model.config.variant
                    ));
                }
                let train = meta
                    .train_method
                    .ok_or_else(|| usage!("{} records no training method", stem.display()))?;
                for m in methods(a, &ATTENTION_DEFAULTS) {
                    let method: AttentionInferMethod = m.parse().map_err(|e| usage!("{e}"))?;
                    let report = evaluate(
                        Evaluated {
                            attention: Some((&model, &method)),
                            transport: None,
                        },
                        &model_id,
                        &a.task,
                        a.scenes,
                        a.seed,
                    )?;
                    let err = report.means.attention.expect("attention was evaluated");
                    let record = EvalRecord {
                        task: a.task.to_string(),
                        demos,
                        steps: meta.steps,
                        module: Module::Attention,
                        attention_variant: model.config.variant.to_string(),
                        transport_variant: NOT_APPLICABLE.into(),
                        train_method: train.clone(),
                        infer_method: method.to_string(),
                        rotation_deg: err.rotation,
                        translation_cm: err.translation,
                        success_rate: None,
                        model_id: model_id.clone(),
                    };
                    evaluated.push((method.to_string(), report, record));
                }
            }
            "transport" => {
                let (model, meta) = TransportModel::load(stem)?;
                if let Some(v) = a.transport_variant.filter(|v| *v != model.config.variant) {
                    return Err(usage!(
                        "{} is variant {}, expected {v}",
                        stem.display(),
                        model.config.variant
                    ));
                }
                let train = meta
                    .train_method
                    .ok_or_else(|| usage!("{} records no training method", stem.display()))?;
                for m in methods(a, &TRANSPORT_DEFAULTS) {
                    let method: TransportInferMethod = m.parse().map_err(|e| usage!("{e}"))?;
                    let report = evaluate(
                        Evaluated {
                            attention: None,
                            transport: Some((&model, &method)),
                        },
                        &model_id,
                        &a.task,
                        a.scenes,
                        a.seed,
                    )?;
                    let err = report.means.transport.expect("transport was evaluated");
                    let record = EvalRecord {
                        task: a.task.to_string(),
                        demos,
                        steps: meta.steps,
                        module: Module::Transport,
                        attention_variant: NOT_APPLICABLE.into(),
                        transport_variant: model.config.variant.to_string(),
                        train_method: train.clone(),
                        infer_method: method.to_string(),
                        rotation_deg: err.rotation,
                        translation_cm: err.translation,
                        success_rate: None,
                        model_id: model_id.clone(),
                    };
                    evaluated.push((method.to_string(), report, record));
                }
            }
            other => {
                return Err(CliError::Format(format!(
                    "{}: unknown module '{other}'",
                    stem.display()
                )))
            }
        }
        for (method, report, record) in evaluated {
            let path = a.out.join(report_name(i, stem, &method));
            fs::write(&path, serde_json::to_vec_pretty(&report)?)?;
            reports.push(path);
            records.push(record);
        }
    }
    append_records(&records_path, &records)?;
    Ok(reports)
}
