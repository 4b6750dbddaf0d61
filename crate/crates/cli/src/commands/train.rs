use std::fs::{self, OpenOptions};
use std::path::{Path, PathBuf};

use pnp_core::attention::{AttentionConfig, AttentionModel, AttentionTrainMethod};
use pnp_core::nets::{checkpoint_paths, Optimizer};
use pnp_core::numerics::HourglassConfig;
use pnp_core::scene::{load_dataset, Demonstration, Task, OBS_CHANNELS};
use pnp_core::training::{train_attention, train_transport};
use pnp_core::transport::{TransportConfig, TransportModel, TransportTrainMethod, EMBEDDING_DEPTH};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::args::{ModuleArg, TrainArgs};
use crate::error::{usage, CliError, Result};
use crate::run_config::{RunConfig, RUN_CONFIG};

pub const LOSS_LOG: &str = "loss.csv";
pub const FINAL: &str = "final";

/// Checkpoint stem of the snapshot taken after `step` updates.
pub fn snapshot_name(step: u64) -> String {
    format!("step-{step:08}")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    /// Snapshot the run continued from, if any.
    pub resumed_from: Option<u64>,
    pub steps_run: u64,
    pub checkpoints: Vec<PathBuf>,
}

#[derive(Debug, Serialize, Deserialize)]
struct LossRow {
    step: u64,
    loss: f64,
    position: Option<f64>,
    rotation: Option<f64>,
}

enum Model {
    Attention(AttentionModel, AttentionTrainMethod),
    Transport(TransportModel, TransportTrainMethod),
}

impl Model {
    fn save(&self, stem: &Path, steps: u64) -> Result<()> {
        match self {
            Model::Attention(m, t) => m.save(stem, Some(t), steps)?,
            Model::Transport(m, t) => m.save(stem, Some(t), steps)?,
        }
        Ok(())
    }
}

fn demos_in(task: &Task, samples: usize) -> u64 {
    let per_demo = match task {
        Task::Kits | Task::KitsTest => 5,
        Task::Insertion(_) => 1,
    };
    (samples / per_demo) as u64
}

/// Latest snapshot at or below `limit` in `out`.
fn latest_snapshot(out: &Path, limit: u64) -> Option<u64> {
    fs::read_dir(out)
        .ok()?
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            let name = e.file_name().to_string_lossy().into_owned();
            name.strip_prefix("step-")?.strip_suffix(".json")?.parse::<u64>().ok()
        })
        .filter(|s| *s <= limit && checkpoint_paths(&out.join(snapshot_name(*s))).0.exists())
        .max()
}

fn read_losses(path: &Path, upto: u64) -> Result<Vec<LossRow>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let mut rd = csv::Reader::from_path(path)?;
    let mut rows = Vec::new();
    for r in rd.deserialize() {
        let r: LossRow = r?;
        if r.step <= upto {
            rows.push(r);
        }
    }
    Ok(rows)
}

/// Trains one module on a dataset. Rerunning into the same `out` resumes
/// from the latest snapshot with fresh optimiser state.
pub fn train(a: &TrainArgs) -> Result<TrainSummary> {
    let (manifest, data) =
        load_dataset(&a.dataset).map_err(|e| CliError::Format(format!("dataset {}: {e}", a.dataset.display())))?;
    if data.is_empty() {
        return Err(usage!("dataset {} is empty", a.dataset.display()));
    }
    let camera = manifest.camera;
    let mut rc = RunConfig::new("train", &a.out, a.seed);
    rc.task = Some(manifest.task.to_string());
    rc.demos = Some(demos_in(&manifest.task, data.len()));
    rc.steps = Some(a.steps);
    rc.snapshots = a.snapshots.clone();
    rc.learning_rate = Some(a.lr);
    rc.camera = Some(camera);
    rc.inputs = vec![a.dataset.clone()];

    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let mut model = match a.module {
        ModuleArg::Attention => {
            let method: AttentionTrainMethod = a.train_method.parse().map_err(|e| usage!("{e}"))?;
            let config = AttentionConfig {
                variant: a.attention_variant,
                crop: a.crop.unwrap_or(AttentionConfig::default().crop),
                network: network(a, 1),
                camera,
            };
            config.validate().map_err(|e| usage!("{e}"))?;
            rc.module = Some("attention".into());
            rc.attention_variant = Some(a.attention_variant.to_string());
            rc.train_method = Some(method.to_string());
            rc.network = Some(config.network);
            rc.crop = Some(config.crop);
            Model::Attention(AttentionModel::new(config, &mut rng)?, method)
        }
        ModuleArg::Transport => {
            let method: TransportTrainMethod = a.train_method.parse().map_err(|e| usage!("{e}"))?;
            let config = TransportConfig {
                variant: a.transport_variant,
                crop: a.crop.unwrap_or(TransportConfig::default().crop),
                network: network(a, EMBEDDING_DEPTH),
                camera,
            };
            config.validate().map_err(|e| usage!("{e}"))?;
            rc.module = Some("transport".into());
            rc.transport_variant = Some(a.transport_variant.to_string());
            rc.train_method = Some(method.to_string());
            rc.network = Some(config.network);
            rc.crop = Some(config.crop);
            Model::Transport(TransportModel::new(config, &mut rng)?, method)
        }
    };
    rc.validate()?;

    let mut start = 0;
    if a.out.join(RUN_CONFIG).exists() {
        let prev = RunConfig::load(&a.out)?;
        let comparable = |r: &RunConfig| RunConfig {
            steps: None,
            snapshots: Vec::new(),
            ..r.clone()
        };
        if comparable(&prev) != comparable(&rc) {
            return Err(usage!(
                "{} holds a run with different settings; choose another --out",
                a.out.display()
            ));
        }
        if let Some(step) = latest_snapshot(&a.out, a.steps) {
            let stem = a.out.join(snapshot_name(step));
            model = match model {
                Model::Attention(_, t) => Model::Attention(AttentionModel::load(&stem)?.0, t),
                Model::Transport(_, t) => Model::Transport(TransportModel::load(&stem)?.0, t),
            };
            start = step;
        }
    }
    rc.save(&a.out)?;

    let log_path = a.out.join(LOSS_LOG);
    let kept = read_losses(&log_path, start)?;
    {
        let mut w = csv::Writer::from_path(&log_path)?;
        for r in &kept {
            w.serialize(r)?;
        }
        w.flush()?;
    }
    let file = OpenOptions::new().append(true).open(&log_path)?;
    let mut log = csv::WriterBuilder::new()
        .has_headers(fs::metadata(&log_path)?.len() == 0)
        .from_writer(file);

    let mut opt = Optimizer::new(a.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed ^ start.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    let mut step = start;
    let mut checkpoints = Vec::new();
    let mut boundaries: Vec<u64> = a.snapshots.iter().copied().filter(|s| *s > start).collect();
    if boundaries.last() != Some(&a.steps) {
        boundaries.push(a.steps);
    }
    for target in boundaries {
        let n = target.saturating_sub(step);
        let mut failure = None;
        run_segment(&mut model, &mut opt, &data, n, &mut rng, |row| {
            step += 1;
            if failure.is_none() {
                failure = log.serialize(LossRow { step, ..row }).err();
            }
        })?;
        if let Some(e) = failure {
            return Err(e.into());
        }
        log.flush()?;
        if a.snapshots.contains(&target) {
            let stem = a.out.join(snapshot_name(target));
            model.save(&stem, target)?;
            checkpoints.push(stem);
        }
    }
    let stem = a.out.join(FINAL);
    model.save(&stem, step)?;
    checkpoints.push(stem);
    Ok(TrainSummary {
        resumed_from: (start > 0).then_some(start),
        steps_run: step - start,
        checkpoints,
    })
}

fn network(a: &TrainArgs, out: usize) -> HourglassConfig {
    HourglassConfig {
        in_channels: OBS_CHANNELS,
        out_channels: out,
        base_channels: a.net.base_channels,
        stages: a.net.stages,
        blocks: a.net.blocks,
    }
}

fn run_segment(
    model: &mut Model,
    opt: &mut Optimizer,
    data: &[Demonstration],
    steps: u64,
    rng: &mut ChaCha8Rng,
    mut row: impl FnMut(LossRow),
) -> Result<()> {
    match model {
        Model::Attention(m, t) => train_attention(m, opt, data, t, steps, rng, |_, l| {
            row(LossRow {
                step: 0,
                loss: l.position + l.rotation,
                position: Some(l.position),
                rotation: Some(l.rotation),
            })
        })?,
        Model::Transport(m, t) => train_transport(m, opt, data, t, steps, rng, |_, l| {
            row(LossRow {
                step: 0,
                loss: l,
                position: None,
                rotation: None,
            })
        })?,
    }
    Ok(())
}
