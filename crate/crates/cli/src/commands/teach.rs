use std::sync::Arc;

use pnp_core::attention::AttentionConfig;
use pnp_core::geometry::CameraModel;
use pnp_core::numerics::HourglassConfig;
use pnp_core::scene::OBS_CHANNELS;
use pnp_core::transport::{TransportConfig, EMBEDDING_DEPTH};
use pnp_teach::session::{Correction, Source, Status, Target, TestRow};
use pnp_teach::{TeachConfig, Teacher};
use serde::{Deserialize, Serialize};

use crate::args::{ServeArgs, ServiceArgs, TeachArgs};
use crate::error::{usage, CliError, Result};
use crate::run_config::RunConfig;

/// Service configuration from the shared flags.
pub fn teach_config(a: &ServiceArgs) -> Result<TeachConfig> {
    let camera = CameraModel::square(a.camera.workspace, a.camera.pixels);
    let network = |out| HourglassConfig {
        in_channels: OBS_CHANNELS,
        out_channels: out,
        base_channels: a.net.base_channels,
        stages: a.net.stages,
        blocks: a.net.blocks,
    };
    let mut c = TeachConfig::new(&a.data_dir);
    c.attention = AttentionConfig {
        variant: a.attention_variant,
        crop: a.attention_crop,
        network: network(1),
        camera,
    };
    c.transport = TransportConfig {
        variant: a.transport_variant,
        crop: a.transport_crop,
        network: network(EMBEDDING_DEPTH),
        camera,
    };
    let parse_err = |e: pnp_core::Error| usage!("{e}");
    c.attention_train = a.train_method.parse().map_err(parse_err)?;
    c.transport_train = a.train_method.parse().map_err(parse_err)?;
    c.attention_infer = a.attention_infer.parse().map_err(parse_err)?;
    c.transport_infer = a.transport_infer.parse().map_err(parse_err)?;
    c.steps_per_demo = a.steps_per_demo;
    c.learning_rate = a.lr;
    c.seed = a.model_seed;
    c.checkpoints = a.attention_checkpoint.clone().zip(a.transport_checkpoint.clone());
    Ok(c)
}

fn service_run_config(command: &str, a: &ServiceArgs, c: &TeachConfig) -> RunConfig {
    let mut rc = RunConfig::new(command, &a.data_dir, a.model_seed);
    rc.steps = Some(a.steps_per_demo);
    rc.attention_variant = Some(a.attention_variant.to_string());
    rc.transport_variant = Some(a.transport_variant.to_string());
    rc.train_method = Some(c.attention_train.to_string());
    rc.infer_methods = vec![c.attention_infer.to_string(), c.transport_infer.to_string()];
    rc.learning_rate = Some(a.lr);
    rc.camera = Some(c.camera());
    rc.network = Some(c.attention.network);
    rc.inputs = c.checkpoints.iter().flat_map(|(x, y)| [x.clone(), y.clone()]).collect();
    rc
}

fn open(command: &str, a: &ServiceArgs, mutate: impl FnOnce(&mut RunConfig)) -> Result<Teacher> {
    let config = teach_config(a)?;
    let mut rc = service_run_config(command, a, &config);
    mutate(&mut rc);
    rc.validate()?;
    let teacher = Teacher::open(config)?;
    rc.save(&a.data_dir)?;
    Ok(teacher)
}

/// Serves the teaching API until Ctrl-C.
pub fn serve(a: &ServeArgs, on_ready: impl FnOnce(std::net::SocketAddr)) -> Result<()> {
    let teacher = Arc::new(open("serve", &a.service, |_| {})?);
    let rt = tokio::runtime::Runtime::new()?;
    on_ready(a.addr);
    rt.block_on(pnp_teach::http::serve(teacher, a.addr))?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TeachSummary {
    pub status: Status,
    pub test: Vec<TestRow>,
}

/// Runs `demos` teaching cycles that accept every proposal, waiting for
/// each training run. `progress` sees the status after each cycle.
pub fn teach(a: &TeachArgs, mut progress: impl FnMut(&Status)) -> Result<TeachSummary> {
    let teacher = open("teach", &a.service, |rc| {
        rc.task = Some(a.task.to_string());
        rc.demos = Some(a.demos);
        rc.scenes = (a.test_scenes > 0).then_some(a.test_scenes);
    })?;
    let id = teacher.new_session(a.task.clone(), a.seed)?.session_id;
    let accept = |pose| Correction {
        pose,
        source: Source::ProposalAccepted,
    };
    for _ in 0..a.demos {
        let pick = teacher.propose(&id, Target::Pick)?;
        teacher.correct(&id, accept(pick))?;
        let place = teacher.propose(&id, Target::Place)?;
        teacher.correct(&id, accept(place))?;
        teacher.record(&id)?;
        let status = teacher.wait(&id)?;
        if let Some(e) = &status.error {
            return Err(CliError::Format(format!("session {id}: {e}")));
        }
        progress(&status);
    }
    let test = if a.test_scenes > 0 {
        teacher.test(&id, a.test_scenes, a.seed.wrapping_add(1_000_000))?
    } else {
        Vec::new()
    };
    Ok(TeachSummary {
        status: teacher.status(&id)?,
        test,
    })
}
