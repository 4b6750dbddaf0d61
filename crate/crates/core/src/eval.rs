//! Batch evaluation of trained modules over freshly sampled scenes.

use serde::{Deserialize, Serialize};

use crate::attention::{AttentionInferMethod, AttentionModel};
use crate::error::{invalid, Result};
use crate::geometry::{CameraModel, PoseSE2};
use crate::metrics::{attention_error, is_success, object_pose_error, transport_error, ErrorPair};
use crate::scene::{kinematic_execute, oracle, render, sample_scene_in, Scene, Task};
use crate::transport::{TransportInferMethod, TransportModel};

/// Mixed into the scene seed for the oracle's own draws, as in
/// [`crate::scene::demonstrations`].
const ORACLE_SALT: u64 = 0x9e37_79b9_7f4a_7c15;

/// Outcome of running both modules end to end on one scene state.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Execution {
    pub error: ErrorPair,
    pub grasped: bool,
    pub success: bool,
}

/// Symmetry-aware error of the object moved by the inferred pick and
/// place. A missed grasp is charged [`ErrorPair::sentinel`].
pub fn task_execution_error(
    attention: &AttentionModel,
    transport: &TransportModel,
    methods: (&AttentionInferMethod, &TransportInferMethod),
    scene: &Scene,
) -> Result<Execution> {
    let cam = shared_camera(Some(attention), Some(transport))?;
    let obs = render(scene, &cam);
    let pick = attention.infer(&obs, methods.0)?;
    let place = transport.infer(&obs, &pick, methods.1)?;
    execute(scene, &pick, &place)
}

/// Carries out `pick` and `place` on a copy of `scene` and scores the result.
pub fn execute(scene: &Scene, pick: &PoseSE2, place: &PoseSE2) -> Result<Execution> {
    let mut after = scene.clone();
    let out = kinematic_execute(&mut after, pick, place);
    let (Some(object), Some(pose)) = (out.object, out.final_pose) else {
        return Ok(Execution {
            error: ErrorPair::sentinel(scene.workspace),
            grasped: false,
            success: false,
        });
    };
    let error = object_pose_error(&after, object, &pose)?;
    Ok(Execution {
        error,
        grasped: true,
        success: is_success(true, &error),
    })
}

/// Modules under evaluation and the inference method for each. Either may
/// be absent; execution errors need both.
#[derive(Clone, Copy, Default)]
pub struct Evaluated<'a> {
    pub attention: Option<(&'a AttentionModel, &'a AttentionInferMethod)>,
    pub transport: Option<(&'a TransportModel, &'a TransportInferMethod)>,
}

/// Errors on one scene state: `step` counts the oracle actions already
/// applied (always 0 for insertion).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneEval {
    pub seed: u64,
    pub step: usize,
    pub attention: Option<ErrorPair>,
    pub transport: Option<ErrorPair>,
    pub execution: Option<Execution>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Means {
    pub attention: Option<ErrorPair>,
    pub transport: Option<ErrorPair>,
    pub execution: Option<ErrorPair>,
    pub success_rate: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: Task,
    pub model_id: String,
    pub attention_method: Option<String>,
    pub transport_method: Option<String>,
    pub seeds: Vec<u64>,
    pub scenes: Vec<SceneEval>,
    pub means: Means,
    /// Error charged to a missed grasp during execution.
    pub sentinel: ErrorPair,
}

fn shared_camera(attention: Option<&AttentionModel>, transport: Option<&TransportModel>) -> Result<CameraModel> {
    match (attention.map(|m| m.config.camera), transport.map(|m| m.config.camera)) {
        (Some(a), Some(t)) if a != t => Err(invalid!("attention and transport were trained on different cameras")),
        (Some(c), _) | (None, Some(c)) => Ok(c),
        (None, None) => Err(invalid!("nothing to evaluate")),
    }
}

fn mean_pair(pairs: impl Iterator<Item = ErrorPair>) -> Option<ErrorPair> {
    let (mut n, mut r, mut t) = (0usize, 0.0, 0.0);
    for p in pairs {
        n += 1;
        r += p.rotation;
        t += p.translation;
    }
    (n > 0).then(|| ErrorPair {
        rotation: r / n as f64,
        translation: t / n as f64,
    })
}

impl Means {
    pub fn of(scenes: &[SceneEval]) -> Self {
        let execs: Vec<&Execution> = scenes.iter().filter_map(|s| s.execution.as_ref()).collect();
        Self {
            attention: mean_pair(scenes.iter().filter_map(|s| s.attention)),
            transport: mean_pair(scenes.iter().filter_map(|s| s.transport)),
            execution: mean_pair(execs.iter().map(|e| e.error)),
            success_rate: (!execs.is_empty())
                .then(|| execs.iter().filter(|e| e.success).count() as f64 / execs.len() as f64),
        }
    }
}

/// Scene seeds used by [`evaluate`].
pub fn scene_seeds(n_scenes: usize, seed: u64) -> Vec<u64> {
    (0..n_scenes as u64).map(|i| seed.wrapping_add(i)).collect()
}

/// Evaluates `models` on `n_scenes` scenes of `task` sampled from
/// consecutive seeds starting at `seed`. Every oracle step of a scene is
/// scored; attention against the scene's grasps, transport from the
/// ground-truth pick, and execution from the attention's own pick.
pub fn evaluate(models: Evaluated, model_id: &str, task: &Task, n_scenes: usize, seed: u64) -> Result<EvalReport> {
    if n_scenes == 0 {
        return Err(invalid!("evaluation needs at least one scene"));
    }
    let cam = shared_camera(models.attention.map(|m| m.0), models.transport.map(|m| m.0))?;
    let seeds = scene_seeds(n_scenes, seed);
    let mut scenes = Vec::new();
    let mut workspace = cam.bounds();
    for &s in &seeds {
        let mut scene = sample_scene_in(task, s, cam.bounds())?;
        workspace = scene.workspace;
        let actions = oracle(&scene, s ^ ORACLE_SALT)?;
        for (step, (gt_pick, gt_place)) in actions.into_iter().enumerate() {
            let obs = render(&scene, &cam);
            let mut row = SceneEval {
                seed: s,
                step,
                attention: None,
                transport: None,
                execution: None,
            };
            let mut pick = None;
            if let Some((model, method)) = models.attention {
                let p = model.infer(&obs, method)?;
                row.attention = Some(attention_error(&p, &scene)?);
                pick = Some(p);
            }
            if let Some((model, method)) = models.transport {
                let place = model.infer(&obs, &gt_pick, method)?;
                row.transport = Some(transport_error(&place, &gt_pick, &scene)?);
                if let Some(p) = pick {
                    let place = model.infer(&obs, &p, method)?;
                    row.execution = Some(execute(&scene, &p, &place)?);
                }
            }
            scenes.push(row);
            kinematic_execute(&mut scene, &gt_pick, &gt_place);
        }
    }
    Ok(EvalReport {
        task: task.clone(),
        model_id: model_id.to_string(),
        attention_method: models.attention.map(|m| m.1.to_string()),
        transport_method: models.transport.map(|m| m.1.to_string()),
        seeds,
        means: Means::of(&scenes),
        scenes,
        sentinel: ErrorPair::sentinel(workspace),
    })
}
