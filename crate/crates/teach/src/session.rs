//! Teaching sessions: a scene, pose proposals and corrections, the growing
//! dataset and incremental training in the background.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, MutexGuard, RwLock};
use std::thread::JoinHandle;

use pnp_core::attention::{AttentionConfig, AttentionInferMethod, AttentionModel, AttentionTrainMethod};
use pnp_core::eval::{evaluate, execute, Evaluated};
use pnp_core::geometry::{CameraModel, PoseSE2};
use pnp_core::metrics::ErrorPair;
use pnp_core::nets::Optimizer;
use pnp_core::numerics::Grid;
use pnp_core::scene::{append_to_dataset, load_dataset, render, sample_scene_in, Demonstration, Scene, Task};
use pnp_core::training::{train_attention, train_transport};
use pnp_core::transport::{TransportConfig, TransportInferMethod, TransportModel, TransportTrainMethod};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, TeachError};

const STATE_FILE: &str = "session.json";
const DATASET_DIR: &str = "dataset";
const ATTENTION_STEM: &str = "attention";
const TRANSPORT_STEM: &str = "transport";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Idle,
    AwaitPick,
    AwaitPlace,
    Training,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::Idle => "idle",
            Phase::AwaitPick => "await_pick",
            Phase::AwaitPlace => "await_place",
            Phase::Training => "training",
        })
    }
}

/// Which pose a proposal is for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Target {
    #[serde(alias = "await_pick")]
    Pick,
    #[serde(alias = "await_place")]
    Place,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    ProposalAccepted,
    UserAdjusted,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Correction {
    pub pose: PoseSE2,
    pub source: Source,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TeachConfig {
    pub data_dir: PathBuf,
    pub attention: AttentionConfig,
    pub transport: TransportConfig,
    pub attention_train: AttentionTrainMethod,
    pub transport_train: TransportTrainMethod,
    pub attention_infer: AttentionInferMethod,
    pub transport_infer: TransportInferMethod,
    /// Update steps given to each module after every recorded sample.
    pub steps_per_demo: u64,
    pub learning_rate: f64,
    /// Seeds model initialisation and training draws.
    pub seed: u64,
    /// Attention and transport checkpoint stems to start the first
    /// session from instead of random weights.
    pub checkpoints: Option<(PathBuf, PathBuf)>,
}

impl TeachConfig {
    pub fn new(data_dir: impl Into<PathBuf>) -> Self {
        Self {
            data_dir: data_dir.into(),
            attention: AttentionConfig::default(),
            transport: TransportConfig::default(),
            attention_train: AttentionTrainMethod::DISCRETE,
            transport_train: TransportTrainMethod::EXACT,
            attention_infer: AttentionInferMethod::iterative(3, 6, 4.0).expect("valid schedule"),
            transport_infer: TransportInferMethod::iterative(3, 12, 4.0).expect("valid schedule"),
            steps_per_demo: 500,
            learning_rate: pnp_core::nets::DEFAULT_LR,
            seed: 0,
            checkpoints: None,
        }
    }

    pub fn camera(&self) -> CameraModel {
        self.attention.camera
    }

    fn validate(&self) -> Result<()> {
        self.attention.validate()?;
        self.transport.validate()?;
        self.attention_infer.validate()?;
        self.transport_infer.validate()?;
        self.attention_train.validate()?;
        self.transport_train.validate()?;
        if self.attention.camera != self.transport.camera {
            return Err(TeachError::BadRequest(
                "attention and transport must share a camera".into(),
            ));
        }
        if !(self.learning_rate > 0.0) {
            return Err(TeachError::BadRequest("learning rate must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Steps {
    pub attention: u64,
    pub transport: u64,
}

/// Most recent training losses.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Losses {
    pub attention_position: Option<f64>,
    pub attention_rotation: Option<f64>,
    pub transport: Option<f64>,
}

/// Everything about a session that survives a restart. The scene itself
/// is regenerated from `seed` and `scene_index`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Status {
    pub session_id: String,
    pub task: Task,
    pub seed: u64,
    pub scene_index: u64,
    pub phase: Phase,
    pub step: Steps,
    pub losses: Losses,
    pub dataset_size: usize,
    pub proposed_pick: Option<PoseSE2>,
    pub proposed_place: Option<PoseSE2>,
    pub corrected_pick: Option<Correction>,
    pub corrected_place: Option<Correction>,
    /// Set when the last training run failed.
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecReport {
    pub pick: PoseSE2,
    pub place: PoseSE2,
    pub grasped: bool,
    pub success: bool,
    pub error: ErrorPair,
}

/// One line of a success-rate table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestRow {
    pub model: String,
    pub scenes: usize,
    pub successes: usize,
    pub success_rate: f64,
    pub mean_error: ErrorPair,
}

#[derive(Debug, Clone)]
struct Models {
    attention: AttentionModel,
    transport: TransportModel,
    attention_opt: Optimizer,
    transport_opt: Optimizer,
}

struct Live {
    status: Status,
    scene: Scene,
    observation: Grid,
}

struct Session {
    dir: PathBuf,
    live: Mutex<Live>,
    models: Mutex<Models>,
    data: Mutex<Vec<Demonstration>>,
    worker: Mutex<Option<JoinHandle<()>>>,
}

fn lock<T>(m: &Mutex<T>) -> MutexGuard<'_, T> {
    m.lock().unwrap_or_else(|e| e.into_inner())
}

fn scene_seed(seed: u64, index: u64) -> u64 {
    seed.wrapping_mul(1_000_003).wrapping_add(index)
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(tmp, path)?;
    Ok(())
}

impl Session {
    fn persist(&self, status: &Status) -> Result<()> {
        let bytes = serde_json::to_vec_pretty(status).map_err(pnp_core::Error::from)?;
        write_atomic(&self.dir.join(STATE_FILE), &bytes)
    }

    fn save_models(&self, models: &Models, config: &TeachConfig, steps: Steps) -> Result<()> {
        models.attention.save(
            &self.dir.join(ATTENTION_STEM),
            Some(&config.attention_train),
            steps.attention,
        )?;
        models.transport.save(
            &self.dir.join(TRANSPORT_STEM),
            Some(&config.transport_train),
            steps.transport,
        )?;
        Ok(())
    }
}

/// Owns every session and the directory they persist to.
pub struct Teacher {
    config: TeachConfig,
    sessions: RwLock<BTreeMap<String, Arc<Session>>>,
    /// Session whose models the next new session starts from.
    latest: Mutex<Option<String>>,
    next_id: Mutex<u64>,
}

impl Teacher {
    /// Opens `config.data_dir`, restoring any sessions persisted there.
    /// A session interrupted mid-training resumes idle with its dataset.
    pub fn open(config: TeachConfig) -> Result<Self> {
        config.validate()?;
        fs::create_dir_all(&config.data_dir)?;
        let mut sessions = BTreeMap::new();
        let mut next = 1;
        let mut dirs: Vec<PathBuf> = fs::read_dir(&config.data_dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.join(STATE_FILE).is_file())
            .collect();
        dirs.sort();
        for dir in dirs {
            let session = restore(&config, &dir)?;
            let id = lock(&session.live).status.session_id.clone();
            if let Some(n) = id.strip_prefix('s').and_then(|n| n.parse::<u64>().ok()) {
                next = next.max(n + 1);
            }
            sessions.insert(id, Arc::new(session));
        }
        let latest = sessions.keys().next_back().cloned();
        Ok(Self {
            config,
            sessions: RwLock::new(sessions),
            latest: Mutex::new(latest),
            next_id: Mutex::new(next),
        })
    }

    pub fn config(&self) -> &TeachConfig {
        &self.config
    }

    pub fn session_ids(&self) -> Vec<String> {
        self.sessions
            .read()
            .unwrap_or_else(|e| e.into_inner())
            .keys()
            .cloned()
            .collect()
    }

    fn get(&self, id: &str) -> Result<Arc<Session>> {
        self.sessions
            .read()
            .unwrap_or_else(|e| e.into_inner())
            .get(id)
            .cloned()
            .ok_or_else(|| TeachError::NotFound(id.to_string()))
    }

    fn initial_models(&self) -> Result<Models> {
        let fresh_opts = |attention, transport| Models {
            attention,
            transport,
            attention_opt: Optimizer::new(self.config.learning_rate),
            transport_opt: Optimizer::new(self.config.learning_rate),
        };
        let previous = lock(&self.latest).clone();
        if let Some(prev) = previous.and_then(|id| self.get(&id).ok()) {
            let m = lock(&prev.models);
            return Ok(fresh_opts(m.attention.clone(), m.transport.clone()));
        }
        if let Some((a, t)) = &self.config.checkpoints {
            let (attention, _) = AttentionModel::load(a)?;
            let (transport, _) = TransportModel::load(t)?;
            if attention.config.camera != self.config.camera() || transport.config.camera != self.config.camera() {
                return Err(TeachError::BadRequest(
                    "checkpoint camera differs from the service camera".into(),
                ));
            }
            return Ok(fresh_opts(attention, transport));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        Ok(fresh_opts(
            AttentionModel::new(self.config.attention, &mut rng)?,
            TransportModel::new(self.config.transport, &mut rng)?,
        ))
    }

    /// Starts a session on a fresh scene. Models continue from the most
    /// recent session, else from the configured checkpoints, else from a
    /// seeded random initialisation.
    pub fn new_session(&self, task: Task, seed: u64) -> Result<Status> {
        let cam = self.config.camera();
        let scene = sample_scene_in(&task, scene_seed(seed, 0), cam.bounds())?;
        let models = self.initial_models()?;
        let id = {
            let mut n = lock(&self.next_id);
            let id = format!("s{:04}", *n);
            *n += 1;
            id
        };
        let dir = self.config.data_dir.join(&id);
        fs::create_dir_all(&dir)?;
        let status = Status {
            session_id: id.clone(),
            task,
            seed,
            scene_index: 0,
            phase: Phase::Idle,
            step: Steps::default(),
            losses: Losses::default(),
            dataset_size: 0,
            proposed_pick: None,
            proposed_place: None,
            corrected_pick: None,
            corrected_place: None,
            error: None,
        };
        let observation = render(&scene, &cam);
        let session = Session {
            dir,
            live: Mutex::new(Live {
                status: status.clone(),
                scene,
                observation,
            }),
            models: Mutex::new(models),
            data: Mutex::new(Vec::new()),
            worker: Mutex::new(None),
        };
        session.save_models(&lock(&session.models), &self.config, status.step)?;
        session.persist(&status)?;
        self.sessions
            .write()
            .unwrap_or_else(|e| e.into_inner())
            .insert(id.clone(), Arc::new(session));
        *lock(&self.latest) = Some(id);
        Ok(status)
    }

    pub fn status(&self, id: &str) -> Result<Status> {
        Ok(lock(&self.get(id)?.live).status.clone())
    }

    pub fn observation(&self, id: &str) -> Result<Grid> {
        Ok(lock(&self.get(id)?.live).observation.clone())
    }

    pub fn scene(&self, id: &str) -> Result<Scene> {
        Ok(lock(&self.get(id)?.live).scene.clone())
    }

    /// Infers a pick (from idle or awaiting a pick) or a place (awaiting a
    /// place, conditioned on the corrected pick).
    pub fn propose(&self, id: &str, target: Target) -> Result<PoseSE2> {
        let session = self.get(id)?;
        let (obs, pick, phase) = {
            let live = lock(&session.live);
            let phase = live.status.phase;
            let allowed = match target {
                Target::Pick => matches!(phase, Phase::Idle | Phase::AwaitPick),
                Target::Place => phase == Phase::AwaitPlace,
            };
            if !allowed {
                let expected = match target {
                    Target::Pick => "idle or await_pick",
                    Target::Place => "await_place",
                };
                return Err(TeachError::PhaseMismatch {
                    expected: expected.into(),
                    actual: phase,
                });
            }
            (
                live.observation.clone(),
                live.status.corrected_pick.map(|c| c.pose),
                phase,
            )
        };
        let pose = {
            let m = lock(&session.models);
            match target {
                Target::Pick => m.attention.infer(&obs, &self.config.attention_infer)?,
                Target::Place => {
                    let pick = pick.ok_or_else(|| TeachError::BadRequest("no corrected pick".into()))?;
                    m.transport.infer(&obs, &pick, &self.config.transport_infer)?
                }
            }
        };
        let mut live = lock(&session.live);
        if live.status.phase != phase {
            return Err(TeachError::PhaseMismatch {
                expected: phase.to_string(),
                actual: live.status.phase,
            });
        }
        match target {
            Target::Pick => {
                live.status.proposed_pick = Some(pose);
                live.status.phase = Phase::AwaitPick;
            }
            Target::Place => live.status.proposed_place = Some(pose),
        }
        session.persist(&live.status)?;
        Ok(pose)
    }

    /// Stores the operator's pose for the pending pick or place.
    pub fn correct(&self, id: &str, correction: Correction) -> Result<Status> {
        let session = self.get(id)?;
        let p = correction.pose;
        let [x0, y0, x1, y1] = self.config.camera().bounds();
        if !(p.x >= x0 && p.x <= x1 && p.y >= y0 && p.y <= y1) || !p.theta.is_finite() {
            return Err(TeachError::OutOfBounds { x: p.x, y: p.y });
        }
        let mut live = lock(&session.live);
        match live.status.phase {
            Phase::AwaitPick => {
                live.status.corrected_pick = Some(correction);
                live.status.proposed_place = None;
                live.status.corrected_place = None;
                live.status.phase = Phase::AwaitPlace;
            }
            Phase::AwaitPlace => live.status.corrected_place = Some(correction),
            actual => {
                return Err(TeachError::PhaseMismatch {
                    expected: "await_pick or await_place".into(),
                    actual,
                })
            }
        }
        session.persist(&live.status)?;
        Ok(live.status.clone())
    }

    /// Appends the corrected sample to the dataset, moves to the next scene
    /// and trains both modules in the background.
    pub fn record(&self, id: &str) -> Result<Status> {
        let session = self.get(id)?;
        let mut live = lock(&session.live);
        if live.status.phase != Phase::AwaitPlace {
            return Err(TeachError::PhaseMismatch {
                expected: "await_place".into(),
                actual: live.status.phase,
            });
        }
        let (Some(pick), Some(place)) = (live.status.corrected_pick, live.status.corrected_place) else {
            return Err(TeachError::BadRequest("record needs a corrected pick and place".into()));
        };
        let sample = Demonstration {
            observation: live.observation.clone(),
            pick: pick.pose,
            place: place.pose,
        };
        let cam = self.config.camera();
        let size = append_to_dataset(session.dir.join(DATASET_DIR), &live.status.task, &cam, &sample)?;
        lock(&session.data).push(sample);

        let next = live.status.scene_index + 1;
        let scene = sample_scene_in(&live.status.task, scene_seed(live.status.seed, next), cam.bounds())?;
        live.observation = render(&scene, &cam);
        live.scene = scene;
        let s = &mut live.status;
        s.scene_index = next;
        s.dataset_size = size;
        s.phase = Phase::Training;
        s.error = None;
        s.proposed_pick = None;
        s.proposed_place = None;
        s.corrected_pick = None;
        s.corrected_place = None;
        session.persist(&live.status)?;
        let status = live.status.clone();
        drop(live);

        let config = self.config.clone();
        let worker = Arc::clone(&session);
        let handle = std::thread::spawn(move || train_in_background(&worker, &config, status.seed, next));
        *lock(&session.worker) = Some(handle);
        *lock(&self.latest) = Some(id.to_string());
        self.status(id)
    }

    /// Blocks until the session's background training, if any, finishes.
    pub fn wait(&self, id: &str) -> Result<Status> {
        let session = self.get(id)?;
        let handle = lock(&session.worker).take();
        if let Some(h) = handle {
            let _ = h.join();
        }
        self.status(id)
    }

    /// Runs a pick and place on the current scene without changing it.
    /// Poses are inferred unless `poses` supplies them.
    pub fn execute(&self, id: &str, poses: Option<(PoseSE2, PoseSE2)>) -> Result<ExecReport> {
        let session = self.get(id)?;
        let (scene, obs) = {
            let live = lock(&session.live);
            (live.scene.clone(), live.observation.clone())
        };
        let (pick, place) = match poses {
            Some(p) => p,
            None => {
                let m = lock(&session.models);
                let pick = m.attention.infer(&obs, &self.config.attention_infer)?;
                let place = m.transport.infer(&obs, &pick, &self.config.transport_infer)?;
                (pick, place)
            }
        };
        let ex = execute(&scene, &pick, &place)?;
        Ok(ExecReport {
            pick,
            place,
            grasped: ex.grasped,
            success: ex.success,
            error: ex.error,
        })
    }

    /// Success rate of the session's current models on `scenes` fresh
    /// scenes of its task.
    pub fn test(&self, id: &str, scenes: usize, seed: u64) -> Result<Vec<TestRow>> {
        if scenes == 0 {
            return Err(TeachError::BadRequest("test needs at least one scene".into()));
        }
        let session = self.get(id)?;
        let task = lock(&session.live).status.task.clone();
        let (attention, transport) = {
            let m = lock(&session.models);
            (m.attention.clone(), m.transport.clone())
        };
        let c = &self.config;
        let label = format!(
            "{}+{} {}+{} {}+{}",
            attention.config.variant,
            transport.config.variant,
            c.attention_train,
            c.transport_train,
            c.attention_infer,
            c.transport_infer
        );
        let report = evaluate(
            Evaluated {
                attention: Some((&attention, &c.attention_infer)),
                transport: Some((&transport, &c.transport_infer)),
            },
            &label,
            &task,
            scenes,
            seed,
        )?;
        let successes = report
            .scenes
            .iter()
            .filter(|s| s.execution.is_some_and(|e| e.success))
            .count();
        let runs = report.scenes.len();
        Ok(vec![TestRow {
            model: label,
            scenes: runs,
            successes,
            success_rate: successes as f64 / runs as f64,
            mean_error: report.means.execution.unwrap_or(ErrorPair::ZERO),
        }])
    }
}

fn train_in_background(session: &Session, config: &TeachConfig, seed: u64, scene_index: u64) {
    let mut models = lock(&session.models).clone();
    let data = lock(&session.data).clone();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ scene_seed(seed, scene_index).rotate_left(17));
    let n = config.steps_per_demo;
    let result = (|| -> pnp_core::Result<()> {
        let Models {
            attention,
            transport,
            attention_opt,
            transport_opt,
        } = &mut models;
        train_attention(
            attention,
            attention_opt,
            &data,
            &config.attention_train,
            n,
            &mut rng,
            |_, l| {
                let mut live = lock(&session.live);
                live.status.step.attention += 1;
                live.status.losses.attention_position = Some(l.position);
                live.status.losses.attention_rotation = Some(l.rotation);
            },
        )?;
        train_transport(
            transport,
            transport_opt,
            &data,
            &config.transport_train,
            n,
            &mut rng,
            |_, l| {
                let mut live = lock(&session.live);
                live.status.step.transport += 1;
                live.status.losses.transport = Some(l);
            },
        )
    })();
    let steps = lock(&session.live).status.step;
    let error = match result {
        Ok(()) => {
            let saved = session.save_models(&models, config, steps);
            *lock(&session.models) = models;
            saved.err().map(|e| e.to_string())
        }
        Err(e) => Some(format!("training failed: {e}")),
    };
    let mut live = lock(&session.live);
    live.status.phase = Phase::Idle;
    live.status.error = error;
    if let Err(e) = session.persist(&live.status) {
        live.status.error = Some(format!("could not persist session: {e}"));
    }
}

fn restore(config: &TeachConfig, dir: &Path) -> Result<Session> {
    let raw = fs::read(dir.join(STATE_FILE))?;
    let mut status: Status = serde_json::from_slice(&raw)
        .map_err(|e| pnp_core::Error::Format(format!("{}: {e}", dir.join(STATE_FILE).display())))?;
    if status.phase == Phase::Training {
        status.phase = Phase::Idle;
    }
    let data = if dir.join(DATASET_DIR).exists() {
        load_dataset(dir.join(DATASET_DIR))?.1
    } else {
        Vec::new()
    };
    status.dataset_size = data.len();
    let (attention, _) = AttentionModel::load(&dir.join(ATTENTION_STEM))?;
    let (transport, _) = TransportModel::load(&dir.join(TRANSPORT_STEM))?;
    let cam = config.camera();
    let scene = sample_scene_in(&status.task, scene_seed(status.seed, status.scene_index), cam.bounds())?;
    Ok(Session {
        dir: dir.to_path_buf(),
        live: Mutex::new(Live {
            observation: render(&scene, &cam),
            scene,
            status,
        }),
        models: Mutex::new(Models {
            attention,
            transport,
            attention_opt: Optimizer::new(config.learning_rate),
            transport_opt: Optimizer::new(config.learning_rate),
        }),
        data: Mutex::new(data),
        worker: Mutex::new(None),
    })
}
