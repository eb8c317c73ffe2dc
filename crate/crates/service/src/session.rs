//! In-memory sessions: dataset, model, training runs and event fan-out.

use std::collections::{HashMap, VecDeque};
use std::sync::{Arc, Mutex, MutexGuard, RwLock};
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use difflab_core::datasets::{strokes_to_dataset, Dataset as CoreDataset};
use difflab_core::store::load_pretrained;
use difflab_core::trainer::{train, EpochSnapshot};
use difflab_core::{CancelToken, DatasetKind, Model, Objective, StrokeSet, TrainConfig, TrainError, Trajectory};
use tokio::sync::mpsc;
use tracing::{info, warn};

use crate::wire::{
    DatasetRequest, DatasetSummary, DatasetView, Event, ModelOrigin, ModelSummary, SessionView, TrainOverrides,
    TrainingState, TrainingView,
};
use crate::ServiceConfig;

/// Failures of session operations, mapped to HTTP statuses by the API layer.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SessionError {
    #[error("{0}")]
    NotFound(String),
    #[error("{0}")]
    Conflict(String),
    #[error("{0}")]
    Invalid(String),
    #[error("{0}")]
    Internal(String),
}

impl From<difflab_core::Error> for SessionError {
    fn from(e: difflab_core::Error) -> Self {
        match e {
            difflab_core::Error::Contract(m) => SessionError::Internal(m),
            other => SessionError::Invalid(other.to_string()),
        }
    }
}

type Result<T> = std::result::Result<T, SessionError>;

struct InstalledModel {
    model: Arc<Model>,
    origin: ModelOrigin,
    name: Option<String>,
    /// Distinguishes successive models in cache keys.
    generation: u64,
}

struct LoadedDataset {
    data: Arc<CoreDataset<f64>>,
    seed: u64,
}

/// Cache key of sampled trajectories.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TrajKey {
    pub generation: u64,
    pub choice: (difflab_core::SamplerKind, usize),
    pub n: usize,
    pub seed: u64,
}

/// Small insertion-ordered cache that evicts its oldest entry.
struct Fifo<K, V> {
    cap: usize,
    map: HashMap<K, V>,
    order: VecDeque<K>,
}

impl<K: std::hash::Hash + Eq + Copy, V: Clone> Fifo<K, V> {
    fn new(cap: usize) -> Self {
        Self {
            cap,
            map: HashMap::new(),
            order: VecDeque::new(),
        }
    }

    fn get(&self, k: &K) -> Option<V> {
        self.map.get(k).cloned()
    }

    fn insert(&mut self, k: K, v: V) {
        if self.map.insert(k, v).is_none() {
            self.order.push_back(k);
            while self.order.len() > self.cap {
                let old = self.order.pop_front().expect("nonempty");
                self.map.remove(&old);
            }
        }
    }

    fn clear(&mut self) {
        self.map.clear();
        self.order.clear();
    }
}

pub struct Session {
    id: String,
    created_at_ms: u64,
    last_access: Instant,
    dataset: Option<LoadedDataset>,
    model: Option<InstalledModel>,
    next_generation: u64,
    state: TrainingState,
    cancel: Option<CancelToken>,
    epochs_completed: usize,
    epochs_total: usize,
    last_loss: Option<f64>,
    failure: Option<String>,
    /// Serialized events of the current (or last) run, replayed to late
    /// subscribers.
    events: Vec<Arc<str>>,
    subscribers: Vec<mpsc::UnboundedSender<Arc<str>>>,
    trajectories: Fifo<TrajKey, Arc<Vec<Trajectory>>>,
    densities: Fifo<(TrajKey, u64), Arc<Vec<u8>>>,
}

impl Session {
    fn new(id: String) -> Self {
        let created_at_ms = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_millis() as u64)
            .unwrap_or(0);
        Self {
            id,
            created_at_ms,
            last_access: Instant::now(),
            dataset: None,
            model: None,
            next_generation: 0,
            state: TrainingState::Idle,
            cancel: None,
            epochs_completed: 0,
            epochs_total: 0,
            last_loss: None,
            failure: None,
            events: Vec::new(),
            subscribers: Vec::new(),
            trajectories: Fifo::new(8),
            densities: Fifo::new(256),
        }
    }

    pub fn view(&self) -> SessionView {
        SessionView {
            id: self.id.clone(),
            created_at_ms: self.created_at_ms,
            training: TrainingView {
                state: self.state,
                epochs_completed: self.epochs_completed,
                epochs_total: self.epochs_total,
                last_loss: self.last_loss,
                error: self.failure.clone(),
            },
            dataset: self.dataset.as_ref().map(|d| DatasetSummary {
                kind: d.data.kind,
                n: d.data.len(),
                seed: d.seed,
                bounds: d.data.bounds,
            }),
            model: self
                .model
                .as_ref()
                .map(|m| ModelSummary::describe(&m.model, m.origin, m.name.clone())),
        }
    }

    fn busy(&self) -> bool {
        matches!(self.state, TrainingState::Running | TrainingState::Cancelling)
    }

    fn install(&mut self, model: Model, origin: ModelOrigin, name: Option<String>) {
        self.next_generation += 1;
        self.model = Some(InstalledModel {
            model: Arc::new(model),
            origin,
            name,
            generation: self.next_generation,
        });
        self.trajectories.clear();
        self.densities.clear();
    }

    fn publish(&mut self, event: &Event) {
        let text: Arc<str> = serde_json::to_string(event).expect("events serialize").into();
        self.events.push(text.clone());
        self.subscribers.retain(|tx| tx.send(text.clone()).is_ok());
    }

    /// Registers an event subscriber and returns the events it missed.
    pub fn subscribe(&mut self) -> (Vec<Arc<str>>, mpsc::UnboundedReceiver<Arc<str>>) {
        let (tx, rx) = mpsc::unbounded_channel();
        self.subscribers.push(tx);
        (self.events.clone(), rx)
    }

    /// The installed model and its generation, for lock-free reads.
    pub fn model_snapshot(&self) -> Result<(Arc<Model>, u64)> {
        self.model
            .as_ref()
            .map(|m| (m.model.clone(), m.generation))
            .ok_or_else(|| SessionError::Conflict("session has no model; train or load one first".into()))
    }

    pub fn cached_trajectories(&self, key: &TrajKey) -> Option<Arc<Vec<Trajectory>>> {
        self.trajectories.get(key)
    }

    pub fn cached_density(&self, key: &(TrajKey, u64)) -> Option<Arc<Vec<u8>>> {
        self.densities.get(key)
    }

    fn current_generation(&self) -> Option<u64> {
        self.model.as_ref().map(|m| m.generation)
    }

    pub fn store_trajectories(&mut self, key: TrajKey, value: Arc<Vec<Trajectory>>) {
        if self.current_generation() == Some(key.generation) {
            self.trajectories.insert(key, value);
        }
    }

    pub fn store_density(&mut self, key: (TrajKey, u64), value: Arc<Vec<u8>>) {
        if self.current_generation() == Some(key.0.generation) {
            self.densities.insert(key, value);
        }
    }
}

pub type SessionRef = Arc<Mutex<Session>>;

fn lock(s: &SessionRef) -> MutexGuard<'_, Session> {
    s.lock().unwrap_or_else(|p| p.into_inner())
}

/// All live sessions.
pub struct Registry {
    sessions: RwLock<HashMap<String, SessionRef>>,
    pub config: ServiceConfig,
}

impl Registry {
    pub fn new(config: ServiceConfig) -> Self {
        Self {
            sessions: RwLock::new(HashMap::new()),
            config,
        }
    }

    pub fn create(&self) -> SessionView {
        let id = format!("{:032x}", rand::random::<u128>());
        let session = Session::new(id.clone());
        let view = session.view();
        self.sessions
            .write()
            .unwrap_or_else(|p| p.into_inner())
            .insert(id.clone(), Arc::new(Mutex::new(session)));
        info!(session = %id, "session created");
        view
    }

    /// Looks up a session and marks it as used. Sessions idle past the
    /// configured limit are dropped on sight.
    pub fn get(&self, id: &str) -> Result<SessionRef> {
        let found = self.sessions.read().unwrap_or_else(|p| p.into_inner()).get(id).cloned();
        let session = found.ok_or_else(|| SessionError::NotFound(format!("unknown session `{id}`")))?;
        let mut s = lock(&session);
        if !s.busy() && s.last_access.elapsed() > self.config.idle_ttl {
            drop(s);
            self.sessions.write().unwrap_or_else(|p| p.into_inner()).remove(id);
            return Err(SessionError::NotFound(format!("session `{id}` expired")));
        }
        s.last_access = Instant::now();
        drop(s);
        Ok(session)
    }

    pub fn with<T>(&self, id: &str, f: impl FnOnce(&mut Session) -> Result<T>) -> Result<T> {
        let session = self.get(id)?;
        let mut s = lock(&session);
        f(&mut s)
    }

    /// Drops sessions idle longer than the limit; returns how many.
    pub fn sweep(&self) -> usize {
        let ttl = self.config.idle_ttl;
        let mut map = self.sessions.write().unwrap_or_else(|p| p.into_inner());
        let before = map.len();
        map.retain(|_, s| {
            let s = lock(s);
            s.busy() || s.last_access.elapsed() <= ttl
        });
        before - map.len()
    }

    pub fn len(&self) -> usize {
        self.sessions.read().unwrap_or_else(|p| p.into_inner()).len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn set_dataset(&self, id: &str, req: DatasetRequest) -> Result<DatasetView> {
        let session = self.get(id)?;
        if lock(&session).busy() {
            return Err(SessionError::Conflict(
                "cannot change the dataset while training runs".into(),
            ));
        }
        let seed = req.seed.unwrap_or(self.config.default_seed);
        let n = req.n.unwrap_or(self.config.default_dataset_n);
        if n > self.config.max_points {
            return Err(SessionError::Invalid(format!(
                "n must be at most {}",
                self.config.max_points
            )));
        }
        let data: CoreDataset<f64> = match req.kind {
            DatasetKind::Custom => {
                let (Some(strokes), Some(canvas)) = (req.strokes, req.canvas) else {
                    return Err(SessionError::Invalid(
                        "custom datasets need `strokes` and `canvas`".into(),
                    ));
                };
                let jitter = req.jitter.unwrap_or(self.config.default_jitter);
                strokes_to_dataset(&StrokeSet { strokes, canvas }, n, jitter, seed)?
            }
            kind => {
                if req.strokes.is_some() || req.canvas.is_some() || req.jitter.is_some() {
                    return Err(SessionError::Invalid(
                        "strokes, canvas and jitter apply to custom datasets only".into(),
                    ));
                }
                CoreDataset::builtin(kind, n, seed)?
            }
        };
        let view = DatasetView {
            kind: data.kind,
            n: data.len(),
            seed,
            bounds: data.bounds,
            points: data.points.iter().map(|&p| data.bounds.from_normalized(p)).collect(),
        };
        let mut s = lock(&session);
        // Re-check: a run may have started while the dataset was generated.
        if s.busy() {
            return Err(SessionError::Conflict(
                "cannot change the dataset while training runs".into(),
            ));
        }
        s.dataset = Some(LoadedDataset {
            data: Arc::new(data),
            seed,
        });
        if s.model.as_ref().is_some_and(|m| m.origin == ModelOrigin::Trained) {
            s.model = None;
            s.trajectories.clear();
            s.densities.clear();
        }
        if !s.busy() && s.model.is_none() {
            s.state = TrainingState::Idle;
        }
        Ok(view)
    }

    pub fn load_pretrained(&self, id: &str, name: &str) -> Result<SessionView> {
        let session = self.get(id)?;
        let model: Model = load_pretrained(name).map_err(|e| match e {
            difflab_core::StoreError::UnknownPretrained(_) => SessionError::NotFound(e.to_string()),
            other => SessionError::Internal(other.to_string()),
        })?;
        let mut s = lock(&session);
        if s.busy() {
            return Err(SessionError::Conflict("cannot load a model while training runs".into()));
        }
        s.install(model, ModelOrigin::Pretrained, Some(name.to_string()));
        Ok(s.view())
    }

    pub fn start_training(&self, id: &str, objective: Objective, overrides: &TrainOverrides) -> Result<SessionView> {
        let session = self.get(id)?;
        let config = self.train_config(overrides)?;
        let mut s = lock(&session);
        if s.busy() {
            return Err(SessionError::Conflict("training is already running".into()));
        }
        let Some(dataset) = s.dataset.as_ref().map(|d| d.data.clone()) else {
            return Err(SessionError::Conflict("set a dataset before training".into()));
        };
        let token = CancelToken::new();
        s.state = TrainingState::Running;
        s.cancel = Some(token.clone());
        s.epochs_completed = 0;
        s.epochs_total = config.epochs;
        s.last_loss = None;
        s.failure = None;
        s.events.clear();
        let view = s.view();
        drop(s);

        let worker_session = session.clone();
        let spawned = std::thread::Builder::new()
            .name(format!("train-{id}"))
            .spawn(move || run_training(worker_session, dataset, objective, config, token));
        if let Err(e) = spawned {
            let mut s = lock(&session);
            s.state = TrainingState::Failed;
            s.failure = Some(format!("could not start a training worker: {e}"));
            return Err(SessionError::Internal(s.failure.clone().unwrap_or_default()));
        }
        Ok(view)
    }

    pub fn cancel_training(&self, id: &str) -> Result<SessionView> {
        self.with(id, |s| {
            if s.state != TrainingState::Running {
                return Err(SessionError::Conflict("no training run to cancel".into()));
            }
            if let Some(token) = &s.cancel {
                token.cancel();
            }
            s.state = TrainingState::Cancelling;
            Ok(s.view())
        })
    }

    fn train_config(&self, o: &TrainOverrides) -> Result<TrainConfig> {
        let d = TrainConfig::default();
        let preview_n = o.preview_n.unwrap_or(d.preview_n);
        let config = TrainConfig {
            epochs: o.epochs.unwrap_or(d.epochs),
            steps_per_epoch: o.steps_per_epoch.unwrap_or(d.steps_per_epoch),
            batch_size: o.batch_size.unwrap_or(d.batch_size),
            lr: o.lr.unwrap_or(d.lr),
            seed: o.seed.unwrap_or(self.config.default_seed),
            preview_n: preview_n.min(self.config.preview_cap),
            preview_steps: o.preview_steps.unwrap_or(d.preview_steps),
            ..d
        };
        config.validate()?;
        if config.epochs > self.config.max_epochs {
            return Err(SessionError::Invalid(format!(
                "epochs must be at most {}",
                self.config.max_epochs
            )));
        }
        Ok(config)
    }
}

fn run_training(
    session: SessionRef,
    dataset: Arc<CoreDataset<f64>>,
    objective: Objective,
    config: TrainConfig,
    token: CancelToken,
) {
    let on_epoch = |snap: &EpochSnapshot<f64>| {
        let mut s = lock(&session);
        s.epochs_completed = snap.epoch;
        s.last_loss = Some(snap.mean_loss);
        s.publish(&Event::EpochSnapshot {
            epoch: snap.epoch,
            mean_loss: snap.mean_loss,
            preview: snap.preview.clone(),
        });
    };
    let outcome = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| {
        train(&dataset, objective, &config, on_epoch, Some(&token))
    }));
    let mut s = lock(&session);
    s.cancel = None;
    let outcome = match outcome {
        Ok(result) => result.map_err(|e| match &e {
            TrainError::Diverged { .. } => e.to_string(),
            TrainError::Invalid(inner) => inner.to_string(),
        }),
        Err(_) => Err("training worker panicked".to_string()),
    };
    match outcome {
        Ok(out) => {
            s.epochs_completed = out.epochs_completed;
            s.install(out.model, ModelOrigin::Trained, None);
            s.state = if out.partial {
                TrainingState::Partial
            } else {
                TrainingState::Done
            };
            s.publish(&Event::TrainingDone { partial: out.partial });
            info!(session = %s.id, partial = out.partial, "training finished");
        }
        Err(reason) => {
            warn!(session = %s.id, %reason, "training failed");
            s.state = TrainingState::Failed;
            s.failure = Some(reason.clone());
            s.publish(&Event::TrainingFailed { reason });
        }
    }
}

/// Default idle lifetime of a session.
pub const DEFAULT_IDLE_TTL: Duration = Duration::from_secs(30 * 60);
