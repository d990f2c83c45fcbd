//! Distributed offloading agent.
//!
//! Every device runs a [`DeviceAgent`] that picks actions epsilon-greedily
//! from the most recently received network parameters and, once a task's
//! cost is known, uploads the experience. Every device has a dedicated
//! [`Trainer`] hosted on an edge node; the [`TrainerHub`] holds all of them
//! and answers [`Message`]s. Devices and trainers share nothing but
//! messages, so the in-process immediate delivery used here can be replaced
//! by a transport without touching either side.

use std::collections::{BTreeMap, HashSet, VecDeque};
use std::fs;
use std::path::Path;

use rand::seq::index;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::config::SystemConfig;
use crate::env::{Action, CostEvent, Observation};
use crate::nn::{HiddenSizes, NetInput, NetShape, NnError, Optimizer, OptimizerKind, QNetwork};
use crate::seed::{substream, Purpose};
use crate::sim::{DeviceId, EdgeId, Slot};

#[derive(Debug, Error)]
pub enum AgentError {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("device {0} has no trainer")]
    UnknownDevice(DeviceId),
    #[error("device {device}: cost reported for birth slot {birth_slot} without a stored decision")]
    MissingStub { device: DeviceId, birth_slot: Slot },
    #[error("device {device}: decision for slot {birth_slot} has no next state yet")]
    MissingNextState { device: DeviceId, birth_slot: Slot },
    #[error("observation has no task to decide")]
    NoTask,
    #[error("unexpected message for {0}")]
    UnexpectedMessage(&'static str),
    #[error("cannot decode message: {0}")]
    Decode(String),
    #[error("checkpoint {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("invalid agent setting `{field}`: {reason}")]
    Config { field: &'static str, reason: String },
}

/// Learning hyperparameters shared by all trainers.
#[derive(Clone, Debug, PartialEq)]
pub struct AgentConfig {
    pub hidden: HiddenSizes,
    pub learning_rate: f64,
    pub discount: f64,
    pub batch_size: usize,
    pub replace_threshold: u64,
    pub memory_capacity: usize,
    pub optimizer: OptimizerKind,
}

impl Default for AgentConfig {
    fn default() -> Self {
        Self {
            hidden: HiddenSizes::default(),
            learning_rate: 1e-3,
            discount: 0.9,
            batch_size: 32,
            replace_threshold: 100,
            memory_capacity: 10_000,
            optimizer: OptimizerKind::Sgd,
        }
    }
}

impl AgentConfig {
    pub fn validate(&self) -> Result<(), AgentError> {
        let bad = |field, reason: &str| {
            Err(AgentError::Config {
                field,
                reason: reason.to_string(),
            })
        };
        let h = self.hidden;
        if h.lstm == 0 || h.fc1 == 0 || h.fc2 == 0 || h.head == 0 {
            return bad("hidden", "every layer needs at least one unit");
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return bad("learning_rate", "must be finite and non-negative");
        }
        if !(self.discount > 0.0 && self.discount <= 1.0) {
            return bad("discount", "must lie in (0, 1]");
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be at least 1");
        }
        if self.replace_threshold == 0 {
            return bad("replace_threshold", "must be at least 1");
        }
        if self.memory_capacity < self.batch_size {
            return bad("memory_capacity", "must hold at least one batch");
        }
        Ok(())
    }

    pub fn shape(&self, sys: &SystemConfig) -> NetShape {
        NetShape::for_system(sys.num_edges, sys.history_slots, self.hidden)
    }
}

/// Maps raw observations to network inputs of order one.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Normalizer {
    size_bits: f64,
    wait_slots: f64,
    load: f64,
}

impl Normalizer {
    pub fn new(sys: &SystemConfig) -> Self {
        Self {
            size_bits: sys.max_task_bits(),
            wait_slots: f64::from(sys.deadline_slots),
            load: sys.num_devices as f64,
        }
    }

    pub fn input(&self, obs: &Observation) -> NetInput {
        let mut scalars = Vec::with_capacity(3 + obs.edge_queue_bits.len());
        scalars.push(obs.task_size_bits / self.size_bits);
        scalars.push(f64::from(obs.comp_wait_slots) / self.wait_slots);
        scalars.push(f64::from(obs.tran_wait_slots) / self.wait_slots);
        scalars.extend(obs.edge_queue_bits.iter().map(|q| q / self.size_bits));
        let sequence = obs
            .load_history
            .iter()
            .flatten()
            .map(|&b| f64::from(b) / self.load)
            .collect();
        NetInput { scalars, sequence }
    }
}

/// Index of the smallest value; the lowest index wins ties.
pub fn argmin(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v < values[best] {
            best = i;
        }
    }
    best
}

/// With probability `epsilon` a uniformly random action, otherwise the
/// action with the lowest Q-value.
pub fn select_action<R: Rng + ?Sized>(
    net: &QNetwork,
    norm: &Normalizer,
    obs: &Observation,
    epsilon: f64,
    rng: &mut R,
) -> Result<Action, AgentError> {
    if !obs.has_task() {
        return Err(AgentError::NoTask);
    }
    let edges = obs.num_edges();
    let index = if rng.gen_bool(epsilon.clamp(0.0, 1.0)) {
        rng.gen_range(0..=edges)
    } else {
        argmin(&net.q_values(&norm.input(obs))?)
    };
    Ok(Action::from_index(index, edges).expect("index within the action space"))
}

/// Exploration rate for `episode` (1-based): linear from 1 at the first
/// episode to 0.01 at the last.
pub fn epsilon_schedule(episode: u64, total_episodes: u64) -> f64 {
    const START: f64 = 1.0;
    const END: f64 = 0.01;
    if total_episodes <= 1 {
        return END;
    }
    let progress = (episode.max(1) - 1) as f64 / (total_episodes - 1) as f64;
    (START - (START - END) * progress).max(END)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Experience {
    pub state: Observation,
    pub action: Action,
    pub cost: f64,
    pub next_state: Observation,
    /// Decided in the last slot of an episode; its target does not
    /// bootstrap.
    pub terminal: bool,
}

/// Bounded FIFO of experiences.
#[derive(Clone, Debug)]
pub struct ReplayMemory {
    buffer: VecDeque<Experience>,
    capacity: usize,
}

impl ReplayMemory {
    pub fn new(capacity: usize) -> Self {
        Self {
            buffer: VecDeque::with_capacity(capacity.min(4096)),
            capacity: capacity.max(1),
        }
    }

    pub fn store(&mut self, e: Experience) {
        if self.buffer.len() == self.capacity {
            self.buffer.pop_front();
        }
        self.buffer.push_back(e);
    }

    pub fn len(&self) -> usize {
        self.buffer.len()
    }

    pub fn is_empty(&self) -> bool {
        self.buffer.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn get(&self, i: usize) -> Option<&Experience> {
        self.buffer.get(i)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Experience> {
        self.buffer.iter()
    }
}

/// Learner for one device: replay memory, evaluation and target networks.
pub struct Trainer {
    pub eval_net: QNetwork,
    pub target_net: QNetwork,
    pub memory: ReplayMemory,
    update_count: u64,
    cfg: AgentConfig,
    norm: Normalizer,
    optimizer: Box<dyn Optimizer + Send>,
    rng: ChaCha8Rng,
}

impl Trainer {
    /// Trainer with both networks set to `init`, the configured optimizer,
    /// and batches drawn from `rng`.
    pub fn new(init: QNetwork, cfg: AgentConfig, norm: Normalizer, rng: ChaCha8Rng) -> Self {
        let optimizer = cfg.optimizer.build(cfg.learning_rate);
        Self::with_optimizer(init, cfg, norm, rng, optimizer)
    }

    pub fn with_optimizer(
        init: QNetwork,
        cfg: AgentConfig,
        norm: Normalizer,
        rng: ChaCha8Rng,
        optimizer: Box<dyn Optimizer + Send>,
    ) -> Self {
        Self {
            target_net: init.clone(),
            eval_net: init,
            memory: ReplayMemory::new(cfg.memory_capacity),
            update_count: 0,
            cfg,
            norm,
            optimizer,
            rng,
        }
    }

    pub fn update_count(&self) -> u64 {
        self.update_count
    }

    pub fn config(&self) -> &AgentConfig {
        &self.cfg
    }

    /// Double-DQN target: the evaluation network picks the next action and
    /// the target network values it.
    pub fn compute_target(&self, e: &Experience) -> Result<f64, AgentError> {
        if e.terminal {
            return Ok(e.cost);
        }
        let next = self.norm.input(&e.next_state);
        let a_next = argmin(&self.eval_net.q_values(&next)?);
        let q_next = self.target_net.q_values(&next)?[a_next];
        Ok(e.cost + self.cfg.discount * q_next)
    }

    /// One gradient step on a uniformly sampled batch. Returns the batch
    /// loss, or `None` while the memory holds fewer than a batch.
    pub fn train_step(&mut self) -> Result<Option<f64>, AgentError> {
        let batch = self.cfg.batch_size;
        if self.memory.len() < batch {
            return Ok(None);
        }
        let picks = index::sample(&mut self.rng, self.memory.len(), batch);
        let mut grad = self.eval_net.zeros_like();
        let mut loss = 0.0;
        let mut dq = vec![0.0; self.eval_net.shape().actions];
        for i in picks.iter() {
            let e = self.memory.get(i).expect("sampled index in range");
            let target = self.compute_target(e)?;
            let out = self.eval_net.forward(&self.norm.input(&e.state))?;
            let a = e.action.index();
            let diff = out.q[a] - target;
            loss += diff * diff;
            dq.fill(0.0);
            dq[a] = 2.0 * diff / batch as f64;
            self.eval_net.backward_into(&out.trace, &dq, &mut grad);
        }
        self.optimizer.step(&mut self.eval_net, &grad)?;
        self.update_count += 1;
        if self.update_count % self.cfg.replace_threshold == 0 {
            self.target_net.copy_from(&self.eval_net);
        }
        Ok(Some(loss / batch as f64))
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<(), AgentError> {
        save_checkpoint(path, &self.eval_net, self.update_count)
    }

    /// Restores the evaluation network and update counter; the target
    /// network is reset to the restored evaluation network.
    pub fn load_checkpoint(&mut self, path: &Path) -> Result<(), AgentError> {
        let (net, count) = load_checkpoint(path)?;
        if net.shape() != self.eval_net.shape() {
            return Err(AgentError::Decode("checkpoint network shape differs".into()));
        }
        self.eval_net = net;
        self.target_net.copy_from(&self.eval_net);
        self.update_count = count;
        Ok(())
    }
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"MQCK";
const CHECKPOINT_VERSION: u16 = 1;

/// Writes `update_count` followed by the serialized network.
pub fn save_checkpoint(path: &Path, net: &QNetwork, update_count: u64) -> Result<(), AgentError> {
    let mut bytes = Vec::new();
    bytes.extend_from_slice(CHECKPOINT_MAGIC);
    bytes.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    bytes.extend_from_slice(&update_count.to_le_bytes());
    bytes.extend_from_slice(&net.to_bytes());
    fs::write(path, bytes).map_err(|source| AgentError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<(QNetwork, u64), AgentError> {
    let bytes = fs::read(path).map_err(|source| AgentError::Io {
        path: path.display().to_string(),
        source,
    })?;
    if bytes.len() < 14 || &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(AgentError::Decode("not a checkpoint file".into()));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != CHECKPOINT_VERSION {
        return Err(AgentError::Decode(format!("unsupported checkpoint version {version}")));
    }
    let count = u64::from_le_bytes(bytes[6..14].try_into().expect("8 bytes"));
    Ok((QNetwork::from_bytes(&bytes[14..])?, count))
}

/// Traffic between devices and their trainers.
#[derive(Clone, Debug, PartialEq)]
pub enum Message {
    ParameterRequest {
        device: DeviceId,
    },
    ParameterResponse {
        device: DeviceId,
        params: Vec<u8>,
    },
    /// `episode` and `birth_slot` identify the upload; repeats are ignored.
    ExperienceUpload {
        device: DeviceId,
        episode: u64,
        birth_slot: Slot,
        experience: Experience,
    },
}

const MESSAGE_VERSION: u16 = 1;

impl Message {
    pub fn device(&self) -> DeviceId {
        match self {
            Message::ParameterRequest { device }
            | Message::ParameterResponse { device, .. }
            | Message::ExperienceUpload { device, .. } => *device,
        }
    }

    /// Frame layout: `u32` byte length of the rest, `u16` version, `u8`
    /// variant tag, then the variant's fields in declaration order. All
    /// integers little-endian, device ids as `u32`.
    pub fn encode(&self) -> Vec<u8> {
        let mut body = Vec::new();
        body.extend_from_slice(&MESSAGE_VERSION.to_le_bytes());
        match self {
            Message::ParameterRequest { device } => {
                body.push(0);
                put_u32(&mut body, *device as u32);
            }
            Message::ParameterResponse { device, params } => {
                body.push(1);
                put_u32(&mut body, *device as u32);
                put_u32(&mut body, params.len() as u32);
                body.extend_from_slice(params);
            }
            Message::ExperienceUpload {
                device,
                episode,
                birth_slot,
                experience,
            } => {
                body.push(2);
                put_u32(&mut body, *device as u32);
                body.extend_from_slice(&episode.to_le_bytes());
                put_u32(&mut body, *birth_slot);
                put_observation(&mut body, &experience.state);
                put_u32(&mut body, experience.action.index() as u32);
                body.extend_from_slice(&experience.cost.to_le_bytes());
                put_observation(&mut body, &experience.next_state);
                body.push(u8::from(experience.terminal));
            }
        }
        let mut frame = Vec::with_capacity(4 + body.len());
        put_u32(&mut frame, body.len() as u32);
        frame.extend_from_slice(&body);
        frame
    }

    /// Decodes one frame; the input must be exactly one frame long.
    pub fn decode(frame: &[u8]) -> Result<Self, AgentError> {
        let mut r = Cursor { bytes: frame, pos: 0 };
        let len = r.u32()? as usize;
        if len != frame.len() - 4 {
            return Err(AgentError::Decode(format!("frame declares {len} bytes, has {}", frame.len() - 4)));
        }
        let version = u16::from_le_bytes(r.take(2)?.try_into().expect("2 bytes"));
        if version != MESSAGE_VERSION {
            return Err(AgentError::Decode(format!("unsupported message version {version}")));
        }
        let tag = r.take(1)?[0];
        let device = r.u32()? as DeviceId;
        let msg = match tag {
            0 => Message::ParameterRequest { device },
            1 => {
                let n = r.u32()? as usize;
                Message::ParameterResponse {
                    device,
                    params: r.take(n)?.to_vec(),
                }
            }
            2 => {
                let episode = r.u64()?;
                let birth_slot = r.u32()?;
                let state = r.observation()?;
                let action_index = r.u32()? as usize;
                let cost = r.f64()?;
                let next_state = r.observation()?;
                let terminal = match r.take(1)?[0] {
                    0 => false,
                    1 => true,
                    b => return Err(AgentError::Decode(format!("bad terminal flag {b}"))),
                };
                let action = Action::from_index(action_index, state.num_edges())
                    .map_err(|e| AgentError::Decode(e.to_string()))?;
                Message::ExperienceUpload {
                    device,
                    episode,
                    birth_slot,
                    experience: Experience {
                        state,
                        action,
                        cost,
                        next_state,
                        terminal,
                    },
                }
            }
            t => return Err(AgentError::Decode(format!("unknown message tag {t}"))),
        };
        if r.pos != frame.len() {
            return Err(AgentError::Decode("trailing bytes in frame".into()));
        }
        Ok(msg)
    }
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_observation(out: &mut Vec<u8>, obs: &Observation) {
    out.extend_from_slice(&obs.task_size_bits.to_le_bytes());
    put_u32(out, obs.comp_wait_slots);
    put_u32(out, obs.tran_wait_slots);
    put_u32(out, obs.edge_queue_bits.len() as u32);
    for q in &obs.edge_queue_bits {
        out.extend_from_slice(&q.to_le_bytes());
    }
    put_u32(out, obs.load_history.len() as u32);
    for row in &obs.load_history {
        put_u32(out, row.len() as u32);
        for &b in row {
            put_u32(out, b);
        }
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], AgentError> {
        let out = self
            .bytes
            .get(self.pos..self.pos + n)
            .ok_or_else(|| AgentError::Decode("truncated frame".into()))?;
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32, AgentError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, AgentError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64, AgentError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn observation(&mut self) -> Result<Observation, AgentError> {
        let task_size_bits = self.f64()?;
        let comp_wait_slots = self.u32()?;
        let tran_wait_slots = self.u32()?;
        let n = self.u32()? as usize;
        let edge_queue_bits = (0..n).map(|_| self.f64()).collect::<Result<_, _>>()?;
        let rows = self.u32()? as usize;
        let mut load_history = Vec::with_capacity(rows.min(1024));
        for _ in 0..rows {
            let k = self.u32()? as usize;
            load_history.push((0..k).map(|_| self.u32()).collect::<Result<_, _>>()?);
        }
        Ok(Observation {
            task_size_bits,
            comp_wait_slots,
            tran_wait_slots,
            edge_queue_bits,
            load_history,
        })
    }
}

/// Edge node hosting the trainer of each device: the one with the largest
/// transmission capacity, ties broken by `device mod N`.
pub fn assign_trainers(tran_capacity: &[f64], num_devices: usize) -> Vec<EdgeId> {
    let n = tran_capacity.len();
    let best = tran_capacity.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let candidates: Vec<EdgeId> = (0..n).filter(|&e| tran_capacity[e] == best).collect();
    (0..num_devices)
        .map(|m| {
            let preferred = m % n;
            if candidates.contains(&preferred) {
                preferred
            } else {
                candidates[m % candidates.len()]
            }
        })
        .collect()
}

/// All trainers of a system, addressed by device.
pub struct TrainerHub {
    trainers: Vec<Trainer>,
    hosts: Vec<EdgeId>,
    seen: Vec<HashSet<(u64, Slot)>>,
    train_steps: u64,
    last_loss: Vec<Option<f64>>,
}

impl TrainerHub {
    /// One trainer per device with independently initialized networks.
    pub fn new(sys: &SystemConfig, cfg: &AgentConfig, master_seed: u64) -> Result<Self, AgentError> {
        cfg.validate()?;
        let shape = cfg.shape(sys);
        let norm = Normalizer::new(sys);
        let trainers = (0..sys.num_devices)
            .map(|m| {
                let mut init_rng = substream(master_seed, 0, m, Purpose::Init);
                let net = QNetwork::init(shape, &mut init_rng);
                Trainer::new(net, cfg.clone(), norm, substream(master_seed, 0, m, Purpose::Replay))
            })
            .collect();
        Ok(Self::from_trainers(
            trainers,
            assign_trainers(&vec![sys.tran_bits_per_slot(); sys.num_edges], sys.num_devices),
        ))
    }

    pub fn from_trainers(trainers: Vec<Trainer>, hosts: Vec<EdgeId>) -> Self {
        let n = trainers.len();
        Self {
            trainers,
            hosts,
            seen: vec![HashSet::new(); n],
            train_steps: 0,
            last_loss: vec![None; n],
        }
    }

    pub fn trainer(&self, device: DeviceId) -> Option<&Trainer> {
        self.trainers.get(device)
    }

    pub fn trainer_mut(&mut self, device: DeviceId) -> Option<&mut Trainer> {
        self.trainers.get_mut(device)
    }

    /// Edge node hosting the trainer of `device`.
    pub fn host(&self, device: DeviceId) -> Option<EdgeId> {
        self.hosts.get(device).copied()
    }

    /// Gradient steps taken across all trainers.
    pub fn train_steps(&self) -> u64 {
        self.train_steps
    }

    pub fn last_loss(&self, device: DeviceId) -> Option<f64> {
        self.last_loss.get(device).copied().flatten()
    }

    /// Answers a parameter request, or stores an upload and trains on it.
    pub fn route_message(&mut self, msg: Message) -> Result<Option<Message>, AgentError> {
        let device = msg.device();
        let trainer = self.trainers.get_mut(device).ok_or(AgentError::UnknownDevice(device))?;
        match msg {
            Message::ParameterRequest { .. } => Ok(Some(Message::ParameterResponse {
                device,
                params: trainer.eval_net.to_bytes(),
            })),
            Message::ExperienceUpload {
                episode,
                birth_slot,
                experience,
                ..
            } => {
                if !self.seen[device].insert((episode, birth_slot)) {
                    return Ok(None);
                }
                trainer.memory.store(experience);
                if let Some(loss) = trainer.train_step()? {
                    self.train_steps += 1;
                    self.last_loss[device] = Some(loss);
                }
                Ok(None)
            }
            Message::ParameterResponse { .. } => Err(AgentError::UnexpectedMessage("trainer")),
        }
    }
}

#[derive(Clone, Debug)]
struct Stub {
    state: Observation,
    action: Action,
    next_state: Option<Observation>,
}

/// Device-side half of the agent.
pub struct DeviceAgent {
    device: DeviceId,
    norm: Normalizer,
    params: Option<QNetwork>,
    stubs: BTreeMap<Slot, Stub>,
    episode_slots: Slot,
}

impl DeviceAgent {
    pub fn new(device: DeviceId, sys: &SystemConfig) -> Self {
        Self {
            device,
            norm: Normalizer::new(sys),
            params: None,
            stubs: BTreeMap::new(),
            episode_slots: sys.episode_slots,
        }
    }

    pub fn device(&self) -> DeviceId {
        self.device
    }

    pub fn parameter_request(&self) -> Message {
        Message::ParameterRequest { device: self.device }
    }

    /// Installs parameters from a response addressed to this device.
    pub fn receive(&mut self, msg: Message) -> Result<(), AgentError> {
        match msg {
            Message::ParameterResponse { device, params } if device == self.device => {
                self.params = Some(QNetwork::from_bytes(&params)?);
                Ok(())
            }
            _ => Err(AgentError::UnexpectedMessage("device")),
        }
    }

    pub fn params(&self) -> Option<&QNetwork> {
        self.params.as_ref()
    }

    /// Chooses an action for the task observed in `slot` and remembers the
    /// decision. Before any parameters arrive every action is random.
    pub fn act<R: Rng + ?Sized>(
        &mut self,
        slot: Slot,
        obs: Observation,
        epsilon: f64,
        rng: &mut R,
    ) -> Result<Action, AgentError> {
        let action = match &self.params {
            Some(net) => select_action(net, &self.norm, &obs, epsilon, rng)?,
            None => select_action_untrained(&obs, rng)?,
        };
        self.stubs.insert(
            slot,
            Stub {
                state: obs,
                action,
                next_state: None,
            },
        );
        Ok(action)
    }

    /// Records the observation at the start of `slot` as the next state of
    /// the decision made in `slot - 1`.
    pub fn observe_next(&mut self, slot: Slot, obs: &Observation) {
        if let Some(stub) = slot.checked_sub(1).and_then(|s| self.stubs.get_mut(&s)) {
            if stub.next_state.is_none() {
                stub.next_state = Some(obs.clone());
            }
        }
    }

    /// Turns cost events into experience uploads, in birth-slot order.
    pub fn completion_bookkeeping(&mut self, episode: u64, events: &[CostEvent]) -> Result<Vec<Message>, AgentError> {
        let mut sorted: Vec<&CostEvent> = events.iter().collect();
        sorted.sort_by_key(|e| e.birth_slot);
        let mut out = Vec::with_capacity(sorted.len());
        for e in sorted {
            let birth_slot = e.birth_slot;
            let stub = self.stubs.remove(&birth_slot).ok_or(AgentError::MissingStub {
                device: self.device,
                birth_slot,
            })?;
            let Some(next_state) = stub.next_state else {
                return Err(AgentError::MissingNextState {
                    device: self.device,
                    birth_slot,
                });
            };
            out.push(Message::ExperienceUpload {
                device: self.device,
                episode,
                birth_slot,
                experience: Experience {
                    state: stub.state,
                    action: stub.action,
                    cost: e.cost,
                    next_state,
                    terminal: birth_slot >= self.episode_slots,
                },
            });
        }
        Ok(out)
    }

    /// Decisions still waiting for their cost.
    pub fn pending(&self) -> usize {
        self.stubs.len()
    }

    /// Forgets decisions of tasks that were still in flight when the
    /// episode ended.
    pub fn end_episode(&mut self) {
        self.stubs.clear();
    }
}

fn select_action_untrained<R: Rng + ?Sized>(obs: &Observation, rng: &mut R) -> Result<Action, AgentError> {
    if !obs.has_task() {
        return Err(AgentError::NoTask);
    }
    let edges = obs.num_edges();
    Ok(Action::from_index(rng.gen_range(0..=edges), edges).expect("index within the action space"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn small_sys() -> SystemConfig {
        SystemConfig {
            num_devices: 2,
            num_edges: 2,
            history_slots: 3,
            ..SystemConfig::default()
        }
    }

    fn small_agent() -> AgentConfig {
        AgentConfig {
            hidden: HiddenSizes {
                lstm: 4,
                fc1: 8,
                fc2: 8,
                head: 4,
            },
            batch_size: 2,
            ..AgentConfig::default()
        }
    }

    fn obs(size: f64) -> Observation {
        let mut o = Observation::zeros(2, 3);
        o.task_size_bits = size;
        o
    }

    fn experience(cost: f64, terminal: bool) -> Experience {
        Experience {
            state: obs(3e6),
            action: Action::Offload(1),
            cost,
            next_state: obs(0.0),
            terminal,
        }
    }

    #[test]
    fn argmin_prefers_lowest_index() {
        assert_eq!(argmin(&[3.0, 1.0, 2.0]), 1);
        assert_eq!(argmin(&[5.0, 5.0, 5.0]), 0);
        assert_eq!(argmin(&[2.0, 1.0, 1.0]), 1);
    }

    #[test]
    fn epsilon_endpoints_and_midpoint() {
        assert_eq!(epsilon_schedule(1, 201), 1.0);
        assert!((epsilon_schedule(201, 201) - 0.01).abs() < 1e-12);
        assert!((epsilon_schedule(101, 201) - 0.505).abs() < 1e-12);
        assert!((epsilon_schedule(500, 201) - 0.01).abs() < 1e-12);
    }

    #[test]
    fn replay_memory_is_fifo() {
        let mut mem = ReplayMemory::new(2);
        for c in [1.0, 2.0, 3.0] {
            mem.store(experience(c, false));
        }
        assert_eq!(mem.len(), 2);
        assert_eq!(mem.get(0).unwrap().cost, 2.0);
        assert_eq!(mem.get(1).unwrap(), &experience(3.0, false));
    }

    #[test]
    fn greedy_selection_ignores_rng_at_zero_epsilon() {
        let sys = small_sys();
        let mut net = QNetwork::zeros(small_agent().shape(&sys));
        net.adv_out.bias = vec![3.0, 1.0, 2.0];
        let norm = Normalizer::new(&sys);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..10 {
            assert_eq!(select_action(&net, &norm, &obs(2e6), 0.0, &mut rng).unwrap(), Action::Offload(0));
        }
        assert!(matches!(select_action(&net, &norm, &obs(0.0), 0.0, &mut rng), Err(AgentError::NoTask)));
    }

    #[test]
    fn terminal_target_is_cost() {
        let sys = small_sys();
        let cfg = small_agent();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net = QNetwork::init(cfg.shape(&sys), &mut rng);
        let t = Trainer::new(net, cfg, Normalizer::new(&sys), rng);
        assert_eq!(t.compute_target(&experience(7.0, true)).unwrap(), 7.0);
    }

    #[test]
    fn insufficient_memory_is_a_no_op() {
        let sys = small_sys();
        let cfg = small_agent();
        let net = QNetwork::zeros(cfg.shape(&sys));
        let mut t = Trainer::new(net.clone(), cfg, Normalizer::new(&sys), ChaCha8Rng::seed_from_u64(2));
        t.memory.store(experience(1.0, false));
        assert_eq!(t.train_step().unwrap(), None);
        assert_eq!(t.update_count(), 0);
        assert_eq!(t.eval_net, net);
    }

    #[test]
    fn replace_threshold_one_syncs_every_step() {
        let sys = small_sys();
        let cfg = AgentConfig {
            replace_threshold: 1,
            ..small_agent()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net = QNetwork::init(cfg.shape(&sys), &mut rng);
        let mut t = Trainer::new(net, cfg, Normalizer::new(&sys), rng);
        t.memory.store(experience(1.0, false));
        t.memory.store(experience(4.0, true));
        for _ in 0..3 {
            t.train_step().unwrap().unwrap();
            assert_eq!(t.eval_net, t.target_net);
        }
    }

    #[test]
    fn message_round_trip() {
        let msgs = [
            Message::ParameterRequest { device: 3 },
            Message::ParameterResponse {
                device: 1,
                params: vec![1, 2, 3],
            },
            Message::ExperienceUpload {
                device: 0,
                episode: 9,
                birth_slot: 42,
                experience: experience(2.5, true),
            },
        ];
        for m in msgs {
            let bytes = m.encode();
            assert_eq!(Message::decode(&bytes).unwrap(), m);
            assert!(Message::decode(&bytes[..bytes.len() - 1]).is_err());
        }
    }

    #[test]
    fn duplicate_upload_ignored_and_unknown_device_rejected() {
        let sys = small_sys();
        let mut hub = TrainerHub::new(&sys, &small_agent(), 5).unwrap();
        let upload = |slot| Message::ExperienceUpload {
            device: 1,
            episode: 1,
            birth_slot: slot,
            experience: experience(1.0, false),
        };
        hub.route_message(upload(4)).unwrap();
        hub.route_message(upload(4)).unwrap();
        assert_eq!(hub.trainer(1).unwrap().memory.len(), 1);
        hub.route_message(upload(5)).unwrap();
        assert_eq!(hub.trainer(1).unwrap().memory.len(), 2);
        assert_eq!(hub.train_steps(), 1);
        assert!(matches!(
            hub.route_message(Message::ParameterRequest { device: 7 }),
            Err(AgentError::UnknownDevice(7))
        ));
    }

    #[test]
    fn trainer_assignment_ties_by_device_mod_edges() {
        assert_eq!(assign_trainers(&[1.0, 1.0, 1.0], 5), vec![0, 1, 2, 0, 1]);
        assert_eq!(assign_trainers(&[1.0, 2.0], 3), vec![1, 1, 1]);
    }

    #[test]
    fn bookkeeping_requires_stub_and_orders_by_birth() {
        let sys = small_sys();
        let mut dev = DeviceAgent::new(0, &sys);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        dev.act(3, obs(2e6), 1.0, &mut rng).unwrap();
        dev.observe_next(4, &obs(0.0));
        dev.act(4, obs(3e6), 1.0, &mut rng).unwrap();
        dev.observe_next(5, &obs(0.0));
        let event = |birth| CostEvent {
            task: crate::sim::TaskId(birth as u64),
            birth_slot: birth,
            exit_slot: 5,
            dropped: false,
            delay_slots: 6 - birth,
            cost: f64::from(6 - birth),
        };
        assert!(dev.completion_bookkeeping(1, &[]).unwrap().is_empty());
        let out = dev.completion_bookkeeping(1, &[event(4), event(3)]).unwrap();
        let births: Vec<Slot> = out
            .iter()
            .map(|m| match m {
                Message::ExperienceUpload { birth_slot, .. } => *birth_slot,
                _ => unreachable!(),
            })
            .collect();
        assert_eq!(births, vec![3, 4]);
        assert!(matches!(
            dev.completion_bookkeeping(1, &[event(3)]),
            Err(AgentError::MissingStub { birth_slot: 3, .. })
        ));
    }

    #[test]
    fn checkpoint_round_trip() {
        let sys = small_sys();
        let cfg = small_agent();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let net = QNetwork::init(cfg.shape(&sys), &mut rng);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("dev0.ckpt");
        save_checkpoint(&path, &net, 321).unwrap();
        let (back, count) = load_checkpoint(&path).unwrap();
        assert_eq!((back, count), (net, 321));
    }
}
