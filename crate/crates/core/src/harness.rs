//! Experiment driver: configuration, baseline policies, episode loops,
//! metrics and CSV output.

use std::fmt;
use std::fs::{File, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::{Duration, Instant};

use log::{debug, info};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent::{epsilon_schedule, AgentConfig, AgentError, DeviceAgent, TrainerHub};
use crate::config::{default_task_sizes_mbits, ConfigError, SystemConfig};
use crate::env::{write_trace_csv, Action, EnvError, Environment, EpisodeTally, Observation, TraceEvent};
use crate::nn::{HiddenSizes, OptimizerKind};
use crate::seed::{substream, Purpose};
use crate::sim::slots_needed;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Agent(#[from] AgentError),
    #[error("cannot parse config: {0}")]
    Parse(String),
    #[error("sweep axis `{0}` is not a numeric config key")]
    UnknownAxis(String),
    #[error("{path}: {source}")]
    Io { path: String, source: io::Error },
    #[error("{path}: {source}")]
    Csv { path: String, source: csv::Error },
    #[error("{0} already exists; pass the overwrite flag to replace it")]
    OutputExists(String),
    #[error(
        "episode {episode}: {arrivals} arrivals but {completed} completed + {dropped} dropped + {in_flight} in flight"
    )]
    Accounting {
        episode: u64,
        arrivals: u64,
        completed: u64,
        dropped: u64,
        in_flight: u64,
    },
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// How a device decides where its tasks go.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PolicyKind {
    NoOffload,
    Random,
    Myopic,
    Drl,
}

impl PolicyKind {
    pub const ALL: [PolicyKind; 4] = [PolicyKind::NoOffload, PolicyKind::Random, PolicyKind::Myopic, PolicyKind::Drl];

    pub fn name(self) -> &'static str {
        match self {
            PolicyKind::NoOffload => "no-offload",
            PolicyKind::Random => "random",
            PolicyKind::Myopic => "myopic",
            PolicyKind::Drl => "drl",
        }
    }
}

impl fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PolicyKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        PolicyKind::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| format!("unknown policy `{s}` (expected no-offload, random, myopic or drl)"))
    }
}

/// Everything one experiment needs, as a flat key-value document.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub num_devices: usize,
    pub num_edges: usize,
    pub episode_slots: u32,
    pub slot_seconds: f64,
    pub device_ghz: f64,
    pub edge_ghz: f64,
    pub tran_mbps: f64,
    pub task_sizes_mbits: Vec<f64>,
    pub density_gcycles_per_mbit: f64,
    pub deadline_slots: u32,
    pub arrival_probability: f64,
    pub drop_penalty: f64,
    pub history_slots: usize,

    pub episodes: u64,
    pub eval_episodes: u64,
    pub eval_epsilon: f64,
    pub lstm_hidden: usize,
    pub fc1_hidden: usize,
    pub fc2_hidden: usize,
    pub head_hidden: usize,
    pub learning_rate: f64,
    pub discount: f64,
    pub batch_size: usize,
    pub replace_threshold: u64,
    pub memory_capacity: usize,
    pub optimizer: OptimizerKind,

    /// Policy of every device not listed in `device_policies`.
    pub policy: PolicyKind,
    /// Optional per-device override, one entry per device.
    pub device_policies: Vec<PolicyKind>,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let sys = SystemConfig::default();
        let agent = AgentConfig::default();
        Self {
            num_devices: sys.num_devices,
            num_edges: sys.num_edges,
            episode_slots: sys.episode_slots,
            slot_seconds: sys.slot_seconds,
            device_ghz: sys.device_ghz,
            edge_ghz: sys.edge_ghz,
            tran_mbps: sys.tran_mbps,
            task_sizes_mbits: default_task_sizes_mbits(),
            density_gcycles_per_mbit: sys.density_gcycles_per_mbit,
            deadline_slots: sys.deadline_slots,
            arrival_probability: sys.arrival_probability,
            drop_penalty: sys.drop_penalty,
            history_slots: sys.history_slots,
            episodes: 200,
            eval_episodes: 20,
            eval_epsilon: 0.01,
            lstm_hidden: agent.hidden.lstm,
            fc1_hidden: agent.hidden.fc1,
            fc2_hidden: agent.hidden.fc2,
            head_hidden: agent.hidden.head,
            learning_rate: agent.learning_rate,
            discount: agent.discount,
            batch_size: agent.batch_size,
            replace_threshold: agent.replace_threshold,
            memory_capacity: agent.memory_capacity,
            optimizer: agent.optimizer,
            policy: PolicyKind::Drl,
            device_policies: Vec::new(),
            seed: 1,
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, HarnessError> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| HarnessError::Parse(e.to_string()))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        Self::from_toml(&text).map_err(|e| match e {
            HarnessError::Parse(msg) => HarnessError::Parse(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("flat config always serializes")
    }

    pub fn system(&self) -> SystemConfig {
        SystemConfig {
            num_devices: self.num_devices,
            num_edges: self.num_edges,
            episode_slots: self.episode_slots,
            slot_seconds: self.slot_seconds,
            device_ghz: self.device_ghz,
            edge_ghz: self.edge_ghz,
            tran_mbps: self.tran_mbps,
            task_sizes_mbits: self.task_sizes_mbits.clone(),
            density_gcycles_per_mbit: self.density_gcycles_per_mbit,
            deadline_slots: self.deadline_slots,
            arrival_probability: self.arrival_probability,
            drop_penalty: self.drop_penalty,
            history_slots: self.history_slots,
        }
    }

    pub fn agent(&self) -> AgentConfig {
        AgentConfig {
            hidden: HiddenSizes {
                lstm: self.lstm_hidden,
                fc1: self.fc1_hidden,
                fc2: self.fc2_hidden,
                head: self.head_hidden,
            },
            learning_rate: self.learning_rate,
            discount: self.discount,
            batch_size: self.batch_size,
            replace_threshold: self.replace_threshold,
            memory_capacity: self.memory_capacity,
            optimizer: self.optimizer,
        }
    }

    /// Policy of every device.
    pub fn policies(&self) -> Vec<PolicyKind> {
        if self.device_policies.is_empty() {
            vec![self.policy; self.num_devices]
        } else {
            self.device_policies.clone()
        }
    }

    pub fn uses_drl(&self) -> bool {
        self.policies().contains(&PolicyKind::Drl)
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        self.system().validate()?;
        if self.episodes == 0 {
            return Err(ConfigError::new("episodes", "must be at least 1").into());
        }
        if !(0.0..=1.0).contains(&self.eval_epsilon) {
            return Err(ConfigError::new("eval_epsilon", "must lie in [0, 1]").into());
        }
        if !self.device_policies.is_empty() && self.device_policies.len() != self.num_devices {
            return Err(ConfigError::new(
                "device_policies",
                format!("has {} entries for {} devices", self.device_policies.len(), self.num_devices),
            )
            .into());
        }
        if self.uses_drl() {
            self.agent().validate().map_err(|e| match e {
                AgentError::Config { field, reason } => HarnessError::Config(ConfigError::new(field, reason)),
                other => other.into(),
            })?;
        }
        Ok(())
    }

    /// Returns a copy with the numeric key `key` set to `value`.
    pub fn with_value(&self, key: &str, value: f64) -> Result<Self, HarnessError> {
        let mut table = toml::Table::try_from(self).expect("flat config always serializes");
        let slot = table.get_mut(key).ok_or_else(|| HarnessError::UnknownAxis(key.to_string()))?;
        *slot = match slot {
            toml::Value::Float(_) => toml::Value::Float(value),
            toml::Value::Integer(_) if value.fract() == 0.0 && value >= 0.0 => toml::Value::Integer(value as i64),
            toml::Value::Integer(_) => {
                return Err(HarnessError::Parse(format!("`{key}` takes whole numbers, got {value}")));
            }
            _ => return Err(HarnessError::UnknownAxis(key.to_string())),
        };
        table
            .try_into()
            .map_err(|e: toml::de::Error| HarnessError::Parse(e.to_string()))
    }
}

/// Always process locally.
pub fn policy_no_offload() -> Action {
    Action::Local
}

/// Uniform over local and every edge.
pub fn policy_random<R: Rng + ?Sized>(obs: &Observation, rng: &mut R) -> Action {
    let edges = obs.num_edges();
    Action::from_index(rng.gen_range(0..=edges), edges).expect("index within the action space")
}

/// Greedy finish-time estimator used as a non-learning reference.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Myopic {
    local_bits_per_slot: f64,
    tran_bits_per_slot: f64,
    edge_bits_per_slot: f64,
}

impl Myopic {
    pub fn new(sys: &SystemConfig) -> Self {
        Self {
            local_bits_per_slot: sys.local_bits_per_slot(),
            tran_bits_per_slot: sys.tran_bits_per_slot(),
            edge_bits_per_slot: sys.edge_bits_per_slot(),
        }
    }

    /// Estimated slots until the task is done for every action, local
    /// first. An edge's processing rate is its capacity split by the newest
    /// observed load level.
    pub fn estimates(&self, obs: &Observation) -> Vec<u32> {
        let size = obs.task_size_bits;
        let newest = obs.load_history.last();
        let mut out = Vec::with_capacity(obs.num_edges() + 1);
        out.push(obs.comp_wait_slots + slots_needed(size, self.local_bits_per_slot));
        for n in 0..obs.num_edges() {
            let load = newest.map_or(0, |row| row[n]).max(1);
            let share = self.edge_bits_per_slot / f64::from(load);
            out.push(obs.tran_wait_slots + slots_needed(size, self.tran_bits_per_slot) + slots_needed(size, share));
        }
        out
    }

    pub fn decide(&self, obs: &Observation) -> Action {
        let est = self.estimates(obs);
        let best = (0..est.len()).min_by_key(|&i| (est[i], i)).expect("at least the local action");
        Action::from_index(best, obs.num_edges()).expect("index within the action space")
    }
}

/// Per-episode metrics, in CSV column order.
#[derive(Clone, Debug, PartialEq, Deserialize)]
pub struct MetricsRow {
    pub episode: u64,
    pub arrivals: u64,
    pub completed: u64,
    pub dropped: u64,
    pub in_flight_at_end: u64,
    pub drop_ratio: f64,
    pub avg_delay_s: f64,
    /// Mean cost of the tasks that completed or were dropped.
    pub mean_cost: f64,
}

pub const CSV_HEADER: [&str; 8] = [
    "episode",
    "arrivals",
    "completed",
    "dropped",
    "in_flight_at_end",
    "drop_ratio",
    "avg_delay_s",
    "mean_cost",
];

impl MetricsRow {
    pub fn from_tally(episode: u64, tally: &EpisodeTally, slot_seconds: f64) -> Self {
        let ratio = |num: f64, den: u64| if den == 0 { 0.0 } else { num / den as f64 };
        Self {
            episode,
            arrivals: tally.arrivals,
            completed: tally.completed,
            dropped: tally.dropped,
            in_flight_at_end: tally.in_flight(),
            drop_ratio: ratio(tally.dropped as f64, tally.arrivals),
            avg_delay_s: ratio(tally.delay_slots as f64, tally.completed) * slot_seconds,
            mean_cost: ratio(tally.cost, tally.completed + tally.dropped),
        }
    }

    fn record(&self) -> [String; 8] {
        [
            self.episode.to_string(),
            self.arrivals.to_string(),
            self.completed.to_string(),
            self.dropped.to_string(),
            self.in_flight_at_end.to_string(),
            self.drop_ratio.to_string(),
            format!("{:.6}", self.avg_delay_s),
            self.mean_cost.to_string(),
        ]
    }
}

/// Writes the header and one line per row.
pub fn write_csv<W: Write>(rows: &[MetricsRow], out: W) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CSV_HEADER)?;
    for r in rows {
        w.write_record(r.record())?;
    }
    w.flush()?;
    Ok(())
}

/// Creates `path` and writes `rows` to it. An existing file is only
/// replaced when `overwrite` is set; appending is never done.
pub fn emit_csv(rows: &[MetricsRow], path: &Path, overwrite: bool) -> Result<(), HarnessError> {
    let file = create_output(path, overwrite)?;
    write_csv(rows, file).map_err(|source| HarnessError::Csv {
        path: path.display().to_string(),
        source,
    })
}

pub fn read_csv(path: &Path) -> Result<Vec<MetricsRow>, HarnessError> {
    let wrap = |source| HarnessError::Csv {
        path: path.display().to_string(),
        source,
    };
    let mut r = csv::Reader::from_path(path).map_err(wrap)?;
    r.deserialize().collect::<Result<_, _>>().map_err(wrap)
}

pub fn create_output(path: &Path, overwrite: bool) -> Result<File, HarnessError> {
    let mut opts = OpenOptions::new();
    opts.write(true);
    if overwrite {
        opts.create(true).truncate(true);
    } else {
        opts.create_new(true);
    }
    opts.open(path).map_err(|source| {
        if source.kind() == io::ErrorKind::AlreadyExists {
            HarnessError::OutputExists(path.display().to_string())
        } else {
            HarnessError::Io {
                path: path.display().to_string(),
                source,
            }
        }
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    /// Exploration follows the epsilon schedule and agents learn.
    Training,
    /// Fixed small exploration rate, no learning.
    Evaluation,
}

#[derive(Clone, Debug)]
pub struct EpisodeReport {
    pub phase: Phase,
    pub row: MetricsRow,
    pub wall_clock: Duration,
    /// Gradient steps taken during the episode.
    pub train_steps: u64,
}

/// One environment plus the deciders of all its devices.
pub struct Experiment {
    cfg: RunConfig,
    env: Environment,
    policies: Vec<PolicyKind>,
    myopic: Myopic,
    agents: Vec<Option<DeviceAgent>>,
    hub: Option<TrainerHub>,
}

impl Experiment {
    pub fn new(cfg: &RunConfig) -> Result<Self, HarnessError> {
        cfg.validate()?;
        let sys = cfg.system();
        let policies = cfg.policies();
        let hub = if cfg.uses_drl() {
            Some(TrainerHub::new(&sys, &cfg.agent(), cfg.seed)?)
        } else {
            None
        };
        let agents = policies
            .iter()
            .enumerate()
            .map(|(m, p)| (*p == PolicyKind::Drl).then(|| DeviceAgent::new(m, &sys)))
            .collect();
        Ok(Self {
            cfg: cfg.clone(),
            env: Environment::new(sys.clone(), cfg.seed)?,
            myopic: Myopic::new(&sys),
            policies,
            agents,
            hub,
        })
    }

    pub fn env(&self) -> &Environment {
        &self.env
    }

    pub fn hub(&self) -> Option<&TrainerHub> {
        self.hub.as_ref()
    }

    pub fn enable_trace(&mut self) {
        self.env.enable_trace();
    }

    pub fn take_trace(&mut self) -> Vec<TraceEvent> {
        self.env.take_trace()
    }

    /// Plays one full episode. Accounting is checked before returning.
    pub fn run_episode(&mut self, episode: u64, phase: Phase) -> Result<EpisodeReport, HarnessError> {
        let started = Instant::now();
        let steps_before = self.hub.as_ref().map_or(0, TrainerHub::train_steps);
        let learning = phase == Phase::Training;
        let epsilon = match phase {
            Phase::Training => epsilon_schedule(episode, self.cfg.episodes),
            Phase::Evaluation => self.cfg.eval_epsilon,
        };
        self.env.reset(episode)?;
        let mut rngs: Vec<_> = (0..self.policies.len())
            .map(|m| substream(self.cfg.seed, episode, m, Purpose::Policy))
            .collect();

        while !self.env.is_done() {
            let t = self.env.slot();
            for m in 0..self.policies.len() {
                if !self.env.needs_decision(m) {
                    continue;
                }
                let obs = self.env.observe(m);
                let action = match self.policies[m] {
                    PolicyKind::NoOffload => policy_no_offload(),
                    PolicyKind::Random => policy_random(&obs, &mut rngs[m]),
                    PolicyKind::Myopic => self.myopic.decide(&obs),
                    PolicyKind::Drl => {
                        let agent = self.agents[m].as_mut().expect("drl device has an agent");
                        let hub = self.hub.as_mut().expect("drl run has trainers");
                        if let Some(reply) = hub.route_message(agent.parameter_request())? {
                            agent.receive(reply)?;
                        }
                        agent.act(t, obs, epsilon, &mut rngs[m])?
                    }
                };
                self.env.apply_action(m, action)?;
            }
            let events = self.env.step_world()?;
            if learning {
                let hub = self.hub.as_mut();
                if let Some(hub) = hub {
                    for (m, agent) in self.agents.iter_mut().enumerate() {
                        let Some(agent) = agent else { continue };
                        agent.observe_next(t + 1, &self.env.observe(m));
                        for upload in agent.completion_bookkeeping(episode, &events[m])? {
                            hub.route_message(upload)?;
                        }
                    }
                }
            }
        }
        self.agents.iter_mut().flatten().for_each(DeviceAgent::end_episode);

        let tally = self.env.tally();
        let in_flight = self.env.tasks_in_system();
        if tally.completed + tally.dropped + in_flight != tally.arrivals {
            return Err(HarnessError::Accounting {
                episode,
                arrivals: tally.arrivals,
                completed: tally.completed,
                dropped: tally.dropped,
                in_flight,
            });
        }
        let row = MetricsRow::from_tally(episode, &tally, self.cfg.slot_seconds);
        let report = EpisodeReport {
            phase,
            row,
            wall_clock: started.elapsed(),
            train_steps: self.hub.as_ref().map_or(0, TrainerHub::train_steps) - steps_before,
        };
        info!(
            "episode {episode} ({:?}): drop_ratio {:.4}, avg_delay {:.3}s, {} train steps, {:.1} ms",
            phase,
            report.row.drop_ratio,
            report.row.avg_delay_s,
            report.train_steps,
            report.wall_clock.as_secs_f64() * 1e3
        );
        Ok(report)
    }

    /// Writes one checkpoint per learning device into `dir`.
    pub fn save_checkpoints(&self, dir: &Path) -> Result<Vec<PathBuf>, HarnessError> {
        let Some(hub) = &self.hub else {
            return Ok(Vec::new());
        };
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
        let mut written = Vec::new();
        for (m, agent) in self.agents.iter().enumerate() {
            if agent.is_some() {
                let path = dir.join(format!("device-{m}.ckpt"));
                hub.trainer(m).expect("trainer per device").save_checkpoint(&path)?;
                written.push(path);
            }
        }
        Ok(written)
    }
}

/// Rows of a finished experiment.
#[derive(Clone, Debug, Default)]
pub struct Outcome {
    pub training: Vec<MetricsRow>,
    /// Episodes `episodes + 1 ..= episodes + eval_episodes`.
    pub evaluation: Vec<MetricsRow>,
    pub train_steps: u64,
    pub wall_clock: Duration,
}

impl Outcome {
    /// Training rows followed by evaluation rows.
    pub fn all_rows(&self) -> Vec<MetricsRow> {
        self.training.iter().chain(&self.evaluation).cloned().collect()
    }

    /// Summary of the evaluation rows, or of the training rows when there
    /// was no evaluation.
    pub fn summary(&self) -> Summary {
        if self.evaluation.is_empty() {
            Summary::of(&self.training)
        } else {
            Summary::of(&self.evaluation)
        }
    }
}

/// Trains for `episodes` episodes, then evaluates for `eval_episodes`.
/// Devices with a fixed policy simply keep acting in both phases.
pub fn run_experiment(cfg: &RunConfig) -> Result<Outcome, HarnessError> {
    let mut exp = Experiment::new(cfg)?;
    run_with(&mut exp, cfg)
}

/// Like [`run_experiment`] on an already constructed experiment, e.g. one
/// with tracing enabled.
pub fn run_with(exp: &mut Experiment, cfg: &RunConfig) -> Result<Outcome, HarnessError> {
    let started = Instant::now();
    let mut out = Outcome::default();
    for episode in 1..=cfg.episodes {
        let r = exp.run_episode(episode, Phase::Training)?;
        out.train_steps += r.train_steps;
        out.training.push(r.row);
    }
    for k in 1..=cfg.eval_episodes {
        let r = exp.run_episode(cfg.episodes + k, Phase::Evaluation)?;
        out.evaluation.push(r.row);
    }
    out.wall_clock = started.elapsed();
    debug!(
        "experiment finished: {} train steps in {:.1} s",
        out.train_steps,
        out.wall_clock.as_secs_f64()
    );
    Ok(out)
}

/// Episode-averaged metrics.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Summary {
    pub episodes: u64,
    pub arrivals: u64,
    pub completed: u64,
    pub dropped: u64,
    /// Mean of per-episode drop ratios.
    pub drop_ratio: f64,
    /// Mean of per-episode average delays, over episodes with completions.
    pub avg_delay_s: f64,
    pub mean_cost: f64,
}

impl Summary {
    pub fn of(rows: &[MetricsRow]) -> Self {
        let mut s = Summary {
            episodes: rows.len() as u64,
            ..Summary::default()
        };
        let mut delay_rows = 0usize;
        for r in rows {
            s.arrivals += r.arrivals;
            s.completed += r.completed;
            s.dropped += r.dropped;
            s.drop_ratio += r.drop_ratio;
            s.mean_cost += r.mean_cost;
            if r.completed > 0 {
                s.avg_delay_s += r.avg_delay_s;
                delay_rows += 1;
            }
        }
        if !rows.is_empty() {
            s.drop_ratio /= rows.len() as f64;
            s.mean_cost /= rows.len() as f64;
        }
        if delay_rows > 0 {
            s.avg_delay_s /= delay_rows as f64;
        }
        s
    }
}

/// One point of a sweep.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub value: f64,
    pub seed: u64,
    pub summary: Summary,
}

pub const SWEEP_HEADER: [&str; 9] = [
    "value",
    "seed",
    "episodes",
    "arrivals",
    "completed",
    "dropped",
    "drop_ratio",
    "avg_delay_s",
    "mean_cost",
];

/// Runs `base` once per (value, seed) with config key `axis` set to the
/// value and `seed` replaced.
pub fn sweep(base: &RunConfig, axis: &str, values: &[f64], seeds: &[u64]) -> Result<Vec<SweepRow>, HarnessError> {
    let mut rows = Vec::with_capacity(values.len() * seeds.len());
    for &value in values {
        let cfg = base.with_value(axis, value)?;
        for &seed in seeds {
            let run = RunConfig { seed, ..cfg.clone() };
            let outcome = run_experiment(&run)?;
            let summary = outcome.summary();
            info!("{axis} = {value}, seed {seed}: drop_ratio {:.4}", summary.drop_ratio);
            rows.push(SweepRow { value, seed, summary });
        }
    }
    Ok(rows)
}

pub fn write_sweep_csv<W: Write>(rows: &[SweepRow], out: W) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(SWEEP_HEADER)?;
    for r in rows {
        let s = &r.summary;
        w.write_record([
            r.value.to_string(),
            r.seed.to_string(),
            s.episodes.to_string(),
            s.arrivals.to_string(),
            s.completed.to_string(),
            s.dropped.to_string(),
            s.drop_ratio.to_string(),
            format!("{:.6}", s.avg_delay_s),
            s.mean_cost.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn emit_sweep_csv(rows: &[SweepRow], path: &Path, overwrite: bool) -> Result<(), HarnessError> {
    let file = create_output(path, overwrite)?;
    write_sweep_csv(rows, file).map_err(|source| HarnessError::Csv {
        path: path.display().to_string(),
        source,
    })
}

/// Writes the per-slot trace, refusing to clobber unless `overwrite`.
pub fn emit_trace(events: &[TraceEvent], path: &Path, overwrite: bool) -> Result<(), HarnessError> {
    drop(create_output(path, overwrite)?);
    write_trace_csv(path, events).map_err(HarnessError::from)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn obs(size_mbits: f64, comp: u32, tran: u32, loads: Vec<u32>) -> Observation {
        let n = loads.len();
        Observation {
            task_size_bits: size_mbits * 1e6,
            comp_wait_slots: comp,
            tran_wait_slots: tran,
            edge_queue_bits: vec![0.0; n],
            load_history: vec![vec![0; n], loads],
        }
    }

    #[test]
    fn defaults_match_parameter_table() {
        let cfg = RunConfig::default();
        assert_eq!((cfg.num_devices, cfg.num_edges), (50, 5));
        assert_eq!(cfg.task_sizes_mbits.len(), 31);
        assert_eq!(cfg.deadline_slots, 10);
        assert_eq!(cfg.discount, 0.9);
        assert_eq!(cfg.policy, PolicyKind::Drl);
        cfg.validate().unwrap();
        assert_eq!(RunConfig::from_toml("").unwrap(), cfg);
    }

    #[test]
    fn toml_round_trip_and_unknown_keys() {
        let cfg = RunConfig {
            policy: PolicyKind::Myopic,
            arrival_probability: 0.5,
            ..RunConfig::default()
        };
        assert_eq!(RunConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
        assert!(matches!(RunConfig::from_toml("num_device = 3"), Err(HarnessError::Parse(_))));
        let parsed = RunConfig::from_toml("policy = \"no-offload\"\nnum_devices = 4").unwrap();
        assert_eq!(parsed.policies(), vec![PolicyKind::NoOffload; 4]);
    }

    #[test]
    fn validation_names_the_field() {
        let bad = RunConfig {
            arrival_probability: 1.5,
            ..RunConfig::default()
        };
        match bad.validate() {
            Err(HarnessError::Config(e)) => assert_eq!(e.field, "arrival_probability"),
            other => panic!("unexpected {other:?}"),
        }
        let bad = RunConfig {
            device_policies: vec![PolicyKind::Random; 3],
            ..RunConfig::default()
        };
        assert!(matches!(bad.validate(), Err(HarnessError::Config(e)) if e.field == "device_policies"));
    }

    #[test]
    fn sweep_value_substitution() {
        let base = RunConfig::default();
        assert_eq!(base.with_value("edge_ghz", 20.0).unwrap().edge_ghz, 20.0);
        assert_eq!(base.with_value("deadline_slots", 7.0).unwrap().deadline_slots, 7);
        assert!(base.with_value("deadline_slots", 7.5).is_err());
        assert!(matches!(base.with_value("policy", 1.0), Err(HarnessError::UnknownAxis(_))));
        assert!(matches!(base.with_value("nope", 1.0), Err(HarnessError::UnknownAxis(_))));
    }

    #[test]
    fn policy_names_parse() {
        for p in PolicyKind::ALL {
            assert_eq!(p.name().parse::<PolicyKind>().unwrap(), p);
        }
        assert!("greedy".parse::<PolicyKind>().is_err());
    }

    #[test]
    fn random_policy_with_no_edges_is_local() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..20 {
            assert_eq!(policy_random(&obs(2.0, 0, 0, vec![]), &mut rng), Action::Local);
        }
    }

    #[test]
    fn myopic_choices() {
        let sys = SystemConfig {
            num_edges: 2,
            ..SystemConfig::default()
        };
        let my = Myopic::new(&sys);
        // 2 Mbit: local 3 slots; edge 2 (upload) + 1 (processing) = 3 -> tie, local.
        assert_eq!(my.decide(&obs(2.0, 0, 0, vec![0, 0])), Action::Local);
        // 5 Mbit: local 6 slots; edge 4 + 1 = 5.
        assert_eq!(my.estimates(&obs(5.0, 0, 0, vec![0, 3])), vec![6, 5, 6]);
        assert_eq!(my.decide(&obs(5.0, 0, 0, vec![0, 3])), Action::Offload(0));
        // A heavily loaded first edge pushes the choice to the second.
        assert_eq!(my.decide(&obs(5.0, 0, 0, vec![40, 0])), Action::Offload(1));
        // Long upload backlog keeps the task local.
        assert_eq!(my.decide(&obs(5.0, 0, 10, vec![0, 0])), Action::Local);
    }

    #[test]
    fn metrics_row_ratios() {
        let tally = EpisodeTally {
            arrivals: 10,
            completed: 6,
            dropped: 2,
            delay_slots: 27,
            cost: 67.0,
        };
        let row = MetricsRow::from_tally(3, &tally, 0.1);
        assert_eq!(row.in_flight_at_end, 2);
        assert_eq!(row.drop_ratio, 0.2);
        assert!((row.avg_delay_s - 0.45).abs() < 1e-12);
        assert!((row.mean_cost - 67.0 / 8.0).abs() < 1e-12);
        let empty = MetricsRow::from_tally(1, &EpisodeTally::default(), 0.1);
        assert_eq!((empty.drop_ratio, empty.avg_delay_s, empty.mean_cost), (0.0, 0.0, 0.0));
    }

    #[test]
    fn csv_header_only_and_no_clobber() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        emit_csv(&[], &path, false).unwrap();
        assert_eq!(std::fs::read_to_string(&path).unwrap(), format!("{}\n", CSV_HEADER.join(",")));
        assert!(matches!(emit_csv(&[], &path, false), Err(HarnessError::OutputExists(_))));
        emit_csv(&[], &path, true).unwrap();
    }
}
