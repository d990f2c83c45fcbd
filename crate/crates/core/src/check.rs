//! Self-checks behind the `check` subcommand.
//!
//! Each check is small enough to run in a few seconds and reports a single
//! pass/fail line. The queueing check replays random episodes through a
//! plain per-slot bit-budget simulator that shares no code with the
//! closed-form queues in [`crate::sim`] and [`crate::edge`].

use std::collections::{BTreeMap, VecDeque};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::agent::{AgentConfig, Experience, Normalizer, Trainer};
use crate::config::SystemConfig;
use crate::env::{Action, Environment, Observation};
use crate::harness::{run_experiment, write_csv, PolicyKind, RunConfig};
use crate::nn::{HiddenSizes, NetInput, NetShape, QNetwork};
use crate::sim::{Slot, Task, TaskId, BIT_TOLERANCE};

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl CheckResult {
    fn new(name: &'static str, passed: bool, detail: impl Into<String>) -> Self {
        Self {
            name,
            passed,
            detail: detail.into(),
        }
    }
}

/// Runs every check with randomness derived from `seed`.
pub fn run_all(seed: u64) -> Vec<CheckResult> {
    vec![
        queue_oracle(200, seed),
        gradient_check(seed),
        dueling_identity(100, seed),
        double_dqn_target(),
        accounting(seed),
        determinism(seed),
    ]
}

/// A task and where it was sent, as seen by the brute-force simulator.
#[derive(Clone, Debug)]
pub struct Decision {
    pub task: Task,
    pub action: Action,
}

/// Slot in which a task left the system and whether it was dropped.
pub type Fate = (Slot, bool);

struct Job {
    id: TaskId,
    size: f64,
    remaining: f64,
    deadline: Slot,
    edge: Option<usize>,
}

impl Job {
    fn new(task: &Task, edge: Option<usize>) -> Self {
        Self {
            id: task.id,
            size: task.size_bits,
            remaining: task.size_bits,
            deadline: task.deadline_slot(),
            edge,
        }
    }
}

/// Serves the head of `queue` with `budget` bits. Returns the job if it
/// finished.
fn serve_head(queue: &mut VecDeque<Job>, budget: f64) -> Option<Job> {
    let head = queue.front_mut()?;
    head.remaining -= budget;
    if head.remaining <= BIT_TOLERANCE {
        queue.pop_front()
    } else {
        None
    }
}

fn expire(queue: &mut VecDeque<Job>, slot: Slot, fates: &mut BTreeMap<TaskId, Fate>) {
    queue.retain(|j| {
        let gone = j.deadline == slot;
        if gone {
            fates.insert(j.id, (slot, true));
        }
        !gone
    });
}

/// Per-slot simulation: every queue head receives its slot's bit budget,
/// each edge splits its budget equally over non-empty per-device queues,
/// and anything unfinished at the end of its deadline slot is dropped.
/// Tasks still in the system after the last slot have no fate.
pub fn brute_force(cfg: &SystemConfig, decisions: &[Decision]) -> BTreeMap<TaskId, Fate> {
    let (m_count, n_count) = (cfg.num_devices, cfg.num_edges);
    let local = cfg.device_ghz * 1e9 * cfg.slot_seconds / (cfg.density_gcycles_per_mbit * 1e3);
    let uplink = cfg.tran_mbps * 1e6 * cfg.slot_seconds;
    let edge = cfg.edge_ghz * 1e9 * cfg.slot_seconds / (cfg.density_gcycles_per_mbit * 1e3);

    let mut comp: Vec<VecDeque<Job>> = (0..m_count).map(|_| VecDeque::new()).collect();
    let mut tran: Vec<VecDeque<Job>> = (0..m_count).map(|_| VecDeque::new()).collect();
    let mut edges: Vec<Vec<VecDeque<Job>>> = (0..n_count)
        .map(|_| (0..m_count).map(|_| VecDeque::new()).collect())
        .collect();
    let mut in_transit: Vec<(Slot, usize, usize, Job)> = Vec::new();
    let mut fates = BTreeMap::new();

    for s in 1..=cfg.episode_slots {
        let (arriving, rest): (Vec<_>, Vec<_>) = in_transit.into_iter().partition(|(at, ..)| *at == s);
        in_transit = rest;
        for (_, n, m, job) in arriving {
            edges[n][m].push_back(job);
        }
        for d in decisions.iter().filter(|d| d.task.birth_slot == s) {
            let m = d.task.device;
            match d.action {
                Action::Local => comp[m].push_back(Job::new(&d.task, None)),
                Action::Offload(n) => tran[m].push_back(Job::new(&d.task, Some(n))),
            }
        }

        for queues in edges.iter_mut() {
            let busy = queues.iter().filter(|q| !q.is_empty()).count();
            if busy > 0 {
                let share = edge / busy as f64;
                for q in queues.iter_mut() {
                    if let Some(done) = serve_head(q, share) {
                        fates.insert(done.id, (s, false));
                    }
                }
            }
            for q in queues.iter_mut() {
                expire(q, s, &mut fates);
            }
        }
        for m in 0..m_count {
            if let Some(done) = serve_head(&mut comp[m], local) {
                fates.insert(done.id, (s, false));
            }
            expire(&mut comp[m], s, &mut fates);
            if let Some(sent) = serve_head(&mut tran[m], uplink) {
                if s >= sent.deadline {
                    fates.insert(sent.id, (s, true));
                } else {
                    let n = sent.edge.expect("uplink jobs have a target");
                    let job = Job {
                        remaining: sent.size,
                        ..sent
                    };
                    in_transit.push((s + 1, n, m, job));
                }
            }
            expire(&mut tran[m], s, &mut fates);
        }
    }
    fates
}

/// Random small system for the queueing check.
pub fn random_system<R: Rng + ?Sized>(rng: &mut R) -> SystemConfig {
    let pick = |rng: &mut R, xs: &[f64]| xs[rng.gen_range(0..xs.len())];
    let sizes: Vec<f64> = (0..rng.gen_range(1..=4)).map(|_| f64::from(rng.gen_range(5..=60)) / 10.0).collect();
    SystemConfig {
        num_devices: rng.gen_range(1..=3),
        num_edges: rng.gen_range(1..=2),
        episode_slots: rng.gen_range(5..=30),
        device_ghz: pick(rng, &[0.5, 1.0, 2.5, 2.97, 5.0]),
        edge_ghz: pick(rng, &[2.97, 5.94, 10.0, 41.8]),
        tran_mbps: pick(rng, &[5.0, 10.0, 14.0, 30.0]),
        task_sizes_mbits: sizes,
        deadline_slots: rng.gen_range(1..=12),
        arrival_probability: rng.gen_range(0.2..=1.0),
        history_slots: 3,
        ..SystemConfig::default()
    }
}

/// Plays one episode of `cfg` with uniformly random actions and returns
/// the decisions together with the fates reported by the environment.
pub fn random_episode(
    cfg: &SystemConfig,
    seed: u64,
) -> Result<(Vec<Decision>, BTreeMap<TaskId, Fate>, u64), crate::env::EnvError> {
    let mut env = Environment::new(cfg.clone(), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED);
    let mut decisions = Vec::new();
    let mut fates = BTreeMap::new();
    while !env.is_done() {
        for m in 0..cfg.num_devices {
            if let Some(task) = env.arrival(m).cloned() {
                let action = Action::from_index(rng.gen_range(0..=cfg.num_edges), cfg.num_edges)?;
                env.apply_action(m, action)?;
                decisions.push(Decision { task, action });
            }
        }
        for events in env.step_world()? {
            for e in events {
                fates.insert(e.task, (e.exit_slot, e.dropped));
            }
        }
    }
    Ok((decisions, fates, env.tasks_in_system()))
}

/// Environment fates equal brute-force fates on `instances` random systems.
pub fn queue_oracle(instances: usize, seed: u64) -> CheckResult {
    const NAME: &str = "queue_oracle";
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tasks = 0usize;
    for i in 0..instances {
        let cfg = random_system(&mut rng);
        let (decisions, env_fates, in_flight) = match random_episode(&cfg, rng.gen()) {
            Ok(x) => x,
            Err(e) => return CheckResult::new(NAME, false, format!("instance {i}: {e}")),
        };
        let oracle = brute_force(&cfg, &decisions);
        if oracle != env_fates {
            let diff = decisions
                .iter()
                .find(|d| oracle.get(&d.task.id) != env_fates.get(&d.task.id))
                .map(|d| {
                    format!(
                        "task {} ({:?}): oracle {:?}, env {:?}",
                        d.task.id,
                        d.action,
                        oracle.get(&d.task.id),
                        env_fates.get(&d.task.id)
                    )
                })
                .unwrap_or_default();
            return CheckResult::new(NAME, false, format!("instance {i}: {diff}"));
        }
        if decisions.len() as u64 != oracle.len() as u64 + in_flight {
            return CheckResult::new(NAME, false, format!("instance {i}: in-flight count differs"));
        }
        tasks += decisions.len();
    }
    CheckResult::new(NAME, true, format!("{instances} instances, {tasks} tasks"))
}

/// Layer sizes used by the network checks.
pub fn reduced_shape() -> NetShape {
    NetShape::for_system(
        2,
        3,
        HiddenSizes {
            lstm: 4,
            fc1: 8,
            fc2: 8,
            head: 8,
        },
    )
}

fn random_input<R: Rng + ?Sized>(shape: NetShape, rng: &mut R) -> NetInput {
    NetInput {
        scalars: (0..shape.scalar_features).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        sequence: (0..shape.history * shape.seq_features).map(|_| rng.gen_range(0.0..1.0)).collect(),
    }
}

/// Central differences against backpropagation for every parameter, with
/// step `1e-4` and relative tolerance `1e-3`. Gradients below `1e-7` in
/// absolute difference are accepted as both being zero.
pub fn gradient_check(seed: u64) -> CheckResult {
    const NAME: &str = "gradient_check";
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = reduced_shape();
    let mut net = QNetwork::init(shape, &mut rng);
    for (_, g) in net.groups_mut() {
        g.iter_mut().for_each(|v| *v += 0.05);
    }
    let x = random_input(shape, &mut rng);
    let weights: Vec<f64> = (0..shape.actions).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let loss = |n: &QNetwork| -> f64 {
        let q = n.q_values(&x).expect("shape matches");
        q.iter().zip(&weights).map(|(q, w)| q * w).sum()
    };
    let grad = net.backward(&net.forward(&x).expect("shape matches").trace, &weights);
    let h = 1e-4;
    let mut checked = 0;
    let mut worst = 0.0f64;
    for gi in 0..grad.groups().len() {
        let (name, analytic) = grad.groups()[gi];
        for (k, &a) in analytic.iter().enumerate() {
            let mut plus = net.clone();
            plus.groups_mut()[gi].1[k] += h;
            let mut minus = net.clone();
            minus.groups_mut()[gi].1[k] -= h;
            let numeric = (loss(&plus) - loss(&minus)) / (2.0 * h);
            let diff = (numeric - a).abs();
            let scale = numeric.abs().max(a.abs());
            if diff > 1e-7 && diff > 1e-3 * scale {
                return CheckResult::new(NAME, false, format!("{name}[{k}]: numeric {numeric:e}, analytic {a:e}"));
            }
            if scale > 0.0 {
                worst = worst.max(diff / scale);
            }
            checked += 1;
        }
    }
    CheckResult::new(NAME, true, format!("{checked} parameters, worst relative error {worst:.2e}"))
}

/// Mean Q over actions equals the value head.
pub fn dueling_identity(inputs: usize, seed: u64) -> CheckResult {
    const NAME: &str = "dueling_identity";
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = reduced_shape();
    let net = QNetwork::init(shape, &mut rng);
    let mut worst = 0.0f64;
    for _ in 0..inputs {
        let out = net.forward(&random_input(shape, &mut rng)).expect("shape matches");
        let mean = out.q.iter().sum::<f64>() / out.q.len() as f64;
        worst = worst.max((mean - out.value).abs());
    }
    CheckResult::new(NAME, worst <= 1e-6, format!("{inputs} inputs, max deviation {worst:.2e}"))
}

/// A network whose Q-values are `q` for every input.
pub fn constant_net(shape: NetShape, q: &[f64]) -> QNetwork {
    let mut net = QNetwork::zeros(shape);
    net.adv_out.bias = q.to_vec();
    net.val_out.bias[0] = q.iter().sum::<f64>() / q.len() as f64;
    net
}

/// Target uses the evaluation network's argmin and the target network's
/// value: eval Q = (5, 2, 7) picks action 1, target Q(1) = 4, so the target
/// for cost 3 is 3 + 0.9 * 4.
pub fn double_dqn_target() -> CheckResult {
    const NAME: &str = "double_dqn_target";
    let shape = reduced_shape();
    let sys = SystemConfig {
        num_edges: 2,
        history_slots: 3,
        ..SystemConfig::default()
    };
    let mut trainer = Trainer::new(
        constant_net(shape, &[5.0, 2.0, 7.0]),
        AgentConfig::default(),
        Normalizer::new(&sys),
        ChaCha8Rng::seed_from_u64(0),
    );
    trainer.target_net = constant_net(shape, &[1.0, 4.0, 0.5]);
    let obs = Observation::zeros(2, 3);
    let e = Experience {
        state: obs.clone(),
        action: Action::Local,
        cost: 3.0,
        next_state: obs,
        terminal: false,
    };
    let expected = 3.0 + 0.9 * 4.0;
    match trainer.compute_target(&e) {
        Ok(got) => CheckResult::new(
            NAME,
            (got - expected).abs() < 1e-12,
            format!("target {got}, expected {expected}"),
        ),
        Err(err) => CheckResult::new(NAME, false, err.to_string()),
    }
}

fn small_run(policy: PolicyKind, seed: u64) -> RunConfig {
    RunConfig {
        num_devices: 4,
        num_edges: 2,
        episode_slots: 50,
        episodes: 3,
        eval_episodes: 1,
        lstm_hidden: 4,
        fc1_hidden: 8,
        fc2_hidden: 8,
        head_hidden: 4,
        batch_size: 8,
        arrival_probability: 0.6,
        policy,
        seed,
        ..RunConfig::default()
    }
}

/// Every policy finishes its episodes with balanced accounting.
pub fn accounting(seed: u64) -> CheckResult {
    const NAME: &str = "accounting";
    let mut episodes = 0;
    for policy in PolicyKind::ALL {
        match run_experiment(&small_run(policy, seed)) {
            Ok(out) => {
                for r in out.all_rows() {
                    if r.arrivals != r.completed + r.dropped + r.in_flight_at_end {
                        return CheckResult::new(NAME, false, format!("{policy}: episode {} unbalanced", r.episode));
                    }
                    episodes += 1;
                }
            }
            Err(e) => return CheckResult::new(NAME, false, format!("{policy}: {e}")),
        }
    }
    CheckResult::new(NAME, true, format!("{episodes} episodes balanced"))
}

/// Two baseline runs with the same seed give identical CSV bytes.
pub fn determinism(seed: u64) -> CheckResult {
    const NAME: &str = "determinism";
    for policy in [PolicyKind::NoOffload, PolicyKind::Random, PolicyKind::Myopic] {
        let bytes = || -> Result<Vec<u8>, String> {
            let out = run_experiment(&small_run(policy, seed)).map_err(|e| e.to_string())?;
            let mut buf = Vec::new();
            write_csv(&out.all_rows(), &mut buf).map_err(|e| e.to_string())?;
            Ok(buf)
        };
        match (bytes(), bytes()) {
            (Ok(a), Ok(b)) if a == b => {}
            (Ok(_), Ok(_)) => return CheckResult::new(NAME, false, format!("{policy}: CSV bytes differ")),
            (Err(e), _) | (_, Err(e)) => return CheckResult::new(NAME, false, format!("{policy}: {e}")),
        }
    }
    CheckResult::new(NAME, true, "baseline CSVs identical across repeated runs")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_checks_pass() {
        for r in run_all(7) {
            assert!(r.passed, "{}: {}", r.name, r.detail);
        }
    }

    #[test]
    fn brute_force_single_local_task() {
        let cfg = SystemConfig {
            num_devices: 1,
            num_edges: 1,
            episode_slots: 10,
            ..SystemConfig::default()
        };
        let task = Task {
            id: TaskId(1),
            device: 0,
            birth_slot: 2,
            size_bits: 2.0e6,
            density_cycles_per_bit: 297.0,
            deadline_slots: 10,
        };
        let fates = brute_force(
            &cfg,
            &[Decision {
                task,
                action: Action::Local,
            }],
        );
        // 2 Mbit at ~0.84 Mbit per slot needs 3 slots: 2, 3, 4.
        assert_eq!(fates[&TaskId(1)], (4, false));
    }
}
