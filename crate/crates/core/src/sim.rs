//! Mobile-device side of the system: task arrivals and the two serial
//! queues (local computation and uplink transmission).
//!
//! Both queues are first-in first-out and non-preemptive. A task that
//! finishes (or is dropped) in slot `l` frees the queue at the end of that
//! slot, and the next task starts at the beginning of slot `l + 1`. Because
//! service rates on the device are constant, the exit slot of a task is
//! known the moment it is enqueued:
//!
//! ```text
//! wait(t)  = [ max_{t' < t} exit(t') - t + 1 ]^+
//! exit(t)  = min( t + wait(t) + ceil(size / rate) - 1,  t + deadline - 1 )
//! ```

use std::collections::BTreeMap;

use rand::Rng;
use thiserror::Error;

/// One-based slot index within an episode. Slot 0 means "never".
pub type Slot = u32;
pub type DeviceId = usize;
pub type EdgeId = usize;

/// Absolute tolerance (in bits) under which a remaining workload counts as
/// finished. Guards the ceiling in the closed forms against accumulated
/// rounding in per-slot accounting.
pub const BIT_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Error, PartialEq)]
pub enum SimError {
    #[error("{what} must be positive, got {value}")]
    NonPositiveCapacity { what: &'static str, value: f64 },
    #[error("offloaded task must select exactly one edge node, got {0}")]
    EdgeSelection(usize),
    #[error("edge selection has {got} entries but the system has {expected} edge nodes")]
    SelectionLength { expected: usize, got: usize },
    #[error("invalid task: {0}")]
    InvalidTask(&'static str),
}

/// Unique identifier of a task within one run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TaskId(pub u64);

impl std::fmt::Display for TaskId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        self.0.fmt(f)
    }
}

/// Hands out strictly increasing task ids, starting at 1.
#[derive(Clone, Debug, Default)]
pub struct TaskIds {
    last: u64,
}

impl TaskIds {
    pub fn next_id(&mut self) -> TaskId {
        self.last += 1;
        TaskId(self.last)
    }
}

/// A single non-divisible computational job.
#[derive(Clone, Debug, PartialEq)]
pub struct Task {
    pub id: TaskId,
    pub device: DeviceId,
    pub birth_slot: Slot,
    pub size_bits: f64,
    pub density_cycles_per_bit: f64,
    /// Relative deadline in slots; the task is dropped if unfinished at the
    /// end of slot `birth_slot + deadline_slots - 1`.
    pub deadline_slots: u32,
}

impl Task {
    pub fn validate(&self) -> Result<(), SimError> {
        if !(self.size_bits > 0.0) {
            return Err(SimError::InvalidTask("size must be positive"));
        }
        if !(self.density_cycles_per_bit > 0.0) {
            return Err(SimError::InvalidTask("processing density must be positive"));
        }
        if self.deadline_slots == 0 {
            return Err(SimError::InvalidTask("deadline must be at least one slot"));
        }
        if self.birth_slot == 0 {
            return Err(SimError::InvalidTask("birth slot is one-based"));
        }
        Ok(())
    }

    /// Last slot in which the task may still finish.
    pub fn deadline_slot(&self) -> Slot {
        self.birth_slot + self.deadline_slots - 1
    }
}

/// Bernoulli task arrivals with sizes drawn uniformly from a finite set.
#[derive(Clone, Debug)]
pub struct ArrivalProcess<R> {
    probability: f64,
    sizes_bits: Vec<f64>,
    density_cycles_per_bit: f64,
    deadline_slots: u32,
    rng: R,
}

impl<R: Rng> ArrivalProcess<R> {
    pub fn new(
        probability: f64,
        sizes_bits: Vec<f64>,
        density_cycles_per_bit: f64,
        deadline_slots: u32,
        rng: R,
    ) -> Result<Self, SimError> {
        if !(0.0..=1.0).contains(&probability) {
            return Err(SimError::InvalidTask("arrival probability must lie in [0, 1]"));
        }
        if sizes_bits.is_empty() || sizes_bits.iter().any(|s| !(*s > 0.0)) {
            return Err(SimError::InvalidTask("size set must be non-empty and positive"));
        }
        if !(density_cycles_per_bit > 0.0) || deadline_slots == 0 {
            return Err(SimError::InvalidTask("density and deadline must be positive"));
        }
        Ok(Self {
            probability,
            sizes_bits,
            density_cycles_per_bit,
            deadline_slots,
            rng,
        })
    }

    /// Draws the arrival of `device` in `slot`, if any.
    pub fn draw(&mut self, device: DeviceId, slot: Slot, ids: &mut TaskIds) -> Option<Task> {
        if !self.rng.gen_bool(self.probability) {
            return None;
        }
        let size_bits = self.sizes_bits[self.rng.gen_range(0..self.sizes_bits.len())];
        Some(Task {
            id: ids.next_id(),
            device,
            birth_slot: slot,
            size_bits,
            density_cycles_per_bit: self.density_cycles_per_bit,
            deadline_slots: self.deadline_slots,
        })
    }
}

/// Number of whole slots needed to push `bits` through a server of
/// `bits_per_slot`. Always at least one.
pub fn slots_needed(bits: f64, bits_per_slot: f64) -> u32 {
    let slots = ((bits - BIT_TOLERANCE) / bits_per_slot).ceil();
    slots.max(1.0) as u32
}

/// Slot in which a queued task leaves its queue, and whether it left
/// because its deadline expired.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct QueueExit {
    pub slot: Slot,
    pub dropped: bool,
}

fn exit_slot(task: &Task, wait: u32, service_slots: u32) -> QueueExit {
    let finish = task.birth_slot + wait + service_slots - 1;
    let deadline = task.deadline_slot();
    QueueExit {
        slot: finish.min(deadline),
        dropped: finish > deadline,
    }
}

/// Exit slot of a task placed in the computation queue after waiting
/// `wait` slots, given the device's cycles per slot.
pub fn comp_finish(task: &Task, wait: u32, cycles_per_slot: f64) -> Result<QueueExit, SimError> {
    if !(cycles_per_slot > 0.0) {
        return Err(SimError::NonPositiveCapacity {
            what: "device processing capacity",
            value: cycles_per_slot,
        });
    }
    let bits_per_slot = cycles_per_slot / task.density_cycles_per_bit;
    Ok(exit_slot(task, wait, slots_needed(task.size_bits, bits_per_slot)))
}

/// Exit slot of a task placed in the transmission queue. `selection` is the
/// per-edge offloading indicator and must mark exactly one edge.
pub fn tran_finish(
    task: &Task,
    wait: u32,
    selection: &[bool],
    bits_per_slot: &[f64],
) -> Result<QueueExit, SimError> {
    if selection.len() != bits_per_slot.len() {
        return Err(SimError::SelectionLength {
            expected: bits_per_slot.len(),
            got: selection.len(),
        });
    }
    let chosen: Vec<usize> = selection
        .iter()
        .enumerate()
        .filter_map(|(n, &on)| on.then_some(n))
        .collect();
    let &[edge] = chosen.as_slice() else {
        return Err(SimError::EdgeSelection(chosen.len()));
    };
    let rate = bits_per_slot[edge];
    if !(rate > 0.0) {
        return Err(SimError::NonPositiveCapacity {
            what: "transmission capacity",
            value: rate,
        });
    }
    Ok(exit_slot(task, wait, slots_needed(task.size_bits, rate)))
}

fn wait_after(history: &BTreeMap<Slot, Slot>, t: Slot) -> u32 {
    let busy_until = history.range(..t).map(|(_, &l)| l).max().unwrap_or(0);
    (busy_until + 1).saturating_sub(t)
}

/// Per-device record of when each queued task leaves the computation and
/// transmission queues, keyed by birth slot.
#[derive(Clone, Debug)]
pub struct DeviceTimeline {
    comp_exits: BTreeMap<Slot, Slot>,
    tran_exits: BTreeMap<Slot, Slot>,
    cycles_per_slot: f64,
    tran_bits_per_slot: Vec<f64>,
}

impl DeviceTimeline {
    pub fn new(cycles_per_slot: f64, tran_bits_per_slot: Vec<f64>) -> Result<Self, SimError> {
        if !(cycles_per_slot > 0.0) {
            return Err(SimError::NonPositiveCapacity {
                what: "device processing capacity",
                value: cycles_per_slot,
            });
        }
        if let Some(&bad) = tran_bits_per_slot.iter().find(|r| !(**r > 0.0)) {
            return Err(SimError::NonPositiveCapacity {
                what: "transmission capacity",
                value: bad,
            });
        }
        Ok(Self {
            comp_exits: BTreeMap::new(),
            tran_exits: BTreeMap::new(),
            cycles_per_slot,
            tran_bits_per_slot,
        })
    }

    pub fn clear(&mut self) {
        self.comp_exits.clear();
        self.tran_exits.clear();
    }

    pub fn cycles_per_slot(&self) -> f64 {
        self.cycles_per_slot
    }

    pub fn tran_bits_per_slot(&self) -> &[f64] {
        &self.tran_bits_per_slot
    }

    /// Slots a task arriving in `t` would wait before local processing.
    pub fn comp_wait(&self, t: Slot) -> u32 {
        wait_after(&self.comp_exits, t)
    }

    /// Slots a task arriving in `t` would wait before transmission starts.
    pub fn tran_wait(&self, t: Slot) -> u32 {
        wait_after(&self.tran_exits, t)
    }

    /// Exit slot of the computation queue entry recorded for `birth`, or 0.
    pub fn comp_exit(&self, birth: Slot) -> Slot {
        self.comp_exits.get(&birth).copied().unwrap_or(0)
    }

    pub fn tran_exit(&self, birth: Slot) -> Slot {
        self.tran_exits.get(&birth).copied().unwrap_or(0)
    }

    /// Places `task` in the computation queue and records its exit slot.
    pub fn enqueue_local(&mut self, task: &Task) -> Result<QueueExit, SimError> {
        let wait = self.comp_wait(task.birth_slot);
        let exit = comp_finish(task, wait, self.cycles_per_slot)?;
        self.comp_exits.insert(task.birth_slot, exit.slot);
        Ok(exit)
    }

    /// Places `task` in the transmission queue towards the single edge
    /// marked in `selection` and records its exit slot.
    pub fn enqueue_transmit(&mut self, task: &Task, selection: &[bool]) -> Result<QueueExit, SimError> {
        let wait = self.tran_wait(task.birth_slot);
        let exit = tran_finish(task, wait, selection, &self.tran_bits_per_slot)?;
        self.tran_exits.insert(task.birth_slot, exit.slot);
        Ok(exit)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const MBIT: f64 = 1e6;
    // 2.5 GHz over a 0.1 s slot.
    const DEVICE_CYCLES: f64 = 2.5e9 * 0.1;
    // 0.297 gigacycles per Mbit.
    const DENSITY: f64 = 297.0;

    fn task(birth: Slot, mbits: f64) -> Task {
        Task {
            id: TaskId(birth as u64),
            device: 0,
            birth_slot: birth,
            size_bits: mbits * MBIT,
            density_cycles_per_bit: DENSITY,
            deadline_slots: 10,
        }
    }

    /// Serves `bits` at `rate` per slot starting in `start`, one slot at a
    /// time, and returns the slot in which the budget runs out.
    fn bit_budget_finish(bits: f64, rate: f64, start: Slot) -> Slot {
        let mut remaining = bits;
        let mut slot = start;
        loop {
            remaining -= rate;
            if remaining <= BIT_TOLERANCE {
                return slot;
            }
            slot += 1;
        }
    }

    #[test]
    fn wait_matches_worked_example() {
        let mut tl = DeviceTimeline::new(DEVICE_CYCLES, vec![1.4 * MBIT]).unwrap();
        tl.comp_exits.insert(1, 5);
        tl.comp_exits.insert(2, 0);
        assert_eq!(tl.comp_wait(3), 3);
    }

    #[test]
    fn wait_is_zero_without_history_and_clamps() {
        let mut tl = DeviceTimeline::new(DEVICE_CYCLES, vec![1.4 * MBIT]).unwrap();
        assert_eq!(tl.comp_wait(1), 0);
        assert_eq!(tl.tran_wait(1), 0);
        tl.comp_exits.insert(1, 3);
        assert_eq!(tl.comp_wait(4), 0);
        tl.tran_exits.insert(1, 6);
        assert_eq!(tl.tran_wait(4), 3);
        tl.tran_exits.insert(1, 2);
        assert_eq!(tl.tran_wait(5), 0);
    }

    #[test]
    fn comp_finish_against_bit_budget() {
        let rate = DEVICE_CYCLES / DENSITY;
        for (mbits, expected) in [(3.0, 4), (2.0, 3)] {
            let oracle = bit_budget_finish(mbits * MBIT, rate, 1);
            assert_eq!(oracle, expected);
            let exit = comp_finish(&task(1, mbits), 0, DEVICE_CYCLES).unwrap();
            assert_eq!(exit, QueueExit { slot: expected, dropped: false });
        }
    }

    #[test]
    fn comp_finish_deadline_dominates() {
        let exit = comp_finish(&task(1, 3.0), 10, DEVICE_CYCLES).unwrap();
        assert_eq!(exit, QueueExit { slot: 10, dropped: true });
    }

    #[test]
    fn comp_finish_rejects_bad_capacity() {
        assert!(matches!(
            comp_finish(&task(1, 3.0), 0, 0.0),
            Err(SimError::NonPositiveCapacity { .. })
        ));
    }

    #[test]
    fn tran_finish_cases() {
        let rates = [1.4 * MBIT, 1.4 * MBIT];
        assert_eq!(bit_budget_finish(3.0 * MBIT, 1.4 * MBIT, 1), 3);
        let exit = tran_finish(&task(1, 3.0), 0, &[false, true], &rates).unwrap();
        assert_eq!(exit.slot, 3);
        let exit = tran_finish(&task(4, 1.0), 0, &[true, false], &rates).unwrap();
        assert_eq!(exit.slot, 4);
        let exit = tran_finish(&task(1, 3.0), 10, &[true, false], &rates).unwrap();
        assert_eq!(exit, QueueExit { slot: 10, dropped: true });
    }

    #[test]
    fn tran_finish_rejects_bad_selection() {
        let rates = [1.4 * MBIT, 1.4 * MBIT];
        assert_eq!(
            tran_finish(&task(1, 3.0), 0, &[false, false], &rates),
            Err(SimError::EdgeSelection(0))
        );
        assert_eq!(
            tran_finish(&task(1, 3.0), 0, &[true, true], &rates),
            Err(SimError::EdgeSelection(2))
        );
        assert!(matches!(
            tran_finish(&task(1, 3.0), 0, &[true], &rates),
            Err(SimError::SelectionLength { .. })
        ));
    }

    #[test]
    fn exact_multiples_do_not_round_up() {
        assert_eq!(slots_needed(2.8 * MBIT, 1.4 * MBIT), 2);
        assert_eq!(slots_needed(1.4 * MBIT, 1.4 * MBIT), 1);
        assert_eq!(slots_needed(0.1, 1.4 * MBIT), 1);
    }

    #[test]
    fn arrivals_degenerate_probabilities() {
        let mut ids = TaskIds::default();
        let mut never =
            ArrivalProcess::new(0.0, vec![2.0 * MBIT], DENSITY, 10, ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert!((1..=200).all(|t| never.draw(0, t, &mut ids).is_none()));
        let mut always =
            ArrivalProcess::new(1.0, vec![2.0 * MBIT], DENSITY, 10, ChaCha8Rng::seed_from_u64(1)).unwrap();
        for t in 1..=200 {
            let task = always.draw(0, t, &mut ids).unwrap();
            assert_eq!(task.size_bits, 2.0 * MBIT);
            assert_eq!(task.birth_slot, t);
        }
    }

    #[test]
    fn arrivals_are_seed_deterministic() {
        let sizes: Vec<f64> = (20..=50).map(|k| k as f64 * 1e5).collect();
        let run = |seed| {
            let mut ids = TaskIds::default();
            let mut p =
                ArrivalProcess::new(0.3, sizes.clone(), DENSITY, 10, ChaCha8Rng::seed_from_u64(seed)).unwrap();
            (1..=500).map(|t| p.draw(0, t, &mut ids)).collect::<Vec<_>>()
        };
        assert_eq!(run(7), run(7));
        assert_ne!(run(7), run(8));
    }

    #[test]
    fn serial_queue_never_overlaps() {
        let mut tl = DeviceTimeline::new(DEVICE_CYCLES, vec![1.4 * MBIT]).unwrap();
        let mut last_exit = 0;
        for t in 1..=12 {
            let start = t + tl.comp_wait(t);
            let exit = tl.enqueue_local(&task(t, 2.0)).unwrap();
            assert!(start > last_exit);
            assert!(exit.slot >= start);
            assert!(exit.slot <= t + 9);
            last_exit = exit.slot;
        }
    }
}
