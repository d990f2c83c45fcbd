//! Edge nodes: one FIFO queue per device, served by equal-share processor
//! sharing.
//!
//! In slot `t` the active queues of edge `n` are those that either receive
//! a task in `t` or were non-empty at the end of `t - 1`. Each active queue
//! is granted `f_edge / B_n(t)` cycles for the slot, whether or not it uses
//! all of them. The grant goes to the head-of-line task only; when the head
//! finishes mid-slot the remainder of the grant is idle and the next task
//! starts at the beginning of the next slot, mirroring the device queues.
//! A task still unfinished at the end of its deadline slot is dropped.

use std::collections::{HashSet, VecDeque};

use thiserror::Error;

use crate::sim::{DeviceId, EdgeId, Slot, Task, TaskId, BIT_TOLERANCE};

#[derive(Debug, Error, PartialEq)]
pub enum EdgeError {
    #[error("task {0} was already delivered to edge {1}")]
    DuplicateDelivery(TaskId, EdgeId),
    #[error("device {0} has no queue at edge {1}")]
    UnknownDevice(DeviceId, EdgeId),
    #[error("edge capacity must be positive, got {0}")]
    NonPositiveCapacity(f64),
}

/// A task resident in an edge queue.
#[derive(Clone, Debug, PartialEq)]
pub struct EdgeTask {
    pub task: Task,
    pub remaining_bits: f64,
    pub arrival_slot: Slot,
    /// First slot in which the task received service.
    pub start_slot: Option<Slot>,
}

impl EdgeTask {
    pub fn deadline_slot(&self) -> Slot {
        self.task.deadline_slot()
    }
}

/// Final fate of a task at an edge node.
#[derive(Clone, Debug, PartialEq)]
pub struct EdgeExit {
    pub task: Task,
    pub arrival_slot: Slot,
    pub start_slot: Option<Slot>,
    pub exit_slot: Slot,
    /// Bits left unprocessed; zero for completed tasks.
    pub dropped_bits: f64,
}

/// What one device's queue experienced during one slot.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct QueueService {
    pub granted_cycles: f64,
    pub processed_bits: f64,
    pub completed: Vec<EdgeExit>,
    pub dropped: Vec<EdgeExit>,
}

impl QueueService {
    pub fn dropped_bits(&self) -> f64 {
        self.dropped.iter().map(|d| d.dropped_bits).sum()
    }
}

/// Outcome of [`EdgeNode::step`].
#[derive(Clone, Debug, PartialEq)]
pub struct EdgeSlotReport {
    pub slot: Slot,
    pub active: Vec<DeviceId>,
    pub per_device: Vec<QueueService>,
}

impl EdgeSlotReport {
    pub fn load(&self) -> u32 {
        self.active.len() as u32
    }
}

#[derive(Clone, Debug, Default)]
struct DeviceQueue {
    tasks: VecDeque<EdgeTask>,
    /// Queue length at the end of the previous slot.
    queue_bits: f64,
    /// Bits delivered at the beginning of the current slot.
    arrival_bits: f64,
}

/// Active queues: a queue is active when it receives bits this slot or was
/// non-empty at the end of the previous slot.
pub fn active_set(prev_queue_bits: &[f64], arrival_bits: &[f64]) -> Vec<DeviceId> {
    prev_queue_bits
        .iter()
        .zip(arrival_bits)
        .enumerate()
        .filter(|(_, (q, a))| **a > 0.0 || **q > 0.0)
        .map(|(m, _)| m)
        .collect()
}

#[derive(Clone, Debug)]
pub struct EdgeNode {
    id: EdgeId,
    cycles_per_slot: f64,
    queues: Vec<DeviceQueue>,
    delivered: HashSet<TaskId>,
}

impl EdgeNode {
    pub fn new(id: EdgeId, num_devices: usize, cycles_per_slot: f64) -> Result<Self, EdgeError> {
        if !(cycles_per_slot > 0.0) {
            return Err(EdgeError::NonPositiveCapacity(cycles_per_slot));
        }
        Ok(Self {
            id,
            cycles_per_slot,
            queues: vec![DeviceQueue::default(); num_devices],
            delivered: HashSet::new(),
        })
    }

    pub fn id(&self) -> EdgeId {
        self.id
    }

    pub fn cycles_per_slot(&self) -> f64 {
        self.cycles_per_slot
    }

    pub fn reset(&mut self) {
        self.queues.iter_mut().for_each(|q| *q = DeviceQueue::default());
        self.delivered.clear();
    }

    /// Bits queued for `device` at the end of the last stepped slot.
    pub fn queue_bits(&self, device: DeviceId) -> f64 {
        self.queues.get(device).map_or(0.0, |q| q.queue_bits)
    }

    pub fn queued_tasks(&self, device: DeviceId) -> impl Iterator<Item = &EdgeTask> {
        self.queues.get(device).into_iter().flat_map(|q| q.tasks.iter())
    }

    /// Number of tasks resident at this node, across all queues.
    pub fn tasks_in_queue(&self) -> usize {
        self.queues.iter().map(|q| q.tasks.len()).sum()
    }

    /// Places a fully received task at the tail of its device's queue at the
    /// beginning of slot `t`.
    pub fn deliver(&mut self, task: Task, t: Slot) -> Result<(), EdgeError> {
        let queue = self
            .queues
            .get_mut(task.device)
            .ok_or(EdgeError::UnknownDevice(task.device, self.id))?;
        if !self.delivered.insert(task.id) {
            return Err(EdgeError::DuplicateDelivery(task.id, self.id));
        }
        queue.arrival_bits += task.size_bits;
        queue.tasks.push_back(EdgeTask {
            remaining_bits: task.size_bits,
            task,
            arrival_slot: t,
            start_slot: None,
        });
        Ok(())
    }

    /// Active queues for the slot about to be stepped.
    pub fn current_active_set(&self) -> Vec<DeviceId> {
        let prev: Vec<f64> = self.queues.iter().map(|q| q.queue_bits).collect();
        let arrivals: Vec<f64> = self.queues.iter().map(|q| q.arrival_bits).collect();
        active_set(&prev, &arrivals)
    }

    /// Serves one slot.
    pub fn step(&mut self, t: Slot) -> EdgeSlotReport {
        let active = self.current_active_set();
        let mut per_device = vec![QueueService::default(); self.queues.len()];
        let share = if active.is_empty() {
            0.0
        } else {
            self.cycles_per_slot / active.len() as f64
        };

        for &m in &active {
            let queue = &mut self.queues[m];
            let service = &mut per_device[m];
            service.granted_cycles = share;
            if let Some(head) = queue.tasks.front_mut() {
                head.start_slot.get_or_insert(t);
                let budget_bits = share / head.task.density_cycles_per_bit;
                let served = budget_bits.min(head.remaining_bits);
                head.remaining_bits -= served;
                service.processed_bits += served;
                if head.remaining_bits <= BIT_TOLERANCE {
                    let done = queue.tasks.pop_front().expect("head exists");
                    service.completed.push(EdgeExit {
                        exit_slot: t,
                        arrival_slot: done.arrival_slot,
                        start_slot: done.start_slot,
                        task: done.task,
                        dropped_bits: 0.0,
                    });
                }
            }
        }

        for (m, queue) in self.queues.iter_mut().enumerate() {
            // Deadlines are non-decreasing along a queue, so expired tasks
            // always sit at the front.
            while queue.tasks.front().is_some_and(|h| h.deadline_slot() <= t) {
                let gone = queue.tasks.pop_front().expect("front exists");
                per_device[m].dropped.push(EdgeExit {
                    exit_slot: t,
                    arrival_slot: gone.arrival_slot,
                    start_slot: gone.start_slot,
                    dropped_bits: gone.remaining_bits,
                    task: gone.task,
                });
            }
            let remaining: f64 = queue.tasks.iter().map(|e| e.remaining_bits).sum();
            debug_assert!(remaining >= 0.0);
            debug_assert!(
                remaining
                    <= queue.queue_bits + queue.arrival_bits - per_device[m].processed_bits
                        - per_device[m].dropped_bits()
                        + 1e-9 * (1.0 + queue.queue_bits + queue.arrival_bits)
            );
            queue.queue_bits = remaining;
            queue.arrival_bits = 0.0;
        }

        EdgeSlotReport {
            slot: t,
            active,
            per_device,
        }
    }
}

/// Sliding window over the most recent per-edge load levels.
#[derive(Clone, Debug)]
pub struct LoadHistory {
    window: usize,
    num_edges: usize,
    rows: VecDeque<Vec<u32>>,
}

impl LoadHistory {
    pub fn new(window: usize, num_edges: usize) -> Self {
        Self {
            window,
            num_edges,
            rows: VecDeque::with_capacity(window),
        }
    }

    pub fn window(&self) -> usize {
        self.window
    }

    pub fn clear(&mut self) {
        self.rows.clear();
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Appends the load levels of the slot just served.
    pub fn record(&mut self, counts: Vec<u32>) {
        debug_assert_eq!(counts.len(), self.num_edges);
        if self.rows.len() == self.window {
            self.rows.pop_front();
        }
        self.rows.push_back(counts);
    }

    /// Most recently recorded load levels.
    pub fn newest(&self) -> Option<&[u32]> {
        self.rows.back().map(Vec::as_slice)
    }

    /// `window x num_edges` matrix, oldest row first, zero-padded at the top
    /// when fewer than `window` slots have been recorded.
    pub fn matrix(&self) -> Vec<Vec<u32>> {
        let pad = self.window - self.rows.len();
        std::iter::repeat(vec![0; self.num_edges])
            .take(pad)
            .chain(self.rows.iter().cloned())
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MBIT: f64 = 1e6;
    const EDGE_CYCLES: f64 = 41.8e9 * 0.1;

    fn task(id: u64, device: DeviceId, birth: Slot, mbits: f64) -> Task {
        Task {
            id: TaskId(id),
            device,
            birth_slot: birth,
            size_bits: mbits * MBIT,
            density_cycles_per_bit: 297.0,
            deadline_slots: 10,
        }
    }

    #[test]
    fn deliver_to_empty_queue() {
        let mut edge = EdgeNode::new(0, 3, EDGE_CYCLES).unwrap();
        edge.deliver(task(1, 0, 1, 3.0), 2).unwrap();
        assert_eq!(edge.current_active_set(), vec![0]);
        assert_eq!(edge.queues[0].arrival_bits, 3.0 * MBIT);
        let report = edge.step(2);
        assert_eq!(report.per_device[0].completed.len(), 1);
        assert_eq!(edge.queue_bits(0), 0.0);
    }

    #[test]
    fn duplicate_delivery_rejected() {
        let mut edge = EdgeNode::new(4, 2, EDGE_CYCLES).unwrap();
        edge.deliver(task(7, 1, 1, 2.0), 2).unwrap();
        assert_eq!(
            edge.deliver(task(7, 1, 1, 2.0), 3),
            Err(EdgeError::DuplicateDelivery(TaskId(7), 4))
        );
    }

    #[test]
    fn active_set_disjuncts() {
        assert!(active_set(&[0.0, 0.0], &[0.0, 0.0]).is_empty());
        assert_eq!(active_set(&[0.0, 0.0], &[0.0, 2.0]), vec![1]);
        assert_eq!(active_set(&[5.0, 0.0], &[0.0, 0.0]), vec![0]);
    }

    #[test]
    fn two_active_devices_split_capacity() {
        let mut edge = EdgeNode::new(0, 2, EDGE_CYCLES).unwrap();
        edge.deliver(task(1, 0, 1, 20.0), 2).unwrap();
        edge.deliver(task(2, 1, 1, 20.0), 2).unwrap();
        let report = edge.step(2);
        let expected = 4.18e9 / (297.0 * 2.0);
        assert!((expected / MBIT - 7.037).abs() < 1e-3);
        for m in 0..2 {
            assert!((report.per_device[m].processed_bits - expected).abs() < 1e-6);
            assert_eq!(report.per_device[m].granted_cycles, EDGE_CYCLES / 2.0);
        }
        assert_eq!(report.load(), 2);
    }

    #[test]
    fn single_small_task_finishes_on_arrival() {
        let mut edge = EdgeNode::new(0, 1, EDGE_CYCLES).unwrap();
        edge.deliver(task(1, 0, 3, 2.0), 5).unwrap();
        let report = edge.step(5);
        let done = &report.per_device[0].completed[0];
        assert_eq!(done.exit_slot, 5);
        assert_eq!(done.start_slot, Some(5));
    }

    #[test]
    fn deadline_drop_records_remaining_bits() {
        let mut edge = EdgeNode::new(0, 1, 1e8).unwrap();
        // Born in slot 1 with a 10-slot deadline: last chance is slot 10.
        edge.deliver(task(1, 0, 1, 5.0), 9).unwrap();
        let r9 = edge.step(9);
        assert!(r9.per_device[0].dropped.is_empty());
        let before = edge.queue_bits(0);
        let r10 = edge.step(10);
        let served = r10.per_device[0].processed_bits;
        let dropped = &r10.per_device[0].dropped;
        assert_eq!(dropped.len(), 1);
        assert_eq!(dropped[0].exit_slot, 10);
        assert!((dropped[0].dropped_bits - (before - served)).abs() < 1e-6);
        assert_eq!(edge.queue_bits(0), 0.0);
    }

    #[test]
    fn next_task_waits_for_next_slot() {
        let mut edge = EdgeNode::new(0, 1, EDGE_CYCLES).unwrap();
        edge.deliver(task(1, 0, 1, 2.0), 2).unwrap();
        edge.deliver(task(3, 0, 2, 2.0), 2).unwrap();
        let r = edge.step(2);
        assert_eq!(r.per_device[0].completed.len(), 1);
        assert!((edge.queue_bits(0) - 2.0 * MBIT).abs() < 1e-9);
        let r = edge.step(3);
        assert_eq!(r.per_device[0].completed[0].start_slot, Some(3));
    }

    #[test]
    fn load_history_window() {
        let mut h = LoadHistory::new(3, 2);
        assert_eq!(h.matrix(), vec![vec![0, 0]; 3]);
        h.record(vec![3, 1]);
        assert_eq!(h.matrix(), vec![vec![0, 0], vec![0, 0], vec![3, 1]]);
        h.record(vec![1, 1]);
        h.record(vec![2, 2]);
        h.record(vec![4, 0]);
        assert_eq!(h.len(), 3);
        assert_eq!(h.matrix(), vec![vec![1, 1], vec![2, 2], vec![4, 0]]);
        assert_eq!(h.newest(), Some(&[4, 0][..]));
    }
}
