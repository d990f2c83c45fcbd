//! Physical parameters of the simulated system.
//!
//! Values are kept in the units they are usually quoted in (GHz, Mbps,
//! Mbits, gigacycles per Mbit) and converted to per-slot quantities on
//! demand: `cycles/slot = GHz * 1e9 * slot`, `bits/slot = Mbps * 1e6 * slot`.

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
#[error("invalid `{field}`: {reason}")]
pub struct ConfigError {
    pub field: &'static str,
    pub reason: String,
}

impl ConfigError {
    pub fn new(field: &'static str, reason: impl Into<String>) -> Self {
        Self {
            field,
            reason: reason.into(),
        }
    }
}

/// Default task size set: 2.0, 2.1, ..., 5.0 Mbits.
pub fn default_task_sizes_mbits() -> Vec<f64> {
    (20..=50).map(|k| k as f64 / 10.0).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct SystemConfig {
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
    /// Length of the load-level history window fed to the agents.
    pub history_slots: usize,
}

impl Default for SystemConfig {
    fn default() -> Self {
        Self {
            num_devices: 50,
            num_edges: 5,
            episode_slots: 100,
            slot_seconds: 0.1,
            device_ghz: 2.5,
            edge_ghz: 41.8,
            tran_mbps: 14.0,
            task_sizes_mbits: default_task_sizes_mbits(),
            density_gcycles_per_mbit: 0.297,
            deadline_slots: 10,
            arrival_probability: 0.3,
            drop_penalty: 20.0,
            history_slots: 10,
        }
    }
}

fn positive(field: &'static str, value: f64) -> Result<(), ConfigError> {
    if value > 0.0 && value.is_finite() {
        Ok(())
    } else {
        Err(ConfigError::new(field, format!("must be positive and finite, got {value}")))
    }
}

impl SystemConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.num_devices == 0 {
            return Err(ConfigError::new("num_devices", "must be at least 1"));
        }
        if self.num_devices > 0xFF_FFFF {
            return Err(ConfigError::new("num_devices", "too many devices for seeding scheme"));
        }
        if self.episode_slots == 0 {
            return Err(ConfigError::new("episode_slots", "must be at least 1"));
        }
        if self.deadline_slots == 0 {
            return Err(ConfigError::new("deadline_slots", "must be at least 1"));
        }
        if self.history_slots == 0 {
            return Err(ConfigError::new("history_slots", "must be at least 1"));
        }
        positive("slot_seconds", self.slot_seconds)?;
        positive("device_ghz", self.device_ghz)?;
        positive("edge_ghz", self.edge_ghz)?;
        positive("tran_mbps", self.tran_mbps)?;
        positive("density_gcycles_per_mbit", self.density_gcycles_per_mbit)?;
        positive("drop_penalty", self.drop_penalty)?;
        if !(0.0..=1.0).contains(&self.arrival_probability) {
            return Err(ConfigError::new(
                "arrival_probability",
                format!("must lie in [0, 1], got {}", self.arrival_probability),
            ));
        }
        if self.task_sizes_mbits.is_empty() {
            return Err(ConfigError::new("task_sizes_mbits", "must not be empty"));
        }
        for &s in &self.task_sizes_mbits {
            positive("task_sizes_mbits", s)?;
        }
        Ok(())
    }

    pub fn device_cycles_per_slot(&self) -> f64 {
        self.device_ghz * 1e9 * self.slot_seconds
    }

    pub fn edge_cycles_per_slot(&self) -> f64 {
        self.edge_ghz * 1e9 * self.slot_seconds
    }

    pub fn tran_bits_per_slot(&self) -> f64 {
        self.tran_mbps * 1e6 * self.slot_seconds
    }

    pub fn density_cycles_per_bit(&self) -> f64 {
        self.density_gcycles_per_mbit * 1e9 / 1e6
    }

    pub fn task_sizes_bits(&self) -> Vec<f64> {
        self.task_sizes_mbits.iter().map(|s| s * 1e6).collect()
    }

    pub fn max_task_bits(&self) -> f64 {
        self.task_sizes_bits().into_iter().fold(0.0, f64::max)
    }

    pub fn local_bits_per_slot(&self) -> f64 {
        self.device_cycles_per_slot() / self.density_cycles_per_bit()
    }

    pub fn edge_bits_per_slot(&self) -> f64 {
        self.edge_cycles_per_slot() / self.density_cycles_per_bit()
    }

    /// Number of feasible offloading actions: local plus one per edge.
    pub fn num_actions(&self) -> usize {
        self.num_edges + 1
    }
}
