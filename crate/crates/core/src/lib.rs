//! Time-slotted mobile edge computing simulator and a distributed deep
//! reinforcement learning offloading agent built from scratch.
//!
//! * [`sim`]: device-side task arrivals and serial computation/transmission
//!   queues.
//! * [`edge`]: edge nodes with equal-share processor sharing across active
//!   per-device queues.
//! * [`env`]: the per-device decision process wrapped around both.
//! * [`nn`]: LSTM + dueling Q-network with exact backpropagation.
//! * [`agent`]: epsilon-greedy devices, replay memory and double-DQN
//!   trainers talking through typed messages.
//! * [`harness`]: configuration, baseline policies, episode loops, metrics
//!   and CSV output.
//! * [`check`]: self-checks run by the `check` CLI subcommand.

pub mod agent;
pub mod check;
pub mod config;
pub mod edge;
pub mod env;
pub mod harness;
pub mod nn;
pub mod seed;
pub mod sim;
