//! The guide's listings as doc-tests: each chapter becomes the doc comment of
//! an empty module, so `cargo test` compiles and runs every `rust` block.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}
#[doc = include_str!("../../../book/src/device-queues.md")]
pub mod device_queues {}
#[doc = include_str!("../../../book/src/edge-nodes.md")]
pub mod edge_nodes {}
#[doc = include_str!("../../../book/src/environment.md")]
pub mod environment {}
#[doc = include_str!("../../../book/src/network.md")]
pub mod network {}
#[doc = include_str!("../../../book/src/learning.md")]
pub mod learning {}
#[doc = include_str!("../../../book/src/experiments.md")]
pub mod experiments {}
#[doc = include_str!("../../../book/src/cli.md")]
pub mod cli {}
