//! Cost-based planning and local execution of iterative MapReduce programs.
//!
//! [`cost_model`] predicts per-iteration time and cost for a machine count
//! and aggregation fan-in, [`optimizer`] picks the plan minimising either,
//! [`engine`] executes loop programs on partitioned data, [`simulator`]
//! replays plans on a virtual clock, and [`calibrate`] measures the model
//! constants on the local host.

pub mod aggtree;
pub mod calibrate;
pub mod cost_model;
pub mod engine;
pub mod ingest;
pub mod ml_bgd;
pub mod optimizer;
pub mod simulator;
