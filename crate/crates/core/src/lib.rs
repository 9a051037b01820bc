pub mod eval;
pub mod exec;
pub mod fusion;
pub mod geometry;
pub mod grid;
pub mod harness;
pub mod late_fusion;
pub mod message;
pub mod pillars;
pub mod protocol;
pub mod scene_sim;
pub mod supply_demand;
