//! Desk-scale cognitive-physical driving stack: synthetic BEV scenarios, an
//! imitation-learned trajectory policy, a learned world model used as a
//! reward sandbox, group-relative policy optimization, and evaluation.

pub mod command;
pub mod eval;
pub mod neural;
pub mod planner;
pub mod policy;
pub mod rewards;
pub mod scenario;
pub mod scoring;
pub mod server;
pub mod training;
pub mod trajectory;
pub mod worldmodel;
