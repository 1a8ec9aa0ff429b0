//! Stage-2 imitation learning and stage-3 group-relative policy
//! optimization, with an append-only NDJSON metrics log.

mod grpo;
mod il;

use std::io::Write;

use serde::Serialize;

use crate::neural::NeuralError;
use crate::policy::PolicyError;

pub use grpo::{
    clipped_surrogate, collect_group, group_advantages, grpo_gradients, grpo_update, scalar_harness, train_rl, GrpoConfig, GrpoStats,
    Group, GroupSample, HarnessReport, RlReport,
};
pub use il::{il_scenario, il_step, train_il, IlConfig, IlReport, LossComponents};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error("training divergence: non-finite {component} ({detail})")]
    Divergence { component: String, detail: String },
    #[error("data error: {0}")]
    Data(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl From<NeuralError> for TrainError {
    fn from(e: NeuralError) -> Self {
        match e {
            NeuralError::Divergence(detail) => TrainError::Divergence { component: "gradient".into(), detail },
            other => TrainError::Policy(PolicyError::Neural(other)),
        }
    }
}

/// Single-writer sink for newline-delimited JSON records.
pub struct MetricsLog {
    out: Option<Box<dyn Write + Send>>,
}

impl MetricsLog {
    pub fn new(out: Box<dyn Write + Send>) -> Self {
        Self { out: Some(out) }
    }

    pub fn discard() -> Self {
        Self { out: None }
    }

    pub fn record<T: Serialize>(&mut self, value: &T) -> Result<(), TrainError> {
        if let Some(out) = self.out.as_mut() {
            serde_json::to_writer(&mut *out, value).map_err(|e| TrainError::Data(e.to_string()))?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn flush(&mut self) -> Result<(), TrainError> {
        if let Some(out) = self.out.as_mut() {
            out.flush()?;
        }
        Ok(())
    }
}

/// Per-epoch generator seed, so a resumed run replays the same stream.
pub(crate) fn epoch_seed(seed: u64, stage: u64, epoch: usize) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ (stage << 48) ^ epoch as u64
}
