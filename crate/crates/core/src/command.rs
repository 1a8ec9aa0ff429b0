//! The fixed intent-command vocabulary and its embedding table.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

pub const CMD_SCHEMA: &str = "cophy-cmd/1";
/// Dimensionality of a cognitive vector.
pub const COGNITIVE_DIM: usize = 64;

const DEFAULT_TABLE: &str = include_str!("../assets/commands.txt");

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Command {
    ProceedStraight,
    StopAtRedLight,
    FollowLeadVehicle,
    ChangeLaneLeft,
    ChangeLaneRight,
    Accelerate,
    Yield,
    KeepLaneOverFork,
}

impl Command {
    pub const ALL: [Command; 8] = [
        Command::ProceedStraight,
        Command::StopAtRedLight,
        Command::FollowLeadVehicle,
        Command::ChangeLaneLeft,
        Command::ChangeLaneRight,
        Command::Accelerate,
        Command::Yield,
        Command::KeepLaneOverFork,
    ];

    pub fn text(self) -> &'static str {
        match self {
            Command::ProceedStraight => "proceed straight",
            Command::StopAtRedLight => "stop at red light",
            Command::FollowLeadVehicle => "follow lead vehicle",
            Command::ChangeLaneLeft => "change lane left",
            Command::ChangeLaneRight => "change lane right",
            Command::Accelerate => "accelerate",
            Command::Yield => "yield",
            Command::KeepLaneOverFork => "keep lane over fork",
        }
    }

    pub fn index(self) -> usize {
        Self::ALL.iter().position(|c| *c == self).expect("listed")
    }

    pub fn from_index(i: usize) -> Option<Command> {
        Self::ALL.get(i).copied()
    }

    /// Exact, case-sensitive lookup.
    pub fn from_text(text: &str) -> Option<Command> {
        Self::ALL.iter().copied().find(|c| c.text() == text)
    }
}

impl std::fmt::Display for Command {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.text())
    }
}

#[derive(Debug, thiserror::Error)]
pub enum VocabularyError {
    #[error("command table schema `{found}` is not supported (expected `{expected}`)")]
    Schema { found: String, expected: String },
    #[error("command table line {line}: {detail}")]
    Parse { line: usize, detail: String },
    #[error("command table is missing `{0}`")]
    Missing(String),
}

/// Command embeddings: one seeded unit vector per vocabulary entry.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    seeds: Vec<u64>,
    embeddings: Vec<Vec<f64>>,
}

impl Vocabulary {
    pub fn parse(text: &str) -> Result<Self, VocabularyError> {
        let mut lines = text.lines().enumerate();
        let header = lines.next().map(|(_, l)| l.trim()).unwrap_or("");
        if header != CMD_SCHEMA {
            return Err(VocabularyError::Schema { found: header.into(), expected: CMD_SCHEMA.into() });
        }
        let mut seeds = vec![None; Command::ALL.len()];
        for (i, line) in lines {
            let line = line.trim_end();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (cmd, seed) = line
                .split_once('\t')
                .ok_or_else(|| VocabularyError::Parse { line: i + 1, detail: "expected `text<TAB>seed`".into() })?;
            let command = Command::from_text(cmd)
                .ok_or_else(|| VocabularyError::Parse { line: i + 1, detail: format!("unknown command `{}`", cmd) })?;
            let seed: u64 = seed
                .trim()
                .parse()
                .map_err(|e| VocabularyError::Parse { line: i + 1, detail: format!("bad seed: {}", e) })?;
            seeds[command.index()] = Some(seed);
        }
        let seeds = seeds
            .into_iter()
            .zip(Command::ALL)
            .map(|(s, c)| s.ok_or_else(|| VocabularyError::Missing(c.text().into())))
            .collect::<Result<Vec<_>, _>>()?;
        let embeddings = seeds.iter().map(|s| unit_vector(*s, COGNITIVE_DIM)).collect();
        Ok(Self { seeds, embeddings })
    }

    pub fn seed(&self, c: Command) -> u64 {
        self.seeds[c.index()]
    }

    pub fn embedding(&self, c: Command) -> &[f64] {
        &self.embeddings[c.index()]
    }

    pub fn texts() -> Vec<&'static str> {
        Command::ALL.iter().map(|c| c.text()).collect()
    }
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self::parse(DEFAULT_TABLE).expect("bundled command table is valid")
    }
}

fn unit_vector(seed: u64, dim: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}
