use std::path::Path;

use anyhow::Context;
use serde::{Deserialize, Serialize};

use cophy::eval::EvalOptions;
use cophy::policy::ModelConfig;
use cophy::scenario::Template;
use cophy::server::SessionConfig;
use cophy::training::{GrpoConfig, IlConfig};

use super::{CliError, Flags};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// `all` or a comma-separated template list.
    pub templates: String,
    /// Scenarios per template.
    pub count: usize,
    /// Held-out scenarios per template (ablation only).
    pub eval_count: usize,
    /// Scenarios per template used for the RL stage of an ablation.
    pub rl_count: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { templates: "all".into(), count: 50, eval_count: 10, rl_count: 10 }
    }
}

impl DataConfig {
    pub fn template_list(&self) -> Result<Vec<Template>, CliError> {
        parse_templates(&self.templates)
    }
}

pub fn parse_templates(spec: &str) -> Result<Vec<Template>, CliError> {
    if spec == "all" {
        return Ok(Template::ALL.to_vec());
    }
    let mut out = Vec::new();
    for name in spec.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        out.push(name.parse::<Template>().map_err(|e| CliError::usage(anyhow::anyhow!(e)))?);
    }
    if out.is_empty() {
        return Err(CliError::usage(anyhow::anyhow!("empty template list")));
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProtoConfig {
    pub n: usize,
}

impl Default for ProtoConfig {
    fn default() -> Self {
        Self { n: 64 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServeConfig {
    pub addr: String,
    #[serde(flatten)]
    pub session: SessionConfig,
}

impl Default for ServeConfig {
    fn default() -> Self {
        Self { addr: "127.0.0.1:8080".into(), session: SessionConfig::default() }
    }
}

/// Every tunable of every command. Loaded from TOML, then overridden by flags;
/// the result is echoed into each output artifact.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    #[serde(skip_serializing)]
    pub threads: Option<usize>,
    pub data: DataConfig,
    pub protos: ProtoConfig,
    pub model: ModelConfig,
    pub il: IlConfig,
    pub rl: GrpoConfig,
    pub eval: EvalOptions,
    pub serve: ServeConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            threads: None,
            data: DataConfig::default(),
            protos: ProtoConfig::default(),
            model: ModelConfig::default(),
            il: IlConfig::default(),
            rl: GrpoConfig::default(),
            eval: EvalOptions::default(),
            serve: ServeConfig::default(),
        }
    }
}

/// Which stage `--epochs` and `--lr` refer to.
#[derive(Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Il,
    Rl,
    Other,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else { return Ok(Self::default()) };
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))
            .map_err(CliError::data)?;
        toml::from_str(&text).with_context(|| format!("parsing config {}", path.display())).map_err(CliError::usage)
    }

    /// Applies command-line overrides. Flags always win over the file.
    pub fn apply(&mut self, f: &Flags, stage: Stage) -> Result<(), CliError> {
        if let Some(s) = f.seed {
            self.seed = s;
        }
        self.il.seed = self.seed;
        self.rl.seed = self.seed;
        if let Some(t) = f.threads {
            self.threads = Some(t);
        }
        if let Some(t) = &f.templates {
            self.data.templates = t.clone();
        }
        if let Some(c) = f.count {
            self.data.count = c;
        }
        if let Some(e) = f.epochs {
            match stage {
                Stage::Rl => self.rl.epochs = e,
                _ => self.il.epochs = e,
            }
        }
        if let Some(lr) = f.lr {
            match stage {
                Stage::Rl => self.rl.lr = lr,
                _ => self.il.lr = lr,
            }
        }
        if let Some(g) = f.group_size {
            self.rl.group_size = g;
        }
        if let Some(c) = f.clip {
            self.rl.clip = c;
        }
        if let Some(p) = f.psi {
            self.model.psi = p;
            self.eval.psi = p;
            self.serve.session.psi = p;
        }
        if let Some(k) = f.k_steps {
            self.model.wm_steps = k;
        }
        if let Some(b) = f.backend {
            self.rl.backend = b;
            self.eval.backend = b;
            self.serve.session.backend = b;
        }
        self.validate()
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.data.template_list()?;
        self.model.validate().map_err(|e| CliError::usage(e.into()))?;
        self.rl.validate().map_err(|e| CliError::usage(e.into()))?;
        if self.il.epochs == 0 || self.il.batch_size == 0 {
            bail_usage("il.epochs and il.batch_size must be positive")?;
        }
        if self.threads == Some(0) {
            bail_usage("threads must be positive")?;
        }
        Ok(())
    }

    pub fn echo(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }
}

fn bail_usage(msg: &str) -> Result<(), CliError> {
    Err(CliError::usage(anyhow::anyhow!("{msg}")))
}
