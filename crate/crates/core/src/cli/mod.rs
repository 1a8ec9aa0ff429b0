mod ablate;
mod config;

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::anyhow;
use clap::{Args, Parser, Subcommand};

use cophy::command::Vocabulary;
use cophy::eval::{evaluate_expert, evaluate_policy, CognitiveMode, Report};
use cophy::neural::Checkpoint;
use cophy::policy::Model;
use cophy::scenario::{generate_batch, load_batch, write_batch, Scenario};
use cophy::server::{serve, Planner};
use cophy::training::{train_il, train_rl, MetricsLog, TrainError};
use cophy::trajectory::{cluster_prototypes, PrototypeBank};
use cophy::worldmodel::Backend;

pub use config::{RunConfig, Stage};

/// Process exit status classes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Kind {
    Usage,
    Data,
    Divergence,
}

impl Kind {
    fn code(self) -> i32 {
        match self {
            Kind::Usage => 2,
            Kind::Data => 3,
            Kind::Divergence => 4,
        }
    }

    fn label(self) -> &'static str {
        match self {
            Kind::Usage => "usage",
            Kind::Data => "data",
            Kind::Divergence => "divergence",
        }
    }
}

#[derive(Debug)]
pub struct CliError {
    kind: Kind,
    error: anyhow::Error,
}

impl CliError {
    pub fn usage(error: anyhow::Error) -> Self {
        Self { kind: Kind::Usage, error }
    }

    pub fn data(error: anyhow::Error) -> Self {
        Self { kind: Kind::Data, error }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        let kind = if matches!(e, TrainError::Divergence { .. }) { Kind::Divergence } else { Kind::Data };
        Self { kind, error: e.into() }
    }
}

trait DataContext<T> {
    fn data_ctx(self, what: impl FnOnce() -> String) -> Result<T, CliError>;
}

impl<T, E: Into<anyhow::Error>> DataContext<T> for Result<T, E> {
    fn data_ctx(self, what: impl FnOnce() -> String) -> Result<T, CliError> {
        self.map_err(|e| CliError::data(e.into().context(what())))
    }
}

#[derive(Parser, Debug)]
#[command(name = "cophy", version, about = "Cognitive-physical trajectory planning toolkit")]
struct Cli {
    #[command(flatten)]
    flags: Flags,
    #[command(subcommand)]
    command: Cmd,
}

/// Flags shared by every subcommand; each has a config-file equivalent.
#[derive(Args, Debug, Default, Clone)]
pub struct Flags {
    /// TOML configuration file; flags override its values
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output file (or directory for `ablate`)
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// `all` or a comma-separated list of templates
    #[arg(long, global = true)]
    pub templates: Option<String>,
    /// Scenarios per template
    #[arg(long, global = true)]
    pub count: Option<usize>,
    #[arg(long, global = true)]
    pub epochs: Option<usize>,
    #[arg(long, global = true)]
    pub lr: Option<f64>,
    #[arg(long, global = true)]
    pub group_size: Option<usize>,
    #[arg(long, global = true)]
    pub clip: Option<f64>,
    /// Cognitive filter threshold for hierarchical selection
    #[arg(long, global = true, allow_hyphen_values = true)]
    pub psi: Option<f64>,
    /// World-model rollout steps
    #[arg(long, global = true)]
    pub k_steps: Option<usize>,
    #[arg(long, global = true)]
    pub backend: Option<Backend>,
    #[arg(long, global = true, env = "COPHY_THREADS")]
    pub threads: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Generate a scenario batch (newline-delimited JSON)
    Gen,
    /// Cluster expert trajectories into a prototype bank
    Protos {
        #[arg(long)]
        data: PathBuf,
        /// Number of prototypes
        #[arg(long)]
        n: Option<usize>,
    },
    /// Imitation-learning stage
    TrainIl {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        protos: PathBuf,
        /// Metrics log path (default: `<out>.metrics.ndjson`)
        #[arg(long)]
        metrics: Option<PathBuf>,
        /// Train without the cognitive vector (physical-score-only ablation)
        #[arg(long)]
        no_cognitive: bool,
    },
    /// Group-relative policy optimization stage
    TrainRl {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        /// Resume from a snapshot written by an interrupted run
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        metrics: Option<PathBuf>,
        /// Reward terms: dual, physical or cognitive
        #[arg(long, default_value = "dual")]
        reward: String,
    },
    /// Evaluate a checkpoint (or the expert trajectories) and write a report
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, required_unless_present = "expert")]
        ckpt: Option<PathBuf>,
        /// Score the scenarios' expert trajectories instead of a policy
        #[arg(long)]
        expert: bool,
        /// command, distilled or off
        #[arg(long)]
        cognitive: Option<CognitiveMode>,
        /// Apply the physical safety veto to the selection
        #[arg(long)]
        veto: bool,
        /// Also write the summary table as CSV
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Run the A0..B3 ablation matrix
    Ablate {
        #[arg(long, default_value = "table3")]
        preset: String,
        /// Training scenarios (generated from the seed when absent)
        #[arg(long)]
        data: Option<PathBuf>,
        /// Held-out scenarios (generated from the seed when absent)
        #[arg(long)]
        eval_data: Option<PathBuf>,
    },
    /// Serve interactive sessions over HTTP and WebSocket
    Serve {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        addr: Option<String>,
    },
}

/// Parses arguments, runs the command and returns the exit status.
pub fn run() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("cophy: error[usage]: {first}");
            return Kind::Usage.code();
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("cophy: error[{}]: {:#}", e.kind.label(), e.error);
            e.kind.code()
        }
    }
}

fn stage_of(cmd: &Cmd) -> Stage {
    match cmd {
        Cmd::TrainIl { .. } => Stage::Il,
        Cmd::TrainRl { .. } => Stage::Rl,
        _ => Stage::Other,
    }
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    let mut cfg = RunConfig::load(cli.flags.config.as_deref())?;
    cfg.apply(&cli.flags, stage_of(&cli.command))?;
    let threads = cfg.threads.unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| CliError::usage(anyhow!("thread pool: {e}")))?;
    let out = cli.flags.out.clone();
    match cli.command {
        Cmd::Gen => gen(&cfg, out),
        Cmd::Protos { data, n } => {
            if let Some(n) = n {
                cfg.protos.n = n;
            }
            protos(&cfg, &data, out)
        }
        Cmd::TrainIl { data, protos, metrics, no_cognitive } => {
            if no_cognitive {
                cfg.il.cognitive = false;
            }
            train_il_cmd(&cfg, &data, &protos, out, metrics)
        }
        Cmd::TrainRl { data, ckpt, resume, metrics, reward } => {
            cfg.rl.reward = reward_mode(&reward, cfg.rl.reward)?;
            train_rl_cmd(&cfg, &data, &ckpt, resume.as_deref(), out, metrics)
        }
        Cmd::Eval { data, ckpt, expert, cognitive, veto, csv } => {
            if let Some(c) = cognitive {
                cfg.eval.cognitive = c;
            }
            cfg.eval.veto |= veto;
            eval_cmd(&cfg, &data, ckpt.as_deref(), expert, out, csv)
        }
        Cmd::Ablate { preset, data, eval_data } => ablate::run(&cfg, &preset, data.as_deref(), eval_data.as_deref(), out),
        Cmd::Serve { ckpt, addr } => {
            if let Some(a) = addr {
                cfg.serve.addr = a;
            }
            serve_cmd(&cfg, &ckpt)
        }
    }
}

pub fn reward_mode(mode: &str, base: cophy::rewards::RewardConfig) -> Result<cophy::rewards::RewardConfig, CliError> {
    match mode {
        "dual" => Ok(base),
        "physical" => Ok(base.physical_only()),
        "cognitive" => Ok(base.cognitive_only()),
        other => Err(CliError::usage(anyhow!("unknown reward mode '{other}' (expected dual, physical or cognitive)"))),
    }
}

fn require_out(out: Option<PathBuf>) -> Result<PathBuf, CliError> {
    out.ok_or_else(|| CliError::usage(anyhow!("--out is required")))
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).data_ctx(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, bytes).data_ctx(|| format!("writing {}", path.display()))
}

/// Writes the effective configuration next to an artifact whose format has
/// no room for it.
fn write_sidecar(path: &Path, cfg: &RunConfig) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(&cfg.echo()).expect("config serializes");
    write_file(&with_suffix(path, ".run.json"), text.as_bytes())
}

pub fn load_scenarios(path: &Path) -> Result<Vec<Scenario>, CliError> {
    let s = load_batch(path).data_ctx(|| format!("loading scenarios from {}", path.display()))?;
    if s.is_empty() {
        return Err(CliError::data(anyhow!("no scenarios in {}", path.display())));
    }
    Ok(s)
}

pub fn load_model(path: &Path) -> Result<(Model, Checkpoint), CliError> {
    let ckpt = Checkpoint::load(path).data_ctx(|| format!("loading checkpoint {}", path.display()))?;
    let model = Model::from_checkpoint(&ckpt).data_ctx(|| format!("checkpoint {}", path.display()))?;
    Ok((model, ckpt))
}

fn metrics_log(path: &Path, append: bool) -> Result<MetricsLog, CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).data_ctx(|| format!("creating {}", dir.display()))?;
    }
    let f = OpenOptions::new()
        .create(true)
        .write(true)
        .append(append)
        .truncate(!append)
        .open(path)
        .data_ctx(|| format!("opening {}", path.display()))?;
    Ok(MetricsLog::new(Box::new(BufWriter::new(f))))
}

pub fn stage_metadata(cfg: &RunConfig, stage: &str) -> BTreeMap<String, String> {
    let mut m = BTreeMap::new();
    m.insert("run.config".into(), cfg.echo().to_string());
    m.insert("stage".into(), stage.into());
    m
}

fn gen(cfg: &RunConfig, out: Option<PathBuf>) -> Result<(), CliError> {
    let out = require_out(out)?;
    let scenarios = generate_batch(&cfg.data.template_list()?, cfg.data.count, cfg.seed);
    let mut buf = Vec::new();
    write_batch(&mut buf, &scenarios).data_ctx(|| "serializing scenarios".into())?;
    write_file(&out, &buf)?;
    write_sidecar(&out, cfg)?;
    println!("wrote {} scenarios to {}", scenarios.len(), out.display());
    Ok(())
}

pub fn build_bank(cfg: &RunConfig, scenarios: &[Scenario]) -> Result<PrototypeBank, CliError> {
    let experts: Vec<_> = scenarios.iter().map(|s| s.expert.clone()).collect();
    Ok(cluster_prototypes(&experts, cfg.protos.n, cfg.seed).data_ctx(|| "clustering prototypes".into())?.bank)
}

fn protos(cfg: &RunConfig, data: &Path, out: Option<PathBuf>) -> Result<(), CliError> {
    let out = require_out(out)?;
    let scenarios = load_scenarios(data)?;
    let bank = build_bank(cfg, &scenarios)?;
    write_file(&out, bank.to_json().as_bytes())?;
    write_sidecar(&out, cfg)?;
    println!("wrote {} prototypes to {}", bank.len(), out.display());
    Ok(())
}

/// Trains a fresh model with the IL stage and returns it.
pub fn run_il(cfg: &RunConfig, scenarios: &[Scenario], bank: PrototypeBank, log: &mut MetricsLog) -> Result<Model, CliError> {
    let mut model = Model::new(cfg.model.clone(), bank, cfg.seed).map_err(|e| CliError::usage(e.into()))?;
    log.record(&serde_json::json!({ "stage": "il", "config": cfg.echo() }))?;
    let report = train_il(&mut model, scenarios, &cfg.il, &Vocabulary::default(), log)?;
    if let (Some(first), Some(last)) = (report.epoch_means.first(), report.epoch_means.last()) {
        println!("il: {} steps", report.steps);
        for ((name, a), (_, b)) in first.named().iter().zip(last.named()) {
            println!("  {name:<8} {a:>10.5} -> {b:>10.5}");
        }
    }
    Ok(model)
}

fn train_il_cmd(
    cfg: &RunConfig,
    data: &Path,
    protos: &Path,
    out: Option<PathBuf>,
    metrics: Option<PathBuf>,
) -> Result<(), CliError> {
    let out = require_out(out)?;
    let scenarios = load_scenarios(data)?;
    let text = fs::read_to_string(protos).data_ctx(|| format!("reading prototypes {}", protos.display()))?;
    let bank = PrototypeBank::from_json(&text).data_ctx(|| format!("prototypes {}", protos.display()))?;
    let mut log = metrics_log(&metrics.unwrap_or_else(|| with_suffix(&out, ".metrics.ndjson")), false)?;
    let model = run_il(cfg, &scenarios, bank, &mut log)?;
    let ckpt = model.to_checkpoint(stage_metadata(cfg, "il"));
    write_file(&out, &ckpt.to_bytes())?;
    println!("wrote {}", out.display());
    Ok(())
}

/// Runs the RL stage from `model`, snapshotting after every epoch when
/// `snapshot` is given.
pub fn run_rl(
    cfg: &RunConfig,
    model: &mut Model,
    scenarios: &[Scenario],
    start_epoch: usize,
    snapshot: Option<&Path>,
    log: &mut MetricsLog,
) -> Result<(), CliError> {
    if start_epoch == 0 {
        log.record(&serde_json::json!({ "stage": "rl", "config": cfg.echo() }))?;
    }
    let mut on_epoch = |epoch: usize, m: &Model| -> Result<(), TrainError> {
        if let Some(path) = snapshot {
            let mut meta = stage_metadata(cfg, "rl-snapshot");
            meta.insert("rl.next_epoch".into(), (epoch + 1).to_string());
            m.to_checkpoint(meta).save(path)?;
        }
        Ok(())
    };
    let report = train_rl(model, scenarios, &cfg.rl, &Vocabulary::default(), log, start_epoch, &mut on_epoch)?;
    for (i, r) in report.epoch_mean_reward.iter().enumerate() {
        println!("rl epoch {:>3}: mean reward {r:.5}", start_epoch + i);
    }
    for w in &report.warnings {
        eprintln!("cophy: warning: {w}");
    }
    Ok(())
}

impl From<cophy::neural::NeuralError> for CliError {
    fn from(e: cophy::neural::NeuralError) -> Self {
        CliError::data(e.into())
    }
}

fn train_rl_cmd(
    cfg: &RunConfig,
    data: &Path,
    ckpt: &Path,
    resume: Option<&Path>,
    out: Option<PathBuf>,
    metrics: Option<PathBuf>,
) -> Result<(), CliError> {
    let out = require_out(out)?;
    let scenarios = load_scenarios(data)?;
    let (mut model, start) = match resume {
        Some(snap) => {
            let (m, c) = load_model(snap)?;
            let next = c
                .metadata
                .get("rl.next_epoch")
                .and_then(|v| v.parse::<usize>().ok())
                .ok_or_else(|| CliError::data(anyhow!("{} is not an RL snapshot", snap.display())))?;
            (m, next)
        }
        None => (load_model(ckpt)?.0, 0),
    };
    let snapshot = with_suffix(&out, ".snapshot");
    let mut log = metrics_log(&metrics.unwrap_or_else(|| with_suffix(&out, ".metrics.ndjson")), resume.is_some())?;
    run_rl(cfg, &mut model, &scenarios, start, Some(&snapshot), &mut log)?;
    write_file(&out, &model.to_checkpoint(stage_metadata(cfg, "rl")).to_bytes())?;
    fs::remove_file(&snapshot).ok();
    println!("wrote {}", out.display());
    Ok(())
}

pub fn write_report(report: &Report, out: &Path, csv: Option<&Path>) -> Result<(), CliError> {
    write_file(out, report.to_json().as_bytes())?;
    if let Some(csv) = csv {
        write_file(csv, report.summary_csv().as_bytes())?;
    }
    Ok(())
}

fn eval_cmd(
    cfg: &RunConfig,
    data: &Path,
    ckpt: Option<&Path>,
    expert: bool,
    out: Option<PathBuf>,
    csv: Option<PathBuf>,
) -> Result<(), CliError> {
    let out = require_out(out)?;
    let scenarios = load_scenarios(data)?;
    let report = if expert {
        evaluate_expert(&scenarios, cfg.echo()).data_ctx(|| "scoring expert trajectories".into())?
    } else {
        let path = ckpt.expect("clap enforces --ckpt without --expert");
        let (model, c) = load_model(path)?;
        let mut opts = cfg.eval.clone();
        if let Some(stage) = c.metadata.get("stage") {
            opts.mode = stage.clone();
        }
        evaluate_policy(&model, &scenarios, &Vocabulary::default(), &opts, cfg.echo())
            .data_ctx(|| format!("evaluating {}", path.display()))?
    };
    write_report(&report, &out, csv.as_deref())?;
    println!("pdms {:.5}  epdms {:.5}  ({} scenarios) -> {}", report.summary.pdms, report.summary.epdms, report.summary.count, out.display());
    Ok(())
}

fn serve_cmd(cfg: &RunConfig, ckpt: &Path) -> Result<(), CliError> {
    let (model, _) = load_model(ckpt)?;
    let addr: std::net::SocketAddr =
        cfg.serve.addr.parse().map_err(|e| CliError::usage(anyhow!("bad address '{}': {e}", cfg.serve.addr)))?;
    let planner = Planner { model: Arc::new(model), vocab: Arc::new(Vocabulary::default()), config: cfg.serve.session.clone() };
    let rt = tokio::runtime::Runtime::new().data_ctx(|| "starting runtime".into())?;
    println!("listening on http://{addr}");
    std::io::stdout().flush().ok();
    rt.block_on(serve(planner, addr)).data_ctx(|| format!("serving on {addr}"))
}
