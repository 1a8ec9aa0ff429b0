//! Perception encoder, BEV tokenizer, trajectory encoder, and the
//! prototype-anchored trajectory refiner with its Gaussian head.
//!
//! All learnable modules of the planner share one [`ParameterStore`]; the
//! name prefix identifies the module (`enc.`, `tok.`, `te.`, `refiner.`,
//! `wm.`, `phy.`, `co.`). Stage-3 training unfreezes only `refiner.`.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::command::COGNITIVE_DIM;
use crate::neural::{Checkpoint, Graph, NeuralError, ParameterStore, Tensor, Var};
use crate::scenario::SemanticGrid;
use crate::trajectory::{PrototypeBank, Trajectory, TrajectoryError, WAYPOINTS};

/// Channels of the BEV state `B`.
pub const FEATURE_CHANNELS: usize = 32;
/// Side length of the BEV state after the encoder's three 2x poolings.
pub const FEATURE_SIDE: usize = 8;
/// Spatial upsampling factor from the BEV state back to the grid.
pub const DECODER_FACTOR: usize = 8;
pub const EGO_DIM: usize = 32;
pub const HEAD_DIM: usize = 32;
pub const TRAJ_DIM: usize = 2 * WAYPOINTS;
/// Trajectory coordinates are multiplied by this before entering a network.
pub const TRAJ_SCALE: f64 = 0.125;
pub const REFINER_HIDDEN: usize = 64;
/// Flattened width of the physical head's spatial features.
pub const PHY_FLAT: usize = (FEATURE_SIDE / 2) * (FEATURE_SIDE / 2) * PHY_CHANNELS;
pub const LOG_STD_MIN: f64 = -5.0;
pub const LOG_STD_MAX: f64 = 1.0;
/// Speed normalizer for the refiner's ego-speed input.
const SPEED_SCALE: f64 = 0.2;
const ENC1_CHANNELS: usize = 16;
const PHY_CHANNELS: usize = 16;
/// The refiner sees the BEV state average-pooled to this side length.
const SCENE_SIDE: usize = 4;
const SCENE_DIM: usize = 32;
const PHY_HIDDEN: usize = 32;

#[derive(Debug, thiserror::Error)]
pub enum PolicyError {
    #[error(transparent)]
    Neural(#[from] NeuralError),
    #[error(transparent)]
    Trajectory(#[from] TrajectoryError),
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("need at least {needed} candidates, got {got}")]
    InsufficientCandidates { needed: usize, got: usize },
    #[error("checkpoint is missing `{0}`")]
    Checkpoint(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// World-model rollout steps `K`; step `k` covers `4k/K` seconds.
    pub wm_steps: usize,
    /// Bound on the per-coordinate refinement offset, in metres.
    pub max_offset: f64,
    pub init_log_std: f64,
    /// Cognitive filter threshold for hierarchical selection.
    pub psi: f64,
    /// Distance temperature of the physical score target, in metres.
    pub tau_d: f64,
    pub nce_temperature: f64,
    pub nce_negatives: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            wm_steps: 2,
            max_offset: 2.0,
            init_log_std: -0.7,
            psi: 0.0,
            tau_d: 1.0,
            nce_temperature: 0.07,
            nce_negatives: 5,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), PolicyError> {
        if self.wm_steps == 0 || crate::scenario::HORIZON_TICKS % self.wm_steps != 0 {
            return Err(PolicyError::Config(format!(
                "k-steps must divide the {}-tick horizon, got {}",
                crate::scenario::HORIZON_TICKS,
                self.wm_steps
            )));
        }
        if !(self.max_offset > 0.0 && self.tau_d > 0.0 && self.nce_temperature > 0.0) {
            return Err(PolicyError::Config("offset clamp and temperatures must be positive".into()));
        }
        Ok(())
    }
}

/// The full planner: configuration, prototype bank and weights.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub bank: PrototypeBank,
    pub store: ParameterStore,
}

fn he(store: &ParameterStore, name: &str, shape: &[usize], fan_in: usize) -> Tensor {
    let mut rng = store.init_rng(name);
    Tensor::randn(shape, (2.0 / fan_in as f64).sqrt(), &mut rng)
}

fn glorot(store: &ParameterStore, name: &str, shape: &[usize], fan_in: usize, fan_out: usize) -> Tensor {
    let mut rng = store.init_rng(name);
    Tensor::randn(shape, (2.0 / (fan_in + fan_out) as f64).sqrt(), &mut rng)
}

impl Model {
    pub fn new(config: ModelConfig, bank: PrototypeBank, seed: u64) -> Result<Self, PolicyError> {
        config.validate()?;
        if bank.prototypes.is_empty() || bank.prototypes.iter().any(|p| p.len() != WAYPOINTS) {
            return Err(PolicyError::Config("prototype bank must hold full-horizon trajectories".into()));
        }
        let mut store = ParameterStore::new(seed);
        let c = FEATURE_CHANNELS;
        let k = config.wm_steps;
        let put = |store: &mut ParameterStore, name: &str, t: Tensor| store.insert(name, t);

        let t = he(&store, "enc.conv1.k", &[3, 3, 5, ENC1_CHANNELS], 9 * 5);
        put(&mut store, "enc.conv1.k", t);
        put(&mut store, "enc.conv1.b", Tensor::zeros(&[ENC1_CHANNELS]));
        let t = he(&store, "enc.conv2.k", &[3, 3, ENC1_CHANNELS, c], 9 * ENC1_CHANNELS);
        put(&mut store, "enc.conv2.k", t);
        put(&mut store, "enc.conv2.b", Tensor::zeros(&[c]));

        let t = glorot(&store, "tok.w", &[c, COGNITIVE_DIM], c, COGNITIVE_DIM);
        put(&mut store, "tok.w", t);

        let t = he(&store, "te.w1", &[TRAJ_DIM, EGO_DIM], TRAJ_DIM);
        put(&mut store, "te.w1", t);
        put(&mut store, "te.b1", Tensor::zeros(&[EGO_DIM]));
        let t = glorot(&store, "te.w2", &[EGO_DIM, EGO_DIM], EGO_DIM, EGO_DIM);
        put(&mut store, "te.w2", t);
        put(&mut store, "te.b2", Tensor::zeros(&[EGO_DIM]));

        let scene_in = SCENE_SIDE * SCENE_SIDE * c;
        let t = he(&store, "refiner.scene.w", &[scene_in, SCENE_DIM], scene_in);
        put(&mut store, "refiner.scene.w", t);
        put(&mut store, "refiner.scene.b", Tensor::zeros(&[SCENE_DIM]));
        let rin = EGO_DIM + SCENE_DIM + COGNITIVE_DIM + 1;
        let t = he(&store, "refiner.w1", &[rin, REFINER_HIDDEN], rin);
        put(&mut store, "refiner.w1", t);
        put(&mut store, "refiner.b1", Tensor::zeros(&[REFINER_HIDDEN]));
        put(&mut store, "refiner.w2", Tensor::zeros(&[REFINER_HIDDEN, TRAJ_DIM]));
        put(&mut store, "refiner.b2", Tensor::zeros(&[TRAJ_DIM]));
        put(&mut store, "refiner.log_std", Tensor::filled(&[1, TRAJ_DIM], config.init_log_std));

        // Depthwise kernel starts near a centred identity so the transition
        // has a usable spatial path once the pointwise mix leaves zero.
        let mut dw = Tensor::randn(&[3, 3, c], 0.05, &mut store.init_rng("wm.dw"));
        for ch in 0..c {
            dw.data_mut()[4 * c + ch] += 1.0;
        }
        put(&mut store, "wm.dw", dw);
        put(&mut store, "wm.pw", Tensor::zeros(&[1, 1, c, c]));
        put(&mut store, "wm.pw_b", Tensor::zeros(&[c]));
        put(&mut store, "wm.cond.w", Tensor::zeros(&[EGO_DIM + COGNITIVE_DIM, c]));
        put(&mut store, "wm.cond.b", Tensor::zeros(&[c]));
        put(&mut store, "wm.ego.w", Tensor::zeros(&[EGO_DIM + c + COGNITIVE_DIM, EGO_DIM]));
        put(&mut store, "wm.ego.b", Tensor::zeros(&[EGO_DIM]));
        let t = glorot(&store, "wm.dec.k", &[c, DECODER_FACTOR, DECODER_FACTOR, 5], c, 5);
        put(&mut store, "wm.dec.k", t);
        put(&mut store, "wm.dec.b", Tensor::zeros(&[5]));

        let t = he(&store, "phy.conv.k", &[3, 3, k * c, PHY_CHANNELS], 9 * k * c);
        put(&mut store, "phy.conv.k", t);
        put(&mut store, "phy.conv.b", Tensor::zeros(&[PHY_CHANNELS]));
        let pin = PHY_FLAT + EGO_DIM + 1;
        let t = he(&store, "phy.w1", &[pin, PHY_HIDDEN], pin);
        put(&mut store, "phy.w1", t);
        put(&mut store, "phy.b1", Tensor::zeros(&[PHY_HIDDEN]));
        let t = glorot(&store, "phy.w2", &[PHY_HIDDEN, 1], PHY_HIDDEN, 1);
        put(&mut store, "phy.w2", t);
        put(&mut store, "phy.b2", Tensor::zeros(&[1]));

        for (head, fan) in [("co.traj", TRAJ_DIM), ("co.cog", COGNITIVE_DIM)] {
            let n1 = format!("{head}.w1");
            let t = he(&store, &n1, &[fan, HEAD_DIM], fan);
            put(&mut store, &n1, t);
            put(&mut store, &format!("{head}.b1"), Tensor::zeros(&[HEAD_DIM]));
            let n2 = format!("{head}.w2");
            let t = glorot(&store, &n2, &[HEAD_DIM, HEAD_DIM], HEAD_DIM, HEAD_DIM);
            put(&mut store, &n2, t);
            put(&mut store, &format!("{head}.b2"), Tensor::zeros(&[HEAD_DIM]));
        }
        Ok(Self { config, bank, store })
    }

    pub fn n_candidates(&self) -> usize {
        self.bank.prototypes.len()
    }

    /// Prototype coordinates as an `[N, 16]` tensor in metres.
    pub fn prototype_tensor(&self) -> Tensor {
        let data: Vec<f64> = self.bank.prototypes.iter().flat_map(Trajectory::flat_xy).collect();
        Tensor::new(vec![self.n_candidates(), TRAJ_DIM], data).expect("prototype shape")
    }

    /// Serializes weights, optimizer state, configuration and bank.
    pub fn to_checkpoint(&self, mut metadata: BTreeMap<String, String>) -> Checkpoint {
        metadata.insert("model.config".into(), serde_json::to_string(&self.config).expect("config serializes"));
        metadata.insert("model.bank".into(), self.bank.to_json());
        self.store.to_checkpoint(metadata)
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self, PolicyError> {
        let config: ModelConfig = ckpt
            .metadata
            .get("model.config")
            .and_then(|s| serde_json::from_str(s).ok())
            .ok_or_else(|| PolicyError::Checkpoint("model.config".into()))?;
        config.validate()?;
        let bank = PrototypeBank::from_json(
            ckpt.metadata.get("model.bank").ok_or_else(|| PolicyError::Checkpoint("model.bank".into()))?,
        )?;
        let store = ParameterStore::from_checkpoint(ckpt)?;
        let fresh = Model::new(config.clone(), bank.clone(), store.seed())?;
        for (name, t) in fresh.store.iter() {
            match store.get(name) {
                Some(v) if v.shape() == t.shape() => {}
                _ => return Err(PolicyError::Checkpoint(format!("parameter {name}"))),
            }
        }
        Ok(Self { config, bank, store })
    }
}

/// Trajectories as a scaled `[n, 16]` network input.
pub fn trajectory_features(trajs: &[Trajectory]) -> Tensor {
    let data: Vec<f64> = trajs.iter().flat_map(|t| t.flat_xy()).map(|v| v * TRAJ_SCALE).collect();
    Tensor::new(vec![trajs.len(), TRAJ_DIM], data).expect("trajectory features")
}

/// Output of the perception encoder.
#[derive(Clone, Copy, Debug)]
pub struct Encoded {
    /// `[8, 8, 32]` BEV state `B0`.
    pub b0: Var,
    /// Spatial mean of `B0`, `[1, 32]`.
    pub pooled: Var,
}

pub fn pool_state(g: &mut Graph, b: Var) -> Result<Var, NeuralError> {
    let flat = g.reshape(b, &[FEATURE_SIDE * FEATURE_SIDE, FEATURE_CHANNELS])?;
    Ok(g.mean_rows(flat))
}

pub fn encode_grid(g: &mut Graph, store: &ParameterStore, grid: &SemanticGrid) -> Result<Encoded, NeuralError> {
    let x = g.input(grid.to_tensor());
    let (k1, b1) = (g.param(store, "enc.conv1.k")?, g.param(store, "enc.conv1.b")?);
    let (k2, b2) = (g.param(store, "enc.conv2.k")?, g.param(store, "enc.conv2.b")?);
    let h = g.conv2d(x, k1, b1)?;
    let h = g.relu(h);
    let h = g.avg_pool(h, 2)?;
    let h = g.avg_pool(h, 2)?;
    let h = g.conv2d(h, k2, b2)?;
    let h = g.relu(h);
    let b0 = g.avg_pool(h, 2)?;
    let pooled = pool_state(g, b0)?;
    Ok(Encoded { b0, pooled })
}

/// BEV tokenizer `BE`: a bias-free projection of the pooled state onto the
/// cognitive space, unit-normalized.
pub fn tokenize(g: &mut Graph, store: &ParameterStore, pooled: Var) -> Result<Var, NeuralError> {
    let w = g.param(store, "tok.w")?;
    let z = g.matmul(pooled, w)?;
    Ok(g.normalize_rows(z, 1e-9))
}

/// `1 - cos(BE(B0), C)` for a unit cognitive vector `c`.
pub fn distill_loss(g: &mut Graph, be: Var, c: Var) -> Result<Var, NeuralError> {
    let prod = g.mul(be, c)?;
    let cos = g.sum(prod);
    let neg = g.scale(cos, -1.0);
    Ok(g.offset(neg, 1.0))
}

/// Trajectory encoder `TE` over scaled `[n, 16]` features.
pub fn trajectory_encoder(g: &mut Graph, store: &ParameterStore, feats: Var) -> Result<Var, NeuralError> {
    mlp2(g, store, "te", feats, false)
}

/// Two-layer perceptron with a ReLU hidden layer under `prefix.{w1,b1,w2,b2}`.
pub(crate) fn mlp2(g: &mut Graph, store: &ParameterStore, prefix: &str, x: Var, relu_out: bool) -> Result<Var, NeuralError> {
    let w1 = g.param(store, &format!("{prefix}.w1"))?;
    let b1 = g.param(store, &format!("{prefix}.b1"))?;
    let w2 = g.param(store, &format!("{prefix}.w2"))?;
    let b2 = g.param(store, &format!("{prefix}.b2"))?;
    let h = g.matmul(x, w1)?;
    let h = g.add_bias(h, b1)?;
    let h = g.relu(h);
    let y = g.matmul(h, w2)?;
    let y = g.add_bias(y, b2)?;
    Ok(if relu_out { g.relu(y) } else { y })
}

/// Refined candidate means and the shared Gaussian scale.
#[derive(Clone, Copy, Debug)]
pub struct RefinerVars {
    /// `[N, 16]` candidate coordinates in metres.
    pub means: Var,
    /// `[1, 16]` clamped log standard deviation.
    pub log_std: Var,
}

/// Refines every prototype given the BEV state `b0`, cognitive vector `c`
/// (`[1, 64]`) and ego speed.
pub fn refine(
    g: &mut Graph,
    model: &Model,
    b0: Var,
    c: Var,
    speed: f64,
) -> Result<RefinerVars, NeuralError> {
    let store = &model.store;
    let n = model.n_candidates();
    let protos = model.prototype_tensor();
    let feats = g.input(trajectory_features(&model.bank.prototypes));
    let te = trajectory_encoder(g, store, feats)?;
    let coarse = g.avg_pool(b0, FEATURE_SIDE / SCENE_SIDE)?;
    let flat = g.reshape(coarse, &[1, SCENE_SIDE * SCENE_SIDE * FEATURE_CHANNELS])?;
    let sw = g.param(store, "refiner.scene.w")?;
    let sb = g.param(store, "refiner.scene.b")?;
    let scene = g.matmul(flat, sw)?;
    let scene = g.add_bias(scene, sb)?;
    let scene = g.relu(scene);
    let scene = g.repeat_rows(scene, n)?;
    let cog = g.repeat_rows(c, n)?;
    let v = g.input(Tensor::filled(&[n, 1], speed * SPEED_SCALE));
    let x = g.concat_cols(&[te, scene, cog, v])?;
    let delta = mlp2(g, store, "refiner", x, false)?;
    let delta = g.tanh(delta);
    let delta = g.scale(delta, model.config.max_offset);
    let base = g.input(protos);
    let means = g.add(base, delta)?;
    let raw = g.param(store, "refiner.log_std")?;
    let log_std = g.clamp(raw, LOG_STD_MIN, LOG_STD_MAX);
    Ok(RefinerVars { means, log_std })
}

/// Value-level refiner output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RefinerOutput {
    pub candidates: Vec<Trajectory>,
    pub log_std: Vec<f64>,
}

impl RefinerOutput {
    pub fn from_graph(g: &Graph, vars: RefinerVars) -> Self {
        let candidates = g.value(vars.means).data().chunks(TRAJ_DIM).map(Trajectory::from_flat).collect();
        Self { candidates, log_std: g.value(vars.log_std).data().to_vec() }
    }
}

/// Draws a diagonal-Gaussian sample around `candidates[index]` and returns
/// it with its log-density.
pub fn sample_trajectory<R: Rng + ?Sized>(
    out: &RefinerOutput,
    index: usize,
    rng: &mut R,
) -> Result<(Trajectory, f64), PolicyError> {
    let mean = out
        .candidates
        .get(index)
        .ok_or(PolicyError::InsufficientCandidates { needed: index + 1, got: out.candidates.len() })?
        .flat_xy();
    let sample: Vec<f64> = mean
        .iter()
        .zip(&out.log_std)
        .map(|(m, s)| m + s.exp() * rng.sample::<f64, _>(StandardNormal))
        .collect();
    let lp = crate::neural::gaussian_log_density(&sample, &mean, &out.log_std);
    Ok((Trajectory::from_flat(&sample), lp))
}

/// Differential entropy of the diagonal Gaussian with the given log-stds.
pub fn gaussian_entropy(log_std: &[f64]) -> f64 {
    log_std.iter().map(|s| 0.5 * (1.0 + (2.0 * std::f64::consts::PI).ln()) + s).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::command::{Command, Vocabulary};
    use crate::scenario::{generate_scenario, Template};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn toy_bank(n: usize) -> PrototypeBank {
        let prototypes = (0..n)
            .map(|i| {
                let v = 0.5 + i as f64 * 0.3;
                let lat = (i as f64 - n as f64 / 2.0) * 0.2;
                Trajectory::from_xy(&(1..=8).map(|k| (v * 0.5 * k as f64, lat * k as f64 / 8.0)).collect::<Vec<_>>())
            })
            .collect();
        PrototypeBank { schema: crate::trajectory::PROTOS_SCHEMA.into(), seed: 0, corpus_digest: String::new(), prototypes }
    }

    #[test]
    fn zero_initialized_refiner_returns_prototypes() {
        let model = Model::new(ModelConfig::default(), toy_bank(8), 1).unwrap();
        let s = generate_scenario(0, Template::Straight);
        let mut g = Graph::new();
        let enc = encode_grid(&mut g, &model.store, &s.initial_grid).unwrap();
        let c = g.input(Tensor::row(Vocabulary::default().embedding(Command::ProceedStraight).to_vec()));
        let r = refine(&mut g, &model, enc.b0, c, s.ego.speed).unwrap();
        let out = RefinerOutput::from_graph(&g, r);
        assert_eq!(out.candidates, model.bank.prototypes);
        assert_eq!(g.value(enc.b0).shape(), &[FEATURE_SIDE, FEATURE_SIDE, FEATURE_CHANNELS]);
    }

    #[test]
    fn distill_loss_closed_forms() {
        let mut g = Graph::new();
        let a = g.input(Tensor::row(vec![1.0, 0.0, 0.0]));
        let b = g.input(Tensor::row(vec![-1.0, 0.0, 0.0]));
        let o = g.input(Tensor::row(vec![0.0, 1.0, 0.0]));
        let same = distill_loss(&mut g, a, a).unwrap();
        let anti = distill_loss(&mut g, a, b).unwrap();
        let orth = distill_loss(&mut g, a, o).unwrap();
        assert_eq!((g.scalar(same), g.scalar(anti), g.scalar(orth)), (0.0, 2.0, 1.0));
    }

    #[test]
    fn tokenizer_is_scale_invariant() {
        let model = Model::new(ModelConfig::default(), toy_bank(4), 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let pooled = Tensor::randn(&[1, FEATURE_CHANNELS], 1.0, &mut rng);
        let doubled = Tensor::new(pooled.shape().to_vec(), pooled.data().iter().map(|v| 2.0 * v).collect()).unwrap();
        let c = Tensor::row(Vocabulary::default().embedding(Command::Yield).to_vec());
        let loss = |p: Tensor| {
            let mut g = Graph::new();
            let x = g.input(p);
            let be = tokenize(&mut g, &model.store, x).unwrap();
            let cv = g.input(c.clone());
            let l = distill_loss(&mut g, be, cv).unwrap();
            g.scalar(l)
        };
        assert!((loss(pooled) - loss(doubled)).abs() < 1e-9);
    }

    #[test]
    fn log_density_at_mean_and_floor_sampling() {
        let out = RefinerOutput { candidates: toy_bank(3).prototypes, log_std: vec![-0.3; TRAJ_DIM] };
        let mean = out.candidates[1].flat_xy();
        let at_mean = crate::neural::gaussian_log_density(&mean, &mean, &out.log_std);
        let closed: f64 = out.log_std.iter().map(|s| -(s.exp() * (2.0 * std::f64::consts::PI).sqrt()).ln()).sum();
        assert!((at_mean - closed).abs() < 1e-12);

        let tight = RefinerOutput { log_std: vec![LOG_STD_MIN; TRAJ_DIM], ..out };
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut close = 0;
        for _ in 0..10_000 {
            let (s, _) = sample_trajectory(&tight, 1, &mut rng).unwrap();
            let mad = s.flat_xy().iter().zip(&mean).map(|(a, b)| (a - b).abs()).sum::<f64>() / TRAJ_DIM as f64;
            if mad < 1e-2 {
                close += 1;
            }
        }
        assert!(close as f64 / 10_000.0 > 0.999);
        assert!(sample_trajectory(&tight, 3, &mut rng).is_err());
    }

    #[test]
    fn checkpoint_round_trip_restores_the_model() {
        let model = Model::new(ModelConfig { wm_steps: 4, ..ModelConfig::default() }, toy_bank(6), 5).unwrap();
        let ckpt = model.to_checkpoint(BTreeMap::new());
        let back = Model::from_checkpoint(&Checkpoint::from_bytes(&ckpt.to_bytes()).unwrap()).unwrap();
        assert_eq!(back.config, model.config);
        assert_eq!(back.bank, model.bank);
        assert_eq!(back.store, model.store);
    }

    #[test]
    fn invalid_step_count_is_rejected() {
        assert!(Model::new(ModelConfig { wm_steps: 3, ..ModelConfig::default() }, toy_bank(2), 0).is_err());
    }
}
