//! Three-phase training: contrastive task encoder, hitting-time embedding,
//! and a latent-direction policy.

mod loss;

pub use loss::{
    directed_score, directed_score_grad, discounted_label, emb_loss, expectile_weight,
    info_nce_from_embeddings, latent_advantage, log_softmax, nce_loss_with_noise, normalize,
    policy_loss, EmbTerms, LossBreakdown, PolicyLoss, NORM_EPS, WEIGHT_CLIP,
};

use std::time::Instant;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::diffkit::{Activation, Adam, DenseNet, NetRecord};
use crate::env::{extract_tuples_with, sample_transitions, Dataset, FiniteCmp, GoalScheme};
use crate::rng::{self, StreamRng};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub gamma: f64,
    pub tau_v: f64,
    pub tau_h: f64,
    pub beta: f64,
    pub kappa: f64,
    pub h_max: usize,
    pub latent_dim: usize,
    pub temp_nce: f64,
    pub aug_sigma: f64,
    pub phase_steps: [usize; 3],
    pub batch: usize,
    pub lr: f64,
    pub target_tau: f64,
    pub actor_temp: f64,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub features: FeatureKind,
    pub goal_future_weight: f64,
    pub goal_random_weight: f64,
    pub goal_future_p: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let goals = GoalScheme::default();
        Self {
            gamma: 0.99,
            tau_v: 0.95,
            tau_h: 0.5,
            beta: 0.1,
            kappa: 1.0,
            h_max: 10,
            latent_dim: 32,
            temp_nce: 0.1,
            aug_sigma: 0.1,
            phase_steps: [200, 4800, 5000],
            batch: 256,
            lr: 3e-4,
            target_tau: 0.005,
            actor_temp: 10.0,
            hidden: vec![64, 64],
            activation: Activation::Gelu,
            features: FeatureKind::OneHot,
            goal_future_weight: goals.future_weight,
            goal_random_weight: goals.random_weight,
            goal_future_p: goals.future_p,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let unit_open = |v: f64| v > 0.0 && v < 1.0;
        let checks: [(bool, &str); 14] = [
            (unit_open(self.gamma), "gamma must lie in (0, 1)"),
            (unit_open(self.tau_v), "tau_v must lie in (0, 1)"),
            (unit_open(self.tau_h), "tau_h must lie in (0, 1)"),
            (self.beta >= 0.0, "beta must be >= 0"),
            (self.kappa >= 0.0, "kappa must be >= 0"),
            (self.h_max >= 1, "h_max must be >= 1"),
            (self.latent_dim >= 1, "latent_dim must be >= 1"),
            (self.temp_nce > 0.0, "temp_nce must be > 0"),
            (self.aug_sigma >= 0.0, "aug_sigma must be >= 0"),
            (self.batch >= 1, "batch must be >= 1"),
            (self.lr > 0.0, "lr must be > 0"),
            (
                self.target_tau > 0.0 && self.target_tau <= 1.0,
                "target_tau must lie in (0, 1]",
            ),
            (self.actor_temp > 0.0, "actor_temp must be > 0"),
            (!self.hidden.contains(&0), "hidden sizes must be positive"),
        ];
        let reals = [
            self.beta,
            self.kappa,
            self.aug_sigma,
            self.lr,
            self.actor_temp,
            self.temp_nce,
        ];
        if !reals.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidArgument(
                "non-finite training parameter".into(),
            ));
        }
        for (ok, msg) in checks {
            if !ok {
                return Err(Error::InvalidArgument(msg.into()));
            }
        }
        self.goal_scheme_checked().map(|_| ())
    }

    pub fn goal_scheme(&self) -> GoalScheme {
        GoalScheme {
            future_weight: self.goal_future_weight,
            random_weight: self.goal_random_weight,
            future_p: self.goal_future_p,
        }
    }

    fn goal_scheme_checked(&self) -> Result<GoalScheme> {
        let g = self.goal_scheme();
        let ok = g.future_weight >= 0.0
            && g.random_weight >= 0.0
            && g.future_weight + g.random_weight > 0.0
            && g.future_p > 0.0
            && g.future_p <= 1.0;
        if ok {
            Ok(g)
        } else {
            Err(Error::InvalidArgument(format!(
                "invalid goal relabeling {g:?}"
            )))
        }
    }

    fn dims(&self, input: usize, output: usize) -> Vec<usize> {
        let mut d = vec![input];
        d.extend(&self.hidden);
        d.push(output);
        d
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureKind {
    #[default]
    OneHot,
    /// Grid coordinates scaled to `[0, 1]`.
    Coords,
}

/// State features, one column per state.
pub fn feature_matrix(env: &FiniteCmp, kind: FeatureKind) -> Result<DMatrix<f64>> {
    let n = env.n_states();
    match kind {
        FeatureKind::OneHot => Ok(DMatrix::identity(n, n)),
        FeatureKind::Coords => {
            let c = env
                .coords()
                .ok_or_else(|| Error::InvalidArgument("environment has no coordinates".into()))?;
            let scale = c
                .iter()
                .flat_map(|p| p.iter())
                .fold(1.0f64, |m, v| m.max(v.abs()));
            Ok(DMatrix::from_fn(2, n, |i, j| c[j][i] / scale))
        }
    }
}

/// Distinct states of several index lists gathered into one feature batch.
pub(crate) struct Gathered {
    pub inputs: DMatrix<f64>,
    slot: Vec<usize>,
}

impl Gathered {
    pub fn new(features: &DMatrix<f64>, lists: &[&[usize]]) -> Self {
        let mut slot = vec![usize::MAX; features.ncols()];
        let mut order = Vec::new();
        for list in lists {
            for &s in *list {
                if slot[s] == usize::MAX {
                    slot[s] = order.len();
                    order.push(s);
                }
            }
        }
        Self {
            inputs: features.select_columns(order.iter()),
            slot,
        }
    }

    /// Column holding state `s`.
    pub fn col(&self, s: usize) -> usize {
        self.slot[s]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskEncoder {
    pub net: DenseNet,
    pub frozen: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StateEncoder {
    pub net: DenseNet,
    pub target: DenseNet,
    pub frozen: bool,
}

/// `pi(a | x, z)`: logits from the concatenation of state features and `z`.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentPolicy {
    pub net: DenseNet,
    feature_dim: usize,
}

impl LatentPolicy {
    pub fn new(net: DenseNet, feature_dim: usize) -> Result<Self> {
        if net.input_dim() <= feature_dim {
            return Err(Error::ShapeMismatch(
                "policy input leaves no room for z".into(),
            ));
        }
        Ok(Self { net, feature_dim })
    }

    pub fn latent_dim(&self) -> usize {
        self.net.input_dim() - self.feature_dim
    }

    pub fn n_actions(&self) -> usize {
        self.net.output_dim()
    }

    /// Stacked `[features(s); z]` columns.
    pub fn inputs(
        &self,
        features: &DMatrix<f64>,
        states: &[usize],
        z: &DMatrix<f64>,
    ) -> Result<DMatrix<f64>> {
        if features.nrows() != self.feature_dim || z.nrows() != self.latent_dim() {
            return Err(Error::ShapeMismatch("policy input dimensions".into()));
        }
        let fd = self.feature_dim;
        Ok(DMatrix::from_fn(
            self.net.input_dim(),
            states.len(),
            |i, j| {
                if i < fd {
                    features[(i, states[j])]
                } else {
                    z[(i - fd, j)]
                }
            },
        ))
    }

    pub fn logits(&self, x: &[f64], z: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.feature_dim || z.len() != self.latent_dim() {
            return Err(Error::ShapeMismatch("policy input dimensions".into()));
        }
        let zn = normalize(z);
        let input: Vec<f64> = x.iter().chain(&zn).copied().collect();
        self.net.forward(&input)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActMode {
    Greedy,
    Sample,
}

/// Greedy picks the lowest index among maximal logits.
pub fn act<R: Rng + ?Sized>(
    policy: &LatentPolicy,
    x: &[f64],
    z: &[f64],
    mode: ActMode,
    rng: &mut R,
) -> Result<usize> {
    let logits = policy.logits(x, z)?;
    Ok(choose(&logits, mode, rng))
}

pub(crate) fn choose<R: Rng + ?Sized>(logits: &[f64], mode: ActMode, rng: &mut R) -> usize {
    match mode {
        ActMode::Greedy => {
            let mut best = 0;
            for (i, &l) in logits.iter().enumerate() {
                if l > logits[best] {
                    best = i;
                }
            }
            best
        }
        ActMode::Sample => {
            let p: Vec<f64> = log_softmax(logits).iter().map(|l| l.exp()).collect();
            rng::sample_categorical(&p, rng)
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Phase {
    Task,
    Embedding,
    Policy,
}

impl Phase {
    pub const ALL: [Phase; 3] = [Phase::Task, Phase::Embedding, Phase::Policy];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Phase::Task => "task",
            Phase::Embedding => "embedding",
            Phase::Policy => "policy",
        }
    }
}

/// One optimizer step. Terms that do not apply to the phase are `None`.
#[derive(Clone, Debug, PartialEq)]
pub struct StepLog {
    pub phase: Phase,
    pub step: usize,
    pub td_term: Option<f64>,
    pub hit_term: Option<f64>,
    pub nce: Option<f64>,
    pub policy: Option<f64>,
    /// Milliseconds since the phase started.
    pub wall_ms: f64,
}

impl StepLog {
    pub fn total(&self) -> f64 {
        [self.td_term, self.hit_term, self.nce, self.policy]
            .iter()
            .flatten()
            .sum()
    }
}

/// All trainable state of a run.
#[derive(Clone, Debug, PartialEq)]
pub struct IelModel {
    pub features: DMatrix<f64>,
    pub task: TaskEncoder,
    pub phi: StateEncoder,
    pub policy: LatentPolicy,
    pub task_opt: Adam,
    pub phi_opt: Adam,
    pub policy_opt: Adam,
    /// Number of phases finished so far.
    pub completed: usize,
}

impl IelModel {
    pub fn new(features: DMatrix<f64>, n_actions: usize, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let fd = features.nrows();
        let d = cfg.latent_dim;
        let seed = |label| rng::derive_seed(cfg.seed, label);
        let task = DenseNet::new(&cfg.dims(fd, d), cfg.activation, seed("init/task"))?;
        let phi = DenseNet::new(&cfg.dims(fd, d), cfg.activation, seed("init/phi"))?;
        let pol = DenseNet::new(
            &cfg.dims(fd + d, n_actions),
            cfg.activation,
            seed("init/policy"),
        )?;
        Ok(Self {
            task_opt: Adam::new(task.n_params(), cfg.lr),
            phi_opt: Adam::new(phi.n_params(), cfg.lr),
            policy_opt: Adam::new(pol.n_params(), cfg.lr),
            task: TaskEncoder {
                net: task,
                frozen: false,
            },
            phi: StateEncoder {
                target: phi.clone(),
                net: phi,
                frozen: false,
            },
            policy: LatentPolicy::new(pol, fd)?,
            features,
            completed: 0,
        })
    }

    pub fn n_states(&self) -> usize {
        self.features.ncols()
    }

    pub fn state_features(&self, s: usize) -> &[f64] {
        let r = self.features.nrows();
        &self.features.as_slice()[s * r..(s + 1) * r]
    }

    /// `phi(x)` for every state, one column each.
    pub fn embed_all(&self) -> Result<DMatrix<f64>> {
        self.phi.net.forward_batch(&self.features)
    }

    /// `omega(g)` for every state, one column each.
    pub fn task_all(&self) -> Result<DMatrix<f64>> {
        self.task.net.forward_batch(&self.features)
    }

    pub fn act<R: Rng + ?Sized>(
        &self,
        state: usize,
        z: &[f64],
        mode: ActMode,
        rng: &mut R,
    ) -> Result<usize> {
        act(&self.policy, self.state_features(state), z, mode, rng)
    }

    pub fn records(&self) -> Vec<NetRecord> {
        vec![
            NetRecord {
                name: "task".into(),
                net: self.task.net.clone(),
                opt: Some(self.task_opt.clone()),
                frozen: self.task.frozen,
            },
            NetRecord {
                name: "phi".into(),
                net: self.phi.net.clone(),
                opt: Some(self.phi_opt.clone()),
                frozen: self.phi.frozen,
            },
            NetRecord {
                name: "phi_target".into(),
                net: self.phi.target.clone(),
                opt: None,
                frozen: self.phi.frozen,
            },
            NetRecord {
                name: "policy".into(),
                net: self.policy.net.clone(),
                opt: Some(self.policy_opt.clone()),
                frozen: false,
            },
        ]
    }

    pub fn from_records(
        features: DMatrix<f64>,
        mut records: Vec<NetRecord>,
        completed: usize,
    ) -> Result<Self> {
        let mut find = |name: &str| -> Result<NetRecord> {
            let pos = records
                .iter()
                .position(|r| r.name == name)
                .ok_or_else(|| Error::Format(format!("checkpoint lacks `{name}`")))?;
            Ok(records.swap_remove(pos))
        };
        let task = find("task")?;
        let phi = find("phi")?;
        let target = find("phi_target")?;
        let pol = find("policy")?;
        let opt = |r: &NetRecord| {
            r.opt
                .clone()
                .ok_or_else(|| Error::Format(format!("`{}` lacks optimizer state", r.name)))
        };
        let fd = features.nrows();
        if task.net.input_dim() != fd || phi.net.input_dim() != fd {
            return Err(Error::ShapeMismatch(
                "checkpoint does not match the features".into(),
            ));
        }
        Ok(Self {
            task_opt: opt(&task)?,
            phi_opt: opt(&phi)?,
            policy_opt: opt(&pol)?,
            task: TaskEncoder {
                net: task.net,
                frozen: task.frozen,
            },
            phi: StateEncoder {
                net: phi.net,
                target: target.net,
                frozen: phi.frozen,
            },
            policy: LatentPolicy::new(pol.net, fd)?,
            features,
            completed,
        })
    }
}

/// Run one phase. Phases must run in order, each exactly once; starting a
/// phase freezes the nets trained before it.
pub fn train_phase(
    phase: Phase,
    model: &mut IelModel,
    data: &Dataset,
    cfg: &TrainConfig,
) -> Result<Vec<StepLog>> {
    if phase.index() != model.completed {
        return Err(Error::PhaseOrderViolation {
            requested: phase.name(),
            completed: model.completed,
        });
    }
    cfg.validate()?;
    if data.trajectories.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if data
        .trajectories
        .iter()
        .flat_map(|t| &t.states)
        .any(|&s| s >= model.n_states())
    {
        return Err(Error::ShapeMismatch(
            "dataset state outside the feature table".into(),
        ));
    }
    let scheme = cfg.goal_scheme_checked()?;
    let mut r = rng::stream(cfg.seed, &format!("train/{}", phase.name()));
    let steps = cfg.phase_steps[phase.index()];
    let start = Instant::now();
    let mut logs = Vec::with_capacity(steps);
    match phase {
        Phase::Task => {
            let per = cfg.batch.div_ceil(3);
            for step in 0..steps {
                let b = extract_tuples_with(data, per, cfg.h_max, scheme, &mut r)?;
                let goals: Vec<usize> = b.g.iter().chain(&b.u).chain(&b.s).copied().collect();
                let x = model.features.select_columns(goals.iter());
                let noise = gaussian(x.nrows(), x.ncols(), cfg.aug_sigma, &mut r);
                let (l, g) = nce_loss_with_noise(&model.task, &x, &noise, cfg.temp_nce)?;
                model.task_opt.update(model.task.net.params_mut(), &g)?;
                logs.push(StepLog {
                    phase,
                    step,
                    td_term: None,
                    hit_term: None,
                    nce: Some(l),
                    policy: None,
                    wall_ms: elapsed_ms(start),
                });
            }
        }
        Phase::Embedding => {
            model.task.frozen = true;
            for step in 0..steps {
                let b = extract_tuples_with(data, cfg.batch, cfg.h_max, scheme, &mut r)?;
                let (l, _, g) = emb_loss(&model.phi, &model.task, &model.features, &b, cfg)?;
                model.phi_opt.update(model.phi.net.params_mut(), &g)?;
                model
                    .phi
                    .target
                    .polyak_from(&model.phi.net, cfg.target_tau)?;
                logs.push(StepLog {
                    phase,
                    step,
                    td_term: Some(l.td_term),
                    hit_term: Some(l.hit_term),
                    nce: None,
                    policy: None,
                    wall_ms: elapsed_ms(start),
                });
            }
        }
        Phase::Policy => {
            model.task.frozen = true;
            model.phi.frozen = true;
            for step in 0..steps {
                let b = sample_transitions(data, cfg.batch, &mut r);
                let z = sphere_batch(cfg.latent_dim, b.len(), &mut r);
                let (l, g) = policy_loss(&model.policy, &model.phi, &model.features, &b, &z, cfg)?;
                model.policy_opt.update(model.policy.net.params_mut(), &g)?;
                logs.push(StepLog {
                    phase,
                    step,
                    td_term: None,
                    hit_term: None,
                    nce: None,
                    policy: Some(l.loss),
                    wall_ms: elapsed_ms(start),
                });
            }
        }
    }
    model.completed += 1;
    Ok(logs)
}

fn elapsed_ms(start: Instant) -> f64 {
    start.elapsed().as_secs_f64() * 1e3
}

fn gaussian(rows: usize, cols: usize, sigma: f64, r: &mut StreamRng) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| {
        let e: f64 = StandardNormal.sample(r);
        sigma * e
    })
}

/// `cols` directions drawn uniformly on the unit sphere.
pub fn sphere_batch(dim: usize, cols: usize, r: &mut StreamRng) -> DMatrix<f64> {
    let mut z = DMatrix::zeros(dim, cols);
    for j in 0..cols {
        z.column_mut(j).copy_from_slice(&rng::unit_sphere(dim, r));
    }
    z
}

/// Train all remaining phases.
pub fn train_all(model: &mut IelModel, data: &Dataset, cfg: &TrainConfig) -> Result<Vec<StepLog>> {
    let mut logs = Vec::new();
    for phase in Phase::ALL.into_iter().skip(model.completed) {
        logs.extend(train_phase(phase, model, data, cfg)?);
    }
    Ok(logs)
}
