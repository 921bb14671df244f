//! Clipped policy-gradient learner over sequentially expanded states.
//!
//! The policy at decision `i` is a softmax over logits produced by a second
//! head that scores each rolled-out successor `s_{a_{1:i}, a}`. The critic
//! scores the decision states themselves, and advantages are accumulated
//! along the chain of decision states, so that with one agent this is
//! ordinary GAE.

use std::path::Path;
use std::time::Instant;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::env::{EnvState, GridConfig, SpidersFly, NUM_MOVES, NUM_SPIDERS};
use crate::error::{AceError, Result};
use crate::learner::{
    evaluate, make_optimizer, oracle_mean_steps, prefix_pairs, state_batch, worker_threads,
    EnvTransition, GreedyPolicy, MetricsRecord, NetValue, OrderMode, RecordSink, RolloutRequest,
    RunSummary, SeValueFn, SolveTracker,
};
use crate::mmdp::{ActionId, AgentOrder, JointAction, Transition};
use crate::model::{AceModel, Head, InteractionMap, ModelConfig, Query};
use crate::neural::{save_checkpoint, Optimizer, ParamStore, Real};
use crate::seeding;

const N: usize = NUM_SPIDERS;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PpoConfig {
    pub clip_ratio: f64,
    pub value_clip_ratio: f64,
    pub entropy_weight: f64,
    pub value_weight: f64,
    pub gae_lambda: f64,
    pub lr: f64,
    /// Decisions per minibatch.
    pub batch_size: usize,
    /// Passes over each collection.
    pub update_per_collect: usize,
    /// Complete episodes per collection, split over the environments.
    pub n_episode: usize,
    pub recompute_adv: bool,
    pub adv_norm: bool,
    pub value_norm: bool,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            clip_ratio: 0.05,
            value_clip_ratio: 0.3,
            entropy_weight: 0.01,
            value_weight: 1.0,
            gae_lambda: 0.95,
            lr: 0.0005,
            batch_size: 256,
            update_per_collect: 4,
            n_episode: 32,
            recompute_adv: true,
            adv_norm: true,
            value_norm: true,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |name: &str, v: f64| {
            if v > 0.0 && v < 1.0 {
                Ok(())
            } else {
                Err(AceError::Config(format!(
                    "ppo.{name} must be in (0, 1), got {v}"
                )))
            }
        };
        unit("clip_ratio", self.clip_ratio)?;
        unit("value_clip_ratio", self.value_clip_ratio)?;
        if !(0.0..=1.0).contains(&self.gae_lambda) {
            return Err(AceError::Config(format!(
                "ppo.gae_lambda must be in [0, 1], got {}",
                self.gae_lambda
            )));
        }
        if !(self.lr > 0.0) || self.entropy_weight < 0.0 || self.value_weight < 0.0 {
            return Err(AceError::Config(
                "ppo.lr must be positive and ppo.entropy_weight, ppo.value_weight non-negative"
                    .into(),
            ));
        }
        if self.batch_size == 0 || self.update_per_collect == 0 || self.n_episode == 0 {
            return Err(AceError::Config(
                "ppo.batch_size, ppo.update_per_collect and ppo.n_episode must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|x| x / z).collect()
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lz = m + logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln();
    logits.iter().map(|l| l - lz).collect()
}

pub fn entropy(probs: &[f64]) -> f64 {
    -probs
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|p| p * p.ln())
        .sum::<f64>()
}

/// Action probabilities at the SE-state `prefix` of `state`.
pub fn policy_distribution<T: Real>(
    model: &AceModel,
    store: &ParamStore<T>,
    side: u32,
    state: &EnvState,
    order: &AgentOrder,
    prefix: &[ActionId],
) -> Result<Vec<f64>> {
    if prefix.len() >= order.len() {
        return Err(AceError::SequenceComplete(prefix.len()));
    }
    let vf = NetValue {
        head: Head::Logit,
        ..NetValue::new(model, store, side)
    };
    let prepared = vf.prepare(std::slice::from_ref(state))?;
    let logits = vf.rollout(
        &prepared,
        &[RolloutRequest {
            state: 0,
            order,
            prefix,
        }],
    )?;
    Ok(softmax(&logits[0]))
}

/// Decision values and rewards of one episode segment in chain order.
/// `rewards[j]` is the reward observed after decision `j` (zero except at
/// the last decision of each environment step). `bootstrap` is the value of
/// the state following the last decision, zero if the episode terminated.
#[derive(Debug, Clone, PartialEq)]
pub struct SeTrajectory {
    pub values: Vec<f64>,
    pub rewards: Vec<f64>,
    pub bootstrap: f64,
}

/// `A_j = Σ_k (γλ)^k δ_{j+k}` with `δ_j = r_j + γ V_{j+1} − V_j`; returns
/// advantages and the matching returns `A_j + V_j`.
pub fn gae_advantages(
    traj: &SeTrajectory,
    gamma: f64,
    lambda: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let m = traj.values.len();
    if m == 0 || traj.rewards.len() != m {
        return Err(AceError::Malformed(format!(
            "trajectory with {} values and {} rewards",
            m,
            traj.rewards.len()
        )));
    }
    let mut adv = vec![0.0; m];
    let mut next_value = traj.bootstrap;
    let mut acc = 0.0;
    for j in (0..m).rev() {
        let delta = traj.rewards[j] + gamma * next_value - traj.values[j];
        acc = delta + gamma * lambda * acc;
        adv[j] = acc;
        next_value = traj.values[j];
    }
    let ret = adv.iter().zip(&traj.values).map(|(a, v)| a + v).collect();
    Ok((adv, ret))
}

/// Running mean and variance of value targets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunningStats {
    pub mean: f64,
    pub var: f64,
    pub count: f64,
}

impl Default for RunningStats {
    fn default() -> Self {
        Self {
            mean: 0.0,
            var: 1.0,
            count: 1e-4,
        }
    }
}

impl RunningStats {
    pub fn update(&mut self, xs: &[f64]) {
        if xs.is_empty() {
            return;
        }
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        let total = self.count + n;
        let delta = mean - self.mean;
        let m2 = self.var * self.count + var * n + delta * delta * self.count * n / total;
        self.mean += delta * n / total;
        self.var = m2 / total;
        self.count = total;
    }

    pub fn std(&self) -> f64 {
        self.var.sqrt().max(1e-8)
    }
}

/// One training decision: the SE-state `prefix` of `states[state]`, the
/// action taken there and the quantities the loss needs.
#[derive(Debug, Clone, PartialEq)]
pub struct DecisionSample {
    pub state: usize,
    pub order: AgentOrder,
    pub prefix: Vec<ActionId>,
    pub action: ActionId,
    pub logp_old: f64,
    pub advantage: f64,
    /// Value target in the critic's output space.
    pub target: f64,
    /// Critic output when the target was computed.
    pub value_old: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PpoBatch {
    pub states: Vec<EnvState>,
    pub decisions: Vec<DecisionSample>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub policy: f64,
    pub value: f64,
    pub entropy: f64,
    pub total: f64,
}

fn decision_query(d: &DecisionSample) -> Query {
    Query {
        state: d.state,
        prefix: prefix_pairs(&d.order, &d.prefix),
    }
}

fn candidate_queries(d: &DecisionSample) -> impl Iterator<Item = Query> + '_ {
    let exec = d.order.agent_at(d.prefix.len());
    let base = prefix_pairs(&d.order, &d.prefix);
    (0..NUM_MOVES).map(move |a| {
        let mut prefix = base.clone();
        prefix.push((exec, a));
        Query {
            state: d.state,
            prefix,
        }
    })
}

/// Clipped surrogate, clipped value loss and entropy bonus:
/// `total = −mean(min(ρA, clip(ρ, 1±ε)A)) + w_v · ½ mean(max((v−R)², (v_c−R)²))
/// − w_e · mean(H)`, where `v_c` is `v` clipped to `value_old ± c`. With
/// `adv_norm` the advantages are standardised over the batch first. With
/// `backward` the gradient of `total` is accumulated into `store`.
pub fn ppo_loss<T: Real>(
    model: &AceModel,
    store: &mut ParamStore<T>,
    batch: &PpoBatch,
    cfg: &PpoConfig,
    side: u32,
    backward: bool,
) -> Result<LossParts> {
    let d = batch.decisions.len();
    if d == 0 {
        return Err(AceError::Malformed("empty policy batch".into()));
    }
    let sb = state_batch::<T>(&batch.states, side)?;
    let logit_queries: Vec<Query> = batch.decisions.iter().flat_map(candidate_queries).collect();
    let value_queries: Vec<Query> = batch.decisions.iter().map(decision_query).collect();
    let (logits, lcache) = model.forward(store, &sb, logit_queries, Head::Logit, backward)?;
    let (values, vcache) = model.forward(store, &sb, value_queries, Head::Value, backward)?;

    let mut adv: Vec<f64> = batch.decisions.iter().map(|s| s.advantage).collect();
    if cfg.adv_norm && d > 1 {
        let mean = adv.iter().sum::<f64>() / d as f64;
        let std = (adv.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / d as f64).sqrt();
        adv.iter_mut().for_each(|a| *a = (*a - mean) / (std + 1e-8));
    }
    let inv = 1.0 / d as f64;
    let (lo, hi) = (1.0 - cfg.clip_ratio, 1.0 + cfg.clip_ratio);
    let (mut policy, mut value, mut ent) = (0.0, 0.0, 0.0);
    let mut dlogits = vec![T::zero(); d * NUM_MOVES];
    let mut dvalues = vec![T::zero(); d];
    for (k, s) in batch.decisions.iter().enumerate() {
        let l: Vec<f64> = (0..NUM_MOVES)
            .map(|a| logits[k * NUM_MOVES + a].to_f64().unwrap_or(f64::NAN))
            .collect();
        let p = softmax(&l);
        let logp = log_softmax(&l);
        let h = entropy(&p);
        let ratio = (logp[s.action] - s.logp_old).exp();
        let a = adv[k];
        let surr1 = ratio * a;
        let surr2 = ratio.clamp(lo, hi) * a;
        policy -= surr1.min(surr2) * inv;
        ent += h * inv;
        // d(min(surr1, surr2))/d logp
        let inside = ratio > lo && ratio < hi;
        let g = if surr1 <= surr2 || inside {
            a * ratio
        } else {
            0.0
        };
        let dlogp = -g * inv;
        for c in 0..NUM_MOVES {
            let onehot = if c == s.action { 1.0 } else { 0.0 };
            let dpol = dlogp * (onehot - p[c]);
            let dent = -p[c] * (logp[c] + h);
            dlogits[k * NUM_MOVES + c] = T::lit(dpol - cfg.entropy_weight * dent * inv);
        }

        let v = values[k].to_f64().unwrap_or(f64::NAN);
        let dv = v - s.value_old;
        let clipped = s.value_old + dv.clamp(-cfg.value_clip_ratio, cfg.value_clip_ratio);
        let l1 = (v - s.target).powi(2);
        let l2 = (clipped - s.target).powi(2);
        let grad = if l1 >= l2 {
            v - s.target
        } else if dv.abs() < cfg.value_clip_ratio {
            clipped - s.target
        } else {
            0.0
        };
        value += 0.5 * l1.max(l2) * inv;
        dvalues[k] = T::lit(cfg.value_weight * grad * inv);
    }
    let total = policy + cfg.value_weight * value - cfg.entropy_weight * ent;
    if !total.is_finite() {
        return Err(AceError::Divergence(format!(
            "non-finite policy loss (policy {policy}, value {value}, entropy {ent})"
        )));
    }
    if backward {
        model.backward(store, lcache.as_ref(), &dlogits)?;
        model.backward(store, vcache.as_ref(), &dvalues)?;
    }
    Ok(LossParts {
        policy,
        value,
        entropy: ent,
        total,
    })
}

/// Samples an index from logits; returns it with its log-probability.
pub fn sample_from_logits<R: Rng + ?Sized>(logits: &[f64], rng: &mut R) -> (ActionId, f64) {
    let p = softmax(logits);
    let logp = log_softmax(logits);
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (a, &pa) in p.iter().enumerate() {
        acc += pa;
        if u < acc {
            return (a, logp[a]);
        }
    }
    let last = p.iter().rposition(|&x| x > 0.0).unwrap_or(p.len() - 1);
    (last, logp[last])
}

/// An environment step with the behaviour log-probability of each decision.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyStep {
    pub transition: EnvTransition,
    pub logp: [f64; N],
}

fn sample_episodes<V: SeValueFn + ?Sized>(
    vf: &V,
    envs: &mut [SpidersFly],
    quotas: &[usize],
    mode: OrderMode,
) -> Result<Vec<Vec<PolicyStep>>> {
    let mut out: Vec<Vec<PolicyStep>> = vec![Vec::new(); envs.len()];
    let mut finished = vec![0usize; envs.len()];
    loop {
        let active: Vec<usize> = (0..envs.len())
            .filter(|&i| finished[i] < quotas[i])
            .collect();
        if active.is_empty() {
            break;
        }
        let states: Vec<EnvState> = active.iter().map(|&i| *envs[i].state()).collect();
        let orders: Vec<AgentOrder> = active.iter().map(|&i| mode.draw(envs[i].rng())).collect();
        let prepared = vf.prepare(&states)?;
        let mut prefixes: Vec<Vec<ActionId>> = vec![Vec::with_capacity(N); active.len()];
        let mut logps = vec![[0.0; N]; active.len()];
        for pos in 0..N {
            let logits = {
                let requests: Vec<RolloutRequest<'_>> = (0..active.len())
                    .map(|b| RolloutRequest {
                        state: b,
                        order: &orders[b],
                        prefix: &prefixes[b],
                    })
                    .collect();
                vf.rollout(&prepared, &requests)?
            };
            for (b, &i) in active.iter().enumerate() {
                let (a, lp) = sample_from_logits(&logits[b], envs[i].rng());
                prefixes[b].push(a);
                logps[b][pos] = lp;
            }
        }
        for (b, &i) in active.iter().enumerate() {
            let joint = JointAction(std::mem::take(&mut prefixes[b]));
            let o = envs[i].step(&joint.by_agent(&orders[b]))?;
            finished[i] += usize::from(o.done);
            out[i].push(PolicyStep {
                transition: Transition {
                    state: states[b],
                    joint_action: joint,
                    reward: o.reward,
                    next_state: o.state,
                    done: o.done,
                    order: orders[b].clone(),
                },
                logp: logps[b],
            });
        }
    }
    Ok(out)
}

/// A collection flattened into decisions, with the episode segments that
/// advantages are accumulated over.
#[derive(Debug, Clone)]
pub struct Rollout {
    pub states: Vec<EnvState>,
    pub decisions: Vec<DecisionSample>,
    /// `(start, end, bootstrap_state)` ranges of `decisions`; the bootstrap
    /// state is `None` when the segment ends an episode.
    pub segments: Vec<(usize, usize, Option<usize>)>,
    pub rewards: Vec<f64>,
}

impl Rollout {
    pub fn from_steps(per_env: &[Vec<PolicyStep>]) -> Self {
        let mut r = Rollout {
            states: Vec::new(),
            decisions: Vec::new(),
            segments: Vec::new(),
            rewards: Vec::new(),
        };
        for steps in per_env {
            let mut start = r.decisions.len();
            for (k, st) in steps.iter().enumerate() {
                let t = &st.transition;
                let si = r.states.len();
                r.states.push(t.state);
                for pos in 0..N {
                    r.decisions.push(DecisionSample {
                        state: si,
                        order: t.order.clone(),
                        prefix: t.joint_action.0[..pos].to_vec(),
                        action: t.joint_action.0[pos],
                        logp_old: st.logp[pos],
                        advantage: 0.0,
                        target: 0.0,
                        value_old: 0.0,
                    });
                    r.rewards.push(if pos + 1 == N { t.reward } else { 0.0 });
                }
                let last = k + 1 == steps.len();
                if t.done || last {
                    let boot = if t.done {
                        None
                    } else {
                        r.states.push(t.next_state);
                        Some(r.states.len() - 1)
                    };
                    r.segments.push((start, r.decisions.len(), boot));
                    start = r.decisions.len();
                }
            }
        }
        r
    }

    pub fn env_steps(&self) -> usize {
        self.decisions.len() / N
    }
}

/// Critic outputs for every decision and every bootstrap state.
fn critic_outputs<T: Real>(
    model: &AceModel,
    store: &ParamStore<T>,
    side: u32,
    rollout: &Rollout,
) -> Result<(Vec<f64>, Vec<Option<f64>>)> {
    let sb = state_batch::<T>(&rollout.states, side)?;
    let mut queries: Vec<Query> = rollout.decisions.iter().map(decision_query).collect();
    let boots: Vec<usize> = rollout.segments.iter().filter_map(|s| s.2).collect();
    queries.extend(boots.iter().map(|&s| Query {
        state: s,
        prefix: Vec::new(),
    }));
    let (v, _) = model.forward(store, &sb, queries, Head::Value, false)?;
    let v: Vec<f64> = v.iter().map(|x| x.to_f64().unwrap_or(f64::NAN)).collect();
    let d = rollout.decisions.len();
    let mut boot_iter = v[d..].iter();
    let seg_boot = rollout
        .segments
        .iter()
        .map(|s| s.2.map(|_| *boot_iter.next().expect("bootstrap value")))
        .collect();
    Ok((v[..d].to_vec(), seg_boot))
}

/// Fills advantages, targets and old critic outputs of every decision.
pub fn compute_advantages<T: Real>(
    model: &AceModel,
    store: &ParamStore<T>,
    side: u32,
    rollout: &mut Rollout,
    gamma: f64,
    lambda: f64,
    norm: Option<&mut RunningStats>,
) -> Result<()> {
    let (raw, boots) = critic_outputs(model, store, side, rollout)?;
    let (mean, std) = match &norm {
        Some(s) => (s.mean, s.std()),
        None => (0.0, 1.0),
    };
    let denorm = |x: f64| x * std + mean;
    let mut returns = vec![0.0; raw.len()];
    for (seg, boot) in rollout.segments.iter().zip(boots) {
        let (a, b, _) = *seg;
        let traj = SeTrajectory {
            values: raw[a..b].iter().map(|&x| denorm(x)).collect(),
            rewards: rollout.rewards[a..b].to_vec(),
            bootstrap: boot.map_or(0.0, denorm),
        };
        let (adv, ret) = gae_advantages(&traj, gamma, lambda)?;
        for (k, j) in (a..b).enumerate() {
            rollout.decisions[j].advantage = adv[k];
            returns[j] = ret[k];
        }
    }
    let (mean, std) = match norm {
        Some(s) => {
            s.update(&returns);
            (s.mean, s.std())
        }
        None => (0.0, 1.0),
    };
    for (j, d) in rollout.decisions.iter_mut().enumerate() {
        d.target = (returns[j] - mean) / std;
        d.value_old = raw[j];
    }
    Ok(())
}

/// Policy and critic networks with their optimizer and target statistics.
pub struct PpoLearner {
    pub model: AceModel,
    pub store: ParamStore<f32>,
    optimizer: Box<dyn Optimizer<f32> + Send>,
    pub stats: RunningStats,
    pub cfg: PpoConfig,
    pub side: u32,
    pub discount: f64,
}

impl PpoLearner {
    pub fn new(model_cfg: ModelConfig, run: &RunConfig, side: u32) -> Self {
        let mut rng = seeding::stream_rng(run.seed, seeding::INIT_STREAM);
        let cfg = ModelConfig {
            logit_head: true,
            ..model_cfg
        };
        let (model, store) =
            AceModel::build::<f32, _>(cfg, InteractionMap::none(NUM_MOVES), &mut rng);
        let optimizer = make_optimizer(
            run.train.optimizer,
            &store,
            run.ppo.lr,
            run.train.weight_decay,
        );
        Self {
            model,
            store,
            optimizer,
            stats: RunningStats::default(),
            cfg: run.ppo.clone(),
            side,
            discount: run.train.discount,
        }
    }

    pub fn policy_value(&self) -> NetValue<'_, f32> {
        NetValue {
            head: Head::Logit,
            ..NetValue::new(&self.model, &self.store, self.side)
        }
    }

    fn advantages(&mut self, rollout: &mut Rollout) -> Result<()> {
        let norm = self.cfg.value_norm.then_some(&mut self.stats);
        compute_advantages(
            &self.model,
            &self.store,
            self.side,
            rollout,
            self.discount,
            self.cfg.gae_lambda,
            norm,
        )
    }

    /// `update_per_collect` passes of shuffled minibatches; returns the
    /// mean loss components.
    pub fn update(&mut self, rollout: &mut Rollout, rng: &mut ChaCha8Rng) -> Result<LossParts> {
        let mut sums = LossParts {
            policy: 0.0,
            value: 0.0,
            entropy: 0.0,
            total: 0.0,
        };
        let mut steps = 0usize;
        for epoch in 0..self.cfg.update_per_collect {
            if epoch == 0 || self.cfg.recompute_adv {
                self.advantages(rollout)?;
            }
            let order = crate::learner::shuffled_indices(rollout.decisions.len(), rng);
            for chunk in order.chunks(self.cfg.batch_size) {
                let batch = minibatch(rollout, chunk);
                self.store.zero_grad();
                let l = ppo_loss(
                    &self.model,
                    &mut self.store,
                    &batch,
                    &self.cfg,
                    self.side,
                    true,
                )?;
                self.optimizer.step(&mut self.store)?;
                sums.policy += l.policy;
                sums.value += l.value;
                sums.entropy += l.entropy;
                sums.total += l.total;
                steps += 1;
            }
        }
        let k = steps.max(1) as f64;
        Ok(LossParts {
            policy: sums.policy / k,
            value: sums.value / k,
            entropy: sums.entropy / k,
            total: sums.total / k,
        })
    }
}

/// Decisions `idx` with their states re-indexed into a compact batch.
fn minibatch(rollout: &Rollout, idx: &[usize]) -> PpoBatch {
    let mut map = std::collections::HashMap::new();
    let mut states = Vec::new();
    let decisions = idx
        .iter()
        .map(|&j| {
            let mut d = rollout.decisions[j].clone();
            d.state = *map.entry(d.state).or_insert_with(|| {
                states.push(rollout.states[d.state]);
                states.len() - 1
            });
            d
        })
        .collect();
    PpoBatch { states, decisions }
}

/// Episode-based collection, update and periodic evaluation.
pub struct PpoTrainer {
    pub cfg: RunConfig,
    pub grid: GridConfig,
    pub learner: PpoLearner,
    envs: Vec<SpidersFly>,
    pub samples: u64,
    pub episodes: u64,
    minibatch_rng: ChaCha8Rng,
    eval_rng: ChaCha8Rng,
    threads: usize,
    oracle_mean: Option<f64>,
    started: Instant,
}

impl PpoTrainer {
    pub fn new(cfg: &RunConfig) -> Result<Self> {
        cfg.validate()?;
        let grid = cfg.grid();
        let model_cfg = cfg.model.model_config(cfg.train.ia_enabled);
        let envs = (0..cfg.train.collector_env_num)
            .map(|w| SpidersFly::new(grid, seeding::env_rng(cfg.seed, w)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            learner: PpoLearner::new(model_cfg, cfg, grid.side),
            envs,
            samples: 0,
            episodes: 0,
            minibatch_rng: seeding::stream_rng(cfg.seed, seeding::MINIBATCH_STREAM),
            eval_rng: seeding::stream_rng(cfg.seed, seeding::EVAL_STREAM),
            threads: cfg
                .threads
                .unwrap_or_else(|| worker_threads(cfg.train.collector_env_num)),
            oracle_mean: oracle_mean_steps(&grid)?,
            grid,
            cfg: cfg.clone(),
            started: Instant::now(),
        })
    }

    /// Plays `n_episode` complete episodes with the current policy.
    pub fn collect(&mut self) -> Result<Vec<Vec<PolicyStep>>> {
        let e = self.envs.len();
        let n = self.cfg.ppo.n_episode;
        let quotas: Vec<usize> = (0..e).map(|i| n / e + usize::from(i < n % e)).collect();
        let threads = self.threads.clamp(1, e);
        let chunk = e.div_ceil(threads);
        let mode = self.cfg.train.order_mode;
        let vf = self.learner.policy_value();
        let parts: Vec<Result<Vec<Vec<PolicyStep>>>> = if threads == 1 {
            vec![sample_episodes(&vf, &mut self.envs, &quotas, mode)]
        } else {
            let vf = &vf;
            std::thread::scope(|scope| {
                let handles: Vec<_> = self
                    .envs
                    .chunks_mut(chunk)
                    .zip(quotas.chunks(chunk))
                    .map(|(envs, q)| scope.spawn(move || sample_episodes(vf, envs, q, mode)))
                    .collect();
                handles
                    .into_iter()
                    .map(|h| h.join().expect("collector thread panicked"))
                    .collect()
            })
        };
        let mut out = Vec::with_capacity(e);
        for p in parts {
            out.extend(p?);
        }
        self.samples += out.iter().map(|s| s.len() as u64).sum::<u64>();
        self.episodes += quotas.iter().sum::<usize>() as u64;
        Ok(out)
    }

    pub fn iterate(&mut self) -> Result<LossParts> {
        let steps = self.collect()?;
        let mut rollout = Rollout::from_steps(&steps);
        self.learner.update(&mut rollout, &mut self.minibatch_rng)
    }

    fn record(&mut self, loss: Option<f64>) -> Result<MetricsRecord> {
        let vf = self.learner.policy_value();
        let policy = GreedyPolicy {
            vf: &vf,
            order_mode: self.cfg.train.order_mode,
        };
        let r = evaluate(
            &policy,
            &self.grid,
            &self.cfg.eval,
            self.oracle_mean,
            &mut self.eval_rng,
        )?;
        Ok(MetricsRecord {
            samples: self.samples,
            episodes: self.episodes,
            eps: 0.0,
            loss,
            success_rate_10: r.success_rate_10,
            mean_steps: r.mean_steps,
            steps_gap: r.steps_gap,
            wall_time_s: self.started.elapsed().as_secs_f64(),
        })
    }

    /// Same stopping and evaluation rules as the value-based trainer; the
    /// last collection may end past `budget` because episodes are not cut.
    pub fn run(
        &mut self,
        budget: u64,
        sink: &mut RecordSink<'_>,
        checkpoint_dir: Option<&Path>,
    ) -> Result<RunSummary> {
        self.started = Instant::now();
        let mut tracker = SolveTracker::default();
        let mut last = self.record(None)?;
        sink(&last)?;
        let streak = self.cfg.eval.solve_streak;
        let mut solved = tracker.observe(last.samples, last.success_rate_10, streak);
        let mut next_eval = self.cfg.eval.interval;
        let mut losses = Vec::new();
        while solved.is_none() && self.samples < budget {
            losses.push(self.iterate()?.total);
            if self.samples >= next_eval || self.samples >= budget {
                while next_eval <= self.samples {
                    next_eval += self.cfg.eval.interval;
                }
                let loss = Some(losses.iter().sum::<f64>() / losses.len() as f64);
                losses.clear();
                last = self.record(loss)?;
                sink(&last)?;
                if let Some(dir) = checkpoint_dir {
                    save_checkpoint(&self.learner.store, dir)?;
                }
                solved = tracker.observe(last.samples, last.success_rate_10, streak);
            }
        }
        if let Some(dir) = checkpoint_dir {
            save_checkpoint(&self.learner.store, dir)?;
        }
        Ok(RunSummary {
            samples: self.samples,
            episodes: self.episodes,
            samples_to_solve: solved,
            final_steps_gap: last.steps_gap,
            final_success_rate_10: last.success_rate_10,
            final_mean_steps: last.mean_steps,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::Pos;
    use crate::neural::finite_difference_check;
    use proptest::prelude::{prop_assert, proptest};
    use rand::SeedableRng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn softmax_against_direct_formula() {
        assert_eq!(softmax(&[2.0; 5]), vec![0.2; 5]);
        let l = [0.3, -1.2, 2.5, 0.0, 0.7];
        let z: f64 = l.iter().map(|x: &f64| x.exp()).sum();
        for (p, x) in softmax(&l).iter().zip(l) {
            assert!((p - x.exp() / z).abs() < 1e-15);
        }
        let shifted: Vec<f64> = l.iter().map(|x| x + 700.0).collect();
        for (a, b) in softmax(&l).iter().zip(softmax(&shifted)) {
            assert!((a - b).abs() < 1e-12);
        }
        for (lp, p) in log_softmax(&l).iter().zip(softmax(&l)) {
            assert!((lp - p.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn entropy_extremes() {
        assert!((entropy(&softmax(&[0.0; 5])) - 5f64.ln()).abs() < 1e-12);
        assert_eq!(entropy(&[1.0, 0.0, 0.0]), 0.0);
    }

    /// `A_j = Σ_{k≥j} (γλ)^{k−j} δ_k` as an explicit double loop.
    fn brute_gae(t: &SeTrajectory, g: f64, l: f64) -> Vec<f64> {
        let m = t.values.len();
        let next = |j: usize| {
            if j + 1 < m {
                t.values[j + 1]
            } else {
                t.bootstrap
            }
        };
        (0..m)
            .map(|j| {
                (j..m)
                    .map(|k| {
                        (g * l).powi((k - j) as i32) * (t.rewards[k] + g * next(k) - t.values[k])
                    })
                    .sum()
            })
            .collect()
    }

    fn trajectory() -> SeTrajectory {
        SeTrajectory {
            values: vec![0.5, 1.0, -0.3, 2.0, 0.1, 0.0],
            rewards: vec![0.0, 1.0, 0.0, 0.0, 0.0, 10.0],
            bootstrap: 0.7,
        }
    }

    #[test]
    fn gae_matches_double_sum() {
        let t = trajectory();
        for lambda in [0.0, 0.5, 0.95, 1.0] {
            let (adv, ret) = gae_advantages(&t, 0.99, lambda).unwrap();
            for (j, (a, b)) in adv.iter().zip(brute_gae(&t, 0.99, lambda)).enumerate() {
                assert!((a - b).abs() < 1e-10);
                assert!((ret[j] - a - t.values[j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gae_without_lambda_is_one_step_error() {
        let t = trajectory();
        let (adv, _) = gae_advantages(&t, 0.9, 0.0).unwrap();
        assert!((adv[5] - (10.0 + 0.9 * 0.7 - 0.0)).abs() < 1e-12);
        assert!((adv[1] - (1.0 + 0.9 * -0.3 - 1.0)).abs() < 1e-12);
    }

    #[test]
    fn gae_with_full_lambda_is_return_minus_value() {
        let t = trajectory();
        let (adv, _) = gae_advantages(&t, 0.9, 1.0).unwrap();
        let mut ret = t.bootstrap;
        for j in (0..6).rev() {
            ret = t.rewards[j] + 0.9 * ret;
            assert!((adv[j] - (ret - t.values[j])).abs() < 1e-10);
        }
    }

    #[test]
    fn single_decision_episode_advantage() {
        let t = SeTrajectory {
            values: vec![3.0],
            rewards: vec![10.0],
            bootstrap: 0.0,
        };
        assert_eq!(gae_advantages(&t, 0.99, 0.95).unwrap().0, vec![7.0]);
        let bad = SeTrajectory {
            values: vec![1.0, 2.0],
            rewards: vec![0.0],
            bootstrap: 0.0,
        };
        assert!(matches!(
            gae_advantages(&bad, 0.99, 0.95),
            Err(AceError::Malformed(_))
        ));
    }

    #[test]
    fn running_stats_match_pooled_moments() {
        let mut s = RunningStats {
            mean: 0.0,
            var: 0.0,
            count: 0.0,
        };
        let xs = [1.0, 4.0, -2.0, 3.5, 0.0, 7.0, 2.0];
        s.update(&xs[..3]);
        s.update(&xs[3..]);
        let mean = xs.iter().sum::<f64>() / 7.0;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 7.0;
        assert!((s.mean - mean).abs() < 1e-12);
        assert!((s.var - var).abs() < 1e-12);
        assert_eq!(s.count, 7.0);
    }

    fn model(seed: u64) -> (AceModel, ParamStore<f64>) {
        let cfg = ModelConfig {
            logit_head: true,
            ..ModelConfig::spiders_fly(8)
        };
        let (m, mut store) =
            AceModel::build::<f64, _>(cfg, InteractionMap::none(NUM_MOVES), &mut rng(seed));
        let mut r = rng(seed + 100);
        for p in store.params_mut() {
            if p.name == "active" || p.name.ends_with(".bias") {
                p.value.iter_mut().for_each(|v| *v = r.gen_range(-0.5..0.5));
            }
        }
        (m, store)
    }

    fn state(k: i32) -> EnvState {
        EnvState::new(
            [Pos::new(0, k % 5), Pos::new(2, 1)],
            Pos::new(4, (k + 2) % 5),
        )
    }

    fn decision(
        state: usize,
        order: AgentOrder,
        prefix: Vec<ActionId>,
        action: ActionId,
    ) -> DecisionSample {
        DecisionSample {
            state,
            order,
            prefix,
            action,
            logp_old: 0.0,
            advantage: 0.0,
            target: 0.0,
            value_old: 0.0,
        }
    }

    fn no_norm() -> PpoConfig {
        PpoConfig {
            adv_norm: false,
            ..PpoConfig::default()
        }
    }

    #[test]
    fn loss_on_hand_fixture() {
        // zero output layers: uniform policy and zero critic
        let (m, mut store) = model(1);
        for p in store.params_mut() {
            if p.name.starts_with("logit.out") || p.name.starts_with("value.out") {
                p.value.iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let sorted = AgentOrder::sorted(N);
        let mut d0 = decision(0, sorted.clone(), vec![], 2);
        d0.logp_old = 0.25f64.ln(); // ratio 0.8
        d0.advantage = 1.0;
        d0.value_old = 0.5;
        d0.target = 1.0;
        let mut d1 = decision(1, sorted, vec![3], 0);
        d1.logp_old = 0.16f64.ln(); // ratio 1.25
        d1.advantage = -2.0;
        d1.target = -0.4;
        let batch = PpoBatch {
            states: vec![state(0), state(1)],
            decisions: vec![d0, d1],
        };
        let cfg = no_norm();
        let l = ppo_loss(&m, &mut store, &batch, &cfg, 5, false).unwrap();
        // policy: -(min(0.8, 0.95) + min(-2.5, -2.1)) / 2
        assert!((l.policy - 0.85).abs() < 1e-12);
        // value: clipped 0.5 - 0.3 = 0.2; max((0-1)^2, (0.2-1)^2) = 1; second 0.16
        assert!((l.value - 0.29).abs() < 1e-12);
        assert!((l.entropy - 5f64.ln()).abs() < 1e-12);
        assert!((l.total - (0.85 + 0.29 - 0.01 * 5f64.ln())).abs() < 1e-12);
    }

    fn random_batch(
        seed: u64,
        m: &AceModel,
        store: &ParamStore<f64>,
        ratio_offsets: &[f64],
    ) -> PpoBatch {
        let mut r = rng(seed);
        let states: Vec<EnvState> = (0..3).map(|k| state(k as i32 + seed as i32)).collect();
        let decisions = ratio_offsets
            .iter()
            .enumerate()
            .map(|(k, &off)| {
                let order = OrderMode::Shuffle.draw(&mut r);
                let prefix: Vec<ActionId> = (0..k % N).map(|_| r.gen_range(0..NUM_MOVES)).collect();
                let s = k % 3;
                let p = policy_distribution(m, store, 5, &states[s], &order, &prefix).unwrap();
                let mut d = decision(s, order, prefix, r.gen_range(0..NUM_MOVES));
                d.logp_old = p[d.action].ln() - off;
                d.advantage = r.gen_range(-2.0..2.0);
                d.target = r.gen_range(-1.0..1.0);
                d.value_old = d.target + [0.1, -0.7, 0.9][k % 3];
                d
            })
            .collect();
        PpoBatch { states, decisions }
    }

    #[test]
    fn zero_advantage_has_no_policy_term() {
        let (m, mut store) = model(2);
        let mut batch = random_batch(3, &m, &store, &[0.2, -0.3, 0.0, 0.01]);
        batch.decisions.iter_mut().for_each(|d| d.advantage = 0.0);
        let l = ppo_loss(&m, &mut store, &batch, &no_norm(), 5, false).unwrap();
        assert_eq!(l.policy, 0.0);
    }

    #[test]
    fn unit_ratio_gives_unclipped_gradient() {
        let (m, store) = model(4);
        let batch = random_batch(5, &m, &store, &[0.0; 6]);
        let grads = |clip: f64| {
            let mut s = store.clone();
            s.zero_grad();
            let cfg = PpoConfig {
                clip_ratio: clip,
                entropy_weight: 0.0,
                value_weight: 0.0,
                ..no_norm()
            };
            ppo_loss(&m, &mut s, &batch, &cfg, 5, true).unwrap();
            s
        };
        let (a, b) = (grads(0.05), grads(0.9));
        for (pa, pb) in a.params().iter().zip(b.params()) {
            for (x, y) in pa.grad.iter().zip(&pb.grad) {
                assert!((x - y).abs() < 1e-12);
            }
        }
        assert!(a
            .params()
            .iter()
            .any(|p| p.grad.iter().any(|g| g.abs() > 1e-6)));
    }

    #[test]
    fn total_loss_gradient_matches_finite_differences() {
        // ratios well inside or well outside the clip range, so no kink is
        // within the finite-difference step
        let (m, mut store) = model(6);
        let batch = random_batch(7, &m, &store, &[0.0, 0.2, -0.2, 0.01, -0.015, 0.5]);
        for adv_norm in [false, true] {
            let cfg = PpoConfig {
                adv_norm,
                ..PpoConfig::default()
            };
            store.zero_grad();
            ppo_loss(&m, &mut store, &batch, &cfg, 5, true).unwrap();
            let report = finite_difference_check(&mut store, 1e-5, |s| {
                let mut s = s.clone();
                ppo_loss(&m, &mut s, &batch, &cfg, 5, false).unwrap().total
            });
            assert!(report.max_relative_error < 1e-4, "{report:?}");
        }
    }

    #[test]
    fn sampling_follows_softmax() {
        let logits = [0.0, 1.0, -1.0, 0.5, 2.0];
        let p = softmax(&logits);
        let mut r = rng(12);
        let mut counts = [0u32; 5];
        let n = 50_000;
        for _ in 0..n {
            let (a, lp) = sample_from_logits(&logits, &mut r);
            assert!((lp - p[a].ln()).abs() < 1e-12);
            counts[a] += 1;
        }
        let chi2: f64 = counts
            .iter()
            .zip(&p)
            .map(|(&c, &q)| (c as f64 - n as f64 * q).powi(2) / (n as f64 * q))
            .sum();
        assert!(chi2 < 18.47, "chi2 {chi2}");
    }

    fn tiny(seed: u64) -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.seed = seed;
        cfg.algo = crate::config::Algo::AcePpo;
        cfg.budget = 600;
        cfg.model.hidden = 16;
        cfg.train.collector_env_num = 4;
        cfg.ppo.n_episode = 4;
        cfg.ppo.batch_size = 64;
        cfg.ppo.update_per_collect = 2;
        cfg.eval.interval = 300;
        cfg.eval.episodes = 8;
        cfg.eval.lanes = 8;
        cfg
    }

    #[test]
    fn rollout_segments_cover_every_decision() {
        let mut t = PpoTrainer::new(&tiny(3)).unwrap();
        let steps = t.collect().unwrap();
        let r = Rollout::from_steps(&steps);
        assert_eq!(r.env_steps() as u64, t.samples);
        assert_eq!(r.decisions.len(), r.rewards.len());
        let mut covered = 0;
        for &(a, b, boot) in &r.segments {
            assert_eq!(a, covered);
            assert!(b > a && (b - a) % N == 0);
            // whole episodes only
            assert!(boot.is_none());
            covered = b;
        }
        assert_eq!(covered, r.decisions.len());
        assert_eq!(r.segments.len(), 4);
    }

    #[test]
    fn ppo_runs_are_thread_independent() {
        let run = |threads: usize| {
            let mut cfg = tiny(9);
            cfg.threads = Some(threads);
            let mut t = PpoTrainer::new(&cfg).unwrap();
            let mut recs = Vec::new();
            let mut sink = |r: &MetricsRecord| {
                recs.push((r.samples, r.loss, r.success_rate_10));
                Ok(())
            };
            let s = t.run(cfg.budget, &mut sink, None).unwrap();
            (recs, s, t.learner.store)
        };
        let (ra, sa, pa) = run(1);
        let (rb, sb, pb) = run(3);
        assert_eq!(ra, rb);
        assert_eq!(sa, sb);
        assert_eq!(pa, pb);
        assert!(sa.samples >= 600);
    }

    proptest! {
        #[test]
        fn entropy_is_bounded(logits in proptest::array::uniform5(-10.0f64..10.0)) {
            let h = entropy(&softmax(&logits));
            prop_assert!(h >= -1e-12 && h <= 5f64.ln() + 1e-12);
            let p = softmax(&logits);
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
