//! Value-based training over sequentially expanded states: epsilon-greedy
//! sequential selection, replay of whole environment transitions, rollout
//! targets from a soft-updated target network, and greedy evaluation.

use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::env::{features, EnvState, GridConfig, SpidersFly, NUM_MOVES, NUM_SPIDERS};
use crate::error::{AceError, Result};
use crate::eval::{run_episodes, BatchPolicy};
use crate::mmdp::{ActionId, AgentOrder, JointAction, Transition};
use crate::model::{AceModel, Encoded, Head, InteractionMap, ModelConfig, Query, StateBatch};
use crate::neural::{save_checkpoint, soft_update, Adam, Optimizer, ParamStore, Real, RmsProp};
use crate::oracle::{argmax_lowest, Oracle, SeSolution};
use crate::seeding;

pub type EnvTransition = Transition<EnvState>;

const N: usize = NUM_SPIDERS;

/// Discount and tolerance used to build the reference policy for the steps gap.
pub const ORACLE_DISCOUNT: f64 = 0.99;
pub const ORACLE_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EpsilonSchedule {
    pub start: f64,
    pub end: f64,
    pub decay_steps: u64,
}

impl Default for EpsilonSchedule {
    fn default() -> Self {
        Self {
            start: 1.0,
            end: 0.05,
            decay_steps: 150_000,
        }
    }
}

impl EpsilonSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.start >= self.end && self.end >= 0.0 && self.start <= 1.0) {
            return Err(AceError::Config(format!(
                "eps: need 1 >= start >= end >= 0, got start {} end {}",
                self.start, self.end
            )));
        }
        if self.decay_steps == 0 {
            return Err(AceError::Config("eps.decay_steps must be positive".into()));
        }
        Ok(())
    }

    /// Linear interpolation on the environment-sample counter.
    pub fn value(&self, samples: u64) -> f64 {
        if samples >= self.decay_steps {
            return self.end;
        }
        let frac = samples as f64 / self.decay_steps as f64;
        self.start + (self.end - self.start) * frac
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OrderMode {
    #[default]
    Sorted,
    Shuffle,
}

impl OrderMode {
    pub fn draw<R: Rng + ?Sized>(self, rng: &mut R) -> AgentOrder {
        match self {
            OrderMode::Sorted => AgentOrder::sorted(N),
            OrderMode::Shuffle => AgentOrder::shuffled(N, rng),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    #[default]
    Adam,
    Rmsprop,
}

pub fn make_optimizer<T: Real>(
    kind: OptimizerKind,
    store: &ParamStore<T>,
    lr: f64,
    weight_decay: f64,
) -> Box<dyn Optimizer<T> + Send> {
    match kind {
        OptimizerKind::Adam => Box::new(Adam::new(store, lr, weight_decay)),
        OptimizerKind::Rmsprop => Box::new(RmsProp::new(store, lr, weight_decay)),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub collector_env_num: usize,
    pub sample_per_collect: usize,
    pub update_per_collect: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub target_update_theta: f64,
    pub discount: f64,
    pub optimizer: OptimizerKind,
    pub weight_decay: f64,
    pub order_mode: OrderMode,
    pub ia_enabled: bool,
    pub replay_capacity: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            collector_env_num: 8,
            sample_per_collect: 1024,
            update_per_collect: 10,
            batch_size: 256,
            lr: 0.0005,
            target_update_theta: 0.02,
            discount: 0.99,
            optimizer: OptimizerKind::Adam,
            weight_decay: 0.0,
            order_mode: OrderMode::Sorted,
            ia_enabled: true,
            replay_capacity: 1_000_000,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("collector_env_num", self.collector_env_num),
            ("sample_per_collect", self.sample_per_collect),
            ("update_per_collect", self.update_per_collect),
            ("batch_size", self.batch_size),
            ("replay_capacity", self.replay_capacity),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(AceError::Config(format!("train.{name} must be positive")));
            }
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(AceError::Config(format!(
                "train.lr must be positive, got {}",
                self.lr
            )));
        }
        if !(self.target_update_theta > 0.0 && self.target_update_theta <= 1.0) {
            return Err(AceError::Config(format!(
                "train.target_update_theta must be in (0, 1], got {}",
                self.target_update_theta
            )));
        }
        if !(self.discount > 0.0 && self.discount < 1.0) {
            return Err(AceError::Config(format!(
                "train.discount must be in (0, 1), got {}",
                self.discount
            )));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(AceError::Config(
                "train.weight_decay must be non-negative".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Environment samples between evaluations.
    pub interval: u64,
    pub episodes: usize,
    /// Consecutive perfect evaluations that end training.
    pub solve_streak: usize,
    /// Episodes played in lockstep.
    pub lanes: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            interval: 10_240,
            episodes: 1000,
            solve_streak: 3,
            lanes: 250,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.interval == 0 || self.episodes == 0 || self.solve_streak == 0 || self.lanes == 0 {
            return Err(AceError::Config(
                "eval.interval, eval.episodes, eval.solve_streak and eval.lanes must be positive"
                    .into(),
            ));
        }
        Ok(())
    }
}

/// Fixed-capacity ring of transitions with uniform sampling.
#[derive(Debug, Clone)]
pub struct ReplayBuffer<T> {
    capacity: usize,
    items: Vec<T>,
    head: usize,
    rng: ChaCha8Rng,
}

impl<T> ReplayBuffer<T> {
    pub fn new(capacity: usize, rng: ChaCha8Rng) -> Self {
        assert!(capacity > 0, "replay capacity must be positive");
        Self {
            capacity,
            items: Vec::new(),
            head: 0,
            rng,
        }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Appends, overwriting the oldest item once full.
    pub fn push(&mut self, item: T) {
        if self.items.len() < self.capacity {
            self.items.push(item);
        } else {
            self.items[self.head] = item;
        }
        self.head = (self.head + 1) % self.capacity;
    }

    pub fn extend<I: IntoIterator<Item = T>>(&mut self, items: I) {
        for it in items {
            self.push(it);
        }
    }

    /// `k` items drawn uniformly with replacement.
    pub fn sample(&mut self, k: usize) -> Vec<&T> {
        if self.items.is_empty() {
            return Vec::new();
        }
        let n = self.items.len();
        let idx: Vec<usize> = (0..k).map(|_| self.rng.gen_range(0..n)).collect();
        idx.into_iter().map(|i| &self.items[i]).collect()
    }

    pub fn sample_indices(&mut self, k: usize) -> Vec<usize> {
        let n = self.items.len();
        if n == 0 {
            return Vec::new();
        }
        (0..k).map(|_| self.rng.gen_range(0..n)).collect()
    }

    pub fn get(&self, i: usize) -> Option<&T> {
        self.items.get(i)
    }
}

/// One SE-state whose one-action extensions should be scored.
#[derive(Debug, Clone, Copy)]
pub struct RolloutRequest<'a> {
    /// Index into the prepared state batch.
    pub state: usize,
    pub order: &'a AgentOrder,
    /// Actions already committed, in order positions.
    pub prefix: &'a [ActionId],
}

/// A value function over SE-states, evaluated by rollout.
pub trait SeValueFn {
    type Prepared;

    /// Per-state work shared by every SE-state of the same environment state.
    fn prepare(&self, states: &[EnvState]) -> Result<Self::Prepared>;

    /// Values of `prefix ++ [a]` for every action `a`, one row per request.
    fn rollout(
        &self,
        prepared: &Self::Prepared,
        requests: &[RolloutRequest<'_>],
    ) -> Result<Vec<[f64; NUM_MOVES]>>;
}

/// `(executor unit, action)` pairs for a prefix. Spider `i` is unit `i`.
pub fn prefix_pairs(order: &AgentOrder, prefix: &[ActionId]) -> Vec<(usize, ActionId)> {
    prefix
        .iter()
        .enumerate()
        .map(|(pos, &a)| (order.agent_at(pos), a))
        .collect()
}

/// The network's value head as an [`SeValueFn`].
#[derive(Debug, Clone, Copy)]
pub struct NetValue<'a, T> {
    pub model: &'a AceModel,
    pub store: &'a ParamStore<T>,
    pub side: u32,
    pub head: Head,
}

impl<'a, T> NetValue<'a, T> {
    pub fn new(model: &'a AceModel, store: &'a ParamStore<T>, side: u32) -> Self {
        Self {
            model,
            store,
            side,
            head: Head::Value,
        }
    }
}

pub fn state_batch<T: Real>(states: &[EnvState], side: u32) -> Result<StateBatch<T>> {
    let feats: Vec<_> = states.iter().map(|s| features(s, side)).collect();
    StateBatch::from_features(&feats)
}

impl<T: Real> SeValueFn for NetValue<'_, T> {
    type Prepared = Option<Encoded<T>>;

    fn prepare(&self, states: &[EnvState]) -> Result<Self::Prepared> {
        if states.is_empty() {
            return Ok(None);
        }
        Ok(Some(self.model.encode(
            self.store,
            &state_batch(states, self.side)?,
            false,
        )?))
    }

    fn rollout(
        &self,
        prepared: &Self::Prepared,
        requests: &[RolloutRequest<'_>],
    ) -> Result<Vec<[f64; NUM_MOVES]>> {
        if requests.is_empty() {
            return Ok(Vec::new());
        }
        let enc = prepared
            .as_ref()
            .ok_or_else(|| AceError::Malformed("rollout on an empty state batch".into()))?;
        let mut queries = Vec::with_capacity(requests.len() * NUM_MOVES);
        for r in requests {
            let exec = r.order.agent_at(r.prefix.len());
            let base = prefix_pairs(r.order, r.prefix);
            for a in 0..NUM_MOVES {
                let mut prefix = Vec::with_capacity(base.len() + 1);
                prefix.extend_from_slice(&base);
                prefix.push((exec, a));
                queries.push(Query {
                    state: r.state,
                    prefix,
                });
            }
        }
        let composed = self.model.compose(self.store, enc, &queries)?;
        let (v, _) = self
            .model
            .head_forward(self.store, self.head, composed.view(), false)?;
        Ok(v.as_slice()
            .expect("contiguous values")
            .chunks_exact(NUM_MOVES)
            .map(|c| std::array::from_fn(|a| c[a].to_f64().unwrap_or(f64::NAN)))
            .collect())
    }
}

/// An exact SE value table as an [`SeValueFn`]; supports the sorted order only.
#[derive(Debug, Clone, Copy)]
pub struct TableValue<'a> {
    pub solution: &'a SeSolution,
    pub side: u32,
}

impl SeValueFn for TableValue<'_> {
    type Prepared = Vec<usize>;

    fn prepare(&self, states: &[EnvState]) -> Result<Vec<usize>> {
        Ok(states.iter().map(|s| s.index(self.side)).collect())
    }

    fn rollout(
        &self,
        prepared: &Vec<usize>,
        requests: &[RolloutRequest<'_>],
    ) -> Result<Vec<[f64; NUM_MOVES]>> {
        requests
            .iter()
            .map(|r| {
                if r.order != &AgentOrder::sorted(N) {
                    return Err(AceError::Malformed(
                        "the SE table is indexed in sorted agent order".into(),
                    ));
                }
                let s = prepared[r.state];
                Ok(std::array::from_fn(|a| {
                    let mut p = r.prefix.to_vec();
                    p.push(a);
                    self.solution.value(s, &p)
                }))
            })
            .collect()
    }
}

/// Pre-drawn exploration for each decision: `Some(a)` replaces the greedy
/// choice at that position.
pub type Exploration = [Option<ActionId>; N];

/// Independent epsilon draws for each of the `n` decisions.
pub fn draw_exploration<R: Rng + ?Sized>(eps: f64, rng: &mut R) -> Exploration {
    if eps <= 0.0 {
        return [None; N];
    }
    std::array::from_fn(|_| {
        if rng.gen::<f64>() < eps {
            Some(rng.gen_range(0..NUM_MOVES))
        } else {
            None
        }
    })
}

/// Sequential selection for a batch of states: each position either takes its
/// pre-drawn exploratory action or the rollout argmax given the committed
/// prefix (ties to the lowest id). Returns actions in order positions.
pub fn select_with_exploration<V: SeValueFn + ?Sized>(
    vf: &V,
    states: &[EnvState],
    orders: &[AgentOrder],
    explore: &[Exploration],
) -> Result<Vec<JointAction>> {
    let prepared = vf.prepare(states)?;
    let mut prefixes: Vec<Vec<ActionId>> = vec![Vec::with_capacity(N); states.len()];
    for pos in 0..N {
        let pending: Vec<usize> = (0..states.len())
            .filter(|&b| explore[b][pos].is_none())
            .collect();
        let values = {
            let requests: Vec<RolloutRequest<'_>> = pending
                .iter()
                .map(|&b| RolloutRequest {
                    state: b,
                    order: &orders[b],
                    prefix: &prefixes[b],
                })
                .collect();
            vf.rollout(&prepared, &requests)?
        };
        for (b, v) in pending.iter().zip(&values) {
            prefixes[*b].push(argmax_lowest(v));
        }
        for (b, e) in explore.iter().enumerate() {
            if let Some(a) = e[pos] {
                prefixes[b].push(a);
            }
        }
    }
    Ok(prefixes.into_iter().map(JointAction).collect())
}

/// Epsilon-greedy sequential selection for one state.
pub fn select_joint_action<V: SeValueFn + ?Sized, R: Rng + ?Sized>(
    vf: &V,
    state: &EnvState,
    order: &AgentOrder,
    eps: f64,
    rng: &mut R,
) -> Result<JointAction> {
    let explore = draw_exploration(eps, rng);
    Ok(select_with_exploration(
        vf,
        std::slice::from_ref(state),
        std::slice::from_ref(order),
        &[explore],
    )?
    .remove(0))
}

/// Rollout targets for every intermediate state of each transition: for
/// position `i < n` the discounted maximum over the next agent's candidates
/// given the stored prefix, and for `i = n` the reward plus the discounted
/// maximum over the next state's first decision (just the reward when done).
/// The next state is rolled out in the transition's own agent order.
pub fn bellman_targets<V: SeValueFn + ?Sized>(
    vf: &V,
    batch: &[&EnvTransition],
    discount: f64,
) -> Result<Vec<[f64; N]>> {
    if batch.is_empty() {
        return Err(AceError::Malformed("empty training batch".into()));
    }
    let b = batch.len();
    let states: Vec<EnvState> = batch
        .iter()
        .map(|t| t.state)
        .chain(batch.iter().map(|t| t.next_state))
        .collect();
    let prepared = vf.prepare(&states)?;
    let mut requests = Vec::with_capacity(b * N);
    for (k, t) in batch.iter().enumerate() {
        for i in 1..N {
            requests.push(RolloutRequest {
                state: k,
                order: &t.order,
                prefix: &t.joint_action.0[..i],
            });
        }
    }
    let boot: Vec<usize> = (0..b).filter(|&k| !batch[k].done).collect();
    for &k in &boot {
        requests.push(RolloutRequest {
            state: b + k,
            order: &batch[k].order,
            prefix: &[],
        });
    }
    let values = vf.rollout(&prepared, &requests)?;
    let max = |v: &[f64; NUM_MOVES]| v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut targets: Vec<[f64; N]> = batch
        .iter()
        .enumerate()
        .map(|(k, t)| {
            let mut row = [0.0; N];
            for i in 1..N {
                row[i - 1] = discount * max(&values[k * (N - 1) + i - 1]);
            }
            row[N - 1] = t.reward;
            row
        })
        .collect();
    let offset = b * (N - 1);
    for (j, &k) in boot.iter().enumerate() {
        targets[k][N - 1] += discount * max(&values[offset + j]);
    }
    Ok(targets)
}

/// Mean squared TD error over the `n · batch` intermediate states; with
/// `backward` the gradient is accumulated into `store`.
pub fn td_loss<T: Real>(
    model: &AceModel,
    store: &mut ParamStore<T>,
    batch: &[&EnvTransition],
    targets: &[[f64; N]],
    side: u32,
    backward: bool,
) -> Result<f64> {
    let states: Vec<EnvState> = batch.iter().map(|t| t.state).collect();
    let sb = state_batch::<T>(&states, side)?;
    let queries: Vec<Query> = batch
        .iter()
        .enumerate()
        .flat_map(|(k, t)| {
            (1..=N).map(move |i| Query {
                state: k,
                prefix: prefix_pairs(&t.order, &t.joint_action.0[..i]),
            })
        })
        .collect();
    let (values, cache) = model.forward(store, &sb, queries, Head::Value, backward)?;
    let count = (batch.len() * N) as f64;
    let flat: Vec<f64> = targets.iter().flatten().copied().collect();
    let diffs: Vec<f64> = values
        .iter()
        .zip(&flat)
        .map(|(v, y)| v.to_f64().unwrap_or(f64::NAN) - y)
        .collect();
    let loss = diffs.iter().map(|d| d * d).sum::<f64>() / count;
    if !loss.is_finite() {
        let worst_pred = values
            .iter()
            .map(|v| v.to_f64().unwrap_or(f64::NAN).abs())
            .fold(0.0, f64::max);
        let worst_target = flat.iter().map(|y| y.abs()).fold(0.0, f64::max);
        return Err(AceError::Divergence(format!(
            "non-finite TD loss (max |prediction| {worst_pred}, max |target| {worst_target})"
        )));
    }
    if backward {
        let grads: Vec<T> = diffs.iter().map(|d| T::lit(2.0 * d / count)).collect();
        model.backward(store, cache.as_ref(), &grads)?;
    }
    Ok(loss)
}

/// Online and target networks with their optimizer.
pub struct AceLearner {
    pub model: AceModel,
    pub online: ParamStore<f32>,
    pub target: ParamStore<f32>,
    optimizer: Box<dyn Optimizer<f32> + Send>,
    pub side: u32,
    pub discount: f64,
    pub theta: f64,
}

impl AceLearner {
    pub fn new(model_cfg: ModelConfig, train: &TrainConfig, side: u32, seed: u64) -> Self {
        let mut rng = seeding::stream_rng(seed, seeding::INIT_STREAM);
        let (model, online) =
            AceModel::build::<f32, _>(model_cfg, InteractionMap::none(NUM_MOVES), &mut rng);
        let target = online.clone();
        let optimizer = make_optimizer(train.optimizer, &online, train.lr, train.weight_decay);
        Self {
            model,
            online,
            target,
            optimizer,
            side,
            discount: train.discount,
            theta: train.target_update_theta,
        }
    }

    pub fn online_value(&self) -> NetValue<'_, f32> {
        NetValue::new(&self.model, &self.online, self.side)
    }

    pub fn target_value(&self) -> NetValue<'_, f32> {
        NetValue::new(&self.model, &self.target, self.side)
    }

    /// Targets from the target network, one optimizer step on the online
    /// network, then one soft target update.
    pub fn train_step(&mut self, batch: &[&EnvTransition]) -> Result<f64> {
        let targets = bellman_targets(&self.target_value(), batch, self.discount)?;
        self.online.zero_grad();
        let loss = td_loss(
            &self.model,
            &mut self.online,
            batch,
            &targets,
            self.side,
            true,
        )?;
        self.optimizer.step(&mut self.online)?;
        soft_update(&mut self.target, &self.online, self.theta)?;
        Ok(loss)
    }
}

/// Worker threads for collection: `ACE_THREADS` if set, else the available
/// parallelism, never more than the number of environments.
pub fn worker_threads(envs: usize) -> usize {
    let cap = std::env::var("ACE_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&v| v > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    cap.min(envs).max(1)
}

/// A pool of independently seeded environments whose episodes persist
/// across collection calls.
#[derive(Debug, Clone)]
pub struct Collector {
    envs: Vec<SpidersFly>,
    order_mode: OrderMode,
    pub samples: u64,
    pub episodes: u64,
}

impl Collector {
    pub fn new(grid: GridConfig, seed: u64, envs: usize, order_mode: OrderMode) -> Result<Self> {
        let envs = (0..envs)
            .map(|w| SpidersFly::new(grid, seeding::env_rng(seed, w)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            envs,
            order_mode,
            samples: 0,
            episodes: 0,
        })
    }

    pub fn len(&self) -> usize {
        self.envs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.envs.is_empty()
    }

    pub fn states(&self) -> Vec<EnvState> {
        self.envs.iter().map(|e| *e.state()).collect()
    }

    /// Exactly `count` transitions, split evenly over the environments
    /// (remainder to the first ones) and returned environment by environment.
    /// Every random draw of an environment comes from its own stream, so the
    /// result does not depend on `threads`.
    pub fn collect<V: SeValueFn + Sync + ?Sized>(
        &mut self,
        vf: &V,
        eps: f64,
        count: usize,
        threads: usize,
    ) -> Result<Vec<EnvTransition>> {
        let e = self.envs.len();
        let quotas: Vec<usize> = (0..e)
            .map(|i| count / e + usize::from(i < count % e))
            .collect();
        let threads = threads.clamp(1, e.max(1));
        let chunk = e.div_ceil(threads).max(1);
        let mode = self.order_mode;
        let parts: Vec<Result<(Vec<Vec<EnvTransition>>, u64)>> = if threads == 1 {
            vec![run_lanes(vf, &mut self.envs, &quotas, eps, mode)]
        } else {
            std::thread::scope(|scope| {
                let handles: Vec<_> = self
                    .envs
                    .chunks_mut(chunk)
                    .zip(quotas.chunks(chunk))
                    .map(|(envs, q)| scope.spawn(move || run_lanes(vf, envs, q, eps, mode)))
                    .collect();
                handles
                    .into_iter()
                    .map(|h| h.join().expect("collector thread panicked"))
                    .collect()
            })
        };
        let mut out = Vec::with_capacity(count);
        for part in parts {
            let (per_env, episodes) = part?;
            self.episodes += episodes;
            out.extend(per_env.into_iter().flatten());
        }
        self.samples += out.len() as u64;
        Ok(out)
    }
}

fn run_lanes<V: SeValueFn + ?Sized>(
    vf: &V,
    envs: &mut [SpidersFly],
    quotas: &[usize],
    eps: f64,
    mode: OrderMode,
) -> Result<(Vec<Vec<EnvTransition>>, u64)> {
    let mut out: Vec<Vec<EnvTransition>> = quotas.iter().map(|&q| Vec::with_capacity(q)).collect();
    let mut episodes = 0;
    loop {
        let active: Vec<usize> = (0..envs.len())
            .filter(|&i| out[i].len() < quotas[i])
            .collect();
        if active.is_empty() {
            break;
        }
        let states: Vec<EnvState> = active.iter().map(|&i| *envs[i].state()).collect();
        let mut orders = Vec::with_capacity(active.len());
        let mut explore = Vec::with_capacity(active.len());
        for &i in &active {
            let rng = envs[i].rng();
            orders.push(mode.draw(rng));
            explore.push(draw_exploration(eps, rng));
        }
        let joint = select_with_exploration(vf, &states, &orders, &explore)?;
        for (((&i, state), order), ja) in active.iter().zip(states).zip(orders).zip(joint) {
            let by_agent = ja.by_agent(&order);
            let o = envs[i].step(&by_agent)?;
            episodes += u64::from(o.done);
            out[i].push(Transition {
                state,
                joint_action: ja,
                reward: o.reward,
                next_state: o.state,
                done: o.done,
                order,
            });
        }
    }
    Ok((out, episodes))
}

/// Greedy sequential policy; in shuffle mode each step's order is drawn from
/// the evaluation stream.
#[derive(Debug, Clone, Copy)]
pub struct GreedyPolicy<'a, V: ?Sized> {
    pub vf: &'a V,
    pub order_mode: OrderMode,
}

impl<V: SeValueFn + ?Sized> BatchPolicy for GreedyPolicy<'_, V> {
    fn act_batch(&self, states: &[EnvState], rng: &mut ChaCha8Rng) -> Result<Vec<[ActionId; N]>> {
        let orders: Vec<AgentOrder> = states.iter().map(|_| self.order_mode.draw(rng)).collect();
        let explore = vec![[None; N]; states.len()];
        let joint = select_with_exploration(self.vf, states, &orders, &explore)?;
        Ok(joint
            .iter()
            .zip(&orders)
            .map(|(j, o)| {
                let a = j.by_agent(o);
                std::array::from_fn(|i| a[i])
            })
            .collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub success_rate_10: f64,
    pub mean_steps: f64,
    /// `mean_steps` minus the oracle's exact mean; absent when the grid is
    /// too large for the oracle.
    pub steps_gap: Option<f64>,
}

pub fn evaluate<P: BatchPolicy + ?Sized>(
    policy: &P,
    grid: &GridConfig,
    eval: &EvalConfig,
    oracle_mean_steps: Option<f64>,
    rng: &mut ChaCha8Rng,
) -> Result<EvalReport> {
    let stats = run_episodes(grid, policy, eval.episodes, eval.lanes, rng)?;
    Ok(EvalReport {
        success_rate_10: stats.success_rate_10,
        mean_steps: stats.mean_steps,
        steps_gap: oracle_mean_steps.map(|m| stats.mean_steps - m),
    })
}

/// Exact mean catch time of the oracle policy, if the grid is small enough.
pub fn oracle_mean_steps(grid: &GridConfig) -> Result<Option<f64>> {
    match Oracle::solve(grid, ORACLE_DISCOUNT, ORACLE_TOL) {
        Ok(o) => Ok(Some(o.catch_time.mean_steps)),
        Err(AceError::StateSpaceTooLarge { .. }) => Ok(None),
        Err(e) => Err(e),
    }
}

/// One line of the metrics stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub samples: u64,
    pub episodes: u64,
    pub eps: f64,
    pub loss: Option<f64>,
    pub success_rate_10: f64,
    pub mean_steps: f64,
    pub steps_gap: Option<f64>,
    pub wall_time_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub samples: u64,
    pub episodes: u64,
    /// Samples at the first of the consecutive perfect evaluations that
    /// ended training.
    pub samples_to_solve: Option<u64>,
    pub final_steps_gap: Option<f64>,
    pub final_success_rate_10: f64,
    pub final_mean_steps: f64,
}

/// Tracks consecutive perfect evaluations.
#[derive(Debug, Clone, Default)]
pub struct SolveTracker {
    streak: usize,
    first: Option<u64>,
}

impl SolveTracker {
    /// Returns the samples-to-solve once the streak reaches `needed`.
    pub fn observe(&mut self, samples: u64, success_rate_10: f64, needed: usize) -> Option<u64> {
        if success_rate_10 >= 1.0 {
            if self.streak == 0 {
                self.first = Some(samples);
            }
            self.streak += 1;
        } else {
            self.streak = 0;
            self.first = None;
        }
        (self.streak >= needed).then_some(self.first).flatten()
    }
}

pub type RecordSink<'a> = dyn FnMut(&MetricsRecord) -> Result<()> + 'a;

/// The collect / update / evaluate loop.
pub struct AceTrainer {
    pub cfg: RunConfig,
    pub grid: GridConfig,
    pub learner: AceLearner,
    pub collector: Collector,
    pub replay: ReplayBuffer<EnvTransition>,
    eval_rng: ChaCha8Rng,
    threads: usize,
    oracle_mean: Option<f64>,
    started: Instant,
}

impl AceTrainer {
    pub fn new(cfg: &RunConfig) -> Result<Self> {
        cfg.validate()?;
        let grid = cfg.grid();
        let train = &cfg.train;
        let model_cfg = cfg.model.model_config(train.ia_enabled);
        Ok(Self {
            learner: AceLearner::new(model_cfg, train, grid.side, cfg.seed),
            collector: Collector::new(grid, cfg.seed, train.collector_env_num, train.order_mode)?,
            replay: ReplayBuffer::new(
                train.replay_capacity,
                seeding::stream_rng(cfg.seed, seeding::REPLAY_STREAM),
            ),
            eval_rng: seeding::stream_rng(cfg.seed, seeding::EVAL_STREAM),
            threads: cfg
                .threads
                .unwrap_or_else(|| worker_threads(train.collector_env_num)),
            oracle_mean: oracle_mean_steps(&grid)?,
            grid,
            cfg: cfg.clone(),
            started: Instant::now(),
        })
    }

    pub fn evaluate(&mut self) -> Result<EvalReport> {
        let vf = self.learner.online_value();
        let policy = GreedyPolicy {
            vf: &vf,
            order_mode: self.cfg.train.order_mode,
        };
        evaluate(
            &policy,
            &self.grid,
            &self.cfg.eval,
            self.oracle_mean,
            &mut self.eval_rng,
        )
    }

    /// One collection phase followed by `update_per_collect` train steps
    /// (once the buffer holds a full batch). Returns the mean loss.
    pub fn iterate(&mut self, count: usize) -> Result<Option<f64>> {
        let eps = self.cfg.eps.value(self.collector.samples);
        let vf = NetValue::new(&self.learner.model, &self.learner.online, self.grid.side);
        let fresh = self.collector.collect(&vf, eps, count, self.threads)?;
        self.replay.extend(fresh);
        let train = &self.cfg.train;
        if self.replay.len() < train.batch_size {
            return Ok(None);
        }
        let mut total = 0.0;
        for _ in 0..train.update_per_collect {
            let idx = self.replay.sample_indices(train.batch_size);
            let batch: Vec<&EnvTransition> = idx
                .iter()
                .map(|&i| self.replay.get(i).expect("sampled index"))
                .collect();
            total += self.learner.train_step(&batch)?;
        }
        Ok(Some(total / train.update_per_collect as f64))
    }

    fn record(&mut self, loss: Option<f64>) -> Result<MetricsRecord> {
        let r = self.evaluate()?;
        Ok(MetricsRecord {
            samples: self.collector.samples,
            episodes: self.collector.episodes,
            eps: self.cfg.eps.value(self.collector.samples),
            loss,
            success_rate_10: r.success_rate_10,
            mean_steps: r.mean_steps,
            steps_gap: r.steps_gap,
            wall_time_s: self.started.elapsed().as_secs_f64(),
        })
    }

    /// Trains until `budget` samples or a sustained perfect evaluation,
    /// evaluating at sample 0 and every `eval.interval` samples.
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
        let mut solved = tracker.observe(
            last.samples,
            last.success_rate_10,
            self.cfg.eval.solve_streak,
        );
        let mut next_eval = self.cfg.eval.interval;
        let mut losses = Vec::new();
        while solved.is_none() && self.collector.samples < budget {
            let count =
                (budget - self.collector.samples).min(self.cfg.train.sample_per_collect as u64);
            if let Some(l) = self.iterate(count as usize)? {
                losses.push(l);
            }
            let at_end = self.collector.samples >= budget;
            if self.collector.samples >= next_eval || at_end {
                while next_eval <= self.collector.samples {
                    next_eval += self.cfg.eval.interval;
                }
                let loss =
                    (!losses.is_empty()).then(|| losses.iter().sum::<f64>() / losses.len() as f64);
                losses.clear();
                last = self.record(loss)?;
                sink(&last)?;
                if let Some(dir) = checkpoint_dir {
                    save_checkpoint(&self.learner.online, dir)?;
                }
                solved = tracker.observe(
                    last.samples,
                    last.success_rate_10,
                    self.cfg.eval.solve_streak,
                );
            }
        }
        if let Some(dir) = checkpoint_dir {
            save_checkpoint(&self.learner.online, dir)?;
        }
        Ok(RunSummary {
            samples: self.collector.samples,
            episodes: self.collector.episodes,
            samples_to_solve: solved,
            final_steps_gap: last.steps_gap,
            final_success_rate_10: last.success_rate_10,
            final_mean_steps: last.mean_steps,
        })
    }
}

/// Random permutation helper shared with the policy-gradient learner.
pub(crate) fn shuffled_indices(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx
}
