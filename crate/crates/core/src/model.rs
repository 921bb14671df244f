//! The SE-state network.
//!
//! A state is encoded once into one embedding per unit: a node encoder on the
//! unit's own features plus the mean of an edge encoder over its edges to
//! every other unit. Every SE-state reachable this step is then an additive
//! combination of those unit embeddings and action embeddings: each committed
//! action adds its active vector to its executor's slot, and, when the action
//! targets another unit, its passive vector (encoded from the executor's node
//! features) to the target's slot. A value head (`fc-relu`, mean over units,
//! `fc`) scores each combination; the policy variant adds a logit head of the
//! same shape.

use std::sync::atomic::{AtomicUsize, Ordering};

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::env::{UnitFeatures, EDGE_DIM, NODE_DIM, NUM_MOVES, NUM_UNITS};
use crate::error::{AceError, Result};
use crate::mmdp::ActionId;
use crate::neural::{
    max_pool, mean_pool, Activation, Dense, DenseCache, ParamId, ParamStore, Real,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub hidden: usize,
    pub units: usize,
    pub node_dim: usize,
    pub edge_dim: usize,
    pub num_actions: usize,
    /// Add passive embeddings for interactive actions.
    pub ia_enabled: bool,
    /// Build the policy (logit) head.
    pub logit_head: bool,
    /// How a head pools its per-unit features.
    pub pool: UnitPool,
    /// Insert a dense+ReLU layer between pooling and the scalar output.
    pub post_pool_hidden: bool,
}

/// Pooling over unit slots inside a head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UnitPool {
    #[default]
    Mean,
    Max,
}

impl ModelConfig {
    /// Spiders-and-Fly dimensions with the given hidden width.
    pub fn spiders_fly(hidden: usize) -> Self {
        Self {
            hidden,
            units: NUM_UNITS,
            node_dim: NODE_DIM,
            edge_dim: EDGE_DIM,
            num_actions: NUM_MOVES,
            ia_enabled: true,
            logit_head: false,
            pool: UnitPool::Mean,
            post_pool_hidden: false,
        }
    }

    /// Closed-form parameter count:
    /// `H(d_n+1) + H(d_e+1) + A·H + A·H(d_n+1) + k((1+p)·H(H+1) + H+1)` with
    /// `k` heads and `p = 1` when a post-pool layer is present.
    pub fn param_count(&self) -> usize {
        let h = self.hidden;
        let heads = 1 + usize::from(self.logit_head);
        let layers = 1 + usize::from(self.post_pool_hidden);
        h * (self.node_dim + 1)
            + h * (self.edge_dim + 1)
            + self.num_actions * h
            + self.num_actions * h * (self.node_dim + 1)
            + heads * (layers * h * (h + 1) + h + 1)
    }
}

/// Passive target unit of each action id; `None` for actions that only
/// affect their executor.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InteractionMap {
    targets: Vec<Option<usize>>,
}

impl InteractionMap {
    pub fn none(num_actions: usize) -> Self {
        Self {
            targets: vec![None; num_actions],
        }
    }

    pub fn new(targets: Vec<Option<usize>>) -> Self {
        Self { targets }
    }

    pub fn target(&self, action: ActionId) -> Option<usize> {
        self.targets.get(action).copied().flatten()
    }

    pub fn any(&self) -> bool {
        self.targets.iter().any(Option::is_some)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Head {
    Value,
    Logit,
}

/// Node and edge inputs for a batch of states.
#[derive(Debug, Clone)]
pub struct StateBatch<T> {
    pub states: usize,
    pub units: usize,
    /// `(states·units) × node_dim`
    pub node: Array2<T>,
    /// `(states·units·(units−1)) × edge_dim`
    pub edge: Array2<T>,
}

impl<T: Real> StateBatch<T> {
    pub fn from_features(feats: &[UnitFeatures]) -> Result<Self> {
        let first = feats
            .first()
            .ok_or_else(|| AceError::Malformed("empty state batch".into()))?;
        let (units, nd, ed) = (first.units, first.node_dim, first.edge_dim);
        let mut node = Vec::with_capacity(feats.len() * units * nd);
        let mut edge = Vec::with_capacity(feats.len() * units * (units - 1) * ed);
        for f in feats {
            if (f.units, f.node_dim, f.edge_dim) != (units, nd, ed) {
                return Err(AceError::DimensionMismatch(
                    "inconsistent feature shapes".into(),
                ));
            }
            node.extend(f.node.iter().map(|&v| T::lit(v)));
            edge.extend(f.edge.iter().map(|&v| T::lit(v)));
        }
        let n = feats.len();
        Ok(Self {
            states: n,
            units,
            node: Array2::from_shape_vec((n * units, nd), node).expect("node shape"),
            edge: Array2::from_shape_vec((n * units * (units - 1), ed), edge).expect("edge shape"),
        })
    }
}

/// Unit embeddings of a batch of states plus their passive action vectors.
#[derive(Debug, Clone)]
pub struct Encoded<T> {
    pub states: usize,
    pub units: usize,
    /// `(states·units) × H`
    pub units_emb: Array2<T>,
    /// `(states·units) × (A·H)`; row `(b, u)` block `a` is the passive vector of
    /// action `a` executed by unit `u`. Present only when needed.
    pub passive: Option<Array2<T>>,
    cache: Option<EncodeCache<T>>,
}

#[derive(Debug, Clone)]
struct EncodeCache<T> {
    node: DenseCache<T>,
    edge: DenseCache<T>,
    passive: Option<DenseCache<T>>,
}

impl<T: Real> Encoded<T> {
    /// Embedding of a single state, `units × H`.
    pub fn state(&self, b: usize) -> ArrayView2<'_, T> {
        self.units_emb
            .slice(s![b * self.units..(b + 1) * self.units, ..])
    }
}

/// One SE-state to score: a state of the batch plus committed
/// `(executor unit, action)` pairs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Query {
    pub state: usize,
    pub prefix: Vec<(usize, ActionId)>,
}

/// `fc-relu` per unit, pooling over units, optional `fc-relu`, then `fc`.
#[derive(Debug, Clone, Copy)]
struct HeadLayers {
    hidden: Dense,
    post: Option<Dense>,
    out: Dense,
}

impl HeadLayers {
    fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        cfg: &ModelConfig,
        rng: &mut R,
    ) -> Self {
        let h = cfg.hidden;
        let hidden = Dense::new(
            store,
            &format!("{name}.hidden"),
            h,
            h,
            Activation::Relu,
            rng,
        );
        let post = cfg
            .post_pool_hidden
            .then(|| Dense::new(store, &format!("{name}.post"), h, h, Activation::Relu, rng));
        let out = Dense::new(
            store,
            &format!("{name}.out"),
            h,
            1,
            Activation::Identity,
            rng,
        );
        Self { hidden, post, out }
    }
}

#[derive(Debug, Clone)]
pub struct HeadCache<T> {
    hidden: DenseCache<T>,
    /// Winning unit per (query, channel) under max pooling.
    argmax: Option<Vec<usize>>,
    post: Option<DenseCache<T>>,
    out: DenseCache<T>,
    queries: usize,
}

/// Everything recorded by [`AceModel::forward`] for the backward pass.
#[derive(Debug, Clone)]
pub struct GraphCache<T> {
    encoded: Encoded<T>,
    queries: Vec<Query>,
    head: Head,
    head_cache: HeadCache<T>,
}

#[derive(Debug)]
pub struct AceModel {
    pub cfg: ModelConfig,
    pub interactions: InteractionMap,
    node_enc: Dense,
    edge_enc: Dense,
    active: ParamId,
    passive_enc: Dense,
    value: HeadLayers,
    logit: Option<HeadLayers>,
    states_encoded: AtomicUsize,
}

impl Clone for AceModel {
    fn clone(&self) -> Self {
        Self {
            cfg: self.cfg,
            interactions: self.interactions.clone(),
            node_enc: self.node_enc,
            edge_enc: self.edge_enc,
            active: self.active,
            passive_enc: self.passive_enc,
            value: self.value,
            logit: self.logit,
            states_encoded: AtomicUsize::new(0),
        }
    }
}

impl AceModel {
    /// Builds the model and its freshly initialised parameters. The active
    /// embedding table starts at zero.
    pub fn build<T: Real, R: Rng + ?Sized>(
        cfg: ModelConfig,
        interactions: InteractionMap,
        rng: &mut R,
    ) -> (Self, ParamStore<T>) {
        let h = cfg.hidden;
        let mut store = ParamStore::new();
        let node_enc = Dense::new(
            &mut store,
            "node_enc",
            cfg.node_dim,
            h,
            Activation::Relu,
            rng,
        );
        let edge_enc = Dense::new(
            &mut store,
            "edge_enc",
            cfg.edge_dim,
            h,
            Activation::Relu,
            rng,
        );
        let active = store.zeros("active", &[cfg.num_actions, h]);
        let passive_enc = Dense::new(
            &mut store,
            "passive_enc",
            cfg.node_dim,
            cfg.num_actions * h,
            Activation::Relu,
            rng,
        );
        let value = HeadLayers::new(&mut store, "value", &cfg, rng);
        let logit = cfg
            .logit_head
            .then(|| HeadLayers::new(&mut store, "logit", &cfg, rng));
        let model = Self {
            cfg,
            interactions,
            node_enc,
            edge_enc,
            active,
            passive_enc,
            value,
            logit,
            states_encoded: AtomicUsize::new(0),
        };
        (model, store)
    }

    pub fn active_table(&self) -> ParamId {
        self.active
    }

    /// Total number of states passed through the unit encoder so far.
    pub fn states_encoded(&self) -> usize {
        self.states_encoded.load(Ordering::Relaxed)
    }

    fn uses_passive(&self) -> bool {
        self.cfg.ia_enabled && self.interactions.any()
    }

    fn head_layers(&self, head: Head) -> Result<HeadLayers> {
        match head {
            Head::Value => Ok(self.value),
            Head::Logit => self
                .logit
                .ok_or_else(|| AceError::Config("model has no logit head".into())),
        }
    }

    /// Encodes a batch of states into unit embeddings (and passive vectors).
    pub fn encode<T: Real>(
        &self,
        store: &ParamStore<T>,
        batch: &StateBatch<T>,
        record: bool,
    ) -> Result<Encoded<T>> {
        if batch.units != self.cfg.units {
            return Err(AceError::DimensionMismatch(format!(
                "model expects {} units, batch has {}",
                self.cfg.units, batch.units
            )));
        }
        self.states_encoded
            .fetch_add(batch.states, Ordering::Relaxed);
        let m = batch.units;
        let (node_emb, node_cache) = self.node_enc.forward(store, batch.node.view(), record)?;
        let (edge_emb, edge_cache) = self.edge_enc.forward(store, batch.edge.view(), record)?;
        let mut units_emb = node_emb;
        let k = m - 1;
        if k > 0 {
            for (r, mut row) in units_emb.rows_mut().into_iter().enumerate() {
                let pooled = mean_pool(edge_emb.slice(s![r * k..(r + 1) * k, ..]));
                row += &pooled;
            }
        }
        let (passive, passive_cache) = if self.uses_passive() {
            let (p, c) = self.passive_enc.forward(store, batch.node.view(), record)?;
            (Some(p), c)
        } else {
            (None, None)
        };
        let cache = match (node_cache, edge_cache) {
            (Some(node), Some(edge)) => Some(EncodeCache {
                node,
                edge,
                passive: passive_cache,
            }),
            _ => None,
        };
        Ok(Encoded {
            states: batch.states,
            units: m,
            units_emb,
            passive,
            cache,
        })
    }

    /// Encodes a single state.
    pub fn encode_units<T: Real>(
        &self,
        store: &ParamStore<T>,
        feats: &UnitFeatures,
    ) -> Result<Encoded<T>> {
        self.encode(
            store,
            &StateBatch::from_features(std::slice::from_ref(feats))?,
            false,
        )
    }

    /// Builds the embeddings of each queried SE-state, `(Q·units) × H`.
    pub fn compose<T: Real>(
        &self,
        store: &ParamStore<T>,
        enc: &Encoded<T>,
        queries: &[Query],
    ) -> Result<Array2<T>> {
        let m = enc.units;
        let h = self.cfg.hidden;
        let active = store.matrix(self.active);
        let mut out = Array2::zeros((queries.len() * m, h));
        for (qi, q) in queries.iter().enumerate() {
            if q.state >= enc.states {
                return Err(AceError::Malformed(format!(
                    "query state {} out of range",
                    q.state
                )));
            }
            let mut block = out.slice_mut(s![qi * m..(qi + 1) * m, ..]);
            block.assign(&enc.state(q.state));
            for &(exec, a) in &q.prefix {
                if a >= self.cfg.num_actions {
                    return Err(AceError::IllegalAction {
                        action: a,
                        space: self.cfg.num_actions,
                    });
                }
                if exec >= m {
                    return Err(AceError::Malformed(format!(
                        "executor unit {exec} out of range"
                    )));
                }
                let mut slot = block.row_mut(exec);
                slot += &active.row(a);
                if let (Some(target), Some(passive)) = (self.passive_target(a), &enc.passive) {
                    let row = passive.row(q.state * m + exec);
                    let mut t = block.row_mut(target);
                    t += &row.slice(s![a * h..(a + 1) * h]);
                }
            }
        }
        Ok(out)
    }

    fn passive_target(&self, a: ActionId) -> Option<usize> {
        if self.cfg.ia_enabled {
            self.interactions.target(a)
        } else {
            None
        }
    }

    /// Scores composed embeddings with a head; returns one value per query.
    pub fn head_forward<T: Real>(
        &self,
        store: &ParamStore<T>,
        head: Head,
        composed: ArrayView2<'_, T>,
        record: bool,
    ) -> Result<(Array1<T>, Option<HeadCache<T>>)> {
        let layers = self.head_layers(head)?;
        let m = self.cfg.units;
        let q = composed.nrows() / m;
        let h = self.cfg.hidden;
        let (hid, hid_cache) = layers.hidden.forward(store, composed, record)?;
        let mut pooled = Array2::zeros((q, h));
        let mut argmax =
            (self.cfg.pool == UnitPool::Max && record).then(|| Vec::with_capacity(q * h));
        for (i, mut row) in pooled.rows_mut().into_iter().enumerate() {
            let block = hid.slice(s![i * m..(i + 1) * m, ..]);
            match self.cfg.pool {
                UnitPool::Mean => row.assign(&mean_pool(block)),
                UnitPool::Max => {
                    let (v, arg) = max_pool(block);
                    row.assign(&v);
                    if let Some(a) = argmax.as_mut() {
                        a.extend(arg);
                    }
                }
            }
        }
        let (pooled, post_cache) = match &layers.post {
            Some(post) => post.forward(store, pooled.view(), record)?,
            None => (pooled, None),
        };
        let (v, out_cache) = layers.out.forward(store, pooled.view(), record)?;
        let cache = match (hid_cache, out_cache) {
            (Some(hidden), Some(out)) => Some(HeadCache {
                hidden,
                argmax,
                post: post_cache,
                out,
                queries: q,
            }),
            _ => None,
        };
        Ok((v.index_axis_move(Axis(1), 0), cache))
    }

    /// Value of a single composed embedding (`units × H`).
    pub fn value_head<T: Real>(&self, store: &ParamStore<T>, emb: ArrayView2<'_, T>) -> Result<T> {
        Ok(self.head_forward(store, Head::Value, emb, false)?.0[0])
    }

    /// Scores of `prefix ++ [(executor, a)]` for each legal `a`, reusing the
    /// encoded state.
    pub fn rollout_values<T: Real>(
        &self,
        store: &ParamStore<T>,
        head: Head,
        enc: &Encoded<T>,
        state: usize,
        prefix: &[(usize, ActionId)],
        executor: usize,
        legal: &[ActionId],
    ) -> Result<Vec<T>> {
        if legal.is_empty() {
            return Err(AceError::EmptyActionSet);
        }
        let queries: Vec<Query> = legal
            .iter()
            .map(|&a| {
                let mut p = prefix.to_vec();
                p.push((executor, a));
                Query { state, prefix: p }
            })
            .collect();
        let composed = self.compose(store, enc, &queries)?;
        Ok(self
            .head_forward(store, head, composed.view(), false)?
            .0
            .to_vec())
    }

    /// Full forward pass from features to one score per query.
    pub fn forward<T: Real>(
        &self,
        store: &ParamStore<T>,
        batch: &StateBatch<T>,
        queries: Vec<Query>,
        head: Head,
        record: bool,
    ) -> Result<(Array1<T>, Option<GraphCache<T>>)> {
        let encoded = self.encode(store, batch, record)?;
        let composed = self.compose(store, &encoded, &queries)?;
        let (values, head_cache) = self.head_forward(store, head, composed.view(), record)?;
        let cache = head_cache.map(|head_cache| GraphCache {
            encoded,
            queries,
            head,
            head_cache,
        });
        Ok((values, cache))
    }

    /// Accumulates parameter gradients for upstream gradients `dvalues`.
    pub fn backward<T: Real>(
        &self,
        store: &mut ParamStore<T>,
        cache: Option<&GraphCache<T>>,
        dvalues: &[T],
    ) -> Result<()> {
        let cache = cache.ok_or(AceError::NoCache)?;
        let enc_cache = cache.encoded.cache.as_ref().ok_or(AceError::NoCache)?;
        let hc = &cache.head_cache;
        if dvalues.len() != hc.queries {
            return Err(AceError::DimensionMismatch(format!(
                "{} upstream gradients for {} queries",
                dvalues.len(),
                hc.queries
            )));
        }
        let m = self.cfg.units;
        let h = self.cfg.hidden;
        let layers = self.head_layers(cache.head)?;

        let dv = Array2::from_shape_vec((dvalues.len(), 1), dvalues.to_vec()).expect("column");
        let mut dpooled = layers.out.backward(store, Some(&hc.out), dv.view())?;
        if let Some(post) = &layers.post {
            dpooled = post.backward(store, hc.post.as_ref(), dpooled.view())?;
        }
        let mut dhid = Array2::zeros((dvalues.len() * m, h));
        match &hc.argmax {
            Some(arg) => {
                for (i, g) in dpooled.rows().into_iter().enumerate() {
                    for (c, &gc) in g.iter().enumerate() {
                        dhid[[i * m + arg[i * h + c], c]] = gc;
                    }
                }
            }
            None => {
                let scale = T::one() / T::lit(m as f64);
                for (i, g) in dpooled.rows().into_iter().enumerate() {
                    let g = g.mapv(|x| x * scale);
                    for j in 0..m {
                        dhid.row_mut(i * m + j).assign(&g);
                    }
                }
            }
        }
        let dcomposed = layers
            .hidden
            .backward(store, Some(&hc.hidden), dhid.view())?;

        // scatter through the additive composition
        let enc = &cache.encoded;
        let mut demb = Array2::<T>::zeros(enc.units_emb.dim());
        let mut dpassive = enc.passive.as_ref().map(|p| Array2::<T>::zeros(p.dim()));
        {
            let mut dactive = store.grad_matrix_mut(self.active);
            for (qi, q) in cache.queries.iter().enumerate() {
                let block = dcomposed.slice(s![qi * m..(qi + 1) * m, ..]);
                let mut dst = demb.slice_mut(s![q.state * m..(q.state + 1) * m, ..]);
                dst += &block;
                for &(exec, a) in &q.prefix {
                    let mut row = dactive.row_mut(a);
                    row += &block.row(exec);
                    if let (Some(target), Some(dp)) = (self.passive_target(a), dpassive.as_mut()) {
                        let mut dst = dp.slice_mut(s![q.state * m + exec, a * h..(a + 1) * h]);
                        dst += &block.row(target);
                    }
                }
            }
        }

        self.node_enc
            .backward(store, Some(&enc_cache.node), demb.view())?;
        let k = m - 1;
        if k > 0 {
            let kscale = T::one() / T::lit(k as f64);
            let mut dedge = Array2::zeros((demb.nrows() * k, h));
            for (r, g) in demb.rows().into_iter().enumerate() {
                let g = g.mapv(|x| x * kscale);
                for e in 0..k {
                    dedge.row_mut(r * k + e).assign(&g);
                }
            }
            self.edge_enc
                .backward(store, Some(&enc_cache.edge), dedge.view())?;
        }
        if let Some(dp) = dpassive {
            self.passive_enc
                .backward(store, enc_cache.passive.as_ref(), dp.view())?;
        }
        Ok(())
    }
}
