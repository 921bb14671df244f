//! Multi-agent MDP primitives and their sequential expansion.
//!
//! A joint decision at state `s` is unrolled into `n` single-agent decisions.
//! The intermediate SE-state carries the base state together with the actions
//! already committed this step; it changes without touching the environment.
//! Only the last intermediate transition reaches the next base state and
//! carries the environment reward.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{AceError, Result};

pub type ActionId = usize;

/// Homogeneous discrete action space: `agents` agents, each choosing from
/// `0..actions`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActionSpace {
    pub agents: usize,
    pub actions: usize,
}

impl ActionSpace {
    pub fn new(agents: usize, actions: usize) -> Self {
        Self { agents, actions }
    }

    pub fn check(&self, action: ActionId) -> Result<()> {
        if action < self.actions {
            Ok(())
        } else {
            Err(AceError::IllegalAction {
                action,
                space: self.actions,
            })
        }
    }

    /// Number of joint actions, `actions^agents`.
    pub fn joint_size(&self) -> usize {
        self.actions.pow(self.agents as u32)
    }
}

/// Decision order: `permutation[k]` is the agent that acts at position `k`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AgentOrder(Vec<usize>);

impl AgentOrder {
    pub fn new(permutation: Vec<usize>) -> Result<Self> {
        let mut seen = vec![false; permutation.len()];
        for &p in &permutation {
            if p >= permutation.len() || seen[p] {
                return Err(AceError::Malformed(format!(
                    "agent order {permutation:?} is not a permutation"
                )));
            }
            seen[p] = true;
        }
        Ok(Self(permutation))
    }

    pub fn sorted(n: usize) -> Self {
        Self((0..n).collect())
    }

    pub fn shuffled<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Self {
        let mut p: Vec<usize> = (0..n).collect();
        p.shuffle(rng);
        Self(p)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Agent acting at decision position `pos`.
    pub fn agent_at(&self, pos: usize) -> usize {
        self.0[pos]
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }
}

/// Joint action listed in decision order: `actions[k]` belongs to the agent
/// at order position `k`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct JointAction(pub Vec<ActionId>);

impl JointAction {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Re-indexes the actions by agent id.
    pub fn by_agent(&self, order: &AgentOrder) -> Vec<ActionId> {
        let mut out = vec![0; self.0.len()];
        for (pos, &a) in self.0.iter().enumerate() {
            out[order.agent_at(pos)] = a;
        }
        out
    }

    pub fn validate(&self, order: &AgentOrder, space: &ActionSpace) -> Result<()> {
        if self.0.len() != space.agents || order.len() != space.agents {
            return Err(AceError::Malformed(format!(
                "joint action of length {} / order of length {} for {} agents",
                self.0.len(),
                order.len(),
                space.agents
            )));
        }
        self.0.iter().try_for_each(|&a| space.check(a))
    }
}

/// Base state plus the ordered prefix of actions committed this step.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct SeState<S> {
    pub base: S,
    pub prefix: Vec<ActionId>,
    pub order: AgentOrder,
}

impl<S: Clone> SeState<S> {
    pub fn root(base: S, order: AgentOrder) -> Self {
        Self {
            base,
            prefix: Vec::new(),
            order,
        }
    }

    pub fn is_complete(&self) -> bool {
        self.prefix.len() >= self.order.len()
    }

    /// Agent that decides next, if any.
    pub fn next_agent(&self) -> Option<usize> {
        (!self.is_complete()).then(|| self.order.agent_at(self.prefix.len()))
    }

    /// Pairs each committed action with the agent that executed it.
    pub fn executed(&self) -> impl Iterator<Item = (usize, ActionId)> + '_ {
        self.prefix
            .iter()
            .enumerate()
            .map(|(pos, &a)| (self.order.agent_at(pos), a))
    }

    pub fn successor(&self, action: ActionId, space: &ActionSpace) -> Result<Self> {
        if self.is_complete() {
            return Err(AceError::SequenceComplete(self.order.len()));
        }
        space.check(action)?;
        let mut prefix = Vec::with_capacity(self.prefix.len() + 1);
        prefix.extend_from_slice(&self.prefix);
        prefix.push(action);
        Ok(Self {
            base: self.base.clone(),
            prefix,
            order: self.order.clone(),
        })
    }

    /// One successor per legal action, ascending by action id.
    pub fn candidates(&self, space: &ActionSpace) -> Result<Vec<Self>> {
        if self.is_complete() {
            return Err(AceError::SequenceComplete(self.order.len()));
        }
        (0..space.actions)
            .map(|a| self.successor(a, space))
            .collect()
    }
}

/// One environment step.
#[derive(Debug, Clone, PartialEq)]
pub struct Transition<S> {
    pub state: S,
    pub joint_action: JointAction,
    pub reward: f64,
    pub next_state: S,
    pub done: bool,
    pub order: AgentOrder,
}

/// One intermediate transition of the expanded MDP. `to` has an empty prefix
/// exactly when it is the next base state.
#[derive(Debug, Clone, PartialEq)]
pub struct SeTransition<S> {
    pub from: SeState<S>,
    pub action: ActionId,
    pub reward: f64,
    pub to: SeState<S>,
    pub done: bool,
}

/// Unrolls an environment transition into `n` intermediate transitions.
pub fn expand_transition<S: Clone>(
    t: &Transition<S>,
    space: &ActionSpace,
) -> Result<Vec<SeTransition<S>>> {
    t.joint_action.validate(&t.order, space)?;
    let n = space.agents;
    let mut out = Vec::with_capacity(n);
    let mut cur = SeState::root(t.state.clone(), t.order.clone());
    for (pos, &a) in t.joint_action.0.iter().enumerate() {
        let last = pos + 1 == n;
        let to = if last {
            SeState::root(t.next_state.clone(), t.order.clone())
        } else {
            cur.successor(a, space)?
        };
        out.push(SeTransition {
            from: cur.clone(),
            action: a,
            reward: if last { t.reward } else { 0.0 },
            to: to.clone(),
            done: last && t.done,
        });
        cur = to;
    }
    Ok(out)
}
