//! Spiders-and-Fly: two controlled spiders chase an evasive fly on an L×L grid.
//!
//! Per step both spiders move at once (off-grid moves become `stay`). A spider
//! landing on the fly catches it. Otherwise the fly steps to a uniformly chosen
//! safe 4-neighbour, i.e. one that is neither a spider cell nor adjacent to a
//! spider, or stays put when no such neighbour exists.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{AceError, Result};
use crate::mmdp::{ActionId, ActionSpace};
use crate::seeding;

pub const NUM_SPIDERS: usize = 2;
pub const NUM_UNITS: usize = 3;
pub const NUM_MOVES: usize = 5;
pub const CATCH_REWARD: f64 = 10.0;
/// one-hot unit id (3) + normalised position (2)
pub const NODE_DIM: usize = 5;
pub const EDGE_DIM: usize = 2;
/// Catch deadline used by the success metric.
pub const SUCCESS_HORIZON: u32 = 10;
/// Upper bound on enumerable state counts (7×7 has 117 649).
pub const STATE_GUARD: usize = 200_000;

pub const ACTION_SPACE: ActionSpace = ActionSpace {
    agents: NUM_SPIDERS,
    actions: NUM_MOVES,
};

/// Moves by action id: up, down, left, right, stay.
const DELTAS: [(i32, i32); NUM_MOVES] = [(0, 1), (0, -1), (-1, 0), (1, 0), (0, 0)];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridConfig {
    pub side: u32,
    pub max_steps: u32,
    pub min_start_distance: u32,
}

impl GridConfig {
    /// Default config for a grid side; the start threshold of 4 shrinks to
    /// `side - 1` on grids smaller than 5.
    pub fn new(side: u32) -> Self {
        Self {
            side,
            max_steps: 100,
            min_start_distance: if side < 5 { side.saturating_sub(1) } else { 4 },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.side < 3 {
            return Err(AceError::Config(format!(
                "env.side = {} must be >= 3",
                self.side
            )));
        }
        if self.max_steps < 1 {
            return Err(AceError::Config("env.max_steps must be >= 1".into()));
        }
        Ok(())
    }

    pub fn cells(&self) -> usize {
        (self.side * self.side) as usize
    }

    pub fn state_count(&self) -> usize {
        self.cells().pow(NUM_UNITS as u32)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Pos {
    pub x: i32,
    pub y: i32,
}

impl Pos {
    pub const fn new(x: i32, y: i32) -> Self {
        Self { x, y }
    }

    pub fn manhattan(self, other: Pos) -> u32 {
        self.x.abs_diff(other.x) + self.y.abs_diff(other.y)
    }

    fn in_bounds(self, side: u32) -> bool {
        let s = side as i32;
        (0..s).contains(&self.x) && (0..s).contains(&self.y)
    }

    /// Applies a move; leaving the grid leaves the position unchanged.
    pub fn apply(self, action: ActionId, side: u32) -> Pos {
        let (dx, dy) = DELTAS[action];
        let next = Pos::new(self.x + dx, self.y + dy);
        if next.in_bounds(side) {
            next
        } else {
            self
        }
    }

    fn cell(self, side: u32) -> usize {
        (self.x + self.y * side as i32) as usize
    }

    fn from_cell(cell: usize, side: u32) -> Pos {
        let s = side as usize;
        Pos::new((cell % s) as i32, (cell / s) as i32)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct EnvState {
    pub spiders: [Pos; NUM_SPIDERS],
    pub fly: Pos,
    pub step_count: u32,
}

impl EnvState {
    pub fn new(spiders: [Pos; NUM_SPIDERS], fly: Pos) -> Self {
        Self {
            spiders,
            fly,
            step_count: 0,
        }
    }

    pub fn caught(&self) -> bool {
        self.spiders.contains(&self.fly)
    }

    pub fn is_terminal(&self, cfg: &GridConfig) -> bool {
        self.caught() || self.step_count >= cfg.max_steps
    }

    /// Position-only key, ignoring the step counter.
    pub fn index(&self, side: u32) -> usize {
        let cells = (side * side) as usize;
        (self.spiders[0].cell(side) * cells + self.spiders[1].cell(side)) * cells
            + self.fly.cell(side)
    }

    pub fn from_index(index: usize, side: u32) -> Self {
        let cells = (side * side) as usize;
        let fly = Pos::from_cell(index % cells, side);
        let s1 = Pos::from_cell((index / cells) % cells, side);
        let s0 = Pos::from_cell(index / (cells * cells), side);
        Self::new([s0, s1], fly)
    }

    pub fn is_legal_start(&self, cfg: &GridConfig) -> bool {
        self.spiders
            .iter()
            .all(|&s| s.manhattan(self.fly) > cfg.min_start_distance)
    }
}

impl std::fmt::Display for EnvState {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "spiders ({},{}) ({},{}) fly ({},{}) t={}",
            self.spiders[0].x,
            self.spiders[0].y,
            self.spiders[1].x,
            self.spiders[1].y,
            self.fly.x,
            self.fly.y,
            self.step_count
        )
    }
}

/// Result of one environment step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutcome {
    pub state: EnvState,
    pub reward: f64,
    pub done: bool,
}

/// Neighbours the fly may move to given the spider positions, in move-id order.
pub fn safe_moves(spiders: &[Pos; NUM_SPIDERS], fly: Pos, side: u32) -> Vec<Pos> {
    DELTAS[..4]
        .iter()
        .map(|&(dx, dy)| Pos::new(fly.x + dx, fly.y + dy))
        .filter(|p| p.in_bounds(side))
        .filter(|&p| spiders.iter().all(|&s| s.manhattan(p) > 1))
        .collect()
}

/// Draws the fly's next cell.
pub fn fly_move<R: Rng + ?Sized>(state: &EnvState, side: u32, rng: &mut R) -> Pos {
    let safe = safe_moves(&state.spiders, state.fly, side);
    if safe.is_empty() {
        state.fly
    } else {
        safe[rng.gen_range(0..safe.len())]
    }
}

/// Samples a uniformly random legal start.
pub fn reset<R: Rng + ?Sized>(cfg: &GridConfig, rng: &mut R) -> Result<EnvState> {
    cfg.validate()?;
    if 2 * (cfg.side - 1) <= cfg.min_start_distance {
        return Err(AceError::InfeasibleStart(cfg.min_start_distance));
    }
    let cells = cfg.cells();
    loop {
        let mut draw = || Pos::from_cell(rng.gen_range(0..cells), cfg.side);
        let state = EnvState::new([draw(), draw()], draw());
        if state.is_legal_start(cfg) {
            return Ok(state);
        }
    }
}

/// Moves both spiders; returns the intermediate state and whether it catches.
pub fn move_spiders(state: &EnvState, actions: &[ActionId], side: u32) -> Result<EnvState> {
    if actions.len() != NUM_SPIDERS {
        return Err(AceError::Malformed(format!(
            "expected {NUM_SPIDERS} spider actions, got {}",
            actions.len()
        )));
    }
    let mut next = *state;
    for (spider, &a) in next.spiders.iter_mut().zip(actions) {
        ACTION_SPACE.check(a)?;
        *spider = spider.apply(a, side);
    }
    Ok(next)
}

/// Advances the environment; `actions` is indexed by spider id.
pub fn step<R: Rng + ?Sized>(
    cfg: &GridConfig,
    state: &EnvState,
    actions: &[ActionId],
    rng: &mut R,
) -> Result<StepOutcome> {
    if state.is_terminal(cfg) {
        return Err(AceError::EpisodeFinished);
    }
    let mut next = move_spiders(state, actions, cfg.side)?;
    next.step_count += 1;
    if !next.caught() {
        next.fly = fly_move(&next, cfg.side, rng);
    }
    let caught = next.caught();
    Ok(StepOutcome {
        state: next,
        reward: if caught { CATCH_REWARD } else { 0.0 },
        done: caught || next.step_count >= cfg.max_steps,
    })
}

/// Node and edge inputs of the unit encoder.
///
/// `node` is `units × node_dim`, row-major. `edge` holds, for each unit `j`,
/// the edges `j → k` over `k ≠ j` in ascending `k`, so it is
/// `units × (units - 1) × edge_dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct UnitFeatures {
    pub units: usize,
    pub node_dim: usize,
    pub edge_dim: usize,
    pub node: Vec<f64>,
    pub edge: Vec<f64>,
}

impl UnitFeatures {
    pub fn node_row(&self, unit: usize) -> &[f64] {
        &self.node[unit * self.node_dim..(unit + 1) * self.node_dim]
    }

    /// Edge from `unit` to its `slot`-th other unit.
    pub fn edge_row(&self, unit: usize, slot: usize) -> &[f64] {
        let start = (unit * (self.units - 1) + slot) * self.edge_dim;
        &self.edge[start..start + self.edge_dim]
    }
}

pub fn features(state: &EnvState, side: u32) -> UnitFeatures {
    let l = side as f64;
    let units = [state.spiders[0], state.spiders[1], state.fly];
    let mut node = Vec::with_capacity(NUM_UNITS * NODE_DIM);
    for (id, p) in units.iter().enumerate() {
        let mut one_hot = [0.0; NUM_UNITS];
        one_hot[id] = 1.0;
        node.extend_from_slice(&one_hot);
        node.push(p.x as f64 / l);
        node.push(p.y as f64 / l);
    }
    let mut edge = Vec::with_capacity(NUM_UNITS * (NUM_UNITS - 1) * EDGE_DIM);
    for (j, pj) in units.iter().enumerate() {
        for (k, pk) in units.iter().enumerate() {
            if j != k {
                edge.push((pk.x - pj.x) as f64 / l);
                edge.push((pk.y - pj.y) as f64 / l);
            }
        }
    }
    UnitFeatures {
        units: NUM_UNITS,
        node_dim: NODE_DIM,
        edge_dim: EDGE_DIM,
        node,
        edge,
    }
}

/// All placements in index order, catch states included.
pub fn enumerate_states(cfg: &GridConfig) -> Result<Vec<EnvState>> {
    cfg.validate()?;
    let n = cfg.state_count();
    if n > STATE_GUARD {
        return Err(AceError::StateSpaceTooLarge {
            states: n,
            limit: STATE_GUARD,
        });
    }
    Ok((0..n).map(|i| EnvState::from_index(i, cfg.side)).collect())
}

/// Every legal start state in index order.
pub fn legal_starts(cfg: &GridConfig) -> Result<Vec<EnvState>> {
    Ok(enumerate_states(cfg)?
        .into_iter()
        .filter(|s| s.is_legal_start(cfg))
        .collect())
}

/// A seeded environment instance that auto-resets after each episode.
#[derive(Debug, Clone)]
pub struct SpidersFly {
    cfg: GridConfig,
    state: EnvState,
    rng: ChaCha8Rng,
}

impl SpidersFly {
    pub fn new(cfg: GridConfig, rng: ChaCha8Rng) -> Result<Self> {
        let mut rng = rng;
        let state = reset(&cfg, &mut rng)?;
        Ok(Self { cfg, state, rng })
    }

    pub fn from_seed(cfg: GridConfig, seed: u64) -> Result<Self> {
        Self::new(cfg, seeding::stream_rng(seed, seeding::ENV_STREAM_BASE))
    }

    pub fn config(&self) -> &GridConfig {
        &self.cfg
    }

    pub fn state(&self) -> &EnvState {
        &self.state
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    /// Steps with spider-indexed actions. A finished episode is replaced by a
    /// fresh start; the returned outcome still reports the terminal state.
    pub fn step(&mut self, actions: &[ActionId]) -> Result<StepOutcome> {
        let out = step(&self.cfg, &self.state, actions, &mut self.rng)?;
        self.state = if out.done {
            reset(&self.cfg, &mut self.rng)?
        } else {
            out.state
        };
        Ok(out)
    }
}
