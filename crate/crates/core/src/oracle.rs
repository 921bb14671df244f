//! Exact dynamic programming on Spiders-and-Fly.
//!
//! Two solvers share one transition model: value iteration on the joint MMDP
//! (25 joint actions per state) and value iteration on its sequential
//! expansion, where the two spiders act one after the other. The greedy
//! policy of the joint solver is the oracle the learners are measured against.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::env::{
    self, EnvState, GridConfig, CATCH_REWARD, NUM_MOVES, NUM_SPIDERS, SUCCESS_HORIZON,
};
use crate::error::{AceError, Result};
use crate::eval::BatchPolicy;
use crate::mmdp::ActionId;

pub const JOINT_ACTIONS: usize = NUM_MOVES * NUM_MOVES;
/// SE slots per base state: empty prefix, 5 one-action prefixes, 25 full.
pub const SE_SLOTS: usize = 1 + NUM_MOVES + JOINT_ACTIONS;
/// Values within this distance of the maximum count as tied.
pub const TIE_TOL: f64 = 1e-9;
const MAX_SWEEPS: usize = 100_000;
const TABLE_MAGIC: &[u8; 8] = b"ACEVTAB1";

pub fn joint_index(a0: ActionId, a1: ActionId) -> usize {
    a0 * NUM_MOVES + a1
}

pub fn joint_actions(j: usize) -> [ActionId; NUM_SPIDERS] {
    [j / NUM_MOVES, j % NUM_MOVES]
}

/// Outcome of one joint action: an immediate catch, or the uniformly likely
/// successor states after the fly moves.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome<'a> {
    Catch,
    Successors(&'a [u32]),
}

/// Precomputed transition structure over all placements.
#[derive(Debug, Clone)]
pub struct TransitionModel {
    cfg: GridConfig,
    terminal: Vec<bool>,
    /// `offsets[s * 25 + j]..offsets[s * 25 + j + 1]` indexes `succ`; an
    /// empty range on a non-terminal state means the action catches.
    offsets: Vec<u32>,
    succ: Vec<u32>,
}

impl TransitionModel {
    pub fn build(cfg: &GridConfig) -> Result<Self> {
        let states = env::enumerate_states(cfg)?;
        let mut terminal = Vec::with_capacity(states.len());
        let mut offsets = Vec::with_capacity(states.len() * JOINT_ACTIONS + 1);
        let mut succ = Vec::new();
        offsets.push(0u32);
        for s in &states {
            let term = s.caught();
            terminal.push(term);
            for j in 0..JOINT_ACTIONS {
                if !term {
                    let moved = env::move_spiders(s, &joint_actions(j), cfg.side)?;
                    if !moved.caught() {
                        let safe = env::safe_moves(&moved.spiders, moved.fly, cfg.side);
                        if safe.is_empty() {
                            succ.push(moved.index(cfg.side) as u32);
                        } else {
                            for fly in safe {
                                let next = EnvState::new(moved.spiders, fly);
                                succ.push(next.index(cfg.side) as u32);
                            }
                        }
                    }
                }
                offsets.push(succ.len() as u32);
            }
        }
        Ok(Self {
            cfg: *cfg,
            terminal,
            offsets,
            succ,
        })
    }

    pub fn config(&self) -> &GridConfig {
        &self.cfg
    }

    pub fn len(&self) -> usize {
        self.terminal.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terminal.is_empty()
    }

    pub fn is_terminal(&self, s: usize) -> bool {
        self.terminal[s]
    }

    pub fn outcome(&self, s: usize, joint: usize) -> Outcome<'_> {
        let k = s * JOINT_ACTIONS + joint;
        let range = self.offsets[k] as usize..self.offsets[k + 1] as usize;
        if range.is_empty() {
            Outcome::Catch
        } else {
            Outcome::Successors(&self.succ[range])
        }
    }

    /// Expected backup `r + discount * E[values[s']]` for a non-terminal state.
    pub fn backup(&self, s: usize, joint: usize, discount: f64, values: &[f64]) -> f64 {
        match self.outcome(s, joint) {
            Outcome::Catch => CATCH_REWARD,
            Outcome::Successors(next) => {
                let mean =
                    next.iter().map(|&n| values[n as usize]).sum::<f64>() / next.len() as f64;
                discount * mean
            }
        }
    }
}

/// Values indexed by state (or SE-state) index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValueTable {
    pub side: u32,
    pub discount: f64,
    pub values: Vec<f64>,
    pub residual: f64,
    pub sweeps: usize,
    /// Sup-norm residual after each sweep.
    pub residual_history: Vec<f64>,
}

impl ValueTable {
    /// Writes `magic, side (u32), discount (f64), count (u64)` followed by the
    /// values as little-endian f64.
    pub fn write(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::with_capacity(28 + 8 * self.values.len());
        buf.extend_from_slice(TABLE_MAGIC);
        buf.extend_from_slice(&self.side.to_le_bytes());
        buf.extend_from_slice(&self.discount.to_le_bytes());
        buf.extend_from_slice(&(self.values.len() as u64).to_le_bytes());
        for v in &self.values {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        let mut f = fs::File::create(path)?;
        f.write_all(&buf)?;
        Ok(())
    }

    /// Reads a table written by [`ValueTable::write`]; solver metadata is not
    /// stored and comes back empty.
    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        if bytes.len() < 28 || &bytes[..8] != TABLE_MAGIC {
            return Err(AceError::Format(format!(
                "{}: bad value table header",
                path.display()
            )));
        }
        let side = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        let discount = f64::from_le_bytes(bytes[12..20].try_into().unwrap());
        let count = u64::from_le_bytes(bytes[20..28].try_into().unwrap()) as usize;
        let body = &bytes[28..];
        if body.len() != count * 8 {
            return Err(AceError::Format(format!(
                "{}: expected {count} values, found {} bytes",
                path.display(),
                body.len()
            )));
        }
        let values = body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Self {
            side,
            discount,
            values,
            residual: 0.0,
            sweeps: 0,
            residual_history: Vec::new(),
        })
    }
}

fn check_params(discount: f64, tol: f64) -> Result<()> {
    if !(discount > 0.0 && discount < 1.0) {
        return Err(AceError::Config(format!(
            "discount {discount} outside (0, 1)"
        )));
    }
    if !(tol > 0.0) {
        return Err(AceError::InvalidTolerance(tol));
    }
    Ok(())
}

fn sup_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Lowest index whose value is within [`TIE_TOL`] of the maximum.
pub fn argmax_lowest(values: &[f64]) -> usize {
    let best = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    values
        .iter()
        .position(|&v| v >= best - TIE_TOL)
        .unwrap_or(0)
}

/// Solution of the joint MMDP.
#[derive(Debug, Clone)]
pub struct MmdpSolution {
    pub table: ValueTable,
    /// Greedy joint action per state, ties to the lowest joint index.
    pub policy: Vec<u16>,
}

impl MmdpSolution {
    pub fn q_values(&self, model: &TransitionModel, s: usize) -> [f64; JOINT_ACTIONS] {
        let mut q = [0.0; JOINT_ACTIONS];
        if !model.is_terminal(s) {
            for (j, qj) in q.iter_mut().enumerate() {
                *qj = model.backup(s, j, self.table.discount, &self.table.values);
            }
        }
        q
    }

    /// All joint actions tied for the maximum at `s`.
    pub fn greedy_set(&self, model: &TransitionModel, s: usize) -> Vec<usize> {
        let q = self.q_values(model, s);
        let best = q.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        (0..JOINT_ACTIONS)
            .filter(|&j| q[j] >= best - TIE_TOL)
            .collect()
    }
}

/// Synchronous value iteration on the joint MMDP.
pub fn value_iteration_mmdp(
    model: &TransitionModel,
    discount: f64,
    tol: f64,
) -> Result<MmdpSolution> {
    check_params(discount, tol)?;
    let n = model.len();
    let mut v = vec![0.0; n];
    let mut next = vec![0.0; n];
    let mut history = Vec::new();
    loop {
        for s in 0..n {
            next[s] = if model.is_terminal(s) {
                0.0
            } else {
                (0..JOINT_ACTIONS)
                    .map(|j| model.backup(s, j, discount, &v))
                    .fold(f64::NEG_INFINITY, f64::max)
            };
        }
        let res = sup_diff(&next, &v);
        std::mem::swap(&mut v, &mut next);
        history.push(res);
        if res <= tol {
            break;
        }
        if history.len() >= MAX_SWEEPS {
            return Err(AceError::Divergence(format!(
                "value iteration did not reach {tol} in {MAX_SWEEPS} sweeps"
            )));
        }
    }
    let policy = (0..n)
        .map(|s| {
            if model.is_terminal(s) {
                0
            } else {
                let q: Vec<f64> = (0..JOINT_ACTIONS)
                    .map(|j| model.backup(s, j, discount, &v))
                    .collect();
                argmax_lowest(&q) as u16
            }
        })
        .collect();
    Ok(MmdpSolution {
        table: ValueTable {
            side: model.config().side,
            discount,
            residual: *history.last().unwrap(),
            sweeps: history.len(),
            residual_history: history,
            values: v,
        },
        policy,
    })
}

/// SE-table slot of a prefix.
pub fn se_slot(prefix: &[ActionId]) -> usize {
    match prefix {
        [] => 0,
        [a] => 1 + a,
        [a, b] => 1 + NUM_MOVES + joint_index(*a, *b),
        _ => panic!("prefix longer than the number of spiders"),
    }
}

/// Exact values over the sequentially expanded MDP (sorted agent order).
///
/// Layout: base state `s` owns slots `s * 31 .. s * 31 + 31` ordered by
/// [`se_slot`]. The full-prefix slot obeys `V = r + γ E[max_a V(s'_a)]`, the
/// one-action slot obeys `V = γ max_a V(s_{a1, a})`, and the empty-prefix slot
/// stores the rollout maximum `max_a V(s_a)` used to bootstrap.
#[derive(Debug, Clone)]
pub struct SeSolution {
    pub table: ValueTable,
}

impl SeSolution {
    pub fn value(&self, s: usize, prefix: &[ActionId]) -> f64 {
        self.table.values[s * SE_SLOTS + se_slot(prefix)]
    }

    /// Argmax over the first spider, then over the second given the first.
    pub fn sequential_greedy(&self, s: usize) -> [ActionId; NUM_SPIDERS] {
        let first: Vec<f64> = (0..NUM_MOVES).map(|a| self.value(s, &[a])).collect();
        let a0 = argmax_lowest(&first);
        let second: Vec<f64> = (0..NUM_MOVES).map(|a| self.value(s, &[a0, a])).collect();
        [a0, argmax_lowest(&second)]
    }
}

pub fn value_iteration_semdp(
    model: &TransitionModel,
    discount: f64,
    tol: f64,
) -> Result<SeSolution> {
    check_params(discount, tol)?;
    let n = model.len();
    let mut v = vec![0.0; n * SE_SLOTS];
    let mut next = vec![0.0; n * SE_SLOTS];
    let mut history = Vec::new();
    loop {
        // bootstrap value of every base state under the current table
        let boot: Vec<f64> = (0..n).map(|s| v[s * SE_SLOTS]).collect();
        for s in 0..n {
            let base = s * SE_SLOTS;
            if model.is_terminal(s) {
                next[base..base + SE_SLOTS].fill(0.0);
                continue;
            }
            for j in 0..JOINT_ACTIONS {
                next[base + 1 + NUM_MOVES + j] = model.backup(s, j, discount, &boot);
            }
            for a in 0..NUM_MOVES {
                let row = base + 1 + NUM_MOVES + a * NUM_MOVES;
                let best = v[row..row + NUM_MOVES]
                    .iter()
                    .copied()
                    .fold(f64::NEG_INFINITY, f64::max);
                next[base + 1 + a] = discount * best;
            }
            next[base] = v[base + 1..base + 1 + NUM_MOVES]
                .iter()
                .copied()
                .fold(f64::NEG_INFINITY, f64::max);
        }
        let res = sup_diff(&next, &v);
        std::mem::swap(&mut v, &mut next);
        history.push(res);
        if res <= tol {
            break;
        }
        if history.len() >= MAX_SWEEPS {
            return Err(AceError::Divergence(format!(
                "SE value iteration did not reach {tol} in {MAX_SWEEPS} sweeps"
            )));
        }
    }
    Ok(SeSolution {
        table: ValueTable {
            side: model.config().side,
            discount,
            residual: *history.last().unwrap(),
            sweeps: history.len(),
            residual_history: history,
            values: v,
        },
    })
}

/// Outcome of comparing the SE solution against the joint solution computed
/// with discount `γ^n`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EquivalenceReport {
    pub states: usize,
    /// States where the sequential-greedy joint action is in the joint greedy set.
    pub greedy_matches: usize,
    /// `sup_s |max_a V_SE(s_a) - γ V_MMDP(s)|`.
    pub scaling_error: f64,
}

impl EquivalenceReport {
    pub fn holds(&self, tol: f64) -> bool {
        self.greedy_matches == self.states && self.scaling_error <= tol
    }
}

pub fn check_equivalence(
    model: &TransitionModel,
    se: &SeSolution,
    joint: &MmdpSolution,
) -> EquivalenceReport {
    let gamma = se.table.discount;
    let n = model.len();
    let mut matches = 0;
    let mut scaling_error: f64 = 0.0;
    for s in 0..n {
        let [a0, a1] = se.sequential_greedy(s);
        if joint.greedy_set(model, s).contains(&joint_index(a0, a1)) {
            matches += 1;
        }
        let lhs = se.value(s, &[]);
        let rhs = gamma.powi(NUM_SPIDERS as i32 - 1) * joint.table.values[s];
        scaling_error = scaling_error.max((lhs - rhs).abs());
    }
    EquivalenceReport {
        states: n,
        greedy_matches: matches,
        scaling_error,
    }
}

/// One policy-evaluation sweep of the greedy policy against its own table.
pub fn policy_fixed_point_error(model: &TransitionModel, sol: &MmdpSolution) -> f64 {
    (0..model.len())
        .filter(|&s| !model.is_terminal(s))
        .map(|s| {
            let q = model.backup(
                s,
                sol.policy[s] as usize,
                sol.table.discount,
                &sol.table.values,
            );
            (q - sol.table.values[s]).abs()
        })
        .fold(0.0, f64::max)
}

/// Greedy oracle policy as a table lookup.
#[derive(Debug, Clone)]
pub struct OraclePolicy {
    side: u32,
    policy: Vec<u16>,
}

impl OraclePolicy {
    pub fn new(side: u32, sol: &MmdpSolution) -> Self {
        Self {
            side,
            policy: sol.policy.clone(),
        }
    }

    pub fn action(&self, s: &EnvState) -> [ActionId; NUM_SPIDERS] {
        joint_actions(self.policy[s.index(self.side)] as usize)
    }
}

impl BatchPolicy for OraclePolicy {
    fn act_batch(
        &self,
        states: &[EnvState],
        _rng: &mut ChaCha8Rng,
    ) -> Result<Vec<[ActionId; NUM_SPIDERS]>> {
        Ok(states.iter().map(|s| self.action(s)).collect())
    }
}

/// Exact catch-time statistics of a deterministic policy from uniform legal
/// starts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CatchTimeStats {
    /// `E[min(T, max_steps)]`, undiscounted.
    pub mean_steps: f64,
    /// `P(T <= 10)`.
    pub success_rate_10: f64,
    /// Largest `P(T > 10)` over individual start states.
    pub worst_start_miss: f64,
}

pub fn exact_catch_time(model: &TransitionModel, policy: &[u16]) -> Result<CatchTimeStats> {
    let cfg = *model.config();
    let n = model.len();
    let starts: Vec<usize> = env::legal_starts(&cfg)?
        .iter()
        .map(|s| s.index(cfg.side))
        .collect();
    // caught[s] = P(caught within k steps from s)
    let mut caught = vec![0.0f64; n];
    for s in 0..n {
        if model.is_terminal(s) {
            caught[s] = 1.0;
        }
    }
    let mut mean = vec![0.0f64; starts.len()];
    let mut success = vec![0.0f64; starts.len()];
    for k in 0..cfg.max_steps {
        for (m, &s) in mean.iter_mut().zip(&starts) {
            *m += 1.0 - caught[s];
        }
        let mut next = vec![0.0f64; n];
        for s in 0..n {
            next[s] = if model.is_terminal(s) {
                1.0
            } else {
                match model.outcome(s, policy[s] as usize) {
                    Outcome::Catch => 1.0,
                    Outcome::Successors(succ) => {
                        succ.iter().map(|&x| caught[x as usize]).sum::<f64>() / succ.len() as f64
                    }
                }
            };
        }
        caught = next;
        if k + 1 == SUCCESS_HORIZON {
            for (p, &s) in success.iter_mut().zip(&starts) {
                *p = caught[s];
            }
        }
    }
    let count = starts.len() as f64;
    Ok(CatchTimeStats {
        mean_steps: mean.iter().sum::<f64>() / count,
        success_rate_10: success.iter().sum::<f64>() / count,
        worst_start_miss: success.iter().map(|p| 1.0 - p).fold(0.0, f64::max),
    })
}

/// Everything the learners need from the oracle for one grid.
#[derive(Debug, Clone)]
pub struct Oracle {
    pub model: TransitionModel,
    pub solution: MmdpSolution,
    pub policy: OraclePolicy,
    pub catch_time: CatchTimeStats,
}

impl Oracle {
    pub fn solve(cfg: &GridConfig, discount: f64, tol: f64) -> Result<Self> {
        let model = TransitionModel::build(cfg)?;
        let solution = value_iteration_mmdp(&model, discount, tol)?;
        let policy = OraclePolicy::new(cfg.side, &solution);
        let catch_time = exact_catch_time(&model, &solution.policy)?;
        Ok(Self {
            model,
            solution,
            policy,
            catch_time,
        })
    }
}

/// Monte-Carlo mean episode length and 10-step success of any policy.
pub fn oracle_average_steps<P: BatchPolicy + ?Sized>(
    cfg: &GridConfig,
    policy: &P,
    episodes: usize,
    rng: &mut ChaCha8Rng,
) -> Result<crate::eval::EpisodeStats> {
    crate::eval::run_episodes(cfg, policy, episodes, 256, rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::Pos;
    use crate::eval::RandomPolicy;
    use rand::SeedableRng;

    const GAMMA: f64 = 0.99;

    fn model(side: u32) -> TransitionModel {
        TransitionModel::build(&GridConfig::new(side)).unwrap()
    }

    #[test]
    fn terminal_states_are_zero() {
        let m = model(3);
        let sol = value_iteration_mmdp(&m, GAMMA, 1e-10).unwrap();
        let se = value_iteration_semdp(&m, GAMMA, 1e-10).unwrap();
        for s in 0..m.len() {
            if m.is_terminal(s) {
                assert_eq!(sol.table.values[s], 0.0);
                for slot in 0..SE_SLOTS {
                    assert_eq!(se.table.values[s * SE_SLOTS + slot], 0.0);
                }
            }
        }
        assert!(sol.table.residual <= 1e-10);
    }

    #[test]
    fn adjacent_spider_state_is_worth_the_catch() {
        // spider 0 one step below the fly can step onto it: Q = 10 immediately
        let m = model(5);
        let sol = value_iteration_mmdp(&m, GAMMA, 1e-10).unwrap();
        let s = EnvState::new([Pos::new(2, 3), Pos::new(0, 0)], Pos::new(2, 4));
        let idx = s.index(5);
        assert!((sol.table.values[idx] - CATCH_REWARD).abs() < 1e-12);
        let [a0, _] = joint_actions(sol.policy[idx] as usize);
        assert_eq!(a0, 0);
    }

    #[test]
    fn residual_decreases_after_first_sweep() {
        let m = model(3);
        let sol = value_iteration_mmdp(&m, GAMMA, 1e-10).unwrap();
        let h = &sol.table.residual_history;
        for w in h[1..].windows(2) {
            assert!(w[1] <= w[0] + 1e-15, "{} > {}", w[1], w[0]);
        }
    }

    #[test]
    fn scaling_identity_and_greedy_equivalence_on_3x3() {
        let m = model(3);
        let se = value_iteration_semdp(&m, GAMMA, 1e-10).unwrap();
        let joint = value_iteration_mmdp(&m, GAMMA * GAMMA, 1e-10).unwrap();
        let report = check_equivalence(&m, &se, &joint);
        assert_eq!(report.states, 729);
        assert_eq!(report.greedy_matches, 729);
        assert!(report.scaling_error <= 1e-8, "{}", report.scaling_error);
    }

    #[test]
    fn greedy_policy_is_a_fixed_point() {
        let m = model(3);
        let sol = value_iteration_mmdp(&m, GAMMA, 1e-10).unwrap();
        assert!(policy_fixed_point_error(&m, &sol) <= 1e-9);
    }

    #[test]
    fn bad_parameters() {
        let m = model(3);
        assert!(matches!(
            value_iteration_mmdp(&m, GAMMA, 0.0),
            Err(AceError::InvalidTolerance(_))
        ));
        assert!(value_iteration_semdp(&m, 1.0, 1e-6).is_err());
    }

    #[test]
    fn table_file_round_trip() {
        let m = model(3);
        let sol = value_iteration_mmdp(&m, GAMMA, 1e-8).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("v.bin");
        sol.table.write(&p).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        assert_eq!(bytes.len(), 28 + 8 * 729);
        let back = ValueTable::read(&p).unwrap();
        assert_eq!(back.values, sol.table.values);
        assert_eq!(back.side, 3);
        assert_eq!(back.discount, GAMMA);
    }

    #[test]
    fn oracle_beats_random_on_5x5() {
        let cfg = GridConfig::new(5);
        let oracle = Oracle::solve(&cfg, GAMMA, 1e-10).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let o = oracle_average_steps(&cfg, &oracle.policy, 2000, &mut rng).unwrap();
        let r = oracle_average_steps(&cfg, &RandomPolicy, 2000, &mut rng).unwrap();
        assert!(o.mean_steps < r.mean_steps);
        assert!(r.success_rate_10 < 0.5);
        // Monte-Carlo agrees with the exact catch-time computation
        let se = o.std_steps / (o.episodes as f64).sqrt();
        assert!((o.mean_steps - oracle.catch_time.mean_steps).abs() < 5.0 * se + 1e-9);
    }
}
