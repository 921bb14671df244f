//! Self-check suites run by `ace verify`: SE/joint equivalence on a small
//! grid, finite-difference checks of every trainable path, and an
//! environment rule fuzz.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::env::{EnvState, GridConfig, Pos, SpidersFly, CATCH_REWARD, NUM_MOVES, NUM_SPIDERS};
use crate::error::Result;
use crate::learner::{bellman_targets, td_loss, EnvTransition, NetValue, OrderMode};
use crate::mmdp::{AgentOrder, JointAction, Transition};
use crate::model::{AceModel, Head, InteractionMap, ModelConfig, Query, StateBatch, UnitPool};
use crate::neural::{finite_difference_check, ParamStore};
use crate::oracle::{
    check_equivalence, value_iteration_mmdp, value_iteration_semdp, TransitionModel,
};
use crate::ppo::{policy_distribution, ppo_loss, DecisionSample, PpoBatch, PpoConfig};

pub const EQUIVALENCE_TOL: f64 = 1e-8;
pub const GRADIENT_TOL: f64 = 1e-4;
const FD_STEP: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub measured: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl Check {
    /// Passes when `measured <= tolerance`.
    pub fn at_most(name: impl Into<String>, measured: f64, tolerance: f64) -> Self {
        Self {
            name: name.into(),
            measured,
            tolerance,
            passed: measured <= tolerance,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Report {
    pub suite: String,
    pub checks: Vec<Check>,
}

impl Report {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for c in &self.checks {
            out.push_str(&format!(
                "{} {}: {} {:.3e} (tolerance {:.3e})\n",
                if c.passed { "PASS" } else { "FAIL" },
                self.suite,
                c.name,
                c.measured,
                c.tolerance
            ));
        }
        out
    }
}

/// Value iteration on the expanded MDP (discount γ) against the joint MDP
/// (discount γ²) on a `side × side` grid.
pub fn equivalence(side: u32, discount: f64) -> Result<Report> {
    let model = TransitionModel::build(&GridConfig::new(side))?;
    let se = value_iteration_semdp(&model, discount, 1e-12)?;
    let joint = value_iteration_mmdp(&model, discount * discount, 1e-12)?;
    let r = check_equivalence(&model, &se, &joint);
    Ok(Report {
        suite: "equivalence".into(),
        checks: vec![
            Check::at_most(
                format!(
                    "scaling identity sup error over {} states",
                    r.states
                ),
                r.scaling_error,
                EQUIVALENCE_TOL,
            ),
            Check::at_most(
                format!(
                    "states whose sequential-greedy action is outside the joint greedy set ({}/{} inside)",
                    r.greedy_matches, r.states
                ),
                (r.states - r.greedy_matches) as f64,
                0.0,
            ),
        ],
    })
}

/// Small f64 model with a passive interaction, the action table and all
/// biases moved off zero so no ReLU sits exactly on its kink.
fn gradcheck_model(seed: u64, pool: UnitPool, post: bool) -> (AceModel, ParamStore<f64>) {
    let cfg = ModelConfig {
        hidden: 6,
        logit_head: true,
        pool,
        post_pool_hidden: post,
        ..ModelConfig::spiders_fly(6)
    };
    let map = InteractionMap::new(vec![None, None, Some(2), Some(1), None]);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (model, mut store) = AceModel::build::<f64, _>(cfg, map, &mut rng);
    for p in store.params_mut() {
        if p.name == "active" || p.name.ends_with(".bias") {
            p.value
                .iter_mut()
                .for_each(|v| *v = rng.gen_range(-0.5..0.5));
        }
    }
    (model, store)
}

fn random_state(rng: &mut ChaCha8Rng, side: u32) -> EnvState {
    let mut pos = || Pos::new(rng.gen_range(0..side as i32), rng.gen_range(0..side as i32));
    EnvState::new([pos(), pos()], pos())
}

fn random_transitions(rng: &mut ChaCha8Rng, count: usize) -> Vec<EnvTransition> {
    (0..count)
        .map(|_| {
            let order = OrderMode::Shuffle.draw(rng);
            Transition {
                state: random_state(rng, 5),
                joint_action: JointAction(
                    (0..NUM_SPIDERS)
                        .map(|_| rng.gen_range(0..NUM_MOVES))
                        .collect(),
                ),
                reward: if rng.gen_bool(0.2) { CATCH_REWARD } else { 0.0 },
                next_state: random_state(rng, 5),
                done: rng.gen_bool(0.2),
                order,
            }
        })
        .collect()
}

fn tensor_checks(label: &str, per_tensor: &[(String, f64)], out: &mut Vec<Check>) {
    for (name, err) in per_tensor {
        out.push(Check::at_most(
            format!("{label} {name}"),
            *err,
            GRADIENT_TOL,
        ));
    }
}

/// Central-difference checks of the value graph, the logit graph, the TD
/// loss and the clipped policy loss, each broken down by tensor.
pub fn gradients(seed: u64) -> Result<Report> {
    let mut checks = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (pool, post) in [
        (UnitPool::Mean, false),
        (UnitPool::Max, false),
        (UnitPool::Mean, true),
    ] {
        let variant = format!(
            "[{} pool{}]",
            if pool == UnitPool::Mean {
                "mean"
            } else {
                "max"
            },
            if post { ", post layer" } else { "" }
        );
        let (model, mut store) = gradcheck_model(rng.gen(), pool, post);
        let feats: Vec<_> = (0..3)
            .map(|_| crate::env::features(&random_state(&mut rng, 5), 5))
            .collect();
        let batch = StateBatch::<f64>::from_features(&feats)?;
        let queries = vec![
            Query {
                state: 0,
                prefix: vec![],
            },
            Query {
                state: 0,
                prefix: vec![(0, 2)],
            },
            Query {
                state: 1,
                prefix: vec![(1, 3), (0, 2)],
            },
            Query {
                state: 2,
                prefix: vec![(0, 4), (1, 1)],
            },
        ];
        let coef: Vec<f64> = (0..queries.len())
            .map(|_| rng.gen_range(-1.0..1.0))
            .collect();
        for (head, label) in [(Head::Value, "value graph"), (Head::Logit, "logit graph")] {
            store.zero_grad();
            let (_, cache) = model.forward(&store, &batch, queries.clone(), head, true)?;
            model.backward(&mut store, cache.as_ref(), &coef)?;
            let report = finite_difference_check(&mut store, FD_STEP, |s| {
                let (v, _) = model
                    .forward(s, &batch, queries.clone(), head, false)
                    .expect("forward");
                v.iter().zip(&coef).map(|(v, c)| v * c).sum()
            });
            // the other head's tensors get no gradient; report only this head's path
            let skip = if head == Head::Value {
                "logit."
            } else {
                "value."
            };
            let relevant: Vec<(String, f64)> = report
                .per_tensor
                .into_iter()
                .filter(|(n, _)| !n.starts_with(skip))
                .collect();
            tensor_checks(&format!("{variant} {label}"), &relevant, &mut checks);
        }

        // full TD loss with targets from a second network
        let transitions = random_transitions(&mut rng, 6);
        let refs: Vec<&EnvTransition> = transitions.iter().collect();
        let (_, teacher) = gradcheck_model(rng.gen(), pool, post);
        let targets = bellman_targets(&NetValue::new(&model, &teacher, 5), &refs, 0.99)?;
        store.zero_grad();
        td_loss(&model, &mut store, &refs, &targets, 5, true)?;
        let report = finite_difference_check(&mut store, FD_STEP, |s| {
            td_loss(&model, &mut s.clone(), &refs, &targets, 5, false).expect("td loss")
        });
        checks.push(Check::at_most(
            format!("{variant} TD loss (all tensors)"),
            report.max_relative_error,
            GRADIENT_TOL,
        ));

        // clipped policy loss with ratios kept away from the clip edges
        let states: Vec<EnvState> = (0..3).map(|_| random_state(&mut rng, 5)).collect();
        let offsets = [0.0, 0.3, -0.3, 0.01, -0.02, 0.6];
        let decisions = offsets
            .iter()
            .enumerate()
            .map(|(k, &off)| -> Result<DecisionSample> {
                let order = AgentOrder::shuffled(NUM_SPIDERS, &mut rng);
                let prefix: Vec<usize> = (0..k % NUM_SPIDERS)
                    .map(|_| rng.gen_range(0..NUM_MOVES))
                    .collect();
                let p = policy_distribution(&model, &store, 5, &states[k % 3], &order, &prefix)?;
                let action = rng.gen_range(0..NUM_MOVES);
                let target = rng.gen_range(-1.0..1.0);
                Ok(DecisionSample {
                    state: k % 3,
                    order,
                    prefix,
                    action,
                    logp_old: p[action].ln() - off,
                    advantage: rng.gen_range(-2.0..2.0),
                    target,
                    value_old: target + [0.1, -0.8, 0.9][k % 3],
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let pb = PpoBatch { states, decisions };
        let cfg = PpoConfig::default();
        store.zero_grad();
        ppo_loss(&model, &mut store, &pb, &cfg, 5, true)?;
        let report = finite_difference_check(&mut store, FD_STEP, |s| {
            ppo_loss(&model, &mut s.clone(), &pb, &cfg, 5, false)
                .expect("policy loss")
                .total
        });
        checks.push(Check::at_most(
            format!("{variant} PPO loss (all tensors)"),
            report.max_relative_error,
            GRADIENT_TOL,
        ));
    }
    Ok(Report {
        suite: "gradients".into(),
        checks,
    })
}

fn expected_spider(p: Pos, action: usize, side: u32) -> Pos {
    let (dx, dy) = [(0, 1), (0, -1), (-1, 0), (1, 0), (0, 0)][action];
    let s = side as i32;
    let q = Pos::new(p.x + dx, p.y + dy);
    if (0..s).contains(&q.x) && (0..s).contains(&q.y) {
        q
    } else {
        p
    }
}

fn manhattan(a: Pos, b: Pos) -> i32 {
    (a.x - b.x).abs() + (a.y - b.y).abs()
}

/// Random-action fuzz of the auto-resetting environment, checking each rule
/// from first principles rather than through the environment's helpers.
pub fn env_fuzz(side: u32, steps: usize, seed: u64) -> Result<Report> {
    let cfg = GridConfig::new(side);
    let s = side as i32;
    let mut env = SpidersFly::new(cfg, ChaCha8Rng::seed_from_u64(seed))?;
    let mut actions_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let in_grid = |p: Pos| (0..s).contains(&p.x) && (0..s).contains(&p.y);
    let start_ok = |st: &EnvState| {
        st.spiders
            .iter()
            .all(|&sp| manhattan(sp, st.fly) > cfg.min_start_distance as i32)
    };
    let (
        mut unsafe_fly,
        mut off_grid,
        mut bad_reward,
        mut catch_mismatch,
        mut bad_start,
        mut bad_move,
    ) = (0usize, 0usize, 0usize, 0usize, 0usize, 0usize);
    let mut resets = 1usize;
    bad_start += usize::from(!start_ok(env.state()));
    for _ in 0..steps {
        let before = *env.state();
        let actions: Vec<usize> = (0..NUM_SPIDERS)
            .map(|_| actions_rng.gen_range(0..NUM_MOVES))
            .collect();
        let out = env.step(&actions)?;
        let after = out.state;
        let moved: Vec<Pos> = (0..NUM_SPIDERS)
            .map(|i| expected_spider(before.spiders[i], actions[i], side))
            .collect();
        bad_move += usize::from(moved != after.spiders.to_vec());
        off_grid += after
            .spiders
            .iter()
            .chain([&after.fly])
            .filter(|&&p| !in_grid(p))
            .count();
        let co_located = after.spiders.iter().any(|&p| p == after.fly);
        bad_reward += usize::from(out.reward != 0.0 && out.reward != CATCH_REWARD);
        catch_mismatch += usize::from((out.reward == CATCH_REWARD) != co_located);
        if !co_located {
            let safe = |p: Pos| in_grid(p) && moved.iter().all(|&sp| manhattan(sp, p) > 1);
            let neighbours = [(0, 1), (0, -1), (-1, 0), (1, 0)]
                .map(|(dx, dy)| Pos::new(before.fly.x + dx, before.fly.y + dy));
            let ok = if after.fly == before.fly {
                !neighbours.iter().any(|&p| safe(p))
            } else {
                neighbours.contains(&after.fly) && safe(after.fly)
            };
            unsafe_fly += usize::from(!ok);
        }
        if out.done {
            resets += 1;
            bad_start += usize::from(!start_ok(env.state()));
        }
    }
    let count =
        |name: &str, n: usize| Check::at_most(format!("{name} over {steps} steps"), n as f64, 0.0);
    Ok(Report {
        suite: "env".into(),
        checks: vec![
            count("fly moves violating the safe rule", unsafe_fly),
            count("units outside the grid", off_grid),
            count("spider moves differing from the move table", bad_move),
            count("rewards outside {0, 10}", bad_reward),
            count(
                "reward 10 without co-location or co-location without reward",
                catch_mismatch,
            ),
            Check::at_most(
                format!("starts violating the distance constraint ({resets} starts)"),
                bad_start as f64,
                0.0,
            ),
        ],
    })
}
