//! Comparison assistants for the gridworld.
//!
//! The AvE proxy scores each robot action by how spread out the human's
//! position becomes under random play afterwards. Every candidate action is
//! scored against the same human action sequences, so actions with identical
//! effects tie exactly and the lowest index wins.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::agent::argmax;
use crate::error::{Error, Result};
use crate::grid::{grid_step, grid_to_tabular, GridConfig, GridState, GridTabular, NOOP, NUM_HUMAN_ACTIONS};
use crate::human::{grid_human_policy, GridHuman};
use crate::mdp::{DiscountSpec, Policy};
use crate::oracle::effective_empowerment_fast;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct AveConfig {
    pub num_rollouts: usize,
    pub rollout_horizon: usize,
}

impl Default for AveConfig {
    fn default() -> Self {
        Self {
            num_rollouts: 64,
            rollout_horizon: 10,
        }
    }
}

impl AveConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_rollouts < 2 || self.rollout_horizon == 0 {
            return Err(Error::Config("AvE needs at least 2 rollouts of length at least 1".into()));
        }
        Ok(())
    }
}

/// Trace of the covariance of the final `(x, y)` positions, population form.
pub fn position_spread(config: &GridConfig, cells: &[usize]) -> f64 {
    let n = cells.len() as f64;
    let xy: Vec<(f64, f64)> = cells
        .iter()
        .map(|&c| {
            let (x, y) = config.xy(c);
            (x as f64, y as f64)
        })
        .collect();
    let mx = xy.iter().map(|p| p.0).sum::<f64>() / n;
    let my = xy.iter().map(|p| p.1).sum::<f64>() / n;
    xy.iter().map(|p| (p.0 - mx).powi(2) + (p.1 - my).powi(2)).sum::<f64>() / n
}

/// Final human cell after `a_r` then idle robot steps, the human playing
/// `human_actions` in order. Reaching the goal ends the rollout there.
fn final_cell(state: &GridState, a_r: usize, human_actions: &[usize], config: &GridConfig) -> Result<usize> {
    let mut s = state.clone();
    for (t, &a_h) in human_actions.iter().enumerate() {
        if s.done {
            break;
        }
        s = grid_step(&s, a_h, if t == 0 { a_r } else { NOOP }, config)?;
    }
    Ok(s.human_cell)
}

fn unbounded(config: &GridConfig) -> GridConfig {
    GridConfig {
        horizon: usize::MAX,
        ..config.clone()
    }
}

fn check_live(state: &GridState) -> Result<()> {
    if state.done {
        return Err(Error::Usage("cannot choose an action in a finished episode".into()));
    }
    Ok(())
}

/// Per-rollout spread contributions `(x - mean_x)^2 + (y - mean_y)^2` of
/// every robot action; the score is their mean.
fn contributions(state: &GridState, config: &GridConfig, seqs: &[Vec<usize>]) -> Result<Vec<Vec<f64>>> {
    let cfg = unbounded(config);
    (0..config.num_robot_actions())
        .map(|a_r| {
            let xy = seqs
                .iter()
                .map(|seq| {
                    final_cell(state, a_r, seq, &cfg).map(|c| {
                        let (x, y) = config.xy(c);
                        (x as f64, y as f64)
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let n = xy.len() as f64;
            let mx = xy.iter().map(|p| p.0).sum::<f64>() / n;
            let my = xy.iter().map(|p| p.1).sum::<f64>() / n;
            Ok(xy.iter().map(|p| (p.0 - mx).powi(2) + (p.1 - my).powi(2)).collect())
        })
        .collect()
}

fn random_sequences<R: Rng + ?Sized>(ave: &AveConfig, rng: &mut R) -> Vec<Vec<usize>> {
    (0..ave.num_rollouts)
        .map(|_| (0..ave.rollout_horizon).map(|_| rng.gen_range(0..NUM_HUMAN_ACTIONS)).collect())
        .collect()
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Spread score of every robot action from one shared set of random human
/// action sequences.
pub fn ave_scores<R: Rng + ?Sized>(state: &GridState, config: &GridConfig, ave: &AveConfig, rng: &mut R) -> Result<Vec<f64>> {
    ave.validate()?;
    check_live(state)?;
    let seqs = random_sequences(ave, rng);
    Ok(contributions(state, config, &seqs)?.iter().map(|c| mean(c)).collect())
}

/// As [`ave_scores`] but over all `5^T` human action sequences.
pub fn ave_scores_exhaustive(state: &GridState, config: &GridConfig, horizon: usize) -> Result<Vec<f64>> {
    check_live(state)?;
    if horizon == 0 || horizon > 8 {
        return Err(Error::Config("exhaustive AvE supports horizons 1..=8".into()));
    }
    let cfg = unbounded(config);
    let total = NUM_HUMAN_ACTIONS.pow(horizon as u32);
    let seqs: Vec<Vec<usize>> = (0..total)
        .map(|mut k| {
            (0..horizon)
                .map(|_| {
                    let a = k % NUM_HUMAN_ACTIONS;
                    k /= NUM_HUMAN_ACTIONS;
                    a
                })
                .collect()
        })
        .collect();
    (0..config.num_robot_actions())
        .map(|a_r| {
            let finals = seqs
                .iter()
                .map(|seq| final_cell(state, a_r, seq, &cfg))
                .collect::<Result<Vec<_>>>()?;
            Ok(position_spread(config, &finals))
        })
        .collect()
}

/// Robot action with the largest spread score; lowest index on ties.
pub fn ave_action<R: Rng + ?Sized>(state: &GridState, config: &GridConfig, ave: &AveConfig, rng: &mut R) -> Result<usize> {
    Ok(argmax(&ave_scores(state, config, ave, rng)?))
}

/// Uniform over the `4N + 1` robot actions.
pub fn random_action<R: Rng + ?Sized>(config: &GridConfig, rng: &mut R) -> usize {
    rng.gen_range(0..config.num_robot_actions())
}

/// One-step lookahead on exact empowerment: picks the robot action that
/// maximizes the expected conditional MI of the next state, with MI computed
/// under the simulated human and an idle robot. Needs an enumerable grid.
#[derive(Clone, Debug)]
pub struct OracleLookahead {
    pub tab: GridTabular,
    pub pi_h: Policy,
    pub per_state_mi: Vec<f64>,
}

impl OracleLookahead {
    pub fn new(config: &GridConfig, human: &GridHuman, gamma_future: f64) -> Result<Self> {
        let tab = grid_to_tabular(config)?;
        let pi_h = grid_human_policy(human, &tab)?;
        let idle = Policy::deterministic(tab.num_states(), config.num_robot_actions(), |_| NOOP)?;
        let report = effective_empowerment_fast(&tab.mdp, &pi_h, &idle, &DiscountSpec::future(gamma_future)?)?;
        Ok(Self {
            tab,
            pi_h,
            per_state_mi: report.per_state_mi,
        })
    }

    pub fn scores(&self, state: &GridState) -> Result<Vec<f64>> {
        check_live(state)?;
        let config = unbounded(&self.tab.config);
        let i = self
            .tab
            .index_of(state)
            .ok_or_else(|| Error::Config("state is not in the enumeration".into()))?;
        (0..config.num_robot_actions())
            .map(|a_r| {
                let mut v = 0.0;
                for a_h in 0..NUM_HUMAN_ACTIONS {
                    let next = grid_step(state, a_h, a_r, &config)?;
                    let j = self.tab.index_of(&next).expect("closed under steps");
                    v += self.pi_h.prob(i, a_h) * self.per_state_mi[j];
                }
                Ok(v)
            })
            .collect()
    }

    pub fn action(&self, state: &GridState) -> Result<usize> {
        Ok(argmax(&self.scores(state)?))
    }
}
