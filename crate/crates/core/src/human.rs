//! Boltzmann-rational simulated humans and the reward prior used by the
//! theory checks.

use std::cell::RefCell;
use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config, Error, Result};
use crate::grid::{Direction, GridConfig, GridState, NUM_HUMAN_ACTIONS};
use crate::mdp::{random_simplex, sample_index, Policy, TabularMdp};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardVector {
    pub values: Vec<f64>,
}

/// Which form of the Dirichlet skill-coverage prior to draw from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RewardPrior {
    /// `R(s) = (1 - gamma) x_s - 1/|S|`; sums to `-gamma`.
    MeanOffset,
    /// `R(s) = (1 - gamma) x_s`; keeps every value in `[0, 1]`.
    #[default]
    Nonnegative,
}

/// `x ~ Dirichlet(1, ..., 1)` mapped through the selected prior.
pub fn sample_reward_prior<R: Rng + ?Sized>(
    num_states: usize,
    gamma: f64,
    prior: RewardPrior,
    rng: &mut R,
) -> RewardVector {
    let x = random_simplex(num_states, 1.0, rng);
    let offset = match prior {
        RewardPrior::MeanOffset => 1.0 / num_states as f64,
        RewardPrior::Nonnegative => 0.0,
    };
    RewardVector {
        values: x.into_iter().map(|x| (1.0 - gamma) * x - offset).collect(),
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SoftSolution {
    /// Row-major `|S| x |A^H|`.
    pub q_values: Vec<f64>,
    pub values: Vec<f64>,
    pub policy: Policy,
    pub beta: f64,
    pub bellman_residual: f64,
    pub iterations: usize,
    #[serde(skip)]
    pub residual_history: Vec<f64>,
}

impl SoftSolution {
    pub fn q(&self, s: usize, a: usize) -> f64 {
        self.q_values[s * self.policy.num_actions() + a]
    }
}

pub const DEFAULT_TOL: f64 = 1e-8;
pub const DEFAULT_MAX_ITERS: usize = 10_000;

/// `softmax(beta * q)` written into `out`.
pub fn boltzmann(q: &[f64], beta: f64, out: &mut [f64]) {
    let m = q.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let mut z = 0.0;
    for (o, &v) in out.iter_mut().zip(q) {
        *o = (beta * (v - m)).exp();
        z += *o;
    }
    for o in out.iter_mut() {
        *o /= z;
    }
}

/// Synchronous sweeps of
/// `Q(s,a) = R(s) + gamma sum_s' Pbar(s'|s,a) V(s')`, `V(s) = sum_a pi(a|s) Q(s,a)`,
/// `pi = softmax(beta Q)`, with `Pbar` the robot-marginalized dynamics.
pub fn soft_value_iteration(
    mdp: &TabularMdp,
    pi_r: &Policy,
    reward: &RewardVector,
    beta: f64,
    gamma: f64,
    tol: f64,
    max_iters: usize,
) -> Result<SoftSolution> {
    if !(beta >= 0.0) {
        return config(format!("beta {beta} must be nonnegative"));
    }
    if !(gamma > 0.0 && gamma < 1.0) {
        return config(format!("gamma {gamma} not in (0,1)"));
    }
    mdp.check_robot_policy(pi_r)?;
    let (ns, na) = (mdp.num_states(), mdp.num_human_actions());
    if reward.values.len() != ns {
        return config("reward length does not match num_states");
    }
    // Sparse rows of Pbar.
    let pbar: Vec<Vec<(usize, f64)>> = (0..ns)
        .flat_map(|s| (0..na).map(move |a| (s, a)))
        .map(|(s, a)| {
            mdp.human_transition(pi_r, s, a)
                .into_iter()
                .enumerate()
                .filter(|&(_, p)| p > 0.0)
                .collect()
        })
        .collect();
    let mut q = vec![0.0; ns * na];
    let mut v = vec![0.0; ns];
    let mut pi = vec![1.0 / na as f64; ns * na];
    let mut history = Vec::new();
    for it in 1..=max_iters {
        let mut residual: f64 = 0.0;
        let mut q_new = vec![0.0; ns * na];
        for (i, row) in pbar.iter().enumerate() {
            let s = i / na;
            let next: f64 = row.iter().map(|&(s2, p)| p * v[s2]).sum();
            q_new[i] = reward.values[s] + gamma * next;
            residual = residual.max((q_new[i] - q[i]).abs());
        }
        q = q_new;
        for s in 0..ns {
            let (qs, ps) = (&q[s * na..(s + 1) * na], &mut pi[s * na..(s + 1) * na]);
            boltzmann(qs, beta, ps);
            v[s] = qs.iter().zip(ps.iter()).map(|(a, b)| a * b).sum();
        }
        if !residual.is_finite() {
            return Err(Error::Numeric("soft value iteration diverged".into()));
        }
        history.push(residual);
        if residual < tol {
            return Ok(SoftSolution {
                q_values: q,
                values: v,
                policy: Policy::new(ns, na, pi)?,
                beta,
                bellman_residual: residual,
                iterations: it,
                residual_history: history,
            });
        }
    }
    Err(Error::Numeric(format!(
        "soft value iteration did not converge in {max_iters} sweeps (residual {:.3e})",
        history.last().copied().unwrap_or(f64::NAN)
    )))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub mean: f64,
    pub std_err: f64,
    pub n: usize,
}

impl Estimate {
    pub fn from_samples(xs: &[f64]) -> Self {
        let n = xs.len();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let std_err = if n > 1 {
            let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            (var / n as f64).sqrt()
        } else {
            0.0
        };
        Self { mean, std_err, n }
    }
}

/// Average human return `E_R[ sum_s p0(s) V_R(s) ]`, where each sampled reward
/// induces its own Boltzmann policy.
pub fn expected_human_return<R: Rng + ?Sized>(
    mdp: &TabularMdp,
    pi_r: &Policy,
    beta: f64,
    gamma: f64,
    num_reward_samples: usize,
    prior: RewardPrior,
    rng: &mut R,
) -> Result<Estimate> {
    if num_reward_samples == 0 {
        return config("need at least one reward sample");
    }
    let mut xs = Vec::with_capacity(num_reward_samples);
    for _ in 0..num_reward_samples {
        let r = sample_reward_prior(mdp.num_states(), gamma, prior, rng);
        let sol = soft_value_iteration(mdp, pi_r, &r, beta, gamma, DEFAULT_TOL, 1_000_000)?;
        xs.push(initial_value(mdp, &sol));
    }
    Ok(Estimate::from_samples(&xs))
}

pub(crate) fn initial_value(mdp: &TabularMdp, sol: &SoftSolution) -> f64 {
    mdp.initial_dist().iter().zip(&sol.values).map(|(p, v)| p * v).sum()
}

/// Simulated gridworld human: Boltzmann-rational for a goal-indicator reward,
/// re-planned against the current block layout each step with the robot
/// assumed idle. The goal is absorbing and pays 1 per step.
#[derive(Debug)]
pub struct GridHuman {
    pub beta: f64,
    pub gamma: f64,
    cache: RefCell<HashMap<Vec<usize>, std::rc::Rc<Vec<[f64; NUM_HUMAN_ACTIONS]>>>>,
}

const CACHE_LIMIT: usize = 4096;

impl Clone for GridHuman {
    fn clone(&self) -> Self {
        Self::new(self.beta, self.gamma)
    }
}

impl GridHuman {
    pub fn new(beta: f64, gamma: f64) -> Self {
        Self {
            beta,
            gamma,
            cache: RefCell::new(HashMap::new()),
        }
    }

    /// Per-cell action distributions for a fixed block layout.
    pub fn plan(&self, config: &GridConfig, blocks: &[usize]) -> std::rc::Rc<Vec<[f64; NUM_HUMAN_ACTIONS]>> {
        let mut key = blocks.to_vec();
        key.sort_unstable();
        if let Some(p) = self.cache.borrow().get(&key) {
            return p.clone();
        }
        let (_, pi) = grid_soft_values(config, &key, self.beta, self.gamma);
        let pi = std::rc::Rc::new(pi);
        let mut cache = self.cache.borrow_mut();
        if cache.len() >= CACHE_LIMIT {
            cache.clear();
        }
        cache.insert(key, pi.clone());
        pi
    }

    pub fn action_probs(&self, config: &GridConfig, state: &GridState) -> [f64; NUM_HUMAN_ACTIONS] {
        self.plan(config, &state.block_cells)[state.human_cell]
    }

    pub fn act<R: Rng + ?Sized>(&self, config: &GridConfig, state: &GridState, rng: &mut R) -> usize {
        sample_index(&self.action_probs(config, state), rng)
    }
}

/// Soft values and Boltzmann policy over human cells with blocks held fixed.
/// Equivalent to [`soft_value_iteration`] on the cell MDP with an idle robot.
pub fn grid_soft_values(
    config: &GridConfig,
    blocks: &[usize],
    beta: f64,
    gamma: f64,
) -> (Vec<f64>, Vec<[f64; NUM_HUMAN_ACTIONS]>) {
    let n = config.num_cells();
    let succ: Vec<[usize; NUM_HUMAN_ACTIONS]> = (0..n)
        .map(|c| {
            let mut out = [c; NUM_HUMAN_ACTIONS];
            if c != config.goal_cell {
                for (a, dir) in Direction::ALL.iter().enumerate() {
                    if let Some(t) = config.neighbor(c, *dir) {
                        if !blocks.contains(&t) {
                            out[a] = t;
                        }
                    }
                }
            }
            out
        })
        .collect();
    let reward = |c: usize| if c == config.goal_cell { 1.0 } else { 0.0 };
    let mut v = vec![0.0; n];
    let mut q = vec![[0.0; NUM_HUMAN_ACTIONS]; n];
    let mut pi = vec![[1.0 / NUM_HUMAN_ACTIONS as f64; NUM_HUMAN_ACTIONS]; n];
    for _ in 0..DEFAULT_MAX_ITERS {
        let mut residual: f64 = 0.0;
        for c in 0..n {
            for a in 0..NUM_HUMAN_ACTIONS {
                let nq = reward(c) + gamma * v[succ[c][a]];
                residual = residual.max((nq - q[c][a]).abs());
                q[c][a] = nq;
            }
        }
        for c in 0..n {
            boltzmann(&q[c], beta, &mut pi[c]);
            v[c] = q[c].iter().zip(&pi[c]).map(|(a, b)| a * b).sum();
        }
        if residual < DEFAULT_TOL {
            break;
        }
    }
    (v, pi)
}

/// Tabular human policy over an enumerated gridworld, for exact oracles.
pub fn grid_human_policy(human: &GridHuman, tab: &crate::grid::GridTabular) -> Result<Policy> {
    let ns = tab.num_states();
    let mut probs = Vec::with_capacity(ns * NUM_HUMAN_ACTIONS);
    for i in 0..ns {
        let s = tab.state_of(i);
        probs.extend_from_slice(&human.action_probs(&tab.config, &s));
    }
    Policy::new(ns, NUM_HUMAN_ACTIONS, probs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn zero_beta_is_uniform() {
        let mut r = rng(1);
        let mdp = TabularMdp::random(4, 3, 2, 1.0, &mut r).unwrap();
        let reward = sample_reward_prior(4, 0.9, RewardPrior::MeanOffset, &mut r);
        let sol = soft_value_iteration(&mdp, &Policy::uniform(4, 2), &reward, 0.0, 0.9, 1e-10, 10_000).unwrap();
        for s in 0..4 {
            for a in 0..3 {
                assert!((sol.policy.prob(s, a) - 1.0 / 3.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn single_state_geometric_value() {
        let mdp = TabularMdp::deterministic(1, 2, 1, |_, _, _| 0, vec![1.0]).unwrap();
        let r = RewardVector { values: vec![0.3] };
        let sol = soft_value_iteration(&mdp, &Policy::uniform(1, 1), &r, 2.0, 0.8, 1e-12, 10_000).unwrap();
        assert!((sol.values[0] - 0.3 / 0.2).abs() < 1e-9);
        assert!(sol.bellman_residual < 1e-12);
    }

    #[test]
    fn high_beta_matches_classical_value_iteration() {
        // two states, action 1 moves to the goal state 1 (absorbing), action 0 stays
        let mdp = TabularMdp::deterministic(2, 2, 1, |s, a, _| if s == 1 || a == 1 { 1 } else { 0 }, vec![1.0, 0.0]).unwrap();
        let r = RewardVector { values: vec![0.0, 1.0] };
        let gamma = 0.9;
        let sol = soft_value_iteration(&mdp, &Policy::uniform(2, 1), &r, 50.0, gamma, 1e-10, 10_000).unwrap();
        // classical VI
        let mut v = [0.0f64; 2];
        for _ in 0..2000 {
            let mut nv = [0.0; 2];
            for s in 0..2 {
                nv[s] = (0..2)
                    .map(|a| {
                        let s2 = if s == 1 || a == 1 { 1 } else { 0 };
                        r.values[s] + gamma * v[s2]
                    })
                    .fold(f64::NEG_INFINITY, f64::max);
            }
            v = nv;
        }
        let greedy0 = if gamma * v[1] > gamma * v[0] { 1 } else { 0 };
        assert_eq!(greedy0, 1);
        assert!(sol.policy.prob(0, greedy0) > 0.99);
    }

    #[test]
    fn reward_prior_identities() {
        let mut r = rng(4);
        let one = sample_reward_prior(1, 0.7, RewardPrior::MeanOffset, &mut r);
        assert!((one.values[0] + 0.7).abs() < 1e-12);
        for _ in 0..100 {
            let x = sample_reward_prior(6, 0.9, RewardPrior::MeanOffset, &mut r);
            assert!((x.values.iter().sum::<f64>() + 0.9).abs() < 1e-9);
            let y = sample_reward_prior(6, 0.9, RewardPrior::Nonnegative, &mut r);
            assert!(y.values.iter().all(|&v| (0.0..=0.1 + 1e-12).contains(&v)));
        }
    }

    #[test]
    fn nonnegative_prior_moments() {
        let mut r = rng(5);
        let gamma = 0.5;
        let n = 100_000;
        let mut sums = [0.0; 3];
        let mut sq = [0.0; 3];
        for _ in 0..n {
            let x = sample_reward_prior(3, gamma, RewardPrior::Nonnegative, &mut r);
            for i in 0..3 {
                sums[i] += x.values[i];
                sq[i] += x.values[i] * x.values[i];
            }
        }
        for i in 0..3 {
            let mean = sums[i] / n as f64;
            let se = ((sq[i] / n as f64 - mean * mean) / n as f64).sqrt();
            assert!((mean - (1.0 - gamma) / 3.0).abs() < 3.0 * se, "{mean}");
        }
    }

    #[test]
    fn single_state_expected_return_is_one() {
        let mdp = TabularMdp::deterministic(1, 3, 2, |_, _, _| 0, vec![1.0]).unwrap();
        let est = expected_human_return(&mdp, &Policy::uniform(1, 2), 1.5, 0.9, 10, RewardPrior::Nonnegative, &mut rng(1)).unwrap();
        assert!((est.mean - 1.0).abs() < 1e-6);
    }

    #[test]
    fn zero_beta_return_matches_policy_evaluation() {
        let mut r = rng(9);
        let mdp = TabularMdp::random(4, 2, 2, 1.0, &mut r).unwrap();
        let pi_r = Policy::random(4, 2, &mut r);
        let gamma = 0.8;
        let est = expected_human_return(&mdp, &pi_r, 0.0, gamma, 50, RewardPrior::Nonnegative, &mut rng(77)).unwrap();
        // replay the same reward draws, evaluate the uniform human exactly
        let mut r2 = rng(77);
        let pi_h = Policy::uniform(4, 2);
        let mut xs = vec![];
        for _ in 0..50 {
            let rew = sample_reward_prior(4, gamma, RewardPrior::Nonnegative, &mut r2);
            let t = crate::mdp::marginal_chain(&mdp, &pi_h, &pi_r).unwrap();
            let a = nalgebra::DMatrix::<f64>::identity(4, 4) - t * gamma;
            let v = a.lu().solve(&nalgebra::DVector::from_vec(rew.values)).unwrap();
            xs.push(mdp.initial_dist().iter().zip(v.iter()).map(|(p, v)| p * v).sum());
        }
        let exact = Estimate::from_samples(&xs);
        assert!((exact.mean - est.mean).abs() < 1e-6);
    }

    #[test]
    fn standard_error_shrinks_like_inverse_sqrt() {
        let mut r = rng(3);
        let mdp = TabularMdp::random(3, 2, 1, 1.0, &mut r).unwrap();
        let pi_r = Policy::uniform(3, 1);
        let ns = [100usize, 1000, 10_000];
        let ses: Vec<f64> = ns
            .iter()
            .map(|&n| {
                expected_human_return(&mdp, &pi_r, 1.0, 0.5, n, RewardPrior::Nonnegative, &mut rng(n as u64))
                    .unwrap()
                    .std_err
            })
            .collect();
        // slope of log se against log n
        let xs: Vec<f64> = ns.iter().map(|&n| (n as f64).ln()).collect();
        let ys: Vec<f64> = ses.iter().map(|s| s.ln()).collect();
        let (mx, my) = (xs.iter().sum::<f64>() / 3.0, ys.iter().sum::<f64>() / 3.0);
        let slope = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum::<f64>()
            / xs.iter().map(|x| (x - mx).powi(2)).sum::<f64>();
        assert!((slope + 0.5).abs() < 0.1, "slope {slope}");
    }

    #[test]
    fn beta_monotonicity_on_bandit() {
        let mdp = TabularMdp::deterministic(1, 2, 1, |_, _, _| 0, vec![1.0]).unwrap();
        let r = RewardVector { values: vec![0.5] };
        // bandit: Q differs only through a per-action reward, so build Q directly
        let q = [0.2, 0.7];
        let mut last = 0.0;
        for beta in [0.0, 0.5, 1.0, 2.0, 5.0, 50.0] {
            let mut p = [0.0; 2];
            boltzmann(&q, beta, &mut p);
            assert!(p[1] >= last);
            last = p[1];
        }
        let sol = soft_value_iteration(&mdp, &Policy::uniform(1, 1), &r, 3.0, 0.5, 1e-12, 1000).unwrap();
        assert!((sol.policy.prob(0, 0) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn residuals_contract_on_random_mdps() {
        let mut r = rng(21);
        for _ in 0..20 {
            let mdp = TabularMdp::random(6, 3, 2, 1.0, &mut r).unwrap();
            let pi_r = Policy::random(6, 2, &mut r);
            let rew = sample_reward_prior(6, 0.95, RewardPrior::Nonnegative, &mut r);
            let sol = soft_value_iteration(&mdp, &pi_r, &rew, 2.0, 0.95, 1e-10, 10_000).unwrap();
            for w in sol.residual_history[10..].windows(2) {
                assert!(w[1] <= w[0] + 1e-15);
            }
            assert!(sol.values.iter().all(|&v| (-1e-9..=1.0 + 1e-9).contains(&v)));
        }
    }

    #[test]
    fn non_convergence_reports_residual() {
        let mdp = TabularMdp::deterministic(1, 1, 1, |_, _, _| 0, vec![1.0]).unwrap();
        let r = RewardVector { values: vec![1.0] };
        match soft_value_iteration(&mdp, &Policy::uniform(1, 1), &r, 1.0, 0.99, 1e-12, 5) {
            Err(Error::Numeric(msg)) => assert!(msg.contains("residual")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn grid_human_matches_generic_solver() {
        let config = GridConfig::new(4, 3, 2, 11, 0).unwrap();
        let blocks = vec![5, 6];
        let (v, pi) = grid_soft_values(&config, &blocks, 5.0, 0.9);
        // cell MDP with an idle robot
        let n = config.num_cells();
        let mdp = TabularMdp::deterministic(
            n,
            NUM_HUMAN_ACTIONS,
            1,
            |c, a, _| {
                if c == config.goal_cell {
                    return c;
                }
                Direction::from_index(a)
                    .and_then(|d| config.neighbor(c, d))
                    .filter(|t| !blocks.contains(t))
                    .unwrap_or(c)
            },
            vec![1.0 / n as f64; n],
        )
        .unwrap();
        let mut rv = vec![0.0; n];
        rv[config.goal_cell] = 1.0;
        let sol = soft_value_iteration(&mdp, &Policy::uniform(n, 1), &RewardVector { values: rv }, 5.0, 0.9, 1e-10, 10_000).unwrap();
        for c in 0..n {
            assert!((v[c] - sol.values[c]).abs() < 1e-6);
            for a in 0..NUM_HUMAN_ACTIONS {
                assert!((pi[c][a] - sol.policy.prob(c, a)).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn grid_human_heads_for_goal() {
        let config = GridConfig::new(5, 5, 0, 24, 0).unwrap();
        let h = GridHuman::new(50.0, 0.9);
        let s = GridState {
            human_cell: 0,
            block_cells: vec![],
            steps_elapsed: 0,
            done: false,
        };
        let p = h.action_probs(&config, &s);
        let toward = p[Direction::Right as usize] + p[Direction::Down as usize];
        assert!(toward > 0.95, "{p:?}");
    }
}
