//! Exact information quantities on tabular MDPs: conditional mutual
//! information between the human's action and the geometric future state,
//! effective empowerment, the KL geometry of the state-marginal polytope,
//! per-state channel capacity, and numeric checks of the entropy and
//! empowerment-reward bounds. All quantities are in nats.

use std::f64::consts::E;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config, Error, Result};
use crate::human::{initial_value, sample_reward_prior, soft_value_iteration, Estimate, RewardPrior, DEFAULT_TOL};
use crate::mdp::{Condition, DiscountSpec, OccupancySolver, Policy, TabularMdp};

/// `KL(p || q)` with `0 log 0 = 0`.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(&pi, _)| pi > 0.0)
        .map(|(&pi, &qi)| if qi > 0.0 { pi * (pi / qi).ln() } else { f64::INFINITY })
        .sum::<f64>()
        .max(0.0)
}

pub fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&x| x > 0.0).map(|&x| x * x.ln()).sum::<f64>()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmpowermentReport {
    pub per_state_mi: Vec<f64>,
    pub per_state_dmax: Vec<f64>,
    pub per_state_capacity: Vec<f64>,
    pub total_empowerment: f64,
    pub visitation: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolytopeStats {
    /// `KL(rho(.|s,a) || rho(.|s))` per human action.
    pub kls: Vec<f64>,
    pub d_max: f64,
}

/// Per-action conditionals and the policy-averaged marginal at one state.
fn state_channel(solver: &OccupancySolver<'_>, mdp: &TabularMdp, state: usize) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
    let cond: Result<Vec<_>> = (0..mdp.num_human_actions())
        .map(|a| solver.occupancy(Condition::human(state, a)))
        .collect();
    Ok((cond?, solver.occupancy(Condition::state(state))?))
}

fn stats_from_channel(pi_h: &Policy, state: usize, cond: &[Vec<f64>], marginal: &[f64]) -> (f64, PolytopeStats) {
    let kls: Vec<f64> = cond.iter().map(|c| kl_divergence(c, marginal)).collect();
    let mi = kls.iter().enumerate().map(|(a, k)| pi_h.prob(state, a) * k).sum();
    let d_max = kls.iter().copied().fold(0.0, f64::max);
    (mi, PolytopeStats { kls, d_max })
}

fn check_state(mdp: &TabularMdp, state: usize) -> Result<()> {
    if state >= mdp.num_states() {
        return config(format!("state {state} out of range"));
    }
    Ok(())
}

/// `I(a^H; s+ | s) = sum_a pi_h(a|s) KL(rho(.|s,a) || rho(.|s))`.
pub fn conditional_mi(mdp: &TabularMdp, pi_h: &Policy, pi_r: &Policy, spec: &DiscountSpec, state: usize) -> Result<f64> {
    Ok(polytope_with_mi(mdp, pi_h, pi_r, spec, state)?.0)
}

/// Per-action KLs from the average future-state distribution and their maximum.
pub fn polytope_stats(mdp: &TabularMdp, pi_h: &Policy, pi_r: &Policy, spec: &DiscountSpec, state: usize) -> Result<PolytopeStats> {
    Ok(polytope_with_mi(mdp, pi_h, pi_r, spec, state)?.1)
}

fn polytope_with_mi(
    mdp: &TabularMdp,
    pi_h: &Policy,
    pi_r: &Policy,
    spec: &DiscountSpec,
    state: usize,
) -> Result<(f64, PolytopeStats)> {
    spec.validate()?;
    check_state(mdp, state)?;
    let solver = OccupancySolver::new(mdp, pi_h, pi_r, spec.gamma_future)?;
    let (cond, marg) = state_channel(&solver, mdp, state)?;
    Ok(stats_from_channel(pi_h, state, &cond, &marg))
}

/// `I(a^H; s+ | s, a^R)` averaged over `a^R ~ pi_r(.|s)`: the quantity the
/// robot-conditioned encoders estimate.
pub fn conditional_mi_given_robot(
    mdp: &TabularMdp,
    pi_h: &Policy,
    pi_r: &Policy,
    spec: &DiscountSpec,
    state: usize,
) -> Result<f64> {
    spec.validate()?;
    check_state(mdp, state)?;
    let solver = OccupancySolver::new(mdp, pi_h, pi_r, spec.gamma_future)?;
    let mut total = 0.0;
    for ar in 0..mdp.num_robot_actions() {
        let wr = pi_r.prob(state, ar);
        if wr == 0.0 {
            continue;
        }
        let cond: Vec<Vec<f64>> = (0..mdp.num_human_actions())
            .map(|ah| solver.occupancy(Condition::joint(state, ah, ar)))
            .collect::<Result<_>>()?;
        let mut marg = vec![0.0; mdp.num_states()];
        for (ah, c) in cond.iter().enumerate() {
            for (m, v) in marg.iter_mut().zip(c) {
                *m += pi_h.prob(state, ah) * v;
            }
        }
        let mi: f64 = cond
            .iter()
            .enumerate()
            .map(|(ah, c)| pi_h.prob(state, ah) * kl_divergence(c, &marg))
            .sum();
        total += wr * mi;
    }
    Ok(total)
}

/// Effective empowerment `sum_s d(s) I(a^H; s+ | s)` with the unnormalized
/// visitation `d`, plus the per-state geometry and capacities.
pub fn effective_empowerment(mdp: &TabularMdp, pi_h: &Policy, pi_r: &Policy, spec: &DiscountSpec) -> Result<EmpowermentReport> {
    report(mdp, pi_h, pi_r, spec, true)
}

/// As [`effective_empowerment`] but skipping the per-state capacity solves
/// (`per_state_capacity` is left empty).
pub fn effective_empowerment_fast(mdp: &TabularMdp, pi_h: &Policy, pi_r: &Policy, spec: &DiscountSpec) -> Result<EmpowermentReport> {
    report(mdp, pi_h, pi_r, spec, false)
}

fn report(mdp: &TabularMdp, pi_h: &Policy, pi_r: &Policy, spec: &DiscountSpec, with_capacity: bool) -> Result<EmpowermentReport> {
    spec.validate()?;
    let solver = OccupancySolver::new(mdp, pi_h, pi_r, spec.gamma_future)?;
    let visitation = if spec.visitation_gamma() == spec.gamma_future {
        solver.visitation()?
    } else {
        OccupancySolver::new(mdp, pi_h, pi_r, spec.visitation_gamma())?.visitation()?
    };
    let ns = mdp.num_states();
    let mut per_state_mi = Vec::with_capacity(ns);
    let mut per_state_dmax = Vec::with_capacity(ns);
    let mut per_state_capacity = Vec::new();
    for s in 0..ns {
        let (cond, marg) = state_channel(&solver, mdp, s)?;
        let (mi, stats) = stats_from_channel(pi_h, s, &cond, &marg);
        per_state_mi.push(mi);
        per_state_dmax.push(stats.d_max);
        if with_capacity {
            per_state_capacity.push(blahut_arimoto(&cond, DEFAULT_CAPACITY_TOL, BA_MAX_ITERS)?.capacity);
        }
    }
    let total_empowerment = visitation.iter().zip(&per_state_mi).map(|(d, i)| d * i).sum();
    Ok(EmpowermentReport {
        per_state_mi,
        per_state_dmax,
        per_state_capacity,
        total_empowerment,
        visitation,
    })
}

pub const DEFAULT_CAPACITY_TOL: f64 = 1e-10;
pub const BA_MAX_ITERS: usize = 2_000_000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Capacity {
    pub capacity: f64,
    /// Capacity-achieving input distribution.
    pub input: Vec<f64>,
    /// `KL(W(.|x) || q)` at the returned input, per input symbol.
    pub kls: Vec<f64>,
    pub iterations: usize,
}

/// Blahut–Arimoto on a discrete channel given as rows `W(.|x)`.
///
/// Stops once `max_x KL_x - sum_x p(x) KL_x < tol`; the two sides bracket the
/// capacity, so the returned mutual information is within `tol` of it and
/// every input with mass `p(x)` has `KL_x` within `tol / p(x)` of it.
pub fn blahut_arimoto(channel: &[Vec<f64>], tol: f64, max_iters: usize) -> Result<Capacity> {
    if !(tol > 0.0) {
        return config("capacity tolerance must be positive");
    }
    let k = channel.len();
    if k == 0 {
        return config("channel needs at least one input");
    }
    let m = channel[0].len();
    let mut p = vec![1.0 / k as f64; k];
    let mut q = vec![0.0; m];
    let mut kls = vec![0.0; k];
    for it in 1..=max_iters {
        q.iter_mut().for_each(|v| *v = 0.0);
        for (px, row) in p.iter().zip(channel) {
            for (qy, w) in q.iter_mut().zip(row) {
                *qy += px * w;
            }
        }
        for (kl, row) in kls.iter_mut().zip(channel) {
            *kl = kl_divergence(row, &q);
        }
        let lower: f64 = p.iter().zip(&kls).map(|(a, b)| a * b).sum();
        let upper = kls.iter().copied().fold(0.0, f64::max);
        if upper - lower < tol {
            return Ok(Capacity {
                capacity: lower,
                input: p,
                kls,
                iterations: it,
            });
        }
        // p(x) <- p(x) exp(KL_x) / Z, shifted by the max for stability
        let mut z = 0.0;
        for (px, kl) in p.iter_mut().zip(&kls) {
            *px *= (kl - upper).exp();
            z += *px;
        }
        p.iter_mut().for_each(|v| *v /= z);
    }
    Err(Error::Numeric(format!("Blahut-Arimoto did not converge in {max_iters} iterations")))
}

/// Capacity of the channel `a -> rho(. | s, a)` at one state. The human's
/// current-step input distribution is free; later steps follow `pi_h`.
pub fn channel_capacity(
    mdp: &TabularMdp,
    pi_h: &Policy,
    pi_r: &Policy,
    spec: &DiscountSpec,
    state: usize,
    tol: f64,
) -> Result<Capacity> {
    spec.validate()?;
    check_state(mdp, state)?;
    let solver = OccupancySolver::new(mdp, pi_h, pi_r, spec.gamma_future)?;
    let (cond, _) = state_channel(&solver, mdp, state)?;
    blahut_arimoto(&cond, tol, BA_MAX_ITERS)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EntropyBound {
    pub holds: bool,
    /// Softmax entropy `H(p_beta)`.
    pub lhs: f64,
    /// `log k - (beta / e)^2`.
    pub rhs: f64,
}

/// Checks `H(softmax(beta * logits)) >= log k - (beta/e)^2` for logits in
/// `[0, 1]^k`. Defaults to the one-hot worst case `(1, 0, ..., 0)`.
pub fn verify_entropy_bound(k: usize, beta: f64, logits: Option<&[f64]>) -> Result<EntropyBound> {
    if k < 2 {
        return config("need at least two logits");
    }
    if !(beta >= 0.0) {
        return config("beta must be nonnegative");
    }
    let worst: Vec<f64>;
    let logits = match logits {
        Some(l) => {
            if l.len() != k {
                return config(format!("got {} logits for k = {k}", l.len()));
            }
            if l.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return config("logits must lie in [0, 1]");
            }
            l
        }
        None => {
            worst = (0..k).map(|i| if i == 0 { 1.0 } else { 0.0 }).collect();
            &worst
        }
    };
    let mut p = vec![0.0; k];
    crate::human::boltzmann(logits, beta, &mut p);
    let lhs = entropy(&p);
    let rhs = (k as f64).ln() - (beta / E).powi(2);
    Ok(EntropyBound {
        // roundoff allowance for the equality case beta = 0
        holds: lhs >= rhs - 1e-12,
        lhs,
        rhs,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TheoremCheck {
    /// `sqrt(E_R[empowerment])`.
    pub lhs: f64,
    /// `(beta / e) * E_R[V(s0)]`.
    pub rhs: f64,
    pub margin: f64,
    pub empowerment: Estimate,
    pub human_return: Estimate,
}

/// Verifies `reachable from s0 with full support` under a uniform human,
/// returning the states that are never reached.
pub fn unreachable_states(mdp: &TabularMdp, pi_r: &Policy, gamma: f64) -> Result<Vec<usize>> {
    let pi_h = Policy::uniform(mdp.num_states(), mdp.num_human_actions());
    let solver = OccupancySolver::new(mdp, &pi_h, pi_r, gamma)?;
    let mut reach = vec![0.0f64; mdp.num_states()];
    for (s0, &p0) in mdp.initial_dist().iter().enumerate() {
        if p0 == 0.0 {
            continue;
        }
        let rho = solver.occupancy(Condition::state(s0))?;
        for (r, v) in reach.iter_mut().zip(rho) {
            *r = r.max(v);
        }
    }
    Ok(reach.iter().enumerate().filter(|(_, &v)| v <= 1e-12).map(|(s, _)| s).collect())
}

/// Numeric check of `sqrt(E) <= (beta / e) J` at large `gamma`, averaging
/// per-reward empowerment and return over nonnegative Dirichlet rewards.
pub fn verify_theorem_bound<R: Rng + ?Sized>(
    mdp: &TabularMdp,
    pi_r: &Policy,
    beta: f64,
    gamma: f64,
    num_reward_samples: usize,
    rng: &mut R,
) -> Result<TheoremCheck> {
    if gamma < 0.99 || gamma >= 1.0 {
        return Err(Error::Precondition(format!("gamma {gamma} must lie in [0.99, 1)")));
    }
    if !(beta > 0.0) {
        return Err(Error::Precondition("beta must be positive".into()));
    }
    if num_reward_samples == 0 {
        return config("need at least one reward sample");
    }
    mdp.check_robot_policy(pi_r)?;
    let missing = unreachable_states(mdp, pi_r, gamma)?;
    if !missing.is_empty() {
        return Err(Error::Precondition(format!("states {missing:?} are unreachable from the initial distribution")));
    }
    let spec = DiscountSpec::future(gamma)?;
    let mut emp = Vec::with_capacity(num_reward_samples);
    let mut ret = Vec::with_capacity(num_reward_samples);
    for _ in 0..num_reward_samples {
        let r = sample_reward_prior(mdp.num_states(), gamma, RewardPrior::Nonnegative, rng);
        let sol = soft_value_iteration(mdp, pi_r, &r, beta, gamma, DEFAULT_TOL, 2_000_000)?;
        emp.push(effective_empowerment_fast(mdp, &sol.policy, pi_r, &spec)?.total_empowerment);
        ret.push(initial_value(mdp, &sol));
    }
    let empowerment = Estimate::from_samples(&emp);
    let human_return = Estimate::from_samples(&ret);
    let lhs = empowerment.mean.max(0.0).sqrt();
    let rhs = beta / E * human_return.mean;
    Ok(TheoremCheck {
        lhs,
        rhs,
        margin: rhs - lhs,
        empowerment,
        human_return,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub cases: usize,
    pub violations: usize,
    /// Smallest `lhs - rhs` seen.
    pub min_margin: f64,
}

/// The entropy bound over `k` in `2..=64` and `beta` in `0, 0.5, .., 8`,
/// each with the one-hot worst case, uniform logits and `random_per_cell`
/// random logits in `[0, 1]^k`.
pub fn entropy_bound_sweep<R: Rng + ?Sized>(random_per_cell: usize, rng: &mut R) -> Result<SweepSummary> {
    let mut out = SweepSummary {
        cases: 0,
        violations: 0,
        min_margin: f64::INFINITY,
    };
    let mut record = |b: EntropyBound| {
        out.cases += 1;
        out.violations += usize::from(!b.holds);
        out.min_margin = out.min_margin.min(b.lhs - b.rhs);
    };
    for k in 2..=64 {
        for step in 0..=16 {
            let beta = step as f64 * 0.5;
            record(verify_entropy_bound(k, beta, None)?);
            record(verify_entropy_bound(k, beta, Some(&vec![0.5; k]))?);
            for _ in 0..random_per_cell {
                let l: Vec<f64> = (0..k).map(|_| rng.gen::<f64>()).collect();
                record(verify_entropy_bound(k, beta, Some(&l))?);
            }
        }
    }
    Ok(out)
}

/// Random MDP whose every transition row mixes a `Dirichlet(1)` draw with
/// `floor` of uniform mass, so every state reaches every other in one step.
/// Uniform initial distribution.
pub fn ergodic_mdp<R: Rng + ?Sized>(ns: usize, nh: usize, nr: usize, floor: f64, rng: &mut R) -> Result<TabularMdp> {
    if !(floor > 0.0 && floor <= 1.0) {
        return config("uniform floor must lie in (0, 1]");
    }
    let mut t = Vec::with_capacity(ns * nh * nr * ns);
    for _ in 0..ns * nh * nr {
        let row = crate::mdp::random_simplex(ns, 1.0, rng);
        t.extend(row.into_iter().map(|p| (1.0 - floor) * p + floor / ns as f64));
    }
    TabularMdp::new(ns, nh, nr, t, vec![1.0 / ns as f64; ns])
}

/// MDP where human action `a` from state 0 leads to absorbing state `a + 1`.
pub fn absorbing_channel_mdp(k: usize) -> Result<TabularMdp> {
    let mut init = vec![0.0; k + 1];
    init[0] = 1.0;
    TabularMdp::deterministic(k + 1, k, 1, |s, a, _| if s == 0 { a + 1 } else { s }, init)
}
