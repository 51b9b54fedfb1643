//! Joint human/robot tabular MDPs, behavior policies and exact discounted
//! occupancy computations.
//!
//! The geometric future-state variable has support `k >= 1`:
//! `P(K = k) = (1 - gamma) * gamma^(k - 1)`. Every sampler and oracle in the
//! crate uses this convention, so the action taken at time `t` always precedes
//! the sampled future state.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::error::{config, Error, Result};

/// Largest state space handled with dense LU solves.
pub const MAX_DENSE_STATES: usize = 4096;

const PROB_TOL: f64 = 1e-9;

/// Two-agent MDP with transition tensor `P(s' | s, a_h, a_r)`.
///
/// Serialized as
/// `{"num_states", "num_human_actions", "num_robot_actions", "transition": [[[[..]]]], "initial_dist": [..]}`
/// where `transition[s][a_h][a_r]` is the next-state distribution.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MdpJson", into = "MdpJson")]
pub struct TabularMdp {
    num_states: usize,
    num_human_actions: usize,
    num_robot_actions: usize,
    transition: Vec<f64>,
    initial_dist: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct MdpJson {
    num_states: usize,
    num_human_actions: usize,
    num_robot_actions: usize,
    transition: Vec<Vec<Vec<Vec<f64>>>>,
    initial_dist: Vec<f64>,
}

impl TryFrom<MdpJson> for TabularMdp {
    type Error = Error;

    fn try_from(j: MdpJson) -> Result<Self> {
        let (ns, nh, nr) = (j.num_states, j.num_human_actions, j.num_robot_actions);
        if j.transition.len() != ns {
            return config(format!("transition has {} state slices, expected {ns}", j.transition.len()));
        }
        let mut flat = Vec::with_capacity(ns * nh * nr * ns);
        for (s, per_h) in j.transition.iter().enumerate() {
            if per_h.len() != nh {
                return config(format!("transition[{s}] has {} human actions, expected {nh}", per_h.len()));
            }
            for (ah, per_r) in per_h.iter().enumerate() {
                if per_r.len() != nr {
                    return config(format!(
                        "transition[{s}][{ah}] has {} robot actions, expected {nr}",
                        per_r.len()
                    ));
                }
                for (ar, row) in per_r.iter().enumerate() {
                    if row.len() != ns {
                        return config(format!(
                            "transition[{s}][{ah}][{ar}] has length {}, expected {ns}",
                            row.len()
                        ));
                    }
                    flat.extend_from_slice(row);
                }
            }
        }
        TabularMdp::new(ns, nh, nr, flat, j.initial_dist)
    }
}

impl From<TabularMdp> for MdpJson {
    fn from(m: TabularMdp) -> Self {
        let transition = (0..m.num_states)
            .map(|s| {
                (0..m.num_human_actions)
                    .map(|ah| {
                        (0..m.num_robot_actions)
                            .map(|ar| m.next_dist(s, ah, ar).to_vec())
                            .collect()
                    })
                    .collect()
            })
            .collect();
        MdpJson {
            num_states: m.num_states,
            num_human_actions: m.num_human_actions,
            num_robot_actions: m.num_robot_actions,
            transition,
            initial_dist: m.initial_dist,
        }
    }
}

fn check_distribution(p: &[f64], what: &str) -> Result<()> {
    if p.iter().any(|&x| !(x >= 0.0) || !x.is_finite()) {
        return config(format!("{what} has negative or non-finite entries"));
    }
    let sum: f64 = p.iter().sum();
    if (sum - 1.0).abs() > PROB_TOL {
        return config(format!("{what} sums to {sum}, not 1"));
    }
    Ok(())
}

impl TabularMdp {
    /// `transition` is flattened in `[s][a_h][a_r][s']` order.
    pub fn new(
        num_states: usize,
        num_human_actions: usize,
        num_robot_actions: usize,
        transition: Vec<f64>,
        initial_dist: Vec<f64>,
    ) -> Result<Self> {
        if num_states == 0 || num_human_actions == 0 || num_robot_actions == 0 {
            return config("state and action counts must be positive");
        }
        let expected = num_states * num_human_actions * num_robot_actions * num_states;
        if transition.len() != expected {
            return config(format!("transition has {} entries, expected {expected}", transition.len()));
        }
        if initial_dist.len() != num_states {
            return config(format!(
                "initial_dist has length {}, expected {num_states}",
                initial_dist.len()
            ));
        }
        for (i, row) in transition.chunks(num_states).enumerate() {
            let s = i / (num_human_actions * num_robot_actions);
            let ah = (i / num_robot_actions) % num_human_actions;
            let ar = i % num_robot_actions;
            check_distribution(row, &format!("transition[{s}][{ah}][{ar}]"))?;
        }
        check_distribution(&initial_dist, "initial_dist")?;
        Ok(Self {
            num_states,
            num_human_actions,
            num_robot_actions,
            transition,
            initial_dist,
        })
    }

    /// Builds an MDP whose dynamics are a deterministic function of `(s, a_h, a_r)`.
    pub fn deterministic(
        num_states: usize,
        num_human_actions: usize,
        num_robot_actions: usize,
        next: impl Fn(usize, usize, usize) -> usize,
        initial_dist: Vec<f64>,
    ) -> Result<Self> {
        let mut transition = vec![0.0; num_states * num_human_actions * num_robot_actions * num_states];
        for s in 0..num_states {
            for ah in 0..num_human_actions {
                for ar in 0..num_robot_actions {
                    let s2 = next(s, ah, ar);
                    if s2 >= num_states {
                        return config(format!("next state {s2} out of range"));
                    }
                    let base = ((s * num_human_actions + ah) * num_robot_actions + ar) * num_states;
                    transition[base + s2] = 1.0;
                }
            }
        }
        Self::new(num_states, num_human_actions, num_robot_actions, transition, initial_dist)
    }

    /// Random dynamics with every next-state row drawn from a symmetric
    /// Dirichlet(`concentration`). Starts uniformly.
    pub fn random<R: Rng + ?Sized>(
        num_states: usize,
        num_human_actions: usize,
        num_robot_actions: usize,
        concentration: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let rows = num_states * num_human_actions * num_robot_actions;
        let mut transition = Vec::with_capacity(rows * num_states);
        for _ in 0..rows {
            transition.extend(random_simplex(num_states, concentration, rng));
        }
        let init = vec![1.0 / num_states as f64; num_states];
        Self::new(num_states, num_human_actions, num_robot_actions, transition, init)
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn num_human_actions(&self) -> usize {
        self.num_human_actions
    }

    pub fn num_robot_actions(&self) -> usize {
        self.num_robot_actions
    }

    pub fn initial_dist(&self) -> &[f64] {
        &self.initial_dist
    }

    pub fn with_initial_dist(mut self, initial_dist: Vec<f64>) -> Result<Self> {
        if initial_dist.len() != self.num_states {
            return config("initial_dist length does not match num_states");
        }
        check_distribution(&initial_dist, "initial_dist")?;
        self.initial_dist = initial_dist;
        Ok(self)
    }

    /// `P(. | s, a_h, a_r)`.
    pub fn next_dist(&self, s: usize, a_h: usize, a_r: usize) -> &[f64] {
        let base = ((s * self.num_human_actions + a_h) * self.num_robot_actions + a_r) * self.num_states;
        &self.transition[base..base + self.num_states]
    }

    pub fn prob(&self, s: usize, a_h: usize, a_r: usize, s2: usize) -> f64 {
        self.next_dist(s, a_h, a_r)[s2]
    }

    pub fn sample_next<R: Rng + ?Sized>(&self, s: usize, a_h: usize, a_r: usize, rng: &mut R) -> usize {
        sample_index(self.next_dist(s, a_h, a_r), rng)
    }

    pub fn sample_initial<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        sample_index(&self.initial_dist, rng)
    }

    /// Robot-marginalized dynamics `P(s' | s, a_h) = sum_{a_r} pi_r(a_r|s) P(s'|s,a_h,a_r)`.
    pub fn human_transition(&self, pi_r: &Policy, s: usize, a_h: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.num_states];
        for ar in 0..self.num_robot_actions {
            let w = pi_r.prob(s, ar);
            if w == 0.0 {
                continue;
            }
            for (o, p) in out.iter_mut().zip(self.next_dist(s, a_h, ar)) {
                *o += w * p;
            }
        }
        out
    }

    pub(crate) fn check_policies(&self, pi_h: &Policy, pi_r: &Policy) -> Result<()> {
        if pi_h.num_states() != self.num_states || pi_h.num_actions() != self.num_human_actions {
            return config(format!(
                "human policy is {}x{}, MDP needs {}x{}",
                pi_h.num_states(),
                pi_h.num_actions(),
                self.num_states,
                self.num_human_actions
            ));
        }
        self.check_robot_policy(pi_r)
    }

    pub(crate) fn check_robot_policy(&self, pi_r: &Policy) -> Result<()> {
        if pi_r.num_states() != self.num_states || pi_r.num_actions() != self.num_robot_actions {
            return config(format!(
                "robot policy is {}x{}, MDP needs {}x{}",
                pi_r.num_states(),
                pi_r.num_actions(),
                self.num_states,
                self.num_robot_actions
            ));
        }
        Ok(())
    }
}

/// Stochastic policy stored as a row-major `num_states x num_actions` matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Policy {
    num_states: usize,
    num_actions: usize,
    probs: Vec<f64>,
}

impl Policy {
    pub fn new(num_states: usize, num_actions: usize, probs: Vec<f64>) -> Result<Self> {
        if num_states == 0 || num_actions == 0 {
            return config("policy needs at least one state and one action");
        }
        if probs.len() != num_states * num_actions {
            return config(format!(
                "policy has {} entries, expected {}",
                probs.len(),
                num_states * num_actions
            ));
        }
        for (s, row) in probs.chunks(num_actions).enumerate() {
            check_distribution(row, &format!("policy row {s}"))?;
        }
        Ok(Self {
            num_states,
            num_actions,
            probs,
        })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let na = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != na) {
            return config("policy rows have different lengths");
        }
        Self::new(rows.len(), na, rows.concat())
    }

    pub fn uniform(num_states: usize, num_actions: usize) -> Self {
        Self {
            num_states,
            num_actions,
            probs: vec![1.0 / num_actions as f64; num_states * num_actions],
        }
    }

    /// Always takes `action(s)`.
    pub fn deterministic(num_states: usize, num_actions: usize, action: impl Fn(usize) -> usize) -> Result<Self> {
        let mut probs = vec![0.0; num_states * num_actions];
        for s in 0..num_states {
            let a = action(s);
            if a >= num_actions {
                return config(format!("action {a} out of range"));
            }
            probs[s * num_actions + a] = 1.0;
        }
        Self::new(num_states, num_actions, probs)
    }

    pub fn random<R: Rng + ?Sized>(num_states: usize, num_actions: usize, rng: &mut R) -> Self {
        let probs = (0..num_states)
            .flat_map(|_| random_simplex(num_actions, 1.0, rng))
            .collect();
        Self {
            num_states,
            num_actions,
            probs,
        }
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    pub fn row(&self, s: usize) -> &[f64] {
        &self.probs[s * self.num_actions..(s + 1) * self.num_actions]
    }

    pub fn prob(&self, s: usize, a: usize) -> f64 {
        self.probs[s * self.num_actions + a]
    }

    pub fn sample<R: Rng + ?Sized>(&self, s: usize, rng: &mut R) -> usize {
        sample_index(self.row(s), rng)
    }
}

/// Discount factors. `gamma_future` parameterizes the geometric future state,
/// `gamma_rl` the assistant's return. `gamma_visitation` weights visited
/// states in the empowerment total and defaults to `gamma_future`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscountSpec {
    pub gamma_future: f64,
    pub gamma_rl: f64,
    #[serde(default)]
    pub gamma_visitation: Option<f64>,
}

impl DiscountSpec {
    pub fn new(gamma_future: f64, gamma_rl: f64) -> Result<Self> {
        let spec = Self {
            gamma_future,
            gamma_rl,
            gamma_visitation: None,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Same discount for future states and visitation weighting.
    pub fn future(gamma: f64) -> Result<Self> {
        Self::new(gamma, 0.9)
    }

    pub fn with_visitation(mut self, gamma: f64) -> Result<Self> {
        self.gamma_visitation = Some(gamma);
        self.validate()?;
        Ok(self)
    }

    pub fn visitation_gamma(&self) -> f64 {
        self.gamma_visitation.unwrap_or(self.gamma_future)
    }

    pub fn validate(&self) -> Result<()> {
        let open = |g: f64| g > 0.0 && g < 1.0;
        if !open(self.gamma_future) {
            return config(format!("gamma_future {} not in (0,1)", self.gamma_future));
        }
        if !(self.gamma_rl >= 0.0 && self.gamma_rl < 1.0) {
            return config(format!("gamma_rl {} not in [0,1)", self.gamma_rl));
        }
        if let Some(g) = self.gamma_visitation {
            if !open(g) {
                return config(format!("gamma_visitation {g} not in (0,1)"));
            }
        }
        Ok(())
    }
}

/// What the future-state distribution is conditioned on at time `t`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Condition {
    pub state: usize,
    pub human_action: Option<usize>,
    pub robot_action: Option<usize>,
}

impl Condition {
    pub fn state(state: usize) -> Self {
        Self {
            state,
            human_action: None,
            robot_action: None,
        }
    }

    pub fn human(state: usize, a_h: usize) -> Self {
        Self {
            state,
            human_action: Some(a_h),
            robot_action: None,
        }
    }

    pub fn joint(state: usize, a_h: usize, a_r: usize) -> Self {
        Self {
            state,
            human_action: Some(a_h),
            robot_action: Some(a_r),
        }
    }
}

/// Behavior chain `T[s][s'] = sum pi_h(a_h|s) pi_r(a_r|s) P(s'|s,a_h,a_r)`.
pub fn marginal_chain(mdp: &TabularMdp, pi_h: &Policy, pi_r: &Policy) -> Result<DMatrix<f64>> {
    mdp.check_policies(pi_h, pi_r)?;
    let n = mdp.num_states;
    let mut t = DMatrix::zeros(n, n);
    for s in 0..n {
        let row = one_step(mdp, pi_h, pi_r, Condition::state(s));
        for (s2, p) in row.into_iter().enumerate() {
            t[(s, s2)] = p;
        }
    }
    Ok(t)
}

/// One-step distribution `P_1(. | condition)`, marginalizing any action that is not fixed.
pub fn one_step(mdp: &TabularMdp, pi_h: &Policy, pi_r: &Policy, cond: Condition) -> Vec<f64> {
    let s = cond.state;
    let mut out = vec![0.0; mdp.num_states];
    for ah in 0..mdp.num_human_actions {
        let wh = match cond.human_action {
            Some(a) if a == ah => 1.0,
            Some(_) => continue,
            None => pi_h.prob(s, ah),
        };
        for ar in 0..mdp.num_robot_actions {
            let wr = match cond.robot_action {
                Some(a) if a == ar => 1.0,
                Some(_) => continue,
                None => pi_r.prob(s, ar),
            };
            let w = wh * wr;
            if w == 0.0 {
                continue;
            }
            for (o, p) in out.iter_mut().zip(mdp.next_dist(s, ah, ar)) {
                *o += w * p;
            }
        }
    }
    out
}

fn check_size(n: usize) -> Result<()> {
    if n > MAX_DENSE_STATES {
        return config(format!(
            "{n} states exceeds the dense-solve bound of {MAX_DENSE_STATES}"
        ));
    }
    Ok(())
}

/// Factorized `(I - gamma T)` for answering many occupancy queries against
/// one pair of behavior policies.
pub struct OccupancySolver<'a> {
    mdp: &'a TabularMdp,
    pi_h: &'a Policy,
    pi_r: &'a Policy,
    gamma: f64,
    // LU of (I - gamma T)^T; row-vector solves x (I - gamma T) = b become A^T x^T = b^T.
    lu_t: nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>,
}

impl<'a> OccupancySolver<'a> {
    pub fn new(mdp: &'a TabularMdp, pi_h: &'a Policy, pi_r: &'a Policy, gamma: f64) -> Result<Self> {
        if !(gamma > 0.0 && gamma < 1.0) {
            return config(format!("gamma {gamma} not in (0,1)"));
        }
        check_size(mdp.num_states)?;
        let t = marginal_chain(mdp, pi_h, pi_r)?;
        let n = mdp.num_states;
        let a = DMatrix::<f64>::identity(n, n) - t * gamma;
        Ok(Self {
            mdp,
            pi_h,
            pi_r,
            gamma,
            lu_t: a.transpose().lu(),
        })
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    /// Solves `x (I - gamma T) = b` for the row vector `x`.
    fn solve_row(&self, b: &[f64]) -> Result<Vec<f64>> {
        let rhs = DVector::from_column_slice(b);
        self.lu_t
            .solve(&rhs)
            .map(|x| x.iter().copied().collect())
            .ok_or_else(|| Error::Numeric("singular (I - gamma T) in occupancy solve".into()))
    }

    /// `rho(s+ | condition) = (1 - gamma) P_1 (I - gamma T)^-1`.
    pub fn occupancy(&self, cond: Condition) -> Result<Vec<f64>> {
        let n = self.mdp.num_states;
        if cond.state >= n {
            return config(format!("state {} out of range", cond.state));
        }
        if cond.human_action.is_some_and(|a| a >= self.mdp.num_human_actions) {
            return config("human action out of range");
        }
        if cond.robot_action.is_some_and(|a| a >= self.mdp.num_robot_actions) {
            return config("robot action out of range");
        }
        let p1 = one_step(self.mdp, self.pi_h, self.pi_r, cond);
        let mut x = self.solve_row(&p1)?;
        for v in &mut x {
            // Clean up roundoff below zero.
            *v = (*v * (1.0 - self.gamma)).max(0.0);
        }
        Ok(x)
    }

    /// `d = init (I - gamma T)^-1`, i.e. `sum_t gamma^t P(s_t = .)`.
    pub fn visitation(&self) -> Result<Vec<f64>> {
        let mut d = self.solve_row(self.mdp.initial_dist())?;
        for v in &mut d {
            *v = v.max(0.0);
        }
        Ok(d)
    }
}

/// Distribution of the state `K ~ Geom(1 - gamma_future)` steps after `cond`.
pub fn discounted_occupancy(
    mdp: &TabularMdp,
    pi_h: &Policy,
    pi_r: &Policy,
    spec: &DiscountSpec,
    cond: Condition,
) -> Result<Vec<f64>> {
    spec.validate()?;
    OccupancySolver::new(mdp, pi_h, pi_r, spec.gamma_future)?.occupancy(cond)
}

/// Unnormalized discounted visitation `d(s) = sum_t gamma^t P(s_t = s)` using
/// the visitation discount of `spec`. Sums to `1 / (1 - gamma)`.
pub fn discounted_state_visitation(
    mdp: &TabularMdp,
    pi_h: &Policy,
    pi_r: &Policy,
    spec: &DiscountSpec,
) -> Result<Vec<f64>> {
    spec.validate()?;
    OccupancySolver::new(mdp, pi_h, pi_r, spec.visitation_gamma())?.visitation()
}

/// Inverse-CDF draw from a finite distribution. Falls back to the last index
/// with positive mass when roundoff leaves `u` past the cumulative sum.
pub fn sample_index<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

/// Symmetric Dirichlet draw via normalized Gamma variates.
pub fn random_simplex<R: Rng + ?Sized>(n: usize, concentration: f64, rng: &mut R) -> Vec<f64> {
    let g = Gamma::new(concentration, 1.0).expect("positive concentration");
    loop {
        let mut x: Vec<f64> = (0..n).map(|_| g.sample(rng)).collect();
        let sum: f64 = x.iter().sum();
        if sum > 0.0 && sum.is_finite() {
            x.iter_mut().for_each(|v| *v /= sum);
            return x;
        }
    }
}
