//! Estimator fidelity on an enumerable MDP.
//!
//! Lookup-table encoders are trained on records drawn from the exact joint
//! distribution of `(s, a^H, a^R, g)`: `s` from the normalized discounted
//! visitation, actions from the behavior policies and `g` from the exact
//! conditional occupancy. The learned `(phi - phi') . psi` is then compared
//! with the true log-ratio on every tuple.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::contrastive::{esr_rewards, ContrastiveBatch, ReprConfig, ReprParams, ReprTrainer};
use crate::error::{Error, Result};
use crate::features::JointOneHotFeaturizer;
use crate::mdp::{sample_index, Condition, DiscountSpec, OccupancySolver, Policy, TabularMdp};
use crate::oracle::conditional_mi_given_robot;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FidelityConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Latent width; must be at least `|S| |A^H| |A^R|`.
    pub latent_dim: usize,
}

impl Default for FidelityConfig {
    fn default() -> Self {
        Self {
            steps: 4000,
            batch_size: 256,
            lr: 1e-2,
            latent_dim: 18,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FidelityReport {
    /// Weighted least-squares fit `estimate ~ slope * oracle + offset` over
    /// all tuples, weighted by their joint probability.
    pub slope: f64,
    pub offset: f64,
    pub r_squared: f64,
    /// Expected learned reward under the joint distribution.
    pub mi_estimate: f64,
    /// `sum_s dhat(s) I(a^H; s+ | s, a^R)` with `dhat` normalized.
    pub mi_oracle: f64,
    pub final_loss: f64,
    pub num_tuples: usize,
}

/// Exact sampler over `(s, a^H, a^R, g)` and the oracle log-ratios.
pub struct JointTable {
    pub ns: usize,
    pub nh: usize,
    pub nr: usize,
    /// Normalized visitation.
    pub state_weights: Vec<f64>,
    pub pi_h: Policy,
    pub pi_r: Policy,
    /// `rho(. | s, a^H, a^R)` at index `(s * nh + ah) * nr + ar`.
    pub occupancy: Vec<Vec<f64>>,
}

impl JointTable {
    pub fn new(mdp: &TabularMdp, pi_h: &Policy, pi_r: &Policy, spec: &DiscountSpec) -> Result<Self> {
        spec.validate()?;
        let (ns, nh, nr) = (mdp.num_states(), mdp.num_human_actions(), mdp.num_robot_actions());
        let solver = OccupancySolver::new(mdp, pi_h, pi_r, spec.gamma_future)?;
        let mut occupancy = Vec::with_capacity(ns * nh * nr);
        for s in 0..ns {
            for ah in 0..nh {
                for ar in 0..nr {
                    occupancy.push(solver.occupancy(Condition::joint(s, ah, ar))?);
                }
            }
        }
        let visit = OccupancySolver::new(mdp, pi_h, pi_r, spec.visitation_gamma())?.visitation()?;
        let z: f64 = visit.iter().sum();
        Ok(Self {
            ns,
            nh,
            nr,
            state_weights: visit.iter().map(|v| v / z).collect(),
            pi_h: pi_h.clone(),
            pi_r: pi_r.clone(),
            occupancy,
        })
    }

    fn idx(&self, s: usize, ah: usize, ar: usize) -> usize {
        (s * self.nh + ah) * self.nr + ar
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> (usize, usize, usize, usize) {
        let s = sample_index(&self.state_weights, rng);
        let ah = self.pi_h.sample(s, rng);
        let ar = self.pi_r.sample(s, rng);
        let g = sample_index(&self.occupancy[self.idx(s, ah, ar)], rng);
        (s, ah, ar, g)
    }

    /// `rho(g | s, a^R) = sum_ah pi_h(ah | s) rho(g | s, ah, a^R)`.
    fn robot_marginal(&self, s: usize, ar: usize) -> Vec<f64> {
        let mut m = vec![0.0; self.ns];
        for ah in 0..self.nh {
            let w = self.pi_h.prob(s, ah);
            for (mv, v) in m.iter_mut().zip(&self.occupancy[self.idx(s, ah, ar)]) {
                *mv += w * v;
            }
        }
        m
    }

    /// Every tuple with positive probability: `(s, ah, ar, g, prob, log_ratio)`.
    pub fn tuples(&self) -> Vec<(usize, usize, usize, usize, f64, f64)> {
        let mut out = Vec::new();
        for s in 0..self.ns {
            for ar in 0..self.nr {
                let marg = self.robot_marginal(s, ar);
                for ah in 0..self.nh {
                    let w = self.state_weights[s] * self.pi_h.prob(s, ah) * self.pi_r.prob(s, ar);
                    for (g, &p) in self.occupancy[self.idx(s, ah, ar)].iter().enumerate() {
                        if w * p > 0.0 {
                            out.push((s, ah, ar, g, w * p, (p / marg[g]).ln()));
                        }
                    }
                }
            }
        }
        out
    }
}

/// Trains lookup-table encoders and reports how well they recover the
/// oracle log-ratios.
pub fn run_fidelity<R: Rng + ?Sized>(
    mdp: &TabularMdp,
    pi_h: &Policy,
    pi_r: &Policy,
    spec: &DiscountSpec,
    config: &FidelityConfig,
    rng: &mut R,
) -> Result<FidelityReport> {
    let table = JointTable::new(mdp, pi_h, pi_r, spec)?;
    let needed = table.ns * table.nh * table.nr;
    if config.latent_dim < needed {
        return Err(Error::Config(format!(
            "latent_dim {} is below |S| |A^H| |A^R| = {needed}",
            config.latent_dim
        )));
    }
    let feat = JointOneHotFeaturizer {
        num_states: table.ns,
        num_human_actions: table.nh,
        num_robot_actions: table.nr,
    };
    let repr_config = ReprConfig {
        hidden: vec![],
        latent_dim: config.latent_dim,
        condition_on_robot: true,
        lr: config.lr,
        batch_size: config.batch_size,
        gamma_future: spec.gamma_future,
    };
    let params = ReprParams::new(&feat, &repr_config, rng)?;
    let mut trainer = ReprTrainer::new(params, config.lr);
    let mut final_loss = f64::NAN;
    for step in 0..config.steps {
        // linear decay to a tenth of the base rate; the late small steps
        // average out minibatch noise in the fitted table
        let frac = step as f64 / config.steps as f64;
        trainer.set_lr(config.lr * (1.0 - 0.9 * frac));
        let mut batch = ContrastiveBatch::default();
        for _ in 0..config.batch_size {
            let (s, ah, ar, g) = table.sample(rng);
            batch.push(&trainer.params, &feat, &s, ah, ar, &g);
        }
        final_loss = trainer.step(&batch)?.loss;
    }

    let tuples = table.tuples();
    let mut batch = ContrastiveBatch::default();
    for &(s, ah, ar, g, _, _) in &tuples {
        batch.push(&trainer.params, &feat, &s, ah, ar, &g);
    }
    let est = esr_rewards(&trainer.params, &batch);
    let w: Vec<f64> = tuples.iter().map(|t| t.4).collect();
    let x: Vec<f64> = tuples.iter().map(|t| t.5).collect();
    let (slope, offset, r_squared) = weighted_fit(&x, &est, &w);
    let mi_estimate = w.iter().zip(&est).map(|(a, b)| a * b).sum();
    let mut mi_oracle = 0.0;
    for s in 0..table.ns {
        mi_oracle += table.state_weights[s] * conditional_mi_given_robot(mdp, pi_h, pi_r, spec, s)?;
    }
    Ok(FidelityReport {
        slope,
        offset,
        r_squared,
        mi_estimate,
        mi_oracle,
        final_loss,
        num_tuples: tuples.len(),
    })
}

/// Three states, three human actions, two robot actions. The human action
/// names the next state with probability 0.7; otherwise the robot decides
/// between staying (`a^R = 0`) and advancing cyclically (`a^R = 1`). The
/// returned human policy names the current state with probability `stay`;
/// a sticky human makes early choices persist in the occupancy.
pub fn sticky_selector(stay: f64) -> Result<(TabularMdp, Policy, Policy)> {
    if !(0.0..=1.0).contains(&stay) {
        return Err(Error::Config(format!("stay probability {stay} outside [0,1]")));
    }
    let (ns, nh, nr) = (3, 3, 2);
    let mut t = vec![0.0; ns * nh * nr * ns];
    for s in 0..ns {
        for ah in 0..nh {
            for ar in 0..nr {
                let base = ((s * nh + ah) * nr + ar) * ns;
                t[base + ah] += 0.7;
                t[base + if ar == 0 { s } else { (s + 1) % ns }] += 0.3;
            }
        }
    }
    let mdp = TabularMdp::new(ns, nh, nr, t, vec![1.0 / 3.0; 3])?;
    let pi_h = Policy::from_rows(
        &(0..ns)
            .map(|s| (0..nh).map(|a| if a == s { stay } else { (1.0 - stay) / 2.0 }).collect())
            .collect::<Vec<_>>(),
    )?;
    Ok((mdp, pi_h, Policy::uniform(ns, nr)))
}

/// Weighted simple linear regression of `y` on `x`: `(slope, offset, R^2)`.
pub fn weighted_fit(x: &[f64], y: &[f64], w: &[f64]) -> (f64, f64, f64) {
    let sw: f64 = w.iter().sum();
    let mx = x.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() / sw;
    let my = y.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() / sw;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for ((a, b), c) in x.iter().zip(y).zip(w) {
        sxy += c * (a - mx) * (b - my);
        sxx += c * (a - mx) * (a - mx);
        syy += c * (b - my) * (b - my);
    }
    let slope = sxy / sxx;
    let r2 = if syy > 0.0 { sxy * sxy / (sxx * syy) } else { 1.0 };
    (slope, my - slope * mx, r2)
}
