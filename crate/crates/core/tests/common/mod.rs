//! Monte-Carlo oracles shared by the integration and acceptance targets.
#![allow(dead_code)]

use empower::mdp::{Policy, TabularMdp};
use rand::Rng;

/// Counts of `(a^H, s+)` from `s`, with `K ~ Geom(1 - gamma)` on `{1, 2, ..}`
/// and every step drawn from the behavior policies except the first human
/// action.
pub struct FutureCounts {
    pub n: usize,
    /// `counts[a][s+]`
    pub counts: Vec<Vec<usize>>,
}

pub fn sample_futures<R: Rng + ?Sized>(
    mdp: &TabularMdp,
    pi_h: &Policy,
    pi_r: &Policy,
    gamma: f64,
    s: usize,
    n: usize,
    rng: &mut R,
) -> FutureCounts {
    let ns = mdp.num_states();
    let mut counts = vec![vec![0usize; ns]; mdp.num_human_actions()];
    for _ in 0..n {
        let a = pi_h.sample(s, rng);
        let mut cur = mdp.sample_next(s, a, pi_r.sample(s, rng), rng);
        while rng.gen::<f64>() < gamma {
            cur = mdp.sample_next(cur, pi_h.sample(cur, rng), pi_r.sample(cur, rng), rng);
        }
        counts[a][cur] += 1;
    }
    FutureCounts { n, counts }
}

impl FutureCounts {
    /// Empirical `rho(. | s)` and per-entry standard errors.
    pub fn marginal(&self) -> (Vec<f64>, Vec<f64>) {
        let ns = self.counts[0].len();
        let n = self.n as f64;
        let p: Vec<f64> = (0..ns)
            .map(|j| self.counts.iter().map(|c| c[j]).sum::<usize>() as f64 / n)
            .collect();
        let se = p.iter().map(|q| (q * (1.0 - q) / n).sqrt()).collect();
        (p, se)
    }

    /// Empirical `rho(. | s, a)` with standard errors; `None` if `a` never drawn.
    pub fn conditional(&self, a: usize) -> Option<(Vec<f64>, Vec<f64>)> {
        let m: usize = self.counts[a].iter().sum();
        if m == 0 {
            return None;
        }
        let m = m as f64;
        let p: Vec<f64> = self.counts[a].iter().map(|&c| c as f64 / m).collect();
        let se = p.iter().map(|q| (q * (1.0 - q) / m).sqrt()).collect();
        Some((p, se))
    }

    /// Plug-in mutual information and its delta-method standard error.
    pub fn plug_in_mi(&self) -> (f64, f64) {
        let n = self.n as f64;
        let na: Vec<f64> = self.counts.iter().map(|c| c.iter().sum::<usize>() as f64).collect();
        let ns = self.counts[0].len();
        let nsp: Vec<f64> = (0..ns)
            .map(|j| self.counts.iter().map(|c| c[j]).sum::<usize>() as f64)
            .collect();
        let (mut m1, mut m2) = (0.0, 0.0);
        for (a, row) in self.counts.iter().enumerate() {
            for (j, &c) in row.iter().enumerate() {
                if c == 0 {
                    continue;
                }
                let p = c as f64 / n;
                let l = (c as f64 * n / (na[a] * nsp[j])).ln();
                m1 += p * l;
                m2 += p * l * l;
            }
        }
        (m1, ((m2 - m1 * m1).max(0.0) / n).sqrt())
    }
}

/// Largest `|x - y| / se` over entries, with a floor on `se` for entries
/// that are zero in both.
pub fn max_z(est: &[f64], se: &[f64], exact: &[f64]) -> f64 {
    est.iter()
        .zip(se)
        .zip(exact)
        .map(|((e, s), x)| {
            let d = (e - x).abs();
            if d < 1e-12 {
                0.0
            } else {
                d / s.max(1e-12)
            }
        })
        .fold(0.0, f64::max)
}
