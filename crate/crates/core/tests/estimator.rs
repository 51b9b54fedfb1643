use empower::buffer::{Episode, EpisodeBuffer, Step};
use empower::contrastive::{estimate_mi_at_state, sample_future_batch, simplified_reward_from, ReprConfig, ReprParams, ReprTrainer};
use empower::features::TabularFeaturizer;
use empower::mdp::{DiscountSpec, Policy, TabularMdp};
use empower::oracle::conditional_mi;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

const GAMMA: f64 = 0.9;
const LEN: usize = 40;
const K: usize = 4;

/// Rollouts of `mdp` from its initial distribution under `pi_h`.
fn rollouts<R: Rng>(mdp: &TabularMdp, pi_h: &Policy, episodes: usize, rng: &mut R) -> EpisodeBuffer<usize> {
    let mut buf = EpisodeBuffer::new(episodes * LEN).unwrap();
    for _ in 0..episodes {
        let mut s = mdp.sample_initial(rng);
        let mut steps = Vec::with_capacity(LEN);
        for _ in 0..LEN {
            let a_h = pi_h.sample(s, rng);
            steps.push(Step { obs: s, a_h, a_r: 0 });
            s = mdp.sample_next(s, a_h, 0, rng);
        }
        let mut ep = Episode::new(s);
        ep.steps = steps;
        buf.push(ep);
    }
    buf
}

/// From state 0 action `a` reaches state `a + 1` (or a uniform one when
/// `route` says so); states `1..=k` stay put with probability `1 - leak` and
/// otherwise restart uniformly. `leak = 0` gives the absorbing channel.
fn channel(k: usize, leak: f64, route: impl Fn(usize) -> Vec<f64>) -> TabularMdp {
    let ns = k + 1;
    let mut t = Vec::with_capacity(ns * k * ns);
    for s in 0..ns {
        for a in 0..k {
            if s == 0 {
                t.extend(route(a));
            } else {
                t.extend((0..ns).map(|j| leak / ns as f64 + if j == s { 1.0 - leak } else { 0.0 }));
            }
        }
    }
    let mut init = vec![0.0; ns];
    init[0] = 1.0;
    TabularMdp::new(ns, k, 1, t, init).unwrap()
}

fn selector(k: usize, leak: f64) -> TabularMdp {
    channel(k, leak, |a| {
        (0..=k)
            .map(|j| leak / (k + 1) as f64 + if j == a + 1 { 1.0 - leak } else { 0.0 })
            .collect()
    })
}

/// Next state ignores the action: one of states 1 and 2 at random.
fn uncontrolled(k: usize, leak: f64) -> TabularMdp {
    channel(k, leak, |_| {
        (0..=k)
            .map(|j| leak / (k + 1) as f64 + if j == 1 || j == 2 { (1.0 - leak) / 2.0 } else { 0.0 })
            .collect()
    })
}

fn trained_estimate<R: Rng>(mdp: &TabularMdp, rng: &mut R) -> f64 {
    let k = mdp.num_human_actions();
    let pi_h = Policy::uniform(mdp.num_states(), k);
    let buf = rollouts(mdp, &pi_h, 1000, rng);
    let feat = TabularFeaturizer::new(mdp.num_states(), k, 1);
    let config = ReprConfig {
        hidden: vec![64],
        latent_dim: 16,
        lr: 3e-3,
        ..ReprConfig::default()
    };
    let mut trainer = ReprTrainer::new(ReprParams::new(&feat, &config, rng).unwrap(), config.lr);
    let steps = 3000;
    for step in 0..steps {
        trainer.set_lr(config.lr * (1.0 - 0.9 * step as f64 / steps as f64));
        let batch = sample_future_batch(&buf, &trainer.params, &feat, 256, GAMMA, rng).unwrap();
        trainer.step(&batch).unwrap();
    }
    estimate_mi_at_state(&trainer.params, &feat, &0, pi_h.row(0), &[1.0], 4000, &buf, GAMMA, rng)
        .unwrap()
        .expect("every action was taken at state 0")
}

fn oracle_mi(mdp: &TabularMdp) -> f64 {
    let pi_h = Policy::uniform(mdp.num_states(), mdp.num_human_actions());
    let pi_r = Policy::uniform(mdp.num_states(), 1);
    conditional_mi(mdp, &pi_h, &pi_r, &DiscountSpec::future(GAMMA).unwrap(), 0).unwrap()
}

#[test]
fn trained_estimate_tracks_a_leaky_selector() {
    let mdp = selector(K, 0.1);
    let est = trained_estimate(&mdp, &mut ChaCha8Rng::seed_from_u64(11));
    let target = oracle_mi(&mdp);
    assert!((est - target).abs() <= 0.15, "estimate {est} vs oracle {target}");
}

#[test]
fn trained_estimate_vanishes_on_a_leaky_uncontrolled_chain() {
    let mdp = uncontrolled(K, 0.1);
    assert!(oracle_mi(&mdp).abs() < 1e-12);
    let est = trained_estimate(&mdp, &mut ChaCha8Rng::seed_from_u64(12));
    assert!(est.abs() <= 0.05, "estimate {est} should be near 0");
}

/// On the exact absorbing channel some (anchor, future) pairs never occur, so
/// the infoNCE optimum sends their logits to minus infinity and leaves the
/// additive offset between the two encoder pairs free. The estimate then
/// reflects that drift rather than `log k`.
#[test]
#[ignore = "the deterministic channel leaves the infoNCE offset unidentified"]
fn trained_estimate_recovers_the_absorbing_channel_capacity() {
    let mdp = selector(K, 0.0);
    let est = trained_estimate(&mdp, &mut ChaCha8Rng::seed_from_u64(11));
    let target = (K as f64).ln();
    assert!((est - target).abs() <= 0.15, "estimate {est} vs log k = {target}");
}

#[test]
#[ignore = "the absorbing uncontrolled chain leaves the infoNCE offset unidentified"]
fn trained_estimate_vanishes_without_control() {
    let mdp = uncontrolled(K, 0.0);
    let est = trained_estimate(&mdp, &mut ChaCha8Rng::seed_from_u64(12));
    assert!(est.abs() <= 0.05, "estimate {est} should be near 0");
}

#[test]
fn simplified_reward_matches_gaussian_future_integral() {
    // For psi ~ N(0, I), E[exp(phi . psi) psi] = exp(|phi|^2 / 2) phi, so the
    // importance-weighted sampled reward integrates to the simplified one.
    let phi = [0.4, -0.3, 0.2];
    let phi_prime = [0.1, 0.2, -0.1];
    let diff: Vec<f64> = phi.iter().zip(&phi_prime).map(|(a, b)| a - b).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let n = 1_000_000;
    let mut total = 0.0;
    for _ in 0..n {
        let psi: Vec<f64> = (0..3).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let w = phi.iter().zip(&psi).map(|(a, b)| a * b).sum::<f64>().exp();
        total += w * diff.iter().zip(&psi).map(|(a, b)| a * b).sum::<f64>();
    }
    let mc = total / n as f64;
    let closed = simplified_reward_from(&phi, &phi_prime);
    assert!((mc - closed).abs() <= 0.01 * closed.abs(), "{mc} vs {closed}");
}
