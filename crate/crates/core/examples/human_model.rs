//! Boltzmann-rational human on a random tabular MDP: soft value iteration for
//! one reward, then the expected return over the reward prior as the
//! rationality coefficient grows.
//!
//! ```text
//! cargo run --release --example human_model
//! ```

use empower::human::{expected_human_return, sample_reward_prior, soft_value_iteration, RewardPrior};
use empower::mdp::{Policy, TabularMdp};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> empower::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mdp = TabularMdp::random(6, 3, 2, 0.5, &mut rng)?;
    let pi_r = Policy::uniform(6, 2);
    let gamma = 0.9;

    let reward = sample_reward_prior(6, gamma, RewardPrior::Nonnegative, &mut rng);
    let sol = soft_value_iteration(&mdp, &pi_r, &reward, 200.0, gamma, 1e-10, 100_000)?;
    for s in 0..6 {
        println!("s{s}: V {:.3}  pi {:.3?}", sol.values[s], sol.policy.row(s));
    }

    for beta in [0.0, 10.0, 100.0, 1000.0] {
        let j = expected_human_return(&mdp, &pi_r, beta, gamma, 200, RewardPrior::Nonnegative, &mut rng)?;
        println!("beta {beta:>6}: J = {:.4} ± {:.4}", j.mean, j.std_err);
    }
    Ok(())
}
