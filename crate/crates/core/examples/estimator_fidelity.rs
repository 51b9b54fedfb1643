//! Trains lookup-table encoders on a 3-state MDP and compares the learned
//! log-ratios with the exact ones.
//!
//! ```text
//! cargo run --example estimator_fidelity            # curated sticky selector
//! cargo run --example estimator_fidelity -- 3 0.1   # random MDP: seed, Dirichlet concentration
//! ```

use empower::fidelity::{run_fidelity, sticky_selector, FidelityConfig};
use empower::mdp::{DiscountSpec, Policy, TabularMdp};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> empower::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let seed = args.first().and_then(|s| s.parse().ok()).unwrap_or(0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mdp, pi_h, pi_r) = match args.get(1).and_then(|s| s.parse().ok()) {
        Some(concentration) => {
            let mdp = TabularMdp::random(3, 2, 2, concentration, &mut rng)?;
            let pi_h = Policy::random(3, 2, &mut rng);
            let pi_r = Policy::random(3, 2, &mut rng);
            (mdp, pi_h, pi_r)
        }
        None => sticky_selector(0.9)?,
    };
    let spec = DiscountSpec::future(0.9)?;
    let config = FidelityConfig {
        latent_dim: 18,
        ..FidelityConfig::default()
    };
    let report = run_fidelity(&mdp, &pi_h, &pi_r, &spec, &config, &mut rng)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}
