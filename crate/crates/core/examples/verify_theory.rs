//! Numerical checks of the two analytic results: the softmax entropy bound
//! over a grid of (k, beta), and the empowerment/return bound on random
//! ergodic MDPs at gamma close to 1.
//!
//! ```text
//! cargo run --release --example verify_theory -- 5   # number of MDPs
//! ```

use empower::mdp::Policy;
use empower::oracle::{entropy_bound_sweep, ergodic_mdp, verify_entropy_bound, verify_theorem_bound};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> empower::Result<()> {
    let mdps = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(5);
    let mut rng = ChaCha8Rng::seed_from_u64(0);

    // the tightest case: uniform logits
    let b = verify_entropy_bound(4, 2.0, Some(&[0.5; 4]))?;
    println!("k=4 beta=2 uniform logits: H {:.4} >= {:.4}", b.lhs, b.rhs);
    let sweep = entropy_bound_sweep(20, &mut rng)?;
    println!("sweep: {} cases, {} violations, min margin {:.2e}", sweep.cases, sweep.violations, sweep.min_margin);

    for i in 0..mdps {
        let mdp = ergodic_mdp(5, 3, 2, 0.05, &mut rng)?;
        let pi_r = Policy::random(5, 2, &mut rng);
        let c = verify_theorem_bound(&mdp, &pi_r, 2.0, 0.999, 50, &mut rng)?;
        println!(
            "mdp {i}: sqrt(E) {:.3e} <= (beta/e) J {:.3e}  (E {:.3e} ± {:.1e})",
            c.lhs, c.rhs, c.empowerment.mean, c.empowerment.std_err
        );
    }
    Ok(())
}
