//! Exact effective empowerment of a small gridworld under the simulated
//! human, with an idle robot and with a uniformly random robot.
//!
//! ```text
//! cargo run --release --example oracle_report -- 3   # layout seed
//! ```

use empower::grid::{grid_to_tabular, GridConfig, NOOP};
use empower::human::{grid_human_policy, GridHuman};
use empower::mdp::{DiscountSpec, Policy};
use empower::oracle::{channel_capacity, effective_empowerment};

fn main() -> empower::Result<()> {
    let seed = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0);
    // 3x3 with one block: 8 * 7 + 1 states, small enough to enumerate
    let config = GridConfig::from_seed(3, 3, 1, seed)?;
    let tab = grid_to_tabular(&config)?;
    let pi_h = grid_human_policy(&GridHuman::new(5.0, 0.9), &tab)?;
    let spec = DiscountSpec::future(0.9)?;
    let n = tab.num_states();
    let m = config.num_robot_actions();

    for (name, pi_r) in [
        ("idle robot", Policy::deterministic(n, m, |_| NOOP)?),
        ("random robot", Policy::uniform(n, m)),
    ] {
        let report = effective_empowerment(&tab.mdp, &pi_h, &pi_r, &spec)?;
        println!("{name}: total empowerment {:.4} over {n} states", report.total_empowerment);
        let (best, mi) = report
            .per_state_mi
            .iter()
            .copied()
            .enumerate()
            .fold((0, f64::MIN), |a, (i, v)| if v > a.1 { (i, v) } else { a });
        let cap = channel_capacity(&tab.mdp, &pi_h, &pi_r, &spec, best, 1e-9)?;
        println!(
            "  most empowered state {:?}: MI {mi:.4}, capacity {:.4}, max KL {:.4}",
            tab.state_of(best),
            cap.capacity,
            report.per_state_dmax[best]
        );
    }
    Ok(())
}
