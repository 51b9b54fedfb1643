//! Plays one episode of the block gridworld with the simulated human and a
//! random robot, drawing the board after every step.
//!
//! ```text
//! cargo run --example gridworld_rollout -- 11   # episode seed
//! ```

use empower::baselines::random_action;
use empower::grid::{grid_step, Direction, GridConfig, GridState, RobotAction};
use empower::human::GridHuman;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn draw(config: &GridConfig, s: &GridState) {
    for y in 0..config.height {
        let row: String = (0..config.width)
            .map(|x| {
                let c = config.cell(x, y);
                if c == s.human_cell {
                    'H'
                } else if s.block_cells.contains(&c) {
                    '#'
                } else if c == config.goal_cell {
                    'G'
                } else {
                    '.'
                }
            })
            .collect();
        println!("  {row}");
    }
}

fn main() -> empower::Result<()> {
    let seed = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(11);
    let config = GridConfig::from_seed(5, 5, 5, 3)?;
    let human = GridHuman::new(5.0, 0.9);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = config.initial_state(seed);
    draw(&config, &s);
    while !s.done {
        let a_r = random_action(&config, &mut rng);
        let a_h = human.act(&config, &s, &mut rng);
        s = grid_step(&s, a_h, a_r, &config)?;
        let push = RobotAction::decode(a_r, config.num_blocks);
        let dir = Direction::from_index(a_h).map_or("stay".to_string(), |d| format!("{d:?}"));
        println!("step {}: robot {push:?}, human {dir}", s.steps_elapsed);
        draw(&config, &s);
    }
    println!("{}", if s.at_goal(&config) { "reached the goal" } else { "horizon hit" });
    Ok(())
}
