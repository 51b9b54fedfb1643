//! Obstacle gridworld: a human walks to a goal among blocks that only the
//! robot can push, one cell at a time.
//!
//! Cells are indexed row-major, `cell = y * width + x`, with `y = 0` the top
//! row. Within a tick the robot's block move is applied before the human's
//! move, so the robot can clear a path the human takes in the same step.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config, Error, Result};
use crate::features::{Active, Featurizer};
use crate::mdp::{TabularMdp, MAX_DENSE_STATES};

pub const NUM_HUMAN_ACTIONS: usize = 5;
pub const STAY: usize = 4;
pub const NOOP: usize = 0;
pub const DEFAULT_HORIZON: usize = 40;

/// Base channels: human, goal, block occupancy.
const BASE_CHANNELS: usize = 3;

/// Movement directions in action-index order. Human actions `0..4` are these
/// directions and `4` is stay; robot action `1 + 4 * block + dir` pushes a block.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    Left,
    Right,
    Up,
    Down,
}

impl Direction {
    pub const ALL: [Direction; 4] = [Direction::Left, Direction::Right, Direction::Up, Direction::Down];

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    fn delta(self) -> (i64, i64) {
        match self {
            Direction::Left => (-1, 0),
            Direction::Right => (1, 0),
            Direction::Up => (0, -1),
            Direction::Down => (0, 1),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RobotAction {
    Noop,
    Push { block: usize, dir: Direction },
}

impl RobotAction {
    pub fn decode(a_r: usize, num_blocks: usize) -> Option<Self> {
        if a_r == NOOP {
            return Some(RobotAction::Noop);
        }
        let k = a_r - 1;
        if k >= 4 * num_blocks {
            return None;
        }
        Some(RobotAction::Push {
            block: k / 4,
            dir: Direction::ALL[k % 4],
        })
    }

    pub fn encode(self) -> usize {
        match self {
            RobotAction::Noop => NOOP,
            RobotAction::Push { block, dir } => 1 + 4 * block + dir as usize,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridConfig {
    pub width: usize,
    pub height: usize,
    pub num_blocks: usize,
    pub goal_cell: usize,
    pub horizon: usize,
    pub seed: u64,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self::from_seed(5, 5, 2, 0).expect("default grid is valid")
    }
}

impl GridConfig {
    pub fn new(width: usize, height: usize, num_blocks: usize, goal_cell: usize, seed: u64) -> Result<Self> {
        let c = Self {
            width,
            height,
            num_blocks,
            goal_cell,
            horizon: DEFAULT_HORIZON,
            seed,
        };
        c.validate()?;
        Ok(c)
    }

    /// Goal drawn uniformly from the layout seed.
    pub fn from_seed(width: usize, height: usize, num_blocks: usize, seed: u64) -> Result<Self> {
        if width == 0 || height == 0 {
            return config("grid dimensions must be positive");
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6f61_6c5f_6365_6c6c);
        let goal = rng.gen_range(0..width * height);
        Self::new(width, height, num_blocks, goal, seed)
    }

    pub fn with_horizon(mut self, horizon: usize) -> Result<Self> {
        self.horizon = horizon;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return config("grid dimensions must be positive");
        }
        if self.num_blocks + 2 > self.num_cells() {
            return config(format!(
                "{} blocks do not fit a {}x{} grid with a human and a goal",
                self.num_blocks, self.width, self.height
            ));
        }
        if self.goal_cell >= self.num_cells() {
            return config(format!("goal cell {} out of bounds", self.goal_cell));
        }
        if self.horizon == 0 {
            return config("horizon must be positive");
        }
        Ok(())
    }

    pub fn num_cells(&self) -> usize {
        self.width * self.height
    }

    pub fn num_robot_actions(&self) -> usize {
        4 * self.num_blocks + 1
    }

    pub fn xy(&self, cell: usize) -> (usize, usize) {
        (cell % self.width, cell / self.width)
    }

    pub fn cell(&self, x: usize, y: usize) -> usize {
        y * self.width + x
    }

    /// Neighbor of `cell` in direction `dir`, if inside the grid.
    pub fn neighbor(&self, cell: usize, dir: Direction) -> Option<usize> {
        let (x, y) = self.xy(cell);
        let (dx, dy) = dir.delta();
        let nx = x as i64 + dx;
        let ny = y as i64 + dy;
        if nx < 0 || ny < 0 || nx >= self.width as i64 || ny >= self.height as i64 {
            return None;
        }
        Some(self.cell(nx as usize, ny as usize))
    }

    /// Uniform placement of human and blocks, avoiding the goal and each other.
    pub fn random_state<R: Rng + ?Sized>(&self, rng: &mut R) -> GridState {
        let mut free: Vec<usize> = (0..self.num_cells()).filter(|&c| c != self.goal_cell).collect();
        free.shuffle(rng);
        GridState {
            human_cell: free[0],
            block_cells: free[1..=self.num_blocks].to_vec(),
            steps_elapsed: 0,
            done: false,
        }
    }

    /// Initial state shared by the harness and the play service for a given episode seed.
    pub fn initial_state(&self, episode_seed: u64) -> GridState {
        let mut rng = ChaCha8Rng::seed_from_u64(episode_seed);
        self.random_state(&mut rng)
    }

    pub fn check_state(&self, s: &GridState) -> Result<()> {
        let n = self.num_cells();
        if s.block_cells.len() != self.num_blocks {
            return config(format!("state has {} blocks, config {}", s.block_cells.len(), self.num_blocks));
        }
        if s.human_cell >= n || s.block_cells.iter().any(|&b| b >= n) {
            return config("cell out of bounds");
        }
        if s.block_cells.contains(&s.human_cell) {
            return config("human shares a cell with a block");
        }
        if s.block_cells.contains(&self.goal_cell) {
            return config("block on the goal");
        }
        for (i, b) in s.block_cells.iter().enumerate() {
            if s.block_cells[..i].contains(b) {
                return config("two blocks share a cell");
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GridState {
    pub human_cell: usize,
    pub block_cells: Vec<usize>,
    pub steps_elapsed: usize,
    pub done: bool,
}

impl GridState {
    pub fn at_goal(&self, config: &GridConfig) -> bool {
        self.human_cell == config.goal_cell
    }
}

/// Applies the robot push, then the human move.
pub fn grid_step(state: &GridState, a_h: usize, a_r: usize, config: &GridConfig) -> Result<GridState> {
    if state.done {
        return Err(Error::Usage("cannot step a finished episode".into()));
    }
    if a_h >= NUM_HUMAN_ACTIONS {
        return Err(Error::Config(format!("human action {a_h} out of range 0..{NUM_HUMAN_ACTIONS}")));
    }
    let robot = RobotAction::decode(a_r, config.num_blocks)
        .ok_or_else(|| Error::Config(format!("robot action {a_r} out of range 0..{}", config.num_robot_actions())))?;
    let mut next = state.clone();
    if let RobotAction::Push { block, dir } = robot {
        if let Some(target) = config.neighbor(next.block_cells[block], dir) {
            let free = target != next.human_cell
                && target != config.goal_cell
                && !next.block_cells.contains(&target);
            if free {
                next.block_cells[block] = target;
            }
        }
    }
    if let Some(dir) = Direction::from_index(a_h) {
        if let Some(target) = config.neighbor(next.human_cell, dir) {
            if !next.block_cells.contains(&target) {
                next.human_cell = target;
            }
        }
    }
    next.steps_elapsed += 1;
    next.done = next.human_cell == config.goal_cell || next.steps_elapsed >= config.horizon;
    Ok(next)
}

/// JSON layout shared by the harness and the play service.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layout {
    pub width: usize,
    pub height: usize,
    pub goal: usize,
    pub human: usize,
    pub blocks: Vec<usize>,
    pub seed: u64,
}

impl Layout {
    pub fn new(config: &GridConfig, state: &GridState) -> Self {
        Self {
            width: config.width,
            height: config.height,
            goal: config.goal_cell,
            human: state.human_cell,
            blocks: state.block_cells.clone(),
            seed: config.seed,
        }
    }

    pub fn into_parts(self, horizon: usize) -> Result<(GridConfig, GridState)> {
        let config = GridConfig::new(self.width, self.height, self.blocks.len(), self.goal, self.seed)?
            .with_horizon(horizon)?;
        let state = GridState {
            human_cell: self.human,
            block_cells: self.blocks,
            steps_elapsed: 0,
            done: self.human == self.goal,
        };
        config.check_state(&state)?;
        Ok((config, state))
    }
}

/// Channel-last features: index `cell * C + channel`. Channels are human,
/// goal, blocks, then one constant plane per human action when `a_h` is
/// given, then one per robot action when `a_r` is given.
#[derive(Clone, Debug)]
pub struct GridFeaturizer {
    pub config: GridConfig,
}

impl GridFeaturizer {
    pub fn new(config: GridConfig) -> Self {
        Self { config }
    }

    fn channels(&self, with_human: bool, with_robot: bool) -> usize {
        BASE_CHANNELS
            + if with_human { NUM_HUMAN_ACTIONS } else { 0 }
            + if with_robot { self.config.num_robot_actions() } else { 0 }
    }
}

impl Featurizer for GridFeaturizer {
    type Obs = GridState;

    fn num_human_actions(&self) -> usize {
        NUM_HUMAN_ACTIONS
    }

    fn num_robot_actions(&self) -> usize {
        self.config.num_robot_actions()
    }

    fn dim(&self, with_human: bool, with_robot: bool) -> usize {
        self.config.num_cells() * self.channels(with_human, with_robot)
    }

    fn active(&self, s: &GridState, a_h: Option<usize>, a_r: Option<usize>) -> Active {
        let c = self.channels(a_h.is_some(), a_r.is_some());
        let idx = |cell: usize, ch: usize| (cell * c + ch) as u32;
        let mut out = Vec::with_capacity(2 + s.block_cells.len() + 2 * self.config.num_cells());
        out.push(idx(s.human_cell, 0));
        out.push(idx(self.config.goal_cell, 1));
        out.extend(s.block_cells.iter().map(|&b| idx(b, 2)));
        let mut next_channel = BASE_CHANNELS;
        if let Some(a) = a_h {
            out.extend((0..self.config.num_cells()).map(|cell| idx(cell, next_channel + a)));
            next_channel += NUM_HUMAN_ACTIONS;
        }
        if let Some(a) = a_r {
            out.extend((0..self.config.num_cells()).map(|cell| idx(cell, next_channel + a)));
        }
        out.sort_unstable();
        out
    }
}

/// Flat feature vector for `(state, a_h?, a_r?)`.
pub fn featurize(state: &GridState, a_h: Option<usize>, a_r: Option<usize>, config: &GridConfig) -> Vec<f64> {
    let f = GridFeaturizer::new(config.clone());
    crate::features::to_dense(&f.active(state, a_h, a_r), f.dim(a_h.is_some(), a_r.is_some()))
}

/// Ordered placements of `k` items among `n` cells, `None` on overflow past `cap`.
fn placements(n: usize, k: usize, cap: usize) -> Option<usize> {
    let mut acc = 1usize;
    for i in 0..k {
        acc = acc.checked_mul(n.checked_sub(i)?)?;
        if acc > cap {
            return None;
        }
    }
    Some(acc)
}

/// Enumerated gridworld. All states with the human on the goal collapse into
/// one absorbing state. The step counter and horizon are not part of the
/// tabular state.
#[derive(Clone, Debug)]
pub struct GridTabular {
    pub config: GridConfig,
    pub mdp: TabularMdp,
    states: Vec<(usize, Vec<usize>)>,
    index: HashMap<(usize, Vec<usize>), usize>,
    goal_index: usize,
}

impl GridTabular {
    pub fn num_states(&self) -> usize {
        self.states.len()
    }

    pub fn goal_index(&self) -> usize {
        self.goal_index
    }

    pub fn index_of(&self, s: &GridState) -> Option<usize> {
        if s.human_cell == self.config.goal_cell {
            return Some(self.goal_index);
        }
        self.index.get(&(s.human_cell, s.block_cells.clone())).copied()
    }

    pub fn state_of(&self, i: usize) -> GridState {
        let (human, blocks) = self.states[i].clone();
        GridState {
            done: human == self.config.goal_cell,
            human_cell: human,
            block_cells: blocks,
            steps_elapsed: 0,
        }
    }
}

/// Exact tabular form of the gridworld, for configurations with at most
/// [`MAX_DENSE_STATES`] enumerable states.
pub fn grid_to_tabular(config: &GridConfig) -> Result<GridTabular> {
    config.validate()?;
    let n = config.num_cells();
    let too_big = || {
        Error::Config(format!(
            "{}x{} grid with {} blocks has more than {MAX_DENSE_STATES} enumerable states",
            config.width, config.height, config.num_blocks
        ))
    };
    let per_human = placements(n - 2, config.num_blocks, MAX_DENSE_STATES).ok_or_else(too_big)?;
    let total = (n - 1)
        .checked_mul(per_human)
        .and_then(|v| v.checked_add(1))
        .filter(|&v| v <= MAX_DENSE_STATES)
        .ok_or_else(too_big)?;

    let mut states = Vec::with_capacity(total);
    for human in (0..n).filter(|&c| c != config.goal_cell) {
        let free: Vec<usize> = (0..n).filter(|&c| c != config.goal_cell && c != human).collect();
        let mut current = Vec::with_capacity(config.num_blocks);
        enumerate_ordered(&free, config.num_blocks, &mut current, &mut |blocks| {
            states.push((human, blocks.to_vec()));
        });
    }
    let goal_index = states.len();
    let parked: Vec<usize> = (0..n)
        .filter(|&c| c != config.goal_cell)
        .take(config.num_blocks)
        .collect();
    states.push((config.goal_cell, parked));
    debug_assert_eq!(states.len(), total);

    let index: HashMap<(usize, Vec<usize>), usize> =
        states.iter().enumerate().map(|(i, s)| (s.clone(), i)).collect();

    let nr = config.num_robot_actions();
    let ns = states.len();
    let mut transition = vec![0.0; ns * NUM_HUMAN_ACTIONS * nr * ns];
    let unbounded = GridConfig {
        horizon: usize::MAX,
        ..config.clone()
    };
    for (i, (human, blocks)) in states.iter().enumerate() {
        for ah in 0..NUM_HUMAN_ACTIONS {
            for ar in 0..nr {
                let j = if i == goal_index {
                    goal_index
                } else {
                    let s = GridState {
                        human_cell: *human,
                        block_cells: blocks.clone(),
                        steps_elapsed: 0,
                        done: false,
                    };
                    let next = grid_step(&s, ah, ar, &unbounded)?;
                    if next.human_cell == config.goal_cell {
                        goal_index
                    } else {
                        index[&(next.human_cell, next.block_cells)]
                    }
                };
                transition[((i * NUM_HUMAN_ACTIONS + ah) * nr + ar) * ns + j] = 1.0;
            }
        }
    }
    let mut init = vec![1.0 / (ns - 1) as f64; ns];
    init[goal_index] = 0.0;
    if ns == 1 {
        init[0] = 1.0;
    }
    let mdp = TabularMdp::new(ns, NUM_HUMAN_ACTIONS, nr, transition, init)?;
    Ok(GridTabular {
        config: config.clone(),
        mdp,
        states,
        index,
        goal_index,
    })
}

fn enumerate_ordered(free: &[usize], k: usize, current: &mut Vec<usize>, f: &mut impl FnMut(&[usize])) {
    if current.len() == k {
        f(current);
        return;
    }
    for &c in free {
        if !current.contains(&c) {
            current.push(c);
            enumerate_ordered(free, k, current, f);
            current.pop();
        }
    }
}
