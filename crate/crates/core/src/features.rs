//! Binary feature encodings shared by the encoders and the critic.
//!
//! Every input the networks see is a 0/1 vector, so it is carried as the list
//! of active coordinates. [`to_dense`] expands it when a flat vector is needed.

/// Indices of the coordinates equal to one.
pub type Active = Vec<u32>;

/// Maps observations, optionally joined with actions, to binary features.
///
/// The dimension depends only on which actions are present.
pub trait Featurizer {
    type Obs;

    fn num_human_actions(&self) -> usize;
    fn num_robot_actions(&self) -> usize;
    fn dim(&self, with_human: bool, with_robot: bool) -> usize;
    fn active(&self, obs: &Self::Obs, a_h: Option<usize>, a_r: Option<usize>) -> Active;
}

pub fn to_dense(active: &[u32], dim: usize) -> Vec<f64> {
    let mut v = vec![0.0; dim];
    for &i in active {
        v[i as usize] = 1.0;
    }
    v
}

/// One-hot state with one-hot action blocks appended after it.
#[derive(Clone, Copy, Debug)]
pub struct TabularFeaturizer {
    pub num_states: usize,
    pub num_human_actions: usize,
    pub num_robot_actions: usize,
}

impl TabularFeaturizer {
    pub fn new(num_states: usize, num_human_actions: usize, num_robot_actions: usize) -> Self {
        Self {
            num_states,
            num_human_actions,
            num_robot_actions,
        }
    }
}

impl Featurizer for TabularFeaturizer {
    type Obs = usize;

    fn num_human_actions(&self) -> usize {
        self.num_human_actions
    }

    fn num_robot_actions(&self) -> usize {
        self.num_robot_actions
    }

    fn dim(&self, with_human: bool, with_robot: bool) -> usize {
        self.num_states
            + if with_human { self.num_human_actions } else { 0 }
            + if with_robot { self.num_robot_actions } else { 0 }
    }

    fn active(&self, obs: &usize, a_h: Option<usize>, a_r: Option<usize>) -> Active {
        let mut out = vec![*obs as u32];
        let mut offset = self.num_states;
        if let Some(a) = a_h {
            out.push((offset + a) as u32);
            offset += self.num_human_actions;
        }
        if let Some(a) = a_r {
            out.push((offset + a) as u32);
        }
        out
    }
}

/// Joint one-hot over `(state, a_h, a_r)` / `(state, a_r)` / `state`: every
/// distinct input gets its own coordinate. A linear encoder over this is a
/// lookup table, which is what the exact-recovery experiments use.
#[derive(Clone, Copy, Debug)]
pub struct JointOneHotFeaturizer {
    pub num_states: usize,
    pub num_human_actions: usize,
    pub num_robot_actions: usize,
}

impl Featurizer for JointOneHotFeaturizer {
    type Obs = usize;

    fn num_human_actions(&self) -> usize {
        self.num_human_actions
    }

    fn num_robot_actions(&self) -> usize {
        self.num_robot_actions
    }

    fn dim(&self, with_human: bool, with_robot: bool) -> usize {
        self.num_states
            * if with_human { self.num_human_actions } else { 1 }
            * if with_robot { self.num_robot_actions } else { 1 }
    }

    fn active(&self, obs: &usize, a_h: Option<usize>, a_r: Option<usize>) -> Active {
        let mut idx = *obs;
        if let Some(a) = a_h {
            idx = idx * self.num_human_actions + a;
        }
        if let Some(a) = a_r {
            idx = idx * self.num_robot_actions + a;
        }
        vec![idx as u32]
    }
}
