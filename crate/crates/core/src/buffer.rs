//! Trajectory storage with geometric future-state sampling.
//!
//! Episodes are kept whole so that a future state can be drawn from the same
//! trajectory as its anchor. No reward is ever stored: every consumer
//! recomputes rewards from the current representations.

use std::collections::VecDeque;

use rand::Rng;
use rand_distr::{Distribution, Geometric};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_CAPACITY: usize = 100_000;
/// Redraws of `K` before a future that runs off the episode is clamped.
pub const MAX_RESAMPLES: usize = 16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Step<O> {
    pub obs: O,
    pub a_h: usize,
    pub a_r: usize,
}

/// `steps[t]` holds `s_t` and the actions taken there; `final_obs` is the
/// state after the last step. `terminal` marks an episode that ended in an
/// absorbing state rather than a time limit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Episode<O> {
    pub steps: Vec<Step<O>>,
    pub final_obs: O,
    pub terminal: bool,
}

impl<O> Episode<O> {
    pub fn new(final_obs: O) -> Self {
        Self {
            steps: Vec::new(),
            final_obs,
            terminal: false,
        }
    }

    /// Number of transitions. An episode with `k` states has length `k - 1`.
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// `s_t` for `t` in `0..=len()`.
    pub fn state(&self, t: usize) -> &O {
        if t < self.steps.len() {
            &self.steps[t].obs
        } else {
            &self.final_obs
        }
    }
}

/// One anchor with its sampled future. `k` is the offset actually used,
/// after clamping.
#[derive(Clone, Debug, PartialEq)]
pub struct FutureSample<O> {
    pub obs: O,
    pub a_h: usize,
    pub a_r: usize,
    pub future: O,
    pub k: usize,
    pub clamped: bool,
}

/// Critic training record. There is deliberately no reward field.
#[derive(Clone, Debug, PartialEq)]
pub struct RLTransition<O> {
    pub s: O,
    pub a_r: usize,
    pub a_h: usize,
    pub g: O,
    pub s_next: O,
    /// The next state is absorbing, so the target carries no bootstrap term.
    pub done: bool,
}

#[derive(Clone, Debug)]
pub struct EpisodeBuffer<O> {
    capacity: usize,
    episodes: VecDeque<Episode<O>>,
    // prefix[i] = transitions in episodes[..i]; rebuilt on every push
    prefix: Vec<usize>,
    transitions: usize,
}

impl<O: Clone> EpisodeBuffer<O> {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::Config("buffer capacity must be positive".into()));
        }
        Ok(Self {
            capacity,
            episodes: VecDeque::new(),
            prefix: vec![0],
            transitions: 0,
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn num_transitions(&self) -> usize {
        self.transitions
    }

    pub fn num_episodes(&self) -> usize {
        self.episodes.len()
    }

    pub fn episodes(&self) -> impl Iterator<Item = &Episode<O>> {
        self.episodes.iter()
    }

    /// Appends an episode and evicts the oldest ones while over capacity.
    /// The newest episode is always kept. Empty episodes are dropped.
    pub fn push(&mut self, episode: Episode<O>) {
        if episode.is_empty() {
            return;
        }
        self.transitions += episode.len();
        self.episodes.push_back(episode);
        while self.transitions > self.capacity && self.episodes.len() > 1 {
            let old = self.episodes.pop_front().expect("nonempty");
            self.transitions -= old.len();
        }
        self.prefix.clear();
        self.prefix.push(0);
        let mut acc = 0;
        for ep in &self.episodes {
            acc += ep.len();
            self.prefix.push(acc);
        }
    }

    /// Uniform over stored transitions, which is the same as picking an
    /// episode in proportion to its length and then a uniform anchor.
    fn sample_anchor<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<(usize, usize)> {
        if self.transitions == 0 {
            return Err(Error::Usage("cannot sample from an empty buffer".into()));
        }
        let j = rng.gen_range(0..self.transitions);
        let e = self.prefix.partition_point(|&p| p <= j) - 1;
        Ok((e, j - self.prefix[e]))
    }

    /// Anchor `(s_t, a^H_t, a^R_t)` and `g = s_{t+K}` with
    /// `P(K = k) = (1 - gamma) gamma^(k-1)`, `k >= 1`.
    pub fn sample_future<R: Rng + ?Sized>(&self, gamma_future: f64, rng: &mut R) -> Result<FutureSample<O>> {
        let geom = geometric(gamma_future)?;
        let (e, t) = self.sample_anchor(rng)?;
        let ep = &self.episodes[e];
        let (k, clamped) = draw_offset(&geom, ep.len() - t, rng);
        let step = &ep.steps[t];
        Ok(FutureSample {
            obs: step.obs.clone(),
            a_h: step.a_h,
            a_r: step.a_r,
            future: ep.state(t + k).clone(),
            k,
            clamped,
        })
    }

    pub fn sample_futures<R: Rng + ?Sized>(
        &self,
        n: usize,
        gamma_future: f64,
        rng: &mut R,
    ) -> Result<Vec<FutureSample<O>>> {
        (0..n).map(|_| self.sample_future(gamma_future, rng)).collect()
    }

    pub fn sample_transitions<R: Rng + ?Sized>(
        &self,
        n: usize,
        gamma_future: f64,
        rng: &mut R,
    ) -> Result<Vec<RLTransition<O>>> {
        let geom = geometric(gamma_future)?;
        (0..n)
            .map(|_| {
                let (e, t) = self.sample_anchor(rng)?;
                let ep = &self.episodes[e];
                let (k, _) = draw_offset(&geom, ep.len() - t, rng);
                let step = &ep.steps[t];
                Ok(RLTransition {
                    s: step.obs.clone(),
                    a_r: step.a_r,
                    a_h: step.a_h,
                    g: ep.state(t + k).clone(),
                    s_next: ep.state(t + 1).clone(),
                    done: ep.terminal && t + 1 == ep.len(),
                })
            })
            .collect()
    }
}

/// Position of a stored transition: episode slot and step index.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Anchor {
    pub episode: usize,
    pub t: usize,
}

impl<O: Clone> EpisodeBuffer<O> {
    /// Every stored transition whose step satisfies `pred`.
    pub fn anchors_where(&self, mut pred: impl FnMut(&Step<O>) -> bool) -> Vec<Anchor> {
        let mut out = Vec::new();
        for (e, ep) in self.episodes.iter().enumerate() {
            for (t, st) in ep.steps.iter().enumerate() {
                if pred(st) {
                    out.push(Anchor { episode: e, t });
                }
            }
        }
        out
    }

    pub fn step_at(&self, anchor: Anchor) -> Option<&Step<O>> {
        self.episodes.get(anchor.episode)?.steps.get(anchor.t)
    }

    /// Future of a fixed anchor, same offset law as [`Self::sample_future`].
    pub fn sample_future_at<R: Rng + ?Sized>(
        &self,
        anchor: Anchor,
        gamma_future: f64,
        rng: &mut R,
    ) -> Result<FutureSample<O>> {
        let geom = geometric(gamma_future)?;
        let ep = self
            .episodes
            .get(anchor.episode)
            .filter(|ep| anchor.t < ep.len())
            .ok_or_else(|| Error::Usage("anchor is not in the buffer".into()))?;
        let (k, clamped) = draw_offset(&geom, ep.len() - anchor.t, rng);
        let step = &ep.steps[anchor.t];
        Ok(FutureSample {
            obs: step.obs.clone(),
            a_h: step.a_h,
            a_r: step.a_r,
            future: ep.state(anchor.t + k).clone(),
            k,
            clamped,
        })
    }
}

fn geometric(gamma_future: f64) -> Result<Geometric> {
    if !(gamma_future > 0.0 && gamma_future < 1.0) {
        return Err(Error::Config(format!("gamma_future must lie in (0,1), got {gamma_future}")));
    }
    Geometric::new(1.0 - gamma_future).map_err(|e| Error::Config(e.to_string()))
}

/// `K = 1 + failures`; redrawn while it overshoots `remaining`, then clamped.
fn draw_offset<R: Rng + ?Sized>(geom: &Geometric, remaining: usize, rng: &mut R) -> (usize, bool) {
    for _ in 0..=MAX_RESAMPLES {
        let k = 1 + geom.sample(rng) as usize;
        if k <= remaining {
            return (k, false);
        }
    }
    (remaining, true)
}
