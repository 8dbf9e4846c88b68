use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::gate::Adjacency;

/// One complete episode of length `T`. Observations, states and action
/// masks hold `T + 1` entries (the last is the post-terminal or truncation
/// view); everything else holds `T`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub obs: Vec<Vec<Vec<f64>>>,
    pub states: Vec<Vec<f64>>,
    pub avail: Vec<Vec<Vec<bool>>>,
    pub actions: Vec<Vec<usize>>,
    pub rewards: Vec<f64>,
    /// True only on a step the environment ended; hitting the step limit is
    /// a truncation and bootstraps.
    pub terminated: Vec<bool>,
    /// Gated adjacency used at each step.
    pub adjacency: Vec<Adjacency>,
    pub success: bool,
}

impl EpisodeRecord {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn episode_return(&self) -> f64 {
        self.rewards.iter().sum()
    }

    pub fn edges(&self) -> usize {
        self.adjacency.iter().map(Adjacency::edges).sum()
    }

    /// Sequence lengths agree.
    pub fn is_consistent(&self) -> bool {
        let t = self.len();
        t > 0
            && self.obs.len() == t + 1
            && self.states.len() == t + 1
            && self.avail.len() == t + 1
            && self.rewards.len() == t
            && self.terminated.len() == t
            && self.adjacency.len() == t
    }
}

/// Ring buffer of complete episodes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReplayBuffer {
    capacity: usize,
    episodes: Vec<EpisodeRecord>,
    next: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "replay capacity must be positive");
        Self {
            capacity,
            episodes: Vec::new(),
            next: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.episodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.episodes.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn push(&mut self, episode: EpisodeRecord) {
        if self.episodes.len() < self.capacity {
            self.episodes.push(episode);
        } else {
            self.episodes[self.next] = episode;
        }
        self.next = (self.next + 1) % self.capacity;
    }

    /// `batch` distinct episodes, uniformly; `None` until enough are stored.
    pub fn sample<R: Rng + ?Sized>(
        &self,
        batch: usize,
        rng: &mut R,
    ) -> Option<Vec<&EpisodeRecord>> {
        if batch == 0 || batch > self.episodes.len() {
            return None;
        }
        Some(
            index::sample(rng, self.episodes.len(), batch)
                .into_iter()
                .map(|i| &self.episodes[i])
                .collect(),
        )
    }
}
