//! Cooperative Dec-POMDP tasks.
//!
//! Both tasks return a [`StepResult`] from `reset` and `step`: per-agent
//! observations, a single team reward, a termination flag, the true global
//! state (used only by centralized ablations) and per-agent action masks.
//! Episode limits are enforced by the caller through [`EnvSpec::episode_limit`].

mod forage;
mod hallway;

pub use forage::{Forage, ForageAction};
pub use hallway::{Hallway, HallwayAction};

use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EnvError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("agent {agent}: action {action} is not one of {count} actions")]
    InvalidAction {
        agent: usize,
        action: usize,
        count: usize,
    },
    #[error("expected {expected} actions, got {got}")]
    ActionCount { expected: usize, got: usize },
    #[error("step called on a finished episode; reset first")]
    EpisodeOver,
    #[error("could not place entities after {attempts} attempts (episode seed {seed})")]
    Placement { attempts: usize, seed: u64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnvSpec {
    pub n_agents: usize,
    pub obs_size: usize,
    pub state_size: usize,
    pub n_actions: usize,
    pub episode_limit: usize,
    /// (min, max) team reward of a single step.
    pub reward_range: (f64, f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepResult {
    /// `n_agents` rows of `obs_size` values.
    pub observations: Vec<Vec<f64>>,
    pub reward: f64,
    pub done: bool,
    pub state: Vec<f64>,
    /// `n_agents` rows of `n_actions` flags.
    pub avail_actions: Vec<Vec<bool>>,
    /// Task solved on this step.
    pub success: bool,
}

pub trait Environment: Send + Sync {
    fn spec(&self) -> &EnvSpec;
    fn reset(&mut self, rng: &mut ChaCha8Rng) -> Result<StepResult, EnvError>;
    fn step(&mut self, actions: &[usize]) -> Result<StepResult, EnvError>;
    fn boxed_clone(&self) -> Box<dyn Environment>;
}

fn check_actions(actions: &[usize], spec: &EnvSpec) -> Result<(), EnvError> {
    if actions.len() != spec.n_agents {
        return Err(EnvError::ActionCount {
            expected: spec.n_agents,
            got: actions.len(),
        });
    }
    if let Some((agent, &action)) = actions
        .iter()
        .enumerate()
        .find(|(_, &a)| a >= spec.n_actions)
    {
        return Err(EnvError::InvalidAction {
            agent,
            action,
            count: spec.n_actions,
        });
    }
    Ok(())
}

fn one_hot(size: usize, index: usize) -> Vec<f64> {
    let mut v = vec![0.0; size];
    v[index] = 1.0;
    v
}
