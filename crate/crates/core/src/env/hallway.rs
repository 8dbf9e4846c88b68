use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{check_actions, one_hot, EnvError, EnvSpec, Environment, StepResult};

pub const SUCCESS_REWARD: f64 = 10.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HallwayAction {
    Left = 0,
    Right = 1,
    Stay = 2,
}

/// One chain per agent; position 0 is the shared goal. Each agent observes
/// only its own position. The team is rewarded only if every agent enters
/// the goal on the same step; any arrival ends the episode.
#[derive(Clone, Debug)]
pub struct Hallway {
    lengths: Vec<usize>,
    positions: Vec<usize>,
    finished: bool,
    spec: EnvSpec,
}

impl Hallway {
    pub fn new(lengths: &[usize]) -> Result<Self, EnvError> {
        if lengths.is_empty() {
            return Err(EnvError::Config("hallway needs at least one chain".into()));
        }
        if lengths.contains(&0) {
            return Err(EnvError::Config("chain lengths must be at least 1".into()));
        }
        let max_len = *lengths.iter().max().expect("nonempty");
        let spec = EnvSpec {
            n_agents: lengths.len(),
            obs_size: max_len + 1,
            state_size: lengths.iter().map(|l| l + 1).sum(),
            n_actions: 3,
            episode_limit: 2 * max_len + 10,
            reward_range: (0.0, SUCCESS_REWARD),
        };
        Ok(Self {
            lengths: lengths.to_vec(),
            positions: vec![0; lengths.len()],
            finished: true,
            spec,
        })
    }

    pub fn positions(&self) -> &[usize] {
        &self.positions
    }

    /// Place agents at explicit positions (each in `1..=length`).
    pub fn set_positions(&mut self, positions: &[usize]) -> Result<StepResult, EnvError> {
        if positions.len() != self.lengths.len()
            || positions
                .iter()
                .zip(&self.lengths)
                .any(|(&p, &l)| p == 0 || p > l)
        {
            return Err(EnvError::Config(format!(
                "positions {positions:?} invalid for chains {:?}",
                self.lengths
            )));
        }
        self.positions = positions.to_vec();
        self.finished = false;
        Ok(self.result(0.0, false, false))
    }

    fn result(&self, reward: f64, done: bool, success: bool) -> StepResult {
        let obs_size = self.spec.obs_size;
        let observations = self
            .positions
            .iter()
            .map(|&p| one_hot(obs_size, p))
            .collect();
        let state = self
            .positions
            .iter()
            .zip(&self.lengths)
            .flat_map(|(&p, &l)| one_hot(l + 1, p))
            .collect();
        StepResult {
            observations,
            reward,
            done,
            state,
            avail_actions: vec![vec![true; 3]; self.lengths.len()],
            success,
        }
    }
}

impl Environment for Hallway {
    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn reset(&mut self, rng: &mut ChaCha8Rng) -> Result<StepResult, EnvError> {
        self.positions = self
            .lengths
            .iter()
            .map(|&l| rng.random_range(1..=l))
            .collect();
        self.finished = false;
        Ok(self.result(0.0, false, false))
    }

    fn step(&mut self, actions: &[usize]) -> Result<StepResult, EnvError> {
        if self.finished {
            return Err(EnvError::EpisodeOver);
        }
        check_actions(actions, &self.spec)?;
        for ((pos, &len), &a) in self.positions.iter_mut().zip(&self.lengths).zip(actions) {
            match a {
                0 => *pos = pos.saturating_sub(1),
                1 => *pos = (*pos + 1).min(len),
                _ => {}
            }
        }
        let arrived = self.positions.iter().filter(|&&p| p == 0).count();
        let (reward, done, success) = if arrived == self.positions.len() {
            (SUCCESS_REWARD, true, true)
        } else {
            (0.0, arrived > 0, false)
        };
        self.finished = done;
        Ok(self.result(reward, done, success))
    }

    fn boxed_clone(&self) -> Box<dyn Environment> {
        Box::new(self.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn layout_and_limits() {
        let h = Hallway::new(&[4, 6, 10]).unwrap();
        assert_eq!(h.spec().n_agents, 3);
        assert_eq!(h.spec().obs_size, 11);
        assert_eq!(h.spec().state_size, 5 + 7 + 11);
        assert_eq!(h.spec().episode_limit, 30);
        let small = Hallway::new(&[3, 5]).unwrap();
        assert_eq!(small.spec().episode_limit, 20);
        assert!(Hallway::new(&[]).is_err());
        assert!(Hallway::new(&[3, 0]).is_err());
    }

    #[test]
    fn reset_is_seeded_and_in_range() {
        let mut a = Hallway::new(&[3, 5]).unwrap();
        let mut b = a.clone();
        let ra = a.reset(&mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let rb = b.reset(&mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        assert_eq!(ra, rb);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            a.reset(&mut rng).unwrap();
            assert!((1..=3).contains(&a.positions()[0]));
            assert!((1..=5).contains(&a.positions()[1]));
        }
    }

    #[test]
    fn observation_is_own_position_only() {
        let mut h = Hallway::new(&[3, 5]).unwrap();
        let r1 = h.set_positions(&[2, 1]).unwrap();
        let r2 = h.set_positions(&[2, 5]).unwrap();
        assert_eq!(r1.observations[0], r2.observations[0]);
        assert_eq!(r1.observations[0], one_hot(6, 2));
        assert_ne!(r1.state, r2.state);
    }

    #[test]
    fn simultaneous_arrival_pays() {
        let mut h = Hallway::new(&[3, 5]).unwrap();
        h.set_positions(&[1, 1]).unwrap();
        let r = h.step(&[0, 0]).unwrap();
        assert_eq!(r.reward, 10.0);
        assert!(r.done && r.success);
        assert!(matches!(h.step(&[2, 2]), Err(EnvError::EpisodeOver)));
    }

    #[test]
    fn lone_arrival_ends_without_reward() {
        let mut h = Hallway::new(&[3, 5]).unwrap();
        h.set_positions(&[1, 3]).unwrap();
        let r = h.step(&[0, 0]).unwrap();
        assert_eq!(r.reward, 0.0);
        assert!(r.done && !r.success);
    }

    #[test]
    fn stay_and_clamping() {
        let mut h = Hallway::new(&[3, 5]).unwrap();
        h.set_positions(&[3, 2]).unwrap();
        h.step(&[2, 2]).unwrap();
        assert_eq!(h.positions(), &[3, 2]);
        h.step(&[1, 1]).unwrap();
        assert_eq!(h.positions(), &[3, 3]);
        assert!(matches!(
            h.step(&[3, 0]),
            Err(EnvError::InvalidAction { action: 3, .. })
        ));
        assert!(matches!(h.step(&[0]), Err(EnvError::ActionCount { .. })));
    }
}
