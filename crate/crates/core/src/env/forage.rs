use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{check_actions, EnvError, EnvSpec, Environment, StepResult};

const VIEW_RADIUS: isize = 2;
const PLACEMENT_ATTEMPTS: usize = 1000;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ForageAction {
    Up = 0,
    Down = 1,
    Left = 2,
    Right = 3,
    Stay = 4,
    Load = 5,
}

#[derive(Clone, Debug, PartialEq)]
struct Food {
    row: usize,
    col: usize,
    level: usize,
}

/// Level-based foraging on a square grid. A food item is collected when the
/// agents adjacent to it that choose `Load` have a summed level at least the
/// food's level; each collection pays `food level / total food level`.
#[derive(Clone, Debug)]
pub struct Forage {
    grid: usize,
    n_food: usize,
    max_level: usize,
    agents: Vec<(usize, usize)>,
    levels: Vec<usize>,
    food: Vec<Food>,
    total_food_level: f64,
    finished: bool,
    spec: EnvSpec,
}

impl Forage {
    pub fn new(
        grid: usize,
        n_agents: usize,
        n_food: usize,
        max_level: usize,
    ) -> Result<Self, EnvError> {
        if grid < 3 {
            return Err(EnvError::Config(format!(
                "grid must be at least 3, got {grid}"
            )));
        }
        if n_agents == 0 || n_food == 0 || max_level == 0 {
            return Err(EnvError::Config(
                "agents, food and levels must all be positive".into(),
            ));
        }
        let window = (2 * VIEW_RADIUS + 1) as usize;
        let spec = EnvSpec {
            n_agents,
            obs_size: 2 * window * window + 1,
            state_size: 2 * grid * grid,
            n_actions: 6,
            episode_limit: 50,
            reward_range: (0.0, 1.0),
        };
        Ok(Self {
            grid,
            n_food,
            max_level,
            agents: Vec::new(),
            levels: Vec::new(),
            food: Vec::new(),
            total_food_level: 0.0,
            finished: true,
            spec,
        })
    }

    pub fn agent_positions(&self) -> &[(usize, usize)] {
        &self.agents
    }

    pub fn agent_levels(&self) -> &[usize] {
        &self.levels
    }

    /// (row, col, level) of every food item still on the grid.
    pub fn food(&self) -> Vec<(usize, usize, usize)> {
        self.food.iter().map(|f| (f.row, f.col, f.level)).collect()
    }

    /// Explicit layout, for scripted scenarios.
    pub fn set_layout(
        &mut self,
        agents: &[(usize, usize, usize)],
        food: &[(usize, usize, usize)],
    ) -> Result<StepResult, EnvError> {
        if agents.len() != self.spec.n_agents || food.is_empty() {
            return Err(EnvError::Config("layout does not match the task".into()));
        }
        let mut cells: Vec<(usize, usize)> = agents
            .iter()
            .map(|&(r, c, _)| (r, c))
            .chain(food.iter().map(|&(r, c, _)| (r, c)))
            .collect();
        let total = cells.len();
        cells.sort_unstable();
        cells.dedup();
        let in_grid = cells.iter().all(|&(r, c)| r < self.grid && c < self.grid);
        if cells.len() != total || !in_grid {
            return Err(EnvError::Config(
                "layout cells overlap or leave the grid".into(),
            ));
        }
        self.agents = agents.iter().map(|&(r, c, _)| (r, c)).collect();
        self.levels = agents.iter().map(|&(_, _, l)| l).collect();
        self.food = food
            .iter()
            .map(|&(row, col, level)| Food { row, col, level })
            .collect();
        self.total_food_level = self.food.iter().map(|f| f.level as f64).sum();
        self.finished = false;
        Ok(self.result(0.0, false))
    }

    fn occupied(&self, r: usize, c: usize) -> bool {
        self.agents.contains(&(r, c)) || self.food.iter().any(|f| (f.row, f.col) == (r, c))
    }

    fn result(&self, reward: f64, done: bool) -> StepResult {
        let g = self.grid as isize;
        let lvl = self.max_level as f64;
        let mut agent_layer = vec![0.0; self.grid * self.grid];
        let mut food_layer = vec![0.0; self.grid * self.grid];
        for (&(r, c), &l) in self.agents.iter().zip(&self.levels) {
            agent_layer[r * self.grid + c] = l as f64 / lvl;
        }
        for f in &self.food {
            food_layer[f.row * self.grid + f.col] = f.level as f64 / lvl;
        }
        let window = (2 * VIEW_RADIUS + 1) as usize;
        let observations = self
            .agents
            .iter()
            .zip(&self.levels)
            .map(|(&(r, c), &l)| {
                let mut obs = Vec::with_capacity(2 * window * window + 1);
                for layer in [&agent_layer, &food_layer] {
                    for dr in -VIEW_RADIUS..=VIEW_RADIUS {
                        for dc in -VIEW_RADIUS..=VIEW_RADIUS {
                            let (rr, cc) = (r as isize + dr, c as isize + dc);
                            let inside = (0..g).contains(&rr) && (0..g).contains(&cc);
                            obs.push(if inside {
                                layer[(rr * g + cc) as usize]
                            } else {
                                0.0
                            });
                        }
                    }
                }
                obs.push(l as f64 / lvl);
                obs
            })
            .collect();
        let mut state = agent_layer;
        state.extend(food_layer);
        StepResult {
            observations,
            reward,
            done,
            state,
            avail_actions: vec![vec![true; 6]; self.spec.n_agents],
            success: done && self.food.is_empty(),
        }
    }
}

impl Environment for Forage {
    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn reset(&mut self, rng: &mut ChaCha8Rng) -> Result<StepResult, EnvError> {
        let seed: u64 = rng.random();
        let mut local = ChaCha8Rng::seed_from_u64(seed);
        let n = self.spec.n_agents;
        let cells = self.grid * self.grid;
        let needed = n + self.n_food;
        let mut chosen: Vec<usize> = Vec::with_capacity(needed);
        let mut attempts = 0;
        while chosen.len() < needed {
            if attempts >= PLACEMENT_ATTEMPTS {
                return Err(EnvError::Placement { attempts, seed });
            }
            attempts += 1;
            let cell = local.random_range(0..cells);
            if !chosen.contains(&cell) {
                chosen.push(cell);
            }
        }
        self.levels = (0..n)
            .map(|_| local.random_range(1..=self.max_level))
            .collect();
        let cap = self.max_level.min(self.levels.iter().sum());
        self.agents = chosen[..n]
            .iter()
            .map(|&c| (c / self.grid, c % self.grid))
            .collect();
        self.food = chosen[n..]
            .iter()
            .map(|&c| Food {
                row: c / self.grid,
                col: c % self.grid,
                level: local.random_range(1..=cap),
            })
            .collect();
        self.total_food_level = self.food.iter().map(|f| f.level as f64).sum();
        self.finished = false;
        Ok(self.result(0.0, false))
    }

    fn step(&mut self, actions: &[usize]) -> Result<StepResult, EnvError> {
        if self.finished {
            return Err(EnvError::EpisodeOver);
        }
        check_actions(actions, &self.spec)?;
        let g = self.grid as isize;

        // movement: a move into a wall, food or any currently occupied cell is
        // a no-op, as is a move into a cell targeted by another agent
        let targets: Vec<Option<(usize, usize)>> = self
            .agents
            .iter()
            .zip(actions)
            .map(|(&(r, c), &a)| {
                let (dr, dc) = match a {
                    0 => (-1, 0),
                    1 => (1, 0),
                    2 => (0, -1),
                    3 => (0, 1),
                    _ => return None,
                };
                let (rr, cc) = (r as isize + dr, c as isize + dc);
                if !(0..g).contains(&rr) || !(0..g).contains(&cc) {
                    return None;
                }
                let cell = (rr as usize, cc as usize);
                (!self.occupied(cell.0, cell.1)).then_some(cell)
            })
            .collect();
        for i in 0..self.agents.len() {
            if let Some(cell) = targets[i] {
                let contested = targets
                    .iter()
                    .enumerate()
                    .any(|(j, t)| j != i && *t == Some(cell));
                if !contested {
                    self.agents[i] = cell;
                }
            }
        }

        let mut reward = 0.0;
        let mut remaining = Vec::with_capacity(self.food.len());
        for f in std::mem::take(&mut self.food) {
            let power: usize = self
                .agents
                .iter()
                .zip(&self.levels)
                .zip(actions)
                .filter(|(((r, c), _), &a)| {
                    a == ForageAction::Load as usize && r.abs_diff(f.row) + c.abs_diff(f.col) == 1
                })
                .map(|((_, &l), _)| l)
                .sum();
            if power > 0 && power >= f.level {
                reward += f.level as f64 / self.total_food_level;
            } else {
                remaining.push(f);
            }
        }
        self.food = remaining;
        let done = self.food.is_empty();
        self.finished = done;
        Ok(self.result(reward, done))
    }

    fn boxed_clone(&self) -> Box<dyn Environment> {
        Box::new(self.clone())
    }
}
