//! Episode collection, episodic replay, TD learning and target syncing.

mod loss;
mod optim;
mod replay;
mod rollout;

pub use loss::{td_loss, unroll, LossOutput, Unrolled};
pub use optim::Adam;
pub use replay::{EpisodeRecord, ReplayBuffer};
pub use rollout::collect_episode;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{ConfigError, RunConfig, Variant};
use crate::env::{EnvError, Environment};
use crate::model::Model;
use crate::nn::{NamedTensor, ParamStore};
use crate::qnet::SelectError;
use crate::tensor::TensorError;

pub const STATE_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("environment: {0}")]
    Env(#[from] EnvError),
    #[error("tensor: {0}")]
    Tensor(#[from] TensorError),
    #[error("action selection: {0}")]
    Select(#[from] SelectError),
    #[error("non-finite value in {0}; aborting")]
    NonFinite(String),
    #[error("empty batch")]
    EmptyBatch,
    #[error("{0}")]
    Invalid(String),
    #[error("rollout worker panicked")]
    Worker,
}

/// Serializable position of a ChaCha stream.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    /// Word position split into (high, low) halves.
    pub word_pos: [u64; 2],
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        let pos = rng.get_word_pos();
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: [(pos >> 64) as u64, pos as u64],
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos((u128::from(self.word_pos[0]) << 64) | u128::from(self.word_pos[1]));
        rng
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Counters {
    pub steps: usize,
    pub episodes: usize,
    pub updates: usize,
    /// Updates whose gate-parameter gradient was nonzero.
    pub gate_live_updates: usize,
    pub last_eval_step: usize,
    pub last_checkpoint_step: usize,
}

/// Running means between two metric records.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Window {
    pub loss_sum: f64,
    pub q_sum: f64,
    pub count: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct UpdateStats {
    pub loss: f64,
    pub mean_q_tot: f64,
    pub grad_norm: f64,
    pub gate_grad_norm: f64,
}

/// Aggregate of a batch of test episodes.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TestStats {
    pub episodes: usize,
    pub success_rate: f64,
    pub mean_return: f64,
    pub mean_edges_per_step: f64,
}

impl TestStats {
    pub fn from_episodes(episodes: &[EpisodeRecord]) -> Self {
        let k = episodes.len().max(1) as f64;
        let steps: usize = episodes.iter().map(EpisodeRecord::len).sum();
        let edges: usize = episodes.iter().map(EpisodeRecord::edges).sum();
        Self {
            episodes: episodes.len(),
            success_rate: episodes.iter().filter(|e| e.success).count() as f64 / k,
            mean_return: episodes
                .iter()
                .map(EpisodeRecord::episode_return)
                .sum::<f64>()
                / k,
            mean_edges_per_step: edges as f64 / steps.max(1) as f64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub step: usize,
    pub episode: usize,
    pub loss: Option<f64>,
    pub mean_q_tot: Option<f64>,
    pub test_success_rate: f64,
    pub test_return: f64,
    pub mean_edges_per_step: f64,
    pub epsilon: f64,
    pub temperature: f64,
}

pub enum TrainEvent {
    Metric(MetricRecord),
    /// A periodic checkpoint is due; capture it with [`Trainer::state`].
    Checkpoint,
}

/// Everything needed to continue a run bit-exactly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainerState {
    pub version: u32,
    pub config: RunConfig,
    pub online: Vec<NamedTensor>,
    pub target: Vec<NamedTensor>,
    pub optimizer: Adam,
    pub buffer: ReplayBuffer,
    pub counters: Counters,
    pub window: Window,
    pub collect_rng: RngState,
    pub train_rng: RngState,
    pub test_rng: RngState,
}

pub struct Trainer {
    pub config: RunConfig,
    pub model: Model,
    pub online: ParamStore,
    pub target: ParamStore,
    pub optimizer: Adam,
    pub buffer: ReplayBuffer,
    pub counters: Counters,
    window: Window,
    env: Box<dyn Environment>,
    limit: usize,
    collect_rng: ChaCha8Rng,
    train_rng: ChaCha8Rng,
    test_rng: ChaCha8Rng,
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

impl Trainer {
    pub fn new(config: RunConfig) -> Result<Self, TrainError> {
        config.validate()?;
        let env = config.env.build()?;
        let mut init = stream(config.seed, 0);
        let (model, online) = Model::new(&config, env.spec(), &mut init)?;
        let target = online.clone();
        let optimizer = Adam::new(&online, config.train.lr, config.train.grad_clip);
        let limit = config.env.episode_limit.unwrap_or(env.spec().episode_limit);
        Ok(Self {
            buffer: ReplayBuffer::new(config.train.buffer_size),
            collect_rng: stream(config.seed, 1),
            train_rng: stream(config.seed, 2),
            test_rng: stream(config.seed, 3),
            config,
            model,
            online,
            target,
            optimizer,
            counters: Counters::default(),
            window: Window::default(),
            env,
            limit,
        })
    }

    pub fn from_state(state: TrainerState) -> Result<Self, TrainError> {
        if state.version != STATE_VERSION {
            return Err(TrainError::Invalid(format!(
                "checkpoint version {} is not supported (expected {STATE_VERSION})",
                state.version
            )));
        }
        let mut t = Self::new(state.config)?;
        t.online.load_records(&state.online)?;
        t.target.load_records(&state.target)?;
        t.optimizer = state.optimizer;
        t.buffer = state.buffer;
        t.counters = state.counters;
        t.window = state.window;
        t.collect_rng = state.collect_rng.restore();
        t.train_rng = state.train_rng.restore();
        t.test_rng = state.test_rng.restore();
        Ok(t)
    }

    pub fn state(&self) -> TrainerState {
        TrainerState {
            version: STATE_VERSION,
            config: self.config.clone(),
            online: self.online.to_records(),
            target: self.target.to_records(),
            optimizer: self.optimizer.clone(),
            buffer: self.buffer.clone(),
            counters: self.counters,
            window: self.window,
            collect_rng: RngState::capture(&self.collect_rng),
            train_rng: RngState::capture(&self.train_rng),
            test_rng: RngState::capture(&self.test_rng),
        }
    }

    pub fn variant(&self) -> Variant {
        self.config.variant
    }

    pub fn env_spec(&self) -> &crate::env::EnvSpec {
        self.env.spec()
    }

    pub fn episode_limit(&self) -> usize {
        self.limit
    }

    pub fn epsilon(&self) -> f64 {
        self.config.train.epsilon(self.counters.steps)
    }

    pub fn temperature(&self) -> f64 {
        self.config.train.temperature(self.counters.steps)
    }

    /// Collect `count` episodes from the online parameters. Each episode
    /// gets its own seed drawn in order, so the result does not depend on
    /// the worker count.
    pub fn collect(
        &mut self,
        count: usize,
        epsilon: f64,
    ) -> Result<Vec<EpisodeRecord>, TrainError> {
        let seeds: Vec<u64> = (0..count).map(|_| self.collect_rng.random()).collect();
        self.rollouts(&seeds, epsilon, self.temperature())
    }

    fn rollouts(
        &self,
        seeds: &[u64],
        epsilon: f64,
        temperature: f64,
    ) -> Result<Vec<EpisodeRecord>, TrainError> {
        let workers = self.config.train.workers.min(seeds.len()).max(1);
        let run = |seeds: &[u64], env: &mut dyn Environment| {
            seeds
                .iter()
                .map(|&seed| {
                    let mut rng = ChaCha8Rng::seed_from_u64(seed);
                    collect_episode(
                        &self.model,
                        &self.online,
                        env,
                        epsilon,
                        temperature,
                        self.limit,
                        &mut rng,
                    )
                })
                .collect::<Result<Vec<_>, _>>()
        };
        if workers == 1 {
            let mut env = self.env.boxed_clone();
            return run(seeds, env.as_mut());
        }
        let chunk = seeds.len().div_ceil(workers);
        std::thread::scope(|scope| {
            let handles: Vec<_> = seeds
                .chunks(chunk)
                .map(|part| {
                    let mut env = self.env.boxed_clone();
                    scope.spawn(move || run(part, env.as_mut()))
                })
                .collect();
            let mut out = Vec::with_capacity(seeds.len());
            for h in handles {
                out.extend(h.join().map_err(|_| TrainError::Worker)??);
            }
            Ok(out)
        })
    }

    /// One gradient step on a sampled batch; `None` while the buffer holds
    /// fewer episodes than a batch.
    pub fn update(&mut self) -> Result<Option<UpdateStats>, TrainError> {
        let tc = &self.config.train;
        let temperature = tc.temperature(self.counters.steps);
        let Some(batch) = self.buffer.sample(tc.batch_size, &mut self.train_rng) else {
            return Ok(None);
        };
        let out = td_loss(
            &self.model,
            &self.online,
            &self.target,
            &batch,
            tc.gamma,
            tc.double_q,
            temperature,
            &mut self.train_rng,
        )?;
        let gate_grad_norm = self
            .model
            .gate_params()
            .iter()
            .flat_map(|&k| out.grads[k].iter())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt();
        let grad_norm = self.optimizer.step(&mut self.online, &out.grads)?;
        self.counters.updates += 1;
        if gate_grad_norm > 0.0 {
            self.counters.gate_live_updates += 1;
        }
        if self.counters.updates.is_multiple_of(self.config.train.target_interval) {
            self.sync_targets();
        }
        self.window.loss_sum += out.loss;
        self.window.q_sum += out.mean_q_tot;
        self.window.count += 1;
        Ok(Some(UpdateStats {
            loss: out.loss,
            mean_q_tot: out.mean_q_tot,
            grad_norm,
            gate_grad_norm,
        }))
    }

    pub fn sync_targets(&mut self) {
        self.target
            .copy_from(&self.online)
            .expect("online and target share a layout");
    }

    /// Collect a round of episodes into replay and run one update.
    pub fn iteration(&mut self) -> Result<Option<UpdateStats>, TrainError> {
        let episodes = self.collect(self.config.train.episodes_per_update, self.epsilon())?;
        for ep in episodes {
            self.counters.steps += ep.len();
            self.counters.episodes += 1;
            self.buffer.push(ep);
        }
        self.update()
    }

    /// Test episodes on the dedicated test stream. Greedy runs use ε = 0;
    /// gates keep sampling at the current temperature.
    pub fn evaluate(
        &mut self,
        episodes: usize,
        greedy: bool,
    ) -> Result<Vec<EpisodeRecord>, TrainError> {
        let seeds: Vec<u64> = (0..episodes).map(|_| self.test_rng.random()).collect();
        let epsilon = if greedy { 0.0 } else { self.epsilon() };
        self.rollouts(&seeds, epsilon, self.temperature())
    }

    fn metric(&mut self) -> Result<MetricRecord, TrainError> {
        let test = TestStats::from_episodes(&self.evaluate(self.config.eval.episodes, true)?);
        let w = std::mem::take(&mut self.window);
        let mean = |sum: f64| (w.count > 0).then(|| sum / w.count as f64);
        self.counters.last_eval_step = self.counters.steps;
        Ok(MetricRecord {
            step: self.counters.steps,
            episode: self.counters.episodes,
            loss: mean(w.loss_sum),
            mean_q_tot: mean(w.q_sum),
            test_success_rate: test.success_rate,
            test_return: test.mean_return,
            mean_edges_per_step: test.mean_edges_per_step,
            epsilon: self.epsilon(),
            temperature: self.temperature(),
        })
    }

    /// Train until `train.total_steps`, reporting metrics and checkpoint
    /// points to `sink`. The final metric record is always emitted.
    pub fn run<F>(&mut self, mut sink: F) -> Result<Option<MetricRecord>, TrainError>
    where
        F: FnMut(&Trainer, TrainEvent) -> Result<(), TrainError>,
    {
        let total = self.config.train.total_steps;
        let (eval_every, ckpt_every) = (
            self.config.eval.interval,
            self.config.output.checkpoint_interval,
        );
        let mut last = None;
        while self.counters.steps < total {
            self.iteration()?;
            let steps = self.counters.steps;
            if eval_every > 0 && steps - self.counters.last_eval_step >= eval_every && steps < total
            {
                let m = self.metric()?;
                sink(self, TrainEvent::Metric(m.clone()))?;
                last = Some(m);
            }
            if ckpt_every > 0
                && steps - self.counters.last_checkpoint_step >= ckpt_every
                && steps < total
            {
                self.counters.last_checkpoint_step = steps;
                sink(self, TrainEvent::Checkpoint)?;
            }
        }
        if self.config.eval.episodes > 0
            && (last.is_none() || self.counters.last_eval_step != self.counters.steps)
        {
            let m = self.metric()?;
            sink(self, TrainEvent::Metric(m.clone()))?;
            last = Some(m);
        }
        Ok(last)
    }

    /// Restart the test stream from `seed`; training streams are untouched.
    pub fn reseed_test(&mut self, seed: u64) {
        self.test_rng = stream(seed, 3);
    }

    /// Fraction of updates so far whose gate gradient was nonzero.
    pub fn gate_liveness(&self) -> f64 {
        self.counters.gate_live_updates as f64 / self.counters.updates.max(1) as f64
    }
}

/// Train `variant` under `config` and return the trainer with its metrics.
pub fn run_ablation(
    variant: Variant,
    mut config: RunConfig,
) -> Result<(Trainer, Vec<MetricRecord>), TrainError> {
    config.variant = variant;
    let mut trainer = Trainer::new(config)?;
    let mut metrics = Vec::new();
    trainer.run(|_, event| {
        if let TrainEvent::Metric(m) = event {
            metrics.push(m);
        }
        Ok(())
    })?;
    Ok((trainer, metrics))
}
