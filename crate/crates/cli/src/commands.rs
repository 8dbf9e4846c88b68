use std::fs;
use std::path::{Path, PathBuf};

use tgcnet::config::{ConfigError, RunConfig, Variant};
use tgcnet::gate::init_adjacency;
use tgcnet::train::{EpisodeRecord, TestStats, TrainError, TrainEvent, Trainer, TrainerState};

use crate::args::{EvalArgs, SummarizeArgs, TraceArgs, TrainArgs};
use crate::checkpoint;
use crate::error::{CliError, Result};
use crate::records::{
    read_lines, EvalLine, EvalSummary, JsonLines, MetricsLine, RunSummary, TraceLine,
    VariantSummary, METRICS_FORMAT,
};
use crate::stats::{median, MeanCi};

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const EVAL_FILE: &str = "eval.jsonl";
pub const TRACE_FILE: &str = "trace.jsonl";
pub const FINAL_CHECKPOINT: &str = "checkpoint_final.json";

pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = fs::read_to_string(path)
        .map_err(|e| ConfigError::new("config", format!("cannot read {}: {e}", path.display())))?;
    Ok(RunConfig::from_toml(&text)?)
}

pub fn checkpoint_path(dir: &Path, step: usize) -> PathBuf {
    dir.join(format!("checkpoint_{step:08}.json"))
}

/// The parts of a config that fix the parameter layout and the task.
fn check_matches(expected: &RunConfig, found: &RunConfig) -> Result<()> {
    let checks = [
        ("variant", expected.variant == found.variant),
        ("env", expected.env == found.env),
        ("model", expected.model == found.model),
    ];
    match checks.iter().find(|(_, ok)| !ok) {
        Some((field, _)) => Err(CliError::Mismatch(format!("`{field}` differs"))),
        None => Ok(()),
    }
}

fn positive(field: &str, v: usize) -> Result<()> {
    if v == 0 {
        return Err(ConfigError::new(field, "must be positive").into());
    }
    Ok(())
}

pub fn train(args: &TrainArgs) -> Result<RunSummary> {
    let mut config = load_config(&args.config)?;
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    if let Some(v) = &args.variant {
        config.variant = v.parse()?;
    }
    if let Some(w) = args.workers {
        config.train.workers = w;
    }
    if let Some(dir) = &args.out_dir {
        config.output.dir = dir.display().to_string();
    }
    config.validate()?;
    let out = PathBuf::from(&config.output.dir);
    fs::create_dir_all(&out).map_err(CliError::io(&out))?;
    let metrics_path = out.join(METRICS_FILE);

    let (mut trainer, mut metrics) = match &args.checkpoint {
        Some(path) => {
            let state = checkpoint::load(path)?;
            check_matches(&config, &state.config)?;
            if state.config.seed != config.seed {
                return Err(CliError::Mismatch("`seed` differs".into()));
            }
            let step = state.counters.steps;
            let mut trainer = Trainer::from_state(state)?;
            trainer.config.train = config.train.clone();
            trainer.config.eval = config.eval.clone();
            trainer.config.output = config.output.clone();
            let mut metrics = JsonLines::append(&metrics_path)?;
            metrics.write(&MetricsLine::Resume { step })?;
            (trainer, metrics)
        }
        None => {
            let trainer = Trainer::new(config.clone())?;
            let echo = out.join("config.toml");
            fs::write(&echo, config.to_toml()).map_err(CliError::io(&echo))?;
            let mut metrics = JsonLines::create(&metrics_path)?;
            metrics.write(&MetricsLine::Header {
                format: METRICS_FORMAT,
                variant: config.variant,
                seed: config.seed,
                config: Box::new(config.clone()),
            })?;
            (trainer, metrics)
        }
    };

    let last = trainer.run(|t, event| {
        let written = match event {
            TrainEvent::Metric(m) => {
                eprintln!(
                    "step {:>7}  success {:.2}  return {:.2}  edges/step {:.2}  eps {:.3}",
                    m.step, m.test_success_rate, m.test_return, m.mean_edges_per_step, m.epsilon
                );
                metrics.write(&MetricsLine::Metric(m))
            }
            TrainEvent::Checkpoint => {
                checkpoint::save(&checkpoint_path(&out, t.counters.steps), &t.state())
            }
        };
        written.map_err(|e| TrainError::Invalid(e.to_string()))
    })?;
    checkpoint::save(&out.join(FINAL_CHECKPOINT), &trainer.state())?;
    let summary = RunSummary {
        variant: trainer.variant(),
        seed: trainer.config.seed,
        steps: trainer.counters.steps,
        episodes: trainer.counters.episodes,
        updates: trainer.counters.updates,
        gate_liveness: trainer.gate_liveness(),
        final_test_success_rate: last.as_ref().map(|m| m.test_success_rate),
        final_mean_edges_per_step: last.as_ref().map(|m| m.mean_edges_per_step),
    };
    metrics.write(&MetricsLine::Summary(summary.clone()))?;
    Ok(summary)
}

/// Load a checkpoint for inspection, optionally checking it against a config.
fn restore(path: &Path, config: Option<&Path>, seed: Option<u64>) -> Result<Trainer> {
    let state: TrainerState = checkpoint::load(path)?;
    if let Some(c) = config {
        check_matches(&load_config(c)?, &state.config)?;
    }
    let mut trainer = Trainer::from_state(state)?;
    if let Some(seed) = seed {
        trainer.reseed_test(seed);
    }
    Ok(trainer)
}

fn output_dir(explicit: Option<&PathBuf>, checkpoint: &Path) -> Result<PathBuf> {
    let dir = match explicit {
        Some(d) => d.clone(),
        None => checkpoint
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_else(|| PathBuf::from(".")),
    };
    fs::create_dir_all(&dir).map_err(CliError::io(&dir))?;
    Ok(dir)
}

pub fn eval(args: &EvalArgs) -> Result<EvalSummary> {
    positive("episodes", args.episodes)?;
    let mut trainer = restore(&args.checkpoint, args.config.as_deref(), args.seed)?;
    if let Some(w) = args.workers {
        positive("workers", w)?;
        trainer.config.train.workers = w;
    }
    let episodes = trainer.evaluate(args.episodes, args.greedy)?;
    let dir = output_dir(args.out_dir.as_ref(), &args.checkpoint)?;
    let mut out = JsonLines::create(&dir.join(EVAL_FILE))?;
    for (index, ep) in episodes.iter().enumerate() {
        out.write(&EvalLine::Episode {
            index,
            length: ep.len(),
            episode_return: ep.episode_return(),
            success: ep.success,
            edges: ep.edges(),
        })?;
    }
    let summary = summarize_episodes(&trainer, &episodes, args.greedy);
    out.write(&EvalLine::Summary(summary.clone()))?;
    Ok(summary)
}

fn summarize_episodes(trainer: &Trainer, episodes: &[EpisodeRecord], greedy: bool) -> EvalSummary {
    let success: Vec<f64> = episodes
        .iter()
        .map(|e| f64::from(u8::from(e.success)))
        .collect();
    let returns: Vec<f64> = episodes.iter().map(EpisodeRecord::episode_return).collect();
    EvalSummary {
        variant: trainer.variant(),
        checkpoint_step: trainer.counters.steps,
        episodes: episodes.len(),
        greedy,
        success: MeanCi::from_samples(&success),
        episode_return: MeanCi::from_samples(&returns),
        mean_edges_per_step: TestStats::from_episodes(episodes).mean_edges_per_step,
    }
}

/// Greedy episodes with every step's pre-communication and gated graphs.
pub fn trace(args: &TraceArgs) -> Result<Vec<TraceLine>> {
    positive("episodes", args.episodes)?;
    let mut trainer = restore(&args.checkpoint, args.config.as_deref(), args.seed)?;
    let n = trainer.env_spec().n_agents;
    let init = init_adjacency(n).map_err(TrainError::from)?;
    let episodes = trainer.evaluate(args.episodes, true)?;
    let dir = output_dir(args.out_dir.as_ref(), &args.checkpoint)?;
    let mut out = JsonLines::create(&dir.join(TRACE_FILE))?;
    let mut lines = Vec::new();
    for (episode, ep) in episodes.iter().enumerate() {
        for (t, matrix) in ep.adjacency.iter().enumerate() {
            let pre = if t == 0 { &init } else { &ep.adjacency[t - 1] };
            let line = TraceLine {
                episode,
                t,
                pre: pre.clone(),
                matrix: matrix.clone(),
                edges: matrix.edges(),
            };
            out.write(&line)?;
            lines.push(line);
        }
    }
    Ok(lines)
}

/// Final metric of each run, grouped by variant.
pub fn summarize(args: &SummarizeArgs) -> Result<Vec<VariantSummary>> {
    let mut runs: Vec<(Variant, u64, f64, f64)> = Vec::new();
    for path in &args.metrics {
        let lines: Vec<MetricsLine> = read_lines(path)?;
        let (variant, seed) = lines
            .iter()
            .find_map(|l| match l {
                MetricsLine::Header { variant, seed, .. } => Some((*variant, *seed)),
                _ => None,
            })
            .ok_or_else(|| CliError::Invalid(format!("{}: no header line", path.display())))?;
        let last = lines
            .iter()
            .rev()
            .find_map(|l| match l {
                MetricsLine::Metric(m) => Some(m),
                _ => None,
            })
            .ok_or_else(|| CliError::Invalid(format!("{}: no metric lines", path.display())))?;
        runs.push((
            variant,
            seed,
            last.test_success_rate,
            last.mean_edges_per_step,
        ));
    }
    let mut out = Vec::new();
    for variant in Variant::ALL {
        let group: Vec<_> = runs.iter().filter(|r| r.0 == variant).collect();
        if group.is_empty() {
            continue;
        }
        let success: Vec<f64> = group.iter().map(|r| r.2).collect();
        let edges: Vec<f64> = group.iter().map(|r| r.3).collect();
        out.push(VariantSummary {
            variant,
            runs: group.len(),
            seeds: group.iter().map(|r| r.1).collect(),
            median_success: median(&success).expect("nonempty"),
            success: MeanCi::from_samples(&success),
            median_edges_per_step: median(&edges).expect("nonempty"),
            final_success: success,
            final_edges_per_step: edges,
        });
    }
    if let Some(path) = &args.out {
        let mut file = JsonLines::create(path)?;
        for s in &out {
            file.write(s)?;
        }
    }
    Ok(out)
}
