use rand::Rng;

use super::{EpisodeRecord, TrainError};
use crate::gate::{adjacency_constant, init_adjacency};
use crate::model::Model;
use crate::nn::{ParamStore, Session};
use crate::qnet::greedy;
use crate::tensor::Var;

/// Per-step outputs of a batched unroll.
pub struct Unrolled {
    /// `[B·n × |A|]` per step.
    pub q: Vec<Var>,
    /// `[B × n × n]` per step.
    pub adjacency: Vec<Var>,
}

/// Input view of episode `b` at step `t`, clamped to its final observation.
fn obs_at(ep: &EpisodeRecord, t: usize) -> &[Vec<f64>] {
    &ep.obs[t.min(ep.len())]
}

/// Run the communication pipeline over `steps` steps, with hidden states
/// starting at zero and the previous adjacency carried over (detached) from
/// `init_adjacency`. `batch` must be sorted by decreasing length; at step `t`
/// only the first `active(t)` episodes are evaluated.
pub fn unroll<R: Rng + ?Sized>(
    model: &Model,
    s: &mut Session,
    batch: &[&EpisodeRecord],
    steps: usize,
    active: impl Fn(usize) -> usize,
    temperature: f64,
    rng: &mut R,
) -> Result<Unrolled, TrainError> {
    let (b, n, d) = (batch.len(), model.n_agents, model.hidden);
    let mut h = s.g.constant(vec![b * n, d], vec![0.0; b * n * d])?;
    let init = init_adjacency(n)?;
    let mut a_prev = adjacency_constant(s, &vec![&init; b])?;
    let mut live = b;
    let mut out = Unrolled {
        q: Vec::with_capacity(steps),
        adjacency: Vec::with_capacity(steps),
    };
    for t in 0..steps {
        let a = active(t).min(live);
        if a == 0 {
            break;
        }
        if a < live {
            h = s.g.narrow(h, 0, 0, a * n)?;
            a_prev = s.g.narrow(a_prev, 0, 0, a)?;
            live = a;
        }
        let rows: Vec<&[f64]> = batch[..a]
            .iter()
            .flat_map(|ep| obs_at(ep, t).iter().map(Vec::as_slice))
            .collect();
        let x =
            s.g.constant(vec![a * n, model.obs_size + n], model.agent.inputs(&rows))?;
        let step = model.step(s, x, h, a_prev, temperature, rng)?;
        out.q.push(step.q);
        out.adjacency.push(step.adjacency);
        h = step.h_next;
        a_prev = s.g.detach(step.adjacency);
    }
    Ok(out)
}

/// Result of one TD-loss evaluation with gradients of the online parameters.
#[derive(Clone, Debug)]
pub struct LossOutput {
    pub loss: f64,
    pub mean_q_tot: f64,
    pub grads: Vec<Vec<f64>>,
}

/// Squared TD error `Σ_{b,t} (Q_tot − y)²` over the live steps of each
/// episode, with
/// `y = r + γ(1 − terminated)·Q⁻_tot(next)`. Each agent's next action is its
/// greedy choice over available actions, taken from the online network when
/// `double_q` is set and from the target otherwise; the target networks
/// evaluate and mix those actions.
#[allow(clippy::too_many_arguments)]
pub fn td_loss<R: Rng + ?Sized>(
    model: &Model,
    online: &ParamStore,
    target: &ParamStore,
    batch: &[&EpisodeRecord],
    gamma: f64,
    double_q: bool,
    temperature: f64,
    rng: &mut R,
) -> Result<LossOutput, TrainError> {
    if batch.is_empty() {
        return Err(TrainError::EmptyBatch);
    }
    if let Some(bad) = batch.iter().position(|ep| !ep.is_consistent()) {
        return Err(TrainError::Invalid(format!(
            "episode {bad} of the batch has inconsistent lengths"
        )));
    }
    let mut batch = batch.to_vec();
    batch.sort_by_key(|ep| std::cmp::Reverse(ep.len()));
    let (n, na) = (model.n_agents, model.n_actions);
    let steps = batch[0].len();
    // episodes with len > t, a prefix of the sorted batch
    let running = |t: usize| batch.partition_point(|ep| ep.len() > t);
    let rows: usize = batch.iter().map(|ep| ep.len()).sum();

    // step t + 1 is needed for every live (t, b)
    let reach = |t: usize| if t == 0 { batch.len() } else { running(t - 1) };

    // online pass: chosen-action values now, greedy next actions
    let mut s = Session::new(online, true);
    let ou = unroll(model, &mut s, &batch, steps + 1, reach, temperature, rng)?;
    let mut chosen = Vec::with_capacity(steps);
    let mut next_actions = Vec::with_capacity(rows * n);
    for t in 0..steps {
        let live = running(t);
        let idx: Vec<usize> = batch[..live]
            .iter()
            .flat_map(|ep| ep.actions[t].iter().copied())
            .collect();
        let q = s.g.narrow(ou.q[t], 0, 0, live * n)?;
        let q = s.g.gather(q, &idx)?;
        chosen.push(s.g.reshape(q, vec![live, n])?);
        if double_q {
            let q_next = s.g.value(ou.q[t + 1]);
            for (k, ep) in batch[..live].iter().enumerate() {
                for i in 0..n {
                    let qa = &q_next[(k * n + i) * na..(k * n + i + 1) * na];
                    next_actions.push(greedy(qa, &ep.avail[t + 1][i]));
                }
            }
        }
    }

    // target pass: evaluate those actions and mix
    let mut ts = Session::new(target, false);
    let tu = unroll(model, &mut ts, &batch, steps + 1, reach, temperature, rng)?;
    let mut best = Vec::with_capacity(rows * n);
    for t in 1..=steps {
        let q = ts.g.value(tu.q[t]);
        for (k, ep) in batch[..running(t - 1)].iter().enumerate() {
            for i in 0..n {
                let qa = &q[(k * n + i) * na..(k * n + i + 1) * na];
                let a = if double_q {
                    next_actions[best.len()]
                } else {
                    greedy(qa, &ep.avail[t][i])
                };
                best.push(a.map_or(0.0, |a| qa[a]));
            }
        }
    }
    let next_adj = ts.g.concat(&tu.adjacency[1..], 0)?;
    let best = ts.g.constant(vec![rows, n], best)?;
    let (next_obs, next_state) = mixer_inputs(&batch, steps, 1);
    let next_obs = ts.g.constant(vec![rows, n, model.obs_size], next_obs)?;
    let next_state = ts.g.constant(vec![rows, model.state_size], next_state)?;
    let q_next = model
        .mixer
        .forward(&mut ts, best, next_adj, next_obs, next_state)?;
    let q_next = ts.g.value(q_next).to_vec();
    drop(ts);

    let mut y = Vec::with_capacity(rows);
    for t in 0..steps {
        for ep in &batch[..running(t)] {
            let cont = if ep.terminated[t] { 0.0 } else { 1.0 };
            y.push(ep.rewards[t] + gamma * cont * q_next[y.len()]);
        }
    }

    let adj: Vec<Var> = (0..steps)
        .map(|t| s.g.narrow(ou.adjacency[t], 0, 0, running(t)))
        .collect::<Result<_, _>>()?;
    let chosen = s.g.concat(&chosen, 0)?;
    let adj = s.g.concat(&adj, 0)?;
    let (obs, state) = mixer_inputs(&batch, steps, 0);
    let obs = s.g.constant(vec![rows, n, model.obs_size], obs)?;
    let state = s.g.constant(vec![rows, model.state_size], state)?;
    let q_tot = model.mixer.forward(&mut s, chosen, adj, obs, state)?;
    let yv = s.g.constant(vec![rows], y)?;
    let diff = s.g.sub(q_tot, yv)?;
    let sq = s.g.mul(diff, diff)?;
    let loss = s.g.sum_all(sq)?;
    let loss_value = s.g.value(loss)[0];
    if !loss_value.is_finite() {
        return Err(TrainError::NonFinite("TD loss".into()));
    }
    let mean_q_tot = s.g.value(q_tot).iter().sum::<f64>() / rows as f64;
    s.g.backward(loss)?;
    Ok(LossOutput {
        loss: loss_value,
        mean_q_tot,
        grads: s.param_grads(),
    })
}

/// Raw observations `[rows × n × o]` and true states `[rows × S]` at step
/// `t + offset` for every live `(t, b)`, rows ordered by `t` then `b`.
fn mixer_inputs(batch: &[&EpisodeRecord], steps: usize, offset: usize) -> (Vec<f64>, Vec<f64>) {
    let mut obs = Vec::new();
    let mut state = Vec::new();
    for t in 0..steps {
        for ep in batch.iter().take_while(|ep| ep.len() > t) {
            for o in &ep.obs[t + offset] {
                obs.extend_from_slice(o);
            }
            state.extend_from_slice(&ep.states[t + offset]);
        }
    }
    (obs, state)
}
