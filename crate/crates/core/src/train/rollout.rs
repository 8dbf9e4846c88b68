use rand_chacha::ChaCha8Rng;

use super::{EpisodeRecord, TrainError};
use crate::env::Environment;
use crate::gate::{adjacency_constant, adjacency_slices, init_adjacency};
use crate::model::Model;
use crate::nn::{ParamStore, Session};
use crate::qnet::select_action;

/// Run one episode with ε-greedy actions and gated communication. The
/// environment is reset with `rng`, which also drives exploration and gate
/// sampling. Episodes stop at termination or after `limit` steps.
#[allow(clippy::too_many_arguments)]
pub fn collect_episode(
    model: &Model,
    store: &ParamStore,
    env: &mut dyn Environment,
    epsilon: f64,
    temperature: f64,
    limit: usize,
    rng: &mut ChaCha8Rng,
) -> Result<EpisodeRecord, TrainError> {
    let n = model.n_agents;
    let d = model.hidden;
    let first = env.reset(rng)?;
    let mut record = EpisodeRecord {
        obs: vec![first.observations],
        states: vec![first.state],
        avail: vec![first.avail_actions],
        actions: Vec::new(),
        rewards: Vec::new(),
        terminated: Vec::new(),
        adjacency: Vec::new(),
        success: false,
    };
    let mut h = vec![0.0; n * d];
    let mut a_prev = init_adjacency(n)?;
    for _ in 0..limit.max(1) {
        let mut s = Session::new(store, false);
        let obs = record.obs.last().expect("nonempty");
        let rows: Vec<&[f64]> = obs.iter().map(Vec::as_slice).collect();
        let x =
            s.g.constant(vec![n, model.obs_size + n], model.agent.inputs(&rows))?;
        let hv = s.g.constant(vec![n, d], h)?;
        let av = adjacency_constant(&mut s, &[&a_prev])?;
        let out = model.step(&mut s, x, hv, av, temperature, rng)?;
        let q = s.g.value(out.q);
        let avail = record.avail.last().expect("nonempty");
        let actions = (0..n)
            .map(|i| {
                let qa = &q[i * model.n_actions..(i + 1) * model.n_actions];
                select_action(qa, epsilon, &avail[i], rng)
            })
            .collect::<Result<Vec<_>, _>>()?;
        let adjacency = adjacency_slices(&s, out.adjacency)?.remove(0);
        h = s.g.value(out.h_next).to_vec();
        drop(s);
        let step = env.step(&actions)?;
        record.actions.push(actions);
        record.rewards.push(step.reward);
        record.terminated.push(step.done);
        record.adjacency.push(adjacency.clone());
        record.obs.push(step.observations);
        record.states.push(step.state);
        record.avail.push(step.avail_actions);
        record.success |= step.success;
        a_prev = adjacency;
        if step.done {
            break;
        }
    }
    Ok(record)
}
