//! Parameter-shared per-agent Q-network.
//!
//! Each agent embeds `o ∥ id ∥ h_prev` into a self token (also its message
//! payload), prepends it to the linearly projected messages it received, runs
//! the transformer decoder over that token run, and reads `(q, h_next)` off
//! the self token's output concatenated with `h_prev`.

use rand::Rng;
use thiserror::Error;

use crate::nn::{Linear, ObsEmbed, ParamStore, Session, TransformerBlock};
use crate::tensor::{Result, TensorError, Var};

#[derive(Clone, Debug)]
pub struct AgentNet {
    pub embed: ObsEmbed,
    pub msg_proj: Linear,
    pub blocks: Vec<TransformerBlock>,
    pub head: Linear,
    pub obs_size: usize,
    pub n_agents: usize,
    pub hidden: usize,
    pub n_actions: usize,
}

/// Per-agent outputs for `m` agent rows.
#[derive(Clone, Copy, Debug)]
pub struct QOutput {
    /// `[m × |A|]`
    pub q: Var,
    /// `[m × d]`
    pub h_next: Var,
}

impl AgentNet {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        obs_size: usize,
        n_agents: usize,
        hidden: usize,
        heads: usize,
        blocks: usize,
        n_actions: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if n_actions == 0 || n_agents == 0 || hidden == 0 {
            return Err(TensorError::Invalid(
                "agent network needs positive agents, actions and width".into(),
            ));
        }
        let embed = ObsEmbed::new(
            store,
            &format!("{name}.embed"),
            obs_size + n_agents,
            hidden,
            hidden,
            rng,
        );
        let msg_proj = Linear::new(store, &format!("{name}.msg_proj"), hidden, hidden, rng);
        let blocks = (0..blocks)
            .map(|k| TransformerBlock::new(store, &format!("{name}.block{k}"), hidden, heads, rng))
            .collect::<Result<Vec<_>>>()?;
        let head = Linear::new(
            store,
            &format!("{name}.head"),
            2 * hidden,
            n_actions + hidden,
            rng,
        );
        Ok(Self {
            embed,
            msg_proj,
            blocks,
            head,
            obs_size,
            n_agents,
            hidden,
            n_actions,
        })
    }

    /// Input rows for `B` stacked teams: each agent's observation followed by
    /// its one-hot id. `obs` rows are ordered (team, agent).
    pub fn inputs(&self, obs: &[&[f64]]) -> Vec<f64> {
        let n = self.n_agents;
        let mut out = Vec::with_capacity(obs.len() * (self.obs_size + n));
        for (r, o) in obs.iter().enumerate() {
            out.extend_from_slice(o);
            out.extend((0..n).map(|k| if k == r % n { 1.0 } else { 0.0 }));
        }
        out
    }

    /// Self token / message payload `[m × d]` from inputs `[m × (obs + n)]`
    /// and `h_prev` `[m × d]`.
    pub fn embed(&self, s: &mut Session, inputs: Var, h_prev: Var) -> Result<Var> {
        self.embed.forward(s, inputs, h_prev)
    }

    /// Decode `m` agents, each with `r` received rows. `received` is
    /// `[m·r × d]` grouped by agent.
    pub fn decode(
        &self,
        s: &mut Session,
        self_tokens: Var,
        received: Option<Var>,
        r: usize,
        h_prev: Var,
    ) -> Result<QOutput> {
        let m = s.g.shape(self_tokens)[0];
        let tokens = r + 1;
        let x = match received {
            Some(recv) if r > 0 => {
                if s.g.shape(recv) != [m * r, self.hidden] {
                    return Err(TensorError::ShapeMismatch {
                        op: "q_forward",
                        left: s.g.shape(recv).to_vec(),
                        right: vec![m * r, self.hidden],
                    });
                }
                let proj = self.msg_proj.forward(s, recv)?;
                let all = s.g.concat(&[self_tokens, proj], 0)?;
                let index: Vec<usize> = (0..m)
                    .flat_map(|a| std::iter::once(a).chain((0..r).map(move |k| m + a * r + k)))
                    .collect();
                s.g.select_rows(all, &index)?
            }
            _ => self_tokens,
        };
        let mut x = x;
        for block in &self.blocks {
            x = block.forward(s, x, m, tokens)?;
        }
        let own = if tokens > 1 {
            let index: Vec<usize> = (0..m).map(|a| a * tokens).collect();
            s.g.select_rows(x, &index)?
        } else {
            x
        };
        let z = s.g.concat(&[own, h_prev], 1)?;
        let out = self.head.forward(s, z)?;
        let q = s.g.narrow(out, 1, 0, self.n_actions)?;
        let h = s.g.narrow(out, 1, self.n_actions, self.hidden)?;
        let h_next = s.g.tanh(h);
        Ok(QOutput { q, h_next })
    }

    /// `embed` followed by `decode`.
    pub fn q_forward(
        &self,
        s: &mut Session,
        inputs: Var,
        h_prev: Var,
        received: Option<Var>,
        r: usize,
    ) -> Result<QOutput> {
        let e = self.embed(s, inputs, h_prev)?;
        self.decode(s, e, received, r, h_prev)
    }
}

/// Off-diagonal rows of composed messages `[B × n × n × d]`, grouped by
/// receiver: `[B·n·(n−1) × d]`. `None` when `n = 1`.
pub fn received_rows(s: &mut Session, composed: Var) -> Result<Option<Var>> {
    let shape = s.g.shape(composed).to_vec();
    let (b, n, d) = (shape[0], shape[1], shape[3]);
    if n < 2 {
        return Ok(None);
    }
    let flat = s.g.reshape(composed, vec![b * n * n, d])?;
    let index: Vec<usize> = (0..b * n)
        .flat_map(|bi| {
            (0..n)
                .filter(move |&j| j != bi % n)
                .map(move |j| bi * n + j)
        })
        .collect();
    s.g.select_rows(flat, &index).map(Some)
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SelectError {
    #[error("no action is available")]
    NoneAvailable,
    #[error("{q} action values but {mask} availability flags")]
    Length { q: usize, mask: usize },
}

/// ε-greedy over available actions; greedy ties go to the lowest index.
pub fn select_action<R: Rng + ?Sized>(
    q: &[f64],
    epsilon: f64,
    avail: &[bool],
    rng: &mut R,
) -> std::result::Result<usize, SelectError> {
    if q.len() != avail.len() {
        return Err(SelectError::Length {
            q: q.len(),
            mask: avail.len(),
        });
    }
    let open: Vec<usize> = (0..q.len()).filter(|&a| avail[a]).collect();
    if open.is_empty() {
        return Err(SelectError::NoneAvailable);
    }
    if epsilon > 0.0 && rng.random::<f64>() < epsilon {
        return Ok(open[rng.random_range(0..open.len())]);
    }
    Ok(greedy(q, avail).expect("nonempty"))
}

/// Argmax over available actions, lowest index on ties.
pub fn greedy(q: &[f64], avail: &[bool]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (a, &v) in q.iter().enumerate() {
        if avail[a] && best.is_none_or(|b| v > q[b]) {
            best = Some(a);
        }
    }
    best
}
