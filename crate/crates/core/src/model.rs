//! The assembled architecture: agent network, gate and mixer, plus the
//! per-step communication pipeline shared by rollouts and training.

use rand::Rng;

use crate::config::RunConfig;
use crate::env::EnvSpec;
use crate::gate::{
    adjacency_constant, compose_messages, init_adjacency, pre_communicate, Adjacency, CommGate,
    GateMode,
};
use crate::mixer::{Mixer, MixerConfig};
use crate::nn::{ParamStore, Session};
use crate::qnet::{received_rows, AgentNet};
use crate::tensor::{Result, TensorError, Var};

/// Architecture only; parameter values live in a [`ParamStore`] laid out by
/// [`Model::new`]. Online and target stores share one `Model`.
#[derive(Clone, Debug)]
pub struct Model {
    pub agent: AgentNet,
    pub gate: CommGate,
    pub mixer: Mixer,
    pub mode: GateMode,
    pub n_agents: usize,
    pub obs_size: usize,
    pub state_size: usize,
    pub n_actions: usize,
    pub hidden: usize,
}

/// One step of the communication pipeline for `B` teams.
#[derive(Clone, Copy, Debug)]
pub struct AgentStep {
    /// `[B·n × |A|]`
    pub q: Var,
    /// `[B·n × d]`
    pub h_next: Var,
    /// `[B × n × n]`
    pub adjacency: Var,
}

impl Model {
    pub fn new<R: Rng + ?Sized>(
        config: &RunConfig,
        spec: &EnvSpec,
        rng: &mut R,
    ) -> Result<(Self, ParamStore)> {
        let m = &config.model;
        let mut store = ParamStore::new();
        let agent = AgentNet::new(
            &mut store,
            "agent",
            spec.obs_size,
            spec.n_agents,
            m.hidden,
            m.heads,
            m.blocks,
            spec.n_actions,
            rng,
        )?;
        let gate = CommGate::new(
            &mut store,
            "gate",
            m.hidden,
            m.gate_dim,
            m.keys,
            m.query_from_self,
            rng,
        )?;
        let mixer = Mixer::new(
            &mut store,
            "mixer",
            MixerConfig {
                n_agents: spec.n_agents,
                obs_size: spec.obs_size,
                true_state_size: spec.state_size,
                state_dim: m.state_dim,
                gcn_layers: m.gcn_layers,
                gcn_dim: m.gcn_dim,
                gcn_weights: m.gcn_weights,
                gcn_activation: m.gcn_activation,
                readout_activation: m.readout_activation,
                embed: m.mixing_embed,
                hyper_hidden: m.hypernet_hidden,
                source: config.variant.state_source(m.state_head),
            },
            rng,
        )?;
        let model = Self {
            agent,
            gate,
            mixer,
            mode: config.variant.gate_mode(),
            n_agents: spec.n_agents,
            obs_size: spec.obs_size,
            state_size: spec.state_size,
            n_actions: spec.n_actions,
            hidden: m.hidden,
        };
        Ok((model, store))
    }

    /// Names of the gate's parameters in the store.
    pub fn gate_params(&self) -> [usize; 3] {
        [
            self.gate.w_query.index(),
            self.gate.w_key.index(),
            self.gate.w_value.index(),
        ]
    }

    /// Embed, pre-communicate over `a_prev`, gate, compose, decode.
    ///
    /// `inputs` is `[B·n × (obs + n)]`, `h_prev` `[B·n × d]`, `a_prev`
    /// `[B × n × n]`.
    pub fn step<R: Rng + ?Sized>(
        &self,
        s: &mut Session,
        inputs: Var,
        h_prev: Var,
        a_prev: Var,
        temperature: f64,
        rng: &mut R,
    ) -> Result<AgentStep> {
        let n = self.n_agents;
        let rows = s.g.shape(inputs)[0];
        if !rows.is_multiple_of(n) {
            return Err(TensorError::ShapeMismatch {
                op: "model_step",
                left: s.g.shape(inputs).to_vec(),
                right: vec![n],
            });
        }
        let b = rows / n;
        let e = self.agent.embed(s, inputs, h_prev)?;
        let board = s.g.reshape(e, vec![b, n, self.hidden])?;
        let adjacency = match self.mode {
            GateMode::Learned => {
                let pre = pre_communicate(s, a_prev, board)?;
                self.gate
                    .forward(s, pre, board, temperature, rng)?
                    .adjacency
            }
            GateMode::Open => {
                let full = init_adjacency(n)?;
                adjacency_constant(s, &vec![&full; b])?
            }
            GateMode::Closed => {
                let none = Adjacency::empty(n);
                adjacency_constant(s, &vec![&none; b])?
            }
        };
        let composed = compose_messages(s, adjacency, board)?;
        let received = received_rows(s, composed)?;
        let out = self.agent.decode(s, e, received, n - 1, h_prev)?;
        Ok(AgentStep {
            q: out.q,
            h_next: out.h_next,
            adjacency,
        })
    }
}
