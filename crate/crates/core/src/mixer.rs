//! Graph-coarsening value mixer.
//!
//! Node features `X_i = mean_j(A[i,j]·o_j) ∥ o_i` are propagated by a GCN
//! over the normalized adjacency, pooled by `X ⊙ tanh(ÂX)`, and read out by
//! `σ(W[mean ∥ max] + b)` into a coarsened state. A QMIX-style hypernetwork
//! turns that state into nonnegative mixing weights for the agents' Q-values.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::gate::Adjacency;
use crate::nn::{Linear, ParamId, ParamStore, Session};
use crate::tensor::{Result, Tensor, TensorError, Unary, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    Tanh,
    Relu,
    Elu,
}

impl Activation {
    pub fn apply(self, s: &mut Session, x: Var) -> Var {
        match self {
            Activation::Identity => x,
            Activation::Tanh => s.g.unary(Unary::Tanh, x),
            Activation::Relu => s.g.unary(Unary::Relu, x),
            Activation::Elu => s.g.unary(Unary::Elu, x),
        }
    }
}

/// Where the mixer's conditioning state comes from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StateSource {
    /// GCN, pooling and readout over the communication graph.
    Coarsened,
    /// Sum-aggregation minus max-overlap of linearly mapped node features.
    AggOverlap,
    /// The environment's true global state.
    TrueState,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixerConfig {
    pub n_agents: usize,
    pub obs_size: usize,
    pub true_state_size: usize,
    pub state_dim: usize,
    pub gcn_layers: usize,
    pub gcn_dim: usize,
    /// Learnable per-layer weights; without them each layer is `σ(ÂX)`.
    pub gcn_weights: bool,
    pub gcn_activation: Activation,
    pub readout_activation: Activation,
    pub embed: usize,
    pub hyper_hidden: usize,
    pub source: StateSource,
}

/// `D̃^{-1/2}(A + I)D̃^{-1/2}` with `D̃` the row sums of `A + I`, for a
/// row-major `n × n` block of 0/1 values.
pub fn normalize_values(n: usize, a: &[f64]) -> Vec<f64> {
    let deg: Vec<f64> = (0..n)
        .map(|i| {
            1.0 + (0..n)
                .filter(|&j| j != i)
                .map(|j| a[i * n + j])
                .sum::<f64>()
        })
        .collect();
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            let v = if i == j { 1.0 } else { a[i * n + j] };
            out[i * n + j] = v / (deg[i] * deg[j]).sqrt();
        }
    }
    out
}

pub fn normalize_adjacency(a: &Adjacency) -> Vec<f64> {
    normalize_values(a.n(), &a.values())
}

/// Normalize every `n × n` block of a `[M × n × n]` adjacency into a tape
/// constant.
pub fn normalized_constant(s: &mut Session, adjacency: Var) -> Result<Var> {
    let shape = s.g.shape(adjacency).to_vec();
    let n = shape[1];
    let data =
        s.g.value(adjacency)
            .chunks(n * n)
            .flat_map(|c| normalize_values(n, c))
            .collect();
    s.g.constant(shape, data)
}

/// `X_i = (1/(n−1)) Σ_j A[i,j] o_j ∥ o_i` for `A: [M,n,n]`, `obs: [M,n,o]`.
pub fn node_features(s: &mut Session, adjacency: Var, obs: Var) -> Result<Var> {
    let n = s.g.shape(obs)[1];
    let routed = s.g.masked_broadcast(adjacency, obs)?;
    let summed = s.g.sum(routed, 2)?;
    let mean = s.g.scale(summed, 1.0 / (n.max(2) - 1) as f64);
    s.g.concat(&[mean, obs], 2)
}

/// One GCN layer `σ(ÂXW)` (or `σ(ÂX)` without a weight) on `[M,n,d]`.
pub fn gcn_layer(
    s: &mut Session,
    a_hat: Var,
    x: Var,
    w: Option<Var>,
    act: Activation,
) -> Result<Var> {
    let shape = s.g.shape(x).to_vec();
    let mut y = s.g.bmm(a_hat, x, false)?;
    if let Some(w) = w {
        let out = s.g.shape(w)[1];
        let flat = s.g.reshape(y, vec![shape[0] * shape[1], shape[2]])?;
        let z = s.g.matmul(flat, w)?;
        y = s.g.reshape(z, vec![shape[0], shape[1], out])?;
    }
    Ok(act.apply(s, y))
}

/// `X ⊙ tanh(ÂX)`.
pub fn self_att_pool(s: &mut Session, a_hat: Var, x: Var) -> Result<Var> {
    let p = s.g.bmm(a_hat, x, false)?;
    let t = s.g.tanh(p);
    s.g.mul(x, t)
}

/// `σ(W[mean_i X_i ∥ max_i X_i] + b)` over the node axis of `[M,n,d]`.
pub fn readout(s: &mut Session, x: Var, lin: &Linear, act: Activation) -> Result<Var> {
    let mean = s.g.mean(x, 1)?;
    let max = s.g.max(x, 1)?;
    let cat = s.g.concat(&[mean, max], 1)?;
    let y = lin.forward(s, cat)?;
    Ok(act.apply(s, y))
}

/// `Σ_i σ(W X_i + b) − max_i σ(W X_i + b)` on `[M,n,d]`; also returns the
/// mapped node rows `[M,n,d_s]`.
pub fn agg_overlap(s: &mut Session, x: Var, lin: &Linear, act: Activation) -> Result<(Var, Var)> {
    let shape = s.g.shape(x).to_vec();
    let flat = s.g.reshape(x, vec![shape[0] * shape[1], shape[2]])?;
    let y = lin.forward(s, flat)?;
    let y = act.apply(s, y);
    let y = s.g.reshape(y, vec![shape[0], shape[1], lin.outputs])?;
    let agg = s.g.sum(y, 1)?;
    let overlap = s.g.max(y, 1)?;
    Ok((s.g.sub(agg, overlap)?, y))
}

/// Hidden-layer hypernetwork `Linear → ELU → Linear`.
#[derive(Clone, Debug)]
pub struct HyperNet {
    pub l1: Linear,
    pub l2: Linear,
}

impl HyperNet {
    fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        inputs: usize,
        hidden: usize,
        outputs: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            l1: Linear::new(store, &format!("{name}.l1"), inputs, hidden, rng),
            l2: Linear::new(store, &format!("{name}.l2"), hidden, outputs, rng),
        }
    }

    fn forward(&self, s: &mut Session, x: Var, mid: Activation) -> Result<Var> {
        let h = self.l1.forward(s, x)?;
        let h = mid.apply(s, h);
        self.l2.forward(s, h)
    }
}

#[derive(Clone, Debug)]
pub struct Mixer {
    pub config: MixerConfig,
    pub gcn: Vec<ParamId>,
    pub readout: Linear,
    pub agg_head: Linear,
    /// Graph sources: per-node `[s ∥ node_i] → e`; true state: `s → n·e`.
    pub hyper_w1: HyperNet,
    pub hyper_b1: Linear,
    pub hyper_w2: HyperNet,
    pub value: HyperNet,
}

/// Conditioning state plus per-node rows (graph sources only).
pub struct MixerState {
    pub state: Var,
    pub nodes: Option<Var>,
}

impl Mixer {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        config: MixerConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let c = &config;
        if c.n_agents == 0 || c.state_dim == 0 || c.embed == 0 {
            return Err(TensorError::Invalid("mixer widths must be positive".into()));
        }
        let dx = 2 * c.obs_size;
        let mut gcn = Vec::new();
        let mut width = dx;
        if c.gcn_weights {
            for k in 0..c.gcn_layers {
                let bound = 1.0 / (width as f64).sqrt();
                let data = (0..width * c.gcn_dim)
                    .map(|_| rng.random_range(-bound..=bound))
                    .collect();
                let w = Tensor::new(vec![width, c.gcn_dim], data)?;
                gcn.push(store.add(format!("{name}.gcn{k}"), w));
                width = c.gcn_dim;
            }
        }
        let readout = Linear::new(
            store,
            &format!("{name}.readout"),
            2 * width,
            c.state_dim,
            rng,
        );
        let agg_head = Linear::new(store, &format!("{name}.agg"), dx, c.state_dim, rng);
        let (cond, w1_in, w1_out) = match c.source {
            StateSource::TrueState => (c.true_state_size, c.true_state_size, c.n_agents * c.embed),
            StateSource::Coarsened => (c.state_dim, c.state_dim + width, c.embed),
            StateSource::AggOverlap => (c.state_dim, 2 * c.state_dim, c.embed),
        };
        let hyper_w1 = HyperNet::new(
            store,
            &format!("{name}.hyper_w1"),
            w1_in,
            c.hyper_hidden,
            w1_out,
            rng,
        );
        let hyper_b1 = Linear::new(store, &format!("{name}.hyper_b1"), cond, c.embed, rng);
        let hyper_w2 = HyperNet::new(
            store,
            &format!("{name}.hyper_w2"),
            cond,
            c.hyper_hidden,
            c.embed,
            rng,
        );
        let value = HyperNet::new(store, &format!("{name}.value"), cond, c.embed, 1, rng);
        Ok(Self {
            config,
            gcn,
            readout,
            agg_head,
            hyper_w1,
            hyper_b1,
            hyper_w2,
            value,
        })
    }

    /// Coarsened (or agg/overlap) state from `A: [M,n,n]`, `obs: [M,n,o]`.
    pub fn graph_state(&self, s: &mut Session, adjacency: Var, obs: Var) -> Result<MixerState> {
        let c = &self.config;
        let x = node_features(s, adjacency, obs)?;
        if c.source == StateSource::AggOverlap {
            let (state, nodes) = agg_overlap(s, x, &self.agg_head, c.readout_activation)?;
            return Ok(MixerState {
                state,
                nodes: Some(nodes),
            });
        }
        let a_hat = normalized_constant(s, adjacency)?;
        let mut x = x;
        if c.gcn_weights {
            for &w in &self.gcn {
                let w = s.p(w);
                x = gcn_layer(s, a_hat, x, Some(w), c.gcn_activation)?;
            }
        } else {
            for _ in 0..c.gcn_layers {
                x = gcn_layer(s, a_hat, x, None, c.gcn_activation)?;
            }
        }
        let pooled = self_att_pool(s, a_hat, x)?;
        let state = readout(s, pooled, &self.readout, c.readout_activation)?;
        Ok(MixerState {
            state,
            nodes: Some(pooled),
        })
    }

    /// Monotonic mix of `q: [M × n]` conditioned on `cond`; returns `[M]`.
    pub fn mix(&self, s: &mut Session, q: Var, cond: &MixerState) -> Result<Var> {
        let c = &self.config;
        let (m, n, e) = (s.g.shape(q)[0], c.n_agents, c.embed);
        if s.g.shape(q) != [m, n] {
            return Err(TensorError::ShapeMismatch {
                op: "mix",
                left: s.g.shape(q).to_vec(),
                right: vec![m, n],
            });
        }
        let state = cond.state;
        let w1 = match (c.source, cond.nodes) {
            (StateSource::TrueState, _) | (_, None) => {
                self.hyper_w1.forward(s, state, Activation::Elu)?
            }
            (_, Some(nodes)) => {
                let dn = s.g.shape(nodes)[2];
                let ds = s.g.shape(state)[1];
                let idx: Vec<usize> = (0..m * n).map(|r| r / n).collect();
                let rep = s.g.select_rows(state, &idx)?;
                let flat = s.g.reshape(nodes, vec![m * n, dn])?;
                let inp = s.g.concat(&[rep, flat], 1)?;
                debug_assert_eq!(s.g.shape(inp)[1], ds + dn);
                self.hyper_w1.forward(s, inp, Activation::Elu)?
            }
        };
        let w1 = s.g.abs(w1);
        let w1 = s.g.reshape(w1, vec![m, n, e])?;
        let b1 = self.hyper_b1.forward(s, state)?;
        let w2 = self.hyper_w2.forward(s, state, Activation::Elu)?;
        let w2 = s.g.abs(w2);
        let w2 = s.g.reshape(w2, vec![m, e, 1])?;
        let v = self.value.forward(s, state, Activation::Relu)?;

        let q3 = s.g.reshape(q, vec![m, 1, n])?;
        let hidden = s.g.bmm(q3, w1, false)?;
        let hidden = s.g.reshape(hidden, vec![m, e])?;
        let hidden = s.g.add(hidden, b1)?;
        let hidden = s.g.elu(hidden);
        let hidden = s.g.reshape(hidden, vec![m, 1, e])?;
        let out = s.g.bmm(hidden, w2, false)?;
        let out = s.g.reshape(out, vec![m])?;
        let v = s.g.reshape(v, vec![m])?;
        s.g.add(out, v)
    }

    /// `Q_tot: [M]` from `q: [M × n]`, `A: [M,n,n]`, `obs: [M,n,o]` and the
    /// true state `[M × S]` (only read by the true-state source).
    pub fn forward(
        &self,
        s: &mut Session,
        q: Var,
        adjacency: Var,
        obs: Var,
        true_state: Var,
    ) -> Result<Var> {
        let cond = self.condition(s, adjacency, obs, true_state)?;
        self.mix(s, q, &cond)
    }

    pub fn condition(
        &self,
        s: &mut Session,
        adjacency: Var,
        obs: Var,
        true_state: Var,
    ) -> Result<MixerState> {
        match self.config.source {
            StateSource::TrueState => Ok(MixerState {
                state: true_state,
                nodes: None,
            }),
            _ => self.graph_state(s, adjacency, obs),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gate::init_adjacency;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn config(source: StateSource) -> MixerConfig {
        MixerConfig {
            n_agents: 3,
            obs_size: 4,
            true_state_size: 6,
            state_dim: 8,
            gcn_layers: 3,
            gcn_dim: 8,
            gcn_weights: true,
            gcn_activation: Activation::Elu,
            readout_activation: Activation::Tanh,
            embed: 8,
            hyper_hidden: 16,
            source,
        }
    }

    #[test]
    fn normalization_examples() {
        let a = Adjacency::from_values(2, &[0.0, 1.0, 1.0, 0.0]).unwrap();
        assert_eq!(normalize_adjacency(&a), vec![0.5; 4]);
        assert_eq!(
            normalize_adjacency(&Adjacency::empty(2)),
            vec![1.0, 0.0, 0.0, 1.0]
        );
        let full = normalize_adjacency(&init_adjacency(4).unwrap());
        for row in full.chunks(4) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn node_feature_layout() {
        let store = ParamStore::new();
        let mut s = Session::new(&store, false);
        let a =
            s.g.constant(vec![1, 3, 3], vec![0., 1., 1., 0., 0., 0., 1., 0., 0.])
                .unwrap();
        let o = s.g.constant(vec![1, 3, 1], vec![2.0, 4.0, 8.0]).unwrap();
        let x = node_features(&mut s, a, o).unwrap();
        assert_eq!(s.g.value(x), &[6.0, 2.0, 0.0, 4.0, 1.0, 8.0]);
    }

    #[test]
    fn zero_hypernet_gives_value_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let mixer =
            Mixer::new(&mut store, "mix", config(StateSource::TrueState), &mut rng).unwrap();
        for id in [
            mixer.hyper_w1.l2.w,
            mixer.hyper_w1.l2.b,
            mixer.hyper_w2.l2.w,
            mixer.hyper_w2.l2.b,
        ] {
            store.get_mut(id).data_mut().fill(0.0);
        }
        let mut s = Session::new(&store, false);
        let q =
            s.g.constant(vec![2, 3], vec![1.0, -2.0, 3.0, 0.5, 0.5, 9.0])
                .unwrap();
        let a = s.g.constant(vec![2, 3, 3], vec![0.0; 18]).unwrap();
        let o = s.g.constant(vec![2, 3, 4], vec![0.0; 24]).unwrap();
        let st = s.g.constant(vec![2, 6], vec![0.0; 12]).unwrap();
        let out = mixer.forward(&mut s, q, a, o, st).unwrap();
        let v = mixer.value.forward(&mut s, st, Activation::Relu).unwrap();
        assert_eq!(s.g.value(out), s.g.value(v));
    }

    #[test]
    fn all_sources_produce_scalars() {
        for source in [
            StateSource::Coarsened,
            StateSource::AggOverlap,
            StateSource::TrueState,
        ] {
            let mut rng = ChaCha8Rng::seed_from_u64(2);
            let mut store = ParamStore::new();
            let mixer = Mixer::new(&mut store, "mix", config(source), &mut rng).unwrap();
            let mut s = Session::new(&store, false);
            let q = s.g.constant(vec![2, 3], vec![0.3; 6]).unwrap();
            let full = init_adjacency(3).unwrap().values();
            let a =
                s.g.constant(vec![2, 3, 3], [full.clone(), full].concat())
                    .unwrap();
            let o =
                s.g.constant(vec![2, 3, 4], (0..24).map(|k| k as f64 / 24.0).collect())
                    .unwrap();
            let st = s.g.constant(vec![2, 6], vec![0.1; 12]).unwrap();
            let out = mixer.forward(&mut s, q, a, o, st).unwrap();
            assert_eq!(s.g.shape(out), &[2]);
            assert!(s.g.value(out).iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn agg_overlap_single_row_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::new();
        let lin = Linear::new(&mut store, "agg", 3, 2, &mut rng);
        let mut s = Session::new(&store, false);
        let x = s.g.constant(vec![1, 1, 3], vec![0.4, -1.0, 2.0]).unwrap();
        let (st, _) = agg_overlap(&mut s, x, &lin, Activation::Tanh).unwrap();
        assert_eq!(s.g.value(st), &[0.0, 0.0]);
    }
}
