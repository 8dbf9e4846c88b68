//! Multi-key gated communication.
//!
//! Edges are directed and stored receiver-major: entry `(i, j)` of an
//! adjacency slice is 1 iff agent `j` sends to agent `i` at that step. The
//! diagonal is always 0.
//!
//! Per step the pipeline is: pre-communicate every payload over the previous
//! adjacency, score each (receiver, sender) pair with `K` independent
//! two-way hard Gumbel-softmax keys, OR the keys into the new adjacency, and
//! compose the received messages with it.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::nn::{gumbel_softmax_with_noise, sample_gumbel, ParamId, ParamStore, Session};
use crate::tensor::{Result, Tensor, TensorError, Var};

/// One `n × n` slice of an adjacency trajectory.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Vec<u8>>", into = "Vec<Vec<u8>>")]
pub struct Adjacency {
    n: usize,
    entries: Vec<bool>,
}

impl Adjacency {
    pub fn empty(n: usize) -> Self {
        Self {
            n,
            entries: vec![false; n * n],
        }
    }

    /// Validates binarity and the zero diagonal.
    pub fn from_values(n: usize, values: &[f64]) -> Result<Self> {
        if values.len() != n * n {
            return Err(TensorError::DataLength {
                shape: vec![n, n],
                len: values.len(),
            });
        }
        let mut entries = Vec::with_capacity(n * n);
        for (k, &v) in values.iter().enumerate() {
            let bit = if v == 1.0 {
                true
            } else if v == 0.0 {
                false
            } else {
                return Err(TensorError::Invalid(format!(
                    "adjacency entry {v} is not binary"
                )));
            };
            if bit && k / n == k % n {
                return Err(TensorError::Invalid(format!(
                    "adjacency has a self-loop at agent {}",
                    k / n
                )));
            }
            entries.push(bit);
        }
        Ok(Self { n, entries })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn get(&self, receiver: usize, sender: usize) -> bool {
        self.entries[receiver * self.n + sender]
    }

    pub fn set(&mut self, receiver: usize, sender: usize, on: bool) {
        assert!(
            receiver != sender || !on,
            "self-communication is not allowed"
        );
        self.entries[receiver * self.n + sender] = on;
    }

    pub fn edges(&self) -> usize {
        self.entries.iter().filter(|&&b| b).count()
    }

    pub fn values(&self) -> Vec<f64> {
        self.entries
            .iter()
            .map(|&b| if b { 1.0 } else { 0.0 })
            .collect()
    }

    pub fn rows(&self) -> Vec<Vec<u8>> {
        self.entries
            .chunks(self.n.max(1))
            .take(self.n)
            .map(|r| r.iter().map(|&b| u8::from(b)).collect())
            .collect()
    }
}

impl TryFrom<Vec<Vec<u8>>> for Adjacency {
    type Error = TensorError;

    fn try_from(rows: Vec<Vec<u8>>) -> Result<Self> {
        let n = rows.len();
        if rows.iter().any(|r| r.len() != n) {
            return Err(TensorError::Invalid("adjacency rows are not square".into()));
        }
        let values: Vec<f64> = rows.iter().flatten().map(|&b| f64::from(b)).collect();
        Self::from_values(n, &values)
    }
}

impl From<Adjacency> for Vec<Vec<u8>> {
    fn from(a: Adjacency) -> Self {
        a.rows()
    }
}

/// Per-step adjacency slices of one episode (`l × n × n`).
pub type AdjacencyTrajectory = Vec<Adjacency>;

/// All-ones adjacency with the diagonal masked off.
pub fn init_adjacency(n: usize) -> Result<Adjacency> {
    if n == 0 {
        return Err(TensorError::Invalid("agent count must be positive".into()));
    }
    let entries = (0..n * n).map(|k| k / n != k % n).collect();
    Ok(Adjacency { n, entries })
}

/// Stack adjacency slices into a `[B × n × n]` tape constant.
pub fn adjacency_constant(s: &mut Session, slices: &[&Adjacency]) -> Result<Var> {
    let n = slices.first().map_or(0, |a| a.n());
    let data = slices.iter().flat_map(|a| a.values()).collect();
    s.g.constant(vec![slices.len(), n, n], data)
}

/// `m̃[b,i,j,:] = A_prev[b,i,j] · m[b,j,:]`.
pub fn pre_communicate(s: &mut Session, a_prev: Var, board: Var) -> Result<Var> {
    s.g.masked_broadcast(a_prev, board)
}

/// Same masking as [`pre_communicate`], applied with the freshly gated adjacency.
pub fn compose_messages(s: &mut Session, a_t: Var, board: Var) -> Result<Var> {
    s.g.masked_broadcast(a_t, board)
}

/// How adjacency slices are produced.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateMode {
    /// Learned multi-key gate.
    Learned,
    /// Every off-diagonal edge open at every step.
    Open,
    /// No edges.
    Closed,
}

#[derive(Clone, Debug)]
pub struct CommGate {
    /// Query and key projections, `[d_msg × d_gate]`, shared by all keys.
    pub w_query: ParamId,
    pub w_key: ParamId,
    /// Per-key value projections stacked column-wise, `[d_gate × 2K]`;
    /// columns `2k, 2k+1` are key `k`'s (communicate, silent) logits.
    pub w_value: ParamId,
    pub keys: usize,
    pub msg_dim: usize,
    pub gate_dim: usize,
    /// Use the receiver's own payload for the query term instead of the
    /// pre-message.
    pub query_from_self: bool,
}

/// Output of one gate evaluation for a batch of `B` graphs.
pub struct GateOutput {
    /// Hard key samples, `[B·n·n·K × 2]`, rows ordered (b, receiver, sender, key).
    pub keys: Var,
    /// `[B × n × n]` adjacency; values are exactly 0/1, gradient is straight-through.
    pub adjacency: Var,
}

impl CommGate {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        msg_dim: usize,
        gate_dim: usize,
        keys: usize,
        query_from_self: bool,
        rng: &mut R,
    ) -> Result<Self> {
        if keys == 0 {
            return Err(TensorError::Invalid("gate needs at least one key".into()));
        }
        let mut uniform = |rows: usize, cols: usize| {
            let bound = 1.0 / (rows as f64).sqrt();
            let data = (0..rows * cols)
                .map(|_| rng.random_range(-bound..=bound))
                .collect();
            Tensor::new(vec![rows, cols], data).expect("sized")
        };
        let wq = uniform(msg_dim, gate_dim);
        let wk = uniform(msg_dim, gate_dim);
        let wv = uniform(gate_dim, 2 * keys);
        Ok(Self {
            w_query: store.add(format!("{name}.w_query"), wq),
            w_key: store.add(format!("{name}.w_key"), wk),
            w_value: store.add(format!("{name}.w_value"), wv),
            keys,
            msg_dim,
            gate_dim,
            query_from_self,
        })
    }

    /// Gate logits `W_vᵀ tanh(W_q m̃ + W_k m̃)` for every (b, i, j, key):
    /// `[B·n·n·K × 2]`.
    ///
    /// `pre` is `[B × n × n × d_msg]`; `board` (`[B × n × d_msg]`) is only
    /// read when `query_from_self` is set.
    pub fn logits(&self, s: &mut Session, pre: Var, board: Var) -> Result<Var> {
        let shape = s.g.shape(pre).to_vec();
        if shape.len() != 4 || shape[1] != shape[2] || shape[3] != self.msg_dim {
            return Err(TensorError::ShapeMismatch {
                op: "multi_key_gate",
                left: shape,
                right: vec![self.msg_dim],
            });
        }
        let (b, n) = (shape[0], shape[1]);
        let rows = b * n * n;
        let flat = s.g.reshape(pre, vec![rows, self.msg_dim])?;
        let (wq, wk, wv) = (s.p(self.w_query), s.p(self.w_key), s.p(self.w_value));
        let query_src = if self.query_from_self {
            // receiver i's own payload repeated for every sender j
            let index: Vec<usize> = (0..rows).map(|r| r / n).collect();
            let own = s.g.reshape(board, vec![b * n, self.msg_dim])?;
            s.g.select_rows(own, &index)?
        } else {
            flat
        };
        let q = s.g.matmul(query_src, wq)?;
        let k = s.g.matmul(flat, wk)?;
        let h = s.g.add(q, k)?;
        let h = s.g.tanh(h);
        let logits = s.g.matmul(h, wv)?;
        s.g.reshape(logits, vec![rows * self.keys, 2])
    }

    /// Hard key samples with the diagonal forced to silent.
    pub fn sample_keys(
        &self,
        s: &mut Session,
        logits: Var,
        n: usize,
        temperature: f64,
        noise: Vec<f64>,
    ) -> Result<Var> {
        let keys = gumbel_softmax_with_noise(s, logits, noise, temperature, true)?;
        let total = s.g.shape(keys)[0];
        let per_pair = self.keys;
        let mut keep = vec![1.0; total * 2];
        let mut silent = vec![0.0; total * 2];
        for r in 0..total {
            let pair = r / per_pair;
            let (i, j) = ((pair / n) % n, pair % n);
            if i == j {
                keep[2 * r] = 0.0;
                keep[2 * r + 1] = 0.0;
                silent[2 * r + 1] = 1.0;
            }
        }
        let keep = s.g.constant(vec![total, 2], keep)?;
        let silent = s.g.constant(vec![total, 2], silent)?;
        let masked = s.g.mul(keys, keep)?;
        s.g.add(masked, silent)
    }

    /// Full gate: logits, sampling and OR-binarization.
    pub fn forward<R: Rng + ?Sized>(
        &self,
        s: &mut Session,
        pre: Var,
        board: Var,
        temperature: f64,
        rng: &mut R,
    ) -> Result<GateOutput> {
        let n = s.g.shape(pre)[1];
        let logits = self.logits(s, pre, board)?;
        let noise = sample_gumbel(rng, s.g.value(logits).len());
        let keys = self.sample_keys(s, logits, n, temperature, noise)?;
        let adjacency = binarize(s, keys, self.keys, n)?;
        Ok(GateOutput { keys, adjacency })
    }
}

/// `A[b,i,j] = ⌈max_k key[b,i,j,k].communicate⌉`. On hard keys this is an OR
/// over keys; the gradient reaches the first maximizing key's soft sample.
pub fn binarize(s: &mut Session, keys: Var, num_keys: usize, n: usize) -> Result<Var> {
    let total = s.g.shape(keys)[0];
    if !total.is_multiple_of(num_keys * n * n) || s.g.shape(keys).get(1) != Some(&2) {
        return Err(TensorError::ShapeMismatch {
            op: "binarize",
            left: s.g.shape(keys).to_vec(),
            right: vec![num_keys, n, n, 2],
        });
    }
    let b = total / (num_keys * n * n);
    let comm = s.g.narrow(keys, 1, 0, 1)?;
    let comm = s.g.reshape(comm, vec![b * n * n, num_keys])?;
    let best = s.g.max(comm, 1)?;
    // values are already 0/1 so the ceiling is the identity on them
    let ceil: Vec<f64> = s.g.value(best).iter().map(|v| v.ceil()).collect();
    let best = s.g.straight_through(best, ceil)?;
    s.g.reshape(best, vec![b, n, n])
}

/// Read the `[B × n × n]` adjacency values back as slices.
pub fn adjacency_slices(s: &Session, adjacency: Var) -> Result<Vec<Adjacency>> {
    let shape = s.g.shape(adjacency);
    let n = shape[1];
    s.g.value(adjacency)
        .chunks(n * n)
        .map(|c| Adjacency::from_values(n, c))
        .collect()
}
