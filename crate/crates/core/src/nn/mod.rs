//! Differentiable building blocks shared by the agent network, the gate and
//! the mixer.

mod params;

pub use params::{NamedTensor, ParamId, ParamStore, Session};

use rand::Rng;

use crate::tensor::{Result, Tensor, TensorError, Var};

const LN_EPS: f64 = 1e-5;

fn uniform_tensor<R: Rng + ?Sized>(shape: Vec<usize>, bound: f64, rng: &mut R) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
    Tensor::new(shape, data).expect("sized by construction")
}

/// Affine map `xW + b` with `W: [in × out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub inputs: usize,
    pub outputs: usize,
}

impl Linear {
    /// Uniform(−1/√in, 1/√in) initialization for weights and bias.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        inputs: usize,
        outputs: usize,
        rng: &mut R,
    ) -> Self {
        let bound = 1.0 / (inputs.max(1) as f64).sqrt();
        let w = store.add(
            format!("{name}.w"),
            uniform_tensor(vec![inputs, outputs], bound, rng),
        );
        let b = store.add(
            format!("{name}.b"),
            uniform_tensor(vec![outputs], bound, rng),
        );
        Self {
            w,
            b,
            inputs,
            outputs,
        }
    }

    pub fn zeroed(store: &mut ParamStore, name: &str, inputs: usize, outputs: usize) -> Self {
        let w = store.add(format!("{name}.w"), Tensor::zeros(vec![inputs, outputs]));
        let b = store.add(format!("{name}.b"), Tensor::zeros(vec![outputs]));
        Self {
            w,
            b,
            inputs,
            outputs,
        }
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let (w, b) = (s.p(self.w), s.p(self.b));
        let y = s.g.matmul(x, w)?;
        s.g.add_row(y, b)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        let gain = store.add(
            format!("{name}.gain"),
            Tensor::new(vec![dim], vec![1.0; dim]).expect("sized"),
        );
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(vec![dim]));
        Self { gain, bias }
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        layer_norm(s, x, self.gain, self.bias)
    }
}

/// Per-row zero mean / unit variance (ε = 1e-5), then `gain ⊙ · + bias`.
pub fn layer_norm(s: &mut Session, x: Var, gain: ParamId, bias: ParamId) -> Result<Var> {
    let (g, b) = (s.p(gain), s.p(bias));
    let z = s.g.normalize_rows(x, LN_EPS);
    let z = s.g.mul_row(z, g)?;
    s.g.add_row(z, b)
}

/// Multi-head scaled dot-product self-attention over independent token groups.
#[derive(Clone, Debug)]
pub struct SelfAttention {
    /// Query, key and value projections stacked column-wise: `[d × 3d]`.
    pub qkv: Linear,
    pub out: Linear,
    pub dim: usize,
    pub heads: usize,
}

impl SelfAttention {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(TensorError::Invalid(format!(
                "attention width {dim} is not divisible by {heads} heads"
            )));
        }
        Ok(Self {
            qkv: Linear::new(store, &format!("{name}.qkv"), dim, 3 * dim, rng),
            out: Linear::new(store, &format!("{name}.out"), dim, dim, rng),
            dim,
            heads,
        })
    }

    /// `x` holds `groups` consecutive runs of `tokens` rows; attention never
    /// crosses a group boundary.
    pub fn forward(&self, s: &mut Session, x: Var, groups: usize, tokens: usize) -> Result<Var> {
        let rows = groups * tokens;
        if s.g.shape(x) != [rows, self.dim] {
            return Err(TensorError::ShapeMismatch {
                op: "self_attention",
                left: s.g.shape(x).to_vec(),
                right: vec![rows, self.dim],
            });
        }
        let dh = self.dim / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let qkv = self.qkv.forward(s, x)?;
        let mut heads = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let mut part = |offset: usize| -> Result<Var> {
                let p = s.g.narrow(qkv, 1, offset + h * dh, dh)?;
                s.g.reshape(p, vec![groups, tokens, dh])
            };
            let q = part(0)?;
            let k = part(self.dim)?;
            let v = part(2 * self.dim)?;
            let scores = s.g.bmm(q, k, true)?;
            let scores = s.g.scale(scores, scale);
            let att = s.g.softmax(scores);
            let o = s.g.bmm(att, v, false)?;
            heads.push(s.g.reshape(o, vec![rows, dh])?);
        }
        let cat = s.g.concat(&heads, 1)?;
        self.out.forward(s, cat)
    }
}

/// Position-wise `Linear → ReLU → Linear`.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            up: Linear::new(store, &format!("{name}.up"), dim, hidden, rng),
            down: Linear::new(store, &format!("{name}.down"), hidden, dim, rng),
        }
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let h = self.up.forward(s, x)?;
        let h = s.g.relu(h);
        self.down.forward(s, h)
    }
}

/// Pre-norm block: `y = x + Attn(LN(x))`, `out = y + FFN(LN(y))`.
#[derive(Clone, Debug)]
pub struct TransformerBlock {
    pub ln_attn: LayerNorm,
    pub attn: SelfAttention,
    pub ln_ffn: LayerNorm,
    pub ffn: FeedForward,
}

impl TransformerBlock {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            ln_attn: LayerNorm::new(store, &format!("{name}.ln1"), dim),
            attn: SelfAttention::new(store, &format!("{name}.attn"), dim, heads, rng)?,
            ln_ffn: LayerNorm::new(store, &format!("{name}.ln2"), dim),
            ffn: FeedForward::new(store, &format!("{name}.ffn"), dim, 2 * dim, rng),
        })
    }

    pub fn forward(&self, s: &mut Session, x: Var, groups: usize, tokens: usize) -> Result<Var> {
        let n = self.ln_attn.forward(s, x)?;
        let a = self.attn.forward(s, n, groups, tokens)?;
        let y = s.g.add(x, a)?;
        let n = self.ln_ffn.forward(s, y)?;
        let f = self.ffn.forward(s, n)?;
        s.g.add(y, f)
    }
}

/// `tanh(W[o ∥ h_prev] + b)`: the per-agent input token.
#[derive(Clone, Debug)]
pub struct ObsEmbed {
    pub lin: Linear,
    pub obs_dim: usize,
    pub hidden_dim: usize,
}

impl ObsEmbed {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        obs_dim: usize,
        hidden_dim: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            lin: Linear::new(store, name, obs_dim + hidden_dim, out_dim, rng),
            obs_dim,
            hidden_dim,
        }
    }

    /// `obs: [m × obs_dim]`, `h_prev: [m × hidden_dim]`.
    pub fn forward(&self, s: &mut Session, obs: Var, h_prev: Var) -> Result<Var> {
        let (so, sh) = (s.g.shape(obs).to_vec(), s.g.shape(h_prev).to_vec());
        if so.len() != 2
            || sh.len() != 2
            || so[1] != self.obs_dim
            || sh[1] != self.hidden_dim
            || so[0] != sh[0]
        {
            return Err(TensorError::ShapeMismatch {
                op: "obs_embed",
                left: so,
                right: sh,
            });
        }
        let x = s.g.concat(&[obs, h_prev], 1)?;
        let y = self.lin.forward(s, x)?;
        Ok(s.g.tanh(y))
    }
}

/// Standard Gumbel(0, 1) draws.
pub fn sample_gumbel<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let u: f64 = rng.random::<f64>().max(f64::MIN_POSITIVE);
            -(-u.ln()).ln()
        })
        .collect()
}

/// Gumbel-softmax over the last axis of `logits` with caller-supplied noise.
/// With `hard`, the forward value is the one-hot of the soft argmax (first
/// index on ties) and the gradient is that of the soft sample.
pub fn gumbel_softmax_with_noise(
    s: &mut Session,
    logits: Var,
    noise: Vec<f64>,
    temperature: f64,
    hard: bool,
) -> Result<Var> {
    if temperature.is_nan() || temperature <= 0.0 {
        return Err(TensorError::Invalid(format!(
            "gumbel-softmax temperature must be positive, got {temperature}"
        )));
    }
    let shape = s.g.shape(logits).to_vec();
    let noise = s.g.constant(shape.clone(), noise)?;
    let z = s.g.add(logits, noise)?;
    let z = s.g.scale(z, 1.0 / temperature);
    let soft = s.g.softmax(z);
    if !hard {
        return Ok(soft);
    }
    let w = shape.last().copied().unwrap_or(1);
    let mut onehot = vec![0.0; s.g.value(soft).len()];
    for (r, row) in s.g.value(soft).chunks(w).enumerate() {
        let mut best = 0;
        for (c, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = c;
            }
        }
        onehot[r * w + best] = 1.0;
    }
    s.g.straight_through(soft, onehot)
}

pub fn gumbel_softmax<R: Rng + ?Sized>(
    s: &mut Session,
    logits: Var,
    temperature: f64,
    hard: bool,
    rng: &mut R,
) -> Result<Var> {
    let n = s.g.value(logits).len();
    let noise = sample_gumbel(rng, n);
    gumbel_softmax_with_noise(s, logits, noise, temperature, hard)
}
