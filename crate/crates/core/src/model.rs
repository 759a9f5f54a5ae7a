//! Dense diffusion-transformer backbone with per-block router slots.
//!
//! Blocks use pre-norm residual wiring with adaLN modulation on both
//! sub-layers:
//!
//! ```text
//! x <- x + gate_a * mhsa((1 + scale_a) * LN(x) + shift_a)
//! x <- x + gate_m * mlp((1 + scale_m) * LN(x) + shift_m)
//! ```
//!
//! where the six modulation vectors are a per-block linear map of the
//! timestep embedding.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::elastic::{self, RouterWeights, WidthMenu};
use crate::error::{Error, Result};
use crate::flow::check_unit;
use crate::params::{Graph, ParamGroup, ParamId, ParamStore};
use crate::tensor::Tensor;
use crate::Var;

pub const LN_EPS: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DiTConfig {
    pub n_blocks: usize,
    /// Model dimension `D`.
    pub dim: usize,
    /// `H / D`.
    pub width_factor: usize,
    /// Router hidden size `H_r`.
    pub router_hidden: usize,
    pub n_heads: usize,
    /// Sequence length `L`.
    pub tokens: usize,
    /// Channels per input token; projected to `dim` on the way in.
    pub data_dim: usize,
    /// Scales `t` before the sinusoidal features.
    pub t_max: f64,
}

impl Default for DiTConfig {
    fn default() -> Self {
        Self {
            n_blocks: 8,
            dim: 32,
            width_factor: 4,
            router_hidden: 8,
            n_heads: 4,
            tokens: 16,
            data_dim: 32,
            t_max: 1000.0,
        }
    }
}

impl DiTConfig {
    pub fn hidden(&self) -> usize {
        self.width_factor * self.dim
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::contract(msg));
        if self.n_blocks == 0 || self.tokens == 0 || self.data_dim == 0 {
            return bad("n_blocks, tokens and data_dim must be positive".into());
        }
        if self.dim < 2 || !self.dim.is_multiple_of(2) {
            return bad(format!("dim must be even and >= 2, got {}", self.dim));
        }
        if self.n_heads == 0 || !self.dim.is_multiple_of(self.n_heads) {
            return bad(format!(
                "dim {} not divisible by n_heads {}",
                self.dim, self.n_heads
            ));
        }
        if self.hidden() == 0 || !self.hidden().is_multiple_of(4) {
            return bad(format!("hidden width {} not divisible by 4", self.hidden()));
        }
        if self.router_hidden == 0 || self.router_hidden >= self.dim {
            return bad(format!(
                "router_hidden must be in 1..dim, got {}",
                self.router_hidden
            ));
        }
        if !(self.t_max > 0.0 && self.t_max.is_finite()) {
            return bad(format!("t_max must be positive, got {}", self.t_max));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let w = g.p(self.w);
        let y = g.matmul(x, w)?;
        match self.b {
            Some(b) => {
                let b = g.p(b);
                g.add_row(y, b)
            }
            None => Ok(y),
        }
    }
}

#[derive(Clone, Debug)]
pub struct BlockWeights {
    pub query: ParamId,
    pub key: ParamId,
    pub value: ParamId,
    pub output: ParamId,
    /// `D x H`.
    pub mlp_w1: ParamId,
    /// `H x D`.
    pub mlp_w2: ParamId,
    /// Timestep embedding to the six modulation vectors.
    pub modulation: Linear,
}

/// Per-block modulation vectors, each `[1, D]`.
#[derive(Clone, Copy, Debug)]
pub struct BlockModulation {
    pub scale_attn: Var,
    pub shift_attn: Var,
    pub gate_attn: Var,
    pub scale_mlp: Var,
    pub shift_mlp: Var,
    pub gate_mlp: Var,
}

/// How a block evaluates its MLP.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum MlpMode {
    Dense,
    /// Training path: zero the hidden channels beyond the ratio.
    Masked(f64),
    /// Inference path: slice the weights down to the ratio.
    Sliced(f64),
}

#[derive(Clone, Debug)]
pub struct ElasticDit {
    pub cfg: DiTConfig,
    pub params: ParamStore,
    pub time_embed: Linear,
    pub input: Linear,
    pub blocks: Vec<BlockWeights>,
    pub routers: Vec<RouterWeights>,
    pub head: Linear,
    pub widths: WidthMenu,
}

fn linear_init(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Tensor {
    Tensor::randn(&[fan_in, fan_out], 1.0 / (fan_in as f64).sqrt(), rng)
}

impl ElasticDit {
    /// Randomly initialized backbone with fully open routers.
    pub fn new(cfg: DiTConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let widths = WidthMenu::default();
        widths.validate(cfg.hidden())?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamStore::new();
        let (d, h, dd) = (cfg.dim, cfg.hidden(), cfg.data_dim);
        let bb = ParamGroup::Backbone;

        let time_embed = Linear {
            w: ps.add("time_embed.w", linear_init(&mut rng, d, d), bb),
            b: Some(ps.add("time_embed.b", Tensor::zeros(&[1, d]), bb)),
        };
        let input = Linear {
            w: ps.add("input.w", linear_init(&mut rng, dd, d), bb),
            b: Some(ps.add("input.b", Tensor::zeros(&[1, d]), bb)),
        };
        let mut blocks = Vec::with_capacity(cfg.n_blocks);
        for i in 0..cfg.n_blocks {
            let name = |s: &str| format!("blocks.{i}.{s}");
            blocks.push(BlockWeights {
                query: ps.add(name("attn.query"), linear_init(&mut rng, d, d), bb),
                key: ps.add(name("attn.key"), linear_init(&mut rng, d, d), bb),
                value: ps.add(name("attn.value"), linear_init(&mut rng, d, d), bb),
                output: ps.add(name("attn.output"), linear_init(&mut rng, d, d), bb),
                mlp_w1: ps.add(name("mlp.w1"), linear_init(&mut rng, d, h), bb),
                mlp_w2: ps.add(name("mlp.w2"), linear_init(&mut rng, h, d), bb),
                modulation: Linear {
                    w: ps.add(name("mod.w"), Tensor::randn(&[d, 6 * d], 0.02, &mut rng), bb),
                    b: Some(ps.add(name("mod.b"), Tensor::zeros(&[1, 6 * d]), bb)),
                },
            });
        }
        let mut routers = Vec::with_capacity(cfg.n_blocks);
        for i in 0..cfg.n_blocks {
            routers.push(RouterWeights::allocate(&mut ps, i, &cfg, widths.len()));
        }
        let head = Linear {
            w: ps.add("head.w", linear_init(&mut rng, d, dd), bb),
            b: Some(ps.add("head.b", Tensor::zeros(&[1, dd]), bb)),
        };
        let mut model = Self {
            cfg,
            params: ps,
            time_embed,
            input,
            blocks,
            routers,
            head,
            widths,
        };
        elastic::init_routers_full_capacity(&mut model, &mut rng);
        Ok(model)
    }

    pub fn sample_shape(&self) -> [usize; 2] {
        [self.cfg.tokens, self.cfg.data_dim]
    }

    pub fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.shape() != self.sample_shape() {
            return Err(Error::shape("model input", x.shape(), &self.sample_shape()));
        }
        Ok(())
    }
}

/// Sinusoidal features of `t * t_max` at `dim / 2` frequencies, `[1, dim]`.
pub fn sinusoidal_features(t: f64, dim: usize, t_max: f64) -> Tensor {
    let half = dim / 2;
    let pos = t * t_max;
    let mut out = vec![0.0; dim];
    for k in 0..half {
        let freq = (-(10_000f64).ln() * k as f64 / half as f64).exp();
        out[k] = (pos * freq).sin();
        out[half + k] = (pos * freq).cos();
    }
    Tensor::from_parts(vec![1, dim], out)
}

/// `E(t)`: sinusoidal features, one linear layer, GELU.
pub fn timestep_embed(g: &mut Graph, model: &ElasticDit, t: f64) -> Result<Var> {
    check_unit("t", t)?;
    let feats = g.constant(sinusoidal_features(t, model.cfg.dim, model.cfg.t_max));
    let h = model.time_embed.forward(g, feats)?;
    g.gelu(h)
}

/// `(1 + scale) * LN(x) + shift` with row-vector broadcasting.
pub fn modulate(g: &mut Graph, x: Var, scale: Var, shift: Var) -> Result<Var> {
    let n = g.layer_norm(x, LN_EPS)?;
    let s = g.offset(scale, 1.0)?;
    let m = g.mul_row(n, s)?;
    g.add_row(m, shift)
}

/// Bidirectional multi-head self-attention over the rows of `x`.
pub fn mhsa(g: &mut Graph, x: Var, w: &BlockWeights, n_heads: usize) -> Result<Var> {
    let d = g.value(x).cols();
    if n_heads == 0 || !d.is_multiple_of(n_heads) {
        return Err(Error::shape("mhsa", g.shape(x), &[n_heads]));
    }
    let dh = d / n_heads;
    let (wq, wk, wv, wo) = (g.p(w.query), g.p(w.key), g.p(w.value), g.p(w.output));
    let q = g.matmul(x, wq)?;
    let k = g.matmul(x, wk)?;
    let v = g.matmul(x, wv)?;
    let inv_sqrt = 1.0 / (dh as f64).sqrt();
    let mut heads = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let (lo, hi) = (h * dh, (h + 1) * dh);
        let qh = g.slice_cols(q, lo, hi)?;
        let kh = g.slice_cols(k, lo, hi)?;
        let vh = g.slice_cols(v, lo, hi)?;
        let kt = g.transpose(kh)?;
        let scores = g.matmul(qh, kt)?;
        let scores = g.scale(scores, inv_sqrt)?;
        let attn = g.softmax(scores)?;
        heads.push(g.matmul(attn, vh)?);
    }
    let cat = if heads.len() == 1 {
        heads[0]
    } else {
        g.concat_cols(&heads)?
    };
    g.matmul(cat, wo)
}

/// `GELU(z W1) W2`.
pub fn mlp_dense(g: &mut Graph, z: Var, w: &BlockWeights) -> Result<Var> {
    let (w1, w2) = (g.p(w.mlp_w1), g.p(w.mlp_w2));
    let h = g.matmul(z, w1)?;
    let h = g.gelu(h)?;
    g.matmul(h, w2)
}

pub fn block_modulation(g: &mut Graph, t_emb: Var, w: &BlockWeights) -> Result<BlockModulation> {
    let m = w.modulation.forward(g, t_emb)?;
    let d = g.value(t_emb).cols();
    let mut part = |i: usize| g.slice_cols(m, i * d, (i + 1) * d);
    Ok(BlockModulation {
        scale_attn: part(0)?,
        shift_attn: part(1)?,
        gate_attn: part(2)?,
        scale_mlp: part(3)?,
        shift_mlp: part(4)?,
        gate_mlp: part(5)?,
    })
}

/// One block given precomputed modulation. Only this part scales with the
/// token count.
pub fn block_forward(
    g: &mut Graph,
    model: &ElasticDit,
    x: Var,
    m: &BlockModulation,
    w: &BlockWeights,
    mlp: MlpMode,
) -> Result<Var> {
    let a_in = modulate(g, x, m.scale_attn, m.shift_attn)?;
    let a = mhsa(g, a_in, w, model.cfg.n_heads)?;
    let a = g.mul_row(a, m.gate_attn)?;
    let x = g.add(x, a)?;
    let m_in = modulate(g, x, m.scale_mlp, m.shift_mlp)?;
    let f = match mlp {
        MlpMode::Dense => mlp_dense(g, m_in, w)?,
        MlpMode::Masked(r) => elastic::mlp_masked(g, &model.widths, m_in, r, w)?,
        MlpMode::Sliced(r) => elastic::mlp_sliced(g, &model.widths, m_in, r, w)?,
    };
    let f = g.mul_row(f, m.gate_mlp)?;
    g.add(x, f)
}

pub fn block_forward_dense(
    g: &mut Graph,
    model: &ElasticDit,
    x: Var,
    t_emb: Var,
    w: &BlockWeights,
) -> Result<Var> {
    let m = block_modulation(g, t_emb, w)?;
    block_forward(g, model, x, &m, w, MlpMode::Dense)
}

/// Final layer norm and linear head.
pub fn output_head(g: &mut Graph, model: &ElasticDit, h: Var) -> Result<Var> {
    let n = g.layer_norm(h, LN_EPS)?;
    model.head.forward(g, n)
}

/// Velocity prediction of the dense backbone (routers unused).
pub fn model_forward_dense(g: &mut Graph, model: &ElasticDit, x: Var, t: f64) -> Result<Var> {
    let t_emb = timestep_embed(g, model, t)?;
    let mut h = model.input.forward(g, x)?;
    for w in &model.blocks {
        h = block_forward_dense(g, model, h, t_emb, w)?;
    }
    output_head(g, model, h)
}

/// Forward-only dense velocity, for samplers.
pub fn dense_velocity(model: &ElasticDit, x: &Tensor, t: f64) -> Result<Tensor> {
    model.check_input(x)?;
    let mut g = Graph::new(&model.params);
    let xv = g.constant(x.clone());
    let v = model_forward_dense(&mut g, model, xv, t)?;
    Ok(g.value(v).clone())
}
