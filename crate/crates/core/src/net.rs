//! Velocity field `v(m_t, t, d, e)`.
//!
//! The transformer variant embeds every observation row, an optional design
//! row and the current state as tokens, adds a timestep embedding to all of
//! them, runs pre-norm bidirectional attention blocks with rotary positions
//! and reads the velocity off the state token. The MLP variant takes a fixed
//! number of observations and concatenates everything into one vector.
//!
//! Graph construction is generic over [`Real`] so that the `f64` gradient
//! checker exercises exactly the code used for `f32` training.

use cfm_tensor::{Real, Tape, Tensor, Var};
use rand::Rng;

use crate::{error::invalid, forward::TaskKind, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Arch {
    Transformer,
    Mlp,
}

impl Arch {
    pub fn id(self) -> u8 {
        match self {
            Arch::Transformer => 0,
            Arch::Mlp => 1,
        }
    }

    pub fn from_id(id: u8) -> Option<Self> {
        match id {
            0 => Some(Arch::Transformer),
            1 => Some(Arch::Mlp),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Arch::Transformer => "transformer",
            Arch::Mlp => "mlp",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "transformer" => Some(Arch::Transformer),
            "mlp" => Some(Arch::Mlp),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetConfig {
    pub arch: Arch,
    pub n_emb: usize,
    pub n_head: usize,
    pub n_layer: usize,
    pub dim_m: usize,
    pub obs_token_dim: usize,
    /// Width of the design token; 0 when the task has none.
    pub design_token_dim: usize,
    pub rope_base: f64,
    /// Multiplier applied to `t` before the sinusoidal features.
    pub time_scale: f64,
    pub mlp_hidden: usize,
    pub mlp_layers: usize,
    /// Observation count the MLP variant is built for.
    pub mlp_n_obs: usize,
}

pub const RMS_EPS: f64 = 1e-6;

impl NetConfig {
    /// Transformer defaults per task: 32-wide, 4 heads, 6 blocks for SEIR
    /// and 4 otherwise.
    pub fn transformer(task: TaskKind) -> Self {
        Self {
            arch: Arch::Transformer,
            n_emb: 32,
            n_head: 4,
            n_layer: if task == TaskKind::Seir { 6 } else { 4 },
            dim_m: task.dim_m(),
            obs_token_dim: task.obs_token_dim(),
            design_token_dim: task.design_token_dim().unwrap_or(0),
            rope_base: 10_000.0,
            time_scale: 100.0,
            mlp_hidden: 256,
            mlp_layers: 3,
            mlp_n_obs: 4,
        }
    }

    pub fn mlp(task: TaskKind, n_obs: usize) -> Self {
        Self {
            arch: Arch::Mlp,
            mlp_n_obs: n_obs,
            ..Self::transformer(task)
        }
    }

    pub fn head_dim(&self) -> usize {
        self.n_emb / self.n_head.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_emb == 0 || self.dim_m == 0 || self.obs_token_dim == 0 {
            return Err(invalid("n_emb, dim_m and obs_token_dim must be positive"));
        }
        match self.arch {
            Arch::Transformer => {
                if self.n_head == 0 || self.n_emb % self.n_head != 0 {
                    return Err(invalid(format!(
                        "n_emb {} is not divisible by n_head {}",
                        self.n_emb, self.n_head
                    )));
                }
                if self.head_dim() % 2 != 0 {
                    return Err(invalid(format!(
                        "head dimension {} must be even for rotary embeddings",
                        self.head_dim()
                    )));
                }
            }
            Arch::Mlp => {
                if self.mlp_hidden == 0 || self.mlp_layers == 0 || self.mlp_n_obs == 0 {
                    return Err(invalid("MLP width, depth and observation count must be positive"));
                }
            }
        }
        if self.n_emb % 2 != 0 {
            return Err(invalid("n_emb must be even (sine/cosine halves)"));
        }
        Ok(())
    }

    /// Names and shapes of all parameters, in storage order.
    pub fn parameter_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let e = self.n_emb;
        let mut out: Vec<(String, Vec<usize>)> = vec![
            ("time.w1".into(), vec![e, e]),
            ("time.b1".into(), vec![e]),
            ("time.w2".into(), vec![e, e]),
            ("time.b2".into(), vec![e]),
        ];
        match self.arch {
            Arch::Transformer => {
                out.push(("embed.obs.w".into(), vec![self.obs_token_dim, e]));
                out.push(("embed.obs.b".into(), vec![e]));
                if self.design_token_dim > 0 {
                    out.push(("embed.design.w".into(), vec![self.design_token_dim, e]));
                    out.push(("embed.design.b".into(), vec![e]));
                }
                out.push(("embed.state.w".into(), vec![self.dim_m, e]));
                out.push(("embed.state.b".into(), vec![e]));
                for l in 0..self.n_layer {
                    let p = |s: &str| format!("block{l}.{s}");
                    out.push((p("norm1"), vec![e]));
                    out.push((p("wq"), vec![e, e]));
                    out.push((p("wk"), vec![e, e]));
                    out.push((p("wv"), vec![e, e]));
                    out.push((p("wo"), vec![e, e]));
                    out.push((p("norm2"), vec![e]));
                    out.push((p("mlp.w1"), vec![e, 4 * e]));
                    out.push((p("mlp.b1"), vec![4 * e]));
                    out.push((p("mlp.w2"), vec![4 * e, e]));
                    out.push((p("mlp.b2"), vec![e]));
                }
                out.push(("final_norm".into(), vec![e]));
                out.push(("head.w".into(), vec![e, self.dim_m]));
                out.push(("head.b".into(), vec![self.dim_m]));
            }
            Arch::Mlp => {
                let mut width = self.dim_m
                    + e
                    + self.mlp_n_obs * self.obs_token_dim
                    + self.design_token_dim;
                for l in 0..self.mlp_layers {
                    out.push((format!("mlp{l}.w"), vec![width, self.mlp_hidden]));
                    out.push((format!("mlp{l}.b"), vec![self.mlp_hidden]));
                    width = self.mlp_hidden;
                }
                out.push(("head.w".into(), vec![width, self.dim_m]));
                out.push(("head.b".into(), vec![self.dim_m]));
            }
        }
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.parameter_shapes()
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TokenKind {
    Observation,
    Design,
    State,
}

/// Token order for `n_obs` observations: observations first, then the
/// design token if any, then the state token. Positions are the indices.
pub fn token_layout(config: &NetConfig, n_obs: usize) -> Result<Vec<TokenKind>> {
    if n_obs == 0 {
        return Err(invalid("at least one observation token is required"));
    }
    let mut kinds = vec![TokenKind::Observation; n_obs];
    if config.design_token_dim > 0 {
        kinds.push(TokenKind::Design);
    }
    kinds.push(TokenKind::State);
    Ok(kinds)
}

/// Sinusoidal features of `t`: `sin(s·t·ω_i)` then `cos(s·t·ω_i)` with
/// `ω_i = 10⁴^(−i/half)` and `s = time_scale`.
pub fn timestep_features(t: f64, dim: usize, time_scale: f64) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&t) {
        return Err(invalid(format!("time {t} outside [0, 1]")));
    }
    let half = dim / 2;
    let mut out = vec![0.0; 2 * half];
    for i in 0..half {
        let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
        let arg = time_scale * t * freq;
        out[i] = arg.sin();
        out[half + i] = arg.cos();
    }
    Ok(out)
}

/// A batch of network inputs sharing one observation count.
#[derive(Clone, Debug)]
pub struct NetInput {
    pub batch: usize,
    pub n_obs: usize,
    /// `batch × dim_m`
    pub m_t: Vec<f64>,
    /// `batch`
    pub t: Vec<f64>,
    /// `batch × n_obs × obs_token_dim`
    pub obs: Vec<f64>,
    /// `batch × design_token_dim`, empty when there is no design token.
    pub design: Vec<f64>,
}

impl NetInput {
    pub fn check(&self, c: &NetConfig) -> Result<()> {
        let b = self.batch;
        let ok = b > 0
            && self.n_obs > 0
            && self.m_t.len() == b * c.dim_m
            && self.t.len() == b
            && self.obs.len() == b * self.n_obs * c.obs_token_dim
            && self.design.len() == b * c.design_token_dim;
        if !ok {
            return Err(invalid(format!(
                "network input does not match the configuration (batch {b}, n_obs {})",
                self.n_obs
            )));
        }
        if c.arch == Arch::Mlp && self.n_obs != c.mlp_n_obs {
            return Err(invalid(format!(
                "MLP velocity field expects {} observations, got {}",
                c.mlp_n_obs, self.n_obs
            )));
        }
        Ok(())
    }
}

fn constant<F: Real>(tape: &mut Tape<F>, shape: &[usize], data: &[f64]) -> Result<Var> {
    Ok(tape.constant(Tensor::from_f64(shape, data)?))
}

fn linear<F: Real>(tape: &mut Tape<F>, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    Ok(tape.add_bias(y, b)?)
}

/// Records the velocity for `input` on `tape`; `params` are the parameter
/// leaves in [`NetConfig::parameter_shapes`] order. Returns `[batch, dim_m]`.
pub fn forward<F: Real>(
    config: &NetConfig,
    tape: &mut Tape<F>,
    params: &[Var],
    input: &NetInput,
) -> Result<Var> {
    input.check(config)?;
    if params.len() != config.parameter_shapes().len() {
        return Err(invalid(format!(
            "expected {} parameter tensors, got {}",
            config.parameter_shapes().len(),
            params.len()
        )));
    }
    let mut p = params.iter().copied();
    let mut next = || p.next().expect("length checked");
    let b = input.batch;
    let e = config.n_emb;

    let mut feats = Vec::with_capacity(b * e);
    for &t in &input.t {
        feats.extend(timestep_features(t, e, config.time_scale)?);
    }
    let feats = constant(tape, &[b, e], &feats)?;
    let (w1, b1, w2, b2) = (next(), next(), next(), next());
    let h = linear(tape, feats, w1, b1)?;
    let h = tape.relu_squared(h);
    let temb = linear(tape, h, w2, b2)?;

    match config.arch {
        Arch::Transformer => {
            let n = input.n_obs;
            let obs = constant(tape, &[b, n, config.obs_token_dim], &input.obs)?;
            let (w, bias) = (next(), next());
            let mut parts = vec![linear(tape, obs, w, bias)?];
            if config.design_token_dim > 0 {
                let des = constant(tape, &[b, 1, config.design_token_dim], &input.design)?;
                let (w, bias) = (next(), next());
                parts.push(linear(tape, des, w, bias)?);
            }
            let state = constant(tape, &[b, 1, config.dim_m], &input.m_t)?;
            let (w, bias) = (next(), next());
            parts.push(linear(tape, state, w, bias)?);
            let tokens = tape.concat_tokens(&parts)?;
            let mut x = tape.add_token_broadcast(tokens, temb)?;

            let t_len = tape.shape(x)[1];
            let positions: Vec<usize> = (0..t_len).collect();
            let heads = config.n_head;
            let scale = F::from_f64_lossy(1.0 / (config.head_dim() as f64).sqrt());
            let eps = F::from_f64_lossy(RMS_EPS);
            for _ in 0..config.n_layer {
                let (g1, wq, wk, wv, wo) = (next(), next(), next(), next(), next());
                let h = tape.rms_norm(x, g1, eps)?;
                let q = tape.matmul(h, wq)?;
                let k = tape.matmul(h, wk)?;
                let v = tape.matmul(h, wv)?;
                let q = tape.split_heads(q, heads)?;
                let k = tape.split_heads(k, heads)?;
                let v = tape.split_heads(v, heads)?;
                let q = tape.rope(q, &positions, config.rope_base)?;
                let k = tape.rope(k, &positions, config.rope_base)?;
                let scores = tape.batch_matmul(q, k, true)?;
                let scores = tape.scale(scores, scale);
                let attn = tape.softmax(scores);
                let ctx = tape.batch_matmul(attn, v, false)?;
                let ctx = tape.merge_heads(ctx, heads)?;
                let out = tape.matmul(ctx, wo)?;
                x = tape.add(x, out)?;

                let (g2, mw1, mb1, mw2, mb2) = (next(), next(), next(), next(), next());
                let h = tape.rms_norm(x, g2, eps)?;
                let h = linear(tape, h, mw1, mb1)?;
                let h = tape.relu_squared(h);
                let h = linear(tape, h, mw2, mb2)?;
                x = tape.add(x, h)?;
            }
            let gf = next();
            let x = tape.rms_norm(x, gf, eps)?;
            let s = tape.select_token(x, t_len - 1)?;
            let (w, bias) = (next(), next());
            linear(tape, s, w, bias)
        }
        Arch::Mlp => {
            let m_t = constant(tape, &[b, config.dim_m], &input.m_t)?;
            let obs = constant(
                tape,
                &[b, input.n_obs * config.obs_token_dim],
                &input.obs,
            )?;
            let mut parts = vec![m_t, temb, obs];
            if config.design_token_dim > 0 {
                parts.push(constant(tape, &[b, config.design_token_dim], &input.design)?);
            }
            let mut h = tape.concat_last(&parts)?;
            for _ in 0..config.mlp_layers {
                let (w, bias) = (next(), next());
                h = linear(tape, h, w, bias)?;
                h = tape.relu_squared(h);
            }
            let (w, bias) = (next(), next());
            linear(tape, h, w, bias)
        }
    }
}

/// Parameters of a velocity field together with its configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct VelocityNet {
    pub config: NetConfig,
    pub names: Vec<String>,
    pub params: Vec<Tensor<f32>>,
}

impl VelocityNet {
    /// Weights `U(±1/√fan_in)`, biases zero, normalization gains one.
    pub fn init<R: Rng + ?Sized>(config: NetConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut names = Vec::new();
        let mut params = Vec::new();
        for (name, shape) in config.parameter_shapes() {
            let numel: usize = shape.iter().product();
            let data: Vec<f32> = if name.contains("norm") {
                vec![1.0; numel]
            } else if shape.len() == 1 {
                vec![0.0; numel]
            } else {
                let bound = 1.0 / (shape[0] as f64).sqrt();
                (0..numel)
                    .map(|_| rng.gen_range(-bound..bound) as f32)
                    .collect()
            };
            params.push(Tensor::new(&shape, data)?);
            names.push(name);
        }
        Ok(Self {
            config,
            names,
            params,
        })
    }

    /// Build from stored tensors, checking names and shapes.
    pub fn from_parts(config: NetConfig, named: Vec<(String, Tensor<f32>)>) -> Result<Self> {
        config.validate()?;
        let expected = config.parameter_shapes();
        if expected.len() != named.len() {
            return Err(invalid(format!(
                "expected {} parameter tensors, got {}",
                expected.len(),
                named.len()
            )));
        }
        for ((name, shape), (got_name, tensor)) in expected.iter().zip(&named) {
            if name != got_name || shape.as_slice() != tensor.shape() {
                return Err(invalid(format!(
                    "parameter {got_name} {:?} does not match expected {name} {shape:?}",
                    tensor.shape()
                )));
            }
        }
        let (names, params) = named.into_iter().unzip();
        Ok(Self {
            config,
            names,
            params,
        })
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(Tensor::numel).sum()
    }

    /// Velocity for every row of `input`, `batch × dim_m`.
    pub fn predict(&self, input: &NetInput) -> Result<Vec<f32>> {
        let mut tape = Tape::<f32>::new();
        let vars: Vec<Var> = self.params.iter().map(|p| tape.constant(p.clone())).collect();
        let out = forward(&self.config, &mut tape, &vars, input)?;
        Ok(tape.value(out).data().to_vec())
    }
}
