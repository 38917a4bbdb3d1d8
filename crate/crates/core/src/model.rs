//! Conditional velocity predictor `u(x_r, r, t | prompt)`.
//!
//! Tokens are antenna positions; each token carries the (phase, amplitude)
//! pair of the angular-domain latent. A stack of adaLN-modulated transformer
//! blocks with rotary self-attention maps them to a velocity of the same
//! shape. Conditioning is the sum of an interval embedding of `(r, t)` and a
//! masked set encoding of the RSRP prompt.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{Scalar, Tape, Tensor, Var};
use crate::probing::Prompt;

/// Number of latent channels: phase row and amplitude row.
pub const N_CHANNELS: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelConfig {
    pub embed_dim: usize,
    pub n_blocks: usize,
    pub n_heads: usize,
    pub ffn_multiplier: f64,
    pub n_channels: usize,
    pub seq_len: usize,
    pub cond_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { embed_dim: 128, n_blocks: 3, n_heads: 4, ffn_multiplier: 4.0, n_channels: 2, seq_len: 32, cond_dim: 128 }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_channels != N_CHANNELS {
            return Err(Error::config(format!("n_channels must be {N_CHANNELS}")));
        }
        if self.n_heads == 0 || self.embed_dim % self.n_heads != 0 {
            return Err(Error::config("embed_dim must be divisible by n_heads"));
        }
        if (self.embed_dim / self.n_heads) % 2 != 0 {
            return Err(Error::config("head dimension must be even for rotary embedding"));
        }
        if self.n_blocks == 0 || self.seq_len < 2 || self.cond_dim == 0 || self.cond_dim % 2 != 0 {
            return Err(Error::config("n_blocks >= 1, seq_len >= 2 and an even cond_dim are required"));
        }
        if !(self.ffn_multiplier > 0.0) {
            return Err(Error::config("ffn_multiplier must be positive"));
        }
        Ok(())
    }

    pub fn ffn_dim(&self) -> usize {
        ((self.embed_dim as f64 * self.ffn_multiplier).round() as usize).max(1)
    }
}

/// Standardization of prompt dB features, fitted on the training reports.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PromptNorm {
    pub mean: f64,
    pub std: f64,
}

impl Default for PromptNorm {
    fn default() -> Self {
        Self { mean: 0.0, std: 1.0 }
    }
}

impl PromptNorm {
    pub fn db(power: f64) -> f64 {
        10.0 * (power + 1e-12).log10()
    }

    pub fn fit<'a>(reports: impl IntoIterator<Item = &'a [f64]>) -> Self {
        let mut n = 0usize;
        let (mut s, mut s2) = (0.0, 0.0);
        for r in reports {
            for &v in r {
                let d = Self::db(v);
                s += d;
                s2 += d * d;
                n += 1;
            }
        }
        if n == 0 {
            return Self::default();
        }
        let mean = s / n as f64;
        let var = (s2 / n as f64 - mean * mean).max(0.0);
        Self { mean, std: var.sqrt().max(1e-6) }
    }

    pub fn feature(&self, power: f64) -> f64 {
        (Self::db(power) - self.mean) / self.std
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Init {
    Xavier,
    Zero,
}

fn param_specs(cfg: &ModelConfig) -> Vec<(String, usize, usize, Init)> {
    let d = cfg.embed_dim;
    let cd = cfg.cond_dim;
    let f = cfg.ffn_dim();
    let mut s: Vec<(String, usize, usize, Init)> = Vec::new();
    let mut lin = |name: &str, i: usize, o: usize, init: Init| {
        s.push((format!("{name}.weight"), i, o, init));
        s.push((format!("{name}.bias"), 1, o, Init::Zero));
    };
    lin("input", cfg.n_channels, d, Init::Xavier);
    lin("time.fc1", 2 * d, d, Init::Xavier);
    lin("time.fc2", d, d, Init::Xavier);
    lin("cond.value", 1, cd, Init::Xavier);
    lin("cond.pos1", cd, cd, Init::Xavier);
    lin("cond.pos2", cd, cd, Init::Xavier);
    lin("cond.out1", cd, d, Init::Xavier);
    lin("cond.out2", d, d, Init::Xavier);
    for b in 0..cfg.n_blocks {
        lin(&format!("blocks.{b}.adaln"), d, 6 * d, Init::Zero);
        lin(&format!("blocks.{b}.attn.qkv"), d, 3 * d, Init::Xavier);
        lin(&format!("blocks.{b}.attn.out"), d, d, Init::Xavier);
        lin(&format!("blocks.{b}.ffn.fc1"), d, f, Init::Xavier);
        lin(&format!("blocks.{b}.ffn.fc2"), f, d, Init::Xavier);
    }
    lin("final.adaln", d, 2 * d, Init::Zero);
    lin("final.head", d, cfg.n_channels, Init::Zero);
    s
}

/// Named parameter tensors of the velocity predictor.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParameters<T> {
    pub config: ModelConfig,
    pub names: Vec<String>,
    pub tensors: Vec<Tensor<T>>,
}

impl<T: Scalar> ModelParameters<T> {
    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.index_of(name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.index_of(name).map(move |i| &mut self.tensors[i])
    }

    pub fn n_values(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ModelParameters<U> {
        ModelParameters { config: self.config, names: self.names.clone(), tensors: self.tensors.iter().map(|t| t.cast()).collect() }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.data.iter().all(|v| v.is_finite()))
    }

    /// Checks names and shapes against the layout implied by `config`.
    pub fn check_layout(&self) -> Result<()> {
        let specs = param_specs(&self.config);
        if specs.len() != self.tensors.len() || self.names.len() != self.tensors.len() {
            return Err(Error::format("parameter count does not match model config"));
        }
        for ((name, r, c, _), (n, t)) in specs.iter().zip(self.names.iter().zip(&self.tensors)) {
            if name != n || t.rows != *r || t.cols != *c {
                return Err(Error::format(format!("parameter {n} does not match expected {name} [{r}x{c}]")));
            }
        }
        Ok(())
    }
}

/// Xavier-uniform weights; adaLN projections, the output head and all biases start at zero.
pub fn init_parameters<T: Scalar>(config: &ModelConfig, seed: u64) -> Result<ModelParameters<T>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut names = Vec::new();
    let mut tensors = Vec::new();
    for (name, r, c, init) in param_specs(config) {
        let t = match init {
            Init::Zero => Tensor::zeros(r, c),
            Init::Xavier => {
                let limit = (6.0 / (r + c) as f64).sqrt();
                Tensor::from_vec(r, c, (0..r * c).map(|_| T::lit(rng.random_range(-limit..limit))).collect())
            }
        };
        names.push(name);
        tensors.push(t);
    }
    Ok(ModelParameters { config: *config, names, tensors })
}

/// Parameters bound to a tape.
pub struct ParamVars {
    vars: Vec<Var>,
    index: HashMap<String, usize>,
}

impl ParamVars {
    pub fn bind<T: Scalar>(tape: &mut Tape<T>, params: &ModelParameters<T>, trainable: bool) -> Self {
        let vars = params
            .tensors
            .iter()
            .map(|t| if trainable { tape.param(t.clone()) } else { tape.constant(t.clone()) })
            .collect();
        let index = params.names.iter().enumerate().map(|(i, n)| (n.clone(), i)).collect();
        Self { vars, index }
    }

    pub fn var(&self, name: &str) -> Var {
        self.vars[self.index[name]]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    fn linear<T: Scalar>(&self, tape: &mut Tape<T>, x: Var, name: &str) -> Var {
        let w = self.var(&format!("{name}.weight"));
        let b = self.var(&format!("{name}.bias"));
        tape.linear(x, w, Some(b))
    }
}

/// Batch of `(C=2, N)` latents, row-major `(batch, channel, position)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentState {
    pub batch: usize,
    pub seq: usize,
    pub data: Vec<f64>,
}

impl LatentState {
    pub fn zeros(batch: usize, seq: usize) -> Self {
        Self { batch, seq, data: vec![0.0; batch * N_CHANNELS * seq] }
    }

    pub fn from_samples(samples: &[Vec<f64>], seq: usize) -> Result<Self> {
        let mut data = Vec::with_capacity(samples.len() * N_CHANNELS * seq);
        for s in samples {
            if s.len() != N_CHANNELS * seq {
                return Err(Error::dim(format!("latent sample has {} values, expected {}", s.len(), N_CHANNELS * seq)));
            }
            data.extend_from_slice(s);
        }
        Ok(Self { batch: samples.len(), seq, data })
    }

    /// Standard-normal draws.
    pub fn gaussian(batch: usize, seq: usize, rng: &mut impl Rng) -> Self {
        use rand_distr::{Distribution, StandardNormal};
        let data = (0..batch * N_CHANNELS * seq).map(|_| StandardNormal.sample(rng)).collect();
        Self { batch, seq, data }
    }

    pub fn sample(&self, b: usize) -> &[f64] {
        let w = N_CHANNELS * self.seq;
        &self.data[b * w..(b + 1) * w]
    }

    pub fn sample_mut(&mut self, b: usize) -> &mut [f64] {
        let w = N_CHANNELS * self.seq;
        &mut self.data[b * w..(b + 1) * w]
    }

    pub fn select(&self, rows: &[usize]) -> Self {
        let mut data = Vec::with_capacity(rows.len() * N_CHANNELS * self.seq);
        for &r in rows {
            data.extend_from_slice(self.sample(r));
        }
        Self { batch: rows.len(), seq: self.seq, data }
    }

    /// Token-major layout `(batch * N) x C`.
    pub fn to_tokens<T: Scalar>(&self) -> Tensor<T> {
        let n = self.seq;
        let mut out = Tensor::zeros(self.batch * n, N_CHANNELS);
        for b in 0..self.batch {
            let s = self.sample(b);
            for i in 0..n {
                for c in 0..N_CHANNELS {
                    out.data[(b * n + i) * N_CHANNELS + c] = T::lit(s[c * n + i]);
                }
            }
        }
        out
    }

    pub fn from_tokens<T: Scalar>(tokens: &Tensor<T>, batch: usize, seq: usize) -> Self {
        assert_eq!(tokens.rows, batch * seq);
        let mut out = Self::zeros(batch, seq);
        for b in 0..batch {
            for i in 0..seq {
                for c in 0..N_CHANNELS {
                    out.data[b * N_CHANNELS * seq + c * seq + i] = tokens.data[(b * seq + i) * N_CHANNELS + c].to_f64().unwrap();
                }
            }
        }
        out
    }
}

/// Encoder inputs for a batch of prompts: one normalized feature and one mask
/// weight per (sample, probing index).
#[derive(Debug, Clone, PartialEq)]
pub struct Condition<T> {
    pub features: Tensor<T>,
    pub weights: Vec<T>,
    pub q_max: usize,
}

impl<T: Scalar> Condition<T> {
    pub fn from_prompts(prompts: &[&Prompt], norm: &PromptNorm) -> Result<Self> {
        let q_max = prompts.first().map(|p| p.q_max()).ok_or_else(|| Error::dim("empty prompt batch"))?;
        let mut features = Tensor::zeros(prompts.len() * q_max, 1);
        let mut weights = vec![T::zero(); prompts.len() * q_max];
        for (b, p) in prompts.iter().enumerate() {
            if p.q_max() != q_max {
                return Err(Error::dim("prompts of different lengths in one batch"));
            }
            if p.q_active() == 0 {
                return Err(Error::EmptyMask);
            }
            for (i, (&v, &m)) in p.values().iter().zip(p.mask()).enumerate() {
                if m {
                    features.data[b * q_max + i] = T::lit(norm.feature(v));
                    weights[b * q_max + i] = T::one();
                }
            }
        }
        Ok(Self { features, weights, q_max })
    }

    /// Same prompt repeated `n` times.
    pub fn repeat(&self, n: usize) -> Self {
        let mut features = Tensor::zeros(self.features.rows * n, 1);
        let mut weights = Vec::with_capacity(self.weights.len() * n);
        for k in 0..n {
            features.data[k * self.features.rows..(k + 1) * self.features.rows].copy_from_slice(&self.features.data);
            weights.extend_from_slice(&self.weights);
        }
        Self { features, weights, q_max: self.q_max }
    }

    /// Sub-batch of the given sample rows.
    pub fn select(&self, rows: &[usize]) -> Self {
        let q = self.q_max;
        let mut features = Tensor::zeros(rows.len() * q, 1);
        let mut weights = Vec::with_capacity(rows.len() * q);
        for (k, &r) in rows.iter().enumerate() {
            features.data[k * q..(k + 1) * q].copy_from_slice(&self.features.data[r * q..(r + 1) * q]);
            weights.extend_from_slice(&self.weights[r * q..(r + 1) * q]);
        }
        Self { features, weights, q_max: q }
    }

    pub fn batch(&self) -> usize {
        self.weights.len() / self.q_max
    }
}

/// `[cos(w_k * s), sin(w_k * s)]` with `w_k = 10000^(-k/half)`.
pub fn sinusoidal(value: f64, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for k in 0..half {
        let freq = (-(10_000f64.ln()) * k as f64 / half as f64).exp();
        out[k] = (value * freq).cos();
        out[half + k] = (value * freq).sin();
    }
    out
}

/// Interval embedding input: sinusoidal codes of `1000 r` and `1000 t`, concatenated.
fn interval_features<T: Scalar>(r: &[f64], t: &[f64], dim: usize) -> Tensor<T> {
    let mut out = Tensor::zeros(r.len(), 2 * dim);
    for (b, (&rv, &tv)) in r.iter().zip(t).enumerate() {
        let row = &mut out.data[b * 2 * dim..(b + 1) * 2 * dim];
        for (o, v) in row.iter_mut().zip(sinusoidal(1000.0 * rv, dim).into_iter().chain(sinusoidal(1000.0 * tv, dim))) {
            *o = T::lit(v);
        }
    }
    out
}

fn index_table<T: Scalar>(q_max: usize, dim: usize) -> Tensor<T> {
    let mut out = Tensor::zeros(q_max, dim);
    for i in 0..q_max {
        for (o, v) in out.data[i * dim..(i + 1) * dim].iter_mut().zip(sinusoidal(i as f64, dim)) {
            *o = T::lit(v);
        }
    }
    out
}

/// Fourier basis over the token axis with frequencies spread evenly up to
/// the Nyquist rate of `seq` bins, so sharp per-bin patterns are expressible.
fn token_table<T: Scalar>(seq: usize, dim: usize) -> Tensor<T> {
    let half = dim / 2;
    let mut out = Tensor::zeros(seq, dim);
    for i in 0..seq {
        for j in 0..half {
            let cycles = j as f64 * (seq as f64 / 2.0) / half as f64;
            let a = 2.0 * std::f64::consts::PI * cycles * i as f64 / seq as f64;
            out.data[i * dim + j] = T::lit(a.cos());
            out.data[i * dim + half + j] = T::lit(a.sin());
        }
    }
    out
}

/// `e_time(r, t)`: `(B x D)`.
pub fn time_embed<T: Scalar>(tape: &mut Tape<T>, p: &ParamVars, cfg: &ModelConfig, r: &[f64], t: &[f64]) -> Var {
    let x = tape.constant(interval_features(r, t, cfg.embed_dim));
    let h = p.linear(tape, x, "time.fc1");
    let h = tape.silu(h);
    p.linear(tape, h, "time.fc2")
}

/// Beam index-aware masked condition encoder: `(B x D)`.
pub fn cond_encode<T: Scalar>(tape: &mut Tape<T>, p: &ParamVars, cfg: &ModelConfig, cond: &Condition<T>) -> Var {
    let x = tape.constant(cond.features.clone());
    let v = p.linear(tape, x, "cond.value");
    let v = tape.add_const_rows(v, &index_table(cond.q_max, cfg.cond_dim));
    let e = p.linear(tape, v, "cond.pos1");
    let e = tape.silu(e);
    let e = p.linear(tape, e, "cond.pos2");
    let pooled = tape.masked_mean(e, cond.weights.clone(), cond.q_max);
    let o = p.linear(tape, pooled, "cond.out1");
    let o = tape.silu(o);
    p.linear(tape, o, "cond.out2")
}

/// One adaLN transformer block over `(B * N) x D` tokens.
pub(crate) fn block<T: Scalar>(tape: &mut Tape<T>, p: &ParamVars, cfg: &ModelConfig, idx: usize, x: Var, c: Var, batch: usize) -> Var {
    let d = cfg.embed_dim;
    let n = cfg.seq_len;
    let m = p.linear(tape, c, &format!("blocks.{idx}.adaln"));
    let shift1 = tape.slice_cols(m, 0, d);
    let scale1 = tape.slice_cols(m, d, d);
    let gate1 = tape.slice_cols(m, 2 * d, d);
    let shift2 = tape.slice_cols(m, 3 * d, d);
    let scale2 = tape.slice_cols(m, 4 * d, d);
    let gate2 = tape.slice_cols(m, 5 * d, d);

    let h = tape.layer_norm(x);
    let h = tape.modulate(h, shift1, scale1, n);
    let qkv = p.linear(tape, h, &format!("blocks.{idx}.attn.qkv"));
    let a = tape.rope_attention(qkv, batch, n, cfg.n_heads);
    let a = p.linear(tape, a, &format!("blocks.{idx}.attn.out"));
    let y = tape.gated_residual(x, gate1, a, n);

    let h = tape.layer_norm(y);
    let h = tape.modulate(h, shift2, scale2, n);
    let f = p.linear(tape, h, &format!("blocks.{idx}.ffn.fc1"));
    let f = tape.gelu(f);
    let f = p.linear(tape, f, &format!("blocks.{idx}.ffn.fc2"));
    tape.gated_residual(y, gate2, f, n)
}

/// Velocity prediction in token layout `(B * N) x C`.
pub fn forward_tokens<T: Scalar>(
    tape: &mut Tape<T>,
    p: &ParamVars,
    cfg: &ModelConfig,
    x: &LatentState,
    r: &[f64],
    t: &[f64],
    cond: &Condition<T>,
) -> Result<Var> {
    let batch = x.batch;
    if x.seq != cfg.seq_len {
        return Err(Error::dim(format!("latent length {} but model expects {}", x.seq, cfg.seq_len)));
    }
    if r.len() != batch || t.len() != batch || cond.batch() != batch {
        return Err(Error::dim("batch sizes of latent, times and prompts differ"));
    }
    let tokens = tape.constant(x.to_tokens());
    let h = p.linear(tape, tokens, "input");
    // RoPE alone is translation-equivariant; tokens also need their absolute beam index
    let mut h = tape.add_const_rows(h, &token_table(cfg.seq_len, cfg.embed_dim));
    let et = time_embed(tape, p, cfg, r, t);
    let ec = cond_encode(tape, p, cfg, cond);
    let total = tape.add(et, ec);
    let c = tape.silu(total);
    for b in 0..cfg.n_blocks {
        h = block(tape, p, cfg, b, h, c, batch);
    }
    let m = p.linear(tape, c, "final.adaln");
    let shift = tape.slice_cols(m, 0, cfg.embed_dim);
    let scale = tape.slice_cols(m, cfg.embed_dim, cfg.embed_dim);
    let h = tape.layer_norm(h);
    let h = tape.modulate(h, shift, scale, cfg.seq_len);
    Ok(p.linear(tape, h, "final.head"))
}

/// Gradient-free velocity evaluation.
pub fn predict<T: Scalar>(params: &ModelParameters<T>, x: &LatentState, r: &[f64], t: &[f64], cond: &Condition<T>) -> Result<LatentState> {
    let mut tape = Tape::new();
    let p = ParamVars::bind(&mut tape, params, false);
    let out = forward_tokens(&mut tape, &p, &params.config, x, r, t, cond)?;
    Ok(LatentState::from_tokens(tape.value(out), x.batch, x.seq))
}
