//! Two-stage training of the velocity predictor.
//!
//! Stage I regresses the instantaneous flow-matching velocity `X1 - X0` at
//! `(t, t)`. Stage II continues on the same weights and learns interval
//! averages `u(x_r, r, t)` from the split-consistency target
//! `(1 - k) u(x_r, r, s) + k u(x_s, s, t)`, evaluated without gradient. A
//! fraction `p` of every Stage-II batch sits on the diagonal `r = t`; those
//! entries are anchored to the flow-matching target instead, since the split
//! target degenerates to the prediction itself there.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::model::{forward_tokens, init_parameters, predict, Condition, LatentState, ModelConfig, ModelParameters, ParamVars, PromptNorm};
use crate::nn::{Scalar, Tape, Tensor};
use crate::probing::{dft_codebook, measure_rsrp, stochastic_batch_masks, Prompt};
use crate::signal::ArrayGeometry;
use crate::sitegen::Dataset;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub max_epochs: usize,
    pub stage1_epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub p: f64,
    pub p_full: f64,
    pub budget_set: Vec<usize>,
    pub ema_decay: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            max_epochs: 80,
            stage1_epochs: 40,
            batch_size: 32,
            learning_rate: 2e-4,
            weight_decay: 0.1,
            p: 0.7,
            p_full: 0.8,
            budget_set: vec![5, 8, 11, 16, 32],
            ema_decay: 0.995,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.stage1_epochs > 0 && self.stage1_epochs < self.max_epochs) {
            return Err(Error::config("need 0 < stage1_epochs < max_epochs"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        for (name, v) in [("p", self.p), ("p_full", self.p_full), ("ema_decay", self.ema_decay)] {
            if !(v > 0.0 && v <= 1.0) {
                return Err(Error::config(format!("{name} must lie in (0, 1]")));
            }
        }
        if !(self.learning_rate > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::config("learning_rate must be positive and weight_decay nonnegative"));
        }
        if self.budget_set.is_empty() {
            return Err(Error::config("budget_set is empty"));
        }
        Ok(())
    }
}

/// AdamW hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamW {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self { lr, weight_decay, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First/second moments per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<T> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub step: u64,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(params: &[Tensor<T>]) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.rows, p.cols)).collect();
        Self { m: zeros(), v: zeros(), step: 0 }
    }
}

/// Decoupled weight decay followed by a bias-corrected Adam update.
pub fn adamw_step<T: Scalar>(params: &mut [Tensor<T>], grads: &[Tensor<T>], state: &mut OptimizerState<T>, hp: &AdamW) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::dim("parameter, gradient and moment lists differ in length"));
    }
    state.step += 1;
    let step = state.step as i32;
    let bc1 = 1.0 - hp.beta1.powi(step);
    let bc2 = 1.0 - hp.beta2.powi(step);
    let (b1, b2) = (T::lit(hp.beta1), T::lit(hp.beta2));
    let (ob1, ob2) = (T::lit(1.0 - hp.beta1), T::lit(1.0 - hp.beta2));
    let decay = T::lit(1.0 - hp.lr * hp.weight_decay);
    let step_size = T::lit(hp.lr / bc1);
    let inv_sqrt_bc2 = T::lit(1.0 / bc2.sqrt());
    let eps = T::lit(hp.eps);
    for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        if p.data.len() != g.data.len() {
            return Err(Error::dim("gradient shape differs from parameter"));
        }
        for (((pv, &gv), mv), vv) in p.data.iter_mut().zip(&g.data).zip(&mut m.data).zip(&mut v.data) {
            *mv = b1 * *mv + ob1 * gv;
            *vv = b2 * *vv + ob2 * gv * gv;
            *pv = *pv * decay - step_size * *mv / (vv.sqrt() * inv_sqrt_bc2 + eps);
        }
    }
    Ok(())
}

/// `ema <- decay * ema + (1 - decay) * params`.
pub fn ema_update<T: Scalar>(ema: &mut [Tensor<T>], params: &[Tensor<T>], decay: f64) {
    let d = T::lit(decay);
    let od = T::lit(1.0 - decay);
    for (e, p) in ema.iter_mut().zip(params) {
        for (ev, &pv) in e.data.iter_mut().zip(&p.data) {
            *ev = d * *ev + od * pv;
        }
    }
}

/// `X_t = (1 - t) X0 + t X1`, one time per sample.
pub fn interpolate(x0: &LatentState, x1: &LatentState, t: &[f64]) -> LatentState {
    let mut out = x0.clone();
    for (b, &tb) in t.iter().enumerate() {
        for (o, &a) in out.sample_mut(b).iter_mut().zip(x1.sample(b)) {
            *o = (1.0 - tb) * *o + tb * a;
        }
    }
    out
}

/// `a + scale_b * v` per sample.
fn axpy(a: &LatentState, v: &LatentState, scale: &[f64]) -> LatentState {
    let mut out = a.clone();
    for (b, &s) in scale.iter().enumerate() {
        for (o, &d) in out.sample_mut(b).iter_mut().zip(v.sample(b)) {
            *o += s * d;
        }
    }
    out
}

fn difference(x1: &LatentState, x0: &LatentState) -> LatentState {
    let data = x1.data.iter().zip(&x0.data).map(|(a, b)| a - b).collect();
    LatentState { batch: x1.batch, seq: x1.seq, data }
}

/// Random quantities of one Stage-I batch.
#[derive(Debug, Clone, PartialEq)]
pub struct Stage1Draw {
    pub x0: LatentState,
    pub t: Vec<f64>,
}

impl Stage1Draw {
    pub fn sample(batch: usize, seq: usize, rng: &mut impl Rng) -> Self {
        let x0 = LatentState::gaussian(batch, seq, rng);
        let t = (0..batch).map(|_| rng.random::<f64>()).collect();
        Self { x0, t }
    }

    /// Network input `X_t` and regression target `X1 - X0`.
    pub fn regression(&self, x1: &LatentState) -> (LatentState, LatentState) {
        (interpolate(&self.x0, x1, &self.t), difference(x1, &self.x0))
    }
}

/// Random quantities of one Stage-II batch.
#[derive(Debug, Clone, PartialEq)]
pub struct Stage2Draw {
    pub x0: LatentState,
    pub r: Vec<f64>,
    pub t: Vec<f64>,
    pub kappa: Vec<f64>,
}

impl Stage2Draw {
    /// Sorted uniform pairs; `floor(p * B)` randomly chosen entries get `r = t`.
    pub fn sample(batch: usize, seq: usize, p: f64, rng: &mut impl Rng) -> Self {
        let x0 = LatentState::gaussian(batch, seq, rng);
        let mut r = Vec::with_capacity(batch);
        let mut t = Vec::with_capacity(batch);
        for _ in 0..batch {
            let (a, b): (f64, f64) = (rng.random(), rng.random());
            r.push(a.min(b));
            t.push(a.max(b));
        }
        let n_diag = ((p * batch as f64) + 1e-9).floor() as usize;
        let mut slots: Vec<usize> = (0..batch).collect();
        slots.shuffle(rng);
        for &i in &slots[..n_diag.min(batch)] {
            r[i] = t[i];
        }
        let kappa = (0..batch).map(|_| rng.random::<f64>()).collect();
        Self { x0, r, t, kappa }
    }

    pub fn split_point(&self, b: usize) -> f64 {
        (1.0 - self.kappa[b]) * self.t[b] + self.kappa[b] * self.r[b]
    }

    /// Rows with `r < t`, which receive the split-consistency target.
    pub fn interval_rows(&self) -> Vec<usize> {
        (0..self.r.len()).filter(|&b| self.r[b] < self.t[b]).collect()
    }

    /// Network input `X_r` and the stop-gradient regression target.
    ///
    /// `field(rows, x, r, t)` evaluates the current velocity field for the
    /// listed batch rows; it is only called for interval rows.
    pub fn regression<F>(&self, x1: &LatentState, mut field: F) -> Result<(LatentState, LatentState)>
    where
        F: FnMut(&[usize], &LatentState, &[f64], &[f64]) -> Result<LatentState>,
    {
        let x_r = interpolate(&self.x0, x1, &self.r);
        let mut target = difference(x1, &self.x0);
        let rows = self.interval_rows();
        if !rows.is_empty() {
            let pick = |v: &[f64]| rows.iter().map(|&b| v[b]).collect::<Vec<_>>();
            let (r, t, kappa) = (pick(&self.r), pick(&self.t), pick(&self.kappa));
            let s: Vec<f64> = rows.iter().map(|&b| self.split_point(b)).collect();
            let split = split_target(|x, a, b| field(&rows, x, a, b), &x_r.select(&rows), &r, &s, &t, &kappa)?;
            for (k, &b) in rows.iter().enumerate() {
                target.sample_mut(b).copy_from_slice(split.sample(k));
            }
        }
        Ok((x_r, target))
    }
}

/// `(1 - k) u(x_r, r, s) + k u(x_s, s, t)` with `x_s = x_r + (s - r) u(x_r, r, s)`.
pub fn split_target<F>(mut field: F, x_r: &LatentState, r: &[f64], s: &[f64], t: &[f64], kappa: &[f64]) -> Result<LatentState>
where
    F: FnMut(&LatentState, &[f64], &[f64]) -> Result<LatentState>,
{
    let u_rs = field(x_r, r, s)?;
    let ds: Vec<f64> = s.iter().zip(r).map(|(s, r)| s - r).collect();
    let x_s = axpy(x_r, &u_rs, &ds);
    let u_st = field(&x_s, s, t)?;
    let mut out = u_rs;
    for (b, &k) in kappa.iter().enumerate() {
        for (o, &v) in out.sample_mut(b).iter_mut().zip(u_st.sample(b)) {
            *o = (1.0 - k) * *o + k * v;
        }
    }
    Ok(out)
}

/// Mean squared error of `u(x, r, t)` against `target`, with parameter gradients.
pub fn regression_loss<T: Scalar>(
    params: &ModelParameters<T>,
    x: &LatentState,
    r: &[f64],
    t: &[f64],
    cond: &Condition<T>,
    target: &LatentState,
) -> Result<(f64, Vec<Tensor<T>>)> {
    let mut tape = Tape::new();
    let pv = ParamVars::bind(&mut tape, params, true);
    let out = forward_tokens(&mut tape, &pv, &params.config, x, r, t, cond)?;
    let target_tokens: Tensor<T> = target.to_tokens();
    let pred = tape.value(out);
    let loss_value = pred
        .data
        .iter()
        .zip(&target_tokens.data)
        .map(|(&a, &b)| {
            let d = a.to_f64().unwrap() - b.to_f64().unwrap();
            d * d
        })
        .sum::<f64>()
        / pred.len() as f64;
    let loss = tape.mse(out, target_tokens);
    let mut grads = tape.backward(loss);
    let g = pv
        .vars()
        .iter()
        .zip(&params.tensors)
        .map(|(&v, p)| grads.take(v).unwrap_or_else(|| Tensor::zeros(p.rows, p.cols)))
        .collect();
    Ok((loss_value, g))
}

/// Stage-I flow-matching loss on one batch.
pub fn stage1_loss<T: Scalar>(
    params: &ModelParameters<T>,
    x1: &LatentState,
    cond: &Condition<T>,
    draw: &Stage1Draw,
) -> Result<(f64, Vec<Tensor<T>>)> {
    let (x_t, target) = draw.regression(x1);
    regression_loss(params, &x_t, &draw.t, &draw.t, cond, &target)
}

/// Stage-II split-consistency loss on one batch.
pub fn stage2_loss<T: Scalar>(
    params: &ModelParameters<T>,
    x1: &LatentState,
    cond: &Condition<T>,
    draw: &Stage2Draw,
) -> Result<(f64, Vec<Tensor<T>>)> {
    let (x_r, target) = draw.regression(x1, |rows, x, r, t| predict(params, x, r, t, &cond.select(rows)))?;
    regression_loss(params, &x_r, &draw.r, &draw.t, cond, &target)
}

/// One row of the loss history.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRecord {
    pub epoch: usize,
    pub step: usize,
    pub stage: u8,
    pub loss: f64,
}

pub fn write_loss_csv<W: Write>(history: &[LossRecord], w: &mut W) -> Result<()> {
    writeln!(w, "epoch,step,stage,loss")?;
    for r in history {
        writeln!(w, "{},{},{},{:.8e}", r.epoch, r.step, r.stage, r.loss)?;
    }
    Ok(())
}

/// Final model, the end-of-Stage-I teacher snapshot and the loss history.
#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub checkpoint: Checkpoint,
    pub teacher: Checkpoint,
    pub history: Vec<LossRecord>,
}

/// Noiseless full-codebook RSRP report of every user.
pub fn full_reports(ds: &Dataset) -> Result<Vec<Vec<f64>>> {
    let cb = dft_codebook(&ArrayGeometry::half_wavelength(ds.n_antennas)?);
    let mut unused = ChaCha8Rng::seed_from_u64(0);
    ds.channels.iter().map(|c| measure_rsrp(&c.h, &cb, None, &mut unused)).collect()
}

/// Runs both stages. `progress` sees the mean loss of each finished epoch.
pub fn train(
    ds: &Dataset,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    mut progress: impl FnMut(&LossRecord),
) -> Result<TrainOutput> {
    cfg.validate()?;
    model_cfg.validate()?;
    if model_cfg.seq_len != ds.n_antennas {
        return Err(Error::config(format!("model seq_len {} but dataset has {} antennas", model_cfg.seq_len, ds.n_antennas)));
    }
    let q_max = ds.n_antennas;
    if let Some(&q) = cfg.budget_set.iter().find(|&&q| q == 0 || q > q_max) {
        return Err(Error::config(format!("budget {q} outside [1, {q_max}]")));
    }
    let reports = full_reports(ds)?;
    let train_rows: Vec<usize> = ds.train_indices().collect();
    let norm = PromptNorm::fit(train_rows.iter().map(|&i| reports[i].as_slice()));
    let latents: Vec<Vec<f64>> = ds.targets.iter().map(|t| t.to_latent()).collect();

    let mut params = init_parameters::<f32>(model_cfg, cfg.seed)?;
    let mut ema = params.tensors.clone();
    let mut opt = OptimizerState::new(&params.tensors);
    let hp = AdamW::new(cfg.learning_rate, cfg.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x5EED));
    let mut history = Vec::new();
    let mut teacher = None;
    let mut order = train_rows.clone();
    let mut step = 0usize;

    for epoch in 1..=cfg.max_epochs {
        let stage: u8 = if epoch <= cfg.stage1_epochs { 1 } else { 2 };
        order.shuffle(&mut rng);
        let mut epoch_sum = 0.0;
        let mut epoch_batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let b = chunk.len();
            let masks = stochastic_batch_masks(b, cfg.p_full, &cfg.budget_set, q_max, &mut rng)?;
            let prompts = chunk
                .iter()
                .zip(&masks)
                .map(|(&i, m)| Prompt::from_mask(&reports[i], m))
                .collect::<Result<Vec<_>>>()?;
            let prompt_refs: Vec<&Prompt> = prompts.iter().collect();
            let cond = Condition::<f32>::from_prompts(&prompt_refs, &norm)?;
            let x1 = LatentState::from_samples(&chunk.iter().map(|&i| latents[i].clone()).collect::<Vec<_>>(), q_max)?;
            let (loss, grads) = if stage == 1 {
                let draw = Stage1Draw::sample(b, q_max, &mut rng);
                stage1_loss(&params, &x1, &cond, &draw)?
            } else {
                let draw = Stage2Draw::sample(b, q_max, cfg.p, &mut rng);
                stage2_loss(&params, &x1, &cond, &draw)?
            };
            if !loss.is_finite() {
                return Err(Error::config(format!("training diverged at epoch {epoch}, step {step}")));
            }
            adamw_step(&mut params.tensors, &grads, &mut opt, &hp)?;
            ema_update(&mut ema, &params.tensors, cfg.ema_decay);
            step += 1;
            epoch_sum += loss;
            epoch_batches += 1;
            history.push(LossRecord { epoch, step, stage, loss });
        }
        progress(&LossRecord { epoch, step, stage, loss: epoch_sum / epoch_batches.max(1) as f64 });
        if epoch == cfg.stage1_epochs {
            teacher = Some(snapshot(&params, &ema, norm, ds.amp_scale));
        }
    }
    let teacher = teacher.expect("stage1_epochs < max_epochs");
    Ok(TrainOutput { checkpoint: snapshot(&params, &ema, norm, ds.amp_scale), teacher, history })
}

fn snapshot(params: &ModelParameters<f32>, ema: &[Tensor<f32>], norm: PromptNorm, amp_scale: f64) -> Checkpoint {
    let ema = ModelParameters { config: params.config, names: params.names.clone(), tensors: ema.to_vec() };
    Checkpoint { norm, amp_scale, raw: params.clone(), ema }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::probing::make_prompt;
    use crate::sitegen::{build_dataset, generate_site, SiteConfig};
    use proptest::prelude::*;
    use rand::Rng;

    fn tiny() -> ModelConfig {
        ModelConfig { embed_dim: 16, n_blocks: 1, n_heads: 2, ffn_multiplier: 2.0, n_channels: 2, seq_len: 8, cond_dim: 8 }
    }

    fn scalar(v: f64) -> Vec<Tensor<f64>> {
        vec![Tensor::from_vec(1, 1, vec![v])]
    }

    #[test]
    fn adamw_single_step_oracle() {
        let mut p = scalar(1.0);
        let mut st = OptimizerState::new(&p);
        adamw_step(&mut p, &scalar(1.0), &mut st, &AdamW::new(0.1, 0.0)).unwrap();
        // m_hat = 1, v_hat = 1: p = 1 - 0.1 * 1 / (1 + 1e-8)
        let expect = 1.0 - 0.1 / (1.0 + 1e-8);
        assert!((p[0].data[0] - expect).abs() < 1e-15);
        assert!((p[0].data[0] - 0.9).abs() < 1e-9);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn adamw_decay_and_zero_gradient() {
        let mut p = scalar(1.0);
        let mut st = OptimizerState::new(&p);
        adamw_step(&mut p, &scalar(0.0), &mut st, &AdamW::new(0.1, 0.1)).unwrap();
        assert!((p[0].data[0] - 0.99).abs() < 1e-15);
        let mut p = scalar(0.37);
        let mut st = OptimizerState::new(&p);
        adamw_step(&mut p, &scalar(0.0), &mut st, &AdamW::new(0.1, 0.0)).unwrap();
        assert_eq!(p[0].data[0], 0.37);
    }

    #[test]
    fn adamw_matches_reference_over_steps() {
        let grads = [0.5, -1.5, 2.0, 0.1, -0.3];
        let hp = AdamW { lr: 0.05, weight_decay: 0.2, beta1: 0.9, beta2: 0.999, eps: 1e-8 };
        let mut p = scalar(0.8);
        let mut st = OptimizerState::new(&p);
        let (mut x, mut m, mut v) = (0.8f64, 0.0f64, 0.0f64);
        for (k, &g) in grads.iter().enumerate() {
            adamw_step(&mut p, &scalar(g), &mut st, &hp).unwrap();
            let n = (k + 1) as i32;
            x -= hp.lr * hp.weight_decay * x;
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let mh = m / (1.0 - 0.9f64.powi(n));
            let vh = v / (1.0 - 0.999f64.powi(n));
            x -= hp.lr * mh / (vh.sqrt() + hp.eps);
        }
        assert!((p[0].data[0] - x).abs() < 1e-12, "{} vs {x}", p[0].data[0]);
    }

    #[test]
    fn ema_examples() {
        let mut e = scalar(0.0);
        ema_update(&mut e, &scalar(1.0), 0.995);
        assert!((e[0].data[0] - 0.005).abs() < 1e-15);
        let mut e = scalar(3.0);
        ema_update(&mut e, &scalar(3.0), 0.9);
        assert_eq!(e[0].data[0], 3.0);
        let mut e = scalar(3.0);
        ema_update(&mut e, &scalar(-2.0), 0.0);
        assert_eq!(e[0].data[0], -2.0);
    }

    fn random_latent(batch: usize, seed: u64) -> LatentState {
        LatentState::gaussian(batch, 8, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn endpoint_and_oracle_stage1() {
        let x1 = random_latent(3, 1);
        let draw = Stage1Draw { x0: random_latent(3, 2), t: vec![1.0; 3] };
        let (x_t, target) = draw.regression(&x1);
        assert_eq!(x_t, x1);
        // an oracle that returns X1 - X0 has zero residual
        let resid: f64 = target.data.iter().zip(x1.data.iter().zip(&draw.x0.data)).map(|(u, (a, b))| (u - (a - b)).powi(2)).sum();
        assert_eq!(resid, 0.0);
    }

    fn cond_for(batch: usize, seed: u64) -> Condition<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let prompts: Vec<Prompt> = (0..batch)
            .map(|_| {
                let c: Vec<f64> = (0..8).map(|_| rng.random_range(1e-4..1.0)).collect();
                make_prompt(&c, &[0, 2, 4, 6]).unwrap()
            })
            .collect();
        Condition::from_prompts(&prompts.iter().collect::<Vec<_>>(), &PromptNorm::default()).unwrap()
    }

    #[test]
    fn zero_model_stage1_loss_is_mean_square_of_velocity() {
        let params = init_parameters::<f64>(&tiny(), 3).unwrap();
        let x1 = random_latent(4, 4);
        let draw = Stage1Draw::sample(4, 8, &mut ChaCha8Rng::seed_from_u64(5));
        let (loss, _) = stage1_loss(&params, &x1, &cond_for(4, 6), &draw).unwrap();
        let expect = x1.data.iter().zip(&draw.x0.data).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / x1.data.len() as f64;
        assert!((loss - expect).abs() < 1e-12 * expect);
    }

    #[test]
    fn split_example_is_self_consistent() {
        let d = Stage2Draw { x0: random_latent(1, 0), r: vec![0.2], t: vec![0.8], kappa: vec![0.5] };
        let s = d.split_point(0);
        assert!((s - 0.5).abs() < 1e-15);
        assert!(((d.t[0] - s) / (d.t[0] - d.r[0]) - 0.5).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn split_identity_holds_for_any_field(r in 0.0f64..0.5, gap in 0.01f64..0.5, kappa in 0.0f64..1.0, seed in 0u64..1000) {
            let t = r + gap;
            let s = (1.0 - kappa) * t + kappa * r;
            let k = (t - s) / (t - r);
            // arbitrary nonlinear field
            let field = |x: &LatentState, a: &[f64], b: &[f64]| -> Result<LatentState> {
                let mut out = x.clone();
                for (i, v) in out.data.iter_mut().enumerate() {
                    *v = (*v * (1.0 + a[0])).sin() + b[0] * b[0] * (i as f64 * 0.1).cos();
                }
                Ok(out)
            };
            let x_r = random_latent(1, seed);
            let u_rs = field(&x_r, &[r], &[s]).unwrap();
            let x_s = axpy(&x_r, &u_rs, &[s - r]);
            let u_st = field(&x_s, &[s], &[t]).unwrap();
            let target = split_target(field, &x_r, &[r], &[s], &[t], &[k]).unwrap();
            for i in 0..target.data.len() {
                let lhs = (t - r) * target.data[i];
                let rhs = (s - r) * u_rs.data[i] + (t - s) * u_st.data[i];
                prop_assert!((lhs - rhs).abs() <= 1e-12 * (1.0 + rhs.abs()));
            }
        }
    }

    #[test]
    fn constant_field_has_zero_split_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x1 = random_latent(16, 10);
        let draw = Stage2Draw::sample(16, 8, 0.5, &mut rng);
        let c: Vec<f64> = (0..16).map(|i| (i as f64 * 0.37).sin()).collect();
        let constant = |rows: &[usize], x: &LatentState, _: &[f64], _: &[f64]| -> Result<LatentState> {
            let mut out = LatentState::zeros(rows.len(), x.seq);
            for k in 0..rows.len() {
                out.sample_mut(k).copy_from_slice(&c);
            }
            Ok(out)
        };
        let (_, target) = draw.regression(&x1, constant).unwrap();
        for b in draw.interval_rows() {
            for (a, e) in target.sample(b).iter().zip(&c) {
                assert!((a - e).abs() < 1e-12);
            }
        }
        assert!(!draw.interval_rows().is_empty());
    }

    #[test]
    fn affine_field_average_is_exact() {
        // instantaneous v(tau) = a + b tau, so u(r, t) = a + b (r + t) / 2
        let (a, b) = (0.3, -1.7);
        let avg = |x: &LatentState, r: &[f64], t: &[f64]| -> Result<LatentState> {
            let mut out = x.clone();
            for k in 0..x.batch {
                out.sample_mut(k).fill(a + b * (r[k] + t[k]) / 2.0);
            }
            Ok(out)
        };
        let x_r = random_latent(1, 11);
        let (r, t, kappa) = (0.1, 0.9, 0.25);
        let s = (1.0 - kappa) * t + kappa * r;
        let target = split_target(avg, &x_r, &[r], &[s], &[t], &[kappa]).unwrap();
        let exact = a + b * (r + t) / 2.0;
        assert!(target.data.iter().all(|v| (v - exact).abs() < 1e-12));
    }

    #[test]
    fn stage2_diagonal_rows_use_flow_target() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let draw = Stage2Draw::sample(10, 8, 0.7, &mut rng);
        assert_eq!(draw.interval_rows().len(), 3);
        let x1 = random_latent(10, 13);
        let (x_r, target) = draw.regression(&x1, |rows, x, _, _| Ok(LatentState::zeros(rows.len(), x.seq))).unwrap();
        for b in 0..10 {
            if draw.r[b] == draw.t[b] {
                for i in 0..16 {
                    let v = x1.sample(b)[i] - draw.x0.sample(b)[i];
                    assert!((target.sample(b)[i] - v).abs() < 1e-15);
                }
            } else {
                assert!(target.sample(b).iter().all(|&v| v == 0.0));
            }
            let expect = interpolate(&draw.x0, &x1, &draw.r);
            assert_eq!(x_r.sample(b), expect.sample(b));
        }
    }

    #[test]
    fn target_branch_carries_no_gradient() {
        // With a random model, the stage-II gradient must equal the gradient
        // of a plain regression onto the precomputed (constant) target.
        let mut params = init_parameters::<f64>(&tiny(), 14).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        for t in &mut params.tensors {
            for v in &mut t.data {
                *v += rng.random_range(-0.2..0.2);
            }
        }
        let x1 = random_latent(6, 16);
        let cond = cond_for(6, 17);
        let draw = Stage2Draw::sample(6, 8, 0.3, &mut rng);
        let (loss, grads) = stage2_loss(&params, &x1, &cond, &draw).unwrap();
        let (x_r, target) = draw.regression(&x1, |rows, x, r, t| predict(&params, x, r, t, &cond.select(rows))).unwrap();
        let (loss2, grads2) = regression_loss(&params, &x_r, &draw.r, &draw.t, &cond, &target).unwrap();
        assert_eq!(loss, loss2);
        assert_eq!(grads, grads2);
        // and the prediction branch is the only path: zeroing its residual zeros every gradient
        let pred = predict(&params, &x_r, &draw.r, &draw.t, &cond).unwrap();
        let (l0, g0) = regression_loss(&params, &x_r, &draw.r, &draw.t, &cond, &pred).unwrap();
        assert!(l0 < 1e-30);
        assert!(g0.iter().all(|g| g.data.iter().all(|&v| v.abs() < 1e-14)));
    }

    #[test]
    fn stage1_overfits_single_sample() {
        let cfg = tiny();
        let mut params = init_parameters::<f32>(&cfg, 18).unwrap();
        let x1 = random_latent(1, 19);
        let c: Vec<f64> = (0..8).map(|i| 1e-3 * (i + 1) as f64).collect();
        let prompt = make_prompt(&c, &[0, 4]).unwrap();
        let cond = Condition::<f32>::from_prompts(&[&prompt], &PromptNorm::fit([c.as_slice()])).unwrap();
        let draw = Stage1Draw { x0: random_latent(1, 20), t: vec![0.4] };
        let mut opt = OptimizerState::new(&params.tensors);
        let hp = AdamW::new(2e-4, 0.0);
        let mut prev = f64::INFINITY;
        let first = stage1_loss(&params, &x1, &cond, &draw).unwrap().0;
        for step in 0..200 {
            let (loss, g) = stage1_loss(&params, &x1, &cond, &draw).unwrap();
            assert!(loss <= prev, "loss rose at step {step}: {prev} -> {loss}");
            prev = loss;
            adamw_step(&mut params.tensors, &g, &mut opt, &hp).unwrap();
        }
        assert!(prev < 0.05 * first, "{first} -> {prev}");
    }

    fn tiny_dataset() -> Dataset {
        let site = generate_site(&SiteConfig { n_antennas: 8, ..SiteConfig::default() }).unwrap();
        build_dataset(&site, 80, 0.75, 21).unwrap()
    }

    fn tiny_train() -> TrainConfig {
        TrainConfig { max_epochs: 3, stage1_epochs: 2, batch_size: 16, budget_set: vec![2, 4, 8], seed: 22, ..TrainConfig::default() }
    }

    #[test]
    fn training_is_deterministic_and_snapshots_teacher() {
        let ds = tiny_dataset();
        let mut epochs = Vec::new();
        let a = train(&ds, &tiny(), &tiny_train(), |r| epochs.push(r.epoch)).unwrap();
        let b = train(&ds, &tiny(), &tiny_train(), |_| {}).unwrap();
        assert_eq!(epochs, vec![1, 2, 3]);
        assert_eq!(a.checkpoint, b.checkpoint);
        assert_eq!(a.history, b.history);
        assert_ne!(a.teacher.raw, a.checkpoint.raw);
        assert_eq!(a.history.len(), 3 * 4);
        assert!(a.history.iter().filter(|r| r.stage == 2).all(|r| r.epoch == 3));
        let mut csv = Vec::new();
        write_loss_csv(&a.history, &mut csv).unwrap();
        assert!(String::from_utf8(csv).unwrap().starts_with("epoch,step,stage,loss\n1,1,1,"));
    }

    #[test]
    fn config_errors() {
        let ds = tiny_dataset();
        let wrong = ModelConfig { seq_len: 16, ..tiny() };
        assert!(matches!(train(&ds, &wrong, &tiny_train(), |_| {}), Err(Error::Config(_))));
        let bad = TrainConfig { stage1_epochs: 3, ..tiny_train() };
        assert!(bad.validate().is_err());
        let ok = TrainConfig { max_epochs: 100, stage1_epochs: 99, ..tiny_train() };
        assert!(ok.validate().is_ok());
        let budget = TrainConfig { budget_set: vec![9], ..tiny_train() };
        assert!(train(&ds, &tiny(), &budget, |_| {}).is_err());
    }
}
