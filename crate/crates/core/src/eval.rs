//! Evaluation protocols: gain versus overhead, versus generation steps,
//! budget generalization and noisy prompts.
//!
//! Every protocol is paired: a user sees the same prompt (clean or noisy),
//! the same prior draws and the same verification noise across methods and
//! brainstorm sizes, so trends are compared on identical randomness. Prior
//! draws are prefix-nested, so `M = 4` uses the first four of the `M = 8`
//! candidates.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::baselines::Discriminative;
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::inference::{draw_priors, generate, recover_beam, select_beam, InferenceConfig, Sampler};
use crate::model::{Condition, LatentState};
use crate::probing::{dft_codebook, make_prompt, measure_rsrp, uniform_probe_indices, Codebook, Prompt};
use crate::signal::{normalized_gain_db, ArrayGeometry, BeamVector, ComplexVector};
use crate::sitegen::Dataset;

/// Largest admissible normalized gain; anything above breaks the constant-modulus bound.
pub const GAIN_BOUND_DB: f64 = 1e-9;

/// Users per forward batch.
const CHUNK_USERS: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Fbbs,
    FlowTeacher,
    Exhaustive,
    Discriminative,
    Mrt,
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::Fbbs => "fbbs",
            Method::FlowTeacher => "flow_teacher",
            Method::Exhaustive => "exhaustive",
            Method::Discriminative => "discriminative",
            Method::Mrt => "mrt",
        }
    }
}

/// Axes of the evaluation sweeps.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepSpec {
    /// Probing budgets of the overhead sweep.
    pub budgets: Vec<usize>,
    /// Brainstorm sizes `M`.
    pub brainstorm: Vec<usize>,
    /// Generation step counts `T` of the step sweep.
    pub steps: Vec<usize>,
    /// Step counts of the overhead sweep.
    pub overhead_steps: Vec<usize>,
    /// Prompt SNRs of the noisy-prompt protocol; `None` is the noiseless row.
    pub snr_db: Vec<Option<f64>>,
    /// Budgets evaluated by the generalization protocol.
    pub q_grid: Vec<usize>,
    /// Fixed `(Q, M, T)`: `Q` of the step sweep, `M` and `T` of the noisy-prompt
    /// and generalization protocols.
    pub fixed_q: usize,
    /// Budget of the noisy-prompt protocol.
    pub noise_q: usize,
    pub fixed_m: usize,
    pub fixed_steps: usize,
    pub n_test_users: usize,
    pub seed: u64,
}

impl Default for SweepSpec {
    fn default() -> Self {
        Self {
            budgets: vec![4, 8, 16, 24, 32],
            brainstorm: vec![1, 4, 8],
            steps: vec![1, 2, 3, 4, 8, 16, 32, 64],
            overhead_steps: vec![1, 3],
            snr_db: vec![None, Some(-5.0), Some(0.0), Some(5.0), Some(10.0), Some(15.0), Some(20.0), Some(25.0)],
            q_grid: vec![8, 12, 16, 24, 32],
            fixed_q: 16,
            noise_q: 32,
            fixed_m: 8,
            fixed_steps: 3,
            n_test_users: 500,
            seed: 0,
        }
    }
}

impl SweepSpec {
    pub fn validate(&self, q_max: usize) -> Result<()> {
        for (name, list) in [("budgets", &self.budgets), ("brainstorm", &self.brainstorm), ("steps", &self.steps), ("overhead_steps", &self.overhead_steps), ("q_grid", &self.q_grid)] {
            if list.is_empty() || list.contains(&0) {
                return Err(Error::config(format!("{name} must be a nonempty list of positive integers")));
            }
        }
        if let Some(q) = self.budgets.iter().chain(&self.q_grid).chain([&self.fixed_q, &self.noise_q]).find(|&&q| q > q_max) {
            return Err(Error::config(format!("budget {q} exceeds {q_max}")));
        }
        if self.snr_db.is_empty() || self.fixed_m == 0 || self.fixed_steps == 0 || self.fixed_q == 0 || self.noise_q == 0 {
            return Err(Error::config("snr grid and fixed (Q, M, T) must be nonempty/positive"));
        }
        Ok(())
    }
}

/// One aggregated CSV row.
#[derive(Debug, Clone, PartialEq)]
pub struct ResultRow {
    pub method: Method,
    pub q: usize,
    pub m: usize,
    pub steps: usize,
    pub snr_db: Option<f64>,
    pub overhead: usize,
    pub mean_gain_db: f64,
    pub p10_gain_db: f64,
    pub n_users: usize,
    pub seed: u64,
}

/// A row together with the per-user gains it summarizes (in user order).
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub row: ResultRow,
    pub gains: Vec<f64>,
}

pub const CSV_HEADER: &str = "method,q,m,steps,snr_db,overhead,mean_gain_db,p10_gain_db,n_users,seed";

/// Overhead convention written as a comment above the header.
pub const OVERHEAD_NOTE: &str =
    "# overhead: fbbs/flow_teacher Q+M, exhaustive Q, discriminative Q+1 (one verification probe), mrt 0 (genie CSI)";

pub fn write_csv<W: Write>(rows: &[ResultRow], w: &mut W) -> Result<()> {
    writeln!(w, "{OVERHEAD_NOTE}")?;
    writeln!(w, "{CSV_HEADER}")?;
    for r in rows {
        let snr = r.snr_db.map(|s| format!("{s}")).unwrap_or_default();
        writeln!(
            w,
            "{},{},{},{},{},{},{:.6},{:.6},{},{}",
            r.method.name(),
            r.q,
            r.m,
            r.steps,
            snr,
            r.overhead,
            r.mean_gain_db,
            r.p10_gain_db,
            r.n_users,
            r.seed
        )?;
    }
    Ok(())
}

/// Compensated sum, independent of how the inputs were produced.
pub fn kahan_sum(values: &[f64]) -> f64 {
    let (mut sum, mut c) = (0.0f64, 0.0f64);
    for &v in values {
        let y = v - c;
        let t = sum + y;
        c = (t - sum) - y;
        sum = t;
    }
    sum
}

pub fn mean(values: &[f64]) -> f64 {
    kahan_sum(values) / values.len().max(1) as f64
}

/// Linear-interpolated percentile, `p` in `[0, 100]`.
pub fn percentile(values: &[f64], p: f64) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let pos = (p / 100.0).clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

/// Percentile bootstrap interval of the mean at level `1 - alpha`.
pub fn bootstrap_mean_ci(values: &[f64], n_boot: usize, alpha: f64, seed: u64) -> (f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = values.len();
    let mut means: Vec<f64> = (0..n_boot)
        .map(|_| {
            let s: Vec<f64> = (0..n).map(|_| values[rng.random_range(0..n)]).collect();
            mean(&s)
        })
        .collect();
    means.sort_by(|a, b| a.total_cmp(b));
    (percentile(&means, 100.0 * alpha / 2.0), percentile(&means, 100.0 * (1.0 - alpha / 2.0)))
}

/// Per-user paired differences `a - b`.
pub fn paired_diff(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

fn check_bound(gains: &[f64], what: &str) -> Result<()> {
    if let Some(g) = gains.iter().find(|&&g| !(g <= GAIN_BOUND_DB)) {
        return Err(Error::Invariant(format!("{what}: normalized gain {g} dB exceeds the constant-modulus bound")));
    }
    Ok(())
}

/// Test users, their clean reports and the probing codebook.
pub struct EvalContext<'a> {
    pub ds: &'a Dataset,
    pub users: Vec<usize>,
    pub codebook: Codebook,
    pub seed: u64,
    /// Probe the brainstorm candidates with noise at the prompt SNR.
    pub noisy_selection: bool,
    clean: Vec<Vec<f64>>,
}

impl<'a> EvalContext<'a> {
    /// The first `n_users` records of the test split.
    pub fn new(ds: &'a Dataset, n_users: usize, seed: u64) -> Result<Self> {
        let test = ds.test_indices();
        if n_users == 0 || n_users > test.len() {
            return Err(Error::config(format!("n_test_users {n_users} outside [1, {}]", test.len())));
        }
        let users: Vec<usize> = test.take(n_users).collect();
        let codebook = dft_codebook(&ArrayGeometry::half_wavelength(ds.n_antennas)?);
        let mut unused = ChaCha8Rng::seed_from_u64(0);
        let clean = users
            .iter()
            .map(|&u| measure_rsrp(&ds.channels[u].h, &codebook, None, &mut unused))
            .collect::<Result<_>>()?;
        Ok(Self { ds, users, codebook, seed, noisy_selection: false, clean })
    }

    pub fn n_antennas(&self) -> usize {
        self.ds.n_antennas
    }

    fn channel(&self, k: usize) -> &ComplexVector {
        &self.ds.channels[self.users[k]].h
    }

    fn user_stream(&self, k: usize, tag: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ (self.users[k] as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        rng.set_stream(tag);
        rng
    }

    /// Full RSRP report of user `k`, noisy when `snr_db` is given.
    pub fn report(&self, k: usize, snr_db: Option<f64>) -> Result<Vec<f64>> {
        match snr_db {
            None => Ok(self.clean[k].clone()),
            Some(snr) => {
                // same normal draws at every SNR, only their scale changes
                let mut rng = self.user_stream(k, 1);
                measure_rsrp(self.channel(k), &self.codebook, Some(snr), &mut rng)
            }
        }
    }

    fn prompts(&self, q: usize, snr_db: Option<f64>) -> Result<Vec<Prompt>> {
        let idx = uniform_probe_indices(q, self.n_antennas())?;
        (0..self.users.len()).map(|k| make_prompt(&self.report(k, snr_db)?, &idx)).collect()
    }

    fn priors(&self, k: usize, m: usize) -> LatentState {
        draw_priors(m, self.n_antennas(), self.seed.wrapping_add(0xB5A1).wrapping_add(self.users[k] as u64))
    }

    fn row(&self, method: Method, q: usize, m: usize, steps: usize, snr_db: Option<f64>, overhead: usize, gains: Vec<f64>) -> Result<Evaluation> {
        check_bound(&gains, method.name())?;
        Ok(Evaluation {
            row: ResultRow {
                method,
                q,
                m,
                steps,
                snr_db,
                overhead,
                mean_gain_db: mean(&gains),
                p10_gain_db: percentile(&gains, 10.0),
                n_users: gains.len(),
                seed: self.seed,
            },
            gains,
        })
    }

    /// Genie MRT with full channel knowledge.
    pub fn eval_mrt(&self) -> Result<Evaluation> {
        let gains = (0..self.users.len())
            .map(|k| {
                let h = self.channel(k);
                normalized_gain_db(h, &crate::signal::mrt_beamformer(h))
            })
            .collect::<Result<_>>()?;
        self.row(Method::Mrt, 0, 0, 0, None, 0, gains)
    }

    /// Budgeted DFT sweep on the same (possibly noisy) reports the generative prompts use.
    pub fn eval_exhaustive(&self, q: usize, snr_db: Option<f64>) -> Result<Evaluation> {
        let idx = uniform_probe_indices(q, self.n_antennas())?;
        let gains = (0..self.users.len())
            .map(|k| {
                let rep = self.report(k, snr_db)?;
                let best = idx.iter().copied().fold(idx[0], |b, i| if rep[i] > rep[b] { i } else { b });
                normalized_gain_db(self.channel(k), self.codebook.beam(best))
            })
            .collect::<Result<_>>()?;
        self.row(Method::Exhaustive, q, 0, 0, snr_db, q, gains)
    }

    pub fn eval_discriminative(&self, model: &Discriminative, snr_db: Option<f64>) -> Result<Evaluation> {
        let prompts = self.prompts(model.q, snr_db)?;
        let gains = prompts
            .iter()
            .enumerate()
            .map(|(k, p)| normalized_gain_db(self.channel(k), &*model.predict_beam(p)?))
            .collect::<Result<_>>()?;
        self.row(Method::Discriminative, model.q, 1, 0, snr_db, model.q + 1, gains)
    }

    /// Generative rows for every `M` in `ms` at one `(q, steps, snr)`.
    ///
    /// Candidates are generated once for `max(ms)` and each `M` selects among
    /// the first `M`.
    pub fn eval_generative(
        &self,
        ck: &Checkpoint,
        method: Method,
        q: usize,
        ms: &[usize],
        steps: usize,
        snr_db: Option<f64>,
        use_ema: bool,
    ) -> Result<Vec<Evaluation>> {
        let sampler = match method {
            Method::Fbbs => Sampler::Interval,
            Method::FlowTeacher => Sampler::Instantaneous,
            _ => return Err(Error::config(format!("{} is not a generative method", method.name()))),
        };
        let m_max = *ms.iter().max().ok_or_else(|| Error::config("brainstorm list is empty"))?;
        if ms.contains(&0) {
            return Err(Error::config("brainstorm number must be at least 1"));
        }
        if ck.config().seq_len != self.n_antennas() {
            return Err(Error::config("checkpoint antenna count differs from dataset"));
        }
        let prompts = self.prompts(q, snr_db)?;
        let params = ck.weights(use_ema);
        let n = self.n_antennas();
        let chunks: Vec<usize> = (0..self.users.len()).step_by(CHUNK_USERS).collect();
        // per chunk: per user, per M, the selected gain
        let per_chunk: Vec<Result<Vec<Vec<f64>>>> = chunks
            .par_iter()
            .map(|&start| {
                let end = (start + CHUNK_USERS).min(self.users.len());
                let mut refs = Vec::with_capacity((end - start) * m_max);
                let mut data = Vec::with_capacity((end - start) * m_max * 2 * n);
                for k in start..end {
                    refs.extend(std::iter::repeat_n(&prompts[k], m_max));
                    data.extend(self.priors(k, m_max).data);
                }
                let cond = Condition::<f32>::from_prompts(&refs, &ck.norm)?;
                let priors = LatentState { batch: refs.len(), seq: n, data };
                let z = generate(params, &cond, &priors, steps, sampler)?;
                (start..end)
                    .map(|k| {
                        let base = (k - start) * m_max;
                        let beams: Vec<BeamVector> = (0..m_max).map(|j| recover_beam(z.sample(base + j))).collect::<Result<_>>()?;
                        ms.iter()
                            .map(|&m| {
                                let sel_snr = if self.noisy_selection { snr_db } else { None };
                                let mut rng = self.user_stream(k, 0x5E1E_C700 + m as u64);
                                let (w, _) = select_beam(self.channel(k), &beams[..m], sel_snr, &mut rng)?;
                                normalized_gain_db(self.channel(k), w)
                            })
                            .collect()
                    })
                    .collect()
            })
            .collect();
        let mut by_user = Vec::with_capacity(self.users.len());
        for c in per_chunk {
            by_user.extend(c?);
        }
        ms.iter()
            .enumerate()
            .map(|(j, &m)| {
                let gains = by_user.iter().map(|g: &Vec<f64>| g[j]).collect();
                self.row(method, q, m, steps, snr_db, q + m, gains)
            })
            .collect()
    }
}

/// Outcome of one online inference for a test user.
#[derive(Debug, Clone, PartialEq)]
pub struct UserInference {
    pub user: usize,
    pub selected: usize,
    pub gain_db: f64,
    pub phases: Vec<f64>,
}

/// Online beam selection for every context user under one inference config.
pub fn infer_users(ctx: &EvalContext, ck: &Checkpoint, cfg: &InferenceConfig) -> Result<Vec<UserInference>> {
    cfg.validate(ctx.n_antennas())?;
    if ck.config().seq_len != ctx.n_antennas() {
        return Err(Error::config("checkpoint antenna count differs from dataset"));
    }
    let prompts = ctx.prompts(cfg.probe_budget, cfg.prompt_snr_db)?;
    let params = ck.weights(cfg.use_ema);
    let (m, n) = (cfg.brainstorm, ctx.n_antennas());
    let chunks: Vec<usize> = (0..ctx.users.len()).step_by(CHUNK_USERS).collect();
    let per_chunk: Vec<Result<Vec<UserInference>>> = chunks
        .par_iter()
        .map(|&start| {
            let end = (start + CHUNK_USERS).min(ctx.users.len());
            let mut refs = Vec::with_capacity((end - start) * m);
            let mut data = Vec::with_capacity((end - start) * m * 2 * n);
            for k in start..end {
                refs.extend(std::iter::repeat_n(&prompts[k], m));
                data.extend(ctx.priors(k, m).data);
            }
            let cond = Condition::<f32>::from_prompts(&refs, &ck.norm)?;
            let z = generate(params, &cond, &LatentState { batch: refs.len(), seq: n, data }, cfg.steps, Sampler::Interval)?;
            (start..end)
                .map(|k| {
                    let beams: Vec<BeamVector> =
                        (0..m).map(|j| recover_beam(z.sample((k - start) * m + j))).collect::<Result<_>>()?;
                    let mut rng = ctx.user_stream(k, 0x5E1E_C700 + m as u64);
                    let (w, selected) = select_beam(ctx.channel(k), &beams, cfg.selection_noise_snr_db, &mut rng)?;
                    let gain_db = normalized_gain_db(ctx.channel(k), w)?;
                    check_bound(&[gain_db], Method::Fbbs.name())?;
                    let phases = w.as_slice().iter().map(|z| z.arg()).collect();
                    Ok(UserInference { user: ctx.users[k], selected, gain_db, phases })
                })
                .collect()
        })
        .collect();
    let mut out = Vec::with_capacity(ctx.users.len());
    for c in per_chunk {
        out.extend(c?);
    }
    Ok(out)
}

pub const USER_CSV_HEADER: &str = "user,selected,gain_db,phases";

/// Phases are `;`-separated radians.
pub fn write_user_csv<W: Write>(results: &[UserInference], w: &mut W) -> Result<()> {
    writeln!(w, "{USER_CSV_HEADER}")?;
    for r in results {
        let phases: Vec<String> = r.phases.iter().map(|p| format!("{p:.9}")).collect();
        writeln!(w, "{},{},{:.6},{}", r.user, r.selected, r.gain_db, phases.join(";"))?;
    }
    Ok(())
}

/// Gain-versus-overhead sweep: exhaustive, F-BBS for every `(Q, M, T)`,
/// the discriminative baselines for their own budgets, and the genie row.
pub fn sweep_overhead(
    ctx: &EvalContext,
    ck: &Checkpoint,
    discriminative: &[Discriminative],
    budgets: &[usize],
    ms: &[usize],
    steps: &[usize],
    use_ema: bool,
) -> Result<Vec<Evaluation>> {
    let mut out = vec![ctx.eval_mrt()?];
    for &q in budgets {
        out.push(ctx.eval_exhaustive(q, None)?);
        for &t in steps {
            out.extend(ctx.eval_generative(ck, Method::Fbbs, q, ms, t, None, use_ema)?);
        }
    }
    for d in discriminative {
        out.push(ctx.eval_discriminative(d, None)?);
    }
    Ok(out)
}

/// Gain versus generation steps for the distilled model and the flow teacher.
#[allow(clippy::too_many_arguments)]
pub fn sweep_steps(
    ctx: &EvalContext,
    ck: &Checkpoint,
    teacher: Option<&Checkpoint>,
    q: usize,
    ms: &[usize],
    steps: &[usize],
    use_ema: bool,
) -> Result<Vec<Evaluation>> {
    let mut out = Vec::new();
    for &t in steps {
        out.extend(ctx.eval_generative(ck, Method::Fbbs, q, ms, t, None, use_ema)?);
        if let Some(teacher) = teacher {
            out.extend(ctx.eval_generative(teacher, Method::FlowTeacher, q, ms, t, None, use_ema)?);
        }
    }
    Ok(out)
}

/// Both budget regimes over the full grid, without retraining.
pub fn sweep_budget_generalization(
    ctx: &EvalContext,
    sparse: &Checkpoint,
    dense: &Checkpoint,
    q_grid: &[usize],
    m: usize,
    steps: usize,
    use_ema: bool,
) -> Result<(Vec<Evaluation>, Vec<Evaluation>)> {
    let mut a = Vec::new();
    let mut b = Vec::new();
    for &q in q_grid {
        a.extend(ctx.eval_generative(sparse, Method::Fbbs, q, &[m], steps, None, use_ema)?);
        b.extend(ctx.eval_generative(dense, Method::Fbbs, q, &[m], steps, None, use_ema)?);
    }
    Ok((a, b))
}

/// One F-BBS row per SNR, plus the noiseless row (`None` in the grid).
pub fn eval_noisy_prompts(
    ctx: &EvalContext,
    ck: &Checkpoint,
    snr_grid: &[Option<f64>],
    q: usize,
    m: usize,
    steps: usize,
    use_ema: bool,
) -> Result<Vec<Evaluation>> {
    if snr_grid.is_empty() {
        return Err(Error::config("SNR grid is empty"));
    }
    let mut out = Vec::new();
    for &snr in snr_grid {
        out.extend(ctx.eval_generative(ck, Method::Fbbs, q, &[m], steps, snr, use_ema)?);
    }
    Ok(out)
}

pub fn rows(evals: &[Evaluation]) -> Vec<ResultRow> {
    evals.iter().map(|e| e.row.clone()).collect()
}
