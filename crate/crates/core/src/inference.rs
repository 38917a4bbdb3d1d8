//! Online beam synthesis: evolve prior draws through the learned velocity
//! field, map each latent to a constant-modulus beam and keep the candidate
//! with the strongest verification probe.

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{predict, Condition, LatentState, ModelParameters, PromptNorm, N_CHANNELS};
use crate::probing::{probe_beams, Prompt};
use crate::signal::{idft, BeamVector, ComplexVector};

#[derive(Debug, Clone, PartialEq)]
pub struct InferenceConfig {
    pub steps: usize,
    pub brainstorm: usize,
    pub probe_budget: usize,
    pub seed: u64,
    pub use_ema: bool,
    /// Verification probes of the candidates are noisy at this SNR.
    pub selection_noise_snr_db: Option<f64>,
    /// Prompt RSRP is measured with noise at this SNR.
    pub prompt_snr_db: Option<f64>,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self { steps: 1, brainstorm: 8, probe_budget: 16, seed: 0, use_ema: true, selection_noise_snr_db: None, prompt_snr_db: None }
    }
}

impl InferenceConfig {
    pub fn validate(&self, q_max: usize) -> Result<()> {
        if self.steps == 0 || self.brainstorm == 0 {
            return Err(Error::config("steps and brainstorm must be at least 1"));
        }
        if self.probe_budget == 0 || self.probe_budget > q_max {
            return Err(Error::config(format!("probe_budget {} outside [1, {q_max}]", self.probe_budget)));
        }
        Ok(())
    }
}

/// How the velocity field is queried along the trajectory.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sampler {
    /// Average velocity over each interval: `u(z, t_n, t_{n+1})`.
    Interval,
    /// Plain Euler on the instantaneous velocity `u(z, t_n, t_n)`, used for the flow teacher.
    Instantaneous,
}

/// Integrates `z` from 0 to 1 in `steps` equal intervals.
///
/// `field(z, r, t)` is called exactly `steps` times with per-sample times.
pub fn evolve<F>(mut field: F, z0: &LatentState, steps: usize, sampler: Sampler) -> Result<LatentState>
where
    F: FnMut(&LatentState, &[f64], &[f64]) -> Result<LatentState>,
{
    if steps == 0 {
        return Err(Error::config("number of generation steps must be at least 1"));
    }
    let delta = 1.0 / steps as f64;
    let mut z = z0.clone();
    for n in 0..steps {
        let tr = n as f64 * delta;
        let tt = if n + 1 == steps { 1.0 } else { (n + 1) as f64 * delta };
        let t_query = match sampler {
            Sampler::Interval => tt,
            Sampler::Instantaneous => tr,
        };
        let u = field(&z, &vec![tr; z.batch], &vec![t_query; z.batch])?;
        if u.data.len() != z.data.len() {
            return Err(Error::dim("velocity field changed the latent shape"));
        }
        for (zv, uv) in z.data.iter_mut().zip(&u.data) {
            *zv += delta * uv;
        }
    }
    Ok(z)
}

/// Phase of `idft(amp * exp(j * phase))`, taken entrywise, as a unit-norm beam.
///
/// `sample` is one flattened `(2, N)` latent: phase row then amplitude row.
pub fn recover_beam(sample: &[f64]) -> Result<BeamVector> {
    if sample.len() % N_CHANNELS != 0 || sample.is_empty() {
        return Err(Error::dim(format!("latent of length {} is not (2, N)", sample.len())));
    }
    let n = sample.len() / N_CHANNELS;
    let (phase, amp) = sample.split_at(n);
    let spec = ComplexVector::new(phase.iter().zip(amp).map(|(&p, &a)| Complex64::from_polar(1.0, p) * a).collect())?;
    Ok(BeamVector::phase_only(&idft(&spec)))
}

/// `m` standard-normal priors for one user, drawn from a stream keyed by `seed`.
///
/// The first `k` rows do not depend on `m`, so smaller brainstorm sets are
/// prefixes of larger ones.
pub fn draw_priors(m: usize, seq: usize, seed: u64) -> LatentState {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    LatentState::gaussian(m, seq, &mut rng)
}

/// Evolves a batch of priors, each paired with one condition row.
pub fn generate(
    params: &ModelParameters<f32>,
    cond: &Condition<f32>,
    priors: &LatentState,
    steps: usize,
    sampler: Sampler,
) -> Result<LatentState> {
    evolve(|z, r, t| predict(params, z, r, t, cond), priors, steps, sampler)
}

/// `M = priors.batch` candidate beams for one prompt.
pub fn brainstorm(
    params: &ModelParameters<f32>,
    norm: &PromptNorm,
    prompt: &Prompt,
    priors: &LatentState,
    steps: usize,
    sampler: Sampler,
) -> Result<Vec<BeamVector>> {
    if priors.batch == 0 {
        return Err(Error::config("brainstorm number must be at least 1"));
    }
    let cond = Condition::<f32>::from_prompts(&[prompt], norm)?.repeat(priors.batch);
    let z1 = generate(params, &cond, priors, steps, sampler)?;
    (0..z1.batch).map(|b| recover_beam(z1.sample(b))).collect()
}

/// Probes every candidate on `h` and returns the strongest (lowest index on ties).
pub fn select_beam<'a>(
    h: &ComplexVector,
    candidates: &'a [BeamVector],
    snr_db: Option<f64>,
    rng: &mut impl Rng,
) -> Result<(&'a BeamVector, usize)> {
    if candidates.is_empty() {
        return Err(Error::config("no candidate beams to select from"));
    }
    let powers = probe_beams(h, candidates, snr_db, rng)?;
    let mut best = 0;
    for (i, &p) in powers.iter().enumerate() {
        if p > powers[best] {
            best = i;
        }
    }
    Ok((&candidates[best], best))
}
