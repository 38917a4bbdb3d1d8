//! DFT probing codebook, RSRP measurements and prompt masking.

use std::f64::consts::PI;

use num_complex::Complex64;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::signal::{beam_gain, ArrayGeometry, BeamVector, ComplexVector};

/// Orthonormal DFT codebook with one beam per antenna.
#[derive(Debug, Clone)]
pub struct Codebook {
    beams: Vec<BeamVector>,
}

impl Codebook {
    pub fn n_beams(&self) -> usize {
        self.beams.len()
    }

    pub fn beam(&self, k: usize) -> &BeamVector {
        &self.beams[k]
    }

    pub fn beams(&self) -> &[BeamVector] {
        &self.beams
    }
}

/// Beam `k` has entries `exp(j 2 pi k n / N) / sqrt(N)`.
pub fn dft_codebook(geom: &ArrayGeometry) -> Codebook {
    let n = geom.n_antennas;
    let beams = (0..n)
        .map(|k| {
            let phases: Vec<f64> = (0..n).map(|i| 2.0 * PI * ((k * i) % n) as f64 / n as f64).collect();
            BeamVector::from_phases(&phases).expect("non-empty codebook beam")
        })
        .collect();
    Codebook { beams }
}

/// Azimuth at which a half-wavelength ULA is matched to DFT beam `k`.
pub fn dft_beam_angle(k: usize, n: usize) -> f64 {
    let mut s = 2.0 * k as f64 / n as f64;
    if s >= 1.0 {
        s -= 2.0;
    }
    s.asin()
}

fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

/// Noise power that puts the median beam at `snr_db`.
pub fn median_calibrated_noise(powers: &[f64], snr_db: f64) -> f64 {
    median(powers) / 10f64.powf(snr_db / 10.0)
}

fn complex_gaussian(rng: &mut impl Rng, variance: f64) -> Complex64 {
    let s = (variance / 2.0).sqrt();
    let re: f64 = StandardNormal.sample(rng);
    let im: f64 = StandardNormal.sample(rng);
    Complex64::new(s * re, s * im)
}

/// Received power of every beam in `beams` for channel `h`.
///
/// Without `snr_db` this is `|h^H w_i|^2`. With it, each observation is
/// `|h^H w_i + n_i|^2` where `n_i` is circular Gaussian of variance
/// `median_i |h^H w_i|^2 / 10^(snr_db/10)`.
pub fn probe_beams(h: &ComplexVector, beams: &[BeamVector], snr_db: Option<f64>, rng: &mut impl Rng) -> Result<Vec<f64>> {
    let responses = beams.iter().map(|w| h.inner(w)).collect::<Result<Vec<_>>>()?;
    let clean: Vec<f64> = responses.iter().map(|z| z.norm_sqr()).collect();
    let Some(snr_db) = snr_db else { return Ok(clean) };
    let sigma2 = median_calibrated_noise(&clean, snr_db);
    Ok(responses.iter().map(|&z| (z + complex_gaussian(rng, sigma2)).norm_sqr()).collect())
}

/// RSRP report over the whole codebook.
pub fn measure_rsrp(h: &ComplexVector, cb: &Codebook, snr_db: Option<f64>, rng: &mut impl Rng) -> Result<Vec<f64>> {
    if h.len() != cb.beam(0).len() {
        return Err(Error::dim(format!("channel length {} vs codebook length {}", h.len(), cb.beam(0).len())));
    }
    probe_beams(h, cb.beams(), snr_db, rng)
}

/// Noiseless power of one codebook beam.
pub fn beam_power(h: &ComplexVector, cb: &Codebook, k: usize) -> Result<f64> {
    beam_gain(h, cb.beam(k))
}

/// `{ floor(j * q_max / q) : j = 0..q }`.
pub fn uniform_probe_indices(q: usize, q_max: usize) -> Result<Vec<usize>> {
    if q == 0 || q > q_max {
        return Err(Error::config(format!("probing budget {q} outside [1, {q_max}]")));
    }
    Ok((0..q).map(|j| j * q_max / q).collect())
}

/// Full-length masked RSRP condition.
#[derive(Debug, Clone, PartialEq)]
pub struct Prompt {
    values: Vec<f64>,
    mask: Vec<bool>,
}

impl Prompt {
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn q_max(&self) -> usize {
        self.mask.len()
    }

    pub fn q_active(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// Builds a prompt from a full report and an availability mask.
    pub fn from_mask(c: &[f64], mask: &[bool]) -> Result<Self> {
        if c.len() != mask.len() {
            return Err(Error::dim("RSRP report and mask differ in length"));
        }
        if !mask.iter().any(|&m| m) {
            return Err(Error::EmptyMask);
        }
        let values = c.iter().zip(mask).map(|(&v, &m)| if m { v } else { 0.0 }).collect();
        Ok(Self { values, mask: mask.to_vec() })
    }
}

/// Keeps `c` only at `indices`.
pub fn make_prompt(c: &[f64], indices: &[usize]) -> Result<Prompt> {
    if indices.is_empty() {
        return Err(Error::EmptyMask);
    }
    let mut mask = vec![false; c.len()];
    for &i in indices {
        if i >= c.len() {
            return Err(Error::dim(format!("probe index {i} outside [0, {})", c.len())));
        }
        mask[i] = true;
    }
    Prompt::from_mask(c, &mask)
}

/// Masks for one training batch: `floor(p_full * B)` full masks placed at
/// random slots, the rest keep a uniformly spaced subset whose size is drawn
/// uniformly from `budget_set`.
pub fn stochastic_batch_masks(
    batch_size: usize,
    p_full: f64,
    budget_set: &[usize],
    q_max: usize,
    rng: &mut impl Rng,
) -> Result<Vec<Vec<bool>>> {
    if budget_set.is_empty() {
        return Err(Error::config("budget set is empty"));
    }
    if let Some(&q) = budget_set.iter().find(|&&q| q == 0 || q > q_max) {
        return Err(Error::config(format!("budget {q} outside [1, {q_max}]")));
    }
    if !(p_full > 0.0 && p_full <= 1.0) {
        return Err(Error::config("p_full must lie in (0, 1]"));
    }
    let n_full = ((p_full * batch_size as f64) + 1e-9).floor() as usize;
    let n_full = n_full.min(batch_size);
    let mut slots: Vec<usize> = (0..batch_size).collect();
    slots.shuffle(rng);
    let mut masks = vec![Vec::new(); batch_size];
    for (rank, &slot) in slots.iter().enumerate() {
        masks[slot] = if rank < n_full {
            vec![true; q_max]
        } else {
            let q = budget_set[rng.random_range(0..budget_set.len())];
            let mut m = vec![false; q_max];
            for i in uniform_probe_indices(q, q_max)? {
                m[i] = true;
            }
            m
        };
    }
    Ok(masks)
}
