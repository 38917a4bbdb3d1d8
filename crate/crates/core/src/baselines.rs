//! Reference methods: budgeted DFT sweep and a discriminative regressor.
//!
//! The regressor is a plain MLP from the normalized dB prompt of one fixed
//! probing budget to the angular-domain target. It shares the beam recovery
//! of the generative model, so the two differ only in point estimate versus
//! sampled candidates.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::Container;
use crate::error::{Error, Result};
use crate::inference::recover_beam;
use crate::model::{ModelConfig, PromptNorm, N_CHANNELS};
use crate::nn::{Tape, Tensor, Var};
use crate::probing::{probe_beams, uniform_probe_indices, Codebook, Prompt};
use crate::signal::{BeamVector, ComplexVector};
use crate::sitegen::Dataset;
use crate::training::{adamw_step, full_reports, AdamW, OptimizerState};

/// Sweeps the `q` uniformly spaced codewords and keeps the strongest.
///
/// Returns the chosen codeword and its codebook index.
pub fn exhaustive_select<'a>(
    h: &ComplexVector,
    cb: &'a Codebook,
    q: usize,
    snr_db: Option<f64>,
    rng: &mut impl Rng,
) -> Result<(&'a BeamVector, usize)> {
    let idx = uniform_probe_indices(q, cb.n_beams())?;
    let beams: Vec<BeamVector> = idx.iter().map(|&k| cb.beam(k).clone()).collect();
    let powers = probe_beams(h, &beams, snr_db, rng)?;
    let mut best = 0;
    for (j, &p) in powers.iter().enumerate() {
        if p > powers[best] {
            best = j;
        }
    }
    Ok((cb.beam(idx[best]), idx[best]))
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiscriminativeConfig {
    pub hidden_dims: Vec<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl DiscriminativeConfig {
    /// Two hidden layers of width `4 N`.
    pub fn for_antennas(n_antennas: usize) -> Self {
        Self { hidden_dims: vec![4 * n_antennas; 2], epochs: 40, batch_size: 32, learning_rate: 1e-3, weight_decay: 0.1, seed: 0 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden_dims.is_empty() || self.hidden_dims.contains(&0) {
            return Err(Error::config("hidden_dims must be a nonempty list of positive widths"));
        }
        if self.epochs == 0 || self.batch_size == 0 || !(self.learning_rate > 0.0) {
            return Err(Error::config("epochs, batch_size and learning_rate must be positive"));
        }
        Ok(())
    }
}

/// MLP regressor for one probing budget.
#[derive(Debug, Clone, PartialEq)]
pub struct Discriminative {
    pub q: usize,
    pub n_antennas: usize,
    pub norm: PromptNorm,
    pub amp_scale: f64,
    /// `(weight, bias)` per layer; the last layer maps to `2 N`.
    pub layers: Vec<(Tensor<f32>, Tensor<f32>)>,
}

impl Discriminative {
    /// Xavier-uniform hidden layers and a zero output layer.
    pub fn init(q: usize, n_antennas: usize, hidden: &[usize], norm: PromptNorm, amp_scale: f64, seed: u64) -> Result<Self> {
        uniform_probe_indices(q, n_antennas)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut dims = vec![n_antennas];
        dims.extend_from_slice(hidden);
        dims.push(N_CHANNELS * n_antennas);
        let mut layers = Vec::new();
        for (k, w) in dims.windows(2).enumerate() {
            let (i, o) = (w[0], w[1]);
            let weight = if k + 2 == dims.len() {
                Tensor::zeros(i, o)
            } else {
                let lim = (6.0 / (i + o) as f64).sqrt() as f32;
                Tensor::from_vec(i, o, (0..i * o).map(|_| rng.random_range(-lim..lim)).collect())
            };
            layers.push((weight, Tensor::zeros(1, o)));
        }
        Ok(Self { q, n_antennas, norm, amp_scale, layers })
    }

    /// Normalized dB features at the probed slots, zero elsewhere.
    pub fn features(&self, prompt: &Prompt) -> Result<Vec<f32>> {
        if prompt.q_max() != self.n_antennas {
            return Err(Error::dim(format!("prompt length {} but regressor expects {}", prompt.q_max(), self.n_antennas)));
        }
        if prompt.q_active() == 0 {
            return Err(Error::EmptyMask);
        }
        Ok(prompt
            .values()
            .iter()
            .zip(prompt.mask())
            .map(|(&v, &m)| if m { self.norm.feature(v) as f32 } else { 0.0 })
            .collect())
    }

    fn forward(&self, tape: &mut Tape<f32>, x: Var, trainable: bool) -> (Var, Vec<Var>) {
        let mut vars = Vec::new();
        let mut h = x;
        for (k, (w, b)) in self.layers.iter().enumerate() {
            let (wv, bv) = if trainable {
                (tape.param(w.clone()), tape.param(b.clone()))
            } else {
                (tape.constant(w.clone()), tape.constant(b.clone()))
            };
            vars.extend([wv, bv]);
            h = tape.linear(h, wv, Some(bv));
            if k + 1 < self.layers.len() {
                h = tape.silu(h);
            }
        }
        (h, vars)
    }

    /// Predicted flattened `(2, N)` latent.
    pub fn predict_latent(&self, prompt: &Prompt) -> Result<Vec<f64>> {
        let f = self.features(prompt)?;
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_vec(1, self.n_antennas, f));
        let (out, _) = self.forward(&mut tape, x, false);
        Ok(tape.value(out).data.iter().map(|&v| v as f64).collect())
    }

    pub fn predict_beam(&self, prompt: &Prompt) -> Result<BeamVector> {
        recover_beam(&self.predict_latent(prompt)?)
    }

    pub fn to_container(&self) -> Container {
        let hidden = self.layers[0].0.cols;
        let config = ModelConfig {
            embed_dim: hidden,
            n_blocks: self.layers.len() - 1,
            n_heads: 0,
            ffn_multiplier: 0.0,
            n_channels: N_CHANNELS,
            seq_len: self.n_antennas,
            cond_dim: self.q,
        };
        let mut tensors = Vec::new();
        for (k, (w, b)) in self.layers.iter().enumerate() {
            tensors.push((format!("disc.fc{k}.weight"), w.clone()));
            tensors.push((format!("disc.fc{k}.bias"), b.clone()));
        }
        Container { config, norm: self.norm, amp_scale: self.amp_scale, tensors }
    }

    pub fn from_container(c: Container) -> Result<Self> {
        if !c.is_discriminative() {
            return Err(Error::format("checkpoint holds a velocity model, not a discriminative regressor"));
        }
        let n = c.config.seq_len;
        if c.tensors.len() % 2 != 0 || c.tensors.is_empty() {
            return Err(Error::format("discriminative checkpoint must hold weight/bias pairs"));
        }
        let mut layers = Vec::new();
        let mut width = n;
        for (k, pair) in c.tensors.chunks(2).enumerate() {
            let (wn, w) = &pair[0];
            let (bn, b) = &pair[1];
            if *wn != format!("disc.fc{k}.weight") || *bn != format!("disc.fc{k}.bias") {
                return Err(Error::format(format!("unexpected tensor names {wn}, {bn}")));
            }
            if w.rows != width || b.rows != 1 || b.cols != w.cols {
                return Err(Error::format(format!("layer {k} has inconsistent shape")));
            }
            width = w.cols;
            layers.push((w.clone(), b.clone()));
        }
        if width != N_CHANNELS * n {
            return Err(Error::format("output layer does not produce a (2, N) latent"));
        }
        let out = Self { q: c.config.cond_dim, n_antennas: n, norm: c.norm, amp_scale: c.amp_scale, layers };
        uniform_probe_indices(out.q, n).map_err(|_| Error::format("stored probing budget out of range"))?;
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(Container::load(path)?)
    }
}

/// Fits a regressor for budget `q` on the training split with noiseless prompts.
pub fn train_discriminative(ds: &Dataset, q: usize, cfg: &DiscriminativeConfig) -> Result<Discriminative> {
    cfg.validate()?;
    let n = ds.n_antennas;
    let idx = uniform_probe_indices(q, n)?;
    let reports = full_reports(ds)?;
    let rows: Vec<usize> = ds.train_indices().collect();
    let norm = PromptNorm::fit(rows.iter().map(|&i| reports[i].as_slice()));
    let mut model = Discriminative::init(q, n, &cfg.hidden_dims, norm, ds.amp_scale, cfg.seed)?;
    let feats: Vec<Vec<f32>> = rows
        .iter()
        .map(|&i| model.features(&crate::probing::make_prompt(&reports[i], &idx)?))
        .collect::<Result<_>>()?;
    let targets: Vec<Vec<f64>> = rows.iter().map(|&i| ds.targets[i].to_latent()).collect();

    let mut flat: Vec<Tensor<f32>> = model.layers.iter().flat_map(|(w, b)| [w.clone(), b.clone()]).collect();
    let mut opt = OptimizerState::new(&flat);
    let hp = AdamW::new(cfg.learning_rate, cfg.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0xD15C));
    let mut order: Vec<usize> = (0..rows.len()).collect();
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let x: Vec<f32> = chunk.iter().flat_map(|&k| feats[k].iter().copied()).collect();
            let y: Vec<f32> = chunk.iter().flat_map(|&k| targets[k].iter().map(|&v| v as f32)).collect();
            let mut tape = Tape::new();
            let xv = tape.constant(Tensor::from_vec(chunk.len(), n, x));
            let (out, vars) = model.forward(&mut tape, xv, true);
            let loss = tape.mse(out, Tensor::from_vec(chunk.len(), N_CHANNELS * n, y));
            let mut grads = tape.backward(loss);
            let g: Vec<Tensor<f32>> = vars
                .iter()
                .zip(&flat)
                .map(|(&v, p)| grads.take(v).unwrap_or_else(|| Tensor::zeros(p.rows, p.cols)))
                .collect();
            adamw_step(&mut flat, &g, &mut opt, &hp)?;
            for (k, layer) in model.layers.iter_mut().enumerate() {
                layer.0.data.copy_from_slice(&flat[2 * k].data);
                layer.1.data.copy_from_slice(&flat[2 * k + 1].data);
            }
        }
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::probing::{beam_power, dft_beam_angle, dft_codebook, make_prompt};
    use crate::signal::{normalized_gain_db, steering_vector, ArrayGeometry};
    use crate::sitegen::{build_dataset, generate_site, SiteConfig};

    fn random_h(n: usize, seed: u64) -> ComplexVector {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ComplexVector::new((0..n).map(|_| num_complex::Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))).collect()).unwrap()
    }

    #[test]
    fn exhaustive_examples() {
        let geom = ArrayGeometry::half_wavelength(16).unwrap();
        let cb = dft_codebook(&geom);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for seed in 0..50 {
            let h = random_h(16, seed);
            let (_, k) = exhaustive_select(&h, &cb, 16, None, &mut rng).unwrap();
            let brute = (0..16).fold(0, |b, i| if beam_power(&h, &cb, i).unwrap() > beam_power(&h, &cb, b).unwrap() { i } else { b });
            assert_eq!(k, brute);
            assert_eq!(exhaustive_select(&h, &cb, 1, None, &mut rng).unwrap().1, 0);
            // superset argmax never loses gain
            let mut prev = f64::NEG_INFINITY;
            for q in [1, 2, 4, 8, 16] {
                let (w, _) = exhaustive_select(&h, &cb, q, None, &mut rng).unwrap();
                let g = normalized_gain_db(&h, w).unwrap();
                assert!(g >= prev - 1e-12);
                prev = g;
            }
        }
        for k in 0..16 {
            let h = steering_vector(dft_beam_angle(k, 16), &geom).unwrap();
            let (w, idx) = exhaustive_select(&h, &cb, 16, None, &mut rng).unwrap();
            assert_eq!(idx, k);
            assert!(normalized_gain_db(&h, w).unwrap().abs() < 1e-9);
        }
        assert!(exhaustive_select(&random_h(16, 0), &cb, 17, None, &mut rng).is_err());
    }

    fn dataset() -> Dataset {
        let site = generate_site(&SiteConfig { n_antennas: 8, ..SiteConfig::default() }).unwrap();
        build_dataset(&site, 600, 0.8, 3).unwrap()
    }

    fn mean_gain(ds: &Dataset, model: &Discriminative) -> f64 {
        let reports = full_reports(ds).unwrap();
        let idx = uniform_probe_indices(model.q, ds.n_antennas).unwrap();
        let users: Vec<usize> = ds.test_indices().collect();
        users
            .iter()
            .map(|&u| {
                let w = model.predict_beam(&make_prompt(&reports[u], &idx).unwrap()).unwrap();
                normalized_gain_db(&ds.channels[u].h, &w).unwrap()
            })
            .sum::<f64>()
            / users.len() as f64
    }

    #[test]
    fn untrained_regressor_emits_beam_zero() {
        let m = Discriminative::init(4, 8, &[32, 32], PromptNorm::default(), 1.0, 0).unwrap();
        let c: Vec<f64> = (0..8).map(|i| i as f64 + 1.0).collect();
        let w = m.predict_beam(&make_prompt(&c, &[0, 2, 4, 6]).unwrap()).unwrap();
        let cb = dft_codebook(&ArrayGeometry::half_wavelength(8).unwrap());
        assert!(w.as_slice().iter().zip(cb.beam(0).as_slice()).all(|(a, b)| (a - b).norm() < 1e-12));
    }

    #[test]
    fn oracle_regressor_is_mrt() {
        let ds = dataset();
        for u in ds.test_indices().take(20) {
            let w = recover_beam(&ds.targets[u].to_latent()).unwrap();
            assert!(normalized_gain_db(&ds.channels[u].h, &w).unwrap().abs() < 1e-9);
        }
    }

    #[test]
    fn training_beats_untrained_and_round_trips() {
        let ds = dataset();
        let cfg = DiscriminativeConfig { epochs: 30, ..DiscriminativeConfig::for_antennas(8) };
        let trained = train_discriminative(&ds, 4, &cfg).unwrap();
        let untrained = Discriminative::init(4, 8, &cfg.hidden_dims, trained.norm, ds.amp_scale, cfg.seed).unwrap();
        let (gt, gu) = (mean_gain(&ds, &trained), mean_gain(&ds, &untrained));
        assert!(gt > gu, "trained {gt} vs untrained {gu}");
        let c: Vec<f64> = (0..8).map(|i| 1e-4 * (i + 1) as f64).collect();
        let p = make_prompt(&c, &[0, 2, 4, 6]).unwrap();
        assert_eq!(trained.predict_beam(&p).unwrap(), trained.predict_beam(&p).unwrap());

        let mut bytes = Vec::new();
        trained.to_container().write(&mut bytes).unwrap();
        let c = Container::read(&bytes[..]).unwrap();
        assert!(c.is_discriminative());
        assert!(crate::checkpoint::Checkpoint::from_container(c.clone()).is_err());
        assert_eq!(Discriminative::from_container(c).unwrap(), trained);
    }
}
