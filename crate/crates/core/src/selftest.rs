//! Analytic-oracle invariant suite behind the `selftest` command.
//!
//! Each check compares the implementation against an independent closed-form
//! or brute-force reference and reports the worst deviation it saw.

use std::time::Instant;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::inference::{evolve, recover_beam, Sampler};
use crate::model::{forward_tokens, init_parameters, Condition, LatentState, ModelConfig, ModelParameters, ParamVars, PromptNorm};
use crate::nn::{Tape, Tensor};
use crate::probing::{make_prompt, uniform_probe_indices, Prompt};
use crate::signal::{dft, idft, mrt_beamformer, steering_vector, ArrayGeometry, ComplexVector};
use crate::sitegen::target_sample;
use crate::training::{adamw_step, split_target, AdamW, OptimizerState};

/// Outcome of one oracle check.
#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    /// Worst observed error, or another short measurement.
    pub detail: String,
}

fn check(name: &'static str, worst: f64, tol: f64) -> Check {
    Check { name, passed: worst <= tol, detail: format!("worst {worst:.3e} (tolerance {tol:.0e})") }
}

fn random_vector(n: usize, rng: &mut impl Rng) -> ComplexVector {
    let v = (0..n).map(|_| Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))).collect();
    ComplexVector::new(v).expect("n > 0")
}

fn max_abs_diff(a: &ComplexVector, b: &ComplexVector) -> f64 {
    a.as_slice().iter().zip(b.as_slice()).map(|(x, y)| (x - y).norm()).fold(0.0, f64::max)
}

fn dft_unitarity(rng: &mut ChaCha8Rng) -> Check {
    let mut worst = 0.0f64;
    for n in [4, 32] {
        for _ in 0..200 {
            let x = random_vector(n, rng);
            worst = worst.max(max_abs_diff(&idft(&dft(&x)), &x));
            worst = worst.max(max_abs_diff(&dft(&idft(&x)), &x));
            worst = worst.max((dft(&x).norm() - x.norm()).abs());
        }
    }
    check("dft unitarity and Parseval", worst, 1e-12)
}

fn steering_norms(rng: &mut ChaCha8Rng) -> Check {
    let mut worst = 0.0f64;
    for k in 0..1000 {
        let geom = ArrayGeometry::half_wavelength(2 + k % 63).expect("n >= 2");
        let phi = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
        let a = steering_vector(phi, &geom).expect("finite angle");
        worst = worst.max((a.norm() - 1.0).abs());
    }
    check("steering vector norms", worst, 1e-12)
}

fn mrt_round_trip(rng: &mut ChaCha8Rng) -> Check {
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let h = random_vector(32, rng);
        let mrt = mrt_beamformer(&h);
        for s in [1e-3, 1.0, 1e3] {
            let w = recover_beam(&target_sample(&h, s).to_latent()).expect("valid latent");
            worst = worst.max(max_abs_diff(&w, &mrt));
        }
    }
    check("MRT round trip through target and recovery", worst, 1e-12)
}

fn split_identity(rng: &mut ChaCha8Rng) -> Check {
    let mut worst = 0.0f64;
    for _ in 0..500 {
        let a: Vec<f64> = (0..4).map(|_| rng.random_range(-2.0..2.0)).collect();
        let field = |x: &LatentState, r: &[f64], t: &[f64]| -> Result<LatentState> {
            let mut out = x.clone();
            for (i, v) in out.data.iter_mut().enumerate() {
                *v = a[0] * (*v * a[1]).sin() + a[2] * r[0] * t[0] + a[3] * (i as f64).cos();
            }
            Ok(out)
        };
        let mut pts = [rng.random::<f64>(), rng.random::<f64>(), rng.random::<f64>()];
        pts.sort_by(|x, y| x.total_cmp(y));
        let [r, s, t] = pts;
        if t - r < 1e-6 {
            continue;
        }
        let kappa = (t - s) / (t - r);
        let x_r = LatentState::gaussian(1, 4, rng);
        let target = split_target(field, &x_r, &[r], &[s], &[t], &[kappa]).expect("field ok");
        let u_rs = field(&x_r, &[r], &[s]).expect("field ok");
        let mut x_s = x_r.clone();
        for (v, u) in x_s.data.iter_mut().zip(&u_rs.data) {
            *v += (s - r) * u;
        }
        let u_st = field(&x_s, &[s], &[t]).expect("field ok");
        for i in 0..target.data.len() {
            let lhs = (t - r) * target.data[i];
            let rhs = (s - r) * u_rs.data[i] + (t - s) * u_st.data[i];
            worst = worst.max((lhs - rhs).abs());
        }
    }
    check("split-consistency identity", worst, 1e-12)
}

fn affine_interval_update(rng: &mut ChaCha8Rng) -> Check {
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let (a, b) = (rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0));
        let z0 = LatentState::gaussian(2, 8, rng);
        for steps in [1, 2, 3, 8, 64] {
            let z = evolve(
                |z, r, t| {
                    let mut u = z.clone();
                    for k in 0..z.batch {
                        u.sample_mut(k).fill(a + b * (r[k] + t[k]) / 2.0);
                    }
                    Ok(u)
                },
                &z0,
                steps,
                Sampler::Interval,
            )
            .expect("steps > 0");
            for (v, v0) in z.data.iter().zip(&z0.data) {
                worst = worst.max((v - (v0 + a + b / 2.0)).abs());
            }
        }
    }
    check("affine-field exact interval update", worst, 1e-10)
}

/// Miniature model of the gradient oracle.
pub fn miniature_config() -> ModelConfig {
    ModelConfig { embed_dim: 16, n_blocks: 1, n_heads: 2, ffn_multiplier: 2.0, n_channels: 2, seq_len: 8, cond_dim: 8 }
}

struct GradProblem {
    params: ModelParameters<f64>,
    x: LatentState,
    r: Vec<f64>,
    t: Vec<f64>,
    cond: Condition<f64>,
    target: Tensor<f64>,
}

impl GradProblem {
    fn new(rng: &mut ChaCha8Rng) -> Self {
        let cfg = miniature_config();
        let mut params = init_parameters::<f64>(&cfg, rng.random()).expect("valid config");
        // move off the zero-initialized gates and head so every path carries gradient
        for t in &mut params.tensors {
            for v in &mut t.data {
                *v += rng.random_range(-0.3..0.3);
            }
        }
        let batch = 3;
        let prompts: Vec<Prompt> = (0..batch)
            .map(|b| {
                let c: Vec<f64> = (0..8).map(|_| rng.random_range(1e-5..1e-1)).collect();
                make_prompt(&c, &uniform_probe_indices(2 + 2 * b, 8).expect("in range")).expect("nonempty")
            })
            .collect();
        let cond = Condition::from_prompts(&prompts.iter().collect::<Vec<_>>(), &PromptNorm { mean: -25.0, std: 8.0 }).expect("valid");
        let x = LatentState::gaussian(batch, 8, rng);
        let r = vec![0.1, 0.5, 0.7];
        let t = vec![0.4, 0.5, 0.95];
        let target = LatentState::gaussian(batch, 8, rng).to_tokens();
        Self { params, x, r, t, cond, target }
    }

    fn loss(&self, params: &ModelParameters<f64>) -> f64 {
        let mut tape = Tape::new();
        let pv = ParamVars::bind(&mut tape, params, false);
        let out = forward_tokens(&mut tape, &pv, &params.config, &self.x, &self.r, &self.t, &self.cond).expect("shapes");
        let l = tape.mse(out, self.target.clone());
        tape.value(l).data[0]
    }

    fn gradients(&self) -> Vec<Tensor<f64>> {
        let mut tape = Tape::new();
        let pv = ParamVars::bind(&mut tape, &self.params, true);
        let out = forward_tokens(&mut tape, &pv, &self.params.config, &self.x, &self.r, &self.t, &self.cond).expect("shapes");
        let l = tape.mse(out, self.target.clone());
        let mut g = tape.backward(l);
        pv.vars()
            .iter()
            .zip(&self.params.tensors)
            .map(|(&v, p)| g.take(v).unwrap_or_else(|| Tensor::zeros(p.rows, p.cols)))
            .collect()
    }
}

/// Worst relative error between reverse-mode and central-difference
/// gradients over `n_probes` random parameters of the miniature model.
pub fn gradient_check(n_probes: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let prob = GradProblem::new(&mut rng);
    let grads = prob.gradients();
    let h = 1e-5;
    let mut worst = 0.0f64;
    let total = prob.params.n_values();
    for _ in 0..n_probes {
        let mut flat = rng.random_range(0..total);
        let mut ti = 0;
        while flat >= prob.params.tensors[ti].len() {
            flat -= prob.params.tensors[ti].len();
            ti += 1;
        }
        let mut p = prob.params.clone();
        let v0 = p.tensors[ti].data[flat];
        p.tensors[ti].data[flat] = v0 + h;
        let lp = prob.loss(&p);
        p.tensors[ti].data[flat] = v0 - h;
        let lm = prob.loss(&p);
        let numeric = (lp - lm) / (2.0 * h);
        let analytic = grads[ti].data[flat];
        let scale = analytic.abs().max(numeric.abs()).max(1e-6);
        worst = worst.max((analytic - numeric).abs() / scale);
    }
    worst
}

fn adamw_oracle() -> Check {
    let mut p = vec![Tensor::from_vec(1, 1, vec![1.0f64])];
    let mut st = OptimizerState::new(&p);
    let g = vec![Tensor::from_vec(1, 1, vec![1.0f64])];
    let ok = adamw_step(&mut p, &g, &mut st, &AdamW::new(0.1, 0.0)).is_ok();
    let err = if ok { (p[0].data[0] - 0.9).abs() } else { f64::INFINITY };
    check("AdamW single-step oracle", err, 1e-9)
}

fn probe_index_sets() -> Check {
    let a = uniform_probe_indices(4, 8).ok();
    let b = uniform_probe_indices(3, 64).ok();
    let passed = a.as_deref() == Some(&[0, 2, 4, 6][..]) && b.as_deref() == Some(&[0, 21, 42][..]);
    Check { name: "uniform probe index sets", passed, detail: format!("{a:?} {b:?}") }
}

/// Runs every oracle check.
pub fn run() -> Vec<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(0xF1_0775);
    let start = Instant::now();
    let mut out = vec![
        dft_unitarity(&mut rng),
        steering_norms(&mut rng),
        mrt_round_trip(&mut rng),
        split_identity(&mut rng),
        affine_interval_update(&mut rng),
        check("gradient finite-difference agreement", gradient_check(100, 11), 1e-4),
        adamw_oracle(),
        probe_index_sets(),
    ];
    let secs = start.elapsed().as_secs_f64();
    out.push(Check { name: "suite runtime", passed: secs < 60.0, detail: format!("{secs:.2} s (limit 60 s)") });
    out
}
