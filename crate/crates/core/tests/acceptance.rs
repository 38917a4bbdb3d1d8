//! Acceptance criteria 1-9, one PASS/FAIL line each.
//!
//! The profile is `configs/ci.cfg` unless `FBBS_ACCEPTANCE_CONFIG` names
//! another (the full desk profile is `configs/desk.cfg`). Trained models are
//! cached under `target/acceptance`. Invariant criteria (1, 2, 3, 9) always
//! fail the test when red; the trend criteria (4-8) fail it only with
//! `FBBS_ACCEPTANCE_STRICT=1`, otherwise they are reported.

mod common;

use std::io::Write;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use fbbs::checkpoint::Checkpoint;
use fbbs::config::Config;
use fbbs::eval::{
    bootstrap_mean_ci, eval_noisy_prompts, mean, paired_diff, rows, sweep_budget_generalization, sweep_steps, write_csv, EvalContext,
    Evaluation, Method, GAIN_BOUND_DB,
};
use fbbs::model::{predict, Condition, LatentState};
use fbbs::probing::{make_prompt, uniform_probe_indices};
use fbbs::selftest;
use fbbs::sitegen::{build_dataset, generate_site, SiteConfig};
use fbbs::training::{full_reports, train, TrainConfig};

const N_BOOT: usize = 2000;

struct Verdict {
    id: usize,
    passed: bool,
    strict: bool,
    summary: String,
}

fn report(line: &str) {
    // bypasses the test harness capture so the lines reach the log
    let mut err = std::io::stderr();
    let _ = writeln!(err, "{line}");
}

/// Tracks every gain any evaluation produced.
#[derive(Default)]
struct Bound {
    max_gain: f64,
    n: usize,
}

impl Bound {
    fn see(&mut self, evals: &[Evaluation]) {
        for e in evals {
            for &g in &e.gains {
                self.max_gain = if self.n == 0 { g } else { self.max_gain.max(g) };
                self.n += 1;
            }
        }
    }
}

fn find<'a>(evals: &'a [Evaluation], method: Method, q: usize, m: usize, steps: usize) -> &'a Evaluation {
    evals
        .iter()
        .find(|e| e.row.method == method && e.row.q == q && e.row.m == m && e.row.steps == steps)
        .unwrap_or_else(|| panic!("missing row {} q={q} m={m} steps={steps}", method.name()))
}

fn csv_bytes(evals: &[Evaluation]) -> Vec<u8> {
    let mut buf = Vec::new();
    write_csv(&rows(evals), &mut buf).unwrap();
    buf
}

fn criterion1() -> Verdict {
    let checks = selftest::run();
    let failed: Vec<String> = checks.iter().filter(|c| !c.passed).map(|c| format!("{} ({})", c.name, c.detail)).collect();
    let runtime = checks.iter().find(|c| c.name == "suite runtime").map(|c| c.detail.clone()).unwrap_or_default();
    Verdict {
        id: 1,
        passed: failed.is_empty(),
        strict: true,
        summary: if failed.is_empty() {
            format!("analytic oracle suite, {} checks green, runtime {runtime}", checks.len())
        } else {
            format!("analytic oracle suite failures: {}", failed.join("; "))
        },
    }
}

/// Masked prompt entries must not move the output, both when they differ in
/// the raw report and when garbage is planted in the masked feature slots.
fn criterion3(ck: &Checkpoint, reports: &[Vec<f64>]) -> Verdict {
    let params = ck.weights(true);
    let n = params.config.seq_len;
    let mut rng = ChaCha8Rng::seed_from_u64(0x3A5C);
    let mut worst = 0.0f64;
    for case in 0..100 {
        let q = rng.random_range(1..n);
        let idx = uniform_probe_indices(q, n).unwrap();
        let base = &reports[rng.random_range(0..reports.len())];
        let mut other = base.clone();
        for (i, v) in other.iter_mut().enumerate() {
            if !idx.contains(&i) {
                *v = rng.random_range(0.0..1e-2);
            }
        }
        let pa = make_prompt(base, &idx).unwrap();
        let pb = make_prompt(&other, &idx).unwrap();
        let ca = Condition::<f32>::from_prompts(&[&pa], &ck.norm).unwrap();
        let mut cb = Condition::<f32>::from_prompts(&[&pb], &ck.norm).unwrap();
        if case % 2 == 1 {
            for (f, &w) in cb.features.data.iter_mut().zip(&cb.weights) {
                if w == 0.0 {
                    *f = rng.random_range(-50.0..50.0);
                }
            }
        }
        let x = LatentState::gaussian(1, n, &mut rng);
        let (a, b) = {
            let mut s = [rng.random::<f64>(), rng.random::<f64>()];
            s.sort_by(f64::total_cmp);
            (s[0], s[1])
        };
        let ya = predict(params, &x, &[a], &[b], &ca).unwrap();
        let yb = predict(params, &x, &[a], &[b], &cb).unwrap();
        let scale = ya.data.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
        let diff = ya.data.iter().zip(&yb.data).fold(0.0f64, |m, (u, v)| m.max((u - v).abs()));
        worst = worst.max(diff / scale);
    }
    Verdict {
        id: 3,
        passed: worst <= 1e-6,
        strict: true,
        summary: format!("mask invariance over 100 cases, worst relative change {worst:.2e} (limit 1e-6)"),
    }
}

/// Repeats training and an evaluation under the same seeds and thread count.
fn criterion9(a: &common::Artifacts) -> Verdict {
    let pool = rayon::ThreadPoolBuilder::new().num_threads(2).build().unwrap();
    let run = || {
        pool.install(|| {
            let ctx = EvalContext::new(&a.ds, a.cfg.sweep.n_test_users.min(64), a.cfg.sweep.seed).unwrap();
            let mut evals = ctx.eval_generative(&a.sparse, Method::Fbbs, 16, &[1, 4, 8], 1, None, true).unwrap();
            evals.extend(eval_noisy_prompts(&ctx, &a.sparse, &[None, Some(0.0)], 32, 8, 3, true).unwrap());
            evals.push(ctx.eval_exhaustive(16, Some(5.0)).unwrap());
            csv_bytes(&evals)
        })
    };
    let eval_same = run() == run();

    let site = generate_site(&SiteConfig { n_antennas: 8, ..SiteConfig::default() }).unwrap();
    let ds = build_dataset(&site, 96, 0.75, 5).unwrap();
    let mut model = a.cfg.model;
    model.embed_dim = 16;
    model.cond_dim = 16;
    model.n_blocks = 1;
    model.n_heads = 2;
    model.seq_len = 8;
    let tc = TrainConfig { max_epochs: 2, stage1_epochs: 1, budget_set: vec![2, 4], ..TrainConfig::default() };
    let bytes = || {
        let out = train(&ds, &model, &tc, |_| {}).unwrap();
        let mut buf = Vec::new();
        out.checkpoint.to_container().write(&mut buf).unwrap();
        buf
    };
    let train_same = bytes() == bytes();
    Verdict {
        id: 9,
        passed: eval_same && train_same,
        strict: true,
        summary: format!("repeated runs byte-identical: evaluation CSV {eval_same}, checkpoint {train_same}"),
    }
}

fn fmt_ci(ci: (f64, f64)) -> String {
    format!("[{:.3}, {:.3}]", ci.0, ci.1)
}

#[test]
fn acceptance_criteria() {
    let profile = common::profile_path();
    let strict_env = std::env::var("FBBS_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    let a = common::artifacts(&profile, |s| report(s));
    let cfg: &Config = &a.cfg;
    let s = &cfg.sweep;
    report(&format!(
        "acceptance profile {} ({} users, embed {} x {} blocks, {} + {} epochs, {} test users, artifacts {})",
        profile.display(),
        cfg.n_users,
        cfg.model.embed_dim,
        cfg.model.n_blocks,
        cfg.train.stage1_epochs,
        cfg.train.max_epochs - cfg.train.stage1_epochs,
        s.n_test_users,
        if a.from_cache { "cached" } else { "trained now" },
    ));

    let mut verdicts = vec![criterion1()];
    let mut bound = Bound::default();
    let eval_start = Instant::now();
    let ctx = EvalContext::new(&a.ds, s.n_test_users, s.seed).unwrap();
    let mut all_ok = true;

    // criterion 4: few-step distillation
    let (q4, m4) = (16, 8);
    let steps = sweep_steps(&ctx, &a.sparse, Some(&a.teacher), q4, &[m4], &[1, 64], true).unwrap();
    bound.see(&steps);
    let f1 = find(&steps, Method::Fbbs, q4, m4, 1).row.mean_gain_db;
    let t1 = find(&steps, Method::FlowTeacher, q4, m4, 1).row.mean_gain_db;
    let t64 = find(&steps, Method::FlowTeacher, q4, m4, 64).row.mean_gain_db;

    // criterion 5: brainstorming monotonicity
    let mut c5_ok = true;
    let mut c5_txt = Vec::new();
    for t in [1, 3] {
        let ev = ctx.eval_generative(&a.sparse, Method::Fbbs, 16, &[1, 4, 8], t, None, true).unwrap();
        bound.see(&ev);
        let (g1, g4, g8) = (&ev[0].gains, &ev[1].gains, &ev[2].gains);
        let paired = (0..g1.len()).all(|u| g8[u] >= g4[u] && g4[u] >= g1[u]);
        let lift = mean(g8) - mean(g1);
        c5_ok &= paired && lift >= 0.3;
        c5_txt.push(format!("T={t}: M1 {:.2} / M4 {:.2} / M8 {:.2} dB, paired order {paired}, M8-M1 {lift:.2} dB", mean(g1), mean(g4), mean(g8)));
    }

    // criterion 6: gain-overhead advantage at equal total overhead
    let m6 = cfg.infer.brainstorm;
    let t6 = cfg.infer.steps;
    let mut c6_ok = true;
    let mut c6_txt = Vec::new();
    for overhead in [16usize, 24] {
        let q = overhead - m6;
        let gen = ctx.eval_generative(&a.sparse, Method::Fbbs, q, &[m6], t6, None, true).unwrap();
        let ex = ctx.eval_exhaustive(overhead, None).unwrap();
        bound.see(&gen);
        bound.see(std::slice::from_ref(&ex));
        let adv = gen[0].row.mean_gain_db - ex.row.mean_gain_db;
        c6_ok &= adv >= 1.0;
        c6_txt.push(format!(
            "overhead {overhead}: F-BBS Q={q} M={m6} T={t6} {:.2} dB vs exhaustive {:.2} dB (+{adv:.2})",
            gen[0].row.mean_gain_db, ex.row.mean_gain_db
        ));
    }
    for d in &a.discriminative {
        bound.see(&[ctx.eval_discriminative(d, None).unwrap()]);
    }
    bound.see(&[ctx.eval_mrt().unwrap()]);

    // criterion 7: budget generalization
    let (m7, t7) = (s.fixed_m, s.fixed_steps);
    let (sparse, dense) = sweep_budget_generalization(&ctx, &a.sparse, &a.dense, &s.q_grid, m7, t7, true).unwrap();
    bound.see(&sparse);
    bound.see(&dense);
    let best = |ev: &[Evaluation]| ev.iter().max_by(|x, y| x.row.mean_gain_db.total_cmp(&y.row.mean_gain_db)).unwrap().row.q;
    let spread = {
        let g: Vec<f64> = sparse.iter().map(|e| e.row.mean_gain_db).collect();
        g.iter().cloned().fold(f64::MIN, f64::max) - g.iter().cloned().fold(f64::MAX, f64::min)
    };
    let q_low = *s.q_grid.iter().min().unwrap();
    let gap = |ev: &[Evaluation]| {
        let b = best(ev);
        let hi = &ev.iter().find(|e| e.row.q == b).unwrap().gains;
        let lo = &ev.iter().find(|e| e.row.q == q_low).unwrap().gains;
        paired_diff(hi, lo)
    };
    let (gs, gd) = (gap(&sparse), gap(&dense));
    let narrowing = paired_diff(&gd, &gs);
    let ci7 = bootstrap_mean_ci(&narrowing, N_BOOT, 0.05, 7);
    let c7_ok = spread <= 2.0 && ci7.1 < 0.0;

    // criterion 8: noisy prompts
    let q8 = s.noise_q;
    let mut grid: Vec<Option<f64>> = vec![None];
    grid.extend([25.0, 20.0, 15.0, 10.0, 5.0, 0.0, -5.0].map(Some));
    let noisy = eval_noisy_prompts(&ctx, &a.sparse, &grid, q8, 8, 3, true).unwrap();
    bound.see(&noisy);
    let mut c8_ok = true;
    let mut worst_rise = f64::MIN;
    for w in noisy[1..].windows(2) {
        let rise = paired_diff(&w[1].gains, &w[0].gains);
        let ci = bootstrap_mean_ci(&rise, N_BOOT, 0.05, 8);
        worst_rise = worst_rise.max(ci.0);
        c8_ok &= ci.0 <= 0.0;
    }
    let fresh = EvalContext::new(&a.ds, s.n_test_users, s.seed).unwrap();
    let clean = fresh.eval_generative(&a.sparse, Method::Fbbs, q8, &[8], 3, None, true).unwrap();
    let exact = clean[0].gains == noisy[0].gains;
    c8_ok &= exact;
    let eval_seconds = eval_start.elapsed().as_secs_f64();

    let runtime = a.train_seconds + eval_seconds;
    let c4_ok = (f1 - t64).abs() <= 1.0 && f1 - t1 >= 1.0 && runtime < 3600.0;
    verdicts.push(Verdict {
        id: 4,
        passed: c4_ok,
        strict: false,
        summary: format!(
            "Q=16 M=8: F-BBS T=1 {f1:.2} dB, teacher T=64 {t64:.2} dB (|diff| {:.2}, limit 1.0), teacher T=1 {t1:.2} dB (lift {:.2}, need 1.0); train+eval {:.0} s (limit 3600)",
            (f1 - t64).abs(),
            f1 - t1,
            runtime
        ),
    });
    verdicts.push(Verdict { id: 5, passed: c5_ok, strict: false, summary: c5_txt.join("; ") });
    verdicts.push(Verdict { id: 6, passed: c6_ok, strict: false, summary: c6_txt.join("; ") });
    verdicts.push(Verdict {
        id: 7,
        passed: c7_ok,
        strict: false,
        summary: format!(
            "sparse model over Q {:?}: {} (spread {spread:.2} dB, limit 2.0); low-Q gap sparse {:.2} dB vs dense {:.2} dB, gap change 95% CI {}",
            s.q_grid,
            sparse.iter().map(|e| format!("{:.2}", e.row.mean_gain_db)).collect::<Vec<_>>().join("/"),
            mean(&gs),
            mean(&gd),
            fmt_ci(ci7)
        ),
    });
    verdicts.push(Verdict {
        id: 8,
        passed: c8_ok,
        strict: false,
        summary: format!(
            "Q={q8} M=8 T=3 over SNR 25..-5: {} dB, largest rise CI lower bound {worst_rise:.3}; noiseless row reproduced exactly {exact}",
            noisy[1..].iter().map(|e| format!("{:.2}", e.row.mean_gain_db)).collect::<Vec<_>>().join("/")
        ),
    });

    let reports = full_reports(&a.ds).unwrap();
    verdicts.push(criterion3(&a.sparse, &reports));
    verdicts.push(Verdict {
        id: 2,
        passed: bound.n > 0 && bound.max_gain <= GAIN_BOUND_DB,
        strict: true,
        summary: format!("constant-modulus bound over {} gains, max {:.3e} dB (limit 1e-9)", bound.n, bound.max_gain),
    });
    verdicts.push(criterion9(&a));
    verdicts.sort_by_key(|v| v.id);

    let mut log = String::new();
    for v in &verdicts {
        let line = format!("criterion {} {}: {}", v.id, if v.passed { "PASS" } else { "FAIL" }, v.summary);
        report(&line);
        log.push_str(&line);
        log.push('\n');
        if !v.passed && (v.strict || strict_env) {
            all_ok = false;
        }
    }
    let _ = std::fs::write(a.dir.join("acceptance_report.txt"), log);
    assert!(all_ok, "acceptance criteria failed (see lines above)");
}

#[test]
#[ignore = "trains the models of the acceptance profile; run once to fill the cache"]
fn prepare_artifacts() {
    let a = common::artifacts(&common::profile_path(), |s| eprintln!("{s}"));
    eprintln!("artifacts ready in {} (training {:.0} s)", a.dir.display(), a.train_seconds);
}
