use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use fbbs::baselines::{train_discriminative, Discriminative};
use fbbs::checkpoint::{file_digest, Checkpoint};
use fbbs::config::Config;
use fbbs::eval::{
    eval_noisy_prompts, infer_users, rows, sweep_budget_generalization, sweep_overhead, sweep_steps, write_csv, write_user_csv, EvalContext,
    Evaluation, Method,
};
use fbbs::sitegen::{build_dataset, generate_site, load_dataset, save_dataset, Dataset};
use fbbs::training::{train, write_loss_csv};
use fbbs::{selftest, Error, Result};

#[derive(Parser)]
#[command(name = "fbbs", version, about = "Few-step generative beam selection from partial RSRP probing")]
struct Cli {
    /// Worker threads for evaluation (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Configuration profile; built-in defaults when absent.
    #[arg(long)]
    config: Option<PathBuf>,
    /// `key=value` override applied after the profile, repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Sets every seed (training, inference, evaluation).
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a site and its user dataset.
    GenData(Common),
    /// Train F-BBS (writes `<out>`, the `<out>.stage1` teacher and `<out>.loss.csv`).
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// Train with the dense budget set.
        #[arg(long)]
        dense: bool,
        /// Instead train one discriminative regressor per sweep budget, saved as `<out>.q<Q>`.
        #[arg(long, conflicts_with = "dense")]
        discriminative: bool,
    },
    /// Per-user beam selection with the inference settings of the config.
    Infer(EvalArgs),
    /// F-BBS, exhaustive, genie and discriminative rows at the inference settings.
    Eval {
        #[command(flatten)]
        args: EvalArgs,
        #[arg(long = "disc")]
        disc: Vec<PathBuf>,
    },
    /// Gain versus total overhead.
    SweepOverhead {
        #[command(flatten)]
        args: EvalArgs,
        #[arg(long = "disc")]
        disc: Vec<PathBuf>,
    },
    /// Gain versus generation steps for F-BBS and the flow teacher.
    SweepSteps {
        #[command(flatten)]
        args: EvalArgs,
        /// Defaults to `<checkpoint>.stage1` when that file exists.
        #[arg(long)]
        teacher: Option<PathBuf>,
    },
    /// Gain versus prompt SNR.
    EvalNoise(EvalArgs),
    /// Sparse- and dense-budget models across the budget grid (writes `<out>` and `<out>.dense`).
    EvalBudgets {
        #[command(flatten)]
        args: EvalArgs,
        #[arg(long)]
        dense: PathBuf,
    },
    /// Analytic-oracle invariant suite.
    Selftest,
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn load_config(c: &Common) -> Result<Config> {
    let mut overrides = c.set.clone();
    if let Some(seed) = c.seed {
        overrides.push(format!("seed={seed}"));
    }
    match &c.config {
        Some(path) => Config::load(path, &overrides),
        None => Config::from_str_with("", &overrides),
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    Ok(BufWriter::new(File::create(path)?))
}

fn write_rows(path: &Path, evals: &[Evaluation]) -> Result<()> {
    let mut w = create(path)?;
    write_csv(&rows(evals), &mut w)?;
    w.flush()?;
    Ok(())
}

/// JSON sidecar recording inputs, outputs and their digests.
fn write_manifest(verb: &str, c: &Common, threads: Option<usize>, inputs: &[&Path], outputs: &[&Path]) -> Result<()> {
    let digests = |paths: &[&Path]| -> Result<serde_json::Value> {
        let mut m = serde_json::Map::new();
        for p in paths {
            m.insert(p.display().to_string(), json!(file_digest(p)?));
        }
        Ok(serde_json::Value::Object(m))
    };
    let config = match &c.config {
        Some(p) => json!({ "path": p.display().to_string(), "sha256": file_digest(p)? }),
        None => json!(null),
    };
    let manifest = json!({
        "command": verb,
        "version": env!("CARGO_PKG_VERSION"),
        "config": config,
        "overrides": c.set,
        "seed": c.seed,
        "threads": threads.unwrap_or_else(rayon::current_num_threads),
        "inputs": digests(inputs)?,
        "outputs": digests(outputs)?,
    });
    let path = with_suffix(&c.out, ".manifest.json");
    let mut w = create(&path)?;
    serde_json::to_writer_pretty(&mut w, &manifest).map_err(|e| Error::Format(e.to_string()))?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

struct Loaded {
    cfg: Config,
    ds: Dataset,
    ck: Checkpoint,
}

fn load_eval(a: &EvalArgs) -> Result<Loaded> {
    let cfg = load_config(&a.common)?;
    let ds = load_dataset(&a.data)?;
    let ck = Checkpoint::load(&a.checkpoint)?;
    Ok(Loaded { cfg, ds, ck })
}

fn context<'a>(cfg: &Config, ds: &'a Dataset) -> Result<EvalContext<'a>> {
    cfg.sweep.validate(ds.n_antennas)?;
    EvalContext::new(ds, cfg.sweep.n_test_users, cfg.sweep.seed)
}

fn load_discs(paths: &[PathBuf]) -> Result<Vec<Discriminative>> {
    paths.iter().map(|p| Discriminative::load(p)).collect()
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    }
    let threads = cli.threads;
    match cli.command {
        Command::GenData(c) => {
            let cfg = load_config(&c)?;
            let site = generate_site(&cfg.site)?;
            let ds = build_dataset(&site, cfg.n_users, cfg.train_fraction, cfg.data_seed)?;
            save_dataset(&ds, &c.out)?;
            eprintln!("{} users ({} train) written to {}", ds.len(), ds.train_count, c.out.display());
            write_manifest("gen-data", &c, threads, &[], &[&c.out])
        }
        Command::Train { common: c, data, dense, discriminative } => {
            let mut cfg = load_config(&c)?;
            let ds = load_dataset(&data)?;
            if discriminative {
                let mut outs = Vec::new();
                for &q in &cfg.sweep.budgets {
                    let model = train_discriminative(&ds, q, &cfg.disc)?;
                    let path = with_suffix(&c.out, &format!(".q{q}"));
                    model.save(&path)?;
                    eprintln!("discriminative Q={q} written to {}", path.display());
                    outs.push(path);
                }
                let outs: Vec<&Path> = outs.iter().map(|p| p.as_path()).collect();
                return write_manifest("train", &c, threads, &[&data], &outs);
            }
            if dense {
                cfg.train.budget_set = cfg.dense_budget_set.clone();
            }
            cfg.validate()?;
            let out = train(&ds, &cfg.model, &cfg.train, |r| eprintln!("epoch {:>4} stage {} loss {:.6}", r.epoch, r.stage, r.loss))?;
            let teacher = with_suffix(&c.out, ".stage1");
            let loss = with_suffix(&c.out, ".loss.csv");
            out.checkpoint.save(&c.out)?;
            out.teacher.save(&teacher)?;
            let mut w = create(&loss)?;
            write_loss_csv(&out.history, &mut w)?;
            w.flush()?;
            write_manifest("train", &c, threads, &[&data], &[&c.out, &teacher, &loss])
        }
        Command::Infer(a) => {
            let Loaded { cfg, ds, ck } = load_eval(&a)?;
            let ctx = context(&cfg, &ds)?;
            let results = infer_users(&ctx, &ck, &cfg.infer)?;
            let mut w = create(&a.common.out)?;
            write_user_csv(&results, &mut w)?;
            w.flush()?;
            let mean = results.iter().map(|r| r.gain_db).sum::<f64>() / results.len() as f64;
            eprintln!("{} users, mean normalized gain {mean:.3} dB", results.len());
            write_manifest("infer", &a.common, threads, &[&a.data, &a.checkpoint], &[&a.common.out])
        }
        Command::Eval { args: a, disc } => {
            let Loaded { cfg, ds, ck } = load_eval(&a)?;
            let ctx = context(&cfg, &ds)?;
            let i = &cfg.infer;
            let mut evals = vec![ctx.eval_mrt()?, ctx.eval_exhaustive(i.probe_budget, i.prompt_snr_db)?];
            evals.extend(ctx.eval_generative(&ck, Method::Fbbs, i.probe_budget, &[i.brainstorm], i.steps, i.prompt_snr_db, i.use_ema)?);
            for d in load_discs(&disc)? {
                evals.push(ctx.eval_discriminative(&d, i.prompt_snr_db)?);
            }
            write_rows(&a.common.out, &evals)?;
            let mut inputs: Vec<&Path> = vec![&a.data, &a.checkpoint];
            inputs.extend(disc.iter().map(|p| p.as_path()));
            write_manifest("eval", &a.common, threads, &inputs, &[&a.common.out])
        }
        Command::SweepOverhead { args: a, disc } => {
            let Loaded { cfg, ds, ck } = load_eval(&a)?;
            let ctx = context(&cfg, &ds)?;
            let s = &cfg.sweep;
            let evals = sweep_overhead(&ctx, &ck, &load_discs(&disc)?, &s.budgets, &s.brainstorm, &s.overhead_steps, cfg.infer.use_ema)?;
            write_rows(&a.common.out, &evals)?;
            let mut inputs: Vec<&Path> = vec![&a.data, &a.checkpoint];
            inputs.extend(disc.iter().map(|p| p.as_path()));
            write_manifest("sweep-overhead", &a.common, threads, &inputs, &[&a.common.out])
        }
        Command::SweepSteps { args: a, teacher } => {
            let Loaded { cfg, ds, ck } = load_eval(&a)?;
            let ctx = context(&cfg, &ds)?;
            let teacher = teacher.or_else(|| Some(with_suffix(&a.checkpoint, ".stage1")).filter(|p| p.exists()));
            let teacher_ck = teacher.as_deref().map(Checkpoint::load).transpose()?;
            let s = &cfg.sweep;
            let evals = sweep_steps(&ctx, &ck, teacher_ck.as_ref(), s.fixed_q, &s.brainstorm, &s.steps, cfg.infer.use_ema)?;
            write_rows(&a.common.out, &evals)?;
            let mut inputs: Vec<&Path> = vec![&a.data, &a.checkpoint];
            inputs.extend(teacher.as_deref());
            write_manifest("sweep-steps", &a.common, threads, &inputs, &[&a.common.out])
        }
        Command::EvalNoise(a) => {
            let Loaded { cfg, ds, ck } = load_eval(&a)?;
            let ctx = context(&cfg, &ds)?;
            let s = &cfg.sweep;
            let evals = eval_noisy_prompts(&ctx, &ck, &s.snr_db, s.noise_q, s.fixed_m, s.fixed_steps, cfg.infer.use_ema)?;
            write_rows(&a.common.out, &evals)?;
            write_manifest("eval-noise", &a.common, threads, &[&a.data, &a.checkpoint], &[&a.common.out])
        }
        Command::EvalBudgets { args: a, dense } => {
            let Loaded { cfg, ds, ck } = load_eval(&a)?;
            let dense_ck = Checkpoint::load(&dense)?;
            let ctx = context(&cfg, &ds)?;
            let s = &cfg.sweep;
            let (sparse_rows, dense_rows) =
                sweep_budget_generalization(&ctx, &ck, &dense_ck, &s.q_grid, s.fixed_m, s.fixed_steps, cfg.infer.use_ema)?;
            let dense_out = with_suffix(&a.common.out, ".dense");
            write_rows(&a.common.out, &sparse_rows)?;
            write_rows(&dense_out, &dense_rows)?;
            write_manifest("eval-budgets", &a.common, threads, &[&a.data, &a.checkpoint, &dense], &[&a.common.out, &dense_out])
        }
        Command::Selftest => {
            let checks = selftest::run();
            for c in &checks {
                println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
            }
            let failed = checks.iter().filter(|c| !c.passed).count();
            if failed > 0 {
                return Err(Error::Invariant(format!("{failed} selftest check(s) failed")));
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
