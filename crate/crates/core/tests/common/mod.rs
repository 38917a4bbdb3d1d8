//! Shared fixtures of the integration tests: profile loading and a trained
//! artifact cache under `target/acceptance`, keyed by everything that
//! influences training.

#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::time::Instant;

use sha2::{Digest, Sha256};

use fbbs::baselines::{train_discriminative, Discriminative};
use fbbs::checkpoint::Checkpoint;
use fbbs::config::Config;
use fbbs::sitegen::{build_dataset, generate_site, load_dataset, save_dataset, Dataset};
use fbbs::training::train;

/// Bumped whenever model or training code changes invalidate cached artifacts.
const CACHE_VERSION: u32 = 3;

pub fn workspace_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..").canonicalize().expect("workspace root")
}

/// Profile of the acceptance run: `FBBS_ACCEPTANCE_CONFIG` or `configs/ci.cfg`.
pub fn profile_path() -> PathBuf {
    match std::env::var_os("FBBS_ACCEPTANCE_CONFIG") {
        Some(p) => PathBuf::from(p),
        None => workspace_root().join("configs/ci.cfg"),
    }
}

pub struct Artifacts {
    pub profile: PathBuf,
    pub cfg: Config,
    pub ds: Dataset,
    pub sparse: Checkpoint,
    pub teacher: Checkpoint,
    pub dense: Checkpoint,
    pub discriminative: Vec<Discriminative>,
    /// Wall-clock seconds of the sparse-budget training run.
    pub train_seconds: f64,
    pub dir: PathBuf,
    pub from_cache: bool,
}

fn cache_key(cfg: &Config) -> String {
    let text = format!(
        "{CACHE_VERSION}|{:?}|{}|{}|{}|{:?}|{:?}|{:?}|{:?}|{:?}",
        cfg.site, cfg.n_users, cfg.train_fraction, cfg.data_seed, cfg.model, cfg.train, cfg.dense_budget_set, cfg.disc, cfg.sweep.budgets
    );
    let digest = Sha256::digest(text.as_bytes());
    digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
}

/// Loads the cached artifacts of `profile`, training whatever is missing.
pub fn artifacts(profile: &Path, log: impl Fn(&str)) -> Artifacts {
    let cfg = Config::load(profile, &[]).expect("profile parses");
    let stem = profile.file_stem().and_then(|s| s.to_str()).unwrap_or("profile");
    let dir = workspace_root().join("target/acceptance").join(format!("{stem}-{}", cache_key(&cfg)));
    std::fs::create_dir_all(&dir).expect("cache directory");
    let data = dir.join("data.fbbs");
    let sparse_path = dir.join("sparse.ckpt");
    let teacher_path = dir.join("sparse.ckpt.stage1");
    let dense_path = dir.join("dense.ckpt");
    let seconds_path = dir.join("train_seconds");
    let mut from_cache = true;

    let ds = if data.exists() {
        load_dataset(&data).expect("cached dataset")
    } else {
        from_cache = false;
        let site = generate_site(&cfg.site).expect("site");
        let ds = build_dataset(&site, cfg.n_users, cfg.train_fraction, cfg.data_seed).expect("dataset");
        save_dataset(&ds, &data).expect("save dataset");
        ds
    };

    if !(sparse_path.exists() && teacher_path.exists() && seconds_path.exists()) {
        from_cache = false;
        log(&format!("training sparse-budget model into {}", dir.display()));
        let start = Instant::now();
        let out = train(&ds, &cfg.model, &cfg.train, |r| log(&format!("  sparse epoch {} stage {} loss {:.4}", r.epoch, r.stage, r.loss)))
            .expect("sparse training");
        let secs = start.elapsed().as_secs_f64();
        out.checkpoint.save(&sparse_path).expect("save");
        out.teacher.save(&teacher_path).expect("save");
        std::fs::write(&seconds_path, format!("{secs:.1}\n")).expect("save timing");
    }
    if !dense_path.exists() {
        from_cache = false;
        log("training dense-budget model");
        let mut tc = cfg.train.clone();
        tc.budget_set = cfg.dense_budget_set.clone();
        let out = train(&ds, &cfg.model, &tc, |r| log(&format!("  dense epoch {} stage {} loss {:.4}", r.epoch, r.stage, r.loss)))
            .expect("dense training");
        out.checkpoint.save(&dense_path).expect("save");
    }
    let discriminative = cfg
        .sweep
        .budgets
        .iter()
        .map(|&q| {
            let path = dir.join(format!("disc.q{q}"));
            if path.exists() {
                Discriminative::load(&path).expect("cached discriminative model")
            } else {
                let m = train_discriminative(&ds, q, &cfg.disc).expect("discriminative training");
                m.save(&path).expect("save");
                m
            }
        })
        .collect();

    let train_seconds = std::fs::read_to_string(&seconds_path).expect("timing").trim().parse().expect("timing value");
    Artifacts {
        profile: profile.to_path_buf(),
        sparse: Checkpoint::load(&sparse_path).expect("load"),
        teacher: Checkpoint::load(&teacher_path).expect("load"),
        dense: Checkpoint::load(&dense_path).expect("load"),
        cfg,
        ds,
        discriminative,
        train_seconds,
        dir,
        from_cache,
    }
}
