//! Ablation grids: toggle overrides of a base config, each trained under
//! the same seeds and compared against the base in one CSV.
//!
//! ```toml
//! seeds = [0, 1]              # optional, defaults to the run seed
//! [[variant]]
//! name = "adam"
//! optimizer = "adam"
//! [[variant]]
//! name = "pe-off"
//! pos_embed = false
//! [lambda_sweep]
//! values = [0.0, 0.5, 1.0]
//! ```

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use anyhow::{anyhow, bail, Context, Result};
use serde::de::DeserializeOwned;
use transreid_core::numcore::ParamStore;
use transreid_core::sie::SieMode;
use transreid_core::train::EvalReport;

use crate::config::RunConfig;
use crate::dataset::LoadedData;
use crate::run;

pub const TOGGLES: &[&str] = &[
    "optimizer",
    "lr",
    "epochs",
    "pos_embed",
    "drop_path",
    "dropout",
    "attn_dropout",
    "triplet",
    "margin",
    "label_smoothing",
    "jpm",
    "rearrange",
    "use_local",
    "random_shuffle",
    "shift",
    "groups",
    "sie",
    "lambda",
    "pretrain",
    "erase_p",
];

pub const THREADS_ENV: &str = "TRANSREID_THREADS";

#[derive(Clone, Debug, PartialEq)]
pub struct Variant {
    pub name: String,
    pub config: RunConfig,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Grid {
    pub seeds: Vec<u64>,
    /// Base first.
    pub variants: Vec<Variant>,
}

fn value<T: DeserializeOwned>(key: &str, v: &toml::Value) -> Result<T> {
    v.clone().try_into().map_err(|e| anyhow!("config error: bad value {v} for toggle {key}: {e}"))
}

/// Applies one toggle table to `cfg`.
pub fn apply_toggles(cfg: &mut RunConfig, toggles: &toml::Table) -> Result<()> {
    for (key, v) in toggles {
        let m = &mut cfg.model;
        match key.as_str() {
            "optimizer" => cfg.optim.optimizer.kind = value(key, v)?,
            "lr" => cfg.optim.lr = value(key, v)?,
            "epochs" => cfg.optim.epochs = value(key, v)?,
            "pos_embed" => m.pos_embed = value(key, v)?,
            "drop_path" => m.drop_path = value(key, v)?,
            "dropout" => m.dropout = value(key, v)?,
            "attn_dropout" => m.attn_dropout = value(key, v)?,
            "triplet" => m.loss.triplet = value(key, v)?,
            "margin" => m.loss.margin = value(key, v)?,
            "label_smoothing" => m.loss.label_smoothing = value(key, v)?,
            "jpm" => m.jpm.enabled = value(key, v)?,
            "rearrange" => m.jpm.rearrange = value(key, v)?,
            "use_local" => m.jpm.use_local_at_inference = value(key, v)?,
            "random_shuffle" => m.jpm.random_shuffle = value(key, v)?,
            "shift" => m.jpm.m = value(key, v)?,
            "groups" => m.jpm.k = value(key, v)?,
            "sie" => m.sie.mode = value(key, v)?,
            "lambda" => m.sie.lambda = value(key, v)?,
            "pretrain" => cfg.pretrain.enabled = value(key, v)?,
            "erase_p" => cfg.optim.augment.erase_p = value(key, v)?,
            other => bail!("config error: unknown toggle {other:?}; valid keys: {}", TOGGLES.join(", ")),
        }
    }
    Ok(())
}

impl Grid {
    pub fn parse(base: &RunConfig, text: &str) -> Result<Self> {
        let mut table: toml::Table = toml::from_str(text)?;
        let seeds = match table.remove("seeds") {
            Some(v) => value::<Vec<u64>>("seeds", &v)?,
            None => vec![base.seed],
        };
        if seeds.is_empty() {
            bail!("config error: seeds must not be empty");
        }
        let mut variants = vec![Variant { name: "base".into(), config: base.clone() }];
        if let Some(list) = table.remove("variant") {
            let toml::Value::Array(list) = list else { bail!("config error: variant must be an array of tables") };
            for item in list {
                let toml::Value::Table(mut t) = item else { bail!("config error: each variant must be a table") };
                let name = match t.remove("name") {
                    Some(toml::Value::String(s)) => s,
                    _ => bail!("config error: every variant needs a string name"),
                };
                if name == "base" {
                    if !t.is_empty() {
                        bail!("config error: the base variant takes no toggles");
                    }
                    continue;
                }
                let mut config = base.clone();
                apply_toggles(&mut config, &t).with_context(|| format!("variant {name:?}"))?;
                config.validate().with_context(|| format!("variant {name:?}"))?;
                variants.push(Variant { name, config });
            }
        }
        if let Some(sweep) = table.remove("lambda_sweep") {
            let toml::Value::Table(mut sweep) = sweep else { bail!("config error: lambda_sweep must be a table") };
            let values: Vec<f32> = value("lambda_sweep.values", &sweep.remove("values").ok_or_else(|| anyhow!("config error: lambda_sweep needs values"))?)?;
            let mode: Option<SieMode> = sweep.remove("mode").map(|v| value("lambda_sweep.mode", &v)).transpose()?;
            if let Some(k) = sweep.keys().next() {
                bail!("config error: unknown lambda_sweep key {k:?}; valid keys: values, mode");
            }
            for l in values {
                let mut config = base.clone();
                let default_mode = if base.model.sie.mode == SieMode::Off { SieMode::Joint } else { base.model.sie.mode };
                config.model.sie.mode = mode.unwrap_or(default_mode);
                config.model.sie.lambda = l;
                config.validate().with_context(|| format!("lambda {l}"))?;
                variants.push(Variant { name: format!("lambda={l}"), config });
            }
        }
        if let Some(k) = table.keys().next() {
            bail!("config error: unknown grid key {k:?}; valid keys: seeds, variant, lambda_sweep");
        }
        Ok(Grid { seeds, variants })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunResult {
    pub variant: String,
    pub seed: u64,
    pub map: f64,
    pub r1: f64,
    pub camera_gap: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub variant: String,
    pub map: f64,
    pub r1: f64,
    pub delta_map: f64,
    pub delta_r1: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Ablation {
    pub rows: Vec<AblationRow>,
    pub runs: Vec<RunResult>,
    pub csv: PathBuf,
}

/// Worker threads from `TRANSREID_THREADS`, default 1.
pub fn thread_count() -> Result<usize> {
    match std::env::var(THREADS_ENV) {
        Ok(s) => match s.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => bail!("config error: {THREADS_ENV}={s:?} is not a positive integer"),
        },
        Err(_) => Ok(1),
    }
}

fn train_one(cfg: &RunConfig, data: &LoadedData, backbone: Option<&ParamStore>) -> Result<EvalReport> {
    let mut trainer = run::build_trainer(cfg, data, backbone)?;
    run::train_to_end(&mut trainer, data, |_, _| Ok(()))?;
    run::evaluate(cfg, &trainer.model, data, false)
}

/// Trains every variant under every grid seed and writes `ablation.csv`
/// (seed means, base first) and `runs.csv` (one row per run) to `out`,
/// with [`thread_count`] workers.
pub fn cmd_ablate(grid: &Grid, data: &LoadedData, out: &Path) -> Result<Ablation> {
    run_ablation(grid, data, out, thread_count()?)
}

/// [`cmd_ablate`] with an explicit worker count; results do not depend on it.
pub fn run_ablation(grid: &Grid, data: &LoadedData, out: &Path, threads: usize) -> Result<Ablation> {
    run_ablation_with(grid, data, out, threads, &mut HashMap::new())
}

/// [`run_ablation`] with a backbone cache keyed by [`run::backbone_key`];
/// missing backbones are pretrained and added.
pub fn run_ablation_with(grid: &Grid, data: &LoadedData, out: &Path, threads: usize, backbones: &mut HashMap<String, ParamStore>) -> Result<Ablation> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let jobs: Vec<(usize, u64)> = (0..grid.variants.len()).flat_map(|v| grid.seeds.iter().map(move |&s| (v, s))).collect();
    let job_config = |&(v, seed): &(usize, u64)| RunConfig { seed, ..grid.variants[v].config.clone() };
    for job in &jobs {
        let cfg = job_config(job);
        run::check_compatible(&cfg, data).with_context(|| format!("variant {:?}", grid.variants[job.0].name))?;
        if cfg.pretrain.enabled {
            let key = run::backbone_key(&cfg);
            if !backbones.contains_key(&key) {
                let store = run::pretrain(&cfg)?.expect("pretraining enabled");
                backbones.insert(key, store);
            }
        }
    }
    let results: Mutex<Vec<Option<Result<EvalReport>>>> = Mutex::new((0..jobs.len()).map(|_| None).collect());
    let next = AtomicUsize::new(0);
    let threads = threads.min(jobs.len()).max(1);
    let backbones = &*backbones;
    let work = || loop {
        let i = next.fetch_add(1, Ordering::Relaxed);
        let Some(job) = jobs.get(i) else { break };
        let cfg = job_config(job);
        let backbone = if cfg.pretrain.enabled { backbones.get(&run::backbone_key(&cfg)) } else { None };
        let r = train_one(&cfg, data, backbone).with_context(|| format!("variant {:?} seed {}", grid.variants[job.0].name, job.1));
        results.lock().expect("no worker panicked")[i] = Some(r);
    };
    std::thread::scope(|s| {
        for _ in 1..threads {
            s.spawn(work);
        }
        work();
    });
    let mut runs = Vec::with_capacity(jobs.len());
    for (job, r) in jobs.iter().zip(results.into_inner().expect("no worker panicked")) {
        let report = r.expect("every job ran")?;
        let name = grid.variants[job.0].name.clone();
        runs.push(RunResult { variant: name, seed: job.1, map: report.retrieval.map, r1: report.retrieval.rank(1), camera_gap: report.camera.gap() });
    }
    let n = grid.seeds.len() as f64;
    let mean = |v: usize, f: fn(&RunResult) -> f64| runs[v * grid.seeds.len()..(v + 1) * grid.seeds.len()].iter().map(f).sum::<f64>() / n;
    let (base_map, base_r1) = (mean(0, |r| r.map), mean(0, |r| r.r1));
    let rows: Vec<AblationRow> = grid
        .variants
        .iter()
        .enumerate()
        .map(|(v, var)| {
            let (map, r1) = (mean(v, |r| r.map), mean(v, |r| r.r1));
            AblationRow { variant: var.name.clone(), map, r1, delta_map: map - base_map, delta_r1: r1 - base_r1 }
        })
        .collect();
    let mut csv = String::from("variant,mAP,R1,delta_mAP,delta_R1\n");
    for r in &rows {
        let _ = writeln!(csv, "{},{:.6},{:.6},{:+.6},{:+.6}", r.variant, r.map, r.r1, r.delta_map, r.delta_r1);
    }
    let path = out.join("ablation.csv");
    fs::write(&path, csv).with_context(|| format!("writing {}", path.display()))?;
    let mut per_run = String::from("variant,seed,mAP,R1,camera_gap\n");
    for r in &runs {
        let _ = writeln!(per_run, "{},{},{},{},{}", r.variant, r.seed, r.map, r.r1, r.camera_gap);
    }
    fs::write(out.join("runs.csv"), per_run).with_context(|| format!("writing runs.csv in {}", out.display()))?;
    Ok(Ablation { rows, runs, csv: path })
}
