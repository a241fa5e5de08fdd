use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use transreid_core::train::{EvalReport, Trainer};

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::dataset::LoadedData;
use crate::run;

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    pub out: PathBuf,
    pub resume: Option<PathBuf>,
    pub force: bool,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub steps: usize,
    pub report: EvalReport,
    pub final_checkpoint: PathBuf,
}

pub fn checkpoint_path(out: &Path, step: usize) -> PathBuf {
    out.join(format!("ckpt_{step:06}.ckpt"))
}

fn save(cfg_hash: &str, trainer: &Trainer, path: &Path) -> Result<()> {
    Checkpoint::capture(cfg_hash.to_string(), trainer.steps_done(), &trainer.model.store, Some(&trainer.optimizer)).save(path)
}

/// Metrics file positioned for writing from `start`: rows of earlier steps
/// are kept on resume, later rows and the final summary are dropped.
fn open_metrics(path: &Path, header: &str, start: usize) -> Result<fs::File> {
    let mut keep = vec![header.to_string()];
    if start > 0 {
        if let Ok(text) = fs::read_to_string(path) {
            let rows = text.lines().skip(1).filter(|l| !l.starts_with('#'));
            keep.extend(rows.filter(|l| l.split(',').next().and_then(|s| s.parse::<usize>().ok()).is_some_and(|s| s < start)).map(str::to_string));
        }
    }
    let mut f = fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
    for l in keep {
        writeln!(f, "{l}")?;
    }
    Ok(f)
}

/// Trains under `cfg`, writing `config.toml`, `metrics.csv` and checkpoints
/// to `opts.out`. A fresh run pretrains the backbone first (or uses
/// `backbone`); a resumed run continues from the checkpoint's step.
pub fn cmd_train(cfg: &RunConfig, data: &LoadedData, opts: &TrainOptions, backbone: Option<&transreid_core::numcore::ParamStore>) -> Result<TrainOutcome> {
    fs::create_dir_all(&opts.out).with_context(|| format!("creating {}", opts.out.display()))?;
    cfg.save(&opts.out.join("config.toml"))?;
    let hash = cfg.hash()?;
    let mut trainer = match &opts.resume {
        Some(path) => {
            let ck = Checkpoint::load(path)?;
            ck.check_hash(&hash, opts.force)?;
            let mut t = run::build_trainer(cfg, data, None)?;
            ck.restore_params(&mut t.model.store)?;
            ck.restore_optimizer(&t.model.store, &mut t.optimizer)?;
            t.set_step(ck.step)?;
            t
        }
        None => {
            let owned;
            let backbone = match backbone {
                Some(b) => Some(b),
                None => {
                    owned = run::pretrain(cfg)?;
                    owned.as_ref()
                }
            };
            run::build_trainer(cfg, data, backbone)?
        }
    };
    let metrics_path = opts.out.join("metrics.csv");
    let mut metrics = open_metrics(&metrics_path, &run::metrics_header(cfg.model.jpm.streams()), trainer.steps_done())?;
    run::train_to_end(&mut trainer, data, |t, log| {
        writeln!(metrics, "{}", run::metrics_row(log))?;
        let done = t.steps_done();
        if cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0 && !t.is_done() {
            save(&hash, t, &checkpoint_path(&opts.out, done))?;
        }
        Ok(())
    })?;
    let final_checkpoint = opts.out.join("final.ckpt");
    save(&hash, &trainer, &final_checkpoint)?;
    let report = run::evaluate(cfg, &trainer.model, data, false)?;
    writeln!(metrics, "{}", run::final_line(&report))?;
    metrics.flush()?;
    Ok(TrainOutcome { steps: trainer.steps_done(), report, final_checkpoint })
}
