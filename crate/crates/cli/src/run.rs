//! Pieces shared by the commands: data loading, pretraining, trainer setup
//! and the metrics log format.

use std::path::Path;

use anyhow::{bail, Context, Result};
use transreid_core::model::TransReid;
use transreid_core::numcore::ParamStore;
use transreid_core::synthdata::generate;
use transreid_core::train::{evaluate_model, pretrain_backbone, EvalReport, StepLog, Trainer};

use crate::config::{check_data_dims, check_side_info, RunConfig};
use crate::dataset::{read_manifest, LoadedData};

/// Loads the manifest (the override first, then the config's) or generates
/// the configured synthetic set, and checks it against the model.
pub fn load_data(cfg: &RunConfig, manifest: Option<&Path>) -> Result<LoadedData> {
    let manifest = manifest.or(cfg.data.manifest.as_deref());
    let data = match manifest {
        Some(path) => read_manifest(path)?,
        None => {
            let ds = generate(&cfg.data.synth)?;
            LoadedData { images: ds.images, metas: ds.metas }
        }
    };
    check_compatible(cfg, &data)?;
    Ok(data)
}

pub fn check_compatible(cfg: &RunConfig, data: &LoadedData) -> Result<()> {
    let (h, w, c) = data.dims().context("dataset is empty")?;
    check_data_dims(&cfg.model, h, w, c)?;
    check_side_info(&cfg.model, data.num_cameras(), data.num_views())?;
    let train_ids = data.ids(transreid_core::synthdata::Split::Train).len();
    if train_ids != cfg.model.num_ids {
        bail!("config error: model.num_ids = {} but the data has {train_ids} training identities", cfg.model.num_ids);
    }
    Ok(())
}

/// Key under which a pretrained backbone can be shared between runs.
pub fn backbone_key(cfg: &RunConfig) -> String {
    let p = &cfg.pretrain;
    let o = &cfg.optim;
    format!("{:?}", (p.model_config(&cfg.model), p, p.data_spec(&cfg.data.synth), o.augment, o.p, o.k))
}

/// Runs backbone pretraining if the config enables it.
pub fn pretrain(cfg: &RunConfig) -> Result<Option<ParamStore>> {
    if !cfg.pretrain.enabled {
        return Ok(None);
    }
    let s = &cfg.data.synth;
    check_data_dims(&cfg.model, s.height, s.width, s.channels).context("pretraining data follows data.synth")?;
    let store = pretrain_backbone(&cfg.model, &cfg.pretrain, &cfg.data.synth, &cfg.optim).context("pretraining the backbone")?;
    Ok(Some(store))
}

/// Fresh model under `cfg.seed`, optionally started from `backbone`.
pub fn build_trainer(cfg: &RunConfig, data: &LoadedData, backbone: Option<&ParamStore>) -> Result<Trainer> {
    let mut model = TransReid::new(cfg.model, cfg.seed)?;
    if let Some(b) = backbone {
        model.load_backbone(b)?;
    }
    Ok(Trainer::new(model, cfg.optim, &data.metas, cfg.seed)?)
}

pub fn evaluate(cfg: &RunConfig, model: &TransReid, data: &LoadedData, global_only: bool) -> Result<EvalReport> {
    Ok(evaluate_model(model, &data.images, &data.metas, global_only, cfg.eval.metric, cfg.eval.bins)?)
}

/// Trains to completion, handing each step to `on_step`.
pub fn train_to_end(trainer: &mut Trainer, data: &LoadedData, mut on_step: impl FnMut(&Trainer, &StepLog) -> Result<()>) -> Result<()> {
    while !trainer.is_done() {
        let log = trainer.train_step(&data.images, &data.metas).context("training aborted")?;
        on_step(trainer, &log)?;
    }
    Ok(())
}

/// `step,lr,total_loss,id_loss,triplet_loss` for the global stream, then
/// `id_loss_l{j},triplet_loss_l{j}` for each local stream.
pub fn metrics_header(streams: usize) -> String {
    let mut cols = vec!["step".to_string(), "lr".into(), "total_loss".into(), "id_loss".into(), "triplet_loss".into()];
    for j in 1..streams {
        cols.push(format!("id_loss_l{j}"));
        cols.push(format!("triplet_loss_l{j}"));
    }
    cols.join(",")
}

pub fn metrics_row(log: &StepLog) -> String {
    let mut row = format!("{},{},{}", log.step, log.lr, log.total);
    for (id, tri) in &log.streams {
        row.push_str(&format!(",{id},{tri}"));
    }
    row
}

/// Summary line appended to the metrics log after the final evaluation.
pub fn final_line(report: &EvalReport) -> String {
    let r = &report.retrieval;
    let mut line = format!(
        "# final mAP={} R1={} R5={} R10={} feature_dim={} camera_gap={}",
        r.map,
        r.rank(1),
        r.rank(5),
        r.rank(10),
        report.feature_dim,
        report.camera.gap()
    );
    if let Some(v) = &report.view {
        line.push_str(&format!(" view_gap={}", v.gap()));
    }
    line
}
