use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use transreid_core::eval::Histogram;
use transreid_core::model::TransReid;
use transreid_core::numcore::Tensor;
use transreid_core::synthdata::Split;
use transreid_core::train::EvalReport;

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::dataset::LoadedData;
use crate::run;

#[derive(Clone, Debug, Default)]
pub struct EvalOptions {
    pub out: PathBuf,
    pub checkpoint: PathBuf,
    pub global_only: bool,
    pub force: bool,
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn histogram_csv(h: &Histogram) -> String {
    let mut s = String::from("lo,hi,count\n");
    for (i, c) in h.counts.iter().enumerate() {
        let _ = writeln!(s, "{},{},{c}", h.edges[i], h.edges[i + 1]);
    }
    s
}

fn matrix_csv(t: &Tensor) -> String {
    let mut s = String::new();
    for r in 0..t.rows() {
        let row: Vec<String> = t.row(r).iter().map(|v| v.to_string()).collect();
        s.push_str(&row.join(","));
        s.push('\n');
    }
    s
}

/// Loads `opts.checkpoint` into a model built from `cfg`.
pub fn load_model(cfg: &RunConfig, checkpoint: &Path, force: bool) -> Result<TransReid> {
    let ck = Checkpoint::load(checkpoint)?;
    ck.check_hash(&cfg.hash()?, force)?;
    let mut model = TransReid::new(cfg.model, cfg.seed)?;
    ck.restore_params(&mut model.store).with_context(|| format!("loading {}", checkpoint.display()))?;
    Ok(model)
}

pub fn write_report(out: &Path, report: &EvalReport) -> Result<()> {
    let r = &report.retrieval;
    let mut cmc = String::from("rank,cmc\n");
    for (i, v) in r.cmc.iter().enumerate() {
        let _ = writeln!(cmc, "{},{v}", i + 1);
    }
    write(&out.join("cmc.csv"), &cmc)?;
    let mut map = format!("mAP {}\nR1 {}\nR5 {}\nR10 {}\nfeature_dim {}\n", r.map, r.rank(1), r.rank(5), r.rank(10), report.feature_dim);
    let _ = writeln!(map, "queries {}\nskipped {}", r.ap.len(), r.skipped);
    let _ = writeln!(map, "camera_mean_intra {}\ncamera_mean_inter {}\ncamera_gap {}", report.camera.mean_intra, report.camera.mean_inter, report.camera.gap());
    if let Some(v) = &report.view {
        let _ = writeln!(map, "view_mean_intra {}\nview_mean_inter {}\nview_gap {}", v.mean_intra, v.mean_inter, v.gap());
    }
    write(&out.join("map.txt"), &map)?;
    let mut groups = vec![("camera", &report.camera)];
    if let Some(v) = &report.view {
        groups.push(("view", v));
    }
    for (name, h) in groups {
        write(&out.join(format!("hist_{name}_inter.csv")), &histogram_csv(&h.inter))?;
        write(&out.join(format!("hist_{name}_intra.csv")), &histogram_csv(&h.intra))?;
    }
    Ok(())
}

/// Evaluates a checkpoint on the query/gallery split and writes `cmc.csv`,
/// `map.txt`, the distance histograms and `eval.attention_maps` attention
/// dumps under `opts.out`.
pub fn cmd_eval(cfg: &RunConfig, data: &LoadedData, opts: &EvalOptions) -> Result<EvalReport> {
    fs::create_dir_all(&opts.out).with_context(|| format!("creating {}", opts.out.display()))?;
    run::check_compatible(cfg, data)?;
    let model = load_model(cfg, &opts.checkpoint, opts.force)?;
    let report = run::evaluate(cfg, &model, data, opts.global_only)?;
    write_report(&opts.out, &report)?;
    if cfg.eval.attention_maps > 0 {
        let dir = opts.out.join("attention");
        fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        let queries = (0..data.metas.len()).filter(|&i| data.metas[i].split == Split::Query);
        for i in queries.take(cfg.eval.attention_maps) {
            for (b, map) in model.export_attention(&data.images[i], &data.metas[i])?.iter().enumerate() {
                let branch = if b == 0 { "global".to_string() } else { format!("local{b}") };
                write(&dir.join(format!("image{i:05}_{branch}.csv")), &matrix_csv(map))?;
            }
        }
    }
    Ok(report)
}
