use std::path::{Path, PathBuf};

use anyhow::{ensure, Result};
use transreid_core::synthdata::{camera_intensity_t, generate, SynthSpec};

use crate::dataset::{write_dataset, LoadedData};

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSummary {
    pub manifest: PathBuf,
    pub images: usize,
    pub train_ids: usize,
    pub eval_ids: usize,
    pub cameras: usize,
    pub views: usize,
    /// Largest Welch t between per-camera mean intensities.
    pub camera_t: f64,
}

impl std::fmt::Display for SynthSummary {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{} images, {} train ids, {} eval ids, {} cameras, {} views, camera intensity t {:.2}, manifest {}",
            self.images,
            self.train_ids,
            self.eval_ids,
            self.cameras,
            self.views,
            self.camera_t,
            self.manifest.display()
        )
    }
}

/// Generates `spec` and writes it under `out`.
pub fn cmd_synth(spec: &SynthSpec, out: &Path) -> Result<SynthSummary> {
    let ds = generate(spec)?;
    ds.check_splits()?;
    let data = LoadedData { images: ds.images, metas: ds.metas };
    for m in &data.metas {
        ensure!(m.camera < spec.n_cameras, "camera {} out of range for {} cameras", m.camera, spec.n_cameras);
        ensure!(m.view.is_none_or(|v| v < spec.n_views), "view {:?} out of range for {} views", m.view, spec.n_views);
    }
    let manifest = write_dataset(out, &data)?;
    Ok(SynthSummary {
        manifest,
        images: data.images.len(),
        train_ids: data.ids(transreid_core::synthdata::Split::Train).len(),
        eval_ids: data.ids(transreid_core::synthdata::Split::Query).len(),
        cameras: data.num_cameras(),
        views: data.num_views(),
        camera_t: camera_intensity_t(&data.images, &data.metas),
    })
}
