//! Side information embeddings: a learnable row per camera, viewpoint or
//! (camera, viewpoint) pair, scaled by λ and added to every token of an
//! image.

use alloc::vec::Vec;

use crate::embed::{trunc_normal_tensor, PatchSequence};
use crate::error::{bail, Result};
use crate::numcore::{Graph, SeededRng, Tensor, Var};
use crate::synthdata::SampleMeta;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "kebab-case"))]
pub enum SieMode {
    Off,
    CameraOnly,
    ViewOnly,
    /// One row per (camera, viewpoint) pair.
    Joint,
    /// `S_C[r] + S_V[q]` from two separate tables.
    SumBaseline,
}

impl SieMode {
    pub fn needs_view(self) -> bool {
        matches!(self, SieMode::ViewOnly | SieMode::Joint | SieMode::SumBaseline)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct SieConfig {
    pub mode: SieMode,
    pub lambda: f32,
    pub n_cameras: usize,
    pub n_views: usize,
}

impl Default for SieConfig {
    fn default() -> Self {
        SieConfig { mode: SieMode::Joint, lambda: 2.0, n_cameras: 8, n_views: 4 }
    }
}

impl SieConfig {
    pub fn off() -> Self {
        SieConfig { mode: SieMode::Off, lambda: 0.0, n_cameras: 1, n_views: 1 }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) {
            bail!(Config, "SIE lambda must be >= 0, got {}", self.lambda);
        }
        if self.mode != SieMode::Off && (self.n_cameras == 0 || self.n_views == 0) {
            bail!(Config, "SIE needs at least one camera and one viewpoint");
        }
        Ok(())
    }

    /// Rows of the embedding table; 0 when off.
    pub fn rows(&self) -> usize {
        match self.mode {
            SieMode::Off => 0,
            SieMode::CameraOnly => self.n_cameras,
            SieMode::ViewOnly => self.n_views,
            SieMode::Joint => self.n_cameras * self.n_views,
            SieMode::SumBaseline => self.n_cameras + self.n_views,
        }
    }

    /// Table rows summed for one image.
    pub fn rows_for(&self, meta: &SampleMeta) -> Result<Vec<usize>> {
        let cam = meta.camera;
        if self.mode != SieMode::Off && self.mode != SieMode::ViewOnly && cam >= self.n_cameras {
            bail!(Index, "camera id {cam} out of range for {} cameras", self.n_cameras);
        }
        let view = || -> Result<usize> {
            let Some(q) = meta.view else {
                bail!(Contract, "SIE mode {:?} needs a viewpoint id", self.mode);
            };
            if q >= self.n_views {
                bail!(Index, "viewpoint id {q} out of range for {} views", self.n_views);
            }
            Ok(q)
        };
        Ok(match self.mode {
            SieMode::Off => Vec::new(),
            SieMode::CameraOnly => alloc::vec![cam],
            SieMode::ViewOnly => alloc::vec![view()?],
            SieMode::Joint => alloc::vec![sie_index(cam, view()?, self.n_cameras, self.n_views)?],
            SieMode::SumBaseline => alloc::vec![cam, self.n_cameras + view()?],
        })
    }
}

/// Joint-table row `r·N_V + q`.
pub fn sie_index(camera: usize, view: usize, n_cameras: usize, n_views: usize) -> Result<usize> {
    if camera >= n_cameras {
        bail!(Index, "camera id {camera} out of range for {n_cameras} cameras");
    }
    if view >= n_views {
        bail!(Index, "viewpoint id {view} out of range for {n_views} views");
    }
    Ok(camera * n_views + view)
}

/// A side-information table together with its configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct SieTable {
    pub config: SieConfig,
    /// `[rows, D]`; empty when off.
    pub table: Tensor,
}

/// Truncated-normal (std 0.02, ±2σ) initialisation.
pub fn init_sie(config: SieConfig, dim: usize, rng: &mut SeededRng) -> Result<SieTable> {
    config.validate()?;
    let table = trunc_normal_tensor(&[config.rows(), dim], rng);
    Ok(SieTable { config, table })
}

/// `Z₀' = Z₀ + λ·S[row(meta)]`, the same row added to all `N+1` tokens of
/// each sample. Off mode and `λ = 0` return `seq` untouched.
pub fn apply_sie(g: &mut Graph, seq: PatchSequence, table: Option<Var>, config: &SieConfig, metas: &[SampleMeta]) -> Result<PatchSequence> {
    if metas.len() != seq.batch {
        bail!(Dimension, "{} metas for a batch of {}", metas.len(), seq.batch);
    }
    if config.mode == SieMode::Off || config.lambda == 0.0 {
        // ids are still validated so a zero-λ run fails the same way
        for m in metas {
            config.rows_for(m)?;
        }
        return Ok(seq);
    }
    let Some(table) = table else {
        bail!(Contract, "SIE mode {:?} without a table", config.mode);
    };
    let t = seq.seq_len();
    let per_sample: Vec<Vec<usize>> = metas.iter().map(|m| config.rows_for(m)).collect::<Result<_>>()?;
    let terms = per_sample[0].len();
    let mut side = None;
    for term in 0..terms {
        let idx: Vec<usize> = per_sample.iter().flat_map(|rows| core::iter::repeat_n(rows[term], t)).collect();
        let rows = g.gather_rows(table, idx)?;
        side = Some(match side {
            None => rows,
            Some(acc) => g.add(acc, rows)?,
        });
    }
    let side = side.expect("active SIE mode selects at least one row");
    let scaled = g.scale(side, config.lambda)?;
    let tokens = g.add(seq.tokens, scaled)?;
    Ok(PatchSequence { tokens, ..seq })
}
