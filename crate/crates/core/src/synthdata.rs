//! Synthetic re-identification data with controllable camera and viewpoint
//! bias, the PK identity sampler and train-time augmentation.
//!
//! An identity is a grid of coloured cells whose colours are a permutation
//! of one shared palette plus a small per-identity tint, so telling two
//! identities apart depends on where each colour sits. Cameras apply a
//! per-channel gain and offset; viewpoints apply one of `n_views` fixed
//! affine warps.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{bail, Result};
use crate::numcore::{SeededRng, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum Split {
    Train,
    Query,
    Gallery,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Query => "query",
            Split::Gallery => "gallery",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "train" => Split::Train,
            "query" => Split::Query,
            "gallery" => Split::Gallery,
            _ => bail!(Config, "unknown split {s:?}"),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SampleMeta {
    pub identity: usize,
    pub camera: usize,
    pub view: Option<usize>,
    pub split: Split,
}

#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct SynthSpec {
    /// Identities used for training; labels `0..train_ids`.
    pub train_ids: usize,
    /// Identities split into query and gallery; labels follow the train ids.
    pub eval_ids: usize,
    pub images_per_id: usize,
    /// Leading images of each eval identity that become queries.
    pub queries_per_id: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub n_cameras: usize,
    pub n_views: usize,
    pub camera_bias: f32,
    pub view_bias: f32,
    /// Std of per-pixel Gaussian noise.
    pub noise: f32,
    /// Std of the per-identity tint added to palette colours.
    pub tint: f32,
    pub cell_rows: usize,
    pub cell_cols: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            train_ids: 20,
            eval_ids: 10,
            images_per_id: 16,
            queries_per_id: 2,
            height: 64,
            width: 32,
            channels: 3,
            n_cameras: 8,
            n_views: 4,
            camera_bias: 0.5,
            view_bias: 0.5,
            noise: 0.05,
            tint: 0.08,
            cell_rows: 4,
            cell_cols: 2,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn num_ids(&self) -> usize {
        self.train_ids + self.eval_ids
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_ids() < 2 {
            bail!(Config, "need at least 2 identities, got {}", self.num_ids());
        }
        if self.n_cameras == 0 || self.n_views == 0 {
            bail!(Config, "need at least one camera and one viewpoint");
        }
        if self.height == 0 || self.width == 0 || self.channels == 0 {
            bail!(Config, "image extents must be positive");
        }
        if self.cell_rows == 0 || self.cell_cols == 0 || self.cell_rows > self.height || self.cell_cols > self.width {
            bail!(Config, "cell grid {}x{} does not fit the image", self.cell_rows, self.cell_cols);
        }
        if self.images_per_id == 0 {
            bail!(Config, "images_per_id must be positive");
        }
        if self.eval_ids > 0 && self.queries_per_id >= self.images_per_id {
            bail!(Config, "queries_per_id {} leaves no gallery images", self.queries_per_id);
        }
        for (name, v) in [("camera_bias", self.camera_bias), ("view_bias", self.view_bias), ("noise", self.noise), ("tint", self.tint)] {
            if !(v >= 0.0) {
                bail!(Config, "{name} must be >= 0, got {v}");
            }
        }
        Ok(())
    }
}

/// Images in `[H, W, C]` layout, aligned with their metas.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub spec: SynthSpec,
    pub images: Vec<Tensor>,
    pub metas: Vec<SampleMeta>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.metas[i].split == split).collect()
    }

    /// Checks that query and gallery cover the same identities and that
    /// no train identity appears in either.
    pub fn check_splits(&self) -> Result<()> {
        let ids = |s: Split| {
            let mut v: Vec<usize> = self.metas.iter().filter(|m| m.split == s).map(|m| m.identity).collect();
            v.sort_unstable();
            v.dedup();
            v
        };
        let (train, query, gallery) = (ids(Split::Train), ids(Split::Query), ids(Split::Gallery));
        if query != gallery {
            bail!(Contract, "query and gallery identity sets differ");
        }
        if let Some(id) = query.iter().find(|i| train.binary_search(i).is_ok()) {
            bail!(Contract, "identity {id} is in both train and eval splits");
        }
        Ok(())
    }
}

const PALETTE_STREAM: u64 = 0x5041_4c45;
const CAMERA_STREAM: u64 = 0x4341_4d45;
const VIEW_STREAM: u64 = 0x5649_4557;

struct CameraShift {
    gain: Vec<f32>,
    offset: Vec<f32>,
}

/// Inverse affine map from output to source pixel coordinates, relative to
/// the image centre.
#[derive(Clone, Copy)]
struct Warp {
    a: [f32; 4],
    t: [f32; 2],
}

fn view_warps(spec: &SynthSpec) -> Vec<Warp> {
    let mut rng = SeededRng::derived(spec.seed, VIEW_STREAM);
    (0..spec.n_views)
        .map(|q| {
            if q == 0 && spec.n_views > 1 {
                // keep one canonical view
                return Warp { a: [1.0, 0.0, 0.0, 1.0], t: [0.0, 0.0] };
            }
            let s = spec.view_bias;
            let angle = s * rng.uniform_range(-0.35, 0.35);
            let shear = s * rng.uniform_range(-0.4, 0.4);
            let scale = 1.0 + s * rng.uniform_range(-0.25, 0.25);
            let (sin, cos) = (libm::sinf(angle), libm::cosf(angle));
            let t = [s * rng.uniform_range(-0.12, 0.12) * spec.height as f32, s * rng.uniform_range(-0.12, 0.12) * spec.width as f32];
            Warp { a: [cos * scale, (-sin + shear) * scale, sin * scale, cos * scale], t }
        })
        .collect()
}

fn camera_shifts(spec: &SynthSpec) -> Vec<CameraShift> {
    let mut rng = SeededRng::derived(spec.seed, CAMERA_STREAM);
    (0..spec.n_cameras)
        .map(|_| {
            let s = spec.camera_bias;
            let level = rng.uniform_range(-0.3, 0.3);
            let gain = (0..spec.channels).map(|_| 1.0 + s * rng.uniform_range(-0.4, 0.4)).collect();
            let offset = (0..spec.channels).map(|_| s * (level + rng.uniform_range(-0.15, 0.15))).collect();
            CameraShift { gain, offset }
        })
        .collect()
}

fn palette(spec: &SynthSpec) -> Vec<Vec<f32>> {
    let mut rng = SeededRng::derived(spec.seed, PALETTE_STREAM);
    (0..spec.cell_rows * spec.cell_cols).map(|_| (0..spec.channels).map(|_| rng.uniform_range(0.1, 0.9)).collect()).collect()
}

fn identity_template(spec: &SynthSpec, palette: &[Vec<f32>], rng: &mut SeededRng) -> Tensor {
    let cells = spec.cell_rows * spec.cell_cols;
    let mut order: Vec<usize> = (0..cells).collect();
    rng.shuffle(&mut order);
    let colours: Vec<Vec<f32>> = order.iter().map(|&p| palette[p].iter().map(|&v| v + spec.tint * rng.normal()).collect()).collect();
    let (h, w, c) = (spec.height, spec.width, spec.channels);
    Tensor::from_fn(&[h, w, c], |i| {
        let (y, x, ch) = (i / (w * c), (i / c) % w, i % c);
        let cell = (y * spec.cell_rows / h) * spec.cell_cols + x * spec.cell_cols / w;
        colours[cell][ch]
    })
}

fn sample_bilinear(img: &Tensor, y: f32, x: f32, ch: usize) -> f32 {
    let (h, w, c) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    let y = y.clamp(0.0, (h - 1) as f32);
    let x = x.clamp(0.0, (w - 1) as f32);
    let (y0, x0) = (y as usize, x as usize);
    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
    let (fy, fx) = (y - y0 as f32, x - x0 as f32);
    let d = img.data();
    let at = |yy: usize, xx: usize| d[(yy * w + xx) * c + ch];
    let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
    let bottom = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
    top * (1.0 - fy) + bottom * fy
}

fn warp_image(img: &Tensor, warp: &Warp) -> Tensor {
    let (h, w, c) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    let (cy, cx) = ((h as f32 - 1.0) / 2.0, (w as f32 - 1.0) / 2.0);
    Tensor::from_fn(&[h, w, c], |i| {
        let (y, x, ch) = (i / (w * c), (i / c) % w, i % c);
        let (dy, dx) = (y as f32 - cy, x as f32 - cx);
        let sy = warp.a[0] * dy + warp.a[1] * dx + cy + warp.t[0];
        let sx = warp.a[2] * dy + warp.a[3] * dx + cx + warp.t[1];
        sample_bilinear(img, sy, sx, ch)
    })
}

/// Builds the dataset; identical specs give bitwise-identical output.
pub fn generate(spec: &SynthSpec) -> Result<Dataset> {
    spec.validate()?;
    let palette = palette(spec);
    let cameras = camera_shifts(spec);
    let warps = view_warps(spec);
    let mut images = Vec::with_capacity(spec.num_ids() * spec.images_per_id);
    let mut metas = Vec::with_capacity(images.capacity());
    for id in 0..spec.num_ids() {
        let mut rng = SeededRng::derived(spec.seed, id as u64);
        let template = identity_template(spec, &palette, &mut rng);
        let mut cam_cycle: Vec<usize> = (0..spec.n_cameras).collect();
        rng.shuffle(&mut cam_cycle);
        let views: Vec<Tensor> = warps.iter().map(|wp| warp_image(&template, wp)).collect();
        for j in 0..spec.images_per_id {
            let camera = cam_cycle[j % spec.n_cameras];
            let view = rng.below(spec.n_views);
            let shift = &cameras[camera];
            let c = spec.channels;
            let mut img = views[view].clone();
            for (i, v) in img.data_mut().iter_mut().enumerate() {
                let ch = i % c;
                *v = *v * shift.gain[ch] + shift.offset[ch] + spec.noise * rng.normal();
            }
            let split = if id < spec.train_ids {
                Split::Train
            } else if j < spec.queries_per_id {
                Split::Query
            } else {
                Split::Gallery
            };
            images.push(img);
            metas.push(SampleMeta { identity: id, camera, view: Some(view), split });
        }
    }
    Ok(Dataset { spec: *spec, images, metas })
}

fn mean_var(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = if xs.len() > 1 { xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    (mean, var)
}

/// Largest Welch t statistic between any two cameras' per-image mean
/// intensities.
pub fn camera_intensity_t(images: &[Tensor], metas: &[SampleMeta]) -> f64 {
    let n_cams = metas.iter().map(|m| m.camera + 1).max().unwrap_or(0);
    let mut groups: Vec<Vec<f64>> = vec![Vec::new(); n_cams];
    for (img, m) in images.iter().zip(metas) {
        groups[m.camera].push(img.sum() / img.len() as f64);
    }
    let stats: Vec<(f64, f64, f64)> = groups
        .iter()
        .filter(|g| g.len() >= 2)
        .map(|g| {
            let (m, v) = mean_var(g);
            (m, v, g.len() as f64)
        })
        .collect();
    let mut best = 0.0f64;
    for (i, a) in stats.iter().enumerate() {
        for b in &stats[i + 1..] {
            let se = libm::sqrt(a.1 / a.2 + b.1 / b.2);
            if se > 0.0 {
                best = best.max(libm::fabs(a.0 - b.0) / se);
            }
        }
    }
    best
}

/// PK sampler over a list of identity labels, one per sample.
#[derive(Clone, Debug)]
pub struct PkSampler {
    /// Sample indices grouped per identity, ordered by identity label.
    by_id: Vec<(usize, Vec<usize>)>,
    pub p: usize,
    pub k: usize,
}

impl PkSampler {
    pub fn new(labels: &[(usize, usize)], p: usize, k: usize) -> Result<Self> {
        if p == 0 || k == 0 {
            bail!(Config, "P and K must be positive, got P={p} K={k}");
        }
        let mut by_id: Vec<(usize, Vec<usize>)> = Vec::new();
        let mut sorted = labels.to_vec();
        sorted.sort_unstable_by_key(|&(id, idx)| (id, idx));
        for (id, idx) in sorted {
            match by_id.last_mut() {
                Some((last, v)) if *last == id => v.push(idx),
                _ => by_id.push((id, vec![idx])),
            }
        }
        if let Some((id, v)) = by_id.iter().find(|(_, v)| v.len() < k) {
            bail!(Contract, "identity {id} has {} images, sampler needs K={k}", v.len());
        }
        if by_id.len() < p {
            bail!(Config, "{} identities cannot fill P={p}", by_id.len());
        }
        Ok(PkSampler { by_id, p, k })
    }

    pub fn num_ids(&self) -> usize {
        self.by_id.len()
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.by_id.len().div_ceil(self.p)
    }

    /// One epoch of batches, each `P·K` sample indices grouped by identity.
    ///
    /// Every identity appears once before any repeats; a short final batch
    /// is topped up with distinct identities already used this epoch.
    pub fn epoch(&self, rng: &mut SeededRng) -> Vec<Vec<usize>> {
        let mut order: Vec<usize> = (0..self.by_id.len()).collect();
        rng.shuffle(&mut order);
        let mut batches = Vec::new();
        for chunk in order.chunks(self.p) {
            let mut ids = chunk.to_vec();
            if ids.len() < self.p {
                let mut pool: Vec<usize> = order.iter().copied().filter(|i| !ids.contains(i)).collect();
                rng.shuffle(&mut pool);
                ids.extend_from_slice(&pool[..self.p - ids.len()]);
            }
            let mut batch = Vec::with_capacity(self.p * self.k);
            for i in ids {
                let mut imgs = self.by_id[i].1.clone();
                rng.shuffle(&mut imgs);
                batch.extend_from_slice(&imgs[..self.k]);
            }
            batches.push(batch);
        }
        batches
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct AugmentConfig {
    pub flip_p: f32,
    pub pad: usize,
    pub erase_p: f32,
    pub erase_min_area: f32,
    pub erase_max_area: f32,
    pub erase_min_aspect: f32,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig { flip_p: 0.5, pad: 2, erase_p: 0.5, erase_min_area: 0.02, erase_max_area: 0.4, erase_min_aspect: 0.3 }
    }
}

impl AugmentConfig {
    pub fn none() -> Self {
        AugmentConfig { flip_p: 0.0, pad: 0, erase_p: 0.0, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, p) in [("flip_p", self.flip_p), ("erase_p", self.erase_p)] {
            if !(0.0..=1.0).contains(&p) {
                bail!(Config, "{name} {p} outside [0, 1]");
            }
        }
        if !(0.0 < self.erase_min_area && self.erase_min_area <= self.erase_max_area && self.erase_max_area < 1.0) {
            bail!(Config, "erase area bounds [{}, {}] invalid", self.erase_min_area, self.erase_max_area);
        }
        if !(self.erase_min_aspect > 0.0 && self.erase_min_aspect <= 1.0) {
            bail!(Config, "erase_min_aspect must be in (0, 1]");
        }
        Ok(())
    }
}

pub fn hflip(img: &Tensor) -> Tensor {
    let (h, w, c) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    let d = img.data();
    Tensor::from_fn(&[h, w, c], |i| {
        let (y, x, ch) = (i / (w * c), (i / c) % w, i % c);
        d[(y * w + (w - 1 - x)) * c + ch]
    })
}

/// Zero-pads by `pad` on every side, then crops an `H×W` window at
/// `(dy, dx)` in padded coordinates.
pub fn pad_crop(img: &Tensor, pad: usize, dy: usize, dx: usize) -> Tensor {
    let (h, w, c) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    let d = img.data();
    Tensor::from_fn(&[h, w, c], |i| {
        let (y, x, ch) = (i / (w * c), (i / c) % w, i % c);
        let (sy, sx) = ((y + dy).wrapping_sub(pad), (x + dx).wrapping_sub(pad));
        if sy < h && sx < w {
            d[(sy * w + sx) * c + ch]
        } else {
            0.0
        }
    })
}

/// Chooses an erasing rectangle `(top, left, height, width)` whose area
/// fraction lies within the configured bounds; `None` if ten attempts fail.
pub fn erase_rect(h: usize, w: usize, cfg: &AugmentConfig, rng: &mut SeededRng) -> Option<(usize, usize, usize, usize)> {
    let total = (h * w) as f32;
    let log_lo = libm::logf(cfg.erase_min_aspect);
    for _ in 0..10 {
        let area = rng.uniform_range(cfg.erase_min_area, cfg.erase_max_area) * total;
        let aspect = libm::expf(rng.uniform_range(log_lo, -log_lo));
        let eh = libm::roundf(libm::sqrtf(area * aspect)) as usize;
        let ew = libm::roundf(libm::sqrtf(area / aspect)) as usize;
        let frac = (eh * ew) as f32 / total;
        if eh == 0 || ew == 0 || eh >= h || ew >= w || frac < cfg.erase_min_area || frac > cfg.erase_max_area {
            continue;
        }
        let top = rng.below(h - eh + 1);
        let left = rng.below(w - ew + 1);
        return Some((top, left, eh, ew));
    }
    None
}

/// Flip, pad-and-crop, then random erasing with uniform `[0, 1)` fill.
pub fn augment(img: &Tensor, rng: &mut SeededRng, cfg: &AugmentConfig) -> Result<Tensor> {
    if img.rank() != 3 {
        bail!(Dimension, "augment expects [H, W, C], got {:?}", img.shape());
    }
    cfg.validate()?;
    let (h, w, c) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    let mut out = if rng.bernoulli(cfg.flip_p) { hflip(img) } else { img.clone() };
    if cfg.pad > 0 {
        let dy = rng.below(2 * cfg.pad + 1);
        let dx = rng.below(2 * cfg.pad + 1);
        out = pad_crop(&out, cfg.pad, dy, dx);
    }
    if rng.bernoulli(cfg.erase_p) {
        if let Some((top, left, eh, ew)) = erase_rect(h, w, cfg, rng) {
            let d = out.data_mut();
            for y in top..top + eh {
                for x in left..left + ew {
                    for ch in 0..c {
                        d[(y * w + x) * c + ch] = rng.uniform();
                    }
                }
            }
        }
    }
    Ok(out)
}
