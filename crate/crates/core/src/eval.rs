//! Retrieval metrics: distance matrices, CMC and mAP under the cross-camera
//! protocol, and same-identity distance distributions grouped by camera or
//! viewpoint.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{bail, Result};
use crate::numcore::Tensor;
use crate::synthdata::SampleMeta;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum Metric {
    #[default]
    Euclidean,
    /// `1 − cos(a, b)`.
    Cosine,
}

/// Feature rows aligned with their metas.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSet {
    pub features: Tensor,
    pub metas: Vec<SampleMeta>,
}

impl FeatureSet {
    pub fn new(features: Tensor, metas: Vec<SampleMeta>) -> Result<Self> {
        if features.rank() != 2 || features.rows() != metas.len() {
            bail!(Dimension, "features {:?} for {} metas", features.shape(), metas.len());
        }
        Ok(FeatureSet { features, metas })
    }

    pub fn len(&self) -> usize {
        self.metas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.metas.is_empty()
    }
}

fn distance(a: &[f32], b: &[f32], metric: Metric) -> f64 {
    match metric {
        Metric::Euclidean => libm::sqrt(a.iter().zip(b).map(|(&x, &y)| (x as f64 - y as f64) * (x as f64 - y as f64)).sum()),
        Metric::Cosine => {
            let dot: f64 = a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum();
            let na = libm::sqrt(a.iter().map(|&x| x as f64 * x as f64).sum());
            let nb = libm::sqrt(b.iter().map(|&x| x as f64 * x as f64).sum());
            if na == 0.0 || nb == 0.0 {
                1.0
            } else {
                1.0 - dot / (na * nb)
            }
        }
    }
}

/// Row-major `[nq, ng]` distances, in f64.
pub fn pairwise_dist(q: &Tensor, g: &Tensor, metric: Metric) -> Result<Vec<f64>> {
    if q.rank() != 2 || g.rank() != 2 || q.cols() != g.cols() {
        bail!(Contract, "feature dims differ: {:?} vs {:?}", q.shape(), g.shape());
    }
    let mut out = Vec::with_capacity(q.rows() * g.rows());
    for i in 0..q.rows() {
        for j in 0..g.rows() {
            out.push(distance(q.row(i), g.row(j), metric));
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct RetrievalResult {
    /// `cmc[r]` is the rank-`r+1` accuracy.
    pub cmc: Vec<f64>,
    pub map: f64,
    /// Average precision per query; `None` for queries without a valid match.
    pub ap: Vec<Option<f64>>,
    /// Queries excluded for lacking a valid gallery match.
    pub skipped: usize,
}

impl RetrievalResult {
    pub fn rank(&self, r: usize) -> f64 {
        self.cmc.get(r.saturating_sub(1)).copied().unwrap_or(0.0)
    }
}

/// Gallery order for one query: ascending distance, ties by index.
pub fn ranking(dist_row: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dist_row.len()).collect();
    order.sort_by(|&a, &b| dist_row[a].total_cmp(&dist_row[b]).then(a.cmp(&b)));
    order
}

/// CMC and mAP. Gallery items sharing both identity and camera with the
/// query are dropped from its ranking.
pub fn evaluate_dist(dist: &[f64], query: &[SampleMeta], gallery: &[SampleMeta]) -> Result<RetrievalResult> {
    let (nq, ng) = (query.len(), gallery.len());
    if dist.len() != nq * ng {
        bail!(Dimension, "distance matrix has {} entries for {nq}x{ng}", dist.len());
    }
    let mut cmc = vec![0.0f64; ng];
    let mut ap = Vec::with_capacity(nq);
    let mut skipped = 0;
    for (qi, qm) in query.iter().enumerate() {
        let order = ranking(&dist[qi * ng..(qi + 1) * ng]);
        let mut hits = 0usize;
        let mut precision_sum = 0.0;
        let mut first_hit = None;
        let mut rank = 0usize;
        for &j in &order {
            let gm = &gallery[j];
            if gm.identity == qm.identity && gm.camera == qm.camera {
                continue;
            }
            rank += 1;
            if gm.identity == qm.identity {
                hits += 1;
                precision_sum += hits as f64 / rank as f64;
                first_hit.get_or_insert(rank - 1);
            }
        }
        match first_hit {
            None => {
                skipped += 1;
                ap.push(None);
            }
            Some(r0) => {
                for c in &mut cmc[r0..] {
                    *c += 1.0;
                }
                ap.push(Some(precision_sum / hits as f64));
            }
        }
    }
    let valid = nq - skipped;
    let (cmc, map) = if valid == 0 {
        (vec![0.0; ng], 0.0)
    } else {
        let map = ap.iter().flatten().sum::<f64>() / valid as f64;
        (cmc.into_iter().map(|c| c / valid as f64).collect(), map)
    };
    Ok(RetrievalResult { cmc, map, ap, skipped })
}

pub fn evaluate(q: &FeatureSet, g: &FeatureSet, metric: Metric) -> Result<RetrievalResult> {
    let dist = pairwise_dist(&q.features, &g.features, metric)?;
    evaluate_dist(&dist, &q.metas, &g.metas)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum GroupBy {
    Camera,
    View,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Histogram {
    /// `bins + 1` edges.
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
}

impl Histogram {
    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DistanceHistograms {
    pub intra: Histogram,
    pub inter: Histogram,
    /// 0 when there are no pairs of that kind.
    pub mean_intra: f64,
    pub mean_inter: f64,
}

impl DistanceHistograms {
    /// `|μ_inter − μ_intra|`.
    pub fn gap(&self) -> f64 {
        libm::fabs(self.mean_inter - self.mean_intra)
    }
}

/// Distances between same-identity pairs, split by whether the pair shares
/// the grouping value. Both histograms use one range, `[0, max]`.
pub fn distance_histograms(feats: &FeatureSet, group_by: GroupBy, bins: usize, metric: Metric) -> Result<DistanceHistograms> {
    if bins == 0 {
        bail!(Config, "histogram needs at least one bin");
    }
    let key = |m: &SampleMeta| -> Result<usize> {
        match group_by {
            GroupBy::Camera => Ok(m.camera),
            GroupBy::View => match m.view {
                Some(v) => Ok(v),
                None => bail!(Contract, "viewpoint grouping needs viewpoint ids"),
            },
        }
    };
    let keys: Vec<usize> = feats.metas.iter().map(key).collect::<Result<_>>()?;
    let f = &feats.features;
    let mut intra = Vec::new();
    let mut inter = Vec::new();
    for i in 0..feats.len() {
        for j in (i + 1)..feats.len() {
            if feats.metas[i].identity != feats.metas[j].identity {
                continue;
            }
            let d = distance(f.row(i), f.row(j), metric);
            if keys[i] == keys[j] {
                intra.push(d);
            } else {
                inter.push(d);
            }
        }
    }
    let max = intra.iter().chain(&inter).copied().fold(0.0f64, f64::max);
    let hi = if max > 0.0 { max } else { 1.0 };
    let edges: Vec<f64> = (0..=bins).map(|b| hi * b as f64 / bins as f64).collect();
    let hist = |xs: &[f64]| {
        let mut counts = vec![0usize; bins];
        for &x in xs {
            let b = ((x / hi) * bins as f64) as usize;
            counts[b.min(bins - 1)] += 1;
        }
        Histogram { edges: edges.clone(), counts }
    };
    let mean = |xs: &[f64]| if xs.is_empty() { 0.0 } else { xs.iter().sum::<f64>() / xs.len() as f64 };
    Ok(DistanceHistograms { intra: hist(&intra), inter: hist(&inter), mean_intra: mean(&intra), mean_inter: mean(&inter) })
}
