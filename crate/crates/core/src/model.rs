//! The assembled network: patch embedding, side information, shared encoder
//! layers, global and jigsaw branches, and one BNNeck head per stream.

use alloc::format;
use alloc::vec::Vec;

use crate::embed::{extract_patches, trunc_normal_tensor, EmbedVars, Grid, PatchSequence, PatchifyConfig};
use crate::encoder::{encode_stack, init_weight, EncoderConfig, LayerParams, Mode};
use crate::error::{bail, Result};
use crate::jpm::{inference_feature, jpm_forward, BranchVars, JpmConfig, JpmOutput};
use crate::losses::{bnneck_forward, stream_loss, total_loss, BnneckHead, BnneckOut, LossConfig, StreamLoss};
use crate::numcore::{Graph, ParamId, ParamStore, SeededRng, Tensor, Var};
use crate::sie::{apply_sie, SieConfig, SieMode};
use crate::synthdata::SampleMeta;

#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct ModelConfig {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub patch: usize,
    pub stride: usize,
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub dropout: f32,
    pub attn_dropout: f32,
    pub drop_path: f32,
    /// False zeroes and freezes the position table.
    pub pos_embed: bool,
    /// Classifier width, the number of training identities.
    pub num_ids: usize,
    pub jpm: JpmConfig,
    pub sie: SieConfig,
    pub loss: LossConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            height: 64,
            width: 32,
            channels: 3,
            patch: 8,
            stride: 8,
            dim: 64,
            depth: 4,
            heads: 4,
            mlp_ratio: 4,
            dropout: 0.0,
            attn_dropout: 0.0,
            drop_path: 0.0,
            pos_embed: true,
            num_ids: 20,
            jpm: JpmConfig::default(),
            sie: SieConfig::default(),
            loss: LossConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn patchify(&self) -> PatchifyConfig {
        PatchifyConfig { height: self.height, width: self.width, channels: self.channels, patch: self.patch, stride: self.stride, dim: self.dim }
    }

    pub fn encoder(&self) -> EncoderConfig {
        EncoderConfig {
            depth: self.depth,
            heads: self.heads,
            dim: self.dim,
            mlp_ratio: self.mlp_ratio,
            dropout: self.dropout,
            attn_dropout: self.attn_dropout,
            drop_path: self.drop_path,
        }
    }

    pub fn validate(&self) -> Result<Grid> {
        let grid = self.patchify().grid()?;
        self.encoder().validate()?;
        if self.depth < 2 {
            bail!(Config, "depth must be >= 2, got {}", self.depth);
        }
        self.jpm.validate(grid.len())?;
        self.sie.validate()?;
        self.loss.validate()?;
        if self.num_ids < 2 {
            bail!(Config, "need at least 2 training identities");
        }
        Ok(grid)
    }

    pub fn feature_dim(&self) -> usize {
        self.jpm.feature_dim(self.dim)
    }
}

#[derive(Clone, Copy, Debug)]
struct BranchParams {
    layer: LayerParams,
    norm_g: ParamId,
    norm_b: ParamId,
}

impl BranchParams {
    fn register(store: &mut ParamStore, prefix: &str, cfg: &EncoderConfig, drop_path: f32, seed: u64) -> Self {
        let layer = LayerParams::register(store, &format!("{prefix}.block"), cfg, drop_path, seed);
        let norm_g = store.add(format!("{prefix}.norm.weight"), Tensor::ones(&[cfg.dim]), true);
        let norm_b = store.add(format!("{prefix}.norm.bias"), Tensor::zeros(&[cfg.dim]), true);
        BranchParams { layer, norm_g, norm_b }
    }

    fn bind(&self, g: &mut Graph, store: &ParamStore) -> BranchVars {
        BranchVars { layer: self.layer.bind(g, store), norm_g: g.param(store, self.norm_g), norm_b: g.param(store, self.norm_b) }
    }
}

/// Parameters live in [`TransReid::store`]; handles are kept alongside.
#[derive(Clone, Debug)]
pub struct TransReid {
    pub config: ModelConfig,
    pub grid: Grid,
    pub store: ParamStore,
    proj_w: ParamId,
    proj_b: ParamId,
    cls: ParamId,
    pos: ParamId,
    sie: Option<ParamId>,
    layers: Vec<LayerParams>,
    global: BranchParams,
    local: Option<BranchParams>,
    heads: Vec<BnneckHead>,
}

/// Graph nodes of one forward pass.
#[derive(Clone, Debug)]
pub struct Forward {
    pub jpm: JpmOutput,
    /// Global stream first, then the local streams.
    pub necks: Vec<BnneckOut>,
    pub batch: usize,
}

/// Host-side features of a batch.
#[derive(Clone, Debug, PartialEq)]
pub struct Features {
    pub global: Tensor,
    pub locals: Vec<Tensor>,
}

impl TransReid {
    /// Builds and initialises the model. Every tensor draws from its own
    /// name-keyed stream, so toggling one component leaves the rest equal.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let grid = config.validate()?;
        let enc = config.encoder();
        let d = config.dim;
        let mut store = ParamStore::new();
        let p = config.patchify().patch_len();
        let proj_w = init_weight(&mut store, "patch_embed.weight", &[p, d], seed);
        let proj_b = store.add("patch_embed.bias", Tensor::zeros(&[d]), true);
        let cls = store.add("cls_token", trunc_normal_tensor(&[1, d], &mut SeededRng::named(seed, "cls_token")), true);
        let pos = if config.pos_embed {
            store.add("pos_embed", trunc_normal_tensor(&[grid.len() + 1, d], &mut SeededRng::named(seed, "pos_embed")), true)
        } else {
            store.add("pos_embed", Tensor::zeros(&[grid.len() + 1, d]), false)
        };
        let sie = (config.sie.mode != SieMode::Off).then(|| {
            let t = trunc_normal_tensor(&[config.sie.rows(), d], &mut SeededRng::named(seed, "sie_embed"));
            store.add("sie_embed", t, true)
        });
        let sched = enc.drop_path_schedule();
        let layers = (0..config.depth - 1).map(|i| LayerParams::register(&mut store, &format!("blocks.{i}"), &enc, sched[i], seed)).collect();
        let last = sched[config.depth - 1];
        let global = BranchParams::register(&mut store, "b1", &enc, last, seed);
        let local = config.jpm.enabled.then(|| BranchParams::register(&mut store, "b2", &enc, last, seed));
        let heads = (0..config.jpm.streams())
            .map(|s| BnneckHead::register(&mut store, &format!("bnneck.{s}"), d, config.num_ids, seed))
            .collect();
        Ok(TransReid { config, grid, store, proj_w, proj_b, cls, pos, sie, layers, global, local, heads })
    }

    /// Copies encoder weights from a pretrained store: every trainable
    /// tensor with a matching name and shape except the SIE table and the
    /// BNNeck heads. The jigsaw branch falls back to the source's global
    /// branch. Returns the number of tensors copied.
    pub fn load_backbone(&mut self, src: &ParamStore) -> Result<usize> {
        let mut copied = 0;
        for (_, p) in self.store.iter_mut() {
            if !p.trainable || p.name == "sie_embed" || p.name.starts_with("bnneck.") {
                continue;
            }
            let from = src.find(&p.name).or_else(|| p.name.strip_prefix("b2.").and_then(|rest| src.find(&format!("b1.{rest}"))));
            let Some(id) = from else { continue };
            let v = src.value(id);
            if v.shape() != p.value.shape() {
                bail!(Dimension, "pretrained {} has shape {:?}, model expects {:?}", p.name, v.shape(), p.value.shape());
            }
            p.value = v.clone();
            copied += 1;
        }
        Ok(copied)
    }

    pub fn heads(&self) -> &[BnneckHead] {
        &self.heads
    }

    pub fn pos_param(&self) -> ParamId {
        self.pos
    }

    pub fn sie_param(&self) -> Option<ParamId> {
        self.sie
    }

    /// Patches of a batch stacked as `[B·N, P·P·C]`.
    pub fn patches(&self, images: &[&Tensor]) -> Result<Tensor> {
        let cfg = self.config.patchify();
        let mut data = Vec::with_capacity(images.len() * self.grid.len() * cfg.patch_len());
        for img in images {
            data.extend_from_slice(extract_patches(img, &cfg)?.data());
        }
        Tensor::new(&[images.len() * self.grid.len(), cfg.patch_len()], data)
    }

    /// Runs the network on a batch. `rng` drives dropout, drop path and the
    /// random-shuffle variant; it is untouched in eval mode without them.
    pub fn forward(&self, g: &mut Graph, images: &[&Tensor], metas: &[SampleMeta], train: bool, rng: &mut SeededRng) -> Result<Forward> {
        let batch = images.len();
        if metas.len() != batch {
            bail!(Dimension, "{} metas for {batch} images", metas.len());
        }
        let patches = g.constant(self.patches(images)?);
        let vars = EmbedVars {
            proj_w: g.param(&self.store, self.proj_w),
            proj_b: g.param(&self.store, self.proj_b),
            cls: g.param(&self.store, self.cls),
            pos: g.param(&self.store, self.pos),
        };
        let seq = crate::embed::project_and_assemble(g, patches, &vars, batch, self.grid)?;
        let table = self.sie.map(|id| g.param(&self.store, id));
        let seq: PatchSequence = apply_sie(g, seq, table, &self.config.sie, metas)?;
        let enc = self.config.encoder();
        let mode = Mode { cfg: &enc, train };
        let layer_vars: Vec<_> = self.layers.iter().map(|l| l.bind(g, &self.store)).collect();
        let z = encode_stack(g, seq, &layer_vars, mode, rng)?;
        let global = self.global.bind(g, &self.store);
        let local = self.local.map(|l| l.bind(g, &self.store));
        let jpm = jpm_forward(g, z, &global, local.as_ref(), &self.config.jpm, mode, rng)?;
        let mut necks = Vec::with_capacity(self.heads.len());
        let streams = core::iter::once(jpm.global).chain(jpm.locals.iter().copied());
        for (f, head) in streams.zip(&self.heads) {
            necks.push(bnneck_forward(g, f, head, &self.store, train)?);
        }
        Ok(Forward { jpm, necks, batch })
    }

    /// Objective over all streams; returns the total and per-stream terms.
    pub fn loss(&self, g: &mut Graph, fwd: &Forward, labels: &[usize]) -> Result<(Var, Vec<StreamLoss>)> {
        let parts: Vec<StreamLoss> = fwd.necks.iter().map(|n| stream_loss(g, n, labels, &self.config.loss)).collect::<Result<_>>()?;
        let total = total_loss(g, parts[0], &parts[1..])?;
        Ok((total, parts))
    }

    /// Moves train-mode batch statistics into the BN running averages.
    pub fn update_bn(&mut self, g: &Graph, fwd: &Forward) {
        for (neck, head) in fwd.necks.iter().zip(&self.heads) {
            if let Some(stats) = g.batch_stats(neck.inference) {
                head.update_running(&mut self.store, &stats.mean, &stats.var);
            }
        }
    }

    /// Post-BN eval-mode features, computed in chunks of `chunk` images.
    pub fn features(&self, images: &[&Tensor], metas: &[SampleMeta], chunk: usize) -> Result<Features> {
        let streams = self.heads.len();
        let mut parts: Vec<Vec<f32>> = (0..streams).map(|_| Vec::new()).collect();
        let mut rng = SeededRng::new(0);
        for (imgs, ms) in images.chunks(chunk.max(1)).zip(metas.chunks(chunk.max(1))) {
            let mut g = Graph::new();
            let fwd = self.forward(&mut g, imgs, ms, false, &mut rng)?;
            for (s, neck) in fwd.necks.iter().enumerate() {
                parts[s].extend_from_slice(g.value(neck.inference).data());
            }
        }
        let n = images.len();
        let d = self.config.dim;
        let mut tensors = parts.into_iter().map(|p| Tensor::new(&[n, d], p));
        let global = tensors.next().expect("global stream")?;
        let locals = tensors.collect::<Result<_>>()?;
        Ok(Features { global, locals })
    }

    /// Retrieval features; `global_only` drops the local streams.
    pub fn retrieval_features(&self, images: &[&Tensor], metas: &[SampleMeta], global_only: bool) -> Result<Tensor> {
        let f = self.features(images, metas, 64)?;
        let mut jpm = self.config.jpm;
        if global_only {
            jpm.use_local_at_inference = false;
        }
        inference_feature(&f.global, &f.locals, &jpm)
    }

    /// Last-layer attention averaged over heads, `[N+1, N+1]` for the
    /// global branch followed by one map per local group.
    pub fn export_attention(&self, image: &Tensor, meta: &SampleMeta) -> Result<Vec<Tensor>> {
        let mut g = Graph::new();
        let fwd = self.forward(&mut g, &[image], core::slice::from_ref(meta), false, &mut SeededRng::new(0))?;
        let h = self.config.heads;
        let avg = |t: &Tensor| -> Result<Tensor> {
            let s = t.shape()[1];
            let mut out = alloc::vec![0.0f32; s * s];
            for head in t.data().chunks(s * s) {
                for (o, &v) in out.iter_mut().zip(head) {
                    *o += v / h as f32;
                }
            }
            Tensor::new(&[s, s], out)
        };
        let mut maps = Vec::with_capacity(1 + fwd.jpm.local_attn.len());
        maps.push(avg(g.value(fwd.jpm.global_attn))?);
        for a in &fwd.jpm.local_attn {
            maps.push(avg(g.value(*a))?);
        }
        Ok(maps)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            height: 8,
            width: 8,
            channels: 1,
            patch: 4,
            stride: 4,
            dim: 8,
            depth: 2,
            heads: 2,
            mlp_ratio: 2,
            drop_path: 0.0,
            num_ids: 2,
            jpm: JpmConfig { m: 1, k: 2, ..Default::default() },
            sie: SieConfig { mode: SieMode::Joint, lambda: 1.0, n_cameras: 2, n_views: 2 },
            ..Default::default()
        }
    }

    fn batch() -> (Vec<Tensor>, Vec<SampleMeta>, Vec<usize>) {
        let mut rng = SeededRng::new(2);
        let imgs = (0..4).map(|_| Tensor::from_fn(&[8, 8, 1], |_| rng.uniform())).collect();
        let metas = (0..4)
            .map(|i| SampleMeta { identity: i / 2, camera: i % 2, view: Some(i % 2), split: crate::synthdata::Split::Train })
            .collect();
        (imgs, metas, alloc::vec![0, 0, 1, 1])
    }

    #[test]
    fn shapes_and_streams() {
        let model = TransReid::new(tiny(), 0).unwrap();
        let (imgs, metas, labels) = batch();
        let refs: Vec<&Tensor> = imgs.iter().collect();
        let mut g = Graph::new();
        let fwd = model.forward(&mut g, &refs, &metas, true, &mut SeededRng::new(0)).unwrap();
        assert_eq!(fwd.necks.len(), 3);
        let (total, parts) = model.loss(&mut g, &fwd, &labels).unwrap();
        assert_eq!(parts.len(), 3);
        assert!(g.value(total).item().is_finite());
        let f = model.retrieval_features(&refs, &metas, false).unwrap();
        assert_eq!(f.shape(), &[4, 24]);
        let fg = model.retrieval_features(&refs, &metas, true).unwrap();
        assert_eq!(fg.shape(), &[4, 8]);
    }

    #[test]
    fn attention_maps() {
        let model = TransReid::new(tiny(), 0).unwrap();
        let (imgs, metas, _) = batch();
        let maps = model.export_attention(&imgs[0], &metas[0]).unwrap();
        assert_eq!(maps.len(), 3);
        assert_eq!(maps[0].shape(), &[5, 5]);
        for m in &maps {
            for r in 0..m.rows() {
                assert!((m.row(r).iter().sum::<f32>() - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn sie_off_shares_every_other_tensor() {
        let on = TransReid::new(tiny(), 7).unwrap();
        let off = TransReid::new(ModelConfig { sie: SieConfig::off(), ..tiny() }, 7).unwrap();
        for (_, p) in off.store.iter() {
            let q = on.store.find(&p.name).map(|id| on.store.get(id)).unwrap();
            assert_eq!(q.value, p.value, "{}", p.name);
        }
        assert_eq!(on.store.len(), off.store.len() + 1);
    }

    #[test]
    fn pe_off_is_zero_and_frozen() {
        let m = TransReid::new(ModelConfig { pos_embed: false, ..tiny() }, 0).unwrap();
        let p = m.store.get(m.pos_param());
        assert!(!p.trainable);
        assert!(p.value.data().iter().all(|&v| v == 0.0));
    }
}
