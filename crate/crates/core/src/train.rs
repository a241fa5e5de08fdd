//! Training loop over PK batches and evaluation on the query/gallery split.
//!
//! Randomness for step `t` comes from a stream derived from `(seed, t)` and
//! the batch order of epoch `e` from `(seed, e)`, so a run resumed from a
//! checkpoint at step `t` replays exactly what an uninterrupted run would.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{bail, Error, Result};
use crate::eval::{distance_histograms, evaluate, DistanceHistograms, FeatureSet, GroupBy, Metric, RetrievalResult};
use crate::jpm::JpmConfig;
use crate::losses::{LossConfig, StreamLoss};
use crate::model::{ModelConfig, TransReid};
use crate::sie::SieConfig;
use crate::numcore::{mix_seed, CosineSchedule, Graph, Optimizer, OptimizerConfig, ParamStore, SeededRng, Tensor, Var};
use crate::synthdata::{augment, generate, AugmentConfig, PkSampler, SampleMeta, Split, SynthSpec};

const EPOCH_STREAM: u64 = 0x4550_4f43;
const STEP_STREAM: u64 = 0x5354_4550;

#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct TrainConfig {
    pub epochs: usize,
    /// Identities per batch.
    pub p: usize,
    /// Images per identity.
    pub k: usize,
    pub lr: f32,
    pub warmup_steps: usize,
    /// Optimise the ID losses alone, the objective of backbone pretraining.
    pub id_only: bool,
    pub optimizer: OptimizerConfig,
    pub augment: AugmentConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { epochs: 40, p: 8, k: 4, lr: 0.008, warmup_steps: 0, id_only: false, optimizer: OptimizerConfig::default(), augment: AugmentConfig::default() }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepLog {
    pub step: usize,
    pub lr: f32,
    pub total: f32,
    /// `(id, triplet)` per stream, global first.
    pub streams: Vec<(f32, f32)>,
}

pub struct Trainer {
    pub model: TransReid,
    pub optimizer: Optimizer,
    pub schedule: CosineSchedule,
    pub config: TrainConfig,
    pub seed: u64,
    sampler: PkSampler,
    /// Dataset index per sampler entry.
    train_idx: Vec<usize>,
    /// Classifier label per dataset index.
    labels: Vec<usize>,
    step: usize,
    epoch_cache: Option<(usize, Vec<Vec<usize>>)>,
}

impl Trainer {
    /// Sets up training on the `Train` split of `metas`.
    pub fn new(model: TransReid, config: TrainConfig, metas: &[SampleMeta], seed: u64) -> Result<Self> {
        config.augment.validate()?;
        let train_idx: Vec<usize> = (0..metas.len()).filter(|&i| metas[i].split == Split::Train).collect();
        let mut ids: Vec<usize> = train_idx.iter().map(|&i| metas[i].identity).collect();
        ids.sort_unstable();
        ids.dedup();
        if ids.len() != model.config.num_ids {
            bail!(Config, "model has {} classes, training split has {} identities", model.config.num_ids, ids.len());
        }
        let mut labels = alloc::vec![usize::MAX; metas.len()];
        for &i in &train_idx {
            labels[i] = ids.binary_search(&metas[i].identity).expect("identity collected above");
        }
        let entries: Vec<(usize, usize)> = train_idx.iter().enumerate().map(|(e, &i)| (labels[i], e)).collect();
        let sampler = PkSampler::new(&entries, config.p, config.k)?;
        let total_steps = config.epochs * sampler.batches_per_epoch();
        let schedule = CosineSchedule { base_lr: config.lr, total_steps, warmup_steps: config.warmup_steps };
        let optimizer = Optimizer::new(config.optimizer, &model.store);
        Ok(Trainer { model, optimizer, schedule, config, seed, sampler, train_idx, labels, step: 0, epoch_cache: None })
    }

    pub fn steps_done(&self) -> usize {
        self.step
    }

    pub fn total_steps(&self) -> usize {
        self.schedule.total_steps
    }

    pub fn is_done(&self) -> bool {
        self.step >= self.total_steps()
    }

    /// Positions the run at `step`, e.g. after restoring a checkpoint.
    pub fn set_step(&mut self, step: usize) -> Result<()> {
        if step > self.total_steps() {
            bail!(Contract, "step {step} beyond {} total steps", self.total_steps());
        }
        self.step = step;
        Ok(())
    }

    /// Dataset indices of the batch used at `step`.
    pub fn batch_at(&mut self, step: usize) -> Vec<usize> {
        let per = self.sampler.batches_per_epoch();
        let epoch = step / per;
        if self.epoch_cache.as_ref().is_none_or(|(e, _)| *e != epoch) {
            let mut rng = SeededRng::derived(mix_seed(self.seed, EPOCH_STREAM), epoch as u64);
            self.epoch_cache = Some((epoch, self.sampler.epoch(&mut rng)));
        }
        let batches = &self.epoch_cache.as_ref().expect("filled above").1;
        batches[step % per].iter().map(|&e| self.train_idx[e]).collect()
    }

    /// One optimisation step. A non-finite loss aborts with the step and
    /// learning rate in the error.
    pub fn train_step(&mut self, images: &[Tensor], metas: &[SampleMeta]) -> Result<StepLog> {
        if self.is_done() {
            bail!(Contract, "training already finished after {} steps", self.step);
        }
        let step = self.step;
        let lr = self.schedule.lr(step)?;
        let idx = self.batch_at(step);
        let mut rng = SeededRng::derived(mix_seed(self.seed, STEP_STREAM), step as u64);
        let batch_imgs: Vec<Tensor> = idx.iter().map(|&i| augment(&images[i], &mut rng, &self.config.augment)).collect::<Result<_>>()?;
        let refs: Vec<&Tensor> = batch_imgs.iter().collect();
        let batch_metas: Vec<SampleMeta> = idx.iter().map(|&i| metas[i]).collect();
        let labels: Vec<usize> = idx.iter().map(|&i| self.labels[i]).collect();

        let mut g = Graph::new();
        let at_step = |e: Error| match e {
            Error::Numeric(m) => Error::Numeric(format!("{m} at step {step} (lr {lr})")),
            other => other,
        };
        let fwd = self.model.forward(&mut g, &refs, &batch_metas, true, &mut rng).map_err(at_step)?;
        let (total, parts) = self.model.loss(&mut g, &fwd, &labels).map_err(at_step)?;
        let loss = g.value(total).item();
        if !loss.is_finite() {
            bail!(Numeric, "non-finite loss {loss} at step {step} (lr {lr})");
        }
        let objective = if self.config.id_only { id_objective(&mut g, &parts)? } else { total };
        g.backward(objective)?;
        let store = &mut self.model.store;
        store.zero_grad();
        g.accumulate_into(store)?;
        // parameters outside this step's graph (an SIE table at λ = 0) get a zero gradient
        for (_, p) in store.iter_mut() {
            if p.trainable && p.grad.is_none() {
                p.grad = Some(Tensor::zeros(p.value.shape()));
            }
        }
        self.optimizer.step(store, lr)?;
        self.model.update_bn(&g, &fwd);
        self.step += 1;
        let streams = parts.iter().map(|s| (g.value(s.id).item(), g.value(s.triplet).item())).collect();
        Ok(StepLog { step, lr, total: loss, streams })
    }
}

fn id_objective(g: &mut Graph, parts: &[StreamLoss]) -> Result<Var> {
    let mut acc = parts[0].id;
    for s in &parts[1..] {
        acc = g.add(acc, s.id)?;
    }
    Ok(acc)
}

/// Stand-in for the ImageNet starting point the recipe assumes: ID-only
/// classification on synthetic identities disjoint from the re-id data
/// (own palette and nuisance draws), with the model's encoder shape. Like
/// published weights it has its own seed, independent of the run seed.
#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct PretrainConfig {
    pub enabled: bool,
    pub ids: usize,
    pub epochs: usize,
    pub lr: f32,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig { enabled: true, ids: 80, epochs: 60, lr: 0.03, seed: 0 }
    }
}

const PRETRAIN_STREAM: u64 = 0x5052_4554;

impl PretrainConfig {
    /// Dataset the backbone is pretrained on.
    pub fn data_spec(&self, data: &SynthSpec) -> SynthSpec {
        SynthSpec { train_ids: self.ids, eval_ids: 0, seed: mix_seed(self.seed, PRETRAIN_STREAM), ..*data }
    }

    /// Global-branch classifier with the same encoder, position table on.
    pub fn model_config(&self, model: &ModelConfig) -> ModelConfig {
        ModelConfig {
            num_ids: self.ids,
            pos_embed: true,
            dropout: 0.0,
            attn_dropout: 0.0,
            drop_path: 0.0,
            jpm: JpmConfig::baseline(),
            sie: SieConfig::off(),
            loss: LossConfig::default(),
            ..*model
        }
    }
}

/// Trains the pretraining classifier and returns its parameters, ready for
/// [`TransReid::load_backbone`].
/// Batch shape and augmentation follow `train`; the optimizer is always
/// the default SGD.
pub fn pretrain_backbone(model: &ModelConfig, pre: &PretrainConfig, data: &SynthSpec, train: &TrainConfig) -> Result<ParamStore> {
    let spec = pre.data_spec(data);
    let ds = generate(&spec)?;
    let seed = mix_seed(pre.seed, PRETRAIN_STREAM + 1);
    let net = TransReid::new(pre.model_config(model), seed)?;
    let config = TrainConfig { epochs: pre.epochs, lr: pre.lr, id_only: true, p: train.p, k: train.k, augment: train.augment, ..Default::default() };
    let mut trainer = Trainer::new(net, config, &ds.metas, seed)?;
    while !trainer.is_done() {
        trainer.train_step(&ds.images, &ds.metas)?;
    }
    Ok(trainer.model.store)
}

/// Retrieval metrics and distance distributions on the eval split.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub retrieval: RetrievalResult,
    pub camera: DistanceHistograms,
    pub view: Option<DistanceHistograms>,
    pub feature_dim: usize,
}

pub fn evaluate_model(model: &TransReid, images: &[Tensor], metas: &[SampleMeta], global_only: bool, metric: Metric, bins: usize) -> Result<EvalReport> {
    let pick = |split: Split| -> Result<FeatureSet> {
        let idx: Vec<usize> = (0..metas.len()).filter(|&i| metas[i].split == split).collect();
        let refs: Vec<&Tensor> = idx.iter().map(|&i| &images[i]).collect();
        let ms: Vec<SampleMeta> = idx.iter().map(|&i| metas[i]).collect();
        FeatureSet::new(model.retrieval_features(&refs, &ms, global_only)?, ms)
    };
    let q = pick(Split::Query)?;
    let gal = pick(Split::Gallery)?;
    if q.is_empty() || gal.is_empty() {
        bail!(Config, "evaluation needs query and gallery images");
    }
    let retrieval = evaluate(&q, &gal, metric)?;
    let mut all = q.features.data().to_vec();
    all.extend_from_slice(gal.features.data());
    let mut all_metas = q.metas.clone();
    all_metas.extend_from_slice(&gal.metas);
    let feature_dim = q.features.cols();
    let both = FeatureSet::new(Tensor::new(&[all_metas.len(), feature_dim], all)?, all_metas)?;
    let camera = distance_histograms(&both, GroupBy::Camera, bins, metric)?;
    let view = if both.metas.iter().all(|m| m.view.is_some()) { Some(distance_histograms(&both, GroupBy::View, bins, metric)?) } else { None };
    Ok(EvalReport { retrieval, camera, view, feature_dim })
}
