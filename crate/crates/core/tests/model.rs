mod support;

use support::*;
use transreid_core::model::TransReid;
use transreid_core::numcore::Tensor;
use transreid_core::sie::{SieConfig, SieMode};
use transreid_core::synthdata::SynthSpec;
use transreid_core::train::{pretrain_backbone, PretrainConfig, TrainConfig};

fn bits(t: &Tensor) -> Vec<u32> {
    t.data().iter().map(|v| v.to_bits()).collect()
}

#[test]
fn zero_lambda_joint_is_bitwise_off() {
    for seed in 0..4 {
        let mut joint = tiny_model_config();
        joint.sie = SieConfig { mode: SieMode::Joint, lambda: 0.0, n_cameras: 2, n_views: 2 };
        let mut off = joint;
        off.sie = SieConfig::off();
        let (imgs, metas, _) = tiny_batch(seed);
        let refs: Vec<&Tensor> = imgs.iter().collect();
        let a = TransReid::new(joint, seed).unwrap().features(&refs, &metas, 4).unwrap();
        let b = TransReid::new(off, seed).unwrap().features(&refs, &metas, 4).unwrap();
        assert_eq!(bits(&a.global), bits(&b.global));
        for (x, y) in a.locals.iter().zip(&b.locals) {
            assert_eq!(bits(x), bits(y));
        }
    }
}

#[test]
fn nonzero_lambda_changes_features() {
    let cfg = tiny_model_config();
    let mut off = cfg;
    off.sie = SieConfig::off();
    let (imgs, metas, _) = tiny_batch(0);
    let refs: Vec<&Tensor> = imgs.iter().collect();
    let a = TransReid::new(cfg, 0).unwrap().features(&refs, &metas, 4).unwrap();
    let b = TransReid::new(off, 0).unwrap().features(&refs, &metas, 4).unwrap();
    assert_ne!(bits(&a.global), bits(&b.global));
}

#[test]
fn toggles_leave_shared_tensors_equal() {
    let full = TransReid::new(tiny_model_config(), 7).unwrap();
    let mut cfg = tiny_model_config();
    cfg.jpm.enabled = false;
    cfg.sie = SieConfig::off();
    let base = TransReid::new(cfg, 7).unwrap();
    let mut shared = 0;
    for (_, p) in base.store.iter() {
        let other = full.store.value(full.store.find(&p.name).unwrap());
        assert_eq!(bits(&p.value), bits(other), "{}", p.name);
        shared += 1;
    }
    assert!(shared < full.store.len());
}

#[test]
fn pretrained_backbone_loads_into_every_variant() {
    let model = tiny_model_config();
    let data = SynthSpec { train_ids: 2, eval_ids: 1, images_per_id: 4, height: 8, width: 8, channels: 1, n_cameras: 2, n_views: 2, ..Default::default() };
    let pre = PretrainConfig { ids: 4, epochs: 2, ..Default::default() };
    let train = TrainConfig { p: 2, k: 2, ..Default::default() };
    let store = pretrain_backbone(&model, &pre, &data, &train).unwrap();
    assert_eq!(store.find("bnneck.0.classifier").map(|id| store.value(id).shape()[1]), Some(4));
    let again = pretrain_backbone(&model, &pre, &data, &train).unwrap();
    for ((_, a), (_, b)) in store.iter().zip(again.iter()) {
        assert_eq!(bits(&a.value), bits(&b.value), "{}", a.name);
    }
    let mut m = TransReid::new(model, 1).unwrap();
    let fresh = m.clone();
    let copied = m.load_backbone(&store).unwrap();
    assert!(copied > 10);
    let get = |t: &TransReid, name: &str| bits(t.store.value(t.store.find(name).unwrap()));
    let src = |name: &str| bits(store.value(store.find(name).unwrap()));
    assert_eq!(get(&m, "cls_token"), src("cls_token"));
    assert_eq!(get(&m, "b2.block.qkv.weight"), src("b1.block.qkv.weight"));
    assert_eq!(get(&m, "sie_embed"), get(&fresh, "sie_embed"));
    assert_eq!(get(&m, "bnneck.0.classifier"), get(&fresh, "bnneck.0.classifier"));
}

#[test]
fn backbone_shape_mismatch_is_an_error() {
    let mut wide = tiny_model_config();
    wide.dim = 16;
    let src = TransReid::new(wide, 0).unwrap().store;
    let mut m = TransReid::new(tiny_model_config(), 0).unwrap();
    assert!(m.load_backbone(&src).is_err());
}
