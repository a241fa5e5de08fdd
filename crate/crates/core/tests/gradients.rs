mod support;

use support::*;
use transreid_core::encoder::{mha, transformer_layer, EncoderConfig, LayerParams, Mode};
use transreid_core::losses::TripletKind;
use transreid_core::numcore::{grad_check_params, GradCheckConfig, Graph, ParamStore, SeededRng, Tensor};
use transreid_core::sie::{SieConfig, SieMode};

#[test]
fn every_op_matches_finite_differences() {
    let worst = gradient_suite(20).unwrap();
    assert!(worst < 1e-3, "{worst}");
}

#[test]
fn every_op_case_reaches_its_inputs() {
    for c in op_cases() {
        let r = check_case(&c, 0, GradCheckConfig::default()).unwrap();
        let elems: usize = c.inputs.iter().map(|s| s.iter().product::<usize>()).sum();
        assert!(r.checked + r.kinks_skipped == elems, "{}: {r:?}", c.name);
        assert!(r.checked > 0, "{}", c.name);
    }
}

#[test]
fn tiny_model_default() {
    let r = check_tiny_model(tiny_model_config(), 3).unwrap();
    assert!(r.passed(), "{r:?}");
}

#[test]
fn tiny_model_variants() {
    let base = tiny_model_config();
    let mut variants = vec![
        ("plain triplet", { let mut c = base; c.loss.triplet = TripletKind::Plain; c }),
        ("label smoothing", { let mut c = base; c.loss.label_smoothing = 0.1; c }),
        ("dropout", { let mut c = base; c.dropout = 0.2; c.attn_dropout = 0.2; c }),
        ("drop path", { let mut c = base; c.drop_path = 0.3; c }),
        ("no rearrange", { let mut c = base; c.jpm.rearrange = false; c }),
        ("random shuffle", { let mut c = base; c.jpm.random_shuffle = true; c }),
        ("baseline", { let mut c = base; c.jpm.enabled = false; c.sie = SieConfig::off(); c }),
        ("pe off", { let mut c = base; c.pos_embed = false; c }),
    ];
    for mode in [SieMode::CameraOnly, SieMode::ViewOnly, SieMode::SumBaseline] {
        let mut c = base;
        c.sie.mode = mode;
        variants.push(("sie mode", c));
    }
    for (name, cfg) in variants {
        let r = check_tiny_model(cfg, 5).unwrap();
        assert!(r.passed(), "{name} {:?}: {r:?}", cfg.sie.mode);
    }
}

fn layer(seed: u64, cfg: &EncoderConfig) -> (ParamStore, LayerParams) {
    let mut store = ParamStore::new();
    let lp = LayerParams::register(&mut store, "l", cfg, cfg.drop_path, seed);
    // Move off the init so biases and norms are not at their trivial values.
    for (_, p) in store.iter_mut() {
        let mut rng = SeededRng::named(seed, &p.name);
        p.value.data_mut().iter_mut().for_each(|v| *v += 0.3 * rng.normal());
    }
    (store, lp)
}

#[test]
fn transformer_layer_matches_finite_differences() {
    let cfg = EncoderConfig { depth: 2, heads: 2, dim: 8, mlp_ratio: 2, dropout: 0.1, attn_dropout: 0.1, drop_path: 0.2 };
    for seed in 0..3 {
        let (store, lp) = layer(seed, &cfg);
        let mut rng = SeededRng::new(seed);
        let x = Tensor::from_fn(&[2 * 3, 8], |_| rng.normal());
        for train in [false, true] {
            let r = grad_check_params(
                &store,
                |g, s| {
                    let vars = lp.bind(g, s);
                    let xv = g.constant(x.clone());
                    let (y, _) = transformer_layer(g, xv, 2, 3, &vars, Mode { cfg: &cfg, train }, &mut SeededRng::new(9))?;
                    linear_functional(g, y, seed)
                },
                GradCheckConfig::default(),
            )
            .unwrap();
            assert!(r.passed(), "seed {seed} train {train}: {r:?}");
        }
    }
}

#[test]
fn attention_is_permutation_equivariant() {
    let cfg = EncoderConfig { depth: 2, heads: 2, dim: 8, mlp_ratio: 2, dropout: 0.0, attn_dropout: 0.0, drop_path: 0.0 };
    let (store, lp) = layer(1, &cfg);
    let (batch, t) = (2, 5);
    let mut rng = SeededRng::new(4);
    let x = Tensor::from_fn(&[batch * t, 8], |_| rng.normal());
    let perm = [3, 0, 4, 1, 2];
    let rows: Vec<usize> = (0..batch).flat_map(|b| perm.iter().map(move |&p| b * t + p)).collect();
    let run = |input: &Tensor| {
        let mut g = Graph::new();
        let vars = lp.bind(&mut g, &store);
        let xv = g.constant(input.clone());
        let (y, _) = mha(&mut g, xv, batch, t, &vars, Mode { cfg: &cfg, train: false }, &mut SeededRng::new(0)).unwrap();
        g.value(y).clone()
    };
    let y = run(&x);
    let permuted = Tensor::from_fn(x.shape(), |i| x.row(rows[i / 8])[i % 8]);
    let yp = run(&permuted);
    for (i, &r) in rows.iter().enumerate() {
        for (a, b) in yp.row(i).iter().zip(y.row(r)) {
            assert!((a - b).abs() < 1e-5, "row {i}: {a} vs {b}");
        }
    }
}
