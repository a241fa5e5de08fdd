//! Independent oracles and the gradient-suite runner, shared by the core
//! integration tests and the acceptance harness.

#![allow(dead_code)]

use transreid_core::numcore::{grad_check_params, GradCheckConfig, GradCheckReport, Graph, ParamStore, SeededRng, Tensor, Var};
use transreid_core::synthdata::{SampleMeta, Split};
use transreid_core::Result;

// ---- patch grid ----

/// Window count by walking every top-left corner that fits.
pub fn brute_patch_count(h: usize, w: usize, p: usize, s: usize) -> (usize, usize, usize) {
    let fits = |extent: usize| {
        let mut n = 0;
        let mut start = 0;
        while start + p <= extent {
            n += 1;
            start += s;
        }
        n
    };
    let (nh, nw) = (fits(h), fits(w));
    (nh, nw, nh * nw)
}

// ---- triplets ----

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Batch-hard triplet loss by enumerating every (anchor, positive,
/// negative) triple and keeping each anchor's largest loss. `plain` is
/// `Some(margin)` for the hinge on Euclidean distances, `None` for the
/// softplus on squared distances.
pub fn exhaustive_triplet(features: &[Vec<f64>], labels: &[usize], plain: Option<f64>) -> f64 {
    let b = labels.len();
    let mut total = 0.0;
    for a in 0..b {
        let mut worst = f64::NEG_INFINITY;
        for p in (0..b).filter(|&p| p != a && labels[p] == labels[a]) {
            for n in (0..b).filter(|&n| labels[n] != labels[a]) {
                let (dp, dn) = (sq_dist(&features[a], &features[p]), sq_dist(&features[a], &features[n]));
                let l = match plain {
                    Some(m) => (dp.sqrt() - dn.sqrt() + m).max(0.0),
                    None => (1.0 + (dp - dn).exp()).ln(),
                };
                worst = worst.max(l);
            }
        }
        total += worst;
    }
    total / b as f64
}

// ---- retrieval ----

pub struct BruteRetrieval {
    pub cmc: Vec<f64>,
    pub map: f64,
    pub ap: Vec<Option<f64>>,
}

/// Ranks by counting, per gallery item, how many items precede it under
/// (distance, index); junk items share identity and camera with the query.
pub fn brute_retrieval(dist: &[f64], query: &[SampleMeta], gallery: &[SampleMeta]) -> BruteRetrieval {
    let ng = gallery.len();
    let mut cmc = vec![0.0; ng];
    let mut ap = Vec::new();
    for (qi, q) in query.iter().enumerate() {
        let row = &dist[qi * ng..(qi + 1) * ng];
        let valid: Vec<usize> = (0..ng).filter(|&j| !(gallery[j].identity == q.identity && gallery[j].camera == q.camera)).collect();
        let mut by_rank = vec![usize::MAX; valid.len()];
        for &j in &valid {
            let before = valid.iter().filter(|&&k| row[k] < row[j] || (row[k] == row[j] && k < j)).count();
            by_rank[before] = j;
        }
        let mut hits = 0usize;
        let mut sum = 0.0;
        let mut first = None;
        for (r, &j) in by_rank.iter().enumerate() {
            if gallery[j].identity == q.identity {
                hits += 1;
                sum += hits as f64 / (r + 1) as f64;
                first.get_or_insert(r);
            }
        }
        match first {
            Some(r) => {
                for c in &mut cmc[r..] {
                    *c += 1.0;
                }
                ap.push(Some(sum / hits as f64));
            }
            None => ap.push(None),
        }
    }
    let valid = ap.iter().flatten().count();
    if valid == 0 {
        return BruteRetrieval { cmc: vec![0.0; ng], map: 0.0, ap };
    }
    let map = ap.iter().flatten().sum::<f64>() / valid as f64;
    BruteRetrieval { cmc: cmc.into_iter().map(|c| c / valid as f64).collect(), map, ap }
}

/// Random query/gallery instance with coarse distances, so ties occur.
pub fn random_retrieval_instance(rng: &mut SeededRng) -> (Vec<f64>, Vec<SampleMeta>, Vec<SampleMeta>) {
    let nq = 1 + rng.below(10);
    let ng = 1 + rng.below(50);
    let ids = 1 + rng.below(6);
    let cams = 1 + rng.below(4);
    let mut meta = |split| SampleMeta { identity: rng.below(ids), camera: rng.below(cams), view: None, split };
    let query: Vec<SampleMeta> = (0..nq).map(|_| meta(Split::Query)).collect();
    let gallery: Vec<SampleMeta> = (0..ng).map(|_| meta(Split::Gallery)).collect();
    let dist = (0..nq * ng).map(|_| rng.below(8) as f64 * 0.25).collect();
    (dist, query, gallery)
}

// ---- permutations ----

/// Shift by `m` then a `k`-row transpose, computed by sorting positions by
/// (column, row) in the `k × ⌈N/k⌉` layout.
pub fn transpose_oracle(n: usize, m: usize, k: usize) -> Vec<usize> {
    let shifted: Vec<usize> = (0..n).map(|j| (j + m) % n).collect();
    let cols = n.div_ceil(k);
    let mut pos: Vec<usize> = (0..n).collect();
    pos.sort_by_key(|&i| (i % cols, i / cols));
    pos.into_iter().map(|i| shifted[i]).collect()
}

// ---- gradients ----

#[derive(Clone, Copy)]
pub enum Domain {
    Normal,
    /// Uniform in `[0.5, 2)`.
    Positive,
}

pub struct OpCase {
    pub name: &'static str,
    pub inputs: Vec<Vec<usize>>,
    pub domain: Domain,
    pub f: fn(&mut Graph, &[Var]) -> Result<Var>,
}

fn case(name: &'static str, inputs: &[&[usize]], f: fn(&mut Graph, &[Var]) -> Result<Var>) -> OpCase {
    OpCase { name, inputs: inputs.iter().map(|s| s.to_vec()).collect(), domain: Domain::Normal, f }
}

/// Every differentiable graph op, plus the triplet losses built on top.
pub fn op_cases() -> Vec<OpCase> {
    let mut cases = vec![
        case("matmul", &[&[3, 4], &[4, 5]], |g, x| g.matmul(x[0], x[1])),
        case("bmm", &[&[2, 3, 4], &[2, 4, 2]], |g, x| g.bmm(x[0], x[1])),
        case("bmm_nt", &[&[2, 3, 4], &[2, 5, 4]], |g, x| g.bmm_nt(x[0], x[1])),
        case("linear", &[&[3, 4], &[4, 5], &[5]], |g, x| g.linear(x[0], x[1], Some(x[2]))),
        case("add", &[&[3, 4], &[3, 4]], |g, x| g.add(x[0], x[1])),
        case("sub", &[&[3, 4], &[3, 4]], |g, x| g.sub(x[0], x[1])),
        case("mul", &[&[3, 4], &[3, 4]], |g, x| g.mul(x[0], x[1])),
        case("add_bias", &[&[3, 4], &[4]], |g, x| g.add_bias(x[0], x[1])),
        case("scale", &[&[3, 4]], |g, x| g.scale(x[0], -0.7)),
        case("mul_const", &[&[3, 4]], |g, x| g.mul_const(x[0], (0..12).map(|i| (i % 3) as f32 * 0.5).collect())),
        case("scale_rows", &[&[3, 4]], |g, x| g.scale_rows(x[0], vec![0.0, 2.0, -1.5])),
        case("gelu", &[&[3, 4]], |g, x| g.gelu(x[0])),
        case("relu", &[&[3, 4]], |g, x| g.relu(x[0])),
        case("softplus", &[&[3, 4]], |g, x| g.softplus(x[0])),
        case("softmax_last", &[&[2, 3, 4]], |g, x| g.softmax(x[0], 2)),
        case("softmax_mid", &[&[2, 3, 4]], |g, x| g.softmax(x[0], 1)),
        case("layer_norm", &[&[3, 6], &[6], &[6]], |g, x| g.layer_norm(x[0], x[1], x[2], 1e-6)),
        case("batch_norm_train", &[&[5, 4], &[4], &[4]], |g, x| g.batch_norm_1d(x[0], x[1], x[2], (&[0.0; 4], &[1.0; 4]), true, 1e-5)),
        case("batch_norm_eval", &[&[5, 4], &[4], &[4]], |g, x| g.batch_norm_1d(x[0], x[1], x[2], (&[0.1, -0.2, 0.3, 0.0], &[0.5, 1.0, 2.0, 1.5]), false, 1e-5)),
        case("gather_rows", &[&[4, 3]], |g, x| g.gather_rows(x[0], vec![2, 0, 2, 3])),
        case("concat_rows", &[&[2, 3], &[1, 3]], |g, x| g.concat_rows(&[x[0], x[1], x[0]])),
        case("narrow", &[&[2, 5, 3]], |g, x| g.narrow(x[0], 1, 1, 3)),
        case("permute", &[&[2, 3, 4]], |g, x| g.permute(x[0], &[2, 0, 1])),
        case("reshape", &[&[2, 6]], |g, x| g.reshape(x[0], &[3, 4])),
        case("gather_flat", &[&[3, 4]], |g, x| g.gather_flat(x[0], vec![11, 0, 5, 5])),
        case("sum", &[&[3, 4]], |g, x| g.sum(x[0])),
        case("mean", &[&[3, 4]], |g, x| g.mean(x[0])),
        case("cross_entropy", &[&[4, 5]], |g, x| g.cross_entropy(x[0], &[0, 3, 4, 3], 0.0)),
        case("cross_entropy_smoothed", &[&[4, 5]], |g, x| g.cross_entropy(x[0], &[1, 1, 2, 0], 0.1)),
        case("pairwise_sq_dist", &[&[4, 3]], |g, x| g.pairwise_sq_dist(x[0])),
        case("soft_triplet", &[&[6, 3]], |g, x| transreid_core::losses::soft_triplet(g, x[0], &[0, 0, 1, 1, 2, 2])),
        case("plain_triplet", &[&[6, 3]], |g, x| transreid_core::losses::plain_triplet(g, x[0], &[0, 0, 1, 1, 2, 2], 0.3)),
    ];
    cases.push(OpCase { domain: Domain::Positive, ..case("sqrt", &[&[3, 4]], |g, x| g.sqrt(x[0])) });
    cases
}

/// Registers the case inputs as parameters drawn from `seed`.
pub fn case_store(c: &OpCase, seed: u64) -> ParamStore {
    let mut store = ParamStore::new();
    for (i, shape) in c.inputs.iter().enumerate() {
        let name = format!("{}.x{i}", c.name);
        let mut rng = SeededRng::named(seed, &name);
        let t = Tensor::from_fn(shape, |_| match c.domain {
            Domain::Normal => rng.normal(),
            Domain::Positive => rng.uniform_range(0.5, 2.0),
        });
        store.add(name, t, true);
    }
    store
}

/// `Σ w ⊙ f(x)` with a fixed random `w`, so every output element matters.
pub fn linear_functional(g: &mut Graph, out: Var, seed: u64) -> Result<Var> {
    let shape = g.value(out).shape().to_vec();
    let mut rng = SeededRng::named(seed, "functional");
    let w = g.constant(Tensor::from_fn(&shape, |_| rng.normal()));
    let p = g.mul(out, w)?;
    g.sum(p)
}

pub fn check_case(c: &OpCase, seed: u64, cfg: GradCheckConfig) -> Result<GradCheckReport> {
    let store = case_store(c, seed);
    let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
    grad_check_params(
        &store,
        |g, s| {
            let vars: Vec<Var> = ids.iter().map(|&id| g.param(s, id)).collect();
            let out = (c.f)(g, &vars)?;
            linear_functional(g, out, seed)
        },
        cfg,
    )
}

/// Elementwise square as a custom op; `wrong` doubles its VJP.
pub fn custom_square(g: &mut Graph, x: Var, wrong: bool) -> Var {
    let v = g.value(x);
    let out = Tensor::new(v.shape(), v.data().iter().map(|a| a * a).collect()).expect("same shape");
    let k = if wrong { 4.0 } else { 2.0 };
    g.custom(
        &[x],
        out,
        Box::new(move |inputs, _out, grad| {
            let d = inputs[0].data().iter().zip(grad.data()).map(|(a, g)| k * a * g).collect();
            vec![Tensor::new(inputs[0].shape(), d).expect("same shape")]
        }),
    )
}

pub fn check_custom_square(wrong: bool, seed: u64) -> Result<GradCheckReport> {
    let mut store = ParamStore::new();
    let mut rng = SeededRng::named(seed, "custom");
    let id = store.add("custom.x", Tensor::from_fn(&[3, 4], |_| rng.normal()), true);
    grad_check_params(
        &store,
        |g, s| {
            let x = g.param(s, id);
            let y = custom_square(g, x, wrong);
            linear_functional(g, y, seed)
        },
        GradCheckConfig::default(),
    )
}

// ---- suites ----

/// Every `(H, W, P, S)` with `H, W ≤ 48`, `P ≤ 16`, `S ≤ P`. Returns the
/// number of cases checked.
pub fn patch_grid_suite() -> core::result::Result<usize, String> {
    use transreid_core::embed::{patch_count, PatchifyConfig};
    let mut n = 0;
    for height in 1..=48 {
        for width in 1..=48 {
            for patch in 1..=16 {
                for stride in 1..=patch {
                    let cfg = PatchifyConfig { height, width, channels: 3, patch, stride, dim: 8 };
                    let brute = brute_patch_count(height, width, patch, stride);
                    match patch_count(&cfg) {
                        Ok(got) if got == brute => {}
                        Err(_) if brute.2 == 0 => {}
                        other => return Err(format!("H={height} W={width} P={patch} S={stride}: {other:?} vs {brute:?}")),
                    }
                    n += 1;
                }
            }
        }
    }
    Ok(n)
}

/// Batch-hard soft and plain triplet losses against [`exhaustive_triplet`]
/// on random PK batches of at most 12. Returns the largest deviation.
pub fn triplet_suite(instances: u64) -> core::result::Result<f64, String> {
    use transreid_core::losses::{plain_triplet, soft_triplet};
    let mut worst = 0.0f64;
    for seed in 0..instances {
        let mut rng = SeededRng::named(seed, "triplet-suite");
        let p = 2 + rng.below(3);
        let k = 2 + rng.below(12 / p - 1);
        let dim = 1 + rng.below(6);
        let labels: Vec<usize> = (0..p * k).map(|i| i / k).collect();
        let mut order = labels.clone();
        rng.shuffle(&mut order);
        let feats = Tensor::from_fn(&[p * k, dim], |_| rng.normal());
        let rows: Vec<Vec<f64>> = (0..p * k).map(|i| feats.row(i).iter().map(|&v| v as f64).collect()).collect();
        for plain in [None, Some(0.3)] {
            let mut g = Graph::new();
            let x = g.constant(feats.clone());
            let loss = match plain {
                None => soft_triplet(&mut g, x, &order),
                Some(m) => plain_triplet(&mut g, x, &order, m as f32),
            }
            .map_err(|e| e.to_string())?;
            let got = g.scalar_value(loss);
            let want = exhaustive_triplet(&rows, &order, plain);
            let err = (got - want).abs() / want.abs().max(1.0);
            if err > 1e-5 {
                return Err(format!("seed {seed} plain {plain:?}: {got} vs {want}"));
            }
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

/// mAP, CMC and per-query AP against [`brute_retrieval`], exactly.
pub fn retrieval_suite(instances: u64) -> core::result::Result<usize, String> {
    use transreid_core::eval::evaluate_dist;
    for seed in 0..instances {
        let mut rng = SeededRng::named(seed, "retrieval-suite");
        let (dist, q, g) = random_retrieval_instance(&mut rng);
        let got = evaluate_dist(&dist, &q, &g).map_err(|e| e.to_string())?;
        let want = brute_retrieval(&dist, &q, &g);
        if got.map != want.map || got.cmc != want.cmc || got.ap != want.ap {
            return Err(format!("instance {seed}: mAP {} vs {}, cmc {:?} vs {:?}", got.map, want.map, got.cmc, want.cmc));
        }
    }
    Ok(instances as usize)
}

/// Shift-then-shuffle for `N ∈ 4..=64`, `k ∈ 1..=8`, `m ∈ 0..=N`: a
/// bijection, equal to [`transpose_oracle`], and rejected when `k > N`.
pub fn permutation_suite() -> core::result::Result<usize, String> {
    use transreid_core::jpm::{jpm_permutation, regroup, JpmConfig};
    let mut n_cases = 0;
    let mut rng = SeededRng::new(0);
    for n in 4..=64 {
        for k in 1..=8 {
            for m in 0..=n {
                n_cases += 1;
                let cfg = JpmConfig { m, k, ..Default::default() };
                let perm = jpm_permutation(n, &cfg, &mut rng);
                if k > n {
                    if perm.is_ok() {
                        return Err(format!("N={n} k={k}: accepted more groups than tokens"));
                    }
                    continue;
                }
                let perm = perm.map_err(|e| format!("N={n} k={k} m={m}: {e}"))?;
                let mut seen = vec![false; n];
                for &i in &perm {
                    if i >= n || std::mem::replace(&mut seen[i], true) {
                        return Err(format!("N={n} k={k} m={m}: not a bijection"));
                    }
                }
                if perm.len() != n || perm != transpose_oracle(n, m, k) {
                    return Err(format!("N={n} k={k} m={m}: {perm:?}"));
                }
                let groups = regroup(&perm, usize::MAX, k);
                let mut tokens: Vec<usize> = groups.iter().flat_map(|g| g[1..].iter().copied()).collect();
                tokens.sort_unstable();
                if groups.len() != k || groups.iter().any(|g| g[0] != usize::MAX) || tokens != (0..n).collect::<Vec<_>>() {
                    return Err(format!("N={n} k={k} m={m}: groups lose or repeat tokens"));
                }
            }
        }
    }
    Ok(n_cases)
}

/// Worst error over every op case and seed; `Err` names the first failure.
pub fn gradient_suite(seeds: u64) -> core::result::Result<f64, String> {
    let mut worst = 0.0f64;
    for c in op_cases() {
        for seed in 0..seeds {
            let r = check_case(&c, seed, GradCheckConfig::default()).map_err(|e| format!("{} seed {seed}: {e}", c.name))?;
            if !r.passed() {
                return Err(format!("{} seed {seed}: {r:?}", c.name));
            }
            worst = worst.max(r.max_rel_error);
        }
    }
    Ok(worst)
}

// ---- tiny model ----

/// Two layers, D=8, 8×8 single-channel images, JPM with two groups and
/// joint SIE over 2×2 side values.
pub fn tiny_model_config() -> transreid_core::model::ModelConfig {
    use transreid_core::jpm::JpmConfig;
    use transreid_core::model::ModelConfig;
    use transreid_core::sie::{SieConfig, SieMode};
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
        num_ids: 2,
        jpm: JpmConfig { m: 1, k: 2, ..Default::default() },
        sie: SieConfig { mode: SieMode::Joint, lambda: 1.0, n_cameras: 2, n_views: 2 },
        ..Default::default()
    }
}

/// Four images of two identities; camera and view both alternate.
pub fn tiny_batch(seed: u64) -> (Vec<Tensor>, Vec<SampleMeta>, Vec<usize>) {
    let mut rng = SeededRng::named(seed, "tiny-batch");
    let imgs = (0..4).map(|_| Tensor::from_fn(&[8, 8, 1], |_| rng.uniform())).collect();
    let metas = (0..4).map(|i| SampleMeta { identity: i / 2, camera: i % 2, view: Some(i % 2), split: Split::Train }).collect();
    (imgs, metas, vec![0, 0, 1, 1])
}

/// Checks the training loss of a freshly initialised model against every
/// trainable tensor. Dropout masks repeat because each evaluation restarts
/// the forward rng.
pub fn check_tiny_model(cfg: transreid_core::model::ModelConfig, seed: u64) -> Result<GradCheckReport> {
    use transreid_core::model::TransReid;
    let model = TransReid::new(cfg, seed)?;
    let (imgs, metas, labels) = tiny_batch(seed);
    let refs: Vec<&Tensor> = imgs.iter().collect();
    let probe = std::cell::RefCell::new(model.clone());
    grad_check_params(
        &model.store,
        |g, store| {
            let mut m = probe.borrow_mut();
            m.store = store.clone();
            let fwd = m.forward(g, &refs, &metas, true, &mut SeededRng::new(seed))?;
            Ok(m.loss(g, &fwd, &labels)?.0)
        },
        GradCheckConfig::default(),
    )
}
