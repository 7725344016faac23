//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each,
//! and exits non-zero if any fails.

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use fairrank::augmentation::{mixup_forward, prune_nonspam_edges, replicate_mixed_users, MixupPair};
use fairrank::experiment::{emit_plotdata, execute, results_csv, run_and_write, Analysis, ReportRow, RunManifest};
use fairrank::graph::{
    assign_groups, assign_subgroups, split_users, NodeId, NodeKind, NodeRecord, Part, ReviewGraph,
};
use fairrank::metrics::{afrr, auc, delta_ndcg, ndcg, Scored};
use fairrank::nn::{backward, forward, init_params, ModelParams};
use fairrank::objectives::{detection_loss, fairness_regularizer};
use fairrank::train::{
    coupled_detector_loss, detector_dims, detector_step, expand_features, infer_aprime,
    inferencer_dims, inferencer_step, pretrain_inferencer, train_detector_frozen, train_joint, AprimeSource,
    DetectorVariant, Problem, Stream, TrainOptions, TrainingConfig,
};
use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

type Outcome = Result<String, String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(elapsed: Duration, budget: Duration) -> Result<(), String> {
    ensure(elapsed <= budget, || format!("took {elapsed:.1?}, budget {budget:?}"))
}

// ---------------------------------------------------------------------------
// Random graphs

struct Shape {
    users: usize,
    heavy: usize,
    products: usize,
    heavy_reviews: (usize, usize),
    light_reviews: (usize, usize),
    spam_rate: f64,
    dim: usize,
}

/// Users first, then products, then reviews.
fn random_graph(rng: &mut ChaCha8Rng, s: &Shape) -> ReviewGraph {
    let normal = |rng: &mut ChaCha8Rng, d: usize| (0..d).map(|_| rng.sample(StandardNormal)).collect::<Vec<f64>>();
    let mut nodes = Vec::new();
    for _ in 0..s.users {
        nodes.push(NodeRecord { kind: NodeKind::User, label: None, features: normal(rng, s.dim) });
    }
    for _ in 0..s.products {
        nodes.push(NodeRecord { kind: NodeKind::Product, label: None, features: normal(rng, s.dim) });
    }
    let mut edges = Vec::new();
    for u in 0..s.users {
        let (lo, hi) = if u < s.heavy { s.heavy_reviews } else { s.light_reviews };
        for _ in 0..rng.gen_range(lo..=hi) {
            let r = nodes.len();
            let spam = rng.gen_bool(s.spam_rate);
            nodes.push(NodeRecord { kind: NodeKind::Review, label: Some(spam), features: normal(rng, s.dim) });
            edges.push((NodeId(u), NodeId(r)));
            edges.push((NodeId(r), NodeId(s.users + rng.gen_range(0..s.products))));
        }
    }
    ReviewGraph::build(nodes, &edges, s.dim).expect("well-formed random graph")
}

fn perturbed(params: &ModelParams, rng: &mut ChaCha8Rng, scale: f64) -> ModelParams {
    let flat: Vec<f64> = params.to_flat().iter().map(|w| w + scale * rng.sample::<f64, _>(StandardNormal)).collect();
    let mut p = params.clone();
    p.set_flat(&flat);
    p
}

// ---------------------------------------------------------------------------
// 1. Gradients against central differences

const FD_EPS: f64 = 1e-5;
const FD_TOL: f64 = 1e-4;
/// Components where both gradients are below this are compared absolutely:
/// central differences at `FD_EPS` carry round-off near 1e-11, so smaller
/// entries have no measurable relative error.
const FD_FLOOR: f64 = 1e-6;

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(FD_FLOOR)
}

/// Worst relative error of `analytic` against central differences of `f`
/// around `x0`.
fn fd_worst(f: impl Fn(&[f64]) -> f64, x0: &[f64], analytic: &[f64]) -> f64 {
    assert_eq!(x0.len(), analytic.len());
    let mut x = x0.to_vec();
    let mut worst = 0.0f64;
    for k in 0..x.len() {
        x[k] = x0[k] + FD_EPS;
        let plus = f(&x);
        x[k] = x0[k] - FD_EPS;
        let minus = f(&x);
        x[k] = x0[k];
        worst = worst.max(rel_err(analytic[k], (plus - minus) / (2.0 * FD_EPS)));
    }
    worst
}

fn with_flat(p: &ModelParams, flat: &[f64]) -> ModelParams {
    let mut q = p.clone();
    q.set_flat(flat);
    q
}

fn with_matrix(a: &Array2<f64>, flat: &[f64]) -> Array2<f64> {
    Array2::from_shape_vec(a.raw_dim(), flat.to_vec()).unwrap()
}

fn flat_matrix(a: &Array2<f64>) -> Vec<f64> {
    a.iter().copied().collect()
}

/// True when every hidden pre-activation is clear of the ReLU kink.
fn clear_of_kinks(adj: &fairrank::graph::Adjacency, params: &ModelParams, x: &Array2<f64>) -> bool {
    let (_, cache) = forward(adj, params, x).unwrap();
    let depth = cache.pre.len();
    cache.pre[..depth - 1].iter().all(|z| z.iter().all(|v| v.abs() > 1e-3))
}

/// A problem on at most 24 base nodes with one replica per mixed favoured
/// training user, where every loss term is defined.
fn small_problem(rng: &mut ChaCha8Rng) -> (Problem, TrainingConfig) {
    let shape = Shape {
        users: 6,
        heavy: 2,
        products: 2,
        heavy_reviews: (3, 4),
        light_reviews: (1, 2),
        spam_rate: 0.5,
        dim: 3,
    };
    loop {
        let g = random_graph(rng, &shape);
        assert!(g.node_count() <= 24);
        let cfg = TrainingConfig {
            epochs: 1,
            lambda: rng.gen_range(0.5..5.0),
            weight_decay: 1e-3,
            copies: 1,
            rho: 0.5,
            alpha: rng.gen_range(0.05..0.95),
            variant: DetectorVariant::GnnS1Tr,
            aprime: AprimeSource::Joint,
            percentile: 40,
            hidden: vec![5],
            seed: rng.gen(),
            ..TrainingConfig::default()
        };
        let Ok(split) = split_users(&g, [0.6, 0.2, 0.2], rng.gen()) else { continue };
        let Ok(problem) = Problem::with_split(&g, &cfg, split) else { continue };
        let d = problem.features().ncols();
        let w = init_params(&detector_dims(d, &cfg), 0).unwrap();
        let theta = init_params(&inferencer_dims(d, &cfg), 0).unwrap();
        if coupled_detector_loss(&problem, &cfg, &w, &theta, 0).is_ok() {
            return (problem, cfg);
        }
    }
}

fn train_targets(problem: &Problem) -> Vec<(NodeId, f64)> {
    let vg = problem.view().graph();
    problem
        .view()
        .split()
        .reviews(vg, Part::Train)
        .into_iter()
        .map(|r| (r, if vg.label(r) == Some(true) { 1.0 } else { 0.0 }))
        .collect()
}

fn favored_train(problem: &Problem) -> Vec<NodeId> {
    let g = problem.base();
    problem
        .split()
        .reviews(g, Part::Train)
        .into_iter()
        .filter(|&r| problem.groups().is_favored(r))
        .collect()
}

#[derive(Clone, Copy, Debug)]
enum GradCase {
    Detection,
    Fairness,
    DetectorObjective,
    Subgroup,
    Joint,
}

/// Worst relative error of one random instance of `case`.
fn grad_instance(case: GradCase, rng: &mut ChaCha8Rng) -> f64 {
    let (problem, cfg) = small_problem(rng);
    let vg = problem.view().graph();
    let d = problem.features().ncols();
    let adj = problem.epoch_adjacency(&cfg, Stream::Prune, 0).unwrap();
    let epoch = 0;
    let (w, theta, x) = loop {
        let w = perturbed(&init_params(&detector_dims(d, &cfg), rng.gen()).unwrap(), rng, 0.3);
        let theta = perturbed(&init_params(&inferencer_dims(d, &cfg), rng.gen()).unwrap(), rng, 0.3);
        let column = Array1::from_shape_fn(vg.node_count(), |_| rng.gen_range(0.0..1.0));
        let x = expand_features(vg, problem.features(), &column).unwrap();
        if clear_of_kinks(&adj, &w, &x) && clear_of_kinks(&adj, &theta, problem.features()) {
            break (w, theta, x);
        }
    };
    match case {
        GradCase::Detection | GradCase::Fairness => {
            let targets = train_targets(&problem);
            let favored = favored_train(&problem);
            let loss = |scores: &Array1<f64>| match case {
                GradCase::Detection => detection_loss(scores, &targets).unwrap(),
                _ => fairness_regularizer(scores, vg.labels(), &favored).unwrap(),
            };
            let (scores, cache) = forward(&adj, &w, &x).unwrap();
            let grads = backward(&adj, &w, &cache, &loss(&scores).score_grads).unwrap();
            let value = |p: &ModelParams, x: &Array2<f64>| loss(&forward(&adj, p, x).unwrap().0).value;
            let by_w = fd_worst(|f| value(&with_flat(&w, f), &x), &w.to_flat(), &grads.params.to_flat());
            let by_x = fd_worst(
                |f| value(&w, &with_matrix(&x, f)),
                &flat_matrix(&x),
                &flat_matrix(grads.inputs.as_ref().unwrap()),
            );
            by_w.max(by_x)
        }
        GradCase::DetectorObjective => {
            let step = detector_step(&problem, &cfg, &w, &adj, &x, epoch, true).unwrap();
            let value = |p: &ModelParams, x: &Array2<f64>| detector_step(&problem, &cfg, p, &adj, x, epoch, false).unwrap().value;
            let by_w = fd_worst(|f| value(&with_flat(&w, f), &x), &w.to_flat(), &step.grads.to_flat());
            let by_x = fd_worst(
                |f| value(&w, &with_matrix(&x, f)),
                &flat_matrix(&x),
                &flat_matrix(step.input_grads.as_ref().unwrap()),
            );
            by_w.max(by_x)
        }
        GradCase::Subgroup => {
            let value_grad = |t: &ModelParams| {
                let (scores, cache) = infer_aprime(&problem, t, &adj).unwrap();
                inferencer_step(&problem, &cfg, t, &adj, &scores, &cache, None).unwrap()
            };
            let (_, grads) = value_grad(&theta);
            fd_worst(|f| value_grad(&with_flat(&theta, f)).0, &theta.to_flat(), &grads.to_flat())
        }
        GradCase::Joint => {
            let (_, gw, gt) = coupled_detector_loss(&problem, &cfg, &w, &theta, epoch).unwrap();
            let value = |w: &ModelParams, t: &ModelParams| coupled_detector_loss(&problem, &cfg, w, t, epoch).unwrap().0;
            let by_theta = fd_worst(|f| value(&w, &with_flat(&theta, f)), &theta.to_flat(), &gt.to_flat());
            let by_w = fd_worst(|f| value(&with_flat(&w, f), &theta), &w.to_flat(), &gw.to_flat());
            by_theta.max(by_w)
        }
    }
}

fn gradients() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let cases = [
        GradCase::Detection,
        GradCase::Fairness,
        GradCase::DetectorObjective,
        GradCase::Subgroup,
        GradCase::Joint,
    ];
    let mut worst = 0.0f64;
    let mut instances = 0;
    for case in cases {
        for _ in 0..20 {
            let e = grad_instance(case, &mut rng);
            ensure(e <= FD_TOL, || format!("{case:?}: relative error {e:e}"))?;
            worst = worst.max(e);
            instances += 1;
        }
    }
    within(start.elapsed(), Duration::from_secs(120))?;
    Ok(format!("{instances} instances, worst relative error {worst:.2e}, {:.1?}", start.elapsed()))
}

// ---------------------------------------------------------------------------
// 2. Metrics against exhaustive enumeration

/// Every permutation of `0..n` (Heap's algorithm).
fn permutations(n: usize) -> Vec<Vec<usize>> {
    fn heap(k: usize, a: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if k <= 1 {
            out.push(a.clone());
            return;
        }
        for i in 0..k {
            heap(k - 1, a, out);
            let j = if k.is_multiple_of(2) { i } else { 0 };
            a.swap(j, k - 1);
        }
    }
    let mut out = Vec::new();
    heap(n, &mut (0..n).collect(), &mut out);
    out
}

fn dcg_of(order: &[usize], items: &[Scored]) -> f64 {
    order
        .iter()
        .enumerate()
        .filter(|(_, &k)| items[k].spam)
        .map(|(r, _)| 1.0 / ((r + 2) as f64).log2())
        .sum()
}

/// The one permutation in which every earlier item outranks every later
/// one (higher score, then lower id), and the best achievable DCG.
fn ndcg_oracle(items: &[Scored], perms: &[Vec<usize>]) -> Option<f64> {
    if !items.iter().any(|s| s.spam) {
        return None;
    }
    let outranks = |a: &Scored, b: &Scored| a.score > b.score || (a.score == b.score && a.id < b.id);
    let mut realised = None;
    let mut ideal = f64::NEG_INFINITY;
    for p in perms {
        ideal = ideal.max(dcg_of(p, items));
        let consistent = (0..p.len()).all(|i| (i + 1..p.len()).all(|j| outranks(&items[p[i]], &items[p[j]])));
        if consistent {
            assert!(realised.is_none(), "ranking must be unique");
            realised = Some(dcg_of(p, items));
        }
    }
    Some(realised.expect("some permutation is consistent") / ideal)
}

fn auc_oracle(preds: &[(f64, bool)]) -> Option<f64> {
    let (mut wins, mut pairs) = (0.0, 0usize);
    for p in preds.iter().filter(|p| p.1) {
        for n in preds.iter().filter(|n| !n.1) {
            pairs += 1;
            if p.0 > n.0 {
                wins += 1.0;
            } else if p.0 == n.0 {
                wins += 0.5;
            }
        }
    }
    (pairs > 0).then(|| wins / pairs as f64)
}

fn afrr_oracle(items: &[Scored], groups: &[u8], subgroups: &[Option<u8>], a_prime: u8) -> Option<f64> {
    let negatives: Vec<&Scored> = items.iter().zip(groups).filter(|(s, &a)| a == 0 && !s.spam).map(|(s, _)| s).collect();
    let mut spams: Vec<&Scored> = (0..items.len())
        .filter(|&k| items[k].spam && groups[k] == 0 && subgroups[k] == Some(a_prime))
        .map(|k| &items[k])
        .collect();
    if negatives.is_empty() || spams.is_empty() {
        return None;
    }
    spams.sort_by_key(|s| s.id);
    let ratio = |s: &Scored| negatives.iter().filter(|n| n.score > s.score).count() as f64 / negatives.len() as f64;
    Some(spams.iter().map(|s| ratio(s)).sum::<f64>() / spams.len() as f64)
}

fn metrics() -> Outcome {
    let start = Instant::now();
    let perms: Vec<Vec<Vec<usize>>> = (0..=8).map(permutations).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut defined = [0usize; 4];
    for case in 0..1000 {
        let n = rng.gen_range(1..=8);
        let mut ids: Vec<usize> = (0..20).collect();
        ids.shuffle(&mut rng);
        // Coarse scores so that ties are common.
        let items: Vec<Scored> = (0..n)
            .map(|k| Scored { id: NodeId(ids[k]), score: rng.gen_range(0..5) as f64 / 4.0, spam: rng.gen_bool(0.4) })
            .collect();
        let groups: Vec<u8> = (0..n).map(|_| rng.gen_range(0..2)).collect();
        let subgroups: Vec<Option<u8>> = (0..n).map(|_| Some(rng.gen_range(0..2))).collect();
        let pick = |g: u8| -> Vec<Scored> { items.iter().zip(&groups).filter(|(_, &a)| a == g).map(|(s, _)| *s).collect() };
        let sub_ndcg = |g: u8| {
            let part = pick(g);
            ndcg_oracle(&part, &perms[part.len()])
        };

        let got = ndcg(&items).ok();
        let want = ndcg_oracle(&items, &perms[n]);
        ensure(got == want, || format!("case {case}: ndcg {got:?} vs {want:?} on {items:?}"))?;

        let got = delta_ndcg(&items, &groups).ok();
        let want = sub_ndcg(1).zip(sub_ndcg(0)).map(|(p, f)| p - f);
        ensure(got == want, || format!("case {case}: delta_ndcg {got:?} vs {want:?}"))?;

        for a_prime in [0, 1] {
            let got = afrr(&items, &groups, &subgroups, a_prime).ok();
            let want = afrr_oracle(&items, &groups, &subgroups, a_prime);
            ensure(got == want, || format!("case {case}: afrr({a_prime}) {got:?} vs {want:?}"))?;
            defined[2] += want.is_some() as usize;
        }

        let preds: Vec<(f64, bool)> = items.iter().map(|s| (s.score, s.spam)).collect();
        let got = auc(&preds).ok();
        let want = auc_oracle(&preds);
        ensure(got == want, || format!("case {case}: auc {got:?} vs {want:?}"))?;

        defined[0] += ndcg_oracle(&items, &perms[n]).is_some() as usize;
        defined[1] += (sub_ndcg(1).is_some() && sub_ndcg(0).is_some()) as usize;
        defined[3] += want.is_some() as usize;
    }
    within(start.elapsed(), Duration::from_secs(60))?;
    ensure(defined.iter().all(|&c| c >= 100), || format!("too few defined instances: {defined:?}"))?;
    Ok(format!(
        "1000 instances exact; defined ndcg/delta/afrr/auc = {defined:?}, {:.1?}",
        start.elapsed()
    ))
}

// ---------------------------------------------------------------------------
// 3. Augmentation invariants

fn is_mixed(g: &ReviewGraph, u: NodeId) -> bool {
    let labels: Vec<bool> = g.reviews_of(u).map(|r| g.label(r).unwrap()).collect();
    labels.contains(&true) && labels.contains(&false)
}

fn augmentation_case(rng: &mut ChaCha8Rng) -> Result<(), String> {
    let users = rng.gen_range(5..=25);
    let shape = Shape {
        users,
        heavy: rng.gen_range(1..=users / 2),
        products: rng.gen_range(2..=6),
        heavy_reviews: (3, 8),
        light_reviews: (1, 2),
        spam_rate: rng.gen_range(0.2..0.8),
        dim: 3,
    };
    let g = random_graph(rng, &shape);
    let p = *[20, 30, 40, 50].choose(rng).unwrap();
    let groups = assign_subgroups(&g, &assign_groups(&g, p).unwrap());
    let split = split_users(&g, [0.5, 0.2, 0.3], rng.gen()).unwrap();
    let k = rng.gen_range(1..=4);
    let view = replicate_mixed_users(&g, &groups, &split, k);
    let vg = view.graph();
    let n = g.node_count();

    // Replica counts and degrees.
    let sources: Vec<NodeId> = split
        .users(Part::Train)
        .iter()
        .copied()
        .filter(|&u| groups.a(u) == Some(0) && is_mixed(&g, u))
        .collect();
    ensure(vg.users().len() == g.users().len() + k * sources.len(), || "replica user count".into())?;
    for &s in &sources {
        let replicas: Vec<NodeId> = vg.users().iter().copied().filter(|&u| view.replica_of(u) == Some(s)).collect();
        ensure(replicas.len() == k, || format!("{} replicas of {s:?}", replicas.len()))?;
        for &r in &replicas {
            ensure(vg.degree(r) == g.degree(s), || format!("degree of replica {r:?}"))?;
            ensure(vg.feature(r) == g.feature(s), || "replica features".into())?;
            let mut got: Vec<(Option<bool>, Option<NodeId>)> = vg.reviews_of(r).map(|x| (vg.label(x), vg.product_of(x))).collect();
            let mut want: Vec<(Option<bool>, Option<NodeId>)> = g.reviews_of(s).map(|x| (g.label(x), g.product_of(x))).collect();
            got.sort();
            want.sort();
            ensure(got == want, || "replica reviews differ in label or product".into())?;
            ensure(view.groups().a(r) == Some(0) && view.groups().a_prime(r) == Some(1), || "replica groups".into())?;
        }
    }
    for v in 0..n {
        if g.kind(NodeId(v)) != NodeKind::Product {
            ensure(vg.adjacency().neighbors(v) == g.adjacency().neighbors(v), || format!("original node {v} rewired"))?;
        }
    }

    // Pruning.
    let rho = rng.gen_range(0.0..0.95);
    let mask = prune_nonspam_edges(&view, rho, rng.gen()).unwrap();
    let adj = view.adjacency(&mask);
    let spam_edges = |a: &fairrank::graph::Adjacency| {
        vg.reviews().iter().filter(|&&r| vg.label(r) == Some(true)).map(|&r| a.degree(r.0)).sum::<usize>()
    };
    ensure(spam_edges(&adj) == spam_edges(vg.adjacency()), || "a spam edge was pruned".into())?;
    for v in 0..n {
        ensure(adj.neighbors(v) == vg.adjacency().neighbors(v), || format!("pruning touched original node {v}"))?;
    }
    for (r, _) in view.replica_users() {
        let attached = view.attached_reviews(&adj, r);
        let spam = attached.iter().filter(|&&x| vg.label(x) == Some(true)).count();
        let all_spam = vg.reviews_of(r).filter(|&x| vg.label(x) == Some(true)).count();
        ensure(spam == all_spam, || format!("replica {r:?} lost a spam"))?;
        ensure(attached.len() > spam, || format!("replica {r:?} lost every non-spam"))?;
    }

    // Mixup.
    let d = vg.feature_dim();
    let params = perturbed(&init_params(&[d, 6, 4, 1], rng.gen()).unwrap(), rng, 0.2);
    let x = vg.features().clone();
    let (scores, cache) = forward(&adj, &params, &x).unwrap();
    let reviews = vg.reviews();
    for _ in 0..5 {
        let i = *reviews.choose(rng).unwrap();
        let j = *reviews.choose(rng).unwrap();
        let alpha = rng.gen_range(0.0..1.0);
        let mix = |first, second, alpha| {
            let pair = MixupPair { first, second, alpha, target: 1.0 };
            mixup_forward(&adj, &params, &cache, &pair).unwrap().score
        };
        let (a, b) = (mix(i, j, alpha), mix(j, i, 1.0 - alpha));
        ensure((a - b).abs() <= 1e-12, || format!("exchange symmetry {a} vs {b}"))?;
        let one = mix(i, j, 1.0);
        ensure((one - scores[i.0]).abs() <= 1e-12, || format!("alpha=1 gives {one}, node scores {}", scores[i.0]))?;
        let zero = mix(i, j, 0.0);
        ensure((zero - scores[j.0]).abs() <= 1e-12, || format!("alpha=0 gives {zero}, node scores {}", scores[j.0]))?;
    }
    Ok(())
}

fn augmentation() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    for case in 0..100 {
        augmentation_case(&mut rng).map_err(|e| format!("graph {case}: {e}"))?;
    }
    Ok("100 fuzzed graphs".into())
}

// ---------------------------------------------------------------------------
// 4 and 5. Ordering on the default preset

fn manifest(preset: &str, seeds: u64, detector: &str, sources: &str) -> RunManifest {
    let mut s = BTreeMap::new();
    s.insert("data".to_string(), format!("gen:{preset}"));
    s.insert("seeds".to_string(), seeds.to_string());
    s.insert("detector".to_string(), detector.to_string());
    s.insert("aprime".to_string(), sources.to_string());
    RunManifest::from_settings(&s).expect("valid manifest")
}

fn run(m: &RunManifest) -> Vec<ReportRow> {
    execute(m, None).expect("runs succeed")
}

fn mean_of(rows: &[ReportRow], source: AprimeSource, f: impl Fn(&ReportRow) -> f64) -> f64 {
    let v: Vec<f64> = rows.iter().filter(|r| r.cell.source == source).map(f).collect();
    v.iter().sum::<f64>() / v.len() as f64
}

struct DefaultRuns {
    wo: f64,
    gt: f64,
    random: f64,
    joint: f64,
    elapsed: Duration,
}

fn default_runs() -> DefaultRuns {
    let start = Instant::now();
    let m = manifest("default", 10, "gnn", "wo");
    assert_eq!((m.grid.p[0], m.grid.k[0], m.grid.rho[0], m.training.alpha, m.training.lambda, m.training.epochs), (20, 50, 0.5, 0.8, 5.0, 300));
    let mut rows = run(&m);
    rows.extend(run(&manifest("default", 10, "gnn-s1tr", "gt,random,joint")));
    let delta = |r: &ReportRow| r.test.delta_ndcg;
    DefaultRuns {
        wo: mean_of(&rows, AprimeSource::Wo, delta),
        gt: mean_of(&rows, AprimeSource::Gt, delta),
        random: mean_of(&rows, AprimeSource::Random, delta),
        joint: mean_of(&rows, AprimeSource::Joint, delta),
        elapsed: start.elapsed(),
    }
}

fn ordering(r: &DefaultRuns) -> Outcome {
    let summary = format!("joint {:.4} vs wo {:.4}, {:.0?}", r.joint, r.wo, r.elapsed);
    ensure(r.joint < r.wo, || summary.clone())?;
    within(r.elapsed, Duration::from_secs(30 * 60))?;
    Ok(summary)
}

fn noise(r: &DefaultRuns) -> Outcome {
    let summary = format!("gt {:.4}, joint {:.4}, random {:.4}", r.gt, r.joint, r.random);
    ensure(r.gt <= r.joint && r.random >= r.joint && r.gt < r.random, || summary.clone())?;
    Ok(summary)
}

// ---------------------------------------------------------------------------
// 6. Joint against Pre-trained on the separable preset

fn coupling() -> Outcome {
    let rows = run(&manifest("separable", 10, "gnn-s1tr", "pretrained,joint"));
    let auc_of = |r: &ReportRow| r.test.auc_aprime.expect("learned sources report an AUC");
    let joint = mean_of(&rows, AprimeSource::Joint, auc_of);
    let pre = mean_of(&rows, AprimeSource::Pretrained, auc_of);
    let summary = format!("AUC joint {joint:.4} vs pretrained {pre:.4}");
    ensure(joint >= pre - 0.02, || summary.clone())?;

    let table = emit_plotdata(&results_csv(&rows).unwrap(), Analysis::AucVsDelta).map_err(|e| e.to_string())?;
    let mut reader = csv::Reader::from_reader(table.as_bytes());
    let header: Vec<String> = reader.headers().unwrap().iter().map(str::to_string).collect();
    let expected = [
        "dataset", "p", "detector_variant", "k", "rho", "seed", "auc_joint", "auc_pretrained", "auc_gap", "delta_joint",
        "delta_pretrained", "delta_gap",
    ];
    ensure(header == expected, || format!("auc_vs_delta header {header:?}"))?;
    let records: Vec<csv::StringRecord> = reader.records().collect::<Result<_, _>>().map_err(|e| e.to_string())?;
    ensure(records.len() == 10, || format!("{} paired rows", records.len()))?;
    let mut seeds = Vec::new();
    for r in &records {
        let num = |i: usize| r[i].parse::<f64>().map_err(|_| format!("field {} = {:?}", expected[i], &r[i]));
        let (aj, ap, ag, dj, dp, dg) = (num(6)?, num(7)?, num(8)?, num(9)?, num(10)?, num(11)?);
        ensure([aj, ap, dj, dp].iter().all(|v| v.is_finite()) && (0.0..=1.0).contains(&aj) && (0.0..=1.0).contains(&ap), || "values out of range".into())?;
        ensure(ag == aj - ap && dg == dp - dj, || "gap columns inconsistent".into())?;
        ensure(&r[0] == "separable", || "dataset column".into())?;
        seeds.push(r[5].to_string());
    }
    seeds.sort();
    seeds.dedup();
    ensure(seeds.len() == 10, || "one row per seed".into())?;
    Ok(summary + ", auc_vs_delta table well-formed")
}

// ---------------------------------------------------------------------------
// 7. Replay

fn replay() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut m = manifest("small", 2, "gnn-s1tr", "wo,random,gt,pretrained,joint");
    m.training.epochs = 20;
    m.grid.k = vec![0, 5];
    m.out = dir.path().join("first");
    m.jobs = 2;
    run_and_write(&m).map_err(|e| e.to_string())?;
    let mut again = RunManifest::read(&m.out.join("manifest.txt")).map_err(|e| e.to_string())?;
    again.out = dir.path().join("second");
    again.jobs = 1;
    run_and_write(&again).map_err(|e| e.to_string())?;
    let mut third = again.clone();
    third.out = dir.path().join("third");
    run_and_write(&third).map_err(|e| e.to_string())?;
    let read = |d: &str, f: &str| std::fs::read(dir.path().join(d).join(f)).unwrap();
    for f in ["results.csv", "aggregate.csv"] {
        ensure(read("first", f) == read("second", f) && read("second", f) == read("third", f), || format!("{f} differs"))?;
    }
    let rows = String::from_utf8(read("first", "results.csv")).unwrap().lines().count() - 1;
    Ok(format!("{rows} rows identical across three runs"))
}

// ---------------------------------------------------------------------------
// 8. Ablation identity

fn ablation() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(808);
    let shape = Shape {
        users: 10,
        heavy: 4,
        products: 4,
        heavy_reviews: (5, 8),
        light_reviews: (1, 2),
        spam_rate: 0.5,
        dim: 4,
    };
    let (problem, cfg) = loop {
        let g = random_graph(&mut rng, &shape);
        if g.node_count() != 50 {
            continue;
        }
        let cfg = TrainingConfig {
            epochs: 10,
            aprime: AprimeSource::Joint,
            variant: DetectorVariant::GnnS1Tr,
            copies: 2,
            percentile: 30,
            hidden: vec![8],
            seed: 8,
            ..TrainingConfig::default()
        };
        let Ok(split) = split_users(&g, [0.6, 0.2, 0.2], rng.gen()) else { continue };
        let Ok(problem) = Problem::with_split(&g, &cfg, split) else { continue };
        let pre_cfg = TrainingConfig { aprime: AprimeSource::Pretrained, ..cfg.clone() };
        if problem.view().copies() > 0
            && problem.view().replica_users().next().is_some()
            && pretrain_inferencer(&problem, &pre_cfg).is_ok()
            && train_joint(&problem, &cfg, &TrainOptions::default()).is_ok()
        {
            break (problem, cfg);
        }
    };
    let pre_cfg = TrainingConfig { aprime: AprimeSource::Pretrained, ..cfg.clone() };
    let (theta, _) = pretrain_inferencer(&problem, &pre_cfg).unwrap();
    let opts = TrainOptions { inferencer_init: Some(theta.clone()), trace: true };
    let (_, _, frozen) = train_detector_frozen(&problem, &pre_cfg, &theta, &opts).unwrap();

    let ablated_cfg = TrainingConfig { couple: false, lr_inferencer: 0.0, ..cfg.clone() };
    let ablated = train_joint(&problem, &ablated_cfg, &opts).unwrap();
    let bits = |p: &ModelParams| p.to_flat().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    ensure(frozen.len() == 10 && ablated.trajectory.len() == 10, || "ten epochs traced".into())?;
    for (e, (a, b)) in ablated.trajectory.iter().zip(&frozen).enumerate() {
        ensure(bits(a) == bits(b), || format!("trajectories diverge at epoch {e}"))?;
    }
    ensure(bits(ablated.inferencer.as_ref().unwrap()) == bits(&theta), || "inferencer moved".into())?;

    // Full joint training from the same start must depart from it.
    let coupled = train_joint(&problem, &cfg, &opts).unwrap();
    ensure(coupled.trajectory.iter().zip(&frozen).any(|(a, b)| bits(a) != bits(b)), || {
        "joint training never left the frozen trajectory".into()
    })?;
    Ok(format!("10 epochs bitwise equal on a {}-node graph", problem.base().node_count()))
}

// ---------------------------------------------------------------------------

fn report(n: usize, name: &str, outcome: Outcome, failures: &mut usize) {
    match outcome {
        Ok(detail) => println!("criterion {n} {name:<24} PASS  {detail}"),
        Err(detail) => {
            *failures += 1;
            println!("criterion {n} {name:<24} FAIL  {detail}")
        }
    }
}

/// Criterion numbers given on the command line select a subset; none runs all.
fn main() {
    let picked: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    // Quiet under harness probes such as `--list`.
    if picked.is_empty() && std::env::args().skip(1).any(|a| a.starts_with("--list")) {
        return;
    }
    let wanted = |n: usize| picked.is_empty() || picked.contains(&n);
    let mut failures = 0;
    let mut ran = 0;
    let mut check = |n: usize, name: &str, f: &mut dyn FnMut() -> Outcome| {
        if wanted(n) {
            ran += 1;
            report(n, name, f(), &mut failures);
        }
    };
    check(1, "gradient exactness", &mut gradients);
    check(2, "metric oracles", &mut metrics);
    check(3, "augmentation invariants", &mut augmentation);
    let runs = (wanted(4) || wanted(5)).then(default_runs);
    if let Some(runs) = &runs {
        check(4, "fairness ordering", &mut || ordering(runs));
        check(5, "noise monotonicity", &mut || noise(runs));
    }
    check(6, "joint vs pretrained", &mut coupling);
    check(7, "manifest replay", &mut replay);
    check(8, "ablation identity", &mut ablation);
    println!("acceptance: {} of {ran} criteria passed", ran - failures);
    if failures > 0 {
        std::process::exit(1);
    }
}
