//! Replication of mixed favoured users, per-epoch edge pruning, and graph
//! mixup between a favoured training spam and a partner review.

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{mixed_user, Adjacency, GroupAssignment, NodeId, NodeKind, Part, ReviewGraph, Split};
use crate::nn::{activate, activation_slope, forward, mean_into, ForwardCache, ModelParams, RepGrads};

/// The base graph with `k` copies of every mixed favoured training user
/// (and their reviews) appended after the original nodes.
#[derive(Debug, Clone)]
pub struct AugmentedView {
    graph: ReviewGraph,
    base_nodes: usize,
    k: usize,
    replica_of: Vec<Option<NodeId>>,
    groups: GroupAssignment,
    split: Split,
    /// Replica (user, non-spam review) edges, grouped by replica user.
    prunable: Vec<(usize, usize)>,
    /// Range of `prunable` owned by each replica user.
    owners: Vec<std::ops::Range<usize>>,
}

impl AugmentedView {
    pub fn graph(&self) -> &ReviewGraph {
        &self.graph
    }

    pub fn groups(&self) -> &GroupAssignment {
        &self.groups
    }

    pub fn split(&self) -> &Split {
        &self.split
    }

    pub fn base_node_count(&self) -> usize {
        self.base_nodes
    }

    pub fn copies(&self) -> usize {
        self.k
    }

    /// Original node a replica was copied from; `None` for original nodes.
    pub fn replica_of(&self, v: NodeId) -> Option<NodeId> {
        self.replica_of[v.0]
    }

    pub fn is_replica(&self, v: NodeId) -> bool {
        v.0 >= self.base_nodes
    }

    /// Replica users with their original, in node order.
    pub fn replica_users(&self) -> impl Iterator<Item = (NodeId, NodeId)> + '_ {
        self.graph.users().iter().filter_map(|&u| self.replica_of(u).map(|o| (u, o)))
    }

    /// Non-spam user-review edges of replicas that pruning may drop.
    pub fn prunable_edges(&self) -> &[(usize, usize)] {
        &self.prunable
    }

    /// Message-passing structure with the edges dropped by `mask` removed.
    pub fn adjacency(&self, mask: &EdgeMask) -> Adjacency {
        if mask.keep.iter().all(|&k| k) {
            return self.graph.adjacency().clone();
        }
        let mut dropped: Vec<(usize, usize)> = self
            .prunable
            .iter()
            .zip(&mask.keep)
            .filter(|(_, &k)| !k)
            .map(|(&(u, r), _)| (u.min(r), u.max(r)))
            .collect();
        dropped.sort_unstable();
        let edges = self
            .graph
            .edges()
            .iter()
            .map(|&(a, b)| (a.0, b.0))
            .filter(|e| dropped.binary_search(e).is_err());
        Adjacency::from_edges(self.graph.node_count(), edges)
    }

    /// Reviews of `user` still attached to it under `mask`.
    pub fn attached_reviews(&self, adj: &Adjacency, user: NodeId) -> Vec<NodeId> {
        adj.neighbors(user.0)
            .iter()
            .map(|&r| NodeId(r))
            .filter(|&r| self.graph.kind(r) == NodeKind::Review)
            .collect()
    }
}

/// Which replica edges survive one epoch; aligned with
/// [`AugmentedView::prunable_edges`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EdgeMask {
    pub keep: Vec<bool>,
}

impl EdgeMask {
    pub fn keep_all(view: &AugmentedView) -> Self {
        EdgeMask {
            keep: vec![true; view.prunable.len()],
        }
    }
}

/// Appends `k` copies of each mixed favoured training user.
///
/// Mixed status is read from the review labels. Replica users are favoured
/// (`A = 0`), mixed (`A' = 1`) and belong to the training split; replica
/// reviews keep their original's label, features and product.
pub fn replicate_mixed_users(g: &ReviewGraph, groups: &GroupAssignment, split: &Split, k: usize) -> AugmentedView {
    let sources: Vec<NodeId> = split
        .users(Part::Train)
        .iter()
        .copied()
        .filter(|&u| groups.is_favored(u) && mixed_user(g, u))
        .collect();
    let n = g.node_count();
    let mut kinds = g.kinds().to_vec();
    let mut labels = g.labels().to_vec();
    let mut rows: Vec<usize> = (0..n).collect();
    let mut edges: Vec<(NodeId, NodeId)> = g.edges().to_vec();
    let mut replica_of = vec![None; n];
    let mut a = groups.a_values().to_vec();
    let mut a_prime = groups.a_prime_values().to_vec();
    let mut parts = split.parts().to_vec();
    let mut train = split.users(Part::Train).to_vec();
    let mut prunable = Vec::new();
    let mut owners = Vec::new();
    for &u in &sources {
        let reviews: Vec<NodeId> = g.reviews_of(u).collect();
        for _ in 0..k {
            let ru = kinds.len();
            kinds.push(NodeKind::User);
            labels.push(None);
            rows.push(u.0);
            replica_of.push(Some(u));
            a.push(Some(0));
            a_prime.push(Some(1));
            parts.push(Some(Part::Train));
            train.push(NodeId(ru));
            let start = prunable.len();
            for &r in &reviews {
                let rr = kinds.len();
                kinds.push(NodeKind::Review);
                labels.push(g.label(r));
                rows.push(r.0);
                replica_of.push(Some(r));
                a.push(Some(0));
                a_prime.push(None);
                parts.push(Some(Part::Train));
                edges.push((NodeId(ru), NodeId(rr)));
                edges.push((NodeId(rr), g.product_of(r).expect("review has a product")));
                if g.label(r) == Some(false) {
                    prunable.push((ru, rr));
                }
            }
            owners.push(start..prunable.len());
        }
    }
    let features = g.features().select(ndarray::Axis(0), &rows);
    let graph = ReviewGraph::from_parts(kinds, labels, features, &edges).expect("replicas preserve graph invariants");
    let groups = GroupAssignment::from_parts(groups.percentile(), groups.cutoff_degree(), a, a_prime);
    let (valid, test) = (split.users(Part::Valid).to_vec(), split.users(Part::Test).to_vec());
    let split = Split::from_parts(train, valid, test, parts);
    AugmentedView {
        graph,
        base_nodes: n,
        k,
        replica_of,
        groups,
        split,
        prunable,
        owners,
    }
}

/// Draws one epoch's mask: every replica keeps one uniformly chosen
/// non-spam edge, and each of its other non-spam edges survives with
/// probability `1 - rho`. Spam edges and original nodes are never touched.
pub fn prune_nonspam_edges(view: &AugmentedView, rho: f64, epoch_seed: u64) -> Result<EdgeMask> {
    if !(0.0..1.0).contains(&rho) {
        return Err(Error::Config(format!("pruning rate must lie in [0, 1), got {rho}")));
    }
    let mut keep = vec![true; view.prunable.len()];
    if rho == 0.0 {
        return Ok(EdgeMask { keep });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(epoch_seed);
    for range in &view.owners {
        if range.is_empty() {
            continue;
        }
        let forced = range.start + rng.gen_range(0..range.len());
        for e in range.clone() {
            let survive = rng.gen::<f64>() >= rho;
            keep[e] = e == forced || survive;
        }
    }
    Ok(EdgeMask { keep })
}

/// Source of the second node of a mixup pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MixupVariant {
    /// Protected training spams.
    S1Tr,
    /// Favoured test reviews.
    S0Te,
    /// Protected test reviews.
    S1Te,
}

impl MixupVariant {
    fn set_name(self) -> &'static str {
        match self {
            MixupVariant::S1Tr => "protected training spams",
            MixupVariant::S0Te => "favoured test reviews",
            MixupVariant::S1Te => "protected test reviews",
        }
    }
}

/// One synthetic review: an `alpha`-mixture of `first` and `second`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MixupPair {
    pub first: NodeId,
    pub second: NodeId,
    pub alpha: f64,
    pub target: f64,
}

/// Favoured training spams, the pool every pair's first node comes from.
pub fn favored_train_spams(g: &ReviewGraph, groups: &GroupAssignment, split: &Split) -> Vec<NodeId> {
    g.reviews()
        .iter()
        .copied()
        .filter(|&r| groups.is_favored(r) && split.part(r) == Some(Part::Train) && g.label(r) == Some(true))
        .collect()
}

fn partner_set(g: &ReviewGraph, groups: &GroupAssignment, split: &Split, variant: MixupVariant) -> Vec<NodeId> {
    g.reviews()
        .iter()
        .copied()
        .filter(|&r| match variant {
            MixupVariant::S1Tr => groups.a(r) == Some(1) && split.part(r) == Some(Part::Train) && g.label(r) == Some(true),
            MixupVariant::S0Te => groups.a(r) == Some(0) && split.part(r) == Some(Part::Test),
            MixupVariant::S1Te => groups.a(r) == Some(1) && split.part(r) == Some(Part::Test),
        })
        .collect()
}

/// Samples `count` pairs with replacement. The synthetic target is the
/// label mixture when both labels are training labels, otherwise the first
/// node's label.
pub fn sample_mixup_pairs(
    g: &ReviewGraph,
    groups: &GroupAssignment,
    split: &Split,
    variant: MixupVariant,
    count: usize,
    alpha: f64,
    seed: u64,
) -> Result<Vec<MixupPair>> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Config(format!("mixup weight must lie in [0, 1], got {alpha}")));
    }
    let firsts = favored_train_spams(g, groups, split);
    if firsts.is_empty() {
        return Err(Error::EmptySourceSet("favoured training spams"));
    }
    let seconds = partner_set(g, groups, split, variant);
    if seconds.is_empty() {
        return Err(Error::EmptySourceSet(variant.set_name()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..count)
        .map(|_| {
            let first = *firsts.choose(&mut rng).unwrap();
            let second = *seconds.choose(&mut rng).unwrap();
            let target = match variant {
                MixupVariant::S1Tr => {
                    let y = |r: NodeId| if g.label(r) == Some(true) { 1.0 } else { 0.0 };
                    alpha * y(first) + (1.0 - alpha) * y(second)
                }
                MixupVariant::S0Te | MixupVariant::S1Te => 1.0,
            };
            MixupPair {
                first,
                second,
                alpha,
                target,
            }
        })
        .collect())
}

/// Per-layer values of one synthetic node's two branches.
#[derive(Debug, Clone)]
pub struct MixupTrace {
    pair: MixupPair,
    /// Aggregated inputs of branch i and branch j per layer.
    agg: Vec<[Vec<f64>; 2]>,
    pre: Vec<[Vec<f64>; 2]>,
    out: Vec<[Vec<f64>; 2]>,
    pub score: f64,
}

fn row(a: &Array2<f64>, i: usize) -> &[f64] {
    let w = a.ncols();
    &a.as_slice().expect("standard layout")[i * w..(i + 1) * w]
}

/// Score of the synthetic node, given a forward cache of the real graph.
///
/// Both branches start from `alpha x_i + (1 - alpha) x_j`; branch i
/// averages with the neighbours of `i`, branch j with those of `j`, and the
/// two branch outputs are re-mixed after every layer.
pub fn mixup_forward(adj: &Adjacency, params: &ModelParams, cache: &ForwardCache, pair: &MixupPair) -> Result<MixupTrace> {
    let n = cache.node_count();
    for v in [pair.first, pair.second] {
        if v.0 >= n {
            return Err(Error::UnknownNode(v.0));
        }
    }
    if adj.node_count() != n || cache.reps.len() != params.depth() + 1 {
        return Err(Error::CacheMismatch);
    }
    let alpha = pair.alpha;
    let (i, j) = (pair.first.0, pair.second.0);
    let x0 = &cache.reps[0];
    let mut mixed: Vec<f64> = row(x0, i).iter().zip(row(x0, j)).map(|(a, b)| alpha * a + (1.0 - alpha) * b).collect();
    let depth = params.depth();
    let mut trace = MixupTrace {
        pair: *pair,
        agg: Vec::with_capacity(depth),
        pre: Vec::with_capacity(depth),
        out: Vec::with_capacity(depth),
        score: 0.0,
    };
    for (l, layer) in params.layers.iter().enumerate() {
        let last = l + 1 == depth;
        let data = cache.reps[l].as_slice().ok_or(Error::CacheMismatch)?;
        let mut agg = [vec![0.0; mixed.len()], vec![0.0; mixed.len()]];
        mean_into(&mut agg[0], &mixed, data, adj.neighbors(i));
        mean_into(&mut agg[1], &mixed, data, adj.neighbors(j));
        let pre = agg.clone().map(|a| {
            let z = layer.weight.dot(&Array1::from(a)) + &layer.bias;
            z.to_vec()
        });
        let out = pre.clone().map(|z| z.iter().map(|&v| activate(v, last)).collect::<Vec<_>>());
        mixed = out[0].iter().zip(&out[1]).map(|(a, b)| alpha * a + (1.0 - alpha) * b).collect();
        trace.agg.push(agg);
        trace.pre.push(pre);
        trace.out.push(out);
    }
    trace.score = mixed[0];
    Ok(trace)
}

/// Back-propagates `d_score` through a synthetic node: parameter gradients
/// are added to `grads`, and gradients on the real representations it read
/// are added to `inject` for the main backward pass.
pub fn mixup_backward(
    adj: &Adjacency,
    params: &ModelParams,
    trace: &MixupTrace,
    d_score: f64,
    grads: &mut ModelParams,
    inject: &mut RepGrads,
) {
    let alpha = trace.pair.alpha;
    let centers = [trace.pair.first.0, trace.pair.second.0];
    let weights = [alpha, 1.0 - alpha];
    let depth = params.depth();
    let mut d_mixed = vec![d_score];
    for l in (0..depth).rev() {
        let last = l + 1 == depth;
        let layer = &params.layers[l];
        let mut d_below = vec![0.0; layer.weight.ncols()];
        for b in 0..2 {
            let d_z: Vec<f64> = d_mixed
                .iter()
                .zip(&trace.pre[l][b])
                .zip(&trace.out[l][b])
                .map(|((g, &z), &h)| weights[b] * g * activation_slope(z, h, last))
                .collect();
            let d_z = Array1::from(d_z);
            let a = Array1::from(trace.agg[l][b].clone());
            let gl = &mut grads.layers[l];
            gl.weight.zip_mut_with(&d_z.view().insert_axis(ndarray::Axis(1)).dot(&a.view().insert_axis(ndarray::Axis(0))), |w, g| *w += g);
            gl.bias += &d_z;
            let d_agg = layer.weight.t().dot(&d_z);
            let count = (1 + adj.degree(centers[b])) as f64;
            let share = d_agg.mapv(|v| v / count);
            let level = &mut inject.levels[l];
            for &u in adj.neighbors(centers[b]) {
                let mut r = level.row_mut(u);
                r += &share;
            }
            for (d, s) in d_below.iter_mut().zip(share.iter()) {
                *d += s;
            }
        }
        d_mixed = d_below;
    }
    for b in 0..2 {
        let mut r = inject.levels[0].row_mut(centers[b]);
        r.zip_mut_with(&Array1::from(d_mixed.clone()), |x, g| *x += weights[b] * g);
    }
}

/// Convenience wrapper: forward over the real graph, then the synthetic node.
pub fn mixup_predict(adj: &Adjacency, params: &ModelParams, features: &Array2<f64>, pair: &MixupPair) -> Result<f64> {
    let (_, cache) = forward(adj, params, features)?;
    Ok(mixup_forward(adj, params, &cache, pair)?.score)
}
