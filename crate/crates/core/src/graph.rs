//! Tripartite review graph: users, reviews and products.
//!
//! A review links its author to the product it rates. Only reviews carry
//! spam labels. Degree-based groups (`A`) and the label-mixture subgroup
//! (`A'`) are derived here, as are the user-level train/valid/test splits.

use std::fmt;

use ndarray::{Array2, ArrayView1};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Dense node index within one graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(pub usize);

impl NodeId {
    #[inline]
    pub fn index(self) -> usize {
        self.0
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum NodeKind {
    User,
    Review,
    Product,
}

impl NodeKind {
    pub fn code(self) -> char {
        match self {
            NodeKind::User => 'U',
            NodeKind::Review => 'R',
            NodeKind::Product => 'P',
        }
    }

    pub fn from_code(c: &str) -> Option<Self> {
        match c {
            "U" => Some(NodeKind::User),
            "R" => Some(NodeKind::Review),
            "P" => Some(NodeKind::Product),
            _ => None,
        }
    }
}

/// Undirected adjacency in compressed sparse row form. Neighbour lists are
/// sorted ascending so every traversal order is fixed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Adjacency {
    offsets: Vec<usize>,
    targets: Vec<usize>,
}

impl Adjacency {
    /// Builds the adjacency of `n` nodes from undirected edges. Each edge is
    /// stored in both directions.
    pub fn from_edges<I>(n: usize, edges: I) -> Self
    where
        I: IntoIterator<Item = (usize, usize)>,
    {
        let edges: Vec<(usize, usize)> = edges.into_iter().collect();
        let mut degree = vec![0usize; n];
        for &(a, b) in &edges {
            degree[a] += 1;
            degree[b] += 1;
        }
        let mut offsets = Vec::with_capacity(n + 1);
        offsets.push(0);
        for d in &degree {
            offsets.push(offsets.last().unwrap() + d);
        }
        let mut cursor = offsets[..n].to_vec();
        let mut targets = vec![0usize; offsets[n]];
        for &(a, b) in &edges {
            targets[cursor[a]] = b;
            cursor[a] += 1;
            targets[cursor[b]] = a;
            cursor[b] += 1;
        }
        for i in 0..n {
            targets[offsets[i]..offsets[i + 1]].sort_unstable();
        }
        Adjacency { offsets, targets }
    }

    pub fn node_count(&self) -> usize {
        self.offsets.len() - 1
    }

    #[inline]
    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.targets[self.offsets[i]..self.offsets[i + 1]]
    }

    #[inline]
    pub fn degree(&self, i: usize) -> usize {
        self.offsets[i + 1] - self.offsets[i]
    }

    /// Adds `count` isolated nodes at the end.
    pub fn with_isolated(&self, count: usize) -> Self {
        let mut offsets = self.offsets.clone();
        let last = *offsets.last().unwrap();
        offsets.extend(std::iter::repeat_n(last, count));
        Adjacency {
            offsets,
            targets: self.targets.clone(),
        }
    }

    /// Relabels nodes: node `i` becomes `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let n = self.node_count();
        let edges = (0..n).flat_map(|i| {
            self.neighbors(i)
                .iter()
                .filter(move |&&j| i < j)
                .map(move |&j| (perm[i], perm[j]))
        });
        Adjacency::from_edges(n, edges)
    }
}

/// One node record handed to [`ReviewGraph::build`].
#[derive(Debug, Clone, PartialEq)]
pub struct NodeRecord {
    pub kind: NodeKind,
    /// `Some(true)` marks a spam review; only reviews may carry a label.
    pub label: Option<bool>,
    pub features: Vec<f64>,
}

/// Validated, immutable tripartite review graph.
#[derive(Debug, Clone, PartialEq)]
pub struct ReviewGraph {
    kinds: Vec<NodeKind>,
    labels: Vec<Option<bool>>,
    features: Array2<f64>,
    edges: Vec<(NodeId, NodeId)>,
    adjacency: Adjacency,
    author: Vec<Option<NodeId>>,
    product: Vec<Option<NodeId>>,
    users: Vec<NodeId>,
    reviews: Vec<NodeId>,
    products: Vec<NodeId>,
}

impl ReviewGraph {
    /// Validates node records and edges into a graph with feature width `dim`.
    pub fn build(nodes: Vec<NodeRecord>, edges: &[(NodeId, NodeId)], dim: usize) -> Result<Self> {
        let n = nodes.len();
        let mut features = Array2::<f64>::zeros((n, dim));
        let mut kinds = Vec::with_capacity(n);
        let mut labels = Vec::with_capacity(n);
        for (i, rec) in nodes.into_iter().enumerate() {
            if rec.features.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    found: rec.features.len(),
                });
            }
            match (rec.kind, rec.label) {
                (NodeKind::Review, None) => return Err(Error::MissingLabel(NodeId(i))),
                (NodeKind::User | NodeKind::Product, Some(_)) => {
                    return Err(Error::UnexpectedLabel(NodeId(i)))
                }
                _ => {}
            }
            for (k, v) in rec.features.iter().enumerate() {
                features[[i, k]] = *v;
            }
            kinds.push(rec.kind);
            labels.push(rec.label);
        }
        Self::from_parts(kinds, labels, features, edges)
    }

    pub(crate) fn from_parts(
        kinds: Vec<NodeKind>,
        labels: Vec<Option<bool>>,
        features: Array2<f64>,
        edges: &[(NodeId, NodeId)],
    ) -> Result<Self> {
        let n = kinds.len();
        let mut author = vec![None; n];
        let mut product = vec![None; n];
        let mut user_count = vec![0usize; n];
        let mut product_count = vec![0usize; n];
        let mut canon: Vec<(NodeId, NodeId)> = Vec::with_capacity(edges.len());
        for &(a, b) in edges {
            for x in [a, b] {
                if x.0 >= n {
                    return Err(Error::UnknownNode(x.0));
                }
            }
            let (review, other) = match (kinds[a.0], kinds[b.0]) {
                (NodeKind::Review, NodeKind::User | NodeKind::Product) => (a, b),
                (NodeKind::User | NodeKind::Product, NodeKind::Review) => (b, a),
                _ => return Err(Error::EdgeTypeViolation(a, b)),
            };
            if kinds[other.0] == NodeKind::User {
                user_count[review.0] += 1;
                author[review.0] = Some(other);
            } else {
                product_count[review.0] += 1;
                product[review.0] = Some(other);
            }
            canon.push((a.min(b), a.max(b)));
        }
        canon.sort_unstable();
        if let Some(w) = canon.windows(2).find(|w| w[0] == w[1]) {
            return Err(Error::DuplicateEdge(w[0].0, w[0].1));
        }
        for i in 0..n {
            if kinds[i] == NodeKind::Review && (user_count[i] != 1 || product_count[i] != 1) {
                return Err(Error::ReviewDegreeViolation {
                    review: NodeId(i),
                    users: user_count[i],
                    products: product_count[i],
                });
            }
            if kinds[i] == NodeKind::Review && labels[i].is_none() {
                return Err(Error::MissingLabel(NodeId(i)));
            }
        }
        let adjacency = Adjacency::from_edges(n, canon.iter().map(|&(a, b)| (a.0, b.0)));
        let of_kind = |k: NodeKind| -> Vec<NodeId> {
            (0..n).filter(|&i| kinds[i] == k).map(NodeId).collect()
        };
        Ok(ReviewGraph {
            users: of_kind(NodeKind::User),
            reviews: of_kind(NodeKind::Review),
            products: of_kind(NodeKind::Product),
            kinds,
            labels,
            features,
            edges: canon,
            adjacency,
            author,
            product,
        })
    }

    pub fn node_count(&self) -> usize {
        self.kinds.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn kind(&self, v: NodeId) -> NodeKind {
        self.kinds[v.0]
    }

    pub fn kinds(&self) -> &[NodeKind] {
        &self.kinds
    }

    /// Spam label of a review; `None` for users and products.
    pub fn label(&self, v: NodeId) -> Option<bool> {
        self.labels[v.0]
    }

    pub fn labels(&self) -> &[Option<bool>] {
        &self.labels
    }

    pub fn features(&self) -> &Array2<f64> {
        &self.features
    }

    pub fn feature(&self, v: NodeId) -> ArrayView1<'_, f64> {
        self.features.row(v.0)
    }

    /// Canonical (smaller id first), sorted edge list.
    pub fn edges(&self) -> &[(NodeId, NodeId)] {
        &self.edges
    }

    pub fn adjacency(&self) -> &Adjacency {
        &self.adjacency
    }

    pub fn neighbors(&self, v: NodeId) -> impl Iterator<Item = NodeId> + '_ {
        self.adjacency.neighbors(v.0).iter().map(|&j| NodeId(j))
    }

    pub fn degree(&self, v: NodeId) -> usize {
        self.adjacency.degree(v.0)
    }

    /// Author of a review.
    pub fn author(&self, review: NodeId) -> Option<NodeId> {
        self.author[review.0]
    }

    /// Product a review rates.
    pub fn product_of(&self, review: NodeId) -> Option<NodeId> {
        self.product[review.0]
    }

    pub fn users(&self) -> &[NodeId] {
        &self.users
    }

    pub fn reviews(&self) -> &[NodeId] {
        &self.reviews
    }

    pub fn products(&self) -> &[NodeId] {
        &self.products
    }

    /// Reviews written by `user`, in ascending id order.
    pub fn reviews_of(&self, user: NodeId) -> impl Iterator<Item = NodeId> + '_ {
        debug_assert_eq!(self.kind(user), NodeKind::User);
        self.neighbors(user)
    }
}

/// Degree-based sensitive attribute `A` and label-mixture subgroup `A'`.
///
/// `A = 0` marks the favoured (high-degree) group, `A = 1` the protected one.
/// `A' = 1` marks users whose reviews contain both classes.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupAssignment {
    percentile: u32,
    cutoff_degree: usize,
    a: Vec<Option<u8>>,
    a_prime: Vec<Option<u8>>,
}

impl GroupAssignment {
    pub(crate) fn from_parts(
        percentile: u32,
        cutoff_degree: usize,
        a: Vec<Option<u8>>,
        a_prime: Vec<Option<u8>>,
    ) -> Self {
        GroupAssignment {
            percentile,
            cutoff_degree,
            a,
            a_prime,
        }
    }

    pub fn percentile(&self) -> u32 {
        self.percentile
    }

    pub fn cutoff_degree(&self) -> usize {
        self.cutoff_degree
    }

    /// `A` of a user or review.
    pub fn a(&self, v: NodeId) -> Option<u8> {
        self.a[v.0]
    }

    /// `A'` of a user; `None` before [`assign_subgroups`] or for non-users.
    pub fn a_prime(&self, v: NodeId) -> Option<u8> {
        self.a_prime[v.0]
    }

    pub fn is_favored(&self, v: NodeId) -> bool {
        self.a[v.0] == Some(0)
    }

    pub fn has_subgroups(&self) -> bool {
        self.a_prime.iter().any(Option::is_some)
    }

    /// Subgroup of a review: the `A'` of its author.
    pub fn review_subgroup(&self, g: &ReviewGraph, review: NodeId) -> Option<u8> {
        g.author(review).and_then(|u| self.a_prime(u))
    }

    pub(crate) fn a_values(&self) -> &[Option<u8>] {
        &self.a
    }

    pub(crate) fn a_prime_values(&self) -> &[Option<u8>] {
        &self.a_prime
    }
}

/// Nearest-rank value at the `(100 - p)`-th percentile of `degrees`.
fn percentile_cutoff(degrees: &mut [usize], p: u32) -> usize {
    degrees.sort_unstable();
    let n = degrees.len();
    let rank = ((100 - p as usize) * n).div_ceil(100).max(1);
    degrees[rank - 1]
}

/// Splits users into favoured (`A = 0`, degree strictly above the cutoff)
/// and protected (`A = 1`) groups; reviews inherit their author's group.
pub fn assign_groups(g: &ReviewGraph, p: u32) -> Result<GroupAssignment> {
    if p == 0 || p >= 100 {
        return Err(Error::BadPercentile(p));
    }
    if g.users().is_empty() {
        return Err(Error::EmptyUserSet);
    }
    let mut degrees: Vec<usize> = g.users().iter().map(|&u| g.degree(u)).collect();
    let cutoff = percentile_cutoff(&mut degrees, p);
    let mut a = vec![None; g.node_count()];
    for &u in g.users() {
        a[u.0] = Some(if g.degree(u) > cutoff { 0 } else { 1 });
    }
    for &r in g.reviews() {
        let author = g.author(r).expect("review has an author");
        a[r.0] = a[author.0];
    }
    Ok(GroupAssignment {
        percentile: p,
        cutoff_degree: cutoff,
        a,
        a_prime: vec![None; g.node_count()],
    })
}

/// `A'` of one user: 1 iff its reviews contain both spam and non-spam.
pub fn mixed_user(g: &ReviewGraph, user: NodeId) -> bool {
    let mut total = 0usize;
    let mut spam = 0usize;
    for r in g.reviews_of(user) {
        total += 1;
        if g.label(r) == Some(true) {
            spam += 1;
        }
    }
    0 < spam && spam < total
}

/// Fills `A'` for every user from the review labels.
pub fn assign_subgroups(g: &ReviewGraph, groups: &GroupAssignment) -> GroupAssignment {
    let mut a_prime = vec![None; g.node_count()];
    for &u in g.users() {
        a_prime[u.0] = Some(mixed_user(g, u) as u8);
    }
    GroupAssignment {
        a_prime,
        ..groups.clone()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Part {
    Train,
    Valid,
    Test,
}

/// User-level partition; reviews follow their author.
#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    train: Vec<NodeId>,
    valid: Vec<NodeId>,
    test: Vec<NodeId>,
    part: Vec<Option<Part>>,
}

pub const DEFAULT_FRACTIONS: [f64; 3] = [0.30, 0.10, 0.60];

impl Split {
    pub(crate) fn from_parts(
        train: Vec<NodeId>,
        valid: Vec<NodeId>,
        test: Vec<NodeId>,
        part: Vec<Option<Part>>,
    ) -> Self {
        Split {
            train,
            valid,
            test,
            part,
        }
    }

    pub fn users(&self, part: Part) -> &[NodeId] {
        match part {
            Part::Train => &self.train,
            Part::Valid => &self.valid,
            Part::Test => &self.test,
        }
    }

    pub fn part(&self, v: NodeId) -> Option<Part> {
        self.part[v.0]
    }

    pub fn reviews(&self, g: &ReviewGraph, part: Part) -> Vec<NodeId> {
        g.reviews()
            .iter()
            .copied()
            .filter(|&r| self.part[r.0] == Some(part))
            .collect()
    }

    pub(crate) fn parts(&self) -> &[Option<Part>] {
        &self.part
    }
}

/// Shuffles users with `seed` and cuts them into train/valid/test blocks
/// sized by rounding `fractions` against the user count.
pub fn split_users(g: &ReviewGraph, fractions: [f64; 3], seed: u64) -> Result<Split> {
    let sum: f64 = fractions.iter().sum();
    if fractions.iter().any(|f| !(0.0..=1.0).contains(f)) || (sum - 1.0).abs() > 1e-9 {
        return Err(Error::BadFractions(fractions));
    }
    let mut users = g.users().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    users.shuffle(&mut rng);
    let n = users.len();
    let n_train = ((fractions[0] * n as f64).round() as usize).min(n);
    let n_valid = ((fractions[1] * n as f64).round() as usize).min(n - n_train);
    let mut part = vec![None; g.node_count()];
    let mut train = users[..n_train].to_vec();
    let mut valid = users[n_train..n_train + n_valid].to_vec();
    let mut test = users[n_train + n_valid..].to_vec();
    for (block, p) in [(&train, Part::Train), (&valid, Part::Valid), (&test, Part::Test)] {
        for &u in block.iter() {
            part[u.0] = Some(p);
        }
    }
    for &r in g.reviews() {
        part[r.0] = part[g.author(r).unwrap().0];
    }
    train.sort_unstable();
    valid.sort_unstable();
    test.sort_unstable();
    Ok(Split {
        train,
        valid,
        test,
        part,
    })
}
