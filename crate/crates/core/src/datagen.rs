//! Seeded synthetic review graphs with skewed user degrees, a small
//! favoured group, a handful of mixed favoured users and a low favoured
//! spam rate.

use ndarray::{Array1, Array2};
use rand::distributions::WeightedIndex;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::graph::{assign_groups, GroupAssignment, NodeId, NodeKind, ReviewGraph};

pub use crate::io::{read_graph, write_graph};

/// Generator knobs.
#[derive(Debug, Clone, PartialEq)]
pub struct GenConfig {
    pub n_users: usize,
    pub n_products: usize,
    pub feature_dim: usize,
    /// Leading feature dimensions that carry the class signal.
    pub informative_dims: usize,
    /// Light users draw degrees from `1..=light_max`.
    pub light_max: usize,
    /// Heavy users draw degrees from `heavy_min..=heavy_max`.
    pub heavy_min: usize,
    pub heavy_max: usize,
    /// Power-law exponent of both degree laws.
    pub degree_exponent: f64,
    /// Share of users drawn as heavy.
    pub favored_fraction: f64,
    /// Share of favoured users that are mixed.
    pub mixed_fraction: f64,
    /// Mixed users are drawn with weight `degree^-bias`; 0 is uniform.
    pub mixed_degree_bias: f64,
    /// Share of protected users that are (pure) spammers.
    pub protected_spam_rate: f64,
    /// Target of P(spam | A = 0) / P(spam | A = 1).
    pub spam_ratio: f64,
    /// Share of the favoured spam budget spent on pure spammers.
    pub pure_spam_share: f64,
    /// Distance between the two class means on each informative dimension.
    pub mu_gap: f64,
    /// Review feature noise.
    pub sigma: f64,
    /// Noise added to user and product features.
    pub node_noise: f64,
    /// Percentile used to realise the favoured group.
    pub percentile: u32,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            n_users: 2000,
            n_products: 100,
            feature_dim: 8,
            informative_dims: 4,
            light_max: 2,
            heavy_min: 3,
            heavy_max: 30,
            degree_exponent: 1.0,
            favored_fraction: 0.20,
            mixed_fraction: 0.20,
            mixed_degree_bias: 2.0,
            protected_spam_rate: 0.6,
            spam_ratio: 0.0438,
            pure_spam_share: 0.1,
            mu_gap: 1.0,
            sigma: 0.6,
            node_noise: 0.1,
            percentile: 20,
            seed: 7,
        }
    }
}

pub const PRESETS: [&str; 3] = ["default", "separable", "small"];

impl GenConfig {
    /// Named configuration: `default`, `separable` (A' easy to infer from
    /// user features) or `small` (fast tests).
    pub fn preset(name: &str) -> Result<Self> {
        let base = GenConfig::default();
        match name {
            "default" => Ok(base),
            "separable" => Ok(GenConfig {
                sigma: 0.5,
                mu_gap: 2.0,
                seed: 11,
                ..base
            }),
            "small" => Ok(GenConfig {
                n_users: 200,
                n_products: 20,
                heavy_max: 15,
                mixed_fraction: 0.3,
                spam_ratio: 0.2,
                seed: 3,
                ..base
            }),
            other => Err(Error::Config(format!("unknown preset {other:?}; expected one of {PRESETS:?}"))),
        }
    }

    /// Every field as a `(key, value)` pair, in declaration order.
    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        macro_rules! pairs {
            ($($f:ident),*) => { vec![$((stringify!($f), self.$f.to_string())),*] };
        }
        pairs!(
            n_users,
            n_products,
            feature_dim,
            informative_dims,
            light_max,
            heavy_min,
            heavy_max,
            degree_exponent,
            favored_fraction,
            mixed_fraction,
            mixed_degree_bias,
            protected_spam_rate,
            spam_ratio,
            pure_spam_share,
            mu_gap,
            sigma,
            node_noise,
            percentile,
            seed
        )
    }

    /// Sets one field from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("bad value {value:?} for generator field {key}")))
        }
        macro_rules! set {
            ($($f:ident),*) => {
                match key {
                    $(stringify!($f) => self.$f = parse(key, value)?,)*
                    _ => return Err(Error::Config(format!("unknown generator field {key:?}"))),
                }
            };
        }
        set!(
            n_users,
            n_products,
            feature_dim,
            informative_dims,
            light_max,
            heavy_min,
            heavy_max,
            degree_exponent,
            favored_fraction,
            mixed_fraction,
            mixed_degree_bias,
            protected_spam_rate,
            spam_ratio,
            pure_spam_share,
            mu_gap,
            sigma,
            node_noise,
            percentile,
            seed
        );
        Ok(())
    }

    fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InfeasibleConfig(m.to_string()));
        if self.n_users == 0 || self.n_products == 0 || self.feature_dim == 0 {
            return bad("counts and feature width must be positive");
        }
        if self.informative_dims > self.feature_dim {
            return bad("more informative dimensions than features");
        }
        if self.light_max == 0 || self.heavy_min <= self.light_max || self.heavy_max < self.heavy_min {
            return bad("degree ranges must satisfy 1 <= light_max < heavy_min <= heavy_max");
        }
        for (name, f) in [
            ("favored_fraction", self.favored_fraction),
            ("mixed_fraction", self.mixed_fraction),
            ("protected_spam_rate", self.protected_spam_rate),
        ] {
            if !(f > 0.0 && f < 1.0) {
                return bad(&format!("{name} must lie in (0, 1), got {f}"));
            }
        }
        if !(0.0..1.0).contains(&self.pure_spam_share) || self.spam_ratio <= 0.0 {
            return bad("pure_spam_share must lie in [0, 1) and spam_ratio be positive");
        }
        if self.sigma < 0.0 || self.node_noise < 0.0 || !self.degree_exponent.is_finite() || !self.mixed_degree_bias.is_finite() {
            return bad("noise levels must be non-negative");
        }
        if self.percentile == 0 || self.percentile >= 100 {
            return bad("percentile must lie in (0, 100)");
        }
        if self.mixed_fraction * self.favored_fraction * (self.n_users as f64) < 1.0 {
            return bad("fewer than one mixed user expected");
        }
        Ok(())
    }
}

/// A generated graph with its realised groups and ground-truth `A'`.
#[derive(Debug, Clone)]
pub struct Synthetic {
    pub graph: ReviewGraph,
    pub groups: GroupAssignment,
}

fn power_law(lo: usize, hi: usize, exponent: f64) -> (Vec<usize>, WeightedIndex<f64>) {
    let values: Vec<usize> = (lo..=hi).collect();
    let weights: Vec<f64> = values.iter().map(|&d| (d as f64).powf(-exponent)).collect();
    (values, WeightedIndex::new(weights).expect("positive weights"))
}

fn noise(rng: &mut ChaCha8Rng, d: usize, scale: f64) -> Array1<f64> {
    Array1::from_shape_fn(d, |_| scale * rng.sample::<f64, _>(StandardNormal))
}

/// Builds a synthetic graph. Users are laid out as the user node followed
/// by its reviews; products come first.
pub fn generate(cfg: &GenConfig) -> Result<Synthetic> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n_heavy = ((cfg.favored_fraction * cfg.n_users as f64).round() as usize).clamp(1, cfg.n_users);
    let (light_vals, light_law) = power_law(1, cfg.light_max, cfg.degree_exponent);
    let (heavy_vals, heavy_law) = power_law(cfg.heavy_min, cfg.heavy_max, cfg.degree_exponent);
    let mut degrees: Vec<usize> = (0..cfg.n_users)
        .map(|k| {
            if k < n_heavy {
                heavy_vals[heavy_law.sample(&mut rng)]
            } else {
                light_vals[light_law.sample(&mut rng)]
            }
        })
        .collect();
    degrees.shuffle(&mut rng);

    // Structure first; labels depend on the realised groups.
    let mut kinds = vec![NodeKind::Product; cfg.n_products];
    let mut product_of = Vec::new();
    let mut edges = Vec::new();
    let mut user_nodes = Vec::with_capacity(cfg.n_users);
    let mut review_nodes: Vec<Vec<usize>> = Vec::with_capacity(cfg.n_users);
    for &deg in &degrees {
        let u = kinds.len();
        kinds.push(NodeKind::User);
        user_nodes.push(u);
        let mut mine = Vec::with_capacity(deg);
        for _ in 0..deg {
            let r = kinds.len();
            kinds.push(NodeKind::Review);
            let p = rng.gen_range(0..cfg.n_products);
            product_of.push(p);
            edges.push((NodeId(u), NodeId(r)));
            edges.push((NodeId(r), NodeId(p)));
            mine.push(r);
        }
        review_nodes.push(mine);
    }
    let n = kinds.len();
    let placeholder: Vec<Option<bool>> = kinds.iter().map(|&k| (k == NodeKind::Review).then_some(false)).collect();
    let skeleton = ReviewGraph::from_parts(kinds.clone(), placeholder, Array2::zeros((n, 1)), &edges)?;
    let groups = assign_groups(&skeleton, cfg.percentile)?;

    let favored: Vec<usize> = (0..cfg.n_users).filter(|&k| groups.is_favored(NodeId(user_nodes[k]))).collect();
    if favored.is_empty() {
        return Err(Error::InfeasibleConfig("no user lies above the degree cutoff".into()));
    }
    let protected: Vec<usize> = (0..cfg.n_users).filter(|&k| !groups.is_favored(NodeId(user_nodes[k]))).collect();
    let mut spam_user = vec![0usize; cfg.n_users];
    let mut protected_reviews = 0usize;
    let mut protected_spam = 0usize;
    for &k in &protected {
        protected_reviews += degrees[k];
        if rng.gen::<f64>() < cfg.protected_spam_rate {
            spam_user[k] = degrees[k];
            protected_spam += degrees[k];
        }
    }
    let protected_rate = if protected_reviews == 0 {
        cfg.protected_spam_rate
    } else {
        protected_spam as f64 / protected_reviews as f64
    };
    let favored_reviews: usize = favored.iter().map(|&k| degrees[k]).sum();
    let budget = (cfg.spam_ratio * protected_rate * favored_reviews as f64).round() as usize;
    let n_mixed = ((cfg.mixed_fraction * favored.len() as f64).round() as usize).max(1);
    if n_mixed > favored.len() {
        return Err(Error::InfeasibleConfig("more mixed users than favoured users".into()));
    }

    // Weighted sampling without replacement, weight degree^-bias.
    let mut keyed: Vec<(f64, usize)> = favored
        .iter()
        .map(|&k| {
            let u: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
            (u.ln() * (degrees[k] as f64).powf(cfg.mixed_degree_bias), k)
        })
        .collect();
    keyed.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let order: Vec<usize> = keyed.into_iter().map(|(_, k)| k).collect();
    let (mixed, rest) = order.split_at(n_mixed);
    // Pure favoured spammers take whole users, lightest first.
    let mut pure_budget = (cfg.pure_spam_share * budget as f64).round() as usize;
    let mut rest = rest.to_vec();
    rest.sort_by_key(|&k| (degrees[k], k));
    for &k in &rest {
        if degrees[k] > pure_budget {
            break;
        }
        spam_user[k] = degrees[k];
        pure_budget -= degrees[k];
    }
    let pure_spent: usize = rest.iter().map(|&k| spam_user[k]).sum();
    let mixed_budget = budget - pure_spent;
    let capacity: usize = mixed.iter().map(|&k| degrees[k] - 1).sum();
    if mixed_budget < n_mixed || mixed_budget > capacity {
        return Err(Error::InfeasibleConfig(format!(
            "favoured spam budget {mixed_budget} cannot cover {n_mixed} mixed users (capacity {capacity})"
        )));
    }
    for &k in mixed {
        spam_user[k] = 1;
    }
    let mut open: Vec<usize> = mixed.iter().copied().filter(|&k| degrees[k] > 2).collect();
    for _ in n_mixed..mixed_budget {
        let slot = rng.gen_range(0..open.len());
        let k = open[slot];
        spam_user[k] += 1;
        if spam_user[k] + 1 == degrees[k] {
            open.swap_remove(slot);
        }
    }

    let d = cfg.feature_dim;
    let mut labels: Vec<Option<bool>> = vec![None; n];
    let mut features = Array2::<f64>::zeros((n, d));
    let mean = |y: bool| {
        Array1::from_shape_fn(d, |i| {
            if i < cfg.informative_dims {
                if y { cfg.mu_gap / 2.0 } else { -cfg.mu_gap / 2.0 }
            } else {
                0.0
            }
        })
    };
    let (mu0, mu1) = (mean(false), mean(true));
    let mut product_sum = Array2::<f64>::zeros((cfg.n_products, d));
    let mut product_count = vec![0usize; cfg.n_products];
    let mut a_prime = vec![None; n];
    for k in 0..cfg.n_users {
        let u = user_nodes[k];
        let mut picks = vec![false; degrees[k]];
        let spams = spam_user[k];
        for p in picks.iter_mut().take(spams) {
            *p = true;
        }
        picks.shuffle(&mut rng);
        let mut acc = Array1::<f64>::zeros(d);
        for (&r, &y) in review_nodes[k].iter().zip(&picks) {
            let product = product_of[r - cfg.n_products - k - 1];
            labels[r] = Some(y);
            let x = if y { &mu1 } else { &mu0 } + &noise(&mut rng, d, cfg.sigma);
            acc += &x;
            let mut row = product_sum.row_mut(product);
            row += &x;
            product_count[product] += 1;
            features.row_mut(r).assign(&x);
        }
        let ux = acc / degrees[k] as f64 + noise(&mut rng, d, cfg.node_noise);
        features.row_mut(u).assign(&ux);
        a_prime[u] = Some((0 < spams && spams < degrees[k]) as u8);
    }
    for p in 0..cfg.n_products {
        let base = if product_count[p] == 0 {
            Array1::zeros(d)
        } else {
            product_sum.row(p).to_owned() / product_count[p] as f64
        };
        features.row_mut(p).assign(&(base + noise(&mut rng, d, cfg.node_noise)));
    }
    let graph = ReviewGraph::from_parts(kinds, labels, features, &edges)?;
    let groups = GroupAssignment::from_parts(
        groups.percentile(),
        groups.cutoff_degree(),
        groups.a_values().to_vec(),
        a_prime,
    );
    Ok(Synthetic { graph, groups })
}

/// Realised `P(spam | A = 0) / P(spam | A = 1)`.
pub fn spam_ratio(g: &ReviewGraph, groups: &GroupAssignment) -> f64 {
    let mut count = [[0usize; 2]; 2];
    for &r in g.reviews() {
        let a = groups.a(r).unwrap_or(1) as usize;
        count[a][(g.label(r) == Some(true)) as usize] += 1;
    }
    let rate = |a: usize| count[a][1] as f64 / (count[a][0] + count[a][1]) as f64;
    rate(0) / rate(1)
}
