//! Joint training of the detector `f_W` and the subgroup inferencer `g_θ`,
//! plus the baselines that fix `Â'` in advance.
//!
//! Every epoch draws its pruning mask and mixup pairs from seeds derived
//! from `(run seed, purpose, epoch)`, so two procedures that reach the same
//! epoch with the same parameters see identical randomness.

use std::fmt;
use std::str::FromStr;

use ndarray::{concatenate, Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::augmentation::{
    favored_train_spams, mixup_backward, mixup_forward, prune_nonspam_edges, replicate_mixed_users, sample_mixup_pairs,
    AugmentedView, EdgeMask, MixupVariant,
};
use crate::error::{Error, Result};
use crate::graph::{
    assign_groups, assign_subgroups, Adjacency, GroupAssignment, NodeId, Part, ReviewGraph, Split, DEFAULT_FRACTIONS,
};
use crate::metrics::{afrr, auc, delta_ndcg, ndcg, split_by_group, MetricsReport, Scored};
use crate::nn::{backward_with, forward, init_params, ForwardCache, ModelParams, RepGrads};
use crate::objectives::{detector_objective, subgroup_loss, weight_decay_term};

/// Where the detector's extra `Â'` input column comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum AprimeSource {
    /// No extra column.
    Wo,
    /// Fair coin per user.
    Random,
    /// True `A'`.
    Gt,
    /// `g_θ` trained first, then frozen.
    Pretrained,
    /// `g_θ` trained together with the detector.
    Joint,
}

impl AprimeSource {
    pub const ALL: [AprimeSource; 5] = [
        AprimeSource::Wo,
        AprimeSource::Random,
        AprimeSource::Gt,
        AprimeSource::Pretrained,
        AprimeSource::Joint,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AprimeSource::Wo => "wo",
            AprimeSource::Random => "random",
            AprimeSource::Gt => "gt",
            AprimeSource::Pretrained => "pretrained",
            AprimeSource::Joint => "joint",
        }
    }

    fn has_inferencer(self) -> bool {
        matches!(self, AprimeSource::Pretrained | AprimeSource::Joint)
    }
}

impl fmt::Display for AprimeSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AprimeSource {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        AprimeSource::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown A' source {s:?}")))
    }
}

/// Detector with or without one of the mixup augmentations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum DetectorVariant {
    Gnn,
    GnnS1Tr,
    GnnS0Te,
    GnnS1Te,
}

impl DetectorVariant {
    pub const ALL: [DetectorVariant; 4] = [
        DetectorVariant::Gnn,
        DetectorVariant::GnnS1Tr,
        DetectorVariant::GnnS0Te,
        DetectorVariant::GnnS1Te,
    ];

    pub fn name(self) -> &'static str {
        match self {
            DetectorVariant::Gnn => "gnn",
            DetectorVariant::GnnS1Tr => "gnn-s1tr",
            DetectorVariant::GnnS0Te => "gnn-s0te",
            DetectorVariant::GnnS1Te => "gnn-s1te",
        }
    }

    pub fn mixup(self) -> Option<MixupVariant> {
        match self {
            DetectorVariant::Gnn => None,
            DetectorVariant::GnnS1Tr => Some(MixupVariant::S1Tr),
            DetectorVariant::GnnS0Te => Some(MixupVariant::S0Te),
            DetectorVariant::GnnS1Te => Some(MixupVariant::S1Te),
        }
    }
}

impl fmt::Display for DetectorVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DetectorVariant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        DetectorVariant::ALL
            .into_iter()
            .find(|d| d.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown detector variant {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    /// Plain gradient descent with a constant rate.
    Gd,
    /// Adam with the usual moment decays.
    Adam,
}

impl FromStr for OptimizerKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gd" => Ok(OptimizerKind::Gd),
            "adam" => Ok(OptimizerKind::Adam),
            _ => Err(Error::Config(format!("unknown optimizer {s:?}"))),
        }
    }
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OptimizerKind::Gd => "gd",
            OptimizerKind::Adam => "adam",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingConfig {
    pub epochs: usize,
    pub lambda: f64,
    /// Detector learning rate.
    pub lr_detector: f64,
    /// Inferencer learning rate.
    pub lr_inferencer: f64,
    pub weight_decay: f64,
    /// Copies per mixed favoured training user.
    pub copies: usize,
    /// Pruning rate of replica non-spam edges.
    pub rho: f64,
    /// Mixup weight of the first node.
    pub alpha: f64,
    pub variant: DetectorVariant,
    pub aprime: AprimeSource,
    pub percentile: u32,
    /// Hidden widths shared by both networks.
    pub hidden: Vec<usize>,
    /// Synthetic reviews per epoch; defaults to the number of favoured
    /// training spams.
    pub mixup_count: Option<usize>,
    pub optimizer: OptimizerKind,
    /// Chain the detector loss into `g_θ` through the `Â'` column.
    pub couple: bool,
    pub seed: u64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            epochs: 300,
            lambda: 5.0,
            lr_detector: 0.001,
            lr_inferencer: 0.001,
            weight_decay: 1e-4,
            copies: 50,
            rho: 0.5,
            alpha: 0.8,
            variant: DetectorVariant::Gnn,
            aprime: AprimeSource::Wo,
            percentile: 20,
            hidden: vec![64],
            mixup_count: None,
            optimizer: OptimizerKind::Adam,
            couple: true,
            seed: 0,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.epochs == 0 {
            return bad("epochs must be positive".into());
        }
        if !(self.lr_detector > 0.0) || !(self.lr_inferencer >= 0.0) {
            return bad("learning rates must be positive".into());
        }
        if !(self.lambda >= 0.0) || !(self.weight_decay >= 0.0) {
            return bad("lambda and weight decay must be non-negative".into());
        }
        if !(0.0..1.0).contains(&self.rho) {
            return bad(format!("rho must lie in [0, 1), got {}", self.rho));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return bad(format!("alpha must lie in [0, 1], got {}", self.alpha));
        }
        if self.hidden.contains(&0) {
            return bad("hidden widths must be positive".into());
        }
        Ok(())
    }

    /// Replication only makes sense when the detector sees an `Â'` column.
    pub fn effective_copies(&self) -> usize {
        if self.aprime == AprimeSource::Wo {
            0
        } else {
            self.copies
        }
    }
}

/// Purposes that seeds are derived for.
#[derive(Debug, Clone, Copy)]
#[repr(u64)]
pub enum Stream {
    Split = 1,
    InitDetector = 2,
    InitInferencer = 3,
    Prune = 4,
    Mixup = 5,
    RandomAprime = 6,
    PrunePretrain = 7,
}

/// Independent seed for `(seed, stream, index)`.
pub fn derive_seed(seed: u64, stream: Stream, index: u64) -> u64 {
    let mut z = seed
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add((stream as u64).wrapping_mul(0xD1B5_4A32_D192_ED03))
        .wrapping_add(index.wrapping_mul(0x8CB9_2BA7_2F3D_8DD7));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Appends `Â'` as a trailing column: users get their score, every other
/// node a zero.
pub fn expand_features(g: &ReviewGraph, features: &Array2<f64>, aprime: &Array1<f64>) -> Result<Array2<f64>> {
    if features.nrows() != g.node_count() {
        return Err(Error::DimensionMismatch {
            expected: g.node_count(),
            found: features.nrows(),
        });
    }
    if aprime.len() != g.node_count() {
        return Err(Error::DimensionMismatch {
            expected: g.node_count(),
            found: aprime.len(),
        });
    }
    let mut column = Array1::<f64>::zeros(g.node_count());
    for &u in g.users() {
        column[u.0] = aprime[u.0];
    }
    Ok(concatenate![Axis(1), features.view(), column.insert_axis(Axis(1))])
}

/// Fixed `Â'` for the baselines that do not learn it: `None` for `wo`, a
/// fair coin per user for `random`, and the true `A'` for `gt`.
pub fn assign_aprime_baseline(
    method: AprimeSource,
    g: &ReviewGraph,
    groups: &GroupAssignment,
    seed: u64,
) -> Result<Option<Array1<f64>>> {
    let mut out = Array1::<f64>::zeros(g.node_count());
    match method {
        AprimeSource::Wo => return Ok(None),
        AprimeSource::Random => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for &u in g.users() {
                out[u.0] = if rng.gen::<bool>() { 1.0 } else { 0.0 };
            }
        }
        AprimeSource::Gt => {
            if !groups.has_subgroups() {
                return Err(Error::MissingGroundTruth);
            }
            for &u in g.users() {
                out[u.0] = groups.a_prime(u).ok_or(Error::MissingGroundTruth)? as f64;
            }
        }
        other => return Err(Error::Config(format!("{other} is learned, not assigned"))),
    }
    Ok(Some(out))
}

/// Everything one run trains and evaluates on.
#[derive(Debug, Clone)]
pub struct Problem {
    base: ReviewGraph,
    /// Groups of the base graph with true `A'`.
    groups: GroupAssignment,
    split: Split,
    view: AugmentedView,
    train_targets: Vec<(NodeId, f64)>,
    favored_train: Vec<NodeId>,
    user_truth: Vec<(NodeId, bool)>,
}

impl Problem {
    /// Groups, split and replicated view for `cfg` on `g`.
    pub fn new(g: &ReviewGraph, cfg: &TrainingConfig) -> Result<Self> {
        let split = crate::graph::split_users(g, DEFAULT_FRACTIONS, derive_seed(cfg.seed, Stream::Split, 0))?;
        Self::with_split(g, cfg, split)
    }

    /// As [`Problem::new`] with an explicit split.
    pub fn with_split(g: &ReviewGraph, cfg: &TrainingConfig, split: Split) -> Result<Self> {
        cfg.validate()?;
        let groups = assign_subgroups(g, &assign_groups(g, cfg.percentile)?);
        let view = replicate_mixed_users(g, &groups, &split, cfg.effective_copies());
        let vg = view.graph();
        let train_targets: Vec<(NodeId, f64)> = view
            .split()
            .reviews(vg, Part::Train)
            .into_iter()
            .map(|r| (r, if vg.label(r) == Some(true) { 1.0 } else { 0.0 }))
            .collect();
        if train_targets.is_empty() {
            return Err(Error::EmptyTrainingSet);
        }
        let favored_train: Vec<NodeId> = split
            .reviews(g, Part::Train)
            .into_iter()
            .filter(|&r| groups.is_favored(r))
            .collect();
        let user_truth: Vec<(NodeId, bool)> = view
            .split()
            .users(Part::Train)
            .iter()
            .map(|&u| (u, view.groups().a_prime(u) == Some(1)))
            .collect();
        Ok(Problem {
            base: g.clone(),
            groups,
            split,
            view,
            train_targets,
            favored_train,
            user_truth,
        })
    }

    pub fn base(&self) -> &ReviewGraph {
        &self.base
    }

    pub fn groups(&self) -> &GroupAssignment {
        &self.groups
    }

    pub fn split(&self) -> &Split {
        &self.split
    }

    pub fn view(&self) -> &AugmentedView {
        &self.view
    }

    pub fn features(&self) -> &Array2<f64> {
        self.view.graph().features()
    }

    /// Message passing structure of epoch `epoch` (pruned replicas).
    pub fn epoch_adjacency(&self, cfg: &TrainingConfig, stream: Stream, epoch: usize) -> Result<Adjacency> {
        let mask = self.epoch_mask(cfg, stream, epoch)?;
        Ok(self.view.adjacency(&mask))
    }

    fn epoch_mask(&self, cfg: &TrainingConfig, stream: Stream, epoch: usize) -> Result<EdgeMask> {
        if self.view.prunable_edges().is_empty() {
            return Ok(EdgeMask::keep_all(&self.view));
        }
        prune_nonspam_edges(&self.view, cfg.rho, derive_seed(cfg.seed, stream, epoch as u64))
    }

    fn mixup_pairs(&self, cfg: &TrainingConfig, epoch: usize) -> Result<Vec<crate::augmentation::MixupPair>> {
        let Some(variant) = cfg.variant.mixup() else {
            return Ok(Vec::new());
        };
        let count = cfg
            .mixup_count
            .unwrap_or_else(|| favored_train_spams(&self.base, &self.groups, &self.split).len());
        sample_mixup_pairs(
            &self.base,
            &self.groups,
            &self.split,
            variant,
            count,
            cfg.alpha,
            derive_seed(cfg.seed, Stream::Mixup, epoch as u64),
        )
    }
}

/// Layer widths of the detector for `cfg`.
pub fn detector_dims(feature_dim: usize, cfg: &TrainingConfig) -> Vec<usize> {
    let input = feature_dim + (cfg.aprime != AprimeSource::Wo) as usize;
    std::iter::once(input).chain(cfg.hidden.iter().copied()).chain([1]).collect()
}

/// Layer widths of the inferencer, which reads the raw features.
pub fn inferencer_dims(feature_dim: usize, cfg: &TrainingConfig) -> Vec<usize> {
    std::iter::once(feature_dim).chain(cfg.hidden.iter().copied()).chain([1]).collect()
}

/// Detector objective at one epoch, with gradients.
#[derive(Debug, Clone)]
pub struct DetectorStep {
    pub value: f64,
    pub detection: f64,
    pub fairness: f64,
    pub grads: ModelParams,
    /// Gradient w.r.t. the detector input; present when requested.
    pub input_grads: Option<Array2<f64>>,
}

/// Evaluates the detector objective over real and synthetic training
/// reviews at epoch `epoch`, on input `x` and structure `adj`.
pub fn detector_step(
    problem: &Problem,
    cfg: &TrainingConfig,
    params: &ModelParams,
    adj: &Adjacency,
    x: &Array2<f64>,
    epoch: usize,
    want_inputs: bool,
) -> Result<DetectorStep> {
    let (scores, cache) = forward(adj, params, x)?;
    let pairs = problem.mixup_pairs(cfg, epoch)?;
    let traces = pairs
        .iter()
        .map(|p| mixup_forward(adj, params, &cache, p))
        .collect::<Result<Vec<_>>>()?;
    let n = scores.len();
    let mut all_scores = scores.to_vec();
    all_scores.extend(traces.iter().map(|t| t.score));
    let all_scores = Array1::from(all_scores);
    let mut targets = problem.train_targets.clone();
    targets.extend(pairs.iter().enumerate().map(|(m, p)| (NodeId(n + m), p.target)));
    let obj = detector_objective(
        &all_scores,
        &targets,
        problem.view.graph().labels(),
        &problem.favored_train,
        cfg.lambda,
        cfg.weight_decay,
        params,
    )?;
    let mut grads = params.zeros_like();
    let mut inject = RepGrads::zeros(&cache);
    for (m, trace) in traces.iter().enumerate() {
        mixup_backward(adj, params, trace, obj.score_grads[n + m], &mut grads, &mut inject);
    }
    let real_grads = obj.score_grads.slice(ndarray::s![..n]).to_owned();
    let injected = (!traces.is_empty()).then_some(&inject);
    let bundle = backward_with(adj, params, &cache, &real_grads, injected, want_inputs)?;
    grads.add_scaled(&bundle.params, 1.0);
    grads.add_scaled(&obj.decay_grad, 1.0);
    Ok(DetectorStep {
        value: obj.value,
        detection: obj.detection,
        fairness: obj.fairness,
        grads,
        input_grads: bundle.inputs,
    })
}

/// `Â'` for every node of the view under `adj`.
pub fn infer_aprime(problem: &Problem, params: &ModelParams, adj: &Adjacency) -> Result<(Array1<f64>, ForwardCache)> {
    forward(adj, params, problem.features())
}

/// Subgroup loss of `g_θ` plus weight decay, and its gradient. `extra`
/// adds further score gradients (the detector's pull on the `Â'` column).
pub fn inferencer_step(
    problem: &Problem,
    cfg: &TrainingConfig,
    params: &ModelParams,
    adj: &Adjacency,
    scores: &Array1<f64>,
    cache: &ForwardCache,
    extra: Option<&Array1<f64>>,
) -> Result<(f64, ModelParams)> {
    let loss = subgroup_loss(scores, &problem.user_truth)?;
    let mut score_grads = loss.score_grads;
    if let Some(e) = extra {
        score_grads += e;
    }
    let bundle = backward_with(adj, params, cache, &score_grads, None, false)?;
    let (decay, decay_grad) = weight_decay_term(params, cfg.weight_decay);
    let mut grads = bundle.params;
    grads.add_scaled(&decay_grad, 1.0);
    Ok((loss.value + decay, grads))
}

/// Gradient of the detector loss w.r.t. each `Â'` score, read off the last
/// input column at user nodes.
pub fn aprime_pull(g: &ReviewGraph, input_grads: &Array2<f64>) -> Array1<f64> {
    let col = input_grads.ncols() - 1;
    let mut out = Array1::zeros(g.node_count());
    for &u in g.users() {
        out[u.0] = input_grads[[u.0, col]];
    }
    out
}

/// Detector objective at `epoch` as a function of both networks, with its
/// gradients w.r.t. `W` and, through the `Â'` column, w.r.t. `θ`.
pub fn coupled_detector_loss(
    problem: &Problem,
    cfg: &TrainingConfig,
    w: &ModelParams,
    theta: &ModelParams,
    epoch: usize,
) -> Result<(f64, ModelParams, ModelParams)> {
    let adj = problem.epoch_adjacency(cfg, Stream::Prune, epoch)?;
    let (aprime, cache) = infer_aprime(problem, theta, &adj)?;
    let x = expand_features(problem.view.graph(), problem.features(), &aprime)?;
    let det = detector_step(problem, cfg, w, &adj, &x, epoch, true)?;
    let pull = aprime_pull(problem.view.graph(), det.input_grads.as_ref().expect("input gradients requested"));
    let bundle = backward_with(&adj, theta, &cache, &pull, None, false)?;
    Ok((det.value, det.grads, bundle.params))
}

/// Gradient update rule.
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    step: i32,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64) -> Self {
        Optimizer {
            kind,
            lr,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn apply(&mut self, params: &mut ModelParams, grads: &ModelParams) {
        match self.kind {
            OptimizerKind::Gd => params.add_scaled(grads, -self.lr),
            OptimizerKind::Adam => {
                const B1: f64 = 0.9;
                const B2: f64 = 0.999;
                const EPS: f64 = 1e-8;
                let g = grads.to_flat();
                if self.m.is_empty() {
                    self.m = vec![0.0; g.len()];
                    self.v = vec![0.0; g.len()];
                }
                self.step += 1;
                let c1 = 1.0 - B1.powi(self.step);
                let c2 = 1.0 - B2.powi(self.step);
                let mut p = params.to_flat();
                for k in 0..g.len() {
                    self.m[k] = B1 * self.m[k] + (1.0 - B1) * g[k];
                    self.v[k] = B2 * self.v[k] + (1.0 - B2) * g[k] * g[k];
                    p[k] -= self.lr * (self.m[k] / c1) / ((self.v[k] / c2).sqrt() + EPS);
                }
                params.set_flat(&p);
            }
        }
    }
}

/// Losses recorded after each epoch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub detector: f64,
    pub detection: f64,
    pub fairness: f64,
    pub inferencer: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainedModels {
    pub detector: ModelParams,
    pub inferencer: Option<ModelParams>,
    /// One record per detector epoch.
    pub history: Vec<EpochRecord>,
    /// Inferencer losses of the pre-training phase.
    pub pretrain_history: Vec<f64>,
    /// Detector parameters after every epoch, when tracing is enabled.
    pub trajectory: Vec<ModelParams>,
}

fn diverged(epoch: usize, e: Error) -> Error {
    match e {
        Error::NonFiniteValue(what) => Error::Diverged { epoch, what },
        other => other,
    }
}

fn check_finite(epoch: usize, what: &str, value: f64, params: &ModelParams) -> Result<()> {
    if value.is_finite() && params.is_finite() {
        Ok(())
    } else {
        Err(Error::Diverged {
            epoch,
            what: what.to_string(),
        })
    }
}

/// Options that only tests and audits need.
#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Starting `g_θ` instead of a fresh initialisation.
    pub inferencer_init: Option<ModelParams>,
    /// Record detector parameters after every epoch.
    pub trace: bool,
}

/// Joint training: each epoch infers `Â'` from the current `g_θ`, feeds it
/// to the detector, and updates both networks from the same state.
pub fn train_joint(problem: &Problem, cfg: &TrainingConfig, opts: &TrainOptions) -> Result<TrainedModels> {
    if cfg.aprime != AprimeSource::Joint {
        return Err(Error::Config(format!("joint training needs the joint A' source, got {}", cfg.aprime)));
    }
    let d = problem.features().ncols();
    let mut w = init_params(&detector_dims(d, cfg), derive_seed(cfg.seed, Stream::InitDetector, 0))?;
    let mut theta = match &opts.inferencer_init {
        Some(t) => t.clone(),
        None => init_params(&inferencer_dims(d, cfg), derive_seed(cfg.seed, Stream::InitInferencer, 0))?,
    };
    let mut opt_w = Optimizer::new(cfg.optimizer, cfg.lr_detector);
    let mut opt_theta = Optimizer::new(cfg.optimizer, cfg.lr_inferencer);
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut trajectory = Vec::new();
    for epoch in 0..cfg.epochs {
        let adj = problem.epoch_adjacency(cfg, Stream::Prune, epoch)?;
        let (aprime, cache) = infer_aprime(problem, &theta, &adj).map_err(|e| diverged(epoch, e))?;
        let x = expand_features(problem.view.graph(), problem.features(), &aprime)?;
        let det = detector_step(problem, cfg, &w, &adj, &x, epoch, cfg.couple).map_err(|e| diverged(epoch, e))?;
        let pull = det.input_grads.as_ref().map(|gx| aprime_pull(problem.view.graph(), gx));
        let (inf_value, inf_grads) = inferencer_step(problem, cfg, &theta, &adj, &aprime, &cache, pull.as_ref())?;
        opt_w.apply(&mut w, &det.grads);
        opt_theta.apply(&mut theta, &inf_grads);
        check_finite(epoch, "detector", det.value, &w)?;
        check_finite(epoch, "inferencer", inf_value, &theta)?;
        history.push(EpochRecord {
            detector: det.value,
            detection: det.detection,
            fairness: det.fairness,
            inferencer: Some(inf_value),
        });
        if opts.trace {
            trajectory.push(w.clone());
        }
    }
    Ok(TrainedModels {
        detector: w,
        inferencer: Some(theta),
        history,
        pretrain_history: Vec::new(),
        trajectory,
    })
}

/// Trains `g_θ` alone on the subgroup loss for `cfg.epochs` epochs.
pub fn pretrain_inferencer(problem: &Problem, cfg: &TrainingConfig) -> Result<(ModelParams, Vec<f64>)> {
    let d = problem.features().ncols();
    let mut theta = init_params(&inferencer_dims(d, cfg), derive_seed(cfg.seed, Stream::InitInferencer, 0))?;
    let mut opt = Optimizer::new(cfg.optimizer, cfg.lr_inferencer);
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let adj = problem.epoch_adjacency(cfg, Stream::PrunePretrain, epoch)?;
        let (aprime, cache) = infer_aprime(problem, &theta, &adj).map_err(|e| diverged(epoch, e))?;
        let (value, grads) = inferencer_step(problem, cfg, &theta, &adj, &aprime, &cache, None)?;
        opt.apply(&mut theta, &grads);
        check_finite(epoch, "inferencer", value, &theta)?;
        history.push(value);
    }
    Ok((theta, history))
}

/// Trains the detector against a frozen `g_θ`, re-inferring `Â'` on each
/// epoch's structure without any gradient reaching `θ`.
pub fn train_detector_frozen(
    problem: &Problem,
    cfg: &TrainingConfig,
    theta: &ModelParams,
    opts: &TrainOptions,
) -> Result<(ModelParams, Vec<EpochRecord>, Vec<ModelParams>)> {
    let d = problem.features().ncols();
    let mut w = init_params(&detector_dims(d, cfg), derive_seed(cfg.seed, Stream::InitDetector, 0))?;
    let mut opt = Optimizer::new(cfg.optimizer, cfg.lr_detector);
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut trajectory = Vec::new();
    for epoch in 0..cfg.epochs {
        let adj = problem.epoch_adjacency(cfg, Stream::Prune, epoch)?;
        let (aprime, _) = infer_aprime(problem, theta, &adj).map_err(|e| diverged(epoch, e))?;
        let x = expand_features(problem.view.graph(), problem.features(), &aprime)?;
        let det = detector_step(problem, cfg, &w, &adj, &x, epoch, false).map_err(|e| diverged(epoch, e))?;
        opt.apply(&mut w, &det.grads);
        check_finite(epoch, "detector", det.value, &w)?;
        history.push(EpochRecord {
            detector: det.value,
            detection: det.detection,
            fairness: det.fairness,
            inferencer: None,
        });
        if opts.trace {
            trajectory.push(w.clone());
        }
    }
    Ok((w, history, trajectory))
}

/// Pre-trains `g_θ`, freezes it, then trains the detector.
pub fn train_pretrained(problem: &Problem, cfg: &TrainingConfig, opts: &TrainOptions) -> Result<TrainedModels> {
    let (theta, pretrain_history) = pretrain_inferencer(problem, cfg)?;
    let (w, history, trajectory) = train_detector_frozen(problem, cfg, &theta, opts)?;
    Ok(TrainedModels {
        detector: w,
        inferencer: Some(theta),
        history,
        pretrain_history,
        trajectory,
    })
}

/// Trains the detector on a fixed (or absent) `Â'` column.
pub fn train_fixed(problem: &Problem, cfg: &TrainingConfig, opts: &TrainOptions) -> Result<TrainedModels> {
    let column = fixed_aprime(problem, cfg)?;
    let x = match &column {
        Some(c) => expand_features(problem.view.graph(), problem.features(), c)?,
        None => problem.features().clone(),
    };
    let d = problem.features().ncols();
    let mut w = init_params(&detector_dims(d, cfg), derive_seed(cfg.seed, Stream::InitDetector, 0))?;
    let mut opt = Optimizer::new(cfg.optimizer, cfg.lr_detector);
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut trajectory = Vec::new();
    for epoch in 0..cfg.epochs {
        let adj = problem.epoch_adjacency(cfg, Stream::Prune, epoch)?;
        let det = detector_step(problem, cfg, &w, &adj, &x, epoch, false).map_err(|e| diverged(epoch, e))?;
        opt.apply(&mut w, &det.grads);
        check_finite(epoch, "detector", det.value, &w)?;
        history.push(EpochRecord {
            detector: det.value,
            detection: det.detection,
            fairness: det.fairness,
            inferencer: None,
        });
        if opts.trace {
            trajectory.push(w.clone());
        }
    }
    Ok(TrainedModels {
        detector: w,
        inferencer: None,
        history,
        pretrain_history: Vec::new(),
        trajectory,
    })
}

fn fixed_aprime(problem: &Problem, cfg: &TrainingConfig) -> Result<Option<Array1<f64>>> {
    assign_aprime_baseline(
        cfg.aprime,
        problem.view.graph(),
        problem.view.groups(),
        derive_seed(cfg.seed, Stream::RandomAprime, 0),
    )
}

/// Dispatches on the configured `A'` source.
pub fn train(problem: &Problem, cfg: &TrainingConfig) -> Result<TrainedModels> {
    let opts = TrainOptions::default();
    match cfg.aprime {
        AprimeSource::Joint => train_joint(problem, cfg, &opts),
        AprimeSource::Pretrained => train_pretrained(problem, cfg, &opts),
        _ => train_fixed(problem, cfg, &opts),
    }
}

/// Test-set scores of trained models on the unpruned view.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub scores: Array1<f64>,
    /// `Â'` per node; absent for `wo`.
    pub aprime: Option<Array1<f64>>,
}

pub fn score(problem: &Problem, cfg: &TrainingConfig, models: &TrainedModels) -> Result<Evaluation> {
    let g = &problem.base;
    let (adj, feats) = (g.adjacency(), g.features());
    let aprime = match (&models.inferencer, cfg.aprime.has_inferencer()) {
        (Some(theta), true) => Some(forward(adj, theta, feats)?.0),
        _ => fixed_aprime(problem, cfg)?.map(|c| c.slice(ndarray::s![..g.node_count()]).to_owned()),
    };
    let x = match &aprime {
        Some(c) => expand_features(g, feats, c)?,
        None => feats.clone(),
    };
    let (scores, _) = forward(adj, &models.detector, &x)?;
    Ok(Evaluation { scores, aprime })
}

/// Detection and fairness metrics on the reviews and users of `part`.
pub fn evaluate_part(problem: &Problem, eval: &Evaluation, part: Part) -> Result<MetricsReport> {
    let g = &problem.base;
    let reviews = problem.split.reviews(g, part);
    let items: Vec<Scored> = reviews
        .iter()
        .map(|&r| Scored {
            id: r,
            score: eval.scores[r.0],
            spam: g.label(r) == Some(true),
        })
        .collect();
    let a: Vec<u8> = reviews.iter().map(|&r| problem.groups.a(r).unwrap_or(1)).collect();
    let sub: Vec<Option<u8>> = reviews.iter().map(|&r| problem.groups.review_subgroup(g, r)).collect();
    let (protected, favored) = split_by_group(&items, &a);
    let ndcg_protected = ndcg(&protected)?;
    let ndcg_favored = ndcg(&favored)?;
    let auc_aprime = eval.aprime.as_ref().and_then(|col| {
        let preds: Vec<(f64, bool)> = problem
            .split
            .users(part)
            .iter()
            .filter(|&&u| problem.groups.is_favored(u))
            .map(|&u| (col[u.0], problem.groups.a_prime(u) == Some(1)))
            .collect();
        auc(&preds).ok()
    });
    Ok(MetricsReport {
        ndcg_all: ndcg(&items)?,
        ndcg_protected,
        ndcg_favored,
        delta_ndcg: delta_ndcg(&items, &a)?,
        afrr_mixed: afrr(&items, &a, &sub, 1).ok(),
        afrr_pure: afrr(&items, &a, &sub, 0).ok(),
        auc_aprime,
    })
}

/// Builds the problem, trains per `cfg` and evaluates on the test split.
pub fn run_experiment(g: &ReviewGraph, cfg: &TrainingConfig) -> Result<(MetricsReport, TrainedModels)> {
    let problem = Problem::new(g, cfg)?;
    let models = train(&problem, cfg)?;
    let eval = score(&problem, cfg, &models)?;
    Ok((evaluate_part(&problem, &eval, Part::Test)?, models))
}
