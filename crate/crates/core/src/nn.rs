//! Mean-aggregation GNN shared by the spam detector and the `A'` inferencer.
//!
//! Each layer averages a node's representation with its neighbours'
//! (self included, equal weight), applies an affine map, then ReLU on hidden
//! layers and the logistic function on the last. The last layer has width 1,
//! so the network emits one score in (0, 1) per node.
//!
//! Gradients are computed by hand-written reverse mode. [`backward_with`]
//! accepts extra gradients injected at intermediate representations, which is
//! how mixup branches and the expanded `A'` feature route their gradients
//! back through the main pass.

use std::path::Path;

use ndarray::{Array1, Array2, Axis};
use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::Adjacency;

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    /// `out x in`
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

/// Affine weights of every layer, input first.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub layers: Vec<Layer>,
}

impl ModelParams {
    /// Layer widths, input first, e.g. `[d, 64, 1]`.
    pub fn dims(&self) -> Vec<usize> {
        let mut dims = vec![self.layers[0].weight.ncols()];
        dims.extend(self.layers.iter().map(|l| l.weight.nrows()));
        dims
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.ncols()
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn zeros_like(&self) -> Self {
        ModelParams {
            layers: self
                .layers
                .iter()
                .map(|l| Layer {
                    weight: Array2::zeros(l.weight.raw_dim()),
                    bias: Array1::zeros(l.bias.len()),
                })
                .collect(),
        }
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    /// Weights then bias, layer by layer, row-major.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for l in &self.layers {
            out.extend(l.weight.iter());
            out.extend(l.bias.iter());
        }
        out
    }

    pub fn set_flat(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.num_params());
        let mut k = 0;
        for l in &mut self.layers {
            for w in l.weight.iter_mut() {
                *w = flat[k];
                k += 1;
            }
            for b in l.bias.iter_mut() {
                *b = flat[k];
                k += 1;
            }
        }
    }

    pub fn squared_norm(&self) -> f64 {
        self.layers
            .iter()
            .map(|l| l.weight.iter().map(|w| w * w).sum::<f64>() + l.bias.iter().map(|b| b * b).sum::<f64>())
            .sum()
    }

    /// `self += scale * other`
    pub fn add_scaled(&mut self, other: &ModelParams, scale: f64) {
        for (l, o) in self.layers.iter_mut().zip(&other.layers) {
            l.weight.scaled_add(scale, &o.weight);
            l.bias.scaled_add(scale, &o.bias);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weight.iter().chain(l.bias.iter()).all(|v| v.is_finite()))
    }

    /// Writes the checkpoint text format: a header, the layer widths, then
    /// each layer's weight rows followed by its bias row. Values use the
    /// shortest exponent form that parses back to the same bits.
    pub fn to_checkpoint(&self) -> String {
        let mut s = String::from("fairrank-params 1\n");
        let dims: Vec<String> = self.dims().iter().map(|d| d.to_string()).collect();
        s.push_str(&dims.join(" "));
        s.push('\n');
        for l in &self.layers {
            for row in l.weight.rows() {
                let cells: Vec<String> = row.iter().map(|v| format!("{v:e}")).collect();
                s.push_str(&cells.join(" "));
                s.push('\n');
            }
            let cells: Vec<String> = l.bias.iter().map(|v| format!("{v:e}")).collect();
            s.push_str(&cells.join(" "));
            s.push('\n');
        }
        s
    }

    pub fn from_checkpoint(text: &str) -> Result<Self> {
        let err = |line: usize, message: &str| Error::Parse {
            file: "checkpoint".into(),
            line,
            message: message.into(),
        };
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, "fairrank-params 1")) => {}
            _ => return Err(err(1, "missing header")),
        }
        let (_, dims_line) = lines.next().ok_or_else(|| err(2, "missing dims"))?;
        let dims: Vec<usize> = dims_line
            .split_whitespace()
            .map(|t| t.parse().map_err(|_| err(2, "bad dimension")))
            .collect::<Result<_>>()?;
        if dims.len() < 2 || dims.contains(&0) {
            return Err(Error::BadDimensions(dims));
        }
        let mut parse_row = |want: usize| -> Result<Vec<f64>> {
            let (no, line) = lines.next().ok_or_else(|| err(0, "truncated checkpoint"))?;
            let row: Vec<f64> = line
                .split_whitespace()
                .map(|t| t.parse().map_err(|_| err(no + 1, "bad number")))
                .collect::<Result<_>>()?;
            if row.len() != want {
                return Err(err(no + 1, "wrong row length"));
            }
            Ok(row)
        };
        let mut layers = Vec::new();
        for w in dims.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let mut flat = Vec::with_capacity(fan_in * fan_out);
            for _ in 0..fan_out {
                flat.extend(parse_row(fan_in)?);
            }
            let weight = Array2::from_shape_vec((fan_out, fan_in), flat).expect("shape checked");
            let bias = Array1::from(parse_row(fan_out)?);
            layers.push(Layer { weight, bias });
        }
        Ok(ModelParams { layers })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_checkpoint())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&std::fs::read_to_string(path)?)
    }
}

/// Glorot-uniform weights, zero biases. `layer_dims` runs from the input
/// width to the final width, which must be 1.
pub fn init_params(layer_dims: &[usize], seed: u64) -> Result<ModelParams> {
    if layer_dims.len() < 2 || layer_dims.contains(&0) || *layer_dims.last().unwrap() != 1 {
        return Err(Error::BadDimensions(layer_dims.to_vec()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layers = layer_dims
        .windows(2)
        .map(|w| {
            let (fan_in, fan_out) = (w[0], w[1]);
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let dist = Uniform::new_inclusive(-limit, limit);
            let weight = Array2::from_shape_fn((fan_out, fan_in), |_| dist.sample(&mut rng));
            Layer {
                weight,
                bias: Array1::zeros(fan_out),
            }
        })
        .collect();
    Ok(ModelParams { layers })
}

#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub(crate) fn activate(z: f64, last: bool) -> f64 {
    if last {
        sigmoid(z)
    } else {
        z.max(0.0)
    }
}

/// Derivative of the activation, expressed through its output `h` and input `z`.
#[inline]
pub(crate) fn activation_slope(z: f64, h: f64, last: bool) -> f64 {
    if last {
        h * (1.0 - h)
    } else if z > 0.0 {
        1.0
    } else {
        0.0
    }
}

/// Mean of `self_row` and the rows of `reps` at `neighbors`, written to `out`.
/// This is the single definition of the aggregation arithmetic; the mixup
/// branches reuse it so both paths agree bit for bit.
#[inline]
pub(crate) fn mean_into(out: &mut [f64], self_row: &[f64], data: &[f64], neighbors: &[usize]) {
    out.copy_from_slice(self_row);
    let width = out.len();
    for &j in neighbors {
        let row = &data[j * width..(j + 1) * width];
        for (o, v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
    let count = (1 + neighbors.len()) as f64;
    for o in out.iter_mut() {
        *o /= count;
    }
}

/// Mean of node `i`'s representation and its neighbours'.
pub fn neighborhood_mean(adj: &Adjacency, reps: &Array2<f64>, i: usize) -> Array1<f64> {
    let reps = reps.as_standard_layout();
    let mut out = vec![0.0; reps.ncols()];
    let self_row = reps.row(i).to_vec();
    mean_into(&mut out, &self_row, reps.as_slice().unwrap(), adj.neighbors(i));
    Array1::from(out)
}

/// Applies [`neighborhood_mean`] to every node.
pub fn aggregate(adj: &Adjacency, reps: &Array2<f64>) -> Array2<f64> {
    let (n, width) = reps.dim();
    let mut out = Array2::<f64>::zeros((n, width));
    {
        let reps = reps.as_standard_layout();
        let src = reps.as_slice().unwrap();
        let dst = out.as_slice_mut().unwrap();
        for i in 0..n {
            let self_row = &src[i * width..(i + 1) * width];
            mean_into(&mut dst[i * width..(i + 1) * width], self_row, src, adj.neighbors(i));
        }
    }
    out
}

/// Adjoint of [`aggregate`]: spreads each row of `grads` evenly over the
/// node and its neighbours.
pub fn aggregate_transpose(adj: &Adjacency, grads: &Array2<f64>) -> Array2<f64> {
    let (n, width) = grads.dim();
    let mut out = Array2::<f64>::zeros((n, width));
    let grads = grads.as_standard_layout();
    let src = grads.as_slice().unwrap();
    let dst = out.as_slice_mut().unwrap();
    let mut scaled = vec![0.0; width];
    for i in 0..n {
        let count = (1 + adj.degree(i)) as f64;
        for (s, g) in scaled.iter_mut().zip(&src[i * width..(i + 1) * width]) {
            *s = g / count;
        }
        for j in std::iter::once(i).chain(adj.neighbors(i).iter().copied()) {
            for (o, s) in dst[j * width..(j + 1) * width].iter_mut().zip(&scaled) {
                *o += s;
            }
        }
    }
    out
}

/// Intermediate values of one forward pass, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// `reps[0]` is the input; `reps[l]` is the output of layer `l`.
    pub reps: Vec<Array2<f64>>,
    /// Aggregated input of each layer.
    pub aggregated: Vec<Array2<f64>>,
    /// Pre-activations of each layer.
    pub pre: Vec<Array2<f64>>,
}

impl ForwardCache {
    pub fn node_count(&self) -> usize {
        self.reps[0].nrows()
    }

    pub fn scores(&self) -> Array1<f64> {
        self.reps.last().unwrap().column(0).to_owned()
    }
}

fn check_finite(a: &Array2<f64>, what: &str) -> Result<()> {
    if a.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFiniteValue(what.to_string()))
    }
}

/// Runs the network over every node of `adj`.
pub fn forward(adj: &Adjacency, params: &ModelParams, features: &Array2<f64>) -> Result<(Array1<f64>, ForwardCache)> {
    if features.ncols() != params.input_dim() {
        return Err(Error::DimensionMismatch {
            expected: params.input_dim(),
            found: features.ncols(),
        });
    }
    if features.nrows() != adj.node_count() {
        return Err(Error::DimensionMismatch {
            expected: adj.node_count(),
            found: features.nrows(),
        });
    }
    check_finite(features, "input features")?;
    let depth = params.depth();
    let mut reps = vec![features.as_standard_layout().into_owned()];
    let mut aggregated = Vec::with_capacity(depth);
    let mut pre = Vec::with_capacity(depth);
    for (l, layer) in params.layers.iter().enumerate() {
        let last = l + 1 == depth;
        let agg = aggregate(adj, reps.last().unwrap());
        let mut z = agg.dot(&layer.weight.t());
        z += &layer.bias;
        let mut h = z.mapv(|v| activate(v, last));
        if !h.is_standard_layout() {
            h = h.as_standard_layout().into_owned();
        }
        check_finite(&h, &format!("layer {} activations", l + 1))?;
        aggregated.push(agg);
        pre.push(z);
        reps.push(h);
    }
    let cache = ForwardCache { reps, aggregated, pre };
    Ok((cache.scores(), cache))
}

/// Gradients of a scalar loss.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientBundle {
    pub params: ModelParams,
    /// `N x d_in`; absent when not requested.
    pub inputs: Option<Array2<f64>>,
}

/// Extra gradients added to intermediate representations during the
/// backward pass. `levels[l]` has the shape of `reps[l]` for `l < depth`.
#[derive(Debug, Clone)]
pub struct RepGrads {
    pub levels: Vec<Array2<f64>>,
}

impl RepGrads {
    pub fn zeros(cache: &ForwardCache) -> Self {
        let depth = cache.reps.len() - 1;
        RepGrads {
            levels: cache.reps[..depth].iter().map(|r| Array2::zeros(r.raw_dim())).collect(),
        }
    }
}

/// Exact gradients of a scalar whose derivative w.r.t. each node score is
/// `score_grads`.
pub fn backward(adj: &Adjacency, params: &ModelParams, cache: &ForwardCache, score_grads: &Array1<f64>) -> Result<GradientBundle> {
    backward_with(adj, params, cache, score_grads, None, true)
}

/// [`backward`] with optional injected representation gradients; input
/// gradients are only formed when `want_inputs` is set.
pub fn backward_with(
    adj: &Adjacency,
    params: &ModelParams,
    cache: &ForwardCache,
    score_grads: &Array1<f64>,
    injected: Option<&RepGrads>,
    want_inputs: bool,
) -> Result<GradientBundle> {
    let depth = params.depth();
    let n = cache.node_count();
    if cache.reps.len() != depth + 1
        || score_grads.len() != n
        || adj.node_count() != n
        || cache.reps[0].ncols() != params.input_dim()
    {
        return Err(Error::CacheMismatch);
    }
    if let Some(inj) = injected {
        if inj.levels.len() != depth || inj.levels.iter().zip(&cache.reps).any(|(a, b)| a.dim() != b.dim()) {
            return Err(Error::CacheMismatch);
        }
    }
    let mut grads = params.zeros_like();
    let mut d_h = score_grads.clone().insert_axis(Axis(1));
    let mut input_grads = None;
    for l in (0..depth).rev() {
        let last = l + 1 == depth;
        let z = &cache.pre[l];
        let h = &cache.reps[l + 1];
        let mut d_z = d_h;
        ndarray::Zip::from(&mut d_z)
            .and(z)
            .and(h)
            .for_each(|g, &z, &h| *g *= activation_slope(z, h, last));
        grads.layers[l].weight = d_z.t().dot(&cache.aggregated[l]);
        grads.layers[l].bias = d_z.sum_axis(Axis(0));
        if l == 0 && !want_inputs {
            break;
        }
        let d_agg = d_z.dot(&params.layers[l].weight);
        let mut below = aggregate_transpose(adj, &d_agg);
        if let Some(inj) = injected {
            below += &inj.levels[l];
        }
        if l == 0 {
            input_grads = Some(below);
            break;
        }
        d_h = below;
    }
    Ok(GradientBundle {
        params: grads,
        inputs: input_grads,
    })
}

/// Worst relative error between analytic gradients and central finite
/// differences, over every parameter and every input feature entry.
///
/// `eval` returns the loss and its analytic gradients (inputs included).
/// Relative error is `|a - n| / max(|a|, |n|, 1e-7)`.
pub fn grad_check<F>(eval: F, params: &ModelParams, features: &Array2<f64>, eps: f64) -> f64
where
    F: Fn(&ModelParams, &Array2<f64>) -> (f64, GradientBundle),
{
    let (_, analytic) = eval(params, features);
    let rel = |a: f64, n: f64| (a - n).abs() / a.abs().max(n.abs()).max(1e-7);
    let mut worst = 0.0f64;

    let flat = params.to_flat();
    let flat_grad = analytic.params.to_flat();
    let mut probe = params.clone();
    for k in 0..flat.len() {
        let mut shifted = flat.clone();
        shifted[k] = flat[k] + eps;
        probe.set_flat(&shifted);
        let plus = eval(&probe, features).0;
        shifted[k] = flat[k] - eps;
        probe.set_flat(&shifted);
        let minus = eval(&probe, features).0;
        worst = worst.max(rel(flat_grad[k], (plus - minus) / (2.0 * eps)));
    }
    if let Some(input_grad) = &analytic.inputs {
        let mut x = features.clone();
        for ((i, j), &g) in input_grad.indexed_iter() {
            let orig = x[[i, j]];
            x[[i, j]] = orig + eps;
            let plus = eval(params, &x).0;
            x[[i, j]] = orig - eps;
            let minus = eval(params, &x).0;
            x[[i, j]] = orig;
            worst = worst.max(rel(g, (plus - minus) / (2.0 * eps)));
        }
    }
    worst
}
