//! A small graph classifier with hand-written exact gradients.
//!
//! Architecture, all arithmetic in `f64`:
//!
//! 1. `num_layers` aggregation layers. Layer `l` computes, per node `v`,
//!    `H_l[v] = ReLU(W_l · mean_{u ∈ {v} ∪ N(v)} H_{l−1}[u] + b_l)` — the
//!    mean over the closed neighborhood, then an affine map.
//! 2. Mean-pool readout over nodes: one embedding vector per graph.
//! 3. A linear head producing class logits; losses are weighted
//!    cross-entropy on a numerically stable log-softmax.
//!
//! With `num_layers = 0` the model degenerates to multinomial logistic
//! regression on mean node features — the convex reduction used by the
//! convergence tests.
//!
//! Gradients are derived by hand and checked against central finite
//! differences; batch objectives are expressed as `Σ_i c_i · ℓ_i(raw)` for
//! an arbitrary per-sample coefficient vector `c`, which is the common form
//! every reweighting method in this crate reduces to.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::GraphInstance;

/// One affine map: `weights` is `[out][in]`, `bias` is `[out]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerParams {
    pub weights: Vec<Vec<f64>>,
    pub bias: Vec<f64>,
}

impl LayerParams {
    fn zeros(out_dim: usize, in_dim: usize) -> Self {
        Self {
            weights: vec![vec![0.0; in_dim]; out_dim],
            bias: vec![0.0; out_dim],
        }
    }

    /// Uniform init in ±1/√fan_in. Draw order is row-major weights, then
    /// bias, so initialization is reproducible from the rng stream.
    fn init<R: Rng>(out_dim: usize, in_dim: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let weights = (0..out_dim)
            .map(|_| (0..in_dim).map(|_| rng.random_range(-bound..bound)).collect())
            .collect();
        let bias = (0..out_dim).map(|_| rng.random_range(-bound..bound)).collect();
        Self { weights, bias }
    }

    fn out_dim(&self) -> usize {
        self.weights.len()
    }

    fn in_dim(&self) -> usize {
        self.weights.first().map_or(0, Vec::len)
    }
}

/// All trainable parameters: aggregation layers plus the linear head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelState {
    pub layers: Vec<LayerParams>,
    pub head: LayerParams,
}

impl ModelState {
    /// Builds a model with freshly initialized parameters.
    ///
    /// `num_layers = 0` yields a linear head over mean node features
    /// (multinomial logistic regression).
    pub fn init<R: Rng>(
        feature_dim: usize,
        embedding_dim: usize,
        num_layers: usize,
        num_classes: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if feature_dim == 0 || num_classes == 0 {
            return Err(Error::InvalidInput(
                "feature_dim and num_classes must be positive".into(),
            ));
        }
        if num_layers > 0 && embedding_dim == 0 {
            return Err(Error::InvalidInput(
                "embedding_dim must be positive when layers are present".into(),
            ));
        }
        let mut layers = Vec::with_capacity(num_layers);
        for l in 0..num_layers {
            let in_dim = if l == 0 { feature_dim } else { embedding_dim };
            layers.push(LayerParams::init(embedding_dim, in_dim, rng));
        }
        let head_in = if num_layers == 0 { feature_dim } else { embedding_dim };
        let head = LayerParams::init(num_classes, head_in, rng);
        Ok(Self { layers, head })
    }

    pub fn num_classes(&self) -> usize {
        self.head.out_dim()
    }

    /// Dimension of the readout embedding the head consumes.
    pub fn embedding_dim(&self) -> usize {
        self.head.in_dim()
    }

    pub fn feature_dim(&self) -> usize {
        self.layers.first().map_or(self.head.in_dim(), LayerParams::in_dim)
    }

    /// Loads a model from its JSON serialization.
    pub fn load_json(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Saves the model as JSON (f64 values round-trip exactly).
    pub fn save_json(&self, path: &std::path::Path) -> Result<()> {
        let text = serde_json::to_string(self)?;
        std::fs::write(path, text)?;
        Ok(())
    }
}

/// Parameter-shaped gradient accumulator.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<LayerParams>,
    pub head: LayerParams,
}

impl Gradients {
    pub fn zeros_like(model: &ModelState) -> Self {
        Self {
            layers: model
                .layers
                .iter()
                .map(|l| LayerParams::zeros(l.out_dim(), l.in_dim()))
                .collect(),
            head: LayerParams::zeros(model.head.out_dim(), model.head.in_dim()),
        }
    }

    pub fn add_scaled(&mut self, other: &Gradients, scale: f64) {
        for (dst, src) in self.layers.iter_mut().zip(&other.layers) {
            add_scaled_layer(dst, src, scale);
        }
        add_scaled_layer(&mut self.head, &other.head, scale);
    }

    /// Euclidean norm over every parameter coordinate.
    pub fn l2_norm(&self) -> f64 {
        let mut sq = 0.0;
        for layer in self.layers.iter().chain(std::iter::once(&self.head)) {
            for row in &layer.weights {
                for &w in row {
                    sq += w * w;
                }
            }
            for &b in &layer.bias {
                sq += b * b;
            }
        }
        sq.sqrt()
    }
}

fn add_scaled_layer(dst: &mut LayerParams, src: &LayerParams, scale: f64) {
    for (drow, srow) in dst.weights.iter_mut().zip(&src.weights) {
        for (d, s) in drow.iter_mut().zip(srow) {
            *d += scale * s;
        }
    }
    for (d, s) in dst.bias.iter_mut().zip(&src.bias) {
        *d += scale * s;
    }
}

/// Closed neighborhoods `{v} ∪ N(v)` from an undirected edge list, with
/// duplicate edges and self-loops collapsed.
fn closed_neighborhoods(n_nodes: usize, edges: &[(usize, usize)]) -> Vec<Vec<usize>> {
    let mut nbrs: Vec<Vec<usize>> = (0..n_nodes).map(|v| vec![v]).collect();
    for &(u, v) in edges {
        if u != v {
            nbrs[u].push(v);
            nbrs[v].push(u);
        }
    }
    for list in &mut nbrs {
        list.sort_unstable();
        list.dedup();
    }
    nbrs
}

fn affine(params: &LayerParams, x: &[f64]) -> Vec<f64> {
    params
        .weights
        .iter()
        .zip(&params.bias)
        .map(|(row, &b)| row.iter().zip(x).map(|(w, xi)| w * xi).sum::<f64>() + b)
        .collect()
}

/// Per-graph forward cache holding everything backward needs.
struct GraphForward {
    neighborhoods: Vec<Vec<usize>>,
    /// Aggregated inputs M_l per layer (closed-neighborhood means).
    aggregated: Vec<Vec<Vec<f64>>>,
    /// Post-ReLU activations H_l per layer.
    activations: Vec<Vec<Vec<f64>>>,
    embedding: Vec<f64>,
    logits: Vec<f64>,
}

/// Batched forward results: logits, raw (unweighted) cross-entropy losses,
/// and readout embeddings per sample, plus the caches backward consumes.
pub struct BatchForward {
    items: Vec<GraphForward>,
    pub logits: Vec<Vec<f64>>,
    pub losses_raw: Vec<f64>,
    pub embeddings: Vec<Vec<f64>>,
}

/// Mean over the rows of a feature matrix.
pub fn readout(features: &[Vec<f64>]) -> Result<Vec<f64>> {
    if features.is_empty() {
        return Err(Error::InvalidInput("readout over zero nodes".into()));
    }
    let dim = features[0].len();
    let mut mean = vec![0.0; dim];
    for row in features {
        if row.len() != dim {
            return Err(Error::Shape(format!(
                "ragged feature rows: {} vs {dim}",
                row.len()
            )));
        }
        for (m, &x) in mean.iter_mut().zip(row) {
            *m += x;
        }
    }
    let inv = 1.0 / features.len() as f64;
    for m in &mut mean {
        *m *= inv;
    }
    Ok(mean)
}

/// One aggregation layer applied to a feature matrix:
/// per node, ReLU(W · closed-neighborhood-mean + b).
pub fn aggregate_layer(
    features: &[Vec<f64>],
    edges: &[(usize, usize)],
    layer: &LayerParams,
) -> Result<Vec<Vec<f64>>> {
    let nbrs = closed_neighborhoods(features.len(), edges);
    let (_aggregated, activated) = aggregate_with_neighborhoods(features, &nbrs, layer)?;
    Ok(activated)
}

fn aggregate_with_neighborhoods(
    features: &[Vec<f64>],
    neighborhoods: &[Vec<usize>],
    layer: &LayerParams,
) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    let in_dim = layer.in_dim();
    let mut aggregated = Vec::with_capacity(features.len());
    let mut activated = Vec::with_capacity(features.len());
    for members in neighborhoods {
        let mut mean = vec![0.0; in_dim];
        for &u in members {
            let row = &features[u];
            if row.len() != in_dim {
                return Err(Error::Shape(format!(
                    "node feature dim {} vs layer input dim {in_dim}",
                    row.len()
                )));
            }
            for (m, &x) in mean.iter_mut().zip(row) {
                *m += x;
            }
        }
        let inv = 1.0 / members.len() as f64;
        for m in &mut mean {
            *m *= inv;
        }
        let pre = affine(layer, &mean);
        activated.push(pre.iter().map(|&z| z.max(0.0)).collect());
        aggregated.push(mean);
    }
    Ok((aggregated, activated))
}

fn forward_graph(model: &ModelState, graph: &GraphInstance) -> Result<GraphForward> {
    if graph.nodes.is_empty() {
        return Err(Error::InvalidInput(format!(
            "instance {}: graph has no nodes",
            graph.id
        )));
    }
    let neighborhoods = closed_neighborhoods(graph.nodes.len(), &graph.edges);
    let mut aggregated: Vec<Vec<Vec<f64>>> = Vec::with_capacity(model.layers.len());
    let mut activations: Vec<Vec<Vec<f64>>> = Vec::with_capacity(model.layers.len());
    for (l, layer) in model.layers.iter().enumerate() {
        let prev: &[Vec<f64>] = if l == 0 {
            &graph.nodes
        } else {
            activations[l - 1].as_slice()
        };
        let (agg, act) = aggregate_with_neighborhoods(prev, &neighborhoods, layer)?;
        aggregated.push(agg);
        activations.push(act);
    }
    let pooled_input: &[Vec<f64>] = match activations.last() {
        Some(h) => h.as_slice(),
        None => &graph.nodes,
    };
    let embedding = readout(pooled_input)?;
    if embedding.len() != model.head.in_dim() {
        return Err(Error::Shape(format!(
            "embedding dim {} vs head input dim {}",
            embedding.len(),
            model.head.in_dim()
        )));
    }
    let logits = affine(&model.head, &embedding);
    Ok(GraphForward {
        neighborhoods,
        aggregated,
        activations,
        embedding,
        logits,
    })
}

/// Forward pass for one graph, returning logits.
pub fn forward(model: &ModelState, graph: &GraphInstance) -> Result<Vec<f64>> {
    Ok(forward_graph(model, graph)?.logits)
}

/// Readout embedding for one graph (the representation NNR and the bound
/// diagnostics operate in).
pub fn embed(model: &ModelState, graph: &GraphInstance) -> Result<Vec<f64>> {
    Ok(forward_graph(model, graph)?.embedding)
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// `sample_weight × (−log softmax(logits)[label])`, computed through the
/// log-sum-exp identity so large logits cannot overflow.
pub fn weighted_cross_entropy(logits: &[f64], label: usize, sample_weight: f64) -> Result<f64> {
    if label >= logits.len() {
        return Err(Error::InvalidInput(format!(
            "label {label} outside 0..{}",
            logits.len()
        )));
    }
    if sample_weight < 0.0 {
        return Err(Error::InvalidInput(format!(
            "sample_weight {sample_weight} < 0"
        )));
    }
    if let Some(z) = logits.iter().find(|z| !z.is_finite()) {
        return Err(Error::NonFinite(format!("logit {z}")));
    }
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let log_sum: f64 = logits.iter().map(|&z| (z - max).exp()).sum::<f64>().ln() + max;
    Ok(sample_weight * (log_sum - logits[label]))
}

/// Runs the forward pass over a batch, caching per-graph intermediates and
/// the raw (weight-1) cross-entropy losses.
pub fn forward_batch(model: &ModelState, graphs: &[&GraphInstance]) -> Result<BatchForward> {
    let mut items = Vec::with_capacity(graphs.len());
    let mut logits = Vec::with_capacity(graphs.len());
    let mut losses = Vec::with_capacity(graphs.len());
    let mut embeddings = Vec::with_capacity(graphs.len());
    for graph in graphs {
        let fwd = forward_graph(model, graph)?;
        losses.push(weighted_cross_entropy(&fwd.logits, graph.label, 1.0)?);
        logits.push(fwd.logits.clone());
        embeddings.push(fwd.embedding.clone());
        items.push(fwd);
    }
    Ok(BatchForward {
        items,
        logits,
        losses_raw: losses,
        embeddings,
    })
}

/// Backprop through one cached graph given d(objective)/d(logits),
/// accumulating into `grads`.
fn backward_graph(
    model: &ModelState,
    graph: &GraphInstance,
    fwd: &GraphForward,
    dlogits: &[f64],
    grads: &mut Gradients,
) {
    let n_nodes = graph.nodes.len() as f64;

    // Head: logits = W_head·g + b_head.
    let emb_dim = model.head.in_dim();
    let mut d_embedding = vec![0.0; emb_dim];
    for (o, &dl) in dlogits.iter().enumerate() {
        if dl == 0.0 {
            continue;
        }
        for (e, &g) in fwd.embedding.iter().enumerate() {
            grads.head.weights[o][e] += dl * g;
        }
        grads.head.bias[o] += dl;
        for (e, w) in model.head.weights[o].iter().enumerate() {
            d_embedding[e] += dl * w;
        }
    }

    if model.layers.is_empty() {
        return; // Readout of raw features has no parameters below the head.
    }

    // Readout: g = mean over nodes of H_L, so dH_L[v] = d_embedding / n.
    let mut d_hidden: Vec<Vec<f64>> = vec![
        d_embedding.iter().map(|&d| d / n_nodes).collect();
        graph.nodes.len()
    ];

    for l in (0..model.layers.len()).rev() {
        let layer = &model.layers[l];
        let layer_grad = &mut grads.layers[l];
        let acts = &fwd.activations[l];
        let agg = &fwd.aggregated[l];
        let in_dim = layer.in_dim();

        // ReLU mask + parameter gradients + gradient into the aggregated
        // input M_l, all in one pass over nodes.
        let mut d_agg: Vec<Vec<f64>> = vec![vec![0.0; in_dim]; graph.nodes.len()];
        for (v, d_h) in d_hidden.iter().enumerate() {
            for (o, &dh) in d_h.iter().enumerate() {
                if dh == 0.0 || acts[v][o] <= 0.0 {
                    continue;
                }
                let dz = dh;
                for (i, &m) in agg[v].iter().enumerate() {
                    layer_grad.weights[o][i] += dz * m;
                }
                layer_grad.bias[o] += dz;
                for (i, &w) in layer.weights[o].iter().enumerate() {
                    d_agg[v][i] += dz * w;
                }
            }
        }

        // M_l[v] is the mean of H_{l−1} over the closed neighborhood, so
        // each member u of neighborhood(v) receives dM[v]/|neighborhood(v)|.
        let mut d_prev: Vec<Vec<f64>> = vec![vec![0.0; in_dim]; graph.nodes.len()];
        for (v, members) in fwd.neighborhoods.iter().enumerate() {
            let inv = 1.0 / members.len() as f64;
            for &u in members {
                for (i, &dm) in d_agg[v].iter().enumerate() {
                    d_prev[u][i] += dm * inv;
                }
            }
        }
        d_hidden = d_prev;
    }
    // d_hidden now holds d(objective)/d(input features): discarded, inputs
    // are data.
}

/// Gradient of `Σ_i coeffs[i] · ℓ_i(raw)` over a cached batch.
///
/// Samples with coefficient 0 are skipped entirely, so subset selections
/// (CVaR, DORO) cost nothing for dropped samples. Coefficients may be
/// negative (variance-penalty objectives differentiate through the mean).
pub fn backward_batch(
    model: &ModelState,
    graphs: &[&GraphInstance],
    forward: &BatchForward,
    coeffs: &[f64],
) -> Result<Gradients> {
    if coeffs.len() != graphs.len() || forward.items.len() != graphs.len() {
        return Err(Error::Shape(format!(
            "batch size {} vs {} coefficients and {} caches",
            graphs.len(),
            coeffs.len(),
            forward.items.len()
        )));
    }
    let mut grads = Gradients::zeros_like(model);
    for ((graph, fwd), &c) in graphs.iter().zip(&forward.items).zip(coeffs) {
        if c == 0.0 {
            continue;
        }
        let probs = softmax(&fwd.logits);
        let dlogits: Vec<f64> = probs
            .iter()
            .enumerate()
            .map(|(j, &pj)| c * (pj - if j == graph.label { 1.0 } else { 0.0 }))
            .collect();
        backward_graph(model, graph, fwd, &dlogits, &mut grads);
    }
    Ok(grads)
}

/// Like [`backward_batch`] but accumulates one gradient per group, where
/// `groups[i]` assigns sample `i` to a group in `0..num_groups`.
pub fn backward_batch_per_group(
    model: &ModelState,
    graphs: &[&GraphInstance],
    forward: &BatchForward,
    coeffs: &[f64],
    groups: &[usize],
    num_groups: usize,
) -> Result<Vec<Gradients>> {
    if coeffs.len() != graphs.len() || groups.len() != graphs.len() {
        return Err(Error::Shape(format!(
            "batch size {} vs {} coefficients and {} group ids",
            graphs.len(),
            coeffs.len(),
            groups.len()
        )));
    }
    let mut per_group: Vec<Gradients> =
        (0..num_groups).map(|_| Gradients::zeros_like(model)).collect();
    for (i, ((graph, fwd), &c)) in graphs.iter().zip(&forward.items).zip(coeffs).enumerate() {
        if c == 0.0 {
            continue;
        }
        let g = groups[i];
        if g >= num_groups {
            return Err(Error::InvalidInput(format!(
                "group id {g} outside 0..{num_groups}"
            )));
        }
        let probs = softmax(&fwd.logits);
        let dlogits: Vec<f64> = probs
            .iter()
            .enumerate()
            .map(|(j, &pj)| c * (pj - if j == graph.label { 1.0 } else { 0.0 }))
            .collect();
        backward_graph(model, graph, fwd, &dlogits, &mut per_group[g]);
    }
    Ok(per_group)
}

/// Gradient of `Σ_i q[g(i)] · w_i · ℓ_i(raw)` where `g(i)` is the class of
/// sample `i` — the group-weighted objective in its raw (un-averaged) form.
pub fn backward(
    model: &ModelState,
    graphs: &[&GraphInstance],
    sample_weights: &[f64],
    group_weights_q: &[f64],
) -> Result<Gradients> {
    if sample_weights.len() != graphs.len() {
        return Err(Error::Shape(format!(
            "{} sample weights for {} graphs",
            sample_weights.len(),
            graphs.len()
        )));
    }
    if let Some(w) = sample_weights.iter().find(|w| **w < 0.0) {
        return Err(Error::InvalidInput(format!("sample weight {w} < 0")));
    }
    let coeffs: Vec<f64> = graphs
        .iter()
        .zip(sample_weights)
        .map(|(g, &w)| {
            group_weights_q
                .get(g.label)
                .copied()
                .ok_or_else(|| {
                    Error::Shape(format!(
                        "label {} outside the {}-group weight vector",
                        g.label,
                        group_weights_q.len()
                    ))
                })
                .map(|q| q * w)
        })
        .collect::<Result<_>>()?;
    let fwd = forward_batch(model, graphs)?;
    backward_batch(model, graphs, &fwd, &coeffs)
}

/// In-place SGD: every parameter decremented by `eta × gradient`.
pub fn sgd_step(model: &mut ModelState, grads: &Gradients, eta: f64) {
    for (layer, grad) in model.layers.iter_mut().zip(&grads.layers) {
        for (wrow, grow) in layer.weights.iter_mut().zip(&grad.weights) {
            for (w, g) in wrow.iter_mut().zip(grow) {
                *w -= eta * g;
            }
        }
        for (b, g) in layer.bias.iter_mut().zip(&grad.bias) {
            *b -= eta * g;
        }
    }
    for (wrow, grow) in model.head.weights.iter_mut().zip(&grads.head.weights) {
        for (w, g) in wrow.iter_mut().zip(grow) {
            *w -= eta * g;
        }
    }
    for (b, g) in model.head.bias.iter_mut().zip(&grads.head.bias) {
        *b -= eta * g;
    }
}
