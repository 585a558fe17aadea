//! Constrained group reweighting via alternating ascent/descent on a
//! Lagrangian.
//!
//! Groups are classes. The group weight vector `q` starts uniform and
//! ascends the Lagrangian
//!
//! ```text
//! L(q, θ) = Σ_i q_i·ℓ̄_i − λ₁·(D_k(q‖p) − ρ₁) − λ₂·(Δ(q) − ρ₂)
//! ```
//!
//! where `ℓ̄_i` are per-group mean losses, `D_k` is a Cressie-Read
//! divergence anchoring `q` to the empirical group frequencies `p`, and
//! `Δ(q) = Σ_{i<j} ‖q_i·m_i − q_j·m_j‖²` penalizes collapse of the
//! weighted per-group embedding means `m_i` (tracked as exponential moving
//! averages over batches). θ descends the q-weighted risk; the multipliers
//! λ₁, λ₂ are fixed hyperparameters.
//!
//! Each q step is projected back onto the simplex; `hard_ball` mode
//! additionally projects into the divergence ball of radius ρ₁.
//!
//! Scaling the group means by their weights (`μ_i := q_i·m_i`) is what
//! makes the separation term act on `q` at all — with unweighted means the
//! term is constant in `q` and its gradient vanishes.

use serde::{Deserialize, Serialize};

use crate::divergence::{
    divergence, divergence_gradient, project_divergence_ball, project_simplex, GroupWeights,
};
use crate::error::{Error, Result};
use crate::graph::GraphInstance;
use crate::model::{self, Gradients, ModelState};

/// Decay of the per-group embedding-mean moving average.
pub const MEAN_EMA_DECAY: f64 = 0.9;

/// Hyperparameters for the constrained reweighting optimizer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CmoParams {
    /// Divergence order: 1 (KL) or 2 (½χ²).
    pub k: f64,
    /// Ascent step size for q.
    pub eta_q: f64,
    /// Multiplier on the divergence constraint.
    pub lambda1: f64,
    /// Multiplier on the mean-separation constraint.
    pub lambda2: f64,
    /// Divergence ball radius.
    pub rho1: f64,
    /// Mean-separation slack level.
    pub rho2: f64,
    /// When set, every q update is also projected into the divergence ball.
    pub hard_ball: bool,
}

impl Default for CmoParams {
    fn default() -> Self {
        Self {
            k: 1.0,
            eta_q: 0.05,
            lambda1: 0.3,
            lambda2: 0.01,
            rho1: 1.0,
            rho2: 1.0,
            hard_ball: false,
        }
    }
}

impl CmoParams {
    pub fn validate(&self) -> Result<()> {
        if self.k < 1.0 {
            return Err(Error::Config(format!("cmo.k = {} must be ≥ 1", self.k)));
        }
        if self.eta_q < 0.0 {
            return Err(Error::Config(format!("cmo.eta_q = {} must be ≥ 0", self.eta_q)));
        }
        if self.lambda1 < 0.0 || self.lambda2 < 0.0 {
            return Err(Error::Config(format!(
                "cmo multipliers must be ≥ 0 (lambda1 = {}, lambda2 = {})",
                self.lambda1, self.lambda2
            )));
        }
        if !(self.rho1 > 0.0) || !(self.rho2 > 0.0) {
            return Err(Error::Config(format!(
                "cmo constraint levels must be > 0 (rho1 = {}, rho2 = {})",
                self.rho1, self.rho2
            )));
        }
        Ok(())
    }
}

/// Optimizer state: the current group weights plus hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct CmoState {
    pub weights: GroupWeights,
    pub params: CmoParams,
}

impl CmoState {
    /// Uniform initial q over the groups whose empirical frequencies are
    /// `p`.
    pub fn new(p: Vec<f64>, params: CmoParams) -> Result<Self> {
        params.validate()?;
        Ok(Self {
            weights: GroupWeights::uniform(p)?,
            params,
        })
    }

    pub fn q(&self) -> &[f64] {
        self.weights.q()
    }
}

/// Per-group embedding means tracked as exponential moving averages, with
/// how many samples each group has contributed. Groups with count 0 have
/// never been seen; their mean is undefined and they are excluded from the
/// separation penalty.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassMeanStats {
    means: Vec<Vec<f64>>,
    counts: Vec<usize>,
}

impl ClassMeanStats {
    pub fn new(num_groups: usize, embedding_dim: usize) -> Self {
        Self {
            means: vec![vec![0.0; embedding_dim]; num_groups],
            counts: vec![0; num_groups],
        }
    }

    /// Builds stats directly from fixed means (every group marked seen);
    /// used by tests and by full-dataset evaluations.
    pub fn from_means(means: Vec<Vec<f64>>) -> Self {
        let counts = vec![1; means.len()];
        Self { means, counts }
    }

    pub fn num_groups(&self) -> usize {
        self.means.len()
    }

    pub fn mean(&self, group: usize) -> &[f64] {
        &self.means[group]
    }

    pub fn seen(&self, group: usize) -> bool {
        self.counts[group] > 0
    }

    /// Folds one batch of embeddings into the moving averages: a group's
    /// first appearance sets its mean to the batch mean; later batches
    /// blend with decay [`MEAN_EMA_DECAY`].
    pub fn update(&mut self, embeddings: &[Vec<f64>], labels: &[usize]) -> Result<()> {
        if embeddings.len() != labels.len() {
            return Err(Error::Shape(format!(
                "{} embeddings vs {} labels",
                embeddings.len(),
                labels.len()
            )));
        }
        let dim = self.means.first().map_or(0, Vec::len);
        let mut sums = vec![vec![0.0; dim]; self.means.len()];
        let mut batch_counts = vec![0usize; self.means.len()];
        for (e, &y) in embeddings.iter().zip(labels) {
            if y >= self.means.len() {
                return Err(Error::InvalidInput(format!(
                    "label {y} outside 0..{}",
                    self.means.len()
                )));
            }
            if e.len() != dim {
                return Err(Error::Shape(format!(
                    "embedding dim {} vs stats dim {dim}",
                    e.len()
                )));
            }
            for (s, &x) in sums[y].iter_mut().zip(e) {
                *s += x;
            }
            batch_counts[y] += 1;
        }
        for g in 0..self.means.len() {
            if batch_counts[g] == 0 {
                continue;
            }
            let inv = 1.0 / batch_counts[g] as f64;
            if self.counts[g] == 0 {
                for (m, &s) in self.means[g].iter_mut().zip(&sums[g]) {
                    *m = s * inv;
                }
            } else {
                for (m, &s) in self.means[g].iter_mut().zip(&sums[g]) {
                    *m = MEAN_EMA_DECAY * *m + (1.0 - MEAN_EMA_DECAY) * s * inv;
                }
            }
            self.counts[g] += batch_counts[g];
        }
        Ok(())
    }
}

/// q-weighted risk `Σ_i q_i·ℓ̄_i`.
pub fn group_risk(per_group_mean_losses: &[f64], q: &[f64]) -> Result<f64> {
    if per_group_mean_losses.len() != q.len() {
        return Err(Error::Shape(format!(
            "{} losses vs {} weights",
            per_group_mean_losses.len(),
            q.len()
        )));
    }
    Ok(per_group_mean_losses.iter().zip(q).map(|(&l, &w)| l * w).sum())
}

/// Separation of the weighted group means:
/// `Σ_{i<j} ‖q_i·m_i − q_j·m_j‖²` over pairs of groups that have been seen.
pub fn mean_separation_penalty(stats: &ClassMeanStats, q: &[f64]) -> f64 {
    let m = stats.num_groups().min(q.len());
    let mut total = 0.0;
    for i in 0..m {
        if !stats.seen(i) {
            continue;
        }
        for j in (i + 1)..m {
            if !stats.seen(j) {
                continue;
            }
            total += stats
                .mean(i)
                .iter()
                .zip(stats.mean(j))
                .map(|(&mi, &mj)| {
                    let d = q[i] * mi - q[j] * mj;
                    d * d
                })
                .sum::<f64>();
        }
    }
    total
}

/// The full Lagrangian
/// `Σ q_i·ℓ̄_i − λ₁·(D_k(q‖p) − ρ₁) − λ₂·(Δ(q) − ρ₂)`.
pub fn lagrangian(
    state: &CmoState,
    per_group_mean_losses: &[f64],
    stats: &ClassMeanStats,
) -> Result<f64> {
    let q = state.weights.q();
    let p = state.weights.p();
    let risk = group_risk(per_group_mean_losses, q)?;
    let div = divergence(q, p, state.params.k)?;
    let sep = mean_separation_penalty(stats, q);
    Ok(risk
        - state.params.lambda1 * (div - state.params.rho1)
        - state.params.lambda2 * (sep - state.params.rho2))
}

/// Gradient of the Lagrangian in q: component `i` is
/// `ℓ̄_i − λ₁·f_k′(q_i/p_i) − λ₂·Σ_{j≠i} 2(q_i·m_i − q_j·m_j)·m_i`,
/// with unseen groups excluded from the separation sum.
pub fn grad_q_lagrangian(
    state: &CmoState,
    per_group_mean_losses: &[f64],
    stats: &ClassMeanStats,
) -> Result<Vec<f64>> {
    let q = state.weights.q();
    let p = state.weights.p();
    let m = q.len();
    if per_group_mean_losses.len() != m {
        return Err(Error::Shape(format!(
            "{} losses vs {} groups",
            per_group_mean_losses.len(),
            m
        )));
    }
    let div_grad = divergence_gradient(q, p, state.params.k)?;
    let mut grad = Vec::with_capacity(m);
    for i in 0..m {
        let mut sep_term = 0.0;
        if state.params.lambda2 != 0.0 && stats.seen(i) {
            for j in 0..m {
                if j == i || !stats.seen(j) {
                    continue;
                }
                // d/dq_i ‖q_i·m_i − q_j·m_j‖² = 2(q_i·m_i − q_j·m_j)·m_i
                sep_term += stats
                    .mean(i)
                    .iter()
                    .zip(stats.mean(j))
                    .map(|(&mi, &mj)| 2.0 * (q[i] * mi - q[j] * mj) * mi)
                    .sum::<f64>();
            }
        }
        grad.push(
            per_group_mean_losses[i]
                - state.params.lambda1 * div_grad[i]
                - state.params.lambda2 * sep_term,
        );
    }
    Ok(grad)
}

/// One ascent step on q: `q ← Π_simplex(q + η_q·∇_q L)`, optionally
/// followed by a projection into the divergence ball when `hard_ball` is
/// set. The updated q always satisfies the simplex invariants.
pub fn cmo_update_q(
    state: &mut CmoState,
    per_group_mean_losses: &[f64],
    stats: &ClassMeanStats,
) -> Result<()> {
    if state.params.eta_q == 0.0 && !state.params.hard_ball {
        // A zero step leaves q exactly where it was; re-projecting would
        // only add rounding noise to a point already on the simplex.
        return Ok(());
    }
    let grad = grad_q_lagrangian(state, per_group_mean_losses, stats)?;
    let stepped: Vec<f64> = state
        .weights
        .q()
        .iter()
        .zip(&grad)
        .map(|(&qi, &g)| qi + state.params.eta_q * g)
        .collect();
    let mut projected = project_simplex(&stepped);
    if state.params.hard_ball {
        projected = project_divergence_ball(
            &projected,
            state.weights.p(),
            state.params.k,
            state.params.rho1,
        )?;
    }
    state.weights.set_q(projected)
}

/// Per-sample gradient coefficients for the θ objective
/// `Σ_g q_g · mean_{i ∈ batch ∩ g}(w_i·ℓ_i)`: sample `i` receives
/// `q_{y_i}·w_i / |batch ∩ g(i)|`. Groups absent from the batch contribute
/// nothing.
pub fn group_weighted_coefficients(
    labels: &[usize],
    q: &[f64],
    nnr_weights: Option<&[f64]>,
) -> Result<Vec<f64>> {
    if let Some(w) = nnr_weights {
        if w.len() != labels.len() {
            return Err(Error::Shape(format!(
                "{} sample weights vs {} labels",
                w.len(),
                labels.len()
            )));
        }
    }
    let mut batch_counts = vec![0usize; q.len()];
    for &y in labels {
        if y >= q.len() {
            return Err(Error::InvalidInput(format!("label {y} outside 0..{}", q.len())));
        }
        batch_counts[y] += 1;
    }
    Ok(labels
        .iter()
        .enumerate()
        .map(|(i, &y)| {
            let w = nnr_weights.map_or(1.0, |w| w[i]);
            q[y] * w / batch_counts[y] as f64
        })
        .collect())
}

/// The θ-side objective value and gradient on one batch:
/// `loss = Σ_g q_g · mean_{i∈g}(w_i·ℓ_i)`, gradient via the model's batch
/// backward with the per-sample coefficients of
/// [`group_weighted_coefficients`].
pub fn cmo_objective_for_theta(
    model: &ModelState,
    batch: &[&GraphInstance],
    q: &[f64],
    nnr_weights: Option<&[f64]>,
) -> Result<(f64, Gradients)> {
    let labels: Vec<usize> = batch.iter().map(|g| g.label).collect();
    let coeffs = group_weighted_coefficients(&labels, q, nnr_weights)?;
    let fwd = model::forward_batch(model, batch)?;
    let loss = fwd
        .losses_raw
        .iter()
        .zip(&coeffs)
        .map(|(&l, &c)| c * l)
        .sum();
    let grads = model::backward_batch(model, batch, &fwd, &coeffs)?;
    Ok((loss, grads))
}
