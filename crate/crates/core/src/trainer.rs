//! The training loop: one model, one dataset, one method, one seed.
//!
//! Every method reduces to the same mechanical step — compute per-sample
//! gradient coefficients `c_i` for the batch objective `Σ_i c_i·ℓ_i^raw`,
//! run one backward pass, descend — so the loop is shared and the methods
//! differ only in how the coefficients (and any auxiliary state: group
//! weights q, neighbor weights w) evolve:
//!
//! * `erm` — `c_i = 1/n`.
//! * `erm_nnr` — `c_i = w_i/n` with neighbor weights refreshed on a fixed
//!   epoch schedule.
//! * `erm_cmo_*` — per-batch q ascent on the constrained Lagrangian, then
//!   `c_i = q_{y_i}·w_i/|B ∩ y_i|` (w ≡ 1 without the `nnr` stack).
//! * robust baselines — tail selection (`cvar`), χ²-ball sample weights
//!   (`chisq`), outlier dropping (`*_doro`), exponentiated-gradient group
//!   weights (`group_dro`), group selection (`cvar_group`),
//!   gradient-norm-proportional group mixing (`gradient_dro`), and a
//!   mean-plus-variance group objective (`variant_dro`).
//!
//! Determinism: model initialization draws from ChaCha stream 0 of the
//! run seed, epoch shuffling from stream 1, so every run is bitwise
//! reproducible regardless of what else executes concurrently.
//!
//! Group quantities (q ascent, group DRO updates) always need a loss per
//! group, but a shuffled batch may miss small classes entirely; absent
//! groups fall back to an exponential moving average of their past batch
//! means, seeded with the first batch's overall mean.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::baselines::{self, BaselineMethod, BaselineSpec};
use crate::cmo::{self, ClassMeanStats, CmoState};
use crate::config::{TrainConfig, TrainMethod};
use crate::error::{Error, Result};
use crate::graph::{Dataset, GraphInstance, Split};
use crate::model::{self, BatchForward, Gradients, ModelState};
use crate::nnr::{self, NnrWeightVector};

/// Decay of the per-group running-loss fallback.
pub const RUNNING_LOSS_DECAY: f64 = 0.9;

/// Per-epoch convergence diagnostics, both measured on the full training
/// split after the epoch's updates: the Euclidean norm of the method's
/// objective gradient, and the duality-gap proxy
/// `max_g ℓ̄_g − Σ_g q_g·ℓ̄_g` over raw per-group mean losses (q = class
/// frequencies for methods that keep no group weights).
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ConvergenceTrace {
    pub grad_norms: Vec<f64>,
    pub duality_gaps: Vec<f64>,
}

/// Everything a single run produces.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    /// The snapshot from the best-validation epoch (the final model when
    /// the validation split is empty).
    pub model: ModelState,
    pub best_epoch: usize,
    pub best_val_accuracy: f64,
    /// Final group-weight state for the constrained methods.
    pub cmo: Option<CmoState>,
    /// Final neighbor weights (recomputed with the final model), for
    /// methods that use them.
    pub nnr: Option<NnrWeightVector>,
    /// Mean final neighbor weight over clean / noisy-flagged training
    /// samples (None when the method has no weights or the flag set is
    /// empty).
    pub nnr_clean_mean: Option<f64>,
    pub nnr_noisy_mean: Option<f64>,
    /// Per-epoch group weights for methods that maintain them.
    pub q_trajectory: Vec<Vec<f64>>,
    pub trace: ConvergenceTrace,
}

/// Per-class and macro-averaged accuracy, in percent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    /// `per_class[c]` is None when class c has no samples in the split.
    pub per_class: Vec<Option<f64>>,
    /// Macro average over the classes that have samples.
    pub overall: f64,
    /// Classes excluded for having no samples.
    pub excluded_classes: Vec<usize>,
}

/// Argmax class under the model's logits (lowest index wins ties).
pub fn predict(model: &ModelState, graph: &GraphInstance) -> Result<usize> {
    let logits = model::forward(model, graph)?;
    let mut best = 0;
    for (c, &v) in logits.iter().enumerate() {
        if v > logits[best] {
            best = c;
        }
    }
    Ok(best)
}

/// Per-class accuracy `correct_c / total_c` (as percentages) plus their
/// macro average over the classes present in the split.
pub fn evaluate(
    model: &ModelState,
    instances: &[&GraphInstance],
    num_classes: usize,
) -> Result<Evaluation> {
    if instances.is_empty() {
        return Err(Error::InvalidInput("evaluation over an empty split".into()));
    }
    let mut correct = vec![0usize; num_classes];
    let mut total = vec![0usize; num_classes];
    for g in instances {
        if g.label >= num_classes {
            return Err(Error::InvalidInput(format!(
                "label {} outside 0..{num_classes}",
                g.label
            )));
        }
        total[g.label] += 1;
        if predict(model, g)? == g.label {
            correct[g.label] += 1;
        }
    }
    let per_class: Vec<Option<f64>> = (0..num_classes)
        .map(|c| {
            if total[c] == 0 {
                None
            } else {
                Some(100.0 * correct[c] as f64 / total[c] as f64)
            }
        })
        .collect();
    let present: Vec<f64> = per_class.iter().flatten().copied().collect();
    let excluded_classes = (0..num_classes).filter(|&c| total[c] == 0).collect();
    Ok(Evaluation {
        overall: present.iter().sum::<f64>() / present.len() as f64,
        per_class,
        excluded_classes,
    })
}

/// Per-group batch means with a running fallback for absent groups.
struct RunningGroupLosses {
    values: Vec<f64>,
    seen: Vec<bool>,
    initialized: bool,
}

impl RunningGroupLosses {
    fn new(num_groups: usize) -> Self {
        Self {
            values: vec![0.0; num_groups],
            seen: vec![false; num_groups],
            initialized: false,
        }
    }

    /// Returns one loss per group for this batch: the fresh batch mean
    /// where the group is present, the running fallback otherwise. Fresh
    /// values are folded into the running averages afterwards.
    fn step(&mut self, losses: &[f64], labels: &[usize]) -> Vec<f64> {
        let g = self.values.len();
        let mut sums = vec![0.0; g];
        let mut counts = vec![0usize; g];
        for (&l, &y) in losses.iter().zip(labels) {
            sums[y] += l;
            counts[y] += 1;
        }
        if !self.initialized {
            let overall = losses.iter().sum::<f64>() / losses.len().max(1) as f64;
            self.values.fill(overall);
            self.initialized = true;
        }
        let mut effective = Vec::with_capacity(g);
        for i in 0..g {
            if counts[i] == 0 {
                effective.push(self.values[i]);
                continue;
            }
            let fresh = sums[i] / counts[i] as f64;
            effective.push(fresh);
            if self.seen[i] {
                self.values[i] =
                    RUNNING_LOSS_DECAY * self.values[i] + (1.0 - RUNNING_LOSS_DECAY) * fresh;
            } else {
                self.values[i] = fresh;
                self.seen[i] = true;
            }
        }
        effective
    }
}

/// Mutable per-method state carried across batches.
struct MethodState {
    cmo: Option<CmoState>,
    mean_stats: ClassMeanStats,
    running: RunningGroupLosses,
    group_dro_q: Option<Vec<f64>>,
    nnr: Option<NnrWeightVector>,
}

impl MethodState {
    /// The group weights the diagnostics should pair with per-group
    /// losses: the method's q when it maintains one, otherwise the
    /// empirical class frequencies.
    fn effective_q<'a>(&'a self, frequencies: &'a [f64]) -> &'a [f64] {
        if let Some(cmo) = &self.cmo {
            cmo.q()
        } else if let Some(q) = &self.group_dro_q {
            q
        } else {
            frequencies
        }
    }
}

fn batch_class_counts(labels: &[usize], num_classes: usize) -> Vec<usize> {
    let mut counts = vec![0usize; num_classes];
    for &y in labels {
        counts[y] += 1;
    }
    counts
}

/// Per-group mean raw losses over the groups present in the batch.
/// Returns (ascending group ids, their means).
fn present_group_means(
    losses: &[f64],
    labels: &[usize],
    num_classes: usize,
) -> (Vec<usize>, Vec<f64>) {
    let counts = batch_class_counts(labels, num_classes);
    let mut sums = vec![0.0; num_classes];
    for (&l, &y) in losses.iter().zip(labels) {
        sums[y] += l;
    }
    let ids: Vec<usize> = (0..num_classes).filter(|&c| counts[c] > 0).collect();
    let means = ids.iter().map(|&c| sums[c] / counts[c] as f64).collect();
    (ids, means)
}

/// Advances the method's auxiliary state on one batch (group-weight
/// ascent, embedding-mean tracking, group DRO updates). Methods without
/// such state are no-ops.
fn update_method_state(
    method: TrainMethod,
    state: &mut MethodState,
    fwd: &BatchForward,
    labels: &[usize],
    weights: Option<&[f64]>,
    spec: &BaselineSpec,
) -> Result<()> {
    if method.uses_cmo() {
        state.mean_stats.update(&fwd.embeddings, labels)?;
        let weighted: Vec<f64> = match weights {
            Some(w) => fwd.losses_raw.iter().zip(w).map(|(&l, &wi)| wi * l).collect(),
            None => fwd.losses_raw.clone(),
        };
        let group_losses = state.running.step(&weighted, labels);
        let cmo_state = state.cmo.as_mut().expect("CMO method carries CMO state");
        cmo::cmo_update_q(cmo_state, &group_losses, &state.mean_stats)?;
    } else if matches!(method, TrainMethod::Baseline(BaselineMethod::GroupDro)) {
        let group_losses = state.running.step(&fwd.losses_raw, labels);
        let q = state.group_dro_q.as_mut().expect("group DRO carries q");
        *q = baselines::group_dro_update(q, &group_losses, spec.eta_group)?;
    }
    Ok(())
}

/// The gradient of the method's objective on one batch, at the current
/// auxiliary state (no state is mutated here — the training step advances
/// state first, and the epoch-end diagnostics call this directly).
fn objective_gradients(
    method: TrainMethod,
    model: &ModelState,
    batch: &[&GraphInstance],
    fwd: &BatchForward,
    weights: Option<&[f64]>,
    state: &MethodState,
    spec: &BaselineSpec,
    num_classes: usize,
) -> Result<Gradients> {
    let n = batch.len();
    let labels: Vec<usize> = batch.iter().map(|g| g.label).collect();
    let losses = &fwd.losses_raw;

    let coeffs: Vec<f64> = match method {
        TrainMethod::Erm | TrainMethod::Baseline(BaselineMethod::Erm) => {
            vec![1.0 / n as f64; n]
        }
        TrainMethod::ErmNnr => {
            let w = weights.ok_or_else(|| {
                Error::InvalidInput("neighbor weights missing for an nnr method".into())
            })?;
            w.iter().map(|&wi| wi / n as f64).collect()
        }
        TrainMethod::ErmCmoKl
        | TrainMethod::ErmCmoChi
        | TrainMethod::ErmNnrCmoKl
        | TrainMethod::ErmNnrCmoChi => {
            let cmo_state = state
                .cmo
                .as_ref()
                .ok_or_else(|| Error::InvalidInput("CMO state missing".into()))?;
            cmo::group_weighted_coefficients(&labels, cmo_state.q(), weights)?
        }
        TrainMethod::Baseline(BaselineMethod::Cvar) => {
            let selected = baselines::cvar_indices(losses, spec.alpha_cvar)?;
            let share = 1.0 / selected.len() as f64;
            let mut c = vec![0.0; n];
            for i in selected {
                c[i] = share;
            }
            c
        }
        TrainMethod::Baseline(BaselineMethod::Chisq) => {
            let w = baselines::chisq_weights(losses, spec.rho_chisq)?;
            w.into_iter().map(|wi| wi / n as f64).collect()
        }
        TrainMethod::Baseline(BaselineMethod::CvarDoro) => {
            let kept = baselines::doro_filter(losses, spec.eps_doro)?;
            let kept_losses: Vec<f64> = kept.iter().map(|&i| losses[i]).collect();
            let selected = baselines::cvar_indices(&kept_losses, spec.alpha_cvar)?;
            let share = 1.0 / selected.len() as f64;
            let mut c = vec![0.0; n];
            for j in selected {
                c[kept[j]] = share;
            }
            c
        }
        TrainMethod::Baseline(BaselineMethod::ChisqDoro) => {
            let kept = baselines::doro_filter(losses, spec.eps_doro)?;
            let kept_losses: Vec<f64> = kept.iter().map(|&i| losses[i]).collect();
            let w = baselines::chisq_weights(&kept_losses, spec.rho_chisq)?;
            let mut c = vec![0.0; n];
            for (j, &i) in kept.iter().enumerate() {
                c[i] = w[j] / kept.len() as f64;
            }
            c
        }
        TrainMethod::Baseline(BaselineMethod::CvarGroup) => {
            let (ids, means) = present_group_means(losses, &labels, num_classes);
            let selected = baselines::cvar_indices(&means, spec.alpha_cvar)?;
            let share = 1.0 / selected.len() as f64;
            let mut group_coeff = vec![0.0; num_classes];
            for j in selected {
                group_coeff[ids[j]] = share;
            }
            let counts = batch_class_counts(&labels, num_classes);
            labels
                .iter()
                .map(|&y| group_coeff[y] / counts[y] as f64)
                .collect()
        }
        TrainMethod::Baseline(BaselineMethod::GroupDro) => {
            let q = state
                .group_dro_q
                .as_ref()
                .ok_or_else(|| Error::InvalidInput("group DRO state missing".into()))?;
            let counts = batch_class_counts(&labels, num_classes);
            labels.iter().map(|&y| q[y] / counts[y] as f64).collect()
        }
        TrainMethod::Baseline(BaselineMethod::GradientDro) => {
            // Mix per-group mean gradients in proportion to their norms.
            let counts = batch_class_counts(&labels, num_classes);
            let unit: Vec<f64> = labels.iter().map(|&y| 1.0 / counts[y] as f64).collect();
            let per_group =
                model::backward_batch_per_group(model, batch, fwd, &unit, &labels, num_classes)?;
            let norms: Vec<f64> = per_group.iter().map(Gradients::l2_norm).collect();
            let q = baselines::gradient_dro_weights(&norms)?;
            let mut total = Gradients::zeros_like(model);
            for (grad, &qg) in per_group.iter().zip(&q) {
                if qg != 0.0 {
                    total.add_scaled(grad, qg);
                }
            }
            return Ok(total);
        }
        TrainMethod::Baseline(BaselineMethod::VariantDro) => {
            let (ids, means) = present_group_means(losses, &labels, num_classes);
            let per_group = baselines::variant_dro_group_coefficients(&means, spec.lambda_var)?;
            let mut group_coeff = vec![0.0; num_classes];
            for (j, &g) in ids.iter().enumerate() {
                group_coeff[g] = per_group[j];
            }
            let counts = batch_class_counts(&labels, num_classes);
            labels
                .iter()
                .map(|&y| group_coeff[y] / counts[y] as f64)
                .collect()
        }
    };
    model::backward_batch(model, batch, fwd, &coeffs)
}

/// Raw per-group mean losses over a full split, for the duality-gap proxy;
/// groups with no samples are omitted from both the max and the weighted
/// mean.
fn duality_gap(losses: &[f64], labels: &[usize], q: &[f64], num_classes: usize) -> f64 {
    let (ids, means) = present_group_means(losses, labels, num_classes);
    let max = means.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let weighted: f64 = ids.iter().zip(&means).map(|(&g, &m)| q[g] * m).sum();
    max - weighted
}

fn diverged(epoch: usize, err: Error) -> Error {
    match err {
        Error::NonFinite(msg) => {
            Error::Diverged(format!("training diverged at epoch {epoch}: {msg}"))
        }
        other => other,
    }
}

fn ensure_finite_losses(losses: &[f64], epoch: usize) -> Result<()> {
    if let Some(bad) = losses.iter().find(|l| !l.is_finite()) {
        return Err(Error::Diverged(format!(
            "training diverged at epoch {epoch}: loss {bad}"
        )));
    }
    Ok(())
}

/// Trains one model. Deterministic in (config, dataset, seed); aborts with
/// [`Error::Diverged`] if any loss leaves the finite range.
pub fn train(config: &TrainConfig, dataset: &Dataset, seed: u64) -> Result<TrainOutcome> {
    let header = &dataset.header;
    let num_classes = header.num_classes;
    let method = config.method;

    let mut init_rng = ChaCha8Rng::seed_from_u64(seed);
    init_rng.set_stream(0);
    let mut model = ModelState::init(
        header.feature_dim,
        config.embedding_dim,
        config.num_layers,
        num_classes,
        &mut init_rng,
    )?;

    let cmo_state = if method.uses_cmo() {
        let mut params = config.cmo;
        if let Some(k) = method.divergence_order() {
            params.k = k;
        }
        Some(CmoState::new(dataset.train_class_frequencies(), params)?)
    } else {
        None
    };
    let group_dro_q = matches!(method, TrainMethod::Baseline(BaselineMethod::GroupDro))
        .then(|| vec![1.0 / num_classes as f64; num_classes]);
    let mut state = MethodState {
        cmo: cmo_state,
        mean_stats: ClassMeanStats::new(num_classes, model.embedding_dim()),
        running: RunningGroupLosses::new(num_classes),
        group_dro_q,
        nnr: None,
    };

    if config.epochs == 0 {
        return Ok(TrainOutcome {
            model,
            best_epoch: 0,
            best_val_accuracy: 0.0,
            cmo: state.cmo,
            nnr: None,
            nnr_clean_mean: None,
            nnr_noisy_mean: None,
            q_trajectory: Vec::new(),
            trace: ConvergenceTrace::default(),
        });
    }

    let train_split = dataset.split(Split::Train);
    if train_split.is_empty() {
        return Err(Error::InvalidInput("training split is empty".into()));
    }
    let val_split = dataset.split(Split::Val);
    let labels: Vec<usize> = train_split.iter().map(|g| g.label).collect();
    let frequencies = dataset.train_class_frequencies();

    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(seed);
    shuffle_rng.set_stream(1);

    let mut best_model = model.clone();
    let mut best_epoch = 0usize;
    let mut best_val = f64::NEG_INFINITY;
    let mut trace = ConvergenceTrace::default();
    let mut q_trajectory = Vec::new();
    let mut order: Vec<usize> = (0..train_split.len()).collect();

    for epoch in 0..config.epochs {
        if method.uses_nnr() && nnr::refresh_schedule(epoch, &config.nnr) {
            let embeddings = nnr::compute_embeddings(&model, &train_split)?;
            state.nnr = Some(nnr::nnr_weights(&embeddings, &labels, &config.nnr)?);
        }

        order.shuffle(&mut shuffle_rng);
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&GraphInstance> = chunk.iter().map(|&i| train_split[i]).collect();
            let batch_labels: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let batch_weights: Option<Vec<f64>> = state
                .nnr
                .as_ref()
                .map(|w| chunk.iter().map(|&i| w.as_slice()[i]).collect());
            let fwd = model::forward_batch(&model, &batch).map_err(|e| diverged(epoch, e))?;
            ensure_finite_losses(&fwd.losses_raw, epoch)?;
            update_method_state(
                method,
                &mut state,
                &fwd,
                &batch_labels,
                batch_weights.as_deref(),
                &config.baseline,
            )?;
            let grads = objective_gradients(
                method,
                &model,
                &batch,
                &fwd,
                batch_weights.as_deref(),
                &state,
                &config.baseline,
                num_classes,
            )?;
            model::sgd_step(&mut model, &grads, config.learning_rate);
        }

        // Epoch diagnostics on the full training split, at current state.
        let full = model::forward_batch(&model, &train_split).map_err(|e| diverged(epoch, e))?;
        ensure_finite_losses(&full.losses_raw, epoch)?;
        let full_weights: Option<&[f64]> = state.nnr.as_ref().map(NnrWeightVector::as_slice);
        let grads = objective_gradients(
            method,
            &model,
            &train_split,
            &full,
            full_weights,
            &state,
            &config.baseline,
            num_classes,
        )?;
        trace.grad_norms.push(grads.l2_norm());
        trace.duality_gaps.push(duality_gap(
            &full.losses_raw,
            &labels,
            state.effective_q(&frequencies),
            num_classes,
        ));
        if let Some(cmo_state) = &state.cmo {
            q_trajectory.push(cmo_state.q().to_vec());
        } else if let Some(q) = &state.group_dro_q {
            q_trajectory.push(q.clone());
        }

        if val_split.is_empty() {
            best_model = model.clone();
            best_epoch = epoch;
        } else {
            let val = evaluate(&model, &val_split, num_classes)?;
            if val.overall > best_val {
                best_val = val.overall;
                best_model = model.clone();
                best_epoch = epoch;
            }
        }
    }

    // Final neighbor weights from the final model, and their clean/noisy
    // split for noise-discrimination reporting.
    let (nnr_final, clean_mean, noisy_mean) = if method.uses_nnr() {
        let embeddings = nnr::compute_embeddings(&model, &train_split)?;
        let weights = nnr::nnr_weights(&embeddings, &labels, &config.nnr)?;
        let mean_where = |want_noisy: bool| {
            let vals: Vec<f64> = train_split
                .iter()
                .zip(weights.as_slice())
                .filter(|(g, _)| g.noisy == want_noisy)
                .map(|(_, &w)| w)
                .collect();
            (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
        };
        let (clean, noisy) = (mean_where(false), mean_where(true));
        (Some(weights), clean, noisy)
    } else {
        (None, None, None)
    };

    Ok(TrainOutcome {
        model: best_model,
        best_epoch,
        best_val_accuracy: if best_val.is_finite() { best_val } else { 0.0 },
        cmo: state.cmo,
        nnr: nnr_final,
        nnr_clean_mean: clean_mean,
        nnr_noisy_mean: noisy_mean,
        q_trajectory,
        trace,
    })
}
