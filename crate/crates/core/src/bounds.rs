//! Post-hoc generalization diagnostics in embedding space.
//!
//! Everything here is read-only reporting, never a training signal:
//!
//! * **coverage radius Γ** — the largest distance from any test embedding
//!   to its nearest train embedding (how far the test set strays from the
//!   training support);
//! * **margin loss** — the fraction of samples whose true-class logit
//!   fails to clear every other logit by a margin γ;
//! * **near sets** — for each train embedding, the test embeddings within
//!   Γ, with audit statistics for how well they cover the test set;
//! * **a three-term decomposition** of the train/test weighted-risk gap
//!   driven by class-center geometry and the neighbor-derived sample
//!   weights.
//!
//! The decomposition's terms are antisymmetric under swapping the two
//! classes of a pair, so they are aggregated over unordered pairs
//! `c < c′` (the ordered sum cancels identically).

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Dataset, GraphInstance, Split};
use crate::model::{self, ModelState};
use crate::nnr::{self, NnrConfig, NnrMode};

/// Margins at which [`compute_bound_report`] evaluates the margin loss.
pub const DEFAULT_MARGIN_GRID: [f64; 5] = [0.0, 0.1, 0.5, 1.0, 2.0];

/// Largest gap between a test embedding and its nearest train embedding:
/// `max_j min_i ‖g_i − g_j‖₂`.
pub fn coverage_radius(train: &[Vec<f64>], test: &[Vec<f64>]) -> Result<f64> {
    if train.is_empty() || test.is_empty() {
        return Err(Error::InvalidInput(
            "coverage radius needs nonempty train and test embedding sets".into(),
        ));
    }
    let max_min_sq = test
        .par_iter()
        .map(|t| {
            train
                .iter()
                .map(|s| squared_distance(s, t))
                .fold(f64::INFINITY, f64::min)
        })
        .reduce(|| f64::NEG_INFINITY, f64::max);
    Ok(max_min_sq.sqrt())
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x - y;
            d * d
        })
        .sum()
}

/// Fraction of instances whose true-class logit does not beat every other
/// logit by more than `gamma`: the indicator
/// `h(g)[y] ≤ γ + max_{c≠y} h(g)[c]` averaged over the instances.
pub fn margin_loss(model: &ModelState, instances: &[&GraphInstance], gamma: f64) -> Result<f64> {
    if gamma < 0.0 {
        return Err(Error::InvalidInput(format!("margin γ = {gamma} must be ≥ 0")));
    }
    if instances.is_empty() {
        return Err(Error::InvalidInput("margin loss over an empty set".into()));
    }
    if model.num_classes() < 2 {
        return Ok(0.0); // no competing class can violate the margin
    }
    let mut violations = 0usize;
    for g in instances {
        let logits = model::forward(model, g)?;
        let own = logits[g.label];
        let best_other = logits
            .iter()
            .enumerate()
            .filter(|&(c, _)| c != g.label)
            .map(|(_, &v)| v)
            .fold(f64::NEG_INFINITY, f64::max);
        if own <= gamma + best_other {
            violations += 1;
        }
    }
    Ok(violations as f64 / instances.len() as f64)
}

/// Per-train-embedding neighbor lists over the test set, plus coverage
/// statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct NearSets {
    /// `sets[i]` lists the test indices within the radius of train
    /// embedding `i`.
    pub sets: Vec<Vec<usize>>,
    pub stats: NearSetStats,
}

/// Audit statistics for the near sets: how large they are and how well
/// they jointly cover the test embeddings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NearSetStats {
    pub min_size: usize,
    pub max_size: usize,
    pub mean_size: f64,
    /// Fraction of train embeddings whose near set is empty.
    pub empty_fraction: f64,
    /// Fraction of test embeddings that appear in at least one near set.
    pub test_coverage_fraction: f64,
    /// Average number of near sets each test embedding belongs to.
    pub mean_test_multiplicity: f64,
}

/// For each train embedding `i`, the test indices `j` with
/// `‖g_i − g_j‖₂ ≤ radius`.
pub fn near_sets(train: &[Vec<f64>], test: &[Vec<f64>], radius: f64) -> Result<NearSets> {
    if radius < 0.0 {
        return Err(Error::InvalidInput(format!("near-set radius {radius} must be ≥ 0")));
    }
    let r_sq = radius * radius;
    let sets: Vec<Vec<usize>> = train
        .par_iter()
        .map(|g| {
            test.iter()
                .enumerate()
                .filter(|(_, t)| squared_distance(g, t) <= r_sq)
                .map(|(j, _)| j)
                .collect()
        })
        .collect();

    let sizes: Vec<usize> = sets.iter().map(Vec::len).collect();
    let n_train = train.len().max(1);
    let mut covered = vec![false; test.len()];
    for set in &sets {
        for &j in set {
            covered[j] = true;
        }
    }
    let total: usize = sizes.iter().sum();
    let stats = NearSetStats {
        min_size: sizes.iter().copied().min().unwrap_or(0),
        max_size: sizes.iter().copied().max().unwrap_or(0),
        mean_size: total as f64 / n_train as f64,
        empty_fraction: sizes.iter().filter(|&&s| s == 0).count() as f64 / n_train as f64,
        test_coverage_fraction: if test.is_empty() {
            0.0
        } else {
            covered.iter().filter(|&&c| c).count() as f64 / test.len() as f64
        },
        mean_test_multiplicity: if test.is_empty() {
            0.0
        } else {
            total as f64 / test.len() as f64
        },
    };
    Ok(NearSets { sets, stats })
}

/// Per-class embedding means for one split; `None` marks a class with no
/// samples there.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitClassMeans {
    pub means: Vec<Option<Vec<f64>>>,
}

impl SplitClassMeans {
    pub fn compute(embeddings: &[Vec<f64>], labels: &[usize], num_classes: usize) -> Result<Self> {
        if embeddings.len() != labels.len() {
            return Err(Error::Shape(format!(
                "{} embeddings vs {} labels",
                embeddings.len(),
                labels.len()
            )));
        }
        let dim = embeddings.first().map_or(0, Vec::len);
        let mut sums = vec![vec![0.0; dim]; num_classes];
        let mut counts = vec![0usize; num_classes];
        for (e, &y) in embeddings.iter().zip(labels) {
            if y >= num_classes {
                return Err(Error::InvalidInput(format!("label {y} outside 0..{num_classes}")));
            }
            for (s, &x) in sums[y].iter_mut().zip(e) {
                *s += x;
            }
            counts[y] += 1;
        }
        let means = sums
            .into_iter()
            .zip(&counts)
            .map(|(s, &c)| {
                if c == 0 {
                    None
                } else {
                    Some(s.into_iter().map(|x| x / c as f64).collect())
                }
            })
            .collect();
        Ok(Self { means })
    }
}

/// Pooled per-coordinate standard deviation of the embeddings around their
/// class means: `sqrt(Σ_i ‖g_i − μ_{y_i}‖² / (N·d))`.
pub fn pooled_sigma(
    embeddings: &[Vec<f64>],
    labels: &[usize],
    means: &SplitClassMeans,
) -> Result<f64> {
    if embeddings.is_empty() {
        return Err(Error::InvalidInput("σ estimate over an empty set".into()));
    }
    let dim = embeddings[0].len();
    let mut total = 0.0;
    for (e, &y) in embeddings.iter().zip(labels) {
        let mu = means.means[y]
            .as_ref()
            .ok_or_else(|| Error::InvalidInput(format!("no mean for class {y}")))?;
        total += squared_distance(e, mu);
    }
    Ok((total / (embeddings.len() * dim) as f64).sqrt())
}

/// One unordered class pair's contribution to the decomposition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairTerms {
    pub class_low: usize,
    pub class_high: usize,
    pub term1: f64,
    pub term2: f64,
    pub term3: f64,
}

/// The aggregated decomposition with its per-pair table and the pairs
/// skipped because a class was missing from one of the splits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundTerms {
    pub term1: f64,
    pub term2: f64,
    pub term3: f64,
    pub per_pair: Vec<PairTerms>,
    pub skipped_pairs: Vec<(usize, usize)>,
}

/// Averages, over train samples `i`, test samples `j`, and unordered class
/// pairs `c < c′` present in both splits:
///
/// ```text
/// Term₁ = (1/σ²)·(w_j·g_j − w_i·g_i)·(μ_{c′} − μ_c)
/// Term₂ = (1/2σ²)·(w_j²·f(μ^{test}) − w_i²·f(μ^{train})),  f(μ) = ‖μ_c‖² − ‖μ_{c′}‖²
/// Term₃ = (1/2σ²)·(w_j² − w_i²)·(‖μ_c‖² − ‖μ_{c′}‖²)
/// ```
///
/// Terms 1 and 3 read the class means from the train split. Each term is a
/// product of a sample factor and a pair factor, so the (i, j) average is
/// taken through the factored moments.
pub fn bound_terms(
    train_embeddings: &[Vec<f64>],
    test_embeddings: &[Vec<f64>],
    weights_train: &[f64],
    weights_test: &[f64],
    train_means: &SplitClassMeans,
    test_means: &SplitClassMeans,
    sigma: f64,
) -> Result<BoundTerms> {
    if !(sigma > 0.0) {
        return Err(Error::Domain(format!("σ = {sigma} must be > 0")));
    }
    if train_embeddings.len() != weights_train.len() || test_embeddings.len() != weights_test.len()
    {
        return Err(Error::Shape("embedding/weight length mismatch".into()));
    }
    if train_embeddings.is_empty() || test_embeddings.is_empty() {
        return Err(Error::InvalidInput(
            "decomposition needs nonempty train and test sets".into(),
        ));
    }
    if train_means.means.len() != test_means.means.len() {
        return Err(Error::Shape("class-mean tables disagree on class count".into()));
    }

    let dim = train_embeddings[0].len();
    let inv_var = 1.0 / (sigma * sigma);

    // Factored sample moments.
    let weighted_mean = |embs: &[Vec<f64>], w: &[f64]| -> Vec<f64> {
        let mut acc = vec![0.0; dim];
        for (e, &wi) in embs.iter().zip(w) {
            for (a, &x) in acc.iter_mut().zip(e) {
                *a += wi * x;
            }
        }
        let n = embs.len() as f64;
        acc.iter_mut().for_each(|a| *a /= n);
        acc
    };
    let mean_sq = |w: &[f64]| w.iter().map(|&x| x * x).sum::<f64>() / w.len() as f64;
    let a_train = weighted_mean(train_embeddings, weights_train);
    let b_test = weighted_mean(test_embeddings, weights_test);
    let s_train = mean_sq(weights_train);
    let s_test = mean_sq(weights_test);

    let norm_sq = |v: &[f64]| v.iter().map(|&x| x * x).sum::<f64>();
    let num_classes = train_means.means.len();
    let mut per_pair = Vec::new();
    let mut skipped = Vec::new();
    for c in 0..num_classes {
        for c2 in (c + 1)..num_classes {
            let (mu_tr_c, mu_tr_c2, mu_te_c, mu_te_c2) = match (
                &train_means.means[c],
                &train_means.means[c2],
                &test_means.means[c],
                &test_means.means[c2],
            ) {
                (Some(a), Some(b), Some(x), Some(y)) => (a, b, x, y),
                _ => {
                    skipped.push((c, c2));
                    continue;
                }
            };
            let center_gap: Vec<f64> = mu_tr_c2.iter().zip(mu_tr_c).map(|(&h, &l)| h - l).collect();
            let dot = |u: &[f64], v: &[f64]| u.iter().zip(v).map(|(&x, &y)| x * y).sum::<f64>();
            let term1 = inv_var * (dot(&b_test, &center_gap) - dot(&a_train, &center_gap));
            let f_train = norm_sq(mu_tr_c) - norm_sq(mu_tr_c2);
            let f_test = norm_sq(mu_te_c) - norm_sq(mu_te_c2);
            let term2 = 0.5 * inv_var * (s_test * f_test - s_train * f_train);
            let term3 = 0.5 * inv_var * (s_test - s_train) * f_train;
            per_pair.push(PairTerms {
                class_low: c,
                class_high: c2,
                term1,
                term2,
                term3,
            });
        }
    }

    let agg = |pick: fn(&PairTerms) -> f64| {
        if per_pair.is_empty() {
            0.0
        } else {
            per_pair.iter().map(pick).sum::<f64>() / per_pair.len() as f64
        }
    };
    Ok(BoundTerms {
        term1: agg(|p| p.term1),
        term2: agg(|p| p.term2),
        term3: agg(|p| p.term3),
        per_pair,
        skipped_pairs: skipped,
    })
}

/// Neighbor-fraction weights for query embeddings against a separate index
/// set: each query's weight is the fraction of index embeddings within
/// `radius` that share its label, or `fallback` when none are in range.
pub fn cross_index_weights(
    query_embeddings: &[Vec<f64>],
    query_labels: &[usize],
    index_embeddings: &[Vec<f64>],
    index_labels: &[usize],
    radius: f64,
    fallback: f64,
) -> Result<Vec<f64>> {
    if query_embeddings.len() != query_labels.len() {
        return Err(Error::Shape(format!(
            "{} query embeddings vs {} labels",
            query_embeddings.len(),
            query_labels.len()
        )));
    }
    if index_embeddings.len() != index_labels.len() {
        return Err(Error::Shape(format!(
            "{} index embeddings vs {} labels",
            index_embeddings.len(),
            index_labels.len()
        )));
    }
    if radius < 0.0 {
        return Err(Error::InvalidInput(format!("radius {radius} must be ≥ 0")));
    }
    let r_sq = radius * radius;
    Ok(query_embeddings
        .par_iter()
        .zip(query_labels.par_iter())
        .map(|(q, &y)| {
            let mut same = 0usize;
            let mut total = 0usize;
            for (e, &ly) in index_embeddings.iter().zip(index_labels) {
                if squared_distance(q, e) <= r_sq {
                    total += 1;
                    if ly == y {
                        same += 1;
                    }
                }
            }
            if total == 0 {
                fallback
            } else {
                same as f64 / total as f64
            }
        })
        .collect())
}

/// Margin loss at one margin value, on both splits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarginPoint {
    pub gamma: f64,
    pub train_loss: f64,
    pub test_loss: f64,
}

/// The full diagnostic report emitted by the `diagnose` command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    /// Coverage radius Γ in embedding space.
    pub gamma_emb: f64,
    /// Margin losses over [`DEFAULT_MARGIN_GRID`].
    pub margin_losses: Vec<MarginPoint>,
    pub term1: f64,
    pub term2: f64,
    pub term3: f64,
    pub per_pair_terms: Vec<PairTerms>,
    pub skipped_pairs: Vec<(usize, usize)>,
    /// Pooled within-class standard deviation used in the terms.
    pub sigma_est: f64,
    pub train_class_means: SplitClassMeans,
    pub test_class_means: SplitClassMeans,
    pub near_set_stats: NearSetStats,
    pub mean_train_weight: f64,
    pub mean_test_weight: f64,
}

/// Runs the whole diagnostic pipeline for a trained model on a dataset:
/// embeds the train and test splits, measures the coverage radius, margin
/// losses, near-set coverage, neighbor-fraction weights (train weights
/// from the train index, test weights from the same rule against the train
/// index, both at radius Γ), and the three-term decomposition.
pub fn compute_bound_report(model: &ModelState, dataset: &Dataset) -> Result<BoundReport> {
    let train = dataset.split(Split::Train);
    let test = dataset.split(Split::Test);
    if train.is_empty() || test.is_empty() {
        return Err(Error::InvalidInput(
            "diagnostics need nonempty train and test splits".into(),
        ));
    }
    let train_emb = nnr::compute_embeddings(model, &train)?;
    let test_emb = nnr::compute_embeddings(model, &test)?;
    let train_labels: Vec<usize> = train.iter().map(|g| g.label).collect();
    let test_labels: Vec<usize> = test.iter().map(|g| g.label).collect();

    let gamma_emb = coverage_radius(&train_emb, &test_emb)?;

    let margin_losses = DEFAULT_MARGIN_GRID
        .iter()
        .map(|&gamma| {
            Ok(MarginPoint {
                gamma,
                train_loss: margin_loss(model, &train, gamma)?,
                test_loss: margin_loss(model, &test, gamma)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let sets = near_sets(&train_emb, &test_emb, gamma_emb)?;

    let nnr_config = NnrConfig {
        gamma: gamma_emb,
        mode: NnrMode::NeighborFraction,
        refresh_every: 1,
        fallback_weight: 1.0,
    };
    let weights_train = nnr::nnr_weights(&train_emb, &train_labels, &nnr_config)?;
    let weights_test = cross_index_weights(
        &test_emb,
        &test_labels,
        &train_emb,
        &train_labels,
        gamma_emb,
        1.0,
    )?;

    let num_classes = dataset.header.num_classes;
    let train_means = SplitClassMeans::compute(&train_emb, &train_labels, num_classes)?;
    let test_means = SplitClassMeans::compute(&test_emb, &test_labels, num_classes)?;
    let sigma_est = pooled_sigma(&train_emb, &train_labels, &train_means)?;
    if !(sigma_est > 0.0) {
        return Err(Error::Domain(
            "degenerate embeddings: pooled within-class deviation is 0".into(),
        ));
    }
    let terms = bound_terms(
        &train_emb,
        &test_emb,
        weights_train.as_slice(),
        &weights_test,
        &train_means,
        &test_means,
        sigma_est,
    )?;

    let mean = |w: &[f64]| w.iter().sum::<f64>() / w.len() as f64;
    Ok(BoundReport {
        gamma_emb,
        margin_losses,
        term1: terms.term1,
        term2: terms.term2,
        term3: terms.term3,
        per_pair_terms: terms.per_pair,
        skipped_pairs: terms.skipped_pairs,
        sigma_est,
        train_class_means: train_means,
        test_class_means: test_means,
        near_set_stats: sets.stats,
        mean_train_weight: mean(weights_train.as_slice()),
        mean_test_weight: mean(&weights_test),
    })
}
