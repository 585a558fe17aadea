//! Neighbor-based per-sample noise reweighting.
//!
//! For each training sample, count its neighbors within Euclidean radius
//! `gamma` in readout-embedding space and weight the sample's loss by the
//! fraction of those neighbors sharing its label. Mislabeled samples sit in
//! a different class's feature cluster, so most of their neighbors disagree
//! with the stored label and the weight collapses toward zero; clean
//! samples keep weights near one.
//!
//! Two normalizations ship:
//!
//! - `neighbor_fraction` (default): `w_i = n_same / n_total` over the
//!   radius-`gamma` neighbor set — robust to class-size imbalance and
//!   bounded by construction;
//! - `class_normalized`: `w_i = n_same / (|class(y_i)| − 1)`, clamped to
//!   [0, 1] — the class-population reading, which discounts small classes.
//!
//! Samples with no neighbors inside the radius carry `fallback_weight`
//! (default 1.0): isolation is not evidence of mislabeling, and tiny
//! classes must not be suppressed by default.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::GraphInstance;
use crate::model::{self, ModelState};

/// Which denominator turns same-class neighbor counts into weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NnrMode {
    NeighborFraction,
    ClassNormalized,
}

/// Reweighting hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NnrConfig {
    /// Neighbor radius in embedding space; must be > 0.
    pub gamma: f64,
    pub mode: NnrMode,
    /// Epochs between weight recomputation (≥ 1); epoch 0 always refreshes.
    pub refresh_every: usize,
    /// Weight assigned to samples with zero neighbors, in [0, 1].
    pub fallback_weight: f64,
}

impl Default for NnrConfig {
    fn default() -> Self {
        Self {
            gamma: 2.0,
            mode: NnrMode::NeighborFraction,
            refresh_every: 5,
            fallback_weight: 1.0,
        }
    }
}

impl NnrConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0) || !self.gamma.is_finite() {
            return Err(Error::Config(format!(
                "nnr.gamma = {} must be a positive finite radius",
                self.gamma
            )));
        }
        if self.refresh_every == 0 {
            return Err(Error::Config("nnr.refresh_every must be ≥ 1".into()));
        }
        if !(0.0..=1.0).contains(&self.fallback_weight) {
            return Err(Error::Config(format!(
                "nnr.fallback_weight = {} outside [0, 1]",
                self.fallback_weight
            )));
        }
        Ok(())
    }
}

/// Per-sample weight vector; every entry lies in [0, 1].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NnrWeightVector(pub Vec<f64>);

impl NnrWeightVector {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Readout embeddings for a set of instances under the current model —
/// a pure evaluation pass, no parameter changes.
pub fn compute_embeddings(
    model: &ModelState,
    instances: &[&GraphInstance],
) -> Result<Vec<Vec<f64>>> {
    instances.iter().map(|g| model::embed(model, g)).collect()
}

/// Counts `(n_same, n_total)` over the radius-`gamma` neighbor set of
/// sample `i` (excluding `i` itself). Comparison uses squared distances so
/// no square roots are taken.
pub fn count_neighbors(
    i: usize,
    embeddings: &[Vec<f64>],
    labels: &[usize],
    gamma: f64,
) -> (usize, usize) {
    let gamma_sq = gamma * gamma;
    let own = &embeddings[i];
    let mut n_same = 0;
    let mut n_total = 0;
    for (j, other) in embeddings.iter().enumerate() {
        if j == i {
            continue;
        }
        let dist_sq: f64 = own
            .iter()
            .zip(other)
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        if dist_sq <= gamma_sq {
            n_total += 1;
            if labels[j] == labels[i] {
                n_same += 1;
            }
        }
    }
    (n_same, n_total)
}

/// Weight vector over all samples. The pairwise pass is parallelized over
/// samples with ordered collection, so results are independent of thread
/// count.
pub fn nnr_weights(
    embeddings: &[Vec<f64>],
    labels: &[usize],
    config: &NnrConfig,
) -> Result<NnrWeightVector> {
    config.validate()?;
    if embeddings.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} embeddings vs {} labels",
            embeddings.len(),
            labels.len()
        )));
    }
    let class_sizes = {
        let max_label = labels.iter().copied().max().unwrap_or(0);
        let mut sizes = vec![0usize; max_label + 1];
        for &y in labels {
            sizes[y] += 1;
        }
        sizes
    };
    let weights: Vec<f64> = (0..embeddings.len())
        .into_par_iter()
        .map(|i| {
            let (n_same, n_total) = count_neighbors(i, embeddings, labels, config.gamma);
            if n_total == 0 {
                return config.fallback_weight;
            }
            match config.mode {
                NnrMode::NeighborFraction => n_same as f64 / n_total as f64,
                NnrMode::ClassNormalized => {
                    let denom = class_sizes[labels[i]].saturating_sub(1);
                    if denom == 0 {
                        // Sole member of its class: the ratio is 0/0, and
                        // absence of same-class peers is not noise evidence.
                        config.fallback_weight
                    } else {
                        (n_same as f64 / denom as f64).clamp(0.0, 1.0)
                    }
                }
            }
        })
        .collect();
    Ok(NnrWeightVector(weights))
}

/// Elementwise product of raw losses and weights.
pub fn apply_weights(raw_losses: &[f64], weights: &NnrWeightVector) -> Result<Vec<f64>> {
    if raw_losses.len() != weights.len() {
        return Err(Error::Shape(format!(
            "{} losses vs {} weights",
            raw_losses.len(),
            weights.len()
        )));
    }
    Ok(raw_losses
        .iter()
        .zip(weights.as_slice())
        .map(|(&l, &w)| l * w)
        .collect())
}

/// Whether weights should be recomputed at the start of `epoch`.
/// Epoch 0 always refreshes, so weights exist before the first weighted
/// step.
pub fn refresh_schedule(epoch: usize, config: &NnrConfig) -> bool {
    epoch % config.refresh_every == 0
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Split;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn cfg(gamma: f64, mode: NnrMode) -> NnrConfig {
        NnrConfig {
            gamma,
            mode,
            ..NnrConfig::default()
        }
    }

    #[test]
    fn embeddings_match_per_sample_readout_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let model = ModelState::init(3, 4, 2, 3, &mut rng).unwrap();
        let graphs: Vec<GraphInstance> = (0..5)
            .map(|i| GraphInstance {
                id: i,
                split: Split::Train,
                env: 0,
                label: 0,
                noisy: false,
                nodes: (0..3)
                    .map(|_| (0..3).map(|_| rng.random_range(-1.0..1.0)).collect())
                    .collect(),
                edges: vec![(0, 1), (1, 2)],
            })
            .collect();
        let refs: Vec<&GraphInstance> = graphs.iter().collect();
        let embs = compute_embeddings(&model, &refs).unwrap();
        for (g, e) in refs.iter().zip(&embs) {
            assert_eq!(*e, model::embed(&model, g).unwrap());
        }
        // Identity-ish model: no layers → embeddings are mean node features.
        let flat = ModelState {
            layers: vec![],
            head: crate::model::LayerParams {
                weights: vec![vec![1.0, 0.0, 0.0]],
                bias: vec![0.0],
            },
        };
        let embs = compute_embeddings(&flat, &refs).unwrap();
        for (g, e) in refs.iter().zip(&embs) {
            assert_eq!(*e, model::readout(&g.nodes).unwrap());
        }
        // Deterministic: repeated calls identical.
        assert_eq!(embs, compute_embeddings(&flat, &refs).unwrap());
    }

    #[test]
    fn neighbor_counts_match_hand_enumeration() {
        // 1-D embeddings [0, 0.5, 2], labels [a, a, b], Γ = 1 from i = 0:
        // only j = 1 is inside, same class → (1, 1).
        let embs = vec![vec![0.0], vec![0.5], vec![2.0]];
        let labels = vec![0, 0, 1];
        assert_eq!(count_neighbors(0, &embs, &labels, 1.0), (1, 1));
        // Γ below the minimum pairwise distance isolates everything.
        assert_eq!(count_neighbors(0, &embs, &labels, 0.4), (0, 0));
        // All identical points, same class.
        let same = vec![vec![1.0, 1.0]; 4];
        let labels = vec![2, 2, 2, 2];
        for i in 0..4 {
            assert_eq!(count_neighbors(i, &same, &labels, 0.1), (3, 3));
        }
    }

    #[test]
    fn weights_follow_neighbor_fractions() {
        // One point with 5 neighbors at distance 1, of which 3 share its
        // class; query point at the origin in 2-D.
        let mut embs = vec![vec![0.0, 0.0]];
        let mut labels = vec![0];
        for k in 0..5 {
            let angle = k as f64;
            embs.push(vec![angle.cos(), angle.sin()]);
            labels.push(if k < 3 { 0 } else { 1 });
        }
        // Only sample 0's weight matters here; radius 1.001 (not exactly
        // 1.0, which floating-point unit-circle points may straddle)
        // catches all five.
        let w = nnr_weights(&embs, &labels, &cfg(1.001, NnrMode::NeighborFraction)).unwrap();
        assert!((w.as_slice()[0] - 0.6).abs() < 1e-12);

        // Every neighbor same class → weight 1.
        let same = vec![vec![0.0]; 3];
        let w = nnr_weights(&same, &[1, 1, 1], &cfg(0.5, NnrMode::NeighborFraction)).unwrap();
        assert_eq!(w.as_slice(), &[1.0, 1.0, 1.0]);

        // Isolated sample takes the fallback.
        let spread = vec![vec![0.0], vec![100.0], vec![200.0]];
        let w = nnr_weights(&spread, &[0, 0, 0], &cfg(1.0, NnrMode::NeighborFraction)).unwrap();
        assert_eq!(w.as_slice(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn class_normalized_mode_uses_class_population() {
        // Class 0 has 3 members, all mutually within radius; class 1 has 1.
        let embs = vec![vec![0.0], vec![0.1], vec![0.2], vec![0.15]];
        let labels = vec![0, 0, 0, 1];
        let w = nnr_weights(&embs, &labels, &cfg(0.5, NnrMode::ClassNormalized)).unwrap();
        // Each class-0 member sees 2 same of (class size 3 − 1) = 2 → 1.0.
        assert!((w.as_slice()[0] - 1.0).abs() < 1e-12);
        assert!((w.as_slice()[1] - 1.0).abs() < 1e-12);
        assert!((w.as_slice()[2] - 1.0).abs() < 1e-12);
        // Sole member of class 1: 0/0 ratio → fallback.
        assert_eq!(w.as_slice()[3], 1.0);

        // Same-class neighbors beyond the class population cap at 1.
        let w = nnr_weights(
            &embs,
            &[0, 0, 0, 0],
            &NnrConfig {
                gamma: 0.5,
                mode: NnrMode::ClassNormalized,
                refresh_every: 5,
                fallback_weight: 0.25,
            },
        )
        .unwrap();
        assert!(w.as_slice().iter().all(|&x| (0.0..=1.0).contains(&x)));
    }

    #[test]
    fn weights_always_in_unit_interval_and_permutation_consistent() {
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        for _ in 0..20 {
            let n = rng.random_range(2..30);
            let embs: Vec<Vec<f64>> = (0..n)
                .map(|_| (0..3).map(|_| rng.random_range(-2.0..2.0)).collect())
                .collect();
            let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..3)).collect();
            for mode in [NnrMode::NeighborFraction, NnrMode::ClassNormalized] {
                let w = nnr_weights(&embs, &labels, &cfg(1.0, mode)).unwrap();
                assert!(w.as_slice().iter().all(|&x| (0.0..=1.0).contains(&x)));

                // Permuting samples permutes weights identically.
                let mut perm: Vec<usize> = (0..n).collect();
                perm.shuffle(&mut rng);
                let p_embs: Vec<Vec<f64>> = perm.iter().map(|&i| embs[i].clone()).collect();
                let p_labels: Vec<usize> = perm.iter().map(|&i| labels[i]).collect();
                let pw = nnr_weights(&p_embs, &p_labels, &cfg(1.0, mode)).unwrap();
                for (new_idx, &old_idx) in perm.iter().enumerate() {
                    assert!((pw.as_slice()[new_idx] - w.as_slice()[old_idx]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn weights_invariant_under_joint_scaling() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let n = 20;
        let embs: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..4).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..2)).collect();
        let base = nnr_weights(&embs, &labels, &cfg(0.8, NnrMode::NeighborFraction)).unwrap();
        let scaled_embs: Vec<Vec<f64>> = embs
            .iter()
            .map(|e| e.iter().map(|x| x * 7.5).collect())
            .collect();
        let scaled =
            nnr_weights(&scaled_embs, &labels, &cfg(0.8 * 7.5, NnrMode::NeighborFraction))
                .unwrap();
        for (a, b) in base.as_slice().iter().zip(scaled.as_slice()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn apply_weights_is_elementwise_product() {
        let w = NnrWeightVector(vec![1.0, 0.0, 0.5]);
        let out = apply_weights(&[3.0, 9.0, 2.0], &w).unwrap();
        assert_eq!(out, vec![3.0, 0.0, 1.0]);
        assert!(apply_weights(&[1.0], &w).is_err());
    }

    #[test]
    fn refresh_schedule_fires_on_multiples() {
        let c = NnrConfig {
            refresh_every: 5,
            ..NnrConfig::default()
        };
        assert!(refresh_schedule(0, &c));
        assert!(refresh_schedule(5, &c));
        assert!(!refresh_schedule(7, &c));
        let every = NnrConfig {
            refresh_every: 1,
            ..NnrConfig::default()
        };
        for epoch in 0..4 {
            assert!(refresh_schedule(epoch, &every));
        }
    }

    #[test]
    fn config_validation_rejects_bad_values() {
        assert!(cfg(0.0, NnrMode::NeighborFraction).validate().is_err());
        assert!(cfg(-1.0, NnrMode::NeighborFraction).validate().is_err());
        let mut c = NnrConfig::default();
        c.refresh_every = 0;
        assert!(c.validate().is_err());
        let mut c = NnrConfig::default();
        c.fallback_weight = 1.5;
        assert!(c.validate().is_err());
    }
}
