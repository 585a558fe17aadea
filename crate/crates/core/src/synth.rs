//! Synthetic out-of-distribution benchmark generator.
//!
//! Every instance is a random (Erdős–Rényi) graph whose node features
//! concatenate two Gaussian blocks:
//!
//! - an **invariant** block drawn from `N(μ_c, σ²·I)` for the instance's
//!   generating class `c` — this block carries the label signal in every
//!   environment;
//! - a **spurious** block drawn from `N(μ_c'^e, σ²·I)` where `e` is the
//!   instance's environment. With probability `beta` the spurious mean
//!   matches the generating class (`c' = c`); otherwise `c'` is a uniformly
//!   random *other* class. Each environment assigns its own class→mean map,
//!   so spurious directions that predict labels in the training
//!   environments mislead in the held-out test environment.
//!
//! Two corruption knobs: `alpha` redraws the stored label uniformly over
//! all classes (train split only; `noisy` flags actual changes), and `beta`
//! controls the spurious correlation strength. Features are always drawn
//! from the pre-noise class, so a noisy instance looks like its generating
//! class but is labeled otherwise.
//!
//! Topology carries no label signal: the edge distribution is identical
//! across classes.
//!
//! Determinism: one master ChaCha stream derives class/environment means;
//! each instance draws from its own stream indexed by global position, so
//! generation is reproducible (and parallelizable) per seed.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Dataset, DatasetHeader, GraphInstance, Split};

/// How class (and per-environment spurious) mean vectors are laid out.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MeanMode {
    /// `μ_c = spacing · e_c` on distinct coordinate axes.
    AxisAligned,
    /// `μ_c = spacing · u_c` for a random orthonormal set `{u_c}`.
    RandomRotation,
}

/// Generator configuration. Defaults mirror the benchmark's full-scale
/// shape: 6 classes with a 10:1 minority imbalance on class 2 (0-based),
/// two training environments plus one held-out test environment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub num_classes: usize,
    /// Training instances per class.
    pub train_counts: Vec<usize>,
    /// Validation instances per class (drawn from the training environments).
    pub val_count: usize,
    /// Test instances per class (drawn from the held-out environment).
    pub test_count: usize,
    pub d_inv: usize,
    pub d_spu: usize,
    /// Gaussian standard deviation for both feature blocks. Zero is allowed
    /// as the degenerate limit (features equal their means exactly).
    pub sigma: f64,
    /// Label-noise ratio in [0, 1].
    pub alpha: f64,
    /// Spurious-correlation strength in [0, 1].
    pub beta: f64,
    pub num_train_envs: usize,
    /// Minimum pairwise distance between class means (axis-aligned and
    /// orthonormal constructions give exactly `spacing·√2`).
    pub mean_spacing: f64,
    pub mean_mode: MeanMode,
    pub nodes_min: usize,
    pub nodes_max: usize,
    pub edge_prob: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_classes: 6,
            train_counts: vec![3000, 3000, 300, 3000, 3000, 3000],
            val_count: 1000,
            test_count: 1000,
            d_inv: 8,
            d_spu: 8,
            sigma: 1.0,
            alpha: 0.0,
            beta: 0.9,
            num_train_envs: 2,
            mean_spacing: 1.1,
            mean_mode: MeanMode::AxisAligned,
            nodes_min: 6,
            nodes_max: 12,
            edge_prob: 0.3,
            seed: 7,
        }
    }
}

impl SynthConfig {
    /// Reduced-size variant for fast experiment runs: the same 10:1
    /// imbalance at a tenth of the training mass, smaller eval splits.
    pub fn desk_scale() -> Self {
        Self {
            train_counts: vec![300, 300, 30, 300, 300, 300],
            val_count: 150,
            test_count: 500,
            sigma: 0.9,
            mean_spacing: 1.4,
            num_train_envs: 4,
            ..Self::default()
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.d_inv + self.d_spu
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 {
            return Err(Error::Config("num_classes must be ≥ 1".into()));
        }
        if self.train_counts.len() != self.num_classes {
            return Err(Error::Config(format!(
                "train_counts has {} entries for {} classes",
                self.train_counts.len(),
                self.num_classes
            )));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("alpha = {} outside [0, 1]", self.alpha)));
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(Error::Config(format!("beta = {} outside [0, 1]", self.beta)));
        }
        if !(0.0..=1.0).contains(&self.edge_prob) {
            return Err(Error::Config(format!(
                "edge_prob = {} outside [0, 1]",
                self.edge_prob
            )));
        }
        if self.sigma < 0.0 || !self.sigma.is_finite() {
            return Err(Error::Config(format!("sigma = {} must be ≥ 0", self.sigma)));
        }
        if self.mean_spacing <= 0.0 {
            return Err(Error::Config(format!(
                "mean_spacing = {} must be > 0",
                self.mean_spacing
            )));
        }
        if self.nodes_min == 0 || self.nodes_min > self.nodes_max {
            return Err(Error::Config(format!(
                "node count range [{}, {}] is invalid",
                self.nodes_min, self.nodes_max
            )));
        }
        if self.num_train_envs == 0 {
            return Err(Error::Config("num_train_envs must be ≥ 1".into()));
        }
        if self.d_inv < self.num_classes || self.d_spu < self.num_classes {
            return Err(Error::Config(format!(
                "mean construction needs d_inv ≥ C and d_spu ≥ C \
                 (got d_inv = {}, d_spu = {}, C = {})",
                self.d_inv, self.d_spu, self.num_classes
            )));
        }
        if self.mean_mode == MeanMode::AxisAligned {
            // Each environment needs its own injective class→axis
            // assignment; there are d_spu·(d_spu−1)···(d_spu−C+1) of them.
            let envs = (self.num_train_envs + 1) as u128;
            let mut pool: u128 = 1;
            for i in 0..self.num_classes as u128 {
                pool = pool.saturating_mul(self.d_spu as u128 - i);
                if pool >= envs {
                    break;
                }
            }
            if pool < envs {
                return Err(Error::Config(format!(
                    "axis-aligned spurious means admit only {pool} distinct \
                     class→axis assignments (d_spu = {}, C = {}), fewer than \
                     the {envs} environments; raise d_spu",
                    self.d_spu, self.num_classes
                )));
            }
        }
        Ok(())
    }

    /// Environment id of the held-out test environment.
    pub fn test_env(&self) -> usize {
        self.num_train_envs
    }
}

/// Resolved mean vectors: one invariant mean per class, plus per-environment
/// spurious means (`spurious[env][class]`), including the test environment.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthMeans {
    pub class_means: Vec<Vec<f64>>,
    pub spurious: Vec<Vec<Vec<f64>>>,
}

/// Draws `count` mean vectors of dimension `d` with pairwise distances
/// ≥ `spacing`.
///
/// Axis-aligned mode places `spacing·e_c` on the first `count` axes;
/// random-rotation mode scales a random orthonormal set built by
/// Gram-Schmidt. Both give exact pairwise distance `spacing·√2` and both
/// require `d ≥ count`.
pub fn gen_class_means(
    count: usize,
    d: usize,
    spacing: f64,
    mode: MeanMode,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Vec<f64>>> {
    if d < count {
        return Err(Error::Config(format!(
            "cannot place {count} means with spacing {spacing} in dimension {d}: need d ≥ {count}"
        )));
    }
    if spacing <= 0.0 {
        return Err(Error::Config(format!("spacing = {spacing} must be > 0")));
    }
    let means = match mode {
        MeanMode::AxisAligned => (0..count)
            .map(|c| {
                let mut v = vec![0.0; d];
                v[c] = spacing;
                v
            })
            .collect::<Vec<_>>(),
        MeanMode::RandomRotation => {
            let mut basis: Vec<Vec<f64>> = Vec::with_capacity(count);
            while basis.len() < count {
                let mut v: Vec<f64> =
                    (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
                for u in &basis {
                    let dot: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
                    for (vi, ui) in v.iter_mut().zip(u) {
                        *vi -= dot * ui;
                    }
                }
                let norm: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                if norm < 1e-6 {
                    continue; // degenerate draw: retry
                }
                for vi in &mut v {
                    *vi /= norm;
                }
                basis.push(v);
            }
            basis
                .into_iter()
                .map(|u| u.into_iter().map(|x| x * spacing).collect())
                .collect()
        }
    };
    // Postcondition check: pairwise separation.
    for i in 0..means.len() {
        for j in (i + 1)..means.len() {
            let dist: f64 = means[i]
                .iter()
                .zip(&means[j])
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            if dist < spacing {
                return Err(Error::Config(format!(
                    "mean construction produced pairwise distance {dist} < spacing {spacing}"
                )));
            }
        }
    }
    Ok(means)
}

fn resolve_means(config: &SynthConfig, rng: &mut ChaCha8Rng) -> Result<SynthMeans> {
    let class_means = gen_class_means(
        config.num_classes,
        config.d_inv,
        config.mean_spacing,
        config.mean_mode,
        rng,
    )?;
    let num_envs = config.num_train_envs + 1;
    let mut spurious = Vec::with_capacity(num_envs);
    for _ in 0..num_envs {
        match config.mean_mode {
            MeanMode::AxisAligned => {
                // Injective class→axis assignment over all d_spu axes,
                // distinct per environment, so the spurious geometry
                // shifts across environments. Feasibility (enough
                // assignments for the environment count) is checked by
                // `SynthConfig::validate`.
                let mut tries = 0u32;
                loop {
                    let mut axes: Vec<usize> = (0..config.d_spu).collect();
                    axes.shuffle(rng);
                    let candidate: Vec<Vec<f64>> = axes[..config.num_classes]
                        .iter()
                        .map(|&a| {
                            let mut v = vec![0.0; config.d_spu];
                            v[a] = config.mean_spacing;
                            v
                        })
                        .collect();
                    if !spurious.contains(&candidate) {
                        spurious.push(candidate);
                        break;
                    }
                    tries += 1;
                    if tries > 100_000 {
                        return Err(Error::Config(
                            "could not draw a fresh spurious-axis assignment".into(),
                        ));
                    }
                }
            }
            MeanMode::RandomRotation => {
                spurious.push(gen_class_means(
                    config.num_classes,
                    config.d_spu,
                    config.mean_spacing,
                    MeanMode::RandomRotation,
                    rng,
                )?);
            }
        }
    }
    Ok(SynthMeans {
        class_means,
        spurious,
    })
}

/// Draws one instance of generating class `c` in environment `env`.
///
/// Draw order (fixed for reproducibility): node count, edge coin flips,
/// spurious-class choice, node features (invariant block then spurious
/// block per node), then the label-noise redraw when `noisy_split` is set.
#[allow(clippy::too_many_arguments)]
fn sample_instance(
    id: u64,
    split: Split,
    c: usize,
    env: usize,
    config: &SynthConfig,
    means: &SynthMeans,
    noisy_split: bool,
    rng: &mut ChaCha8Rng,
) -> GraphInstance {
    let n = rng.random_range(config.nodes_min..=config.nodes_max);
    let mut edges = Vec::new();
    for u in 0..n {
        for v in (u + 1)..n {
            if rng.random::<f64>() < config.edge_prob {
                edges.push((u, v));
            }
        }
    }

    let spurious_class = if rng.random::<f64>() < config.beta {
        c
    } else {
        // Uniform over the other C−1 classes.
        let draw = rng.random_range(0..config.num_classes - 1);
        if draw >= c {
            draw + 1
        } else {
            draw
        }
    };

    let mu_inv = &means.class_means[c];
    let mu_spu = &means.spurious[env][spurious_class];
    let mut nodes = Vec::with_capacity(n);
    for _ in 0..n {
        let mut row = Vec::with_capacity(config.d_inv + config.d_spu);
        for d in 0..config.d_inv {
            let z: f64 = rng.sample(StandardNormal);
            row.push(mu_inv[d] + config.sigma * z);
        }
        for d in 0..config.d_spu {
            let z: f64 = rng.sample(StandardNormal);
            row.push(mu_spu[d] + config.sigma * z);
        }
        nodes.push(row);
    }

    let (label, noisy) = if noisy_split && rng.random::<f64>() < config.alpha {
        let redrawn = rng.random_range(0..config.num_classes);
        (redrawn, redrawn != c)
    } else {
        (c, false)
    };

    GraphInstance {
        id,
        split,
        env,
        label,
        noisy,
        nodes,
        edges,
    }
}

/// Generates the full dataset: exact per-class counts, train and val drawn
/// from the training environments (round-robin for exact balance), test
/// drawn from the held-out environment. Label noise applies to the train
/// split only; val and test labels are clean so evaluation measures true
/// accuracy.
pub fn generate_dataset(config: &SynthConfig) -> Result<Dataset> {
    config.validate()?;
    let mut master = ChaCha8Rng::seed_from_u64(config.seed);
    // Stream 0 is reserved for means; instances use streams 1..
    master.set_stream(0);
    let means = resolve_means(config, &mut master)?;

    let mut instances = Vec::new();
    let mut index: u64 = 0;
    let push = |split: Split, c: usize, j: usize, count_idx: &mut u64| {
        let env = match split {
            Split::Test => config.test_env(),
            _ => j % config.num_train_envs,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(1 + *count_idx);
        let instance = sample_instance(
            *count_idx,
            split,
            c,
            env,
            config,
            &means,
            split == Split::Train,
            &mut rng,
        );
        *count_idx += 1;
        instance
    };

    for c in 0..config.num_classes {
        for j in 0..config.train_counts[c] {
            instances.push(push(Split::Train, c, j, &mut index));
        }
    }
    for c in 0..config.num_classes {
        for j in 0..config.val_count {
            instances.push(push(Split::Val, c, j, &mut index));
        }
    }
    for c in 0..config.num_classes {
        for j in 0..config.test_count {
            instances.push(push(Split::Test, c, j, &mut index));
        }
    }

    Ok(Dataset {
        header: DatasetHeader {
            num_classes: config.num_classes,
            feature_dim: config.feature_dim(),
            train_envs: (0..config.num_train_envs).collect(),
            test_envs: vec![config.test_env()],
        },
        instances,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config() -> SynthConfig {
        SynthConfig {
            train_counts: vec![20, 20, 5, 20, 20, 20],
            val_count: 10,
            test_count: 10,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn axis_aligned_means_match_scaled_one_hot() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let means = gen_class_means(2, 2, 2.0, MeanMode::AxisAligned, &mut rng).unwrap();
        assert_eq!(means, vec![vec![2.0, 0.0], vec![0.0, 2.0]]);
    }

    #[test]
    fn mean_spacing_holds_for_all_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for mode in [MeanMode::AxisAligned, MeanMode::RandomRotation] {
            let means = gen_class_means(6, 8, 1.5, mode, &mut rng).unwrap();
            assert_eq!(means.len(), 6);
            let mut pairs = 0;
            for i in 0..6 {
                for j in (i + 1)..6 {
                    let dist: f64 = means[i]
                        .iter()
                        .zip(&means[j])
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum::<f64>()
                        .sqrt();
                    assert!(dist >= 1.5, "{mode:?}: pair ({i},{j}) at distance {dist}");
                    pairs += 1;
                }
            }
            assert_eq!(pairs, 15);
        }
    }

    #[test]
    fn infeasible_dimension_is_a_config_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert!(gen_class_means(6, 4, 1.0, MeanMode::AxisAligned, &mut rng).is_err());
        assert!(gen_class_means(6, 4, 1.0, MeanMode::RandomRotation, &mut rng).is_err());
    }

    #[test]
    fn default_config_counts_match_full_scale() {
        let cfg = SynthConfig::default();
        cfg.validate().unwrap();
        let train_total: usize = cfg.train_counts.iter().sum();
        assert_eq!(train_total, 15_300);
        assert_eq!(cfg.val_count * cfg.num_classes, 6_000);
        assert_eq!(cfg.test_count * cfg.num_classes, 6_000);
    }

    #[test]
    fn generated_counts_are_exact_and_splits_disjoint() {
        let cfg = small_config();
        let ds = generate_dataset(&cfg).unwrap();
        for c in 0..6 {
            assert_eq!(ds.class_counts(Split::Val)[c], 10);
            assert_eq!(ds.class_counts(Split::Test)[c], 10);
        }
        // Train counts are exact per generating class; label noise is off
        // by default so stored labels equal generating classes.
        assert_eq!(ds.class_counts(Split::Train), vec![20, 20, 5, 20, 20, 20]);
        let mut ids: Vec<u64> = ds.instances.iter().map(|g| g.id).collect();
        let before = ids.len();
        ids.sort_unstable();
        ids.dedup();
        assert_eq!(ids.len(), before, "instance ids are unique across splits");
        assert_eq!(ds.minority_class(), 2);

        // Environment partition: test uses only the held-out environment.
        for g in &ds.instances {
            match g.split {
                Split::Test => assert_eq!(g.env, cfg.test_env()),
                _ => assert!(g.env < cfg.num_train_envs),
            }
        }
    }

    #[test]
    fn zero_count_class_is_absent_others_unaffected() {
        let mut cfg = small_config();
        cfg.train_counts[4] = 0;
        let ds = generate_dataset(&cfg).unwrap();
        assert_eq!(ds.class_counts(Split::Train), vec![20, 20, 5, 20, 0, 20]);
    }

    #[test]
    fn alpha_zero_means_no_noisy_flags() {
        let ds = generate_dataset(&small_config()).unwrap();
        assert!(ds.instances.iter().all(|g| !g.noisy));
    }

    #[test]
    fn degenerate_sigma_pins_features_to_means() {
        let cfg = SynthConfig {
            sigma: 0.0,
            beta: 1.0,
            train_counts: vec![3, 3, 3, 3, 3, 3],
            val_count: 2,
            test_count: 2,
            ..SynthConfig::default()
        };
        let mut master = ChaCha8Rng::seed_from_u64(cfg.seed);
        master.set_stream(0);
        let means = resolve_means(&cfg, &mut master).unwrap();
        let ds = generate_dataset(&cfg).unwrap();
        for g in &ds.instances {
            // With α = 0 the stored label is the generating class.
            let expect_inv = &means.class_means[g.label];
            let expect_spu = &means.spurious[g.env][g.label];
            for row in &g.nodes {
                assert_eq!(&row[..cfg.d_inv], expect_inv.as_slice());
                assert_eq!(&row[cfg.d_inv..], expect_spu.as_slice());
            }
        }
    }

    #[test]
    fn features_follow_pre_noise_class_even_when_label_flips() {
        // σ = 0 and heavy noise: every feature row must still equal some
        // class mean pair exactly, and noisy instances must mismatch their
        // stored label's mean.
        let cfg = SynthConfig {
            sigma: 0.0,
            beta: 1.0,
            alpha: 0.5,
            train_counts: vec![30, 30, 30, 30, 30, 30],
            val_count: 1,
            test_count: 1,
            ..SynthConfig::default()
        };
        let mut master = ChaCha8Rng::seed_from_u64(cfg.seed);
        master.set_stream(0);
        let means = resolve_means(&cfg, &mut master).unwrap();
        let ds = generate_dataset(&cfg).unwrap();
        let mut saw_noisy = false;
        for g in ds.instances.iter().filter(|g| g.split == Split::Train) {
            let row = &g.nodes[0];
            let generating = (0..cfg.num_classes)
                .find(|&c| means.class_means[c].as_slice() == &row[..cfg.d_inv])
                .expect("row matches a generating class exactly at σ = 0");
            assert_eq!(g.noisy, generating != g.label);
            saw_noisy |= g.noisy;
        }
        assert!(saw_noisy, "α = 0.5 over 180 draws must flip something");
    }

    #[test]
    fn noisy_rate_matches_binomial_oracle() {
        let cfg = SynthConfig {
            alpha: 0.2,
            train_counts: vec![1667, 1667, 1667, 1667, 1666, 1666],
            val_count: 0,
            test_count: 0,
            nodes_min: 1,
            nodes_max: 2,
            ..SynthConfig::default()
        };
        let ds = generate_dataset(&cfg).unwrap();
        let n = ds.instances.len() as f64;
        assert_eq!(n, 10_000.0);
        let noisy = ds.instances.iter().filter(|g| g.noisy).count() as f64;
        let p = 0.2 * (5.0 / 6.0);
        let se = (p * (1.0 - p) / n).sqrt();
        assert!(
            (noisy / n - p).abs() <= 3.0 * se,
            "rate {} vs {p} ± {}",
            noisy / n,
            3.0 * se
        );
    }

    #[test]
    fn clean_sample_means_converge_to_class_means() {
        let cfg = SynthConfig {
            train_counts: vec![60, 60, 60, 60, 60, 60],
            val_count: 0,
            test_count: 0,
            ..SynthConfig::default()
        };
        let mut master = ChaCha8Rng::seed_from_u64(cfg.seed);
        master.set_stream(0);
        let means = resolve_means(&cfg, &mut master).unwrap();
        let ds = generate_dataset(&cfg).unwrap();
        for c in 0..6 {
            let mut sum = vec![0.0; cfg.d_inv];
            let mut n_rows = 0usize;
            for g in ds
                .instances
                .iter()
                .filter(|g| g.label == c && !g.noisy)
            {
                for row in &g.nodes {
                    for (s, &x) in sum.iter_mut().zip(&row[..cfg.d_inv]) {
                        *s += x;
                    }
                    n_rows += 1;
                }
            }
            let tol = 4.0 * cfg.sigma / (n_rows as f64).sqrt();
            for (d, &mu) in means.class_means[c].iter().enumerate() {
                let sample_mean = sum[d] / n_rows as f64;
                assert!(
                    (sample_mean - mu).abs() <= tol,
                    "class {c} dim {d}: {sample_mean} vs {mu} ± {tol}"
                );
            }
        }
    }

    #[test]
    fn same_seed_gives_byte_identical_files() {
        let cfg = small_config();
        let a = generate_dataset(&cfg).unwrap();
        let b = generate_dataset(&cfg).unwrap();
        assert_eq!(a, b);
        let dir = tempfile::tempdir().unwrap();
        let pa = dir.path().join("a.jsonl");
        let pb = dir.path().join("b.jsonl");
        a.save_jsonl(&pa).unwrap();
        b.save_jsonl(&pb).unwrap();
        assert_eq!(std::fs::read(&pa).unwrap(), std::fs::read(&pb).unwrap());

        let mut cfg2 = cfg.clone();
        cfg2.seed = 8;
        let c = generate_dataset(&cfg2).unwrap();
        assert_ne!(a, c, "different seed must change the data");
    }

    #[test]
    fn spurious_assignments_differ_across_environments() {
        let cfg = SynthConfig::default();
        let mut master = ChaCha8Rng::seed_from_u64(cfg.seed);
        master.set_stream(0);
        let means = resolve_means(&cfg, &mut master).unwrap();
        assert_eq!(means.spurious.len(), 3);
        for e in 0..means.spurious.len() {
            for f in (e + 1)..means.spurious.len() {
                assert_ne!(
                    means.spurious[e], means.spurious[f],
                    "environments {e} and {f} share a spurious map"
                );
            }
        }
    }

    #[test]
    fn config_validation_rejects_bad_knobs() {
        let mut cfg = SynthConfig::default();
        cfg.alpha = 1.5;
        assert!(cfg.validate().is_err());
        let mut cfg = SynthConfig::default();
        cfg.train_counts.pop();
        assert!(cfg.validate().is_err());
        let mut cfg = SynthConfig::default();
        cfg.nodes_min = 0;
        assert!(cfg.validate().is_err());
        let mut cfg = SynthConfig::default();
        cfg.d_inv = 3;
        assert!(cfg.validate().is_err());
        // Two classes over two spurious axes admit only two distinct
        // class→axis maps — too few for three environments.
        let mut cfg = SynthConfig::default();
        cfg.num_classes = 2;
        cfg.train_counts = vec![10, 10];
        cfg.d_inv = 2;
        cfg.d_spu = 2;
        let err = cfg.validate().unwrap_err();
        assert!(err.to_string().contains("raise d_spu"), "{err}");
        cfg.d_spu = 3;
        assert!(cfg.validate().is_ok());
    }
}
