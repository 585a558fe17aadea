//! Per-batch weighting rules for the nine comparison methods.
//!
//! Every method reduces to either a per-sample weighting/selection over a
//! batch of losses or a per-group weighting over group mean losses; the
//! trainer turns each into per-sample gradient coefficients and reuses one
//! descent loop. All functions here are pure.
//!
//! | method       | rule                                                         |
//! |--------------|--------------------------------------------------------------|
//! | erm          | arithmetic mean of sample losses                             |
//! | cvar         | mean of the ⌈α·n⌉ largest sample losses                      |
//! | chisq        | weights ∝ (ℓ−η)₊ pushed to a χ² ball of radius ρ             |
//! | cvar_doro    | drop the ⌊ε·n⌋ largest losses, then cvar on the rest         |
//! | chisq_doro   | drop the ⌊ε·n⌋ largest losses, then chisq on the rest        |
//! | cvar_group   | cvar over per-group mean losses                              |
//! | group_dro    | exponentiated-gradient ascent on group weights               |
//! | gradient_dro | group weights ∝ per-group gradient norms                     |
//! | variant_dro  | mean of group losses + λ·population variance                 |

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// The comparison methods, named as they appear in configs and reports.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineMethod {
    Erm,
    Cvar,
    Chisq,
    CvarDoro,
    ChisqDoro,
    CvarGroup,
    GroupDro,
    GradientDro,
    VariantDro,
}

impl BaselineMethod {
    pub fn name(self) -> &'static str {
        match self {
            Self::Erm => "erm",
            Self::Cvar => "cvar",
            Self::Chisq => "chisq",
            Self::CvarDoro => "cvar_doro",
            Self::ChisqDoro => "chisq_doro",
            Self::CvarGroup => "cvar_group",
            Self::GroupDro => "group_dro",
            Self::GradientDro => "gradient_dro",
            Self::VariantDro => "variant_dro",
        }
    }
}

/// Hyperparameters shared by the baseline family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineSpec {
    pub method: BaselineMethod,
    /// CVaR tail fraction, in (0, 1].
    pub alpha_cvar: f64,
    /// DORO outlier fraction, in [0, 1).
    pub eps_doro: f64,
    /// χ² ball radius, > 0.
    pub rho_chisq: f64,
    /// Exponentiated-gradient step size for group weights, > 0.
    pub eta_group: f64,
    /// Variance penalty coefficient, ≥ 0.
    pub lambda_var: f64,
}

impl Default for BaselineSpec {
    fn default() -> Self {
        Self {
            method: BaselineMethod::Erm,
            alpha_cvar: 0.5,
            eps_doro: 0.1,
            rho_chisq: 1.0,
            eta_group: 0.1,
            lambda_var: 1.0,
        }
    }
}

impl BaselineSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha_cvar > 0.0 && self.alpha_cvar <= 1.0) {
            return Err(Error::Config(format!(
                "baseline.alpha_cvar = {} outside (0, 1]",
                self.alpha_cvar
            )));
        }
        if !(0.0..1.0).contains(&self.eps_doro) {
            return Err(Error::Config(format!(
                "baseline.eps_doro = {} outside [0, 1)",
                self.eps_doro
            )));
        }
        if !(self.rho_chisq > 0.0) {
            return Err(Error::Config(format!(
                "baseline.rho_chisq = {} must be > 0",
                self.rho_chisq
            )));
        }
        if !(self.eta_group > 0.0) {
            return Err(Error::Config(format!(
                "baseline.eta_group = {} must be > 0",
                self.eta_group
            )));
        }
        if self.lambda_var < 0.0 {
            return Err(Error::Config(format!(
                "baseline.lambda_var = {} must be ≥ 0",
                self.lambda_var
            )));
        }
        Ok(())
    }
}

/// Arithmetic mean; errors on an empty batch.
pub fn erm_batch_loss(losses: &[f64]) -> Result<f64> {
    if losses.is_empty() {
        return Err(Error::InvalidInput("erm over an empty batch".into()));
    }
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

/// Indices of the ⌈α·n⌉ largest losses, ascending. Ties break toward the
/// lower index so selection is deterministic.
pub fn cvar_indices(losses: &[f64], alpha: f64) -> Result<Vec<usize>> {
    if losses.is_empty() {
        return Err(Error::InvalidInput("cvar over an empty batch".into()));
    }
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::InvalidInput(format!("cvar alpha = {alpha} outside (0, 1]")));
    }
    let n = losses.len();
    let k = ((alpha * n as f64).ceil() as usize).clamp(1, n);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        losses[b]
            .partial_cmp(&losses[a])
            .expect("finite losses")
            .then(a.cmp(&b))
    });
    let mut selected = order[..k].to_vec();
    selected.sort_unstable();
    Ok(selected)
}

/// Mean of the ⌈α·n⌉ largest losses. The selected losses are summed in
/// ascending index order, so the value is bit-identical to a subset-mean
/// computed the same way.
pub fn cvar_loss(losses: &[f64], alpha: f64) -> Result<f64> {
    let selected = cvar_indices(losses, alpha)?;
    let sum: f64 = selected.iter().map(|&i| losses[i]).sum();
    Ok(sum / selected.len() as f64)
}

/// χ² divergence of a mean-1 weight vector from the uniform weighting:
/// `Σ (w_i − 1)² / n`.
fn chi_squared_to_uniform(weights: &[f64]) -> f64 {
    weights.iter().map(|&w| (w - 1.0) * (w - 1.0)).sum::<f64>() / weights.len() as f64
}

/// Nonnegative, mean-1 sample weights `w_i ∝ (ℓ_i − η)₊` with `η` chosen by
/// bisection so the weight vector sits on the χ² ball boundary
/// `Σ(w_i − 1)²/n = ρ`.
///
/// The χ² value is nondecreasing in η, running from 0 (η → −∞, uniform) up
/// to a finite supremum as η approaches the maximum loss (all weight on the
/// argmax set). When even that supremum cannot reach ρ — including the
/// degenerate all-equal-losses batch, whose supremum is 0 — the rule falls
/// back to uniform weights.
pub fn chisq_weights(losses: &[f64], rho: f64) -> Result<Vec<f64>> {
    if losses.is_empty() {
        return Err(Error::InvalidInput("chisq over an empty batch".into()));
    }
    if !(rho > 0.0) {
        return Err(Error::InvalidInput(format!("chisq rho = {rho} must be > 0")));
    }
    let n = losses.len();
    let max = losses.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min = losses.iter().cloned().fold(f64::INFINITY, f64::min);
    let span = max - min;
    if span == 0.0 {
        return Ok(vec![1.0; n]);
    }

    let weights_at = |eta: f64| -> Vec<f64> {
        let clipped: Vec<f64> = losses.iter().map(|&l| (l - eta).max(0.0)).collect();
        let mean = clipped.iter().sum::<f64>() / n as f64;
        clipped.into_iter().map(|v| v / mean).collect()
    };

    // Lower bracket: walk η down until the ball constraint is slack.
    let mut lo = min - span;
    while chi_squared_to_uniform(&weights_at(lo)) > rho {
        lo = min - 2.0 * (min - lo);
    }
    // Upper bracket: just below the max loss, χ² is as large as it gets.
    let hi = max - span * 1e-13;
    if chi_squared_to_uniform(&weights_at(hi)) < rho {
        return Ok(vec![1.0; n]); // radius unreachable → uniform fallback
    }
    let (mut lo, mut hi) = (lo, hi);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if chi_squared_to_uniform(&weights_at(mid)) <= rho {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(weights_at(lo))
}

/// Indices kept after removing the ⌊ε·n⌋ largest losses, ascending.
/// Ties at the cut drop the lowest index first.
pub fn doro_filter(losses: &[f64], eps: f64) -> Result<Vec<usize>> {
    if !(0.0..1.0).contains(&eps) {
        return Err(Error::InvalidInput(format!("doro eps = {eps} outside [0, 1)")));
    }
    let n = losses.len();
    let drop = (eps * n as f64).floor() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    // Highest loss first; among equal losses the lower index first, so it
    // is the one dropped.
    order.sort_by(|&a, &b| {
        losses[b]
            .partial_cmp(&losses[a])
            .expect("finite losses")
            .then(a.cmp(&b))
    });
    let mut kept = order[drop..].to_vec();
    kept.sort_unstable();
    Ok(kept)
}

/// Exponentiated-gradient ascent on group weights:
/// `q′_i ∝ q_i · exp(η_g · ℓ̄_i)`, renormalized. The exponent is shifted by
/// its maximum before exponentiation, which leaves the normalized result
/// unchanged and cannot overflow.
pub fn group_dro_update(q: &[f64], group_losses: &[f64], eta_group: f64) -> Result<Vec<f64>> {
    if q.len() != group_losses.len() {
        return Err(Error::Shape(format!(
            "{} weights vs {} group losses",
            q.len(),
            group_losses.len()
        )));
    }
    let shift = group_losses
        .iter()
        .cloned()
        .fold(f64::NEG_INFINITY, f64::max);
    let unnormalized: Vec<f64> = q
        .iter()
        .zip(group_losses)
        .map(|(&qi, &l)| qi * (eta_group * (l - shift)).exp())
        .collect();
    let z: f64 = unnormalized.iter().sum();
    if z <= 0.0 {
        return Err(Error::InvalidInput(
            "group_dro_update: all weights vanished".into(),
        ));
    }
    Ok(unnormalized.into_iter().map(|u| u / z).collect())
}

/// CVaR applied to the vector of per-group mean losses.
pub fn cvar_group_loss(group_losses: &[f64], alpha: f64) -> Result<f64> {
    cvar_loss(group_losses, alpha)
}

/// Group weights proportional to per-group gradient norms, uniform when
/// every norm is zero.
pub fn gradient_dro_weights(gradient_norms: &[f64]) -> Result<Vec<f64>> {
    if gradient_norms.is_empty() {
        return Err(Error::InvalidInput("gradient_dro over zero groups".into()));
    }
    if let Some(bad) = gradient_norms.iter().find(|&&g| g < 0.0 || !g.is_finite()) {
        return Err(Error::InvalidInput(format!(
            "gradient norm {bad} must be finite and ≥ 0"
        )));
    }
    let total: f64 = gradient_norms.iter().sum();
    if total == 0.0 {
        let m = gradient_norms.len() as f64;
        return Ok(vec![1.0 / m; gradient_norms.len()]);
    }
    Ok(gradient_norms.iter().map(|&g| g / total).collect())
}

/// Mean of group losses plus `λ_var` times their population variance.
pub fn variant_dro_loss(group_losses: &[f64], lambda_var: f64) -> Result<f64> {
    if group_losses.is_empty() {
        return Err(Error::InvalidInput("variant_dro over zero groups".into()));
    }
    if lambda_var < 0.0 {
        return Err(Error::InvalidInput(format!(
            "variant_dro lambda = {lambda_var} must be ≥ 0"
        )));
    }
    let n = group_losses.len() as f64;
    let mean = group_losses.iter().sum::<f64>() / n;
    let var = group_losses
        .iter()
        .map(|&l| (l - mean) * (l - mean))
        .sum::<f64>()
        / n;
    Ok(mean + lambda_var * var)
}

/// Derivative of [`variant_dro_loss`] with respect to each group mean loss:
/// `1/G + 2λ(ℓ̄_g − mean)/G`. Entries can be negative for below-average
/// groups — the variance penalty actively pushes their losses up toward the
/// mean, and the trainer passes the sign through to the gradient.
pub fn variant_dro_group_coefficients(group_losses: &[f64], lambda_var: f64) -> Result<Vec<f64>> {
    if group_losses.is_empty() {
        return Err(Error::InvalidInput("variant_dro over zero groups".into()));
    }
    let n = group_losses.len() as f64;
    let mean = group_losses.iter().sum::<f64>() / n;
    Ok(group_losses
        .iter()
        .map(|&l| (1.0 + 2.0 * lambda_var * (l - mean)) / n)
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn erm_is_the_mean() {
        assert_eq!(erm_batch_loss(&[1.0]).unwrap(), 1.0);
        assert_eq!(erm_batch_loss(&[0.0, 0.0, 0.0]).unwrap(), 0.0);
        assert_eq!(erm_batch_loss(&[1.0, 2.0, 3.0, 4.0]).unwrap(), 2.5);
        assert!(erm_batch_loss(&[]).is_err());
    }

    #[test]
    fn cvar_selects_the_worst_tail() {
        let losses = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(cvar_loss(&losses, 1.0).unwrap(), 2.5);
        assert_eq!(cvar_loss(&losses, 0.5).unwrap(), 3.5);
        assert_eq!(cvar_indices(&losses, 0.5).unwrap(), vec![2, 3]);
        // ⌈0.3·4⌉ = 2 as well.
        assert_eq!(cvar_loss(&losses, 0.3).unwrap(), 3.5);
        // Ties break toward the lower index: ⌈0.3·3⌉ = 1 slot.
        assert_eq!(cvar_indices(&[2.0, 2.0, 2.0], 0.3).unwrap(), vec![0]);
        // ⌈0.34·3⌉ = 2 slots keep the two lowest-index ties.
        assert_eq!(cvar_indices(&[2.0, 2.0, 2.0], 0.34).unwrap(), vec![0, 1]);
    }

    /// Brute force over all size-k subsets, summing in ascending index
    /// order exactly as `cvar_loss` does.
    fn brute_force_cvar(losses: &[f64], alpha: f64) -> f64 {
        let n = losses.len();
        let k = ((alpha * n as f64).ceil() as usize).clamp(1, n);
        let mut best = f64::NEG_INFINITY;
        for mask in 0u32..(1 << n) {
            if mask.count_ones() as usize != k {
                continue;
            }
            let sum: f64 = (0..n).filter(|&i| mask >> i & 1 == 1).map(|i| losses[i]).sum();
            let mean = sum / k as f64;
            if mean > best {
                best = mean;
            }
        }
        best
    }

    #[test]
    fn cvar_equals_brute_force_subset_maximum() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        for _ in 0..50 {
            let n = rng.random_range(1..=8);
            let losses: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..3.0)).collect();
            for alpha in [0.25, 0.5, 1.0] {
                let fast = cvar_loss(&losses, alpha).unwrap();
                let brute = brute_force_cvar(&losses, alpha);
                assert_eq!(fast, brute, "n = {n}, alpha = {alpha}");
            }
        }
    }

    #[test]
    fn cvar_is_monotone_in_each_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..100 {
            let n = rng.random_range(2..10);
            let losses: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..2.0)).collect();
            let alpha = rng.random_range(0.1..1.0);
            let base = cvar_loss(&losses, alpha).unwrap();
            let mut raised = losses.clone();
            let idx = rng.random_range(0..n);
            raised[idx] += rng.random_range(0.0..1.0);
            assert!(cvar_loss(&raised, alpha).unwrap() >= base);
        }
    }

    #[test]
    fn chisq_matches_two_point_closed_form() {
        let w = chisq_weights(&[0.0, 1.0], 0.25).unwrap();
        assert!((w[0] - 0.5).abs() < 1e-9, "{w:?}");
        assert!((w[1] - 1.5).abs() < 1e-9, "{w:?}");
    }

    #[test]
    fn chisq_degenerate_and_tiny_radius_go_uniform() {
        assert_eq!(chisq_weights(&[2.0, 2.0, 2.0], 0.5).unwrap(), vec![1.0; 3]);
        // ρ → 0 drives weights to uniform.
        let w = chisq_weights(&[0.5, 1.5, 2.5], 1e-12).unwrap();
        for &wi in &w {
            assert!((wi - 1.0).abs() < 1e-4, "{w:?}");
        }
        // Unreachable radius falls back to uniform: two points max out at
        // χ² = 1.
        assert_eq!(chisq_weights(&[0.0, 1.0], 5.0).unwrap(), vec![1.0, 1.0]);
    }

    #[test]
    fn chisq_weights_sit_on_the_ball_with_mean_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        for _ in 0..100 {
            let n = rng.random_range(3..20);
            let losses: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..4.0)).collect();
            let rho = rng.random_range(0.01..0.5);
            let w = chisq_weights(&losses, rho).unwrap();
            let mean = w.iter().sum::<f64>() / n as f64;
            assert!((mean - 1.0).abs() < 1e-9);
            assert!(w.iter().all(|&x| x >= 0.0));
            let chi = chi_squared_to_uniform(&w);
            if w.iter().any(|&x| x != 1.0) {
                assert!((chi - rho).abs() < 1e-6, "χ² {chi} vs ρ {rho}");
            }
        }
    }

    #[test]
    fn doro_drops_the_largest_with_index_tie_break() {
        assert_eq!(doro_filter(&[1.0, 2.0, 3.0], 0.0).unwrap(), vec![0, 1, 2]);
        // n = 4, ε = 0.25 → exactly the single largest is removed.
        assert_eq!(doro_filter(&[4.0, 1.0, 9.0, 2.0], 0.25).unwrap(), vec![0, 1, 3]);
        // Equal losses at the cut: the lowest index goes first.
        assert_eq!(doro_filter(&[5.0, 5.0, 5.0, 1.0], 0.25).unwrap(), vec![1, 2, 3]);
        assert_eq!(doro_filter(&[5.0, 5.0, 5.0, 1.0], 0.5).unwrap(), vec![2, 3]);
    }

    #[test]
    fn group_dro_update_matches_hand_renormalization() {
        let q = [0.5, 0.5];
        assert_eq!(group_dro_update(&q, &[1.0, 1.0], 0.7).unwrap(), vec![0.5, 0.5]);
        assert_eq!(group_dro_update(&q, &[3.0, 1.0], 0.0).unwrap(), vec![0.5, 0.5]);
        let updated = group_dro_update(&q, &[1.0, 0.0], 2.0_f64.ln()).unwrap();
        assert!((updated[0] - 2.0 / 3.0).abs() < 1e-12);
        assert!((updated[1] - 1.0 / 3.0).abs() < 1e-12);
        // Renormalization keeps the simplex (up to the last ulp of the sum).
        let sum: f64 = updated.iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
        assert!(updated.iter().all(|&x| x >= 0.0));
        // Huge losses must not overflow.
        let extreme = group_dro_update(&q, &[1e6, 0.0], 1.0).unwrap();
        assert!(extreme.iter().all(|x| x.is_finite()));
    }

    #[test]
    fn cvar_group_mirrors_sample_cvar_on_group_means() {
        assert_eq!(cvar_group_loss(&[1.0, 2.0, 3.0, 4.0], 1.0).unwrap(), 2.5);
        assert_eq!(cvar_group_loss(&[7.0], 0.3).unwrap(), 7.0);
        assert_eq!(cvar_group_loss(&[1.0, 2.0, 3.0, 4.0], 0.5).unwrap(), 3.5);
    }

    #[test]
    fn gradient_dro_normalizes_norms() {
        assert_eq!(gradient_dro_weights(&[2.0, 2.0]).unwrap(), vec![0.5, 0.5]);
        assert_eq!(gradient_dro_weights(&[0.0, 0.0]).unwrap(), vec![0.5, 0.5]);
        assert_eq!(gradient_dro_weights(&[1.0, 3.0]).unwrap(), vec![0.25, 0.75]);
        assert!(gradient_dro_weights(&[-1.0, 1.0]).is_err());
    }

    #[test]
    fn variant_dro_adds_population_variance() {
        assert_eq!(variant_dro_loss(&[1.0, 5.0], 0.0).unwrap(), 3.0);
        assert_eq!(variant_dro_loss(&[2.0, 2.0, 2.0], 9.0).unwrap(), 2.0);
        // mean 2, population variance 1 → 2 + 1·1 = 3.
        assert_eq!(variant_dro_loss(&[1.0, 3.0], 1.0).unwrap(), 3.0);
        assert_eq!(variant_dro_loss(&[4.0], 2.0).unwrap(), 4.0);
    }

    #[test]
    fn variant_coefficients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(44);
        let h = 1e-7;
        for _ in 0..50 {
            let n = rng.random_range(1..6);
            let losses: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..3.0)).collect();
            let lambda = rng.random_range(0.0..2.0);
            let coeffs = variant_dro_group_coefficients(&losses, lambda).unwrap();
            for g in 0..n {
                let mut up = losses.clone();
                let mut down = losses.clone();
                up[g] += h;
                down[g] -= h;
                let fd = (variant_dro_loss(&up, lambda).unwrap()
                    - variant_dro_loss(&down, lambda).unwrap())
                    / (2.0 * h);
                assert!((coeffs[g] - fd).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn spec_validation_rejects_bad_ranges() {
        let mut spec = BaselineSpec::default();
        spec.alpha_cvar = 0.0;
        assert!(spec.validate().is_err());
        let mut spec = BaselineSpec::default();
        spec.eps_doro = 1.0;
        assert!(spec.validate().is_err());
        let mut spec = BaselineSpec::default();
        spec.rho_chisq = 0.0;
        assert!(spec.validate().is_err());
        let mut spec = BaselineSpec::default();
        spec.lambda_var = -0.5;
        assert!(spec.validate().is_err());
        assert!(BaselineSpec::default().validate().is_ok());
    }
}
