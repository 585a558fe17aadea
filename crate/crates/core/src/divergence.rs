//! Cressie-Read f-divergences over group-weight vectors, plus the simplex
//! and divergence-ball projections used by the constrained reweighting
//! optimizer.
//!
//! The family is indexed by an order `k ≥ 1`:
//!
//! | k   | f_k(t)                         | divergence recovered  |
//! |-----|--------------------------------|-----------------------|
//! | 1   | t·ln t − t + 1 (limit form)    | KL(q ‖ p)             |
//! | 2   | (t² − 2t + 1)/2                | ½·χ²(q ‖ p)           |
//! | k>1 | (tᵏ − k·t + k − 1)/(k(k−1))    | Cressie-Read order k  |
//!
//! Each generator vanishes at t = 1 and is convex on t ≥ 0, so
//! `D_k(q‖p) = Σ_i p_i·f_k(q_i/p_i)` is a proper divergence: nonnegative and
//! zero exactly when q = p.

use crate::error::{Error, Result};

/// Lower clamp for logarithms of weight ratios (k = 1 gradient at q_i = 0).
pub const EPSILON: f64 = 1e-12;

/// Simplex-sum tolerance used when validating weight vectors.
pub const SIMPLEX_TOL: f64 = 1e-9;

/// Bisection interval tolerance for the divergence-ball projection.
pub const BALL_BISECT_TOL: f64 = 1e-10;

/// Cressie-Read generator f_k(t).
///
/// For `k > 1` returns `(t^k − k·t + k − 1)/(k(k−1))`; for `k = 1` returns
/// the limit form `t·ln t − t + 1` with `0·ln 0 := 0`.
///
/// Errors with [`Error::Domain`] when `t < 0` or `k < 1`.
pub fn cressie_read_f(k: f64, t: f64) -> Result<f64> {
    if t < 0.0 {
        return Err(Error::Domain(format!("cressie_read_f: t = {t} < 0")));
    }
    if k < 1.0 {
        return Err(Error::Domain(format!("cressie_read_f: k = {k} < 1")));
    }
    if k == 1.0 {
        let t_ln_t = if t == 0.0 { 0.0 } else { t * t.ln() };
        Ok(t_ln_t - t + 1.0)
    } else {
        Ok((t.powf(k) - k * t + k - 1.0) / (k * (k - 1.0)))
    }
}

/// Derivative f_k′(t) of the Cressie-Read generator.
///
/// For `k > 1` this is `(t^{k−1} − 1)/(k − 1)`; for `k = 1` it is `ln t`,
/// with `t` clamped below at [`EPSILON`] so the gradient stays finite at the
/// simplex boundary.
pub fn cressie_read_f_prime(k: f64, t: f64) -> f64 {
    if k == 1.0 {
        t.max(EPSILON).ln()
    } else {
        (t.powf(k - 1.0) - 1.0) / (k - 1.0)
    }
}

/// Validates that `v` is a probability vector: finite, nonnegative entries
/// summing to 1 within [`SIMPLEX_TOL`].
fn check_probability_vector(v: &[f64], name: &str) -> Result<()> {
    if v.is_empty() {
        return Err(Error::InvalidInput(format!("{name} is empty")));
    }
    let mut sum = 0.0;
    for (i, &x) in v.iter().enumerate() {
        if !x.is_finite() {
            return Err(Error::NonFinite(format!("{name}[{i}] = {x}")));
        }
        if x < 0.0 {
            return Err(Error::InvalidInput(format!("{name}[{i}] = {x} < 0")));
        }
        sum += x;
    }
    if (sum - 1.0).abs() > SIMPLEX_TOL {
        return Err(Error::InvalidInput(format!(
            "{name} sums to {sum}, expected 1 within {SIMPLEX_TOL}"
        )));
    }
    Ok(())
}

/// Group weight vector `q` together with its reference prior `p`
/// (empirical group frequencies).
///
/// Invariants, enforced at construction and after every update:
/// both vectors sum to 1 within [`SIMPLEX_TOL`] with nonnegative entries,
/// and every prior entry is strictly positive.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupWeights {
    q: Vec<f64>,
    p: Vec<f64>,
}

impl GroupWeights {
    /// Builds a validated weight pair.
    pub fn new(q: Vec<f64>, p: Vec<f64>) -> Result<Self> {
        if q.len() != p.len() {
            return Err(Error::Shape(format!(
                "q has {} entries, p has {}",
                q.len(),
                p.len()
            )));
        }
        check_probability_vector(&q, "q")?;
        check_probability_vector(&p, "p")?;
        if let Some((i, &pi)) = p.iter().enumerate().find(|(_, &x)| x <= 0.0) {
            return Err(Error::InvalidInput(format!("p[{i}] = {pi} must be > 0")));
        }
        Ok(Self { q, p })
    }

    /// Uniform q over the groups defined by prior `p`.
    pub fn uniform(p: Vec<f64>) -> Result<Self> {
        let m = p.len();
        if m == 0 {
            return Err(Error::InvalidInput("p is empty".into()));
        }
        Self::new(vec![1.0 / m as f64; m], p)
    }

    pub fn len(&self) -> usize {
        self.q.len()
    }

    pub fn is_empty(&self) -> bool {
        self.q.is_empty()
    }

    pub fn q(&self) -> &[f64] {
        &self.q
    }

    pub fn p(&self) -> &[f64] {
        &self.p
    }

    /// Replaces q, re-validating the simplex invariants.
    pub fn set_q(&mut self, q: Vec<f64>) -> Result<()> {
        if q.len() != self.p.len() {
            return Err(Error::Shape(format!(
                "new q has {} entries, expected {}",
                q.len(),
                self.p.len()
            )));
        }
        check_probability_vector(&q, "q")?;
        self.q = q;
        Ok(())
    }
}

/// Divergence `D_k(q‖p) = Σ_i p_i·f_k(q_i/p_i)` between two probability
/// vectors of equal length.
///
/// Errors when a `p_i = 0` coexists with `q_i > 0` (the ratio leaves the
/// generator's domain); `q_i = p_i = 0` contributes zero.
pub fn divergence(q: &[f64], p: &[f64], k: f64) -> Result<f64> {
    if q.len() != p.len() {
        return Err(Error::Shape(format!(
            "q has {} entries, p has {}",
            q.len(),
            p.len()
        )));
    }
    let mut total = 0.0;
    for (i, (&qi, &pi)) in q.iter().zip(p).enumerate() {
        if pi == 0.0 {
            if qi > 0.0 {
                return Err(Error::Domain(format!(
                    "p[{i}] = 0 while q[{i}] = {qi} > 0"
                )));
            }
            continue;
        }
        total += pi * cressie_read_f(k, qi / pi)?;
    }
    Ok(total)
}

/// Gradient of [`divergence`] with respect to q: component i is
/// `f_k′(q_i/p_i)`.
///
/// For k = 2 this reduces to `q_i/p_i − 1`, for k = 1 to `ln(q_i/p_i)` with
/// the ratio clamped below at [`EPSILON`].
pub fn divergence_gradient(q: &[f64], p: &[f64], k: f64) -> Result<Vec<f64>> {
    if q.len() != p.len() {
        return Err(Error::Shape(format!(
            "q has {} entries, p has {}",
            q.len(),
            p.len()
        )));
    }
    if k < 1.0 {
        return Err(Error::Domain(format!("divergence_gradient: k = {k} < 1")));
    }
    q.iter()
        .zip(p)
        .enumerate()
        .map(|(i, (&qi, &pi))| {
            if pi <= 0.0 {
                return Err(Error::Domain(format!("p[{i}] = {pi} must be > 0")));
            }
            Ok(cressie_read_f_prime(k, qi / pi))
        })
        .collect()
}

/// Euclidean projection of an arbitrary finite vector onto the probability
/// simplex, by the sort-and-threshold construction: with `u` the entries
/// sorted descending and `τ_j = (Σ_{r≤j} u_r − 1)/j`, the threshold is
/// `τ_ρ` for the largest `j` with `u_j − τ_j > 0`, and the projection is
/// `max(v_i − τ_ρ, 0)`.
pub fn project_simplex(v: &[f64]) -> Vec<f64> {
    debug_assert!(v.iter().all(|x| x.is_finite()));
    let mut sorted = v.to_vec();
    sorted.sort_by(|a, b| b.partial_cmp(a).expect("finite entries"));
    let mut cumsum = 0.0;
    let mut tau = 0.0;
    for (j, &u) in sorted.iter().enumerate() {
        cumsum += u;
        let candidate = (cumsum - 1.0) / (j + 1) as f64;
        if u - candidate > 0.0 {
            tau = candidate;
        }
    }
    v.iter().map(|&x| (x - tau).max(0.0)).collect()
}

/// Projects `q` into the divergence ball `{q′ : D_k(q′‖p) ≤ ρ}` along the
/// segment toward `p`.
///
/// Returns `q` unchanged when it is already feasible; otherwise returns
/// `(1−s)·p + s·q` for the largest `s ∈ [0, 1]` keeping the constraint
/// satisfied, found by bisection to interval width [`BALL_BISECT_TOL`].
/// Since `D_k` is convex with `D_k(p‖p) = 0`, the divergence is
/// nondecreasing along the segment and the feasible set of `s` is an
/// interval containing 0, so bisection is exact up to tolerance.
pub fn project_divergence_ball(q: &[f64], p: &[f64], k: f64, rho: f64) -> Result<Vec<f64>> {
    if rho <= 0.0 {
        return Err(Error::InvalidInput(format!(
            "project_divergence_ball: rho = {rho} must be > 0"
        )));
    }
    if divergence(q, p, k)? <= rho {
        return Ok(q.to_vec());
    }
    let mix = |s: f64| -> Vec<f64> {
        q.iter()
            .zip(p)
            .map(|(&qi, &pi)| (1.0 - s) * pi + s * qi)
            .collect()
    };
    // Invariant: lo is always feasible, hi always infeasible.
    let (mut lo, mut hi) = (0.0, 1.0);
    while hi - lo > BALL_BISECT_TOL {
        let mid = 0.5 * (lo + hi);
        if divergence(&mix(mid), p, k)? <= rho {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(mix(lo))
}
