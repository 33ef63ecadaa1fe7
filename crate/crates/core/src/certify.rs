//! Parameter smoothing and certification.
//!
//! A fixed ensemble of `M` Gaussian-perturbed copies of the final model votes
//! on every test input. The top-two vote frequencies are turned into
//! Hoeffding confidence bounds, and a non-abstaining prediction comes with
//! the largest trigger magnitude for which it provably agrees with the clean
//! model.

use libm::{erf, erfc};
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attack::AttackConfig;
use crate::dataset::LabeledSample;
use crate::engine::FederationConfig;
use crate::error::{CrflError, Result};
use crate::model::{lipschitz_constant_lz, predict, ModelParams};
use crate::rng::{self, label};

/// Product factors closer than this to 1 are reported as saturated.
pub const SATURATION_TOL: f64 = 1e-15;

/// Standard normal CDF, `Φ(x) = erfc(−x/√2)/2`.
///
/// `libm` ports the fdlibm `erf`/`erfc` rational approximations, accurate to
/// about one ulp over the whole real line (far inside a `1e−7` absolute
/// budget). `erfc` keeps relative precision in the lower tail.
pub fn std_normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

/// `2Φ(ρ/σ) − 1`, evaluated as `erf(ρ/(σ√2))` to avoid cancellation for small
/// ratios. The flag is set when the factor is within [`SATURATION_TOL`] of 1.
pub fn contraction_coefficient(rho: f64, sigma: f64) -> Result<(f64, bool)> {
    if !(sigma > 0.0) {
        return Err(CrflError::DegenerateKernel(format!(
            "sigma = {sigma}: a noiseless round has contraction coefficient 1"
        )));
    }
    if !(rho > 0.0) {
        return Err(CrflError::config(format!("rho = {rho} must be > 0")));
    }
    let c = erf(rho / (sigma * std::f64::consts::SQRT_2));
    Ok((c, 1.0 - c <= SATURATION_TOL))
}

/// `M` noisy copies `base + ε_k`, `ε_k ~ N(0, σ_T² I)`, generated once and
/// shared by all test samples.
#[derive(Debug, Clone)]
pub struct SmoothedModelEnsemble {
    base: ModelParams,
    sigma_t: f64,
    noise_seed: u64,
    members: Vec<ModelParams>,
}

impl SmoothedModelEnsemble {
    pub fn base(&self) -> &ModelParams {
        &self.base
    }

    pub fn sigma_t(&self) -> f64 {
        self.sigma_t
    }

    pub fn noise_seed(&self) -> u64 {
        self.noise_seed
    }

    pub fn size(&self) -> usize {
        self.members.len()
    }

    pub fn members(&self) -> &[ModelParams] {
        &self.members
    }
}

/// Member `k` draws its noise from the smoothing stream `(seed, k)`.
pub fn build_ensemble(
    base: &ModelParams,
    sigma_t: f64,
    m: usize,
    seed: u64,
) -> Result<SmoothedModelEnsemble> {
    if m == 0 {
        return Err(CrflError::config("ensemble size M must be >= 1"));
    }
    if !(sigma_t >= 0.0 && sigma_t.is_finite()) {
        return Err(CrflError::config(format!(
            "sigma_T = {sigma_t} must be >= 0"
        )));
    }
    let members = (0..m)
        .into_par_iter()
        .map(|k| {
            let mut member = base.clone();
            if sigma_t > 0.0 {
                let mut stream = rng::derive_stream(seed, label::SMOOTHING, k as u64, 0);
                for w in member.as_mut_slice() {
                    let z: f64 = StandardNormal.sample(&mut stream);
                    *w += sigma_t * z;
                }
            }
            member
        })
        .collect();
    Ok(SmoothedModelEnsemble {
        base: base.clone(),
        sigma_t,
        noise_seed: seed,
        members,
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VoteCounts {
    pub counts: Vec<usize>,
    pub total: usize,
}

impl VoteCounts {
    /// `(c_A, n_A, c_B, n_B)`: most and second-most voted classes, lower
    /// index first on ties.
    pub fn top_two(&self) -> (usize, usize, usize, usize) {
        let mut order: Vec<usize> = (0..self.counts.len()).collect();
        order.sort_by(|&a, &b| self.counts[b].cmp(&self.counts[a]).then(a.cmp(&b)));
        let a = order[0];
        let b = order.get(1).copied().unwrap_or(a);
        let nb = if b == a { 0 } else { self.counts[b] };
        (a, self.counts[a], b, nb)
    }
}

pub fn get_counts(features: &[f64], ensemble: &SmoothedModelEnsemble) -> Result<VoteCounts> {
    let base = ensemble.base();
    if features.len() != base.dim() {
        return Err(CrflError::DimensionMismatch {
            expected: format!("feature dimension {}", base.dim()),
            actual: format!("{}", features.len()),
        });
    }
    let mut counts = vec![0usize; base.classes()];
    for member in ensemble.members() {
        counts[predict(member, features)] += 1;
    }
    Ok(VoteCounts {
        counts,
        total: ensemble.size(),
    })
}

/// Hoeffding margin `sqrt(ln(1/α) / (2M))`.
pub fn hoeffding_margin(m: usize, alpha: f64) -> f64 {
    ((1.0 / alpha).ln() / (2.0 * m as f64)).sqrt()
}

/// `(p̲_A, p̄_B)` with the Hoeffding margin, clamped to `[0, 1]`.
pub fn calculate_bound(p_hat_a: f64, p_hat_b: f64, m: usize, alpha: f64) -> Result<(f64, f64)> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(CrflError::config(format!(
            "alpha = {alpha} must be in (0, 1)"
        )));
    }
    if m == 0 {
        return Err(CrflError::config("M must be >= 1"));
    }
    if !(0.0 <= p_hat_b && p_hat_b <= p_hat_a && p_hat_a <= 1.0) {
        return Err(CrflError::config(format!(
            "need 0 <= p_hat_B <= p_hat_A <= 1, got ({p_hat_a}, {p_hat_b})"
        )));
    }
    let margin = hoeffding_margin(m, alpha);
    Ok((
        (p_hat_a - margin).clamp(0.0, 1.0),
        (p_hat_b + margin).clamp(0.0, 1.0),
    ))
}

/// Per-attacker coefficients entering the radius.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttackerTerm {
    pub p: f64,
    pub gamma: f64,
    pub tau: f64,
    pub eta: f64,
    /// `q_B / n_B`.
    pub poison_ratio: f64,
}

impl AttackerTerm {
    /// `p γ τ η q_B/n_B`.
    pub fn coefficient(&self) -> f64 {
        self.p * self.gamma * self.tau * self.eta * self.poison_ratio
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RadiusContext {
    pub t_adv: usize,
    pub sigma_t_adv: f64,
    pub attackers: Vec<AttackerTerm>,
    pub lz: f64,
    /// `(ρ_t, σ_t)` for `t = t_adv+1 ..= T`; the last entry carries the
    /// smoothing noise `σ_T`.
    pub schedule: Vec<(f64, f64)>,
}

impl RadiusContext {
    /// Context with `L_Z` evaluated at `ρ_{t_adv}`.
    pub fn new(
        t_adv: usize,
        rho_t_adv: f64,
        sigma_t_adv: f64,
        attackers: Vec<AttackerTerm>,
        schedule: Vec<(f64, f64)>,
    ) -> Self {
        RadiusContext {
            t_adv,
            sigma_t_adv,
            attackers,
            lz: lipschitz_constant_lz(rho_t_adv),
            schedule,
        }
    }

    /// Context for a configured attack. `weights` are the aggregation
    /// weights in force at `t_adv` (the effective weights under robust
    /// aggregation) and `sigma_final` is the smoothing noise `σ_T`.
    pub fn from_federation(
        fed: &FederationConfig,
        attack: &AttackConfig,
        weights: &[f64],
        sigma_final: f64,
    ) -> Result<Self> {
        if weights.len() != fed.client_count() {
            return Err(CrflError::config(format!(
                "{} weights for {} clients",
                weights.len(),
                fed.client_count()
            )));
        }
        if attack.t_adv == 0 || attack.t_adv > fed.rounds {
            return Err(CrflError::config(format!(
                "t_adv = {} outside 1..={}",
                attack.t_adv, fed.rounds
            )));
        }
        let sigma_at = |t: usize| {
            if t == fed.rounds {
                sigma_final
            } else {
                fed.sigma.at(t)
            }
        };
        let mut attackers = Vec::with_capacity(attack.count());
        for a in &attack.attackers {
            let c = fed.clients.get(a.client_id).ok_or_else(|| {
                CrflError::config(format!("attacker id {} >= client count", a.client_id))
            })?;
            attackers.push(AttackerTerm {
                p: weights[a.client_id],
                gamma: a.gamma,
                tau: c.tau as f64,
                eta: c.eta,
                poison_ratio: a.q_b as f64 / c.batch_size as f64,
            });
        }
        let schedule = (attack.t_adv + 1..=fed.rounds)
            .map(|t| (fed.rho.at(t), sigma_at(t)))
            .collect();
        Ok(RadiusContext::new(
            attack.t_adv,
            fed.rho.at(attack.t_adv),
            sigma_at(attack.t_adv),
            attackers,
            schedule,
        ))
    }

    pub fn r(&self) -> usize {
        self.attackers.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.attackers.is_empty() {
            return Err(CrflError::config(
                "radius context needs at least one attacker",
            ));
        }
        if !(self.sigma_t_adv > 0.0) {
            return Err(CrflError::config("sigma at t_adv must be > 0"));
        }
        if !(self.lz > 0.0) {
            return Err(CrflError::config("L_Z must be > 0"));
        }
        for a in &self.attackers {
            let vals = [a.p, a.gamma, a.tau, a.eta, a.poison_ratio];
            if vals.iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
                return Err(CrflError::config(format!(
                    "attacker terms must be finite and >= 0: {a:?}"
                )));
            }
        }
        Ok(())
    }

    /// `Π (2Φ(ρ_t/σ_t) − 1)` over rounds with `σ_t > 0`, and whether any
    /// factor saturated.
    pub fn contraction_product(&self) -> Result<(f64, bool)> {
        let mut prod = 1.0;
        let mut saturated = false;
        for &(rho, sigma) in &self.schedule {
            if sigma == 0.0 {
                // a noiseless round contracts nothing; its factor is 1
                continue;
            }
            let (c, sat) = contraction_coefficient(rho, sigma)?;
            prod *= c;
            saturated |= sat;
        }
        Ok((prod, saturated))
    }

    /// `Σ_i (p_i γ_i τ_i η_i q_i/n_i)²`.
    pub fn coefficient_sum_sq(&self) -> f64 {
        self.attackers.iter().map(|a| a.coefficient().powi(2)).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Radius {
    /// `+∞` when the closed form diverges.
    pub value: f64,
    /// Some contraction factor rounded to 1, or the product underflowed.
    pub saturated: bool,
}

/// `−ln(1 − (√p̲_A − √p̄_B)²)`; `+∞` when the argument of the log is not
/// positive.
pub fn epsilon_threshold(p_a_lower: f64, p_b_upper: f64) -> f64 {
    let gap = (p_a_lower.sqrt() - p_b_upper.sqrt()).powi(2);
    let inner = 1.0 - gap;
    if inner <= 0.0 {
        f64::INFINITY
    } else {
        -(-gap).ln_1p()
    }
}

/// Certified trigger magnitude for identical attacker backdoors:
///
/// `RAD² = ε σ²_{t_adv} / (2 R L_Z² Σ_i (p_i γ_i τ_i η_i q_i/n_i)² Π_t (2Φ(ρ_t/σ_t) − 1))`.
pub fn calculate_radius(p_a_lower: f64, p_b_upper: f64, ctx: &RadiusContext) -> Result<Radius> {
    if !(p_a_lower > p_b_upper) {
        return Err(CrflError::Contract(format!(
            "radius requested with p_A_lower = {p_a_lower} <= p_B_upper = {p_b_upper}; the sample must abstain"
        )));
    }
    ctx.validate()?;
    let (prod, saturated) = ctx.contraction_product()?;
    let eps = epsilon_threshold(p_a_lower, p_b_upper);
    if prod == 0.0 {
        return Ok(Radius {
            value: f64::INFINITY,
            saturated: true,
        });
    }
    let denom = 2.0 * ctx.r() as f64 * ctx.lz.powi(2) * ctx.coefficient_sum_sq() * prod;
    let value = (eps * ctx.sigma_t_adv.powi(2) / denom).sqrt();
    Ok(Radius {
        value,
        // an attacker with no influence gives an infinite radius without any saturation
        saturated: saturated || value.is_infinite() && eps.is_finite() && denom > 0.0,
    })
}

/// General robustness condition with per-attacker magnitudes `‖δ_i‖`:
/// `R Σ (p γ τ η q/n ‖δ_i‖)² ≤ ε σ²_{t_adv} / (2 L_Z² Π)`.
pub fn general_condition_holds(
    p_a_lower: f64,
    p_b_upper: f64,
    ctx: &RadiusContext,
    delta_norms: &[f64],
) -> Result<bool> {
    if delta_norms.len() != ctx.r() {
        return Err(CrflError::config(format!(
            "{} trigger magnitudes for {} attackers",
            delta_norms.len(),
            ctx.r()
        )));
    }
    if !(p_a_lower > p_b_upper) {
        return Ok(false);
    }
    ctx.validate()?;
    let (prod, _) = ctx.contraction_product()?;
    let lhs = ctx.r() as f64
        * ctx
            .attackers
            .iter()
            .zip(delta_norms)
            .map(|(a, d)| (a.coefficient() * d).powi(2))
            .sum::<f64>();
    let rhs = epsilon_threshold(p_a_lower, p_b_upper) * ctx.sigma_t_adv.powi(2)
        / (2.0 * ctx.lz.powi(2) * prod);
    Ok(lhs <= rhs)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CertificationResult {
    pub sample_id: usize,
    pub true_label: usize,
    /// `None` means ABSTAIN.
    pub prediction: Option<usize>,
    pub p_hat_a: f64,
    pub p_hat_b: f64,
    pub p_a_lower: f64,
    pub p_b_upper: f64,
    pub rad: f64,
    pub saturated: bool,
}

impl CertificationResult {
    pub fn is_abstain(&self) -> bool {
        self.prediction.is_none()
    }

    pub fn is_correct(&self) -> bool {
        self.prediction == Some(self.true_label)
    }
}

/// Certification from already collected votes.
pub fn certify_counts(
    sample_id: usize,
    true_label: usize,
    votes: &VoteCounts,
    ctx: &RadiusContext,
    alpha: f64,
) -> Result<CertificationResult> {
    let (c_a, n_a, _, n_b) = votes.top_two();
    let m = votes.total as f64;
    let (p_hat_a, p_hat_b) = (n_a as f64 / m, n_b as f64 / m);
    let (p_a_lower, p_b_upper) = calculate_bound(p_hat_a, p_hat_b, votes.total, alpha)?;
    let mut out = CertificationResult {
        sample_id,
        true_label,
        prediction: None,
        p_hat_a,
        p_hat_b,
        p_a_lower,
        p_b_upper,
        rad: 0.0,
        saturated: false,
    };
    if p_a_lower > p_b_upper {
        let radius = calculate_radius(p_a_lower, p_b_upper, ctx)?;
        out.prediction = Some(c_a);
        out.rad = radius.value;
        out.saturated = radius.saturated;
    }
    Ok(out)
}

pub fn certify_sample(
    sample_id: usize,
    sample: &LabeledSample,
    ensemble: &SmoothedModelEnsemble,
    ctx: &RadiusContext,
    alpha: f64,
) -> Result<CertificationResult> {
    let votes = get_counts(&sample.features, ensemble)?;
    certify_counts(sample_id, sample.label, &votes, ctx, alpha)
}

/// Certify every sample in parallel; results are in input order with
/// `sample_id` equal to the position.
pub fn certify_all(
    samples: &[LabeledSample],
    ensemble: &SmoothedModelEnsemble,
    ctx: &RadiusContext,
    alpha: f64,
) -> Result<Vec<CertificationResult>> {
    samples
        .par_iter()
        .enumerate()
        .map(|(i, s)| certify_sample(i, s, ensemble, ctx, alpha))
        .collect()
}

fn check_non_empty(results: &[CertificationResult]) -> Result<()> {
    if results.is_empty() {
        return Err(CrflError::config(
            "certified metrics need at least one result",
        ));
    }
    Ok(())
}

/// Fraction of samples predicted correctly with `RAD ≥ r`; abstentions never
/// count.
pub fn certified_accuracy(results: &[CertificationResult], r: f64) -> Result<f64> {
    check_non_empty(results)?;
    let hits = results
        .iter()
        .filter(|c| c.is_correct() && c.rad >= r)
        .count();
    Ok(hits as f64 / results.len() as f64)
}

/// Fraction of samples certified (not abstaining) with `RAD ≥ r`.
pub fn certified_rate(results: &[CertificationResult], r: f64) -> Result<f64> {
    check_non_empty(results)?;
    let hits = results
        .iter()
        .filter(|c| !c.is_abstain() && c.rad >= r)
        .count();
    Ok(hits as f64 / results.len() as f64)
}

/// Largest radius certified for any sample (0 if all abstain). Beyond it the
/// certified rate is zero.
pub fn critical_radius(results: &[CertificationResult]) -> f64 {
    results
        .iter()
        .filter(|c| !c.is_abstain())
        .map(|c| c.rad)
        .fold(0.0, f64::max)
}

/// Smoothed-classifier accuracy: correct non-abstaining predictions.
pub fn smoothed_accuracy(results: &[CertificationResult]) -> f64 {
    if results.is_empty() {
        return 0.0;
    }
    results.iter().filter(|c| c.is_correct()).count() as f64 / results.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurvePoint {
    pub r: f64,
    pub certified_accuracy: f64,
    pub certified_rate: f64,
}

pub fn certification_curve(
    results: &[CertificationResult],
    r_grid: &[f64],
) -> Result<Vec<CurvePoint>> {
    r_grid
        .iter()
        .map(|&r| {
            Ok(CurvePoint {
                r,
                certified_accuracy: certified_accuracy(results, r)?,
                certified_rate: certified_rate(results, r)?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mnist_ctx(t: usize) -> RadiusContext {
        let attackers = vec![AttackerTerm {
            p: 0.05,
            gamma: 10.0,
            tau: 30.0,
            eta: 0.001,
            poison_ratio: 0.05,
        }];
        let schedule = (11..=t).map(|t| (0.1 * t as f64 + 2.0, 0.01)).collect();
        RadiusContext::new(10, 3.0, 0.01, attackers, schedule)
    }

    #[test]
    fn cdf_values() {
        assert_eq!(std_normal_cdf(0.0), 0.5);
        // oracle: 50-digit quadrature
        assert!((std_normal_cdf(1.959964) - 0.97500000090355759570).abs() < 1e-12);
        for x in [0.5, 1.0, 2.0, 5.0] {
            assert!((std_normal_cdf(-x) - (1.0 - std_normal_cdf(x))).abs() < 1e-12);
        }
        let mut prev = 0.0;
        for k in -800..=800 {
            let v = std_normal_cdf(k as f64 / 100.0);
            assert!(v >= prev);
            prev = v;
        }
    }

    #[test]
    fn contraction_values() {
        let (c, sat) = contraction_coefficient(1.0, 1.0).unwrap();
        assert!((c - 0.68268949213708589717).abs() < 1e-12);
        assert!(!sat);
        let (c, _) = contraction_coefficient(1e-9, 1.0).unwrap();
        assert!(c < 1e-8);
        let (c, sat) = contraction_coefficient(3.0, 0.01).unwrap();
        assert!(sat && c == 1.0);
        assert!(matches!(
            contraction_coefficient(1.0, 0.0),
            Err(CrflError::DegenerateKernel(_))
        ));
    }

    #[test]
    fn bounds() {
        // oracle: sqrt(ln 1000 / 2000) at 50 digits
        let (lo, hi) = calculate_bound(0.9, 0.1, 1000, 0.001).unwrap();
        assert!((lo - 0.84123029998808000955).abs() < 1e-12);
        assert!((hi - 0.15876970001191999045).abs() < 1e-12);
        let (lo, hi) = calculate_bound(1.0, 0.0, 1_000_000_000_000, 0.5).unwrap();
        assert!(lo < 1.0 && lo > 0.999998 && hi > 0.0 && hi < 2e-6);
        let m1 = hoeffding_margin(250, 0.01);
        let m4 = hoeffding_margin(1000, 0.01);
        assert!((m1 / m4 - 2.0).abs() < 1e-12);
        assert!(hoeffding_margin(10, 1.0 - 1e-12) < 1e-6);
        assert!(calculate_bound(0.5, 0.5, 10, 1.0).is_err());
        let (lo, hi) = calculate_bound(0.0, 0.0, 1, 0.001).unwrap();
        assert_eq!((lo, hi), (0.0, 1.0));
    }

    #[test]
    fn epsilon_edges() {
        assert_eq!(epsilon_threshold(0.5, 0.5), 0.0);
        assert_eq!(epsilon_threshold(1.0, 0.0), f64::INFINITY);
        // oracle: 50-digit evaluation of the closed form
        let e = epsilon_threshold(0.7, 0.1);
        assert!(((e - 0.31587544720812005893) / 0.31587544720812005893).abs() < 1e-12);
    }

    #[test]
    fn radius_at_study_point() {
        // oracle: 50-digit evaluation; the MNIST schedule saturates so T is irrelevant
        let expected = 1.2851600387777453744;
        for t in [60, 100, 400] {
            let r = calculate_radius(0.7, 0.1, &mnist_ctx(t)).unwrap();
            assert!(((r.value - expected) / expected).abs() < 1e-12);
            assert!(r.saturated);
        }
    }

    #[test]
    fn radius_homogeneity_and_limits() {
        let ctx = mnist_ctx(100);
        let base = calculate_radius(0.7, 0.1, &ctx).unwrap().value;
        let mut doubled = ctx.clone();
        doubled.attackers[0].gamma *= 2.0;
        let half = calculate_radius(0.7, 0.1, &doubled).unwrap().value;
        assert!((half * 2.0 - base).abs() < 1e-12 * base);
        let tiny = calculate_radius(0.1 + 1e-12, 0.1, &ctx).unwrap().value;
        assert!(tiny < 1e-4);
        assert!(matches!(
            calculate_radius(0.5, 0.5, &ctx),
            Err(CrflError::Contract(_))
        ));
        let inf = calculate_radius(1.0, 0.0, &ctx).unwrap();
        assert!(inf.value.is_infinite());
        // zero product
        let mut zero = ctx.clone();
        zero.schedule = vec![(1e-300, 1.0); 3];
        let r = calculate_radius(0.7, 0.1, &zero).unwrap();
        assert!(r.value.is_infinite() && r.saturated);
        // empty product
        let mut empty = ctx;
        empty.schedule.clear();
        assert!((calculate_radius(0.7, 0.1, &empty).unwrap().value - base).abs() < 1e-12);
    }

    #[test]
    fn general_condition_agrees_with_radius() {
        let ctx = mnist_ctx(50);
        let rad = calculate_radius(0.7, 0.1, &ctx).unwrap().value;
        assert!(general_condition_holds(0.7, 0.1, &ctx, &[rad * 0.999]).unwrap());
        assert!(!general_condition_holds(0.7, 0.1, &ctx, &[rad * 1.001]).unwrap());
        assert!(!general_condition_holds(0.5, 0.5, &ctx, &[0.0]).unwrap());
    }

    fn votes(counts: &[usize]) -> VoteCounts {
        VoteCounts {
            counts: counts.to_vec(),
            total: counts.iter().sum(),
        }
    }

    #[test]
    fn certify_from_counts() {
        let ctx = mnist_ctx(100);
        let tie = certify_counts(0, 0, &votes(&[500, 500, 0]), &ctx, 0.001).unwrap();
        assert!(tie.is_abstain() && tie.rad == 0.0);

        let mut c = vec![0; 10];
        c[0] = 1000;
        let r = certify_counts(1, 0, &votes(&c), &ctx, 0.001).unwrap();
        assert_eq!(r.prediction, Some(0));
        assert!((r.p_a_lower - 0.94123029998808000955).abs() < 1e-12);
        assert!((r.p_b_upper - 0.05876970001191999045).abs() < 1e-12);
        assert!(r.rad > 0.0);

        // margin >= 0.5 swamps any split
        let r = certify_counts(2, 0, &votes(&[2, 0]), &ctx, 0.001).unwrap();
        assert!(hoeffding_margin(2, 0.001) >= 0.5);
        assert!(r.is_abstain());
    }

    #[test]
    fn top_two_ties_prefer_lower_index() {
        assert_eq!(votes(&[3, 5, 5, 1]).top_two(), (1, 5, 2, 5));
        assert_eq!(votes(&[0, 0, 4]).top_two(), (2, 4, 0, 0));
        assert_eq!(votes(&[7]).top_two(), (0, 7, 0, 0));
    }

    #[test]
    fn ensemble_determinism_and_zero_noise() {
        let base = ModelParams::from_vec(3, 2, vec![0.1, -0.1, 0.5, 0.0, 0.0, 0.3]).unwrap();
        let e = build_ensemble(&base, 0.0, 3, 1).unwrap();
        assert!(e.members().iter().all(|m| m == &base));
        let a = build_ensemble(&base, 0.2, 5, 9).unwrap();
        let b = build_ensemble(&base, 0.2, 5, 9).unwrap();
        assert_eq!(a.members(), b.members());
        assert_ne!(a.members()[0], a.members()[1]);
        let one = build_ensemble(&base, 0.2, 1, 9).unwrap();
        let v = get_counts(&[1.0, 0.0, 0.5], &one).unwrap();
        assert_eq!(v.counts.iter().sum::<usize>(), 1);
        let v = get_counts(&[1.0, 0.0, 0.5], &e).unwrap();
        assert_eq!(v.counts[predict(&base, &[1.0, 0.0, 0.5])], 3);
        assert!(get_counts(&[1.0], &e).is_err());
    }

    fn result(label: usize, pred: Option<usize>, rad: f64) -> CertificationResult {
        CertificationResult {
            sample_id: 0,
            true_label: label,
            prediction: pred,
            p_hat_a: 1.0,
            p_hat_b: 0.0,
            p_a_lower: 0.9,
            p_b_upper: 0.1,
            rad,
            saturated: false,
        }
    }

    #[test]
    fn metrics() {
        let rs = vec![
            result(0, Some(0), 2.0),
            result(1, Some(0), 3.0),
            result(2, None, 0.0),
            result(3, Some(3), 1.0),
        ];
        assert_eq!(certified_accuracy(&rs, 0.0).unwrap(), 0.5);
        assert_eq!(certified_rate(&rs, 0.0).unwrap(), 0.75);
        assert_eq!(certified_accuracy(&rs, 1.5).unwrap(), 0.25);
        assert_eq!(critical_radius(&rs), 3.0);
        assert_eq!(certified_rate(&rs, 3.1).unwrap(), 0.0);
        for r in [0.0, 0.5, 1.0, 2.0, 3.0] {
            assert!(certified_rate(&rs, r).unwrap() >= certified_accuracy(&rs, r).unwrap());
        }
        let all = vec![result(0, Some(0), 5.0); 3];
        assert_eq!(certified_accuracy(&all, 4.0).unwrap(), 1.0);
        let none = vec![result(0, None, 0.0); 3];
        assert_eq!(certified_rate(&none, 0.0).unwrap(), 0.0);
        assert!(certified_rate(&[], 0.0).is_err());
    }

    #[test]
    fn noiseless_rounds_contribute_no_contraction() {
        let mut ctx = mnist_ctx(20);
        let before = ctx.contraction_product().unwrap();
        ctx.schedule.push((3.0, 0.0));
        assert_eq!(ctx.contraction_product().unwrap(), before);
        assert!(contraction_coefficient(3.0, 0.0).is_err());
    }

    #[test]
    fn attacker_without_influence_gives_infinite_radius() {
        let mut ctx = mnist_ctx(100);
        ctx.schedule = vec![(0.01, 0.01); 5];
        ctx.attackers[0].gamma = 0.0;
        let r = calculate_radius(0.7, 0.1, &ctx).unwrap();
        assert!(r.value.is_infinite());
        assert!(!r.saturated);
        ctx.attackers[0].gamma = -1.0;
        assert!(calculate_radius(0.7, 0.1, &ctx).is_err());
    }
}
