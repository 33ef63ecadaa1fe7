//! Closed-form divergence bounds and the two numerical studies: the coupled
//! closeness trace and the dependence of the radius on `ρ/σ` and `T`.

use rayon::prelude::*;

use crate::attack::AttackConfig;
use crate::certify::{calculate_radius, RadiusContext};
use crate::dataset::ClientDataset;
use crate::engine::{run_training_with, FederationConfig, PlanSource, TrainOptions};
use crate::error::{CrflError, Result};
use crate::model::ModelParams;

pub use crate::certify::{contraction_coefficient, epsilon_threshold};

/// `‖m2 − m1‖² / (2σ²)`, the KL divergence between two isotropic Gaussians
/// with a shared scale.
pub fn kl_gaussian_shared_sigma(m1: &ModelParams, m2: &ModelParams, sigma: f64) -> Result<f64> {
    if !(sigma > 0.0) {
        return Err(CrflError::config(format!("sigma = {sigma} must be > 0")));
    }
    m1.check_shape(m2)?;
    Ok(m1.distance(m2).powi(2) / (2.0 * sigma * sigma))
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoundInputs {
    pub ctx: RadiusContext,
    /// `‖δ_i‖`, one per attacker.
    pub delta_norms: Vec<f64>,
}

/// Upper bound on the KL divergence between the final-model distributions of
/// the backdoored and clean processes:
/// `2R Σ_i (p_i γ_i τ_i η_i (q_i/n_i) L_Z ‖δ_i‖)² / σ²_{t_adv} · Π (2Φ(ρ_t/σ_t) − 1)`.
pub fn theorem2_kl_bound(inputs: &BoundInputs) -> Result<f64> {
    let ctx = &inputs.ctx;
    if inputs.delta_norms.len() != ctx.r() {
        return Err(CrflError::config(format!(
            "{} trigger magnitudes for {} attackers",
            inputs.delta_norms.len(),
            ctx.r()
        )));
    }
    if inputs.delta_norms.iter().any(|d| !(*d >= 0.0)) {
        return Err(CrflError::config("trigger magnitudes must be >= 0"));
    }
    ctx.validate()?;
    let (prod, _) = ctx.contraction_product()?;
    let sum: f64 = ctx
        .attackers
        .iter()
        .zip(&inputs.delta_norms)
        .map(|(a, d)| (a.coefficient() * ctx.lz * d).powi(2))
        .sum();
    Ok(2.0 * ctx.r() as f64 * sum / ctx.sigma_t_adv.powi(2) * prod)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClosenessRow {
    pub round: usize,
    pub distance: f64,
    /// KL bound on the round-`t` models, for `t ≥ t_adv`.
    pub bound: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClosenessTrace {
    pub t_adv: usize,
    pub rows: Vec<ClosenessRow>,
}

impl ClosenessTrace {
    /// Least-squares slope of distance against round over `[from, to]`;
    /// `None` with fewer than two rounds in the window.
    pub fn slope(&self, from: usize, to: usize) -> Option<f64> {
        let pts: Vec<(f64, f64)> = self
            .rows
            .iter()
            .filter(|r| r.round >= from && r.round <= to)
            .map(|r| (r.round as f64, r.distance))
            .collect();
        least_squares_slope(&pts)
    }

    /// Slope over `[t_adv + 2, T]`.
    pub fn post_attack_slope(&self) -> Option<f64> {
        let last = self.rows.last()?.round;
        self.slope(self.t_adv + 2, last)
    }

    pub fn non_increasing_after_attack(&self) -> bool {
        self.post_attack_slope().is_none_or(|s| s <= 0.0)
    }
}

pub fn least_squares_slope(points: &[(f64, f64)]) -> Option<f64> {
    if points.len() < 2 {
        return None;
    }
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    Some(sxy / sxx)
}

/// Trains the backdoored process and its benign twin on identical random
/// streams and records the distance between their clipped, pre-noise global
/// models every round.
pub fn run_closeness_experiment(
    fed: &FederationConfig,
    clients: &[ClientDataset],
    attack: &AttackConfig,
    threads: Option<usize>,
) -> Result<ClosenessTrace> {
    if attack.t_adv >= fed.rounds {
        return Err(CrflError::config(format!(
            "closeness needs t_adv < T, got t_adv = {} and T = {}",
            attack.t_adv, fed.rounds
        )));
    }
    let opts = TrainOptions {
        threads,
        record_snapshots: true,
    };
    let clean = run_training_with(fed, clients, PlanSource::BenignTwin(attack), opts)?;
    let poisoned = run_training_with(fed, clients, PlanSource::Backdoor(attack), opts)?;

    let weights = &clean.traces[attack.t_adv - 1].effective_weights;
    let delta_norms = attack
        .attackers
        .iter()
        .map(|a| attack.pattern_for(a).magnitude())
        .collect::<Vec<_>>();

    let mut rows = Vec::with_capacity(fed.rounds);
    for (a, b) in clean.traces.iter().zip(&poisoned.traces) {
        let (Some(wa), Some(wb)) = (&a.global_params_snapshot, &b.global_params_snapshot) else {
            unreachable!("snapshots requested");
        };
        let bound = if a.round >= attack.t_adv {
            let mut truncated = fed.clone();
            truncated.rounds = a.round;
            let sigma_final = fed.sigma.at(a.round);
            let ctx = RadiusContext::from_federation(&truncated, attack, weights, sigma_final)?;
            Some(theorem2_kl_bound(&BoundInputs {
                ctx,
                delta_norms: delta_norms.clone(),
            })?)
        } else {
            None
        };
        rows.push(ClosenessRow {
            round: a.round,
            distance: wa.distance(wb),
            bound,
        });
    }
    Ok(ClosenessTrace {
        t_adv: attack.t_adv,
        rows,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StudyRow {
    pub ratio: f64,
    pub rounds: usize,
    pub rad: f64,
    pub saturated: bool,
}

/// Radius over a grid of `ρ/σ` ratios and horizons `T`, holding every other
/// field of `base` fixed. Every round after `t_adv` uses `σ = σ_{t_adv}` and
/// `ρ = ratio·σ`; horizons not beyond `t_adv` give an empty product.
pub fn rad_vs_t_study(
    p_a_lower: f64,
    p_b_upper: f64,
    ratios: &[f64],
    horizons: &[usize],
    base: &RadiusContext,
) -> Result<Vec<StudyRow>> {
    if ratios.is_empty() || horizons.is_empty() {
        return Err(CrflError::config("study grids must be non-empty"));
    }
    let sigma = base.sigma_t_adv;
    let grid: Vec<(f64, usize)> = ratios
        .iter()
        .flat_map(|&r| horizons.iter().map(move |&t| (r, t)))
        .collect();
    grid.par_iter()
        .map(|&(ratio, rounds)| {
            let mut ctx = base.clone();
            let extra = rounds.saturating_sub(base.t_adv);
            ctx.schedule = vec![(ratio * sigma, sigma); extra];
            let r = calculate_radius(p_a_lower, p_b_upper, &ctx)?;
            Ok(StudyRow {
                ratio,
                rounds,
                rad: r.value,
                saturated: r.saturated,
            })
        })
        .collect()
}
