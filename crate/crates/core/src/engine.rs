//! Federated averaging with server-side clipping and Gaussian perturbation.
//!
//! Each round: broadcast the noisy global model, run `τ_i` local SGD steps
//! per client (in parallel), aggregate (FedAvg or RFA), clip to `ρ_t`, and add
//! `N(0, σ_t² I)` noise for every round except the last. The output is the
//! clipped, noise-free model of round `T`.
//!
//! All randomness comes from [`crate::rng`] streams keyed by
//! `(master_seed, label, client, round)`, so results are bitwise identical
//! for any worker-thread count.

use log::warn;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attack::{
    benign_twin_plan, build_poison_plan, compose_poisoned_batch_with, AttackConfig, BatchPoison,
    PoisonPlan,
};
use crate::dataset::{cap_input_norm, ClientDataset};
use crate::error::{CrflError, Result};
use crate::model::{gradient, param_l2_norm, Batch, ModelParams};
use crate::rng::{self, label, Stream};

/// Learning rates above this trigger a warning; a loose smoothness heuristic
/// for softmax regression, not an enforced bound.
pub const ETA_WARN_THRESHOLD: f64 = 0.25;

/// `a·t + b`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AffineSchedule {
    pub slope: f64,
    pub intercept: f64,
}

impl AffineSchedule {
    pub fn constant(value: f64) -> Self {
        AffineSchedule {
            slope: 0.0,
            intercept: value,
        }
    }

    pub fn at(&self, round: usize) -> f64 {
        self.slope * round as f64 + self.intercept
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    FedAvg,
    Rfa,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RfaParams {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for RfaParams {
    fn default() -> Self {
        RfaParams {
            tol: 1e-6,
            max_iter: 100,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClientParams {
    pub eta: f64,
    pub tau: usize,
    pub batch_size: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FederationConfig {
    pub rounds: usize,
    pub clients: Vec<ClientParams>,
    /// Aggregation weights `p_i`.
    pub weights: Vec<f64>,
    pub rho: AffineSchedule,
    /// Training noise `σ_t` for `t < T`.
    pub sigma: AffineSchedule,
    pub aggregation: Aggregation,
    pub rfa: RfaParams,
    pub master_seed: u64,
    /// Project every input (including triggered ones) onto the unit l2 ball.
    pub input_norm_cap: bool,
}

impl FederationConfig {
    /// All clients share `eta`, `tau` and `batch_size`.
    #[allow(clippy::too_many_arguments)]
    pub fn shared(
        rounds: usize,
        weights: Vec<f64>,
        eta: f64,
        tau: usize,
        batch_size: usize,
        rho: AffineSchedule,
        sigma: AffineSchedule,
        master_seed: u64,
    ) -> Self {
        let clients = vec![
            ClientParams {
                eta,
                tau,
                batch_size
            };
            weights.len()
        ];
        FederationConfig {
            rounds,
            clients,
            weights,
            rho,
            sigma,
            aggregation: Aggregation::FedAvg,
            rfa: RfaParams::default(),
            master_seed,
            input_norm_cap: false,
        }
    }

    pub fn client_count(&self) -> usize {
        self.clients.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.rounds == 0 {
            return Err(CrflError::config("round count T must be >= 1"));
        }
        if self.clients.is_empty() || self.clients.len() != self.weights.len() {
            return Err(CrflError::config(format!(
                "{} client parameter sets but {} weights",
                self.clients.len(),
                self.weights.len()
            )));
        }
        if self.weights.iter().any(|&p| !(p >= 0.0)) {
            return Err(CrflError::config("aggregation weights must be >= 0"));
        }
        let total: f64 = self.weights.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(CrflError::config(format!(
                "aggregation weights sum to {total}, expected 1"
            )));
        }
        for (i, c) in self.clients.iter().enumerate() {
            if c.tau == 0 || c.batch_size == 0 {
                return Err(CrflError::config(format!(
                    "client {i}: tau and batch size must be >= 1"
                )));
            }
            if !(c.eta >= 0.0 && c.eta.is_finite()) {
                return Err(CrflError::config(format!("client {i}: eta must be >= 0")));
            }
        }
        for t in 1..=self.rounds {
            if !(self.rho.at(t) > 0.0) {
                return Err(CrflError::config(format!("rho_{t} must be > 0")));
            }
            if t < self.rounds && !(self.sigma.at(t) >= 0.0) {
                return Err(CrflError::config(format!("sigma_{t} must be >= 0")));
            }
        }
        if self.aggregation == Aggregation::Rfa && !(self.rfa.tol > 0.0 && self.rfa.max_iter >= 1) {
            return Err(CrflError::config("RFA needs tol > 0 and max_iter >= 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundTrace {
    pub round: usize,
    pub pre_clip_norm: f64,
    pub post_clip_norm: f64,
    /// Seed of the server noise stream (recorded even when no noise is added).
    pub noise_seed: u64,
    /// Clipped model before noise, when snapshots are requested.
    pub global_params_snapshot: Option<ModelParams>,
    /// Weight each client's point carried in the aggregate (`p_i` under
    /// FedAvg, the final Weiszfeld weights under RFA).
    pub effective_weights: Vec<f64>,
    pub noise_added: bool,
}

#[derive(Debug, Clone)]
pub struct TrainingOutput {
    pub params: ModelParams,
    pub traces: Vec<RoundTrace>,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct TrainOptions {
    /// Worker threads for the client phase; `None` uses the global pool.
    pub threads: Option<usize>,
    pub record_snapshots: bool,
}

/// `batch_size` distinct indices below `n`, in draw order.
pub fn draw_batch_indices<R: Rng + ?Sized>(
    n: usize,
    batch_size: usize,
    stream: &mut R,
) -> Result<Vec<usize>> {
    if batch_size == 0 || batch_size > n {
        return Err(CrflError::config(format!(
            "batch size {batch_size} must be within 1..={n} (local dataset size)"
        )));
    }
    Ok(rand::seq::index::sample(stream, n, batch_size).into_vec())
}

/// `tau` plain SGD steps from `init`. When `poison` is given every batch has
/// `q_b` triggered samples.
pub fn local_sgd(
    init: &ModelParams,
    data: &ClientDataset,
    eta: f64,
    tau: usize,
    batch_size: usize,
    stream: &mut Stream,
    poison: Option<&BatchPoison<'_>>,
) -> Result<ModelParams> {
    if tau == 0 {
        return Err(CrflError::config("local iterations tau must be >= 1"));
    }
    if data.dim() != init.dim() {
        return Err(CrflError::DimensionMismatch {
            expected: format!("feature dimension {}", init.dim()),
            actual: format!("{}", data.dim()),
        });
    }
    let mut w = init.clone();
    for _ in 0..tau {
        let batch = match poison {
            Some(p) => compose_poisoned_batch_with(data, p, batch_size, stream)?,
            None => {
                let idx = draw_batch_indices(data.len(), batch_size, stream)?;
                Batch::new(
                    idx.iter()
                        .map(|&i| std::borrow::Cow::Borrowed(&data.samples()[i]))
                        .collect(),
                )?
            }
        };
        let g = gradient(&w, &batch);
        w.add_scaled(&g, -eta);
    }
    Ok(w)
}

/// `w / max(1, ‖w‖/ρ)`.
pub fn clip_params(params: &ModelParams, rho: f64) -> ModelParams {
    let norm = param_l2_norm(params);
    if norm <= rho {
        return params.clone();
    }
    let mut out = params.clone();
    out.scale(rho / norm);
    // rounding in the rescale can leave the norm an ulp above rho
    while param_l2_norm(&out) > rho {
        out.scale(1.0 - f64::EPSILON);
    }
    out
}

pub fn perturb_params<R: Rng + ?Sized>(
    params: &ModelParams,
    sigma: f64,
    stream: &mut R,
) -> ModelParams {
    let mut out = params.clone();
    if sigma == 0.0 {
        return out;
    }
    for w in out.as_mut_slice() {
        let z: f64 = StandardNormal.sample(stream);
        *w += sigma * z;
    }
    out
}

/// One client's contribution to aggregation.
#[derive(Debug, Clone)]
pub struct ClientUpdate {
    pub delta: ModelParams,
    pub weight: f64,
    pub scale: f64,
}

fn check_updates(base: &ModelParams, updates: &[ClientUpdate]) -> Result<()> {
    if updates.is_empty() {
        return Err(CrflError::config("aggregation needs at least one update"));
    }
    for u in updates {
        base.check_shape(&u.delta)?;
    }
    Ok(())
}

/// `base + Σ p_i γ_i δ_i`.
pub fn aggregate_fedavg(base: &ModelParams, updates: &[ClientUpdate]) -> Result<ModelParams> {
    check_updates(base, updates)?;
    let total: f64 = updates.iter().map(|u| u.weight).sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(CrflError::config(format!(
            "aggregation weights sum to {total}, expected 1"
        )));
    }
    let mut out = base.clone();
    for u in updates {
        out.add_scaled(&u.delta, u.weight * u.scale);
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct RfaOutcome {
    pub params: ModelParams,
    pub iterations: usize,
    pub converged: bool,
    /// Normalised Weiszfeld weights of the last iteration; the aggregate is
    /// `Σ β_i x_i` up to the final step.
    pub effective_weights: Vec<f64>,
}

/// Weighted geometric median of the client models `base + γ_i δ_i` by
/// smoothed Weiszfeld iterations, started from the weighted mean.
pub fn aggregate_rfa(
    base: &ModelParams,
    updates: &[ClientUpdate],
    tol: f64,
    max_iter: usize,
) -> Result<RfaOutcome> {
    check_updates(base, updates)?;
    if !(tol > 0.0) || max_iter == 0 {
        return Err(CrflError::config("RFA needs tol > 0 and max_iter >= 1"));
    }
    let points: Vec<ModelParams> = updates
        .iter()
        .map(|u| {
            let mut x = base.clone();
            x.add_scaled(&u.delta, u.scale);
            x
        })
        .collect();
    let p: Vec<f64> = updates.iter().map(|u| u.weight).collect();
    let p_total: f64 = p.iter().sum();
    if !(p_total > 0.0) {
        return Err(CrflError::config("RFA weights must have a positive sum"));
    }

    let weighted_sum = |coef: &[f64]| {
        let total: f64 = coef.iter().sum();
        let mut v = ModelParams::zeros(base.dim(), base.classes());
        for (x, &c) in points.iter().zip(coef) {
            v.add_scaled(x, c / total);
        }
        v
    };

    let mut v = weighted_sum(&p);
    let mut beta = p.clone();
    let mut converged = false;
    let mut iterations = 0;
    for it in 1..=max_iter {
        iterations = it;
        for ((b, x), &pi) in beta.iter_mut().zip(&points).zip(&p) {
            *b = pi / v.distance(x).max(tol);
        }
        let next = weighted_sum(&beta);
        let moved = next.distance(&v);
        v = next;
        if moved < tol {
            converged = true;
            break;
        }
    }
    if !converged {
        warn!("RFA did not converge within {max_iter} iterations");
    }
    let total: f64 = beta.iter().sum();
    let effective_weights = beta.iter().map(|b| b / total).collect();
    Ok(RfaOutcome {
        params: v,
        iterations,
        converged,
        effective_weights,
    })
}

/// Which poisoning plan a training run follows.
#[derive(Debug, Clone, Copy)]
pub enum PlanSource<'a> {
    Benign,
    Backdoor(&'a AttackConfig),
    /// Clean counterpart of a backdoored run, for coupled experiments.
    BenignTwin(&'a AttackConfig),
}

impl PlanSource<'_> {
    fn plan(&self, round: usize) -> Option<PoisonPlan> {
        match self {
            PlanSource::Benign => None,
            PlanSource::Backdoor(a) => build_poison_plan(a, round),
            PlanSource::BenignTwin(a) => benign_twin_plan(a, round),
        }
    }
}

pub fn run_training(
    fed: &FederationConfig,
    clients: &[ClientDataset],
    attack: Option<&AttackConfig>,
) -> Result<TrainingOutput> {
    let source = attack.map_or(PlanSource::Benign, PlanSource::Backdoor);
    run_training_with(fed, clients, source, TrainOptions::default())
}

pub fn run_training_with(
    fed: &FederationConfig,
    clients: &[ClientDataset],
    source: PlanSource<'_>,
    opts: TrainOptions,
) -> Result<TrainingOutput> {
    match opts.threads {
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n.max(1))
                .build()
                .map_err(|e| CrflError::config(format!("thread pool: {e}")))?;
            pool.install(|| train_loop(fed, clients, source, opts))
        }
        None => train_loop(fed, clients, source, opts),
    }
}

fn validate_inputs(
    fed: &FederationConfig,
    clients: &[ClientDataset],
    source: PlanSource<'_>,
) -> Result<(usize, usize)> {
    fed.validate()?;
    if clients.len() != fed.client_count() {
        return Err(CrflError::config(format!(
            "config has {} clients but {} datasets were given",
            fed.client_count(),
            clients.len()
        )));
    }
    let dim = clients[0].dim();
    let classes = infer_classes(clients);
    for (i, (c, p)) in clients.iter().zip(&fed.clients).enumerate() {
        if c.dim() != dim {
            return Err(CrflError::Consistency(format!(
                "client {i} has dimension {} != {dim}",
                c.dim()
            )));
        }
        if p.batch_size > c.len() {
            return Err(CrflError::config(format!(
                "client {i}: batch size {} exceeds local dataset size {}",
                p.batch_size,
                c.len()
            )));
        }
        if p.eta > ETA_WARN_THRESHOLD {
            warn!("client {i}: eta = {} exceeds {ETA_WARN_THRESHOLD}; the 1/beta step-size condition may fail", p.eta);
        }
    }
    if let PlanSource::Backdoor(a) | PlanSource::BenignTwin(a) = source {
        a.validate(fed, dim)?;
        let max_target = a
            .attackers
            .iter()
            .map(|s| a.pattern_for(s).target_label())
            .max()
            .unwrap_or(0);
        return Ok((dim, classes.max(max_target + 1)));
    }
    Ok((dim, classes))
}

/// Class count shared by every client: one more than the largest label.
pub fn infer_classes(clients: &[ClientDataset]) -> usize {
    1 + clients
        .iter()
        .flat_map(|c| c.samples().iter().map(|s| s.label))
        .max()
        .unwrap_or(0)
}

fn train_loop(
    fed: &FederationConfig,
    clients: &[ClientDataset],
    source: PlanSource<'_>,
    opts: TrainOptions,
) -> Result<TrainingOutput> {
    let (dim, classes) = validate_inputs(fed, clients, source)?;

    let capped;
    let clients: &[ClientDataset] = if fed.input_norm_cap {
        capped = clients
            .iter()
            .map(|c| {
                let mut s = c.samples().to_vec();
                cap_input_norm(&mut s);
                ClientDataset::new(c.client_id, s)
            })
            .collect::<Result<Vec<_>>>()?;
        &capped
    } else {
        clients
    };

    let mut noisy_global = ModelParams::zeros(dim, classes);
    let mut traces = Vec::with_capacity(fed.rounds);
    let mut clipped = noisy_global.clone();

    for t in 1..=fed.rounds {
        let plan = source.plan(t);
        let updates = clients
            .par_iter()
            .enumerate()
            .map(|(i, data)| {
                let cp = fed.clients[i];
                let mut stream =
                    rng::derive_stream(fed.master_seed, label::CLIENT, i as u64, t as u64);
                let directive = plan.as_ref().and_then(|p| p.directive(i));
                let poison = directive.filter(|d| d.q_b > 0).map(|d| BatchPoison {
                    pattern: &d.pattern,
                    q_b: d.q_b,
                    relabel: d.relabel,
                    cap_inputs: fed.input_norm_cap,
                });
                let local = local_sgd(
                    &noisy_global,
                    data,
                    cp.eta,
                    cp.tau,
                    cp.batch_size,
                    &mut stream,
                    poison.as_ref(),
                )?;
                Ok(ClientUpdate {
                    delta: local.sub(&noisy_global),
                    weight: fed.weights[i],
                    scale: directive.map_or(1.0, |d| d.gamma),
                })
            })
            .collect::<Result<Vec<_>>>()?;

        let (aggregate, effective_weights) = match fed.aggregation {
            Aggregation::FedAvg => (
                aggregate_fedavg(&noisy_global, &updates)?,
                fed.weights.clone(),
            ),
            Aggregation::Rfa => {
                let out = aggregate_rfa(&noisy_global, &updates, fed.rfa.tol, fed.rfa.max_iter)?;
                (out.params, out.effective_weights)
            }
        };
        if !aggregate.is_finite() {
            return Err(CrflError::Divergence {
                round: t,
                message: "non-finite global parameters after aggregation".into(),
            });
        }

        let rho = fed.rho.at(t);
        let pre_clip_norm = param_l2_norm(&aggregate);
        clipped = clip_params(&aggregate, rho);
        let post_clip_norm = param_l2_norm(&clipped);

        let noise_seed = rng::derive_seed(fed.master_seed, label::SERVER_NOISE, 0, t as u64);
        let noise_added = t < fed.rounds;
        noisy_global = if noise_added {
            let mut stream = rng::derive_stream(fed.master_seed, label::SERVER_NOISE, 0, t as u64);
            perturb_params(&clipped, fed.sigma.at(t), &mut stream)
        } else {
            clipped.clone()
        };

        traces.push(RoundTrace {
            round: t,
            pre_clip_norm,
            post_clip_norm,
            noise_seed,
            global_params_snapshot: opts.record_snapshots.then(|| clipped.clone()),
            effective_weights,
            noise_added,
        });
    }

    Ok(TrainingOutput {
        params: clipped,
        traces,
    })
}
