//! Single-round, coordinated model-replacement backdoor.
//!
//! At round `t_adv` every attacker trains on batches in which `q_B` of the
//! `n_B` drawn samples carry the trigger, then scales its local update by
//! `γ`. In every other round attackers are indistinguishable from benign
//! clients, including their random streams.

use std::borrow::Cow;
use std::collections::BTreeMap;

use rand::Rng;

use crate::dataset::{
    apply_trigger, project_unit_ball, ClientDataset, LabeledSample, TriggerPattern,
};
use crate::engine::{draw_batch_indices, FederationConfig};
use crate::error::{CrflError, Result};
use crate::model::{predict, Batch, ModelParams};

#[derive(Debug, Clone, PartialEq)]
pub struct AttackerSpec {
    pub client_id: usize,
    pub gamma: f64,
    /// Triggered samples per local batch.
    pub q_b: usize,
    /// Overrides the shared pattern for this attacker.
    pub pattern: Option<TriggerPattern>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttackConfig {
    pub attackers: Vec<AttackerSpec>,
    pub t_adv: usize,
    pub pattern: TriggerPattern,
    /// When false, triggered samples keep their true label (feature-only
    /// backdoor, the setting covered by the data-Lipschitz constant).
    pub relabel: bool,
    /// Benign twin of a coupled run also scales the attackers' clean update
    /// by `γ` at `t_adv`.
    pub virtual_benign_scaling: bool,
}

impl AttackConfig {
    /// `count` attackers with ids `0..count`, all sharing `gamma`, `q_b` and
    /// `pattern`.
    pub fn uniform(
        count: usize,
        t_adv: usize,
        gamma: f64,
        q_b: usize,
        pattern: TriggerPattern,
    ) -> Self {
        AttackConfig {
            attackers: (0..count)
                .map(|client_id| AttackerSpec {
                    client_id,
                    gamma,
                    q_b,
                    pattern: None,
                })
                .collect(),
            t_adv,
            pattern,
            relabel: true,
            virtual_benign_scaling: false,
        }
    }

    pub fn count(&self) -> usize {
        self.attackers.len()
    }

    pub fn pattern_for<'a>(&'a self, spec: &'a AttackerSpec) -> &'a TriggerPattern {
        spec.pattern.as_ref().unwrap_or(&self.pattern)
    }

    pub fn validate(&self, fed: &FederationConfig, dim: usize) -> Result<()> {
        let n = fed.client_count();
        let r = self.attackers.len();
        if r == 0 || r > n {
            return Err(CrflError::config(format!(
                "attacker count {r} must be within 1..={n}"
            )));
        }
        if self.t_adv == 0 || self.t_adv > fed.rounds {
            return Err(CrflError::config(format!(
                "t_adv = {} must be within 1..={}",
                self.t_adv, fed.rounds
            )));
        }
        let mut ids: Vec<usize> = self.attackers.iter().map(|a| a.client_id).collect();
        ids.sort_unstable();
        ids.dedup();
        if ids.len() != r {
            return Err(CrflError::config("attacker ids must be distinct"));
        }
        for a in &self.attackers {
            let client = fed.clients.get(a.client_id).ok_or_else(|| {
                CrflError::config(format!("attacker id {} >= client count {n}", a.client_id))
            })?;
            if a.q_b == 0 || a.q_b > client.batch_size {
                return Err(CrflError::config(format!(
                    "attacker {}: q_B = {} must be within 1..={} (batch size)",
                    a.client_id, a.q_b, client.batch_size
                )));
            }
            if !(a.gamma >= 0.0 && a.gamma.is_finite()) {
                return Err(CrflError::config(format!(
                    "attacker {}: gamma must be >= 0",
                    a.client_id
                )));
            }
            if let Some(max) = self.pattern_for(a).max_index() {
                if max >= dim {
                    return Err(CrflError::config(format!(
                        "trigger index {max} out of range for dimension {dim}"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// How one client's batches are poisoned during a round, and how its update
/// is scaled. A directive with `q_b = 0` trains on clean batches.
#[derive(Debug, Clone, PartialEq)]
pub struct AttackerDirective {
    pub q_b: usize,
    pub gamma: f64,
    pub pattern: TriggerPattern,
    pub relabel: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoisonPlan {
    pub round: usize,
    pub directives: BTreeMap<usize, AttackerDirective>,
}

impl PoisonPlan {
    pub fn directive(&self, client_id: usize) -> Option<&AttackerDirective> {
        self.directives.get(&client_id)
    }
}

/// The backdoor plan for `round`: present only at `t_adv`.
pub fn build_poison_plan(attack: &AttackConfig, round: usize) -> Option<PoisonPlan> {
    if round != attack.t_adv {
        return None;
    }
    let directives = attack
        .attackers
        .iter()
        .map(|a| {
            (
                a.client_id,
                AttackerDirective {
                    q_b: a.q_b,
                    gamma: a.gamma,
                    pattern: attack.pattern_for(a).clone(),
                    relabel: attack.relabel,
                },
            )
        })
        .collect();
    Some(PoisonPlan { round, directives })
}

/// Plan for the benign twin of a coupled run: clean batches, with the
/// attackers' updates scaled by `γ` only under virtual benign scaling.
pub fn benign_twin_plan(attack: &AttackConfig, round: usize) -> Option<PoisonPlan> {
    if round != attack.t_adv || !attack.virtual_benign_scaling {
        return None;
    }
    let directives = attack
        .attackers
        .iter()
        .map(|a| {
            (
                a.client_id,
                AttackerDirective {
                    q_b: 0,
                    gamma: a.gamma,
                    pattern: attack.pattern_for(a).clone(),
                    relabel: attack.relabel,
                },
            )
        })
        .collect();
    Some(PoisonPlan { round, directives })
}

/// Triggering options for [`compose_poisoned_batch_with`].
#[derive(Debug, Clone, Copy)]
pub struct BatchPoison<'p> {
    pub pattern: &'p TriggerPattern,
    pub q_b: usize,
    pub relabel: bool,
    pub cap_inputs: bool,
}

fn trigger_sample(sample: &LabeledSample, poison: &BatchPoison<'_>) -> LabeledSample {
    let mut out = if poison.relabel {
        apply_trigger(sample, poison.pattern)
    } else {
        let mut s = sample.clone();
        poison.pattern.perturb_features(&mut s.features);
        s
    };
    if poison.cap_inputs {
        project_unit_ball(&mut out.features);
    }
    out
}

/// Draw `batch_size` samples without replacement and trigger the first `q_b`
/// of them. With `q_b = 0` the draw is identical to a clean batch from the
/// same stream.
pub fn compose_poisoned_batch_with<'a, R: Rng + ?Sized>(
    pool: &'a ClientDataset,
    poison: &BatchPoison<'_>,
    batch_size: usize,
    stream: &mut R,
) -> Result<Batch<'a>> {
    if poison.q_b > batch_size {
        return Err(CrflError::config(format!(
            "q_B = {} exceeds batch size {batch_size}",
            poison.q_b
        )));
    }
    let indices = draw_batch_indices(pool.len(), batch_size, stream)?;
    let samples = pool.samples();
    let batch = indices
        .iter()
        .enumerate()
        .map(|(k, &i)| {
            if k < poison.q_b {
                Cow::Owned(trigger_sample(&samples[i], poison))
            } else {
                Cow::Borrowed(&samples[i])
            }
        })
        .collect();
    Batch::new(batch)
}

pub fn compose_poisoned_batch<'a, R: Rng + ?Sized>(
    pool: &'a ClientDataset,
    pattern: &TriggerPattern,
    q_b: usize,
    batch_size: usize,
    stream: &mut R,
) -> Result<Batch<'a>> {
    let poison = BatchPoison {
        pattern,
        q_b,
        relabel: true,
        cap_inputs: false,
    };
    compose_poisoned_batch_with(pool, &poison, batch_size, stream)
}

pub fn scale_update(delta: &ModelParams, gamma: f64) -> ModelParams {
    let mut out = delta.clone();
    out.scale(gamma);
    out
}

/// Fraction of triggered test samples (true label ≠ target) predicted as the
/// target label.
pub fn attack_success_rate(
    params: &ModelParams,
    clean_test: &[LabeledSample],
    pattern: &TriggerPattern,
) -> Result<f64> {
    if clean_test.is_empty() {
        return Err(CrflError::config(
            "attack success rate needs a non-empty test set",
        ));
    }
    let target = pattern.target_label();
    let mut eligible = 0usize;
    let mut hits = 0usize;
    for s in clean_test.iter().filter(|s| s.label != target) {
        eligible += 1;
        let mut x = s.features.clone();
        pattern.perturb_features(&mut x);
        if predict(params, &x) == target {
            hits += 1;
        }
    }
    if eligible == 0 {
        return Ok(0.0);
    }
    Ok(hits as f64 / eligible as f64)
}
