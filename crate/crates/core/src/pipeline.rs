//! End-to-end runs driven by a [`RunConfig`]: data preparation, training,
//! certification, parameter sweeps and the coupled closeness run.

use std::fmt;
use std::str::FromStr;

use log::info;
use rayon::prelude::*;

use crate::analysis::{run_closeness_experiment, ClosenessTrace};
use crate::attack::{attack_success_rate, AttackConfig};
use crate::certify::{
    build_ensemble, certification_curve, certify_all, critical_radius, smoothed_accuracy,
    CertificationResult, CurvePoint, RadiusContext,
};
use crate::config::{
    AttackBlock, DatasetBlock, RunConfig, TestSelection, MNIST_TEST_IMAGES, MNIST_TEST_LABELS,
    MNIST_TRAIN_IMAGES, MNIST_TRAIN_LABELS,
};
use crate::dataset::{
    generate_synthetic, load_mnist_idx, partition_iid, ClientDataset, LabeledSample,
};
use crate::engine::{
    run_training_with, Aggregation, FederationConfig, PlanSource, RoundTrace, TrainOptions,
    TrainingOutput,
};
use crate::error::{CrflError, Result};
use crate::model::{accuracy, ModelParams};
use crate::rng::{self, label};

#[derive(Debug, Clone)]
pub struct Data {
    pub train: Vec<LabeledSample>,
    pub test: Vec<LabeledSample>,
}

pub fn load_data(cfg: &RunConfig) -> Result<Data> {
    match &cfg.dataset {
        DatasetBlock::Mnist { dir, train_cap } => {
            let mut train =
                load_mnist_idx(&dir.join(MNIST_TRAIN_IMAGES), &dir.join(MNIST_TRAIN_LABELS))?;
            let test = load_mnist_idx(&dir.join(MNIST_TEST_IMAGES), &dir.join(MNIST_TEST_LABELS))?;
            if let Some(cap) = train_cap {
                train.truncate(*cap);
            }
            Ok(Data { train, test })
        }
        DatasetBlock::Synthetic {
            n_train,
            n_test,
            dim,
            classes,
            separation,
        } => {
            let seed = rng::derive_seed(cfg.master_seed, label::SYNTHETIC, 0, 0);
            let mut all = generate_synthetic(n_train + n_test, *dim, *classes, *separation, seed)?;
            let test = all.split_off(*n_train);
            Ok(Data { train: all, test })
        }
    }
}

/// The evaluation subset described by the certify block.
pub fn select_test(cfg: &RunConfig, test: &[LabeledSample]) -> Vec<LabeledSample> {
    let cap = match cfg.certify.test_cap {
        Some(cap) if cap < test.len() => cap,
        _ => return test.to_vec(),
    };
    match cfg.certify.test_selection {
        TestSelection::First => test[..cap].to_vec(),
        TestSelection::Random => {
            let mut stream = rng::derive_stream(cfg.master_seed, label::TEST_SELECTION, 0, 0);
            let mut idx = rand::seq::index::sample(&mut stream, test.len(), cap).into_vec();
            idx.sort_unstable();
            idx.into_iter().map(|i| test[i].clone()).collect()
        }
    }
}

/// Everything a run needs once the data is in memory.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub fed: FederationConfig,
    pub clients: Vec<ClientDataset>,
    pub attack: Option<AttackConfig>,
    pub test: Vec<LabeledSample>,
    pub classes: usize,
}

pub fn prepare(cfg: &RunConfig, data: Data) -> Result<Prepared> {
    cfg.validate()?;
    let dim = data.train.first().map(LabeledSample::dim).unwrap_or(0);
    if data.test.iter().any(|s| s.dim() != dim) {
        return Err(CrflError::Consistency(
            "train and test feature dimensions differ".into(),
        ));
    }
    let classes = 1 + data
        .train
        .iter()
        .chain(&data.test)
        .map(|s| s.label)
        .max()
        .unwrap_or(0);
    let test = select_test(cfg, &data.test);
    let seed = rng::derive_seed(cfg.master_seed, label::PARTITION, 0, 0);
    let part = partition_iid(
        data.train,
        cfg.federation.clients,
        cfg.federation.weights,
        seed,
    )?;
    let fed = cfg.federation.build(part.weights, cfg.master_seed);
    let attack = cfg.attack.as_ref().map(AttackBlock::build).transpose()?;
    if let Some(a) = &attack {
        a.validate(&fed, dim)?;
    }
    Ok(Prepared {
        fed,
        clients: part.clients,
        attack,
        test,
        classes,
    })
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub output: TrainingOutput,
    pub clean_accuracy: f64,
    pub attack_success_rate: Option<f64>,
}

pub fn train(prep: &Prepared, threads: Option<usize>) -> Result<TrainReport> {
    let source = prep
        .attack
        .as_ref()
        .map_or(PlanSource::Benign, PlanSource::Backdoor);
    let opts = TrainOptions {
        threads,
        record_snapshots: false,
    };
    let mut output = run_training_with(&prep.fed, &prep.clients, source, opts)?;
    if output.params.classes() < prep.classes {
        // a class seen only in the test split still needs a (zero) row
        let mut padded = ModelParams::zeros(output.params.dim(), prep.classes);
        for j in 0..output.params.dim() {
            for c in 0..output.params.classes() {
                padded.as_mut_slice()[j * prep.classes + c] = output.params.get(j, c);
            }
        }
        output.params = padded;
    }
    let clean_accuracy = accuracy(&output.params, &prep.test);
    let attack_success_rate = prep
        .attack
        .as_ref()
        .map(|a| attack_success_rate(&output.params, &prep.test, &a.pattern))
        .transpose()?;
    Ok(TrainReport {
        output,
        clean_accuracy,
        attack_success_rate,
    })
}

/// The attack the certificate is stated against: the configured one, or the
/// default threat model when training was benign.
pub fn threat_model(cfg: &RunConfig) -> Result<AttackConfig> {
    cfg.attack.clone().unwrap_or_default().build()
}

/// Aggregation weights in force at `t_adv`: `p_i` under FedAvg, the recorded
/// effective weights under robust aggregation.
pub fn weights_at_t_adv(
    fed: &FederationConfig,
    attack: &AttackConfig,
    traces: Option<&[RoundTrace]>,
) -> Result<Vec<f64>> {
    match fed.aggregation {
        Aggregation::FedAvg => Ok(fed.weights.clone()),
        Aggregation::Rfa => {
            let tr = traces
                .and_then(|t| t.iter().find(|r| r.round == attack.t_adv))
                .ok_or_else(|| {
                    CrflError::config(
                        "robust aggregation needs the round trace at t_adv to certify",
                    )
                })?;
            if tr.effective_weights.len() != fed.client_count() {
                return Err(CrflError::Consistency(
                    "round trace weights do not match the client count".into(),
                ));
            }
            Ok(tr.effective_weights.clone())
        }
    }
}

#[derive(Debug, Clone)]
pub struct CertifyReport {
    pub ctx: RadiusContext,
    pub results: Vec<CertificationResult>,
    pub curve: Vec<CurvePoint>,
    pub critical_radius: f64,
    pub smoothed_accuracy: f64,
}

pub fn certify(
    cfg: &RunConfig,
    prep: &Prepared,
    params: &ModelParams,
    traces: Option<&[RoundTrace]>,
) -> Result<CertifyReport> {
    if params.dim() != prep.clients[0].dim() || params.classes() != prep.classes {
        return Err(CrflError::DimensionMismatch {
            expected: format!("{}x{} parameters", prep.clients[0].dim(), prep.classes),
            actual: format!("{}x{}", params.dim(), params.classes()),
        });
    }
    let attack = threat_model(cfg)?;
    attack.validate(&prep.fed, params.dim())?;
    let weights = weights_at_t_adv(&prep.fed, &attack, traces)?;
    let ctx = RadiusContext::from_federation(&prep.fed, &attack, &weights, cfg.certify.sigma_t)?;
    let seed = rng::derive_seed(cfg.master_seed, label::SMOOTHING, 0, 0);
    let ensemble = build_ensemble(params, cfg.certify.sigma_t, cfg.certify.m, seed)?;
    let results = certify_all(&prep.test, &ensemble, &ctx, cfg.certify.alpha)?;
    let curve = certification_curve(&results, &cfg.certify.r_grid)?;
    Ok(CertifyReport {
        critical_radius: critical_radius(&results),
        smoothed_accuracy: smoothed_accuracy(&results),
        ctx,
        results,
        curve,
    })
}

/// Train then certify in one go.
pub fn run(
    cfg: &RunConfig,
    threads: Option<usize>,
) -> Result<(Prepared, TrainReport, CertifyReport)> {
    let prep = prepare(cfg, load_data(cfg)?)?;
    let trained = train(&prep, threads)?;
    let cert = certify(
        cfg,
        &prep,
        &trained.output.params,
        Some(&trained.output.traces),
    )?;
    Ok((prep, trained, cert))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepAxis {
    Sigma,
    R,
    Gamma,
    PoisonRatio,
    N,
    T,
}

impl SweepAxis {
    pub const ALL: [SweepAxis; 6] = [
        SweepAxis::Sigma,
        SweepAxis::R,
        SweepAxis::Gamma,
        SweepAxis::PoisonRatio,
        SweepAxis::N,
        SweepAxis::T,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::Sigma => "sigma",
            SweepAxis::R => "R",
            SweepAxis::Gamma => "gamma",
            SweepAxis::PoisonRatio => "poison_ratio",
            SweepAxis::N => "N",
            SweepAxis::T => "T",
        }
    }

    /// `cfg` with this axis set to `value`. `sigma` sets both the training
    /// noise and the smoothing noise.
    pub fn apply(self, cfg: &RunConfig, value: f64) -> Result<RunConfig> {
        let mut out = cfg.clone();
        let count = |v: f64| -> Result<usize> {
            if v >= 1.0 && v.fract() == 0.0 && v <= u32::MAX as f64 {
                Ok(v as usize)
            } else {
                Err(CrflError::config(format!(
                    "{} sweep needs positive integers, got {v}",
                    self.name()
                )))
            }
        };
        fn attack(out: &mut RunConfig, axis: SweepAxis) -> Result<&mut AttackBlock> {
            out.attack
                .as_mut()
                .ok_or_else(|| CrflError::config(format!("{axis} sweep needs an attack block")))
        }
        match self {
            SweepAxis::Sigma => {
                if !(value > 0.0) {
                    return Err(CrflError::config("sigma sweep values must be > 0"));
                }
                out.federation.sigma = crate::engine::AffineSchedule::constant(value);
                out.certify.sigma_t = value;
            }
            SweepAxis::R => attack(&mut out, self)?.attackers = count(value)?,
            SweepAxis::Gamma => attack(&mut out, self)?.gamma = value,
            SweepAxis::PoisonRatio => {
                let batch = out.federation.batch_size as f64;
                let q = (value * batch).round();
                if !(q >= 1.0 && q <= batch) || ((q / batch) - value).abs() > 1e-9 {
                    return Err(CrflError::config(format!(
                        "poison ratio {value} is not a multiple of 1/{batch} within (0, 1]"
                    )));
                }
                attack(&mut out, self)?.q_b = q as usize;
            }
            SweepAxis::N => out.federation.clients = count(value)?,
            SweepAxis::T => out.federation.rounds = count(value)?,
        }
        out.master_seed = self.seed(cfg.master_seed, value);
        out.validate()?;
        Ok(out)
    }

    /// Seed of the run at `value`, derived from the master seed, the axis
    /// and the value.
    pub fn seed(self, master_seed: u64, value: f64) -> u64 {
        rng::derive_seed(
            master_seed,
            &format!("{}/{}", label::SWEEP, self.name()),
            value.to_bits(),
            0,
        )
    }
}

impl fmt::Display for SweepAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SweepAxis {
    type Err = CrflError;

    fn from_str(s: &str) -> Result<Self> {
        SweepAxis::ALL
            .into_iter()
            .find(|a| a.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| {
                let names: Vec<_> = SweepAxis::ALL.iter().map(|a| a.name()).collect();
                CrflError::config(format!(
                    "unknown sweep axis {s:?}; expected one of {}",
                    names.join(", ")
                ))
            })
    }
}

#[derive(Debug, Clone)]
pub struct SweepPoint {
    pub value: f64,
    pub seed: u64,
    pub train: TrainReport,
    pub cert: CertifyReport,
}

/// One full train-and-certify run per value. Runs are independent and may
/// execute in parallel; each keeps its own deterministic streams.
pub fn sweep(
    cfg: &RunConfig,
    axis: SweepAxis,
    values: &[f64],
    threads: Option<usize>,
) -> Result<Vec<SweepPoint>> {
    if values.is_empty() {
        return Err(CrflError::config("sweep needs at least one value"));
    }
    let configs = values
        .iter()
        .map(|&v| axis.apply(cfg, v).map(|c| (v, c)))
        .collect::<Result<Vec<_>>>()?;
    let run_one = |(value, c): &(f64, RunConfig)| -> Result<SweepPoint> {
        info!("sweep {axis} = {value}");
        let (_, train, cert) = run(c, Some(1))?;
        Ok(SweepPoint {
            value: *value,
            seed: c.master_seed,
            train,
            cert,
        })
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.unwrap_or(0))
        .build()
        .map_err(|e| CrflError::config(format!("thread pool: {e}")))?;
    pool.install(|| configs.par_iter().map(run_one).collect())
}

/// Coupled benign/backdoored run described by the attack block.
pub fn closeness(cfg: &RunConfig, threads: Option<usize>) -> Result<ClosenessTrace> {
    if cfg.attack.is_none() {
        return Err(CrflError::config("closeness needs an attack block"));
    }
    let prep = prepare(cfg, load_data(cfg)?)?;
    let attack = prep.attack.as_ref().expect("attack block present");
    run_closeness_experiment(&prep.fed, &prep.clients, attack, threads)
}
