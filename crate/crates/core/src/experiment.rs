//! Training, evaluation and active-learning runs over a [`Dataset`].

use rand::seq::index::sample;
use thiserror::Error;

use crate::active::{self, active_loop, ActiveError, ActiveTask, CycleRecord, GroupSampler, Policy};
use crate::config::{Arm, ConfigError, ExperimentConfig, Task};
use crate::dataset::{DataError, Dataset, Sample};
use crate::distortion::build_distortion_group;
use crate::crop::generate_ranked_crops;
use crate::group::RankedGroup;
use crate::image::Image;
use crate::metrics::{self, MetricsError, Report};
use crate::nn::Network;
use crate::optim::{sgd_step, SgdConfig};
use crate::ranking::{multitask_loss, ComparabilityLabels, MiniBatch, RankingError, RegressionTarget};
use crate::seeds::{self, Stream};
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("non-finite {what} at step {step}")]
    NonFinite { step: usize, what: &'static str },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Ranking(#[from] RankingError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Active(#[from] ActiveError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = ExperimentError> = std::result::Result<T, E>;

impl ExperimentError {
    /// Process exit status: 2 configuration, 3 data, 4 numeric failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) | Self::Active(ActiveError::Config(_)) => 2,
            Self::Tensor(TensorError::InvalidConfig(_)) | Self::Ranking(RankingError::InvalidConfig(_)) => 2,
            Self::NonFinite { .. } | Self::Metrics(MetricsError::NonFinite(_)) => 4,
            _ => 3,
        }
    }
}

/// One row of the training audit log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLog {
    pub step: usize,
    pub regression: f64,
    pub ranking: f64,
    pub total: f64,
    pub active_pairs: usize,
}

pub fn init_network(cfg: &ExperimentConfig, index: u64) -> Result<Network> {
    Ok(Network::new(cfg.network.clone(), seeds::derive(cfg.seed, Stream::Init, index))?)
}

fn stack(images: &[&Image]) -> Result<Tensor> {
    let first = images[0];
    let item = [first.channels(), first.height(), first.width()];
    let mut data = Vec::with_capacity(images.len() * item.iter().product::<usize>());
    for img in images {
        data.extend(img.to_planar());
    }
    let mut shape = vec![images.len()];
    shape.extend(item);
    Ok(Tensor::new(shape, data)?)
}

/// Whether training draws ranked groups alongside the labeled images.
pub fn uses_ranking(cfg: &ExperimentConfig) -> bool {
    cfg.arm != Arm::Baseline && cfg.ranking.tradeoff > 0.0
}

/// SGD on the labeled ids (indices into `data.labeled`), plus ranked groups
/// from `data.groups` when [`uses_ranking`]. `run` separates the batch
/// streams of repeated trainings within one experiment.
pub fn train(
    cfg: &ExperimentConfig,
    data: &Dataset,
    net: &mut Network,
    labeled: &[usize],
    steps: usize,
    run: u64,
) -> Result<Vec<StepLog>> {
    if labeled.is_empty() {
        return Err(DataError::Mismatch("no labeled images to train on".into()).into());
    }
    let sgd = SgdConfig {
        total_steps: steps,
        ..cfg.sgd
    };
    let ranking = uses_ranking(cfg) && !data.groups.is_empty();
    let batch_seed = seeds::derive(cfg.seed, Stream::Batches, run);
    let mut log = Vec::with_capacity(steps);
    for step in 0..steps {
        let mut rng = seeds::rng(seeds::derive_seed(batch_seed, step as u64));
        let n_lab = cfg.batch_labeled.min(labeled.len());
        let picked: Vec<&Sample> = sample(&mut rng, labeled.len(), n_lab)
            .into_iter()
            .map(|i| &data.labeled[labeled[i]])
            .collect();
        let mut images: Vec<&Image> = picked.iter().map(|s| &s.image).collect();
        let mut targets: Vec<Option<RegressionTarget>> = picked.iter().map(|s| Some(s.target.clone())).collect();
        let mut group_of: Vec<Option<usize>> = vec![None; n_lab];
        let mut phi = vec![0.0; n_lab];
        if ranking {
            let n_groups = cfg.batch_groups.min(data.groups.len());
            for (g, gi) in sample(&mut rng, data.groups.len(), n_groups).into_iter().enumerate() {
                let group = &data.groups[gi];
                images.extend(group.images.iter());
                targets.extend(std::iter::repeat_n(None, group.len()));
                group_of.extend(std::iter::repeat_n(Some(g), group.len()));
                phi.extend(&group.phi);
            }
        }
        let labels = ComparabilityLabels::from_groups(&group_of, &phi)?;
        let batch = MiniBatch::new(stack(&images)?, targets, labels)?;
        let out = multitask_loss(&batch, net, &cfg.ranking)?;
        if !out.total.is_finite() {
            return Err(ExperimentError::NonFinite { step, what: "loss" });
        }
        if cfg.clip_norm > 0.0 {
            clip_gradients(net, cfg.clip_norm);
        }
        sgd_step(net.params_mut(), &sgd, step)?;
        log.push(StepLog {
            step,
            regression: out.regression,
            ranking: out.ranking,
            total: out.total,
            active_pairs: out.active_pairs,
        });
    }
    if net.params().iter().any(|p| p.value.data().iter().any(|v| !v.is_finite())) {
        return Err(ExperimentError::NonFinite {
            step: steps.saturating_sub(1),
            what: "parameter",
        });
    }
    Ok(log)
}

fn clip_gradients(net: &mut Network, max_norm: f64) {
    let norm = net.params().flat_grad().iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm {
        let scale = max_norm / norm;
        for p in net.params_mut().iter_mut() {
            p.value.grad_mut().iter_mut().for_each(|g| *g *= scale);
        }
    }
}

/// Ranking-head outputs (the predicted count or quality), in input order.
pub fn predict(net: &Network, images: &[&Image]) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(50) {
        out.extend(net.predict(&stack(chunk)?)?.ranking);
    }
    if out.iter().any(|v| !v.is_finite()) {
        return Err(MetricsError::NonFinite("prediction").into());
    }
    Ok(out)
}

/// Predictions and metrics over a set of samples.
pub fn evaluate(net: &Network, samples: &[Sample]) -> Result<(Vec<f64>, Report)> {
    let images: Vec<&Image> = samples.iter().map(|s| &s.image).collect();
    let pred = predict(net, &images)?;
    let truth: Vec<f64> = samples.iter().map(|s| s.value).collect();
    let report = metrics::report(&truth, &pred)?;
    Ok((pred, report))
}

/// Fresh ranked groups for certainty estimates.
pub struct Sampler<'a>(pub &'a ExperimentConfig);

impl GroupSampler for Sampler<'_> {
    fn groups(&self, img: &Image, count: usize, seed: u64) -> active::Result<Vec<RankedGroup>> {
        let cfg = self.0;
        (0..count)
            .map(|g| {
                let s = seeds::derive_seed(seed, g as u64);
                match cfg.task {
                    Task::Counting => generate_ranked_crops(img, &cfg.crop, s, 0)
                        .map(|r| r.0)
                        .map_err(|e| ActiveError::Task(e.to_string())),
                    Task::Quality => {
                        let kind = cfg.distortions[g % cfg.distortions.len()];
                        build_distortion_group(img, kind, cfg.levels, s, 0).map_err(|e| ActiveError::Task(e.to_string()))
                    }
                }
            })
            .collect()
    }
}

/// Adapts the experiment to the active-learning loop: the labeled split is
/// the pool, the test split is the evaluation set.
pub struct ActiveRun<'a> {
    pub cfg: &'a ExperimentConfig,
    pub data: &'a Dataset,
    pub net: Network,
}

impl ActiveTask for ActiveRun<'_> {
    fn pool_size(&self) -> usize {
        self.data.labeled.len()
    }

    fn train(&mut self, labeled: &[usize], cycle: usize, warm: bool) -> active::Result<()> {
        if !warm {
            self.net = init_network(self.cfg, 0).map_err(|e| ActiveError::Task(e.to_string()))?;
        }
        // Same set, same batches: the order of acquisition must not matter.
        let mut ids = labeled.to_vec();
        ids.sort_unstable();
        train(self.cfg, self.data, &mut self.net, &ids, self.cfg.cycle_steps, 1 + cycle as u64)
            .map(|_| ())
            .map_err(|e| ActiveError::Task(e.to_string()))
    }

    fn evaluate(&mut self) -> active::Result<crate::metrics::Report> {
        evaluate(&self.net, &self.data.test)
            .map(|r| r.1)
            .map_err(|e| ActiveError::Task(e.to_string()))
    }

    fn certainty(&mut self, id: usize, seed: u64) -> active::Result<f64> {
        active::certainty(
            &self.net,
            &self.data.labeled[id].image,
            &Sampler(self.cfg),
            self.cfg.active.pairs,
            seed,
        )
    }
}

/// The initial labeled ids: a seeded random subset of the pool, sorted.
pub fn initial_labeled(cfg: &ExperimentConfig) -> Vec<usize> {
    let mut rng = seeds::rng(seeds::derive(cfg.seed, Stream::Split, 0));
    let mut ids = sample(&mut rng, cfg.labeled, cfg.initial_count()).into_vec();
    ids.sort_unstable();
    ids
}

/// Runs the loop for one policy. Both policies share the initial set, the
/// initialisation and the batch streams.
pub fn run_active(cfg: &ExperimentConfig, data: &Dataset, policy: Policy) -> Result<Vec<CycleRecord>> {
    let mut acfg = cfg.active;
    acfg.policy = policy;
    acfg.per_cycle = cfg.per_cycle_count();
    let mut task = ActiveRun {
        cfg,
        data,
        net: init_network(cfg, 0)?,
    };
    Ok(active_loop(&mut task, &initial_labeled(cfg), &acfg, cfg.seed)?)
}

/// Trains the configured arm on the whole labeled split.
pub fn train_arm(cfg: &ExperimentConfig, data: &Dataset) -> Result<(Network, Vec<StepLog>)> {
    if cfg.arm == Arm::Active {
        return Err(ConfigError::Invalid("the active arm is run with the `active` command".into()).into());
    }
    let mut net = init_network(cfg, 0)?;
    let ids: Vec<usize> = (0..data.labeled.len()).collect();
    let log = train(cfg, data, &mut net, &ids, cfg.sgd.total_steps, 0)?;
    Ok((net, log))
}
