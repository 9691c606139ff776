//! Certainty of a network on self-supervised ranked pairs, and the
//! pool-based labeling loop that spends labels where it is least certain.

use std::fmt;

use rand::seq::index::sample;
use thiserror::Error;

use crate::group::RankedGroup;
use crate::image::Image;
use crate::metrics::Report;
use crate::nn::Network;
use crate::seeds;
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error)]
pub enum ActiveError {
    #[error("invalid active-learning configuration: {0}")]
    Config(String),
    #[error("generator produced {got} comparable pairs, {need} needed")]
    NotEnoughPairs { need: usize, got: usize },
    #[error("unlabeled pool exhausted: {remaining} images left, {need} needed for cycle {cycle}")]
    PoolExhausted { cycle: usize, remaining: usize, need: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{0}")]
    Task(String),
}

pub type Result<T, E = ActiveError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Policy {
    Certainty,
    Random,
}

impl Policy {
    pub fn name(self) -> &'static str {
        match self {
            Policy::Certainty => "certainty",
            Policy::Random => "random",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "certainty" => Some(Policy::Certainty),
            "random" => Some(Policy::Random),
            _ => None,
        }
    }
}

impl fmt::Display for Policy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ActiveConfig {
    /// Ranked pairs sampled per image for the certainty estimate.
    pub pairs: usize,
    /// Train/score/select cycles.
    pub cycles: usize,
    /// Images labeled per cycle.
    pub per_cycle: usize,
    pub policy: Policy,
    /// Continue from the previous cycle's parameters instead of
    /// re-initialising.
    pub warm_start: bool,
}

impl Default for ActiveConfig {
    fn default() -> Self {
        Self {
            pairs: 100,
            cycles: 9,
            per_cycle: 50,
            policy: Policy::Certainty,
            warm_start: true,
        }
    }
}

impl ActiveConfig {
    pub fn validate(&self, pool: usize) -> Result<()> {
        if self.pairs == 0 || self.cycles == 0 || self.per_cycle == 0 {
            return Err(ActiveError::Config("pairs, cycles and per-cycle count must be positive".into()));
        }
        if self.per_cycle > pool {
            return Err(ActiveError::Config(format!(
                "cannot label {} images per cycle from a pool of {pool}",
                self.per_cycle
            )));
        }
        Ok(())
    }
}

/// Produces fresh ranked groups from one image.
pub trait GroupSampler {
    fn groups(&self, img: &Image, count: usize, seed: u64) -> Result<Vec<RankedGroup>>;
}

/// `K` comparable pairs `(lower, higher)`: indices into the flattened
/// members of `ceil(K / pairs-per-group)` fresh groups, drawn uniformly
/// without replacement from all their ordered pairs.
pub fn sample_pairs(
    img: &Image,
    sampler: &dyn GroupSampler,
    k: usize,
    seed: u64,
) -> Result<(Vec<Image>, Vec<(usize, usize)>)> {
    let probe = sampler.groups(img, 1, seeds::derive_seed(seed, 0))?;
    let per_group = probe.first().map_or(0, |g| g.ordered_pairs().len());
    if per_group == 0 {
        return Err(ActiveError::NotEnoughPairs { need: k, got: 0 });
    }
    let n_groups = k.div_ceil(per_group);
    let mut groups = probe;
    if n_groups > 1 {
        groups.extend(sampler.groups(img, n_groups - 1, seeds::derive_seed(seed, 1))?);
    }
    let mut images = Vec::new();
    let mut pairs = Vec::new();
    for g in groups {
        let base = images.len();
        pairs.extend(g.ordered_pairs().into_iter().map(|(i, j)| (base + i, base + j)));
        images.extend(g.images);
    }
    if pairs.len() < k {
        return Err(ActiveError::NotEnoughPairs {
            need: k,
            got: pairs.len(),
        });
    }
    let mut rng = seeds::rng(seeds::derive_seed(seed, 2));
    let mut picked: Vec<usize> = sample(&mut rng, pairs.len(), k).into_vec();
    picked.sort_unstable();
    Ok((images, picked.into_iter().map(|p| pairs[p]).collect()))
}

/// Fraction of sampled pairs whose scores are strictly in the right order.
/// Ties count as wrong, so a constant scorer has certainty 0.
pub fn certainty_from_scores(scores: &[f64], pairs: &[(usize, usize)]) -> f64 {
    if pairs.is_empty() {
        return 0.0;
    }
    let right = pairs.iter().filter(|&&(lo, hi)| scores[lo] < scores[hi]).count();
    right as f64 / pairs.len() as f64
}

/// Certainty with an arbitrary scoring function (one score per image).
pub fn certainty_with(
    score: impl Fn(&[Image]) -> Result<Vec<f64>>,
    img: &Image,
    sampler: &dyn GroupSampler,
    k: usize,
    seed: u64,
) -> Result<f64> {
    let (images, pairs) = sample_pairs(img, sampler, k, seed)?;
    let scores = score(&images)?;
    Ok(certainty_from_scores(&scores, &pairs))
}

/// Network scores of planar-stacked images (the ranking head).
pub fn network_scores(net: &Network, images: &[Image]) -> Result<Vec<f64>> {
    let Some(first) = images.first() else {
        return Ok(Vec::new());
    };
    let item = [first.channels(), first.height(), first.width()];
    let mut data = Vec::with_capacity(images.len() * item.iter().product::<usize>());
    for img in images {
        data.extend(img.to_planar());
    }
    let mut shape = vec![images.len()];
    shape.extend(item);
    Ok(net.predict(&Tensor::new(shape, data)?)?.ranking)
}

pub fn certainty(net: &Network, img: &Image, sampler: &dyn GroupSampler, k: usize, seed: u64) -> Result<f64> {
    certainty_with(|imgs| network_scores(net, imgs), img, sampler, k, seed)
}

/// What the loop needs from an experiment. Ids index the training pool.
pub trait ActiveTask {
    fn pool_size(&self) -> usize;
    /// Train on the labeled ids. `warm` keeps the current parameters,
    /// otherwise they are re-initialised first.
    fn train(&mut self, labeled: &[usize], cycle: usize, warm: bool) -> Result<()>;
    fn evaluate(&mut self) -> Result<Report>;
    fn certainty(&mut self, id: usize, seed: u64) -> Result<f64>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct CycleRecord {
    pub cycle: usize,
    pub labeled: usize,
    pub labeled_fraction: f64,
    pub policy: Policy,
    pub report: Report,
    /// Mean certainty over the pool scored after this cycle's training
    /// (certainty policy only; absent on the final cycle).
    pub mean_certainty: Option<f64>,
    pub selected: Vec<usize>,
}

/// `cfg.cycles` rounds of train → evaluate → select, followed by a last
/// train/evaluate on the final labeled set, so the history has
/// `cycles + 1` records.
pub fn active_loop(
    task: &mut dyn ActiveTask,
    initial: &[usize],
    cfg: &ActiveConfig,
    seed: u64,
) -> Result<Vec<CycleRecord>> {
    let total = task.pool_size();
    cfg.validate(total)?;
    if initial.is_empty() {
        return Err(ActiveError::Config("initial labeled set is empty".into()));
    }
    let mut in_d = vec![false; total];
    for &i in initial {
        if i >= total || in_d[i] {
            return Err(ActiveError::Config(format!("bad or repeated initial id {i}")));
        }
        in_d[i] = true;
    }
    let mut labeled: Vec<usize> = initial.to_vec();
    let mut history = Vec::with_capacity(cfg.cycles + 1);
    for cycle in 0..=cfg.cycles {
        task.train(&labeled, cycle, cfg.warm_start && cycle > 0)?;
        let report = task.evaluate()?;
        let mut record = CycleRecord {
            cycle,
            labeled: labeled.len(),
            labeled_fraction: labeled.len() as f64 / total as f64,
            policy: cfg.policy,
            report,
            mean_certainty: None,
            selected: Vec::new(),
        };
        if cycle == cfg.cycles {
            history.push(record);
            break;
        }
        let pool: Vec<usize> = (0..total).filter(|&i| !in_d[i]).collect();
        if pool.len() < cfg.per_cycle {
            return Err(ActiveError::PoolExhausted {
                cycle,
                remaining: pool.len(),
                need: cfg.per_cycle,
            });
        }
        let selected = match cfg.policy {
            Policy::Random => {
                let mut rng = seeds::rng(seeds::derive(seed, seeds::Stream::Selection, cycle as u64));
                let mut s: Vec<usize> = sample(&mut rng, pool.len(), cfg.per_cycle)
                    .into_iter()
                    .map(|p| pool[p])
                    .collect();
                s.sort_unstable();
                s
            }
            Policy::Certainty => {
                let cycle_seed = seeds::derive(seed, seeds::Stream::Certainty, cycle as u64);
                let mut scored = Vec::with_capacity(pool.len());
                for &id in &pool {
                    scored.push((task.certainty(id, seeds::derive_seed(cycle_seed, id as u64))?, id));
                }
                record.mean_certainty = Some(scored.iter().map(|s| s.0).sum::<f64>() / scored.len() as f64);
                select_least_certain(scored, cfg.per_cycle)
            }
        };
        for &i in &selected {
            in_d[i] = true;
        }
        labeled.extend(&selected);
        record.selected = selected;
        history.push(record);
    }
    Ok(history)
}

/// The `n` lowest certainties, ties broken by ascending id; returned in
/// selection order.
pub fn select_least_certain(mut scored: Vec<(f64, usize)>, n: usize) -> Vec<usize> {
    scored.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    scored.into_iter().take(n).map(|(_, id)| id).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crop::{generate_ranked_crops, CropGenConfig};
    use crate::nn::{LayerSpec, NetworkSpec};

    struct Crops(CropGenConfig);

    impl GroupSampler for Crops {
        fn groups(&self, img: &Image, count: usize, seed: u64) -> Result<Vec<RankedGroup>> {
            (0..count)
                .map(|i| {
                    generate_ranked_crops(img, &self.0, seeds::derive_seed(seed, i as u64), 0)
                        .map(|(g, _)| g)
                        .map_err(|e| ActiveError::Task(e.to_string()))
                })
                .collect()
        }
    }

    fn sampler() -> Crops {
        Crops(CropGenConfig {
            output_size: 8,
            ..CropGenConfig::default()
        })
    }

    fn gradient_image() -> Image {
        let data = (0..16 * 16).map(|i| (i % 16) as f64 / 16.0).collect();
        Image::new(16, 16, 1, data).unwrap()
    }

    #[test]
    fn constant_scorer_is_maximally_uncertain() {
        let c = certainty_with(|imgs| Ok(vec![1.0; imgs.len()]), &gradient_image(), &sampler(), 100, 3).unwrap();
        assert_eq!(c, 0.0);
    }

    #[test]
    fn oracle_scorer_is_fully_certain() {
        let img = gradient_image();
        let (images, pairs) = sample_pairs(&img, &sampler(), 100, 5).unwrap();
        assert_eq!(pairs.len(), 100);
        // The oracle returns φ itself: crop area, decreasing with member index.
        let phi: Vec<f64> = (0..images.len()).map(|i| -((i % 5) as f64)).collect();
        assert_eq!(certainty_from_scores(&phi, &pairs), 1.0);
    }

    #[test]
    fn network_certainty_matches_brute_force() {
        let net = Network::new(
            NetworkSpec::new(
                vec![1, 8, 8],
                vec![
                    LayerSpec::Conv2d {
                        in_channels: 1,
                        out_channels: 2,
                        kernel: 3,
                    },
                    LayerSpec::Relu,
                    LayerSpec::Conv2d {
                        in_channels: 2,
                        out_channels: 1,
                        kernel: 3,
                    },
                ],
            ),
            7,
        )
        .unwrap();
        let img = gradient_image();
        let c = certainty(&net, &img, &sampler(), 100, 11).unwrap();
        let (images, pairs) = sample_pairs(&img, &sampler(), 100, 11).unwrap();
        let mut right = 0;
        for (lo, hi) in pairs {
            let a = network_scores(&net, &images[lo..=lo]).unwrap()[0];
            let b = network_scores(&net, &images[hi..=hi]).unwrap()[0];
            if a < b {
                right += 1;
            }
        }
        assert_eq!(c, right as f64 / 100.0);
        assert!((0.0..=1.0).contains(&c));
        assert_eq!(c, certainty(&net, &img, &sampler(), 100, 11).unwrap());
    }

    #[test]
    fn least_certain_selection_breaks_ties_by_id() {
        let scored = vec![(0.5, 3), (0.1, 7), (0.5, 1), (0.9, 0), (0.1, 2)];
        assert_eq!(select_least_certain(scored, 3), vec![2, 7, 1]);
    }

    /// Records calls; certainty is a fixed function of the id.
    struct Mock {
        n: usize,
        trained: Vec<(Vec<usize>, bool)>,
    }

    impl ActiveTask for Mock {
        fn pool_size(&self) -> usize {
            self.n
        }
        fn train(&mut self, labeled: &[usize], _cycle: usize, warm: bool) -> Result<()> {
            self.trained.push((labeled.to_vec(), warm));
            Ok(())
        }
        fn evaluate(&mut self) -> Result<Report> {
            let l = self.trained.last().unwrap().0.len() as f64;
            Ok(Report {
                mae: 1.0 / l,
                mse: 1.0 / l,
                lcc: None,
                srocc: None,
            })
        }
        fn certainty(&mut self, id: usize, _seed: u64) -> Result<f64> {
            Ok(((id * 37) % 100) as f64 / 100.0)
        }
    }

    #[test]
    fn loop_grows_labeled_set_by_fraction_steps() {
        let mut task = Mock { n: 100, trained: vec![] };
        let cfg = ActiveConfig {
            per_cycle: 10,
            ..ActiveConfig::default()
        };
        let initial: Vec<usize> = (0..10).collect();
        let h = active_loop(&mut task, &initial, &cfg, 1).unwrap();
        let fractions: Vec<f64> = h.iter().map(|r| r.labeled_fraction).collect();
        let expected: Vec<f64> = (1..=10).map(|i| i as f64 * 10.0 / 100.0).collect();
        assert_eq!(fractions, expected);
        assert_eq!(task.trained.len(), 10);
        assert!(!task.trained[0].1 && task.trained[1..].iter().all(|t| t.1));
        let mut all: Vec<usize> = task.trained.last().unwrap().0.clone();
        all.sort_unstable();
        assert_eq!(all, (0..100).collect::<Vec<_>>());
        // First selection is the ten least certain ids outside the seed set.
        let mut scored: Vec<(f64, usize)> = (10..100).map(|i| (((i * 37) % 100) as f64 / 100.0, i)).collect();
        scored.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let first: Vec<usize> = scored.iter().take(10).map(|s| s.1).collect();
        assert_eq!(h[0].selected, first);
    }

    #[test]
    fn random_policy_is_reproducible_and_exhaustion_is_reported() {
        let cfg = ActiveConfig {
            per_cycle: 10,
            policy: Policy::Random,
            ..ActiveConfig::default()
        };
        let run = || {
            let mut task = Mock { n: 100, trained: vec![] };
            active_loop(&mut task, &[0, 1, 2, 3, 4, 5, 6, 7, 8, 9], &cfg, 4).unwrap()
        };
        assert_eq!(run(), run());
        let mut task = Mock { n: 50, trained: vec![] };
        assert!(matches!(
            active_loop(&mut task, &[0, 1, 2, 3, 4], &cfg, 4),
            Err(ActiveError::PoolExhausted { .. })
        ));
    }

    #[test]
    fn single_cycle_taking_everything_ends_with_full_set() {
        for policy in [Policy::Certainty, Policy::Random] {
            let mut task = Mock { n: 20, trained: vec![] };
            let cfg = ActiveConfig {
                cycles: 1,
                per_cycle: 18,
                policy,
                ..ActiveConfig::default()
            };
            let h = active_loop(&mut task, &[3, 9], &cfg, 0).unwrap();
            assert_eq!(h.last().unwrap().labeled, 20);
            assert_eq!(h.last().unwrap().report.mae, 1.0 / 20.0);
        }
    }
}
