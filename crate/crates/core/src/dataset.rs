//! Synthetic experiment data: generation, on-disk layout and loading.
//!
//! A dataset directory holds
//!
//! * `labeled.csv`, `test.csv` — `id,image,value`; counting scenes also keep
//!   their annotations next to the image (`<stem>.csv`, columns `x,y`);
//! * `unlabeled.csv` — `id,image`;
//! * `manifest.csv` — the ranked groups built from the unlabeled images;
//! * `images/` — 8-bit PGM files.
//!
//! Images are quantised to 8 bits when generated, so a dataset loaded from
//! disk is identical to the one generated in memory from the same config.

use std::path::{Path, PathBuf};

use rand::Rng;
use thiserror::Error;

use crate::config::{CountTarget, ExperimentConfig, Task};
use crate::crop::{density_target, generate_ranked_crops, synth_blob_scene, BlobScene, CropError};
use crate::distortion::{apply_distortion, build_distortion_group, DistortionError};
use crate::group::{read_manifest, write_manifest, ManifestError, ManifestRow, RankedGroup};
use crate::image::{Image, ImageError};
use crate::ranking::RegressionTarget;
use crate::seeds::{self, Stream};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {reason}")]
    Format { path: String, reason: String },
    #[error("dataset does not match the config: {0}")]
    Mismatch(String),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error(transparent)]
    Crop(#[from] CropError),
    #[error(transparent)]
    Distortion(#[from] DistortionError),
    #[error(transparent)]
    Manifest(#[from] ManifestError),
}

pub type Result<T, E = DataError> = std::result::Result<T, E>;

/// An image with its ground truth (object count, or quality score).
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: Image,
    pub value: f64,
    /// Object centres; empty for the quality task.
    pub points: Vec<(f64, f64)>,
    pub target: RegressionTarget,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub labeled: Vec<Sample>,
    pub test: Vec<Sample>,
    pub unlabeled: Vec<Image>,
    pub groups: Vec<RankedGroup>,
}

// Scene index offsets keep the splits' seeds disjoint.
const TEST_BASE: u64 = 1 << 32;
const UNLABELED_BASE: u64 = 2 << 32;

fn quantized(img: &Image) -> Image {
    Image::from_u8(img.width(), img.height(), img.channels(), &img.to_u8()).expect("same geometry")
}

/// One view of a blob world: zoom `z` scales blob size by `z` and the
/// expected count by `1/z²`. The world's density may itself vary per scene.
pub fn counting_scene(cfg: &ExperimentConfig, seed: u64) -> Result<BlobScene> {
    let mut rng = seeds::rng(seed);
    let (lo, hi) = cfg.zoom;
    let z = if hi > lo {
        (rng.random_range(lo.ln()..hi.ln())).exp()
    } else {
        lo
    };
    let mut params = cfg.scene;
    if cfg.mean_count_max > params.mean_count {
        params.mean_count = rng.random_range(params.mean_count.ln()..cfg.mean_count_max.ln()).exp();
    }
    params.blob_std *= z;
    params.mean_count /= z * z;
    let mut scene = synth_blob_scene(&params, seeds::derive_seed(seed, 1))?;
    scene.image = quantized(&scene.image);
    Ok(scene)
}

/// A gray texture: a few oriented sinusoids over mid-gray plus some
/// constant-offset rectangles for edges.
pub fn reference_image(size: usize, seed: u64) -> Image {
    let mut rng = seeds::rng(seed);
    let mut data = vec![0.5; size * size];
    for _ in 0..4 {
        let amp = rng.random_range(0.05..0.15);
        let freq = rng.random_range(0.02..0.25) * std::f64::consts::TAU;
        let angle = rng.random_range(0.0..std::f64::consts::PI);
        let phase = rng.random_range(0.0..std::f64::consts::TAU);
        let (dx, dy) = (angle.cos() * freq, angle.sin() * freq);
        for y in 0..size {
            for x in 0..size {
                data[y * size + x] += amp * (dx * x as f64 + dy * y as f64 + phase).sin();
            }
        }
    }
    for _ in 0..3 {
        let (x0, y0) = (rng.random_range(0..size), rng.random_range(0..size));
        let (w, h) = (rng.random_range(2..=size / 2), rng.random_range(2..=size / 2));
        let offset = rng.random_range(-0.3..0.3);
        for y in y0..(y0 + h).min(size) {
            for x in x0..(x0 + w).min(size) {
                data[y * size + x] += offset;
            }
        }
    }
    let mut img = Image::new(size, size, 1, data).expect("valid geometry");
    img.clamp();
    quantized(&img)
}

fn count_target(cfg: &ExperimentConfig, scene: &BlobScene) -> Result<RegressionTarget> {
    match cfg.count_target {
        CountTarget::Count => Ok(RegressionTarget::Scalar(scene.count() as f64)),
        CountTarget::Density => {
            let out = cfg
                .network
                .output_shape()
                .map_err(|e| DataError::Mismatch(e.to_string()))?;
            let (w, h) = (out[out.len() - 1], out[out.len() - 2]);
            let factor = scene.image.width() / w;
            if out.len() != 3 || out[0] != 1 || w * factor != scene.image.width() || h * factor != scene.image.height() {
                return Err(DataError::Mismatch(format!(
                    "network output {out:?} does not tile a {}x{} density map",
                    scene.image.width(),
                    scene.image.height()
                )));
            }
            Ok(RegressionTarget::Map(density_target(scene, cfg.density_sigma)?.pooled(factor).data))
        }
    }
}

fn counting_sample(cfg: &ExperimentConfig, scene: BlobScene) -> Result<Sample> {
    let target = count_target(cfg, &scene)?;
    Ok(Sample {
        value: scene.count() as f64,
        target,
        image: scene.image,
        points: scene.points,
    })
}

/// A reference at a random distortion level of a random configured kind;
/// its quality is minus the level (0 for the pristine image).
fn quality_sample(cfg: &ExperimentConfig, seed: u64) -> Result<Sample> {
    let reference = reference_image(cfg.quality_size, seed);
    let mut rng = seeds::rng(seeds::derive_seed(seed, 1));
    let kind = cfg.distortions[rng.random_range(0..cfg.distortions.len())];
    let level = rng.random_range(0..=cfg.levels);
    let image = if level == 0 {
        reference
    } else {
        quantized(&apply_distortion(&reference, &kind.level_params(level)?, seeds::derive_seed(seed, 2))?)
    };
    let value = -(level as f64);
    Ok(Sample {
        image,
        value,
        points: Vec::new(),
        target: RegressionTarget::Scalar(value),
    })
}

fn labeled_split(cfg: &ExperimentConfig, base: u64, n: usize) -> Result<Vec<Sample>> {
    (0..n as u64)
        .map(|i| {
            let seed = seeds::derive(cfg.seed, Stream::Scenes, base + i);
            match cfg.task {
                Task::Counting => counting_sample(cfg, counting_scene(cfg, seed)?),
                Task::Quality => quality_sample(cfg, seed),
            }
        })
        .collect()
}

/// The `g`-th ranked group of unlabeled image `id`.
pub fn ranked_group(cfg: &ExperimentConfig, img: &Image, id: usize, g: usize) -> Result<RankedGroup> {
    let index = (id * cfg.groups_per_image + g) as u64;
    let mut group = match cfg.task {
        Task::Counting => generate_ranked_crops(img, &cfg.crop, seeds::derive(cfg.seed, Stream::Crops, index), id)?.0,
        Task::Quality => {
            let kind = cfg.distortions[index as usize % cfg.distortions.len()];
            build_distortion_group(img, kind, cfg.levels, seeds::derive(cfg.seed, Stream::Distortion, index), id)?
        }
    };
    for m in &mut group.images {
        *m = quantized(m);
    }
    Ok(group)
}

impl Dataset {
    pub fn generate(cfg: &ExperimentConfig) -> Result<Self> {
        let labeled = labeled_split(cfg, 0, cfg.labeled)?;
        let test = labeled_split(cfg, TEST_BASE, cfg.test)?;
        let unlabeled: Vec<Image> = (0..cfg.unlabeled as u64)
            .map(|i| {
                let seed = seeds::derive(cfg.seed, Stream::Scenes, UNLABELED_BASE + i);
                Ok(match cfg.task {
                    Task::Counting => counting_scene(cfg, seed)?.image,
                    Task::Quality => reference_image(cfg.quality_size, seed),
                })
            })
            .collect::<Result<_>>()?;
        let mut groups = Vec::with_capacity(unlabeled.len() * cfg.groups_per_image);
        for (id, img) in unlabeled.iter().enumerate() {
            for g in 0..cfg.groups_per_image {
                groups.push(ranked_group(cfg, img, id, g)?);
            }
        }
        Ok(Self {
            labeled,
            test,
            unlabeled,
            groups,
        })
    }

    /// Ordered comparable pairs over all ranked groups.
    pub fn pair_count(&self) -> usize {
        self.groups.iter().map(|g| g.ordered_pairs().len()).sum()
    }

    /// Writes the dataset into `dir`, which must exist.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let images = dir.join("images");
        std::fs::create_dir_all(&images).map_err(|source| DataError::Io {
            path: images.display().to_string(),
            source,
        })?;
        for (name, split) in [("labeled", &self.labeled), ("test", &self.test)] {
            let mut rows = Vec::with_capacity(split.len());
            for (i, s) in split.iter().enumerate() {
                let stem = format!("{name}_{i:05}");
                if s.points.is_empty() {
                    s.image.save(&images.join(format!("{stem}.pgm")))?;
                } else {
                    BlobScene {
                        image: s.image.clone(),
                        points: s.points.clone(),
                    }
                    .save(&images, &stem)?;
                }
                rows.push(vec![i.to_string(), format!("images/{stem}.pgm"), s.value.to_string()]);
            }
            write_csv(&dir.join(format!("{name}.csv")), &["id", "image", "value"], &rows)?;
        }
        let mut rows = Vec::with_capacity(self.unlabeled.len());
        for (i, img) in self.unlabeled.iter().enumerate() {
            let rel = format!("images/unlabeled_{i:05}.pgm");
            img.save(&dir.join(&rel))?;
            rows.push(vec![i.to_string(), rel]);
        }
        write_csv(&dir.join("unlabeled.csv"), &["id", "image"], &rows)?;
        let mut manifest = Vec::new();
        for (g, group) in self.groups.iter().enumerate() {
            for (m, (img, phi)) in group.images.iter().zip(&group.phi).enumerate() {
                let rel = format!("images/group_{g:05}_{m}.pgm");
                img.save(&dir.join(&rel))?;
                manifest.push(ManifestRow {
                    group_id: g,
                    member_index: m,
                    phi: *phi,
                    image_path: rel,
                });
            }
        }
        write_manifest(&dir.join("manifest.csv"), &manifest)?;
        Ok(())
    }

    /// Reads a dataset written by [`Dataset::save`]; targets are rebuilt
    /// from the annotations with the config's settings.
    pub fn load(dir: &Path, cfg: &ExperimentConfig) -> Result<Self> {
        let mut splits = Vec::new();
        for name in ["labeled", "test"] {
            let path = dir.join(format!("{name}.csv"));
            let mut samples = Vec::new();
            for (row, rec) in read_csv(&path, 3)?.into_iter().enumerate() {
                let bad = |reason: String| DataError::Format {
                    path: path.display().to_string(),
                    reason: format!("row {}: {reason}", row + 1),
                };
                let value: f64 = rec[2].parse().map_err(|e| bad(format!("value `{}`: {e}", rec[2])))?;
                let image_path = dir.join(&rec[1]);
                let sample = match cfg.task {
                    Task::Counting => {
                        let stem = image_path
                            .file_stem()
                            .and_then(|s| s.to_str())
                            .ok_or_else(|| bad(format!("bad image path `{}`", rec[1])))?;
                        let parent = image_path.parent().unwrap_or(dir);
                        let scene = BlobScene::load(parent, stem)?;
                        if scene.count() as f64 != value {
                            return Err(bad(format!("value {value} but {} annotations", scene.count())));
                        }
                        counting_sample(cfg, scene)?
                    }
                    Task::Quality => Sample {
                        image: Image::load(&image_path)?,
                        value,
                        points: Vec::new(),
                        target: RegressionTarget::Scalar(value),
                    },
                };
                samples.push(sample);
            }
            splits.push(samples);
        }
        let test = splits.pop().expect("two splits");
        let labeled = splits.pop().expect("two splits");
        let unlabeled = read_csv(&dir.join("unlabeled.csv"), 2)?
            .iter()
            .map(|rec| Image::load(&dir.join(&rec[1])))
            .collect::<std::result::Result<Vec<_>, _>>()?;

        let manifest_path = dir.join("manifest.csv");
        let mut groups: Vec<RankedGroup> = Vec::new();
        for row in read_manifest(&manifest_path)? {
            if row.group_id == groups.len() {
                groups.push(RankedGroup {
                    source_id: row.group_id / cfg.groups_per_image.max(1),
                    phi: Vec::new(),
                    images: Vec::new(),
                });
            }
            let current = groups.len();
            let group = match groups.last_mut() {
                Some(g) if row.group_id + 1 == current && row.member_index == g.len() => g,
                _ => {
                    return Err(DataError::Format {
                        path: manifest_path.display().to_string(),
                        reason: format!("group {} member {} out of order", row.group_id, row.member_index),
                    })
                }
            };
            group.phi.push(row.phi);
            group.images.push(Image::load(&dir.join(&row.image_path))?);
        }
        let data = Self {
            labeled,
            test,
            unlabeled,
            groups,
        };
        data.check(cfg)?;
        Ok(data)
    }

    /// Split sizes and image geometry agree with the config.
    pub fn check(&self, cfg: &ExperimentConfig) -> Result<()> {
        let sizes = [
            ("labeled", self.labeled.len(), cfg.labeled),
            ("test", self.test.len(), cfg.test),
            ("unlabeled", self.unlabeled.len(), cfg.unlabeled),
            ("groups", self.groups.len(), cfg.unlabeled * cfg.groups_per_image),
        ];
        for (name, got, want) in sizes {
            if got != want {
                return Err(DataError::Mismatch(format!("{got} {name} entries, config expects {want}")));
            }
        }
        let shape = &cfg.network.input_shape;
        let fits = |img: &Image| [img.channels(), img.height(), img.width()].as_slice() == shape.as_slice();
        let all = self
            .labeled
            .iter()
            .chain(&self.test)
            .map(|s| &s.image)
            .chain(self.groups.iter().flat_map(|g| &g.images));
        if let Some(img) = all.into_iter().find(|img| !fits(img)) {
            return Err(DataError::Mismatch(format!(
                "image {}x{}x{} does not fit network input {shape:?}",
                img.channels(),
                img.height(),
                img.width()
            )));
        }
        Ok(())
    }
}

fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let err = |e: csv::Error| DataError::Format {
        path: path.display().to_string(),
        reason: e.to_string(),
    };
    let mut w = csv::Writer::from_path(path).map_err(err)?;
    w.write_record(header).map_err(err)?;
    for r in rows {
        w.write_record(r).map_err(err)?;
    }
    w.flush().map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn read_csv(path: &PathBuf, columns: usize) -> Result<Vec<Vec<String>>> {
    let err = |reason: String| DataError::Format {
        path: path.display().to_string(),
        reason,
    };
    let mut r = csv::Reader::from_path(path).map_err(|e| err(e.to_string()))?;
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| err(e.to_string()))?;
        if rec.len() != columns {
            return Err(err(format!("expected {columns} columns, got {}", rec.len())));
        }
        out.push(rec.iter().map(str::to_string).collect());
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(task: Task) -> ExperimentConfig {
        let mut cfg = ExperimentConfig::defaults(task);
        cfg.labeled = 3;
        cfg.test = 2;
        cfg.unlabeled = 2;
        cfg.groups_per_image = 2;
        cfg
    }

    #[test]
    fn density_targets_sum_to_interior_counts() {
        let cfg = small(Task::Counting);
        let data = Dataset::generate(&cfg).unwrap();
        for s in &data.labeled {
            let RegressionTarget::Map(m) = &s.target else {
                panic!("density target expected")
            };
            assert_eq!(m.len(), 64);
            let sum: f64 = m.iter().sum();
            // Mass of blobs near the border falls partly outside the frame.
            assert!(sum <= s.value + 1e-9 && sum > 0.8 * s.value, "{sum} vs {}", s.value);
        }
    }

    #[test]
    fn generation_is_deterministic_and_seeded() {
        for task in [Task::Counting, Task::Quality] {
            let cfg = small(task);
            assert_eq!(Dataset::generate(&cfg).unwrap(), Dataset::generate(&cfg).unwrap());
            let mut other = cfg.clone();
            other.seed = 1;
            assert_ne!(Dataset::generate(&cfg).unwrap(), Dataset::generate(&other).unwrap());
        }
    }

    #[test]
    fn save_load_round_trip() {
        for task in [Task::Counting, Task::Quality] {
            let cfg = small(task);
            let data = Dataset::generate(&cfg).unwrap();
            let dir = tempfile::tempdir().unwrap();
            data.save(dir.path()).unwrap();
            assert_eq!(Dataset::load(dir.path(), &cfg).unwrap(), data);
        }
    }

    #[test]
    fn mismatched_config_is_rejected() {
        let cfg = small(Task::Counting);
        let data = Dataset::generate(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        data.save(dir.path()).unwrap();
        let mut other = cfg.clone();
        other.labeled = 4;
        assert!(matches!(Dataset::load(dir.path(), &other), Err(DataError::Mismatch(_))));
    }

    #[test]
    fn quality_values_follow_levels() {
        let cfg = small(Task::Quality);
        let data = Dataset::generate(&cfg).unwrap();
        for s in data.labeled.iter().chain(&data.test) {
            assert!(s.value <= 0.0 && s.value >= -(cfg.levels as f64) && s.value.fract() == 0.0);
        }
        assert_eq!(data.groups.len(), 4);
        assert!(data.groups.iter().all(|g| g.len() == cfg.levels + 1));
    }
}
