//! Nested-crop ranked groups, synthetic blob-count scenes and density-map
//! targets.
//!
//! A crop nested inside another can never contain more objects, so every
//! group of concentric crops is ranked by area without knowing any counts.

use std::io::Write;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Poisson};
use thiserror::Error;

use crate::group::RankedGroup;
use crate::image::{Image, ImageError};
use crate::seeds;

#[derive(Debug, Error)]
pub enum CropError {
    #[error("invalid crop configuration: {0}")]
    Config(String),
    #[error("image {width}x{height} is smaller than the {size}x{size} output")]
    TooSmall { width: usize, height: usize, size: usize },
    #[error("invalid scene parameters: {0}")]
    Scene(String),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error("{path}: {reason}")]
    Annotations { path: String, reason: String },
}

pub type Result<T, E = CropError> = std::result::Result<T, E>;

/// How the anchor region's "1/r of the image" is measured.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AnchorRegion {
    /// Region area is 1/r of the image area (sides scaled by 1/√r).
    Area,
    /// Each side is 1/r of the image side.
    PerDimension,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CropGenConfig {
    /// Crops per group.
    pub k: usize,
    /// Side ratio between consecutive crops.
    pub s: f64,
    /// Anchor-region divisor.
    pub r: f64,
    pub output_size: usize,
    pub anchor: AnchorRegion,
}

impl Default for CropGenConfig {
    fn default() -> Self {
        Self {
            k: 5,
            s: 0.75,
            r: 8.0,
            output_size: 64,
            anchor: AnchorRegion::Area,
        }
    }
}

impl CropGenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k < 2 {
            return Err(CropError::Config(format!("k must be at least 2, got {}", self.k)));
        }
        if !(self.s > 0.0 && self.s < 1.0) {
            return Err(CropError::Config(format!("s must lie in (0, 1), got {}", self.s)));
        }
        if !(self.r >= 1.0) || !self.r.is_finite() {
            return Err(CropError::Config(format!("r must be at least 1, got {}", self.r)));
        }
        if self.output_size == 0 {
            return Err(CropError::Config("output size must be positive".into()));
        }
        Ok(())
    }

    /// Half-extents of the anchor region around the image centre.
    pub fn anchor_half_extent(&self, width: usize, height: usize) -> (f64, f64) {
        let f = match self.anchor {
            AnchorRegion::Area => 1.0 / self.r.sqrt(),
            AnchorRegion::PerDimension => 1.0 / self.r,
        };
        (width as f64 * f / 2.0, height as f64 * f / 2.0)
    }
}

/// Axis-aligned square `[cx − side/2, cx + side/2) × [cy − side/2, cy + side/2)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CropDescriptor {
    pub cx: f64,
    pub cy: f64,
    pub side: f64,
}

impl CropDescriptor {
    pub fn x0(&self) -> f64 {
        self.cx - self.side / 2.0
    }

    pub fn y0(&self) -> f64 {
        self.cy - self.side / 2.0
    }

    pub fn area(&self) -> f64 {
        self.side * self.side
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        let h = self.side / 2.0;
        x >= self.cx - h && x < self.cx + h && y >= self.cy - h && y < self.cy + h
    }
}

/// Concentric crops for a given anchor: the largest is the maximal square
/// centred at the anchor inside the image, each next one `s` times smaller.
pub fn nested_crops(width: usize, height: usize, cx: f64, cy: f64, cfg: &CropGenConfig) -> Vec<CropDescriptor> {
    let half = cx.min(cy).min(width as f64 - cx).min(height as f64 - cy);
    let mut side = 2.0 * half;
    (0..cfg.k)
        .map(|_| {
            let d = CropDescriptor { cx, cy, side };
            side *= cfg.s;
            d
        })
        .collect()
}

/// Samples an anchor uniformly in the centred anchor region.
pub fn sample_anchor<R: Rng>(width: usize, height: usize, cfg: &CropGenConfig, rng: &mut R) -> (f64, f64) {
    let (hx, hy) = cfg.anchor_half_extent(width, height);
    let (mx, my) = (width as f64 / 2.0, height as f64 / 2.0);
    (rng.random_range(mx - hx..=mx + hx), rng.random_range(my - hy..=my + hy))
}

/// One ranked group of `k` nested crops resized (bilinearly) to the output
/// size. φ is the crop area, so larger crops rank higher.
pub fn generate_ranked_crops(
    img: &Image,
    cfg: &CropGenConfig,
    seed: u64,
    source_id: usize,
) -> Result<(RankedGroup, Vec<CropDescriptor>)> {
    cfg.validate()?;
    if img.width() < cfg.output_size || img.height() < cfg.output_size {
        return Err(CropError::TooSmall {
            width: img.width(),
            height: img.height(),
            size: cfg.output_size,
        });
    }
    let mut rng = seeds::rng(seed);
    let (cx, cy) = sample_anchor(img.width(), img.height(), cfg, &mut rng);
    let crops = nested_crops(img.width(), img.height(), cx, cy, cfg);
    let images = crops
        .iter()
        .map(|c| img.resample_region(c.x0(), c.y0(), c.side, c.side, cfg.output_size, cfg.output_size))
        .collect();
    let group = RankedGroup {
        source_id,
        phi: crops.iter().map(CropDescriptor::area).collect(),
        images,
    };
    Ok((group, crops))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SceneParams {
    pub width: usize,
    pub height: usize,
    /// Mean of the Poisson object count.
    pub mean_count: f64,
    pub blob_std: f64,
    pub peak: f64,
    /// Background is uniform in `[0, noise)`.
    pub noise: f64,
}

impl Default for SceneParams {
    fn default() -> Self {
        Self {
            width: 64,
            height: 64,
            mean_count: 50.0,
            blob_std: 1.5,
            peak: 0.8,
            noise: 0.1,
        }
    }
}

impl SceneParams {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(CropError::Scene("image size must be positive".into()));
        }
        if !(self.mean_count >= 0.0 && self.mean_count.is_finite()) {
            return Err(CropError::Scene(format!("bad mean count {}", self.mean_count)));
        }
        if !(self.blob_std > 0.0) || !(self.noise >= 0.0) || !self.peak.is_finite() {
            return Err(CropError::Scene("blob std must be positive, noise non-negative".into()));
        }
        Ok(())
    }
}

/// An image of bright blobs with the exact blob centres.
#[derive(Debug, Clone, PartialEq)]
pub struct BlobScene {
    pub image: Image,
    pub points: Vec<(f64, f64)>,
}

impl BlobScene {
    pub fn count(&self) -> usize {
        self.points.len()
    }

    pub fn count_in(&self, crop: &CropDescriptor) -> usize {
        self.points.iter().filter(|(x, y)| crop.contains(*x, *y)).count()
    }

    /// Writes `<stem>.pgm` and `<stem>.csv` (columns `x,y`).
    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        self.image.save(&dir.join(format!("{stem}.pgm")))?;
        let path = dir.join(format!("{stem}.csv"));
        let fail = |e: std::io::Error| CropError::Annotations {
            path: path.display().to_string(),
            reason: e.to_string(),
        };
        let mut f = std::io::BufWriter::new(std::fs::File::create(&path).map_err(fail)?);
        writeln!(f, "x,y").map_err(fail)?;
        for (x, y) in &self.points {
            writeln!(f, "{x},{y}").map_err(fail)?;
        }
        f.flush().map_err(fail)
    }

    pub fn load(dir: &Path, stem: &str) -> Result<Self> {
        let image = Image::load(&dir.join(format!("{stem}.pgm")))?;
        let path = dir.join(format!("{stem}.csv"));
        let fail = |reason: String| CropError::Annotations {
            path: path.display().to_string(),
            reason,
        };
        let mut r = csv::Reader::from_path(&path).map_err(|e| fail(e.to_string()))?;
        let mut points = Vec::new();
        for rec in r.records() {
            let rec = rec.map_err(|e| fail(e.to_string()))?;
            let num = |i: usize| -> Result<f64> {
                rec.get(i)
                    .and_then(|v| v.parse().ok())
                    .ok_or_else(|| fail(format!("bad coordinate in row {:?}", rec)))
            };
            points.push((num(0)?, num(1)?));
        }
        Ok(Self { image, points })
    }
}

/// Renders Poisson-many Gaussian splats at uniform positions over a uniform
/// noise background, clamped to [0, 1].
pub fn synth_blob_scene(params: &SceneParams, seed: u64) -> Result<BlobScene> {
    params.validate()?;
    let mut rng = seeds::rng(seed);
    let n = if params.mean_count > 0.0 {
        Poisson::new(params.mean_count).expect("positive mean").sample(&mut rng) as usize
    } else {
        0
    };
    let (w, h) = (params.width as f64, params.height as f64);
    let points: Vec<(f64, f64)> = (0..n)
        .map(|_| (rng.random_range(0.0..w), rng.random_range(0.0..h)))
        .collect();
    Ok(render_scene(params, points, &mut rng))
}

/// Renders a scene with given blob centres; the background still comes
/// from `rng`.
pub fn render_scene<R: Rng>(params: &SceneParams, points: Vec<(f64, f64)>, rng: &mut R) -> BlobScene {
    let (w, h) = (params.width, params.height);
    let mut data: Vec<f64> = (0..w * h)
        .map(|_| if params.noise > 0.0 { rng.random_range(0.0..params.noise) } else { 0.0 })
        .collect();
    let sd = params.blob_std;
    let reach = 4.0 * sd;
    for &(px, py) in &points {
        let x0 = (px - reach).floor().max(0.0) as usize;
        let x1 = ((px + reach).ceil() as usize).min(w);
        let y0 = (py - reach).floor().max(0.0) as usize;
        let y1 = ((py + reach).ceil() as usize).min(h);
        for y in y0..y1 {
            let dy = y as f64 + 0.5 - py;
            for x in x0..x1 {
                let dx = x as f64 + 0.5 - px;
                data[y * w + x] += params.peak * (-(dx * dx + dy * dy) / (2.0 * sd * sd)).exp();
            }
        }
    }
    let mut image = Image::new(w, h, 1, data).expect("validated size");
    image.clamp();
    BlobScene { image, points }
}

/// Objects per pixel on a grid of `width × height` cells.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityMap {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl DensityMap {
    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    /// Sums non-overlapping `factor × factor` cells; the total is unchanged.
    pub fn pooled(&self, factor: usize) -> DensityMap {
        let (w, h) = (self.width / factor, self.height / factor);
        let mut data = vec![0.0; w * h];
        for y in 0..h * factor {
            for x in 0..w * factor {
                data[(y / factor) * w + x / factor] += self.data[y * self.width + x];
            }
        }
        DensityMap { width: w, height: h, data }
    }
}

/// Mass of N(mu, sigma²) on `[a, b)`.
fn interval_mass(a: f64, b: f64, mu: f64, sigma: f64) -> f64 {
    let k = std::f64::consts::SQRT_2 * sigma;
    0.5 * (libm::erf((b - mu) / k) - libm::erf((a - mu) / k))
}

/// Each annotation contributes a unit-mass Gaussian of std `sigma`,
/// integrated exactly over every pixel; mass falling outside the frame is
/// dropped, so the map sums to the count only for interior annotations.
pub fn density_target(scene: &BlobScene, sigma: f64) -> Result<DensityMap> {
    if !(sigma > 0.0) {
        return Err(CropError::Scene(format!("density sigma must be positive, got {sigma}")));
    }
    let (w, h) = (scene.image.width(), scene.image.height());
    let mut data = vec![0.0; w * h];
    let mut mx = vec![0.0; w];
    let mut my = vec![0.0; h];
    for &(px, py) in &scene.points {
        for (x, m) in mx.iter_mut().enumerate() {
            *m = interval_mass(x as f64, x as f64 + 1.0, px, sigma);
        }
        for (y, m) in my.iter_mut().enumerate() {
            *m = interval_mass(y as f64, y as f64 + 1.0, py, sigma);
        }
        for y in 0..h {
            for x in 0..w {
                data[y * w + x] += my[y] * mx[x];
            }
        }
    }
    Ok(DensityMap { width: w, height: h, data })
}
