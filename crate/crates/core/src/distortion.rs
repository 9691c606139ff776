//! Parametric image distortions with published per-level schedules, and
//! ranked groups built from increasing distortion levels.
//!
//! Kinds carry their TID2013 numbers (`#01` … `#24`). Kinds whose recipe
//! depends on unavailable codecs or unstated details are recognised by
//! [`DistortionKind::from_code`] but rejected with
//! [`DistortionError::Unsupported`].

use std::fmt;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use thiserror::Error;

use crate::group::RankedGroup;
use crate::image::Image;
use crate::seeds;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DistortionError {
    #[error("distortion #{code:02} is not supported: {reason}")]
    Unsupported { code: u8, reason: &'static str },
    #[error("unknown distortion `{0}`")]
    Unknown(String),
    #[error("{kind} has levels 1..={max}, got {level}")]
    Level {
        kind: DistortionKind,
        level: usize,
        max: usize,
    },
    #[error("{0} needs a 3-channel image")]
    NeedsColor(DistortionKind),
    #[error("invalid parameter for {kind}: {reason}")]
    Parameter { kind: DistortionKind, reason: String },
}

pub type Result<T, E = DistortionError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DistortionKind {
    /// #01, noise variance per RGB sample.
    GaussianNoise,
    /// #02, noise variance per YCbCr component.
    ColorComponentNoise,
    /// #05, white-noise variance before the radial high-pass.
    HighFrequencyNoise,
    /// #06, fraction of pixels replaced by black or white.
    ImpulseNoise,
    /// #07, quantization step in 8-bit units.
    QuantizationNoise,
    /// #08, blur standard deviation in pixels.
    GaussianBlur,
    /// #10, JPEG quality factor; block-DCT luma quantization, no entropy coding.
    JpegQuantization,
    /// #14, number of 15×15 patches moved to nearby positions.
    PatchDisplacement,
    /// #15, number of 32×32 blocks replaced by a flat colour.
    BlockReplacement,
    /// #16 (darker), shift in 8-bit units.
    MeanShiftDown,
    /// #16 (brighter), shift in 8-bit units.
    MeanShiftUp,
    /// #17 (reduced), contrast gain.
    ContrastDown,
    /// #17 (increased), contrast gain.
    ContrastUp,
    /// #18, chroma gain.
    Saturation,
    /// #19, variance of the multiplicative noise.
    MultiplicativeNoise,
    /// #22, quantization levels per channel, Floyd–Steinberg dithered.
    DitheredQuantization,
    /// #23, horizontal shift of the red channel in pixels (blue uses its own list).
    ChromaticAberration,
}

use DistortionKind as K;

const UNSUPPORTED: [(u8, &str); 9] = [
    (3, "the spatially correlated noise model is unspecified"),
    (4, "the noise masks are unspecified"),
    (9, "requires an external denoiser"),
    (11, "requires a JPEG2000 codec"),
    (12, "the transmission error model is unspecified"),
    (13, "the transmission error model is unspecified"),
    (20, "requires a proprietary encoder"),
    (21, "requires a proprietary encoder"),
    (24, "requires a proprietary encoder"),
];

/// Blue-channel shifts paired with the red shifts of #23.
const ABERRATION_BLUE: [f64; 4] = [1.0, 3.0, 5.0, 7.0];

impl DistortionKind {
    pub const ALL: [DistortionKind; 17] = [
        K::GaussianNoise,
        K::ColorComponentNoise,
        K::HighFrequencyNoise,
        K::ImpulseNoise,
        K::QuantizationNoise,
        K::GaussianBlur,
        K::JpegQuantization,
        K::PatchDisplacement,
        K::BlockReplacement,
        K::MeanShiftDown,
        K::MeanShiftUp,
        K::ContrastDown,
        K::ContrastUp,
        K::Saturation,
        K::MultiplicativeNoise,
        K::DitheredQuantization,
        K::ChromaticAberration,
    ];

    pub fn code(self) -> u8 {
        match self {
            K::GaussianNoise => 1,
            K::ColorComponentNoise => 2,
            K::HighFrequencyNoise => 5,
            K::ImpulseNoise => 6,
            K::QuantizationNoise => 7,
            K::GaussianBlur => 8,
            K::JpegQuantization => 10,
            K::PatchDisplacement => 14,
            K::BlockReplacement => 15,
            K::MeanShiftDown | K::MeanShiftUp => 16,
            K::ContrastDown | K::ContrastUp => 17,
            K::Saturation => 18,
            K::MultiplicativeNoise => 19,
            K::DitheredQuantization => 22,
            K::ChromaticAberration => 23,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            K::GaussianNoise => "gaussian-noise",
            K::ColorComponentNoise => "color-noise",
            K::HighFrequencyNoise => "high-frequency-noise",
            K::ImpulseNoise => "impulse-noise",
            K::QuantizationNoise => "quantization-noise",
            K::GaussianBlur => "blur",
            K::JpegQuantization => "jpeg",
            K::PatchDisplacement => "patch-displacement",
            K::BlockReplacement => "block-replacement",
            K::MeanShiftDown => "mean-shift-down",
            K::MeanShiftUp => "mean-shift-up",
            K::ContrastDown => "contrast-down",
            K::ContrastUp => "contrast-up",
            K::Saturation => "saturation",
            K::MultiplicativeNoise => "multiplicative-noise",
            K::DitheredQuantization => "dithered-quantization",
            K::ChromaticAberration => "chromatic-aberration",
        }
    }

    /// Looks a kind up by TID2013 number. Two-directional kinds need
    /// `upward` to pick a direction; it is ignored otherwise.
    pub fn from_code(code: u8, upward: bool) -> Result<Self> {
        if let Some(&(code, reason)) = UNSUPPORTED.iter().find(|(c, _)| *c == code) {
            return Err(DistortionError::Unsupported { code, reason });
        }
        match code {
            16 => Ok(if upward { K::MeanShiftUp } else { K::MeanShiftDown }),
            17 => Ok(if upward { K::ContrastUp } else { K::ContrastDown }),
            _ => K::ALL
                .into_iter()
                .find(|k| k.code() == code)
                .ok_or_else(|| DistortionError::Unknown(format!("#{code:02}"))),
        }
    }

    /// Accepts a name (`blur`) or a number (`8`, `#08`, `16-up`).
    pub fn parse(s: &str) -> Result<Self> {
        let s = s.trim();
        if let Some(k) = K::ALL.into_iter().find(|k| k.name() == s) {
            return Ok(k);
        }
        let t = s.trim_start_matches('#');
        let (num, upward) = match t.split_once('-') {
            Some((n, "up")) => (n, true),
            Some((n, "down")) => (n, false),
            Some(_) => return Err(DistortionError::Unknown(s.into())),
            None => (t, false),
        };
        let code: u8 = num.parse().map_err(|_| DistortionError::Unknown(s.into()))?;
        Self::from_code(code, upward)
    }

    /// The published parameter list, in published order.
    pub fn schedule(self) -> &'static [f64] {
        match self {
            K::GaussianNoise | K::HighFrequencyNoise => &[0.001, 0.005, 0.01, 0.05],
            K::ColorComponentNoise => &[0.0140, 0.0198, 0.0343, 0.0524],
            K::ImpulseNoise => &[0.005, 0.01, 0.05, 0.1],
            K::QuantizationNoise => &[27.0, 39.0, 55.0, 76.0],
            K::GaussianBlur => &[1.2, 2.5, 6.5, 15.2],
            K::JpegQuantization => &[43.0, 12.0, 7.0, 4.0],
            K::PatchDisplacement => &[30.0, 70.0, 150.0, 300.0],
            K::BlockReplacement => &[2.0, 4.0, 8.0, 16.0],
            K::MeanShiftDown => &[-60.0, -45.0, -30.0, -15.0],
            K::MeanShiftUp => &[15.0, 30.0, 45.0, 60.0],
            K::ContrastDown => &[0.85, 0.7, 0.55, 0.4],
            K::ContrastUp => &[1.2, 1.4, 1.6, 1.8],
            K::Saturation => &[0.4, 0.0, -0.4, -0.8],
            K::MultiplicativeNoise => &[0.05, 0.09, 0.13, 0.2],
            K::DitheredQuantization => &[64.0, 32.0, 16.0, 8.0],
            K::ChromaticAberration => &[2.0, 6.0, 10.0, 14.0],
        }
    }

    pub fn levels(self) -> usize {
        self.schedule().len()
    }

    /// Parameters for severity `level` (1 = mildest). Every schedule is
    /// published mildest-first except the darkening mean shift, whose list
    /// runs from the strongest shift.
    pub fn level_params(self, level: usize) -> Result<DistortionSpec> {
        let sched = self.schedule();
        if level == 0 || level > sched.len() {
            return Err(DistortionError::Level {
                kind: self,
                level,
                max: sched.len(),
            });
        }
        let idx = match self {
            K::MeanShiftDown => sched.len() - level,
            _ => level - 1,
        };
        let secondary = match self {
            K::ChromaticAberration => ABERRATION_BLUE[idx],
            _ => 0.0,
        };
        Ok(DistortionSpec {
            kind: self,
            level: Some(level),
            param: sched[idx],
            secondary,
        })
    }
}

impl fmt::Display for DistortionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{:02} {}", self.code(), self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DistortionSpec {
    pub kind: DistortionKind,
    /// Schedule level this spec came from, if any.
    pub level: Option<usize>,
    pub param: f64,
    /// Only used by #23 (blue-channel shift).
    pub secondary: f64,
}

impl DistortionSpec {
    /// A spec with an explicit parameter instead of a schedule entry.
    pub fn custom(kind: DistortionKind, param: f64) -> Self {
        Self {
            kind,
            level: None,
            param,
            secondary: if kind == K::ChromaticAberration { (param / 2.0).round() } else { 0.0 },
        }
    }
}

/// Applies one distortion. Output has the input's geometry and is clamped
/// to [0, 1]; the result depends only on `(img, spec, seed)`.
pub fn apply_distortion(img: &Image, spec: &DistortionSpec, seed: u64) -> Result<Image> {
    let p = spec.param;
    let bad = |reason: &str| DistortionError::Parameter {
        kind: spec.kind,
        reason: reason.into(),
    };
    if !p.is_finite() {
        return Err(bad("parameter must be finite"));
    }
    let mut rng = seeds::rng(seed);
    let mut out = match spec.kind {
        K::GaussianNoise => {
            if p < 0.0 {
                return Err(bad("variance must be non-negative"));
            }
            additive_noise(img, p, &mut rng)
        }
        K::ColorComponentNoise => {
            if p < 0.0 {
                return Err(bad("variance must be non-negative"));
            }
            color_component_noise(img, p, &mut rng)
        }
        K::HighFrequencyNoise => {
            if p < 0.0 {
                return Err(bad("variance must be non-negative"));
            }
            high_frequency_noise(img, p, &mut rng)
        }
        K::ImpulseNoise => {
            if !(0.0..=1.0).contains(&p) {
                return Err(bad("density must lie in [0, 1]"));
            }
            impulse_noise(img, p, &mut rng)
        }
        K::QuantizationNoise => {
            if p <= 0.0 {
                return Err(bad("step must be positive"));
            }
            map_values(img, |v| (v * 255.0 / p).round() * p / 255.0)
        }
        K::GaussianBlur => {
            if p < 0.0 {
                return Err(bad("std must be non-negative"));
            }
            gaussian_blur(img, p)
        }
        K::JpegQuantization => {
            if !(1.0..=100.0).contains(&p) {
                return Err(bad("quality must lie in [1, 100]"));
            }
            jpeg_quantization(img, p)
        }
        K::PatchDisplacement => patch_displacement(img, count(p).ok_or_else(|| bad("count"))?, &mut rng),
        K::BlockReplacement => block_replacement(img, count(p).ok_or_else(|| bad("count"))?, &mut rng),
        K::MeanShiftDown | K::MeanShiftUp => map_values(img, |v| v + p / 255.0),
        K::ContrastDown | K::ContrastUp => {
            if p < 0.0 {
                return Err(bad("gain must be non-negative"));
            }
            contrast(img, p)
        }
        K::Saturation => {
            if img.channels() != 3 {
                return Err(DistortionError::NeedsColor(spec.kind));
            }
            saturation(img, p)
        }
        K::MultiplicativeNoise => {
            if p < 0.0 {
                return Err(bad("variance must be non-negative"));
            }
            let normal = Normal::new(0.0, p.sqrt()).expect("finite std");
            let mut out = img.clone();
            for v in out.data_mut() {
                *v *= 1.0 + normal.sample(&mut rng);
            }
            out
        }
        K::DitheredQuantization => {
            if p < 2.0 || p.fract() != 0.0 {
                return Err(bad("level count must be an integer ≥ 2"));
            }
            dither(img, p as usize)
        }
        K::ChromaticAberration => {
            if img.channels() != 3 {
                return Err(DistortionError::NeedsColor(spec.kind));
            }
            if p.fract() != 0.0 || spec.secondary.fract() != 0.0 {
                return Err(bad("shifts must be whole pixels"));
            }
            chromatic_aberration(img, p as i64, spec.secondary as i64)
        }
    };
    out.clamp();
    Ok(out)
}

fn count(p: f64) -> Option<usize> {
    (p >= 0.0 && p.fract() == 0.0).then_some(p as usize)
}

fn map_values(img: &Image, f: impl Fn(f64) -> f64) -> Image {
    let mut out = img.clone();
    for v in out.data_mut() {
        *v = f(*v);
    }
    out
}

fn additive_noise(img: &Image, var: f64, rng: &mut ChaCha8Rng) -> Image {
    let normal = Normal::new(0.0, var.sqrt()).expect("finite std");
    let mut out = img.clone();
    for v in out.data_mut() {
        *v += normal.sample(rng);
    }
    out
}

/// Full-range BT.601 (JPEG) colour transform, chroma centred at 0.
fn to_ycbcr(p: &[f64]) -> [f64; 3] {
    let (r, g, b) = (p[0], p[1], p[2]);
    [
        0.299 * r + 0.587 * g + 0.114 * b,
        -0.168736 * r - 0.331264 * g + 0.5 * b,
        0.5 * r - 0.418688 * g - 0.081312 * b,
    ]
}

fn from_ycbcr(y: f64, cb: f64, cr: f64) -> [f64; 3] {
    [y + 1.402 * cr, y - 0.344136 * cb - 0.714136 * cr, y + 1.772 * cb]
}

fn color_component_noise(img: &Image, var: f64, rng: &mut ChaCha8Rng) -> Image {
    if img.channels() == 1 {
        return additive_noise(img, var, rng);
    }
    let normal = Normal::new(0.0, var.sqrt()).expect("finite std");
    let mut out = img.clone();
    for px in out.data_mut().chunks_exact_mut(3) {
        let [y, cb, cr] = to_ycbcr(px);
        let n: [f64; 3] = std::array::from_fn(|_| normal.sample(rng));
        px.copy_from_slice(&from_ycbcr(y + n[0], cb + n[1], cr + n[2]));
    }
    out
}

fn fft2(data: &mut [Complex<f64>], w: usize, h: usize, inverse: bool) {
    let mut planner = FftPlanner::new();
    let (row, col) = if inverse {
        (planner.plan_fft_inverse(w), planner.plan_fft_inverse(h))
    } else {
        (planner.plan_fft_forward(w), planner.plan_fft_forward(h))
    };
    for r in data.chunks_exact_mut(w) {
        row.process(r);
    }
    let mut column = vec![Complex::new(0.0, 0.0); h];
    for x in 0..w {
        for y in 0..h {
            column[y] = data[y * w + x];
        }
        col.process(&mut column);
        for y in 0..h {
            data[y * w + x] = column[y];
        }
    }
}

/// White Gaussian noise passed through an ideal radial high-pass that keeps
/// spatial frequencies at or above half the Nyquist frequency.
fn high_frequency_noise(img: &Image, var: f64, rng: &mut ChaCha8Rng) -> Image {
    let (w, h) = (img.width(), img.height());
    let normal = Normal::new(0.0, var.sqrt()).expect("finite std");
    let mut out = img.clone();
    for c in 0..img.channels() {
        let mut buf: Vec<Complex<f64>> = (0..w * h).map(|_| Complex::new(normal.sample(rng), 0.0)).collect();
        fft2(&mut buf, w, h, false);
        for y in 0..h {
            let fy = y.min(h - y) as f64 / h as f64;
            for x in 0..w {
                let fx = x.min(w - x) as f64 / w as f64;
                if fx.hypot(fy) < 0.25 {
                    buf[y * w + x] = Complex::new(0.0, 0.0);
                }
            }
        }
        fft2(&mut buf, w, h, true);
        let scale = 1.0 / (w * h) as f64;
        let mut plane = img.plane(c);
        for (v, n) in plane.iter_mut().zip(&buf) {
            *v += n.re * scale;
        }
        out.set_plane(c, &plane);
    }
    out
}

fn impulse_noise(img: &Image, density: f64, rng: &mut ChaCha8Rng) -> Image {
    let mut out = img.clone();
    let ch = img.channels();
    for px in out.data_mut().chunks_exact_mut(ch) {
        if rng.random::<f64>() < density {
            let v = if rng.random::<bool>() { 1.0 } else { 0.0 };
            px.fill(v);
        }
    }
    out
}

/// Separable Gaussian blur, kernel truncated at ±3σ and renormalised,
/// replicated borders.
fn gaussian_blur(img: &Image, std: f64) -> Image {
    let radius = (3.0 * std).ceil() as usize;
    if std == 0.0 || radius == 0 {
        return img.clone();
    }
    let mut kernel: Vec<f64> = (0..=2 * radius)
        .map(|i| {
            let d = i as f64 - radius as f64;
            (-d * d / (2.0 * std * std)).exp()
        })
        .collect();
    let total: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= total);

    let (w, h) = (img.width(), img.height());
    let mut out = img.clone();
    let r = radius as i64;
    for c in 0..img.channels() {
        let src = img.plane(c);
        let mut tmp = vec![0.0; w * h];
        for y in 0..h {
            for x in 0..w {
                tmp[y * w + x] = kernel
                    .iter()
                    .enumerate()
                    .map(|(i, k)| k * src[y * w + (x as i64 + i as i64 - r).clamp(0, w as i64 - 1) as usize])
                    .sum();
            }
        }
        let mut dst = vec![0.0; w * h];
        for y in 0..h {
            for x in 0..w {
                dst[y * w + x] = kernel
                    .iter()
                    .enumerate()
                    .map(|(i, k)| k * tmp[(y as i64 + i as i64 - r).clamp(0, h as i64 - 1) as usize * w + x])
                    .sum();
            }
        }
        out.set_plane(c, &dst);
    }
    out
}

const JPEG_LUMA: [f64; 64] = [
    16., 11., 10., 16., 24., 40., 51., 61., 12., 12., 14., 19., 26., 58., 60., 55., 14., 13., 16., 24., 40., 57.,
    69., 56., 14., 17., 22., 29., 51., 87., 80., 62., 18., 22., 37., 56., 68., 109., 103., 77., 24., 35., 55., 64.,
    81., 104., 113., 92., 49., 64., 78., 87., 103., 121., 120., 101., 72., 92., 95., 98., 112., 100., 103., 99.,
];

/// Luminance quantization table for a JPEG quality factor (IJG scaling).
pub fn jpeg_table(quality: f64) -> [f64; 64] {
    let q = quality.round().clamp(1.0, 100.0);
    let scale = if q < 50.0 { 5000.0 / q } else { 200.0 - 2.0 * q };
    JPEG_LUMA.map(|b| ((b * scale + 50.0) / 100.0).floor().clamp(1.0, 255.0))
}

fn dct_basis() -> [[f64; 8]; 8] {
    let mut m = [[0.0; 8]; 8];
    for (u, row) in m.iter_mut().enumerate() {
        let a = if u == 0 { (1.0f64 / 8.0).sqrt() } else { 0.25f64.sqrt() };
        for (x, v) in row.iter_mut().enumerate() {
            *v = a * ((2 * x + 1) as f64 * u as f64 * std::f64::consts::PI / 16.0).cos();
        }
    }
    m
}

/// 8×8 block DCT of luma (0–255 scale), quantized with the scaled table and
/// reconstructed; chroma is left untouched.
fn jpeg_quantization(img: &Image, quality: f64) -> Image {
    let table = jpeg_table(quality);
    let basis = dct_basis();
    let (w, h) = (img.width(), img.height());
    let color = img.channels() == 3;
    let mut luma = Vec::with_capacity(w * h);
    let mut chroma = Vec::with_capacity(if color { w * h } else { 0 });
    for px in img.data().chunks_exact(img.channels()) {
        if color {
            let [y, cb, cr] = to_ycbcr(px);
            luma.push(y);
            chroma.push((cb, cr));
        } else {
            luma.push(px[0]);
        }
    }
    let mut recon = luma.clone();
    for by in (0..h).step_by(8) {
        for bx in (0..w).step_by(8) {
            let mut block = [[0.0; 8]; 8];
            for (y, row) in block.iter_mut().enumerate() {
                for (x, v) in row.iter_mut().enumerate() {
                    let sy = (by + y).min(h - 1);
                    let sx = (bx + x).min(w - 1);
                    *v = luma[sy * w + sx] * 255.0 - 128.0;
                }
            }
            let mut coef = [[0.0; 8]; 8];
            for u in 0..8 {
                for v in 0..8 {
                    let mut s = 0.0;
                    for y in 0..8 {
                        for x in 0..8 {
                            s += basis[u][y] * basis[v][x] * block[y][x];
                        }
                    }
                    let q = table[u * 8 + v];
                    coef[u][v] = (s / q).round() * q;
                }
            }
            for y in 0..8 {
                for x in 0..8 {
                    if by + y >= h || bx + x >= w {
                        continue;
                    }
                    let mut s = 0.0;
                    for u in 0..8 {
                        for v in 0..8 {
                            s += basis[u][y] * basis[v][x] * coef[u][v];
                        }
                    }
                    recon[(by + y) * w + bx + x] = (s + 128.0) / 255.0;
                }
            }
        }
    }
    let mut out = img.clone();
    for (i, px) in out.data_mut().chunks_exact_mut(img.channels()).enumerate() {
        if color {
            let (cb, cr) = chroma[i];
            px.copy_from_slice(&from_ycbcr(recon[i], cb, cr));
        } else {
            px[0] = recon[i];
        }
    }
    out
}

/// Copies `n` random 15×15 patches of the original to positions displaced
/// by up to one patch size in each direction.
fn patch_displacement(img: &Image, n: usize, rng: &mut ChaCha8Rng) -> Image {
    const P: usize = 15;
    let (w, h) = (img.width(), img.height());
    let pw = P.min(w);
    let ph = P.min(h);
    let mut out = img.clone();
    for _ in 0..n {
        let sx = rng.random_range(0..=w - pw);
        let sy = rng.random_range(0..=h - ph);
        let dx = (sx as i64 + rng.random_range(-(P as i64)..=P as i64)).clamp(0, (w - pw) as i64) as usize;
        let dy = (sy as i64 + rng.random_range(-(P as i64)..=P as i64)).clamp(0, (h - ph) as i64) as usize;
        for y in 0..ph {
            for x in 0..pw {
                for c in 0..img.channels() {
                    out.set(dx + x, dy + y, c, img.get(sx + x, sy + y, c));
                }
            }
        }
    }
    out
}

fn block_replacement(img: &Image, n: usize, rng: &mut ChaCha8Rng) -> Image {
    const B: usize = 32;
    let (w, h) = (img.width(), img.height());
    let bw = B.min(w);
    let bh = B.min(h);
    let mut out = img.clone();
    for _ in 0..n {
        let x0 = rng.random_range(0..=w - bw);
        let y0 = rng.random_range(0..=h - bh);
        let colour: Vec<f64> = (0..img.channels()).map(|_| rng.random::<f64>()).collect();
        for y in y0..y0 + bh {
            for x in x0..x0 + bw {
                for (c, v) in colour.iter().enumerate() {
                    out.set(x, y, c, *v);
                }
            }
        }
    }
    out
}

/// Scales deviations from each channel's mean by `gain`.
fn contrast(img: &Image, gain: f64) -> Image {
    let mut out = img.clone();
    for c in 0..img.channels() {
        let plane = img.plane(c);
        let m = plane.iter().sum::<f64>() / plane.len() as f64;
        let scaled: Vec<f64> = plane.iter().map(|v| m + gain * (v - m)).collect();
        out.set_plane(c, &scaled);
    }
    out
}

fn saturation(img: &Image, gain: f64) -> Image {
    let mut out = img.clone();
    for px in out.data_mut().chunks_exact_mut(3) {
        let [y, cb, cr] = to_ycbcr(px);
        px.copy_from_slice(&from_ycbcr(y, gain * cb, gain * cr));
    }
    out
}

/// Per-channel quantization to `levels` values with Floyd–Steinberg error
/// diffusion in raster order.
fn dither(img: &Image, levels: usize) -> Image {
    let (w, h) = (img.width(), img.height());
    let steps = (levels - 1) as f64;
    let mut out = img.clone();
    for c in 0..img.channels() {
        let mut p = img.plane(c);
        for y in 0..h {
            for x in 0..w {
                let old = p[y * w + x];
                let new = (old.clamp(0.0, 1.0) * steps).round() / steps;
                p[y * w + x] = new;
                let err = old - new;
                let mut spread = |dx: i64, dy: usize, f: f64| {
                    let nx = x as i64 + dx;
                    if nx >= 0 && (nx as usize) < w && y + dy < h {
                        p[(y + dy) * w + nx as usize] += err * f;
                    }
                };
                spread(1, 0, 7.0 / 16.0);
                spread(-1, 1, 3.0 / 16.0);
                spread(0, 1, 5.0 / 16.0);
                spread(1, 1, 1.0 / 16.0);
            }
        }
        out.set_plane(c, &p);
    }
    out
}

/// Shifts red right by `red` and blue left by `blue` pixels, replicating
/// the border.
fn chromatic_aberration(img: &Image, red: i64, blue: i64) -> Image {
    let w = img.width() as i64;
    let mut out = img.clone();
    for y in 0..img.height() {
        for x in 0..img.width() {
            let xr = (x as i64 - red).clamp(0, w - 1) as usize;
            let xb = (x as i64 + blue).clamp(0, w - 1) as usize;
            out.set(x, y, 0, img.get(xr, y, 0));
            out.set(x, y, 2, img.get(xb, y, 2));
        }
    }
    out
}

/// The reference plus `levels` increasingly distorted versions. Member `l`
/// has φ = −l, so φ grows with quality.
pub fn build_distortion_group(
    img: &Image,
    kind: DistortionKind,
    levels: usize,
    seed: u64,
    source_id: usize,
) -> Result<RankedGroup> {
    if levels < 2 || levels > kind.levels() {
        return Err(DistortionError::Level {
            kind,
            level: levels,
            max: kind.levels(),
        });
    }
    let mut images = vec![img.clone()];
    let mut phi = vec![0.0];
    for level in 1..=levels {
        let spec = kind.level_params(level)?;
        images.push(apply_distortion(img, &spec, seeds::derive_seed(seed, level as u64))?);
        phi.push(-(level as f64));
    }
    Ok(RankedGroup {
        source_id,
        phi,
        images,
    })
}
