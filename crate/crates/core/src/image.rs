//! Float images in [0, 1] and binary Netpbm (P5/P6) persistence.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("invalid image dimensions {width}x{height}x{channels}")]
    Dimensions {
        width: usize,
        height: usize,
        channels: usize,
    },
    #[error("netpbm: {0}")]
    Format(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = ImageError> = std::result::Result<T, E>;

/// Interleaved row-major image with 1 or 3 channels.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 || !(channels == 1 || channels == 3) {
            return Err(ImageError::Dimensions {
                width,
                height,
                channels,
            });
        }
        if data.len() != width * height * channels {
            return Err(ImageError::Format(format!(
                "{}x{}x{} image needs {} values, got {}",
                width,
                height,
                channels,
                width * height * channels,
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: f64) -> Result<Self> {
        Self::new(width, height, channels, vec![value; width * height * channels])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: usize, v: f64) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    pub fn clamp(&mut self) {
        for v in &mut self.data {
            *v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
        }
    }

    /// One channel as a contiguous plane.
    pub fn plane(&self, c: usize) -> Vec<f64> {
        self.data.iter().skip(c).step_by(self.channels).copied().collect()
    }

    pub fn set_plane(&mut self, c: usize, plane: &[f64]) {
        for (i, v) in plane.iter().enumerate() {
            self.data[i * self.channels + c] = *v;
        }
    }

    /// Channel-planar copy, `[channels, height, width]`, for network input.
    pub fn to_planar(&self) -> Vec<f64> {
        (0..self.channels).flat_map(|c| self.plane(c)).collect()
    }

    /// Luma (ITU-R BT.601 weights) for 3-channel images; identity for gray.
    pub fn to_gray(&self) -> Image {
        if self.channels == 1 {
            return self.clone();
        }
        let data = self
            .data
            .chunks_exact(3)
            .map(|p| 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2])
            .collect();
        Image::new(self.width, self.height, 1, data).expect("same geometry")
    }

    /// Bilinear sample at continuous coordinates where pixel `i` covers
    /// `[i, i+1)`; coordinates outside the image clamp to the border.
    pub fn sample_bilinear(&self, x: f64, y: f64, c: usize) -> f64 {
        let fx = (x - 0.5).clamp(0.0, (self.width - 1) as f64);
        let fy = (y - 0.5).clamp(0.0, (self.height - 1) as f64);
        let x0 = fx.floor() as usize;
        let y0 = fy.floor() as usize;
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let ax = fx - x0 as f64;
        let ay = fy - y0 as f64;
        let top = self.get(x0, y0, c) * (1.0 - ax) + self.get(x1, y0, c) * ax;
        let bottom = self.get(x0, y1, c) * (1.0 - ax) + self.get(x1, y1, c) * ax;
        top * (1.0 - ay) + bottom * ay
    }

    /// Bilinear resample of the axis-aligned region `[x0, x0+w) × [y0, y0+h)`
    /// to `out_w × out_h` pixels.
    pub fn resample_region(&self, x0: f64, y0: f64, w: f64, h: f64, out_w: usize, out_h: usize) -> Image {
        let mut out = Image::filled(out_w, out_h, self.channels, 0.0).expect("positive size");
        let sx = w / out_w as f64;
        let sy = h / out_h as f64;
        for oy in 0..out_h {
            let y = y0 + (oy as f64 + 0.5) * sy;
            for ox in 0..out_w {
                let x = x0 + (ox as f64 + 0.5) * sx;
                for c in 0..self.channels {
                    out.set(ox, oy, c, self.sample_bilinear(x, y, c));
                }
            }
        }
        out
    }

    pub fn resize(&self, out_w: usize, out_h: usize) -> Image {
        self.resample_region(0.0, 0.0, self.width as f64, self.height as f64, out_w, out_h)
    }

    /// 8-bit quantization with round-half-up after clamping to [0, 1].
    pub fn to_u8(&self) -> Vec<u8> {
        self.data.iter().map(|&v| quantize_u8(v)).collect()
    }

    pub fn from_u8(width: usize, height: usize, channels: usize, bytes: &[u8]) -> Result<Self> {
        Self::new(
            width,
            height,
            channels,
            bytes.iter().map(|&b| b as f64 / 255.0).collect(),
        )
    }

    /// Writes binary PGM (1 channel) or PPM (3 channels).
    pub fn write_pnm<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        let magic = if self.channels == 1 { "P5" } else { "P6" };
        write!(out, "{magic}\n{} {}\n255\n", self.width, self.height)?;
        out.write_all(&self.to_u8())
    }

    pub fn read_pnm<R: Read>(input: R) -> Result<Self> {
        let mut r = BufReader::new(input);
        let magic = next_token(&mut r)?;
        let channels = match magic.as_str() {
            "P5" => 1,
            "P6" => 3,
            other => return Err(ImageError::Format(format!("unsupported magic `{other}`"))),
        };
        let width = parse_num(&next_token(&mut r)?)?;
        let height = parse_num(&next_token(&mut r)?)?;
        let maxval = parse_num(&next_token(&mut r)?)?;
        if maxval != 255 {
            return Err(ImageError::Format(format!("only maxval 255 is supported, found {maxval}")));
        }
        let mut bytes = vec![0u8; width * height * channels];
        r.read_exact(&mut bytes)
            .map_err(|e| ImageError::Format(format!("pixel data: {e}")))?;
        Self::from_u8(width, height, channels, &bytes)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let io = |source| ImageError::Io {
            path: path.display().to_string(),
            source,
        };
        let file = std::fs::File::create(path).map_err(io)?;
        let mut w = std::io::BufWriter::new(file);
        self.write_pnm(&mut w).map_err(io)?;
        w.flush().map_err(io)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|source| ImageError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::read_pnm(file)
    }
}

pub fn quantize_u8(v: f64) -> u8 {
    let v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
    (v * 255.0 + 0.5).floor().min(255.0) as u8
}

fn parse_num(tok: &str) -> Result<usize> {
    tok.parse()
        .map_err(|_| ImageError::Format(format!("expected a number, found `{tok}`")))
}

/// Header token reader that skips whitespace and `#` comments and consumes
/// exactly one whitespace byte after the token.
fn next_token<R: BufRead>(r: &mut R) -> Result<String> {
    let mut tok = String::new();
    let mut byte = [0u8; 1];
    loop {
        let n = r
            .read(&mut byte)
            .map_err(|e| ImageError::Format(format!("header: {e}")))?;
        if n == 0 {
            if tok.is_empty() {
                return Err(ImageError::Format("unexpected end of header".into()));
            }
            return Ok(tok);
        }
        let c = byte[0];
        if c == b'#' && tok.is_empty() {
            let mut line = String::new();
            r.read_line(&mut line)
                .map_err(|e| ImageError::Format(format!("header: {e}")))?;
            continue;
        }
        if c.is_ascii_whitespace() {
            if tok.is_empty() {
                continue;
            }
            return Ok(tok);
        }
        tok.push(c as char);
    }
}
