//! File interchange: PFM float maps, PNG previews and PNG inputs.
//!
//! PFM layout: an ASCII header `Pf` (one channel) or `PF` (three channels),
//! then `width height`, then a scale whose sign gives the byte order
//! (negative = little-endian), each on its own line, followed by raw `f32`
//! samples, channel-interleaved, rows stored bottom to top. We always write
//! little-endian with scale `-1.0` and read either byte order.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use image::{ImageBuffer, Luma, Rgb, RgbImage};
use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::grid::{Grid, Image, ScalarField, ValidMask, VectorField};

/// Decoded PFM contents with rows top to bottom.
#[derive(Clone, Debug, PartialEq)]
pub struct Pfm {
    pub width: usize,
    pub height: usize,
    /// 1 (`Pf`) or 3 (`PF`).
    pub channels: usize,
    /// Row-major, channel-interleaved samples, first row at the top.
    pub data: Vec<f32>,
}

impl Pfm {
    pub fn write_to(&self, mut out: impl Write) -> Result<()> {
        let magic = match self.channels {
            1 => "Pf",
            3 => "PF",
            c => return Err(Error::Format(format!("PFM supports 1 or 3 channels, got {c}"))),
        };
        let row_len = self.width * self.channels;
        if self.data.len() != row_len * self.height {
            return Err(Error::Format(format!(
                "PFM buffer holds {} samples, expected {}",
                self.data.len(),
                row_len * self.height
            )));
        }
        write!(out, "{magic}\n{} {}\n-1.0\n", self.width, self.height)?;
        let mut bytes = Vec::with_capacity(self.data.len() * 4);
        for row in self.data.chunks_exact(row_len.max(1)).rev() {
            for v in row {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        out.write_all(&bytes)?;
        Ok(())
    }

    pub fn read_from(input: impl Read) -> Result<Self> {
        let mut reader = BufReader::new(input);
        let magic = header_token(&mut reader)?;
        let channels = match magic.as_str() {
            "Pf" => 1,
            "PF" => 3,
            other => return Err(Error::Format(format!("not a PFM header: {other:?}"))),
        };
        let width: usize = parse_token(&mut reader, "width")?;
        let height: usize = parse_token(&mut reader, "height")?;
        let scale: f32 = parse_token(&mut reader, "scale")?;
        if scale == 0.0 || !scale.is_finite() {
            return Err(Error::Format(format!("invalid PFM scale {scale}")));
        }
        let little_endian = scale < 0.0;
        let row_len = width * channels;
        let mut raw = vec![0u8; row_len * height * 4];
        reader.read_exact(&mut raw)?;
        let samples: Vec<f32> = raw
            .chunks_exact(4)
            .map(|b| {
                let b = [b[0], b[1], b[2], b[3]];
                if little_endian {
                    f32::from_le_bytes(b)
                } else {
                    f32::from_be_bytes(b)
                }
            })
            .collect();
        let data = samples.chunks_exact(row_len.max(1)).rev().flatten().copied().collect();
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = BufWriter::new(File::create(path)?);
        self.write_to(&mut out)?;
        out.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(File::open(path)?)
    }

    pub fn from_scalar(field: &ScalarField) -> Self {
        Self {
            width: field.width(),
            height: field.height(),
            channels: 1,
            data: field.iter().map(|&v| v as f32).collect(),
        }
    }

    pub fn from_vectors(field: &VectorField) -> Self {
        Self {
            width: field.width(),
            height: field.height(),
            channels: 3,
            data: field.iter().flat_map(|v| [v.x as f32, v.y as f32, v.z as f32]).collect(),
        }
    }

    pub fn from_image(image: &Image) -> Result<Self> {
        let (h, w) = image.shape();
        let data = match image.num_channels() {
            1 => image.channel(0).iter().map(|&v| v as f32).collect(),
            3 => (0..h * w)
                .flat_map(|i| (0..3).map(move |c| image.channel(c).as_slice()[i] as f32))
                .collect(),
            c => return Err(Error::Format(format!("PFM supports 1 or 3 channels, got {c}"))),
        };
        Ok(Self {
            width: w,
            height: h,
            channels: image.num_channels(),
            data,
        })
    }

    pub fn to_scalar(&self) -> Result<ScalarField> {
        if self.channels != 1 {
            return Err(Error::Format("expected a single-channel (Pf) map".into()));
        }
        Grid::from_vec(self.height, self.width, self.data.iter().map(|&v| v as f64).collect())
    }

    pub fn to_vectors(&self) -> Result<VectorField> {
        if self.channels != 3 {
            return Err(Error::Format("expected a three-channel (PF) map".into()));
        }
        let data = self
            .data
            .chunks_exact(3)
            .map(|c| Vector3::new(c[0] as f64, c[1] as f64, c[2] as f64))
            .collect();
        Grid::from_vec(self.height, self.width, data)
    }

    pub fn to_image(&self) -> Result<Image> {
        let planes = (0..self.channels)
            .map(|c| {
                let data = self.data.iter().skip(c).step_by(self.channels).map(|&v| v as f64).collect();
                Grid::from_vec(self.height, self.width, data)
            })
            .collect::<Result<Vec<_>>>()?;
        Image::new(planes)
    }
}

fn header_token(reader: &mut impl BufRead) -> Result<String> {
    // Tokens are whitespace separated; the single byte after the scale ends the header.
    let mut token = Vec::new();
    loop {
        let mut byte = [0u8];
        if reader.read(&mut byte)? == 0 {
            return Err(Error::Format("truncated PFM header".into()));
        }
        if byte[0].is_ascii_whitespace() {
            if token.is_empty() {
                continue;
            }
            break;
        }
        token.push(byte[0]);
        if token.len() > 64 {
            return Err(Error::Format("PFM header token too long".into()));
        }
    }
    String::from_utf8(token).map_err(|_| Error::Format("non-ASCII PFM header".into()))
}

fn parse_token<T: std::str::FromStr>(reader: &mut impl BufRead, what: &str) -> Result<T> {
    let token = header_token(reader)?;
    token
        .parse()
        .map_err(|_| Error::Format(format!("invalid PFM {what}: {token:?}")))
}

pub fn save_scalar_pfm(path: impl AsRef<Path>, field: &ScalarField) -> Result<()> {
    Pfm::from_scalar(field).save(path)
}

pub fn load_scalar_pfm(path: impl AsRef<Path>) -> Result<ScalarField> {
    Pfm::load(path)?.to_scalar()
}

pub fn save_vector_pfm(path: impl AsRef<Path>, field: &VectorField) -> Result<()> {
    Pfm::from_vectors(field).save(path)
}

pub fn load_vector_pfm(path: impl AsRef<Path>) -> Result<VectorField> {
    Pfm::load(path)?.to_vectors()
}

/// Control points of a perceptually ordered black–purple–orange–yellow ramp.
#[allow(clippy::approx_constant)] // colour samples, not 1/π
const INFERNO: [[f64; 3]; 9] = [
    [0.001, 0.000, 0.014],
    [0.110, 0.047, 0.290],
    [0.316, 0.071, 0.485],
    [0.512, 0.145, 0.485],
    [0.705, 0.212, 0.404],
    [0.875, 0.318, 0.247],
    [0.975, 0.512, 0.098],
    [0.984, 0.744, 0.158],
    [0.988, 0.998, 0.645],
];

/// Colour of `t ∈ [0, 1]` on the inferno-style ramp (clamped).
pub fn inferno(t: f64) -> [u8; 3] {
    let t = if t.is_finite() { t.clamp(0.0, 1.0) } else { 0.0 };
    let x = t * (INFERNO.len() - 1) as f64;
    let i = (x.floor() as usize).min(INFERNO.len() - 2);
    let f = x - i as f64;
    let mut rgb = [0u8; 3];
    for c in 0..3 {
        let v = INFERNO[i][c] * (1.0 - f) + INFERNO[i + 1][c] * f;
        rgb[c] = (v * 255.0).round() as u8;
    }
    rgb
}

/// Depth heatmap: near is bright, far is dark, over `range` or the finite
/// positive data range. Non-finite or non-positive depths render black.
pub fn depth_heatmap(depth: &ScalarField, range: Option<(f64, f64)>) -> RgbImage {
    let (lo, hi) = range.unwrap_or_else(|| {
        depth
            .iter()
            .filter(|d| d.is_finite() && **d > 0.0)
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &d| (lo.min(d), hi.max(d)))
    });
    let span = if hi > lo { hi - lo } else { 1.0 };
    ImageBuffer::from_fn(depth.width() as u32, depth.height() as u32, |x, y| {
        let d = depth[(y as usize, x as usize)];
        if !(d.is_finite() && d > 0.0) {
            return Rgb([0, 0, 0]);
        }
        Rgb(inferno(1.0 - (d - lo) / span))
    })
}

/// Normal map as RGB: each component mapped by (n + 1) / 2.
pub fn normal_rgb(normals: &VectorField) -> RgbImage {
    ImageBuffer::from_fn(normals.width() as u32, normals.height() as u32, |x, y| {
        let n = normals[(y as usize, x as usize)];
        let q = |v: f64| (((v + 1.0) * 0.5).clamp(0.0, 1.0) * 255.0).round() as u8;
        Rgb([q(n.x), q(n.y), q(n.z)])
    })
}

/// 8-bit preview of an image with values in [0, 1] (grey images are replicated).
pub fn image_rgb(image: &Image) -> RgbImage {
    let q = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    let c = |i: usize| image.channel(i.min(image.num_channels() - 1));
    ImageBuffer::from_fn(image.width() as u32, image.height() as u32, |x, y| {
        let (r, col) = (y as usize, x as usize);
        Rgb([q(c(0)[(r, col)]), q(c(1)[(r, col)]), q(c(2)[(r, col)])])
    })
}

pub fn save_png(path: impl AsRef<Path>, img: &RgbImage) -> Result<()> {
    img.save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}

/// Reads a PNG as an image in [0, 1]: grey stays single-channel, colour
/// becomes three channels (alpha dropped).
pub fn load_png_image(path: impl AsRef<Path>) -> Result<Image> {
    let img = image::open(path)?;
    let to_plane = |h: u32, w: u32, f: &dyn Fn(u32, u32) -> f64| {
        Grid::from_fn(h as usize, w as usize, |r, c| f(c as u32, r as u32))
    };
    let (w, h) = (img.width(), img.height());
    if img.color().has_color() {
        let rgb = img.to_rgb32f();
        let planes = (0..3)
            .map(|k| to_plane(h, w, &|x, y| rgb.get_pixel(x, y).0[k] as f64))
            .collect();
        Image::new(planes)
    } else {
        let g = img.to_luma32f();
        Ok(Image::gray(to_plane(h, w, &|x, y| g.get_pixel(x, y).0[0] as f64)))
    }
}

/// Reads a validity mask: any non-zero pixel is valid.
pub fn load_png_mask(path: impl AsRef<Path>) -> Result<ValidMask> {
    let g = image::open(path)?.to_luma16();
    Ok(Grid::from_fn(g.height() as usize, g.width() as usize, |r, c| {
        g.get_pixel(c as u32, r as u32).0[0] != 0
    }))
}

pub fn save_png_mask(path: impl AsRef<Path>, mask: &ValidMask) -> Result<()> {
    let img: ImageBuffer<Luma<u8>, Vec<u8>> =
        ImageBuffer::from_fn(mask.width() as u32, mask.height() as u32, |x, y| {
            Luma([if mask[(y as usize, x as usize)] { 255 } else { 0 }])
        });
    img.save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}

/// Scale of 16-bit depth PNGs: stored value = depth · 256, 0 = no data.
pub const DEPTH_PNG_SCALE: f64 = 256.0;

/// Reads a 16-bit depth PNG; returns the depth and its validity (value > 0).
pub fn load_depth_png(path: impl AsRef<Path>) -> Result<(ScalarField, ValidMask)> {
    let g = image::open(path)?.to_luma16();
    let (h, w) = (g.height() as usize, g.width() as usize);
    let raw = Grid::from_fn(h, w, |r, c| g.get_pixel(c as u32, r as u32).0[0]);
    let depth = raw.map(|&v| if v == 0 { 1.0 } else { v as f64 / DEPTH_PNG_SCALE });
    let valid = raw.map(|&v| v != 0);
    Ok((depth, valid))
}

/// Reads a depth map from `.pfm` or 16-bit `.png`, with a validity mask
/// (finite positive values for PFM).
pub fn load_depth(path: impl AsRef<Path>) -> Result<(ScalarField, ValidMask)> {
    let path = path.as_ref();
    match extension(path).as_deref() {
        Some("pfm") => {
            let raw = load_scalar_pfm(path)?;
            let valid = raw.map(|d| d.is_finite() && *d > 0.0);
            let depth = raw.zip_map(&valid, |&d, &ok| if ok { d } else { 1.0 })?;
            Ok((depth, valid))
        }
        Some("png") => load_depth_png(path),
        _ => Err(Error::Format(format!(
            "unsupported depth file {} (expected .pfm or .png)",
            path.display()
        ))),
    }
}

/// Reads a normal map from a three-channel PFM, or an RGB PNG decoded with
/// the (n + 1) / 2 mapping and renormalized.
pub fn load_normals(path: impl AsRef<Path>) -> Result<VectorField> {
    let path = path.as_ref();
    match extension(path).as_deref() {
        Some("pfm") => load_vector_pfm(path),
        Some("png") => {
            let img = load_png_image(path)?;
            if img.num_channels() != 3 {
                return Err(Error::Format("normal PNG must be RGB".into()));
            }
            let (h, w) = img.shape();
            Ok(Grid::from_fn(h, w, |r, c| {
                let v = Vector3::new(
                    img.channel(0)[(r, c)] * 2.0 - 1.0,
                    img.channel(1)[(r, c)] * 2.0 - 1.0,
                    img.channel(2)[(r, c)] * 2.0 - 1.0,
                );
                let n = v.norm();
                if n > 0.0 {
                    v / n
                } else {
                    v
                }
            }))
        }
        _ => Err(Error::Format(format!(
            "unsupported normal file {} (expected .pfm or .png)",
            path.display()
        ))),
    }
}

/// Reads an image from `.pfm` (values as stored) or `.png` (scaled to [0, 1]).
pub fn load_image(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    match extension(path).as_deref() {
        Some("pfm") => Pfm::load(path)?.to_image(),
        Some("png") => load_png_image(path),
        _ => Err(Error::Format(format!(
            "unsupported image file {} (expected .pfm or .png)",
            path.display()
        ))),
    }
}

fn extension(path: &Path) -> Option<String> {
    path.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase())
}
