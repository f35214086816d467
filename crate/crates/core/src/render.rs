//! PGM/PPM output for inpainting panels and glimpse overlays.

use std::fs;
use std::path::Path;

use cram_diff::Tensor;

use crate::decoders::composite;
use crate::error::{Error, Result};
use crate::sampler::{to_pixel, AffineParams};

/// Inpainting panel order: ground truth, input, generated, composite.
pub const PANELS: [&str; 4] = ["truth", "input", "generated", "composite"];

const PALETTE: [[u8; 3]; 6] = [
    [255, 40, 40],
    [40, 220, 40],
    [60, 120, 255],
    [255, 200, 0],
    [255, 0, 255],
    [0, 230, 230],
];

/// 3x5 glyphs, one row per `u8`, high bit on the left.
const DIGITS: [[u8; 5]; 10] = [
    [0b111, 0b101, 0b101, 0b101, 0b111],
    [0b010, 0b110, 0b010, 0b010, 0b111],
    [0b111, 0b001, 0b111, 0b100, 0b111],
    [0b111, 0b001, 0b111, 0b001, 0b111],
    [0b101, 0b101, 0b111, 0b001, 0b001],
    [0b111, 0b100, 0b111, 0b001, 0b111],
    [0b111, 0b100, 0b111, 0b101, 0b111],
    [0b111, 0b001, 0b010, 0b010, 0b010],
    [0b111, 0b101, 0b111, 0b101, 0b111],
    [0b111, 0b101, 0b111, 0b001, 0b111],
];

/// 8-bit gray (1 channel) or RGB (3 channels) raster, row-major,
/// channels interleaved.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Raster {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<u8>,
}

fn to_byte(v: f32) -> u8 {
    (((v.clamp(-1.0, 1.0) + 1.0) * 0.5 * 255.0).round()) as u8
}

impl Raster {
    /// Maps a `[C x H x W]` tensor with values in `[-1, 1]` to bytes.
    pub fn from_tensor(t: &Tensor<f32>) -> Result<Self> {
        let s = t.shape();
        if s.len() != 3 || !(s[0] == 1 || s[0] == 3) {
            return Err(Error::data(format!("cannot render tensor of shape {s:?}")));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let mut data = vec![0u8; c * h * w];
        for ch in 0..c {
            for i in 0..h * w {
                data[i * c + ch] = to_byte(t.data()[ch * h * w + i]);
            }
        }
        Ok(Raster {
            width: w,
            height: h,
            channels: c,
            data,
        })
    }

    pub fn to_rgb(&self) -> Raster {
        if self.channels == 3 {
            return self.clone();
        }
        Raster {
            width: self.width,
            height: self.height,
            channels: 3,
            data: self.data.iter().flat_map(|&v| [v, v, v]).collect(),
        }
    }

    /// Nearest-neighbour enlargement by an integer factor.
    pub fn upscale(&self, k: usize) -> Raster {
        let (w, c) = (self.width * k, self.channels);
        let mut data = vec![0u8; w * self.height * k * c];
        for y in 0..self.height * k {
            for x in 0..w {
                let src = ((y / k) * self.width + x / k) * c;
                data[(y * w + x) * c..(y * w + x + 1) * c].copy_from_slice(&self.data[src..src + c]);
            }
        }
        Raster {
            width: w,
            height: self.height * k,
            channels: c,
            data,
        }
    }

    pub fn pixel(&self, x: usize, y: usize) -> &[u8] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }

    fn put(&mut self, x: i64, y: i64, rgb: [u8; 3]) {
        if x < 0 || y < 0 || x >= self.width as i64 || y >= self.height as i64 {
            return;
        }
        let i = (y as usize * self.width + x as usize) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Outline with corners `(x0, y0)` and `(x1, y1)`, clipped to the raster.
    pub fn draw_rect(&mut self, x0: i64, y0: i64, x1: i64, y1: i64, rgb: [u8; 3]) {
        for x in x0..=x1 {
            self.put(x, y0, rgb);
            self.put(x, y1, rgb);
        }
        for y in y0..=y1 {
            self.put(x0, y, rgb);
            self.put(x1, y, rgb);
        }
    }

    /// Decimal label with its top-left corner at `(x, y)`.
    pub fn draw_number(&mut self, x: i64, y: i64, n: usize, rgb: [u8; 3]) {
        for (k, ch) in n.to_string().bytes().enumerate() {
            let glyph = DIGITS[(ch - b'0') as usize];
            for (row, bits) in glyph.iter().enumerate() {
                for col in 0..3 {
                    if bits >> (2 - col) & 1 == 1 {
                        self.put(x + 4 * k as i64 + col, y + row as i64, rgb);
                    }
                }
            }
        }
    }

    /// Binary PGM (`P5`) for gray rasters, PPM (`P6`) for RGB.
    pub fn encode(&self) -> Vec<u8> {
        let magic = if self.channels == 1 { "P5" } else { "P6" };
        let mut out = format!("{magic}\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.data);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut fields = Vec::new();
        let mut pos = 0;
        while fields.len() < 4 {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(Error::format(pos as u64, "truncated image header"));
            }
            fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
        }
        let channels = match fields[0].as_str() {
            "P5" => 1,
            "P6" => 3,
            _ => return Err(Error::format(0, "not a binary PGM/PPM file")),
        };
        let num = |s: &str| {
            s.parse::<usize>()
                .map_err(|_| Error::format(0, format!("bad header field `{s}`")))
        };
        let (width, height) = (num(&fields[1])?, num(&fields[2])?);
        if num(&fields[3])? != 255 {
            return Err(Error::format(0, "only 8-bit images are supported"));
        }
        let data = bytes.get(pos + 1..).unwrap_or(&[]).to_vec();
        if data.len() != width * height * channels {
            return Err(Error::format(pos as u64 + 1, "pixel data has the wrong length"));
        }
        Ok(Raster {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.encode())?;
        Ok(())
    }

    pub fn extension(&self) -> &'static str {
        if self.channels == 1 {
            "pgm"
        } else {
            "ppm"
        }
    }
}

/// Pixel-space corners `(x0, y0, x1, y1)` of the glimpse window of `tau`
/// on an `h x w` image.
pub fn tau_rect(tau: AffineParams, h: usize, w: usize) -> [f64; 4] {
    [
        to_pixel(tau.tx - tau.s, w),
        to_pixel(tau.ty - tau.s, h),
        to_pixel(tau.tx + tau.s, w),
        to_pixel(tau.ty + tau.s, h),
    ]
}

/// The image enlarged by `scale` with one numbered rectangle per glimpse.
pub fn overlay(image: &Tensor<f32>, taus: &[AffineParams], scale: usize) -> Result<Raster> {
    let scale = scale.max(1);
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let mut r = Raster::from_tensor(image)?.to_rgb().upscale(scale);
    let k = scale as f64;
    let map = |p: f64| (p * k + (k - 1.0) / 2.0).round() as i64;
    for (n, &tau) in taus.iter().enumerate() {
        let [x0, y0, x1, y1] = tau_rect(tau, h, w);
        let rgb = PALETTE[n % PALETTE.len()];
        let (x0, y0, x1, y1) = (map(x0), map(y0), map(x1), map(y1));
        r.draw_rect(x0, y0, x1, y1, rgb);
        r.draw_number(x0 + 2, y0 + 2, n + 1, rgb);
    }
    Ok(r)
}

/// Ground truth, contaminated input, generated image and composite.
pub fn inpainting_panels(
    truth: &Tensor<f32>,
    input: &Tensor<f32>,
    generated: &Tensor<f32>,
    clue: &Tensor<f32>,
) -> Result<[Raster; 4]> {
    let comp = composite(generated, input, clue)?;
    Ok([
        Raster::from_tensor(truth)?,
        Raster::from_tensor(input)?,
        Raster::from_tensor(generated)?,
        Raster::from_tensor(&comp)?,
    ])
}
