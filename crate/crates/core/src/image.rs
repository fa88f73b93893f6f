//! Raster types shared by the renderer, the augmenters and the report writers.
//!
//! Pixel centers sit at half-integer coordinates: pixel `(row, col)` covers
//! the unit square whose center is `(col + 0.5, row + 0.5)` in continuous
//! `(x, y)` image coordinates.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

/// 8-bit RGB image, row-major, interleaved channels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

/// Floating point RGB image in `[0, 1]`, same layout as [`RgbImage`].
#[derive(Clone, Debug, PartialEq)]
pub struct FloatImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

/// Binary per-pixel mask.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    pub width: usize,
    pub height: usize,
    pub bits: Vec<bool>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0; width * height * 3],
        }
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        let mut data = Vec::with_capacity(width * height * 3);
        for _ in 0..width * height {
            data.extend_from_slice(&rgb);
        }
        Self {
            width,
            height,
            data,
        }
    }

    pub fn pixel(&self, row: usize, col: usize) -> [u8; 3] {
        let i = (row * self.width + col) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn to_float(&self) -> FloatImage {
        FloatImage {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&v| v as f32 / 255.0).collect(),
        }
    }

    /// Copies `src` into `self` with its top-left corner at `(row, col)`.
    pub fn blit(&mut self, src: &RgbImage, row: usize, col: usize) {
        for r in 0..src.height {
            let dr = row + r;
            if dr >= self.height {
                break;
            }
            for c in 0..src.width {
                let dc = col + c;
                if dc >= self.width {
                    break;
                }
                let s = (r * src.width + c) * 3;
                let d = (dr * self.width + dc) * 3;
                self.data[d..d + 3].copy_from_slice(&src.data[s..s + 3]);
            }
        }
    }

    pub fn encode_png(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        {
            let mut enc = png::Encoder::new(&mut out, self.width as u32, self.height as u32);
            enc.set_color(png::ColorType::Rgb);
            enc.set_depth(png::BitDepth::Eight);
            enc.set_compression(png::Compression::Balanced);
            enc.set_filter(png::Filter::Sub);
            let mut writer = enc
                .write_header()
                .map_err(|e| Error::Data(format!("png header: {e}")))?;
            writer
                .write_image_data(&self.data)
                .map_err(|e| Error::Data(format!("png encode: {e}")))?;
        }
        Ok(out)
    }

    pub fn decode_png(bytes: &[u8]) -> Result<Self> {
        let decoder = png::Decoder::new(std::io::Cursor::new(bytes));
        let mut reader = decoder
            .read_info()
            .map_err(|e| Error::Data(format!("png decode: {e}")))?;
        let mut buf = vec![
            0;
            reader
                .output_buffer_size()
                .ok_or_else(|| Error::Data("png too large".into()))?
        ];
        let info = reader
            .next_frame(&mut buf)
            .map_err(|e| Error::Data(format!("png decode: {e}")))?;
        if info.color_type != png::ColorType::Rgb || info.bit_depth != png::BitDepth::Eight {
            return Err(Error::Data(format!(
                "expected 8-bit RGB png, got {:?}/{:?}",
                info.color_type, info.bit_depth
            )));
        }
        buf.truncate(info.buffer_size());
        Ok(Self {
            width: info.width as usize,
            height: info.height as usize,
            data: buf,
        })
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let bytes = self.encode_png()?;
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode_png(&bytes)
    }
}

impl FloatImage {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; width * height * 3],
        }
    }

    pub fn quantize(&self) -> RgbImage {
        RgbImage {
            width: self.width,
            height: self.height,
            data: self
                .data
                .iter()
                .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
                .collect(),
        }
    }

    pub fn get(&self, row: usize, col: usize, ch: usize) -> f32 {
        self.data[(row * self.width + col) * 3 + ch]
    }

    /// Bilinear sample at continuous coordinates with edge clamping.
    pub fn sample(&self, x: f64, y: f64) -> [f32; 3] {
        let fx = (x - 0.5).clamp(0.0, (self.width - 1) as f64);
        let fy = (y - 0.5).clamp(0.0, (self.height - 1) as f64);
        let x0 = fx.floor() as usize;
        let y0 = fy.floor() as usize;
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let ax = fx - x0 as f64;
        let ay = fy - y0 as f64;
        let mut out = [0f32; 3];
        for (ch, o) in out.iter_mut().enumerate() {
            let p00 = self.get(y0, x0, ch) as f64;
            let p01 = self.get(y0, x1, ch) as f64;
            let p10 = self.get(y1, x0, ch) as f64;
            let p11 = self.get(y1, x1, ch) as f64;
            let top = p00 + (p01 - p00) * ax;
            let bot = p10 + (p11 - p10) * ax;
            *o = (top + (bot - top) * ay) as f32;
        }
        out
    }

    /// Resamples the image so that output point `p` reads input point `inverse.apply(p)`.
    pub fn warp(&self, inverse: &Affine2) -> FloatImage {
        let mut out = FloatImage::new(self.width, self.height);
        for row in 0..self.height {
            for col in 0..self.width {
                let [x, y] = inverse.apply([col as f64 + 0.5, row as f64 + 0.5]);
                let px = self.sample(x, y);
                let i = (row * self.width + col) * 3;
                out.data[i..i + 3].copy_from_slice(&px);
            }
        }
        out
    }

    pub fn mean_abs_diff(&self, other: &FloatImage) -> f64 {
        assert_eq!(self.data.len(), other.data.len());
        let s: f64 = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs() as f64)
            .sum();
        s / self.data.len() as f64
    }
}

impl Mask {
    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.bits[row * self.width + col]
    }

    pub fn union(&self, other: &Mask) -> Mask {
        Mask {
            width: self.width,
            height: self.height,
            bits: self.bits.iter().zip(&other.bits).map(|(a, b)| *a || *b).collect(),
        }
    }
}

/// 2-D affine map `p -> M p + t`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Affine2 {
    pub m: [[f64; 2]; 2],
    pub t: [f64; 2],
}

impl Affine2 {
    pub const IDENTITY: Affine2 = Affine2 {
        m: [[1.0, 0.0], [0.0, 1.0]],
        t: [0.0, 0.0],
    };

    /// Rotation by `angle` and isotropic `scale` about `center`.
    pub fn similarity_about(center: [f64; 2], angle: f64, scale: f64) -> Self {
        let (s, c) = angle.sin_cos();
        let m = [[scale * c, -scale * s], [scale * s, scale * c]];
        let t = [
            center[0] - (m[0][0] * center[0] + m[0][1] * center[1]),
            center[1] - (m[1][0] * center[0] + m[1][1] * center[1]),
        ];
        Self { m, t }
    }

    pub fn apply(&self, p: [f64; 2]) -> [f64; 2] {
        [
            self.m[0][0] * p[0] + self.m[0][1] * p[1] + self.t[0],
            self.m[1][0] * p[0] + self.m[1][1] * p[1] + self.t[1],
        ]
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &Affine2) -> Affine2 {
        let a = &self.m;
        let b = &other.m;
        let m = [
            [
                a[0][0] * b[0][0] + a[0][1] * b[1][0],
                a[0][0] * b[0][1] + a[0][1] * b[1][1],
            ],
            [
                a[1][0] * b[0][0] + a[1][1] * b[1][0],
                a[1][0] * b[0][1] + a[1][1] * b[1][1],
            ],
        ];
        let t = self.apply(other.t);
        Affine2 { m, t }
    }

    pub fn determinant(&self) -> f64 {
        self.m[0][0] * self.m[1][1] - self.m[0][1] * self.m[1][0]
    }

    pub fn inverse(&self) -> Option<Affine2> {
        let det = self.determinant();
        if det.abs() < 1e-12 {
            return None;
        }
        let inv = [
            [self.m[1][1] / det, -self.m[0][1] / det],
            [-self.m[1][0] / det, self.m[0][0] / det],
        ];
        let t = [
            -(inv[0][0] * self.t[0] + inv[0][1] * self.t[1]),
            -(inv[1][0] * self.t[0] + inv[1][1] * self.t[1]),
        ];
        Some(Affine2 { m: inv, t })
    }

    /// Least-squares affine map sending each `src[i]` to `dst[i]`.
    ///
    /// Returns `None` when the source points are degenerate (collinear or fewer than 3).
    pub fn fit(src: &[[f64; 2]], dst: &[[f64; 2]]) -> Option<Affine2> {
        if src.len() != dst.len() || src.len() < 3 {
            return None;
        }
        // Normal equations for [x y 1] · [a b tx]^T, shared by both output rows.
        let mut ata = [[0f64; 3]; 3];
        let mut atb = [[0f64; 3]; 2];
        for (s, d) in src.iter().zip(dst) {
            let row = [s[0], s[1], 1.0];
            for i in 0..3 {
                for j in 0..3 {
                    ata[i][j] += row[i] * row[j];
                }
                atb[0][i] += row[i] * d[0];
                atb[1][i] += row[i] * d[1];
            }
        }
        let sol_x = solve3(ata, atb[0])?;
        let sol_y = solve3(ata, atb[1])?;
        Some(Affine2 {
            m: [[sol_x[0], sol_x[1]], [sol_y[0], sol_y[1]]],
            t: [sol_x[2], sol_y[2]],
        })
    }
}

fn solve3(mut a: [[f64; 3]; 3], mut b: [f64; 3]) -> Option<[f64; 3]> {
    let scale = a.iter().flatten().fold(0f64, |m, v| m.max(v.abs())).max(1.0);
    for col in 0..3 {
        let pivot = (col..3).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if a[pivot][col].abs() < 1e-10 * scale {
            return None;
        }
        a.swap(col, pivot);
        b.swap(col, pivot);
        for row in col + 1..3 {
            let f = a[row][col] / a[col][col];
            for k in col..3 {
                a[row][k] -= f * a[col][k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = [0f64; 3];
    for row in (0..3).rev() {
        let mut acc = b[row];
        for k in row + 1..3 {
            acc -= a[row][k] * x[k];
        }
        x[row] = acc / a[row][row];
    }
    Some(x)
}
