//! PNG sheet layout for control grids and interpolation strips.

use facectl::image::{FloatImage, RgbImage};
use facectl::synthworld::FRAME_SIZE;

pub const BACKGROUND: [u8; 3] = [32, 32, 32];

/// One sheet row: an optional label image in the first column, then frames.
pub struct SheetRow {
    pub label: Option<RgbImage>,
    pub frames: Vec<RgbImage>,
}

impl SheetRow {
    pub fn from_float(label: Option<&FloatImage>, frames: &[FloatImage]) -> Self {
        Self { label: label.map(FloatImage::quantize), frames: frames.iter().map(FloatImage::quantize).collect() }
    }
}

/// Lays rows out on a grid of `FRAME_SIZE` cells separated by `gap` pixels.
/// Column 0 holds labels; missing cells stay background.
pub fn compose(rows: &[SheetRow], gap: usize) -> RgbImage {
    let cols = 1 + rows.iter().map(|r| r.frames.len()).max().unwrap_or(0);
    let step = FRAME_SIZE + gap;
    let width = cols * step + gap;
    let height = rows.len() * step + gap;
    let mut sheet = RgbImage::filled(width, height, BACKGROUND);
    for (i, row) in rows.iter().enumerate() {
        let y = gap + i * step;
        if let Some(l) = &row.label {
            sheet.blit(l, y, gap);
        }
        for (j, f) in row.frames.iter().enumerate() {
            sheet.blit(f, y, gap + (j + 1) * step);
        }
    }
    sheet
}
