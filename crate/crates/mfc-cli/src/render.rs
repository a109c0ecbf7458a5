//! Heatmap rendering as plain-text portable pixmaps (P3).
//!
//! One pixel per grid cell, top row first. The terrain shows through as a
//! background tint; density blends linearly from the tint toward a dark
//! foreground color, saturating at the fixed maximum (default 1, the
//! congestion bound).

use std::io::Write;

use anyhow::Result;
use mfc_core::scenario::{Terrain, TerrainGrid};

pub type Rgb = [u8; 3];

fn terrain_tint(t: Terrain) -> Rgb {
    match t {
        Terrain::Water => [168, 202, 255],
        Terrain::Rough => [240, 196, 172],
        Terrain::Normal => [223, 238, 216],
        Terrain::Start(0) => [52, 64, 148],
        Terrain::Start(1) => [150, 48, 48],
        Terrain::Start(_) => [48, 48, 48],
    }
}

/// Foreground color per layer: 0 renders the total density, `l + 1` the
/// density of species `l`.
fn heat_color(species: usize) -> Rgb {
    match species {
        0 => [84, 24, 120],
        1 => [16, 32, 160],
        2 => [168, 24, 24],
        _ => [16, 16, 16],
    }
}

fn blend(bg: Rgb, fg: Rgb, t: f64) -> Rgb {
    let t = t.clamp(0.0, 1.0);
    let mut out = [0u8; 3];
    for c in 0..3 {
        out[c] = (bg[c] as f64 + (fg[c] as f64 - bg[c] as f64) * t).round() as u8;
    }
    out
}

/// Pixel colors of one frame, row-major top row first.
pub fn frame_pixels(grid: &TerrainGrid, values: &[f64], species: usize, max: f64) -> Vec<Rgb> {
    let fg = heat_color(species);
    let mut pixels = Vec::with_capacity(grid.n());
    for row in (0..grid.height).rev() {
        for col in 0..grid.width {
            let i = row * grid.width + col;
            let t = if max > 0.0 { values[i] / max } else { 0.0 };
            pixels.push(blend(terrain_tint(grid.terrain(i)), fg, t));
        }
    }
    pixels
}

pub fn write_ppm<W: Write>(mut w: W, width: usize, height: usize, pixels: &[Rgb]) -> Result<()> {
    writeln!(w, "P3")?;
    writeln!(w, "{width} {height}")?;
    writeln!(w, "255")?;
    for row in pixels.chunks(width) {
        let mut line = String::new();
        for p in row {
            line.push_str(&format!("{} {} {} ", p[0], p[1], p[2]));
        }
        writeln!(w, "{}", line.trim_end())?;
    }
    Ok(())
}

/// Compose a strip image: one row of frames per layer (total then each
/// species), one column per selected time index, 2-pixel white separators.
pub struct Strip {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<Rgb>,
}

pub fn compose_strip(grid: &TerrainGrid, frames: &[Vec<Vec<Rgb>>]) -> Strip {
    const GAP: usize = 2;
    let rows = frames.len();
    let cols = frames[0].len();
    let fw = grid.width;
    let fh = grid.height;
    let width = cols * fw + (cols - 1) * GAP;
    let height = rows * fh + (rows - 1) * GAP;
    let mut pixels = vec![[255u8, 255, 255]; width * height];
    for (r, row_frames) in frames.iter().enumerate() {
        for (c, frame) in row_frames.iter().enumerate() {
            let y0 = r * (fh + GAP);
            let x0 = c * (fw + GAP);
            for y in 0..fh {
                for x in 0..fw {
                    pixels[(y0 + y) * width + (x0 + x)] = frame[y * fw + x];
                }
            }
        }
    }
    Strip {
        width,
        height,
        pixels,
    }
}
