//! Density CSV files.
//!
//! One grid row per line, top row first (same orientation as scenario
//! documents), values comma-separated and formatted so they parse back to
//! the identical f64. The single header line is
//! `# width height time species`, where species is 0 for the total density
//! and the 1-based species id otherwise.

use std::io::{BufRead, Write};

use anyhow::{bail, Context, Result};

pub struct DensityFile {
    pub width: usize,
    pub height: usize,
    pub time: usize,
    /// 0 for the total density, 1-based species id otherwise.
    pub species: usize,
    /// Row-major, row 0 at the bottom (grid order).
    pub values: Vec<f64>,
}

pub fn write_density<W: Write>(
    mut w: W,
    width: usize,
    height: usize,
    time: usize,
    species: usize,
    values: &[f64],
) -> Result<()> {
    writeln!(w, "# {width} {height} {time} {species}")?;
    for row in (0..height).rev() {
        let mut line = String::new();
        for col in 0..width {
            if col > 0 {
                line.push(',');
            }
            line.push_str(&format!("{}", values[row * width + col]));
        }
        writeln!(w, "{line}")?;
    }
    Ok(())
}

pub fn read_density<R: BufRead>(r: R) -> Result<DensityFile> {
    let mut lines = r.lines();
    let header = lines.next().context("empty density file")??;
    let header = header
        .strip_prefix('#')
        .context("density file missing `# width height time species` header")?;
    let fields: Vec<usize> = header
        .split_whitespace()
        .map(|t| t.parse::<usize>())
        .collect::<Result<_, _>>()
        .context("malformed density header")?;
    if fields.len() != 4 {
        bail!("density header needs four fields");
    }
    let (width, height, time, species) = (fields[0], fields[1], fields[2], fields[3]);
    let mut values = vec![0.0; width * height];
    let mut seen = 0usize;
    for line in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        if seen >= height {
            bail!("density file has more than {height} rows");
        }
        let grid_row = height - 1 - seen;
        let row: Vec<f64> = line
            .split(',')
            .map(|t| t.trim().parse::<f64>())
            .collect::<Result<_, _>>()
            .with_context(|| format!("bad value in density row {seen}"))?;
        if row.len() != width {
            bail!("density row {seen} has {} values, expected {width}", row.len());
        }
        values[grid_row * width..(grid_row + 1) * width].copy_from_slice(&row);
        seen += 1;
    }
    if seen != height {
        bail!("density file has {seen} rows, expected {height}");
    }
    Ok(DensityFile {
        width,
        height,
        time,
        species,
        values,
    })
}
