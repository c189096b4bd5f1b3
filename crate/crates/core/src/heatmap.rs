//! Equirectangular FoV heatmaps on an 18x36 grid of 10-degree bins.
//!
//! Row 0 covers latitudes `[-90, -80)` degrees and column 0 covers
//! longitudes `[-180, -170)`. Each frame contributes a rectangle of ones
//! the size of the FoV, blurred along each row with a Gaussian whose width
//! grows as `1 / cos(latitude)`.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{circular_mean, SphericalAngle};

pub const ROWS: usize = 18;
pub const COLS: usize = 36;
pub const CELLS: usize = ROWS * COLS;
pub const BIN_DEG: f64 = 10.0;

const RECORD_MAGIC: &[u8; 4] = b"HGRD";

/// Nonnegative 18x36 heatmap, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct HeatGrid {
    values: Vec<f64>,
}

impl Default for HeatGrid {
    fn default() -> Self {
        Self::zeros()
    }
}

impl HeatGrid {
    pub fn zeros() -> Self {
        Self {
            values: vec![0.0; CELLS],
        }
    }

    pub fn from_values(values: Vec<f64>) -> Result<Self> {
        if values.len() != CELLS {
            return Err(Error::Shape(format!(
                "heat grid needs {CELLS} values, got {}",
                values.len()
            )));
        }
        if let Some(v) = values.iter().find(|v| !(**v >= 0.0) || !v.is_finite()) {
            return Err(Error::Degenerate(format!(
                "heat grid value {v} is not a finite nonnegative number"
            )));
        }
        Ok(Self { values })
    }

    /// Like [`HeatGrid::from_values`] but clamps small negatives (model round-off) to zero.
    pub fn from_values_clamped(mut values: Vec<f64>) -> Result<Self> {
        values.iter_mut().for_each(|v| *v = v.max(0.0));
        Self::from_values(values)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * COLS + col]
    }

    pub fn set(&mut self, row: usize, col: usize, v: f64) {
        assert!(v >= 0.0, "heat grid values are nonnegative");
        self.values[row * COLS + col] = v;
    }

    pub fn sum(&self) -> f64 {
        self.values.iter().sum()
    }

    pub fn row_sum(&self, row: usize) -> f64 {
        self.values[row * COLS..(row + 1) * COLS].iter().sum()
    }

    pub fn count_nonzero(&self) -> usize {
        self.values.iter().filter(|v| **v > 0.0).count()
    }

    pub fn scaled(&self, k: f64) -> HeatGrid {
        assert!(k >= 0.0);
        HeatGrid {
            values: self.values.iter().map(|v| v * k).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &HeatGrid) {
        self.values
            .iter_mut()
            .zip(&other.values)
            .for_each(|(a, b)| *a += b);
    }

    /// Rotates columns so that column `c` moves to `c + shift` (mod 36).
    pub fn roll_cols(&self, shift: isize) -> HeatGrid {
        let mut out = HeatGrid::zeros();
        for r in 0..ROWS {
            for c in 0..COLS {
                let d = (c as isize + shift).rem_euclid(COLS as isize) as usize;
                out.values[r * COLS + d] = self.values[r * COLS + c];
            }
        }
        out
    }

    /// Writes one record: magic, rows and cols (u32), bin size (f64), values; all little-endian.
    pub fn write_record<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(RECORD_MAGIC)?;
        w.write_all(&(ROWS as u32).to_le_bytes())?;
        w.write_all(&(COLS as u32).to_le_bytes())?;
        w.write_all(&BIN_DEG.to_le_bytes())?;
        let mut buf = Vec::with_capacity(CELLS * 8);
        for v in &self.values {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
        Ok(())
    }

    /// Reads the next record, or `None` at a clean end of stream.
    pub fn read_record<R: Read>(r: &mut R) -> Result<Option<HeatGrid>> {
        let mut magic = [0u8; 4];
        match read_exact_or_eof(r, &mut magic)? {
            false => return Ok(None),
            true if &magic != RECORD_MAGIC => {
                return Err(Error::Format("bad heat grid record magic".into()))
            }
            true => {}
        }
        let mut b4 = [0u8; 4];
        let mut b8 = [0u8; 8];
        r.read_exact(&mut b4)?;
        let rows = u32::from_le_bytes(b4) as usize;
        r.read_exact(&mut b4)?;
        let cols = u32::from_le_bytes(b4) as usize;
        r.read_exact(&mut b8)?;
        let bin = f64::from_le_bytes(b8);
        if rows != ROWS || cols != COLS || bin != BIN_DEG {
            return Err(Error::Format(format!(
                "unsupported grid {rows}x{cols} with {bin} degree bins"
            )));
        }
        let mut buf = vec![0u8; CELLS * 8];
        r.read_exact(&mut buf)?;
        let values = buf
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        HeatGrid::from_values(values).map(Some)
    }
}

fn read_exact_or_eof<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<bool> {
    let mut filled = 0;
    while filled < buf.len() {
        let n = r.read(&mut buf[filled..])?;
        if n == 0 {
            if filled == 0 {
                return Ok(false);
            }
            return Err(Error::Format("truncated heat grid record".into()));
        }
        filled += n;
    }
    Ok(true)
}

pub fn write_grids<W: Write>(w: &mut W, grids: &[HeatGrid]) -> Result<()> {
    for g in grids {
        g.write_record(w)?;
    }
    Ok(())
}

pub fn read_grids<R: Read>(r: &mut R) -> Result<Vec<HeatGrid>> {
    let mut out = Vec::new();
    while let Some(g) = HeatGrid::read_record(r)? {
        out.push(g);
    }
    Ok(out)
}

/// Latitude of a row center in degrees.
pub fn row_center_deg(row: usize) -> f64 {
    -90.0 + BIN_DEG * (row as f64 + 0.5)
}

/// Longitude of a column center in degrees.
pub fn col_center_deg(col: usize) -> f64 {
    -180.0 + BIN_DEG * (col as f64 + 0.5)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HeatmapConfig {
    pub bin_deg: f64,
    /// FoV (longitude, latitude) span in degrees.
    pub fov_span: (f64, f64),
    pub fps: usize,
    /// Row blur standard deviation at the equator, in bins.
    pub sigma0: f64,
    /// Latitude (degrees) beyond which the blur width stops growing.
    pub phi_clamp: f64,
}

impl Default for HeatmapConfig {
    fn default() -> Self {
        Self {
            bin_deg: BIN_DEG,
            fov_span: (120.0, 90.0),
            fps: 30,
            sigma0: 1.0,
            phi_clamp: 80.0,
        }
    }
}

impl HeatmapConfig {
    pub fn validate(&self) -> Result<()> {
        if self.bin_deg != BIN_DEG {
            return Err(Error::Config(format!(
                "only {BIN_DEG} degree bins are supported, got {}",
                self.bin_deg
            )));
        }
        let divisible = |s: f64| s > 0.0 && (s / self.bin_deg).fract() == 0.0;
        if !divisible(self.fov_span.0) || !divisible(self.fov_span.1) {
            return Err(Error::Config(format!(
                "fov span {:?} must be a positive multiple of the bin size",
                self.fov_span
            )));
        }
        if self.fov_span.0 > 360.0 || self.fov_span.1 > 180.0 {
            return Err(Error::Config("fov span exceeds the sphere".into()));
        }
        if self.fps == 0 || !(self.sigma0 >= 0.0) || !(0.0..90.0).contains(&self.phi_clamp) {
            return Err(Error::Config(
                "fps, sigma0 or phi_clamp out of range".into(),
            ));
        }
        Ok(())
    }

    /// Number of ones in an unclipped frame rectangle (108 by default).
    pub fn fov_cells(&self) -> usize {
        ((self.fov_span.0 / self.bin_deg) * (self.fov_span.1 / self.bin_deg)) as usize
    }

    /// Row blur standard deviation in bins.
    pub fn row_sigma(&self, row: usize) -> f64 {
        let phi = row_center_deg(row).clamp(-self.phi_clamp, self.phi_clamp);
        self.sigma0 / phi.to_radians().cos()
    }
}

/// First index of an `n`-bin run centered as closely as possible on `pos`
/// (a fractional position in bin units).
fn centered_start(pos: f64, n: usize) -> isize {
    (pos - n as f64 / 2.0 + 0.5).floor() as isize
}

/// The unblurred FoV rectangle for one frame.
///
/// Odd extents are centered on the bin containing the center; even extents
/// start at the bin edge nearest the center. Columns wrap around the
/// longitude seam; rows past a pole are dropped.
pub fn frame_mask(center: SphericalAngle, cfg: &HeatmapConfig) -> HeatGrid {
    let n_cols = (cfg.fov_span.0 / cfg.bin_deg).round() as usize;
    let n_rows = (cfg.fov_span.1 / cfg.bin_deg).round() as usize;
    let col_pos = (center.theta_deg() + 180.0) / cfg.bin_deg;
    let row_pos = ((center.phi_deg() + 90.0) / cfg.bin_deg).min(ROWS as f64 - 1e-9);
    let c0 = centered_start(col_pos, n_cols);
    let r0 = centered_start(row_pos, n_rows);
    let mut grid = HeatGrid::zeros();
    for r in r0..r0 + n_rows as isize {
        if r < 0 || r >= ROWS as isize {
            continue;
        }
        for dc in 0..n_cols.min(COLS) as isize {
            let c = (c0 + dc).rem_euclid(COLS as isize) as usize;
            grid.values[r as usize * COLS + c] = 1.0;
        }
    }
    grid
}

/// Normalized Gaussian kernel truncated at four standard deviations.
fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (4.0 * sigma).ceil() as usize;
    let mut k: Vec<f64> = (0..=2 * radius)
        .map(|i| {
            let d = i as f64 - radius as f64;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Circular row-wise blur; every row keeps its sum.
pub fn blur_rows(grid: &HeatGrid, cfg: &HeatmapConfig) -> HeatGrid {
    if cfg.sigma0 <= 0.0 {
        return grid.clone();
    }
    let mut out = HeatGrid::zeros();
    for r in 0..ROWS {
        let row = &grid.values[r * COLS..(r + 1) * COLS];
        if row.iter().all(|v| *v == 0.0) {
            continue;
        }
        let kernel = gaussian_kernel(cfg.row_sigma(r));
        let radius = (kernel.len() / 2) as isize;
        let dst = &mut out.values[r * COLS..(r + 1) * COLS];
        for (c, &v) in row.iter().enumerate() {
            if v == 0.0 {
                continue;
            }
            for (i, &k) in kernel.iter().enumerate() {
                let d = (c as isize + i as isize - radius).rem_euclid(COLS as isize) as usize;
                dst[d] += v * k;
            }
        }
    }
    out
}

pub fn frame_heatmap(center: SphericalAngle, cfg: &HeatmapConfig) -> HeatGrid {
    blur_rows(&frame_mask(center, cfg), cfg)
}

/// Sum of the frame heatmaps of one second.
pub fn second_heatmap(frames: &[SphericalAngle], cfg: &HeatmapConfig) -> Result<HeatGrid> {
    if frames.is_empty() {
        return Err(Error::Empty("frame list"));
    }
    if frames.len() > cfg.fps {
        return Err(Error::Config(format!(
            "{} frames exceed {} per second",
            frames.len(),
            cfg.fps
        )));
    }
    // Blur is linear, so summing masks first gives the same grid with one blur pass.
    let mut mask = HeatGrid::zeros();
    for f in frames {
        mask.add_assign(&frame_mask(*f, cfg));
    }
    Ok(blur_rows(&mask, cfg))
}

/// Probability-weighted center of a heatmap, with `cos(latitude)` pixel
/// weights and a circular mean in longitude.
pub fn estimate_center(h: &HeatGrid) -> Result<SphericalAngle> {
    let mut thetas = Vec::with_capacity(CELLS);
    let mut weights = Vec::with_capacity(CELLS);
    let mut phi_acc = 0.0;
    for r in 0..ROWS {
        let phi = row_center_deg(r).to_radians();
        let cw = phi.cos();
        for c in 0..COLS {
            let w = h.get(r, c) * cw;
            if w > 0.0 {
                thetas.push(col_center_deg(c).to_radians());
                weights.push(w);
                phi_acc += w * phi;
            }
        }
    }
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        return Err(Error::Degenerate("heat grid has no mass".into()));
    }
    let theta = circular_mean(&thetas, Some(&weights))?;
    Ok(SphericalAngle::new(theta, phi_acc / total))
}

/// Indices of the `n` largest cells, ties broken toward lower row-major index.
pub fn top_n_cells(h: &HeatGrid, n: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..CELLS).collect();
    idx.sort_by(|&a, &b| h.values[b].total_cmp(&h.values[a]).then(a.cmp(&b)));
    idx.truncate(n);
    idx
}

/// Share of ground-truth occupied bins found among the predicted top-N bins,
/// N being the ground-truth occupied bin count.
pub fn tile_overlap_ratio(pred: &HeatGrid, gt: &HeatGrid) -> Result<f64> {
    let n = gt.count_nonzero();
    if n == 0 {
        return Err(Error::Degenerate("ground-truth heat grid is empty".into()));
    }
    let hits = top_n_cells(pred, n)
        .into_iter()
        .filter(|&i| gt.values[i] > 0.0)
        .count();
    Ok(hits as f64 / n as f64)
}
