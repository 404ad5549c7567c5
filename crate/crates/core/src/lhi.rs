//! Location history images.
//!
//! For a stack of co-registered slices, every pixel carries a decay counter
//! `f`. When the intensity at a pixel changes by more than
//! `delta_threshold` between two consecutive slices the counter is reset to
//! `tau`, otherwise it decays by one towards zero. The counter after the
//! last slice encodes where, and how recently, the structure under the
//! candidate moved within the slice window.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::candidates::NoduleCandidate;
use crate::volume_io::CtVolume;

/// HU used for crop regions falling outside the scan.
pub const OUTSIDE_HU: f32 = -1000.0;

#[derive(Debug, Error, PartialEq)]
pub enum LhiError {
    #[error("slice {index} is {got:?}, expected {expected:?}")]
    Shape { index: usize, expected: (usize, usize), got: (usize, usize) },
    #[error("empty slice stack")]
    EmptyStack,
    #[error("candidate center {voxel:?} lies outside the volume {dims:?}")]
    Bounds { voxel: [f64; 3], dims: [usize; 3] },
    #[error("invalid parameters: {0}")]
    Params(String),
}

/// Row-major 2D grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid<T> {
    pub width: usize,
    pub height: usize,
    pub data: Vec<T>,
}

impl<T: Copy> Grid<T> {
    pub fn filled(width: usize, height: usize, value: T) -> Self {
        Self { width, height, data: vec![value; width * height] }
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), width * height, "grid data length");
        Self { width, height, data }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> T {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: T) {
        self.data[y * self.width + x] = v;
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn map<U>(&self, f: impl Fn(T) -> U) -> Grid<U> {
        Grid { width: self.width, height: self.height, data: self.data.iter().map(|&v| f(v)).collect() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LhiParams {
    /// Counter ceiling, in slices.
    pub tau: u32,
    /// HU difference above which a pixel counts as changed.
    pub delta_threshold: f64,
    /// Odd number of slices centered on the candidate.
    pub window_slices: usize,
    /// In-plane crop side as a multiple of the candidate diameter.
    pub patch_scale: f64,
    pub out_size: usize,
}

impl Default for LhiParams {
    fn default() -> Self {
        Self { tau: 10, delta_threshold: 30.0, window_slices: 11, patch_scale: 2.0, out_size: 48 }
    }
}

impl LhiParams {
    pub fn validate(&self) -> Result<(), LhiError> {
        if self.tau < 1 {
            return Err(LhiError::Params("tau must be at least 1".into()));
        }
        if self.window_slices.is_multiple_of(2) {
            return Err(LhiError::Params(format!("window_slices must be odd, got {}", self.window_slices)));
        }
        if !(self.patch_scale >= 1.0) {
            return Err(LhiError::Params(format!("patch_scale must be >= 1, got {}", self.patch_scale)));
        }
        if !(self.delta_threshold >= 0.0) {
            return Err(LhiError::Params("delta_threshold must be non-negative".into()));
        }
        if self.out_size == 0 {
            return Err(LhiError::Params("out_size must be positive".into()));
        }
        Ok(())
    }
}

/// Change indicator between slice `s - 1` and slice `s` at `(x, y)`.
/// Slice 0 has no predecessor and always yields 0.
pub fn psi(stack: &[Grid<f32>], x: usize, y: usize, s: usize, delta_threshold: f64) -> u8 {
    if s == 0 {
        return 0;
    }
    let diff = (stack[s].get(x, y) as f64 - stack[s - 1].get(x, y) as f64).abs();
    u8::from(diff > delta_threshold)
}

fn check_shapes(stack: &[Grid<f32>]) -> Result<(usize, usize), LhiError> {
    let first = stack.first().ok_or(LhiError::EmptyStack)?;
    let expected = first.shape();
    for (index, s) in stack.iter().enumerate() {
        if s.shape() != expected || s.data.len() != expected.0 * expected.1 {
            return Err(LhiError::Shape { index, expected, got: s.shape() });
        }
    }
    Ok(expected)
}

/// Runs the decay recurrence over the whole stack and returns the counters
/// after the last slice. Counters start at zero on the first slice.
pub fn compute_lhi(stack: &[Grid<f32>], tau: u32, delta_threshold: f64) -> Result<Grid<u32>, LhiError> {
    let (w, h) = check_shapes(stack)?;
    let mut f = Grid::filled(w, h, 0u32);
    for pair in stack.windows(2) {
        let (prev, cur) = (&pair[0], &pair[1]);
        for ((fv, &a), &b) in f.data.iter_mut().zip(&prev.data).zip(&cur.data) {
            if (b as f64 - a as f64).abs() > delta_threshold {
                *fv = tau;
            } else {
                *fv = fv.saturating_sub(1);
            }
        }
    }
    Ok(f)
}

/// Crop side in voxels for a candidate: the diameter in in-plane voxels,
/// rounded up, times `patch_scale`, rounded up.
pub fn patch_side(volume: &CtVolume, candidate: &NoduleCandidate, params: &LhiParams) -> usize {
    let d_vox = (candidate.diameter_mm / volume.geometry().inplane_spacing()).ceil().max(1.0);
    ((params.patch_scale * d_vox).ceil() as usize).max(1)
}

fn candidate_voxel(volume: &CtVolume, candidate: &NoduleCandidate) -> Result<[usize; 3], LhiError> {
    let voxel = volume.world_to_voxel(candidate.center_mm);
    if !volume.geometry().contains_voxel(voxel) {
        return Err(LhiError::Bounds { voxel, dims: volume.dims() });
    }
    Ok(std::array::from_fn(|a| (voxel[a].round().max(0.0) as usize).min(volume.dims()[a] - 1)))
}

/// Crops `window_slices` in-plane squares centered on the candidate. Crop
/// pixels outside the scan read as -1000 HU; slices beyond either end of
/// the scan repeat the edge slice.
pub fn extract_patch_stack(
    volume: &CtVolume,
    candidate: &NoduleCandidate,
    params: &LhiParams,
) -> Result<Vec<Grid<f32>>, LhiError> {
    params.validate()?;
    let [cx, cy, cz] = candidate_voxel(volume, candidate)?;
    let [nx, ny, nz] = volume.dims();
    let side = patch_side(volume, candidate, params);
    let x0 = cx as isize - (side / 2) as isize;
    let y0 = cy as isize - (side / 2) as isize;
    let half = (params.window_slices / 2) as isize;

    let mut stack = Vec::with_capacity(params.window_slices);
    for dz in -half..=half {
        let z = (cz as isize + dz).clamp(0, nz as isize - 1) as usize;
        let slice = volume.slice(z);
        let mut crop = Grid::filled(side, side, OUTSIDE_HU);
        for py in 0..side {
            let y = y0 + py as isize;
            if y < 0 || y >= ny as isize {
                continue;
            }
            for px in 0..side {
                let x = x0 + px as isize;
                if x < 0 || x >= nx as isize {
                    continue;
                }
                crop.set(px, py, slice[x as usize + nx * y as usize] as f32);
            }
        }
        stack.push(crop);
    }
    Ok(stack)
}

/// Bilinear resize with pixel-center alignment and edge clamping.
pub fn resize_bilinear(grid: &Grid<f32>, out_w: usize, out_h: usize) -> Grid<f32> {
    if grid.shape() == (out_w, out_h) {
        return grid.clone();
    }
    let sample = |n_in: usize, n_out: usize, i: usize| -> (usize, usize, f32) {
        let pos = ((i as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
        let lo = pos.floor() as usize;
        let hi = (lo + 1).min(n_in - 1);
        (lo, hi, (pos - lo as f64) as f32)
    };
    let xs: Vec<_> = (0..out_w).map(|i| sample(grid.width, out_w, i)).collect();
    let mut out = Vec::with_capacity(out_w * out_h);
    for j in 0..out_h {
        let (y0, y1, wy) = sample(grid.height, out_h, j);
        for &(x0, x1, wx) in &xs {
            let top = grid.get(x0, y0) * (1.0 - wx) + grid.get(x1, y0) * wx;
            let bottom = grid.get(x0, y1) * (1.0 - wx) + grid.get(x1, y1) * wx;
            out.push(top * (1.0 - wy) + bottom * wy);
        }
    }
    Grid::from_vec(out_w, out_h, out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocationHistoryImage {
    /// Counter values resized to `out_size` square, in `[0, tau]`.
    pub values: Grid<f32>,
    pub tau: u32,
    pub candidate_id: String,
    /// Inclusive slice range before edge clamping (may extend past the scan).
    pub slice_range: (isize, isize),
}

impl LocationHistoryImage {
    /// Values divided by `tau`, the classifier input.
    pub fn normalized(&self) -> Grid<f32> {
        let t = self.tau as f32;
        self.values.map(|v| v / t)
    }
}

pub fn candidate_id(candidate: &NoduleCandidate) -> String {
    let [x, y, z] = candidate.center_mm;
    format!("{}@{x:.3},{y:.3},{z:.3}", candidate.scan_id)
}

pub fn lhi_for_candidate(
    volume: &CtVolume,
    candidate: &NoduleCandidate,
    params: &LhiParams,
) -> Result<LocationHistoryImage, LhiError> {
    let stack = extract_patch_stack(volume, candidate, params)?;
    let counters = compute_lhi(&stack, params.tau, params.delta_threshold)?;
    let tau = params.tau as f32;
    let mut values = resize_bilinear(&counters.map(|v| v as f32), params.out_size, params.out_size);
    for v in &mut values.data {
        *v = v.clamp(0.0, tau);
    }
    let cz = volume.world_to_voxel(candidate.center_mm)[2].round() as isize;
    let half = (params.window_slices / 2) as isize;
    Ok(LocationHistoryImage {
        values,
        tau: params.tau,
        candidate_id: candidate_id(candidate),
        slice_range: (cz - half, cz + half),
    })
}

/// LHIs for many candidates of one scan, in input order.
pub fn lhi_batch(
    volume: &CtVolume,
    candidates: &[NoduleCandidate],
    params: &LhiParams,
) -> Result<Vec<LocationHistoryImage>, LhiError> {
    candidates.par_iter().map(|c| lhi_for_candidate(volume, c, params)).collect()
}

/// Ratio of the principal second moments of the pixels above `cutoff`.
/// Each pixel is treated as a unit square, so a single row of pixels still
/// has a finite ratio. `None` when no pixel passes.
pub fn region_elongation(grid: &Grid<f32>, cutoff: f32) -> Option<f64> {
    let pts: Vec<(f64, f64)> = (0..grid.height)
        .flat_map(|y| (0..grid.width).map(move |x| (x, y)))
        .filter(|&(x, y)| grid.get(x, y) > cutoff)
        .map(|(x, y)| (x as f64, y as f64))
        .collect();
    if pts.is_empty() {
        return None;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let (mut sxx, mut syy, mut sxy) = (1.0 / 12.0, 1.0 / 12.0, 0.0);
    for &(x, y) in &pts {
        sxx += (x - mx) * (x - mx) / n;
        syy += (y - my) * (y - my) / n;
        sxy += (x - mx) * (y - my) / n;
    }
    let mean = 0.5 * (sxx + syy);
    let disc = (0.25 * (sxx - syy).powi(2) + sxy * sxy).sqrt();
    Some((mean + disc) / (mean - disc))
}
