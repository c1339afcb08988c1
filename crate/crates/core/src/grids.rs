//! Dense learnable grids and their interpolation stencils.
//!
//! Grids describe layout only; the values themselves live in the
//! [`ParamStore`](crate::optim::ParamStore) and are passed in as slices. A
//! forward query returns a stencil (flat offsets plus weights) that the caller
//! keeps for the backward pass. Since interpolation is linear in the stored
//! values, the gradient of a query with respect to each texel is exactly its
//! stencil weight.
//!
//! Values are stored texel-major with channels innermost, so the channels of
//! one texel are contiguous.
//!
//! All grids use align-corners addressing: node `i` of an axis with `n` nodes
//! sits at `lo + (hi - lo) * i / (n - 1)`. Queries outside the extent are
//! clamped to the border.

use crate::error::{Error, Result};
use crate::geometry::Vec3;

/// Locates `x` on an axis of `n` nodes spanning `[lo, hi]`.
/// Returns the lower node, the upper node and the fractional offset.
#[inline]
pub fn axis_cell(x: f64, lo: f64, hi: f64, n: usize) -> (usize, usize, f64) {
    if n <= 1 {
        return (0, 0, 0.0);
    }
    let last = (n - 1) as f64;
    let u = ((x - lo) / (hi - lo) * last).clamp(0.0, last);
    let u = if u.is_nan() { 0.0 } else { u };
    let i0 = (u.floor() as usize).min(n - 2);
    (i0, i0 + 1, u - i0 as f64)
}

/// Bilinear stencil on one plane of a [`PlaneStack`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Bilinear {
    /// Texel indices (multiply by the channel count for value offsets).
    pub offsets: [usize; 4],
    pub weights: [f64; 4],
}

/// Trilinear stencil on a [`CubeGrid`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Trilinear {
    /// Voxel indices (multiply by the channel count for value offsets).
    pub offsets: [usize; 8],
    pub weights: [f64; 8],
}

#[inline]
fn gather(values: &[f64], channels: usize, cells: &[usize], weights: &[f64], out: &mut [f64]) {
    out[..channels].fill(0.0);
    for (&i, &w) in cells.iter().zip(weights) {
        let texel = &values[i * channels..(i + 1) * channels];
        for (o, v) in out.iter_mut().zip(texel) {
            *o += w * v;
        }
    }
}

#[inline]
fn scatter(grad: &mut [f64], channels: usize, cells: &[usize], weights: &[f64], upstream: &[f64]) {
    for (&i, &w) in cells.iter().zip(weights) {
        if w == 0.0 {
            continue;
        }
        let texel = &mut grad[i * channels..(i + 1) * channels];
        for (g, u) in texel.iter_mut().zip(upstream) {
            *g += w * u;
        }
    }
}

/// Stack of `L` planes at fixed NDC depths, each a `res_y × res_x` image with
/// `channels` values per texel. Layout is `[plane][y][x][channel]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PlaneStack {
    pub channels: usize,
    pub res_x: usize,
    pub res_y: usize,
    pub plane_z: Vec<f64>,
}

impl PlaneStack {
    pub fn new(channels: usize, res_x: usize, res_y: usize, plane_z: Vec<f64>) -> Result<Self> {
        if channels == 0 || res_x == 0 || res_y == 0 {
            return Err(Error::Input("plane stack dimensions must be positive".into()));
        }
        if plane_z.len() < 2 {
            return Err(Error::Input("a plane stack needs at least two planes".into()));
        }
        if plane_z.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::Input("plane depths must be strictly increasing".into()));
        }
        if plane_z[0] < -1.0 || *plane_z.last().unwrap() > 1.0 {
            return Err(Error::Input("plane depths must lie in [-1, 1]".into()));
        }
        Ok(PlaneStack {
            channels,
            res_x,
            res_y,
            plane_z,
        })
    }

    /// `L` planes evenly spaced in NDC depth over `[-1, 1]`, i.e. evenly spaced
    /// in disparity from the near plane to infinity.
    pub fn uniform_depths(planes: usize) -> Vec<f64> {
        let last = (planes.max(2) - 1) as f64;
        (0..planes.max(2))
            .map(|l| -1.0 + 2.0 * l as f64 / last)
            .collect()
    }

    pub fn planes(&self) -> usize {
        self.plane_z.len()
    }

    pub fn texels(&self) -> usize {
        self.planes() * self.res_x * self.res_y
    }

    pub fn len(&self) -> usize {
        self.channels * self.texels()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn shape(&self) -> Vec<usize> {
        vec![self.planes(), self.res_y, self.res_x, self.channels]
    }

    /// Spacing between plane `l` and its successor (the predecessor for the last plane).
    pub fn spacing(&self, l: usize) -> f64 {
        let z = &self.plane_z;
        if l + 1 < z.len() {
            z[l + 1] - z[l]
        } else {
            z[l] - z[l - 1]
        }
    }

    pub fn locate(&self, plane: usize, x: f64, y: f64) -> Bilinear {
        debug_assert!(plane < self.planes());
        let (x0, x1, fx) = axis_cell(x, -1.0, 1.0, self.res_x);
        let (y0, y1, fy) = axis_cell(y, -1.0, 1.0, self.res_y);
        let base = plane * self.res_x * self.res_y;
        let row0 = base + y0 * self.res_x;
        let row1 = base + y1 * self.res_x;
        Bilinear {
            offsets: [row0 + x0, row0 + x1, row1 + x0, row1 + x1],
            weights: [
                (1.0 - fx) * (1.0 - fy),
                fx * (1.0 - fy),
                (1.0 - fx) * fy,
                fx * fy,
            ],
        }
    }

    pub fn gather(&self, values: &[f64], stencil: &Bilinear, out: &mut [f64]) {
        debug_assert_eq!(values.len(), self.len());
        gather(values, self.channels, &stencil.offsets, &stencil.weights, out);
    }

    /// Bilinear query on one plane; returns one value per channel.
    pub fn sample(&self, values: &[f64], plane: usize, x: f64, y: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.channels];
        self.gather(values, &self.locate(plane, x, y), &mut out);
        out
    }

    /// Adds `upstream[c] * weight` into every texel of the stencil.
    pub fn scatter(&self, grad: &mut [f64], stencil: &Bilinear, upstream: &[f64]) -> Result<()> {
        if upstream.len() != self.channels || grad.len() != self.len() {
            return Err(Error::Shape(format!(
                "plane stack backward expects {} channels over {} values, got {} over {}",
                self.channels,
                self.len(),
                upstream.len(),
                grad.len()
            )));
        }
        scatter(grad, self.channels, &stencil.offsets, &stencil.weights, upstream);
        Ok(())
    }
}

/// Axis-aligned voxel grid with trilinear interpolation.
/// Layout is `[x][y][z][channel]`.
#[derive(Clone, Debug, PartialEq)]
pub struct CubeGrid {
    pub channels: usize,
    pub dims: [usize; 3],
    pub aabb_min: Vec3,
    pub aabb_max: Vec3,
}

impl CubeGrid {
    pub fn new(channels: usize, dims: [usize; 3], aabb_min: Vec3, aabb_max: Vec3) -> Result<Self> {
        if channels == 0 || dims.iter().any(|&d| d == 0) {
            return Err(Error::Input("voxel grid dimensions must be positive".into()));
        }
        if (0..3).any(|k| !(aabb_min[k] < aabb_max[k])) {
            return Err(Error::Input(format!(
                "bounding box min {aabb_min:?} must be below max {aabb_max:?}"
            )));
        }
        Ok(CubeGrid {
            channels,
            dims,
            aabb_min,
            aabb_max,
        })
    }

    pub fn voxels(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn len(&self) -> usize {
        self.channels * self.voxels()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn shape(&self) -> Vec<usize> {
        vec![self.dims[0], self.dims[1], self.dims[2], self.channels]
    }

    /// Smallest distance between neighbouring nodes.
    pub fn voxel_edge(&self) -> f64 {
        (0..3)
            .map(|k| (self.aabb_max[k] - self.aabb_min[k]) / (self.dims[k].max(2) - 1) as f64)
            .fold(f64::INFINITY, f64::min)
    }

    #[inline]
    pub fn offset(&self, ix: usize, iy: usize, iz: usize) -> usize {
        (ix * self.dims[1] + iy) * self.dims[2] + iz
    }

    pub fn locate(&self, p: &Vec3) -> Trilinear {
        let (x0, x1, fx) = axis_cell(p.x, self.aabb_min.x, self.aabb_max.x, self.dims[0]);
        let (y0, y1, fy) = axis_cell(p.y, self.aabb_min.y, self.aabb_max.y, self.dims[1]);
        let (z0, z1, fz) = axis_cell(p.z, self.aabb_min.z, self.aabb_max.z, self.dims[2]);
        let mut offsets = [0; 8];
        let mut weights = [0.0; 8];
        for (k, (o, w)) in offsets.iter_mut().zip(weights.iter_mut()).enumerate() {
            let (ix, wx) = if k & 1 == 0 { (x0, 1.0 - fx) } else { (x1, fx) };
            let (iy, wy) = if k & 2 == 0 { (y0, 1.0 - fy) } else { (y1, fy) };
            let (iz, wz) = if k & 4 == 0 { (z0, 1.0 - fz) } else { (z1, fz) };
            *o = self.offset(ix, iy, iz);
            *w = wx * wy * wz;
        }
        Trilinear { offsets, weights }
    }

    pub fn gather(&self, values: &[f64], stencil: &Trilinear, out: &mut [f64]) {
        debug_assert_eq!(values.len(), self.len());
        gather(values, self.channels, &stencil.offsets, &stencil.weights, out);
    }

    pub fn sample(&self, values: &[f64], p: &Vec3) -> Vec<f64> {
        let mut out = vec![0.0; self.channels];
        self.gather(values, &self.locate(p), &mut out);
        out
    }

    pub fn scatter(&self, grad: &mut [f64], stencil: &Trilinear, upstream: &[f64]) -> Result<()> {
        if upstream.len() != self.channels || grad.len() != self.len() {
            return Err(Error::Shape(format!(
                "voxel grid backward expects {} channels over {} values, got {} over {}",
                self.channels,
                self.len(),
                upstream.len(),
                grad.len()
            )));
        }
        scatter(grad, self.channels, &stencil.offsets, &stencil.weights, upstream);
        Ok(())
    }

    /// Does the segment `origin + t * dir` intersect the box? Returns the clipped
    /// interval with `t >= 0`.
    pub fn clip_ray(&self, origin: &Vec3, dir: &Vec3) -> Option<(f64, f64)> {
        let mut t0 = 0.0f64;
        let mut t1 = f64::INFINITY;
        for k in 0..3 {
            if dir[k] == 0.0 {
                if origin[k] < self.aabb_min[k] || origin[k] > self.aabb_max[k] {
                    return None;
                }
                continue;
            }
            let inv = 1.0 / dir[k];
            let (mut a, mut b) = (
                (self.aabb_min[k] - origin[k]) * inv,
                (self.aabb_max[k] - origin[k]) * inv,
            );
            if a > b {
                std::mem::swap(&mut a, &mut b);
            }
            t0 = t0.max(a);
            t1 = t1.min(b);
        }
        (t0 < t1).then_some((t0, t1))
    }
}

/// One-channel reliability logits over an MPI's NDC cube `[-1, 1]³`.
#[derive(Clone, Debug, PartialEq)]
pub struct ReliabilityGrid {
    pub grid: CubeGrid,
}

impl ReliabilityGrid {
    /// Grid with `res_x × res_y × planes` nodes, matching the owning MPI.
    pub fn new(res_x: usize, res_y: usize, planes: usize) -> Result<Self> {
        let lo = Vec3::repeat(-1.0);
        let hi = Vec3::repeat(1.0);
        Ok(ReliabilityGrid {
            grid: CubeGrid::new(1, [res_x, res_y, planes], lo, hi)?,
        })
    }

    pub fn len(&self) -> usize {
        self.grid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grid.is_empty()
    }

    pub fn locate(&self, ndc: &Vec3) -> Trilinear {
        self.grid.locate(ndc)
    }

    pub fn sample(&self, values: &[f64], ndc: &Vec3) -> f64 {
        let stencil = self.grid.locate(ndc);
        stencil
            .offsets
            .iter()
            .zip(&stencil.weights)
            .map(|(&i, &w)| w * values[i])
            .sum()
    }
}
