//! Sample-and-merge volume rendering over several MPIs and the centered cube.
//!
//! Rendering is split into two passes. Tracing is per ray and computes
//! geometry, densities, blend weights and compositing weights, none of which
//! depend on color. Shading then evaluates the color head for all samples of a
//! batch at once. The reverse pass mirrors both.

use ndarray::Array2;
use rayon::prelude::*;

use crate::appearance::HeadTape;
use crate::error::{Error, Result};
use crate::geometry::{Camera, Ray, Vec3};
use crate::grids::{Bilinear, Trilinear};
use crate::model::{CubeField, FieldId, MmpiModel, MpiField};
use crate::optim::ParamStore;
use crate::reliability::{gather_logits, reliability_backward, softmax_confidence, ReliabilitySet};

/// Interpolation stencil of a sample in its source field.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Stencil {
    Plane(Bilinear),
    Cube(Trilinear),
}

/// One sample of one field along a ray.
#[derive(Clone, Debug, PartialEq)]
pub struct FieldSample {
    /// World distance from the ray origin; infinite on the far plane of an MPI.
    pub distance: f64,
    pub field: FieldId,
    /// Plane index for MPI samples, step index for cube samples.
    pub index: usize,
    /// NDC point (MPI) or world point (cube).
    pub point: Vec3,
    /// Homogeneous world position `(x, w)`; `w = 0` for points at infinity.
    pub world: (Vec3, f64),
    pub head_position: Vec3,
    pub head_direction: Vec3,
    pub delta: f64,
    pub raw: f64,
    pub sigma: f64,
    pub alpha: f64,
    pub blend: f64,
    pub color: [f64; 3],
    pub stencil: Stencil,
    pub reliability: Option<ReliabilitySet>,
    /// Row of this sample in the batch's head evaluation, if shaded.
    pub row: Option<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RenderOutput {
    pub color: [f64; 3],
    pub accumulated_opacity: f64,
    pub per_sample_weights: Vec<f64>,
    /// Weighted mean distance of the finite samples; infinite when none carry weight.
    pub expected_depth: f64,
}

/// Which fields participate and how they are blended.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderOptions {
    pub mpis: Vec<usize>,
    pub cube: bool,
    pub reliability: bool,
    pub background: [f64; 3],
    /// Samples whose compositing weight falls below this are not shaded.
    pub color_skip: f64,
}

impl RenderOptions {
    /// Every field of the model.
    pub fn all(model: &MmpiModel, reliability: bool, background: [f64; 3]) -> Self {
        RenderOptions {
            mpis: (0..model.mpi_count()).collect(),
            cube: model.cube.is_some(),
            reliability,
            background,
            color_skip: 0.0,
        }
    }

    fn validate(&self, model: &MmpiModel) -> Result<()> {
        if self.mpis.is_empty() {
            return Err(Error::Config(
                "at least one MPI must be enabled; the cube grid is only rendered together with MPIs".into(),
            ));
        }
        if let Some(&i) = self.mpis.iter().find(|&&i| i >= model.mpi_count()) {
            return Err(Error::Config(format!("MPI {i} does not exist")));
        }
        if self.cube && model.cube.is_none() {
            return Err(Error::Config("cube requested but the model has none".into()));
        }
        Ok(())
    }
}

/// Intersects `ray` with the planes of MPI `i`. Colors are left at zero and
/// blend weights at one.
pub fn sample_mpi(model: &MmpiModel, i: usize, ray: &Ray) -> Vec<FieldSample> {
    let mpi = &model.mpis[i];
    let values = model.store.values(mpi.density);
    let mut out = Vec::new();
    sample_mpi_into(mpi, i, values, ray, &mut out);
    out
}

fn sample_mpi_into(mpi: &MpiField, i: usize, density: &[f64], ray: &Ray, out: &mut Vec<FieldSample>) {
    let f = &mpi.frustum;
    let ndc = f.project_ray(ray);
    if !ndc.facing {
        return;
    }
    let qo = f.to_local(&ray.origin);
    let qd = f.pose.inverse_transform_vector(&ray.direction);
    let stack = &mpi.density_layout;
    let head_direction = ndc.direction.normalize();
    let stretch = ndc.direction.norm() / ndc.direction.z;
    for (l, &z) in stack.plane_z.iter().enumerate() {
        let (distance, point, world) = if z >= 1.0 {
            let p = Vec3::new(
                -qd.x / (qd.z * f.tan_half_fov_x),
                -qd.y / (qd.z * f.tan_half_fov_y),
                1.0,
            );
            (f64::INFINITY, p, (ray.direction, 0.0))
        } else {
            let depth = 2.0 * f.near / (z - 1.0);
            let t = (depth - qo.z) / qd.z;
            if t < 0.0 {
                continue;
            }
            let q = qo + qd * t;
            let p = Vec3::new(
                -q.x / (q.z * f.tan_half_fov_x),
                -q.y / (q.z * f.tan_half_fov_y),
                z,
            );
            (t, p, (ray.at(t), 1.0))
        };
        if point.x.abs() > 1.0 || point.y.abs() > 1.0 {
            continue;
        }
        let stencil = stack.locate(l, point.x, point.y);
        let raw: f64 = stencil
            .offsets
            .iter()
            .zip(&stencil.weights)
            .map(|(&o, &w)| w * density[o])
            .sum();
        let delta = stack.spacing(l) * stretch;
        let (sigma, _) = MmpiModel::activate(raw, mpi.density_shift);
        out.push(FieldSample {
            distance,
            field: FieldId::Mpi(i),
            index: l,
            point,
            world,
            head_position: point,
            head_direction,
            delta,
            raw,
            sigma,
            alpha: -(-sigma * delta).exp_m1(),
            blend: 1.0,
            color: [0.0; 3],
            stencil: Stencil::Plane(stencil),
            reliability: None,
            row: None,
        });
    }
}

/// Uniform world-space steps through the cube's bounding box.
pub fn sample_cube_field(model: &MmpiModel, ray: &Ray) -> Vec<FieldSample> {
    let mut out = Vec::new();
    if let Some(cube) = &model.cube {
        sample_cube_into(cube, model.store.values(cube.density), ray, &mut out);
    }
    out
}

fn sample_cube_into(cube: &CubeField, density: &[f64], ray: &Ray, out: &mut Vec<FieldSample>) {
    let grid = &cube.density_layout;
    let Some((t0, t1)) = grid.clip_ray(&ray.origin, &ray.direction) else {
        return;
    };
    let step = cube.step();
    let mut k = 0usize;
    loop {
        let t = t0 + (k as f64 + 0.5) * step;
        if t >= t1 {
            break;
        }
        let p = ray.at(t);
        let stencil = grid.locate(&p);
        let raw: f64 = stencil
            .offsets
            .iter()
            .zip(&stencil.weights)
            .map(|(&o, &w)| w * density[o])
            .sum();
        let (sigma, _) = MmpiModel::activate(raw, cube.density_shift);
        out.push(FieldSample {
            distance: t,
            field: FieldId::Cube,
            index: k,
            point: p,
            world: (p, 1.0),
            head_position: cube.normalized(&p),
            head_direction: ray.direction,
            delta: step,
            raw,
            sigma,
            alpha: -(-sigma * step).exp_m1(),
            blend: 1.0,
            color: [0.0; 3],
            stencil: Stencil::Cube(stencil),
            reliability: None,
            row: None,
        });
        k += 1;
    }
}

/// Orders samples by distance, breaking ties by field and then plane index.
pub fn merge_samples(per_field: Vec<Vec<FieldSample>>) -> Vec<FieldSample> {
    let mut all: Vec<FieldSample> = per_field.into_iter().flatten().collect();
    sort_samples(&mut all);
    all
}

fn sort_samples(samples: &mut [FieldSample]) {
    samples.sort_by(|a, b| {
        a.distance
            .total_cmp(&b.distance)
            .then(a.field.cmp(&b.field))
            .then(a.index.cmp(&b.index))
    });
}

/// Front-to-back accumulation of effective opacities `P_k α_k`.
/// Returns the transmittance before each sample and the final transmittance.
pub fn transmittance(effective_alpha: &[f64]) -> (Vec<f64>, f64) {
    let mut t = 1.0;
    let mut out = Vec::with_capacity(effective_alpha.len());
    for &a in effective_alpha {
        out.push(t);
        t *= 1.0 - a;
    }
    (out, t)
}

/// Composites a sorted batch. Without reliability every blend weight is one.
pub fn composite(batch: &[FieldSample], reliability_enabled: bool, background: [f64; 3]) -> RenderOutput {
    debug_assert!(batch.windows(2).all(|w| w[0].distance <= w[1].distance), "batch must be sorted");
    let beta: Vec<f64> = batch
        .iter()
        .map(|s| if reliability_enabled { s.blend * s.alpha } else { s.alpha })
        .collect();
    let (trans, t_final) = transmittance(&beta);
    let weights: Vec<f64> = trans.iter().zip(&beta).map(|(t, b)| t * b).collect();
    finish(batch, weights, t_final, background)
}

fn finish(batch: &[FieldSample], weights: Vec<f64>, t_final: f64, background: [f64; 3]) -> RenderOutput {
    let mut color = [0.0; 3];
    let mut depth = 0.0;
    let mut depth_weight = 0.0;
    for (s, &w) in batch.iter().zip(&weights) {
        for c in 0..3 {
            color[c] += w * s.color[c];
        }
        if s.distance.is_finite() {
            depth += w * s.distance;
            depth_weight += w;
        }
    }
    for c in 0..3 {
        color[c] += t_final * background[c];
    }
    RenderOutput {
        color,
        accumulated_opacity: 1.0 - t_final,
        per_sample_weights: weights,
        expected_depth: if depth_weight > 0.0 { depth / depth_weight } else { f64::INFINITY },
    }
}

/// Forward record of one ray.
#[derive(Clone, Debug, PartialEq)]
pub struct RayTape {
    pub samples: Vec<FieldSample>,
    pub transmittance: Vec<f64>,
    pub final_transmittance: f64,
    pub output: RenderOutput,
}

/// Forward record of a batch of rays.
#[derive(Clone, Debug)]
pub struct BatchTape {
    pub rays: Vec<RayTape>,
    pub head: Option<HeadTape>,
    /// `(ray, sample)` for every head row.
    pub rows: Vec<(usize, usize)>,
    pub options: RenderOptions,
}

impl BatchTape {
    pub fn outputs(&self) -> impl Iterator<Item = &RenderOutput> {
        self.rays.iter().map(|r| &r.output)
    }
}

/// Geometry, density and blend weights of one ray; colors are filled later.
fn trace(model: &MmpiModel, ray: &Ray, opts: &RenderOptions) -> RayTape {
    let mut samples = Vec::new();
    for &i in &opts.mpis {
        let mpi = &model.mpis[i];
        sample_mpi_into(mpi, i, model.store.values(mpi.density), ray, &mut samples);
    }
    if opts.cube {
        if let Some(cube) = &model.cube {
            sample_cube_into(cube, model.store.values(cube.density), ray, &mut samples);
        }
    }
    sort_samples(&mut samples);
    if opts.reliability {
        for s in &mut samples {
            if let FieldId::Mpi(i) = s.field {
                let set = gather_logits(&model.mpis, &model.store, &opts.mpis, i, &s.point, &s.world.0, s.world.1);
                s.blend = softmax_confidence(&set);
                s.reliability = Some(set);
            }
        }
    }
    let beta: Vec<f64> = samples.iter().map(|s| s.blend * s.alpha).collect();
    let (trans, t_final) = transmittance(&beta);
    let weights: Vec<f64> = trans.iter().zip(&beta).map(|(t, b)| t * b).collect();
    RayTape {
        samples,
        transmittance: trans,
        final_transmittance: t_final,
        output: RenderOutput {
            color: [0.0; 3],
            accumulated_opacity: 1.0 - t_final,
            per_sample_weights: weights,
            expected_depth: f64::INFINITY,
        },
    }
}

fn gather_feature(model: &MmpiModel, s: &FieldSample, out: &mut [f64]) {
    match (s.field, &s.stencil) {
        (FieldId::Mpi(i), Stencil::Plane(st)) => {
            let mpi = &model.mpis[i];
            mpi.feature_layout.gather(model.store.values(mpi.features), st, out);
        }
        (FieldId::Cube, Stencil::Cube(st)) => {
            let cube = model.cube.as_ref().expect("cube sample without a cube");
            cube.feature_layout.gather(model.store.values(cube.features), st, out);
        }
        _ => unreachable!("stencil kind matches its field"),
    }
}

/// Renders a batch of rays and keeps everything needed for the reverse pass.
pub fn render_batch(model: &MmpiModel, rays: &[Ray], opts: &RenderOptions) -> Result<BatchTape> {
    opts.validate(model)?;
    let mut tapes: Vec<RayTape> = rays.par_iter().map(|r| trace(model, r, opts)).collect();

    let mut rows = Vec::new();
    for (r, tape) in tapes.iter_mut().enumerate() {
        for (k, s) in tape.samples.iter_mut().enumerate() {
            let w = tape.output.per_sample_weights[k];
            if opts.color_skip <= 0.0 || w >= opts.color_skip {
                s.row = Some(rows.len());
                rows.push((r, k));
            }
        }
    }
    let head = if rows.is_empty() {
        None
    } else {
        let dim = model.head.input_dim();
        let d = model.feature_dim();
        let mut input = Array2::zeros((rows.len(), dim));
        let slice = input.as_slice_mut().expect("standard layout");
        slice
            .par_chunks_mut(dim)
            .zip(rows.par_iter())
            .for_each(|(row, &(r, k))| {
                let s = &tapes[r].samples[k];
                gather_feature(model, s, &mut row[..d]);
                model.head.encode_geometry(&s.head_position, &s.head_direction, row);
            });
        let head = model.head.forward(&model.store, input)?;
        for (n, &(r, k)) in rows.iter().enumerate() {
            tapes[r].samples[k].color = head.color(n);
        }
        Some(head)
    };
    for tape in &mut tapes {
        let weights = std::mem::take(&mut tape.output.per_sample_weights);
        tape.output = finish(&tape.samples, weights, tape.final_transmittance, opts.background);
    }
    Ok(BatchTape {
        rays: tapes,
        head,
        rows,
        options: opts.clone(),
    })
}

/// Renders rays without keeping a tape.
pub fn render_rays(model: &MmpiModel, rays: &[Ray], opts: &RenderOptions) -> Result<Vec<RenderOutput>> {
    const CHUNK: usize = 4096;
    let mut out = Vec::with_capacity(rays.len());
    for chunk in rays.chunks(CHUNK) {
        let tape = render_batch(model, chunk, opts)?;
        out.extend(tape.rays.into_iter().map(|r| r.output));
    }
    Ok(out)
}

pub fn render_ray(model: &MmpiModel, ray: &Ray, opts: &RenderOptions) -> Result<RenderOutput> {
    Ok(render_rays(model, std::slice::from_ref(ray), opts)?.remove(0))
}

/// Full-frame render in row-major pixel order.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderedImage {
    pub width: usize,
    pub height: usize,
    pub rgb: Vec<[f64; 3]>,
    pub depth: Vec<f64>,
    pub opacity: Vec<f64>,
}

pub fn render_image(model: &MmpiModel, camera: &Camera, opts: &RenderOptions) -> Result<RenderedImage> {
    let pixels: Vec<usize> = (0..camera.pixel_count()).collect();
    let rays = crate::geometry::generate_rays(camera, &pixels)?;
    let out = render_rays(model, &rays, opts)?;
    Ok(RenderedImage {
        width: camera.width,
        height: camera.height,
        rgb: out.iter().map(|o| o.color).collect(),
        depth: out.iter().map(|o| o.expected_depth).collect(),
        opacity: out.iter().map(|o| o.accumulated_opacity).collect(),
    })
}

/// Upstream gradients for one ray.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RayGrad {
    /// `dL/dĈ`.
    pub color: [f64; 3],
    /// `dL/d(accumulated opacity)`.
    pub opacity: f64,
    /// `dL/dw_k` per sample; empty means zero.
    pub weights: Vec<f64>,
    /// `dL/dc_k` per sample; empty means zero.
    pub sample_colors: Vec<[f64; 3]>,
}

fn any_unfrozen(store: &ParamStore, ids: impl IntoIterator<Item = crate::optim::ParamId>) -> bool {
    ids.into_iter().any(|id| !store.is_frozen(id))
}

/// Accumulates parameter gradients for a batch. Gradients are scattered in
/// ray order, so the result does not depend on the thread count.
pub fn backward_batch(model: &mut MmpiModel, tape: &BatchTape, grads: &[RayGrad]) -> Result<()> {
    if grads.len() != tape.rays.len() {
        return Err(Error::Shape(format!(
            "{} ray gradients for {} rays",
            grads.len(),
            tape.rays.len()
        )));
    }
    let bg = tape.options.background;
    let MmpiModel {
        store,
        mpis,
        cube,
        head,
    } = model;
    let head_live = any_unfrozen(store, head.layers.iter().flat_map(|l| [l.weight, l.bias]));
    let features_live = any_unfrozen(store, mpis.iter().map(|m| m.features))
        || cube.as_ref().is_some_and(|c| !store.is_frozen(c.features));
    let need_colors = head_live || features_live;
    let mut d_rgb = Array2::<f64>::zeros((if need_colors { tape.rows.len() } else { 0 }, 3));

    for (ray, g) in tape.rays.iter().zip(grads) {
        let n = ray.samples.len();
        let w = &ray.output.per_sample_weights;
        // u_k = dL/dw_k, with the background term folded in through T_final = 1 - Σ w.
        let u: Vec<f64> = (0..n)
            .map(|k| {
                let c = ray.samples[k].color;
                let mut v = g.opacity;
                for ch in 0..3 {
                    v += g.color[ch] * (c[ch] - bg[ch]);
                }
                if let Some(e) = g.weights.get(k) {
                    v += e;
                }
                v
            })
            .collect();
        let mut rest = 0.0;
        for k in (0..n).rev() {
            let s = &ray.samples[k];
            let beta = s.blend * s.alpha;
            let d_beta = ray.transmittance[k] * (u[k] - rest);
            rest = beta * u[k] + (1.0 - beta) * rest;

            let d_alpha = d_beta * s.blend;
            if let Some(set) = &s.reliability {
                reliability_backward(mpis, store, set, d_beta * s.alpha)?;
            }
            let d_sigma = d_alpha * s.delta * (1.0 - s.alpha);
            match (s.field, &s.stencil) {
                (FieldId::Mpi(i), Stencil::Plane(st)) => {
                    let m = &mpis[i];
                    if !store.is_frozen(m.density) {
                        let (_, ds) = MmpiModel::activate(s.raw, m.density_shift);
                        m.density_layout.scatter(store.grad_mut(m.density), st, &[d_sigma * ds])?;
                    }
                }
                (FieldId::Cube, Stencil::Cube(st)) => {
                    let c = cube.as_ref().expect("cube sample without a cube");
                    if !store.is_frozen(c.density) {
                        let (_, ds) = MmpiModel::activate(s.raw, c.density_shift);
                        c.density_layout.scatter(store.grad_mut(c.density), st, &[d_sigma * ds])?;
                    }
                }
                _ => unreachable!("stencil kind matches its field"),
            }
            if need_colors {
                if let Some(row) = s.row {
                    for ch in 0..3 {
                        let mut v = w[k] * g.color[ch];
                        if let Some(e) = g.sample_colors.get(k) {
                            v += e[ch];
                        }
                        d_rgb[[row, ch]] = v;
                    }
                }
            }
        }
    }

    if need_colors {
        if let Some(head_tape) = &tape.head {
            let d_feat = head.backward(store, head_tape, d_rgb.view(), head_live)?;
            if features_live {
                for (n, &(r, k)) in tape.rows.iter().enumerate() {
                    let s = &tape.rays[r].samples[k];
                    let row = d_feat.row(n);
                    let row = row.as_slice().expect("standard layout");
                    match (s.field, &s.stencil) {
                        (FieldId::Mpi(i), Stencil::Plane(st)) => {
                            let m = &mpis[i];
                            if !store.is_frozen(m.features) {
                                m.feature_layout.scatter(store.grad_mut(m.features), st, row)?;
                            }
                        }
                        (FieldId::Cube, Stencil::Cube(st)) => {
                            let c = cube.as_ref().expect("cube sample without a cube");
                            if !store.is_frozen(c.features) {
                                c.feature_layout.scatter(store.grad_mut(c.features), st, row)?;
                            }
                        }
                        _ => unreachable!("stencil kind matches its field"),
                    }
                }
            }
        }
    }
    Ok(())
}
