//! Independent oracles shared by the integration and acceptance tests.
#![allow(dead_code)]

use mmpi::appearance::HeadConfig;
use mmpi::dataset::RgbImage;
use mmpi::geometry::{MpiFrustum, Pose, Ray, Vec3};
use mmpi::grids::Bilinear;
use mmpi::model::{ModelSpec, MpiSpec};
use mmpi::renderer::{merge_samples, sample_mpi, FieldSample, Stencil};
use mmpi::{FieldId, MmpiModel};
use nalgebra::{Rotation3, Unit};
use rand::Rng;

pub fn tiny_head() -> HeadConfig {
    HeadConfig {
        feature_dim: 3,
        pe_freqs_x: 1,
        pe_freqs_d: 1,
        hidden_width: 6,
        hidden_layers: 1,
    }
}

pub fn random_unit(rng: &mut impl Rng) -> Vec3 {
    loop {
        let v = Vec3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        );
        let n = v.norm();
        if n > 0.1 && n <= 1.0 {
            return v / n;
        }
    }
}

pub fn random_pose(rng: &mut impl Rng, spread: f64) -> Pose {
    let axis = Unit::new_normalize(random_unit(rng));
    let rot = Rotation3::from_axis_angle(&axis, rng.random_range(0.0..std::f64::consts::PI));
    let t = Vec3::new(
        rng.random_range(-spread..spread),
        rng.random_range(-spread..spread),
        rng.random_range(-spread..spread),
    );
    Pose::new(*rot.matrix(), t).unwrap()
}

pub fn random_frustum(rng: &mut impl Rng) -> MpiFrustum {
    MpiFrustum::new(
        random_pose(rng, 1.0),
        rng.random_range(0.3..1.5),
        rng.random_range(0.3..1.5),
        rng.random_range(0.2..2.0),
    )
    .unwrap()
}

/// `k` random MPIs with random plane counts and no cube.
pub fn random_mpi_model(rng: &mut impl Rng, k: usize) -> MmpiModel {
    let mpis = (0..k)
        .map(|_| MpiSpec {
            frustum: random_frustum(rng),
            res_x: 6,
            res_y: 5,
            planes: rng.random_range(3..17),
        })
        .collect();
    let spec = ModelSpec {
        mpis,
        cube: None,
        head: tiny_head(),
        alpha_init: 0.1,
        feature_init: 0.1,
    };
    MmpiModel::new(&spec, rng.random()).unwrap()
}

pub fn random_ray(rng: &mut impl Rng) -> Ray {
    let o = Vec3::new(
        rng.random_range(-3.0..3.0),
        rng.random_range(-3.0..3.0),
        rng.random_range(-3.0..3.0),
    );
    Ray::new(o, random_unit(rng))
}

/// One ray-plane intersection: world distance, MPI index, plane index.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Hit {
    pub distance: f64,
    pub mpi: usize,
    pub plane: usize,
}

/// World-space plane intersection followed by a sort. Plane `l` of `L` sits
/// at NDC depth `-1 + 2l/(L-1)`, i.e. camera depth `2 near / (z_ndc - 1)`;
/// the last plane lies at infinity. MPIs the ray does not face are skipped.
pub fn oracle_hits(model: &MmpiModel, ray: &Ray) -> Vec<Hit> {
    let mut hits = Vec::new();
    for (i, m) in model.mpis.iter().enumerate() {
        let f = &m.frustum;
        let r = f.pose.rotation();
        let axis_x = r.column(0).into_owned();
        let axis_y = r.column(1).into_owned();
        let axis_z = r.column(2).into_owned();
        let center = f.pose.position();
        let dz = ray.direction.dot(&axis_z);
        if dz >= 0.0 {
            continue;
        }
        let planes = m.density_layout.plane_z.len();
        for l in 0..planes {
            let z_ndc = -1.0 + 2.0 * l as f64 / (planes - 1) as f64;
            if l + 1 == planes {
                let dx = ray.direction.dot(&axis_x);
                let dy = ray.direction.dot(&axis_y);
                if dx.abs() <= f.tan_half_fov_x * -dz && dy.abs() <= f.tan_half_fov_y * -dz {
                    hits.push(Hit {
                        distance: f64::INFINITY,
                        mpi: i,
                        plane: l,
                    });
                }
                continue;
            }
            let depth = 2.0 * f.near / (z_ndc - 1.0);
            // Plane through center + depth * axis_z with normal axis_z.
            let p0 = center + axis_z * depth;
            let t = (p0 - ray.origin).dot(&axis_z) / dz;
            if t < 0.0 {
                continue;
            }
            let q = ray.origin + ray.direction * t - center;
            let (qx, qy, qz) = (q.dot(&axis_x), q.dot(&axis_y), q.dot(&axis_z));
            if qx.abs() <= f.tan_half_fov_x * -qz && qy.abs() <= f.tan_half_fov_y * -qz {
                hits.push(Hit {
                    distance: t,
                    mpi: i,
                    plane: l,
                });
            }
        }
    }
    hits.sort_by(|a, b| {
        a.distance
            .partial_cmp(&b.distance)
            .unwrap()
            .then(a.mpi.cmp(&b.mpi))
            .then(a.plane.cmp(&b.plane))
    });
    hits
}

/// Per-MPI sampling followed by the engine's merge.
pub fn engine_hits(model: &MmpiModel, ray: &Ray) -> Vec<Hit> {
    let per_field = (0..model.mpi_count()).map(|i| sample_mpi(model, i, ray)).collect();
    merge_samples(per_field)
        .into_iter()
        .map(|s| Hit {
            distance: s.distance,
            mpi: match s.field {
                FieldId::Mpi(i) => i,
                FieldId::Cube => usize::MAX,
            },
            plane: s.index,
        })
        .collect()
}

pub fn compare_hits(engine: &[Hit], oracle: &[Hit], tol: f64) -> Result<(), String> {
    if engine.len() != oracle.len() {
        return Err(format!("{} samples, oracle has {}", engine.len(), oracle.len()));
    }
    for (k, (a, b)) in engine.iter().zip(oracle).enumerate() {
        if (a.mpi, a.plane) != (b.mpi, b.plane) {
            return Err(format!("sample {k}: ({}, {}) vs oracle ({}, {})", a.mpi, a.plane, b.mpi, b.plane));
        }
        let same = if b.distance.is_infinite() {
            a.distance == b.distance
        } else {
            (a.distance - b.distance).abs() <= tol
        };
        if !same {
            return Err(format!("sample {k}: distance {} vs oracle {}", a.distance, b.distance));
        }
    }
    Ok(())
}

/// A bare sample for compositing tests.
pub fn plain_sample(distance: f64, alpha: f64, blend: f64, color: [f64; 3]) -> FieldSample {
    FieldSample {
        distance,
        field: FieldId::Mpi(0),
        index: 0,
        point: Vec3::zeros(),
        world: (Vec3::zeros(), 1.0),
        head_position: Vec3::zeros(),
        head_direction: -Vec3::z(),
        delta: 1.0,
        raw: 0.0,
        sigma: 0.0,
        alpha,
        blend,
        color,
        stencil: Stencil::Plane(Bilinear {
            offsets: [0; 4],
            weights: [0.25; 4],
        }),
        reliability: None,
        row: None,
    }
}

pub fn psnr_reference(a: &RgbImage, b: &RgbImage) -> f64 {
    let mut sum = 0.0;
    for (p, q) in a.pixels.iter().zip(&b.pixels) {
        for c in 0..3 {
            sum += (p[c] - q[c]) * (p[c] - q[c]);
        }
    }
    let mse = sum / (a.pixels.len() * 3) as f64;
    if mse == 0.0 {
        99.0
    } else {
        (10.0 * (1.0 / mse).log10()).min(99.0)
    }
}

/// Direct 2D-window SSIM: Gaussian weights (σ = 1.5) over every window of
/// side `min(11, w, h)` rounded down to odd that fits inside the image.
pub fn ssim_reference(a: &RgbImage, b: &RgbImage) -> f64 {
    let (w, h) = (a.width, a.height);
    let mut n = 11.min(w).min(h);
    if n % 2 == 0 {
        n -= 1;
    }
    let c = (n as f64 - 1.0) / 2.0;
    let mut kernel = vec![0.0; n * n];
    for j in 0..n {
        for i in 0..n {
            let r2 = (i as f64 - c).powi(2) + (j as f64 - c).powi(2);
            kernel[j * n + i] = (-r2 / (2.0 * 1.5 * 1.5)).exp();
        }
    }
    let total: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= total);
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let mut channels = 0.0;
    for ch in 0..3 {
        let mut acc = 0.0;
        let mut count = 0;
        for y0 in 0..=h - n {
            for x0 in 0..=w - n {
                let (mut mx, mut my, mut xx, mut yy, mut xy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for j in 0..n {
                    for i in 0..n {
                        let g = kernel[j * n + i];
                        let p = a.pixels[(y0 + j) * w + x0 + i][ch];
                        let q = b.pixels[(y0 + j) * w + x0 + i][ch];
                        mx += g * p;
                        my += g * q;
                        xx += g * p * p;
                        yy += g * q * q;
                        xy += g * p * q;
                    }
                }
                let (vx, vy, cov) = (xx - mx * mx, yy - my * my, xy - mx * my);
                acc += (2.0 * mx * my + c1) * (2.0 * cov + c2) / ((mx * mx + my * my + c1) * (vx + vy + c2));
                count += 1;
            }
        }
        channels += acc / count as f64;
    }
    channels / 3.0
}

pub fn random_image(rng: &mut impl Rng, w: usize, h: usize) -> RgbImage {
    RgbImage::new(w, h, (0..w * h).map(|_| [rng.random(), rng.random(), rng.random()]).collect()).unwrap()
}

/// A copy of `img` with bounded random perturbations, clamped to `[0, 1]`.
pub fn perturbed(rng: &mut impl Rng, img: &RgbImage, amount: f64) -> RgbImage {
    let pixels = img
        .pixels
        .iter()
        .map(|p| p.map(|v| (v + rng.random_range(-amount..=amount)).clamp(0.0, 1.0)))
        .collect();
    RgbImage::new(img.width, img.height, pixels).unwrap()
}
