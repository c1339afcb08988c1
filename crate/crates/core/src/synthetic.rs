//! Analytic scenes of textured opaque rectangles with exact ground truth.

use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataset::{Intrinsics, RgbImage, SceneDataset, Split};
use crate::error::{Error, Result};
use crate::geometry::{Camera, Pose, Ray, Vec3};

/// Smooth procedural texture: a sum of a few plane waves per channel.
#[derive(Clone, Debug, PartialEq)]
pub struct Texture {
    pub base: [f64; 3],
    /// `(amplitude, frequency_u, frequency_v, phase)` per wave and channel.
    pub waves: Vec<[(f64, f64, f64, f64); 3]>,
}

impl Texture {
    pub fn constant(c: [f64; 3]) -> Self {
        Texture { base: c, waves: vec![] }
    }

    /// Random texture with `waves` components of at most `max_freq` cycles per unit.
    pub fn random(rng: &mut impl Rng, waves: usize, max_freq: f64) -> Self {
        let base = [rng.random_range(0.3..0.7), rng.random_range(0.3..0.7), rng.random_range(0.3..0.7)];
        let waves = (0..waves)
            .map(|_| {
                std::array::from_fn(|_| {
                    (
                        rng.random_range(0.05..0.25 / waves.max(1) as f64 * 2.0),
                        rng.random_range(-max_freq..max_freq),
                        rng.random_range(-max_freq..max_freq),
                        rng.random_range(0.0..std::f64::consts::TAU),
                    )
                })
            })
            .collect();
        Texture { base, waves }
    }

    pub fn eval(&self, u: f64, v: f64) -> [f64; 3] {
        std::array::from_fn(|c| {
            let mut x = self.base[c];
            for w in &self.waves {
                let (a, fu, fv, ph) = w[c];
                x += a * (std::f64::consts::TAU * (fu * u + fv * v) + ph).sin();
            }
            x.clamp(0.0, 1.0)
        })
    }
}

/// Opaque two-sided rectangle `center + a u + b v` with `|a| ≤ half_u`, `|b| ≤ half_v`.
#[derive(Clone, Debug, PartialEq)]
pub struct Rect {
    pub center: Vec3,
    pub u: Vec3,
    pub v: Vec3,
    pub half_u: f64,
    pub half_v: f64,
    pub texture: Texture,
}

impl Rect {
    /// Distance along `ray` to the rectangle and the texture coordinates of the hit.
    pub fn intersect(&self, ray: &Ray) -> Option<(f64, f64, f64)> {
        let n = self.u.cross(&self.v);
        let denom = ray.direction.dot(&n);
        if denom.abs() < 1e-12 {
            return None;
        }
        let t = (self.center - ray.origin).dot(&n) / denom;
        if t <= 0.0 {
            return None;
        }
        let d = ray.at(t) - self.center;
        let (a, b) = (d.dot(&self.u), d.dot(&self.v));
        (a.abs() <= self.half_u && b.abs() <= self.half_v).then_some((t, a, b))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Layout {
    /// A textured back wall with a smaller panel in front of it.
    Frontal,
    /// A frontal wall meeting a lateral wall on the right.
    Corner,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Trajectory {
    /// Cameras advancing along `-z`, looking forward.
    Forward,
    /// Cameras on a horizontal circle, looking at the scene center.
    Ring,
}

impl FromStr for Layout {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "frontal" => Ok(Layout::Frontal),
            "corner" => Ok(Layout::Corner),
            other => Err(Error::Config(format!("unknown layout '{other}' (frontal or corner)"))),
        }
    }
}

impl FromStr for Trajectory {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "forward" => Ok(Trajectory::Forward),
            "ring" => Ok(Trajectory::Ring),
            other => Err(Error::Config(format!("unknown trajectory '{other}' (forward or ring)"))),
        }
    }
}

/// Description of a synthetic scene; parsed from `key = value` text.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub layout: Layout,
    pub trajectory: Trajectory,
    pub width: usize,
    pub height: usize,
    /// Full horizontal field of view in degrees.
    pub fov_x: f64,
    pub train_views: usize,
    pub test_views: usize,
    /// Length of the forward path, or radius of the ring.
    pub path_length: f64,
    /// Largest per-view yaw and pitch perturbation in degrees.
    pub jitter: f64,
    /// Views cycle through headings turned right by 0, pan/2 and pan degrees.
    pub pan: f64,
    /// Distance from the first camera to the frontal wall.
    pub depth: f64,
    pub background: [f64; 3],
    /// Highest texture frequency in cycles per world unit.
    pub max_freq: f64,
    /// Replaces the layout's rectangles when set.
    pub rects: Option<Vec<Rect>>,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            layout: Layout::Frontal,
            trajectory: Trajectory::Forward,
            width: 64,
            height: 48,
            fov_x: 70.0,
            train_views: 20,
            test_views: 5,
            path_length: 1.0,
            jitter: 2.0,
            pan: 0.0,
            depth: 5.0,
            background: [1.0; 3],
            max_freq: 0.6,
            rects: None,
        }
    }
}

impl SceneSpec {
    pub fn parse_str(text: &str) -> Result<Self> {
        let mut s = SceneSpec::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected 'key = value'", n + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            let num = |v: &str| -> Result<f64> {
                v.parse()
                    .map_err(|_| Error::Config(format!("line {}: invalid number '{v}' for '{k}'", n + 1)))
            };
            let int = |v: &str| -> Result<usize> {
                v.parse()
                    .map_err(|_| Error::Config(format!("line {}: invalid integer '{v}' for '{k}'", n + 1)))
            };
            match k {
                "layout" => s.layout = v.parse()?,
                "trajectory" => s.trajectory = v.parse()?,
                "width" => s.width = int(v)?,
                "height" => s.height = int(v)?,
                "fov_x" => s.fov_x = num(v)?,
                "train_views" => s.train_views = int(v)?,
                "test_views" => s.test_views = int(v)?,
                "path_length" => s.path_length = num(v)?,
                "jitter" => s.jitter = num(v)?,
                "pan" => s.pan = num(v)?,
                "depth" => s.depth = num(v)?,
                "max_freq" => s.max_freq = num(v)?,
                "background" => {
                    let c: Vec<f64> = v.split(',').map(|x| num(x.trim())).collect::<Result<_>>()?;
                    s.background = match c.as_slice() {
                        &[r, g, b] => [r, g, b],
                        &[x] => [x; 3],
                        _ => return Err(Error::Config("background needs one or three values".into())),
                    };
                }
                other => return Err(Error::Config(format!("unknown scene key '{other}'"))),
            }
        }
        Ok(s)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_str(&text)
    }

    fn intrinsics(&self) -> Result<Intrinsics> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::Config("image size must be positive".into()));
        }
        if !(self.fov_x > 0.0 && self.fov_x < 179.0) {
            return Err(Error::Config(format!("fov_x must lie in (0, 179) degrees, got {}", self.fov_x)));
        }
        let f = self.width as f64 / 2.0 / (self.fov_x.to_radians() / 2.0).tan();
        Ok(Intrinsics {
            width: self.width,
            height: self.height,
            fx: f,
            fy: f,
            cx: self.width as f64 / 2.0,
            cy: self.height as f64 / 2.0,
        })
    }
}

/// Rectangles of a layout with textures drawn from `rng`.
pub fn layout_rects(spec: &SceneSpec, rng: &mut impl Rng) -> Vec<Rect> {
    let d = spec.depth;
    let x = Vec3::x();
    let y = Vec3::y();
    let z = Vec3::z();
    match spec.layout {
        Layout::Frontal => vec![
            Rect {
                center: Vec3::new(0.0, 0.0, -d),
                u: x,
                v: y,
                half_u: 2.5 * d,
                half_v: 2.5 * d,
                texture: Texture::random(rng, 3, spec.max_freq),
            },
            Rect {
                center: Vec3::new(-0.25 * d, 0.05 * d, -0.6 * d),
                u: x,
                v: y,
                half_u: 0.18 * d,
                half_v: 0.14 * d,
                texture: Texture::random(rng, 2, spec.max_freq),
            },
        ],
        Layout::Corner => {
            let side = 0.3 * d;
            let far = spec.path_length + d;
            vec![
                // Frontal wall, ending at the corner on the right.
                Rect {
                    center: Vec3::new(side - 1.5 * d, 0.0, -far),
                    u: x,
                    v: y,
                    half_u: 1.5 * d,
                    half_v: 1.5 * d,
                    texture: Texture::random(rng, 3, spec.max_freq),
                },
                // Lateral wall on the right, running from behind the start to the corner.
                Rect {
                    center: Vec3::new(side, 0.0, 0.5 * (0.5 * d - far)),
                    u: -z,
                    v: y,
                    half_u: 0.5 * (far + 0.5 * d),
                    half_v: 1.5 * d,
                    texture: Texture::random(rng, 3, spec.max_freq),
                },
            ]
        }
    }
}

/// Generated dataset together with the analytic scene.
#[derive(Clone, Debug)]
pub struct SyntheticScene {
    pub spec: SceneSpec,
    pub rects: Vec<Rect>,
    pub dataset: SceneDataset,
    /// Ground-truth depth along each ray, per frame; infinite where nothing is hit.
    pub depths: Vec<Vec<f64>>,
}

/// Closest hit of `ray`: distance and color.
pub fn trace(rects: &[Rect], ray: &Ray) -> Option<(f64, [f64; 3])> {
    let mut best: Option<(f64, [f64; 3])> = None;
    for r in rects {
        if let Some((t, a, b)) = r.intersect(ray) {
            if best.is_none_or(|(bt, _)| t < bt) {
                best = Some((t, r.texture.eval(a, b)));
            }
        }
    }
    best
}

/// Renders color and depth of every pixel.
pub fn render_ground_truth(rects: &[Rect], camera: &Camera, background: [f64; 3]) -> Result<(RgbImage, Vec<f64>)> {
    let mut pixels = Vec::with_capacity(camera.pixel_count());
    let mut depth = Vec::with_capacity(camera.pixel_count());
    for p in 0..camera.pixel_count() {
        let ray = camera.ray(p)?;
        match trace(rects, &ray) {
            Some((t, c)) => {
                pixels.push(c);
                depth.push(t);
            }
            None => {
                pixels.push(background);
                depth.push(f64::INFINITY);
            }
        }
    }
    Ok((RgbImage::new(camera.width, camera.height, pixels)?, depth))
}

fn rotation_yaw_pitch(yaw: f64, pitch: f64) -> nalgebra::Matrix3<f64> {
    let ry = nalgebra::Rotation3::from_axis_angle(&Vec3::y_axis(), yaw.to_radians());
    let rx = nalgebra::Rotation3::from_axis_angle(&Vec3::x_axis(), pitch.to_radians());
    *(ry * rx).matrix()
}

fn trajectory_poses(spec: &SceneSpec, rng: &mut impl Rng) -> Result<Vec<Pose>> {
    let n = spec.train_views + spec.test_views;
    let mut poses = Vec::with_capacity(n);
    for i in 0..n {
        let s = if n > 1 { i as f64 / (n - 1) as f64 } else { 0.0 };
        let jy = spec.jitter * rng.random_range(-1.0..1.0) - spec.pan * (i % 3) as f64 / 2.0;
        let jp = spec.jitter * rng.random_range(-1.0..1.0);
        let pose = match spec.trajectory {
            Trajectory::Forward => Pose::new(
                rotation_yaw_pitch(jy, jp),
                Vec3::new(0.0, 0.0, -s * spec.path_length),
            )?,
            Trajectory::Ring => {
                let theta = std::f64::consts::TAU * i as f64 / n as f64;
                let center = Vec3::new(0.0, 0.0, -spec.depth * 0.5);
                let eye = center + Vec3::new(theta.sin(), 0.0, theta.cos()) * spec.path_length;
                let look = Pose::look_at(eye, center, Vec3::y())?;
                Pose::new(look.rotation() * rotation_yaw_pitch(jy, jp), eye)?
            }
        };
        poses.push(pose);
    }
    Ok(poses)
}

/// Test views are spread evenly through the trajectory and never at its ends,
/// so every test view is bracketed by training views.
fn is_test(i: usize, spec: &SceneSpec) -> bool {
    let n = spec.train_views + spec.test_views;
    (0..spec.test_views).any(|k| i == (2 * k + 1) * n / (2 * spec.test_views))
}

pub fn generate_synthetic_scene(spec: &SceneSpec, seed: u64) -> Result<SyntheticScene> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rects = match &spec.rects {
        Some(r) => r.clone(),
        None => layout_rects(spec, &mut rng),
    };
    if rects.is_empty() {
        return Err(Error::Config("synthetic scene has no rectangles".into()));
    }
    if spec.train_views == 0 {
        return Err(Error::Config("synthetic scene needs at least one training view".into()));
    }
    let k = spec.intrinsics()?;
    let poses = trajectory_poses(spec, &mut rng)?;
    let mut frames = Vec::with_capacity(poses.len());
    let mut depths = Vec::with_capacity(poses.len());
    let mut train_depths = Vec::new();
    for (i, pose) in poses.into_iter().enumerate() {
        let camera = Camera::new(k.width, k.height, k.fx, k.fy, k.cx, k.cy, pose)?;
        let (image, depth) = render_ground_truth(&rects, &camera, spec.background)?;
        let split = if is_test(i, spec) { Split::Test } else { Split::Train };
        if split == Split::Train {
            train_depths.extend(depth.iter().cloned().filter(|d| d.is_finite()));
        }
        frames.push(crate::dataset::Frame {
            file_path: format!("images/{i:03}.png").into(),
            camera,
            split,
            image: Some(image.quantized()),
        });
        depths.push(depth);
    }
    train_depths.sort_by(f64::total_cmp);
    let depth_hint = train_depths.get(train_depths.len() / 2).copied();
    Ok(SyntheticScene {
        spec: spec.clone(),
        rects,
        dataset: SceneDataset {
            intrinsics: k,
            depth_hint,
            frames,
        },
        depths,
    })
}
