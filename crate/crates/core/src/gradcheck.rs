//! Finite-difference verification of the full training objective on a small
//! two-MPI scene with a cube, covering every parameter group.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::appearance::HeadConfig;
use crate::config::TrainConfig;
use crate::error::Result;
use crate::geometry::{MpiFrustum, Pose, Ray, Vec3};
use crate::losses::{batch_loss, tv_backward, tv_loss, LossWeights};
use crate::model::{CubeSpec, MmpiModel, ModelSpec, MpiSpec};
use crate::optim::{grad_check_store, GradCheckReport, ParamGroup, ParamId};
use crate::renderer::{backward_batch, render_batch, RenderOptions};

pub const DEFAULT_TOLERANCE: f64 = 1e-4;
/// Denominator floor of the relative error; gradients below it are judged
/// on absolute error.
pub const ERROR_FLOOR: f64 = 1e-6;
const STEP: f64 = 1e-6;

/// A batch of rays through two overlapping MPIs and a cube, with random
/// parameters and targets.
pub struct ToyScene {
    pub model: MmpiModel,
    pub rays: Vec<Ray>,
    pub targets: Vec<[f64; 3]>,
    pub options: RenderOptions,
    pub weights: LossWeights,
    pub scale: f64,
}

impl ToyScene {
    pub fn new(head: HeadConfig, weights: LossWeights, background: [f64; 3], seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let turned = nalgebra::Rotation3::from_axis_angle(&Vec3::y_axis(), 0.5);
        let spec = ModelSpec {
            mpis: vec![
                MpiSpec {
                    frustum: MpiFrustum::new(Pose::identity(), 0.8, 0.6, 1.0)?,
                    res_x: 5,
                    res_y: 4,
                    planes: 5,
                },
                MpiSpec {
                    frustum: MpiFrustum::new(Pose::new(*turned.matrix(), Vec3::new(0.1, 0.0, 0.2))?, 0.9, 0.7, 0.8)?,
                    res_x: 4,
                    res_y: 5,
                    planes: 4,
                },
            ],
            cube: Some(CubeSpec {
                res: [4, 3, 4],
                aabb_min: Vec3::new(-1.2, -1.0, -2.5),
                aabb_max: Vec3::new(1.2, 1.0, 0.5),
                step_ratio: 0.7,
            }),
            head,
            alpha_init: 0.2,
            feature_init: 0.5,
        };
        let mut model = MmpiModel::new(&spec, seed)?;
        for p in model.store.params_mut() {
            let spread = match p.group {
                ParamGroup::Head => 0.0,
                ParamGroup::Reliability => 1.0,
                _ => 0.6,
            };
            for v in &mut p.values {
                *v += rng.random_range(-spread..=spread);
            }
        }
        let rays = (0..48)
            .map(|_| {
                let o = Vec3::new(
                    rng.random_range(-0.3..0.3),
                    rng.random_range(-0.2..0.2),
                    rng.random_range(-0.2..0.3),
                );
                let d = Vec3::new(rng.random_range(-0.5..0.5), rng.random_range(-0.4..0.4), -1.0);
                Ray::new(o, d)
            })
            .collect();
        let targets = (0..48).map(|_| [rng.random(), rng.random(), rng.random()]).collect();
        let mut options = RenderOptions::all(&model, true, background);
        options.color_skip = 0.0;
        Ok(ToyScene {
            model,
            rays,
            targets,
            options,
            weights,
            scale: 0.9,
        })
    }

    pub fn from_config(config: &TrainConfig) -> Result<Self> {
        // Exaggerated regularizer weights make every term visible in the check.
        let weights = LossWeights {
            pt_rgb: config.loss.pt_rgb.max(0.05),
            bg: config.loss.bg.max(0.05),
            dist: config.loss.dist.max(0.05),
            tv: config.loss.tv.max(0.05),
        };
        Self::new(config.head, weights, config.background, config.seed)
    }

    fn tv_tensors(&self) -> Vec<(ParamId, Vec<usize>, Vec<usize>)> {
        tv_tensors(&self.model)
    }

    /// Total objective for the current parameters.
    pub fn loss(&self, model: &MmpiModel) -> Result<f64> {
        let tape = render_batch(model, &self.rays, &self.options)?;
        let (terms, _) = batch_loss(&tape, &self.targets, &self.weights, self.scale, false)?;
        let tv: f64 = self
            .tv_tensors()
            .iter()
            .map(|(id, shape, axes)| tv_loss(model.store.values(*id), shape, axes))
            .sum();
        Ok(terms.total + self.weights.tv * tv)
    }

    /// Fills the gradient buffers with the analytic gradient of [`Self::loss`].
    pub fn backward(&mut self) -> Result<()> {
        self.model.store.zero_grad();
        let tape = render_batch(&self.model, &self.rays, &self.options)?;
        let (_, grads) = batch_loss(&tape, &self.targets, &self.weights, self.scale, false)?;
        backward_batch(&mut self.model, &tape, &grads)?;
        for (id, shape, axes) in self.tv_tensors() {
            let values = self.model.store.values(id).to_vec();
            tv_backward(&values, &shape, &axes, self.weights.tv, self.model.store.grad_mut(id));
        }
        Ok(())
    }
}

/// Tensors regularized by total variation, with their shapes and axes.
fn tv_tensors(m: &MmpiModel) -> Vec<(ParamId, Vec<usize>, Vec<usize>)> {
    let mut out = Vec::new();
    for f in &m.mpis {
        out.push((f.density, f.density_layout.shape(), vec![1, 2]));
        out.push((f.features, f.feature_layout.shape(), vec![1, 2]));
        out.push((f.reliability, f.reliability_layout.grid.shape(), vec![0, 1, 2]));
    }
    if let Some(c) = &m.cube {
        out.push((c.density, c.density_layout.shape(), vec![0, 1, 2]));
        out.push((c.features, c.feature_layout.shape(), vec![0, 1, 2]));
    }
    out
}

/// Finite-difference outcome for one parameter group.
#[derive(Clone, Debug)]
pub struct GroupCheck {
    pub group: ParamGroup,
    pub report: GradCheckReport,
}

/// Checks up to `per_tensor` coordinates of every tensor, preferring those
/// with a nonzero analytic gradient. Returns one entry per parameter group.
pub fn check_all_groups(scene: &mut ToyScene, per_tensor: usize, tolerance: f64, seed: u64) -> Result<Vec<GroupCheck>> {
    scene.backward()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut by_group: Vec<(ParamGroup, Vec<(ParamId, usize)>)> = Vec::new();
    for id in scene.model.store.ids().collect::<Vec<_>>() {
        let p = scene.model.store.param(id);
        let mut live: Vec<usize> = (0..p.grad.len()).filter(|&i| p.grad[i] != 0.0).collect();
        live.shuffle(&mut rng);
        live.truncate(per_tensor);
        let coords = live.into_iter().map(|i| (id, i));
        match by_group.iter_mut().find(|(g, _)| *g == p.group) {
            Some((_, v)) => v.extend(coords),
            None => by_group.push((p.group, coords.collect())),
        }
    }
    let mut store = scene.model.store.clone();
    let mut probe = scene.model.clone();
    let mut out = Vec::new();
    for (group, coords) in by_group {
        let mut failure = None;
        let report = grad_check_store(
            &mut store,
            &coords,
            |s| {
                probe.store.clone_from(s);
                scene.loss(&probe).unwrap_or_else(|e| {
                    failure.get_or_insert(e);
                    f64::NAN
                })
            },
            STEP,
            tolerance,
            ERROR_FLOOR,
        );
        if let Some(e) = failure {
            return Err(e);
        }
        out.push(GroupCheck { group, report });
    }
    Ok(out)
}
