//! Field construction and the two-stage optimization schedule.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::TrainConfig;
use crate::dataset::{RgbImage, SceneDataset, Split};
use crate::error::{Error, Result};
use crate::geometry::{generate_rays, MpiFrustum, Pose, Ray, Vec3};
use crate::losses::{batch_loss, tv_backward, tv_loss, LossTerms};
use crate::metrics::{psnr, ssim, MetricsReport, ViewMetrics};
use crate::model::{CubeSpec, MmpiModel, ModelSpec, MpiSpec};
use crate::optim::{exponential_decay, Adam, ParamGroup, ParamId};
use crate::renderer::{backward_batch, render_batch, render_image, RenderOptions};

/// Mean camera position with the averaged forward and up axes.
pub fn scene_frame(dataset: &SceneDataset) -> Result<Pose> {
    let cams: Vec<&Pose> = dataset.split(Split::Train).map(|f| &f.camera.cam_to_world).collect();
    if cams.is_empty() {
        return Err(Error::Input("dataset has no training frames".into()));
    }
    let n = cams.len() as f64;
    let center = cams.iter().map(|p| p.position()).sum::<Vec3>() / n;
    let forward = cams.iter().map(|p| p.forward()).sum::<Vec3>();
    let up = cams.iter().map(|p| p.up()).sum::<Vec3>();
    if forward.norm() < 1e-9 {
        // Inward-facing rings average out; fall back to the first camera.
        let first = cams[0];
        return Pose::look_at(center, center + first.forward(), first.up());
    }
    Pose::look_at(center, center + forward, up)
}

fn yaw_pitch(yaw: f64, pitch: f64) -> nalgebra::Matrix3<f64> {
    let ry = nalgebra::Rotation3::from_axis_angle(&Vec3::y_axis(), yaw.to_radians());
    let rx = nalgebra::Rotation3::from_axis_angle(&Vec3::x_axis(), pitch.to_radians());
    *(ry * rx).matrix()
}

/// Half-FOV tangents of the MPIs: the configured angles, or the widest training
/// camera widened by the margin. Several MPIs are also widened to reach halfway
/// to their nearest neighbour so that together they leave no gaps.
pub fn mpi_fov(config: &TrainConfig, dataset: &SceneDataset, orientations: &[(f64, f64)]) -> (f64, f64) {
    let widest = dataset
        .split(Split::Train)
        .map(|f| f.camera.tan_half_fov())
        .fold((0.0f64, 0.0f64), |a, b| (a.0.max(b.0), a.1.max(b.1)));
    let axes: Vec<Vec3> = orientations.iter().map(|&(y, p)| yaw_pitch(y, p) * -Vec3::z()).collect();
    let gap = axes
        .iter()
        .enumerate()
        .map(|(i, a)| {
            axes.iter()
                .enumerate()
                .filter(|&(j, _)| j != i)
                .map(|(_, b)| a.angle(b))
                .fold(f64::INFINITY, f64::min)
        })
        .filter(|a| a.is_finite())
        .fold(0.0, f64::max);
    let pick = |deg: f64, tan: f64| {
        let half = if deg > 0.0 {
            deg.to_radians() / 2.0
        } else {
            tan.atan().max(gap / 2.0) * (1.0 + config.fov_margin)
        };
        half.min(89f64.to_radians()).tan()
    };
    (pick(config.mpi_fov_x, widest.0), pick(config.mpi_fov_y, widest.1))
}

/// Near-plane distance of every MPI.
pub fn near_plane(config: &TrainConfig, dataset: &SceneDataset) -> f64 {
    if config.near > 0.0 {
        return config.near;
    }
    let hint = dataset.depth_hint.unwrap_or_else(|| {
        // Without a hint, assume the scene lies a few trajectory widths away.
        let cams: Vec<Vec3> = dataset.frames.iter().map(|f| f.camera.cam_to_world.position()).collect();
        let c = cams.iter().sum::<Vec3>() / cams.len().max(1) as f64;
        let spread = cams.iter().map(|p| (p - c).norm()).fold(0.0, f64::max);
        (4.0 * spread).max(1.0)
    });
    config.near_fraction * hint
}

/// Builds the fields described by `config`, placed relative to the training cameras.
pub fn build_fields(config: &TrainConfig, dataset: &SceneDataset) -> Result<MmpiModel> {
    config.validate()?;
    let frame = scene_frame(dataset)?;
    let orientations = config.orientations()?;
    let (tx, ty) = mpi_fov(config, dataset, &orientations);
    let near = near_plane(config, dataset);
    let mut mpis = Vec::new();
    for &(yaw, pitch) in &orientations {
        let rot = frame.rotation() * yaw_pitch(yaw, pitch);
        mpis.push(MpiSpec {
            frustum: MpiFrustum::new(Pose::orthonormalized(&rot, frame.position())?, tx, ty, near)?,
            res_x: config.mpi_res_x,
            res_y: config.mpi_res_y,
            planes: config.planes,
        });
    }
    let cube = if config.uses_cube() {
        let c = frame.position();
        let half = if config.cube_half_extent > 0.0 {
            config.cube_half_extent
        } else {
            let spread = dataset
                .split(Split::Train)
                .map(|f| (f.camera.cam_to_world.position() - c).abs().max())
                .fold(0.0, f64::max);
            spread + near
        };
        Some(CubeSpec {
            res: [config.cube_res; 3],
            aabb_min: c - Vec3::repeat(half),
            aabb_max: c + Vec3::repeat(half),
            step_ratio: config.cube_step_ratio,
        })
    } else {
        None
    };
    MmpiModel::new(
        &ModelSpec {
            mpis,
            cube,
            head: config.head,
            alpha_init: config.alpha_init,
            feature_init: config.feature_init,
        },
        config.seed,
    )
}

/// All training rays with their target colors.
#[derive(Clone, Debug)]
pub struct TrainingData {
    pub rays: Vec<Ray>,
    pub colors: Vec<[f64; 3]>,
}

impl TrainingData {
    pub fn from_dataset(dataset: &SceneDataset, split: Split) -> Result<Self> {
        let mut rays = Vec::new();
        let mut colors = Vec::new();
        for f in dataset.split(split) {
            let img = f
                .image
                .as_ref()
                .ok_or_else(|| Error::Input(format!("frame {} has no image", f.file_path.display())))?;
            let pixels: Vec<usize> = (0..f.camera.pixel_count()).collect();
            rays.extend(generate_rays(&f.camera, &pixels)?);
            colors.extend_from_slice(&img.pixels);
        }
        if rays.is_empty() {
            return Err(Error::Input(format!("split '{split}' has no frames")));
        }
        Ok(TrainingData { rays, colors })
    }

    fn batch(&self, rng: &mut ChaCha8Rng, size: usize) -> (Vec<Ray>, Vec<[f64; 3]>) {
        (0..size)
            .map(|_| {
                let i = rng.random_range(0..self.rays.len());
                (self.rays[i], self.colors[i])
            })
            .unzip()
    }
}

/// One logged training step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLog {
    pub stage: u8,
    pub iteration: usize,
    /// MPI trained in this step during stage 1.
    pub mpi: Option<usize>,
    pub terms: LossTerms,
}

fn learning_rate(config: &TrainConfig, group: ParamGroup, decay: f64) -> f64 {
    decay
        * match group {
            ParamGroup::Head => config.lr_head,
            ParamGroup::Reliability => config.lr_reliability,
            _ => config.lr_grid,
        }
}

/// Layout and TV axes of every grid tensor that is currently trainable.
fn tv_targets(model: &MmpiModel) -> Vec<(ParamId, Vec<usize>, Vec<usize>)> {
    let mut out = Vec::new();
    for m in &model.mpis {
        out.push((m.density, m.density_layout.shape(), vec![1, 2]));
        out.push((m.features, m.feature_layout.shape(), vec![1, 2]));
        out.push((m.reliability, m.reliability_layout.grid.shape(), vec![0, 1, 2]));
    }
    if let Some(c) = &model.cube {
        out.push((c.density, c.density_layout.shape(), vec![0, 1, 2]));
        out.push((c.features, c.feature_layout.shape(), vec![0, 1, 2]));
    }
    out.retain(|(id, _, _)| !model.store.is_frozen(*id));
    out
}

fn apply_tv(model: &mut MmpiModel, weight: f64, want_value: bool) -> f64 {
    if weight == 0.0 && !want_value {
        return 0.0;
    }
    let mut value = 0.0;
    for (id, shape, axes) in tv_targets(model) {
        let values = model.store.values(id).to_vec();
        if want_value {
            value += tv_loss(&values, &shape, &axes);
        }
        if weight > 0.0 {
            tv_backward(&values, &shape, &axes, weight, model.store.grad_mut(id));
        }
    }
    value
}

/// Freezes every learnable tensor except those of MPI `active` (and the cube
/// when `with_cube`) plus the shared head. Reliability stays frozen.
fn freeze_for_stage1(model: &mut MmpiModel, active: usize, with_cube: bool) {
    let mut live: Vec<ParamId> = vec![model.mpis[active].density, model.mpis[active].features];
    live.extend(model.head.layers.iter().flat_map(|l| [l.weight, l.bias]));
    if with_cube {
        if let Some(c) = &model.cube {
            live.extend([c.density, c.features]);
        }
    }
    for id in model.store.ids().collect::<Vec<_>>() {
        model.store.param_mut(id).frozen = !live.contains(&id);
    }
}

fn unfreeze_all(model: &mut MmpiModel) {
    for p in model.store.params_mut() {
        p.frozen = false;
    }
}

/// Stage 1: every MPI is optimized on its own, without reliability. MPIs take
/// turns step by step so that the shared head sees all of them; each MPI gets
/// `stage1_iters` steps. The cube trains together with MPI 0.
pub fn train_stage1(
    model: &mut MmpiModel,
    data: &TrainingData,
    config: &TrainConfig,
    mut on_step: impl FnMut(&StepLog),
) -> Result<Vec<StepLog>> {
    let k = model.mpi_count();
    let total = config.stage1_iters * k;
    let adam = Adam::default();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5157_4731);
    let mut log = Vec::new();
    for step in 0..total {
        let i = step % k;
        let iteration = step / k;
        let with_cube = i == 0 && model.cube.is_some();
        freeze_for_stage1(model, i, with_cube);
        let opts = RenderOptions {
            mpis: vec![i],
            cube: with_cube,
            reliability: false,
            background: config.background,
            color_skip: config.color_skip,
        };
        let (rays, targets) = data.batch(&mut rng, config.batch_size);
        let tape = render_batch(model, &rays, &opts)?;
        let scale = model.mpis[i].frustum.near;
        let (mut terms, grads) = batch_loss(&tape, &targets, &config.loss, scale, true)?;
        backward_batch(model, &tape, &grads)?;
        let want = config.log_every > 0 && (iteration % config.log_every == 0 || iteration + 1 == config.stage1_iters);
        terms.tv = apply_tv(model, config.loss.tv, want);
        terms.total += config.loss.tv * terms.tv;
        let decay = exponential_decay(iteration, config.stage1_iters, config.lr_final_factor);
        model.store.adam_step(&adam, |g| learning_rate(config, g, decay));
        if want {
            let entry = StepLog {
                stage: 1,
                iteration,
                mpi: Some(i),
                terms,
            };
            on_step(&entry);
            log.push(entry);
        }
    }
    unfreeze_all(model);
    Ok(log)
}

/// Stage 2: all MPIs are blended with learned reliability while everything
/// except the reliability grids stays frozen.
pub fn train_stage2(
    model: &mut MmpiModel,
    data: &TrainingData,
    config: &TrainConfig,
    mut on_step: impl FnMut(&StepLog),
) -> Result<Vec<StepLog>> {
    if model.mpi_count() < 2 || !config.reliability || config.stage2_iters == 0 {
        return Ok(vec![]);
    }
    let reliability: Vec<ParamId> = model.mpis.iter().map(|m| m.reliability).collect();
    for id in model.store.ids().collect::<Vec<_>>() {
        model.store.param_mut(id).frozen = !reliability.contains(&id);
    }
    let adam = Adam::default();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5157_4732);
    let mut opts = RenderOptions::all(model, true, config.background);
    opts.color_skip = config.color_skip;
    let scale = model.mpis.iter().map(|m| m.frustum.near).fold(f64::INFINITY, f64::min);
    let mut log = Vec::new();
    for iteration in 0..config.stage2_iters {
        let (rays, targets) = data.batch(&mut rng, config.batch_size);
        let tape = render_batch(model, &rays, &opts)?;
        let (mut terms, grads) = batch_loss(&tape, &targets, &config.loss, scale, false)?;
        backward_batch(model, &tape, &grads)?;
        let want = config.log_every > 0 && (iteration % config.log_every == 0 || iteration + 1 == config.stage2_iters);
        terms.tv = apply_tv(model, config.loss.tv, want);
        terms.total += config.loss.tv * terms.tv;
        let decay = exponential_decay(iteration, config.stage2_iters, config.lr_final_factor);
        model.store.adam_step(&adam, |g| learning_rate(config, g, decay));
        if want {
            let entry = StepLog {
                stage: 2,
                iteration,
                mpi: None,
                terms,
            };
            on_step(&entry);
            log.push(entry);
        }
    }
    unfreeze_all(model);
    Ok(log)
}

/// Builds the fields and runs both stages.
pub fn train(
    config: &TrainConfig,
    dataset: &SceneDataset,
    mut on_step: impl FnMut(&StepLog),
) -> Result<(MmpiModel, Vec<StepLog>)> {
    let mut model = build_fields(config, dataset)?;
    let data = TrainingData::from_dataset(dataset, Split::Train)?;
    let mut log = train_stage1(&mut model, &data, config, &mut on_step)?;
    log.extend(train_stage2(&mut model, &data, config, &mut on_step)?);
    Ok((model, log))
}

/// Rendering setup for evaluation: every field, with reliability when the
/// configuration enables it and there is more than one MPI.
pub fn eval_options(model: &MmpiModel, config: &TrainConfig) -> RenderOptions {
    RenderOptions::all(model, config.reliability && model.mpi_count() > 1, config.background)
}

/// Renders every view of a split and scores it against the stored images.
/// With `deterministic` set, the wall-clock runtime is left out of the report.
pub fn evaluate(
    model: &MmpiModel,
    dataset: &SceneDataset,
    split: Split,
    opts: &RenderOptions,
    config_digest: String,
    deterministic: bool,
) -> Result<MetricsReport> {
    let start = Instant::now();
    let mut views = Vec::new();
    for f in dataset.split(split) {
        let target = f
            .image
            .as_ref()
            .ok_or_else(|| Error::Input(format!("frame {} has no image", f.file_path.display())))?;
        let pred = render_to_image(model, &f.camera, opts)?;
        views.push(ViewMetrics {
            name: f.file_path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default(),
            psnr: psnr(&pred, target)?,
            ssim: ssim(&pred, target)?,
        });
    }
    let runtime = (!deterministic).then(|| start.elapsed().as_secs_f64());
    MetricsReport::new(&split.to_string(), views, runtime, config_digest)
}

pub fn render_to_image(model: &MmpiModel, camera: &crate::geometry::Camera, opts: &RenderOptions) -> Result<RgbImage> {
    let r = render_image(model, camera, opts)?;
    RgbImage::new(r.width, r.height, r.rgb.iter().map(|c| c.map(|v| v.clamp(0.0, 1.0))).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Preset;
    use crate::synthetic::{generate_synthetic_scene, Layout, SceneSpec};

    fn tiny_config() -> TrainConfig {
        TrainConfig {
            mpi_res_x: 8,
            mpi_res_y: 8,
            planes: 6,
            batch_size: 64,
            stage1_iters: 3,
            stage2_iters: 2,
            head: crate::appearance::HeadConfig {
                feature_dim: 4,
                pe_freqs_x: 1,
                pe_freqs_d: 1,
                hidden_width: 8,
                hidden_layers: 1,
            },
            ..TrainConfig::default()
        }
    }

    fn tiny_scene(layout: Layout) -> SceneDataset {
        let spec = SceneSpec {
            layout,
            width: 12,
            height: 9,
            train_views: 4,
            test_views: 1,
            ..SceneSpec::default()
        };
        generate_synthetic_scene(&spec, 3).unwrap().dataset
    }

    #[test]
    fn presets_build_expected_fields() {
        let ds = tiny_scene(Layout::Corner);
        let mut cfg = tiny_config();
        cfg.cube_res = 4;
        for (preset, k, cube) in [(Preset::Single, 1, false), (Preset::Kitti, 4, false), (Preset::Scannet, 5, true)] {
            cfg.preset = preset;
            let m = build_fields(&cfg, &ds).unwrap();
            assert_eq!(m.mpi_count(), k);
            assert_eq!(m.cube.is_some(), cube);
        }
    }

    #[test]
    fn kitti_orientations_face_front_left_right_and_down() {
        let ds = tiny_scene(Layout::Frontal);
        let cfg = TrainConfig {
            preset: Preset::Kitti,
            ..tiny_config()
        };
        let m = build_fields(&cfg, &ds).unwrap();
        let f: Vec<Vec3> = m.mpis.iter().map(|x| x.frustum.pose.forward()).collect();
        let front = f[0];
        assert!(f[1].dot(&front).abs() < 1e-9 && f[2].dot(&front).abs() < 1e-9);
        assert!((f[1] + f[2]).norm() < 1e-9);
        let up = m.mpis[0].frustum.pose.up();
        assert!((f[3] + up).norm() < 1e-9);
        assert!(front.cross(&f[1]).dot(&up) > 0.0, "MPI 1 looks left");
    }

    #[test]
    fn zero_iterations_leave_fields_unchanged() {
        let ds = tiny_scene(Layout::Frontal);
        let cfg = TrainConfig {
            stage1_iters: 0,
            ..tiny_config()
        };
        let mut m = build_fields(&cfg, &ds).unwrap();
        let before = m.store.clone();
        let data = TrainingData::from_dataset(&ds, Split::Train).unwrap();
        train_stage1(&mut m, &data, &cfg, |_| {}).unwrap();
        assert_eq!(m.store, before);
    }

    #[test]
    fn stage2_touches_only_reliability() {
        let ds = tiny_scene(Layout::Corner);
        let cfg = TrainConfig {
            preset: Preset::Kitti,
            ..tiny_config()
        };
        let mut m = build_fields(&cfg, &ds).unwrap();
        let data = TrainingData::from_dataset(&ds, Split::Train).unwrap();
        train_stage1(&mut m, &data, &cfg, |_| {}).unwrap();
        let before = m.store.clone();
        train_stage2(&mut m, &data, &cfg, |_| {}).unwrap();
        let mut changed = false;
        for (a, b) in before.params().iter().zip(m.store.params()) {
            if a.group == ParamGroup::Reliability {
                changed |= a.values != b.values;
            } else {
                assert_eq!(a.values, b.values, "{} changed in stage 2", a.name);
            }
        }
        assert!(changed);
    }

    #[test]
    fn single_mpi_skips_stage2() {
        let ds = tiny_scene(Layout::Frontal);
        let cfg = tiny_config();
        let mut m = build_fields(&cfg, &ds).unwrap();
        let data = TrainingData::from_dataset(&ds, Split::Train).unwrap();
        let before = m.store.clone();
        assert!(train_stage2(&mut m, &data, &cfg, |_| {}).unwrap().is_empty());
        assert_eq!(m.store, before);
    }

    #[test]
    fn evaluation_needs_views() {
        let mut ds = tiny_scene(Layout::Frontal);
        let cfg = tiny_config();
        let m = build_fields(&cfg, &ds).unwrap();
        let opts = eval_options(&m, &cfg);
        let r = evaluate(&m, &ds, Split::Test, &opts, cfg.digest_hex(), true).unwrap();
        assert_eq!(r.views.len(), 1);
        assert!(r.runtime_seconds.is_none());
        ds.frames.retain(|f| f.split == Split::Train);
        assert!(evaluate(&m, &ds, Split::Test, &opts, cfg.digest_hex(), true).is_err());
    }
}
