use mmpi::appearance::HeadConfig;
use mmpi::checkpoint;
use mmpi::config::{Preset, TrainConfig};
use mmpi::dataset::{RgbImage, Split};
use mmpi::model::{density_shift_for, softplus};
use mmpi::synthetic::{generate_synthetic_scene, Layout, SceneSpec};
use mmpi::trainer::{eval_options, evaluate, train};

fn small_config() -> TrainConfig {
    TrainConfig {
        mpi_res_x: 12,
        mpi_res_y: 10,
        planes: 8,
        batch_size: 128,
        stage1_iters: 40,
        stage2_iters: 20,
        log_every: 10,
        head: HeadConfig {
            feature_dim: 4,
            pe_freqs_x: 2,
            pe_freqs_d: 1,
            hidden_width: 12,
            hidden_layers: 1,
        },
        ..TrainConfig::default()
    }
}

fn small_scene(layout: Layout) -> SceneSpec {
    SceneSpec {
        layout,
        width: 24,
        height: 18,
        train_views: 6,
        test_views: 2,
        ..SceneSpec::default()
    }
}

#[test]
fn seeded_runs_are_byte_identical() {
    let scene = generate_synthetic_scene(&small_scene(Layout::Corner), 1).unwrap();
    let cfg = TrainConfig {
        preset: Preset::Kitti,
        ..small_config()
    };
    let run = || {
        let (model, log) = train(&cfg, &scene.dataset, |_| {}).unwrap();
        let report = evaluate(&model, &scene.dataset, Split::Test, &eval_options(&model, &cfg), cfg.digest_hex(), true)
            .unwrap();
        (checkpoint::encode(&model, &cfg, true), report.to_json(), log)
    };
    let (a, ra, la) = run();
    let (b, rb, lb) = run();
    assert!(a == b, "checkpoints differ");
    assert_eq!(ra, rb);
    assert_eq!(la, lb);
}

#[test]
fn training_reduces_the_photometric_loss() {
    let scene = generate_synthetic_scene(&small_scene(Layout::Frontal), 2).unwrap();
    let cfg = TrainConfig {
        stage1_iters: 150,
        ..small_config()
    };
    let (_, log) = train(&cfg, &scene.dataset, |_| {}).unwrap();
    let first = log.first().unwrap().terms.photometric;
    let last = log.last().unwrap().terms.photometric;
    assert!(last < 0.5 * first, "loss went from {first} to {last}");
}

#[test]
fn background_only_scene_stays_transparent() {
    let mut scene = generate_synthetic_scene(&small_scene(Layout::Frontal), 3).unwrap();
    for f in &mut scene.dataset.frames {
        let img = f.image.as_ref().unwrap();
        f.image = Some(RgbImage::filled(img.width, img.height, [1.0; 3]));
    }
    let cfg = TrainConfig {
        stage1_iters: 150,
        ..small_config()
    };
    let (model, _) = train(&cfg, &scene.dataset, |_| {}).unwrap();
    let m = &model.mpis[0];
    let delta = 2.0 / (cfg.planes - 1) as f64;
    assert_eq!(m.density_shift, density_shift_for(cfg.alpha_init, delta));
    let max_alpha = model
        .store
        .values(m.density)
        .iter()
        .map(|&r| -(-softplus(r + m.density_shift) * delta).exp_m1())
        .fold(0.0, f64::max);
    assert!(max_alpha < 1e-2, "max alpha {max_alpha}");
}

#[test]
fn checkpoint_roundtrip_renders_identically() {
    let scene = generate_synthetic_scene(&small_scene(Layout::Frontal), 4).unwrap();
    let cfg = TrainConfig {
        stage1_iters: 10,
        ..small_config()
    };
    let (model, _) = train(&cfg, &scene.dataset, |_| {}).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.mmpi");
    checkpoint::save(&model, &cfg, &path, true).unwrap();
    let loaded = checkpoint::load(&path, Some(&cfg.digest()), false).unwrap();
    let opts = eval_options(&model, &cfg);
    let a = evaluate(&model, &scene.dataset, Split::Test, &opts, String::new(), true).unwrap();
    let b = evaluate(&loaded.model, &scene.dataset, Split::Test, &opts, String::new(), true).unwrap();
    assert_eq!(a, b);
    let other = TrainConfig { seed: 9, ..cfg.clone() };
    assert!(checkpoint::load(&path, Some(&other.digest()), false).is_err());
    assert!(checkpoint::load(&path, Some(&other.digest()), true).is_ok());
}
