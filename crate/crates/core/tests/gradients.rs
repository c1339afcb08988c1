use mmpi::config::TrainConfig;
use mmpi::gradcheck::{check_all_groups, ToyScene, DEFAULT_TOLERANCE};
use mmpi::optim::{ParamGroup, Selector};
use mmpi::renderer::{backward_batch, render_batch};

#[test]
fn all_parameter_groups_with_the_default_head() {
    let mut scene = ToyScene::from_config(&TrainConfig::default()).unwrap();
    let checks = check_all_groups(&mut scene, 24, DEFAULT_TOLERANCE, 5).unwrap();
    assert_eq!(checks.len(), ParamGroup::ALL.len());
    for c in &checks {
        assert!(c.report.passed(), "{:?}: {}", c.group, c.report);
    }
}

#[test]
fn frozen_groups_receive_no_gradient() {
    let mut scene = ToyScene::from_config(&TrainConfig::default()).unwrap();
    scene.model.store.freeze(&Selector::All);
    scene.model.store.unfreeze(&Selector::Group(ParamGroup::Reliability));
    let tape = render_batch(&scene.model, &scene.rays, &scene.options).unwrap();
    let (_, grads) =
        mmpi::losses::batch_loss(&tape, &scene.targets, &scene.weights, scene.scale, false).unwrap();
    backward_batch(&mut scene.model, &tape, &grads).unwrap();
    let mut reliability_touched = false;
    for p in scene.model.store.params() {
        let nonzero = p.grad.iter().any(|&g| g != 0.0);
        if p.group == ParamGroup::Reliability {
            reliability_touched |= nonzero;
        } else {
            assert!(!nonzero, "{} got a gradient while frozen", p.name);
        }
    }
    assert!(reliability_touched);
}
