use super::*;
use crate::image::Image;
use crate::losses::LossWeights;
use crate::medium::MediumSample;
use crate::scene::sh::rgb_to_dc;
use crate::scene::{logit, Gaussian3D, Intrinsics, Pose};
use std::path::Path;

fn truth() -> MediumSample {
    MediumSample {
        beta_d: [0.4, 0.15, 0.1],
        beta_b: [0.3, 0.2, 0.15],
        b_inf: [0.1, 0.3, 0.4],
    }
}

fn small_config() -> TrainConfig {
    TrainConfig {
        iterations: 40,
        sh_degree: 1,
        split_modulus: 4,
        ..TrainConfig::default()
    }
}

fn small_trainer(cfg: TrainConfig) -> Trainer {
    let s = make_synthetic_scene(5, 200, 5, &truth()).unwrap();
    Trainer::from_scene(&s.scene_data(Path::new("/nonexistent")), cfg).unwrap()
}

#[test]
fn learning_rate_groups_by_offset() {
    let lr = LearningRates::default();
    let got: Vec<f64> = (0..20).map(|o| offset_rate(o, &lr, 7.0)).collect();
    assert_eq!(&got[0..3], &[7.0; 3]);
    assert_eq!(&got[3..6], &[lr.scale; 3]);
    assert_eq!(&got[6..10], &[lr.rotation; 4]);
    assert_eq!(got[10], lr.opacity);
    assert_eq!(&got[11..14], &[lr.backscatter; 3]);
    assert_eq!(&got[14..17], &[lr.sh_dc; 3]);
    assert_eq!(&got[17..20], &[lr.sh_rest; 3]);
}

#[test]
fn position_rate_decays_exponentially() {
    assert_eq!(exp_decay(1.6e-4, 1.6e-6, 0, 100), 1.6e-4);
    assert!((exp_decay(1.6e-4, 1.6e-6, 50, 100) - 1.6e-5).abs() < 1e-18);
    assert!((exp_decay(1.6e-4, 1.6e-6, 100, 100) - 1.6e-6).abs() < 1e-18);
    assert!((exp_decay(1.6e-4, 1.6e-6, 500, 100) - 1.6e-6).abs() < 1e-18);
}

#[test]
fn extent_of_a_camera_ring() {
    let intr = Intrinsics::centered(10.0, 4, 4);
    let views: Vec<CameraView> = [-1.0, 1.0]
        .iter()
        .map(|&x| CameraView::blank("v", intr, Pose::look_at(Vector3::new(x, 0.0, 0.0), Vector3::z() * 5.0, Vector3::y())))
        .collect();
    assert!((scene_extent(&views) - 1.1).abs() < 1e-12);
    assert_eq!(scene_extent(&views[..1]), 1.0);
}

#[test]
fn from_scene_interpolates_and_enriches() {
    let t = small_trainer(small_config());
    // five views, every fourth held out: 0 and 4 are test views
    assert_eq!(t.test_views.len(), 2);
    assert_eq!(t.interpolated_count(), 2);
    assert_eq!(t.views.len(), 5);
    assert_eq!(t.points_initial, 200);
    assert_eq!(t.points_enriched, 300);
    assert_eq!(t.cloud.len(), 300);

    let off = small_trainer(TrainConfig {
        ifi: false,
        ..small_config()
    });
    assert_eq!(off.interpolated_count(), 0);
    assert_eq!(off.cloud.len(), 200);
}

#[test]
fn zero_learning_rates_leave_parameters() {
    let mut t = small_trainer(TrainConfig {
        lr: LearningRates::zero(),
        ..small_config()
    });
    let (cloud, medium, fw) = (t.cloud.clone(), t.medium.clone(), t.frame_weights.clone());
    for _ in 0..10 {
        let r = t.train_step().unwrap();
        assert!(r.is_finite() && r.total > 0.0);
    }
    assert_eq!(t.cloud, cloud);
    assert_eq!(t.medium, medium);
    assert_eq!(t.frame_weights, fw);
    assert_eq!(t.log.len(), 10);
}

#[test]
fn gamma_moves_only_on_interpolated_steps() {
    let mut t = small_trainer(small_config());
    let mut moved = false;
    for _ in 0..30 {
        let before = t.frame_weights.clone();
        let r = t.train_step().unwrap();
        match r.afw_gamma_used {
            None => assert_eq!(
                before.iter().map(|w| w.gamma_logparam.to_bits()).collect::<Vec<_>>(),
                t.frame_weights.iter().map(|w| w.gamma_logparam.to_bits()).collect::<Vec<_>>()
            ),
            Some(_) => moved |= before != t.frame_weights,
        }
    }
    assert!(moved);
}

#[test]
fn training_reduces_the_loss() {
    let mut t = small_trainer(TrainConfig {
        iterations: 150,
        ..small_config()
    });
    let before = t.training_loss().unwrap();
    t.run().unwrap();
    let after = t.training_loss().unwrap();
    assert!(after < 0.8 * before, "{before} -> {after}");
    assert!(t.cloud.to_flat().iter().all(|v| v.is_finite()));
}

#[test]
fn checkpoint_round_trip_renders_identically() {
    let mut t = small_trainer(small_config());
    for _ in 0..5 {
        t.train_step().unwrap();
    }
    let ck = t.checkpoint();
    let back = Checkpoint::from_bytes(&ck.to_bytes(), "mem").unwrap();
    assert_eq!(back, ck);
    for v in t.views.iter().chain(&t.test_views) {
        let a = render(&t.cloud, &t.medium, v).unwrap();
        let b = render(&back.cloud, &back.medium, v).unwrap();
        assert_eq!(a.colour, b.colour);
        assert_eq!(a.restored, b.restored);
        assert_eq!(a.depth, b.depth);
    }
    let mut bytes = ck.to_bytes();
    bytes.push(0);
    assert!(Checkpoint::from_bytes(&bytes, "mem").is_err());
    assert!(Checkpoint::from_bytes(&bytes[..40], "mem").is_err());
}

#[test]
fn exact_fit_is_a_fixed_point() {
    let intr = Intrinsics::centered(20.0, 16, 16);
    let cam = CameraView::blank("a", intr, Pose::identity());
    let mut g = Gaussian3D::new(Vector3::new(0.0, 0.0, 2.0), 1.5, 0);
    g.opacity_logit = logit(0.9);
    g.sh[0] = [rgb_to_dc(0.5); 3];
    let mut cloud = GaussianCloud::new(vec![g], 0).unwrap();
    let medium = MediumNet::identity();
    // choose the colour so each channel of the composite averages 0.5
    let acc = render(&cloud, &medium, &cam).unwrap().alpha_acc.mean();
    cloud.gaussians[0].sh[0] = [rgb_to_dc(0.5 / acc); 3];
    let target = render(&cloud, &medium, &cam).unwrap().colour;
    let view = CameraView::new("a", intr, Pose::identity(), target).unwrap();
    let cfg = TrainConfig {
        weights: LossWeights {
            lambda_d: 0.0,
            lambda_ca: 0.0,
            lambda_s: 0.0,
            ..LossWeights::default()
        },
        ..TrainConfig::default()
    };
    let e = evaluate_view(&cloud, &medium, &view, &[], None, &cfg, true).unwrap();
    assert!(e.report.total.abs() < 1e-20, "{}", e.report.total);
    let grads = e.grads.unwrap();
    assert!(grads.gaussians.iter().all(|v| v.abs() < 1e-12), "{:?}", grads.gaussians);
}

#[test]
fn non_finite_loss_is_reported() {
    let intr = Intrinsics::centered(20.0, 8, 8);
    let mut img = Image::new(8, 8);
    let g = Gaussian3D::new(Vector3::new(0.0, 0.0, 2.0), 0.5, 0);
    let cloud = GaussianCloud::new(vec![g], 0).unwrap();
    let mut view = CameraView::new("a", intr, Pose::identity(), img.clone()).unwrap();
    img.data[0] = f64::NAN;
    view.image = img;
    let err = evaluate_view(&cloud, &MediumNet::identity(), &view, &[], None, &TrainConfig::default(), false);
    assert!(matches!(err, Err(Error::NonFinite(_))));
}
