mod common;

use common::*;

use aspp_scope::gradcam::*;
use aspp_scope::model::{AsppRates, ModelSpec, MultiTaskNet, Task};
use aspp_scope::tensor::{BnMode, Tensor};

fn net() -> MultiTaskNet<f32> {
    let spec = ModelSpec { input_size: 64, ..ModelSpec::mini(4, AsppRates::DESK_SMALL) };
    let mut net = MultiTaskNet::<f32>::build(&spec, 3).unwrap();
    // Give the running statistics something other than their initial values.
    let x = input(4, 17);
    net.set_mode(BnMode::Train);
    net.forward(&x).unwrap();
    net.set_mode(BnMode::Eval);
    net
}

fn input(n: usize, seed: u64) -> Tensor<f32> {
    let mut r = rng(seed);
    Tensor::new(&[n, 4, 64, 64], uniform(&mut r, n * 4 * 64 * 64, -1.0, 1.0).into_iter().map(|v| v as f32).collect()).unwrap()
}

#[test]
fn heatmaps_are_unit_range_and_input_sized() {
    let mut net = net();
    let x = input(1, 1);
    for task in Task::ALL {
        for layer in ["aspp", "conv1", "conv4"] {
            let cfg = GradCamConfig { layer: layer.into(), ..GradCamConfig::new(task, 1) };
            let hm = compute_gradcam(&mut net, &x, None, &cfg, "probe").unwrap();
            assert_eq!((hm.height, hm.width, hm.values.len()), (64, 64, 64 * 64));
            assert!(hm.values.iter().all(|v| (0.0..=1.0).contains(v)), "{task} {layer}");
            let max = hm.values.iter().copied().fold(0.0f32, f32::max);
            assert!(max == 1.0 || max == 0.0, "{task} {layer}: max {max}");
        }
    }
}

#[test]
fn zeroed_class_head_gives_zero_map() {
    let mut net = net();
    let class = 2;
    let k = Task::Sod.classes();
    for p in net.parameters() {
        if p.name.starts_with("sod.head") && p.name.ends_with("weight") {
            let mut w = p.tensor.to_vec();
            let per = w.len() / k;
            w[class * per..(class + 1) * per].iter_mut().for_each(|v| *v = 0.0);
            p.tensor.set_data(&w).unwrap();
        }
    }
    let hm = compute_gradcam(&mut net, &input(1, 2), None, &GradCamConfig::new(Task::Sod, class), "z").unwrap();
    assert!(hm.values.iter().all(|&v| v == 0.0));
}

#[test]
fn empty_valid_mask_gives_zero_map() {
    let mut net = net();
    let valid = vec![false; 64 * 64];
    let hm = compute_gradcam(&mut net, &input(1, 3), Some(&valid), &GradCamConfig::new(Task::Floe, 0), "z").unwrap();
    assert!(hm.values.iter().all(|&v| v == 0.0));
}

#[test]
fn network_activations_scale_out() {
    let net = net();
    let x = input(1, 4);
    let out = net.forward_task(&x, Task::Sic).unwrap();
    let a = out.tap("conv4").unwrap();
    a.retain_grad();
    let [_, c, h, w] = a.dims4().unwrap();
    let mut up = vec![0.0f32; 11 * 64 * 64];
    up[5 * 64 * 64..6 * 64 * 64].iter_mut().for_each(|v| *v = 1.0);
    out.logits.backward_with(&up).unwrap();
    let act = a.to_vec();
    let grad = a.grad().unwrap();
    let base = cam_from_activation(&act, &grad, c, (h, w), (64, 64)).unwrap();
    for alpha in [0.5f32, 3.0, 250.0] {
        let scaled: Vec<f32> = act.iter().map(|v| v * alpha).collect();
        let m = cam_from_activation(&scaled, &grad, c, (h, w), (64, 64)).unwrap();
        let gap = base.iter().zip(&m).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max);
        assert!(gap < 1e-5, "alpha {alpha}: gap {gap}");
    }
}

#[test]
fn leaves_model_untouched() {
    let mut net = net();
    net.set_mode(BnMode::Train);
    let before: Vec<Vec<f32>> = net.parameters().iter().map(|p| p.tensor.to_vec()).collect();
    compute_gradcam(&mut net, &input(1, 5), None, &GradCamConfig::new(Task::Sod, 3), "x").unwrap();
    assert_eq!(net.mode(), BnMode::Train);
    for (p, b) in net.parameters().iter().zip(&before) {
        assert_eq!(&p.tensor.to_vec(), b, "{}", p.name);
        assert!(p.tensor.grad().is_none_or(|g| g.iter().all(|&v| v == 0.0)), "{} kept a gradient", p.name);
    }
}

#[test]
fn predicted_target_restricts_pixels() {
    let mut net = net();
    let x = input(1, 6);
    let cfg = GradCamConfig { target: CamTarget::Predicted, ..GradCamConfig::new(Task::Sic, 10) };
    let hm = compute_gradcam(&mut net, &x, None, &cfg, "p").unwrap();
    assert!(hm.values.iter().all(|v| (0.0..=1.0).contains(v)));
}

#[test]
fn bad_requests_are_rejected() {
    let mut net = net();
    let x = input(1, 7);
    assert!(compute_gradcam(&mut net, &x, None, &GradCamConfig::new(Task::Sod, 6), "x").is_err());
    let bad_layer = GradCamConfig { layer: "stem".into(), ..GradCamConfig::new(Task::Sod, 0) };
    let err = compute_gradcam(&mut net, &x, None, &bad_layer, "x").unwrap_err();
    assert_eq!(err.kind(), "invalid_argument");
    assert!(compute_gradcam(&mut net, &input(2, 8), None, &GradCamConfig::new(Task::Sod, 0), "x").is_err());
    assert!(compute_gradcam(&mut net, &x, Some(&[true; 3]), &GradCamConfig::new(Task::Sod, 0), "x").is_err());
}

#[test]
fn export_round_trip() {
    let mut net = net();
    let hm = compute_gradcam(&mut net, &input(1, 9), None, &GradCamConfig::new(Task::Floe, 4), "scene-9").unwrap();
    let dir = tempfile::tempdir().unwrap();
    let stem = dir.path().join("maps/floe4");
    export_heatmap(&hm, &stem).unwrap();
    let back = read_heatmap(&stem).unwrap();
    assert_eq!(back, hm);
    let pgm = std::fs::read(stem.with_extension("pgm")).unwrap();
    assert!(pgm.starts_with(b"P5\n64 64\n255\n"));
    assert_eq!(pgm.len(), 13 + 64 * 64);
}
