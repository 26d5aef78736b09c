use super::*;
use crate::tensor::{conv2d, softmax_cce, sum, BnMode, Conv2dParams, Tensor};

fn tiny(rates: AsppRates) -> ModelSpec {
    ModelSpec {
        preset: "tiny".into(),
        input_channels: 3,
        stem_width: 8,
        stage_widths: [8, 8, 16],
        bottleneck_counts: [1, 1, 1],
        rates,
        aspp_width: 4,
        decoder_widths: [4; 4],
        decoder_kernel: 3,
        input_size: 128,
    }
}

fn ramp(shape: &[usize], k: f64) -> Vec<f64> {
    let n: usize = shape.iter().product();
    (0..n).map(|i| ((i as f64) * k).sin()).collect()
}

#[test]
fn mini_shapes_and_output_stride() {
    let net = MultiTaskNet::<f32>::build(&ModelSpec::mini(7, AsppRates::DESK_LARGE), 1).unwrap();
    let x = Tensor::<f32>::new(&[2, 7, 192, 192], vec![0.1; 2 * 7 * 192 * 192]).unwrap();
    let feats = net.encode(&x).unwrap();
    assert_eq!(feats.shape(), &[2, 64, 12, 12]);
    let out = net.forward(&x).unwrap();
    assert_eq!(out.sic.shape(), &[2, 11, 192, 192]);
    assert_eq!(out.sod.shape(), &[2, 6, 192, 192]);
    assert_eq!(out.floe.shape(), &[2, 7, 192, 192]);
}

#[test]
fn rejects_bad_inputs() {
    let net = MultiTaskNet::<f64>::build(&tiny(AsppRates::DESK_SMALL), 0).unwrap();
    let wrong_c = Tensor::<f64>::zeros(&[1, 4, 64, 64]);
    assert!(matches!(net.forward(&wrong_c), Err(crate::Error::ChannelMismatch(_))));
    let wrong_hw = Tensor::<f64>::zeros(&[1, 3, 48, 64]);
    assert!(matches!(net.forward(&wrong_hw), Err(crate::Error::Shape(_))));
}

#[test]
fn single_conv_param_count() {
    let mut init = super::layers::Init::new(rand::SeedableRng::seed_from_u64(0));
    let conv = super::layers::Conv::<f32>::new(&mut init, 4, 8, 3, Conv2dParams::same(3, 1), true);
    let mut ps = Vec::new();
    conv.collect(&mut ps);
    assert_eq!(ps.iter().map(|p| p.tensor.numel()).sum::<usize>(), 296);
}

#[test]
fn same_seed_same_parameters() {
    let spec = tiny(AsppRates::DESK_MEDIUM);
    let a = MultiTaskNet::<f32>::build(&spec, 9).unwrap();
    let b = MultiTaskNet::<f32>::build(&spec, 9).unwrap();
    let c = MultiTaskNet::<f32>::build(&spec, 10).unwrap();
    let flat = |n: &MultiTaskNet<f32>| n.parameters().iter().flat_map(|p| p.tensor.to_vec()).collect::<Vec<_>>();
    assert_eq!(flat(&a), flat(&b));
    assert_ne!(flat(&a), flat(&c));
    assert_eq!(a.param_count(), c.param_count());
}

#[test]
fn parameter_names_unique() {
    let net = MultiTaskNet::<f32>::build(&ModelSpec::mini(3, AsppRates::DESK_SMALL), 0).unwrap();
    let params = net.parameters();
    let mut names: Vec<_> = params.iter().map(|p| p.name.as_str()).collect();
    names.sort();
    names.dedup();
    assert_eq!(names.len(), params.len());
    assert!(names.iter().any(|n| n.starts_with("encoder.stage3.")));
    assert!(names.iter().any(|n| n.starts_with("sod.aspp.branch2.")));
}

#[test]
fn decoder_isolation() {
    let net = MultiTaskNet::<f64>::build(&tiny(AsppRates::DESK_SMALL), 3).unwrap();
    let x = Tensor::<f64>::new(&[2, 3, 64, 64], ramp(&[2, 3, 64, 64], 0.37)).unwrap();
    let out = net.forward(&x).unwrap();
    let targets: Vec<u8> = (0..2 * 64 * 64).map(|i| (i % 11) as u8).collect();
    softmax_cce(&out.sic, &targets).unwrap().loss.backward().unwrap();
    for p in net.decoder_parameters(Task::Sod) {
        assert!(p.tensor.grad().is_none_or(|g| g.iter().all(|&v| v == 0.0)), "{}", p.name);
    }
    assert!(net.encoder_parameters().iter().any(|p| p.tensor.grad().is_some_and(|g| g.iter().any(|&v| v != 0.0))));
}

#[test]
fn eval_mode_is_batch_invariant_and_repeatable() {
    let mut net = MultiTaskNet::<f64>::build(&tiny(AsppRates::DESK_SMALL), 4).unwrap();
    let x = Tensor::<f64>::new(&[2, 3, 64, 64], ramp(&[2, 3, 64, 64], 0.11)).unwrap();
    net.forward(&x).unwrap();
    net.set_mode(BnMode::Eval);
    let both = net.forward(&x).unwrap().floe.to_vec();
    let again = net.forward(&x).unwrap().floe.to_vec();
    assert_eq!(both, again);
    let first = Tensor::<f64>::new(&[1, 3, 64, 64], x.to_vec()[..3 * 64 * 64].to_vec()).unwrap();
    let solo = net.forward(&first).unwrap().floe.to_vec();
    for (a, b) in solo.iter().zip(&both[..solo.len()]) {
        assert!((a - b).abs() < 1e-6);
    }
}

#[test]
fn unit_rates_match_plain_convs() {
    let net = MultiTaskNet::<f64>::build(&tiny(AsppRates::new_unchecked([1, 1, 1])), 5).unwrap();
    let feats = Tensor::<f64>::new(&[1, 16, 4, 4], ramp(&[1, 16, 4, 4], 0.7)).unwrap();
    let aspp = &net.decoder(Task::Sic).aspp;
    let branches = aspp.branches(&feats, BnMode::Train).unwrap();
    for (b, w) in aspp.atrous_weights().iter().enumerate() {
        let plain = conv2d(&feats, w, None, Conv2dParams::new(1, 1, 1)).unwrap();
        let plain = crate::tensor::relu(&standardize(&plain));
        for (x, y) in branches[b + 1].to_vec().iter().zip(plain.to_vec()) {
            assert!((x - y).abs() < 1e-6);
        }
        assert_eq!(branches[b + 1].shape(), &[1, 4, 4, 4]);
    }
}

/// Fresh-BN reference: per-channel train-mode standardization with eps 1e-5.
fn standardize(x: &Tensor<f64>) -> Tensor<f64> {
    let [n, c, h, w] = x.dims4().unwrap();
    let d = x.to_vec();
    let mut out = d.clone();
    let hw = h * w;
    for ch in 0..c {
        let idx: Vec<usize> = (0..n).flat_map(|b| (0..hw).map(move |p| (b * c + ch) * hw + p)).collect();
        let m = idx.iter().map(|&i| d[i]).sum::<f64>() / idx.len() as f64;
        let v = idx.iter().map(|&i| (d[i] - m).powi(2)).sum::<f64>() / idx.len() as f64;
        for &i in &idx {
            out[i] = (d[i] - m) / (v + 1e-5).sqrt();
        }
    }
    Tensor::new(&[n, c, h, w], out).unwrap()
}

#[test]
fn aspp_branches_preserve_spatial_size() {
    for rates in [AsppRates::DESK_SMALL, AsppRates::DESK_MEDIUM, AsppRates::DESK_LARGE] {
        let net = MultiTaskNet::<f64>::build(&tiny(rates), 0).unwrap();
        let feats = Tensor::<f64>::new(&[1, 16, 4, 4], ramp(&[1, 16, 4, 4], 0.3)).unwrap();
        for b in net.decoder(Task::Sod).aspp.branches(&feats, BnMode::Train).unwrap() {
            assert_eq!(&b.shape()[2..], &[4, 4]);
        }
    }
}

#[test]
fn shared_encoder_couples_tasks() {
    let spec = tiny(AsppRates::DESK_SMALL);
    let x = Tensor::<f64>::new(&[2, 3, 64, 64], ramp(&[2, 3, 64, 64], 0.23)).unwrap();
    let grads = |all: bool| {
        let net = MultiTaskNet::<f64>::build(&spec, 6).unwrap();
        let out = net.forward(&x).unwrap();
        let mut loss = sum(&out.sic);
        if all {
            loss = crate::tensor::add(&loss, &sum(&out.sod)).unwrap();
            loss = crate::tensor::add(&loss, &sum(&out.floe)).unwrap();
        }
        loss.backward().unwrap();
        net.encoder_parameters()[0].tensor.grad().unwrap()
    };
    let (one, three) = (grads(false), grads(true));
    assert!(one.iter().zip(&three).any(|(a, b)| (a - b).abs() > 1e-9));
}

#[test]
fn checkpoint_round_trip_is_byte_exact() {
    let dir = tempfile::tempdir().unwrap();
    let spec = tiny(AsppRates::DESK_SMALL);
    let net = MultiTaskNet::<f32>::build(&spec, 2).unwrap();
    let x = Tensor::<f32>::new(&[2, 3, 64, 64], (0..2 * 3 * 64 * 64).map(|i| (i as f32 * 0.01).cos()).collect()).unwrap();
    net.forward(&x).unwrap();
    let mut meta = serde_json::Map::new();
    meta.insert("epoch".into(), 3.into());
    net.save(dir.path(), meta).unwrap();
    let (back, manifest) = MultiTaskNet::<f32>::load(dir.path()).unwrap();
    assert_eq!(manifest.metadata["epoch"], 3);
    assert_eq!(manifest.spec, spec);
    for (a, b) in net.parameters().iter().zip(back.parameters()) {
        assert_eq!(a.name, b.name);
        let bits = |t: &Tensor<f32>| t.to_vec().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a.tensor), bits(&b.tensor));
    }
    for (a, b) in net.norms().iter().zip(back.norms()) {
        assert_eq!(*a.running.borrow(), *b.running.borrow());
    }
    let dir2 = tempfile::tempdir().unwrap();
    back.save(dir2.path(), manifest.metadata.clone()).unwrap();
    for entry in &manifest.tensors {
        assert_eq!(
            std::fs::read(dir.path().join(&entry.file)).unwrap(),
            std::fs::read(dir2.path().join(&entry.file)).unwrap()
        );
    }
}
