//! Helpers shared by the integration test targets.
#![allow(dead_code)]

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use aspp_scope::data::{FeatureGroup, IcePolygonAttrs, PartialEntry};
use aspp_scope::harness::ExperimentConfig;
use aspp_scope::model::AsppRates;
use aspp_scope::tensor::gradcheck::{check_gradients, max_rel_error};
use aspp_scope::tensor::*;
use aspp_scope::Result;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

pub fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, uniform(rng, n, -1.0, 1.0)).unwrap()
}

/// Values at least 0.01 apart in random order, so max and ReLU kinks stay out of FD reach.
pub fn separated_tensor(rng: &mut ChaCha8Rng, shape: &[usize], centred: bool) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut v: Vec<f64> = (0..n).map(|i| (i as f64 + 0.5) * 0.02).collect();
    if centred {
        let off = v[n / 2];
        v.iter_mut().for_each(|x| *x -= off + 0.01);
    }
    v.shuffle(rng);
    Tensor::new(shape, v).unwrap()
}

/// `Σ y ⊙ w` for a fixed random `w`, so every output element carries a distinct weight.
pub fn weighted_sum(y: &Tensor<f64>, seed: u64) -> Result<Tensor<f64>> {
    let mut r = rng(seed);
    let w = Tensor::new(y.shape(), uniform(&mut r, y.numel(), -1.0, 1.0))?;
    Ok(sum(&mul(y, &w)?))
}

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOL: f64 = 1e-4;
pub const FD_INSTANCES: usize = 10;

#[derive(Debug, Clone)]
pub struct OpCheck {
    pub op: &'static str,
    pub instances: usize,
    pub worst: f64,
}

impl OpCheck {
    pub fn passed(&self) -> bool {
        self.instances >= FD_INSTANCES && self.worst < FD_TOL
    }
}

type Instance = (Vec<Tensor<f64>>, Box<dyn Fn(&[Tensor<f64>]) -> Result<Tensor<f64>>>);

fn conv_instance(r: &mut ChaCha8Rng, i: usize) -> Instance {
    let k = [1, 3][i % 2];
    let dilation = 1 + i % 3;
    let stride = 1 + (i / 3) % 2;
    let padding = r.gen_range(0..=(k / 2) * dilation);
    let (n, cin, cout) = (r.gen_range(1..=2), r.gen_range(1..=3), r.gen_range(1..=3));
    let side = (k - 1) * dilation + 1 + r.gen_range(1..=4);
    let p = Conv2dParams::new(stride, padding, dilation);
    let bias = !i.is_multiple_of(4);
    let mut inputs = vec![rand_tensor(r, &[n, cin, side, side + 1]), rand_tensor(r, &[cout, cin, k, k])];
    if bias {
        inputs.push(rand_tensor(r, &[cout]));
    }
    let seed = r.gen();
    (
        inputs,
        Box::new(move |t| weighted_sum(&conv2d(&t[0], &t[1], t.get(2), p)?, seed)),
    )
}

fn instances(op: &str, r: &mut ChaCha8Rng, i: usize) -> Instance {
    let seed: u64 = r.gen();
    let shape = [r.gen_range(1..=2), r.gen_range(1..=3), r.gen_range(2..=5), r.gen_range(2..=5)];
    match op {
        "conv2d" => conv_instance(r, i),
        "add" => (
            vec![rand_tensor(r, &shape), rand_tensor(r, &shape)],
            Box::new(move |t| weighted_sum(&add(&t[0], &t[1])?, seed)),
        ),
        "mul" => (
            vec![rand_tensor(r, &shape), rand_tensor(r, &shape)],
            Box::new(move |t| weighted_sum(&mul(&t[0], &t[1])?, seed)),
        ),
        "scale" => {
            let c = r.gen_range(-3.0..3.0);
            (vec![rand_tensor(r, &shape)], Box::new(move |t| weighted_sum(&scale(&t[0], c), seed)))
        }
        "relu" => (
            vec![separated_tensor(r, &shape, true)],
            Box::new(move |t| weighted_sum(&relu(&t[0]), seed)),
        ),
        "sum" => (vec![rand_tensor(r, &shape)], Box::new(|t| Ok(sum(&t[0])))),
        "mean" => (vec![rand_tensor(r, &shape)], Box::new(|t| Ok(mean(&t[0])))),
        "concat_channels" => {
            let mut other = shape;
            other[1] = r.gen_range(1..=3);
            (
                vec![rand_tensor(r, &shape), rand_tensor(r, &other)],
                Box::new(move |t| weighted_sum(&concat_channels(&[t[0].clone(), t[1].clone()])?, seed)),
            )
        }
        "narrow_channels" => {
            let mut s = shape;
            s[1] = 4;
            let (start, len) = (i % 3, 1 + i % 2);
            (
                vec![rand_tensor(r, &s)],
                Box::new(move |t| weighted_sum(&narrow_channels(&t[0], start, len)?, seed)),
            )
        }
        "select_channel" => {
            let ch = i % shape[1];
            (
                vec![rand_tensor(r, &shape)],
                Box::new(move |t| weighted_sum(&select_channel(&t[0], ch)?, seed)),
            )
        }
        "batchnorm2d_train" | "batchnorm2d_eval" => {
            let mode = if op.ends_with("train") { BnMode::Train } else { BnMode::Eval };
            let mut s = shape;
            s[0] = 2;
            let c = s[1];
            let mean_v = uniform(r, c, -0.5, 0.5);
            let var_v = uniform(r, c, 0.5, 2.0);
            (
                vec![rand_tensor(r, &s), Tensor::new(&[c], uniform(r, c, 0.5, 1.5)).unwrap(), rand_tensor(r, &[c])],
                Box::new(move |t| {
                    let mut running = RunningStats { mean: mean_v.clone(), var: var_v.clone(), updates: 1 };
                    let out = batchnorm2d(&t[0], &t[1], &t[2], &mut running, mode, 0.1, 1e-5)?;
                    weighted_sum(&out.output, seed)
                }),
            )
        }
        "max_pool" => {
            let p = PoolParams::max(3, 2, 1);
            let s = [shape[0], shape[1], r.gen_range(3..=7), r.gen_range(3..=7)];
            (vec![separated_tensor(r, &s, false)], Box::new(move |t| weighted_sum(&pool2d(&t[0], p)?, seed)))
        }
        "average_pool" => {
            let p = PoolParams::average(2, 2);
            let s = [shape[0], shape[1], 2 * r.gen_range(1..=3), 2 * r.gen_range(1..=3)];
            (vec![rand_tensor(r, &s)], Box::new(move |t| weighted_sum(&pool2d(&t[0], p)?, seed)))
        }
        "bilinear_upsample" => {
            let (h, w) = (shape[2], shape[3]);
            let target = (h * r.gen_range(1..=4) + r.gen_range(0..=2), w * r.gen_range(1..=4) + r.gen_range(0..=2));
            (
                vec![rand_tensor(r, &shape)],
                Box::new(move |t| weighted_sum(&bilinear_upsample(&t[0], target)?, seed)),
            )
        }
        "softmax_cce" => {
            let k = r.gen_range(2..=6);
            let s = [shape[0], k, shape[2], shape[3]];
            let n = s[0] * s[2] * s[3];
            let mut targets: Vec<u8> = (0..n).map(|_| r.gen_range(0..k) as u8).collect();
            // Some ignored pixels, but never all of them.
            for t in targets.iter_mut().skip(1).step_by(3) {
                *t = IGNORE_INDEX;
            }
            let logits = Tensor::new(&s, uniform(r, s.iter().product(), -3.0, 3.0)).unwrap();
            (vec![logits], Box::new(move |t| Ok(softmax_cce(&t[0], &targets)?.loss)))
        }
        _ => unreachable!("unknown op {op}"),
    }
}

pub const FD_OPS: [&str; 15] = [
    "conv2d",
    "add",
    "mul",
    "scale",
    "relu",
    "sum",
    "mean",
    "concat_channels",
    "narrow_channels",
    "select_channel",
    "batchnorm2d_train",
    "batchnorm2d_eval",
    "max_pool",
    "average_pool",
    "bilinear_upsample",
];

/// Finite-difference check of one op over `count` random instances.
pub fn fd_check(op: &'static str, count: usize, seed: u64) -> Result<OpCheck> {
    let mut r = rng(seed);
    let mut worst = 0.0f64;
    for i in 0..count {
        let (inputs, f) = instances(op, &mut r, i);
        let checks = check_gradients(&inputs, FD_STEP, |t| f(t))?;
        worst = worst.max(max_rel_error(&checks));
    }
    Ok(OpCheck { op, instances: count, worst })
}

/// Every differentiable op, including the loss.
pub fn fd_suite(count: usize) -> Result<Vec<OpCheck>> {
    FD_OPS
        .iter()
        .chain(&["softmax_cce"])
        .enumerate()
        .map(|(i, op)| fd_check(op, count, 1000 + i as u64))
        .collect()
}

/// Direct seven-loop convolution of `[N,C,H,W]` by `[O,C,kh,kw]`.
#[allow(clippy::too_many_arguments)]
pub fn naive_conv(
    x: &[f64],
    [n, c, h, w]: [usize; 4],
    wt: &[f64],
    [o, _, kh, kw]: [usize; 4],
    bias: Option<&[f64]>,
    p: Conv2dParams,
) -> (Vec<f64>, usize, usize) {
    let oh = (h + 2 * p.padding - p.dilation * (kh - 1) - 1) / p.stride + 1;
    let ow = (w + 2 * p.padding - p.dilation * (kw - 1) - 1) / p.stride + 1;
    let mut out = vec![0.0; n * o * oh * ow];
    for b in 0..n {
        for oc in 0..o {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = bias.map_or(0.0, |bv| bv[oc]);
                    for ic in 0..c {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * p.stride + ky * p.dilation) as isize - p.padding as isize;
                                let ix = (ox * p.stride + kx * p.dilation) as isize - p.padding as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                acc += x[((b * c + ic) * h + iy as usize) * w + ix as usize]
                                    * wt[((oc * c + ic) * kh + ky) * kw + kx];
                            }
                        }
                    }
                    out[((b * o + oc) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    (out, oh, ow)
}

/// Kernel `[O,C,k,k]` spread onto a `(k−1)·d+1` grid with zeros between taps.
pub fn zero_insert(wt: &[f64], [o, c, k, _]: [usize; 4], d: usize) -> (Vec<f64>, usize) {
    let kd = (k - 1) * d + 1;
    let mut out = vec![0.0; o * c * kd * kd];
    for oc in 0..o {
        for ic in 0..c {
            for ky in 0..k {
                for kx in 0..k {
                    out[((oc * c + ic) * kd + ky * d) * kd + kx * d] = wt[((oc * c + ic) * k + ky) * k + kx];
                }
            }
        }
    }
    (out, kd)
}

/// Largest absolute difference between a dilated convolution and the dense one with the zero-inserted kernel.
pub fn dilation_gap(seed: u64, d: usize, k: usize) -> f64 {
    let mut r = rng(seed);
    let (n, c, o, h, w) = (2, 3, 4, 17, 15);
    let x = rand_tensor(&mut r, &[n, c, h, w]);
    let wt = rand_tensor(&mut r, &[o, c, k, k]);
    let bias = rand_tensor(&mut r, &[o]);
    let pad = (k / 2) * d;
    let dilated = conv2d(&x, &wt, Some(&bias), Conv2dParams::new(1, pad, d)).unwrap().to_vec();
    let (dense_w, kd) = zero_insert(&wt.to_vec(), [o, c, k, k], d);
    let dense_w = Tensor::new(&[o, c, kd, kd], dense_w).unwrap();
    let dense = conv2d(&x, &dense_w, Some(&bias), Conv2dParams::new(1, pad, 1)).unwrap().to_vec();
    dilated.iter().zip(&dense).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
}

/// Brute-force labelling: scan every partial for one whose percentage reaches 65.
pub fn rule_oracle(a: &IcePolygonAttrs) -> (u8, u8, u8) {
    if a.total == 0 {
        return (0, 0, 0);
    }
    let mut found = None;
    for p in &a.partials {
        let percent = p.concentration as u32 * 10;
        if percent >= 65 {
            assert!(found.is_none(), "two partials above 65% cannot fit in 10 tenths");
            found = Some((a.total, p.sod, p.floe));
        }
    }
    found.unwrap_or((a.total, IGNORE_INDEX, IGNORE_INDEX))
}

/// Valid attribute set: total in tenths, up to three partials summing to at most the total.
pub fn random_attrs(r: &mut ChaCha8Rng, region: u32) -> IcePolygonAttrs {
    let total = r.gen_range(0..=10u8);
    let count = r.gen_range(0..=3usize);
    let mut left = total;
    let mut partials = Vec::with_capacity(count);
    for _ in 0..count {
        let concentration = r.gen_range(0..=left);
        left -= concentration;
        partials.push(PartialEntry { concentration, sod: r.gen_range(0..=5), floe: r.gen_range(0..=6) });
    }
    partials.shuffle(r);
    IcePolygonAttrs { region, total, partials }
}

/// Small, fast grid configuration writing under `out`.
pub fn tiny_experiment(out: &Path, seed: u64) -> ExperimentConfig {
    let mut cfg = ExperimentConfig { seed, out: out.to_path_buf(), ..ExperimentConfig::default() };
    for (k, v) in [
        ("synthetic.scenes", "5"),
        ("synthetic.height", "128"),
        ("synthetic.width", "128"),
        ("synthetic.region_scale", "32"),
        ("sampler.patch_size", "96"),
        ("sampler.patches_per_scene", "3"),
        ("train.max_epochs", "2"),
        ("train.steps_per_epoch", "2"),
        ("train.batch_size", "2"),
        ("train.repeats", "2"),
        ("data.val_scenes", "1"),
        ("data.test_scenes", "1"),
    ] {
        cfg.set(k, v).unwrap();
    }
    cfg.groups = vec![FeatureGroup::G1, FeatureGroup::G5];
    cfg.rates = vec![AsppRates::DESK_SMALL, AsppRates::DESK_MEDIUM];
    cfg
}
