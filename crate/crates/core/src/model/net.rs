use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::layers::{BatchNorm, Conv, ConvBn, Init};
use super::spec::{ModelSpec, Task, INPUT_MULTIPLE, OUTPUT_STRIDE};
use crate::error::{shape_err, Error, Result};
use crate::tensor::{
    add, bilinear_upsample, concat_channels, pool2d, relu, BnMode, Conv2dParams, Parameter, PoolParams, Real, Tensor,
};

/// 1×1 → 3×3 → 1×1 residual unit; stride sits on the 3×3 conv.
pub(crate) struct Bottleneck<T: Real> {
    reduce: ConvBn<T>,
    spatial: ConvBn<T>,
    expand: ConvBn<T>,
    shortcut: Option<ConvBn<T>>,
}

impl<T: Real> Bottleneck<T> {
    fn new(init: &mut Init, cin: usize, width: usize, stride: usize) -> Self {
        let mid = width / 4;
        Bottleneck {
            reduce: init.scoped("conv1", |i| ConvBn::new(i, cin, mid, 1, Conv2dParams::default(), true)),
            spatial: init.scoped("conv2", |i| ConvBn::new(i, mid, mid, 3, Conv2dParams::new(stride, 1, 1), true)),
            expand: init.scoped("conv3", |i| ConvBn::new(i, mid, width, 1, Conv2dParams::default(), false)),
            shortcut: (cin != width || stride != 1).then(|| {
                init.scoped("shortcut", |i| ConvBn::new(i, cin, width, 1, Conv2dParams::new(stride, 0, 1), false))
            }),
        }
    }

    fn forward(&self, x: &Tensor<T>, mode: BnMode) -> Result<Tensor<T>> {
        let y = self.reduce.forward(x, mode)?;
        let y = self.spatial.forward(&y, mode)?;
        let y = self.expand.forward(&y, mode)?;
        let skip = match &self.shortcut {
            Some(s) => s.forward(x, mode)?,
            None => x.clone(),
        };
        Ok(relu(&add(&y, &skip)?))
    }

    fn layers(&self) -> Vec<&ConvBn<T>> {
        let mut v = vec![&self.reduce, &self.spatial, &self.expand];
        v.extend(self.shortcut.as_ref());
        v
    }
}

pub(crate) struct Encoder<T: Real> {
    stem: ConvBn<T>,
    stages: Vec<Vec<Bottleneck<T>>>,
}

impl<T: Real> Encoder<T> {
    fn new(init: &mut Init, spec: &ModelSpec) -> Self {
        let stem = init.scoped("stem", |i| {
            ConvBn::new(i, spec.input_channels, spec.stem_width, 7, Conv2dParams::new(2, 3, 1), true)
        });
        let mut cin = spec.stem_width;
        let mut stages = Vec::with_capacity(3);
        for (s, (&width, &count)) in spec.stage_widths.iter().zip(&spec.bottleneck_counts).enumerate() {
            let stride = if s == 0 { 1 } else { 2 };
            let stage = init.scoped(format!("stage{}", s + 1), |init| {
                (0..count)
                    .map(|u| {
                        let unit = init.scoped(u.to_string(), |i| {
                            Bottleneck::new(i, cin, width, if u == 0 { stride } else { 1 })
                        });
                        cin = width;
                        unit
                    })
                    .collect()
            });
            stages.push(stage);
        }
        Encoder { stem, stages }
    }

    fn forward(&self, x: &Tensor<T>, mode: BnMode) -> Result<Tensor<T>> {
        let y = self.stem.forward(x, mode)?;
        let mut y = pool2d(&y, PoolParams::max(3, 2, 1))?;
        for unit in self.stages.iter().flatten() {
            y = unit.forward(&y, mode)?;
        }
        Ok(y)
    }

    fn layers(&self) -> Vec<&ConvBn<T>> {
        let mut v = vec![&self.stem];
        for unit in self.stages.iter().flatten() {
            v.extend(unit.layers());
        }
        v
    }
}

/// Five parallel branches (1×1, three dilated 3×3, pooled) concatenated and projected.
pub(crate) struct Aspp<T: Real> {
    pointwise: ConvBn<T>,
    atrous: Vec<ConvBn<T>>,
    pooled: ConvBn<T>,
    project: ConvBn<T>,
}

impl<T: Real> Aspp<T> {
    fn new(init: &mut Init, cin: usize, width: usize, rates: [usize; 3]) -> Self {
        Aspp {
            pointwise: init.scoped("branch0", |i| ConvBn::new(i, cin, width, 1, Conv2dParams::default(), true)),
            atrous: rates
                .iter()
                .enumerate()
                .map(|(b, &r)| {
                    init.scoped(format!("branch{}", b + 1), |i| {
                        ConvBn::new(i, cin, width, 3, Conv2dParams::same(3, r), true)
                    })
                })
                .collect(),
            pooled: init.scoped("pool", |i| ConvBn::new(i, cin, width, 1, Conv2dParams::default(), true)),
            project: init.scoped("project", |i| ConvBn::new(i, 5 * width, width, 1, Conv2dParams::default(), true)),
        }
    }

    /// Branch outputs before concatenation, in order 1×1, r1, r2, r3, pooled.
    pub(crate) fn branches(&self, x: &Tensor<T>, mode: BnMode) -> Result<Vec<Tensor<T>>> {
        let [_, _, h, w] = x.dims4()?;
        let mut outs = Vec::with_capacity(5);
        outs.push(self.pointwise.forward(x, mode)?);
        for b in &self.atrous {
            outs.push(b.forward(x, mode)?);
        }
        let pooled = pool2d(x, PoolParams::average(2, 2))?;
        let pooled = self.pooled.forward(&pooled, mode)?;
        outs.push(bilinear_upsample(&pooled, (h, w))?);
        Ok(outs)
    }

    fn forward(&self, x: &Tensor<T>, mode: BnMode) -> Result<Tensor<T>> {
        let cat = concat_channels(&self.branches(x, mode)?)?;
        self.project.forward(&cat, mode)
    }

    fn layers(&self) -> Vec<&ConvBn<T>> {
        let mut v = vec![&self.pointwise];
        v.extend(self.atrous.iter());
        v.push(&self.pooled);
        v.push(&self.project);
        v
    }
}

/// Intermediate activations of one decoder, exposed for attribution.
pub struct DecoderOutput<T: Real> {
    /// Full-resolution logits `[N, K, H, W]`.
    pub logits: Tensor<T>,
    /// Named activations: `aspp`, `conv1`..`conv4`, `head` (pre-upsample logits).
    pub taps: Vec<(&'static str, Tensor<T>)>,
}

impl<T: Real> DecoderOutput<T> {
    pub fn tap(&self, name: &str) -> Option<&Tensor<T>> {
        self.taps.iter().find(|(n, _)| *n == name).map(|(_, t)| t)
    }
}

pub(crate) const DECODER_TAPS: [&str; 6] = ["aspp", "conv1", "conv2", "conv3", "conv4", "head"];

pub(crate) struct Decoder<T: Real> {
    pub(crate) aspp: Aspp<T>,
    convs: Vec<ConvBn<T>>,
    head: Conv<T>,
}

impl<T: Real> Decoder<T> {
    fn new(init: &mut Init, spec: &ModelSpec, cin: usize, classes: usize) -> Self {
        let aspp = init.scoped("aspp", |i| Aspp::new(i, cin, spec.aspp_width, spec.rates.get()));
        let mut c = spec.aspp_width;
        let convs = spec
            .decoder_widths
            .iter()
            .enumerate()
            .map(|(k, &w)| {
                let layer = init.scoped(format!("conv{}", k + 1), |i| ConvBn::new(i, c, w, spec.decoder_kernel, Conv2dParams::same(spec.decoder_kernel, 1), true));
                c = w;
                layer
            })
            .collect();
        let head = init.scoped("head", |i| Conv::new(i, c, classes, 1, Conv2dParams::default(), true));
        Decoder { aspp, convs, head }
    }

    fn forward(&self, features: &Tensor<T>, out_size: (usize, usize), mode: BnMode) -> Result<DecoderOutput<T>> {
        let mut taps = Vec::with_capacity(DECODER_TAPS.len());
        let mut y = self.aspp.forward(features, mode)?;
        taps.push((DECODER_TAPS[0], y.clone()));
        for (k, conv) in self.convs.iter().enumerate() {
            y = conv.forward(&y, mode)?;
            taps.push((DECODER_TAPS[k + 1], y.clone()));
        }
        let head = self.head.forward(&y)?;
        taps.push((DECODER_TAPS[5], head.clone()));
        let logits = bilinear_upsample(&head, out_size)?;
        Ok(DecoderOutput { logits, taps })
    }

    fn collect(&self, out: &mut Vec<Parameter<T>>) {
        for l in self.aspp.layers() {
            l.collect(out);
        }
        for l in &self.convs {
            l.collect(out);
        }
        self.head.collect(out);
    }

    fn norms(&self) -> Vec<&BatchNorm<T>> {
        self.aspp.layers().into_iter().chain(&self.convs).map(|l| &l.bn).collect()
    }
}

/// Per-task full-resolution logits.
pub struct TaskLogits<T: Real> {
    pub sic: Tensor<T>,
    pub sod: Tensor<T>,
    pub floe: Tensor<T>,
}

impl<T: Real> TaskLogits<T> {
    pub fn get(&self, task: Task) -> &Tensor<T> {
        match task {
            Task::Sic => &self.sic,
            Task::Sod => &self.sod,
            Task::Floe => &self.floe,
        }
    }
}

/// Shared encoder feeding three task decoders.
pub struct MultiTaskNet<T: Real = f32> {
    spec: ModelSpec,
    encoder: Encoder<T>,
    decoders: [Decoder<T>; 3],
    mode: BnMode,
}

impl<T: Real> MultiTaskNet<T> {
    pub fn build(spec: &ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut init = Init::new(ChaCha8Rng::seed_from_u64(seed));
        let encoder = init.scoped("encoder", |i| Encoder::new(i, spec));
        let feat = *spec.stage_widths.last().expect("three stages");
        let decoders = Task::ALL.map(|task| init.scoped(task.name(), |i| Decoder::new(i, spec, feat, task.classes())));
        Ok(MultiTaskNet {
            spec: spec.clone(),
            encoder,
            decoders,
            mode: BnMode::Train,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn mode(&self) -> BnMode {
        self.mode
    }

    pub fn set_mode(&mut self, mode: BnMode) {
        self.mode = mode;
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<(usize, usize)> {
        let [_, c, h, w] = x.dims4()?;
        if c != self.spec.input_channels {
            return Err(Error::ChannelMismatch(format!(
                "model expects {} input channels, batch has {c}",
                self.spec.input_channels
            )));
        }
        if h % INPUT_MULTIPLE != 0 || w % INPUT_MULTIPLE != 0 || h == 0 || w == 0 {
            return Err(shape_err!("input {h}x{w} must be a positive multiple of {INPUT_MULTIPLE} on both sides"));
        }
        Ok((h, w))
    }

    /// Shared encoder features `[N, C, H/16, W/16]`.
    pub fn encode(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(x)?;
        self.encoder.forward(x, self.mode)
    }

    pub fn decode(&self, task: Task, features: &Tensor<T>, out_size: (usize, usize)) -> Result<DecoderOutput<T>> {
        self.decoders[task as usize].forward(features, out_size, self.mode)
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<TaskLogits<T>> {
        let size = self.check_input(x)?;
        let feats = self.encoder.forward(x, self.mode)?;
        let [sic, sod, floe] = Task::ALL.map(|t| self.decode(t, &feats, size).map(|d| d.logits));
        Ok(TaskLogits {
            sic: sic?,
            sod: sod?,
            floe: floe?,
        })
    }

    /// Forward of a single decoder, with its activations.
    pub fn forward_task(&self, x: &Tensor<T>, task: Task) -> Result<DecoderOutput<T>> {
        let size = self.check_input(x)?;
        let feats = self.encoder.forward(x, self.mode)?;
        self.decode(task, &feats, size)
    }

    pub fn parameters(&self) -> Vec<Parameter<T>> {
        let mut out = Vec::new();
        for l in self.encoder.layers() {
            l.collect(&mut out);
        }
        for d in &self.decoders {
            d.collect(&mut out);
        }
        out
    }

    pub fn encoder_parameters(&self) -> Vec<Parameter<T>> {
        let mut out = Vec::new();
        for l in self.encoder.layers() {
            l.collect(&mut out);
        }
        out
    }

    pub fn decoder_parameters(&self, task: Task) -> Vec<Parameter<T>> {
        let mut out = Vec::new();
        self.decoders[task as usize].collect(&mut out);
        out
    }

    pub(crate) fn norms(&self) -> Vec<&BatchNorm<T>> {
        let mut v: Vec<&BatchNorm<T>> = self.encoder.layers().into_iter().map(|l| &l.bn).collect();
        for d in &self.decoders {
            v.extend(d.norms());
        }
        v
    }

    #[cfg(test)]
    pub(crate) fn decoder(&self, task: Task) -> &Decoder<T> {
        &self.decoders[task as usize]
    }

    /// Trainable element count (running statistics excluded).
    pub fn param_count(&self) -> usize {
        self.parameters().iter().map(|p| p.tensor.numel()).sum()
    }

    pub fn zero_grad(&self) {
        for p in self.parameters() {
            p.tensor.zero_grad();
        }
    }

    /// Spatial side of encoder features for an input side, given the output stride.
    pub fn feature_side(input_side: usize) -> usize {
        input_side / OUTPUT_STRIDE
    }
}

impl<T: Real> Aspp<T> {
    #[cfg(test)]
    pub(crate) fn atrous_weights(&self) -> Vec<Tensor<T>> {
        self.atrous.iter().map(|b| b.conv.weight.tensor.clone()).collect()
    }
}

/// Copy of every parameter and running statistic, for best-epoch restore.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState<T: Real> {
    params: Vec<Vec<T>>,
    stats: Vec<crate::tensor::RunningStats<T>>,
}

impl<T: Real> MultiTaskNet<T> {
    pub fn snapshot(&self) -> ModelState<T> {
        ModelState {
            params: self.parameters().iter().map(|p| p.tensor.to_vec()).collect(),
            stats: self.norms().iter().map(|b| b.running.borrow().clone()).collect(),
        }
    }

    pub fn restore(&self, state: &ModelState<T>) -> Result<()> {
        let params = self.parameters();
        let norms = self.norms();
        if params.len() != state.params.len() || norms.len() != state.stats.len() {
            return Err(shape_err!("model state does not match this network"));
        }
        for (p, v) in params.iter().zip(&state.params) {
            p.tensor.set_data(v)?;
        }
        for (b, s) in norms.iter().zip(&state.stats) {
            *b.running.borrow_mut() = s.clone();
        }
        Ok(())
    }
}
