//! Receptive-field calculus and its empirical verification by gradient support.
//!
//! The theoretical recurrence grows the field by `(k − 1)·D·jump` per layer,
//! where `jump` is the product of the strides seen so far; for stride-1 stacks
//! this is `RF_l = RF_{l−1} + (k_l − 1)·D_l`. The empirical side builds a
//! single-channel linear network with strictly positive weights (no
//! normalization or rectification, so no gradient path can cancel), seeds a
//! unit gradient at one output pixel and measures the bounding box of the
//! non-zero input gradient.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::model::{ModelSpec, OUTPUT_STRIDE};
use crate::tensor::{bilinear_upsample, conv2d, conv_output_len, pool2d, Conv2dParams, PoolParams, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerKind {
    Conv,
    Pool,
    /// Bilinear upsampling by `stride` (interpreted as the scale factor).
    Upsample,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub kernel: usize,
    pub stride: usize,
    pub dilation: usize,
    pub padding: usize,
}

impl LayerSpec {
    pub fn conv(kernel: usize, stride: usize, dilation: usize, padding: usize) -> Self {
        LayerSpec {
            kind: LayerKind::Conv,
            kernel,
            stride,
            dilation,
            padding,
        }
    }

    /// Stride-1 conv with "same" padding.
    pub fn atrous(kernel: usize, dilation: usize) -> Self {
        Self::conv(kernel, 1, dilation, dilation * (kernel - 1) / 2)
    }

    pub fn pool(kernel: usize, stride: usize, padding: usize) -> Self {
        LayerSpec {
            kind: LayerKind::Pool,
            kernel,
            stride,
            dilation: 1,
            padding,
        }
    }

    pub fn upsample(factor: usize) -> Self {
        LayerSpec {
            kind: LayerKind::Upsample,
            kernel: 2,
            stride: factor,
            dilation: 1,
            padding: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel == 0 || self.stride == 0 || self.dilation == 0 {
            return Err(invalid!("layer {self:?}: kernel, stride and dilation must be >= 1"));
        }
        if self.kind != LayerKind::Conv && self.dilation != 1 {
            return Err(invalid!("layer {self:?}: only conv layers may be dilated"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RfEntry {
    pub layer: usize,
    /// Side length of the field, in input pixels.
    pub rf: usize,
    /// Input-pixel distance between adjacent outputs of this layer.
    pub jump: usize,
    /// Input coordinate of the center of output pixel 0 (may be negative).
    pub start: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RfReport {
    pub entries: Vec<RfEntry>,
}

impl RfReport {
    pub fn final_rf(&self) -> usize {
        self.entries.last().map_or(1, |e| e.rf)
    }

    pub fn final_jump(&self) -> usize {
        self.entries.last().map_or(1, |e| e.jump)
    }
}

/// Per-layer theoretical receptive field of a layer stack.
pub fn rf_theoretical(layers: &[LayerSpec]) -> Result<RfReport> {
    if layers.is_empty() {
        return Err(invalid!("rf_theoretical: empty layer list"));
    }
    let mut rf = 1usize;
    let mut jump = 1usize;
    let mut start = 0.0f64;
    let mut entries = Vec::with_capacity(layers.len());
    for (i, l) in layers.iter().enumerate() {
        l.validate()?;
        match l.kind {
            LayerKind::Conv | LayerKind::Pool => {
                rf += (l.kernel - 1) * l.dilation * jump;
                start += ((l.kernel - 1) as f64 * l.dilation as f64 / 2.0 - l.padding as f64) * jump as f64;
                jump *= l.stride;
            }
            LayerKind::Upsample => {
                // two source taps per output at the current spacing
                rf += jump;
                jump = (jump / l.stride).max(1);
            }
        }
        entries.push(RfEntry { layer: i, rf, jump, start });
    }
    Ok(RfReport { entries })
}

/// Bounding box `[y0, y1] × [x0, x1]` (inclusive) of non-zero input gradient.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GradBox {
    pub y0: usize,
    pub y1: usize,
    pub x0: usize,
    pub x1: usize,
    /// The box touches the input border, so zero padding may have clipped it.
    pub truncated: bool,
}

impl GradBox {
    pub fn height(&self) -> usize {
        self.y1 - self.y0 + 1
    }
    pub fn width(&self) -> usize {
        self.x1 - self.x0 + 1
    }
}

/// Single-channel linear probe: strictly positive conv weights; pool layers are
/// realized as average pooling (max pooling routes gradient to one tap only).
#[derive(Debug, Clone)]
pub struct ProbeNet {
    layers: Vec<LayerSpec>,
    weights: Vec<Option<Tensor<f64>>>,
}

impl ProbeNet {
    /// Weights drawn uniformly from `[0.5, 1.5)`.
    pub fn new(layers: &[LayerSpec], seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::with_weights(layers, |k| (0..k * k).map(|_| rng.gen_range(0.5..1.5)).collect())
    }

    pub fn ones(layers: &[LayerSpec]) -> Result<Self> {
        Self::with_weights(layers, |k| vec![1.0; k * k])
    }

    fn with_weights(layers: &[LayerSpec], mut init: impl FnMut(usize) -> Vec<f64>) -> Result<Self> {
        let mut weights = Vec::with_capacity(layers.len());
        for l in layers {
            l.validate()?;
            weights.push(match l.kind {
                LayerKind::Conv => Some(Tensor::new(&[1, 1, l.kernel, l.kernel], init(l.kernel))?),
                _ => None,
            });
        }
        Ok(ProbeNet {
            layers: layers.to_vec(),
            weights,
        })
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn forward(&self, input: &Tensor<f64>) -> Result<Tensor<f64>> {
        let mut x = input.clone();
        for (l, w) in self.layers.iter().zip(&self.weights) {
            x = match l.kind {
                LayerKind::Conv => conv2d(
                    &x,
                    w.as_ref().expect("conv layers carry weights"),
                    None,
                    Conv2dParams::new(l.stride, l.padding, l.dilation),
                )?,
                LayerKind::Pool => pool2d(
                    &x,
                    PoolParams {
                        kind: crate::tensor::PoolKind::Average,
                        kernel: l.kernel,
                        stride: l.stride,
                        padding: l.padding,
                    },
                )?,
                LayerKind::Upsample => {
                    let [_, _, h, w] = x.dims4()?;
                    bilinear_upsample(&x, (h * l.stride, w * l.stride))?
                }
            };
        }
        Ok(x)
    }

    /// Output size for a square input, or an error if some layer collapses it.
    pub fn output_size(&self, input: usize) -> Result<usize> {
        let mut s = input;
        for l in &self.layers {
            s = match l.kind {
                LayerKind::Conv => conv_output_len(s, l.kernel, Conv2dParams::new(l.stride, l.padding, l.dilation)),
                LayerKind::Pool => conv_output_len(s, l.kernel, Conv2dParams::new(l.stride, l.padding, 1)),
                LayerKind::Upsample => Some(s * l.stride),
            }
            .ok_or_else(|| invalid!("probe collapses a {input}x{input} input at layer {l:?}"))?;
        }
        Ok(s)
    }
}

/// Gradient-support box of output pixel `(oy, ox)` for a square input.
pub fn rf_empirical(net: &ProbeNet, input_size: usize, output_pixel: (usize, usize)) -> Result<GradBox> {
    let out_size = net.output_size(input_size)?;
    let (oy, ox) = output_pixel;
    if oy >= out_size || ox >= out_size {
        return Err(invalid!("output pixel ({oy},{ox}) outside {out_size}x{out_size}"));
    }
    let x = Tensor::<f64>::param(&[1, 1, input_size, input_size], vec![1.0; input_size * input_size])?;
    let y = net.forward(&x)?;
    let mut seed = vec![0.0; out_size * out_size];
    seed[oy * out_size + ox] = 1.0;
    y.backward_with(&seed)?;
    let g = x.grad().unwrap_or_default();
    let mut bbox: Option<(usize, usize, usize, usize)> = None;
    for (i, &v) in g.iter().enumerate() {
        if v != 0.0 {
            let (r, c) = (i / input_size, i % input_size);
            bbox = Some(match bbox {
                None => (r, r, c, c),
                Some((y0, y1, x0, x1)) => (y0.min(r), y1.max(r), x0.min(c), x1.max(c)),
            });
        }
    }
    let (y0, y1, x0, x1) = bbox.ok_or_else(|| invalid!("output pixel has no input support"))?;
    let edge = input_size - 1;
    Ok(GradBox {
        y0,
        y1,
        x0,
        x1,
        truncated: y0 == 0 || x0 == 0 || y1 == edge || x1 == edge,
    })
}

/// Input positions with non-zero gradient for one output pixel.
pub fn gradient_support(net: &ProbeNet, input_size: usize, output_pixel: (usize, usize)) -> Result<Vec<(usize, usize)>> {
    let out_size = net.output_size(input_size)?;
    let x = Tensor::<f64>::param(&[1, 1, input_size, input_size], vec![1.0; input_size * input_size])?;
    let y = net.forward(&x)?;
    let mut seed = vec![0.0; out_size * out_size];
    seed[output_pixel.0 * out_size + output_pixel.1] = 1.0;
    y.backward_with(&seed)?;
    Ok(x.grad()
        .unwrap_or_default()
        .iter()
        .enumerate()
        .filter(|(_, &v)| v != 0.0)
        .map(|(i, _)| (i / input_size, i % input_size))
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct RfLayerCheck {
    pub layer: usize,
    pub theoretical: usize,
    pub empirical: (usize, usize),
    pub truncated: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RfComparison {
    pub checks: Vec<RfLayerCheck>,
    /// First layer whose empirical side differs from the theoretical RF.
    pub first_disagreement: Option<usize>,
}

impl RfComparison {
    pub fn passed(&self) -> bool {
        self.first_disagreement.is_none()
    }
}

impl fmt::Display for RfComparison {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.checks {
            writeln!(
                f,
                "layer {:>3}  theoretical {:>5}  empirical {:>5}x{:<5}{}",
                c.layer,
                c.theoretical,
                c.empirical.0,
                c.empirical.1,
                if c.truncated { "  (truncated)" } else { "" }
            )?;
        }
        match self.first_disagreement {
            None => write!(f, "PASS"),
            Some(l) => write!(f, "FAIL at layer {l}"),
        }
    }
}

/// Compares theoretical and empirical RF after every prefix of `layers`,
/// probing the centre output pixel of a square `input_size` input.
pub fn rf_compare(layers: &[LayerSpec], input_size: usize) -> Result<RfComparison> {
    let theory = rf_theoretical(layers)?;
    let mut checks = Vec::with_capacity(layers.len());
    let mut first_disagreement = None;
    for (i, entry) in theory.entries.iter().enumerate() {
        let probe = ProbeNet::new(&layers[..=i], 0x5eed ^ i as u64)?;
        let out = probe.output_size(input_size)?;
        let b = rf_empirical(&probe, input_size, (out / 2, out / 2))?;
        let ok = !b.truncated && b.height() == entry.rf && b.width() == entry.rf;
        if !ok && first_disagreement.is_none() {
            first_disagreement = Some(i);
        }
        checks.push(RfLayerCheck {
            layer: i,
            theoretical: entry.rf,
            empirical: (b.height(), b.width()),
            truncated: b.truncated,
        });
    }
    Ok(RfComparison {
        checks,
        first_disagreement,
    })
}

/// Main-path layers of a model's encoder, named like its parameters.
///
/// Shortcut convolutions are 1×1 and never widen the field, so they are omitted.
pub fn encoder_layers(spec: &ModelSpec) -> Vec<(String, LayerSpec)> {
    let mut out = vec![
        ("encoder.stem".to_string(), LayerSpec::conv(7, 2, 1, 3)),
        ("encoder.maxpool".to_string(), LayerSpec::pool(3, 2, 1)),
    ];
    for (s, &count) in spec.bottleneck_counts.iter().enumerate() {
        for u in 0..count {
            let stride = if s > 0 && u == 0 { 2 } else { 1 };
            let name = format!("encoder.stage{}.{u}", s + 1);
            out.push((format!("{name}.conv1"), LayerSpec::conv(1, 1, 1, 0)));
            out.push((format!("{name}.conv2"), LayerSpec::conv(3, stride, 1, 1)));
            out.push((format!("{name}.conv3"), LayerSpec::conv(1, 1, 1, 0)));
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpecRfRow {
    pub name: String,
    /// Field side in input pixels.
    pub rf: usize,
    pub jump: usize,
    /// Field side in encoder-feature pixels, for layers after the encoder.
    pub feature_rf: Option<usize>,
}

/// Encoder rows, then one row per ASPP branch on top of the encoder, then the
/// full path through the widest branch, the decoder convolutions and the final upsampling.
pub fn spec_rf_table(spec: &ModelSpec) -> Result<Vec<SpecRfRow>> {
    let enc = encoder_layers(spec);
    let enc_specs: Vec<LayerSpec> = enc.iter().map(|(_, l)| *l).collect();
    let theory = rf_theoretical(&enc_specs)?;
    let mut rows: Vec<SpecRfRow> = enc
        .iter()
        .zip(&theory.entries)
        .map(|((name, _), e)| SpecRfRow { name: name.clone(), rf: e.rf, jump: e.jump, feature_rf: None })
        .collect();
    let on_top = |extra: &[LayerSpec]| -> Result<(RfReport, RfReport)> {
        let full: Vec<LayerSpec> = enc_specs.iter().chain(extra).copied().collect();
        Ok((rf_theoretical(&full)?, rf_theoretical(extra)?))
    };
    let mut branches: Vec<(String, Vec<LayerSpec>)> = vec![("aspp.branch0".into(), vec![LayerSpec::conv(1, 1, 1, 0)])];
    for (b, r) in spec.rates.get().into_iter().enumerate() {
        branches.push((format!("aspp.branch{} (rate {r})", b + 1), vec![LayerSpec::atrous(3, r)]));
    }
    branches.push((
        "aspp.pool".into(),
        vec![LayerSpec::pool(2, 2, 0), LayerSpec::conv(1, 1, 1, 0), LayerSpec::upsample(2)],
    ));
    for (name, extra) in &branches {
        let (full, local) = on_top(extra)?;
        rows.push(SpecRfRow { name: name.clone(), rf: full.final_rf(), jump: full.final_jump(), feature_rf: Some(local.final_rf()) });
    }
    let k = spec.decoder_kernel;
    let mut path = vec![LayerSpec::atrous(3, spec.rates.largest()), LayerSpec::conv(1, 1, 1, 0)];
    path.extend((0..4).map(|_| LayerSpec::atrous(k, 1)));
    path.push(LayerSpec::conv(1, 1, 1, 0));
    let (full, local) = on_top(&path)?;
    rows.push(SpecRfRow { name: "decoder.head".into(), rf: full.final_rf(), jump: full.final_jump(), feature_rf: Some(local.final_rf()) });
    path.push(LayerSpec::upsample(OUTPUT_STRIDE));
    let full = rf_theoretical(&enc_specs.iter().chain(&path).copied().collect::<Vec<_>>())?;
    rows.push(SpecRfRow { name: "output".into(), rf: full.final_rf(), jump: full.final_jump(), feature_rf: None });
    Ok(rows)
}

/// Aligned text table followed by CSV rows (`layer,rf_input,jump,rf_feature`).
pub fn render_rf_table(rows: &[SpecRfRow]) -> String {
    let width = rows.iter().map(|r| r.name.len()).max().unwrap_or(5).max(5);
    let mut out = format!("{:<width$}  {:>8}  {:>5}  {:>10}\n", "layer", "rf_input", "jump", "rf_feature");
    for r in rows {
        let f = r.feature_rf.map(|v| v.to_string()).unwrap_or_else(|| "-".into());
        out.push_str(&format!("{:<width$}  {:>8}  {:>5}  {:>10}\n", r.name, r.rf, r.jump, f));
    }
    out.push_str("\nlayer,rf_input,jump,rf_feature\n");
    for r in rows {
        let f = r.feature_rf.map(|v| v.to_string()).unwrap_or_default();
        out.push_str(&format!("{},{},{},{f}\n", r.name, r.rf, r.jump));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::AsppRates;

    #[test]
    fn dilation_chain_3_7_15() {
        let layers = [LayerSpec::atrous(3, 1), LayerSpec::atrous(3, 2), LayerSpec::atrous(3, 4)];
        let r = rf_theoretical(&layers).unwrap();
        let rfs: Vec<usize> = r.entries.iter().map(|e| e.rf).collect();
        assert_eq!(rfs, vec![3, 7, 15]);
    }

    #[test]
    fn stride_multiplies_later_growth() {
        let layers = [LayerSpec::conv(3, 2, 1, 1), LayerSpec::atrous(3, 1)];
        let r = rf_theoretical(&layers).unwrap();
        assert_eq!(r.final_rf(), 3 + 2 * 2);
        assert_eq!(r.final_jump(), 2);
    }

    #[test]
    fn single_conv_box_is_3x3() {
        let net = ProbeNet::new(&[LayerSpec::atrous(3, 1)], 1).unwrap();
        let b = rf_empirical(&net, 9, (4, 4)).unwrap();
        assert_eq!((b.height(), b.width(), b.truncated), (3, 3, false));
    }

    #[test]
    fn dilated_taps_enumerated() {
        let net = ProbeNet::ones(&[LayerSpec::atrous(3, 3)]).unwrap();
        let mut support = gradient_support(&net, 11, (5, 5)).unwrap();
        support.sort();
        let mut expected: Vec<(usize, usize)> =
            [2, 5, 8].iter().flat_map(|&y| [2, 5, 8].iter().map(move |&x| (y, x))).collect();
        expected.sort();
        assert_eq!(support, expected);
    }

    #[test]
    fn boundary_probe_is_flagged() {
        let net = ProbeNet::new(&[LayerSpec::atrous(3, 2)], 3).unwrap();
        let b = rf_empirical(&net, 9, (0, 0)).unwrap();
        assert!(b.truncated);
        assert_eq!(b.height(), 3);
    }

    #[test]
    fn full_size_branches_13_25_37() {
        let spec = ModelSpec::paper(17, AsppRates::SMALL);
        let rows = spec_rf_table(&spec).unwrap();
        let feat: Vec<usize> = rows.iter().filter(|r| r.name.contains("rate")).filter_map(|r| r.feature_rf).collect();
        assert_eq!(feat, vec![13, 25, 37]);
        let enc = rows.iter().rev().find(|r| r.name.starts_with("encoder")).unwrap();
        assert_eq!(enc.jump, OUTPUT_STRIDE);
    }

    #[test]
    fn table_has_csv_block() {
        let rows = spec_rf_table(&ModelSpec::mini(3, AsppRates::DESK_SMALL)).unwrap();
        let text = render_rf_table(&rows);
        assert!(text.contains("\nlayer,rf_input,jump,rf_feature\n"));
        assert!(text.contains("aspp.branch3 (rate 6),"));
    }

    #[test]
    fn empty_stack_rejected() {
        assert!(rf_theoretical(&[]).is_err());
    }
}
