use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Encoder output stride: stem conv 2× · max pool 2× · two stride-2 stages.
pub const OUTPUT_STRIDE: usize = 16;

/// Input sides must be multiples of this for the encoder to tile exactly.
pub const INPUT_MULTIPLE: usize = 32;

/// Atrous rates of the three dilated ASPP branches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "[usize; 3]", into = "[usize; 3]")]
pub struct AsppRates([usize; 3]);

impl AsppRates {
    pub const SMALL: AsppRates = AsppRates([6, 12, 18]);
    pub const MEDIUM: AsppRates = AsppRates([12, 24, 36]);
    pub const LARGE: AsppRates = AsppRates([18, 36, 54]);
    pub const DESK_SMALL: AsppRates = AsppRates([2, 4, 6]);
    pub const DESK_MEDIUM: AsppRates = AsppRates([4, 8, 12]);
    pub const DESK_LARGE: AsppRates = AsppRates([6, 12, 18]);

    /// Strictly increasing positive triplet.
    pub fn new(r1: usize, r2: usize, r3: usize) -> Result<Self> {
        if r1 == 0 || r1 >= r2 || r2 >= r3 {
            return Err(invalid!("atrous rates must satisfy 0 < r1 < r2 < r3, got [{r1}, {r2}, {r3}]"));
        }
        Ok(AsppRates([r1, r2, r3]))
    }

    /// Any positive triplet, including repeated rates. Used for degenerate
    /// configurations such as `[1, 1, 1]` in equivalence checks.
    pub fn new_unchecked(rates: [usize; 3]) -> Self {
        assert!(rates.iter().all(|&r| r > 0), "atrous rates must be positive");
        AsppRates(rates)
    }

    pub fn get(&self) -> [usize; 3] {
        self.0
    }

    pub fn largest(&self) -> usize {
        self.0[2]
    }

    /// Named preset; paper scale (`small|medium|large`) or desk scale (`desk-*`).
    pub fn preset(name: &str) -> Option<Self> {
        Some(match name {
            "small" => Self::SMALL,
            "medium" => Self::MEDIUM,
            "large" => Self::LARGE,
            "desk-small" => Self::DESK_SMALL,
            "desk-medium" => Self::DESK_MEDIUM,
            "desk-large" => Self::DESK_LARGE,
            _ => return None,
        })
    }

    /// Rendered as `r1-r2-r3`, the stable key used in reports and paths.
    pub fn key(&self) -> String {
        format!("{}-{}-{}", self.0[0], self.0[1], self.0[2])
    }
}

impl TryFrom<[usize; 3]> for AsppRates {
    type Error = Error;
    fn try_from(r: [usize; 3]) -> Result<Self> {
        if r.iter().all(|&x| x > 0) && (r[0] < r[1] && r[1] < r[2] || r[0] == r[1] && r[1] == r[2]) {
            Ok(AsppRates(r))
        } else {
            AsppRates::new(r[0], r[1], r[2])
        }
    }
}

impl From<AsppRates> for [usize; 3] {
    fn from(r: AsppRates) -> Self {
        r.0
    }
}

impl fmt::Display for AsppRates {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.key())
    }
}

impl FromStr for AsppRates {
    type Err = Error;
    /// Accepts a preset name or three integers separated by `,` or `-`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if let Some(p) = Self::preset(s) {
            return Ok(p);
        }
        let parts: Vec<usize> = s
            .split([',', '-'])
            .map(|p| p.trim().parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| invalid!("cannot parse atrous rates from `{s}`"))?;
        match parts[..] {
            [a, b, c] => AsppRates::new(a, b, c),
            _ => Err(invalid!("expected three atrous rates, got `{s}`")),
        }
    }
}

/// The three segmentation targets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Sic,
    Sod,
    Floe,
}

impl Task {
    pub const ALL: [Task; 3] = [Task::Sic, Task::Sod, Task::Floe];

    pub fn classes(self) -> usize {
        match self {
            Task::Sic => 11,
            Task::Sod => 6,
            Task::Floe => 7,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Task::Sic => "sic",
            Task::Sod => "sod",
            Task::Floe => "floe",
        }
    }
}

impl FromStr for Task {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sic" => Ok(Task::Sic),
            "sod" => Ok(Task::Sod),
            "floe" => Ok(Task::Floe),
            _ => Err(invalid!("unknown task `{s}` (expected sic, sod or floe)")),
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Declarative architecture description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub preset: String,
    pub input_channels: usize,
    /// Output channels of the 7×7 stride-2 stem convolution.
    pub stem_width: usize,
    /// Output channels of the three bottleneck stages; inner width is a quarter.
    pub stage_widths: [usize; 3],
    pub bottleneck_counts: [usize; 3],
    pub rates: AsppRates,
    /// Width B of every ASPP branch and of the projection.
    pub aspp_width: usize,
    pub decoder_widths: [usize; 4],
    /// Kernel side of the four decoder convolutions (odd).
    #[serde(default = "default_decoder_kernel")]
    pub decoder_kernel: usize,
    /// Nominal training patch side, used to validate rates against feature size.
    pub input_size: usize,
}

fn default_decoder_kernel() -> usize {
    3
}

impl ModelSpec {
    /// Full-scale architecture: ResNet-101 stem and first three stages.
    pub fn paper(input_channels: usize, rates: AsppRates) -> Self {
        ModelSpec {
            preset: "paper".into(),
            input_channels,
            stem_width: 64,
            stage_widths: [256, 512, 1024],
            bottleneck_counts: [3, 4, 23],
            rates,
            aspp_width: 32,
            decoder_widths: [32; 4],
            decoder_kernel: 3,
            input_size: 768,
        }
    }

    /// Desk-scale architecture with every structural element of the `paper` preset.
    pub fn mini(input_channels: usize, rates: AsppRates) -> Self {
        ModelSpec {
            preset: "mini".into(),
            input_channels,
            stem_width: 16,
            stage_widths: [16, 32, 64],
            bottleneck_counts: [2, 2, 2],
            rates,
            aspp_width: 32,
            decoder_widths: [32; 4],
            decoder_kernel: 3,
            input_size: 192,
        }
    }

    /// Mini variant whose spatial reach beyond the encoder comes from ASPP alone:
    /// one bottleneck per stage and pointwise decoder convolutions.
    pub fn probe(input_channels: usize, rates: AsppRates) -> Self {
        ModelSpec {
            preset: "probe".into(),
            bottleneck_counts: [1, 1, 1],
            decoder_kernel: 1,
            input_size: 512,
            ..Self::mini(input_channels, rates)
        }
    }

    pub fn from_preset(name: &str, input_channels: usize, rates: AsppRates) -> Result<Self> {
        match name {
            "paper" => Ok(Self::paper(input_channels, rates)),
            "mini" => Ok(Self::mini(input_channels, rates)),
            "probe" => Ok(Self::probe(input_channels, rates)),
            _ => Err(invalid!("unknown model preset `{name}` (expected paper, mini or probe)")),
        }
    }

    pub fn feature_size(&self) -> usize {
        self.input_size / OUTPUT_STRIDE
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_channels == 0 {
            return Err(invalid!("input_channels must be positive"));
        }
        let widths = [self.stem_width, self.aspp_width]
            .iter()
            .chain(&self.stage_widths)
            .chain(&self.decoder_widths)
            .all(|&w| w > 0);
        if !widths {
            return Err(invalid!("all layer widths must be positive"));
        }
        if self.stage_widths.iter().any(|w| w % 4 != 0) {
            return Err(invalid!("stage widths must be divisible by 4 (bottleneck expansion)"));
        }
        if self.decoder_kernel.is_multiple_of(2) {
            return Err(invalid!("decoder_kernel must be odd, got {}", self.decoder_kernel));
        }
        if self.bottleneck_counts.contains(&0) {
            return Err(invalid!("every stage needs at least one bottleneck unit"));
        }
        if self.input_size == 0 || !self.input_size.is_multiple_of(INPUT_MULTIPLE) {
            return Err(invalid!("input_size {} must be a positive multiple of {INPUT_MULTIPLE}", self.input_size));
        }
        let f = self.feature_size();
        let [r1, r2, _] = self.rates.get();
        if r1 >= f {
            return Err(Error::RateTooLarge {
                rate: r1,
                feature: f,
                detail: "every off-centre tap of every dilated branch lands in zero padding".into(),
            });
        }
        if r2 >= f {
            log::warn!(
                "rates {} on {f}x{f} features: two of three dilated branches only see padding off-centre; \
                 such configurations tend to train unstably",
                self.rates
            );
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rates_must_increase() {
        assert!(AsppRates::new(6, 12, 18).is_ok());
        assert!(AsppRates::new(6, 6, 18).is_err());
        assert!(AsppRates::new(0, 1, 2).is_err());
    }

    #[test]
    fn rates_parse_and_render() {
        assert_eq!("6,12,18".parse::<AsppRates>().unwrap(), AsppRates::SMALL);
        assert_eq!("12-24-36".parse::<AsppRates>().unwrap(), AsppRates::MEDIUM);
        assert_eq!("large".parse::<AsppRates>().unwrap(), AsppRates::LARGE);
        assert_eq!(AsppRates::SMALL.key(), "6-12-18");
    }

    #[test]
    fn oversized_rates_rejected() {
        let spec = ModelSpec::paper(17, AsppRates::new(48, 96, 144).unwrap());
        assert!(matches!(spec.validate(), Err(Error::RateTooLarge { rate: 48, feature: 48, .. })));
        ModelSpec::paper(17, AsppRates::new(24, 48, 72).unwrap()).validate().unwrap();
        ModelSpec::paper(17, AsppRates::LARGE).validate().unwrap();
    }

    #[test]
    fn class_counts() {
        assert_eq!(Task::ALL.map(Task::classes), [11, 6, 7]);
    }
}
