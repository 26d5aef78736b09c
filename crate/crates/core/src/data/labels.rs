//! Ice-chart polygon attributes to per-pixel SIC / SOD / FLOE rasters.

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::tensor::IGNORE_INDEX;

/// Partial concentration (tenths) at or above which a partial entry is dominant.
/// `tenths / 10 >= 0.65` holds exactly when `tenths >= 7`.
pub const DOMINANT_FRACTION: f64 = 0.65;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartialEntry {
    /// Tenths, 0..=10.
    pub concentration: u8,
    pub sod: u8,
    pub floe: u8,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IcePolygonAttrs {
    pub region: u32,
    /// Total concentration in tenths.
    pub total: u8,
    pub partials: Vec<PartialEntry>,
}

impl IcePolygonAttrs {
    pub fn validate(&self) -> Result<()> {
        if self.total > 10 {
            return Err(invalid!("region {}: total concentration {} exceeds 10 tenths", self.region, self.total));
        }
        if self.partials.len() > 3 {
            return Err(invalid!("region {}: {} partial entries, at most 3 allowed", self.region, self.partials.len()));
        }
        let sum: u32 = self.partials.iter().map(|p| p.concentration as u32).sum();
        if sum > self.total as u32 {
            return Err(invalid!("region {}: partials sum to {sum} tenths, above total {}", self.region, self.total));
        }
        for p in &self.partials {
            if p.sod > 5 || p.floe > 6 {
                return Err(invalid!("region {}: sod code {} / floe code {} out of range", self.region, p.sod, p.floe));
            }
        }
        Ok(())
    }

    /// Index of the partial entry with fractional concentration ≥ 0.65, if any.
    pub fn dominant(&self) -> Option<usize> {
        self.partials.iter().position(|p| p.concentration as f64 / 10.0 >= DOMINANT_FRACTION)
    }

    /// `(sic, sod, floe)` for an unmasked pixel of this polygon.
    pub fn classes(&self) -> (u8, u8, u8) {
        if self.total == 0 {
            return (0, 0, 0);
        }
        match self.dominant() {
            Some(i) => (self.total, self.partials[i].sod, self.partials[i].floe),
            None => (self.total, IGNORE_INDEX, IGNORE_INDEX),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DerivedLabels {
    pub sic: Vec<u8>,
    pub sod: Vec<u8>,
    pub floe: Vec<u8>,
    /// Region ids present in the raster without attributes.
    pub missing: Vec<u32>,
}

/// Rasterizes polygon attributes; masked pixels and unknown regions become 255.
pub fn derive_labels(regions: &[u32], mask: &[u8], attrs: &[IcePolygonAttrs]) -> Result<DerivedLabels> {
    if regions.len() != mask.len() {
        return Err(invalid!("region raster has {} pixels, mask {}", regions.len(), mask.len()));
    }
    let mut table = HashMap::with_capacity(attrs.len());
    for a in attrs {
        a.validate()?;
        table.insert(a.region, a.classes());
    }
    let n = regions.len();
    let mut out = DerivedLabels {
        sic: vec![IGNORE_INDEX; n],
        sod: vec![IGNORE_INDEX; n],
        floe: vec![IGNORE_INDEX; n],
        missing: Vec::new(),
    };
    let mut missing = BTreeSet::new();
    for i in 0..n {
        if mask[i] != 0 {
            continue;
        }
        match table.get(&regions[i]) {
            Some(&(sic, sod, floe)) => {
                out.sic[i] = sic;
                out.sod[i] = sod;
                out.floe[i] = floe;
            }
            None => {
                missing.insert(regions[i]);
            }
        }
    }
    for r in &missing {
        log::warn!("region {r} has no polygon attributes; labels set to invalid");
    }
    out.missing = missing.into_iter().collect();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn attrs(total: u8, parts: &[(u8, u8, u8)]) -> IcePolygonAttrs {
        IcePolygonAttrs {
            region: 1,
            total,
            partials: parts
                .iter()
                .map(|&(concentration, sod, floe)| PartialEntry { concentration, sod, floe })
                .collect(),
        }
    }

    #[test]
    fn seven_tenths_dominates() {
        assert_eq!(attrs(10, &[(7, 3, 4), (2, 1, 1), (1, 2, 2)]).classes(), (10, 3, 4));
    }

    #[test]
    fn six_tenths_is_ambiguous() {
        assert_eq!(attrs(10, &[(6, 3, 4), (3, 1, 1), (1, 2, 2)]).classes(), (10, 255, 255));
    }

    #[test]
    fn open_water() {
        assert_eq!(attrs(0, &[]).classes(), (0, 0, 0));
    }

    #[test]
    fn invalid_attrs_rejected() {
        assert!(attrs(11, &[]).validate().is_err());
        assert!(attrs(5, &[(4, 1, 1), (2, 1, 1)]).validate().is_err());
        assert!(attrs(10, &[(7, 6, 1)]).validate().is_err());
    }

    #[test]
    fn missing_region_and_mask() {
        let a = attrs(9, &[(8, 2, 3)]);
        let out = derive_labels(&[1, 1, 2, 1], &[0, 1, 0, 0], &[a]).unwrap();
        assert_eq!(out.sic, vec![9, 255, 255, 9]);
        assert_eq!(out.sod, vec![2, 255, 255, 2]);
        assert_eq!(out.missing, vec![2]);
    }
}
