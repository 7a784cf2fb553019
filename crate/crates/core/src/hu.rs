//! Per-class HU bands used for cluster labelling, the compatibility filter
//! and phantom validation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::PathologyLabel;

/// Half-open HU interval `(lo, hi]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HuBand {
    pub lo: f64,
    pub hi: f64,
}

impl HuBand {
    pub const fn new(lo: f64, hi: f64) -> Self {
        Self { lo, hi }
    }

    pub fn mid(&self) -> f64 {
        0.5 * (self.lo + self.hi)
    }
}

/// HU bands for every label. Bands must partition a contiguous range that
/// covers [-1024, 600]; the lowest band is closed at its lower end.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HuThresholds {
    pub background: HuBand,
    pub emphysema: HuBand,
    pub healthy: HuBand,
    pub ggo: HuBand,
    pub fibrosis: HuBand,
}

impl Default for HuThresholds {
    fn default() -> Self {
        Self {
            background: HuBand::new(-1024.0, -990.0),
            emphysema: HuBand::new(-990.0, -860.0),
            healthy: HuBand::new(-860.0, -700.0),
            ggo: HuBand::new(-700.0, -300.0),
            fibrosis: HuBand::new(-300.0, 600.0),
        }
    }
}

impl HuThresholds {
    pub fn band(&self, label: PathologyLabel) -> HuBand {
        match label {
            PathologyLabel::Background => self.background,
            PathologyLabel::Emphysema => self.emphysema,
            PathologyLabel::Healthy => self.healthy,
            PathologyLabel::Ggo => self.ggo,
            PathologyLabel::Fibrosis => self.fibrosis,
        }
    }

    /// Labels ordered by increasing HU.
    fn ordered(&self) -> Vec<(PathologyLabel, HuBand)> {
        let mut v: Vec<_> = PathologyLabel::ALL
            .iter()
            .map(|&l| (l, self.band(l)))
            .collect();
        v.sort_by(|a, b| a.1.lo.total_cmp(&b.1.lo));
        v
    }

    pub fn validate(&self) -> Result<()> {
        let ordered = self.ordered();
        if ordered[0].0 != PathologyLabel::Background {
            return Err(Error::invalid(
                "the Background band must be the lowest HU band",
            ));
        }
        for (l, b) in &ordered {
            if !(b.lo < b.hi) {
                return Err(Error::invalid(format!(
                    "empty HU band for {l}: ({}, {}]",
                    b.lo, b.hi
                )));
            }
        }
        for w in ordered.windows(2) {
            if w[0].1.hi != w[1].1.lo {
                return Err(Error::invalid(format!(
                    "HU bands for {} and {} are not contiguous",
                    w[0].0, w[1].0
                )));
            }
        }
        if ordered[0].1.lo > -1024.0 || ordered[4].1.hi < 600.0 {
            return Err(Error::invalid("HU bands must cover [-1024, 600]"));
        }
        Ok(())
    }

    fn lowest(&self) -> f64 {
        self.ordered()[0].1.lo
    }

    /// True when `hu` lies in the band of `label` widened by `margin` on both sides.
    pub fn contains(&self, label: PathologyLabel, hu: f64, margin: f64) -> bool {
        let b = self.band(label);
        let above_lo = if b.lo == self.lowest() {
            hu >= b.lo - margin
        } else {
            hu > b.lo - margin
        };
        above_lo && hu <= b.hi + margin
    }

    /// The label whose band contains `hu`; boundary values go to the lower
    /// class. `None` outside every band.
    pub fn label_for(&self, hu: f64) -> Option<PathologyLabel> {
        self.ordered()
            .into_iter()
            .enumerate()
            .find(|(i, (_, b))| (if *i == 0 { hu >= b.lo } else { hu > b.lo }) && hu <= b.hi)
            .map(|(_, (l, _))| l)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_partition_the_lung_range() {
        let t = HuThresholds::default();
        t.validate().unwrap();
        assert_eq!(t.label_for(-960.0), Some(PathologyLabel::Emphysema));
        assert_eq!(t.label_for(-500.0), Some(PathologyLabel::Ggo));
        assert_eq!(t.label_for(-1024.0), Some(PathologyLabel::Background));
        assert_eq!(t.label_for(-1000.0), Some(PathologyLabel::Background));
        assert_eq!(t.label_for(-800.0), Some(PathologyLabel::Healthy));
        assert_eq!(t.label_for(0.0), Some(PathologyLabel::Fibrosis));
        assert_eq!(t.label_for(601.0), None);
    }

    #[test]
    fn boundaries_resolve_to_lower_class() {
        let t = HuThresholds::default();
        assert_eq!(t.label_for(-860.0), Some(PathologyLabel::Emphysema));
        assert_eq!(t.label_for(-990.0), Some(PathologyLabel::Background));
        assert_eq!(t.label_for(-700.0), Some(PathologyLabel::Healthy));
        assert_eq!(t.label_for(-300.0), Some(PathologyLabel::Ggo));
    }

    #[test]
    fn margin_widens_band() {
        let t = HuThresholds::default();
        assert!(!t.contains(PathologyLabel::Emphysema, -850.0, 0.0));
        assert!(t.contains(PathologyLabel::Emphysema, -850.0, 20.0));
        assert!(t.contains(PathologyLabel::Background, -1024.0, 0.0));
    }

    #[test]
    fn rejects_gaps_and_misordered_background() {
        let mut t = HuThresholds::default();
        t.healthy.lo = -850.0;
        assert!(t.validate().is_err());
        let t = HuThresholds {
            background: HuBand::new(600.0, 700.0),
            ..HuThresholds::default()
        };
        assert!(t.validate().is_err());
    }
}
