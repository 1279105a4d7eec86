//! Rule-assisted labeling from stacked auxiliary layers.
//!
//! A site is summarized over the patch window (mean building height, cover
//! fractions, mean NDVI) and pushed through an ordered first-match decision
//! list: water, then the built branch, then the natural branch.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::class::LczClass;
use crate::error::{Error, Result};
use crate::raster::{window_origin, RasterGrid};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SiteFlag {
    Lightweight,
    Industrial,
    Shrub,
}

impl std::str::FromStr for SiteFlag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "lightweight" => Ok(SiteFlag::Lightweight),
            "industrial" => Ok(SiteFlag::Industrial),
            "shrub" => Ok(SiteFlag::Shrub),
            other => Err(Error::InvalidSite(format!("unknown flag {other:?}"))),
        }
    }
}

impl SiteFlag {
    pub fn name(self) -> &'static str {
        match self {
            SiteFlag::Lightweight => "lightweight",
            SiteFlag::Industrial => "industrial",
            SiteFlag::Shrub => "shrub",
        }
    }
}

/// `flags=a|b`, the token a point's `source` field uses to carry site flags.
pub fn flags_token(flags: &BTreeSet<SiteFlag>) -> String {
    let names: Vec<&str> = flags.iter().map(|f| f.name()).collect();
    format!("flags={}", names.join("|"))
}

/// Site flags from a `;`-separated `source` field; tokens other than
/// `flags=...` are ignored.
pub fn parse_source_flags(source: &str) -> Result<BTreeSet<SiteFlag>> {
    let mut out = BTreeSet::new();
    for token in source.split(';') {
        if let Some(list) = token.trim().strip_prefix("flags=") {
            for name in list.split('|').filter(|s| !s.trim().is_empty()) {
                out.insert(name.parse()?);
            }
        }
    }
    Ok(out)
}

/// Window-level description of a labeling site.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SiteSummary {
    pub mean_building_height_m: f64,
    pub building_fraction: f64,
    pub mean_ndvi: f64,
    pub impervious_fraction: f64,
    pub water_fraction: f64,
    /// Share of the window that is pervious and free of buildings and water.
    pub tree_fraction: f64,
    #[serde(default)]
    pub flags: BTreeSet<SiteFlag>,
}

impl SiteSummary {
    pub fn validate(&self) -> Result<()> {
        let fractions = [
            ("building_fraction", self.building_fraction),
            ("impervious_fraction", self.impervious_fraction),
            ("water_fraction", self.water_fraction),
            ("tree_fraction", self.tree_fraction),
        ];
        for (name, v) in fractions {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::InvalidSite(format!("{name} = {v} is outside [0, 1]")));
            }
        }
        if !(self.mean_building_height_m >= 0.0 && self.mean_building_height_m.is_finite()) {
            return Err(Error::InvalidSite(format!(
                "mean_building_height_m = {} must be finite and non-negative",
                self.mean_building_height_m
            )));
        }
        if !self.mean_ndvi.is_finite() {
            return Err(Error::InvalidSite("mean_ndvi is not finite".into()));
        }
        Ok(())
    }

    pub fn has(&self, flag: SiteFlag) -> bool {
        self.flags.contains(&flag)
    }
}

/// Thresholds of the decision list. Loadable from JSON with the same field names.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RuleConfig {
    pub water_min: f64,
    pub built_min_fraction: f64,
    pub highrise_min_m: f64,
    pub midrise_min_m: f64,
    pub compact_min_fraction: f64,
    pub open_min_fraction: f64,
    pub dense_veg_ndvi: f64,
    pub low_plants_ndvi: f64,
    pub paved_impervious_min: f64,
    pub dense_tree_fraction: f64,
}

impl Default for RuleConfig {
    fn default() -> Self {
        RuleConfig {
            water_min: 0.5,
            built_min_fraction: 0.1,
            highrise_min_m: 25.0,
            midrise_min_m: 10.0,
            compact_min_fraction: 0.4,
            open_min_fraction: 0.2,
            dense_veg_ndvi: 0.6,
            low_plants_ndvi: 0.3,
            paved_impervious_min: 0.5,
            dense_tree_fraction: 0.7,
        }
    }
}

impl RuleConfig {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.water_min,
            self.built_min_fraction,
            self.highrise_min_m,
            self.midrise_min_m,
            self.compact_min_fraction,
            self.open_min_fraction,
            self.dense_veg_ndvi,
            self.low_plants_ndvi,
            self.paved_impervious_min,
            self.dense_tree_fraction,
        ];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidConfig("rule thresholds must be finite".into()));
        }
        if self.midrise_min_m >= self.highrise_min_m {
            return Err(Error::InvalidConfig("midrise_min_m must be below highrise_min_m".into()));
        }
        if self.low_plants_ndvi >= self.dense_veg_ndvi {
            return Err(Error::InvalidConfig("low_plants_ndvi must be below dense_veg_ndvi".into()));
        }
        if self.open_min_fraction >= self.compact_min_fraction {
            return Err(Error::InvalidConfig(
                "open_min_fraction must be below compact_min_fraction".into(),
            ));
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let rules: RuleConfig = serde_json::from_slice(&bytes)?;
        rules.validate()?;
        Ok(rules)
    }
}

/// Evaluates the decision list; returns the class and the id of the rule that fired.
pub fn rule_assist_label(site: &SiteSummary, rules: &RuleConfig) -> Result<(LczClass, &'static str)> {
    site.validate()?;
    let r = rules;
    let h = site.mean_building_height_m;
    let bf = site.building_fraction;

    if site.water_fraction >= r.water_min {
        return Ok((LczClass::G, "water"));
    }
    if bf >= r.built_min_fraction {
        if site.has(SiteFlag::Industrial) {
            return Ok((LczClass::LCZ10, "built.industrial"));
        }
        if site.has(SiteFlag::Lightweight) {
            return Ok((LczClass::LCZ7, "built.lightweight"));
        }
        let compact = bf >= r.compact_min_fraction;
        return Ok(if h >= r.highrise_min_m {
            if compact {
                (LczClass::LCZ1, "built.highrise.compact")
            } else {
                (LczClass::LCZ4, "built.highrise.open")
            }
        } else if h >= r.midrise_min_m {
            if compact {
                (LczClass::LCZ2, "built.midrise.compact")
            } else {
                (LczClass::LCZ5, "built.midrise.open")
            }
        } else if compact {
            (LczClass::LCZ3, "built.lowrise.compact")
        } else if bf >= r.open_min_fraction {
            if site.impervious_fraction >= r.paved_impervious_min {
                (LczClass::LCZ8, "built.lowrise.large")
            } else {
                (LczClass::LCZ6, "built.lowrise.open")
            }
        } else {
            (LczClass::LCZ9, "built.sparse")
        });
    }
    Ok(if site.mean_ndvi >= r.dense_veg_ndvi {
        if site.tree_fraction >= r.dense_tree_fraction {
            (LczClass::A, "natural.dense_trees")
        } else {
            (LczClass::B, "natural.scattered_trees")
        }
    } else if site.mean_ndvi >= r.low_plants_ndvi {
        if site.has(SiteFlag::Shrub) {
            (LczClass::C, "natural.shrub")
        } else {
            (LczClass::D, "natural.low_plants")
        }
    } else if site.impervious_fraction >= r.paved_impervious_min {
        (LczClass::E, "natural.paved")
    } else {
        (LczClass::F, "natural.bare_soil")
    })
}

/// Co-registered layers read by [`summarize_site`].
#[derive(Clone, Copy)]
pub struct SiteLayers<'a> {
    pub basemap: &'a RasterGrid,
    pub ndvi: &'a RasterGrid,
    pub height: &'a RasterGrid,
    pub building_fraction: &'a RasterGrid,
    pub impervious: &'a RasterGrid,
    pub water: &'a RasterGrid,
}

impl SiteLayers<'_> {
    fn named(&self) -> [(&'static str, &RasterGrid); 5] {
        [
            ("ndvi", self.ndvi),
            ("height", self.height),
            ("building_fraction", self.building_fraction),
            ("impervious", self.impervious),
            ("water", self.water),
        ]
    }
}

/// Nodata-ignoring window means of every layer. Flags start empty.
pub fn summarize_site(layers: &SiteLayers<'_>, center: (usize, usize), size: usize) -> Result<SiteSummary> {
    let base = layers.basemap;
    for (name, layer) in layers.named() {
        if !layer.same_geometry(base) {
            return Err(Error::GeometryMismatch(format!(
                "layer {name} is {}x{} at {} m, basemap is {}x{} at {} m",
                layer.width, layer.height, layer.pixel_size_m, base.width, base.height, base.pixel_size_m
            )));
        }
    }
    let (r0, c0) = window_origin(base.height, base.width, center.0, center.1, size).ok_or_else(|| {
        Error::OutOfBounds(format!("site window of {size} around {center:?} leaves the grid"))
    })?;
    let rows = r0..r0 + size;
    let cols = c0..c0 + size;

    let mean = |name: &str, layer: &RasterGrid| -> Result<f64> {
        let mut sum = 0.0f64;
        let mut n = 0usize;
        for r in rows.clone() {
            for c in cols.clone() {
                let v = layer.get(0, r, c);
                if !layer.is_nodata(v) {
                    sum += v as f64;
                    n += 1;
                }
            }
        }
        if n == 0 {
            return Err(Error::InvalidSite(format!("layer {name} has no valid cell in the window")));
        }
        Ok(sum / n as f64)
    };

    let mut tree_sum = 0.0f64;
    let mut tree_n = 0usize;
    for r in rows.clone() {
        for c in cols.clone() {
            let b = layers.building_fraction.get(0, r, c);
            let i = layers.impervious.get(0, r, c);
            let w = layers.water.get(0, r, c);
            if layers.building_fraction.is_nodata(b) || layers.impervious.is_nodata(i) || layers.water.is_nodata(w) {
                continue;
            }
            tree_sum += (1.0 - b as f64 - i as f64 - w as f64).clamp(0.0, 1.0);
            tree_n += 1;
        }
    }

    let clamp01 = |v: f64| v.clamp(0.0, 1.0);
    Ok(SiteSummary {
        mean_building_height_m: mean("height", layers.height)?.max(0.0),
        building_fraction: clamp01(mean("building_fraction", layers.building_fraction)?),
        mean_ndvi: mean("ndvi", layers.ndvi)?,
        impervious_fraction: clamp01(mean("impervious", layers.impervious)?),
        water_fraction: clamp01(mean("water", layers.water)?),
        tree_fraction: if tree_n == 0 { 0.0 } else { tree_sum / tree_n as f64 },
        flags: BTreeSet::new(),
    })
}
