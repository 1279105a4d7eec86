//! Seeded synthetic scenes for exercising the pipeline without external data.
//!
//! A scene is tiled with rectangular class blobs. Each blob gets its class's
//! band signature plus auxiliary layers (height, building fraction,
//! impervious, water, NDVI) set to a class prototype that the default rule
//! list maps back to that class. One labeled point sits at each blob center.

use std::collections::BTreeSet;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::class::LczClass;
use crate::error::{Error, Result};
use crate::raster::{extract_patch, pixel_center, RasterGrid, DEFAULT_NODATA, DEFAULT_PATCH_SIZE};
use crate::rng::{self, Rng};
use crate::sampling::{flags_token, LabeledPoint, SampleSet, SiteFlag, SiteLayers};

pub const N_BANDS: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scenario {
    /// Class identity in per-band mean levels.
    Means,
    /// Identical band statistics; class identity in spatial patterns only.
    Texture,
    /// Texture with a per-band affine distortion and a different
    /// class-to-pattern assignment (a transfer source domain).
    Shifted,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioSpec {
    pub scenario: Scenario,
    pub classes: Vec<LczClass>,
    pub width: usize,
    pub height: usize,
    pub blob_size_min: usize,
    pub blob_size_max: usize,
    /// Keep at most this many labeled points per scene.
    pub blob_count: Option<usize>,
    pub noise_sigma: f64,
    pub pixel_size_m: f64,
    pub seed: u64,
}

impl Default for ScenarioSpec {
    fn default() -> Self {
        ScenarioSpec {
            scenario: Scenario::Means,
            classes: LczClass::ALL.to_vec(),
            width: 512,
            height: 512,
            blob_size_min: 48,
            blob_size_max: 96,
            blob_count: None,
            noise_sigma: 0.05,
            pixel_size_m: 10.0,
            seed: 0,
        }
    }
}

impl ScenarioSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.classes.is_empty() {
            return bad("scenario needs at least one class".into());
        }
        let unique: BTreeSet<u8> = self.classes.iter().map(|c| c.code()).collect();
        if unique.len() != self.classes.len() {
            return bad("scenario classes must be distinct".into());
        }
        if self.blob_size_min < DEFAULT_PATCH_SIZE || self.blob_size_max < self.blob_size_min {
            return bad(format!(
                "blob sizes must satisfy {DEFAULT_PATCH_SIZE} <= blob_size_min <= blob_size_max, got {}..{}",
                self.blob_size_min, self.blob_size_max
            ));
        }
        if self.width < self.blob_size_min || self.height < self.blob_size_min {
            return bad(format!("scene {}x{} is smaller than one blob", self.width, self.height));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad(format!("noise_sigma {} must be finite and non-negative", self.noise_sigma));
        }
        if !(self.pixel_size_m > 0.0 && self.pixel_size_m.is_finite()) {
            return bad(format!("pixel_size_m {} must be positive", self.pixel_size_m));
        }
        if self.blob_count == Some(0) {
            return bad("blob_count must be at least 1 when set".into());
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let spec: ScenarioSpec = serde_json::from_slice(&bytes)?;
        spec.validate()?;
        Ok(spec)
    }
}

/// Auxiliary-layer values a class's blobs carry.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Prototype {
    pub height_m: f32,
    pub building_fraction: f32,
    pub impervious: f32,
    pub water: f32,
    pub ndvi: f32,
    pub flag: Option<SiteFlag>,
}

pub fn prototype(class: LczClass) -> Prototype {
    let p = |height_m, building_fraction, impervious, water, ndvi, flag| Prototype {
        height_m,
        building_fraction,
        impervious,
        water,
        ndvi,
        flag,
    };
    match class.code() {
        0 => p(30.0, 0.5, 0.4, 0.0, 0.1, None),
        1 => p(15.0, 0.5, 0.4, 0.0, 0.1, None),
        2 => p(5.0, 0.5, 0.4, 0.0, 0.15, None),
        3 => p(35.0, 0.25, 0.3, 0.0, 0.3, None),
        4 => p(15.0, 0.25, 0.3, 0.0, 0.3, None),
        5 => p(5.0, 0.25, 0.3, 0.0, 0.35, None),
        6 => p(3.0, 0.6, 0.2, 0.0, 0.1, Some(SiteFlag::Lightweight)),
        7 => p(6.0, 0.3, 0.6, 0.0, 0.1, None),
        8 => p(5.0, 0.12, 0.1, 0.0, 0.5, None),
        9 => p(10.0, 0.3, 0.5, 0.0, 0.1, Some(SiteFlag::Industrial)),
        10 => p(0.0, 0.0, 0.05, 0.0, 0.8, None),
        11 => p(2.0, 0.05, 0.35, 0.0, 0.7, None),
        12 => p(0.0, 0.0, 0.05, 0.0, 0.45, Some(SiteFlag::Shrub)),
        13 => p(0.0, 0.0, 0.05, 0.0, 0.4, None),
        14 => p(0.0, 0.0, 0.8, 0.0, 0.1, None),
        15 => p(0.0, 0.0, 0.1, 0.0, 0.1, None),
        _ => p(0.0, 0.0, 0.0, 0.9, -0.3, None),
    }
}

/// Band levels for the "means" scenario: a low base everywhere, with band
/// `code % 10` raised (and band `(code + 3) % 10` too for natural classes),
/// so every class has a distinct mean vector.
pub fn mean_signature(class: LczClass) -> [f32; N_BANDS] {
    let c = class.code() as usize;
    let mut s = [0.2f32; N_BANDS];
    s[c % N_BANDS] = 0.7;
    if c >= N_BANDS {
        s[(c + 3) % N_BANDS] = 0.7;
    }
    s
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Orientation {
    Horizontal,
    Vertical,
    Checker,
    Diagonal,
    AntiDiagonal,
}

/// A +/-1 pattern with 50% duty cycle. Every period divides the patch size,
/// so any aligned 32x32 window holds exactly as many +1 as -1 cells.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Pattern {
    orientation: Orientation,
    period: usize,
}

const PERIODS: [usize; 4] = [2, 4, 8, 16];
const ORIENTATIONS: [Orientation; 5] = [
    Orientation::Horizontal,
    Orientation::Vertical,
    Orientation::Checker,
    Orientation::Diagonal,
    Orientation::AntiDiagonal,
];

impl Pattern {
    fn for_index(i: usize) -> Pattern {
        let i = i % (PERIODS.len() * ORIENTATIONS.len());
        Pattern {
            orientation: ORIENTATIONS[i / PERIODS.len()],
            period: PERIODS[i % PERIODS.len()],
        }
    }

    fn sign(self, r: usize, c: usize) -> f32 {
        let half = self.period / 2;
        let on = |v: usize| (v % self.period) < half;
        let hi = match self.orientation {
            Orientation::Horizontal => on(r),
            Orientation::Vertical => on(c),
            Orientation::Checker => on(r) == on(c),
            Orientation::Diagonal => on(r + c),
            Orientation::AntiDiagonal => on(r + self.period - c % self.period),
        };
        if hi { 1.0 } else { -1.0 }
    }
}

fn texture_pattern(class: LczClass, scenario: Scenario) -> Pattern {
    let offset = if scenario == Scenario::Shifted { 7 } else { 0 };
    // spread class codes over orientations first so nearby codes differ in shape
    let i = class.code() as usize + offset;
    Pattern::for_index((i % ORIENTATIONS.len()) * PERIODS.len() + (i / ORIENTATIONS.len()) % PERIODS.len())
}

/// Class-agnostic band mean and amplitude for the texture scenarios.
fn texture_levels(band: usize) -> (f32, f32) {
    (0.35 + 0.03 * band as f32, 0.15)
}

/// Per-band affine distortion of the shifted scenario.
fn shift_affine(band: usize) -> (f32, f32) {
    (0.6 + 0.08 * band as f32, 0.1 - 0.02 * band as f32)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Blob {
    pub row0: usize,
    pub col0: usize,
    pub rows: usize,
    pub cols: usize,
    pub class: LczClass,
}

impl Blob {
    pub fn center(&self) -> (usize, usize) {
        (self.row0 + self.rows / 2, self.col0 + self.cols / 2)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    /// Ten spectral bands.
    pub bands: RasterGrid,
    pub height: RasterGrid,
    pub building_fraction: RasterGrid,
    pub impervious: RasterGrid,
    pub water: RasterGrid,
    pub ndvi: RasterGrid,
    /// Ground-truth class codes.
    pub truth: RasterGrid,
    pub blobs: Vec<Blob>,
    pub points: Vec<LabeledPoint>,
    /// Site flags of each labeled point, parallel to `points`.
    pub point_flags: Vec<BTreeSet<SiteFlag>>,
}

impl Scene {
    pub fn layers(&self) -> SiteLayers<'_> {
        SiteLayers {
            basemap: &self.bands,
            ndvi: &self.ndvi,
            height: &self.height,
            building_fraction: &self.building_fraction,
            impervious: &self.impervious,
            water: &self.water,
        }
    }
}

/// Splits `total` into consecutive spans with lengths in `min..=max`.
fn spans(total: usize, min: usize, max: usize, r: &mut Rng) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut start = 0;
    while total - start >= min {
        let remaining = total - start;
        let len = if remaining <= max {
            remaining
        } else {
            // leave either nothing or at least `min` behind
            let hi = max.min(remaining - min);
            if hi < min { remaining.min(max) } else { r.random_range(min..=hi) }
        };
        out.push((start, len));
        start += len;
    }
    out
}

fn layer(spec: &ScenarioSpec, n_bands: usize, fill: f32) -> RasterGrid {
    let mut g = RasterGrid::filled(spec.width, spec.height, n_bands, spec.pixel_size_m, fill);
    g.origin_x = 0.0;
    g.origin_y = spec.height as f64 * spec.pixel_size_m;
    g.nodata = DEFAULT_NODATA;
    g
}

/// Builds one scene; a pure function of `spec`.
pub fn generate_scene(spec: &ScenarioSpec) -> Result<Scene> {
    spec.validate()?;
    let mut layout = rng::stream(spec.seed, 0x6c61_796f);
    let row_spans = spans(spec.height, spec.blob_size_min, spec.blob_size_max, &mut layout);
    let col_spans = spans(spec.width, spec.blob_size_min, spec.blob_size_max, &mut layout);

    // round-robin over a reshuffled class list keeps classes balanced
    let mut blobs = Vec::with_capacity(row_spans.len() * col_spans.len());
    let mut deck: Vec<LczClass> = Vec::new();
    for &(row0, rows) in &row_spans {
        for &(col0, cols) in &col_spans {
            if deck.is_empty() {
                deck = spec.classes.clone();
                deck.shuffle(&mut layout);
            }
            let class = deck.pop().expect("refilled above");
            blobs.push(Blob { row0, col0, rows, cols, class });
        }
    }

    let mut bands = layer(spec, N_BANDS, 0.0);
    let mut height = layer(spec, 1, 0.0);
    let mut building = layer(spec, 1, 0.0);
    let mut impervious = layer(spec, 1, 0.0);
    let mut water = layer(spec, 1, 0.0);
    let mut ndvi = layer(spec, 1, 0.0);
    let mut truth = layer(spec, 1, 0.0);
    // pixels outside every blob (a thin remainder strip) stay nodata
    for g in [&mut bands, &mut height, &mut building, &mut impervious, &mut water, &mut ndvi, &mut truth] {
        g.data.fill(DEFAULT_NODATA);
    }

    for blob in &blobs {
        let proto = prototype(blob.class);
        let phase: (usize, usize) = (layout.random_range(0..16), layout.random_range(0..16));
        let pattern = texture_pattern(blob.class, spec.scenario);
        let signature = mean_signature(blob.class);
        for r in blob.row0..blob.row0 + blob.rows {
            for c in blob.col0..blob.col0 + blob.cols {
                height.set(0, r, c, proto.height_m);
                building.set(0, r, c, proto.building_fraction);
                impervious.set(0, r, c, proto.impervious);
                water.set(0, r, c, proto.water);
                ndvi.set(0, r, c, proto.ndvi);
                truth.set(0, r, c, blob.class.code() as f32);
                let s = pattern.sign(r - blob.row0 + phase.0, c - blob.col0 + phase.1);
                for b in 0..N_BANDS {
                    let v = match spec.scenario {
                        Scenario::Means => signature[b],
                        Scenario::Texture | Scenario::Shifted => {
                            let (m, a) = texture_levels(b);
                            m + a * s
                        }
                    };
                    bands.set(b, r, c, v);
                }
            }
        }
    }

    if spec.noise_sigma > 0.0 {
        let normal = Normal::new(0.0, spec.noise_sigma).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        let mut noise = rng::stream(spec.seed, 0x6e6f_6973);
        for v in bands.data.iter_mut() {
            if *v != DEFAULT_NODATA {
                *v += normal.sample(&mut noise) as f32;
            }
        }
    }
    if spec.scenario == Scenario::Shifted {
        for b in 0..N_BANDS {
            let (gain, offset) = shift_affine(b);
            for v in bands.band_mut(b) {
                if *v != DEFAULT_NODATA {
                    *v = gain * *v + offset;
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..blobs.len()).collect();
    if let Some(cap) = spec.blob_count {
        let mut pick = rng::stream(spec.seed, 0x7069_636b);
        order.shuffle(&mut pick);
        order.truncate(cap);
        order.sort_unstable();
    }
    let mut points = Vec::with_capacity(order.len());
    let mut point_flags = Vec::with_capacity(order.len());
    for i in order {
        let blob = &blobs[i];
        let (row, col) = blob.center();
        let (x, y) = pixel_center(&bands, row, col);
        let flags: BTreeSet<SiteFlag> = prototype(blob.class).flag.into_iter().collect();
        points.push(LabeledPoint {
            x,
            y,
            label: blob.class,
            source: point_source(&flags),
        });
        point_flags.push(flags);
    }

    Ok(Scene {
        bands,
        height,
        building_fraction: building,
        impervious,
        water,
        ndvi,
        truth,
        blobs,
        points,
        point_flags,
    })
}

fn point_source(flags: &BTreeSet<SiteFlag>) -> String {
    if flags.is_empty() {
        "synth".into()
    } else {
        format!("synth;{}", flags_token(flags))
    }
}

/// Collects `n_per_class` patches of each requested class from successive
/// scenes (scene `i` uses seed `derive_seed(spec.seed, i)`).
pub fn generate_dataset(spec: &ScenarioSpec, n_per_class: usize) -> Result<SampleSet> {
    spec.validate()?;
    const MAX_SCENES: u64 = 10_000;
    let mut set = SampleSet::new(DEFAULT_PATCH_SIZE, N_BANDS);
    let mut have = [0usize; crate::class::N_CLASSES];
    let done = |have: &[usize; crate::class::N_CLASSES]| spec.classes.iter().all(|c| have[c.index()] >= n_per_class);
    let mut scene_index = 0u64;
    while !done(&have) {
        if scene_index == MAX_SCENES {
            return Err(Error::InvalidConfig(format!("no {n_per_class} samples per class after {MAX_SCENES} scenes")));
        }
        let scene_spec = ScenarioSpec {
            seed: rng::derive_seed(spec.seed, scene_index),
            ..spec.clone()
        };
        let scene = generate_scene(&scene_spec)?;
        for blob in &scene.blobs {
            if have[blob.class.index()] >= n_per_class {
                continue;
            }
            let (row, col) = blob.center();
            let patch = extract_patch(&scene.bands, row, col, DEFAULT_PATCH_SIZE)?;
            set.push(patch, blob.class)?;
            have[blob.class.index()] += 1;
        }
        scene_index += 1;
    }
    Ok(set)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forest::patch_features;
    use crate::sampling::{parse_source_flags, rule_assist_label, summarize_site, RuleConfig};

    fn spec(scenario: Scenario) -> ScenarioSpec {
        ScenarioSpec {
            scenario,
            width: 256,
            height: 256,
            seed: 11,
            ..ScenarioSpec::default()
        }
    }

    #[test]
    fn spans_cover_and_respect_bounds() {
        let mut r = rng::rng(1);
        for total in [48usize, 95, 96, 97, 143, 500, 3200] {
            let s = spans(total, 48, 96, &mut r);
            let covered: usize = s.iter().map(|x| x.1).sum();
            assert!(total - covered < 48, "{total}");
            assert!(s.iter().all(|&(_, l)| (48..=96).contains(&l)), "{total} {s:?}");
            for w in s.windows(2) {
                assert_eq!(w[0].0 + w[0].1, w[1].0);
            }
        }
    }

    #[test]
    fn prototypes_follow_their_rule_branch() {
        let rules = RuleConfig::default();
        for c in LczClass::ALL {
            let p = prototype(c);
            let site = crate::sampling::SiteSummary {
                mean_building_height_m: p.height_m as f64,
                building_fraction: p.building_fraction as f64,
                mean_ndvi: p.ndvi as f64,
                impervious_fraction: p.impervious as f64,
                water_fraction: p.water as f64,
                tree_fraction: (1.0 - p.building_fraction - p.impervious - p.water).clamp(0.0, 1.0) as f64,
                flags: p.flag.into_iter().collect(),
            };
            assert_eq!(rule_assist_label(&site, &rules).unwrap().0, c);
        }
    }

    #[test]
    fn noise_free_points_recover_their_class() {
        let s = ScenarioSpec {
            noise_sigma: 0.0,
            ..spec(Scenario::Means)
        };
        let scene = generate_scene(&s).unwrap();
        assert!(!scene.points.is_empty());
        for (p, flags) in scene.points.iter().zip(&scene.point_flags) {
            let (row, col) = crate::raster::map_point_to_pixel(&scene.bands, p.x, p.y).unwrap();
            let mut site = summarize_site(&scene.layers(), (row, col), 32).unwrap();
            site.flags = parse_source_flags(&p.source).unwrap();
            assert_eq!(&site.flags, flags);
            assert_eq!(rule_assist_label(&site, &RuleConfig::default()).unwrap().0, p.label);
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let a = generate_scene(&spec(Scenario::Texture)).unwrap();
        let b = generate_scene(&spec(Scenario::Texture)).unwrap();
        assert_eq!(a, b);
        let c = generate_scene(&ScenarioSpec { seed: 12, ..spec(Scenario::Texture) }).unwrap();
        assert_ne!(a.bands, c.bands);
    }

    #[test]
    fn texture_windows_share_band_statistics() {
        let s = ScenarioSpec {
            noise_sigma: 0.0,
            ..spec(Scenario::Texture)
        };
        let set = generate_dataset(&s, 2).unwrap();
        let first = patch_features(&set.patches[0]);
        for p in &set.patches {
            let f = patch_features(p);
            for (a, b) in f.iter().zip(&first) {
                assert!((a - b).abs() < 1e-5, "{f:?} vs {first:?}");
            }
        }
    }

    #[test]
    fn patterns_are_distinct() {
        let mut seen = Vec::new();
        for c in LczClass::ALL {
            let p = texture_pattern(c, Scenario::Texture);
            assert!(!seen.contains(&p), "{c:?}");
            seen.push(p);
        }
    }

    #[test]
    fn dataset_counts() {
        let s = ScenarioSpec {
            classes: vec![LczClass::LCZ1, LczClass::E, LczClass::G],
            ..spec(Scenario::Means)
        };
        let set = generate_dataset(&s, 10).unwrap();
        assert_eq!(set.len(), 30);
        let h = set.histogram();
        assert_eq!((h[0], h[14], h[16]), (10, 10, 10));
    }
}
