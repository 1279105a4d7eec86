//! From labeled points to a balanced, split, serialized patch dataset.

mod augment;
mod dataset_io;
mod rules;
mod split;

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use augment::{augment_rebalance, Dihedral};
pub use dataset_io::{decode_dataset, encode_dataset, load_dataset, save_dataset};
pub use rules::{flags_token, parse_source_flags, rule_assist_label, summarize_site, RuleConfig, SiteFlag, SiteLayers, SiteSummary};
pub use split::{apportion, stratified_split};

use crate::class::{LczClass, N_CLASSES};
use crate::error::{Error, Result};
use crate::io_util::write_atomic;
use crate::raster::{extract_patch, map_point_to_pixel, Patch, RasterGrid};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabeledPoint {
    pub x: f64,
    pub y: f64,
    #[serde(rename = "lcz")]
    pub label: LczClass,
    #[serde(default)]
    pub source: String,
}

pub fn read_points(path: impl AsRef<Path>) -> Result<Vec<LabeledPoint>> {
    let path = path.as_ref();
    let mut rdr = csv::Reader::from_path(path)?;
    let headers = rdr.headers()?.clone();
    let expected = ["x", "y", "lcz", "source"];
    if headers.iter().map(str::trim).ne(expected) {
        return Err(Error::InvalidConfig(format!(
            "points CSV header must be x,y,lcz,source, got {}",
            headers.iter().collect::<Vec<_>>().join(",")
        )));
    }
    rdr.deserialize().map(|r| r.map_err(Error::from)).collect()
}

pub fn write_points(points: &[LabeledPoint], path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for p in points {
        w.serialize(p)?;
    }
    if points.is_empty() {
        w.write_record(["x", "y", "lcz", "source"])?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::InvalidConfig(format!("csv flush: {e}")))?;
    write_atomic(path.as_ref(), &bytes)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
#[repr(u8)]
pub enum Split {
    Train = 0,
    Val = 1,
    Test = 2,
}

impl Split {
    pub fn from_code(code: u8) -> Option<Split> {
        match code {
            0 => Some(Split::Train),
            1 => Some(Split::Val),
            2 => Some(Split::Test),
            _ => None,
        }
    }
}

/// Patches with parallel labels and optional split tags.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleSet {
    pub patch_size: usize,
    pub n_channels: usize,
    pub patches: Vec<Patch>,
    pub labels: Vec<LczClass>,
    pub split_tags: Option<Vec<Split>>,
}

impl SampleSet {
    pub fn new(patch_size: usize, n_channels: usize) -> Self {
        SampleSet {
            patch_size,
            n_channels,
            patches: Vec::new(),
            labels: Vec::new(),
            split_tags: None,
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn push(&mut self, patch: Patch, label: LczClass) -> Result<()> {
        if self.split_tags.is_some() {
            return Err(Error::InvalidConfig("set is split; use push_tagged".into()));
        }
        self.push_tagged(patch, label, None)
    }

    pub fn push_tagged(&mut self, mut patch: Patch, label: LczClass, tag: Option<Split>) -> Result<()> {
        if patch.size != self.patch_size || patch.n_channels != self.n_channels {
            return Err(Error::ShapeMismatch(format!(
                "patch {}x{}x{} does not fit set {}x{}x{}",
                patch.size, patch.size, patch.n_channels, self.patch_size, self.patch_size, self.n_channels
            )));
        }
        match (&mut self.split_tags, tag) {
            (Some(tags), Some(t)) => tags.push(t),
            (None, None) => {}
            _ => return Err(Error::InvalidConfig("split tag presence must match the set".into())),
        }
        patch.label = Some(label);
        self.patches.push(patch);
        self.labels.push(label);
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.patches.len() != self.labels.len() {
            return Err(Error::MalformedDataset("patches and labels differ in length".into()));
        }
        if let Some(tags) = &self.split_tags {
            if tags.len() != self.labels.len() {
                return Err(Error::MalformedDataset("split tags and labels differ in length".into()));
            }
        }
        let per = self.patch_size * self.patch_size * self.n_channels;
        for (i, p) in self.patches.iter().enumerate() {
            if p.size != self.patch_size || p.n_channels != self.n_channels || p.data.len() != per {
                return Err(Error::MalformedDataset(format!("patch {i} has inconsistent shape")));
            }
        }
        Ok(())
    }

    pub fn histogram(&self) -> [usize; N_CLASSES] {
        let mut h = [0; N_CLASSES];
        for l in &self.labels {
            h[l.index()] += 1;
        }
        h
    }

    /// Samples tagged with `split`, untagged. An unsplit set yields everything.
    pub fn subset(&self, split: Split) -> SampleSet {
        let mut out = SampleSet::new(self.patch_size, self.n_channels);
        for i in 0..self.len() {
            if self.split_tags.as_ref().is_none_or(|t| t[i] == split) {
                out.patches.push(self.patches[i].clone());
                out.labels.push(self.labels[i]);
            }
        }
        out
    }

    /// Concatenates sets of identical shape; split tags are dropped.
    pub fn concat(sets: &[&SampleSet]) -> Result<SampleSet> {
        let first = sets.first().ok_or_else(|| Error::Empty("no sets to concatenate".into()))?;
        let mut out = SampleSet::new(first.patch_size, first.n_channels);
        for s in sets {
            for (p, l) in s.patches.iter().zip(&s.labels) {
                out.push(p.clone(), *l)?;
            }
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct SkippedPoint {
    pub index: usize,
    pub reason: &'static str,
}

/// Cuts one patch per labeled point. Points that fall outside the grid, whose
/// window leaves the grid, or whose window touches nodata are skipped and
/// reported. Duplicate points yield duplicate patches.
pub fn build_dataset(grid: &RasterGrid, points: &[LabeledPoint], size: usize) -> Result<(SampleSet, Vec<SkippedPoint>)> {
    grid.validate()?;
    if size == 0 || !size.is_multiple_of(2) {
        return Err(Error::InvalidConfig(format!("patch size must be even and positive, got {size}")));
    }
    let results: Vec<Result<Patch>> = points
        .par_iter()
        .map(|p| {
            let (row, col) = map_point_to_pixel(grid, p.x, p.y)?;
            extract_patch(grid, row, col, size)
        })
        .collect();
    let mut set = SampleSet::new(size, grid.n_bands);
    let mut skipped = Vec::new();
    for (index, (point, result)) in points.iter().zip(results).enumerate() {
        match result {
            Ok(patch) => set.push(patch, point.label)?,
            Err(e) => skipped.push(SkippedPoint {
                index,
                reason: match e {
                    Error::OutsideExtent { .. } => "outside_extent",
                    Error::OutOfBounds(_) => "out_of_bounds",
                    Error::NodataContamination { .. } => "nodata",
                    _ => return Err(e),
                },
            }),
        }
    }
    Ok((set, skipped))
}
