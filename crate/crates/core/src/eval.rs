//! Accuracy metrics and LCZ map production.

use std::path::Path;

use indexmap::IndexMap;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::class::{LczClass, N_CLASSES};
use crate::error::{Error, Result};
use crate::forest::RandomForest;
use crate::io_util::write_atomic;
use crate::nn::model::MscnnModel;
use crate::nn::train::predict;
use crate::raster::{extract_patch, integer_ratio, Patch, RasterGrid, DEFAULT_PATCH_SIZE};
use crate::sampling::SampleSet;
use crate::scalar::Scalar;
use crate::transfer::TransferModel;

/// Rows are reference classes, columns predicted classes.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: [[u64; N_CLASSES]; N_CLASSES],
}

impl Default for ConfusionMatrix {
    fn default() -> Self {
        ConfusionMatrix {
            counts: [[0; N_CLASSES]; N_CLASSES],
        }
    }
}

impl ConfusionMatrix {
    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..N_CLASSES).map(|i| self.counts[i][i]).sum()
    }

    pub fn row_sum(&self, i: usize) -> u64 {
        self.counts[i].iter().sum()
    }

    pub fn col_sum(&self, j: usize) -> u64 {
        self.counts.iter().map(|r| r[j]).sum()
    }

    fn nonempty(&self) -> Result<u64> {
        match self.total() {
            0 => Err(Error::Empty("confusion matrix has no entries".into())),
            n => Ok(n),
        }
    }
}

pub fn confusion(preds: &[LczClass], refs: &[LczClass]) -> Result<ConfusionMatrix> {
    if preds.len() != refs.len() {
        return Err(Error::ShapeMismatch(format!("{} predictions for {} references", preds.len(), refs.len())));
    }
    if preds.is_empty() {
        return Err(Error::Empty("no predictions to compare".into()));
    }
    let mut cm = ConfusionMatrix::default();
    for (p, r) in preds.iter().zip(refs) {
        cm.counts[r.index()][p.index()] += 1;
    }
    Ok(cm)
}

pub fn overall_accuracy(cm: &ConfusionMatrix) -> Result<f64> {
    let n = cm.nonempty()?;
    Ok(cm.trace() as f64 / n as f64)
}

/// Cohen's kappa. When chance agreement is 1 (a single class on both axes)
/// the ratio is undefined: 1 is returned for perfect agreement, else 0.
pub fn cohen_kappa(cm: &ConfusionMatrix) -> Result<f64> {
    // (N*trace - sum r_i c_i) / (N^2 - sum r_i c_i), in exact integers
    let n = cm.nonempty()? as u128;
    let chance: u128 = (0..N_CLASSES).map(|i| cm.row_sum(i) as u128 * cm.col_sum(i) as u128).sum();
    let agree = n * cm.trace() as u128;
    if chance == n * n {
        if agree == n * n {
            return Ok(1.0);
        }
        log::warn!("degenerate marginals: chance agreement is 1, kappa reported as 0");
        return Ok(0.0);
    }
    Ok((agree as f64 - chance as f64) / ((n * n - chance) as f64))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct F1Scores {
    pub precision: [f64; N_CLASSES],
    pub recall: [f64; N_CLASSES],
    pub f1: [f64; N_CLASSES],
    pub support: [u64; N_CLASSES],
    pub predicted: [u64; N_CLASSES],
    /// Mean F1 over classes that occur as reference or prediction.
    pub macro_f1: f64,
}

fn ratio(num: f64, den: f64) -> f64 {
    if den == 0.0 { 0.0 } else { num / den }
}

pub fn f1_scores(cm: &ConfusionMatrix) -> F1Scores {
    let mut s = F1Scores {
        precision: [0.0; N_CLASSES],
        recall: [0.0; N_CLASSES],
        f1: [0.0; N_CLASSES],
        support: [0; N_CLASSES],
        predicted: [0; N_CLASSES],
        macro_f1: 0.0,
    };
    let mut present = 0usize;
    let mut sum = 0.0;
    for c in 0..N_CLASSES {
        let tp = cm.counts[c][c] as f64;
        s.support[c] = cm.row_sum(c);
        s.predicted[c] = cm.col_sum(c);
        s.precision[c] = ratio(tp, s.predicted[c] as f64);
        s.recall[c] = ratio(tp, s.support[c] as f64);
        s.f1[c] = ratio(2.0 * s.precision[c] * s.recall[c], s.precision[c] + s.recall[c]);
        if s.support[c] > 0 || s.predicted[c] > 0 {
            present += 1;
            sum += s.f1[c];
        }
    }
    s.macro_f1 = ratio(sum, present as f64);
    s
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub overall_accuracy: f64,
    pub kappa: f64,
    pub macro_f1: f64,
    /// Keyed "LCZ1" .. "LCZG" in class-code order.
    pub per_class: IndexMap<String, ClassMetrics>,
    pub confusion: [[u64; N_CLASSES]; N_CLASSES],
}

impl MetricsReport {
    pub fn from_confusion(cm: &ConfusionMatrix) -> Result<Self> {
        let f1 = f1_scores(cm);
        let per_class = LczClass::ALL
            .iter()
            .map(|c| {
                let i = c.index();
                (
                    c.name(),
                    ClassMetrics {
                        precision: f1.precision[i],
                        recall: f1.recall[i],
                        f1: f1.f1[i],
                        support: f1.support[i],
                    },
                )
            })
            .collect();
        Ok(MetricsReport {
            overall_accuracy: overall_accuracy(cm)?,
            kappa: cohen_kappa(cm)?,
            macro_f1: f1.macro_f1,
            per_class,
            confusion: cm.counts,
        })
    }

    pub fn to_json(&self) -> Result<Vec<u8>> {
        let mut v = serde_json::to_vec_pretty(self)?;
        v.push(b'\n');
        Ok(v)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path.as_ref(), &self.to_json()?)
    }
}

/// Anything that labels patches.
pub trait PatchClassifier: Sync {
    fn classify(&self, patches: &[&Patch]) -> Result<Vec<LczClass>>;
}

impl PatchClassifier for RandomForest {
    fn classify(&self, patches: &[&Patch]) -> Result<Vec<LczClass>> {
        patches.iter().map(|p| self.predict_patch(p)).collect()
    }
}

impl<T: Scalar> PatchClassifier for MscnnModel<T> {
    fn classify(&self, patches: &[&Patch]) -> Result<Vec<LczClass>> {
        if patches.is_empty() {
            return Ok(Vec::new());
        }
        predict(self, patches)
    }
}

impl<T: Scalar> PatchClassifier for TransferModel<T> {
    fn classify(&self, patches: &[&Patch]) -> Result<Vec<LczClass>> {
        self.model.classify(patches)
    }
}

/// Eval-mode predictions over `test`, summarized.
pub fn report(model: &dyn PatchClassifier, test: &SampleSet) -> Result<MetricsReport> {
    if test.is_empty() {
        return Err(Error::Empty("test set is empty".into()));
    }
    let refs: Vec<&Patch> = test.patches.iter().collect();
    let preds = model.classify(&refs)?;
    MetricsReport::from_confusion(&confusion(&preds, &test.labels)?)
}

/// Classifies one patch per output cell. The patch is centered on the pixel
/// at offset `ratio / 2` within the cell (the cell center for even ratios);
/// cells whose patch leaves the grid or touches nodata are nodata. The output
/// keeps the input origin and nodata value, with `cell_size_m` pixels.
pub fn classify_map(model: &dyn PatchClassifier, grid: &RasterGrid, cell_size_m: f64) -> Result<RasterGrid> {
    classify_map_with(model, grid, cell_size_m, DEFAULT_PATCH_SIZE)
}

pub fn classify_map_with(model: &dyn PatchClassifier, grid: &RasterGrid, cell_size_m: f64, patch_size: usize) -> Result<RasterGrid> {
    grid.validate()?;
    let ratio = integer_ratio(cell_size_m, grid.pixel_size_m)?;
    let (out_w, out_h) = (grid.width / ratio, grid.height / ratio);
    if out_w == 0 || out_h == 0 {
        return Err(Error::GeometryMismatch(format!(
            "a {}x{} grid at {} m has no whole {cell_size_m} m cells",
            grid.width, grid.height, grid.pixel_size_m
        )));
    }
    let rows: Vec<Vec<f32>> = (0..out_h)
        .into_par_iter()
        .map(|i| -> Result<Vec<f32>> {
            let mut out = vec![grid.nodata; out_w];
            let mut patches = Vec::with_capacity(out_w);
            let mut cols = Vec::with_capacity(out_w);
            for (j, _) in out.iter().enumerate() {
                match extract_patch(grid, i * ratio + ratio / 2, j * ratio + ratio / 2, patch_size) {
                    Ok(p) => {
                        patches.push(p);
                        cols.push(j);
                    }
                    Err(Error::OutOfBounds(_) | Error::NodataContamination { .. }) => {}
                    Err(e) => return Err(e),
                }
            }
            let refs: Vec<&Patch> = patches.iter().collect();
            for (j, class) in cols.into_iter().zip(model.classify(&refs)?) {
                out[j] = class.code() as f32;
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;
    RasterGrid::new(
        out_w,
        out_h,
        1,
        cell_size_m,
        grid.origin_x,
        grid.origin_y,
        grid.nodata,
        rows.concat(),
    )
}

#[derive(Serialize)]
struct PaletteEntry {
    code: u8,
    name: String,
    description: &'static str,
    color: &'static str,
}

/// Palette sidecar path: `map.json` -> `map.palette.json`.
pub fn palette_path(header_path: &Path) -> std::path::PathBuf {
    header_path.with_extension("palette.json")
}

pub fn palette_json() -> Result<Vec<u8>> {
    let entries: Vec<PaletteEntry> = LczClass::ALL
        .iter()
        .map(|c| PaletteEntry {
            code: c.code(),
            name: c.name(),
            description: c.description(),
            color: c.color(),
        })
        .collect();
    let mut v = serde_json::to_vec_pretty(&entries)?;
    v.push(b'\n');
    Ok(v)
}

/// Writes the class-code map in RAWG form plus its palette sidecar.
pub fn save_map(map: &RasterGrid, header_path: impl AsRef<Path>) -> Result<()> {
    let path = header_path.as_ref();
    crate::raster::save_raster(map, path)?;
    write_atomic(&palette_path(path), &palette_json()?)
}
