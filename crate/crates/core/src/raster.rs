//! Multi-band raster grids, the RAWG v1 on-disk format, and patch extraction.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::class::LczClass;
use crate::error::{Error, Result};
use crate::io_util::{f32s_to_le, le_to_f32s, read_file, write_atomic};

pub const DEFAULT_NODATA: f32 = -9999.0;
pub const DEFAULT_PATCH_SIZE: usize = 32;

/// A georeferenced, band-sequential grid of `f32` cells.
///
/// `origin_x`/`origin_y` are the map coordinates of the top-left corner of
/// pixel (0, 0); rows run southward (y decreases with row).
#[derive(Clone, Debug, PartialEq)]
pub struct RasterGrid {
    pub width: usize,
    pub height: usize,
    pub n_bands: usize,
    pub pixel_size_m: f64,
    pub origin_x: f64,
    pub origin_y: f64,
    pub nodata: f32,
    pub data: Vec<f32>,
}

impl RasterGrid {
    /// Builds a grid and checks every invariant.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        width: usize,
        height: usize,
        n_bands: usize,
        pixel_size_m: f64,
        origin_x: f64,
        origin_y: f64,
        nodata: f32,
        data: Vec<f32>,
    ) -> Result<Self> {
        let grid = RasterGrid {
            width,
            height,
            n_bands,
            pixel_size_m,
            origin_x,
            origin_y,
            nodata,
            data,
        };
        grid.validate()?;
        Ok(grid)
    }

    /// A grid filled with `value`, origin (0, 0) unless changed afterwards.
    pub fn filled(width: usize, height: usize, n_bands: usize, pixel_size_m: f64, value: f32) -> Self {
        RasterGrid {
            width,
            height,
            n_bands,
            pixel_size_m,
            origin_x: 0.0,
            origin_y: 0.0,
            nodata: DEFAULT_NODATA,
            data: vec![value; width * height * n_bands],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 || self.n_bands == 0 {
            return Err(Error::MalformedRaster(format!(
                "dimensions must be positive, got {}x{}x{}",
                self.width, self.height, self.n_bands
            )));
        }
        if !(self.pixel_size_m > 0.0 && self.pixel_size_m.is_finite()) {
            return Err(Error::MalformedRaster(format!(
                "pixel size must be positive, got {}",
                self.pixel_size_m
            )));
        }
        if !self.nodata.is_finite() {
            return Err(Error::MalformedRaster("nodata must be finite".into()));
        }
        let expected = self.width * self.height * self.n_bands;
        if self.data.len() != expected {
            return Err(Error::MalformedRaster(format!(
                "data length {} != {}x{}x{}",
                self.data.len(),
                self.width,
                self.height,
                self.n_bands
            )));
        }
        if let Some(i) = self
            .data
            .iter()
            .position(|&v| !v.is_finite() && v != self.nodata)
        {
            return Err(Error::MalformedRaster(format!("non-finite value at cell {i}")));
        }
        Ok(())
    }

    pub fn band_len(&self) -> usize {
        self.width * self.height
    }

    pub fn band(&self, band: usize) -> &[f32] {
        let n = self.band_len();
        &self.data[band * n..(band + 1) * n]
    }

    pub fn band_mut(&mut self, band: usize) -> &mut [f32] {
        let n = self.band_len();
        &mut self.data[band * n..(band + 1) * n]
    }

    #[inline]
    pub fn get(&self, band: usize, row: usize, col: usize) -> f32 {
        self.data[(band * self.height + row) * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, band: usize, row: usize, col: usize, value: f32) {
        self.data[(band * self.height + row) * self.width + col] = value;
    }

    #[inline]
    pub fn is_nodata(&self, v: f32) -> bool {
        v == self.nodata
    }

    /// Same geometry (size, pixel size, origin); band count may differ.
    pub fn same_geometry(&self, other: &RasterGrid) -> bool {
        self.width == other.width
            && self.height == other.height
            && self.pixel_size_m == other.pixel_size_m
            && self.origin_x == other.origin_x
            && self.origin_y == other.origin_y
    }

    /// A single-band grid with this grid's geometry.
    pub fn with_band_data(&self, data: Vec<f32>) -> RasterGrid {
        debug_assert_eq!(data.len(), self.band_len());
        RasterGrid {
            n_bands: 1,
            data,
            ..self.clone_geometry()
        }
    }

    fn clone_geometry(&self) -> RasterGrid {
        RasterGrid {
            width: self.width,
            height: self.height,
            n_bands: self.n_bands,
            pixel_size_m: self.pixel_size_m,
            origin_x: self.origin_x,
            origin_y: self.origin_y,
            nodata: self.nodata,
            data: Vec::new(),
        }
    }

    pub fn select_band(&self, band: usize) -> Result<RasterGrid> {
        if band >= self.n_bands {
            return Err(Error::BandOutOfRange {
                index: band,
                n_bands: self.n_bands,
            });
        }
        Ok(self.with_band_data(self.band(band).to_vec()))
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawgHeader {
    magic: String,
    version: u32,
    width: usize,
    height: usize,
    bands: usize,
    pixel_size_m: f64,
    origin_x: f64,
    origin_y: f64,
    nodata: f32,
    dtype: String,
    interleave: String,
}

/// The payload lives next to the header with a `.bin` extension.
pub fn payload_path(header_path: &Path) -> PathBuf {
    header_path.with_extension("bin")
}

pub fn load_raster(header_path: impl AsRef<Path>) -> Result<RasterGrid> {
    let header_path = header_path.as_ref();
    let header_bytes = read_file(header_path)?;
    let header: RawgHeader = serde_json::from_slice(&header_bytes)
        .map_err(|e| Error::MalformedRaster(format!("bad header: {e}")))?;
    if header.magic != "RAWG" || header.version != 1 {
        return Err(Error::MalformedRaster(format!(
            "unsupported magic/version {:?}/{}",
            header.magic, header.version
        )));
    }
    if header.dtype != "f32le" || header.interleave != "bsq" {
        return Err(Error::MalformedRaster(format!(
            "unsupported dtype/interleave {}/{}",
            header.dtype, header.interleave
        )));
    }
    let payload = read_file(&payload_path(header_path))?;
    let expected = header
        .width
        .checked_mul(header.height)
        .and_then(|v| v.checked_mul(header.bands))
        .and_then(|v| v.checked_mul(4))
        .ok_or_else(|| Error::MalformedRaster("header dimensions overflow".into()))?;
    if payload.len() != expected {
        return Err(Error::MalformedRaster(format!(
            "payload has {} bytes, header needs {expected}",
            payload.len()
        )));
    }
    RasterGrid::new(
        header.width,
        header.height,
        header.bands,
        header.pixel_size_m,
        header.origin_x,
        header.origin_y,
        header.nodata,
        le_to_f32s(&payload),
    )
}

pub fn save_raster(grid: &RasterGrid, header_path: impl AsRef<Path>) -> Result<()> {
    let header_path = header_path.as_ref();
    let header = RawgHeader {
        magic: "RAWG".into(),
        version: 1,
        width: grid.width,
        height: grid.height,
        bands: grid.n_bands,
        pixel_size_m: grid.pixel_size_m,
        origin_x: grid.origin_x,
        origin_y: grid.origin_y,
        nodata: grid.nodata,
        dtype: "f32le".into(),
        interleave: "bsq".into(),
    };
    let mut payload = Vec::new();
    f32s_to_le(&grid.data, &mut payload);
    write_atomic(&payload_path(header_path), &payload)?;
    let mut json = serde_json::to_vec_pretty(&header)?;
    json.push(b'\n');
    write_atomic(header_path, &json)
}

/// Normalized difference `(nir - red) / (nir + red)` as a single band.
///
/// Cells where either input is nodata or the denominator is zero become
/// nodata. Results are clamped to [-1, 1], which only matters for inputs of
/// mixed sign.
pub fn compute_ndvi(grid: &RasterGrid, nir_band: usize, red_band: usize) -> Result<RasterGrid> {
    for index in [nir_band, red_band] {
        if index >= grid.n_bands {
            return Err(Error::BandOutOfRange {
                index,
                n_bands: grid.n_bands,
            });
        }
    }
    let out = grid
        .band(nir_band)
        .iter()
        .zip(grid.band(red_band))
        .map(|(&nir, &red)| {
            if grid.is_nodata(nir) || grid.is_nodata(red) {
                return grid.nodata;
            }
            let (n, r) = (nir as f64, red as f64);
            let sum = n + r;
            if sum == 0.0 {
                return grid.nodata;
            }
            ((n - r) / sum).clamp(-1.0, 1.0) as f32
        })
        .collect();
    Ok(grid.with_band_data(out))
}

/// Block-mean downsampling to `target_pixel_size_m`, which must be an integer
/// multiple of the current pixel size. Nodata cells are ignored; blocks with
/// no valid cell become nodata. Trailing partial blocks are dropped.
pub fn resample_mean(grid: &RasterGrid, target_pixel_size_m: f64) -> Result<RasterGrid> {
    let k = integer_ratio(target_pixel_size_m, grid.pixel_size_m)?;
    let (ow, oh) = (grid.width / k, grid.height / k);
    if ow == 0 || oh == 0 {
        return Err(Error::GeometryMismatch(format!(
            "{}x{} grid is smaller than one {k}x{k} block",
            grid.width, grid.height
        )));
    }
    let mut data = Vec::with_capacity(ow * oh * grid.n_bands);
    for b in 0..grid.n_bands {
        for orow in 0..oh {
            for ocol in 0..ow {
                let mut sum = 0.0f64;
                let mut n = 0usize;
                for r in orow * k..(orow + 1) * k {
                    for c in ocol * k..(ocol + 1) * k {
                        let v = grid.get(b, r, c);
                        if !grid.is_nodata(v) {
                            sum += v as f64;
                            n += 1;
                        }
                    }
                }
                data.push(if n == 0 { grid.nodata } else { (sum / n as f64) as f32 });
            }
        }
    }
    Ok(RasterGrid {
        width: ow,
        height: oh,
        n_bands: grid.n_bands,
        pixel_size_m: grid.pixel_size_m * k as f64,
        origin_x: grid.origin_x,
        origin_y: grid.origin_y,
        nodata: grid.nodata,
        data,
    })
}

/// `target / base` as a positive integer, or an error if it is not one.
pub fn integer_ratio(target: f64, base: f64) -> Result<usize> {
    let ratio = target / base;
    let k = ratio.round();
    if !(k >= 1.0) || (ratio - k).abs() > 1e-9 * k {
        return Err(Error::GeometryMismatch(format!(
            "{target} m is not an integer multiple of {base} m"
        )));
    }
    Ok(k as usize)
}

/// A `size x size x n_channels` sample, channel-major and row-major within a channel.
#[derive(Clone, Debug, PartialEq)]
pub struct Patch {
    pub size: usize,
    pub n_channels: usize,
    pub data: Vec<f32>,
    pub center_row: usize,
    pub center_col: usize,
    pub label: Option<LczClass>,
}

impl Patch {
    pub fn new(size: usize, n_channels: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != size * size * n_channels {
            return Err(Error::ShapeMismatch(format!(
                "patch data length {} != {size}x{size}x{n_channels}",
                data.len()
            )));
        }
        Ok(Patch {
            size,
            n_channels,
            data,
            center_row: 0,
            center_col: 0,
            label: None,
        })
    }

    #[inline]
    pub fn get(&self, channel: usize, row: usize, col: usize) -> f32 {
        self.data[(channel * self.size + row) * self.size + col]
    }

    pub fn channel(&self, channel: usize) -> &[f32] {
        let n = self.size * self.size;
        &self.data[channel * n..(channel + 1) * n]
    }
}

/// Top-left corner of the half-open window `[center - size/2, center + size/2)`,
/// or `None` if any part of it falls outside a `height x width` grid.
pub fn window_origin(
    height: usize,
    width: usize,
    center_row: usize,
    center_col: usize,
    size: usize,
) -> Option<(usize, usize)> {
    let half = size / 2;
    let r0 = center_row.checked_sub(half)?;
    let c0 = center_col.checked_sub(half)?;
    (r0 + size <= height && c0 + size <= width).then_some((r0, c0))
}

/// Cuts the window centered on (`center_row`, `center_col`) out of every band.
pub fn extract_patch(grid: &RasterGrid, center_row: usize, center_col: usize, size: usize) -> Result<Patch> {
    if size == 0 || !size.is_multiple_of(2) {
        return Err(Error::InvalidConfig(format!("patch size must be even and positive, got {size}")));
    }
    let (r0, c0) = window_origin(grid.height, grid.width, center_row, center_col, size).ok_or_else(|| {
        Error::OutOfBounds(format!(
            "window of {size} around ({center_row}, {center_col}) leaves the {}x{} grid",
            grid.height, grid.width
        ))
    })?;
    let mut data = Vec::with_capacity(size * size * grid.n_bands);
    for b in 0..grid.n_bands {
        for r in 0..size {
            let start = (b * grid.height + r0 + r) * grid.width + c0;
            let row = &grid.data[start..start + size];
            if let Some(c) = row.iter().position(|&v| grid.is_nodata(v)) {
                return Err(Error::NodataContamination {
                    channel: b,
                    row: r0 + r,
                    col: c0 + c,
                });
            }
            data.extend_from_slice(row);
        }
    }
    Ok(Patch {
        size,
        n_channels: grid.n_bands,
        data,
        center_row,
        center_col,
        label: None,
    })
}

/// Pixel containing map point (`x`, `y`).
pub fn map_point_to_pixel(grid: &RasterGrid, x: f64, y: f64) -> Result<(usize, usize)> {
    let col = ((x - grid.origin_x) / grid.pixel_size_m).floor();
    let row = ((grid.origin_y - y) / grid.pixel_size_m).floor();
    let inside = col >= 0.0 && row >= 0.0 && col < grid.width as f64 && row < grid.height as f64;
    if !inside {
        return Err(Error::OutsideExtent { x, y });
    }
    Ok((row as usize, col as usize))
}

/// Map coordinates of the center of pixel (`row`, `col`).
pub fn pixel_center(grid: &RasterGrid, row: usize, col: usize) -> (f64, f64) {
    (
        grid.origin_x + (col as f64 + 0.5) * grid.pixel_size_m,
        grid.origin_y - (row as f64 + 0.5) * grid.pixel_size_m,
    )
}
