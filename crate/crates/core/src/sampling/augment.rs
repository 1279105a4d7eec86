//! Dihedral oversampling of minority classes.

use rand::Rng as _;

use crate::class::N_CLASSES;
use crate::error::{Error, Result};
use crate::raster::Patch;
use crate::rng;
use crate::sampling::SampleSet;

/// One of the eight symmetries of the square.
///
/// Each element is an orthogonal integer matrix acting on pixel coordinates
/// measured from the patch center (x to the right, y downward); composition
/// is matrix multiplication.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Dihedral {
    Identity,
    Rot90,
    Rot180,
    Rot270,
    FlipHorizontal,
    FlipVertical,
    Transpose,
    AntiTranspose,
}

impl Dihedral {
    pub const ALL: [Dihedral; 8] = [
        Dihedral::Identity,
        Dihedral::Rot90,
        Dihedral::Rot180,
        Dihedral::Rot270,
        Dihedral::FlipHorizontal,
        Dihedral::FlipVertical,
        Dihedral::Transpose,
        Dihedral::AntiTranspose,
    ];

    fn matrix(self) -> [[i32; 2]; 2] {
        match self {
            Dihedral::Identity => [[1, 0], [0, 1]],
            // counter-clockwise as displayed (y grows downward)
            Dihedral::Rot90 => [[0, 1], [-1, 0]],
            Dihedral::Rot180 => [[-1, 0], [0, -1]],
            Dihedral::Rot270 => [[0, -1], [1, 0]],
            Dihedral::FlipHorizontal => [[-1, 0], [0, 1]],
            Dihedral::FlipVertical => [[1, 0], [0, -1]],
            Dihedral::Transpose => [[0, 1], [1, 0]],
            Dihedral::AntiTranspose => [[0, -1], [-1, 0]],
        }
    }

    fn from_matrix(m: [[i32; 2]; 2]) -> Dihedral {
        *Dihedral::ALL
            .iter()
            .find(|d| d.matrix() == m)
            .expect("orthogonal integer matrices form the dihedral group")
    }

    /// `self ∘ other`: apply `other` first, then `self`.
    pub fn compose(self, other: Dihedral) -> Dihedral {
        let (a, b) = (self.matrix(), other.matrix());
        let mut m = [[0; 2]; 2];
        for (i, row) in m.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = a[i][0] * b[0][j] + a[i][1] * b[1][j];
            }
        }
        Dihedral::from_matrix(m)
    }

    pub fn inverse(self) -> Dihedral {
        let m = self.matrix();
        Dihedral::from_matrix([[m[0][0], m[1][0]], [m[0][1], m[1][1]]])
    }

    /// Transforms every channel of a square patch identically.
    pub fn apply(self, patch: &Patch) -> Patch {
        let n = patch.size;
        let inv = self.inverse().matrix();
        let last = n as i32 - 1;
        // source index for each destination cell, in doubled centered coordinates
        let mut src = Vec::with_capacity(n * n);
        for row in 0..n as i32 {
            for col in 0..n as i32 {
                let (x, y) = (2 * col - last, 2 * row - last);
                let sx = inv[0][0] * x + inv[0][1] * y;
                let sy = inv[1][0] * x + inv[1][1] * y;
                let (scol, srow) = ((sx + last) / 2, (sy + last) / 2);
                src.push(srow as usize * n + scol as usize);
            }
        }
        let plane = n * n;
        let mut data = Vec::with_capacity(patch.data.len());
        for ch in 0..patch.n_channels {
            let channel = &patch.data[ch * plane..(ch + 1) * plane];
            data.extend(src.iter().map(|&i| channel[i]));
        }
        Patch {
            data,
            ..patch.clone()
        }
    }
}

const NON_IDENTITY: [Dihedral; 7] = [
    Dihedral::Rot90,
    Dihedral::Rot180,
    Dihedral::Rot270,
    Dihedral::FlipHorizontal,
    Dihedral::FlipVertical,
    Dihedral::Transpose,
    Dihedral::AntiTranspose,
];

/// Tops every present class up to `target_per_class` with transformed copies
/// of uniformly drawn original members. Originals are kept unchanged and in
/// place; copies are appended class by class in code order. Classes already at
/// or above the target are untouched, absent classes stay absent.
pub fn augment_rebalance(set: &SampleSet, target_per_class: usize, seed: u64) -> Result<SampleSet> {
    if target_per_class == 0 {
        return Err(Error::InvalidConfig("target_per_class must be at least 1".into()));
    }
    set.validate()?;
    let mut rng = rng::rng(seed);
    let mut out = set.clone();
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); N_CLASSES];
    for (i, label) in set.labels.iter().enumerate() {
        members[label.index()].push(i);
    }
    for (code, idx) in members.iter().enumerate() {
        if idx.is_empty() {
            log::debug!("class code {code} absent; not synthesized");
            continue;
        }
        for _ in idx.len()..target_per_class {
            let source = idx[rng.random_range(0..idx.len())];
            let transform = NON_IDENTITY[rng.random_range(0..NON_IDENTITY.len())];
            let patch = transform.apply(&set.patches[source]);
            let tag = set.split_tags.as_ref().map(|t| t[source]);
            out.push_tagged(patch, set.labels[source], tag)?;
        }
    }
    Ok(out)
}
