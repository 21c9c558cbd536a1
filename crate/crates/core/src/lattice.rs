//! Pixel lattice geometry, sparse labels and the per-pixel fields that live on it.
//!
//! Pixels are addressed by a row-major linear index `i = y * width + x`.

use arrayvec::ArrayVec;

use crate::error::{Error, Result};

/// Boundary scores are clamped to this value at ingestion. `exp(-50)` is
/// already an impassable wall for every practical purpose.
pub const B_MAX: f64 = 50.0;

/// Tolerance on the row sums of a [`LabelField`].
pub const SIMPLEX_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct GridLattice {
    width: usize,
    height: usize,
}

impl GridLattice {
    pub fn new(width: usize, height: usize) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidLattice { width, height });
        }
        width
            .checked_mul(height)
            .ok_or(Error::InvalidLattice { width, height })?;
        Ok(Self { width, height })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn num_pixels(&self) -> usize {
        self.width * self.height
    }

    pub fn index(&self, x: usize, y: usize) -> Result<usize> {
        if x >= self.width || y >= self.height {
            return Err(Error::PixelOutOfRange {
                index: y.saturating_mul(self.width).saturating_add(x),
                width: self.width,
                height: self.height,
            });
        }
        Ok(y * self.width + x)
    }

    pub fn coords(&self, index: usize) -> Result<(usize, usize)> {
        self.check(index)?;
        Ok((index % self.width, index / self.width))
    }

    pub fn check(&self, index: usize) -> Result<()> {
        if index >= self.num_pixels() {
            return Err(Error::PixelOutOfRange {
                index,
                width: self.width,
                height: self.height,
            });
        }
        Ok(())
    }

    /// In-grid 4-neighbors of `index`, ordered up, down, left, right.
    pub fn neighbors(&self, index: usize) -> Result<ArrayVec<usize, 4>> {
        self.check(index)?;
        Ok(self.neighbors_unchecked(index))
    }

    pub(crate) fn neighbors_unchecked(&self, index: usize) -> ArrayVec<usize, 4> {
        let (x, y) = (index % self.width, index / self.width);
        let mut out = ArrayVec::new();
        if y > 0 {
            out.push(index - self.width);
        }
        if y + 1 < self.height {
            out.push(index + self.width);
        }
        if x > 0 {
            out.push(index - 1);
        }
        if x + 1 < self.width {
            out.push(index + 1);
        }
        out
    }

    /// Splits the lattice into labeled and unlabeled pixels, both ascending.
    pub fn partition(&self, labels: &SparseLabels) -> Result<(Vec<usize>, Vec<usize>)> {
        let classes = labels.per_pixel(self)?;
        let (labeled, unlabeled): (Vec<usize>, Vec<usize>) =
            (0..self.num_pixels()).partition(|&i| classes[i].is_some());
        Ok((labeled, unlabeled))
    }
}

/// A sparse labeling: at most one class per pixel, classes dense in `0..num_classes`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SparseLabels {
    num_classes: usize,
    /// Sorted by pixel index.
    entries: Vec<(usize, usize)>,
}

impl SparseLabels {
    /// Builds a labeling from `(pixel, class)` pairs. Pixel range is checked
    /// later against a lattice, see [`SparseLabels::validate`].
    pub fn new(num_classes: usize, entries: impl IntoIterator<Item = (usize, usize)>) -> Result<Self> {
        if num_classes == 0 {
            return Err(Error::InvalidParameter("numClasses must be at least 1".into()));
        }
        let mut indexed: Vec<(usize, (usize, usize))> = entries.into_iter().enumerate().collect();
        for &(entry, (pixel, class)) in &indexed {
            if class >= num_classes {
                return Err(Error::InvalidLabel {
                    entry,
                    pixel,
                    class,
                    reason: "class id out of range",
                });
            }
        }
        indexed.sort_by_key(|&(_, (pixel, _))| pixel);
        for pair in indexed.windows(2) {
            if pair[0].1 .0 == pair[1].1 .0 {
                let (entry, (pixel, class)) = pair[1];
                return Err(Error::InvalidLabel {
                    entry,
                    pixel,
                    class,
                    reason: "pixel labeled more than once",
                });
            }
        }
        Ok(Self {
            num_classes,
            entries: indexed.into_iter().map(|(_, e)| e).collect(),
        })
    }

    /// Builds a labeling from arbitrary external class ids, remapping them to
    /// dense ids in ascending order. Returns the labeling and the mapping
    /// `dense id -> external id`.
    pub fn from_external(entries: &[(usize, i64)]) -> Result<(Self, Vec<i64>)> {
        let mut ids: Vec<i64> = entries.iter().map(|&(_, c)| c).collect();
        ids.sort_unstable();
        ids.dedup();
        let dense = entries.iter().map(|&(pixel, c)| {
            let class = ids.binary_search(&c).expect("id collected above");
            (pixel, class)
        });
        let labels = Self::new(ids.len().max(1), dense)?;
        Ok((labels, ids))
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn entries(&self) -> &[(usize, usize)] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn validate(&self, lattice: &GridLattice) -> Result<()> {
        for (entry, &(pixel, class)) in self.entries.iter().enumerate() {
            if pixel >= lattice.num_pixels() {
                return Err(Error::InvalidLabel {
                    entry,
                    pixel,
                    class,
                    reason: "pixel outside the lattice",
                });
            }
        }
        Ok(())
    }

    /// Dense per-pixel view: `Some(class)` at labeled pixels.
    pub fn per_pixel(&self, lattice: &GridLattice) -> Result<Vec<Option<usize>>> {
        self.validate(lattice)?;
        let mut out = vec![None; lattice.num_pixels()];
        for &(pixel, class) in &self.entries {
            out[pixel] = Some(class);
        }
        Ok(out)
    }
}

/// Nonnegative per-pixel boundary scores, clamped to [`B_MAX`].
#[derive(Debug, Clone, PartialEq)]
pub struct BoundaryField {
    values: Vec<f64>,
}

impl BoundaryField {
    /// Rejects negative or non-finite scores; clamps scores above [`B_MAX`]
    /// with a warning.
    pub fn new(mut values: Vec<f64>) -> Result<Self> {
        let mut clamped = 0usize;
        for (pixel, v) in values.iter_mut().enumerate() {
            if !v.is_finite() || *v < 0.0 {
                return Err(Error::InvalidBoundary { pixel, value: *v });
            }
            if *v > B_MAX {
                *v = B_MAX;
                clamped += 1;
            }
        }
        if clamped > 0 {
            log::warn!("{clamped} boundary scores above {B_MAX} were clamped");
        }
        Ok(Self { values })
    }

    pub fn zeros(lattice: &GridLattice) -> Self {
        Self {
            values: vec![0.0; lattice.num_pixels()],
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub(crate) fn check_shape(&self, lattice: &GridLattice) -> Result<()> {
        if self.values.len() != lattice.num_pixels() {
            return Err(Error::ShapeMismatch(format!(
                "boundary field has {} values, lattice has {} pixels",
                self.values.len(),
                lattice.num_pixels()
            )));
        }
        Ok(())
    }
}

/// Per-pixel distributions over `num_classes` labels, stored pixel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelField {
    num_classes: usize,
    probs: Vec<f64>,
}

impl LabelField {
    pub fn new(num_classes: usize, probs: Vec<f64>) -> Result<Self> {
        if num_classes == 0 || !probs.len().is_multiple_of(num_classes) {
            return Err(Error::ShapeMismatch(format!(
                "{} probabilities cannot be split into rows of {num_classes}",
                probs.len()
            )));
        }
        for (pixel, row) in probs.chunks_exact(num_classes).enumerate() {
            check_simplex(pixel, row)?;
        }
        Ok(Self { num_classes, probs })
    }

    pub fn uniform(num_pixels: usize, num_classes: usize) -> Self {
        Self {
            num_classes,
            probs: vec![1.0 / num_classes as f64; num_pixels * num_classes],
        }
    }

    /// One-hot field from a dense labeling.
    pub fn one_hot(num_classes: usize, labels: &[usize]) -> Result<Self> {
        let mut probs = vec![0.0; labels.len() * num_classes];
        for (pixel, &class) in labels.iter().enumerate() {
            if class >= num_classes {
                return Err(Error::InvalidParameter(format!(
                    "class {class} at pixel {pixel} exceeds {num_classes} classes"
                )));
            }
            probs[pixel * num_classes + class] = 1.0;
        }
        Ok(Self { num_classes, probs })
    }

    pub(crate) fn from_rows_unchecked(num_classes: usize, probs: Vec<f64>) -> Self {
        debug_assert_eq!(probs.len() % num_classes, 0);
        Self { num_classes, probs }
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn num_pixels(&self) -> usize {
        self.probs.len() / self.num_classes
    }

    pub fn pixel(&self, index: usize) -> &[f64] {
        &self.probs[index * self.num_classes..(index + 1) * self.num_classes]
    }

    pub fn rows(&self) -> std::slice::ChunksExact<'_, f64> {
        self.probs.chunks_exact(self.num_classes)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.probs
    }

    /// Per-pixel argmax, lowest class id on ties.
    pub fn map_labels(&self) -> Vec<usize> {
        self.rows().map(argmax).collect()
    }
}

pub(crate) fn check_simplex(pixel: usize, row: &[f64]) -> Result<()> {
    if let Some(v) = row.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
        return Err(Error::NotSimplex {
            pixel,
            reason: format!("entry {v} is negative or not finite"),
        });
    }
    let sum: f64 = row.iter().sum();
    if (sum - 1.0).abs() > SIMPLEX_TOL {
        return Err(Error::NotSimplex {
            pixel,
            reason: format!("entries sum to {sum}"),
        });
    }
    Ok(())
}

pub(crate) fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (l, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = l;
        }
    }
    best
}
