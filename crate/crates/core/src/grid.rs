//! Dense descriptor grids and the pixel/cell coordinate conventions shared by
//! every other module.
//!
//! Cell `(row, col)` of a grid with stride `s` has its center at pixel
//! `((col + 0.5)·s, (row + 0.5)·s)`. Descriptors are stored row-major; all dot
//! products accumulate in `f64` regardless of the storage type.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Storage scalar for descriptor grids.
pub trait Real: Copy + Send + Sync + Default + PartialEq + fmt::Debug + 'static {
    fn to_f64(self) -> f64;
    fn from_f64(v: f64) -> Self;
}

impl Real for f32 {
    #[inline]
    fn to_f64(self) -> f64 {
        self as f64
    }
    #[inline]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
}

impl Real for f64 {
    #[inline]
    fn to_f64(self) -> f64 {
        self
    }
    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }
}

/// A location in image pixels.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PixelPoint {
    pub x: f64,
    pub y: f64,
}

impl PixelPoint {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }

    pub fn dist2(&self, other: &PixelPoint) -> f64 {
        let dx = self.x - other.x;
        let dy = self.y - other.y;
        dx * dx + dy * dy
    }

    pub fn dist(&self, other: &PixelPoint) -> f64 {
        self.dist2(other).sqrt()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CellIndex {
    pub row: usize,
    pub col: usize,
}

impl CellIndex {
    pub const fn new(row: usize, col: usize) -> Self {
        Self { row, col }
    }
}

/// Cell lattice geometry: dimensions in cells plus the pixel stride.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Lattice {
    pub height: usize,
    pub width: usize,
    pub stride_px: f64,
}

impl Lattice {
    pub fn new(height: usize, width: usize, stride_px: f64) -> Result<Self> {
        if height < 2 || width < 2 {
            return Err(Error::invalid(format!(
                "lattice must be at least 2x2 cells, got {height}x{width}"
            )));
        }
        if !(stride_px.is_finite() && stride_px > 0.0) {
            return Err(Error::invalid(format!("stride must be positive, got {stride_px}")));
        }
        Ok(Self {
            height,
            width,
            stride_px,
        })
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.height * self.width
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Image extent `(width_px, height_px)` implied by the lattice.
    pub fn extent_px(&self) -> (f64, f64) {
        (
            self.width as f64 * self.stride_px,
            self.height as f64 * self.stride_px,
        )
    }

    pub fn contains_px(&self, p: PixelPoint) -> bool {
        let (w, h) = self.extent_px();
        p.x >= 0.0 && p.x <= w && p.y >= 0.0 && p.y <= h
    }

    #[inline]
    pub fn linear(&self, cell: CellIndex) -> usize {
        cell.row * self.width + cell.col
    }

    #[inline]
    pub fn cell_of(&self, linear: usize) -> CellIndex {
        CellIndex::new(linear / self.width, linear % self.width)
    }

    /// Center of a cell given by its row-major linear index.
    #[inline]
    pub fn center(&self, linear: usize) -> PixelPoint {
        let row = linear / self.width;
        let col = linear % self.width;
        PixelPoint::new(
            (col as f64 + 0.5) * self.stride_px,
            (row as f64 + 0.5) * self.stride_px,
        )
    }

    pub fn cell_to_pixel(&self, cell: CellIndex) -> Result<PixelPoint> {
        if cell.row >= self.height || cell.col >= self.width {
            return Err(Error::invalid(format!(
                "cell ({}, {}) outside {}x{} grid",
                cell.row, cell.col, self.height, self.width
            )));
        }
        Ok(self.center(self.linear(cell)))
    }

    /// Nearest cell center; exact ties go to the lower index. Points beyond the
    /// grid clamp to the border cell.
    pub fn pixel_to_cell(&self, p: PixelPoint) -> Result<CellIndex> {
        if !p.is_finite() {
            return Err(Error::invalid(format!("non-finite pixel ({}, {})", p.x, p.y)));
        }
        let nearest = |v: f64, n: usize| -> usize {
            let t = v / self.stride_px - 0.5;
            let k = (t - 0.5).ceil();
            k.clamp(0.0, (n - 1) as f64) as usize
        };
        Ok(CellIndex::new(
            nearest(p.y, self.height),
            nearest(p.x, self.width),
        ))
    }

    /// The four bilinear taps `(linear index, weight)` for a pixel location.
    /// Locations beyond the outermost centers clamp to the border cells.
    pub fn bilinear_taps(&self, p: PixelPoint) -> Result<[(usize, f64); 4]> {
        if !p.is_finite() {
            return Err(Error::invalid(format!("non-finite pixel ({}, {})", p.x, p.y)));
        }
        if !self.contains_px(p) {
            let (w, h) = self.extent_px();
            return Err(Error::invalid(format!(
                "pixel ({}, {}) outside image extent {w}x{h}",
                p.x, p.y
            )));
        }
        let axis = |v: f64, n: usize| -> (usize, f64) {
            let f = (v / self.stride_px - 0.5).clamp(0.0, (n - 1) as f64);
            let i0 = (f.floor() as usize).min(n - 2);
            (i0, f - i0 as f64)
        };
        let (c0, tx) = axis(p.x, self.width);
        let (r0, ty) = axis(p.y, self.height);
        let w = self.width;
        Ok([
            (r0 * w + c0, (1.0 - ty) * (1.0 - tx)),
            (r0 * w + c0 + 1, (1.0 - ty) * tx),
            ((r0 + 1) * w + c0, ty * (1.0 - tx)),
            ((r0 + 1) * w + c0 + 1, ty * tx),
        ])
    }
}

/// Dense `dim`-dimensional descriptor field on a cell lattice.
#[derive(Clone, PartialEq)]
pub struct FeatureGrid<T: Real = f32> {
    lattice: Lattice,
    dim: usize,
    data: Vec<T>,
    normalized: bool,
    degenerate: Vec<usize>,
}

impl<T: Real> fmt::Debug for FeatureGrid<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("FeatureGrid")
            .field("height", &self.lattice.height)
            .field("width", &self.lattice.width)
            .field("dim", &self.dim)
            .field("stride_px", &self.lattice.stride_px)
            .field("normalized", &self.normalized)
            .finish_non_exhaustive()
    }
}

impl<T: Real> FeatureGrid<T> {
    pub fn new(height: usize, width: usize, dim: usize, stride_px: f64, data: Vec<T>) -> Result<Self> {
        let lattice = Lattice::new(height, width, stride_px)?;
        if dim == 0 {
            return Err(Error::invalid("descriptor dimension must be >= 1"));
        }
        let expected = lattice
            .len()
            .checked_mul(dim)
            .ok_or_else(|| Error::invalid("grid size overflows"))?;
        if data.len() != expected {
            return Err(Error::invalid(format!(
                "descriptor buffer has {} values, expected {expected}",
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.to_f64().is_finite()) {
            return Err(Error::invalid(format!("non-finite descriptor component at {pos}")));
        }
        Ok(Self {
            lattice,
            dim,
            data,
            normalized: false,
            degenerate: Vec::new(),
        })
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        dim: usize,
        stride_px: f64,
        mut f: impl FnMut(usize, usize) -> T,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(height * width * dim);
        for cell in 0..height * width {
            for d in 0..dim {
                data.push(f(cell, d));
            }
        }
        Self::new(height, width, dim, stride_px, data)
    }

    pub fn zeros(height: usize, width: usize, dim: usize, stride_px: f64) -> Result<Self> {
        Self::new(height, width, dim, stride_px, vec![T::default(); height * width * dim])
    }

    pub fn lattice(&self) -> Lattice {
        self.lattice
    }
    pub fn height(&self) -> usize {
        self.lattice.height
    }
    pub fn width(&self) -> usize {
        self.lattice.width
    }
    pub fn dim(&self) -> usize {
        self.dim
    }
    pub fn stride_px(&self) -> f64 {
        self.lattice.stride_px
    }
    pub fn cells(&self) -> usize {
        self.lattice.len()
    }
    pub fn data(&self) -> &[T] {
        &self.data
    }

    /// Raw parameter access for optimizers. Callers must keep values finite.
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    /// Marks the grid as already unit-normalized (e.g. when read from a file
    /// whose header says so).
    pub fn with_normalized_flag(mut self, normalized: bool) -> Self {
        self.normalized = normalized;
        self
    }

    /// Cells whose descriptor was all-zero at normalization time.
    pub fn degenerate_cells(&self) -> &[usize] {
        &self.degenerate
    }

    #[inline]
    pub fn cell(&self, linear: usize) -> &[T] {
        &self.data[linear * self.dim..(linear + 1) * self.dim]
    }

    #[inline]
    pub fn cell_mut(&mut self, linear: usize) -> &mut [T] {
        &mut self.data[linear * self.dim..(linear + 1) * self.dim]
    }

    #[inline]
    pub fn cell_center(&self, linear: usize) -> PixelPoint {
        self.lattice.center(linear)
    }

    pub fn cell_to_pixel(&self, cell: CellIndex) -> Result<PixelPoint> {
        self.lattice.cell_to_pixel(cell)
    }

    pub fn pixel_to_cell(&self, p: PixelPoint) -> Result<CellIndex> {
        self.lattice.pixel_to_cell(p)
    }

    /// `<desc, grid[cell]>` accumulated in f64.
    #[inline]
    pub fn dot_cell(&self, linear: usize, desc: &[f64]) -> f64 {
        self.cell(linear)
            .iter()
            .zip(desc)
            .map(|(a, b)| a.to_f64() * b)
            .sum()
    }

    /// Dot product between two cells of (possibly) different grids.
    #[inline]
    pub fn dot_cells<U: Real>(&self, a: usize, other: &FeatureGrid<U>, b: usize) -> f64 {
        self.cell(a)
            .iter()
            .zip(other.cell(b))
            .map(|(x, y)| x.to_f64() * y.to_f64())
            .sum()
    }

    /// Bilinearly interpolated descriptor at a pixel location.
    pub fn descriptor_at(&self, p: PixelPoint) -> Result<Vec<f64>> {
        let taps = self.lattice.bilinear_taps(p)?;
        let mut out = vec![0.0; self.dim];
        for (idx, w) in taps {
            if w == 0.0 {
                continue;
            }
            for (o, v) in out.iter_mut().zip(self.cell(idx)) {
                *o += w * v.to_f64();
            }
        }
        Ok(out)
    }

    /// Copy with each cell descriptor scaled to unit L2 norm. All-zero cells
    /// stay zero and are recorded in [`degenerate_cells`](Self::degenerate_cells).
    pub fn normalize_descriptors(&self) -> FeatureGrid<T> {
        let mut out = self.clone();
        out.degenerate.clear();
        for cell in 0..self.cells() {
            let desc = out.cell_mut(cell);
            let norm = desc.iter().map(|v| v.to_f64() * v.to_f64()).sum::<f64>().sqrt();
            if norm == 0.0 {
                out.degenerate.push(cell);
                continue;
            }
            for v in desc.iter_mut() {
                *v = T::from_f64(v.to_f64() / norm);
            }
        }
        out.normalized = true;
        out
    }

    /// Score `<src_desc, grid[u]>` at every cell `u`. No softmax.
    pub fn similarity_map(&self, src_desc: &[f64]) -> Result<SimilarityMap> {
        if src_desc.len() != self.dim {
            return Err(Error::invalid(format!(
                "descriptor length {} does not match grid dim {}",
                src_desc.len(),
                self.dim
            )));
        }
        let scores = (0..self.cells()).map(|u| self.dot_cell(u, src_desc)).collect();
        Ok(SimilarityMap {
            lattice: self.lattice,
            scores,
            source_point: None,
        })
    }

    /// Similarity map of the interpolated source descriptor at `p` against `self`.
    pub fn similarity_from<U: Real>(&self, src: &FeatureGrid<U>, p: PixelPoint) -> Result<SimilarityMap> {
        let desc = src.descriptor_at(p)?;
        let mut map = self.similarity_map(&desc)?;
        map.source_point = Some(p);
        Ok(map)
    }

    pub fn cast<U: Real>(&self) -> FeatureGrid<U> {
        FeatureGrid {
            lattice: self.lattice,
            dim: self.dim,
            data: self.data.iter().map(|v| U::from_f64(v.to_f64())).collect(),
            normalized: self.normalized,
            degenerate: self.degenerate.clone(),
        }
    }
}

/// One similarity score per cell of a target lattice.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMap {
    pub lattice: Lattice,
    pub scores: Vec<f64>,
    pub source_point: Option<PixelPoint>,
}

impl SimilarityMap {
    pub fn new(lattice: Lattice, scores: Vec<f64>) -> Result<Self> {
        if scores.len() != lattice.len() {
            return Err(Error::invalid(format!(
                "similarity map has {} scores for a {}-cell lattice",
                scores.len(),
                lattice.len()
            )));
        }
        Ok(Self {
            lattice,
            scores,
            source_point: None,
        })
    }

    /// Highest-scoring cell; ties go to the lowest linear index.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &s) in self.scores.iter().enumerate() {
            if s > self.scores[best] {
                best = i;
            }
        }
        best
    }
}

/// Per-cell byte mask (nonzero = inside).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CellMask {
    pub height: usize,
    pub width: usize,
    pub cells: Vec<u8>,
}

impl CellMask {
    pub fn new(height: usize, width: usize, cells: Vec<u8>) -> Result<Self> {
        if cells.len() != height * width {
            return Err(Error::invalid(format!(
                "mask has {} bytes for {height}x{width} cells",
                cells.len()
            )));
        }
        Ok(Self { height, width, cells })
    }

    #[inline]
    pub fn get(&self, linear: usize) -> bool {
        self.cells[linear] != 0
    }

    pub fn count(&self) -> usize {
        self.cells.iter().filter(|&&c| c != 0).count()
    }
}

/// Axis-aligned box in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub min_x: f64,
    pub min_y: f64,
    pub max_x: f64,
    pub max_y: f64,
}

impl BBox {
    pub fn new(min_x: f64, min_y: f64, max_x: f64, max_y: f64) -> Result<Self> {
        let all_finite = [min_x, min_y, max_x, max_y].iter().all(|v| v.is_finite());
        if !all_finite || max_x <= min_x || max_y <= min_y {
            return Err(Error::DegenerateRegion(format!(
                "bbox ({min_x}, {min_y}, {max_x}, {max_y}) must have max > min on both axes"
            )));
        }
        Ok(Self {
            min_x,
            min_y,
            max_x,
            max_y,
        })
    }

    pub fn contains(&self, p: PixelPoint) -> bool {
        p.x >= self.min_x && p.x <= self.max_x && p.y >= self.min_y && p.y <= self.max_y
    }

    pub fn width(&self) -> f64 {
        self.max_x - self.min_x
    }

    pub fn height(&self) -> f64 {
        self.max_y - self.min_y
    }
}

/// Spatial prior restricting where matches may be mined.
#[derive(Debug, Clone, PartialEq, Default)]
pub enum PixelRegion {
    #[default]
    Full,
    BBox(BBox),
    Mask(CellMask),
}

impl PixelRegion {
    /// Checks that a mask matches the lattice it will be applied to.
    pub fn validate(&self, lattice: &Lattice) -> Result<()> {
        if let PixelRegion::Mask(m) = self {
            if m.height != lattice.height || m.width != lattice.width {
                return Err(Error::invalid(format!(
                    "mask is {}x{} but grid is {}x{}",
                    m.height, m.width, lattice.height, lattice.width
                )));
            }
        }
        Ok(())
    }

    /// Membership of a cell, judged at its center for boxes.
    pub fn contains_cell(&self, lattice: &Lattice, linear: usize) -> bool {
        match self {
            PixelRegion::Full => true,
            PixelRegion::BBox(b) => b.contains(lattice.center(linear)),
            PixelRegion::Mask(m) => m.get(linear),
        }
    }

    /// Membership of an arbitrary pixel; masks are looked up at the nearest cell.
    pub fn contains_point(&self, lattice: &Lattice, p: PixelPoint) -> bool {
        match self {
            PixelRegion::Full => true,
            PixelRegion::BBox(b) => b.contains(p),
            PixelRegion::Mask(m) => match lattice.pixel_to_cell(p) {
                Ok(c) => m.get(lattice.linear(c)),
                Err(_) => false,
            },
        }
    }

    /// Linear indices of member cells, ascending.
    pub fn member_cells(&self, lattice: &Lattice) -> Vec<usize> {
        (0..lattice.len())
            .filter(|&u| self.contains_cell(lattice, u))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid3x3() -> FeatureGrid<f64> {
        FeatureGrid::from_fn(3, 3, 2, 10.0, |c, d| (c * 2 + d) as f64 * 0.5 - 1.0).unwrap()
    }

    #[test]
    fn rejects_small_or_nonfinite_grids() {
        assert!(FeatureGrid::<f32>::zeros(1, 4, 2, 1.0).is_err());
        assert!(FeatureGrid::<f32>::zeros(2, 2, 0, 1.0).is_err());
        assert!(FeatureGrid::<f32>::new(2, 2, 1, 1.0, vec![0.0, 1.0, f32::NAN, 0.0]).is_err());
        assert!(FeatureGrid::<f32>::new(2, 2, 1, 1.0, vec![0.0; 3]).is_err());
    }

    #[test]
    fn descriptor_at_cell_center_is_verbatim() {
        let g = grid3x3();
        for u in 0..9 {
            let d = g.descriptor_at(g.cell_center(u)).unwrap();
            assert_eq!(d, g.cell(u).to_vec());
        }
    }

    #[test]
    fn descriptor_at_midpoint_is_mean() {
        let g = grid3x3();
        let a = g.cell_center(3);
        let b = g.cell_center(4);
        let mid = PixelPoint::new((a.x + b.x) / 2.0, a.y);
        let d = g.descriptor_at(mid).unwrap();
        for k in 0..2 {
            let want = (g.cell(3)[k] + g.cell(4)[k]) / 2.0;
            assert!((d[k] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn descriptor_at_clamps_at_border() {
        let g = grid3x3();
        let corner = g.descriptor_at(PixelPoint::new(0.0, 0.0)).unwrap();
        assert_eq!(corner, g.cell(0).to_vec());
        let far = g.descriptor_at(PixelPoint::new(30.0, 30.0)).unwrap();
        assert_eq!(far, g.cell(8).to_vec());
    }

    #[test]
    fn descriptor_at_rejects_bad_points() {
        let g = grid3x3();
        assert!(g.descriptor_at(PixelPoint::new(f64::NAN, 1.0)).is_err());
        assert!(g.descriptor_at(PixelPoint::new(-1.0, 1.0)).is_err());
    }

    #[test]
    fn normalize_examples() {
        let g = FeatureGrid::<f32>::new(2, 2, 2, 1.0, vec![3.0, 4.0, 1.0, 0.0, 0.0, 0.0, 0.0, 2.0]).unwrap();
        let n = g.normalize_descriptors();
        assert!((n.cell(0)[0] - 0.6).abs() < 1e-7 && (n.cell(0)[1] - 0.8).abs() < 1e-7);
        assert_eq!(n.cell(2), &[0.0, 0.0]);
        assert_eq!(n.degenerate_cells(), &[2]);
        let twice = n.normalize_descriptors();
        for (a, b) in twice.data().iter().zip(n.data()) {
            assert!((a - b).abs() < 1e-6);
        }
        assert!(twice.is_normalized());
    }

    #[test]
    fn similarity_examples() {
        // one-hot basis descriptors: the source matches exactly one cell
        let g = FeatureGrid::<f32>::from_fn(2, 2, 4, 1.0, |c, d| if c == d { 1.0 } else { 0.0 }).unwrap();
        let m = g.similarity_map(&[0.0, 0.0, 1.0, 0.0]).unwrap();
        assert_eq!(m.scores, vec![0.0, 0.0, 1.0, 0.0]);
        let z = g.similarity_map(&[0.0; 4]).unwrap();
        assert!(z.scores.iter().all(|&s| s == 0.0));
        assert!(g.similarity_map(&[1.0; 3]).is_err());
    }

    #[test]
    fn cell_pixel_conventions() {
        let lat = Lattice::new(4, 5, 14.0).unwrap();
        assert_eq!(lat.cell_to_pixel(CellIndex::new(0, 0)).unwrap(), PixelPoint::new(7.0, 7.0));
        assert_eq!(lat.pixel_to_cell(PixelPoint::new(7.0, 7.0)).unwrap(), CellIndex::new(0, 0));
        // halfway between the centers of col 1 (21) and col 2 (35)
        assert_eq!(lat.pixel_to_cell(PixelPoint::new(28.0, 7.0)).unwrap(), CellIndex::new(0, 1));
        assert_eq!(lat.pixel_to_cell(PixelPoint::new(28.0001, 7.0)).unwrap(), CellIndex::new(0, 2));
        assert!(lat.cell_to_pixel(CellIndex::new(4, 0)).is_err());
        assert!(lat.pixel_to_cell(PixelPoint::new(f64::INFINITY, 0.0)).is_err());
        for u in 0..lat.len() {
            let p = lat.center(u);
            assert_eq!(lat.linear(lat.pixel_to_cell(p).unwrap()), u);
        }
    }

    #[test]
    fn region_membership() {
        let lat = Lattice::new(3, 3, 2.0).unwrap();
        let b = PixelRegion::BBox(BBox::new(0.0, 0.0, 3.0, 3.0).unwrap());
        assert_eq!(b.member_cells(&lat), vec![0, 1, 3, 4]);
        let m = PixelRegion::Mask(CellMask::new(3, 3, vec![0, 1, 0, 0, 0, 0, 0, 0, 1]).unwrap());
        assert_eq!(m.member_cells(&lat), vec![1, 8]);
        assert!(m.validate(&Lattice::new(3, 4, 1.0).unwrap()).is_err());
        assert!(BBox::new(1.0, 1.0, 1.0, 2.0).is_err());
    }
}
