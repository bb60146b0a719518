//! Dense containers, the multi-scale flattening layout, model configuration
//! and symmetric fixed-point quantization.
//!
//! Feature maps are flattened level-major, then row-major inside a level:
//! pixel `(l, y, x)` lives at `offset(l) + y * W_l + x`.

use serde::{Deserialize, Serialize};

use crate::error::{ensure_shape, DefaError, Result};
use crate::geometry::BoundedRange;

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Copy + Default> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![T::default(); rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        ensure_shape("matrix buffer length", rows * cols, data.len())?;
        Ok(Self { rows, cols, data })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> T {
        self.data[row * self.cols + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, value: T) {
        self.data[row * self.cols + col] = value;
    }

    #[inline]
    pub fn row(&self, row: usize) -> &[T] {
        &self.data[row * self.cols..(row + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, row: usize) -> &mut [T] {
        &mut self.data[row * self.cols..(row + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }
}

impl Matrix<f64> {
    pub fn identity(n: usize) -> Self {
        Self::from_fn(n, n, |r, c| if r == c { 1.0 } else { 0.0 })
    }

    /// `self · rhs`, accumulating each output in inner-index order.
    pub fn matmul(&self, rhs: &Matrix<f64>) -> Result<Matrix<f64>> {
        ensure_shape("matmul inner dimension", self.cols, rhs.rows)?;
        let mut out = Matrix::zeros(self.rows, rhs.cols);
        for r in 0..self.rows {
            row_times_matrix(self.row(r), rhs, out.row_mut(r));
        }
        Ok(out)
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }
}

/// `out = lhs_row · rhs`. Shared by the dense and the masked projections so
/// both produce identical bits for a kept row.
pub(crate) fn row_times_matrix(lhs_row: &[f64], rhs: &Matrix<f64>, out: &mut [f64]) {
    out.iter_mut().for_each(|v| *v = 0.0);
    for (k, &a) in lhs_row.iter().enumerate() {
        let w = rhs.row(k);
        for (o, &b) in out.iter_mut().zip(w) {
            *o += a * b;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LevelShape {
    pub height: usize,
    pub width: usize,
}

impl LevelShape {
    pub const fn new(height: usize, width: usize) -> Self {
        Self { height, width }
    }

    pub const fn area(&self) -> usize {
        self.height * self.width
    }
}

/// Declared ordering of the pyramid levels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LevelOrder {
    /// Level 0 is the largest map.
    #[default]
    FinestFirst,
    /// Level 0 is the smallest map.
    CoarsestFirst,
}

/// Level-major flattening of a multi-scale feature map.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FmapLayout {
    shapes: Vec<LevelShape>,
    offsets: Vec<usize>,
    len: usize,
}

impl FmapLayout {
    pub fn new(shapes: &[LevelShape]) -> Result<Self> {
        if shapes.is_empty() {
            return Err(DefaError::InvalidConfig("at least one level is required".into()));
        }
        let mut offsets = Vec::with_capacity(shapes.len());
        let mut len = 0;
        for (l, s) in shapes.iter().enumerate() {
            if s.height == 0 || s.width == 0 {
                return Err(DefaError::InvalidConfig(format!(
                    "level {l} has an empty shape {}x{}",
                    s.height, s.width
                )));
            }
            offsets.push(len);
            len += s.area();
        }
        Ok(Self {
            shapes: shapes.to_vec(),
            offsets,
            len,
        })
    }

    /// Total pixel count `N_in`.
    #[inline]
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    #[inline]
    pub fn n_levels(&self) -> usize {
        self.shapes.len()
    }

    #[inline]
    pub fn shape(&self, level: usize) -> LevelShape {
        self.shapes[level]
    }

    pub fn shapes(&self) -> &[LevelShape] {
        &self.shapes
    }

    #[inline]
    pub fn level_offset(&self, level: usize) -> usize {
        self.offsets[level]
    }

    pub fn level_range(&self, level: usize) -> std::ops::Range<usize> {
        let start = self.offsets[level];
        start..start + self.shapes[level].area()
    }

    pub fn flat_index(&self, level: usize, y: usize, x: usize) -> Result<usize> {
        if level >= self.shapes.len() {
            return Err(DefaError::OutOfRange {
                what: "level",
                detail: format!("{level} >= {}", self.shapes.len()),
            });
        }
        let s = self.shapes[level];
        if y >= s.height || x >= s.width {
            return Err(DefaError::OutOfRange {
                what: "pixel coordinate",
                detail: format!("(y={y}, x={x}) outside {}x{} at level {level}", s.height, s.width),
            });
        }
        Ok(self.offsets[level] + y * s.width + x)
    }

    /// Unchecked variant for coordinates already known to be in range.
    #[inline]
    pub(crate) fn flat_unchecked(&self, level: usize, y: usize, x: usize) -> usize {
        self.offsets[level] + y * self.shapes[level].width + x
    }

    /// Inverse of [`FmapLayout::flat_index`]: returns `(level, y, x)`.
    pub fn unflatten(&self, flat: usize) -> Result<(usize, usize, usize)> {
        if flat >= self.len {
            return Err(DefaError::OutOfRange {
                what: "flat index",
                detail: format!("{flat} >= {}", self.len),
            });
        }
        let level = self.offsets.partition_point(|&o| o <= flat) - 1;
        let local = flat - self.offsets[level];
        let w = self.shapes[level].width;
        Ok((level, local / w, local % w))
    }
}

/// Static description of one deformable attention layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub level_shapes: Vec<LevelShape>,
    #[serde(default)]
    pub level_order: LevelOrder,
    pub n_heads: usize,
    pub n_points: usize,
    pub d_in: usize,
    pub quant_bits: u32,
    pub bounded_ranges: Vec<BoundedRange>,
    pub fwp_k: f64,
    pub pap_epsilon: f64,
    /// Offsets are pixel displacements of the sampled level when true,
    /// fractions of the level size otherwise.
    pub offsets_in_pixels: bool,
}

pub const DEFAULT_QUANT_BITS: u32 = 12;
pub const DEFAULT_PAP_EPSILON: f64 = 1e-2;
pub const DEFAULT_FWP_K: f64 = 1.0;

impl ModelConfig {
    /// Configuration with default bounded ranges and pruning knobs.
    pub fn new(level_shapes: Vec<LevelShape>, n_heads: usize, n_points: usize, d_in: usize) -> Self {
        let bounded_ranges = level_shapes.iter().map(|s| BoundedRange::default_for(*s)).collect();
        Self {
            level_shapes,
            level_order: LevelOrder::FinestFirst,
            n_heads,
            n_points,
            d_in,
            quant_bits: DEFAULT_QUANT_BITS,
            bounded_ranges,
            fwp_k: DEFAULT_FWP_K,
            pap_epsilon: DEFAULT_PAP_EPSILON,
            offsets_in_pixels: true,
        }
    }

    #[inline]
    pub fn n_levels(&self) -> usize {
        self.level_shapes.len()
    }

    #[inline]
    pub fn head_dim(&self) -> usize {
        self.d_in / self.n_heads
    }

    /// Sampling points per (query, head): `N_l · N_p`.
    #[inline]
    pub fn points_per_head(&self) -> usize {
        self.n_levels() * self.n_points
    }

    /// Columns of the attention-logit projection: `N_h · N_l · N_p`.
    #[inline]
    pub fn attn_cols(&self) -> usize {
        self.n_heads * self.points_per_head()
    }

    /// Columns of the offset projection: `2 · N_h · N_l · N_p`.
    #[inline]
    pub fn offset_cols(&self) -> usize {
        2 * self.attn_cols()
    }

    pub fn n_in(&self) -> usize {
        self.level_shapes.iter().map(LevelShape::area).sum()
    }

    pub fn layout(&self) -> Result<FmapLayout> {
        FmapLayout::new(&self.level_shapes)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(DefaError::InvalidConfig(m));
        if self.level_shapes.is_empty() {
            return bad("at least one level is required".into());
        }
        FmapLayout::new(&self.level_shapes)?;
        if self.n_heads == 0 || self.n_points == 0 || self.d_in == 0 {
            return bad(format!(
                "counts must be positive (n_heads={}, n_points={}, d_in={})",
                self.n_heads, self.n_points, self.d_in
            ));
        }
        if !self.d_in.is_multiple_of(self.n_heads) {
            return bad(format!("d_in={} is not divisible by n_heads={}", self.d_in, self.n_heads));
        }
        if !(4..=16).contains(&self.quant_bits) {
            return bad(format!("quant_bits={} outside [4, 16]", self.quant_bits));
        }
        let areas: Vec<usize> = self.level_shapes.iter().map(LevelShape::area).collect();
        let ordered = match self.level_order {
            LevelOrder::FinestFirst => areas.windows(2).all(|w| w[0] >= w[1]),
            LevelOrder::CoarsestFirst => areas.windows(2).all(|w| w[0] <= w[1]),
        };
        if !ordered {
            return bad(format!("level areas {areas:?} do not follow {:?}", self.level_order));
        }
        if self.bounded_ranges.len() != self.level_shapes.len() {
            return bad(format!(
                "{} bounded ranges for {} levels",
                self.bounded_ranges.len(),
                self.level_shapes.len()
            ));
        }
        for (l, (r, s)) in self.bounded_ranges.iter().zip(&self.level_shapes).enumerate() {
            if !r.fits(*s) {
                return bad(format!(
                    "bounded range {}x{} (half sizes) does not fit level {l} of {}x{}",
                    r.half_width, r.half_height, s.width, s.height
                ));
            }
        }
        if !(self.fwp_k.is_finite() && self.fwp_k >= 0.0) {
            return bad(format!("fwp_k={} must be finite and >= 0", self.fwp_k));
        }
        if !(self.pap_epsilon.is_finite() && (0.0..1.0).contains(&self.pap_epsilon)) {
            return bad(format!("pap_epsilon={} must lie in [0, 1)", self.pap_epsilon));
        }
        Ok(())
    }
}

/// Signed symmetric fixed-point tensor: `real ≈ value · scale`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantTensor {
    pub values: Vec<i32>,
    pub scale: f64,
    pub shape: Vec<usize>,
    pub bits: u32,
}

/// Largest representable magnitude for a signed `bits`-wide integer.
#[inline]
pub fn qmax(bits: u32) -> i64 {
    (1_i64 << (bits - 1)) - 1
}

impl QuantTensor {
    pub fn dequantize(&self) -> Vec<f64> {
        self.values.iter().map(|&v| f64::from(v) * self.scale).collect()
    }

    /// Value `i` widened for integer accumulation.
    #[inline]
    pub fn at(&self, i: usize) -> i64 {
        i64::from(self.values[i])
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Per-tensor symmetric quantization with round-half-to-even.
///
/// `scale = max_abs / (2^(bits-1) - 1)`; an all-zero tensor gets `scale = 1`.
pub fn quantize(tensor: &[f64], shape: &[usize], bits: u32) -> Result<QuantTensor> {
    if !(4..=16).contains(&bits) {
        return Err(DefaError::InvalidArgument(format!("bits={bits} outside [4, 16]")));
    }
    ensure_shape("quantize shape product", shape.iter().product(), tensor.len())?;
    if let Some(i) = tensor.iter().position(|v| !v.is_finite()) {
        return Err(DefaError::NonFinite(format!("quantize input at element {i}")));
    }
    let q = qmax(bits);
    let max_abs = tensor.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    let (scale, values) = if max_abs == 0.0 {
        (1.0, vec![0; tensor.len()])
    } else {
        let qf = q as f64;
        let values = tensor
            .iter()
            .map(|&v| ((v * qf) / max_abs).round_ties_even().clamp(-qf, qf) as i32)
            .collect();
        (max_abs / qf, values)
    };
    Ok(QuantTensor {
        values,
        scale,
        shape: shape.to_vec(),
        bits,
    })
}

pub fn quantize_matrix(m: &Matrix<f64>, bits: u32) -> Result<QuantTensor> {
    quantize(m.as_slice(), &[m.rows(), m.cols()], bits)
}

/// Multi-scale feature map: an `N_in × D` matrix together with its layout.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiScaleFmap {
    layout: FmapLayout,
    data: Matrix<f64>,
}

impl MultiScaleFmap {
    pub fn new(layout: FmapLayout, data: Matrix<f64>) -> Result<Self> {
        ensure_shape("feature map rows (N_in)", layout.len(), data.rows())?;
        Ok(Self { layout, data })
    }

    pub fn layout(&self) -> &FmapLayout {
        &self.layout
    }

    pub fn matrix(&self) -> &Matrix<f64> {
        &self.data
    }

    pub fn pixel(&self, level: usize, y: usize, x: usize) -> Result<&[f64]> {
        Ok(self.data.row(self.layout.flat_index(level, y, x)?))
    }
}

/// Normalized reference points, one `(x, y)` pair per (query, level).
#[derive(Debug, Clone, PartialEq)]
pub struct ReferencePoints {
    n_levels: usize,
    points: Vec<[f64; 2]>,
}

impl ReferencePoints {
    pub fn new(n_levels: usize, points: Vec<[f64; 2]>) -> Result<Self> {
        if n_levels == 0 || !points.len().is_multiple_of(n_levels) {
            return Err(DefaError::InvalidArgument(format!(
                "{} reference points do not divide into {n_levels} levels",
                points.len()
            )));
        }
        if points.iter().flatten().any(|v| !v.is_finite()) {
            return Err(DefaError::NonFinite("reference points".into()));
        }
        Ok(Self { n_levels, points })
    }

    /// Normalized pixel centers of every flattened position, replicated
    /// across levels.
    pub fn grid_centers(layout: &FmapLayout) -> Self {
        let n_levels = layout.n_levels();
        let mut points = Vec::with_capacity(layout.len() * n_levels);
        for l in 0..n_levels {
            let s = layout.shape(l);
            for y in 0..s.height {
                for x in 0..s.width {
                    let c = [(x as f64 + 0.5) / s.width as f64, (y as f64 + 0.5) / s.height as f64];
                    points.extend(std::iter::repeat_n(c, n_levels));
                }
            }
        }
        Self { n_levels, points }
    }

    pub fn n_queries(&self) -> usize {
        self.points.len() / self.n_levels
    }

    pub fn n_levels(&self) -> usize {
        self.n_levels
    }

    #[inline]
    pub fn get(&self, query: usize, level: usize) -> [f64; 2] {
        self.points[query * self.n_levels + level]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_layout() -> FmapLayout {
        FmapLayout::new(&[LevelShape::new(2, 2), LevelShape::new(1, 1)]).unwrap()
    }

    #[test]
    fn flat_index_examples() {
        let layout = small_layout();
        assert_eq!(layout.flat_index(0, 0, 0).unwrap(), 0);
        assert_eq!(layout.flat_index(1, 0, 0).unwrap(), 4);
        assert_eq!(layout.flat_index(0, 1, 1).unwrap(), 3);
    }

    #[test]
    fn flat_index_rejects_out_of_range() {
        let layout = small_layout();
        assert!(layout.flat_index(0, 2, 0).is_err());
        assert!(layout.flat_index(1, 0, 1).is_err());
        assert!(layout.flat_index(2, 0, 0).is_err());
        assert!(layout.unflatten(5).is_err());
    }

    #[test]
    fn flat_index_is_bijective_on_small_shapes() {
        let shapes = [LevelShape::new(3, 5), LevelShape::new(2, 3), LevelShape::new(1, 2), LevelShape::new(1, 1)];
        let layout = FmapLayout::new(&shapes).unwrap();
        let mut seen = vec![false; layout.len()];
        for (l, s) in shapes.iter().enumerate() {
            for y in 0..s.height {
                for x in 0..s.width {
                    let f = layout.flat_index(l, y, x).unwrap();
                    assert!(!seen[f]);
                    seen[f] = true;
                    assert_eq!(layout.unflatten(f).unwrap(), (l, y, x));
                }
            }
        }
        assert!(seen.into_iter().all(|s| s));
    }

    #[test]
    fn quantize_examples() {
        let q = quantize(&[2047.0, -2047.0], &[2], 12).unwrap();
        assert_eq!(q.values, vec![2047, -2047]);
        assert_eq!(q.scale, 1.0);

        let q = quantize(&[0.0; 5], &[5], 12).unwrap();
        assert_eq!(q.values, vec![0; 5]);
        assert_eq!(q.scale, 1.0);

        let q = quantize(&[1.0, 0.5, -1.0], &[3], 12).unwrap();
        assert_eq!(q.values, vec![2047, 1024, -2047]);
        assert_eq!(q.scale, 1.0 / 2047.0);
    }

    #[test]
    fn quantize_rejects_bad_input() {
        assert!(matches!(quantize(&[1.0, f64::NAN], &[2], 12), Err(DefaError::NonFinite(_))));
        assert!(quantize(&[1.0, f64::INFINITY], &[2], 12).is_err());
        assert!(quantize(&[1.0], &[1], 3).is_err());
        assert!(quantize(&[1.0], &[1], 17).is_err());
        assert!(quantize(&[1.0, 2.0], &[3], 12).is_err());
    }

    #[test]
    fn config_validation() {
        let shapes = vec![LevelShape::new(8, 8), LevelShape::new(4, 4)];
        let mut cfg = ModelConfig::new(shapes, 2, 2, 8);
        cfg.validate().unwrap();
        assert_eq!(cfg.n_in(), 80);
        assert_eq!(cfg.head_dim(), 4);
        cfg.d_in = 7;
        assert!(cfg.validate().is_err());
        cfg.d_in = 8;
        cfg.pap_epsilon = 1.0;
        assert!(cfg.validate().is_err());
        cfg.pap_epsilon = 0.0;
        cfg.level_order = LevelOrder::CoarsestFirst;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn grid_centers_are_pixel_centers() {
        let layout = small_layout();
        let refs = ReferencePoints::grid_centers(&layout);
        assert_eq!(refs.n_queries(), 5);
        assert_eq!(refs.get(0, 0), [0.25, 0.25]);
        assert_eq!(refs.get(3, 1), [0.75, 0.75]);
        assert_eq!(refs.get(4, 0), [0.5, 0.5]);
    }
}
