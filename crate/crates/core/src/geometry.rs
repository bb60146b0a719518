//! Level-wise range narrowing, bilinear neighbor geometry, the
//! Neighbor-Window bank mapping and the sliding fmap reuse window.

use serde::{Deserialize, Serialize};

use crate::error::{ensure_shape, DefaError, Result};
use crate::tensor::{FmapLayout, LevelShape, Matrix, ModelConfig, ReferencePoints};

/// Number of on-chip SRAM banks feeding the BI lanes.
pub const SRAM_BANKS: usize = 16;

/// Half extents of the sampling window around a reference point, in pixels
/// of the sampled level.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoundedRange {
    pub half_width: usize,
    pub half_height: usize,
}

impl BoundedRange {
    pub const fn new(half_width: usize, half_height: usize) -> Self {
        Self {
            half_width,
            half_height,
        }
    }

    /// `ceil(dim / 8)` per axis, shrunk until the range plus the BI fringe
    /// fits the level.
    pub fn default_for(shape: LevelShape) -> Self {
        Self {
            half_width: default_half(shape.width),
            half_height: default_half(shape.height),
        }
    }

    /// `2·half + 2 ≤ dim` on both axes; a single-pixel axis only admits a
    /// zero half size.
    pub fn fits(&self, shape: LevelShape) -> bool {
        axis_fits(self.half_width, shape.width) && axis_fits(self.half_height, shape.height)
    }

    /// Pixels held on chip for one reference point: `(2hw+2)·(2hh+2)`,
    /// clipped to the level.
    pub fn storage_pixels(&self, shape: LevelShape) -> usize {
        (2 * self.half_width + 2).min(shape.width) * (2 * self.half_height + 2).min(shape.height)
    }
}

fn default_half(dim: usize) -> usize {
    dim.div_ceil(8).min(dim.saturating_sub(2) / 2)
}

fn axis_fits(half: usize, dim: usize) -> bool {
    if dim == 1 {
        half == 0
    } else {
        2 * half + 2 <= dim
    }
}

/// A continuous coordinate inside one level, in pixel units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LevelPoint {
    pub level: usize,
    pub x: f64,
    pub y: f64,
}

/// Pixel-space position of a normalized reference point (pixel centers at
/// integer coordinates).
#[inline]
pub fn reference_in_level(norm: [f64; 2], shape: LevelShape) -> (f64, f64) {
    (norm[0] * shape.width as f64 - 0.5, norm[1] * shape.height as f64 - 0.5)
}

/// [`reference_in_level`] rounded to a `2^-24` pixel grid, so that grid
/// centers of odd-sized levels land exactly on their pixel.
#[inline]
pub fn reference_on_grid(norm: [f64; 2], shape: LevelShape) -> (f64, f64) {
    let (x, y) = reference_in_level(norm, shape);
    (snap_to_grid(x, REFERENCE_FRAC_BITS), snap_to_grid(y, REFERENCE_FRAC_BITS))
}

const REFERENCE_FRAC_BITS: u32 = 24;

/// Saturates a coordinate into `[0, W-1] × [0, H-1]`.
#[inline]
pub fn clamp_into_level(x: f64, y: f64, shape: LevelShape) -> (f64, f64) {
    (x.clamp(0.0, (shape.width - 1) as f64), y.clamp(0.0, (shape.height - 1) as f64))
}

/// Sampling coordinate `reference + offset`, saturated into the bounded
/// range of the reference's level and then into the level itself.
///
/// The reference must already lie inside its level.
pub fn clamp_offset_levelwise(
    reference: LevelPoint,
    offset: (f64, f64),
    ranges: &[BoundedRange],
    shapes: &[LevelShape],
) -> (f64, f64) {
    let r = ranges[reference.level];
    let s = shapes[reference.level];
    let (hw, hh) = (r.half_width as f64, r.half_height as f64);
    let x = (reference.x + offset.0).clamp(reference.x - hw, reference.x + hw);
    let y = (reference.y + offset.1).clamp(reference.y - hh, reference.y + hh);
    clamp_into_level(x, y, s)
}

/// Fixed-point variant of [`clamp_offset_levelwise`]: the coordinate is
/// rounded to a multiple of `2^-frac_bits` and the clamp bounds are pulled
/// inward onto that grid, so the result never leaves the range. The
/// reference must itself lie on the grid.
pub fn clamp_offset_fixed(
    reference: LevelPoint,
    offset: (f64, f64),
    ranges: &[BoundedRange],
    shapes: &[LevelShape],
    frac_bits: u32,
) -> (f64, f64) {
    let r = ranges[reference.level];
    let s = shapes[reference.level];
    let one = (1_u64 << frac_bits) as f64;
    let axis = |c: f64, off: f64, half: usize, dim: usize| {
        let lo = (c - half as f64).max(0.0);
        let hi = (c + half as f64).min((dim - 1) as f64);
        let lo_q = (lo * one).ceil();
        let hi_q = (hi * one).floor();
        ((c + off) * one).round_ties_even().clamp(lo_q, hi_q) / one
    };
    (
        axis(reference.x, offset.0, r.half_width, s.width),
        axis(reference.y, offset.1, r.half_height, s.height),
    )
}

/// Rounds a coordinate to the `2^-frac_bits` grid.
#[inline]
pub fn snap_to_grid(v: f64, frac_bits: u32) -> f64 {
    let one = (1_u64 << frac_bits) as f64;
    (v * one).round_ties_even() / one
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Neighbor {
    pub x: i64,
    pub y: i64,
    pub in_range: bool,
}

/// The four integer neighbors of a sampling point in the order top-left,
/// top-right, bottom-left, bottom-right, plus the fractional weights
/// `t0 = y - y0` and `t1 = x - x0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighborhood {
    pub level: usize,
    pub corners: [Neighbor; 4],
    pub t0: f64,
    pub t1: f64,
}

impl Neighborhood {
    /// Bilinear weights per corner; they sum to one.
    pub fn weights(&self) -> [f64; 4] {
        let (t0, t1) = (self.t0, self.t1);
        [(1.0 - t1) * (1.0 - t0), t1 * (1.0 - t0), (1.0 - t1) * t0, t1 * t0]
    }

    /// Corners that are inside the level and carry non-zero weight.
    pub fn effective(&self) -> impl Iterator<Item = Neighbor> + '_ {
        self.corners
            .iter()
            .zip(self.weights())
            .filter(|(n, w)| n.in_range && *w != 0.0)
            .map(|(n, _)| *n)
    }

    pub fn in_range(&self) -> impl Iterator<Item = Neighbor> + '_ {
        self.corners.iter().copied().filter(|n| n.in_range)
    }

    /// Flat indices of in-range corners.
    pub fn flat_in_range<'a>(&'a self, layout: &'a FmapLayout) -> impl Iterator<Item = usize> + 'a {
        self.in_range()
            .map(move |n| layout.flat_unchecked(self.level, n.y as usize, n.x as usize))
    }
}

pub fn neighbors_of(level: usize, x: f64, y: f64, shape: LevelShape) -> Neighborhood {
    let (fx, fy) = (x.floor(), y.floor());
    let (x0, y0) = (fx as i64, fy as i64);
    let mk = |x: i64, y: i64| Neighbor {
        x,
        y,
        in_range: x >= 0 && y >= 0 && (x as usize) < shape.width && (y as usize) < shape.height,
    };
    Neighborhood {
        level,
        corners: [mk(x0, y0), mk(x0 + 1, y0), mk(x0, y0 + 1), mk(x0 + 1, y0 + 1)],
        t0: y - fy,
        t1: x - fx,
    }
}

/// Bank of pixel `(x0, y0)` of `level` in the 4-level inter-level layout:
/// each level owns four banks and the pixel parity picks one of them.
pub fn bank_of(level: usize, x0: i64, y0: i64) -> Result<usize> {
    if level >= 4 {
        return Err(DefaError::OutOfRange {
            what: "level",
            detail: format!("{level} >= 4 in the 16-bank layout"),
        });
    }
    Ok(4 * level + 2 * y0.rem_euclid(2) as usize + x0.rem_euclid(2) as usize)
}

/// How pixels are spread across the 16 SRAM banks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BankMapping {
    /// `16 / n_levels` banks per level, tiled by coordinate parity.
    InterLevel { n_levels: usize },
    /// Every level uses all 16 banks through a 4×4 parity tile.
    IntraLevel,
}

impl BankMapping {
    pub fn inter_level(n_levels: usize) -> Result<Self> {
        if matches!(n_levels, 1 | 2 | 4) {
            Ok(Self::InterLevel { n_levels })
        } else {
            Err(DefaError::InvalidConfig(format!(
                "{n_levels} levels cannot share {SRAM_BANKS} banks in groups of at least four"
            )))
        }
    }

    #[inline]
    pub fn bank(&self, level: usize, x: i64, y: i64) -> usize {
        match *self {
            Self::IntraLevel => parity_tile(x, y, 4, 4),
            Self::InterLevel { n_levels } => {
                let per_level = SRAM_BANKS / n_levels;
                let (tw, th) = match per_level {
                    4 => (2, 2),
                    8 => (4, 2),
                    _ => (4, 4),
                };
                per_level * level + parity_tile(x, y, tw, th)
            }
        }
    }
}

#[inline]
fn parity_tile(x: i64, y: i64, tile_w: i64, tile_h: i64) -> usize {
    (y.rem_euclid(tile_h) * tile_w + x.rem_euclid(tile_w)) as usize
}

/// Inclusive pixel rectangle inside one level.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PixelRect {
    pub level: usize,
    pub x_min: i64,
    pub y_min: i64,
    pub x_max: i64,
    pub y_max: i64,
}

impl PixelRect {
    pub fn width(&self) -> usize {
        (self.x_max - self.x_min + 1).max(0) as usize
    }

    pub fn height(&self) -> usize {
        (self.y_max - self.y_min + 1).max(0) as usize
    }

    pub fn area(&self) -> usize {
        self.width() * self.height()
    }

    #[inline]
    pub fn contains(&self, level: usize, x: i64, y: i64) -> bool {
        level == self.level && x >= self.x_min && x <= self.x_max && y >= self.y_min && y <= self.y_max
    }

    /// Pixels in row-major order.
    pub fn pixels(&self) -> impl Iterator<Item = (i64, i64)> + '_ {
        (self.y_min..=self.y_max).flat_map(move |y| (self.x_min..=self.x_max).map(move |x| (x, y)))
    }
}

/// Pixels a reference point may touch after range narrowing: the bounded
/// range around the anchor pixel plus the one-pixel BI fringe.
pub fn range_rect(level: usize, reference: (f64, f64), range: BoundedRange, shape: LevelShape) -> PixelRect {
    let (rx, ry) = clamp_into_level(reference.0, reference.1, shape);
    let (rx, ry) = (snap_to_grid(rx, REFERENCE_FRAC_BITS), snap_to_grid(ry, REFERENCE_FRAC_BITS));
    let (ax, ay) = (rx.floor() as i64, ry.floor() as i64);
    let (hw, hh) = (range.half_width as i64, range.half_height as i64);
    PixelRect {
        level,
        x_min: (ax - hw).max(0),
        y_min: (ay - hh).max(0),
        x_max: (ax + hw + 1).min(shape.width as i64 - 1),
        y_max: (ay + hh + 1).min(shape.height as i64 - 1),
    }
}

/// Aligned 2×2 tile `(2a, 2b)..(2a+1, 2b+1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NeighborWindow {
    pub level: usize,
    pub a: i64,
    pub b: i64,
}

impl NeighborWindow {
    pub fn containing(level: usize, x: i64, y: i64) -> Self {
        Self {
            level,
            a: x.div_euclid(2),
            b: y.div_euclid(2),
        }
    }

    pub fn pixels(&self) -> [(i64, i64); 4] {
        let (x, y) = (2 * self.a, 2 * self.b);
        [(x, y), (x + 1, y), (x, y + 1), (x + 1, y + 1)]
    }
}

/// Aligned windows covering `rect`; clipped to the rectangle they partition it.
pub fn neighbor_windows(rect: &PixelRect) -> Vec<NeighborWindow> {
    if rect.area() == 0 {
        return Vec::new();
    }
    let (a0, a1) = (rect.x_min.div_euclid(2), rect.x_max.div_euclid(2));
    let (b0, b1) = (rect.y_min.div_euclid(2), rect.y_max.div_euclid(2));
    (b0..=b1)
        .flat_map(|b| (a0..=a1).map(move |a| NeighborWindow { level: rect.level, a, b }))
        .collect()
}

/// Pixels entering and staying in the on-chip window after a slide.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ReuseDelta {
    pub reused: Vec<usize>,
    pub fetched: Vec<usize>,
}

/// On-chip residency of one level's bounded range as the reference point
/// sweeps the map.
#[derive(Debug, Clone, Default)]
pub struct ReuseWindow {
    current: Option<PixelRect>,
}

impl ReuseWindow {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn current(&self) -> Option<PixelRect> {
        self.current
    }

    /// Moves the window to `next`. A forward slide along a row keeps the
    /// overlap resident; a change of level or row span, or a step backwards,
    /// refills the whole rectangle.
    pub fn advance(&mut self, next: PixelRect, layout: &FmapLayout) -> ReuseDelta {
        let keep = self
            .current
            .filter(|c| c.level == next.level && c.y_min == next.y_min && c.y_max == next.y_max && c.x_min <= next.x_min);
        let mut delta = ReuseDelta::default();
        for (x, y) in next.pixels() {
            let flat = layout.flat_unchecked(next.level, y as usize, x as usize);
            match keep {
                Some(c) if c.contains(next.level, x, y) => delta.reused.push(flat),
                _ => delta.fetched.push(flat),
            }
        }
        self.current = Some(next);
        delta
    }

    /// Flat indices currently held on chip.
    pub fn resident(&self, layout: &FmapLayout) -> Vec<usize> {
        self.current
            .map(|r| {
                r.pixels()
                    .map(|(x, y)| layout.flat_unchecked(r.level, y as usize, x as usize))
                    .collect()
            })
            .unwrap_or_default()
    }
}

/// Everything the datapath needs to know about one sampling point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlannedSample {
    /// Reference point in pixel units of the sampled level.
    pub reference: (f64, f64),
    /// Offset in pixel units of the sampled level.
    pub raw_offset: (f64, f64),
    /// Final sampling coordinate.
    pub coord: (f64, f64),
    pub neighbors: Neighborhood,
}

/// How sampling coordinates are formed from `reference + offset`.
#[derive(Debug, Clone, Copy, Default)]
pub struct PlanOptions<'a> {
    /// Saturate into the level-wise bounded ranges when present.
    pub narrowing: Option<&'a [BoundedRange]>,
    /// Round coordinates to a `2^-bits` fixed-point grid when present.
    pub frac_bits: Option<u32>,
}

/// Sampling points indexed by (query, head, level, point).
#[derive(Debug, Clone)]
pub struct SamplingPlan {
    n_queries: usize,
    n_heads: usize,
    n_levels: usize,
    n_points: usize,
    samples: Vec<PlannedSample>,
}

impl SamplingPlan {
    #[inline]
    pub fn index(&self, q: usize, h: usize, l: usize, p: usize) -> usize {
        ((q * self.n_heads + h) * self.n_levels + l) * self.n_points + p
    }

    #[inline]
    pub fn get(&self, q: usize, h: usize, l: usize, p: usize) -> &PlannedSample {
        &self.samples[self.index(q, h, l, p)]
    }

    pub fn samples(&self) -> &[PlannedSample] {
        &self.samples
    }

    pub fn dims(&self) -> (usize, usize, usize, usize) {
        (self.n_queries, self.n_heads, self.n_levels, self.n_points)
    }
}

/// Column of the offset projection holding the x displacement of
/// (head, level, point); the y displacement follows it.
#[inline]
pub fn offset_column(cfg: &ModelConfig, h: usize, l: usize, p: usize) -> usize {
    ((h * cfg.n_levels() + l) * cfg.n_points + p) * 2
}

/// Builds the sampling plan from an `N_q × 2·N_h·N_l·N_p` offset matrix.
pub fn build_sampling_plan(
    offsets: &Matrix<f64>,
    refs: &ReferencePoints,
    cfg: &ModelConfig,
    opts: PlanOptions<'_>,
) -> Result<SamplingPlan> {
    ensure_shape("offset columns (2·N_h·N_l·N_p)", cfg.offset_cols(), offsets.cols())?;
    ensure_shape("reference point queries", offsets.rows(), refs.n_queries())?;
    ensure_shape("reference point levels", cfg.n_levels(), refs.n_levels())?;
    if let Some(r) = opts.narrowing {
        ensure_shape("bounded ranges", cfg.n_levels(), r.len())?;
    }
    let shapes = &cfg.level_shapes;
    let (nq, nh, nl, np) = (offsets.rows(), cfg.n_heads, cfg.n_levels(), cfg.n_points);
    let mut samples = Vec::with_capacity(nq * nh * nl * np);
    for q in 0..nq {
        let row = offsets.row(q);
        for h in 0..nh {
            for l in 0..nl {
                let shape = shapes[l];
                let reference = match opts.frac_bits {
                    Some(f) => {
                        let (x, y) = reference_on_grid(refs.get(q, l), shape);
                        (snap_to_grid(x, f), snap_to_grid(y, f))
                    }
                    None => reference_in_level(refs.get(q, l), shape),
                };
                for p in 0..np {
                    let c = offset_column(cfg, h, l, p);
                    let (mut dx, mut dy) = (row[c], row[c + 1]);
                    if !cfg.offsets_in_pixels {
                        dx *= shape.width as f64;
                        dy *= shape.height as f64;
                    }
                    if !(dx.is_finite() && dy.is_finite()) {
                        return Err(DefaError::NonFinite(format!("offset of query {q} head {h} level {l} point {p}")));
                    }
                    let (reference, coord) = match (opts.narrowing, opts.frac_bits) {
                        (None, None) => (reference, (reference.0 + dx, reference.1 + dy)),
                        (None, Some(f)) => (
                            reference,
                            (snap_to_grid(reference.0 + dx, f), snap_to_grid(reference.1 + dy, f)),
                        ),
                        (Some(ranges), frac) => {
                            let (rx, ry) = clamp_into_level(reference.0, reference.1, shape);
                            let lp = LevelPoint { level: l, x: rx, y: ry };
                            let coord = match frac {
                                Some(f) => clamp_offset_fixed(lp, (dx, dy), ranges, shapes, f),
                                None => clamp_offset_levelwise(lp, (dx, dy), ranges, shapes),
                            };
                            ((rx, ry), coord)
                        }
                    };
                    samples.push(PlannedSample {
                        reference,
                        raw_offset: (dx, dy),
                        coord,
                        neighbors: neighbors_of(l, coord.0, coord.1, shape),
                    });
                }
            }
        }
    }
    Ok(SamplingPlan {
        n_queries: nq,
        n_heads: nh,
        n_levels: nl,
        n_points: np,
        samples,
    })
}
