//! Frequency-weighted fmap pruning and probability-aware point pruning.
//!
//! Fmap masks are produced while a block samples its feature map and are
//! consumed by the *next* block; point masks are produced and consumed in
//! the same block, right after the softmax.

use std::io::{Read, Write};

use crate::error::{ensure_shape, DefaError, Result};
use crate::geometry::SamplingPlan;
use crate::reference::AttentionProbs;
use crate::tensor::{row_times_matrix, FmapLayout, LevelShape, Matrix, ModelConfig};

/// Per-pixel count of bilinear neighbor accesses, one array per level.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FrequencyMap {
    layout: FmapLayout,
    counts: Vec<u32>,
}

impl FrequencyMap {
    pub fn new(layout: FmapLayout) -> Self {
        let counts = vec![0; layout.len()];
        Self { layout, counts }
    }

    pub fn layout(&self) -> &FmapLayout {
        &self.layout
    }

    #[inline]
    pub fn record(&mut self, flat: usize) {
        self.counts[flat] += 1;
    }

    pub fn level(&self, level: usize) -> &[u32] {
        &self.counts[self.layout.level_range(level)]
    }

    pub fn counts(&self) -> &[u32] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().map(|&c| u64::from(c)).sum()
    }

    /// Sums another partial count over the same layout.
    pub fn merge(&mut self, other: &FrequencyMap) -> Result<()> {
        if other.layout != self.layout {
            return Err(DefaError::InvalidArgument("merging frequency maps of different layouts".into()));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }
}

/// Counts, for every kept sampling point, one access to each in-range
/// bilinear neighbor. Counts are pooled over all queries and heads.
pub fn count_sampled_frequency(plan: &SamplingPlan, point_mask: Option<&PointMask>, layout: &FmapLayout) -> Result<FrequencyMap> {
    let (nq, nh, nl, np) = plan.dims();
    ensure_shape("plan levels", layout.n_levels(), nl)?;
    if let Some(m) = point_mask {
        if m.dims() != (nq, nh, nl, np) {
            return Err(DefaError::InvalidArgument(format!(
                "point mask dims {:?} do not match plan dims {:?}",
                m.dims(),
                (nq, nh, nl, np)
            )));
        }
    }
    let mut freq = FrequencyMap::new(layout.clone());
    for (i, s) in plan.samples().iter().enumerate() {
        if point_mask.is_some_and(|m| !m.bits[i]) {
            continue;
        }
        for flat in s.neighbors.flat_in_range(layout) {
            freq.record(flat);
        }
    }
    Ok(freq)
}

/// `T = k · mean(F)` over the pixels of one level.
pub fn fwp_threshold(counts: &[u32], k: f64) -> Result<f64> {
    if counts.is_empty() {
        return Err(DefaError::InvalidArgument("threshold of an empty level".into()));
    }
    if !(k.is_finite() && k >= 0.0) {
        return Err(DefaError::InvalidArgument(format!("k={k} must be finite and >= 0")));
    }
    let sum: u64 = counts.iter().map(|&c| u64::from(c)).sum();
    Ok(k * (sum as f64 / counts.len() as f64))
}

/// Keep bit per pixel, tagged with the block whose sampling produced it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FmapMask {
    shapes: Vec<LevelShape>,
    bits: Vec<bool>,
    block: u32,
}

impl FmapMask {
    pub fn all_ones(layout: &FmapLayout, block: u32) -> Self {
        Self {
            shapes: layout.shapes().to_vec(),
            bits: vec![true; layout.len()],
            block,
        }
    }

    pub fn from_bits(layout: &FmapLayout, bits: Vec<bool>, block: u32) -> Result<Self> {
        ensure_shape("fmap mask pixels", layout.len(), bits.len())?;
        Ok(Self {
            shapes: layout.shapes().to_vec(),
            bits,
            block,
        })
    }

    #[inline]
    pub fn keep(&self, flat: usize) -> bool {
        self.bits[flat]
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn block(&self) -> u32 {
        self.block
    }

    pub fn shapes(&self) -> &[LevelShape] {
        &self.shapes
    }

    pub fn kept(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn keep_ratio(&self) -> f64 {
        self.kept() as f64 / self.bits.len() as f64
    }

    pub fn level_keep_ratios(&self) -> Vec<f64> {
        let mut start = 0;
        self.shapes
            .iter()
            .map(|s| {
                let lvl = &self.bits[start..start + s.area()];
                start += s.area();
                lvl.iter().filter(|&&b| b).count() as f64 / lvl.len() as f64
            })
            .collect()
    }

    pub fn check_layout(&self, layout: &FmapLayout) -> Result<()> {
        if self.shapes != layout.shapes() {
            return Err(DefaError::InvalidArgument(format!(
                "fmap mask shapes {:?} do not match the model levels {:?}",
                self.shapes,
                layout.shapes()
            )));
        }
        Ok(())
    }
}

/// Applies the FWP rule level by level: pixels with `F < T` are pruned.
pub fn generate_fmap_mask(freq: &FrequencyMap, k: f64, block: u32) -> Result<FmapMask> {
    let layout = freq.layout();
    let mut bits = Vec::with_capacity(layout.len());
    for l in 0..layout.n_levels() {
        let counts = freq.level(l);
        let t = fwp_threshold(counts, k)?;
        bits.extend(counts.iter().map(|&c| f64::from(c) >= t));
    }
    FmapMask::from_bits(layout, bits, block)
}

/// Keep bit per (query, head, level, point).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PointMask {
    n_queries: usize,
    n_heads: usize,
    n_levels: usize,
    n_points: usize,
    bits: Vec<bool>,
    block: u32,
}

impl PointMask {
    pub fn all_ones(n_queries: usize, cfg: &ModelConfig, block: u32) -> Self {
        Self {
            n_queries,
            n_heads: cfg.n_heads,
            n_levels: cfg.n_levels(),
            n_points: cfg.n_points,
            bits: vec![true; n_queries * cfg.attn_cols()],
            block,
        }
    }

    pub fn from_bits(dims: (usize, usize, usize, usize), bits: Vec<bool>, block: u32) -> Result<Self> {
        let (n_queries, n_heads, n_levels, n_points) = dims;
        ensure_shape("point mask entries", n_queries * n_heads * n_levels * n_points, bits.len())?;
        Ok(Self {
            n_queries,
            n_heads,
            n_levels,
            n_points,
            bits,
            block,
        })
    }

    #[inline]
    pub fn keep(&self, q: usize, h: usize, l: usize, p: usize) -> bool {
        self.bits[((q * self.n_heads + h) * self.n_levels + l) * self.n_points + p]
    }

    pub fn dims(&self) -> (usize, usize, usize, usize) {
        (self.n_queries, self.n_heads, self.n_levels, self.n_points)
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn block(&self) -> u32 {
        self.block
    }

    pub fn kept(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn keep_ratio(&self) -> f64 {
        self.kept() as f64 / self.bits.len() as f64
    }

    pub fn kept_in_row(&self, q: usize, h: usize) -> usize {
        let per = self.n_levels * self.n_points;
        let start = (q * self.n_heads + h) * per;
        self.bits[start..start + per].iter().filter(|&&b| b).count()
    }

    pub fn check_dims(&self, n_queries: usize, cfg: &ModelConfig) -> Result<()> {
        let want = (n_queries, cfg.n_heads, cfg.n_levels(), cfg.n_points);
        if self.dims() != want {
            return Err(DefaError::InvalidArgument(format!(
                "point mask dims {:?} do not match (N_q, N_h, N_l, N_p) = {want:?}",
                self.dims()
            )));
        }
        Ok(())
    }
}

/// Prunes points whose probability is below `epsilon`. A row that would lose
/// every point keeps its highest-probability point (first on ties).
pub fn generate_point_mask(probs: &AttentionProbs, epsilon: f64, block: u32) -> Result<PointMask> {
    if !(epsilon.is_finite() && (0.0..1.0).contains(&epsilon)) {
        return Err(DefaError::InvalidArgument(format!("epsilon={epsilon} must lie in [0, 1)")));
    }
    let (nq, nh, nl, np) = probs.dims();
    let mut bits = Vec::with_capacity(nq * nh * nl * np);
    for q in 0..nq {
        for h in 0..nh {
            let row = probs.row(q, h);
            let start = bits.len();
            bits.extend(row.iter().map(|&p| p >= epsilon));
            if !bits[start..].iter().any(|&b| b) {
                let arg = row
                    .iter()
                    .enumerate()
                    .fold(0, |best, (i, &p)| if p > row[best] { i } else { best });
                bits[start + arg] = true;
            }
        }
    }
    PointMask::from_bits((nq, nh, nl, np), bits, block)
}

/// Value projection restricted to kept pixels.
#[derive(Debug, Clone)]
pub struct MaskedProjection {
    /// `N_in × D_in`; pruned rows are zero.
    pub value: Matrix<f64>,
    pub macs: u64,
    pub dense_macs: u64,
}

pub fn apply_fmap_mask_to_projection(fmap: &Matrix<f64>, w_value: &Matrix<f64>, mask: &FmapMask) -> Result<MaskedProjection> {
    ensure_shape("fmap mask pixels", fmap.rows(), mask.len())?;
    ensure_shape("W_V rows", fmap.cols(), w_value.rows())?;
    let mut value = Matrix::zeros(fmap.rows(), w_value.cols());
    let per_row = (fmap.cols() * w_value.cols()) as u64;
    let mut macs = 0;
    for r in 0..fmap.rows() {
        if mask.keep(r) {
            row_times_matrix(fmap.row(r), w_value, value.row_mut(r));
            macs += per_row;
        }
    }
    Ok(MaskedProjection {
        value,
        macs,
        dense_macs: per_row * fmap.rows() as u64,
    })
}

/// Magic bytes opening every mask file.
pub const MASK_MAGIC: [u8; 4] = *b"DFAM";
pub const MASK_FORMAT_VERSION: u16 = 1;

/// Either mask kind, as stored on disk.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum MaskFile {
    Fmap(FmapMask),
    Point { shapes: Vec<LevelShape>, mask: PointMask },
}

/// Writes a mask in the bit-packed format:
///
/// ```text
/// magic "DFAM" | version u16 | kind u8 (0 fmap, 1 point) | reserved u8
/// block u32 | n_levels u32 | (height u32, width u32) per level
/// [point only] n_queries u32 | n_heads u32 | n_points u32
/// n_bits u64 | ceil(n_bits / 8) payload bytes, LSB-first
/// ```
///
/// All integers are little-endian.
pub fn write_mask(out: &mut impl Write, file: &MaskFile) -> Result<()> {
    let (kind, shapes, block, bits): (u8, &[LevelShape], u32, &[bool]) = match file {
        MaskFile::Fmap(m) => (0, &m.shapes, m.block, &m.bits),
        MaskFile::Point { shapes, mask } => (1, shapes, mask.block, &mask.bits),
    };
    out.write_all(&MASK_MAGIC)?;
    out.write_all(&MASK_FORMAT_VERSION.to_le_bytes())?;
    out.write_all(&[kind, 0])?;
    out.write_all(&block.to_le_bytes())?;
    out.write_all(&(shapes.len() as u32).to_le_bytes())?;
    for s in shapes {
        out.write_all(&(s.height as u32).to_le_bytes())?;
        out.write_all(&(s.width as u32).to_le_bytes())?;
    }
    if let MaskFile::Point { mask, .. } = file {
        for v in [mask.n_queries, mask.n_heads, mask.n_points] {
            out.write_all(&(v as u32).to_le_bytes())?;
        }
    }
    out.write_all(&(bits.len() as u64).to_le_bytes())?;
    let mut packed = vec![0_u8; bits.len().div_ceil(8)];
    for (i, _) in bits.iter().enumerate().filter(|(_, &b)| b) {
        packed[i / 8] |= 1 << (i % 8);
    }
    out.write_all(&packed)?;
    Ok(())
}

fn read_u32(input: &mut impl Read) -> Result<u32> {
    let mut b = [0; 4];
    input.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub fn read_mask(input: &mut impl Read) -> Result<MaskFile> {
    let bad = |m: String| DefaError::MaskFormat(m);
    let mut magic = [0; 4];
    input.read_exact(&mut magic)?;
    if magic != MASK_MAGIC {
        return Err(bad(format!("bad magic {magic:?}")));
    }
    let mut v = [0; 2];
    input.read_exact(&mut v)?;
    let version = u16::from_le_bytes(v);
    if version != MASK_FORMAT_VERSION {
        return Err(bad(format!("unsupported format version {version}")));
    }
    let mut kr = [0; 2];
    input.read_exact(&mut kr)?;
    let block = read_u32(input)?;
    let n_levels = read_u32(input)? as usize;
    if n_levels == 0 || n_levels > 64 {
        return Err(bad(format!("implausible level count {n_levels}")));
    }
    let mut shapes = Vec::with_capacity(n_levels);
    for _ in 0..n_levels {
        let h = read_u32(input)? as usize;
        let w = read_u32(input)? as usize;
        shapes.push(LevelShape::new(h, w));
    }
    let layout = FmapLayout::new(&shapes).map_err(|e| bad(e.to_string()))?;
    let point_dims = match kr[0] {
        0 => None,
        1 => {
            let nq = read_u32(input)? as usize;
            let nh = read_u32(input)? as usize;
            let np = read_u32(input)? as usize;
            Some((nq, nh, n_levels, np))
        }
        k => return Err(bad(format!("unknown mask kind {k}"))),
    };
    let mut nb = [0; 8];
    input.read_exact(&mut nb)?;
    let n_bits = u64::from_le_bytes(nb) as usize;
    let expected = match point_dims {
        None => layout.len(),
        Some((nq, nh, nl, np)) => nq * nh * nl * np,
    };
    if n_bits != expected {
        return Err(bad(format!("header announces {n_bits} bits, shapes imply {expected}")));
    }
    let mut packed = vec![0_u8; n_bits.div_ceil(8)];
    input.read_exact(&mut packed)?;
    let bits: Vec<bool> = (0..n_bits).map(|i| packed[i / 8] >> (i % 8) & 1 == 1).collect();
    Ok(match point_dims {
        None => MaskFile::Fmap(FmapMask::from_bits(&layout, bits, block)?),
        Some(dims) => MaskFile::Point {
            shapes,
            mask: PointMask::from_bits(dims, bits, block)?,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{build_sampling_plan, PlanOptions};
    use crate::tensor::ReferencePoints;

    fn level(h: usize, w: usize) -> FmapLayout {
        FmapLayout::new(&[LevelShape::new(h, w)]).unwrap()
    }

    fn single_point_plan(x: f64, y: f64) -> (SamplingPlan, FmapLayout) {
        // One query, one head, one point, 3x3 level; the query's reference
        // is pixel (1,1) and the offset moves it to (x, y).
        let cfg = ModelConfig::new(vec![LevelShape::new(3, 3)], 1, 1, 1);
        let layout = cfg.layout().unwrap();
        let refs = ReferencePoints::new(1, vec![[0.5, 0.5]]).unwrap();
        let offsets = Matrix::from_vec(1, 2, vec![x - 1.0, y - 1.0]).unwrap();
        (build_sampling_plan(&offsets, &refs, &cfg, PlanOptions::default()).unwrap(), layout)
    }

    #[test]
    fn interior_point_counts_four_pixels() {
        let (plan, layout) = single_point_plan(0.4, 1.3);
        let f = count_sampled_frequency(&plan, None, &layout).unwrap();
        assert_eq!(f.counts().iter().filter(|&&c| c == 1).count(), 4);
        assert_eq!(f.counts().iter().filter(|&&c| c == 0).count(), 5);
        assert_eq!(f.counts(), &[0, 0, 0, 1, 1, 0, 1, 1, 0]);
    }

    #[test]
    fn masked_points_do_not_count() {
        let (plan, layout) = single_point_plan(0.4, 1.3);
        let mask = PointMask::from_bits((1, 1, 1, 1), vec![false], 0).unwrap();
        let f = count_sampled_frequency(&plan, Some(&mask), &layout).unwrap();
        assert_eq!(f.total(), 0);
    }

    #[test]
    fn shared_neighborhoods_add_up() {
        let cfg = ModelConfig::new(vec![LevelShape::new(3, 3)], 1, 2, 1);
        let layout = cfg.layout().unwrap();
        let refs = ReferencePoints::new(1, vec![[0.5, 0.5]]).unwrap();
        let offsets = Matrix::from_vec(1, 4, vec![-0.6, 0.3, -0.9, 0.1]).unwrap();
        let plan = build_sampling_plan(&offsets, &refs, &cfg, PlanOptions::default()).unwrap();
        let f = count_sampled_frequency(&plan, None, &layout).unwrap();
        assert_eq!(f.counts(), &[0, 0, 0, 2, 2, 0, 2, 2, 0]);
    }

    #[test]
    fn threshold_examples() {
        let t = fwp_threshold(&[0, 0, 0, 1, 1, 1, 1, 0, 0], 1.0).unwrap();
        assert!((t - 4.0 / 9.0).abs() < 1e-15);
        assert_eq!(fwp_threshold(&[0; 7], 3.0).unwrap(), 0.0);
        assert_eq!(fwp_threshold(&[2, 2, 2, 2], 0.5).unwrap(), 1.0);
        assert!(fwp_threshold(&[], 1.0).is_err());
        assert!(fwp_threshold(&[1], -1.0).is_err());
    }

    #[test]
    fn fmap_mask_examples() {
        let layout = level(3, 3);
        let mut f = FrequencyMap::new(layout.clone());
        for i in [3, 4, 6, 7] {
            f.record(i);
        }
        let m = generate_fmap_mask(&f, 1.0, 5).unwrap();
        assert_eq!(m.bits(), &[false, false, false, true, true, false, true, true, false]);
        assert_eq!(m.block(), 5);
        assert_eq!(generate_fmap_mask(&f, 0.0, 0).unwrap().kept(), 9);

        let mut u = FrequencyMap::new(layout);
        for i in 0..9 {
            for _ in 0..3 {
                u.record(i);
            }
        }
        assert_eq!(generate_fmap_mask(&u, 1.0, 0).unwrap().kept(), 9);
    }

    fn probs(rows: &[&[f64]]) -> AttentionProbs {
        let per = rows[0].len();
        AttentionProbs::new(rows.len(), 1, 1, per, rows.concat()).unwrap()
    }

    #[test]
    fn point_mask_examples() {
        let p = probs(&[&[0.7, 0.2, 0.05, 0.05]]);
        assert_eq!(generate_point_mask(&p, 0.1, 0).unwrap().bits(), &[true, true, false, false]);
        assert_eq!(generate_point_mask(&p, 0.0, 0).unwrap().kept(), 4);
        let u = probs(&[&[0.25; 4]]);
        assert_eq!(generate_point_mask(&u, 0.125, 0).unwrap().kept(), 4);
        assert!(generate_point_mask(&p, 1.0, 0).is_err());
        assert!(generate_point_mask(&p, -0.1, 0).is_err());
    }

    #[test]
    fn point_mask_keeps_argmax_of_flat_rows() {
        let p = probs(&[&[0.3, 0.4, 0.3], &[0.5, 0.25, 0.25]]);
        let m = generate_point_mask(&p, 0.9, 0).unwrap();
        assert_eq!(m.bits(), &[false, true, false, true, false, false]);
    }

    #[test]
    fn projection_mac_accounting() {
        let x = Matrix::from_fn(10, 4, |r, c| (r * 4 + c) as f64);
        let w = Matrix::from_fn(4, 4, |r, c| if r == c { 2.0 } else { 0.5 });
        let layout = level(2, 5);
        let dense = apply_fmap_mask_to_projection(&x, &w, &FmapMask::all_ones(&layout, 0)).unwrap();
        assert_eq!(dense.value, x.matmul(&w).unwrap());
        assert_eq!(dense.macs, dense.dense_macs);

        let mut bits = vec![false; 10];
        bits[3] = true;
        let one = apply_fmap_mask_to_projection(&x, &w, &FmapMask::from_bits(&layout, bits, 0).unwrap()).unwrap();
        assert_eq!(one.macs, 16);
        assert!(one.value.row(0).iter().all(|&v| v == 0.0));
        assert_eq!(one.value.row(3), dense.value.row(3));
    }

    #[test]
    fn mask_file_rejects_garbage() {
        assert!(read_mask(&mut &b"NOPE\x01\x00"[..]).is_err());
        let layout = level(2, 2);
        let mut buf = Vec::new();
        write_mask(&mut buf, &MaskFile::Fmap(FmapMask::all_ones(&layout, 1))).unwrap();
        buf[6] = 9;
        assert!(matches!(read_mask(&mut buf.as_slice()), Err(DefaError::MaskFormat(_))));
        buf[6] = 0;
        buf.pop();
        assert!(read_mask(&mut buf.as_slice()).is_err());
    }
}
