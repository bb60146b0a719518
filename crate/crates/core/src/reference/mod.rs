//! Golden functional model of multi-scale deformable attention.
//!
//! For every query `i` and head `j`:
//!
//! ```text
//! V  = X · W_V          ΔP = Q · W_S
//! H_ij = Σ_k softmax(Q_i · W_A,j)_k · bilinear(V_j, P_i + ΔP_ijk)
//! ```
//!
//! and the head outputs are concatenated head-major. Out-of-range bilinear
//! neighbors read as zero. [`quantized`] holds the fixed-point variant that
//! the simulator reproduces bit for bit.

pub mod quantized;

use std::ops::{Add, Mul, Range, Sub};

use crate::error::{ensure_shape, DefaError, Result};
use crate::geometry::{build_sampling_plan, BoundedRange, PlanOptions, SamplingPlan};
use crate::pruning::{apply_fmap_mask_to_projection, FmapMask, PointMask};
use crate::tensor::{FmapLayout, LevelShape, Matrix, ModelConfig, ReferencePoints};

/// Learnable projections of one attention layer.
///
/// `attn` is `D_in × (N_h·N_l·N_p)`: one logit per sampling point.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightSet {
    pub attn: Matrix<f64>,
    pub value: Matrix<f64>,
    pub offset: Matrix<f64>,
}

impl WeightSet {
    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        ensure_shape("W_A rows (D_in)", cfg.d_in, self.attn.rows())?;
        ensure_shape("W_A cols (N_h·N_l·N_p)", cfg.attn_cols(), self.attn.cols())?;
        ensure_shape("W_V rows (D_in)", cfg.d_in, self.value.rows())?;
        ensure_shape("W_V cols (D_in)", cfg.d_in, self.value.cols())?;
        ensure_shape("W_S rows (D_in)", cfg.d_in, self.offset.rows())?;
        ensure_shape("W_S cols (2·N_h·N_l·N_p)", cfg.offset_cols(), self.offset.cols())?;
        Ok(())
    }
}

/// Softmax outputs, one `N_l·N_p` row per (query, head), level-major.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionProbs {
    n_queries: usize,
    n_heads: usize,
    n_levels: usize,
    n_points: usize,
    data: Vec<f64>,
}

impl AttentionProbs {
    pub fn new(n_queries: usize, n_heads: usize, n_levels: usize, n_points: usize, data: Vec<f64>) -> Result<Self> {
        ensure_shape("attention probabilities", n_queries * n_heads * n_levels * n_points, data.len())?;
        Ok(Self {
            n_queries,
            n_heads,
            n_levels,
            n_points,
            data,
        })
    }

    /// Row-wise softmax of an `N_q × (N_h·N_l·N_p)` logit matrix.
    pub fn from_logits(logits: &Matrix<f64>, cfg: &ModelConfig) -> Result<Self> {
        ensure_shape("logit columns (N_h·N_l·N_p)", cfg.attn_cols(), logits.cols())?;
        let per = cfg.points_per_head();
        let mut data = Vec::with_capacity(logits.rows() * cfg.attn_cols());
        for q in 0..logits.rows() {
            for chunk in logits.row(q).chunks(per) {
                data.extend(softmax(chunk)?);
            }
        }
        Self::new(logits.rows(), cfg.n_heads, cfg.n_levels(), cfg.n_points, data)
    }

    pub fn dims(&self) -> (usize, usize, usize, usize) {
        (self.n_queries, self.n_heads, self.n_levels, self.n_points)
    }

    pub fn per_head(&self) -> usize {
        self.n_levels * self.n_points
    }

    pub fn row(&self, q: usize, h: usize) -> &[f64] {
        let per = self.per_head();
        let start = (q * self.n_heads + h) * per;
        &self.data[start..start + per]
    }

    #[inline]
    pub fn get(&self, q: usize, h: usize, l: usize, p: usize) -> f64 {
        self.data[((q * self.n_heads + h) * self.n_levels + l) * self.n_points + p]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }
}

/// Numerically stable softmax (max-subtracted).
pub fn softmax(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.is_empty() {
        return Err(DefaError::InvalidArgument("softmax of an empty vector".into()));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(DefaError::NonFinite("softmax logits".into()));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / sum).collect())
}

/// Channel slice of one level of a flattened feature map.
#[derive(Debug, Clone)]
pub struct LevelView<'a> {
    shape: LevelShape,
    fmap: &'a Matrix<f64>,
    offset: usize,
    channels: Range<usize>,
}

impl<'a> LevelView<'a> {
    pub fn new(fmap: &'a Matrix<f64>, layout: &FmapLayout, level: usize, channels: Range<usize>) -> Result<Self> {
        ensure_shape("feature map rows (N_in)", layout.len(), fmap.rows())?;
        if level >= layout.n_levels() || channels.end > fmap.cols() || channels.start > channels.end {
            return Err(DefaError::OutOfRange {
                what: "level view",
                detail: format!("level {level}, channels {channels:?} of {}", fmap.cols()),
            });
        }
        Ok(Self {
            shape: layout.shape(level),
            fmap,
            offset: layout.level_offset(level),
            channels,
        })
    }

    pub fn shape(&self) -> LevelShape {
        self.shape
    }

    pub fn width(&self) -> usize {
        self.channels.len()
    }

    /// Pixel channels, or `None` outside the level (zero padding).
    #[inline]
    pub fn pixel(&self, x: i64, y: i64) -> Option<&'a [f64]> {
        if x < 0 || y < 0 || x as usize >= self.shape.width || y as usize >= self.shape.height {
            return None;
        }
        let row = self.offset + y as usize * self.shape.width + x as usize;
        Some(&self.fmap.row(row)[self.channels.clone()])
    }
}

/// Bilinear interpolation in the four-product form:
/// `S = N0(x1-x)(y1-y) + N1(x-x0)(y1-y) + N2(x1-x)(y-y0) + N3(x-x0)(y-y0)`.
pub fn bilinear_sample(view: &LevelView<'_>, x: f64, y: f64) -> Result<Vec<f64>> {
    if !(x.is_finite() && y.is_finite()) {
        return Err(DefaError::NonFinite(format!("sampling coordinate ({x}, {y})")));
    }
    let (x0, y0) = (x.floor(), y.floor());
    let (x1, y1) = (x0 + 1.0, y0 + 1.0);
    let (ix, iy) = (x0 as i64, y0 as i64);
    let corners = [
        (view.pixel(ix, iy), (x1 - x) * (y1 - y)),
        (view.pixel(ix + 1, iy), (x - x0) * (y1 - y)),
        (view.pixel(ix, iy + 1), (x1 - x) * (y - y0)),
        (view.pixel(ix + 1, iy + 1), (x - x0) * (y - y0)),
    ];
    let mut out = vec![0.0; view.width()];
    for (c, o) in out.iter_mut().enumerate() {
        *o = corners
            .iter()
            .map(|(px, w)| px.map_or(0.0, |p| p[c]) * w)
            .fold(0.0, |a, b| a + b);
    }
    Ok(out)
}

/// Factored bilinear interpolation on one channel:
/// `S = N0 + (N2-N0)·t0 + [(N1-N0) + (N3-N2-N1+N0)·t0]·t1`.
///
/// Exactly three multiplies and seven add/subtracts.
#[inline]
pub fn fused_bi<T>(n: [T; 4], t0: T, t1: T) -> T
where
    T: Clone + Add<Output = T> + Sub<Output = T> + Mul<Output = T>,
{
    let [n0, n1, n2, n3] = n;
    let right = n1 - n0.clone();
    let down = n2.clone() - n0.clone();
    let cross = (n3 - n2) - right.clone();
    let column = n0 + down * t0.clone();
    let slope = right + cross * t0;
    column + slope * t1
}

/// Vector form of [`fused_bi`]; `t0 = y - y0`, `t1 = x - x0`, both in `[0, 1)`.
pub fn bilinear_sample_fused(corners: [&[f64]; 4], t0: f64, t1: f64) -> Result<Vec<f64>> {
    if !((0.0..1.0).contains(&t0) && (0.0..1.0).contains(&t1)) {
        return Err(DefaError::OutOfRange {
            what: "interpolation fraction",
            detail: format!("t0={t0}, t1={t1} must lie in [0, 1)"),
        });
    }
    let d = corners[0].len();
    for c in &corners[1..] {
        ensure_shape("bilinear corner width", d, c.len())?;
    }
    Ok((0..d)
        .map(|c| fused_bi([corners[0][c], corners[1][c], corners[2][c], corners[3][c]], t0, t1))
        .collect())
}

/// `Σ_k probs[k] · values[k]`, accumulated in `k` order.
pub fn aggregate<V: AsRef<[f64]>>(probs: &[f64], values: &[V]) -> Result<Vec<f64>> {
    ensure_shape("aggregation inputs", probs.len(), values.len())?;
    let Some(first) = values.first() else {
        return Err(DefaError::InvalidArgument("aggregation over zero points".into()));
    };
    let d = first.as_ref().len();
    let mut out = vec![0.0; d];
    for (p, v) in probs.iter().zip(values) {
        let v = v.as_ref();
        ensure_shape("sampling value width", d, v.len())?;
        for (o, &s) in out.iter_mut().zip(v) {
            *o += p * s;
        }
    }
    Ok(out)
}

/// Optional pieces of the accelerated dataflow applied to the reference.
#[derive(Debug, Clone, Copy, Default)]
pub struct AttnOptions<'a> {
    /// Level-wise bounded ranges; `None` samples at the raw `P + ΔP`.
    pub narrowing: Option<&'a [BoundedRange]>,
    /// Pruned points contribute nothing to the aggregation.
    pub point_mask: Option<&'a PointMask>,
    /// Pruned pixels have zero value vectors.
    pub fmap_mask: Option<&'a FmapMask>,
}

/// Intermediate results of one float forward pass.
#[derive(Debug, Clone)]
pub struct AttnTrace {
    pub probs: AttentionProbs,
    pub plan: SamplingPlan,
    /// Value projection `V` (pruned rows zeroed).
    pub value: Matrix<f64>,
    /// Sampling values, `D_h` per (query, head, level, point); zero for
    /// pruned points.
    pub samples: Vec<f64>,
    pub output: Matrix<f64>,
}

impl AttnTrace {
    pub fn sample(&self, idx: usize, head_dim: usize) -> &[f64] {
        &self.samples[idx * head_dim..(idx + 1) * head_dim]
    }
}

pub(crate) fn check_inputs(
    query: &Matrix<f64>,
    fmap: &Matrix<f64>,
    refs: &ReferencePoints,
    weights: &WeightSet,
    cfg: &ModelConfig,
    opts: &AttnOptions<'_>,
) -> Result<FmapLayout> {
    cfg.validate()?;
    let layout = cfg.layout()?;
    ensure_shape("query rows (N_in)", layout.len(), query.rows())?;
    ensure_shape("query cols (D_in)", cfg.d_in, query.cols())?;
    ensure_shape("fmap rows (N_in)", layout.len(), fmap.rows())?;
    ensure_shape("fmap cols (D_in)", cfg.d_in, fmap.cols())?;
    ensure_shape("reference point queries", query.rows(), refs.n_queries())?;
    ensure_shape("reference point levels (N_l)", cfg.n_levels(), refs.n_levels())?;
    weights.validate(cfg)?;
    if let Some(m) = opts.fmap_mask {
        m.check_layout(&layout)?;
    }
    if let Some(m) = opts.point_mask {
        m.check_dims(query.rows(), cfg)?;
    }
    if query.as_slice().iter().chain(fmap.as_slice()).any(|v| !v.is_finite()) {
        return Err(DefaError::NonFinite("query or feature map".into()));
    }
    Ok(layout)
}

pub fn msdeform_attn_traced(
    query: &Matrix<f64>,
    fmap: &Matrix<f64>,
    refs: &ReferencePoints,
    weights: &WeightSet,
    cfg: &ModelConfig,
    opts: &AttnOptions<'_>,
) -> Result<AttnTrace> {
    let layout = check_inputs(query, fmap, refs, weights, cfg, opts)?;
    let value = match opts.fmap_mask {
        Some(mask) => apply_fmap_mask_to_projection(fmap, &weights.value, mask)?.value,
        None => fmap.matmul(&weights.value)?,
    };
    let offsets = query.matmul(&weights.offset)?;
    let probs = AttentionProbs::from_logits(&query.matmul(&weights.attn)?, cfg)?;
    let plan = build_sampling_plan(
        &offsets,
        refs,
        cfg,
        PlanOptions {
            narrowing: opts.narrowing,
            frac_bits: None,
        },
    )?;

    let (nq, nh, nl, np) = (query.rows(), cfg.n_heads, cfg.n_levels(), cfg.n_points);
    let dh = cfg.head_dim();
    let mut samples = vec![0.0; nq * nh * nl * np * dh];
    let mut output = Matrix::zeros(nq, cfg.d_in);
    for h in 0..nh {
        let views = (0..nl)
            .map(|l| LevelView::new(&value, &layout, l, h * dh..(h + 1) * dh))
            .collect::<Result<Vec<_>>>()?;
        for q in 0..nq {
            let mut kept_probs = Vec::with_capacity(nl * np);
            let mut kept_values = Vec::with_capacity(nl * np);
            for (l, view) in views.iter().enumerate() {
                for p in 0..np {
                    if opts.point_mask.is_some_and(|m| !m.keep(q, h, l, p)) {
                        continue;
                    }
                    let idx = plan.index(q, h, l, p);
                    let (x, y) = plan.samples()[idx].coord;
                    let s = bilinear_sample(view, x, y)?;
                    samples[idx * dh..(idx + 1) * dh].copy_from_slice(&s);
                    kept_probs.push(probs.get(q, h, l, p));
                    kept_values.push(s);
                }
            }
            let head = aggregate(&kept_probs, &kept_values)?;
            output.row_mut(q)[h * dh..(h + 1) * dh].copy_from_slice(&head);
        }
    }
    Ok(AttnTrace {
        probs,
        plan,
        value,
        samples,
        output,
    })
}

pub fn msdeform_attn_masked(
    query: &Matrix<f64>,
    fmap: &Matrix<f64>,
    refs: &ReferencePoints,
    weights: &WeightSet,
    cfg: &ModelConfig,
    opts: &AttnOptions<'_>,
) -> Result<Matrix<f64>> {
    Ok(msdeform_attn_traced(query, fmap, refs, weights, cfg, opts)?.output)
}

/// Dense floating-point forward pass with unbounded sampling offsets.
pub fn msdeform_attn_reference(
    query: &Matrix<f64>,
    fmap: &Matrix<f64>,
    refs: &ReferencePoints,
    weights: &WeightSet,
    cfg: &ModelConfig,
) -> Result<Matrix<f64>> {
    msdeform_attn_masked(query, fmap, refs, weights, cfg, &AttnOptions::default())
}
