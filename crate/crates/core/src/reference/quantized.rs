//! Fixed-point forward pass.
//!
//! Operands are quantized per tensor to `quant_bits`. Projections accumulate
//! exactly in integers and are rescaled to real values; sampling coordinates
//! live on a `2^-(bits-1)` grid; bilinear interpolation and aggregation run
//! entirely in integers, so any evaluation order yields identical bits.

use crate::error::{ensure_shape, Result};
use crate::geometry::{build_sampling_plan, Neighborhood, PlanOptions, SamplingPlan};
use crate::pruning::FmapMask;
use crate::tensor::{qmax, quantize, quantize_matrix, FmapLayout, Matrix, ModelConfig, QuantTensor, ReferencePoints};

use super::{check_inputs, AttentionProbs, AttnOptions, WeightSet};

/// Fractional bits of sampling coordinates and interpolation weights.
#[inline]
pub fn frac_bits(quant_bits: u32) -> u32 {
    quant_bits - 1
}

/// Quantized copies of every operand of one layer.
#[derive(Debug, Clone)]
pub struct QuantizedOperands {
    pub query: QuantTensor,
    pub fmap: QuantTensor,
    pub w_attn: QuantTensor,
    pub w_value: QuantTensor,
    pub w_offset: QuantTensor,
    pub bits: u32,
}

impl QuantizedOperands {
    pub fn new(query: &Matrix<f64>, fmap: &Matrix<f64>, weights: &WeightSet, bits: u32) -> Result<Self> {
        Ok(Self {
            query: quantize_matrix(query, bits)?,
            fmap: quantize_matrix(fmap, bits)?,
            w_attn: quantize_matrix(&weights.attn, bits)?,
            w_value: quantize_matrix(&weights.value, bits)?,
            w_offset: quantize_matrix(&weights.offset, bits)?,
            bits,
        })
    }
}

/// Exact integer product of row `row` of `lhs` with `rhs`.
pub fn int_row_product(lhs: &QuantTensor, row: usize, rhs: &QuantTensor, out: &mut [i64]) {
    let (inner, cols) = (lhs.shape[1], rhs.shape[1]);
    out.iter_mut().for_each(|v| *v = 0);
    for k in 0..inner {
        let a = lhs.at(row * inner + k);
        if a == 0 {
            continue;
        }
        let w = &rhs.values[k * cols..(k + 1) * cols];
        for (o, &b) in out.iter_mut().zip(w) {
            *o += a * i64::from(b);
        }
    }
}

fn rescaled_product(lhs: &QuantTensor, rhs: &QuantTensor) -> Matrix<f64> {
    let (rows, cols) = (lhs.shape[0], rhs.shape[1]);
    let scale = lhs.scale * rhs.scale;
    let mut out = Matrix::zeros(rows, cols);
    let mut acc = vec![0_i64; cols];
    for r in 0..rows {
        int_row_product(lhs, r, rhs, &mut acc);
        for (o, &a) in out.row_mut(r).iter_mut().zip(&acc) {
            *o = a as f64 * scale;
        }
    }
    out
}

/// Attention logits `Q·W_A` from the integer product.
pub fn quantized_logits(ops: &QuantizedOperands) -> Matrix<f64> {
    rescaled_product(&ops.query, &ops.w_attn)
}

/// Softmax over the fixed-point logits; the softmax itself runs in floating
/// point and its outputs are re-quantized at aggregation time.
pub fn quantized_probs(ops: &QuantizedOperands, cfg: &ModelConfig) -> Result<AttentionProbs> {
    AttentionProbs::from_logits(&quantized_logits(ops), cfg)
}

/// Sampling offsets `Q·W_S` from the integer product.
pub fn quantized_offsets(ops: &QuantizedOperands) -> Matrix<f64> {
    rescaled_product(&ops.query, &ops.w_offset)
}

/// `V = X·W_V` for kept pixels, re-quantized per tensor; pruned rows are zero.
/// Returns the tensor and the multiply-accumulate count.
pub fn quantized_value_projection(ops: &QuantizedOperands, mask: Option<&FmapMask>) -> Result<(QuantTensor, u64)> {
    let (rows, inner, cols) = (ops.fmap.shape[0], ops.fmap.shape[1], ops.w_value.shape[1]);
    if let Some(m) = mask {
        ensure_shape("fmap mask pixels", rows, m.len())?;
    }
    let scale = ops.fmap.scale * ops.w_value.scale;
    let mut real = vec![0.0; rows * cols];
    let mut acc = vec![0_i64; cols];
    let mut macs = 0_u64;
    for r in 0..rows {
        if mask.is_some_and(|m| !m.keep(r)) {
            continue;
        }
        int_row_product(&ops.fmap, r, &ops.w_value, &mut acc);
        macs += (inner * cols) as u64;
        for (o, &a) in real[r * cols..(r + 1) * cols].iter_mut().zip(&acc) {
            *o = a as f64 * scale;
        }
    }
    Ok((quantize(&real, &[rows, cols], ops.bits)?, macs))
}

/// Probability as an unsigned fixed-point weight with `qmax(bits)` as one.
#[inline]
pub fn quantize_probability(p: f64, bits: u32) -> i64 {
    let q = qmax(bits) as f64;
    (p * q).round_ties_even().clamp(0.0, q) as i64
}

/// Integer weight of a fraction that already lies on the `2^-frac` grid.
#[inline]
pub fn fixed_fraction(t: f64, frac: u32) -> i64 {
    (t * (1_u64 << frac) as f64) as i64
}

/// Factored bilinear interpolation in integers. `t0`, `t1` carry `frac`
/// fractional bits; the result carries `2·frac`.
#[inline]
pub fn bilinear_fused_fixed(n: [i64; 4], t0: i64, t1: i64, frac: u32) -> i128 {
    let [n0, n1, n2, n3] = n.map(i128::from);
    let (t0, t1) = (i128::from(t0), i128::from(t1));
    let right = n1 - n0;
    let down = n2 - n0;
    let cross = (n3 - n2) - right;
    let column = (n0 << frac) + down * t0;
    let slope = (right << frac) + cross * t0;
    (column << frac) + slope * t1
}

/// Fixed-point sampling value of one head slice; out-of-range corners read
/// zero. Result carries `2·frac` fractional bits in units of the value scale.
pub fn sample_fixed(value: &QuantTensor, layout: &FmapLayout, nb: &Neighborhood, channels: std::ops::Range<usize>, frac: u32) -> Vec<i128> {
    let cols = value.shape[1];
    let rows: [Option<usize>; 4] = nb.corners.map(|c| {
        c.in_range
            .then(|| layout.flat_unchecked(nb.level, c.y as usize, c.x as usize) * cols)
    });
    let (t0, t1) = (fixed_fraction(nb.t0, frac), fixed_fraction(nb.t1, frac));
    channels
        .map(|c| {
            let n = rows.map(|r| r.map_or(0, |base| value.at(base + c)));
            bilinear_fused_fixed(n, t0, t1, frac)
        })
        .collect()
}

/// Real-valued scale of the aggregation accumulator.
#[inline]
pub fn output_scale(value_scale: f64, bits: u32) -> f64 {
    let frac = frac_bits(bits);
    value_scale / ((1_u64 << (2 * frac)) as f64 * qmax(bits) as f64)
}

#[derive(Debug, Clone)]
pub struct QuantizedTrace {
    pub probs: AttentionProbs,
    pub plan: SamplingPlan,
    pub value: QuantTensor,
    pub output: Matrix<f64>,
}

pub fn msdeform_attn_quantized(
    query: &Matrix<f64>,
    fmap: &Matrix<f64>,
    refs: &ReferencePoints,
    weights: &WeightSet,
    cfg: &ModelConfig,
    opts: &AttnOptions<'_>,
) -> Result<QuantizedTrace> {
    let layout = check_inputs(query, fmap, refs, weights, cfg, opts)?;
    let bits = cfg.quant_bits;
    let frac = frac_bits(bits);
    let ops = QuantizedOperands::new(query, fmap, weights, bits)?;
    let probs = quantized_probs(&ops, cfg)?;
    let plan = build_sampling_plan(
        &quantized_offsets(&ops),
        refs,
        cfg,
        PlanOptions {
            narrowing: opts.narrowing,
            frac_bits: Some(frac),
        },
    )?;
    let (value, _) = quantized_value_projection(&ops, opts.fmap_mask)?;
    let out_scale = output_scale(value.scale, bits);

    let (nq, nh, nl, np) = (query.rows(), cfg.n_heads, cfg.n_levels(), cfg.n_points);
    let dh = cfg.head_dim();
    let mut output = Matrix::zeros(nq, cfg.d_in);
    let mut acc = vec![0_i128; dh];
    for q in 0..nq {
        for h in 0..nh {
            acc.iter_mut().for_each(|a| *a = 0);
            for l in 0..nl {
                for p in 0..np {
                    if opts.point_mask.is_some_and(|m| !m.keep(q, h, l, p)) {
                        continue;
                    }
                    let w = i128::from(quantize_probability(probs.get(q, h, l, p), bits));
                    let s = sample_fixed(&value, &layout, &plan.get(q, h, l, p).neighbors, h * dh..(h + 1) * dh, frac);
                    for (a, v) in acc.iter_mut().zip(s) {
                        *a += w * v;
                    }
                }
            }
            for (o, &a) in output.row_mut(q)[h * dh..(h + 1) * dh].iter_mut().zip(&acc) {
                *o = a as f64 * out_scale;
            }
        }
    }
    Ok(QuantizedTrace {
        probs,
        plan,
        value,
        output,
    })
}
