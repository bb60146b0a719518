//! Cycle-level model of the accelerator datapath.
//!
//! A block runs four sequential phases: attention probabilities with the
//! point mask, the offset projection, the value projection, and fused
//! sampling plus aggregation. Values are computed with the fixed-point
//! kernels of [`crate::reference::quantized`], so outputs match the
//! quantized reference bit for bit whatever the mode flags say.

use serde::{Deserialize, Serialize};

use crate::error::{DefaError, Result};
use crate::geometry::{bank_of, build_sampling_plan, range_rect, BankMapping, BoundedRange, Neighborhood, PlanOptions, ReuseWindow, SamplingPlan, SRAM_BANKS};
use crate::pruning::{generate_fmap_mask, generate_point_mask, FmapMask, FrequencyMap, PointMask};
use crate::reference::quantized::{
    frac_bits, output_scale, quantize_probability, quantized_offsets, quantized_probs, quantized_value_projection, sample_fixed, QuantizedOperands,
};
use crate::reference::{check_inputs, AttentionProbs, AttnOptions, WeightSet};
use crate::tensor::{FmapLayout, Matrix, ModelConfig, ReferencePoints};

/// How the four BI lanes pick their sampling points.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Parallelism {
    /// One point from each of four levels per batch.
    #[default]
    Inter,
    /// Four points of the same level per batch.
    Intra,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModeFlags {
    pub parallelism: Parallelism,
    pub fused: bool,
    pub reuse: bool,
    pub pruning: bool,
}

impl Default for ModeFlags {
    fn default() -> Self {
        Self {
            parallelism: Parallelism::Inter,
            fused: true,
            reuse: true,
            pruning: true,
        }
    }
}

/// Clock, memory and array parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HardwareConfig {
    pub clock_mhz: f64,
    pub dram_bandwidth_gbps: f64,
    pub dram_pj_per_bit: f64,
    pub sram_read_pj_per_bit: f64,
    pub sram_write_pj_per_bit: f64,
    /// Channels of one pixel vector delivered by a single bank access.
    pub sram_word_channels: usize,
    /// Edge of the square MM weight tile (and length of the input vector).
    pub mm_tile: usize,
    pub ba_lanes: usize,
    pub softmax_elems_per_cycle: usize,
}

impl Default for HardwareConfig {
    fn default() -> Self {
        Self {
            clock_mhz: 400.0,
            dram_bandwidth_gbps: 256.0,
            dram_pj_per_bit: 1.2,
            sram_read_pj_per_bit: 0.1,
            sram_write_pj_per_bit: 0.12,
            sram_word_channels: 16,
            mm_tile: 16,
            ba_lanes: 4,
            softmax_elems_per_cycle: 1,
        }
    }
}

impl HardwareConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(DefaError::InvalidConfig(m));
        for (name, v) in [
            ("clock_mhz", self.clock_mhz),
            ("dram_bandwidth_gbps", self.dram_bandwidth_gbps),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return bad(format!("{name}={v} must be positive"));
            }
        }
        self.coefficients().validate()?;
        if self.sram_word_channels == 0 || self.mm_tile == 0 || self.softmax_elems_per_cycle == 0 {
            return bad("word width, MM tile and softmax rate must be positive".into());
        }
        if self.ba_lanes != 4 {
            return bad(format!("ba_lanes={} but the bank layout serves exactly 4 lanes", self.ba_lanes));
        }
        Ok(())
    }

    /// DRAM bytes deliverable per clock cycle.
    pub fn dram_bytes_per_cycle(&self) -> f64 {
        self.dram_bandwidth_gbps * 1e3 / self.clock_mhz
    }

    /// Cycles needed to move `bits` over the DRAM interface.
    pub fn dram_cycles(&self, bits: u64) -> u64 {
        (bits as f64 / 8.0 / self.dram_bytes_per_cycle()).ceil() as u64
    }

    pub fn coefficients(&self) -> EnergyCoefficients {
        EnergyCoefficients {
            dram_pj_per_bit: self.dram_pj_per_bit,
            sram_read_pj_per_bit: self.sram_read_pj_per_bit,
            sram_write_pj_per_bit: self.sram_write_pj_per_bit,
        }
    }
}

/// Mode of the reconfigurable PE array.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PeMode {
    Mm,
    Ba,
}

/// Cost of one output-stationary matrix multiply.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct MmCost {
    pub cycles: u64,
    pub kept_rows: u64,
    pub macs: u64,
    pub weight_bits: u64,
    pub activation_bits: u64,
}

/// Streams each kept activation row against `ceil(inner/T) × ceil(cols/T)`
/// weight tiles, one tile per cycle. Masked rows cost nothing.
pub fn simulate_mm(rows: usize, inner: usize, cols: usize, row_mask: Option<&[bool]>, bits: u32, tile: usize) -> Result<MmCost> {
    if rows == 0 || inner == 0 || cols == 0 || tile == 0 {
        return Err(DefaError::InvalidArgument(format!(
            "matrix multiply dims must be positive, got {rows}x{inner}x{cols} with tile {tile}"
        )));
    }
    if let Some(m) = row_mask {
        if m.len() != rows {
            return Err(DefaError::ShapeMismatch {
                what: "MM row mask".into(),
                expected: rows,
                actual: m.len(),
            });
        }
    }
    let kept = row_mask.map_or(rows, |m| m.iter().filter(|&&b| b).count()) as u64;
    let tiles = (inner.div_ceil(tile) * cols.div_ceil(tile)) as u64;
    let bits = u64::from(bits);
    Ok(MmCost {
        cycles: kept * tiles,
        kept_rows: kept,
        macs: kept * (inner * cols) as u64,
        weight_bits: (inner * cols) as u64 * bits,
        activation_bits: kept * inner as u64 * bits,
    })
}

/// Operation counts of the PE array.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ArithmeticCount {
    pub mm_macs: u64,
    pub bi_muls: u64,
    pub bi_adds: u64,
    pub ag_muls: u64,
    pub ag_adds: u64,
    pub samples: u64,
}

/// Multiplies of the factored bilinear form per channel.
pub const BI_MULS_PER_CHANNEL: u64 = 3;
/// Additions of the factored bilinear form per channel.
pub const BI_ADDS_PER_CHANNEL: u64 = 7;

impl ArithmeticCount {
    fn add_samples(&mut self, n: u64, head_dim: usize) {
        let dh = head_dim as u64;
        self.samples += n;
        self.bi_muls += n * BI_MULS_PER_CHANNEL * dh;
        self.bi_adds += n * BI_ADDS_PER_CHANNEL * dh;
        self.ag_muls += n * dh;
        self.ag_adds += n * dh;
    }
}

/// Per-bank view of one batch of SRAM requests.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Census {
    /// Distinct addresses requested from each bank.
    pub distinct: [usize; SRAM_BANKS],
}

impl Census {
    pub fn from_requests(requests: &[(usize, usize)]) -> Self {
        let mut seen: [Vec<usize>; SRAM_BANKS] = Default::default();
        for &(bank, addr) in requests {
            if !seen[bank].contains(&addr) {
                seen[bank].push(addr);
            }
        }
        Self {
            distinct: seen.map(|v| v.len()),
        }
    }

    pub fn max_distinct(&self) -> usize {
        self.distinct.iter().copied().max().unwrap_or(0)
    }

    /// Serialized extra accesses and the detection cycle they trigger.
    pub fn stalls(&self) -> (u64, u64) {
        let extra = self.max_distinct().saturating_sub(1) as u64;
        (extra, u64::from(extra > 0))
    }
}

/// Pixels a neighborhood actually reads: in-range corners whose pixel
/// survived the fmap mask, as `(level, x, y, flat)`.
fn requested_pixels<'a>(
    nb: &'a Neighborhood,
    layout: &'a FmapLayout,
    fmap_mask: Option<&'a FmapMask>,
) -> impl Iterator<Item = (i64, i64, usize)> + 'a {
    nb.in_range().filter_map(move |c| {
        let flat = layout.flat_unchecked(nb.level, c.y as usize, c.x as usize);
        fmap_mask.is_none_or(|m| m.keep(flat)).then_some((c.x, c.y, flat))
    })
}

/// Stall outcome of one intra-level batch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConflictOutcome {
    pub census: Census,
    pub stalls: u64,
    pub detect: u64,
}

/// Census of up to four same-level points under the 4×4 parity mapping.
pub fn detect_conflicts_intra(batch: &[Neighborhood], layout: &FmapLayout, fmap_mask: Option<&FmapMask>) -> Result<ConflictOutcome> {
    if batch.len() > 4 {
        return Err(DefaError::InvalidArgument(format!("{} points in a 4-lane batch", batch.len())));
    }
    if let Some(first) = batch.first() {
        if batch.iter().any(|nb| nb.level != first.level) {
            return Err(DefaError::InvalidArgument("intra-level batch spans several levels".into()));
        }
    }
    let mapping = BankMapping::IntraLevel;
    let requests: Vec<(usize, usize)> = batch
        .iter()
        .flat_map(|nb| requested_pixels(nb, layout, fmap_mask).map(|(x, y, flat)| (mapping.bank(nb.level, x, y), flat)))
        .collect();
    let census = Census::from_requests(&requests);
    let (stalls, detect) = census.stalls();
    Ok(ConflictOutcome { census, stalls, detect })
}

/// Bank requests of an inter-level batch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AccessPlan {
    /// `(bank, flat pixel)` pairs, one per requested pixel.
    pub requests: Vec<(usize, usize)>,
}

/// Places at most one point per level onto the 16 banks. Every requested
/// pixel lands in its own bank; a violation is reported as an error.
pub fn schedule_inter_level(batch: &[Neighborhood], layout: &FmapLayout, fmap_mask: Option<&FmapMask>) -> Result<AccessPlan> {
    if layout.n_levels() != 4 {
        return Err(DefaError::InvalidArgument(format!(
            "inter-level scheduling needs 4 levels, the layout has {}",
            layout.n_levels()
        )));
    }
    let mut seen_level = [false; 4];
    let mut requests = Vec::with_capacity(16);
    for nb in batch {
        if std::mem::replace(&mut seen_level[nb.level], true) {
            return Err(DefaError::InvalidArgument(format!("two points of level {} in one inter-level batch", nb.level)));
        }
        for (x, y, flat) in requested_pixels(nb, layout, fmap_mask) {
            requests.push((bank_of(nb.level, x, y)?, flat));
        }
    }
    let mut used = [false; SRAM_BANKS];
    for &(bank, _) in &requests {
        if std::mem::replace(&mut used[bank], true) {
            return Err(DefaError::Invariant(format!("bank {bank} requested twice in an inter-level batch")));
        }
    }
    Ok(AccessPlan { requests })
}

/// Bits moved through each memory, with the splits used by the ablations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Traffic {
    pub dram_read_bits: u64,
    pub dram_write_bits: u64,
    pub sram_read_bits: u64,
    pub sram_write_bits: u64,
    /// DRAM reads filling the on-chip bounded ranges (also written to SRAM).
    pub fmap_fill_bits: u64,
    /// SRAM reads of BI neighbors.
    pub bi_read_bits: u64,
    /// SRAM reads of point and fmap masks.
    pub mask_read_bits: u64,
    /// DRAM bits of sampling values written and read back (unfused only).
    pub intermediate_dram_bits: u64,
    /// SRAM bits of sampling values staged for the aggregation pass.
    pub intermediate_sram_bits: u64,
}

impl Traffic {
    pub fn dram_bits(&self) -> u64 {
        self.dram_read_bits + self.dram_write_bits
    }

    pub fn merge(&mut self, o: &Traffic) {
        self.dram_read_bits += o.dram_read_bits;
        self.dram_write_bits += o.dram_write_bits;
        self.sram_read_bits += o.sram_read_bits;
        self.sram_write_bits += o.sram_write_bits;
        self.fmap_fill_bits += o.fmap_fill_bits;
        self.bi_read_bits += o.bi_read_bits;
        self.mask_read_bits += o.mask_read_bits;
        self.intermediate_dram_bits += o.intermediate_dram_bits;
        self.intermediate_sram_bits += o.intermediate_sram_bits;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnergyCoefficients {
    pub dram_pj_per_bit: f64,
    pub sram_read_pj_per_bit: f64,
    pub sram_write_pj_per_bit: f64,
}

impl EnergyCoefficients {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("dram_pj_per_bit", self.dram_pj_per_bit),
            ("sram_read_pj_per_bit", self.sram_read_pj_per_bit),
            ("sram_write_pj_per_bit", self.sram_write_pj_per_bit),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(DefaError::InvalidConfig(format!("{name}={v} must be finite and non-negative")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnergyReport {
    pub traffic: Traffic,
    pub dram_pj: f64,
    pub sram_read_pj: f64,
    pub sram_write_pj: f64,
    pub total_pj: f64,
}

pub fn energy_account(traffic: &Traffic, coeff: &EnergyCoefficients) -> Result<EnergyReport> {
    coeff.validate()?;
    let dram_pj = traffic.dram_bits() as f64 * coeff.dram_pj_per_bit;
    let sram_read_pj = traffic.sram_read_bits as f64 * coeff.sram_read_pj_per_bit;
    let sram_write_pj = traffic.sram_write_bits as f64 * coeff.sram_write_pj_per_bit;
    Ok(EnergyReport {
        traffic: *traffic,
        dram_pj,
        sram_read_pj,
        sram_write_pj,
        total_pj: dram_pj + sram_read_pj + sram_write_pj,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Phase {
    ProbsMask,
    OffsetMm,
    ValueMm,
    SampleAggregate,
}

impl Phase {
    pub const ALL: [Phase; 4] = [Phase::ProbsMask, Phase::OffsetMm, Phase::ValueMm, Phase::SampleAggregate];

    pub fn name(self) -> &'static str {
        match self {
            Phase::ProbsMask => "probs_mask",
            Phase::OffsetMm => "offset_mm",
            Phase::ValueMm => "value_mm",
            Phase::SampleAggregate => "sample_aggregate",
        }
    }

    pub fn pe_mode(self) -> PeMode {
        match self {
            Phase::SampleAggregate => PeMode::Ba,
            _ => PeMode::Mm,
        }
    }
}

/// One phase is bound by whichever of compute and DRAM takes longer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhaseReport {
    pub phase: Phase,
    pub compute_cycles: u64,
    pub dram_cycles: u64,
    pub cycles: u64,
    pub traffic: Traffic,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CycleReport {
    pub phases: Vec<PhaseReport>,
    pub total: u64,
    /// Parallelism actually used; intra when inter was requested on a
    /// pyramid without four levels.
    pub parallelism: Parallelism,
    pub msgs_batches: u64,
    /// Sampling cycles including stalls and detection.
    pub msgs_cycles: u64,
    pub conflict_stalls: u64,
    pub detect_cycles: u64,
    /// Serviced accesses per bank.
    pub bank_histogram: [u64; SRAM_BANKS],
}

impl CycleReport {
    pub fn phase(&self, phase: Phase) -> &PhaseReport {
        self.phases.iter().find(|p| p.phase == phase).expect("every phase is reported")
    }
}

/// On-chip fmap buffer occupancy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct StorageReport {
    /// Largest number of pixels resident at once under level-wise ranges.
    pub max_resident_pixels: u64,
    pub resident_bits: u64,
    /// Same statistic when every level uses the finest level's range.
    pub uniform_resident_pixels: u64,
    pub uniform_bits: u64,
}

#[derive(Debug, Clone)]
pub struct BlockResult {
    pub output: Matrix<f64>,
    pub probs: AttentionProbs,
    pub plan: SamplingPlan,
    pub point_mask: PointMask,
    pub fmap_mask: FmapMask,
    pub frequency: FrequencyMap,
    /// Mask for the next block; all ones when pruning is off.
    pub next_fmap_mask: FmapMask,
    pub cycles: CycleReport,
    pub energy: EnergyReport,
    pub arithmetic: ArithmeticCount,
    pub storage: StorageReport,
    pub kept_samples: u64,
}

/// Everything one block consumes.
#[derive(Debug, Clone, Copy)]
pub struct BlockInputs<'a> {
    pub query: &'a Matrix<f64>,
    pub fmap: &'a Matrix<f64>,
    pub refs: &'a ReferencePoints,
    pub weights: &'a WeightSet,
    /// Mask produced by the previous block; ignored when pruning is off.
    pub fmap_mask: Option<&'a FmapMask>,
    pub block: u32,
}

struct PhaseAcc {
    compute: u64,
    traffic: Traffic,
}

impl PhaseAcc {
    fn new() -> Self {
        Self {
            compute: 0,
            traffic: Traffic::default(),
        }
    }

    fn finish(self, phase: Phase, hw: &HardwareConfig) -> PhaseReport {
        let dram_cycles = hw.dram_cycles(self.traffic.dram_bits());
        PhaseReport {
            phase,
            compute_cycles: self.compute,
            dram_cycles,
            cycles: self.compute.max(dram_cycles),
            traffic: self.traffic,
        }
    }
}

pub fn simulate_block(inputs: &BlockInputs<'_>, cfg: &ModelConfig, flags: ModeFlags, hw: &HardwareConfig) -> Result<BlockResult> {
    hw.validate()?;
    let BlockInputs {
        query,
        fmap,
        refs,
        weights,
        block,
        ..
    } = *inputs;
    let incoming = if flags.pruning { inputs.fmap_mask } else { None };
    let opts = AttnOptions {
        narrowing: Some(&cfg.bounded_ranges),
        point_mask: None,
        fmap_mask: incoming,
    };
    let layout = check_inputs(query, fmap, refs, weights, cfg, &opts)?;
    let fmap_mask = incoming.cloned().unwrap_or_else(|| FmapMask::all_ones(&layout, block.saturating_sub(1)));

    let parallelism = match flags.parallelism {
        Parallelism::Inter if cfg.n_levels() != 4 => {
            log::warn!("inter-level parallelism needs 4 levels, got {}; using intra-level", cfg.n_levels());
            Parallelism::Intra
        }
        p => p,
    };

    let bits = cfg.quant_bits;
    let wbits = u64::from(bits);
    let frac = frac_bits(bits);
    let (nq, nh, nl, np) = (query.rows(), cfg.n_heads, cfg.n_levels(), cfg.n_points);
    let (d_in, dh) = (cfg.d_in, cfg.head_dim());
    let ops = QuantizedOperands::new(query, fmap, weights, bits)?;
    let mut arith = ArithmeticCount::default();

    // Phase 1: logits, softmax and point mask.
    let mut p1 = PhaseAcc::new();
    let mm = simulate_mm(nq, d_in, cfg.attn_cols(), None, bits, hw.mm_tile)?;
    let softmax_elems = (nq * cfg.attn_cols()) as u64;
    p1.compute = mm.cycles + softmax_elems.div_ceil(hw.softmax_elems_per_cycle as u64);
    p1.traffic.dram_read_bits += mm.weight_bits + mm.activation_bits;
    arith.mm_macs += mm.macs;
    let probs = quantized_probs(&ops, cfg)?;
    let point_mask = if flags.pruning {
        let m = generate_point_mask(&probs, cfg.pap_epsilon, block)?;
        p1.traffic.sram_write_bits += softmax_elems;
        m
    } else {
        PointMask::all_ones(nq, cfg, block)
    };

    // Phase 2: sampling offsets.
    let mut p2 = PhaseAcc::new();
    let mm = simulate_mm(nq, d_in, cfg.offset_cols(), None, bits, hw.mm_tile)?;
    p2.compute = mm.cycles;
    p2.traffic.dram_read_bits += mm.weight_bits + mm.activation_bits;
    arith.mm_macs += mm.macs;
    let plan = build_sampling_plan(
        &quantized_offsets(&ops),
        refs,
        cfg,
        PlanOptions {
            narrowing: Some(&cfg.bounded_ranges),
            frac_bits: Some(frac),
        },
    )?;

    // Phase 3: value projection over kept pixels, written back to DRAM.
    let mut p3 = PhaseAcc::new();
    let mm = simulate_mm(layout.len(), d_in, d_in, Some(fmap_mask.bits()), bits, hw.mm_tile)?;
    let (value, value_macs) = quantized_value_projection(&ops, Some(&fmap_mask))?;
    if value_macs != mm.macs {
        return Err(DefaError::Invariant(format!("value MACs {value_macs} != MM model {}", mm.macs)));
    }
    p3.compute = mm.cycles;
    p3.traffic.dram_read_bits += mm.weight_bits + mm.activation_bits;
    p3.traffic.dram_write_bits += mm.kept_rows * d_in as u64 * wbits;
    if flags.pruning {
        let mask_bits = layout.len() as u64;
        p3.traffic.sram_read_bits += mask_bits;
        p3.traffic.mask_read_bits += mask_bits;
    }
    arith.mm_macs += mm.macs;

    // Phase 4: fill, sampling, aggregation and FWP for the next block.
    let mut p4 = PhaseAcc::new();
    let mask_opt = flags.pruning.then_some(&fmap_mask);
    if flags.pruning {
        let bits_read = (nq * cfg.attn_cols()) as u64;
        p4.traffic.sram_read_bits += bits_read;
        p4.traffic.mask_read_bits += bits_read;
    }
    let uniform: Vec<BoundedRange> = cfg
        .level_shapes
        .iter()
        .map(|s| {
            let r = cfg.bounded_ranges[0];
            BoundedRange::new(r.half_width.min(s.width.saturating_sub(2) / 2), r.half_height.min(s.height.saturating_sub(2) / 2))
        })
        .collect();
    let mut windows = vec![ReuseWindow::new(); nl];
    let mut storage = StorageReport::default();
    let mut freq = FrequencyMap::new(layout.clone());
    let mut bank_histogram = [0_u64; SRAM_BANKS];
    let (mut msgs_batches, mut msgs_cycles, mut stalls_total, mut detect_total) = (0_u64, 0_u64, 0_u64, 0_u64);
    let slices = dh.div_ceil(hw.sram_word_channels) as u64;
    let pixel_bits = d_in as u64 * wbits;
    let sample_bits = dh as u64 * wbits;
    let out_scale = output_scale(value.scale, bits);
    let mut output = Matrix::zeros(nq, d_in);
    let mut acc = vec![0_i128; dh];
    let mut kept_samples = 0_u64;

    for q in 0..nq {
        let (mut resident, mut uniform_resident) = (0_u64, 0_u64);
        for l in 0..nl {
            let shape = cfg.level_shapes[l];
            let reference = plan.get(q, 0, l, 0).reference;
            let rect = range_rect(l, reference, cfg.bounded_ranges[l], shape);
            let fetched: Vec<usize> = if flags.reuse {
                windows[l].advance(rect, &layout).fetched
            } else {
                rect.pixels()
                    .map(|(x, y)| layout.flat_unchecked(l, y as usize, x as usize))
                    .collect()
            };
            let kept = fetched.iter().filter(|&&f| mask_opt.is_none_or(|m| m.keep(f))).count() as u64;
            p4.traffic.fmap_fill_bits += kept * pixel_bits;
            p4.traffic.dram_read_bits += kept * pixel_bits;
            p4.traffic.sram_write_bits += kept * pixel_bits;
            resident += rect.area() as u64;
            uniform_resident += range_rect(l, reference, uniform[l], shape).area() as u64;
        }
        storage.max_resident_pixels = storage.max_resident_pixels.max(resident);
        storage.uniform_resident_pixels = storage.uniform_resident_pixels.max(uniform_resident);

        for h in 0..nh {
            let mut per_level: Vec<Vec<usize>> = vec![Vec::new(); nl];
            for (l, lvl) in per_level.iter_mut().enumerate() {
                for p in 0..np {
                    if point_mask.keep(q, h, l, p) {
                        lvl.push(plan.index(q, h, l, p));
                    }
                }
            }
            let batches: Vec<Vec<usize>> = match parallelism {
                Parallelism::Inter => {
                    let depth = per_level.iter().map(Vec::len).max().unwrap_or(0);
                    (0..depth)
                        .map(|i| per_level.iter().filter_map(|v| v.get(i).copied()).collect())
                        .collect()
                }
                Parallelism::Intra => per_level.iter().flat_map(|v| v.chunks(4).map(<[usize]>::to_vec)).collect(),
            };

            acc.iter_mut().for_each(|a| *a = 0);
            for batch in &batches {
                let nbs: Vec<Neighborhood> = batch.iter().map(|&i| plan.samples()[i].neighbors).collect();
                let (requests, stalls, detect) = match parallelism {
                    Parallelism::Inter => (schedule_inter_level(&nbs, &layout, mask_opt)?.requests, 0, 0),
                    Parallelism::Intra => {
                        let mapping = BankMapping::IntraLevel;
                        let out = detect_conflicts_intra(&nbs, &layout, mask_opt)?;
                        let reqs = nbs
                            .iter()
                            .flat_map(|nb| {
                                requested_pixels(nb, &layout, mask_opt).map(move |(x, y, f)| (mapping.bank(nb.level, x, y), f))
                            })
                            .collect();
                        (reqs, out.stalls, out.detect)
                    }
                };
                let census = Census::from_requests(&requests);
                for (b, &n) in census.distinct.iter().enumerate() {
                    bank_histogram[b] += n as u64 * slices;
                }
                let serviced: u64 = census.distinct.iter().sum::<usize>() as u64;
                p4.traffic.bi_read_bits += serviced * sample_bits;
                p4.traffic.sram_read_bits += serviced * sample_bits;
                msgs_batches += 1;
                msgs_cycles += slices * (1 + stalls + detect);
                stalls_total += slices * stalls;
                detect_total += slices * detect;

                for (&idx, nb) in batch.iter().zip(&nbs) {
                    for f in nb.flat_in_range(&layout) {
                        freq.record(f);
                    }
                    let (_, _, l, p) = unindex(idx, nh, nl, np);
                    let w = i128::from(quantize_probability(probs.get(q, h, l, p), bits));
                    let s = sample_fixed(&value, &layout, nb, h * dh..(h + 1) * dh, frac);
                    for (a, v) in acc.iter_mut().zip(s) {
                        *a += w * v;
                    }
                }
                arith.add_samples(batch.len() as u64, dh);
                kept_samples += batch.len() as u64;
            }
            for (o, &a) in output.row_mut(q)[h * dh..(h + 1) * dh].iter_mut().zip(&acc) {
                *o = a as f64 * out_scale;
            }
        }
    }
    storage.resident_bits = storage.max_resident_pixels * pixel_bits;
    storage.uniform_bits = storage.uniform_resident_pixels * pixel_bits;

    p4.compute = msgs_cycles;
    if !flags.fused {
        let bits = kept_samples * sample_bits;
        p4.traffic.intermediate_dram_bits += 2 * bits;
        p4.traffic.dram_write_bits += bits;
        p4.traffic.dram_read_bits += bits;
        p4.traffic.intermediate_sram_bits += 2 * bits;
        p4.traffic.sram_write_bits += bits;
        p4.traffic.sram_read_bits += bits;
        p4.compute += kept_samples.div_ceil(hw.ba_lanes as u64) * slices;
    }
    p4.traffic.dram_write_bits += (nq * d_in) as u64 * wbits;
    let next_fmap_mask = if flags.pruning {
        p4.traffic.dram_write_bits += layout.len() as u64;
        generate_fmap_mask(&freq, cfg.fwp_k, block)?
    } else {
        FmapMask::all_ones(&layout, block)
    };

    let phases = vec![
        p1.finish(Phase::ProbsMask, hw),
        p2.finish(Phase::OffsetMm, hw),
        p3.finish(Phase::ValueMm, hw),
        p4.finish(Phase::SampleAggregate, hw),
    ];
    let mut traffic = Traffic::default();
    for p in &phases {
        traffic.merge(&p.traffic);
    }
    let total = phases.iter().map(|p| p.cycles).sum();
    if parallelism == Parallelism::Inter && stalls_total != 0 {
        return Err(DefaError::Invariant(format!("{stalls_total} conflict stalls in inter-level mode")));
    }
    let energy = energy_account(&traffic, &hw.coefficients())?;
    Ok(BlockResult {
        output,
        probs,
        plan,
        point_mask,
        fmap_mask,
        frequency: freq,
        next_fmap_mask,
        cycles: CycleReport {
            phases,
            total,
            parallelism,
            msgs_batches,
            msgs_cycles,
            conflict_stalls: stalls_total,
            detect_cycles: detect_total,
            bank_histogram,
        },
        energy,
        arithmetic: arith,
        storage,
        kept_samples,
    })
}

#[inline]
fn unindex(idx: usize, nh: usize, nl: usize, np: usize) -> (usize, usize, usize, usize) {
    let p = idx % np;
    let l = (idx / np) % nl;
    let h = (idx / (np * nl)) % nh;
    (idx / (np * nl * nh), h, l, p)
}
