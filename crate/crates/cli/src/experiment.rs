//! Named experiment presets and their execution.

use anyhow::{anyhow, bail, Context, Result};
use defa_core::sim::{simulate_block, ArithmeticCount, CycleReport, EnergyReport, Phase, StorageReport, Traffic};
use defa_core::{BlockInputs, FmapMask, Matrix, ModeFlags, Parallelism};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{OffsetProfile, RunConfig};
use crate::workload::{generate_workload, query_from, WorkloadSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    ParallelismAblation,
    FusionAblation,
    ReuseAblation,
    PruningSweep,
    EndToEnd,
    /// The configured flags only.
    Simulate,
}

impl Preset {
    pub fn name(self) -> &'static str {
        match self {
            Preset::ParallelismAblation => "parallelism-ablation",
            Preset::FusionAblation => "fusion-ablation",
            Preset::ReuseAblation => "reuse-ablation",
            Preset::PruningSweep => "pruning-sweep",
            Preset::EndToEnd => "end-to-end",
            Preset::Simulate => "simulate",
        }
    }
}

/// One cell of a preset matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSpec {
    pub label: String,
    pub flags: ModeFlags,
    pub epsilon: f64,
    pub k: f64,
    pub profile: OffsetProfile,
}

/// Ordered runs plus the `(A, B)` index pairs of the ratio table.
#[derive(Debug, Clone, PartialEq)]
pub struct Plan {
    pub runs: Vec<RunSpec>,
    pub pairs: Vec<(usize, usize)>,
}

fn flags_label(f: &ModeFlags) -> String {
    let p = match f.parallelism {
        Parallelism::Inter => "inter",
        Parallelism::Intra => "intra",
    };
    let on = |b: bool| if b { "on" } else { "off" };
    format!("{p}/fusion-{}/reuse-{}/pruning-{}", on(f.fused), on(f.reuse), on(f.pruning))
}

pub fn expand(preset: Preset, cfg: &RunConfig) -> Plan {
    let base = cfg.flags();
    let spec = |label: String, flags: ModeFlags| RunSpec {
        label,
        flags,
        epsilon: cfg.pap_epsilon,
        k: cfg.fwp_k,
        profile: cfg.offset_profile,
    };
    match preset {
        Preset::ParallelismAblation => {
            // Unpruned so every level carries the same number of points.
            let mut runs = Vec::new();
            let mut pairs = Vec::new();
            let mut profiles = vec![cfg.offset_profile];
            if cfg.offset_profile != OffsetProfile::Strided {
                profiles.push(OffsetProfile::Strided);
            }
            for profile in profiles {
                let name = serde_json::to_value(profile).unwrap();
                let name = name.as_str().unwrap();
                for parallelism in [Parallelism::Intra, Parallelism::Inter] {
                    let flags = ModeFlags {
                        parallelism,
                        pruning: false,
                        ..base
                    };
                    runs.push(RunSpec {
                        profile,
                        ..spec(format!("{name}/{}", flags_label(&flags)), flags)
                    });
                }
                pairs.push((runs.len() - 2, runs.len() - 1));
            }
            Plan { runs, pairs }
        }
        Preset::FusionAblation => {
            let runs = [false, true]
                .map(|fused| {
                    let flags = ModeFlags { fused, ..base };
                    spec(flags_label(&flags), flags)
                })
                .to_vec();
            Plan { runs, pairs: vec![(0, 1)] }
        }
        Preset::ReuseAblation => {
            let runs = [false, true]
                .map(|reuse| {
                    let flags = ModeFlags { reuse, ..base };
                    spec(flags_label(&flags), flags)
                })
                .to_vec();
            Plan { runs, pairs: vec![(0, 1)] }
        }
        Preset::PruningSweep => {
            let dense = ModeFlags { pruning: false, ..base };
            let mut runs = vec![spec(format!("dense/{}", flags_label(&dense)), dense)];
            let pruned = ModeFlags { pruning: true, ..base };
            for &e in &cfg.sweep_epsilon {
                for &k in &cfg.sweep_k {
                    runs.push(RunSpec {
                        epsilon: e,
                        k,
                        ..spec(format!("eps={e}/k={k}"), pruned)
                    });
                }
            }
            let pairs = (1..runs.len()).map(|i| (0, i)).collect();
            Plan { runs, pairs }
        }
        Preset::EndToEnd => {
            let dense = ModeFlags { pruning: false, ..base };
            Plan {
                runs: vec![
                    spec(format!("baseline/{}", flags_label(&dense)), dense),
                    spec(flags_label(&base), base),
                ],
                pairs: vec![(0, 1)],
            }
        }
        Preset::Simulate => Plan {
            runs: vec![spec(flags_label(&base), base)],
            pairs: Vec::new(),
        },
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockRecord {
    pub block: u32,
    pub cycles: CycleReport,
    pub energy: EnergyReport,
    pub arithmetic: ArithmeticCount,
    pub storage: StorageReport,
    pub kept_samples: u64,
    pub point_keep_ratio: f64,
    pub fmap_keep_ratio: f64,
    pub fmap_level_keep_ratios: Vec<f64>,
    pub next_fmap_keep_ratio: f64,
}

/// Totals of one run over all blocks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub id: usize,
    pub spec: RunSpec,
    pub total_cycles: u64,
    pub phase_cycles: [u64; 4],
    pub msgs_cycles: u64,
    pub msgs_batches: u64,
    pub conflict_stalls: u64,
    pub detect_cycles: u64,
    pub traffic: Traffic,
    pub dram_pj: f64,
    pub sram_pj: f64,
    pub total_pj: f64,
    pub kept_samples: u64,
    pub sampling_value_bits: u64,
    pub point_keep_ratio: f64,
    pub fmap_keep_ratio: f64,
    pub max_resident_bits: u64,
    pub uniform_resident_bits: u64,
    pub output_hash: String,
    pub blocks: Vec<BlockRecord>,
}

/// `A / B` comparison of two runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatioRecord {
    pub a: usize,
    pub b: usize,
    pub label: String,
    pub speedup_total: f64,
    pub speedup_msgs: f64,
    pub energy_ratio: f64,
    pub dram_bits_delta: i64,
}

impl RatioRecord {
    pub fn between(a: &RunRecord, b: &RunRecord) -> Self {
        let div = |x: f64, y: f64| if y == 0.0 { 0.0 } else { x / y };
        Self {
            a: a.id,
            b: b.id,
            label: format!("{} / {}", a.spec.label, b.spec.label),
            speedup_total: div(a.total_cycles as f64, b.total_cycles as f64),
            speedup_msgs: div(a.msgs_cycles as f64, b.msgs_cycles as f64),
            energy_ratio: div(a.total_pj, b.total_pj),
            dram_bits_delta: a.traffic.dram_bits() as i64 - b.traffic.dram_bits() as i64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bundle {
    pub preset: Preset,
    pub config_hash: String,
    pub config: RunConfig,
    pub runs: Vec<RunRecord>,
    pub ratios: Vec<RatioRecord>,
}

/// Hex SHA-256 prefix of the little-endian bit patterns of a matrix.
pub fn output_hash(m: &Matrix<f64>) -> String {
    let mut h = Sha256::new();
    h.update((m.rows() as u64).to_le_bytes());
    h.update((m.cols() as u64).to_le_bytes());
    for v in m.as_slice() {
        h.update(v.to_bits().to_le_bytes());
    }
    hex::encode(&h.finalize()[..8])
}

/// Runs every block of the configured workload under one run spec.
pub fn execute(id: usize, spec: &RunSpec, cfg: &RunConfig) -> Result<RunRecord> {
    log::info!("run {id}: {}", spec.label);
    let mut model = cfg.model()?;
    model.pap_epsilon = spec.epsilon;
    model.fwp_k = spec.k;
    let wspec = WorkloadSpec {
        profile: spec.profile,
        ..WorkloadSpec::from_config(cfg)?
    };
    let work = generate_workload(&wspec)?;
    let hw = cfg.hardware();

    let mut x = work.fmap.clone();
    let mut mask: Option<FmapMask> = None;
    let mut blocks = Vec::with_capacity(cfg.blocks);
    for (b, weights) in work.weights.iter().enumerate() {
        let query = query_from(&x);
        let inputs = BlockInputs {
            query: &query,
            fmap: &x,
            refs: &work.refs,
            weights,
            fmap_mask: mask.as_ref(),
            block: b as u32,
        };
        let r = simulate_block(&inputs, &model, spec.flags, &hw).with_context(|| format!("block {b}"))?;
        blocks.push(BlockRecord {
            block: b as u32,
            cycles: r.cycles.clone(),
            energy: r.energy,
            arithmetic: r.arithmetic,
            storage: r.storage,
            kept_samples: r.kept_samples,
            point_keep_ratio: r.point_mask.keep_ratio(),
            fmap_keep_ratio: r.fmap_mask.keep_ratio(),
            fmap_level_keep_ratios: r.fmap_mask.level_keep_ratios(),
            next_fmap_keep_ratio: r.next_fmap_mask.keep_ratio(),
        });
        mask = Some(r.next_fmap_mask);
        x = r.output;
    }

    let mut traffic = Traffic::default();
    for b in &blocks {
        traffic.merge(&b.energy.traffic);
    }
    let sum = |f: &dyn Fn(&BlockRecord) -> u64| blocks.iter().map(f).sum::<u64>();
    let mut phase_cycles = [0; 4];
    for (i, p) in Phase::ALL.iter().enumerate() {
        phase_cycles[i] = sum(&|b| b.cycles.phase(*p).cycles);
    }
    let kept_samples = sum(&|b| b.kept_samples);
    let n = blocks.len() as f64;
    Ok(RunRecord {
        id,
        spec: spec.clone(),
        total_cycles: sum(&|b| b.cycles.total),
        phase_cycles,
        msgs_cycles: sum(&|b| b.cycles.msgs_cycles),
        msgs_batches: sum(&|b| b.cycles.msgs_batches),
        conflict_stalls: sum(&|b| b.cycles.conflict_stalls),
        detect_cycles: sum(&|b| b.cycles.detect_cycles),
        traffic,
        dram_pj: blocks.iter().map(|b| b.energy.dram_pj).sum(),
        sram_pj: blocks.iter().map(|b| b.energy.sram_read_pj + b.energy.sram_write_pj).sum(),
        total_pj: blocks.iter().map(|b| b.energy.total_pj).sum(),
        kept_samples,
        sampling_value_bits: kept_samples * model.head_dim() as u64 * u64::from(model.quant_bits),
        point_keep_ratio: blocks.iter().map(|b| b.point_keep_ratio).sum::<f64>() / n,
        fmap_keep_ratio: blocks.iter().map(|b| b.fmap_keep_ratio).sum::<f64>() / n,
        max_resident_bits: blocks.iter().map(|b| b.storage.resident_bits).max().unwrap_or(0),
        uniform_resident_bits: blocks.iter().map(|b| b.storage.uniform_bits).max().unwrap_or(0),
        output_hash: output_hash(&x),
        blocks,
    })
}

fn check_runs(preset: Preset, plan: &Plan, runs: &[RunRecord]) -> Result<()> {
    let fail = |r: &RunRecord, msg: String| Err(anyhow!("run {} ({}) failed its check: {msg}", r.id, r.spec.label));
    for r in runs {
        if r.total_cycles != r.phase_cycles.iter().sum::<u64>() {
            return fail(r, "total cycles differ from the phase sum".into());
        }
        if r.spec.flags.fused && r.traffic.intermediate_dram_bits != 0 {
            return fail(r, "fused run moved sampling values through DRAM".into());
        }
        if r.blocks.iter().any(|b| b.cycles.parallelism == Parallelism::Inter && b.cycles.conflict_stalls != 0) {
            return fail(r, "conflict stalls in inter-level mode".into());
        }
    }
    for &(a, b) in &plan.pairs {
        let (ra, rb) = (&runs[a], &runs[b]);
        match preset {
            Preset::ParallelismAblation => {
                let inter_used = rb.blocks.iter().all(|x| x.cycles.parallelism == Parallelism::Inter);
                if inter_used && rb.msgs_cycles > ra.msgs_cycles {
                    return fail(rb, format!("inter-level sampling took {} cycles, intra-level {}", rb.msgs_cycles, ra.msgs_cycles));
                }
                if ra.output_hash != rb.output_hash {
                    return fail(rb, "outputs depend on the parallelism mode".into());
                }
            }
            Preset::FusionAblation => {
                let delta = ra.traffic.dram_bits() as i64 - rb.traffic.dram_bits() as i64;
                if delta != 2 * rb.sampling_value_bits as i64 || ra.output_hash != rb.output_hash {
                    return fail(ra, format!("DRAM delta {delta} != 2 x {} sampling value bits", rb.sampling_value_bits));
                }
            }
            Preset::ReuseAblation => {
                if ra.output_hash != rb.output_hash || rb.traffic.fmap_fill_bits > ra.traffic.fmap_fill_bits {
                    return fail(rb, "reuse changed outputs or fetched more".into());
                }
            }
            Preset::PruningSweep => {
                if rb.spec.epsilon == 0.0 && rb.spec.k == 0.0 && rb.output_hash != ra.output_hash {
                    return fail(rb, "eps=0, k=0 output differs from the dense baseline".into());
                }
            }
            Preset::EndToEnd | Preset::Simulate => {}
        }
    }
    Ok(())
}

/// Checks that every ratio row is reproduced from the raw rows.
pub fn verify_ratios(bundle: &Bundle) -> Result<()> {
    for r in &bundle.ratios {
        let find = |id: usize| bundle.runs.iter().find(|x| x.id == id).ok_or_else(|| anyhow!("ratio refers to missing run {id}"));
        let again = RatioRecord::between(find(r.a)?, find(r.b)?);
        if &again != r {
            bail!("ratio row {} does not match its raw rows", r.label);
        }
    }
    Ok(())
}

pub fn run_experiment(preset: Preset, cfg: &RunConfig) -> Result<Bundle> {
    cfg.validate()?;
    let plan = expand(preset, cfg);
    let runs = plan
        .runs
        .par_iter()
        .enumerate()
        .map(|(i, spec)| execute(i, spec, cfg).with_context(|| format!("run {i} ({})", spec.label)))
        .collect::<Result<Vec<_>>>()?;
    check_runs(preset, &plan, &runs)?;
    let ratios = plan
        .pairs
        .iter()
        .map(|&(a, b)| RatioRecord::between(&runs[a], &runs[b]))
        .collect();
    let bundle = Bundle {
        preset,
        config_hash: cfg.hash(),
        config: cfg.clone(),
        runs,
        ratios,
    };
    verify_ratios(&bundle)?;
    Ok(bundle)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> RunConfig {
        RunConfig {
            levels: "8x8,4x4,2x2,2x2".into(),
            d_in: 8,
            n_heads: 2,
            n_points: 4,
            blocks: 2,
            sweep_epsilon: vec![0.0, 0.05],
            sweep_k: vec![0.0, 1.0],
            ..RunConfig::default()
        }
    }

    #[test]
    fn presets_expand_to_ordered_runs() {
        let cfg = small();
        assert_eq!(expand(Preset::FusionAblation, &cfg).runs.len(), 2);
        assert_eq!(expand(Preset::ParallelismAblation, &cfg).runs.len(), 4);
        let sweep = expand(Preset::PruningSweep, &cfg);
        assert_eq!(sweep.runs.len(), 5);
        assert_eq!(sweep.pairs.len(), 4);
        assert_eq!(sweep.runs[1].label, "eps=0/k=0");
        assert_eq!(expand(Preset::Simulate, &cfg).pairs.len(), 0);
    }

    #[test]
    fn every_preset_runs_and_passes_its_checks() {
        let cfg = small();
        for p in [
            Preset::ParallelismAblation,
            Preset::FusionAblation,
            Preset::ReuseAblation,
            Preset::PruningSweep,
            Preset::EndToEnd,
            Preset::Simulate,
        ] {
            let b = run_experiment(p, &cfg).unwrap();
            assert_eq!(b.runs.len(), expand(p, &cfg).runs.len());
            assert!(b.runs.iter().all(|r| r.blocks.len() == 2));
        }
    }

    #[test]
    fn strided_workload_collides_in_intra_mode() {
        let cfg = RunConfig {
            levels: "16x16,8x8,4x4,2x2".into(),
            ..small()
        };
        let b = run_experiment(Preset::ParallelismAblation, &cfg).unwrap();
        let strided = b.ratios.last().unwrap();
        assert!(strided.speedup_msgs > 1.5, "{}", strided.speedup_msgs);
    }

    #[test]
    fn tampered_ratios_are_caught() {
        let mut b = run_experiment(Preset::FusionAblation, &small()).unwrap();
        b.ratios[0].energy_ratio += 1e-9;
        assert!(verify_ratios(&b).is_err());
    }
}
