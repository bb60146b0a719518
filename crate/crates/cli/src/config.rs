//! Flat key-value run configuration.
//!
//! One TOML table without sections; units live in the key names. Every key
//! has a default, so an empty file is a valid configuration.

use std::path::Path;

use anyhow::{bail, Context, Result};
use defa_core::sim::{HardwareConfig, ModeFlags, Parallelism};
use defa_core::{BoundedRange, LevelOrder, LevelShape, ModelConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const CONFIG_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum OffsetProfile {
    /// Each offset copies one query channel: uniform in `±offset_spread_px`.
    Uniform,
    /// Dense Gaussian projection with standard deviation `offset_spread_px`.
    Gaussian,
    /// Same-level points two pixels apart on both axes, colliding in the
    /// 4×4 parity banks.
    Strided,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Switch {
    On,
    Off,
}

impl Switch {
    pub fn is_on(self) -> bool {
        self == Switch::On
    }
}

impl From<bool> for Switch {
    fn from(b: bool) -> Self {
        if b {
            Switch::On
        } else {
            Switch::Off
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub format_version: u32,
    pub seed: u64,

    /// `HxW` per level, comma separated.
    pub levels: String,
    pub level_order: LevelOrder,
    pub n_heads: usize,
    pub n_points: usize,
    pub d_in: usize,
    pub quant_bits: u32,
    /// `auto` or `WxH` half sizes per level, comma separated.
    pub range_half_px: String,
    pub blocks: usize,

    pub fwp_k: f64,
    pub pap_epsilon: f64,
    pub sweep_epsilon: Vec<f64>,
    pub sweep_k: Vec<f64>,

    pub offset_profile: OffsetProfile,
    pub offset_spread_px: f64,
    pub temperature: f64,

    pub parallelism: Parallelism,
    pub fusion: Switch,
    pub reuse: Switch,
    pub pruning: Switch,

    pub clock_mhz: f64,
    pub dram_bandwidth_gbps: f64,
    pub dram_pj_per_bit: f64,
    pub sram_read_pj_per_bit: f64,
    pub sram_write_pj_per_bit: f64,
    pub sram_word_channels: usize,
    pub mm_tile: usize,
    pub softmax_elems_per_cycle: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let hw = HardwareConfig::default();
        Self {
            format_version: CONFIG_FORMAT_VERSION,
            seed: 0,
            levels: "32x32,16x16,8x8,4x4".into(),
            level_order: LevelOrder::FinestFirst,
            n_heads: 4,
            n_points: 4,
            d_in: 32,
            quant_bits: 12,
            range_half_px: "auto".into(),
            blocks: 2,
            fwp_k: defa_core::tensor::DEFAULT_FWP_K,
            pap_epsilon: defa_core::tensor::DEFAULT_PAP_EPSILON,
            sweep_epsilon: vec![0.0, 0.005, 0.01, 0.02, 0.05],
            sweep_k: vec![0.0, 0.5, 1.0, 1.5],
            offset_profile: OffsetProfile::Uniform,
            offset_spread_px: 2.0,
            temperature: 0.5,
            parallelism: Parallelism::Inter,
            fusion: Switch::On,
            reuse: Switch::On,
            pruning: Switch::On,
            clock_mhz: hw.clock_mhz,
            dram_bandwidth_gbps: hw.dram_bandwidth_gbps,
            dram_pj_per_bit: hw.dram_pj_per_bit,
            sram_read_pj_per_bit: hw.sram_read_pj_per_bit,
            sram_write_pj_per_bit: hw.sram_write_pj_per_bit,
            sram_word_channels: hw.sram_word_channels,
            mm_tile: hw.mm_tile,
            softmax_elems_per_cycle: hw.softmax_elems_per_cycle,
        }
    }
}

fn parse_pairs(s: &str, what: &str) -> Result<Vec<(usize, usize)>> {
    s.split(',')
        .map(|part| {
            let part = part.trim();
            let (a, b) = part
                .split_once(['x', 'X'])
                .with_context(|| format!("{what}: expected AxB, got {part:?}"))?;
            Ok((
                a.trim().parse().with_context(|| format!("{what}: bad number in {part:?}"))?,
                b.trim().parse().with_context(|| format!("{what}: bad number in {part:?}"))?,
            ))
        })
        .collect()
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("in config {}", path.display()))
    }

    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn level_shapes(&self) -> Result<Vec<LevelShape>> {
        Ok(parse_pairs(&self.levels, "levels")?
            .into_iter()
            .map(|(h, w)| LevelShape::new(h, w))
            .collect())
    }

    pub fn model(&self) -> Result<ModelConfig> {
        let shapes = self.level_shapes()?;
        let mut m = ModelConfig::new(shapes.clone(), self.n_heads, self.n_points, self.d_in);
        m.level_order = self.level_order;
        m.quant_bits = self.quant_bits;
        m.fwp_k = self.fwp_k;
        m.pap_epsilon = self.pap_epsilon;
        if self.range_half_px.trim() != "auto" {
            let pairs = parse_pairs(&self.range_half_px, "range_half_px")?;
            if pairs.len() != shapes.len() {
                bail!("range_half_px lists {} ranges for {} levels", pairs.len(), shapes.len());
            }
            m.bounded_ranges = pairs.into_iter().map(|(w, h)| BoundedRange::new(w, h)).collect();
        }
        m.validate()?;
        Ok(m)
    }

    pub fn hardware(&self) -> HardwareConfig {
        HardwareConfig {
            clock_mhz: self.clock_mhz,
            dram_bandwidth_gbps: self.dram_bandwidth_gbps,
            dram_pj_per_bit: self.dram_pj_per_bit,
            sram_read_pj_per_bit: self.sram_read_pj_per_bit,
            sram_write_pj_per_bit: self.sram_write_pj_per_bit,
            sram_word_channels: self.sram_word_channels,
            mm_tile: self.mm_tile,
            ba_lanes: 4,
            softmax_elems_per_cycle: self.softmax_elems_per_cycle,
        }
    }

    pub fn flags(&self) -> ModeFlags {
        ModeFlags {
            parallelism: self.parallelism,
            fused: self.fusion.is_on(),
            reuse: self.reuse.is_on(),
            pruning: self.pruning.is_on(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.format_version != CONFIG_FORMAT_VERSION {
            bail!("config format_version {} is not supported (expected {CONFIG_FORMAT_VERSION})", self.format_version);
        }
        if self.blocks == 0 {
            bail!("blocks must be at least 1");
        }
        if !(self.offset_spread_px.is_finite() && self.offset_spread_px >= 0.0) {
            bail!("offset_spread_px={} must be finite and >= 0", self.offset_spread_px);
        }
        if self.temperature.is_nan() || self.temperature <= 0.0 {
            bail!("temperature={} must be positive (inf gives uniform probabilities)", self.temperature);
        }
        for &e in &self.sweep_epsilon {
            if !(0.0..1.0).contains(&e) {
                bail!("sweep_epsilon entry {e} outside [0, 1)");
            }
        }
        for &k in &self.sweep_k {
            if !(k.is_finite() && k >= 0.0) {
                bail!("sweep_k entry {k} must be finite and >= 0");
            }
        }
        self.model()?;
        self.hardware().validate()?;
        Ok(())
    }

    /// Canonical text: TOML with fields in declaration order.
    pub fn canonical(&self) -> String {
        toml::to_string(self).expect("config always serializes")
    }

    /// First 16 hex digits of the SHA-256 of the canonical text.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.canonical().as_bytes());
        hex::encode(&digest[..8])
    }
}
