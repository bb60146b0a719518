//! Seeded synthetic workloads.
//!
//! Every tensor comes from its own ChaCha8 stream: the key is the seed as
//! 8 little-endian bytes followed by 24 zero bytes, and the stream id is
//! `(block << 8) | tensor` with tensor ids 0 = fmap, 1 = `W_A`, 2 = `W_V`,
//! 3 = `W_S`, 4 = offset channel choice. Uniform draws take the top 53 bits
//! of `next_u64`; normal draws use Box-Muller on two uniforms and keep the
//! cosine branch. Matrices are filled row-major.
//!
//! Channel 0 of every query is the constant 1, acting as the bias input of
//! the projections.

use anyhow::{bail, Result};
use defa_core::{FmapLayout, Matrix, ModelConfig, ReferencePoints, WeightSet};
use rand::RngCore;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

use crate::config::{OffsetProfile, RunConfig};

const FMAP: u64 = 0;
const W_ATTN: u64 = 1;
const W_VALUE: u64 = 2;
const W_OFFSET: u64 = 3;
const OFFSET_CHOICE: u64 = 4;

/// Everything that determines a workload bit for bit.
#[derive(Debug, Clone)]
pub struct WorkloadSpec {
    pub seed: u64,
    pub model: ModelConfig,
    pub profile: OffsetProfile,
    pub offset_spread_px: f64,
    pub temperature: f64,
    pub blocks: usize,
}

impl WorkloadSpec {
    pub fn from_config(cfg: &RunConfig) -> Result<Self> {
        Ok(Self {
            seed: cfg.seed,
            model: cfg.model()?,
            profile: cfg.offset_profile,
            offset_spread_px: cfg.offset_spread_px,
            temperature: cfg.temperature,
            blocks: cfg.blocks,
        })
    }
}

#[derive(Debug, Clone)]
pub struct Workload {
    pub layout: FmapLayout,
    /// Feature map entering block 0.
    pub fmap: Matrix<f64>,
    pub refs: ReferencePoints,
    pub weights: Vec<WeightSet>,
}

/// Draw source for one tensor.
pub struct Stream(ChaCha8Rng);

impl Stream {
    pub fn new(seed: u64, block: usize, tensor: u64) -> Self {
        let mut key = [0_u8; 32];
        key[..8].copy_from_slice(&seed.to_le_bytes());
        let mut rng = ChaCha8Rng::from_seed(key);
        rng.set_stream(((block as u64) << 8) | tensor);
        Self(rng)
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        (self.0.next_u64() >> 11) as f64 * (1.0 / (1_u64 << 53) as f64)
    }

    /// Uniform in `[-1, 1)`.
    pub fn symmetric(&mut self) -> f64 {
        2.0 * self.uniform() - 1.0
    }

    pub fn normal(&mut self) -> f64 {
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    pub fn below(&mut self, n: u64) -> u64 {
        self.0.next_u64() % n
    }
}

/// The query of a block: its input feature map with channel 0 set to 1.
pub fn query_from(fmap: &Matrix<f64>) -> Matrix<f64> {
    let mut q = fmap.clone();
    for r in 0..q.rows() {
        q.set(r, 0, 1.0);
    }
    q
}

fn block_weights(spec: &WorkloadSpec, block: usize) -> WeightSet {
    let m = &spec.model;
    let d = m.d_in;
    let unit = (3.0 / d as f64).sqrt();

    let mut s = Stream::new(spec.seed, block, W_ATTN);
    let attn_gain = if spec.temperature.is_infinite() { 0.0 } else { unit / spec.temperature };
    let attn = Matrix::from_fn(d, m.attn_cols(), |_, _| s.normal() * attn_gain);

    let mut s = Stream::new(spec.seed, block, W_VALUE);
    let value = Matrix::from_fn(d, d, |_, _| s.symmetric() * unit);

    let spread = spec.offset_spread_px;
    let offset = match spec.profile {
        OffsetProfile::Gaussian => {
            let mut s = Stream::new(spec.seed, block, W_OFFSET);
            Matrix::from_fn(d, m.offset_cols(), |_, _| s.normal() * spread * unit)
        }
        OffsetProfile::Uniform => {
            let mut s = Stream::new(spec.seed, block, OFFSET_CHOICE);
            let mut w = Matrix::zeros(d, m.offset_cols());
            for c in 0..m.offset_cols() {
                let row = if d > 1 { 1 + s.below(d as u64 - 1) as usize } else { 0 };
                let sign = if s.below(2) == 0 { 1.0 } else { -1.0 };
                w.set(row, c, sign * spread);
            }
            w
        }
        OffsetProfile::Strided => {
            let mut w = Matrix::zeros(d, m.offset_cols());
            for h in 0..m.n_heads {
                for l in 0..m.n_levels() {
                    for p in 0..m.n_points {
                        let c = defa_core::geometry::offset_column(m, h, l, p);
                        let k = p % 4;
                        w.set(0, c, if k & 1 == 1 { 2.25 } else { -1.75 });
                        w.set(0, c + 1, if k & 2 == 2 { 2.25 } else { -1.75 });
                    }
                }
            }
            w
        }
    };
    WeightSet { attn, value, offset }
}

pub fn generate_workload(spec: &WorkloadSpec) -> Result<Workload> {
    let m = &spec.model;
    if m.d_in == 0 || m.n_heads == 0 || m.n_points == 0 || m.level_shapes.is_empty() || spec.blocks == 0 {
        bail!("workload dimensions must be positive");
    }
    m.validate()?;
    if !m.offsets_in_pixels {
        bail!("synthetic workloads emit pixel offsets");
    }
    let layout = m.layout()?;
    let mut s = Stream::new(spec.seed, 0, FMAP);
    let fmap = Matrix::from_fn(layout.len(), m.d_in, |_, _| s.symmetric());
    let refs = ReferencePoints::grid_centers(&layout);
    let weights = (0..spec.blocks).map(|b| block_weights(spec, b)).collect();
    Ok(Workload {
        layout,
        fmap,
        refs,
        weights,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(profile: OffsetProfile, temperature: f64) -> WorkloadSpec {
        let cfg = RunConfig {
            levels: "8x8,4x4".into(),
            d_in: 8,
            n_heads: 2,
            offset_profile: profile,
            temperature,
            ..RunConfig::default()
        };
        WorkloadSpec::from_config(&cfg).unwrap()
    }

    #[test]
    fn same_seed_same_tensors() {
        for p in [OffsetProfile::Uniform, OffsetProfile::Gaussian, OffsetProfile::Strided] {
            let a = generate_workload(&spec(p, 1.0)).unwrap();
            let b = generate_workload(&spec(p, 1.0)).unwrap();
            assert_eq!(a.fmap, b.fmap);
            assert_eq!(a.weights, b.weights);
        }
        let mut other = spec(OffsetProfile::Uniform, 1.0);
        other.seed = 1;
        assert_ne!(generate_workload(&other).unwrap().fmap, generate_workload(&spec(OffsetProfile::Uniform, 1.0)).unwrap().fmap);
    }

    #[test]
    fn streams_are_independent_of_each_other() {
        let mut a = Stream::new(5, 0, W_ATTN);
        let mut b = Stream::new(5, 0, W_VALUE);
        let mut c = Stream::new(5, 1, W_ATTN);
        let (x, y, z) = (a.uniform(), b.uniform(), c.uniform());
        assert!(x != y && x != z && y != z);
    }

    #[test]
    fn draws_have_the_documented_ranges() {
        let mut s = Stream::new(9, 0, 0);
        let (mut sum, mut sq) = (0.0, 0.0);
        let n = 20_000;
        for _ in 0..n {
            let u = s.uniform();
            assert!((0.0..1.0).contains(&u));
            let z = s.normal();
            assert!(z.is_finite());
            sum += z;
            sq += z * z;
        }
        let mean = sum / n as f64;
        assert!(mean.abs() < 0.05);
        assert!((sq / n as f64 - 1.0).abs() < 0.05);
    }

    #[test]
    fn uniform_offsets_stay_within_the_spread() {
        let sp = spec(OffsetProfile::Uniform, 1.0);
        let w = generate_workload(&sp).unwrap();
        let off = query_from(&w.fmap).matmul(&w.weights[0].offset).unwrap();
        assert!(off.as_slice().iter().all(|v| v.abs() <= sp.offset_spread_px));
    }

    #[test]
    fn query_has_a_bias_channel() {
        let w = generate_workload(&spec(OffsetProfile::Uniform, 1.0)).unwrap();
        let q = query_from(&w.fmap);
        assert!((0..q.rows()).all(|r| q.get(r, 0) == 1.0));
        assert_eq!(q.get(3, 1), w.fmap.get(3, 1));
    }
}
