#![allow(dead_code)]

use defa_core::{LevelShape, Matrix, ModelConfig, ReferencePoints, WeightSet};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub struct Instance {
    pub cfg: ModelConfig,
    pub query: Matrix<f64>,
    pub fmap: Matrix<f64>,
    pub refs: ReferencePoints,
    pub weights: WeightSet,
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn pyramid(rng: &mut ChaCha8Rng, n_levels: usize) -> Vec<LevelShape> {
    let mut h = rng.gen_range(2..=8);
    let mut w = rng.gen_range(2..=8);
    let mut shapes = Vec::new();
    for _ in 0..n_levels {
        shapes.push(LevelShape::new(h, w));
        h = h.div_ceil(2);
        w = w.div_ceil(2);
    }
    shapes
}

fn matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, spread: f64) -> Matrix<f64> {
    if spread == 0.0 {
        return Matrix::zeros(rows, cols);
    }
    Matrix::from_fn(rows, cols, |_, _| rng.gen_range(-spread..spread))
}

/// Small random layer; `offset_spread` scales the offset weights.
pub fn random_instance(seed: u64, n_levels: usize, offset_spread: f64) -> Instance {
    let mut rng = rng(seed);
    let shapes = pyramid(&mut rng, n_levels);
    let n_heads = rng.gen_range(1..=4);
    let d_in = n_heads * rng.gen_range(1..=16 / n_heads);
    let n_points = rng.gen_range(1..=4);
    let cfg = ModelConfig::new(shapes, n_heads, n_points, d_in);
    cfg.validate().unwrap();
    let n_in = cfg.n_in();
    let layout = cfg.layout().unwrap();
    Instance {
        query: matrix(&mut rng, n_in, d_in, 1.0),
        fmap: matrix(&mut rng, n_in, d_in, 1.0),
        refs: ReferencePoints::grid_centers(&layout),
        weights: WeightSet {
            attn: matrix(&mut rng, d_in, cfg.attn_cols(), 1.5),
            value: matrix(&mut rng, d_in, d_in, 1.0),
            offset: matrix(&mut rng, d_in, cfg.offset_cols(), offset_spread),
        },
        cfg,
    }
}

pub fn random_levels(rng: &mut ChaCha8Rng) -> usize {
    [1, 2, 4][rng.gen_range(0..3)]
}
