//! Shared fixtures for the criterion benches.

use defa_cli::config::RunConfig;
use defa_cli::workload::{generate_workload, query_from, Workload, WorkloadSpec};
use defa_core::{BlockInputs, Matrix, ModelConfig};

/// One block of a synthetic workload, ready to simulate.
pub struct Fixture {
    pub config: RunConfig,
    pub model: ModelConfig,
    pub query: Matrix<f64>,
    pub workload: Workload,
}

impl Fixture {
    pub fn new(levels: &str) -> Self {
        let config = RunConfig {
            levels: levels.into(),
            blocks: 1,
            ..RunConfig::default()
        };
        let model = config.model().expect("bench config is valid");
        let workload = generate_workload(&WorkloadSpec::from_config(&config).expect("bench config is valid")).expect("workload");
        let query = query_from(&workload.fmap);
        Self {
            config,
            model,
            query,
            workload,
        }
    }

    pub fn inputs(&self) -> BlockInputs<'_> {
        BlockInputs {
            query: &self.query,
            fmap: &self.workload.fmap,
            refs: &self.workload.refs,
            weights: &self.workload.weights[0],
            fmap_mask: None,
            block: 0,
        }
    }
}

/// Deterministic corner values and fractions for BI kernels.
pub fn bi_cells(n: usize) -> Vec<([f64; 4], f64, f64)> {
    let mut state = 0x9E37_79B9_7F4A_7C15_u64;
    let mut next = move || {
        state ^= state << 13;
        state ^= state >> 7;
        state ^= state << 17;
        (state >> 11) as f64 / (1_u64 << 53) as f64
    };
    (0..n)
        .map(|_| ([next() * 2.0 - 1.0, next() * 2.0 - 1.0, next() * 2.0 - 1.0, next() * 2.0 - 1.0], next(), next()))
        .collect()
}
