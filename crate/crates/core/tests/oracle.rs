mod common;

use common::{random_instance, random_levels, rng, Instance};
use defa_core::reference::{msdeform_attn_reference, msdeform_attn_traced, AttnOptions};
use proptest::prelude::*;
use rand::Rng;

/// Straight transcription of the attention sum with explicit loops.
#[allow(clippy::needless_range_loop)]
fn naive(inst: &Instance) -> Vec<Vec<f64>> {
    let cfg = &inst.cfg;
    let (nq, d) = (inst.query.rows(), cfg.d_in);
    let (nh, nl, np) = (cfg.n_heads, cfg.n_levels(), cfg.n_points);
    let dh = d / nh;
    let dot = |a: &[f64], w: &defa_core::Matrix<f64>, c: usize| (0..a.len()).map(|k| a[k] * w.get(k, c)).sum::<f64>();

    let mut starts = vec![0];
    for s in &cfg.level_shapes {
        starts.push(starts.last().unwrap() + s.height * s.width);
    }
    let value: Vec<Vec<f64>> = (0..inst.fmap.rows())
        .map(|r| (0..d).map(|c| dot(inst.fmap.row(r), &inst.weights.value, c)).collect())
        .collect();

    let mut out = vec![vec![0.0; d]; nq];
    for q in 0..nq {
        let qrow = inst.query.row(q);
        for h in 0..nh {
            let mut logits = Vec::new();
            for l in 0..nl {
                for p in 0..np {
                    logits.push(dot(qrow, &inst.weights.attn, (h * nl + l) * np + p));
                }
            }
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logits.iter().map(|v| (v - m).exp()).collect();
            let z: f64 = e.iter().sum();
            for l in 0..nl {
                let (hgt, wid) = (cfg.level_shapes[l].height as i64, cfg.level_shapes[l].width as i64);
                let r = inst.refs.get(q, l);
                for p in 0..np {
                    let col = ((h * nl + l) * np + p) * 2;
                    let x = r[0] * wid as f64 - 0.5 + dot(qrow, &inst.weights.offset, col);
                    let y = r[1] * hgt as f64 - 0.5 + dot(qrow, &inst.weights.offset, col + 1);
                    let prob = e[l * np + p] / z;
                    let (x0, y0) = (x.floor(), y.floor());
                    let (fx, fy) = (x - x0, y - y0);
                    for (dx, dy, wgt) in [
                        (0, 0, (1.0 - fx) * (1.0 - fy)),
                        (1, 0, fx * (1.0 - fy)),
                        (0, 1, (1.0 - fx) * fy),
                        (1, 1, fx * fy),
                    ] {
                        let (px, py) = (x0 as i64 + dx, y0 as i64 + dy);
                        if px < 0 || py < 0 || px >= wid || py >= hgt {
                            continue;
                        }
                        let row = &value[starts[l] + (py * wid + px) as usize];
                        for c in 0..dh {
                            out[q][h * dh + c] += prob * wgt * row[h * dh + c];
                        }
                    }
                }
            }
        }
    }
    out
}

fn assert_close(inst: &Instance, tol: f64) {
    let got = msdeform_attn_reference(&inst.query, &inst.fmap, &inst.refs, &inst.weights, &inst.cfg).unwrap();
    let want = naive(inst);
    for (q, row) in want.iter().enumerate() {
        for (c, w) in row.iter().enumerate() {
            let g = got.get(q, c);
            assert!((g - w).abs() <= tol, "query {q} channel {c}: {g} vs {w}");
        }
    }
}

#[test]
fn matches_naive_oracle_on_random_instances() {
    let mut r = rng(0xDEFA);
    for seed in 0..300 {
        let nl = random_levels(&mut r);
        let spread = r.gen_range(0.1..3.0);
        assert_close(&random_instance(seed, nl, spread), 1e-9);
    }
}

#[test]
fn single_point_attention_returns_the_pixel() {
    let mut inst = random_instance(11, 1, 0.0);
    inst.cfg.n_points = 1;
    inst.cfg.n_heads = 1;
    inst.weights.attn = defa_core::Matrix::zeros(inst.cfg.d_in, 1);
    inst.weights.offset = defa_core::Matrix::zeros(inst.cfg.d_in, 2);
    inst.weights.value = defa_core::Matrix::identity(inst.cfg.d_in);
    let out = msdeform_attn_reference(&inst.query, &inst.fmap, &inst.refs, &inst.weights, &inst.cfg).unwrap();
    for (a, b) in out.as_slice().iter().zip(inst.fmap.as_slice()) {
        assert!((a - b).abs() < 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn oracle_equivalence(seed in any::<u64>(), nl in prop::sample::select(vec![1_usize, 2, 4]), spread in 0.0..4.0_f64) {
        assert_close(&random_instance(seed, nl, spread), 1e-9);
    }

    #[test]
    fn probabilities_sum_to_one(seed in any::<u64>(), nl in prop::sample::select(vec![1_usize, 2, 4])) {
        let inst = random_instance(seed, nl, 1.0);
        let t = msdeform_attn_traced(&inst.query, &inst.fmap, &inst.refs, &inst.weights, &inst.cfg, &AttnOptions::default()).unwrap();
        let (nq, nh, _, _) = t.probs.dims();
        for q in 0..nq {
            for h in 0..nh {
                let s: f64 = t.probs.row(q, h).iter().sum();
                prop_assert!((s - 1.0).abs() < 1e-12);
                prop_assert!(t.probs.row(q, h).iter().all(|&p| p > 0.0));
            }
        }
    }

    #[test]
    fn narrowed_samples_stay_in_their_range(seed in any::<u64>(), nl in prop::sample::select(vec![1_usize, 2, 4])) {
        let inst = random_instance(seed, nl, 3.0);
        let opts = AttnOptions { narrowing: Some(&inst.cfg.bounded_ranges), ..AttnOptions::default() };
        let t = msdeform_attn_traced(&inst.query, &inst.fmap, &inst.refs, &inst.weights, &inst.cfg, &opts).unwrap();
        let (nq, nh, nl, np) = t.plan.dims();
        for q in 0..nq { for h in 0..nh { for l in 0..nl { for p in 0..np {
            let s = t.plan.get(q, h, l, p);
            let r = inst.cfg.bounded_ranges[l];
            let shape = inst.cfg.level_shapes[l];
            prop_assert!((s.coord.0 - s.reference.0).abs() <= r.half_width as f64);
            prop_assert!((s.coord.1 - s.reference.1).abs() <= r.half_height as f64);
            prop_assert!(s.coord.0 >= 0.0 && s.coord.0 <= (shape.width - 1) as f64);
            prop_assert!(s.coord.1 >= 0.0 && s.coord.1 <= (shape.height - 1) as f64);
        }}}}
    }
}
