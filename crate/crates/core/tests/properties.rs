// SPDX-License-Identifier: Apache-2.0

use std::path::{Path, PathBuf};

use edge_core::features::{effective_pad_distance, NormStats, Features, FeatureTensor};
use edge_core::golden::{
    build_ir_system, build_thermal_system, cg_jacobi, dense_cholesky_solve, ir_drop_map, solve,
    solve_transient_thermal, temperature_map, SolverOptions,
};
use edge_core::gridio::{
    crop, format_grid, format_pgm, pad_to_multiple, parse_grid, read_grid, write_grid, ChipSpec, GridKind,
    GridMap, GridSequence,
};
use edge_core::models::{StaticEdge, StaticEdgeConfig};
use edge_core::nn::{maxpool2, upsample2, Tensor};
use edge_core::pipeline::{abs_error_stats, split, SplitSpec};
use edge_core::synth::{gen_pad_layout, gen_pdn_density, gen_power_map, CaseEntry, Manifest, PadLayout, SynthConfig};
use proptest::prelude::*;

fn grid(rows: usize, cols: usize, kind: GridKind, values: Vec<f64>) -> GridMap {
    GridMap::new(rows, cols, 250.0, kind, values).unwrap()
}

fn dims(max: usize) -> impl Strategy<Value = (usize, usize)> {
    (1..=max, 1..=max)
}

fn positive_map(max: usize) -> impl Strategy<Value = GridMap> {
    dims(max).prop_flat_map(|(r, c)| {
        prop::collection::vec(1e-4..1.0f64, r * c).prop_map(move |v| grid(r, c, GridKind::Power, v))
    })
}

/// Random power, density and pad layout on one die of at most `max` x `max` tiles.
fn ir_die(max: usize) -> impl Strategy<Value = (GridMap, GridMap, PadLayout)> {
    (2..=max, 2..=max)
        .prop_flat_map(|(r, c)| {
            (
                prop::collection::vec(0.0..0.05f64, r * c),
                prop::collection::vec(0.1..=1.0f64, r * c),
                2..=4usize,
                0..4usize,
                0..4usize,
                Just((r, c)),
            )
        })
        .prop_filter_map("layout has no pad", |(p, d, pitch, or, oc, (r, c))| {
            let pads = PadLayout::new(pitch, or % pitch, oc % pitch, r, c).ok()?;
            Some((grid(r, c, GridKind::Power, p), grid(r, c, GridKind::PdnDensity, d), pads))
        })
}

fn rel_diff(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let den: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    if den == 0.0 {
        num
    } else {
        num / den
    }
}

fn tight() -> SolverOptions {
    SolverOptions {
        tol: 1e-13,
        ..SolverOptions::default()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn grid_text_round_trip(kind in prop::sample::select(vec![GridKind::Power, GridKind::Temperature, GridKind::IrDrop]),
                            (r, c) in dims(9),
                            seed in any::<u64>()) {
        let mut rng = edge_core::rng::Pcg32::stream(seed, 0, "prop");
        let values: Vec<f64> = (0..r * c).map(|_| rng.uniform(0.0, 1e3) * 10f64.powi(rng.below(9) as i32 - 6)).collect();
        let map = grid(r, c, kind, values);
        let text = format_grid(&map);
        let back = parse_grid(&text, Path::new("mem")).unwrap();
        prop_assert_eq!(&back, &map);
        prop_assert_eq!(format_grid(&back), text);
    }

    #[test]
    fn grid_file_round_trip(map in positive_map(7)) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.grid");
        write_grid(&map, &path).unwrap();
        prop_assert_eq!(read_grid(&path).unwrap(), map);
    }

    #[test]
    fn pad_then_crop_is_identity(map in positive_map(13), m in prop::sample::select(vec![1usize, 2, 4, 8])) {
        let (padded, rec) = pad_to_multiple(&map, m).unwrap();
        prop_assert_eq!(padded.rows() % m, 0);
        prop_assert_eq!(padded.cols() % m, 0);
        prop_assert_eq!(crop(&padded, &rec).unwrap(), map);
    }

    #[test]
    fn pgm_matches_dims_and_range(map in positive_map(9)) {
        let text = format_pgm(&map);
        let body: Vec<&str> = text.lines().filter(|l| !l.starts_with('#')).collect();
        prop_assert_eq!(body[0], "P2");
        prop_assert_eq!(body[1], format!("{} {}", map.cols(), map.rows()));
        let px: Vec<u32> = body[3..].iter().flat_map(|l| l.split_whitespace()).map(|t| t.parse().unwrap()).collect();
        prop_assert_eq!(px.len(), map.rows() * map.cols());
        prop_assert!(px.iter().all(|&v| v <= 255));
    }

    #[test]
    fn generated_inputs_give_spd_systems(seed in any::<u64>(), idx in 0u64..1000) {
        let cfg = SynthConfig {
            seed,
            chip: ChipSpec::default().with_dims(12, 10),
            pad_pitch: (2, 4),
            sigma_tiles: (0.5, 2.0),
            ..SynthConfig::default()
        };
        let power = gen_power_map(&cfg, idx).unwrap();
        let density = gen_pdn_density(&cfg, idx).unwrap();
        let pads = gen_pad_layout(&cfg, idx).unwrap();
        let ir = build_ir_system(&power, &density, &pads, &cfg.chip).unwrap();
        prop_assert!(ir.g.is_symmetric());
        prop_assert!(ir.g.is_diagonally_dominant());
        let th = build_thermal_system(&power, &cfg.chip).unwrap();
        prop_assert!(th.g.is_symmetric());
        prop_assert!(th.g.is_diagonally_dominant());
    }

    #[test]
    fn cg_matches_dense_on_small_dies((power, density, pads) in ir_die(16)) {
        let chip = ChipSpec::default().with_dims(power.rows(), power.cols());
        let sys = build_ir_system(&power, &density, &pads, &chip).unwrap();
        let dense = dense_cholesky_solve(&sys.g, &sys.j).unwrap();
        let mut x = vec![0.0; sys.n()];
        cg_jacobi(&sys.g, &sys.j, &mut x, 1e-13, 20 * sys.n().max(1)).unwrap();
        prop_assert!(rel_diff(&x, &dense) <= 1e-8, "rel {}", rel_diff(&x, &dense));
    }

    #[test]
    fn ir_drop_nonnegative_and_zero_at_pads((power, density, pads) in ir_die(12)) {
        let chip = ChipSpec::default().with_dims(power.rows(), power.cols());
        let drop = ir_drop_map(&power, &density, &pads, &chip, &tight()).unwrap();
        prop_assert!(drop.values().iter().all(|&v| v >= 0.0));
        for &(r, c) in pads.pads() {
            prop_assert_eq!(drop.get(r, c), 0.0);
        }
    }

    #[test]
    fn ir_solve_is_linear((p1, density, pads) in ir_die(10), shift in 0.0..0.05f64, a in 0.1..3.0f64, b in 0.1..3.0f64) {
        let chip = ChipSpec::default().with_dims(p1.rows(), p1.cols());
        let p2 = p1.with_values(GridKind::Power, p1.values().iter().rev().map(|v| v + shift).collect()).unwrap();
        let s1 = build_ir_system(&p1, &density, &pads, &chip).unwrap();
        let s2 = build_ir_system(&p2, &density, &pads, &chip).unwrap();
        let mut s3 = s1.clone();
        s3.j = s1.j.iter().zip(&s2.j).map(|(x, y)| a * x + b * y).collect();
        let (x1, x2, x3) = (solve(&s1, &tight()).unwrap(), solve(&s2, &tight()).unwrap(), solve(&s3, &tight()).unwrap());
        let combo: Vec<f64> = x1.iter().zip(&x2).map(|(u, v)| a * u + b * v).collect();
        prop_assert!(rel_diff(&x3, &combo) <= 1e-9, "rel {}", rel_diff(&x3, &combo));
    }

    #[test]
    fn transient_rises_monotonically_to_steady_state(map in positive_map(6)) {
        let chip = ChipSpec::default().with_dims(map.rows(), map.cols());
        let frames = vec![map.clone(); 30];
        let seq = GridSequence::new(frames, 60.0).unwrap();
        let out = solve_transient_thermal(&seq, &chip, &tight()).unwrap();
        let steady = temperature_map(&map, &chip, &tight()).unwrap();
        let mut prev = vec![chip.ambient_c; map.rows() * map.cols()];
        for f in out.frames() {
            for ((&t, &p), &s) in f.values().iter().zip(&prev).zip(steady.values()) {
                prop_assert!(t >= p - 1e-9);
                prop_assert!(t <= s + 1e-9);
            }
            prev = f.values().to_vec();
        }
    }

    #[test]
    fn effective_distance_matches_kahan_sum((_, _, pads) in ir_die(12)) {
        let (rows, cols) = pads.dims();
        let px = 250.0;
        let d = effective_pad_distance(&pads, rows, cols, px).unwrap();
        for r in 0..rows {
            for c in 0..cols {
                // Independent order: reverse traversal with compensated summation.
                let (mut sum, mut comp) = (0.0f64, 0.0f64);
                let mut min_d = f64::INFINITY;
                for &(pr, pc) in pads.pads().iter().rev() {
                    let di = (px * ((r as f64 - pr as f64).powi(2) + (c as f64 - pc as f64).powi(2)).sqrt()).max(px / 2.0);
                    min_d = min_d.min(di);
                    let y = 1.0 / di - comp;
                    let t = sum + y;
                    comp = (t - sum) - y;
                    sum = t;
                }
                let oracle = 1.0 / sum;
                let got = d.get(r, c);
                prop_assert!((got - oracle).abs() <= 1e-12 * oracle, "{got} vs {oracle}");
                prop_assert!(got <= min_d * (1.0 + 1e-15));
            }
        }
    }

    #[test]
    fn metrics_match_two_pass_oracle(pairs in (1usize..4, 1usize..6, 1usize..6).prop_flat_map(|(f, r, c)| {
        prop::collection::vec((prop::collection::vec(-5.0..5.0f64, r * c), prop::collection::vec(-5.0..5.0f64, r * c)), f)
            .prop_map(move |v| (r, c, v))
    })) {
        let (r, c, frames) = pairs;
        let pred: Vec<GridMap> = frames.iter().map(|(p, _)| grid(r, c, GridKind::Temperature, p.clone())).collect();
        let truth: Vec<GridMap> = frames.iter().map(|(_, t)| grid(r, c, GridKind::Temperature, t.clone())).collect();
        let (avg, max) = abs_error_stats(&pred, &truth).unwrap();
        let mut sum = 0.0;
        let mut n = 0usize;
        for (p, t) in &frames {
            for i in 0..p.len() {
                sum += (p[i] - t[i]).abs();
                n += 1;
            }
        }
        let mut omax = 0.0f64;
        for (p, t) in &frames {
            for i in 0..p.len() {
                omax = omax.max((p[i] - t[i]).abs());
            }
        }
        prop_assert_eq!(avg, sum / n as f64);
        prop_assert_eq!(max, omax);
    }

    #[test]
    fn maxpool_undoes_upsample(n in 1usize..3, c in 1usize..4, h in 1usize..6, w in 1usize..6, seed in any::<u64>()) {
        let mut rng = edge_core::rng::Pcg32::stream(seed, 0, "prop");
        let x = Tensor::<f64>::from_fn(n, c, h, w, |_| rng.normal());
        let (y, _) = maxpool2(&upsample2(&x)).unwrap();
        prop_assert_eq!(y, x);
    }

    #[test]
    fn norm_stats_round_trip(maps in prop::collection::vec(positive_map(4).prop_filter("1x1", |m| m.rows() * m.cols() > 1), 1..4)) {
        let feats: Vec<Features> = maps.iter().map(|m| Features::Static(FeatureTensor::new(vec![m.clone()]).unwrap())).collect();
        let labels: Vec<Vec<GridMap>> = maps.iter().map(|m| vec![m.clone()]).collect();
        let fr: Vec<&Features> = feats.iter().collect();
        let lr: Vec<&[GridMap]> = labels.iter().map(|l| l.as_slice()).collect();
        let Ok(stats) = NormStats::fit(&fr, &lr) else { return Ok(()); };
        for f in &feats {
            let t = &f.frames()[0];
            let back = stats.invert(&stats.apply(t).unwrap()).unwrap();
            for (a, b) in back.channels()[0].values().iter().zip(t.channels()[0].values()) {
                prop_assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
            }
        }
        let text = stats.format();
        prop_assert_eq!(NormStats::parse(&text, Path::new("mem")).unwrap(), stats);
    }
}

fn manifest(n: usize) -> Manifest {
    Manifest {
        base_dir: PathBuf::from("/data"),
        seed: None,
        cases: (0..n)
            .map(|i| CaseEntry {
                id: format!("case{i:04}"),
                power: format!("case{i:04}/power.grid").into(),
                pdn: format!("case{i:04}/pdn.grid").into(),
                pads: format!("case{i:04}/pads.txt").into(),
                sequence: None,
            })
            .collect(),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn split_is_deterministic_and_exhaustive(n in 10usize..300, seed in any::<u64>(), train in 0.5..0.9f64) {
        let val = (1.0 - train) / 2.0;
        let spec = SplitSpec { train, val, test: 1.0 - train - val, seed };
        let m = manifest(n);
        let a = split(&m, &spec).unwrap();
        let b = split(&m, &spec).unwrap();
        prop_assert_eq!(&a.train, &b.train);
        prop_assert_eq!(&a.val, &b.val);
        prop_assert_eq!(&a.test, &b.test);
        let mut ids: Vec<&str> = a.train.cases.iter().chain(&a.val.cases).chain(&a.test.cases).map(|c| c.id.as_str()).collect();
        prop_assert_eq!(ids.len(), n);
        ids.sort_unstable();
        ids.dedup();
        prop_assert_eq!(ids.len(), n);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn unet_restores_spatial_dims(h in 1usize..4, w in 1usize..4, seed in any::<u64>()) {
        let net = StaticEdge::<f32>::build(StaticEdgeConfig::iredge(), seed).unwrap();
        let m = net.size_multiple();
        let x = Tensor::<f32>::from_fn(1, 3, h * m, w * m, |i| (i as f32 * 0.37).sin());
        let y = net.forward(&x).unwrap();
        prop_assert_eq!(y.shape(), (1, 1, h * m, w * m));
    }
}
