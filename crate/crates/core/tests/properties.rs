use proptest::prelude::*;
use svrc::entropy::{range_decode, range_encode, CodingTable};
use svrc::eval::{bd_metrics, interval_report, psnr, RdPoint};
use svrc::quantizer::{hard_quantize, interpolate, reconstruction_levels, uniform_step_quantize, StanhLayer};
use svrc::Tensor;

/// Positive steps and boundaries strictly inside each gap.
fn layer_strategy(levels: std::ops::Range<usize>) -> impl Strategy<Value = StanhLayer> {
    levels
        .prop_flat_map(|l| {
            (
                prop::collection::vec(0.05f64..3.0, l - 1),
                prop::collection::vec(0.05f64..0.95, l - 1),
            )
        })
        .prop_map(|(w, frac)| {
            let recon = reconstruction_levels(&w);
            let b = recon.windows(2).zip(&frac).map(|(p, f)| p[0] + f * (p[1] - p[0])).collect();
            StanhLayer::new(w, b).unwrap()
        })
}

fn layer_pair() -> impl Strategy<Value = (StanhLayer, StanhLayer)> {
    (2usize..24).prop_flat_map(|l| (layer_strategy(l..l + 1), layer_strategy(l..l + 1)))
}

/// Counts summing to `2^16`, often with several count-1 symbols.
fn table_strategy() -> impl Strategy<Value = CodingTable> {
    (1usize..40, prop::collection::vec(0u32..4, 40), any::<u64>()).prop_map(|(n, kinds, salt)| {
        let mut counts: Vec<u32> = kinds[..n]
            .iter()
            .enumerate()
            .map(|(i, &k)| if k == 0 { 1 } else { 1 + ((salt >> (i % 60)) as u32 & 0x3ff) * k })
            .collect();
        let total: u32 = counts.iter().sum();
        let target = 1u32 << 16;
        let heavy = (0..n).max_by_key(|&i| counts[i]).unwrap();
        counts[heavy] += target - total;
        CodingTable::from_counts(counts, 16).unwrap()
    })
}

fn curve_strategy() -> impl Strategy<Value = Vec<RdPoint>> {
    (
        0.02f64..0.2,
        prop::collection::vec(1.2f64..2.5, 5),
        20.0f64..30.0,
        prop::collection::vec(0.5f64..4.0, 5),
    )
        .prop_map(|(start, ratios, q0, gains)| {
            let mut bpp = start;
            let mut q = q0;
            ratios
                .iter()
                .zip(&gains)
                .map(|(r, g)| {
                    bpp *= r;
                    q += g;
                    RdPoint {
                        label: String::new(),
                        bpp,
                        psnr: q,
                    }
                })
                .collect()
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn soft_quantizer_is_increasing(layer in layer_strategy(2..20), beta in 1.0f64..200.0, y in -40.0f64..40.0, dy in 1e-6f64..0.5) {
        prop_assert!(layer.soft(y + dy, beta) >= layer.soft(y, beta));
    }

    #[test]
    fn hard_quantizer_is_idempotent(layer in layer_strategy(2..30), ys in prop::collection::vec(-60.0f64..60.0, 1..40)) {
        let y = Tensor::from_vec(ys);
        let (once, idx) = hard_quantize(&y, &layer);
        let (twice, idx2) = hard_quantize(&once, &layer);
        prop_assert_eq!(once, twice);
        prop_assert_eq!(idx, idx2);
    }

    #[test]
    fn interpolation_keeps_invariants((a, b) in layer_pair(), rho in 0.0f64..=1.0) {
        let mix = interpolate(&a, &b, rho).unwrap();
        prop_assert!(mix.weights().iter().all(|&w| w > 0.0));
        prop_assert!(mix.boundaries().windows(2).all(|p| p[0] < p[1]));
        prop_assert!(mix.is_consistent());
        prop_assert_eq!(mix.num_levels(), a.num_levels());
    }

    #[test]
    fn uniform_layer_matches_uniform_step(half in 1usize..30, step in 0.1f64..3.0, frac in -1.0f64..1.0) {
        let levels = 2 * half + 1;
        let r = step * half as f64;
        let layer = StanhLayer::init_uniform(levels, -r, r).unwrap();
        let y = frac * r;
        let off_midpoint = ((y / step).fract().abs() - 0.5).abs() > 1e-9;
        prop_assume!(off_midpoint);
        let (hard, _) = hard_quantize(&Tensor::scalar(y), &layer);
        let uniform = uniform_step_quantize(&Tensor::scalar(y), step).unwrap();
        prop_assert!((hard.item() - uniform.item()).abs() < 1e-9 * r.max(1.0));
    }

    #[test]
    fn interval_widths_partition_the_range(layer in layer_strategy(2..30)) {
        let l = layer.num_levels();
        let report = interval_report(&[("x".to_string(), layer.clone())], l).unwrap();
        let total: f64 = report.rows.iter().map(|r| r.width).sum();
        let span = layer.levels()[l - 1] - layer.levels()[0];
        prop_assert!((total - span).abs() <= 1e-9 * span.max(1.0));
        prop_assert!(report.rows.iter().all(|r| r.width > 0.0));
    }

    #[test]
    fn bd_psnr_is_antisymmetric(a in curve_strategy(), b in curve_strategy()) {
        if let (Ok(ab), Ok(ba)) = (bd_metrics(&a, &b), bd_metrics(&b, &a)) {
            prop_assert!((ab.psnr_db + ba.psnr_db).abs() <= 1e-9);
        }
        let same = bd_metrics(&a, &a).unwrap();
        prop_assert_eq!((same.rate_percent, same.psnr_db), (0.0, 0.0));
    }

    #[test]
    fn psnr_falls_with_noise(seed in any::<u64>(), amp in 0.001f64..0.2) {
        let n = 3 * 8 * 8;
        let base: Vec<f64> = (0..n).map(|i| ((i as u64 ^ seed) % 97) as f64 / 96.0).collect();
        let pattern: Vec<f64> = (0..n).map(|i| if (i as u64).wrapping_mul(seed | 1).is_multiple_of(3) { 1.0 } else { -1.0 }).collect();
        let x = Tensor::new(vec![1, 3, 8, 8], base.clone()).unwrap();
        let noisy = |a: f64| Tensor::new(vec![1, 3, 8, 8], base.iter().zip(&pattern).map(|(v, p)| v + a * p).collect()).unwrap();
        prop_assert!(psnr(&x, &noisy(amp)).unwrap() > psnr(&x, &noisy(amp * 1.5)).unwrap());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn range_coder_round_trips(
        palette in prop::collection::vec(table_strategy(), 1..4),
        picks in prop::collection::vec((any::<prop::sample::Index>(), any::<u32>()), 0..300),
    ) {
        let tables: Vec<CodingTable> = picks.iter().map(|(i, _)| palette[i.index(palette.len())].clone()).collect();
        let symbols: Vec<usize> = picks.iter().zip(&tables).map(|((_, r), t)| t.lookup(r & 0xffff)).collect();
        let bytes = range_encode(&symbols, &tables).unwrap();
        prop_assert_eq!(range_decode(&bytes, &tables, symbols.len()).unwrap(), symbols);
    }

    #[test]
    fn rare_symbols_round_trip(table in table_strategy(), len in 1usize..200) {
        // every symbol in turn, including the count-1 ones
        let n = table.num_levels();
        let symbols: Vec<usize> = (0..len).map(|i| (i * 7) % n).collect();
        let tables = vec![table; len];
        let bytes = range_encode(&symbols, &tables).unwrap();
        prop_assert_eq!(range_decode(&bytes, &tables, len).unwrap(), symbols);
    }
}
