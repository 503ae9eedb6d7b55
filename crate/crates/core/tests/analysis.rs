use bibit::analysis::{
    arch_preset, balance_check, calibrate_seq_len, compare_cost, entropy_ablation, entropy_table,
    estimate_cost, mismatch_table, simulate_mismatch, threshold_curve, BitAssignment,
    MismatchSimConfig, ARCH_PRESETS,
};
use bibit::attention::binary_entropy;

#[test]
fn block_cost_scales_with_depth() {
    let base = arch_preset("bert-base").unwrap();
    let deep = bibit::model::TransformerConfig { layers: 24, ..base };
    for bits in [
        BitAssignment::FULL,
        BitAssignment::BINARY,
        "2-8-8".parse().unwrap(),
    ] {
        let a = estimate_cost(&base, bits, 128).unwrap();
        let b = estimate_cost(&deep, bits, 128).unwrap();
        assert!((b.block_flops / a.block_flops - 2.0).abs() < 1e-12);
        assert_eq!(a.embedding_flops, b.embedding_flops);
        assert_eq!(a.classifier_flops, b.classifier_flops);
        assert!((a.flops - a.embedding_flops - a.block_flops - a.classifier_flops).abs() < 1e-6);
    }
}

#[test]
fn fewer_bits_never_cost_more() {
    let uniform = |b| BitAssignment::new(b, b, b).unwrap();
    for name in ARCH_PRESETS {
        let cfg = arch_preset(name).unwrap();
        for pair in [32, 16, 8, 4, 2, 1].windows(2) {
            let hi = estimate_cost(&cfg, uniform(pair[0]), 64).unwrap();
            let lo = estimate_cost(&cfg, uniform(pair[1]), 64).unwrap();
            assert!(lo.size_bytes < hi.size_bytes, "{name} {pair:?}");
            // m·n/64 only undercuts a full-precision multiply from 8 bits down
            if pair[0] <= 8 {
                assert!(lo.flops < hi.flops, "{name} {pair:?}");
            }
        }
    }
}

#[test]
fn calibration_lands_near_the_target() {
    let cfg = arch_preset("bert-base").unwrap();
    let n = calibrate_seq_len(&cfg, 22.5e9).unwrap();
    let at = |n| estimate_cost(&cfg, BitAssignment::FULL, n).unwrap().flops;
    assert!((at(n) - 22.5e9).abs() <= (at(n - 1) - 22.5e9).abs());
    assert!((at(n) - 22.5e9).abs() <= (at(n + 1) - 22.5e9).abs());
    let c = compare_cost(&cfg, BitAssignment::BINARY, n).unwrap();
    assert!(c.flops_ratio > 1.0 && c.size_ratio > 1.0);
    assert!("3-1-1".parse::<BitAssignment>().is_err());
    assert!("1-1".parse::<BitAssignment>().is_err());
}

#[test]
fn ablation_matches_the_entropy_of_a_materialized_tensor() {
    let fractions = [0.01, 0.1, 0.25, 0.5, 0.75, 0.9];
    let rows = entropy_ablation(&fractions).unwrap();
    for (row, &z) in rows.iter().zip(&fractions) {
        let zeros = (z * 1000.0).round() as usize;
        let tensor: Vec<f64> = (0..1000)
            .map(|i| if i < zeros { 0.0 } else { 1.0 })
            .collect();
        assert!(
            (row.entropy - binary_entropy(&tensor).unwrap()).abs() < 1e-12,
            "{z}"
        );
        let closed = -z * z.log2() - (1.0 - z) * (1.0 - z).log2();
        assert!((row.entropy - closed).abs() < 1e-12, "{z}");
    }
    assert_eq!(entropy_table(&rows).unwrap().rows.len(), fractions.len());
    for bad in [0.0, 1.0, 1.5, f64::NAN] {
        assert!(entropy_ablation(&[bad]).is_err());
    }
}

#[test]
fn experiments_reproduce_under_a_fixed_seed() {
    let cfg = MismatchSimConfig {
        samples: 20_000,
        seed: 11,
        ..Default::default()
    };
    let a = mismatch_table(&simulate_mismatch(&cfg).unwrap())
        .unwrap()
        .to_csv()
        .unwrap();
    let b = mismatch_table(&simulate_mismatch(&cfg).unwrap())
        .unwrap()
        .to_csv()
        .unwrap();
    assert_eq!(a, b);
    assert_eq!(
        threshold_curve(&[2, 8], 2000, 4).unwrap(),
        threshold_curve(&[2, 8], 2000, 4).unwrap()
    );
    assert!(simulate_mismatch(&MismatchSimConfig {
        samples: 10,
        ..Default::default()
    })
    .is_err());
}

#[test]
fn centering_balances_shifted_scores() {
    let b = balance_check(50_000, 2.0, 3).unwrap();
    assert!(b.before > 0.95);
    assert!((b.after - 0.5).abs() < 0.01);
    assert!(b.entropy_after > 0.999);
}
