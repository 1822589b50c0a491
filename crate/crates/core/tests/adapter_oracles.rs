use flexmore_core::adapter::{self, mixture_params, phlora_extract, ExpertSize, ParamCount, ParamPreset, RankSpec};
use flexmore_core::linalg::{self, frobenius_norm, Matrix};
use flexmore_core::synth::{random_matrix, Rng};
use flexmore_core::weights::{AdapterEntry, ExpertBundle, LowRankAdapter};
use proptest::prelude::*;

fn bundle(name: &str, m: Matrix) -> ExpertBundle {
    ExpertBundle::new(name, vec![("w".into(), m)]).unwrap()
}

fn seeded_pair(seed: u64, rows: usize, cols: usize) -> (ExpertBundle, ExpertBundle) {
    let mut rng = Rng::new(seed);
    let base = bundle("base", random_matrix(&mut rng, rows, cols, 1.0));
    let expert = bundle("expert", random_matrix(&mut rng, rows, cols, 1.0));
    (expert, base)
}

#[test]
fn seeded_delta_adds_back_exactly() {
    let mut rng = Rng::new(5);
    let base = ExpertBundle::new(
        "base",
        vec![
            ("a".into(), random_matrix(&mut rng, 4, 3, 1.0)),
            ("b".into(), random_matrix(&mut rng, 3, 4, 1.0)),
        ],
    )
    .unwrap();
    let expert = ExpertBundle::new(
        "e",
        vec![
            ("a".into(), random_matrix(&mut rng, 4, 3, 1.0)),
            ("b".into(), random_matrix(&mut rng, 3, 4, 1.0)),
        ],
    )
    .unwrap();
    let d = adapter::delta(&expert, &base).unwrap();
    for t in expert.targets() {
        let back = d.get(&t.name).unwrap().add(base.get(&t.name).unwrap()).unwrap();
        // (e - b) + b can lose a few ulps to rounding.
        let err = frobenius_norm(&back.sub(&t.matrix).unwrap());
        assert!(err <= 4.0 * f64::EPSILON * frobenius_norm(&t.matrix), "{err}");
    }
}

#[test]
fn full_rank_extraction_is_exact_on_8x6() {
    let (expert, base) = seeded_pair(8, 8, 6);
    let ad = phlora_extract(&expert, &base, &RankSpec::Uniform(6)).unwrap();
    let d = expert.get("w").unwrap().sub(base.get("w").unwrap()).unwrap();
    let err = frobenius_norm(&d.sub(&ad.entries()[0].product()).unwrap());
    assert!(err / frobenius_norm(&d) < 1e-10);
}

#[test]
fn rank_two_error_equals_spectrum_tail() {
    let (expert, base) = seeded_pair(16, 16, 8);
    let d = expert.get("w").unwrap().sub(base.get("w").unwrap()).unwrap();
    let sigma = linalg::svd(&d).unwrap().sigma;
    let tail = sigma[2..].iter().map(|s| s * s).sum::<f64>().sqrt();
    let ad = phlora_extract(&expert, &base, &RankSpec::Uniform(2)).unwrap();
    let err = frobenius_norm(&d.sub(&ad.entries()[0].product()).unwrap());
    assert!((err - tail).abs() < 1e-8);
}

#[test]
fn materialize_round_trips_and_zero_adapter_is_base() {
    let (expert, base) = seeded_pair(31, 7, 5);
    let ad = phlora_extract(&expert, &base, &RankSpec::Uniform(5)).unwrap();
    let dense = adapter::materialize(&ad, &base).unwrap();
    let w = expert.get("w").unwrap();
    assert!(frobenius_norm(&dense.get("w").unwrap().sub(w).unwrap()) / frobenius_norm(w) < 1e-10);

    let zero = LowRankAdapter::new(
        "zero",
        "base",
        vec![AdapterEntry::new("w", Matrix::zeros(7, 2), Matrix::zeros(2, 5)).unwrap()],
    )
    .unwrap();
    assert_eq!(adapter::materialize(&zero, &base).unwrap().get("w"), base.get("w"));
}

#[test]
fn sigma_zero_columns_are_kept() {
    // Rank-1 delta extracted at rank 3: factor shapes follow the request.
    let base = bundle("base", Matrix::zeros(4, 4));
    let expert = bundle("e", Matrix::outer(&[1.0, 0.0, 0.0, 0.0], &[0.0, 1.0, 0.0, 0.0]));
    let ad = phlora_extract(&expert, &base, &RankSpec::Uniform(3)).unwrap();
    let e = &ad.entries()[0];
    assert_eq!(e.b.shape(), (4, 3));
    assert_eq!(e.a.shape(), (3, 4));
    assert!(frobenius_norm(&e.product().sub(expert.get("w").unwrap()).unwrap()) < 1e-14);
}

// --- parameter accounting for the 7B preset ---

/// The computed count shows as `shown` at the table's precision, i.e. it is
/// within half a unit of the last displayed digit.
fn rounds_to(count: u64, shown: f64, unit: f64, decimals: i32) -> bool {
    let value = count as f64 / unit;
    (value - shown).abs() <= 0.5 * 10f64.powi(-decimals) + 1e-12
}

#[test]
fn expert_only_entries_of_best_expert_table() {
    let p = ParamPreset::olmo7b();
    let e = |r| p.expert_params(ExpertSize::LowRank(r)).unwrap();
    assert!(rounds_to(e(16), 23.3, 1e6, 1));
    assert!(rounds_to(e(64), 92.9, 1e6, 1));
    assert!(rounds_to(e(512), 743.0, 1e6, 0));
    assert!(rounds_to(e(2048), 2.97, 1e9, 2));
    assert_eq!(ParamCount(e(16)).to_string(), "23.3M");
    assert_eq!(ParamCount(e(64)).to_string(), "92.9M");
    assert_eq!(ParamCount(e(512)).to_string(), "743M");
    assert_eq!(ParamCount(e(2048)).to_string(), "2.97B");
    assert_eq!(ParamCount(p.full_expert_params).to_string(), "4.33B");
}

#[test]
fn two_expert_totals() {
    let p = ParamPreset::olmo7b();
    let total = |s| mixture_params(&p, &[s]).unwrap().to_string();
    assert_eq!(total(ExpertSize::Full), "11.63B");
    assert_eq!(total(ExpertSize::LowRank(512)), "8.04B");
    assert_eq!(total(ExpertSize::LowRank(16)), "7.32B");
    assert_eq!(total(ExpertSize::LowRank(2048)), "10.27B");
    assert_eq!(total(ExpertSize::LowRank(64)), "7.39B");
}

#[test]
fn seven_expert_totals() {
    let p = ParamPreset::olmo7b();
    let lr = |ranks: &[u64]| {
        let sizes: Vec<_> = ranks.iter().map(|r| ExpertSize::LowRank(*r)).collect();
        mixture_params(&p, &sizes).unwrap()
    };
    let full = mixture_params(&p, &[ExpertSize::Full; 6]).unwrap();
    assert_eq!(full.to_string(), "33.27B");
    assert!((full.0 as i64 - 33_270_000_000).abs() <= 10_000_000);
    assert_eq!(lr(&[512; 6]).to_string(), "11.75B");
    assert_eq!(lr(&[1024; 6]).to_string(), "16.21B");
    // MC9-selected ranks: Code 2^6, Creative 2^7, Math 2^11, News 2^0, Academic 2^3, Reddit 2^7.
    assert_eq!(lr(&[64, 128, 2048, 1, 8, 128]).to_string(), "10.75B");
    // Avg-selected ranks: 2^9, 2^4, 2^11, 2^6, 2^11, 2^9.
    assert_eq!(lr(&[512, 16, 2048, 64, 2048, 512]).to_string(), "14.84B");
}

#[test]
fn memory_reductions_of_selected_experts() {
    let p = ParamPreset::olmo7b();
    let red = |r| p.memory_reduction_pct(ExpertSize::LowRank(r)).unwrap();
    for (rank, expected) in [(2048, 31.39), (128, 95.71), (64, 97.85), (8, 99.73), (1, 99.96)] {
        assert!((red(rank) - expected).abs() < 0.005, "rank {rank}: {}", red(rank));
    }
    assert_eq!(p.memory_reduction_pct(ExpertSize::Full).unwrap(), 0.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn extraction_beats_random_rank_r_matrices(seed in any::<u64>(), rows in 2usize..10, cols in 2usize..10, r_frac in 0.0f64..1.0) {
        let (expert, base) = seeded_pair(seed, rows, cols);
        let r = 1 + ((rows.min(cols) - 1) as f64 * r_frac) as usize;
        let ad = phlora_extract(&expert, &base, &RankSpec::Uniform(r)).unwrap();
        let d = expert.get("w").unwrap().sub(base.get("w").unwrap()).unwrap();
        let best = frobenius_norm(&d.sub(&ad.entries()[0].product()).unwrap());
        let mut rng = Rng::new(seed ^ 0xABCD);
        for _ in 0..100 {
            let x = random_matrix(&mut rng, rows, r, 1.0).matmul(&random_matrix(&mut rng, r, cols, 1.0)).unwrap();
            prop_assert!(best <= frobenius_norm(&d.sub(&x).unwrap()) + 1e-9);
        }
    }

    #[test]
    fn split_matches_truncated_reconstruction(seed in any::<u64>(), rows in 1usize..9, cols in 1usize..9) {
        let (expert, base) = seeded_pair(seed, rows, cols);
        let d = expert.get("w").unwrap().sub(base.get("w").unwrap()).unwrap();
        let s = linalg::svd(&d).unwrap();
        for r in 1..=s.rank() {
            let ad = phlora_extract(&expert, &base, &RankSpec::Uniform(r)).unwrap();
            let t = linalg::truncate_svd(&s, r).unwrap().reconstruct();
            prop_assert!(frobenius_norm(&ad.entries()[0].product().sub(&t).unwrap()) < 1e-10);
        }
    }

    #[test]
    fn full_rank_materialize_reproduces_expert(seed in any::<u64>(), rows in 1usize..9, cols in 1usize..9) {
        let (expert, base) = seeded_pair(seed, rows, cols);
        let ad = phlora_extract(&expert, &base, &RankSpec::Uniform(rows.min(cols))).unwrap();
        let dense = adapter::materialize(&ad, &base).unwrap();
        let w = expert.get("w").unwrap();
        prop_assert!(frobenius_norm(&dense.get("w").unwrap().sub(w).unwrap()) / frobenius_norm(w) < 1e-10);
    }
}
