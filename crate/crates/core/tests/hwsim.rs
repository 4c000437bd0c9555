use besa::hwsim::{dense_baseline, engine_work, report_block, simulate_spmm, SimConfig};
use besa::model::{BlockConfig, Layers};
use besa::sparsity::PruneMask;
use proptest::prelude::*;

fn mask_from(out: usize, inn: usize, bits: &[bool]) -> PruneMask {
    let mut m = PruneMask::ones("x", out, inn);
    for (k, &b) in bits.iter().enumerate() {
        m.set(k / inn, k % inn, b);
    }
    m
}

fn small_tiles() -> SimConfig {
    SimConfig {
        pe_denser: 1,
        pe_sparser: 1,
        macs_per_pe_cycle: 2,
        tile_rows: 4,
        tile_cols: 4,
        ..Default::default()
    }
}

#[test]
fn hand_counted_cycles() {
    // 4x2 tile: column 0 keeps 3 (dense, cost 4), column 1 keeps 1 (cost 1).
    let m = mask_from(4, 2, &[false, false, true, false, true, false, true, true]);
    let cfg = small_tiles();
    let w = engine_work(&m, &cfg);
    assert_eq!((w.denser, w.sparser), (4, 1));
    assert_eq!(simulate_spmm(&m, 1, &cfg), 2);
    assert_eq!(simulate_spmm(&m, 3, &cfg), 4);
    assert_eq!(dense_baseline(4, 2, 1, &cfg), 2);
}

#[test]
fn report_table_has_every_projection() {
    let cfg = BlockConfig::default();
    let block = Layers::from_fn(|l| {
        let [o, i] = cfg.layer_shape(l);
        PruneMask::ones(format!("blocks.0.{l}"), o, i)
    });
    let r = report_block(&[block], &SimConfig::default()).unwrap();
    let table = r.to_table();
    for name in ["q_proj", "down_proj", "Dense Runtime", "Average Runtime", "Sparsity", "Speedup"] {
        assert!(table.contains(name), "{name} missing from\n{table}");
    }
    assert!(r.layers.iter().all(|l| l.speedup == 1.0));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn pruning_more_never_costs_more(
        bits in prop::collection::vec(any::<bool>(), 96),
        extra in prop::collection::vec(any::<bool>(), 96),
        tokens in 1u64..5,
    ) {
        let cfg = small_tiles();
        let coarse = mask_from(8, 12, &bits);
        let refined: Vec<bool> = bits.iter().zip(&extra).map(|(a, b)| *a && *b).collect();
        let fine = mask_from(8, 12, &refined);
        prop_assert!(simulate_spmm(&fine, tokens, &cfg) <= simulate_spmm(&coarse, tokens, &cfg));
        prop_assert!(simulate_spmm(&coarse, tokens, &cfg) <= dense_baseline(8, 12, tokens, &cfg));
    }

    #[test]
    fn work_lies_between_nonzeros_and_dense(bits in prop::collection::vec(any::<bool>(), 96)) {
        let cfg = small_tiles();
        let m = mask_from(8, 12, &bits);
        let w = engine_work(&m, &cfg);
        let nnz = (m.len() - m.zero_count()) as u64;
        prop_assert!(w.denser + w.sparser >= nnz);
        prop_assert!(w.denser + w.sparser <= m.len() as u64);
    }
}
