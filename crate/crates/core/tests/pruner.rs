use besa::importance::Metric;
use besa::io::{synth_model, CalibrationSet};
use besa::model::{embed_tokens, BlockConfig, LayerName, ModelCheckpoint};
use besa::pruner::{
    prune_group, prune_model, rank_block, uniform_mask, PenaltyKind, PruneConfig, PruneError, Scope, Task,
};
use besa::sparsity::{CandidateRates, Granularity};

fn tiny() -> (ModelCheckpoint, CalibrationSet) {
    let cfg = BlockConfig {
        d_model: 16,
        n_heads: 2,
        d_ff: 24,
        seq_len: 8,
    };
    (synth_model(&cfg, 4, 32, 3), CalibrationSet::synthetic(8, 8, 32, 4))
}

fn quick(steps: usize) -> PruneConfig {
    PruneConfig {
        epochs: steps,
        max_steps: Some(steps),
        sparsity_step: 0.05,
        ..Default::default()
    }
}

#[test]
fn config_validation() {
    let bad = [
        PruneConfig { target_sparsity: 1.5, ..Default::default() },
        PruneConfig { target_sparsity: 0.0, ..Default::default() },
        PruneConfig { sparsity_step: 0.03, ..Default::default() },
        PruneConfig { lambda: -1.0, ..Default::default() },
        PruneConfig { batch_sequences: 0, ..Default::default() },
    ];
    for c in bad {
        assert!(matches!(c.validate(), Err(PruneError::Config(_))), "{c:?}");
    }
    assert!(PruneConfig::default().validate().is_ok());
}

#[test]
fn uniform_mask_removes_exact_count() {
    let (m, calib) = tiny();
    let x = embed_tokens(&m, &calib.sequences()).unwrap();
    let r = rank_block(&m, 0, &x, 8, Metric::Wanda).unwrap();
    for rate in [0.1, 0.37, 0.5, 0.93] {
        for l in LayerName::ALL {
            let ranking = &r.per_layer[l];
            let mask = uniform_mask(ranking, rate, "x");
            let total = ranking.out_features() * ranking.in_features();
            assert_eq!(mask.zero_count(), (total as f64 * rate).floor() as usize, "{l} at {rate}");
            for o in 0..ranking.out_features() {
                let k = mask.row_zero_count(o);
                for (pos, &c) in ranking.row(o).iter().enumerate() {
                    assert_eq!(mask.get(o, c as usize), pos >= k);
                }
            }
        }
    }
}

#[test]
fn learning_lowers_reconstruction_and_tracks_target() {
    let (m, calib) = tiny();
    let cfg = PruneConfig {
        learning_rate: 0.1,
        ..quick(60)
    };
    let run = prune_model(&m, &calib, &cfg, Task::Prune).unwrap();
    assert_eq!(run.masks.len(), 4);
    assert_eq!(run.reports.len(), 4);
    let first = &run.curve[0];
    let r0 = &run.reports[0];
    assert!(r0.recon_loss < first.recon, "{} !< {}", r0.recon_loss, first.recon);
    assert!((run.global_sparsity() - 0.5).abs() < 0.05, "{}", run.global_sparsity());
    let rates = CandidateRates::from_step(0.05).unwrap();
    for block in &run.masks {
        for (_, mask) in block.iter() {
            let w = mask.in_features();
            for o in 0..mask.out_features() {
                let k = mask.row_zero_count(o);
                assert!((0..rates.count()).any(|d| rates.boundary(d, w) == k), "row prunes {k} of {w}");
            }
        }
    }
}

#[test]
fn same_seed_same_masks() {
    let (m, calib) = tiny();
    let a = prune_model(&m, &calib, &quick(10), Task::Prune).unwrap();
    let b = prune_model(&m, &calib, &quick(10), Task::Prune).unwrap();
    assert_eq!(a.masks, b.masks);
    assert_eq!(a.curve, b.curve);
}

#[test]
fn per_layer_granularity_gives_one_rate_per_layer() {
    let (m, calib) = tiny();
    let cfg = PruneConfig {
        granularity: Granularity::PerLayer,
        ..quick(20)
    };
    let run = prune_model(&m, &calib, &cfg, Task::Prune).unwrap();
    for (_, mask) in run.masks[0].iter() {
        let k = mask.row_zero_count(0);
        assert!((0..mask.out_features()).all(|o| mask.row_zero_count(o) == k));
    }
}

#[test]
fn two_block_scope_forms_pairs() {
    let (m, calib) = tiny();
    let cfg = PruneConfig {
        scope: Scope::TwoBlocks,
        ..quick(5)
    };
    let run = prune_model(&m, &calib, &cfg, Task::Prune).unwrap();
    assert_eq!(run.masks.len(), 4);
    assert_eq!(run.reports.iter().map(|r| (r.block, r.n_blocks)).collect::<Vec<_>>(), vec![(0, 2), (2, 2)]);
}

#[test]
fn every_scope_and_penalty_runs() {
    let (m, calib) = tiny();
    for scope in [Scope::Layer, Scope::AttnMlp, Scope::Block] {
        for penalty in [PenaltyKind::ZeroCount, PenaltyKind::Surrogate] {
            let cfg = PruneConfig {
                scope,
                penalty,
                two_stream: penalty == PenaltyKind::Surrogate,
                ..quick(3)
            };
            let run = prune_model(&m, &calib, &cfg, Task::Prune).unwrap();
            assert_eq!(run.masks.len(), 4, "{scope:?} {penalty:?}");
        }
    }
}

#[test]
fn single_block_model_matches_direct_group_call() {
    let (m, calib) = tiny();
    let one = ModelCheckpoint::new(m.config, m.vocab, vec![m.blocks[0].clone()], m.embed.clone(), m.head.clone(), m.final_norm_gain.clone()).unwrap();
    let cfg = quick(8);
    let run = prune_model(&one, &calib, &cfg, Task::Prune).unwrap();
    let x = embed_tokens(&one, &calib.sequences()).unwrap();
    let ranking = rank_block(&one, 0, &x, 8, cfg.metric).unwrap();
    let bc = BlockConfig { seq_len: 8, ..one.config };
    let direct = prune_group(&[&one.blocks[0]], &bc, &x, &x, &[&ranking], &cfg, Task::Prune, 0).unwrap();
    assert_eq!(run.masks, direct.masks);
    let (mut a, mut b) = (run.reports[0].clone(), direct.report);
    a.wall_time_s = 0.0;
    b.wall_time_s = 0.0;
    assert_eq!(a, b);
}

#[test]
fn quantize_task_keeps_every_weight() {
    let (m, calib) = tiny();
    let run = prune_model(&m, &calib, &quick(10), Task::Quantize).unwrap();
    assert!(run.masks.iter().all(|b| b.iter().all(|(_, mask)| mask.zero_count() == 0)));
    let q = run.quant.expect("strengths are learned");
    for block in &q {
        for (_, p) in block.iter() {
            assert!(p.gamma0.iter().chain(&p.gamma1).all(|g| (0.0..=1.0).contains(g)));
        }
    }
}

#[test]
fn joint_task_learns_both() {
    let (m, calib) = tiny();
    let run = prune_model(&m, &calib, &quick(10), Task::Joint).unwrap();
    assert!(run.quant.is_some());
    assert!(run.global_sparsity() > 0.3);
}
