use scmoe_core::arch::ShortcutPos;
use scmoe_sim::distsim::{
    build_dag, calibrated_reference, check_full_overlap, compare_strategies, moe_comm_fraction, reference_model,
    run_sim, BlockCosts, HardwareProfile, OpKind, StrategySpec, Stream, Workload,
};

const POSITIONS: [ShortcutPos; 3] = [ShortcutPos::Pos1, ShortcutPos::Pos2, ShortcutPos::Pos3];

#[test]
fn full_overlap_matches_compute_total() {
    let r = check_full_overlap(1000, 11).unwrap();
    assert!(r.passed(), "{r:?}");
}

#[test]
fn every_device_does_the_same_work() {
    let (cfg, prof, costs) = calibrated_reference(0.6, ShortcutPos::Pos2).unwrap();
    for strat in StrategySpec::figure_set(ShortcutPos::Pos2, 2) {
        let dag = build_dag(&cfg, &strat, &prof, &costs).unwrap();
        let t = run_sim(&dag.nodes).unwrap();
        let total: u64 = dag.nodes.iter().filter(|n| n.device == 0).map(|n| n.duration).sum();
        for d in 0..prof.n_devices {
            let busy = t.busy(d, Stream::Compute) + t.busy(d, Stream::Comm);
            assert_eq!(busy, total, "{}", strat.label());
        }
        for s in &t.spans {
            for dep in &dag.nodes[s.op].deps {
                let e = t.spans.iter().find(|x| x.op == *dep).unwrap().end;
                assert!(e <= s.start, "{} starts before its dependency ends", s.name);
            }
        }
    }
}

#[test]
fn simulation_is_deterministic() {
    let (cfg, prof, costs) = calibrated_reference(0.6, ShortcutPos::Pos3).unwrap();
    let set = StrategySpec::figure_set(ShortcutPos::Pos3, 2);
    let a = compare_strategies(&cfg, &prof, &costs, &set).unwrap();
    let b = compare_strategies(&cfg, &prof, &costs, &set).unwrap();
    assert_eq!(a.to_csv(), b.to_csv());
    assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
}

#[test]
fn free_links_tie_within_each_architecture() {
    let cfg = reference_model(ShortcutPos::Pos2);
    let prof = HardwareProfile::reference();
    let costs = BlockCosts::from_flops(&cfg, &Workload::reference(), &prof).unwrap();
    let set = [
        StrategySpec::StandardSequential { k: 2 },
        StrategySpec::StandardPipeline { k: 2, chunks: 2 },
        StrategySpec::SharedExpertSequential,
        StrategySpec::ScMoeOverlap { pos: ShortcutPos::Pos2 },
        StrategySpec::ScMoeOverlapPipeline {
            pos: ShortcutPos::Pos2,
            chunks: 4,
        },
    ];
    let r = compare_strategies(&cfg, &prof, &costs, &set).unwrap();
    let m: Vec<u64> = r.results.iter().map(|x| x.makespan).collect();
    assert_eq!(m[0], m[1]);
    assert_eq!(m[2], m[3]);
    assert_eq!(m[3], m[4]);
    assert!(r.results.iter().all(|x| x.comm == 0));
}

#[test]
fn calibration_hits_targets() {
    for target in [0.6, 0.15] {
        let (cfg, prof, costs) = calibrated_reference(target, ShortcutPos::Pos2).unwrap();
        let f = moe_comm_fraction(&cfg, &prof, &costs).unwrap();
        assert!((f - target).abs() <= 1e-6, "{target}: {f}");
    }
}

#[test]
fn strategy_ordering_at_sixty_percent() {
    for pos in POSITIONS {
        let (cfg, prof, costs) = calibrated_reference(0.6, pos).unwrap();
        let r = compare_strategies(&cfg, &prof, &costs, &StrategySpec::figure_set(pos, 2)).unwrap();
        let m: Vec<u64> = r.results.iter().map(|x| x.makespan).collect();
        assert!(
            m[0] <= m[1] && m[1] < m[2] && m[2] < m[3] && m[3] < m[4],
            "{pos:?}: {m:?}"
        );
    }
}

#[test]
fn full_containment_at_fifteen_percent() {
    for pos in POSITIONS {
        let (cfg, prof, costs) = calibrated_reference(0.15, pos).unwrap();
        let r = compare_strategies(&cfg, &prof, &costs, &[StrategySpec::ScMoeOverlap { pos }]).unwrap();
        assert_eq!(r.results[0].overlap_fraction, 1.0, "{pos:?}");
    }
}

#[test]
fn speedup_band_and_hidden_share() {
    let (cfg, prof, costs) = calibrated_reference(0.6, ShortcutPos::Pos3).unwrap();
    let set = [
        StrategySpec::ScMoeOverlap { pos: ShortcutPos::Pos3 },
        StrategySpec::StandardSequential { k: 2 },
    ];
    let r = compare_strategies(&cfg, &prof, &costs, &set).unwrap();
    let s = r.speedup[1][0];
    assert!((1.3..=2.0).contains(&s), "speedup {s}");
    for pos in POSITIONS {
        let (cfg, prof, costs) = calibrated_reference(0.6, pos).unwrap();
        let r = compare_strategies(&cfg, &prof, &costs, &[StrategySpec::ScMoeOverlap { pos }]).unwrap();
        assert!(r.results[0].overlap_fraction >= 0.6, "{pos:?}");
    }
}

#[test]
fn migration_never_appears_in_block_dags() {
    let (cfg, prof, costs) = calibrated_reference(0.6, ShortcutPos::Pos1).unwrap();
    for strat in StrategySpec::figure_set(ShortcutPos::Pos1, 3) {
        let dag = build_dag(&cfg, &strat, &prof, &costs).unwrap();
        assert!(dag.nodes.iter().all(|n| n.kind != OpKind::Migration));
    }
}
