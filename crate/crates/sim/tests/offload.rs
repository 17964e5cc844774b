use proptest::prelude::*;
use scmoe_core::arch::{ModelConfig, ModelParams, ShortcutPos, Variant};
use scmoe_sim::distsim::HardwareProfile;
use scmoe_sim::offload::{
    check_random_profiles, gpt2_medium_like, plan_offload, simulate_decode, DecodeCosts, ModelSizes, OffloadMode,
};

fn sizes() -> ModelSizes {
    ModelSizes {
        vocab: 13,
        context: 9,
        bytes_per_param: 2,
        runtime_bytes: 77,
    }
}

#[test]
fn reduction_matches_byte_count() {
    for v in [
        Variant::StandardTopK,
        Variant::SharedExpert,
        Variant::ScMoE,
        Variant::DgMoE,
    ] {
        let mut cfg = ModelConfig::tiny(v);
        cfg.layers = 4;
        let s = sizes();
        let p = plan_offload(&cfg, &s, &HardwareProfile::reference()).unwrap();
        let params = ModelParams::zeros(&cfg).unwrap();
        let named = params.named();
        let elems = |pred: &dyn Fn(&str) -> bool| -> u64 {
            named
                .iter()
                .filter(|(n, _)| pred(n))
                .map(|(_, m)| (m.rows() * m.cols()) as u64)
                .sum()
        };
        let embed = ((s.vocab + s.context) * cfg.d_model) as u64;
        let experts = elems(&|n| n.contains(".moe.experts."));
        let others = elems(&|n| !n.contains(".moe.experts."));
        let one_expert = elems(&|n| n.starts_with("blocks.1.moe.experts.0."));
        let k = if v == Variant::DgMoE { 2 } else { cfg.k_routed as u64 };
        let gpu = (embed + experts + others) * 2 + 77;
        let off = (embed + others + k * one_expert) * 2 + 77;
        assert_eq!(p.peak_memory(OffloadMode::GpuOnly), gpu);
        assert_eq!(p.peak_memory(OffloadMode::OffloadBlocking), off);
        assert_eq!(p.peak_memory(OffloadMode::OffloadAsync), off);
        assert_eq!(p.memory_reduction(), 1.0 - off as f64 / gpu as f64);

        let mut names: Vec<_> = p.resident.iter().chain(&p.offloaded).map(|g| g.name.clone()).collect();
        let total = names.len();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), total, "groups overlap");
        assert_eq!(total, named.len() + 2);
    }
}

#[test]
fn medium_layout_band() {
    let (cfg, sizes) = gpt2_medium_like();
    let p = plan_offload(&cfg, &sizes, &HardwareProfile::reference()).unwrap();
    let r = p.memory_reduction();
    assert!((0.4..=0.6).contains(&r), "reduction {r}");
}

#[test]
fn thousand_random_profiles() {
    let r = check_random_profiles(1000, 8).unwrap();
    assert!(r.passed(), "{r:?}");
}

#[test]
fn zero_window_equals_blocking() {
    let mut cfg = ModelConfig::tiny(Variant::ScMoE);
    cfg.shortcut_pos = Some(ShortcutPos::Pos1);
    let prof = HardwareProfile {
        host_alpha: 40.0,
        host_beta: 0.5,
        ..HardwareProfile::reference()
    };
    let p = plan_offload(&cfg, &sizes(), &prof).unwrap();
    let c = DecodeCosts {
        attention: 0,
        mlp: 30,
        shared_expert: 0,
        gate: 5,
        expert: 20,
        combine_outputs: 1,
    };
    let a = simulate_decode(&p, &c, OffloadMode::OffloadAsync).unwrap();
    let b = simulate_decode(&p, &c, OffloadMode::OffloadBlocking).unwrap();
    assert_eq!(a.window, 0);
    assert_eq!((a.latency, a.stall), (b.latency, b.stall));
}

#[test]
fn reports_are_deterministic() {
    let (cfg, sizes) = gpt2_medium_like();
    let prof = HardwareProfile {
        host_beta: 0.01,
        ..HardwareProfile::reference()
    };
    let p = plan_offload(&cfg, &sizes, &prof).unwrap();
    let c = DecodeCosts::from_flops(&cfg, &sizes, &prof).unwrap();
    let a = simulate_decode(&p, &c, OffloadMode::OffloadAsync).unwrap();
    let b = simulate_decode(&p, &c, OffloadMode::OffloadAsync).unwrap();
    assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    assert!(a.to_csv().starts_with("stage,start,end\n"));
}

proptest! {
    #[test]
    fn async_stall_grows_with_expert_bytes(h in 4usize..64, extra in 1usize..64, pos in 0usize..3) {
        let mut cfg = ModelConfig::tiny(Variant::ScMoE);
        cfg.shortcut_pos = Some([ShortcutPos::Pos1, ShortcutPos::Pos2, ShortcutPos::Pos3][pos]);
        let prof = HardwareProfile { host_beta: 1.0, ..HardwareProfile::reference() };
        let c = DecodeCosts { attention: 100, mlp: 100, shared_expert: 100, gate: 5, expert: 50, combine_outputs: 2 };
        let mut stall = |h: usize| {
            cfg.d_hidden = h;
            let p = plan_offload(&cfg, &sizes(), &prof).unwrap();
            simulate_decode(&p, &c, OffloadMode::OffloadAsync).unwrap()
        };
        let small = stall(h);
        let big = stall(h + extra);
        prop_assert!(big.migration > small.migration);
        prop_assert!(big.stall >= small.stall);
        if small.migration > small.window {
            prop_assert!(big.stall > small.stall);
        }
    }
}
