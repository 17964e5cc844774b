use scmoe_core::arch::{model_forward_with, CombineMode, ModelConfig, ModelParams, RoutingCtl, ShortcutPos, Variant};
use scmoe_core::grad::*;
use scmoe_core::numkit::Rng;

#[test]
fn every_architecture_matches_finite_differences() {
    let cases = gradcheck_matrix(9).unwrap();
    assert_eq!(cases.len(), 18);
    for c in &cases {
        assert!(
            c.report.max_rel_error <= 1e-6,
            "{}: {}",
            c.label,
            c.report.max_rel_error
        );
        assert!(c.report.checked > 0);
    }
}

#[test]
fn central_differences_at_default_step_track_backward() {
    let cfg = gradcheck_cases()
        .into_iter()
        .find(|c| c.label == "scmoe-pos2/direct-add")
        .unwrap()
        .config;
    let obj = case_objective(&cfg, 5, 9).unwrap();
    let r = check_model(&obj, DEFAULT_FD_EPS, FdScheme::Central, DEFAULT_REL_FLOOR, false).unwrap();
    assert!(r.max_rel_error <= 1e-5, "{}", r.max_rel_error);
}

#[test]
fn zero_model_copying_tokens_has_zero_loss_and_gradient() {
    for v in [
        Variant::StandardTopK,
        Variant::SharedExpert,
        Variant::ScMoE,
        Variant::DgMoE,
    ] {
        let cfg = ModelConfig::tiny(v);
        let p = ModelParams::zeros(&cfg).unwrap();
        let x = Rng::new(2).normal_matrix(5, cfg.d_model, 1.0);
        let b = backward(&cfg, &p, &x, &LossSpec::Mse(x.clone()), 0.0, None).unwrap();
        assert_eq!(b.task_loss, 0.0);
        assert!(b.gradient_set().flatten().iter().all(|&g| g == 0.0), "{v:?}");
    }
}

#[test]
fn gradient_set_mirrors_parameters() {
    let cfg = ModelConfig::tiny(Variant::DgMoE);
    let p = ModelParams::init(&cfg, 1).unwrap();
    let x = Rng::new(2).normal_matrix(5, cfg.d_model, 1.0);
    let g = backward(&cfg, &p, &x, &LossSpec::MeanOutput, 0.01, None)
        .unwrap()
        .gradient_set();
    let names: Vec<_> = p.named().into_iter().map(|(n, m)| (n, m.shape())).collect();
    let got: Vec<_> = g.entries.iter().map(|(n, m)| (n.clone(), m.shape())).collect();
    assert_eq!(names, got);
    assert!(g.is_finite());
}

#[test]
fn replay_without_noise_record_is_rejected() {
    let mut cfg = ModelConfig::tiny(Variant::ScMoE);
    cfg.gate_noise = true;
    let p = ModelParams::init(&cfg, 1).unwrap();
    let x = Rng::new(2).normal_matrix(5, cfg.d_model, 1.0);
    let mut rng = Rng::new(3);
    let pass = model_forward_with(&cfg, &p, &x, &mut RoutingCtl::sampling(&mut rng)).unwrap();
    let mut record = pass.record.clone();
    for d in &mut record.decisions {
        d.noise = None;
    }
    assert!(backward(&cfg, &p, &x, &LossSpec::MeanOutput, 0.0, Some(&record)).is_err());
    assert!(backward(&cfg, &p, &x, &LossSpec::MeanOutput, 0.0, Some(&pass.record)).is_ok());
}

fn shared_and_routed(names: &[String]) -> (Vec<usize>, Vec<usize>) {
    let shared = names
        .iter()
        .enumerate()
        .filter(|(_, n)| n.contains(".moe.shared."))
        .map(|(i, _)| i)
        .collect();
    let routed = names
        .iter()
        .enumerate()
        .filter(|(_, n)| n.contains(".moe.experts.") || n.contains(".moe.gate."))
        .map(|(i, _)| i)
        .collect();
    (shared, routed)
}

/// Under direct addition in the last block the loss is a sum of a shared
/// term and a routed term, so perturbing one path leaves the other path's
/// gradient untouched.
#[test]
fn shared_and_routed_gradients_decouple() {
    for (variant, pos) in [(Variant::SharedExpert, None), (Variant::ScMoE, Some(ShortcutPos::Pos2))] {
        let mut cfg = ModelConfig::tiny(variant);
        cfg.shortcut_pos = pos;
        cfg.combine = CombineMode::DirectAdd;
        cfg.capacity_factor = cfg.n_experts as f64;
        let p = ModelParams::init(&cfg, 11).unwrap();
        let x = Rng::new(12).normal_matrix(5, cfg.d_model, 1.0);
        let base = backward(&cfg, &p, &x, &LossSpec::MeanOutput, 0.0, None)
            .unwrap()
            .gradient_set();
        let names: Vec<String> = base.names().map(str::to_string).collect();
        let (shared, routed) = shared_and_routed(&names);
        assert!(!shared.is_empty() && !routed.is_empty());

        let mut rng = Rng::new(13);
        for (perturb, watch) in [(&routed, &shared), (&shared, &routed)] {
            let mut q = p.clone();
            let mut named = q.named_mut();
            for &i in perturb.iter() {
                for v in named[i].1.data_mut() {
                    *v += 0.1 * rng.normal();
                }
            }
            drop(named);
            let g = backward(&cfg, &q, &x, &LossSpec::MeanOutput, 0.0, None)
                .unwrap()
                .gradient_set();
            for &i in watch.iter() {
                assert_eq!(g.entries[i].1, base.entries[i].1, "{variant:?} {}", names[i]);
            }
        }
    }
}

#[test]
fn residual_identity_depth_four() {
    for seed in [1, 2, 3] {
        let r = residual_identity_check(4, 5, 3, seed).unwrap();
        assert_eq!(r.depth, 4);
        assert_eq!(r.size, 15);
        assert!(r.identity_deviation <= 1e-6, "seed {seed}: {}", r.identity_deviation);
        assert!(r.jacobian_error <= 1e-6, "seed {seed}: {}", r.jacobian_error);
    }
}

fn regression_run(variant: Variant) -> TrainReport {
    let mut cfg = ModelConfig::tiny(variant);
    if variant == Variant::StandardTopK {
        cfg.k_routed = 1;
    }
    cfg.gate_noise = true;
    let t = TrainConfig {
        steps: 500,
        lr: 0.02,
        batch: 16,
        seed: 7,
        aux_coef: 0.01,
        init_scale: 0.5,
        eval_batch: 64,
    };
    train_toy(&cfg, &t, Task::SyntheticRegression).unwrap()
}

#[test]
fn regression_halves_loss() {
    for v in [Variant::StandardTopK, Variant::ScMoE] {
        let r = regression_run(v);
        assert!(
            r.final_eval <= 0.5 * r.initial_eval,
            "{v:?}: {} -> {}",
            r.initial_eval,
            r.final_eval
        );
    }
}

#[test]
fn training_is_bit_reproducible() {
    let a = regression_run(Variant::ScMoE);
    let b = regression_run(Variant::ScMoE);
    assert_eq!(loss_curve_csv(&a), loss_curve_csv(&b));
    assert_eq!(a.final_eval.to_bits(), b.final_eval.to_bits());
}

#[test]
fn train_config_rejects_negative_aux_and_unknown_keys() {
    let bad = r#"{"steps":1,"lr":0.1,"batch":2,"seed":1,"aux_coef":-1.0}"#;
    let t: TrainConfig = serde_json::from_str(bad).unwrap();
    assert!(t.validate().is_err());
    assert!(serde_json::from_str::<TrainConfig>(r#"{"steps":1,"lr":0.1,"batch":2,"seed":1,"momentum":0.9}"#).is_err());
    let t: TrainConfig = serde_json::from_str(r#"{"steps":1,"lr":0.1,"batch":2,"seed":1}"#).unwrap();
    assert_eq!(t.aux_coef, 0.01);
}
