use scmoe_core::analysis::*;
use scmoe_core::arch::{model_forward, ActivationTrace, ModelConfig, ModelParams, Variant};
use scmoe_core::numkit::Rng;

fn trace(variant: Variant, seed: u64) -> ActivationTrace {
    let cfg = ModelConfig::tiny(variant);
    let p = ModelParams::init(&cfg, seed).unwrap();
    let x = Rng::new(seed + 1).normal_matrix(12, cfg.d_model, 1.0);
    model_forward(&cfg, &p, &x).unwrap().1
}

fn argmax(r: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in r.iter().enumerate() {
        if *v > r[best] {
            best = i;
        }
    }
    best
}

#[test]
fn repeat_rate_matches_brute_force() {
    for seed in 0..5 {
        let tr = trace(Variant::ScMoE, seed);
        let m = &tr.moe[0];
        let same = (0..m.current.rows())
            .filter(|&t| argmax(m.preceding_logits.row(t)) == argmax(m.current_logits.row(t)))
            .count();
        let want = same as f64 / m.current.rows() as f64;
        assert_eq!(repeated_selection_rate(&tr, m.block).unwrap(), want);
    }
}

#[test]
fn l2_distance_matches_recomputation() {
    let tr = trace(Variant::SharedExpert, 3);
    let m = &tr.moe[0];
    let mut total = 0.0;
    for t in 0..m.current.rows() {
        let mut s = 0.0;
        for j in 0..m.current.cols() {
            let d = m.current.get(t, j) - m.preceding.get(t, j);
            s += d * d;
        }
        total += s.sqrt();
    }
    let want = total / m.current.rows() as f64;
    assert!((l2_distance(&tr, m.block).unwrap() - want).abs() <= 1e-12);
}

#[test]
fn gate_scores_match_stored_logits() {
    let tr = trace(Variant::DgMoE, 4);
    let m = &tr.moe[0];
    let mut want = [0.0; 2];
    for (g, dec) in m.decisions.iter().enumerate() {
        for t in 0..dec.tokens() {
            let row = dec.logits.row(t);
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - mx).exp()).sum();
            want[g] += (row[dec.selected[t][0].expert] - mx).exp() / z;
        }
        want[g] /= dec.tokens() as f64;
    }
    let (p, c) = mean_gate_scores(&tr, m.block).unwrap();
    assert!((p - want[0]).abs() <= 1e-12 && (c - want[1]).abs() <= 1e-12);
}

#[test]
fn similarity_invariants_and_brute_force() {
    let tr = trace(Variant::ScMoE, 8);
    let r = cosine_similarity_matrix(&tr).unwrap();
    let n = r.labels.len();
    let taps = [&tr.blocks[0].input, &tr.blocks[0].post_attention, &tr.blocks[0].output];
    for a in 0..n {
        assert!((r.matrix.get(a, a) - 1.0).abs() <= 1e-12);
        for b in 0..n {
            assert_eq!(r.matrix.get(a, b), r.matrix.get(b, a));
            assert!((-1.0..=1.0).contains(&r.matrix.get(a, b)));
        }
    }
    for a in 0..3 {
        for b in 0..3 {
            if a == b {
                continue;
            }
            let rows = taps[a].rows();
            let mut s = 0.0;
            for t in 0..rows {
                let (u, v) = (taps[a].row(t), taps[b].row(t));
                let dot: f64 = u.iter().zip(v).map(|(x, y)| x * y).sum();
                let nu: f64 = u.iter().map(|x| x * x).sum::<f64>().sqrt();
                let nv: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                s += dot / (nu * nv);
            }
            assert!((r.matrix.get(a, b) - s / rows as f64).abs() <= 1e-12);
        }
    }
}

#[test]
fn metrics_survive_serialisation_bit_exactly() {
    let tr = trace(Variant::DgMoE, 9);
    let back: ActivationTrace = serde_json::from_str(&serde_json::to_string(&tr).unwrap()).unwrap();
    assert_eq!(
        GatingBehaviorReport::from_trace(&tr).unwrap(),
        GatingBehaviorReport::from_trace(&back).unwrap()
    );
    assert_eq!(
        cosine_similarity_matrix(&tr).unwrap(),
        cosine_similarity_matrix(&back).unwrap()
    );
}

#[test]
fn dgmoe_distinct_over_ten_thousand_tokens() {
    let c = dgmoe_selection_check(10_000, 77).unwrap();
    assert_eq!(c.tokens, 10_000);
    assert_eq!(c.repeated_with_constraint, 0);
    assert_eq!(c.repeat_rate_unconstrained, 1.0);
}
