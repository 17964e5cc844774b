use proptest::prelude::*;
use scmoe_core::gating::*;
use scmoe_core::numkit::{Matrix, Rng};

fn logits() -> impl Strategy<Value = (Matrix, usize)> {
    (1usize..=16, 1usize..=12).prop_flat_map(|(n, t)| {
        (prop::collection::vec(-5.0f64..5.0, n * t), 1..=n)
            .prop_map(move |(v, k)| (Matrix::from_vec(t, n, v).unwrap(), k))
    })
}

proptest! {
    #[test]
    fn topk_picks_k_distinct_largest((h, k) in logits()) {
        let dec = select_topk(&h, k).unwrap();
        for (t, row) in dec.selected.iter().enumerate() {
            prop_assert_eq!(row.len(), k);
            let mut e: Vec<usize> = row.iter().map(|s| s.expert).collect();
            let kth = h.get(t, e[k - 1]);
            for j in 0..h.cols() {
                if !e.contains(&j) {
                    prop_assert!(h.get(t, j) <= kth);
                }
            }
            e.sort_unstable();
            e.dedup();
            prop_assert_eq!(e.len(), k);
            let sum: f64 = row.iter().map(|s| s.weight).sum();
            prop_assert!((sum - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn capacity_never_exceeds_quota((h, k) in logits(), cf in 0.1f64..4.0) {
        let n = h.cols();
        let t = h.rows();
        let dec = select_topk(&h, k).unwrap();
        let kept = apply_capacity(&dec, &CapacityConfig::new(cf).unwrap(), n, t);
        let quota = capacity_quota(cf, t, k, n);
        let mut load = vec![0usize; n];
        for (a, b) in dec.selected.iter().flatten().zip(kept.selected.iter().flatten()) {
            prop_assert_eq!(a.expert, b.expert);
            prop_assert_eq!(a.weight, b.weight);
            if !b.dropped {
                load[b.expert] += 1;
            }
        }
        prop_assert!(load.iter().all(|&l| l <= quota));
        let wanted = |e: usize| dec.selected.iter().flatten().filter(|s| s.expert == e).count();
        for e in 0..n {
            prop_assert_eq!(load[e], wanted(e).min(quota));
        }
    }

    #[test]
    fn uniform_routing_has_unit_balance_loss(t in 1usize..6, n in 1usize..6) {
        let tokens = t * n;
        let h = Matrix::zeros(tokens, n);
        let mut dec = select_topk(&h, 1).unwrap();
        for (i, row) in dec.selected.iter_mut().enumerate() {
            row[0].expert = i % n;
        }
        let l = load_balance_loss(&dec, n);
        prop_assert!((l - 1.0).abs() <= 1e-12);
    }
}

#[test]
fn ten_thousand_random_cases() {
    let start = std::time::Instant::now();
    let r = check_random_cases(10_000, 2024).unwrap();
    assert_eq!(r.cases, 10_000);
    assert_eq!(r.selection_violations, 0);
    assert_eq!(r.quota_violations, 0);
    assert!(r.max_weight_sum_error <= 1e-12);
    assert!(start.elapsed().as_secs_f64() < 10.0);
}

#[test]
fn noisy_logits_replay_exactly() {
    let mut rng = Rng::new(5);
    let x = rng.normal_matrix(4, 3, 1.0);
    let p = GateParams::new(rng.normal_matrix(3, 5, 1.0), rng.normal_matrix(3, 5, 1.0), 2, true).unwrap();
    let a = gate_logits(&x, &p, NoiseSource::Sample(&mut rng)).unwrap();
    let b = gate_logits(&x, &p, NoiseSource::Replay(a.eps.as_ref().unwrap())).unwrap();
    assert_eq!(a.logits, b.logits);
}
