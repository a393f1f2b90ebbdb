use std::f64::consts::PI;

use proptest::prelude::*;

use dexmoe_core::env::{quat_angle, Quat};
use dexmoe_core::eval::summarize;
use dexmoe_core::policy::{aggregate, argmax, route, RouterMode};
use dexmoe_core::ppo::compute_gae;

fn logits() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-30.0f64..30.0, 1..10)
}

fn unit_quat() -> impl Strategy<Value = Quat> {
    prop::array::uniform4(-1.0f64..1.0)
        .prop_filter("not near zero", |a| a.iter().map(|v| v * v).sum::<f64>() > 1e-3)
        .prop_map(|a| Quat::from_array(a).normalize())
}

proptest! {
    #[test]
    fn every_router_lands_on_the_simplex(l in logits(), k in 1usize..10) {
        let n = l.len();
        let modes = [RouterMode::Soft, RouterMode::Switch, RouterMode::TopK(k.min(n))];
        for m in modes {
            let w = route(&l, m).unwrap();
            prop_assert_eq!(w.len(), n);
            prop_assert!(w.iter().all(|&p| p >= 0.0));
            prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let topk = route(&l, RouterMode::TopK(k.min(n))).unwrap();
        prop_assert!(topk.iter().filter(|&&p| p > 0.0).count() <= k.min(n));
        let sw = route(&l, RouterMode::Switch).unwrap();
        prop_assert_eq!(sw[argmax(&l)], 1.0);
    }

    #[test]
    fn full_top_k_is_soft(l in logits()) {
        let a = route(&l, RouterMode::Soft).unwrap();
        let b = route(&l, RouterMode::TopK(l.len())).unwrap();
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() < 1e-15);
        }
    }

    #[test]
    fn one_hot_aggregation_is_exact(outs in prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 11), 1..8), pick in 0usize..8) {
        let i = pick % outs.len();
        let mut w = vec![0.0; outs.len()];
        w[i] = 1.0;
        let refs: Vec<&[f64]> = outs.iter().map(|o| o.as_slice()).collect();
        prop_assert_eq!(aggregate(&w, &refs).unwrap(), outs[i].clone());
    }

    #[test]
    fn aggregate_stays_in_the_hull(l in logits(), seed in 0u64..1000) {
        let n = l.len();
        let outs: Vec<Vec<f64>> = (0..n).map(|i| vec![((i as u64 * 7 + seed) % 13) as f64 - 6.0]).collect();
        let refs: Vec<&[f64]> = outs.iter().map(|o| o.as_slice()).collect();
        let y = aggregate(&route(&l, RouterMode::Soft).unwrap(), &refs).unwrap()[0];
        let lo = outs.iter().map(|o| o[0]).fold(f64::INFINITY, f64::min);
        let hi = outs.iter().map(|o| o[0]).fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(y >= lo - 1e-12 && y <= hi + 1e-12);
    }

    #[test]
    fn summary_is_ordered_and_order_free(mut s in prop::collection::vec(0.0f64..20.0, 5..40), rot in 0usize..40) {
        let a = summarize(&s).unwrap();
        prop_assert!(a.ordered());
        let r = rot % s.len();
        s.rotate_left(r);
        s.reverse();
        prop_assert_eq!(a, summarize(&s).unwrap());
    }

    #[test]
    fn angle_is_a_metric_on_rotations(a in unit_quat(), b in unit_quat(), c in unit_quat()) {
        let ab = quat_angle(a, b).unwrap();
        prop_assert!((0.0..=PI + 1e-12).contains(&ab));
        prop_assert!((ab - quat_angle(b, a).unwrap()).abs() < 1e-12);
        prop_assert!((ab - quat_angle(-a, b).unwrap()).abs() < 1e-12);
        prop_assert!(ab <= quat_angle(a, c).unwrap() + quat_angle(c, b).unwrap() + 1e-9);
        // left-invariance
        prop_assert!((ab - quat_angle(c * a, c * b).unwrap()).abs() < 1e-9);
    }

    #[test]
    fn exp_log_round_trip(v in prop::array::uniform3(-1.0f64..1.0), scale in 0.0f64..3.1) {
        let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt().max(1e-9);
        let r = [v[0] / n * scale, v[1] / n * scale, v[2] / n * scale];
        let back = Quat::exp_map(r).log_map();
        for k in 0..3 {
            prop_assert!((back[k] - r[k]).abs() < 1e-9);
        }
        prop_assert!((quat_angle(Quat::IDENTITY, Quat::exp_map(r)).unwrap() - scale).abs() < 1e-9);
    }

    #[test]
    fn gae_with_unit_lambda_is_the_discounted_return(
        rewards in prop::collection::vec(-2.0f64..2.0, 1..30),
        values in prop::collection::vec(-2.0f64..2.0, 30),
        gamma in 0.5f64..1.0,
    ) {
        // One environment whose last step terminates.
        let n = rewards.len();
        let mut dones = vec![false; n];
        dones[n - 1] = true;
        let (_, returns) = compute_gae(&rewards, &values[..n], &dones, &[123.0], gamma, 1.0).unwrap();
        let mut g = 0.0;
        for t in (0..n).rev() {
            g = rewards[t] + gamma * g;
            prop_assert!((returns[t] - g).abs() < 1e-9);
        }
    }
}
