use irwgan::importance::{batch_weights, weights_vjp};
use irwgan::losses::{self, plain};
use irwgan::metrics::ess_statistic;
use proptest::prelude::*;

fn scores() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-30.0f64..30.0, 2..=64)
}

proptest! {
    #[test]
    fn weights_are_nonnegative_and_sum_to_n(s in scores()) {
        let b = batch_weights(&s).unwrap();
        let n = s.len() as f64;
        prop_assert!(b.iter().all(|w| *w >= 0.0));
        prop_assert!((b.iter().sum::<f64>() - n).abs() <= 1e-10);
    }

    #[test]
    fn weights_ignore_a_common_shift(s in scores(), c in -50.0f64..50.0) {
        let a = batch_weights(&s).unwrap();
        let shifted: Vec<f64> = s.iter().map(|v| v + c).collect();
        let b = batch_weights(&shifted).unwrap();
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() <= 1e-9 * x.max(1.0));
        }
    }

    #[test]
    fn weights_follow_score_order(s in scores()) {
        let b = batch_weights(&s).unwrap();
        for i in 0..s.len() {
            for j in 0..s.len() {
                if s[i] > s[j] {
                    prop_assert!(b[i] >= b[j]);
                }
            }
        }
    }

    #[test]
    fn norm_and_ess_bounds(s in scores()) {
        let b = batch_weights(&s).unwrap();
        let n = s.len() as f64;
        let norm = losses::ess_loss(&b);
        prop_assert!(norm >= n.sqrt() * (1.0 - 1e-12) && norm <= n * (1.0 + 1e-12));
        let ess = ess_statistic(&b).unwrap();
        prop_assert!((1.0 - 1e-9..=n + 1e-9).contains(&ess));
        prop_assert!(norm >= losses::ess_loss(&vec![1.0; s.len()]) * (1.0 - 1e-12));
    }

    #[test]
    fn vjp_is_orthogonal_to_the_shift_direction(s in scores(), g in prop::collection::vec(-3.0f64..3.0, 64)) {
        // Adding a constant to every score leaves the weights unchanged, so the
        // pulled-back gradient must sum to zero.
        let b = batch_weights(&s).unwrap();
        let v = weights_vjp(&b, &g[..s.len()]).unwrap();
        let scale: f64 = v.iter().map(|x| x.abs()).sum::<f64>().max(1.0);
        prop_assert!(v.iter().sum::<f64>().abs() <= 1e-10 * scale);
    }

    #[test]
    fn unit_weights_reduce_to_plain_losses(
        real in prop::collection::vec(-2.0f64..2.0, 2..32),
        seed in any::<u64>(),
    ) {
        let n = real.len();
        let fake: Vec<f64> = real.iter().enumerate().map(|(i, r)| (r * 1.7 + i as f64 * 0.1 + (seed % 7) as f64 * 0.01).sin()).collect();
        let ones = vec![1.0; n];
        let w = losses::disc_loss(&real, &fake, &ones, &ones).unwrap();
        prop_assert!((w - plain::disc_loss(&real, &fake)).abs() <= 1e-12);
        let w = losses::gen_adv_loss(&fake, &ones).unwrap();
        prop_assert!((w - plain::gen_adv_loss(&fake)).abs() <= 1e-12);
    }

    #[test]
    fn weighted_terms_are_linear_in_weights(
        fake in prop::collection::vec(-2.0f64..2.0, 4),
        a in prop::collection::vec(0.0f64..3.0, 4),
        b in prop::collection::vec(0.0f64..3.0, 4),
    ) {
        let sum: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x + y).collect();
        let l = |w: &[f64]| losses::gen_adv_loss(&fake, w).unwrap();
        prop_assert!((l(&sum) - l(&a) - l(&b)).abs() <= 1e-12);
    }
}

#[test]
fn one_hot_and_uniform_extremes() {
    for n in [2usize, 5, 64] {
        let uniform = vec![1.0; n];
        assert_eq!(ess_statistic(&uniform).unwrap(), n as f64);
        assert_eq!(losses::ess_loss(&uniform), (n as f64).sqrt());
        let mut one_hot = vec![0.0; n];
        one_hot[n / 2] = n as f64;
        assert_eq!(ess_statistic(&one_hot).unwrap(), 1.0);
        assert_eq!(losses::ess_loss(&one_hot), n as f64);
    }
}

#[test]
fn extreme_scores_stay_finite() {
    let b = batch_weights(&[700.0, -700.0, 0.0]).unwrap();
    assert!(b.iter().all(|w| w.is_finite()));
    assert!((b[0] - 3.0).abs() < 1e-12);
}
