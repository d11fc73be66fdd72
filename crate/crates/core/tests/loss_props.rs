use metagdn::loss::{deviation, loss_and_grad, sample_reference, LossConfig, LossSettings};
use metagdn::rng::seeded;
use proptest::prelude::*;

fn config(seed: u64) -> LossConfig {
    LossSettings::default().resolve(&mut seeded(seed)).unwrap()
}

#[test]
fn reference_is_close_to_the_prior_for_many_seeds() {
    for seed in 0..100 {
        let r = sample_reference(0.0, 1.0, 5000, &mut seeded(seed)).unwrap();
        assert!(r.ref_mean.abs() <= 0.05, "seed {seed}: mean {}", r.ref_mean);
        assert!((r.ref_std - 1.0).abs() <= 0.05, "seed {seed}: std {}", r.ref_std);
    }
}

#[test]
fn reference_scales_with_sigma() {
    for c in [0.5, 2.0, 10.0] {
        let unit = sample_reference(0.0, 1.0, 5000, &mut seeded(9)).unwrap();
        let scaled = sample_reference(0.0, c, 5000, &mut seeded(9)).unwrap();
        assert!((scaled.ref_mean - c * unit.ref_mean).abs() <= 1e-12 * c);
        assert!((scaled.ref_std - c * unit.ref_std).abs() <= 1e-12 * c);
    }
}

#[test]
fn reference_is_deterministic() {
    let a = sample_reference(0.0, 1.0, 5000, &mut seeded(4)).unwrap();
    let b = sample_reference(0.0, 1.0, 5000, &mut seeded(4)).unwrap();
    assert_eq!(a, b);
}

#[test]
fn tiny_reference_sample_is_rejected() {
    assert!(sample_reference(0.0, 1.0, 1, &mut seeded(0)).is_err());
    assert!(sample_reference(0.0, 0.0, 10, &mut seeded(0)).is_err());
}

proptest! {
    #[test]
    fn gradient_matches_central_differences(
        seed in 0u64..50,
        scores in prop::collection::vec(-20.0f64..20.0, 1..32),
        flips in prop::collection::vec(any::<bool>(), 32),
    ) {
        let cfg = config(seed);
        let labels: Vec<u8> = scores.iter().zip(&flips).map(|(_, &f)| u8::from(f)).collect();
        let r = &cfg.reference;
        let near_kink = scores.iter().zip(&labels).any(|(&s, &y)| {
            let dev = deviation(s, r);
            if y == 0 { dev.abs() < 1e-3 } else { (dev - cfg.margin).abs() < 1e-3 }
        });
        prop_assume!(!near_kink);
        let (_, grad) = loss_and_grad(&scores, &labels, &cfg).unwrap();
        let h = 1e-6;
        for i in 0..scores.len() {
            let mut up = scores.clone();
            up[i] += h;
            let mut down = scores.clone();
            down[i] -= h;
            let fd = (loss_and_grad(&up, &labels, &cfg).unwrap().0
                - loss_and_grad(&down, &labels, &cfg).unwrap().0)
                / (2.0 * h);
            prop_assert!((fd - grad[i]).abs() <= 1e-8 + 1e-5 * fd.abs(), "coord {}: {} vs {}", i, fd, grad[i]);
        }
    }

    #[test]
    fn anomaly_loss_never_increases_with_score(seed in 0u64..20, a in -20.0f64..20.0, delta in 0.0f64..10.0) {
        let cfg = config(seed);
        let low = loss_and_grad(&[a], &[1], &cfg).unwrap().0;
        let high = loss_and_grad(&[a + delta], &[1], &cfg).unwrap().0;
        prop_assert!(high <= low);
    }

    #[test]
    fn normal_loss_grows_away_from_the_reference(seed in 0u64..20, gap in 0.0f64..10.0, extra in 0.0f64..10.0) {
        let cfg = config(seed);
        let mu = cfg.reference.ref_mean;
        for sign in [-1.0, 1.0] {
            let near = loss_and_grad(&[mu + sign * gap], &[0], &cfg).unwrap().0;
            let far = loss_and_grad(&[mu + sign * (gap + extra)], &[0], &cfg).unwrap().0;
            prop_assert!(far >= near);
        }
    }

    #[test]
    fn loss_is_nonnegative_and_batch_mean(seed in 0u64..20, scores in prop::collection::vec(-20.0f64..20.0, 1..20)) {
        let cfg = config(seed);
        let labels: Vec<u8> = (0..scores.len()).map(|i| (i % 2) as u8).collect();
        let (total, _) = loss_and_grad(&scores, &labels, &cfg).unwrap();
        let singles: f64 = scores
            .iter()
            .zip(&labels)
            .map(|(&s, &y)| loss_and_grad(&[s], &[y], &cfg).unwrap().0)
            .sum();
        prop_assert!(total >= 0.0);
        prop_assert!((total - singles / scores.len() as f64).abs() <= 1e-12 * (1.0 + total));
    }
}
