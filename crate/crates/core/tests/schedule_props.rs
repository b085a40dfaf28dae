use latentseg::pipeline::ladder;
use latentseg::schedule::{
    combined_loss, direct_latent_estimate, forward_diffuse, LatentGrid, LatentRole, NoiseSchedule,
};
use proptest::prelude::*;

fn grid(values: Vec<f64>, role: LatentRole) -> LatentGrid {
    let n = values.len();
    LatentGrid::new([1, 1, n], values, role).unwrap()
}

proptest! {
    #[test]
    fn round_trip_recovers_clean_latent(
        pairs in prop::collection::vec((-5.0f64..5.0, -5.0f64..5.0), 1..32),
        t in 1usize..=1000,
    ) {
        let s = NoiseSchedule::default();
        let (z, n): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        let z0 = grid(z, LatentRole::CleanLatent);
        let noise = grid(n, LatentRole::Noise);
        let z_t = forward_diffuse(&z0, t, &noise, &s).unwrap();
        let back = direct_latent_estimate(&z_t, &noise, t, &s).unwrap();
        for (a, b) in z0.values().iter().zip(back.values()) {
            prop_assert!((a - b).abs() <= 1e-9 * (1.0 + a.abs()));
        }
    }

    #[test]
    fn forward_diffusion_preserves_unit_variance_mixture(t in 1usize..=1000) {
        let s = NoiseSchedule::default();
        let (signal, sigma) = s.coefficients(t).unwrap();
        prop_assert!((signal * signal + sigma * sigma - 1.0).abs() < 1e-12);
    }

    #[test]
    fn alpha_bar_decreases(b0 in 1e-5f64..1e-3, span in 1e-3f64..0.05, steps in 2usize..400) {
        let s = NoiseSchedule::linear(steps, b0, b0 + span).unwrap();
        let ab = s.alpha_bars();
        prop_assert!(ab.iter().all(|a| *a > 0.0 && *a < 1.0));
        prop_assert!(ab.windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn combined_loss_is_weighted_sum(noise in 0.0f64..10.0, latent in 0.0f64..10.0, lambda in 0.0f64..4.0) {
        let b = combined_loss(noise, latent, lambda).unwrap();
        prop_assert!(b.total >= 0.0);
        prop_assert!((b.total - (noise + lambda * latent)).abs() < 1e-12);
    }

    #[test]
    fn ladder_is_strictly_decreasing(start in 1usize..=1000, count in 1usize..=64) {
        prop_assume!(count <= start);
        let l = ladder(start, count).unwrap();
        prop_assert_eq!(l.len(), count);
        prop_assert_eq!(l[0], start);
        prop_assert!(l.windows(2).all(|w| w[1] < w[0]));
        prop_assert!(*l.last().unwrap() >= 1);
    }
}

#[test]
fn negative_loss_rejected() {
    assert!(combined_loss(-1.0, 0.0, 1.0).is_err());
    assert!(combined_loss(0.0, 1.0, -0.5).is_err());
}
