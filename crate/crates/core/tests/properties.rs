use fedlab::data::{partition_indices, synth_blobs, PartitionPlan};
use fedlab::forensics::{pca2, two_means};
use fedlab::numcore::{forward, Activation, GradVector, Layout, ModelSpec, Tensor};
use fedlab::privacy::{clip, compress, noise_scale_at, Decay, NoisePolicy};
use fedlab::Error;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::HashSet;
use std::sync::Arc;

fn grad(values: Vec<f64>) -> GradVector {
    let layout = Arc::new(Layout::for_widths(&[values.len() - 1, 1]));
    GradVector::from_values(layout, values).unwrap()
}

fn decays() -> impl Strategy<Value = Decay> {
    prop_oneof![
        Just(Decay::Linear),
        Just(Decay::Exponential),
        (1usize..6).prop_map(|stages| Decay::Staircase { stages }),
        (1usize..15).prop_map(|period| Decay::Cyclic { period }),
    ]
}

proptest! {
    #[test]
    fn clipped_norm_never_exceeds_bound(values in prop::collection::vec(-50.0f64..50.0, 2..40), c in 0.01f64..20.0) {
        let g = grad(values);
        let out = clip(&g, c);
        prop_assert!(out.norm() <= c * (1.0 + 1e-12));
        if g.norm() <= c {
            prop_assert_eq!(out, g);
        }
    }

    #[test]
    fn compression_is_idempotent(values in prop::collection::vec(-5.0f64..5.0, 2..60), ratio in 0.0f64..=1.0) {
        let g = grad(values);
        let once = compress(&g, ratio).unwrap();
        prop_assert_eq!(compress(&once, ratio).unwrap(), once.clone());
        let zeros = once.values().iter().filter(|v| **v == 0.0).count();
        prop_assert!(zeros >= (ratio * g.len() as f64).floor() as usize);
    }

    #[test]
    fn schedule_stays_between_endpoints(
        decay in decays(),
        s0 in 1.0f64..20.0,
        frac in 0.05f64..1.0,
        horizon in 1usize..80,
    ) {
        let sf = s0 * frac;
        let p = NoisePolicy::dynamic_dp(4.0, s0, sf, decay);
        let mut prev = f64::INFINITY;
        for t in 0..=horizon {
            let s = noise_scale_at(&p, t, horizon);
            prop_assert!(s <= s0 + 1e-12 && s >= sf - 1e-12);
            if !matches!(decay, Decay::Cyclic { .. }) {
                prop_assert!(s <= prev + 1e-12);
            }
            prev = s;
        }
    }

    #[test]
    fn partition_shards_are_disjoint(
        clients in 1usize..12,
        samples in 1usize..8,
        classes_per_client in 1usize..5,
        seed in 0u64..1000,
    ) {
        let ds = synth_blobs(5, &[4, 4], 60, 1.0, seed).unwrap();
        let plan = PartitionPlan::uniform(clients, samples, classes_per_client, seed);
        let shards = match partition_indices(&ds, &plan) {
            Err(Error::Infeasible(_)) => return Ok(()),
            other => other.unwrap(),
        };
        prop_assert_eq!(shards.len(), clients);
        let mut seen = HashSet::new();
        for shard in &shards {
            prop_assert_eq!(shard.len(), samples);
            let labels: HashSet<usize> = shard.iter().map(|&i| ds.labels()[i]).collect();
            prop_assert!(labels.len() <= classes_per_client);
            for &i in shard {
                prop_assert!(seen.insert(i));
            }
        }
    }

    #[test]
    fn pca_ignores_translation(
        pts in prop::collection::vec(prop::collection::vec(-3.0f64..3.0, 4), 3..20),
        shift in prop::collection::vec(-100.0f64..100.0, 4),
    ) {
        let moved: Vec<Vec<f64>> = pts.iter().map(|p| p.iter().zip(&shift).map(|(a, b)| a + b).collect()).collect();
        let a = pca2(&pts).unwrap();
        let b = pca2(&moved).unwrap();
        prop_assert_eq!(a.degenerate, b.degenerate);
        for (p, q) in a.points.iter().zip(&b.points) {
            prop_assert!((p[0] - q[0]).abs() < 1e-8 && (p[1] - q[1]).abs() < 1e-8);
        }
    }

    #[test]
    fn two_means_objective_never_rises(
        pts in prop::collection::vec((-10.0f64..10.0, -10.0f64..10.0), 2..60),
        seed in 0u64..100,
    ) {
        let points: Vec<[f64; 2]> = pts.into_iter().map(|(x, y)| [x, y]).collect();
        let km = two_means(&points, seed);
        for w in km.objective.windows(2) {
            prop_assert!(w[1] <= w[0] * (1.0 + 1e-12) + 1e-12);
        }
    }

    #[test]
    fn softmax_is_a_distribution(seed in 0u64..500, scale in 0.0f64..500.0, tanh in any::<bool>()) {
        let act = if tanh { Activation::Tanh } else { Activation::Sigmoid };
        let spec = ModelSpec::new(vec![6], vec![5], 4, act).unwrap();
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let mut params = spec.init_params(&mut r);
        params.scale(1.0 + scale);
        let x = Tensor::from_vec((0..6).map(|k| (k as f64 * 0.37 + seed as f64).sin()).collect());
        let probs = forward(&spec, &params, &x).unwrap();
        prop_assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(probs.iter().all(|p| (0.0..=1.0).contains(p)));
    }
}
