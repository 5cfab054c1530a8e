use proptest::prelude::*;
use qnerf::pipeline::{build_schedule, final_steps, Event};
use qnerf::qfield::{FeatureField, FieldConfig, LayerSpec, QuerySet};
use qnerf::store;
use qnerf::grid::Grid;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn schedules_are_total(steps in 2usize..80, tau_frac in 0.0f64..1.0) {
        let tau = 1 + ((steps / 2 - 1) as f64 * tau_frac) as usize;
        let s = build_schedule(steps, tau).unwrap();
        prop_assert_eq!(final_steps(s.events()), (1..=steps).rev().collect::<Vec<_>>());
        prop_assert_eq!(s.events().last(), Some(&Event::Finish(0)));
        let ex = s.extraction_timesteps();
        prop_assert_eq!(ex.len(), s.training_count());
        prop_assert!(ex.windows(2).all(|w| w[0] - w[1] == tau));
        // each rewind returns to the latest stored timestep
        let mut stored = None;
        for e in s.events() {
            match *e {
                Event::Store(t) => stored = Some(t),
                Event::Rewind(t) => prop_assert_eq!(Some(t), stored),
                _ => {}
            }
        }
    }

    #[test]
    fn bad_tau_is_rejected(steps in 1usize..40, extra in 1usize..10) {
        prop_assert!(build_schedule(steps, steps / 2 + extra).is_err());
    }

    #[test]
    fn checkpoints_round_trip(seed in 0u64..1000, width in 1usize..12, depth in 1usize..4, freqs in 0usize..4) {
        let field = FeatureField::new(
            FieldConfig { frequencies: freqs, width, depth },
            vec![LayerSpec::new(0, 4, 2), LayerSpec::new(1, 8, 3)],
            seed,
        )
        .unwrap()
        .rounded_to_f32();
        let bytes = store::checkpoint_bytes(&field);
        let back = store::checkpoint_from_bytes(&bytes).unwrap();
        prop_assert_eq!(&back, &field);
        prop_assert_eq!(store::checkpoint_bytes(&back), bytes);
    }

    #[test]
    fn truncated_or_corrupted_checkpoints_fail(seed in 0u64..100, cut in 1usize..64, flip in 0usize..4) {
        let field = FeatureField::new(
            FieldConfig { frequencies: 1, width: 4, depth: 1 },
            vec![LayerSpec::new(0, 4, 2)],
            seed,
        )
        .unwrap();
        let bytes = store::checkpoint_bytes(&field);
        prop_assert!(store::checkpoint_from_bytes(&bytes[..bytes.len() - cut]).is_err());
        let mut bad = bytes.clone();
        bad[flip] ^= 0x20;
        prop_assert!(store::checkpoint_from_bytes(&bad).is_err());
        let mut long = bytes;
        long.push(0);
        prop_assert!(store::checkpoint_from_bytes(&long).is_err());
    }

    #[test]
    fn query_dumps_round_trip(vals in proptest::collection::vec(-1e3f32..1e3, 2 * (16 + 27)), t in 0usize..50) {
        let layers = [LayerSpec::new(0, 2, 4), LayerSpec::new(1, 3, 3)];
        let mut it = vals.iter().map(|&v| v as f64);
        let views = (0..2)
            .map(|_| {
                layers
                    .iter()
                    .map(|l| Grid::from_data(l.resolution, l.channels, it.by_ref().take(l.resolution * l.resolution * l.channels).collect()).unwrap())
                    .collect()
            })
            .collect();
        let set = QuerySet { timestep: t, views };
        let bytes = store::queries_bytes(&set);
        prop_assert_eq!(&store::queries_from_bytes(&bytes, Some(&layers)).unwrap(), &set);
        prop_assert!(store::queries_from_bytes(&bytes, Some(&layers[..1])).is_err());
    }
}
