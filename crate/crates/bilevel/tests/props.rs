//! Randomized structural invariants.

use bilevel::estimators::delta_jvp;
use bilevel::inner_solver::make_batch_path;
use bilevel::linalg::outer;
use bilevel::scalar::l2_norm;
use ndarray::Array1;
use proptest::prelude::*;

proptest! {
    #[test]
    fn delta_jvp_equals_the_materialized_rank_one_product(
        delta in prop::collection::vec(-10.0f64..10.0, 1..12),
        v_seed in prop::collection::vec(-10.0f64..10.0, 1..12),
        u in prop::collection::vec(-10.0f64..10.0, 1..9),
    ) {
        let d = delta.len().min(v_seed.len());
        let delta = Array1::from_vec(delta[..d].to_vec());
        let v = Array1::from_vec(v_seed[..d].to_vec());
        let u = Array1::from_vec(u);
        let fast = delta_jvp(&delta, &v, &u);
        let slow = outer(&delta, &u).t().dot(&v);
        let scale = l2_norm(&slow).max(1.0);
        prop_assert!(l2_norm(&(&fast - &slow)) <= 1e-12 * scale);
    }

    #[test]
    fn batch_paths_are_structured(
        seed in any::<u64>(),
        steps in 0usize..12,
        m in 1usize..60,
        frac in 0.01f64..1.0,
    ) {
        let s = ((m as f64 * frac).ceil() as usize).clamp(1, m);
        let path = make_batch_path(seed, steps, m, s).unwrap();
        prop_assert_eq!(path.steps(), steps);
        for step in 0..steps {
            let batch = path.batch(step);
            prop_assert_eq!(batch.len(), s);
            prop_assert!(batch.iter().all(|&i| i < m));
            prop_assert!(batch.windows(2).all(|w| w[0] < w[1]));
        }
    }
}
