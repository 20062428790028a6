mod common;

use common::{sensitivity_gaps, SENSITIVITY_EPSILONS};

#[test]
fn first_order_gap_shrinks_with_scale() {
    for seed in [1, 2] {
        let gaps = sensitivity_gaps(seed, 30);
        assert!(
            gaps[0] > gaps[1] && gaps[1] > gaps[2],
            "seed {seed}: median gaps {gaps:?} at eps {SENSITIVITY_EPSILONS:?}"
        );
        // First-order remainder: the gap scales roughly linearly with eps.
        assert!(gaps[2] < 0.05, "{gaps:?}");
    }
}
