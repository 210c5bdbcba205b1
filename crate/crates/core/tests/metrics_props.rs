use proptest::prelude::*;
use widescale::metrics::{bootstrap_ci, judge_subset_accuracy, pass_at_n, success_rate, RewardMatrix};

fn matrix_and_choices() -> impl Strategy<Value = (Vec<Vec<u8>>, Vec<usize>)> {
    (1usize..8, 1usize..40).prop_flat_map(|(n, tasks)| {
        (
            prop::collection::vec(prop::collection::vec(0u8..=1, n), tasks),
            prop::collection::vec(1..=n, tasks),
        )
    })
}

proptest! {
    #[test]
    fn success_rate_never_beats_pass_at_n((rows, choices) in matrix_and_choices()) {
        let m = RewardMatrix::new(rows.clone()).unwrap();
        let chosen = m.chosen(&choices).unwrap();
        let sr = success_rate(&chosen).unwrap();
        let pass = pass_at_n(&m).unwrap();
        prop_assert!(sr <= pass);
        let subset = judge_subset_accuracy(&m, &choices).unwrap();
        let perfect = subset.accuracy.is_none_or(|a| a == 1.0);
        prop_assert_eq!(sr == pass, perfect);
        let mixed = rows.iter().filter(|r| r.contains(&0) && r.contains(&1)).count();
        prop_assert_eq!(subset.subset_size, mixed);
    }

    #[test]
    fn pass_at_k_grows_with_k((rows, _) in matrix_and_choices()) {
        let m = RewardMatrix::new(rows).unwrap();
        let mut last = 0.0;
        for k in 1..=m.n() {
            let p = pass_at_n(&m.prefix(k)).unwrap();
            prop_assert!(p >= last);
            last = p;
        }
    }

    #[test]
    fn bootstrap_is_seeded_and_ordered(values in prop::collection::vec(0u8..=1, 1..60), seed in any::<u64>()) {
        let v: Vec<f64> = values.iter().map(|&x| x as f64).collect();
        let (lo, hi) = bootstrap_ci(&v, 200, seed, 0.95).unwrap();
        prop_assert!(0.0 <= lo && lo <= hi && hi <= 1.0);
        prop_assert_eq!(bootstrap_ci(&v, 200, seed, 0.95).unwrap(), (lo, hi));
    }
}

#[test]
fn constant_samples_have_a_degenerate_interval() {
    assert_eq!(bootstrap_ci(&[1.0; 10], 100, 4, 0.95).unwrap(), (1.0, 1.0));
}
