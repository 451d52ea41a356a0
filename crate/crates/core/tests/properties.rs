use proptest::prelude::*;

use tcfnet::dsp::{winsorize, WinsorBounds};
use tcfnet::fnb::FuzzyRuleSet;
use tcfnet::Tensor;

fn rules(k: usize, d: usize) -> impl Strategy<Value = (FuzzyRuleSet, Vec<f64>)> {
    (
        prop::collection::vec(-50.0..50.0f64, k * d),
        prop::collection::vec(-4.0..4.0f64, d),
        prop::collection::vec(-1e3..1e3f64, d),
    )
        .prop_map(move |(c, a, v)| {
            let set = FuzzyRuleSet {
                centroids: Tensor::new([k, d], c).unwrap(),
                log_a: Tensor::new([d], a).unwrap(),
            };
            (set, v)
        })
}

proptest! {
    // Far-away inputs with tiny widths underflow every raw strength; the
    // normalized activations must still be a distribution.
    #[test]
    fn fuzzy_activations_form_a_distribution((set, v) in (1usize..6, 1usize..20).prop_flat_map(|(k, d)| rules(k, d))) {
        let o = set.forward(&v).unwrap();
        prop_assert_eq!(o.len(), set.k());
        prop_assert!(o.iter().all(|x| x.is_finite() && *x >= 0.0));
        prop_assert!((o.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    // Clipping with the fitted bounds is idempotent. Refitting on the clipped
    // signal may move an interpolated bound, but only inwards.
    #[test]
    fn winsorizing_is_bounded_and_stable(mut x in prop::collection::vec(-1e4..1e4f64, 2..400)) {
        let original = x.clone();
        let b = winsorize(&mut x, 10.0, 90.0).unwrap();
        prop_assert!(x.iter().all(|v| (b.lo..=b.hi).contains(v)));
        let (lo, hi) = original.iter().fold((f64::MAX, f64::MIN), |(l, h), &v| (l.min(v), h.max(v)));
        prop_assert!(lo <= b.lo && b.hi <= hi);
        let once = x.clone();
        b.apply(&mut x);
        prop_assert_eq!(&x, &once);
        let refit = WinsorBounds::fit(&once, 10.0, 90.0).unwrap();
        prop_assert!(b.lo <= refit.lo && refit.hi <= b.hi);
    }
}
