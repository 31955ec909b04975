use estab_dp::neighbor::{
    combine_protection, compose_intersect, is_close, uncertainty_interval, values_close,
    DistanceParams, NeighborFunction,
};
use estab_dp::dataset::EstablishmentRecord;
use proptest::prelude::*;

fn builtin() -> impl Strategy<Value = NeighborFunction> {
    let shift = prop_oneof![Just(0.0), 1e-3..1e3f64];
    prop_oneof![
        Just(NeighborFunction::sqrt()),
        shift.clone().prop_map(|a| NeighborFunction::sqrt_shift(a).unwrap()),
        (1e-3..1e3f64).prop_map(|a| NeighborFunction::log_shift(a).unwrap()),
        (1e-2..1e2f64).prop_map(|d| NeighborFunction::linear(d).unwrap()),
    ]
}

fn positive() -> impl Strategy<Value = f64> {
    (-4.0..6.0f64).prop_map(|e| 10f64.powf(e))
}

fn rel_tol(x: f64) -> f64 {
    1e-9 * x.abs().max(1.0)
}

proptest! {
    #[test]
    fn monotone_and_concave(f in builtin(), a in positive(), b in positive()) {
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        prop_assume!(hi - lo > rel_tol(hi));
        prop_assert!(f.evaluate(lo) < f.evaluate(hi));
        prop_assert!(f.derivative(hi) <= f.derivative(lo) * (1.0 + 1e-12));
        let mid = 0.5 * (lo + hi);
        let chord = 0.5 * (f.evaluate(lo) + f.evaluate(hi));
        prop_assert!(f.evaluate(mid) + rel_tol(chord) >= chord);
    }

    #[test]
    fn x_times_derivative_nondecreasing(f in builtin(), a in positive(), b in positive()) {
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        prop_assert!(lo * f.derivative(lo) <= hi * f.derivative(hi) * (1.0 + 1e-12));
    }

    #[test]
    fn inverse_round_trips(f in builtin(), x in positive()) {
        let back = f.inverse(f.evaluate(x));
        prop_assert!((back - x).abs() <= 1e-8 * x.max(1.0), "{x} -> {back}");
    }

    #[test]
    fn interval_contains_point_and_is_symmetric(
        f in builtin(),
        x in positive(),
        delta in 0.01..2.0f64,
        t in 0.0..1.0f64,
    ) {
        let i = uncertainty_interval(&f, delta, x);
        prop_assert!(i.lower <= x && x <= i.upper);
        prop_assert!(i.lower >= 0.0);
        let y = i.lower + t * (i.upper - i.lower);
        prop_assert!(values_close(&f, delta * (1.0 + 1e-9), x, y));
        prop_assert!(values_close(&f, delta * (1.0 + 1e-9), y, x));
    }

    #[test]
    fn intervals_widen_with_value(f in builtin(), a in positive(), b in positive(), delta in 0.01..2.0f64) {
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        let wl = uncertainty_interval(&f, delta, lo).width();
        let wh = uncertainty_interval(&f, delta, hi).width();
        prop_assert!(wl <= wh * (1.0 + 1e-9) + 1e-12);
    }

    #[test]
    fn relative_width_shrinks_with_value(f in builtin(), a in positive(), b in positive(), delta in 0.01..2.0f64) {
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        let rl = uncertainty_interval(&f, delta, lo).width() / lo;
        let rh = uncertainty_interval(&f, delta, hi).width() / hi;
        prop_assert!(rh <= rl * (1.0 + 1e-9));
    }

    #[test]
    fn closeness_of_records_is_symmetric(
        f in builtin(),
        xs in prop::array::uniform4(0.0..1e4f64),
        ys in prop::array::uniform4(0.0..1e4f64),
        delta in 0.1..5.0f64,
    ) {
        let rec = |values| EstablishmentRecord {
            year: "2016".into(),
            qtr: "1".into(),
            state: "01".into(),
            county: "001".into(),
            naics: "111111".into(),
            ownership: "5".into(),
            values,
            primary_key: "1".into(),
        };
        let d = DistanceParams::uniform(delta).unwrap();
        prop_assert_eq!(is_close(&rec(xs), &rec(ys), &f, &d), is_close(&rec(ys), &rec(xs), &f, &d));
        prop_assert!(is_close(&rec(xs), &rec(xs), &f, &d));
    }

    #[test]
    fn combination_contains_and_intersection_is_contained(
        fa in builtin(),
        fb in builtin(),
        da in 0.05..2.0f64,
        db in 0.05..2.0f64,
        x in (-2.0..5.0f64).prop_map(|e| 10f64.powf(e)),
    ) {
        let ia = uncertainty_interval(&fa, da, x);
        let ib = uncertainty_interval(&fb, db, x);
        let union = combine_protection(&fa, da, &fb, db).unwrap();
        let iu = uncertainty_interval(&union, 1.0, x);
        prop_assert!(iu.contains_interval(&ia, 1e-6), "{iu:?} vs {ia:?}");
        prop_assert!(iu.contains_interval(&ib, 1e-6), "{iu:?} vs {ib:?}");

        let inter = compose_intersect(&fa, da, &fb, db).unwrap();
        let ii = uncertainty_interval(&inter, 1.0, x);
        prop_assert!(ia.contains_interval(&ii, 1e-6), "{ia:?} vs {ii:?}");
        prop_assert!(ib.contains_interval(&ii, 1e-6), "{ib:?} vs {ii:?}");
    }
}
