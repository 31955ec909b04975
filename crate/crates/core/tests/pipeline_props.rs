use std::collections::BTreeMap;

use estab_dp::dataset::{Attribute, Dataset, EstablishmentRecord, GroupBySumQuery, Grouper};
use estab_dp::mechanisms::{
    neighbor_mech, pnc_bounds, pnc_mech, pnc_sensitivity, Mechanism, NoisyAnswer, Space,
    VarianceKind,
};
use estab_dp::microdata::{build_problem, solve, AnswerSet, SolveOptions};
use estab_dp::neighbor::{NeighborFunction, ValidNeighborFunction};
use estab_dp::numerics::{mean_and_se, standard_normal};
use estab_dp::RngStream;
use proptest::prelude::*;

fn groupers() -> Vec<Grouper> {
    vec![
        Grouper::Identity,
        Grouper::Total,
        Grouper::County,
        Grouper::NaicsPrefix(2),
        Grouper::NaicsPrefix(4),
        Grouper::CountyNaicsPrefix(3),
        Grouper::CountyNaicsPrefix(6),
    ]
}

fn records() -> impl Strategy<Value = Vec<EstablishmentRecord>> {
    let one = (
        0..3usize,
        prop::sample::select(vec!["111110", "111920", "236115", "236220", "722511"]),
        prop::array::uniform4(0.0..5e3f64),
    );
    prop::collection::vec(one, 1..40).prop_map(|rows| {
        rows.into_iter()
            .enumerate()
            .map(|(i, (county, naics, values))| EstablishmentRecord {
                year: "2016".into(),
                qtr: "1".into(),
                state: "34".into(),
                county: format!("{:03}", 2 * county + 1),
                naics: naics.into(),
                ownership: "5".into(),
                values,
                primary_key: (i + 1).to_string(),
            })
            .collect()
    })
}

proptest! {
    #[test]
    fn group_sums_conserve_mass(recs in records(), g in prop::sample::select(groupers())) {
        let data = Dataset::new(recs).unwrap();
        for attribute in Attribute::ALL {
            let answers = data.answer_exact(&GroupBySumQuery::new(g, attribute));
            let direct: f64 = data.records().iter().map(|r| r.value(attribute)).sum();
            prop_assert!((answers.total() - direct).abs() <= 1e-9 * direct.max(1.0));
        }
    }

    #[test]
    fn membership_is_a_partition(recs in records(), g in prop::sample::select(groupers())) {
        let data = Dataset::new(recs).unwrap();
        let membership = data.group_membership(&g);
        let mut seen: Vec<&String> = membership.values().flatten().collect();
        prop_assert_eq!(seen.len(), data.len());
        seen.sort();
        seen.dedup();
        prop_assert_eq!(seen.len(), data.len());
        prop_assert!(membership.values().all(|m| !m.is_empty()));
    }

    #[test]
    fn groups_ignore_confidential_values(
        recs in records(),
        g in prop::sample::select(groupers()),
        scale in 0.0..10.0f64,
    ) {
        let original = Dataset::new(recs.clone()).unwrap();
        let changed: Vec<EstablishmentRecord> = recs
            .into_iter()
            .map(|mut r| {
                r.values = r.values.map(|v| v * scale + 1.0);
                r
            })
            .collect();
        let changed = Dataset::new(changed).unwrap();
        prop_assert_eq!(original.group_membership(&g), changed.group_membership(&g));
    }

    #[test]
    fn pnc_sensitivity_grows_with_bound(
        shift in 0.0..10.0f64,
        delta in 0.05..2.0f64,
        a in 0.0..1e6f64,
        b in 0.0..1e6f64,
    ) {
        let f = NeighborFunction::sqrt_shift(shift).unwrap();
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        prop_assert!(pnc_sensitivity(&f, delta, lo) <= pnc_sensitivity(&f, delta, hi) * (1.0 + 1e-9) + 1e-12);
        let g = NeighborFunction::log_shift(shift + 0.1).unwrap();
        prop_assert!(pnc_sensitivity(&g, delta, lo) <= pnc_sensitivity(&g, delta, hi) * (1.0 + 1e-9) + 1e-12);
    }

    #[test]
    fn mechanisms_are_deterministic_per_stream(recs in records(), seed in any::<u64>()) {
        let data = Dataset::new(recs).unwrap();
        let f = ValidNeighborFunction::new(NeighborFunction::sqrt()).unwrap();
        let id = GroupBySumQuery::new(Grouper::Identity, Attribute::M3emp);
        let county = GroupBySumQuery::new(Grouper::County, Attribute::M3emp);
        let draw = || {
            let mut rng = RngStream::new(seed, 3);
            let identity = neighbor_mech(&data, &id, &f, 0.5, 1.0, &mut rng).unwrap();
            let bounds = pnc_bounds(&identity, &f, 0.5, 1.0, 0.01, 1).unwrap();
            let noisy = pnc_mech(&data, &county, &bounds, &f, 0.5, 1.0, None, &mut rng).unwrap();
            (identity, noisy)
        };
        prop_assert_eq!(draw(), draw());
    }
}

/// With one identity query and one partition, both at known variances, the
/// weighted fit is unbiased and its per-record variance matches the analytic
/// inverse of the information matrix.
#[test]
fn weighted_fit_is_unbiased_with_expected_variance() {
    let truth = [4.0, 9.0, 1.0];
    let keys: Vec<String> = (0..3).map(|i| format!("r{i}")).collect();
    let identity: BTreeMap<String, Vec<String>> =
        keys.iter().map(|k| (format!("id={k}"), vec![k.clone()])).collect();
    let total: BTreeMap<String, Vec<String>> = [("total".to_string(), keys.clone())].into();
    let (v_id, v_total): (f64, f64) = (2.0, 0.5);
    let answer = |key: &str, value: f64, variance: f64| NoisyAnswer {
        group_key: key.to_string(),
        value,
        variance,
        variance_kind: VarianceKind::Exact,
        mechanism: Mechanism::Pnc,
        space: Space::Raw,
    };
    let mut rng = RngStream::new(77, 0);
    let mut fitted: Vec<Vec<f64>> = vec![Vec::new(); 3];
    for _ in 0..20_000 {
        let ids: Vec<NoisyAnswer> = keys
            .iter()
            .zip(truth)
            .map(|(k, t)| answer(&format!("id={k}"), t + v_id.sqrt() * standard_normal(&mut rng), v_id))
            .collect();
        let sum: f64 = truth.iter().sum();
        let tot = vec![answer("total", sum + v_total.sqrt() * standard_normal(&mut rng), v_total)];
        let sets = [
            AnswerSet { label: "id", attribute: Attribute::M1emp, answers: &ids, membership: &identity },
            AnswerSet { label: "total", attribute: Attribute::M1emp, answers: &tot, membership: &total },
        ];
        let problem = build_problem(&keys, &sets).unwrap();
        let sol = solve(&problem, &SolveOptions::default()).unwrap();
        for (j, v) in sol.values.into_iter().enumerate() {
            fitted[j].push(v);
        }
    }
    // Information matrix is I / v_id + 11' / v_total; Sherman-Morrison gives
    // diagonal v_id - v_id^2 / (v_total + n v_id) for its inverse.
    let n = 3.0;
    let expected_var = v_id - v_id * v_id / (v_total + n * v_id);
    for (j, xs) in fitted.iter().enumerate() {
        let (m, se) = mean_and_se(xs);
        assert!((m - truth[j]).abs() <= 4.0 * se, "record {j}: mean {m} se {se}");
        let var = estab_dp::numerics::sample_variance(xs);
        assert!((var / expected_var - 1.0).abs() < 0.05, "record {j}: var {var} vs {expected_var}");
    }
}
