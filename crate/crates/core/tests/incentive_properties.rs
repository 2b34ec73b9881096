use fedcontract::incentive::{
    l_coeffs, per_level_objective, rewards_from_efforts, solve_contract, solve_contract_with, verify_contract,
    AccuracyCurveParams, MarketModel, SolverOptions,
};
use proptest::prelude::*;

/// Markets with evenly spaced qualities and uniform level probabilities;
/// these keep `l_n / p_n` non-increasing, so optimal efforts rise with level.
fn regular_market() -> impl Strategy<Value = MarketModel> {
    (2usize..=10, 0.01f64..0.3, 1e6f64..1e7, 1e5f64..1e6, 2e4f64..2e5).prop_map(|(n, lo, l1, l2, t_max)| {
        let mut m = MarketModel::uniform(n);
        m.theta = (0..n).map(|i| (lo + (1.0 - lo) * i as f64 / (n - 1) as f64).min(1.0)).collect();
        m.lambda1 = l1;
        m.lambda2 = l2;
        m.t_max = t_max;
        m
    })
}

/// Increasing qualities and arbitrary level probabilities.
fn any_market() -> impl Strategy<Value = MarketModel> {
    (2usize..=10)
        .prop_flat_map(|n| {
            (
                prop::collection::btree_set(1u32..1000, n),
                prop::collection::vec(0.05f64..1.0, n),
                1e6f64..1e7,
                1e5f64..1e6,
            )
        })
        .prop_map(|(thetas, p, l1, l2)| {
            let n = thetas.len();
            let total: f64 = p.iter().sum();
            let mut m = MarketModel::uniform(n);
            m.theta = thetas.into_iter().map(|t| t as f64 / 1000.0).collect();
            m.p = p.iter().map(|x| x / total).collect();
            m.lambda1 = l1;
            m.lambda2 = l2;
            m
        })
}

fn is_regular(m: &MarketModel) -> bool {
    let l = l_coeffs(m);
    (1..m.levels()).all(|n| l[n] / m.p[n] <= l[n - 1] / m.p[n - 1] * (1.0 + 1e-12))
}

fn nondecreasing(v: &[f64]) -> bool {
    v.windows(2).all(|w| w[0] <= w[1])
}

/// Solves the binding IR and downward IC equations one level at a time.
fn sequential_rewards(efforts: &[f64], m: &MarketModel) -> Vec<f64> {
    let k = m.cost_rate();
    let mut rewards: Vec<f64> = Vec::new();
    for (n, &e) in efforts.iter().enumerate() {
        let r = match rewards.last() {
            // IR: θ_1·R_1 - k·e_1 - E_com = 0
            None => (k * e + m.e_com) / m.theta[0],
            // IC: θ_n·R_n - k·e_n = θ_n·R_{n-1} - k·e_{n-1}
            Some(&prev) => (m.theta[n] * prev - k * efforts[n - 1] + k * e) / m.theta[n],
        };
        rewards.push(r);
    }
    rewards
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn regular_menus_are_monotone_and_incentive_compatible(m in regular_market()) {
        let acp = AccuracyCurveParams::default();
        let menu = solve_contract(&m, &acp).unwrap();
        prop_assert!(nondecreasing(&menu.efforts()));
        prop_assert!(nondecreasing(&menu.rewards()));
        let report = verify_contract(&menu, &m);
        prop_assert!(report.ok(), "{:?}", report.violations);
        prop_assert!(report.ir[0].abs() <= 1e-6);
        prop_assert!(report.ir.iter().all(|v| *v >= -1e-6));

        // brute-force type-contract choice, ties broken toward the own contract
        let k = m.cost_rate();
        for n in 0..m.levels() {
            let u = |pick: usize| m.theta[n] * menu.entries[pick].reward - k * menu.entries[pick].effort - m.e_com;
            let own = u(n);
            prop_assert!((0..m.levels()).all(|j| u(j) <= own + 1e-6));
        }
    }

    #[test]
    fn solver_is_monotone_whenever_it_succeeds(m in any_market()) {
        match solve_contract(&m, &AccuracyCurveParams::default()) {
            Ok(menu) => {
                prop_assert!(nondecreasing(&menu.efforts()));
                prop_assert!(verify_contract(&menu, &m).ok());
            }
            Err(e) => prop_assert!(!is_regular(&m), "regular market rejected: {e}"),
        }
    }

    #[test]
    fn closed_form_rewards_solve_the_binding_equations(
        m in regular_market(),
        raw in prop::collection::vec(1.0f64..20_000.0, 10),
    ) {
        let mut efforts = raw[..m.levels()].to_vec();
        efforts.sort_by(f64::total_cmp);
        let closed = rewards_from_efforts(&efforts, &m).unwrap();
        let seq = sequential_rewards(&efforts, &m);
        for (a, b) in closed.iter().zip(&seq) {
            prop_assert!((a - b).abs() <= 1e-9 * b.abs().max(1.0), "{a} vs {b}");
        }
    }

    #[test]
    fn grid_solution_is_within_one_fine_step_of_the_best(m in regular_market()) {
        let acp = AccuracyCurveParams::default();
        let opts = SolverOptions::default();
        let menu = solve_contract_with(&m, &acp, &opts).unwrap();
        let l = l_coeffs(&m);
        let (lo, hi) = opts.bounds(&m);
        let fine = opts.grid_points * 10;
        let h = (hi - lo) / (fine - 1) as f64;
        for (i, entry) in menu.entries.iter().enumerate() {
            let f = |e: f64| per_level_objective(e, i + 1, &l, &m, &acp).unwrap();
            let values: Vec<f64> = (0..fine).map(|j| f((lo + h * j as f64).min(hi))).collect();
            let (best_j, best) = values
                .iter()
                .copied()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |acc, p| if p.1 > acc.1 { p } else { acc });
            let lipschitz_step = [best_j.saturating_sub(1), (best_j + 1).min(fine - 1)]
                .iter()
                .map(|&j| (values[j] - best).abs())
                .fold(0.0, f64::max);
            let solved = f(entry.effort);
            prop_assert!(solved >= best - lipschitz_step - 1e-9 * best.abs(), "level {}: {solved} < {best}", i + 1);
        }
    }
}

#[test]
fn reference_menu_is_verified() {
    let m = MarketModel::uniform(10);
    let menu = solve_contract(&m, &AccuracyCurveParams::default()).unwrap();
    let report = verify_contract(&menu, &m);
    assert!(report.ok(), "{:?}", report.violations);
    assert!(report.binding_ir[0]);
    assert!(report.binding_ic_down[1..].iter().all(|b| *b));
}

#[test]
fn without_accuracy_weight_the_lowest_effort_is_optimal() {
    // the remaining objective p·λ2·ln(slack) - l·e falls strictly in effort
    let mut m = MarketModel::uniform(10);
    m.lambda1 = 0.0;
    let opts = SolverOptions::default();
    let menu = solve_contract_with(&m, &AccuracyCurveParams::default(), &opts).unwrap();
    for e in menu.efforts() {
        assert!((e - opts.min_effort).abs() < 1e-6, "effort {e}");
    }
}

#[test]
fn single_level_market_pays_the_participation_floor() {
    let m = MarketModel::uniform(1);
    let menu = solve_contract(&m, &AccuracyCurveParams::default()).unwrap();
    let report = verify_contract(&menu, &m);
    assert!(report.ok());
    let e = menu.entries[0].effort;
    assert!((menu.entries[0].reward - (m.cost_rate() * e + m.e_com) / m.theta[0]).abs() < 1e-9);
}
