//! The LP backend against brute-force vertex enumeration.

mod common;

use common::lp_oracle::{random_lp, vertex_optimum};
use koopgas::lp::solve_lp;
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(96))]

    #[test]
    fn matches_vertex_enumeration(lp in random_lp()) {
        match (vertex_optimum(&lp), solve_lp(&lp)) {
            (Some(best), Ok(sol)) => {
                prop_assert!((sol.objective - best).abs() <= 1e-6 * (1.0 + best.abs()), "{} vs {}", sol.objective, best);
                prop_assert!(lp.max_violation(&sol.x).0 <= 1e-6);
            }
            (None, _) => prop_assert!(false, "enumeration found no vertex of a feasible LP"),
            (Some(best), Err(e)) => prop_assert!(false, "solver failed ({e}) on an LP with optimum {best}"),
        }
    }
}
