//! Frozen expected values for the shipped two-state benchmark, computed with
//! an independent NumPy implementation of the same recursion and pinned here
//! verbatim. Any drift in the backward solve, the cost formulas, or the
//! benchmark constructor trips these before anything downstream does.

#![allow(non_snake_case)]

use nalgebra::DMatrix;

use lrsng_core::evaluate::{self, PolicySequence};
use lrsng_core::linalg;
use lrsng_core::model;
use lrsng_core::riccati;

const TOL: f64 = 1e-9;

fn frozen(rows: usize, cols: usize, data: &[f64]) -> DMatrix<f64> {
    DMatrix::from_row_slice(rows, cols, data)
}

#[test]
fn stage_zero_gains_match_the_frozen_reference() {
    let s = model::sec5();
    let sol = riccati::solve(&s).unwrap();
    let KL0 = frozen(
        4,
        2,
        &[
            -0.4438815785771512, -0.8158617397408324,
            -1.151430545571146, 0.7921282115008434,
            -0.4590548873510668, 0.2138773732965946,
            -0.6847890038331211, 0.0633812816855351,
        ],
    );
    let KR0 = frozen(
        2,
        2,
        &[
            -0.6751129486395034, -0.7709454668120886,
            -1.4288126569912796, 0.865618300258088,
        ],
    );
    assert!(linalg::max_abs_diff(&sol.KL[0], &KL0) <= TOL);
    assert!(linalg::max_abs_diff(&sol.KR[0], &KR0) <= TOL);
}

#[test]
fn stage_zero_value_matrices_match_the_frozen_reference() {
    let s = model::sec5();
    let sol = riccati::solve(&s).unwrap();
    let PL0 = frozen(
        2,
        2,
        &[
            6.5086586482128, -2.5665284795591354,
            -2.5665284795591354, 5.008108113984195,
        ],
    );
    let PR0 = frozen(
        2,
        2,
        &[
            7.655454551272307, -2.8389106725346065,
            -2.8389106725346065, 5.102239966313194,
        ],
    );
    assert!(linalg::max_abs_diff(&sol.PL[0], &PL0) <= TOL);
    assert!(linalg::max_abs_diff(&sol.PR[0], &PR0) <= TOL);
}

// The benchmark gives both players identical weights and terminal penalties.
// Under that symmetry the recursion pairs up: OmegaR equals PL (both satisfy
// X_k = Q + KL' Lambda KL + FL' X_{k+1} FL), and PR equals OmegaL (both
// satisfy X_k = Q + KR' S KR + FR' (p PL_{k+1} + (1-p) X_{k+1}) FR, using the
// completed-square form of the PR update). A cheap end-to-end consistency
// check of all four value recursions at once.
#[test]
fn symmetric_weights_pair_up_the_value_matrices() {
    let s = model::sec5();
    let sol = riccati::solve(&s).unwrap();
    for k in 0..=s.N + 1 {
        assert!(linalg::max_abs_diff(&sol.OmegaR[k], &sol.PL[k]) <= TOL, "stage {k}");
        assert!(linalg::max_abs_diff(&sol.PR[k], &sol.OmegaL[k]) <= TOL, "stage {k}");
    }
}

#[test]
fn equilibrium_costs_match_the_frozen_reference() {
    let s = model::sec5();
    let sol = riccati::solve(&s).unwrap();
    let (jl, jr) = riccati::analytic_costs(&s, &sol);
    let frozen_cost = 596.4715610792931;
    assert!((jl - frozen_cost).abs() <= 1e-10 * frozen_cost, "JL {jl:.13}");
    assert!((jr - frozen_cost).abs() <= 1e-10 * frozen_cost, "JR {jr:.13}");

    let (jl_m, jr_m, _) =
        evaluate::propagate_moments(&s, &PolicySequence::equilibrium(&sol)).unwrap();
    assert!((jl_m - frozen_cost).abs() <= 1e-10 * frozen_cost);
    assert!((jr_m - frozen_cost).abs() <= 1e-10 * frozen_cost);
}

#[test]
fn gain_settling_indices_match_the_frozen_reference() {
    let s = model::sec5();
    let sol = riccati::solve(&s).unwrap();
    for (tol, expected) in [(1e-4, 31), (1e-5, 27), (1e-6, 22), (1e-7, 18), (1e-8, 14)] {
        assert_eq!(riccati::gain_convergence(&sol, tol), Some(expected), "tol {tol:e}");
    }
}

#[test]
fn monte_carlo_brackets_the_frozen_cost() {
    let s = model::sec5();
    let sol = riccati::solve(&s).unwrap();
    let policy = PolicySequence::equilibrium(&sol);
    let rep = evaluate::monte_carlo(&s, &policy, 20_000, 0).unwrap();
    let frozen_cost = 596.4715610792931;
    assert!((rep.jl - frozen_cost).abs() <= 3.0 * rep.jl_se, "JL {} +- {}", rep.jl, rep.jl_se);
    assert!((rep.jr - frozen_cost).abs() <= 3.0 * rep.jr_se, "JR {} +- {}", rep.jr, rep.jr_se);
}
