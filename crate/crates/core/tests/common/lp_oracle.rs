//! Brute-force vertex enumeration for small bounded LPs.

use koopgas::lp::{LinearProgram, RowKind};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

/// One constraint `a·x (= or ≤) b` in a uniform representation.
struct Half {
    a: Vec<f64>,
    b: f64,
    eq: bool,
}

fn constraints(lp: &LinearProgram) -> Vec<Half> {
    let n = lp.num_vars();
    let mut out = Vec::new();
    for r in &lp.rows {
        let mut a = vec![0.0; n];
        for &(j, v) in &r.terms {
            a[j] += v;
        }
        out.push(Half { a, b: r.rhs, eq: r.kind == RowKind::Eq });
    }
    for j in 0..n {
        let mut a = vec![0.0; n];
        a[j] = 1.0;
        out.push(Half { a: a.clone(), b: lp.upper[j], eq: false });
        a[j] = -1.0;
        out.push(Half { a, b: -lp.lower[j], eq: false });
    }
    out
}

fn combinations(m: usize, k: usize) -> Vec<Vec<usize>> {
    if k == 0 {
        return vec![vec![]];
    }
    if m < k {
        return vec![];
    }
    let mut out = combinations(m - 1, k);
    for mut c in combinations(m - 1, k - 1) {
        c.push(m - 1);
        out.push(c);
    }
    out
}

/// Minimum over all vertices of the (bounded) feasible set, or None when
/// no vertex is feasible.
pub fn vertex_optimum(lp: &LinearProgram) -> Option<f64> {
    let n = lp.num_vars();
    let cons = constraints(lp);
    let mut best: Option<f64> = None;
    for set in combinations(cons.len(), n) {
        let a = DMatrix::from_fn(n, n, |i, j| cons[set[i]].a[j]);
        let b = DVector::from_fn(n, |i, _| cons[set[i]].b);
        let Some(x) = a.clone().lu().solve(&b) else { continue };
        if (&a * &x - &b).amax() > 1e-9 || x.iter().any(|v| !v.is_finite()) {
            continue;
        }
        let feasible = cons.iter().all(|c| {
            let ax: f64 = c.a.iter().zip(x.iter()).map(|(p, q)| p * q).sum();
            if c.eq { (ax - c.b).abs() <= 1e-9 * (1.0 + c.b.abs()) } else { ax <= c.b + 1e-9 * (1.0 + c.b.abs()) }
        });
        if feasible {
            let obj = lp.objective(x.as_slice());
            best = Some(best.map_or(obj, |o: f64| o.min(obj)));
        }
    }
    best
}

/// Random bounded LPs built around a point `x₀` inside the box, so every
/// instance is feasible; `≤` rows get a random slack at `x₀`.
pub fn random_lp() -> impl Strategy<Value = LinearProgram> {
    (2usize..=4, 1usize..=3, any::<bool>())
        .prop_flat_map(|(n, m, with_eq)| {
            let var = (-5.0f64..0.0, 0.5f64..6.0, -3.0f64..3.0, 0.0f64..1.0);
            let row = (prop::collection::vec(-3.0f64..3.0, n), 0.0f64..3.0);
            (prop::collection::vec(var, n), prop::collection::vec(row, m), Just(with_eq))
        })
        .prop_map(|(vars, rows, with_eq)| {
            let mut lp = LinearProgram::new();
            let mut x0 = Vec::new();
            for (j, &(lo, width, c, t)) in vars.iter().enumerate() {
                lp.add_var(format!("x{j}"), lo, lo + width, c);
                x0.push(lo + t * width);
            }
            for (i, (a, slack)) in rows.into_iter().enumerate() {
                let at_x0: f64 = a.iter().zip(&x0).map(|(p, q)| p * q).sum();
                let eq = with_eq && i == 0;
                let terms = a.into_iter().enumerate().collect();
                if eq {
                    lp.add_row(format!("r{i}"), terms, RowKind::Eq, at_x0);
                } else {
                    lp.add_row(format!("r{i}"), terms, RowKind::Le, at_x0 + slack);
                }
            }
            lp
        })
}
