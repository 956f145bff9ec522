//! Finite-difference verification of reverse-mode gradients.

use std::fmt;

use super::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::model::ParamStore;

pub const DEFAULT_EPS: f64 = 1e-5;
pub const DEFAULT_TOL: f64 = 1e-4;

/// Denominator floor for the relative error, so entries whose true gradient
/// is ~0 are compared in absolute terms.
const REL_FLOOR: f64 = 1e-4;

/// A central difference is discarded when the one-sided slopes on either side
/// of the point differ by more than this: the loss has a kink within `eps`
/// (relu at 0, hinge at its margin, max-pool ties).
const KINK_SLOPE_GAP: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Where the worst error occurred, e.g. `W1[3]` or `words[7,1]`.
    pub worst: Option<String>,
    pub checked: usize,
    /// Entries skipped because the loss is not differentiable there.
    pub excluded: usize,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= self.tol && self.checked > 0
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "max rel err {:.3e} over {} entries ({} excluded){}",
            self.max_rel_error,
            self.checked,
            self.excluded,
            self.worst.as_ref().map(|w| format!(", worst at {w}")).unwrap_or_default()
        )
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

fn eval<F, G>(builder: &F, fresh: &G, store: &ParamStore) -> Result<f64>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<NodeId>,
    G: Fn() -> Graph,
{
    let mut g = fresh();
    let loss = builder(&mut g, store)?;
    g.forward()?;
    g.scalar(loss)
}

/// Compares backward gradients against central differences for every entry
/// of every parameter and lookup table in `store`.
///
/// The builder must be deterministic for fixed parameters; graphs are built
/// in evaluation mode so dropout is inert.
pub fn grad_check<F>(store: &ParamStore, builder: F, eps: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<NodeId>,
{
    grad_check_with(store, builder, Graph::new, eps, tol)
}

/// As [`grad_check`], with every graph produced by `fresh`. A training graph
/// with a fixed seed draws the same dropout masks on every evaluation.
pub fn grad_check_with<F, G>(store: &ParamStore, builder: F, fresh: G, eps: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<NodeId>,
    G: Fn() -> Graph,
{
    let mut g = fresh();
    let loss = builder(&mut g, store)?;
    g.forward()?;
    let base = g.scalar(loss)?;
    let again = eval(&builder, &fresh, store)?;
    if base.to_bits() != again.to_bits() {
        return Err(Error::NonDeterministic {
            first: base,
            second: again,
        });
    }
    g.backward(loss)?;
    let grads = g.gradients();

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
        excluded: 0,
        tol,
    };
    let mut probe = store.clone();

    let mut compare = |probe: &mut ParamStore, label: String, analytic: f64, slot: Slot| -> Result<()> {
        let orig = slot.get(probe);
        slot.set(probe, orig + eps);
        let up = eval(&builder, &fresh, probe)?;
        slot.set(probe, orig - eps);
        let down = eval(&builder, &fresh, probe)?;
        slot.set(probe, orig);
        let slope_gap = ((up - base) - (base - down)).abs() / eps;
        if slope_gap > KINK_SLOPE_GAP {
            report.excluded += 1;
            return Ok(());
        }
        let numeric = (up - down) / (2.0 * eps);
        let err = relative_error(analytic, numeric);
        report.checked += 1;
        if report.worst.is_none() || err > report.max_rel_error {
            report.max_rel_error = err;
            report.worst = Some(label);
        }
        Ok(())
    };

    let names: Vec<String> = store.param_names().map(str::to_string).collect();
    for name in names {
        let n = store.param(&name)?.len();
        for k in 0..n {
            let analytic = grads.param(&name).map_or(0.0, |t| t.data()[k]);
            compare(&mut probe, format!("{name}[{k}]"), analytic, Slot::Param(name.clone(), k))?;
        }
    }
    let tables: Vec<String> = store.lookup_names().map(str::to_string).collect();
    for table in tables {
        let (rows, cols) = store.lookup(&table)?.matrix().shape();
        for r in 0..rows {
            for c in 0..cols {
                let analytic = grads.lookup_row(&table, r).map_or(0.0, |g| g[c]);
                compare(
                    &mut probe,
                    format!("{table}[{r},{c}]"),
                    analytic,
                    Slot::Lookup(table.clone(), r * cols + c),
                )?;
            }
        }
    }
    Ok(report)
}

enum Slot {
    Param(String, usize),
    Lookup(String, usize),
}

impl Slot {
    fn get(&self, store: &ParamStore) -> f64 {
        match self {
            Slot::Param(n, k) => store.param(n).expect("known").data()[*k],
            Slot::Lookup(n, k) => store.lookup(n).expect("known").matrix().data()[*k],
        }
    }

    fn set(&self, store: &mut ParamStore, v: f64) {
        match self {
            Slot::Param(n, k) => store.param_mut(n).expect("known").data_mut()[*k] = v,
            Slot::Lookup(n, k) => store.lookup_mut(n).expect("known").matrix_mut().data_mut()[*k] = v,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::InitSpec;
    use crate::tensor::Tensor;

    #[test]
    fn linear_map_gradient_is_exact() {
        let mut store = ParamStore::new(11);
        store.add_param("W", 3, 2, InitSpec::Xavier).unwrap();
        let x = Tensor::row(vec![0.5, -1.25, 2.0]);
        let report = grad_check(
            &store,
            |g, s| {
                let xi = g.input(x.clone());
                let w = g.parameter(s, "W")?;
                let y = g.matmul(xi, w)?;
                g.sum_elems(y)
            },
            DEFAULT_EPS,
            DEFAULT_TOL,
        )
        .unwrap();
        assert!(report.passed(), "{report}");
        assert!(report.max_rel_error < 1e-9, "{report}");
        assert_eq!(report.checked, 6);
    }

    #[test]
    fn relu_at_zero_is_excluded() {
        let mut store = ParamStore::new(1);
        store.add_param("x", 1, 2, InitSpec::Constant(0.0)).unwrap();
        store.param_mut("x").unwrap().data_mut()[1] = 0.7;
        let report = grad_check(
            &store,
            |g, s| {
                let x = g.parameter(s, "x")?;
                let r = g.relu(x)?;
                g.sum_elems(r)
            },
            DEFAULT_EPS,
            DEFAULT_TOL,
        )
        .unwrap();
        assert_eq!(report.excluded, 1);
        assert_eq!(report.checked, 1);
        assert!(report.passed());
    }

    #[test]
    fn wrong_gradient_is_caught() {
        // The loss reads x through a constant too, which backward cannot see.
        let mut store = ParamStore::new(1);
        store.add_param("x", 1, 1, InitSpec::Constant(0.3)).unwrap();
        let report = grad_check(
            &store,
            |g, s| {
                let v = s.param("x")?.item();
                let x = g.parameter(s, "x")?;
                // value depends on x twice but only one path is differentiable
                let c = g.input(Tensor::scalar(v * v));
                let y = g.cmul(x, c)?;
                g.sum_elems(y)
            },
            DEFAULT_EPS,
            DEFAULT_TOL,
        )
        .unwrap();
        assert!(!report.passed());
    }

    #[test]
    fn nondeterministic_builder_is_rejected() {
        use std::cell::Cell;
        let mut store = ParamStore::new(1);
        store.add_param("x", 1, 1, InitSpec::Constant(0.3)).unwrap();
        let calls = Cell::new(0.0);
        let err = grad_check(
            &store,
            |g, s| {
                calls.set(calls.get() + 1.0);
                let x = g.parameter(s, "x")?;
                g.scalar_add(x, calls.get())
            },
            DEFAULT_EPS,
            DEFAULT_TOL,
        )
        .unwrap_err();
        assert!(matches!(err, Error::NonDeterministic { .. }));
    }
}
