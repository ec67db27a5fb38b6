//! Central finite-difference verification of reverse-mode gradients.
//!
//! Used by unit tests for individual ops and by the acceptance suite for the
//! full conditioned denoiser.

use crate::graph::{Graph, NodeId, ParamStore};
use crate::num::Scalar;

/// Result of comparing one parameter's analytic and numeric gradients.
#[derive(Debug)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_err: f64,
}

/// Compare backprop gradients against central finite differences for every
/// parameter in `store`. `build` must construct the same scalar loss from any
/// store handed to it. Relative error uses a floor of `eps` per entry:
/// |a - n| / max(|a|, |n|, floor).
pub fn gradient_report<F, B>(store: &ParamStore<F>, build: B, step: f64, floor: f64) -> Vec<ParamCheck>
where
    F: Scalar,
    B: Fn(&mut Graph<F>, &ParamStore<F>) -> NodeId,
{
    let mut g = Graph::new();
    let loss = build(&mut g, store);
    let grads = g.backward(loss);
    let analytic = g.param_grads(&grads);

    let mut report = Vec::new();
    for (name, value) in store.iter() {
        let agrad = analytic
            .get(name.as_str())
            .cloned()
            .unwrap_or_else(|| ndarray::Array2::zeros(value.dim()));
        let mut max_rel = 0.0f64;
        let mut probe = store.clone();
        for i in 0..value.nrows() {
            for j in 0..value.ncols() {
                let orig = value[(i, j)];
                probe.get_mut(name)[(i, j)] = orig + F::from_f64(step);
                let mut gp = Graph::new();
                let lp = build(&mut gp, &probe);
                let plus = gp.scalar_value(lp).to_f64();
                probe.get_mut(name)[(i, j)] = orig - F::from_f64(step);
                let mut gm = Graph::new();
                let lm = build(&mut gm, &probe);
                let minus = gm.scalar_value(lm).to_f64();
                probe.get_mut(name)[(i, j)] = orig;
                let numeric = (plus - minus) / (2.0 * step);
                let a = agrad[(i, j)].to_f64();
                let denom = a.abs().max(numeric.abs()).max(floor);
                let rel = (a - numeric).abs() / denom;
                max_rel = max_rel.max(rel);
            }
        }
        report.push(ParamCheck {
            name: name.clone(),
            max_rel_err: max_rel,
        });
    }
    report
}

/// Assert every parameter's max relative error stays below `tol`.
pub fn check_gradients<F, B>(store: &ParamStore<F>, build: B, step: f64, tol: f64)
where
    F: Scalar,
    B: Fn(&mut Graph<F>, &ParamStore<F>) -> NodeId,
{
    let report = gradient_report(store, build, step, tol);
    for check in &report {
        assert!(
            check.max_rel_err < tol,
            "gradient mismatch for {}: max rel err {}",
            check.name,
            check.max_rel_err
        );
    }
}
