//! Finite-difference verification oracle for the autodiff engine.

use super::{Graph, Tensor, Var};
use crate::{Error, Result};

/// Compares the reverse-mode gradient of a scalar function against central
/// finite differences and returns the max relative error
/// `|autodiff - numeric| / max(1, |numeric|)` over all coordinates.
///
/// `f` must be deterministic; it is re-evaluated `2 * len(x) + 1` times.
pub fn grad_check<F>(f: F, x: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    assert!(step > 0.0, "step must be positive");
    let mut graph = Graph::new();
    let xv = graph.leaf(x, true)?;
    let y = f(&mut graph, xv)?;
    if graph.value(y).len() != 1 {
        return Err(Error::Dimension {
            op: "grad_check",
            msg: format!("f must be scalar-valued, got shape {:?}", graph.shape_of(y)),
        });
    }
    if !graph.value(y)[0].is_finite() {
        return Err(Error::numeric("grad_check"));
    }
    graph.backward(y)?;
    let auto = graph
        .grad(xv)
        .map(<[f64]>::to_vec)
        .unwrap_or_else(|| vec![0.0; x.len()]);

    let eval = |t: &Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let v = g.leaf(t, false)?;
        let y = f(&mut g, v)?;
        Ok(g.value(y)[0])
    };

    let mut max_rel = 0.0f64;
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let plus = eval(&probe)?;
        probe.data_mut()[i] = orig - step;
        let minus = eval(&probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (plus - minus) / (2.0 * step);
        let rel = (auto[i] - numeric).abs() / numeric.abs().max(1.0);
        max_rel = max_rel.max(rel);
    }
    Ok(max_rel)
}
