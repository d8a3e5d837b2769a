#![allow(dead_code)]

use altq_core::neuro::{Graph, ParamId, ParamStore, Var};

/// Central finite-difference oracle. `loss` rebuilds the graph from scratch on
/// every call so it only ever sees the perturbed parameter values.
pub fn numeric_grad(
    store: &mut ParamStore,
    id: ParamId,
    eps: f64,
    loss: &dyn Fn(&ParamStore) -> f64,
) -> Vec<f64> {
    let n = store.value(id).len();
    let mut out = vec![0.0; n];
    for i in 0..n {
        let orig = store.value(id).data()[i];
        store.value_mut(id).data_mut()[i] = orig + eps;
        let up = loss(store);
        store.value_mut(id).data_mut()[i] = orig - eps;
        let down = loss(store);
        store.value_mut(id).data_mut()[i] = orig;
        out[i] = (up - down) / (2.0 * eps);
    }
    out
}

/// Relative error with a floor on the denominator so near-zero gradients
/// are compared on an absolute scale.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-3)
}

/// Largest relative error between analytic and numeric gradients over all
/// listed parameters.
pub fn max_grad_error(
    store: &mut ParamStore,
    ids: &[ParamId],
    eps: f64,
    build: &dyn Fn(&mut Graph) -> Var,
) -> f64 {
    let analytic = {
        let mut g = Graph::new(store);
        let loss = build(&mut g);
        g.backward(loss).unwrap()
    };
    let loss_fn = |s: &ParamStore| {
        let mut g = Graph::new(s);
        let l = build(&mut g);
        g.scalar(l)
    };
    let mut worst: f64 = 0.0;
    for &id in ids {
        let num = numeric_grad(store, id, eps, &loss_fn);
        let n = num.len();
        let zeros = vec![0.0; n];
        let ana = analytic.get(id).unwrap_or(&zeros);
        for (a, b) in ana.iter().zip(&num) {
            worst = worst.max(rel_err(*a, *b));
        }
    }
    worst
}
