//! Central finite-difference gradient checking against the tape.

use std::rc::Rc;

use crate::error::{CvdError, Result};
use crate::tensor::{Graph, NodeId, Tensor};

/// Compare tape gradients of `f` against central finite differences over
/// the listed leaf parameters. Returns the max over coordinates of
/// `|analytic - numeric| / max(1, |analytic|)`.
///
/// Before every evaluation the graph is reset to its frozen watermark and
/// the rng reseeded, so stochastic ops replay identical draws.
pub fn grad_check<F>(graph: &Rc<Graph>, params: &[NodeId], f: F, h: f64) -> Result<f64>
where
    F: Fn(&Rc<Graph>) -> Result<Tensor>,
{
    assert!(h > 0.0, "step must be positive");
    let eval = |graph: &Rc<Graph>| -> Result<f64> {
        graph.reset();
        graph.reseed_rng();
        let loss = f(graph)?;
        let v = loss.item();
        if !v.is_finite() {
            return Err(CvdError::Domain("non-finite loss during grad check".into()));
        }
        Ok(v)
    };

    // Analytic pass.
    graph.zero_grads();
    graph.reset();
    graph.reseed_rng();
    let loss = f(graph)?;
    loss.backward()?;
    let analytic: Vec<Vec<f64>> = params
        .iter()
        .map(|&id| {
            graph
                .node_grad(id)
                .unwrap_or_else(|| vec![0.0; graph.node_data(id).len()])
        })
        .collect();

    let mut max_rel = 0.0f64;
    for (pi, &id) in params.iter().enumerate() {
        let n = graph.node_data(id).len();
        for i in 0..n {
            graph.update_node_data(id, |d| d[i] += h);
            let plus = eval(graph)?;
            graph.update_node_data(id, |d| d[i] -= 2.0 * h);
            let minus = eval(graph)?;
            graph.update_node_data(id, |d| d[i] += h);
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic[pi][i];
            let rel = (a - numeric).abs() / a.abs().max(1.0);
            if rel > max_rel {
                max_rel = rel;
            }
        }
    }
    graph.zero_grads();
    graph.reset();
    Ok(max_rel)
}
