//! Central finite-difference gradient checking.
//!
//! The checker evaluates the loss through the forward path only, so it stays
//! independent of the backward implementation it is used to validate.

use std::collections::BTreeMap;

use super::graph::{Graph, NodeId};
use super::{NumResult, Tensor};

/// Result of comparing analytic gradients against finite differences.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Worst per-parameter relative error, `||ga - gf|| / max(||ga||, ||gf||, 1e-8)`.
    pub max_rel_err: f32,
    pub per_param: BTreeMap<String, f32>,
}

/// Builds the loss graph from a parameter map. The closure must register
/// every entry of the map via [`Graph::param`] under the same name and
/// return the scalar loss node.
pub type BuildFn<'a> = dyn Fn(&mut Graph, &BTreeMap<String, Tensor>) -> NumResult<NodeId> + 'a;

fn eval_loss(build: &BuildFn, params: &BTreeMap<String, Tensor>) -> NumResult<f32> {
    let mut g = Graph::new();
    let loss = build(&mut g, params)?;
    g.value(loss).item()
}

/// Checks analytic gradients of `build` at `params` against central finite
/// differences with step `eps`, perturbing every coordinate of every
/// parameter.
pub fn check(
    params: &BTreeMap<String, Tensor>,
    build: &BuildFn,
    eps: f32,
) -> NumResult<GradCheckReport> {
    let mut g = Graph::new();
    let loss = build(&mut g, params)?;
    let analytic = g.backward(loss)?;

    let mut per_param = BTreeMap::new();
    let mut max_rel = 0.0f32;
    for (name, tensor) in params {
        let ga = analytic
            .get(name)
            .unwrap_or_else(|| panic!("build closure never registered parameter {name}"));
        let mut diff_sq = 0.0f64;
        let mut a_sq = 0.0f64;
        let mut f_sq = 0.0f64;
        for idx in 0..tensor.numel() {
            let fd = central_difference(params, build, name, idx, eps)?;
            let a = ga.data()[idx] as f64;
            diff_sq += (a - fd) * (a - fd);
            a_sq += a * a;
            f_sq += fd * fd;
        }
        let rel = (diff_sq.sqrt() / a_sq.sqrt().max(f_sq.sqrt()).max(1e-8)) as f32;
        per_param.insert(name.clone(), rel);
        max_rel = max_rel.max(rel);
    }
    Ok(GradCheckReport {
        max_rel_err: max_rel,
        per_param,
    })
}

fn central_difference(
    params: &BTreeMap<String, Tensor>,
    build: &BuildFn,
    name: &str,
    idx: usize,
    eps: f32,
) -> NumResult<f64> {
    let mut perturb = |delta: f32| -> NumResult<f32> {
        let mut p = params.clone();
        let t = p.get_mut(name).unwrap();
        let mut data = t.data().to_vec();
        data[idx] += delta;
        *t = Tensor::new(t.shape().to_vec(), data)?;
        eval_loss(build, &p)
    };
    let plus = perturb(eps)? as f64;
    let minus = perturb(-eps)? as f64;
    Ok((plus - minus) / (2.0 * eps as f64))
}
