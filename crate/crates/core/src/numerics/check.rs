use super::graph::{Graph, NodeId};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Worst-case agreement between analytic and central-difference gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct FdReport {
    pub max_rel_err: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub checked: usize,
}

/// Relative error `|a − n| / max(|a|, |n|, 1e-8)`.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares `backward` against central differences over every parameter element.
pub fn finite_difference_check(graph: &mut Graph, loss: NodeId, h: f64) -> Result<FdReport> {
    finite_difference_check_sampled(graph, loss, h, None)
}

/// Like [`finite_difference_check`], visiting at most `max_per_param`
/// evenly strided elements of each parameter.
pub fn finite_difference_check_sampled(
    graph: &mut Graph,
    loss: NodeId,
    h: f64,
    max_per_param: Option<usize>,
) -> Result<FdReport> {
    if h.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater) {
        return Err(Error::invalid(format!("finite-difference step must be > 0, got {h}")));
    }
    let grads = graph.backward(loss)?;
    let mut report = FdReport {
        max_rel_err: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        checked: 0,
    };
    for name in graph.param_names() {
        let id = graph.leaf_id(&name).expect("param leaf");
        let original: Tensor = graph.value(id).clone();
        let analytic = grads.get(&name).expect("gradient for every param");
        let n = original.numel();
        let stride = match max_per_param {
            Some(k) if k > 0 && n > k => n.div_ceil(k),
            _ => 1,
        };
        for idx in (0..n).step_by(stride) {
            let mut plus = original.clone();
            plus.data_mut()[idx] += h;
            graph.forward(&[(name.as_str(), plus)])?;
            let fp = graph.value(loss).item();
            let mut minus = original.clone();
            minus.data_mut()[idx] -= h;
            graph.forward(&[(name.as_str(), minus)])?;
            let fm = graph.value(loss).item();
            let numeric = (fp - fm) / (2.0 * h);
            let err = rel_err(analytic.data()[idx], numeric);
            report.checked += 1;
            if err > report.max_rel_err || report.worst_param.is_empty() {
                report.max_rel_err = report.max_rel_err.max(err);
                if err >= report.max_rel_err {
                    report.worst_param = name.clone();
                    report.worst_index = idx;
                }
            }
        }
        graph.forward(&[(name.as_str(), original)])?;
    }
    Ok(report)
}
