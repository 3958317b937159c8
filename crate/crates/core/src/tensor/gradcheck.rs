use super::{Bound, Graph, NodeId, ParamStore, Tensor};
use crate::error::{Error, Result};

/// Outcome of a finite-difference comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// Max over checked coordinates of `|a - n| / max(1, |a|, |n|)`.
    pub max_rel_error: f64,
    /// `(input, flat index)` of the worst coordinate.
    pub worst: (usize, usize),
    pub coordinates: usize,
    /// Coordinates skipped because the perturbation moved some relu input
    /// across zero, where central differences are meaningless.
    pub skipped_kinks: usize,
}

impl GradCheckReport {
    pub fn passes(&self, threshold: f64) -> bool {
        self.max_rel_error < threshold
    }
}

fn eval<F>(inputs: &[Tensor], f: &F) -> Result<(f64, u64)>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    let mut g = Graph::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &ids)?;
    Ok((g.scalar(out), g.kink_signature()))
}

/// Compares reverse-mode gradients of the scalar `f(inputs)` against central
/// differences with step `h`. At most `max_coords` coordinates per input are
/// checked, evenly spaced; `None` checks all. Coordinates whose perturbation
/// changes any relu's on/off pattern are skipped and counted.
pub fn grad_check<F>(inputs: &[Tensor], h: f32, max_coords: Option<usize>, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    let mut g = Graph::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &ids)?;
    if g.value(out).len() != 1 {
        return Err(Error::shape(format!(
            "grad_check needs a scalar, got {:?}",
            g.shape(out)
        )));
    }
    let grads = g.backward(out);

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        coordinates: 0,
        skipped_kinks: 0,
    };
    let base = g.kink_signature();
    let mut work = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        let analytic = grads
            .get(ids[i])
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(input.shape()));
        let n = input.len();
        let stride = match max_coords {
            Some(m) if m > 0 && n > m => n.div_ceil(m),
            _ => 1,
        };
        for j in (0..n).step_by(stride) {
            let x = input.data()[j];
            let (xp, xm) = (x + h, x - h);
            work[i].data_mut()[j] = xp;
            let (fp, sp) = eval(&work, &f)?;
            work[i].data_mut()[j] = xm;
            let (fm, sm) = eval(&work, &f)?;
            work[i].data_mut()[j] = x;
            if sp != base || sm != base {
                report.skipped_kinks += 1;
                continue;
            }
            let numeric = (fp - fm) / (xp as f64 - xm as f64);
            let a = analytic.data()[j] as f64;
            let err = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
            if !(err <= report.max_rel_error) {
                report.max_rel_error = err;
                report.worst = (i, j);
            }
            report.coordinates += 1;
        }
    }
    Ok(report)
}

/// [`grad_check`] over every tensor of a parameter store.
pub fn grad_check_params<F>(params: &ParamStore, h: f32, max_coords: Option<usize>, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &Bound<'_>) -> Result<NodeId>,
{
    grad_check(params.tensors(), h, max_coords, |g, ids| {
        f(g, &params.bound_with(ids.to_vec()))
    })
}
