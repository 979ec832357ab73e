//! Central finite-difference gradient checking.
//!
//! The checker is an independent oracle: it only ever runs forward passes
//! (through the same float32 ops) and never touches the tape machinery it
//! verifies. Loss closures must be deterministic — anything stochastic
//! (dropout) has to reseed its own RNG on every invocation.

use crate::error::Result;

use super::{Graph, Tensor};

/// Worst observed deviation between tape gradients and central finite
/// differences.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f32,
    /// (parameter index, flat element index) of the worst element.
    pub worst: (usize, usize),
    pub analytic: f32,
    pub numeric: f32,
}

/// Compare tape gradients of `loss_fn` against central finite differences
/// for every element of every tensor in `params`.
///
/// Relative error uses `|fd - ad| / max(|fd|, |ad|, 1)` so tiny gradients
/// are compared absolutely.
pub fn check_gradients(
    params: &[Tensor],
    step: f32,
    mut loss_fn: impl FnMut(&mut Graph) -> Result<Tensor>,
) -> Result<GradCheckReport> {
    for p in params {
        p.zero_grad();
    }
    let mut graph = Graph::recording();
    let loss = loss_fn(&mut graph)?;
    graph.backward(&loss)?;
    let analytic: Vec<Vec<f32>> = params
        .iter()
        .map(|p| p.grad().unwrap_or_else(|| vec![0.0; p.numel()]))
        .collect();
    for p in params {
        p.zero_grad();
    }

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
    };
    for (pi, p) in params.iter().enumerate() {
        for ei in 0..p.numel() {
            let orig = p.data()[ei];
            p.data_mut()[ei] = orig + step;
            let up = eval(&mut loss_fn)?;
            p.data_mut()[ei] = orig - step;
            let down = eval(&mut loss_fn)?;
            p.data_mut()[ei] = orig;
            let fd = (up - down) / (2.0 * step);
            let ad = analytic[pi][ei];
            let rel = (fd - ad).abs() / fd.abs().max(ad.abs()).max(1.0);
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = (pi, ei);
                report.analytic = ad;
                report.numeric = fd;
            }
        }
    }
    Ok(report)
}

fn eval(loss_fn: &mut impl FnMut(&mut Graph) -> Result<Tensor>) -> Result<f32> {
    let mut graph = Graph::inference();
    let loss = loss_fn(&mut graph)?;
    Ok(loss.item())
}
