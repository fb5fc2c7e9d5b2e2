//! Central finite-difference gradient verification.

use crate::error::Result;

use super::{Graph, NodeId, ParamSet};

/// Per-entry comparison of an analytic gradient against central
/// differences.
#[derive(Debug, Clone)]
pub struct GradCheckEntry {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
    pub flagged: bool,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
    pub max_rel_err: f64,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.entries.iter().all(|e| !e.flagged)
    }

    pub fn flagged(&self) -> impl Iterator<Item = &GradCheckEntry> {
        self.entries.iter().filter(|e| e.flagged)
    }
}

/// Compare the reverse-mode gradient of a scalar-valued tensor function
/// against central differences at the given perturbation.
///
/// `build` receives a fresh graph and one differentiable leaf per parameter
/// (in `params` order) and must return the scalar loss node. The relative
/// error denominator is floored at a small fraction of the largest analytic
/// gradient so entries that are exactly zero do not amplify
/// finite-difference noise.
pub fn grad_check<F>(
    params: &ParamSet,
    build: F,
    perturbation: f64,
    tolerance: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    // Analytic gradients in one reverse pass.
    let mut graph = Graph::new();
    let leaves = params.leaves(&mut graph);
    let loss = build(&mut graph, &leaves)?;
    let grads = graph.backward(loss)?;
    let analytic: Vec<Vec<f64>> = params
        .entries()
        .iter()
        .zip(&leaves)
        .map(|(p, &leaf)| {
            grads
                .wrt(leaf)
                .map(|g| g.to_vec())
                .unwrap_or_else(|| vec![0.0; p.data.len()])
        })
        .collect();

    let eval = |p: &ParamSet| -> Result<f64> {
        let mut g = Graph::new();
        let leaves = p.leaves(&mut g);
        let loss = build(&mut g, &leaves)?;
        Ok(g.value(loss).item())
    };

    let max_analytic = analytic
        .iter()
        .flatten()
        .fold(0.0_f64, |m, v| m.max(v.abs()));
    let floor = (1e-2 * max_analytic).max(1e-6);

    let mut entries = Vec::new();
    let mut max_rel_err = 0.0_f64;
    let mut work = params.clone();
    for (pi, p) in params.entries().iter().enumerate() {
        for i in 0..p.data.len() {
            let orig = p.data[i];
            work.get_mut(&p.name).unwrap().data[i] = orig + perturbation;
            let plus = eval(&work)?;
            work.get_mut(&p.name).unwrap().data[i] = orig - perturbation;
            let minus = eval(&work)?;
            work.get_mut(&p.name).unwrap().data[i] = orig;
            let numeric = (plus - minus) / (2.0 * perturbation);
            let a = analytic[pi][i];
            let rel_err = (a - numeric).abs() / (a.abs() + numeric.abs()).max(floor);
            max_rel_err = max_rel_err.max(rel_err);
            entries.push(GradCheckEntry {
                name: p.name.clone(),
                index: i,
                analytic: a,
                numeric,
                rel_err,
                flagged: rel_err > tolerance,
            });
        }
    }
    Ok(GradCheckReport {
        entries,
        max_rel_err,
        tolerance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;
    use std::cell::Cell;

    #[test]
    fn square_at_three() {
        let mut params = ParamSet::new();
        params.push("x", vec![1], vec![3.0]).unwrap();
        let report = grad_check(
            &params,
            |g, leaves| {
                let y = g.mul(leaves[0], leaves[0])?;
                Ok(g.sum(y))
            },
            1e-5,
            1e-6,
        )
        .unwrap();
        assert!(report.passed(), "max rel err {}", report.max_rel_err);
        assert!((report.entries[0].analytic - 6.0).abs() < 1e-12);
        assert!((report.entries[0].numeric - 6.0).abs() < 1e-6);
    }

    #[test]
    fn softmax_cross_term() {
        let mut params = ParamSet::new();
        params
            .push("logits", vec![4], vec![0.3, -1.2, 0.7, 2.0])
            .unwrap();
        let weights = Tensor::vector(vec![1.0, -2.0, 0.5, 3.0]);
        let report = grad_check(
            &params,
            move |g, leaves| {
                let p = g.softmax(leaves[0], 0)?;
                let w = g.constant(weights.clone());
                let wp = g.mul(p, w)?;
                Ok(g.sum(wp))
            },
            1e-4,
            1e-4,
        )
        .unwrap();
        assert!(report.passed(), "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn wrong_gradient_is_flagged() {
        // Negative control: the closure answers differently on the analytic
        // pass than on the numeric evaluations, emulating a broken rule.
        let calls = Cell::new(0usize);
        let mut params = ParamSet::new();
        params.push("x", vec![2], vec![1.0, 2.0]).unwrap();
        let report = grad_check(
            &params,
            |g, leaves| {
                let n = calls.get();
                calls.set(n + 1);
                let scaled = if n == 0 {
                    g.scale(leaves[0], 1.0)
                } else {
                    g.scale(leaves[0], 1.5)
                };
                Ok(g.sum(scaled))
            },
            1e-4,
            1e-4,
        )
        .unwrap();
        assert!(!report.passed());
        assert!(report.flagged().count() > 0);
    }
}
