//! Central finite-difference verification of analytic gradients.
//!
//! Each coordinate of each leaf is perturbed by `±eps` and the program is
//! re-evaluated on a fresh [`Graph`]. Coordinates whose perturbation moves
//! the input of a ReLU or abs across its kink (the two evaluations disagree
//! on some input sign) are skipped and counted: the function is not
//! differentiable there and the difference quotient is meaningless.
//!
//! The reported error per coordinate is `|a - n| / max(|a|, |n|, floor)`
//! with `floor` defaulting to `1e-6`, so gradients that are both smaller
//! than the floor are compared absolutely.

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_EPS: f64 = 1e-5;
pub const DEFAULT_TOL: f64 = 1e-4;
pub const DEFAULT_FLOOR: f64 = 1e-6;

/// A named input of a checked program.
#[derive(Clone, Debug)]
pub struct Leaf {
    pub name: String,
    pub value: Tensor,
}

impl Leaf {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        Self {
            name: name.into(),
            value,
        }
    }
}

#[derive(Clone, Debug)]
pub struct LeafReport {
    pub name: String,
    pub max_rel_err: f64,
    pub checked: usize,
    pub skipped: usize,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub leaves: Vec<LeafReport>,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.leaves.iter().map(|l| l.max_rel_err).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_rel_err() <= self.tol
    }

    pub fn worst_leaf(&self) -> Option<&LeafReport> {
        self.leaves
            .iter()
            .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
    }
}

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    pub eps: f64,
    pub tol: f64,
    pub floor: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            eps: DEFAULT_EPS,
            tol: DEFAULT_TOL,
            floor: DEFAULT_FLOOR,
        }
    }
}

/// Per-coordinate central differences; `None` marks a skipped coordinate.
pub struct NumericGradients {
    pub grads: Vec<Vec<Option<f64>>>,
}

fn evaluate<F>(leaves: &[Leaf], program: &F, override_leaf: Option<(usize, usize, f64)>) -> Result<(f64, Vec<i8>)>
where
    F: for<'g> Fn(&'g Graph, &[Var<'g>]) -> Result<Var<'g>>,
{
    let g = Graph::new();
    let vars: Vec<Var<'_>> = leaves
        .iter()
        .enumerate()
        .map(|(i, leaf)| match override_leaf {
            Some((li, ci, v)) if li == i => {
                let mut t = leaf.value.clone();
                t.data_mut()[ci] = v;
                g.constant(t)
            }
            _ => g.constant(leaf.value.clone()),
        })
        .collect();
    let out = program(&g, &vars)?;
    let value = out.value();
    if value.len() != 1 {
        return Err(Error::Harness(format!(
            "program must return a scalar, got shape {:?}",
            value.shape()
        )));
    }
    Ok((value.item(), g.kink_signature()))
}

/// Gradients of the program output with respect to every leaf.
pub fn analytic_gradients<F>(leaves: &[Leaf], program: &F) -> Result<Vec<Tensor>>
where
    F: for<'g> Fn(&'g Graph, &[Var<'g>]) -> Result<Var<'g>>,
{
    let g = Graph::new();
    let vars: Vec<Var<'_>> = leaves.iter().map(|l| g.param(l.value.clone())).collect();
    let out = program(&g, &vars)?;
    let grads = g.backward(out)?;
    Ok(vars
        .iter()
        .zip(leaves)
        .map(|(v, l)| {
            grads
                .get(*v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(l.value.shape().to_vec()))
        })
        .collect())
}

pub fn numeric_gradients<F>(leaves: &[Leaf], program: &F, eps: f64) -> Result<NumericGradients>
where
    F: for<'g> Fn(&'g Graph, &[Var<'g>]) -> Result<Var<'g>>,
{
    let (base_a, sig_a) = evaluate(leaves, program, None)?;
    let (base_b, sig_b) = evaluate(leaves, program, None)?;
    if base_a.to_bits() != base_b.to_bits() || sig_a != sig_b {
        return Err(Error::Harness(format!(
            "program is not deterministic: baseline evaluations gave {base_a:e} and {base_b:e}"
        )));
    }
    let mut grads = Vec::with_capacity(leaves.len());
    for (li, leaf) in leaves.iter().enumerate() {
        let mut per = Vec::with_capacity(leaf.value.len());
        for (ci, &x) in leaf.value.data().iter().enumerate() {
            let (fp, sp) = evaluate(leaves, program, Some((li, ci, x + eps)))?;
            let (fm, sm) = evaluate(leaves, program, Some((li, ci, x - eps)))?;
            if sp != sm || sp != sig_a {
                per.push(None);
            } else {
                per.push(Some((fp - fm) / (2.0 * eps)));
            }
        }
        grads.push(per);
    }
    Ok(NumericGradients { grads })
}

pub fn compare(
    leaves: &[Leaf],
    analytic: &[Tensor],
    numeric: &NumericGradients,
    opts: GradCheckOptions,
) -> GradCheckReport {
    let reports = leaves
        .iter()
        .zip(analytic)
        .zip(&numeric.grads)
        .map(|((leaf, a), n)| {
            let mut max_rel_err = 0.0f64;
            let (mut checked, mut skipped) = (0, 0);
            for (&av, nv) in a.data().iter().zip(n) {
                match nv {
                    Some(nv) => {
                        let denom = av.abs().max(nv.abs()).max(opts.floor);
                        let err = (av - nv).abs() / denom;
                        max_rel_err = if err.is_nan() { f64::INFINITY } else { max_rel_err.max(err) };
                        checked += 1;
                    }
                    None => skipped += 1,
                }
            }
            LeafReport {
                name: leaf.name.clone(),
                max_rel_err,
                checked,
                skipped,
            }
        })
        .collect();
    GradCheckReport {
        leaves: reports,
        tol: opts.tol,
    }
}

/// Runs the full check: analytic gradients from one backward pass against
/// central differences for every leaf coordinate.
pub fn grad_check<F>(leaves: &[Leaf], opts: GradCheckOptions, program: F) -> Result<GradCheckReport>
where
    F: for<'g> Fn(&'g Graph, &[Var<'g>]) -> Result<Var<'g>>,
{
    let analytic = analytic_gradients(leaves, &program)?;
    let numeric = numeric_gradients(leaves, &program, opts.eps)?;
    Ok(compare(leaves, &analytic, &numeric, opts))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    #[test]
    fn linear_program_is_exact() {
        let leaves = [Leaf::new("x", Tensor::vector(&[1.0, -2.0, 0.5]))];
        let opts = GradCheckOptions {
            tol: 1e-9,
            ..Default::default()
        };
        let report = grad_check(&leaves, opts, |g, v| {
            let w = g.constant(Tensor::vector(&[3.0, 4.0, 5.0]));
            Ok(v[0].mul(&w)?.sum_all())
        })
        .unwrap();
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn relu_kink_coordinate_is_skipped() {
        let leaves = [Leaf::new("x", Tensor::vector(&[1e-7, 2.0, -1.0]))];
        let report = grad_check(&leaves, GradCheckOptions::default(), |_, v| Ok(v[0].relu().sum_all())).unwrap();
        assert_eq!(report.leaves[0].skipped, 1);
        assert_eq!(report.leaves[0].checked, 2);
        assert!(report.passed());
    }

    #[test]
    fn nondeterminism_is_reported() {
        use std::cell::Cell;
        let counter = Cell::new(0.0);
        let leaves = [Leaf::new("x", Tensor::vector(&[1.0]))];
        let res = grad_check(&leaves, GradCheckOptions::default(), |g, v| {
            counter.set(counter.get() + 1.0);
            let c = g.constant(Tensor::scalar(counter.get()));
            Ok(v[0].sum_all().add(&c)?)
        });
        assert!(matches!(res, Err(Error::Harness(_))));
    }

    #[test]
    fn injected_wrong_gradient_is_detected() {
        let leaves = [Leaf::new("x", Tensor::vector(&[0.3, 0.7]))];
        fn program<'g>(_: &'g Graph, v: &[Var<'g>]) -> Result<Var<'g>> {
            Ok(v[0].mul(&v[0])?.sum_all())
        }
        let mut analytic = analytic_gradients(&leaves, &program).unwrap();
        analytic[0].data_mut()[1] *= 1.01;
        let numeric = numeric_gradients(&leaves, &program, DEFAULT_EPS).unwrap();
        let report = compare(&leaves, &analytic, &numeric, GradCheckOptions::default());
        assert!(!report.passed());
    }

    #[test]
    fn relu_matmul_chain_matches_differences() {
        let mut rng = seeded(3);
        let leaves = [
            Leaf::new("x", Tensor::uniform(vec![3, 4], 1.0, &mut rng)),
            Leaf::new("w", Tensor::uniform(vec![4, 5], 1.0, &mut rng)),
        ];
        let report = grad_check(&leaves, GradCheckOptions::default(), |_, v| {
            Ok(v[0].matmul(&v[1])?.relu().sum_all())
        })
        .unwrap();
        assert!(report.max_rel_err() < 1e-5, "{report:?}");
    }
}
