//! Finite-difference gradient checking.
//!
//! The oracle is central differences `(f(x+h) - f(x-h)) / 2h` computed in
//! `f64`; the check compares it elementwise against the reverse-mode
//! gradient of the same function.

use crate::error::Result;

use super::{Graph, Tensor, Var};

/// Outcome of a finite-difference comparison.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Largest relative error over all checked elements.
    pub max_rel_err: f64,
    /// `(input index, element index)` where the maximum occurred.
    pub worst: Option<(usize, usize)>,
    /// Number of scalar elements compared.
    pub checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}

/// Compares the reverse-mode gradient of `f` w.r.t. every input against
/// central differences with step `h`.
///
/// `f` must return a scalar. Inputs are re-marked `requires_grad`
/// internally, so plain tensors may be passed.
pub fn grad_check<F>(f: F, inputs: &[Tensor<f64>], h: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let inputs: Vec<Tensor<f64>> = inputs
        .iter()
        .map(|t| t.clone().with_requires_grad())
        .collect();

    // Reverse-mode gradients in one pass.
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t)).collect();
    let loss = f(&mut g, &vars)?;
    g.backward(loss)?;
    let grads: Vec<Vec<f64>> = vars
        .iter()
        .zip(&inputs)
        .map(|(&v, t)| g.grad(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.numel()]))
        .collect();

    let eval = |perturbed: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| g.leaf(t)).collect();
        let loss = f(&mut g, &vars)?;
        Ok(g.value(loss)[0])
    };

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: None,
        checked: 0,
    };
    let mut work = inputs.clone();
    for (ti, t) in inputs.iter().enumerate() {
        for ei in 0..t.numel() {
            let orig = t.data()[ei];
            work[ti].data_mut()[ei] = orig + h;
            let up = eval(&work)?;
            work[ti].data_mut()[ei] = orig - h;
            let down = eval(&work)?;
            work[ti].data_mut()[ei] = orig;
            let fd = (up - down) / (2.0 * h);
            let err = rel_err(grads[ti][ei], fd);
            report.checked += 1;
            if err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst = Some((ti, ei));
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::SluRng;

    #[test]
    fn sum_is_exact() {
        let x = Tensor::from_vec(vec![0.3, -1.5, 2.0]);
        let report = grad_check(|g, vs| g.sum_all(vs[0]), &[x], 1e-3).unwrap();
        assert!(report.max_rel_err < 1e-9, "{}", report.max_rel_err);
    }

    #[test]
    fn softmax_pick_on_random_logits() {
        let mut rng = SluRng::seed_from(11);
        let x = Tensor::new(vec![1, 6], (0..6).map(|_| rng.normal()).collect()).unwrap();
        let report = grad_check(
            |g, vs| {
                let sm = g.softmax(vs[0])?;
                let picked = g.slice(sm, 1, 2, 3)?;
                g.sum_all(picked)
            },
            &[x],
            1e-4,
        )
        .unwrap();
        assert!(report.passes(1e-4), "{}", report.max_rel_err);
    }

    #[test]
    fn corrupted_adjoint_is_detected() {
        // detach() hides a linear term from reverse mode but not from the
        // finite-difference oracle, so the reported error must be large.
        let x = Tensor::from_vec(vec![0.7, -0.2]);
        let report = grad_check(
            |g, vs| {
                let sq = g.mul(vs[0], vs[0])?;
                let hidden = g.detach(vs[0]);
                let bent = g.scale(hidden, 0.5);
                let y = g.add(sq, bent)?;
                g.sum_all(y)
            },
            &[x],
            1e-3,
        )
        .unwrap();
        assert!(report.max_rel_err > 1e-2, "{}", report.max_rel_err);
    }

    #[test]
    fn matmul_sum_grad_is_column_sums() {
        // d sum(A.B) / dA[i,p] = sum_j B[p,j]: rows broadcast the column sums.
        let mut rng = SluRng::seed_from(5);
        let a = Tensor::new(vec![2, 3], (0..6).map(|_| rng.normal()).collect()).unwrap();
        let b = Tensor::new(vec![3, 2], (0..6).map(|_| rng.normal()).collect()).unwrap();
        let report = grad_check(
            |g, vs| {
                let c = g.matmul(vs[0], vs[1])?;
                g.sum_all(c)
            },
            &[a.clone(), b.clone()],
            1e-3,
        )
        .unwrap();
        assert!(report.passes(1e-6), "{}", report.max_rel_err);

        // Also check the closed form directly.
        let mut g = Graph::new();
        let av = g.leaf(&a.with_requires_grad());
        let bv = g.constant(&b);
        let c = g.matmul(av, bv).unwrap();
        let loss = g.sum_all(c).unwrap();
        g.backward(loss).unwrap();
        let grad = g.grad(av).unwrap();
        for i in 0..2 {
            for p in 0..3 {
                let colsum: f64 = (0..2).map(|j| b.data()[p * 2 + j]).sum();
                assert!((grad[i * 3 + p] - colsum).abs() < 1e-12);
            }
        }
    }
}
