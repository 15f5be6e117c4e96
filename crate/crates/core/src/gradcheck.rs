//! Central finite differences for prompt gradients.

use ndarray::Array2;

use crate::error::Result;
use crate::prompt::SoftPrompt;

/// Numerical gradient of `loss` at `prompt`, one entry at a time:
/// `(f(x + h e_ij) - f(x - h e_ij)) / 2h`.
pub fn central_difference<F>(prompt: &SoftPrompt, step: f64, mut loss: F) -> Result<Array2<f64>>
where
    F: FnMut(&SoftPrompt) -> Result<f64>,
{
    let base = prompt.embeddings();
    let mut grad = Array2::zeros(base.raw_dim());
    for ((i, j), g) in grad.indexed_iter_mut() {
        let mut shifted = base.clone();
        shifted[[i, j]] = base[[i, j]] + step;
        let up = loss(&SoftPrompt::from_embeddings(prompt.role(), shifted.clone())?)?;
        shifted[[i, j]] = base[[i, j]] - step;
        let down = loss(&SoftPrompt::from_embeddings(prompt.role(), shifted)?)?;
        *g = (up - down) / (2.0 * step);
    }
    Ok(grad)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradComparison {
    pub max_abs_error: f64,
    /// Largest `|a - n| / max(|a|, |n|, floor)` over all entries.
    pub max_rel_error: f64,
    pub worst: (usize, usize),
    pub max_magnitude: f64,
}

/// Entrywise comparison. `floor` keeps entries that are zero in both
/// gradients from dividing by zero.
pub fn compare(analytic: &Array2<f64>, numeric: &Array2<f64>, floor: f64) -> GradComparison {
    assert_eq!(analytic.dim(), numeric.dim(), "gradient shapes differ");
    let mut out =
        GradComparison { max_abs_error: 0.0, max_rel_error: 0.0, worst: (0, 0), max_magnitude: 0.0 };
    for ((idx, a), n) in analytic.indexed_iter().zip(numeric.iter()) {
        let abs = (a - n).abs();
        let rel = abs / a.abs().max(n.abs()).max(floor);
        out.max_abs_error = out.max_abs_error.max(abs);
        out.max_magnitude = out.max_magnitude.max(a.abs());
        if rel > out.max_rel_error {
            out.max_rel_error = rel;
            out.worst = idx;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prompt::PromptRole;
    use ndarray::array;

    #[test]
    fn quadratic_gradient_is_exact_up_to_rounding() {
        let p = SoftPrompt::from_embeddings(PromptRole::Answer, array![[1.0, -2.0], [0.5, 3.0]]).unwrap();
        let numeric = central_difference(&p, 1e-5, |q| Ok(q.embeddings().mapv(|x| x * x).sum())).unwrap();
        let analytic = p.embeddings().mapv(|x| 2.0 * x);
        let c = compare(&analytic, &numeric, 1e-8);
        assert!(c.max_rel_error < 1e-9, "{c:?}");
        assert_eq!(c.max_magnitude, 6.0);
    }

    #[test]
    fn compare_reports_worst_entry() {
        let a = array![[1.0, 0.0], [2.0, 4.0]];
        let n = array![[1.0, 0.0], [2.0, 3.0]];
        let c = compare(&a, &n, 1e-12);
        assert_eq!(c.worst, (1, 1));
        assert!((c.max_rel_error - 0.25).abs() < 1e-15);
    }
}
