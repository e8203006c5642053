//! Central finite-difference verification of tape gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Worst component-wise disagreement found by a check.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub input: usize,
    pub component: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

#[derive(Clone, Debug)]
pub struct GradCheck {
    pub step: f64,
    /// Check at most this many components per input, sampled deterministically.
    pub max_components: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheck {
    fn default() -> Self {
        Self {
            // power of two near cbrt(eps), so x ± step is exact for |x| ≤ 2
            step: 1.0 / 131_072.0,
            max_components: None,
            seed: 0,
        }
    }
}

/// Relative error with the floor used throughout the test suite.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

fn eval<F>(f: &F, point: &[Tensor]) -> Result<f64>
where
    F: Fn(&Tape, &[Var]) -> Result<Var>,
{
    let tape = Tape::new();
    let vars: Vec<Var> = point.iter().map(|t| tape.constant(t.clone())).collect();
    f(&tape, &vars)?.item()
}

impl GradCheck {
    pub fn run<F>(&self, f: F, point: &[Tensor]) -> Result<GradCheckReport>
    where
        F: Fn(&Tape, &[Var]) -> Result<Var>,
    {
        let tape = Tape::new();
        let vars: Vec<Var> = point
            .iter()
            .map(|t| tape.leaf(t.clone().with_grad()))
            .collect();
        let loss = f(&tape, &vars)?;
        if loss.with_value(Tensor::numel) != 1 {
            return Err(Error::Contract("gradient check needs a scalar function".into()));
        }
        loss.backward()?;

        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut report = GradCheckReport {
            max_rel_error: 0.0,
            input: 0,
            component: 0,
            analytic: 0.0,
            numeric: 0.0,
            checked: 0,
        };
        let mut work: Vec<Tensor> = point.to_vec();
        for (i, v) in vars.iter().enumerate() {
            let analytic = v
                .grad()
                .unwrap_or_else(|| Tensor::new(point[i].shape().to_vec(), vec![0.0; point[i].numel()]).expect("shape"));
            let n = point[i].numel();
            let comps: Vec<usize> = match self.max_components {
                Some(k) if k < n => {
                    let mut c = sample(&mut rng, n, k).into_vec();
                    c.sort_unstable();
                    c
                }
                _ => (0..n).collect(),
            };
            for c in comps {
                let x0 = point[i].data()[c];
                work[i].data_mut()[c] = x0 + self.step;
                let fp = eval(&f, &work)?;
                work[i].data_mut()[c] = x0 - self.step;
                let fm = eval(&f, &work)?;
                work[i].data_mut()[c] = x0;
                let numeric = (fp - fm) / (2.0 * self.step);
                let a = analytic.data()[c];
                let err = relative_error(a, numeric);
                report.checked += 1;
                if err > report.max_rel_error || report.checked == 1 {
                    report.max_rel_error = err;
                    report.input = i;
                    report.component = c;
                    report.analytic = a;
                    report.numeric = numeric;
                }
            }
        }
        Ok(report)
    }
}

/// Compares tape gradients of `f` at `point` against central differences and
/// returns the worst relative error over all components.
pub fn check_gradients<F>(f: F, point: &[Tensor]) -> Result<f64>
where
    F: Fn(&Tape, &[Var]) -> Result<Var>,
{
    Ok(GradCheck::default().run(f, point)?.max_rel_error)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_map_is_exact() {
        let w = Tensor::matrix(2, 3, vec![0.5, -1.0, 2.0, 0.25, 1.5, -0.75]).unwrap();
        let x = Tensor::matrix(3, 1, vec![1.0, -2.0, 0.5]).unwrap();
        let err = check_gradients(|_, v| Ok(v[0].matmul(&v[1])?.sum()), &[w, x]).unwrap();
        assert!(err < 1e-10, "{err}");
    }

    #[test]
    fn detects_wrong_gradient() {
        // relu at exactly 0 has a one-sided derivative; a kink is visible to the checker
        let x = Tensor::matrix(1, 1, vec![0.0]).unwrap();
        let err = check_gradients(|_, v| Ok(v[0].relu().sum()), &[x]).unwrap();
        assert!(err > 0.1);
    }

    #[test]
    fn sampling_limits_component_count() {
        let x = Tensor::matrix(4, 4, (0..16).map(|v| v as f64 * 0.1).collect()).unwrap();
        let check = GradCheck {
            max_components: Some(5),
            ..GradCheck::default()
        };
        let r = check.run(|_, v| Ok(v[0].mul(&v[0])?.sum()), &[x]).unwrap();
        assert_eq!(r.checked, 5);
        assert!(r.max_rel_error < 1e-6);
    }
}
