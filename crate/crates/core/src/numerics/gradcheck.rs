//! Central-difference gradient verification in 64-bit arithmetic.

use crate::error::{Error, Result};

use super::{Graph, Tensor, Var};

pub const DEFAULT_STEP: f64 = 1e-5;

/// Outcome of comparing tape gradients against finite differences.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// (input index, flat coordinate) of the worst coordinate.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub coordinates: usize,
}

fn rel_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / 1f64.max(a.abs()).max(n.abs())
}

fn evaluate<F>(f: &F, inputs: &[Tensor<f64>]) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.shape().to_vec(), t.data().to_vec(), false)).collect::<Result<_>>()?;
    let out = f(&mut g, &vars)?;
    g.scalar_value(out).map_err(|_| Error::NotScalar(g.shape(out).to_vec()))
}

/// Checks every coordinate of every input. `f` must return a scalar and be
/// deterministic across calls (freeze any sampling it performs).
pub fn gradcheck_multi<F>(f: F, inputs: &[Tensor<f64>], h: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| g.leaf(t.shape().to_vec(), t.data().to_vec(), true))
        .collect::<Result<_>>()?;
    let out = f(&mut g, &vars)?;
    if g.value(out).len() != 1 {
        return Err(Error::NotScalar(g.shape(out).to_vec()));
    }
    g.backward(out)?;

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
        coordinates: 0,
    };
    let mut probe: Vec<Tensor<f64>> = inputs.to_vec();
    for (ti, &var) in vars.iter().enumerate() {
        let analytic: Vec<f64> = g
            .grad(var)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; inputs[ti].len()]);
        for j in 0..inputs[ti].len() {
            let x0 = inputs[ti].data()[j];
            probe[ti].data_mut()[j] = x0 + h;
            let fp = evaluate(&f, &probe)?;
            probe[ti].data_mut()[j] = x0 - h;
            let fm = evaluate(&f, &probe)?;
            probe[ti].data_mut()[j] = x0;
            let numeric = (fp - fm) / (2.0 * h);
            let err = rel_error(analytic[j], numeric);
            report.coordinates += 1;
            if err > report.max_rel_error || report.coordinates == 1 {
                report.max_rel_error = err;
                report.worst = (ti, j);
                report.analytic = analytic[j];
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}

/// Max relative error `|a − n| / max(1, |a|, |n|)` over the coordinates of `x`.
pub fn gradcheck<F>(f: F, x: &Tensor<f64>, h: f64) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var>,
{
    let r = gradcheck_multi(|g, v| f(g, v[0]), std::slice::from_ref(x), h)?;
    Ok(r.max_rel_error)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_matches_closed_form() {
        let x = Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        let mut g = Graph::new();
        let v = g.leaf(vec![3], x.data().to_vec(), true).unwrap();
        let sq = g.mul(v, v).unwrap();
        let s = g.sum(sq).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(v).unwrap(), &[2.0, 4.0, 6.0]);

        let err = gradcheck(
            |g, v| {
                let sq = g.mul(v, v)?;
                g.sum(sq)
            },
            &x,
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(err < 1e-7, "{err}");
    }

    #[test]
    fn constant_function_has_zero_gradient() {
        let x = Tensor::new(vec![2], vec![0.5, -0.5]).unwrap();
        let err = gradcheck(|g, _| Ok(g.scalar(3.0)), &x, DEFAULT_STEP).unwrap();
        assert!(err < 1e-12);
    }

    #[test]
    fn non_scalar_output_is_rejected() {
        let x = Tensor::new(vec![2], vec![0.5, -0.5]).unwrap();
        assert!(matches!(
            gradcheck(|g, v| g.exp(v), &x, DEFAULT_STEP),
            Err(Error::NotScalar(_))
        ));
    }
}
