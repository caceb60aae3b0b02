use crate::error::{Error, Result};
use crate::par::{self, ExecMode};

use super::{Graph, Tensor, Value};

/// Maximum relative error between the analytic gradient of `f` at `x` and a
/// central difference with step `h`:
/// `max_i |analytic_i − numeric_i| / max(1, |numeric_i|)`.
///
/// `f` builds a scalar from the leaf it is given. Graphs that record active
/// dropout are rejected, as are non-scalar outputs.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Value) -> Result<Value> + Sync + Send,
{
    if h <= 0.0 {
        return Err(Error::Contract(format!("grad_check step must be positive, got {h}")));
    }
    let mut g = Graph::new();
    let leaf = g.param(x);
    let root = f(&mut g, leaf)?;
    if g.is_stochastic() {
        return Err(Error::Contract("grad_check needs a deterministic function (dropout is active)".into()));
    }
    g.backward(root)?;
    let analytic = g.grad_tensor(leaf).into_data();

    let eval = |xp: Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let leaf = g.constant(xp);
        let root = f(&mut g, leaf)?;
        Ok(g.scalar(root))
    };
    let errors = par::map_range(ExecMode::auto(), x.numel(), |i| -> Result<f64> {
        let mut plus = x.clone();
        plus.data_mut()[i] += h;
        let mut minus = x.clone();
        minus.data_mut()[i] -= h;
        // divide by the step actually taken after rounding
        let step = plus.data()[i] - minus.data()[i];
        let numeric = (eval(plus)? - eval(minus)?) / step;
        Ok((analytic[i] - numeric).abs() / numeric.abs().max(1.0))
    });
    errors
        .into_iter()
        .try_fold(0.0f64, |acc, e| Ok(acc.max(e?)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Reduction, RngKey};

    #[test]
    fn linear_function_is_exact() {
        // dyadic inputs and step: every sum is exact
        let x = Tensor::vector(vec![0.25, -1.5, 4.0, 2.5]);
        let err = grad_check(|g, x| Ok(g.sum(x)), &x, 2f64.powi(-17)).unwrap();
        assert!(err < 1e-12, "{err}");
        // arbitrary inputs: summation rounding divided by 2h dominates
        let x = Tensor::vector(vec![0.3, -1.2, 4.1, 2.7]);
        let err = grad_check(|g, x| Ok(g.sum(x)), &x, 1e-5).unwrap();
        assert!(err < 1e-9, "{err}");
    }

    #[test]
    fn softmax_cross_entropy_matches_differences() {
        let x = Tensor::matrix(2, 3, vec![0.1, -0.7, 1.3, 2.0, 0.4, -1.1]).unwrap();
        let err = grad_check(
            |g, x| {
                let p = g.softmax(x, 1)?;
                let l = g.log(p);
                let ce = g.cross_entropy(x, &[2, 0], Reduction::Mean)?;
                let s = g.sum(l);
                g.add(ce, s)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn dropout_is_rejected() {
        let x = Tensor::vector(vec![1.0, 2.0]);
        let res = grad_check(
            |g, x| {
                let y = g.dropout(x, 0.5, RngKey::new(3))?;
                Ok(g.sum(y))
            },
            &x,
            1e-5,
        );
        assert!(matches!(res, Err(Error::Contract(_))));
    }
}
