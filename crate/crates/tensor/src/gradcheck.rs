use crate::{Result, Tape, Tensor, TensorError, Var};

/// Denominator floor for relative errors of near-zero gradients.
const RELATIVE_FLOOR: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    /// `(parameter, flat index)` of the worst element.
    pub worst: (usize, usize),
    pub tolerance: f64,
    pub pass: bool,
    pub analytic: Vec<Tensor<f64>>,
    pub numeric: Vec<Tensor<f64>>,
}

/// Compares tape gradients of scalar `f` at `params` with central
/// differences of step `h`.
pub fn grad_check<F>(
    f: F,
    params: &[Tensor<f64>],
    h: f64,
    tolerance: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|v| tape.leaf(v.clone())).collect();
        let out = f(&mut tape, &vars)?;
        let v = tape.value(out);
        if v.len() != 1 {
            return Err(TensorError::NonScalarLoss(v.shape().to_vec()));
        }
        Ok(v.data()[0])
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|v| tape.leaf(v.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .zip(params)
        .map(|(&v, p)| {
            grads
                .get(v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(p.shape()))
        })
        .collect();

    let mut probe = params.to_vec();
    let mut numeric = Vec::with_capacity(params.len());
    let (mut worst_err, mut worst) = (0.0f64, (0, 0));
    for (pi, param) in params.iter().enumerate() {
        let mut num = Tensor::zeros(param.shape());
        for i in 0..param.len() {
            let x0 = param.data()[i];
            probe[pi].data_mut()[i] = x0 + h;
            let plus = eval(&probe)?;
            probe[pi].data_mut()[i] = x0 - h;
            let minus = eval(&probe)?;
            probe[pi].data_mut()[i] = x0;
            let n = (plus - minus) / (2.0 * h);
            let a = analytic[pi].data()[i];
            if !n.is_finite() || !a.is_finite() {
                return Err(TensorError::NonFinite { op: "grad_check" });
            }
            num.data_mut()[i] = n;
            let err = (a - n).abs() / a.abs().max(n.abs()).max(RELATIVE_FLOOR);
            if err > worst_err {
                (worst_err, worst) = (err, (pi, i));
            }
        }
        numeric.push(num);
    }
    Ok(GradCheckReport {
        max_relative_error: worst_err,
        worst,
        tolerance,
        pass: worst_err <= tolerance,
        analytic,
        numeric,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact() {
        let w = Tensor::new(&[4], vec![0.3, -1.2, 2.5, 0.0]).unwrap();
        let r = grad_check(
            |t, v| {
                let sq = t.mul(v[0], v[0])?;
                t.sum(sq)
            },
            &[w],
            1e-5,
            1e-9,
        )
        .unwrap();
        assert!(r.pass, "{}", r.max_relative_error);
        assert_eq!(r.analytic[0].data(), &[0.6, -2.4, 5.0, 0.0]);
    }

    #[test]
    fn non_finite_reported() {
        let w = Tensor::new(&[1], vec![1.0]).unwrap();
        let r = grad_check(|t, v| t.scale(v[0], f64::INFINITY), &[w], 1e-5, 1e-6);
        assert!(matches!(r, Err(TensorError::NonFinite { .. })));
    }
}
