use super::{Graph, ParamStore, Var};
use crate::error::{Error, Result};

fn evaluate<F>(f: &F, params: &ParamStore<f64>) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let mut g = Graph::no_grad();
    let out = f(&mut g, params)?;
    let value = g.value(out);
    let v = value.item().ok_or_else(|| Error::NonScalarLoss(value.shape().to_vec()))?;
    if !v.is_finite() {
        return Err(Error::NonFinite { op: "gradient_check" });
    }
    Ok(v)
}

/// Compares reverse-mode gradients of the scalar function `f` against
/// central differences with step `epsilon`, over every scalar in `params`.
///
/// Returns `max |analytic - numeric| / max(1, |numeric|)`.
pub fn gradient_check<F>(f: F, params: &ParamStore<f64>, epsilon: f64) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>,
{
    if !(epsilon > 0.0) {
        return Err(Error::Config(format!("epsilon must be positive, got {epsilon}")));
    }
    let mut analytic = params.clone();
    let mut g = Graph::new();
    let out = f(&mut g, &analytic)?;
    if !g.value(out).is_finite() {
        return Err(Error::NonFinite { op: "gradient_check" });
    }
    g.backward(out, &mut analytic)?;

    let mut probe = params.clone();
    let names: Vec<String> = params.names().map(str::to_owned).collect();
    let mut worst: f64 = 0.0;
    for name in &names {
        let len = params.value(name)?.len();
        for i in 0..len {
            let orig = params.value(name)?.data()[i];
            probe.value_mut(name)?.data_mut()[i] = orig + epsilon;
            let plus = evaluate(&f, &probe)?;
            probe.value_mut(name)?.data_mut()[i] = orig - epsilon;
            let minus = evaluate(&f, &probe)?;
            probe.value_mut(name)?.data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * epsilon);
            let exact = analytic.grad(name)?.data()[i];
            worst = worst.max((exact - numeric).abs() / numeric.abs().max(1.0));
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn quadratic_is_exactly_differenced() {
        let mut store = ParamStore::new();
        store.insert("x", Tensor::from_f64([2], &[0.5, -1.5]).unwrap()).unwrap();
        let err = gradient_check(
            |g, s| {
                let x = g.param(s, "x")?;
                let sq = g.mul(x, x)?;
                g.sum(sq, None)
            },
            &store,
            1e-4,
        )
        .unwrap();
        assert!(err < 1e-9, "{err}");
    }

    #[test]
    fn non_finite_value_is_an_error() {
        let mut store = ParamStore::new();
        store.insert("x", Tensor::from_f64([1], &[800.0]).unwrap()).unwrap();
        let res = gradient_check(
            |g, s| {
                let x = g.param(s, "x")?;
                let e = g.exp(x)?;
                g.sum(e, None)
            },
            &store,
            1e-4,
        );
        assert!(matches!(res, Err(Error::NonFinite { .. })));
    }
}
