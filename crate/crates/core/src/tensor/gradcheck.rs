use super::{Result, Tape, Tensor, Var};

/// Compares the autodiff gradient of scalar `f` at `x` with central finite
/// differences and returns the largest relative error
/// `|a - n| / max(|a|, |n|, 1e-8)` over all elements.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>>,
{
    assert!(eps > 0.0 && eps <= 1e-2, "grad_check eps must lie in (0, 1e-2]");
    let eval = |point: &Tensor| -> Result<f64> {
        let tape = Tape::new();
        let v = tape.constant(point.clone());
        Ok(f(&tape, v)?.item())
    };

    let tape = Tape::new();
    let v = tape.param(x.clone());
    let out = f(&tape, v)?;
    let grads = out.backward()?;
    let analytic = grads
        .wrt(v)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(x.shape()));

    let mut worst = 0.0f64;
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let up = eval(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let down = eval(&probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * eps);
        let a = analytic.data()[i];
        let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max(err);
    }
    Ok(worst)
}
