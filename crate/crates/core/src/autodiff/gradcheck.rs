use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Maximum relative error between the analytic gradient of a scalar-valued
/// `f` at `x` and central differences with step `h`.
///
/// Relative error per coordinate is `|a - c| / max(1e-8, |a| + |c|)`.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let coords: Vec<usize> = (0..x.len()).collect();
    grad_check_coords(f, x, h, &coords)
}

/// [`grad_check`] restricted to the listed coordinates.
pub fn grad_check_coords<F>(f: F, x: &Tensor, h: f64, coords: &[usize]) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    if h <= 0.0 {
        return Err(Error::invalid("grad_check step must be positive"));
    }
    let mut g = Graph::new();
    let v = g.variable(x.clone())?;
    let loss = f(&mut g, v)?;
    let grads = g.backward(loss)?;
    let analytic = grads
        .wrt(v)
        .map(<[f64]>::to_vec)
        .unwrap_or_else(|| vec![0.0; x.len()]);

    let eval = |t: Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let v = g.constant(t)?;
        let l = f(&mut g, v)?;
        Ok(g.item(l))
    };
    let mut worst: f64 = 0.0;
    for &i in coords {
        let mut plus = x.clone();
        plus.data_mut()[i] += h;
        let mut minus = x.clone();
        minus.data_mut()[i] -= h;
        let central = (eval(plus)? - eval(minus)?) / (2.0 * h);
        let a = analytic[i];
        let rel = (a - central).abs() / (a.abs() + central.abs()).max(1e-8);
        worst = worst.max(rel);
    }
    Ok(worst)
}
