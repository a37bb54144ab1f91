use crate::error::Result;
use crate::{Graph, Tensor, Var};

/// Compares reverse-mode gradients of a scalar function against central
/// finite differences `(f(x+h) - f(x-h)) / 2h`, coordinate by coordinate.
///
/// `f` builds the function on a fresh graph from the leaf handles it is given
/// and returns the scalar output. The result is the largest
/// `|a - n| / max(1e-8, |a| + |n|)` over all coordinates of all leaves.
pub fn grad_check<F>(f: F, leaves: &[Tensor<f64>], h: f64) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).data()[0])
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = leaves.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let grads = g.backward(out)?;
    let analytic: Vec<Tensor<f64>> =
        vars.iter().zip(leaves).map(|(&v, t)| grads.get_or_zeros(v, t.shape())).collect();

    let mut worst = 0.0f64;
    let mut probe: Vec<Tensor<f64>> = leaves.to_vec();
    for (li, leaf) in leaves.iter().enumerate() {
        for ci in 0..leaf.len() {
            let orig = leaf.data()[ci];
            probe[li].data_mut()[ci] = orig + h;
            let up = eval(&probe)?;
            probe[li].data_mut()[ci] = orig - h;
            let down = eval(&probe)?;
            probe[li].data_mut()[ci] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic[li].data()[ci];
            let rel = (a - numeric).abs() / f64::max(1e-8, a.abs() + numeric.abs());
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}
