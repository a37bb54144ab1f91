use crate::error::{Result, TensorError};
use crate::graph::{Graph, Op, Var};
use crate::{Float, Tensor};

type Contribs<T> = Vec<(Var, Vec<T>)>;

/// Softmax of one row, max-subtracted.
pub(crate) fn softmax_row<T: Float>(row: &[T], out: &mut [T]) {
    let max = row.iter().copied().fold(row[0], T::max);
    let mut total = T::ZERO;
    for (o, &v) in out.iter_mut().zip(row) {
        *o = (v - max).exp();
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}

impl<T: Float> Graph<T> {
    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let d = *t.shape().last().unwrap();
        let mut out = vec![T::ZERO; t.len()];
        for (row, o) in t.data().chunks(d).zip(out.chunks_mut(d)) {
            softmax_row(row, o);
        }
        let v = Tensor::new(t.shape(), out).expect("softmax shape");
        self.push(v, Op::Softmax(x))
    }

    /// Normalizes the last axis to zero mean and unit (biased) variance, then
    /// applies `gamma * xhat + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().unwrap();
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(TensorError::shape(
                "layer_norm",
                format!("input {shape:?}, gamma {:?}, beta {:?}", self.shape(gamma), self.shape(beta)),
            ));
        }
        let eps = T::from_f64(eps);
        let inv_d = T::ONE / T::from_usize(d);
        let (gm, bt) = (self.data(gamma), self.data(beta));
        let src = self.data(x);
        let rows = src.len() / d;
        let mut xhat = vec![T::ZERO; src.len()];
        let mut rstd = vec![T::ZERO; rows];
        let mut out = vec![T::ZERO; src.len()];
        for r in 0..rows {
            let row = &src[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
            let rs = T::ONE / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let xh = (row[j] - mean) * rs;
                xhat[r * d + j] = xh;
                out[r * d + j] = xh * gm[j] + bt[j];
            }
        }
        let v = Tensor::new(&shape, out)?;
        Ok(self.push(v, Op::LayerNorm { x, gamma, beta, xhat, rstd }))
    }
}

pub(crate) fn softmax_backward<T: Float>(x: Var, out: &Tensor<T>, g: &[T]) -> Contribs<T> {
    let d = *out.shape().last().unwrap();
    let mut gx = vec![T::ZERO; g.len()];
    for ((y, gy), gxr) in out.data().chunks(d).zip(g.chunks(d)).zip(gx.chunks_mut(d)) {
        let dot: T = y.iter().zip(gy).map(|(&a, &b)| a * b).sum();
        for j in 0..d {
            gxr[j] = y[j] * (gy[j] - dot);
        }
    }
    vec![(x, gx)]
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn layer_norm_backward<T: Float>(
    graph: &Graph<T>,
    x: Var,
    gamma: Var,
    beta: Var,
    xhat: &[T],
    rstd: &[T],
    g: &[T],
    need: &dyn Fn(Var) -> bool,
) -> Contribs<T> {
    let gm = graph.data(gamma);
    let d = gm.len();
    let dt = T::from_usize(d);
    let mut out = Vec::new();
    if need(x) {
        let mut gx = vec![T::ZERO; g.len()];
        for (r, &rs) in rstd.iter().enumerate() {
            let base = r * d;
            let mut sum_dxh = T::ZERO;
            let mut sum_dxh_xh = T::ZERO;
            for j in 0..d {
                let dxh = g[base + j] * gm[j];
                sum_dxh += dxh;
                sum_dxh_xh += dxh * xhat[base + j];
            }
            for j in 0..d {
                let dxh = g[base + j] * gm[j];
                gx[base + j] = rs / dt * (dt * dxh - sum_dxh - xhat[base + j] * sum_dxh_xh);
            }
        }
        out.push((x, gx));
    }
    if need(gamma) {
        let mut gg = vec![T::ZERO; d];
        for (row_g, row_x) in g.chunks(d).zip(xhat.chunks(d)) {
            for j in 0..d {
                gg[j] += row_g[j] * row_x[j];
            }
        }
        out.push((gamma, gg));
    }
    if need(beta) {
        let mut gb = vec![T::ZERO; d];
        for row_g in g.chunks(d) {
            for j in 0..d {
                gb[j] += row_g[j];
            }
        }
        out.push((beta, gb));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ln(g: &mut Graph<f64>, x: Tensor<f64>, eps: f64) -> Tensor<f64> {
        let d = *x.shape().last().unwrap();
        let xv = g.constant(x);
        let gamma = g.constant(Tensor::ones(&[d]));
        let beta = g.constant(Tensor::zeros(&[d]));
        let y = g.layer_norm(xv, gamma, beta, eps).unwrap();
        g.value(y).clone()
    }

    #[test]
    fn constant_input_yields_beta() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(&[2, 4], 3.5));
        let gamma = g.constant(Tensor::from_fn(&[4], |i| i as f64 + 1.0));
        let beta = g.constant(Tensor::from_fn(&[4], |i| 0.1 * i as f64));
        let y = g.layer_norm(x, gamma, beta, 1e-5).unwrap();
        let b = g.value(beta).data().to_vec();
        for row in g.value(y).data().chunks(4) {
            assert_eq!(row, b.as_slice());
        }
    }

    #[test]
    fn normalized_input_is_fixed_point() {
        let mut g = Graph::new();
        let y = ln(&mut g, Tensor::from_f64(&[2], &[1.0, -1.0]).unwrap(), 0.0);
        assert_eq!(y.data(), &[1.0, -1.0]);
    }

    #[test]
    fn output_moments() {
        let mut g = Graph::new();
        let x = Tensor::from_fn(&[8], |i| ((i * 7919) % 13) as f64 * 0.37 - 1.1);
        let y = ln(&mut g, x, 1e-12);
        let mean = y.sum() / 8.0;
        let var = y.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 8.0;
        assert!(mean.abs() < 1e-10);
        assert!((var - 1.0).abs() < 1e-10);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_fn(&[3, 5], |i| (i as f64) * 13.7 - 40.0));
        let y = g.softmax(x);
        for row in g.value(y).data().chunks(5) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        }
    }
}
