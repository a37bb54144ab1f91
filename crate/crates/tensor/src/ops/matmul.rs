use crate::error::{Result, TensorError};
use crate::graph::{Graph, Op, Var};
use crate::linalg::{gemm, MatRef};
use crate::{Float, Tensor};

type Contribs<T> = Vec<(Var, Vec<T>)>;

impl<T: Float> Graph<T> {
    /// Affine map over the last axis: `y = x W^T + b` with `W: [out, in]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let d_in = *xs.last().expect("non-empty shape");
        if ws.len() != 2 || ws[1] != d_in {
            return Err(TensorError::shape("linear", format!("input {xs:?} vs weight {ws:?}")));
        }
        let d_out = ws[0];
        if let Some(b) = b {
            if self.shape(b) != [d_out] {
                return Err(TensorError::shape("linear", format!("bias {:?}, want [{d_out}]", self.shape(b))));
            }
        }
        let m = self.value(x).len() / d_in;
        let mut out = vec![T::ZERO; m * d_out];
        gemm(
            T::ONE,
            self.data(x),
            MatRef::row_major(m, d_in),
            self.data(w),
            MatRef::row_major(d_out, d_in).t(),
            T::ZERO,
            &mut out,
            MatRef::row_major(m, d_out),
        );
        if let Some(b) = b {
            let bias = self.data(b);
            for row in out.chunks_mut(d_out) {
                for (o, &bv) in row.iter_mut().zip(bias) {
                    *o += bv;
                }
            }
        }
        let mut shape = xs;
        *shape.last_mut().unwrap() = d_out;
        let v = Tensor::new(&shape, out)?;
        Ok(self.push(v, Op::Linear { x, w, b }))
    }

    /// Batched matrix product of `[B, m, k]` and `[B, k, n]`, either operand
    /// optionally stored transposed.
    pub fn batch_matmul(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(TensorError::shape("batch_matmul", format!("{sa:?} x {sb:?}")));
        }
        let (m, k) = if ta { (sa[2], sa[1]) } else { (sa[1], sa[2]) };
        let (k2, n) = if tb { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if k != k2 {
            return Err(TensorError::shape("batch_matmul", format!("inner {k} vs {k2} ({sa:?} x {sb:?})")));
        }
        let batch = sa[0];
        let mut out = vec![T::ZERO; batch * m * n];
        let (da, db) = (self.data(a), self.data(b));
        for i in 0..batch {
            gemm(
                T::ONE,
                da,
                MatRef::maybe_t(sa[1], sa[2], ta).at(i * m * k),
                db,
                MatRef::maybe_t(sb[1], sb[2], tb).at(i * k * n),
                T::ZERO,
                &mut out,
                MatRef::row_major(m, n).at(i * m * n),
            );
        }
        let v = Tensor::new(&[batch, m, n], out)?;
        Ok(self.push(v, Op::BatchMatMul { a, b, ta, tb }))
    }
}

pub(crate) fn linear_backward<T: Float>(
    graph: &Graph<T>,
    x: Var,
    w: Var,
    b: Option<Var>,
    g: &[T],
    need: &dyn Fn(Var) -> bool,
) -> Contribs<T> {
    let ws = graph.shape(w);
    let (d_out, d_in) = (ws[0], ws[1]);
    let m = graph.value(x).len() / d_in;
    let mut out = Vec::new();
    if need(x) {
        let mut gx = vec![T::ZERO; m * d_in];
        gemm(
            T::ONE,
            g,
            MatRef::row_major(m, d_out),
            graph.data(w),
            MatRef::row_major(d_out, d_in),
            T::ZERO,
            &mut gx,
            MatRef::row_major(m, d_in),
        );
        out.push((x, gx));
    }
    if need(w) {
        let mut gw = vec![T::ZERO; d_out * d_in];
        gemm(
            T::ONE,
            g,
            MatRef::row_major(m, d_out).t(),
            graph.data(x),
            MatRef::row_major(m, d_in),
            T::ZERO,
            &mut gw,
            MatRef::row_major(d_out, d_in),
        );
        out.push((w, gw));
    }
    if let Some(b) = b.filter(|&b| need(b)) {
        let mut gb = vec![T::ZERO; d_out];
        for row in g.chunks(d_out) {
            for (acc, &v) in gb.iter_mut().zip(row) {
                *acc += v;
            }
        }
        out.push((b, gb));
    }
    out
}

pub(crate) fn bmm_backward<T: Float>(
    graph: &Graph<T>,
    a: Var,
    b: Var,
    ta: bool,
    tb: bool,
    g: &[T],
    need: &dyn Fn(Var) -> bool,
) -> Contribs<T> {
    let (sa, sb) = (graph.shape(a), graph.shape(b));
    let batch = sa[0];
    let (m, k) = if ta { (sa[2], sa[1]) } else { (sa[1], sa[2]) };
    let n = if tb { sb[1] } else { sb[2] };
    let mut out = Vec::new();
    if need(a) {
        // dA_logical[m,k] = dC[m,n] * op(B)^T, stored through A's layout
        let mut ga = vec![T::ZERO; batch * m * k];
        for i in 0..batch {
            gemm(
                T::ONE,
                g,
                MatRef::row_major(m, n).at(i * m * n),
                graph.data(b),
                MatRef::maybe_t(sb[1], sb[2], tb).at(i * k * n).t(),
                T::ZERO,
                &mut ga,
                MatRef::maybe_t(sa[1], sa[2], ta).at(i * m * k),
            );
        }
        out.push((a, ga));
    }
    if need(b) {
        // dB_logical[k,n] = op(A)^T * dC
        let mut gb = vec![T::ZERO; batch * k * n];
        for i in 0..batch {
            gemm(
                T::ONE,
                graph.data(a),
                MatRef::maybe_t(sa[1], sa[2], ta).at(i * m * k).t(),
                g,
                MatRef::row_major(m, n).at(i * m * n),
                T::ZERO,
                &mut gb,
                MatRef::maybe_t(sb[1], sb[2], tb).at(i * k * n),
            );
        }
        out.push((b, gb));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn linear_identity() {
        let mut g = Graph::new();
        let x = g.constant(t(&[2], &[1.0, 2.0]));
        let w = g.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let b = g.constant(t(&[2], &[0.0, 0.0]));
        let y = g.linear(x, w, Some(b)).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 2.0]);
    }

    #[test]
    fn linear_hand_computed() {
        let mut g = Graph::new();
        let x = g.constant(t(&[1, 1], &[1.0]));
        let w = g.constant(t(&[2, 1], &[3.0, -1.0]));
        let b = g.constant(t(&[2], &[0.5, 0.5]));
        let y = g.linear(x, w, Some(b)).unwrap();
        assert_eq!(g.value(y).data(), &[3.5, -0.5]);
    }

    #[test]
    fn linear_zero_input_gives_bias() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[3, 4]));
        let w = g.constant(Tensor::from_fn(&[2, 4], |i| i as f64 - 3.0));
        let b = g.constant(t(&[2], &[0.25, -7.0]));
        let y = g.linear(x, w, Some(b)).unwrap();
        assert_eq!(g.value(y).data(), &[0.25, -7.0, 0.25, -7.0, 0.25, -7.0]);
    }

    #[test]
    fn linear_rejects_width_mismatch() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros(&[3, 4]));
        let w = g.constant(Tensor::zeros(&[2, 5]));
        assert!(matches!(g.linear(x, w, None), Err(TensorError::Shape { .. })));
    }

    #[test]
    fn bmm_transpose_flags_agree() {
        let mut g = Graph::<f64>::new();
        let a = Tensor::from_fn(&[2, 3, 4], |i| (i as f64).sin());
        let b = Tensor::from_fn(&[2, 4, 5], |i| (i as f64).cos());
        let va = g.constant(a.clone());
        let vb = g.constant(b.clone());
        let plain = g.batch_matmul(va, vb, false, false).unwrap();
        let at = g.permute(va, &[0, 2, 1]).unwrap();
        let bt = g.permute(vb, &[0, 2, 1]).unwrap();
        let both = g.batch_matmul(at, bt, true, true).unwrap();
        assert!(g.value(plain).max_abs_diff(g.value(both)) < 1e-14);
        for bi in 0..2 {
            for i in 0..3 {
                for j in 0..5 {
                    let want: f64 = (0..4).map(|k| a.at(&[bi, i, k]) * b.at(&[bi, k, j])).sum();
                    assert!((g.value(plain).at(&[bi, i, j]) - want).abs() < 1e-14);
                }
            }
        }
    }
}
