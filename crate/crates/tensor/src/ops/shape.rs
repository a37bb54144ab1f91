use crate::error::{Result, TensorError};
use crate::graph::{Graph, Op, Var};
use crate::tensor::numel;
use crate::{Float, Tensor};

type Contribs<T> = Vec<(Var, Vec<T>)>;

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// `out[idx] = src[perm-mapped idx]` where output axis `i` is input axis `perm[i]`.
fn permute_data<T: Float>(src: &[T], shape: &[usize], perm: &[usize]) -> (Vec<usize>, Vec<T>) {
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let in_strides = strides(shape);
    let mapped: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(src.len());
    let mut idx = vec![0usize; shape.len()];
    let mut offset = 0usize;
    for _ in 0..src.len() {
        out.push(src[offset]);
        // odometer increment over the output index
        for ax in (0..idx.len()).rev() {
            idx[ax] += 1;
            offset += mapped[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            offset -= mapped[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    (out_shape, out)
}

fn split_at_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (numel(&shape[..axis]), shape[axis], numel(&shape[axis + 1..]))
}

impl<T: Float> Graph<T> {
    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).clone().reshape(shape)?;
        Ok(self.push(v, Op::Reshape(x)))
    }

    /// Axis permutation: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(TensorError::config("permute", format!("{perm:?} is not a permutation of {} axes", shape.len())));
        }
        let (out_shape, data) = permute_data(self.data(x), &shape, perm);
        let v = Tensor::new(&out_shape, data)?;
        Ok(self.push(v, Op::Permute { x, perm: perm.to_vec() }))
    }

    /// Concatenation along `axis`; all other axes must agree.
    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = xs.first().ok_or_else(|| TensorError::shape("concat", "no inputs"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(TensorError::config("concat", format!("axis {axis} for rank {}", base.len())));
        }
        let mut total = 0;
        for &x in xs {
            let s = self.shape(x);
            let ok = s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(TensorError::shape("concat", format!("{s:?} vs {base:?} on axis {axis}")));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_at_axis(&base, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &x in xs {
                let len = self.shape(x)[axis] * inner;
                data.extend_from_slice(&self.data(x)[o * len..(o + 1) * len]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let v = Tensor::new(&shape, data)?;
        Ok(self.push(v, Op::Concat { xs: xs.to_vec(), axis }))
    }

    /// Picks position `index` along `axis`, removing that axis.
    pub fn select(&mut self, x: Var, axis: usize, index: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(TensorError::config("select", format!("axis {axis} for rank {}", shape.len())));
        }
        if index >= shape[axis] {
            return Err(TensorError::Index { op: "select", index, size: shape[axis] });
        }
        let (outer, n, inner) = split_at_axis(&shape, axis);
        let src = self.data(x);
        let mut data = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            let start = (o * n + index) * inner;
            data.extend_from_slice(&src[start..start + inner]);
        }
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        let v = Tensor::new(&out_shape, data)?;
        Ok(self.push(v, Op::Select { x, axis, index }))
    }

    /// Repeats a `[1, ...]` tensor `n` times along the leading axis.
    pub fn expand_batch(&mut self, x: Var, n: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.first() != Some(&1) || n == 0 {
            return Err(TensorError::shape("expand_batch", format!("need [1, ...], got {shape:?} (n = {n})")));
        }
        let src = self.data(x);
        let mut data = Vec::with_capacity(src.len() * n);
        for _ in 0..n {
            data.extend_from_slice(src);
        }
        let mut out_shape = shape;
        out_shape[0] = n;
        let v = Tensor::new(&out_shape, data)?;
        Ok(self.push(v, Op::ExpandBatch(x)))
    }

    /// Mean over `axis`, removing it.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(TensorError::config("mean_axis", format!("axis {axis} for rank {}", shape.len())));
        }
        let (outer, n, inner) = split_at_axis(&shape, axis);
        let src = self.data(x);
        let scale = T::ONE / T::from_usize(n);
        let mut data = vec![T::ZERO; outer * inner];
        for o in 0..outer {
            for k in 0..n {
                let row = &src[(o * n + k) * inner..(o * n + k + 1) * inner];
                for (acc, &v) in data[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *acc += v;
                }
            }
        }
        for v in &mut data {
            *v *= scale;
        }
        let mut out_shape = shape;
        out_shape.remove(axis);
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        let v = Tensor::new(&out_shape, data)?;
        Ok(self.push(v, Op::MeanAxis { x, axis }))
    }
}

pub(crate) fn permute_backward<T: Float>(graph: &Graph<T>, x: Var, perm: &[usize], g: &[T]) -> Contribs<T> {
    let mut inverse = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inverse[p] = i;
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| graph.shape(x)[p]).collect();
    let (_, data) = permute_data(g, &out_shape, &inverse);
    vec![(x, data)]
}

pub(crate) fn concat_backward<T: Float>(
    graph: &Graph<T>,
    xs: &[Var],
    axis: usize,
    g: &[T],
    need: &dyn Fn(Var) -> bool,
) -> Contribs<T> {
    let base = graph.shape(xs[0]);
    let (outer, _, inner) = split_at_axis(base, axis);
    let total: usize = xs.iter().map(|&x| graph.shape(x)[axis]).sum();
    let mut out = Vec::new();
    let mut start = 0;
    for &x in xs {
        let n = graph.shape(x)[axis];
        if need(x) {
            let mut gx = Vec::with_capacity(outer * n * inner);
            for o in 0..outer {
                let s = (o * total + start) * inner;
                gx.extend_from_slice(&g[s..s + n * inner]);
            }
            out.push((x, gx));
        }
        start += n;
    }
    out
}

pub(crate) fn select_backward<T: Float>(graph: &Graph<T>, x: Var, axis: usize, index: usize, g: &[T]) -> Contribs<T> {
    let shape = graph.shape(x);
    let (outer, n, inner) = split_at_axis(shape, axis);
    let mut gx = vec![T::ZERO; graph.value(x).len()];
    for o in 0..outer {
        let dst = (o * n + index) * inner;
        gx[dst..dst + inner].copy_from_slice(&g[o * inner..(o + 1) * inner]);
    }
    vec![(x, gx)]
}

pub(crate) fn expand_batch_backward<T: Float>(graph: &Graph<T>, x: Var, g: &[T]) -> Contribs<T> {
    let inner = graph.value(x).len();
    let mut gx = vec![T::ZERO; inner];
    for chunk in g.chunks(inner) {
        for (acc, &v) in gx.iter_mut().zip(chunk) {
            *acc += v;
        }
    }
    vec![(x, gx)]
}

pub(crate) fn mean_axis_backward<T: Float>(graph: &Graph<T>, x: Var, axis: usize, g: &[T]) -> Contribs<T> {
    let (outer, n, inner) = split_at_axis(graph.shape(x), axis);
    let scale = T::ONE / T::from_usize(n);
    let mut gx = Vec::with_capacity(outer * n * inner);
    for o in 0..outer {
        let row = &g[o * inner..(o + 1) * inner];
        for _ in 0..n {
            gx.extend(row.iter().map(|&v| v * scale));
        }
    }
    vec![(x, gx)]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn permute_moves_axes() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_fn(&[2, 3, 4], |i| i as f64));
        let y = g.permute(x, &[2, 0, 1]).unwrap();
        assert_eq!(g.shape(y), &[4, 2, 3]);
        let (xv, yv) = (g.value(x), g.value(y));
        for a in 0..2 {
            for b in 0..3 {
                for c in 0..4 {
                    assert_eq!(yv.at(&[c, a, b]), xv.at(&[a, b, c]));
                }
            }
        }
        assert!(g.permute(x, &[0, 0, 1]).is_err());
    }

    #[test]
    fn concat_and_select_round_trip() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::from_fn(&[2, 1, 3], |i| i as f64));
        let b = g.constant(Tensor::from_fn(&[2, 2, 3], |i| 100.0 + i as f64));
        let c = g.concat(&[a, b], 1).unwrap();
        assert_eq!(g.shape(c), &[2, 3, 3]);
        let s0 = g.select(c, 1, 0).unwrap();
        assert_eq!(g.value(s0).data(), &[0.0, 1.0, 2.0, 3.0, 4.0, 5.0]);
        let s2 = g.select(c, 1, 2).unwrap();
        assert_eq!(g.value(s2).data(), &[103.0, 104.0, 105.0, 109.0, 110.0, 111.0]);
        assert!(g.select(c, 1, 3).is_err());
    }

    #[test]
    fn mean_axis_values() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_fn(&[2, 3], |i| i as f64));
        let m0 = g.mean_axis(x, 0).unwrap();
        let m1 = g.mean_axis(x, 1).unwrap();
        assert_eq!(g.value(m0).data(), &[1.5, 2.5, 3.5]);
        assert_eq!(g.value(m1).data(), &[1.0, 4.0]);
    }
}
