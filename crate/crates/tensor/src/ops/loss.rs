use crate::error::{Result, TensorError};
use crate::graph::{Graph, Op, Var};
use crate::ops::norm::softmax_row;
use crate::{Float, Tensor};

impl<T: Float> Graph<T> {
    /// Mean cross-entropy of `logits: [N, K]` against label-smoothed one-hot
    /// targets: the true class gets `1 - epsilon`, every other class
    /// `epsilon / (K - 1)`. `epsilon = 0` is plain cross-entropy.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], epsilon: f64) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 || shape[0] != targets.len() {
            return Err(TensorError::shape(
                "cross_entropy",
                format!("logits {shape:?} vs {} targets", targets.len()),
            ));
        }
        if !(0.0..1.0).contains(&epsilon) {
            return Err(TensorError::config("cross_entropy", format!("epsilon {epsilon} not in [0, 1)")));
        }
        let (n, k) = (shape[0], shape[1]);
        if k < 2 && epsilon > 0.0 {
            return Err(TensorError::config("cross_entropy", "label smoothing needs at least 2 classes"));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= k) {
            return Err(TensorError::Index { op: "cross_entropy", index: bad, size: k });
        }
        let on = T::from_f64(1.0 - epsilon);
        let off = if k > 1 { T::from_f64(epsilon / (k - 1) as f64) } else { T::ZERO };
        let mut soft = vec![off; n * k];
        for (i, &t) in targets.iter().enumerate() {
            soft[i * k + t] = on;
        }
        let src = self.data(logits);
        let mut probs = vec![T::ZERO; n * k];
        let mut total = T::ZERO;
        for i in 0..n {
            let row = &src[i * k..(i + 1) * k];
            softmax_row(row, &mut probs[i * k..(i + 1) * k]);
            let max = row.iter().copied().fold(row[0], T::max);
            let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
            for j in 0..k {
                let q = soft[i * k + j];
                if q != T::ZERO {
                    total += q * (lse - row[j]);
                }
            }
        }
        let v = Tensor::scalar(total / T::from_usize(n));
        Ok(self.push(v, Op::CrossEntropy { logits, soft_targets: soft, probs }))
    }
}

pub(crate) fn cross_entropy_backward<T: Float>(
    logits: Var,
    soft_targets: &[T],
    probs: &[T],
    shape: &[usize],
    g: &[T],
) -> Vec<(Var, Vec<T>)> {
    let scale = g[0] / T::from_usize(shape[0]);
    let gx = probs.iter().zip(soft_targets).map(|(&p, &q)| (p - q) * scale).collect();
    vec![(logits, gx)]
}
