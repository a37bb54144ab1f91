//! Learning-rate schedule and Adam.

use rvernet_tensor::{Float, Tensor};

use crate::error::{Error, Result};

/// Linear warm-up to `lr0` over `warmup_steps`, then cosine decay to zero:
///
/// ```text
/// step <  W:  lr0 (step + 1) / W
/// step >= W:  lr0 / 2 (1 + cos(pi (step - W) / (total - W)))
/// ```
pub fn lr_schedule(step: usize, total_steps: usize, warmup_steps: usize, lr0: f64) -> Result<f64> {
    if warmup_steps >= total_steps {
        return Err(Error::Config(format!("warmup_steps {warmup_steps} must be below total_steps {total_steps}")));
    }
    if step >= total_steps {
        return Err(Error::Config(format!("step {step} outside a {total_steps}-step schedule")));
    }
    Ok(if step < warmup_steps {
        lr0 * (step + 1) as f64 / warmup_steps as f64
    } else {
        let t = (step - warmup_steps) as f64 / (total_steps - warmup_steps) as f64;
        lr0 * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First and second moments plus the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub t: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Float> AdamState<T> {
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Tensor<T>>) -> Self {
        let m: Vec<Tensor<T>> = params.into_iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self { t: 0, v: m.clone(), m }
    }
}

/// One bias-corrected Adam update, without weight decay.
pub fn adam_step<T: Float>(
    params: &mut [&mut Tensor<T>],
    grads: &[Tensor<T>],
    state: &mut AdamState<T>,
    lr: f64,
    hyper: AdamHyper,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::Validation(format!(
            "adam_step: {} params, {} grads, {} moment slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || p.shape() != state.m[i].shape() {
            return Err(Error::Tensor(rvernet_tensor::TensorError::Shape {
                op: "adam_step",
                detail: format!("param {i}: {:?}, grad {:?}, state {:?}", p.shape(), g.shape(), state.m[i].shape()),
            }));
        }
    }
    state.t += 1;
    let AdamHyper { beta1, beta2, eps } = hyper;
    let c1 = 1.0 - beta1.powi(state.t as i32);
    let c2 = 1.0 - beta2.powi(state.t as i32);
    let (b1, b2) = (T::from_f64(beta1), T::from_f64(beta2));
    let (ob1, ob2) = (T::from_f64(1.0 - beta1), T::from_f64(1.0 - beta2));
    let (c1, c2, lr, eps) = (T::from_f64(c1), T::from_f64(c2), T::from_f64(lr), T::from_f64(eps));
    for (i, p) in params.iter_mut().enumerate() {
        let g = grads[i].data();
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (j, w) in p.data_mut().iter_mut().enumerate() {
            m[j] = b1 * m[j] + ob1 * g[j];
            v[j] = b2 * v[j] + ob2 * g[j] * g[j];
            let mhat = m[j] / c1;
            let vhat = v[j] / c2;
            *w -= lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}
