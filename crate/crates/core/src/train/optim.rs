//! Loss, Adam and gradient clipping.

use super::{Result, TrainError};
use crate::codec::WordVocab;
use crate::model::Ccead;
use crate::tensor::{Graph, Tensor, Var};

/// `Σ_t CE(logits_t, targets_t)` summed over steps and averaged over the
/// batch; `<PAD>` targets are masked. An all-pad batch yields a constant 0.
pub fn sequence_loss(g: &mut Graph, logits: &[Var], targets: &[Vec<usize>]) -> Result<Var> {
    let batch = targets.len();
    let mut total: Option<Var> = None;
    for (t, &l) in logits.iter().enumerate() {
        let step: Vec<Option<usize>> = targets
            .iter()
            .map(|row| row.get(t).copied().filter(|&w| w != WordVocab::PAD))
            .collect();
        if step.iter().all(Option::is_none) {
            continue;
        }
        let ce = g.softmax_cross_entropy(l, &step)?;
        total = Some(match total {
            Some(acc) => g.add(acc, ce)?,
            None => ce,
        });
    }
    match total {
        Some(sum) => Ok(g.affine(sum, 1.0 / batch as f64, 0.0)?),
        None => {
            log::warn!("batch has no non-pad targets; loss is 0");
            Ok(g.constant(Tensor::scalar(0.0)))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moments mirror the parameter tree; `t` counts completed steps.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Ccead<Tensor>,
    pub v: Ccead<Tensor>,
    pub t: u64,
    pub hyper: AdamHyper,
}

impl AdamState {
    pub fn new(params: &Ccead<Tensor>) -> Self {
        let zeros = params.map(&mut |_, p| Tensor::zeros(p.shape()));
        Self {
            m: zeros.clone(),
            v: zeros,
            t: 0,
            hyper: AdamHyper::default(),
        }
    }
}

/// One bias-corrected Adam update of a flat slice at step `t` (1-based).
pub fn adam_update(
    theta: &mut [f64],
    grad: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    t: u64,
    lr: f64,
    h: AdamHyper,
) {
    let bc1 = 1.0 - h.beta1.powi(t as i32);
    let bc2 = 1.0 - h.beta2.powi(t as i32);
    for i in 0..theta.len() {
        m[i] = h.beta1 * m[i] + (1.0 - h.beta1) * grad[i];
        v[i] = h.beta2 * v[i] + (1.0 - h.beta2) * grad[i] * grad[i];
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        theta[i] -= lr * m_hat / (v_hat.sqrt() + h.eps);
    }
}

/// Applies Adam to every parameter. Any non-finite gradient aborts before
/// anything is modified.
pub fn adam_step(
    params: &mut Ccead<Tensor>,
    grads: &Ccead<Tensor>,
    state: &mut AdamState,
    lr: f64,
) -> Result<()> {
    for (name, g) in grads.leaves() {
        if !g.is_finite() {
            return Err(TrainError::NonFiniteGradient {
                param: name,
                step: state.t + 1,
            });
        }
    }
    state.t += 1;
    let t = state.t;
    let hyper = state.hyper;
    let grads = grads.leaves();
    let ms = state.m.leaves_mut();
    let vs = state.v.leaves_mut();
    for (((name, p), (_, g)), ((_, m), (_, v))) in params
        .leaves_mut()
        .into_iter()
        .zip(grads)
        .zip(ms.into_iter().zip(vs))
    {
        if p.shape() != g.shape() || p.shape() != m.shape() {
            return Err(TrainError::Shape(name));
        }
        adam_update(
            p.data_mut(),
            g.data(),
            m.data_mut(),
            v.data_mut(),
            t,
            lr,
            hyper,
        );
    }
    Ok(())
}

/// Rescales gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_gradients(grads: &mut Ccead<Tensor>, max_norm: f64) -> f64 {
    let mut sq = 0.0;
    grads.visit(&mut |_, g| sq += g.norm_sq());
    let norm = sq.sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let k = max_norm / norm;
        grads.visit_mut(&mut |_, g| g.scale_in_place(k));
    }
    norm
}
