//! Adam with bias correction, operating on flat parameter slices.

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamHyper {
    pub fn with_lr(lr: f64) -> Self {
        AdamHyper { lr, ..Default::default() }
    }
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First/second moment estimates plus the step counter for one parameter
/// tensor. Serialized into run state so resumed runs continue bit-exactly.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        AdamState { m: vec![0.0; len], v: vec![0.0; len], t: 0 }
    }
}

/// One Adam update in place. `param`, `grad` and the state buffers must all
/// have the same length.
pub fn adam_step(param: &mut [f64], grad: &[f64], state: &mut AdamState, hp: &AdamHyper) {
    assert_eq!(param.len(), grad.len(), "adam_step: param/grad length mismatch");
    assert_eq!(param.len(), state.m.len(), "adam_step: state length mismatch");
    state.t += 1;
    let b1t = 1.0 - hp.beta1.powi(state.t as i32);
    let b2t = 1.0 - hp.beta2.powi(state.t as i32);
    for i in 0..param.len() {
        let g = grad[i];
        state.m[i] = hp.beta1 * state.m[i] + (1.0 - hp.beta1) * g;
        state.v[i] = hp.beta2 * state.v[i] + (1.0 - hp.beta2) * g * g;
        let mhat = state.m[i] / b1t;
        let vhat = state.v[i] / b2t;
        param[i] -= hp.lr * mhat / (vhat.sqrt() + hp.eps);
    }
}

/// Per-tensor Adam states zipped against a model's canonical tensor order.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct Optimizer {
    pub states: Vec<AdamState>,
    pub lr: f64,
}

impl Optimizer {
    pub fn for_tensors(tensors: &[&crate::tensor::Tensor], lr: f64) -> Self {
        Optimizer { states: tensors.iter().map(|t| AdamState::new(t.len())).collect(), lr }
    }

    /// Apply one step to every parameter whose tape node received a gradient.
    /// `params` and `tids` follow the model's canonical tensor order.
    pub fn apply(
        &mut self,
        params: &mut [&mut crate::tensor::Tensor],
        tids: &[crate::tensor::Tid],
        grads: &mut crate::tensor::Grads,
    ) {
        let hp = AdamHyper::with_lr(self.lr);
        assert_eq!(params.len(), tids.len(), "optimizer: params/tids mismatch");
        assert_eq!(params.len(), self.states.len(), "optimizer: state count mismatch");
        for (i, p) in params.iter_mut().enumerate() {
            if let Some(g) = grads.take(tids[i]) {
                adam_step(p.data_mut(), &g, &mut self.states[i], &hp);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_matches_closed_form() {
        // At t = 1 bias correction makes mhat = g and vhat = g^2, so the update
        // is exactly lr * g / (|g| + eps) regardless of the gradient scale.
        let hp = AdamHyper::default();
        let mut p = vec![0.5, -1.0, 3.0];
        let g = vec![0.2, -4.0, 1e-3];
        let mut st = AdamState::new(3);
        let before = p.clone();
        adam_step(&mut p, &g, &mut st, &hp);
        for i in 0..3 {
            let want = before[i] - hp.lr * g[i] / (g[i].abs() + hp.eps);
            assert!((p[i] - want).abs() < 1e-12, "coord {i}: {} vs {}", p[i], want);
        }
        assert_eq!(st.t, 1);
    }

    #[test]
    fn descends_a_quadratic() {
        // f(w) = ||w||^2 has gradient 2w; 100 steps should shrink the norm a lot.
        let hp = AdamHyper::default();
        let mut w = vec![0.08, -0.05];
        let mut st = AdamState::new(2);
        let start: f64 = w.iter().map(|x| x * x).sum();
        for _ in 0..100 {
            let g: Vec<f64> = w.iter().map(|x| 2.0 * x).collect();
            adam_step(&mut w, &g, &mut st, &hp);
        }
        let end: f64 = w.iter().map(|x| x * x).sum();
        assert!(end < start * 0.05, "start {start} end {end}");
    }
}
