//! Adam with bias correction.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct AdamState {
    pub first_moment: Vec<Tensor>,
    pub second_moment: Vec<Tensor>,
    pub step_count: u64,
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl AdamState {
    /// Fresh state with zero moments shaped like `params`.
    pub fn new(params: &[Tensor], lr: f32) -> Self {
        Self {
            first_moment: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            second_moment: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            step_count: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One Adam update of `params` in place.
pub fn adam_step(params: &mut [Tensor], grads: &[Tensor], state: &mut AdamState) -> Result<()> {
    if params.len() != grads.len()
        || params.len() != state.first_moment.len()
        || params.len() != state.second_moment.len()
    {
        return Err(Error::Shape(format!(
            "adam: {} params, {} grads, {} moments",
            params.len(),
            grads.len(),
            state.first_moment.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape()
            || p.shape() != state.first_moment[i].shape()
            || p.shape() != state.second_moment[i].shape()
        {
            return Err(Error::Shape(format!(
                "adam: parameter {i} has shape {:?}, gradient {:?}",
                p.shape(),
                g.shape()
            )));
        }
        if !g.all_finite() {
            return Err(Error::NonFinite(format!("adam gradient {i}")));
        }
    }

    state.step_count += 1;
    let t = state.step_count as i32;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let m = state.first_moment[i].data_mut();
        let v = state.second_moment[i].data_mut();
        for (((pv, &gv), mv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
            *mv = b1 * *mv + (1.0 - b1) * gv;
            *vv = b2 * *vv + (1.0 - b2) * gv * gv;
            let mhat = *mv / c1;
            let vhat = *vv / c2;
            *pv -= state.lr * mhat / (vhat.sqrt() + state.eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Scalar Adam written out longhand in f64.
    fn reference(grads: &[f64], lr: f64) -> f64 {
        let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8f64);
        let (mut p, mut m, mut v) = (0.0f64, 0.0f64, 0.0f64);
        for (k, g) in grads.iter().enumerate() {
            let t = (k + 1) as i32;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            p -= lr * (m / (1.0 - b1.powi(t))) / ((v / (1.0 - b2.powi(t))).sqrt() + eps);
        }
        p
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut params = vec![Tensor::from_vec(vec![0.5, -2.0])];
        let mut st = AdamState::new(&params, 1e-3);
        st.second_moment[0] = Tensor::from_vec(vec![0.3, 0.1]);
        st.step_count = 4;
        adam_step(&mut params, &[Tensor::zeros(&[2])], &mut st).unwrap();
        assert_eq!(params[0].data(), &[0.5, -2.0]);
        assert_eq!(st.step_count, 5);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut params = vec![Tensor::scalar(0.0)];
        let mut st = AdamState::new(&params, 1e-4);
        adam_step(&mut params, &[Tensor::scalar(1.0)], &mut st).unwrap();
        assert!((params[0].item() + 1e-4).abs() < 1e-9);
    }

    #[test]
    fn successive_steps_follow_reference() {
        let grads = [1.0, 1.0, -0.5, 2.0, 0.25];
        let mut params = vec![Tensor::scalar(0.0)];
        let mut st = AdamState::new(&params, 1e-2);
        for g in grads {
            adam_step(&mut params, &[Tensor::scalar(g as f32)], &mut st).unwrap();
        }
        let expect = reference(&grads, 1e-2);
        assert!((params[0].item() as f64 - expect).abs() < 1e-6);
        // two identical steps differ from the single step only through the moments
        let mut two = vec![Tensor::scalar(0.0)];
        let mut st2 = AdamState::new(&two, 1e-2);
        adam_step(&mut two, &[Tensor::scalar(1.0)], &mut st2).unwrap();
        adam_step(&mut two, &[Tensor::scalar(1.0)], &mut st2).unwrap();
        assert!((two[0].item() as f64 - reference(&[1.0, 1.0], 1e-2)).abs() < 1e-7);
    }

    #[test]
    fn rejects_mismatch_and_nan() {
        let mut params = vec![Tensor::zeros(&[2])];
        let mut st = AdamState::new(&params, 1e-3);
        assert!(adam_step(&mut params, &[Tensor::zeros(&[3])], &mut st).is_err());
        assert!(adam_step(&mut params, &[Tensor::from_vec(vec![f32::NAN, 0.0])], &mut st).is_err());
        assert_eq!(st.step_count, 0);
    }
}
