//! Bias-corrected ADAM updates over named parameter lists.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// First/second moment accumulators for one parameter list.
#[derive(Clone, Debug)]
pub struct AdamState<T> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub step: u64,
    pub beta1: T,
    pub beta2: T,
    pub epsilon: T,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &[Tensor<T>]) -> Self {
        AdamState {
            m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            step: 0,
            beta1: T::of_f64(0.9),
            beta2: T::of_f64(0.999),
            epsilon: T::of_f64(1e-8),
        }
    }
}

/// One ADAM update. Gradients must be finite; a NaN/Inf gradient aborts the
/// update before any parameter is touched.
pub fn adam_step<T: Scalar>(
    params: &mut [Tensor<T>],
    grads: &[Tensor<T>],
    state: &mut AdamState<T>,
    lr: T,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::Shape(format!(
            "adam: {} params, {} grads, {} moment slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (p, g) in params.iter().zip(grads) {
        if p.shape() != g.shape() {
            return Err(Error::Shape(format!(
                "adam: parameter {:?} vs gradient {:?}",
                p.shape(),
                g.shape()
            )));
        }
        g.check_finite("gradient in adam_step")?;
    }

    state.step += 1;
    let t = state.step as i32;
    let one = T::one();
    let bc1 = one - state.beta1.powi(t);
    let bc2 = one - state.beta2.powi(t);
    let (b1, b2, eps) = (state.beta1, state.beta2, state.epsilon);

    for ((p, g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        let pd = p.data_mut();
        let md = m.data_mut();
        let vd = v.data_mut();
        for ((pe, &ge), (me, ve)) in pd.iter_mut().zip(g.data()).zip(md.iter_mut().zip(vd.iter_mut())) {
            *me = b1 * *me + (one - b1) * ge;
            *ve = b2 * *ve + (one - b2) * ge * ge;
            let m_hat = *me / bc1;
            let v_hat = *ve / bc2;
            *pe = *pe - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Scales all gradients in place so their joint L2 norm does not exceed
/// `max_norm`. Returns the pre-clip norm.
pub fn clip_global_l2<T: Scalar>(grads: &mut [Tensor<T>], max_norm: T) -> T {
    let mut sq = T::zero();
    for g in grads.iter() {
        for &v in g.data() {
            sq = v.mul_add(v, sq);
        }
    }
    let norm = sq.sqrt();
    if norm > max_norm && norm > T::zero() {
        let scale = max_norm / norm;
        for g in grads.iter_mut() {
            for v in g.data_mut() {
                *v *= scale;
            }
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params_bit_identical() {
        let mut params = vec![Tensor::<f32>::from_vec(vec![3], vec![1.5, -0.25, 0.0]).unwrap()];
        let before = params[0].clone();
        let grads = vec![Tensor::<f32>::zeros(&[3])];
        let mut st = AdamState::new(&params);
        adam_step(&mut params, &grads, &mut st, 1e-4).unwrap();
        assert_eq!(params[0].data(), before.data());
        assert_eq!(st.step, 1);
    }

    #[test]
    fn first_step_closed_form() {
        // param 1.0, grad 0.5, fresh state: m_hat/sqrt(v_hat) collapses to
        // sign(g), so the first update is lr * 0.5 / (0.5 + eps).
        let mut params = vec![Tensor::<f64>::scalar(1.0)];
        let grads = vec![Tensor::<f64>::scalar(0.5)];
        let mut st = AdamState::new(&params);
        adam_step(&mut params, &grads, &mut st, 1e-4).unwrap();
        let expected = 1.0 - 1e-4 * (0.5 / (0.5 + 1e-8));
        assert!((params[0].data()[0] - expected).abs() < 1e-12);
    }

    #[test]
    fn sign_symmetric_updates() {
        let mut pa = vec![Tensor::<f64>::scalar(0.0)];
        let mut pb = vec![Tensor::<f64>::scalar(0.0)];
        let ga = vec![Tensor::<f64>::scalar(0.7)];
        let gb = vec![Tensor::<f64>::scalar(-0.7)];
        let mut sa = AdamState::new(&pa);
        let mut sb = AdamState::new(&pb);
        adam_step(&mut pa, &ga, &mut sa, 1e-3).unwrap();
        adam_step(&mut pb, &gb, &mut sb, 1e-3).unwrap();
        assert_eq!(pa[0].data()[0], -pb[0].data()[0]);
    }

    #[test]
    fn nan_gradient_aborts() {
        let mut params = vec![Tensor::<f32>::scalar(1.0)];
        let grads = vec![Tensor::<f32>::scalar(f32::NAN)];
        let mut st = AdamState::new(&params);
        assert!(adam_step(&mut params, &grads, &mut st, 1e-4).is_err());
        // untouched on failure
        assert_eq!(params[0].data()[0], 1.0);
        assert_eq!(st.step, 0);
    }

    #[test]
    fn clip_rescales_only_above_threshold() {
        let mut grads = vec![Tensor::<f64>::from_vec(vec![2], vec![3.0, 4.0]).unwrap()];
        let norm = clip_global_l2(&mut grads, 10.0);
        assert!((norm - 5.0).abs() < 1e-12);
        assert_eq!(grads[0].data(), &[3.0, 4.0]);
        clip_global_l2(&mut grads, 2.5);
        assert!((grads[0].data()[0] - 1.5).abs() < 1e-12);
        assert!((grads[0].data()[1] - 2.0).abs() < 1e-12);
    }
}
