//! Adadelta: per-parameter adaptive steps with no global learning rate.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const DEFAULT_RHO: f64 = 0.9;
pub const DEFAULT_EPS: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct AdadeltaState<T> {
    /// Running average of squared gradients.
    pub sq_grad: Tensor<T>,
    /// Running average of squared updates.
    pub sq_update: Tensor<T>,
    pub rho: f64,
    pub eps: f64,
}

impl<T: Scalar> AdadeltaState<T> {
    pub fn new(shape: &[usize]) -> Self {
        Self::with_constants(shape, DEFAULT_RHO, DEFAULT_EPS)
    }

    pub fn with_constants(shape: &[usize], rho: f64, eps: f64) -> Self {
        Self {
            sq_grad: Tensor::zeros(shape),
            sq_update: Tensor::zeros(shape),
            rho,
            eps,
        }
    }
}

/// Applies one Adadelta update in place.
///
/// ```text
/// E[g²]  ← ρ E[g²] + (1−ρ) g²
/// Δ      = −√(E[Δ²] + ε) / √(E[g²] + ε) · g
/// E[Δ²]  ← ρ E[Δ²] + (1−ρ) Δ²
/// x      ← x + Δ
/// ```
pub fn adadelta_step<T: Scalar>(param: &mut Tensor<T>, grad: &Tensor<T>, state: &mut AdadeltaState<T>) -> Result<()> {
    param.check_same_shape(grad, "adadelta_step")?;
    param.check_same_shape(&state.sq_grad, "adadelta_step")?;
    param.check_same_shape(&state.sq_update, "adadelta_step")?;
    if let Some(i) = grad.data().iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFinite {
            what: "gradient".into(),
            detail: format!("entry {i} of {} is {}", grad.len(), grad.data()[i]),
        });
    }
    let rho = T::of(state.rho);
    let one_minus = T::one() - rho;
    let eps = T::of(state.eps);
    let params = param.data_mut();
    let acc_g = state.sq_grad.data_mut();
    let acc_u = state.sq_update.data_mut();
    for i in 0..params.len() {
        let g = grad.data()[i];
        acc_g[i] = rho * acc_g[i] + one_minus * g * g;
        let update = -((acc_u[i] + eps).sqrt() / (acc_g[i] + eps).sqrt()) * g;
        acc_u[i] = rho * acc_u[i] + one_minus * update * update;
        params[i] += update;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_param_and_decays_accumulators() {
        let mut p = Tensor::new(&[2], vec![1.0f64, -2.0]).unwrap();
        let mut st = AdadeltaState::new(&[2]);
        st.sq_grad = Tensor::new(&[2], vec![0.5, 0.25]).unwrap();
        st.sq_update = Tensor::new(&[2], vec![0.1, 0.2]).unwrap();
        adadelta_step(&mut p, &Tensor::zeros(&[2]), &mut st).unwrap();
        assert_eq!(p.data(), &[1.0, -2.0]);
        assert!((st.sq_grad.data()[0] - 0.45).abs() < 1e-15);
        assert!((st.sq_update.data()[1] - 0.18).abs() < 1e-15);
    }

    #[test]
    fn first_step_from_zero_state() {
        // |Δ| = √ε / √(ε + (1−ρ) g²) · |g|
        for &g in &[0.3f64, -2.0, 1e-4] {
            let mut p = Tensor::new(&[1], vec![0.0]).unwrap();
            let mut st = AdadeltaState::new(&[1]);
            adadelta_step(&mut p, &Tensor::new(&[1], vec![g]).unwrap(), &mut st).unwrap();
            let expect = -(1e-6f64).sqrt() / (1e-6 + 0.1 * g * g).sqrt() * g;
            assert!((p.data()[0] - expect).abs() <= 1e-15 * expect.abs().max(1e-12), "g={g}");
        }
    }

    #[test]
    fn constant_gradient_moves_monotonically_against_it() {
        for &g in &[0.5f64, -0.5] {
            let mut p = Tensor::new(&[1], vec![0.0]).unwrap();
            let mut st = AdadeltaState::new(&[1]);
            let grad = Tensor::new(&[1], vec![g]).unwrap();
            let mut prev = 0.0;
            for _ in 0..100 {
                adadelta_step(&mut p, &grad, &mut st).unwrap();
                let x = p.data()[0];
                assert!((x - prev) * g < 0.0);
                prev = x;
            }
            assert!(st.sq_grad.data()[0] >= 0.0 && st.sq_update.data()[0] >= 0.0);
        }
    }

    #[test]
    fn non_finite_gradient_aborts() {
        let mut p = Tensor::new(&[2], vec![0.0f32, 0.0]).unwrap();
        let mut st = AdadeltaState::new(&[2]);
        let err = adadelta_step(&mut p, &Tensor::new(&[2], vec![0.0, f32::NAN]).unwrap(), &mut st).unwrap_err();
        assert!(matches!(err, Error::NonFinite { .. }));
        assert_eq!(p.data(), &[0.0, 0.0]);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut p = Tensor::<f32>::zeros(&[2]);
        let mut st = AdadeltaState::new(&[3]);
        assert!(adadelta_step(&mut p, &Tensor::zeros(&[2]), &mut st).is_err());
    }
}
