//! AdamW with decoupled weight decay and the cosine learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ModelParams;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamHyper {
    pub betas: [f64; 2],
    pub eps: f64,
    pub weight_decay: f64,
}

/// First and second moment estimates, keyed like the parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    /// Number of updates applied so far.
    pub step: u64,
    pub m: ModelParams<T>,
    pub v: ModelParams<T>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &ModelParams<T>) -> Self {
        let zeros = || {
            let mut z = ModelParams::default();
            for (k, t) in params.iter() {
                z.insert(k.clone(), Tensor::zeros(t.shape().to_vec()));
            }
            z
        };
        Self { step: 0, m: zeros(), v: zeros() }
    }
}

/// `lr_min + ½(lr_max − lr_min)(1 + cos(π·step/total))`.
pub fn cosine_lr(step: usize, total: usize, lr_max: f64, lr_min: f64) -> f64 {
    if total == 0 {
        return lr_max;
    }
    let t = step.min(total) as f64 / total as f64;
    lr_min + 0.5 * (lr_max - lr_min) * (1.0 + (std::f64::consts::PI * t).cos())
}

/// One AdamW update in place. Every parameter must have a gradient of the
/// same shape; `step_index` only labels errors.
pub fn adamw_step<T: Scalar>(
    params: &mut ModelParams<T>,
    grads: &ModelParams<T>,
    state: &mut AdamState<T>,
    lr: f64,
    hp: &AdamHyper,
    step_index: usize,
) -> Result<()> {
    let fail = |e: Error| e.at_step(step_index);
    for (name, g) in grads.iter() {
        if let Some(bad) = g.data().iter().position(|v| !v.is_finite()) {
            return Err(fail(Error::Data(format!("non-finite gradient in {name} at element {bad}"))));
        }
    }
    if grads.len() != params.len() {
        return Err(fail(Error::consistency(
            "adamw_step",
            format!("{} gradients for {} parameters", grads.len(), params.len()),
        )));
    }
    state.step += 1;
    let t = state.step as i32;
    let [b1, b2] = hp.betas;
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    let (b1, b2, eps) = (T::from_f64(b1), T::from_f64(b2), T::from_f64(hp.eps));
    let (one_b1, one_b2) = (T::ONE - b1, T::ONE - b2);
    let decay = T::from_f64(1.0 - lr * hp.weight_decay);
    let lr_t = T::from_f64(lr);
    let (c1, c2) = (T::from_f64(c1), T::from_f64(c2));
    for (name, p) in params.iter_mut() {
        let g = grads.require(name).map_err(fail)?;
        let m = state.m.get_mut(name).ok_or_else(|| fail(Error::Config(format!("no optimizer state for {name}"))))?;
        if g.shape() != p.shape() || m.shape() != p.shape() {
            return Err(fail(Error::dim("adamw_step", name.clone(), format!("{:?}", p.shape()), format!("{:?}", g.shape()))));
        }
        let m = m.data_mut();
        let v = state.v.get_mut(name).ok_or_else(|| fail(Error::Config(format!("no optimizer state for {name}"))))?;
        let v = v.data_mut();
        for (((p, &g), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
            *m = b1 * *m + one_b1 * g;
            *v = b2 * *v + one_b2 * g * g;
            let mhat = *m / c1;
            let vhat = *v / c2;
            *p = *p * decay - lr_t * (mhat / (vhat.sqrt() + eps));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_endpoints() {
        assert_eq!(cosine_lr(0, 200, 1e-4, 1e-6), 1e-4);
        assert!((cosine_lr(200, 200, 1e-4, 1e-6) - 1e-6).abs() < 1e-18);
        assert!((cosine_lr(100, 200, 1e-4, 1e-6) - (1e-4 + 1e-6) / 2.0).abs() < 1e-18);
    }

    fn single(v: f64) -> ModelParams<f64> {
        let mut p = ModelParams::default();
        p.insert("w", Tensor::new(vec![1], vec![v]).unwrap());
        p
    }

    #[test]
    fn first_step_moves_by_lr() {
        let hp = AdamHyper { betas: [0.9, 0.999], eps: 0.0, weight_decay: 0.0 };
        let mut p = single(1.0);
        let mut s = AdamState::new(&p);
        adamw_step(&mut p, &single(3.0), &mut s, 0.1, &hp, 0).unwrap();
        assert!((p.get("w").unwrap().data()[0] - 0.9).abs() < 1e-12);
    }

    #[test]
    fn zero_lr_is_identity_and_nan_fails() {
        let hp = AdamHyper { betas: [0.9, 0.95], eps: 1e-8, weight_decay: 0.05 };
        let mut p = single(0.3);
        let mut s = AdamState::new(&p);
        adamw_step(&mut p, &single(-2.0), &mut s, 0.0, &hp, 0).unwrap();
        assert_eq!(p, single(0.3));
        let err = adamw_step(&mut p, &single(f64::NAN), &mut s, 0.1, &hp, 7).unwrap_err();
        assert!(matches!(err, Error::Training { step: 7, .. }));
    }
}
