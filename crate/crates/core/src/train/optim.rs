//! Adam with bias correction.

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::autodiff::{GradientMap, ParamTable};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// First and second moments per parameter, and the step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub t: u64,
    pub m: IndexMap<String, Tensor<T>>,
    pub v: IndexMap<String, Tensor<T>>,
}

impl<T> Default for AdamState<T> {
    fn default() -> Self {
        AdamState {
            t: 0,
            m: IndexMap::new(),
            v: IndexMap::new(),
        }
    }
}

/// One Adam update of every trainable parameter that has a gradient.
///
/// Gradients are checked before anything is modified, so a non-finite
/// gradient leaves parameters and state untouched.
pub fn adam_step<T: Scalar>(
    params: &mut ParamTable<T>,
    grads: &GradientMap<T>,
    state: &mut AdamState<T>,
    lr: f64,
    cfg: &AdamConfig,
) -> Result<()> {
    for (name, g) in grads.iter() {
        if !g.is_finite() {
            return Err(Error::NonFiniteGradient(name.to_string()));
        }
        let p = params.get(name).ok_or_else(|| Error::MissingParam(name.to_string()))?;
        if p.shape() != g.shape() {
            return Err(crate::error::shape_err(name, format!("gradient {:?} vs parameter {:?}", g.shape(), p.shape())));
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (name, g) in grads.iter() {
        if !params.param(name).is_some_and(|p| p.trainable) {
            continue;
        }
        let m = state.m.entry(name.to_string()).or_insert_with(|| Tensor::zeros(g.shape().to_vec()));
        let v = state.v.entry(name.to_string()).or_insert_with(|| Tensor::zeros(g.shape().to_vec()));
        let theta = params.get_mut(name).expect("checked above");
        for (((th, mi), vi), &gi) in theta
            .data_mut()
            .iter_mut()
            .zip(m.data_mut())
            .zip(v.data_mut())
            .zip(g.data())
        {
            let gf = gi.as_f64();
            let mf = cfg.beta1 * mi.as_f64() + (1.0 - cfg.beta1) * gf;
            let vf = cfg.beta2 * vi.as_f64() + (1.0 - cfg.beta2) * gf * gf;
            *mi = T::lit(mf);
            *vi = T::lit(vf);
            let step = lr * (mf / c1) / ((vf / c2).sqrt() + cfg.epsilon);
            *th = T::lit(th.as_f64() - step);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(name: &str, v: f64) -> (ParamTable<f64>, GradientMap<f64>) {
        let mut p = ParamTable::new();
        p.insert(name, Tensor::from_f64([1], &[1.0]).unwrap(), true);
        let g = [(name.to_string(), Tensor::from_f64([1], &[v]).unwrap())].into_iter().collect();
        (p, g)
    }

    #[test]
    fn first_step_moves_by_lr() {
        let (mut p, g) = single("w", 4.0);
        let mut s = AdamState::default();
        adam_step(&mut p, &g, &mut s, 0.1, &AdamConfig::default()).unwrap();
        let moved = 1.0 - p.get("w").unwrap().data()[0];
        assert!((moved - 0.1 * 4.0 / (4.0 + 1e-8)).abs() < 1e-15, "{moved}");
        assert_eq!(s.t, 1);
    }

    #[test]
    fn zero_gradient_and_zero_lr_leave_params() {
        for (g, lr) in [(0.0, 0.1), (3.0, 0.0)] {
            let (mut p, grads) = single("w", g);
            let before = p.clone();
            adam_step(&mut p, &grads, &mut AdamState::default(), lr, &AdamConfig::default()).unwrap();
            assert_eq!(p, before);
        }
    }

    #[test]
    fn nan_gradient_names_the_parameter() {
        let (mut p, g) = single("encoder.block1.conv1.kernel", f64::NAN);
        let before = p.clone();
        let err = adam_step(&mut p, &g, &mut AdamState::default(), 0.1, &AdamConfig::default()).unwrap_err();
        assert!(err.to_string().contains("encoder.block1.conv1.kernel"));
        assert_eq!(p, before);
    }

    #[test]
    fn quadratic_loss_decreases_monotonically() {
        // L = (w - 3)^2 from w = 0
        let mut p = ParamTable::new();
        p.insert("w", Tensor::from_f64([1], &[0.0]).unwrap(), true);
        let mut s = AdamState::default();
        let loss = |w: f64| (w - 3.0).powi(2);
        let mut last = loss(0.0);
        for _ in 0..20 {
            let w = p.get("w").unwrap().data()[0];
            let g: GradientMap<f64> = [("w".to_string(), Tensor::from_f64([1], &[2.0 * (w - 3.0)]).unwrap())].into_iter().collect();
            adam_step(&mut p, &g, &mut s, 0.1, &AdamConfig::default()).unwrap();
            let now = loss(p.get("w").unwrap().data()[0]);
            assert!(now < last);
            last = now;
        }
    }

    #[test]
    fn frozen_parameters_are_skipped() {
        let (mut p, g) = single("w", 1.0);
        p.set_trainable("w", false).unwrap();
        adam_step(&mut p, &g, &mut AdamState::default(), 0.1, &AdamConfig::default()).unwrap();
        assert_eq!(p.get("w").unwrap().data(), &[1.0]);
    }
}
