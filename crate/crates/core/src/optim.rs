//! AdamW with decoupled weight decay, and the step-decay learning-rate
//! schedule.

use serde::{Deserialize, Serialize};

use crate::encoder::Decay;
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-2,
        }
    }
}

/// First and second moment buffers, one per parameter tensor.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct OptimizerState<T: Real = f32> {
    pub step: u64,
    pub first: Vec<Vec<T>>,
    pub second: Vec<Vec<T>>,
}

impl<T: Real> OptimizerState<T> {
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Tensor<T>>) -> Self {
        let (first, second) = params
            .into_iter()
            .map(|t| (vec![T::zero(); t.numel()], vec![T::zero(); t.numel()]))
            .unzip();
        Self {
            step: 0,
            first,
            second,
        }
    }
}

/// One AdamW update. A missing gradient counts as zero; decay still applies.
///
/// `θ ← θ − lr·wd·θ − lr·m̂/(√v̂ + eps)` where the decay term uses the
/// pre-update `θ` and is skipped for [`Decay::Exempt`] parameters.
pub fn adamw_step<T: Real>(
    params: &mut [&mut Tensor<T>],
    grads: &[Option<&[T]>],
    decay: &[Decay],
    state: &mut OptimizerState<T>,
    lr: f64,
    cfg: &AdamWConfig,
) -> Result<()> {
    let n = params.len();
    if grads.len() != n || decay.len() != n || state.first.len() != n || state.second.len() != n {
        return Err(Error::shape(
            "adamw_step",
            [n],
            [grads.len(), decay.len(), state.first.len()],
        ));
    }
    if lr <= 0.0 {
        return Err(Error::Config(format!("learning rate must be > 0, got {lr}")));
    }
    for (i, p) in params.iter().enumerate() {
        let len = p.numel();
        if state.first[i].len() != len
            || state.second[i].len() != len
            || grads[i].map_or(false, |g| g.len() != len)
        {
            return Err(Error::shape(
                "adamw_step",
                p.shape(),
                [grads[i].map_or(0, <[T]>::len)],
            ));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (i, p) in params.iter_mut().enumerate() {
        let wd = match decay[i] {
            Decay::Apply => cfg.weight_decay,
            Decay::Exempt => 0.0,
        };
        let (m, v) = (&mut state.first[i], &mut state.second[i]);
        let g = grads[i];
        for (j, theta) in p.values_mut().iter_mut().enumerate() {
            let gj = g.map_or(0.0, |g| g[j].to64());
            let mj = cfg.beta1 * m[j].to64() + (1.0 - cfg.beta1) * gj;
            let vj = cfg.beta2 * v[j].to64() + (1.0 - cfg.beta2) * gj * gj;
            m[j] = T::of(mj);
            v[j] = T::of(vj);
            let th = theta.to64();
            let update = (mj / bc1) / ((vj / bc2).sqrt() + cfg.eps);
            *theta = T::of(th - lr * wd * th - lr * update);
        }
    }
    Ok(())
}

/// `base_lr · factor^⌊epoch / interval⌋`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepDecay {
    pub base_lr: f64,
    pub factor: f64,
    pub interval: usize,
}

impl Default for StepDecay {
    fn default() -> Self {
        Self {
            base_lr: 1e-4,
            factor: 0.8,
            interval: 5,
        }
    }
}

pub fn lr_at_epoch(epoch: usize, schedule: &StepDecay) -> f64 {
    let k = epoch / schedule.interval.max(1);
    schedule.base_lr * schedule.factor.powi(k as i32)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(v: f64) -> Tensor<f64> {
        Tensor::from_f64([1], &[v]).unwrap()
    }

    #[test]
    fn zero_grad_no_decay_is_identity() {
        let mut p = scalar(0.7);
        let mut st = OptimizerState::new([&p]);
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let zero = [0.0];
        adamw_step(&mut [&mut p], &[Some(&zero)], &[Decay::Apply], &mut st, 0.1, &cfg).unwrap();
        assert_eq!(p.values(), &[0.7]);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn first_step_hand_computed() {
        // m = 0.1, v = 0.001; m̂ = 1, v̂ = 1 → θ' = 1 − 0.1·1/(1 + 1e-8)
        let mut p = scalar(1.0);
        let mut st = OptimizerState::new([&p]);
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let g = [1.0];
        adamw_step(&mut [&mut p], &[Some(&g)], &[Decay::Apply], &mut st, 0.1, &cfg).unwrap();
        let want = 1.0 - 0.1 / (1.0 + 1e-8);
        assert!((p.values()[0] - want).abs() < 1e-15);
    }

    #[test]
    fn decay_is_decoupled() {
        let mut p = scalar(2.0);
        let mut st = OptimizerState::new([&p]);
        let cfg = AdamWConfig {
            weight_decay: 0.01,
            ..Default::default()
        };
        adamw_step(&mut [&mut p], &[None], &[Decay::Apply], &mut st, 0.5, &cfg).unwrap();
        assert!((p.values()[0] - (2.0 - 0.5 * 0.01 * 2.0)).abs() < 1e-15);

        let mut q = scalar(2.0);
        let mut st = OptimizerState::new([&q]);
        adamw_step(&mut [&mut q], &[None], &[Decay::Exempt], &mut st, 0.5, &cfg).unwrap();
        assert_eq!(q.values(), &[2.0]);
    }

    #[test]
    fn rejects_misaligned_state() {
        let mut p = scalar(1.0);
        let mut st = OptimizerState::<f64>::new([]);
        assert!(adamw_step(&mut [&mut p], &[None], &[Decay::Apply], &mut st, 0.1, &Default::default()).is_err());
    }

    #[test]
    fn schedule_steps() {
        let s = StepDecay::default();
        for e in 0..5 {
            assert_eq!(lr_at_epoch(e, &s), 1e-4);
        }
        assert!((lr_at_epoch(5, &s) - 0.8e-4).abs() < 1e-18);
        assert!((lr_at_epoch(10, &s) - 0.64e-4).abs() < 1e-18);
    }
}
