//! AdamW with decoupled weight decay, global-norm clipping and the
//! warmup-then-cosine learning-rate schedule.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ParamKind;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub lr_max: f64,
    pub lr_min: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
}

impl LrSchedule {
    pub fn new(lr_max: f64, lr_min: f64, warmup_steps: u64, total_steps: u64) -> Result<Self> {
        let s = Self {
            lr_max,
            lr_min,
            warmup_steps,
            total_steps,
        };
        s.validate()?;
        Ok(s)
    }

    /// 4e-4 peak, 4e-5 floor, 2000 warmup steps.
    pub fn standard(total_steps: u64) -> Result<Self> {
        Self::new(4.0e-4, 4.0e-5, 2000, total_steps)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr_min >= 0.0 && self.lr_min <= self.lr_max && self.lr_max.is_finite()) {
            return Err(Error::Config(format!(
                "need 0 <= lr_min ({}) <= lr_max ({})",
                self.lr_min, self.lr_max
            )));
        }
        if self.total_steps <= self.warmup_steps {
            return Err(Error::Config(format!(
                "total_steps ({}) must exceed warmup_steps ({})",
                self.total_steps, self.warmup_steps
            )));
        }
        Ok(())
    }

    /// Linear from 0 during warmup, cosine down to `lr_min` afterwards.
    /// Steps past `total_steps` stay at `lr_min`.
    pub fn lr_at(&self, step: u64) -> f64 {
        if step < self.warmup_steps {
            return self.lr_max * step as f64 / self.warmup_steps as f64;
        }
        if step >= self.total_steps {
            return self.lr_min;
        }
        let progress =
            (step - self.warmup_steps) as f64 / (self.total_steps - self.warmup_steps) as f64;
        // Written from the top so that the warmup boundary returns lr_max exactly.
        self.lr_max - 0.5 * (self.lr_max - self.lr_min) * (1.0 - (PI * progress).cos())
    }
}

/// L2 norm over every gradient buffer, accumulated in f64.
pub fn global_norm(grads: &[Vec<f32>]) -> f64 {
    grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|&x| (x as f64) * (x as f64))
        .sum::<f64>()
        .sqrt()
}

/// Scales all gradients by `max_norm / norm` when the global norm exceeds
/// `max_norm`. Returns `(norm before clipping, applied scale)`.
pub fn clip_grad_norm(grads: &mut [Vec<f32>], max_norm: f64) -> Result<(f64, f64)> {
    let norm = global_norm(grads);
    if !norm.is_finite() {
        return Err(Error::Numerical {
            step: 0,
            lr: 0.0,
            grad_norm: norm,
            reason: "non-finite gradient".into(),
        });
    }
    if norm <= max_norm {
        return Ok((norm, 1.0));
    }
    // Rounding can leave the product a hair above the threshold; shave one
    // ulp off the scale until it is not.
    let mut scale = (max_norm / norm) as f32;
    loop {
        let clipped: f64 = grads
            .iter()
            .flat_map(|g| g.iter())
            .map(|&x| ((x * scale) as f64).powi(2))
            .sum::<f64>()
            .sqrt();
        if clipped <= max_norm {
            break;
        }
        scale = f32::from_bits(scale.to_bits() - 1);
    }
    for g in grads.iter_mut() {
        for x in g.iter_mut() {
            *x *= scale;
        }
    }
    Ok((norm, scale as f64))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
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
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWState {
    pub cfg: AdamWConfig,
    pub step: u64,
    #[serde(skip)]
    pub m: Vec<Vec<f32>>,
    #[serde(skip)]
    pub v: Vec<Vec<f32>>,
}

impl AdamWState {
    pub fn new(cfg: AdamWConfig, sizes: &[usize]) -> Self {
        Self {
            cfg,
            step: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    /// One update of every parameter. Gains (`ParamKind::NormGain`) are not
    /// decayed.
    pub fn step(
        &mut self,
        params: &mut [(ParamKind, &mut [f32])],
        grads: &[Vec<f32>],
        lr: f64,
    ) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.m.len() {
            return Err(Error::Contract(format!(
                "adamw: {} params, {} grads, {} moment buffers",
                params.len(),
                grads.len(),
                self.m.len()
            )));
        }
        for (i, ((_, p), g)) in params.iter().zip(grads).enumerate() {
            if p.len() != g.len() || p.len() != self.m[i].len() {
                return Err(Error::Contract(format!(
                    "adamw: tensor {i} has {} values, grad {}, state {}",
                    p.len(),
                    g.len(),
                    self.m[i].len()
                )));
            }
        }
        if lr.is_nan() || lr < 0.0 {
            return Err(Error::Contract(format!("negative learning rate {lr}")));
        }
        self.step += 1;
        let AdamWConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.cfg;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        let (b1, b2) = (beta1 as f32, beta2 as f32);
        for (i, ((kind, p), g)) in params.iter_mut().zip(grads).enumerate() {
            let decay = if *kind == ParamKind::NormGain {
                0.0
            } else {
                (lr * weight_decay) as f32
            };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..p.len() {
                m[j] = b1 * m[j] + (1.0 - b1) * g[j];
                v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
                let m_hat = m[j] as f64 / bc1;
                let v_hat = v[j] as f64 / bc2;
                let update = lr * m_hat / (v_hat.sqrt() + eps);
                p[j] = p[j] - decay * p[j] - update as f32;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn standard() -> LrSchedule {
        LrSchedule::standard(10_000).unwrap()
    }

    #[test]
    fn schedule_endpoints() {
        let s = standard();
        assert_eq!(s.lr_at(0), 0.0);
        assert_eq!(s.lr_at(2000), 4.0e-4);
        assert_eq!(s.lr_at(10_000), 4.0e-5);
        assert_eq!(s.lr_at(50_000), 4.0e-5);
        assert!((s.lr_at(6000) - 2.2e-4).abs() <= 1e-12);
        assert!((s.lr_at(1999) - 4.0e-4).abs() < 1e-6);
        assert!((s.lr_at(2001) - 4.0e-4).abs() < 1e-9);
    }

    #[test]
    fn schedule_rejects_bad_bounds() {
        assert!(LrSchedule::new(1e-4, 1e-3, 10, 100).is_err());
        assert!(LrSchedule::new(1e-3, 1e-4, 100, 100).is_err());
    }

    #[test]
    fn decay_is_monotone() {
        let s = standard();
        let mut prev = s.lr_at(2000);
        for step in 2001..=10_000 {
            let lr = s.lr_at(step);
            assert!(lr <= prev);
            assert!(lr >= s.lr_min && lr <= s.lr_max);
            prev = lr;
        }
    }

    #[test]
    fn clip_examples() {
        let mut g = vec![vec![3.0], vec![4.0]];
        let (norm, scale) = clip_grad_norm(&mut g, 1.0).unwrap();
        assert_eq!(norm, 5.0);
        assert!((scale - 0.2).abs() < 1e-6);
        assert!(global_norm(&g) <= 1.0);
        let mut g = vec![vec![0.3, 0.4]];
        let (norm, scale) = clip_grad_norm(&mut g, 1.0).unwrap();
        assert!((norm - 0.5).abs() < 1e-6);
        assert_eq!(scale, 1.0);
        assert_eq!(g, vec![vec![0.3, 0.4]]);
        let mut g = vec![vec![f32::NAN]];
        assert!(matches!(
            clip_grad_norm(&mut g, 1.0),
            Err(Error::Numerical { .. })
        ));
    }

    #[test]
    fn one_hand_executed_update() {
        let mut st = AdamWState::new(AdamWConfig::default(), &[1]);
        let mut p = vec![1.0f32];
        st.step(&mut [(ParamKind::Matrix, &mut p)], &[vec![1.0]], 0.1)
            .unwrap();
        assert!((p[0] - 0.89).abs() < 1e-6, "{}", p[0]);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn gains_are_not_decayed_and_zero_grad_is_noop() {
        let mut st = AdamWState::new(AdamWConfig::default(), &[2]);
        let mut p = vec![1.0f32, -2.0];
        st.step(&mut [(ParamKind::NormGain, &mut p)], &[vec![0.0, 0.0]], 0.1)
            .unwrap();
        assert_eq!(p, vec![1.0, -2.0]);
    }

    #[test]
    fn state_advances_between_identical_calls() {
        let mut st = AdamWState::new(AdamWConfig::default(), &[1]);
        let mut p = vec![1.0f32];
        let g = [vec![0.5]];
        st.step(&mut [(ParamKind::Matrix, &mut p)], &g, 0.1)
            .unwrap();
        let first = 1.0 - p[0];
        let before = p[0];
        st.step(&mut [(ParamKind::Matrix, &mut p)], &[vec![-0.5]], 0.1)
            .unwrap();
        assert_ne!(before - p[0], first);
    }

    #[test]
    fn shape_mismatch_is_contract_error() {
        let mut st = AdamWState::new(AdamWConfig::default(), &[2]);
        let mut p = vec![1.0f32];
        assert!(matches!(
            st.step(&mut [(ParamKind::Matrix, &mut p)], &[vec![1.0]], 0.1),
            Err(Error::Contract(_))
        ));
    }

    proptest! {
        #[test]
        fn clipped_norm_never_exceeds_threshold(
            grads in prop::collection::vec(prop::collection::vec(-100f32..100f32, 1..20), 1..6)
        ) {
            let mut g = grads;
            clip_grad_norm(&mut g, 1.0).unwrap();
            prop_assert!(global_norm(&g) <= 1.0 + 1e-6);
        }

        #[test]
        fn moves_against_gradient_sign(g in -10f32..10f32, steps in 1usize..5) {
            prop_assume!(g.abs() > 1e-3);
            let cfg = AdamWConfig { weight_decay: 0.0, ..Default::default() };
            let mut st = AdamWState::new(cfg, &[1]);
            let mut p = vec![0.0f32];
            for _ in 0..steps {
                st.step(&mut [(ParamKind::Matrix, &mut p)], &[vec![g]], 1e-2).unwrap();
            }
            prop_assert_eq!(p[0].signum(), -g.signum());
        }
    }
}
