//! Adam with decoupled weight decay, and learning-rate schedules.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

/// Adam hyperparameters. Betas and epsilon default to (0.9, 0.999, 1e-8).
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Decoupled weight decay: applied directly to parameters, scaled by
    /// the current learning rate, never routed through the moments.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.0,
        }
    }
}

impl AdamConfig {
    pub fn with_weight_decay(weight_decay: f64) -> Self {
        AdamConfig {
            weight_decay,
            ..Default::default()
        }
    }
}

/// Per-parameter first/second moments plus the shared step counter.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdamState {
    pub step_count: u64,
    pub first_moment: Vec<Vec<f64>>,
    pub second_moment: Vec<Vec<f64>>,
    pub config: AdamConfig,
}

impl AdamState {
    /// Fresh zeroed state for the given parameter list.
    pub fn new(params: &[&Tensor], config: AdamConfig) -> Self {
        AdamState {
            step_count: 0,
            first_moment: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            second_moment: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            config,
        }
    }

    /// One Adam step over all parameters. `grads[i] = None` means the
    /// parameter did not participate this step (frozen or unused); its
    /// moments and value are left untouched.
    ///
    /// A non-finite gradient aborts the step before any parameter moves.
    pub fn step(
        &mut self,
        params: &mut [&mut Tensor],
        grads: &[Option<&Tensor>],
        names: &[String],
        lr: f64,
    ) -> Result<()> {
        if params.len() != self.first_moment.len() || grads.len() != params.len() {
            return Err(Error::Config(format!(
                "optimizer state holds {} parameters, got {} params / {} grads",
                self.first_moment.len(),
                params.len(),
                grads.len()
            )));
        }
        for (i, (p, grad)) in params.iter().zip(grads).enumerate() {
            if let Some(grad) = grad {
                if grad.len() != p.len() {
                    return Err(Error::ShapeMismatch {
                        op: "adam_step",
                        lhs: p.shape().to_vec(),
                        rhs: grad.shape().to_vec(),
                    });
                }
                if !grad.is_finite() {
                    return Err(Error::NonFiniteGradient {
                        param: names.get(i).cloned().unwrap_or_else(|| format!("#{i}")),
                    });
                }
            }
        }

        self.step_count += 1;
        let t = self.step_count as i32;
        let AdamConfig {
            beta1,
            beta2,
            epsilon,
            weight_decay,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);

        for (i, param) in params.iter_mut().enumerate() {
            let Some(grad) = grads[i] else { continue };
            let m = &mut self.first_moment[i];
            let v = &mut self.second_moment[i];
            let p = param.data_mut();
            for j in 0..p.len() {
                let g = grad.data()[j];
                m[j] = beta1 * m[j] + (1.0 - beta1) * g;
                v[j] = beta2 * v[j] + (1.0 - beta2) * g * g;
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                p[j] -= lr * (m_hat / (v_hat.sqrt() + epsilon) + weight_decay * p[j]);
            }
        }
        Ok(())
    }
}

/// Learning-rate schedules.
///
/// Cosine and constant are pure functions of the step index; plateau is
/// stateful and driven by [`Schedule::observe`] with a monitored metric.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum Schedule {
    Constant {
        base_lr: f64,
    },
    /// `lr(step) = base * 0.5 * (1 + cos(pi * step / total))`, clamped
    /// outside `[0, total_steps]`.
    Cosine {
        base_lr: f64,
        total_steps: u64,
    },
    /// Multiply by `factor` after `patience` consecutive observations
    /// without improvement. Never increases.
    Plateau {
        base_lr: f64,
        factor: f64,
        patience: u32,
        #[serde(default)]
        state: PlateauState,
    },
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct PlateauState {
    pub current_lr: Option<f64>,
    pub best_metric: Option<f64>,
    pub bad_evals: u32,
    pub history: Vec<f64>,
}

impl Schedule {
    pub fn cosine(base_lr: f64, total_steps: u64) -> Self {
        Schedule::Cosine {
            base_lr,
            total_steps,
        }
    }

    pub fn plateau(base_lr: f64, factor: f64, patience: u32) -> Self {
        Schedule::Plateau {
            base_lr,
            factor,
            patience,
            state: PlateauState::default(),
        }
    }

    /// Learning rate at a step index (plateau returns its current rate).
    pub fn lr_at(&self, step: u64) -> f64 {
        match self {
            Schedule::Constant { base_lr } => *base_lr,
            Schedule::Cosine {
                base_lr,
                total_steps,
            } => {
                if *total_steps == 0 || step >= *total_steps {
                    return 0.0;
                }
                if step == 0 {
                    return *base_lr;
                }
                let frac = step as f64 / *total_steps as f64;
                base_lr * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
            }
            Schedule::Plateau { base_lr, state, .. } => state.current_lr.unwrap_or(*base_lr),
        }
    }

    /// Record a monitored metric (lower is better) and return the rate to
    /// use from now on. No-op for non-plateau schedules.
    pub fn observe(&mut self, metric: f64) -> f64 {
        match self {
            Schedule::Plateau {
                base_lr,
                factor,
                patience,
                state,
            } => {
                let lr = state.current_lr.get_or_insert(*base_lr);
                state.history.push(metric);
                match state.best_metric {
                    None => {
                        state.best_metric = Some(metric);
                        state.bad_evals = 0;
                    }
                    Some(best) if metric < best => {
                        state.best_metric = Some(metric);
                        state.bad_evals = 0;
                    }
                    Some(_) => {
                        state.bad_evals += 1;
                        if state.bad_evals >= *patience {
                            *lr *= *factor;
                            state.bad_evals = 0;
                        }
                    }
                }
                *lr
            }
            other => other.lr_at(0),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single_param(value: f64) -> Tensor {
        Tensor::new(vec![1], vec![value]).unwrap()
    }

    #[test]
    fn zero_lr_leaves_params_but_updates_moments() {
        let mut p = single_param(1.0);
        let mut state = AdamState::new(&[&p], AdamConfig::default());
        let g = single_param(2.0);
        state
            .step(&mut [&mut p], &[Some(&g)], &["w".into()], 0.0)
            .unwrap();
        assert_eq!(p.data()[0], 1.0);
        assert_eq!(state.step_count, 1);
        assert!((state.first_moment[0][0] - 0.2).abs() < 1e-15);
        assert!((state.second_moment[0][0] - 0.004).abs() < 1e-15);
    }

    #[test]
    fn first_step_matches_hand_computed_update() {
        // bias-corrected first step: m_hat = g, v_hat = g^2,
        // delta = lr * g / (|g| + eps) = 0.1 / (1 + 1e-8)
        let mut p = single_param(0.5);
        let mut state = AdamState::new(&[&p], AdamConfig::default());
        let g = single_param(1.0);
        state
            .step(&mut [&mut p], &[Some(&g)], &["w".into()], 0.1)
            .unwrap();
        let expected = 0.5 - 0.1 * (1.0 / (1.0 + 1e-8));
        assert!((p.data()[0] - expected).abs() < 1e-15);
        assert!((0.5 - p.data()[0] - 0.1).abs() < 1e-8);
    }

    #[test]
    fn identical_params_and_grads_update_identically() {
        let mut a = single_param(0.3);
        let mut b = single_param(0.3);
        let mut state = AdamState::new(&[&a, &b], AdamConfig::default());
        let g = single_param(-0.7);
        for _ in 0..5 {
            state
                .step(
                    &mut [&mut a, &mut b],
                    &[Some(&g), Some(&g)],
                    &["a".into(), "b".into()],
                    0.01,
                )
                .unwrap();
        }
        assert_eq!(a.data()[0].to_bits(), b.data()[0].to_bits());
    }

    #[test]
    fn zero_grad_shrinks_by_weight_decay_only() {
        let mut p = single_param(2.0);
        let mut state = AdamState::new(&[&p], AdamConfig::with_weight_decay(0.1));
        let g = single_param(0.0);
        state
            .step(&mut [&mut p], &[Some(&g)], &["w".into()], 0.5)
            .unwrap();
        // m_hat = 0 so the moment term vanishes; only decay acts
        assert!((p.data()[0] - (2.0 - 0.5 * 0.1 * 2.0)).abs() < 1e-15);
    }

    #[test]
    fn nan_gradient_aborts_without_touching_params() {
        let mut p = single_param(1.0);
        let mut state = AdamState::new(&[&p], AdamConfig::default());
        let g = single_param(f64::NAN);
        let err = state
            .step(&mut [&mut p], &[Some(&g)], &["enc.w".into()], 0.1)
            .unwrap_err();
        assert!(err.to_string().contains("enc.w"));
        assert_eq!(p.data()[0], 1.0);
        assert_eq!(state.step_count, 0);
    }

    #[test]
    fn cosine_endpoint_identities() {
        let s = Schedule::cosine(0.2, 100);
        assert_eq!(s.lr_at(0), 0.2);
        assert_eq!(s.lr_at(100), 0.0);
        assert!((s.lr_at(50) - 0.1).abs() < 1e-15);
        assert_eq!(s.lr_at(1000), 0.0); // clamped
    }

    #[test]
    fn plateau_halves_after_patience_without_improvement() {
        let mut s = Schedule::plateau(1e-4, 0.5, 3);
        // first observation seeds the best metric, then three flat evals
        assert_eq!(s.observe(1.0), 1e-4);
        assert_eq!(s.observe(1.0), 1e-4);
        assert_eq!(s.observe(1.0), 1e-4);
        assert_eq!(s.observe(1.0), 5e-5);
    }

    #[test]
    fn plateau_resets_on_improvement_and_never_increases() {
        let mut s = Schedule::plateau(1e-4, 0.5, 2);
        s.observe(1.0);
        s.observe(1.2);
        assert_eq!(s.observe(0.9), 1e-4); // improvement resets the counter
        s.observe(0.95);
        let lr = s.observe(0.95);
        assert_eq!(lr, 5e-5);
        // every subsequent lr is <= the previous one
        let mut prev = lr;
        for _ in 0..10 {
            let next = s.observe(1.0);
            assert!(next <= prev);
            prev = next;
        }
    }
}
