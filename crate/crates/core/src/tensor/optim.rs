use super::{ParamGroup, ParamStore};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    /// Multiplier applied to the learning rate of [`ParamGroup::Slow`] parameters.
    pub slow_lr_mult: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 1e-4,
            slow_lr_mult: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

/// First/second moment buffers and the step counter.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamWState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

/// One decoupled-weight-decay Adam update of a single parameter tensor.
///
/// `step` is the 1-based index of this update (used for bias correction).
#[allow(clippy::too_many_arguments)]
pub fn adamw_update(
    param: &mut [f64],
    grad: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    step: u64,
    lr: f64,
    cfg: &AdamWConfig,
) {
    let bc1 = 1.0 - cfg.beta1.powi(step as i32);
    let bc2 = 1.0 - cfg.beta2.powi(step as i32);
    for i in 0..param.len() {
        let g = grad[i];
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
        let mhat = m[i] / bc1;
        let vhat = v[i] / bc2;
        param[i] -= lr * (mhat / (vhat.sqrt() + cfg.eps) + cfg.weight_decay * param[i]);
    }
}

#[derive(Clone, Debug)]
pub struct AdamW {
    pub config: AdamWConfig,
    pub state: AdamWState,
}

impl AdamW {
    pub fn new(config: AdamWConfig, store: &ParamStore) -> Result<Self> {
        if !(config.lr > 0.0) || !(config.slow_lr_mult > 0.0) {
            return Err(Error::Config(format!(
                "learning rate must be positive (lr = {}, slow multiplier = {})",
                config.lr, config.slow_lr_mult
            )));
        }
        let zeros: Vec<Vec<f64>> = store.ids().map(|id| vec![0.0; store.get(id).numel()]).collect();
        Ok(AdamW {
            config,
            state: AdamWState {
                step: 0,
                m: zeros.clone(),
                v: zeros,
            },
        })
    }

    /// Applies one update with every group's learning rate scaled by `lr_scale`.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Vec<f64>], lr_scale: f64) -> Result<()> {
        if grads.len() != store.len() || self.state.m.len() != store.len() {
            return Err(Error::invalid(
                "adamw_step",
                format!("{} gradients for {} parameters", grads.len(), store.len()),
            ));
        }
        self.state.step += 1;
        let ids: Vec<_> = store.ids().collect();
        for (i, id) in ids.into_iter().enumerate() {
            let lr = match store.group(id) {
                ParamGroup::Base => self.config.lr,
                ParamGroup::Slow => self.config.lr * self.config.slow_lr_mult,
            } * lr_scale;
            let p = store.get_mut(id).data_mut();
            if grads[i].len() != p.len() || self.state.m[i].len() != p.len() {
                return Err(Error::invalid("adamw_step", "moment/parameter shape mismatch"));
            }
            adamw_update(
                p,
                &grads[i],
                &mut self.state.m[i],
                &mut self.state.v[i],
                self.state.step,
                lr,
                &self.config,
            );
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn cfg(wd: f64) -> AdamWConfig {
        AdamWConfig {
            lr: 0.1,
            weight_decay: wd,
            ..AdamWConfig::default()
        }
    }

    #[test]
    fn zero_gradient_zero_decay_is_noop() {
        let mut p = [1.5, -2.0];
        let (mut m, mut v) = ([0.0; 2], [0.0; 2]);
        adamw_update(&mut p, &[0.0, 0.0], &mut m, &mut v, 1, 0.1, &cfg(0.0));
        assert_eq!(p, [1.5, -2.0]);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = [1.0];
        let (mut m, mut v) = ([0.0], [0.0]);
        adamw_update(&mut p, &[1.0], &mut m, &mut v, 1, 0.1, &cfg(0.0));
        assert!((p[0] - 0.9).abs() < 1e-6, "{}", p[0]);
    }

    #[test]
    fn decay_is_decoupled() {
        let mut p = [1.0];
        let (mut m, mut v) = ([0.0], [0.0]);
        adamw_update(&mut p, &[0.0], &mut m, &mut v, 1, 0.1, &cfg(0.1));
        assert!((p[0] - 0.99).abs() < 1e-15);
    }

    #[test]
    fn nonpositive_lr_is_config_error() {
        let store = ParamStore::new();
        let err = AdamW::new(AdamWConfig { lr: 0.0, ..AdamWConfig::default() }, &store).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn slow_group_uses_scaled_lr() {
        let mut store = ParamStore::new();
        let a = store.add("a", Tensor::from_vec(vec![1.0]), ParamGroup::Base);
        let b = store.add("b", Tensor::from_vec(vec![1.0]), ParamGroup::Slow);
        let mut opt = AdamW::new(cfg(0.0), &store).unwrap();
        opt.step(&mut store, &[vec![1.0], vec![1.0]], 1.0).unwrap();
        assert!((store.get(a).data()[0] - 0.9).abs() < 1e-6);
        assert!((store.get(b).data()[0] - 0.99).abs() < 1e-6);
    }
}
