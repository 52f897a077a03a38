use super::{ParamId, ParamStore, Tape, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 1e-3,
            betas: (0.9, 0.999),
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Adam with decoupled weight decay. Moments are kept per parameter, indexed
/// like the store they were created for.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub config: AdamWConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(config: AdamWConfig, store: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|(_, p)| vec![0.0; p.value.numel()]).collect();
        AdamW {
            config,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self, id: ParamId) -> &[f64] {
        &self.m[id.index()]
    }

    pub fn second_moment(&self, id: ParamId) -> &[f64] {
        &self.v[id.index()]
    }

    pub(crate) fn restore(&mut self, step: u64, m: Vec<Vec<f64>>, v: Vec<Vec<f64>>) {
        self.step = step;
        self.m = m;
        self.v = v;
    }

    /// One update over every trainable parameter, using `lr` for this step.
    pub fn step_with_lr(&mut self, store: &mut ParamStore, lr: f64) -> Result<()> {
        if lr < 0.0 || !lr.is_finite() {
            return Err(Error::Contract(format!("learning rate {lr} must be >= 0")));
        }
        if self.m.len() != store.len() {
            return Err(Error::Contract("optimizer built for a different parameter store".into()));
        }
        let trainable: Vec<ParamId> = store.ids().filter(|&id| store.is_trainable(id)).collect();
        if let Some(&id) = trainable.iter().find(|&&id| store.grad(id).is_none()) {
            return Err(Error::Contract(format!(
                "parameter {} has no gradient",
                store.param(id).name
            )));
        }
        self.step += 1;
        let (b1, b2) = self.config.betas;
        let bc1 = 1.0 - b1.powi(self.step as i32);
        let bc2 = 1.0 - b2.powi(self.step as i32);
        let wd = self.config.weight_decay;
        let eps = self.config.eps;
        for id in trainable {
            let k = id.index();
            let p = store.param_mut(id);
            let g = p.grad.as_deref().expect("checked above");
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for (((w, gi), mi), vi) in p.value.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = b1 * *mi + (1.0 - b1) * gi;
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *w -= lr * wd * *w;
                *w -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }

    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        if self.config.lr <= 0.0 {
            return Err(Error::Contract(format!("learning rate {} must be > 0", self.config.lr)));
        }
        let lr = self.config.lr;
        self.step_with_lr(store, lr)
    }
}

/// Zeroes gradients, records `f` on a fresh tape, backpropagates into the
/// store and applies one update at `lr`. Returns the loss value.
pub fn train_step<F>(store: &mut ParamStore, opt: &mut AdamW, lr: f64, f: F) -> Result<f64>
where
    F: FnOnce(&mut Tape, &ParamStore) -> Result<Var>,
{
    store.zero_grad();
    let mut tape = Tape::new();
    let loss = f(&mut tape, store)?;
    let value = tape.item(loss)?;
    if !value.is_finite() {
        return Err(Error::Contract(format!("non-finite training loss {value}")));
    }
    tape.backward_into(loss, store)?;
    opt.step_with_lr(store, lr)?;
    Ok(value)
}

/// Linear warmup from 0 over the first `ceil(ratio * total)` steps, then constant.
pub fn warmup_lr(base: f64, step: usize, total: usize, ratio: f64) -> f64 {
    let warm = (ratio * total as f64).ceil() as usize;
    if warm == 0 || step >= warm {
        base
    } else {
        base * step as f64 / warm as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn one_scalar(value: f64) -> (ParamStore, ParamId) {
        let mut s = ParamStore::new();
        let id = s.add("w", Tensor::vector(vec![value])).unwrap();
        (s, id)
    }

    #[test]
    fn zero_grad_no_decay_is_fixed_point() {
        let (mut s, id) = one_scalar(0.7);
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut opt = AdamW::new(cfg, &s);
        s.accumulate_grad(id, &[0.0]);
        opt.step(&mut s).unwrap();
        assert_eq!(s.value(id).data()[0], 0.7);
    }

    #[test]
    fn first_step_matches_hand_recurrence() {
        let (mut s, id) = one_scalar(0.0);
        let lr = 1e-2;
        let cfg = AdamWConfig {
            lr,
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut opt = AdamW::new(cfg, &s);
        s.accumulate_grad(id, &[1.0]);
        opt.step(&mut s).unwrap();
        // m1 = 0.1, v1 = 0.001; bias-corrected both equal 1.
        let m1: f64 = 0.1 / (1.0 - 0.9);
        let v1: f64 = 0.001 / (1.0 - 0.999);
        let expected = -lr * m1 / (v1.sqrt() + 1e-8);
        assert!((s.value(id).data()[0] - expected).abs() < 1e-15);
        assert!((s.value(id).data()[0] + lr).abs() < 1e-9);
    }

    #[test]
    fn second_moment_grows_on_repeat_steps() {
        let (mut s, id) = one_scalar(1.0);
        let mut opt = AdamW::new(AdamWConfig::default(), &s);
        s.accumulate_grad(id, &[0.5]);
        opt.step(&mut s).unwrap();
        let v1 = opt.second_moment(id)[0];
        opt.step(&mut s).unwrap();
        assert!(opt.second_moment(id)[0] > v1);
    }

    #[test]
    fn missing_grad_is_contract_error() {
        let (mut s, _) = one_scalar(1.0);
        let mut opt = AdamW::new(AdamWConfig::default(), &s);
        assert!(matches!(opt.step(&mut s), Err(Error::Contract(_))));
    }

    #[test]
    fn frozen_params_are_skipped() {
        let (mut s, id) = one_scalar(1.0);
        s.freeze_all();
        let mut opt = AdamW::new(AdamWConfig::default(), &s);
        opt.step(&mut s).unwrap();
        assert_eq!(s.value(id).data()[0], 1.0);
    }

    #[test]
    fn warmup_starts_at_zero_and_reaches_base() {
        assert_eq!(warmup_lr(1e-3, 0, 100, 0.3), 0.0);
        assert_eq!(warmup_lr(1e-3, 30, 100, 0.3), 1e-3);
        assert!(warmup_lr(1e-3, 15, 100, 0.3) < 1e-3);
    }
}
