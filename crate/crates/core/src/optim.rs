//! SGD with momentum, L2 weight decay and step learning-rate schedules.

use crate::error::{DivergenceReport, Error, Result};
use crate::net::{Gradients, ParamKind, ParamRegistry};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// `(epoch, multiplier)`: from that epoch on the rate is multiplied.
    pub schedule: Vec<(usize, f64)>,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            lr: 5e-2,
            momentum: 0.9,
            weight_decay: 5e-4,
            schedule: vec![(100, 0.1), (150, 0.1), (180, 0.1)],
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must be in [0, 1), got {}", self.momentum)));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config(format!(
                "weight decay must be non-negative, got {}",
                self.weight_decay
            )));
        }
        if self.schedule.windows(2).any(|w| w[0].0 >= w[1].0) {
            return Err(Error::Config("schedule boundaries must be strictly increasing".into()));
        }
        Ok(())
    }

    /// Base rate times every multiplier whose boundary has been reached.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.schedule
            .iter()
            .filter(|&&(b, _)| epoch >= b)
            .fold(self.lr, |lr, &(_, m)| lr * m)
    }
}

pub fn lr_at(cfg: &SgdConfig, epoch: usize) -> f64 {
    cfg.lr_at(epoch)
}

/// Optimizer state: one velocity buffer per trainable parameter.
#[derive(Clone, Debug)]
pub struct Sgd<T> {
    cfg: SgdConfig,
    velocity: Vec<Option<Tensor<T>>>,
    steps: usize,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(cfg: SgdConfig, registry: &ParamRegistry<T>) -> Result<Self> {
        cfg.validate()?;
        let velocity = registry
            .entries()
            .iter()
            .map(|e| e.kind.is_trainable().then(|| e.value.zeros_like()))
            .collect();
        Ok(Sgd { cfg, velocity, steps: 0 })
    }

    pub fn config(&self) -> &SgdConfig {
        &self.cfg
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    /// `g' = g + wd·p` (wd = 0 for exempt parameters), `v = m·v + g'`,
    /// `p = p − lr·v`. A non-finite gradient aborts with a divergence report
    /// before anything is updated; a parameter that overflows aborts the
    /// step where it happens.
    pub fn step(&mut self, registry: &mut ParamRegistry<T>, grads: &Gradients<T>, lr: f64) -> Result<()> {
        if grads.len() != registry.len() || self.velocity.len() != registry.len() {
            return Err(Error::domain(format!(
                "optimizer state for {} parameters, registry has {}, gradients {}",
                self.velocity.len(),
                registry.len(),
                grads.len()
            )));
        }
        let step = self.steps;
        let diverged = |name: &str, detail: &str| {
            Error::Diverged(DivergenceReport {
                step,
                location: name.to_string(),
                detail: detail.to_string(),
            })
        };
        for id in registry.ids() {
            let e = registry.entry(id);
            if let (ParamKind::Trainable { .. }, Some(g)) = (e.kind, grads.get(id)) {
                if g.shape() != e.value.shape() {
                    return Err(Error::domain(format!("gradient for {} has the wrong shape", e.name)));
                }
                if !g.all_finite() {
                    return Err(diverged(&e.name, "non-finite gradient"));
                }
            }
        }
        let m = T::lit(self.cfg.momentum);
        let lr_t = T::lit(lr);
        let ids: Vec<_> = registry.ids().collect();
        for id in ids {
            let ParamKind::Trainable { decay_exempt } = registry.entry(id).kind else {
                continue;
            };
            let (Some(g), Some(v)) = (grads.get(id), self.velocity[id.index()].as_mut()) else {
                continue;
            };
            let wd = if decay_exempt { T::zero() } else { T::lit(self.cfg.weight_decay) };
            let p = registry.value_mut(id);
            for ((pi, vi), &gi) in p.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
                *vi = m * *vi + gi + wd * *pi;
                *pi = *pi - lr_t * *vi;
            }
            if !p.all_finite() {
                let name = registry.entry(id).name.clone();
                return Err(diverged(&name, "parameter became non-finite"));
            }
        }
        self.steps += 1;
        Ok(())
    }
}
