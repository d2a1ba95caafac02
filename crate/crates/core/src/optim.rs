//! RMSprop with the model's feasibility projections.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Gradients, ModelParams, RUNNING_VAR_FLOOR};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RmsPropConfig {
    pub learning_rate: f64,
    /// Decay of the squared-gradient average.
    pub rho: f64,
    pub eps: f64,
    pub momentum: f64,
}

impl Default for RmsPropConfig {
    fn default() -> Self {
        RmsPropConfig {
            learning_rate: 1e-2,
            rho: 0.9,
            eps: 1e-8,
            momentum: 0.0,
        }
    }
}

impl RmsPropConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate.is_finite()
            && self.learning_rate > 0.0
            && (0.0..1.0).contains(&self.rho)
            && self.eps > 0.0
            && (0.0..1.0).contains(&self.momentum);
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!("bad RMSprop settings {self:?}")))
        }
    }
}

#[derive(Debug, Clone)]
pub struct RmsProp {
    cfg: RmsPropConfig,
    square_avg: Vec<Vec<f64>>,
    buffer: Vec<Vec<f64>>,
}

impl RmsProp {
    pub fn new(cfg: RmsPropConfig, params: &mut ModelParams) -> Result<Self> {
        cfg.validate()?;
        let sizes: Vec<usize> = params.groups_mut().iter().map(|(_, g)| g.len()).collect();
        Ok(RmsProp {
            cfg,
            square_avg: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            buffer: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        })
    }

    pub fn config(&self) -> &RmsPropConfig {
        &self.cfg
    }

    /// One update of every group, then `W_D >= 0`, `theta >= 0` and the
    /// running-variance floor. Nothing is modified if any gradient is
    /// non-finite.
    pub fn step(&mut self, params: &mut ModelParams, grads: &Gradients) -> Result<()> {
        let groups = grads.groups();
        for (name, g) in groups.iter() {
            if let Some(pos) = g.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("gradient of {name} at index {pos}")));
            }
        }
        let RmsPropConfig {
            learning_rate,
            rho,
            eps,
            momentum,
        } = self.cfg;
        for (gi, ((_, p), (_, g))) in params.groups_mut().into_iter().zip(groups).enumerate() {
            if p.len() != g.len() {
                return Err(Error::invalid(format!("gradient group {gi} has the wrong length")));
            }
            let sq = &mut self.square_avg[gi];
            let buf = &mut self.buffer[gi];
            for i in 0..p.len() {
                sq[i] = rho * sq[i] + (1.0 - rho) * g[i] * g[i];
                let step = learning_rate * g[i] / (sq[i] + eps).sqrt();
                buf[i] = momentum * buf[i] + step;
                p[i] -= buf[i];
            }
        }
        project(params);
        Ok(())
    }
}

pub fn project(params: &mut ModelParams) {
    params.w_d.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
    params.theta.iter_mut().for_each(|v| *v = v.max(0.0));
    params
        .running_var
        .iter_mut()
        .for_each(|v| *v = v.max(RUNNING_VAR_FLOOR));
}
