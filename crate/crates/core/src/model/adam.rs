use ndarray::{Array2, Zip};
use serde::{Deserialize, Serialize};

use super::{Gradients, Params};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Moments {
    m: Array2<f64>,
    v: Array2<f64>,
}

impl Moments {
    fn like(a: &Array2<f64>) -> Self {
        Self {
            m: Array2::zeros(a.raw_dim()),
            v: Array2::zeros(a.raw_dim()),
        }
    }
}

/// First and second moments for every trainable block.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    users: Option<Moments>,
    items: Moments,
}

impl AdamState {
    pub fn new(config: AdamConfig, params: &Params) -> Self {
        Self {
            config,
            step: 0,
            users: params.users.as_ref().map(Moments::like),
            items: Moments::like(&params.items),
        }
    }
}

fn check_finite(name: &str, g: &Array2<f64>) -> Result<()> {
    if let Some((idx, v)) = g.indexed_iter().find(|(_, v)| !v.is_finite()) {
        return Err(Error::Numerical {
            block: name.to_string(),
            detail: format!("gradient entry {idx:?} = {v}"),
        });
    }
    Ok(())
}

fn update(p: &mut Array2<f64>, g: &Array2<f64>, mo: &mut Moments, cfg: &AdamConfig, step: u64) {
    let b1c = 1.0 - cfg.beta1.powi(step as i32);
    let b2c = 1.0 - cfg.beta2.powi(step as i32);
    Zip::from(p)
        .and(g)
        .and(&mut mo.m)
        .and(&mut mo.v)
        .for_each(|p, &g, m, v| {
            *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
            *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
            let mh = *m / b1c;
            let vh = *v / b2c;
            *p -= cfg.lr * mh / (vh.sqrt() + cfg.eps);
        });
}

/// Bias-corrected Adam update of every trainable block.
pub fn adam_step(params: &mut Params, grads: &Gradients, state: &mut AdamState) -> Result<()> {
    if grads.items.dim() != params.items.dim() {
        return Err(Error::Shape("item gradient shape differs from parameters".into()));
    }
    check_finite("item embeddings", &grads.items)?;
    match (&params.users, &grads.users, &state.users) {
        (Some(p), Some(g), Some(_)) => {
            if p.dim() != g.dim() {
                return Err(Error::Shape("user gradient shape differs from parameters".into()));
            }
            check_finite("user embeddings", g)?;
        }
        (None, None, None) => {}
        _ => {
            return Err(Error::State(
                "user parameters, gradients and optimizer state disagree".into(),
            ))
        }
    }
    state.step += 1;
    let cfg = state.config;
    update(&mut params.items, &grads.items, &mut state.items, &cfg, state.step);
    if let (Some(p), Some(g), Some(mo)) = (params.users.as_mut(), grads.users.as_ref(), state.users.as_mut()) {
        update(p, g, mo, &cfg, state.step);
    }
    Ok(())
}
