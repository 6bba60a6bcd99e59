//! AdamW with decoupled weight decay and bias correction.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Model;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPS: f64 = 1e-8;

/// First/second moments per parameter block, in `Model::blocks_mut` order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new(model: &Model) -> Self {
        let sizes: Vec<usize> = model.block_values().iter().map(|(_, v)| v.len()).collect();
        OptimizerState {
            step: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }
}

/// `θ ← θ − lr·(m̂/(√v̂ + ε) + wd·θ)`. Non-trainable blocks are skipped
/// entirely, moments included.
pub fn adamw_step(model: &mut Model, grads: &mut Model, state: &mut OptimizerState, lr: f64, weight_decay: f64) -> Result<()> {
    let grad_blocks = grads.blocks_mut();
    let blocks = model.blocks_mut();
    if blocks.len() != state.m.len() || grad_blocks.len() != blocks.len() {
        return Err(Error::dim("optimizer blocks", blocks.len(), state.m.len()));
    }
    for (g, p) in grad_blocks.iter().zip(&blocks) {
        if g.data.len() != p.data.len() {
            return Err(Error::dim(format!("gradient for `{}`", p.name), p.data.len(), g.data.len()));
        }
        if p.trainable {
            if let Some(i) = g.data.iter().position(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!("non-finite gradient in `{}` at element {i}", p.name)));
            }
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - BETA1.powi(t);
    let c2 = 1.0 - BETA2.powi(t);
    for (bi, (p, g)) in blocks.into_iter().zip(grad_blocks).enumerate() {
        if !p.trainable {
            continue;
        }
        let lr = lr * p.lr_scale;
        let (m, v) = (&mut state.m[bi], &mut state.v[bi]);
        for i in 0..p.data.len() {
            let gi = g.data[i];
            m[i] = BETA1 * m[i] + (1.0 - BETA1) * gi;
            v[i] = BETA2 * v[i] + (1.0 - BETA2) * gi * gi;
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            p.data[i] -= lr * (m_hat / (v_hat.sqrt() + EPS) + weight_decay * p.data[i]);
        }
    }
    Ok(())
}
