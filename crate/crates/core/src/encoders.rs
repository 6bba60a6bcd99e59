//! EEG-side encoder and the shared encoder applied to both modalities.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Linear;
use crate::rng::Rng;

/// `u = p_E(f_θ(x))`: optional tanh hidden layer, then a linear projector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EegEncoder {
    pub hidden: Option<Linear>,
    pub out: Linear,
}

#[derive(Debug, Clone)]
pub struct EegCache {
    pub input: Vec<f64>,
    pub hidden: Option<Vec<f64>>,
}

impl EegEncoder {
    /// `hidden_dim == 0` disables the hidden layer.
    pub fn new(signal_len: usize, hidden_dim: usize, d_common: usize, rng: &mut Rng) -> Self {
        let hidden = (hidden_dim > 0).then(|| Linear::glorot(hidden_dim, signal_len, rng));
        let in_dim = if hidden_dim > 0 { hidden_dim } else { signal_len };
        EegEncoder {
            hidden,
            out: Linear::glorot(d_common, in_dim, rng),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.hidden.as_ref().map_or(self.out.in_dim(), Linear::in_dim)
    }

    pub fn output_dim(&self) -> usize {
        self.out.out_dim()
    }

    pub fn forward(&self, x: &[f64]) -> Result<(Vec<f64>, EegCache)> {
        if x.len() != self.input_dim() {
            return Err(Error::dim("EEG signal (C·Tt)", self.input_dim(), x.len()));
        }
        let hidden = self
            .hidden
            .as_ref()
            .map(|l| l.forward(x).into_iter().map(f64::tanh).collect::<Vec<_>>());
        let u = self.out.forward(hidden.as_deref().unwrap_or(x));
        Ok((
            u,
            EegCache {
                input: x.to_vec(),
                hidden,
            },
        ))
    }

    pub fn backward(&self, cache: &EegCache, du: &[f64], grad: &mut EegEncoder) {
        let pre = cache.hidden.as_deref().unwrap_or(&cache.input);
        let da = self.out.backward(pre, du, &mut grad.out);
        if let (Some(l), Some(gl), Some(act)) = (&self.hidden, &mut grad.hidden, &cache.hidden) {
            let d_lin: Vec<f64> = da.iter().zip(act).map(|(d, a)| d * (1.0 - a * a)).collect();
            l.backward(&cache.input, &d_lin, gl);
        }
    }
}

/// Flattens a `C × Tt` trial to `f64`.
pub fn flatten_signal(signal: &[f32]) -> Vec<f64> {
    signal.iter().map(|&v| v as f64).collect()
}

pub fn encode_eeg(encoder: &EegEncoder, signal: &[f32]) -> Result<Vec<f64>> {
    Ok(encoder.forward(&flatten_signal(signal))?.0)
}

/// `z = G·u + g0`, one parameter set for both modalities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SharedEncoder {
    pub linear: Linear,
    pub frozen: bool,
}

impl SharedEncoder {
    pub fn new(d_common: usize, d_shared: usize, rng: &mut Rng) -> Self {
        SharedEncoder {
            linear: Linear::glorot(d_shared, d_common, rng),
            frozen: false,
        }
    }
}

pub fn encode_shared(shared: &SharedEncoder, u: &[f64]) -> Result<Vec<f64>> {
    shared.linear.check_input(u, "shared encoder input")?;
    Ok(shared.linear.forward(u))
}
