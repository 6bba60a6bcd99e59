//! Image-side target construction: per-layer projection, subject-aware
//! routing with subject/layer dropout, and weighted fusion.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::data::VisualFeatureStack;
use crate::error::{Error, Result};
use crate::linalg::{axpy, dot, softmax, Linear, Mat};
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProjectorKind {
    /// Identity; requires every `d_k == d_common`.
    Direct,
    Linear,
    /// One tanh hidden layer of width `d_common`, then a linear map.
    Mlp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerProjector {
    pub hidden: Option<Linear>,
    pub out: Option<Linear>,
}

/// Per-layer projection state kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ProjectedLayer {
    pub input: Vec<f64>,
    pub hidden: Option<Vec<f64>>,
    pub output: Vec<f64>,
}

/// One projector per layer, all emitting `d_common`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerProjectorBank {
    pub kind: ProjectorKind,
    pub d_common: usize,
    pub layer_dims: Vec<usize>,
    pub layers: Vec<LayerProjector>,
}

impl LayerProjectorBank {
    pub fn new(kind: ProjectorKind, layer_dims: &[usize], d_common: usize, rng: &mut Rng) -> Result<Self> {
        let layers = layer_dims
            .iter()
            .map(|&dk| match kind {
                ProjectorKind::Direct if dk != d_common => Err(Error::config(
                    "model.projector",
                    format!("direct projector needs d_k == d_common, got {dk} vs {d_common}"),
                )),
                ProjectorKind::Direct => Ok(LayerProjector {
                    hidden: None,
                    out: None,
                }),
                ProjectorKind::Linear => Ok(LayerProjector {
                    hidden: None,
                    out: Some(Linear::glorot(d_common, dk, rng)),
                }),
                ProjectorKind::Mlp => Ok(LayerProjector {
                    hidden: Some(Linear::glorot(d_common, dk, rng)),
                    out: Some(Linear::glorot(d_common, d_common, rng)),
                }),
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(LayerProjectorBank {
            kind,
            d_common,
            layer_dims: layer_dims.to_vec(),
            layers,
        })
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn project_one(&self, k: usize, h: &[f64]) -> ProjectedLayer {
        let p = &self.layers[k];
        let hidden = p
            .hidden
            .as_ref()
            .map(|l| l.forward(h).into_iter().map(f64::tanh).collect::<Vec<_>>());
        let pre = hidden.as_deref().unwrap_or(h);
        let output = match &p.out {
            Some(l) => l.forward(pre),
            None => pre.to_vec(),
        };
        ProjectedLayer {
            input: h.to_vec(),
            hidden,
            output,
        }
    }

    /// Accumulates projector gradients for layer `k` given `∂L/∂h̃_k`.
    pub fn backward_one(&self, k: usize, cache: &ProjectedLayer, d_out: &[f64], grad: &mut LayerProjectorBank) {
        let p = &self.layers[k];
        let g = &mut grad.layers[k];
        let pre = cache.hidden.as_deref().unwrap_or(&cache.input);
        let d_pre = match (&p.out, &mut g.out) {
            (Some(l), Some(gl)) => l.backward(pre, d_out, gl),
            _ => d_out.to_vec(),
        };
        if let (Some(l), Some(gl), Some(act)) = (&p.hidden, &mut g.hidden, &cache.hidden) {
            let d_lin: Vec<f64> = d_pre.iter().zip(act).map(|(d, a)| d * (1.0 - a * a)).collect();
            l.backward(&cache.input, &d_lin, gl);
        }
    }
}

/// `h̃_k = p_k(h_k)` for every layer of the stack.
pub fn project_layer_features(bank: &LayerProjectorBank, stack: &VisualFeatureStack) -> Result<Vec<ProjectedLayer>> {
    if stack.layers.len() != bank.num_layers() {
        return Err(Error::dim("feature stack layers", bank.num_layers(), stack.layers.len()));
    }
    stack
        .layers
        .iter()
        .enumerate()
        .map(|(k, h)| {
            if h.len() != bank.layer_dims[k] {
                return Err(Error::dim(format!("layer {k} feature"), bank.layer_dims[k], h.len()));
            }
            let h64: Vec<f64> = h.iter().map(|&v| v as f64).collect();
            Ok(bank.project_one(k, &h64))
        })
        .collect()
}

/// Global routing logits plus per-subject biases.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Router {
    /// Global logits `q`, length K.
    pub global_logits: Vec<f64>,
    /// Subject bias matrix `[S × K]`.
    pub subject_bias: Mat,
    pub tau: f64,
    pub p_subject: f64,
    pub p_layer: f64,
    pub epsilon: f64,
}

/// Depth prior centred on the middle layer: `−|k − center|`.
pub fn depth_prior_logits(k: usize) -> Vec<f64> {
    let center = (k as f64 - 1.0) / 2.0;
    (0..k).map(|i| -(i as f64 - center).abs()).collect()
}

impl Router {
    pub fn new(global_logits: Vec<f64>, subjects: usize, tau: f64, p_subject: f64, p_layer: f64, epsilon: f64) -> Result<Self> {
        if !(tau > 0.0) {
            return Err(Error::config("router.tau", "must be positive"));
        }
        if !(0.0..1.0).contains(&p_subject) {
            return Err(Error::config("router.p_subject", "must lie in [0, 1)"));
        }
        if !(0.0..1.0).contains(&p_layer) {
            return Err(Error::config("router.p_layer", "must lie in [0, 1)"));
        }
        if !(epsilon > 0.0) {
            return Err(Error::config("router.epsilon", "must be positive"));
        }
        let k = global_logits.len();
        Ok(Router {
            global_logits,
            subject_bias: Mat::zeros(subjects, k),
            tau,
            p_subject,
            p_layer,
            epsilon,
        })
    }

    pub fn num_layers(&self) -> usize {
        self.global_logits.len()
    }

    pub fn num_subjects(&self) -> usize {
        self.subject_bias.rows
    }

    fn logits(&self, subject: Option<usize>) -> Vec<f64> {
        match subject {
            Some(s) => self
                .global_logits
                .iter()
                .zip(self.subject_bias.row(s))
                .map(|(q, b)| (q + b) / self.tau)
                .collect(),
            None => self.global_logits.iter().map(|q| q / self.tau).collect(),
        }
    }
}

/// One realised training-time routing draw.
#[derive(Debug, Clone, PartialEq)]
pub struct RoutingDraw {
    pub subject: usize,
    /// Subject-dropout indicator `r` (true keeps the subject bias).
    pub keep_subject: bool,
    /// Layer mask `m`.
    pub layer_mask: Vec<bool>,
    /// Pre-mask weights `α`.
    pub prelim: Vec<f64>,
    /// Final weights `α̂`.
    pub weights: Vec<f64>,
}

/// Draws the dropout indicators: `r` first, then `m_1..m_K`.
pub fn draw_masks(router: &Router, rng: &mut Rng) -> (bool, Vec<bool>) {
    let keep_subject = rng.random_bool(1.0 - router.p_subject);
    let mask = (0..router.num_layers())
        .map(|_| rng.random_bool(1.0 - router.p_layer))
        .collect();
    (keep_subject, mask)
}

/// Routing with fixed dropout indicators.
pub fn route_with_masks(router: &Router, subject: usize, keep_subject: bool, layer_mask: &[bool]) -> RoutingDraw {
    let prelim = softmax(&router.logits(keep_subject.then_some(subject)));
    let kept: f64 = prelim
        .iter()
        .zip(layer_mask)
        .filter(|(_, &m)| m)
        .map(|(a, _)| a)
        .sum();
    let denom = kept + router.epsilon;
    let weights = prelim
        .iter()
        .zip(layer_mask)
        .map(|(a, &m)| if m { a / denom } else { 0.0 })
        .collect();
    RoutingDraw {
        subject,
        keep_subject,
        layer_mask: layer_mask.to_vec(),
        prelim,
        weights,
    }
}

pub fn route_train(router: &Router, subject: usize, rng: &mut Rng) -> Result<RoutingDraw> {
    if subject >= router.num_subjects() {
        return Err(Error::dim("router subject", router.num_subjects(), subject));
    }
    let (keep, mask) = draw_masks(router, rng);
    Ok(route_with_masks(router, subject, keep, &mask))
}

/// Inference routing: `softmax(q / τ)`, no subject input and no dropout.
pub fn route_infer(router: &Router) -> Vec<f64> {
    softmax(&router.logits(None))
}

/// Backpropagates `∂L/∂α̂` through the renormalisation and softmax into
/// `grad.global_logits` and the drawn subject's row of `grad.subject_bias`.
/// Masks are treated as constants.
pub fn routing_backward(router: &Router, draw: &RoutingDraw, d_weights: &[f64], grad: &mut Router) {
    let kept: f64 = draw
        .prelim
        .iter()
        .zip(&draw.layer_mask)
        .filter(|(_, &m)| m)
        .map(|(a, _)| a)
        .sum();
    let denom = kept + router.epsilon;
    let inner = dot(d_weights, &draw.weights);
    let d_prelim: Vec<f64> = draw
        .layer_mask
        .iter()
        .zip(d_weights)
        .map(|(&m, &dw)| if m { (dw - inner) / denom } else { 0.0 })
        .collect();
    let mean = dot(&d_prelim, &draw.prelim);
    let d_logits: Vec<f64> = draw
        .prelim
        .iter()
        .zip(&d_prelim)
        .map(|(a, d)| a * (d - mean) / router.tau)
        .collect();
    axpy(1.0, &d_logits, &mut grad.global_logits);
    if draw.keep_subject {
        axpy(1.0, &d_logits, grad.subject_bias.row_mut(draw.subject));
    }
}

/// `u = Σ_k w_k · h̃_k`.
pub fn fuse_target(weights: &[f64], projected: &[Vec<f64>]) -> Result<Vec<f64>> {
    if weights.len() != projected.len() {
        return Err(Error::dim("fusion weights", projected.len(), weights.len()));
    }
    let dim = projected.first().map_or(0, Vec::len);
    let mut u = vec![0.0; dim];
    for (w, h) in weights.iter().zip(projected) {
        if h.len() != dim {
            return Err(Error::dim("projected layer", dim, h.len()));
        }
        axpy(*w, h, &mut u);
    }
    Ok(u)
}

/// `deviation[s, k] = softmax((q + b_s)/τ)_k − softmax(q/τ)_k`.
pub fn routing_deviation(router: &Router) -> Mat {
    let global = route_infer(router);
    let (s_n, k) = (router.num_subjects(), router.num_layers());
    let mut out = Mat::zeros(s_n, k);
    for s in 0..s_n {
        let subj = softmax(&router.logits(Some(s)));
        for j in 0..k {
            out.set(s, j, subj[j] - global[j]);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{self, Stream};

    fn router(q: Vec<f64>) -> Router {
        Router::new(q, 3, 1.0, 0.0, 0.0, 1e-8).unwrap()
    }

    #[test]
    fn depth_prior_for_five_layers() {
        assert_eq!(depth_prior_logits(5), vec![-2.0, -1.0, 0.0, -1.0, -2.0]);
    }

    #[test]
    fn initial_distribution_matches_reported_values() {
        let r = router(depth_prior_logits(5));
        let w = route_infer(&r);
        let expected = [0.0675, 0.1834, 0.4984, 0.1834, 0.0675];
        for (a, b) in w.iter().zip(expected) {
            assert!((a - b).abs() < 1e-4, "{w:?}");
        }
        let mut rng = rng::stream(0, Stream::Dropout, &[]);
        let d = route_train(&r, 1, &mut rng).unwrap();
        for (a, b) in d.prelim.iter().zip([0.067, 0.183, 0.498, 0.183, 0.067]) {
            assert!((a - b).abs() < 1e-3);
        }
    }

    #[test]
    fn equal_logits_route_uniformly() {
        let r = router(vec![0.3; 4]);
        let mut rng = rng::stream(1, Stream::Dropout, &[]);
        let d = route_train(&r, 0, &mut rng).unwrap();
        for w in d.weights {
            assert!((w - 0.25).abs() < 1e-8);
        }
    }

    #[test]
    fn masked_layers_renormalise() {
        let r = router(vec![0.0; 4]);
        let d = route_with_masks(&r, 0, true, &[true, false, true, false]);
        let expected = [0.5, 0.0, 0.5, 0.0];
        for (a, b) in d.weights.iter().zip(expected) {
            assert!((a - b).abs() < 1e-7);
        }
    }

    #[test]
    fn all_masked_draw_gives_zero_weights() {
        let r = router(vec![0.0; 3]);
        let d = route_with_masks(&r, 0, true, &[false; 3]);
        assert_eq!(d.weights, vec![0.0; 3]);
        assert_eq!(fuse_target(&d.weights, &vec![vec![1.0, 2.0]; 3]).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn large_temperature_is_nearly_uniform() {
        let mut r = router(vec![3.0, -1.0, 0.5, 2.0, -4.0]);
        r.tau = 1e6;
        for w in route_infer(&r) {
            assert!((w - 0.2).abs() < 1e-6);
        }
    }

    #[test]
    fn deviation_is_zero_without_bias_and_rows_sum_to_zero() {
        let mut r = router(depth_prior_logits(5));
        let dev = routing_deviation(&r);
        assert!(dev.data.iter().all(|&v| v == 0.0));
        r.subject_bias.row_mut(1).copy_from_slice(&[0.0, 0.0, 0.0, 8.0, 0.0]);
        r.subject_bias.row_mut(2).copy_from_slice(&[0.4, -0.3, 1.0, 0.2, -2.0]);
        let dev = routing_deviation(&r);
        for s in 0..3 {
            assert!(dev.row(s).iter().sum::<f64>().abs() < 1e-12);
        }
        let row = dev.row(1);
        assert!(row[3] > 0.0);
        for (k, &v) in row.iter().enumerate() {
            if k != 3 {
                assert!(v <= 0.0);
            }
        }
    }

    #[test]
    fn identity_and_constant_projectors() {
        let mut rng = rng::stream(0, Stream::Init, &[]);
        let bank = LayerProjectorBank::new(ProjectorKind::Direct, &[3, 3], 3, &mut rng).unwrap();
        let stack = VisualFeatureStack {
            image: 0,
            layers: vec![vec![1.0, 2.0, 3.0], vec![-1.0, 0.5, 0.0]],
        };
        let out = project_layer_features(&bank, &stack).unwrap();
        assert_eq!(out[1].output, vec![-1.0, 0.5, 0.0]);

        let mut bank = LayerProjectorBank::new(ProjectorKind::Linear, &[3, 3], 2, &mut rng).unwrap();
        for p in &mut bank.layers {
            let l = p.out.as_mut().unwrap();
            l.weight = Mat::zeros(2, 3);
            l.bias = vec![4.0, -1.0];
        }
        for p in project_layer_features(&bank, &stack).unwrap() {
            assert_eq!(p.output, vec![4.0, -1.0]);
        }
    }

    #[test]
    fn direct_projector_rejects_mismatched_dims() {
        let mut rng = rng::stream(0, Stream::Init, &[]);
        assert!(LayerProjectorBank::new(ProjectorKind::Direct, &[3, 4], 3, &mut rng).is_err());
    }

    #[test]
    fn uniform_fusion_of_scaled_basis_vectors() {
        let projected: Vec<Vec<f64>> = (1..=5).map(|k| vec![k as f64, 0.0]).collect();
        let u = fuse_target(&[0.2; 5], &projected).unwrap();
        assert!((u[0] - 3.0).abs() < 1e-12);
        assert_eq!(u[1], 0.0);
        assert_eq!(fuse_target(&[0.0, 0.0, 1.0, 0.0, 0.0], &projected).unwrap(), vec![3.0, 0.0]);
    }
}
