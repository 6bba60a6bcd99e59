//! The full trainable model, its parameter blocks, and exact batch
//! gradients of the staged objective.

use serde::{Deserialize, Serialize};

use crate::data::VisualFeatureStack;
use crate::encoders::{flatten_signal, EegCache, EegEncoder, SharedEncoder};
use crate::error::{Error, Result};
use crate::linalg::{axpy, softmax, Linear};
use crate::objectives::{median_bandwidth, mmd_loss_grad, retrieval_loss_grad, ContrastiveHead, MmdConfig};
use crate::rng::{self, Stream};
use crate::target::{
    depth_prior_logits, fuse_target, route_infer, route_with_masks, routing_backward, LayerProjectorBank,
    ProjectedLayer, ProjectorKind, Router, RoutingDraw,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d_common: usize,
    /// Shared-space width; 0 means `d_common`.
    pub d_shared: usize,
    /// Hidden width of the EEG encoder; 0 disables the hidden layer.
    pub eeg_hidden_dim: usize,
    pub projector: ProjectorKind,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_common: 16,
            d_shared: 0,
            eeg_hidden_dim: 0,
            projector: ProjectorKind::Linear,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RouterInit {
    /// `−|k − center|`
    DepthPrior,
    Uniform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RouterConfig {
    pub tau: f64,
    pub p_subject: f64,
    pub p_layer: f64,
    pub epsilon: f64,
    pub init: RouterInit,
    /// When false the router parameters receive no updates.
    pub trainable: bool,
    /// Learning-rate multiplier for `q` and `b`.
    pub lr_multiplier: f64,
    /// Bypass the router with these fixed fusion weights.
    pub fixed_weights: Option<Vec<f64>>,
}

impl Default for RouterConfig {
    fn default() -> Self {
        RouterConfig {
            tau: 1.0,
            p_subject: 0.2,
            p_layer: 0.1,
            epsilon: 1e-8,
            init: RouterInit::DepthPrior,
            trainable: true,
            lr_multiplier: 20.0,
            fixed_weights: None,
        }
    }
}

/// How fusion weights are produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoutingMode {
    Learned,
    Fixed(Vec<f64>),
}

/// Input dimensions a model is built for.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelDims {
    pub signal_len: usize,
    pub layer_dims: Vec<usize>,
    pub subjects: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub dims: ModelDims,
    pub projectors: LayerProjectorBank,
    pub router: Router,
    pub eeg: EegEncoder,
    pub shared: SharedEncoder,
    pub head: ContrastiveHead,
    pub routing: RoutingMode,
    pub router_trainable: bool,
    pub router_lr_scale: f64,
}

/// Coarse grouping of parameter blocks for reporting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockGroup {
    LayerProjector,
    EegEncoder,
    SharedEncoder,
    RouterLogits,
    SubjectBias,
    LogTau,
}

pub struct ParamBlock<'a> {
    pub name: String,
    pub group: BlockGroup,
    pub trainable: bool,
    /// Multiplier on the optimizer learning rate for this block.
    pub lr_scale: f64,
    pub data: &'a mut [f64],
}

fn linear_blocks<'a>(prefix: &str, l: &'a mut Linear, group: BlockGroup, trainable: bool, out: &mut Vec<ParamBlock<'a>>) {
    out.push(ParamBlock {
        name: format!("{prefix}.weight"),
        group,
        trainable,
        lr_scale: 1.0,
        data: &mut l.weight.data,
    });
    out.push(ParamBlock {
        name: format!("{prefix}.bias"),
        group,
        trainable,
        lr_scale: 1.0,
        data: &mut l.bias,
    });
}

impl Model {
    pub fn new(
        dims: ModelDims,
        model_cfg: &ModelConfig,
        router_cfg: &RouterConfig,
        tau_init: f64,
        seed: u64,
    ) -> Result<Self> {
        if dims.signal_len == 0 || dims.layer_dims.is_empty() || dims.subjects == 0 {
            return Err(Error::config("model", "signal length, layer list and subject count must be non-empty"));
        }
        if model_cfg.d_common == 0 {
            return Err(Error::config("model.d_common", "must be positive"));
        }
        if !(router_cfg.lr_multiplier >= 0.0 && router_cfg.lr_multiplier.is_finite()) {
            return Err(Error::config("router.lr_multiplier", "must be finite and non-negative"));
        }
        if !(tau_init > 0.0) {
            return Err(Error::config("loss.tau_init", "must be positive"));
        }
        let k = dims.layer_dims.len();
        let d_shared = if model_cfg.d_shared == 0 {
            model_cfg.d_common
        } else {
            model_cfg.d_shared
        };
        let mut rng = rng::stream(seed, Stream::Init, &[]);
        let projectors = LayerProjectorBank::new(model_cfg.projector, &dims.layer_dims, model_cfg.d_common, &mut rng)?;
        let eeg = EegEncoder::new(dims.signal_len, model_cfg.eeg_hidden_dim, model_cfg.d_common, &mut rng);
        let shared = SharedEncoder::new(model_cfg.d_common, d_shared, &mut rng);
        let q = match router_cfg.init {
            RouterInit::DepthPrior => depth_prior_logits(k),
            RouterInit::Uniform => vec![0.0; k],
        };
        let router = Router::new(
            q,
            dims.subjects,
            router_cfg.tau,
            router_cfg.p_subject,
            router_cfg.p_layer,
            router_cfg.epsilon,
        )?;
        let routing = match &router_cfg.fixed_weights {
            Some(w) if w.len() != k => {
                return Err(Error::config("router.fixed_weights", format!("length {} does not match K = {k}", w.len())))
            }
            Some(w) => RoutingMode::Fixed(w.clone()),
            None => RoutingMode::Learned,
        };
        Ok(Model {
            dims,
            projectors,
            router,
            eeg,
            shared,
            head: ContrastiveHead::with_tau(tau_init),
            routing,
            router_trainable: router_cfg.trainable,
            router_lr_scale: router_cfg.lr_multiplier,
        })
    }

    pub fn num_layers(&self) -> usize {
        self.dims.layer_dims.len()
    }

    /// Same structure with every parameter zeroed.
    pub fn zeros_like(&self) -> Model {
        let mut z = self.clone();
        for b in z.blocks_mut() {
            b.data.iter_mut().for_each(|v| *v = 0.0);
        }
        z
    }

    fn router_is_trained(&self) -> bool {
        self.router_trainable && matches!(self.routing, RoutingMode::Learned)
    }

    /// Every parameter block in a fixed order.
    pub fn blocks_mut(&mut self) -> Vec<ParamBlock<'_>> {
        let router_trained = self.router_is_trained();
        let shared_trained = !self.shared.frozen;
        let mut out = Vec::new();
        for (k, p) in self.projectors.layers.iter_mut().enumerate() {
            if let Some(h) = p.hidden.as_mut() {
                linear_blocks(&format!("projector.{k}.hidden"), h, BlockGroup::LayerProjector, true, &mut out);
            }
            if let Some(o) = p.out.as_mut() {
                linear_blocks(&format!("projector.{k}"), o, BlockGroup::LayerProjector, true, &mut out);
            }
        }
        if let Some(h) = self.eeg.hidden.as_mut() {
            linear_blocks("eeg.hidden", h, BlockGroup::EegEncoder, true, &mut out);
        }
        linear_blocks("eeg.out", &mut self.eeg.out, BlockGroup::EegEncoder, true, &mut out);
        linear_blocks("shared", &mut self.shared.linear, BlockGroup::SharedEncoder, shared_trained, &mut out);
        out.push(ParamBlock {
            name: "router.q".into(),
            group: BlockGroup::RouterLogits,
            trainable: router_trained,
            lr_scale: self.router_lr_scale,
            data: &mut self.router.global_logits,
        });
        out.push(ParamBlock {
            name: "router.b".into(),
            group: BlockGroup::SubjectBias,
            trainable: router_trained,
            lr_scale: self.router_lr_scale,
            data: &mut self.router.subject_bias.data,
        });
        out.push(ParamBlock {
            name: "head.log_tau".into(),
            group: BlockGroup::LogTau,
            trainable: true,
            lr_scale: 1.0,
            data: std::slice::from_mut(&mut self.head.log_tau),
        });
        out
    }

    /// Read-only snapshot of `(name, values)` per block.
    pub fn block_values(&self) -> Vec<(String, Vec<f64>)> {
        let mut c = self.clone();
        c.blocks_mut().into_iter().map(|b| (b.name, b.data.to_vec())).collect()
    }

    /// Fusion weights used at inference time.
    pub fn inference_weights(&self) -> Vec<f64> {
        match &self.routing {
            RoutingMode::Learned => route_infer(&self.router),
            RoutingMode::Fixed(w) => w.clone(),
        }
    }

    pub fn embed_eeg(&self, signal: &[f32]) -> Result<Vec<f64>> {
        let (u, _) = self.eeg.forward(&flatten_signal(signal))?;
        Ok(self.shared.linear.forward(&u))
    }

    /// Image embedding with inference routing (no subject input).
    pub fn embed_image(&self, stack: &VisualFeatureStack) -> Result<Vec<f64>> {
        let projected = crate::target::project_layer_features(&self.projectors, stack)?;
        let outs: Vec<Vec<f64>> = projected.into_iter().map(|p| p.output).collect();
        let u = fuse_target(&self.inference_weights(), &outs)?;
        Ok(self.shared.linear.forward(&u))
    }
}

/// One paired training sample with its realised dropout indicators.
#[derive(Debug, Clone)]
pub struct BatchSample<'a> {
    pub signal: &'a [f32],
    pub subject: usize,
    pub features: &'a VisualFeatureStack,
    pub keep_subject: bool,
    pub layer_mask: Vec<bool>,
}

/// What the batch objective is.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectiveSpec {
    /// Stage-one mixing weight `λ`; `None` selects the retrieval-only objective.
    pub lambda: Option<f64>,
    pub mmd: MmdConfig,
    /// Fixed MMD bandwidth; computed from the batch when `None`.
    pub bandwidth: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct BatchOutput {
    pub loss: f64,
    pub loss_ret: f64,
    pub loss_mmd: f64,
    pub bandwidth: f64,
    pub grads: Model,
    /// Shared-encoder gradient split by path: (EEG side, image side).
    pub shared_parts: (Linear, Linear),
}

struct SampleForward {
    eeg_cache: EegCache,
    u_eeg: Vec<f64>,
    projected: Vec<ProjectedLayer>,
    draw: Option<RoutingDraw>,
    weights: Vec<f64>,
    u_image: Vec<f64>,
}

fn forward_sample(model: &Model, s: &BatchSample<'_>) -> Result<SampleForward> {
    let (u_eeg, eeg_cache) = model.eeg.forward(&flatten_signal(s.signal))?;
    let projected = crate::target::project_layer_features(&model.projectors, s.features)?;
    let (draw, weights) = match &model.routing {
        RoutingMode::Learned => {
            if s.layer_mask.len() != model.num_layers() {
                return Err(Error::dim("layer mask", model.num_layers(), s.layer_mask.len()));
            }
            if s.subject >= model.router.num_subjects() {
                return Err(Error::dim("router subject", model.router.num_subjects(), s.subject));
            }
            let d = route_with_masks(&model.router, s.subject, s.keep_subject, &s.layer_mask);
            let w = d.weights.clone();
            (Some(d), w)
        }
        RoutingMode::Fixed(w) => (None, w.clone()),
    };
    let outs: Vec<Vec<f64>> = projected.iter().map(|p| p.output.clone()).collect();
    let u_image = fuse_target(&weights, &outs)?;
    Ok(SampleForward {
        eeg_cache,
        u_eeg,
        projected,
        draw,
        weights,
        u_image,
    })
}

fn check_finite(grads: &mut Model) -> Result<()> {
    for b in grads.blocks_mut() {
        if let Some(i) = b.data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite gradient in `{}` at element {i}", b.name)));
        }
    }
    Ok(())
}

/// Objective value with the shared encoder untied into an EEG-side and an
/// image-side copy. With both set to `model.shared.linear` this is the
/// ordinary batch objective.
pub fn batch_objective_untied(
    model: &Model,
    batch: &[BatchSample<'_>],
    objective: &ObjectiveSpec,
    shared_eeg: &Linear,
    shared_image: &Linear,
) -> Result<f64> {
    let fw: Vec<SampleForward> = batch.iter().map(|s| forward_sample(model, s)).collect::<Result<_>>()?;
    let z_e: Vec<Vec<f64>> = fw.iter().map(|f| shared_eeg.forward(&f.u_eeg)).collect();
    let z_i: Vec<Vec<f64>> = fw.iter().map(|f| shared_image.forward(&f.u_image)).collect();
    let ret = retrieval_loss_grad(&model.head, &z_e, &z_i)?.value;
    Ok(match objective.lambda {
        Some(lambda) => {
            let bw = objective.bandwidth.unwrap_or_else(|| median_bandwidth(&z_e, &z_i));
            let mmd = mmd_loss_grad(&objective.mmd, &z_e, &z_i, bw)?.value;
            lambda * mmd + (1.0 - lambda) * ret
        }
        None => ret,
    })
}

pub fn batch_objective(model: &Model, batch: &[BatchSample<'_>], objective: &ObjectiveSpec) -> Result<f64> {
    batch_objective_untied(model, batch, objective, &model.shared.linear, &model.shared.linear)
}

/// Exact gradients of the batch objective with respect to every
/// parameter block (frozen blocks included; the optimizer skips them).
pub fn compute_gradients(model: &Model, batch: &[BatchSample<'_>], objective: &ObjectiveSpec) -> Result<BatchOutput> {
    let fw: Vec<SampleForward> = batch.iter().map(|s| forward_sample(model, s)).collect::<Result<_>>()?;
    let shared = &model.shared.linear;
    let z_e: Vec<Vec<f64>> = fw.iter().map(|f| shared.forward(&f.u_eeg)).collect();
    let z_i: Vec<Vec<f64>> = fw.iter().map(|f| shared.forward(&f.u_image)).collect();

    let ret = retrieval_loss_grad(&model.head, &z_e, &z_i)?;
    let bandwidth = objective.bandwidth.unwrap_or_else(|| median_bandwidth(&z_e, &z_i));
    let mmd = mmd_loss_grad(&objective.mmd, &z_e, &z_i, bandwidth)?;

    let (w_ret, w_mmd) = match objective.lambda {
        Some(l) => (1.0 - l, l),
        None => (1.0, 0.0),
    };
    let loss = w_ret * ret.value + w_mmd * mmd.value;
    if !loss.is_finite() {
        return Err(Error::Numeric(format!(
            "non-finite objective (retrieval {}, mmd {})",
            ret.value, mmd.value
        )));
    }

    let mut grads = model.zeros_like();
    grads.head.log_tau = w_ret * ret.d_log_tau;
    let mut part_eeg = Linear::zeros(shared.out_dim(), shared.in_dim());
    let mut part_image = part_eeg.clone();

    for (n, f) in fw.iter().enumerate() {
        let mut dz_e = ret.d_eeg[n].iter().map(|g| w_ret * g).collect::<Vec<_>>();
        let mut dz_i = ret.d_image[n].iter().map(|g| w_ret * g).collect::<Vec<_>>();
        if w_mmd != 0.0 {
            axpy(w_mmd, &mmd.d_eeg[n], &mut dz_e);
            axpy(w_mmd, &mmd.d_image[n], &mut dz_i);
        }

        let du_e = shared.backward(&f.u_eeg, &dz_e, &mut part_eeg);
        let du_i = shared.backward(&f.u_image, &dz_i, &mut part_image);

        model.eeg.backward(&f.eeg_cache, &du_e, &mut grads.eeg);

        let mut d_weights = Vec::with_capacity(f.projected.len());
        for (k, p) in f.projected.iter().enumerate() {
            d_weights.push(crate::linalg::dot(&du_i, &p.output));
            if f.weights[k] != 0.0 {
                let d_out: Vec<f64> = du_i.iter().map(|g| f.weights[k] * g).collect();
                model.projectors.backward_one(k, p, &d_out, &mut grads.projectors);
            }
        }
        if let Some(draw) = &f.draw {
            routing_backward(&model.router, draw, &d_weights, &mut grads.router);
        }
    }
    for (g, (a, b)) in grads
        .shared
        .linear
        .weight
        .data
        .iter_mut()
        .zip(part_eeg.weight.data.iter().zip(&part_image.weight.data))
    {
        *g = a + b;
    }
    for (g, (a, b)) in grads.shared.linear.bias.iter_mut().zip(part_eeg.bias.iter().zip(&part_image.bias)) {
        *g = a + b;
    }
    check_finite(&mut grads)?;
    Ok(BatchOutput {
        loss,
        loss_ret: ret.value,
        loss_mmd: mmd.value,
        bandwidth,
        grads,
        shared_parts: (part_eeg, part_image),
    })
}

/// Convenience: subject-routing weights for every subject (training-time
/// routing without dropout).
pub fn subject_weights(router: &Router, subject: usize) -> Vec<f64> {
    let logits: Vec<f64> = router
        .global_logits
        .iter()
        .zip(router.subject_bias.row(subject))
        .map(|(q, b)| (q + b) / router.tau)
        .collect();
    softmax(&logits)
}
