//! Forward graph construction and gradient extraction.

use ndarray::{Array1, Array2, Array3, ArrayD, Axis, IxDyn};

use super::{AttentionStack, ImageSample, ModelConfig, Params};
use crate::error::{Error, Result};
use crate::tape::{NodeId, Tape};

const LN_EPS: f64 = 1e-6;

/// A trained (or freshly initialized) transformer: configuration plus
/// parameters. Forward and gradient calls never mutate the model.
#[derive(Debug, Clone)]
pub struct VitModel {
    config: ModelConfig,
    params: Params,
}

pub(crate) struct ForwardIds {
    pub input: NodeId,
    pub attn: Vec<NodeId>,
    pub logits: NodeId,
    pub features: NodeId,
    pub params: Vec<NodeId>,
}

fn param_leaf(tape: &mut Tape, ids: &mut Vec<NodeId>, value: ArrayD<f64>) -> NodeId {
    let id = tape.leaf(value);
    ids.push(id);
    id
}

/// Record the full forward pass on `tape`. Parameter leaves are created in
/// the same order as [`Params::named_views`] so training can map gradients
/// back positionally. When `override_attn` is given, that layer's
/// post-softmax attention is replaced by the supplied constant tensor (the
/// finite-difference oracle hook).
pub(crate) fn build_forward(
    tape: &mut Tape,
    config: &ModelConfig,
    params: &Params,
    pixels: &Array3<f64>,
    override_attn: Option<(usize, &Array3<f64>)>,
) -> ForwardIds {
    let mut pids = Vec::new();
    let input = tape.leaf(pixels.clone().into_dyn());

    let patch_w = param_leaf(tape, &mut pids, params.patch_w.clone().into_dyn());
    let patch_b = param_leaf(tape, &mut pids, params.patch_b.clone().into_dyn());
    let cls = param_leaf(tape, &mut pids, params.cls.clone().into_dyn());
    let pos = param_leaf(tape, &mut pids, params.pos.clone().into_dyn());

    // Center pixels before embedding so texture, not the DC level,
    // dominates the patch vectors.
    let patches = tape.extract_patches(input, config.patch_size);
    let offset = tape.leaf(ArrayD::from_elem(
        IxDyn(&[config.grid_side() * config.grid_side(), config.patch_dim()]),
        -0.5,
    ));
    let centered = tape.add(patches, offset);
    let proj = tape.matmul(centered, patch_w);
    let emb = tape.add_bias_row(proj, patch_b);
    let tokens = tape.concat_rows(vec![cls, emb]);
    let mut x = tape.add(tokens, pos);

    let dh = config.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let mut attn_ids = Vec::with_capacity(config.n_layers);

    struct LayerIds {
        ln1_g: NodeId,
        ln1_b: NodeId,
        wq: NodeId,
        bq: NodeId,
        wk: NodeId,
        bk: NodeId,
        wv: NodeId,
        bv: NodeId,
        wo: NodeId,
        bo: NodeId,
        ln2_g: NodeId,
        ln2_b: NodeId,
        w1: NodeId,
        b1: NodeId,
        w2: NodeId,
        b2: NodeId,
    }

    for (l, lp) in params.layers.iter().enumerate() {
        let ids = LayerIds {
            ln1_g: param_leaf(tape, &mut pids, lp.ln1_gamma.clone().into_dyn()),
            ln1_b: param_leaf(tape, &mut pids, lp.ln1_beta.clone().into_dyn()),
            wq: param_leaf(tape, &mut pids, lp.wq.clone().into_dyn()),
            bq: param_leaf(tape, &mut pids, lp.bq.clone().into_dyn()),
            wk: param_leaf(tape, &mut pids, lp.wk.clone().into_dyn()),
            bk: param_leaf(tape, &mut pids, lp.bk.clone().into_dyn()),
            wv: param_leaf(tape, &mut pids, lp.wv.clone().into_dyn()),
            bv: param_leaf(tape, &mut pids, lp.bv.clone().into_dyn()),
            wo: param_leaf(tape, &mut pids, lp.wo.clone().into_dyn()),
            bo: param_leaf(tape, &mut pids, lp.bo.clone().into_dyn()),
            ln2_g: param_leaf(tape, &mut pids, lp.ln2_gamma.clone().into_dyn()),
            ln2_b: param_leaf(tape, &mut pids, lp.ln2_beta.clone().into_dyn()),
            w1: param_leaf(tape, &mut pids, lp.mlp_w1.clone().into_dyn()),
            b1: param_leaf(tape, &mut pids, lp.mlp_b1.clone().into_dyn()),
            w2: param_leaf(tape, &mut pids, lp.mlp_w2.clone().into_dyn()),
            b2: param_leaf(tape, &mut pids, lp.mlp_b2.clone().into_dyn()),
        };

        let xn = tape.layer_norm(x, ids.ln1_g, ids.ln1_b, LN_EPS);
        let qp = tape.matmul(xn, ids.wq);
        let q = tape.add_bias_row(qp, ids.bq);
        let kp = tape.matmul(xn, ids.wk);
        let k = tape.add_bias_row(kp, ids.bk);
        let vp = tape.matmul(xn, ids.wv);
        let v = tape.add_bias_row(vp, ids.bv);

        let attn_l = match override_attn {
            Some((ol, a)) if ol == l => tape.leaf(a.clone().into_dyn()),
            _ => {
                let mut heads = Vec::with_capacity(config.n_heads);
                for h in 0..config.n_heads {
                    let qh = tape.slice_cols(q, h * dh, dh);
                    let kh = tape.slice_cols(k, h * dh, dh);
                    let scores = tape.matmul_nt(qh, kh);
                    let scaled = tape.scale(scores, scale);
                    heads.push(tape.softmax_rows(scaled));
                }
                tape.stack0(heads)
            }
        };
        attn_ids.push(attn_l);

        let mut outs = Vec::with_capacity(config.n_heads);
        for h in 0..config.n_heads {
            let ah = tape.index_axis0(attn_l, h);
            let vh = tape.slice_cols(v, h * dh, dh);
            outs.push(tape.matmul(ah, vh));
        }
        let cat = tape.concat_cols(outs);
        let op = tape.matmul(cat, ids.wo);
        let o = tape.add_bias_row(op, ids.bo);
        x = tape.add(x, o);

        let xn2 = tape.layer_norm(x, ids.ln2_g, ids.ln2_b, LN_EPS);
        let h1 = tape.matmul(xn2, ids.w1);
        let h1b = tape.add_bias_row(h1, ids.b1);
        let act = tape.gelu(h1b);
        let h2 = tape.matmul(act, ids.w2);
        let h2b = tape.add_bias_row(h2, ids.b2);
        x = tape.add(x, h2b);
    }

    let final_g = param_leaf(tape, &mut pids, params.final_gamma.clone().into_dyn());
    let final_b = param_leaf(tape, &mut pids, params.final_beta.clone().into_dyn());
    let head_w = param_leaf(tape, &mut pids, params.head_w.clone().into_dyn());
    let head_b = param_leaf(tape, &mut pids, params.head_b.clone().into_dyn());

    let xf = tape.layer_norm(x, final_g, final_b, LN_EPS);
    let features = tape.row(xf, 0);
    let proj = tape.vec_mat(features, head_w);
    let logits = tape.add(proj, head_b);

    ForwardIds {
        input,
        attn: attn_ids,
        logits,
        features,
        params: pids,
    }
}

/// Scalar losses that [`VitModel::input_gradient`] can differentiate.
#[derive(Debug, Clone)]
pub enum LossSelector {
    /// Σ of all class logits.
    SumOfLogits,
    /// The logit of one class.
    TargetLogit(usize),
    /// Cross-entropy against a label.
    CrossEntropy(usize),
    /// Squared Frobenius distance between the head-averaged last-layer
    /// attention and a fixed reference matrix.
    LatentAttentionDistance(Array2<f64>),
    /// Squared L2 distance between the feature vector and a fixed reference.
    FeatureDistance(Array1<f64>),
    /// Attention-concentration loss over the rollout of the recorded
    /// attention stack against frozen per-layer gradient factors.
    /// The loss is `offset + Σ_i coeffs[i] · scores[i]` where `scores` is
    /// row 0 of the rolled-out matrix.
    DiffusionFrozen {
        grads: Vec<Array3<f64>>,
        coeffs: Array1<f64>,
        offset: f64,
    },
}

impl VitModel {
    pub fn new(config: ModelConfig, params: Params) -> Result<Self> {
        config.validate()?;
        Ok(Self { config, params })
    }

    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let params = Params::init(&config, seed);
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    pub(crate) fn params_mut(&mut self) -> &mut Params {
        &mut self.params
    }

    /// Plain forward pass capturing attention, logits and features.
    pub fn forward(&self, image: &ImageSample) -> Result<AttentionStack> {
        image.matches(&self.config)?;
        let mut df = self.forward_diff(image)?;
        Ok(df.take_stack())
    }

    /// Forward pass that also fills `attn_grad` with ∂logit[target]/∂attn.
    pub fn forward_with_attn_grad(
        &self,
        image: &ImageSample,
        target_label: usize,
    ) -> Result<AttentionStack> {
        self.check_label(target_label)?;
        let mut df = self.forward_diff(image)?;
        let grads = df.attention_grads(target_label)?;
        let mut stack = df.take_stack();
        stack.attn_grad = Some(grads);
        Ok(stack)
    }

    /// Gradient of a scalar loss with respect to the input pixels.
    pub fn input_gradient(
        &self,
        image: &ImageSample,
        loss: &LossSelector,
    ) -> Result<Array3<f64>> {
        let mut df = self.forward_diff(image)?;
        let id = df.loss(loss)?;
        df.grad_wrt_input(id)
    }

    /// Record a differentiable forward pass for caller-composed losses.
    pub fn forward_diff(&self, image: &ImageSample) -> Result<DiffForward> {
        image.matches(&self.config)?;
        let mut tape = Tape::new();
        let ids = build_forward(&mut tape, &self.config, &self.params, &image.pixels, None);
        Ok(DiffForward {
            config: self.config.clone(),
            tape,
            ids,
        })
    }

    /// Forward pass with layer `layer`'s post-softmax attention replaced by
    /// `attn`. Supports finite-difference checks of attention gradients.
    pub fn forward_with_attention_override(
        &self,
        image: &ImageSample,
        layer: usize,
        attn: &Array3<f64>,
    ) -> Result<Array1<f64>> {
        image.matches(&self.config)?;
        if layer >= self.config.n_layers {
            return Err(Error::Input(format!(
                "layer {layer} out of range for {} layers",
                self.config.n_layers
            )));
        }
        let p = self.config.token_count();
        if attn.shape() != [self.config.n_heads, p, p] {
            return Err(Error::Dimension(format!(
                "attention override shape {:?} does not match (h,p,p)",
                attn.shape()
            )));
        }
        let mut tape = Tape::new();
        let ids = build_forward(
            &mut tape,
            &self.config,
            &self.params,
            &image.pixels,
            Some((layer, attn)),
        );
        Ok(tape
            .value(ids.logits)
            .to_owned()
            .into_dimensionality()
            .expect("logits are 1-d"))
    }

    /// Argmax class prediction.
    pub fn predict(&self, image: &ImageSample) -> Result<usize> {
        Ok(self.forward(image)?.predicted_label())
    }

    fn check_label(&self, label: usize) -> Result<()> {
        if label >= self.config.n_classes {
            return Err(Error::Input(format!(
                "label {label} out of range for {} classes",
                self.config.n_classes
            )));
        }
        Ok(())
    }
}

/// A recorded forward pass whose scalar losses can be built and
/// differentiated after the fact. One recording supports several backward
/// sweeps, which is what PCGrad needs.
pub struct DiffForward {
    config: ModelConfig,
    tape: Tape,
    ids: ForwardIds,
}

impl DiffForward {
    pub fn attn_value(&self, layer: usize) -> Array3<f64> {
        self.tape
            .value(self.ids.attn[layer])
            .to_owned()
            .into_dimensionality()
            .expect("attention is 3-d")
    }

    pub fn logits_value(&self) -> Array1<f64> {
        self.tape
            .value(self.ids.logits)
            .to_owned()
            .into_dimensionality()
            .expect("logits are 1-d")
    }

    pub fn features_value(&self) -> Array1<f64> {
        self.tape
            .value(self.ids.features)
            .to_owned()
            .into_dimensionality()
            .expect("features are 1-d")
    }

    pub fn n_layers(&self) -> usize {
        self.ids.attn.len()
    }

    pub fn loss_value(&self, id: NodeId) -> f64 {
        self.tape.scalar_value(id)
    }

    /// Consume the recorded values into an [`AttentionStack`] (without
    /// attention gradients).
    pub(crate) fn take_stack(&mut self) -> AttentionStack {
        let attn = (0..self.ids.attn.len())
            .map(|l| self.attn_value(l))
            .collect();
        AttentionStack {
            attn,
            attn_grad: None,
            logits: self.logits_value(),
            features: self.features_value(),
        }
    }

    /// ∂logit[target]/∂attn for every layer.
    pub fn attention_grads(&mut self, target: usize) -> Result<Vec<Array3<f64>>> {
        let yt = self.loss(&LossSelector::TargetLogit(target))?;
        let grads = self.tape.backward(yt)?;
        let p = self.config.token_count();
        Ok(self
            .ids
            .attn
            .iter()
            .map(|&id| {
                grads[id]
                    .clone()
                    .unwrap_or_else(|| {
                        ArrayD::zeros(IxDyn(&[self.config.n_heads, p, p]))
                    })
                    .into_dimensionality()
                    .expect("attention grad is 3-d")
            })
            .collect())
    }

    /// Build a scalar loss node from a selector.
    pub fn loss(&mut self, selector: &LossSelector) -> Result<NodeId> {
        match selector {
            LossSelector::SumOfLogits => Ok(self.tape.sum_all(self.ids.logits)),
            LossSelector::TargetLogit(t) => {
                self.check_label(*t)?;
                Ok(self.tape.index(self.ids.logits, *t))
            }
            LossSelector::CrossEntropy(t) => {
                self.check_label(*t)?;
                Ok(self.tape.cross_entropy_logits(self.ids.logits, *t))
            }
            LossSelector::LatentAttentionDistance(reference) => self.loss_latent(reference),
            LossSelector::FeatureDistance(reference) => self.loss_feature_match(reference),
            LossSelector::DiffusionFrozen {
                grads,
                coeffs,
                offset,
            } => self.loss_diffusion_frozen(grads, coeffs, *offset),
        }
    }

    /// ‖head-avg(attn_N) − reference‖²_F against a constant reference.
    pub fn loss_latent(&mut self, reference: &Array2<f64>) -> Result<NodeId> {
        let p = self.config.token_count();
        if reference.shape() != [p, p] {
            return Err(Error::Dimension(format!(
                "latent reference shape {:?} does not match ({p},{p})",
                reference.shape()
            )));
        }
        let last = *self.ids.attn.last().expect("at least one layer");
        let avg = self.tape.mean_axis0(last);
        let refc = self.tape.leaf(reference.clone().into_dyn());
        let diff = self.tape.sub(avg, refc);
        Ok(self.tape.sum_sq(diff))
    }

    /// ‖features − reference‖² against a constant reference vector.
    pub fn loss_feature_match(&mut self, reference: &Array1<f64>) -> Result<NodeId> {
        if reference.len() != self.config.embed_dim {
            return Err(Error::Dimension(format!(
                "feature reference length {} does not match embed_dim {}",
                reference.len(),
                self.config.embed_dim
            )));
        }
        let refc = self.tape.leaf(reference.clone().into_dyn());
        let diff = self.tape.sub(self.ids.features, refc);
        Ok(self.tape.sum_sq(diff))
    }

    /// Rollout-based concentration loss with frozen gradient factors.
    ///
    /// Builds `R_0 = mean_h(attn_0) ⊙ mean_h(grads[0])`,
    /// `R_l = (mean_h(attn_l) ⊙ mean_h(grads[l])) · R_{l-1}` and returns
    /// `offset + Σ_i coeffs[i] · R_N[0,i]`. The frozen factors are constants
    /// on the tape, so the gradient flows through the attention matrices
    /// only.
    pub fn loss_diffusion_frozen(
        &mut self,
        frozen: &[Array3<f64>],
        coeffs: &Array1<f64>,
        offset: f64,
    ) -> Result<NodeId> {
        let p = self.config.token_count();
        if frozen.len() != self.ids.attn.len() {
            return Err(Error::Contract(format!(
                "frozen gradient layer count {} does not match {}",
                frozen.len(),
                self.ids.attn.len()
            )));
        }
        if coeffs.len() != p {
            return Err(Error::Dimension(format!(
                "coefficient length {} does not match token count {p}",
                coeffs.len()
            )));
        }
        let mut rolled: Option<NodeId> = None;
        for (l, g) in frozen.iter().enumerate() {
            if g.shape() != [self.config.n_heads, p, p] {
                return Err(Error::Dimension(format!(
                    "frozen gradient shape {:?} at layer {l} does not match (h,p,p)",
                    g.shape()
                )));
            }
            let gbar = g.mean_axis(Axis(0)).expect("non-empty heads");
            let abar = self.tape.mean_axis0(self.ids.attn[l]);
            let gc = self.tape.leaf(gbar.into_dyn());
            let w = self.tape.mul(abar, gc);
            rolled = Some(match rolled {
                None => w,
                Some(prev) => self.tape.matmul(w, prev),
            });
        }
        let rn = rolled.expect("at least one layer");
        let scores = self.tape.row(rn, 0);
        let cc = self.tape.leaf(coeffs.clone().into_dyn());
        let weighted = self.tape.mul(scores, cc);
        let s = self.tape.sum_all(weighted);
        let off = self.tape.leaf(ArrayD::from_elem(IxDyn(&[]), offset));
        Ok(self.tape.add(s, off))
    }

    /// `a + gamma · b` over two scalar loss nodes.
    pub fn combine(&mut self, a: NodeId, b: NodeId, gamma: f64) -> NodeId {
        let gb = self.tape.scale(b, gamma);
        self.tape.add(a, gb)
    }

    /// Gradient of a scalar node with respect to the input pixels.
    pub fn grad_wrt_input(&mut self, loss: NodeId) -> Result<Array3<f64>> {
        let grads = self.tape.backward(loss)?;
        let shape = self.tape.value(self.ids.input).raw_dim();
        Ok(grads[self.ids.input]
            .clone()
            .unwrap_or_else(|| ArrayD::zeros(shape))
            .into_dimensionality()
            .expect("input grad is 3-d"))
    }

    fn check_label(&self, label: usize) -> Result<()> {
        if label >= self.config.n_classes {
            return Err(Error::Input(format!(
                "label {label} out of range for {} classes",
                self.config.n_classes
            )));
        }
        Ok(())
    }
}
