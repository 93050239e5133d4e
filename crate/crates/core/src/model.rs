//! End-to-end model state and the batch forward/backward pass.
//!
//! `ModelParams` owns every weight matrix by name. A forward pass registers
//! the matrices selected by the trainable scope as tape parameters and the
//! rest as constants, builds prototypes -> assignment -> fusion -> losses on
//! one tape, and returns loss terms plus per-parameter gradients.

use crate::datasim::{adapter_on_tape, Adapter, LabeledFeatures};
use crate::diffcore::{DenseMatrix, Tape, VarId};
use crate::error::{Error, Result};
use crate::fusion::{fuse_on_tape, FusionBlock, FusionVars};
use crate::losses::{
    align_loss_on_tape, compactness_on_tape, kl_uniformity, prototype_affinity, separation_on_tape,
    LossTerms,
};
use crate::protogen::{
    centroid_prototypes, codebook_prototypes, encode_on_tape, EncoderSurrogate, PromptBank,
    PrototypeSet, Strategy, SurrogateVars,
};
use crate::quantizer::{gumbel_from_uniform, hard_assign};
use crate::trainer::{CompGrad, TrainConfig, TrainableScope};
use serde::{Deserialize, Serialize};
use std::collections::HashSet;

/// Which loss node the backward pass starts from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossSelect {
    Align,
    Comp,
    Sep,
    Total,
}

/// All model state as named matrices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub k: usize,
    pub d: usize,
    pub class_tokens: DenseMatrix,
    pub prompts: DenseMatrix,
    pub prompts_trainable: bool,
    pub surrogate_w1: DenseMatrix,
    pub surrogate_b1: DenseMatrix,
    pub surrogate_w2: DenseMatrix,
    pub surrogate_b2: DenseMatrix,
    pub codebook: Option<DenseMatrix>,
    pub centroids: Option<DenseMatrix>,
    pub adapter_weight: DenseMatrix,
    pub adapter_bias: DenseMatrix,
    pub adapter_enabled: bool,
    pub fusion: FusionBlock,
}

impl ModelParams {
    /// Fresh parameters for a run. Centroid strategy derives its fixed
    /// prototypes from `data` (the training split).
    pub fn init(
        config: &TrainConfig,
        k: usize,
        d: usize,
        data: Option<&LabeledFeatures>,
    ) -> Result<Self> {
        if k < 2 {
            return Err(Error::InvalidConfig(format!("need k >= 2 classes, got {k}")));
        }
        let bank = PromptBank::new(k, config.m, d, config.seed, config.prompts_trainable)?;
        let surrogate = EncoderSurrogate::new(config.m, d, d, config.seed)?;
        let codebook = if config.prototype_strategy == Strategy::Codebook {
            Some(codebook_prototypes(k, d, config.seed)?.vectors)
        } else {
            None
        };
        let centroids = if config.prototype_strategy == Strategy::Centroid {
            let data = data.ok_or_else(|| {
                Error::InvalidConfig("centroid strategy needs training data at init".into())
            })?;
            Some(centroid_prototypes(&data.features, &data.labels, 0)?.vectors)
        } else {
            None
        };
        let adapter = Adapter::identity(d, config.adapter_enabled);
        let fusion = FusionBlock::new(d, config.kv_mode, config.seed)?;
        Ok(Self {
            k,
            d,
            class_tokens: bank.class_tokens,
            prompts: bank.prompts,
            prompts_trainable: config.prompts_trainable,
            surrogate_w1: surrogate.w1,
            surrogate_b1: surrogate.b1,
            surrogate_w2: surrogate.w2,
            surrogate_b2: surrogate.b2,
            codebook,
            centroids,
            adapter_weight: adapter.weight,
            adapter_bias: adapter.bias,
            adapter_enabled: config.adapter_enabled,
            fusion,
        })
    }

    /// Every stateful matrix in canonical order.
    pub fn named(&self) -> Vec<(String, &DenseMatrix)> {
        let mut out: Vec<(String, &DenseMatrix)> = vec![
            ("class_tokens".into(), &self.class_tokens),
            ("prompts".into(), &self.prompts),
            ("surrogate.w1".into(), &self.surrogate_w1),
            ("surrogate.b1".into(), &self.surrogate_b1),
            ("surrogate.w2".into(), &self.surrogate_w2),
            ("surrogate.b2".into(), &self.surrogate_b2),
        ];
        if let Some(cb) = &self.codebook {
            out.push(("codebook".into(), cb));
        }
        if let Some(c) = &self.centroids {
            out.push(("centroids".into(), c));
        }
        out.push(("adapter.weight".into(), &self.adapter_weight));
        out.push(("adapter.bias".into(), &self.adapter_bias));
        out.push(("fusion.w_q".into(), &self.fusion.w_q));
        out.push(("fusion.w_k".into(), &self.fusion.w_k));
        out.push(("fusion.w_v".into(), &self.fusion.w_v));
        out.push(("fusion.w_o".into(), &self.fusion.w_o));
        out.push(("fusion.ffn_w1".into(), &self.fusion.ffn_w1));
        out.push(("fusion.ffn_b1".into(), &self.fusion.ffn_b1));
        out.push(("fusion.ffn_w2".into(), &self.fusion.ffn_w2));
        out.push(("fusion.ffn_b2".into(), &self.fusion.ffn_b2));
        out
    }

    pub fn matrix(&self, name: &str) -> Option<&DenseMatrix> {
        match name {
            "class_tokens" => Some(&self.class_tokens),
            "prompts" => Some(&self.prompts),
            "surrogate.w1" => Some(&self.surrogate_w1),
            "surrogate.b1" => Some(&self.surrogate_b1),
            "surrogate.w2" => Some(&self.surrogate_w2),
            "surrogate.b2" => Some(&self.surrogate_b2),
            "codebook" => self.codebook.as_ref(),
            "centroids" => self.centroids.as_ref(),
            "adapter.weight" => Some(&self.adapter_weight),
            "adapter.bias" => Some(&self.adapter_bias),
            "fusion.w_q" => Some(&self.fusion.w_q),
            "fusion.w_k" => Some(&self.fusion.w_k),
            "fusion.w_v" => Some(&self.fusion.w_v),
            "fusion.w_o" => Some(&self.fusion.w_o),
            "fusion.ffn_w1" => Some(&self.fusion.ffn_w1),
            "fusion.ffn_b1" => Some(&self.fusion.ffn_b1),
            "fusion.ffn_w2" => Some(&self.fusion.ffn_w2),
            "fusion.ffn_b2" => Some(&self.fusion.ffn_b2),
            _ => None,
        }
    }

    pub fn matrix_mut(&mut self, name: &str) -> Option<&mut DenseMatrix> {
        match name {
            "class_tokens" => Some(&mut self.class_tokens),
            "prompts" => Some(&mut self.prompts),
            "surrogate.w1" => Some(&mut self.surrogate_w1),
            "surrogate.b1" => Some(&mut self.surrogate_b1),
            "surrogate.w2" => Some(&mut self.surrogate_w2),
            "surrogate.b2" => Some(&mut self.surrogate_b2),
            "codebook" => self.codebook.as_mut(),
            "centroids" => self.centroids.as_mut(),
            "adapter.weight" => Some(&mut self.adapter_weight),
            "adapter.bias" => Some(&mut self.adapter_bias),
            "fusion.w_q" => Some(&mut self.fusion.w_q),
            "fusion.w_k" => Some(&mut self.fusion.w_k),
            "fusion.w_v" => Some(&mut self.fusion.w_v),
            "fusion.w_o" => Some(&mut self.fusion.w_o),
            "fusion.ffn_w1" => Some(&mut self.fusion.ffn_w1),
            "fusion.ffn_b1" => Some(&mut self.fusion.ffn_b1),
            "fusion.ffn_w2" => Some(&mut self.fusion.ffn_w2),
            "fusion.ffn_b2" => Some(&mut self.fusion.ffn_b2),
            _ => None,
        }
    }

    /// Names selected for optimization by the scope. The prototype-side
    /// parameter (prompts or codebook) is the innermost tier; the frozen
    /// surrogate only enters under scope `all`.
    pub fn trainable_names(&self, config: &TrainConfig) -> Vec<String> {
        let mut out = Vec::new();
        match config.prototype_strategy {
            Strategy::Prompted => {
                if self.prompts.rows > 0 && self.prompts_trainable {
                    out.push("prompts".to_string());
                }
            }
            Strategy::Codebook => out.push("codebook".to_string()),
            Strategy::Centroid => {}
        }
        if config.trainable_scope >= TrainableScope::PromptsAdapter && self.adapter_enabled {
            out.push("adapter.weight".to_string());
            out.push("adapter.bias".to_string());
        }
        if config.trainable_scope >= TrainableScope::PromptsAdapterFusion {
            for n in [
                "fusion.w_q",
                "fusion.w_k",
                "fusion.w_v",
                "fusion.w_o",
                "fusion.ffn_w1",
                "fusion.ffn_b1",
                "fusion.ffn_w2",
                "fusion.ffn_b2",
            ] {
                out.push(n.to_string());
            }
        }
        if config.trainable_scope == TrainableScope::All
            && config.prototype_strategy == Strategy::Prompted
        {
            for n in ["surrogate.w1", "surrogate.b1", "surrogate.w2", "surrogate.b2"] {
                out.push(n.to_string());
            }
        }
        out
    }

    /// Concatenates the listed matrices into one flat vector.
    pub fn pack(&self, names: &[String]) -> Vec<f64> {
        let mut out = Vec::new();
        for n in names {
            out.extend_from_slice(&self.matrix(n).expect("known parameter name").data);
        }
        out
    }

    /// Writes a flat vector back into the listed matrices.
    pub fn unpack(&mut self, names: &[String], flat: &[f64]) -> Result<()> {
        let mut off = 0usize;
        for n in names {
            let m = self
                .matrix_mut(n)
                .ok_or_else(|| Error::InvalidConfig(format!("unknown parameter {n}")))?;
            let len = m.data.len();
            if off + len > flat.len() {
                return Err(Error::DimensionMismatch(format!(
                    "flat vector too short for {n}"
                )));
            }
            m.data.copy_from_slice(&flat[off..off + len]);
            off += len;
        }
        if off != flat.len() {
            return Err(Error::DimensionMismatch(format!(
                "flat vector has {} extra entries",
                flat.len() - off
            )));
        }
        Ok(())
    }

    /// Current prototypes as a plain value.
    pub fn prototypes(&self, config: &TrainConfig) -> Result<PrototypeSet> {
        match config.prototype_strategy {
            Strategy::Prompted => {
                let bank = PromptBank {
                    prompts: self.prompts.clone(),
                    class_tokens: self.class_tokens.clone(),
                    trainable: self.prompts_trainable,
                };
                let surrogate = EncoderSurrogate {
                    w1: self.surrogate_w1.clone(),
                    b1: self.surrogate_b1.clone(),
                    w2: self.surrogate_w2.clone(),
                    b2: self.surrogate_b2.clone(),
                    seed: config.seed,
                };
                crate::protogen::encode_prototypes(&bank, &surrogate)
            }
            Strategy::Centroid => {
                let c = self
                    .centroids
                    .as_ref()
                    .ok_or_else(|| Error::InvalidConfig("centroids not initialized".into()))?;
                Ok(PrototypeSet {
                    vectors: c.clone(),
                    strategy: Strategy::Centroid,
                })
            }
            Strategy::Codebook => {
                let cb = self
                    .codebook
                    .as_ref()
                    .ok_or_else(|| Error::InvalidConfig("codebook not initialized".into()))?;
                Ok(PrototypeSet {
                    vectors: crate::diffcore::l2_normalize_rows(cb)?,
                    strategy: Strategy::Codebook,
                })
            }
        }
    }
}

/// Result of one batch pass.
#[derive(Debug, Clone)]
pub struct BatchOutput {
    pub terms: LossTerms,
    pub kl: f64,
    pub grads: Vec<(String, DenseMatrix)>,
    pub prototypes: DenseMatrix,
    pub probs: DenseMatrix,
    pub y: DenseMatrix,
    pub hard: DenseMatrix,
    pub fused: DenseMatrix,
}

/// Builds the full graph for one batch. `noise` carries the uniform draws for
/// the Gumbel relaxation; `None` runs the noiseless evaluation path where the
/// assignment is the tau-sharpened softmax of the soft probabilities.
pub fn forward(
    params: &ModelParams,
    config: &TrainConfig,
    features: &DenseMatrix,
    labels: &[u16],
    noise: Option<&DenseMatrix>,
    compute_grads: bool,
    select: LossSelect,
) -> Result<BatchOutput> {
    if features.cols != params.d {
        return Err(Error::DimensionMismatch(format!(
            "features have {} columns, model expects {}",
            features.cols, params.d
        )));
    }
    if labels.len() != features.rows {
        return Err(Error::DimensionMismatch(format!(
            "{} labels for {} rows",
            labels.len(),
            features.rows
        )));
    }
    if !(config.tau > 0.0) || !config.tau.is_finite() {
        return Err(Error::InvalidTemperature(config.tau));
    }
    if config.lambda1 < 0.0 {
        return Err(Error::NegativeLossWeight(config.lambda1));
    }
    if config.lambda2 < 0.0 {
        return Err(Error::NegativeLossWeight(config.lambda2));
    }

    let trainable: HashSet<String> = params.trainable_names(config).into_iter().collect();
    let mut tape = Tape::new();
    let reg = |tape: &mut Tape, name: &str, m: &DenseMatrix| -> Result<VarId> {
        if compute_grads && trainable.contains(name) {
            tape.param(name, m.clone())
        } else {
            tape.constant(m.clone())
        }
    };

    // Prototypes.
    let proto_var = match config.prototype_strategy {
        Strategy::Prompted => {
            let prompts_var = if params.prompts.rows > 0 {
                Some(reg(&mut tape, "prompts", &params.prompts)?)
            } else {
                None
            };
            let tokens = tape.constant(params.class_tokens.clone())?;
            let surrogate = SurrogateVars {
                w1: reg(&mut tape, "surrogate.w1", &params.surrogate_w1)?,
                b1: reg(&mut tape, "surrogate.b1", &params.surrogate_b1)?,
                w2: reg(&mut tape, "surrogate.w2", &params.surrogate_w2)?,
                b2: reg(&mut tape, "surrogate.b2", &params.surrogate_b2)?,
            };
            encode_on_tape(&mut tape, prompts_var, tokens, surrogate)?
        }
        Strategy::Centroid => {
            let c = params
                .centroids
                .as_ref()
                .ok_or_else(|| Error::InvalidConfig("centroids not initialized".into()))?;
            tape.constant(c.clone())?
        }
        Strategy::Codebook => {
            let cb = params
                .codebook
                .as_ref()
                .ok_or_else(|| Error::InvalidConfig("codebook not initialized".into()))?;
            let raw = reg(&mut tape, "codebook", cb)?;
            tape.normalize_rows(raw)?
        }
    };
    if tape.value(proto_var).rows != params.k {
        return Err(Error::DimensionMismatch(format!(
            "{} prototypes for {} classes",
            tape.value(proto_var).rows,
            params.k
        )));
    }

    // Features through the adapter.
    let raw = tape.constant(features.clone())?;
    let h_p = if params.adapter_enabled {
        let w = reg(&mut tape, "adapter.weight", &params.adapter_weight)?;
        let b = reg(&mut tape, "adapter.bias", &params.adapter_bias)?;
        adapter_on_tape(&mut tape, raw, w, b)?
    } else {
        tape.normalize_rows(raw)?
    };

    // Assignment.
    let scores = tape.matmul_transpose_b(h_p, proto_var)?;
    let probs = tape.softmax_rows(scores, 1.0)?;
    let y = match noise {
        Some(eps) => {
            if (eps.rows, eps.cols) != (features.rows, params.k) {
                return Err(Error::DimensionMismatch(format!(
                    "noise {}x{} for batch {}x{}",
                    eps.rows, eps.cols, features.rows, params.k
                )));
            }
            let g = tape.constant(gumbel_from_uniform(eps)?)?;
            let lnq = tape.ln(probs)?;
            let z = tape.add(lnq, g)?;
            tape.softmax_rows(z, config.tau)?
        }
        None => {
            let lnq = tape.ln(probs)?;
            tape.softmax_rows(lnq, config.tau)?
        }
    };
    let hard_value = hard_assign(tape.value(y));
    let hard = tape.constant(hard_value)?;
    let y_eff = if config.straight_through {
        let jump = tape.value(hard).zip(tape.value(y), |h, yv| h - yv)?;
        let jump = tape.constant(jump)?;
        tape.add(y, jump)?
    } else {
        y
    };

    // Fusion.
    let v = tape.matmul(y_eff, proto_var)?;
    let fusion_trainable = compute_grads && trainable.contains("fusion.w_q");
    let fvars = FusionVars::register(&mut tape, &params.fusion, fusion_trainable)?;
    let fused = fuse_on_tape(&mut tape, h_p, v, proto_var, &fvars, config.kv_mode)?;

    // Losses.
    let align = align_loss_on_tape(&mut tape, fused, proto_var, labels)?;
    let comp_features = match config.comp_grad {
        CompGrad::Both | CompGrad::FeaturesOnly => h_p,
        CompGrad::PrototypesOnly => {
            let frozen = tape.value(h_p).clone();
            tape.constant(frozen)?
        }
    };
    let comp_protos = match config.comp_grad {
        CompGrad::Both | CompGrad::PrototypesOnly => proto_var,
        CompGrad::FeaturesOnly => {
            let frozen = tape.value(proto_var).clone();
            tape.constant(frozen)?
        }
    };
    let comp = compactness_on_tape(&mut tape, comp_features, hard, comp_protos)?;
    let sep = separation_on_tape(&mut tape, proto_var)?;
    let comp_w = tape.scale(comp, config.lambda1)?;
    let sep_w = tape.scale(sep, config.lambda2)?;
    let partial = tape.add(align, comp_w)?;
    let total = tape.add(partial, sep_w)?;

    let terms = LossTerms {
        align: tape.value(align).data[0],
        comp: tape.value(comp).data[0],
        sep: tape.value(sep).data[0],
        total: tape.value(total).data[0],
        lambda1: config.lambda1,
        lambda2: config.lambda2,
    };
    let kl = kl_uniformity(&prototype_affinity(&PrototypeSet {
        vectors: tape.value(proto_var).clone(),
        strategy: config.prototype_strategy,
    })?)?;

    let grads = if compute_grads {
        let root = match select {
            LossSelect::Align => align,
            LossSelect::Comp => comp,
            LossSelect::Sep => sep,
            LossSelect::Total => total,
        };
        let g = tape.backward(root)?;
        tape.param_gradients(&g)
    } else {
        Vec::new()
    };

    Ok(BatchOutput {
        terms,
        kl,
        grads,
        prototypes: tape.value(proto_var).clone(),
        probs: tape.value(probs).clone(),
        y: tape.value(y).clone(),
        hard: tape.value(hard).clone(),
        fused: tape.value(fused).clone(),
    })
}
