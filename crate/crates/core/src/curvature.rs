//! Local curvature proxy for every prunable structure.
//!
//! The diagonal of the loss Hessian is approximated by the running sum of
//! squared batch gradients: for parameter `i`, `h_i = Σ_batches g_i²`, where
//! each `g` is the mean gradient over one batch. A structure's local score is
//! the mean of `h_i` over the parameters it owns (an attention head owns its
//! Wq/Wk/Wv rows and Wo columns; an FFN neuron owns its W_in row, b_in entry,
//! and W_out column). Gradients come either from the label-free objective or
//! from supervised cross-entropy against a classifier head. Scores are
//! nonnegative, and a structure that a mask has already silenced receives
//! exactly zero because its gradients vanish.

use crate::error::{Result, SnapError};
use crate::ssl::{ssl_batch_grads, CropPlan, SslHeadWeights};
use crate::tensor::tape::GradTape;
use crate::tensor::Tensor;
use crate::vit::forward::{bind, forward_graph, Exec, LayerField, ParamRef, TapeExec};
use crate::vit::{ModelWeights, PruneMask, StructureCensus, StructureKind};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::fmt;

/// Which objective supplies the gradients behind the local scores.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    Ssl,
    CrossEntropy,
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LossKind::Ssl => write!(f, "ssl"),
            LossKind::CrossEntropy => write!(f, "cross-entropy"),
        }
    }
}

/// Running elementwise sum of squared gradients, one slot per weight tensor.
#[derive(Debug)]
pub struct DiagAccumulator {
    slots: Vec<(ParamRef, Tensor)>,
    index: HashMap<ParamRef, usize>,
    n_batches: usize,
    n_samples: usize,
}

impl DiagAccumulator {
    /// Zero-initialized accumulator shaped like the model's weight tensors.
    pub fn new(w: &ModelWeights) -> DiagAccumulator {
        let mut slots = Vec::new();
        let mut push = |r: ParamRef, shape: &[usize]| slots.push((r, Tensor::zeros(shape)));
        push(ParamRef::PatchEmbed, w.patch_embed.shape());
        push(ParamRef::PosEmbed, w.pos_embed.shape());
        if let Some(cls) = &w.cls_token {
            push(ParamRef::ClsToken, cls.shape());
        }
        for (l, lw) in w.layers.iter().enumerate() {
            use LayerField::*;
            for (f, t) in [
                (Ln1Scale, &lw.ln1_scale),
                (Ln1Shift, &lw.ln1_shift),
                (Wq, &lw.wq),
                (Wk, &lw.wk),
                (Wv, &lw.wv),
                (Wo, &lw.wo),
                (Ln2Scale, &lw.ln2_scale),
                (Ln2Shift, &lw.ln2_shift),
                (WIn, &lw.w_in),
                (BIn, &lw.b_in),
                (WOut, &lw.w_out),
                (BOut, &lw.b_out),
            ] {
                push(ParamRef::Layer(l, f), t.shape());
            }
        }
        push(ParamRef::FinalLnScale, w.final_ln_scale.shape());
        push(ParamRef::FinalLnShift, w.final_ln_shift.shape());
        let index = slots.iter().enumerate().map(|(i, (r, _))| (*r, i)).collect();
        DiagAccumulator { slots, index, n_batches: 0, n_samples: 0 }
    }

    /// Add one batch's squared mean gradients, recording the batch size.
    pub fn accumulate(&mut self, grads: &[(ParamRef, Tensor)], batch_size: usize) -> Result<()> {
        for (r, g) in grads {
            let i = *self.index.get(r).ok_or_else(|| {
                SnapError::Contract(format!("gradient for unknown tensor {r:?}"))
            })?;
            let slot = &mut self.slots[i].1;
            if slot.shape() != g.shape() {
                return Err(SnapError::shape("accumulate", format!("{r:?} gradient shape changed")));
            }
            for (s, v) in slot.data_mut().iter_mut().zip(g.data()) {
                *s += v * v;
            }
        }
        self.n_batches += 1;
        self.n_samples += batch_size;
        Ok(())
    }

    pub fn n_batches(&self) -> usize {
        self.n_batches
    }

    pub fn n_samples(&self) -> usize {
        self.n_samples
    }

    pub fn tensor(&self, r: ParamRef) -> Option<&Tensor> {
        self.index.get(&r).map(|&i| &self.slots[i].1)
    }
}

/// Per-structure local scores in census order.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalScores {
    pub per_structure: Vec<f64>,
    pub n_samples_used: usize,
    pub loss_kind: LossKind,
}

impl LocalScores {
    pub fn validate(&self, census: &StructureCensus) -> Result<()> {
        if self.per_structure.len() != census.n_structures() {
            return Err(SnapError::Contract(format!(
                "{} scores for a census of {} structures",
                self.per_structure.len(),
                census.n_structures()
            )));
        }
        if self.per_structure.iter().any(|s| !s.is_finite() || *s < 0.0) {
            return Err(SnapError::Contract("local scores must be finite and nonnegative".into()));
        }
        Ok(())
    }
}

/// Reduce the per-parameter accumulator to one score per structure: the
/// mean of the accumulated squared gradients over the owned parameters.
pub fn aggregate_to_structures(
    acc: &DiagAccumulator,
    census: &StructureCensus,
    loss_kind: LossKind,
) -> Result<LocalScores> {
    let cfg = census.config();
    let d = cfg.d_model;
    let dk = cfg.d_key;
    let get = |l: usize, f: LayerField| -> Result<&Tensor> {
        acc.tensor(ParamRef::Layer(l, f))
            .ok_or_else(|| SnapError::Contract(format!("accumulator missing layer {l} {f:?}")))
    };
    for l in 0..cfg.n_layers {
        if get(l, LayerField::Wq)?.rows() != cfg.n_heads * dk
            || get(l, LayerField::WIn)?.rows() != cfg.d_ff
        {
            return Err(SnapError::Contract(
                "accumulator was built from compacted weights; scores need full shapes".into(),
            ));
        }
    }
    let mut per_structure = Vec::with_capacity(census.n_structures());
    for s in &census.structures {
        let sum = match s.kind {
            StructureKind::AttentionHead => {
                let mut acc_sum = 0.0;
                for f in [LayerField::Wq, LayerField::Wk, LayerField::Wv] {
                    let t = get(s.layer, f)?;
                    for r in s.index * dk..(s.index + 1) * dk {
                        acc_sum += t.row(r).iter().sum::<f64>();
                    }
                }
                let wo = get(s.layer, LayerField::Wo)?;
                for i in 0..wo.rows() {
                    for c in s.index * dk..(s.index + 1) * dk {
                        acc_sum += wo.at2(i, c);
                    }
                }
                acc_sum / (4 * dk * d) as f64
            }
            StructureKind::FfnNeuron => {
                let w_in = get(s.layer, LayerField::WIn)?;
                let b_in = get(s.layer, LayerField::BIn)?;
                let w_out = get(s.layer, LayerField::WOut)?;
                let mut acc_sum = w_in.row(s.index).iter().sum::<f64>();
                acc_sum += b_in.data()[s.index];
                for i in 0..w_out.rows() {
                    acc_sum += w_out.at2(i, s.index);
                }
                acc_sum / (2 * d + 1) as f64
            }
        };
        per_structure.push(sum);
    }
    Ok(LocalScores { per_structure, n_samples_used: acc.n_samples(), loss_kind })
}

/// Mean supervised cross-entropy over one labeled batch, differentiated with
/// respect to every weight tensor. Requires a classifier head.
pub fn supervised_batch_grads(
    w: &ModelWeights,
    images: &Tensor,
    labels: &[usize],
) -> Result<(f64, Vec<(ParamRef, Tensor)>)> {
    let Some((wc, bc)) = &w.classifier else {
        return Err(SnapError::Config(
            "cross-entropy scoring needs a classifier head; this checkpoint has none".into(),
        ));
    };
    let n = images.shape()[0];
    if labels.len() != n {
        return Err(SnapError::Data(format!("{} labels for a batch of {n} images", labels.len())));
    }
    let n_classes = wc.rows();
    let mut onehot = Tensor::zeros(&[n, n_classes]);
    for (r, &y) in labels.iter().enumerate() {
        if y >= n_classes {
            return Err(SnapError::Data(format!("label {y} out of range for {n_classes} classes")));
        }
        onehot.set2(r, y, 1.0);
    }
    let mask = PruneMask::all_keep(&w.config);
    let mut tape = GradTape::new();
    let (loss, bound) = {
        let mut ex = TapeExec { tape: &mut tape };
        let bound = bind(&mut ex, w);
        let emb = forward_graph(&mut ex, &bound, w, &mask, images)?;
        let wc_leaf = ex.leaf(wc.clone());
        let bc_leaf = ex.leaf(bc.clone());
        let logits = ex.matmul_nt(&emb, &wc_leaf)?;
        let logits = ex.add_bias(&logits, &bc_leaf)?;
        let ce = ex.tape.ce_soft_sum(logits, onehot, 1.0)?;
        (ex.tape.scale(ce, 1.0 / n as f64), bound)
    };
    let loss_val = tape.value(loss).item();
    let grads = tape.backward(loss)?;
    let params = bound
        .param_ids()
        .into_iter()
        .map(|(r, id)| (r, grads.get_or_zero(id, &tape)))
        .collect();
    Ok((loss_val, params))
}

fn check_scoring_inputs(w: &ModelWeights, census: &StructureCensus, n_batches: usize) -> Result<()> {
    if n_batches == 0 {
        return Err(SnapError::Data("curvature scoring needs at least one batch".into()));
    }
    if &w.config != census.config() {
        return Err(SnapError::Contract("census built for a different config".into()));
    }
    Ok(())
}

/// Full label-free scoring pass: run the self-supervised objective over every
/// batch (crop seeds derived as `seed + batch index`), square and accumulate
/// the gradients, and aggregate per structure. Scoring always sees the
/// unmasked model.
pub fn local_scores_ssl(
    w: &ModelWeights,
    head: &SslHeadWeights,
    batches: &[Tensor],
    plan: &CropPlan,
    census: &StructureCensus,
    seed: u64,
) -> Result<LocalScores> {
    check_scoring_inputs(w, census, batches.len())?;
    let mask = PruneMask::all_keep(&w.config);
    let mut acc = DiagAccumulator::new(w);
    for (i, batch) in batches.iter().enumerate() {
        let grads = ssl_batch_grads(w, &mask, head, batch, plan, seed.wrapping_add(i as u64))?;
        acc.accumulate(&grads.params, batch.shape()[0])?;
    }
    aggregate_to_structures(&acc, census, LossKind::Ssl)
}

/// Supervised scoring pass over labeled batches, using the classifier head.
pub fn local_scores_supervised(
    w: &ModelWeights,
    batches: &[(Tensor, Vec<usize>)],
    census: &StructureCensus,
) -> Result<LocalScores> {
    check_scoring_inputs(w, census, batches.len())?;
    let mut acc = DiagAccumulator::new(w);
    for (images, labels) in batches {
        let (_, grads) = supervised_batch_grads(w, images, labels)?;
        acc.accumulate(&grads, images.shape()[0])?;
    }
    aggregate_to_structures(&acc, census, LossKind::CrossEntropy)
}
