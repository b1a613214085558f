//! Self-supervised objective used to probe curvature without labels.
//!
//! A frozen teacher view of the model embeds two large ("global") crops of
//! each image; its projected logits are centered and sharpened into target
//! distributions. The student — the same weights, on the gradient tape —
//! embeds several small ("local") crops, and the loss is the soft
//! cross-entropy between every (global target, local prediction) pair,
//! summed over pairs and averaged over the batch. Teacher targets are plain
//! tensors, so no gradient flows through them: the backward pass sees them
//! as constants, exactly like a stop-gradient.

use crate::error::{Result, SnapError};
use serde::{Deserialize, Serialize};
use crate::tensor::tape::{GradTape, NodeId};
use crate::tensor::Tensor;
use crate::vit::forward::{bind, forward, forward_graph, Exec, ParamRef, TapeExec};
use crate::vit::{ModelWeights, PruneMask};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

/// Projection head mapping encoder embeddings onto prototype logits,
/// plus the two softmax temperatures and the teacher centering vector.
#[derive(Debug, Clone, PartialEq)]
pub struct SslHeadWeights {
    /// `(n_prototypes × d_model)`, applied as `emb · projᵀ`. No bias.
    pub proj: Tensor,
    /// Teacher centering, `(1 × n_prototypes)`. Subtracted from teacher
    /// logits only; the student path is never centered.
    pub center: Tensor,
    /// Teacher temperature (sharpens targets).
    pub tau_teacher: f64,
    /// Student temperature.
    pub tau_student: f64,
}

impl SslHeadWeights {
    pub fn random_init(d_model: usize, n_prototypes: usize, seed: u64) -> SslHeadWeights {
        use rand_distr::{Distribution, StandardNormal};
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let data = (0..n_prototypes * d_model)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                z * 0.02
            })
            .collect();
        SslHeadWeights {
            proj: Tensor::from_vec(&[n_prototypes, d_model], data),
            center: Tensor::zeros(&[1, n_prototypes]),
            tau_teacher: 0.04,
            tau_student: 0.1,
        }
    }

    pub fn n_prototypes(&self) -> usize {
        self.proj.rows()
    }

    pub fn validate(&self, d_model: usize) -> Result<()> {
        if self.proj.cols() != d_model {
            return Err(SnapError::Config(format!(
                "projection expects width {}, model is {d_model}",
                self.proj.cols()
            )));
        }
        if self.center.len() != self.proj.rows() {
            return Err(SnapError::Config("center length vs prototype count".into()));
        }
        if self.tau_teacher <= 0.0 || self.tau_student <= 0.0 {
            return Err(SnapError::Config("temperatures must be positive".into()));
        }
        Ok(())
    }
}

/// A random resized square crop: sample an area fraction, cut a square of
/// that relative area at a uniform position, and resample to `out_size`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CropSpec {
    pub out_size: usize,
    pub min_scale: f64,
    pub max_scale: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CropPlan {
    pub global: CropSpec,
    pub local: CropSpec,
    pub n_global: usize,
    pub n_local: usize,
}

impl CropPlan {
    /// Defaults sized for 32×32 inputs with patch 8: global crops keep the
    /// native resolution, local crops are 16×16 (a 2×2 patch grid).
    pub fn for_image_size(image_size: usize) -> CropPlan {
        CropPlan {
            global: CropSpec { out_size: image_size, min_scale: 0.6, max_scale: 1.0 },
            local: CropSpec { out_size: image_size / 2, min_scale: 0.15, max_scale: 0.5 },
            n_global: 2,
            n_local: 4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, s) in [("global", &self.global), ("local", &self.local)] {
            if s.out_size == 0 {
                return Err(SnapError::Config(format!("{name} crop size is zero")));
            }
            if !(s.min_scale > 0.0 && s.min_scale <= s.max_scale && s.max_scale <= 1.0) {
                return Err(SnapError::Config(format!("{name} crop scale range invalid")));
            }
        }
        if self.n_global == 0 || self.n_local == 0 {
            return Err(SnapError::Config("crop counts must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug)]
pub struct MultiCrop {
    pub globals: Vec<Tensor>,
    pub locals: Vec<Tensor>,
}

/// Generate the multi-crop views for a batch. Each image draws its own
/// crop boxes; the draw order is fixed, so a given seed reproduces the
/// exact same views.
pub fn multi_crop(images: &Tensor, plan: &CropPlan, seed: u64) -> Result<MultiCrop> {
    plan.validate()?;
    let shape = images.shape();
    if shape.len() != 4 || shape[2] != shape[3] {
        return Err(SnapError::shape("multi_crop", format!("expected square [n,c,h,h], got {shape:?}")));
    }
    let (n, h) = (shape[0], shape[2]);
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut draw = |spec: &CropSpec| -> Tensor {
        let boxes: Vec<(usize, usize, usize)> = (0..n)
            .map(|_| {
                let area = rng.gen_range(spec.min_scale..=spec.max_scale);
                let side = ((area.sqrt() * h as f64).round() as usize).clamp(1, h);
                let y0 = rng.gen_range(0..=h - side);
                let x0 = rng.gen_range(0..=h - side);
                (y0, x0, side)
            })
            .collect();
        crop_resize(images, &boxes, spec.out_size)
    };
    let globals = (0..plan.n_global).map(|_| draw(&plan.global)).collect();
    let locals = (0..plan.n_local).map(|_| draw(&plan.local)).collect();
    Ok(MultiCrop { globals, locals })
}

/// Cut per-image boxes `(y0, x0, side)` out of `[n,c,h,w]` and resample
/// each to `out×out` with bilinear interpolation (corner-aligned).
fn crop_resize(images: &Tensor, boxes: &[(usize, usize, usize)], out: usize) -> Tensor {
    let shape = images.shape();
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let data = images.data();
    let mut result = Tensor::zeros(&[n, c, out, out]);
    let res = result.data_mut();
    for b in 0..n {
        let (y0, x0, side) = boxes[b];
        let coord = |i: usize| -> f64 {
            if out == 1 {
                (side as f64 - 1.0) / 2.0
            } else {
                i as f64 * (side as f64 - 1.0) / (out as f64 - 1.0)
            }
        };
        for ch in 0..c {
            let src_base = (b * c + ch) * h * w;
            let dst_base = (b * c + ch) * out * out;
            for oy in 0..out {
                let sy = coord(oy);
                let fy0 = sy.floor();
                let (iy0, iy1) = (fy0 as usize, (fy0 as usize + 1).min(side - 1));
                let fy = sy - fy0;
                for ox in 0..out {
                    let sx = coord(ox);
                    let fx0 = sx.floor();
                    let (ix0, ix1) = (fx0 as usize, (fx0 as usize + 1).min(side - 1));
                    let fx = sx - fx0;
                    let px = |yy: usize, xx: usize| data[src_base + (y0 + yy) * w + (x0 + xx)];
                    let top = px(iy0, ix0) * (1.0 - fx) + px(iy0, ix1) * fx;
                    let bot = px(iy1, ix0) * (1.0 - fx) + px(iy1, ix1) * fx;
                    res[dst_base + oy * out + ox] = top * (1.0 - fy) + bot * fy;
                }
            }
        }
    }
    result
}

/// Teacher targets: plain (untaped) forward of each global crop, projected,
/// centered, and sharpened. One `(n × n_prototypes)` row-stochastic tensor
/// per global view.
pub fn teacher_targets(
    w: &ModelWeights,
    mask: &PruneMask,
    head: &SslHeadWeights,
    globals: &[Tensor],
) -> Result<Vec<Tensor>> {
    head.validate(w.config.d_model)?;
    globals
        .iter()
        .map(|g| {
            let emb = forward(w, mask, g)?;
            let logits = emb.matmul_nt(&head.proj)?;
            let mut sharpened = logits;
            for r in 0..sharpened.rows() {
                for (v, c) in sharpened.row_mut(r).iter_mut().zip(head.center.data()) {
                    *v = (*v - c) / head.tau_teacher;
                }
            }
            Ok(sharpened.softmax_rows())
        })
        .collect()
}

/// Gradient of the objective with respect to every weight tensor, under
/// fixed teacher targets.
#[derive(Debug)]
pub struct SslGrads {
    pub loss: f64,
    /// One entry per weight tensor, in a fixed deterministic order.
    pub params: Vec<(ParamRef, Tensor)>,
    pub head_proj: Tensor,
}

pub(crate) fn student_graph(
    tape: &mut GradTape,
    w: &ModelWeights,
    mask: &PruneMask,
    head: &SslHeadWeights,
    locals: &[Tensor],
    targets: &[Tensor],
) -> Result<(NodeId, crate::vit::forward::Bound<NodeId>, NodeId)> {
    if locals.is_empty() || targets.is_empty() {
        return Err(SnapError::Contract("need at least one local crop and one target".into()));
    }
    let n = locals[0].shape()[0];
    for t in targets {
        if t.rows() != n {
            return Err(SnapError::shape("student_graph", "target batch does not match crops"));
        }
    }
    let mut ex = TapeExec { tape };
    let bound = bind(&mut ex, w);
    let proj = ex.leaf(head.proj.clone());
    let mut total: Option<NodeId> = None;
    for lc in locals {
        if lc.shape()[0] != n {
            return Err(SnapError::shape("student_graph", "local crop batches differ"));
        }
        let emb = forward_graph(&mut ex, &bound, w, mask, lc)?;
        let logits = ex.matmul_nt(&emb, &proj)?;
        for tgt in targets {
            let ce = ex.tape.ce_soft_sum(logits, tgt.clone(), head.tau_student)?;
            total = Some(match total {
                None => ce,
                Some(acc) => ex.tape.add(acc, ce)?,
            });
        }
    }
    let loss = ex.tape.scale(total.unwrap(), 1.0 / n as f64);
    Ok((loss, bound, proj))
}

/// Soft cross-entropy summed over rows: `-Σ_r Σ_k target[r,k] · log softmax(logits[r]/tau)[k]`.
pub(crate) fn soft_ce_sum(logits: &Tensor, target: &Tensor, tau: f64) -> Result<f64> {
    if logits.shape() != target.shape() {
        return Err(SnapError::shape("soft_ce_sum", "target shape vs logits"));
    }
    if tau <= 0.0 {
        return Err(SnapError::Config(format!("temperature must be positive, got {tau}")));
    }
    let scaled = logits.scale(1.0 / tau);
    let mut total = 0.0;
    for r in 0..scaled.rows() {
        let row = scaled.row(r);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
        for (j, &v) in row.iter().enumerate() {
            total -= target.at2(r, j) * (v - lse);
        }
    }
    Ok(total)
}

/// Objective value only, via the plain (untaped) forward. Same arithmetic as
/// the differentiated path, at a fraction of the cost — intended for
/// finite-difference probes.
pub fn ssl_loss_value(
    w: &ModelWeights,
    mask: &PruneMask,
    head: &SslHeadWeights,
    locals: &[Tensor],
    targets: &[Tensor],
) -> Result<f64> {
    if locals.is_empty() || targets.is_empty() {
        return Err(SnapError::Contract("need at least one local crop and one target".into()));
    }
    let n = locals[0].shape()[0];
    let mut total = 0.0;
    for lc in locals {
        if lc.shape()[0] != n {
            return Err(SnapError::shape("ssl_loss_value", "local crop batches differ"));
        }
        let emb = forward(w, mask, lc)?;
        let logits = emb.matmul_nt(&head.proj)?;
        for tgt in targets {
            total += soft_ce_sum(&logits, tgt, head.tau_student)?;
        }
    }
    Ok(total * (1.0 / n as f64))
}

/// Build the student graph against fixed targets, run the backward pass,
/// and return the loss with per-tensor gradients.
pub fn ssl_loss_and_grads(
    w: &ModelWeights,
    mask: &PruneMask,
    head: &SslHeadWeights,
    locals: &[Tensor],
    targets: &[Tensor],
) -> Result<SslGrads> {
    let mut tape = GradTape::new();
    let (loss, bound, proj) = student_graph(&mut tape, w, mask, head, locals, targets)?;
    let loss_val = tape.value(loss).item();
    let grads = tape.backward(loss)?;
    let params = bound
        .param_ids()
        .into_iter()
        .map(|(r, id)| (r, grads.get_or_zero(id, &tape)))
        .collect();
    Ok(SslGrads { loss: loss_val, params, head_proj: grads.get_or_zero(proj, &tape) })
}

/// One full objective evaluation on a raw image batch: crop, compute
/// teacher targets, then differentiate the student loss.
pub fn ssl_batch_grads(
    w: &ModelWeights,
    mask: &PruneMask,
    head: &SslHeadWeights,
    images: &Tensor,
    plan: &CropPlan,
    seed: u64,
) -> Result<SslGrads> {
    let crops = multi_crop(images, plan, seed)?;
    let targets = teacher_targets(w, mask, head, &crops.globals)?;
    ssl_loss_and_grads(w, mask, head, &crops.locals, &targets)
}
