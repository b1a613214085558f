//! Model forward pass, written once against an executor abstraction.
//!
//! `PlainExec` evaluates tensors directly (no bookkeeping, used by fitness
//! evaluation, analytics taps, and inference). `TapeExec` records the same
//! graph on a `GradTape` for reverse-mode gradients. Because both run the
//! identical op sequence, the two paths agree bit-for-bit.

use super::{ModelWeights, PruneMask};
use crate::error::{Result, SnapError};
use crate::tensor::tape::{mean_pool_groups, mha_forward, GradTape, MhaSpec, NodeId};
use crate::tensor::{gelu, Tensor};

pub const LN_EPS: f64 = 1e-6;

/// Labels for weight leaves so tape gradients can be mapped back.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LayerField {
    Ln1Scale,
    Ln1Shift,
    Wq,
    Wk,
    Wv,
    Wo,
    Ln2Scale,
    Ln2Shift,
    WIn,
    BIn,
    WOut,
    BOut,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamRef {
    PatchEmbed,
    PosEmbed,
    ClsToken,
    FinalLnScale,
    FinalLnShift,
    Layer(usize, LayerField),
}

pub(crate) trait Exec {
    type V: Clone;
    fn leaf(&mut self, t: Tensor) -> Self::V;
    fn matmul_nn(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V>;
    fn matmul_nt(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V>;
    fn add(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V>;
    fn add_tiled(&mut self, x: &Self::V, tile: &Self::V, reps: usize) -> Result<Self::V>;
    fn add_bias(&mut self, x: &Self::V, b: &Self::V) -> Result<Self::V>;
    fn prepend_row_tiled(&mut self, row: &Self::V, x: &Self::V, group: usize) -> Result<Self::V>;
    fn mul_cols(&mut self, x: &Self::V, m: &Self::V) -> Result<Self::V>;
    fn gelu(&mut self, x: &Self::V) -> Self::V;
    fn layernorm(&mut self, x: &Self::V, s: &Self::V, b: &Self::V) -> Result<Self::V>;
    fn mha(&mut self, q: &Self::V, k: &Self::V, v: &Self::V, spec: MhaSpec) -> Result<Self::V>;
    fn select_rows(&mut self, x: &Self::V, idx: Vec<usize>) -> Result<Self::V>;
    fn mean_pool_groups(&mut self, x: &Self::V, group: usize) -> Result<Self::V>;
    fn capture_attn_ctx(&mut self, _layer: usize, _v: &Self::V) {}
    fn capture_ffn_hidden(&mut self, _layer: usize, _v: &Self::V) {}
}

/// Token-level activations recorded during a plain forward: per layer the
/// post-attention context concatenation (rows = batch·tokens, cols =
/// heads·d_key) and the post-GELU FFN hidden (cols = d_ff).
#[derive(Debug, Default)]
pub struct LayerTaps {
    pub attn_ctx: Vec<Tensor>,
    pub ffn_hidden: Vec<Tensor>,
    pub n_tokens: usize,
}

pub(crate) struct PlainExec {
    pub taps: Option<LayerTaps>,
}

impl PlainExec {
    pub fn new() -> PlainExec {
        PlainExec { taps: None }
    }

    pub fn with_taps() -> PlainExec {
        PlainExec { taps: Some(LayerTaps::default()) }
    }
}

impl Exec for PlainExec {
    type V = Tensor;

    fn leaf(&mut self, t: Tensor) -> Tensor {
        t
    }

    fn matmul_nn(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        a.matmul(b)
    }

    fn matmul_nt(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        a.matmul_nt(b)
    }

    fn add(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        if a.shape() != b.shape() {
            return Err(SnapError::shape("add", "operand shapes differ"));
        }
        Ok(a.add(b))
    }

    fn add_tiled(&mut self, x: &Tensor, tile: &Tensor, reps: usize) -> Result<Tensor> {
        if x.cols() != tile.cols() || x.rows() != tile.rows() * reps {
            return Err(SnapError::shape("add_tiled", "tile does not divide x"));
        }
        let t_rows = tile.rows();
        let mut out = x.clone();
        for r in 0..out.rows() {
            let src = tile.row(r % t_rows).to_vec();
            for (o, s) in out.row_mut(r).iter_mut().zip(&src) {
                *o += s;
            }
        }
        Ok(out)
    }

    fn add_bias(&mut self, x: &Tensor, b: &Tensor) -> Result<Tensor> {
        if b.len() != x.cols() {
            return Err(SnapError::shape("add_bias", "bias length vs columns"));
        }
        let bias = b.data().to_vec();
        let mut out = x.clone();
        for r in 0..out.rows() {
            for (o, s) in out.row_mut(r).iter_mut().zip(&bias) {
                *o += s;
            }
        }
        Ok(out)
    }

    fn prepend_row_tiled(&mut self, row: &Tensor, x: &Tensor, group: usize) -> Result<Tensor> {
        if row.len() != x.cols() || x.rows() % group != 0 {
            return Err(SnapError::shape("prepend_row_tiled", "row/group mismatch"));
        }
        let n = x.cols();
        let reps = x.rows() / group;
        let mut out = Tensor::zeros(&[reps * (group + 1), n]);
        for b in 0..reps {
            out.row_mut(b * (group + 1)).copy_from_slice(row.data());
            for t in 0..group {
                let src = x.row(b * group + t).to_vec();
                out.row_mut(b * (group + 1) + t + 1).copy_from_slice(&src);
            }
        }
        Ok(out)
    }

    fn mul_cols(&mut self, x: &Tensor, m: &Tensor) -> Result<Tensor> {
        if m.len() != x.cols() {
            return Err(SnapError::shape("mul_cols", "mask length vs columns"));
        }
        let mask = m.data().to_vec();
        let mut out = x.clone();
        for r in 0..out.rows() {
            for (o, mm) in out.row_mut(r).iter_mut().zip(&mask) {
                *o *= mm;
            }
        }
        Ok(out)
    }

    fn gelu(&mut self, x: &Tensor) -> Tensor {
        x.map(gelu)
    }

    fn layernorm(&mut self, x: &Tensor, s: &Tensor, b: &Tensor) -> Result<Tensor> {
        if s.len() != x.cols() || b.len() != x.cols() {
            return Err(SnapError::shape("layernorm", "scale/shift length vs columns"));
        }
        Ok(x.layernorm_rows(s.data(), b.data(), LN_EPS))
    }

    fn mha(&mut self, q: &Tensor, k: &Tensor, v: &Tensor, spec: MhaSpec) -> Result<Tensor> {
        Ok(mha_forward(q, k, v, &spec)?.0)
    }

    fn select_rows(&mut self, x: &Tensor, idx: Vec<usize>) -> Result<Tensor> {
        let mut out = Tensor::zeros(&[idx.len(), x.cols()]);
        for (r, &i) in idx.iter().enumerate() {
            if i >= x.rows() {
                return Err(SnapError::shape("select_rows", format!("row {i} out of range")));
            }
            let src = x.row(i).to_vec();
            out.row_mut(r).copy_from_slice(&src);
        }
        Ok(out)
    }

    fn mean_pool_groups(&mut self, x: &Tensor, group: usize) -> Result<Tensor> {
        if group == 0 || x.rows() % group != 0 {
            return Err(SnapError::shape("mean_pool_groups", "group does not divide rows"));
        }
        Ok(mean_pool_groups(x, group))
    }

    fn capture_attn_ctx(&mut self, _layer: usize, v: &Tensor) {
        if let Some(t) = &mut self.taps {
            t.attn_ctx.push(v.clone());
        }
    }

    fn capture_ffn_hidden(&mut self, _layer: usize, v: &Tensor) {
        if let Some(t) = &mut self.taps {
            t.ffn_hidden.push(v.clone());
        }
    }
}

pub(crate) struct TapeExec<'a> {
    pub tape: &'a mut GradTape,
}

impl<'a> Exec for TapeExec<'a> {
    type V = NodeId;

    fn leaf(&mut self, t: Tensor) -> NodeId {
        self.tape.leaf(t)
    }

    fn matmul_nn(&mut self, a: &NodeId, b: &NodeId) -> Result<NodeId> {
        self.tape.matmul_nn(*a, *b)
    }

    fn matmul_nt(&mut self, a: &NodeId, b: &NodeId) -> Result<NodeId> {
        self.tape.matmul_nt(*a, *b)
    }

    fn add(&mut self, a: &NodeId, b: &NodeId) -> Result<NodeId> {
        self.tape.add(*a, *b)
    }

    fn add_tiled(&mut self, x: &NodeId, tile: &NodeId, reps: usize) -> Result<NodeId> {
        self.tape.add_tiled(*x, *tile, reps)
    }

    fn add_bias(&mut self, x: &NodeId, b: &NodeId) -> Result<NodeId> {
        self.tape.add_bias(*x, *b)
    }

    fn prepend_row_tiled(&mut self, row: &NodeId, x: &NodeId, group: usize) -> Result<NodeId> {
        self.tape.prepend_row_tiled(*row, *x, group)
    }

    fn mul_cols(&mut self, x: &NodeId, m: &NodeId) -> Result<NodeId> {
        self.tape.mul_cols(*x, *m)
    }

    fn gelu(&mut self, x: &NodeId) -> NodeId {
        self.tape.gelu(*x)
    }

    fn layernorm(&mut self, x: &NodeId, s: &NodeId, b: &NodeId) -> Result<NodeId> {
        self.tape.layernorm(*x, *s, *b, LN_EPS)
    }

    fn mha(&mut self, q: &NodeId, k: &NodeId, v: &NodeId, spec: MhaSpec) -> Result<NodeId> {
        self.tape.mha(*q, *k, *v, spec)
    }

    fn select_rows(&mut self, x: &NodeId, idx: Vec<usize>) -> Result<NodeId> {
        self.tape.select_rows(*x, idx)
    }

    fn mean_pool_groups(&mut self, x: &NodeId, group: usize) -> Result<NodeId> {
        self.tape.mean_pool_groups(*x, group)
    }
}

/// Weight tensors lifted into an executor.
pub(crate) struct BoundLayer<V> {
    pub ln1_scale: V,
    pub ln1_shift: V,
    pub wq: V,
    pub wk: V,
    pub wv: V,
    pub wo: V,
    pub ln2_scale: V,
    pub ln2_shift: V,
    pub w_in: V,
    pub b_in: V,
    pub w_out: V,
    pub b_out: V,
}

pub(crate) struct Bound<V> {
    pub patch_embed: V,
    pub pos_embed: V,
    pub cls_token: Option<V>,
    pub layers: Vec<BoundLayer<V>>,
    pub final_ln_scale: V,
    pub final_ln_shift: V,
}

pub(crate) fn bind<E: Exec>(ex: &mut E, w: &ModelWeights) -> Bound<E::V> {
    Bound {
        patch_embed: ex.leaf(w.patch_embed.clone()),
        pos_embed: ex.leaf(w.pos_embed.clone()),
        cls_token: w.cls_token.as_ref().map(|t| ex.leaf(t.clone())),
        layers: w
            .layers
            .iter()
            .map(|l| BoundLayer {
                ln1_scale: ex.leaf(l.ln1_scale.clone()),
                ln1_shift: ex.leaf(l.ln1_shift.clone()),
                wq: ex.leaf(l.wq.clone()),
                wk: ex.leaf(l.wk.clone()),
                wv: ex.leaf(l.wv.clone()),
                wo: ex.leaf(l.wo.clone()),
                ln2_scale: ex.leaf(l.ln2_scale.clone()),
                ln2_shift: ex.leaf(l.ln2_shift.clone()),
                w_in: ex.leaf(l.w_in.clone()),
                b_in: ex.leaf(l.b_in.clone()),
                w_out: ex.leaf(l.w_out.clone()),
                b_out: ex.leaf(l.b_out.clone()),
            })
            .collect(),
        final_ln_scale: ex.leaf(w.final_ln_scale.clone()),
        final_ln_shift: ex.leaf(w.final_ln_shift.clone()),
    }
}

impl Bound<NodeId> {
    /// Deterministic (label, node) listing for gradient extraction.
    pub fn param_ids(&self) -> Vec<(ParamRef, NodeId)> {
        let mut out = vec![(ParamRef::PatchEmbed, self.patch_embed), (ParamRef::PosEmbed, self.pos_embed)];
        if let Some(cls) = self.cls_token {
            out.push((ParamRef::ClsToken, cls));
        }
        for (i, l) in self.layers.iter().enumerate() {
            use LayerField::*;
            for (f, id) in [
                (Ln1Scale, l.ln1_scale),
                (Ln1Shift, l.ln1_shift),
                (Wq, l.wq),
                (Wk, l.wk),
                (Wv, l.wv),
                (Wo, l.wo),
                (Ln2Scale, l.ln2_scale),
                (Ln2Shift, l.ln2_shift),
                (WIn, l.w_in),
                (BIn, l.b_in),
                (WOut, l.w_out),
                (BOut, l.b_out),
            ] {
                out.push((ParamRef::Layer(i, f), id));
            }
        }
        out.push((ParamRef::FinalLnScale, self.final_ln_scale));
        out.push((ParamRef::FinalLnShift, self.final_ln_shift));
        out
    }
}

/// Flatten images `[n, c, h, w]` into per-patch rows `(n·g² × c·p²)`,
/// channel-major within each patch.
pub fn patchify(images: &Tensor, patch: usize, channels: usize) -> Result<(Tensor, usize)> {
    let shape = images.shape();
    if shape.len() != 4 {
        return Err(SnapError::shape("patchify", format!("expected [n,c,h,w], got {shape:?}")));
    }
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    if c != channels {
        return Err(SnapError::shape("patchify", format!("{c} channels, model expects {channels}")));
    }
    if h != w || h % patch != 0 {
        return Err(SnapError::shape("patchify", format!("{h}×{w} images with patch {patch}")));
    }
    let g = h / patch;
    let pd = c * patch * patch;
    let mut out = Tensor::zeros(&[n * g * g, pd]);
    let data = images.data();
    for b in 0..n {
        for gy in 0..g {
            for gx in 0..g {
                let row = out.row_mut(b * g * g + gy * g + gx);
                let mut k = 0;
                for ch in 0..c {
                    for py in 0..patch {
                        let y = gy * patch + py;
                        let base = ((b * c + ch) * h + y) * w + gx * patch;
                        row[k..k + patch].copy_from_slice(&data[base..base + patch]);
                        k += patch;
                    }
                }
            }
        }
    }
    Ok((out, g))
}

/// Bilinear interpolation matrix between square token grids, with an
/// identity row for the CLS position when present. Maps config-resolution
/// positional embeddings to a crop's token count.
pub fn pos_interp_matrix(g_src: usize, g_dst: usize, cls: bool) -> Tensor {
    let extra = usize::from(cls);
    let rows = g_dst * g_dst + extra;
    let cols = g_src * g_src + extra;
    let mut m = Tensor::zeros(&[rows, cols]);
    if cls {
        m.set2(0, 0, 1.0);
    }
    let coord = |i: usize| -> f64 {
        if g_dst == 1 {
            (g_src as f64 - 1.0) / 2.0
        } else {
            i as f64 * (g_src as f64 - 1.0) / (g_dst as f64 - 1.0)
        }
    };
    for dy in 0..g_dst {
        for dx in 0..g_dst {
            let (y, x) = (coord(dy), coord(dx));
            let (y0, x0) = (y.floor() as usize, x.floor() as usize);
            let (y1, x1) = ((y0 + 1).min(g_src - 1), (x0 + 1).min(g_src - 1));
            let (fy, fx) = (y - y0 as f64, x - x0 as f64);
            let row = extra + dy * g_dst + dx;
            let mut add = |sy: usize, sx: usize, wgt: f64| {
                if wgt != 0.0 {
                    let col = extra + sy * g_src + sx;
                    m.set2(row, col, m.at2(row, col) + wgt);
                }
            };
            add(y0, x0, (1.0 - fy) * (1.0 - fx));
            add(y0, x1, (1.0 - fy) * fx);
            add(y1, x0, fy * (1.0 - fx));
            add(y1, x1, fy * fx);
        }
    }
    m
}

/// Token embedding stage: patchify, linear patch embedding, CLS prepend,
/// positional embeddings. Mask-independent; returns the token matrix
/// `(batch·n_tokens × d_model)` and the per-image token count.
pub(crate) fn embed_graph<E: Exec>(
    ex: &mut E,
    bound: &Bound<E::V>,
    w: &ModelWeights,
    images: &Tensor,
) -> Result<(E::V, usize)> {
    let cfg = &w.config;
    let (patches, g) = patchify(images, cfg.patch_size, cfg.n_channels)?;
    let n = images.shape()[0];
    let n_tok = g * g + usize::from(cfg.cls_token);

    let patch_leaf = ex.leaf(patches);
    let mut x = ex.matmul_nt(&patch_leaf, &bound.patch_embed)?;
    if let Some(cls) = &bound.cls_token {
        x = ex.prepend_row_tiled(cls, &x, g * g)?;
    }
    let pos = if g == cfg.grid() {
        bound.pos_embed.clone()
    } else {
        let interp = ex.leaf(pos_interp_matrix(cfg.grid(), g, cfg.cls_token));
        ex.matmul_nn(&interp, &bound.pos_embed)?
    };
    x = ex.add_tiled(&x, &pos, n)?;
    Ok((x, n_tok))
}

/// Encoder stage: the masked transformer blocks, final layernorm, and the
/// embedding readout (CLS token, or mean of patch tokens without CLS).
pub(crate) fn encode_graph<E: Exec>(
    ex: &mut E,
    bound: &Bound<E::V>,
    w: &ModelWeights,
    mask: &PruneMask,
    tokens: E::V,
    n_images: usize,
    n_tok: usize,
) -> Result<E::V> {
    let cfg = &w.config;
    let n = n_images;
    check_mask_dims(w, mask)?;
    let mut x = tokens;

    for (l, (layer, lw)) in bound.layers.iter().zip(&w.layers).enumerate() {
        let n_heads = lw.n_heads(cfg.d_key);
        let head_mask: Vec<f64> = mask.heads[l].iter().map(|&m| m as f64).collect();
        let ln1 = ex.layernorm(&x, &layer.ln1_scale, &layer.ln1_shift)?;
        let q = ex.matmul_nt(&ln1, &layer.wq)?;
        let k = ex.matmul_nt(&ln1, &layer.wk)?;
        let v = ex.matmul_nt(&ln1, &layer.wv)?;
        let spec = MhaSpec { n_heads, d_key: cfg.d_key, n_tokens: n_tok, head_mask };
        let ctx = ex.mha(&q, &k, &v, spec)?;
        ex.capture_attn_ctx(l, &ctx);
        let attn_out = ex.matmul_nt(&ctx, &layer.wo)?;
        x = ex.add(&x, &attn_out)?;

        let ln2 = ex.layernorm(&x, &layer.ln2_scale, &layer.ln2_shift)?;
        let pre = ex.matmul_nt(&ln2, &layer.w_in)?;
        let pre = ex.add_bias(&pre, &layer.b_in)?;
        let mut hidden = ex.gelu(&pre);
        if mask.neurons[l].iter().any(|&m| m == 0) {
            let mvec = ex.leaf(Tensor::from_vec(
                &[1, mask.neurons[l].len()],
                mask.neurons[l].iter().map(|&m| m as f64).collect(),
            ));
            hidden = ex.mul_cols(&hidden, &mvec)?;
        }
        ex.capture_ffn_hidden(l, &hidden);
        let ffn = ex.matmul_nt(&hidden, &layer.w_out)?;
        let ffn = ex.add_bias(&ffn, &layer.b_out)?;
        x = ex.add(&x, &ffn)?;
    }

    let x = ex.layernorm(&x, &bound.final_ln_scale, &bound.final_ln_shift)?;
    if cfg.cls_token {
        let idx: Vec<usize> = (0..n).map(|b| b * n_tok).collect();
        ex.select_rows(&x, idx)
    } else {
        ex.mean_pool_groups(&x, n_tok)
    }
}

/// Generic forward: embeds `images`, runs the masked encoder, and returns
/// per-image embeddings — the CLS token after the final layernorm, or the
/// mean of patch tokens for CLS-free models.
pub(crate) fn forward_graph<E: Exec>(
    ex: &mut E,
    bound: &Bound<E::V>,
    w: &ModelWeights,
    mask: &PruneMask,
    images: &Tensor,
) -> Result<E::V> {
    let (tokens, n_tok) = embed_graph(ex, bound, w, images)?;
    encode_graph(ex, bound, w, mask, tokens, images.shape()[0], n_tok)
}

fn check_mask_dims(w: &ModelWeights, mask: &PruneMask) -> Result<()> {
    if mask.heads.len() != w.layers.len() || mask.neurons.len() != w.layers.len() {
        return Err(SnapError::Constraint("mask layer count does not match model".into()));
    }
    for (l, layer) in w.layers.iter().enumerate() {
        if mask.heads[l].len() != layer.n_heads(w.config.d_key) {
            return Err(SnapError::Constraint(format!(
                "mask head count {} vs model {} at layer {l}",
                mask.heads[l].len(),
                layer.n_heads(w.config.d_key)
            )));
        }
        if mask.neurons[l].len() != layer.d_ff() {
            return Err(SnapError::Constraint(format!(
                "mask neuron count {} vs model {} at layer {l}",
                mask.neurons[l].len(),
                layer.d_ff()
            )));
        }
    }
    Ok(())
}

/// Plain forward: embeddings for a batch of images under a structure mask.
pub fn forward(w: &ModelWeights, mask: &PruneMask, images: &Tensor) -> Result<Tensor> {
    let mut ex = PlainExec::new();
    let bound = bind(&mut ex, w);
    forward_graph(&mut ex, &bound, w, mask, images)
}

/// Plain embedding stage only: the token matrix fed to the first encoder
/// block and the per-image token count. Depends only on the (unprunable)
/// patch/positional embeddings, so it can be computed once and reused across
/// masks via [`encode_tokens`].
pub fn embed_tokens(w: &ModelWeights, images: &Tensor) -> Result<(Tensor, usize)> {
    let mut ex = PlainExec::new();
    let bound = bind(&mut ex, w);
    embed_graph(&mut ex, &bound, w, images)
}

/// Plain encoder stage on a precomputed token matrix (see [`embed_tokens`]).
/// `forward(w, mask, images)` equals
/// `encode_tokens(w, mask, tokens, n, n_tok)` bit for bit.
pub fn encode_tokens(
    w: &ModelWeights,
    mask: &PruneMask,
    tokens: &Tensor,
    n_images: usize,
    n_tok: usize,
) -> Result<Tensor> {
    if tokens.rows() != n_images * n_tok {
        return Err(SnapError::shape("encode_tokens", "token rows must be n_images·n_tokens"));
    }
    let mut ex = PlainExec::new();
    let bound = bind(&mut ex, w);
    encode_graph(&mut ex, &bound, w, mask, tokens.clone(), n_images, n_tok)
}

/// Plain forward that also returns token-level activation taps per layer.
pub fn forward_with_taps(
    w: &ModelWeights,
    mask: &PruneMask,
    images: &Tensor,
) -> Result<(Tensor, LayerTaps)> {
    let mut ex = PlainExec::with_taps();
    let bound = bind(&mut ex, w);
    let out = forward_graph(&mut ex, &bound, w, mask, images)?;
    let mut taps = ex.taps.take().unwrap();
    taps.n_tokens = images.shape()[2] / w.config.patch_size * (images.shape()[3] / w.config.patch_size)
        + usize::from(w.config.cls_token);
    Ok((out, taps))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vit::{compact, ViTConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn toy_weights(seed: u64) -> ModelWeights {
        ModelWeights::random_init(&ViTConfig::toy(), seed).unwrap()
    }

    fn random_images(rng: &mut ChaCha12Rng, n: usize, size: usize) -> Tensor {
        let shape = [n, 3, size, size];
        let len: usize = shape.iter().product();
        Tensor::from_vec(&shape, (0..len).map(|_| rng.gen_range(0.0..1.0)).collect())
    }

    #[test]
    fn plain_and_tape_paths_agree_exactly() {
        let w = toy_weights(3);
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let images = random_images(&mut rng, 2, 32);
        let mut mask = PruneMask::all_keep(&w.config);
        mask.heads[1][2] = 0;
        mask.neurons[0][7] = 0;

        let plain = forward(&w, &mask, &images).unwrap();
        let mut tape = GradTape::new();
        let mut ex = TapeExec { tape: &mut tape };
        let bound = bind(&mut ex, &w);
        let out = forward_graph(&mut ex, &bound, &w, &mask, &images).unwrap();
        assert_eq!(plain, *tape.value(out));
    }

    #[test]
    fn all_keep_mask_is_identity_to_compacted_all_keep() {
        let w = toy_weights(11);
        let mut rng = ChaCha12Rng::seed_from_u64(6);
        let images = random_images(&mut rng, 3, 32);
        let mask = PruneMask::all_keep(&w.config);
        let a = forward(&w, &mask, &images).unwrap();
        let compacted = compact(&w, &mask).unwrap();
        let b = forward(&compacted, &compacted.all_keep_mask(), &images).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn masking_equals_slice_deletion() {
        // Masked forward vs physically removing the structures: the oracle
        // here slices tensors directly rather than reusing compact().
        let w = toy_weights(19);
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        let images = random_images(&mut rng, 2, 32);
        let mut mask = PruneMask::all_keep(&w.config);
        mask.heads[2][0] = 0;
        mask.neurons[3][17] = 0;
        mask.neurons[3][99] = 0;
        let masked = forward(&w, &mask, &images).unwrap();

        let mut sliced = w.clone();
        {
            let l = &mut sliced.layers[2];
            let dk = w.config.d_key;
            // Delete head 0: drop its rows from wq/wk/wv and columns of wo.
            let keep_rows: Vec<usize> = (dk..l.wq.rows()).collect();
            for t in [&mut l.wq, &mut l.wk, &mut l.wv] {
                let mut nt = Tensor::zeros(&[keep_rows.len(), t.cols()]);
                for (d, &s) in keep_rows.iter().enumerate() {
                    let row = t.row(s).to_vec();
                    nt.row_mut(d).copy_from_slice(&row);
                }
                *t = nt;
            }
            let mut wo = Tensor::zeros(&[l.wo.rows(), keep_rows.len()]);
            for i in 0..l.wo.rows() {
                for (d, &s) in keep_rows.iter().enumerate() {
                    wo.set2(i, d, l.wo.at2(i, s));
                }
            }
            l.wo = wo;
        }
        {
            let l = &mut sliced.layers[3];
            let keep: Vec<usize> = (0..128).filter(|&j| j != 17 && j != 99).collect();
            let mut w_in = Tensor::zeros(&[keep.len(), l.w_in.cols()]);
            for (d, &s) in keep.iter().enumerate() {
                let row = l.w_in.row(s).to_vec();
                w_in.row_mut(d).copy_from_slice(&row);
            }
            l.w_in = w_in;
            l.b_in = Tensor::from_vec(&[1, keep.len()], keep.iter().map(|&j| l.b_in.data()[j]).collect());
            let mut w_out = Tensor::zeros(&[l.w_out.rows(), keep.len()]);
            for i in 0..l.w_out.rows() {
                for (d, &s) in keep.iter().enumerate() {
                    w_out.set2(i, d, l.w_out.at2(i, s));
                }
            }
            l.w_out = w_out;
        }
        let deleted = forward(&sliced, &sliced.all_keep_mask(), &images).unwrap();
        for (a, b) in masked.data().iter().zip(deleted.data()) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn masking_all_ffn_neurons_is_residual_passthrough() {
        // With b_out = 0 (as initialized), zeroing every neuron of a layer's
        // FFN must equal a model whose FFN output is exactly zero.
        let w = toy_weights(23);
        let mut rng = ChaCha12Rng::seed_from_u64(8);
        let images = random_images(&mut rng, 2, 32);
        let mut mask = PruneMask::all_keep(&w.config);
        for j in 0..w.config.d_ff {
            mask.neurons[1][j] = 0;
        }
        let masked = forward(&w, &mask, &images).unwrap();
        let mut passthrough = w.clone();
        passthrough.layers[1].w_out = Tensor::zeros(&[w.config.d_model, w.config.d_ff]);
        let expect = forward(&passthrough, &PruneMask::all_keep(&w.config), &images).unwrap();
        assert_eq!(masked, expect);
    }

    #[test]
    fn masking_is_idempotent() {
        let w = toy_weights(29);
        let mut rng = ChaCha12Rng::seed_from_u64(9);
        let images = random_images(&mut rng, 2, 32);
        let mut mask = PruneMask::all_keep(&w.config);
        mask.heads[0][3] = 0;
        mask.neurons[2][64] = 0;
        let once = forward(&w, &mask, &images).unwrap();
        // Applying the mask twice: compact once, then run the same structure
        // mask again (now all-keep on the compacted shapes).
        let compacted = compact(&w, &mask).unwrap();
        let twice = forward(&compacted, &compacted.all_keep_mask(), &images).unwrap();
        for (a, b) in once.data().iter().zip(twice.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn compact_equivalence_random_masks() {
        let w = toy_weights(31);
        let mut rng = ChaCha12Rng::seed_from_u64(10);
        let images = random_images(&mut rng, 4, 32);
        for trial in 0..5 {
            let mut mask = PruneMask::all_keep(&w.config);
            for l in 0..w.config.n_layers {
                for h in 0..w.config.n_heads {
                    if rng.gen_bool(0.3) && mask.kept_heads(l) > 1 {
                        mask.heads[l][h] = 0;
                    }
                }
                for j in 0..w.config.d_ff {
                    if rng.gen_bool(0.4) && mask.kept_neurons(l) > 6 {
                        mask.neurons[l][j] = 0;
                    }
                }
            }
            let masked = forward(&w, &mask, &images).unwrap();
            let compacted = compact(&w, &mask).unwrap();
            let dense = forward(&compacted, &compacted.all_keep_mask(), &images).unwrap();
            let mut max_rel = 0.0f64;
            for (a, b) in masked.data().iter().zip(dense.data()) {
                let rel = (a - b).abs() / a.abs().max(b.abs()).max(1e-12);
                max_rel = max_rel.max(rel);
            }
            assert!(max_rel < 1e-5, "trial {trial}: max rel {max_rel}");
        }
    }

    #[test]
    fn headless_model_pools_patch_tokens() {
        let mut cfg = ViTConfig::toy();
        cfg.cls_token = false;
        let w = ModelWeights::random_init(&cfg, 2).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        let images = random_images(&mut rng, 2, 32);
        let emb = forward(&w, &PruneMask::all_keep(&cfg), &images).unwrap();
        assert_eq!(emb.shape(), &[2, cfg.d_model]);
    }

    #[test]
    fn variable_resolution_uses_interpolated_positions() {
        let w = toy_weights(37);
        let mut rng = ChaCha12Rng::seed_from_u64(12);
        let images = random_images(&mut rng, 2, 16); // 2×2 patch grid
        let emb = forward(&w, &PruneMask::all_keep(&w.config), &images).unwrap();
        assert_eq!(emb.shape(), &[2, 64]);
        // Same-size interpolation matrix is exactly the identity.
        let m = pos_interp_matrix(4, 4, true);
        for i in 0..17 {
            for j in 0..17 {
                assert_eq!(m.at2(i, j), if i == j { 1.0 } else { 0.0 });
            }
        }
    }

    #[test]
    fn interp_rows_are_convex_weights() {
        let m = pos_interp_matrix(4, 2, true);
        for i in 0..m.rows() {
            let s: f64 = m.row(i).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
            assert!(m.row(i).iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn forward_rejects_bad_inputs() {
        let w = toy_weights(41);
        let mask = PruneMask::all_keep(&w.config);
        // Wrong channel count.
        let img = Tensor::zeros(&[1, 1, 32, 32]);
        assert!(forward(&w, &mask, &img).is_err());
        // Size not divisible by patch.
        let img = Tensor::zeros(&[1, 3, 20, 20]);
        assert!(forward(&w, &mask, &img).is_err());
        // Mask shaped for a different model.
        let img = Tensor::zeros(&[1, 3, 32, 32]);
        let bad = PruneMask { heads: vec![vec![1; 2]; 4], neurons: mask.neurons.clone() };
        assert!(forward(&w, &bad, &img).is_err());
    }

    #[test]
    fn taps_have_expected_shapes() {
        let w = toy_weights(43);
        let mut rng = ChaCha12Rng::seed_from_u64(13);
        let images = random_images(&mut rng, 3, 32);
        let (_, taps) = forward_with_taps(&w, &PruneMask::all_keep(&w.config), &images).unwrap();
        assert_eq!(taps.n_tokens, 17);
        assert_eq!(taps.attn_ctx.len(), 4);
        assert_eq!(taps.ffn_hidden.len(), 4);
        for t in &taps.attn_ctx {
            assert_eq!(t.shape(), &[3 * 17, 64]);
        }
        for t in &taps.ffn_hidden {
            assert_eq!(t.shape(), &[3 * 17, 128]);
        }
    }
}
