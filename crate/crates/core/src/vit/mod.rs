//! Vision transformer model: configuration, prunable-structure bookkeeping,
//! weights, masking, and physical compaction.
//!
//! Prunable structures are attention heads and individual FFN neurons.
//! Everything else (embeddings, layernorms, biases of the residual stream)
//! is never pruned. Head `h` of a layer owns rows `h·d_key..(h+1)·d_key` of
//! Wq/Wk/Wv and the matching columns of Wo; FFN neuron `j` owns row `j` of
//! W_in, entry `j` of b_in, and column `j` of W_out.

pub mod forward;

use crate::error::{Result, SnapError};
use crate::ssl::SslHeadWeights;
use crate::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ViTConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub n_channels: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_key: usize,
    pub d_ff: usize,
    /// 0 means headless (no classifier logits term in FLOPs).
    pub n_classes: usize,
    pub cls_token: bool,
}

impl ViTConfig {
    /// Small config used throughout the test suite: 32² images, 8×8 patches,
    /// 4 layers × (4 heads + 128 FFN neurons) → 20 units, 528 structures.
    pub fn toy() -> ViTConfig {
        ViTConfig {
            image_size: 32,
            patch_size: 8,
            n_channels: 3,
            d_model: 64,
            n_layers: 4,
            n_heads: 4,
            d_key: 16,
            d_ff: 128,
            n_classes: 0,
            cls_token: true,
        }
    }

    pub fn vit_s16() -> ViTConfig {
        ViTConfig {
            image_size: 224,
            patch_size: 16,
            n_channels: 3,
            d_model: 384,
            n_layers: 12,
            n_heads: 6,
            d_key: 64,
            d_ff: 1536,
            n_classes: 1000,
            cls_token: true,
        }
    }

    pub fn vit_b16() -> ViTConfig {
        ViTConfig {
            d_model: 768,
            n_heads: 12,
            d_ff: 3072,
            ..ViTConfig::vit_s16()
        }
    }

    pub fn vit_l16() -> ViTConfig {
        ViTConfig {
            d_model: 1024,
            n_layers: 24,
            n_heads: 16,
            d_ff: 4096,
            ..ViTConfig::vit_s16()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 || self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return Err(SnapError::Config(format!(
                "patch size {} must divide image size {}",
                self.patch_size, self.image_size
            )));
        }
        if self.d_model == 0
            || self.n_layers == 0
            || self.n_heads == 0
            || self.d_key == 0
            || self.d_ff == 0
            || self.n_channels == 0
        {
            return Err(SnapError::Config("model dimensions must be positive".into()));
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn n_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn n_tokens(&self) -> usize {
        self.n_patches() + usize::from(self.cls_token)
    }

    pub fn patch_dim(&self) -> usize {
        self.n_channels * self.patch_size * self.patch_size
    }

    /// Tokens for an input of a different (square) resolution.
    pub fn n_tokens_for(&self, image_size: usize) -> Result<usize> {
        if image_size == 0 || image_size % self.patch_size != 0 {
            return Err(SnapError::Config(format!(
                "input size {image_size} not divisible by patch size {}",
                self.patch_size
            )));
        }
        let g = image_size / self.patch_size;
        Ok(g * g + usize::from(self.cls_token))
    }
}

/// Kind of prunable structure. Ordering (heads before neurons) is part of
/// the deterministic tie-break contract in rankings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum StructureKind {
    AttentionHead,
    FfnNeuron,
}

/// One prunable structure.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct StructureId {
    pub layer: usize,
    pub kind: StructureKind,
    pub index: usize,
}

/// One cross-block interaction unit: a single attention head or a whole FFN
/// block. The search space has one correlation factor per unit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct UnitId {
    pub layer: usize,
    pub kind: UnitKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum UnitKind {
    Head(usize),
    FfnBlock,
}

/// Which structures carry searchable factors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum UnitMode {
    /// One unit per head plus one per FFN block: B = n_layers·(n_heads+1).
    Full,
    /// FFN blocks only (B = n_layers); heads keep factor 1.
    FfnOnly,
}

/// Deterministic enumeration of structures and units for a config.
/// Structure order is layer-major, heads before FFN neurons, ascending index;
/// this is also the ranking tie-break order.
#[derive(Debug, Clone)]
pub struct StructureCensus {
    pub structures: Vec<StructureId>,
    pub units: Vec<UnitId>,
    /// Structure index → unit index; `None` for structures outside the
    /// searched set (heads in FFN-only mode), whose factor is fixed at 1.
    pub unit_of: Vec<Option<usize>>,
    /// Owned parameter count per structure.
    pub params: Vec<usize>,
    pub mode: UnitMode,
    config: ViTConfig,
}

pub fn structure_census(config: &ViTConfig, mode: UnitMode) -> Result<StructureCensus> {
    config.validate()?;
    let mut structures = Vec::new();
    let mut units = Vec::new();
    let mut unit_of = Vec::new();
    let mut params = Vec::new();
    let head_params = 4 * config.d_key * config.d_model;
    let neuron_params = 2 * config.d_model + 1;
    for layer in 0..config.n_layers {
        let ffn_unit_idx;
        match mode {
            UnitMode::Full => {
                for h in 0..config.n_heads {
                    units.push(UnitId { layer, kind: UnitKind::Head(h) });
                }
                units.push(UnitId { layer, kind: UnitKind::FfnBlock });
                ffn_unit_idx = units.len() - 1;
            }
            UnitMode::FfnOnly => {
                units.push(UnitId { layer, kind: UnitKind::FfnBlock });
                ffn_unit_idx = units.len() - 1;
            }
        }
        for h in 0..config.n_heads {
            structures.push(StructureId { layer, kind: StructureKind::AttentionHead, index: h });
            unit_of.push(match mode {
                UnitMode::Full => Some(ffn_unit_idx - config.n_heads + h),
                UnitMode::FfnOnly => None,
            });
            params.push(head_params);
        }
        for j in 0..config.d_ff {
            structures.push(StructureId { layer, kind: StructureKind::FfnNeuron, index: j });
            unit_of.push(Some(ffn_unit_idx));
            params.push(neuron_params);
        }
    }
    Ok(StructureCensus { structures, units, unit_of, params, mode, config: config.clone() })
}

impl StructureCensus {
    pub fn n_structures(&self) -> usize {
        self.structures.len()
    }

    pub fn n_units(&self) -> usize {
        self.units.len()
    }

    pub fn total_owned_params(&self) -> usize {
        self.params.iter().sum()
    }

    pub fn config(&self) -> &ViTConfig {
        &self.config
    }

    /// Flat index of a structure in census order.
    pub fn index_of(&self, s: &StructureId) -> usize {
        let per_layer = self.config.n_heads + self.config.d_ff;
        let base = s.layer * per_layer;
        match s.kind {
            StructureKind::AttentionHead => base + s.index,
            StructureKind::FfnNeuron => base + self.config.n_heads + s.index,
        }
    }
}

/// Binary keep/drop mask over structures. `1` keeps.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PruneMask {
    pub heads: Vec<Vec<u8>>,
    pub neurons: Vec<Vec<u8>>,
}

impl PruneMask {
    pub fn all_keep(config: &ViTConfig) -> PruneMask {
        PruneMask {
            heads: vec![vec![1; config.n_heads]; config.n_layers],
            neurons: vec![vec![1; config.d_ff]; config.n_layers],
        }
    }

    /// All-keep mask shaped to a (possibly compacted) weight set.
    pub fn all_keep_for(weights: &ModelWeights) -> PruneMask {
        PruneMask {
            heads: weights
                .layers
                .iter()
                .map(|l| vec![1; l.n_heads(weights.config.d_key)])
                .collect(),
            neurons: weights.layers.iter().map(|l| vec![1; l.d_ff()]).collect(),
        }
    }

    pub fn is_all_keep(&self) -> bool {
        self.heads.iter().chain(self.neurons.iter()).all(|v| v.iter().all(|&m| m == 1))
    }

    pub fn drop(&mut self, s: &StructureId) {
        match s.kind {
            StructureKind::AttentionHead => self.heads[s.layer][s.index] = 0,
            StructureKind::FfnNeuron => self.neurons[s.layer][s.index] = 0,
        }
    }

    pub fn keeps(&self, s: &StructureId) -> bool {
        match s.kind {
            StructureKind::AttentionHead => self.heads[s.layer][s.index] == 1,
            StructureKind::FfnNeuron => self.neurons[s.layer][s.index] == 1,
        }
    }

    pub fn kept_heads(&self, layer: usize) -> usize {
        self.heads[layer].iter().map(|&m| m as usize).sum()
    }

    pub fn kept_neurons(&self, layer: usize) -> usize {
        self.neurons[layer].iter().map(|&m| m as usize).sum()
    }

    pub fn shape_matches(&self, config: &ViTConfig) -> bool {
        self.heads.len() == config.n_layers
            && self.neurons.len() == config.n_layers
            && self.heads.iter().all(|v| v.len() == config.n_heads)
            && self.neurons.iter().all(|v| v.len() == config.d_ff)
    }

    /// Check the per-layer retention floors.
    pub fn validate(&self, config: &ViTConfig, caps: &RetentionCaps) -> Result<()> {
        if !self.shape_matches(config) {
            return Err(SnapError::Constraint("mask shape does not match config".into()));
        }
        for layer in 0..config.n_layers {
            let min_h = caps.min_heads(config.n_heads);
            let min_f = caps.min_neurons(config.d_ff);
            if self.kept_heads(layer) < min_h {
                return Err(SnapError::Constraint(format!(
                    "layer {layer} keeps {} heads, minimum {min_h}",
                    self.kept_heads(layer)
                )));
            }
            if self.kept_neurons(layer) < min_f {
                return Err(SnapError::Constraint(format!(
                    "layer {layer} keeps {} neurons, minimum {min_f}",
                    self.kept_neurons(layer)
                )));
            }
        }
        Ok(())
    }
}

/// Per-layer retention floors: at most `1 − keep_frac` of a layer's heads or
/// neurons may be pruned. Floors are rounded half-up, with an absolute floor
/// of one structure. The ViT-B/16 defaults (0.2, 0.05) give minimums of
/// 2 heads and 154 neurons per block.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetentionCaps {
    pub head_keep_frac: f64,
    pub ffn_keep_frac: f64,
}

impl Default for RetentionCaps {
    fn default() -> Self {
        RetentionCaps { head_keep_frac: 0.2, ffn_keep_frac: 0.05 }
    }
}

impl RetentionCaps {
    pub fn min_heads(&self, n_heads: usize) -> usize {
        round_half_up(self.head_keep_frac * n_heads as f64).max(1)
    }

    pub fn min_neurons(&self, d_ff: usize) -> usize {
        round_half_up(self.ffn_keep_frac * d_ff as f64).max(1)
    }
}

fn round_half_up(x: f64) -> usize {
    (x + 0.5).floor() as usize
}

/// Weights of one transformer block. Projections are stored output-major
/// (rows = output features), so forwards compute `X·Wᵀ`. Shapes are
/// authoritative: a compacted layer simply has fewer Wq/Wk/Wv/W_in rows and
/// Wo/W_out columns.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub ln1_scale: Tensor,
    pub ln1_shift: Tensor,
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub ln2_scale: Tensor,
    pub ln2_shift: Tensor,
    pub w_in: Tensor,
    pub b_in: Tensor,
    pub w_out: Tensor,
    pub b_out: Tensor,
}

impl LayerWeights {
    pub fn n_heads(&self, d_key: usize) -> usize {
        self.wq.rows() / d_key
    }

    pub fn d_ff(&self) -> usize {
        self.w_in.rows()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights {
    pub config: ViTConfig,
    /// (d_model × n_channels·patch²)
    pub patch_embed: Tensor,
    /// (n_tokens × d_model) at the config resolution; interpolated for
    /// other input sizes.
    pub pos_embed: Tensor,
    pub cls_token: Option<Tensor>,
    pub layers: Vec<LayerWeights>,
    pub final_ln_scale: Tensor,
    pub final_ln_shift: Tensor,
    /// Optional linear classifier (weights (n_classes × d_model), bias).
    pub classifier: Option<(Tensor, Tensor)>,
    pub ssl_head: Option<SslHeadWeights>,
}

impl ModelWeights {
    /// Deterministic random initialization: normal(0, 0.02) projections,
    /// identity layernorms, zero biases.
    pub fn random_init(config: &ViTConfig, seed: u64) -> Result<ModelWeights> {
        config.validate()?;
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mut normal = |shape: &[usize], std: f64| -> Tensor {
            let n: usize = shape.iter().product();
            let data = (0..n)
                .map(|_| <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng) * std)
                .collect();
            Tensor::from_vec(shape, data)
        };
        let d = config.d_model;
        let width = config.n_heads * config.d_key;
        let patch_embed = normal(&[d, config.patch_dim()], 0.02);
        let pos_embed = normal(&[config.n_tokens(), d], 0.02);
        let cls_token = config.cls_token.then(|| normal(&[1, d], 0.02));
        let mut layers = Vec::with_capacity(config.n_layers);
        for _ in 0..config.n_layers {
            layers.push(LayerWeights {
                ln1_scale: Tensor::filled(&[1, d], 1.0),
                ln1_shift: Tensor::zeros(&[1, d]),
                wq: normal(&[width, d], 0.02),
                wk: normal(&[width, d], 0.02),
                wv: normal(&[width, d], 0.02),
                wo: normal(&[d, width], 0.02),
                ln2_scale: Tensor::filled(&[1, d], 1.0),
                ln2_shift: Tensor::zeros(&[1, d]),
                w_in: normal(&[config.d_ff, d], 0.02),
                b_in: Tensor::zeros(&[1, config.d_ff]),
                w_out: normal(&[d, config.d_ff], 0.02),
                b_out: Tensor::zeros(&[1, d]),
            });
        }
        let classifier = (config.n_classes > 0)
            .then(|| (normal(&[config.n_classes, d], 0.02), Tensor::zeros(&[1, config.n_classes])));
        Ok(ModelWeights {
            config: config.clone(),
            patch_embed,
            pos_embed,
            cls_token,
            layers,
            final_ln_scale: Tensor::filled(&[1, d], 1.0),
            final_ln_shift: Tensor::zeros(&[1, d]),
            classifier,
            ssl_head: None,
        })
    }

    /// Structural consistency between tensors and config (allowing
    /// compacted per-layer widths).
    pub fn validate(&self) -> Result<()> {
        let c = &self.config;
        c.validate()?;
        let d = c.d_model;
        let check = |cond: bool, what: &str| -> Result<()> {
            if cond {
                Ok(())
            } else {
                Err(SnapError::Dimension(format!("weight tensor {what} has inconsistent shape")))
            }
        };
        check(self.patch_embed.shape() == [d, c.patch_dim()], "patch_embed")?;
        check(self.pos_embed.shape() == [c.n_tokens(), d], "pos_embed")?;
        check(self.cls_token.is_some() == c.cls_token, "cls_token presence")?;
        if let Some(cls) = &self.cls_token {
            check(cls.shape() == [1, d], "cls_token")?;
        }
        check(self.layers.len() == c.n_layers, "layer count")?;
        for (i, l) in self.layers.iter().enumerate() {
            let name = format!("layer{i}");
            let h = l.wq.rows();
            check(h % c.d_key == 0 && h > 0 && h <= c.n_heads * c.d_key, &format!("{name}.wq"))?;
            check(l.wk.shape() == l.wq.shape(), &format!("{name}.wk"))?;
            check(l.wv.shape() == l.wq.shape(), &format!("{name}.wv"))?;
            check(l.wq.cols() == d, &format!("{name}.wq cols"))?;
            check(l.wo.shape() == [d, h], &format!("{name}.wo"))?;
            let f = l.w_in.rows();
            check(f > 0 && f <= c.d_ff && l.w_in.cols() == d, &format!("{name}.w_in"))?;
            check(l.b_in.len() == f, &format!("{name}.b_in"))?;
            check(l.w_out.shape() == [d, f], &format!("{name}.w_out"))?;
            check(l.b_out.len() == d, &format!("{name}.b_out"))?;
            for (t, n) in [
                (&l.ln1_scale, "ln1_scale"),
                (&l.ln1_shift, "ln1_shift"),
                (&l.ln2_scale, "ln2_scale"),
                (&l.ln2_shift, "ln2_shift"),
            ] {
                check(t.len() == d, &format!("{name}.{n}"))?;
            }
        }
        check(self.final_ln_scale.len() == d, "final_ln_scale")?;
        check(self.final_ln_shift.len() == d, "final_ln_shift")?;
        if let Some((w, b)) = &self.classifier {
            check(w.shape() == [c.n_classes, d], "classifier weight")?;
            check(b.len() == c.n_classes, "classifier bias")?;
        }
        Ok(())
    }

    /// Total scalar parameter count across all tensors (including any SSL
    /// head and classifier).
    pub fn n_params(&self) -> usize {
        let mut n = self.patch_embed.len() + self.pos_embed.len();
        n += self.cls_token.as_ref().map_or(0, Tensor::len);
        for l in &self.layers {
            n += l.ln1_scale.len()
                + l.ln1_shift.len()
                + l.wq.len()
                + l.wk.len()
                + l.wv.len()
                + l.wo.len()
                + l.ln2_scale.len()
                + l.ln2_shift.len()
                + l.w_in.len()
                + l.b_in.len()
                + l.w_out.len()
                + l.b_out.len();
        }
        n += self.final_ln_scale.len() + self.final_ln_shift.len();
        if let Some((w, b)) = &self.classifier {
            n += w.len() + b.len();
        }
        if let Some(h) = &self.ssl_head {
            n += h.proj.len();
        }
        n
    }

    pub fn all_keep_mask(&self) -> PruneMask {
        PruneMask::all_keep_for(self)
    }
}

/// Physically remove masked structures: slice the owned rows/columns out of
/// every affected tensor. The result computes the same function as the
/// masked model (layernorms see the full residual stream either way).
pub fn compact(weights: &ModelWeights, mask: &PruneMask) -> Result<ModelWeights> {
    if !mask.shape_matches(&weights.config) {
        return Err(SnapError::Constraint("mask shape does not match model config".into()));
    }
    let d_key = weights.config.d_key;
    let mut out = weights.clone();
    for (l, layer) in out.layers.iter_mut().enumerate() {
        let head_rows: Vec<usize> = (0..weights.config.n_heads)
            .filter(|&h| mask.heads[l][h] == 1)
            .flat_map(|h| (h * d_key)..((h + 1) * d_key))
            .collect();
        if head_rows.is_empty() {
            return Err(SnapError::Constraint(format!("layer {l} would keep zero heads")));
        }
        layer.wq = take_rows(&layer.wq, &head_rows);
        layer.wk = take_rows(&layer.wk, &head_rows);
        layer.wv = take_rows(&layer.wv, &head_rows);
        layer.wo = take_cols(&layer.wo, &head_rows);
        let neuron_rows: Vec<usize> =
            (0..weights.config.d_ff).filter(|&j| mask.neurons[l][j] == 1).collect();
        if neuron_rows.is_empty() {
            return Err(SnapError::Constraint(format!("layer {l} would keep zero neurons")));
        }
        layer.w_in = take_rows(&layer.w_in, &neuron_rows);
        layer.b_in = Tensor::from_vec(
            &[1, neuron_rows.len()],
            neuron_rows.iter().map(|&j| layer.b_in.data()[j]).collect(),
        );
        layer.w_out = take_cols(&layer.w_out, &neuron_rows);
    }
    Ok(out)
}

fn take_rows(t: &Tensor, rows: &[usize]) -> Tensor {
    let n = t.cols();
    let mut out = Tensor::zeros(&[rows.len(), n]);
    for (dst, &src) in rows.iter().enumerate() {
        let data = t.row(src).to_vec();
        out.row_mut(dst).copy_from_slice(&data);
    }
    out
}

fn take_cols(t: &Tensor, cols: &[usize]) -> Tensor {
    let m = t.rows();
    let mut out = Tensor::zeros(&[m, cols.len()]);
    for i in 0..m {
        for (dst, &src) in cols.iter().enumerate() {
            out.set2(i, dst, t.at2(i, src));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn census_counts_toy() {
        let census = structure_census(&ViTConfig::toy(), UnitMode::Full).unwrap();
        assert_eq!(census.n_units(), 20); // 4·(4+1)
        assert_eq!(census.n_structures(), 528); // 4·(4+128)
    }

    #[test]
    fn census_counts_vit_b16() {
        let census = structure_census(&ViTConfig::vit_b16(), UnitMode::Full).unwrap();
        assert_eq!(census.n_units(), 156); // 12·(12+1)
        assert_eq!(census.n_structures(), 12 * (12 + 3072));
    }

    #[test]
    fn census_owned_params_closed_form() {
        let c = ViTConfig::toy();
        let census = structure_census(&c, UnitMode::Full).unwrap();
        let heads = c.n_layers * c.n_heads * 4 * c.d_key * c.d_model;
        let neurons = c.n_layers * c.d_ff * (2 * c.d_model + 1);
        assert_eq!(census.total_owned_params(), heads + neurons);
    }

    #[test]
    fn census_every_structure_has_exactly_one_unit_in_full_mode() {
        let census = structure_census(&ViTConfig::toy(), UnitMode::Full).unwrap();
        // Partition check: membership column sums over units equal structure
        // counts per unit kind.
        let mut per_unit = vec![0usize; census.n_units()];
        for u in census.unit_of.iter() {
            per_unit[u.expect("full mode: every structure in a unit")] += 1;
        }
        for (i, unit) in census.units.iter().enumerate() {
            let expect = match unit.kind {
                UnitKind::Head(_) => 1,
                UnitKind::FfnBlock => ViTConfig::toy().d_ff,
            };
            assert_eq!(per_unit[i], expect, "unit {unit:?}");
        }
    }

    #[test]
    fn census_ffn_only_mode() {
        let c = ViTConfig::toy();
        let census = structure_census(&c, UnitMode::FfnOnly).unwrap();
        assert_eq!(census.n_units(), c.n_layers);
        for (s, u) in census.structures.iter().zip(&census.unit_of) {
            match s.kind {
                StructureKind::AttentionHead => assert!(u.is_none()),
                StructureKind::FfnNeuron => assert_eq!(*u, Some(s.layer)),
            }
        }
    }

    #[test]
    fn census_index_of_round_trips() {
        let census = structure_census(&ViTConfig::toy(), UnitMode::Full).unwrap();
        for (i, s) in census.structures.iter().enumerate() {
            assert_eq!(census.index_of(s), i);
        }
    }

    #[test]
    fn retention_floors_match_published_vit_b_numbers() {
        let caps = RetentionCaps::default();
        assert_eq!(caps.min_heads(12), 2); // at least 2 heads per ViT-B block
        assert_eq!(caps.min_neurons(3072), 154); // at least 154 neurons
        // Toy floors.
        assert_eq!(caps.min_heads(4), 1);
        assert_eq!(caps.min_neurons(128), 6);
    }

    #[test]
    fn mask_validation_enforces_floors() {
        let c = ViTConfig::toy();
        let caps = RetentionCaps::default();
        let mut mask = PruneMask::all_keep(&c);
        mask.validate(&c, &caps).unwrap();
        for h in 0..4 {
            mask.heads[1][h] = 0;
        }
        assert!(matches!(mask.validate(&c, &caps), Err(SnapError::Constraint(_))));
    }

    #[test]
    fn random_init_is_deterministic_and_valid() {
        let c = ViTConfig::toy();
        let a = ModelWeights::random_init(&c, 7).unwrap();
        let b = ModelWeights::random_init(&c, 7).unwrap();
        assert_eq!(a, b);
        a.validate().unwrap();
        let other = ModelWeights::random_init(&c, 8).unwrap();
        assert_ne!(a, other);
    }

    #[test]
    fn compact_removes_expected_param_counts() {
        let c = ViTConfig::toy();
        let w = ModelWeights::random_init(&c, 1).unwrap();
        let mut mask = PruneMask::all_keep(&c);
        mask.heads[0][1] = 0; // one head: 4·d_key·d_model owned params
        mask.neurons[2][5] = 0; // one neuron: 2·d_model+1
        let small = compact(&w, &mask).unwrap();
        small.validate().unwrap();
        let head_owned = 4 * c.d_key * c.d_model;
        let neuron_owned = 2 * c.d_model + 1;
        assert_eq!(w.n_params() - small.n_params(), head_owned + neuron_owned);
        assert_eq!(small.layers[0].n_heads(c.d_key), 3);
        assert_eq!(small.layers[2].d_ff(), 127);
    }

    #[test]
    fn compact_rejects_empty_layer() {
        let c = ViTConfig::toy();
        let w = ModelWeights::random_init(&c, 1).unwrap();
        let mut mask = PruneMask::all_keep(&c);
        for h in 0..c.n_heads {
            mask.heads[3][h] = 0;
        }
        assert!(compact(&w, &mask).is_err());
    }
}
